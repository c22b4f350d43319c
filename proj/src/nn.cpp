#include "flowtrace/nn.hpp"

#include <cmath>

namespace flowtrace::nn {

namespace {

void check_finite(const Vec& v, const char* what, int layer) {
  if (!v.allFinite()) {
    throw numeric_error(std::string("non-finite values in ") + what + " at layer " +
                        std::to_string(layer));
  }
}

}  // namespace

void NetworkParams::validate() const {
  if (layers.empty()) throw config_error("network has no layers");
  if (x_dim < 0 || c_dim < 0) throw config_error("negative input block size");
  int expect = in_dim();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& ly = layers[l];
    if (ly.W.cols() != expect) {
      throw config_error("layer " + std::to_string(l) + " expects input " +
                         std::to_string(ly.W.cols()) + ", got " + std::to_string(expect));
    }
    if (ly.b.size() != ly.W.rows()) {
      throw config_error("layer " + std::to_string(l) + " bias size mismatch");
    }
    if (!ly.W.allFinite() || !ly.b.allFinite()) {
      throw config_error("layer " + std::to_string(l) + " has non-finite parameters");
    }
    expect = static_cast<int>(ly.W.rows());
  }
}

void LowRankAdapter::validate(const NetworkParams& net) const {
  if (rank <= 0) throw config_error("adapter rank must be positive");
  if (gate < 0.0 || gate > 1.0) throw config_error("adapter gate outside [0,1]");
  if (layers.size() != net.layers.size()) {
    throw config_error("adapter covers " + std::to_string(layers.size()) + " layers, network has " +
                       std::to_string(net.layers.size()));
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& al = layers[l];
    const auto& nl = net.layers[l];
    if (al.A.rows() != rank || al.A.cols() != nl.W.cols() || al.B.rows() != nl.W.rows() ||
        al.B.cols() != rank) {
      throw config_error("adapter layer " + std::to_string(l) + " shape mismatch");
    }
    if (!al.A.allFinite() || !al.B.allFinite()) {
      throw config_error("adapter layer " + std::to_string(l) + " has non-finite parameters");
    }
  }
}

NetworkParams make_mlp(int x_dim, int c_dim, int out_dim, int hidden, int hidden_layers,
                       Rng& rng, double weight_scale) {
  if (out_dim <= 0 || hidden <= 0 || hidden_layers < 0) {
    throw config_error("bad mlp shape");
  }
  NetworkParams net;
  net.x_dim = x_dim;
  net.c_dim = c_dim;
  int in = net.in_dim();
  for (int l = 0; l < hidden_layers; ++l) {
    Layer ly;
    double s = weight_scale / std::sqrt(static_cast<double>(in));
    ly.W = Mat::NullaryExpr(hidden, in, [&]() { return s * rng.normal(); });
    ly.b = Vec::Zero(hidden);
    net.layers.push_back(std::move(ly));
    in = hidden;
  }
  Layer out;
  double s = weight_scale / std::sqrt(static_cast<double>(in));
  out.W = Mat::NullaryExpr(out_dim, in, [&]() { return s * rng.normal(); });
  out.b = Vec::Zero(out_dim);
  net.layers.push_back(std::move(out));
  net.validate();
  return net;
}

LowRankAdapter make_adapter(const NetworkParams& net, int rank, double alpha, Rng& rng,
                            double a_scale) {
  LowRankAdapter ad;
  ad.rank = rank;
  ad.alpha = alpha;
  ad.gate = 1.0;
  for (const auto& ly : net.layers) {
    AdapterLayer al;
    double s = a_scale / std::sqrt(static_cast<double>(ly.W.cols()));
    al.A = Mat::NullaryExpr(rank, ly.W.cols(), [&]() { return s * rng.normal(); });
    al.B = Mat::Zero(ly.W.rows(), rank);
    ad.layers.push_back(std::move(al));
  }
  ad.validate(net);
  return ad;
}

Vec forward(const NetworkParams& net, const LowRankAdapter* adapter, double gate,
            const Vec& x, double t, const Vec& c, ForwardTrace* trace) {
  if (x.size() != net.x_dim || c.size() != net.c_dim) {
    throw contract_error("forward input blocks (" + std::to_string(x.size()) + "," +
                         std::to_string(c.size()) + ") do not match network (" +
                         std::to_string(net.x_dim) + "," + std::to_string(net.c_dim) + ")");
  }
  if (adapter) adapter->validate(net);
  const bool use_adapter = adapter != nullptr && gate != 0.0;
  const double gs = use_adapter ? gate * adapter->scaling() : 0.0;

  Vec a(net.in_dim());
  a.head(net.x_dim) = x;
  a[net.x_dim] = t;
  a.tail(net.c_dim) = c;

  if (trace) {
    trace->input = a;
    trace->pre.clear();
    trace->post.clear();
    trace->post.push_back(a);
  }

  const std::size_t L = net.layers.size();
  for (std::size_t l = 0; l < L; ++l) {
    const auto& ly = net.layers[l];
    Vec z = ly.W * a + ly.b;
    if (use_adapter) {
      const auto& al = adapter->layers[l];
      z.noalias() += gs * (al.B * (al.A * a));
    }
    check_finite(z, "pre-activation", static_cast<int>(l));
    if (trace) trace->pre.push_back(z);
    if (l + 1 < L) {
      a = z.array().tanh().matrix();
    } else {
      a = z;
    }
    if (trace) trace->post.push_back(a);
  }
  return a;
}

Gradients backward(const NetworkParams& net, const LowRankAdapter* adapter, double gate,
                   const ForwardTrace& trace, const Vec& upstream, bool want_base) {
  const std::size_t L = net.layers.size();
  if (trace.pre.size() != L || trace.post.size() != L + 1) {
    throw contract_error("backward called with a trace from a different network");
  }
  if (upstream.size() != net.out_dim()) {
    throw contract_error("upstream size " + std::to_string(upstream.size()) +
                         " does not match output " + std::to_string(net.out_dim()));
  }
  const bool use_adapter = adapter != nullptr;
  const double gs = use_adapter ? gate * adapter->scaling() : 0.0;

  Gradients g;
  if (want_base) g.base.resize(L);
  if (use_adapter) g.adapter.resize(L);

  Vec delta = upstream;  // d out / d z_l, walking backwards
  for (std::size_t li = L; li-- > 0;) {
    const auto& ly = net.layers[li];
    const Vec& a_in = trace.post[li];
    if (li + 1 < L) {
      // hidden layer: fold in tanh'
      Vec th = trace.post[li + 1];
      delta = (delta.array() * (1.0 - th.array().square())).matrix();
    }
    if (want_base) {
      g.base[li].W = delta * a_in.transpose();
      g.base[li].b = delta;
    }
    Vec back = ly.W.transpose() * delta;
    if (use_adapter) {
      const auto& al = adapter->layers[li];
      if (gate != 0.0) {
        Vec Aa = al.A * a_in;
        g.adapter[li].B = gs * (delta * Aa.transpose());
        g.adapter[li].A = gs * ((al.B.transpose() * delta) * a_in.transpose());
        back.noalias() += gs * (al.A.transpose() * (al.B.transpose() * delta));
      } else {
        g.adapter[li].A = Mat::Zero(al.A.rows(), al.A.cols());
        g.adapter[li].B = Mat::Zero(al.B.rows(), al.B.cols());
      }
    }
    delta = back;
  }
  g.input = delta;
  return g;
}

long param_count(const NetworkParams& net) {
  long n = 0;
  for (const auto& ly : net.layers) n += ly.W.size() + ly.b.size();
  return n;
}

long param_count(const LowRankAdapter& ad) {
  long n = 0;
  for (const auto& al : ad.layers) n += al.A.size() + al.B.size();
  return n;
}

namespace {

void put(Vec& flat, long& off, const Mat& m) {
  flat.segment(off, m.size()) = Eigen::Map<const Vec>(m.data(), m.size());
  off += m.size();
}

void take(const Vec& flat, long& off, Mat& m) {
  Eigen::Map<Vec>(m.data(), m.size()) = flat.segment(off, m.size());
  off += m.size();
}

void put(Vec& flat, long& off, const Vec& v) {
  flat.segment(off, v.size()) = v;
  off += v.size();
}

void take(const Vec& flat, long& off, Vec& v) {
  v = flat.segment(off, v.size());
  off += v.size();
}

}  // namespace

Vec pack(const NetworkParams& net) {
  Vec flat(param_count(net));
  long off = 0;
  for (const auto& ly : net.layers) {
    put(flat, off, ly.W);
    put(flat, off, ly.b);
  }
  return flat;
}

Vec pack(const LowRankAdapter& ad) {
  Vec flat(param_count(ad));
  long off = 0;
  for (const auto& al : ad.layers) {
    put(flat, off, al.A);
    put(flat, off, al.B);
  }
  return flat;
}

void unpack(const Vec& flat, NetworkParams& net) {
  if (flat.size() != param_count(net)) throw contract_error("unpack: network size mismatch");
  long off = 0;
  for (auto& ly : net.layers) {
    take(flat, off, ly.W);
    take(flat, off, ly.b);
  }
}

void unpack(const Vec& flat, LowRankAdapter& ad) {
  if (flat.size() != param_count(ad)) throw contract_error("unpack: adapter size mismatch");
  long off = 0;
  for (auto& al : ad.layers) {
    take(flat, off, al.A);
    take(flat, off, al.B);
  }
}

Vec pack_base_grads(const Gradients& g) {
  long n = 0;
  for (const auto& ly : g.base) n += ly.W.size() + ly.b.size();
  Vec flat(n);
  long off = 0;
  for (const auto& ly : g.base) {
    put(flat, off, ly.W);
    put(flat, off, ly.b);
  }
  return flat;
}

Vec pack_adapter_grads(const Gradients& g) {
  long n = 0;
  for (const auto& al : g.adapter) n += al.A.size() + al.B.size();
  Vec flat(n);
  long off = 0;
  for (const auto& al : g.adapter) {
    put(flat, off, al.A);
    put(flat, off, al.B);
  }
  return flat;
}

AdamState make_adam(long n, double lr) {
  AdamState st;
  st.m = Vec::Zero(n);
  st.v = Vec::Zero(n);
  st.lr = lr;
  return st;
}

bool adam_step(Vec& params, const Vec& grad, AdamState& st) {
  if (params.size() != st.m.size() || grad.size() != st.m.size()) {
    throw contract_error("adam_step: size mismatch");
  }
  if (!grad.allFinite()) return false;
  st.step += 1;
  st.m = st.beta1 * st.m + (1.0 - st.beta1) * grad;
  st.v = st.beta2 * st.v + (1.0 - st.beta2) * grad.cwiseProduct(grad);
  double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  Vec mhat = st.m / c1;
  Vec vhat = st.v / c2;
  params.array() -= st.lr * mhat.array() / (vhat.array().sqrt() + st.eps);
  return true;
}

}  // namespace flowtrace::nn
