#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "flowtrace/nn.hpp"

#include <cmath>
#include <limits>

using namespace flowtrace;
using namespace flowtrace::nn;

namespace {

NetworkParams tiny_net() {
  // 2 inputs total: x_dim 1, t slot, c_dim 0 -> in_dim 2; one hidden of 2
  NetworkParams net;
  net.x_dim = 1;
  net.c_dim = 0;
  Layer l1;
  l1.W = Mat(2, 2);
  l1.W << 0.5, -0.25, 0.1, 0.3;
  l1.b = Vec(2);
  l1.b << 0.05, -0.1;
  Layer l2;
  l2.W = Mat(1, 2);
  l2.W << 1.5, -0.5;
  l2.b = Vec::Constant(1, 0.2);
  net.layers = {l1, l2};
  return net;
}

double max_abs_diff(const Vec& a, const Vec& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("forward matches hand computation on a tiny net") {
  NetworkParams net = tiny_net();
  Vec x = Vec::Constant(1, 0.7);
  double t = 0.4;
  Vec c(0);
  Vec out = forward(net, nullptr, 0.0, x, t, c);

  double z0 = 0.5 * 0.7 + (-0.25) * 0.4 + 0.05;
  double z1 = 0.1 * 0.7 + 0.3 * 0.4 - 0.1;
  double expect = 1.5 * std::tanh(z0) - 0.5 * std::tanh(z1) + 0.2;
  CHECK(out.size() == 1);
  CHECK(out[0] == doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("make_mlp produces the declared shapes") {
  Rng rng(42);
  NetworkParams net = make_mlp(3, 5, 2, 16, 2, rng, 0.5);
  REQUIRE(net.layers.size() == 3);
  CHECK(net.in_dim() == 9);
  CHECK(net.out_dim() == 2);
  CHECK(net.layers[0].W.rows() == 16);
  CHECK(net.layers[0].W.cols() == 9);
  CHECK(net.layers[1].W.rows() == 16);
  CHECK(net.layers[1].W.cols() == 16);
  CHECK(net.layers[2].W.rows() == 2);
  CHECK(net.layers[2].W.cols() == 16);
  CHECK_NOTHROW(net.validate());
  CHECK(param_count(net) == pack(net).size());
}

TEST_CASE("gate zero skips the adapter bit for bit") {
  Rng rng(7);
  NetworkParams net = make_mlp(2, 3, 2, 8, 1, rng, 0.6);
  LowRankAdapter ad = make_adapter(net, 2, 8.0, rng, 0.5);
  // push B away from zero so the adapter path is live
  for (auto& layer : ad.layers) layer.B.setConstant(0.3);

  Vec x = rng.normal_vec(2);
  Vec c = rng.normal_vec(3);
  Vec bare = forward(net, nullptr, 0.0, x, 0.35, c);
  Vec gated_off = forward(net, &ad, 0.0, x, 0.35, c);
  Vec gated_on = forward(net, &ad, 1.0, x, 0.35, c);

  CHECK(max_abs_diff(bare, gated_off) == 0.0);
  CHECK(max_abs_diff(bare, gated_on) > 0.0);
}

TEST_CASE("fresh adapter starts as the identity path") {
  Rng rng(11);
  NetworkParams net = make_mlp(2, 0, 2, 8, 1, rng, 0.6);
  LowRankAdapter ad = make_adapter(net, 2, 8.0, rng, 0.5);
  Vec x = rng.normal_vec(2);
  Vec c(0);
  Vec bare = forward(net, nullptr, 0.0, x, 0.5, c);
  Vec with = forward(net, &ad, 1.0, x, 0.5, c);
  CHECK(max_abs_diff(bare, with) == 0.0);  // B is zero-initialized
  CHECK(ad.scaling() == doctest::Approx(4.0));
}

TEST_CASE("backward matches central finite differences") {
  Rng rng(19);
  NetworkParams net = make_mlp(3, 2, 2, 6, 2, rng, 0.7);
  LowRankAdapter ad = make_adapter(net, 2, 8.0, rng, 0.4);
  for (auto& layer : ad.layers) layer.B = Mat::NullaryExpr(layer.B.rows(), layer.B.cols(),
                                                           [&]() { return 0.2 * rng.normal(); });
  Vec x = rng.normal_vec(3);
  Vec c = rng.normal_vec(2);
  Vec upstream = rng.normal_vec(2);
  const double t = 0.3;
  const double gate = 0.8;
  const double h = 1e-6;

  ForwardTrace trace;
  forward(net, &ad, gate, x, t, c, &trace);
  Gradients g = backward(net, &ad, gate, trace, upstream, true);

  auto loss = [&]() { return upstream.dot(forward(net, &ad, gate, x, t, c)); };

  SUBCASE("base weights") {
    double worst = 0.0;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      for (Eigen::Index i = 0; i < net.layers[l].W.size(); ++i) {
        double* p = net.layers[l].W.data() + i;
        double keep = *p;
        *p = keep + h;
        double up = loss();
        *p = keep - h;
        double dn = loss();
        *p = keep;
        double fd = (up - dn) / (2 * h);
        worst = std::max(worst, std::abs(fd - g.base[l].W.data()[i]));
      }
      for (Eigen::Index i = 0; i < net.layers[l].b.size(); ++i) {
        double keep = net.layers[l].b[i];
        net.layers[l].b[i] = keep + h;
        double up = loss();
        net.layers[l].b[i] = keep - h;
        double dn = loss();
        net.layers[l].b[i] = keep;
        worst = std::max(worst, std::abs((up - dn) / (2 * h) - g.base[l].b[i]));
      }
    }
    CHECK(worst < 1e-7);
  }

  SUBCASE("adapter factors") {
    double worst = 0.0;
    for (std::size_t l = 0; l < ad.layers.size(); ++l) {
      for (Eigen::Index i = 0; i < ad.layers[l].A.size(); ++i) {
        double* p = ad.layers[l].A.data() + i;
        double keep = *p;
        *p = keep + h;
        double up = loss();
        *p = keep - h;
        double dn = loss();
        *p = keep;
        worst = std::max(worst, std::abs((up - dn) / (2 * h) - g.adapter[l].A.data()[i]));
      }
      for (Eigen::Index i = 0; i < ad.layers[l].B.size(); ++i) {
        double* p = ad.layers[l].B.data() + i;
        double keep = *p;
        *p = keep + h;
        double up = loss();
        *p = keep - h;
        double dn = loss();
        *p = keep;
        worst = std::max(worst, std::abs((up - dn) / (2 * h) - g.adapter[l].B.data()[i]));
      }
    }
    CHECK(worst < 1e-7);
  }

  SUBCASE("input gradient") {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < 3; ++i) {
      Vec xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      double fd = (upstream.dot(forward(net, &ad, gate, xp, t, c)) -
                   upstream.dot(forward(net, &ad, gate, xm, t, c))) /
                  (2 * h);
      worst = std::max(worst, std::abs(fd - g.input[i]));
    }
    for (Eigen::Index i = 0; i < 2; ++i) {
      Vec cp = c, cm = c;
      cp[i] += h;
      cm[i] -= h;
      double fd = (upstream.dot(forward(net, &ad, gate, x, t, cp)) -
                   upstream.dot(forward(net, &ad, gate, x, t, cm))) /
                  (2 * h);
      worst = std::max(worst, std::abs(fd - g.input[4 + i]));
    }
    CHECK(worst < 1e-7);
  }

  SUBCASE("want_base false leaves base grads empty") {
    Gradients g2 = backward(net, &ad, gate, trace, upstream, false);
    CHECK(g2.base.empty());
    CHECK(g2.adapter.size() == ad.layers.size());
  }
}

TEST_CASE("pack and unpack round trip") {
  Rng rng(23);
  NetworkParams net = make_mlp(2, 1, 3, 5, 1, rng, 0.8);
  Vec flat = pack(net);
  CHECK(flat.size() == param_count(net));

  NetworkParams other = net;
  for (auto& layer : other.layers) {
    layer.W.setZero();
    layer.b.setZero();
  }
  unpack(flat, other);
  CHECK(max_abs_diff(pack(other), flat) == 0.0);

  LowRankAdapter ad = make_adapter(net, 2, 4.0, rng, 0.5);
  for (auto& layer : ad.layers) layer.B.setRandom();
  Vec aflat = pack(ad);
  CHECK(aflat.size() == param_count(ad));
  LowRankAdapter ad2 = make_adapter(net, 2, 4.0, rng, 0.5);
  unpack(aflat, ad2);
  CHECK(max_abs_diff(pack(ad2), aflat) == 0.0);
}

TEST_CASE("adam follows the textbook recursion") {
  Vec p(2);
  p << 1.0, -2.0;
  AdamState st = make_adam(2, 0.1);

  // reference recursion carried by hand
  Vec m = Vec::Zero(2), v = Vec::Zero(2), ref = p;
  Vec grads[3];
  grads[0] = (Vec(2) << 0.5, -1.0).finished();
  grads[1] = (Vec(2) << -0.25, 0.75).finished();
  grads[2] = (Vec(2) << 1.5, 0.1).finished();
  for (int k = 1; k <= 3; ++k) {
    const Vec& g = grads[k - 1];
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g.cwiseProduct(g);
    Vec mhat = m / (1.0 - std::pow(0.9, k));
    Vec vhat = v / (1.0 - std::pow(0.999, k));
    ref -= 0.1 * mhat.cwiseQuotient(vhat.cwiseSqrt() + Vec::Constant(2, 1e-8));
    CHECK(adam_step(p, g, st));
  }
  CHECK(max_abs_diff(p, ref) < 1e-14);
  CHECK(st.step == 3);
}

TEST_CASE("adam refuses non-finite gradients") {
  Vec p(2);
  p << 0.5, 0.5;
  Vec before = p;
  AdamState st = make_adam(2, 0.1);
  CHECK(adam_step(p, (Vec(2) << 1.0, 1.0).finished(), st));
  Vec after_one = p;
  long step_one = st.step;
  Vec bad(2);
  bad << 1.0, std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(adam_step(p, bad, st));
  CHECK(max_abs_diff(p, after_one) == 0.0);
  CHECK(st.step == step_one);
  bad[1] = std::numeric_limits<double>::infinity();
  CHECK_FALSE(adam_step(p, bad, st));
  CHECK(before[0] != p[0]);  // the first, finite step did land
}

TEST_CASE("validate rejects inconsistent shapes") {
  NetworkParams net = tiny_net();
  net.layers[1].W = Mat::Zero(1, 3);
  CHECK_THROWS_AS(net.validate(), config_error);

  Rng rng(3);
  NetworkParams ok = make_mlp(2, 0, 2, 4, 1, rng, 0.5);
  LowRankAdapter ad = make_adapter(ok, 2, 4.0, rng, 0.5);
  ad.layers[0].A = Mat::Zero(2, 99);
  CHECK_THROWS_AS(ad.validate(ok), config_error);
}
