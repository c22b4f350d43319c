#ifndef FLOWTRACE_NN_HPP
#define FLOWTRACE_NN_HPP

#include "flowtrace/common.hpp"

#include <optional>

namespace flowtrace::nn {

// minimal dense network: affine layers, tanh on hidden layers, linear output.
// the input is always the concatenation [x; t; c].

enum class Activation { tanh_act };

struct Layer {
  Mat W;
  Vec b;
};

struct NetworkParams {
  std::vector<Layer> layers;
  Activation act = Activation::tanh_act;
  int x_dim = 0;  // leading block of the input
  int c_dim = 0;  // trailing block; the middle slot is the scalar t

  int in_dim() const { return x_dim + 1 + c_dim; }
  int out_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().W.rows()); }
  void validate() const;
};

// independent low-rank additive path per layer: W_eff = W + gate*(alpha/rank)*B*A.
// gate exactly 0 means the path is skipped entirely, so the effective network
// is bit-for-bit the base network.
struct AdapterLayer {
  Mat A;  // rank x in
  Mat B;  // out x rank
};

struct LowRankAdapter {
  std::vector<AdapterLayer> layers;
  int rank = 0;
  double alpha = 0.0;
  double gate = 1.0;

  double scaling() const { return rank > 0 ? alpha / rank : 0.0; }
  void validate(const NetworkParams& net) const;
};

NetworkParams make_mlp(int x_dim, int c_dim, int out_dim, int hidden, int hidden_layers,
                       Rng& rng, double weight_scale);

// A gets small random entries, B starts at zero so the adapted network
// initially matches the base exactly
LowRankAdapter make_adapter(const NetworkParams& net, int rank, double alpha, Rng& rng,
                            double a_scale);

struct ForwardTrace {
  Vec input;
  std::vector<Vec> pre;    // z_l before activation
  std::vector<Vec> post;   // activations fed into layer l (post[0] == input)
};

// gate scales the adapter path; callers pass adapter == nullptr for the bare net.
Vec forward(const NetworkParams& net, const LowRankAdapter* adapter, double gate,
            const Vec& x, double t, const Vec& c, ForwardTrace* trace = nullptr);

struct Gradients {
  std::vector<Layer> base;           // empty when want_base == false
  std::vector<AdapterLayer> adapter; // empty when no adapter was supplied
  Vec input;                         // d(dot(upstream, out))/d(input), size in_dim
};

// exact reverse pass over a stored forward trace; no recomputation.
Gradients backward(const NetworkParams& net, const LowRankAdapter* adapter, double gate,
                   const ForwardTrace& trace, const Vec& upstream, bool want_base);

long param_count(const NetworkParams& net);
long param_count(const LowRankAdapter& ad);
Vec pack(const NetworkParams& net);
Vec pack(const LowRankAdapter& ad);
void unpack(const Vec& flat, NetworkParams& net);
void unpack(const Vec& flat, LowRankAdapter& ad);
Vec pack_base_grads(const Gradients& g);
Vec pack_adapter_grads(const Gradients& g);

struct AdamState {
  Vec m, v;
  long step = 0;
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam(long n, double lr);

// standard Adam with bias correction; a non-finite gradient leaves params and
// state untouched and returns false
bool adam_step(Vec& params, const Vec& grad, AdamState& st);

}  // namespace flowtrace::nn

#endif
