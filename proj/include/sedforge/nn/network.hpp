#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "sedforge/error.hpp"
#include "sedforge/nn/layers.hpp"
#include "sedforge/nn/spec.hpp"
#include "sedforge/random.hpp"
#include "sedforge/tensor.hpp"

namespace sedforge::nn {

enum class Mode { Inference, Training };

struct ForwardOptions {
  Mode mode = Mode::Inference;
  std::uint64_t dropout_seed = 0;  // training mode: masks derive from this per layer
  bool update_running_stats = true;
};

template <class S>
struct ParamRef {
  std::string name;
  Tensor<S>* value;
  Tensor<S>* grad;
};

template <class S>
using NamedTensors = std::vector<std::pair<std::string, Tensor<S>>>;

namespace ops {

struct OpContext {
  Mode mode;
  std::uint64_t seed;
  bool update_running_stats;
};

template <class S>
Tensor<S> he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<S> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.values()) v = static_cast<S>(dist(rng));
  return t;
}

template <class S>
struct Conv {
  Tensor<S> weight, bias, grad_weight, grad_bias;
  Tensor<S> input;

  Tensor<S> infer(const Tensor<S>& x) const { return conv2d_same_forward(x, weight, bias); }
  Tensor<S> forward(const Tensor<S>& x, const OpContext&) {
    input = x;
    return infer(x);
  }
  Tensor<S> backward(const Tensor<S>& g) {
    auto grads = conv2d_same_backward(input, weight, g);
    grad_weight = std::move(grads.weight);
    grad_bias = std::move(grads.bias);
    return std::move(grads.input);
  }
  void params(const std::string& p, std::vector<ParamRef<S>>& out) {
    out.push_back({p + "conv.weight", &weight, &grad_weight});
    out.push_back({p + "conv.bias", &bias, &grad_bias});
  }
  void state(const std::string&, std::vector<std::pair<std::string, Tensor<S>*>>&) {}
};

template <class S>
struct BatchNorm {
  Tensor<S> gamma, beta, running_mean, running_var, grad_gamma, grad_beta;
  BatchNormCache<S> cache;
  Tensor<S> input;  // inference-mode forward only
  Mode cached_mode = Mode::Inference;

  Tensor<S> infer(const Tensor<S>& x) const {
    return batch_norm_infer_forward(x, gamma, beta, running_mean, running_var);
  }
  Tensor<S> forward(const Tensor<S>& x, const OpContext& ctx) {
    cached_mode = ctx.mode;
    if (ctx.mode == Mode::Inference) {
      input = x;
      return infer(x);
    }
    BatchNormBatchStats<S> stats;
    Tensor<S> y = batch_norm_train_forward(x, gamma, beta, &cache, &stats);
    if (ctx.update_running_stats) {
      for (std::size_t c = 0; c < gamma.size(); ++c) {
        running_mean[c] = static_cast<S>(kBatchNormMomentum * running_mean[c] +
                                         (1.0 - kBatchNormMomentum) * stats.mean[c]);
        running_var[c] = static_cast<S>(kBatchNormMomentum * running_var[c] +
                                        (1.0 - kBatchNormMomentum) * stats.var[c]);
      }
    }
    return y;
  }
  Tensor<S> backward(const Tensor<S>& g) {
    if (cached_mode == Mode::Inference) {
      auto grads = batch_norm_infer_backward(input, gamma, running_mean, running_var, g);
      grad_gamma = std::move(grads.gamma);
      grad_beta = std::move(grads.beta);
      return std::move(grads.input);
    }
    auto grads = batch_norm_train_backward(cache, gamma, g);
    grad_gamma = std::move(grads.gamma);
    grad_beta = std::move(grads.beta);
    return std::move(grads.input);
  }
  void params(const std::string& p, std::vector<ParamRef<S>>& out) {
    out.push_back({p + "bn.gamma", &gamma, &grad_gamma});
    out.push_back({p + "bn.beta", &beta, &grad_beta});
  }
  void state(const std::string& p, std::vector<std::pair<std::string, Tensor<S>*>>& out) {
    out.emplace_back(p + "bn.running_mean", &running_mean);
    out.emplace_back(p + "bn.running_var", &running_var);
  }
};

template <class S>
struct Relu {
  Tensor<S> output;
  Tensor<S> infer(const Tensor<S>& x) const { return relu_forward(x); }
  Tensor<S> forward(const Tensor<S>& x, const OpContext&) {
    output = infer(x);
    return output;
  }
  Tensor<S> backward(const Tensor<S>& g) { return relu_backward(output, g); }
  void params(const std::string&, std::vector<ParamRef<S>>&) {}
  void state(const std::string&, std::vector<std::pair<std::string, Tensor<S>*>>&) {}
};

template <class S>
struct Sigmoid {
  Tensor<S> output;
  Tensor<S> infer(const Tensor<S>& x) const { return sigmoid_forward(x); }
  Tensor<S> forward(const Tensor<S>& x, const OpContext&) {
    output = infer(x);
    return output;
  }
  Tensor<S> backward(const Tensor<S>& g) { return sigmoid_backward(output, g); }
  void params(const std::string&, std::vector<ParamRef<S>>&) {}
  void state(const std::string&, std::vector<std::pair<std::string, Tensor<S>*>>&) {}
};

template <class S>
struct FreqPool {
  std::size_t pool = 1;
  Shape input_shape;
  std::vector<std::uint32_t> argmax;
  Tensor<S> infer(const Tensor<S>& x) const { return freq_max_pool_forward(x, pool); }
  Tensor<S> forward(const Tensor<S>& x, const OpContext&) {
    input_shape = x.shape();
    return freq_max_pool_forward(x, pool, &argmax);
  }
  Tensor<S> backward(const Tensor<S>& g) { return freq_max_pool_backward(input_shape, argmax, g); }
  void params(const std::string&, std::vector<ParamRef<S>>&) {}
  void state(const std::string&, std::vector<std::pair<std::string, Tensor<S>*>>&) {}
};

template <class S>
struct Dropout {
  double rate = 0.0;
  Tensor<S> mask;  // empty when the last forward ran in inference mode
  Tensor<S> infer(const Tensor<S>& x) const { return x; }
  Tensor<S> forward(const Tensor<S>& x, const OpContext& ctx) {
    if (ctx.mode == Mode::Inference || rate == 0.0) {
      mask = Tensor<S>();
      return x;
    }
    mask = dropout_mask<S>(x.shape(), rate, ctx.seed, false);
    return apply_mask(x, mask);
  }
  Tensor<S> backward(const Tensor<S>& g) { return mask.empty() ? g : apply_mask(g, mask); }
  void params(const std::string&, std::vector<ParamRef<S>>&) {}
  void state(const std::string&, std::vector<std::pair<std::string, Tensor<S>*>>&) {}
};

template <class S>
struct Stack {
  std::size_t maps = 1;
  Tensor<S> infer(const Tensor<S>& x) const { return stack_maps(x); }
  Tensor<S> forward(const Tensor<S>& x, const OpContext&) {
    maps = x.dim(1);
    return stack_maps(x);
  }
  Tensor<S> backward(const Tensor<S>& g) { return unstack_maps(g, maps); }
  void params(const std::string&, std::vector<ParamRef<S>>&) {}
  void state(const std::string&, std::vector<std::pair<std::string, Tensor<S>*>>&) {}
};

template <class S>
struct Gru {
  GruParams<S> p;
  double recurrent_dropout = 0.0;
  Tensor<S> grad_wx, grad_wh, grad_bias;
  GruCache<S> cache;

  Tensor<S> infer(const Tensor<S>& x) const {
    return gru_forward(x, p, Tensor<S>(), static_cast<GruCache<S>*>(nullptr));
  }
  Tensor<S> forward(const Tensor<S>& x, const OpContext& ctx) {
    Tensor<S> mask;
    if (ctx.mode == Mode::Training && recurrent_dropout > 0.0)
      mask = dropout_mask<S>({x.dim(0), p.units(), 1}, recurrent_dropout, ctx.seed, true);
    return gru_forward(x, p, mask, &cache);
  }
  Tensor<S> backward(const Tensor<S>& g) {
    auto grads = gru_backward(cache, p, g);
    grad_wx = std::move(grads.wx);
    grad_wh = std::move(grads.wh);
    grad_bias = std::move(grads.bias);
    return std::move(grads.input);
  }
  void params(const std::string& pre, std::vector<ParamRef<S>>& out) {
    out.push_back({pre + "gru.wx", &p.wx, &grad_wx});
    out.push_back({pre + "gru.wh", &p.wh, &grad_wh});
    out.push_back({pre + "gru.bias", &p.bias, &grad_bias});
  }
  void state(const std::string&, std::vector<std::pair<std::string, Tensor<S>*>>&) {}
};

template <class S>
struct Dense {
  Tensor<S> weight, bias, grad_weight, grad_bias;
  Tensor<S> input;
  Tensor<S> infer(const Tensor<S>& x) const { return dense_forward(x, weight, bias); }
  Tensor<S> forward(const Tensor<S>& x, const OpContext&) {
    input = x;
    return infer(x);
  }
  Tensor<S> backward(const Tensor<S>& g) {
    auto grads = dense_backward(input, weight, g);
    grad_weight = std::move(grads.weight);
    grad_bias = std::move(grads.bias);
    return std::move(grads.input);
  }
  void params(const std::string& p, std::vector<ParamRef<S>>& out) {
    out.push_back({p + "dense.weight", &weight, &grad_weight});
    out.push_back({p + "dense.bias", &bias, &grad_bias});
  }
  void state(const std::string&, std::vector<std::pair<std::string, Tensor<S>*>>&) {}
};

template <class S>
struct TemporalMaxPool {
  Shape input_shape;
  std::vector<std::uint32_t> argmax;
  Tensor<S> infer(const Tensor<S>& x) const { return temporal_max_pool_forward(x); }
  Tensor<S> forward(const Tensor<S>& x, const OpContext&) {
    input_shape = x.shape();
    return temporal_max_pool_forward(x, &argmax);
  }
  Tensor<S> backward(const Tensor<S>& g) {
    return temporal_max_pool_backward(input_shape, argmax, g);
  }
  void params(const std::string&, std::vector<ParamRef<S>>&) {}
  void state(const std::string&, std::vector<std::pair<std::string, Tensor<S>*>>&) {}
};

template <class S>
using Op = std::variant<Conv<S>, BatchNorm<S>, Relu<S>, Sigmoid<S>, FreqPool<S>, Dropout<S>,
                        Stack<S>, Gru<S>, Dense<S>, TemporalMaxPool<S>>;

}  // namespace ops

/// Where an executable op came from in the layer stack.
struct OpInfo {
  std::string kind;          // conv, bn, relu, sigmoid, pool, dropout, stack, gru, dense, tmaxpool
  std::size_t spec_layer;    // index into NetworkSpec::layers (stack: the layer that forced it)
  std::size_t conv_ordinal;  // for ops inside a conv block: which conv block (0-based)
};

/// Instantiated network: parameters, batch-norm running statistics and the
/// per-op caches of the last forward pass.
///
/// Inputs are [B, F, T]; outputs are probabilities [B, K, T], or [B, K, 1]
/// when the stack contains temporal max pooling.
template <class S>
class Network {
 public:
  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {
    const auto problems = validate(spec_);
    if (!problems.empty()) {
      std::string msg = "invalid network spec:";
      for (const auto& p : problems) msg += "\n  " + p;
      throw ConfigError(msg);
    }
    build();
  }

  const NetworkSpec& spec() const { return spec_; }
  bool tagging() const { return spec_.tagging(); }
  std::size_t num_ops() const { return ops_.size(); }
  const std::vector<OpInfo>& op_info() const { return info_; }

  /// Forward pass that caches intermediates for backward().
  Tensor<S> forward(const Tensor<S>& x, const ForwardOptions& opt = {}) {
    return forward_partial(x, ops_.size(), opt);
  }

  /// Runs ops [0, end) and returns the output of op end-1, caching for backward_partial.
  Tensor<S> forward_partial(const Tensor<S>& x, std::size_t end, const ForwardOptions& opt = {}) {
    Tensor<S> h = adapt_input(x);
    for (std::size_t i = 0; i < end; ++i) {
      const ops::OpContext ctx{opt.mode, derive_seed(opt.dropout_seed, {i}),
                               opt.update_running_stats};
      try {
        h = std::visit([&](auto& op) { return op.forward(h, ctx); }, ops_[i]);
      } catch (const ShapeError& e) {
        throw ShapeError(where(i) + e.what());
      }
    }
    cached_end_ = end;
    cached_input_shape_ = x.shape();
    return h;
  }

  /// Read-only inference pass (running batch-norm statistics, no dropout, no caching).
  Tensor<S> infer(const Tensor<S>& x) const {
    Tensor<S> h = adapt_input(x);
    for (std::size_t i = 0; i < ops_.size(); ++i) {
      try {
        h = std::visit([&](const auto& op) { return op.infer(h); }, ops_[i]);
      } catch (const ShapeError& e) {
        throw ShapeError(where(i) + e.what());
      }
    }
    return h;
  }

  /// Gradient of a scalar objective given dObjective/dOutput of the last
  /// forward(). Parameter gradients are overwritten; returns dObjective/dInput.
  Tensor<S> backward(const Tensor<S>& grad_output) {
    if (cached_end_ != ops_.size())
      throw StateError("backward() needs a cached full forward pass");
    return backward_partial(grad_output, ops_.size());
  }

  /// Like backward(), but takes the gradient with respect to the input of the
  /// final sigmoid (the logits) and skips that op.
  Tensor<S> backward_logits(const Tensor<S>& grad_logits) {
    if (cached_end_ != ops_.size())
      throw StateError("backward_logits() needs a cached full forward pass");
    cached_end_ = ops_.size() - 1;
    return backward_partial(grad_logits, ops_.size() - 1);
  }

  Tensor<S> backward_partial(const Tensor<S>& grad_output, std::size_t end) {
    if (!cached_end_ || *cached_end_ != end)
      throw StateError("backward pass without a matching cached forward pass");
    for (std::size_t i = end; i < ops_.size(); ++i) clear_grads(i);
    Tensor<S> g = grad_output;
    for (std::size_t i = end; i-- > 0;)
      g = std::visit([&](auto& op) { return op.backward(g); }, ops_[i]);
    if (conv_input_) g.reshape(cached_input_shape_);
    return g;
  }

  std::vector<ParamRef<S>> parameters() {
    std::vector<ParamRef<S>> out;
    for (std::size_t i = 0; i < ops_.size(); ++i)
      std::visit([&](auto& op) { op.params(prefix(i), out); }, ops_[i]);
    return out;
  }

  /// Parameters plus running statistics, in a stable order.
  NamedTensors<S> state() const {
    NamedTensors<S> out;
    auto* self = const_cast<Network*>(this);
    for (auto& p : self->parameters()) out.emplace_back(p.name, *p.value);
    for (auto& [name, t] : self->state_refs()) out.emplace_back(name, *t);
    return out;
  }

  void load_state(const NamedTensors<S>& values) {
    std::vector<std::pair<std::string, Tensor<S>*>> targets;
    for (auto& p : parameters()) targets.emplace_back(p.name, p.value);
    for (auto& r : state_refs()) targets.push_back(r);
    if (targets.size() != values.size())
      throw ShapeError("state has " + std::to_string(values.size()) + " tensors, network needs " +
                       std::to_string(targets.size()));
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i].first != values[i].first)
        throw ShapeError("state tensor '" + values[i].first + "' where '" + targets[i].first +
                         "' was expected");
      require_shape(values[i].second, targets[i].second->shape(), targets[i].first);
    }
    for (std::size_t i = 0; i < targets.size(); ++i) *targets[i].second = values[i].second;
    cached_end_.reset();
  }

  template <class T>
  Network<T> cast() const {
    Network<T> out(spec_);
    NamedTensors<T> converted;
    for (const auto& [name, t] : state()) converted.emplace_back(name, t.template cast<T>());
    out.load_state(converted);
    return out;
  }

  /// Op index range end whose output is conv block `conv_ordinal`'s
  /// pre-activation response (after batch norm when present).
  std::size_t conv_response_end(std::size_t conv_ordinal) const {
    for (std::size_t i = 0; i < info_.size(); ++i)
      if (info_[i].kind == "conv" && info_[i].conv_ordinal == conv_ordinal)
        return (i + 1 < info_.size() && info_[i + 1].kind == "bn") ? i + 2 : i + 1;
    throw ConfigError("network has no conv layer " + std::to_string(conv_ordinal));
  }

  /// Direct access for tests composing layers by hand.
  ops::Op<S>& op(std::size_t i) { return ops_.at(i); }
  const ops::Op<S>& op(std::size_t i) const { return ops_.at(i); }

 private:
  Tensor<S> adapt_input(const Tensor<S>& x) const {
    require_rank(x, 3, "network input");
    if (x.dim(1) != spec_.input_bands)
      throw ShapeError("network expects " + std::to_string(spec_.input_bands) +
                       " input bands, got " + std::to_string(x.dim(1)));
    if (x.dim(2) == 0) throw ShapeError("network input has no frames");
    if (!conv_input_) return x;
    Tensor<S> h = x;
    h.reshape({x.dim(0), 1, x.dim(1), x.dim(2)});
    return h;
  }

  std::string where(std::size_t i) const {
    return "layer " + std::to_string(info_[i].spec_layer) + " (" + info_[i].kind + "): ";
  }

  std::string prefix(std::size_t i) const {
    return "L" + std::to_string(info_[i].spec_layer) + ".";
  }

  std::vector<std::pair<std::string, Tensor<S>*>> state_refs() {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    for (std::size_t i = 0; i < ops_.size(); ++i)
      std::visit([&](auto& op) { op.state(prefix(i), out); }, ops_[i]);
    return out;
  }

  void clear_grads(std::size_t i) {
    std::vector<ParamRef<S>> ps;
    std::visit([&](auto& op) { op.params(prefix(i), ps); }, ops_[i]);
    for (auto& p : ps) *p.grad = Tensor<S>(p.value->shape());
  }

  void build() {
    Rng rng(spec_.seed);
    const auto& L = spec_.layers;
    conv_input_ = !L.empty() && std::holds_alternative<ConvSpec>(L.front());
    bool conv_stage = conv_input_;
    std::size_t channels = 1, bands = spec_.input_bands, features = spec_.input_bands;
    std::size_t conv_ordinal = 0;
    const auto push = [&](ops::Op<S> op, const char* kind, std::size_t layer, std::size_t ord) {
      ops_.push_back(std::move(op));
      info_.push_back({kind, layer, ord});
    };
    const auto leave_conv_stage = [&](std::size_t layer) {
      if (!conv_stage) return;
      push(ops::Stack<S>{}, "stack", layer, SIZE_MAX);
      features = channels * bands;
      conv_stage = false;
    };
    const auto batch_norm = [&](std::size_t width, std::size_t layer, std::size_t ord) {
      ops::BatchNorm<S> bn;
      bn.gamma = Tensor<S>({width}, S(1));
      bn.beta = Tensor<S>({width});
      bn.running_mean = Tensor<S>({width});
      bn.running_var = Tensor<S>({width}, S(1));
      push(std::move(bn), "bn", layer + 1, ord);
    };
    for (std::size_t i = 0; i < L.size(); ++i) {
      const bool bn_next = i + 1 < L.size() && std::holds_alternative<BatchNormSpec>(L[i + 1]);
      if (const auto* c = std::get_if<ConvSpec>(&L[i])) {
        ops::Conv<S> conv;
        conv.weight = ops::he_normal<S>({c->maps, channels, c->kernel_f, c->kernel_t},
                                        channels * c->kernel_f * c->kernel_t, rng);
        conv.bias = Tensor<S>({c->maps});
        push(std::move(conv), "conv", i, conv_ordinal);
        channels = c->maps;
        if (bn_next) batch_norm(channels, i, conv_ordinal);
        push(ops::Relu<S>{}, "relu", i, conv_ordinal);
        if (c->pool > 1) {
          ops::FreqPool<S> pool;
          pool.pool = c->pool;
          push(std::move(pool), "pool", i, conv_ordinal);
          bands /= c->pool;
        }
        ++conv_ordinal;
      } else if (const auto* r = std::get_if<RecurrentSpec>(&L[i])) {
        leave_conv_stage(i);
        ops::Gru<S> gru;
        gru.p.wx = ops::he_normal<S>({3 * r->units, features}, features, rng);
        gru.p.wh = ops::he_normal<S>({3 * r->units, r->units}, r->units, rng);
        gru.p.bias = Tensor<S>({3 * r->units});
        gru.recurrent_dropout = r->recurrent_dropout;
        push(std::move(gru), "gru", i, SIZE_MAX);
        features = r->units;
      } else if (const auto* d = std::get_if<DenseSpec>(&L[i])) {
        leave_conv_stage(i);
        ops::Dense<S> dense;
        dense.weight = ops::he_normal<S>({d->units, features}, features, rng);
        dense.bias = Tensor<S>({d->units});
        push(std::move(dense), "dense", i, SIZE_MAX);
        features = d->units;
        if (bn_next) batch_norm(features, i, SIZE_MAX);
        if (d->activation == Activation::Relu) push(ops::Relu<S>{}, "relu", i, SIZE_MAX);
        if (d->activation == Activation::Sigmoid) push(ops::Sigmoid<S>{}, "sigmoid", i, SIZE_MAX);
      } else if (const auto* dr = std::get_if<DropoutSpec>(&L[i])) {
        ops::Dropout<S> drop;
        drop.rate = dr->rate;
        push(std::move(drop), "dropout", i, SIZE_MAX);
      } else if (std::holds_alternative<TemporalMaxPoolSpec>(L[i])) {
        leave_conv_stage(i);
        push(ops::TemporalMaxPool<S>{}, "tmaxpool", i, SIZE_MAX);
      }
      // BatchNormSpec entries were fused into the preceding layer.
    }
  }

  NetworkSpec spec_;
  std::vector<ops::Op<S>> ops_;
  std::vector<OpInfo> info_;
  bool conv_input_ = false;
  std::optional<std::size_t> cached_end_;
  Shape cached_input_shape_;
};

/// Same as constructing a Network: He-initialized weights (variance
/// 2 / fan_in), zero biases, unit batch-norm scale, all from spec.seed.
template <class S = float>
Network<S> init_network(const NetworkSpec& spec) {
  return Network<S>(spec);
}

}  // namespace sedforge::nn
