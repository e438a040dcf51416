#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "irnet/ops.hpp"
#include "irnet/rng.hpp"
#include "irnet/tensor.hpp"

namespace irnet {

// Scale-configurable Inception-ResNet-v2: stem, nA/nB/nC residual inception
// blocks separated by two reduction stages, global-average-pool head.
struct ModelConfig {
  int64_t input_size = 299;
  int64_t input_channels = 3;
  int64_t num_classes = 2;
  double width_multiplier = 1.0;  // in (0,1]; filter counts scale as ceil(c*w), min 1
  int num_a_blocks = 5;
  int num_b_blocks = 10;
  int num_c_blocks = 5;
  double residual_scale = 0.2;  // in (0,1]
  double dropout_rate = 0.2;    // in [0,1), applied before the classifier
  uint64_t seed = 0;

  // Small enough for full forward+backward in well under a second per batch.
  static ModelConfig desk() {
    ModelConfig cfg;
    cfg.input_size = 75;
    cfg.width_multiplier = 1.0 / 8.0;
    cfg.num_a_blocks = 1;
    cfg.num_b_blocks = 2;
    cfg.num_c_blocks = 1;
    return cfg;
  }

  void validate() const;
  int64_t scaled(int64_t filters) const {
    int64_t s = static_cast<int64_t>(std::ceil(static_cast<double>(filters) * width_multiplier - 1e-9));
    return std::max<int64_t>(1, s);
  }
};

enum class RunMode { Train, Eval };

enum class NodeKind {
  Input,
  Rescale,  // fixed affine a*x+b, shifts [0,1] pixels to [-1,1]
  Conv,
  BatchNorm,
  Relu,
  MaxPool,
  AvgPool,
  Concat,
  ResidualAdd,
  GlobalAvgPool,
  Dropout,
  Dense,
};

const char* node_kind_name(NodeKind kind);

template <typename T>
struct ParamTensorT {
  std::string name;
  TensorT<T> value;
  TensorT<T> grad;
  bool trainable = true;
  int layer_index = -1;  // parameterized-layer ordinal, 0 = closest to input
};

struct Node {
  NodeKind kind = NodeKind::Input;
  std::string name;
  std::vector<int> inputs;  // producer node ids

  int64_t window = 0;
  int64_t stride = 1;
  ops::Padding padding = ops::Padding::Same;
  double scale = 1.0;  // ResidualAdd branch scale / Rescale multiplier
  double shift = 0.0;  // Rescale offset
  double rate = 0.0;   // Dropout

  int kernel_param = -1;  // Conv/Dense
  int bias_param = -1;
  int gamma_param = -1;  // BatchNorm
  int beta_param = -1;
  int bn_state = -1;

  Shape out_shape;  // batch-free: (H,W,C) or (C)
  int layer_index = -1;
};

template <typename T>
struct ForwardTraceT {
  std::vector<std::optional<TensorT<T>>> activations;  // per node id
  std::vector<std::optional<ops::BatchNormCache<T>>> bn_caches;
  std::vector<std::optional<TensorT<T>>> dropout_masks;
};

template <typename T>
class ModelGraphT {
public:
  ModelConfig cfg;
  std::vector<Node> nodes;
  std::vector<ParamTensorT<T>> params;
  std::vector<ops::BatchNormState<T>> bn_states;
  int num_param_layers = 0;
  double bn_momentum = 0.99;
  double bn_eps = 1e-3;

  // Total scalar parameter count.
  int64_t count_params() const {
    int64_t total = 0;
    for (const auto& p : params) total += p.value.size();
    return total;
  }

  int64_t trainable_scalar_count() const {
    int64_t total = 0;
    for (const auto& p : params) {
      if (p.trainable) total += p.value.size();
    }
    return total;
  }

  // Makes exactly the last `trainable_layers` parameterized layers (counted
  // from the output) trainable and freezes everything below them.
  void apply_freeze(int trainable_layers) {
    if (trainable_layers < 0 || trainable_layers > num_param_layers) {
      throw invalid_error("trainable layer count " + std::to_string(trainable_layers) +
                          " exceeds parameterized layer count " + std::to_string(num_param_layers));
    }
    const int cutoff = num_param_layers - trainable_layers;
    for (auto& p : params) p.trainable = p.layer_index >= cutoff;
  }

  const ParamTensorT<T>* find_param(const std::string& name) const {
    for (const auto& p : params) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  ParamTensorT<T>* find_param(const std::string& name) {
    for (auto& p : params) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  void zero_grads() {
    for (auto& p : params) std::fill(p.grad.vec().begin(), p.grad.vec().end(), T(0));
  }

  TensorT<T> forward(const TensorT<T>& batch, RunMode mode, uint64_t dropout_seed = 0,
                     ForwardTraceT<T>* trace = nullptr) const;

  // Accumulates parameter gradients for the trace produced by a train-mode
  // forward; returns the gradient with respect to the input batch.
  TensorT<T> backward(const ForwardTraceT<T>& trace, const TensorT<T>& grad_logits);

  // Train-mode forward mutates batchnorm running state, so it needs a
  // non-const entry point.
  TensorT<T> forward_train(const TensorT<T>& batch, uint64_t dropout_seed,
                           ForwardTraceT<T>* trace) {
    return const_cast<const ModelGraphT*>(this)->forward_impl(batch, RunMode::Train, dropout_seed,
                                                              trace, this);
  }

  template <typename U>
  ModelGraphT<U> cast() const {
    ModelGraphT<U> out;
    out.cfg = cfg;
    out.nodes = nodes;
    out.num_param_layers = num_param_layers;
    out.bn_momentum = bn_momentum;
    out.bn_eps = bn_eps;
    out.params.reserve(params.size());
    for (const auto& p : params) {
      ParamTensorT<U> q;
      q.name = p.name;
      q.value = p.value.template cast<U>();
      q.grad = TensorT<U>(p.grad.shape());
      q.trainable = p.trainable;
      q.layer_index = p.layer_index;
      out.params.push_back(std::move(q));
    }
    out.bn_states.reserve(bn_states.size());
    for (const auto& s : bn_states) {
      ops::BatchNormState<U> t;
      t.moving_mean = s.moving_mean.template cast<U>();
      t.moving_var = s.moving_var.template cast<U>();
      out.bn_states.push_back(std::move(t));
    }
    return out;
  }

private:
  TensorT<T> forward_impl(const TensorT<T>& batch, RunMode mode, uint64_t dropout_seed,
                          ForwardTraceT<T>* trace, ModelGraphT* mutable_self) const;

  friend class ModelGraphT<float>;
  friend class ModelGraphT<double>;
};

using ModelGraph = ModelGraphT<float>;

template <typename T>
ModelGraphT<T> build_model_t(const ModelConfig& cfg);

inline ModelGraph build_model(const ModelConfig& cfg) { return build_model_t<float>(cfg); }

// Plain-text per-layer table: name, type, output shape, parameter count.
std::string layer_table(const ModelGraph& model);

// ---------------------------------------------------------------------------
// Implementation

namespace model_detail {

inline Shape with_batch(const Shape& meta, int64_t batch) {
  Shape s;
  s.push_back(batch);
  for (int64_t d : meta) s.push_back(d);
  return s;
}

// Graph assembly helper. Nodes and parameters are appended strictly in
// input-to-output order; within a block, branches left to right, then the
// projection, with each conv's batchnorm scale/shift belonging to the conv's
// layer ordinal.
template <typename T>
class GraphBuilder {
public:
  explicit GraphBuilder(ModelGraphT<T>& graph) : g_(graph) {}

  int add_input(int64_t size, int64_t channels) {
    Node n;
    n.kind = NodeKind::Input;
    n.name = "input";
    n.out_shape = {size, size, channels};
    return push(n);
  }

  int add_rescale(int input, const std::string& name, double a, double b) {
    Node n;
    n.kind = NodeKind::Rescale;
    n.name = name;
    n.inputs = {input};
    n.scale = a;
    n.shift = b;
    n.out_shape = out_of(input);
    return push(n);
  }

  // conv + batchnorm + relu; the standard building unit. No conv bias.
  int conv_bn_relu(int input, const std::string& name, int64_t kh, int64_t kw, int64_t filters,
                   int64_t stride, ops::Padding padding) {
    const int conv = add_conv(input, name, kh, kw, filters, stride, padding, /*bias=*/false);
    const int bn = add_batchnorm(conv, name);
    return add_relu(bn, name + "/relu");
  }

  // Linear 1x1 projection with bias; used to match residual branch channels.
  int conv_linear(int input, const std::string& name, int64_t filters) {
    return add_conv(input, name, 1, 1, filters, 1, ops::Padding::Same, /*bias=*/true);
  }

  int add_conv(int input, const std::string& name, int64_t kh, int64_t kw, int64_t filters,
               int64_t stride, ops::Padding padding, bool bias) {
    const Shape& in = out_of(input);
    Node n;
    n.kind = NodeKind::Conv;
    n.name = name;
    n.inputs = {input};
    n.stride = stride;
    n.padding = padding;
    n.layer_index = g_.num_param_layers++;
    int64_t oh, ow;
    try {
      oh = ops::conv_out_extent(in[0], kh, stride, padding);
      ow = ops::conv_out_extent(in[1], kw, stride, padding);
    } catch (const Error& e) {
      throw shape_error("stage '" + name + "': " + e.what());
    }
    n.out_shape = {oh, ow, filters};
    n.kernel_param = add_param(name + "/kernel", {kh, kw, in[2], filters}, n.layer_index);
    if (bias) n.bias_param = add_zero_param(name + "/bias", {filters}, n.layer_index);
    return push(n);
  }

  int add_batchnorm(int input, const std::string& owner) {
    const Shape& in = out_of(input);
    const int64_t c = in[2];
    Node n;
    n.kind = NodeKind::BatchNorm;
    n.name = owner + "/bn";
    n.inputs = {input};
    n.out_shape = in;
    n.layer_index = g_.nodes[static_cast<size_t>(input)].layer_index;
    n.gamma_param = add_one_param(owner + "/bn_gamma", {c}, n.layer_index);
    n.beta_param = add_zero_param(owner + "/bn_beta", {c}, n.layer_index);
    n.bn_state = static_cast<int>(g_.bn_states.size());
    g_.bn_states.push_back(ops::BatchNormState<T>::initial(c));
    return push(n);
  }

  int add_relu(int input, const std::string& name) {
    Node n;
    n.kind = NodeKind::Relu;
    n.name = name;
    n.inputs = {input};
    n.out_shape = out_of(input);
    return push(n);
  }

  int add_pool(int input, const std::string& name, NodeKind kind, int64_t window, int64_t stride,
               ops::Padding padding) {
    const Shape& in = out_of(input);
    Node n;
    n.kind = kind;
    n.name = name;
    n.inputs = {input};
    n.window = window;
    n.stride = stride;
    n.padding = padding;
    int64_t oh, ow;
    try {
      oh = ops::conv_out_extent(in[0], window, stride, padding);
      ow = ops::conv_out_extent(in[1], window, stride, padding);
    } catch (const Error& e) {
      throw shape_error("stage '" + name + "': " + e.what());
    }
    n.out_shape = {oh, ow, in[2]};
    return push(n);
  }

  int add_concat(const std::vector<int>& inputs, const std::string& name) {
    Node n;
    n.kind = NodeKind::Concat;
    n.name = name;
    n.inputs = inputs;
    const Shape& first = out_of(inputs[0]);
    int64_t c = 0;
    for (int id : inputs) c += out_of(id)[2];
    n.out_shape = {first[0], first[1], c};
    return push(n);
  }

  int add_residual(int shortcut, int branch, const std::string& name, double scale) {
    Node n;
    n.kind = NodeKind::ResidualAdd;
    n.name = name;
    n.inputs = {shortcut, branch};
    n.scale = scale;
    n.out_shape = out_of(shortcut);
    return push(n);
  }

  int add_global_avg_pool(int input, const std::string& name) {
    Node n;
    n.kind = NodeKind::GlobalAvgPool;
    n.name = name;
    n.inputs = {input};
    n.out_shape = {out_of(input)[2]};
    return push(n);
  }

  int add_dropout(int input, const std::string& name, double rate) {
    Node n;
    n.kind = NodeKind::Dropout;
    n.name = name;
    n.inputs = {input};
    n.rate = rate;
    n.out_shape = out_of(input);
    return push(n);
  }

  int add_dense(int input, const std::string& name, int64_t units) {
    const Shape& in = out_of(input);
    Node n;
    n.kind = NodeKind::Dense;
    n.name = name;
    n.inputs = {input};
    n.layer_index = g_.num_param_layers++;
    n.out_shape = {units};
    n.kernel_param = add_param(name + "/kernel", {in[0], units}, n.layer_index);
    n.bias_param = add_zero_param(name + "/bias", {units}, n.layer_index);
    return push(n);
  }

  const Shape& out_of(int id) const { return g_.nodes[static_cast<size_t>(id)].out_shape; }

private:
  int push(const Node& n) {
    g_.nodes.push_back(n);
    return static_cast<int>(g_.nodes.size()) - 1;
  }

  int add_param(const std::string& name, Shape shape, int layer_index) {
    ParamTensorT<T> p;
    p.name = name;
    p.value = TensorT<T>(shape);
    Rng rng = named_rng(g_.cfg.seed, name);
    for (int64_t i = 0; i < p.value.size(); ++i) {
      p.value[i] = static_cast<T>(rng.truncated_normal(0.05, 2.0));
    }
    p.grad = TensorT<T>(shape);
    p.layer_index = layer_index;
    g_.params.push_back(std::move(p));
    return static_cast<int>(g_.params.size()) - 1;
  }

  int add_zero_param(const std::string& name, Shape shape, int layer_index) {
    ParamTensorT<T> p;
    p.name = name;
    p.value = TensorT<T>(shape);
    p.grad = TensorT<T>(shape);
    p.layer_index = layer_index;
    g_.params.push_back(std::move(p));
    return static_cast<int>(g_.params.size()) - 1;
  }

  int add_one_param(const std::string& name, Shape shape, int layer_index) {
    ParamTensorT<T> p;
    p.name = name;
    p.value = TensorT<T>::full(shape, T(1));
    p.grad = TensorT<T>(shape);
    p.layer_index = layer_index;
    g_.params.push_back(std::move(p));
    return static_cast<int>(g_.params.size()) - 1;
  }

  ModelGraphT<T>& g_;
};

}  // namespace model_detail

template <typename T>
ModelGraphT<T> build_model_t(const ModelConfig& cfg) {
  cfg.validate();
  ModelGraphT<T> g;
  g.cfg = cfg;
  model_detail::GraphBuilder<T> b(g);
  const auto w = [&cfg](int64_t filters) { return cfg.scaled(filters); };
  const auto V = ops::Padding::Valid;
  const auto S = ops::Padding::Same;

  int x = b.add_input(cfg.input_size, cfg.input_channels);
  x = b.add_rescale(x, "stem/rescale", 2.0, -1.0);

  // Stem.
  x = b.conv_bn_relu(x, "stem/conv1", 3, 3, w(32), 2, V);
  x = b.conv_bn_relu(x, "stem/conv2", 3, 3, w(32), 1, V);
  x = b.conv_bn_relu(x, "stem/conv3", 3, 3, w(64), 1, S);
  {
    const int pool = b.add_pool(x, "stem/mix1/pool", NodeKind::MaxPool, 3, 2, V);
    const int conv = b.conv_bn_relu(x, "stem/mix1/conv", 3, 3, w(96), 2, V);
    x = b.add_concat({pool, conv}, "stem/mix1/concat");
  }
  {
    int a = b.conv_bn_relu(x, "stem/mix2/a/conv1", 1, 1, w(64), 1, S);
    a = b.conv_bn_relu(a, "stem/mix2/a/conv2", 3, 3, w(96), 1, V);
    int c = b.conv_bn_relu(x, "stem/mix2/b/conv1", 1, 1, w(64), 1, S);
    c = b.conv_bn_relu(c, "stem/mix2/b/conv2", 1, 7, w(64), 1, S);
    c = b.conv_bn_relu(c, "stem/mix2/b/conv3", 7, 1, w(64), 1, S);
    c = b.conv_bn_relu(c, "stem/mix2/b/conv4", 3, 3, w(96), 1, V);
    x = b.add_concat({a, c}, "stem/mix2/concat");
  }
  {
    const int conv = b.conv_bn_relu(x, "stem/mix3/conv", 3, 3, w(192), 2, V);
    const int pool = b.add_pool(x, "stem/mix3/pool", NodeKind::MaxPool, 3, 2, V);
    x = b.add_concat({conv, pool}, "stem/mix3/concat");
  }

  // Inception-ResNet-A: 1x1 | 1x1-3x3 | 1x1-3x3-3x3, concat, linear projection
  // back to the shortcut's channels, scaled add, relu.
  for (int i = 1; i <= cfg.num_a_blocks; ++i) {
    const std::string base = "block_a" + std::to_string(i);
    const int64_t in_c = b.out_of(x)[2];
    const int br0 = b.conv_bn_relu(x, base + "/b0/conv1", 1, 1, w(32), 1, S);
    int br1 = b.conv_bn_relu(x, base + "/b1/conv1", 1, 1, w(32), 1, S);
    br1 = b.conv_bn_relu(br1, base + "/b1/conv2", 3, 3, w(32), 1, S);
    int br2 = b.conv_bn_relu(x, base + "/b2/conv1", 1, 1, w(32), 1, S);
    br2 = b.conv_bn_relu(br2, base + "/b2/conv2", 3, 3, w(48), 1, S);
    br2 = b.conv_bn_relu(br2, base + "/b2/conv3", 3, 3, w(64), 1, S);
    const int cat = b.add_concat({br0, br1, br2}, base + "/concat");
    const int proj = b.conv_linear(cat, base + "/proj", in_c);
    const int sum = b.add_residual(x, proj, base + "/add", cfg.residual_scale);
    x = b.add_relu(sum, base + "/relu");
  }

  // Reduction-A: maxpool | 3x3 stride 2 | 1x1-3x3-3x3 stride 2.
  {
    const int pool = b.add_pool(x, "reduce_a/pool", NodeKind::MaxPool, 3, 2, V);
    const int conv = b.conv_bn_relu(x, "reduce_a/conv", 3, 3, w(384), 2, V);
    int chain = b.conv_bn_relu(x, "reduce_a/chain/conv1", 1, 1, w(256), 1, S);
    chain = b.conv_bn_relu(chain, "reduce_a/chain/conv2", 3, 3, w(256), 1, S);
    chain = b.conv_bn_relu(chain, "reduce_a/chain/conv3", 3, 3, w(384), 2, V);
    x = b.add_concat({pool, conv, chain}, "reduce_a/concat");
  }

  // Inception-ResNet-B: 1x1 | 1x1-1x7-7x1.
  for (int i = 1; i <= cfg.num_b_blocks; ++i) {
    const std::string base = "block_b" + std::to_string(i);
    const int64_t in_c = b.out_of(x)[2];
    const int br0 = b.conv_bn_relu(x, base + "/b0/conv1", 1, 1, w(192), 1, S);
    int br1 = b.conv_bn_relu(x, base + "/b1/conv1", 1, 1, w(128), 1, S);
    br1 = b.conv_bn_relu(br1, base + "/b1/conv2", 1, 7, w(160), 1, S);
    br1 = b.conv_bn_relu(br1, base + "/b1/conv3", 7, 1, w(192), 1, S);
    const int cat = b.add_concat({br0, br1}, base + "/concat");
    const int proj = b.conv_linear(cat, base + "/proj", in_c);
    const int sum = b.add_residual(x, proj, base + "/add", cfg.residual_scale);
    x = b.add_relu(sum, base + "/relu");
  }

  // Reduction-B: maxpool | 1x1-3x3 | 1x1-3x3 | 1x1-3x3-3x3, strided tails.
  {
    const int pool = b.add_pool(x, "reduce_b/pool", NodeKind::MaxPool, 3, 2, V);
    int br1 = b.conv_bn_relu(x, "reduce_b/b1/conv1", 1, 1, w(256), 1, S);
    br1 = b.conv_bn_relu(br1, "reduce_b/b1/conv2", 3, 3, w(384), 2, V);
    int br2 = b.conv_bn_relu(x, "reduce_b/b2/conv1", 1, 1, w(256), 1, S);
    br2 = b.conv_bn_relu(br2, "reduce_b/b2/conv2", 3, 3, w(288), 2, V);
    int br3 = b.conv_bn_relu(x, "reduce_b/b3/conv1", 1, 1, w(256), 1, S);
    br3 = b.conv_bn_relu(br3, "reduce_b/b3/conv2", 3, 3, w(288), 1, S);
    br3 = b.conv_bn_relu(br3, "reduce_b/b3/conv3", 3, 3, w(320), 2, V);
    x = b.add_concat({pool, br1, br2, br3}, "reduce_b/concat");
  }

  // Inception-ResNet-C: 1x1 | 1x1-1x3-3x1.
  for (int i = 1; i <= cfg.num_c_blocks; ++i) {
    const std::string base = "block_c" + std::to_string(i);
    const int64_t in_c = b.out_of(x)[2];
    const int br0 = b.conv_bn_relu(x, base + "/b0/conv1", 1, 1, w(192), 1, S);
    int br1 = b.conv_bn_relu(x, base + "/b1/conv1", 1, 1, w(192), 1, S);
    br1 = b.conv_bn_relu(br1, base + "/b1/conv2", 1, 3, w(224), 1, S);
    br1 = b.conv_bn_relu(br1, base + "/b1/conv3", 3, 1, w(256), 1, S);
    const int cat = b.add_concat({br0, br1}, base + "/concat");
    const int proj = b.conv_linear(cat, base + "/proj", in_c);
    const int sum = b.add_residual(x, proj, base + "/add", cfg.residual_scale);
    x = b.add_relu(sum, base + "/relu");
  }

  // Head.
  x = b.add_global_avg_pool(x, "head/gap");
  x = b.add_dropout(x, "head/dropout", cfg.dropout_rate);
  b.add_dense(x, "head/dense", cfg.num_classes);
  return g;
}

template <typename T>
TensorT<T> ModelGraphT<T>::forward(const TensorT<T>& batch, RunMode mode, uint64_t dropout_seed,
                                   ForwardTraceT<T>* trace) const {
  if (mode == RunMode::Train) {
    throw invalid_error("train-mode forward mutates batchnorm state; use forward_train");
  }
  return forward_impl(batch, mode, dropout_seed, trace, nullptr);
}

template <typename T>
TensorT<T> ModelGraphT<T>::forward_impl(const TensorT<T>& batch, RunMode mode,
                                        uint64_t dropout_seed, ForwardTraceT<T>* trace,
                                        ModelGraphT* mutable_self) const {
  const Node& in_node = nodes[0];
  const Shape expected = model_detail::with_batch(in_node.out_shape, batch.dim(0));
  if (batch.shape() != expected) {
    throw shape_error("model input must have shape " + shape_str(expected) + ", got " +
                      shape_str(batch.shape()));
  }

  std::vector<std::optional<TensorT<T>>> acts(nodes.size());
  std::vector<std::optional<ops::BatchNormCache<T>>> bn_caches;
  std::vector<std::optional<TensorT<T>>> dropout_masks;
  if (trace) {
    bn_caches.resize(nodes.size());
    dropout_masks.resize(nodes.size());
  }

  // Without a trace, free each activation after its last consumer.
  std::vector<int> remaining_uses(nodes.size(), 0);
  for (const Node& n : nodes) {
    for (int id : n.inputs) ++remaining_uses[static_cast<size_t>(id)];
  }
  remaining_uses.back() += 1;  // keep the output alive

  for (size_t id = 0; id < nodes.size(); ++id) {
    const Node& n = nodes[id];
    const auto arg = [&](int slot) -> const TensorT<T>& { return *acts[static_cast<size_t>(n.inputs[static_cast<size_t>(slot)])]; };
    TensorT<T> out;
    switch (n.kind) {
      case NodeKind::Input:
        out = batch;
        break;
      case NodeKind::Rescale:
        out = ops::affine_rescale(arg(0), n.scale, n.shift);
        break;
      case NodeKind::Conv: {
        const TensorT<T>* bias = n.bias_param >= 0 ? &params[static_cast<size_t>(n.bias_param)].value : nullptr;
        out = ops::conv2d(arg(0), params[static_cast<size_t>(n.kernel_param)].value, bias, n.stride, n.padding);
        break;
      }
      case NodeKind::BatchNorm: {
        const auto& gamma = params[static_cast<size_t>(n.gamma_param)].value;
        const auto& beta = params[static_cast<size_t>(n.beta_param)].value;
        if (mode == RunMode::Train) {
          ops::BatchNormCache<T> cache;
          out = ops::batchnorm_train(arg(0), gamma, beta,
                                     mutable_self->bn_states[static_cast<size_t>(n.bn_state)],
                                     bn_momentum, bn_eps, trace ? &cache : nullptr);
          if (trace) bn_caches[id] = std::move(cache);
        } else {
          out = ops::batchnorm_eval(arg(0), gamma, beta, bn_states[static_cast<size_t>(n.bn_state)], bn_eps);
        }
        break;
      }
      case NodeKind::Relu:
        out = ops::relu(arg(0));
        break;
      case NodeKind::MaxPool:
        out = ops::maxpool2d(arg(0), n.window, n.stride, n.padding);
        break;
      case NodeKind::AvgPool:
        out = ops::avgpool2d(arg(0), n.window, n.stride, n.padding);
        break;
      case NodeKind::Concat: {
        std::vector<const TensorT<T>*> ins;
        ins.reserve(n.inputs.size());
        for (int src : n.inputs) ins.push_back(&*acts[static_cast<size_t>(src)]);
        out = ops::concat_channels(ins);
        break;
      }
      case NodeKind::ResidualAdd:
        out = ops::residual_add_scaled(arg(0), arg(1), n.scale);
        break;
      case NodeKind::GlobalAvgPool:
        out = ops::global_avg_pool(arg(0));
        break;
      case NodeKind::Dropout: {
        if (mode == RunMode::Train && n.rate > 0.0) {
          auto r = ops::dropout_train(arg(0), n.rate, mix_seed(dropout_seed, static_cast<uint64_t>(id)));
          out = std::move(r.output);
          if (trace) dropout_masks[id] = std::move(r.scaled_mask);
        } else {
          out = arg(0);
          if (trace) dropout_masks[id] = TensorT<T>::full(out.shape(), T(1));
        }
        break;
      }
      case NodeKind::Dense:
        out = ops::dense(arg(0), params[static_cast<size_t>(n.kernel_param)].value,
                         params[static_cast<size_t>(n.bias_param)].value);
        break;
    }
    acts[id] = std::move(out);
    if (!trace) {
      for (int src : n.inputs) {
        if (--remaining_uses[static_cast<size_t>(src)] == 0) acts[static_cast<size_t>(src)].reset();
      }
    }
  }

  TensorT<T> logits = *acts.back();
  if (trace) {
    trace->activations = std::move(acts);
    trace->bn_caches = std::move(bn_caches);
    trace->dropout_masks = std::move(dropout_masks);
  }
  return logits;
}

template <typename T>
TensorT<T> ModelGraphT<T>::backward(const ForwardTraceT<T>& trace, const TensorT<T>& grad_logits) {
  std::vector<std::optional<TensorT<T>>> grads(nodes.size());
  grads.back() = grad_logits;

  const auto accumulate = [&grads](int node_id, TensorT<T>&& g) {
    auto& slot = grads[static_cast<size_t>(node_id)];
    if (!slot) {
      slot = std::move(g);
    } else {
      TensorT<T>& acc = *slot;
      for (int64_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
    }
  };

  for (size_t idx = nodes.size(); idx-- > 0;) {
    const Node& n = nodes[idx];
    if (!grads[idx]) continue;  // dead branch (cannot happen in this graph)
    const TensorT<T>& dy = *grads[idx];
    const auto act = [&](int slot) -> const TensorT<T>& {
      return *trace.activations[static_cast<size_t>(n.inputs[static_cast<size_t>(slot)])];
    };
    switch (n.kind) {
      case NodeKind::Input:
        break;
      case NodeKind::Rescale: {
        TensorT<T> dx(dy.shape());
        for (int64_t i = 0; i < dy.size(); ++i) dx[i] = static_cast<T>(n.scale) * dy[i];
        accumulate(n.inputs[0], std::move(dx));
        break;
      }
      case NodeKind::Conv: {
        auto& kernel = params[static_cast<size_t>(n.kernel_param)];
        auto g = ops::conv2d_backward(act(0), kernel.value, dy, n.bias_param >= 0, n.stride, n.padding);
        for (int64_t i = 0; i < kernel.grad.size(); ++i) kernel.grad[i] += g.kernel[i];
        if (n.bias_param >= 0) {
          auto& bias = params[static_cast<size_t>(n.bias_param)];
          for (int64_t i = 0; i < bias.grad.size(); ++i) bias.grad[i] += (*g.bias)[i];
        }
        accumulate(n.inputs[0], std::move(g.input));
        break;
      }
      case NodeKind::BatchNorm: {
        auto& gamma = params[static_cast<size_t>(n.gamma_param)];
        auto& beta = params[static_cast<size_t>(n.beta_param)];
        auto g = ops::batchnorm_backward(dy, gamma.value, *trace.bn_caches[idx]);
        for (int64_t i = 0; i < gamma.grad.size(); ++i) gamma.grad[i] += g.gamma[i];
        for (int64_t i = 0; i < beta.grad.size(); ++i) beta.grad[i] += g.beta[i];
        accumulate(n.inputs[0], std::move(g.input));
        break;
      }
      case NodeKind::Relu:
        accumulate(n.inputs[0], ops::relu_backward(act(0), dy));
        break;
      case NodeKind::MaxPool:
        accumulate(n.inputs[0], ops::pool2d_backward(act(0), dy, ops::PoolKind::Max, n.window, n.stride, n.padding));
        break;
      case NodeKind::AvgPool:
        accumulate(n.inputs[0], ops::pool2d_backward(act(0), dy, ops::PoolKind::Avg, n.window, n.stride, n.padding));
        break;
      case NodeKind::Concat: {
        std::vector<Shape> shapes;
        shapes.reserve(n.inputs.size());
        for (int src : n.inputs) shapes.push_back(trace.activations[static_cast<size_t>(src)]->shape());
        auto parts = ops::concat_channels_backward(dy, shapes);
        for (size_t i = 0; i < parts.size(); ++i) accumulate(n.inputs[i], std::move(parts[i]));
        break;
      }
      case NodeKind::ResidualAdd: {
        TensorT<T> d_short = dy;
        TensorT<T> d_branch(dy.shape());
        for (int64_t i = 0; i < dy.size(); ++i) d_branch[i] = static_cast<T>(n.scale) * dy[i];
        accumulate(n.inputs[0], std::move(d_short));
        accumulate(n.inputs[1], std::move(d_branch));
        break;
      }
      case NodeKind::GlobalAvgPool:
        accumulate(n.inputs[0], ops::global_avg_pool_backward(act(0).shape(), dy));
        break;
      case NodeKind::Dropout: {
        const TensorT<T>& mask = *trace.dropout_masks[idx];
        TensorT<T> dx(dy.shape());
        for (int64_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask[i];
        accumulate(n.inputs[0], std::move(dx));
        break;
      }
      case NodeKind::Dense: {
        auto& kernel = params[static_cast<size_t>(n.kernel_param)];
        auto& bias = params[static_cast<size_t>(n.bias_param)];
        auto g = ops::dense_backward(act(0), kernel.value, dy);
        for (int64_t i = 0; i < kernel.grad.size(); ++i) kernel.grad[i] += g.weight[i];
        for (int64_t i = 0; i < bias.grad.size(); ++i) bias.grad[i] += g.bias[i];
        accumulate(n.inputs[0], std::move(g.input));
        break;
      }
    }
    if (idx > 0) grads[idx].reset();
  }
  return grads[0] ? std::move(*grads[0]) : TensorT<T>(model_detail::with_batch(nodes[0].out_shape, grad_logits.dim(0)));
}

}  // namespace irnet
