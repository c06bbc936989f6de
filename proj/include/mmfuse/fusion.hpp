#pragma once

// Guided cross-attention fusion.
//
//   A       = ConvD(Z_I)                      1x1 conv, (c, h*w)
//   Zbar_I  = Attn(A^T),  Zbar_S = Attn(Z_S)  single-head self-attention
//   p_I     = mean over spatial tokens,  p_S = row 0
//   Zt_I    = relu(W_I^T p_I + b_I)           K-dim, likewise Zt_S
//   a_I     = sigmoid(W'_I^T p_S + b'_I)      image gate reads the text only
//   a_S     = sigmoid(W'_S^T p_I + b'_S)      text gate reads the image only
//   fused   = [a_I * Zt_I ; a_S * Zt_S]       2K
//   logits  = W2^T relu(W1^T fused + b1) + b2
//
// Everything is templated on the scalar so gradient checks run in double.
// Backward passes are hand-derived; tests compare them to central
// differences.

#include "mmfuse/encoders.hpp"
#include "mmfuse/tensor.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mmfuse {

enum class AttentionMode {
  learned,   // Q, K, V are learned linear maps of the input
  identity,  // Q = K = V = input
  none,      // no self-attention; Zbar = Z
};

enum class GateMode {
  sigmoid,
  constant_one,  // gates fixed at 1; fused is the plain concatenation
};

struct ModelConfig {
  int image_channels = 4;
  int text_dim = 8;
  int proj_dim = 100;
  int hidden_dim = 100;
  int num_classes = 2;
  AttentionMode attention = AttentionMode::learned;
  GateMode gate = GateMode::sigmoid;
  std::uint64_t seed = 0;
};

template <typename T>
struct AttentionParams {
  Mat<T> query, key, value;  // (width, width)

  static AttentionParams identity(int width) {
    return {Mat<T>::Identity(width, width), Mat<T>::Identity(width, width),
            Mat<T>::Identity(width, width)};
  }
};

template <typename T>
struct FusionParams {
  Mat<T> convd_w;  // (c, c)
  Vec<T> convd_b;  // (c)
  AttentionParams<T> img_attn, txt_attn;
  Mat<T> proj_img_w;  // (c, K)
  Vec<T> proj_img_b;
  Mat<T> proj_txt_w;  // (d, K)
  Vec<T> proj_txt_b;
  Mat<T> gate_img_w;  // (d, K): image gate from the text representation
  Vec<T> gate_img_b;
  Mat<T> gate_txt_w;  // (c, K): text gate from the image representation
  Vec<T> gate_txt_b;
  Mat<T> head_w1;  // (2K, H)
  Vec<T> head_b1;
  Mat<T> head_w2;  // (H, C)
  Vec<T> head_b2;

  // Visits every tensor as (name, tensor&) in a fixed order.
  template <typename F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <typename F>
  void visit(F&& f) const { visit_impl(*this, f); }

  static FusionParams zeros_like(const ModelConfig& cfg) {
    const int c = cfg.image_channels, d = cfg.text_dim, K = cfg.proj_dim, H = cfg.hidden_dim,
              C = cfg.num_classes;
    FusionParams p;
    p.convd_w = Mat<T>::Zero(c, c);
    p.convd_b = Vec<T>::Zero(c);
    p.img_attn = {Mat<T>::Zero(c, c), Mat<T>::Zero(c, c), Mat<T>::Zero(c, c)};
    p.txt_attn = {Mat<T>::Zero(d, d), Mat<T>::Zero(d, d), Mat<T>::Zero(d, d)};
    p.proj_img_w = Mat<T>::Zero(c, K);
    p.proj_img_b = Vec<T>::Zero(K);
    p.proj_txt_w = Mat<T>::Zero(d, K);
    p.proj_txt_b = Vec<T>::Zero(K);
    p.gate_img_w = Mat<T>::Zero(d, K);
    p.gate_img_b = Vec<T>::Zero(K);
    p.gate_txt_w = Mat<T>::Zero(c, K);
    p.gate_txt_b = Vec<T>::Zero(K);
    p.head_w1 = Mat<T>::Zero(2 * K, H);
    p.head_b1 = Vec<T>::Zero(H);
    p.head_w2 = Mat<T>::Zero(H, C);
    p.head_b2 = Vec<T>::Zero(C);
    return p;
  }

  // Fan-in scaled uniform for weights and biases alike, from cfg.seed.
  static FusionParams init(const ModelConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    FusionParams p = zeros_like(cfg);
    p.visit([&](std::string_view, auto& t) {
      const Eigen::Index fan_in = t.rows();
      t = fan_in_uniform<T>(t.rows(), t.cols(), fan_in, rng);
    });
    // Biases take the fan-in of their weight matrix.
    auto rebias = [&](Vec<T>& b, Eigen::Index fan_in) {
      b = fan_in_uniform<T>(b.rows(), 1, fan_in, rng);
    };
    rebias(p.convd_b, cfg.image_channels);
    rebias(p.proj_img_b, cfg.image_channels);
    rebias(p.proj_txt_b, cfg.text_dim);
    rebias(p.gate_img_b, cfg.text_dim);
    rebias(p.gate_txt_b, cfg.image_channels);
    rebias(p.head_b1, 2 * cfg.proj_dim);
    rebias(p.head_b2, cfg.hidden_dim);
    if (cfg.attention == AttentionMode::identity) {
      p.img_attn = AttentionParams<T>::identity(cfg.image_channels);
      p.txt_attn = AttentionParams<T>::identity(cfg.text_dim);
    }
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](std::string_view, const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& s, F& f) {
    f("convd.weight", s.convd_w);
    f("convd.bias", s.convd_b);
    f("img_attn.query", s.img_attn.query);
    f("img_attn.key", s.img_attn.key);
    f("img_attn.value", s.img_attn.value);
    f("txt_attn.query", s.txt_attn.query);
    f("txt_attn.key", s.txt_attn.key);
    f("txt_attn.value", s.txt_attn.value);
    f("proj_img.weight", s.proj_img_w);
    f("proj_img.bias", s.proj_img_b);
    f("proj_txt.weight", s.proj_txt_w);
    f("proj_txt.bias", s.proj_txt_b);
    f("gate_img.weight", s.gate_img_w);
    f("gate_img.bias", s.gate_img_b);
    f("gate_txt.weight", s.gate_txt_w);
    f("gate_txt.bias", s.gate_txt_b);
    f("head.fc1.weight", s.head_w1);
    f("head.fc1.bias", s.head_b1);
    f("head.fc2.weight", s.head_w2);
    f("head.fc2.bias", s.head_b2);
  }
};

// ---------------------------------------------------------------------------
// Self-attention

template <typename T>
struct AttentionCache {
  Mat<T> input, q, k, v, weights, output;
  T scale = T(1);
};

namespace detail {

template <typename T>
AttentionCache<T> attend(const Mat<T>& x, const AttentionParams<T>& p, AttentionMode mode) {
  AttentionCache<T> c;
  c.input = x;
  if (mode == AttentionMode::none) {
    c.output = x;
    return c;
  }
  if (mode == AttentionMode::identity) {
    c.q = x;
    c.k = x;
    c.v = x;
  } else {
    c.q = x * p.query;
    c.k = x * p.key;
    c.v = x * p.value;
  }
  c.scale = T(1) / std::sqrt(static_cast<T>(c.k.cols()));
  c.weights = row_softmax<T>((c.q * c.k.transpose()) * c.scale);
  c.output = c.weights * c.v;
  return c;
}

// Returns dL/dx and accumulates parameter gradients for learned mode.
template <typename T>
Mat<T> attend_backward(const AttentionCache<T>& c, const Mat<T>& d_out, const AttentionParams<T>& p,
                       AttentionMode mode, AttentionParams<T>* grads) {
  if (mode == AttentionMode::none) return d_out;
  const Mat<T> d_weights = d_out * c.v.transpose();
  const Mat<T> d_v = c.weights.transpose() * d_out;
  // Row-wise softmax Jacobian.
  const Vec<T> row_dot = (d_weights.array() * c.weights.array()).rowwise().sum().matrix();
  const Mat<T> d_scores =
      (c.weights.array() * (d_weights.colwise() - row_dot).array()).matrix() * c.scale;
  const Mat<T> d_q = d_scores * c.k;
  const Mat<T> d_k = d_scores.transpose() * c.q;
  if (mode == AttentionMode::identity) return d_q + d_k + d_v;
  if (grads) {
    grads->query += c.input.transpose() * d_q;
    grads->key += c.input.transpose() * d_k;
    grads->value += c.input.transpose() * d_v;
  }
  return d_q * p.query.transpose() + d_k * p.key.transpose() + d_v * p.value.transpose();
}

}  // namespace detail

// softmax(Q K^T / sqrt(d)) V over the rows of `seq` (m tokens of width d).
template <typename T>
Mat<T> self_attend(const Mat<T>& seq, const AttentionParams<T>& params,
                   AttentionMode mode = AttentionMode::learned) {
  if (seq.rows() < 1) throw ContractError("self_attend: empty sequence");
  require_finite(seq, "self_attend input");
  return detail::attend(seq, params, mode).output;
}

// ---------------------------------------------------------------------------
// Pooling, projection, gates, head

enum class Modality { image, text };

// Mean over tokens for images; the summary row for text.
template <typename T>
Vec<T> pool(const Mat<T>& attended, Modality m) {
  if (m == Modality::image) return attended.colwise().mean().transpose();
  return attended.row(0).transpose();
}

template <typename T>
Vec<T> pool_and_project(const Mat<T>& attended, Modality m, const FusionParams<T>& p) {
  const Vec<T> pooled = pool<T>(attended, m);
  const Vec<T> pre = m == Modality::image
                         ? Vec<T>(p.proj_img_w.transpose() * pooled + p.proj_img_b)
                         : Vec<T>(p.proj_txt_w.transpose() * pooled + p.proj_txt_b);
  require_finite(pre, "pool_and_project");
  return relu<T>(pre);
}

template <typename T>
struct GateOutput {
  Vec<T> gate_img, gate_txt;
  Vec<T> gated_img, gated_txt;
  Vec<T> fused;
};

template <typename T>
GateOutput<T> cross_gate(const Vec<T>& pooled_img, const Vec<T>& pooled_txt, const Vec<T>& proj_img,
                         const Vec<T>& proj_txt, const FusionParams<T>& p,
                         GateMode mode = GateMode::sigmoid) {
  require_finite(pooled_img, "cross_gate image input");
  require_finite(pooled_txt, "cross_gate text input");
  GateOutput<T> g;
  if (mode == GateMode::constant_one) {
    g.gate_img = Vec<T>::Ones(proj_img.size());
    g.gate_txt = Vec<T>::Ones(proj_txt.size());
  } else {
    g.gate_img = sigmoid<T>(Vec<T>(p.gate_img_w.transpose() * pooled_txt + p.gate_img_b));
    g.gate_txt = sigmoid<T>(Vec<T>(p.gate_txt_w.transpose() * pooled_img + p.gate_txt_b));
  }
  g.gated_img = g.gate_img.cwiseProduct(proj_img);
  g.gated_txt = g.gate_txt.cwiseProduct(proj_txt);
  g.fused.resize(g.gated_img.size() + g.gated_txt.size());
  g.fused << g.gated_img, g.gated_txt;
  return g;
}

template <typename T>
struct Prediction {
  Vec<T> logits, probs;
  int predicted() const {
    Eigen::Index i = 0;
    logits.maxCoeff(&i);
    return static_cast<int>(i);
  }
};

template <typename T>
Prediction<T> classify(const Vec<T>& fused, const FusionParams<T>& p) {
  require_finite(fused, "classify input");
  const Vec<T> hidden = relu<T>(Vec<T>(p.head_w1.transpose() * fused + p.head_b1));
  Prediction<T> out;
  out.logits = p.head_w2.transpose() * hidden + p.head_b2;
  out.probs = softmax<T>(out.logits);
  return out;
}

// ---------------------------------------------------------------------------
// Full model

// One encoded image-text pair: Z_I as (c, h*w) plus the valid text rows.
template <typename T>
struct FusionInput {
  ImageFeatureMap<T> image;
  Mat<T> text;  // (m, d), m >= 1
};

template <typename T>
struct LabeledInput {
  FusionInput<T> input;
  int label = 0;
};

template <typename T>
struct ForwardState {
  FusionInput<T> input;
  Mat<T> convd;  // A, (c, h*w)
  AttentionCache<T> img_attn, txt_attn;
  Vec<T> pooled_img, pooled_txt;
  Vec<T> pre_proj_img, pre_proj_txt, proj_img, proj_txt;
  GateOutput<T> gates;
  Vec<T> pre_hidden, hidden;
  Prediction<T> pred;
};

// Upstream gradients fed into FusionModel::backward. Gate seeds let tests
// differentiate the masks themselves.
template <typename T>
struct BackwardSeeds {
  Vec<T> d_logits;
  std::optional<Vec<T>> d_gate_img, d_gate_txt;
};

template <typename T>
struct InputGrads {
  Mat<T> d_convd;  // dL/dA, (c, h*w)
  Mat<T> d_image;  // dL/dZ_I, (c, h*w)
  Mat<T> d_text;   // (m, d)
};

template <typename T>
class FusionModel {
 public:
  FusionModel() = default;
  explicit FusionModel(const ModelConfig& cfg) : cfg_(cfg), params_(FusionParams<T>::init(cfg)) {}
  FusionModel(const ModelConfig& cfg, FusionParams<T> params) : cfg_(cfg), params_(std::move(params)) {}

  const ModelConfig& config() const { return cfg_; }
  FusionParams<T>& params() { return params_; }
  const FusionParams<T>& params() const { return params_; }

  void check_input(const FusionInput<T>& in) const {
    if (in.image.c != cfg_.image_channels || in.image.values.rows() != cfg_.image_channels ||
        in.image.values.cols() < 1) {
      throw ContractError("image feature map has " + std::to_string(in.image.c) +
                          " channels, model expects " + std::to_string(cfg_.image_channels));
    }
    if (in.text.cols() != cfg_.text_dim || in.text.rows() < 1) {
      throw ContractError("text sequence width " + std::to_string(in.text.cols()) +
                          ", model expects " + std::to_string(cfg_.text_dim));
    }
    require_finite(in.image.values, "image features");
    require_finite(in.text, "text features");
  }

  ForwardState<T> forward(const FusionInput<T>& in) const {
    check_input(in);
    const auto& p = params_;
    ForwardState<T> s;
    s.input = in;
    s.convd = (p.convd_w * in.image.values).colwise() + p.convd_b;
    s.img_attn = detail::attend<T>(s.convd.transpose(), p.img_attn, cfg_.attention);
    s.txt_attn = detail::attend<T>(in.text, p.txt_attn, cfg_.attention);
    s.pooled_img = pool<T>(s.img_attn.output, Modality::image);
    s.pooled_txt = pool<T>(s.txt_attn.output, Modality::text);
    s.pre_proj_img = p.proj_img_w.transpose() * s.pooled_img + p.proj_img_b;
    s.pre_proj_txt = p.proj_txt_w.transpose() * s.pooled_txt + p.proj_txt_b;
    s.proj_img = relu<T>(s.pre_proj_img);
    s.proj_txt = relu<T>(s.pre_proj_txt);
    s.gates = cross_gate<T>(s.pooled_img, s.pooled_txt, s.proj_img, s.proj_txt, p, cfg_.gate);
    s.pre_hidden = p.head_w1.transpose() * s.gates.fused + p.head_b1;
    s.hidden = relu<T>(s.pre_hidden);
    s.pred.logits = p.head_w2.transpose() * s.hidden + p.head_b2;
    require_finite(s.pred.logits, "logits");
    s.pred.probs = softmax<T>(s.pred.logits);
    return s;
  }

  Prediction<T> predict(const FusionInput<T>& in) const { return forward(in).pred; }

  // Accumulates parameter gradients into `grads` (may be null) and returns
  // gradients with respect to the inputs.
  InputGrads<T> backward(const ForwardState<T>& s, const BackwardSeeds<T>& seeds,
                         FusionParams<T>* grads) const {
    const auto& p = params_;
    const Eigen::Index K = cfg_.proj_dim;

    const Vec<T>& d_logits = seeds.d_logits;
    const Vec<T> d_hidden = p.head_w2 * d_logits;
    const Vec<T> d_pre_hidden = d_hidden.cwiseProduct(relu_mask(s.pre_hidden));
    const Vec<T> d_fused = p.head_w1 * d_pre_hidden;
    if (grads) {
      grads->head_w2 += s.hidden * d_logits.transpose();
      grads->head_b2 += d_logits;
      grads->head_w1 += s.gates.fused * d_pre_hidden.transpose();
      grads->head_b1 += d_pre_hidden;
    }

    const Vec<T> d_gated_img = d_fused.head(K);
    const Vec<T> d_gated_txt = d_fused.tail(K);
    const Vec<T> d_proj_img = d_gated_img.cwiseProduct(s.gates.gate_img);
    const Vec<T> d_proj_txt = d_gated_txt.cwiseProduct(s.gates.gate_txt);

    Vec<T> d_pooled_img = Vec<T>::Zero(s.pooled_img.size());
    Vec<T> d_pooled_txt = Vec<T>::Zero(s.pooled_txt.size());

    if (cfg_.gate == GateMode::sigmoid) {
      Vec<T> d_gate_img = d_gated_img.cwiseProduct(s.proj_img);
      Vec<T> d_gate_txt = d_gated_txt.cwiseProduct(s.proj_txt);
      if (seeds.d_gate_img) d_gate_img += *seeds.d_gate_img;
      if (seeds.d_gate_txt) d_gate_txt += *seeds.d_gate_txt;
      const Vec<T> d_pre_gate_img =
          d_gate_img.cwiseProduct(s.gates.gate_img.cwiseProduct((Vec<T>::Ones(K) - s.gates.gate_img)));
      const Vec<T> d_pre_gate_txt =
          d_gate_txt.cwiseProduct(s.gates.gate_txt.cwiseProduct((Vec<T>::Ones(K) - s.gates.gate_txt)));
      d_pooled_txt += p.gate_img_w * d_pre_gate_img;
      d_pooled_img += p.gate_txt_w * d_pre_gate_txt;
      if (grads) {
        grads->gate_img_w += s.pooled_txt * d_pre_gate_img.transpose();
        grads->gate_img_b += d_pre_gate_img;
        grads->gate_txt_w += s.pooled_img * d_pre_gate_txt.transpose();
        grads->gate_txt_b += d_pre_gate_txt;
      }
    }

    const Vec<T> d_pre_proj_img = d_proj_img.cwiseProduct(relu_mask(s.pre_proj_img));
    const Vec<T> d_pre_proj_txt = d_proj_txt.cwiseProduct(relu_mask(s.pre_proj_txt));
    d_pooled_img += p.proj_img_w * d_pre_proj_img;
    d_pooled_txt += p.proj_txt_w * d_pre_proj_txt;
    if (grads) {
      grads->proj_img_w += s.pooled_img * d_pre_proj_img.transpose();
      grads->proj_img_b += d_pre_proj_img;
      grads->proj_txt_w += s.pooled_txt * d_pre_proj_txt.transpose();
      grads->proj_txt_b += d_pre_proj_txt;
    }

    // Pooling.
    const Eigen::Index P = s.img_attn.output.rows();
    Mat<T> d_img_tokens = d_pooled_img.transpose().replicate(P, 1) / static_cast<T>(P);
    Mat<T> d_txt_tokens = Mat<T>::Zero(s.txt_attn.output.rows(), s.txt_attn.output.cols());
    d_txt_tokens.row(0) = d_pooled_txt.transpose();

    InputGrads<T> out;
    const Mat<T> d_x_img = detail::attend_backward<T>(s.img_attn, d_img_tokens, p.img_attn, cfg_.attention,
                                                      grads ? &grads->img_attn : nullptr);
    out.d_text = detail::attend_backward<T>(s.txt_attn, d_txt_tokens, p.txt_attn, cfg_.attention,
                                            grads ? &grads->txt_attn : nullptr);
    out.d_convd = d_x_img.transpose();
    if (grads) {
      grads->convd_w += out.d_convd * s.input.image.values.transpose();
      grads->convd_b += out.d_convd.rowwise().sum();
    }
    out.d_image = p.convd_w.transpose() * out.d_convd;
    return out;
  }

 private:
  static Vec<T> relu_mask(const Vec<T>& pre) {
    return pre.unaryExpr([](T v) { return v > T(0) ? T(1) : T(0); });
  }

  ModelConfig cfg_;
  FusionParams<T> params_;
};

template <typename T>
struct LossAndGrads {
  T loss = T(0);
  FusionParams<T> grads;
};

template <typename T>
T cross_entropy(const Prediction<T>& pred, int label) {
  // log-softmax directly from logits for stability.
  const T mx = pred.logits.maxCoeff();
  const T lse = mx + std::log((pred.logits.array() - mx).exp().sum());
  return lse - pred.logits(label);
}

template <typename T>
void check_labels(std::span<const LabeledInput<T>> batch, int num_classes) {
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].label < 0 || batch[i].label >= num_classes) {
      throw ContractError("label " + std::to_string(batch[i].label) + " of batch item " +
                          std::to_string(i) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

// Mean softmax cross-entropy over the batch and its gradient for every
// parameter tensor.
template <typename T>
LossAndGrads<T> loss_and_grads(std::span<const LabeledInput<T>> batch, const FusionModel<T>& model) {
  if (batch.empty()) throw ContractError("loss_and_grads: empty batch");
  check_labels(batch, model.config().num_classes);
  LossAndGrads<T> out;
  out.grads = FusionParams<T>::zeros_like(model.config());
  const T inv_n = T(1) / static_cast<T>(batch.size());
  for (const auto& item : batch) {
    const auto state = model.forward(item.input);
    out.loss += cross_entropy(state.pred, item.label) * inv_n;
    BackwardSeeds<T> seeds;
    seeds.d_logits = state.pred.probs * inv_n;
    seeds.d_logits(item.label) -= inv_n;
    model.backward(state, seeds, &out.grads);
  }
  if (!std::isfinite(static_cast<double>(out.loss))) throw ContractError("non-finite loss");
  return out;
}

template <typename T>
T batch_loss(std::span<const LabeledInput<T>> batch, const FusionModel<T>& model) {
  check_labels(batch, model.config().num_classes);
  T loss = T(0);
  for (const auto& item : batch) loss += cross_entropy(model.predict(item.input), item.label);
  return loss / static_cast<T>(batch.size());
}

}  // namespace mmfuse
