#pragma once

// Image and text encoder contracts plus the deterministic toy backbones.
//
// An image encoder maps a decoded RGB image to a (c, h, w) feature map; a
// text encoder maps the fused string S to an (l, d) token-embedding table
// whose row 0 is the summary vector. Pretrained backbones plug in through
// the registry under their own names.

#include "mmfuse/tensor.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace mmfuse {

// Decoded image, interleaved HWC, channel values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c = 3)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, 0.0f) {}

  float& at(int y, int x, int ch) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + ch];
  }
  float at(int y, int x, int ch) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + ch];
  }
};

// Bilinear resize with half-pixel centres and edge clamping.
inline Image resize_bilinear(const Image& src, int width, int height) {
  if (src.width == width && src.height == height) return src;
  Image dst(width, height, src.channels);
  const double sx = static_cast<double>(src.width) / width;
  const double sy = static_cast<double>(src.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double ty = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double tx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const double top = src.at(y0, x0, c) * (1 - tx) + src.at(y0, x1, c) * tx;
        const double bot = src.at(y1, x0, c) * (1 - tx) + src.at(y1, x1, c) * tx;
        dst.at(y, x, c) = static_cast<float>(top * (1 - ty) + bot * ty);
      }
    }
  }
  return dst;
}

// Z_I stored channel-major: values(k, i * w + j) is channel k at row i, column j.
template <typename T>
struct ImageFeatureMap {
  int c = 0, h = 0, w = 0;
  Mat<T> values;

  ImageFeatureMap() = default;
  ImageFeatureMap(int channels, int height, int width)
      : c(channels), h(height), w(width), values(Mat<T>::Zero(channels, height * width)) {}

  T operator()(int k, int i, int j) const { return values(k, i * w + j); }
  T& operator()(int k, int i, int j) { return values(k, i * w + j); }

  // Spatial positions as tokens: (h*w, c).
  Mat<T> as_sequence() const { return values.transpose(); }
};

template <typename T>
struct TextFeatureSeq {
  Mat<T> tokens;        // (l, d)
  int valid_rows = 1;   // summary row plus kept token rows

  Eigen::Index max_length() const { return tokens.rows(); }
  Eigen::Index dim() const { return tokens.cols(); }
  Vec<T> summary() const { return tokens.row(0).transpose(); }
  Mat<T> valid() const { return tokens.topRows(valid_rows); }
};

struct EncoderSpec {
  std::string name;
  std::array<int, 3> shape{};  // image: (c, h, w); text: (l, d, 0)
  bool trainable = false;
  int max_tokens = 0;          // text only
  int input_width = 0;         // image only
  int input_height = 0;
};

class ImageEncoder {
 public:
  virtual ~ImageEncoder() = default;
  virtual const EncoderSpec& spec() const = 0;
  virtual ImageFeatureMap<double> encode(const Image& image) const = 0;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual const EncoderSpec& spec() const = 0;
  // `truncated` is incremented when S had more tokens than fit.
  virtual TextFeatureSeq<double> encode(std::string_view text, std::size_t* truncated = nullptr) const = 0;
};

// Checks a plugin's output against its declared shape.
inline ImageFeatureMap<double> encode_image(const ImageEncoder& enc, const Image& image) {
  const auto& s = enc.spec();
  if (s.input_width > 0 && (image.width != s.input_width || image.height != s.input_height)) {
    throw ContractError(s.name + ": expected " + std::to_string(s.input_width) + "x" +
                        std::to_string(s.input_height) + " input, got " + std::to_string(image.width) +
                        "x" + std::to_string(image.height));
  }
  auto z = enc.encode(image);
  if (z.c != s.shape[0] || z.h != s.shape[1] || z.w != s.shape[2] || z.values.rows() != z.c ||
      z.values.cols() != static_cast<Eigen::Index>(z.h) * z.w) {
    throw ContractError(s.name + ": produced feature map does not match declared shape");
  }
  require_finite(z.values, s.name);
  return z;
}

inline TextFeatureSeq<double> encode_text(const TextEncoder& enc, std::string_view text,
                                          std::size_t* truncated = nullptr) {
  const auto& s = enc.spec();
  auto z = enc.encode(text, truncated);
  if (z.tokens.rows() != s.shape[0] || z.tokens.cols() != s.shape[1] || z.valid_rows < 1 ||
      z.valid_rows > z.tokens.rows()) {
    throw ContractError(s.name + ": produced sequence does not match declared shape");
  }
  require_finite(z.tokens, s.name);
  return z;
}

// Fixed-seed 3x3 convolution (3 -> c channels, zero padding) followed by
// average pooling onto an h x w grid.
class ToyImageEncoder final : public ImageEncoder {
 public:
  struct Options {
    int channels = 4;
    int grid_h = 2;
    int grid_w = 2;
    int input_size = 32;
    std::uint64_t seed = 7;
    bool zero_weights = false;
  };

  ToyImageEncoder() : ToyImageEncoder(Options{}) {}
  explicit ToyImageEncoder(const Options& opt) : opt_(opt) {
    spec_.name = "toy";
    spec_.shape = {opt.channels, opt.grid_h, opt.grid_w};
    spec_.input_width = opt.input_size;
    spec_.input_height = opt.input_size;
    std::mt19937_64 rng(opt.seed);
    kernel_ = opt.zero_weights ? Mat<double>::Zero(opt.channels, 27)
                               : fan_in_uniform<double>(opt.channels, 27, 27, rng);
    bias_ = Vec<double>::Zero(opt.channels);
  }

  const EncoderSpec& spec() const override { return spec_; }

  ImageFeatureMap<double> encode(const Image& image) const override {
    if (image.channels != 3) throw ContractError("toy image encoder expects RGB input");
    const int H = image.height, W = image.width;
    ImageFeatureMap<double> out(opt_.channels, opt_.grid_h, opt_.grid_w);
    Mat<double> counts = Mat<double>::Zero(opt_.grid_h, opt_.grid_w);
    Vec<double> patch(27);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        int p = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            const bool inside = yy >= 0 && yy < H && xx >= 0 && xx < W;
            for (int ch = 0; ch < 3; ++ch) patch(p++) = inside ? image.at(yy, xx, ch) : 0.0;
          }
        }
        const Vec<double> resp = kernel_ * patch + bias_;
        const int gi = y * opt_.grid_h / H;
        const int gj = x * opt_.grid_w / W;
        out.values.col(gi * opt_.grid_w + gj) += resp;
        counts(gi, gj) += 1.0;
      }
    }
    for (int i = 0; i < opt_.grid_h; ++i) {
      for (int j = 0; j < opt_.grid_w; ++j) {
        if (counts(i, j) > 0) out.values.col(i * opt_.grid_w + j) /= counts(i, j);
      }
    }
    return out;
  }

 private:
  Options opt_;
  EncoderSpec spec_;
  Mat<double> kernel_;
  Vec<double> bias_;
};

// Lowercased whitespace tokens with edge punctuation removed; the separator
// token survives intact.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    std::string_view tok = text.substr(i, j - i);
    i = j;
    if (tok.empty()) continue;
    if (tok == "[SEP]") {
      out.emplace_back(tok);
      continue;
    }
    auto is_p = [](char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; };
    while (!tok.empty() && is_p(tok.front())) tok.remove_prefix(1);
    while (!tok.empty() && is_p(tok.back())) tok.remove_suffix(1);
    if (tok.empty()) continue;
    std::string t(tok);
    for (char& c : t) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    out.push_back(std::move(t));
  }
  return out;
}

// Hashed unigram embeddings. Row 0 is the mean of the kept token rows; rows
// 1.. hold the tokens in order. At most l - 1 tokens fit, so long inputs lose
// their tail (the wiki text) first.
class ToyTextEncoder final : public TextEncoder {
 public:
  struct Options {
    int dim = 8;
    int max_length = 256;
    std::uint64_t buckets = 4096;
    std::uint64_t seed = 11;
  };

  ToyTextEncoder() : ToyTextEncoder(Options{}) {}
  explicit ToyTextEncoder(const Options& opt) : opt_(opt) {
    if (opt.max_length < 1 || opt.dim < 1) throw ContractError("toy text encoder: bad shape");
    spec_.name = "toy";
    spec_.shape = {opt.max_length, opt.dim, 0};
    spec_.max_tokens = opt.max_length;
  }

  const EncoderSpec& spec() const override { return spec_; }

  Vec<double> embedding(std::string_view token) const {
    const std::uint64_t bucket = fnv1a(token) % opt_.buckets;
    std::mt19937_64 rng(opt_.seed ^ (bucket * 0x9E3779B97F4A7C15ULL));
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    Vec<double> v(opt_.dim);
    for (int k = 0; k < opt_.dim; ++k) v(k) = dist(rng);
    return v;
  }

  TextFeatureSeq<double> encode(std::string_view text, std::size_t* truncated) const override {
    const auto toks = tokenize(text);
    const auto capacity = static_cast<std::size_t>(opt_.max_length - 1);
    const std::size_t kept = std::min(toks.size(), capacity);
    if (toks.size() > capacity && truncated) ++*truncated;
    TextFeatureSeq<double> seq;
    seq.tokens = Mat<double>::Zero(opt_.max_length, opt_.dim);
    seq.valid_rows = static_cast<int>(kept) + 1;
    for (std::size_t t = 0; t < kept; ++t) {
      seq.tokens.row(static_cast<Eigen::Index>(t) + 1) = embedding(toks[t]).transpose();
    }
    if (kept > 0) {
      seq.tokens.row(0) = seq.tokens.middleRows(1, static_cast<Eigen::Index>(kept)).colwise().mean();
    }
    return seq;
  }

 private:
  Options opt_;
  EncoderSpec spec_;
};

// Name -> factory maps for the two encoder kinds. "toy" is always present;
// pretrained backbones register themselves under their own names.
template <typename Base>
class Registry {
 public:
  using Factory = std::function<std::unique_ptr<Base>()>;

  void add(const std::string& name, Factory f) { factories_[name] = std::move(f); }
  bool contains(const std::string& name) const { return factories_.count(name) != 0; }

  std::unique_ptr<Base> create(const std::string& name) const {
    auto it = factories_.find(name);
    if (it == factories_.end()) {
      std::string known;
      for (const auto& [k, _] : factories_) known += (known.empty() ? "" : ", ") + k;
      throw ContractError("no encoder registered under '" + name + "' (available: " + known + ")");
    }
    return it->second();
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : factories_) out.push_back(k);
    return out;
  }

 private:
  std::map<std::string, Factory> factories_;
};

inline Registry<ImageEncoder>& image_encoders() {
  static Registry<ImageEncoder> reg = [] {
    Registry<ImageEncoder> r;
    r.add("toy", [] { return std::make_unique<ToyImageEncoder>(); });
    return r;
  }();
  return reg;
}

inline Registry<TextEncoder>& text_encoders() {
  static Registry<TextEncoder> reg = [] {
    Registry<TextEncoder> r;
    r.add("toy", [] { return std::make_unique<ToyTextEncoder>(); });
    return r;
  }();
  return reg;
}

}  // namespace mmfuse
