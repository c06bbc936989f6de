#pragma once

// Grad-CAM on the ConvD layer.
//
// For target class y, the gradient of the pre-softmax logit G^y with respect
// to each ConvD channel A^k is averaged over the h*w positions to give a
// channel weight; the map is relu(sum_k weight_k * A^k).
//
// grad_cam works with any network that exposes its ConvD activations and
// the logit gradient with respect to them (see the GradCamNetwork concept),
// so the fusion model and the small affine test network share one code path.

#include "mmfuse/encoders.hpp"
#include "mmfuse/fusion.hpp"
#include "mmfuse/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace mmfuse {

template <typename T>
struct GradCAMMap {
  Mat<T> raw;         // (h, w), >= 0
  Mat<T> normalized;  // (h, w), in [0, 1]
  Vec<T> channel_weights;
  int target_class = 0;
  std::string layer;
};

template <typename Net>
concept GradCamNetwork = requires(const Net& net, const typename Net::Input& in, int y) {
  typename Net::Scalar;
  { net.num_classes() } -> std::convertible_to<int>;
  { net.layer_name() } -> std::convertible_to<std::string>;
  // (A as an ImageFeatureMap, dG^y/dA with the same (c, h*w) layout)
  { net.activations_and_gradient(in, y) };
};

// Fusion model adapter: ConvD output and the backward pass seeded with e_y.
template <typename T>
class FusionGradCam {
 public:
  using Scalar = T;
  using Input = FusionInput<T>;

  explicit FusionGradCam(const FusionModel<T>& model) : model_(model) {}

  int num_classes() const { return model_.config().num_classes; }
  std::string layer_name() const { return "convd"; }

  std::pair<ImageFeatureMap<T>, Mat<T>> activations_and_gradient(const Input& in, int y) const {
    const auto state = model_.forward(in);
    BackwardSeeds<T> seeds;
    seeds.d_logits = Vec<T>::Zero(num_classes());
    seeds.d_logits(y) = T(1);
    const auto g = model_.backward(state, seeds, nullptr);
    ImageFeatureMap<T> a(in.image.c, in.image.h, in.image.w);
    a.values = state.convd;
    return {std::move(a), g.d_convd};
  }

 private:
  const FusionModel<T>& model_;
};

// Z -> ConvD (1x1) -> A -> G^y = <weights[y], A> + bias[y].
// The ConvD-to-logit path is affine, so Grad-CAM has a closed form.
template <typename T>
class AffineConvDNet {
 public:
  using Scalar = T;
  using Input = ImageFeatureMap<T>;

  Mat<T> convd_w;               // (c, c)
  Vec<T> convd_b;               // (c)
  std::vector<Mat<T>> weights;  // per class, (c, h*w)
  Vec<T> bias;                  // (classes)

  int num_classes() const { return static_cast<int>(weights.size()); }
  std::string layer_name() const { return "convd"; }

  ImageFeatureMap<T> convd(const Input& z) const {
    ImageFeatureMap<T> a(z.c, z.h, z.w);
    a.values = (convd_w * z.values).colwise() + convd_b;
    return a;
  }

  Vec<T> logits(const Input& z) const {
    const auto a = convd(z);
    Vec<T> out(num_classes());
    for (int y = 0; y < num_classes(); ++y) {
      out(y) = weights[static_cast<std::size_t>(y)].cwiseProduct(a.values).sum() + bias(y);
    }
    return out;
  }

  std::pair<ImageFeatureMap<T>, Mat<T>> activations_and_gradient(const Input& z, int y) const {
    return {convd(z), weights[static_cast<std::size_t>(y)]};
  }
};

template <typename T>
Mat<T> normalize_map(const Mat<T>& raw) {
  const T mx = raw.maxCoeff();
  if (!(mx > T(0))) return Mat<T>::Zero(raw.rows(), raw.cols());
  const T mn = raw.minCoeff();
  if (mx == mn) return Mat<T>::Ones(raw.rows(), raw.cols());
  return (raw.array() - mn).matrix() / (mx - mn);
}

template <GradCamNetwork Net>
GradCAMMap<typename Net::Scalar> grad_cam(const Net& net, const typename Net::Input& input,
                                          int target_class, const std::string& layer = "convd") {
  using T = typename Net::Scalar;
  if (layer != net.layer_name()) {
    throw ContractError("unknown layer '" + layer + "' (Grad-CAM is available on '" +
                        net.layer_name() + "')");
  }
  if (target_class < 0 || target_class >= net.num_classes()) {
    throw ContractError("target class " + std::to_string(target_class) + " outside [0, " +
                        std::to_string(net.num_classes()) + ")");
  }
  const auto [acts, grad] = net.activations_and_gradient(input, target_class);
  if (grad.rows() != acts.values.rows() || grad.cols() != acts.values.cols()) {
    throw ContractError("gradient shape does not match layer activations");
  }
  GradCAMMap<T> out;
  out.target_class = target_class;
  out.layer = layer;
  // Z = h * w positions.
  out.channel_weights = grad.rowwise().mean();
  const Vec<T> flat = (acts.values.transpose() * out.channel_weights).cwiseMax(T(0));
  out.raw.resize(acts.h, acts.w);
  for (int i = 0; i < acts.h; ++i) {
    for (int j = 0; j < acts.w; ++j) out.raw(i, j) = flat(i * acts.w + j);
  }
  out.normalized = normalize_map<T>(out.raw);
  return out;
}

// Half-pixel-centred bilinear upsampling of a 2-D grid.
template <typename T>
Mat<T> upsample_bilinear(const Mat<T>& src, int height, int width) {
  Mat<T> dst(height, width);
  const double sy = static_cast<double>(src.rows()) / height;
  const double sx = static_cast<double>(src.cols()) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.rows() - 1));
    const auto y0 = static_cast<Eigen::Index>(fy);
    const Eigen::Index y1 = std::min<Eigen::Index>(y0 + 1, src.rows() - 1);
    const double ty = fy - static_cast<double>(y0);
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.cols() - 1));
      const auto x0 = static_cast<Eigen::Index>(fx);
      const Eigen::Index x1 = std::min<Eigen::Index>(x0 + 1, src.cols() - 1);
      const double tx = fx - static_cast<double>(x0);
      const double top = src(y0, x0) * (1 - tx) + src(y0, x1) * tx;
      const double bot = src(y1, x0) * (1 - tx) + src(y1, x1) * tx;
      dst(y, x) = static_cast<T>(top * (1 - ty) + bot * ty);
    }
  }
  return dst;
}

// Blue (cold) to orange (hot).
inline std::array<float, 3> heat_color(double v) {
  v = std::clamp(v, 0.0, 1.0);
  constexpr std::array<double, 3> cold{0.0, 0.0, 1.0};
  constexpr std::array<double, 3> hot{1.0, 165.0 / 255.0, 0.0};
  std::array<float, 3> c{};
  for (int k = 0; k < 3; ++k) c[static_cast<std::size_t>(k)] = static_cast<float>(cold[k] + (hot[k] - cold[k]) * v);
  return c;
}

// Upsamples the normalized map to the image, colours it and blends 50/50.
template <typename T>
Image render_overlay(const GradCAMMap<T>& map, const Image& image, float alpha = 0.5f) {
  if (image.channels != 3) throw ContractError("overlay expects an RGB image");
  const Mat<T> up = upsample_bilinear<T>(map.normalized, image.height, image.width);
  Image out(image.width, image.height, 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const auto c = heat_color(static_cast<double>(up(y, x)));
      for (int k = 0; k < 3; ++k) {
        out.at(y, x, k) = (1.0f - alpha) * image.at(y, x, k) + alpha * c[static_cast<std::size_t>(k)];
      }
    }
  }
  return out;
}

// Row-major grid, one row per line, 6 significant digits.
template <typename T>
std::string grid_csv(const Mat<T>& grid) {
  std::string out;
  char buf[32];
  for (Eigen::Index i = 0; i < grid.rows(); ++i) {
    for (Eigen::Index j = 0; j < grid.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.6g", static_cast<double>(grid(i, j)));
      if (j > 0) out.push_back(',');
      out += buf;
    }
    out.push_back('\n');
  }
  return out;
}

template <typename T>
void write_grid_csv(const Mat<T>& grid, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << grid_csv(grid);
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

}  // namespace mmfuse
