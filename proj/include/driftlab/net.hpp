#pragma once

#include "driftlab/linalg.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

namespace driftlab {

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

struct ReluLayer {};

// Single 2-D convolution, stride 1, valid padding. Rows are flattened
// (c, h, w) samples in row-major order.
struct Conv2dLayer {
  int in_c = 0, in_h = 0, in_w = 0;
  int out_c = 0, kh = 0, kw = 0;
  Matrix kernel;  // out_c x (in_c*kh*kw)
  Vector bias;    // out_c
  int out_h() const { return in_h - kh + 1; }
  int out_w() const { return in_w - kw + 1; }
  int out_size() const { return out_c * out_h() * out_w(); }
};

using Layer = std::variant<DenseLayer, ReluLayer, Conv2dLayer>;

struct NetworkConfig {
  std::vector<int> input_shape;  // {d} for flat inputs, {c,h,w} for images
  std::vector<int> hidden_dims{64, 64};
  int feature_dim = 32;
  bool conv_front = false;  // prepend conv+relu before the dense stack
  int conv_channels = 8;
  int conv_kernel = 3;

  int flat_input_dim() const;
};

// Activations captured during a forward pass; acts[0] is the input batch,
// acts.back() the feature embeddings.
struct ForwardTrace {
  std::vector<Matrix> acts;
  const Matrix& features() const { return acts.back(); }
};

struct GradientSet {
  struct LayerGrad {
    Matrix weight;
    Vector bias;
  };
  std::vector<LayerGrad> layers;  // aligned with Network::layers(); empty grad for ReLU
  Matrix head;                    // C x d; 0x0 when head untouched by the loss

  bool finite() const;
};

// Objective for input-space gradients: mean over the batch of
// ||f(x) - prototype||^2 (the targeted-attack objective).
struct ObjectiveSpec {
  Vector prototype;
};

// Cross-entropy over all current classes plus optional logits distillation
// against a frozen teacher (teacher_logits covers the first C_old columns).
struct LossSpec {
  double lambda = 0.0;
  double temperature = 2.0;
  const Matrix* teacher_logits = nullptr;
};

class Network {
 public:
  Network() = default;
  static Network create(const NetworkConfig& cfg, uint64_t seed);

  const NetworkConfig& config() const { return cfg_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  const Matrix& head() const { return head_; }
  Matrix& head() { return head_; }
  int feature_dim() const { return cfg_.feature_dim; }
  int num_classes() const { return static_cast<int>(head_.rows()); }

  // Appends n_new zero rows to the classifier head.
  void grow_head(int n_new);

  Matrix forward_features(const Matrix& batch) const;
  Matrix forward_logits(const Matrix& batch) const;
  ForwardTrace forward_trace(const Matrix& batch) const;

  // Reverse pass from a gradient w.r.t. features. Returns the gradient
  // w.r.t. the input batch; fills per-layer parameter gradients when
  // grads != nullptr.
  Matrix backward(const ForwardTrace& trace, const Matrix& dfeatures, GradientSet* grads) const;

 private:
  NetworkConfig cfg_;
  std::vector<Layer> layers_;
  Matrix head_;  // C x d

  void check_input(const Matrix& batch) const;
};

Matrix input_gradient(const Network& net, const Matrix& batch, const ObjectiveSpec& objective);

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double distill = 0.0;
};

LossBreakdown loss_with_gradients(const Network& net, const Matrix& batch,
                                  const std::vector<int>& labels, const LossSpec& loss,
                                  GradientSet* grads);

GradientSet param_gradient(const Network& net, const Matrix& batch, const std::vector<int>& labels,
                           const LossSpec& loss);

struct SgdHyper {
  float lr = 0.05f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
};

// Velocity buffers persist across steps; construct fresh at each task
// boundary.
class SgdState {
 public:
  explicit SgdState(const Network& net);
  void step(Network& net, const GradientSet& grads, const SgdHyper& hp);

 private:
  std::vector<GradientSet::LayerGrad> vel_;
  Matrix vel_head_;
};

uint64_t weights_hash(const Network& net);

void save_network(const Network& net, const std::filesystem::path& path);
Network load_network(const std::filesystem::path& path);

}  // namespace driftlab
