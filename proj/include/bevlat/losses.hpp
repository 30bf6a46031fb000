#pragma once

// Stage-1 objective: KL, reconstruction (pixel + perceptual), hinge critic
// loss, adversarial loss, adaptive adversarial weight and their total.

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace bevlat {

struct LossWeights {
  double beta = 1e-6;       ///< KL weight
  double adv_coeff = 0.1;   ///< fixed factor in front of lambda * L_A
  double delta = 1e-6;      ///< stabilizer in the adaptive weight
  double lambda_max = 1e4;
};

/// Table-4 style ablation switches.
struct ReconstructionOptions {
  bool perceptual = true;
  bool l1_pixel = false;  ///< swap the squared pixel error for absolute error
};

/// A fixed feature map psi_l. Gradients flow to the input, never into the extractor.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  /// images: [N, H, W, 3] in [0,1] -> per-layer features.
  virtual std::vector<torch::Tensor> extract(const torch::Tensor& images) const = 0;
};

/// Four stride-2 3x3 convolutions with seeded random weights and GELU.
class RandomConvExtractor : public FeatureExtractor {
 public:
  explicit RandomConvExtractor(uint64_t seed = 1234, std::vector<int> channels = {16, 32, 48, 64});
  std::vector<torch::Tensor> extract(const torch::Tensor& images) const override;
  /// Global-average-pooled features of all layers, [N, sum C_l], float64.
  torch::Tensor pooled(const torch::Tensor& images) const;

 private:
  std::vector<torch::Tensor> weights_, biases_;
};

/// psi(x) = x; makes the perceptual term a second pixel MSE.
class IdentityExtractor : public FeatureExtractor {
 public:
  std::vector<torch::Tensor> extract(const torch::Tensor& images) const override { return {images}; }
};

/// Wraps externally supplied features (e.g. a pre-trained network).
class CallbackExtractor : public FeatureExtractor {
 public:
  using Fn = std::function<std::vector<torch::Tensor>(const torch::Tensor&)>;
  explicit CallbackExtractor(Fn fn) : fn_(std::move(fn)) {}
  std::vector<torch::Tensor> extract(const torch::Tensor& images) const override { return fn_(images); }

 private:
  Fn fn_;
};

/// 1/2 sum (exp(logvar) + mean^2 - 1 - logvar) over latent dims; with a
/// leading batch dimension ([B, S, S, D]) the per-item sums are averaged.
torch::Tensor kl_loss(const torch::Tensor& mean, const torch::Tensor& logvar, bool batched = false);

/// mean pixel error + sum over layers of the mean squared feature error.
torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& x_hat, const FeatureExtractor* extractor,
                                  const ReconstructionOptions& options = {});

/// mean(max(0, 1 - d_real)) + mean(max(0, 1 + d_fake)).
torch::Tensor hinge_d_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake);

/// -mean(d_fake).
torch::Tensor adversarial_loss(const torch::Tensor& d_fake);

/// grad_norm_r / (grad_norm_a + delta), clamped to [0, lambda_max].
double adaptive_lambda(double grad_norm_r, double grad_norm_a, double delta, double lambda_max = 1e4);

/// L2 norm of d(loss)/d(weight), keeping the graph alive.
double gradient_norm(const torch::Tensor& loss, const torch::Tensor& weight);

/// beta * kl + rec + adv_coeff * lambda * adv; lambda is a constant.
torch::Tensor total_generator_loss(const torch::Tensor& kl, const torch::Tensor& rec, const torch::Tensor& adv,
                                   double lambda, const LossWeights& weights);

/// Strided conv critic, one logit per image.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  DiscriminatorImpl(int image_size, int base_channels = 32);
  /// images: [N, H, W, 3] in [0,1] -> [N].
  torch::Tensor forward(const torch::Tensor& images);

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(Discriminator);

}  // namespace bevlat
