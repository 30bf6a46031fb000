#include "bevlat/losses.hpp"

#include "bevlat/encoder.hpp"
#include "bevlat/error.hpp"

#include <algorithm>
#include <cmath>

namespace bevlat {

namespace F = torch::nn::functional;

RandomConvExtractor::RandomConvExtractor(uint64_t seed, std::vector<int> channels) {
  auto gen = make_generator(seed);
  int in = 3;
  for (int out : channels) {
    const double scale = std::sqrt(2.0 / (in * 9));
    weights_.push_back(torch::randn({out, in, 3, 3}, gen, torch::kFloat32) * scale);
    biases_.push_back(torch::randn({out}, gen, torch::kFloat32) * 0.1);
    in = out;
  }
}

std::vector<torch::Tensor> RandomConvExtractor::extract(const torch::Tensor& images) const {
  auto x = images.permute({0, 3, 1, 2}) * 2.0 - 1.0;
  std::vector<torch::Tensor> out;
  for (size_t l = 0; l < weights_.size(); ++l) {
    const auto w = weights_[l].to(x.scalar_type());
    const auto b = biases_[l].to(x.scalar_type());
    x = torch::gelu(F::conv2d(x, w, F::Conv2dFuncOptions().bias(b).stride(2).padding(1)));
    out.push_back(x);
  }
  return out;
}

torch::Tensor RandomConvExtractor::pooled(const torch::Tensor& images) const {
  std::vector<torch::Tensor> parts;
  for (const auto& f : extract(images)) parts.push_back(f.mean({2, 3}));
  return torch::cat(parts, 1).to(torch::kFloat64);
}

torch::Tensor kl_loss(const torch::Tensor& mean, const torch::Tensor& logvar, bool batched) {
  require(mean.sizes() == logvar.sizes(), "kl_loss: mean and logvar shapes differ");
  auto terms = 0.5 * (torch::exp(logvar) + mean.square() - 1.0 - logvar);
  if (!batched) return terms.sum();
  return terms.flatten(1).sum(1).mean();
}

torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& x_hat, const FeatureExtractor* extractor,
                                  const ReconstructionOptions& options) {
  require(x.sizes() == x_hat.sizes(), "reconstruction_loss: shape mismatch");
  auto diff = x - x_hat;
  auto loss = options.l1_pixel ? diff.abs().mean() : diff.square().mean();
  if (options.perceptual && extractor != nullptr) {
    const auto fx = extractor->extract(x);
    const auto fy = extractor->extract(x_hat);
    require(fx.size() == fy.size(), "reconstruction_loss: extractor returned mismatched layers");
    for (size_t l = 0; l < fx.size(); ++l) loss = loss + (fx[l] - fy[l]).square().mean();
  }
  return loss;
}

torch::Tensor hinge_d_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  return torch::relu(1.0 - d_real).mean() + torch::relu(1.0 + d_fake).mean();
}

torch::Tensor adversarial_loss(const torch::Tensor& d_fake) { return -d_fake.mean(); }

double adaptive_lambda(double grad_norm_r, double grad_norm_a, double delta, double lambda_max) {
  require(grad_norm_r >= 0 && grad_norm_a >= 0 && delta > 0, "adaptive_lambda: invalid norms or delta");
  return std::clamp(grad_norm_r / (grad_norm_a + delta), 0.0, lambda_max);
}

double gradient_norm(const torch::Tensor& loss, const torch::Tensor& weight) {
  auto grads = torch::autograd::grad({loss}, {weight}, {}, /*retain_graph=*/true, /*create_graph=*/false,
                                     /*allow_unused=*/true);
  if (!grads[0].defined()) return 0.0;
  return grads[0].norm().item<double>();
}

torch::Tensor total_generator_loss(const torch::Tensor& kl, const torch::Tensor& rec, const torch::Tensor& adv,
                                   double lambda, const LossWeights& weights) {
  return weights.beta * kl + rec + weights.adv_coeff * lambda * adv;
}

DiscriminatorImpl::DiscriminatorImpl(int image_size, int base_channels) {
  require(image_size % 16 == 0, "discriminator: image size must be divisible by 16");
  namespace nn = torch::nn;
  const int c = base_channels;
  auto conv = [](int in, int out) { return nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1)); };
  auto act = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); };
  body_ = register_module("body", nn::Sequential(conv(3, c), act(), conv(c, 2 * c), act(), conv(2 * c, 2 * c), act(),
                                                 conv(2 * c, 2 * c), act()));
  const int side = image_size / 16;
  head_ = register_module("head", nn::Linear(2 * c * side * side, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& images) {
  auto x = images.permute({0, 3, 1, 2}) * 2.0 - 1.0;
  return head_->forward(body_->forward(x).flatten(1)).squeeze(1);
}

}  // namespace bevlat
