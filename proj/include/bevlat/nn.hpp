#pragma once

// Transformer pieces shared by the encoder, decoder and denoiser.

#include <torch/torch.h>

namespace bevlat {

class SelfAttentionImpl : public torch::nn::Module {
 public:
  SelfAttentionImpl(int width, int heads);
  /// x: [B, T, width]
  torch::Tensor forward(const torch::Tensor& x);

 private:
  int heads_;
  torch::nn::Linear qkv_{nullptr};
  torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(SelfAttention);

/// Pre-norm block: x + attn(norm(x)), then x + mlp(norm(x)); MLP ratio 4, GELU.
class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int width, int heads, int mlp_ratio = 4);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  SelfAttention attn_{nullptr};
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(TransformerBlock);

/// `depth` blocks followed by a final LayerNorm.
class TransformerImpl : public torch::nn::Module {
 public:
  TransformerImpl(int width, int heads, int depth);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::ModuleList blocks_;
  torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(Transformer);

/// Fixed sin/cos features of scalar positions: [n] -> [n, dim].
/// Frequencies run geometrically from 1 to 1 / max_period.
torch::Tensor sinusoidal_encoding(const torch::Tensor& positions, int dim, double max_period = 100.0);

}  // namespace bevlat
