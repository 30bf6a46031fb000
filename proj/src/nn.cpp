#include "bevlat/nn.hpp"

#include "bevlat/error.hpp"

#include <cmath>

namespace bevlat {

SelfAttentionImpl::SelfAttentionImpl(int width, int heads) : heads_(heads) {
  require(width % heads == 0, "self attention: width must be divisible by heads");
  qkv_ = register_module("qkv", torch::nn::Linear(width, 3 * width));
  proj_ = register_module("proj", torch::nn::Linear(width, width));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0), t = x.size(1), w = x.size(2);
  const auto hd = w / heads_;
  auto qkv = qkv_->forward(x).view({b, t, 3, heads_, hd}).permute({2, 0, 3, 1, 4});
  auto q = qkv[0], k = qkv[1], v = qkv[2];  // [B, H, T, hd]
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
  auto out = torch::matmul(attn, v).permute({0, 2, 1, 3}).reshape({b, t, w});
  return proj_->forward(out);
}

TransformerBlockImpl::TransformerBlockImpl(int width, int heads, int mlp_ratio) {
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  attn_ = register_module("attn", SelfAttention(width, heads));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  fc1_ = register_module("fc1", torch::nn::Linear(width, width * mlp_ratio));
  fc2_ = register_module("fc2", torch::nn::Linear(width * mlp_ratio, width));
}

torch::Tensor TransformerBlockImpl::forward(torch::Tensor x) {
  x = x + attn_->forward(norm1_->forward(x));
  return x + fc2_->forward(torch::gelu(fc1_->forward(norm2_->forward(x))));
}

TransformerImpl::TransformerImpl(int width, int heads, int depth) {
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < depth; ++i) blocks_->push_back(TransformerBlock(width, heads));
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
}

torch::Tensor TransformerImpl::forward(torch::Tensor x) {
  for (auto& block : *blocks_) x = block->as<TransformerBlock>()->forward(x);
  return norm_->forward(x);
}

torch::Tensor sinusoidal_encoding(const torch::Tensor& positions, int dim, double max_period) {
  require(dim >= 2 && dim % 2 == 0, "sinusoidal_encoding: dim must be even");
  const int half = dim / 2;
  auto opts = positions.options().dtype(positions.is_floating_point() ? positions.scalar_type() : torch::kFloat32);
  auto idx = torch::arange(half, opts);
  auto freqs = torch::exp(-std::log(max_period) * idx / std::max(half - 1, 1));
  auto args = positions.to(opts.dtype()).unsqueeze(-1) * freqs;
  return torch::cat({torch::sin(args), torch::cos(args)}, -1);
}

}  // namespace bevlat
