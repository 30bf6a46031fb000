#pragma once

// Deformable attention and the multi-view / multi-depth aggregation rules.
//
// Sampling coordinates are normalized: u in [0,1] spans the width, v the
// height (and w the depth of a volume). Texel i is centered at (i + 0.5) / size
// and everything outside the map reads as zero.

#include <torch/torch.h>

#include <vector>

namespace bevlat {

/// Bilinear read of feature [H, W, C] at normalized (u, v); zero padding.
torch::Tensor bilinear_sample(const torch::Tensor& feature, double u, double v);

/// Trilinear read of feature [D, H, W, C] at normalized (u, v, w) where u
/// spans W, v spans H and w spans D; zero padding.
torch::Tensor trilinear_sample(const torch::Tensor& feature, double u, double v, double w);

struct DeformableAttentionOptions {
  int channels = 32;
  int heads = 4;
  int points = 4;        ///< sampled keys per head and level
  int levels = 3;
  int spatial_dims = 2;  ///< 2: image maps, 3: BEV volumes
};

/// Offsets and softmax weights predicted from the queries.
struct SamplingPlan {
  torch::Tensor offsets;  ///< [Nq, Lq, M, L, K, dims], in texels of each level
  torch::Tensor weights;  ///< [Nq, Lq, M, L, K], sum over (L, K) is 1 per head
};

/// out(q) = sum_m W_m sum_{l,k} A_mlk(q) * V_m(l)[p + dp_mlk(q)]
///
/// Heads split the value channels into M contiguous groups of C / M. W_m is
/// the m-th column block of a bias-free C x C output map.
class DeformableAttentionImpl : public torch::nn::Module {
 public:
  explicit DeformableAttentionImpl(DeformableAttentionOptions options);

  /// query: [Lq, C] or [Nq, Lq, C] with Nq in {1, N}.
  SamplingPlan plan(const torch::Tensor& query);

  /// query: [Lq, C] or [Nq, Lq, C]; reference: [N, Lq, dims] normalized;
  /// values: per level [N, C, H, W] (2D) or [N, C, D, H, W] (3D). Returns [N, Lq, C].
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& reference,
                        const std::vector<torch::Tensor>& values);

  /// Normalized sampling locations [N, Lq, M, L, K, dims] for a plan.
  torch::Tensor sampling_locations(const SamplingPlan& plan, const torch::Tensor& reference,
                                   const std::vector<torch::Tensor>& values) const;

  const DeformableAttentionOptions& options() const { return options_; }

  torch::nn::Linear offset_head{nullptr};
  torch::nn::Linear weight_head{nullptr};
  torch::nn::Linear output_map{nullptr};

 private:
  DeformableAttentionOptions options_;
};
TORCH_MODULE(DeformableAttention);

/// Mean over the views whose hit flag is set; zero where no view hits.
/// per_view: [V, Lq, C], hit: [V, Lq] bool.
torch::Tensor aggregate_views(const torch::Tensor& per_view, const torch::Tensor& hit);

/// Weighted sum over depth with out-of-range weights zeroed. With
/// `renormalize`, surviving weights are rescaled to sum to one (only when any
/// survive). per_depth: [D, Lr, C], weights: [D, Lr], in_range: [D, Lr] bool.
torch::Tensor aggregate_depth(const torch::Tensor& per_depth, const torch::Tensor& weights,
                              const torch::Tensor& in_range, bool renormalize = true);

}  // namespace bevlat
