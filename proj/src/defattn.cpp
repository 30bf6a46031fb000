#include "bevlat/defattn.hpp"

#include "bevlat/error.hpp"

#include <cmath>
#include <numbers>

namespace bevlat {

namespace F = torch::nn::functional;

torch::Tensor bilinear_sample(const torch::Tensor& feature, double u, double v) {
  require(feature.dim() == 3, "bilinear_sample: expected [H, W, C]");
  require(std::isfinite(u) && std::isfinite(v), "bilinear_sample: non-finite coordinate");
  const int64_t h = feature.size(0), w = feature.size(1);
  const double x = u * w - 0.5;
  const double y = v * h - 0.5;
  const auto x0 = static_cast<int64_t>(std::floor(x));
  const auto y0 = static_cast<int64_t>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  auto out = torch::zeros({feature.size(2)}, feature.options());
  for (int dy = 0; dy <= 1; ++dy) {
    for (int dx = 0; dx <= 1; ++dx) {
      const int64_t xi = x0 + dx, yi = y0 + dy;
      if (xi < 0 || xi >= w || yi < 0 || yi >= h) continue;
      const double wt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
      if (wt != 0.0) out = out + wt * feature[yi][xi];
    }
  }
  return out;
}

torch::Tensor trilinear_sample(const torch::Tensor& feature, double u, double v, double w) {
  require(feature.dim() == 4, "trilinear_sample: expected [D, H, W, C]");
  const int64_t d = feature.size(0), h = feature.size(1), wd = feature.size(2);
  const double x = u * wd - 0.5, y = v * h - 0.5, z = w * d - 0.5;
  const auto x0 = static_cast<int64_t>(std::floor(x));
  const auto y0 = static_cast<int64_t>(std::floor(y));
  const auto z0 = static_cast<int64_t>(std::floor(z));
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  auto out = torch::zeros({feature.size(3)}, feature.options());
  for (int dz = 0; dz <= 1; ++dz) {
    for (int dy = 0; dy <= 1; ++dy) {
      for (int dx = 0; dx <= 1; ++dx) {
        const int64_t xi = x0 + dx, yi = y0 + dy, zi = z0 + dz;
        if (xi < 0 || xi >= wd || yi < 0 || yi >= h || zi < 0 || zi >= d) continue;
        const double wt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
        if (wt != 0.0) out = out + wt * feature[zi][yi][xi];
      }
    }
  }
  return out;
}

DeformableAttentionImpl::DeformableAttentionImpl(DeformableAttentionOptions options) : options_(options) {
  const auto& o = options_;
  require(o.heads >= 1 && o.channels % o.heads == 0, "deformable attention: channels must divide into heads");
  require(o.points >= 1 && o.levels >= 1, "deformable attention: need >= 1 point and level");
  require(o.spatial_dims == 2 || o.spatial_dims == 3, "deformable attention: spatial_dims must be 2 or 3");
  const int n_off = o.heads * o.levels * o.points * o.spatial_dims;
  offset_head = register_module("offset_head", torch::nn::Linear(o.channels, n_off));
  weight_head = register_module("weight_head", torch::nn::Linear(o.channels, o.heads * o.levels * o.points));
  output_map = register_module("output_map", torch::nn::Linear(torch::nn::LinearOptions(o.channels, o.channels).bias(false)));

  torch::NoGradGuard ng;
  // Start from a fixed star of offsets: head m points along its own direction,
  // key k sits k + 1 texels out. Attention starts uniform.
  offset_head->weight.zero_();
  auto bias = torch::zeros({o.heads, o.levels, o.points, o.spatial_dims});
  for (int m = 0; m < o.heads; ++m) {
    const double a = 2.0 * std::numbers::pi * m / o.heads;
    for (int l = 0; l < o.levels; ++l) {
      for (int k = 0; k < o.points; ++k) {
        bias[m][l][k][0] = std::cos(a) * (k + 1);
        bias[m][l][k][1] = std::sin(a) * (k + 1);
        if (o.spatial_dims == 3) bias[m][l][k][2] = (m % 2 == 0 ? 0.5 : -0.5) * (k % 2);
      }
    }
  }
  offset_head->bias.copy_(bias.flatten());
  weight_head->weight.zero_();
  weight_head->bias.zero_();
  torch::nn::init::xavier_uniform_(output_map->weight);
}

SamplingPlan DeformableAttentionImpl::plan(const torch::Tensor& query) {
  const auto& o = options_;
  auto q = query.dim() == 2 ? query.unsqueeze(0) : query;
  require(q.dim() == 3 && q.size(2) == o.channels, "deformable attention: query must be [Nq, Lq, C]");
  const auto nq = q.size(0), lq = q.size(1);
  auto offsets = offset_head->forward(q).view({nq, lq, o.heads, o.levels, o.points, o.spatial_dims});
  auto logits = weight_head->forward(q).view({nq, lq, o.heads, o.levels * o.points});
  auto weights = torch::softmax(logits, -1).view({nq, lq, o.heads, o.levels, o.points});
  return {offsets, weights};
}

torch::Tensor DeformableAttentionImpl::sampling_locations(const SamplingPlan& plan, const torch::Tensor& reference,
                                                          const std::vector<torch::Tensor>& values) const {
  const auto& o = options_;
  const auto n = reference.size(0), lq = reference.size(1);
  std::vector<torch::Tensor> per_level;
  for (int l = 0; l < o.levels; ++l) {
    const auto& v = values[l];
    // Spatial sizes ordered like the coordinates: (W, H[, D]).
    std::vector<double> size = {static_cast<double>(v.size(-1)), static_cast<double>(v.size(-2))};
    if (o.spatial_dims == 3) size.push_back(static_cast<double>(v.size(-3)));
    auto scale = torch::tensor(size, reference.options());
    auto off = plan.offsets.select(3, l) / scale;  // [Nq, Lq, M, K, dims]
    per_level.push_back(reference.view({n, lq, 1, 1, o.spatial_dims}) + off);
  }
  return torch::stack(per_level, 3);
}

torch::Tensor DeformableAttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& reference,
                                               const std::vector<torch::Tensor>& values) {
  const auto& o = options_;
  require(static_cast<int>(values.size()) == o.levels, "deformable attention: wrong number of value levels");
  require(reference.dim() == 3 && reference.size(2) == o.spatial_dims,
          "deformable attention: reference must be [N, Lq, dims]");
  const auto n = reference.size(0), lq = reference.size(1);
  const int64_t ch = o.channels / o.heads;
  for (const auto& v : values) {
    require(v.dim() == 2 + o.spatial_dims && v.size(0) == n && v.size(1) == o.channels,
            "deformable attention: value level shape mismatch");
  }
  auto plan = this->plan(query);
  require(plan.offsets.size(1) == lq, "deformable attention: query/reference length mismatch");
  require(plan.offsets.size(0) == 1 || plan.offsets.size(0) == n, "deformable attention: query batch mismatch");
  auto locs = sampling_locations(plan, reference, values);  // [N, Lq, M, L, K, dims]

  torch::Tensor acc;
  for (int l = 0; l < o.levels; ++l) {
    auto grid = (locs.select(3, l) * 2.0 - 1.0).permute({0, 2, 1, 3, 4});  // [N, M, Lq, K, dims]
    torch::Tensor val;
    if (o.spatial_dims == 2) {
      grid = grid.reshape({n * o.heads, lq, o.points, 2});
      val = values[l].contiguous().view({n * o.heads, ch, values[l].size(2), values[l].size(3)});
    } else {
      grid = grid.reshape({n * o.heads, lq, o.points, 1, 3});
      val = values[l].contiguous().view(
          {n * o.heads, ch, values[l].size(2), values[l].size(3), values[l].size(4)});
    }
    auto sampled = F::grid_sample(val, grid,
                                  F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kZeros).align_corners(false));
    sampled = sampled.view({n, o.heads, ch, lq, o.points});
    auto w = plan.weights.select(3, l).permute({0, 2, 1, 3}).unsqueeze(2);  // [Nq, M, 1, Lq, K]
    auto contrib = (sampled * w).sum(-1);                                  // [N, M, ch, Lq]
    acc = l == 0 ? contrib : acc + contrib;
  }
  auto heads = acc.permute({0, 3, 1, 2}).reshape({n, lq, o.channels});
  return output_map->forward(heads);
}

torch::Tensor aggregate_views(const torch::Tensor& per_view, const torch::Tensor& hit) {
  require(per_view.dim() == 3 && hit.dim() == 2 && per_view.size(0) == hit.size(0) && per_view.size(1) == hit.size(1),
          "aggregate_views: expected [V, Lq, C] and [V, Lq]");
  auto mask = hit.to(per_view.scalar_type()).unsqueeze(-1);
  auto count = mask.sum(0);
  return (per_view * mask).sum(0) / count.clamp_min(1.0);
}

torch::Tensor aggregate_depth(const torch::Tensor& per_depth, const torch::Tensor& weights,
                              const torch::Tensor& in_range, bool renormalize) {
  require(per_depth.dim() == 3 && weights.sizes() == in_range.sizes() && weights.size(0) == per_depth.size(0) &&
              weights.size(1) == per_depth.size(1),
          "aggregate_depth: expected [D, Lr, C], [D, Lr], [D, Lr]");
  auto w = weights * in_range.to(weights.scalar_type());
  if (renormalize) {
    auto total = w.sum(0, true);
    w = w / torch::where(total > 0, total, torch::ones_like(total));
  }
  return (per_depth * w.unsqueeze(-1)).sum(0);
}

}  // namespace bevlat
