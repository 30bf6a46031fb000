#include "bevlat/decoder.hpp"

#include "bevlat/error.hpp"

#include <bit>

namespace bevlat {

int DecoderConfig::upsample_steps() const {
  return std::countr_zero(static_cast<unsigned>(image_size / frustum.nu));
}

void DecoderConfig::validate() const {
  bev.validate();
  frustum.validate();
  require(frustum.nu == frustum.nv, "decoder config: ray grid must be square");
  require(image_size % frustum.nu == 0 && std::has_single_bit(static_cast<unsigned>(image_size / frustum.nu)),
          "decoder config: image_size / nu must be a power of two");
  require(state_patch >= 1 && bev.nx % state_patch == 0 && bev.ny % state_patch == 0 && bev.nx == bev.ny,
          "decoder config: BEV size must be square and divisible by state_patch");
  require(fpn_levels >= 1, "decoder config: need at least one pyramid level");
  require(channels % attn_heads == 0 && width % heads == 0 && head_width % heads == 0,
          "decoder config: widths must divide into heads");
}

DecoderConfig DecoderConfig::matching(const EncoderConfig& enc, const FrustumConfig& frustum, int head_width) {
  DecoderConfig d;
  d.image_size = enc.image_size;
  d.channels = enc.channels;
  d.fpn_levels = enc.fpn_levels;
  d.bev = enc.bev;
  d.state_patch = enc.state_patch;
  d.latent_dim = enc.latent_dim;
  d.width = enc.width;
  d.heads = enc.heads;
  d.blocks = enc.blocks;
  d.attn_heads = enc.attn_heads;
  d.attn_points = enc.attn_points;
  d.frustum = frustum;
  d.head_width = head_width;
  return d;
}

// ---------------------------------------------------------------------------

StateDecoderImpl::StateDecoderImpl(const DecoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int s = cfg_.latent_size();
  const int p = cfg_.state_patch;
  embed_ = register_module("embed", torch::nn::Linear(cfg_.latent_dim, cfg_.width));
  pos_embed_ = register_parameter("pos_embed", torch::randn({1, s * s, cfg_.width}) * 0.02);
  transformer_ = register_module("transformer", Transformer(cfg_.width, cfg_.heads, cfg_.blocks));
  unpatch_ = register_module("unpatch", torch::nn::Linear(cfg_.width, p * p * cfg_.bev.nz * cfg_.channels));
  downs_ = register_module("downs", torch::nn::ModuleList());
  for (int l = 1; l < cfg_.fpn_levels; ++l) {
    downs_->push_back(torch::nn::Conv3d(
        torch::nn::Conv3dOptions(cfg_.channels, cfg_.channels, 3).stride(2).padding(1)));
  }
}

MultiScaleFeatures StateDecoderImpl::forward(const torch::Tensor& z) {
  const auto& bev = cfg_.bev;
  const int64_t s = cfg_.latent_size(), p = cfg_.state_patch, c = cfg_.channels;
  require(z.dim() == 3 && z.size(0) == s && z.size(1) == s && z.size(2) == cfg_.latent_dim,
          "decode_state: expected [S, S, D]");
  auto tokens = transformer_->forward(embed_->forward(z.reshape({1, s * s, cfg_.latent_dim})) + pos_embed_);
  // Each token expands to its p x p BEV patch; channels split back into heights.
  auto x = unpatch_->forward(tokens).view({s, s, p, p, bev.nz * c}).permute({0, 2, 1, 3, 4});
  x = x.reshape({bev.ny, bev.nx, bev.nz, c}).permute({3, 2, 0, 1}).unsqueeze(0);  // [1, C, nz, ny, nx]
  MultiScaleFeatures out;
  out.levels.push_back(x);
  for (auto& down : *downs_) {
    x = torch::gelu(down->as<torch::nn::Conv3d>()->forward(x));
    out.levels.push_back(x);
  }
  return out;
}

// ---------------------------------------------------------------------------

FrustumReferences frustum_references(const FrustumConfig& frustum, const BevGridConfig& bev, const CameraRig& rig) {
  std::vector<torch::Tensor> coords, in_range;
  for (const auto& view : rig.views) {
    auto pts = make_frustum_grid(frustum, view.intrinsics);
    auto ego = frustum_to_ego(pts, view.extrinsics, bev);
    coords.push_back(normalize_to_bev(ego.points, bev));
    in_range.push_back(ego.in_range);
  }
  return {torch::stack(coords), torch::stack(in_range)};
}

SceneDecoderImpl::SceneDecoderImpl(const DecoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto& fr = cfg_.frustum;
  attention = register_module("attention", DeformableAttention(DeformableAttentionOptions{
                                                   cfg_.channels, cfg_.attn_heads, cfg_.attn_points, cfg_.fpn_levels, 3}));
  ray_query_ = register_parameter("ray_query", torch::randn({fr.rays(), cfg_.channels}));
  auto depths = torch::empty({fr.nd}, torch::kFloat64);
  for (int k = 0; k < fr.nd; ++k) depths[k] = fr.depth_at(k);
  depth_code_ = register_buffer("depth_code", sinusoidal_encoding(depths, cfg_.channels).to(torch::kFloat32));
  depth_norm_ = register_module("depth_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg_.channels})));
  depth_head_ = register_module("depth_head", torch::nn::Linear(cfg_.channels, 1));
}

torch::Tensor SceneDecoderImpl::queries() const {
  const auto& fr = cfg_.frustum;
  return ray_query_.repeat({fr.nd, 1}) + depth_code_.repeat_interleave(fr.rays(), 0);
}

ProjectedViewFeatures SceneDecoderImpl::forward(const MultiScaleFeatures& scene, const CameraRig& rig) {
  const auto& fr = cfg_.frustum;
  const int64_t v = rig.size(), r = fr.rays(), nd = fr.nd, c = cfg_.channels;
  const auto dtype = ray_query_.scalar_type();
  auto refs = frustum_references(fr, cfg_.bev, rig);
  std::vector<torch::Tensor> values;
  for (const auto& level : scene.levels) {
    require(level.dim() == 5 && level.size(0) == 1, "decode_scene: expected scene levels [1, C, d, h, w]");
    values.push_back(level.expand({v, -1, -1, -1, -1}));
  }
  auto q = queries();
  auto sampled = attention->forward(q, refs.coords.to(dtype), values);  // [V, nd * R, C]
  // Depth weights come from each query after its attention update, so they
  // can follow the scene content along the ray.
  auto logits = depth_head_->forward(depth_norm_->forward(q + sampled)).view({v, nd, r});
  auto weights = torch::softmax(logits, 1);
  auto per_depth = sampled.view({v, nd, r, c}).permute({1, 0, 2, 3}).reshape({nd, v * r, c});
  auto w = weights.permute({1, 0, 2}).reshape({nd, v * r});
  auto mask = refs.in_range.view({v, nd, r}).permute({1, 0, 2}).reshape({nd, v * r});
  return aggregate_depth(per_depth, w, mask, cfg_.renormalize_depth).view({v, r, c});
}

// ---------------------------------------------------------------------------

ImageDecoderImpl::ImageDecoderImpl(const DecoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int r = cfg_.frustum.rays();
  lift_ = register_module("lift", torch::nn::Linear(cfg_.channels, cfg_.head_width));
  pos_embed_ = register_parameter("pos_embed", torch::randn({1, r, cfg_.head_width}) * 0.02);
  transformer_ = register_module("transformer", Transformer(cfg_.head_width, cfg_.heads, cfg_.blocks));
  ups_ = register_module("ups", torch::nn::ModuleList());
  int ch = cfg_.head_width;
  for (int i = 0; i < cfg_.upsample_steps(); ++i) {
    const int next = std::max(ch / 2, 32);
    ups_->push_back(torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(ch, next, 4).stride(2).padding(1)));
    ch = next;
  }
  head_ = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, 3, 3).padding(1)));
}

torch::Tensor ImageDecoderImpl::forward(const ProjectedViewFeatures& proj) {
  const auto& fr = cfg_.frustum;
  require(proj.dim() == 3 && proj.size(1) == fr.rays() && proj.size(2) == cfg_.channels,
          "decode_images: expected [V, nu * nv, C]");
  const auto v = proj.size(0);
  auto tokens = transformer_->forward(lift_->forward(proj) + pos_embed_);
  auto x = tokens.transpose(1, 2).reshape({v, cfg_.head_width, fr.nv, fr.nu});
  for (auto& up : *ups_) x = torch::gelu(up->as<torch::nn::ConvTranspose2d>()->forward(x));
  return torch::sigmoid(head_->forward(x)).permute({0, 2, 3, 1});
}

// ---------------------------------------------------------------------------

DecoderImpl::DecoderImpl(const DecoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  state = register_module("state", StateDecoder(cfg_));
  scene = register_module("scene", SceneDecoder(cfg_));
  image = register_module("image", ImageDecoder(cfg_));
}

MultiScaleFeatures DecoderImpl::decode_state(const torch::Tensor& z) { return state->forward(z); }

ProjectedViewFeatures DecoderImpl::decode_scene(const MultiScaleFeatures& scene_features, const CameraRig& rig) {
  return scene->forward(scene_features, rig);
}

torch::Tensor DecoderImpl::decode_images(const ProjectedViewFeatures& proj) { return image->forward(proj); }

torch::Tensor DecoderImpl::forward(const torch::Tensor& z, const CameraRig& rig) {
  return decode_images(decode_scene(decode_state(z), rig));
}

}  // namespace bevlat
