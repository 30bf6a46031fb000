#include "bevlat/encoder.hpp"

#include "bevlat/error.hpp"

#include <ATen/CPUGeneratorImpl.h>

namespace bevlat {

void EncoderConfig::validate() const {
  bev.validate();
  require(patch >= 1 && image_size % patch == 0, "encoder config: image_size must be divisible by patch");
  require(fpn_levels >= 1 && (patch >> (fpn_levels - 1)) >= 1 && patch % (1 << (fpn_levels - 1)) == 0,
          "encoder config: each pyramid level must double the token grid");
  require(state_patch >= 1 && bev.nx % state_patch == 0 && bev.ny % state_patch == 0,
          "encoder config: BEV size must be divisible by state_patch");
  require(bev.nx == bev.ny, "encoder config: BEV grid must be square");
  require(channels % attn_heads == 0, "encoder config: channels must divide into attention heads");
  require(width % heads == 0, "encoder config: width must divide into heads");
  require(latent_dim >= 1 && logvar_min < logvar_max, "encoder config: invalid latent settings");
}

at::Generator make_generator(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

// ---------------------------------------------------------------------------

ImageEncoderImpl::ImageEncoderImpl(const EncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int g = cfg_.token_grid();
  patch_embed_ = register_module(
      "patch_embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, cfg_.width, cfg_.patch).stride(cfg_.patch)));
  pos_embed_ = register_parameter("pos_embed", torch::randn({1, g * g, cfg_.width}) * 0.02);
  transformer_ = register_module("transformer", Transformer(cfg_.width, cfg_.heads, cfg_.blocks));
  to_level0_ = register_module("to_level0", torch::nn::Linear(cfg_.width, cfg_.channels));
  ups_ = register_module("ups", torch::nn::ModuleList());
  laterals_ = register_module("laterals", torch::nn::ModuleList());
  for (int l = 1; l < cfg_.fpn_levels; ++l) {
    ups_->push_back(torch::nn::ConvTranspose2d(
        torch::nn::ConvTranspose2dOptions(cfg_.channels, cfg_.channels, 2).stride(2)));
    const int stride = cfg_.patch >> l;
    laterals_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(3, cfg_.channels, stride).stride(stride)));
  }
}

MultiScaleFeatures ImageEncoderImpl::forward(const torch::Tensor& images) {
  require(images.dim() == 4 && images.size(1) == cfg_.image_size && images.size(2) == cfg_.image_size &&
              images.size(3) == 3,
          "encode_images: expected [V, " + std::to_string(cfg_.image_size) + ", " +
              std::to_string(cfg_.image_size) + ", 3]");
  const auto v = images.size(0);
  const int g = cfg_.token_grid();
  auto x = images.permute({0, 3, 1, 2}) * 2.0 - 1.0;
  auto tokens = patch_embed_->forward(x).flatten(2).transpose(1, 2) + pos_embed_;
  tokens = transformer_->forward(tokens);
  auto level = to_level0_->forward(tokens).transpose(1, 2).reshape({v, cfg_.channels, g, g});
  MultiScaleFeatures out;
  out.levels.push_back(level);
  for (size_t l = 0; l < ups_->size(); ++l) {
    auto up = ups_[l]->as<torch::nn::ConvTranspose2d>()->forward(level);
    level = torch::gelu(up) + laterals_[l]->as<torch::nn::Conv2d>()->forward(x);
    out.levels.push_back(level);
  }
  return out;
}

// ---------------------------------------------------------------------------

ViewProjections project_to_views(const ReferencePoints& points, const CameraRig& rig) {
  std::vector<torch::Tensor> uv, hit;
  for (const auto& view : rig.views) {
    auto p = project_ego_to_image(points, view.intrinsics, view.extrinsics);
    uv.push_back(p.uv);
    hit.push_back(p.hit);
  }
  return {torch::stack(uv), torch::stack(hit)};
}

SceneEncoderImpl::SceneEncoderImpl(const EncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto& bev = cfg_.bev;
  pillars_ = make_pillar_grid(bev);
  attention = register_module("attention", DeformableAttention(DeformableAttentionOptions{
                                                   cfg_.channels, cfg_.attn_heads, cfg_.attn_points, cfg_.fpn_levels, 2}));
  pillar_query_ = register_parameter("pillar_query", torch::randn({bev.ny * bev.nx, cfg_.channels}));
  auto heights = torch::arange(bev.nz, torch::kFloat64) * bev.cell_z() + bev.z.low + 0.5 * bev.cell_z();
  height_code_ = register_buffer("height_code", sinusoidal_encoding(heights, cfg_.channels).to(torch::kFloat32));
}

torch::Tensor SceneEncoderImpl::queries() const {
  const auto& bev = cfg_.bev;
  return pillar_query_.repeat({bev.nz, 1}) + height_code_.repeat_interleave(bev.ny * bev.nx, 0);
}

torch::Tensor SceneEncoderImpl::forward(const MultiScaleFeatures& image_features, const CameraRig& rig) {
  require(!image_features.levels.empty() && image_features.levels[0].size(0) == rig.size(),
          "encode_scene: rig view count differs from feature view count");
  const auto dtype = pillar_query_.scalar_type();
  auto proj = project_to_views(pillars_, rig);
  auto per_view = attention->forward(queries(), proj.uv.to(dtype), image_features.levels);
  return aggregate_views(per_view, proj.hit);
}

// ---------------------------------------------------------------------------

StateEncoderImpl::StateEncoderImpl(const EncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int p = cfg_.state_patch;
  const int s = cfg_.latent_size();
  embed_ = register_module("embed", torch::nn::Linear(p * p * cfg_.bev.nz * cfg_.channels, cfg_.width));
  pos_embed_ = register_parameter("pos_embed", torch::randn({1, s * s, cfg_.width}) * 0.02);
  transformer_ = register_module("transformer", Transformer(cfg_.width, cfg_.heads, cfg_.blocks));
  mean_head_ = register_module("mean_head", torch::nn::Linear(cfg_.width, cfg_.latent_dim));
  logvar_head_ = register_module("logvar_head", torch::nn::Linear(cfg_.width, cfg_.latent_dim));
}

std::pair<torch::Tensor, torch::Tensor> StateEncoderImpl::forward(const torch::Tensor& scene) {
  const auto& bev = cfg_.bev;
  const int64_t c = cfg_.channels, p = cfg_.state_patch, s = cfg_.latent_size();
  require(scene.dim() == 2 && scene.size(0) == bev.cells() && scene.size(1) == c,
          "encode_state: expected [nz * ny * nx, C]");
  // [nz, ny, nx, C] -> [ny, nx, nz * C] (height-major channels) -> S x S patches.
  auto x = scene.view({bev.nz, bev.ny, bev.nx, c}).permute({1, 2, 0, 3}).reshape({bev.ny, bev.nx, bev.nz * c});
  x = x.view({s, p, s, p, bev.nz * c}).permute({0, 2, 1, 3, 4}).reshape({1, s * s, p * p * bev.nz * c});
  auto tokens = transformer_->forward(embed_->forward(x) + pos_embed_);
  auto mean = mean_head_->forward(tokens).view({s, s, cfg_.latent_dim});
  auto logvar = logvar_head_->forward(tokens).view({s, s, cfg_.latent_dim}).clamp(cfg_.logvar_min, cfg_.logvar_max);
  return {mean, logvar};
}

// ---------------------------------------------------------------------------

EncoderImpl::EncoderImpl(const EncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  image = register_module("image", ImageEncoder(cfg_));
  scene = register_module("scene", SceneEncoder(cfg_));
  state = register_module("state", StateEncoder(cfg_));
}

MultiScaleFeatures EncoderImpl::encode_images(const torch::Tensor& images) { return image->forward(images); }

torch::Tensor EncoderImpl::encode_scene(const MultiScaleFeatures& features, const CameraRig& rig) {
  return scene->forward(features, rig);
}

std::pair<torch::Tensor, torch::Tensor> EncoderImpl::encode_state(const torch::Tensor& scene_features) {
  return state->forward(scene_features);
}

LatentState EncoderImpl::forward(const torch::Tensor& images, const CameraRig& rig, std::optional<at::Generator> noise) {
  auto [mean, logvar] = encode_state(encode_scene(encode_images(images), rig));
  auto sample = noise ? reparameterize(mean, logvar, *noise) : mean;
  return {mean, logvar, sample};
}

torch::Tensor reparameterize(const torch::Tensor& mean, const torch::Tensor& logvar, at::Generator generator) {
  auto eps = torch::randn(mean.sizes(), generator, mean.options().requires_grad(false));
  return mean + torch::exp(0.5 * logvar) * eps;
}

torch::Tensor reparameterize(const torch::Tensor& mean, const torch::Tensor& logvar, uint64_t noise_seed) {
  return reparameterize(mean, logvar, make_generator(noise_seed));
}

}  // namespace bevlat
