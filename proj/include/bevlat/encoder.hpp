#pragma once

// Multi-view images -> BEV Gaussian posterior.
//
//   image encoder: patch transformer + upsampling-only pyramid, per view
//   scene encoder: one learned query per pillar, heights told apart by a
//                  sinusoidal encoding; deformable attention at the projected
//                  reference points, averaged over the views that see them
//   state encoder: heights folded into channels, BEV patches -> tokens,
//                  transformer, mean / logvar heads

#include "bevlat/defattn.hpp"
#include "bevlat/geometry.hpp"
#include "bevlat/nn.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <vector>

namespace bevlat {

/// Per-level feature maps in the order the pyramid builds them: image levels
/// grow (coarsest first, [N, C, h, w]), scene levels shrink (finest first,
/// [N, C, d, h, w]).
struct MultiScaleFeatures {
  std::vector<torch::Tensor> levels;

  size_t size() const { return levels.size(); }
  /// Level `l` flattened to [N, L_l, C].
  torch::Tensor flattened(size_t l) const { return levels.at(l).flatten(2).transpose(1, 2); }
};

struct EncoderConfig {
  int image_size = 64;
  int patch = 8;
  int channels = 32;
  int fpn_levels = 3;
  BevGridConfig bev;
  int state_patch = 4;
  int latent_dim = 8;
  int width = 64;   ///< transformer width
  int heads = 4;
  int blocks = 4;
  int attn_heads = 4;
  int attn_points = 4;
  double logvar_min = -30.0;
  double logvar_max = 20.0;

  int token_grid() const { return image_size / patch; }
  int latent_size() const { return bev.nx / state_patch; }
  void validate() const;
};

struct LatentState {
  torch::Tensor mean;    ///< [S, S, D]
  torch::Tensor logvar;  ///< [S, S, D]
  torch::Tensor sample;  ///< [S, S, D]
};

class ImageEncoderImpl : public torch::nn::Module {
 public:
  explicit ImageEncoderImpl(const EncoderConfig& cfg);
  /// images: [V, H, W, 3] in [0,1].
  MultiScaleFeatures forward(const torch::Tensor& images);

 private:
  EncoderConfig cfg_;
  torch::nn::Conv2d patch_embed_{nullptr};
  torch::Tensor pos_embed_;
  Transformer transformer_{nullptr};
  torch::nn::Linear to_level0_{nullptr};
  torch::nn::ModuleList ups_, laterals_;
};
TORCH_MODULE(ImageEncoder);

/// Per-view projection of reference points: uv [V, L, 2], hit [V, L].
struct ViewProjections {
  torch::Tensor uv;
  torch::Tensor hit;
};

ViewProjections project_to_views(const ReferencePoints& points, const CameraRig& rig);

class SceneEncoderImpl : public torch::nn::Module {
 public:
  explicit SceneEncoderImpl(const EncoderConfig& cfg);
  /// Returns [nz * ny * nx, C], pillar-grid order.
  torch::Tensor forward(const MultiScaleFeatures& image_features, const CameraRig& rig);
  /// Learned pillar query plus height encoding, [nz * ny * nx, C].
  torch::Tensor queries() const;

  DeformableAttention attention{nullptr};

 private:
  EncoderConfig cfg_;
  ReferencePoints pillars_;
  torch::Tensor pillar_query_;
  torch::Tensor height_code_;
};
TORCH_MODULE(SceneEncoder);

class StateEncoderImpl : public torch::nn::Module {
 public:
  explicit StateEncoderImpl(const EncoderConfig& cfg);
  /// scene: [nz * ny * nx, C] -> (mean, logvar) each [S, S, D]; logvar clamped.
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& scene);

 private:
  EncoderConfig cfg_;
  torch::nn::Linear embed_{nullptr};
  torch::Tensor pos_embed_;
  Transformer transformer_{nullptr};
  torch::nn::Linear mean_head_{nullptr}, logvar_head_{nullptr};
};
TORCH_MODULE(StateEncoder);

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const EncoderConfig& cfg);

  MultiScaleFeatures encode_images(const torch::Tensor& images);
  torch::Tensor encode_scene(const MultiScaleFeatures& features, const CameraRig& rig);
  std::pair<torch::Tensor, torch::Tensor> encode_state(const torch::Tensor& scene);

  /// Full posterior; `sample` equals `mean` unless a generator is given.
  LatentState forward(const torch::Tensor& images, const CameraRig& rig,
                      std::optional<at::Generator> noise = std::nullopt);

  const EncoderConfig& config() const { return cfg_; }

  ImageEncoder image{nullptr};
  SceneEncoder scene{nullptr};
  StateEncoder state{nullptr};

 private:
  EncoderConfig cfg_;
};
TORCH_MODULE(Encoder);

/// sample = mean + exp(logvar / 2) * eps, eps ~ N(0, I) from `generator`.
torch::Tensor reparameterize(const torch::Tensor& mean, const torch::Tensor& logvar, at::Generator generator);
torch::Tensor reparameterize(const torch::Tensor& mean, const torch::Tensor& logvar, uint64_t noise_seed);

at::Generator make_generator(uint64_t seed);

}  // namespace bevlat
