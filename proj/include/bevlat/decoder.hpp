#pragma once

// BEV latent -> multi-view images.
//
//   state decoder: transformer on the S x S latent tokens, per-token linear
//                  unpatching (a stride-p deconvolution) to the BEV plane,
//                  channels split back into heights, downsampling-only pyramid
//   scene decoder: one learned query per camera ray, depths told apart by a
//                  sinusoidal encoding; deformable attention into the scene
//                  volume at the frustum points, softmax depth weights with
//                  out-of-range depths dropped
//   image decoder: linear lift, transformer over the ray grid, deconvolutions
//                  up to the image size, sigmoid to [0,1]

#include "bevlat/defattn.hpp"
#include "bevlat/encoder.hpp"
#include "bevlat/geometry.hpp"
#include "bevlat/nn.hpp"

#include <torch/torch.h>

namespace bevlat {

struct DecoderConfig {
  int image_size = 64;
  int channels = 32;
  int fpn_levels = 3;
  BevGridConfig bev;
  int state_patch = 4;
  int latent_dim = 8;
  int width = 64;
  int heads = 4;
  int blocks = 4;
  int attn_heads = 4;
  int attn_points = 4;
  FrustumConfig frustum;
  int head_width = 64;  ///< image decoder transformer width
  bool renormalize_depth = true;

  int latent_size() const { return bev.nx / state_patch; }
  int upsample_steps() const;
  void validate() const;
  /// A decoder whose shapes mirror `enc`.
  static DecoderConfig matching(const EncoderConfig& enc, const FrustumConfig& frustum = {}, int head_width = 64);
};

/// Depth-aggregated features per view: [V, nu * nv, C], ray order iv * nu + iu.
using ProjectedViewFeatures = torch::Tensor;

class StateDecoderImpl : public torch::nn::Module {
 public:
  explicit StateDecoderImpl(const DecoderConfig& cfg);
  /// z: [S, S, D] -> levels [1, C, nz_l, ny_l, nx_l], finest first.
  MultiScaleFeatures forward(const torch::Tensor& z);

 private:
  DecoderConfig cfg_;
  torch::nn::Linear embed_{nullptr};
  torch::Tensor pos_embed_;
  Transformer transformer_{nullptr};
  torch::nn::Linear unpatch_{nullptr};
  torch::nn::ModuleList downs_;
};
TORCH_MODULE(StateDecoder);

/// Frustum reference points of every view in normalized BEV coordinates
/// [V, nd * R, 3] and their in-range mask [V, nd * R].
struct FrustumReferences {
  torch::Tensor coords;
  torch::Tensor in_range;
};

FrustumReferences frustum_references(const FrustumConfig& frustum, const BevGridConfig& bev, const CameraRig& rig);

class SceneDecoderImpl : public torch::nn::Module {
 public:
  explicit SceneDecoderImpl(const DecoderConfig& cfg);
  ProjectedViewFeatures forward(const MultiScaleFeatures& scene, const CameraRig& rig);
  /// Learned ray query plus depth encoding, [nd * R, C], frustum-grid order.
  torch::Tensor queries() const;

  DeformableAttention attention{nullptr};

 private:
  DecoderConfig cfg_;
  torch::Tensor ray_query_;
  torch::Tensor depth_code_;
  torch::nn::LayerNorm depth_norm_{nullptr};
  torch::nn::Linear depth_head_{nullptr};
};
TORCH_MODULE(SceneDecoder);

class ImageDecoderImpl : public torch::nn::Module {
 public:
  explicit ImageDecoderImpl(const DecoderConfig& cfg);
  /// proj: [V, R, C] -> images [V, H, W, 3] in [0,1].
  torch::Tensor forward(const ProjectedViewFeatures& proj);
  /// Weight of the final convolution (the "last layer" for adaptive weighting).
  torch::Tensor& last_layer_weight() { return head_->weight; }

 private:
  DecoderConfig cfg_;
  torch::nn::Linear lift_{nullptr};
  torch::Tensor pos_embed_;
  Transformer transformer_{nullptr};
  torch::nn::ModuleList ups_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(ImageDecoder);

class DecoderImpl : public torch::nn::Module {
 public:
  explicit DecoderImpl(const DecoderConfig& cfg);

  MultiScaleFeatures decode_state(const torch::Tensor& z);
  ProjectedViewFeatures decode_scene(const MultiScaleFeatures& scene, const CameraRig& rig);
  torch::Tensor decode_images(const ProjectedViewFeatures& proj);

  /// z: [S, S, D] -> images [V, H, W, 3].
  torch::Tensor forward(const torch::Tensor& z, const CameraRig& rig);
  torch::Tensor& last_layer_weight() { return image->last_layer_weight(); }
  const DecoderConfig& config() const { return cfg_; }

  StateDecoder state{nullptr};
  SceneDecoder scene{nullptr};
  ImageDecoder image{nullptr};

 private:
  DecoderConfig cfg_;
};
TORCH_MODULE(Decoder);

}  // namespace bevlat
