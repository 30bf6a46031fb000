#pragma once

// Flat JSON run configuration. Every key is optional; unknown keys are
// rejected so typos do not silently fall back to defaults.
//
//   data:      data_seed, train_scenes, heldout_seed, heldout_scenes,
//              views, image_size, hfov_deg, mount_height, pitch_deg,
//              min_boxes, max_boxes, class_count, min_distance, max_distance
//   grid:      bev_nx, bev_ny, bev_nz, bev_x_min, bev_x_max, bev_y_min,
//              bev_y_max, bev_z_min, bev_z_max, frustum_nu, frustum_nv,
//              frustum_nd, frustum_depth_min, frustum_depth_max, frustum_spacing
//   vae:       patch, channels, fpn_levels, state_patch, latent_dim, width,
//              heads, blocks, attn_heads, attn_points, head_width,
//              renormalize_depth
//   loss:      kl_beta, adv_coeff, lambda_delta, lambda_max, perceptual,
//              adversarial, l1_pixel, perceptual_seed, disc_channels, disc_start
//   stage 1:   s1_lr, s1_disc_lr, s1_beta1, s1_beta2, s1_weight_decay,
//              s1_warmup, s1_steps, s1_ema_decay, s1_batch, s1_ckpt_every
//   diffusion: T, dit_width, dit_depth, dit_heads, dit_time_dim, p_drop
//   stage 2:   s2_lr, s2_beta1, s2_beta2, s2_weight_decay, s2_warmup,
//              s2_steps, s2_ema_decay, s2_batch, s2_ckpt_every
//   sampling:  scale, sample_steps, sampler
//   misc:      seed, threads, log_every

#include "bevlat/decoder.hpp"
#include "bevlat/diffusion.hpp"
#include "bevlat/encoder.hpp"
#include "bevlat/geometry.hpp"
#include "bevlat/losses.hpp"
#include "bevlat/scenegen.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

namespace bevlat {

using Json = nlohmann::json;

struct OptimConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 1e-4;
  int warmup = 100;
  int steps = 5000;
  double ema_decay = 0.999;
  int batch = 1;
  int ckpt_every = 1000;

  /// Linear warmup to lr, constant afterwards.
  double lr_at(int step) const;
};

struct RunConfig {
  uint64_t seed = 0;
  int threads = 1;
  int log_every = 100;

  uint64_t data_seed = 100;
  int train_scenes = 16;
  uint64_t heldout_seed = 1000100;
  int heldout_scenes = 8;
  SurroundRigConfig rig;
  SceneGenConfig scenes;

  BevGridConfig bev;
  FrustumConfig frustum;

  int patch = 8;
  int channels = 32;
  int fpn_levels = 3;
  int state_patch = 4;
  int latent_dim = 8;
  int width = 64;
  int heads = 4;
  int blocks = 4;
  int attn_heads = 4;
  int attn_points = 4;
  int head_width = 64;
  bool renormalize_depth = true;

  LossWeights loss;
  bool perceptual = true;
  bool adversarial = true;
  bool l1_pixel = false;
  uint64_t perceptual_seed = 1234;
  int disc_channels = 32;
  int disc_start = 0;
  double s1_disc_lr = 3e-4;
  OptimConfig stage1{3e-4, 0.9, 0.99, 1e-4, 100, 5000, 0.999, 1, 1000};

  int T = 100;
  int dit_width = 128;
  int dit_depth = 4;
  int dit_heads = 4;
  int dit_time_dim = 128;
  double p_drop = 0.1;
  OptimConfig stage2{1e-4, 0.9, 0.95, 0.1, 100, 5000, 0.999, 16, 1000};

  double scale = 2.0;
  int sample_steps = 0;  ///< 0 -> T
  std::string sampler = "ddim";

  static RunConfig from_json(const Json& j);
  static RunConfig load(const std::filesystem::path& path);
  Json to_json() const;
  /// FNV-1a over the canonical JSON dump, 16 hex digits.
  std::string hash() const;
  void validate() const;

  EncoderConfig encoder() const;
  DecoderConfig decoder() const;
  DenoiserConfig denoiser() const;
  ReconstructionOptions reconstruction() const;
  SampleOptions sample_options(uint64_t sample_seed) const;
};

std::string fnv1a_hex(const std::string& bytes);

}  // namespace bevlat
