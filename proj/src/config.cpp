#include "bevlat/config.hpp"

#include "bevlat/error.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <variant>

namespace bevlat {

double OptimConfig::lr_at(int step) const {
  if (warmup <= 0 || step >= warmup) return lr;
  return lr * (step + 1) / static_cast<double>(warmup);
}

namespace {

using Field = std::variant<int*, uint64_t*, double*, bool*, std::string*>;

std::map<std::string, Field> fields(RunConfig& c) {
  return {
      {"seed", &c.seed},
      {"threads", &c.threads},
      {"log_every", &c.log_every},
      {"data_seed", &c.data_seed},
      {"train_scenes", &c.train_scenes},
      {"heldout_seed", &c.heldout_seed},
      {"heldout_scenes", &c.heldout_scenes},
      {"views", &c.rig.views},
      {"image_size", &c.rig.image_size},
      {"hfov_deg", &c.rig.hfov_degrees},
      {"mount_height", &c.rig.mount_height},
      {"pitch_deg", &c.rig.pitch_degrees},
      {"min_boxes", &c.scenes.min_boxes},
      {"max_boxes", &c.scenes.max_boxes},
      {"class_count", &c.scenes.class_count},
      {"min_distance", &c.scenes.min_distance},
      {"max_distance", &c.scenes.max_distance},
      {"bev_nx", &c.bev.nx},
      {"bev_ny", &c.bev.ny},
      {"bev_nz", &c.bev.nz},
      {"bev_x_min", &c.bev.x.low},
      {"bev_x_max", &c.bev.x.high},
      {"bev_y_min", &c.bev.y.low},
      {"bev_y_max", &c.bev.y.high},
      {"bev_z_min", &c.bev.z.low},
      {"bev_z_max", &c.bev.z.high},
      {"frustum_nu", &c.frustum.nu},
      {"frustum_nv", &c.frustum.nv},
      {"frustum_nd", &c.frustum.nd},
      {"frustum_depth_min", &c.frustum.depth_min},
      {"frustum_depth_max", &c.frustum.depth_max},
      {"patch", &c.patch},
      {"channels", &c.channels},
      {"fpn_levels", &c.fpn_levels},
      {"state_patch", &c.state_patch},
      {"latent_dim", &c.latent_dim},
      {"width", &c.width},
      {"heads", &c.heads},
      {"blocks", &c.blocks},
      {"attn_heads", &c.attn_heads},
      {"attn_points", &c.attn_points},
      {"head_width", &c.head_width},
      {"renormalize_depth", &c.renormalize_depth},
      {"kl_beta", &c.loss.beta},
      {"adv_coeff", &c.loss.adv_coeff},
      {"lambda_delta", &c.loss.delta},
      {"lambda_max", &c.loss.lambda_max},
      {"perceptual", &c.perceptual},
      {"adversarial", &c.adversarial},
      {"l1_pixel", &c.l1_pixel},
      {"perceptual_seed", &c.perceptual_seed},
      {"disc_channels", &c.disc_channels},
      {"disc_start", &c.disc_start},
      {"s1_lr", &c.stage1.lr},
      {"s1_disc_lr", &c.s1_disc_lr},
      {"s1_beta1", &c.stage1.beta1},
      {"s1_beta2", &c.stage1.beta2},
      {"s1_weight_decay", &c.stage1.weight_decay},
      {"s1_warmup", &c.stage1.warmup},
      {"s1_steps", &c.stage1.steps},
      {"s1_ema_decay", &c.stage1.ema_decay},
      {"s1_batch", &c.stage1.batch},
      {"s1_ckpt_every", &c.stage1.ckpt_every},
      {"T", &c.T},
      {"dit_width", &c.dit_width},
      {"dit_depth", &c.dit_depth},
      {"dit_heads", &c.dit_heads},
      {"dit_time_dim", &c.dit_time_dim},
      {"p_drop", &c.p_drop},
      {"s2_lr", &c.stage2.lr},
      {"s2_beta1", &c.stage2.beta1},
      {"s2_beta2", &c.stage2.beta2},
      {"s2_weight_decay", &c.stage2.weight_decay},
      {"s2_warmup", &c.stage2.warmup},
      {"s2_steps", &c.stage2.steps},
      {"s2_ema_decay", &c.stage2.ema_decay},
      {"s2_batch", &c.stage2.batch},
      {"s2_ckpt_every", &c.stage2.ckpt_every},
      {"scale", &c.scale},
      {"sample_steps", &c.sample_steps},
      {"sampler", &c.sampler},
  };
}

}  // namespace

RunConfig RunConfig::from_json(const Json& j) {
  require(j.is_object(), "config: expected a flat JSON object");
  RunConfig c;
  auto table = fields(c);
  for (const auto& [key, value] : j.items()) {
    if (key == "frustum_spacing") {
      const auto s = value.get<std::string>();
      require(s == "linear" || s == "disparity", "config: frustum_spacing must be linear or disparity");
      c.frustum.spacing = s == "linear" ? DepthSpacing::Linear : DepthSpacing::Disparity;
      continue;
    }
    auto it = table.find(key);
    require(it != table.end(), "config: unknown key '" + key + "'");
    try {
      std::visit([&](auto* p) { *p = value.get<std::remove_pointer_t<decltype(p)>>(); }, it->second);
    } catch (const nlohmann::json::exception&) {
      throw Error("config: key '" + key + "' has the wrong type");
    }
  }
  c.scenes.bev = c.bev;
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "config: cannot open " + path.string());
  Json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

Json RunConfig::to_json() const {
  RunConfig copy = *this;
  Json j = Json::object();
  for (const auto& [key, field] : fields(copy)) {
    std::visit([&](auto* p) { j[key] = *p; }, field);
  }
  j["frustum_spacing"] = frustum.spacing == DepthSpacing::Linear ? "linear" : "disparity";
  return j;
}

std::string fnv1a_hex(const std::string& bytes) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string RunConfig::hash() const { return fnv1a_hex(to_json().dump()); }

void RunConfig::validate() const {
  require(threads >= 1, "config: threads must be >= 1");
  require(train_scenes >= 1 && heldout_scenes >= 0, "config: scene counts must be positive");
  require(rig.views >= 2, "config: need at least two views");
  scenes.validate();
  encoder().validate();
  decoder().validate();
  denoiser().validate();
  for (const auto* o : {&stage1, &stage2}) {
    require(o->lr > 0, "config: learning rate must be > 0");
    require(o->warmup >= 0 && o->warmup <= o->steps, "config: warmup must lie in [0, steps]");
    require(o->ema_decay >= 0 && o->ema_decay < 1, "config: ema_decay must lie in [0, 1)");
    require(o->batch >= 1 && o->ckpt_every >= 1, "config: batch and ckpt_every must be >= 1");
  }
  require(s1_disc_lr > 0, "config: s1_disc_lr must be > 0");
  require(loss.beta >= 0 && loss.delta > 0, "config: kl_beta >= 0 and lambda_delta > 0 required");
  require(T >= 1, "config: T must be >= 1");
  require(sample_steps >= 0 && sample_steps <= T, "config: sample_steps must lie in [0, T]");
  parse_sampler(sampler);
  require(rig.image_size % 16 == 0, "config: image_size must be divisible by 16");
}

EncoderConfig RunConfig::encoder() const {
  EncoderConfig e;
  e.image_size = rig.image_size;
  e.patch = patch;
  e.channels = channels;
  e.fpn_levels = fpn_levels;
  e.bev = bev;
  e.state_patch = state_patch;
  e.latent_dim = latent_dim;
  e.width = width;
  e.heads = heads;
  e.blocks = blocks;
  e.attn_heads = attn_heads;
  e.attn_points = attn_points;
  return e;
}

DecoderConfig RunConfig::decoder() const {
  auto d = DecoderConfig::matching(encoder(), frustum, head_width);
  d.renormalize_depth = renormalize_depth;
  return d;
}

DenoiserConfig RunConfig::denoiser() const {
  DenoiserConfig d;
  d.grid = bev.nx / state_patch;
  d.latent_dim = latent_dim;
  d.width = dit_width;
  d.depth = dit_depth;
  d.heads = dit_heads;
  d.time_dim = dit_time_dim;
  d.p_drop = p_drop;
  d.condition.class_count = scenes.class_count;
  d.condition.nz = bev.nz;
  d.condition.patch = state_patch;
  d.condition.channels_per_height = bev.nz > 0 ? dit_width / bev.nz : 0;
  return d;
}

ReconstructionOptions RunConfig::reconstruction() const { return {perceptual, l1_pixel}; }

SampleOptions RunConfig::sample_options(uint64_t sample_seed) const {
  SampleOptions o;
  o.scale = scale;
  o.steps = sample_steps;
  o.sampler = parse_sampler(sampler);
  o.seed = sample_seed;
  return o;
}

}  // namespace bevlat
