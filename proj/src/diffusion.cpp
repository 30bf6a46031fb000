#include "bevlat/diffusion.hpp"

#include "bevlat/error.hpp"

#include <algorithm>
#include <cmath>

namespace bevlat {

double DiffusionSchedule::alpha_bar_at(int t) const {
  require(t >= 0 && t <= T, "schedule: t=" + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  return t == 0 ? 1.0 : alpha_bar[t - 1];
}

double DiffusionSchedule::posterior_sigma(int t, int t_prev) const {
  require(t_prev >= 0 && t_prev < t, "schedule: need 0 <= t_prev < t");
  const double ab_t = alpha_bar_at(t), ab_p = alpha_bar_at(t_prev);
  const double beta_step = 1.0 - ab_t / ab_p;
  return std::sqrt(std::max(0.0, (1.0 - ab_p) / (1.0 - ab_t) * beta_step));
}

DiffusionSchedule make_schedule(int T, ScheduleKind kind) {
  require(T >= 1, "make_schedule: T must be >= 1");
  require(kind == ScheduleKind::Linear, "make_schedule: unknown schedule kind");
  const double scale = 1000.0 / T;
  const double b0 = 1e-4 * scale, b1 = std::min(0.02 * scale, 0.999);
  DiffusionSchedule s;
  s.T = T;
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double b = T == 1 ? b0 : b0 + (b1 - b0) * i / (T - 1);
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  for (int t = 1; t <= T; ++t) s.sigma.push_back(s.posterior_sigma(t, t - 1));
  return s;
}

torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps, const DiffusionSchedule& schedule) {
  require(t >= 1 && t <= schedule.T, "q_sample: t out of range");
  require(x0.sizes() == eps.sizes(), "q_sample: x0 and eps shapes differ");
  const double ab = schedule.alpha_bar_at(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const DiffusionSchedule& schedule) {
  require(x0.sizes() == eps.sizes(), "q_sample: x0 and eps shapes differ");
  require(t.dim() == 1 && t.size(0) == x0.size(0), "q_sample: t must be [B]");
  const auto tmin = t.min().item<int64_t>(), tmax = t.max().item<int64_t>();
  require(tmin >= 1 && tmax <= schedule.T, "q_sample: t out of range");
  auto table = torch::tensor(schedule.alpha_bar, torch::kFloat64);
  auto ab = table.index_select(0, t.to(torch::kInt64) - 1);
  std::vector<int64_t> shape(x0.dim(), 1);
  shape[0] = x0.size(0);
  auto signal = ab.sqrt().to(x0.scalar_type()).view(shape), noise = (1.0 - ab).sqrt().to(x0.scalar_type()).view(shape);
  return signal * x0 + noise * eps;
}

// ---------------------------------------------------------------------------

LatentStats LatentStats::from_latents(const torch::Tensor& latents) {
  require(latents.dim() >= 1 && latents.numel() > 0, "latent stats: empty latents");
  auto flat = latents.detach().to(torch::kFloat64).reshape({-1, latents.size(-1)});
  LatentStats s;
  s.mean = flat.mean(0);
  s.std = (flat - s.mean).square().mean(0).sqrt().clamp_min(kStdFloor);
  return s;
}

torch::Tensor LatentStats::normalize(const torch::Tensor& z) const {
  require(defined(), "latent stats: not estimated");
  return (z - mean.to(z.scalar_type())) / std.to(z.scalar_type());
}

torch::Tensor LatentStats::denormalize(const torch::Tensor& z) const {
  require(defined(), "latent stats: not estimated");
  return z * std.to(z.scalar_type()) + mean.to(z.scalar_type());
}

Json LatentStats::to_json() const {
  auto to_vec = [](const torch::Tensor& t) {
    auto c = t.contiguous();
    return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
  };
  return {{"mean", to_vec(mean)}, {"std", to_vec(std)}};
}

LatentStats LatentStats::from_json(const Json& j) {
  LatentStats s;
  s.mean = torch::tensor(j.at("mean").get<std::vector<double>>(), torch::kFloat64);
  s.std = torch::tensor(j.at("std").get<std::vector<double>>(), torch::kFloat64);
  require(s.mean.numel() == s.std.numel(), "latent stats: mean and std lengths differ");
  require((s.std > 0).all().item<bool>(), "latent stats: std must be positive");
  return s;
}

void LatentStatsAccumulator::add(const torch::Tensor& latents) {
  auto flat = latents.detach().to(torch::kFloat64).reshape({-1, latents.size(-1)}).contiguous();
  const int64_t d = flat.size(1);
  if (mean_.empty()) {
    mean_.assign(d, 0.0);
    m2_.assign(d, 0.0);
  }
  require(static_cast<int64_t>(mean_.size()) == d, "latent stats: channel count changed");
  const double* p = flat.data_ptr<double>();
  for (int64_t r = 0; r < flat.size(0); ++r) {
    ++count_;
    for (int64_t c = 0; c < d; ++c) {
      const double x = p[r * d + c];
      const double delta = x - mean_[c];
      mean_[c] += delta / count_;
      m2_[c] += delta * (x - mean_[c]);
    }
  }
}

LatentStats LatentStatsAccumulator::finalize() const {
  require(count_ > 0, "latent stats: no samples");
  LatentStats s;
  s.mean = torch::tensor(mean_, torch::kFloat64);
  std::vector<double> sd(m2_.size());
  for (size_t c = 0; c < m2_.size(); ++c) sd[c] = std::max(std::sqrt(m2_[c] / count_), LatentStats::kStdFloor);
  s.std = torch::tensor(sd, torch::kFloat64);
  return s;
}

// ---------------------------------------------------------------------------

void DenoiserConfig::validate() const {
  require(grid >= 1 && latent_dim >= 1, "denoiser config: empty latent grid");
  require(width % heads == 0, "denoiser config: width must be divisible by heads");
  require(time_dim % 2 == 0, "denoiser config: time_dim must be even");
  require(p_drop >= 0 && p_drop <= 1, "denoiser config: p_drop must lie in [0, 1]");
  require(condition.nz * condition.channels_per_height == width,
          "denoiser config: condition channels (nz * channels_per_height) must equal width");
}

namespace {

torch::nn::LayerNorm plain_norm(int width) {
  return torch::nn::LayerNorm(torch::nn::LayerNormOptions({width}).elementwise_affine(false).eps(1e-6));
}

torch::Tensor modulate(const torch::Tensor& x, const torch::Tensor& shift, const torch::Tensor& scale) {
  return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1);
}

void zero_linear(torch::nn::Linear& l) {
  torch::NoGradGuard g;
  l->weight.zero_();
  if (l->bias.defined()) l->bias.zero_();
}

}  // namespace

DiTBlockImpl::DiTBlockImpl(int width, int heads) : width_(width) {
  norm1_ = register_module("norm1", plain_norm(width));
  norm2_ = register_module("norm2", plain_norm(width));
  attn_ = register_module("attn", SelfAttention(width, heads));
  fc1_ = register_module("fc1", torch::nn::Linear(width, 4 * width));
  fc2_ = register_module("fc2", torch::nn::Linear(4 * width, width));
  modulation_ = register_module("modulation", torch::nn::Linear(width, 6 * width));
  zero_linear(modulation_);
}

torch::Tensor DiTBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& c) {
  auto m = modulation_->forward(torch::silu(c)).chunk(6, 1);
  auto h = x + m[2].unsqueeze(1) * attn_->forward(modulate(norm1_->forward(x), m[0], m[1]));
  auto mlp = fc2_->forward(torch::gelu(fc1_->forward(modulate(norm2_->forward(h), m[3], m[4]))));
  return h + m[5].unsqueeze(1) * mlp;
}

DiTImpl::DiTImpl(const DenoiserConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int w = cfg_.width;
  condition = register_module("condition", OccupancyEmbedding(cfg_.condition));
  null_embedding = register_parameter("null_embedding", torch::zeros({w}));
  x_embed_ = register_module("x_embed", torch::nn::Linear(cfg_.latent_dim, w));
  pos_embed_ = register_parameter("pos_embed", torch::randn({1, cfg_.grid * cfg_.grid, w}) * 0.02);
  t_fc1_ = register_module("t_fc1", torch::nn::Linear(cfg_.time_dim, w));
  t_fc2_ = register_module("t_fc2", torch::nn::Linear(w, w));
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < cfg_.depth; ++i) blocks_->push_back(DiTBlock(w, cfg_.heads));
  final_norm_ = register_module("final_norm", plain_norm(w));
  final_modulation_ = register_module("final_modulation", torch::nn::Linear(w, 2 * w));
  out_ = register_module("out", torch::nn::Linear(w, cfg_.latent_dim));
  zero_linear(final_modulation_);
  zero_linear(out_);
}

torch::Tensor DiTImpl::embed_condition(const torch::Tensor& grids) {
  require(grids.dim() == 5, "embed_condition: expected [B, C, nz, ny, nx]");
  auto tokens = condition->forward(grids.to(null_embedding.scalar_type()));
  require(tokens.size(1) == cfg_.grid * cfg_.grid, "embed_condition: occupancy grid does not match the latent grid");
  return tokens;
}

torch::Tensor DiTImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond,
                               const torch::Tensor& drop) {
  const int64_t s = cfg_.grid, d = cfg_.latent_dim, w = cfg_.width;
  require(x_t.dim() == 4 && x_t.size(1) == s && x_t.size(2) == s && x_t.size(3) == d, "denoise: expected [B, S, S, D]");
  const int64_t b = x_t.size(0);
  require(t.dim() == 1 && t.size(0) == b, "denoise: t must be [B]");

  auto tokens = x_embed_->forward(x_t.reshape({b, s * s, d})) + pos_embed_;
  auto null = null_embedding.view({1, 1, w});
  if (cond.defined()) {
    require(cond.dim() == 3 && cond.size(0) == b && cond.size(1) == s * s && cond.size(2) == w,
            "denoise: condition must be [B, S*S, width]");
    auto c = cond;
    if (drop.defined()) c = torch::where(drop.to(torch::kBool).view({b, 1, 1}), null.expand_as(cond), cond);
    tokens = tokens + c;
  } else {
    tokens = tokens + null;
  }

  auto temb = sinusoidal_encoding(t.to(torch::kFloat64), cfg_.time_dim, 10000.0).to(x_t.scalar_type());
  auto c = t_fc2_->forward(torch::silu(t_fc1_->forward(temb)));
  for (auto& blk : *blocks_) tokens = blk->as<DiTBlock>()->forward(tokens, c);
  auto m = final_modulation_->forward(torch::silu(c)).chunk(2, 1);
  auto out = out_->forward(modulate(final_norm_->forward(tokens), m[0], m[1]));
  return out.view({b, s, s, d});
}

// ---------------------------------------------------------------------------

torch::Tensor cfg_eps(const torch::Tensor& eps_uncond, const torch::Tensor& eps_cond, double s) {
  require(eps_uncond.sizes() == eps_cond.sizes(), "cfg_eps: shape mismatch");
  // Written as a convex-style blend so s = 0 and s = 1 return the inputs exactly.
  return (1.0 - s) * eps_uncond + s * eps_cond;
}

torch::Tensor guided_eps(DiT& dit, const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond,
                         double s) {
  if (!cond.defined() || s == 0.0) return dit->forward(x_t, t);
  if (s == 1.0) return dit->forward(x_t, t, cond);
  return cfg_eps(dit->forward(x_t, t), dit->forward(x_t, t, cond), s);
}

torch::Tensor ddpm_step(const torch::Tensor& x_t, int t, const torch::Tensor& eps_hat, const DiffusionSchedule& schedule,
                        const torch::Tensor& noise, std::optional<int> t_prev) {
  const int tp = t_prev.value_or(t - 1);
  require(t >= 1 && t <= schedule.T && tp >= 0 && tp < t, "ddpm_step: invalid step");
  const double ab_t = schedule.alpha_bar_at(t), ab_p = schedule.alpha_bar_at(tp);
  const double alpha_step = ab_t / ab_p;
  const double beta_step = 1.0 - alpha_step;
  auto mean = (x_t - beta_step / std::sqrt(1.0 - ab_t) * eps_hat) / std::sqrt(alpha_step);
  if (tp == 0) return mean;
  require(noise.defined() && noise.sizes() == x_t.sizes(), "ddpm_step: noise shape mismatch");
  return mean + schedule.posterior_sigma(t, tp) * noise;
}

torch::Tensor ddim_step(const torch::Tensor& x_t, int t, int t_prev, const torch::Tensor& eps_hat,
                        const DiffusionSchedule& schedule) {
  require(t >= 1 && t <= schedule.T && t_prev >= 0 && t_prev < t, "ddim_step: invalid step");
  const double ab_t = schedule.alpha_bar_at(t), ab_p = schedule.alpha_bar_at(t_prev);
  auto x0 = (x_t - std::sqrt(1.0 - ab_t) * eps_hat) / std::sqrt(ab_t);
  return std::sqrt(ab_p) * x0 + std::sqrt(1.0 - ab_p) * eps_hat;
}

std::vector<int> sampling_timesteps(int T, int steps) {
  require(steps >= 1 && steps <= T, "sampler: steps must lie in [1, T]");
  std::vector<int> ts;
  for (int k = steps; k >= 1; --k) ts.push_back(static_cast<int>(static_cast<int64_t>(k) * T / steps));
  return ts;
}

SamplerKind parse_sampler(const std::string& name) {
  if (name == "ddpm") return SamplerKind::DDPM;
  if (name == "ddim") return SamplerKind::DDIM;
  throw Error("unknown sampler '" + name + "' (expected ddpm or ddim)");
}

torch::Tensor sample(DiT& dit, const DiffusionSchedule& schedule, const torch::Tensor& cond, const SampleOptions& options,
                     const LatentStats* stats) {
  torch::NoGradGuard no_grad;
  const auto& cfg = dit->config();
  const int steps = options.steps == 0 ? schedule.T : options.steps;
  const auto ts = sampling_timesteps(schedule.T, steps);
  int64_t b = options.batch;
  if (cond.defined()) {
    require(cond.size(0) == b || cond.size(0) == 1, "sample: condition batch mismatch");
  }
  auto c = cond.defined() && cond.size(0) != b ? cond.expand({b, -1, -1}) : cond;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed);
  auto dtype = dit->null_embedding.scalar_type();
  auto x = torch::randn({b, cfg.grid, cfg.grid, cfg.latent_dim}, gen, torch::TensorOptions().dtype(dtype));
  for (size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int tp = i + 1 < ts.size() ? ts[i + 1] : 0;
    auto tt = torch::full({b}, t, torch::kInt64);
    auto eps = guided_eps(dit, x, tt, c, options.scale);
    if (options.sampler == SamplerKind::DDIM) {
      x = ddim_step(x, t, tp, eps, schedule);
    } else {
      auto noise = tp == 0 ? torch::Tensor() : torch::randn(x.sizes(), gen, x.options());
      x = ddpm_step(x, t, eps, schedule, noise, tp);
    }
  }
  return stats != nullptr ? stats->denormalize(x) : x;
}

torch::Tensor diffusion_loss(const DenoiseFn& denoise, const DiffusionSchedule& schedule, const torch::Tensor& latents,
                             double p_drop, at::Generator& generator) {
  require(latents.dim() >= 1 && latents.size(0) >= 1, "diffusion_loss: empty batch");
  require(p_drop >= 0 && p_drop <= 1, "diffusion_loss: p_drop must lie in [0, 1]");
  const int64_t b = latents.size(0);
  auto t = torch::randint(1, schedule.T + 1, {b}, generator, torch::TensorOptions().dtype(torch::kInt64));
  auto eps = torch::randn(latents.sizes(), generator, latents.options());
  auto drop = torch::rand({b}, generator, torch::TensorOptions().dtype(torch::kFloat64)) < p_drop;
  auto x_t = q_sample(latents, t, eps, schedule);
  return (denoise(x_t, t, drop) - eps).square().mean();
}

torch::Tensor train_step_dit(DiT& dit, const DiffusionSchedule& schedule, const torch::Tensor& latents,
                             const torch::Tensor& grids, double p_drop, at::Generator& generator) {
  require(latents.dim() == 4, "train_step_dit: latents must be [B, S, S, D]");
  torch::Tensor cond;
  if (grids.defined()) {
    require(grids.size(0) == latents.size(0), "train_step_dit: grids batch mismatch");
    cond = dit->embed_condition(grids);
  }
  auto fn = [&](const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& drop) {
    return dit->forward(x_t, t, cond, drop);
  };
  return diffusion_loss(fn, schedule, latents, p_drop, generator);
}

}  // namespace bevlat
