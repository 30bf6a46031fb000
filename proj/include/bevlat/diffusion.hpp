#pragma once

// Latent diffusion over the S x S x D BEV latent: noise schedule, latent
// standardization, an adaLN-Zero transformer denoiser with element-wise
// occupancy conditioning, classifier-free guidance and DDPM / DDIM samplers.
//
// Time indices are 1-based: t = 1..T, and alpha_bar(0) = 1.

#include "bevlat/nn.hpp"
#include "bevlat/occupancy.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

namespace bevlat {

using Json = nlohmann::json;

enum class ScheduleKind { Linear };

struct DiffusionSchedule {
  int T = 0;
  std::vector<double> beta, alpha, alpha_bar, sigma;  ///< entry t - 1 belongs to step t

  /// t in [0, T]; alpha_bar(0) = 1.
  double alpha_bar_at(int t) const;
  /// Reverse-process standard deviation for a (possibly respaced) step t -> t_prev.
  double posterior_sigma(int t, int t_prev) const;
};

/// Linear beta from 1e-4 to 2e-2, both scaled by 1000 / T (upper end capped at 0.999).
DiffusionSchedule make_schedule(int T, ScheduleKind kind = ScheduleKind::Linear);

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps, const DiffusionSchedule& schedule);
/// Per-item steps: t is an int64 tensor [B] broadcast over the trailing dims of x0.
torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const DiffusionSchedule& schedule);

/// Per-channel standardization of latents (channel = last dim).
struct LatentStats {
  torch::Tensor mean;  ///< [D] float64
  torch::Tensor std;   ///< [D] float64, floored

  static constexpr double kStdFloor = 1e-6;

  /// latents: [..., D]; population std.
  static LatentStats from_latents(const torch::Tensor& latents);
  torch::Tensor normalize(const torch::Tensor& z) const;
  torch::Tensor denormalize(const torch::Tensor& z) const;
  bool defined() const { return mean.defined(); }
  Json to_json() const;
  static LatentStats from_json(const Json& j);
};

/// Streaming (Welford) counterpart of LatentStats::from_latents.
class LatentStatsAccumulator {
 public:
  void add(const torch::Tensor& latents);
  LatentStats finalize() const;
  int64_t count() const { return count_; }

 private:
  int64_t count_ = 0;
  std::vector<double> mean_, m2_;
};

struct DenoiserConfig {
  int grid = 8;          ///< S
  int latent_dim = 8;    ///< D
  int width = 128;
  int depth = 4;
  int heads = 4;
  int time_dim = 128;
  double p_drop = 0.1;
  OccupancyEmbeddingOptions condition;  ///< must produce `width` channels per token

  void validate() const;
};

class DiTBlockImpl : public torch::nn::Module {
 public:
  DiTBlockImpl(int width, int heads);
  /// x: [B, N, W], c: [B, W]
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& c);

 private:
  int width_;
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  SelfAttention attn_{nullptr};
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
  torch::nn::Linear modulation_{nullptr};
};
TORCH_MODULE(DiTBlock);

class DiTImpl : public torch::nn::Module {
 public:
  explicit DiTImpl(const DenoiserConfig& cfg);

  /// Occupancy grids [B, C, nz, ny, nx] -> condition tokens [B, S*S, width].
  torch::Tensor embed_condition(const torch::Tensor& grids);

  /// x_t: [B, S, S, D]; t: int64 [B] in [1, T]; cond: tokens [B, S*S, width]
  /// or undefined for the null condition; drop: optional bool [B] selecting
  /// items whose condition is replaced by the null embedding.
  torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond = {},
                        const torch::Tensor& drop = {});

  const DenoiserConfig& config() const { return cfg_; }

  OccupancyEmbedding condition{nullptr};
  torch::Tensor null_embedding;  ///< [width], starts at zero

 private:
  DenoiserConfig cfg_;
  torch::nn::Linear x_embed_{nullptr};
  torch::Tensor pos_embed_;
  torch::nn::Linear t_fc1_{nullptr}, t_fc2_{nullptr};
  torch::nn::ModuleList blocks_;
  torch::nn::LayerNorm final_norm_{nullptr};
  torch::nn::Linear final_modulation_{nullptr}, out_{nullptr};
};
TORCH_MODULE(DiT);

/// eps_uncond + s (eps_cond - eps_uncond).
torch::Tensor cfg_eps(const torch::Tensor& eps_uncond, const torch::Tensor& eps_cond, double s);

/// Guided noise prediction; skips the conditional pass at s = 0 and the
/// unconditional one at s = 1.
torch::Tensor guided_eps(DiT& dit, const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& cond, double s);

/// Ancestral step t -> t_prev (default t - 1) with the epsilon-parameterized
/// posterior mean; noise is added unless t_prev = 0.
torch::Tensor ddpm_step(const torch::Tensor& x_t, int t, const torch::Tensor& eps_hat, const DiffusionSchedule& schedule,
                        const torch::Tensor& noise, std::optional<int> t_prev = std::nullopt);

/// Deterministic step t -> t_prev through the predicted x0.
torch::Tensor ddim_step(const torch::Tensor& x_t, int t, int t_prev, const torch::Tensor& eps_hat,
                        const DiffusionSchedule& schedule);

/// Descending timesteps used when sampling with `steps` evaluations; always starts at T.
std::vector<int> sampling_timesteps(int T, int steps);

enum class SamplerKind { DDPM, DDIM };
SamplerKind parse_sampler(const std::string& name);

struct SampleOptions {
  double scale = 1.0;
  int steps = 0;  ///< 0 -> T
  SamplerKind sampler = SamplerKind::DDIM;
  uint64_t seed = 0;
  int batch = 1;
};

/// Starts from N(0, I) drawn from `seed` and returns un-normalized latents [B, S, S, D]
/// (normalization undone only if `stats` is given).
torch::Tensor sample(DiT& dit, const DiffusionSchedule& schedule, const torch::Tensor& cond, const SampleOptions& options,
                     const LatentStats* stats = nullptr);

/// (x_t, t, drop) -> eps_hat; drop is a bool [B] mask of null-conditioned items.
using DenoiseFn = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&, const torch::Tensor&)>;

/// Draws t ~ U{1..T}, eps ~ N(0, I) and the drop mask (in that order) from
/// `generator`, returns mean ||denoise(x_t, t, drop) - eps||^2.
torch::Tensor diffusion_loss(const DenoiseFn& denoise, const DiffusionSchedule& schedule, const torch::Tensor& latents,
                             double p_drop, at::Generator& generator);

/// One epsilon-prediction loss on normalized latents [B, S, S, D]; grids
/// [B, C, nz, ny, nx] may be undefined (always null condition).
torch::Tensor train_step_dit(DiT& dit, const DiffusionSchedule& schedule, const torch::Tensor& latents,
                             const torch::Tensor& grids, double p_drop, at::Generator& generator);

}  // namespace bevlat
