#pragma once

// Training engine and user-facing commands.
//
// Stage 1 trains the VAE (encoder + decoder) against a hinge discriminator;
// stage 2 freezes it, standardizes the posterior means and trains the
// denoiser on them with occupancy conditioning. Evaluation and all commands
// use the EMA weights and the posterior mean.

#include "bevlat/config.hpp"
#include "bevlat/decoder.hpp"
#include "bevlat/diffusion.hpp"
#include "bevlat/encoder.hpp"
#include "bevlat/losses.hpp"
#include "bevlat/metrics.hpp"
#include "bevlat/occupancy.hpp"
#include "bevlat/scenegen.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace bevlat {

using Json = nlohmann::json;

class BevVaeImpl : public torch::nn::Module {
 public:
  explicit BevVaeImpl(const RunConfig& cfg);

  /// Decodes the posterior mean; [V, H, W, 3].
  torch::Tensor reconstruct(const torch::Tensor& images, const CameraRig& rig);

  Encoder encoder{nullptr};
  Decoder decoder{nullptr};
};
TORCH_MODULE(BevVae);

/// Shadow copy of a module's parameters; decay is warmed up as
/// min(decay, (1 + step) / (10 + step)).
class Ema {
 public:
  Ema(torch::nn::Module& module, double decay);

  double decay_at(int64_t step) const;
  void update(torch::nn::Module& module, int64_t step);
  void copy_to(torch::nn::Module& module) const;
  const std::vector<std::pair<std::string, torch::Tensor>>& shadow() const { return shadow_; }
  std::vector<std::pair<std::string, torch::Tensor>>& shadow() { return shadow_; }

 private:
  double decay_;
  std::vector<std::pair<std::string, torch::Tensor>> shadow_;
};

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointMeta {
  std::string stage;  ///< "vae" or "dit"
  int64_t step = 0;
  Json config;
  std::string config_hash;
  std::string stage1_hash;  ///< dit only: fingerprint of the frozen encoder
  std::optional<LatentStats> latent_stats;

  Json to_json() const;
  static CheckpointMeta from_json(const Json& j);
};

using TensorList = std::vector<std::pair<std::string, torch::Tensor>>;

/// Parameters and buffers of `module`, keys prefixed with `prefix.`.
TensorList module_tensors(const std::string& prefix, const torch::nn::Module& module);

void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta, const TensorList& tensors);

struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::map<std::string, torch::Tensor> tensors;

  /// Copies `prefix.<name>` into every parameter and buffer of `module`.
  void restore(const std::string& prefix, torch::nn::Module& module) const;
  bool has_prefix(const std::string& prefix) const;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over all parameter bytes, in registration order.
std::string module_fingerprint(const torch::nn::Module& module);

/// Stage-1 model from a checkpoint (EMA weights unless `use_ema` is false).
BevVae load_vae(const std::filesystem::path& path, bool use_ema = true, RunConfig* config = nullptr);

struct LoadedDenoiser {
  DiT dit{nullptr};
  LatentStats stats;
  RunConfig config;
  CheckpointMeta meta;
};
LoadedDenoiser load_dit(const std::filesystem::path& path, bool use_ema = true);

// ---------------------------------------------------------------------------
// Metrics log: one "step<TAB>name<TAB>value" line per scalar.

class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path);
  void log(int64_t step, const std::string& name, double value);
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

struct MetricEntry {
  int64_t step;
  std::string name;
  double value;
};

std::vector<MetricEntry> read_metrics_log(const std::filesystem::path& path);
/// Values of `name` ordered by step.
std::vector<double> metric_series(const std::vector<MetricEntry>& entries, const std::string& name);

// ---------------------------------------------------------------------------
// Training

std::vector<MultiViewBatch> load_all(const Dataset& data);

struct Stage1Result {
  std::filesystem::path checkpoint;
  std::vector<double> reconstruction_loss;  ///< per step
  double seconds = 0;
};

/// Writes <out>/vae.pt (plus periodic vae_step%06d.pt) and <out>/stage1_metrics.tsv.
Stage1Result train_stage1(const RunConfig& cfg, const Dataset& data, const std::filesystem::path& out);

/// Posterior means [N, S, S, D] of every scene.
torch::Tensor encode_means(BevVae& vae, const std::vector<MultiViewBatch>& batches);
LatentStats estimate_latent_stats(BevVae& vae, const std::vector<MultiViewBatch>& batches);

/// Class occupancy of each scene's boxes, float [N, C, nz, ny, nx].
torch::Tensor occupancy_batch(const std::vector<SceneSpec>& scenes, const BevGridConfig& bev, int class_count);

struct Stage2Result {
  std::filesystem::path checkpoint;
  std::vector<double> loss;  ///< per step
  double seconds = 0;
};

/// Writes <out>/dit.pt (plus periodic dit_step%06d.pt) and <out>/stage2_metrics.tsv.
Stage2Result train_stage2(const RunConfig& cfg, const Dataset& data, const std::filesystem::path& vae_checkpoint,
                          const std::filesystem::path& out);

/// Samples one latent per grid (un-normalized), [N, S, S, D]; item i uses seed + i.
torch::Tensor generate_latents(DiT& dit, const LatentStats& stats, const DiffusionSchedule& schedule,
                               const torch::Tensor& grids, const SampleOptions& options);

// ---------------------------------------------------------------------------
// Images

/// [V, H, W, 3] -> [H, V * W, 3].
torch::Tensor view_strip(const torch::Tensor& images);
/// Rows of equal width stacked vertically.
torch::Tensor stack_rows(const std::vector<torch::Tensor>& rows);
/// Float image [H, W, 3] in [0,1] -> 8-bit PNG.
void save_image(const std::filesystem::path& path, const torch::Tensor& image);

/// Per-pixel mask [V, H, W] of the surfaces belonging to the listed boxes.
torch::Tensor box_mask(const SceneSpec& scene, const CameraRig& rig, const std::vector<int>& boxes);

// ---------------------------------------------------------------------------
// Commands

struct GenDataResult {
  std::filesystem::path train, heldout;
};
GenDataResult gen_data_cmd(const RunConfig& cfg, const std::filesystem::path& out);

struct ReconstructResult {
  MetricReport report;
  std::vector<torch::Tensor> reconstructions;  ///< per scene, [V, H, W, 3]
};
/// Scenes [0, limit) (all when limit <= 0); panels + report.json in `out`.
ReconstructResult reconstruct_cmd(const RunConfig& cfg, const std::filesystem::path& vae_checkpoint,
                                  const std::filesystem::path& data_dir, const std::filesystem::path& out,
                                  int limit = 0);

struct NvsResult {
  std::vector<double> yaws;
  std::vector<std::vector<torch::Tensor>> images;  ///< [scene][yaw] -> [V, H, W, 3]
};
NvsResult nvs_cmd(const RunConfig& cfg, const std::filesystem::path& vae_checkpoint, const std::filesystem::path& data_dir,
                  const std::vector<double>& yaws, const std::vector<int>& scenes, const std::filesystem::path& out);

struct GenerateOptions {
  int scene = 0;
  std::vector<LayoutEdit> edits;
  std::vector<double> scales;  ///< empty -> cfg.scale
  uint64_t seed = 0;
};

struct GeneratedScale {
  double scale = 0;
  torch::Tensor latent;          ///< [S, S, D]
  torch::Tensor images;          ///< [V, H, W, 3]
  torch::Tensor edited_latent;   ///< undefined without edits
  torch::Tensor edited_images;
  double change_inside = 0;      ///< mean |edited - original| inside removed boxes
  double change_outside = 0;
};

struct GenerateResult {
  std::vector<GeneratedScale> outputs;
  std::vector<int> removed_boxes;
  torch::Tensor removed_mask;  ///< [V, H, W] bool
};

GenerateResult generate_cmd(const RunConfig& cfg, const std::filesystem::path& vae_checkpoint,
                            const std::filesystem::path& dit_checkpoint, const std::filesystem::path& data_dir,
                            const GenerateOptions& options, const std::filesystem::path& out);

/// Reconstruction metrics over `data_dir` plus generation FD-lite on
/// token-level latents (generated vs. encoded), with the split-half
/// self-distance of the real latents as baseline. Writes <out>/report.json.
MetricReport eval_cmd(const RunConfig& cfg, const std::filesystem::path& vae_checkpoint,
                      const std::filesystem::path& dit_checkpoint, const std::filesystem::path& data_dir,
                      const std::filesystem::path& out, uint64_t seed);

}  // namespace bevlat
