#include "bevlat/orchestrator.hpp"

#include "bevlat/error.hpp"
#include "bevlat/png_io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

namespace bevlat {

namespace fs = std::filesystem;

BevVaeImpl::BevVaeImpl(const RunConfig& cfg) {
  encoder = register_module("encoder", Encoder(cfg.encoder()));
  decoder = register_module("decoder", Decoder(cfg.decoder()));
}

torch::Tensor BevVaeImpl::reconstruct(const torch::Tensor& images, const CameraRig& rig) {
  torch::NoGradGuard no_grad;
  return decoder->forward(encoder->forward(images, rig).mean, rig);
}

// ---------------------------------------------------------------------------

Ema::Ema(torch::nn::Module& module, double decay) : decay_(decay) {
  for (const auto& p : module.named_parameters()) shadow_.emplace_back(p.key(), p.value().detach().clone());
}

double Ema::decay_at(int64_t step) const {
  return std::min(decay_, (1.0 + step) / (10.0 + step));
}

void Ema::update(torch::nn::Module& module, int64_t step) {
  torch::NoGradGuard no_grad;
  const double d = decay_at(step);
  auto params = module.named_parameters();
  require(params.size() == shadow_.size(), "ema: parameter count changed");
  size_t i = 0;
  for (const auto& p : params) {
    shadow_[i].second.mul_(d).add_(p.value().detach(), 1.0 - d);
    ++i;
  }
}

void Ema::copy_to(torch::nn::Module& module) const {
  torch::NoGradGuard no_grad;
  auto params = module.named_parameters();
  require(params.size() == shadow_.size(), "ema: parameter count changed");
  size_t i = 0;
  for (auto& p : params) {
    require(p.key() == shadow_[i].first && p.value().sizes() == shadow_[i].second.sizes(),
            "ema: parameter layout changed");
    p.value().copy_(shadow_[i].second);
    ++i;
  }
}

// ---------------------------------------------------------------------------

Json CheckpointMeta::to_json() const {
  Json j = {{"stage", stage}, {"step", step}, {"config", config}, {"config_hash", config_hash},
            {"stage1_hash", stage1_hash}};
  if (latent_stats) j["latent_stats"] = latent_stats->to_json();
  return j;
}

CheckpointMeta CheckpointMeta::from_json(const Json& j) {
  CheckpointMeta m;
  m.stage = j.at("stage").get<std::string>();
  m.step = j.at("step").get<int64_t>();
  m.config = j.at("config");
  m.config_hash = j.at("config_hash").get<std::string>();
  m.stage1_hash = j.value("stage1_hash", "");
  if (j.contains("latent_stats")) m.latent_stats = LatentStats::from_json(j.at("latent_stats"));
  return m;
}

TensorList module_tensors(const std::string& prefix, const torch::nn::Module& module) {
  TensorList out;
  for (const auto& p : module.named_parameters()) out.emplace_back(prefix + "." + p.key(), p.value());
  for (const auto& b : module.named_buffers()) out.emplace_back(prefix + "." + b.key(), b.value());
  return out;
}

void save_checkpoint(const fs::path& path, const CheckpointMeta& meta, const TensorList& tensors) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  torch::serialize::OutputArchive archive;
  Json keys = Json::array();
  for (const auto& [key, t] : tensors) {
    archive.write(key, t.detach().contiguous());
    keys.push_back(key);
  }
  Json j = meta.to_json();
  j["tensors"] = keys;
  archive.write("meta", c10::IValue(j.dump()));
  const auto tmp = path.string() + ".tmp";
  archive.save_to(tmp);
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  require(fs::exists(path), "checkpoint: " + path.string() + " does not exist");
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw Error("checkpoint: cannot read " + path.string() + ": " + e.what_without_backtrace());
  }
  c10::IValue meta_value;
  require(archive.try_read("meta", meta_value) && meta_value.isString(), "checkpoint: " + path.string() + " has no metadata");
  const Json j = Json::parse(meta_value.toStringRef());
  LoadedCheckpoint ck;
  ck.meta = CheckpointMeta::from_json(j);
  for (const auto& key : j.at("tensors")) {
    torch::Tensor t;
    archive.read(key.get<std::string>(), t);
    ck.tensors.emplace(key.get<std::string>(), t);
  }
  return ck;
}

void LoadedCheckpoint::restore(const std::string& prefix, torch::nn::Module& module) const {
  torch::NoGradGuard no_grad;
  auto copy = [&](const std::string& name, torch::Tensor& dst) {
    auto it = tensors.find(prefix + "." + name);
    require(it != tensors.end(), "checkpoint: missing tensor " + prefix + "." + name);
    require(it->second.sizes() == dst.sizes(), "checkpoint: shape mismatch for " + prefix + "." + name);
    dst.copy_(it->second);
  };
  for (auto& p : module.named_parameters()) copy(p.key(), p.value());
  for (auto& b : module.named_buffers()) copy(b.key(), b.value());
}

bool LoadedCheckpoint::has_prefix(const std::string& prefix) const {
  const auto p = prefix + ".";
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& kv) { return kv.first.rfind(p, 0) == 0; });
}

std::string module_fingerprint(const torch::nn::Module& module) {
  std::string bytes;
  for (const auto& p : module.parameters()) {
    auto c = p.detach().contiguous().to(torch::kFloat32);
    bytes.append(reinterpret_cast<const char*>(c.data_ptr()), c.numel() * sizeof(float));
  }
  return fnv1a_hex(bytes);
}

BevVae load_vae(const fs::path& path, bool use_ema, RunConfig* config) {
  auto ck = load_checkpoint(path);
  require(ck.meta.stage == "vae", "checkpoint: " + path.string() + " is not a stage-1 (vae) checkpoint");
  const auto cfg = RunConfig::from_json(ck.meta.config);
  BevVae vae(cfg);
  ck.restore(use_ema ? "ema" : "vae", *vae);
  vae->eval();
  if (config != nullptr) *config = cfg;
  return vae;
}

LoadedDenoiser load_dit(const fs::path& path, bool use_ema) {
  auto ck = load_checkpoint(path);
  require(ck.meta.stage == "dit", "checkpoint: " + path.string() + " is not a stage-2 (dit) checkpoint");
  require(ck.meta.latent_stats.has_value(), "checkpoint: stage-2 checkpoint lacks latent statistics");
  LoadedDenoiser out;
  out.config = RunConfig::from_json(ck.meta.config);
  out.dit = DiT(out.config.denoiser());
  ck.restore(use_ema ? "ema" : "dit", *out.dit);
  out.dit->eval();
  out.stats = *ck.meta.latent_stats;
  out.meta = ck.meta;
  return out;
}

// ---------------------------------------------------------------------------

MetricsLog::MetricsLog(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  require(out_.good(), "metrics log: cannot open " + path.string());
  out_.precision(10);
}

void MetricsLog::log(int64_t step, const std::string& name, double value) {
  out_ << step << '\t' << name << '\t' << value << '\n';
}

std::vector<MetricEntry> read_metrics_log(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), "metrics log: cannot open " + path.string());
  std::vector<MetricEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    MetricEntry e;
    std::string value;
    if (!(ss >> e.step) || ss.get() != '\t' || !std::getline(ss, e.name, '\t') || !std::getline(ss, value)) {
      throw Error("metrics log: malformed line " + path.string() + ":" + std::to_string(lineno));
    }
    e.value = std::stod(value);
    out.push_back(e);
  }
  return out;
}

std::vector<double> metric_series(const std::vector<MetricEntry>& entries, const std::string& name) {
  std::vector<std::pair<int64_t, double>> rows;
  for (const auto& e : entries)
    if (e.name == name) rows.emplace_back(e.step, e.value);
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<double> out;
  for (const auto& r : rows) out.push_back(r.second);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<MultiViewBatch> load_all(const Dataset& data) {
  std::vector<MultiViewBatch> out;
  for (size_t i = 0; i < data.size(); ++i) out.push_back(data.at(i));
  return out;
}

namespace {

void set_lr(torch::optim::Optimizer& opt, double lr) {
  for (auto& g : opt.param_groups()) g.options().set_lr(lr);
}

void set_requires_grad(torch::nn::Module& m, bool on) {
  for (auto& p : m.parameters()) p.set_requires_grad(on);
}

CheckpointMeta make_meta(const RunConfig& cfg, const std::string& stage, int64_t step) {
  CheckpointMeta m;
  m.stage = stage;
  m.step = step;
  m.config = cfg.to_json();
  m.config_hash = cfg.hash();
  return m;
}

TensorList stage1_tensors(BevVae& vae, const Ema& ema, Discriminator& disc) {
  auto t = module_tensors("vae", *vae);
  for (const auto& [k, v] : ema.shadow()) t.emplace_back("ema." + k, v);
  // Buffers are fixed encodings; the EMA view shares them with the live model.
  for (const auto& b : vae->named_buffers()) t.emplace_back("ema." + b.key(), b.value());
  auto d = module_tensors("disc", *disc);
  t.insert(t.end(), d.begin(), d.end());
  return t;
}

TensorList stage2_tensors(DiT& dit, const Ema& ema) {
  auto t = module_tensors("dit", *dit);
  for (const auto& [k, v] : ema.shadow()) t.emplace_back("ema." + k, v);
  for (const auto& b : dit->named_buffers()) t.emplace_back("ema." + b.key(), b.value());
  return t;
}

std::string step_name(const std::string& stem, int64_t step) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_step%06lld.pt", stem.c_str(), static_cast<long long>(step));
  return buf;
}

std::vector<int> epoch_order(std::mt19937_64& rng, int n) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

Stage1Result train_stage1(const RunConfig& cfg, const Dataset& data, const fs::path& out) {
  require(!data.empty(), "train-vae: dataset is empty");
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(out);
  const auto batches = load_all(data);
  const auto& opt_cfg = cfg.stage1;

  torch::manual_seed(cfg.seed);
  BevVae vae(cfg);
  Discriminator disc(cfg.rig.image_size, cfg.disc_channels);
  RandomConvExtractor extractor(cfg.perceptual_seed);
  const auto rec_options = cfg.reconstruction();
  const FeatureExtractor* ext = cfg.perceptual ? &extractor : nullptr;

  torch::optim::AdamW gopt(vae->parameters(), torch::optim::AdamWOptions(opt_cfg.lr)
                                                  .betas({opt_cfg.beta1, opt_cfg.beta2})
                                                  .weight_decay(opt_cfg.weight_decay));
  torch::optim::AdamW dopt(disc->parameters(), torch::optim::AdamWOptions(cfg.s1_disc_lr)
                                                   .betas({opt_cfg.beta1, opt_cfg.beta2})
                                                   .weight_decay(opt_cfg.weight_decay));
  Ema ema(*vae, opt_cfg.ema_decay);
  auto noise = make_generator(cfg.seed + 1);
  std::mt19937_64 order_rng(cfg.seed + 2);
  std::vector<int> order;
  size_t cursor = 0;

  MetricsLog log(out / "stage1_metrics.tsv");
  Stage1Result result;
  const int n = static_cast<int>(batches.size());
  for (int step = 0; step < opt_cfg.steps; ++step) {
    const double lr = opt_cfg.lr_at(step);
    set_lr(gopt, lr);
    set_lr(dopt, cfg.s1_disc_lr * lr / opt_cfg.lr);
    const bool adv_on = cfg.adversarial && step >= cfg.disc_start;
    gopt.zero_grad();
    dopt.zero_grad();
    double sum_rec = 0, sum_kl = 0, sum_adv = 0, sum_lambda = 0, sum_d = 0, sum_g = 0;
    for (int b = 0; b < opt_cfg.batch; ++b) {
      if (cursor == order.size()) {
        order = epoch_order(order_rng, n);
        cursor = 0;
      }
      const auto& batch = batches[order[cursor++]];
      const auto& x = batch.images;
      auto st = vae->encoder->forward(x, batch.rig, noise);
      auto x_hat = vae->decoder->forward(st.sample, batch.rig);
      auto rec = reconstruction_loss(x, x_hat, ext, rec_options);
      auto kl = kl_loss(st.mean, st.logvar);
      torch::Tensor adv = torch::zeros({}, rec.options());
      double lambda = 0;
      if (adv_on) {
        set_requires_grad(*disc, false);
        adv = adversarial_loss(disc->forward(x_hat));
        auto& last = vae->decoder->last_layer_weight();
        lambda = adaptive_lambda(gradient_norm(rec, last), gradient_norm(adv, last), cfg.loss.delta,
                                 cfg.loss.lambda_max);
      }
      auto lg = total_generator_loss(kl, rec, adv, lambda, cfg.loss);
      const double lg_value = lg.item<double>();
      if (!std::isfinite(lg_value)) {
        auto meta = make_meta(cfg, "vae", step);
        save_checkpoint(out / "nan_snapshot.pt", meta, stage1_tensors(vae, ema, disc));
        std::ostringstream msg;
        msg << "train-vae: non-finite generator loss at step " << step << " (L_R=" << rec.item<double>()
            << ", L_KL=" << kl.item<double>() << ", L_A=" << adv.item<double>() << ", lambda=" << lambda
            << "); snapshot written to " << (out / "nan_snapshot.pt").string();
        throw Error(msg.str());
      }
      (lg / opt_cfg.batch).backward();
      if (adv_on) {
        set_requires_grad(*disc, true);
        auto ld = hinge_d_loss(disc->forward(x), disc->forward(x_hat.detach()));
        (ld / opt_cfg.batch).backward();
        sum_d += ld.item<double>();
      }
      sum_rec += rec.item<double>();
      sum_kl += kl.item<double>();
      sum_adv += adv.item<double>();
      sum_lambda += lambda;
      sum_g += lg_value;
    }
    gopt.step();
    if (adv_on) dopt.step();
    ema.update(*vae, step);

    const double nb = opt_cfg.batch;
    log.log(step, "L_R", sum_rec / nb);
    log.log(step, "L_KL", sum_kl / nb);
    log.log(step, "L_A", sum_adv / nb);
    log.log(step, "lambda", sum_lambda / nb);
    log.log(step, "L_D", sum_d / nb);
    log.log(step, "L_G", sum_g / nb);
    log.log(step, "lr", lr);
    result.reconstruction_loss.push_back(sum_rec / nb);
    if ((step + 1) % cfg.log_every == 0) log.flush();
    if ((step + 1) % opt_cfg.ckpt_every == 0 && step + 1 < opt_cfg.steps) {
      save_checkpoint(out / step_name("vae", step + 1), make_meta(cfg, "vae", step + 1),
                      stage1_tensors(vae, ema, disc));
    }
  }
  log.flush();
  result.checkpoint = out / "vae.pt";
  save_checkpoint(result.checkpoint, make_meta(cfg, "vae", opt_cfg.steps), stage1_tensors(vae, ema, disc));
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

torch::Tensor encode_means(BevVae& vae, const std::vector<MultiViewBatch>& batches) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> out;
  for (const auto& b : batches) out.push_back(vae->encoder->forward(b.images, b.rig).mean);
  return torch::stack(out);
}

LatentStats estimate_latent_stats(BevVae& vae, const std::vector<MultiViewBatch>& batches) {
  torch::NoGradGuard no_grad;
  LatentStatsAccumulator acc;
  for (const auto& b : batches) acc.add(vae->encoder->forward(b.images, b.rig).mean);
  return acc.finalize();
}

torch::Tensor occupancy_batch(const std::vector<SceneSpec>& scenes, const BevGridConfig& bev, int class_count) {
  std::vector<torch::Tensor> grids;
  for (const auto& s : scenes) grids.push_back(voxelize_boxes(s.boxes, bev, class_count).grid.to(torch::kFloat32));
  return torch::stack(grids);
}

Stage2Result train_stage2(const RunConfig& cfg, const Dataset& data, const fs::path& vae_checkpoint, const fs::path& out) {
  require(!data.empty(), "train-dit: dataset is empty");
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(out);
  RunConfig vae_cfg;
  BevVae vae = load_vae(vae_checkpoint, true, &vae_cfg);
  const auto enc = vae_cfg.encoder();
  const auto den = cfg.denoiser();
  require(enc.latent_size() == den.grid && enc.latent_dim == den.latent_dim,
          "train-dit: latent shape of the stage-1 checkpoint (" + std::to_string(enc.latent_size()) + "x" +
              std::to_string(enc.latent_size()) + "x" + std::to_string(enc.latent_dim) +
              ") does not match the configured denoiser (" + std::to_string(den.grid) + "x" +
              std::to_string(den.grid) + "x" + std::to_string(den.latent_dim) + ")");
  set_requires_grad(*vae, false);
  const auto encoder_hash = module_fingerprint(*vae->encoder);

  const auto batches = load_all(data);
  const auto latents = encode_means(vae, batches);
  const auto stats = estimate_latent_stats(vae, batches);
  const auto normalized = stats.normalize(latents.to(torch::kFloat64)).to(torch::kFloat32);
  std::vector<SceneSpec> scenes;
  for (const auto& b : batches) scenes.push_back(b.scene);
  const auto grids = occupancy_batch(scenes, cfg.bev, cfg.scenes.class_count);

  const auto& opt_cfg = cfg.stage2;
  torch::manual_seed(cfg.seed + 3);
  DiT dit(den);
  std::vector<torch::Tensor> decay, no_decay;
  for (auto& p : dit->parameters()) (p.dim() >= 2 ? decay : no_decay).push_back(p);
  std::vector<torch::optim::OptimizerParamGroup> groups;
  auto opts = [&](double wd) {
    return std::make_unique<torch::optim::AdamWOptions>(
        torch::optim::AdamWOptions(opt_cfg.lr).betas({opt_cfg.beta1, opt_cfg.beta2}).weight_decay(wd));
  };
  groups.emplace_back(decay, opts(opt_cfg.weight_decay));
  groups.emplace_back(no_decay, opts(0.0));
  torch::optim::AdamW opt(groups, torch::optim::AdamWOptions(opt_cfg.lr));
  Ema ema(*dit, opt_cfg.ema_decay);
  const auto schedule = make_schedule(cfg.T);
  auto gen = make_generator(cfg.seed + 4);

  MetricsLog log(out / "stage2_metrics.tsv");
  Stage2Result result;
  const int64_t n = normalized.size(0);
  for (int step = 0; step < opt_cfg.steps; ++step) {
    const double lr = opt_cfg.lr_at(step);
    set_lr(opt, lr);
    auto idx = torch::randint(0, n, {opt_cfg.batch}, gen, torch::TensorOptions().dtype(torch::kInt64));
    auto loss = train_step_dit(dit, schedule, normalized.index_select(0, idx), grids.index_select(0, idx),
                               cfg.p_drop, gen);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      auto meta = make_meta(cfg, "dit", step);
      meta.latent_stats = stats;
      save_checkpoint(out / "nan_snapshot.pt", meta, stage2_tensors(dit, ema));
      throw Error("train-dit: non-finite loss at step " + std::to_string(step) + "; snapshot written to " +
                  (out / "nan_snapshot.pt").string());
    }
    opt.zero_grad();
    loss.backward();
    opt.step();
    ema.update(*dit, step);
    log.log(step, "L_simple", value);
    log.log(step, "lr", lr);
    result.loss.push_back(value);
    if ((step + 1) % cfg.log_every == 0) log.flush();
    if ((step + 1) % opt_cfg.ckpt_every == 0 && step + 1 < opt_cfg.steps) {
      auto meta = make_meta(cfg, "dit", step + 1);
      meta.latent_stats = stats;
      meta.stage1_hash = encoder_hash;
      save_checkpoint(out / step_name("dit", step + 1), meta, stage2_tensors(dit, ema));
    }
  }
  log.flush();
  require(module_fingerprint(*vae->encoder) == encoder_hash, "train-dit: stage-1 encoder changed during stage 2");
  auto meta = make_meta(cfg, "dit", opt_cfg.steps);
  meta.latent_stats = stats;
  meta.stage1_hash = encoder_hash;
  result.checkpoint = out / "dit.pt";
  save_checkpoint(result.checkpoint, meta, stage2_tensors(dit, ema));
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

torch::Tensor generate_latents(DiT& dit, const LatentStats& stats, const DiffusionSchedule& schedule,
                               const torch::Tensor& grids, const SampleOptions& options) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < grids.size(0); ++i) {
    auto o = options;
    o.batch = 1;
    o.seed = options.seed + static_cast<uint64_t>(i);
    auto cond = dit->embed_condition(grids.slice(0, i, i + 1));
    out.push_back(sample(dit, schedule, cond, o, &stats).squeeze(0));
  }
  return torch::stack(out);
}

// ---------------------------------------------------------------------------

torch::Tensor view_strip(const torch::Tensor& images) {
  require(images.dim() == 4, "view_strip: expected [V, H, W, 3]");
  return images.permute({1, 0, 2, 3}).reshape({images.size(1), images.size(0) * images.size(2), images.size(3)});
}

torch::Tensor stack_rows(const std::vector<torch::Tensor>& rows) { return torch::cat(rows, 0); }

void save_image(const fs::path& path, const torch::Tensor& image) {
  require(image.dim() == 3 && image.size(2) == 3, "save_image: expected [H, W, 3]");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto bytes = (image.detach().to(torch::kFloat64).clamp(0, 1) * 255.0).round().to(torch::kUInt8).contiguous();
  png::Image8 img;
  img.height = static_cast<int>(image.size(0));
  img.width = static_cast<int>(image.size(1));
  img.channels = 3;
  img.pixels.assign(bytes.data_ptr<uint8_t>(), bytes.data_ptr<uint8_t>() + bytes.numel());
  png::write_rgb8(path, img);
}

torch::Tensor box_mask(const SceneSpec& scene, const CameraRig& rig, const std::vector<int>& boxes) {
  std::vector<torch::Tensor> masks;
  for (const auto& view : rig.views) {
    auto surface = render_view(scene, view.intrinsics, view.extrinsics).surface;
    auto m = torch::zeros(surface.sizes(), torch::kBool);
    for (int b : boxes) {
      require(b >= 0 && b < static_cast<int>(scene.boxes.size()), "box_mask: box index out of range");
      m = m | ((surface >= box_surface_id(b, 0)) & (surface <= box_surface_id(b, 5)));
    }
    masks.push_back(m);
  }
  return torch::stack(masks);
}

// ---------------------------------------------------------------------------

GenDataResult gen_data_cmd(const RunConfig& cfg, const fs::path& out) {
  const auto rig = make_surround_rig(cfg.rig);
  GenDataResult r{out / "train", out / "heldout"};
  write_dataset(r.train, generate_scenes(cfg.train_scenes, cfg.data_seed, cfg.scenes, rig));
  write_dataset(r.heldout, generate_scenes(cfg.heldout_scenes, cfg.heldout_seed, cfg.scenes, rig));
  return r;
}

namespace {

std::string scene_stem(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%06d", i);
  return buf;
}

std::string number_tag(const char* prefix, double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%+g", prefix, value);
  return buf;
}

void write_json(const fs::path& path, const Json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream o(path);
  require(o.good(), "cannot write " + path.string());
  o << j.dump(2) << "\n";
}

/// Average reconstruction metrics over scenes; fd_lite compares pooled
/// extractor features of reconstructed and real views.
MetricReport reconstruction_report(BevVae& vae, const std::vector<MultiViewBatch>& batches,
                                   std::vector<torch::Tensor>* recons, uint64_t extractor_seed) {
  MetricReport r;
  RandomConvExtractor extractor(extractor_seed);
  std::vector<torch::Tensor> feats_real, feats_recon;
  for (const auto& b : batches) {
    auto x_hat = vae->reconstruct(b.images, b.rig);
    r.psnr += psnr(b.images, x_hat);
    r.ssim += ssim(b.images, x_hat);
    if (b.depths.has_value()) r.mvsc_lite += mvsc_lite(x_hat, b);
    feats_real.push_back(extractor.pooled(b.images));
    feats_recon.push_back(extractor.pooled(x_hat));
    if (recons != nullptr) recons->push_back(x_hat);
  }
  const double n = static_cast<double>(batches.size());
  r.psnr /= n;
  r.ssim /= n;
  r.mvsc_lite /= n;
  auto real = torch::cat(feats_real), fake = torch::cat(feats_recon);
  if (real.size(0) >= 2) {
    r.fd_lite = fd_lite(fake, real);
    const int64_t half = real.size(0) / 2;
    if (half >= 2) r.fd_lite_baseline = fd_lite(real.slice(0, 0, half), real.slice(0, half));
  }
  r.n_scenes = static_cast<int64_t>(batches.size());
  return r;
}

std::vector<MultiViewBatch> first_scenes(const Dataset& data, int limit) {
  const size_t n = limit > 0 ? std::min<size_t>(limit, data.size()) : data.size();
  std::vector<MultiViewBatch> out;
  for (size_t i = 0; i < n; ++i) out.push_back(data.at(i));
  return out;
}

}  // namespace

ReconstructResult reconstruct_cmd(const RunConfig& cfg, const fs::path& vae_checkpoint, const fs::path& data_dir,
                                  const fs::path& out, int limit) {
  Dataset data(data_dir);
  require(!data.empty(), "reconstruct: dataset is empty");
  RunConfig vae_cfg;
  BevVae vae = load_vae(vae_checkpoint, true, &vae_cfg);
  const auto batches = first_scenes(data, limit);
  ReconstructResult res;
  res.report = reconstruction_report(vae, batches, &res.reconstructions, cfg.perceptual_seed);
  res.report.config_hash = vae_cfg.hash();
  for (size_t i = 0; i < batches.size(); ++i) {
    const auto stem = scene_stem(static_cast<int>(i));
    save_image(out / (stem + "_panel.png"),
               stack_rows({view_strip(batches[i].images), view_strip(res.reconstructions[i])}));
    save_image(out / (stem + "_recon.png"), view_strip(res.reconstructions[i]));
  }
  write_json(out / "report.json", res.report.to_json());
  return res;
}

NvsResult nvs_cmd(const RunConfig& cfg, const fs::path& vae_checkpoint, const fs::path& data_dir,
                  const std::vector<double>& yaws, const std::vector<int>& scenes, const fs::path& out) {
  (void)cfg;
  require(!yaws.empty(), "nvs: yaw list is empty");
  Dataset data(data_dir);
  BevVae vae = load_vae(vae_checkpoint);
  NvsResult res;
  res.yaws = yaws;
  torch::NoGradGuard no_grad;
  for (int s : scenes) {
    require(s >= 0 && s < static_cast<int>(data.size()), "nvs: scene index " + std::to_string(s) + " out of range");
    const auto b = data.at(s);
    const auto z = vae->encoder->forward(b.images, b.rig).mean;
    std::vector<torch::Tensor> per_yaw, rows{view_strip(b.images)};
    for (double yaw : yaws) {
      auto img = vae->decoder->forward(z, rotate_rig(b.rig, yaw));
      per_yaw.push_back(img);
      rows.push_back(view_strip(img));
      save_image(out / (scene_stem(s) + "_" + number_tag("yaw", yaw) + ".png"), view_strip(img));
    }
    save_image(out / (scene_stem(s) + "_nvs_panel.png"), stack_rows(rows));
    res.images.push_back(std::move(per_yaw));
  }
  write_json(out / "nvs.json", {{"yaws", yaws}, {"scenes", scenes}});
  return res;
}

GenerateResult generate_cmd(const RunConfig& cfg, const fs::path& vae_checkpoint, const fs::path& dit_checkpoint,
                            const fs::path& data_dir, const GenerateOptions& options, const fs::path& out) {
  Dataset data(data_dir);
  require(options.scene >= 0 && options.scene < static_cast<int>(data.size()), "generate: scene index out of range");
  RunConfig vae_cfg;
  BevVae vae = load_vae(vae_checkpoint, true, &vae_cfg);
  auto den = load_dit(dit_checkpoint);
  const auto enc = vae_cfg.encoder();
  require(enc.latent_size() == den.config.denoiser().grid && enc.latent_dim == den.config.latent_dim,
          "generate: stage-1 and stage-2 checkpoints have different latent shapes");
  const auto schedule = make_schedule(den.config.T);
  const auto& bev = den.config.bev;
  const int classes = den.config.scenes.class_count;

  const auto scene = data.scene(options.scene);
  const auto rig = data.rig(options.scene);
  const auto grid = occupancy_batch({scene}, bev, classes);
  torch::Tensor edited_grid;
  SceneSpec edited;
  GenerateResult res;
  if (!options.edits.empty()) {
    edited = edit_scene(scene, options.edits);
    edited_grid = occupancy_batch({edited}, bev, classes);
    std::vector<int> ids(scene.boxes.size());
    std::iota(ids.begin(), ids.end(), 0);
    for (const auto& e : options.edits) {
      if (e.kind == LayoutEdit::Kind::Remove) {
        res.removed_boxes.push_back(ids.at(e.index));
        ids.erase(ids.begin() + e.index);
      }
    }
    if (!res.removed_boxes.empty()) res.removed_mask = box_mask(scene, rig, res.removed_boxes);
  }

  auto scales = options.scales.empty() ? std::vector<double>{cfg.scale} : options.scales;
  Json summary = Json::array();
  torch::NoGradGuard no_grad;
  for (double s : scales) {
    auto so = cfg.sample_options(options.seed);
    so.scale = s;
    GeneratedScale g;
    g.scale = s;
    g.latent = generate_latents(den.dit, den.stats, schedule, grid, so).squeeze(0);
    g.images = vae->decoder->forward(g.latent.to(torch::kFloat32), rig);
    const auto dir = out / number_tag("scale", s);
    save_image(dir / "generated.png", view_strip(g.images));
    Json entry = {{"scale", s}, {"seed", options.seed}, {"sampler", cfg.sampler}, {"steps", so.steps}};
    if (edited_grid.defined()) {
      g.edited_latent = generate_latents(den.dit, den.stats, schedule, edited_grid, so).squeeze(0);
      g.edited_images = vae->decoder->forward(g.edited_latent.to(torch::kFloat32), rig);
      auto diff = (g.edited_images - g.images).abs().mean(3);  // [V, H, W]
      std::vector<torch::Tensor> rows{view_strip(g.images), view_strip(g.edited_images),
                                      view_strip((diff * 4).clamp(0, 1).unsqueeze(3).expand({-1, -1, -1, 3}))};
      if (res.removed_mask.defined()) {
        const auto m = res.removed_mask;
        g.change_inside = m.any().item<bool>() ? diff.masked_select(m).mean().item<double>() : 0.0;
        g.change_outside = (~m).any().item<bool>() ? diff.masked_select(~m).mean().item<double>() : 0.0;
        rows.push_back(view_strip(m.to(torch::kFloat32).unsqueeze(3).expand({-1, -1, -1, 3})));
        entry["removed_boxes"] = res.removed_boxes;
        entry["change_inside"] = g.change_inside;
        entry["change_outside"] = g.change_outside;
        entry["inside_outside_ratio"] = g.change_outside > 0 ? g.change_inside / g.change_outside : 0.0;
      }
      save_image(dir / "edited.png", view_strip(g.edited_images));
      save_image(dir / "edit_panel.png", stack_rows(rows));
    }
    summary.push_back(entry);
    res.outputs.push_back(std::move(g));
  }
  write_json(out / "generate.json", summary);
  return res;
}

MetricReport eval_cmd(const RunConfig& cfg, const fs::path& vae_checkpoint, const fs::path& dit_checkpoint,
                      const fs::path& data_dir, const fs::path& out, uint64_t seed) {
  Dataset data(data_dir);
  require(!data.empty(), "eval: dataset is empty");
  RunConfig vae_cfg;
  BevVae vae = load_vae(vae_checkpoint, true, &vae_cfg);
  auto den = load_dit(dit_checkpoint);
  const auto batches = load_all(data);
  auto report = reconstruction_report(vae, batches, nullptr, cfg.perceptual_seed);

  const int64_t d = vae_cfg.latent_dim;
  const auto real = encode_means(vae, batches);
  std::vector<SceneSpec> scenes;
  for (const auto& b : batches) scenes.push_back(b.scene);
  const auto grids = occupancy_batch(scenes, den.config.bev, den.config.scenes.class_count);
  const auto generated = generate_latents(den.dit, den.stats, make_schedule(den.config.T), grids, cfg.sample_options(seed));
  const auto real_tokens = real.reshape({-1, d}).to(torch::kFloat64);
  report.fd_lite = fd_lite(generated.reshape({-1, d}), real_tokens);
  const int64_t half = real.size(0) / 2;
  report.fd_lite_baseline =
      half >= 1 ? fd_lite(real.slice(0, 0, half).reshape({-1, d}), real.slice(0, half).reshape({-1, d})) : 0.0;
  report.n_generated = generated.size(0);
  report.config_hash = cfg.hash();
  write_json(out / "report.json", report.to_json());
  return report;
}

}  // namespace bevlat
