// bevlat command line: data generation, two-stage training, reconstruction,
// novel views, layout-conditioned generation and evaluation.

#include "bevlat/config.hpp"
#include "bevlat/error.hpp"
#include "bevlat/orchestrator.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace bevlat;

namespace {

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == item.size(), "cannot parse number '" + item + "'");
    out.push_back(v);
  }
  return out;
}

Json parse_edits_arg(const std::string& arg) {
  std::string text = arg;
  if (!arg.empty() && arg[0] == '@') {
    std::ifstream in(arg.substr(1));
    require(in.good(), "cannot open edits file " + arg.substr(1));
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("edits are not valid JSON: ") + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bevlat: multi-view BEV latent autoencoder and layout-conditioned latent diffusion"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", data_dir, vae_ckpt, dit_ckpt, yaws_arg = "-15,-10,-5,0,5,10,15",
                           scenes_arg = "0", edits_arg, sampler;
  int64_t seed = -1;
  int steps = -1, limit = 0, scene = 0, sample_steps = -1;
  double scale = -1;
  bool sweep = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "flat JSON run configuration (defaults: desk scale)");
    sub->add_option("--seed", seed, "seed (training init / sampling)");
    sub->add_option("--out", out_dir, "output directory");
  };
  auto* gen = app.add_subcommand("gen-data", "render the synthetic train and held-out datasets");
  auto* tvae = app.add_subcommand("train-vae", "stage 1: train the BEV VAE");
  auto* tdit = app.add_subcommand("train-dit", "stage 2: train the latent denoiser");
  auto* rec = app.add_subcommand("reconstruct", "reconstruct scenes through the BEV latent");
  auto* nvs = app.add_subcommand("nvs", "decode with rotated camera rigs");
  auto* genr = app.add_subcommand("generate", "sample scenes from a box layout, optionally edited");
  auto* ev = app.add_subcommand("eval", "reconstruction and generation metrics");
  for (auto* s : {gen, tvae, tdit, rec, nvs, genr, ev}) common(s);
  for (auto* s : {tvae, tdit, rec, nvs, genr, ev})
    s->add_option("--data", data_dir, "dataset directory (scenes.jsonl)")->required();
  for (auto* s : {tdit, rec, nvs, genr, ev}) s->add_option("--vae", vae_ckpt, "stage-1 checkpoint")->required();
  for (auto* s : {genr, ev}) s->add_option("--dit", dit_ckpt, "stage-2 checkpoint")->required();
  tvae->add_option("--steps", steps, "override s1_steps");
  tdit->add_option("--steps", steps, "override s2_steps");
  rec->add_option("--limit", limit, "only the first n scenes");
  nvs->add_option("--yaws", yaws_arg, "comma-separated yaw angles in degrees");
  nvs->add_option("--scenes", scenes_arg, "comma-separated scene indices");
  genr->add_option("--scene", scene, "scene whose layout and rig are used");
  genr->add_option("--edits", edits_arg, "JSON edit list, or @file");
  genr->add_option("--scale", scale, "guidance scale");
  genr->add_flag("--sweep", sweep, "guidance scales 0,1,2,3,4,5");
  for (auto* s : {genr, ev}) {
    s->add_option("--steps", sample_steps, "sampling steps (<= T)");
    s->add_option("--sampler", sampler, "ddpm or ddim")->check(CLI::IsMember({"ddpm", "ddim"}));
  }

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
    if (sample_steps >= 0) cfg.sample_steps = sample_steps;
    if (!sampler.empty()) cfg.sampler = sampler;
    if (scale >= 0) cfg.scale = scale;
    if (steps >= 0) (tvae->parsed() ? cfg.stage1 : cfg.stage2).steps = steps;
    for (auto* o : {&cfg.stage1, &cfg.stage2}) o->warmup = std::min(o->warmup, o->steps);
    cfg.validate();
    at::set_num_threads(cfg.threads);
    const fs::path out(out_dir);
    Json summary;

    if (gen->parsed()) {
      auto r = gen_data_cmd(cfg, out);
      summary = {{"train", r.train.string()}, {"heldout", r.heldout.string()}};
    } else if (tvae->parsed()) {
      auto r = train_stage1(cfg, Dataset(data_dir), out);
      summary = {{"checkpoint", r.checkpoint.string()},
                 {"steps", r.reconstruction_loss.size()},
                 {"final_L_R", r.reconstruction_loss.empty() ? 0.0 : r.reconstruction_loss.back()},
                 {"seconds", r.seconds}};
    } else if (tdit->parsed()) {
      auto r = train_stage2(cfg, Dataset(data_dir), vae_ckpt, out);
      summary = {{"checkpoint", r.checkpoint.string()},
                 {"steps", r.loss.size()},
                 {"final_loss", r.loss.empty() ? 0.0 : r.loss.back()},
                 {"seconds", r.seconds}};
    } else if (rec->parsed()) {
      summary = reconstruct_cmd(cfg, vae_ckpt, data_dir, out, limit).report.to_json();
    } else if (nvs->parsed()) {
      std::vector<int> scenes;
      for (double s : parse_list(scenes_arg)) scenes.push_back(static_cast<int>(s));
      auto r = nvs_cmd(cfg, vae_ckpt, data_dir, parse_list(yaws_arg), scenes, out);
      summary = {{"yaws", r.yaws}, {"scenes", scenes}, {"out", out.string()}};
    } else if (genr->parsed()) {
      GenerateOptions o;
      o.scene = scene;
      o.seed = cfg.seed;
      if (!edits_arg.empty()) o.edits = parse_edits(parse_edits_arg(edits_arg));
      if (sweep) o.scales = {0, 1, 2, 3, 4, 5};
      auto r = generate_cmd(cfg, vae_ckpt, dit_ckpt, data_dir, o, out);
      summary = Json::array();
      for (const auto& g : r.outputs) {
        Json e = {{"scale", g.scale}};
        if (!r.removed_boxes.empty()) {
          e["change_inside"] = g.change_inside;
          e["change_outside"] = g.change_outside;
        }
        summary.push_back(e);
      }
    } else if (ev->parsed()) {
      summary = eval_cmd(cfg, vae_ckpt, dit_ckpt, data_dir, out, cfg.seed).to_json();
    }
    std::cout << summary.dump(2) << std::endl;
  } catch (const std::exception& e) {
    std::cerr << "bevlat: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
