#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "pcan/harness.hpp"
#include "pcan/imageio.hpp"
#include "pcan/model.hpp"
#include "pcan/synthdata.hpp"

namespace fs = std::filesystem;
using namespace pcan;

namespace {

harness::RunConfig load_config(const std::string& path) {
  if (path.empty()) return harness::RunConfig::from_text("", /*apply_env=*/true);
  return harness::RunConfig::load(path);
}

synthdata::SceneRecord pick_scene(const std::string& data_dir, const std::string& split,
                                  int scene_id) {
  const auto scenes = synthdata::load_split(data_dir, split);
  for (const auto& s : scenes)
    if (s.id == scene_id) return s;
  throw std::runtime_error("no scene with id " + std::to_string(scene_id) + " in split " + split);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PCAN: position-aware contrastive alignment for referring segmentation, desk scale"};
  app.require_subcommand(1);

  // ---- synth generate ----
  auto* synth = app.add_subcommand("synth", "synthetic dataset tools");
  synth->require_subcommand(1);
  auto* gen = synth->add_subcommand("generate", "generate train/val scene splits");
  int gen_n = 200, gen_n_val = -1;
  uint64_t gen_seed = 0;
  std::string gen_out = "data";
  synthdata::SceneConfig scene_cfg;
  gen->add_option("--n", gen_n, "training scenes")->check(CLI::PositiveNumber);
  gen->add_option("--n-val", gen_n_val, "validation scenes (default n/4)");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--height", scene_cfg.height);
  gen->add_option("--width", scene_cfg.width);
  gen->add_option("--min-objects", scene_cfg.min_objects);
  gen->add_option("--max-objects", scene_cfg.max_objects);

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_config, tr_data, tr_out;
  tr->add_option("--config", tr_config, "run configuration file");
  tr->add_option("--data", tr_data, "override data_dir");
  tr->add_option("--out", tr_out, "override out_dir");

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_config, ev_ckpt, ev_data, ev_split = "val", ev_out;
  ev->add_option("--config", ev_config, "run configuration file");
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "override data_dir");
  ev->add_option("--split", ev_split, "dataset split");
  ev->add_option("--out", ev_out, "write the JSON report here");

  // ---- ablate ----
  auto* ab = app.add_subcommand("ablate", "run an ablation axis");
  std::string ab_config, ab_axis, ab_out, ab_data;
  ab->add_option("--config", ab_config, "run configuration file");
  ab->add_option("--axis", ab_axis, "components | prior_type | k_boxes | g_groups")->required();
  ab->add_option("--data", ab_data, "override data_dir");
  ab->add_option("--out", ab_out, "write the JSON table here");

  // ---- infer ----
  auto* in = app.add_subcommand("infer", "run inference on one scene");
  std::string in_config, in_ckpt, in_data, in_split = "val", in_out = "overlays";
  int in_scene = 0;
  in->add_option("--config", in_config, "run configuration file");
  in->add_option("--checkpoint", in_ckpt, "checkpoint file")->required();
  in->add_option("--data", in_data, "override data_dir");
  in->add_option("--split", in_split, "dataset split");
  in->add_option("--scene-id", in_scene, "scene id")->required();
  in->add_option("--out", in_out, "overlay output directory");

  // ---- pam inspect ----
  auto* pm = app.add_subcommand("pam", "position-aware module tools");
  pm->require_subcommand(1);
  auto* pi = pm->add_subcommand("inspect", "render contrastive groups for one scene");
  std::string pi_config, pi_data, pi_split = "train", pi_out = "pam_groups.png";
  int pi_scene = 0;
  uint64_t pi_seed = 0;
  pi->add_option("--config", pi_config, "run configuration file");
  pi->add_option("--data", pi_data, "data directory")->required();
  pi->add_option("--split", pi_split, "dataset split");
  pi->add_option("--scene-id", pi_scene, "scene id")->required();
  pi->add_option("--seed", pi_seed, "sampling seed");
  pi->add_option("--out", pi_out, "output PNG path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      if (gen_n_val < 0) gen_n_val = std::max(1, gen_n / 4);
      synthdata::DetectorNoiseConfig noise;
      const auto train = synthdata::generate_dataset(gen_n, gen_seed, scene_cfg, noise, "train", 0);
      const auto val =
          synthdata::generate_dataset(gen_n_val, gen_seed, scene_cfg, noise, "val", gen_n);
      synthdata::save_split(gen_out, "train", train);
      synthdata::save_split(gen_out, "val", val);
      std::printf("wrote %d train and %d val scenes to %s\n", gen_n, gen_n_val, gen_out.c_str());
    } else if (tr->parsed()) {
      auto cfg = load_config(tr_config);
      if (!tr_data.empty()) cfg.data_dir = tr_data;
      if (!tr_out.empty()) cfg.out_dir = tr_out;
      const auto result = harness::train(cfg);
      if (result.aborted) {
        std::printf("training aborted: %s\nlast good checkpoint kept at %s/checkpoint.bin\n",
                    result.abort_reason.c_str(), cfg.out_dir.c_str());
        return 2;
      }
      std::printf("baseline oIoU %.4f\n%s", result.baseline_oiou,
                  result.final_eval().to_table().c_str());
      std::printf("outputs in %s\n", cfg.out_dir.c_str());
    } else if (ev->parsed()) {
      auto cfg = load_config(ev_config);
      if (!ev_data.empty()) cfg.data_dir = ev_data;
      const auto model = harness::load_model(cfg, ev_ckpt);
      const auto scenes = synthdata::load_split(cfg.data_dir, ev_split);
      const auto report = harness::evaluate_model(model, scenes);
      std::printf("%s", report.to_table().c_str());
      if (!ev_out.empty()) {
        std::ofstream f(ev_out);
        f << report.to_json() << "\n";
      }
    } else if (ab->parsed()) {
      auto cfg = load_config(ab_config);
      if (!ab_data.empty()) cfg.data_dir = ab_data;
      const auto train_scenes = synthdata::load_split(cfg.data_dir, "train");
      const auto val_scenes = synthdata::load_split(cfg.data_dir, "val");
      const auto table = harness::ablate(cfg, ab_axis, train_scenes, val_scenes);
      std::printf("%s", table.to_table().c_str());
      if (!ab_out.empty()) {
        std::ofstream f(ab_out);
        f << table.to_json() << "\n";
      }
    } else if (in->parsed()) {
      auto cfg = load_config(in_config);
      if (!in_data.empty()) cfg.data_dir = in_data;
      const auto model = harness::load_model(cfg, in_ckpt);
      const auto scene = pick_scene(cfg.data_dir, in_split, in_scene);
      model::InferenceEngine engine(model);
      const auto res = engine.infer(scene.image, scene.height, scene.width, scene.token_ids);
      fs::create_directories(in_out);
      char name[64];
      std::snprintf(name, sizeof name, "scene_%06d.png", in_scene);
      harness::write_overlay_png(in_out + "/" + name, scene, res.mask);
      std::printf("query %d (score %.3f), overlay at %s/%s\n", res.best_query, res.score,
                  in_out.c_str(), name);
    } else if (pi->parsed()) {
      auto cfg = load_config(pi_config);
      const auto scene = pick_scene(pi_data, pi_split, pi_scene);
      Rng rng(pi_seed);
      const auto groups = harness::build_prior_groups(scene, cfg, rng);
      harness::write_group_overlay_png(pi_out, scene, groups);
      std::printf("wrote %s (%d groups x %d samples)\n", pi_out.c_str(), int(groups.groups.size()),
                  groups.group_size());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
