#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "pcan/harness.hpp"
#include "pcan/model.hpp"

using namespace pcan;
using namespace pcan::harness;
namespace fs = std::filesystem;

namespace {

RunConfig micro_config() {
  RunConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.queries = 8;
  cfg.embed_dim = 8;
  cfg.mask_channels = 4;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.learning_rate = 1e-3;
  cfg.pam.k_neg = 3;
  cfg.pam.groups = 2;
  return cfg;
}

std::vector<synthdata::SceneRecord> micro_scenes(int n, uint64_t seed, const std::string& split,
                                                 int offset = 0) {
  synthdata::SceneConfig sc;
  sc.min_objects = 2;
  sc.max_objects = 3;
  return synthdata::generate_dataset(n, seed, sc, {}, split, offset);
}

double param_checksum(const nn::ParamStore& ps) {
  double acc = 0.0;
  for (const auto& [name, p] : ps.items())
    for (int64_t i = 0; i < p.value().size(); ++i) acc += p.value()[i] * double((i % 13) + 1);
  return acc;
}

}  // namespace

TEST_CASE("run config round-trips through its text form") {
  RunConfig cfg = micro_config();
  cfg.prior_source = "gt+conditional-random";
  cfg.loss.tau = 0.17;
  cfg.pam.k1 = 0.12;
  const RunConfig back = RunConfig::from_text(cfg.to_text(), /*apply_env=*/false);
  CHECK(back.to_text() == cfg.to_text());
  CHECK(back.hash() == cfg.hash());
  CHECK(back.loss.tau == 0.17);
  CHECK(back.pam.k1 == 0.12);
  // Different values change the hash.
  RunConfig other = cfg;
  other.epochs = 99;
  CHECK(other.hash() != cfg.hash());
}

TEST_CASE("config parser rejects unknown keys and accepts comments") {
  CHECK_THROWS(RunConfig::from_text("bogus_key = 1\n", false));
  const RunConfig cfg = RunConfig::from_text("# a comment\nepochs = 7  # trailing\n\n", false);
  CHECK(cfg.epochs == 7);
}

TEST_CASE("environment variables override config keys") {
  ::setenv("PCAN_EPOCHS", "5", 1);
  ::setenv("PCAN_PAM__K_NEG", "2", 1);
  const RunConfig cfg = RunConfig::from_text("epochs = 9\n", true);
  CHECK(cfg.epochs == 5);
  CHECK(cfg.pam.k_neg == 2);
  ::unsetenv("PCAN_EPOCHS");
  ::unsetenv("PCAN_PAM__K_NEG");
}

TEST_CASE("prior sources produce the advertised sample mixes") {
  const auto scenes = micro_scenes(6, 3, "train");
  RunConfig cfg = micro_config();
  for (const auto& scene : scenes) {
    Rng rng(7);
    cfg.prior_source = "gt+oracle+conditional";
    auto full = build_prior_groups(scene, cfg, rng);
    CHECK(int(full.groups.size()) == cfg.pam.groups);
    for (const auto& g : full.groups) CHECK(int(g.size()) == 1 + cfg.pam.k_neg);

    cfg.prior_source = "gt+conditional-random";
    auto cond = build_prior_groups(scene, cfg, rng);
    for (const auto& g : cond.groups)
      for (size_t i = 1; i < g.size(); ++i)
        CHECK(g[i].label == synthdata::PriorLabel::kNegativeSynthetic);

    cfg.prior_source = "gt+unconstrained-random";
    auto rnd = build_prior_groups(scene, cfg, rng);
    for (const auto& g : rnd.groups) CHECK(int(g.size()) == 1 + cfg.pam.k_neg);

    cfg.prior_source = "gt+oracle-detector";
    auto det = build_prior_groups(scene, cfg, rng);
    for (const auto& g : det.groups) {
      CHECK(int(g.size()) <= 1 + cfg.pam.k_neg);
      CHECK(g[0].label == synthdata::PriorLabel::kPositive);
      for (size_t i = 1; i < g.size(); ++i)
        CHECK(g[i].label == synthdata::PriorLabel::kNegativeDetected);
    }

    // use_pam=false forces unconstrained randoms regardless of prior_source.
    cfg.prior_source = "gt+oracle+conditional";
    cfg.use_pam = false;
    auto off = build_prior_groups(scene, cfg, rng);
    for (const auto& g : off.groups)
      for (size_t i = 1; i < g.size(); ++i)
        CHECK(g[i].label == synthdata::PriorLabel::kNegativeSynthetic);
    cfg.use_pam = true;
  }
}

TEST_CASE("checkpoint save/load round-trips bitwise and reproduces forwards") {
  const auto scenes = micro_scenes(2, 5, "train");
  RunConfig cfg = micro_config();
  model::PcanModel m(cfg.model_config());
  nn::AdamW opt(m.params(), 1e-3, 1e-4);

  // Take one optimizer step so the state is non-trivial.
  const auto fwd = m.trunk(scenes[0].image, scenes[0].height, scenes[0].width, scenes[0].token_ids);
  const auto preds = m.predict_matching(fwd);
  sum(preds.mask_logits).backward();
  opt.step();

  const auto before = m.predict_matching(
      m.trunk(scenes[1].image, scenes[1].height, scenes[1].width, scenes[1].token_ids));

  const std::string path = (fs::temp_directory_path() / "pcan_ckpt_test.bin").string();
  Checkpoint::capture(m.params(), &opt, 3, cfg.hash()).save(path);
  const Checkpoint loaded = Checkpoint::load(path);
  CHECK(loaded.epoch == 3);
  CHECK(loaded.config_hash == cfg.hash());

  model::PcanModel m2(cfg.model_config());
  nn::AdamW opt2(m2.params(), 1e-3, 1e-4);
  loaded.restore(m2.params(), &opt2);
  const auto after = m2.predict_matching(
      m2.trunk(scenes[1].image, scenes[1].height, scenes[1].width, scenes[1].token_ids));
  // Bitwise identical forward outputs.
  for (int64_t i = 0; i < before.mask_logits.value().size(); ++i)
    CHECK(before.mask_logits.value()[i] == after.mask_logits.value()[i]);
  for (int64_t i = 0; i < before.boxes.value().size(); ++i)
    CHECK(before.boxes.value()[i] == after.boxes.value()[i]);
  CHECK(opt2.raw_step() == opt.raw_step());
  fs::remove(path);

  // A mismatched architecture is rejected.
  RunConfig big = cfg;
  big.channels = 16;
  model::PcanModel m3(big.model_config());
  CHECK_THROWS(loaded.restore(m3.params(), nullptr));
  CHECK_THROWS(Checkpoint::load("/nonexistent/ckpt.bin"));
}

TEST_CASE("zero-epoch training keeps the initialization and still evaluates") {
  const auto train_scenes = micro_scenes(2, 11, "train");
  const auto val_scenes = micro_scenes(2, 12, "val", 100);
  RunConfig cfg = micro_config();
  cfg.epochs = 0;
  const auto res = train(cfg, train_scenes, val_scenes, false);
  CHECK(res.epoch_eval.size() == 1);
  CHECK(res.final_checkpoint.epoch == 0);
  // The checkpoint equals a fresh initialization.
  model::PcanModel fresh(cfg.model_config());
  size_t idx = 0;
  for (const auto& [name, p] : fresh.params().items()) {
    const auto& [ck_name, ck_val] = res.final_checkpoint.params[idx];
    CHECK(ck_name == name);
    for (int64_t i = 0; i < p.value().size(); ++i) CHECK(p.value()[i] == ck_val[i]);
    ++idx;
  }
}

TEST_CASE("training twice with the same config and seed gives identical history") {
  const auto train_scenes = micro_scenes(4, 13, "train");
  const auto val_scenes = micro_scenes(2, 14, "val", 100);
  RunConfig cfg = micro_config();
  cfg.epochs = 2;
  const auto a = train(cfg, train_scenes, val_scenes, false);
  const auto b = train(cfg, train_scenes, val_scenes, false);
  REQUIRE(a.epoch_train_loss.size() == b.epoch_train_loss.size());
  for (size_t i = 0; i < a.epoch_train_loss.size(); ++i)
    CHECK(a.epoch_train_loss[i] == b.epoch_train_loss[i]);
  for (size_t i = 0; i < a.epoch_eval.size(); ++i)
    CHECK(a.epoch_eval[i].to_json() == b.epoch_eval[i].to_json());
  CHECK(a.baseline_oiou == b.baseline_oiou);
}

TEST_CASE("training writes its declared outputs") {
  const auto train_scenes = micro_scenes(2, 15, "train");
  const auto val_scenes = micro_scenes(2, 16, "val", 100);
  RunConfig cfg = micro_config();
  cfg.out_dir = (fs::temp_directory_path() / "pcan_run_test").string();
  fs::remove_all(cfg.out_dir);
  const auto res = train(cfg, train_scenes, val_scenes, true);
  CHECK(fs::exists(cfg.out_dir + "/loss.csv"));
  CHECK(fs::exists(cfg.out_dir + "/metrics.json"));
  CHECK(fs::exists(cfg.out_dir + "/checkpoint.bin"));
  CHECK(fs::exists(cfg.out_dir + "/report.txt"));
  std::ifstream csv(cfg.out_dir + "/loss.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "step,l1,giou,dice,mask_focal,cls_focal,lm,lca,total");
  std::string row;
  CHECK(bool(std::getline(csv, row)));
  fs::remove_all(cfg.out_dir);
  (void)res;
}

TEST_CASE("a diverging run aborts naming the component and keeps the last good checkpoint") {
  const auto train_scenes = micro_scenes(4, 17, "train");
  const auto val_scenes = micro_scenes(2, 18, "val", 100);
  RunConfig cfg = micro_config();
  cfg.epochs = 4;
  cfg.learning_rate = 1e200;  // guaranteed numeric blow-up
  cfg.weight_decay = 0.0;
  const auto res = train(cfg, train_scenes, val_scenes, false);
  CHECK(res.aborted);
  CHECK(res.abort_reason.find("non-finite") != std::string::npos);
  // Last good state is an epoch boundary (possibly initialization).
  CHECK(res.final_checkpoint.params.size() > 0);
}

TEST_CASE("inference touches neither the oracle detector nor the position-aware sampler") {
  const auto scenes = micro_scenes(2, 19, "val", 100);
  RunConfig cfg = micro_config();
  model::PcanModel m(cfg.model_config());
  model::InferenceEngine engine(m);
  const int64_t pam_before = pam::pam_call_count();
  const int64_t det_before = synthdata::oracle_detect_call_count();
  const auto res = engine.infer(scenes[0].image, scenes[0].height, scenes[0].width,
                                scenes[0].token_ids);
  CHECK(pam::pam_call_count() == pam_before);
  CHECK(synthdata::oracle_detect_call_count() == det_before);
  // Output mask shape matches the input image.
  CHECK(res.mask.size() == size_t(scenes[0].height) * scenes[0].width);
  // Deterministic.
  const auto res2 = engine.infer(scenes[0].image, scenes[0].height, scenes[0].width,
                                 scenes[0].token_ids);
  CHECK(res.mask == res2.mask);
  CHECK(res.best_query == res2.best_query);
}

TEST_CASE("mask selection is invariant to strictly monotone transforms of class logits") {
  const auto scenes = micro_scenes(3, 25, "val", 100);
  RunConfig cfg = micro_config();
  model::PcanModel m(cfg.model_config());
  model::InferenceEngine engine(m);
  for (const auto& s : scenes) {
    const auto res = engine.infer(s.image, s.height, s.width, s.token_ids);
    const auto fwd = m.trunk(s.image, s.height, s.width, s.token_ids);
    const auto preds = m.predict_matching(fwd);
    // Selection equals argmax over raw class logits, and any strictly
    // monotone transform preserves that argmax.
    auto argmax_of = [&](const std::function<double(double)>& f) {
      int best = 0;
      for (int i = 1; i < preds.class_logits.value().rows(); ++i)
        if (f(preds.class_logits.value().at(i, 0)) > f(preds.class_logits.value().at(best, 0)))
          best = i;
      return best;
    };
    const int raw = argmax_of([](double x) { return x; });
    CHECK(res.best_query == raw);
    CHECK(argmax_of([](double x) { return 3.0 * x + 1.0; }) == raw);
    CHECK(argmax_of([](double x) { return std::tanh(x); }) == raw);
    CHECK(argmax_of([](double x) { return std::exp(x / 2.0); }) == raw);
  }
}

TEST_CASE("training adds no parameters over the inference path") {
  RunConfig cfg = micro_config();
  model::PcanModel m(cfg.model_config());
  const size_t params_at_init = m.params().count();
  const int64_t scalars_at_init = m.params().scalar_count();
  // Run both a matching pass (inference path) and a full contrastive pass.
  const auto scenes = micro_scenes(1, 20, "train");
  const auto fwd = m.trunk(scenes[0].image, scenes[0].height, scenes[0].width,
                           scenes[0].token_ids);
  (void)m.predict_matching(fwd);
  Rng rng(1);
  const auto groups = build_prior_groups(scenes[0], cfg, rng);
  (void)m.contrastive_group_embeddings(fwd, groups);
  CHECK(m.params().count() == params_at_init);
  CHECK(m.params().scalar_count() == scalars_at_init);
}

TEST_CASE("an optimizer step through the contrastive path changes the matching path") {
  const auto scenes = micro_scenes(1, 21, "train");
  RunConfig cfg = micro_config();
  model::PcanModel m(cfg.model_config());
  nn::AdamW opt(m.params(), 1e-3, 0.0);

  const auto& s = scenes[0];
  auto matching_out = [&]() {
    const auto fwd = m.trunk(s.image, s.height, s.width, s.token_ids);
    return m.predict_matching(fwd);
  };
  const auto before = matching_out();
  const double checksum_before = param_checksum(m.params());

  // Loss built only from the contrastive part's outputs.
  const auto fwd = m.trunk(s.image, s.height, s.width, s.token_ids);
  Rng rng(2);
  const auto groups = build_prior_groups(s, cfg, rng);
  const auto embs = m.contrastive_group_embeddings(fwd, groups);
  nn::Var loss = nn::constant_scalar(0.0);
  for (const auto& e : embs) loss = nn::add(loss, nn::mean(nn::mul(e, e)));
  opt.zero_grad();
  loss.backward();
  opt.step();

  CHECK(param_checksum(m.params()) != checksum_before);
  const auto after = matching_out();
  double diff = 0.0;
  for (int64_t i = 0; i < before.class_logits.value().size(); ++i)
    diff += std::fabs(before.class_logits.value()[i] - after.class_logits.value()[i]);
  CHECK(diff > 0.0);
}

TEST_CASE("the ablation axes emit the prescribed row sets with shared seeds") {
  const auto train_scenes = micro_scenes(3, 22, "train");
  const auto val_scenes = micro_scenes(2, 23, "val", 100);
  RunConfig cfg = micro_config();
  cfg.epochs = 1;

  const auto comp = ablate(cfg, "components", train_scenes, val_scenes);
  REQUIRE(comp.rows.size() == 5);
  CHECK(comp.rows[0].name == "baseline");
  CHECK(comp.rows[1].name == "clum w/o pam & cl");
  CHECK(comp.rows[2].name == "clum w/o pam");
  CHECK(comp.rows[3].name == "clum w/o cl");
  CHECK(comp.rows[4].name == "full");

  const auto kb = ablate(cfg, "k_boxes", train_scenes, val_scenes);
  REQUIRE(kb.rows.size() == 4);
  CHECK(kb.rows[0].name == "boxes=2");
  CHECK(kb.rows[3].name == "boxes=8");

  const auto gg = ablate(cfg, "g_groups", train_scenes, val_scenes);
  REQUIRE(gg.rows.size() == 4);
  CHECK(gg.rows[0].name == "groups=1");
  CHECK(gg.rows[3].name == "groups=4");

  CHECK_THROWS(ablate(cfg, "nonsense", train_scenes, val_scenes));

  // JSON round trip of the report format.
  const std::string j = comp.to_json();
  const auto back = AblationTable::from_json(j);
  CHECK(back.to_json() == j);
  // The text table carries the Table-2-shaped columns.
  const std::string t = comp.to_table();
  CHECK(t.find("Pr@0.5") != std::string::npos);
  CHECK(t.find("oIoU") != std::string::npos);
}

TEST_CASE("baseline heuristic and overlays behave") {
  const auto scenes = micro_scenes(4, 24, "val", 100);
  const double base = largest_object_baseline(scenes);
  CHECK(base >= 0.0);
  CHECK(base <= 1.0);

  const std::string png = (fs::temp_directory_path() / "pcan_overlay_test.png").string();
  std::vector<uint8_t> mask(size_t(scenes[0].height) * scenes[0].width, 0);
  for (size_t i = 0; i < mask.size() / 2; ++i) mask[i] = 1;
  write_overlay_png(png, scenes[0], mask);
  std::ifstream f(png, std::ios::binary);
  REQUIRE(bool(f));
  char magic[8];
  f.read(magic, 8);
  CHECK(uint8_t(magic[0]) == 0x89);
  CHECK(magic[1] == 'P');
  fs::remove(png);

  RunConfig cfg = micro_config();
  Rng rng(3);
  const auto groups = build_prior_groups(scenes[0], cfg, rng);
  const std::string png2 = (fs::temp_directory_path() / "pcan_groups_test.png").string();
  write_group_overlay_png(png2, scenes[0], groups);
  CHECK(fs::exists(png2));
  fs::remove(png2);
}
