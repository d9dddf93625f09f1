#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "model_audit.hpp"
#include "oscount/harness.hpp"
#include "oscount/reference.hpp"
#include "oscount/tensor_io.hpp"
#include "test_util.hpp"

using namespace oscount;

namespace {

std::string temp_dir(const std::string& name) {
  const std::string dir = std::filesystem::temp_directory_path().string() + "/oscount_" + name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Desk-size model/corpus pair small enough for sub-second epochs.
ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.cycles = 1;
  cfg.delta = 2;
  cfg.backbone_channels = {4, 6};
  cfg.support_resize = 8;
  cfg.ssim_window = 5;
  cfg.ssim_sigma = 1.0;
  cfg.gt_sigma = 1.0;
  cfg.epochs = 6;
  cfg.lr = 5e-4;
  cfg.seed = 3;
  return cfg;
}

CorpusSpec tiny_corpus_spec() {
  CorpusSpec spec;
  spec.splits[0] = {"train", 8, {"square", "circle"}};
  spec.splits[1] = {"val", 3, {"star"}};
  spec.splits[2] = {"test", 3, {"cross"}};
  spec.image_size = 16;
  spec.seed = 5;
  spec.scene.count_min = 1;
  spec.scene.count_max = 3;
  spec.scene.base_size = 2.0;
  spec.scene.size_jitter_min = 0.75;
  spec.scene.size_jitter_max = 1.25;
  spec.scene.distractor_min = 0;
  spec.scene.distractor_max = 1;
  spec.scene.noise = 0.01;
  return spec;
}

const std::string& tiny_corpus() {
  static const std::string dir = [] {
    const std::string d = temp_dir("harness_corpus");
    build_corpus(tiny_corpus_spec(), d);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("compute_metrics: hand-computed MAE and RMSE") {
  const Metrics m = compute_metrics({{1.0, 3.0}, {2.0, 5.0}});
  CHECK(m.mae == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(m.rmse == doctest::Approx(std::sqrt(6.5)).epsilon(1e-12));
  const Metrics perfect = compute_metrics({{4.0, 4.0}, {7.0, 7.0}});
  CHECK(perfect.mae == 0.0);
  CHECK(perfect.rmse == 0.0);
  CHECK_THROWS_AS(compute_metrics({}), std::invalid_argument);
}

TEST_CASE("compute_metrics: matches the two-pass oracle; rmse >= mae") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::pair<double, double>> pairs;
    for (int i = 0; i < 50; ++i) pairs.emplace_back(rng.uniform(0.0, 20.0), rng.uniform(0.0, 20.0));
    const Metrics m = compute_metrics(pairs);
    double mae = 0.0, rmse = 0.0;
    reference::mae_rmse(pairs, &mae, &rmse);
    CHECK(std::abs(m.mae - mae) < 1e-9);
    CHECK(std::abs(m.rmse - rmse) < 1e-9);
    CHECK(m.rmse >= m.mae);
  }
}

TEST_CASE("config: json round-trip, unknown keys, stable hash") {
  ModelConfig cfg = tiny_config();
  const std::string js = config_to_json(cfg);
  const ModelConfig back = config_from_json(js);
  CHECK(config_to_json(back) == js);
  CHECK(config_hash(back) == config_hash(cfg));
  ModelConfig other = cfg;
  other.lr = 1e-3;
  CHECK(config_hash(other) != config_hash(cfg));
  CHECK_THROWS_WITH_AS(config_from_json("{\"bogus\": 1}"), doctest::Contains("bogus"),
                       std::runtime_error);
  const ModelConfig partial = config_from_json("{\"d\": 16}");
  CHECK(partial.d == 16);
  CHECK(partial.heads == 4);
}

TEST_CASE("train: lr=0 leaves parameters bit-identical to the initialization") {
  ModelConfig cfg = tiny_config();
  cfg.lr = 0.0;
  cfg.epochs = 1;
  const std::string out = temp_dir("harness_lr0");
  const TrainResult r = train(cfg, tiny_corpus(), out);
  CountingModel<float> fresh(cfg);
  for (const auto& [name, p] : fresh.params()) {
    const auto& trained = r.best.params.at(name);
    for (std::int64_t i = 0; i < p.size(); ++i) CHECK(trained.data()[i] == p.data()[i]);
  }
}

TEST_CASE("train: loss falls on the tiny corpus and the CSV log is written") {
  const ModelConfig cfg = tiny_config();
  const std::string out = temp_dir("harness_train");
  const TrainResult r = train(cfg, tiny_corpus(), out);
  REQUIRE(r.log.size() == 6);
  CHECK(r.log.back().train_loss < r.log.front().train_loss);
  CHECK(std::filesystem::exists(r.checkpoint_path));
  std::ifstream log(r.log_path);
  std::string header;
  std::getline(log, header);
  CHECK(header == "epoch,train_loss,val_mae,val_rmse");
  int rows = 0;
  for (std::string line; std::getline(log, line);)
    if (!line.empty()) ++rows;
  CHECK(rows == 6);
}

TEST_CASE("train: two runs with one seed give identical checkpoints and metrics") {
  const ModelConfig cfg = tiny_config();
  const std::string out1 = temp_dir("harness_det1");
  const std::string out2 = temp_dir("harness_det2");
  const TrainResult r1 = train(cfg, tiny_corpus(), out1);
  const TrainResult r2 = train(cfg, tiny_corpus(), out2);
  CHECK(file_hash(r1.checkpoint_path) == file_hash(r2.checkpoint_path));
  const Metrics m1 = evaluate(r1.checkpoint_path, tiny_corpus(), "test");
  const Metrics m2 = evaluate(r2.checkpoint_path, tiny_corpus(), "test");
  CHECK(m1.mae == m2.mae);
  CHECK(m1.rmse == m2.rmse);
}

TEST_CASE("checkpoint: save -> load -> save is byte-identical") {
  const ModelConfig cfg = tiny_config();
  const std::string out = temp_dir("harness_ck");
  CountingModel<float> model(cfg);
  Checkpoint ck;
  ck.config_json = config_to_json(cfg);
  ck.epoch = 3;
  ck.adam_steps = 17;
  ck.best_val_mae = 1.25;
  for (const auto& [name, p] : model.params()) {
    ck.params.emplace(name, p.clone_detached());
    ck.adam_m.emplace(name, Tensor<float>::zeros({static_cast<int>(p.size())}));
    ck.adam_v.emplace(name, Tensor<float>::zeros({static_cast<int>(p.size())}));
  }
  const std::string p1 = out + "/a.bin", p2 = out + "/b.bin";
  save_checkpoint(ck, p1);
  save_checkpoint(load_checkpoint(p1), p2);
  CHECK(read_file_bytes(p1) == read_file_bytes(p2));
  CHECK(file_hash(p1) == file_hash(p2));
}

TEST_CASE("checkpoint: load rejects mismatched parameter sets") {
  const ModelConfig cfg = tiny_config();
  CountingModel<float> model(cfg);
  std::map<std::string, Tensor<float>> bad;
  CHECK_THROWS_WITH_AS(model.load_state(bad), doctest::Contains("missing"), std::runtime_error);
}

TEST_CASE("predict: zeroed final layer counts zero; repeated runs are identical") {
  const ModelConfig cfg = tiny_config();
  const std::string out = temp_dir("harness_predict");
  CountingModel<float> model(cfg);
  Checkpoint ck;
  ck.config_json = config_to_json(cfg);
  for (const auto& [name, p] : model.params()) {
    Tensor<float> t = p.clone_detached();
    if (name == "reg.c3.kern" || name == "reg.c3.bias")
      std::fill(t.data().begin(), t.data().end(), 0.0f);
    ck.params.emplace(name, t);
    ck.adam_m.emplace(name, Tensor<float>::zeros({static_cast<int>(p.size())}));
    ck.adam_v.emplace(name, Tensor<float>::zeros({static_cast<int>(p.size())}));
  }
  save_checkpoint(ck, out + "/zero.bin");

  const Manifest manifest = read_manifest(tiny_corpus());
  const CountingSample s = read_sample(sample_stem(tiny_corpus(), manifest.ids.at("test")[0]));
  write_tensor(s.image, out + "/img.tnsr");
  const PredictResult r1 = predict(out + "/zero.bin", out + "/img.tnsr", s.box, out);
  CHECK(r1.count == 0.0);
  const std::uint64_t h1 = file_hash(r1.density_tnsr);
  const PredictResult r2 = predict(out + "/zero.bin", out + "/img.tnsr", s.box, out);
  CHECK(r2.count == r1.count);
  CHECK(file_hash(r2.density_tnsr) == h1);
  CHECK(std::filesystem::exists(r1.density_pgm));
}

TEST_CASE("training step: every enabled block's parameters receive gradient") {
  const Manifest manifest = read_manifest(tiny_corpus());
  const CountingSample s = read_sample(sample_stem(tiny_corpus(), manifest.ids.at("train")[0]));
  auto grads_nonzero = [&](const ModelConfig& cfg, const std::string& prefix, bool expect_live) {
    CountingModel<float> model(cfg);
    model.zero_grads();
    Tape<float> tape;
    {
      TapeScope<float> scope(tape);
      backward(tape, sample_loss(model, s.image, s.box, s.points));
    }
    for (const auto& [name, p] : model.params()) {
      if (name.rfind(prefix, 0) != 0) continue;
      float peak = 0.0f;
      for (auto g : p.grad()) peak = std::max(peak, std::abs(g));
      if (expect_live)
        CHECK_MESSAGE(peak > 0.0f, name, " has an all-zero gradient");
      else
        CHECK_MESSAGE(peak == 0.0f, name, " unexpectedly received gradient while ablated");
    }
  };
  const ModelConfig cfg = tiny_config();
  for (const char* prefix : {"backbone.", "corr.", "reg."}) grads_nonzero(cfg, prefix, true);

  ModelConfig no_sax = cfg;
  no_sax.self_attn_x = false;
  grads_nonzero(no_sax, "corr.t0.sa_x", false);
  grads_nonzero(no_sax, "corr.t0.sa_s", true);
  ModelConfig no_agg = cfg;
  no_agg.scale_agg = false;
  grads_nonzero(no_agg, "backbone.proj1", false);  // level-1 projection idles at delta=1
  grads_nonzero(no_agg, "backbone.proj2", true);
}

TEST_CASE("model gradient audit: tiny full model passes at 64-bit") {
  ModelConfig cfg;
  cfg.d = 4;
  cfg.heads = 2;
  cfg.cycles = 1;
  cfg.delta = 2;
  cfg.backbone_channels = {2, 3};
  cfg.support_resize = 8;
  cfg.ssim_window = 3;
  cfg.ssim_sigma = 1.0;
  cfg.gt_sigma = 1.0;
  cfg.seed = 11;
  CountingModel<double> model(cfg);
  Rng rng(13);
  auto image = testutil::rand_tensor<double>({3, 8, 8}, rng, 0.05, 0.95);
  const SupportBox box{2, 2, 6, 6};
  const std::vector<std::array<double, 2>> points{{3.0, 3.0}, {6.0, 5.0}};
  std::int64_t coords = 0;
  const double err = testutil::audit_model_gradients(model, image, box, points, 1e-4, &coords);
  CHECK(coords == model.param_count());
  CHECK(err < 1e-3);
}

TEST_CASE("train: a non-finite loss aborts with a diagnostic") {
  // gt_sigma=0 collapses every ground-truth kernel to mass 0, so the
  // renormalization emits NaN and the first loss is non-finite.
  ModelConfig cfg = tiny_config();
  cfg.gt_sigma = 0.0;
  cfg.epochs = 2;
  const std::string out = temp_dir("harness_nan");
  CHECK_THROWS_WITH_AS(train(cfg, tiny_corpus(), out), doctest::Contains("non-finite"),
                       std::runtime_error);
  CHECK(std::filesystem::exists(out + "/abort_diagnostic.json"));
}

#ifdef CLI_PATH
TEST_CASE("cli: gen succeeds; errors leave as JSON with nonzero exit") {
  const std::string out = temp_dir("harness_cli");
  const std::string gen_cmd = std::string(CLI_PATH) + " gen --out-dir " + out +
                              "/corpus --train 2 --val 1 --test 1 --seed 9 > " + out +
                              "/gen.log 2>&1";
  CHECK(std::system(gen_cmd.c_str()) == 0);
  CHECK(std::filesystem::exists(out + "/corpus/manifest.json"));

  const std::string bad_cmd = std::string(CLI_PATH) + " eval --checkpoint " + out +
                              "/nope.bin --corpus " + out + "/corpus 2> " + out + "/err.json";
  CHECK(std::system(bad_cmd.c_str()) != 0);
  const std::string err = read_file_bytes(out + "/err.json");
  CHECK(err.find("\"error\"") != std::string::npos);
}
#endif
