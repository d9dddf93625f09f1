// Command-line front end: corpus generation, training, evaluation,
// prediction and the ablation sweep. Errors leave as JSON on stderr with a
// nonzero exit code.

#include <exception>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "oscount/datagen.hpp"
#include "oscount/harness.hpp"

using namespace oscount;
using json = nlohmann::json;

namespace {

struct CommonOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool no_self_attn_x = false, no_self_attn_s = false, no_scale_agg = false, no_ssim = false;
};

void add_config_flags(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "JSON config file overriding model defaults");
  cmd->add_option("--seed", opts.seed, "Run seed")->each([&](const std::string&) {
    opts.seed_set = true;
  });
  cmd->add_flag("--no-self-attn-x", opts.no_self_attn_x, "Disable query self-attention");
  cmd->add_flag("--no-self-attn-s", opts.no_self_attn_s, "Disable support self-attention");
  cmd->add_flag("--no-scale-agg", opts.no_scale_agg, "Disable scale aggregation (delta=1)");
  cmd->add_flag("--no-ssim", opts.no_ssim, "Disable the SSIM loss term (lambda=0)");
}

ModelConfig resolve_config(const CommonOpts& opts) {
  ModelConfig cfg;
  if (!opts.config_path.empty()) cfg = config_from_json_file(opts.config_path, cfg);
  if (opts.seed_set) cfg.seed = opts.seed;
  if (opts.no_self_attn_x) cfg.self_attn_x = false;
  if (opts.no_self_attn_s) cfg.self_attn_s = false;
  if (opts.no_scale_agg) cfg.scale_agg = false;
  if (opts.no_ssim) cfg.ssim = false;
  return cfg;
}

SupportBox parse_box(const std::string& text) {
  std::istringstream ss(text);
  SupportBox box;
  char c1, c2, c3;
  if (!(ss >> box.x0 >> c1 >> box.y0 >> c2 >> box.x1 >> c3 >> box.y1) || c1 != ',' || c2 != ',' ||
      c3 != ',')
    throw std::runtime_error("box must be x0,y0,x1,y1 (got \"" + text + "\")");
  return box;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"One-shot object counter: synthetic corpus, training, evaluation"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string out_dir = "out";
  std::string corpus_dir = "corpus";
  std::string split = "test";
  std::string checkpoint_path, image_path, box_text;
  int gen_train = 500, gen_val = 100, gen_test = 100, image_size = 64;

  auto* gen = app.add_subcommand("gen", "Generate the synthetic counting corpus");
  gen->add_option("--out-dir", out_dir, "Corpus output directory")->required();
  gen->add_option("--seed", opts.seed, "Corpus seed")->each([&](const std::string&) {
    opts.seed_set = true;
  });
  gen->add_option("--train", gen_train, "Train split size");
  gen->add_option("--val", gen_val, "Val split size");
  gen->add_option("--test", gen_test, "Test split size");
  gen->add_option("--size", image_size, "Image side length");

  auto* tr = app.add_subcommand("train", "Train a model on a corpus");
  tr->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  tr->add_option("--out-dir", out_dir, "Run output directory")->required();
  add_config_flags(tr, opts);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  ev->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  ev->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  ev->add_option("--split", split, "Split name");

  auto* pr = app.add_subcommand("predict", "Count objects in one image");
  pr->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  pr->add_option("--image", image_path, "Image tensor (.tnsr, 3xHxW)")->required();
  pr->add_option("--box", box_text, "Support box x0,y0,x1,y1")->required();
  pr->add_option("--out-dir", out_dir, "Where to dump density maps");

  auto* ab = app.add_subcommand("ablate", "Train and score all ablation arms");
  ab->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  ab->add_option("--out-dir", out_dir, "Run output directory")->required();
  add_config_flags(ab, opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << json{{"error", e.what()}}.dump() << "\n";
    return e.get_exit_code();
  }

  try {
    if (gen->parsed()) {
      CorpusSpec spec;
      if (opts.seed_set) spec.seed = opts.seed;
      spec.image_size = image_size;
      spec.splits[0].count = gen_train;
      spec.splits[1].count = gen_val;
      spec.splits[2].count = gen_test;
      const Manifest m = build_corpus(spec, out_dir);
      int total = 0;
      for (const auto& [name, ids] : m.ids) total += static_cast<int>(ids.size());
      std::cout << "corpus: " << total << " samples under " << out_dir << "\n";
    } else if (tr->parsed()) {
      const ModelConfig cfg = resolve_config(opts);
      const TrainResult r = train(cfg, corpus_dir, out_dir);
      std::cout << "best checkpoint: " << r.checkpoint_path << " (epoch " << r.best.epoch
                << ", val MAE " << r.best.best_val_mae << ")\n";
      std::cout << "log: " << r.log_path << "\n";
    } else if (ev->parsed()) {
      const Metrics m = evaluate(checkpoint_path, corpus_dir, split);
      std::cout << "split " << split << ": MAE " << m.mae << "  RMSE " << m.rmse << "  ("
                << m.per_sample.size() << " samples)\n";
    } else if (pr->parsed()) {
      const PredictResult r = predict(checkpoint_path, image_path, parse_box(box_text), out_dir);
      std::cout << "count: " << r.count << "\n";
      std::cout << "density: " << r.density_tnsr << " " << r.density_pgm << "\n";
    } else if (ab->parsed()) {
      const std::vector<AblationArm> arms = ablate(resolve_config(opts), corpus_dir, out_dir);
      std::cout << ablation_table(arms);
    }
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
