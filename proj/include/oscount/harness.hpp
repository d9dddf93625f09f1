#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "oscount/datagen.hpp"
#include "oscount/model.hpp"

namespace oscount {

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  std::vector<std::pair<double, double>> per_sample;  // (gt_count, pred_count)
};

/// MAE = mean |gt - pred|, RMSE = sqrt(mean (gt - pred)^2).
Metrics compute_metrics(const std::vector<std::pair<double, double>>& per_sample);

/// Everything needed to resume or evaluate a run. Saving, loading and saving
/// again is byte-identical (maps keep names sorted).
struct Checkpoint {
  std::map<std::string, Tensor<float>> params;
  std::map<std::string, Tensor<float>> adam_m, adam_v;
  std::uint32_t epoch = 0;
  std::uint64_t adam_steps = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
  std::string config_json;

  std::uint64_t config_hash() const;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::uint64_t fnv1a64(const void* data, std::size_t size);
std::uint64_t file_hash(const std::string& path);

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& json_text, ModelConfig base = {});
ModelConfig config_from_json_file(const std::string& path, ModelConfig base = {});
std::uint64_t config_hash(const ModelConfig& cfg);

struct EpochLog {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_mae = 0.0;
  double val_rmse = 0.0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> log;
  std::string checkpoint_path;
  std::string log_path;
};

/// Batch-size-1 training with augmentation and Adam; logs one CSV row per
/// epoch (epoch, train_loss, val_mae, val_rmse) and keeps the checkpoint
/// with the best validation MAE. A non-finite loss aborts the run, leaving
/// the last good checkpoint on disk plus a diagnostic JSON.
TrainResult train(const ModelConfig& cfg, const std::string& corpus_dir,
                  const std::string& out_dir);

Metrics evaluate_model(const CountingModel<float>& model,
                       const std::vector<CountingSample>& samples);

/// Loads a checkpoint (the config travels inside it) and scores a split.
Metrics evaluate(const std::string& checkpoint_path, const std::string& corpus_dir,
                 const std::string& split);

struct PredictResult {
  double count = 0.0;
  std::string density_tnsr;
  std::string density_pgm;
};

/// Runs one image + box through a checkpointed model; dumps the density map
/// as TNSR and PGM next to `out_dir`.
PredictResult predict(const std::string& checkpoint_path, const std::string& image_path,
                      const SupportBox& box, const std::string& out_dir);

struct AblationArm {
  std::string name;
  ModelConfig cfg;
  Metrics val;
  Metrics test;
};

/// Trains the full model plus the four single-term removals, all from the
/// same seed, and evaluates each on val and test.
std::vector<AblationArm> ablate(const ModelConfig& base, const std::string& corpus_dir,
                                const std::string& out_dir);

std::string ablation_table(const std::vector<AblationArm>& arms);

}  // namespace oscount
