#include "oscount/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "oscount/adam.hpp"
#include "oscount/tensor_io.hpp"

namespace oscount {

using json = nlohmann::json;

Metrics compute_metrics(const std::vector<std::pair<double, double>>& per_sample) {
  if (per_sample.empty()) throw std::invalid_argument("metrics: empty sample list");
  Metrics m;
  m.per_sample = per_sample;
  double abs_sum = 0.0, sq_sum = 0.0;
  for (const auto& [gt, pred] : per_sample) {
    const double e = gt - pred;
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  const double n = static_cast<double>(per_sample.size());
  m.mae = abs_sum / n;
  m.rmse = std::sqrt(sq_sum / n);
  return m;
}

std::uint64_t fnv1a64(const void* data, std::size_t size) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t file_hash(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  return fnv1a64(bytes.data(), bytes.size());
}

std::string config_to_json(const ModelConfig& cfg) {
  json j;
  j["d"] = cfg.d;
  j["heads"] = cfg.heads;
  j["cycles"] = cfg.cycles;
  j["delta"] = cfg.delta;
  j["lambda"] = cfg.lambda;
  j["backbone_channels"] = cfg.backbone_channels;
  j["convs_per_stage"] = cfg.convs_per_stage;
  j["support_resize"] = cfg.support_resize;
  j["ffn_hidden"] = cfg.ffn_hidden;
  j["ln_eps"] = cfg.ln_eps;
  j["use_pe"] = cfg.use_pe;
  j["ssim_window"] = cfg.ssim_window;
  j["ssim_sigma"] = cfg.ssim_sigma;
  j["gt_sigma"] = cfg.gt_sigma;
  j["lr"] = cfg.lr;
  j["epochs"] = cfg.epochs;
  j["seed"] = cfg.seed;
  j["self_attn_x"] = cfg.self_attn_x;
  j["self_attn_s"] = cfg.self_attn_s;
  j["scale_agg"] = cfg.scale_agg;
  j["ssim"] = cfg.ssim;
  return j.dump();
}

ModelConfig config_from_json(const std::string& json_text, ModelConfig base) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("config: parse error at byte offset ") +
                             std::to_string(e.byte) + ": " + e.what());
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
    j.erase(key);
  };
  get("d", base.d);
  get("heads", base.heads);
  get("cycles", base.cycles);
  get("delta", base.delta);
  get("lambda", base.lambda);
  get("backbone_channels", base.backbone_channels);
  get("convs_per_stage", base.convs_per_stage);
  get("support_resize", base.support_resize);
  get("ffn_hidden", base.ffn_hidden);
  get("ln_eps", base.ln_eps);
  get("use_pe", base.use_pe);
  get("ssim_window", base.ssim_window);
  get("ssim_sigma", base.ssim_sigma);
  get("gt_sigma", base.gt_sigma);
  get("lr", base.lr);
  get("epochs", base.epochs);
  get("seed", base.seed);
  get("self_attn_x", base.self_attn_x);
  get("self_attn_s", base.self_attn_s);
  get("scale_agg", base.scale_agg);
  get("ssim", base.ssim);
  if (!j.empty())
    throw std::runtime_error("config: unknown key \"" + j.begin().key() + "\"");
  return base;
}

ModelConfig config_from_json_file(const std::string& path, ModelConfig base) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return config_from_json(ss.str(), base);
}

std::uint64_t config_hash(const ModelConfig& cfg) {
  const std::string canon = config_to_json(cfg);
  return fnv1a64(canon.data(), canon.size());
}

std::uint64_t Checkpoint::config_hash() const {
  return fnv1a64(config_json.data(), config_json.size());
}

namespace {

void append_named_tensors(const std::map<std::string, Tensor<float>>& tensors, std::string& out) {
  const std::uint32_t n = static_cast<std::uint32_t>(tensors.size());
  out.append(reinterpret_cast<const char*>(&n), 4);
  for (const auto& [name, t] : tensors) {
    const std::uint32_t len = static_cast<std::uint32_t>(name.size());
    out.append(reinterpret_cast<const char*>(&len), 4);
    out.append(name);
    append_tensor_bytes(t, out);
  }
}

std::map<std::string, Tensor<float>> read_named_tensors(TensorReader& r) {
  std::uint32_t n = 0;
  r.take(&n, 4, "tensor count");
  std::map<std::string, Tensor<float>> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::uint32_t len = 0;
    r.take(&len, 4, "name length");
    std::string name(len, '\0');
    r.take(name.data(), len, "name");
    out.emplace(std::move(name), r.read_tensor());
  }
  return out;
}

constexpr char kCheckpointMagic[4] = {'O', 'S', 'C', 'K'};

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::string buf;
  buf.append(kCheckpointMagic, 4);
  const std::uint32_t version = 1;
  buf.append(reinterpret_cast<const char*>(&version), 4);
  const std::uint32_t jlen = static_cast<std::uint32_t>(ck.config_json.size());
  buf.append(reinterpret_cast<const char*>(&jlen), 4);
  buf.append(ck.config_json);
  buf.append(reinterpret_cast<const char*>(&ck.epoch), 4);
  buf.append(reinterpret_cast<const char*>(&ck.adam_steps), 8);
  buf.append(reinterpret_cast<const char*>(&ck.best_val_mae), 8);
  const std::uint64_t hash = ck.config_hash();
  buf.append(reinterpret_cast<const char*>(&hash), 8);
  append_named_tensors(ck.params, buf);
  append_named_tensors(ck.adam_m, buf);
  append_named_tensors(ck.adam_v, buf);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("short write: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  TensorReader r(bytes.data(), bytes.size(), path);
  char magic[4];
  r.take(magic, 4, "magic");
  if (std::string_view(magic, 4) != std::string_view(kCheckpointMagic, 4))
    throw std::runtime_error(path + ": bad checkpoint magic at byte offset 0");
  std::uint32_t version = 0;
  r.take(&version, 4, "version");
  if (version != 1)
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  std::uint32_t jlen = 0;
  r.take(&jlen, 4, "config length");
  ck.config_json.resize(jlen);
  r.take(ck.config_json.data(), jlen, "config json");
  r.take(&ck.epoch, 4, "epoch");
  r.take(&ck.adam_steps, 8, "adam steps");
  r.take(&ck.best_val_mae, 8, "best val mae");
  std::uint64_t stored_hash = 0;
  r.take(&stored_hash, 8, "config hash");
  if (stored_hash != ck.config_hash())
    throw std::runtime_error(path + ": config hash mismatch (file corrupt?)");
  ck.params = read_named_tensors(r);
  ck.adam_m = read_named_tensors(r);
  ck.adam_v = read_named_tensors(r);
  if (!r.at_end())
    throw std::runtime_error(path + ": trailing bytes at offset " + std::to_string(r.position()));
  return ck;
}

namespace {

Checkpoint snapshot(const CountingModel<float>& model, AdamOptimizer<float>& adam,
                    std::uint32_t epoch, double best_val_mae) {
  Checkpoint ck;
  ck.config_json = config_to_json(model.config());
  ck.epoch = epoch;
  ck.adam_steps = adam.step_count();
  ck.best_val_mae = best_val_mae;
  for (const auto& [name, t] : model.params()) {
    ck.params.emplace(name, t.clone_detached());
    ck.adam_m.emplace(name, Tensor<float>::from({static_cast<int>(t.size())}, adam.moments_m()[name]));
    ck.adam_v.emplace(name, Tensor<float>::from({static_cast<int>(t.size())}, adam.moments_v()[name]));
  }
  return ck;
}

double forward_count(const CountingModel<float>& model, const CountingSample& sample) {
  const DensityMap<float> pred = model.forward(sample.image, sample.box);
  return static_cast<double>(pred.count());
}

}  // namespace

Metrics evaluate_model(const CountingModel<float>& model,
                       const std::vector<CountingSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty split");
  std::vector<std::pair<double, double>> pairs;
  pairs.reserve(samples.size());
  for (const auto& s : samples)
    pairs.emplace_back(static_cast<double>(s.points.size()), forward_count(model, s));
  return compute_metrics(pairs);
}

TrainResult train(const ModelConfig& cfg, const std::string& corpus_dir,
                  const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const Manifest manifest = read_manifest(corpus_dir);
  const std::vector<CountingSample> train_set = load_split(corpus_dir, manifest, "train");
  const std::vector<CountingSample> val_set = load_split(corpus_dir, manifest, "val");
  if (train_set.empty()) throw std::runtime_error("train: empty train split");

  CountingModel<float> model(cfg);
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  AdamOptimizer<float> adam(model.params(), adam_cfg);
  const int stride = model.backbone_spec().total_stride();
  const LossConfig loss_cfg = cfg.loss_config();
  (void)loss_cfg;

  TrainResult result;
  result.checkpoint_path = out_dir + "/checkpoint.bin";
  result.log_path = out_dir + "/train_log.csv";
  std::ofstream log(result.log_path, std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open for write: " + result.log_path);
  log << "epoch,train_loss,val_mae,val_rmse\n";

  double best_val_mae = std::numeric_limits<double>::infinity();
  bool have_best = false;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng epoch_rng = Rng(cfg.seed).derive(100 + static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(epoch_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    double loss_sum = 0.0;
    for (const std::size_t idx : order) {
      const CountingSample aug = augment(train_set[idx], epoch_rng, stride);
      Tape<float> tape;
      float loss_value;
      {
        TapeScope<float> scope(tape);
        const Tensor<float> loss = sample_loss(model, aug.image, aug.box, aug.points);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          json diag;
          diag["error"] = "non-finite training loss";
          diag["epoch"] = epoch;
          diag["adam_steps"] = adam.step_count();
          diag["last_good_checkpoint"] = have_best ? result.checkpoint_path : "";
          std::ofstream df(out_dir + "/abort_diagnostic.json", std::ios::trunc);
          df << diag.dump(2) << "\n";
          throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   (have_best ? "; last good checkpoint: " + result.checkpoint_path
                                              : "; no checkpoint written yet"));
        }
        backward(tape, loss);
      }
      adam.step();
      loss_sum += static_cast<double>(loss_value);
    }

    const double train_loss = loss_sum / static_cast<double>(train_set.size());
    Metrics val = evaluate_model(model, val_set);
    result.log.push_back({epoch, train_loss, val.mae, val.rmse});
    log << epoch << "," << std::setprecision(10) << train_loss << "," << val.mae << ","
        << val.rmse << "\n";
    log.flush();

    if (val.mae < best_val_mae) {
      best_val_mae = val.mae;
      result.best = snapshot(model, adam, static_cast<std::uint32_t>(epoch), best_val_mae);
      save_checkpoint(result.best, result.checkpoint_path);
      have_best = true;
    }
  }
  if (!have_best) throw std::runtime_error("train: no epoch produced a checkpoint");
  return result;
}

Metrics evaluate(const std::string& checkpoint_path, const std::string& corpus_dir,
                 const std::string& split) {
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  const ModelConfig cfg = config_from_json(ck.config_json);
  CountingModel<float> model(cfg);
  model.load_state(ck.params);
  const Manifest manifest = read_manifest(corpus_dir);
  return evaluate_model(model, load_split(corpus_dir, manifest, split));
}

PredictResult predict(const std::string& checkpoint_path, const std::string& image_path,
                      const SupportBox& box, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  const ModelConfig cfg = config_from_json(ck.config_json);
  CountingModel<float> model(cfg);
  model.load_state(ck.params);
  const Tensor<float> image = read_tensor(image_path);
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw std::runtime_error("predict: image must be (3,H,W), got " + shape_str(image.shape()));
  const int stride = model.backbone_spec().total_stride();
  if (image.dim(1) % stride != 0 || image.dim(2) % stride != 0)
    std::cerr << "notice: image " << image.dim(2) << "x" << image.dim(1)
              << " is not a multiple of stride " << stride << "; padding\n";
  const DensityMap<float> pred = model.forward(image, box);
  PredictResult r;
  r.count = static_cast<double>(pred.count());
  r.density_tnsr = out_dir + "/density.tnsr";
  r.density_pgm = out_dir + "/density.pgm";
  write_tensor(pred.values, r.density_tnsr);
  write_pgm(pred.values, r.density_pgm);
  return r;
}

std::vector<AblationArm> ablate(const ModelConfig& base, const std::string& corpus_dir,
                                const std::string& out_dir) {
  std::vector<AblationArm> arms;
  auto arm = [&](const std::string& name, auto mutate) {
    ModelConfig cfg = base;
    mutate(cfg);
    arms.push_back({name, cfg, {}, {}});
  };
  arm("full", [](ModelConfig&) {});
  arm("-self_attn_x", [](ModelConfig& c) { c.self_attn_x = false; });
  arm("-self_attn_s", [](ModelConfig& c) { c.self_attn_s = false; });
  arm("-scale_agg", [](ModelConfig& c) { c.scale_agg = false; });
  arm("-ssim", [](ModelConfig& c) { c.ssim = false; });

  for (auto& a : arms) {
    const std::string arm_dir = out_dir + "/" + (a.name == "full" ? a.name : "ablate" + a.name);
    const TrainResult r = train(a.cfg, corpus_dir, arm_dir);
    a.val = evaluate(r.checkpoint_path, corpus_dir, "val");
    a.test = evaluate(r.checkpoint_path, corpus_dir, "test");
  }

  std::ofstream csv(out_dir + "/ablation.csv", std::ios::trunc);
  csv << "arm,val_mae,val_rmse,test_mae,test_rmse\n";
  for (const auto& a : arms)
    csv << a.name << "," << std::setprecision(10) << a.val.mae << "," << a.val.rmse << ","
        << a.test.mae << "," << a.test.rmse << "\n";
  return arms;
}

std::string ablation_table(const std::vector<AblationArm>& arms) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "arm" << std::right << std::setw(10) << "val_mae"
     << std::setw(10) << "val_rmse" << std::setw(10) << "test_mae" << std::setw(11)
     << "test_rmse" << "\n";
  for (const auto& a : arms)
    os << std::left << std::setw(16) << a.name << std::right << std::fixed << std::setprecision(3)
       << std::setw(10) << a.val.mae << std::setw(10) << a.val.rmse << std::setw(10) << a.test.mae
       << std::setw(11) << a.test.rmse << "\n";
  return os.str();
}

}  // namespace oscount
