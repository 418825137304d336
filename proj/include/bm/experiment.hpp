#pragma once

// Batch experiment runner behind the bmx tool.
//
// A run is fully described by an ExperimentConfig: a flat set of typed
// key/value pairs with defaults. Values come from defaults, then a config
// file, then command-line overrides; the merged result is written to
// <out>/config.json before anything else happens and can be fed back in
// with --config to replay the run.

#include <bm/data.hpp>
#include <bm/errors.hpp>
#include <bm/gradcheck.hpp>
#include <bm/loss.hpp>
#include <bm/metrics.hpp>
#include <bm/nn.hpp>
#include <bm/semisup.hpp>
#include <bm/target.hpp>

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace bm {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitIo = 2,
  kExitDivergence = 3,
  kExitVerification = 4,
};

// ---------------------------------------------------------------------------
// Configuration

enum class KeyType { Int, Uint, Double, Bool, String, Choice, IntList, UintList, DoubleList, ChoiceList };

struct KeySpec {
  std::string_view name;
  std::string_view fallback;
  KeyType type;
  std::vector<std::string_view> choices;  ///< for Choice and ChoiceList
  std::string_view help;
};

inline const std::vector<KeySpec>& config_keys() {
  using enum KeyType;
  static const std::vector<KeySpec> keys = {
      {"out", "out", String, {}, "output directory"},
      {"seeds", "0", UintList, {}, "run seeds; one run per seed"},
      {"data_seed", "1000", Uint, {}, "base seed of the data generators"},
      {"dataset", "two-moons", Choice, {"two-moons", "blobs", "csv", "mnist"}, "data source"},
      {"n_train", "1000", Int, {}, "synthetic training rows"},
      {"n_val", "0", Int, {}, "validation rows (synthetic: generated; files: held out of train)"},
      {"n_test", "1000", Int, {}, "synthetic test rows"},
      {"noise", "0.1", Double, {}, "synthetic noise sd"},
      {"blob_classes", "3", Int, {}, "number of blobs"},
      {"train_csv", "", String, {}, "training CSV (dataset=csv)"},
      {"test_csv", "", String, {}, "test CSV (dataset=csv)"},
      {"mnist_dir", "", String, {}, "directory with the four MNIST IDX files (dataset=mnist)"},
      {"standardize", "auto", Choice, {"auto", "true", "false"}, "z-score inputs with training statistics"},
      {"hidden", "32,32", IntList, {}, "hidden layer widths"},
      {"loss", "bm", Choice, {"bm", "softmax"}, "training loss"},
      {"lambda", "0.01", DoubleList, {}, "KL multiplier; a list runs a sweep"},
      {"prior", "1", Double, {}, "symmetric Dirichlet prior concentration"},
      {"logit_clamp", "30", Double, {}, "logits are clamped to +-c before exp"},
      {"epochs", "100", Int, {}, ""},
      {"batch_size", "32", Int, {}, ""},
      {"lr", "auto", String, {}, "base learning rate; auto = 0.05 (sgd) or 3e-4 (adam)"},
      {"warmup_epochs", "5", Int, {}, "linear warm-up length, at most 5"},
      {"milestones", "", IntList, {}, "epochs at which the rate drops by 10x"},
      {"clip_norm", "1", Double, {}, "global gradient-norm clip; inf disables"},
      {"optimizer", "sgd", Choice, {"sgd", "adam"}, ""},
      {"momentum", "0.9", Double, {}, "SGD momentum"},
      {"ece_bins", "15", Int, {}, "calibration bins"},
      {"entropy_bins", "20", Int, {}, "entropy histogram bins over [0, ln K]"},
      {"checkpoint", "", String, {}, "model checkpoint for eval and ood"},
      {"ood_source", "ring", Choice, {"ring", "box", "csv"}, "out-of-distribution inputs"},
      {"ood_n", "1000", Int, {}, "OOD rows (ring, box)"},
      {"ood_r_min", "3", Double, {}, "ring inner radius, raw input units"},
      {"ood_r_max", "4", Double, {}, "ring outer radius, raw input units"},
      {"ood_box_lo", "-6", Double, {}, "box lower bound, raw input units"},
      {"ood_box_hi", "6", Double, {}, "box upper bound, raw input units"},
      {"ood_csv", "", String, {}, "OOD CSV (label column ignored)"},
      {"ln_betas", "-1,0,1,2,3,4", DoubleList, {}, "beta-sweep grid of ln(beta)"},
      {"beta_strategies", "A,B", ChoiceList, {"A", "B"}, "A: beta only; B: beta with lambda/beta"},
      {"grad_explosion", "1000", Double, {}, "pre-clip gradient norm that flags a sweep cell as divergent"},
      {"semisup_method", "vat", ChoiceList, {"none", "pi", "vat"}, "semi-supervised methods to run"},
      {"n_labeled", "10", Int, {}, "labeled training rows, balanced over classes"},
      {"unlabeled_batch_size", "64", Int, {}, ""},
      {"vat_epsilon", "0.5", Double, {}, "adversarial radius, standardized units"},
      {"vat_xi", "1e-6", Double, {}, "power-iteration probe scale"},
      {"vat_power_iters", "1", Int, {}, ""},
      {"vat_consistency", "auto", Choice, {"auto", "softmax-kl", "dirichlet-kl"}, "auto follows the loss"},
      {"vat_coeff", "0.03", Double, {}, ""},
      {"pi_noise", "0.1", Double, {}, "input noise sd, standardized units"},
      {"pi_consistency", "auto", Choice, {"auto", "softmax-l2", "dirichlet-kl"}, "auto follows the loss"},
      {"pi_coeff", "0.5", Double, {}, ""},
      {"trials", "20", Int, {}, "gradcheck instances per suite"},
  };
  return keys;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  T value{};
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + text + "'");
  }
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw ConfigError("config: '" + key + "' expects true or false, got '" + text + "'");
}

inline void check_choice(const KeySpec& spec, const std::string& value) {
  for (auto c : spec.choices) {
    if (value == c) return;
  }
  std::string options;
  for (auto c : spec.choices) options += (options.empty() ? "" : ", ") + std::string(c);
  throw ConfigError("config: '" + std::string(spec.name) + "' must be one of " + options + ", got '" + value + "'");
}

/// Throws ConfigError unless `value` parses as the key's type.
inline void check_value(const KeySpec& spec, const std::string& value) {
  const std::string key(spec.name);
  switch (spec.type) {
    case KeyType::Int: parse_number<long long>(key, value); break;
    case KeyType::Uint: parse_number<std::uint64_t>(key, value); break;
    case KeyType::Double: parse_number<double>(key, value); break;
    case KeyType::Bool: parse_bool(key, value); break;
    case KeyType::String: break;
    case KeyType::Choice: check_choice(spec, trim(value)); break;
    case KeyType::IntList:
      for (const auto& v : split_list(value)) parse_number<long long>(key, v);
      break;
    case KeyType::UintList:
      for (const auto& v : split_list(value)) parse_number<std::uint64_t>(key, v);
      break;
    case KeyType::DoubleList:
      for (const auto& v : split_list(value)) parse_number<double>(key, v);
      break;
    case KeyType::ChoiceList:
      for (const auto& v : split_list(value)) check_choice(spec, v);
      break;
  }
}

inline const KeySpec& key_spec(const std::string& key) {
  for (const auto& k : config_keys()) {
    if (k.name == key) return k;
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace detail

class ExperimentConfig {
 public:
  ExperimentConfig() {
    for (const auto& k : config_keys()) values_[std::string(k.name)] = std::string(k.fallback);
  }

  /// Defaults, then `file` (if given), then `overrides` in order; auto
  /// values are resolved at the end.
  static ExperimentConfig resolve(const std::optional<std::string>& file,
                                  const std::vector<std::pair<std::string, std::string>>& overrides) {
    ExperimentConfig cfg;
    if (file) cfg.merge_file(*file);
    for (const auto& [k, v] : overrides) cfg.set(k, v);
    cfg.finalize();
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    const auto& spec = detail::key_spec(detail::trim(key));
    detail::check_value(spec, value);
    values_[std::string(spec.name)] = spec.type == KeyType::String ? value : detail::trim(value);
  }

  /// "key=value" as given to --set.
  void set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("config: expected key=value, got '" + assignment + "'");
    set(assignment.substr(0, eq), assignment.substr(eq + 1));
  }

  /// Plain text (one key = value per line, # comments) or a JSON object as
  /// written to config.json.
  void merge_text(const std::string& text) {
    const std::string t = detail::trim(text);
    if (!t.empty() && t.front() == '{') {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(t);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
      }
      if (!j.is_object()) throw ConfigError("config: JSON config must be an object");
      for (const auto& [k, v] : j.items()) set(k, v.is_string() ? v.get<std::string>() : v.dump());
      return;
    }
    std::istringstream in(text);
    std::string line;
    std::set<std::string> seen;
    int number = 0;
    while (std::getline(in, line)) {
      ++number;
      const auto hash = line.find('#');
      const std::string body = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
      const std::string key = detail::trim(body.substr(0, eq));
      if (!seen.insert(key).second) throw ConfigError("config line " + std::to_string(number) + ": duplicate key '" + key + "'");
      set(key, detail::trim(body.substr(eq + 1)));
    }
  }

  void merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    merge_text(buffer.str());
  }

  /// Replaces auto values by what they resolve to.
  void finalize() {
    if (get("lr") == "auto") {
      values_["lr"] = get("optimizer") == "adam" ? "0.0003" : "0.05";
    } else {
      detail::parse_number<double>("lr", get("lr"));
    }
    if (get("standardize") == "auto") values_["standardize"] = get("dataset") == "mnist" ? "false" : "true";
    const bool bm = get("loss") == "bm";
    if (get("vat_consistency") == "auto") values_["vat_consistency"] = bm ? "dirichlet-kl" : "softmax-kl";
    if (get("pi_consistency") == "auto") values_["pi_consistency"] = bm ? "dirichlet-kl" : "softmax-l2";
  }

  [[nodiscard]] const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
    return it->second;
  }
  [[nodiscard]] int get_int(const std::string& key) const {
    const auto v = detail::parse_number<long long>(key, get(key));
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
      throw ConfigError("config: '" + key + "' out of range");
    }
    return static_cast<int>(v);
  }
  [[nodiscard]] std::uint64_t get_uint(const std::string& key) const {
    return detail::parse_number<std::uint64_t>(key, get(key));
  }
  [[nodiscard]] double get_double(const std::string& key) const { return detail::parse_number<double>(key, get(key)); }
  [[nodiscard]] bool get_bool(const std::string& key) const { return detail::parse_bool(key, get(key)); }
  [[nodiscard]] std::vector<std::string> get_list(const std::string& key) const { return detail::split_list(get(key)); }
  [[nodiscard]] std::vector<int> get_ints(const std::string& key) const {
    std::vector<int> out;
    for (const auto& v : get_list(key)) out.push_back(static_cast<int>(detail::parse_number<long long>(key, v)));
    return out;
  }
  [[nodiscard]] std::vector<std::uint64_t> get_uints(const std::string& key) const {
    std::vector<std::uint64_t> out;
    for (const auto& v : get_list(key)) out.push_back(detail::parse_number<std::uint64_t>(key, v));
    return out;
  }
  [[nodiscard]] std::vector<double> get_doubles(const std::string& key) const {
    std::vector<double> out;
    for (const auto& v : get_list(key)) out.push_back(detail::parse_number<double>(key, v));
    return out;
  }

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }

  [[nodiscard]] std::string out_dir() const { return get("out"); }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

 private:
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Shared plumbing

namespace detail {

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  return out;
}

/// Compact, round-trippable number for directory names and CSV cells.
inline std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// Independent stream per (run seed, role): 0 train, 1 val, 2 test, 3 OOD.
inline std::uint64_t stream_seed(const ExperimentConfig& cfg, std::uint64_t seed, int role) {
  return cfg.get_uint("data_seed") + 1000 * seed + static_cast<std::uint64_t>(role);
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  auto out = open_csv(path);
  out << "epoch,lr,train_loss,train_error,val_loss,val_error,max_grad_norm\n";
  for (const auto& e : log) {
    out << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.train_error << ',' << e.val_loss << ','
        << e.val_error << ',' << e.max_grad_norm << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace detail

/// Raw (unstandardized) data for one run seed.
struct ExperimentData {
  LabeledDataset train;
  std::optional<LabeledDataset> val;
  LabeledDataset test;
};

inline ExperimentData load_experiment_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  const std::string kind = cfg.get("dataset");
  const double noise = cfg.get_double("noise");
  const int n_val = cfg.get_int("n_val");
  if (n_val < 0) throw ConfigError("n_val must be non-negative");
  ExperimentData d;
  if (kind == "two-moons" || kind == "blobs") {
    const auto gen = [&](int n, int role) {
      if (kind == "two-moons") return gen_two_moons(n, noise, detail::stream_seed(cfg, seed, role));
      const int k = cfg.get_int("blob_classes");
      if (k < 2) throw ConfigError("blob_classes must be at least 2");
      Matrix centers(k, 2);
      for (int c = 0; c < k; ++c) {
        const double t = 2.0 * std::numbers::pi * c / k;
        centers.row(c) << 3.0 * std::cos(t), 3.0 * std::sin(t);
      }
      if (n < k) throw ConfigError("blobs: need at least one row per class");
      return gen_blobs(k, n / k, centers, noise, detail::stream_seed(cfg, seed, role));
    };
    if (cfg.get_int("n_train") < 2 || cfg.get_int("n_test") < 2) throw ConfigError("n_train and n_test must be at least 2");
    d.train = gen(cfg.get_int("n_train"), 0);
    if (n_val > 0) d.val = gen(n_val, 1);
    d.test = gen(cfg.get_int("n_test"), 2);
    return d;
  }
  if (kind == "csv") {
    if (cfg.get("train_csv").empty() || cfg.get("test_csv").empty()) {
      throw ConfigError("dataset=csv needs train_csv and test_csv");
    }
    d.train = load_csv(cfg.get("train_csv"));
    d.test = load_csv(cfg.get("test_csv"));
  } else {
    const std::filesystem::path dir = cfg.get("mnist_dir");
    if (dir.empty()) throw ConfigError("dataset=mnist needs mnist_dir");
    d.train = load_idx((dir / "train-images-idx3-ubyte").string(), (dir / "train-labels-idx1-ubyte").string());
    d.test = load_idx((dir / "t10k-images-idx3-ubyte").string(), (dir / "t10k-labels-idx1-ubyte").string());
  }
  if (d.train.dim() != d.test.dim()) throw DimensionError("train and test feature counts differ");
  const int k = std::max(d.train.num_classes, d.test.num_classes);
  d.train.num_classes = d.test.num_classes = k;
  if (n_val > 0) {
    if (static_cast<std::size_t>(n_val) >= d.train.size()) throw ConfigError("n_val must be smaller than the training set");
    std::vector<std::size_t> order(d.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(detail::stream_seed(cfg, seed, 1));
    std::shuffle(order.begin(), order.end(), rng);
    const std::span<const std::size_t> all(order);
    const auto keep = all.size() - static_cast<std::size_t>(n_val);
    d.val = d.train.subset(all.subspan(keep));
    d.train = d.train.subset(all.subspan(0, keep));
  }
  return d;
}

/// Standardizer fitted on `train`, or the identity when disabled.
inline Standardizer input_transform(const ExperimentConfig& cfg, const Matrix& train) {
  if (cfg.get_bool("standardize")) return Standardizer::fit(train);
  Standardizer s;
  s.mean.assign(static_cast<std::size_t>(train.cols()), 0.0);
  s.sd.assign(static_cast<std::size_t>(train.cols()), 1.0);
  return s;
}

inline std::vector<int> model_dims(const ExperimentConfig& cfg, std::size_t input_dim, int num_classes) {
  std::vector<int> dims{static_cast<int>(input_dim)};
  for (int h : cfg.get_ints("hidden")) {
    if (h < 1) throw ConfigError("hidden widths must be positive");
    dims.push_back(h);
  }
  dims.push_back(num_classes);
  return dims;
}

inline LossConfig loss_config(const ExperimentConfig& cfg, double lam, int num_classes) {
  LossConfig lc;
  lc.lam = lam;
  lc.logit_clamp = cfg.get_double("logit_clamp");
  const double beta = cfg.get_double("prior");
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("prior must be positive");
  if (beta != 1.0) lc.prior = Concentration::uniform(static_cast<std::size_t>(num_classes), beta);
  try {
    lc.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  return lc;
}

inline TrainConfig train_config(const ExperimentConfig& cfg, std::uint64_t seed, const LossConfig& lc) {
  TrainConfig tc;
  tc.epochs = cfg.get_int("epochs");
  tc.batch_size = cfg.get_int("batch_size");
  tc.base_lr = cfg.get_double("lr");
  tc.warmup_epochs = cfg.get_int("warmup_epochs");
  tc.clip_norm = cfg.get_double("clip_norm");
  tc.optimizer = parse_optimizer(cfg.get("optimizer"));
  tc.momentum = cfg.get_double("momentum");
  tc.milestones = cfg.get_ints("milestones");
  tc.seed = seed;
  tc.loss = parse_loss_kind(cfg.get("loss"));
  tc.loss_cfg = lc;
  tc.validate();
  return tc;
}

inline std::vector<std::uint64_t> run_seeds(const ExperimentConfig& cfg) {
  auto seeds = cfg.get_uints("seeds");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  return seeds;
}

/// Writes config.json into the output directory and returns that directory.
inline std::filesystem::path prepare_output(const ExperimentConfig& cfg) {
  const std::filesystem::path out = cfg.out_dir();
  detail::ensure_dir(out);
  detail::write_json(out / "config.json", cfg.to_json());
  return out;
}

inline ModelCheckpoint load_model_checkpoint(const ExperimentConfig& cfg) {
  const std::string path = cfg.get("checkpoint");
  if (path.empty()) throw ConfigError("a checkpoint is required (--checkpoint)");
  try {
    return load_checkpoint(path);
  } catch (const DomainError& e) {
    throw IoError(e.what());
  } catch (const DimensionError& e) {
    throw IoError(e.what());
  }
}

inline Standardizer checkpoint_transform(const ModelCheckpoint& ckpt) {
  Standardizer s;
  s.mean = ckpt.input_mean;
  s.sd = ckpt.input_sd;
  return s;
}

// ---------------------------------------------------------------------------
// train

struct TrainRow {
  double lambda = 0.0;
  std::uint64_t seed = 0;
  double final_train_loss = 0.0;
  double val_error = std::numeric_limits<double>::quiet_NaN();
  double test_error = 0.0;
  std::string run_dir;
};

/// One model per (lambda, seed). Softmax runs ignore all but the first
/// lambda. Layout: <out>/runs/lambda=<l>_seed=<s>/{model.json, metrics.csv,
/// config.json} plus <out>/summary.csv.
inline std::vector<TrainRow> cmd_train(const ExperimentConfig& cfg) {
  const auto out = prepare_output(cfg);
  auto lambdas = cfg.get_doubles("lambda");
  if (lambdas.empty()) throw ConfigError("lambda must not be empty");
  if (cfg.get("loss") == "softmax") lambdas.resize(1);
  std::vector<TrainRow> rows;
  for (double lam : lambdas) {
    for (std::uint64_t seed : run_seeds(cfg)) {
      ExperimentData data = load_experiment_data(cfg, seed);
      const Standardizer s = input_transform(cfg, data.train.inputs);
      data.train = s.apply(data.train);
      data.test = s.apply(data.test);
      if (data.val) data.val = s.apply(*data.val);
      const LossConfig lc = loss_config(cfg, lam, data.train.num_classes);
      const TrainConfig tc = train_config(cfg, seed, lc);
      std::mt19937_64 init(seed);
      const auto dims = model_dims(cfg, data.train.dim(), data.train.num_classes);
      const TrainResult result = train(Mlp::he(dims, init), data.train, data.val ? &*data.val : nullptr, tc);

      const std::string name = "lambda=" + detail::fmt(lam) + "_seed=" + std::to_string(seed);
      const auto dir = out / "runs" / name;
      detail::ensure_dir(dir);
      ExperimentConfig single = cfg;
      single.set("lambda", detail::fmt(lam));
      single.set("seeds", std::to_string(seed));
      single.set("out", dir.string());
      single.set("checkpoint", (dir / "model.json").string());
      detail::write_json(dir / "config.json", single.to_json());
      save_checkpoint((dir / "model.json").string(), {result.model, s.mean, s.sd, tc.loss, lc});
      detail::write_metrics_csv(dir / "metrics.csv", result.log);

      TrainRow row{lam, seed, result.log.back().train_loss, result.log.back().val_error,
                   evaluate(result.model, data.test, tc.loss, lc).error, dir.string()};
      rows.push_back(row);
    }
  }
  auto csv = detail::open_csv(out / "summary.csv");
  csv << "loss,lambda,seed,final_train_loss,val_error,test_error,run_dir\n";
  for (const auto& r : rows) {
    csv << cfg.get("loss") << ',' << r.lambda << ',' << r.seed << ',' << r.final_train_loss << ',' << r.val_error << ','
        << r.test_error << ',' << r.run_dir << '\n';
  }
  return rows;
}

// ---------------------------------------------------------------------------
// eval

struct EvalReport {
  double test_error = 0.0;
  CalibrationReport calibration;
  double mean_entropy = 0.0;
  std::size_t n_test = 0;
};

namespace detail {

inline void require_compatible(const ModelCheckpoint& ckpt, const LabeledDataset& d) {
  if (static_cast<std::size_t>(ckpt.model.input_dim()) != d.dim() || ckpt.model.output_dim() != d.num_classes ||
      ckpt.input_mean.size() != d.dim() || ckpt.input_sd.size() != d.dim()) {
    throw DimensionError("checkpoint shape (" + std::to_string(ckpt.model.input_dim()) + " -> " +
                         std::to_string(ckpt.model.output_dim()) + ") does not match the data (" +
                         std::to_string(d.dim()) + " -> " + std::to_string(d.num_classes) + ")");
  }
}

inline std::vector<double> entropies(const Matrix& probs) {
  std::vector<double> e(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    e[static_cast<std::size_t>(i)] = categorical_entropy({probs.row(i).data(), static_cast<std::size_t>(probs.cols())});
  }
  return e;
}

}  // namespace detail

/// Test error, ECE and mean predictive entropy of a checkpoint on the test
/// split of the configured data (first seed). Writes eval.json and
/// reliability.csv.
inline EvalReport cmd_eval(const ExperimentConfig& cfg) {
  const auto out = prepare_output(cfg);
  const ModelCheckpoint ckpt = load_model_checkpoint(cfg);
  const ExperimentData data = load_experiment_data(cfg, run_seeds(cfg).front());
  detail::require_compatible(ckpt, data.test);
  const LabeledDataset test = checkpoint_transform(ckpt).apply(data.test);
  const Matrix probs = predict_proba(ckpt.model, test.inputs, ckpt.loss, ckpt.loss_cfg);

  std::vector<double> conf(test.size());
  std::vector<bool> correct(test.size());
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto p = confidence_and_prediction(probs, static_cast<Eigen::Index>(i));
    conf[i] = p.confidence;
    correct[i] = static_cast<int>(p.label) == test.labels[i];
    wrong += correct[i] ? 0 : 1;
  }
  const int bins = cfg.get_int("ece_bins");
  EvalReport r;
  r.n_test = test.size();
  r.test_error = static_cast<double>(wrong) / static_cast<double>(test.size());
  r.calibration = ece(conf, correct, bins);
  const auto e = detail::entropies(probs);
  r.mean_entropy = std::accumulate(e.begin(), e.end(), 0.0) / static_cast<double>(e.size());

  detail::write_json(out / "eval.json", {{"test_error", r.test_error},
                                         {"ece@" + std::to_string(bins), r.calibration.ece},
                                         {"mean_entropy", r.mean_entropy},
                                         {"n_test", r.n_test}});
  write_reliability_csv((out / "reliability.csv").string(), r.calibration);
  return r;
}

// ---------------------------------------------------------------------------
// ood

struct OodReport {
  EntropyHistogram in_distribution;
  EntropyHistogram ood;
  std::string source;
};

/// OOD inputs in raw input units, for the first seed.
inline Matrix load_ood_inputs(const ExperimentConfig& cfg, std::size_t dim) {
  const std::string source = cfg.get("ood_source");
  const std::uint64_t seed = detail::stream_seed(cfg, run_seeds(cfg).front(), 3);
  const int n = cfg.get_int("ood_n");
  if (source == "ring") {
    if (dim != 2) throw ConfigError("ood_source=ring needs two-dimensional inputs");
    return gen_ood_ring(n, cfg.get_double("ood_r_min"), cfg.get_double("ood_r_max"), seed);
  }
  if (source == "box") {
    return gen_uniform_box(n, static_cast<int>(dim), cfg.get_double("ood_box_lo"), cfg.get_double("ood_box_hi"), seed);
  }
  if (cfg.get("ood_csv").empty()) throw ConfigError("ood_source=csv needs ood_csv");
  Matrix x = load_csv(cfg.get("ood_csv"), 1).inputs;
  if (static_cast<std::size_t>(x.cols()) != dim) throw DimensionError("ood_csv feature count does not match the model");
  return x;
}

/// Predictive-entropy histograms over [0, ln K] for the test split and the
/// OOD source. Writes entropy.csv (rows labeled "in" and "ood") and ood.json.
inline OodReport cmd_ood(const ExperimentConfig& cfg) {
  const auto out = prepare_output(cfg);
  const ModelCheckpoint ckpt = load_model_checkpoint(cfg);
  const ExperimentData data = load_experiment_data(cfg, run_seeds(cfg).front());
  detail::require_compatible(ckpt, data.test);
  const Standardizer s = checkpoint_transform(ckpt);
  const Matrix ood_x = s.apply(load_ood_inputs(cfg, data.test.dim()));
  const Matrix in_x = s.apply(data.test.inputs);
  const auto k = static_cast<std::size_t>(data.test.num_classes);
  const int bins = cfg.get_int("entropy_bins");

  OodReport r;
  r.source = cfg.get("ood_source");
  r.in_distribution = entropy_histogram(detail::entropies(predict_proba(ckpt.model, in_x, ckpt.loss, ckpt.loss_cfg)), bins, k);
  r.ood = entropy_histogram(detail::entropies(predict_proba(ckpt.model, ood_x, ckpt.loss, ckpt.loss_cfg)), bins, k);

  write_entropy_csv((out / "entropy.csv").string(), {{"in", r.in_distribution}, {"ood", r.ood}});
  const auto summary = [](const EntropyHistogram& h) {
    return nlohmann::json{{"n", h.total},
                          {"mean_entropy", h.mean ? nlohmann::json(*h.mean) : nlohmann::json(nullptr)},
                          {"median_entropy", h.median ? nlohmann::json(*h.median) : nlohmann::json(nullptr)}};
  };
  detail::write_json(out / "ood.json", {{"ood_source", r.source},
                                        {"max_entropy", std::log(static_cast<double>(k))},
                                        {"in", summary(r.in_distribution)},
                                        {"ood", summary(r.ood)}});
  return r;
}

// ---------------------------------------------------------------------------
// beta-sweep

struct BetaCell {
  char strategy = 'A';
  double ln_beta = 0.0;
  double beta = 1.0;
  double lambda = 0.0;
  double test_error = std::numeric_limits<double>::quiet_NaN();  ///< mean over seeds
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  double max_grad_norm = 0.0;
  bool diverged = false;
  std::string note;
};

/// Trains the BM loss with prior beta * 1 for every (strategy, ln beta):
/// strategy A keeps the configured lambda, strategy B uses lambda / beta.
/// A cell is flagged divergent if training throws, the loss is not finite,
/// or the largest pre-clip gradient norm exceeds grad_explosion; the sweep
/// always completes. Writes beta_sweep.csv and per-cell metrics.
inline std::vector<BetaCell> cmd_beta_sweep(const ExperimentConfig& cfg) {
  const auto out = prepare_output(cfg);
  const auto lambdas = cfg.get_doubles("lambda");
  if (lambdas.empty()) throw ConfigError("lambda must not be empty");
  const double lam_ref = lambdas.front();
  const double explosion = cfg.get_double("grad_explosion");
  const auto grid = cfg.get_doubles("ln_betas");
  if (grid.empty()) throw ConfigError("ln_betas must not be empty");
  const auto seeds = run_seeds(cfg);

  // Data and transforms are shared by every cell.
  std::vector<ExperimentData> datasets;
  for (auto seed : seeds) {
    ExperimentData d = load_experiment_data(cfg, seed);
    const Standardizer s = input_transform(cfg, d.train.inputs);
    d.train = s.apply(d.train);
    d.test = s.apply(d.test);
    if (d.val) d.val = s.apply(*d.val);
    datasets.push_back(std::move(d));
  }

  std::vector<BetaCell> cells;
  for (const auto& strategy : cfg.get_list("beta_strategies")) {
    for (double ln_beta : grid) {
      BetaCell cell;
      cell.strategy = strategy.front();
      cell.ln_beta = ln_beta;
      cell.beta = std::exp(ln_beta);
      cell.lambda = cell.strategy == 'A' ? lam_ref : lam_ref / cell.beta;
      const auto dir = out / "cells" / (strategy + "_lnbeta=" + detail::fmt(ln_beta));
      detail::ensure_dir(dir);
      double error_sum = 0.0, loss_sum = 0.0;
      std::size_t completed = 0;
      for (std::size_t i = 0; i < seeds.size(); ++i) {
        const auto& d = datasets[i];
        try {
          if (!(cell.beta > 0.0) || !std::isfinite(cell.beta) || !(cell.lambda > 0.0) || !std::isfinite(cell.lambda)) {
            throw DivergenceError("beta or lambda not representable");
          }
          LossConfig lc;
          lc.lam = cell.lambda;
          lc.logit_clamp = cfg.get_double("logit_clamp");
          lc.prior = Concentration::uniform(static_cast<std::size_t>(d.train.num_classes), cell.beta);
          ExperimentConfig bm_cfg = cfg;
          bm_cfg.set("loss", "bm");
          const TrainConfig tc = train_config(bm_cfg, seeds[i], lc);
          std::mt19937_64 init(seeds[i]);
          const auto dims = model_dims(cfg, d.train.dim(), d.train.num_classes);
          const TrainResult res = train(Mlp::he(dims, init), d.train, d.val ? &*d.val : nullptr, tc);
          detail::write_metrics_csv(dir / ("metrics_seed=" + std::to_string(seeds[i]) + ".csv"), res.log);
          for (const auto& e : res.log) cell.max_grad_norm = std::max(cell.max_grad_norm, e.max_grad_norm);
          const double err = evaluate(res.model, d.test, tc.loss, lc).error;
          error_sum += err;
          loss_sum += res.log.back().train_loss;
          ++completed;
          if (!std::isfinite(res.log.back().train_loss)) {
            cell.diverged = true;
            cell.note = "non-finite loss";
          }
        } catch (const DivergenceError& e) {
          cell.diverged = true;
          cell.note = e.what();
        } catch (const DomainError& e) {
          cell.diverged = true;
          cell.note = e.what();
        }
      }
      if (completed > 0) {
        cell.test_error = error_sum / static_cast<double>(completed);
        cell.final_train_loss = loss_sum / static_cast<double>(completed);
      }
      if (cell.max_grad_norm > explosion && !cell.diverged) {
        cell.diverged = true;
        cell.note = "gradient norm " + detail::fmt(cell.max_grad_norm) + " above grad_explosion";
      }
      cells.push_back(cell);
    }
  }

  auto csv = detail::open_csv(out / "beta_sweep.csv");
  csv << "strategy,ln_beta,beta,lambda,test_error,final_train_loss,max_grad_norm,diverged,note\n";
  for (const auto& c : cells) {
    std::string note = c.note;
    std::replace(note.begin(), note.end(), ',', ';');
    csv << c.strategy << ',' << c.ln_beta << ',' << c.beta << ',' << c.lambda << ',' << c.test_error << ','
        << c.final_train_loss << ',' << c.max_grad_norm << ',' << (c.diverged ? 1 : 0) << ',' << note << '\n';
  }
  return cells;
}

// ---------------------------------------------------------------------------
// semisup-train

struct SemisupRow {
  std::string method;
  std::string consistency;  ///< empty for the supervised baseline
  std::uint64_t seed = 0;
  double test_error = 0.0;
  std::size_t n_labeled = 0;
  std::size_t n_unlabeled = 0;
};

/// Indices of the first n/K rows of every class, in row order, followed by
/// the remaining indices.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> balanced_labeled_split(const LabeledDataset& d,
                                                                                           int n_labeled) {
  const int k = d.num_classes;
  if (n_labeled < k || n_labeled % k != 0) {
    throw ConfigError("n_labeled must be a positive multiple of the number of classes");
  }
  std::vector<int> quota(static_cast<std::size_t>(k), n_labeled / k);
  std::vector<std::size_t> labeled, unlabeled;
  for (std::size_t i = 0; i < d.size(); ++i) {
    int& q = quota[static_cast<std::size_t>(d.labels[i])];
    if (q > 0) {
      labeled.push_back(i);
      --q;
    } else {
      unlabeled.push_back(i);
    }
  }
  if (labeled.size() != static_cast<std::size_t>(n_labeled)) throw ConfigError("not enough rows per class for n_labeled");
  return {labeled, unlabeled};
}

inline SemisupConfig semisup_config(const ExperimentConfig& cfg, SemisupMethod method) {
  SemisupConfig sc;
  sc.method = method;
  sc.unlabeled_batch_size = cfg.get_int("unlabeled_batch_size");
  sc.vat.epsilon = cfg.get_double("vat_epsilon");
  sc.vat.xi = cfg.get_double("vat_xi");
  sc.vat.power_iters = cfg.get_int("vat_power_iters");
  sc.vat.consistency = parse_consistency(cfg.get("vat_consistency"));
  sc.vat.coeff = cfg.get_double("vat_coeff");
  sc.pi.noise_sd = cfg.get_double("pi_noise");
  sc.pi.consistency = parse_consistency(cfg.get("pi_consistency"));
  sc.pi.coeff = cfg.get_double("pi_coeff");
  sc.validate();
  return sc;
}

/// For every seed: n_labeled balanced labeled rows, the rest of the training
/// split unlabeled, one model per method. Inputs are standardized with the
/// statistics of the whole training split. Writes
/// <out>/runs/<method>_seed=<s>/{model.json, metrics.csv} and summary.csv.
inline std::vector<SemisupRow> cmd_semisup_train(const ExperimentConfig& cfg) {
  const auto out = prepare_output(cfg);
  const auto methods = cfg.get_list("semisup_method");
  if (methods.empty()) throw ConfigError("semisup_method must not be empty");
  const auto lambdas = cfg.get_doubles("lambda");
  if (lambdas.empty()) throw ConfigError("lambda must not be empty");
  std::vector<SemisupRow> rows;
  for (std::uint64_t seed : run_seeds(cfg)) {
    ExperimentData data = load_experiment_data(cfg, seed);
    const Standardizer s = input_transform(cfg, data.train.inputs);
    data.train = s.apply(data.train);
    data.test = s.apply(data.test);
    if (data.val) data.val = s.apply(*data.val);
    const auto [li, ui] = balanced_labeled_split(data.train, cfg.get_int("n_labeled"));
    const LabeledDataset labeled = data.train.subset(li);
    const Matrix unlabeled = data.train.subset(ui).inputs;
    const LossConfig lc = loss_config(cfg, lambdas.front(), data.train.num_classes);
    const TrainConfig tc = train_config(cfg, seed, lc);
    const auto dims = model_dims(cfg, data.train.dim(), data.train.num_classes);
    for (const auto& name : methods) {
      const SemisupConfig sc = semisup_config(cfg, parse_semisup_method(name));
      std::mt19937_64 init(seed);
      const TrainResult res = train_semisup(Mlp::he(dims, init), labeled, unlabeled, data.val ? &*data.val : nullptr, tc, sc);
      const auto dir = out / "runs" / (name + "_seed=" + std::to_string(seed));
      detail::ensure_dir(dir);
      save_checkpoint((dir / "model.json").string(), {res.model, s.mean, s.sd, tc.loss, lc});
      detail::write_metrics_csv(dir / "metrics.csv", res.log);
      SemisupRow row;
      row.method = name;
      if (sc.method == SemisupMethod::Pi) row.consistency = to_string(sc.pi.consistency);
      if (sc.method == SemisupMethod::Vat) row.consistency = to_string(sc.vat.consistency);
      row.seed = seed;
      row.test_error = evaluate(res.model, data.test, tc.loss, lc).error;
      row.n_labeled = labeled.size();
      row.n_unlabeled = static_cast<std::size_t>(unlabeled.rows());
      rows.push_back(row);
    }
  }
  auto csv = detail::open_csv(out / "summary.csv");
  csv << "method,consistency,loss,seed,test_error,n_labeled,n_unlabeled\n";
  for (const auto& r : rows) {
    csv << r.method << ',' << r.consistency << ',' << cfg.get("loss") << ',' << r.seed << ',' << r.test_error << ','
        << r.n_labeled << ',' << r.n_unlabeled << '\n';
  }
  return rows;
}

// ---------------------------------------------------------------------------
// gradcheck

/// All finite-difference suites; writes gradcheck.json. Uses the first seed.
inline GradcheckReport cmd_gradcheck(const ExperimentConfig& cfg) {
  const auto out = prepare_output(cfg);
  GradcheckConfig gc;
  gc.seed = run_seeds(cfg).front();
  gc.trials = cfg.get_int("trials");
  const GradcheckReport report = run_gradcheck(gc);
  detail::write_json(out / "gradcheck.json", to_json(report));
  return report;
}

// ---------------------------------------------------------------------------
// Dispatch

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"train", "eval", "ood", "beta-sweep", "semisup-train", "gradcheck"};
  return names;
}

/// Runs one command and maps failures onto the exit-code taxonomy. A short
/// human-readable summary goes to `log`; errors go to `err`.
inline int run_command(const std::string& command, const ExperimentConfig& cfg, std::ostream& log = std::cout,
                       std::ostream& err = std::cerr) {
  try {
    if (command == "train") {
      for (const auto& r : cmd_train(cfg)) {
        log << "lambda=" << r.lambda << " seed=" << r.seed << " test_error=" << r.test_error << '\n';
      }
    } else if (command == "eval") {
      const auto r = cmd_eval(cfg);
      log << "test_error=" << r.test_error << " ece=" << r.calibration.ece << " mean_entropy=" << r.mean_entropy << '\n';
    } else if (command == "ood") {
      const auto r = cmd_ood(cfg);
      log << "median_entropy in=" << r.in_distribution.median.value_or(NAN) << " ood=" << r.ood.median.value_or(NAN)
          << '\n';
    } else if (command == "beta-sweep") {
      for (const auto& c : cmd_beta_sweep(cfg)) {
        log << c.strategy << " ln_beta=" << c.ln_beta << " test_error=" << c.test_error
            << (c.diverged ? " DIVERGED (" + c.note + ")" : std::string()) << '\n';
      }
    } else if (command == "semisup-train") {
      for (const auto& r : cmd_semisup_train(cfg)) {
        log << r.method << (r.consistency.empty() ? "" : "/" + r.consistency) << " seed=" << r.seed
            << " test_error=" << r.test_error << '\n';
      }
    } else if (command == "gradcheck") {
      const auto r = cmd_gradcheck(cfg);
      for (const auto& s : r.suites) {
        log << s.name << " max_relative_error=" << s.max_relative_error << (s.passed ? " ok" : " FAILED") << '\n';
      }
      if (!r.passed()) {
        err << "gradcheck: at least one suite exceeded tolerance " << r.tolerance << '\n';
        return kExitVerification;
      }
    } else {
      err << "unknown command '" << command << "'\n";
      return kExitUsage;
    }
    return kExitOk;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "shape error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DomainError& e) {
    err << "invalid input: " << e.what() << '\n';
    return kExitUsage;
  }
}

}  // namespace bm
