#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#if defined(__unix__) || defined(__APPLE__)
#include <sys/resource.h>
#define TLRL_HAVE_RUSAGE 1
#endif

#include <Eigen/Dense>
#include <json.hpp>

#include "tlrl/backbones.hpp"
#include "tlrl/dataio.hpp"
#include "tlrl/errors.hpp"
#include "tlrl/imaging.hpp"
#include "tlrl/nn.hpp"
#include "tlrl/random.hpp"
#include "tlrl/rl.hpp"

namespace tlrl::harness {

using Matrix = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Stratified folds

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> fold_of;  // per sample

  std::vector<std::size_t> validation_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i)
      if (fold_of[i] == fold) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> train_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i)
      if (fold_of[i] != fold) out.push_back(i);
    return out;
  }
};

/// Seeded shuffle within each class, then round-robin over folds.
inline FoldPlan stratified_folds(std::span<const int> labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("need at least 2 folds");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  FoldPlan plan{k, seed, std::vector<std::size_t>(labels.size(), 0)};
  for (auto& [cls, members] : by_class) {
    if (members.size() < k)
      throw ConfigError("class " + std::to_string(cls) + " has " + std::to_string(members.size()) +
                        " samples, fewer than " + std::to_string(k) + " folds");
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(cls), "stratify"));
    rng.shuffle(members.begin(), members.end());
    for (std::size_t p = 0; p < members.size(); ++p) plan.fold_of[members[p]] = p % k;
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Metrics

/// Positive class = 1 (ransomware).
struct ConfusionMatrix {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::size_t total() const { return tp + tn + fp + fn; }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> actual) {
  if (predicted.size() != actual.size()) throw SchemaError("prediction/label length mismatch");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool p = predicted[i] == 1, a = actual[i] == 1;
    if (p && a) ++cm.tp;
    else if (!p && !a) ++cm.tn;
    else if (p) ++cm.fp;
    else ++cm.fn;
  }
  return cm;
}

/// Undefined metrics (zero denominators) are empty optionals.
struct MetricSet {
  std::optional<double> accuracy, precision, recall, f1, auc;
};

inline MetricSet metrics(const ConfusionMatrix& cm) {
  MetricSet m;
  auto ratio = [](std::size_t num, std::size_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.accuracy = ratio(cm.tp + cm.tn, cm.total());
  m.precision = ratio(cm.tp, cm.tp + cm.fp);
  m.recall = ratio(cm.tp, cm.tp + cm.fn);
  if (m.precision && m.recall && *m.precision + *m.recall > 0.0)
    m.f1 = 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall);
  return m;
}

struct RocPoint {
  double threshold;  // predict positive when score >= threshold
  double fpr;
  double tpr;
};

struct RocResult {
  double auc = 0.0;
  std::vector<RocPoint> points;
};

/// AUC as the Mann-Whitney statistic with mid-ranks for ties, plus the ROC
/// curve with one point per distinct score (and the (0,0) origin).
inline RocResult roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw SchemaError("scores/labels length mismatch");
  const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw SchemaError("ROC needs both classes present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });

  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] == 1) rank_sum += mid_rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  RocResult r;
  r.auc = (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);

  r.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = order.size(); i > 0;) {
    const double s = scores[order[i - 1]];
    while (i > 0 && scores[order[i - 1]] == s) {
      if (labels[order[i - 1]] == 1) ++tp;
      else ++fp;
      --i;
    }
    r.points.push_back({s, static_cast<double>(fp) / nn, static_cast<double>(tp) / np});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Profiling

inline constexpr std::string_view kMemoryMethod = "getrusage(RUSAGE_SELF).ru_maxrss, process-wide peak RSS in KiB";

struct Profile {
  double seconds = 0.0;
  std::optional<long> peak_rss_kib;
  std::string memory_method;
};

inline std::optional<long> peak_rss_kib() {
#ifdef TLRL_HAVE_RUSAGE
  rusage usage{};
  if (getrusage(RUSAGE_SELF, &usage) != 0) return std::nullopt;
#ifdef __APPLE__
  return usage.ru_maxrss / 1024;
#else
  return usage.ru_maxrss;
#endif
#else
  return std::nullopt;
#endif
}

/// Wall-clock (steady clock) duration of `fn` and the peak RSS after it ran.
template <typename F>
Profile profile(F&& fn) {
  const auto start = std::chrono::steady_clock::now();
  std::forward<F>(fn)();
  const auto stop = std::chrono::steady_clock::now();
  Profile p;
  p.seconds = std::chrono::duration<double>(stop - start).count();
  p.peak_rss_kib = peak_rss_kib();
  p.memory_method = p.peak_rss_kib ? std::string(kMemoryMethod) : "unavailable on this platform";
  return p;
}

// ---------------------------------------------------------------------------
// Featurization

struct BackboneSpec {
  std::size_t dim = 0;
  std::uint64_t seed = 0;
};

struct FeaturizerConfig {
  bool imaging = true;
  std::vector<BackboneSpec> backbones;
  std::size_t patch_size = 16;
  dataio::EncodingOptions encoding;
};

/// Default backbone widths fuse to 3328.
inline std::vector<BackboneSpec> default_backbones(std::uint64_t master_seed) {
  return {{1280, derive_seed(master_seed, 0, "backbone")}, {2048, derive_seed(master_seed, 1, "backbone")}};
}

inline nlohmann::json to_json(const FeaturizerConfig& c) {
  nlohmann::json bb = nlohmann::json::array();
  for (const auto& b : c.backbones) bb.push_back({{"kind", "random-projection"}, {"dim", b.dim}, {"seed", b.seed}});
  return {{"imaging", c.imaging},
          {"backbones", bb},
          {"patch_size", c.patch_size},
          {"frequency_fields", c.encoding.frequency_fields},
          {"frequency_mode", c.encoding.frequency_mode == dataio::FrequencyMode::rank ? "rank" : "count"}};
}

/// image -> every backbone -> concatenation, for standardized feature rows.
class Featurizer {
 public:
  explicit Featurizer(const FeaturizerConfig& config) : config_(config) {
    if (config.imaging && config.backbones.empty()) throw ConfigError("imaging needs at least one backbone");
    for (const auto& b : config.backbones)
      extractors_.push_back(std::make_unique<backbones::RandomProjectionExtractor>(b.dim, b.seed, config.patch_size));
  }

  const FeaturizerConfig& config() const { return config_; }
  const std::vector<std::unique_ptr<backbones::Extractor>>& extractors() const { return extractors_; }

  std::size_t output_dim(std::size_t input_dim) const {
    if (!config_.imaging) return input_dim;
    std::size_t d = 0;
    for (const auto& e : extractors_) d += e->output_dim();
    return d;
  }

  backbones::FusedEmbedding embed_row(std::span<const double> row) const {
    const auto img = imaging::vector_to_image(row);
    std::vector<backbones::Embedding> parts;
    parts.reserve(extractors_.size());
    for (const auto& e : extractors_) parts.push_back(e->extract(img));
    return backbones::fuse(parts);
  }

  Matrix embed(const Matrix& standardized) const {
    if (!config_.imaging) return standardized;
    Matrix out(standardized.rows(), static_cast<Eigen::Index>(output_dim(static_cast<std::size_t>(standardized.cols()))));
    std::vector<double> row(static_cast<std::size_t>(standardized.cols()));
    for (Eigen::Index i = 0; i < standardized.rows(); ++i) {
      for (Eigen::Index j = 0; j < standardized.cols(); ++j) row[static_cast<std::size_t>(j)] = standardized(i, j);
      const auto fused = embed_row(row);
      for (std::size_t j = 0; j < fused.values.size(); ++j) out(i, static_cast<Eigen::Index>(j)) = fused.values[j];
    }
    return out;
  }

 private:
  FeaturizerConfig config_;
  std::vector<std::unique_ptr<backbones::Extractor>> extractors_;
};

/// Whole-dataset featurization for export: dedup, encode, standardize,
/// image, extract, fuse. Stats are fitted on all records given (no labels
/// are used).
inline backbones::EmbeddingMatrix featurize_records(std::span<const dataio::BehaviorRecord> records,
                                                    const Featurizer& featurizer,
                                                    std::vector<std::string>* warnings = nullptr) {
  const auto unique = dataio::deduplicate(records);
  const auto plan = dataio::fit_encoding(unique, featurizer.config().encoding);
  const auto encoded = dataio::encode(unique, plan, warnings);
  const auto [z, stats] = dataio::standardize(encoded.values);
  const Matrix e = featurizer.embed(z);
  backbones::EmbeddingMatrix m;
  m.rows = static_cast<std::size_t>(e.rows());
  m.dim = static_cast<std::size_t>(e.cols());
  m.labels.assign(encoded.labels.begin(), encoded.labels.end());
  m.values.resize(m.rows * m.dim);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.dim; ++c)
      m.values[r * m.dim + c] = static_cast<float>(e(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
  return m;
}

// ---------------------------------------------------------------------------
// Datasets

/// Classifier-ready vectors (e.g. imported backbone embeddings).
struct FeatureSource {
  Matrix features;
};

/// Raw records, featurized inside every fold from its training split.
struct RecordSource {
  std::vector<dataio::BehaviorRecord> records;
};

struct Dataset {
  std::variant<FeatureSource, RecordSource> source;
  std::vector<int> labels;
  std::uint64_t fingerprint = 0;

  std::size_t size() const { return labels.size(); }
};

inline Dataset dataset_from_embeddings(const backbones::EmbeddingMatrix& m) {
  Dataset d;
  d.source = FeatureSource{m.to_matrix()};
  d.labels.assign(m.labels.begin(), m.labels.end());
  d.fingerprint = backbones::fingerprint(m);
  return d;
}

/// Duplicates are removed up front so a record never lands in both splits.
inline Dataset dataset_from_records(std::span<const dataio::BehaviorRecord> records) {
  Dataset d;
  RecordSource src{dataio::deduplicate(records)};
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& r : src.records) {
    d.labels.push_back(r.label);
    h = fnv1a(dataio::record_to_line(r), h);
    h = fnv1a("\n", h);
  }
  d.fingerprint = h;
  d.source = std::move(src);
  return d;
}

inline std::string fingerprint_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Cross-validation

/// Called with the global sample indices a fitting stage is allowed to see.
using AccessLog = std::function<void(std::size_t fold, std::string_view stage, std::span<const std::size_t> indices)>;

struct CvConfig {
  std::size_t folds = 5;
  std::uint64_t seed = 42;
  std::size_t jobs = 1;
  nn::ModelConfig model;
  std::optional<rl::AgentConfig> agent = rl::AgentConfig{};
  FeaturizerConfig featurizer;
  bool standardize_inputs = true;
  bool keep_models = false;
  AccessLog access_log;
};

/// Result-relevant settings only (jobs and hooks excluded).
inline nlohmann::json to_json(const CvConfig& c) {
  return {{"cv", {{"folds", c.folds}, {"seed", c.seed}, {"standardize_inputs", c.standardize_inputs}}},
          {"model", nn::to_json(c.model)},
          {"agent", c.agent ? rl::to_json(*c.agent) : nlohmann::json(nullptr)},
          {"featurization", to_json(c.featurizer)}};
}

struct FoldData {
  std::size_t fold = 0;
  Matrix x_train, x_val;
  std::vector<int> y_train, y_val;
  std::vector<std::size_t> train_idx, val_idx;  // global indices
  std::vector<std::string> warnings;
};

struct FoldReport {
  std::size_t fold = 0;
  std::size_t train_size = 0, validation_size = 0;
  ConfusionMatrix confusion;
  MetricSet metrics;
  std::vector<std::size_t> validation_indices;
  std::vector<double> scores;  // P(class 1) on the validation split
  std::vector<int> labels, predictions;
  std::vector<std::vector<nn::EpochStat>> loss_traces;  // one per round
  std::vector<double> final_weights;
  std::optional<rl::QTable> agent;
  std::optional<nn::ModelState> model;
  Profile train_profile, inference_profile;
  std::size_t model_state_bytes = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline void log_access(const CvConfig& cfg, std::size_t fold, std::string_view stage,
                       std::span<const std::size_t> idx) {
  if (cfg.access_log) cfg.access_log(fold, stage, idx);
}

inline Matrix rows_of(const Matrix& x, std::span<const std::size_t> idx) { return nn::gather_rows(x, idx); }

}  // namespace detail

/// Builds one fold's classifier inputs. All fitted statistics (encoding
/// tables, standardization) come from the training split only.
inline FoldData prepare_fold(const Dataset& data, const FoldPlan& plan, std::size_t fold, const CvConfig& cfg,
                             const Featurizer* featurizer) {
  FoldData fd;
  fd.fold = fold;
  fd.train_idx = plan.train_indices(fold);
  fd.val_idx = plan.validation_indices(fold);
  for (auto i : fd.train_idx) fd.y_train.push_back(data.labels[i]);
  for (auto i : fd.val_idx) fd.y_val.push_back(data.labels[i]);

  if (const auto* fs = std::get_if<FeatureSource>(&data.source)) {
    fd.x_train = detail::rows_of(fs->features, fd.train_idx);
    fd.x_val = detail::rows_of(fs->features, fd.val_idx);
  } else {
    const auto& records = std::get<RecordSource>(data.source).records;
    std::vector<dataio::BehaviorRecord> tr, va;
    for (auto i : fd.train_idx) tr.push_back(records[i]);
    for (auto i : fd.val_idx) va.push_back(records[i]);
    detail::log_access(cfg, fold, "encoding_fit", fd.train_idx);
    const auto enc = dataio::fit_encoding(tr, cfg.featurizer.encoding);
    const auto xtr = dataio::encode(tr, enc);
    const auto xva = dataio::encode(va, enc, &fd.warnings);
    detail::log_access(cfg, fold, "standardization_fit", fd.train_idx);
    const auto stats = dataio::fit_standardization(xtr.values);
    const Matrix ztr = dataio::apply_standardization(xtr.values, stats);
    const Matrix zva = dataio::apply_standardization(xva.values, stats);
    if (!featurizer) throw InvariantError("record datasets need a featurizer");
    fd.x_train = featurizer->embed(ztr);
    fd.x_val = featurizer->embed(zva);
  }
  if (cfg.standardize_inputs) {
    detail::log_access(cfg, fold, "input_standardization_fit", fd.train_idx);
    const auto stats = dataio::fit_standardization(fd.x_train);
    fd.x_train = dataio::apply_standardization(fd.x_train, stats);
    fd.x_val = dataio::apply_standardization(fd.x_val, stats);
  }
  return fd;
}

/// One fold: (optionally) agent-weighted training rounds, then evaluation on
/// the fold's validation split.
inline FoldReport run_fold(const FoldData& fd, const nn::ModelConfig& model_config,
                           const std::optional<rl::AgentConfig>& agent_config, std::uint64_t seed,
                           const CvConfig* hooks = nullptr) {
  FoldReport rep;
  rep.fold = fd.fold;
  rep.train_size = fd.y_train.size();
  rep.validation_size = fd.y_val.size();
  rep.validation_indices = fd.val_idx;
  rep.labels = fd.y_val;
  rep.warnings = fd.warnings;

  nn::ModelConfig mc = model_config;
  mc.input_dim = static_cast<std::size_t>(fd.x_train.cols());
  const std::uint64_t fold_seed = derive_seed(seed, fd.fold, "fold");
  const std::uint64_t init_seed = derive_seed(fold_seed, 0, "init");
  const std::size_t n_train = rep.train_size;
  const std::size_t n_val = rep.validation_size;

  const bool use_agent = agent_config.has_value();
  const bool update_on_val = use_agent && agent_config->update_split == rl::UpdateSplit::validation;
  const std::size_t rounds = use_agent ? agent_config->rounds_per_fold : 1;
  std::optional<rl::QTable> agent;
  if (use_agent) agent = rl::init_agent(n_train + (update_on_val ? n_val : 0), *agent_config);
  Rng agent_rng(derive_seed(fold_seed, 0, "agent"));

  std::vector<std::size_t> train_rows(n_train);
  std::iota(train_rows.begin(), train_rows.end(), std::size_t{0});
  std::vector<std::size_t> val_rows(n_val);
  std::iota(val_rows.begin(), val_rows.end(), n_train);

  std::optional<nn::ModelState> model;
  rep.train_profile = profile([&] {
    for (std::size_t round = 0; round < rounds; ++round) {
      std::vector<double> weights =
          use_agent ? rl::assign_weights(*agent, train_rows, agent_rng) : std::vector<double>(n_train, 1.0);
      model = nn::build(mc, init_seed);
      Rng train_rng(derive_seed(fold_seed, round, "train"));
      if (hooks) detail::log_access(*hooks, fd.fold, "train", fd.train_idx);
      rep.loss_traces.push_back(nn::train(*model, fd.x_train, fd.y_train, weights, train_rng).trace);
      rep.final_weights = std::move(weights);
      if (!use_agent) continue;
      if (update_on_val) {
        const auto pred = nn::predict(*model, fd.x_val);
        if (hooks) detail::log_access(*hooks, fd.fold, "agent_update", fd.val_idx);
        rl::update_q(*agent, val_rows, rl::compute_rewards(pred.labels, fd.y_val));
      } else {
        const auto pred = nn::predict(*model, fd.x_train);
        if (hooks) detail::log_access(*hooks, fd.fold, "agent_update", fd.train_idx);
        rl::update_q(*agent, train_rows, rl::compute_rewards(pred.labels, fd.y_train));
      }
    }
  });

  nn::Prediction pred;
  rep.inference_profile = profile([&] { pred = nn::predict(*model, fd.x_val); });
  rep.predictions = pred.labels;
  rep.scores.resize(n_val);
  for (std::size_t i = 0; i < n_val; ++i) rep.scores[i] = pred.probs(static_cast<Eigen::Index>(i), 1);
  rep.confusion = confusion(rep.predictions, rep.labels);
  rep.metrics = metrics(rep.confusion);
  const bool both = std::count(rep.labels.begin(), rep.labels.end(), 1) > 0 &&
                    std::count(rep.labels.begin(), rep.labels.end(), 0) > 0;
  if (both) rep.metrics.auc = roc_auc(rep.scores, rep.labels).auc;
  // parameters, gradients and two Adam moments, plus BN running statistics
  rep.model_state_bytes = sizeof(double) * (4 * model->trainable_count() + (model->parameter_count() - model->trainable_count()));
  rep.agent = std::move(agent);
  if (hooks && hooks->keep_models) rep.model = std::move(model);
  return rep;
}

struct SummaryStat {
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::size_t count = 0;
};

struct RunReport {
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::uint64_t fingerprint = 0;
  std::vector<FoldReport> folds;
  ConfusionMatrix aggregate;
  MetricSet pooled;
  RocResult pooled_roc;
  std::map<std::string, std::optional<SummaryStat>> summary;
};

inline std::optional<SummaryStat> summarize(const std::vector<std::optional<double>>& values) {
  std::vector<double> v;
  for (const auto& x : values)
    if (x) v.push_back(*x);
  if (v.empty()) return std::nullopt;
  SummaryStat s;
  s.count = v.size();
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(ss / static_cast<double>(v.size()));
  return s;
}

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"accuracy", "precision", "recall", "f1", "auc"};
  return names;
}

inline std::optional<double> metric_value(const MetricSet& m, std::string_view name) {
  if (name == "accuracy") return m.accuracy;
  if (name == "precision") return m.precision;
  if (name == "recall") return m.recall;
  if (name == "f1") return m.f1;
  if (name == "auc") return m.auc;
  throw InvariantError("unknown metric " + std::string(name));
}

/// Runs a single fold of the plan; folds share nothing but read-only inputs.
inline FoldReport run_cv_fold(const Dataset& data, const FoldPlan& plan, const CvConfig& cfg, std::size_t fold,
                              const Featurizer* featurizer) {
  const FoldData fd = prepare_fold(data, plan, fold, cfg, featurizer);
  return run_fold(fd, cfg.model, cfg.agent, cfg.seed, &cfg);
}

/// Merges fold reports (ordered by fold index) into a run report.
inline RunReport assemble_report(std::vector<FoldReport> folds, const CvConfig& cfg, std::uint64_t fingerprint) {
  RunReport rep;
  rep.config = to_json(cfg);
  rep.seed = cfg.seed;
  rep.fingerprint = fingerprint;
  std::sort(folds.begin(), folds.end(), [](const auto& a, const auto& b) { return a.fold < b.fold; });
  rep.folds = std::move(folds);
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& f : rep.folds) {
    rep.aggregate += f.confusion;
    scores.insert(scores.end(), f.scores.begin(), f.scores.end());
    labels.insert(labels.end(), f.labels.begin(), f.labels.end());
  }
  rep.pooled = metrics(rep.aggregate);
  if (std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0) {
    rep.pooled_roc = roc_auc(scores, labels);
    rep.pooled.auc = rep.pooled_roc.auc;
  }
  for (const auto& name : metric_names()) {
    std::vector<std::optional<double>> vals;
    for (const auto& f : rep.folds) vals.push_back(metric_value(f.metrics, name));
    rep.summary[name] = summarize(vals);
  }
  return rep;
}

/// Stratified k-fold cross-validation; up to `jobs` folds run concurrently.
inline RunReport run_cv(const Dataset& data, const CvConfig& cfg) {
  cfg.model.validate();
  if (cfg.agent) cfg.agent->validate();
  const FoldPlan plan = stratified_folds(data.labels, cfg.folds, cfg.seed);
  std::unique_ptr<Featurizer> featurizer;
  if (std::holds_alternative<RecordSource>(data.source)) featurizer = std::make_unique<Featurizer>(cfg.featurizer);

  std::vector<FoldReport> folds(cfg.folds);
  std::vector<std::exception_ptr> errors(cfg.folds);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t f = next++; f < cfg.folds; f = next++) {
      try {
        folds[f] = run_cv_fold(data, plan, cfg, f, featurizer.get());
      } catch (...) {
        errors[f] = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(cfg.jobs, 1, cfg.folds);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return assemble_report(std::move(folds), cfg, data.fingerprint);
}

// ---------------------------------------------------------------------------
// Report serialization

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const ConfusionMatrix& cm) {
  return {{"tp", cm.tp}, {"tn", cm.tn}, {"fp", cm.fp}, {"fn", cm.fn}};
}

inline nlohmann::json to_json(const MetricSet& m) {
  nlohmann::json j;
  for (const auto& name : metric_names()) j[name] = optional_json(metric_value(m, name));
  return j;
}

inline nlohmann::json profile_json(const Profile& p) {
  return {{"seconds", p.seconds}};
}

/// Report document; keys are sorted, timing and memory live under their own keys.
inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json j;
  j["config"] = r.config;
  j["seed"] = r.seed;
  j["dataset_fingerprint"] = fingerprint_hex(r.fingerprint);
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    nlohmann::json fj;
    fj["fold"] = f.fold;
    fj["train_size"] = f.train_size;
    fj["validation_size"] = f.validation_size;
    fj["confusion"] = to_json(f.confusion);
    fj["metrics"] = to_json(f.metrics);
    fj["final_train_loss"] = f.loss_traces.empty() || f.loss_traces.back().empty()
                                 ? nlohmann::json(nullptr)
                                 : nlohmann::json(f.loss_traces.back().back().mean_loss);
    fj["mean_sample_weight"] =
        f.final_weights.empty() ? 0.0
                                : std::accumulate(f.final_weights.begin(), f.final_weights.end(), 0.0) /
                                      static_cast<double>(f.final_weights.size());
    fj["warnings"] = f.warnings.size();
    fj["timing"] = {{"train_seconds", f.train_profile.seconds}, {"inference_seconds", f.inference_profile.seconds}};
    fj["memory"] = {{"peak_rss_kib", f.inference_profile.peak_rss_kib ? nlohmann::json(*f.inference_profile.peak_rss_kib)
                                                                      : nlohmann::json(nullptr)},
                    {"method", f.inference_profile.memory_method},
                    {"model_state_bytes", f.model_state_bytes}};
    folds.push_back(std::move(fj));
  }
  j["folds"] = std::move(folds);
  nlohmann::json summary;
  for (const auto& [name, s] : r.summary)
    summary[name] = s ? nlohmann::json{{"mean", s->mean}, {"std", s->stddev}, {"folds", s->count}} : nlohmann::json(nullptr);
  j["fold_summary"] = std::move(summary);
  j["aggregate"] = {{"confusion", to_json(r.aggregate)}, {"metrics", to_json(r.pooled)}, {"roc_points", r.pooled_roc.points.size()}};
  return j;
}

/// Removes timing and memory fields, leaving what must be reproducible.
inline nlohmann::json strip_nondeterministic(nlohmann::json j) {
  if (j.contains("folds"))
    for (auto& f : j["folds"]) {
      f.erase("timing");
      f.erase("memory");
    }
  return j;
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out.precision(17);
  return out;
}

inline std::string csv_value(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream s;
  s.precision(17);
  s << *v;
  return s.str();
}

}  // namespace detail

/// report.json plus roc_points.csv, fold_metrics.csv, confusion.csv,
/// timings.csv and per-fold loss/Q-table CSVs.
inline void write_report(const std::filesystem::path& dir, const RunReport& r) {
  std::filesystem::create_directories(dir);
  detail::open_out(dir / "report.json") << to_json(r).dump(2) << '\n';

  {
    auto out = detail::open_out(dir / "roc_points.csv");
    out << "threshold,fpr,tpr\n";
    for (const auto& p : r.pooled_roc.points) out << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
  }
  {
    auto out = detail::open_out(dir / "fold_metrics.csv");
    out << "fold";
    for (const auto& n : metric_names()) out << ',' << n;
    out << '\n';
    for (const auto& f : r.folds) {
      out << f.fold;
      for (const auto& n : metric_names()) out << ',' << detail::csv_value(metric_value(f.metrics, n));
      out << '\n';
    }
    for (const char* row : {"mean", "std"}) {
      out << row;
      for (const auto& n : metric_names()) {
        const auto& s = r.summary.at(n);
        out << ',' << (s ? detail::csv_value(std::string_view(row) == "mean" ? s->mean : s->stddev) : "");
      }
      out << '\n';
    }
    out << "pooled";
    for (const auto& n : metric_names()) out << ',' << detail::csv_value(metric_value(r.pooled, n));
    out << '\n';
  }
  {
    auto out = detail::open_out(dir / "confusion.csv");
    out << "fold,tp,tn,fp,fn\n";
    for (const auto& f : r.folds)
      out << f.fold << ',' << f.confusion.tp << ',' << f.confusion.tn << ',' << f.confusion.fp << ',' << f.confusion.fn << '\n';
    out << "aggregate," << r.aggregate.tp << ',' << r.aggregate.tn << ',' << r.aggregate.fp << ',' << r.aggregate.fn << '\n';
  }
  {
    auto out = detail::open_out(dir / "timings.csv");
    out << "fold,train_seconds,inference_seconds,peak_rss_kib,model_state_bytes\n";
    for (const auto& f : r.folds)
      out << f.fold << ',' << f.train_profile.seconds << ',' << f.inference_profile.seconds << ','
          << (f.inference_profile.peak_rss_kib ? std::to_string(*f.inference_profile.peak_rss_kib) : "") << ','
          << f.model_state_bytes << '\n';
  }
  for (const auto& f : r.folds) {
    auto out = detail::open_out(dir / ("loss_fold" + std::to_string(f.fold) + ".csv"));
    out << "round,epoch,mean_loss,lr\n";
    for (std::size_t round = 0; round < f.loss_traces.size(); ++round)
      for (const auto& e : f.loss_traces[round]) out << round << ',' << e.epoch << ',' << e.mean_loss << ',' << e.lr << '\n';
    if (f.agent) {
      auto q = detail::open_out(dir / ("qtable_fold" + std::to_string(f.fold) + ".csv"));
      rl::write_qtable_csv(q, *f.agent);
    }
    if (f.model) {
      std::ofstream m(dir / ("model_fold" + std::to_string(f.fold) + ".tlnn"), std::ios::binary | std::ios::trunc);
      nn::save_checkpoint(m, *f.model);
    }
  }
}

}  // namespace tlrl::harness
