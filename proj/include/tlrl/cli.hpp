#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tlrl/tlrl.hpp"

namespace tlrl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kUsage = 2, kDataFormat = 3, kInternal = 4 };

enum class SourceKind { none, records, embeddings, synthetic };

struct DatasetSource {
  SourceKind kind = SourceKind::none;
  std::string path;
  dataio::SyntheticConfig synthetic;
  bool synthetic_seed_set = false;
};

inline DatasetSource file_source(SourceKind kind, std::string path) {
  DatasetSource d;
  d.kind = kind;
  d.path = std::move(path);
  return d;
}

struct RunConfig {
  std::uint64_t seed = 42;
  std::size_t jobs = 1;
  std::string out_dir = "tlrl-out";
  DatasetSource dataset;
  bool imaging = true;
  std::vector<std::string> backbones{"rp:1280", "rp:2048"};
  std::size_t patch_size = 16;
  dataio::EncodingOptions encoding;
  nn::ModelConfig model;
  std::optional<rl::AgentConfig> agent = rl::AgentConfig{};
  std::size_t folds = 5;
  bool standardize_inputs = true;
  bool save_models = false;

  void validate() const {
    if (folds < 2) throw ConfigError("folds must be >= 2");
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    model.validate();
    if (agent) agent->validate();
  }
};

/// "rp:D" or "rp:D:SEED"; a missing seed is derived from the run seed and position.
inline harness::BackboneSpec parse_backbone(const std::string& spec, std::uint64_t seed, std::size_t position) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.size() < 2 || parts.size() > 3 || parts[0] != "rp")
    throw ConfigError("backbone '" + spec + "' must look like rp:DIM or rp:DIM:SEED");
  harness::BackboneSpec b;
  try {
    std::size_t used = 0;
    b.dim = std::stoull(parts[1], &used);
    if (used != parts[1].size() || b.dim == 0) throw std::invalid_argument("dim");
    b.seed = derive_seed(seed, position, "backbone");
    if (parts.size() == 3) {
      b.seed = std::stoull(parts[2], &used);
      if (used != parts[2].size()) throw std::invalid_argument("seed");
    }
  } catch (const std::logic_error&) {
    throw ConfigError("backbone '" + spec + "' has a malformed number");
  }
  return b;
}

inline harness::FeaturizerConfig featurizer_config(const RunConfig& c) {
  harness::FeaturizerConfig f;
  f.imaging = c.imaging;
  f.patch_size = c.patch_size;
  f.encoding = c.encoding;
  for (std::size_t i = 0; i < c.backbones.size(); ++i) f.backbones.push_back(parse_backbone(c.backbones[i], c.seed, i));
  return f;
}

inline harness::CvConfig cv_config(const RunConfig& c) {
  harness::CvConfig cv;
  cv.folds = c.folds;
  cv.seed = c.seed;
  cv.jobs = c.jobs;
  cv.model = c.model;
  cv.agent = c.agent;
  cv.featurizer = featurizer_config(c);
  cv.standardize_inputs = c.standardize_inputs;
  cv.keep_models = c.save_models;
  return cv;
}

inline json synthetic_to_json(const dataio::SyntheticConfig& s) {
  return {{"samples", s.n_samples},
          {"features", s.n_features},
          {"balance", s.class_balance},
          {"hard", s.hard_fraction},
          {"seed", s.seed},
          {"separation", s.separation},
          {"hard_separation", s.hard_separation},
          {"informative", s.informative_fraction}};
}

inline void synthetic_from_json(const json& j, DatasetSource& d) {
  auto& s = d.synthetic;
  for (const auto& [key, v] : j.items()) {
    if (key == "samples") s.n_samples = v.get<std::size_t>();
    else if (key == "features") s.n_features = v.get<std::size_t>();
    else if (key == "balance") s.class_balance = v.get<double>();
    else if (key == "hard") s.hard_fraction = v.get<double>();
    else if (key == "separation") s.separation = v.get<double>();
    else if (key == "hard_separation") s.hard_separation = v.get<double>();
    else if (key == "informative") s.informative_fraction = v.get<double>();
    else if (key == "seed") {
      s.seed = v.get<std::uint64_t>();
      d.synthetic_seed_set = true;
    } else throw ConfigError("unknown synthetic key '" + key + "'");
  }
}

inline json dataset_to_json(const DatasetSource& d) {
  switch (d.kind) {
    case SourceKind::records: return {{"records", d.path}};
    case SourceKind::embeddings: return {{"embeddings", d.path}};
    case SourceKind::synthetic: return {{"synthetic", synthetic_to_json(d.synthetic)}};
    case SourceKind::none: break;
  }
  return nullptr;
}

/// Reads a config document over `c`. Accepts either a plain config or a
/// report.json, whose "config" echo is used.
inline RunConfig run_config_from_json(const json& doc, RunConfig c = {}) {
  const json& j = doc.contains("config") && doc.contains("folds") ? doc.at("config") : doc;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "jobs") c.jobs = v.get<std::size_t>();
      else if (key == "out_dir") c.out_dir = v.get<std::string>();
      else if (key == "dataset") {
        if (v.is_null()) continue;
        if (v.size() != 1) throw ConfigError("dataset needs exactly one of records, embeddings, synthetic");
        if (v.contains("records")) c.dataset = file_source(SourceKind::records, v["records"].get<std::string>());
        else if (v.contains("embeddings")) c.dataset = file_source(SourceKind::embeddings, v["embeddings"].get<std::string>());
        else if (v.contains("synthetic")) {
          c.dataset = file_source(SourceKind::synthetic, {});
          synthetic_from_json(v["synthetic"], c.dataset);
        } else throw ConfigError("dataset needs exactly one of records, embeddings, synthetic");
      } else if (key == "cv") {
        for (const auto& [k, x] : v.items()) {
          if (k == "folds") c.folds = x.get<std::size_t>();
          else if (k == "seed") c.seed = x.get<std::uint64_t>();
          else if (k == "standardize_inputs") c.standardize_inputs = x.get<bool>();
          else throw ConfigError("unknown cv key '" + k + "'");
        }
      } else if (key == "featurization") {
        if (v.is_null()) continue;
        for (const auto& [k, x] : v.items()) {
          if (k == "imaging") c.imaging = x.get<bool>();
          else if (k == "patch_size") c.patch_size = x.get<std::size_t>();
          else if (k == "frequency_fields") c.encoding.frequency_fields = x.get<std::set<std::string>>();
          else if (k == "frequency_mode") {
            const auto m = x.get<std::string>();
            if (m != "rank" && m != "count") throw ConfigError("frequency_mode must be rank or count");
            c.encoding.frequency_mode = m == "rank" ? dataio::FrequencyMode::rank : dataio::FrequencyMode::count;
          } else if (k == "backbones") {
            c.backbones.clear();
            for (const auto& b : x) {
              if (b.is_string()) c.backbones.push_back(b.get<std::string>());
              else c.backbones.push_back("rp:" + std::to_string(b.at("dim").get<std::size_t>()) + ":" +
                                         std::to_string(b.at("seed").get<std::uint64_t>()));
            }
          } else throw ConfigError("unknown featurization key '" + k + "'");
        }
      } else if (key == "model") c.model = nn::model_config_from_json(v, c.model);
      else if (key == "agent") {
        if (v.is_null() || (v.is_boolean() && !v.get<bool>())) c.agent.reset();
        else if (v.is_boolean()) c.agent = c.agent.value_or(rl::AgentConfig{});
        else c.agent = rl::agent_config_from_json(v, c.agent.value_or(rl::AgentConfig{}));
      } else throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, std::move(base));
}

inline void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("no ") + what + " given");
  if (!fs::is_regular_file(path)) throw ConfigError(std::string(what) + " '" + path + "' does not exist");
}

inline std::vector<dataio::BehaviorRecord> load_records(const std::string& path) {
  require_file(path, "records file");
  std::ifstream in(path);
  return dataio::parse_records(in);
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_synth(const RunConfig& c, const std::string& out_path, std::ostream& out) {
  auto s = c.dataset.synthetic;
  if (!c.dataset.synthetic_seed_set) s.seed = c.seed;
  const auto data = dataio::generate_synthetic(s);
  const fs::path path = out_path.empty() ? fs::path(c.out_dir) / "records.jsonl" : fs::path(out_path);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path.string());
  dataio::write_records(f, data.records);
  std::size_t pos = 0;
  for (const auto& r : data.records) pos += r.label == 1 ? 1 : 0;
  out << "wrote " << data.records.size() << " records (" << pos << " ransomware, " << data.records.size() - pos
      << " benign) to " << path.string() << '\n';
  return kOk;
}

inline int cmd_featurize(const RunConfig& c, const std::string& out_path, std::size_t dump_images, std::ostream& out) {
  const auto records = load_records(c.dataset.path);
  const harness::Featurizer featurizer(featurizer_config(c));
  std::vector<std::string> warnings;
  const auto m = harness::featurize_records(records, featurizer, &warnings);
  const fs::path path = out_path.empty() ? fs::path(c.out_dir) / "embeddings.tlrl" : fs::path(out_path);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  backbones::write_embeddings(path.string(), m);

  if (dump_images > 0) {
    const auto unique = dataio::deduplicate(records);
    const auto plan = dataio::fit_encoding(unique, c.encoding);
    const auto z = dataio::standardize(dataio::encode(unique, plan).values).first;
    const fs::path dir = fs::path(c.out_dir) / "images";
    fs::create_directories(dir);
    std::vector<double> row(static_cast<std::size_t>(z.cols()));
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(z.rows(), static_cast<Eigen::Index>(dump_images)); ++i) {
      for (Eigen::Index j = 0; j < z.cols(); ++j) row[static_cast<std::size_t>(j)] = z(i, j);
      std::ofstream img(dir / (unique[static_cast<std::size_t>(i)].id + ".tlim"), std::ios::binary | std::ios::trunc);
      imaging::write_image_raw(img, imaging::vector_to_image(row));
    }
  }
  out << "wrote " << m.rows << " x " << m.dim << " embeddings to " << path.string() << " (fingerprint "
      << harness::fingerprint_hex(backbones::fingerprint(m)) << ")\n";
  if (records.size() != m.rows) out << "dropped " << records.size() - m.rows << " duplicate records\n";
  return kOk;
}

inline void print_headline(std::ostream& out, const harness::RunReport& r) {
  out << std::left << std::setw(11) << "metric" << std::setw(20) << "fold mean +- std" << "pooled\n";
  for (const auto& name : harness::metric_names()) {
    out << std::setw(11) << name;
    std::ostringstream cell;
    cell << std::fixed << std::setprecision(4);
    if (const auto& s = r.summary.at(name)) cell << s->mean << " +- " << s->stddev;
    else cell << "undefined";
    out << std::setw(20) << cell.str();
    if (const auto p = harness::metric_value(r.pooled, name)) out << std::fixed << std::setprecision(4) << *p;
    else out << "undefined";
    out << '\n';
  }
  out.unsetf(std::ios::fixed);
  out << "confusion (all folds): TP=" << r.aggregate.tp << " TN=" << r.aggregate.tn << " FP=" << r.aggregate.fp
      << " FN=" << r.aggregate.fn << '\n';
}

inline harness::RunReport cmd_train_report(RunConfig c) {
  harness::Dataset data;
  harness::CvConfig cv;
  switch (c.dataset.kind) {
    case SourceKind::embeddings: {
      require_file(c.dataset.path, "embeddings file");
      data = harness::dataset_from_embeddings(backbones::read_embeddings(c.dataset.path));
      c.model.input_dim = static_cast<std::size_t>(std::get<harness::FeatureSource>(data.source).features.cols());
      break;
    }
    case SourceKind::records:
      data = harness::dataset_from_records(load_records(c.dataset.path));
      break;
    case SourceKind::synthetic: {
      auto s = c.dataset.synthetic;
      if (!c.dataset.synthetic_seed_set) s.seed = c.seed;
      c.dataset.synthetic = s;
      c.dataset.synthetic_seed_set = true;
      data = harness::dataset_from_records(dataio::generate_synthetic(s).records);
      break;
    }
    case SourceKind::none: throw ConfigError("train needs a dataset (--embeddings, --records or a config dataset)");
  }
  if (c.dataset.kind != SourceKind::embeddings) {
    const auto& recs = std::get<harness::RecordSource>(data.source).records;
    if (recs.empty()) throw SchemaError("dataset has no records");
    const harness::Featurizer f(featurizer_config(c));
    c.model.input_dim = f.output_dim(recs.front().fields.size());
  }
  c.validate();
  cv = cv_config(c);
  auto report = harness::run_cv(data, cv);
  report.config = harness::to_json(cv);
  report.config["dataset"] = dataset_to_json(c.dataset);
  if (c.dataset.kind == SourceKind::embeddings) report.config["featurization"] = nullptr;
  return report;
}

inline int cmd_train(const RunConfig& c, std::ostream& out) {
  const auto report = cmd_train_report(c);
  harness::write_report(c.out_dir, report);
  print_headline(out, report);
  out << "report written to " << (fs::path(c.out_dir) / "report.json").string() << '\n';
  return kOk;
}

inline json read_report(const std::string& path) {
  fs::path p = path;
  if (fs::is_directory(p)) p /= "report.json";
  require_file(p.string(), "report");
  std::ifstream in(p);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(p.string() + " is not valid JSON: " + e.what());
  }
  if (!j.contains("folds") || !j.contains("dataset_fingerprint") || !j.contains("aggregate"))
    throw FormatError(p.string() + " is not a run report");
  return j;
}

inline std::optional<double> json_metric(const json& metrics, const std::string& name) {
  if (!metrics.contains(name) || metrics[name].is_null()) return std::nullopt;
  return metrics[name].get<double>();
}

struct CompareRow {
  std::string scope;  // fold index, "mean" or "pooled"
  std::string metric;
  std::optional<double> baseline, candidate, delta;
};

/// Candidate minus baseline, per fold, for the fold means and for the pooled metrics.
inline std::vector<CompareRow> compare_reports(const json& baseline, const json& candidate) {
  if (baseline["dataset_fingerprint"] != candidate["dataset_fingerprint"])
    throw FormatError("reports come from different datasets (fingerprints " +
                      baseline["dataset_fingerprint"].get<std::string>() + " vs " +
                      candidate["dataset_fingerprint"].get<std::string>() + "); refusing to compare");
  if (baseline["folds"].size() != candidate["folds"].size()) throw FormatError("reports have different fold counts");
  std::vector<CompareRow> rows;
  auto add = [&](const std::string& scope, const std::string& m, std::optional<double> b, std::optional<double> c) {
    CompareRow r{scope, m, b, c, std::nullopt};
    if (b && c) r.delta = *c - *b;
    rows.push_back(r);
  };
  for (std::size_t f = 0; f < baseline["folds"].size(); ++f)
    for (const auto& m : harness::metric_names())
      add(std::to_string(f), m, json_metric(baseline["folds"][f]["metrics"], m),
          json_metric(candidate["folds"][f]["metrics"], m));
  for (const auto& m : harness::metric_names()) {
    auto mean = [&](const json& r) -> std::optional<double> {
      const auto& s = r["fold_summary"];
      if (!s.contains(m) || s[m].is_null()) return std::nullopt;
      return s[m]["mean"].get<double>();
    };
    add("mean", m, mean(baseline), mean(candidate));
  }
  for (const auto& m : harness::metric_names())
    add("pooled", m, json_metric(baseline["aggregate"]["metrics"], m), json_metric(candidate["aggregate"]["metrics"], m));
  return rows;
}

inline int cmd_compare(const RunConfig& c, const std::string& baseline_path, const std::string& candidate_path,
                       const std::string& csv_path, std::ostream& out) {
  const auto rows = compare_reports(read_report(baseline_path), read_report(candidate_path));
  const fs::path path = csv_path.empty() ? fs::path(c.out_dir) / "compare.csv" : fs::path(csv_path);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream csv(path, std::ios::trunc);
  if (!csv) throw FormatError("cannot write " + path.string());
  csv.precision(17);
  csv << "scope,metric,baseline,candidate,delta\n";
  auto cell = [](std::ostream& o, const std::optional<double>& v) -> std::ostream& {
    if (v) o << *v;
    return o;
  };
  for (const auto& r : rows) {
    csv << r.scope << ',' << r.metric << ',';
    cell(csv, r.baseline) << ',';
    cell(csv, r.candidate) << ',';
    cell(csv, r.delta) << '\n';
  }

  out << std::left << std::setw(8) << "scope" << std::setw(11) << "metric" << std::setw(11) << "baseline"
      << std::setw(11) << "candidate" << "delta\n";
  for (const auto& r : rows) {
    auto fmt = [](const std::optional<double>& v, bool sign) {
      if (!v) return std::string("n/a");
      std::ostringstream s;
      s << std::fixed << std::setprecision(4) << (sign ? std::showpos : std::noshowpos) << *v;
      return s.str();
    };
    out << std::setw(8) << r.scope << std::setw(11) << r.metric << std::setw(11) << fmt(r.baseline, false)
        << std::setw(11) << fmt(r.candidate, false) << fmt(r.delta, true) << '\n';
  }
  out << "delta = candidate - baseline; csv written to " << path.string() << '\n';
  return kOk;
}

struct QSummary {
  std::size_t rows = 0;
  std::array<std::size_t, rl::kActionCount> action_counts{};
  std::array<double, rl::kActionCount> mean_q{};
  double mean_weight = 0.0;
  double max_q = 0.0;
};

inline QSummary summarize_qtable(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("index,q0", 0) != 0) throw FormatError("not a Q-table CSV");
  QSummary s;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != rl::kActionCount + 3) throw ParseError(lineno, "expected 8 columns");
    try {
      for (std::size_t a = 0; a < rl::kActionCount; ++a) {
        const double q = std::stod(cells[a + 1]);
        s.mean_q[a] += q;
        s.max_q = s.rows == 0 && a == 0 ? q : std::max(s.max_q, q);
      }
      const auto act = std::stoul(cells[6]);
      if (act >= rl::kActionCount) throw ParseError(lineno, "action index out of range");
      ++s.action_counts[act];
      s.mean_weight += std::stod(cells[7]);
    } catch (const std::logic_error&) {
      throw ParseError(lineno, "malformed number");
    }
    ++s.rows;
  }
  if (s.rows > 0) {
    for (auto& q : s.mean_q) q /= static_cast<double>(s.rows);
    s.mean_weight /= static_cast<double>(s.rows);
  }
  return s;
}

inline int cmd_qdump(const std::string& target, std::size_t fold, std::ostream& out) {
  fs::path p = target;
  if (fs::is_directory(p)) p /= "qtable_fold" + std::to_string(fold) + ".csv";
  require_file(p.string(), "Q-table");
  std::ifstream in(p);
  const auto s = summarize_qtable(in);
  out << p.string() << ": " << s.rows << " states\n";
  out << "action  weight  last-chosen  mean Q\n";
  for (std::size_t a = 0; a < rl::kActionCount; ++a)
    out << std::left << std::setw(8) << a << std::setw(8) << rl::kDefaultActions[a] << std::setw(13)
        << s.action_counts[a] << std::setprecision(6) << s.mean_q[a] << '\n';
  out << "mean assigned weight " << s.mean_weight << ", max Q " << s.max_q << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

/// Maps library exceptions onto exit codes.
template <typename F>
int guarded(F&& fn, std::ostream& err) {
  try {
    return std::forward<F>(fn)();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kDataFormat;
  } catch (const SchemaError& e) {
    err << "schema error: " << e.what() << '\n';
    return kDataFormat;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kDataFormat;
  } catch (const InvariantError& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternal;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternal;
  }
}

/// Full command line, without the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Behavioral ransomware detection pipeline: synthetic data, featurization, cross-validated training"};
  app.name("tlrl");
  app.require_subcommand(1);
  app.fallthrough();

  std::uint64_t seed = 42;
  std::string config_path, out_dir;
  std::size_t jobs = 1;
  auto* o_seed = app.add_option("--seed", seed, "master seed for every random stream");
  app.add_option("--config", config_path, "JSON config file (flags override it)");
  auto* o_jobs = app.add_option("--jobs", jobs, "maximum concurrent folds")->check(CLI::PositiveNumber);
  auto* o_out = app.add_option("--out-dir", out_dir, "directory for outputs");

  // synth
  auto* synth = app.add_subcommand("synth", "generate synthetic behavioral records");
  dataio::SyntheticConfig sc;
  std::string synth_out;
  auto* o_samples = synth->add_option("--samples", sc.n_samples, "number of records");
  auto* o_features = synth->add_option("--features", sc.n_features, "fields per record");
  auto* o_balance = synth->add_option("--balance", sc.class_balance, "fraction of ransomware records");
  auto* o_hard = synth->add_option("--hard", sc.hard_fraction, "fraction of near-boundary records");
  auto* o_sep = synth->add_option("--separation", sc.separation, "class mean shift for easy records");
  auto* o_hsep = synth->add_option("--hard-separation", sc.hard_separation, "class mean shift for hard records");
  auto* o_inf = synth->add_option("--informative", sc.informative_fraction, "fraction of informative fields");
  synth->add_option("--out", synth_out, "output JSONL path");

  // featurize
  auto* feat = app.add_subcommand("featurize", "records -> images -> fused backbone embeddings");
  std::string feat_records, feat_out;
  std::vector<std::string> backbone_specs;
  std::size_t patch = 16, dump_images = 0;
  std::vector<std::string> freq_fields;
  std::string freq_mode;
  bool no_imaging = false;
  auto add_featurization = [&](CLI::App* sub) {
    sub->add_option("--backbone", backbone_specs, "extractor rp:DIM[:SEED], repeatable");
    sub->add_option("--patch", patch, "patch size of the extractors");
    sub->add_option("--frequency-field", freq_fields, "string field encoded by frequency, repeatable");
    sub->add_option("--frequency-mode", freq_mode, "rank or count")->check(CLI::IsMember({"rank", "count"}));
    sub->add_flag("--no-imaging", no_imaging, "feed standardized features straight to the classifier");
  };
  feat->add_option("--records", feat_records, "input JSONL records");
  feat->add_option("--out", feat_out, "output embeddings file");
  feat->add_option("--dump-images", dump_images, "also write the first N images as raw TLIM files");
  add_featurization(feat);

  // train
  auto* train = app.add_subcommand("train", "stratified k-fold training and evaluation");
  std::string train_emb, train_records, rl_mode, model_kind, update_split;
  std::size_t folds = 5, epochs = 25, batch = 32, stem = 1024, bottleneck = 256, blocks = 2, rounds = 1;
  std::vector<std::size_t> hidden;
  double lr = 1e-3, alpha = 0.1, gamma = 0.9, eps0 = 1.0, eps_decay = 0.99;
  bool save_models = false;
  auto* o_emb = train->add_option("--embeddings", train_emb, "input embeddings file");
  auto* o_rec = train->add_option("--records", train_records, "input JSONL records (featurized per fold)");
  o_emb->excludes(o_rec);
  auto* o_rl = train->add_option("--rl", rl_mode, "RL sample weighting on|off")->check(CLI::IsMember({"on", "off"}));
  auto* o_folds = train->add_option("--folds", folds, "number of folds");
  auto* o_epochs = train->add_option("--epochs", epochs, "epochs per training round");
  auto* o_batch = train->add_option("--batch", batch, "mini-batch size");
  auto* o_lr = train->add_option("--lr", lr, "initial learning rate");
  auto* o_model = train->add_option("--model", model_kind, "residual-mlp, ann or logreg");
  auto* o_stem = train->add_option("--stem", stem, "stem width");
  auto* o_bneck = train->add_option("--bottleneck", bottleneck, "residual bottleneck width");
  auto* o_blocks = train->add_option("--blocks", blocks, "residual blocks");
  auto* o_hidden = train->add_option("--hidden", hidden, "hidden widths for ann");
  auto* o_alpha = train->add_option("--alpha", alpha, "Q learning rate");
  auto* o_gamma = train->add_option("--gamma", gamma, "Q discount");
  auto* o_eps0 = train->add_option("--epsilon0", eps0, "initial exploration rate");
  auto* o_epsd = train->add_option("--epsilon-decay", eps_decay, "exploration decay per pass");
  auto* o_split = train->add_option("--update-split", update_split, "train or validation");
  auto* o_rounds = train->add_option("--rounds", rounds, "agent rounds per fold");
  train->add_flag("--save-models", save_models, "write each fold's final model checkpoint");
  add_featurization(train);

  // compare
  auto* cmp = app.add_subcommand("compare", "metric deltas between two reports (candidate - baseline)");
  std::string cmp_base, cmp_cand, cmp_out;
  cmp->add_option("baseline", cmp_base, "baseline report (file or run directory)")->required();
  cmp->add_option("candidate", cmp_cand, "candidate report (file or run directory)")->required();
  cmp->add_option("--out", cmp_out, "CSV output path");

  // qdump
  auto* qd = app.add_subcommand("qdump", "summarize a stored Q-table");
  std::string q_target;
  std::size_t q_fold = 0;
  qd->add_option("path", q_target, "qtable CSV or run directory")->required();
  qd->add_option("--fold", q_fold, "fold to read from a run directory");

  std::vector<std::string> argv_store{"tlrl"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  return guarded(
      [&]() -> int {
        RunConfig c;
        if (!config_path.empty()) c = load_run_config(config_path, c);
        if (o_seed->count()) c.seed = seed;
        if (o_jobs->count()) c.jobs = jobs;
        if (o_out->count()) c.out_dir = out_dir;

        auto apply_featurization = [&] {
          if (!backbone_specs.empty()) c.backbones = backbone_specs;
          if (feat->count("--patch") || train->count("--patch")) c.patch_size = patch;
          if (!freq_fields.empty()) c.encoding.frequency_fields = {freq_fields.begin(), freq_fields.end()};
          if (!freq_mode.empty())
            c.encoding.frequency_mode = freq_mode == "rank" ? dataio::FrequencyMode::rank : dataio::FrequencyMode::count;
          if (no_imaging) c.imaging = false;
        };

        if (synth->parsed()) {
          auto& s = c.dataset.synthetic;
          if (o_samples->count()) s.n_samples = sc.n_samples;
          if (o_features->count()) s.n_features = sc.n_features;
          if (o_balance->count()) s.class_balance = sc.class_balance;
          if (o_hard->count()) s.hard_fraction = sc.hard_fraction;
          if (o_sep->count()) s.separation = sc.separation;
          if (o_hsep->count()) s.hard_separation = sc.hard_separation;
          if (o_inf->count()) s.informative_fraction = sc.informative_fraction;
          if (o_seed->count()) c.dataset.synthetic_seed_set = false;
          return cmd_synth(c, synth_out, out);
        }
        if (feat->parsed()) {
          apply_featurization();
          if (!feat_records.empty()) c.dataset = file_source(SourceKind::records, feat_records);
          if (c.dataset.kind != SourceKind::records) throw ConfigError("featurize needs --records");
          return cmd_featurize(c, feat_out, dump_images, out);
        }
        if (train->parsed()) {
          apply_featurization();
          if (!train_emb.empty()) c.dataset = file_source(SourceKind::embeddings, train_emb);
          if (!train_records.empty()) c.dataset = file_source(SourceKind::records, train_records);
          if (o_folds->count()) c.folds = folds;
          auto& m = c.model;
          if (o_epochs->count()) m.epochs = epochs;
          if (o_batch->count()) m.batch_size = batch;
          if (o_lr->count()) m.learning_rate = lr;
          if (o_model->count()) m.kind = nn::model_kind_from_string(model_kind);
          if (o_stem->count()) m.stem_width = stem;
          if (o_bneck->count()) m.bottleneck_width = bottleneck;
          if (o_blocks->count()) m.residual_blocks = blocks;
          if (o_hidden->count()) m.hidden = hidden;
          if (o_rl->count()) {
            if (rl_mode == "off") c.agent.reset();
            else if (!c.agent) c.agent = rl::AgentConfig{};
          }
          if (c.agent) {
            auto& a = *c.agent;
            if (o_alpha->count()) a.alpha = alpha;
            if (o_gamma->count()) a.gamma = gamma;
            if (o_eps0->count()) a.epsilon0 = eps0;
            if (o_epsd->count()) a.epsilon_decay = eps_decay;
            if (o_split->count()) a.update_split = rl::update_split_from_string(update_split);
            if (o_rounds->count()) a.rounds_per_fold = rounds;
          }
          if (save_models) c.save_models = true;
          return cmd_train(c, out);
        }
        if (cmp->parsed()) return cmd_compare(c, cmp_base, cmp_cand, cmp_out, out);
        if (qd->parsed()) return cmd_qdump(q_target, q_fold, out);
        throw InvariantError("no subcommand dispatched");
      },
      err);
}

}  // namespace tlrl::cli
