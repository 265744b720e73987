#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tlrl/errors.hpp"
#include "tlrl/random.hpp"

namespace tlrl::dataio {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

/// Field value before encoding. monostate marks a missing (null) value.
using FieldValue = std::variant<std::monostate, bool, double, std::string, std::vector<std::string>>;

struct Field {
  std::string name;
  FieldValue value;
  bool operator==(const Field&) const = default;
};

struct BehaviorRecord {
  std::string id;
  int label = 0;  // 0 benign, 1 ransomware
  std::vector<Field> fields;
  bool operator==(const BehaviorRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Line-delimited record format

namespace detail {

inline FieldValue value_from_json(const nlohmann::ordered_json& v, std::size_t line,
                                  const std::string& name) {
  if (v.is_null()) return std::monostate{};
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_number()) {
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw SchemaError("line " + std::to_string(line) + ": field '" + name + "' is not finite");
    return d;
  }
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::vector<std::string> items;
    items.reserve(v.size());
    for (const auto& e : v) items.push_back(e.is_string() ? e.get<std::string>() : e.dump());
    return items;
  }
  throw SchemaError("line " + std::to_string(line) + ": field '" + name + "' has unsupported type " +
                    v.type_name());
}

inline nlohmann::ordered_json value_to_json(const FieldValue& v) {
  return std::visit(
      [](const auto& x) -> nlohmann::ordered_json {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, std::monostate>) return nullptr;
        else return x;
      },
      v);
}

}  // namespace detail

/// Parses one record per non-blank line: {"id": str, "label": 0|1, "features": {...}}.
/// Field names and their order are validated against the first record.
inline std::vector<BehaviorRecord> parse_records(std::istream& in) {
  std::vector<BehaviorRecord> out;
  std::vector<std::string> names;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::ordered_json row;
    try {
      row = nlohmann::ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line, e.what());
    }
    if (!row.is_object()) throw ParseError(line, "expected a JSON object");

    BehaviorRecord rec;
    const auto id = row.find("id");
    if (id == row.end() || !id->is_string())
      throw SchemaError("line " + std::to_string(line) + ": missing string 'id'");
    rec.id = id->get<std::string>();

    const auto label = row.find("label");
    if (label == row.end() || label->is_null())
      throw SchemaError("line " + std::to_string(line) + ": missing 'label'");
    if (!label->is_number_integer() || (label->get<long long>() != 0 && label->get<long long>() != 1))
      throw SchemaError("line " + std::to_string(line) + ": label must be 0 or 1, got " + label->dump());
    rec.label = static_cast<int>(label->get<long long>());

    const auto features = row.find("features");
    if (features == row.end() || !features->is_object())
      throw SchemaError("line " + std::to_string(line) + ": missing object 'features'");
    for (const auto& [name, value] : features->items())
      rec.fields.push_back({name, detail::value_from_json(value, line, name)});

    if (out.empty()) {
      for (const auto& f : rec.fields) names.push_back(f.name);
    } else {
      bool same = rec.fields.size() == names.size();
      for (std::size_t j = 0; same && j < names.size(); ++j) same = rec.fields[j].name == names[j];
      if (!same) throw SchemaError("line " + std::to_string(line) + ": field list differs from the first record");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<BehaviorRecord> parse_records(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_records(in);
}

inline std::string record_to_line(const BehaviorRecord& rec) {
  nlohmann::ordered_json row;
  row["id"] = rec.id;
  row["label"] = rec.label;
  nlohmann::ordered_json features = nlohmann::ordered_json::object();
  for (const auto& f : rec.fields) features[f.name] = detail::value_to_json(f.value);
  row["features"] = std::move(features);
  return row.dump();
}

inline void write_records(std::ostream& out, std::span<const BehaviorRecord> records) {
  for (const auto& r : records) out << record_to_line(r) << '\n';
}

// ---------------------------------------------------------------------------
// Deduplication

/// Keeps the first record of every group sharing identical field values (id ignored).
inline std::vector<BehaviorRecord> deduplicate(std::span<const BehaviorRecord> records) {
  std::vector<BehaviorRecord> out;
  std::unordered_set<std::string> seen;
  for (const auto& r : records) {
    nlohmann::ordered_json key = nlohmann::ordered_json::array();
    for (const auto& f : r.fields) key.push_back(detail::value_to_json(f.value));
    if (seen.insert(key.dump()).second) out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Categorical encoding

enum class EncodingRule { boolean, string_length, string_frequency_rank, string_frequency_count, list_count, number };

inline std::string_view to_string(EncodingRule r) {
  switch (r) {
    case EncodingRule::boolean: return "boolean";
    case EncodingRule::string_length: return "string_length";
    case EncodingRule::string_frequency_rank: return "string_frequency_rank";
    case EncodingRule::string_frequency_count: return "string_frequency_count";
    case EncodingRule::list_count: return "list_count";
    case EncodingRule::number: return "number";
  }
  return "?";
}

enum class FrequencyMode { rank, count };

struct EncodingOptions {
  /// String fields encoded by frequency instead of length.
  std::set<std::string> frequency_fields;
  FrequencyMode frequency_mode = FrequencyMode::rank;
};

struct FieldEncoding {
  std::string name;
  EncodingRule rule = EncodingRule::number;
  /// value -> rank (rank rule) or value -> count (count rule)
  std::map<std::string, std::size_t> table;
};

struct EncodingPlan {
  std::vector<FieldEncoding> fields;
};

/// Infers one rule per field from the first non-missing value; builds
/// frequency tables from `records` only.
inline EncodingPlan fit_encoding(std::span<const BehaviorRecord> records, const EncodingOptions& options = {}) {
  if (records.empty()) throw SchemaError("fit_encoding needs at least one record");
  const auto& first = records.front();
  EncodingPlan plan;
  plan.fields.resize(first.fields.size());
  for (std::size_t j = 0; j < first.fields.size(); ++j) {
    auto& enc = plan.fields[j];
    enc.name = first.fields[j].name;
    std::optional<std::size_t> kind;
    std::map<std::string, std::size_t> counts;
    for (const auto& r : records) {
      if (r.fields.size() != first.fields.size() || r.fields[j].name != enc.name)
        throw SchemaError("record '" + r.id + "' has a different field list");
      const auto& v = r.fields[j].value;
      if (std::holds_alternative<std::monostate>(v)) continue;
      if (!kind) kind = v.index();
      else if (*kind != v.index()) throw SchemaError("field '" + enc.name + "' mixes value types");
      if (const auto* s = std::get_if<std::string>(&v)) ++counts[*s];
    }
    const std::size_t k = kind.value_or(2);
    if (k == 1) {
      enc.rule = EncodingRule::boolean;
    } else if (k == 2) {
      enc.rule = EncodingRule::number;
    } else if (k == 4) {
      enc.rule = EncodingRule::list_count;
    } else if (!options.frequency_fields.contains(enc.name)) {
      enc.rule = EncodingRule::string_length;
    } else if (options.frequency_mode == FrequencyMode::count) {
      enc.rule = EncodingRule::string_frequency_count;
      enc.table = std::move(counts);
    } else {
      enc.rule = EncodingRule::string_frequency_rank;
      std::vector<std::pair<std::string, std::size_t>> order(counts.begin(), counts.end());
      // most frequent first; ties broken by value for determinism
      std::stable_sort(order.begin(), order.end(),
                       [](const auto& a, const auto& b) { return a.second > b.second; });
      for (std::size_t rank = 0; rank < order.size(); ++rank) enc.table[order[rank].first] = rank;
    }
  }
  return plan;
}

/// Per-column standardization statistics.
struct StandardizationStats {
  RowVector mean;
  RowVector stddev;
};

struct FeatureMatrix {
  Matrix values;
  std::vector<int> labels;
  std::vector<std::string> columns;
  std::optional<StandardizationStats> stats;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(values.cols()); }
};

inline double encode_value(const FieldValue& v, const FieldEncoding& enc, std::vector<std::string>* warnings) {
  if (std::holds_alternative<std::monostate>(v)) return 0.0;
  auto mismatch = [&]() -> double {
    throw SchemaError("field '" + enc.name + "' value does not match rule " + std::string(to_string(enc.rule)));
  };
  switch (enc.rule) {
    case EncodingRule::boolean:
      if (const auto* b = std::get_if<bool>(&v)) return *b ? 1.0 : 0.0;
      return mismatch();
    case EncodingRule::number:
      if (const auto* d = std::get_if<double>(&v)) return *d;
      return mismatch();
    case EncodingRule::list_count:
      if (const auto* l = std::get_if<std::vector<std::string>>(&v)) return static_cast<double>(l->size());
      return mismatch();
    case EncodingRule::string_length:
      if (const auto* s = std::get_if<std::string>(&v)) return static_cast<double>(s->size());
      return mismatch();
    case EncodingRule::string_frequency_rank:
    case EncodingRule::string_frequency_count: {
      const auto* s = std::get_if<std::string>(&v);
      if (!s) return mismatch();
      const auto it = enc.table.find(*s);
      if (it != enc.table.end()) return static_cast<double>(it->second);
      if (warnings) warnings->push_back("field '" + enc.name + "': unseen value '" + *s + "'");
      return enc.rule == EncodingRule::string_frequency_rank ? static_cast<double>(enc.table.size()) : 0.0;
    }
  }
  return mismatch();
}

/// Encodes records into an unstandardized N x F matrix (row order preserved).
/// Unseen frequency-table values map to a sentinel and are reported in `warnings`.
inline FeatureMatrix encode(std::span<const BehaviorRecord> records, const EncodingPlan& plan,
                            std::vector<std::string>* warnings = nullptr) {
  FeatureMatrix m;
  const auto n = static_cast<Eigen::Index>(records.size());
  const auto f = static_cast<Eigen::Index>(plan.fields.size());
  m.values.resize(n, f);
  m.labels.reserve(records.size());
  for (const auto& enc : plan.fields) m.columns.push_back(enc.name);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = records[static_cast<std::size_t>(i)];
    if (r.fields.size() != plan.fields.size()) throw SchemaError("record '" + r.id + "' field count mismatch");
    for (Eigen::Index j = 0; j < f; ++j) {
      const auto& enc = plan.fields[static_cast<std::size_t>(j)];
      const auto& field = r.fields[static_cast<std::size_t>(j)];
      if (field.name != enc.name) throw SchemaError("record '" + r.id + "' field order mismatch");
      m.values(i, j) = encode_value(field.value, enc, warnings);
    }
    m.labels.push_back(r.label);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Standardization

/// Population mean/stddev per column; zero stddev is replaced by 1.
inline StandardizationStats fit_standardization(const Matrix& x) {
  StandardizationStats s;
  const auto n = static_cast<double>(x.rows());
  s.mean = x.colwise().sum() / n;
  s.stddev.resize(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double var = (x.col(j).array() - s.mean(j)).square().sum() / n;
    const double sd = std::sqrt(var);
    s.stddev(j) = sd > 0.0 ? sd : 1.0;
  }
  return s;
}

inline Matrix apply_standardization(const Matrix& x, const StandardizationStats& s) {
  if (x.cols() != s.mean.size() || x.cols() != s.stddev.size())
    throw SchemaError("standardization stats have " + std::to_string(s.mean.size()) + " columns, matrix has " +
                      std::to_string(x.cols()));
  return ((x.rowwise() - s.mean).array().rowwise() / s.stddev.array()).matrix();
}

inline Matrix invert_standardization(const Matrix& z, const StandardizationStats& s) {
  return ((z.array().rowwise() * s.stddev.array()).rowwise() + s.mean.array()).matrix();
}

/// Fits stats when none are given, otherwise applies the given ones unchanged.
inline std::pair<Matrix, StandardizationStats> standardize(const Matrix& x,
                                                           const std::optional<StandardizationStats>& stats = {}) {
  StandardizationStats s = stats ? *stats : fit_standardization(x);
  Matrix z = apply_standardization(x, s);
  return {std::move(z), std::move(s)};
}

/// CSV export: header of column names plus `label`.
inline void write_feature_csv(std::ostream& out, const FeatureMatrix& m) {
  for (const auto& c : m.columns) out << c << ',';
  out << "label\n";
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < m.values.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.values.cols(); ++j) out << m.values(i, j) << ',';
    out << m.labels[static_cast<std::size_t>(i)] << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic behavioral data

struct SyntheticConfig {
  std::size_t n_samples = 1000;
  std::size_t n_features = 100;
  double class_balance = 0.5;  // fraction labelled ransomware
  double hard_fraction = 0.0;
  std::uint64_t seed = 42;
  /// Shift of informative latents between easy class means, in noise units.
  double separation = 3.0;
  /// Shift between hard class means; hard samples sit around the midpoint.
  double hard_separation = 1.0;
  double informative_fraction = 0.4;

  void validate() const {
    if (n_samples < 2) throw ConfigError("synthetic n_samples must be >= 2");
    if (n_features < 1) throw ConfigError("synthetic n_features must be >= 1");
    if (!(class_balance > 0.0 && class_balance < 1.0)) throw ConfigError("class_balance must lie in (0,1)");
    if (!(hard_fraction >= 0.0 && hard_fraction < 1.0)) throw ConfigError("hard_fraction must lie in [0,1)");
    if (!(informative_fraction > 0.0 && informative_fraction <= 1.0))
      throw ConfigError("informative_fraction must lie in (0,1]");
  }
};

struct SyntheticDataset {
  std::vector<BehaviorRecord> records;
  std::vector<bool> hard;  // ground-truth difficulty tag per record
};

/// Generates mixed-type behavioral records from two class-conditional
/// Gaussian latents. Columns cycle through numbers, flags, lists and strings;
/// every encoding is monotone in the latent so the class signal survives.
inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t f = cfg.n_features;

  std::vector<std::size_t> order(f);
  for (std::size_t j = 0; j < f; ++j) order[j] = j;
  rng.shuffle(order.begin(), order.end());
  const auto n_informative = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.informative_fraction * static_cast<double>(f))));
  std::vector<bool> informative(f, false);
  for (std::size_t j = 0; j < n_informative; ++j) informative[order[j]] = true;
  std::vector<double> base(f);
  for (auto& b : base) b = rng.uniform(-1.0, 1.0);

  const auto n = cfg.n_samples;
  const auto n1 = static_cast<std::size_t>(std::llround(cfg.class_balance * static_cast<double>(n)));
  struct Slot { int label; bool hard; };
  std::vector<Slot> slots;
  slots.reserve(n);
  for (int label : {0, 1}) {
    const std::size_t count = label == 1 ? n1 : n - n1;
    const auto n_hard = static_cast<std::size_t>(std::llround(cfg.hard_fraction * static_cast<double>(count)));
    for (std::size_t i = 0; i < count; ++i) slots.push_back({label, i < n_hard});
  }
  rng.shuffle(slots.begin(), slots.end());

  char name[32];
  std::vector<std::string> names(f);
  static constexpr std::string_view kinds[] = {"num", "num", "num", "num", "num", "num", "flag", "flag", "list", "str"};
  for (std::size_t j = 0; j < f; ++j) {
    std::snprintf(name, sizeof name, "%s_%03zu", kinds[j % 10].data(), j);
    names[j] = name;
  }

  SyntheticDataset out;
  out.records.reserve(n);
  out.hard.reserve(n);
  const double mid = 0.5 * cfg.separation;
  for (std::size_t i = 0; i < n; ++i) {
    const auto [label, hard] = slots[i];
    double shift = label == 1 ? cfg.separation : 0.0;
    if (hard) shift = label == 1 ? mid + 0.5 * cfg.hard_separation : mid - 0.5 * cfg.hard_separation;

    BehaviorRecord rec;
    std::snprintf(name, sizeof name, "s%05zu", i);
    rec.id = name;
    rec.label = label;
    rec.fields.reserve(f);
    for (std::size_t j = 0; j < f; ++j) {
      const double latent = (informative[j] ? shift : 0.0) + rng.normal();
      FieldValue value;
      switch (j % 10) {
        case 6:
        case 7:
          value = latent > mid;
          break;
        case 8: {
          const auto count = std::max<long long>(0, std::llround(3.0 + 2.0 * latent));
          std::vector<std::string> items;
          for (long long k = 0; k < count; ++k) items.push_back("obj" + std::to_string(rng.index(1000)));
          value = std::move(items);
          break;
        }
        case 9: {
          const auto len = std::max<long long>(0, std::llround(6.0 + 2.0 * latent));
          std::string s;
          for (long long k = 0; k < len; ++k) s.push_back("0123456789abcdef"[rng.index(16)]);
          value = std::move(s);
          break;
        }
        default:
          value = base[j] + latent;
      }
      rec.fields.push_back({names[j], std::move(value)});
    }
    out.records.push_back(std::move(rec));
    out.hard.push_back(hard);
  }
  return out;
}

}  // namespace tlrl::dataio
