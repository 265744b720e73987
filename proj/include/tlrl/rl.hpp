#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tlrl/errors.hpp"
#include "tlrl/random.hpp"

namespace tlrl::rl {

inline constexpr std::size_t kActionCount = 5;
using ActionSet = std::array<double, kActionCount>;

/// Discrete sample-weight multipliers.
inline constexpr ActionSet kDefaultActions{0.25, 0.5, 1.0, 1.25, 1.5};

/// Which split's predictions produce the rewards for the Q update.
enum class UpdateSplit { train, validation };

inline std::string to_string(UpdateSplit s) { return s == UpdateSplit::train ? "train" : "validation"; }

inline UpdateSplit update_split_from_string(const std::string& s) {
  if (s == "train") return UpdateSplit::train;
  if (s == "validation") return UpdateSplit::validation;
  throw ConfigError("update_split must be 'train' or 'validation', got '" + s + "'");
}

struct AgentConfig {
  ActionSet actions = kDefaultActions;
  double alpha = 0.1;
  double gamma = 0.9;
  double epsilon0 = 1.0;
  double epsilon_decay = 0.99;
  UpdateSplit update_split = UpdateSplit::train;
  std::size_t rounds_per_fold = 1;

  void validate() const {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in [0,1)");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0,1]");
    if (!(epsilon0 >= 0.0 && epsilon0 <= 1.0)) throw ConfigError("epsilon0 must lie in [0,1]");
    if (!(epsilon_decay > 0.0 && epsilon_decay <= 1.0)) throw ConfigError("epsilon_decay must lie in (0,1]");
    if (rounds_per_fold < 1) throw ConfigError("rounds_per_fold must be >= 1");
    for (double a : actions)
      if (!(a > 0.0)) throw ConfigError("action weights must be positive");
  }
};

inline nlohmann::json to_json(const AgentConfig& c) {
  return {{"actions", c.actions},
          {"alpha", c.alpha},
          {"gamma", c.gamma},
          {"epsilon0", c.epsilon0},
          {"epsilon_decay", c.epsilon_decay},
          {"update_split", to_string(c.update_split)},
          {"rounds_per_fold", c.rounds_per_fold}};
}

inline AgentConfig agent_config_from_json(const nlohmann::json& j, AgentConfig c = {}) {
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "actions") c.actions = v.get<ActionSet>();
      else if (key == "alpha") c.alpha = v.get<double>();
      else if (key == "gamma") c.gamma = v.get<double>();
      else if (key == "epsilon0") c.epsilon0 = v.get<double>();
      else if (key == "epsilon_decay") c.epsilon_decay = v.get<double>();
      else if (key == "update_split") c.update_split = update_split_from_string(v.get<std::string>());
      else if (key == "rounds_per_fold") c.rounds_per_fold = v.get<std::size_t>();
      else throw ConfigError("unknown agent config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("agent config key '" + key + "': " + e.what());
    }
  }
  return c;
}

using QMatrix = Eigen::Matrix<double, Eigen::Dynamic, static_cast<int>(kActionCount), Eigen::RowMajor>;

/// The agent's whole state: one Q row per sample, the last action taken for
/// each sample and the current exploration rate.
struct QTable {
  AgentConfig config;
  QMatrix q;
  std::vector<std::uint8_t> last_action;
  double epsilon = 1.0;
  std::size_t passes = 0;  // completed assignment passes

  std::size_t size() const { return static_cast<std::size_t>(q.rows()); }
  double weight_of(std::size_t i) const { return config.actions[last_action[i]]; }
};

inline QTable init_agent(std::size_t n, const AgentConfig& config) {
  config.validate();
  if (n == 0) throw ConfigError("agent needs at least one state");
  QTable t;
  t.config = config;
  t.q = QMatrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kActionCount));
  t.last_action.assign(n, 0);
  t.epsilon = config.epsilon0;
  return t;
}

/// Index of the largest entry in row i; ties resolve to the lowest index.
inline std::size_t greedy_action(const QTable& t, std::size_t i) {
  std::size_t best = 0;
  for (std::size_t a = 1; a < kActionCount; ++a)
    if (t.q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) >
        t.q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(best)))
      best = a;
  return best;
}

/// Epsilon-greedy pass over `indices`: one uniform draw decides exploration,
/// a second picks the random action. Records each action, then decays epsilon
/// once for the whole pass.
inline std::vector<double> assign_weights(QTable& t, std::span<const std::size_t> indices, Rng& rng) {
  std::vector<double> w;
  w.reserve(indices.size());
  for (auto i : indices) {
    if (i >= t.size()) throw ConfigError("sample index " + std::to_string(i) + " outside the Q-table");
    const std::size_t a = rng.uniform() < t.epsilon ? rng.index(kActionCount) : greedy_action(t, i);
    t.last_action[i] = static_cast<std::uint8_t>(a);
    w.push_back(t.config.actions[a]);
  }
  t.epsilon *= t.config.epsilon_decay;
  ++t.passes;
  return w;
}

/// 1 where the prediction matches the label, else 0.
inline std::vector<int> compute_rewards(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw SchemaError("predictions and labels differ in length");
  std::vector<int> r(predictions.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = predictions[i] == labels[i] ? 1 : 0;
  return r;
}

/// Q[i,a] <- Q[i,a] + alpha * (r + gamma * max_b Q[i,b] - Q[i,a]) for the
/// last action a of each sample, bootstrapping on the same row read before
/// the write.
inline void update_q(QTable& t, std::span<const std::size_t> indices, std::span<const int> rewards) {
  if (indices.size() != rewards.size()) throw SchemaError("rewards must align with indices");
  const double alpha = t.config.alpha;
  const double gamma = t.config.gamma;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(indices[k]);
    if (indices[k] >= t.size()) throw ConfigError("sample index outside the Q-table");
    if (rewards[k] != 0 && rewards[k] != 1) throw SchemaError("rewards must be binary");
    const auto a = static_cast<Eigen::Index>(t.last_action[indices[k]]);
    const double q = t.q(i, a);
    const double max_q = t.q.row(i).maxCoeff();
    t.q(i, a) = q + alpha * (static_cast<double>(rewards[k]) + gamma * max_q - q);
  }
}

/// CSV with columns index,q0..q4,last_action,assigned_weight.
inline void write_qtable_csv(std::ostream& out, const QTable& t) {
  out << "index,q0,q1,q2,q3,q4,last_action,assigned_weight\n";
  const auto old = out.precision(17);
  for (std::size_t i = 0; i < t.size(); ++i) {
    out << i;
    for (Eigen::Index a = 0; a < t.q.cols(); ++a) out << ',' << t.q(static_cast<Eigen::Index>(i), a);
    out << ',' << static_cast<int>(t.last_action[i]) << ',' << t.weight_of(i) << '\n';
  }
  out.precision(old);
}

}  // namespace tlrl::rl
