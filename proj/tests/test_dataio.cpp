#include <gtest/gtest.h>

#include <map>
#include <sstream>

#include "tlrl/dataio.hpp"
#include "tlrl/nn.hpp"

using namespace tlrl;
using namespace tlrl::dataio;

namespace {

BehaviorRecord rec(std::string id, int label, std::vector<Field> fields) {
  return {std::move(id), label, std::move(fields)};
}

}  // namespace

TEST(Parse, TwoRowsInOrder) {
  const auto r = parse_records(
      "{\"id\":\"a\",\"label\":1,\"features\":{\"x\":1.5,\"f\":true}}\n\n"
      "{\"id\":\"b\",\"label\":0,\"features\":{\"x\":-2,\"f\":false}}\n");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].id, "a");
  EXPECT_EQ(r[1].label, 0);
  EXPECT_EQ(std::get<double>(r[1].fields[0].value), -2.0);
  EXPECT_EQ(std::get<bool>(r[0].fields[1].value), true);
}

TEST(Parse, Errors) {
  EXPECT_THROW(parse_records("{\"id\":\"a\",\"label\":2,\"features\":{}}"), SchemaError);
  EXPECT_THROW(parse_records("{\"id\":\"a\",\"label\":\"1\",\"features\":{}}"), SchemaError);
  EXPECT_THROW(parse_records("{\"id\":\"a\",\"features\":{}}"), SchemaError);
  EXPECT_THROW(parse_records("{\"id\":\"a\",\"label\":1,\"features\":{\"x\":{\"y\":1}}}"), SchemaError);
  EXPECT_THROW(parse_records("{\"id\":\"a\",\"label\":1,\"features\":{\"x\":1}}\n"
                             "{\"id\":\"b\",\"label\":1,\"features\":{\"y\":1}}"),
               SchemaError);
  try {
    parse_records("{\"id\":\"a\",\"label\":1,\"features\":{}}\n{broken");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(Parse, SyntheticRoundTrip) {
  SyntheticConfig c;
  c.hard_fraction = 0.2;
  const auto data = generate_synthetic(c);
  std::ostringstream out;
  write_records(out, data.records);
  EXPECT_EQ(parse_records(out.str()), data.records);
}

TEST(Dedup, KeepsFirstIgnoringIds) {
  const std::vector<BehaviorRecord> in{rec("a", 1, {{"x", 1.0}}), rec("b", 0, {{"x", 2.0}}), rec("c", 1, {{"x", 1.0}})};
  const auto out = deduplicate(in);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].id, "a");
  EXPECT_EQ(out[1].id, "b");
  const std::vector<BehaviorRecord> distinct{in[0], in[1]};
  EXPECT_EQ(deduplicate(distinct), distinct);
}

TEST(Dedup, IdempotentOnRandomDuplicates) {
  Rng rng(3);
  std::vector<BehaviorRecord> in;
  for (int i = 0; i < 200; ++i)
    in.push_back(rec("r" + std::to_string(i), static_cast<int>(rng.index(2)),
                     {{"x", static_cast<double>(rng.index(20))}, {"s", std::string(rng.index(3), 'z')}}));
  const auto once = deduplicate(in);
  EXPECT_EQ(deduplicate(once), once);
  EXPECT_LE(once.size(), 60u);
  // order-stable: ids appear in input order
  std::size_t pos = 0;
  for (const auto& r : once) {
    while (pos < in.size() && in[pos].id != r.id) ++pos;
    ASSERT_LT(pos, in.size()) << r.id;
    ++pos;
  }
}

TEST(Encoding, RulesAndValues) {
  const std::vector<BehaviorRecord> rs{
      rec("a", 1, {{"b", true}, {"l", std::vector<std::string>{"a", "b", "c"}}, {"s", std::string("abcd")}, {"n", 2.5}}),
      rec("b", 0, {{"b", false}, {"l", std::vector<std::string>{}}, {"s", std::string("")}, {"n", std::monostate{}}})};
  const auto plan = fit_encoding(rs);
  EXPECT_EQ(plan.fields[0].rule, EncodingRule::boolean);
  EXPECT_EQ(plan.fields[1].rule, EncodingRule::list_count);
  EXPECT_EQ(plan.fields[2].rule, EncodingRule::string_length);
  EXPECT_EQ(plan.fields[3].rule, EncodingRule::number);
  const auto m = encode(rs, plan);
  Matrix want(2, 4);
  want << 1, 3, 4, 2.5, 0, 0, 0, 0;
  EXPECT_EQ(m.values, want);
  EXPECT_EQ(m.labels, (std::vector<int>{1, 0}));
}

TEST(Encoding, FrequencyRankMatchesCounter) {
  Rng rng(8);
  std::vector<BehaviorRecord> rs;
  const std::vector<std::string> vocab{"k", "m", "a", "q", "zz"};
  for (int i = 0; i < 300; ++i) {
    const auto pick = vocab[std::min<std::size_t>(rng.index(5), rng.index(5))];
    rs.push_back(rec(std::to_string(i), 0, {{"s", pick}}));
  }
  EncodingOptions opt;
  opt.frequency_fields = {"s"};
  const auto plan = fit_encoding(rs, opt);
  ASSERT_EQ(plan.fields[0].rule, EncodingRule::string_frequency_rank);
  std::map<std::string, int> count;
  for (const auto& r : rs) ++count[std::get<std::string>(r.fields[0].value)];
  for (const auto& [value, rank] : plan.fields[0].table) {
    std::size_t ahead = 0;  // strictly more frequent, or as frequent and lexicographically smaller
    for (const auto& [other, c] : count)
      if (c > count[value] || (c == count[value] && other < value)) ++ahead;
    EXPECT_EQ(rank, ahead) << value;
  }
  std::vector<std::string> warnings;
  const std::vector<BehaviorRecord> unseen{rec("u", 0, {{"s", std::string("new")}})};
  EXPECT_EQ(encode(unseen, plan, &warnings).values(0, 0), static_cast<double>(count.size()));
  EXPECT_EQ(warnings.size(), 1u);

  opt.frequency_mode = FrequencyMode::count;
  const auto counts = fit_encoding(rs, opt);
  EXPECT_EQ(encode(std::span(rs).first(1), counts).values(0, 0), count[std::get<std::string>(rs[0].fields[0].value)]);
  EXPECT_EQ(encode(unseen, counts).values(0, 0), 0.0);
}

TEST(Encoding, MixedTypesRejected) {
  const std::vector<BehaviorRecord> rs{rec("a", 1, {{"x", 1.0}}), rec("b", 0, {{"x", std::string("no")}})};
  EXPECT_THROW(fit_encoding(rs), SchemaError);
}

TEST(Standardize, HandArithmetic) {
  Matrix x(2, 2);
  x << 0, 5, 2, 5;
  const auto [z, s] = standardize(x);
  EXPECT_EQ(s.mean(0), 1.0);
  EXPECT_EQ(s.stddev(0), 1.0);
  EXPECT_EQ(z(0, 0), -1.0);
  EXPECT_EQ(z(1, 0), 1.0);
  EXPECT_EQ(z.col(1), Eigen::VectorXd::Zero(2));
}

TEST(Standardize, MomentsInverseAndIdempotence) {
  Rng rng(9);
  Matrix x(50, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 10 * rng.normal() + 3;
  const auto [z, s] = standardize(x);
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    EXPECT_LT(std::abs(z.col(j).mean()), 1e-9);
    EXPECT_LT(std::abs(std::sqrt(z.col(j).array().square().mean()) - 1.0), 1e-6);
  }
  EXPECT_LT((invert_standardization(z, s) - x).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((standardize(z).first - z).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_THROW(apply_standardization(Matrix::Zero(2, 5), s), SchemaError);
}

TEST(Synthetic, BalanceAndDeterminism) {
  SyntheticConfig c;
  c.hard_fraction = 0.2;
  const auto a = generate_synthetic(c), b = generate_synthetic(c);
  EXPECT_EQ(a.records, b.records);
  std::size_t pos = 0, hard = 0;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    pos += a.records[i].label;
    hard += a.hard[i];
  }
  EXPECT_EQ(pos, 500u);
  EXPECT_EQ(hard, 200u);
  EXPECT_EQ(a.records[0].fields.size(), 100u);
  c.seed = 43;
  EXPECT_NE(generate_synthetic(c).records, a.records);
  c.n_samples = 0;
  EXPECT_THROW(generate_synthetic(c), ConfigError);
}

TEST(Synthetic, EasyDataIsLinearlySeparable) {
  SyntheticConfig c;
  c.separation = 6.0;
  const auto data = generate_synthetic(c);
  const auto plan = fit_encoding(std::span(data.records).first(500));
  const auto train_m = encode(std::span(data.records).first(500), plan);
  const auto test_m = encode(std::span(data.records).subspan(500), plan);
  const auto [ztr, stats] = standardize(train_m.values);
  const Matrix zte = apply_standardization(test_m.values, stats);

  nn::ModelConfig lr;
  lr.kind = nn::ModelKind::logreg;
  lr.input_dim = 100;
  lr.epochs = 30;
  auto model = nn::build(lr, 1);
  Rng rng(2);
  nn::train(model, ztr, train_m.labels, std::vector<double>(500, 1.0), rng);
  const auto pred = nn::predict(model, zte).labels;
  int correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == test_m.labels[i];
  EXPECT_GE(correct, 495);
}

TEST(Csv, FeatureExport) {
  FeatureMatrix m;
  m.values = Matrix::Identity(2, 2);
  m.labels = {1, 0};
  m.columns = {"a", "b"};
  std::ostringstream out;
  write_feature_csv(out, m);
  EXPECT_EQ(out.str(), "a,b,label\n1,0,1\n0,1,0\n");
}
