#include "tabssm/encoding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace tabssm {

namespace {

struct SortedColumn {
  std::vector<double> x, y;  // sorted by x
};

SortedColumn sort_by_x(std::span<const double> x, std::span<const double> y) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  SortedColumn s;
  s.x.reserve(x.size());
  s.y.reserve(x.size());
  for (auto i : idx) {
    s.x.push_back(x[i]);
    s.y.push_back(y[i]);
  }
  return s;
}

// Node impurity costs over [a, b) of the sorted arrays, via prefix sums.
struct SplitScorer {
  PLEConfig::Criterion criterion;
  std::vector<double> pre_y, pre_y2;  // prefix sums (regression)
  std::vector<double> pre_pos;        // prefix positive counts (classification)

  explicit SplitScorer(const SortedColumn& s, PLEConfig::Criterion c) : criterion(c) {
    const std::size_t n = s.y.size();
    pre_y.assign(n + 1, 0.0);
    pre_y2.assign(n + 1, 0.0);
    pre_pos.assign(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      pre_y[i + 1] = pre_y[i] + s.y[i];
      pre_y2[i + 1] = pre_y2[i] + s.y[i] * s.y[i];
      pre_pos[i + 1] = pre_pos[i] + (s.y[i] == 1.0 ? 1.0 : 0.0);
    }
  }

  double cost(std::size_t a, std::size_t b) const {
    const double n = static_cast<double>(b - a);
    if (criterion == PLEConfig::Criterion::Variance) {
      const double sy = pre_y[b] - pre_y[a];
      return (pre_y2[b] - pre_y2[a]) - sy * sy / n;  // SSE
    }
    const double pos = pre_pos[b] - pre_pos[a];
    const double neg = n - pos;
    return n - (pos * pos + neg * neg) / n;  // n * gini
  }
};

struct Leaf {
  std::size_t begin = 0, end = 0;
  double gain = 0.0;
  std::size_t split_pos = 0;  // left = [begin, split_pos), right = [split_pos, end)
  double threshold = 0.0;
};

// Best midpoint split of [begin, end): both children >= min_leaf, positive
// gain; ties resolved toward the lowest threshold.
void score_leaf(Leaf& leaf, const SortedColumn& s, const SplitScorer& scorer,
                std::size_t min_leaf) {
  leaf.gain = 0.0;
  const double parent = scorer.cost(leaf.begin, leaf.end);
  for (std::size_t p = leaf.begin + 1; p < leaf.end; ++p) {
    if (s.x[p - 1] == s.x[p]) continue;  // thresholds only between distinct values
    if (p - leaf.begin < min_leaf || leaf.end - p < min_leaf) continue;
    const double gain = parent - scorer.cost(leaf.begin, p) - scorer.cost(p, leaf.end);
    if (gain > leaf.gain) {
      leaf.gain = gain;
      leaf.split_pos = p;
      leaf.threshold = 0.5 * (s.x[p - 1] + s.x[p]);
    }
  }
}

}  // namespace

BinBoundaries fit_tree_bins(std::span<const double> x, std::span<const double> y,
                            const PLEConfig& config) {
  if (x.size() != y.size()) throw std::invalid_argument("feature/target length mismatch");
  if (x.empty()) throw std::invalid_argument("cannot fit bins on an empty column");
  if (config.max_bins < 2) throw std::invalid_argument("max_bins must be >= 2");

  const auto s = sort_by_x(x, y);
  const double lo = s.x.front(), hi = s.x.back();
  if (lo == hi) return BinBoundaries{{lo, hi}};  // constant feature: one bin

  const SplitScorer scorer(s, config.criterion);
  std::vector<Leaf> leaves;
  Leaf root{0, s.x.size(), 0.0, 0, 0.0};
  score_leaf(root, s, scorer, config.min_leaf);
  leaves.push_back(root);

  std::vector<double> thresholds;
  while (leaves.size() < config.max_bins) {
    // best-first: largest gain, ties to the leftmost leaf
    std::size_t best = leaves.size();
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      if (leaves[i].gain <= 0.0) continue;
      if (best == leaves.size() || leaves[i].gain > leaves[best].gain ||
          (leaves[i].gain == leaves[best].gain && leaves[i].begin < leaves[best].begin)) {
        best = i;
      }
    }
    if (best == leaves.size()) break;
    Leaf chosen = leaves[best];
    thresholds.push_back(chosen.threshold);
    Leaf left{chosen.begin, chosen.split_pos, 0.0, 0, 0.0};
    Leaf right{chosen.split_pos, chosen.end, 0.0, 0, 0.0};
    score_leaf(left, s, scorer, config.min_leaf);
    score_leaf(right, s, scorer, config.min_leaf);
    leaves[best] = left;
    leaves.push_back(right);
  }

  std::sort(thresholds.begin(), thresholds.end());
  BinBoundaries b;
  b.edges.reserve(thresholds.size() + 2);
  b.edges.push_back(lo);
  for (double t : thresholds) b.edges.push_back(t);
  b.edges.push_back(hi);
  return b;
}

void ple_encode(double x, const BinBoundaries& bins, std::span<double> out) {
  const std::size_t t_count = bins.bins();
  if (out.size() < t_count) throw std::invalid_argument("ple output buffer too small");
  for (std::size_t t = 1; t <= t_count; ++t) {
    const double left = bins.edges[t - 1];
    const double right = bins.edges[t];
    double v;
    if (x < left) {
      v = 0.0;
    } else if (x >= right) {
      v = 1.0;
    } else {
      v = (x - left) / (right - left);
    }
    out[t - 1] = v;
  }
  for (std::size_t i = t_count; i < out.size(); ++i) out[i] = 0.0;
}

PLEEncoder PLEEncoder::fit(const TabularDataset& train, const PLEConfig& config) {
  PLEEncoder enc;
  enc.config = config;
  for (const auto& c : train.columns) {
    if (c.spec.kind != ColumnKind::Numeric) continue;
    enc.names.push_back(c.spec.name);
    enc.boundaries.push_back(fit_tree_bins(c.numeric, train.target, config));
  }
  return enc;
}

Tensor PLEEncoder::transform(const TabularDataset& data) const {
  const std::size_t n = data.rows();
  const std::size_t j_num = names.size();
  Tensor out({n, j_num, config.max_bins});
  std::size_t k = 0;
  for (const auto& c : data.columns) {
    if (c.spec.kind != ColumnKind::Numeric) continue;
    if (k >= names.size() || c.spec.name != names[k]) {
      throw std::invalid_argument("ple encoder fitted on different columns");
    }
    for (std::size_t i = 0; i < n; ++i) {
      double* row = out.data() + (i * j_num + k) * config.max_bins;
      ple_encode(c.numeric[i], boundaries[k], {row, config.max_bins});
    }
    ++k;
  }
  return out;
}

// ---- fitted pipeline ---------------------------------------------------------

std::size_t FeatureLayout::numeric_count() const {
  std::size_t n = 0;
  for (const auto& f : features) n += f.kind == ColumnKind::Numeric;
  return n;
}

std::size_t FeatureLayout::categorical_count() const {
  return features.size() - numeric_count();
}

EncodedData EncodedData::gather(std::span<const std::size_t> rows_idx) const {
  EncodedData out;
  out.rows = rows_idx.size();
  const std::size_t j_num = ple.numel() == 0 ? 0 : ple.dim(1);
  const std::size_t width = ple.numel() == 0 ? 0 : ple.dim(2);
  out.ple = Tensor({out.rows, j_num, width});
  const std::size_t stride = j_num * width;
  for (std::size_t i = 0; i < rows_idx.size(); ++i) {
    const double* src = ple.data() + rows_idx[i] * stride;
    std::copy(src, src + stride, out.ple.data() + i * stride);
  }
  out.cat_ids.resize(cat_ids.size());
  for (std::size_t c = 0; c < cat_ids.size(); ++c) {
    out.cat_ids[c].reserve(rows_idx.size());
    for (auto r : rows_idx) out.cat_ids[c].push_back(cat_ids[c][r]);
  }
  out.target.reserve(rows_idx.size());
  for (auto r : rows_idx) out.target.push_back(target[r]);
  return out;
}

Preprocessor Preprocessor::fit(const TabularDataset& train, std::size_t max_bins,
                               std::size_t min_leaf) {
  Preprocessor p;
  p.task = train.task;
  TabularDataset work = train;
  if (work.task != Task::Binary) {
    p.target_scaler = TargetScaler::fit(work.target);
    p.target_scaler->apply(work.target);
  }
  p.scaler = NumericScaler::fit(work);
  p.scaler.apply(work);
  p.vocab = Vocabulary::build(work);

  PLEConfig cfg;
  cfg.max_bins = max_bins;
  cfg.min_leaf = min_leaf;
  cfg.criterion = work.task == Task::Binary ? PLEConfig::Criterion::Gini
                                            : PLEConfig::Criterion::Variance;
  p.ple = PLEEncoder::fit(work, cfg);

  for (const auto& c : work.columns) {
    FeatureLayout::Feature f;
    f.name = c.spec.name;
    f.kind = c.spec.kind;
    if (c.spec.kind == ColumnKind::Categorical) f.vocab_size = p.vocab.size(c.spec.name);
    p.layout.features.push_back(std::move(f));
  }
  return p;
}

EncodedData Preprocessor::transform(const TabularDataset& data) const {
  if (data.feature_count() != layout.count())
    throw std::invalid_argument("dataset does not match the fitted layout");
  for (std::size_t i = 0; i < layout.count(); ++i) {
    if (data.columns[i].spec.name != layout.features[i].name) {
      throw std::invalid_argument("column order differs from the fitted layout (expected " +
                                  layout.features[i].name + ", found " +
                                  data.columns[i].spec.name + ")");
    }
  }
  TabularDataset work = data;
  if (task != Task::Binary && target_scaler) target_scaler->apply(work.target);
  scaler.apply(work);

  EncodedData out;
  out.rows = work.rows();
  out.ple = ple.transform(work);
  out.cat_ids = vocab.transform(work);
  out.target = std::move(work.target);
  return out;
}

std::string Preprocessor::to_json_text() const {
  using nlohmann::json;
  json j;
  j["task"] = task_name(task);
  if (target_scaler) {
    j["target_scaler"] = {{"mean", target_scaler->mean}, {"std", target_scaler->stddev}};
  }
  j["scaler"] = {{"names", scaler.names}, {"lo", scaler.lo}, {"hi", scaler.hi}};
  j["vocab"] = json::parse(vocab.to_json_text());
  json bounds = json::array();
  for (std::size_t i = 0; i < ple.names.size(); ++i) {
    bounds.push_back({{"name", ple.names[i]}, {"edges", ple.boundaries[i].edges}});
  }
  j["ple"] = {{"max_bins", ple.config.max_bins},
              {"min_leaf", ple.config.min_leaf},
              {"criterion", ple.config.criterion == PLEConfig::Criterion::Gini ? "gini" : "variance"},
              {"boundaries", bounds}};
  json feats = json::array();
  for (const auto& f : layout.features) {
    feats.push_back({{"name", f.name},
                     {"kind", f.kind == ColumnKind::Numeric ? "numeric" : "categorical"},
                     {"vocab_size", f.vocab_size}});
  }
  j["layout"] = feats;
  return j.dump();
}

Preprocessor Preprocessor::from_json_text(const std::string& text) {
  using nlohmann::json;
  json j = json::parse(text);
  Preprocessor p;
  p.task = task_from_name(j.at("task").get<std::string>());
  if (j.contains("target_scaler")) {
    p.target_scaler = TargetScaler{j["target_scaler"].at("mean").get<double>(),
                                   j["target_scaler"].at("std").get<double>()};
  }
  p.scaler.names = j.at("scaler").at("names").get<std::vector<std::string>>();
  p.scaler.lo = j.at("scaler").at("lo").get<std::vector<double>>();
  p.scaler.hi = j.at("scaler").at("hi").get<std::vector<double>>();
  p.vocab = Vocabulary::from_json_text(j.at("vocab").dump());
  const auto& pl = j.at("ple");
  p.ple.config.max_bins = pl.at("max_bins").get<std::size_t>();
  p.ple.config.min_leaf = pl.at("min_leaf").get<std::size_t>();
  p.ple.config.criterion = pl.at("criterion").get<std::string>() == "gini"
                               ? PLEConfig::Criterion::Gini
                               : PLEConfig::Criterion::Variance;
  for (const auto& b : pl.at("boundaries")) {
    p.ple.names.push_back(b.at("name").get<std::string>());
    p.ple.boundaries.push_back(BinBoundaries{b.at("edges").get<std::vector<double>>()});
  }
  for (const auto& f : j.at("layout")) {
    FeatureLayout::Feature feat;
    feat.name = f.at("name").get<std::string>();
    feat.kind = f.at("kind").get<std::string>() == "numeric" ? ColumnKind::Numeric
                                                             : ColumnKind::Categorical;
    feat.vocab_size = f.at("vocab_size").get<std::size_t>();
    p.layout.features.push_back(std::move(feat));
  }
  return p;
}

}  // namespace tabssm
