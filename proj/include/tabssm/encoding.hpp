#pragma once

#include <span>
#include <string>
#include <vector>

#include "tabssm/data.hpp"
#include "tabssm/tensor.hpp"

namespace tabssm {

struct PLEConfig {
  std::size_t max_bins = 64;
  enum class Criterion { Variance, Gini } criterion = Criterion::Variance;
  std::size_t min_leaf = 64;
};

/// Bin edges for one numeric feature. edges = [lo, s_1, ..., s_k, hi] where
/// the s_i are fitted tree split thresholds and lo/hi are the training range
/// (inputs are pre-clamped into it by the numeric scaler). bins() = k + 1.
struct BinBoundaries {
  std::vector<double> edges;
  std::size_t bins() const { return edges.size() - 1; }
};

/// Greedy single-feature CART: repeatedly splits the leaf with the largest
/// impurity decrease (variance for regression targets, Gini for binary) at
/// the best midpoint threshold, until max_bins leaves are reached or no leaf
/// admits a split with both children >= min_leaf. A constant feature yields
/// a single bin.
BinBoundaries fit_tree_bins(std::span<const double> x, std::span<const double> y,
                            const PLEConfig& config);

/// Component t of the encoding (1-based over bins): 0 if x < edge[t-1], 1 if
/// x >= edge[t], otherwise (x - edge[t-1]) / (edge[t] - edge[t-1]).
/// Writes bins() components into out (out may be longer; the tail is zeroed).
void ple_encode(double x, const BinBoundaries& bins, std::span<double> out);

/// Fitted per-feature boundaries for every numeric column of a dataset.
struct PLEEncoder {
  PLEConfig config;
  std::vector<std::string> names;  // numeric columns, dataset order
  std::vector<BinBoundaries> boundaries;

  static PLEEncoder fit(const TabularDataset& train, const PLEConfig& config);

  /// [n, J_num, max_bins], zero-padded beyond each feature's fitted bin count.
  Tensor transform(const TabularDataset& data) const;
};

/// Sequence order and per-feature embedding inputs, frozen at fit time.
struct FeatureLayout {
  struct Feature {
    std::string name;
    ColumnKind kind = ColumnKind::Numeric;
    std::size_t vocab_size = 0;  // categorical only, includes the unknown token
  };
  std::vector<Feature> features;
  std::size_t count() const { return features.size(); }
  std::size_t numeric_count() const;
  std::size_t categorical_count() const;
};

/// One split, ready for the model: PLE-encoded numerics, integer categorical
/// ids and the (normalized) target.
struct EncodedData {
  Tensor ple;                             // [n, J_num, max_bins]
  std::vector<std::vector<int>> cat_ids;  // [J_cat][n]
  std::vector<double> target;
  std::size_t rows = 0;

  EncodedData gather(std::span<const std::size_t> rows_idx) const;
};

/// Everything fitted on the training split: target normalization, numeric
/// scaling to (-1,1), vocabularies and PLE bins. Transform applies them to
/// any split of the same schema.
struct Preprocessor {
  Task task = Task::Regression;
  std::optional<TargetScaler> target_scaler;  // regression / lss
  NumericScaler scaler;
  Vocabulary vocab;
  PLEEncoder ple;
  FeatureLayout layout;

  static Preprocessor fit(const TabularDataset& train, std::size_t max_bins,
                          std::size_t min_leaf = 64);
  EncodedData transform(const TabularDataset& data) const;

  std::string to_json_text() const;
  static Preprocessor from_json_text(const std::string& text);
};

}  // namespace tabssm
