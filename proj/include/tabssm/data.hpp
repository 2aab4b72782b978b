#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tabssm/rng.hpp"

namespace tabssm {

enum class Task { Regression, Binary, Lss };
enum class ColumnKind { Numeric, Categorical };

std::string task_name(Task t);
Task task_from_name(const std::string& s);

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::Numeric;
  std::size_t position = 0;
};

/// Feature columns plus target name and task, loaded from a JSON schema file:
///   {"columns": [{"name": ..., "kind": "numeric"|"categorical"}, ...],
///    "target": ..., "task": "regression"|"binary"|"lss"}
struct DatasetSchema {
  std::vector<ColumnSpec> columns;
  std::string target;
  Task task = Task::Regression;

  static DatasetSchema from_json_file(const std::string& path);
  static DatasetSchema from_json_text(const std::string& text);
  std::string to_json_text() const;
};

struct Column {
  ColumnSpec spec;
  std::vector<double> numeric;          // filled when kind == Numeric
  std::vector<std::string> categories;  // raw strings when kind == Categorical
};

struct TabularDataset {
  std::vector<Column> columns;  // current sequence order
  std::vector<double> target;
  Task task = Task::Regression;

  std::size_t rows() const { return target.size(); }
  std::size_t feature_count() const { return columns.size(); }
  std::size_t numeric_count() const;
  std::size_t categorical_count() const;
  const Column& column(std::string_view name) const;

  TabularDataset select_rows(std::span<const std::size_t> idx) const;
};

/// Parses the CSV (comma separated, first row header, "." decimal separator).
/// Rows containing a missing value (empty cell, "NA" or "?") are dropped.
TabularDataset load_csv(const std::string& path, const DatasetSchema& schema);

void write_csv(const TabularDataset& data, const std::string& target_name,
               const std::string& path);

/// Per-column category -> id maps. Id 0 is always the unknown token; ids of
/// seen categories start at 1 in order of first appearance. Built from the
/// training split only; transforming unseen categories yields id 0.
class Vocabulary {
 public:
  static Vocabulary build(const TabularDataset& train);

  int id(std::string_view column, const std::string& category) const;
  std::size_t size(std::string_view column) const;  // includes the unknown token
  const std::vector<std::string>& column_names() const { return names_; }

  /// Ids per categorical column (dataset order), each of length rows().
  std::vector<std::vector<int>> transform(const TabularDataset& data) const;

  std::string to_json_text() const;
  static Vocabulary from_json_text(const std::string& text);

 private:
  std::vector<std::string> names_;
  std::map<std::string, std::vector<std::string>, std::less<>> id_to_cat_;
  std::map<std::string, std::map<std::string, int>, std::less<>> cat_to_id_;
};

/// y <- (y - mean) / std with training-split statistics (population std).
struct TargetScaler {
  double mean = 0.0;
  double stddev = 1.0;

  static TargetScaler fit(std::span<const double> y);  // throws on zero std
  double transform(double y) const { return (y - mean) / stddev; }
  double inverse(double z) const { return z * stddev + mean; }
  void apply(std::vector<double>& y) const;
};

/// x <- 2 (x - min) / (max - min) - 1 with training min/max; out-of-range
/// values at inference are clamped to [-1, 1].
struct NumericScaler {
  std::vector<std::string> names;  // numeric columns, dataset order
  std::vector<double> lo, hi;

  static NumericScaler fit(const TabularDataset& train);  // constant column -> error
  void apply(TabularDataset& data) const;
};

struct FoldSplit {
  std::vector<std::size_t> train, val, test;
};

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
  std::vector<std::size_t> assignments;  // fold index per row
  std::vector<FoldSplit> folds;

  static FoldPlan make(std::size_t n, std::size_t k, std::uint64_t seed,
                       double val_fraction = 0.2);
};

/// Single shuffled train/val/test split with the same ratios a k-fold plan
/// would produce (test_fraction of rows held out, then val_fraction of the rest).
FoldSplit holdout_split(std::size_t n, std::uint64_t seed, double test_fraction = 0.2,
                        double val_fraction = 0.2);

// ---- synthetic ordering dataset ---------------------------------------------

struct SyntheticGroundTruth {
  struct Interaction {
    std::string kind;  // "num_num" | "num_cat" | "cat_cat"
    std::string a, b;
    double weight = 0.0;
  };
  std::vector<std::string> numeric_names, categorical_names;
  std::vector<double> numeric_coefficients;
  std::array<double, 4> level_effects{};  // shared per-level effect values
  std::vector<Interaction> interactions;
  double noise_std = 0.0;
  std::uint64_t seed = 0;

  std::string to_json_text() const;
};

/// 5000 rows, five numerics (two correlated pairs, targets 0.8 and 0.6) and
/// five four-level categoricals; target = linear effects + three interaction
/// terms + Gaussian noise, built on standard-normalized numerics.
std::pair<TabularDataset, SyntheticGroundTruth> generate_synthetic_ordering_dataset(
    std::uint64_t seed);

// ---- ordering ----------------------------------------------------------------

/// New column i = old column perm[i]; values untouched, positions renumbered.
TabularDataset reorder_features(const TabularDataset& data, std::span<const std::size_t> perm);

/// Numeric block first, then categorical block, stable within each block.
std::vector<std::size_t> default_feature_order(const TabularDataset& data);

std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm);

}  // namespace tabssm
