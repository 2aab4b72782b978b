#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tabssm/eval.hpp"
#include "tabssm/train.hpp"

namespace tabssm {

struct PipelineConfig {
  ModelConfig model;
  TrainConfig train;
  std::size_t folds = 5;
  double val_fraction = 0.2;
  std::size_t min_leaf = 64;
  bool with_baseline = true;  // emit linear-baseline rows alongside the model's
};

struct CvResult {
  std::vector<FoldResult> fold_results;
  std::map<std::pair<std::string, std::string>, Aggregate> aggregates;
  std::vector<TrainHistory> histories;  // per model fold
};

/// Per-fold metrics of the model on the (normalized) test split; for
/// regression: mse; binary: auc; lss: crps, nll and the mse of the location.
std::vector<FoldResult> test_metrics(const Model& model, const Preprocessor& pre,
                                     const EncodedData& test, const std::string& model_id,
                                     std::size_t fold);

/// k-fold cross-validation of one configuration on a dataset. All randomness
/// (fold plan, per-fold init/shuffle) derives from `seed`, so identical seeds
/// reproduce runs bit-exactly. Head kind is taken from the dataset task.
CvResult run_cross_validation(const TabularDataset& data, const PipelineConfig& cfg,
                              std::uint64_t seed, const std::string& model_id);

struct TrainRunResult {
  TrainHistory history;
  std::vector<FoldResult> test_results;
};

/// Single 64/16/20 split: fit, train, checkpoint; returns the history and
/// held-out metrics.
TrainRunResult run_single_training(const TabularDataset& data, const PipelineConfig& cfg,
                                   std::uint64_t seed, const std::string& checkpoint_path);

// ---- artifact files ---------------------------------------------------------

void write_history_csv(const TrainHistory& history, const std::string& path);
void write_folds_csv(const std::vector<FoldResult>& results, const std::string& path);
std::vector<FoldResult> read_folds_csv(const std::string& path);
void write_aggregate_json(const CvResult& result, const std::string& dataset,
                          const std::string& path);

}  // namespace tabssm
