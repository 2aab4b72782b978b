#include "tabssm/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace tabssm {

using nlohmann::json;

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Scaled (numerics + target) copy used by the linear baseline.
TabularDataset scale_for_baseline(const TabularDataset& raw, const Preprocessor& pre) {
  TabularDataset work = raw;
  if (work.task != Task::Binary && pre.target_scaler) pre.target_scaler->apply(work.target);
  pre.scaler.apply(work);
  return work;
}

std::vector<FoldResult> baseline_metrics(const TabularDataset& trainval_raw,
                                         const TabularDataset& test_raw,
                                         const Preprocessor& pre, std::size_t fold) {
  std::vector<FoldResult> out;
  if (trainval_raw.task == Task::Lss) return out;  // no distributional baseline
  TabularDataset train = scale_for_baseline(trainval_raw, pre);
  TabularDataset test = scale_for_baseline(test_raw, pre);
  auto baseline = LinearBaseline::fit(train, pre.vocab);
  auto pred = baseline.predict(test, pre.vocab);
  if (test.task == Task::Binary) {
    out.push_back({"linear_baseline", fold, "auc", auc(pred, test.target)});
  } else {
    out.push_back({"linear_baseline", fold, "mse", mse(pred, test.target)});
  }
  return out;
}

}  // namespace

std::vector<FoldResult> test_metrics(const Model& model, const Preprocessor& pre,
                                     const EncodedData& test, const std::string& model_id,
                                     std::size_t fold) {
  std::vector<FoldResult> out;
  auto pred = model.predict(test);
  switch (pre.task) {
    case Task::Regression:
      out.push_back({model_id, fold, "mse", mse(pred.primary, test.target)});
      break;
    case Task::Binary:
      out.push_back({model_id, fold, "auc", auc(pred.primary, test.target)});
      break;
    case Task::Lss: {
      out.push_back({model_id, fold, "crps",
                     crps_normal_mean(pred.primary, pred.sigma, test.target)});
      out.push_back({model_id, fold, "nll", evaluate_loss(model, test)});
      out.push_back({model_id, fold, "mse", mse(pred.primary, test.target)});
      break;
    }
  }
  return out;
}

CvResult run_cross_validation(const TabularDataset& data, const PipelineConfig& cfg,
                              std::uint64_t seed, const std::string& model_id) {
  CvResult result;
  const auto plan =
      FoldPlan::make(data.rows(), cfg.folds, substream_seed(seed, "data_split"),
                     cfg.val_fraction);
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    const auto& split = plan.folds[f];
    TabularDataset train_raw = data.select_rows(split.train);
    TabularDataset val_raw = data.select_rows(split.val);
    TabularDataset test_raw = data.select_rows(split.test);

    Preprocessor pre =
        Preprocessor::fit(train_raw, cfg.model.effective_max_bins(), cfg.min_leaf);
    EncodedData train = pre.transform(train_raw);
    EncodedData val = pre.transform(val_raw);
    EncodedData test = pre.transform(test_raw);

    ModelConfig mc = cfg.model;
    mc.head = head_for_task(data.task);
    const std::string fold_tag = "fold" + std::to_string(f);
    Model model(mc, pre.layout, substream_seed(seed, fold_tag + ".init"));

    TrainConfig tc = cfg.train;
    tc.seed = substream_seed(seed, fold_tag + ".train");
    result.histories.push_back(train_model(model, train, val, tc));

    auto rows = test_metrics(model, pre, test, model_id, f);
    result.fold_results.insert(result.fold_results.end(), rows.begin(), rows.end());

    if (cfg.with_baseline) {
      TabularDataset trainval_raw = train_raw;
      for (auto idx : split.val) {
        for (std::size_t c = 0; c < data.columns.size(); ++c) {
          if (data.columns[c].spec.kind == ColumnKind::Numeric) {
            trainval_raw.columns[c].numeric.push_back(data.columns[c].numeric[idx]);
          } else {
            trainval_raw.columns[c].categories.push_back(data.columns[c].categories[idx]);
          }
        }
        trainval_raw.target.push_back(data.target[idx]);
      }
      auto brows = baseline_metrics(trainval_raw, test_raw, pre, f);
      result.fold_results.insert(result.fold_results.end(), brows.begin(), brows.end());
    }
  }
  result.aggregates = aggregate(result.fold_results);
  return result;
}

TrainRunResult run_single_training(const TabularDataset& data, const PipelineConfig& cfg,
                                   std::uint64_t seed, const std::string& checkpoint_path) {
  const auto split = holdout_split(data.rows(), substream_seed(seed, "data_split"), 0.2,
                                   cfg.val_fraction);
  TabularDataset train_raw = data.select_rows(split.train);
  TabularDataset val_raw = data.select_rows(split.val);
  TabularDataset test_raw = data.select_rows(split.test);

  Preprocessor pre = Preprocessor::fit(train_raw, cfg.model.effective_max_bins(), cfg.min_leaf);
  EncodedData train = pre.transform(train_raw);
  EncodedData val = pre.transform(val_raw);
  EncodedData test = pre.transform(test_raw);

  ModelConfig mc = cfg.model;
  mc.head = head_for_task(data.task);
  Model model(mc, pre.layout, substream_seed(seed, "init"));

  TrainConfig tc = cfg.train;
  tc.seed = substream_seed(seed, "train");
  TrainRunResult out;
  out.history = train_model(model, train, val, tc);
  out.test_results = test_metrics(model, pre, test, "model", 0);
  if (!checkpoint_path.empty()) save_checkpoint(model, pre, checkpoint_path);
  return out;
}

void write_history_csv(const TrainHistory& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,train_loss,val_loss,lr\n";
  for (const auto& e : history.epochs) {
    out << e.epoch << "," << fmt_double(e.train_loss) << "," << fmt_double(e.val_loss) << ","
        << fmt_double(e.lr) << "\n";
  }
}

void write_folds_csv(const std::vector<FoldResult>& results, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "model,fold,metric,value\n";
  for (const auto& r : results) {
    out << r.model_id << "," << r.fold << "," << r.metric << "," << fmt_double(r.value)
        << "\n";
  }
}

std::vector<FoldResult> read_folds_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty folds file: " + path);
  std::vector<FoldResult> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    FoldResult r;
    std::string fold_s, value_s;
    if (!std::getline(ss, r.model_id, ',') || !std::getline(ss, fold_s, ',') ||
        !std::getline(ss, r.metric, ',') || !std::getline(ss, value_s)) {
      throw std::runtime_error("malformed folds row in " + path + ": " + line);
    }
    r.fold = std::stoul(fold_s);
    r.value = std::stod(value_s);
    out.push_back(std::move(r));
  }
  return out;
}

void write_aggregate_json(const CvResult& result, const std::string& dataset,
                          const std::string& path) {
  json metrics = json::object();
  for (const auto& [key, agg] : result.aggregates) {
    metrics[key.first + "." + key.second] = {
        {"mean", agg.mean}, {"std", agg.stddev}, {"folds", agg.count}};
  }
  json j{{"dataset", dataset}, {"metrics", metrics}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace tabssm
