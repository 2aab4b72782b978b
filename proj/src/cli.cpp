#include "tabssm/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace tabssm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string dataset_name_from_path(const std::string& path) {
  return fs::path(path).stem().string();
}

void apply_config_file(RunSettings& s, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw UsageError("config file is not valid JSON: " + std::string(e.what()));
  }
  static const std::set<std::string> known{
      "d",          "layers",     "expansion",          "kernel",      "state_dim",
      "pooling",    "bidirectional", "interaction",     "arch",        "head",
      "max_bins",   "dropout",    "attention_heads",    "ff_dim",      "dt_rank",
      "lr",         "weight_decay", "batch_size",       "max_epochs",  "early_stop_patience",
      "lr_patience", "lr_factor", "seed",               "folds",       "val_fraction",
      "min_leaf",   "with_baseline"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw UsageError("unknown config key: " + key);
  }
  auto& m = s.pipeline.model;
  auto& t = s.pipeline.train;
  if (j.contains("d")) m.d = j["d"].get<std::size_t>();
  if (j.contains("layers")) m.layers = j["layers"].get<std::size_t>();
  if (j.contains("expansion")) m.expansion = j["expansion"].get<std::size_t>();
  if (j.contains("kernel")) m.kernel = j["kernel"].get<std::size_t>();
  if (j.contains("state_dim")) m.state_dim = j["state_dim"].get<std::size_t>();
  if (j.contains("pooling")) m.pooling = pooling_from_name(j["pooling"].get<std::string>());
  if (j.contains("bidirectional")) m.bidirectional = j["bidirectional"].get<bool>();
  if (j.contains("interaction")) m.interaction = j["interaction"].get<bool>();
  if (j.contains("arch")) m.arch = arch_from_name(j["arch"].get<std::string>());
  if (j.contains("head")) m.head = head_from_name(j["head"].get<std::string>());
  if (j.contains("max_bins")) m.max_bins = j["max_bins"].get<std::size_t>();
  if (j.contains("dropout")) m.dropout = j["dropout"].get<double>();
  if (j.contains("attention_heads")) m.attention_heads = j["attention_heads"].get<std::size_t>();
  if (j.contains("ff_dim")) m.ff_dim = j["ff_dim"].get<std::size_t>();
  if (j.contains("dt_rank")) m.dt_rank = j["dt_rank"].get<std::size_t>();
  if (j.contains("lr")) t.lr = j["lr"].get<double>();
  if (j.contains("weight_decay")) t.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("batch_size")) t.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("max_epochs")) t.max_epochs = j["max_epochs"].get<std::size_t>();
  if (j.contains("early_stop_patience"))
    t.early_stop_patience = j["early_stop_patience"].get<std::size_t>();
  if (j.contains("lr_patience")) t.lr_patience = j["lr_patience"].get<std::size_t>();
  if (j.contains("lr_factor")) t.lr_factor = j["lr_factor"].get<double>();
  if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("folds")) s.pipeline.folds = j["folds"].get<std::size_t>();
  if (j.contains("val_fraction")) s.pipeline.val_fraction = j["val_fraction"].get<double>();
  if (j.contains("min_leaf")) s.pipeline.min_leaf = j["min_leaf"].get<std::size_t>();
  if (j.contains("with_baseline")) s.pipeline.with_baseline = j["with_baseline"].get<bool>();
}

TabularDataset load_dataset(const RunSettings& s) {
  if (s.schema_path.empty()) throw UsageError("--schema is required");
  if (s.data_path.empty()) throw UsageError("--data is required");
  DatasetSchema schema;
  try {
    schema = DatasetSchema::from_json_file(s.schema_path);
  } catch (const std::exception& e) {
    throw UsageError(std::string("schema error: ") + e.what());
  }
  if (!fs::exists(s.data_path)) throw UsageError("data file not found: " + s.data_path);
  TabularDataset data = load_csv(s.data_path, schema);
  if (data.rows() == 0) throw std::runtime_error("no usable rows in " + s.data_path);
  // the default sequence order: numeric block first, then categorical
  return reorder_features(data, default_feature_order(data));
}

void resolve_kernel(PipelineConfig& cfg, const TabularDataset& data) {
  if (cfg.model.kernel == 0) {
    cfg.model.kernel = data.feature_count() + (cfg.model.pooling == Pooling::Cls ? 1 : 0);
  }
}

int guard(const std::function<int()>& body) {
  try {
    return body();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

std::string primary_metric(const std::vector<FoldResult>& rows) {
  bool has_auc = false, has_crps = false;
  for (const auto& r : rows) {
    has_auc = has_auc || r.metric == "auc";
    has_crps = has_crps || r.metric == "crps";
  }
  if (has_auc) return "auc";
  if (has_crps) return "crps";
  return "mse";
}

bool metric_higher_better(const std::string& metric) { return metric == "auc"; }

std::vector<double> fold_values(const std::vector<FoldResult>& rows, const std::string& model,
                                const std::string& metric) {
  std::vector<std::pair<std::size_t, double>> picked;
  for (const auto& r : rows) {
    if (r.model_id == model && r.metric == metric) picked.emplace_back(r.fold, r.value);
  }
  std::sort(picked.begin(), picked.end());
  std::vector<double> out;
  out.reserve(picked.size());
  for (auto& [fold, v] : picked) out.push_back(v);
  return out;
}

}  // namespace

RunSettings resolve_settings(const std::string& config_path, const std::string& data_path,
                             const std::string& schema_path, const std::string& out_dir,
                             const CliOverrides& o) {
  RunSettings s;
  s.data_path = data_path;
  s.schema_path = schema_path;
  s.out_dir = out_dir;
  if (!config_path.empty()) apply_config_file(s, config_path);
  try {
    if (o.seed) s.seed = *o.seed;
    if (o.kernel) s.pipeline.model.kernel = *o.kernel;
    if (o.pooling) s.pipeline.model.pooling = pooling_from_name(*o.pooling);
    if (o.arch) s.pipeline.model.arch = arch_from_name(*o.arch);
    if (o.head) s.pipeline.model.head = head_from_name(*o.head);
    if (o.bidirectional) s.pipeline.model.bidirectional = *o.bidirectional;
    if (o.interaction) s.pipeline.model.interaction = *o.interaction;
    if (o.folds) s.pipeline.folds = *o.folds;
    if (o.max_epochs) s.pipeline.train.max_epochs = *o.max_epochs;
    if (o.batch_size) s.pipeline.train.batch_size = *o.batch_size;
    if (o.d) s.pipeline.model.d = *o.d;
    if (o.layers) s.pipeline.model.layers = *o.layers;
    if (o.state_dim) s.pipeline.model.state_dim = *o.state_dim;
    if (o.max_bins) s.pipeline.model.max_bins = *o.max_bins;
    s.pipeline.train.validate();
    if (s.pipeline.model.kernel != 0) s.pipeline.model.validate();
    if (s.pipeline.folds < 2) throw std::invalid_argument("folds must be >= 2");
  } catch (const std::exception& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
  return s;
}

int cmd_train(const RunSettings& settings) {
  return guard([&]() {
    TabularDataset data = load_dataset(settings);
    PipelineConfig cfg = settings.pipeline;
    resolve_kernel(cfg, data);
    fs::create_directories(settings.out_dir);
    const std::string ckpt = (fs::path(settings.out_dir) / "checkpoint.bin").string();
    auto result = run_single_training(data, cfg, settings.seed, ckpt);
    write_history_csv(result.history, (fs::path(settings.out_dir) / "history.csv").string());
    write_folds_csv(result.test_results,
                    (fs::path(settings.out_dir) / "folds.csv").string());
    for (const auto& r : result.test_results) {
      std::cout << "test " << r.metric << " " << r.value << "\n";
    }
    std::cout << "checkpoint written to " << ckpt << "\n";
    return 0;
  });
}

int cmd_cv(const RunSettings& settings) {
  return guard([&]() {
    TabularDataset data = load_dataset(settings);
    PipelineConfig cfg = settings.pipeline;
    resolve_kernel(cfg, data);
    fs::create_directories(settings.out_dir);
    const std::string model_id = arch_name(cfg.model.arch);
    auto result = run_cross_validation(data, cfg, settings.seed, model_id);
    write_folds_csv(result.fold_results,
                    (fs::path(settings.out_dir) / "folds.csv").string());
    write_aggregate_json(result, dataset_name_from_path(settings.data_path),
                         (fs::path(settings.out_dir) / "aggregate.json").string());
    for (std::size_t f = 0; f < result.histories.size(); ++f) {
      write_history_csv(result.histories[f],
                        (fs::path(settings.out_dir) / ("fold" + std::to_string(f) +
                                                       "_history.csv"))
                            .string());
    }
    for (const auto& [key, agg] : result.aggregates) {
      std::cout << key.first << " " << key.second << " mean " << agg.mean << " std "
                << agg.stddev << "\n";
    }
    return 0;
  });
}

int cmd_ablate_ordering(const RunSettings& settings, const std::string& mode,
                        std::size_t shuffles) {
  return guard([&]() {
    if (mode != "before-embedding" && mode != "after-embedding") {
      throw UsageError("mode must be before-embedding or after-embedding, got " + mode);
    }
    TabularDataset data = load_dataset(settings);
    PipelineConfig cfg = settings.pipeline;
    resolve_kernel(cfg, data);
    cfg.with_baseline = false;
    fs::create_directories(settings.out_dir);

    const std::size_t j = data.feature_count();
    std::vector<std::pair<std::string, std::vector<std::size_t>>> orderings;
    std::vector<std::size_t> identity(j);
    for (std::size_t i = 0; i < j; ++i) identity[i] = i;
    orderings.emplace_back("default", identity);
    std::vector<std::size_t> flipped(identity.rbegin(), identity.rend());
    orderings.emplace_back("flipped", flipped);
    // swapped blocks: categorical features first, then numeric
    std::vector<std::size_t> cat_num;
    for (std::size_t i = 0; i < j; ++i)
      if (data.columns[i].spec.kind == ColumnKind::Categorical) cat_num.push_back(i);
    for (std::size_t i = 0; i < j; ++i)
      if (data.columns[i].spec.kind == ColumnKind::Numeric) cat_num.push_back(i);
    orderings.emplace_back("cat_num", cat_num);
    Rng shuffle_rng(substream_seed(settings.seed, "ordering_shuffles"));
    for (std::size_t k = 0; k < shuffles; ++k) {
      orderings.emplace_back("shuffle" + std::to_string(k + 1),
                             shuffled_indices(j, shuffle_rng));
    }

    std::vector<FoldResult> all_rows;
    json report = json::array();
    std::vector<double> default_values;
    for (const auto& [label, perm] : orderings) {
      CvResult result;
      if (mode == "before-embedding") {
        TabularDataset permuted = reorder_features(data, perm);
        result = run_cross_validation(permuted, cfg, settings.seed, label);
      } else {
        PipelineConfig shuffled_cfg = cfg;
        const bool is_identity = perm == identity;
        if (!is_identity) shuffled_cfg.model.sequence_permutation = perm;
        result = run_cross_validation(data, shuffled_cfg, settings.seed, label);
      }
      all_rows.insert(all_rows.end(), result.fold_results.begin(),
                      result.fold_results.end());
      const std::string metric = primary_metric(result.fold_results);
      auto values = fold_values(result.fold_results, label, metric);
      if (label == "default") default_values = values;
      json entry{{"ordering", label},
                 {"permutation", perm},
                 {"metric", metric},
                 {"mean", aggregate(result.fold_results).at({label, metric}).mean},
                 {"std", aggregate(result.fold_results).at({label, metric}).stddev}};
      if (label != "default") {
        auto t = paired_t_test(values, default_values);
        entry["p_vs_default"] = t.p;
        if (t.zero_variance) entry["zero_variance"] = true;
      }
      report.push_back(entry);
      std::cout << label << " " << metric << " mean " << entry["mean"].get<double>() << "\n";
    }
    write_folds_csv(all_rows, (fs::path(settings.out_dir) / "folds.csv").string());
    std::ofstream out((fs::path(settings.out_dir) / "ordering_report.json").string());
    json meta{{"mode", mode}, {"seed", settings.seed}, {"orderings", report}};
    out << meta.dump(2) << "\n";
    return 0;
  });
}

int cmd_compare(const std::string& dir_a, const std::string& dir_b,
                const std::string& out_dir) {
  return guard([&]() {
    auto discover = [](const std::string& dir) {
      std::map<std::string, std::string> found;  // dataset -> folds.csv path
      if (!fs::is_directory(dir)) throw UsageError("not a directory: " + dir);
      if (fs::exists(fs::path(dir) / "folds.csv")) {
        found[fs::path(dir).filename().string()] = (fs::path(dir) / "folds.csv").string();
      }
      for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_directory() && fs::exists(entry.path() / "folds.csv")) {
          found[entry.path().filename().string()] = (entry.path() / "folds.csv").string();
        }
      }
      if (found.empty()) throw UsageError("no folds.csv found under " + dir);
      return found;
    };
    const auto sets_a = discover(dir_a);
    const auto sets_b = discover(dir_b);
    for (const auto& [name, _] : sets_a) {
      if (!sets_b.count(name)) throw UsageError("dataset '" + name + "' missing in " + dir_b);
    }
    for (const auto& [name, _] : sets_b) {
      if (!sets_a.count(name)) throw UsageError("dataset '" + name + "' missing in " + dir_a);
    }

    auto model_of = [](const std::vector<FoldResult>& rows, const std::string& path) {
      std::set<std::string> ids;
      for (const auto& r : rows)
        if (r.model_id != "linear_baseline") ids.insert(r.model_id);
      if (ids.size() != 1) {
        throw UsageError("expected one model in " + path + ", found " +
                         std::to_string(ids.size()));
      }
      return *ids.begin();
    };

    struct Row {
      std::string dataset, metric, model_a, model_b, winner;
      double p, t, mean_a, std_a, mean_b, std_b;
      bool zero_variance;
    };
    std::vector<Row> rows;
    std::vector<double> pvalues;
    for (const auto& [name, path_a] : sets_a) {
      auto ra = read_folds_csv(path_a);
      auto rb = read_folds_csv(sets_b.at(name));
      const std::string ma = model_of(ra, path_a);
      const std::string mb = model_of(rb, sets_b.at(name));
      const std::string metric = primary_metric(ra);
      auto va = fold_values(ra, ma, metric);
      auto vb = fold_values(rb, mb, metric);
      if (va.size() != vb.size() || va.empty()) {
        throw std::runtime_error("fold count mismatch for dataset '" + name + "': " +
                                 std::to_string(va.size()) + " vs " +
                                 std::to_string(vb.size()));
      }
      auto t = paired_t_test(va, vb);
      if (t.zero_variance && t.p == 0.0) {
        std::cerr << "warning: zero-variance fold differences on " << name << "\n";
      }
      Row row;
      row.dataset = name;
      row.metric = metric;
      row.model_a = ma;
      row.model_b = mb;
      row.p = t.p;
      row.t = t.t;
      row.zero_variance = t.zero_variance;
      double mean_a = 0, mean_b = 0;
      for (double v : va) mean_a += v;
      for (double v : vb) mean_b += v;
      mean_a /= double(va.size());
      mean_b /= double(vb.size());
      double var_a = 0, var_b = 0;
      for (double v : va) var_a += (v - mean_a) * (v - mean_a);
      for (double v : vb) var_b += (v - mean_b) * (v - mean_b);
      row.mean_a = mean_a;
      row.std_a = va.size() > 1 ? std::sqrt(var_a / double(va.size() - 1)) : 0.0;
      row.mean_b = mean_b;
      row.std_b = vb.size() > 1 ? std::sqrt(var_b / double(vb.size() - 1)) : 0.0;
      if (mean_a == mean_b) {
        row.winner = "tie";
      } else {
        const bool a_better = metric_higher_better(metric) ? mean_a > mean_b : mean_a < mean_b;
        row.winner = a_better ? ma + " (a)" : mb + " (b)";
      }
      rows.push_back(std::move(row));
      pvalues.push_back(t.p);
    }

    const auto reject05 = benjamini_hochberg(pvalues, 0.05);
    const auto reject10 = benjamini_hochberg(pvalues, 0.10);

    fs::create_directories(out_dir);
    std::ofstream csv((fs::path(out_dir) / "comparison.csv").string());
    csv << "dataset,p,bh_reject_0.05,bh_reject_0.10,winner\n";
    json jrows = json::array();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", r.p);
      csv << r.dataset << "," << buf << "," << (reject05[i] ? 1 : 0) << ","
          << (reject10[i] ? 1 : 0) << "," << r.winner << "\n";
      jrows.push_back({{"dataset", r.dataset},
                       {"metric", r.metric},
                       {"model_a", r.model_a},
                       {"model_b", r.model_b},
                       {"mean_a", r.mean_a},
                       {"std_a", r.std_a},
                       {"mean_b", r.mean_b},
                       {"std_b", r.std_b},
                       {"p", r.p},
                       {"t", r.t},
                       {"zero_variance", r.zero_variance},
                       {"bh_reject_0.05", static_cast<bool>(reject05[i])},
                       {"bh_reject_0.10", static_cast<bool>(reject10[i])},
                       {"winner", r.winner}});
      std::cout << r.dataset << " p=" << r.p << " winner=" << r.winner << "\n";
    }
    std::ofstream jout((fs::path(out_dir) / "comparison.json").string());
    jout << json{{"comparisons", jrows}}.dump(2) << "\n";
    return 0;
  });
}

int cmd_synth(std::uint64_t seed, const std::string& out_dir) {
  return guard([&]() {
    fs::create_directories(out_dir);
    auto [data, truth] = generate_synthetic_ordering_dataset(seed);
    const std::string csv_path = (fs::path(out_dir) / "synthetic.csv").string();
    write_csv(data, "target", csv_path);

    DatasetSchema schema;
    for (const auto& c : data.columns) schema.columns.push_back(c.spec);
    schema.target = "target";
    schema.task = Task::Regression;
    std::ofstream sch((fs::path(out_dir) / "synthetic.schema.json").string());
    sch << schema.to_json_text() << "\n";

    std::ofstream gt((fs::path(out_dir) / "ground_truth.json").string());
    gt << truth.to_json_text() << "\n";
    std::cout << "wrote " << data.rows() << " rows to " << csv_path << "\n";
    return 0;
  });
}

}  // namespace tabssm
