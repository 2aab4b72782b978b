#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "tabssm/data.hpp"
#include "tabssm/pipeline.hpp"

using namespace tabssm;
namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  const char* p = std::getenv("TABSSM_BIN");
  return p ? p : "";
}

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult run_cli(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "cli_out.txt";
  const std::string cmd = cli_path() + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  CliResult r;
  r.code = WEXITSTATUS(raw);
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_small_dataset(const fs::path& dir, std::size_t rows, std::uint64_t seed) {
  auto [data, truth] = generate_synthetic_ordering_dataset(seed);
  std::vector<std::size_t> idx(rows);
  for (std::size_t i = 0; i < rows; ++i) idx[i] = i;
  TabularDataset subset = data.select_rows(idx);
  write_csv(subset, "target", (dir / "small.csv").string());
  DatasetSchema schema;
  for (const auto& c : subset.columns) schema.columns.push_back(c.spec);
  schema.target = "target";
  schema.task = Task::Regression;
  std::ofstream out(dir / "small.schema.json");
  out << schema.to_json_text();
}

void write_tiny_config(const fs::path& path, std::size_t folds = 2) {
  std::ofstream out(path);
  out << R"({"d": 8, "layers": 1, "state_dim": 4, "kernel": 2, "max_epochs": 2,
             "batch_size": 64, "min_leaf": 8, "folds": )"
      << folds << "}";
}

}  // namespace

TEST_CASE("cli integration" * doctest::skip(cli_path().empty())) {
  REQUIRE_FALSE(cli_path().empty());

  SUBCASE("synth writes the dataset, schema and ground truth") {
    auto dir = fresh_dir("tabssm_cli_synth");
    auto r = run_cli("synth --seed 0 --out " + (dir / "d").string(), dir);
    CHECK(r.code == 0);
    std::ifstream csv(dir / "d" / "synthetic.csv");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(csv, line)) ++lines;
    CHECK(lines == 5001);  // header + 5000 rows

    auto gt = nlohmann::json::parse(slurp(dir / "d" / "ground_truth.json"));
    CHECK(gt.at("interactions").size() == 3);

    auto r2 = run_cli("synth --seed 1 --out " + (dir / "d2").string(), dir);
    CHECK(r2.code == 0);
    CHECK(slurp(dir / "d" / "synthetic.csv") != slurp(dir / "d2" / "synthetic.csv"));
  }

  SUBCASE("train smoke run on a tiny file is deterministic per seed") {
    auto dir = fresh_dir("tabssm_cli_train");
    write_small_dataset(dir, 100, 3);
    write_tiny_config(dir / "cfg.json");
    const std::string common = "train --data " + (dir / "small.csv").string() + " --schema " +
                               (dir / "small.schema.json").string() + " --config " +
                               (dir / "cfg.json").string() + " --seed 11 --out ";
    auto r1 = run_cli(common + (dir / "o1").string(), dir);
    CHECK(r1.code == 0);
    CHECK(fs::exists(dir / "o1" / "history.csv"));
    CHECK(fs::exists(dir / "o1" / "checkpoint.bin"));
    auto r2 = run_cli(common + (dir / "o2").string(), dir);
    CHECK(r2.code == 0);
    CHECK(slurp(dir / "o1" / "history.csv") == slurp(dir / "o2" / "history.csv"));
  }

  SUBCASE("bad schema path exits with the usage code") {
    auto dir = fresh_dir("tabssm_cli_bad");
    write_small_dataset(dir, 50, 3);
    auto r = run_cli("train --data " + (dir / "small.csv").string() +
                         " --schema /nonexistent/schema.json --out " + (dir / "o").string(),
                     dir);
    CHECK(r.code == 2);
  }

  SUBCASE("unknown config keys are rejected") {
    auto dir = fresh_dir("tabssm_cli_cfg");
    write_small_dataset(dir, 50, 3);
    std::ofstream bad(dir / "bad.json");
    bad << R"({"d": 8, "learning_rate_typo": 1})";
    bad.close();
    auto r = run_cli("train --data " + (dir / "small.csv").string() + " --schema " +
                         (dir / "small.schema.json").string() + " --config " +
                         (dir / "bad.json").string(),
                     dir);
    CHECK(r.code == 2);
    CHECK(r.out.find("learning_rate_typo") != std::string::npos);
  }

  SUBCASE("cv emits per-fold rows and a consistent aggregate") {
    auto dir = fresh_dir("tabssm_cli_cv");
    write_small_dataset(dir, 200, 5);
    write_tiny_config(dir / "cfg.json");
    auto r = run_cli("cv --data " + (dir / "small.csv").string() + " --schema " +
                         (dir / "small.schema.json").string() + " --config " +
                         (dir / "cfg.json").string() + " --seed 4 --out " +
                         (dir / "o").string(),
                     dir);
    CHECK(r.code == 0);
    auto rows = read_folds_csv((dir / "o" / "folds.csv").string());
    double sum = 0;
    std::size_t count = 0;
    for (const auto& row : rows) {
      if (row.model_id == "mambular" && row.metric == "mse") {
        sum += row.value;
        ++count;
      }
    }
    CHECK(count == 2);  // one row per fold
    auto agg = nlohmann::json::parse(slurp(dir / "o" / "aggregate.json"));
    const double mean = agg.at("metrics").at("mambular.mse").at("mean").get<double>();
    CHECK(mean == doctest::Approx(sum / double(count)).epsilon(1e-12));
  }

  SUBCASE("compare of identical directories finds no significant differences") {
    auto dir = fresh_dir("tabssm_cli_cmp");
    fs::create_directories(dir / "a" / "ds1");
    std::vector<FoldResult> rows{{"mambular", 0, "mse", 0.5},
                                 {"mambular", 1, "mse", 0.6},
                                 {"mambular", 2, "mse", 0.4}};
    write_folds_csv(rows, (dir / "a" / "ds1" / "folds.csv").string());
    fs::create_directories(dir / "b" / "ds1");
    write_folds_csv(rows, (dir / "b" / "ds1" / "folds.csv").string());
    auto r = run_cli("compare --a " + (dir / "a").string() + " --b " + (dir / "b").string() +
                         " --out " + (dir / "cmp").string(),
                     dir);
    CHECK(r.code == 0);
    auto cmp = nlohmann::json::parse(slurp(dir / "cmp" / "comparison.json"));
    for (const auto& c : cmp.at("comparisons")) {
      CHECK(c.at("p").get<double>() == 1.0);
      CHECK_FALSE(c.at("bh_reject_0.05").get<bool>());
      CHECK_FALSE(c.at("bh_reject_0.10").get<bool>());
    }
    const std::string csv = slurp(dir / "cmp" / "comparison.csv");
    CHECK(csv.find("dataset,p,bh_reject_0.05,bh_reject_0.10,winner") != std::string::npos);
  }

  SUBCASE("compare names a dataset missing on one side") {
    auto dir = fresh_dir("tabssm_cli_cmp2");
    fs::create_directories(dir / "a" / "only_here");
    std::vector<FoldResult> rows{{"m", 0, "mse", 0.5}, {"m", 1, "mse", 0.6}};
    write_folds_csv(rows, (dir / "a" / "only_here" / "folds.csv").string());
    fs::create_directories(dir / "b" / "elsewhere");
    write_folds_csv(rows, (dir / "b" / "elsewhere" / "folds.csv").string());
    auto r = run_cli("compare --a " + (dir / "a").string() + " --b " + (dir / "b").string(),
                     dir);
    CHECK(r.code == 2);
    CHECK(r.out.find("only_here") != std::string::npos);
  }

  SUBCASE("ordering ablation with zero shuffles runs the three fixed orderings") {
    auto dir = fresh_dir("tabssm_cli_ablate");
    write_small_dataset(dir, 150, 9);
    write_tiny_config(dir / "cfg.json");
    auto r = run_cli("ablate-ordering --mode before-embedding --shuffles 0 --data " +
                         (dir / "small.csv").string() + " --schema " +
                         (dir / "small.schema.json").string() + " --config " +
                         (dir / "cfg.json").string() + " --seed 2 --out " +
                         (dir / "o").string(),
                     dir);
    CHECK(r.code == 0);
    auto rows = read_folds_csv((dir / "o" / "folds.csv").string());
    std::size_t count = 0;
    for (const auto& row : rows) count += row.metric == "mse";
    CHECK(count == 3 * 2);  // default, flipped, cat_num across 2 folds

    auto rep = nlohmann::json::parse(slurp(dir / "o" / "ordering_report.json"));
    REQUIRE(rep.at("orderings").size() == 3);
    for (const auto& entry : rep.at("orderings")) {
      CHECK(entry.at("permutation").size() == 10);  // recorded verbatim
      if (entry.at("ordering") != "default") CHECK(entry.contains("p_vs_default"));
    }
    // the flipped ordering must be the exact reverse of the default
    const auto def = rep.at("orderings")[0].at("permutation").get<std::vector<std::size_t>>();
    const auto flip = rep.at("orderings")[1].at("permutation").get<std::vector<std::size_t>>();
    for (std::size_t i = 0; i < def.size(); ++i) CHECK(flip[i] == def[def.size() - 1 - i]);
  }

  SUBCASE("after-embedding mode accepts the kernel override") {
    auto dir = fresh_dir("tabssm_cli_ablate2");
    write_small_dataset(dir, 120, 13);
    write_tiny_config(dir / "cfg.json");
    auto r = run_cli("ablate-ordering --mode after-embedding --shuffles 1 --kernel 0 --data " +
                         (dir / "small.csv").string() + " --schema " +
                         (dir / "small.schema.json").string() + " --config " +
                         (dir / "cfg.json").string() + " --seed 2 --out " +
                         (dir / "o").string(),
                     dir);
    CHECK(r.code == 0);
    auto rep = nlohmann::json::parse(slurp(dir / "o" / "ordering_report.json"));
    CHECK(rep.at("orderings").size() == 4);  // three fixed + one shuffle
  }
}
