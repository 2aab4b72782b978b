#include "tabssm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace tabssm {

using nlohmann::json;

std::string task_name(Task t) {
  switch (t) {
    case Task::Regression: return "regression";
    case Task::Binary: return "binary";
    case Task::Lss: return "lss";
  }
  return "regression";
}

Task task_from_name(const std::string& s) {
  if (s == "regression") return Task::Regression;
  if (s == "binary") return Task::Binary;
  if (s == "lss") return Task::Lss;
  throw std::invalid_argument("unknown task: " + s + " (expected regression|binary|lss)");
}

// ---- schema ---------------------------------------------------------------------

DatasetSchema DatasetSchema::from_json_text(const std::string& text) {
  json j = json::parse(text);
  DatasetSchema s;
  if (!j.contains("columns") || !j.contains("target") || !j.contains("task")) {
    throw std::invalid_argument("schema must define columns, target and task");
  }
  std::size_t pos = 0;
  for (const auto& c : j.at("columns")) {
    ColumnSpec spec;
    spec.name = c.at("name").get<std::string>();
    const std::string kind = c.at("kind").get<std::string>();
    if (kind == "numeric")
      spec.kind = ColumnKind::Numeric;
    else if (kind == "categorical")
      spec.kind = ColumnKind::Categorical;
    else
      throw std::invalid_argument("unknown column kind: " + kind);
    spec.position = pos++;
    for (const auto& other : s.columns) {
      if (other.name == spec.name)
        throw std::invalid_argument("duplicate column name in schema: " + spec.name);
    }
    s.columns.push_back(std::move(spec));
  }
  s.target = j.at("target").get<std::string>();
  s.task = task_from_name(j.at("task").get<std::string>());
  return s;
}

DatasetSchema DatasetSchema::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open schema file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string DatasetSchema::to_json_text() const {
  json cols = json::array();
  for (const auto& c : columns) {
    cols.push_back({{"name", c.name},
                    {"kind", c.kind == ColumnKind::Numeric ? "numeric" : "categorical"}});
  }
  json j{{"columns", cols}, {"target", target}, {"task", task_name(task)}};
  return j.dump();
}

// ---- dataset ---------------------------------------------------------------------

std::size_t TabularDataset::numeric_count() const {
  std::size_t n = 0;
  for (const auto& c : columns) n += c.spec.kind == ColumnKind::Numeric;
  return n;
}

std::size_t TabularDataset::categorical_count() const {
  return columns.size() - numeric_count();
}

const Column& TabularDataset::column(std::string_view name) const {
  for (const auto& c : columns)
    if (c.spec.name == name) return c;
  throw std::out_of_range("no column named " + std::string(name));
}

TabularDataset TabularDataset::select_rows(std::span<const std::size_t> idx) const {
  TabularDataset out;
  out.task = task;
  out.columns.reserve(columns.size());
  for (const auto& c : columns) {
    Column nc;
    nc.spec = c.spec;
    if (c.spec.kind == ColumnKind::Numeric) {
      nc.numeric.reserve(idx.size());
      for (auto i : idx) nc.numeric.push_back(c.numeric[i]);
    } else {
      nc.categories.reserve(idx.size());
      for (auto i : idx) nc.categories.push_back(c.categories[i]);
    }
    out.columns.push_back(std::move(nc));
  }
  out.target.reserve(idx.size());
  for (auto i : idx) out.target.push_back(target[i]);
  return out;
}

// ---- csv --------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

bool is_missing(const std::string& s) { return s.empty() || s == "NA" || s == "?"; }

double parse_numeric(const std::string& s, std::size_t line_no, const std::string& col) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') {
    throw std::runtime_error("line " + std::to_string(line_no) + ": cannot parse '" + s +
                             "' as a number in column " + col);
  }
  return v;
}

}  // namespace

TabularDataset load_csv(const std::string& path, const DatasetSchema& schema) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open data file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty data file: " + path);
  const auto header = split_csv_line(line);

  auto find_col = [&](const std::string& name) -> std::size_t {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw std::runtime_error("schema error: column '" + name + "' not found in header of " +
                             path);
  };

  std::vector<std::size_t> feature_idx;
  for (const auto& c : schema.columns) feature_idx.push_back(find_col(c.name));
  const std::size_t target_idx = find_col(schema.target);

  TabularDataset data;
  data.task = schema.task;
  data.columns.resize(schema.columns.size());
  for (std::size_t j = 0; j < schema.columns.size(); ++j) {
    data.columns[j].spec = schema.columns[j];
    data.columns[j].spec.position = j;
  }

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw std::runtime_error("line " + std::to_string(line_no) + ": expected " +
                               std::to_string(header.size()) + " fields, got " +
                               std::to_string(fields.size()));
    }
    bool missing = is_missing(fields[target_idx]);
    for (auto fi : feature_idx) missing = missing || is_missing(fields[fi]);
    if (missing) continue;  // rows with missing values are dropped

    for (std::size_t j = 0; j < schema.columns.size(); ++j) {
      const std::string& raw = fields[feature_idx[j]];
      if (schema.columns[j].kind == ColumnKind::Numeric) {
        data.columns[j].numeric.push_back(parse_numeric(raw, line_no, schema.columns[j].name));
      } else {
        data.columns[j].categories.push_back(raw);
      }
    }
    const double y = parse_numeric(fields[target_idx], line_no, schema.target);
    if (schema.task == Task::Binary && y != 0.0 && y != 1.0) {
      throw std::runtime_error("line " + std::to_string(line_no) +
                               ": binary target must be 0 or 1, got " + fields[target_idx]);
    }
    data.target.push_back(y);
  }
  return data;
}

void write_csv(const TabularDataset& data, const std::string& target_name,
               const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& c : data.columns) out << c.spec.name << ",";
  out << target_name << "\n";
  char buf[64];
  for (std::size_t i = 0; i < data.rows(); ++i) {
    for (const auto& c : data.columns) {
      if (c.spec.kind == ColumnKind::Numeric) {
        std::snprintf(buf, sizeof buf, "%.17g", c.numeric[i]);
        out << buf;
      } else {
        out << c.categories[i];
      }
      out << ",";
    }
    std::snprintf(buf, sizeof buf, "%.17g", data.target[i]);
    out << buf << "\n";
  }
}

// ---- vocabulary -------------------------------------------------------------------

Vocabulary Vocabulary::build(const TabularDataset& train) {
  Vocabulary v;
  for (const auto& c : train.columns) {
    if (c.spec.kind != ColumnKind::Categorical) continue;
    v.names_.push_back(c.spec.name);
    auto& ids = v.id_to_cat_[c.spec.name];
    auto& map = v.cat_to_id_[c.spec.name];
    ids.push_back("<unk>");
    for (const auto& cat : c.categories) {
      if (!map.count(cat)) {
        map[cat] = static_cast<int>(ids.size());
        ids.push_back(cat);
      }
    }
  }
  return v;
}

int Vocabulary::id(std::string_view column, const std::string& category) const {
  auto it = cat_to_id_.find(column);
  if (it == cat_to_id_.end())
    throw std::out_of_range("no vocabulary for column " + std::string(column));
  auto jt = it->second.find(category);
  return jt == it->second.end() ? 0 : jt->second;
}

std::size_t Vocabulary::size(std::string_view column) const {
  auto it = id_to_cat_.find(column);
  if (it == id_to_cat_.end())
    throw std::out_of_range("no vocabulary for column " + std::string(column));
  return it->second.size();
}

std::vector<std::vector<int>> Vocabulary::transform(const TabularDataset& data) const {
  std::vector<std::vector<int>> out;
  for (const auto& c : data.columns) {
    if (c.spec.kind != ColumnKind::Categorical) continue;
    std::vector<int> ids;
    ids.reserve(c.categories.size());
    for (const auto& cat : c.categories) ids.push_back(id(c.spec.name, cat));
    out.push_back(std::move(ids));
  }
  return out;
}

std::string Vocabulary::to_json_text() const {
  json arr = json::array();
  for (const auto& name : names_) {
    arr.push_back({{"name", name}, {"categories", id_to_cat_.at(name)}});
  }
  return json{{"vocab", arr}}.dump();
}

Vocabulary Vocabulary::from_json_text(const std::string& text) {
  Vocabulary v;
  json j = json::parse(text);
  for (const auto& e : j.at("vocab")) {
    const std::string name = e.at("name").get<std::string>();
    v.names_.push_back(name);
    auto& ids = v.id_to_cat_[name];
    auto& map = v.cat_to_id_[name];
    ids = e.at("categories").get<std::vector<std::string>>();
    for (std::size_t i = 1; i < ids.size(); ++i) map[ids[i]] = static_cast<int>(i);
  }
  return v;
}

// ---- scalers -----------------------------------------------------------------------

TargetScaler TargetScaler::fit(std::span<const double> y) {
  if (y.empty()) throw std::invalid_argument("cannot fit target scaler on empty data");
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  double var = 0.0;
  for (double v : y) var += (v - mean) * (v - mean);
  var /= static_cast<double>(y.size());
  const double sd = std::sqrt(var);
  if (sd <= 0.0) throw std::invalid_argument("target has zero standard deviation");
  return TargetScaler{mean, sd};
}

void TargetScaler::apply(std::vector<double>& y) const {
  for (double& v : y) v = transform(v);
}

NumericScaler NumericScaler::fit(const TabularDataset& train) {
  NumericScaler s;
  for (const auto& c : train.columns) {
    if (c.spec.kind != ColumnKind::Numeric) continue;
    double lo = c.numeric.empty() ? 0.0 : c.numeric[0];
    double hi = lo;
    for (double v : c.numeric) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (!(lo < hi)) {
      throw std::invalid_argument("numeric column '" + c.spec.name +
                                  "' is constant on the training split");
    }
    s.names.push_back(c.spec.name);
    s.lo.push_back(lo);
    s.hi.push_back(hi);
  }
  return s;
}

void NumericScaler::apply(TabularDataset& data) const {
  std::size_t k = 0;
  for (auto& c : data.columns) {
    if (c.spec.kind != ColumnKind::Numeric) continue;
    if (k >= names.size() || c.spec.name != names[k]) {
      throw std::invalid_argument("numeric scaler fitted on different columns (expected " +
                                  (k < names.size() ? names[k] : std::string("<none>")) +
                                  ", found " + c.spec.name + ")");
    }
    const double span = hi[k] - lo[k];
    for (double& v : c.numeric) {
      v = 2.0 * (v - lo[k]) / span - 1.0;
      v = std::clamp(v, -1.0, 1.0);
    }
    ++k;
  }
}

// ---- folds -------------------------------------------------------------------------

FoldPlan FoldPlan::make(std::size_t n, std::size_t k, std::uint64_t seed, double val_fraction) {
  if (k < 2) throw std::invalid_argument("k-fold requires k >= 2");
  if (n < k) throw std::invalid_argument("k-fold requires n >= k, got n=" + std::to_string(n) +
                                         " k=" + std::to_string(k));
  if (val_fraction < 0.0 || val_fraction >= 1.0)
    throw std::invalid_argument("val_fraction must lie in [0, 1)");
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.val_fraction = val_fraction;
  plan.assignments.assign(n, 0);

  Rng rng(seed);
  const auto order = shuffled_indices(n, rng);

  // contiguous blocks of the shuffled order; first n % k folds get one extra
  std::vector<std::size_t> fold_of(n);
  std::size_t pos = 0;
  std::vector<std::pair<std::size_t, std::size_t>> blocks;  // [start, end)
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    blocks.emplace_back(pos, pos + size);
    pos += size;
  }
  for (std::size_t f = 0; f < k; ++f) {
    for (std::size_t i = blocks[f].first; i < blocks[f].second; ++i) fold_of[order[i]] = f;
  }
  plan.assignments = fold_of;

  for (std::size_t f = 0; f < k; ++f) {
    FoldSplit split;
    for (std::size_t i = blocks[f].first; i < blocks[f].second; ++i)
      split.test.push_back(order[i]);
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n; ++i) {
      if (i < blocks[f].first || i >= blocks[f].second) rest.push_back(order[i]);
    }
    const std::size_t val_count =
        static_cast<std::size_t>(val_fraction * static_cast<double>(rest.size()));
    split.train.assign(rest.begin(), rest.end() - static_cast<std::ptrdiff_t>(val_count));
    split.val.assign(rest.end() - static_cast<std::ptrdiff_t>(val_count), rest.end());
    plan.folds.push_back(std::move(split));
  }
  return plan;
}

FoldSplit holdout_split(std::size_t n, std::uint64_t seed, double test_fraction,
                        double val_fraction) {
  Rng rng(seed);
  const auto order = shuffled_indices(n, rng);
  const std::size_t test_count =
      static_cast<std::size_t>(test_fraction * static_cast<double>(n));
  const std::size_t val_count = static_cast<std::size_t>(
      val_fraction * static_cast<double>(n - test_count));
  FoldSplit s;
  s.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(test_count));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(test_count),
               order.begin() + static_cast<std::ptrdiff_t>(test_count + val_count));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(test_count + val_count),
                 order.end());
  return s;
}

// ---- synthetic ordering dataset ------------------------------------------------------

namespace {

void standard_normalize(std::vector<double>& x) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  const double sd = std::sqrt(var);
  for (double& v : x) v = (v - mean) / sd;
}

}  // namespace

std::string SyntheticGroundTruth::to_json_text() const {
  json inter = json::array();
  for (const auto& t : interactions) {
    inter.push_back({{"kind", t.kind}, {"a", t.a}, {"b", t.b}, {"weight", t.weight}});
  }
  json j{{"numeric_names", numeric_names},
         {"categorical_names", categorical_names},
         {"numeric_coefficients", numeric_coefficients},
         {"level_effects", level_effects},
         {"interactions", inter},
         {"noise_std", noise_std},
         {"seed", seed}};
  return j.dump(2);
}

std::pair<TabularDataset, SyntheticGroundTruth> generate_synthetic_ordering_dataset(
    std::uint64_t seed) {
  constexpr std::size_t kRows = 5000;
  constexpr std::size_t kNum = 5;
  constexpr std::size_t kCat = 5;
  constexpr std::size_t kLevels = 4;

  SyntheticGroundTruth truth;
  truth.seed = seed;
  truth.noise_std = 0.5;
  truth.level_effects = {-1.5, -0.5, 0.5, 1.5};
  truth.numeric_coefficients.assign(kNum, 1.0);
  for (std::size_t j = 0; j < kNum; ++j) truth.numeric_names.push_back("num" + std::to_string(j + 1));
  for (std::size_t j = 0; j < kCat; ++j)
    truth.categorical_names.push_back("cat" + std::to_string(j + 1));
  truth.interactions = {{"num_num", "num1", "num2", 1.5},
                        {"num_cat", "num3", "cat1", 1.0},
                        {"cat_cat", "cat2", "cat3", 0.8}};

  Rng rng(substream_seed(seed, "synthetic"));

  // correlated pairs (num1, num2) at 0.8 and (num3, num4) at 0.6
  std::vector<std::vector<double>> nums(kNum, std::vector<double>(kRows));
  for (std::size_t i = 0; i < kRows; ++i) {
    const double z0 = gaussian(rng);
    const double e1 = gaussian(rng);
    const double z2 = gaussian(rng);
    const double e3 = gaussian(rng);
    const double z4 = gaussian(rng);
    nums[0][i] = z0;
    nums[1][i] = 0.8 * z0 + std::sqrt(1.0 - 0.64) * e1;
    nums[2][i] = z2;
    nums[3][i] = 0.6 * z2 + std::sqrt(1.0 - 0.36) * e3;
    nums[4][i] = z4;
  }
  for (auto& col : nums) standard_normalize(col);

  std::vector<std::vector<std::size_t>> cats(kCat, std::vector<std::size_t>(kRows));
  const std::array<std::string, kLevels> level_names{"a", "b", "c", "d"};
  for (std::size_t j = 0; j < kCat; ++j)
    for (std::size_t i = 0; i < kRows; ++i) cats[j][i] = rng() % kLevels;

  std::vector<double> target(kRows);
  for (std::size_t i = 0; i < kRows; ++i) {
    double y = 0.0;
    for (std::size_t j = 0; j < kNum; ++j) y += truth.numeric_coefficients[j] * nums[j][i];
    for (std::size_t j = 0; j < kCat; ++j) y += truth.level_effects[cats[j][i]];
    y += 1.5 * nums[0][i] * nums[1][i];
    y += 1.0 * nums[2][i] * truth.level_effects[cats[0][i]];
    y += 0.8 * truth.level_effects[cats[1][i]] * truth.level_effects[cats[2][i]];
    y += gaussian(rng, 0.0, truth.noise_std);
    target[i] = y;
  }

  TabularDataset data;
  data.task = Task::Regression;
  data.target = std::move(target);
  std::size_t pos = 0;
  for (std::size_t j = 0; j < kNum; ++j) {
    Column c;
    c.spec = {truth.numeric_names[j], ColumnKind::Numeric, pos++};
    c.numeric = std::move(nums[j]);
    data.columns.push_back(std::move(c));
  }
  for (std::size_t j = 0; j < kCat; ++j) {
    Column c;
    c.spec = {truth.categorical_names[j], ColumnKind::Categorical, pos++};
    c.categories.reserve(kRows);
    for (std::size_t i = 0; i < kRows; ++i) c.categories.push_back(level_names[cats[j][i]]);
    data.columns.push_back(std::move(c));
  }
  return {std::move(data), std::move(truth)};
}

// ---- ordering -------------------------------------------------------------------------

TabularDataset reorder_features(const TabularDataset& data, std::span<const std::size_t> perm) {
  const std::size_t j = data.feature_count();
  if (perm.size() != j) throw std::invalid_argument("permutation length differs from J");
  std::vector<bool> seen(j, false);
  for (auto p : perm) {
    if (p >= j || seen[p]) throw std::invalid_argument("invalid feature permutation");
    seen[p] = true;
  }
  TabularDataset out;
  out.task = data.task;
  out.target = data.target;
  for (std::size_t i = 0; i < j; ++i) {
    Column c = data.columns[perm[i]];
    c.spec.position = i;
    out.columns.push_back(std::move(c));
  }
  return out;
}

std::vector<std::size_t> default_feature_order(const TabularDataset& data) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < data.columns.size(); ++i)
    if (data.columns[i].spec.kind == ColumnKind::Numeric) order.push_back(i);
  for (std::size_t i = 0; i < data.columns.size(); ++i)
    if (data.columns[i].spec.kind == ColumnKind::Categorical) order.push_back(i);
  return order;
}

std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

}  // namespace tabssm
