#include "tabssm/model.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include <json.hpp>

namespace tabssm {

using nlohmann::json;

std::string pooling_name(Pooling p) {
  switch (p) {
    case Pooling::Avg: return "avg";
    case Pooling::Sum: return "sum";
    case Pooling::Max: return "max";
    case Pooling::Last: return "last";
    case Pooling::Cls: return "cls";
  }
  return "avg";
}

Pooling pooling_from_name(const std::string& s) {
  if (s == "avg") return Pooling::Avg;
  if (s == "sum") return Pooling::Sum;
  if (s == "max") return Pooling::Max;
  if (s == "last") return Pooling::Last;
  if (s == "cls") return Pooling::Cls;
  throw std::invalid_argument("unknown pooling: " + s);
}

std::string arch_name(Arch a) { return a == Arch::Mambular ? "mambular" : "mambattention"; }

Arch arch_from_name(const std::string& s) {
  if (s == "mambular") return Arch::Mambular;
  if (s == "mambattention") return Arch::MambAttention;
  throw std::invalid_argument("unknown architecture: " + s);
}

std::string head_name(HeadKind h) {
  switch (h) {
    case HeadKind::Regression: return "regression";
    case HeadKind::Binary: return "binary";
    case HeadKind::LssNormal: return "lss";
  }
  return "regression";
}

HeadKind head_from_name(const std::string& s) {
  if (s == "regression") return HeadKind::Regression;
  if (s == "binary") return HeadKind::Binary;
  if (s == "lss") return HeadKind::LssNormal;
  throw std::invalid_argument("unknown head: " + s);
}

HeadKind head_for_task(Task t) {
  switch (t) {
    case Task::Regression: return HeadKind::Regression;
    case Task::Binary: return HeadKind::Binary;
    case Task::Lss: return HeadKind::LssNormal;
  }
  return HeadKind::Regression;
}

void ModelConfig::validate() const {
  if (d == 0 || layers == 0 || kernel == 0 || state_dim == 0 || expansion == 0) {
    throw std::invalid_argument("model dimensions must be positive");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0,1)");
  if (arch == Arch::MambAttention) {
    if (layers < 3 || layers % 2 == 0) {
      throw std::invalid_argument(
          "mambattention alternates blocks with Mamba first and last; layers must be an odd "
          "count >= 3, got " +
          std::to_string(layers));
    }
    if (d % attention_heads != 0) {
      throw std::invalid_argument("embedding dim must be divisible by the attention head count");
    }
  }
}

std::string ModelConfig::to_json_text() const {
  json j{{"d", d},
         {"layers", layers},
         {"expansion", expansion},
         {"kernel", kernel},
         {"state_dim", state_dim},
         {"pooling", pooling_name(pooling)},
         {"bidirectional", bidirectional},
         {"interaction", interaction},
         {"arch", arch_name(arch)},
         {"head", head_name(head)},
         {"max_bins", max_bins},
         {"dropout", dropout},
         {"attention_heads", attention_heads},
         {"ff_dim", ff_dim},
         {"dt_rank", dt_rank},
         {"sequence_permutation", sequence_permutation}};
  return j.dump();
}

ModelConfig ModelConfig::from_json_text(const std::string& text) {
  json j = json::parse(text);
  ModelConfig c;
  c.d = j.at("d").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.expansion = j.at("expansion").get<std::size_t>();
  c.kernel = j.at("kernel").get<std::size_t>();
  c.state_dim = j.at("state_dim").get<std::size_t>();
  c.pooling = pooling_from_name(j.at("pooling").get<std::string>());
  c.bidirectional = j.at("bidirectional").get<bool>();
  c.interaction = j.at("interaction").get<bool>();
  c.arch = arch_from_name(j.at("arch").get<std::string>());
  c.head = head_from_name(j.at("head").get<std::string>());
  c.max_bins = j.at("max_bins").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.attention_heads = j.at("attention_heads").get<std::size_t>();
  c.ff_dim = j.at("ff_dim").get<std::size_t>();
  c.dt_rank = j.at("dt_rank").get<std::size_t>();
  if (j.contains("sequence_permutation")) {
    c.sequence_permutation = j["sequence_permutation"].get<std::vector<std::size_t>>();
  }
  return c;
}

// ---- model ------------------------------------------------------------------------

namespace {

Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = uniform(rng, -bound, bound);
  return t;
}

bool is_attention_layer(const ModelConfig& cfg, std::size_t i) {
  return cfg.arch == Arch::MambAttention && i % 2 == 1;
}

}  // namespace

Model::Model(ModelConfig config, FeatureLayout layout, std::uint64_t init_seed)
    : Model(std::move(config), std::move(layout), true, init_seed) {}

Model Model::restore(ModelConfig config, FeatureLayout layout) {
  return Model(std::move(config), std::move(layout), false, 0);
}

Model::Model(ModelConfig config, FeatureLayout layout, bool initialize, std::uint64_t seed)
    : config_(std::move(config)), layout_(std::move(layout)) {
  config_.validate();
  if (!initialize) return;

  Rng rng(substream_seed(seed, "init"));
  const std::size_t d = config_.d;
  const std::size_t mb = config_.effective_max_bins();
  const double embed_bound = 1.0 / std::sqrt(double(mb));
  const double table_bound = 1.0 / std::sqrt(double(d));

  for (const auto& f : layout_.features) {
    if (f.kind == ColumnKind::Numeric) {
      params_.create("embed." + f.name + ".w", uniform_init({mb, d}, embed_bound, rng));
      params_.create("embed." + f.name + ".b", Tensor({d}));
    } else {
      params_.create("embed." + f.name + ".table",
                     uniform_init({f.vocab_size, d}, table_bound, rng));
    }
  }
  if (config_.pooling == Pooling::Cls) {
    params_.create("embed.cls", uniform_init({1, 1, d}, table_bound, rng));
  }
  if (config_.interaction) {
    const std::size_t j = layout_.count() + (config_.pooling == Pooling::Cls ? 1 : 0);
    params_.create("interaction.w", uniform_init({j, j}, 1.0 / std::sqrt(double(j)), rng));
  }

  BlockDims dims{d, config_.expansion * d, config_.state_dim, config_.kernel,
                 config_.effective_dt_rank()};
  AttentionDims adims{d, config_.attention_heads, config_.ff_dim, 0.2, 0.1};
  for (std::size_t i = 0; i < config_.layers; ++i) {
    const std::string prefix = "block" + std::to_string(i) + ".";
    if (is_attention_layer(config_, i)) {
      init_attention_block(params_, prefix, adims, rng);
    } else if (config_.bidirectional) {
      init_mamba_block(params_, prefix + "fwd.", dims, rng);
      init_mamba_block(params_, prefix + "bwd.", dims, rng);
    } else {
      init_mamba_block(params_, prefix, dims, rng);
    }
  }
  params_.create("final_norm.w", Tensor::ones({d}));
  params_.create("head.w", uniform_init({d, config_.head_width()},
                                        1.0 / std::sqrt(double(d)), rng));
  params_.create("head.b", Tensor({config_.head_width()}));
}

DiffValue Model::embed(Graph& g, const ParamSet& ps, const EncodedData& batch) const {
  const std::size_t n = batch.rows;
  const std::size_t d = config_.d;
  const std::size_t mb = config_.effective_max_bins();
  if (batch.cat_ids.size() != layout_.categorical_count() ||
      (layout_.numeric_count() > 0 && (batch.ple.rank() != 3 || batch.ple.dim(1) != layout_.numeric_count() ||
                                       batch.ple.dim(2) != mb))) {
    throw std::invalid_argument("encoded batch does not match the model layout");
  }

  DiffValue ple_block;
  if (layout_.numeric_count() > 0) ple_block = g.constant(batch.ple);

  std::vector<DiffValue> embedded;
  embedded.reserve(layout_.count() + 1);
  std::size_t num_idx = 0, cat_idx = 0;
  for (const auto& f : layout_.features) {
    if (f.kind == ColumnKind::Numeric) {
      DiffValue v = reshape(slice(ple_block, 1, num_idx, 1), {n, mb});
      DiffValue e = add(matmul(v, ps.at("embed." + f.name + ".w")),
                        ps.at("embed." + f.name + ".b"));
      embedded.push_back(reshape(e, {n, 1, d}));
      ++num_idx;
    } else {
      for (int id : batch.cat_ids[cat_idx]) {
        if (id < 0 || static_cast<std::size_t>(id) >= f.vocab_size) {
          throw std::out_of_range("categorical id outside the embedding table for " + f.name);
        }
      }
      DiffValue e = embedding_lookup(ps.at("embed." + f.name + ".table"),
                                     batch.cat_ids[cat_idx]);
      embedded.push_back(reshape(e, {n, 1, d}));
      ++cat_idx;
    }
  }
  DiffValue z = concat(embedded, 1);
  if (!config_.sequence_permutation.empty()) {
    z = permute_axis(z, 1, config_.sequence_permutation);
  }
  if (config_.pooling == Pooling::Cls) {
    // the learnable token is appended at the end of each sequence
    DiffValue ones = g.constant(Tensor::ones({n, 1, 1}));
    std::vector<DiffValue> with_cls{z, broadcast_mul(ones, ps.at("embed.cls"))};
    z = concat(with_cls, 1);
  }
  return z;
}

DiffValue Model::pooled_representation(DiffValue z, const ParamSet& ps, bool training,
                                       std::uint64_t step_seed) const {
  if (config_.interaction) {
    z = interaction_apply(z, ps.at("interaction.w"));
  }
  AttentionDims adims{config_.d, config_.attention_heads, config_.ff_dim, 0.2, 0.1};
  for (std::size_t i = 0; i < config_.layers; ++i) {
    const std::string prefix = "block" + std::to_string(i) + ".";
    if (is_attention_layer(config_, i)) {
      z = attention_block_forward(z, bind_attention_block(ps, prefix), adims, training,
                                  substream_seed(step_seed, prefix));
    } else if (config_.bidirectional) {
      z = bidirectional_forward(z, bind_mamba_block(ps, prefix + "fwd."),
                                bind_mamba_block(ps, prefix + "bwd."));
    } else {
      z = mamba_block_forward(z, bind_mamba_block(ps, prefix));
    }
  }
  z = rmsnorm(z, ps.at("final_norm.w"), 1e-5);

  const std::size_t seq = z.value().dim(1);
  const std::size_t n = z.value().dim(0);
  DiffValue pooled;
  switch (config_.pooling) {
    case Pooling::Avg: pooled = reduce(ReduceKind::Mean, z, 1); break;
    case Pooling::Sum: pooled = reduce(ReduceKind::Sum, z, 1); break;
    case Pooling::Max: pooled = reduce(ReduceKind::Max, z, 1); break;
    case Pooling::Last:
      pooled = reshape(slice(z, 1, seq - 1, 1), {n, config_.d});
      break;
    case Pooling::Cls:
      pooled = reshape(slice(z, 1, seq - 1, 1), {n, config_.d});  // token sits at the end
      break;
  }
  if (training && config_.dropout > 0.0) {
    pooled = dropout(pooled, config_.dropout, substream_seed(step_seed, "head_dropout"));
  }
  return pooled;
}

DiffValue Model::head_output(Graph& g, const ParamSet& ps, const EncodedData& batch,
                             bool training, std::uint64_t step_seed) const {
  DiffValue z = embed(g, ps, batch);
  DiffValue pooled = pooled_representation(z, ps, training, step_seed);
  return add(matmul(pooled, ps.at("head.w")), ps.at("head.b"));
}

DiffValue Model::loss(DiffValue head_out, std::span<const double> targets) const {
  Graph& g = *head_out.graph();
  const std::size_t n = head_out.value().dim(0);
  if (targets.size() != n) throw std::invalid_argument("loss target length mismatch");
  DiffValue y = g.constant(Tensor({n}, std::vector<double>(targets.begin(), targets.end())));
  switch (config_.head) {
    case HeadKind::Regression: {
      DiffValue diff = sub(reshape(head_out, {n}), y);
      return reduce_all_mean(broadcast_mul(diff, diff));
    }
    case HeadKind::Binary: {
      DiffValue logits = reshape(head_out, {n});
      return reduce_all_mean(sub(softplus(logits), broadcast_mul(y, logits)));
    }
    case HeadKind::LssNormal: {
      DiffValue mu = reshape(slice(head_out, 1, 0, 1), {n});
      DiffValue sigma = add_scalar(softplus(reshape(slice(head_out, 1, 1, 1), {n})), 1e-6);
      DiffValue diff = sub(y, mu);
      DiffValue quad = divide(broadcast_mul(diff, diff),
                              scale(broadcast_mul(sigma, sigma), 2.0));
      DiffValue per_row = add(log(sigma), quad);
      return add_scalar(reduce_all_mean(per_row), 0.5 * std::log(2.0 * M_PI));
    }
  }
  throw std::logic_error("unreachable head kind");
}

Predictions Model::predict(const EncodedData& data) const {
  Predictions out;
  out.primary.reserve(data.rows);
  constexpr std::size_t kBatch = 256;
  for (std::size_t start = 0; start < data.rows; start += kBatch) {
    const std::size_t len = std::min(kBatch, data.rows - start);
    std::vector<std::size_t> rows(len);
    for (std::size_t i = 0; i < len; ++i) rows[i] = start + i;
    EncodedData batch = data.gather(rows);
    Graph g;
    ParamSet ps = params_.bind(g);
    DiffValue h = head_output(g, ps, batch, false, 0);
    const Tensor& v = h.value();
    for (std::size_t i = 0; i < len; ++i) {
      switch (config_.head) {
        case HeadKind::Regression: out.primary.push_back(v.at(i)); break;
        case HeadKind::Binary: {
          const double l = v.at(i);
          out.primary.push_back(l >= 0 ? 1.0 / (1.0 + std::exp(-l))
                                       : std::exp(l) / (1.0 + std::exp(l)));
          break;
        }
        case HeadKind::LssNormal: {
          out.primary.push_back(v.at(i * 2));
          const double sraw = v.at(i * 2 + 1);
          const double sp = sraw > 30.0 ? sraw : std::log1p(std::exp(sraw));
          out.sigma.push_back(sp + 1e-6);
          break;
        }
      }
    }
  }
  return out;
}

// ---- linear baseline ------------------------------------------------------------------

namespace {

struct Design {
  std::size_t cols = 0;
  std::vector<double> x;  // row-major [n, cols]
};

Design build_design(const TabularDataset& data, const Vocabulary& vocab) {
  std::size_t p = 0;
  for (const auto& c : data.columns) {
    p += c.spec.kind == ColumnKind::Numeric ? 1 : vocab.size(c.spec.name);
  }
  p += 1;  // intercept
  Design d;
  d.cols = p;
  const std::size_t n = data.rows();
  d.x.assign(n * p, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t off = 0;
    for (const auto& c : data.columns) {
      if (c.spec.kind == ColumnKind::Numeric) {
        d.x[i * p + off] = c.numeric[i];
        off += 1;
      } else {
        const std::size_t v = vocab.size(c.spec.name);
        const int id = vocab.id(c.spec.name, c.categories[i]);
        d.x[i * p + off + static_cast<std::size_t>(id)] = 1.0;
        off += v;
      }
    }
    d.x[i * p + p - 1] = 1.0;
  }
  return d;
}

// Cholesky solve of (X^T X + lambda I) w = X^T y; false if not positive definite.
bool solve_normal_equations(const std::vector<double>& xtx, std::vector<double> rhs,
                            std::size_t p, std::vector<double>& out) {
  std::vector<double> l(p * p, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = xtx[i * p + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * p + k] * l[j * p + k];
      if (i == j) {
        if (s <= 0.0) return false;
        l[i * p + i] = std::sqrt(s);
      } else {
        l[i * p + j] = s / l[j * p + j];
      }
    }
  }
  for (std::size_t i = 0; i < p; ++i) {  // forward solve L z = rhs
    double s = rhs[i];
    for (std::size_t k = 0; k < i; ++k) s -= l[i * p + k] * rhs[k];
    rhs[i] = s / l[i * p + i];
  }
  out.assign(p, 0.0);
  for (std::size_t i = p; i-- > 0;) {  // back solve L^T w = z
    double s = rhs[i];
    for (std::size_t k = i + 1; k < p; ++k) s -= l[k * p + i] * out[k];
    out[i] = s / l[i * p + i];
  }
  return true;
}

double sigmoid_s(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

LinearBaseline LinearBaseline::fit(const TabularDataset& scaled_train, const Vocabulary& vocab) {
  const Design d = build_design(scaled_train, vocab);
  const std::size_t n = scaled_train.rows(), p = d.cols;
  LinearBaseline model;
  model.task = scaled_train.task;

  if (scaled_train.task != Task::Binary) {
    std::vector<double> xtx(p * p, 0.0), xty(p, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = d.x.data() + i * p;
      for (std::size_t a = 0; a < p; ++a) {
        xty[a] += row[a] * scaled_train.target[i];
        for (std::size_t b = 0; b <= a; ++b) xtx[a * p + b] += row[a] * row[b];
      }
    }
    for (std::size_t a = 0; a < p; ++a)
      for (std::size_t b = a + 1; b < p; ++b) xtx[a * p + b] = xtx[b * p + a];
    double lambda = 1e-8;
    for (int attempt = 0; attempt < 12; ++attempt) {
      std::vector<double> reg = xtx;
      for (std::size_t a = 0; a < p; ++a) reg[a * p + a] += lambda;
      if (solve_normal_equations(reg, xty, p, model.weights)) return model;
      std::fprintf(stderr, "linear baseline: singular system, raising regularizer to %g\n",
                   lambda * 10.0);
      lambda *= 10.0;
    }
    throw std::runtime_error("linear baseline: normal equations stayed singular");
  }

  // logistic regression by full-batch gradient descent with backtracking
  std::vector<double> w(p, 0.0), grad(p), trial(p);
  const double lambda = 1e-8;
  auto nll = [&](const std::vector<double>& wv) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double z = 0.0;
      const double* row = d.x.data() + i * p;
      for (std::size_t a = 0; a < p; ++a) z += row[a] * wv[a];
      const double sp = z > 30.0 ? z : std::log1p(std::exp(z));
      s += sp - scaled_train.target[i] * z;
    }
    double r = 0.0;
    for (double v : wv) r += v * v;
    return s / static_cast<double>(n) + 0.5 * lambda * r;
  };
  double cur = nll(w);
  double step = 1.0;
  for (int iter = 0; iter < 20000; ++iter) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double z = 0.0;
      const double* row = d.x.data() + i * p;
      for (std::size_t a = 0; a < p; ++a) z += row[a] * w[a];
      const double err = sigmoid_s(z) - scaled_train.target[i];
      for (std::size_t a = 0; a < p; ++a) grad[a] += err * row[a];
    }
    double gmax = 0.0;
    for (std::size_t a = 0; a < p; ++a) {
      grad[a] = grad[a] / static_cast<double>(n) + lambda * w[a];
      gmax = std::max(gmax, std::abs(grad[a]));
    }
    if (gmax < 1e-7) break;
    step *= 2.0;  // allow recovery after cautious steps
    double next;
    while (true) {
      for (std::size_t a = 0; a < p; ++a) trial[a] = w[a] - step * grad[a];
      next = nll(trial);
      if (next <= cur || step < 1e-12) break;
      step *= 0.5;
    }
    if (next > cur) break;
    w.swap(trial);
    cur = next;
  }
  model.weights = std::move(w);
  return model;
}

std::vector<double> LinearBaseline::predict(const TabularDataset& scaled_data,
                                            const Vocabulary& vocab) const {
  const Design d = build_design(scaled_data, vocab);
  if (d.cols != weights.size()) throw std::invalid_argument("baseline design width changed");
  std::vector<double> out(scaled_data.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double z = 0.0;
    const double* row = d.x.data() + i * d.cols;
    for (std::size_t a = 0; a < d.cols; ++a) z += row[a] * weights[a];
    out[i] = task == Task::Binary ? sigmoid_s(z) : z;
  }
  return out;
}

}  // namespace tabssm
