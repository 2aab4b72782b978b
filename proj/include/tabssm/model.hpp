#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tabssm/autodiff.hpp"
#include "tabssm/blocks.hpp"
#include "tabssm/encoding.hpp"

namespace tabssm {

enum class Pooling { Avg, Sum, Max, Last, Cls };
enum class Arch { Mambular, MambAttention };
enum class HeadKind { Regression, Binary, LssNormal };

std::string pooling_name(Pooling p);
Pooling pooling_from_name(const std::string& s);
std::string arch_name(Arch a);
Arch arch_from_name(const std::string& s);
std::string head_name(HeadKind h);
HeadKind head_from_name(const std::string& s);
HeadKind head_for_task(Task t);

struct ModelConfig {
  std::size_t d = 64;
  std::size_t layers = 4;
  std::size_t expansion = 2;
  std::size_t kernel = 4;
  std::size_t state_dim = 128;
  Pooling pooling = Pooling::Avg;
  bool bidirectional = false;
  bool interaction = false;
  Arch arch = Arch::Mambular;
  HeadKind head = HeadKind::Regression;
  std::size_t max_bins = 0;  // 0: matches d
  double dropout = 0.0;
  std::size_t attention_heads = 8;
  std::size_t ff_dim = 256;
  std::size_t dt_rank = 0;  // 0: ceil(d / 16)

  /// Non-empty: the embedded feature sequence is permuted by this bijection
  /// before any block (the after-embedding shuffle of the ordering study).
  std::vector<std::size_t> sequence_permutation;

  std::size_t effective_max_bins() const { return max_bins ? max_bins : d; }
  std::size_t effective_dt_rank() const { return dt_rank ? dt_rank : (d + 15) / 16; }
  std::size_t head_width() const { return head == HeadKind::LssNormal ? 2 : 1; }

  /// Throws on inconsistent settings; MambAttention alternates Mamba and
  /// attention blocks with Mamba first and last, so layers must be odd >= 3.
  void validate() const;

  std::string to_json_text() const;
  static ModelConfig from_json_text(const std::string& text);
};

struct Predictions {
  std::vector<double> primary;  // regression: prediction; binary: probability; lss: mu
  std::vector<double> sigma;    // lss only
};

/// The assembled network: per-feature embeddings, the block stack, pooling
/// and the task head. Owns the parameter store; forward passes bind it into
/// a fresh graph.
class Model {
 public:
  Model(ModelConfig config, FeatureLayout layout, std::uint64_t init_seed);

  /// Shell with an empty parameter store, for checkpoint loading.
  static Model restore(ModelConfig config, FeatureLayout layout);

  const ModelConfig& config() const { return config_; }
  const FeatureLayout& layout() const { return layout_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Embeds the batch into z[N, J(+1), d]: each feature through its own
  /// embedding in the layout's order, the configured sequence permutation
  /// applied, then the cls token appended when pooling with it.
  DiffValue embed(Graph& g, const ParamSet& ps, const EncodedData& batch) const;

  /// Block stack + final norm + pooling: [N, d].
  DiffValue pooled_representation(DiffValue z, const ParamSet& ps, bool training,
                                  std::uint64_t step_seed) const;

  /// Head outputs: [N, 1] (regression logits/values) or [N, 2] (lss).
  DiffValue head_output(Graph& g, const ParamSet& ps, const EncodedData& batch, bool training,
                        std::uint64_t step_seed) const;

  /// Task loss: mean squared error, logit binary cross-entropy, or normal
  /// negative log-likelihood.
  DiffValue loss(DiffValue head_out, std::span<const double> targets) const;

  /// Inference without gradient tracking, batched internally.
  Predictions predict(const EncodedData& data) const;

 private:
  Model(ModelConfig config, FeatureLayout layout, bool initialize, std::uint64_t seed);

  ModelConfig config_;
  FeatureLayout layout_;
  ParamStore params_;
};

// ---- linear baseline ------------------------------------------------------------

/// Design matrix: scaled numerics + one-hot categoricals (+ intercept).
/// Regression solves the ridge normal equations (lambda 1e-8, escalated with
/// a warning if singular); binary fits logistic regression by gradient
/// descent with backtracking line search, run to convergence.
struct LinearBaseline {
  Task task = Task::Regression;
  std::vector<double> weights;  // intercept last

  static LinearBaseline fit(const TabularDataset& scaled_train, const Vocabulary& vocab);
  std::vector<double> predict(const TabularDataset& scaled_data,
                              const Vocabulary& vocab) const;
};

}  // namespace tabssm
