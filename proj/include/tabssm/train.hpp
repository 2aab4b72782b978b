#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tabssm/model.hpp"

namespace tabssm {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-6;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 200;
  std::size_t early_stop_patience = 15;
  std::size_t lr_patience = 10;
  double lr_factor = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json_text() const;
  static TrainConfig from_json_text(const std::string& text);
};

/// Adam with decoupled weight decay: bias-corrected moment update, then
/// theta <- theta - lr * wd * theta applied separately.
class AdamW {
 public:
  explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Reads gradients off the bound leaves and updates the store in place.
  void step(ParamStore& params, const ParamSet& bound, double lr, double weight_decay);

  std::size_t steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

/// Validation-loss bookkeeping shared by the plateau scheduler and early
/// stopping. Improvement means new loss < best - 1e-8; the early-stop counter
/// runs from the last improvement, the plateau counter additionally resets
/// when the learning rate drops.
class TrainController {
 public:
  TrainController(double lr0, std::size_t lr_patience, double lr_factor,
                  std::size_t stop_patience)
      : lr_(lr0), lr_patience_(lr_patience), lr_factor_(lr_factor),
        stop_patience_(stop_patience) {}

  struct Decision {
    bool improved = false;
    bool stop = false;
    double lr = 0.0;
  };

  Decision observe(double val_loss);
  double best_loss() const { return best_; }
  double lr() const { return lr_; }

 private:
  double lr_;
  std::size_t lr_patience_;
  double lr_factor_;
  std::size_t stop_patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t since_improvement_ = 0;
  std::size_t plateau_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

/// Average loss over a split in evaluation mode.
double evaluate_loss(const Model& model, const EncodedData& data);

/// Epoch loop with seeded batch shuffling, plateau learning-rate decay and
/// early stopping; restores and returns the best-validation snapshot.
/// A non-finite loss aborts with a diagnostic naming the epoch and batch.
TrainHistory train_model(Model& model, const EncodedData& train, const EncodedData& val,
                         const TrainConfig& cfg);

// ---- checkpointing -----------------------------------------------------------

struct LoadedModel {
  Model model;
  Preprocessor pre;
};

/// Single binary file: magic, format version, config JSON (model config +
/// fitted preprocessor), then named f64 tensor blobs. Little-endian.
void save_checkpoint(const Model& model, const Preprocessor& pre, const std::string& path);
LoadedModel load_checkpoint(const std::string& path);

}  // namespace tabssm
