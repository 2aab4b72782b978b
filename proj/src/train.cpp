#include "tabssm/train.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace tabssm {

using nlohmann::json;

void TrainConfig::validate() const {
  if (lr <= 0 || weight_decay < 0 || lr_factor <= 0 || lr_factor >= 1) {
    throw std::invalid_argument("invalid optimizer settings");
  }
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
}

std::string TrainConfig::to_json_text() const {
  json j{{"lr", lr},
         {"weight_decay", weight_decay},
         {"batch_size", batch_size},
         {"max_epochs", max_epochs},
         {"early_stop_patience", early_stop_patience},
         {"lr_patience", lr_patience},
         {"lr_factor", lr_factor},
         {"seed", seed}};
  return j.dump();
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  json j = json::parse(text);
  TrainConfig c;
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.max_epochs = j.at("max_epochs").get<std::size_t>();
  c.early_stop_patience = j.at("early_stop_patience").get<std::size_t>();
  c.lr_patience = j.at("lr_patience").get<std::size_t>();
  c.lr_factor = j.at("lr_factor").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

void AdamW::step(ParamStore& params, const ParamSet& bound, double lr, double weight_decay) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [name, leaf] : bound.entries()) {
    Tensor& theta = params.at(name);
    const Tensor& g = leaf.grad();
    auto mit = m_.find(name);
    if (mit == m_.end()) {
      mit = m_.emplace(name, Tensor(theta.shape())).first;
      v_.emplace(name, Tensor(theta.shape()));
    }
    Tensor& m = mit->second;
    Tensor& v = v_.at(name);
    for (std::size_t i = 0; i < theta.numel(); ++i) {
      const double gi = g.at(i);
      m.at(i) = beta1_ * m.at(i) + (1.0 - beta1_) * gi;
      v.at(i) = beta2_ * v.at(i) + (1.0 - beta2_) * gi * gi;
      const double mhat = m.at(i) / bc1;
      const double vhat = v.at(i) / bc2;
      theta.at(i) -= lr * mhat / (std::sqrt(vhat) + eps_);
      theta.at(i) -= lr * weight_decay * theta.at(i);
    }
  }
}

TrainController::Decision TrainController::observe(double val_loss) {
  Decision d;
  if (val_loss < best_ - 1e-8) {
    best_ = val_loss;
    since_improvement_ = 0;
    plateau_ = 0;
    d.improved = true;
  } else {
    ++since_improvement_;
    ++plateau_;
    if (since_improvement_ >= stop_patience_) {
      d.stop = true;
    } else if (plateau_ >= lr_patience_) {
      lr_ *= lr_factor_;
      plateau_ = 0;
    }
  }
  d.lr = lr_;
  return d;
}

double evaluate_loss(const Model& model, const EncodedData& data) {
  if (data.rows == 0) throw std::invalid_argument("cannot evaluate loss on an empty split");
  constexpr std::size_t kBatch = 256;
  double total = 0.0;
  for (std::size_t start = 0; start < data.rows; start += kBatch) {
    const std::size_t len = std::min(kBatch, data.rows - start);
    std::vector<std::size_t> rows(len);
    for (std::size_t i = 0; i < len; ++i) rows[i] = start + i;
    EncodedData batch = data.gather(rows);
    Graph g;
    ParamSet ps = model.params().bind(g);
    DiffValue out = model.head_output(g, ps, batch, false, 0);
    total += model.loss(out, batch.target).value().at(0) * static_cast<double>(len);
  }
  return total / static_cast<double>(data.rows);
}

TrainHistory train_model(Model& model, const EncodedData& train, const EncodedData& val,
                         const TrainConfig& cfg) {
  cfg.validate();
  TrainHistory history;
  if (cfg.max_epochs == 0) return history;
  if (train.rows == 0 || val.rows == 0) {
    throw std::invalid_argument("training requires non-empty train and validation splits");
  }

  AdamW optimizer;
  TrainController controller(cfg.lr, cfg.lr_patience, cfg.lr_factor, cfg.early_stop_patience);
  Rng shuffle_rng(substream_seed(cfg.seed, "batch_shuffle"));

  std::map<std::string, Tensor> best;
  auto snapshot = [&]() {
    best.clear();
    for (const auto& name : model.params().names()) best.emplace(name, model.params().at(name));
  };
  snapshot();  // epoch-0 state; replaced on the first improvement
  double lr = cfg.lr;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto order = shuffled_indices(train.rows, shuffle_rng);
    double train_loss = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < train.rows; start += cfg.batch_size, ++batch_index) {
      const std::size_t len = std::min(cfg.batch_size, train.rows - start);
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(start + len));
      EncodedData batch = train.gather(rows);
      Graph g;
      ParamSet ps = model.params().bind(g);
      const std::uint64_t step_seed =
          substream_seed(cfg.seed, "dropout") ^ (epoch * 1000003ULL + batch_index);
      DiffValue out = model.head_output(g, ps, batch, true, step_seed);
      DiffValue loss = model.loss(out, batch.target);
      const double lval = loss.value().at(0);
      if (!std::isfinite(lval)) {
        throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) +
                                 " batch " + std::to_string(batch_index));
      }
      train_loss += lval * static_cast<double>(len);
      g.backward(loss);
      optimizer.step(model.params(), ps, lr, cfg.weight_decay);
    }
    train_loss /= static_cast<double>(train.rows);

    const double val_loss = evaluate_loss(model, val);
    if (!std::isfinite(val_loss)) {
      throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) +
                               " batch validation");
    }
    const auto decision = controller.observe(val_loss);
    lr = decision.lr;
    history.epochs.push_back({epoch, train_loss, val_loss, lr});
    if (decision.improved) snapshot();
    if (decision.stop) break;
  }

  for (auto& [name, tensor] : best) model.params().at(name) = tensor;
  return history;
}

// ---- checkpointing ---------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'T', 'S', 'S', 'M'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint truncated: " + path);
  return v;
}

}  // namespace

void save_checkpoint(const Model& model, const Preprocessor& pre, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(kMagic, 4);
  write_pod(out, kVersion);

  json meta{{"model_config", json::parse(model.config().to_json_text())},
            {"preprocessor", json::parse(pre.to_json_text())}};
  const std::string meta_text = meta.dump();
  write_pod(out, static_cast<std::uint64_t>(meta_text.size()));
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

  const auto& names = model.params().names();
  write_pod(out, static_cast<std::uint64_t>(names.size()));
  for (const auto& name : names) {
    const Tensor& t = model.params().at(name);
    write_pod(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) write_pod(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("short write while saving checkpoint: " + path);
}

LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("not a model checkpoint: " + path);
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                             " in " + path);
  }
  const auto meta_len = read_pod<std::uint64_t>(in, path);
  std::string meta_text(meta_len, '\0');
  in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw std::runtime_error("checkpoint truncated: " + path);
  json meta = json::parse(meta_text);

  Preprocessor pre = Preprocessor::from_json_text(meta.at("preprocessor").dump());
  ModelConfig cfg = ModelConfig::from_json_text(meta.at("model_config").dump());
  LoadedModel loaded{Model::restore(cfg, pre.layout), std::move(pre)};

  const auto count = read_pod<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw std::runtime_error("checkpoint truncated: " + path);
    const auto rank = read_pod<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& d : shape) d = read_pod<std::uint64_t>(in, path);
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint truncated: " + path);
    loaded.model.params().create(name, std::move(t));
  }
  return loaded;
}

}  // namespace tabssm
