#include <CLI11.hpp>

#include <cstdint>
#include <string>

#include "tabssm/cli.hpp"

using namespace tabssm;

namespace {

struct SharedFlags {
  std::string config, data, schema, out = ".";
  std::uint64_t seed = 0;
  std::size_t kernel = 0, folds = 0, max_epochs = 0, batch_size = 0;
  std::size_t d = 0, layers = 0, state_dim = 0, max_bins = 0;
  std::string pooling, arch, head;
  bool bidirectional = false, interaction = false;
};

void add_shared(CLI::App* cmd, SharedFlags& f) {
  cmd->add_option("--config", f.config, "JSON config file (flat keys; flags override)");
  cmd->add_option("--data", f.data, "CSV data file");
  cmd->add_option("--schema", f.schema, "JSON schema file");
  cmd->add_option("--seed", f.seed, "master seed for every random stream");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--kernel", f.kernel, "convolution kernel size (0 = sequence length)");
  cmd->add_option("--pooling", f.pooling, "avg|sum|max|last|cls");
  cmd->add_flag("--bidirectional", f.bidirectional, "add a reversed-sequence block pass");
  cmd->add_flag("--interaction", f.interaction, "learnable JxJ feature interaction layer");
  cmd->add_option("--arch", f.arch, "mambular|mambattention");
  cmd->add_option("--head", f.head, "regression|binary|lss");
  cmd->add_option("--folds", f.folds, "cross-validation folds");
  cmd->add_option("--max-epochs", f.max_epochs, "training epoch cap");
  cmd->add_option("--batch-size", f.batch_size, "minibatch size");
  cmd->add_option("--d", f.d, "embedding dimension");
  cmd->add_option("--layers", f.layers, "block count");
  cmd->add_option("--state-dim", f.state_dim, "state dimension");
  cmd->add_option("--max-bins", f.max_bins, "numeric encoding width (0 = d)");
}

RunSettings settings_from(CLI::App* cmd, const SharedFlags& f) {
  CliOverrides o;
  if (cmd->count("--seed")) o.seed = f.seed;
  if (cmd->count("--kernel")) o.kernel = f.kernel;
  if (cmd->count("--pooling")) o.pooling = f.pooling;
  if (cmd->count("--arch")) o.arch = f.arch;
  if (cmd->count("--head")) o.head = f.head;
  if (cmd->count("--bidirectional")) o.bidirectional = true;
  if (cmd->count("--interaction")) o.interaction = true;
  if (cmd->count("--folds")) o.folds = f.folds;
  if (cmd->count("--max-epochs")) o.max_epochs = f.max_epochs;
  if (cmd->count("--batch-size")) o.batch_size = f.batch_size;
  if (cmd->count("--d")) o.d = f.d;
  if (cmd->count("--layers")) o.layers = f.layers;
  if (cmd->count("--state-dim")) o.state_dim = f.state_dim;
  if (cmd->count("--max-bins")) o.max_bins = f.max_bins;
  return resolve_settings(f.config, f.data, f.schema, f.out, o);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tabular state-space models: train, cross-validate and compare"};
  app.require_subcommand(1);

  SharedFlags train_f, cv_f, ablate_f;
  auto* train_cmd = app.add_subcommand("train", "single train/val/test split run");
  add_shared(train_cmd, train_f);

  auto* cv_cmd = app.add_subcommand("cv", "k-fold cross-validation");
  add_shared(cv_cmd, cv_f);

  auto* ablate_cmd =
      app.add_subcommand("ablate-ordering", "feature-ordering study with shuffles");
  add_shared(ablate_cmd, ablate_f);
  std::string mode = "before-embedding";
  std::size_t shuffles = 0;
  ablate_cmd->add_option("--mode", mode, "before-embedding|after-embedding");
  ablate_cmd->add_option("--shuffles", shuffles, "number of random orderings");

  auto* compare_cmd = app.add_subcommand("compare", "paired t-tests with BH adjustment");
  std::string dir_a, dir_b, compare_out = ".";
  compare_cmd->add_option("--a", dir_a, "first model's results directory")->required();
  compare_cmd->add_option("--b", dir_b, "second model's results directory")->required();
  compare_cmd->add_option("--out", compare_out, "output directory");

  auto* synth_cmd = app.add_subcommand("synth", "write the synthetic ordering dataset");
  std::uint64_t synth_seed = 0;
  std::string synth_out = ".";
  synth_cmd->add_option("--seed", synth_seed, "generator seed");
  synth_cmd->add_option("--out", synth_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(settings_from(train_cmd, train_f));
    if (*cv_cmd) return cmd_cv(settings_from(cv_cmd, cv_f));
    if (*ablate_cmd)
      return cmd_ablate_ordering(settings_from(ablate_cmd, ablate_f), mode, shuffles);
    if (*compare_cmd) return cmd_compare(dir_a, dir_b, compare_out);
    if (*synth_cmd) return cmd_synth(synth_seed, synth_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;  // settings resolution failures are usage errors
  }
  return 2;
}
