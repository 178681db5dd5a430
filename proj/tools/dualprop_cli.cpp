// Command-line front end: training runs, gradient checks, theory batteries,
// Lipschitz probes, checkpoint inference, and synthetic dataset generation.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dualprop/harness.hpp"
#include "dualprop/rng.hpp"

namespace {

using namespace dualprop;

// Shared experiment flags, all funneled through apply_config_entry so the CLI
// and the config-file schema cannot drift apart. Flags win over the file.
struct ExperimentFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::string config_path;

  void attach(CLI::App* sub) {
    auto add = [&](const char* flag, const char* key, const char* help) {
      options[key] = sub->add_option(flag, values[key], help);
    };
    sub->add_option("--config", config_path, "key=value config file (flags win)");
    add("--scheme", "scheme", "dp | dpt | dp-stabilized");
    add("--alpha", "alpha", "nudge mixing weight(s); comma-separated for per-layer");
    add("--beta", "beta", "nudge strength (also scales the loss)");
    add("--schedule", "schedule", "sweep | sweeps:<n> | forward:<n>");
    add("--arch", "arch", "layer widths, e.g. 784-256-256-10");
    add("--activation", "activation", "identity | relu | leaky-relu[:slope] | hard-sigmoid");
    add("--bias", "bias", "on | off (augmented bias column)");
    add("--loss", "loss", "ls | ce");
    add("--opt", "opt", "adam | sgd");
    add("--lr", "lr", "learning rate");
    add("--momentum", "momentum", "sgd momentum");
    add("--weight-decay", "weight_decay", "sgd weight decay");
    add("--epochs", "epochs", "training epochs");
    add("--batch-size", "batch_size", "minibatch size");
    add("--seed", "seed", "master seed (init, shuffle, synthetic data)");
    add("--data", "data",
        "mnist[:<dir>] | blobs:<c>x<d>x<n>x<sep> | digits:<n> | constant:<n>x<d>x<c>");
    add("--subset", "subset", "keep only the first N samples (0 = all)");
    add("--validation-fraction", "validation_fraction", "hold-out fraction (default 0.1)");
    add("--grad-angle-every", "grad_angle_every",
        "record gradient angle vs backprop every N batches (0 = never)");
    add("--lipschitz-every-epoch", "lipschitz_every_epoch", "on | off");
    add("--out", "out", "output directory");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = parse_config_file(config_path);
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) apply_config_entry(cfg, key, values.at(key));
    }
    return cfg;
  }
};

int cmd_train(const ExperimentFlags& flags) {
  ExperimentConfig cfg = flags.resolve();
  ExperimentResult res = run_experiment(cfg);
  std::printf("wrote %s/{metrics.csv, checkpoint.dp, summary.json}\n", cfg.out_dir.c_str());
  std::printf("epochs_completed=%zu batches=%zu\n", res.history.epochs.size(),
              res.history.batches.size());
  std::printf("final_accuracy=%.6g final_lipschitz=%.6g diverged=%s\n", res.final_accuracy,
              res.final_lipschitz, res.diverged ? "true" : "false");
  return 0;
}

int cmd_grad_check(const std::string& arch, const std::string& activation, int nets,
                   std::uint64_t seed, double beta, double alpha, const std::string& scheme,
                   const std::string& loss_name, bool with_fd, double h) {
  ExperimentConfig cfg;
  apply_config_entry(cfg, "arch", arch);
  apply_config_entry(cfg, "activation", activation);
  apply_config_entry(cfg, "scheme", scheme);
  apply_config_entry(cfg, "loss", loss_name);
  cfg.beta = beta;
  cfg.alpha = {alpha};

  LossKind loss = cfg.loss();
  NudgeConfig nudge = cfg.nudge();
  nlohmann::json per_net = nlohmann::json::array();
  double worst_angle = 0.0;
  double worst_fd = 0.0;
  for (int i = 0; i < nets; ++i) {
    NetworkParams params = init_weights(cfg.layer_specs(), seed + static_cast<std::uint64_t>(i),
                                        cfg.bias);
    nudge.validate(params, loss);
    Rng rng(seed ^ (0x9e3779b9ULL + static_cast<std::uint64_t>(i)));
    Vector x(params.input_dim());
    for (double& v : x) v = rng.uniform();
    Vector y = one_hot(static_cast<int>(rng.index(params.output_dim())),
                       static_cast<int>(params.output_dim()));

    GradientEstimate bp = backprop_oracle(params, x, y, loss);
    InferenceReport rep = run_inference(params, x, y, nudge, loss);
    GradientEstimate est = weight_gradient(rep.state, params, nudge);
    std::vector<double> angles = grad_angle(est, bp);
    double max_angle = 0.0;
    for (double a : angles) {
      if (std::isfinite(a)) max_angle = std::max(max_angle, a);
    }
    worst_angle = std::max(worst_angle, max_angle);

    nlohmann::json entry = {{"net", i}, {"max_angle_deg", max_angle}};
    if (with_fd) {
      GradientEstimate fd = finite_difference_oracle(params, x, y, loss, h);
      double rel = 0.0;
      for (std::size_t k = 0; k < fd.size(); ++k) {
        double diff = frobenius_norm(sub(bp[k], fd[k]));
        double ref = std::max(frobenius_norm(fd[k]), 1e-30);
        rel = std::max(rel, diff / ref);
      }
      worst_fd = std::max(worst_fd, rel);
      entry["fd_rel_err"] = rel;
    }
    per_net.push_back(std::move(entry));
  }

  nlohmann::json doc = {{"nets", nets},
                        {"max_angle_deg", worst_angle},
                        {"per_net", std::move(per_net)}};
  if (with_fd) doc["max_fd_rel_err"] = worst_fd;
  std::printf("%s\n", doc.dump(2).c_str());
  return 0;
}

int cmd_theory_check(const TheoryCheckConfig& cfg) {
  TheoryReport rep = run_theory_checks(cfg);
  std::printf("[%s] prop1: violations=%d max_violation=%.3g direction=%s\n",
              rep.prop1.pass ? "PASS" : "FAIL", rep.prop1.violations, rep.prop1.max_violation,
              rep.prop1.ordering_direction.c_str());
  std::printf("[%s] prop2: violations=%d max_violation=%.3g\n",
              rep.prop2.pass ? "PASS" : "FAIL", rep.prop2.violations, rep.prop2.max_violation);
  std::printf("[%s] trilevel: closed_form_rel_err=%.3g half_alpha_residual=%.3g factor=%d/%d\n",
              rep.trilevel.pass ? "PASS" : "FAIL", rep.trilevel.closed_form_max_rel_err,
              rep.trilevel.half_alpha_max_residual, rep.trilevel.factor_agreements,
              rep.trilevel.factor_cases);
  std::printf("[%s] bregman: gap_at_half=%.3g min_asymmetric_gap=%.3g\n",
              rep.bregman.pass ? "PASS" : "FAIL", rep.bregman.max_abs_gap_at_half,
              rep.bregman.min_abs_gap_asymmetric);
  if (!cfg.out_path.empty()) std::printf("report written to %s\n", cfg.out_path.c_str());
  std::printf("overall: %s\n", rep.pass ? "PASS" : "FAIL");
  return rep.pass ? 0 : 1;
}

int cmd_lipschitz(const std::string& checkpoint, int iters) {
  NetworkParams params = load_checkpoint(checkpoint);
  nlohmann::json per_layer = nlohmann::json::array();
  for (std::size_t k = 0; k < params.depth(); ++k) {
    const Matrix& W = params.weights[k];
    std::size_t cols = params.layers[k].in;  // exclude the bias column
    Matrix linear(W.rows, cols);
    for (std::size_t r = 0; r < W.rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) linear(r, c) = W(r, c);
    }
    per_layer.push_back(spectral_norm(linear, iters));
  }
  nlohmann::json doc = {{"lipschitz", lipschitz_estimate(params, iters)},
                        {"per_layer_spectral_norm", std::move(per_layer)}};
  std::printf("%s\n", doc.dump(2).c_str());
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& data, std::size_t subset,
              std::uint64_t seed, int diagnose, const std::string& scheme, double alpha,
              double beta, const std::string& schedule) {
  NetworkParams params = load_checkpoint(checkpoint);
  ExperimentConfig dcfg;
  dcfg.data = data;
  dcfg.seed = seed;
  Dataset set = resolve_dataset(dcfg);
  if (subset > 0 && subset < set.size()) {
    set.samples.resize(subset);
    set.labels.resize(subset);
  }
  nlohmann::json doc = {{"samples", set.size()}, {"accuracy", accuracy(params, set)}};

  if (diagnose > 0) {
    ExperimentConfig icfg;
    apply_config_entry(icfg, "scheme", scheme);
    apply_config_entry(icfg, "schedule", schedule);
    icfg.alpha = {alpha};
    icfg.beta = beta;
    LossKind loss = icfg.loss();
    NudgeConfig nudge = icfg.nudge();
    nudge.validate(params, loss);
    double residual_sum = 0.0;
    int diverged = 0;
    int n = std::min<int>(diagnose, static_cast<int>(set.size()));
    for (int i = 0; i < n; ++i) {
      Vector y = one_hot(set.labels[static_cast<std::size_t>(i)], set.classes);
      InferenceReport rep =
          run_inference(params, set.samples[static_cast<std::size_t>(i)], y, nudge, loss);
      residual_sum += rep.residual;
      diverged += rep.diverged ? 1 : 0;
    }
    doc["diagnosed_samples"] = n;
    doc["mean_residual"] = n > 0 ? residual_sum / n : 0.0;
    doc["diverged"] = diverged;
  }
  std::printf("%s\n", doc.dump(2).c_str());
  return 0;
}

int cmd_synth_data(const std::string& out_dir, int train_per_class, int test_per_class,
                   std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Dataset train = synth_digits(train_per_class, seed);
  Dataset test = synth_digits(test_per_class, seed ^ 0x7357ULL);
  fs::path dir(out_dir);
  write_idx_images((dir / "train-images-idx3-ubyte").string(), train.samples, 28, 28);
  write_idx_labels((dir / "train-labels-idx1-ubyte").string(), train.labels);
  write_idx_images((dir / "t10k-images-idx3-ubyte").string(), test.samples, 28, 28);
  write_idx_labels((dir / "t10k-labels-idx1-ubyte").string(), test.labels);
  std::printf("wrote %zu train / %zu test images to %s\n", train.size(), test.size(),
              out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dyadic-neuron training and analysis toolkit"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "train a network and write metrics");
  ExperimentFlags train_flags;
  train_flags.attach(train_cmd);

  auto* grad_cmd = app.add_subcommand("grad-check", "dyadic gradient vs backprop vs differences");
  std::string gc_arch = "20-16-12-5";
  std::string gc_activation = "relu";
  int gc_nets = 5;
  std::uint64_t gc_seed = 1;
  double gc_beta = 1e-4;
  double gc_alpha = 0.5;
  std::string gc_scheme = "dpt";
  std::string gc_loss = "ls";
  bool gc_fd = false;
  double gc_h = 1e-5;
  grad_cmd->add_option("--arch", gc_arch, "layer widths");
  grad_cmd->add_option("--activation", gc_activation, "hidden activation");
  grad_cmd->add_option("--nets", gc_nets, "number of random networks");
  grad_cmd->add_option("--seed", gc_seed, "base seed");
  grad_cmd->add_option("--beta", gc_beta, "nudge strength");
  grad_cmd->add_option("--alpha", gc_alpha, "nudge mixing weight");
  grad_cmd->add_option("--scheme", gc_scheme, "dp | dpt | dp-stabilized");
  grad_cmd->add_option("--loss", gc_loss, "ls | ce");
  grad_cmd->add_flag("--fd", gc_fd, "also run central finite differences");
  grad_cmd->add_option("--fd-step", gc_h, "finite-difference step");

  auto* theory_cmd = app.add_subcommand("theory-check", "run the relaxation/trilevel batteries");
  TheoryCheckConfig tc;
  tc.out_path = "theory_report.json";
  theory_cmd->add_option("--seed", tc.seed, "battery seed");
  theory_cmd->add_option("--instances", tc.relaxation_instances, "relaxation instances");
  theory_cmd->add_option("--trilevel", tc.trilevel_instances, "trilevel instances");
  theory_cmd->add_option("--pairs", tc.bregman_pairs, "random state pairs");
  theory_cmd->add_option("--out", tc.out_path, "JSON report path (empty = skip)");

  auto* lip_cmd = app.add_subcommand("lipschitz", "spectral-norm product of a checkpoint");
  std::string lip_checkpoint;
  int lip_iters = 100;
  lip_cmd->add_option("--checkpoint", lip_checkpoint, "checkpoint path")->required();
  lip_cmd->add_option("--iters", lip_iters, "power iterations");

  auto* infer_cmd = app.add_subcommand("infer", "evaluate a checkpoint on a dataset");
  std::string in_checkpoint, in_data;
  std::size_t in_subset = 0;
  std::uint64_t in_seed = 1;
  int in_diagnose = 0;
  std::string in_scheme = "dpt";
  double in_alpha = 0.5, in_beta = 0.5;
  std::string in_schedule = "sweep";
  infer_cmd->add_option("--checkpoint", in_checkpoint, "checkpoint path")->required();
  infer_cmd->add_option("--data", in_data, "dataset source")->required();
  infer_cmd->add_option("--subset", in_subset, "keep only the first N samples");
  infer_cmd->add_option("--seed", in_seed, "seed for synthetic sources");
  infer_cmd->add_option("--diagnose", in_diagnose, "run dyadic inference on the first N samples");
  infer_cmd->add_option("--scheme", in_scheme, "diagnostic scheme");
  infer_cmd->add_option("--alpha", in_alpha, "diagnostic alpha");
  infer_cmd->add_option("--beta", in_beta, "diagnostic beta");
  infer_cmd->add_option("--schedule", in_schedule, "diagnostic schedule");

  auto* synth_cmd = app.add_subcommand("synth-data", "write synthetic digit IDX files");
  std::string sd_out = "data";
  int sd_train = 600;
  int sd_test = 100;
  std::uint64_t sd_seed = 1;
  synth_cmd->add_option("--out", sd_out, "output directory");
  synth_cmd->add_option("--train-per-class", sd_train, "training images per class");
  synth_cmd->add_option("--test-per-class", sd_test, "test images per class");
  synth_cmd->add_option("--seed", sd_seed, "noise seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return cmd_train(train_flags);
    if (grad_cmd->parsed()) {
      return cmd_grad_check(gc_arch, gc_activation, gc_nets, gc_seed, gc_beta, gc_alpha,
                            gc_scheme, gc_loss, gc_fd, gc_h);
    }
    if (theory_cmd->parsed()) return cmd_theory_check(tc);
    if (lip_cmd->parsed()) return cmd_lipschitz(lip_checkpoint, lip_iters);
    if (infer_cmd->parsed()) {
      return cmd_infer(in_checkpoint, in_data, in_subset, in_seed, in_diagnose, in_scheme,
                       in_alpha, in_beta, in_schedule);
    }
    if (synth_cmd->parsed()) return cmd_synth_data(sd_out, sd_train, sd_test, sd_seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
