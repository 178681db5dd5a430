#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dualprop/analysis.hpp"
#include "dualprop/dataset.hpp"
#include "dualprop/inference.hpp"
#include "dualprop/learning.hpp"
#include "dualprop/loss.hpp"
#include "dualprop/model.hpp"

namespace dualprop {

// ---- errors ----

struct IdxError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BadMagic : IdxError {
  using IdxError::IdxError;
};
struct TruncatedFile : IdxError {
  using IdxError::IdxError;
};
struct CountMismatch : IdxError {
  using IdxError::IdxError;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- dataset ingestion ----

// Reads an IDX image/label file pair (big-endian magic 0x00000803 for images,
// 0x00000801 for labels). Pixels are scaled by 1/255; the class count is
// 1 + max(label). Throws BadMagic / TruncatedFile / CountMismatch.
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);

// IDX writers (inverse of the loader). Image values must lie in [0,1] and are
// quantized to bytes; each sample must have exactly rows*cols entries.
void write_idx_images(const std::string& path, const std::vector<Vector>& images,
                      std::size_t rows, std::size_t cols);
void write_idx_labels(const std::string& path, const std::vector<int>& labels);

// Gaussian blobs with unit per-dimension variance around deterministic,
// separation-scaled centers (class c sits on basis axis c % dim, pushed one
// extra separation step per wrap). Samples are class-interleaved so any
// prefix is balanced. counts must be >= 1.
Dataset synth_blobs(int classes, std::size_t dim, int n_per_class, double separation,
                    std::uint64_t seed);

// Synthetic 28x28 digit-like images: ten fixed pseudo-random prototypes
// (independent of `seed`) plus per-sample intensity jitter and pixel noise
// drawn from `seed`, clamped to [0,1] and quantized to byte resolution so the
// dataset survives an IDX round trip bit-exactly. Class-interleaved order.
Dataset synth_digits(int n_per_class, std::uint64_t seed);

// Deterministic hold-out split: indices are shuffled by `seed` and the first
// round(n * fraction) become the validation set (returned second); both
// halves keep the shuffled order. fraction must lie in [0,1).
std::pair<Dataset, Dataset> split_validation(const Dataset& data, double fraction,
                                             std::uint64_t seed);

// ---- experiment configuration ----

// Flat experiment description. Text-file keys and CLI flags share one schema;
// see apply_config_entry for the accepted keys and value grammar.
struct ExperimentConfig {
  Scheme scheme = Scheme::DPT;
  std::vector<double> alpha{0.5};  // one value, or one per layer
  double beta = 0.5;
  Schedule schedule = Schedule::single_sweep();
  std::vector<std::size_t> arch;  // layer widths, input first (e.g. 784-256-10)
  ActivationKind activation = ActivationKind::relu();  // hidden layers; output is identity
  BiasMode bias = BiasMode::Augmented;
  LossKind::Family loss_family = LossKind::Family::LeastSquares;
  OptimizerState::Kind opt_kind = OptimizerState::Kind::Adam;
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int epochs = 1;
  std::size_t batch_size = 100;
  std::uint64_t seed = 1;
  std::string data;         // dataset source spec (see resolve_dataset)
  std::size_t subset = 0;   // keep only the first N samples (0 = all)
  double validation_fraction = 0.1;
  int grad_angle_every_n_batches = 0;
  bool lipschitz_every_epoch = true;
  std::string out_dir = ".";

  NudgeConfig nudge() const;
  LossKind loss() const;
  OptimizerState optimizer() const;
  std::vector<LayerSpec> layer_specs() const;  // hidden activations + identity output
};

// Applies one key=value setting; throws ConfigError on unknown keys or
// malformed values. Keys: scheme, alpha, beta, schedule, arch, activation,
// bias, loss, opt, lr, momentum, weight_decay, epochs, batch_size, seed,
// data, subset, validation_fraction, grad_angle_every, lipschitz_every_epoch,
// out.
void apply_config_entry(ExperimentConfig& cfg, const std::string& key,
                        const std::string& value);

// Parses a flat key=value file ('#' comments, blank lines ignored) on top of
// the given defaults.
ExperimentConfig parse_config_file(const std::string& path, ExperimentConfig base = {});

// Materializes cfg.data:
//   mnist[:<dir>]            IDX files <dir>/train-images-idx3-ubyte (+labels);
//                            <dir> defaults to $DUALPROP_DATA
//   blobs:<classes>x<dim>x<n_per_class>x<separation>
//   digits:<n_per_class>     synthetic digit images (28x28, 10 classes)
//   constant:<n>x<dim>x<classes>   n identical all-0.5 samples, label 0
// blobs/digits draw their noise from cfg.seed.
Dataset resolve_dataset(const ExperimentConfig& cfg);

// ---- experiment runner ----

struct ExperimentResult {
  TrainHistory history;
  bool diverged = false;        // aborted, or any final-epoch sample diverged
  double final_accuracy = 0.0;  // NaN when no epoch completed
  double final_lipschitz = 0.0; // NaN when disabled or no epoch completed
};

// Trains per the config and writes metrics.csv, checkpoint.dp and
// summary.json into cfg.out_dir (created if missing). The validation
// hold-out serves as the test set. A fully diverged epoch aborts training
// but still writes every file (partial metrics, diverged=true). Output is
// byte-identical across runs with the same config.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

// Writes history as CSV: epoch, batch, train_loss, test_acc, lipschitz,
// diverged, angle_layer_0..{L-1}, l2diff_layer_0..{L-1}. Per-epoch values
// appear on the row of the epoch's last batch; unsampled cells are empty.
// Every row has the full column count.
void write_metrics_csv(const std::string& path, const TrainHistory& history,
                       std::size_t layer_count);

// ---- theory checks ----

struct TrilevelBattery {
  int instances = 0;
  double closed_form_max_rel_err = 0.0;  // direct head solves vs M W z + v, both variants
  double half_alpha_max_residual = 0.0;  // mean-iteration residual at alpha' = 1/2
  int factor_agreements = 0;             // (spectral_factor > 1) == diverged
  int factor_cases = 0;
  bool pass = false;
};

// Closed-form battery over random trilevel instances: compares the delta
// closed forms against direct subproblem solves on an (alpha, beta) grid,
// checks alpha' = 1/2 stationarity, and rescales each instance's head weight
// to pin the iteration's spectral factor below/above 1, asserting that
// convergence agrees with the factor on every case.
TrilevelBattery trilevel_battery(int count, std::uint64_t seed);

struct BregmanBattery {
  int pairs = 0;
  double max_abs_gap_at_half = 0.0;     // forced to 0 exactly at alpha = 1/2
  double min_abs_gap_asymmetric = 0.0;  // over alpha in {0,1}, pairs with ||delta|| > 1e-3
  bool pass = false;
};

// Random feasible state pairs across the projection activations; the gap must
// vanish at alpha = 1/2 and be visibly nonzero at the endpoints.
BregmanBattery bregman_battery(int pairs, std::uint64_t seed);

struct TheoryCheckConfig {
  std::uint64_t seed = 1;
  int relaxation_instances = 100;
  int trilevel_instances = 50;
  int bregman_pairs = 1000;
  std::string out_path;  // JSON report destination; empty = don't write
};

struct TheoryReport {
  PropositionReport prop1, prop2;
  TrilevelBattery trilevel;
  BregmanBattery bregman;
  bool pass = false;
};

// Runs the proposition / trilevel / Bregman batteries on seeded instances and
// (optionally) serializes the report, including every sampled (instance_id,
// alpha, beta, J) tuple and the empirical alpha-ordering direction.
TheoryReport run_theory_checks(const TheoryCheckConfig& cfg);

}  // namespace dualprop
