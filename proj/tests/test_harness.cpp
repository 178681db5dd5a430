#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

#include "dualprop/harness.hpp"

using namespace dualprop;

namespace {

void push_u32be(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(static_cast<bool>(in));
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::vector<unsigned char> idx_images_bytes(const std::vector<std::vector<int>>& images,
                                            std::uint32_t rows, std::uint32_t cols,
                                            std::uint32_t magic = 0x00000803u) {
  std::vector<unsigned char> bytes;
  push_u32be(bytes, magic);
  push_u32be(bytes, static_cast<std::uint32_t>(images.size()));
  push_u32be(bytes, rows);
  push_u32be(bytes, cols);
  for (const auto& img : images) {
    for (int p : img) bytes.push_back(static_cast<unsigned char>(p));
  }
  return bytes;
}

std::vector<unsigned char> idx_labels_bytes(const std::vector<int>& labels,
                                            std::uint32_t magic = 0x00000801u) {
  std::vector<unsigned char> bytes;
  push_u32be(bytes, magic);
  push_u32be(bytes, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) bytes.push_back(static_cast<unsigned char>(l));
  return bytes;
}

bool same_dataset(const Dataset& a, const Dataset& b) {
  if (a.classes != b.classes || a.labels != b.labels) return false;
  if (a.samples.size() != b.samples.size()) return false;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    if (a.samples[i] != b.samples[i]) return false;
  }
  return true;
}

ExperimentConfig blob_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.data = "blobs:3x4x25x6.0";
  cfg.arch = {4, 8, 3};
  cfg.scheme = Scheme::DPT;
  cfg.alpha = {0.5};
  cfg.beta = 0.01;
  cfg.lr = 0.01;
  cfg.epochs = 2;
  cfg.batch_size = 15;
  cfg.seed = 11;
  cfg.grad_angle_every_n_batches = 2;
  cfg.out_dir = out_dir;
  return cfg;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("idx loader: hand-built files, scaling, and every failure mode") {
    write_file("h_imgs.idx", idx_images_bytes({{0, 255, 0, 255}, {10, 20, 30, 40}}, 2, 2));
    write_file("h_labs.idx", idx_labels_bytes({3, 1}));
    Dataset d = load_mnist_idx("h_imgs.idx", "h_labs.idx");
    REQUIRE(d.size() == 2);
    CHECK(d.dim() == 4);
    CHECK(d.samples[0] == Vector{0.0, 1.0, 0.0, 1.0});
    CHECK(d.samples[1][0] == doctest::Approx(10.0 / 255.0).epsilon(1e-15));
    CHECK(d.labels == std::vector<int>{3, 1});
    CHECK(d.classes == 4);  // 1 + max label

    write_file("h_badmagic.idx", idx_images_bytes({{0, 0, 0, 0}}, 2, 2, 0x00000802u));
    CHECK_THROWS_AS(load_mnist_idx("h_badmagic.idx", "h_labs.idx"), BadMagic);
    write_file("h_blabmagic.idx", idx_labels_bytes({0, 0}, 0x00000803u));
    CHECK_THROWS_AS(load_mnist_idx("h_imgs.idx", "h_blabmagic.idx"), BadMagic);

    write_file("h_empty.idx", {});
    CHECK_THROWS_AS(load_mnist_idx("h_empty.idx", "h_labs.idx"), TruncatedFile);
    std::vector<unsigned char> cut = idx_images_bytes({{0, 255, 0, 255}, {1, 2, 3, 4}}, 2, 2);
    cut.resize(cut.size() - 3);  // header claims 2 images, payload stops short
    write_file("h_cut.idx", cut);
    CHECK_THROWS_AS(load_mnist_idx("h_cut.idx", "h_labs.idx"), TruncatedFile);

    write_file("h_onelab.idx", idx_labels_bytes({3}));
    CHECK_THROWS_AS(load_mnist_idx("h_imgs.idx", "h_onelab.idx"), CountMismatch);

    CHECK_THROWS_AS(load_mnist_idx("h_missing.idx", "h_labs.idx"), IdxError);
  }

  TEST_CASE("idx writers invert the loader bit-exactly on quantized data") {
    Dataset digits = synth_digits(2, 42);
    write_idx_images("h_rt_imgs.idx", digits.samples, 28, 28);
    write_idx_labels("h_rt_labs.idx", digits.labels);
    Dataset back = load_mnist_idx("h_rt_imgs.idx", "h_rt_labs.idx");
    CHECK(same_dataset(digits, back));

    CHECK_THROWS_AS(write_idx_images("h_bad.idx", {Vector{0.5}}, 2, 2), std::invalid_argument);
    CHECK_THROWS_AS(write_idx_images("h_bad.idx", {Vector{1.5, 0.0, 0.0, 0.0}}, 2, 2),
                    std::invalid_argument);
    CHECK_THROWS_AS(write_idx_labels("h_bad.idx", {300}), std::invalid_argument);
  }

  TEST_CASE("gaussian blobs: deterministic, interleaved, and linearly separable") {
    Dataset a = synth_blobs(3, 4, 25, 10.0, 7);
    Dataset b = synth_blobs(3, 4, 25, 10.0, 7);
    CHECK(same_dataset(a, b));
    CHECK(synth_blobs(3, 4, 25, 10.0, 8).samples[0] != a.samples[0]);

    REQUIRE(a.size() == 75);
    CHECK(a.dim() == 4);
    CHECK(a.classes == 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a.labels[i] == static_cast<int>(i % 3));
    }

    // Nearest class-mean classification must be perfect at this separation.
    std::vector<Vector> centroid(3, Vector(4, 0.0));
    std::vector<int> counts(3, 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
      centroid[static_cast<std::size_t>(a.labels[i])] =
          add(centroid[static_cast<std::size_t>(a.labels[i])], a.samples[i]);
      counts[static_cast<std::size_t>(a.labels[i])] += 1;
    }
    for (int c = 0; c < 3; ++c) {
      centroid[static_cast<std::size_t>(c)] =
          scale(centroid[static_cast<std::size_t>(c)], 1.0 / counts[static_cast<std::size_t>(c)]);
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
      int best = 0;
      double best_d = norm2(sub(a.samples[i], centroid[0]));
      for (int c = 1; c < 3; ++c) {
        double dist = norm2(sub(a.samples[i], centroid[static_cast<std::size_t>(c)]));
        if (dist < best_d) {
          best_d = dist;
          best = c;
        }
      }
      CHECK(best == a.labels[i]);
    }

    CHECK_THROWS_AS(synth_blobs(0, 4, 25, 1.0, 7), std::invalid_argument);
  }

  TEST_CASE("synthetic digits: shape, quantization, shared prototypes, seeded jitter") {
    Dataset a = synth_digits(3, 5);
    Dataset b = synth_digits(3, 5);
    CHECK(same_dataset(a, b));
    CHECK(synth_digits(3, 6).samples[0] != a.samples[0]);

    REQUIRE(a.size() == 30);
    CHECK(a.dim() == 784);
    CHECK(a.classes == 10);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a.labels[i] == static_cast<int>(i % 10));
    }
    for (double v : a.samples[17]) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      double units = v * 255.0;
      CHECK(std::abs(units - std::lround(units)) <= 1e-9);
    }

    // Same class across different seeds shares a prototype: after removing
    // each image's mean level (all images share a positive background), the
    // average same-class correlation between two seeds must sit well above
    // the average cross-class correlation.
    Dataset c = synth_digits(1, 99);
    auto centered_corr = [](const Vector& u, const Vector& v) {
      double mu = 0.0, mv = 0.0;
      for (double x : u) mu += x;
      for (double x : v) mv += x;
      mu /= static_cast<double>(u.size());
      mv /= static_cast<double>(v.size());
      double uv = 0.0, uu = 0.0, vv = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) {
        uv += (u[i] - mu) * (v[i] - mv);
        uu += (u[i] - mu) * (u[i] - mu);
        vv += (v[i] - mv) * (v[i] - mv);
      }
      return uv / std::sqrt(uu * vv);
    };
    double intra = 0.0, cross = 0.0;
    int n_intra = 0, n_cross = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::size_t j = 0; j < c.size(); ++j) {
        double r = centered_corr(a.samples[i], c.samples[j]);
        if (a.labels[i] == c.labels[j]) {
          intra += r;
          ++n_intra;
        } else {
          cross += r;
          ++n_cross;
        }
      }
    }
    intra /= n_intra;
    cross /= n_cross;
    CHECK(intra > cross + 0.05);
  }

  TEST_CASE("hold-out split: sizes, determinism, and exact partition") {
    Dataset data = synth_blobs(2, 3, 10, 4.0, 13);
    auto [train_a, val_a] = split_validation(data, 0.25, 3);
    auto [train_b, val_b] = split_validation(data, 0.25, 3);
    CHECK(same_dataset(train_a, train_b));
    CHECK(same_dataset(val_a, val_b));
    CHECK(val_a.size() == 5);  // round(20 * 0.25)
    CHECK(train_a.size() == 15);
    CHECK(train_a.classes == 2);
    CHECK(val_a.classes == 2);

    // Every original sample appears exactly once across the two halves.
    std::vector<double> seen;
    for (const Vector& s : train_a.samples) seen.push_back(s[0]);
    for (const Vector& s : val_a.samples) seen.push_back(s[0]);
    std::vector<double> want;
    for (const Vector& s : data.samples) want.push_back(s[0]);
    std::sort(seen.begin(), seen.end());
    std::sort(want.begin(), want.end());
    CHECK(seen == want);

    auto [train_c, val_c] = split_validation(data, 0.0, 3);
    CHECK(val_c.size() == 0);
    CHECK(train_c.size() == 20);
    CHECK_THROWS_AS(split_validation(data, 1.0, 3), std::invalid_argument);
    CHECK_THROWS_AS(split_validation(data, -0.1, 3), std::invalid_argument);
  }

  TEST_CASE("config entries: every key applies and malformed input is rejected") {
    ExperimentConfig cfg;
    apply_config_entry(cfg, "scheme", "dp-stabilized");
    CHECK(cfg.scheme == Scheme::DPStabilized);
    apply_config_entry(cfg, "alpha", "0.25,0.75");
    CHECK(cfg.alpha == std::vector<double>{0.25, 0.75});
    apply_config_entry(cfg, "beta", "0.125");
    CHECK(cfg.beta == 0.125);
    apply_config_entry(cfg, "schedule", "sweeps:12");
    CHECK(cfg.schedule.kind == Schedule::Kind::RepeatedSweeps);
    CHECK(cfg.schedule.passes == 12);
    apply_config_entry(cfg, "schedule", "forward:4");
    CHECK(cfg.schedule.kind == Schedule::Kind::ForwardPasses);
    apply_config_entry(cfg, "schedule", "sweep");
    CHECK(cfg.schedule.kind == Schedule::Kind::SingleSweep);
    apply_config_entry(cfg, "arch", "784-256-10");
    CHECK(cfg.arch == std::vector<std::size_t>{784, 256, 10});
    apply_config_entry(cfg, "activation", "leaky-relu:0.2");
    CHECK(cfg.activation.kind == ActivationKind::Kind::LeakyRelu);
    CHECK(cfg.activation.slope == 0.2);
    apply_config_entry(cfg, "bias", "off");
    CHECK(cfg.bias == BiasMode::Off);
    apply_config_entry(cfg, "loss", "ce");
    CHECK(cfg.loss_family == LossKind::Family::CrossEntropy);
    apply_config_entry(cfg, "opt", "sgd");
    CHECK(cfg.opt_kind == OptimizerState::Kind::SgdMomentum);
    apply_config_entry(cfg, "lr", "0.05");
    CHECK(cfg.lr == 0.05);
    apply_config_entry(cfg, "momentum", "0.8");
    CHECK(cfg.momentum == 0.8);
    apply_config_entry(cfg, "weight_decay", "1e-4");
    CHECK(cfg.weight_decay == 1e-4);
    apply_config_entry(cfg, "epochs", "7");
    CHECK(cfg.epochs == 7);
    apply_config_entry(cfg, "batch_size", "32");
    CHECK(cfg.batch_size == 32);
    apply_config_entry(cfg, "seed", "99");
    CHECK(cfg.seed == 99);
    apply_config_entry(cfg, "data", "digits:10");
    CHECK(cfg.data == "digits:10");
    apply_config_entry(cfg, "subset", "500");
    CHECK(cfg.subset == 500);
    apply_config_entry(cfg, "validation_fraction", "0.2");
    CHECK(cfg.validation_fraction == 0.2);
    apply_config_entry(cfg, "grad_angle_every", "3");
    CHECK(cfg.grad_angle_every_n_batches == 3);
    apply_config_entry(cfg, "lipschitz_every_epoch", "off");
    CHECK(cfg.lipschitz_every_epoch == false);
    apply_config_entry(cfg, "out", "some/dir");
    CHECK(cfg.out_dir == "some/dir");

    CHECK_THROWS_AS(apply_config_entry(cfg, "nonsense", "1"), ConfigError);
    CHECK_THROWS_AS(apply_config_entry(cfg, "scheme", "bogus"), ConfigError);
    CHECK_THROWS_AS(apply_config_entry(cfg, "alpha", "0.5,x"), ConfigError);
    CHECK_THROWS_AS(apply_config_entry(cfg, "arch", "784"), ConfigError);
    CHECK_THROWS_AS(apply_config_entry(cfg, "arch", "784-0-10"), ConfigError);
    CHECK_THROWS_AS(apply_config_entry(cfg, "activation", "sigmoid"), ConfigError);
    CHECK_THROWS_AS(apply_config_entry(cfg, "bias", "maybe"), ConfigError);
    CHECK_THROWS_AS(apply_config_entry(cfg, "loss", "mse"), ConfigError);
    CHECK_THROWS_AS(apply_config_entry(cfg, "batch_size", "0"), ConfigError);
    CHECK_THROWS_AS(apply_config_entry(cfg, "validation_fraction", "1.0"), ConfigError);
    CHECK_THROWS_AS(apply_config_entry(cfg, "schedule", "sweeps:0"), ConfigError);
    CHECK_THROWS_AS(apply_config_entry(cfg, "lr", "fast"), ConfigError);
  }

  TEST_CASE("config files: comments, whitespace, and line-numbered errors") {
    write_text("h_cfg.txt",
               "# experiment\n"
               "\n"
               "scheme = dpt\n"
               "alpha=0.5\n"
               "arch = 4-8-3   # trailing comment\n"
               "  beta = 0.25\n");
    ExperimentConfig cfg = parse_config_file("h_cfg.txt");
    CHECK(cfg.scheme == Scheme::DPT);
    CHECK(cfg.alpha == std::vector<double>{0.5});
    CHECK(cfg.arch == std::vector<std::size_t>{4, 8, 3});
    CHECK(cfg.beta == 0.25);

    write_text("h_cfg_bad.txt", "scheme = dpt\n\nthis line has no equals\n");
    try {
      parse_config_file("h_cfg_bad.txt");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(":3:") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config_file("h_cfg_missing.txt"), ConfigError);
  }

  TEST_CASE("dataset resolution: all source kinds and the environment fallback") {
    ExperimentConfig cfg;
    cfg.seed = 21;

    cfg.data = "blobs:3x4x5x2.5";
    CHECK(same_dataset(resolve_dataset(cfg), synth_blobs(3, 4, 5, 2.5, 21)));

    cfg.data = "digits:2";
    CHECK(same_dataset(resolve_dataset(cfg), synth_digits(2, 21)));

    cfg.data = "constant:6x3x2";
    Dataset cst = resolve_dataset(cfg);
    REQUIRE(cst.size() == 6);
    CHECK(cst.dim() == 3);
    CHECK(cst.classes == 2);
    CHECK(cst.samples[4] == Vector{0.5, 0.5, 0.5});
    CHECK(cst.labels == std::vector<int>(6, 0));

    std::filesystem::create_directories("h_mnist_dir");
    Dataset digits = synth_digits(1, 77);
    write_idx_images("h_mnist_dir/train-images-idx3-ubyte", digits.samples, 28, 28);
    write_idx_labels("h_mnist_dir/train-labels-idx1-ubyte", digits.labels);
    cfg.data = "mnist:h_mnist_dir";
    CHECK(same_dataset(resolve_dataset(cfg), digits));

    cfg.data = "mnist";
    ::setenv("DUALPROP_DATA", "h_mnist_dir", 1);
    CHECK(same_dataset(resolve_dataset(cfg), digits));
    ::unsetenv("DUALPROP_DATA");
    CHECK_THROWS_AS(resolve_dataset(cfg), ConfigError);

    cfg.data = "blobs:3x4x5";
    CHECK_THROWS_AS(resolve_dataset(cfg), ConfigError);
    cfg.data = "tarot:10";
    CHECK_THROWS_AS(resolve_dataset(cfg), ConfigError);
    cfg.data = "";
    CHECK_THROWS_AS(resolve_dataset(cfg), ConfigError);
  }

  TEST_CASE("experiment runner: artifacts, csv schema, and byte-level determinism") {
    ExperimentConfig cfg = blob_config("h_run_a");
    ExperimentResult res = run_experiment(cfg);
    CHECK_FALSE(res.diverged);
    CHECK(std::isfinite(res.final_accuracy));
    CHECK(res.final_accuracy >= 0.0);
    CHECK(res.final_accuracy <= 1.0);
    CHECK(res.history.epochs.size() == 2);
    // 75 samples, 10% hold-out -> 67 train (ceil batches: 5 per epoch)
    CHECK(res.history.batches.size() == 10);

    std::string csv = read_file("h_run_a/metrics.csv");
    std::istringstream lines(csv);
    std::string header;
    std::getline(lines, header);
    CHECK(header ==
          "epoch,batch,train_loss,test_acc,lipschitz,diverged,"
          "angle_layer_0,angle_layer_1,l2diff_layer_0,l2diff_layer_1");
    int rows = 0;
    std::string row;
    while (std::getline(lines, row)) {
      ++rows;
      CHECK(std::count(row.begin(), row.end(), ',') == 9);
    }
    CHECK(rows == 10);

    NetworkParams restored = load_checkpoint("h_run_a/checkpoint.dp");
    CHECK(restored.depth() == 2);
    CHECK(restored.input_dim() == 4);
    CHECK(restored.output_dim() == 3);

    nlohmann::json summary = nlohmann::json::parse(read_file("h_run_a/summary.json"));
    CHECK(summary.at("diverged").get<bool>() == false);
    CHECK(summary.at("epochs_completed").get<int>() == 2);
    CHECK(summary.at("batches_recorded").get<int>() == 10);
    CHECK(summary.at("final_accuracy").is_number());

    ExperimentConfig cfg_b = blob_config("h_run_b");
    run_experiment(cfg_b);
    CHECK(read_file("h_run_a/metrics.csv") == read_file("h_run_b/metrics.csv"));
    CHECK(read_file("h_run_a/checkpoint.dp") == read_file("h_run_b/checkpoint.dp"));
    CHECK(read_file("h_run_a/summary.json") == read_file("h_run_b/summary.json"));
  }

  TEST_CASE("frozen optimizer on constant data keeps the loss pinned per batch") {
    ExperimentConfig cfg;
    cfg.data = "constant:20x3x2";
    cfg.arch = {3, 4, 2};
    cfg.lr = 0.0;
    cfg.epochs = 2;
    cfg.batch_size = 6;
    cfg.seed = 4;
    cfg.out_dir = "h_run_const";
    ExperimentResult res = run_experiment(cfg);
    REQUIRE(res.history.batches.size() >= 2);
    double first = res.history.batches.front().train_loss;
    CHECK(std::isfinite(first));
    for (const BatchRecord& rec : res.history.batches) {
      CHECK(rec.train_loss == first);
      CHECK(rec.diverged_samples == 0);
    }
  }

  TEST_CASE("theory check runner: batteries pass and the report serializes") {
    TheoryCheckConfig cfg;
    cfg.seed = 5;
    cfg.relaxation_instances = 5;
    cfg.trilevel_instances = 3;
    cfg.bregman_pairs = 30;
    cfg.out_path = "h_theory.json";
    TheoryReport rep = run_theory_checks(cfg);
    CHECK(rep.pass);
    CHECK(rep.prop1.pass);
    CHECK(rep.prop2.pass);
    CHECK(rep.trilevel.pass);
    CHECK(rep.trilevel.half_alpha_max_residual <= 1e-12);
    CHECK(rep.trilevel.closed_form_max_rel_err <= 1e-8);
    CHECK(rep.bregman.pass);
    CHECK(rep.bregman.max_abs_gap_at_half <= 1e-12);

    nlohmann::json doc = nlohmann::json::parse(read_file("h_theory.json"));
    CHECK(doc.at("pass").get<bool>() == rep.pass);
    const nlohmann::json& sample = doc.at("prop1").at("samples").at(0);
    CHECK(sample.contains("instance_id"));
    CHECK(sample.contains("alpha"));
    CHECK(sample.contains("beta"));
    CHECK(sample.contains("J"));
    CHECK(doc.at("prop1").at("ordering_direction").is_string());
    CHECK(doc.at("prop1").at("samples").size() == 5u * 5u * 3u);
  }
}
