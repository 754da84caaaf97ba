// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion ids
// (C2, C7, ...) as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "raseg/cli.hpp"
#include "raseg/common.hpp"
#include "raseg/learn/classifiers.hpp"
#include "raseg/learn/grid_search.hpp"
#include "raseg/learn/reducers.hpp"
#include "raseg/metrics.hpp"
#include "raseg/model.hpp"
#include "raseg/ndiff/gradcheck.hpp"
#include "raseg/ndiff/ops.hpp"
#include "raseg/phantom.hpp"
#include "raseg/train.hpp"
#include "raseg/volio.hpp"
#include "../support/oracles.hpp"

namespace fs = std::filesystem;
using namespace raseg;
using nd::Graph;
using nd::Shape5;
using nd::Tensor5;
using nd::Var;
using nlohmann::json;

namespace {

struct Outcome {
  enum Status { Pass, Fail, NotApplicable } status = Fail;
  std::string detail;
};

struct Checks {
  bool ok = true;
  std::ostringstream log;

  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      log << "[failed] " << what << "; ";
    }
  }
  void note(const std::string& s) { log << s << "; "; }
  Outcome outcome() const {
    std::string s = log.str();
    if (s.size() >= 2) s.resize(s.size() - 2);
    return {ok ? Outcome::Pass : Outcome::Fail, s};
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor5<double> random_tensor(Shape5 s, Rng& rng, double scale = 1.0) {
  Tensor5<double> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("raseg_acceptance_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int cli(const std::vector<std::string>& args, std::string* stdout_text = nullptr) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (stdout_text) *stdout_text = out.str();
  if (code != 0) std::cerr << "  cli failed (" << code << "): " << err.str();
  return code;
}

// ---------------------------------------------------------------------------
// C1

Outcome c1() {
  return {Outcome::NotApplicable,
          "clinical cohorts are not available; C2-C10 cover the method on synthetic data"};
}

// ---------------------------------------------------------------------------
// C2: finite-difference gradient checks

Outcome c2() {
  Checks ck;
  Rng rng(2024);
  double worst_primitive = 0.0;
  auto check = [&](const std::string& name, nd::GraphBuilder build, std::vector<Tensor5<double>> inputs,
                   nd::ParamStore<double>* params = nullptr, nd::GradCheckOptions o = nd::GradCheckOptions{}) {
    const auto rep = nd::grad_check(build, inputs, params, o);
    worst_primitive = std::max(worst_primitive, rep.max_rel_error);
    ck.expect(rep.max_rel_error < 1e-4, name + " rel err " + fmt("%.2e", rep.max_rel_error) + " at " + rep.worst.tensor);
  };

  check("conv3d s2",
        [](Graph<double>& g, std::span<const Var> in) {
          return nd::conv3d(g, in[0], in[1], in[2], nd::ConvAttrs{{2, 2, 2}, {1, 1, 1}});
        },
        {random_tensor({2, 2, 5, 4, 3}, rng), random_tensor({3, 2, 3, 3, 3}, rng), random_tensor({3, 1, 1, 1, 1}, rng)});
  check("conv3d 1x1",
        [](Graph<double>& g, std::span<const Var> in) { return nd::conv3d(g, in[0], in[1], in[2], nd::ConvAttrs{}); },
        {random_tensor({1, 3, 2, 3, 2}, rng), random_tensor({2, 3, 1, 1, 1}, rng), random_tensor({2, 1, 1, 1, 1}, rng)});
  check("tconv3d",
        [](Graph<double>& g, std::span<const Var> in) {
          return nd::tconv3d(g, in[0], in[1], in[2], nd::TConvAttrs{{2, 2, 2}, {1, 1, 1}, {1, 1, 1}});
        },
        {random_tensor({1, 2, 2, 3, 2}, rng), random_tensor({2, 3, 3, 3, 3}, rng), random_tensor({3, 1, 1, 1, 1}, rng)});
  check("instance_norm",
        [](Graph<double>& g, std::span<const Var> in) { return nd::instance_norm(g, in[0], in[1], in[2]); },
        {random_tensor({2, 3, 2, 3, 2}, rng), random_tensor({3, 1, 1, 1, 1}, rng), random_tensor({3, 1, 1, 1, 1}, rng)});
  {
    Tensor5<double> x = random_tensor({2, 3, 2, 2, 3}, rng);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += x[i] >= 0 ? 0.1 : -0.1;  // stay clear of the kink
    check("prelu", [](Graph<double>& g, std::span<const Var> in) { return nd::prelu(g, in[0], in[1]); },
          {x, random_tensor({3, 1, 1, 1, 1}, rng)});
  }
  {
    nd::GradCheckOptions train_opts;
    train_opts.training = true;
    train_opts.seed = 5;
    check("spatial_dropout",
          [](Graph<double>& g, std::span<const Var> in) { return nd::spatial_dropout(g, in[0], 0.4); },
          {random_tensor({2, 4, 2, 2, 2}, rng)}, nullptr, train_opts);
  }
  check("sigmoid", [](Graph<double>& g, std::span<const Var> in) { return nd::sigmoid(g, in[0]); },
        {random_tensor({1, 2, 2, 3, 2}, rng, 3.0)});
  check("softmax_channel", [](Graph<double>& g, std::span<const Var> in) { return nd::softmax_channel(g, in[0]); },
        {random_tensor({2, 3, 2, 2, 2}, rng, 2.0)});
  check("add", [](Graph<double>& g, std::span<const Var> in) { return nd::add(g, in[0], in[1]); },
        {random_tensor({1, 2, 2, 2, 2}, rng), random_tensor({1, 2, 2, 2, 2}, rng)});
  check("mul", [](Graph<double>& g, std::span<const Var> in) { return nd::mul(g, in[0], in[1]); },
        {random_tensor({1, 2, 2, 2, 2}, rng), random_tensor({1, 2, 2, 2, 2}, rng)});
  check("mul same operand", [](Graph<double>& g, std::span<const Var> in) { return nd::mul(g, in[0], in[0]); },
        {random_tensor({1, 2, 2, 2, 2}, rng)});
  check("concat_channel",
        [](Graph<double>& g, std::span<const Var> in) { return nd::concat_channel(g, in); },
        {random_tensor({2, 1, 2, 2, 2}, rng), random_tensor({2, 3, 2, 2, 2}, rng)});
  check("slice_channel", [](Graph<double>& g, std::span<const Var> in) { return nd::slice_channel(g, in[0], 1, 3); },
        {random_tensor({2, 4, 2, 2, 2}, rng)});
  check("slice_depth", [](Graph<double>& g, std::span<const Var> in) { return nd::slice_depth(g, in[0], 2); },
        {random_tensor({1, 2, 3, 2, 2}, rng)});
  check("concat_depth", [](Graph<double>& g, std::span<const Var> in) { return nd::concat_depth(g, in); },
        {random_tensor({1, 2, 1, 2, 3}, rng), random_tensor({1, 2, 2, 2, 3}, rng)});
  check("convlstm_cell",
        [](Graph<double>& g, std::span<const Var> in) {
          auto [h, c] = nd::convlstm_cell(g, in[0], in[1], in[2], in[3], in[4], in[5]);
          const std::array<Var, 2> parts{h, c};
          return nd::concat_channel(g, std::span<const Var>(parts));
        },
        {random_tensor({2, 3, 1, 3, 3}, rng), random_tensor({2, 2, 1, 3, 3}, rng), random_tensor({2, 2, 1, 3, 3}, rng),
         random_tensor({8, 3, 1, 3, 3}, rng, 0.5), random_tensor({8, 2, 1, 3, 3}, rng, 0.5),
         random_tensor({8, 1, 1, 1, 1}, rng)});
  check("mean_axes",
        [](Graph<double>& g, std::span<const Var> in) { return nd::mean_axes(g, in[0], {false, true, true}); },
        {random_tensor({2, 3, 2, 3, 4}, rng)});
  check("flatten", [](Graph<double>& g, std::span<const Var> in) { return nd::flatten(g, in[0]); },
        {random_tensor({2, 3, 2, 1, 2}, rng)});
  {
    Tensor5<double> target({2, 1, 2, 3, 3});
    for (std::size_t i = 0; i < target.size(); ++i) target[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
    const train::LossConfig lc;
    check("dice_ce_loss",
          [target, lc](Graph<double>& g, std::span<const Var> in) { return train::dice_ce_loss(g, in[0], target, lc); },
          {random_tensor({2, 2, 2, 3, 3}, rng)});
  }
  ck.note("primitives worst " + fmt("%.2e", worst_primitive));

  // Composed network and loss on a 16^3 input, dropout off.
  const auto cfg = model::ModelConfig::desk();
  const auto mdl = model::build_model(cfg, 11);
  auto params = model::cast_params<double>(mdl.params);
  Tensor5<double> image = random_tensor({1, 1, 16, 16, 16}, rng, 0.5);
  Tensor5<double> bbox({1, 1, 16, 16, 16}), target({1, 1, 16, 16, 16});
  for (int d = 4; d < 12; ++d)
    for (int h = 5; h < 11; ++h)
      for (int w = 3; w < 12; ++w) {
        bbox(0, 0, d, h, w) = 1.0;
        if ((d - 8) * (d - 8) + (h - 8) * (h - 8) + (w - 7) * (w - 7) <= 9) target(0, 0, d, h, w) = 1.0;
      }
  nd::GradCheckOptions e2e;
  e2e.max_elements_per_tensor = 4;
  e2e.seed = 3;
  // PReLU kinks bias larger steps; summation roundoff in the loss (~1e-14)
  // over this step sets the absolute noise floor near 1e-8.
  e2e.step = 1e-6;
  e2e.denominator_floor = 1e-5;
  const train::LossConfig lc;
  std::vector<Tensor5<double>> e2e_inputs{image};
  const auto rep = nd::grad_check(
      [&](Graph<double>& g, std::span<const Var> in) {
        const auto fr = model::forward_graph(g, cfg, params, in[0], bbox);
        return train::dice_ce_loss(g, fr.logits, target, lc);
      },
      e2e_inputs, &params, e2e);
  ck.expect(rep.max_rel_error < 1e-3,
            "end-to-end rel err " + fmt("%.2e", rep.max_rel_error) + " at " + rep.worst.tensor + " analytic " +
                fmt("%.6e", rep.worst.analytic) + " numeric " + fmt("%.6e", rep.worst.numeric));
  ck.note("end-to-end worst " + fmt("%.2e", rep.max_rel_error) + " over " + std::to_string(rep.elements_checked) +
          " elements");
  return ck.outcome();
}

// ---------------------------------------------------------------------------
// C3: attention recalibration contract

Outcome c3() {
  Checks ck;
  Rng rng(33);
  const int C = 5;
  const Shape5 fs{2, C, 4, 5, 3};
  const Tensor5<double> f = random_tensor(fs, rng);
  Tensor5<double> b({2, 1, 4, 5, 3});
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;

  for (int convs : {1, 2}) {
    nd::ParamStore<double> zero;
    zero["att.conv0.w"].value = Tensor5<double>({C, 1, 3, 3, 3});
    zero["att.conv0.b"].value = Tensor5<double>({C, 1, 1, 1, 1});
    if (convs == 2) {
      zero["att.act0.a"].value = Tensor5<double>({C, 1, 1, 1, 1}, 0.25);
      zero["att.conv1.w"].value = Tensor5<double>({C, C, 3, 3, 3});
      zero["att.conv1.b"].value = Tensor5<double>({C, 1, 1, 1, 1});
    }
    Graph<double> g;
    const Var out = model::attention_recalibrate(g, g.input(f), g.input(b), zero, "att", convs);
    const auto& y = g.value(out);
    bool exact = true;
    for (std::size_t i = 0; i < y.size(); ++i) exact = exact && y[i] == 1.5 * f[i];
    ck.expect(exact, "zero weights (" + std::to_string(convs) + " convs) do not give exactly 1.5 f_in");

    nd::ParamStore<double> rnd = zero;
    for (auto& [name, p] : rnd) {
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = 3.0 * rng.normal();
    }
    Graph<double> g2;
    const auto& y2 = g2.value(model::attention_recalibrate(g2, g2.input(f), g2.input(b), rnd, "att", convs));
    double worst = 0.0;
    for (std::size_t i = 0; i < y2.size(); ++i) {
      const double a = std::abs(f[i]), o = std::abs(y2[i]);
      worst = std::max({worst, a - o, o - 2.0 * a});
      ck.expect(std::signbit(f[i]) == std::signbit(y2[i]) || f[i] == 0.0, "sign flipped");
    }
    ck.expect(worst <= 1e-6, "bound |f_in| <= |f_out| <= 2|f_in| violated by " + fmt("%.2e", worst));
  }
  ck.note("exact 1.5 f_in and bounds hold for 1 and 2 stacked convs");
  return ck.outcome();
}

// ---------------------------------------------------------------------------
// C4: overfit a single phantom

train::Sample desk_sample(std::uint64_t seed) {
  phantom::PhantomSpec spec;
  const auto ph = phantom::generate_phantom(spec, seed);
  auto pc = cli::RunConfig::desk().preprocess;
  train::Sample s;
  s.id = "overfit";
  s.data = volio::preprocess(ph.image, ph.tumor_mask, std::nullopt, pc);
  return s;
}

Outcome c4() {
  Checks ck;
  const auto t0 = std::chrono::steady_clock::now();
  const train::Sample s = desk_sample(4);
  train::TrainConfig tc;
  tc.lr = 1e-3;
  tc.batch_size = 1;
  tc.max_epochs = 500;
  tc.patience = 500;
  tc.max_steps = 500;
  tc.stop_at_dsc = 0.90;
  tc.augment = augment::AugmentConfig::disabled();
  tc.loss = train::LossConfig{1.0, 1.0, 1e-5};
  tc.seed = 1;
  const std::vector<const train::Sample*> set{&s};
  const auto r = train::train_fold(set, set, model::ModelConfig::desk(), tc, 0);
  const double dsc = train::evaluate_dsc(r.best, set);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ck.expect(r.report.steps <= 500, "used more than 500 steps");
  ck.expect(dsc >= 0.90, "training DSC " + fmt("%.4f", dsc) + " < 0.90");
  ck.expect(secs < 600.0, "runtime " + fmt("%.0f", secs) + " s exceeds 10 min");
  ck.note("DSC " + fmt("%.4f", dsc) + " after " + std::to_string(r.report.steps) + " steps, " + fmt("%.0f", secs) +
          " s");
  return ck.outcome();
}

// ---------------------------------------------------------------------------
// C5: end-to-end phantom pipeline through the CLI

json read_json(const fs::path& p) { return json::parse(read_text_file(p)); }

Outcome c5() {
  Checks ck;
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path root = scratch_dir("c5");
  const fs::path cfg = root / "config.json";
  write_text_file(cfg, json{{"seed", 5},
                            {"cohort_size", 60},
                            {"train", {{"max_epochs", 30}, {"patience", 8}, {"batch_size", 2}}},
                            {"learn", {{"reducer", "lda"}, {"classifier", "rf"}}}}
                           .dump(2));
  const std::string c = cfg.string();
  auto step = [&](std::vector<std::string> args) {
    std::vector<std::string> full{"--config", c};
    full.insert(full.end(), args.begin(), args.end());
    return cli(full) == 0;
  };
  if (!step({"--out", (root / "cohort").string(), "phantom"}) ||
      !step({"--out", (root / "pre").string(), "preprocess", "--manifest", (root / "cohort/manifest.json").string()}) ||
      !step({"--out", (root / "train").string(), "train", "--manifest", (root / "pre/preprocessed.json").string()})) {
    return {Outcome::Fail, "pipeline command failed"};
  }
  const json summary = read_json(root / "train/cv_summary.json");
  int best_fold = 0;
  double best_dsc = -1.0;
  for (std::size_t k = 0; k < summary["fold_dsc"].size(); ++k) {
    if (summary["fold_dsc"][k].get<double>() > best_dsc) {
      best_dsc = summary["fold_dsc"][k].get<double>();
      best_fold = static_cast<int>(k);
    }
  }
  ck.note("segmentation DSC " + fmt("%.3f", summary["dsc_mean"].get<double>()) + " +- " +
          fmt("%.3f", summary["dsc_std"].get<double>()));
  const std::string ckpt = (root / ("train/checkpoint_fold_" + std::to_string(best_fold))).string();
  if (!step({"--out", (root / "features").string(), "extract-features", "--checkpoint", ckpt, "--manifest",
             (root / "pre/preprocessed.json").string()}) ||
      !step({"--out", (root / "classify").string(), "classify", "--features",
             (root / "features/features.csv").string()})) {
    return {Outcome::Fail, ck.log.str() + "feature or classification command failed"};
  }
  const json rep = read_json(root / "classify/classifier_report.json");
  const double f1 = rep["f1_macro"].get<double>(), auc = rep["roc_auc"].get<double>();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ck.expect(f1 >= 0.85, "F1-macro " + fmt("%.3f", f1) + " < 0.85");
  ck.expect(auc >= 0.85, "ROC-AUC " + fmt("%.3f", auc) + " < 0.85");
  ck.expect(secs < 3600.0, "runtime " + fmt("%.0f", secs) + " s exceeds 60 min");
  ck.note("LDA+RF held-out F1-macro " + fmt("%.3f", f1) + ", ROC-AUC " + fmt("%.3f", auc) + ", " +
          fmt("%.0f", secs) + " s");
  fs::remove_all(root);
  return ck.outcome();
}

// ---------------------------------------------------------------------------
// C6: reducer oracles

Outcome c6() {
  Checks ck;
  {
    std::mt19937_64 gen(6);
    std::normal_distribution<double> nd01;
    Eigen::MatrixXd X(50, 10);
    for (int j = 0; j < 10; ++j)
      for (int i = 0; i < 50; ++i) X(i, j) = nd01(gen) * (1.0 + j);
    const auto pca = learn::pca_fit(X, 0.95);
    const int k = static_cast<int>(pca.projection.rows());
    const double angle = oracle::max_principal_angle(pca.projection, oracle::covariance_eigenvectors(X, k));
    ck.expect(angle < 1e-6, "PCA principal angle " + fmt("%.2e", angle));
    ck.note("PCA k=" + std::to_string(k) + ", max principal angle " + fmt("%.1e", angle));
  }
  {
    auto cl = oracle::gaussian_clusters(200, 5, 1.5, 1.0, 61);
    std::mt19937_64 gen(62);
    std::normal_distribution<double> nd01;
    Eigen::MatrixXd mix(5, 5);
    for (int i = 0; i < 25; ++i) mix.data()[i] = nd01(gen);
    mix += 3.0 * Eigen::MatrixXd::Identity(5, 5);
    const Eigen::MatrixXd X = cl.X * mix;
    const auto lda = learn::lda_fit(X, cl.y);
    const Eigen::VectorXd w = lda.projection.row(0).transpose();
    const Eigen::VectorXd ref = oracle::fisher_direction(X, cl.y);
    const double cosine = w.dot(ref) / (w.norm() * ref.norm());
    ck.expect(cosine > 1.0 - 1e-6, "LDA cosine " + fmt("%.12f", cosine));
    ck.note("LDA |1 - cosine| to closed form " + fmt("%.1e", std::abs(1.0 - cosine)));
  }
  {
    // High-variance nuisance axes hide a low-variance discriminative one.
    std::mt19937_64 gen(63);
    std::normal_distribution<double> nd01;
    const int n = 60;
    Eigen::MatrixXd X(n, 10);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      y[i] = i % 2;
      for (int j = 0; j < 3; ++j) X(i, j) = 10.0 * nd01(gen);
      X(i, 3) = (y[i] ? 1.5 : -1.5) + nd01(gen);
      for (int j = 4; j < 10; ++j) X(i, j) = 0.5 * nd01(gen);
    }
    learn::ReduceOptions pca, lda;
    pca.kind = learn::ReducerKind::Pca;
    lda.kind = learn::ReducerKind::Lda;
    const auto kind = learn::ClassifierKind::Qda;
    const auto cv_pca = learn::cross_validate_classifier(kind, {}, pca, X, y, 5, 1);
    const auto cv_lda = learn::cross_validate_classifier(kind, {}, lda, X, y, 5, 1);
    ck.expect(cv_lda.f1_macro > cv_pca.f1_macro,
              "LDA F1 " + fmt("%.3f", cv_lda.f1_macro) + " <= PCA F1 " + fmt("%.3f", cv_pca.f1_macro));
    ck.note("downstream F1-macro LDA " + fmt("%.3f", cv_lda.f1_macro) + " vs PCA " + fmt("%.3f", cv_pca.f1_macro));
  }
  return ck.outcome();
}

// ---------------------------------------------------------------------------
// C7: classifier oracles

Outcome c7() {
  Checks ck;
  {
    std::mt19937_64 gen(7);
    std::normal_distribution<double> nd01;
    const int n = 40, d = 3;
    Eigen::MatrixXd X(n, d);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      y[i] = i < 15 ? 1 : 0;
      for (int j = 0; j < d; ++j) X(i, j) = nd01(gen) * (y[i] ? 1.5 : 0.7) + (y[i] ? 0.8 : 0.0) * j;
    }
    const auto qda = learn::qda_fit(X, y);
    // Independent class statistics, then direct densities.
    std::array<Eigen::VectorXd, 2> mu;
    std::array<Eigen::MatrixXd, 2> cov;
    std::array<double, 2> prior{};
    for (int c = 0; c < 2; ++c) {
      mu[c] = Eigen::VectorXd::Zero(d);
      int cnt = 0;
      for (int i = 0; i < n; ++i)
        if (y[i] == c) {
          mu[c] += X.row(i).transpose();
          ++cnt;
        }
      mu[c] /= cnt;
      cov[c] = Eigen::MatrixXd::Zero(d, d);
      for (int i = 0; i < n; ++i)
        if (y[i] == c) cov[c] += (X.row(i).transpose() - mu[c]) * (X.row(i).transpose() - mu[c]).transpose();
      cov[c] /= (cnt - 1);
      cov[c] += 1e-6 * cov[c].trace() / d * Eigen::MatrixXd::Identity(d, d);
      prior[c] = static_cast<double>(cnt) / n;
    }
    Eigen::MatrixXd probe(25, d);
    for (int i = 0; i < probe.size(); ++i) probe.data()[i] = 2.0 * nd01(gen);
    const auto post = learn::qda_predict_proba(qda, probe);
    double worst = 0.0;
    for (int i = 0; i < probe.rows(); ++i) {
      const double l0 = oracle::gaussian_log_density(probe.row(i).transpose(), mu[0], cov[0]) + std::log(prior[0]);
      const double l1 = oracle::gaussian_log_density(probe.row(i).transpose(), mu[1], cov[1]) + std::log(prior[1]);
      const double p1 = 1.0 / (1.0 + std::exp(l0 - l1));
      worst = std::max(worst, std::abs(post(i, 1) - p1));
    }
    ck.expect(worst < 1e-9, "QDA posterior error " + fmt("%.2e", worst));
    ck.note("QDA max posterior error " + fmt("%.1e", worst));
  }
  {
    bool all_match = true;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 gen(70 + seed);
      std::normal_distribution<double> nd01;
      Eigen::MatrixXd X(20, 3);
      std::vector<int> y(20);
      for (int i = 0; i < 20; ++i) {
        for (int j = 0; j < 3; ++j) X(i, j) = std::round(4.0 * nd01(gen)) / 4.0;
        y[i] = (X(i, 0) + 0.5 * X(i, 2) + 0.7 * nd01(gen)) > 0 ? 1 : 0;
      }
      if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0) continue;
      const auto tree = learn::dt_fit(X, y, learn::TreeParams{1, 1, -1});
      const auto ref = oracle::exhaustive_root_split(X, y);
      all_match = all_match && tree.nodes[0].feature == ref.feature && tree.nodes[0].threshold == ref.threshold;
    }
    ck.expect(all_match, "DT root split differs from the exhaustive scan");
  }
  {
    auto cl = oracle::gaussian_clusters(80, 4, 0.8, 1.0, 71);
    learn::ClassifierParams p;
    p.n_trees = 1;
    p.bootstrap = false;
    p.max_features = -1;
    p.seed = 9;
    const auto rf = learn::rf_fit(cl.X, cl.y, p);
    const auto dt = learn::dt_fit(cl.X, cl.y, learn::TreeParams{p.max_depth, p.min_samples_leaf, -1});
    const auto probe = oracle::gaussian_clusters(60, 4, 0.8, 2.0, 72).X;
    ck.expect(learn::rf_predict_proba(rf, probe) == learn::dt_predict_proba(dt, probe),
              "RF(1 tree, no bootstrap, all features) differs from DT");
  }
  {
    auto cl = oracle::gaussian_clusters(100, 5, 1.0, 1.0, 73);
    learn::ClassifierParams p;
    p.tol = 1e-9;
    const auto m = learn::svc_fit(cl.X, cl.y, p);
    double box = 0.0, eq = 0.0, kkt = 0.0;
    const Eigen::VectorXd f = learn::svc_decision(m, cl.X);
    for (int i = 0; i < cl.X.rows(); ++i) {
      const double a = m.alpha(i), yi = m.y_signed(i);
      box = std::max({box, -a, a - p.C});
      eq += a * yi;
      const double margin = yi * f(i);
      if (a <= 0.0) kkt = std::max(kkt, 1.0 - margin);
      else if (a >= p.C) kkt = std::max(kkt, margin - 1.0);
      else kkt = std::max(kkt, std::abs(margin - 1.0));
    }
    ck.expect(box <= 1e-6 && std::abs(eq) <= 1e-6 && kkt <= 1e-6,
              "SVC KKT: box " + fmt("%.1e", box) + " equality " + fmt("%.1e", eq) + " optimality " + fmt("%.1e", kkt));
    ck.note("SVC KKT residual " + fmt("%.1e", std::max({box, std::abs(eq), kkt})));
  }
  {
    auto cl = oracle::gaussian_clusters(200, 5, 2.0, 0.6, 74);
    std::string accs;
    for (auto kind : {learn::ClassifierKind::Qda, learn::ClassifierKind::Dt, learn::ClassifierKind::Rf,
                      learn::ClassifierKind::Svc}) {
      const auto cv = learn::cross_validate_classifier(kind, {}, {}, cl.X, cl.y, 5, 3);
      ck.expect(cv.accuracy >= 0.95, learn::to_string(kind) + " 5-fold accuracy " + fmt("%.3f", cv.accuracy));
      accs += learn::to_string(kind) + " " + fmt("%.3f", cv.accuracy) + " ";
    }
    ck.note("5-fold accuracy " + accs);
  }
  return ck.outcome();
}

// ---------------------------------------------------------------------------
// C8: metric oracles

Outcome c8() {
  Checks ck;
  Rng rng(8);
  int exact = 0;
  for (int t = 0; t < 100; ++t) {
    const int n = 2 + static_cast<int>(rng.below(199));
    std::vector<int> y(n);
    std::vector<double> s(n);
    for (int i = 0; i < n; ++i) {
      y[i] = i < 1 ? 0 : i < 2 ? 1 : static_cast<int>(rng.below(2));
      s[i] = t % 2 ? static_cast<double>(rng.below(7)) : rng.normal();
    }
    exact += metrics::roc_auc(y, s) == oracle::pair_count_auc(y, s);
  }
  ck.expect(exact == 100, "roc_auc differs from pair counting in " + std::to_string(100 - exact) + " instances");

  volio::Volume a({1, 2, 4}, {1, 1, 1}), b({1, 2, 4}, {1, 1, 1});
  for (int w : {0, 1, 2, 3}) a.at(0, 0, w) = 1.0f;
  for (int w : {2, 3}) {
    b.at(0, 0, w) = 1.0f;
    b.at(0, 1, w) = 1.0f;
  }
  volio::Volume empty({1, 2, 4}, {1, 1, 1});
  ck.expect(metrics::dice_score(a, b) == 0.5, "dice |P|=4 |G|=4 overlap 2 != 0.5");
  ck.expect(metrics::dice_score(a, a) == 1.0, "dice self-overlap != 1");
  ck.expect(metrics::dice_score(empty, empty) == 1.0, "dice of two empty masks != 1");
  ck.expect(metrics::dice_score(a, empty) == 0.0, "dice against empty != 0");

  const std::vector<int> yt{1, 1, 0, 0}, yp{1, 0, 0, 0};
  const double f1 = metrics::f1_macro(yt, yp);
  ck.expect(std::abs(f1 - (2.0 / 3.0 + 4.0 / 5.0) / 2.0) < 1e-9, "f1_macro " + fmt("%.12f", f1));
  ck.note("AUC exact on 100/100, dice examples exact, F1 " + fmt("%.6f", f1));
  return ck.outcome();
}

// ---------------------------------------------------------------------------
// C9: CLI determinism

std::map<std::string, std::vector<char>> snapshot(const fs::path& dir) {
  std::map<std::string, std::vector<char>> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_binary_file(e.path());
  }
  return files;
}

Outcome c9() {
  Checks ck;
  const fs::path root = scratch_dir("c9");
  const fs::path cfg = root / "config.json";
  write_text_file(cfg, json{{"seed", 9},
                            {"cohort_size", 10},
                            {"train", {{"max_epochs", 1}, {"max_steps", 3}}},
                            {"learn", {{"classifier", "rf"}, {"folds", 2}, {"grid", {{"n_trees", {5}}}}}}}
                           .dump(2));
  const std::string c = cfg.string();
  const auto p = [&](const char* rel) { return (root / rel).string(); };
  const std::vector<std::pair<std::string, std::vector<std::string>>> stages{
      {"cohort", {"phantom"}},
      {"pre", {"preprocess", "--manifest", p("cohort/manifest.json")}},
      {"train", {"train", "--manifest", p("pre/preprocessed.json")}},
      {"infer", {"infer", "--checkpoint", p("train/checkpoint_fold_0"), "--image", p("pre/sample_000_image.json")}},
      {"features",
       {"extract-features", "--checkpoint", p("train/checkpoint_fold_0"), "--manifest", p("pre/preprocessed.json")}},
      {"classify", {"classify", "--features", p("features/features.csv")}},
      {"predict", {"classify", "--features", p("features/features.csv"), "--model", p("classify/model.ndarc")}},
      {"evaluate", {"evaluate", "--pred", p("infer/mask.json"), "--gt", p("pre/sample_000_tumor.json")}},
  };
  std::size_t compared = 0;
  for (const auto& [dir, args] : stages) {
    std::vector<std::string> full{"--config", c, "--out", p(dir.c_str())};
    full.insert(full.end(), args.begin(), args.end());
    if (cli(full) != 0) return {Outcome::Fail, "stage " + dir + " failed"};
    const auto first = snapshot(root / dir);
    fs::remove_all(root / dir);
    if (cli(full) != 0) return {Outcome::Fail, "stage " + dir + " failed on repeat"};
    const auto second = snapshot(root / dir);
    ck.expect(first == second, "stage " + dir + " outputs differ between runs");
    compared += first.size();
  }
  ck.note(std::to_string(compared) + " files byte-identical across repeated runs of 8 commands");
  fs::remove_all(root);
  return ck.outcome();
}

// ---------------------------------------------------------------------------
// C10: preprocessing fidelity

Outcome c10() {
  Checks ck;
  Rng rng(10);
  volio::Volume v({9, 11, 7}, {2.0, 0.7, 1.3}, {1.0, -2.0, 0.5});
  for (float& x : v.data()) x = static_cast<float>(600.0 * rng.normal() - 300.0);
  const auto once = volio::clip_intensity(v, -200, 250);
  ck.expect(volio::clip_intensity(once, -200, 250) == once, "clip is not idempotent");

  double worst_resample = 0.0, worst_resize = 0.0;
  for (int t = 0; t < 20; ++t) {
    const volio::Vec3 sp{0.5 + 2.0 * rng.uniform(), 0.5 + 2.0 * rng.uniform(), 0.5 + 2.0 * rng.uniform()};
    volio::Volume src({8 + static_cast<int>(rng.below(10)), 8 + static_cast<int>(rng.below(10)),
                       8 + static_cast<int>(rng.below(10))},
                      sp);
    const volio::Vec3 target{0.7 + 2.0 * rng.uniform(), 0.7 + 2.0 * rng.uniform(), 0.7 + 2.0 * rng.uniform()};
    const auto r = volio::resample(src, target, volio::Interp::Linear);
    const volio::Shape3 shape{8 + static_cast<int>(rng.below(20)), 8 + static_cast<int>(rng.below(20)),
                              8 + static_cast<int>(rng.below(20))};
    const auto z = volio::resize(src, shape, volio::Interp::Nearest);
    for (int a = 0; a < 3; ++a) {
      worst_resample = std::max(worst_resample, std::abs(r.extent()[a] - src.extent()[a]) / r.spacing()[a]);
      worst_resize = std::max(worst_resize, std::abs(z.extent()[a] - src.extent()[a]) / z.spacing()[a]);
    }
  }
  ck.expect(worst_resample <= 1.0, "resample extent drift " + fmt("%.3f", worst_resample) + " voxels");
  ck.expect(worst_resize <= 1.0, "resize extent drift " + fmt("%.3f", worst_resize) + " voxels");

  int tight = 0;
  for (int t = 0; t < 100; ++t) {
    volio::Volume m({6 + static_cast<int>(rng.below(10)), 6 + static_cast<int>(rng.below(10)),
                     6 + static_cast<int>(rng.below(10))},
                    {1, 1, 1});
    const double density = 0.002 + 0.05 * rng.uniform();
    int lo[3] = {1 << 20, 1 << 20, 1 << 20}, hi[3] = {-1, -1, -1};
    for (int d = 0; d < m.shape()[0]; ++d)
      for (int h = 0; h < m.shape()[1]; ++h)
        for (int w = 0; w < m.shape()[2]; ++w)
          if (rng.uniform() < density || (d == 2 && h == 3 && w == 1 && t % 3 == 0)) {
            m.at(d, h, w) = 1.0f;
            const int idx[3] = {d, h, w};
            for (int a = 0; a < 3; ++a) {
              lo[a] = std::min(lo[a], idx[a]);
              hi[a] = std::max(hi[a], idx[a]);
            }
          }
    if (hi[0] < 0) {
      m.at(0, 0, 0) = 1.0f;
      for (int a = 0; a < 3; ++a) lo[a] = hi[a] = 0;
    }
    const auto b = volio::bbox_from_mask(m);
    tight += b.min_index == volio::Shape3{lo[0], lo[1], lo[2]} && b.max_index == volio::Shape3{hi[0], hi[1], hi[2]};
  }
  ck.expect(tight == 100, "bbox not tight on " + std::to_string(100 - tight) + " masks");
  ck.note("clip idempotent; extent drift resample " + fmt("%.3f", worst_resample) + ", resize " +
          fmt("%.3f", worst_resize) + " voxel pitches; bbox tight on " + std::to_string(tight) + "/100");
  return ck.outcome();
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"C1", c1}, {"C2", c2}, {"C3", c3}, {"C4", c4}, {"C5", c5},
      {"C6", c6}, {"C7", c7}, {"C8", c8}, {"C9", c9}, {"C10", c10},
  };
  const std::set<std::string> selected(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& [id, fn] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {Outcome::Fail, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const char* status = o.status == Outcome::Pass ? "PASS" : o.status == Outcome::Fail ? "FAIL" : "N/A";
    failures += o.status == Outcome::Fail;
    std::printf("%-4s %-4s %s (%.1f s)\n", id.c_str(), status, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
