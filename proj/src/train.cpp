#include "raseg/train.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <thread>

#include "raseg/metrics.hpp"
#include "raseg/ndiff/adam.hpp"

namespace raseg::train {

using nlohmann::json;
using nd::Graph;
using nd::Shape5;
using nd::Tensor5;
using nd::Var;

void LossConfig::validate() const {
  if (!(dice_weight >= 0.0) || !(ce_weight >= 0.0)) throw ValidationError("loss: weights must be >= 0");
  if (dice_weight == 0.0 && ce_weight == 0.0) throw ValidationError("loss: dice_weight and ce_weight are both zero");
  if (!(smooth > 0.0)) throw ValidationError("loss.smooth: must be > 0");
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ValidationError("train.lr: must be >= 0");
  if (batch_size < 1) throw ValidationError("train.batch_size: must be >= 1");
  if (max_epochs < 1) throw ValidationError("train.max_epochs: must be >= 1");
  if (patience < 1) throw ValidationError("train.patience: must be >= 1");
  if (folds < 2) throw ValidationError("train.folds: must be >= 2");
  if (max_steps < 0) throw ValidationError("train.max_steps: must be >= 0");
  if (stop_at_dsc && !(*stop_at_dsc > 0.0 && *stop_at_dsc <= 1.0)) {
    throw ValidationError("train.stop_at_dsc: must be in (0,1]");
  }
  augment.validate();
  loss.validate();
}

json to_json(const LossConfig& c) {
  return json{{"dice_weight", c.dice_weight}, {"ce_weight", c.ce_weight}, {"smooth", c.smooth}};
}

LossConfig loss_config_from_json(const json& j, const LossConfig& d) {
  LossConfig c = d;
  try {
    c.dice_weight = j.value("dice_weight", c.dice_weight);
    c.ce_weight = j.value("ce_weight", c.ce_weight);
    c.smooth = j.value("smooth", c.smooth);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("loss config: ") + e.what());
  }
  c.validate();
  return c;
}

json to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},
              {"batch_size", c.batch_size},
              {"max_epochs", c.max_epochs},
              {"patience", c.patience},
              {"folds", c.folds},
              {"seed", c.seed},
              {"max_steps", c.max_steps},
              {"stop_at_dsc", c.stop_at_dsc ? json(*c.stop_at_dsc) : json(nullptr)},
              {"augment", augment::to_json(c.augment)},
              {"loss", to_json(c.loss)}};
}

TrainConfig train_config_from_json(const json& j, const TrainConfig& d) {
  TrainConfig c = d;
  try {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.folds = j.value("folds", c.folds);
    c.seed = j.value("seed", c.seed);
    c.max_steps = j.value("max_steps", c.max_steps);
    if (j.contains("stop_at_dsc")) {
      c.stop_at_dsc = j["stop_at_dsc"].is_null() ? std::nullopt : std::optional<double>(j["stop_at_dsc"].get<double>());
    }
    if (j.contains("augment")) c.augment = augment::config_from_json(j["augment"], c.augment);
    if (j.contains("loss")) c.loss = loss_config_from_json(j["loss"], c.loss);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

json to_json(const FoldReport& r) {
  json hist = json::array();
  for (const auto& e : r.history) {
    hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_dsc", e.val_dsc}});
  }
  json j{{"fold_index", r.fold_index},   {"best_val_dsc", r.best_val_dsc}, {"epoch_of_best", r.epoch_of_best},
         {"epochs_run", r.epochs_run},   {"steps", r.steps},               {"aborted", r.aborted},
         {"history", hist},              {"train_ids", r.train_ids},       {"val_ids", r.val_ids}};
  if (!r.diagnostic.empty()) j["diagnostic"] = r.diagnostic;
  return j;
}

// ---------------------------------------------------------------------------
// Loss

namespace {

template <typename T>
void check_loss_inputs(const Shape5& ls, const Tensor5<T>& target) {
  const Shape5 ts = target.shape();
  if (ls.c != 2) throw DimensionError("dice_ce_loss: logits must have 2 channels, got " + ls.str());
  if (ts.n != ls.n || ts.c != 1 || ts.d != ls.d || ts.h != ls.h || ts.w != ls.w) {
    throw DimensionError("dice_ce_loss: target " + ts.str() + " does not match logits " + ls.str());
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] != T(0) && target[i] != T(1)) throw ValidationError("dice_ce_loss: target mask must be binary");
  }
}

struct LossParts {
  double value = 0.0;
  std::vector<double> p1;      // tumor probability per (n, voxel)
  std::vector<double> dice_g;  // d(loss)/d(p1) from the Dice term
};

template <typename T>
LossParts loss_forward(const Tensor5<T>& logits, const Tensor5<T>& target, const LossConfig& cfg, bool want_grad) {
  const Shape5 s = logits.shape();
  const std::size_t M = s.spatial();
  LossParts out;
  out.p1.resize(static_cast<std::size_t>(s.n) * M);
  double ce = 0.0, dice_sum = 0.0;
  if (want_grad) out.dice_g.resize(out.p1.size());
  for (int n = 0; n < s.n; ++n) {
    const T* z0 = logits.data() + logits.offset(n, 0, 0, 0, 0);
    const T* z1 = logits.data() + logits.offset(n, 1, 0, 0, 0);
    const T* t = target.data() + target.offset(n, 0, 0, 0, 0);
    double inter = 0.0, psum = 0.0, tsum = 0.0;
    for (std::size_t i = 0; i < M; ++i) {
      const double a = z0[i], b = z1[i];
      const double mx = std::max(a, b);
      const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
      const double p = std::exp(b - lse);
      out.p1[n * M + i] = p;
      ce += t[i] != T(0) ? lse - b : lse - a;
      inter += p * t[i];
      psum += p;
      tsum += t[i];
    }
    const double num = 2.0 * inter + cfg.smooth, den = psum + tsum + cfg.smooth;
    dice_sum += num / den;
    if (want_grad) {
      const double k = -cfg.dice_weight / s.n;
      for (std::size_t i = 0; i < M; ++i) out.dice_g[n * M + i] = k * (2.0 * t[i] * den - num) / (den * den);
    }
  }
  out.value = cfg.dice_weight * (1.0 - dice_sum / s.n) + cfg.ce_weight * ce / static_cast<double>(s.n * M);
  return out;
}

}  // namespace

template <typename T>
Var dice_ce_loss(Graph<T>& g, Var logits, const Tensor5<T>& target, const LossConfig& cfg) {
  cfg.validate();
  check_loss_inputs(g.shape(logits), target);
  LossParts parts = loss_forward(g.value(logits), target, cfg, true);
  Tensor5<T> y(Shape5{1, 1, 1, 1, 1}, static_cast<T>(parts.value));
  return g.record(nd::OpKind::Loss, {logits}, std::move(y),
                  [logits, target, cfg, parts = std::move(parts)](Graph<T>& gr, const Tensor5<T>& gout) {
                    const Shape5 s = gr.shape(logits);
                    const std::size_t M = s.spatial();
                    const double scale = gout[0];
                    const double ce_k = cfg.ce_weight / static_cast<double>(s.n * M);
                    Tensor5<T>& gl = gr.grad_buffer(logits);
                    for (int n = 0; n < s.n; ++n) {
                      T* g0 = gl.data() + gl.offset(n, 0, 0, 0, 0);
                      T* g1 = gl.data() + gl.offset(n, 1, 0, 0, 0);
                      const T* t = target.data() + target.offset(n, 0, 0, 0, 0);
                      for (std::size_t i = 0; i < M; ++i) {
                        const double p = parts.p1[n * M + i];
                        // Cross-entropy: softmax minus one-hot. Dice: chain through
                        // dp1/dz1 = p1 p0 and dp1/dz0 = -p1 p0.
                        const double dz1 = ce_k * (p - t[i]) + parts.dice_g[n * M + i] * p * (1.0 - p);
                        g1[i] += static_cast<T>(scale * dz1);
                        g0[i] -= static_cast<T>(scale * dz1);
                      }
                    }
                  });
}

template Var dice_ce_loss<float>(Graph<float>&, Var, const Tensor5<float>&, const LossConfig&);
template Var dice_ce_loss<double>(Graph<double>&, Var, const Tensor5<double>&, const LossConfig&);

double dice_ce_loss_value(const Tensor5<double>& logits, const Tensor5<double>& target, const LossConfig& cfg) {
  cfg.validate();
  check_loss_inputs(logits.shape(), target);
  return loss_forward(logits, target, cfg, false).value;
}

// ---------------------------------------------------------------------------
// Inference

volio::Volume argmax_mask(const Tensor5<float>& logits, const volio::Volume& like) {
  const Shape5 s = logits.shape();
  const auto vs = like.shape();
  if (s.n != 1 || s.d != vs[0] || s.h != vs[1] || s.w != vs[2]) {
    throw DimensionError("argmax_mask: logits " + s.str() + " do not match the reference volume");
  }
  volio::Volume out(vs, like.spacing(), like.origin());
  const std::size_t M = s.spatial();
  auto dst = out.data();
  for (std::size_t i = 0; i < M; ++i) {
    int best = 0;
    for (int c = 1; c < s.c; ++c) {
      if (logits[c * M + i] > logits[best * M + i]) best = c;
    }
    dst[i] = best == 1 ? 1.0f : 0.0f;
  }
  return out;
}

volio::Volume infer(const model::RaSegModel& m, const volio::Volume& image, const std::optional<volio::Volume>& bbox) {
  const auto s = image.shape();
  const Shape5 shape{1, 1, s[0], s[1], s[2]};
  try {
    model::check_input_shape(m.config, shape);
  } catch (const DimensionError& e) {
    throw ValidationError(std::string("infer: ") + e.what());
  }
  Tensor5<float> b(shape, 1.0f);
  if (bbox) {
    if (bbox->shape() != s) throw ValidationError("infer: bbox shape differs from the image");
    b = model::mask_tensor(*bbox);
  }
  const Tensor5<float> logits = model::forward(m, model::image_tensor(image, m.config.input_window), b);
  return argmax_mask(logits, image);
}

double evaluate_dsc(const model::RaSegModel& m, const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw ValidationError("evaluate_dsc: no samples");
  double acc = 0.0;
  for (const Sample* s : samples) {
    if (!s->data.tumor_mask) throw ValidationError("sample '" + s->id + "' has no tumor mask");
    acc += metrics::dice_score(infer(m, s->data.image, s->data.bbox), *s->data.tumor_mask);
  }
  return acc / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct Batch {
  Tensor5<float> image, bbox, target;
};

Batch assemble(const std::vector<volio::PreprocessedSample>& items, const model::ModelConfig& mc) {
  const auto s = items.front().image.shape();
  const Shape5 shape{static_cast<int>(items.size()), 1, s[0], s[1], s[2]};
  Batch b{Tensor5<float>(shape), Tensor5<float>(shape, 1.0f), Tensor5<float>(shape)};
  const std::size_t M = shape.spatial();
  for (std::size_t k = 0; k < items.size(); ++k) {
    const auto& it = items[k];
    if (it.image.shape() != s) throw DimensionError("training batch mixes volume shapes");
    const auto img = model::image_tensor(it.image, mc.input_window);
    std::copy(img.data(), img.data() + M, b.image.data() + k * M);
    std::copy(it.tumor_mask->data().begin(), it.tumor_mask->data().end(), b.target.data() + k * M);
    if (it.bbox) std::copy(it.bbox->data().begin(), it.bbox->data().end(), b.bbox.data() + k * M);
  }
  return b;
}

}  // namespace

FoldResult train_fold(const std::vector<const Sample*>& train_set, const std::vector<const Sample*>& val_set,
                      const model::ModelConfig& mc, const TrainConfig& cfg, int fold_index, const LogFn& log) {
  cfg.validate();
  mc.validate();
  if (train_set.empty() || val_set.empty()) throw ValidationError("train_fold: empty train or validation set");
  for (const Sample* s : train_set) {
    if (!s->data.tumor_mask) throw ValidationError("training sample '" + s->id + "' has no tumor mask");
  }

  const auto fold = static_cast<std::uint64_t>(fold_index);
  FoldResult r{model::build_model(mc, derive_seed(cfg.seed, 0x6d6f64656cULL, fold)), {}, {}};
  r.adam.config.lr = cfg.lr;
  model::RaSegModel cur = r.best;
  augment::AugmentConfig aug = cfg.augment;
  aug.seed = derive_seed(cfg.augment.seed, 0x617567ULL, fold);

  FoldReport& rep = r.report;
  rep.fold_index = fold_index;
  rep.best_val_dsc = -1.0;
  for (const Sample* s : train_set) rep.train_ids.push_back(s->id);
  for (const Sample* s : val_set) rep.val_ids.push_back(s->id);

  int since_best = 0;
  bool stop = false;
  for (int epoch = 1; epoch <= cfg.max_epochs && !stop; ++epoch) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(derive_seed(cfg.seed, 0x6f72646572ULL, fold, static_cast<std::uint64_t>(epoch))).shuffle(order);

    double loss_sum = 0.0;
    int loss_count = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      if (cfg.max_steps > 0 && rep.steps >= cfg.max_steps) break;
      std::vector<volio::PreprocessedSample> items;
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
        const std::size_t idx = order[k];
        const auto params = augment::sample_params(aug, idx, static_cast<std::uint64_t>(epoch));
        items.push_back(augment::apply(train_set[idx]->data, params, mc.input_window[0], aug.recompute_bbox));
      }
      const Batch b = assemble(items, mc);
      Graph<float> g(true, derive_seed(cfg.seed, 0x64726f70ULL, fold, static_cast<std::uint64_t>(rep.steps)));
      const Var x = g.input(b.image);
      const auto fw = model::forward_graph(g, mc, cur.params, x, b.bbox);
      const Var loss = dice_ce_loss(g, fw.logits, b.target, cfg.loss);
      const double lv = g.value(loss)[0];
      if (!std::isfinite(lv)) {
        rep.aborted = true;
        rep.diagnostic = "non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(rep.steps + 1);
        stop = true;
        break;
      }
      g.backward(loss);
      nd::zero_grads(cur.params);
      g.accumulate_param_grads(cur.params);
      try {
        nd::adam_step(cur.params, r.adam);
      } catch (const NumericalError& e) {
        rep.aborted = true;
        rep.diagnostic = e.what();
        stop = true;
        break;
      }
      ++rep.steps;
      loss_sum += lv;
      ++loss_count;
    }
    if (rep.aborted) break;
    if (loss_count == 0) break;

    const double dsc = evaluate_dsc(cur, val_set);
    rep.history.push_back({epoch, loss_sum / loss_count, dsc});
    rep.epochs_run = epoch;
    if (dsc > rep.best_val_dsc) {
      rep.best_val_dsc = dsc;
      rep.epoch_of_best = epoch;
      r.best.params = cur.params;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      stop = true;
    }
    if (cfg.stop_at_dsc && dsc >= *cfg.stop_at_dsc) stop = true;
    if (cfg.max_steps > 0 && rep.steps >= cfg.max_steps) stop = true;
    if (log) {
      char line[160];
      std::snprintf(line, sizeof line, "fold %d epoch %d: loss %.5f val_dsc %.4f", fold_index, epoch,
                    loss_sum / loss_count, dsc);
      log(line);
    }
  }
  if (rep.best_val_dsc < 0.0) rep.best_val_dsc = 0.0;
  for (auto& [name, p] : r.best.params) p.grad.fill(0.0f);
  return r;
}

std::vector<std::vector<std::string>> fold_partition(std::vector<std::string> ids, int folds, std::uint64_t seed) {
  if (folds < 2) throw ValidationError("folds must be >= 2");
  if (static_cast<int>(ids.size()) < folds) {
    throw ValidationError("dataset of " + std::to_string(ids.size()) + " samples is smaller than " +
                          std::to_string(folds) + " folds");
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ValidationError("sample ids must be unique");
  Rng(derive_seed(seed, 0x666f6c64ULL)).shuffle(ids);
  std::vector<std::vector<std::string>> out(folds);
  for (std::size_t i = 0; i < ids.size(); ++i) out[i % folds].push_back(ids[i]);
  for (auto& f : out) std::sort(f.begin(), f.end());
  return out;
}

MeanStd aggregate(std::span<const double> v) {
  if (v.empty()) throw ValidationError("aggregate: no values");
  MeanStd r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

CrossValidation cross_validate(const std::vector<Sample>& dataset, const model::ModelConfig& mc,
                               const TrainConfig& cfg, int threads, const LogFn& log) {
  cfg.validate();
  std::vector<std::string> ids;
  for (const auto& s : dataset) ids.push_back(s.id);
  const auto parts = fold_partition(ids, cfg.folds, cfg.seed);

  std::vector<const Sample*> sorted;
  for (const auto& s : dataset) sorted.push_back(&s);
  std::sort(sorted.begin(), sorted.end(), [](const Sample* a, const Sample* b) { return a->id < b->id; });

  CrossValidation cv;
  cv.folds.resize(cfg.folds);
  std::atomic<int> next{0};
  std::mutex log_mu;
  std::exception_ptr first_error;
  LogFn safe_log;
  if (log) {
    safe_log = [&](const std::string& line) {
      std::lock_guard<std::mutex> lock(log_mu);
      log(line);
    };
  }
  auto worker = [&]() {
    for (int k = next++; k < cfg.folds; k = next++) {
      try {
        std::vector<const Sample*> tr, va;
        for (const Sample* s : sorted) {
          const auto& v = parts[k];
          (std::binary_search(v.begin(), v.end(), s->id) ? va : tr).push_back(s);
        }
        cv.folds[k] = train_fold(tr, va, mc, cfg, k, safe_log);
      } catch (...) {
        std::lock_guard<std::mutex> lock(log_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  const int n_threads = std::max(1, std::min(threads, cfg.folds));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  std::vector<double> dscs;
  for (const auto& f : cv.folds) dscs.push_back(f.report.best_val_dsc);
  cv.dsc = aggregate(dscs);
  return cv;
}

void write_cv_outputs(const CrossValidation& cv, const std::filesystem::path& dir, const json& provenance) {
  std::string csv = "fold,dsc\n";
  json folds = json::array();
  json fold_dsc = json::array();
  for (const auto& f : cv.folds) {
    const int k = f.report.fold_index;
    json rep = to_json(f.report);
    for (const auto& [key, v] : provenance.items()) rep[key] = v;
    write_text_file(dir / ("fold_" + std::to_string(k) + ".json"), rep.dump(2) + "\n");
    model::save_checkpoint(f.best, dir / ("checkpoint_fold_" + std::to_string(k)), &f.adam,
                           json{{"fold_index", k}, {"best_val_dsc", f.report.best_val_dsc}});
    char line[64];
    std::snprintf(line, sizeof line, "%d,%.6f\n", k, f.report.best_val_dsc);
    csv += line;
    folds.push_back(rep);
    fold_dsc.push_back(f.report.best_val_dsc);
  }
  write_text_file(dir / "metrics.csv", csv);
  json summary{{"folds", folds.size()}, {"fold_dsc", fold_dsc}, {"dsc_mean", cv.dsc.mean}, {"dsc_std", cv.dsc.std}};
  for (const auto& [key, v] : provenance.items()) summary[key] = v;
  write_text_file(dir / "cv_summary.json", summary.dump(2) + "\n");
}

}  // namespace raseg::train
