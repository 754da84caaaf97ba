#include "raseg/cli.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <functional>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "raseg/common.hpp"
#include "raseg/learn/features.hpp"
#include "raseg/metrics.hpp"

namespace raseg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

void LearnConfig::validate() const {
  if (!reducer.empty()) learn::parse_reducer(reducer);
  learn::parse_classifier(classifier);
  if (!(pca_variance > 0.0 && pca_variance <= 1.0)) throw ValidationError("learn.pca_variance must be in (0, 1]");
  if (lda_shrinkage < 0.0 || lda_shrinkage > 1.0) throw ValidationError("learn.lda_shrinkage must be in [0, 1]");
  if (folds < 2) throw ValidationError("learn.folds must be >= 2");
  if (!params.is_object()) throw ValidationError("learn.params must be an object");
}

learn::ReduceOptions LearnConfig::reduce_options() const {
  learn::ReduceOptions r;
  if (!reducer.empty()) r.kind = learn::parse_reducer(reducer);
  r.pca_variance = pca_variance;
  r.lda_shrinkage = lda_shrinkage;
  return r;
}

json to_json(const LearnConfig& c) {
  return {{"reducer", c.reducer.empty() ? json(nullptr) : json(c.reducer)},
          {"pca_variance", c.pca_variance},
          {"lda_shrinkage", c.lda_shrinkage},
          {"classifier", c.classifier},
          {"folds", c.folds},
          {"seed", c.seed},
          {"params", c.params},
          {"grid", c.grid}};
}

LearnConfig learn_config_from_json(const json& j, const LearnConfig& d) {
  LearnConfig c = d;
  try {
    if (j.contains("reducer")) {
      c.reducer = j["reducer"].is_null() ? std::string() : j["reducer"].get<std::string>();
      if (c.reducer == "none") c.reducer.clear();
    }
    c.pca_variance = j.value("pca_variance", c.pca_variance);
    c.lda_shrinkage = j.value("lda_shrinkage", c.lda_shrinkage);
    c.classifier = j.value("classifier", c.classifier);
    c.folds = j.value("folds", c.folds);
    c.seed = j.value("seed", c.seed);
    if (j.contains("params")) c.params = j["params"];
    if (j.contains("grid")) c.grid = j["grid"];
  } catch (const json::exception& e) {
    throw ValidationError(std::string("learn config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::desk() {
  RunConfig c;
  c.preprocess.target_shape = {32, 32, 32};
  c.model = model::ModelConfig::desk();
  return c;
}

void RunConfig::validate() const {
  if (cohort_size < 2) throw ValidationError("cohort_size must be >= 2");
  phantom.validate();
  preprocess.validate();
  model.validate();
  train.validate();
  learn.validate();
}

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  train.seed = s;
  train.augment.seed = s;
  learn.seed = s;
  if (learn.params.contains("seed")) learn.params["seed"] = s;
}

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"cohort_size", c.cohort_size},
          {"phantom", phantom::to_json(c.phantom)},
          {"preprocess", volio::to_json(c.preprocess)},
          {"model", model::to_json(c.model)},
          {"train", train::to_json(c.train)},
          {"learn", to_json(c.learn)}};
}

RunConfig run_config_from_json(const json& j, const RunConfig& defaults) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  RunConfig c = defaults;
  try {
    c.seed = j.value("seed", c.seed);
    c.cohort_size = j.value("cohort_size", c.cohort_size);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.train.seed = c.seed;
  c.train.augment.seed = c.seed;
  c.learn.seed = c.seed;
  if (j.contains("phantom")) c.phantom = phantom::spec_from_json(j["phantom"], c.phantom);
  if (j.contains("preprocess")) c.preprocess = volio::preprocess_config_from_json(j["preprocess"], c.preprocess);
  if (j.contains("model")) c.model = model::model_config_from_json(j["model"], c.model);
  if (j.contains("train")) c.train = train::train_config_from_json(j["train"], c.train);
  if (j.contains("learn")) c.learn = learn_config_from_json(j["learn"], c.learn);
  c.validate();
  return c;
}

std::string config_hash(const json& config) { return fnv1a_hex(config.dump()); }

// ---------------------------------------------------------------------------
// Preprocessed manifest

namespace {

json bbox_json(const volio::BBox3& b) { return {{"min", b.min_index}, {"max", b.max_index}}; }

}  // namespace

json to_json(const PreprocessedManifest& m) {
  json entries = json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"id", e.id},
                       {"label", e.label ? json(*e.label) : json(nullptr)},
                       {"image", e.image},
                       {"tumor_mask", e.tumor_mask},
                       {"bbox", e.bbox},
                       {"voi", bbox_json(e.voi)}});
  }
  return {{"kind", "preprocessed_cohort"}, {"preprocess", volio::to_json(m.config)}, {"entries", entries}};
}

PreprocessedManifest preprocessed_manifest_from_json(const json& j) {
  PreprocessedManifest m;
  try {
    if (j.value("kind", std::string()) != "preprocessed_cohort") {
      throw FormatError("not a preprocessed cohort manifest (run `preprocess` first)");
    }
    m.config = volio::preprocess_config_from_json(j.at("preprocess"));
    for (const auto& je : j.at("entries")) {
      PreprocessedEntry e;
      e.id = je.at("id").get<std::string>();
      if (je.contains("label") && !je["label"].is_null()) e.label = je["label"].get<int>();
      e.image = je.at("image").get<std::string>();
      e.tumor_mask = je.value("tumor_mask", std::string());
      e.bbox = je.value("bbox", std::string());
      if (je.contains("voi")) {
        e.voi.min_index = je["voi"].at("min").get<volio::Shape3>();
        e.voi.max_index = je["voi"].at("max").get<volio::Shape3>();
      }
      m.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("preprocessed manifest: ") + e.what());
  }
  return m;
}

PreprocessedManifest read_preprocessed_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("manifest not found: " + path.string());
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return preprocessed_manifest_from_json(j);
}

// ---------------------------------------------------------------------------
// Command plumbing

namespace {

/// Exclusive advisory lock on `<dir>/.lock` for the lifetime of a run.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) {
    const fs::path p = dir / ".lock";
    fd_ = ::open(p.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + p.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw IoError("output directory " + dir.string() + " is locked by another run");
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;
  ~DirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }

 private:
  int fd_ = -1;
};

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  int threads = 1;
  bool json_errors = false;
};

class Run {
 public:
  Run(std::string command, const GlobalOptions& g, std::ostream& out, std::ostream& err)
      : command_(std::move(command)), g_(g), out_(out), err_(err) {}

  /// Resolves the configuration, creates and locks the output directory and
  /// writes resolved_config.json.
  void start(const json& inputs, const std::function<void(RunConfig&)>& overrides = {}) {
    if (g_.threads < 1) throw ValidationError("--threads must be >= 1");
    RunConfig base = RunConfig::desk();
    if (!g_.config_path.empty()) {
      const fs::path p = g_.config_path;
      if (!fs::exists(p)) throw IoError("config file not found: " + p.string());
      json j;
      try {
        j = json::parse(read_text_file(p));
      } catch (const json::exception& e) {
        throw ValidationError(p.string() + ": " + e.what());
      }
      // A resolved_config.json from an earlier run nests the config.
      cfg_ = run_config_from_json(j.contains("config") && j.contains("command") ? j["config"] : j, base);
    } else {
      cfg_ = base;
    }
    if (overrides) overrides(cfg_);
    if (g_.seed) cfg_.apply_seed(*g_.seed);
    cfg_.validate();
    if (g_.out.empty()) throw ValidationError("--out is required");
    dir_ = g_.out;
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec || !fs::is_directory(dir_)) throw IoError("cannot create output directory " + dir_.string());
    lock_.emplace(dir_);
    config_json_ = to_json(cfg_);
    hash_ = config_hash(config_json_);
    json resolved{{"tool_version", kToolVersion}, {"command", command_}, {"inputs", inputs},
                  {"config", config_json_},       {"config_hash", hash_}};
    write_text_file(dir_ / "resolved_config.json", resolved.dump(2) + "\n");
  }

  json provenance() const { return {{"tool_version", kToolVersion}, {"config_hash", hash_}}; }

  void write_report(const std::string& name, json report) const {
    const json prov = provenance();
    for (const auto& [k, v] : prov.items()) report[k] = v;
    write_text_file(dir_ / name, report.dump(2) + "\n");
  }

  void log(const std::string& line) const {
    std::lock_guard lock(log_mu_);
    err_ << line << '\n';
  }

  const RunConfig& cfg() const { return cfg_; }
  const fs::path& dir() const { return dir_; }
  int threads() const { return g_.threads; }
  std::ostream& out() const { return out_; }

 private:
  std::string command_;
  const GlobalOptions& g_;
  std::ostream& out_;
  std::ostream& err_;
  RunConfig cfg_;
  fs::path dir_;
  std::optional<DirLock> lock_;
  json config_json_;
  std::string hash_;
  mutable std::mutex log_mu_;
};

fs::path resolve_relative(const fs::path& base_dir, const std::string& p) {
  const fs::path q = p;
  return q.is_absolute() ? q : base_dir / q;
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw IoError(std::string(what) + " not found: " + p.string());
}

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers and rethrows the
/// first failure.
template <typename Fn>
void parallel_for(int n, int threads, Fn fn) {
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  const int t = std::clamp(threads, 1, std::max(n, 1));
  if (t == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int i = 0; i < t; ++i) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
}

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// --- phantom ----------------------------------------------------------------

void cmd_phantom(Run& run, std::optional<int> n) {
  run.start({{"n", n ? json(*n) : json(nullptr)}});
  const int count = n.value_or(run.cfg().cohort_size);
  if (count < 2) throw ValidationError("phantom: cohort size must be >= 2");
  const auto manifest = phantom::generate_cohort(run.cfg().phantom, count, run.cfg().seed, run.dir(), run.threads());
  int positives = 0;
  for (const auto& e : manifest.entries) positives += e.label;
  json summary{{"samples", count}, {"label_1", positives}, {"label_0", count - positives},
               {"manifest", "manifest.json"}};
  run.write_report("phantom_report.json", summary);
  run.out() << summary.dump() << '\n';
}

// --- preprocess -------------------------------------------------------------

void cmd_preprocess(Run& run, const std::string& manifest_path) {
  require_file(manifest_path, "manifest");
  run.start({{"manifest", manifest_path}});
  const auto cohort = phantom::read_manifest(manifest_path);
  const fs::path src_dir = fs::path(manifest_path).parent_path();
  const auto& pc = run.cfg().preprocess;

  PreprocessedManifest out;
  out.config = pc;
  out.entries.resize(cohort.entries.size());
  parallel_for(static_cast<int>(cohort.entries.size()), run.threads(), [&](int i) {
    const auto& e = cohort.entries[static_cast<std::size_t>(i)];
    const fs::path image_path = resolve_relative(src_dir, e.image);
    require_file(volio::rvol_stem(image_path).string() + ".json", "image");
    const auto image = volio::read_volume(image_path);
    std::optional<volio::Volume> tumor;
    if (!e.tumor_mask.empty()) tumor = volio::read_volume(resolve_relative(src_dir, e.tumor_mask));
    const auto s = volio::preprocess(image, tumor, std::nullopt, pc);

    PreprocessedEntry& pe = out.entries[static_cast<std::size_t>(i)];
    pe.id = e.id;
    pe.label = e.label;
    pe.voi = s.voi;
    pe.image = e.id + "_image.json";
    volio::write_volume(s.image, run.dir() / pe.image);
    if (s.tumor_mask) {
      pe.tumor_mask = e.id + "_tumor.json";
      pe.bbox = e.id + "_bbox.json";
      volio::write_volume(*s.tumor_mask, run.dir() / pe.tumor_mask);
      volio::write_volume(*s.bbox, run.dir() / pe.bbox);
    }
    run.log("preprocessed " + e.id);
  });
  write_text_file(run.dir() / "preprocessed.json", to_json(out).dump(2) + "\n");
  json summary{{"samples", out.entries.size()}, {"manifest", "preprocessed.json"}};
  run.write_report("preprocess_report.json", summary);
  run.out() << summary.dump() << '\n';
}

std::vector<train::Sample> load_preprocessed(const fs::path& manifest_path, bool need_masks,
                                             PreprocessedManifest* manifest_out = nullptr) {
  const auto m = read_preprocessed_manifest(manifest_path);
  const fs::path dir = manifest_path.parent_path();
  std::vector<train::Sample> samples;
  for (const auto& e : m.entries) {
    train::Sample s;
    s.id = e.id;
    s.data.image = volio::read_volume(resolve_relative(dir, e.image));
    s.data.voi = e.voi;
    if (!e.tumor_mask.empty()) s.data.tumor_mask = volio::read_volume(resolve_relative(dir, e.tumor_mask));
    if (!e.bbox.empty()) s.data.bbox = volio::read_volume(resolve_relative(dir, e.bbox));
    if (need_masks && !s.data.tumor_mask) throw ValidationError("sample '" + e.id + "' has no tumor mask");
    samples.push_back(std::move(s));
  }
  if (manifest_out) *manifest_out = m;
  return samples;
}

// --- train ------------------------------------------------------------------

void cmd_train(Run& run, const std::string& manifest_path) {
  require_file(manifest_path, "manifest");
  run.start({{"manifest", manifest_path}});
  const auto samples = load_preprocessed(manifest_path, true);
  const auto cv = train::cross_validate(samples, run.cfg().model, run.cfg().train, run.threads(),
                                        [&](const std::string& l) { run.log(l); });
  train::write_cv_outputs(cv, run.dir(), run.provenance());
  json summary{{"folds", cv.folds.size()}, {"dsc_mean", cv.dsc.mean}, {"dsc_std", cv.dsc.std}};
  run.out() << summary.dump() << '\n';
}

// --- infer ------------------------------------------------------------------

void cmd_infer(Run& run, const std::string& checkpoint, const std::string& image_path, const std::string& bbox_path) {
  require_file(model::checkpoint_archive_path(checkpoint), "checkpoint");
  require_file(volio::rvol_stem(image_path).string() + ".json", "image");
  run.start({{"checkpoint", checkpoint}, {"image", image_path}, {"bbox", bbox_path}});
  const auto mdl = model::load_checkpoint(checkpoint);
  const auto image = volio::read_volume(image_path);
  std::optional<volio::Volume> bbox;
  if (!bbox_path.empty()) bbox = volio::read_volume(bbox_path);
  const auto mask = train::infer(mdl, image, bbox);
  volio::write_volume(mask, run.dir() / "mask.json");
  json summary{{"mask", "mask.json"}, {"tumor_voxels", mask.count_nonzero()}};
  run.write_report("infer_report.json", summary);
  run.out() << summary.dump() << '\n';
}

// --- extract-features -------------------------------------------------------

void cmd_extract(Run& run, const std::string& checkpoint, const std::string& manifest_path, std::optional<int> tap) {
  require_file(model::checkpoint_archive_path(checkpoint), "checkpoint");
  require_file(manifest_path, "manifest");
  run.start({{"checkpoint", checkpoint}, {"manifest", manifest_path}, {"tap_step", tap ? json(*tap) : json(nullptr)}});
  const auto mdl = model::load_checkpoint(checkpoint);
  const int step = tap.value_or(mdl.config.resolved_tap_step());
  PreprocessedManifest m;
  const auto samples = load_preprocessed(manifest_path, false, &m);
  std::vector<learn::FeatureVector> rows(samples.size());
  parallel_for(static_cast<int>(samples.size()), run.threads(), [&](int i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    const auto img = model::image_tensor(s.data.image, mdl.config.input_window);
    nd::Tensor5<float> box = s.data.bbox ? model::mask_tensor(*s.data.bbox) : nd::Tensor5<float>(img.shape());
    if (!s.data.bbox) box.fill(1.0f);
    const auto fm = model::extract_decoder_features(mdl, img, box, step);
    rows[static_cast<std::size_t>(i)] = learn::reduce_and_flatten(fm, s.id, m.entries[static_cast<std::size_t>(i)].label);
  });
  learn::write_features_csv(run.dir() / "features.csv", rows);
  json summary{{"samples", rows.size()},
               {"features", rows.empty() ? 0 : rows.front().values.size()},
               {"tap_step", step},
               {"features_csv", "features.csv"}};
  run.write_report("features_report.json", summary);
  run.out() << summary.dump() << '\n';
}

// --- classify ---------------------------------------------------------------

learn::ClassifierParams base_params(const LearnConfig& lc, learn::ClassifierKind kind) {
  learn::ClassifierParams defaults;
  defaults.seed = lc.seed;
  return learn::params_from_json(kind, lc.params, defaults);
}

void cmd_classify_fit(Run& run, const std::string& features_path) {
  const auto& lc = run.cfg().learn;
  const auto kind = learn::parse_classifier(lc.classifier);
  const auto table = learn::to_table(learn::read_features_csv(features_path));
  const auto y = table.y();
  const auto base = base_params(lc, kind);
  const auto grid = lc.grid.is_null() ? learn::default_grid(kind, base) : learn::grid_from_json(kind, lc.grid, base);
  const auto reduce = lc.reduce_options();
  const auto result = learn::grid_search(kind, grid, reduce, table.X, y, lc.folds, lc.seed, run.threads());

  const auto pipeline = learn::fit_pipeline(kind, result.best_point().params, reduce, table.X, y);
  nd::Archive ar;
  ar.metadata["format"] = "raseg-learn-model";
  ar.metadata["tool_version"] = kToolVersion;
  ar.metadata["features"] = table.X.cols();
  if (pipeline.reducer) learn::save_reducer(ar, *pipeline.reducer);
  learn::save_classifier(ar, pipeline.classifier);
  ar.save(run.dir() / "model.ndarc");

  json report = learn::report_json(result);
  report["reducer"] = lc.reducer.empty() ? json(nullptr) : json(lc.reducer);
  report["folds"] = lc.folds;
  report["samples"] = table.X.rows();
  run.write_report("classifier_report.json", report);
  run.out() << json{{"kind", report["kind"]},
                    {"params", report["params"]},
                    {"accuracy", report["accuracy"]},
                    {"f1_macro", report["f1_macro"]},
                    {"roc_auc", report["roc_auc"]}}
                   .dump()
            << '\n';
}

void cmd_classify_predict(Run& run, const std::string& features_path, const std::string& model_path) {
  const auto ar = nd::Archive::load(model_path);
  learn::Pipeline p;
  if (ar.metadata.contains("reducer")) p.reducer = learn::load_reducer(ar);
  p.classifier = learn::load_classifier(ar);
  const auto rows = learn::read_features_csv(features_path);
  const auto table = learn::to_table(rows);
  const auto proba = p.predict_proba(table.X);
  const auto pred = p.predict(table.X);

  std::string csv = "sample_id,label,score,pred\n";
  bool all_labeled = true;
  std::vector<int> y_true;
  std::vector<double> scores;
  for (std::size_t i = 0; i < table.ids.size(); ++i) {
    const auto& lab = table.labels[i];
    csv += table.ids[i] + "," + (lab ? std::to_string(*lab) : std::string()) + "," +
           fmt_g(proba(static_cast<Eigen::Index>(i), 1)) + "," + std::to_string(pred[i]) + "\n";
    if (lab) y_true.push_back(*lab);
    else all_labeled = false;
    scores.push_back(proba(static_cast<Eigen::Index>(i), 1));
  }
  write_text_file(run.dir() / "predictions.csv", csv);
  json report{{"kind", learn::to_string(p.classifier.kind)},
              {"params", learn::params_to_json(p.classifier.kind, p.classifier.params)},
              {"samples", table.ids.size()},
              {"predictions", "predictions.csv"}};
  if (all_labeled && !y_true.empty()) {
    report["accuracy"] = metrics::accuracy(y_true, pred);
    report["f1_macro"] = metrics::f1_macro(y_true, pred);
    const bool both = std::count(y_true.begin(), y_true.end(), 1) > 0 && std::count(y_true.begin(), y_true.end(), 0) > 0;
    report["roc_auc"] = both ? json(metrics::roc_auc(y_true, scores)) : json(nullptr);
  }
  run.write_report("prediction_report.json", report);
  run.out() << report.dump() << '\n';
}

void cmd_classify(Run& run, const std::string& features_path, const std::string& model_path,
                  const std::optional<std::string>& classifier, const std::optional<std::string>& reducer) {
  require_file(features_path, "features file");
  if (!model_path.empty()) require_file(model_path, "model archive");
  run.start({{"features", features_path},
             {"model", model_path.empty() ? json(nullptr) : json(model_path)},
             {"mode", model_path.empty() ? "fit" : "predict"}},
            [&](RunConfig& c) {
              if (classifier) c.learn.classifier = *classifier;
              if (reducer) c.learn.reducer = *reducer == "none" ? std::string() : *reducer;
            });
  if (model_path.empty()) {
    cmd_classify_fit(run, features_path);
  } else {
    cmd_classify_predict(run, features_path, model_path);
  }
}

// --- evaluate ---------------------------------------------------------------

struct PredictionRows {
  std::vector<int> y_true;
  std::vector<int> y_pred;
  std::vector<double> score;
};

PredictionRows read_predictions_csv(const fs::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  PredictionRows r;
  int lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (header.empty()) {
      header = cells;
      continue;
    }
    if (cells.size() != header.size()) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(header.size()) + " fields");
    }
    try {
      for (std::size_t k = 0; k < header.size(); ++k) {
        if (header[k] == "label") {
          if (cells[k].empty()) throw ValidationError("unlabeled row");
          r.y_true.push_back(std::stoi(cells[k]));
        } else if (header[k] == "pred") {
          r.y_pred.push_back(std::stoi(cells[k]));
        } else if (header[k] == "score") {
          r.score.push_back(std::stod(cells[k]));
        }
      }
    } catch (const std::logic_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (r.y_true.empty() || r.y_pred.size() != r.y_true.size()) {
    throw FormatError(path.string() + ": needs 'label' and 'pred' columns and at least one row");
  }
  return r;
}

void cmd_evaluate(Run& run, const std::string& pred, const std::string& gt, const std::string& predictions) {
  if (!predictions.empty()) {
    require_file(predictions, "predictions file");
    run.start({{"predictions", predictions}});
    const auto r = read_predictions_csv(predictions);
    json report{{"samples", r.y_true.size()},
                {"accuracy", metrics::accuracy(r.y_true, r.y_pred)},
                {"f1_macro", metrics::f1_macro(r.y_true, r.y_pred)}};
    if (r.score.size() == r.y_true.size()) report["roc_auc"] = metrics::roc_auc(r.y_true, r.score);
    run.write_report("evaluation_report.json", report);
    run.out() << report.dump() << '\n';
    return;
  }
  if (pred.empty() || gt.empty()) throw ValidationError("evaluate needs --pred and --gt masks, or --predictions");
  require_file(volio::rvol_stem(pred).string() + ".json", "predicted mask");
  require_file(volio::rvol_stem(gt).string() + ".json", "ground-truth mask");
  run.start({{"pred", pred}, {"gt", gt}});
  const auto p = volio::read_volume(pred);
  const auto g = volio::read_volume(gt);
  json report{{"dsc", metrics::dice_score(p, g)},
              {"pred_voxels", p.count_nonzero()},
              {"gt_voxels", g.count_nonzero()}};
  run.write_report("evaluation_report.json", report);
  run.out() << report.dump() << '\n';
}

void report_error(std::ostream& err, bool as_json, const char* kind, const std::string& message, int code) {
  if (as_json) {
    err << json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}.dump() << '\n';
  } else {
    err << "error: " << message << '\n';
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Radiogenomics segmentation and classification on synthetic CT phantoms", "raseg"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config_path, "JSON run configuration (or an earlier resolved_config.json)");
  app.add_option("--seed", g.seed, "Seed overriding every stochastic component");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--threads", g.threads, "Worker threads")->capture_default_str();
  app.add_flag("--json-errors", g.json_errors, "Emit errors as JSON on stderr");
  app.set_version_flag("--version", std::string(kToolVersion));

  auto* sc_phantom = app.add_subcommand("phantom", "Generate a synthetic cohort");
  std::optional<int> n;
  sc_phantom->add_option("--n", n, "Cohort size (default: config cohort_size)");

  auto* sc_pre = app.add_subcommand("preprocess", "Preprocess a cohort manifest");
  std::string manifest;
  sc_pre->add_option("--manifest", manifest, "Cohort manifest.json")->required();

  auto* sc_train = app.add_subcommand("train", "Cross-validated segmentation training");
  sc_train->add_option("--manifest", manifest, "Preprocessed manifest (preprocessed.json)")->required();

  auto* sc_infer = app.add_subcommand("infer", "Segment one preprocessed volume");
  std::string checkpoint, image, bbox;
  sc_infer->add_option("--checkpoint", checkpoint, "Checkpoint stem or .ndarc path")->required();
  sc_infer->add_option("--image", image, "Preprocessed image volume")->required();
  sc_infer->add_option("--bbox", bbox, "Bounding-box volume (default: whole volume)");

  auto* sc_feat = app.add_subcommand("extract-features", "Deep features for every sample of a manifest");
  std::optional<int> tap;
  sc_feat->add_option("--checkpoint", checkpoint, "Checkpoint stem or .ndarc path")->required();
  sc_feat->add_option("--manifest", manifest, "Preprocessed manifest")->required();
  sc_feat->add_option("--tap-step", tap, "Decoder step to tap (default: model config)");

  auto* sc_cls = app.add_subcommand("classify", "Grid-search and fit a classifier, or predict with a fitted one");
  std::string features, model_path;
  std::optional<std::string> classifier, reducer;
  sc_cls->add_option("--features", features, "Features CSV")->required();
  sc_cls->add_option("--model", model_path, "Fitted model.ndarc; switches to prediction");
  sc_cls->add_option("--classifier", classifier, "Classifier kind (qda, dt, rf, svc)");
  sc_cls->add_option("--reducer", reducer, "Reducer (pca, lda, none)");

  auto* sc_eval = app.add_subcommand("evaluate", "Score masks or predictions");
  std::string pred, gt, predictions;
  sc_eval->add_option("--pred", pred, "Predicted mask");
  sc_eval->add_option("--gt", gt, "Ground-truth mask");
  sc_eval->add_option("--predictions", predictions, "predictions.csv with label, score and pred columns");

  for (auto* sc : app.get_subcommands({})) sc->fallthrough();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, e2;
    const int code = app.exit(e, o, e2);
    out << o.str();
    if (code == 0) return 0;
    report_error(err, g.json_errors, "usage", e.what(), 1);
    return 1;
  }

  try {
    for (auto* sc : app.get_subcommands()) {
      Run r(sc->get_name(), g, out, err);
      if (sc == sc_phantom) {
        cmd_phantom(r, n);
      } else if (sc == sc_pre) {
        cmd_preprocess(r, manifest);
      } else if (sc == sc_train) {
        cmd_train(r, manifest);
      } else if (sc == sc_infer) {
        cmd_infer(r, checkpoint, image, bbox);
      } else if (sc == sc_feat) {
        cmd_extract(r, checkpoint, manifest, tap);
      } else if (sc == sc_cls) {
        cmd_classify(r, features, model_path, classifier, reducer);
      } else if (sc == sc_eval) {
        cmd_evaluate(r, pred, gt, predictions);
      }
    }
  } catch (const Error& e) {
    report_error(err, g.json_errors, e.kind(), e.what(), e.exit_code());
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    report_error(err, g.json_errors, "io", e.what(), 2);
    return 2;
  } catch (const nlohmann::json::exception& e) {
    report_error(err, g.json_errors, "validation", e.what(), 1);
    return 1;
  } catch (const std::bad_alloc&) {
    report_error(err, g.json_errors, "resource", "out of memory", 3);
    return 3;
  }
  return 0;
}

}  // namespace raseg::cli
