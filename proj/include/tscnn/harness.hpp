#pragma once

// Training, evaluation and cross-validation driver plus the CSV/config formats
// they read and write.

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "tscnn/data.hpp"
#include "tscnn/loss.hpp"
#include "tscnn/metrics.hpp"
#include "tscnn/model.hpp"

namespace tscnn {

enum class LossKind { Focal, Sbfl };

inline std::string to_string(LossKind k) { return k == LossKind::Focal ? "fl" : "sbfl"; }

struct RunConfig {
  ModelKind model = ModelKind::TsCnn;
  ModelConfig model_cfg;         // input_size is overwritten with image_size / 2
  std::size_t image_size = 256;  // preprocessing target before half-size patching
  LossKind loss = LossKind::Sbfl;
  FocalConfig focal;
  double lr = 2e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 50;
  std::size_t steps_per_epoch = 50;
  bool augment = false;
  std::size_t folds = 5;
  std::uint64_t seed = 1;
  double fg_fraction = 0.5;  // share of batch slots drawn from patches with foreground
  std::string data;
  std::string out;

  std::string label() const { return to_string(model) + "+" + to_string(loss); }

  void validate() const {
    if (batch_size == 0 || epochs == 0 || steps_per_epoch == 0) {
      throw ConfigError("batch_size, epochs and steps_per_epoch must be positive");
    }
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (folds < 2) throw ConfigError("folds must be >= 2");
    if (!(fg_fraction >= 0 && fg_fraction <= 1)) throw ConfigError("fg_fraction must lie in [0, 1]");
    if (image_size % 2) throw ConfigError("image_size must be even for half-size patching");
  }
};

/// A whole config file: run settings plus phantom generation settings.
struct ExperimentConfig {
  RunConfig run;
  PhantomConfig phantom;
  std::size_t volumes = 10;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class V>
V parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  V v{};
  is >> v;
  if (!is || !is.eof()) throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "off" || value == "no") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + value + "'");
}

}  // namespace detail

/// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  auto& r = c.run;
  auto& p = c.phantom;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto size = [](std::size_t& dst) -> Setter {
    return [&dst](const std::string& k, const std::string& v) { dst = detail::parse_number<std::size_t>(k, v); };
  };
  auto real = [](double& dst) -> Setter {
    return [&dst](const std::string& k, const std::string& v) { dst = detail::parse_number<double>(k, v); };
  };
  auto flag = [](bool& dst) -> Setter {
    return [&dst](const std::string& k, const std::string& v) { dst = detail::parse_bool(k, v); };
  };
  auto text_of = [](std::string& dst) -> Setter { return [&dst](const std::string&, const std::string& v) { dst = v; }; };

  const std::map<std::string, Setter> setters{
      {"model", [&](const std::string&, const std::string& v) { r.model = parse_model_kind(v); }},
      {"base_channels", size(r.model_cfg.base_channels)},
      {"num_scales", size(r.model_cfg.num_scales)},
      {"seg_threshold", real(r.model_cfg.seg_threshold)},
      {"image_size", size(r.image_size)},
      {"loss",
       [&](const std::string& k, const std::string& v) {
         if (v == "fl") r.loss = LossKind::Focal;
         else if (v == "sbfl") r.loss = LossKind::Sbfl;
         else throw ConfigError("config key '" + k + "': expected fl or sbfl, got '" + v + "'");
       }},
      {"alpha", real(r.focal.alpha)},
      {"gamma", real(r.focal.gamma)},
      {"epsilon", real(r.focal.epsilon)},
      {"sbfl_mask_by_prediction", flag(r.focal.sbfl_mask_by_prediction)},
      {"lr", real(r.lr)},
      {"batch_size", size(r.batch_size)},
      {"epochs", size(r.epochs)},
      {"steps_per_epoch", size(r.steps_per_epoch)},
      {"augment", flag(r.augment)},
      {"folds", size(r.folds)},
      {"seed",
       [&](const std::string& k, const std::string& v) {
         r.seed = detail::parse_number<std::uint64_t>(k, v);
         p.seed = r.seed;
       }},
      {"fg_fraction", real(r.fg_fraction)},
      {"data", text_of(r.data)},
      {"out", text_of(r.out)},
      {"volumes", size(c.volumes)},
      {"phantom_size", size(p.image_size)},
      {"slices", size(p.slices)},
      {"lesion_count_min", size(p.lesion_count_min)},
      {"lesion_count_max", size(p.lesion_count_max)},
      {"lesion_radius_min", real(p.lesion_radius_min)},
      {"lesion_radius_max", real(p.lesion_radius_max)},
      {"lesion_extent_min", size(p.lesion_extent_min)},
      {"lesion_extent_max", size(p.lesion_extent_max)},
      {"lesion_gain", real(p.lesion_gain)},
      {"distractor_count", size(p.distractor_count)},
      {"texture_smoothness", size(p.texture_smoothness)},
      {"texture_amplitude", real(p.texture_amplitude)},
      {"noise_sigma", real(p.noise_sigma)},
      {"spacing_mm", real(p.spacing_mm)},
  };

  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second(key, value);
  }
  r.validate();
  r.model_cfg.input_size = r.image_size / 2;
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

struct TraceRow {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  LossReport report;
};

struct TrainTrace {
  std::vector<TraceRow> rows;
  std::vector<double> epoch_means;  // mean total loss per epoch
  std::size_t pixels_per_step = 0;
};

inline std::string trace_csv(const TrainTrace& trace) {
  std::string out = "step,epoch,sum_bg,sum_fg,beta,total\n";
  for (const auto& row : trace.rows) {
    const auto& r = row.report;
    out += std::to_string(row.step) + ',' + std::to_string(row.epoch) + ',' + format_fixed6(r.sum_bg) + ',' +
           format_fixed6(r.sum_fg) + ',' + format_fixed6(r.beta) + ',' + format_fixed6(r.total) + '\n';
  }
  return out;
}

inline std::vector<TraceRow> parse_trace_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != "step,epoch,sum_bg,sum_fg,beta,total") {
    throw Error("trace CSV: missing or unexpected header");
  }
  std::vector<TraceRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::istringstream ls(line);
    TraceRow row;
    char c1, c2, c3, c4, c5;
    if (!(ls >> row.step >> c1 >> row.epoch >> c2 >> row.report.sum_bg >> c3 >> row.report.sum_fg >> c4 >>
          row.report.beta >> c5 >> row.report.total) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',' || c5 != ',') {
      throw Error("trace CSV: malformed line " + std::to_string(lineno));
    }
    row.report.step = row.step;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

template <class T>
TripletBatch<T> make_batch(const std::vector<const SliceTriplet*>& items) {
  const std::size_t b = items.size(), h = items.front()->height, w = items.front()->width;
  auto plane = [&](auto member) {
    std::vector<T> data(b * h * w);
    for (std::size_t i = 0; i < b; ++i) {
      const auto& src = items[i]->*member;
      std::transform(src.begin(), src.end(), data.begin() + i * h * w, [](float v) { return static_cast<T>(v); });
    }
    return Tensor<T>({b, 1, h, w}, std::move(data));
  };
  return {plane(&SliceTriplet::prev), plane(&SliceTriplet::cur), plane(&SliceTriplet::next),
          plane(&SliceTriplet::target)};
}

template <class T>
std::pair<Tensor<T>, LossReport> compute_loss(const RunConfig& cfg, const Tensor<T>& target, const Tensor<T>& prob) {
  return cfg.loss == LossKind::Sbfl ? sbfl(target, prob, cfg.focal) : focal_loss_report(target, prob, cfg.focal);
}

struct TrainResult {
  Model<float> model;
  TrainTrace trace;
};

using ProgressFn = std::function<void(const std::string&)>;

inline ModelConfig effective_model_config(const RunConfig& cfg) {
  ModelConfig m = cfg.model_cfg;
  m.input_size = cfg.image_size / 2;
  return m;
}

/// Trains a fresh model on half-size patches of the given volumes.
inline TrainResult train_run(const RunConfig& cfg, std::span<const PreparedVolume> train, const ProgressFn& progress = {}) {
  cfg.validate();
  if (train.empty()) throw InvalidArgument("train_run: empty training set");
  const ModelConfig mcfg = effective_model_config(cfg);
  mcfg.validate();
  for (const auto& v : train) {
    if (v.image.height != cfg.image_size || v.image.width != cfg.image_size) {
      throw ConfigError("volume '" + v.id + "' is " + std::to_string(v.image.height) + "x" +
                        std::to_string(v.image.width) + ", model expects " + std::to_string(cfg.image_size));
    }
  }

  std::vector<SliceTriplet> pool;
  for (const auto& v : train)
    for (const auto& t : make_triplets(v.image, v.mask))
      for (auto& p : patchify(t)) pool.push_back(std::move(p.triplet));
  std::vector<std::size_t> with_fg;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i].has_foreground()) with_fg.push_back(i);

  Model<float> model = build_model<float>(cfg.model, mcfg, cfg.seed);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> any_patch(0, pool.size() - 1);
  AdamOptions adam;
  adam.lr = cfg.lr;

  TrainTrace trace;
  trace.pixels_per_step = cfg.batch_size * mcfg.input_size * mcfg.input_size;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_sum = 0;
    for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s, ++step) {
      std::vector<SliceTriplet> picked;
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const bool want_fg = !with_fg.empty() && unit(rng) < cfg.fg_fraction;
        const std::size_t idx =
            want_fg ? with_fg[std::uniform_int_distribution<std::size_t>(0, with_fg.size() - 1)(rng)] : any_patch(rng);
        picked.push_back(cfg.augment ? augment(pool[idx], rng) : pool[idx]);
      }
      std::vector<const SliceTriplet*> items;
      for (const auto& p : picked) items.push_back(&p);
      auto batch = make_batch<float>(items);

      model.params().zero_grad();
      Tensor<float> prob = forward(model, batch, Mode::Train);
      auto [loss, report] = compute_loss(cfg, batch.target, prob);
      backward(loss);
      adam_step(model.params(), adam);

      report.step = step;
      trace.rows.push_back({step, epoch, report});
      epoch_sum += report.total;
    }
    trace.epoch_means.push_back(epoch_sum / static_cast<double>(cfg.steps_per_epoch));
    if (progress) {
      std::ostringstream os;
      os << "epoch " << epoch + 1 << "/" << cfg.epochs << " mean loss " << trace.epoch_means.back();
      progress(os.str());
    }
  }
  return {std::move(model), std::move(trace)};
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  std::vector<MetricsRecord> records;
  MetricsSummary summary;
};

inline std::string slice_id(const std::string& volume_id, std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_s%03zu", t);
  return volume_id + buf;
}

/// Thresholded full-slice predictions for every slice of a prepared volume.
template <class T>
std::vector<MaskSlice> segment_volume(Model<T>& model, const PreparedVolume& v) {
  const auto& cfg = model.config();
  if (v.image.height != 2 * cfg.input_size || v.image.width != 2 * cfg.input_size) {
    throw InvalidShape("evaluate: volume '" + v.id + "' is " + std::to_string(v.image.height) + "x" +
                       std::to_string(v.image.width) + ", model patches need " + std::to_string(2 * cfg.input_size));
  }
  NoGradGuard no_grad;
  std::vector<MaskSlice> out;
  for (const auto& t : make_triplets(v.image, v.mask)) {
    auto patches = patchify(t);
    std::vector<const SliceTriplet*> items;
    std::vector<PatchPosition> pos;
    for (const auto& p : patches) {
      items.push_back(&p.triplet);
      pos.push_back(p.pos);
    }
    Tensor<T> prob = forward(model, make_batch<T>(items), Mode::Eval);
    Tensor<T> mask = predict(prob, cfg.seg_threshold);
    const std::size_t ph = cfg.input_size, pw = cfg.input_size;
    std::vector<std::vector<float>> planes;
    for (std::size_t k = 0; k < patches.size(); ++k)
      planes.emplace_back(mask.values().begin() + k * ph * pw, mask.values().begin() + (k + 1) * ph * pw);
    auto full = stitch(planes, pos, ph, pw, t.height, t.width);
    MaskSlice m(t.height, t.width);
    for (std::size_t i = 0; i < full.size(); ++i) m.pixels[i] = full[i] > 0.5f ? 1 : 0;
    out.push_back(std::move(m));
  }
  return out;
}

template <class T>
EvalResult evaluate(Model<T>& model, std::span<const PreparedVolume> test) {
  if (test.empty()) throw InvalidArgument("evaluate: no test volumes");
  EvalResult r;
  for (const auto& v : test) {
    auto preds = segment_volume(model, v);
    for (std::size_t t = 0; t < preds.size(); ++t) {
      r.records.push_back(
          evaluate_slice(slice_id(v.id, t), preds[t], v.mask.slice(t), v.mask.spacing_y, v.mask.spacing_x));
    }
  }
  r.summary = aggregate(r.records);
  return r;
}

inline std::string summary_csv_header() { return "model,dsc,sensitivity,specificity,hausdorff_mm\n"; }

inline std::string summary_csv_row(const std::string& label, const MetricsSummary& s) {
  return label + ',' + format_fixed6(s.dsc) + ',' + format_fixed6(s.sensitivity) + ',' + format_fixed6(s.specificity) +
         ',' + format_fixed6(s.hausdorff_mm) + '\n';
}

/// Writes model.tsck, model.manifest, architecture.txt and trace.csv under `dir`.
inline void save_run(const std::filesystem::path& dir, const TrainResult& result) {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "model.tsck", result.model.params());
  io::write_file_atomic(dir / "model.manifest", manifest(result.model.params()));
  io::write_file_atomic(dir / "architecture.txt", result.model.arch().describe());
  io::write_file_atomic(dir / "trace.csv", trace_csv(result.trace));
}

inline std::vector<PreparedVolume> prepare_dataset(const std::vector<DatasetEntry>& entries, std::size_t image_size) {
  std::vector<PreparedVolume> out;
  for (const auto& e : entries) out.push_back(prepare_volume(e.id, e.image, e.mask, image_size));
  return out;
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

struct FoldResult {
  Fold fold;
  TrainTrace trace;
  EvalResult eval;
};

struct CrossValidationResult {
  std::vector<FoldResult> folds;
  MetricsSummary pooled;
  std::string summary_csv;
};

/// k-fold train + evaluate. Fold i trains with seed + i. Up to `jobs` folds run
/// concurrently; every fold is single-threaded, so results do not depend on jobs.
inline CrossValidationResult cross_validate(const RunConfig& cfg, const std::vector<PreparedVolume>& dataset,
                                            std::size_t jobs = 1, const ProgressFn& progress = {}) {
  cfg.validate();
  std::vector<std::string> ids;
  for (const auto& v : dataset) ids.push_back(v.id);
  const auto folds = kfold_split(ids, cfg.folds, cfg.seed);

  CrossValidationResult out;
  out.folds.resize(folds.size());
  std::vector<std::exception_ptr> errors(folds.size());
  std::mutex log_mutex;
  auto run_fold = [&](std::size_t f) {
    try {
      RunConfig fcfg = cfg;
      fcfg.seed = cfg.seed + f;
      auto pick = [&](const std::vector<std::string>& want) {
        std::vector<PreparedVolume> vs;
        for (const auto& id : want)
          for (const auto& v : dataset)
            if (v.id == id) vs.push_back(v);
        return vs;
      };
      const auto train = pick(folds[f].train), test = pick(folds[f].test);
      ProgressFn fold_progress;
      if (progress) {
        fold_progress = [&, f](const std::string& msg) {
          std::lock_guard lock(log_mutex);
          progress("fold " + std::to_string(f) + ": " + msg);
        };
      }
      TrainResult tr = train_run(fcfg, train, fold_progress);
      EvalResult ev = evaluate(tr.model, std::span<const PreparedVolume>(test));
      if (!cfg.out.empty()) {
        const auto dir = std::filesystem::path(cfg.out) / ("fold" + std::to_string(f));
        save_run(dir, tr);
        io::write_file_atomic(dir / "metrics.csv", metrics_csv(ev.records));
      }
      out.folds[f] = {folds[f], std::move(tr.trace), std::move(ev)};
    } catch (...) {
      errors[f] = std::current_exception();
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, folds.size()));
  if (workers == 1) {
    for (std::size_t f = 0; f < folds.size(); ++f) run_fold(f);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t f; (f = next++) < folds.size();) run_fold(f);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<MetricsRecord> pooled;
  out.summary_csv = summary_csv_header();
  for (std::size_t f = 0; f < out.folds.size(); ++f) {
    const auto& ev = out.folds[f].eval;
    pooled.insert(pooled.end(), ev.records.begin(), ev.records.end());
    out.summary_csv += summary_csv_row(cfg.label() + "/fold" + std::to_string(f), ev.summary);
  }
  out.pooled = aggregate(pooled);
  out.summary_csv += summary_csv_row(cfg.label() + "/pooled", out.pooled);
  if (!cfg.out.empty()) io::write_file_atomic(std::filesystem::path(cfg.out) / "summary.csv", out.summary_csv);
  return out;
}

}  // namespace tscnn
