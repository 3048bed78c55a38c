#pragma once

// Command-line front end. Exit codes: 0 success, 1 operational failure,
// 2 usage error.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tscnn/gradcheck.hpp"
#include "tscnn/harness.hpp"
#include "tscnn/plot.hpp"

namespace tscnn {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Generates `volumes` phantoms; volume i uses seed phantom.seed + i.
inline std::vector<DatasetEntry> generate_dataset(const PhantomConfig& phantom, std::size_t volumes) {
  std::vector<DatasetEntry> out;
  for (std::size_t i = 0; i < volumes; ++i) {
    PhantomConfig c = phantom;
    c.seed = phantom.seed + i;
    auto ph = generate_phantom(c);
    char id[32];
    std::snprintf(id, sizeof id, "vol%03zu", i);
    out.push_back({id, std::move(ph.image), std::move(ph.mask)});
  }
  return out;
}

namespace cli_detail {

struct Args {
  std::string config, out, data, checkpoint, trace;
  std::size_t jobs = 1;
  std::size_t image_size = 0;
  std::optional<double> threshold;
  bool full = false;
  bool weight_by_beta = false;
  bool quiet = false;
  std::string title = "Training loss";
};

inline ExperimentConfig load_with_overrides(const Args& a) {
  ExperimentConfig c = load_config(a.config);
  if (!a.data.empty()) c.run.data = a.data;
  if (!a.out.empty()) c.run.out = a.out;
  return c;
}

inline void require(const std::string& value, const char* what) {
  if (value.empty()) throw ConfigError(std::string(what) + " is not set (config key or flag)");
}

}  // namespace cli_detail

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using cli_detail::Args;
  Args a;
  CLI::App app{"TS-CNN lesion segmentation: phantoms, training, evaluation, gradient checks", "tscnn"};
  app.require_subcommand(1, 1);

  auto* gen = app.add_subcommand("gen-data", "Generate phantom volumes and a manifest");
  gen->add_option("--config", a.config, "Config file")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", a.out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train on every volume of a dataset");
  train->add_option("--config", a.config, "Config file")->required()->check(CLI::ExistingFile);
  train->add_option("--data", a.data, "Dataset directory (overrides config)");
  train->add_option("--out", a.out, "Output directory (overrides config)");
  train->add_flag("--quiet", a.quiet, "No per-epoch progress");

  auto* cv = app.add_subcommand("cross-validate", "k-fold train and evaluate");
  cv->add_option("--config", a.config, "Config file")->required()->check(CLI::ExistingFile);
  cv->add_option("--data", a.data, "Dataset directory (overrides config)");
  cv->add_option("--out", a.out, "Output directory (overrides config)");
  cv->add_option("--jobs", a.jobs, "Folds run concurrently")->check(CLI::PositiveNumber);
  cv->add_flag("--quiet", a.quiet, "No per-epoch progress");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", a.checkpoint, "model.tsck")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", a.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", a.out, "Metrics CSV path")->required();
  ev->add_option("--image-size", a.image_size, "Preprocessed slice size (default: dataset width)");
  ev->add_option("--threshold", a.threshold, "Segmentation threshold (default 0.5)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite (f64)");
  gc->add_flag("--full", a.full, "Also check the end-to-end TS-CNN + SBFL composition");

  auto* pl = app.add_subcommand("plot-loss", "Render a trace CSV as SVG");
  pl->add_option("--trace", a.trace, "Trace CSV")->required()->check(CLI::ExistingFile);
  pl->add_option("--out", a.out, "SVG path")->required();
  pl->add_flag("--weight-by-beta", a.weight_by_beta, "Plot beta*fg and (1-beta)*bg (for SBFL traces)");
  pl->add_option("--title", a.title, "Plot title");

  if (argc <= 1) {
    err << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  }

  const ProgressFn progress = [&](const std::string& msg) {
    if (!a.quiet) err << msg << std::endl;
  };

  try {
    if (*gen) {
      const auto c = load_config(a.config);
      const auto entries = generate_dataset(c.phantom, c.volumes);
      write_dataset(a.out, entries);
      out << "wrote " << entries.size() << " volumes to " << a.out << "\n";
    } else if (*train) {
      const auto c = cli_detail::load_with_overrides(a);
      cli_detail::require(c.run.data, "data");
      cli_detail::require(c.run.out, "out");
      const auto prepared = prepare_dataset(load_dataset(c.run.data), c.run.image_size);
      const auto result = train_run(c.run, std::span<const PreparedVolume>(prepared), progress);
      save_run(c.run.out, result);
      out << "trained " << c.run.label() << " for " << result.trace.rows.size() << " steps; outputs in " << c.run.out
          << "\n";
    } else if (*cv) {
      const auto c = cli_detail::load_with_overrides(a);
      cli_detail::require(c.run.data, "data");
      cli_detail::require(c.run.out, "out");
      const auto prepared = prepare_dataset(load_dataset(c.run.data), c.run.image_size);
      const auto result = cross_validate(c.run, prepared, a.jobs, progress);
      out << result.summary_csv;
    } else if (*ev) {
      const auto entries = load_dataset(a.data);
      if (entries.empty()) throw Error("dataset '" + a.data + "' has no volumes");
      const std::size_t size = a.image_size ? a.image_size : entries.front().image.width;
      if (size % 2) throw ConfigError("image size " + std::to_string(size) + " is odd; patching needs even sizes");
      const double threshold = a.threshold.value_or(ModelConfig{}.seg_threshold);
      Model<float> model = model_from_checkpoint<float>(decode_checkpoint<float>(io::read_file(a.checkpoint)), size / 2,
                                                        threshold);
      const auto prepared = prepare_dataset(entries, size);
      const auto result = evaluate(model, std::span<const PreparedVolume>(prepared));
      io::write_file_atomic(a.out, metrics_csv(result.records));
      out << summary_csv_header() << summary_csv_row(to_string(model.arch().kind), result.summary);
    } else if (*gc) {
      auto results = run_op_gradchecks();
      if (a.full) {
        auto full = run_full_gradcheck();
        results.insert(results.end(), full.begin(), full.end());
      }
      out << format_gradcheck_table(results);
      const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.pass(); });
      if (!ok) {
        err << "error: gradient check failed\n";
        return kExitFailure;
      }
    } else if (*pl) {
      PlotOptions opt;
      opt.weight_by_beta = a.weight_by_beta;
      opt.title = a.title;
      io::write_file_atomic(a.out, render_loss_svg(parse_trace_csv(io::read_file(a.trace)), opt));
      out << "wrote " << a.out << "\n";
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace tscnn
