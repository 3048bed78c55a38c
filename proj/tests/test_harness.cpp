#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "tscnn/cli.hpp"
#include "tscnn/harness.hpp"

using namespace tscnn;
namespace fs = std::filesystem;

namespace {

std::vector<PreparedVolume> phantoms(std::size_t count, std::size_t size, std::size_t slices, std::uint64_t seed) {
  PhantomConfig p;  // generated at 64 px; preprocessing resamples to `size`
  p.image_size = 64;
  p.slices = slices;
  p.seed = seed;
  return prepare_dataset(generate_dataset(p, count), size);
}

RunConfig tiny_run(LossKind loss = LossKind::Sbfl) {
  RunConfig c;
  c.model_cfg.base_channels = 4;
  c.model_cfg.num_scales = 3;
  c.image_size = 32;
  c.batch_size = 4;
  c.epochs = 1;
  c.steps_per_epoch = 3;
  c.loss = loss;
  c.folds = 2;
  return c;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(Config, ParsesKeysCommentsAndDerivedSize) {
  auto c = parse_config(
      "# experiment\n"
      "model = residual_unet\n"
      "loss=fl   # focal\n"
      "alpha = 0.8\n"
      "image_size = 64\n"
      "seed = 9\n"
      "augment = true\n"
      "\n"
      "volumes = 3\n");
  EXPECT_EQ(c.run.model, ModelKind::ResidualUnet);
  EXPECT_EQ(c.run.loss, LossKind::Focal);
  EXPECT_EQ(c.run.focal.alpha, 0.8);
  EXPECT_EQ(c.run.model_cfg.input_size, 32u);
  EXPECT_EQ(c.phantom.seed, 9u);
  EXPECT_TRUE(c.run.augment);
  EXPECT_EQ(c.volumes, 3u);
  EXPECT_EQ(c.run.lr, 2e-4);
  EXPECT_EQ(c.run.batch_size, 8u);
  EXPECT_EQ(c.run.epochs, 50u);
  EXPECT_EQ(c.run.steps_per_epoch, 50u);
  EXPECT_EQ(c.run.label(), "residual_unet+fl");
}

TEST(Config, FailsFast) {
  try {
    parse_config("lr = 1e-3\nlearning_rate = 2\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
  EXPECT_THROW(parse_config("batch_size = eight\n"), ConfigError);
  EXPECT_THROW(parse_config("loss = dice\n"), ConfigError);
  EXPECT_THROW(parse_config("no equals sign\n"), ConfigError);
  EXPECT_THROW(parse_config("image_size = 33\n"), ConfigError);
  EXPECT_THROW(parse_config("epochs = 0\n"), ConfigError);
}

TEST(Trace, CsvRoundTrip) {
  TrainTrace t;
  t.rows.push_back({0, 0, {1.5, 0.25, 0.7, 0.01, 0}});
  t.rows.push_back({1, 0, {1.25, 0.5, 0.6, 0.02, 1}});
  const std::string csv = trace_csv(t);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,epoch,sum_bg,sum_fg,beta,total");
  EXPECT_NE(csv.find("1,0,1.250000,0.500000,0.600000,0.020000\n"), std::string::npos);
  auto back = parse_trace_csv(csv);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].report.sum_fg, 0.5);
  EXPECT_THROW(parse_trace_csv("a,b\n"), Error);
  EXPECT_THROW(parse_trace_csv("step,epoch,sum_bg,sum_fg,beta,total\n1;2\n"), Error);
}

TEST(Train, TraceLengthAndEpochMeans) {
  auto data = phantoms(2, 32, 3, 1);
  auto cfg = tiny_run();
  cfg.epochs = 2;
  cfg.steps_per_epoch = 2;
  auto r = train_run(cfg, std::span<const PreparedVolume>(data));
  EXPECT_EQ(r.trace.rows.size(), 4u);
  ASSERT_EQ(r.trace.epoch_means.size(), 2u);
  EXPECT_NEAR(r.trace.epoch_means[1], (r.trace.rows[2].report.total + r.trace.rows[3].report.total) / 2, 1e-12);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r.trace.rows[i].step, i);
}

TEST(Train, DeterministicUnderSameSeed) {
  auto data = phantoms(2, 32, 3, 2);
  for (auto loss : {LossKind::Sbfl, LossKind::Focal}) {
    auto cfg = tiny_run(loss);
    cfg.augment = true;
    auto a = train_run(cfg, std::span<const PreparedVolume>(data));
    auto b = train_run(cfg, std::span<const PreparedVolume>(data));
    EXPECT_EQ(trace_csv(a.trace), trace_csv(b.trace));
    EXPECT_EQ(encode_checkpoint(a.model.params()), encode_checkpoint(b.model.params()));
  }
}

TEST(Train, GeometryMismatchIsConfigError) {
  auto data = phantoms(1, 32, 3, 3);
  auto cfg = tiny_run();
  cfg.image_size = 64;
  EXPECT_THROW(train_run(cfg, std::span<const PreparedVolume>(data)), ConfigError);
  EXPECT_THROW(train_run(tiny_run(), std::span<const PreparedVolume>()), InvalidArgument);
}

TEST(Train, SbflTraceConservation) {
  auto data = phantoms(2, 32, 3, 4);
  auto cfg = tiny_run();
  cfg.steps_per_epoch = 6;
  auto r = train_run(cfg, std::span<const PreparedVolume>(data));
  const double n = static_cast<double>(r.trace.pixels_per_step);
  EXPECT_EQ(n, 4.0 * 16 * 16);
  for (const auto& row : r.trace.rows) {
    const auto& q = row.report;
    EXPECT_NEAR(q.beta, balance_beta(q.sum_bg, q.sum_fg), 1e-15);
    const double want = q.beta * q.sum_fg / n + (1 - q.beta) * q.sum_bg / n;
    EXPECT_LE(std::abs(q.total - want), 1e-5 * std::abs(want)) << row.step;
  }
}

TEST(Train, FocalTraceRecordsAlphaWeightedSums) {
  auto data = phantoms(2, 32, 3, 4);
  auto r = train_run(tiny_run(LossKind::Focal), std::span<const PreparedVolume>(data));
  const double n = static_cast<double>(r.trace.pixels_per_step);
  for (const auto& row : r.trace.rows) {
    EXPECT_EQ(row.report.beta, 0.9);
    EXPECT_LE(std::abs(row.report.total - (row.report.sum_fg + row.report.sum_bg) / n), 1e-5 * row.report.total);
  }
}

TEST(Evaluate, ForcedEmptyPredictions) {
  auto data = phantoms(2, 32, 3, 5);
  auto m = build_tscnn<float>(effective_model_config(tiny_run()), 1);
  for (auto& w : m.params().get("head.weight").data()) w = 0;
  m.params().get("head.bias").data()[0] = -50;
  auto r = evaluate(m, std::span<const PreparedVolume>(data));
  ASSERT_EQ(r.records.size(), 6u);
  for (const auto& rec : r.records) {
    EXPECT_TRUE(rec.pred_empty);
    EXPECT_EQ(rec.sensitivity, rec.gt_empty ? 1.0 : 0.0);
  }
  EXPECT_EQ(r.records[4].slice_id, data[1].id + "_s001");
  const auto csv = csv_rows(metrics_csv(r.records));
  EXPECT_EQ(csv.size(), r.records.size() + 2);  // header + slices + MEDIAN
  EXPECT_EQ(csv.back()[0], "MEDIAN");
}

TEST(Evaluate, GeometryMismatchIsInvalidShape) {
  auto data = phantoms(1, 64, 3, 6);
  auto m = build_tscnn<float>(effective_model_config(tiny_run()), 1);
  EXPECT_THROW(evaluate(m, std::span<const PreparedVolume>(data)), InvalidShape);
}

TEST(Summary, RowFormat) {
  EXPECT_EQ(summary_csv_header(), "model,dsc,sensitivity,specificity,hausdorff_mm\n");
  EXPECT_EQ(summary_csv_row("tscnn+sbfl", {0.5, 0.25, 1, 3}), "tscnn+sbfl,0.500000,0.250000,1.000000,3.000000\n");
}

TEST(CrossValidate, TwoFoldsOnFourVolumes) {
  auto data = phantoms(4, 32, 3, 7);
  auto cfg = tiny_run();
  const fs::path out = fs::temp_directory_path() / ("tscnn_cv_" + std::to_string(::getpid()));
  fs::remove_all(out);
  cfg.out = out.string();
  auto r = cross_validate(cfg, data, 2);
  ASSERT_EQ(r.folds.size(), 2u);
  const auto summary = csv_rows(r.summary_csv);
  ASSERT_EQ(summary.size(), 4u);
  EXPECT_EQ(summary[1][0], "tscnn+sbfl/fold0");
  EXPECT_EQ(summary[3][0], "tscnn+sbfl/pooled");
  EXPECT_EQ(io::read_file(out / "summary.csv"), r.summary_csv);

  // Each volume is tested in exactly one fold.
  std::multiset<std::string> tested;
  for (const auto& f : r.folds)
    for (const auto& id : f.fold.test) tested.insert(id);
  EXPECT_EQ(tested, (std::multiset<std::string>{"vol000", "vol001", "vol002", "vol003"}));

  // Pooled medians recomputed from the per-fold CSV files.
  std::vector<std::vector<double>> cols(4);
  std::set<std::string> volumes_seen;
  for (int f = 0; f < 2; ++f) {
    const fs::path dir = out / ("fold" + std::to_string(f));
    for (const char* file : {"model.tsck", "model.manifest", "architecture.txt", "trace.csv"})
      EXPECT_TRUE(fs::exists(dir / file)) << file;
    auto rows = csv_rows(io::read_file(dir / "metrics.csv"));
    for (std::size_t i = 1; i + 1 < rows.size(); ++i) {
      volumes_seen.insert(rows[i][0].substr(0, 6));
      for (int k = 0; k < 4; ++k) cols[k].push_back(std::stod(rows[i][k + 1]));
    }
  }
  EXPECT_EQ(volumes_seen.size(), 4u);
  for (int k = 0; k < 4; ++k) {
    std::sort(cols[k].begin(), cols[k].end());
    const std::size_t n = cols[k].size();
    const double med = n % 2 ? cols[k][n / 2] : (cols[k][n / 2 - 1] + cols[k][n / 2]) / 2;
    EXPECT_NEAR(std::stod(summary[3][k + 1]), med, 1.01e-6) << k;
  }

  // Folds are independent of the worker count.
  cfg.out.clear();
  auto serial = cross_validate(cfg, data, 1);
  EXPECT_EQ(serial.summary_csv, r.summary_csv);
  fs::remove_all(out);
}

// Desk-scale smoke run: CC=8 on 64x64 phantoms, 20 epochs x 20 steps.
TEST(Smoke, LossDescendsAndBeatsEmptyBaseline) {
  auto data = phantoms(8, 64, 8, 11);
  RunConfig cfg;
  cfg.model_cfg.base_channels = 8;
  cfg.image_size = 64;
  cfg.epochs = 20;
  cfg.steps_per_epoch = 20;
  auto r = train_run(cfg, std::span<const PreparedVolume>(data));
  EXPECT_LT(r.trace.epoch_means.back(), r.trace.epoch_means.front());

  auto ev = evaluate(r.model, std::span<const PreparedVolume>(data));
  // Paired comparison on slices with lesions; the empty prediction scores 0 on each.
  std::vector<double> model_dsc, empty_dsc;
  for (const auto& rec : ev.records) {
    if (rec.gt_empty) continue;
    model_dsc.push_back(rec.dsc);
    empty_dsc.push_back(0.0);
  }
  ASSERT_FALSE(model_dsc.empty());
  EXPECT_GT(median(model_dsc), median(empty_dsc));
}
