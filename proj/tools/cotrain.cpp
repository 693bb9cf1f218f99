// Experiment runner: dataset generation, training, evaluation, ablation
// grids and the diversity-only probe.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "cotrain/cotrain.hpp"

namespace fs = std::filesystem;
using Scalar = float;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct Overrides {
  std::string config_path;
  std::string out_dir;
  std::string method;
  long long seed = -1;
};

cotrain::ExperimentConfig load_config(const Overrides& ov) {
  auto cfg = cotrain::parse_config_file(ov.config_path);
  if (!ov.out_dir.empty()) cfg.out_dir = ov.out_dir;
  if (!ov.method.empty()) cfg.train.method = cotrain::parse_method(ov.method);
  if (ov.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(ov.seed);
  cfg.validate();
  return cfg;
}

void write_repro_block(const cotrain::ExperimentConfig& cfg, const std::string& dir) {
  std::ofstream os(fs::path(dir) / "repro.txt");
  os << "config_hash = " << cotrain::config_hash(cfg) << '\n'
     << "seed = " << cfg.train.seed << '\n'
     << "version = " << cotrain::kVersion << '\n';
  std::ofstream rc(fs::path(dir) / "config_resolved.ini");
  rc << cotrain::serialize_config(cfg);
}

int worker_count() {
  unsigned n = std::min(4u, std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("COTRAIN_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = static_cast<unsigned>(v);
  }
  return static_cast<int>(n);
}

cotrain::DatasetSplit<Scalar> load_split(const cotrain::ExperimentConfig& cfg,
                                         const std::string& split_file = "") {
  return cotrain::split_dataset<Scalar>(cfg.data_dir, cfg.labeled_ratio, cfg.synth.seed,
                                        split_file);
}

// One full training run into out_dir; returns the records.
std::vector<cotrain::EpochRecord> run_train_cell(const cotrain::ExperimentConfig& cfg,
                                                 const cotrain::DatasetSplit<Scalar>& data,
                                                 const std::string& out_dir) {
  fs::create_directories(out_dir);
  write_repro_block(cfg, out_dir);
  cotrain::Trainer<Scalar> trainer(cfg.train, &data);
  auto result = trainer.run(out_dir);
  cotrain::write_records_csv(out_dir + "/records.csv", result.records);
  std::ofstream timing(fs::path(out_dir) / "timing.csv");
  timing << "epoch,seconds\n";
  for (const auto& r : result.records)
    timing << r.epoch << ',' << cotrain::csv::fmt(r.seconds) << '\n';
  return result.records;
}

int cmd_gen_data(const cotrain::ExperimentConfig& cfg) {
  cotrain::generate_dataset<Scalar>(cfg.synth, cfg.data_dir);
  std::cout << "wrote " << cfg.synth.num_train << " train / " << cfg.synth.num_val
            << " val images to " << cfg.data_dir << '\n';
  return 0;
}

int cmd_train(const cotrain::ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  auto data = load_split(cfg, cfg.out_dir + "/split.txt");
  auto records = run_train_cell(cfg, data, cfg.out_dir);
  if (!records.empty()) {
    const auto& last = records.back();
    std::cout << "final epoch " << last.epoch << ": dsc_vote_mean "
              << cotrain::csv::fmt(last.dsc_vote_mean) << ", dsc_avg_mean "
              << cotrain::csv::fmt(last.dsc_avg_mean) << '\n';
  }
  return 0;
}

int cmd_evaluate(const cotrain::ExperimentConfig& cfg) {
  auto data = load_split(cfg);
  std::vector<cotrain::SegModel<Scalar>> models;
  for (int i = 0;; ++i) {
    const fs::path p = fs::path(cfg.out_dir) / ("model_" + std::to_string(i) + ".ckpt");
    if (!fs::exists(p)) break;
    models.push_back(cotrain::SegModel<Scalar>::load_checkpoint(p.string()));
  }
  if (models.empty()) {
    std::cerr << "error: no checkpoints under " << cfg.out_dir << '\n';
    return kExitRuntime;
  }
  const int nc = models[0].config().num_classes;
  auto rec = cotrain::evaluate_ensemble(models, data.val, nc);

  // per-class HD of the soft-vote masks
  std::vector<cotrain::SegMask> vote_masks;
  for (std::size_t v = 0; v < data.val.size(); ++v) {
    const auto& img = data.val.images[v];
    cotrain::Tensor<Scalar> batch(cotrain::Shape{1, 1, img.shape[1], img.shape[2]});
    batch.data = img.data;
    std::vector<cotrain::Tensor<Scalar>> preds;
    for (auto& m : models) preds.push_back(m.predict(batch));
    vote_masks.push_back(std::move(cotrain::soft_vote(preds)[0]));
  }
  auto vote_stats = cotrain::evaluate_masks(vote_masks, data.val.masks, nc);

  std::cout << "entity,class,dsc,hd\n";
  for (int c = 1; c < nc; ++c)
    std::cout << "avg,c" << c << ',' << cotrain::csv::fmt(rec.dsc_avg[c - 1]) << ",\n";
  std::cout << "avg,mean," << cotrain::csv::fmt(rec.dsc_avg_mean) << ",\n";
  for (int c = 1; c < nc; ++c)
    std::cout << "vote,c" << c << ',' << cotrain::csv::fmt(rec.dsc_vote[c - 1]) << ','
              << cotrain::csv::fmt(vote_stats.hd_per_class[c - 1]) << '\n';
  std::cout << "vote,mean," << cotrain::csv::fmt(rec.dsc_vote_mean) << ','
            << cotrain::csv::fmt(rec.hd_vote_mean) << '\n';
  return 0;
}

int cmd_ablate(const cotrain::ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  const auto data = load_split(cfg, cfg.out_dir + "/split.txt");

  // optional third grid dimension: number of views
  const bool sweep_views = !cfg.ablate_views.empty();
  std::vector<int> views = sweep_views ? cfg.ablate_views : std::vector<int>{cfg.train.views};

  struct Cell {
    cotrain::Method method;
    std::uint64_t seed;
    int views;
    std::string dir;
  };
  std::vector<Cell> cells;
  for (int v : views)
    for (auto m : cfg.ablate_methods)
      for (auto s : cfg.ablate_seeds) {
        std::string dir = cfg.out_dir + "/" + cotrain::method_name(m);
        if (sweep_views) dir += "_v" + std::to_string(v);
        dir += "_seed" + std::to_string(s);
        cells.push_back({m, s, v, dir});
      }

  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::mutex log_mutex;
  auto work = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size() || failed.load()) return;
      auto cell_cfg = cfg;
      cell_cfg.train.method = cells[i].method;
      cell_cfg.train.seed = cells[i].seed;
      cell_cfg.train.views = cells[i].views;
      try {
        auto records = run_train_cell(cell_cfg, data, cells[i].dir);
        std::lock_guard<std::mutex> lock(log_mutex);
        std::cout << cotrain::method_name(cells[i].method) << " views " << cells[i].views
                  << " seed " << cells[i].seed << ": dsc_vote_mean "
                  << cotrain::csv::fmt(records.back().dsc_vote_mean) << '\n';
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(log_mutex);
        std::cerr << "cell " << cells[i].dir << " failed: " << e.what() << '\n';
        failed.store(true);
      }
    }
  };
  std::vector<std::thread> pool;
  const int n_workers = std::min<int>(worker_count(), static_cast<int>(cells.size()));
  for (int i = 0; i < n_workers; ++i) pool.emplace_back(work);
  for (auto& th : pool) th.join();
  if (failed.load()) return kExitRuntime;

  for (int v : views) {
    std::vector<std::string> record_files;
    for (const auto& c : cells)
      if (c.views == v) record_files.push_back(c.dir + "/records.csv");
    auto summary = cotrain::summarize(record_files);
    const std::string tag = sweep_views ? "_v" + std::to_string(v) : "";
    cotrain::write_summary_csv(cfg.out_dir + "/summary" + tag + ".csv", summary);
    for (const auto& [method, curve] : summary.curves)
      cotrain::write_series(cfg.out_dir + "/curve_dsc_" + method + tag + ".dat", curve);
    std::cout << "method" << tag << ",runs,dsc_vote_mean,dsc_vote_std\n";
    for (const auto& row : summary.rows)
      std::cout << row.method << ',' << row.runs << ',' << cotrain::csv::fmt(row.dsc_vote_mean)
                << ',' << cotrain::csv::fmt(row.dsc_vote_std) << '\n';
  }
  cotrain::write_ramp_curve(cfg.out_dir + "/ramp_cot.dat", cfg.train.ramp_cot, cfg.train.epochs);
  cotrain::write_ramp_curve(cfg.out_dir + "/ramp_div.dat", cfg.train.ramp_div, cfg.train.epochs);
  return 0;
}

int cmd_probe(const cotrain::ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  write_repro_block(cfg, cfg.out_dir);
  auto data = load_split(cfg);

  // Reference: load if given, otherwise train one fully supervised model on
  // the complete labeled training set.
  std::unique_ptr<cotrain::SegModel<Scalar>> reference;
  if (!cfg.probe_reference_ckpt.empty()) {
    reference = std::make_unique<cotrain::SegModel<Scalar>>(
        cotrain::SegModel<Scalar>::load_checkpoint(cfg.probe_reference_ckpt));
  } else {
    auto ref_cfg = cfg;
    ref_cfg.labeled_ratio = 1.0;
    ref_cfg.train.method = cotrain::Method::kVatBaseline;  // supervised-only below
    ref_cfg.train.ramp_cot.lambda_max = 0;
    ref_cfg.train.ramp_div.lambda_max = 0;
    auto full = load_split(ref_cfg);
    cotrain::Trainer<Scalar> trainer(ref_cfg.train, &full);
    auto result = trainer.run();
    reference = std::make_unique<cotrain::SegModel<Scalar>>(std::move(result.models[0]));
    reference->save_checkpoint(cfg.out_dir + "/reference.ckpt");
  }

  const std::uint64_t ref_sum_before = reference->param_checksum();
  std::cout << "eps,final_trainee_dsc,reference_dsc,gap\n";
  std::ofstream summary(fs::path(cfg.out_dir) / "probe_summary.csv");
  summary << "eps,final_trainee_dsc,reference_dsc,gap\n";
  for (std::size_t i = 0; i < cfg.probe_eps.size(); ++i) {
    const double eps = cfg.probe_eps[i];
    cotrain::SegModel<Scalar> trainee(cfg.train.model,
                                      cotrain::model_seed<Scalar>(cfg.train.seed, 100 + i));
    auto res = cotrain::run_div_probe(cfg.train, data, *reference, trainee, eps,
                                      cfg.probe_epochs);
    const double gap = res.reference_dsc - res.trainee_dsc.back();
    const std::string tag = cotrain::csv::fmt(eps);
    cotrain::write_series(cfg.out_dir + "/probe_dsc_eps" + tag + ".dat", res.trainee_dsc);
    cotrain::write_series(cfg.out_dir + "/probe_ldiv_eps" + tag + ".dat", res.l_div);
    std::cout << tag << ',' << cotrain::csv::fmt(res.trainee_dsc.back()) << ','
              << cotrain::csv::fmt(res.reference_dsc) << ',' << cotrain::csv::fmt(gap) << '\n';
    summary << tag << ',' << cotrain::csv::fmt(res.trainee_dsc.back()) << ','
            << cotrain::csv::fmt(res.reference_dsc) << ',' << cotrain::csv::fmt(gap) << '\n';
  }
  if (reference->param_checksum() != ref_sum_before) {
    std::cerr << "error: reference model was mutated by the probe\n";
    return kExitRuntime;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep co-training for semi-supervised segmentation (desk scale)"};
  app.require_subcommand(1);

  Overrides ov;
  std::string subcommand;
  for (const char* name : {"gen-data", "train", "evaluate", "ablate", "probe"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", ov.config_path, "experiment config file")->required();
    sub->add_option("--out", ov.out_dir, "override output directory");
    sub->add_option("--seed", ov.seed, "override experiment seed");
    sub->add_option("--method", ov.method, "override training method");
    sub->callback([&subcommand, name]() { subcommand = name; });
  }

  CLI11_PARSE(app, argc, argv);

  std::string resolved_out;
  try {
    const auto cfg = load_config(ov);
    resolved_out = cfg.out_dir;
    if (subcommand == "gen-data") return cmd_gen_data(cfg);
    if (subcommand == "train") return cmd_train(cfg);
    if (subcommand == "evaluate") return cmd_evaluate(cfg);
    if (subcommand == "ablate") return cmd_ablate(cfg);
    if (subcommand == "probe") return cmd_probe(cfg);
    std::cerr << "unknown subcommand\n";
    return kExitConfig;
  } catch (const cotrain::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const cotrain::NanLossError& e) {
    std::cerr << "runtime failure: " << e.what() << "\n" << e.diagnostic() << '\n';
    if (!resolved_out.empty()) {
      std::error_code ec;
      fs::create_directories(resolved_out, ec);
      std::ofstream dump(fs::path(resolved_out) / "nan_abort.txt");
      dump << e.diagnostic() << '\n';
    }
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
