#pragma once

// Command-line front end: synth, train, eval, infer, dump-features.
//
// Options come from (highest precedence first) command-line flags, the file
// given with --config (INI; keys of a command go in a section named after
// it, e.g. [train]), and built-in defaults. Every command writes the fully
// resolved option set to <out>/resolved_config.ini; passing that file back
// with --config repeats the run.
//
// Exit codes: 0 success, 2 invalid configuration, 3 data / file error,
// 4 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sensor3d/checkpoint.hpp"
#include "sensor3d/dataset.hpp"
#include "sensor3d/evaluation.hpp"
#include "sensor3d/png.hpp"
#include "sensor3d/synth.hpp"
#include "sensor3d/training.hpp"

namespace sensor3d::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kInvalidConfig = 2, kDataError = 3, kNumericFailure = 4 };

struct SynthOptions {
  std::string out;
  std::size_t count = 4;
  std::vector<std::size_t> dims{24, 64, 64};
  std::vector<double> spacing{2.5, 1.0, 1.0};
  std::uint64_t seed = 7;
};

struct TrainOptions {
  std::string data;
  std::string out;
  std::string variant = "full";
  std::size_t o = 3;
  double d_mm = 5.0;
  std::size_t capacity_div = 1;
  std::size_t base_features = 64;
  std::size_t resolution = 128;
  double window_lo = -100, window_hi = 400;
  double lr = 5e-5, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t patience = 100;
  double min_delta = 1e-5;
  std::size_t batch_size = 4;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 1;
  std::size_t folds = 2;
  std::size_t test_fold = 0;
  std::vector<std::string> fold;  // explicit folds, comma-separated scan ids each
  double validation_fraction = 0.1;
  bool quiet = false;
};

struct EvalOptions {
  std::string data;
  std::string out;
  std::vector<std::string> checkpoints;
  std::vector<std::string> names;
  std::vector<double> d_mm{5.0};
  std::vector<std::string> scans;
  bool oracle = false;
  double window_lo = -100, window_hi = 400;
};

struct InferOptions {
  std::string checkpoint;
  std::string volume;
  std::string mask;
  std::string out;
  double d_mm = 5.0;
  double window_lo = -100, window_hi = 400;
  bool png = true;
};

struct DumpOptions {
  std::string checkpoint;
  std::string volume;
  std::string out;
  std::string layer = "up_3";
  long slice = -1;  // -1: middle slice
  bool repeat_slice = false;
  double d_mm = 5.0;
  double window_lo = -100, window_hi = 400;
};

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

inline PrepOptions prep_options(std::size_t resolution, double lo, double hi) {
  PrepOptions p;
  p.resolution = resolution;
  p.window = {float(lo), float(hi)};
  return p;
}

inline std::vector<std::string> split_ids(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string id;
  while (std::getline(ss, id, ','))
    if (!id.empty()) out.push_back(id);
  return out;
}

inline void warn_consecutive(const std::vector<PreparedScan>& scans, double d_mm, std::ostream& err) {
  for (const auto& s : scans)
    if (d_mm < s.spacing.thickness) {
      err << "warning: context distance " << d_mm << " mm is below the slice thickness " << s.spacing.thickness
          << " mm of " << s.id << "; contexts use direct-consecutive slices\n";
      return;
    }
}

inline int cmd_synth(const SynthOptions& o, std::ostream& out) {
  if (o.dims.size() != 3 || o.spacing.size() != 3) throw InvalidArgument("--dims and --spacing need three values");
  SynthConfig sc;
  sc.depth = o.dims[0];
  sc.height = o.dims[1];
  sc.width = o.dims[2];
  sc.spacing = {o.spacing[0], o.spacing[1], o.spacing[2]};
  ensure_dir(o.out);
  auto pairs = synth_generate(o.count, sc, o.seed);
  std::vector<ScanRecord> records;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scan_%03zu", i);
    ScanRecord r{id, std::string(id) + ".vol", std::string(id) + ".mask", pairs[i].first.voxels.shape(), sc.spacing};
    write_volume((fs::path(o.out) / r.volume).string(), pairs[i].first);
    write_mask((fs::path(o.out) / r.mask).string(), pairs[i].second, sc.spacing);
    records.push_back(r);
  }
  write_manifest(fs::path(o.out) / "manifest.json", records);
  out << "wrote " << records.size() << " volume/mask pairs to " << o.out << "\n";
  return kOk;
}

inline int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  NetworkConfig nc;
  nc.sequence_length = o.o;
  nc.resolution = o.resolution;
  nc.base_features = o.base_features;
  nc.capacity_divisor = o.capacity_div;
  nc.variant = parse_variant(o.variant);
  nc = nc.normalized();
  nc.validate();
  if (nc.variant == Variant::SingleSlice2d && o.o != 1) out << "single-slice-2d variant: using o=1\n";
  TrainConfig tc;
  tc.learning_rate = o.lr;
  tc.beta1 = o.beta1;
  tc.beta2 = o.beta2;
  tc.epsilon = o.adam_eps;
  tc.patience = o.patience;
  tc.min_delta = o.min_delta;
  tc.batch_size = o.batch_size;
  tc.max_epochs = o.max_epochs;
  tc.seed = o.seed;
  tc.validate();

  Manifest m = read_manifest(o.data);
  SplitSpec spec;
  spec.folds = o.folds;
  spec.test_fold = o.test_fold;
  spec.validation_fraction = o.validation_fraction;
  for (const auto& f : o.fold)
    if (!f.empty()) spec.explicit_folds.push_back(split_ids(f));
  DataSplit split = split_by_scan(m.ids(), spec, o.seed);
  if (split.train.empty()) throw InvalidArgument("split leaves no training scans");

  ensure_dir(o.out);
  nlohmann::ordered_json sj;
  sj["train"] = split.train;
  sj["validation"] = split.validation;
  sj["test"] = split.test;
  write_text(fs::path(o.out) / "split.json", sj.dump(2) + "\n");

  const PrepOptions prep = prep_options(nc.resolution, o.window_lo, o.window_hi);
  auto load = [&](const std::vector<std::string>& ids) {
    std::vector<PreparedScan> scans;
    for (const auto& id : ids) scans.push_back(load_prepared(m, id, prep));
    return scans;
  };
  std::vector<PreparedScan> train_scans = load(split.train), val_scans = load(split.validation);
  warn_consecutive(train_scans, o.d_mm, err);
  std::vector<TrainingSample<float>> train, val;
  for (const auto& s : train_scans)
    for (auto& x : make_samples<float>(s, nc.sequence_length, o.d_mm)) train.push_back(std::move(x));
  for (const auto& s : val_scans)
    for (auto& x : make_samples<float>(s, nc.sequence_length, o.d_mm)) val.push_back(std::move(x));
  if (train.empty()) throw InvalidArgument("no training contexts: organ range empty or contexts leave the volume");

  Network<float> net = build<float>(nc);
  init(net, o.seed);
  const fs::path ckpt = fs::path(o.out) / "checkpoint.ckpt";
  std::vector<EpochRecord> history;
  FitCallbacks<float> cb;
  cb.on_epoch = [&](const EpochRecord& r) {
    history.push_back(r);
    if (!o.quiet) out << "epoch " << r.epoch << " train_loss " << r.train_loss << " val_loss " << r.val_loss << "\n";
  };
  cb.on_improvement = [&](const Network<float>& n, const EpochRecord&) { save_checkpoint(n, ckpt.string()); };
  try {
    auto result = fit(net, train, val, tc, cb);
    write_text(fs::path(o.out) / "history.csv", history_csv(result.history));
    out << "best epoch " << result.best_epoch << " loss " << result.best_loss << "; checkpoint " << ckpt.string() << "\n";
  } catch (const NumericFailure&) {
    write_text(fs::path(o.out) / "history.csv", history_csv(history));
    throw;
  }
  return kOk;
}

// Option lists re-read from a snapshot hold "" when they were empty.
inline std::vector<std::string> non_empty(std::vector<std::string> v) {
  v.erase(std::remove(v.begin(), v.end(), std::string()), v.end());
  return v;
}

inline int cmd_eval(EvalOptions o, std::ostream& out) {
  o.checkpoints = non_empty(o.checkpoints);
  o.names = non_empty(o.names);
  o.scans = non_empty(o.scans);
  if (o.checkpoints.empty() && !o.oracle) throw InvalidArgument("eval needs at least one --checkpoint or --oracle");
  if (!o.names.empty() && o.names.size() != o.checkpoints.size() &&
      o.names.size() != o.checkpoints.size() + (o.oracle ? 1 : 0))
    throw InvalidArgument("--name must be given once per checkpoint (plus optionally once for --oracle)");
  if (o.d_mm.size() != 1 && o.d_mm.size() != o.checkpoints.size())
    throw InvalidArgument("--d-mm takes one value or one per checkpoint");
  Manifest m = read_manifest(o.data);
  std::vector<std::string> ids = o.scans.empty() ? m.ids() : o.scans;
  std::vector<EvalReport> reports;
  std::map<std::size_t, std::vector<PreparedScan>> prepared;
  auto scans_at = [&](std::size_t r) -> const std::vector<PreparedScan>& {
    auto it = prepared.find(r);
    if (it != prepared.end()) return it->second;
    std::vector<PreparedScan> v;
    for (const auto& id : ids) v.push_back(load_prepared(m, id, prep_options(r, o.window_lo, o.window_hi)));
    return prepared[r] = std::move(v);
  };
  std::size_t name_at = 0;
  auto next_name = [&](const std::string& fallback) { return name_at < o.names.size() ? o.names[name_at++] : fallback; };

  for (std::size_t c = 0; c < o.checkpoints.size(); ++c) {
    Network<float> net = load_checkpoint<float>(o.checkpoints[c]);
    const double d = o.d_mm.size() == 1 ? o.d_mm[0] : o.d_mm[c];
    EvalReport rep{next_name(fs::path(o.checkpoints[c]).parent_path().filename().string() + "#" + std::to_string(c)), {}};
    for (const auto& s : scans_at(net.config.resolution)) rep.rows.push_back(evaluate_volume(net, s, d));
    reports.push_back(std::move(rep));
  }
  if (o.oracle) {
    EvalReport rep{next_name("oracle"), {}};
    for (const auto& id : ids) {
      auto [vol, mask] = load_volume(m.volume_path(m.find(id)), m.mask_path(m.find(id)));
      if (!mask) throw InvalidArgument("scan " + id + " has no mask");
      rep.rows.push_back(evaluate_prediction(id, mask->labels, *mask));
    }
    reports.push_back(std::move(rep));
  }
  ensure_dir(o.out);
  write_text(fs::path(o.out) / "eval.csv", report_csv(reports));
  const std::string table = report_table(reports);
  write_text(fs::path(o.out) / "eval_table.txt", table);
  out << table;
  if (reports.size() >= 2) {
    std::vector<std::string> names;
    for (const auto& r : reports) names.push_back(r.model);
    for (Regime g : {Regime::OrganArea, Regime::FullVolume}) {
      std::vector<std::vector<double>> dice;
      for (const auto& r : reports) dice.push_back(r.dice(g));
      auto p = significance_matrix(dice);
      const std::string txt = format_significance(names, p);
      write_text(fs::path(o.out) / ("significance_" + to_string(g) + ".txt"), txt);
      write_text(fs::path(o.out) / ("significance_" + to_string(g) + ".csv"), significance_csv(names, p));
      out << "\nWilcoxon signed-rank p-values, Dice, " << to_string(g) << "\n" << txt;
    }
  }
  return kOk;
}

inline int cmd_infer(const InferOptions& o, std::ostream& out) {
  Network<float> net = load_checkpoint<float>(o.checkpoint);
  auto [vol, mask] = load_volume(o.volume, o.mask);
  PreparedScan scan = prepare_scan(fs::path(o.volume).stem().string(), vol, mask,
                                   prep_options(net.config.resolution, o.window_lo, o.window_hi));
  auto prob = predict_volume(net, scan, o.d_mm);
  Tensor<std::uint8_t> pred = native_prediction(prob, vol.height(), vol.width());
  ensure_dir(o.out);
  write_mask((fs::path(o.out) / "prediction.mask").string(), MaskVolume{pred}, vol.spacing);
  if (o.png) {
    const fs::path dir = fs::path(o.out) / "overlays";
    ensure_dir(dir.string());
    const std::size_t plane = vol.height() * vol.width();
    for (std::size_t k = 0; k < vol.depth(); ++k) {
      Tensor<std::uint8_t> p({vol.height(), vol.width()}, std::vector<std::uint8_t>(pred.data() + k * plane, pred.data() + (k + 1) * plane));
      Tensor<std::uint8_t> gt;
      if (mask) gt = mask->slice(k);
      char name[32];
      std::snprintf(name, sizeof name, "slice_%03zu.png", k);
      write_png((dir / name).string(), overlay(vol.slice(k), float(o.window_lo), float(o.window_hi), p, mask ? &gt : nullptr));
    }
  }
  if (mask) {
    EvalRow row = evaluate_prediction(scan.id, pred, *mask);
    out << "organ-area D " << 100 * row.organ.dice << " VOE " << 100 * row.organ.voe << "; full-volume D "
        << 100 * row.full.dice << " VOE " << 100 * row.full.voe << "\n";
  }
  out << "wrote " << (fs::path(o.out) / "prediction.mask").string() << "\n";
  return kOk;
}

inline int cmd_dump_features(const DumpOptions& o, std::ostream& out) {
  Network<float> net = load_checkpoint<float>(o.checkpoint);
  const auto names = net.layer_names();
  if (std::find(names.begin(), names.end(), o.layer) == names.end()) {
    std::string all;
    for (const auto& n : names) all += (all.empty() ? "" : ", ") + n;
    throw InvalidArgument("unknown layer '" + o.layer + "'; valid layers: " + all);
  }
  Volume vol = read_volume(o.volume);
  PreparedScan scan = prepare_scan("volume", vol, std::nullopt, prep_options(net.config.resolution, o.window_lo, o.window_hi));
  const std::size_t k = o.slice < 0 ? scan.depth() / 2 : static_cast<std::size_t>(o.slice);
  if (k >= scan.depth()) throw InvalidArgument("--slice " + std::to_string(k) + " outside volume of depth " + std::to_string(scan.depth()));
  SpatialContext ctx;
  if (o.repeat_slice) {
    ctx = {"volume", k, std::vector<std::size_t>(net.config.sequence_length, k), o.d_mm};
  } else {
    ctx = extract_contexts("volume", scan.depth(), scan.spacing.thickness, SliceRange{k, k}, net.config.sequence_length,
                           o.d_mm, ContextMode::Inference)
              .front();
  }
  auto maps = export_activations(net, context_tensor(scan, ctx), o.layer);
  ensure_dir(o.out);
  for (std::size_t t = 0; t < maps.size(); ++t) {
    const fs::path p = fs::path(o.out) / (o.layer + "_element" + std::to_string(t) + ".png");
    write_png(p.string(), feature_grid(maps[t]));
  }
  out << "wrote " << maps.size() << " grids of " << (maps.empty() ? 0 : maps[0].dim(0)) << " maps to " << o.out << "\n";
  return kOk;
}

template <typename Fn>
int guarded(Fn&& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const InvalidArgument& e) {
    err << "invalid configuration: " << e.what() << "\n";
    return kInvalidConfig;
  } catch (const ConfigMismatch& e) {
    err << "configuration mismatch: " << e.what() << "\n";
    return kInvalidConfig;
  } catch (const NumericFailure& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const std::runtime_error& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  }
}

inline void add_window(CLI::App* sub, double& lo, double& hi) {
  sub->add_option("--window-lo", lo, "intensity window lower bound")->capture_default_str();
  sub->add_option("--window-hi", hi, "intensity window upper bound")->capture_default_str();
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sequence-context segmentation of volumetric scans"};
  app.set_config("--config", "", "INI file with option values (command options under [command])");
  app.require_subcommand(1, 1);

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "generate synthetic volumes with organ masks");
  synth->add_option("--out", so.out, "output directory")->required();
  synth->add_option("--count", so.count)->capture_default_str();
  synth->add_option("--dims", so.dims, "D,H,W")->delimiter(',')->expected(3)->capture_default_str();
  synth->add_option("--spacing", so.spacing, "thickness,row,col in mm")->delimiter(',')->expected(3)->capture_default_str();
  synth->add_option("--seed", so.seed)->capture_default_str();

  TrainOptions to;
  auto* train = app.add_subcommand("train", "train a network on a dataset manifest");
  train->add_option("--data", to.data, "dataset manifest.json")->required();
  train->add_option("--out", to.out, "output directory")->required();
  train->add_option("--variant", to.variant, "full | single-slice-2d | aggregation-2d | unidirectional")->capture_default_str();
  train->add_option("--o", to.o, "slices per context (odd)")->capture_default_str();
  train->add_option("--d-mm", to.d_mm, "distance between context slices in mm")->capture_default_str();
  train->add_option("--capacity-div", to.capacity_div, "feature-count divisor (1, 2, 4, 8)")->capture_default_str();
  train->add_option("--base-features", to.base_features)->capture_default_str();
  train->add_option("--resolution", to.resolution, "in-plane network resolution")->capture_default_str();
  add_window(train, to.window_lo, to.window_hi);
  train->add_option("--lr", to.lr)->capture_default_str();
  train->add_option("--beta1", to.beta1)->capture_default_str();
  train->add_option("--beta2", to.beta2)->capture_default_str();
  train->add_option("--adam-eps", to.adam_eps)->capture_default_str();
  train->add_option("--patience", to.patience)->capture_default_str();
  train->add_option("--min-delta", to.min_delta)->capture_default_str();
  train->add_option("--batch-size", to.batch_size)->capture_default_str();
  train->add_option("--max-epochs", to.max_epochs)->capture_default_str();
  train->add_option("--seed", to.seed)->capture_default_str();
  train->add_option("--folds", to.folds)->capture_default_str();
  train->add_option("--test-fold", to.test_fold)->capture_default_str();
  train->add_option("--fold", to.fold, "explicit fold as comma-separated scan ids (repeatable)");
  train->add_option("--validation-fraction", to.validation_fraction)->capture_default_str();
  train->add_flag("--quiet", to.quiet, "no per-epoch output");

  EvalOptions eo;
  auto* eval = app.add_subcommand("eval", "score checkpoints on scans with ground truth");
  eval->add_option("--data", eo.data, "dataset manifest.json")->required();
  eval->add_option("--out", eo.out, "output directory")->required();
  eval->add_option("--checkpoint", eo.checkpoints, "checkpoint file (repeatable)");
  eval->add_option("--name", eo.names, "report name per model (repeatable)");
  eval->add_option("--d-mm", eo.d_mm, "context distance, one value or one per checkpoint")->capture_default_str();
  eval->add_option("--scans", eo.scans, "scan ids to evaluate (default: all)")->delimiter(',');
  eval->add_flag("--oracle", eo.oracle, "also score the ground truth itself as a prediction");
  add_window(eval, eo.window_lo, eo.window_hi);

  InferOptions io;
  auto* infer = app.add_subcommand("infer", "segment one volume");
  infer->add_option("--checkpoint", io.checkpoint)->required();
  infer->add_option("--volume", io.volume)->required();
  infer->add_option("--mask", io.mask, "ground truth for overlays and scores");
  infer->add_option("--out", io.out)->required();
  infer->add_option("--d-mm", io.d_mm)->capture_default_str();
  infer->add_option("--png", io.png, "write per-slice overlays")->capture_default_str();
  add_window(infer, io.window_lo, io.window_hi);

  DumpOptions dopt;
  auto* dump = app.add_subcommand("dump-features", "export feature maps of one layer as PNG grids");
  dump->add_option("--checkpoint", dopt.checkpoint)->required();
  dump->add_option("--volume", dopt.volume)->required();
  dump->add_option("--out", dopt.out)->required();
  dump->add_option("--layer", dopt.layer)->capture_default_str();
  dump->add_option("--slice", dopt.slice, "centre slice (default: middle)")->capture_default_str();
  dump->add_flag("--repeat-slice", dopt.repeat_slice, "fill the context with copies of the centre slice");
  dump->add_option("--d-mm", dopt.d_mm)->capture_default_str();
  add_window(dump, dopt.window_lo, dopt.window_hi);

  std::vector<const char*> argv{"sensor3d_cli"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kInvalidConfig;
  }

  auto snapshot = [&](const std::string& dir) {
    ensure_dir(dir);
    for (auto* sub : app.get_subcommands())
      write_text(fs::path(dir) / "resolved_config.ini", "[" + sub->get_name() + "]\n" + sub->config_to_str(true, false));
  };
  return guarded(
      [&]() -> int {
        if (*synth) {
          snapshot(so.out);
          return cmd_synth(so, out);
        }
        if (*train) {
          snapshot(to.out);
          return cmd_train(to, out, err);
        }
        if (*eval) {
          snapshot(eo.out);
          return cmd_eval(eo, out);
        }
        if (*infer) {
          snapshot(io.out);
          return cmd_infer(io, out);
        }
        snapshot(dopt.out);
        return cmd_dump_features(dopt, out);
      },
      err);
}

}  // namespace sensor3d::cli
