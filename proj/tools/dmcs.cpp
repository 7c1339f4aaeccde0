// dmcs: synth | train | predict | eval | report
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dmcs/dmcs.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dmcs;

namespace {

struct Options {
  // shared
  std::string manifest, protocol, checkpoint, out;
  std::uint64_t seed = 1;
  std::optional<double> scale;
  double tau_g = 0.5, tau_e = 0.5;
  std::optional<int> min_area;
  int edge_thickness = 2;
  bool quiet = false;
  // synth
  std::size_t count = 200;
  std::size_t first_index = 0;
  int size = 64;
  double touching = 0.5;
  double noise = 0.04;
  // train
  bool full = false, augment = false, resume = false;
  // predict
  bool no_suppression = false, baseline = false;
  std::string means;
  // eval
  std::string pred, gt;
  // report
  std::vector<std::string> logs, preds;
  std::string scores;
};

fs::path data_path(const std::string& p) {
  fs::path path(p);
  if (path.is_relative() && !fs::exists(path))
    if (const char* root = std::getenv("DMCS_DATA_ROOT")) {
      const fs::path alt = fs::path(root) / path;
      if (fs::exists(alt)) return alt;
    }
  return path;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
}

void write_config(const fs::path& dir, const json& cfg) {
  std::ofstream out(dir / "config.json");
  if (!out) throw DataError("cannot write " + (dir / "config.json").string());
  out << cfg.dump(2) << "\n";
}

PostprocessConfig post_config(const Options& o, int h, int w) {
  PostprocessConfig c = PostprocessConfig::for_image(h, w);
  c.tau_g = o.tau_g;
  c.tau_e = o.tau_e;
  c.edge_suppression = !o.no_suppression;
  c.dilation_radius = o.edge_thickness;
  if (o.min_area) c.min_area = *o.min_area;
  c.validate();
  return c;
}

json post_json(const Options& o) {
  return {{"tau_g", o.tau_g},
          {"tau_e", o.tau_e},
          {"edge_suppression", !o.no_suppression},
          {"min_area", o.min_area ? json(*o.min_area) : json("0.25% of image area, at most 100")},
          {"fill_holes", true},
          {"dilation_radius", o.edge_thickness}};
}

fs::path resolve_checkpoint(const fs::path& p) {
  if (fs::exists(p / kCheckpointManifest)) return p;
  std::ifstream latest(p / "LATEST");
  std::string name;
  if (latest && std::getline(latest, name) && !name.empty()) return p / name;
  throw DataError("no checkpoint at " + p.string());
}

// ---------------------------------------------------------------- commands

int cmd_synth(const Options& o) {
  SynthConfig sc = SynthConfig::for_size(o.size, o.size);
  sc.touching_probability = o.touching;
  sc.noise = o.noise;
  sc.seed = static_cast<unsigned>(o.seed);
  const auto samples = generate_synthetic(sc, o.count, o.edge_thickness, o.first_index);
  const fs::path out(o.out);
  make_dir(out);
  const auto m = write_corpus(out, samples);
  std::size_t objects = 0;
  for (const auto& s : samples) objects += static_cast<std::size_t>(count_instances(s.instances));
  write_config(out, {{"command", "synth"},
                     {"seed", o.seed},
                     {"count", o.count},
                     {"first_index", o.first_index},
                     {"size", o.size},
                     {"touching_probability", o.touching},
                     {"noise", o.noise},
                     {"objects", {sc.min_objects, sc.max_objects}},
                     {"radius", {sc.min_radius, sc.max_radius}}});
  std::cout << "wrote " << m.entries.size() << " images with " << objects << " objects to " << out.string() << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  Protocol p = o.full ? full_protocol() : desk_protocol();
  if (!o.protocol.empty()) p = read_protocol(o.protocol);
  if (o.scale) p.model.scale = *o.scale;
  p.validate();
  const fs::path out(o.out);
  make_dir(out);

  auto samples = load_dataset(read_manifest(data_path(o.manifest), Split::train), o.edge_thickness);
  if (samples.empty()) throw DataError("training manifest is empty");
  const auto means = compute_channel_means(samples);
  if (o.augment) {
    AugmentationConfig ac;
    ac.shifts = AugmentationConfig::diagonal_shifts(samples.front().image.height(), samples.front().image.width());
    samples = augment_all(samples, ac, means);
  }
  write_means(out / "means.txt", means);
  {
    std::ofstream pf(out / "protocol.cfg");
    pf << format_protocol(p);
  }
  DmcsNet<float> net(p.model.arch(), o.seed);
  write_config(out, {{"command", "train"},
                     {"seed", o.seed},
                     {"manifest", o.manifest},
                     {"protocol", o.protocol.empty() ? (o.full ? "full" : "desk") : o.protocol},
                     {"architecture", net.arch().describe()},
                     {"edge_thickness", o.edge_thickness},
                     {"augment", o.augment},
                     {"samples", samples.size()},
                     {"resume", o.resume}});
  const auto data = prepare_samples<float>(samples, means);

  TrainingLog log;
  std::string current;
  int epoch = -1;
  double acc = 0;
  int n = 0;
  auto flush = [&] {
    if (n && !o.quiet) std::cout << current << " epoch " << epoch + 1 << " mean loss " << acc / n << "\n";
    acc = 0;
    n = 0;
  };
  const auto run = run_full_protocol(net, data, p, out, log, o.seed, o.resume, [&](const LogRecord& r) {
    if (r.stage != current || r.epoch != epoch) {
      flush();
      current = r.stage;
      epoch = r.epoch;
    }
    acc += r.loss;
    ++n;
  });
  flush();
  {
    std::ofstream lf(out / "training_log.tsv");
    log.write(lf);
  }
  std::cout << "checkpoints:";
  for (const auto& c : run.checkpoints) std::cout << " " << c.filename().string();
  std::cout << (run.resumed_stages ? " (" + std::to_string(run.resumed_stages) + " stage(s) reused)" : "") << "\n";
  return 0;
}

int cmd_predict(const Options& o) {
  const auto ckpt = resolve_checkpoint(o.checkpoint);
  CheckpointInfo info;
  auto net = open_checkpoint<float>(ckpt, &info);
  fs::path means_path = o.means;
  if (means_path.empty()) {
    for (const auto& cand : {ckpt / "means.txt", ckpt.parent_path() / "means.txt"})
      if (fs::exists(cand)) {
        means_path = cand;
        break;
      }
    if (means_path.empty()) throw DataError("no means.txt next to the checkpoint; pass --means");
  }
  const auto means = read_means(means_path);
  const auto samples = load_dataset(read_manifest(data_path(o.manifest)), o.edge_thickness);
  const fs::path out(o.out);
  for (const auto& d : {out / "instances", out / "overlays", out / "probabilities"}) make_dir(d);
  write_config(out, {{"command", "predict"},
                     {"seed", info.seed},
                     {"checkpoint", ckpt.string()},
                     {"stage", info.stage},
                     {"architecture", info.arch.describe()},
                     {"means", means},
                     {"predictor", o.baseline ? "region_baseline" : "dmcs"},
                     {"postprocess", post_json(o)}});
  const auto data = prepare_samples<float>(samples, means);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& d = data[i];
    const auto pc = post_config(o, d.x.height(), d.x.width());
    const auto p = o.baseline ? predict_region_baseline(net, d.x, pc) : predict_instances(net, d.x, pc);
    io::write_instances((out / "instances" / (d.id + ".png")).string(), p.instances);
    io::write_image((out / "overlays" / (d.id + ".png")).string(), overlay_instances(samples[i].image, p.instances));
    const auto& probs = o.baseline ? p.outputs.region_probs : p.outputs.fusion_probs;
    io::write_tensor((out / "probabilities" / (d.id + "_fused.f32")).string(), probs.tensor());
    io::write_probability((out / "probabilities" / (d.id + "_fused.png")).string(), probs.tensor(), 1);
    if (!o.baseline) {
      io::write_tensor((out / "probabilities" / (d.id + "_edge.f32")).string(), p.outputs.fused_edge_prob);
      io::write_probability((out / "probabilities" / (d.id + "_edge.png")).string(), p.outputs.fused_edge_prob, 0);
    }
  }
  std::cout << "predicted " << data.size() << " images into " << out.string() << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  fs::path gt = o.gt;
  fs::path tmp;
  if (gt.empty()) {
    if (o.manifest.empty()) throw UsageError("eval needs --gt DIR or --manifest");
    // gather the manifest's annotations under their ids
    const auto m = read_manifest(data_path(o.manifest));
    tmp = fs::path(o.out) / "ground_truth";
    make_dir(tmp);
    for (const auto& e : m.entries) {
      const auto src = resolve(m, e.annotation);
      if (!fs::exists(src)) throw DataError("entry '" + e.id + "': missing file " + src.string());
      io::write_instances((tmp / (e.id + ".png")).string(), io::read_instances(src.string()));
    }
    gt = tmp;
  }
  const auto s = evaluate_split(o.pred, gt);
  const fs::path out(o.out);
  make_dir(out);
  {
    std::ofstream rf(out / "report.tsv");
    write_split_report(rf, s);
  }
  json summary = {{"images", s.images.size()}, {"tp", s.tp},           {"fp", s.fp},
                  {"fn", s.fn},                {"f1", s.f1},           {"object_dice", s.dice},
                  {"object_hausdorff", s.hausdorff}, {"missing_predictions", s.missing}};
  {
    std::ofstream sf(out / "summary.json");
    sf << summary.dump(2) << "\n";
  }
  write_config(out, {{"command", "eval"}, {"seed", o.seed}, {"pred", o.pred}, {"gt", gt.string()}});
  std::cout << "images " << s.images.size() << "  F1 " << s.f1 << "  ObjectDice " << s.dice << "  ObjectHausdorff "
            << s.hausdorff << (s.missing ? "  (" + std::to_string(s.missing) + " missing predictions)" : "") << "\n";
  return 0;
}

int cmd_report(const Options& o) {
  const fs::path out(o.out);
  make_dir(out);
  int made = 0;
  for (const auto& lp : o.logs) {
    std::ifstream in(lp);
    if (!in) throw DataError("cannot open training log " + lp);
    const auto log = TrainingLog::read(in, lp);
    std::vector<std::string> stages;
    for (const auto& r : log.records)
      if (std::find(stages.begin(), stages.end(), r.stage) == stages.end()) stages.push_back(r.stage);
    const std::string prefix = o.logs.size() > 1 ? fs::path(lp).parent_path().filename().string() + "_" : "";
    for (const auto& st : stages) {
      std::vector<double> v;
      for (const auto& r : log.records)
        if (r.stage == st) v.push_back(r.loss);
      io::write_image((out / ("loss_" + prefix + st + ".png")).string(), plot_series(v));
      ++made;
    }
  }
  if (!o.scores.empty()) {
    const auto rows = read_score_table(fs::path(o.scores));
    std::vector<RankedRow> ranked;
    if (rows.size() < 2) std::cerr << "warning: fewer than two methods; writing the table without ranks\n";
    else ranked = rank_sum(rows);
    std::ofstream tf(out / "rank_table.tsv");
    write_rank_table(tf, rows, ranked);
    for (const auto& r : ranked) std::cout << r.method << "\trank sum " << r.rank_sum << "\n";
    if (!rows.empty() && rows.front().published_ranks) {
      std::ofstream pf(out / "published_rank_table.tsv");
      const auto pub = published_rank_sum(rows);
      write_rank_table(pf, rows, pub);
      for (const auto& r : pub) std::cout << r.method << "\tpublished rank sum " << r.rank_sum << "\n";
    }
    ++made;
  }
  if (!o.preds.empty()) {
    if (o.manifest.empty()) throw UsageError("overlay sheets need --manifest");
    const auto samples = load_dataset(read_manifest(data_path(o.manifest)), o.edge_thickness);
    make_dir(out / "sheets");
    for (const auto& s : samples) {
      std::vector<ImageTensor> panels{s.image, overlay_instances(s.image, s.instances)};
      for (const auto& pd : o.preds) {
        const auto f = fs::path(pd) / (s.id + ".png");
        panels.push_back(fs::exists(f) ? overlay_instances(s.image, io::read_instances(f.string()))
                                       : ImageTensor(3, s.image.height(), s.image.width(), 0.f));
      }
      io::write_image((out / "sheets" / (s.id + ".png")).string(), side_by_side(panels));
      ++made;
    }
  }
  write_config(out, {{"command", "report"}, {"seed", o.seed}, {"logs", o.logs}, {"scores", o.scores},
                     {"predictions", o.preds}, {"manifest", o.manifest}});
  std::cout << "report: " << made << " artifact(s) in " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep multichannel gland instance segmentation: synthetic data, training, inference, evaluation"};
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth", "generate a synthetic gland-like corpus");
  synth->add_option("--out", o.out, "output directory")->required();
  synth->add_option("--n", o.count, "number of images")->check(CLI::PositiveNumber);
  synth->add_option("--first-index", o.first_index, "index of the first image (image i uses seed + i)");
  synth->add_option("--size", o.size, "image side length")->check(CLI::Range(24, 4096));
  synth->add_option("--touching", o.touching, "probability that a new object touches an earlier one")
      ->check(CLI::Range(0.0, 1.0));
  synth->add_option("--noise", o.noise, "noise std as a fraction of full scale")->check(CLI::NonNegativeNumber);
  synth->add_option("--seed", o.seed, "root seed");
  synth->add_option("--edge-thickness", o.edge_thickness, "edge band thickness")->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "run the staged training protocol");
  train->add_option("--manifest", o.manifest, "training manifest")->required();
  train->add_option("--out", o.out, "output directory for checkpoints and logs")->required();
  train->add_option("--protocol", o.protocol, "protocol file (default: built-in desk protocol)");
  train->add_flag("--full", o.full, "full-width model and original schedule instead of the desk protocol");
  train->add_option("--seed", o.seed, "root seed");
  train->add_option("--scale", o.scale, "channel width factor")->check(CLI::PositiveNumber);
  train->add_option("--edge-thickness", o.edge_thickness, "edge band thickness")->check(CLI::PositiveNumber);
  train->add_flag("--augment", o.augment, "flips, rotations and diagonal shifts");
  train->add_flag("--resume", o.resume, "reuse completed stage checkpoints in --out");
  train->add_flag("--quiet", o.quiet, "no per-epoch output");

  auto add_post = [&o](CLI::App* c) {
    c->add_option("--tau-g", o.tau_g, "gland probability threshold")->check(CLI::Range(0.0, 1.0));
    c->add_option("--tau-e", o.tau_e, "edge probability threshold")->check(CLI::Range(0.0, 1.0));
    c->add_option("--min-area", o.min_area, "minimum object area in pixels")->check(CLI::NonNegativeNumber);
    c->add_option("--edge-thickness", o.edge_thickness, "edge thickness used in training (dilation radius)")
        ->check(CLI::NonNegativeNumber);
    c->add_flag("--no-edge-suppression", o.no_suppression, "do not cut along predicted edges");
  };
  auto* predict = app.add_subcommand("predict", "segment the images of a manifest");
  predict->add_option("--manifest", o.manifest, "images to segment")->required();
  predict->add_option("--checkpoint", o.checkpoint, "checkpoint or training output directory")->required();
  predict->add_option("--out", o.out, "output directory")->required();
  predict->add_option("--means", o.means, "channel means file (default: next to the checkpoint)");
  predict->add_flag("--baseline", o.baseline, "region channel and connected components only");
  add_post(predict);

  auto* eval = app.add_subcommand("eval", "score predicted instance maps");
  eval->add_option("--pred", o.pred, "directory of predicted instance PNGs")->required();
  eval->add_option("--gt", o.gt, "directory of ground-truth instance PNGs");
  eval->add_option("--manifest", o.manifest, "ground truth from a manifest instead of --gt");
  eval->add_option("--out", o.out, "report directory")->required();
  eval->add_option("--seed", o.seed, "recorded in the report config");

  auto* report = app.add_subcommand("report", "loss curves, rank tables and overlay sheets");
  report->add_option("--out", o.out, "output directory")->required();
  report->add_option("--log", o.logs, "training log(s)");
  report->add_option("--scores", o.scores, "score table (method and six scores, optional *_rank columns)");
  report->add_option("--pred", o.preds, "prediction directories for overlay sheets");
  report->add_option("--manifest", o.manifest, "images and ground truth for overlay sheets");
  report->add_option("--seed", o.seed, "recorded in the report config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth(o);
    if (*train) return cmd_train(o);
    if (*predict) return cmd_predict(o);
    if (*eval) return cmd_eval(o);
    if (*report) return cmd_report(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
