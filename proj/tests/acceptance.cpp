// Acceptance checks, one line per criterion:  acceptance <id>|all
// Exit status is 0 only when every requested criterion passes.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dmcs/dmcs.hpp"
#include "test_util.hpp"
#include "tiny_net.hpp"

using namespace dmcs;
namespace fs = std::filesystem;

namespace {

constexpr double kLn2 = std::numbers::ln2;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool same_checkpoint(const fs::path& a, const fs::path& b) {
  if (!is_checkpoint(a) || !is_checkpoint(b)) return false;
  int n = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    if (slurp(e.path()) != slurp(b / e.path().filename())) return false;
    ++n;
  }
  return n > 0;
}

const std::map<std::string, int> kPublishedRankSums = {{"Ours", 15},      {"CUMedVision2", 21}, {"ExB1", 27},
                                                       {"ExB3", 29},      {"Frerburg2", 30},    {"CUMedVision1", 33},
                                                       {"FCN", 52}};

Outcome check_rank_sums(const std::vector<RankedRow>& ranked) {
  Outcome o{true, ""};
  for (const auto& r : ranked) {
    const int want = kPublishedRankSums.at(r.method);
    o.detail += r.method + "=" + std::to_string(r.rank_sum) + (r.rank_sum == want ? "" : "(want " + std::to_string(want) + ")") + " ";
    o.pass = o.pass && r.rank_sum == want;
  }
  o.pass = o.pass && ranked.size() == kPublishedRankSums.size();
  return o;
}

// 1: ranks recomputed from the six published scores of the seven rows
Outcome rank_sum_from_scores() {
  const auto t0 = Clock::now();
  const auto rows = read_score_table(fs::path(DMCS_TEST_DATA) / "challenge_scores.tsv");
  auto o = check_rank_sums(rank_sum(rows));
  const double t = seconds_since(t0);
  o.pass = o.pass && t < 1;
  o.detail += fmt("(%.3f s)", t);
  return o;
}

// 1b: the published per-column ranks summed
Outcome rank_sum_from_published_ranks() {
  const auto t0 = Clock::now();
  const auto rows = read_score_table(fs::path(DMCS_TEST_DATA) / "challenge_scores.tsv");
  auto o = check_rank_sums(published_rank_sum(rows));
  const double t = seconds_since(t0);
  o.pass = o.pass && t < 1;
  o.detail += fmt("(%.3f s)", t);
  return o;
}

Outcome gradient_suite() {
  using nn::Group;
  struct Obj {
    std::string name;
    Objective kind;
    int edge_term;
    double lambda_e;
    nn::GroupSet groups;
  };
  const nn::GroupSet tr{Group::trunk, Group::region}, te{Group::trunk, Group::edge}, all = nn::GroupSet::all();
  std::vector<Obj> objs{{"region", Objective::region, -1, 0, tr}};
  for (int m = 0; m < kSideOutputs; ++m) objs.push_back({"side" + std::to_string(m + 1), Objective::edge, m, 0, te});
  objs.push_back({"fused-edge", Objective::edge, kFusedEdgeTerm, 0, te});
  objs.push_back({"edge-total", Objective::edge, -1, 0, te});
  objs.push_back({"fusion", Objective::fusion, -1, 0, all});
  objs.push_back({"finetune(0.5)", Objective::finetune, -1, 0.5, all});
  objs.push_back({"finetune(1e-6)", Objective::finetune, -1, 1e-6, all});

  const auto t0 = Clock::now();
  const auto pr = dmcs::testing::tiny_problem();
  Outcome o{true, ""};
  double worst = 0;
  int min_samples = 1 << 30;
  for (const auto& ob : objs) {
    DmcsNet<double> net(dmcs::testing::tiny_arch(), 3);
    dmcs::testing::randomize_biases(net);
    ObjectiveSpec spec;
    spec.kind = ob.kind;
    spec.edge_term = ob.edge_term;
    spec.lambda_e = ob.lambda_e;
    auto g = net.params().zeros_like();
    evaluate_objective(net, pr.x, pr.labels, pr.edges, spec, ob.groups, &g);
    const auto r = gradient_check(net, pr.x, pr.labels, pr.edges, spec, ob.groups, 50, 1e-3);
    for (Group grp : nn::kAllGroups) {
      if (!ob.groups.contains(grp)) continue;
      double mass = 0;
      for (const auto& p : g)
        if (p.group == grp)
          for (double v : p.value) mass += std::abs(v);
      const bool ok = r.sampled.at(grp) >= 50 && r.max_rel_error.at(grp) < 1e-4 && mass > 0;
      if (!ok) {
        o.pass = false;
        o.detail += ob.name + "/" + std::string(nn::group_name(grp)) + fmt(" err %.2e", r.max_rel_error.at(grp)) + " n=" +
                    std::to_string(r.sampled.at(grp)) + fmt(" |g|=%.2e; ", mass);
      }
      min_samples = std::min(min_samples, r.sampled.at(grp));
      worst = std::max(worst, r.max_rel_error.at(grp));
    }
  }
  const double t = seconds_since(t0);
  o.pass = o.pass && t < 300;
  o.detail += std::to_string(objs.size()) + " objectives, >= " + std::to_string(min_samples) +
              " samples per group, worst rel err " + fmt("%.2e", worst) + fmt(" (%.1f s)", t);
  return o;
}

Outcome shape_suite() {
  const auto t0 = Clock::now();
  Outcome o{true, ""};
  auto check_net = [&](const DmcsNet<float>& net, const std::string& label) {
    for (int n : {64, 80, 96, 128}) {
      Tensor<float> x(3, n, n);
      std::mt19937_64 rng(n);
      std::normal_distribution<float> d(0, 40);
      for (auto& v : x.values()) v = d(rng);
      const auto out = net.forward(x);
      bool ok = out.side_logits.size() == kSideOutputs && out.side_probs.size() == kSideOutputs;
      auto sized = [&](const Tensor<float>& t) { return t.height() == n && t.width() == n; };
      ok = ok && sized(out.region_scores) && sized(out.region_probs.tensor()) && sized(out.fused_edge_logit) &&
           sized(out.fused_edge_prob) && sized(out.fusion_logits) && sized(out.fusion_probs.tensor());
      for (int m = 0; ok && m < kSideOutputs; ++m) ok = sized(out.side_logits[m]) && sized(out.side_probs[m]);
      double dev = 0;
      for (const auto* p : {&out.region_probs, &out.fusion_probs})
        for (int y = 0; y < n; ++y)
          for (int xx = 0; xx < n; ++xx) {
            double s = 0;
            for (int c = 0; c < p->channels(); ++c) s += (*p)(c, y, xx);
            dev = std::max(dev, std::abs(s - 1));
          }
      ok = ok && dev < 1e-6;
      if (!ok) o.detail += label + " " + std::to_string(n) + fmt(" failed (sum dev %.2e); ", dev);
      o.pass = o.pass && ok;
    }
  };
  check_net(DmcsNet<float>(ArchConfig{}, 1), "full");
  check_net(DmcsNet<float>(desk_protocol().model.arch(), 1), "desk");
  const double t = seconds_since(t0);
  o.pass = o.pass && t < 60;
  o.detail += "full and desk widths at 64/80/96/128, 5 side outputs" + fmt(" (%.1f s)", t);
  return o;
}

Outcome closed_forms() {
  // zeroed score layers: every probability is exactly 1/2
  DmcsNet<double> net(dmcs::testing::tiny_arch(), 2);
  for (auto& p : net.params())
    if (p.name.starts_with("region.score") || p.name.starts_with("fusion.fc3") ||
        (p.name.starts_with("edge.side") && p.name.find(".conv1.") != std::string::npos))
      std::fill(p.value.begin(), p.value.end(), 0.0);
  Outcome o{true, ""};
  double worst = 0;
  for (int n : {16, 23}) {
    const auto pr = dmcs::testing::tiny_problem(n);
    const double Y = double(n) * n;
    auto rel = [&](double got, double want) {
      const double r = std::abs(got / want - 1);
      worst = std::max(worst, r);
      return r < 1e-9;
    };
    ObjectiveSpec s;
    s.kind = Objective::region;
    o.pass &= rel(evaluate_objective(net, pr.x, pr.labels, pr.edges, s).total, Y * kLn2);
    s.kind = Objective::fusion;
    o.pass &= rel(evaluate_objective(net, pr.x, pr.labels, pr.edges, s).total, Y * kLn2);
    s.kind = Objective::edge;
    o.pass &= rel(evaluate_objective(net, pr.x, pr.labels, pr.edges, s).total, 6 * Y * kLn2);
  }
  // perfect predictions
  std::mt19937_64 rng(1);
  double perfect = 0;
  for (int t = 0; t < 20; ++t) {
    const auto inst = dmcs::testing::random_instances(rng, 20, 20, 5);
    const auto labels = instance_to_semantic(inst);
    const auto edges = instance_to_edges(inst, 2);
    Tensor<double> p(2, 20, 20, 0.0), e(1, 20, 20, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      p.channel(labels.values[i])[i] = 1;
      e.data()[i] = edges.values[i];
    }
    perfect = std::max({perfect, log_loss(ProbabilityMap<double>(p), labels), bce_loss(e, edges)});
  }
  o.pass = o.pass && perfect <= -std::log(1 - kLogClamp) * 400;
  o.detail = "uniform: region, fusion |Y| ln2 and edge 6|Z| ln2, worst rel dev " + fmt("%.1e", worst) +
             "; perfect: max loss " + fmt("%.1e", perfect);
  return o;
}

Outcome metrics_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  Outcome o{true, ""};
  int pairs = 0, bad = 0;
  double hd_dev = 0;
  for (; pairs < 600; ++pairs) {
    const int h = 2 + static_cast<int>(rng() % 23), w = 2 + static_cast<int>(rng() % 23);
    const auto gt = dmcs::testing::random_instances(rng, h, w, 5);
    // half the pairs are perturbed copies so that matches are common
    auto pred = dmcs::testing::random_instances(rng, h, w, 5);
    if (pairs % 2) {
      pred = gt;
      for (auto& v : pred.values)
        if (rng() % 6 == 0) v = static_cast<std::uint16_t>(rng() % 4 ? 0 : 1 + rng() % 9);
    }
    const auto m = match_objects(gt, pred);
    const int tp = dmcs::testing::brute_force_tp(gt, pred);
    const int ng = count_instances(gt), np = count_instances(pred);
    const double f1_ref = tp == 0 ? 0.0 : 2.0 * tp / (ng + np);
    const bool ok = m.tp == tp && m.tp + m.fn == ng && m.tp + m.fp == np && f1_score(m) == f1_ref &&
                    object_dice(gt, pred) == dmcs::testing::brute_object_dice(gt, pred);
    hd_dev = std::max(hd_dev, std::abs(object_hausdorff(gt, pred) - dmcs::testing::brute_object_hausdorff(gt, pred)));
    bad += !ok;
  }
  InstanceMap g(10, 10, 1), p(10, 10, 0);
  for (int i = 0; i < 50; ++i) p.values[i] = 3;
  const bool inclusive = match_objects(g, p).tp == 1;
  p.values[49] = 0;
  const bool below = match_objects(g, p).tp == 0;
  const double t = seconds_since(t0);
  o.pass = bad == 0 && hd_dev < 1e-9 && inclusive && below && t < 120;
  o.detail = std::to_string(pairs) + " pairs, " + std::to_string(bad) + " mismatches, Hausdorff dev " + fmt("%.1e", hd_dev) +
             ", 50/100 is " + (inclusive ? "TP" : "not TP") + ", 49/100 is " + (below ? "not TP" : "TP") + fmt(" (%.1f s)", t);
  return o;
}

std::vector<TrainingSample> desk_corpus(std::size_t n, unsigned seed) {
  SynthConfig sc;
  sc.seed = seed;
  return generate_synthetic(sc, n);
}

Outcome freeze_determinism() {
  const auto t0 = Clock::now();
  const auto samples = desk_corpus(20, 1000);
  const auto data = prepare_samples<float>(samples, compute_channel_means(samples));
  auto proto = desk_protocol();
  for (auto& s : proto.stages) s.epochs = 1;
  Outcome o{true, ""};
  bool frozen_ok = true;

  {  // stage by stage
    DmcsNet<float> net(proto.model.arch(), 1);
    TrainingLog log;
    for (const auto& st : proto.stages) {
      const auto before = net.params();
      run_stage(net, data, st, proto.optimizer, log);
      for (nn::Group g : nn::kAllGroups) {
        const bool same = net.params().group_equal(before, g);
        if (same == st.trainable.contains(g)) {
          frozen_ok = false;
          o.detail += st.name + ":" + std::string(nn::group_name(g)) + (same ? " did not move; " : " moved while frozen; ");
        }
      }
    }
  }
  const auto root = dmcs::testing::temp_dir("acceptance_determinism");
  auto run = [&](const fs::path& out, bool resume) {
    DmcsNet<float> net(proto.model.arch(), 1);
    TrainingLog log;
    return run_full_protocol(net, data, proto, out, log, 1, resume);
  };
  const auto a = run(root / "a", false);
  run(root / "b", false);
  bool identical = true;
  for (const auto& c : a.checkpoints) identical = identical && same_checkpoint(c, root / "b" / c.filename());
  fs::copy(root / "a", root / "c", fs::copy_options::recursive);
  fs::remove_all(root / "c" / "03-fusion");
  fs::remove_all(root / "c" / "04-finetune");
  const auto c = run(root / "c", true);
  const bool resumed = c.resumed_stages == 2 && same_checkpoint(root / "a" / "03-fusion", root / "c" / "03-fusion") &&
                       same_checkpoint(root / "a" / "04-finetune", root / "c" / "04-finetune");
  o.pass = frozen_ok && identical && resumed;
  o.detail += std::string("stages move exactly their trainable groups: ") + (frozen_ok ? "yes" : "NO") + ", seeded runs " +
              (identical ? "bit-identical" : "DIFFER") + ", resume " + (resumed ? "equals" : "DIFFERS from") +
              " uninterrupted run" + fmt(" (%.1f s)", seconds_since(t0));
  return o;
}

Outcome desk_experiment() {
  const auto t0 = Clock::now();
  const auto train = desk_corpus(200, 1000);
  const auto test = desk_corpus(50, 900000);
  const auto means = compute_channel_means(train);
  const auto dtr = prepare_samples<float>(train, means);
  const auto dte = prepare_samples<float>(test, means);
  std::vector<InstanceMap> truth;
  for (const auto& s : test) truth.push_back(s.instances);

  const auto proto = desk_protocol();
  const auto out = dmcs::testing::temp_dir("acceptance_desk");
  DmcsNet<float> net(proto.model.arch(), 1);
  TrainingLog log;
  run_full_protocol(net, dtr, proto, out, log, 1);
  const double t = seconds_since(t0);

  const auto pp = PostprocessConfig::for_image(64, 64);
  const auto d = evaluate_samples(net, dte, truth, pp, Predictor::dmcs);
  // the baseline is the region channel as trained in its own stage
  const auto region_net = open_checkpoint<float>(out / "01-region");
  const auto b = evaluate_samples(region_net, dte, truth, pp, Predictor::region_baseline);
  Outcome o;
  o.pass = d.f1 >= 0.70 && d.f1 - b.f1 >= 0.05 && t <= 1800;
  o.detail = "DMCS F1 " + fmt("%.3f", d.f1) + fmt(" (Dice %.3f", d.dice) + fmt(", Hausdorff %.2f)", d.hausdorff) +
             ", region baseline F1 " + fmt("%.3f", b.f1) + fmt(", margin %+.3f", d.f1 - b.f1) + fmt(" (train %.0f s)", t);
  return o;
}

Outcome postprocess_properties() {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0, 1);
  Outcome o{true, ""};
  int monotone_bad = 0, noop_bad = 0, cc_bad = 0;
  const int maps = 60;
  for (int t = 0; t < maps; ++t) {
    const int h = 8 + static_cast<int>(rng() % 40), w = 8 + static_cast<int>(rng() % 40);
    Tensor<double> probs(2, h, w), edge(1, h, w);
    Grid<double> raw(h, w);
    for (auto& v : raw.values) v = u(rng);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            if (raw.in_bounds(y + dy, x + dx)) s += raw(y + dy, x + dx), ++n;
        probs(1, y, x) = s / n;
        probs(0, y, x) = 1 - s / n;
      }
    for (auto& v : edge.values()) v = u(rng) < 0.999 ? u(rng) : 1.0;
    const ProbabilityMap<double> pm(probs);
    PostprocessConfig cfg = PostprocessConfig::for_image(h, w);
    std::size_t prev = std::numeric_limits<std::size_t>::max();
    for (double tau = 0.05; tau < 1; tau += 0.05) {
      cfg.tau_g = tau;
      const auto inst = extract_instances(pm, &edge, cfg);
      const auto area = static_cast<std::size_t>(std::count_if(inst.values.begin(), inst.values.end(), [](auto v) { return v; }));
      monotone_bad += area > prev;
      prev = area;
    }
    auto on = PostprocessConfig::for_image(h, w);
    on.tau_e = 1.0;
    auto off = on;
    off.edge_suppression = false;
    noop_bad += !(extract_instances(pm, &edge, on) == extract_instances(pm, &edge, off));

    BinaryMask mask(h, w, 0);
    const unsigned density = 2 + rng() % 6;
    for (auto& v : mask.values) v = (rng() % 10) < density;
    const auto a = connected_components(mask), b = dmcs::testing::bfs_components(mask);
    cc_bad += !(dmcs::testing::same_partition(a, b) && a == b);
  }
  o.pass = monotone_bad == 0 && noop_bad == 0 && cc_bad == 0;
  o.detail = std::to_string(maps) + " maps: threshold monotonicity violations " + std::to_string(monotone_bad) +
             ", tau_e = 1 differences " + std::to_string(noop_bad) + ", component mismatches vs BFS " + std::to_string(cc_bad);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::pair<std::string, std::function<Outcome()>>>> criteria = {
      {"1", {"rank sums recomputed from the seven-row score table", rank_sum_from_scores}},
      {"1b", {"rank sums from the published per-column ranks", rank_sum_from_published_ranks}},
      {"2", {"analytic gradients vs central differences", gradient_suite}},
      {"3", {"output shapes and normalization", shape_suite}},
      {"4", {"loss closed forms", closed_forms}},
      {"5", {"metrics vs brute-force oracles", metrics_oracles}},
      {"6", {"freeze, determinism and resume", freeze_determinism}},
      {"7", {"desk experiment on touching blobs", desk_experiment}},
      {"8", {"post-processing properties", postprocess_properties}},
  };
  const std::string want = argc > 1 ? argv[1] : "all";
  bool all_pass = true, any = false;
  for (const auto& [id, c] : criteria) {
    if (want != "all" && want != id) continue;
    any = true;
    Outcome o;
    try {
      o = c.second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << ": " << c.first << ": " << o.detail << std::endl;
    all_pass = all_pass && o.pass;
  }
  if (!any) {
    std::cerr << "unknown criterion '" << want << "'\n";
    return 2;
  }
  return all_pass ? 0 : 1;
}
