#pragma once

// Staged training: region, edge, fusion, then joint fine-tuning, each with its
// own trainable parameter groups, optimized by SGD with momentum and weight decay.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dmcs/checkpoint.hpp"
#include "dmcs/core.hpp"
#include "dmcs/losses.hpp"
#include "dmcs/model.hpp"

namespace dmcs {

struct StageConfig {
  std::string name;
  Objective objective = Objective::finetune;
  double lr = 1e-3;
  nn::GroupSet trainable;
  int epochs = 1;
  double lambda_e = 1e-6;
  std::map<nn::Group, InitPolicy> init;  // applied when the stage starts; missing groups are kept
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr >= 0) || !std::isfinite(lr)) throw UsageError("stage '" + name + "': learning rate must be >= 0");
    if (epochs < 0) throw UsageError("stage '" + name + "': epochs must be >= 0");
    if (lambda_e < 0) throw UsageError("stage '" + name + "': lambda_e must be >= 0");
    if (trainable.empty()) throw UsageError("stage '" + name + "': no trainable groups");
    if (trainable == nn::GroupSet::all() && objective != Objective::finetune)
      throw UsageError("stage '" + name + "': only the finetune stage may train all four groups");
  }
};

struct OptimizerConfig {
  double momentum = 0.9;
  double weight_decay = 0.002;
  int batch_size = 10;
  LossNorm loss_norm = LossNorm::sum;

  void validate() const {
    if (!(momentum >= 0 && momentum < 1)) throw UsageError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw UsageError("weight decay must be >= 0");
    if (batch_size < 1) throw UsageError("batch size must be >= 1");
  }
};

template <typename T>
struct OptimizerState {
  OptimizerConfig cfg;
  nn::ParamSet<T> velocity;

  OptimizerState() = default;
  OptimizerState(const OptimizerConfig& c, const nn::ParamSet<T>& params) : cfg(c), velocity(params.zeros_like()) {}
  void reset() { velocity.set_zero(); }
};

/// v <- momentum * v + grad + decay * param; param <- param - lr * v, for trainable
/// groups only. Every gradient is checked before anything is modified.
template <typename T>
void sgd_step(nn::ParamSet<T>& params, const nn::ParamSet<T>& grads, OptimizerState<T>& state, double lr,
              nn::GroupSet trainable) {
  if (grads.size() != params.size() || state.velocity.size() != params.size())
    throw ShapeError("sgd_step: parameter, gradient and momentum sets differ in size");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable.contains(params[i].group)) continue;
    if (grads[i].value.size() != params[i].value.size() || state.velocity[i].value.size() != params[i].value.size())
      throw ShapeError("sgd_step: shape mismatch for " + params[i].name);
    for (T g : grads[i].value)
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in " + params[i].name);
  }
  const T m = static_cast<T>(state.cfg.momentum), step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!trainable.contains(p.group)) continue;
    const T decay = p.decays() ? static_cast<T>(state.cfg.weight_decay) : T(0);
    auto& v = state.velocity[i].value;
    const auto& g = grads[i].value;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      v[k] = m * v[k] + g[k] + decay * p.value[k];
      p.value[k] -= step * v[k];
    }
  }
}

struct LogRecord {
  std::string stage;
  int epoch = 0;
  long iteration = 0;  // global, across stages
  double loss = 0;     // mean objective over the mini-batch
  double region = 0, edge = 0, fusion = 0;
  double lr = 0;
  double wall_seconds = 0;
};

struct TrainingLog {
  std::vector<LogRecord> records;

  void write(std::ostream& out) const {
    out << "stage\tepoch\titeration\tloss\tregion\tedge\tfusion\tlr\twall_s\n";
    out.precision(9);
    for (const auto& r : records)
      out << r.stage << '\t' << r.epoch << '\t' << r.iteration << '\t' << r.loss << '\t' << r.region << '\t'
          << r.edge << '\t' << r.fusion << '\t' << r.lr << '\t' << r.wall_seconds << '\n';
  }

  static TrainingLog read(std::istream& in, const std::string& source = "training log") {
    TrainingLog log;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (lineno == 1 || line.empty()) continue;
      std::istringstream ls(line);
      LogRecord r;
      if (!(ls >> r.stage >> r.epoch >> r.iteration >> r.loss >> r.region >> r.edge >> r.fusion >> r.lr >>
            r.wall_seconds))
        throw DataError(source + ":" + std::to_string(lineno) + ": malformed record");
      log.records.push_back(r);
    }
    return log;
  }

  /// Mean loss per epoch of one stage.
  std::vector<double> epoch_means(const std::string& stage) const {
    std::map<int, std::pair<double, int>> acc;
    for (const auto& r : records)
      if (r.stage == stage) {
        acc[r.epoch].first += r.loss;
        ++acc[r.epoch].second;
      }
    std::vector<double> out;
    for (const auto& [e, v] : acc) out.push_back(v.first / v.second);
    return out;
  }
};

inline ObjectiveSpec objective_spec(const StageConfig& s, const OptimizerConfig& o) {
  ObjectiveSpec spec;
  spec.kind = s.objective;
  spec.lambda_e = s.lambda_e;
  spec.norm = o.loss_norm;
  return spec;
}

/// Samples prepared for the network: centered image in T plus targets.
template <typename T>
struct NetSample {
  Tensor<T> x;
  LabelMap labels;
  EdgeMap edges;
  std::string id;
};

template <typename T>
std::vector<NetSample<T>> prepare_samples(const std::vector<TrainingSample>& samples, const std::vector<double>& means) {
  std::vector<NetSample<T>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (static_cast<int>(means.size()) != s.image.channels())
      throw ShapeError("sample '" + s.id + "': channel means do not match image channels");
    Tensor<T> x(s.image.channels(), s.image.height(), s.image.width());
    for (int k = 0; k < x.channels(); ++k)
      for (std::size_t i = 0; i < x.plane(); ++i)
        x.channel(k)[i] = static_cast<T>(s.image.channel(k)[i] - means[k]);
    out.push_back({std::move(x), s.labels, s.edges, s.id});
  }
  return out;
}

template <typename T>
void apply_init(DmcsNet<T>& net, const StageConfig& cfg) {
  for (const auto& [g, policy] : cfg.init)
    net.initialize_group(g, policy, cfg.seed * 31 + static_cast<std::uint64_t>(g));
}

/// Runs one stage. Frozen groups are never written. Throws NumericError on a
/// non-finite loss or gradient, leaving the parameters at the last finite update.
template <typename T>
void run_stage(DmcsNet<T>& net, const std::vector<NetSample<T>>& data, const StageConfig& cfg,
               const OptimizerConfig& opt, TrainingLog& log,
               const std::function<void(const LogRecord&)>& on_batch = {}) {
  cfg.validate();
  opt.validate();
  if (data.empty()) throw DataError("stage '" + cfg.name + "': no training data");
  apply_init(net, cfg);
  OptimizerState<T> state(opt, net.params());
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  const auto spec = objective_spec(cfg, opt);
  auto grads = net.params().zeros_like();
  const auto t0 = std::chrono::steady_clock::now();
  long iter = log.records.empty() ? 0 : log.records.back().iteration;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t stop = std::min(order.size(), start + opt.batch_size);
      ObjectiveSpec s = spec;
      s.grad_scale = 1.0 / static_cast<double>(stop - start);
      grads.set_zero();
      LogRecord rec;
      for (std::size_t k = start; k < stop; ++k) {
        const auto& d = data[order[k]];
        const auto l = evaluate_objective(net, d.x, d.labels, d.edges, s, cfg.trainable, &grads);
        rec.loss += l.total * s.grad_scale;
        rec.region += l.region * s.grad_scale;
        rec.edge += l.edge.total * s.grad_scale;
        rec.fusion += l.fusion * s.grad_scale;
      }
      sgd_step(net.params(), grads, state, cfg.lr, cfg.trainable);
      rec.stage = cfg.name;
      rec.epoch = epoch;
      rec.iteration = ++iter;
      rec.lr = cfg.lr;
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log.records.push_back(rec);
      if (on_batch) on_batch(rec);
    }
  }
}

// ---------------------------------------------------------------- protocol

struct ModelConfig {
  double scale = 1.0;
  std::optional<std::array<int, kSideOutputs>> convs_per_stage;
  std::optional<int> fc_kernel;
  int num_classes = 1;

  ArchConfig arch() const {
    ArchConfig a;
    a.num_classes = num_classes;
    if (convs_per_stage) a.convs_per_stage = *convs_per_stage;
    if (fc_kernel) a.fc_kernel = *fc_kernel;
    return a.scaled(scale);
  }
};

struct Protocol {
  ModelConfig model;
  OptimizerConfig optimizer;
  std::vector<StageConfig> stages;

  void validate() const {
    optimizer.validate();
    for (const auto& s : stages) s.validate();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

inline Objective parse_objective(const std::string& s) {
  for (Objective o : {Objective::region, Objective::edge, Objective::fusion, Objective::finetune})
    if (s == objective_name(o)) return o;
  throw UsageError("unknown objective '" + s + "' (expected region, edge, fusion or finetune)");
}

}  // namespace detail

/// The schedule and hyperparameters of the original experiment.
inline Protocol full_protocol() {
  using nn::Group;
  Protocol p;
  p.optimizer = {0.9, 0.002, 10, LossNorm::sum};
  p.stages = {
      {"region", Objective::region, 1e-3, {Group::trunk, Group::region}, 20, 1e-6,
       {{Group::trunk, InitPolicy::xavier}, {Group::region, InitPolicy::xavier}}, 101},
      {"edge", Objective::edge, 1e-9, {Group::trunk, Group::edge}, 20, 1e-6, {{Group::edge, InitPolicy::xavier}}, 102},
      {"fusion", Objective::fusion, 1e-3, {Group::fusion}, 10, 1e-6, {{Group::fusion, InitPolicy::xavier}}, 103},
      {"finetune", Objective::finetune, 1e-3, nn::GroupSet::all(), 40, 1e-6, {}, 104},
  };
  return p;
}

/// Reduced model and schedule for small synthetic images on a CPU.
inline Protocol desk_protocol() {
  Protocol p = full_protocol();
  p.model.scale = 1.0 / 16;
  p.model.convs_per_stage = std::array<int, kSideOutputs>{1, 1, 1, 1, 1};
  p.optimizer.loss_norm = LossNorm::mean;
  // per-pixel mean loss lets the first three stages run at 1e-2; the joint stage
  // needs 1e-4 or the tiny edge weight lets the edge channel drift
  const double lrs[4] = {1e-2, 1e-2, 1e-2, 1e-4};
  const int epochs[4] = {10, 10, 5, 10};
  for (int i = 0; i < 4; ++i) {
    p.stages[i].lr = lrs[i];
    p.stages[i].epochs = epochs[i];
  }
  return p;
}

inline std::string format_protocol(const Protocol& p) {
  std::ostringstream os;
  os.precision(17);
  os << "[model]\nscale = " << p.model.scale << "\nnum_classes = " << p.model.num_classes << "\n";
  if (p.model.convs_per_stage) {
    os << "convs_per_stage = ";
    for (int i = 0; i < kSideOutputs; ++i) os << (i ? ", " : "") << (*p.model.convs_per_stage)[i];
    os << "\n";
  }
  if (p.model.fc_kernel) os << "fc_kernel = " << *p.model.fc_kernel << "\n";
  os << "\n[optimizer]\nmomentum = " << p.optimizer.momentum << "\nweight_decay = " << p.optimizer.weight_decay
     << "\nbatch_size = " << p.optimizer.batch_size
     << "\nloss_norm = " << (p.optimizer.loss_norm == LossNorm::sum ? "sum" : "mean") << "\n";
  for (const auto& s : p.stages) {
    os << "\n[stage " << s.name << "]\nobjective = " << objective_name(s.objective) << "\nlr = " << s.lr
       << "\nepochs = " << s.epochs << "\ntrainable = ";
    bool first = true;
    for (auto g : nn::kAllGroups)
      if (s.trainable.contains(g)) {
        os << (first ? "" : ", ") << nn::group_name(g);
        first = false;
      }
    os << "\nlambda_e = " << s.lambda_e << "\ninit = ";
    first = true;
    for (const auto& [g, pol] : s.init) {
      os << (first ? "" : ", ") << nn::group_name(g) << ":" << init_policy_name(pol);
      first = false;
    }
    os << "\nseed = " << s.seed << "\n";
  }
  return os.str();
}

/// Parses the stage-block format written by format_protocol. Errors carry the line number.
inline Protocol parse_protocol(std::istream& in, const std::string& source = "protocol") {
  Protocol p;
  p.stages.clear();
  std::string line, section;
  int lineno = 0;
  auto fail = [&](const std::string& msg) { throw UsageError(source + ":" + std::to_string(lineno) + ": " + msg); };
  auto num = [&](const std::string& v) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      fail("expected a number, got '" + v + "'");
    }
    return 0.0;
  };
  auto integer = [&](const std::string& v) {
    const double d = num(v);
    if (d != std::floor(d)) fail("expected an integer, got '" + v + "'");
    return static_cast<long long>(d);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section.rfind("stage ", 0) == 0) {
        StageConfig s;
        s.name = detail::trim(section.substr(6));
        if (s.name.empty()) fail("stage needs a name");
        try {
          s.objective = detail::parse_objective(s.name);
        } catch (const UsageError&) {
          s.objective = Objective::finetune;
        }
        s.seed = 100 + p.stages.size() + 1;
        p.stages.push_back(s);
        section = "stage";
      } else if (section != "model" && section != "optimizer") {
        fail("unknown section '" + section + "'");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq)), val = detail::trim(line.substr(eq + 1));
    if (section.empty()) fail("key '" + key + "' outside of a section");
    try {
      if (section == "model") {
        if (key == "scale") p.model.scale = num(val);
        else if (key == "num_classes") p.model.num_classes = static_cast<int>(integer(val));
        else if (key == "fc_kernel") p.model.fc_kernel = static_cast<int>(integer(val));
        else if (key == "convs_per_stage") {
          const auto v = detail::split_list(val);
          if (v.size() != kSideOutputs) fail("convs_per_stage needs 5 values");
          std::array<int, kSideOutputs> c{};
          for (int i = 0; i < kSideOutputs; ++i) c[i] = static_cast<int>(integer(v[i]));
          p.model.convs_per_stage = c;
        } else fail("unknown model key '" + key + "'");
      } else if (section == "optimizer") {
        if (key == "momentum") p.optimizer.momentum = num(val);
        else if (key == "weight_decay") p.optimizer.weight_decay = num(val);
        else if (key == "batch_size") p.optimizer.batch_size = static_cast<int>(integer(val));
        else if (key == "loss_norm") p.optimizer.loss_norm = parse_loss_norm(val);
        else fail("unknown optimizer key '" + key + "'");
      } else {
        auto& s = p.stages.back();
        if (key == "objective") s.objective = detail::parse_objective(val);
        else if (key == "lr") s.lr = num(val);
        else if (key == "epochs") s.epochs = static_cast<int>(integer(val));
        else if (key == "lambda_e") s.lambda_e = num(val);
        else if (key == "seed") s.seed = static_cast<std::uint64_t>(integer(val));
        else if (key == "trainable") {
          s.trainable = {};
          for (const auto& g : detail::split_list(val)) s.trainable.insert(nn::parse_group(g));
        } else if (key == "init") {
          s.init.clear();
          for (const auto& item : detail::split_list(val)) {
            const auto colon = item.find(':');
            if (colon == std::string::npos) fail("init entries look like 'w_e:xavier', got '" + item + "'");
            s.init[nn::parse_group(detail::trim(item.substr(0, colon)))] =
                parse_init_policy(detail::trim(item.substr(colon + 1)));
          }
        } else fail("unknown stage key '" + key + "'");
      }
    } catch (const UsageError& e) {
      const std::string what = e.what();
      if (what.rfind(source + ":", 0) == 0) throw;
      fail(what);
    }
  }
  for (const auto& s : p.stages) {
    try {
      s.validate();
    } catch (const UsageError& e) {
      throw UsageError(source + ": " + e.what());
    }
  }
  p.optimizer.validate();
  if (!(p.model.scale > 0)) throw UsageError(source + ": model scale must be positive");
  return p;
}

inline Protocol read_protocol(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open protocol " + path.string());
  return parse_protocol(in, path.string());
}

// ---------------------------------------------------------------- full protocol

inline std::string stage_dir_name(int index, const std::string& name) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d-", index + 1);
  return buf + name;
}

struct ProtocolRun {
  std::vector<fs::path> checkpoints;  // in order written or reused; first is the initialization
  int resumed_stages = 0;
};

/// Writes <out>/00-init, then one checkpoint per stage with epochs > 0. With
/// `resume`, completed stage checkpoints are loaded instead of retrained. On a
/// numeric failure the last finite parameters go to <out>/aborted-<stage>.
template <typename T>
ProtocolRun run_full_protocol(DmcsNet<T>& net, const std::vector<NetSample<T>>& data, const Protocol& protocol,
                              const fs::path& out, TrainingLog& log, std::uint64_t root_seed, bool resume = false,
                              const std::function<void(const LogRecord&)>& on_batch = {}) {
  protocol.validate();
  ProtocolRun run;
  const auto init_dir = out / "00-init";
  if (!(resume && is_checkpoint(init_dir))) save_checkpoint(init_dir, net, {net.arch(), "init", -1, root_seed});
  run.checkpoints.push_back(init_dir);

  int last_done = -1;
  if (resume)
    for (int i = 0; i < static_cast<int>(protocol.stages.size()); ++i)
      if (is_checkpoint(out / stage_dir_name(i, protocol.stages[i].name))) last_done = i;
  if (last_done >= 0) {
    load_checkpoint(out / stage_dir_name(last_done, protocol.stages[last_done].name), net);
    std::ifstream old(out / "training_log.tsv");
    if (old) log = TrainingLog::read(old);
    // keep only records of the stages being reused
    std::vector<LogRecord> kept;
    for (const auto& r : log.records)
      for (int i = 0; i <= last_done; ++i)
        if (r.stage == protocol.stages[i].name) kept.push_back(r);
    log.records = kept;
  }

  for (int i = 0; i < static_cast<int>(protocol.stages.size()); ++i) {
    const auto& st = protocol.stages[i];
    const auto dir = out / stage_dir_name(i, st.name);
    if (i <= last_done) {
      run.checkpoints.push_back(dir);
      ++run.resumed_stages;
      continue;
    }
    if (st.epochs == 0) continue;
    StageConfig seeded = st;
    seeded.seed = root_seed * 1000003ull + st.seed;
    try {
      run_stage(net, data, seeded, protocol.optimizer, log, on_batch);
    } catch (const NumericError&) {
      save_checkpoint(out / ("aborted-" + st.name), net, {net.arch(), st.name, i, root_seed});
      throw;
    }
    save_checkpoint(dir, net, {net.arch(), st.name, i, root_seed});
    run.checkpoints.push_back(dir);
    std::ofstream lf(out / "training_log.tsv");
    log.write(lf);
  }
  std::ofstream latest(out / "LATEST");
  latest << run.checkpoints.back().filename().string() << "\n";
  return run;
}

}  // namespace dmcs
