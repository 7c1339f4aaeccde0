#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "dmcs/checkpoint.hpp"
#include "dmcs/dataio.hpp"
#include "dmcs/trainer.hpp"
#include "test_util.hpp"
#include "tiny_net.hpp"

using namespace dmcs;
using nn::Group;

namespace {

std::vector<NetSample<float>> tiny_data(int n = 6) {
  SynthConfig cfg;
  cfg.height = cfg.width = 24;
  cfg.min_objects = 1;
  cfg.max_objects = 2;
  cfg.min_radius = 3;
  cfg.max_radius = 5;
  const auto s = generate_synthetic(cfg, n, 1);
  return prepare_samples<float>(s, compute_channel_means(s));
}

Protocol tiny_protocol() {
  Protocol p = desk_protocol();
  p.model.scale = 1;
  for (auto& s : p.stages) s.epochs = 1;
  p.optimizer.batch_size = 3;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool same_checkpoint(const fs::path& a, const fs::path& b) {
  for (const auto& e : fs::directory_iterator(a))
    if (slurp(e.path()) != slurp(b / e.path().filename())) return false;
  return true;
}

nn::ParamSet<double> one_param(nn::ParamKind kind, std::vector<double> v, Group g = Group::trunk) {
  nn::ParamSet<double> s;
  nn::ParamTensor<double> t;
  t.name = "p";
  t.kind = kind;
  t.group = g;
  t.shape = {static_cast<int>(v.size())};
  s.add(t);
  s[0].value = std::move(v);
  return s;
}

}  // namespace

TEST(Sgd, TwoStepsByHand) {
  auto p = one_param(nn::ParamKind::conv_weight, {1.0});
  auto g = one_param(nn::ParamKind::conv_weight, {0.5});
  OptimizerState<double> st(OptimizerConfig{}, p);
  sgd_step(p, g, st, 0.1, nn::GroupSet::all());
  EXPECT_NEAR(p[0].value[0], 0.9498, 1e-15);
  sgd_step(p, g, st, 0.1, nn::GroupSet::all());
  EXPECT_NEAR(p[0].value[0], 0.85443004, 1e-15);
}

TEST(Sgd, MatchesReferenceLoop) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> v0(7);
  for (auto& v : v0) v = n(rng);
  auto p = one_param(nn::ParamKind::bias, v0);
  OptimizerConfig cfg{0.8, 0.01, 1, LossNorm::sum};
  OptimizerState<double> st(cfg, p);
  std::vector<double> ref = v0, vel(7, 0.0);
  for (int step = 0; step < 3; ++step) {
    auto g = p.zeros_like();
    for (auto& v : g[0].value) v = n(rng);
    for (int i = 0; i < 7; ++i) {
      vel[i] = 0.8 * vel[i] + g[0].value[i] + 0.01 * ref[i];
      ref[i] -= 0.05 * vel[i];
    }
    sgd_step(p, g, st, 0.05, nn::GroupSet::all());
  }
  for (int i = 0; i < 7; ++i) EXPECT_DOUBLE_EQ(p[0].value[i], ref[i]);
}

TEST(Sgd, DecaySkipsFuseAndUpsampleWeights) {
  for (auto kind : {nn::ParamKind::fuse_weight, nn::ParamKind::upsample}) {
    auto p = one_param(kind, {0.2, 0.2});
    OptimizerState<double> st(OptimizerConfig{}, p);
    sgd_step(p, p.zeros_like(), st, 1.0, nn::GroupSet::all());
    EXPECT_EQ(p[0].value[0], 0.2);
  }
  auto w = one_param(nn::ParamKind::conv_weight, {0.2});
  OptimizerState<double> st(OptimizerConfig{}, w);
  sgd_step(w, w.zeros_like(), st, 1.0, nn::GroupSet::all());
  EXPECT_LT(w[0].value[0], 0.2);
}

TEST(Sgd, FrozenLrZeroAndNonFinite) {
  auto p = one_param(nn::ParamKind::conv_weight, {1.0, 2.0}, Group::edge);
  auto g = one_param(nn::ParamKind::conv_weight, {0.5, 0.5}, Group::edge);
  OptimizerState<double> st(OptimizerConfig{}, p);
  sgd_step(p, g, st, 0.1, nn::GroupSet{Group::trunk});
  EXPECT_EQ(p[0].value, (std::vector<double>{1.0, 2.0}));
  sgd_step(p, g, st, 0.0, nn::GroupSet::all());
  EXPECT_EQ(p[0].value, (std::vector<double>{1.0, 2.0}));
  g[0].value[1] = std::nan("");
  EXPECT_THROW(sgd_step(p, g, st, 0.1, nn::GroupSet::all()), NumericError);
  EXPECT_EQ(p[0].value, (std::vector<double>{1.0, 2.0}));
}

TEST(Stage, TouchesOnlyTrainableGroups) {
  const auto data = tiny_data();
  const auto proto = tiny_protocol();
  DmcsNet<float> net(dmcs::testing::tiny_arch(), 1);
  TrainingLog log;
  for (const auto& st : proto.stages) {
    const auto before = net.params();
    run_stage(net, data, st, proto.optimizer, log);
    for (Group g : nn::kAllGroups) {
      if (st.trainable.contains(g)) {
        EXPECT_FALSE(net.params().group_equal(before, g)) << st.name << " " << nn::group_name(g);
      } else {
        EXPECT_TRUE(net.params().group_equal(before, g)) << st.name << " " << nn::group_name(g);
      }
    }
  }
  EXPECT_EQ(log.records.size(), 8u);  // 4 stages x 2 batches
  EXPECT_EQ(log.records.back().iteration, 8);
}

TEST(Stage, ZeroLearningRateStillRuns) {
  const auto data = tiny_data(3);
  auto st = tiny_protocol().stages[0];
  st.lr = 0;
  st.init.clear();
  DmcsNet<float> net(dmcs::testing::tiny_arch(), 1);
  const auto before = net.params();
  TrainingLog log;
  run_stage(net, data, st, OptimizerConfig{}, log);
  EXPECT_TRUE(net.params() == before);
  EXPECT_EQ(log.records.size(), 1u);
}

TEST(Stage, LossDecreases) {
  const auto data = tiny_data(4);
  auto st = tiny_protocol().stages[0];
  st.epochs = 15;
  OptimizerConfig opt;
  opt.batch_size = 4;
  opt.loss_norm = LossNorm::mean;
  DmcsNet<float> net(dmcs::testing::tiny_arch(), 1);
  TrainingLog log;
  run_stage(net, data, st, opt, log);
  const auto m = log.epoch_means("region");
  ASSERT_EQ(m.size(), 15u);
  EXPECT_LT(m.back(), 0.8 * m.front());
}

TEST(Stage, ValidatesConfig) {
  StageConfig s{"x", Objective::region, -1, {Group::trunk}, 1, 0, {}, 0};
  EXPECT_THROW(s.validate(), UsageError);
  s.lr = 0;
  EXPECT_NO_THROW(s.validate());
  s.trainable = nn::GroupSet::all();
  EXPECT_THROW(s.validate(), UsageError);
  s.objective = Objective::finetune;
  EXPECT_NO_THROW(s.validate());
  s.trainable = {};
  EXPECT_THROW(s.validate(), UsageError);
}

TEST(Protocol, FormatParseRoundTrip) {
  for (const auto& p : {full_protocol(), desk_protocol()}) {
    const auto text = format_protocol(p);
    std::istringstream in(text);
    const auto q = parse_protocol(in);
    EXPECT_EQ(format_protocol(q), text);
    ASSERT_EQ(q.stages.size(), 4u);
  }
  const auto full = full_protocol();
  EXPECT_EQ(full.stages[1].lr, 1e-9);
  EXPECT_EQ(full.stages[3].lambda_e, 1e-6);
  EXPECT_TRUE(full.stages[3].trainable == nn::GroupSet::all());
}

TEST(Protocol, ErrorsCarryLineNumbers) {
  auto expect_line = [](const std::string& text, const std::string& where) {
    std::istringstream in(text);
    try {
      parse_protocol(in, "p.cfg");
      ADD_FAILURE() << "accepted: " << text;
    } catch (const UsageError& e) {
      EXPECT_NE(std::string(e.what()).find(where), std::string::npos) << e.what();
    }
  };
  expect_line("[model]\nscale = 1\nbogus = 2\n", "p.cfg:3:");
  expect_line("# c\n[optimizer]\nmomentum = fast\n", "p.cfg:3:");
  expect_line("[stage region]\ntrainable = w, w_x\n", "p.cfg:2:");
  expect_line("[stage region]\nepochs = 1.5\n", "p.cfg:2:");
  expect_line("lr = 1\n", "p.cfg:1:");
  expect_line("[weird]\n", "p.cfg:1:");
  expect_line("[stage region]\ntrainable = w, w_r, w_e, w_f\n", "only the finetune stage");
  expect_line("[stage fusion]\nlr = -1\ntrainable = w_f\n", "learning rate");
}

TEST(Checkpoint, RoundTripAndErrors) {
  const auto dir = dmcs::testing::temp_dir("ckpt");
  DmcsNet<float> net(dmcs::testing::tiny_arch(), 4);
  save_checkpoint(dir / "a", net, {net.arch(), "edge", 1, 99});
  CheckpointInfo info;
  const auto back = open_checkpoint<float>(dir / "a", &info);
  EXPECT_TRUE(back.params() == net.params());
  EXPECT_EQ(info.stage, "edge");
  EXPECT_EQ(info.seed, 99u);
  EXPECT_EQ(info.arch.describe(), net.arch().describe());
  EXPECT_EQ(parse_arch(net.arch().describe()).hash(), net.arch().hash());

  auto other = dmcs::testing::tiny_arch();
  other.fc_width = 12;
  DmcsNet<float> wrong(other, 1);
  EXPECT_THROW(load_checkpoint(dir / "a", wrong), DataError);
  EXPECT_FALSE(is_checkpoint(dir / "missing"));
  EXPECT_THROW(read_checkpoint_info(dir / "missing"), DataError);

  fs::copy(dir / "a", dir / "b");
  fs::resize_file(dir / "b" / "region.fc6.w.bin", 8);
  EXPECT_THROW(load_checkpoint(dir / "b", net), DataError);
}

TEST(FullProtocol, DeterministicAndResumable) {
  const auto data = tiny_data();
  const auto proto = tiny_protocol();
  const auto root = dmcs::testing::temp_dir("protocol");
  auto run = [&](const fs::path& out, bool resume) {
    DmcsNet<float> net(dmcs::testing::tiny_arch(), 0);
    TrainingLog log;
    return run_full_protocol(net, data, proto, out, log, 5, resume);
  };
  const auto a = run(root / "a", false);
  run(root / "b", false);
  ASSERT_EQ(a.checkpoints.size(), 5u);
  for (const auto& c : a.checkpoints) EXPECT_TRUE(same_checkpoint(c, root / "b" / c.filename())) << c;

  // interrupted after two stages, then resumed
  fs::copy(root / "a", root / "c", fs::copy_options::recursive);
  fs::remove_all(root / "c" / "03-fusion");
  fs::remove_all(root / "c" / "04-finetune");
  const auto c = run(root / "c", true);
  EXPECT_EQ(c.resumed_stages, 2);
  EXPECT_TRUE(same_checkpoint(root / "a" / "04-finetune", root / "c" / "04-finetune"));
  EXPECT_EQ(slurp(root / "a" / "training_log.tsv").size() > 0, true);

  // a different root seed changes the result
  DmcsNet<float> net(dmcs::testing::tiny_arch(), 0);
  TrainingLog log;
  run_full_protocol(net, data, proto, root / "d", log, 6);
  EXPECT_FALSE(same_checkpoint(root / "a" / "04-finetune", root / "d" / "04-finetune"));
}

TEST(FullProtocol, ZeroEpochStageIsSkipped) {
  const auto data = tiny_data(3);
  auto proto = tiny_protocol();
  proto.stages[2].epochs = 0;
  const auto root = dmcs::testing::temp_dir("protocol0");
  DmcsNet<float> net(dmcs::testing::tiny_arch(), 0);
  TrainingLog log;
  const auto r = run_full_protocol(net, data, proto, root, log, 1);
  EXPECT_EQ(r.checkpoints.size(), 4u);
  EXPECT_FALSE(fs::exists(root / "03-fusion"));
  EXPECT_EQ(slurp(root / "LATEST"), "04-finetune\n");
  for (const auto& rec : log.records) EXPECT_NE(rec.stage, "fusion");
}
