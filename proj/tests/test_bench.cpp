#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <gtest/gtest.h>

#include "drl/checkpoint.hpp"
#include "drl/config.hpp"
#include "drl/error.hpp"
#include "drl/experiment.hpp"
#include "drl/metrics.hpp"
#include "support.hpp"

using namespace drl;
namespace fs = std::filesystem;

namespace {

// Three-stage stream, short schedules.
RunConfig small_config(const std::string& dir) {
  RunConfig c;
  c.stream.incremental_classes = 6;
  c.stream.train_per_class = 16;
  c.stream.test_per_class = 8;
  c.optimizer.epochs = 3;
  c.pretrain.epochs = 3;
  c.output_dir = (fs::temp_directory_path() / ("drl_test_" + dir)).string();
  fs::remove_all(c.output_dir);
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::uint8_t> bytes_of(const fs::path& p) {
  const std::string s = slurp(p);
  return {s.begin(), s.end()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

BackboneCache& shared_cache() {
  static BackboneCache c;
  return c;
}

const ExperimentResult& small_run() {
  static const ExperimentResult r = [] {
    ExperimentOptions o;
    o.quiet = true;
    o.cache = &shared_cache();
    return run_experiment(small_config("bench_a"), o);
  }();
  return r;
}

}  // namespace

TEST(Metrics, AverageAccuracy) {
  const std::vector<double> a{80.0, 60.0, 40.0};
  EXPECT_DOUBLE_EQ(average_accuracy(a), 60.0);
  const std::vector<double> one{73.5};
  EXPECT_EQ(average_accuracy(one), 73.5);
  EXPECT_THROW(average_accuracy(std::vector<double>{}), ConfigError);
}

TEST(Metrics, CsvRoundTripIsExact) {
  MetricsTable t;
  t.stages = {{1, 12, 217, 240, 100.0 * 217 / 240}, {2, 14, 199, 280, 100.0 / 3.0}};
  const MetricsTable back = MetricsTable::from_csv(t.to_csv());
  ASSERT_EQ(back.stages.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.stages[i].stage, t.stages[i].stage);
    EXPECT_EQ(back.stages[i].seen_classes, t.stages[i].seen_classes);
    EXPECT_EQ(back.stages[i].correct, t.stages[i].correct);
    EXPECT_EQ(back.stages[i].accuracy, t.stages[i].accuracy);
  }
  EXPECT_EQ(back.a_bar(), t.a_bar());
  EXPECT_EQ(t.a_last(), 100.0 / 3.0);
}

TEST(Config, JsonRoundTrip) {
  RunConfig c;
  apply_preset(c, "drl-table-best");
  c.ipa.fusion = FusionMode::gate_extra;
  c.loss.das.k_plus = 1.5;
  c.loss.das.k_minus = 0.5;
  c.seed = 42;
  c.stream.seed = 42;
  const RunConfig back = config_from_json(to_json(c));
  EXPECT_TRUE(back == c);
  EXPECT_EQ(config_digest(back), config_digest(c));
  RunConfig other = c;
  other.tau = 0.2;
  EXPECT_NE(config_digest(other), config_digest(c));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_json(R"({"sed": 3})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"ipa": {"fusion": "gate_adapt", "gama": 0.9}})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"ipa": {"fusion": "blend"}})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"tau": 0})"), ConfigError);
  EXPECT_THROW(config_from_json("{"), ConfigError);
  const RunConfig partial = config_from_json(R"({"loss": {"kind": "ce"}})");
  EXPECT_EQ(partial.loss.kind, LossKind::ce);
  EXPECT_EQ(partial.optimizer.epochs, RunConfig{}.optimizer.epochs);
}

TEST(Config, Presets) {
  RunConfig c;
  apply_preset(c, "drl-default");
  EXPECT_EQ(c.loss.alpha, 0.5);
  EXPECT_EQ(c.loss.das.lambda_p, 3.0);
  EXPECT_EQ(c.loss.das.lambda_n, 1.0);
  EXPECT_EQ(c.loss.das.k, 1.0);
  EXPECT_EQ(c.ipa.gamma, 0.9);
  apply_preset(c, "drl-table-best");
  EXPECT_EQ(c.loss.das.lambda_p, 1.0);
  EXPECT_EQ(c.loss.das.lambda_n, 2.0);
  EXPECT_THROW(apply_preset(c, "nope"), ConfigError);
  EXPECT_EQ(preset_names().size(), 2u);
}

TEST(Config, SeedFromEnvironment) {
  RunConfig c;
  ::unsetenv("DRL_SEED");
  EXPECT_FALSE(apply_seed_env(c));
  ::setenv("DRL_SEED", "7", 1);
  EXPECT_TRUE(apply_seed_env(c));
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.stream.seed, 7u);
  ::setenv("DRL_SEED", "7x", 1);
  EXPECT_THROW(apply_seed_env(c), ConfigError);
  ::unsetenv("DRL_SEED");
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const ExperimentResult& r = small_run();
  const fs::path dir = r.config.output_dir;
  const auto original = bytes_of(dir / "stage_3.ckpt");
  const Checkpoint ck = load_checkpoint(dir / "stage_3.ckpt");
  EXPECT_TRUE(ck.config == r.config);
  EXPECT_EQ(ck.state.stage_index, 3);
  EXPECT_EQ(encode_checkpoint(ck.config, ck.state, ck.store), original);
  const auto scratch = drl::testing::scratch_dir("ckpt_resave");
  save_checkpoint(scratch / "again.ckpt", ck.config, ck.state, ck.store);
  EXPECT_EQ(bytes_of(scratch / "again.ckpt"), original);
}

TEST(Checkpoint, LoadedStateForwardsIdentically) {
  const ExperimentResult& r = small_run();
  const Checkpoint ck = load_checkpoint(fs::path(r.config.output_dir) / "stage_3.ckpt");
  for (const auto& ds : r.stream.stages)
    for (const auto& s : ds.test) EXPECT_TRUE(ck.state.forward(s.image).features.bit_equal(r.state.forward(s.image).features));
  for (const auto& [c, p] : ck.store.classes())
    for (std::size_t s = 0; s < p.segments.size(); ++s)
      if (ck.store.has_segment(c, s)) {
        EXPECT_TRUE(p.segments[s].bit_equal(r.store.segment(c, s))) << c;
      }
}

TEST(Checkpoint, NamedErrorsAndAtomicDecode) {
  const ExperimentResult& r = small_run();
  const auto good = bytes_of(fs::path(r.config.output_dir) / "stage_1.ckpt");
  const auto dir = drl::testing::scratch_dir("ckpt_bad");

  auto expect_error = [&](std::vector<std::uint8_t> b, auto tag) {
    using E = decltype(tag);
    EXPECT_THROW(decode_checkpoint(b), E) << b.size();
    write_bytes(dir / "bad.ckpt", b);
    EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), E);
    EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), CheckpointError);
  };
  auto magic = good;
  magic[0] = 'X';
  expect_error(magic, CheckpointMagicError(""));
  auto version = good;
  version[4] = 9;
  expect_error(version, CheckpointVersionError(""));
  for (std::size_t keep : {std::size_t{3}, std::size_t{20}, good.size() / 2, good.size() - 1})
    expect_error(std::vector<std::uint8_t>(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(keep)),
                 CheckpointTruncatedError(""));
  auto flipped = good;
  flipped[good.size() / 2] ^= 0x10;
  expect_error(flipped, CheckpointCorruptError(""));
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
  EXPECT_NO_THROW(decode_checkpoint(good));
}

TEST(Checkpoint, Inspect) {
  const ExperimentResult& r = small_run();
  const fs::path p = fs::path(r.config.output_dir) / "stage_2.ckpt";
  const CheckpointInfo info = inspect_checkpoint(p);
  EXPECT_EQ(info.version, kCheckpointVersion);
  EXPECT_EQ(info.stage_index, 2);
  EXPECT_EQ(info.streams, 3u);  // backbone plus two adapter streams
  EXPECT_EQ(info.prototype_classes, 4u);
  EXPECT_EQ(info.bytes, fs::file_size(p));
  EXPECT_EQ(info.config_digest, config_digest(r.config));
  EXPECT_EQ(info.file_digest, r.checkpoint_digests[1]);
  EXPECT_EQ(config_from_json(info.config_json), r.config);
}

TEST(Experiment, ArtifactsWritten) {
  const fs::path dir = small_run().config.output_dir;
  for (const char* f : {"config.json", "manifest.csv", "metrics.csv", "summary.csv", "reports.json", "embeddings.csv",
                        "stage_1.ckpt", "stage_2.ckpt", "stage_3.ckpt"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_FALSE(fs::exists(dir / ".lock"));
  EXPECT_EQ(load_config(dir / "config.json"), small_run().config);
}

TEST(Experiment, ABarRecomputedFromMetricsFile) {
  const ExperimentResult& r = small_run();
  const MetricsTable m = MetricsTable::from_csv(slurp(fs::path(r.config.output_dir) / "metrics.csv"));
  ASSERT_EQ(m.stages.size(), 3u);
  double s = 0.0;
  for (const auto& st : m.stages) {
    EXPECT_EQ(st.accuracy, 100.0 * static_cast<double>(st.correct) / static_cast<double>(st.total));
    s += st.accuracy;
  }
  EXPECT_EQ(s / 3.0, r.metrics.a_bar());
  EXPECT_EQ(m.a_bar(), r.metrics.a_bar());
  EXPECT_EQ(m.stages[2].seen_classes, 6);
  EXPECT_EQ(m.stages[2].total, 48u);
}

TEST(Experiment, SummaryFormat) {
  const ExperimentResult& r = small_run();
  std::istringstream in(slurp(fs::path(r.config.output_dir) / "summary.csv"));
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, kSummaryHeader);
  EXPECT_EQ(row.rfind("drl,gate_adapt,r_att,das+kd,0,", 0), 0u) << row;
  const std::string tail = row.substr(row.find(",0,") + 3);
  const auto comma = tail.find(',');
  // four decimals in both accuracy columns
  EXPECT_EQ(tail.substr(0, comma).size() - tail.substr(0, comma).find('.'), 5u);
  EXPECT_EQ(tail.substr(comma + 1).size() - tail.substr(comma + 1).find('.'), 5u);
}

TEST(Experiment, EmbeddingsReloadAndClassify) {
  const ExperimentResult& r = small_run();
  const auto rows = read_embeddings(fs::path(r.config.output_dir) / "embeddings.csv");
  ASSERT_EQ(rows.size(), 6u * 8u);
  std::size_t correct = 0;
  for (const auto& row : rows) {
    EXPECT_EQ(row.feature.size(), 4u * 32u);
    EXPECT_EQ(row.stage, r.state.stage_of(row.label));
    correct += classify(row.feature, r.store).predicted == row.label;
  }
  std::size_t direct = 0;
  for (const auto& ds : r.stream.stages)
    for (const auto& s : ds.test) direct += classify(r.state.forward(s.image).features, r.store).predicted == s.label;
  EXPECT_EQ(correct, direct);
}

TEST(Experiment, RepeatRunIsBitIdentical) {
  ExperimentOptions o;
  o.quiet = true;
  o.cache = &shared_cache();
  o.write_artifacts = false;
  const ExperimentResult b = run_experiment(small_config("bench_a"), o);
  const ExperimentResult& a = small_run();
  EXPECT_EQ(a.checkpoint_digests, b.checkpoint_digests);
  EXPECT_EQ(a.metrics.to_csv(), b.metrics.to_csv());
  // a cold cache pretrains the same backbone
  ExperimentOptions cold = o;
  cold.cache = nullptr;
  EXPECT_EQ(run_experiment(small_config("bench_a"), cold).checkpoint_digests, a.checkpoint_digests);
}

TEST(Experiment, LossKindChangesOnlyTheObjective) {
  ExperimentOptions o;
  o.quiet = true;
  o.cache = &shared_cache();
  o.write_artifacts = false;
  RunConfig c = small_config("bench_ce");
  c.loss.kind = LossKind::ce;
  const ExperimentResult ce = run_experiment(c, o);
  EXPECT_EQ(shared_cache().size(), 1u);
  EXPECT_NE(ce.checkpoint_digests, small_run().checkpoint_digests);
  EXPECT_EQ(ce.stream.stages[0].train[0].id, small_run().stream.stages[0].train[0].id);
  EXPECT_EQ(summary_row(c, ce.metrics).rfind("drl,gate_adapt,r_att,ce+kd,0,", 0), 0u);
}

TEST(Experiment, LockedDirectoryRejected) {
  RunConfig c = small_config("bench_lock");
  fs::create_directories(c.output_dir);
  std::ofstream(fs::path(c.output_dir) / ".lock") << "999999\n";
  ExperimentOptions o;
  o.quiet = true;
  o.cache = &shared_cache();
  EXPECT_THROW(run_experiment(c, o), IoError);
  fs::remove_all(c.output_dir);
}

TEST(Experiment, FinetuneMethod) {
  ExperimentOptions o;
  o.quiet = true;
  o.cache = &shared_cache();
  RunConfig c = small_config("bench_ft");
  c.method = Method::finetune;
  const ExperimentResult r = run_experiment(c, o);
  ASSERT_EQ(r.metrics.stages.size(), 3u);
  EXPECT_EQ(r.metrics.stages[2].seen_classes, 6);
  EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / "summary.csv"));
  EXPECT_FALSE(fs::exists(fs::path(c.output_dir) / "stage_1.ckpt"));
}

TEST(Ablation, WritesOneRowPerRun) {
  RunConfig c = small_config("bench_ablate");
  c.stream.incremental_classes = 4;
  AblationSpec spec;
  spec.fusions = {FusionMode::sum, FusionMode::gate_adapt};
  spec.attentions = {AttentionMode::r_att};
  spec.seeds = {0};
  const auto rows = ablate(c, spec, shared_cache(), true, true);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].config.ipa.fusion, FusionMode::sum);
  std::istringstream in(slurp(fs::path(c.output_dir) / "summary.csv"));
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  EXPECT_EQ(n, 3);
  EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / "ablation.csv"));
}
