#include <gtest/gtest.h>

#include <array>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "gmptl/error.hpp"
#include "gmptl/pipeline.hpp"
#include "test_util.hpp"

using namespace gmptl;
namespace fs = std::filesystem;
using gmptl::testing::TempDir;

namespace {

// Small enough that a full five-fold run takes about a second.
PipelineConfig tiny(const fs::path& dir) {
  PipelineConfig c = parse_config(R"(
synth.n_utterances=50
synth.feature_dim=6
synth.frames_min=8
synth.frames_max=12
encoder.n_layers=3
encoder.model_dim=8
encoder.n_heads=2
encoder.ff_dim=12
stage1.bilstm_hidden=4
stage1.proj_hidden=8
stage1.embed_dim=8
stage1.epochs=1
gmp.scales=4,8
gmp.tap=-2
stage2.head_hidden=4
stage2.epochs=1
stage3.bilstm_hidden=4
stage3.proj_hidden=8
stage3.embed_dim=8
stage3.epochs=1
train.batch_size=8
train.lr=0.002
)");
  c.artifact_dir = dir;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string last_line(const std::string& text) {
  std::istringstream is(text);
  std::string line, last;
  while (std::getline(is, line))
    if (!line.empty()) last = line;
  return last;
}

struct EnvGuard {
  explicit EnvGuard(const char* value) { setenv(kArtifactRootEnv, value, 1); }
  ~EnvGuard() { unsetenv(kArtifactRootEnv); }
};

}  // namespace

TEST(Config, DefaultsAndDottedKeys) {
  const PipelineConfig d;
  EXPECT_EQ(d.train.lr, 1e-4);
  EXPECT_EQ(d.train.batch_size, 64);
  EXPECT_EQ(d.stage1.loss.alpha_e, 0.9);
  EXPECT_EQ(d.gmp.tap.layer_id, -3);

  const PipelineConfig c = parse_config("# comment\n gmp.scales = 4,16 \n\nstage3.mode=ce_ft\nstage3.m=0.35\n");
  EXPECT_EQ(c.gmp.scales, (std::vector<int>{4, 16}));
  EXPECT_EQ(c.stage3.mode, FinetuneMode::CEFT);
  EXPECT_EQ(c.stage3.ams.m, 0.35);
}

TEST(Config, DumpRoundTrips) {
  PipelineConfig c = tiny("some/dir");
  c.stage1.loss.alpha_e = 0.1 + 0.2;
  c.use_gender = false;
  const std::string text = dump_config(c);
  EXPECT_EQ(dump_config(parse_config(text)), text);
  EXPECT_NE(text.find("stage1.alpha_e=0.30000000000000004\n"), std::string::npos);
  EXPECT_NE(text.find("run.artifact_dir=some/dir\n"), std::string::npos);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  for (const char* bad : {"gmp.tapp=-3", "train.lr=fast", "gmp.scales=8,x", "stage3.mode=sgd", "novalue",
                          "train.seed=-1", "stage1.use_gender=maybe"}) {
    try {
      parse_config(bad);
      ADD_FAILURE() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::ConfigInvalid) << bad;
      EXPECT_EQ(exit_code_for(e.code()), 2);
    }
  }
}

TEST(Config, ValidateRejectsOutOfRangeValues) {
  PipelineConfig c;
  c.stage1.loss.alpha_e = 1.5;
  EXPECT_THROW(validate(c), Error);
  PipelineConfig t;
  t.gmp.tap = LayerTap{-13};
  try {
    validate(t);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TapOutOfRange);
    EXPECT_EQ(exit_code_for(e.code()), 2);
  }
}

TEST(Config, EnvironmentOverridesRelativeArtifactRoot) {
  {
    EnvGuard env("/tmp/gmptl_root");
    EXPECT_EQ(resolve_artifact_dir("runs/a"), fs::path("/tmp/gmptl_root/runs/a"));
    EXPECT_EQ(resolve_artifact_dir("/abs/x"), fs::path("/abs/x"));
  }
  EXPECT_EQ(resolve_artifact_dir("runs/a"), fs::path("runs/a"));
}

TEST(Pipeline, ArtifactContract) {
  TempDir dir;
  const auto res = run_pipeline(tiny(dir.path()));
  EXPECT_TRUE(fs::exists(dir / "config.txt"));
  const std::string report = slurp(dir / "report.txt");
  EXPECT_EQ(last_line(report), res.report.summary_line());
  EXPECT_EQ(last_line(report).rfind("MEAN UAR=", 0), 0u);
  for (int k = 1; k <= 5; ++k) {
    const FoldArtifacts a = fold_layout(dir.path(), k);
    for (const auto& p : {a.stage1_ckpt, a.stage2_ckpt, a.stage3_ckpt, a.codebooks}) {
      EXPECT_TRUE(fs::exists(p)) << p;
      EXPECT_TRUE(fs::exists(p.string() + ".meta")) << p;
    }
    for (const char* log : {"stage1_log.csv", "stage2_log.csv", "stage3_log.csv"})
      EXPECT_TRUE(fs::exists(a.dir / log)) << log;
    ASSERT_TRUE(fs::is_directory(a.gmp_dir));
    const auto n = std::distance(fs::directory_iterator(a.gmp_dir), fs::directory_iterator{});
    EXPECT_EQ(n, 40);  // one file per training utterance
    EXPECT_NO_THROW(verify_fold_chain(a));

    const CodebookSet books = read_codebooks(a.codebooks);
    const std::string test_session = res.report.folds[static_cast<std::size_t>(k - 1)].test_session;
    EXPECT_EQ(std::count(books.fit_sessions.begin(), books.fit_sessions.end(), test_session), 0);
    EXPECT_EQ(books.fit_sessions.size(), 4u);
  }
}

TEST(Pipeline, CeModeContract) {
  TempDir dir;
  PipelineConfig c = tiny(dir.path());
  c.stage3.mode = FinetuneMode::CEFT;
  run_pipeline(c);
  const FoldArtifacts a = fold_layout(dir.path(), 1);
  const std::string header = slurp(a.dir / "stage3_log.csv").substr(0, 40);
  EXPECT_EQ(header.rfind("step,ce_loss", 0), 0u) << header;
  const Checkpoint s3 = load_checkpoint(a.stage3_ckpt);
  for (const auto& [k, v] : s3.metadata) EXPECT_NE(k.rfind("ams.", 0), 0u) << k;
}

TEST(Pipeline, RerunGivesIdenticalSummary) {
  TempDir a, b;
  const auto ra = run_pipeline(tiny(a.path()));
  const auto rb = run_pipeline(tiny(b.path()));
  EXPECT_EQ(ra.report.summary_line(), rb.report.summary_line());
  EXPECT_EQ(slurp(a / "report.txt"), slurp(b / "report.txt"));
  EXPECT_EQ(slurp(a / "fold2/stage3.ckpt"), slurp(b / "fold2/stage3.ckpt"));
}

TEST(Pipeline, MismatchedChainIsRefused) {
  TempDir a, b;
  run_pipeline(tiny(a.path()));
  PipelineConfig other = tiny(b.path());
  other.train.seed = 9;
  run_pipeline(other);
  const Checkpoint s1_other = load_checkpoint(b / "fold1/stage1.ckpt");
  try {
    load_chained(a / "fold1/stage2.ckpt", s1_other);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ProvenanceMismatch);
  }
  // Swap in a foreign stage-1 checkpoint; the fold chain no longer verifies.
  fs::copy_file(b / "fold1/stage1.ckpt", a / "fold1/stage1.ckpt", fs::copy_options::overwrite_existing);
  fs::copy_file(b / "fold1/stage1.ckpt.meta", a / "fold1/stage1.ckpt.meta", fs::copy_options::overwrite_existing);
  try {
    verify_fold_chain(fold_layout(a.path(), 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ProvenanceMismatch);
  }
}

TEST(Pipeline, PermutedLabelsKeepLabelMarginals) {
  PipelineConfig c = tiny("unused");
  const Corpus plain = load_corpus(c);
  c.permute_labels = true;
  const Corpus perm = load_corpus(c);
  ASSERT_EQ(plain.size(), perm.size());
  std::array<int, 4> a{}, b{};
  int moved = 0;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    ++a[static_cast<std::size_t>(index_of(plain[i].emotion))];
    ++b[static_cast<std::size_t>(index_of(perm[i].emotion))];
    moved += plain[i].emotion != perm[i].emotion;
  }
  EXPECT_EQ(a, b);
  EXPECT_GT(moved, 10);
}

TEST(Ablation, GridShapes) {
  PipelineConfig base;
  base.encoder.n_layers = 6;
  const auto table2 = expand_grid(parse_ablation_axes("use_gender,finetune_mode", 1), base);
  ASSERT_EQ(table2.size(), 4u);
  EXPECT_EQ(table2[0].name, "MPs_CE-FT_tap-3");
  EXPECT_EQ(table2[3].name, "GMPs_Hybrid-FT_tap-3");
  const auto table3 = expand_grid(parse_ablation_axes("tap=-1:-6", 3), base);
  ASSERT_EQ(table3.size(), 6u);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(table3[static_cast<std::size_t>(i)].tap, -1 - i);
  EXPECT_EQ(parse_ablation_axes("tap=-1:-6", 3).repeats, 3);
  base.encoder.n_layers = 4;
  EXPECT_THROW(expand_grid(parse_ablation_axes("tap=-1:-6", 1), base), Error);
}

TEST(Ablation, EmptyOrUnknownAxesAreRejected) {
  for (const char* axes : {"", " , ", "dropout"}) {
    try {
      parse_ablation_axes(axes, 1);
      ADD_FAILURE() << axes;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::ConfigInvalid) << axes;
    }
  }
  try {
    expand_grid(AblationGrid{}, PipelineConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigInvalid);
  }
}

TEST(Ablation, CellRerunIsBitwiseIdentical) {
  TempDir dir;
  PipelineConfig base = tiny(dir.path());
  const auto table = run_ablation(parse_ablation_axes("finetune_mode", 1), base);
  ASSERT_EQ(table.cells.size(), 2u);
  const std::string tsv = slurp(dir / "ablation.tsv");
  EXPECT_EQ(tsv, table.to_text());

  const fs::path cell = dir / table.cells[1].name / "seed0";
  const std::string report = slurp(cell / "report.txt");
  const std::string ckpt = slurp(cell / "fold4/stage3.ckpt");
  fs::remove_all(cell);
  PipelineConfig again = base;
  again.stage3.mode = table.cells[1].mode;
  again.artifact_dir = cell;
  run_pipeline(again);
  EXPECT_EQ(slurp(cell / "report.txt"), report);
  EXPECT_EQ(slurp(cell / "fold4/stage3.ckpt"), ckpt);
}
