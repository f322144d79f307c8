#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "dclr/app.hpp"

using namespace dclr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dclr_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Small enough that every stage runs in well under a second per slide.
config::RunConfig tiny(const fs::path& out) {
  config::RunConfig c;
  std::istringstream text(R"(
run.seed = 3
run.threads = 1
datagen.slides = 4
datagen.side = 128
datagen.radius_min = 12
datagen.radius_max = 22
datagen.blobs = 1
encoder.depth = 2
encoder.base_channels = 4
encoder.input_side = 16
encoder.embed_dim = 8
encoder.hidden_dim = 8
encoder.proj_dim = 4
contrastive.batch = 8
pretrain.max_epochs = 1
pipeline.patch_side = 32
pipeline.train_stride = 32
pipeline.segment_stride = 16
pipeline.kmeans_restarts = 2
)");
  config::apply_text(c, text);
  c.out = out.string();
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DCLR_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, UnknownKeysRejected) {
  config::RunConfig c;
  EXPECT_THROW(config::set(c, "encoder.depthh", "2"), config::ConfigError);
  std::istringstream text("crf.iterations = 3\nbogus.key = 1\n");
  EXPECT_THROW(config::apply_text(c, text), config::ConfigError);
  EXPECT_THROW(config::apply_override(c, "crf.iterations"), config::ConfigError);
  EXPECT_THROW(config::set(c, "crf.iterations", "three"), config::ConfigError);
}

TEST(Config, TextRoundTrip) {
  config::RunConfig c;
  config::apply_override(c, "pretrain.lr=0.0125");
  config::apply_override(c, "encoder.extra_bottleneck_conv=false");
  config::apply_override(c, "pipeline.probability = distance");
  const auto text = config::to_text(c);
  config::RunConfig d;
  std::istringstream in(text);
  config::apply_text(d, in);
  EXPECT_EQ(config::to_text(d), text);
  EXPECT_EQ(d.lr, 0.0125);
  EXPECT_FALSE(d.encoder.extra_bottleneck_conv);
}

TEST(Config, DefaultsAndShippedConfigsValidate) {
  config::RunConfig c;
  EXPECT_NO_THROW(config::validate(c));
  EXPECT_EQ(c.lr, 0.001);
  EXPECT_EQ(c.batch, 64u);
  EXPECT_EQ(c.patience, 20u);
  EXPECT_EQ(c.temperature, 0.5);
  for (const char* name : {"acceptance.conf", "hard.conf"}) {
    config::RunConfig k;
    config::apply_file(k, fs::path(DCLR_SOURCE_DIR) / "configs" / name);
    EXPECT_NO_THROW(config::validate(k)) << name;
  }
  c.crf.filter_size = 4;
  EXPECT_ANY_THROW(config::validate(c));
}

TEST(App, EvalOfGroundTruthGivesPerfectDice) {
  const auto root = scratch("eval_gt");
  auto cfg = tiny(root);
  app::cmd_gen(cfg, std::cerr);
  // Hand-built segment stage: the ground truth itself, one whole-slide patch.
  const auto seg = cfg.dir("segment");
  fs::create_directories(seg);
  std::vector<app::detail::Row> index;
  for (const auto& e : app::read_dataset(cfg.dir("data"))) {
    if (e.split != "test") continue;
    fs::copy_file(e.mask, seg / (e.id + ".mask.png"));
    app::detail::write_table(seg / (e.id + ".patches.tsv"), app::kPatchesHeader, app::kPatchColumns,
                             {{"0", "0", "32", "0", "0.000000"}});
    index.push_back({e.id, "1"});
  }
  app::detail::write_table(seg / "index.tsv", app::kSegmentHeader, app::kSegmentColumns, index);
  const auto m = app::cmd_eval(cfg, std::cerr);
  EXPECT_EQ(m.dice_pre, 1.0);
  EXPECT_TRUE(std::isnan(m.dice_post));  // no refine stage
  EXPECT_NE(slurp(cfg.dir("eval") / "metrics.txt").find("dice_pre_crf = 1.000000"), std::string::npos);
  EXPECT_TRUE(fs::exists(cfg.dir("eval") / "config.txt"));
  fs::remove_all(root);
}

TEST(App, MissingInputIsNamed) {
  const auto root = scratch("missing");
  auto cfg = tiny(root);
  try {
    app::cmd_eval(cfg, std::cerr);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("manifest.tsv"), std::string::npos);
  }
  fs::remove_all(root);
}

TEST(App, EndToEndIsDeterministicAndIdempotent) {
  const auto a = scratch("e2e_a"), b = scratch("e2e_b");
  const auto ma = app::run_all(tiny(a), std::cerr);
  app::run_all(tiny(b), std::cerr);
  EXPECT_EQ(ma.slides.size(), 1u);
  EXPECT_GT(ma.labelled_patches, 0u);
  EXPECT_EQ(slurp(a / "eval" / "metrics.txt"), slurp(b / "eval" / "metrics.txt"));
  EXPECT_EQ(slurp(a / "eval" / "summary.tsv"), slurp(b / "eval" / "summary.tsv"));
  // Rerunning one stage in place reproduces its outputs.
  const auto before = slurp(a / "refine" / "index.tsv");
  app::cmd_refine(tiny(a), std::cerr);
  app::cmd_eval(tiny(a), std::cerr);
  EXPECT_EQ(slurp(a / "refine" / "index.tsv"), before);
  EXPECT_EQ(slurp(a / "eval" / "metrics.txt"), slurp(b / "eval" / "metrics.txt"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Cli, ExitCodes) {
  const auto root = scratch("cli");
  const std::string out = " --out " + root.string();
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("gen --set no.such=1" + out), 2);
  EXPECT_EQ(run_cli("gen --config " + (root / "absent.conf").string() + out), 2);
  EXPECT_EQ(run_cli("eval" + out), 3);
  EXPECT_EQ(run_cli("gen --threads 1 --seed 4 --set datagen.slides=2 --set datagen.side=128 "
                    "--set datagen.radius_min=12 --set datagen.radius_max=22" + out),
            0);
  EXPECT_TRUE(fs::exists(root / "data" / "manifest.tsv"));
  EXPECT_NE(slurp(root / "data" / "config.txt").find("run.seed = 4"), std::string::npos);
  fs::remove_all(root);
}
