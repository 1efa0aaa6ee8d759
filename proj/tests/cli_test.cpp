#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include "mechlearn/io.hpp"
#include "mechlearn/pipeline.hpp"

namespace ml = mechlearn;
namespace fs = std::filesystem;

namespace {

const std::string kCli = MECHLEARN_CLI;

fs::path dir() {
  static const fs::path d = [] {
    const fs::path p = fs::temp_directory_path() / ("mechlearn_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
  }();
  return d;
}

int run(const std::string& args) {
  const std::string cmd = kCli + " " + args + " > " + (dir() / "stdout.txt").string() + " 2> " +
                          (dir() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string p(const std::string& name) { return (dir() / name).string(); }

// A phantom directory shared by the tests in this file.
const fs::path& phantom() {
  static const fs::path out = [] {
    ml::PhantomSpec spec;
    spec.growth = {120, 0.012, 0.8, 0.05, 10, 0.2, 40};
    spec.observation_times = {0, 20, 40, 60, 80, 100};
    ml::write_json(p("spec.json"), ml::to_json(spec));
    EXPECT_EQ(run("phantom --spec " + p("spec.json") + " --out " + p("ph") + " --seed 5"), 0);
    return dir() / "ph";
  }();
  return out;
}

std::string ph(const std::string& name) { return (phantom() / name).string(); }

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("fit --series"), 2);
  EXPECT_EQ(run("nonsense"), 2);
}

TEST(Cli, PhantomWritesManifest) {
  const auto m = ml::read_json(phantom() / "manifest.json");
  EXPECT_EQ(m["frames"].size(), 6u);
  EXPECT_EQ(m["seed"].get<int>(), 5);
  EXPECT_TRUE(fs::exists(ph("frame_005_mask.img")));
  const auto s = ml::read_series(ph("series.csv"), ph("series.json"));
  EXPECT_EQ(s.size(), 6u);
  EXPECT_EQ(s.t_rt_start, 40.0);
}

TEST(Cli, FitThenPredict) {
  ASSERT_EQ(run("fit --series " + ph("series.csv") + " --meta " + ph("series.json") +
                " --bootstrap 8 --seed 3 --out " + p("fit.json")),
            0);
  const auto doc = ml::fit_document_from_json(ml::read_json(p("fit.json")));
  EXPECT_EQ(doc.ensemble.size(), 8u);
  ASSERT_EQ(run("predict --fit " + p("fit.json") + " --time 120 --quantiles 5,50,95 --out " + p("pred.json")), 0);
  const auto pred = ml::read_json(p("pred.json"));
  EXPECT_EQ(pred["time_days"].get<double>(), 120.0);
  ASSERT_EQ(pred["quantiles"].size(), 3u);
  EXPECT_LE(pred["quantiles"][0]["area_mm2"].get<double>(), pred["quantiles"][2]["area_mm2"].get<double>());
  EXPECT_EQ(run("predict --fit " + p("fit.json") + " --time 120 --quantiles 150"), 2);
}

TEST(Cli, GenerateAndEvaluate) {
  ASSERT_EQ(run("generate --image " + ph("frame_003.img") + " --mask " + ph("brain.img") + " --tumor-mask " +
                ph("frame_003_mask.img") + " --target 0.08 --nl 50 --out " + p("gen.img")),
            0);
  const auto g = ml::read_image(p("gen.img"));
  EXPECT_EQ(g.width(), 64);
  ASSERT_EQ(run("eval ssim --a " + p("gen.img") + " --b " + ph("frame_003.img") + " --out " + p("ssim.json")), 0);
  const double s = ml::read_json(p("ssim.json"))["ssim"].get<double>();
  EXPECT_GT(s, 0.0);
  EXPECT_LE(s, 1.0);
  ASSERT_EQ(run("eval hd95 --a " + ph("frame_003_mask.img") + " --b " + ph("frame_003_mask.img") + " --out " +
                p("hd.json")),
            0);
  EXPECT_EQ(ml::read_json(p("hd.json"))["hd95_mm"].get<double>(), 0.0);
  ASSERT_EQ(run("eval wilcoxon --x 1,2,3,4,5,6 --y 0,0,0,0,0,0 --out " + p("wx.json")), 0);
  EXPECT_NEAR(ml::read_json(p("wx.json"))["p_two_sided"].get<double>(), 2.0 / 64.0, 1e-15);
  EXPECT_EQ(run("eval wilcoxon --x 1,2 --y 1,2"), 2);
}

TEST(Cli, StaticProbabilityMap) {
  ASSERT_EQ(run("probmap --mode static --image " + ph("frame_003.img") + " --mask " + ph("brain.img") +
                " --tumor-mask " + ph("frame_003_mask.img") + " --target 0.08 --repeats 2 --nl 50 --out " +
                p("pm.img") + " --out-mask " + p("pm_mask.img") + " --summary " + p("pm.json")),
            0);
  const auto sum = ml::read_json(p("pm.json"));
  EXPECT_EQ(sum["mode"], "static");
  EXPECT_EQ(sum["n_aggregated"].get<int>(), 2);
  const auto m = ml::read_image(p("pm.img"));
  for (double v : m.pixels()) EXPECT_TRUE(v == 0.0 || v == 0.5 || v == 1.0);
  EXPECT_EQ(run("probmap --mode static --image " + ph("frame_003.img") + " --mask " + ph("brain.img") + " --out " +
                p("x.img")),
            2);
}

TEST(Cli, InvalidInputsExitTwo) {
  ml::write_text(p("bad.csv"), "time,area\n0,1\n");
  ml::write_json(p("meta.json"), ml::Json{{"t_rt_start_days", 1.0}, {"brain_area_mm2", 100.0}});
  EXPECT_EQ(run("fit --series " + p("bad.csv") + " --meta " + p("meta.json") + " --out " + p("f.json")), 2);
  EXPECT_EQ(run("generate --image " + ph("frame_003.img") + " --mask " + ph("brain.img") +
                " --target 0.08 --nl 5000 --out " + p("g.img")),
            2);
  ml::write_json(p("cfg.json"), ml::Json{{"unknown_key", 1}});
  EXPECT_EQ(run("generate --config " + p("cfg.json") + " --image " + ph("frame_003.img") + " --mask " +
                ph("brain.img") + " --target 0.08 --out " + p("g.img")),
            2);
}

TEST(Cli, PluginFailureExitsFour) {
  EXPECT_EQ(run("generate --image " + ph("frame_003.img") + " --mask " + ph("brain.img") +
                " --target 0.08 --nl 20 --denoiser 'plugin:" + std::string(MECHLEARN_TEST_PLUGIN) +
                " bad-version' --out " + p("g.img")),
            4);
}

TEST(Cli, NumericalFailureExitsThree) {
  ml::FitDocument d;
  d.series = ml::read_series(ph("series.csv"), ph("series.json"));
  d.fit = {{120, 0.012, 0.8, 0.05, 10, 0.2, 40}, 1.0, 0.9, false, 200};
  d.ensemble.replicates.assign(3, d.fit);
  ml::write_json(p("nofit.json"), ml::to_json(d));
  EXPECT_EQ(run("probmap --mode dynamic --image " + ph("frame_004.img") + " --mask " + ph("brain.img") + " --fit " +
                p("nofit.json") + " --time 100 --nl 20 --out " + p("x.img")),
            3);
}

TEST(Cli, GridSearchFromManifest) {
  ASSERT_EQ(run("gridsearch --manifest " + ph("manifest.json") + " --nl 20 --s-ct 0,1000 --out " + p("grid.csv")), 0);
  const std::string csv = ml::read_text(p("grid.csv"));
  EXPECT_EQ(csv.rfind("nl,s_ct,ssim_tumor,ssim_outside\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}
