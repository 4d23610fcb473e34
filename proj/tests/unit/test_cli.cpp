#include <fstream>
#include <sstream>

#include "cpf/commands.hpp"
#include "cpf/config.hpp"
#include "cpf/svg.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cpf;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// A tiny single-cloud run: a few iterations of a narrow model.
std::string small_config(const fs::path& dir, const std::string& extra = "") {
  return "mode = single\ndataset = double-moon\npoints = 300\ncharts = 2\nwidth_scale = 0.0625\n"
         "flow_blocks = 2\niterations = 3\nbatch_size = 32\nlog_every = 1\n"
         "checkpoint = " + (dir / "model.cpf").string() + "\nloss_csv = " + (dir / "loss.csv").string() + "\n" +
         extra;
}

}  // namespace

TEST_CASE("config parsing") {
  Config c = Config::defaults();
  c.parse("# comment\n lambda = 0.5  # trailing\n\ncharts=7\n");
  CHECK(c.get_double("lambda") == 0.5);
  CHECK(c.get_size("charts") == 7);
  CHECK(c.model_config().charts == 7);
  c.set_assignment("tau=0.2");
  CHECK(c.model_config().tau == 0.2);
  SUBCASE("unknown keys suggest the closest spelling") {
    try {
      c.parse("lamda = 1\n", "x.cfg");
      FAIL("expected UsageError");
    } catch (const UsageError& e) {
      CHECK(std::string(e.what()).find("lambda") != std::string::npos);
    }
    CHECK(suggest_key("lamda") == "lambda");
    CHECK(suggest_key("completely_unrelated") == "");
    CHECK(edit_distance("kitten", "sitting") == 3);
  }
  SUBCASE("malformed lines and values") {
    CHECK_THROWS_AS(c.parse("charts\n"), UsageError);
    CHECK_THROWS(c.set_assignment("charts"));
    c.set("charts", "four");
    CHECK_THROWS(c.get_u64("charts"));
    c.set("tau", "0.1x");
    CHECK_THROWS(c.get_double("tau"));
  }
  SUBCASE("every documented key has a default") {
    Config d = Config::defaults();
    for (const auto& k : Config::keys()) CHECK_NOTHROW(d.get(k));
    CHECK(d.model_config().lambda == 1.1);
    CHECK(d.model_config().tau == 0.1);
    CHECK(d.train_config().lr_decay == 0.25);
  }
}

TEST_CASE("cli usage errors") {
  testing::TempDir dir("cli_usage");
  SUBCASE("help exits cleanly") {
    Run r = cli({"--help"});
    CHECK(r.code == kExitOk);
    CHECK(r.out.find("train") != std::string::npos);
  }
  SUBCASE("no subcommand") { CHECK(cli({}).code == kExitUsage); }
  SUBCASE("unknown key in a config file") {
    write_text(dir.path() / "bad.cfg", "lamda = 1.0\n");
    Run r = cli({"train", "--config", (dir.path() / "bad.cfg").string()});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("did you mean 'lambda'") != std::string::npos);
  }
  SUBCASE("missing dataset path names the key") {
    write_text(dir.path() / "c.cfg", small_config(dir.path(), "dataset_path = " + (dir.path() / "nope").string()));
    Run r = cli({"train", "--config", (dir.path() / "c.cfg").string()});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("dataset_path") != std::string::npos);
  }
  SUBCASE("missing config file") {
    CHECK(cli({"train", "--config", (dir.path() / "none.cfg").string()}).code == kExitUsage);
  }
  SUBCASE("bad checkpoint is a runtime error") {
    write_text(dir.path() / "junk.cpf", "not a checkpoint");
    Run r = cli({"generate", "--checkpoint", (dir.path() / "junk.cpf").string(), "--out-dir",
                 (dir.path() / "g").string()});
    CHECK(r.code == kExitRuntime);
    CHECK(r.err.find("bad magic") != std::string::npos);
  }
}

TEST_CASE("train, generate, segment and plot") {
  testing::TempDir dir("cli_flow");
  const fs::path cfg = dir.path() / "run.cfg";
  write_text(cfg, small_config(dir.path()));
  Run t = cli({"train", "--config", cfg.string()});
  REQUIRE(t.code == kExitOk);
  CHECK(fs::exists(dir.path() / "model.cpf"));
  CHECK(slurp(dir.path() / "loss.csv").rfind("iteration,loss,lr\n", 0) == 0);
  const std::string ckpt = (dir.path() / "model.cpf").string();

  SUBCASE("count = 0 writes nothing") {
    Run g = cli({"generate", "--checkpoint", ckpt, "--count", "0", "--out-dir", (dir.path() / "zero").string()});
    CHECK(g.code == kExitOk);
    CHECK_FALSE(fs::exists(dir.path() / "zero"));
  }
  SUBCASE("fixed seed gives identical files") {
    for (const char* sub : {"a", "b"}) {
      Run g = cli({"generate", "--checkpoint", ckpt, "--count", "2", "--points", "100", "--seed", "5",
                   "--out-dir", (dir.path() / sub).string()});
      REQUIRE(g.code == kExitOk);
    }
    for (const char* f : {"manifest.txt", "cloud_0000.csv", "cloud_0001.csv", "cloud_0000.svg"})
      CHECK(slurp(dir.path() / "a" / f) == slurp(dir.path() / "b" / f));
    PointCloud c = read_cloud(dir.path() / "a" / "cloud_0001.csv");
    CHECK(c.size() == 100);
    CHECK(c.has_labels());
    // the plot is a pure function of the CSV
    CHECK(render_svg(c) == slurp(dir.path() / "a" / "cloud_0001.svg"));
    Run p = cli({"plot", "--input", (dir.path() / "a" / "cloud_0001.csv").string(), "--out",
                 (dir.path() / "re.svg").string()});
    CHECK(p.code == kExitOk);
    CHECK(slurp(dir.path() / "re.svg") == slurp(dir.path() / "a" / "cloud_0001.svg"));
  }
  SUBCASE("segmentation with and without a truth column") {
    SyntheticSpec s;
    s.kind = "double-moon";
    s.points = 50;
    PointCloud truth = generate_synthetic(s);
    write_cloud(dir.path() / "truth.csv", truth);
    Run r = cli({"segment", "--checkpoint", ckpt, "--input", (dir.path() / "truth.csv").string(), "--out",
                 (dir.path() / "seg.csv").string()});
    CHECK(r.code == kExitOk);
    CHECK(r.out.find("NMI") != std::string::npos);
    PointCloud bare = truth;
    bare.labels.clear();
    write_cloud(dir.path() / "bare.csv", bare);
    r = cli({"segment", "--checkpoint", ckpt, "--input", (dir.path() / "bare.csv").string(), "--out",
             (dir.path() / "seg2.csv").string()});
    CHECK(r.code == kExitOk);
    CHECK(r.out.empty());
    PointCloud labeled = read_cloud(dir.path() / "seg2.csv");
    CHECK(labeled.labels.size() == 50);
    CHECK(labeled.coords == bare.coords);
  }
  SUBCASE("reconstruct needs a full model") {
    Run r = cli({"reconstruct", "--checkpoint", ckpt, "--input", (dir.path() / "loss.csv").string(), "--out",
                 (dir.path() / "r.csv").string()});
    CHECK(r.code == kExitUsage);
  }
}

TEST_CASE("a one-chart model segments everything into chart zero") {
  testing::TempDir dir("cli_one");
  const fs::path cfg = dir.path() / "run.cfg";
  write_text(cfg, small_config(dir.path(), "charts = 1\n"));
  REQUIRE(cli({"train", "--config", cfg.string()}).code == kExitOk);
  SyntheticSpec s;
  s.kind = "double-moon";
  s.points = 40;
  write_cloud(dir.path() / "x.csv", generate_synthetic(s));
  Run r = cli({"segment", "--checkpoint", (dir.path() / "model.cpf").string(), "--input",
               (dir.path() / "x.csv").string(), "--out", (dir.path() / "y.csv").string()});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("NMI 0\n") != std::string::npos);
  for (int y : read_cloud(dir.path() / "y.csv").labels) CHECK(y == 0);
}

TEST_CASE("full-model commands") {
  testing::TempDir dir("cli_full");
  const fs::path cfg = dir.path() / "full.cfg";
  write_text(cfg, small_config(dir.path(), "mode = full\ndataset = ring-or-disk-family\nobjects = 4\npoints = 64\n"
                                           "feature_dim = 2\nprior_blocks = 1\ntrain_points = 32\nbatch_size = 2\n"));
  REQUIRE(cli({"train", "--config", cfg.string(), "--seed", "3"}).code == kExitOk);
  const std::string ckpt = (dir.path() / "model.cpf").string();
  SyntheticSpec s;
  s.kind = "ring-or-disk-family";
  s.points = 64;
  write_dataset(dir.path() / "in", generate_family(s, 2).clouds);
  Run r = cli({"reconstruct", "--checkpoint", ckpt, "--input", (dir.path() / "in").string(), "--out",
               (dir.path() / "rec").string(), "--seed", "1"});
  CHECK(r.code == kExitOk);
  auto rec = read_dataset(dir.path() / "rec");
  REQUIRE(rec.size() == 2);
  CHECK(rec[0].size() == 64);
  // the wrong mode in a dataset config is a usage error
  write_text(cfg, small_config(dir.path(), "mode = full\n"));
  CHECK(cli({"train", "--config", cfg.string()}).code == kExitUsage);
}

TEST_CASE("evaluate") {
  testing::TempDir dir("cli_eval");
  SyntheticSpec s;
  s.kind = "ring-or-disk-family";
  s.points = 32;
  auto clouds = generate_family(s, 6).clouds;
  write_dataset(dir.path() / "ref", clouds);
  SUBCASE("a set against itself") {
    Run r = cli({"evaluate", "--gen", (dir.path() / "ref").string(), "--ref", (dir.path() / "ref").string(),
                 "--metrics", "mmd-cov,jsd,1-nna", "--distances", "EMD,CD"});
    CHECK(r.code == kExitOk);
    CHECK(r.out.find("MMD,EMD,0,exact\n") != std::string::npos);
    CHECK(r.out.find("COV,EMD,1,exact\n") != std::string::npos);
    CHECK(r.out.find("JSD,none,0,exact\n") != std::string::npos);
    CHECK(r.out.find("1-NNA,CD,") != std::string::npos);
  }
  SUBCASE("missing reference directory") {
    Run r = cli({"evaluate", "--gen", (dir.path() / "ref").string(), "--ref", (dir.path() / "none").string()});
    CHECK(r.code == kExitUsage);
  }
  SUBCASE("cardinality mismatch is named per metric") {
    auto fewer = clouds;
    fewer.pop_back();
    write_dataset(dir.path() / "gen", fewer);
    Run r = cli({"evaluate", "--gen", (dir.path() / "gen").string(), "--ref", (dir.path() / "ref").string(),
                 "--metrics", "1-nna", "--distances", "EMD"});
    CHECK(r.code == kExitRuntime);
    CHECK(r.err.find("1-NNA") != std::string::npos);
  }
  SUBCASE("unknown metric") {
    Run r = cli({"evaluate", "--gen", (dir.path() / "ref").string(), "--ref", (dir.path() / "ref").string(),
                 "--metrics", "fid"});
    CHECK(r.code == kExitUsage);
  }
}
