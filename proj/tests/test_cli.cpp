#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#ifndef ST_CLI_PATH
#error "ST_CLI_PATH must point at the stabletrain binary"
#endif

namespace {

namespace fs = std::filesystem;

fs::path work_dir() {
  auto dir = fs::temp_directory_path() / "stabletrain_tests" / "cli";
  fs::create_directories(dir);
  return dir;
}

int run_cmd(const std::string& args, std::string* output = nullptr) {
  const fs::path log = work_dir() / "cmd.log";
  const std::string full = std::string(ST_CLI_PATH) + " " + args + " > " +
                           log.string() + " 2>&1";
  const int rc = std::system(full.c_str());
  if (output) {
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    *output = ss.str();
  }
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_config(const std::string& name, const std::string& extra,
                      const std::string& method = "stability",
                      const std::string& grid =
                          "axis = alpha log 0.01 10 2\n"
                          "axis = gaussian linear 0.05 0.05 1\n") {
  const fs::path p = work_dir() / name;
  std::ofstream out(p, std::ios::trunc);
  out << "[experiment]\n"
         "id = cli-test\n"
         "seed = 1\n"
         "[data]\n"
         "source = synthetic\n"
         "classes = 3\n"
         "per_class = 8\n"
         "height = 12\n"
         "width = 12\n"
         "jitter = 0\n"
         "train_per_class = 6\n"
         "val_per_class = 2\n"
         "[pipeline]\n"
         "resize_short = 12\n"
         "crop_side = 10\n"
         "[model]\n"
         "stem = 2\n"
         "blocks = 1\n"
         "[train]\n"
         "method = " +
             method +
         "\n"
         "epochs = 2\n"
         "batch_size = 18\n"
         "learning_rate = 0.05\n"
         "[grid]\n" +
         grid +
         "[evaluate]\n"
         "test_distortion = gaussian\n"
         "intensities = 0,0.05,0.2\n"
         "practical = 0.05\n"
         "eval_seed = 7\n" +
         extra;
  return p;
}

}  // namespace

TEST_CASE("config errors exit 2 with a config message") {
  const fs::path bad = work_dir() / "bad.cfg";
  std::ofstream(bad) << "[experiment]\nbogus_key = 1\n";
  std::string out;
  CHECK(run_cmd("train-baseline --config " + bad.string() + " --out " +
                    (work_dir() / "never").string(),
                &out) == 2);
  CHECK(out.find("config error") != std::string::npos);
  CHECK(out.find("bogus_key") != std::string::npos);

  // invalid method name lists the valid ones
  auto cfg = write_config("badmethod.cfg", "", "sideways");
  CHECK(run_cmd("run --config " + cfg.string() + " --out " +
                    (work_dir() / "never").string() + " --dry-run",
                &out) == 2);
  CHECK(out.find("baseline, stability, stability_sym, augment, adversarial") !=
        std::string::npos);

  // idx source without paths is a config error
  auto idxcfg = write_config("noidx.cfg", "");
  {
    std::ofstream app(idxcfg, std::ios::app);
  }
  const fs::path idx = work_dir() / "idx.cfg";
  std::ofstream(idx) << "[experiment]\nseed = 1\n[data]\nsource = idx\n";
  CHECK(run_cmd("train-baseline --config " + idx.string() + " --out " +
                    (work_dir() / "never").string(),
                &out) == 2);
  CHECK(out.find("images") != std::string::npos);
}

TEST_CASE("missing output directory configuration exits 2") {
  auto cfg = write_config("noout.cfg", "");
  std::string out;
  // no --out, no config out, STABLETRAIN_OUT cleared
  const std::string cmdline = "env -u STABLETRAIN_OUT " +
                              std::string(ST_CLI_PATH) +
                              " run --config " + cfg.string() +
                              " --dry-run > /dev/null 2>&1";
  CHECK(WEXITSTATUS(std::system(cmdline.c_str())) == 2);
}

TEST_CASE("STABLETRAIN_OUT fallback and --out precedence") {
  auto cfg = write_config("envout.cfg", "");
  const fs::path env_dir = work_dir() / "env_out";
  fs::remove_all(env_dir);
  const std::string cmdline =
      "STABLETRAIN_OUT=" + env_dir.string() + " " + ST_CLI_PATH +
      " train-baseline --config " + cfg.string() + " > /dev/null 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmdline.c_str())) == 0);
  CHECK(fs::exists(env_dir / "baseline" / "best.stbl"));

  // --out wins over the environment
  const fs::path flag_dir = work_dir() / "flag_out";
  fs::remove_all(flag_dir);
  const std::string cmdline2 =
      "STABLETRAIN_OUT=" + env_dir.string() + " " + ST_CLI_PATH +
      " train-baseline --config " + cfg.string() + " --out " +
      flag_dir.string() + " > /dev/null 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmdline2.c_str())) == 0);
  CHECK(fs::exists(flag_dir / "baseline" / "best.stbl"));
}

TEST_CASE("dry run prints the resolved grid without training") {
  auto cfg = write_config("dry.cfg", "");
  const fs::path out_dir = work_dir() / "dry_out";
  fs::remove_all(out_dir);
  std::string out;
  CHECK(run_cmd("run --config " + cfg.string() + " --out " +
                    out_dir.string() + " --dry-run",
                &out) == 0);
  CHECK(out.find("grid: 2 points") != std::string::npos);
  CHECK(out.find("alpha=0.01;gaussian=0.05") != std::string::npos);
  CHECK(!fs::exists(out_dir / "runs"));
}

TEST_CASE("run before train-baseline is a data error") {
  auto cfg = write_config("norun.cfg", "");
  const fs::path out_dir = work_dir() / "norun_out";
  fs::remove_all(out_dir);
  std::string out;
  CHECK(run_cmd("run --config " + cfg.string() + " --out " +
                    out_dir.string(),
                &out) == 3);
  CHECK(out.find("train-baseline first") != std::string::npos);
}

TEST_CASE("full workflow: determinism, idempotent rerun, stable report") {
  auto cfg = write_config("flow.cfg", "");
  const fs::path a = work_dir() / "flow_a";
  const fs::path b = work_dir() / "flow_b";
  fs::remove_all(a);
  fs::remove_all(b);

  for (const fs::path& dir : {a, b}) {
    std::string out;
    REQUIRE(run_cmd("train-baseline --config " + cfg.string() + " --out " +
                        dir.string(),
                    &out) == 0);
    CHECK(out.find("selected epoch") != std::string::npos);
    REQUIRE(run_cmd("run --config " + cfg.string() + " --out " +
                        dir.string() + " --jobs 1") == 0);
    REQUIRE(run_cmd("evaluate --config " + cfg.string() + " --out " +
                        dir.string()) == 0);
    REQUIRE(run_cmd("report --config " + cfg.string() + " --out " +
                        dir.string()) == 0);
  }

  // same seed -> byte-identical checkpoints and curves
  CHECK(slurp(a / "baseline" / "best.stbl") ==
        slurp(b / "baseline" / "best.stbl"));
  CHECK(slurp(a / "runs" / "run_000" / "best.stbl") ==
        slurp(b / "runs" / "run_000" / "best.stbl"));
  CHECK(slurp(a / "curves.csv") == slurp(b / "curves.csv"));

  // rerun after completion trains nothing
  std::string out;
  REQUIRE(run_cmd("run --config " + cfg.string() + " --out " + a.string(),
                  &out) == 0);
  CHECK(out.find("0 runs executed") != std::string::npos);

  // regenerated report is byte-identical
  const std::string svg_before = slurp(a / "plots" / "gaussian.svg");
  const std::string summary_before = slurp(a / "summary.txt");
  REQUIRE(run_cmd("report --config " + cfg.string() + " --out " +
                  a.string()) == 0);
  CHECK(slurp(a / "plots" / "gaussian.svg") == svg_before);
  CHECK(slurp(a / "summary.txt") == summary_before);
  CHECK(svg_before.find("<svg") != std::string::npos);
}

TEST_CASE("partial grid failure exits 5; report without runs exits 3") {
  auto cfg = write_config("partial.cfg", "", "augment",
                          "axis = p linear 0.5 1.5 3\n"
                          "axis = gaussian linear 0.05 0.05 1\n");
  const fs::path out_dir = work_dir() / "partial_out";
  fs::remove_all(out_dir);
  REQUIRE(run_cmd("train-baseline --config " + cfg.string() + " --out " +
                  out_dir.string()) == 0);
  std::string out;
  CHECK(run_cmd("run --config " + cfg.string() + " --out " +
                    out_dir.string(),
                &out) == 5);
  CHECK(out.find("1 failed") != std::string::npos);

  // report before evaluate: no curves.csv
  const fs::path empty_dir = work_dir() / "empty_out";
  fs::remove_all(empty_dir);
  fs::create_directories(empty_dir);
  CHECK(run_cmd("report --config " + cfg.string() + " --out " +
                empty_dir.string()) == 3);

  // curves.csv with only baseline rows -> explicit "no runs"
  std::ofstream(empty_dir / "curves.csv")
      << "run_id,method,train_distortion,hyperparams,test_distortion,"
         "intensity,accuracy\n"
         "0,baseline,none,none,gaussian,0,0.5\n";
  CHECK(run_cmd("report --config " + cfg.string() + " --out " +
                    empty_dir.string(),
                &out) == 3);
  CHECK(out.find("no runs") != std::string::npos);
}

TEST_CASE("distort dumps a PPM image") {
  auto cfg = write_config("distort.cfg", "");
  const fs::path out_dir = work_dir() / "distort_out";
  const fs::path ppm = work_dir() / "dump.ppm";
  fs::remove(ppm);
  REQUIRE(run_cmd("distort --config " + cfg.string() + " --out " +
                  out_dir.string() + " --distortion rotation:45 --index 0 "
                  "--output " + ppm.string()) == 0);
  const std::string data = slurp(ppm);
  REQUIRE(data.size() > 15);
  CHECK(data.rfind("P6\n10 10\n255\n", 0) == 0);
  CHECK(data.size() == 13 + 10 * 10 * 3);
}
