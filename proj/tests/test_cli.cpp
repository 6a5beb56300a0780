// Spawns the installed CLI binary and checks the documented exit codes:
// 0 success, 2 validation, 3 divergence, 4 I/O.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  const char* env = std::getenv("NESTEDSEG_CLI");
  return env ? env : "./tools/nestedseg";
}

int run(const std::string& args) {
  const std::string cmd = cli_path() + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path temp_dir() {
  static int counter = 0;
  auto p = fs::temp_directory_path() /
           ("nseg_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("cli binary exists and --help exits cleanly") {
  REQUIRE(fs::exists(cli_path()));
  CHECK(run("--help") == 0);
  CHECK(run("") != 0);  // a subcommand is required
}

TEST_CASE("exit code 4 for missing input files") {
  auto dir = temp_dir();
  CHECK(run("eval --checkpoint /nonexistent.nsckpt --manifest /nonexistent.csv") == 4);
  CHECK(run("train --config /nonexistent.ini --manifest /nonexistent.csv --out " +
            (dir / "o").string()) == 4);
  fs::remove_all(dir);
}

TEST_CASE("exit code 2 for invalid configuration") {
  auto dir = temp_dir();
  const std::string bad = (dir / "bad.ini").string();
  std::ofstream(bad) << "[model]\nnum_scales = 3\n";  // strides/widths stay length 4
  CHECK(run("train --config " + bad + " --manifest /nonexistent.csv --out " +
            (dir / "o").string()) == 2);
  fs::remove_all(dir);
}

TEST_CASE("exit code 3 for a diverging run; 0 for a healthy pipeline") {
  auto dir = temp_dir();
  REQUIRE(run("synth --out " + (dir / "c").string() + " --slides 6 --patches 1 --size 32 "
              "--seed 9") == 0);
  const std::string manifest = (dir / "c" / "manifest.csv").string();

  const std::string base_cfg =
      "[model]\n"
      "input_size = 32\nnum_scales = 2\nscale_strides = 4,8\ndecoder_widths = 4,8\n"
      "backbone_embed_dim = 16\nbackbone_patch_size = 8\nbackbone_blocks = 2\n"
      "adapter_width = 8\nattention_heads = 2\nsampling_points = 2\n"
      "[train]\noptimizer = adam\nepochs = 2\nbatch_size = 4\nseed = 5\n";

  const std::string diverge_cfg = (dir / "diverge.ini").string();
  std::ofstream(diverge_cfg) << base_cfg << "lr0 = 1e200\n";
  CHECK(run("train --config " + diverge_cfg + " --manifest " + manifest + " --out " +
            (dir / "bad_run").string()) == 3);

  const std::string ok_cfg = (dir / "ok.ini").string();
  std::ofstream(ok_cfg) << base_cfg << "lr0 = 3e-3\n";
  CHECK(run("train --config " + ok_cfg + " --manifest " + manifest + " --out " +
            (dir / "run").string()) == 0);
  const std::string ckpt = (dir / "run" / "checkpoint_best.nsckpt").string();
  CHECK(run("eval --checkpoint " + ckpt + " --manifest " + manifest + " --split val --out " +
            (dir / "eval").string()) == 0);
  CHECK(run("predict --checkpoint " + ckpt + " --image /nonexistent.ppm --out " +
            (dir / "m.pgm").string()) == 4);
  CHECK(run("report --out " + (dir / "figs").string() + " --checkpoint " + ckpt +
            " --manifest " + manifest + " --split val --overlays 1") == 0);
  CHECK(fs::exists(dir / "figs" / "boxplot.ppm"));
  fs::remove_all(dir);
}
