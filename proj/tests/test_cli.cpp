#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "adafocus/serialize.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kTiny =
    " -q -s data.frame_size=32 -s data.frames=4 -s data.train_size=20 -s data.calibration_size=10"
    " -s data.test_size=10 -s model.grid_k=3 -s pretrain.epochs=1 -s stage1.epochs=1"
    " -s stage2.epochs=1 -s stage3.epochs=1";

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(ADAFOCUS_CLI_PATH) + " " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::size_t count_files(const fs::path& root) {
  if (!fs::exists(root)) return 0;
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(root)) n += e.is_regular_file() ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("help and config display succeed") {
  TempDir dir("cli_help");
  CHECK(cli("--help", dir.path / "log") == 0);
  CHECK(cli("show-config -s model.patch_size=24", dir.path / "log") == 0);
  CHECK(adafocus::read_text(dir.path / "log").find("patch_size = 24") != std::string::npos);
}

TEST_CASE("usage and config errors exit with code 2") {
  TempDir dir("cli_errors");
  CHECK(cli("no-such-command", dir.path / "log") == 2);
  CHECK(cli("show-config -s data.nope=1", dir.path / "log") == 2);
  CHECK(cli("show-config -s model.patch_size=128", dir.path / "log") == 2);
}

TEST_CASE("a stage without its prerequisite exits 2 and writes nothing") {
  TempDir dir("cli_prereq");
  const auto run = dir.path / "run";
  CHECK(cli("stage2 -q -r " + run.string(), dir.path / "log") == 2);
  CHECK(count_files(run) == 0);
}

TEST_CASE("tiny end-to-end run") {
  TempDir dir("cli_run");
  const auto run = dir.path / "run";
  const auto log = dir.path / "log";
  REQUIRE(cli("run" + kTiny + " -r " + run.string(), log) == 0);
  for (const char* f : {"config.ini", "manifest.json", "data/train.afsplit", "data/test.afsplit",
                        "checkpoints/stage3.afck", "metrics/eval.json", "metrics/ablate_policies.json",
                        "metrics/overlap.json", "plots/tradeoff.svg", "plots/online_curve.csv"}) {
    INFO(f);
    CHECK(fs::exists(run / f));
  }

  SUBCASE("rerunning without --overwrite is refused") {
    CHECK(cli("run" + kTiny + " -r " + run.string(), log) == 2);
  }
  SUBCASE("a different config in the same directory is refused") {
    CHECK(cli("eval" + kTiny + " -s model.grid_k=4 -r " + run.string(), log) == 2);
  }
  SUBCASE("individual commands rerun with --overwrite") {
    CHECK(cli("eval --overwrite" + kTiny + " -r " + run.string(), log) == 0);
  }
  SUBCASE("corrupt checkpoint is a format error") {
    adafocus::write_text_atomic(run / "checkpoints" / "stage3.afck", "garbage");
    CHECK(cli("eval --overwrite" + kTiny + " -r " + run.string(), log) == 5);
  }
}
