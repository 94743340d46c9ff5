// Runs the neuronpath binary as a subprocess.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kBin = NEURONPATH_BIN;
const fs::path kWork = fs::path(TEST_WORK_DIR) / "cli";

int run(const std::string& args) {
  const std::string cmd = kBin + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string dir(const std::string& name) { return (kWork / name).string(); }

// A tiny checkpoint trained once for the whole suite.
const std::string& small_checkpoint() {
  static const std::string path = [] {
    const std::string out = dir("train");
    REQUIRE(run("train-toy --epochs 1 --train-count 100 --test-count 20 --out " + out) == 0);
    return out + "/toy.ck";
  }();
  return path;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit with 1") {
    CHECK(run("") == 1);
    CHECK(run("--help") == 0);
    CHECK(run("find-path --bogus") == 1);
    CHECK(run("no-such-command") == 1);
    CHECK(run("find-path --out " + dir("err")) == 1);
    CHECK(run("find-path --checkpoint /nonexistent/file --out " + dir("err")) == 1);
    CHECK(run("find-path --checkpoint " + small_checkpoint() + " --m 0 --out " + dir("err")) == 1);
    CHECK(run("find-path --checkpoint " + small_checkpoint() + " --scope middle --out " + dir("err")) == 1);
    CHECK(run("find-path --checkpoint " + small_checkpoint() + " --method activation --topk 3 --out " + dir("err")) ==
          1);
    CHECK(run("prune --checkpoint " + small_checkpoint() + " --topk 0 --count 50 --out " + dir("err")) == 1);
    CHECK(run("intervene --checkpoint " + small_checkpoint() + " --op halve --out " + dir("err")) == 1);

    fs::create_directories(kWork);
    const fs::path bad = kWork / "bad.ck";
    std::ofstream(bad) << "not a checkpoint at all";
    CHECK(run("find-path --checkpoint " + bad.string() + " --out " + dir("err")) == 1);
  }

  TEST_CASE("manifest records the run") {
    REQUIRE(run("gen-data --count 30 --seed 4 --out " + dir("gen")) == 0);
    const auto m = nlohmann::json::parse(slurp(kWork / "gen" / "manifest.json"));
    CHECK(m["subcommand"] == "gen-data");
    CHECK(m["seeds"]["data"] == 4);
    CHECK(m["flags"]["count"] == "30");
    CHECK(m["exit_code"] == 0);
    CHECK(m.contains("code_version"));
    CHECK(m.contains("started_at"));
    CHECK(m["outputs"][0]["file"] == "dataset.ndjson");
    CHECK(m["outputs"][0]["sha256"].get<std::string>().size() == 64);

    REQUIRE(run("find-path --checkpoint " + small_checkpoint() + " --out " + dir("fp")) == 0);
    const auto f = nlohmann::json::parse(slurp(kWork / "fp" / "manifest.json"));
    CHECK(f["checkpoint_sha256"].get<std::string>().size() == 64);
  }

  TEST_CASE("datasets round trip through the data flag") {
    REQUIRE(run("gen-data --count 20 --out " + dir("data")) == 0);
    const std::string ck = small_checkpoint();
    REQUIRE(run("find-path --checkpoint " + ck + " --image 3 --out " + dir("fp_gen")) == 0);
    REQUIRE(run("find-path --checkpoint " + ck + " --image 3 --data " + dir("data") +
                "/dataset.ndjson --out " + dir("fp_file")) == 0);
    CHECK(slurp(kWork / "fp_gen" / "paths.ndjson") == slurp(kWork / "fp_file" / "paths.ndjson"));
  }

  TEST_CASE("payloads are identical across reruns and thread counts") {
    const std::string ck = small_checkpoint();
    const std::string common = " --checkpoint " + ck + " --m 4 --count 20";
    REQUIRE(run("aggregate" + common + " --threads 1 --out " + dir("agg1")) == 0);
    REQUIRE(run("aggregate" + common + " --threads 3 --out " + dir("agg3")) == 0);
    for (const char* f : {"paths.ndjson", "utilization.ndjson", "frequency.csv"}) {
      CHECK(slurp(kWork / "agg1" / f) == slurp(kWork / "agg3" / f));
    }
    REQUIRE(run("similarity --utilization " + dir("agg1") + "/utilization.ndjson --out " + dir("sim1")) == 0);
    REQUIRE(run("similarity --utilization " + dir("agg3") + "/utilization.ndjson --out " + dir("sim3")) == 0);
    CHECK(slurp(kWork / "sim1" / "similarity.csv") == slurp(kWork / "sim3" / "similarity.csv"));

    REQUIRE(run("intervene" + common + " --method activation --op double --threads 2 --out " + dir("iv2")) == 0);
    REQUIRE(run("intervene" + common + " --method activation --op double --threads 1 --out " + dir("iv1")) == 0);
    CHECK(slurp(kWork / "iv1" / "deviation.csv") == slurp(kWork / "iv2" / "deviation.csv"));
  }

  TEST_CASE("find-path top-k output") {
    REQUIRE(run("find-path --checkpoint " + small_checkpoint() + " --m 4 --topk 3 --out " + dir("topk")) == 0);
    const auto j = nlohmann::json::parse(slurp(kWork / "topk" / "paths.ndjson"));
    REQUIRE(j["topk"].size() == 4);
    CHECK(j["topk"][0]["top"].size() == 3);
    CHECK(j["topk"][0]["top"][0]["channel"] == j["path"][0]["channel"]);
  }
}
