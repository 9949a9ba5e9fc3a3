#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <regex>
#include <vector>

#include "doctest.h"
#include "gues/image.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

Run gues_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + GUES_CLI_PATH + "\" " + args + " 2>&1";
  Run run;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) run.output.append(buf.data(), n);
  const int status = pclose(pipe);
  run.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return run;
}

// Small enough that every subcommand finishes in seconds.
const char* kTinyConfig = R"({
  "n_source": 60, "n_target": 24, "n_source_test": 20, "image_size": 16,
  "epochs": 1, "batch_size": 8, "seeds": 1,
  "sweep_batch_sizes": [4, 8], "sweep_modes": ["tent", "gues"],
  "sweep_alpha": [1.0], "sweep_beta": [0.0001]
})";

fs::path tiny_config(const fs::path& dir) {
  std::ofstream(dir / "tiny.json") << kTinyConfig;
  return dir / "tiny.json";
}

std::string common(const fs::path& dir) {
  return "--config \"" + tiny_config(dir).string() + "\" --out \"" + (dir / "out").string() + "\"";
}

// Tag-balance check: every element closes in order, no stray markup.
bool well_formed_xml(const std::string& text) {
  std::vector<std::string> stack;
  std::size_t pos = 0;
  bool saw_root = false;
  while ((pos = text.find('<', pos)) != std::string::npos) {
    const std::size_t end = text.find('>', pos);
    if (end == std::string::npos) return false;
    const std::string tag = text.substr(pos + 1, end - pos - 1);
    pos = end + 1;
    if (tag.empty()) return false;
    if (tag[0] == '?' || tag[0] == '!') continue;
    if (tag[0] == '/') {
      if (stack.empty() || stack.back() != tag.substr(1)) return false;
      stack.pop_back();
      continue;
    }
    const std::string name = tag.substr(0, tag.find_first_of(" \t\n/"));
    if (stack.empty() && saw_root) return false;
    saw_root = true;
    if (tag.back() != '/') stack.push_back(name);
  }
  return saw_root && stack.empty();
}

double reported(const std::string& output, const std::string& label) {
  std::smatch m;
  const std::regex re(label + ": acc=([0-9.]+)");
  REQUIRE(std::regex_search(output, m, re));
  return std::stod(m[1]);
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(gues_cli("--help").code == 0);
  CHECK(gues_cli("").code == 2);
  CHECK(gues_cli("gen-data --bogus-flag").code == 2);
  CHECK(gues_cli("frobnicate").code == 2);
  CHECK(gues_cli("verify --seed notanumber").code == 2);
}

TEST_CASE("unknown config keys are named") {
  const fs::path dir = testutil::scratch("cli_badkey");
  std::ofstream(dir / "bad.json") << R"({"seed": 3, "learning_rat": 0.1})";
  const Run r = gues_cli("gen-data --config \"" + (dir / "bad.json").string() + "\" --out \"" + dir.string() + "\"");
  CHECK(r.code == 2);
  CHECK(r.output.find("learning_rat") != std::string::npos);

  std::ofstream(dir / "range.json") << R"({"image_size": 20})";
  const Run range = gues_cli("gen-data --config \"" + (dir / "range.json").string() + "\"");
  CHECK(range.code == 2);
  CHECK(range.output.find("image_size") != std::string::npos);

  CHECK(gues_cli("verify --config \"" + (dir / "absent.json").string() + "\"").code != 0);
}

TEST_CASE("missing artifacts exit with 3") {
  const fs::path dir = testutil::scratch("cli_missing");
  CHECK(gues_cli("train-source " + common(dir)).code == 3);
  CHECK(gues_cli("adapt --mode gues " + common(dir)).code == 3);
  CHECK(gues_cli("sweep --axis batch " + common(dir)).code == 3);
}

TEST_CASE("pipeline end to end") {
  const fs::path dir = testutil::scratch("cli_pipeline");
  const fs::path out = dir / "out";
  const std::string flags = common(dir);

  REQUIRE(gues_cli("gen-data " + flags).code == 0);
  const std::string manifest = testutil::slurp(out / "data" / "manifest.csv");
  CHECK(manifest.rfind("path,grade,domain_tag\n", 0) == 0);
  CHECK(std::count(manifest.begin(), manifest.end(), '\n') == 1 + 60 + 24);
  const std::string first_image = testutil::slurp(out / "data" / "target" / "00000.ppm");
  REQUIRE(gues_cli("gen-data " + flags).code == 0);
  CHECK(testutil::slurp(out / "data" / "manifest.csv") == manifest);
  CHECK(testutil::slurp(out / "data" / "target" / "00000.ppm") == first_image);

  SUBCASE("config round trip") {
    const std::string written = testutil::slurp(out / "config.json");
    CHECK(written.find("\"n_source\": 60") != std::string::npos);
    const fs::path again = dir / "again";
    REQUIRE(gues_cli("gen-data --config \"" + (out / "config.json").string() + "\" --out \"" + again.string() +
                     "\"")
                .code == 0);
    std::string reread = testutil::slurp(again / "config.json");
    const auto at = reread.find(again.string());
    REQUIRE(at != std::string::npos);
    reread.replace(at, again.string().size(), out.string());
    CHECK(reread == written);
  }

  SUBCASE("training, adaptation and sweeps") {
    const Run untrained = gues_cli("train-source --epochs 0 " + flags);
    REQUIRE(untrained.code == 0);
    CHECK(reported(untrained.output, "in-domain") <= 0.6);

    REQUIRE(gues_cli("train-source " + flags).code == 0);
    const std::string ckpt = testutil::slurp(out / "source" / "classifier.clsf");
    CHECK(ckpt.rfind("CLSF1", 0) == 0);
    REQUIRE(gues_cli("train-source " + flags).code == 0);
    CHECK(testutil::slurp(out / "source" / "classifier.clsf") == ckpt);

    CHECK(gues_cli("adapt --mode sideways " + flags).code == 2);
    for (const char* mode : {"source_only", "gues", "tent", "shot_im", "gues+tent", "gues+shot_im"}) {
      CAPTURE(mode);
      const Run r = gues_cli(std::string("adapt --mode ") + mode + " " + flags);
      REQUIRE(r.code == 0);
      const fs::path run_dir = out / "adapt" / mode;
      const std::string metrics = testutil::slurp(run_dir / "metrics.csv");
      CHECK(metrics.rfind("step,batch_index,acc,qwk,avg\n", 0) == 0);
      CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 1 + 3);
      CHECK(fs::exists(run_dir / "summary.csv"));
    }
    const std::string gues_metrics = testutil::slurp(out / "adapt" / "gues" / "metrics.csv");
    const std::string gues_ckpt = testutil::slurp(out / "adapt" / "gues" / "gues.ckpt");
    REQUIRE(gues_cli("adapt --mode gues " + flags).code == 0);
    CHECK(testutil::slurp(out / "adapt" / "gues" / "metrics.csv") == gues_metrics);
    CHECK(testutil::slurp(out / "adapt" / "gues" / "gues.ckpt") == gues_ckpt);
    CHECK(testutil::slurp(out / "adapt" / "gues" / "loss.csv").rfind("batch_index,kl,mse,loss\n", 0) == 0);

    const Run batch = gues_cli("sweep --axis batch " + flags);
    REQUIRE(batch.code == 0);
    CHECK(batch.output.find("acc spread tent") != std::string::npos);
    const std::string summary = testutil::slurp(out / "sweep" / "batch" / "summary.csv");
    CHECK(std::count(summary.begin(), summary.end(), '\n') == 1 + 2 * 2);
    CHECK(well_formed_xml(testutil::slurp(out / "sweep" / "batch" / "batch_sweep.svg")));

    REQUIRE(gues_cli("sweep --axis alpha_beta " + flags).code == 0);
    CHECK(well_formed_xml(testutil::slurp(out / "sweep" / "alpha_beta" / "alpha_beta.svg")));
    CHECK(gues_cli("sweep --axis gamma " + flags).code == 2);
  }
}

TEST_CASE("saliency subcommand") {
  const fs::path dir = testutil::scratch("cli_saliency");
  gues::write_ppm(dir / "flat.ppm", gues::Image(12, 20, 0.4));
  REQUIRE(gues_cli("saliency \"" + (dir / "flat.ppm").string() + "\" \"" + (dir / "flat.pgm").string() + "\"")
              .code == 0);
  const gues::GrayImage flat = gues::read_pgm(dir / "flat.pgm");
  CHECK(flat.rows() == 12);
  CHECK(flat.cols() == 20);
  CHECK((flat == 0.0).all());

  const Run missing = gues_cli("saliency \"" + (dir / "nope.ppm").string() + "\" \"" + (dir / "x.pgm").string() + "\"");
  CHECK(missing.code != 0);
  CHECK(missing.output.find("nope.ppm") != std::string::npos);
}

TEST_CASE("verify passes by default and catches a tampered normalizer") {
  const fs::path dir = testutil::scratch("cli_verify");
  const Run ok = gues_cli("verify");
  CHECK(ok.code == 0);
  for (const char* check : {"saliency", "gradient", "kl", "qwk", "determinism", "identity"}) {
    CAPTURE(check);
    CHECK(ok.output.find(check) != std::string::npos);
  }
  std::ofstream(dir / "tampered.json") << R"({"saliency_normalizer": 2.9})";
  const Run bad = gues_cli("verify --config \"" + (dir / "tampered.json").string() + "\"");
  CHECK(bad.code == 4);
  CHECK(bad.output.find("FAIL saliency") != std::string::npos);
}
