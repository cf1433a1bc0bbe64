#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "simplerob/cli.hpp"
#include "simplerob/data.hpp"

using namespace simplerob;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("simplerob_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path write_config(const fs::path& dir, const std::string& body) {
  const auto path = dir / "run.ini";
  std::ofstream(path) << body;
  return path;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct Outcome {
  int code;
  std::string log, err;
};

Outcome invoke(const std::string& command, const fs::path& config, const fs::path& out, bool overwrite = false,
               std::size_t jobs = 1, const std::string& mode = "") {
  cli::Options o;
  o.command = command;
  o.config = config;
  o.out = out;
  o.overwrite = overwrite;
  o.jobs = jobs;
  o.mode = mode;
  std::ostringstream log, err;
  const int code = cli::run(o, log, err);
  return {code, log.str(), err.str()};
}

const char* kSmallRun =
    "[data]\nclasses = 3\ntrain_per_class = 20\ntest_per_class = 8\n"
    "[model]\nhidden = 8\n"
    "[train]\nepochs = 2\nbatch_size = 16\nsteps = 3\n"
    "[attack]\nsteps = 3\n";

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("config parsing fills defaults and resolves paths") {
    std::istringstream in("# comment\n[run]\nseed = 7\nout = results\n[train]\nepochs=3\n");
    const auto cfg = cli::Config::parse(in, "/base/dir");
    CHECK(cfg.u64("run", "seed") == 7);
    CHECK(cfg.count("train", "epochs") == 3);
    CHECK(cfg.num("train", "learning_rate") == 0.1);
    CHECK(*cfg.path("run", "out") == fs::path("/base/dir/results"));
    CHECK_FALSE(cfg.path("attack", "checkpoint").has_value());
    CHECK(cfg.list("attack", "attacks") == std::vector<std::string>{"auto"});
    CHECK(cfg.nums("analysis", "eps_grid") == std::vector<double>{0.5, 1.0, 1.5, 2.0});
  }

  TEST_CASE("unknown sections and keys are named in the error") {
    auto key_of = [](const std::string& text) {
      std::istringstream in(text);
      try {
        cli::Config::parse(in, ".");
      } catch (const cli::ConfigError& e) {
        CHECK(std::string(e.what()).find(e.key().substr(e.key().find('.') + 1)) != std::string::npos);
        return e.key();
      }
      return std::string("none");
    };
    CHECK(key_of("[train]\nepoch = 3\n") == "train.epoch");
    CHECK(key_of("[bogus]\n") == "bogus");
    CHECK(key_of("seed = 1\n") == "seed");
  }

  TEST_CASE("typed accessors reject malformed values") {
    std::istringstream in("[train]\nepochs = many\nrandom_init = maybe\n");
    const auto cfg = cli::Config::parse(in, ".");
    CHECK_THROWS_AS(cfg.count("train", "epochs"), cli::ConfigError);
    CHECK_THROWS_AS(cfg.flag("train", "random_init"), cli::ConfigError);
  }

  TEST_CASE("the config hash ignores the output directory") {
    std::istringstream a("[run]\nout = one\n"), b("[run]\nout = two\n"), c("[run]\nseed = 3\n");
    const auto ca = cli::Config::parse(a, "."), cb = cli::Config::parse(b, "."), cc = cli::Config::parse(c, ".");
    CHECK(ca.hash() == cb.hash());
    CHECK(ca.hash() != cc.hash());
    CHECK(ca.canonical().find("one") == std::string::npos);
  }

  TEST_CASE("train then attack end to end") {
    const auto dir = fresh_dir("e2e");
    const auto cfg = write_config(dir, kSmallRun);
    const auto t = invoke("train", cfg, dir / "model");
    REQUIRE_MESSAGE(t.code == 0, t.err);
    CHECK(fs::exists(dir / "model" / "model.rbn"));
    CHECK(fs::exists(dir / "model" / "train_log.csv"));
    CHECK(slurp(dir / "model" / "manifest.txt").find("kind=model") != std::string::npos);

    const auto again = invoke("train", cfg, dir / "model");
    CHECK(again.code == 2);
    CHECK(again.err.find("--overwrite") != std::string::npos);
    CHECK(invoke("train", cfg, dir / "model", true).code == 0);

    const auto acfg = write_config(dir, std::string(kSmallRun) + "checkpoint = model\n");
    const auto a = invoke("attack", acfg, dir / "attack");
    REQUIRE_MESSAGE(a.code == 0, a.err);
    const auto report = nlohmann::json::parse(slurp(dir / "attack" / "attack_report.json"));
    CHECK(report["schema_version"] == cli::kSchemaVersion);
    CHECK(report.contains("config_hash"));
    CHECK(report.contains("report"));
    CHECK(fs::exists(dir / "attack" / "attack_examples.csv"));
  }

  TEST_CASE("robin train and attack are independent of the job count") {
    const auto dir = fresh_dir("robin");
    const auto cfg = write_config(dir, kSmallRun);
    REQUIRE(invoke("robin-train", cfg, dir / "agg").code == 0);
    CHECK(fs::exists(dir / "agg" / "manifest.txt"));
    const auto acfg = write_config(dir, std::string(kSmallRun) + "checkpoint = agg\n");
    const auto one = invoke("robin-attack", acfg, dir / "a1", false, 1);
    REQUIRE_MESSAGE(one.code == 0, one.err);
    REQUIRE(invoke("robin-attack", acfg, dir / "a3", false, 3).code == 0);
    CHECK(slurp(dir / "a1" / "attack_examples.csv") == slurp(dir / "a3" / "attack_examples.csv"));
    const auto r1 = nlohmann::json::parse(slurp(dir / "a1" / "attack_report.json"));
    const auto r3 = nlohmann::json::parse(slurp(dir / "a3" / "attack_report.json"));
    CHECK(r1["report"] == r3["report"]);
  }

  TEST_CASE("an empty attack list is a configuration error") {
    const auto dir = fresh_dir("empty_attacks");
    const auto cfg = write_config(dir, kSmallRun);
    REQUIRE(invoke("train", cfg, dir / "model").code == 0);
    const auto acfg = write_config(dir, std::string(kSmallRun) + "checkpoint = model\nattacks =\n");
    const auto r = invoke("attack", acfg, dir / "out");
    CHECK(r.code == 2);
    CHECK(r.err.find("attacks") != std::string::npos);
  }

  TEST_CASE("a missing checkpoint exits 2 and names the key") {
    const auto dir = fresh_dir("missing");
    const auto cfg = write_config(dir, std::string(kSmallRun) + "checkpoint = nowhere\n");
    const auto r = invoke("attack", cfg, dir / "out");
    CHECK(r.code == 2);
    CHECK(r.err.find("checkpoint") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "out" / "attack_report.json"));
    const auto unset = write_config(dir, kSmallRun);
    CHECK(invoke("attack", unset, dir / "out").code == 2);
  }

  TEST_CASE("a checkpoint of the wrong shape names both shapes") {
    const auto dir = fresh_dir("shape");
    const auto cfg = write_config(dir, kSmallRun);
    REQUIRE(invoke("train", cfg, dir / "model").code == 0);
    data::write_idx_images(dir / "img", 4, 4, std::vector<std::uint8_t>(3 * 16, 128));
    data::write_idx_labels(dir / "lbl", std::vector<std::uint8_t>{0, 1, 2});
    const auto acfg = write_config(dir,
                                   "[data]\nsource = idx\ntrain_images = img\ntrain_labels = lbl\n"
                                   "test_images = img\ntest_labels = lbl\n[attack]\ncheckpoint = model\n");
    const auto r = invoke("attack", acfg, dir / "out");
    CHECK(r.code == 2);
    CHECK(r.err.find("[2]") != std::string::npos);
    CHECK(r.err.find("[1x2x2]") != std::string::npos);
  }

  TEST_CASE("unknown analysis mode and bad jobs") {
    const auto dir = fresh_dir("modes");
    const auto cfg = write_config(dir, kSmallRun);
    CHECK(invoke("analyze", cfg, dir / "out", false, 1, "nonsense").code == 2);
    CHECK(invoke("train", cfg, dir / "out", false, 0).code == 2);
  }

  TEST_CASE("argv front end") {
    std::ostringstream log, err;
    const char* help[] = {"simplerob", "--version"};
    CHECK(cli::main(2, const_cast<char**>(help), log, err) == 0);
    CHECK(log.str().find(cli::version()) != std::string::npos);
    const char* bad[] = {"simplerob", "train"};
    CHECK(cli::main(2, const_cast<char**>(bad), log, err) == 2);
  }
}
