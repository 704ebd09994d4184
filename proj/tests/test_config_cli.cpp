#include <fstream>
#include <sstream>

#include "doctest.h"
#include "funcreg/cli.hpp"
#include "funcreg/config.hpp"
#include "funcreg/error.hpp"
#include "support.hpp"

using namespace funcreg;
using funcreg::test::read_bytes;
using funcreg::test::scratch_dir;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run(std::vector<std::string> args) {
  std::ostringstream out;
  std::ostringstream err;
  args.insert(args.begin(), "-q");
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream(path, std::ios::trunc) << j.dump(2);
}

ShiftBenchmark cli_benchmark() {
  ShiftBenchmark b;
  b.num_classes = 4;
  b.finetune_classes = {0, 1, 2};
  b.templates = canonical_templates(4);
  b.pretrain_domains = {{"pre", 0, 0.1, 0, 3, 0.5}};
  b.id_domain = {"id", 0, 0.2, 0, 5, 0.5};
  b.ood_domains = {{"ood_r", 25, 0.3, 0, 6, 0.5}};
  b.sizes = {60, 30, 24, 5};
  b.seed = 3;
  return b;
}

nlohmann::json small_run_config(const std::string& method) {
  return {{"model", {{"hidden", {12}}, {"embed_dim", 6}, {"init_seed", 2}}},
          {"train", {{"epochs", 2}, {"batch_size", 16}, {"warmup_steps", 2}, {"seed", 5}}},
          {"regularizer", {{"method", method}}}};
}

/// gen-data, pretrain and finetune of the small benchmark into `root`.
void pipeline(const fs::path& root) {
  write_json(root / "bench.json", to_json(cli_benchmark()));
  write_json(root / "run.json", small_run_config("far_fcr"));
  REQUIRE(run({"gen-data", "--spec", (root / "bench.json").string(), "--out",
               (root / "data").string()})
              .code == 0);
  REQUIRE(run({"pretrain", "--config", (root / "run.json").string(), "--data",
               (root / "data").string(), "--out", (root / "pre").string()})
              .code == 0);
  REQUIRE(run({"finetune", "--config", (root / "run.json").string(), "--data",
               (root / "data").string(), "--pretrained", (root / "pre" / "model").string(),
               "--out", (root / "ft").string()})
              .code == 0);
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("run config defaults, overrides and unknown keys") {
    auto pre = default_run_config(Phase::pretrain);
    CHECK(pre.train.epochs == 12);
    CHECK(pre.train.peak_lr == 3e-3);
    auto ft = default_run_config(Phase::finetune);
    CHECK(ft.train.regularizer.method == RegMethod::far_fcr);
    CHECK(ft.train.epochs == 20);

    auto c = run_config_from_json(small_run_config("l2sp"), Phase::finetune);
    CHECK(c.model.hidden == std::vector<std::size_t>{12});
    CHECK(c.train.epochs == 2);
    CHECK(c.train.peak_lr == 1e-3);
    CHECK(c.train.regularizer.method == RegMethod::l2sp);

    auto back = run_config_from_json(to_json(c), Phase::pretrain);
    CHECK(to_json(back) == to_json(c));

    for (auto [section, key] : std::vector<std::pair<std::string, std::string>>{
             {"", "trian"}, {"train", "lr"}, {"model", "depth"}, {"regularizer", "lambda"},
             {"augment", "strength"}}) {
      nlohmann::json j = small_run_config("far");
      if (section.empty()) {
        j[key] = 1;
      } else {
        j[section][key] = 1;
      }
      try {
        run_config_from_json(j, Phase::finetune);
        FAIL("unknown key accepted: " << key);
      } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("'" + key + "'") != std::string::npos);
      }
    }
    nlohmann::json bad_type = small_run_config("far");
    bad_type["train"]["epochs"] = "many";
    CHECK_THROWS_AS(run_config_from_json(bad_type, Phase::finetune), ConfigError);
    nlohmann::json bad_method = small_run_config("dropout");
    CHECK_THROWS_AS(run_config_from_json(bad_method, Phase::finetune), ConfigError);
  }

  TEST_CASE("hashes") {
    CHECK(fnv1a_hex("") == "cbf29ce484222325");
    CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
    const nlohmann::json a = {{"x", 1}, {"y", {1, 2}}};
    const nlohmann::json b = nlohmann::json::parse(R"({ "y": [1, 2],  "x": 1 })");
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a) != config_hash(nlohmann::json{{"x", 2}, {"y", {1, 2}}}));
    CHECK(config_hash(to_json(default_run_config(Phase::finetune))) ==
          config_hash(to_json(default_run_config(Phase::finetune))));
  }

  TEST_CASE("config files") {
    auto dir = scratch_dir("config_files");
    std::ofstream(dir / "broken.json") << "{ \"train\": ";
    CHECK_THROWS_AS(load_run_config(dir / "broken.json", Phase::finetune), ConfigError);
    CHECK_THROWS_AS(load_run_config(dir / "absent.json", Phase::finetune), ConfigError);
    for (const auto& entry : fs::directory_iterator(FUNCREG_CONFIG_DIR)) {
      if (entry.path().extension() != ".json") continue;
      CAPTURE(entry.path().string());
      const auto j = read_json_file(entry.path());
      const auto name = entry.path().filename().string();
      if (name.find("perturb") != std::string::npos) {
        CHECK(j.is_object());
      } else if (j.contains("num_classes")) {
        CHECK_NOTHROW(benchmark_from_json(j).validate());
      } else {
        CHECK_NOTHROW(run_config_from_json(j, Phase::finetune));
      }
    }
  }
}

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit with code 2") {
    CHECK(run({}).code == 2);
    CHECK(run({"gen-data", "--out", "x"}).code == 2);
    CHECK(run({"fly"}).code == 2);
    auto help = run({"--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("gen-data") != std::string::npos);
  }

  TEST_CASE("unknown config key names the key") {
    auto dir = scratch_dir("cli_badcfg");
    auto j = small_run_config("far");
    j["train"]["learning_rate"] = 0.1;
    write_json(dir / "run.json", j);
    write_json(dir / "bench.json", to_json(cli_benchmark()));
    REQUIRE(run({"gen-data", "--spec", (dir / "bench.json").string(), "--out",
                 (dir / "data").string()})
                .code == 0);
    auto r = run({"pretrain", "--config", (dir / "run.json").string(), "--data",
                  (dir / "data").string(), "--out", (dir / "pre").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("learning_rate") != std::string::npos);
  }

  TEST_CASE("missing data and checkpoints exit with code 3") {
    auto dir = scratch_dir("cli_missing");
    auto r = run({"pretrain", "--data", (dir / "nowhere").string(), "--out", (dir / "o").string()});
    CHECK(r.code == 3);
    CHECK(r.err.find("nowhere") != std::string::npos);
  }

  TEST_CASE("gen-data is reproducible") {
    auto a = scratch_dir("cli_gen_a");
    auto b = scratch_dir("cli_gen_b");
    write_json(a / "bench.json", to_json(cli_benchmark()));
    REQUIRE(run({"gen-data", "--spec", (a / "bench.json").string(), "--out", (a / "d").string()})
                .code == 0);
    REQUIRE(run({"gen-data", "--spec", (a / "bench.json").string(), "--out", (b / "d").string()})
                .code == 0);
    std::size_t compared = 0;
    for (const auto& e : fs::directory_iterator(a / "d")) {
      if (e.path().extension() == ".csv") {
        CHECK(read_bytes(e.path()) == read_bytes(b / "d" / e.path().filename()));
        ++compared;
      }
    }
    CHECK(compared == 6);
    auto man = read_json_file(a / "d" / "manifest.json");
    CHECK(man.at("command") == "gen-data");
    CHECK(man.at("config_hash") == config_hash(to_json(cli_benchmark())));
  }

  TEST_CASE("full pipeline is reproducible and reports") {
    auto a = scratch_dir("cli_pipe_a");
    auto b = scratch_dir("cli_pipe_b");
    pipeline(a);
    pipeline(b);
    for (const char* f : {"pre/model.bin", "pre/steps.csv", "ft/model.bin", "ft/steps.csv",
                          "ft/evals.csv", "ft/metrics.csv"}) {
      CAPTURE(f);
      CHECK(read_bytes(a / f) == read_bytes(b / f));
    }
    auto man = read_json_file(a / "ft" / "run_manifest.json");
    CHECK(man.at("extra").at("method") == "far_fcr");
    auto metrics = read_json_file(a / "ft" / "metrics.json");
    auto report = report_from_json(metrics.at("report"));
    CHECK_NOTHROW(report.at("heldout_zero_shot"));

    auto rep = run({"report", "--runs", (a / "ft").string(), (b / "ft").string(), "--out", "-"});
    REQUIRE(rep.code == 0);
    std::istringstream lines(rep.out);
    std::string header;
    std::string first;
    std::string second;
    std::getline(lines, header);
    std::getline(lines, first);
    std::getline(lines, second);
    CHECK(header == "run,method,seed,id_acc,ood_avg");
    CHECK(first.rfind("ft,far_fcr,5,", 0) == 0);
    CHECK(first == second);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f,%.6f", report.at("id_test").accuracy, report.ood_avg);
    CHECK(first == std::string("ft,far_fcr,5,") + buf);

    auto to_file = run({"report", "--runs", (a / "ft").string(), "--out",
                        (a / "table.csv").string()});
    CHECK(to_file.code == 0);
    CHECK(read_bytes(a / "table.csv") == header + "\n" + first + "\n");

    auto missing = run({"report", "--runs", (a / "ft").string(), (a / "ghost").string(), "--out",
                        "-"});
    CHECK(missing.code == 2);
    CHECK(missing.err.find((a / "ghost").string()) != std::string::npos);

    auto perturb = scratch_dir("cli_pipe_perturb");
    write_json(perturb / "spec.json", {{"n_directions", 2}, {"magnitudes", {0.1, 0.5}}});
    CHECK(run({"perturb", "--model", (a / "ft" / "model").string(), "--spec",
               (perturb / "spec.json").string(), "--data", (a / "data").string(), "--out",
               (perturb / "out").string()})
              .code == 0);
    auto lines_of = [](const std::string& s) { return std::count(s.begin(), s.end(), '\n'); };
    // 4 spaces x 2 directions x 2 splits; parameter space uses its own single magnitude.
    CHECK(lines_of(read_bytes(perturb / "out" / "perturbation.csv")) == 1 + (3 * 2 + 1) * 2 * 2);
    write_json(perturb / "bad.json", {{"directions", 2}});
    auto bad = run({"perturb", "--model", (a / "ft" / "model").string(), "--spec",
                    (perturb / "bad.json").string(), "--data", (a / "data").string(), "--out",
                    (perturb / "out2").string()});
    CHECK(bad.code == 2);
    CHECK(bad.err.find("directions") != std::string::npos);

    CHECK(run({"interpolate", "--pretrained", (a / "pre" / "model").string(), "--finetuned",
               (a / "ft" / "model").string(), "--data", (a / "data").string(), "--out",
               (a / "interp").string()})
              .code == 0);
    CHECK(lines_of(read_bytes(a / "interp" / "interpolation.csv")) == 1 + 11 * 2);
    CHECK(run({"interpolate", "--pretrained", (a / "pre" / "model").string(), "--finetuned",
               (a / "ft" / "model").string(), "--alphas", "0:2:1", "--data",
               (a / "data").string(), "--out", (a / "interp2").string()})
              .code == 2);
  }

  TEST_CASE("ablate writes both tables") {
    auto a = scratch_dir("cli_ablate");
    pipeline(a);
    auto cfg = small_run_config("far_fcr");
    cfg["train"]["epochs"] = 1;
    write_json(a / "abl.json", cfg);
    auto r = run({"ablate", "--config", (a / "abl.json").string(), "--seeds", "1,2", "--data",
                  (a / "data").string(), "--pretrained", (a / "pre" / "model").string(), "--out",
                  (a / "abl").string()});
    REQUIRE(r.code == 0);
    auto text = read_bytes(a / "abl" / "ablation.csv");
    CHECK(std::count(text.begin(), text.end(), '\n') == 5);
    CHECK(run({"ablate", "--seeds", "1,x", "--data", (a / "data").string(), "--pretrained",
               (a / "pre" / "model").string(), "--out", (a / "abl2").string()})
              .code == 2);
  }
}
