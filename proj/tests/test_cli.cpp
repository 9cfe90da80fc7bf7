// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the command-line interface, driving the built binary
// through std::system with a scratch working directory.

#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "pskd/core.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kBinary = PSKD_CLI_BINARY;

struct CommandResult {
  int exit_code;
  std::string stdout_text;
  std::string stderr_text;
};

CommandResult run(const std::string& args) {
  static int counter = 0;
  const std::string base =
      (fs::temp_directory_path() / ("pskd_cli_" + std::to_string(counter++))).string();
  const std::string cmd = kBinary + " " + args + " >" + base + ".out 2>" + base + ".err";
  const int status = std::system(cmd.c_str());
  auto slurp = [](const std::string& path) {
    std::ifstream f(path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  CommandResult r{WEXITSTATUS(status), slurp(base + ".out"), slurp(base + ".err")};
  fs::remove(base + ".out");
  fs::remove(base + ".err");
  return r;
}

std::string first_line(const std::string& text) {
  return text.substr(0, text.find('\n'));
}

// shared scratch tree with a small dataset + config
struct Workspace {
  std::string root;
  std::string data_dir;
  std::string config_path;

  Workspace() {
    root = (fs::temp_directory_path() / "pskd_cli_ws").string();
    fs::remove_all(root);
    fs::create_directories(root);
    config_path = root + "/config.json";
    std::ofstream cfg(config_path);
    cfg << R"({"data": {"n_identities": 6, "n_train_scenes": 8, "n_gallery_scenes": 6,
                        "n_queries": 6, "seed": 3},
               "optim": {"iterations": 20}, "teacher_optim": {"epochs": 8}})";
    cfg.close();
    const auto gen = run("gen-data --config " + config_path + " --out " + root);
    REQUIRE(gen.exit_code == 0);
    data_dir = first_line(gen.stdout_text);
  }
};

Workspace& workspace() {
  static Workspace ws;
  return ws;
}

}  // namespace

TEST_CASE("gen-data writes the dataset layout and is reproducible") {
  auto& ws = workspace();
  CHECK(fs::exists(ws.data_dir + "/train/annotations.txt"));
  CHECK(fs::exists(ws.data_dir + "/gallery/annotations.txt"));
  CHECK(fs::exists(ws.data_dir + "/query/annotations.txt"));
  CHECK(fs::exists(ws.data_dir + "/meta.json"));

  // same seed twice: identical bytes (content-addressed dir collides on purpose)
  const std::string again = (fs::temp_directory_path() / "pskd_cli_regen").string();
  fs::remove_all(again);
  fs::create_directories(again);
  const auto regen = run("gen-data --config " + ws.config_path + " --out " + again);
  REQUIRE(regen.exit_code == 0);
  const std::string dir2 = first_line(regen.stdout_text);
  for (const std::string rel : {"/train/annotations.txt", "/train/scene_00000.ppm",
                                "/gallery/scene_00003.ppm", "/meta.json"}) {
    std::ifstream a(ws.data_dir + rel, std::ios::binary), b(dir2 + rel, std::ios::binary);
    const std::string ba((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    const std::string bb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(ba == bb);
  }
  fs::remove_all(again);
}

TEST_CASE("gen-data rejects invalid spec overrides with exit code 1") {
  const auto r = run("gen-data --out /tmp --identities 0");
  CHECK(r.exit_code == 1);
  CHECK(r.stderr_text.rfind("error: ", 0) == 0);
  CHECK(first_line(r.stderr_text).find('\n') == std::string::npos);
}

TEST_CASE("train-teacher writes a checkpoint deterministically") {
  auto& ws = workspace();
  const auto r1 = run("train-teacher --data " + ws.data_dir + " --aug isa --config " +
                      ws.config_path + " --seed 5 --out " + ws.root);
  REQUIRE(r1.exit_code == 0);
  const std::string ckpt = first_line(r1.stdout_text);
  CHECK(fs::exists(ckpt));

  // re-run into a fresh root: byte-identical checkpoint
  const std::string other = ws.root + "/again";
  fs::create_directories(other);
  const auto r2 = run("train-teacher --data " + ws.data_dir + " --aug isa --config " +
                      ws.config_path + " --seed 5 --out " + other);
  REQUIRE(r2.exit_code == 0);
  std::ifstream a(ckpt, std::ios::binary), b(first_line(r2.stdout_text), std::ios::binary);
  const std::string ba((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  const std::string bb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(ba == bb);

  SECTION("aug flag changes the code path and the loss curve") {
    const auto plain = run("train-teacher --data " + ws.data_dir + " --aug none --config " +
                           ws.config_path + " --seed 5 --out " + ws.root);
    REQUIRE(plain.exit_code == 0);
    const std::string log_isa =
        fs::path(ckpt).parent_path().string() + "/teacher_log.json";
    const std::string log_plain =
        fs::path(first_line(plain.stdout_text)).parent_path().string() + "/teacher_log.json";
    std::ifstream fa(log_isa), fb(log_plain);
    const auto ja = nlohmann::json::parse(fa);
    const auto jb = nlohmann::json::parse(fb);
    CHECK(ja["aug"] == "isa");
    CHECK(jb["aug"] == "none");
    CHECK(ja["epoch_ce"] != jb["epoch_ce"]);
  }

  SECTION("bad aug value is a usage error") {
    const auto bad = run("train-teacher --data " + ws.data_dir + " --aug flip --out " + ws.root);
    CHECK(bad.exit_code == 1);
  }
}

TEST_CASE("train-student end to end, then eval, including failure modes") {
  auto& ws = workspace();
  const auto teacher = run("train-teacher --data " + ws.data_dir + " --aug isa --config " +
                           ws.config_path + " --seed 5 --out " + ws.root);
  REQUIRE(teacher.exit_code == 0);
  const std::string teacher_ckpt = first_line(teacher.stdout_text);

  SECTION("KD flags without --teacher fail as a config error") {
    const auto r = run("train-student --data " + ws.data_dir + " --config " + ws.config_path +
                       " --row ours-4 --seed 5 --out " + ws.root);
    CHECK(r.exit_code == 1);
    CHECK(r.stderr_text.find("teacher") != std::string::npos);
  }

  SECTION("full pipeline with run record and reproducible loss curve") {
    const std::string cmd = "train-student --data " + ws.data_dir + " --teacher " +
                            teacher_ckpt + " --config " + ws.config_path +
                            " --row ours --seed 5 --out ";
    const auto r1 = run(cmd + ws.root);
    REQUIRE(r1.exit_code == 0);
    const std::string student_ckpt = first_line(r1.stdout_text);
    const std::string record_path =
        fs::path(student_ckpt).parent_path().string() + "/run_record.json";
    REQUIRE(fs::exists(record_path));

    std::ifstream rec(record_path);
    const auto record = nlohmann::json::parse(rec);
    CHECK(record["iterations"].size() == 20);
    // every disabled/enabled term present per iteration, total recombines
    for (const auto& it : record["iterations"]) {
      REQUIRE(it.size() == 6);
      const double total = it[0].get<double>() +
                           0.1 * (it[1].get<double>() + 0.1 * it[2].get<double>() +
                                  it[3].get<double>() + it[4].get<double>());
      CHECK(std::abs(total - it[5].get<double>()) < 1e-9);
    }

    const std::string other = ws.root + "/rerun";
    fs::create_directories(other);
    const auto r2 = run(cmd + other);
    REQUIRE(r2.exit_code == 0);
    std::ifstream rec2(fs::path(first_line(r2.stdout_text)).parent_path().string() +
                       "/run_record.json");
    const auto record2 = nlohmann::json::parse(rec2);
    CHECK(record["iterations"] == record2["iterations"]);

    // eval at several sizes in one invocation
    const auto ev = run("eval --checkpoint " + student_ckpt + " --data " + ws.data_dir +
                        " --gallery-sizes 2,4,6 --seed 1 --out " + ws.root);
    REQUIRE(ev.exit_code == 0);
    const std::string eval_dir = first_line(ev.stderr_text);
    for (int size : {2, 4, 6}) {
      CHECK(fs::exists(eval_dir + "/metrics_g" + std::to_string(size) + ".txt"));
      CHECK(fs::exists(eval_dir + "/metrics_g" + std::to_string(size) + ".json"));
      CHECK(fs::exists(eval_dir + "/detection_pr_g" + std::to_string(size) + ".txt"));
    }

    // teacher checkpoint not needed at inference: delete it, eval still works
    fs::remove(teacher_ckpt);
    const auto ev2 = run("eval --checkpoint " + student_ckpt + " --data " + ws.data_dir +
                         " --gallery-sizes 6 --seed 1 --out " + ws.root + "/noteacher");
    CHECK(ev2.exit_code == 0);

    // wrong-kind checkpoint is a topology error
    const auto bad = run("eval --checkpoint " + student_ckpt + ".missing --data " +
                         ws.data_dir + " --gallery-sizes 6 --out " + ws.root);
    CHECK(bad.exit_code != 0);
  }
}

TEST_CASE("eval with the oracle backend reports a perfect upper bound") {
  auto& ws = workspace();
  const auto r = run("eval --oracle --data " + ws.data_dir + " --gallery-sizes 6 --seed 1 --out " +
                     ws.root);
  REQUIRE(r.exit_code == 0);
  CHECK(r.stdout_text.find("reid_map=1") != std::string::npos);
  CHECK(r.stdout_text.find("top1=1") != std::string::npos);
}

TEST_CASE("ablation smoke: two rows, one seed") {
  auto& ws = workspace();
  const auto r = run("ablation --data " + ws.data_dir + " --seeds 1 --rows ours-0 --rows ours-5" +
                     " --config " + ws.config_path + " --jobs 2 --out " + ws.root);
  REQUIRE(r.exit_code == 0);
  CHECK(r.stdout_text.find("ours-0") != std::string::npos);
  CHECK(r.stdout_text.find("ours-5") != std::string::npos);
  // row flag pattern: ours-5 row carries Ltr + ISA checkmarks
  bool found = false;
  std::istringstream lines(r.stdout_text);
  std::string line;
  while (std::getline(lines, line))
    if (line.rfind("ours-5", 0) == 0) {
      found = true;
      CHECK(line.find(" x ") != std::string::npos);
    }
  CHECK(found);
}

TEST_CASE("unknown subcommands and unwritable paths fail cleanly") {
  const auto r = run("frobnicate");
  CHECK(r.exit_code == 1);
  const auto w = run("gen-data --out /proc/definitely/not/writable");
  CHECK(w.exit_code != 0);
  CHECK(w.stderr_text.rfind("error: ", 0) == 0);
}
