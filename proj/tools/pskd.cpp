// SPDX-License-Identifier: Apache-2.0
//
// pskd — person-search distillation workbench.
//
// Subcommands: gen-data, train-teacher, train-student, eval, ablation.
// Artifacts land under --out in content-addressed subdirectories; exit code
// is 0 on success, 1 for usage/config errors, 2 for runtime failures, with a
// one-line machine-parsable message on stderr.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pskd/train.hpp"

namespace fs = std::filesystem;
using namespace pskd;

namespace {

uint64_t fnv_hash(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex16(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

ExperimentConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream f(path);
  check(f.good(), "cannot open config file " + path);
  return config_from_json(nlohmann::json::parse(f));
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  check(f.good(), "cannot write " + path);
  f << text;
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  size_t pos = 0;
  while (pos < csv.size()) {
    size_t comma = csv.find(',', pos);
    if (comma == std::string::npos) comma = csv.size();
    out.push_back(std::stoi(csv.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  check(!out.empty(), "empty list");
  return out;
}

std::vector<uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<uint64_t> out;
  for (int v : parse_int_list(csv)) {
    check(v >= 0, "seeds must be non-negative");
    out.push_back(static_cast<uint64_t>(v));
  }
  return out;
}

void write_metrics(const MetricsReport& report, const std::string& dir, int gallery_size) {
  const std::string suffix = "_g" + std::to_string(gallery_size);
  write_text(dir + "/metrics" + suffix + ".txt", report.to_text());
  write_text(dir + "/metrics" + suffix + ".json", report.to_json().dump(2) + "\n");
  std::string pr = "# recall precision\n";
  char buf[80];
  for (const auto& p : report.detection_pr) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g\n", p.recall, p.precision);
    pr += buf;
  }
  write_text(dir + "/detection_pr" + suffix + ".txt", pr);
}

// ---- subcommand bodies ----------------------------------------------------

int cmd_gen_data(const std::string& config_path, int64_t seed, const std::string& out,
                 int identities, int train_scenes, int gallery_scenes, int queries) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed >= 0) cfg.data.seed = static_cast<uint64_t>(seed);
  if (identities >= 0) cfg.data.n_identities = identities;
  if (train_scenes >= 0) cfg.data.n_train_scenes = train_scenes;
  if (gallery_scenes >= 0) cfg.data.n_gallery_scenes = gallery_scenes;
  if (queries >= 0) cfg.data.n_queries = queries;

  const Dataset ds = generate(cfg.data);
  ExperimentConfig key;
  key.data = cfg.data;
  const std::string dir = out + "/data-" + hex16(fnv_hash(config_to_json(key)["data"].dump()));
  fs::create_directories(dir);
  save_dataset(ds, dir);
  std::cout << dir << "\n";
  return 0;
}

int cmd_train_teacher(const std::string& data_dir, const std::string& aug,
                      const std::string& config_path, int64_t seed, const std::string& out) {
  check(aug == "none" || aug == "isa", "--aug must be 'none' or 'isa'");
  ExperimentConfig cfg = load_config(config_path);
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  const Dataset ds = load_dataset(data_dir);

  const bool isa = aug == "isa";
  nlohmann::json key = config_to_json(cfg);
  key.erase("flags");
  key.erase("optim");
  key["teacher_aug"] = aug;
  const std::string dir = out + "/teacher-" + hex16(fnv_hash(key.dump()));
  fs::create_directories(dir);

  const TeacherTrainResult result = train_teacher(ds, isa, cfg, cfg.seed);
  save_checkpoint(dir + "/teacher.ckpt", to_checkpoint(result.model));
  nlohmann::json log;
  log["aug"] = aug;
  log["final_ce"] = result.final_ce;
  log["epoch_ce"] = result.epoch_ce;
  write_text(dir + "/teacher_log.json", log.dump(2) + "\n");
  std::cout << dir << "/teacher.ckpt\n";
  std::cerr << "teacher " << (isa ? "(isa)" : "(plain)") << " final CE " << result.final_ce
            << "\n";
  return 0;
}

int cmd_train_student(const std::string& data_dir, const std::string& teacher_path,
                      const std::string& config_path, int64_t seed, const std::string& out,
                      const std::string& row) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  if (!row.empty()) cfg.flags = row_by_name(row).flags;
  const Dataset ds = load_dataset(data_dir);

  TeacherModel teacher;
  const TeacherModel* teacher_ptr = nullptr;
  if (cfg.flags.needs_teacher()) {
    check(!teacher_path.empty(),
          "config error: KD flags are set but no --teacher checkpoint was given");
    teacher = teacher_from_checkpoint(load_checkpoint(teacher_path));
    teacher_ptr = &teacher;
  }

  const std::string dir = out + "/run-" + config_hash_hex(cfg);
  fs::create_directories(dir);
  const StudentTrainResult result = train_student(ds, teacher_ptr, cfg);
  save_checkpoint(dir + "/student.ckpt", to_checkpoint(result.model));
  write_text(dir + "/run_record.json", result.record.to_json().dump(2) + "\n");
  write_text(dir + "/config.json", config_to_json(cfg).dump(2) + "\n");
  std::cout << dir << "/student.ckpt\n";
  std::cerr << "trained " << cfg.optim.iterations << " iterations in "
            << result.record.wall_seconds << "s; final mAP "
            << result.record.final_metrics.reid_map << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& sizes_csv, int64_t seed, const std::string& out, bool oracle) {
  const Dataset ds = load_dataset(data_dir);
  const uint64_t eval_seed = seed >= 0 ? static_cast<uint64_t>(seed) : 1;

  std::unique_ptr<SearchBackend> backend;
  std::string key = data_dir + "|" + sizes_csv + "|" + std::to_string(eval_seed);
  if (oracle) {
    backend = std::make_unique<OracleBackend>(ds.num_classes());
    key += "|oracle";
  } else {
    check(!ckpt_path.empty(), "--checkpoint is required unless --oracle is given");
    StudentModel model = student_from_checkpoint(load_checkpoint(ckpt_path));
    check(model.arch.n_classes == ds.num_classes(),
          "checkpoint topology does not match the dataset identity count");
    backend = std::make_unique<StudentBackend>(std::move(model));
    key += "|" + ckpt_path;
  }

  const std::string dir = out + "/eval-" + hex16(fnv_hash(key));
  fs::create_directories(dir);
  for (int size : parse_int_list(sizes_csv)) {
    const MetricsReport report =
        evaluate_search(*backend, ds.queries, ds.gallery, size, eval_seed);
    write_metrics(report, dir, size);
    std::cout << "gallery_size=" << size << " reid_map=" << report.reid_map
              << " top1=" << report.cmc.at(1) << " detection_ap=" << report.detection_ap
              << " recall=" << report.detection_recall << "\n";
  }
  std::cerr << dir << "\n";
  return 0;
}

int cmd_ablation(const std::string& data_dir, const std::string& seeds_csv,
                 const std::vector<std::string>& row_names, const std::string& config_path,
                 int jobs, const std::string& out) {
  ExperimentConfig cfg = load_config(config_path);
  const Dataset ds = load_dataset(data_dir);
  const std::vector<uint64_t> seeds = parse_seed_list(seeds_csv);

  std::vector<AblationRowSpec> rows;
  if (row_names.empty())
    rows = default_ablation_rows();
  else
    for (const auto& name : row_names) rows.push_back(row_by_name(name));

  const AblationResult result = run_ablation(ds, rows, seeds, cfg, jobs);
  const std::string table = format_ablation_table(result);
  std::cout << table;
  std::cerr << "sweep wall time " << result.wall_seconds << "s\n";

  if (!out.empty()) {
    nlohmann::json key = config_to_json(cfg);
    key["rows"] = nlohmann::json::array();
    for (const auto& row : rows) key["rows"].push_back(row.name);
    key["seeds"] = seeds;
    const std::string dir = out + "/ablation-" + hex16(fnv_hash(key.dump()));
    fs::create_directories(dir);
    write_text(dir + "/table.txt", table);
    nlohmann::json j;
    j["wall_seconds"] = result.wall_seconds;
    for (const auto& row : result.rows) {
      nlohmann::json cells = nlohmann::json::array();
      for (const auto& c : row.cells)
        cells.push_back({{"seed", c.seed}, {"reid_map", c.reid_map}, {"top1", c.top1}});
      j["rows"][row.row.name] = {{"map_mean", row.map_mean},
                                 {"map_std", row.map_std},
                                 {"top1_mean", row.top1_mean},
                                 {"top1_std", row.top1_std},
                                 {"cells", cells}};
    }
    write_text(dir + "/ablation.json", j.dump(2) + "\n");
    std::cerr << dir << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"person-search distillation workbench"};
  app.require_subcommand(1);

  std::string config_path, out, data_dir, teacher_path, ckpt_path, aug = "none";
  std::string sizes_csv = "64", seeds_csv = "1", row;
  std::vector<std::string> row_names;
  int64_t seed = -1;
  int jobs = 2;
  bool oracle = false;
  int identities = -1, train_scenes = -1, gallery_scenes = -1, queries = -1;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset directory");
  gen->add_option("--config", config_path, "JSON config file");
  gen->add_option("--seed", seed, "dataset seed (overrides config)");
  gen->add_option("--out", out, "output root")->required();
  gen->add_option("--identities", identities, "identity count override");
  gen->add_option("--train-scenes", train_scenes, "train scene count override");
  gen->add_option("--gallery-scenes", gallery_scenes, "gallery scene count override");
  gen->add_option("--queries", queries, "query count override");

  auto* tt = app.add_subcommand("train-teacher", "pretrain the patch Re-ID teacher");
  tt->add_option("--data", data_dir, "dataset directory")->required();
  tt->add_option("--aug", aug, "patch augmentation: none | isa");
  tt->add_option("--config", config_path, "JSON config file");
  tt->add_option("--seed", seed, "training seed (overrides config)");
  tt->add_option("--out", out, "output root")->required();

  auto* ts = app.add_subcommand("train-student", "train the joint detection + Re-ID student");
  ts->add_option("--data", data_dir, "dataset directory")->required();
  ts->add_option("--teacher", teacher_path, "teacher checkpoint (required with KD flags)");
  ts->add_option("--config", config_path, "JSON config file");
  ts->add_option("--row", row, "named flag preset (ours-0 .. ours)");
  ts->add_option("--seed", seed, "training seed (overrides config)");
  ts->add_option("--out", out, "output root")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a student checkpoint");
  ev->add_option("--checkpoint", ckpt_path, "student checkpoint");
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--gallery-sizes", sizes_csv, "comma list of gallery sizes");
  ev->add_option("--seed", seed, "gallery sampling seed");
  ev->add_option("--out", out, "output root")->required();
  ev->add_flag("--oracle", oracle, "use the annotation oracle instead of a checkpoint");

  auto* ab = app.add_subcommand("ablation", "train and evaluate a row sweep");
  ab->add_option("--data", data_dir, "dataset directory")->required();
  ab->add_option("--seeds", seeds_csv, "comma list of seeds");
  ab->add_option("--rows", row_names, "row names (default: supervision table)");
  ab->add_option("--config", config_path, "JSON config file");
  ab->add_option("--jobs", jobs, "parallel training jobs");
  ab->add_option("--out", out, "output root (optional)");

  try {
    app.parse(argc, argv);
    if (gen->parsed())
      return cmd_gen_data(config_path, seed, out, identities, train_scenes, gallery_scenes,
                          queries);
    if (tt->parsed()) return cmd_train_teacher(data_dir, aug, config_path, seed, out);
    if (ts->parsed())
      return cmd_train_student(data_dir, teacher_path, config_path, seed, out, row);
    if (ev->parsed()) return cmd_eval(ckpt_path, data_dir, sizes_csv, seed, out, oracle);
    if (ab->parsed())
      return cmd_ablation(data_dir, seeds_csv, row_names, config_path, jobs, out);
    return 1;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: usage: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << "\n";
    return 2;
  }
}
