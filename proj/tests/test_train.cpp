// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "pskd/train.hpp"

using namespace pskd;

namespace {

ExperimentConfig small_cfg() {
  ExperimentConfig cfg;
  cfg.data.n_identities = 8;
  cfg.data.n_train_scenes = 12;
  cfg.data.n_gallery_scenes = 8;
  cfg.data.n_queries = 8;
  cfg.data.seed = 5;
  cfg.optim.iterations = 6;
  cfg.teacher_optim.epochs = 4;
  return cfg;
}

const Dataset& small_dataset() {
  static const Dataset ds = generate(small_cfg().data);
  return ds;
}

const TeacherModel& small_teacher() {
  static const TeacherModel model =
      train_teacher(small_dataset(), true, small_cfg(), 77).model;
  return model;
}

}  // namespace

TEST_CASE("config hash: distinct configs hash differently") {
  Rng rng(1);
  std::vector<ExperimentConfig> configs;
  for (int i = 0; i < 40; ++i) {
    ExperimentConfig c;
    c.seed = rng.next_u64();
    c.data.n_identities = rng.uniform_int(1, 64);
    c.loss.lambda = rng.uniform(0, 1);
    c.loss.margin = rng.uniform(0, 1);
    c.aug.alpha = rng.uniform(1, 50);
    c.optim.iterations = rng.uniform_int(1, 5000);
    c.flags.use_lp = rng.uniform() < 0.5;
    c.flags.use_fsa = rng.uniform() < 0.5;
    configs.push_back(c);
  }
  // single-field perturbations of a base config
  ExperimentConfig base;
  for (int i = 0; i < 8; ++i) {
    ExperimentConfig c = base;
    switch (i) {
      case 0: c.seed = 99; break;
      case 1: c.data.n_queries = 31; break;
      case 2: c.loss.beta_p = 0.11; break;
      case 3: c.aug.delta_p = 3; break;
      case 4: c.flags.use_ltr = true; break;
      case 5: c.optim.lr = 0.011; break;
      case 6: c.teacher_optim.batch = 33; break;
      case 7: c.model.embed_dim = 33; break;
    }
    configs.push_back(c);
  }
  configs.push_back(base);
  std::set<uint64_t> hashes;
  for (const auto& c : configs) hashes.insert(config_hash(c));
  CHECK(hashes.size() == configs.size());
}

TEST_CASE("config JSON round trip") {
  ExperimentConfig c = small_cfg();
  c.flags.use_lp = true;
  c.flags.use_fsa = true;
  c.loss.margin = 0.45;
  const ExperimentConfig back = config_from_json(config_to_json(c));
  CHECK(config_hash(back) == config_hash(c));

  // partial config keeps defaults elsewhere
  const ExperimentConfig partial = config_from_json({{"loss", {{"margin", 0.7}}}});
  CHECK(partial.loss.margin == 0.7);
  CHECK(partial.optim.iterations == ExperimentConfig{}.optim.iterations);
}

TEST_CASE("teacher training reaches a usable cross-entropy and is deterministic") {
  ExperimentConfig cfg = small_cfg();
  cfg.teacher_optim.epochs = 40;
  const auto trained = train_teacher(small_dataset(), false, cfg, 42);
  CHECK(trained.final_ce < std::log(8.0) / 4.0);

  const auto r1 = train_teacher(small_dataset(), false, small_cfg(), 42);
  const auto r2 = train_teacher(small_dataset(), false, small_cfg(), 42);
  for (size_t i = 0; i < r1.model.params.size(); ++i)
    CHECK(r1.model.params[i].value.data == r2.model.params[i].value.data);

  SECTION("shifted-crop training differs only through patch sampling") {
    const auto isa = train_teacher(small_dataset(), true, small_cfg(), 42);
    CHECK(isa.epoch_ce != r1.epoch_ce);  // different patches, different curve
  }
}

TEST_CASE("desk-scale teacher converges well under ln(C)/4") {
  ExperimentConfig cfg;  // default desk config: 32 identities, 96 train scenes
  const Dataset ds = generate(cfg.data);
  const auto result = train_teacher(ds, true, cfg, 7);
  CHECK(result.final_ce < std::log(32.0) / 4.0);
}

TEST_CASE("teacher separates identities in embedding space") {
  const TeacherModel& teacher = small_teacher();
  const Dataset& ds = small_dataset();

  std::map<int, std::vector<Embedding>> by_id;
  for (const auto& scene : ds.gallery)
    for (const auto& box : scene.boxes)
      if (box.identity)
        by_id[*box.identity].push_back(
            teacher_forward(teacher, crop_patch(scene, box, teacher.arch.patch_h,
                                                teacher.arch.patch_w))
                .embedding);

  auto cosine = [](const Embedding& a, const Embedding& b) {
    double dot = 0, na = 0, nb = 0;
    for (int i = 0; i < a.dim(); ++i) {
      dot += a.values[i] * b.values[i];
      na += a.values[i] * a.values[i];
      nb += b.values[i] * b.values[i];
    }
    return dot / std::sqrt(na * nb);
  };

  double intra = 0, inter = 0;
  int n_intra = 0, n_inter = 0;
  for (const auto& [id_a, embs_a] : by_id)
    for (const auto& [id_b, embs_b] : by_id)
      for (const auto& ea : embs_a)
        for (const auto& eb : embs_b) {
          if (&ea == &eb) continue;
          if (id_a == id_b) {
            intra += cosine(ea, eb);
            ++n_intra;
          } else {
            inter += cosine(ea, eb);
            ++n_inter;
          }
        }
  REQUIRE(n_intra > 0);
  REQUIRE(n_inter > 0);
  CHECK(intra / n_intra > inter / n_inter);
}

TEST_CASE("student training: disabled terms stay exactly zero") {
  ExperimentConfig cfg = small_cfg();
  cfg.flags = row_by_name("ours-0").flags;
  const auto result = train_student(small_dataset(), nullptr, cfg, false);
  for (const auto& it : result.record.iterations) {
    CHECK(it.l_p == 0.0);
    CHECK(it.l_pr == 0.0);
    CHECK(it.l_tr == 0.0);
    CHECK(it.l_det > 0.0);
    CHECK(it.l_reid > 0.0);
  }
}

TEST_CASE("student training: full flags give five strictly positive terms at iteration 1") {
  ExperimentConfig cfg = small_cfg();
  cfg.flags = row_by_name("ours").flags;
  const auto result = train_student(small_dataset(), &small_teacher(), cfg, false);
  const auto& first = result.record.iterations.front();
  CHECK(first.l_det > 0.0);
  CHECK(first.l_reid > 0.0);
  CHECK(first.l_p > 0.0);
  CHECK(first.l_pr > 0.0);
  CHECK(first.l_tr > 0.0);
}

TEST_CASE("run record totals recombine exactly") {
  ExperimentConfig cfg = small_cfg();
  cfg.flags = row_by_name("ours").flags;
  const auto result = train_student(small_dataset(), &small_teacher(), cfg, false);
  for (const auto& it : result.record.iterations) {
    const double recombined =
        it.l_det + cfg.loss.lambda * (it.l_reid + cfg.loss.beta_p * it.l_p +
                                      cfg.loss.beta_pr * it.l_pr + cfg.loss.beta_tr * it.l_tr);
    CHECK(std::abs(it.total - recombined) < 1e-9);
  }
}

TEST_CASE("KD flags without a teacher are a config error") {
  ExperimentConfig cfg = small_cfg();
  cfg.flags = row_by_name("ours-4").flags;
  CHECK_THROWS_AS(train_student(small_dataset(), nullptr, cfg), std::invalid_argument);
}

TEST_CASE("distillation leaves every teacher parameter bit-identical") {
  ExperimentConfig cfg = small_cfg();
  cfg.flags = row_by_name("ours").flags;
  cfg.optim.iterations = 2;
  TeacherModel teacher = small_teacher();  // copy
  std::vector<std::vector<double>> before;
  for (const auto& p : teacher.params) before.push_back(p.value.data);
  (void)train_student(small_dataset(), &teacher, cfg, false);
  for (size_t i = 0; i < teacher.params.size(); ++i)
    CHECK(teacher.params[i].value.data == before[i]);
}

TEST_CASE("same config and seed give identical records and parameters") {
  ExperimentConfig cfg = small_cfg();
  cfg.flags = row_by_name("ours").flags;
  cfg.optim.iterations = 10;
  const auto a = train_student(small_dataset(), &small_teacher(), cfg, false);
  const auto b = train_student(small_dataset(), &small_teacher(), cfg, false);
  REQUIRE(a.record.iterations.size() == b.record.iterations.size());
  for (size_t i = 0; i < a.record.iterations.size(); ++i)
    CHECK(a.record.iterations[i].total == b.record.iterations[i].total);
  for (size_t i = 0; i < a.model.params.size(); ++i)
    CHECK(a.model.params[i].value.data == b.model.params[i].value.data);
}

TEST_CASE("teacher embedding dimension mismatches are rejected") {
  ExperimentConfig cfg = small_cfg();
  cfg.flags = row_by_name("ours").flags;
  cfg.model.embed_dim = 16;  // teacher was trained at 32
  CHECK_THROWS_AS(train_student(small_dataset(), &small_teacher(), cfg),
                  std::invalid_argument);
}

TEST_CASE("ablation sweep: row mapping and table layout") {
  // flag patterns must match the published checkmark rows
  CHECK(row_by_name("ours-0").flags.needs_teacher() == false);
  CHECK(row_by_name("ours-1").flags.use_lp);
  CHECK_FALSE(row_by_name("ours-1").flags.use_isa);
  CHECK(row_by_name("ours-2").flags.use_isa);
  CHECK_FALSE(row_by_name("ours-2").flags.use_fsa);
  CHECK(row_by_name("ours-3").flags.use_fsa);
  CHECK((row_by_name("ours-6").flags.use_lpr && row_by_name("ours-6").flags.use_ltr));
  CHECK_FALSE(row_by_name("ours-6").flags.use_lp);
  const auto full = row_by_name("ours").flags;
  CHECK((full.use_lp && full.use_lpr && full.use_ltr && full.use_isa && full.use_fsa));
  CHECK_THROWS_AS(row_by_name("ours-9"), std::invalid_argument);

  ExperimentConfig cfg = small_cfg();
  cfg.optim.iterations = 2;
  cfg.teacher_optim.epochs = 2;
  const auto result = run_ablation(small_dataset(), {row_by_name("ours-0"), row_by_name("ours-5")},
                                   {1}, cfg, 2);
  REQUIRE(result.rows.size() == 2);
  CHECK(result.rows[0].cells.size() == 1);
  const std::string table = format_ablation_table(result);
  CHECK(table.find("ours-0") != std::string::npos);
  CHECK(table.find("ours-5") != std::string::npos);
  CHECK(std::count(table.begin(), table.end(), '\n') == 3);  // header + 2 rows
}

TEST_CASE("ablation results are independent of worker count") {
  ExperimentConfig cfg = small_cfg();
  cfg.optim.iterations = 3;
  cfg.teacher_optim.epochs = 2;
  const auto rows = std::vector<AblationRowSpec>{row_by_name("ours-0"), row_by_name("ours-4")};
  const auto serial = run_ablation(small_dataset(), rows, {1, 2}, cfg, 1);
  const auto parallel = run_ablation(small_dataset(), rows, {1, 2}, cfg, 2);
  for (size_t r = 0; r < rows.size(); ++r) {
    REQUIRE(serial.rows[r].cells.size() == parallel.rows[r].cells.size());
    for (size_t i = 0; i < serial.rows[r].cells.size(); ++i) {
      CHECK(serial.rows[r].cells[i].reid_map == parallel.rows[r].cells[i].reid_map);
      CHECK(serial.rows[r].cells[i].top1 == parallel.rows[r].cells[i].top1);
    }
  }
}

TEST_CASE("run record serializes to JSON") {
  ExperimentConfig cfg = small_cfg();
  cfg.flags = row_by_name("ours-0").flags;
  cfg.optim.iterations = 2;
  const auto result = train_student(small_dataset(), nullptr, cfg);
  const auto j = result.record.to_json();
  CHECK(j["config_hash"] == config_hash_hex(cfg));
  CHECK(j["iterations"].size() == 2);
  CHECK(j.contains("final_metrics"));
  CHECK(j["wall_seconds"].get<double>() > 0);
}
