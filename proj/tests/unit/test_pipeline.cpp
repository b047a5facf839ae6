#include <doctest.h>

#include <fstream>
#include <sstream>

#include "city2scene/error.hpp"
#include "city2scene/pipeline.hpp"
#include "support.hpp"

using namespace city2scene;

namespace {

std::string error_of(const nlohmann::json& doc) {
  try {
    stage_config_from_json(doc);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Fixture {
  c2s_test::TempDir dir{"pipeline"};
  Manifest manifest = c2s_test::make_corpus(dir / "data", 0.9, 4);
  FeatureStore store{spectrogram_preset("desk")};

  StageConfig config(int stage, int epochs, std::uint64_t seed) const {
    StageConfig cfg = c2s_test::desk_config(dir / "data", stage, epochs);
    cfg.seed = seed;
    return cfg;
  }
};

}  // namespace

TEST_CASE("empty config parses to the defaults") {
  const StageConfig cfg = stage_config_from_json(nlohmann::json::object());
  CHECK(cfg.stage == 1);
  CHECK(cfg.kd.temperature == 2.0);
  CHECK(cfg.kd.lambda == 0.5);
  CHECK(cfg.kd.kl_direction == KlDirection::teacher_reference);
  CHECK(cfg.scheduler.peak_lr == cfg.optimizer.peak_lr);
  CHECK(cfg.encoder.n_mels == cfg.preprocessing.n_mels);
}

TEST_CASE("config round trips through json") {
  nlohmann::json doc = {{"stage", 3},
                        {"max_epochs", 7},
                        {"batch_size", 16},
                        {"seed", 9},
                        {"kd", {{"temperature", 4.0}, {"lambda", 0.25}, {"kl_direction", "student_reference"}}},
                        {"teacher_mode", "cached"},
                        {"teacher_checkpoints", {"a.c2s", "b.c2s"}},
                        {"data", {{"dir", "somewhere"}, {"val_fraction", 0.2}, {"split_seed", 3}}}};
  const StageConfig a = stage_config_from_json(doc);
  const StageConfig b = stage_config_from_json(to_json(a));
  CHECK(to_json(a) == to_json(b));
  CHECK(b.kd.lambda == 0.25);
  CHECK(b.kd.kl_direction == KlDirection::student_reference);
  CHECK(b.teacher_mode == TeacherMode::cached);
  CHECK(b.teacher_checkpoints.size() == 2);
  CHECK(b.data.val_fraction == 0.2);
  CHECK(b.data.split_seed == 3);
}

TEST_CASE("unknown fields and type errors are reported together") {
  const std::string msg = error_of({{"max_epoch", 3}, {"batch_size", "large"}, {"kd", {{"lamda", 0.1}}}});
  CHECK(msg.find("max_epoch: unknown field") != std::string::npos);
  CHECK(msg.find("batch_size") != std::string::npos);
  CHECK(msg.find("kd.lamda: unknown field") != std::string::npos);
}

TEST_CASE("validation names every offending field") {
  const std::string msg = error_of({{"max_epochs", 0}, {"kd", {{"lambda", 1.5}, {"temperature", 0.0}}}});
  CHECK(msg.find("max_epochs") != std::string::npos);
  CHECK(msg.find("lambda") != std::string::npos);
  CHECK(msg.find("temperature") != std::string::npos);
}

TEST_CASE("stage 2 requires a city checkpoint") {
  CHECK(error_of({{"stage", 2}}).find("city_checkpoint") != std::string::npos);
  CHECK(error_of({{"stage", 2}, {"city_checkpoint", "x.c2s"}}).empty());
}

TEST_CASE("mismatched learning rates and mel counts are rejected") {
  CHECK(error_of({{"optimizer", {{"peak_lr", 0.01}}}, {"scheduler", {{"peak_lr", 0.02}}}}).find("scheduler.peak_lr") !=
        std::string::npos);
  CHECK(error_of({{"backbone", {{"encoder", {{"n_mels", 40}}}}}, {"preprocessing", {{"n_mels", 64}}}}).find("n_mels") !=
        std::string::npos);
}

TEST_CASE("diraug without impulse responses is rejected") {
  CHECK(error_of({{"augment", {{"diraug_prob", 0.5}}}}).find("ir_bank_dir") != std::string::npos);
  CHECK(error_of({{"augment", {{"diraug_prob", 0.5}}}, {"augment_enabled", false}}).empty());
}

TEST_CASE("dotted overrides") {
  nlohmann::json doc = {{"kd", {{"lambda", 0.5}}}};
  apply_override(doc, "kd.lambda=0.3");
  apply_override(doc, "data.dir=some/path");
  apply_override(doc, "max_epochs=4");
  apply_override(doc, "eval_each_epoch=false");
  CHECK(doc["kd"]["lambda"] == 0.3);
  CHECK(doc["data"]["dir"] == "some/path");
  CHECK(doc["max_epochs"] == 4);
  CHECK(doc["eval_each_epoch"] == false);
  const StageConfig cfg = stage_config_from_json(doc);
  CHECK(cfg.kd.lambda == 0.3);
  CHECK(cfg.max_epochs == 4);
  CHECK_THROWS_AS(apply_override(doc, "novalue"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "kd..lambda=1"), ConfigError);
}

TEST_CASE("stage 3 without teachers points at stage 2") {
  Fixture f;
  try {
    train_stage3(f.config(3, 1, 1), {}, f.manifest, &f.store);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("stage2") != std::string::npos);
  }
}

TEST_CASE("training pipeline invariants") {
  Fixture f;
  const StageResult city = train_stage1(f.config(1, 2, 3), f.manifest, &f.store);
  CHECK(city.checkpoint.role == Role::city_model);
  CHECK(city.checkpoint.label_kind == LabelKind::city);
  CHECK(city.checkpoint.labels == f.manifest.city_vocab);
  CHECK(city.log.size() == 2);
  REQUIRE(city.test_metrics);
  CHECK(city.test_metrics->n_eval == f.manifest.indices(Split::test).size());

  SUBCASE("stage 2 leaves the city encoder untouched") {
    StageConfig cfg = f.config(2, 3, 4);
    cfg.augment.mixup_alpha = 0.3;
    cfg.augment.specaug_ratio = 0.2;
    cfg.augment.specaug_prob = 1.0;
    const StageResult teacher = train_stage2(city.checkpoint, cfg, f.manifest, &f.store);
    CHECK(teacher.checkpoint.encoder_hash == city.checkpoint.encoder_hash);
    CHECK(teacher.checkpoint.encoder_params == city.checkpoint.encoder_params);
    CHECK(teacher.checkpoint.frozen_encoder);
    CHECK(teacher.checkpoint.role == Role::teacher);
    CHECK(teacher.checkpoint.labels == f.manifest.scene_vocab);
    CHECK_NOTHROW(teacher.checkpoint.check_invariants());
  }

  SUBCASE("lambda 1 matches the baseline and lambda < 1 does not") {
    const StageResult teacher = train_stage2(city.checkpoint, f.config(2, 1, 4), f.manifest, &f.store);
    const std::vector<Checkpoint> teachers = {teacher.checkpoint};
    StageConfig cfg = f.config(3, 2, 5);
    cfg.kd.lambda = 1.0;
    const StageResult base = train_baseline(cfg, f.manifest, &f.store);
    const StageResult endpoint = train_stage3(cfg, teachers, f.manifest, &f.store);
    CHECK(endpoint.checkpoint.encoder_hash == base.checkpoint.encoder_hash);
    CHECK(endpoint.checkpoint.classifier_hash == base.checkpoint.classifier_hash);
    cfg.kd.lambda = 0.5;
    const StageResult mixed = train_stage3(cfg, teachers, f.manifest, &f.store);
    CHECK(mixed.checkpoint.encoder_hash != base.checkpoint.encoder_hash);
    CHECK(mixed.checkpoint.role == Role::student);
    CHECK(base.checkpoint.role == Role::baseline);
  }

  SUBCASE("ensembles of identical teachers collapse to one") {
    const StageResult teacher = train_stage2(city.checkpoint, f.config(2, 1, 4), f.manifest, &f.store);
    const std::vector<Checkpoint> one = {teacher.checkpoint};
    const std::vector<Checkpoint> two = {teacher.checkpoint, teacher.checkpoint};
    const StageConfig cfg = f.config(3, 1, 6);
    CHECK(train_stage3(cfg, one, f.manifest, &f.store).checkpoint.encoder_hash ==
          train_stage3(cfg, two, f.manifest, &f.store).checkpoint.encoder_hash);
  }

  SUBCASE("teachers must share the scene vocabulary") {
    CHECK_THROWS_AS(load_teachers(std::vector<Checkpoint>{city.checkpoint}, f.manifest.scene_vocab), Error);
  }

  SUBCASE("same seed, same parameters") {
    const StageResult again = train_stage1(f.config(1, 2, 3), f.manifest, &f.store);
    CHECK(again.checkpoint.encoder_hash == city.checkpoint.encoder_hash);
    const StageResult other = train_stage1(f.config(1, 2, 4), f.manifest, &f.store);
    CHECK(other.checkpoint.encoder_hash != city.checkpoint.encoder_hash);
  }
}

TEST_CASE("stage 1 needs more than one city") {
  Fixture f;
  Manifest m = f.manifest;
  const std::string keep = m.city_vocab.front();
  std::erase_if(m.records, [&](const ClipRecord& r) { return r.city_label != keep; });
  m.city_vocab = {keep};
  CHECK_THROWS_AS(train_stage1(f.config(1, 1, 1), m, &f.store), Error);
}

TEST_CASE("run directory contents") {
  Fixture f;
  StageConfig cfg = f.config(1, 2, 7);
  cfg.eval_each_epoch = true;
  cfg.data.val_fraction = 0.25;
  const std::filesystem::path out = f.dir / "run";
  const StageResult r = run_stage(cfg, out);
  for (const char* name : {"config.json", "checkpoint.c2s", "metrics.json", "train_log.csv"}) {
    CHECK(std::filesystem::exists(out / name));
  }
  const auto config = nlohmann::json::parse(slurp(out / "config.json"));
  CHECK(config["seed"] == 7);
  CHECK(config["data"]["val_fraction"] == 0.25);
  const auto metrics = nlohmann::json::parse(slurp(out / "metrics.json"));
  CHECK(metrics["role"] == "city_model");
  CHECK(metrics.contains("overall"));
  REQUIRE(r.val_metrics);

  const std::string log = slurp(out / "train_log.csv");
  CHECK(log.rfind("epoch,lr,loss,L_city,L_city2scene,train_accuracy,val_accuracy,test_accuracy\n", 0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 3);

  const Checkpoint back = load_checkpoint(out / "checkpoint.c2s");
  CHECK(back.encoder_hash == r.checkpoint.encoder_hash);
  CHECK(back.config_snapshot == to_json(cfg));
}
