#include "city2scene/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "city2scene/error.hpp"
#include "city2scene/rng.hpp"

namespace city2scene {

// ---------------------------------------------------------------------------
// Config documents

namespace {

std::string teacher_mode_name(TeacherMode m) { return m == TeacherMode::online ? "online" : "cached"; }

/// Reads known keys from one JSON object, collecting type errors and unknown keys.
class Reader {
 public:
  Reader(const nlohmann::json& obj, std::string prefix, std::vector<std::string>& errors)
      : obj_(obj), prefix_(std::move(prefix)), errors_(errors) {
    if (!obj_.is_object()) errors_.push_back(name("") + ": expected an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    used_.insert(key);
    if (!obj_.is_object() || !obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const std::exception& e) {
      errors_.push_back(name(key) + ": " + e.what());
    }
  }

  template <class T>
  void get_optional(const std::string& key, std::optional<T>& out) {
    used_.insert(key);
    if (!obj_.is_object() || !obj_.contains(key) || obj_.at(key).is_null()) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const std::exception& e) {
      errors_.push_back(name(key) + ": " + e.what());
    }
  }

  bool has(const std::string& key) const { return obj_.is_object() && obj_.contains(key) && !obj_.at(key).is_null(); }

  /// Nested object reader; absent keys yield an empty object.
  Reader sub(const std::string& key) {
    used_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    const nlohmann::json& child = has(key) ? obj_.at(key) : empty;
    return Reader(child, name(key), errors_);
  }

  void finish() {
    if (!obj_.is_object()) return;
    for (const auto& [key, value] : obj_.items()) {
      if (!used_.count(key)) errors_.push_back(name(key) + ": unknown field");
    }
  }

 private:
  std::string name(const std::string& key) const {
    if (prefix_.empty()) return key.empty() ? "<root>" : key;
    return key.empty() ? prefix_ : prefix_ + "." + key;
  }

  const nlohmann::json& obj_;
  std::string prefix_;
  std::vector<std::string>& errors_;
  std::set<std::string> used_;
};

void collect(std::vector<std::string>& errors, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    errors.emplace_back(e.what());
  }
}

[[noreturn]] void throw_config(const std::vector<std::string>& errors) {
  std::string msg = "invalid stage config: ";
  for (std::size_t i = 0; i < errors.size(); ++i) msg += (i ? "; " : "") + errors[i];
  throw ConfigError(msg);
}

}  // namespace

namespace {

std::vector<std::string> validation_errors(const StageConfig& c);

}  // namespace

void StageConfig::validate() const {
  const auto bad = validation_errors(*this);
  if (!bad.empty()) throw_config(bad);
}

namespace {

std::vector<std::string> validation_errors(const StageConfig& c) {
  std::vector<std::string> bad;
  if (c.stage < 1 || c.stage > 3) bad.emplace_back("stage must be 1, 2 or 3");
  if (c.max_epochs < 1) bad.emplace_back("max_epochs must be >= 1");
  if (c.batch_size < 1) bad.emplace_back("batch_size must be >= 1");
  if (c.optimizer.name != "adam" && c.optimizer.name != "adamw") bad.emplace_back("optimizer.name must be adam or adamw");
  if (!(c.optimizer.peak_lr > 0.0)) bad.emplace_back("optimizer.peak_lr must be > 0");
  if (!(c.optimizer.weight_decay >= 0.0)) bad.emplace_back("optimizer.weight_decay must be >= 0");
  if (c.scheduler.peak_lr != c.optimizer.peak_lr) bad.emplace_back("scheduler.peak_lr must equal optimizer.peak_lr");
  if (c.encoder.n_mels != c.preprocessing.n_mels) {
    bad.emplace_back("backbone.encoder.n_mels (" + std::to_string(c.encoder.n_mels) + ") must equal preprocessing.n_mels (" +
                     std::to_string(c.preprocessing.n_mels) + ")");
  }
  if (!(c.data.val_fraction >= 0.0 && c.data.val_fraction < 1.0)) bad.emplace_back("data.val_fraction must be in [0, 1)");
  collect(bad, [&] { c.preprocessing.validate(); });
  collect(bad, [&] { c.scheduler.validate(c.max_epochs); });
  collect(bad, [&] { c.kd.validate(); });
  if (c.augment_enabled && c.augment.diraug_prob > 0.0 && c.augment.ir_bank.empty() && !c.augment.ir_bank_dir) {
    bad.emplace_back("augment.diraug_prob > 0 requires augment.ir_bank_dir");
  }
  for (const char* name : {"mixup_alpha", "fms_alpha"}) {
    const double v = std::string(name) == "mixup_alpha" ? c.augment.mixup_alpha : c.augment.fms_alpha;
    if (!(v >= 0.0)) bad.push_back(std::string("augment.") + name + " must be >= 0");
  }
  for (double p : {c.augment.specaug_ratio, c.augment.specaug_prob, c.augment.fms_prob, c.augment.diraug_prob}) {
    if (!(p >= 0.0 && p <= 1.0)) {
      bad.emplace_back("augment probabilities and ratios must be in [0, 1]");
      break;
    }
  }
  if (c.stage == 2 && !c.city_checkpoint) bad.emplace_back("city_checkpoint is required for stage 2");
  return bad;
}

}  // namespace

nlohmann::json to_json(const StageConfig& c) {
  nlohmann::json j;
  j["stage"] = c.stage;
  j["backbone"] = {{"encoder", c.encoder}};
  j["preprocessing"] = c.preprocessing;
  j["augment"] = c.augment;
  j["augment_enabled"] = c.augment_enabled;
  j["optimizer"] = {{"name", c.optimizer.name}, {"peak_lr", c.optimizer.peak_lr}, {"weight_decay", c.optimizer.weight_decay}};
  j["scheduler"] = c.scheduler;
  j["max_epochs"] = c.max_epochs;
  j["batch_size"] = c.batch_size;
  j["kd"] = {{"temperature", c.kd.temperature}, {"lambda", c.kd.lambda}, {"kl_direction", to_string(c.kd.kl_direction)}};
  j["teacher_mode"] = teacher_mode_name(c.teacher_mode);
  j["teacher_checkpoints"] = nlohmann::json::array();
  for (const auto& p : c.teacher_checkpoints) j["teacher_checkpoints"].push_back(p.string());
  j["city_checkpoint"] = c.city_checkpoint ? nlohmann::json(c.city_checkpoint->string()) : nlohmann::json(nullptr);
  j["seed"] = c.seed;
  j["data"] = {{"dir", c.data.dir.string()}, {"val_fraction", c.data.val_fraction}, {"split_seed", c.data.split_seed}};
  j["eval_each_epoch"] = c.eval_each_epoch;
  j["feature_cache_dir"] = c.feature_cache_dir ? nlohmann::json(c.feature_cache_dir->string()) : nlohmann::json(nullptr);
  return j;
}

StageConfig stage_config_from_json(const nlohmann::json& doc) {
  std::vector<std::string> errors;
  StageConfig c;
  Reader root(doc, "", errors);
  root.get("stage", c.stage);

  {
    Reader backbone = root.sub("backbone");
    Reader enc = backbone.sub("encoder");
    enc.get("kind", c.encoder.kind);
    enc.get("n_mels", c.encoder.n_mels);
    enc.get("widths", c.encoder.widths);
    const bool explicit_mels = enc.has("n_mels");
    enc.finish();
    backbone.finish();

    Reader pre = root.sub("preprocessing");
    std::string preset;
    pre.get("preset", preset);
    if (!preset.empty()) collect(errors, [&] { c.preprocessing = spectrogram_preset(preset); });
    pre.get("sample_rate_hz", c.preprocessing.sample_rate_hz);
    pre.get("window_ms", c.preprocessing.window_ms);
    pre.get("hop_ms", c.preprocessing.hop_ms);
    pre.get("n_mels", c.preprocessing.n_mels);
    pre.get("fmin_hz", c.preprocessing.fmin_hz);
    pre.get("fmax_hz", c.preprocessing.fmax_hz);
    pre.get("log_offset", c.preprocessing.log_offset);
    pre.finish();
    if (!explicit_mels) c.encoder.n_mels = c.preprocessing.n_mels;
  }

  {
    Reader aug = root.sub("augment");
    std::string preset;
    aug.get("preset", preset);
    if (!preset.empty()) collect(errors, [&] { c.augment = augment_preset(preset); });
    aug.get("mixup_alpha", c.augment.mixup_alpha);
    aug.get("specaug_ratio", c.augment.specaug_ratio);
    aug.get("specaug_prob", c.augment.specaug_prob);
    aug.get("fms_alpha", c.augment.fms_alpha);
    aug.get("fms_prob", c.augment.fms_prob);
    aug.get("diraug_prob", c.augment.diraug_prob);
    aug.get("seed", c.augment.seed);
    std::optional<std::string> ir_dir;
    aug.get_optional("ir_bank_dir", ir_dir);
    if (ir_dir) c.augment.ir_bank_dir = *ir_dir;
    aug.finish();
  }
  root.get("augment_enabled", c.augment_enabled);

  {
    Reader opt = root.sub("optimizer");
    opt.get("name", c.optimizer.name);
    opt.get("peak_lr", c.optimizer.peak_lr);
    opt.get("weight_decay", c.optimizer.weight_decay);
    opt.finish();

    Reader sch = root.sub("scheduler");
    std::string kind = to_string(c.scheduler.kind);
    sch.get("kind", kind);
    if (kind == "cosine_warm_restarts") {
      c.scheduler.kind = SchedulerKind::cosine_warm_restarts;
    } else if (kind == "warmup_linear_down") {
      c.scheduler.kind = SchedulerKind::warmup_linear_down;
    } else {
      errors.push_back("scheduler.kind: must be cosine_warm_restarts or warmup_linear_down");
    }
    c.scheduler.peak_lr = c.optimizer.peak_lr;
    sch.get("peak_lr", c.scheduler.peak_lr);
    sch.get("min_lr", c.scheduler.min_lr);
    sch.get("T0", c.scheduler.t0);
    sch.get("T_mult", c.scheduler.t_mult);
    sch.get("warmup_epochs", c.scheduler.warmup_epochs);
    sch.get("down_epochs", c.scheduler.down_epochs);
    sch.finish();
  }
  root.get("max_epochs", c.max_epochs);
  root.get("batch_size", c.batch_size);

  {
    Reader kd = root.sub("kd");
    kd.get("temperature", c.kd.temperature);
    kd.get("lambda", c.kd.lambda);
    std::string dir = to_string(c.kd.kl_direction);
    kd.get("kl_direction", dir);
    collect(errors, [&] { c.kd.kl_direction = kl_direction_from_string(dir); });
    kd.finish();
  }
  {
    std::string mode = teacher_mode_name(c.teacher_mode);
    root.get("teacher_mode", mode);
    if (mode == "online") {
      c.teacher_mode = TeacherMode::online;
    } else if (mode == "cached") {
      c.teacher_mode = TeacherMode::cached;
    } else {
      errors.push_back("teacher_mode: must be online or cached");
    }
  }
  std::vector<std::string> teachers;
  root.get("teacher_checkpoints", teachers);
  c.teacher_checkpoints.assign(teachers.begin(), teachers.end());
  std::optional<std::string> city;
  root.get_optional("city_checkpoint", city);
  if (city) c.city_checkpoint = *city;
  root.get("seed", c.seed);
  {
    Reader data = root.sub("data");
    std::string dir;
    data.get("dir", dir);
    c.data.dir = dir;
    data.get("val_fraction", c.data.val_fraction);
    data.get("split_seed", c.data.split_seed);
    data.finish();
  }
  root.get("eval_each_epoch", c.eval_each_epoch);
  std::optional<std::string> cache;
  root.get_optional("feature_cache_dir", cache);
  if (cache) c.feature_cache_dir = *cache;
  root.finish();

  for (auto& e : validation_errors(c)) errors.push_back(std::move(e));
  if (!errors.empty()) throw_config(errors);
  return c;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = nlohmann::json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

// ---------------------------------------------------------------------------
// Training

Manifest load_stage_manifest(const StageConfig& cfg) {
  if (cfg.data.dir.empty()) throw ConfigError("data.dir is required");
  Manifest m = load_manifest_dir(cfg.data.dir);
  if (cfg.data.val_fraction > 0.0) m = carve_validation(m, cfg.data.val_fraction, cfg.data.split_seed);
  return m;
}

std::vector<Model> load_teachers(std::span<const Checkpoint> teachers, const std::vector<std::string>& scene_vocab) {
  std::vector<Model> models;
  for (const auto& t : teachers) {
    if (t.role != Role::teacher || !t.frozen_encoder) throw Error("teacher checkpoint must have role teacher and a frozen encoder");
    if (t.label_kind != LabelKind::scene || t.labels != scene_vocab) {
      throw Error("teacher scene vocabulary does not match the manifest scene vocabulary");
    }
    models.push_back(Model::from_checkpoint(t));
  }
  return models;
}

Logits teacher_logits(std::span<Model> teachers, const Tensor& batch) {
  if (teachers.empty()) throw Error("teacher_logits: no teachers");
  std::vector<Logits> per_teacher;
  per_teacher.reserve(teachers.size());
  for (auto& t : teachers) {
    const Tensor z = t.forward(batch, false);
    Logits l(static_cast<std::size_t>(z.n), static_cast<std::size_t>(z.c), LogitKind::city_to_scene);
    for (std::size_t i = 0; i < z.size(); ++i) l.values[i] = z.data[i];
    per_teacher.push_back(std::move(l));
  }
  return ensemble_logits(per_teacher);
}

namespace {

std::size_t target_of(const Manifest& m, const ClipRecord& rec, LabelKind kind) {
  return kind == LabelKind::city ? m.city_index(rec) : m.scene_index(rec);
}

Logits to_logits(const Tensor& z, LogitKind kind) {
  Logits l(static_cast<std::size_t>(z.n), static_cast<std::size_t>(z.c), kind);
  for (std::size_t i = 0; i < z.size(); ++i) l.values[i] = z.data[i];
  return l;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct LoopInputs {
  const StageConfig& cfg;
  const Manifest& manifest;
  FeatureStore& store;
  Model& model;
  LabelKind target;
  std::vector<Model>* teachers = nullptr;
};

std::vector<EpochLog> train_loop(const LoopInputs& in) {
  const StageConfig& cfg = in.cfg;
  const auto train_idx = in.manifest.indices(Split::train);
  if (train_idx.empty()) throw Error("training split is empty");
  const bool has_val = !in.manifest.indices(Split::val).empty();
  const bool has_test = !in.manifest.indices(Split::test).empty();
  const std::size_t n_classes = in.target == LabelKind::city ? in.manifest.city_vocab.size() : in.manifest.scene_vocab.size();

  AugmentConfig aug = cfg.augment;
  if (!cfg.augment_enabled) aug = augment_preset("none");
  if (aug.diraug_prob > 0.0 && aug.ir_bank.empty() && aug.ir_bank_dir) {
    aug.ir_bank = load_ir_bank(*aug.ir_bank_dir, cfg.preprocessing.sample_rate_hz);
  }
  aug.validate();

  nn::AdamOptions adam_opts;
  adam_opts.weight_decay = cfg.optimizer.weight_decay;
  adam_opts.decoupled = cfg.optimizer.name == "adamw";
  nn::Adam optimizer(in.model.trainable_parameters(), adam_opts);

  Rng order_rng = make_rng(cfg.seed, kStreamOrder);
  Rng aug_rng = make_rng(cfg.seed ^ aug.seed, kStreamAugment);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const bool use_kd = in.teachers && !in.teachers->empty();
  const bool cached_teacher = use_kd && cfg.teacher_mode == TeacherMode::cached;
  std::map<std::size_t, std::vector<double>> cached_logits;
  if (cached_teacher) {
    for (std::size_t start = 0; start < train_idx.size(); start += 64) {
      const std::size_t end = std::min(train_idx.size(), start + 64);
      std::vector<const Spectrogram*> specs;
      for (std::size_t i = start; i < end; ++i) specs.push_back(&in.store.get(in.manifest.records[train_idx[i]]));
      const Logits z = teacher_logits(*in.teachers, stack_spectrograms(specs));
      for (std::size_t i = start; i < end; ++i) {
        const auto row = z.row_span(i - start);
        cached_logits[train_idx[i]] = std::vector<double>(row.begin(), row.end());
      }
    }
  }

  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (train_idx.size() + batch - 1) / batch;
  std::vector<EpochLog> log;
  std::vector<std::size_t> order = train_idx;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    EpochLog row;
    row.epoch = epoch;
    row.lr = learning_rate(epoch, cfg.scheduler);
    double loss_sum = 0.0, label_sum = 0.0, kd_sum = 0.0;
    std::size_t correct = 0, seen = 0;

    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      const std::size_t begin = step * batch;
      const std::size_t end = std::min(order.size(), begin + batch);
      const std::size_t n = end - begin;

      std::vector<Spectrogram> augmented;
      augmented.reserve(n);
      std::vector<const Spectrogram*> specs;
      Batch b;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& rec = in.manifest.records[order[i]];
        const Spectrogram* spec = &in.store.get(rec);
        if (aug.diraug_prob > 0.0 && unit(aug_rng) < aug.diraug_prob) {
          std::uniform_int_distribution<std::size_t> pick(0, aug.ir_bank.size() - 1);
          const auto wave = convolve_renormalized(in.store.waveform(rec), aug.ir_bank[pick(aug_rng)]);
          augmented.push_back(mel_spectrogram(wave, cfg.preprocessing, rec.clip_id));
          spec = &augmented.back();
        }
        specs.push_back(spec);
        b.labels.push_back(SoftLabel::one_hot(target_of(in.manifest, rec, in.target), n_classes));
      }
      b.x = stack_spectrograms(specs);

      std::vector<std::size_t> perm;
      std::vector<double> gammas;
      if (aug.mixup_alpha > 0.0 && n >= 2) {
        perm = random_permutation(n, aug_rng);
        gammas.resize(n);
        for (auto& g : gammas) g = sample_beta(aug_rng, aug.mixup_alpha, aug.mixup_alpha);
        b = mixup_with(b, perm, gammas);
      }
      b = freq_mixstyle(b, aug.fms_alpha, aug.fms_prob, aug_rng);
      b = spec_augment(b, aug.specaug_ratio, aug.specaug_prob, aug_rng);

      const Tensor z = in.model.forward(b.x, true);
      const Logits student = to_logits(z, in.target == LabelKind::city ? LogitKind::city : LogitKind::scene);
      LossValue label_loss = cross_entropy(student, b.labels);
      LossValue total = label_loss;
      if (use_kd) {
        Logits teacher;
        if (cached_teacher) {
          teacher = Logits(n, n_classes, LogitKind::ensemble);
          for (std::size_t i = 0; i < n; ++i) {
            const auto& zi = cached_logits.at(order[begin + i]);
            auto dst = teacher.row_span(i);
            if (perm.empty()) {
              std::copy(zi.begin(), zi.end(), dst.begin());
            } else {
              const auto& zj = cached_logits.at(order[begin + perm[i]]);
              for (std::size_t k = 0; k < n_classes; ++k) dst[k] = gammas[i] * zi[k] + (1.0 - gammas[i]) * zj[k];
            }
          }
        } else {
          teacher = teacher_logits(*in.teachers, b.x);
        }
        const LossValue kd = kd_loss(student, teacher, cfg.kd.temperature, cfg.kd.kl_direction);
        total = combined_loss(label_loss, kd, cfg.kd.lambda);
        kd_sum += kd.value * static_cast<double>(n);
      }
      loss_sum += total.value * static_cast<double>(n);
      label_sum += label_loss.value * static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        correct += argmax(student.row_span(i)) == argmax(b.labels[i].distribution);
      }
      seen += n;

      Tensor dz = Tensor::matrix(z.n, z.c);
      for (std::size_t i = 0; i < dz.size(); ++i) dz.data[i] = static_cast<float>(total.grad.values[i]);
      optimizer.zero_grad();
      in.model.backward(dz);
      const double progress = epoch + static_cast<double>(step) / static_cast<double>(steps_per_epoch);
      optimizer.step(learning_rate(progress, cfg.scheduler));
    }

    row.loss = loss_sum / static_cast<double>(seen);
    row.loss_label = label_sum / static_cast<double>(seen);
    row.loss_city2scene = kd_sum / static_cast<double>(seen);
    row.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    const bool last = epoch + 1 == cfg.max_epochs;
    if (cfg.eval_each_epoch || last) {
      if (has_val) row.val_accuracy = evaluate(in.model, in.target, in.manifest, Split::val, in.store).overall_accuracy;
      if (has_test) row.test_accuracy = evaluate(in.model, in.target, in.manifest, Split::test, in.store).overall_accuracy;
    }
    log.push_back(row);
  }
  return log;
}

void finish_result(StageResult& r, Model& model, LabelKind kind, const StageConfig& cfg, const Manifest& m,
                   FeatureStore& store) {
  r.checkpoint.scene_vocab = m.scene_vocab;
  r.checkpoint.city_vocab = m.city_vocab;
  r.checkpoint.config_snapshot = to_json(cfg);
  nlohmann::json metrics;
  metrics["train_accuracy"] = r.log.empty() ? 0.0 : r.log.back().train_accuracy;
  if (!m.indices(Split::test).empty()) {
    r.test_metrics = evaluate(model, kind, m, Split::test, store);
    metrics["test"] = to_json(*r.test_metrics);
  }
  if (!m.indices(Split::val).empty()) {
    r.val_metrics = evaluate(model, kind, m, Split::val, store);
    metrics["val"] = to_json(*r.val_metrics);
  }
  r.checkpoint.metrics = metrics;
}

FeatureStore& ensure_store(FeatureStore*& features, std::optional<FeatureStore>& local, const StageConfig& cfg) {
  if (!features || !(features->config() == cfg.preprocessing)) {
    local.emplace(cfg.preprocessing, cfg.feature_cache_dir);
    features = &*local;
  }
  return *features;
}

StageResult train_scene_model(const StageConfig& cfg, std::span<const Checkpoint> teachers, const Manifest& manifest,
                              FeatureStore* features, Role role) {
  if (manifest.scene_vocab.size() < 2) throw Error("scene classification needs at least two scene classes");
  std::optional<FeatureStore> local;
  FeatureStore& store = ensure_store(features, local, cfg);
  std::vector<Model> teacher_models = load_teachers(teachers, manifest.scene_vocab);

  Model student(cfg.encoder, static_cast<int>(manifest.scene_vocab.size()), cfg.seed);
  StageResult r;
  r.log = train_loop({cfg, manifest, store, student, LabelKind::scene, teacher_models.empty() ? nullptr : &teacher_models});
  r.checkpoint = Checkpoint::capture(student, role, LabelKind::scene, manifest.scene_vocab);
  finish_result(r, student, LabelKind::scene, cfg, manifest, store);
  if (role == Role::student) {
    r.checkpoint.metrics["lambda"] = cfg.kd.lambda;
    r.checkpoint.metrics["temperature"] = cfg.kd.temperature;
    r.checkpoint.metrics["n_teachers"] = teachers.size();
  }
  return r;
}

}  // namespace

StageResult train_stage1(const StageConfig& cfg, const Manifest& manifest, FeatureStore* features) {
  if (manifest.city_vocab.size() < 2) {
    throw Error("stage 1 needs at least two cities; a single-city manifest is a degenerate task");
  }
  std::optional<FeatureStore> local;
  FeatureStore& store = ensure_store(features, local, cfg);
  Model model(cfg.encoder, static_cast<int>(manifest.city_vocab.size()), cfg.seed);
  StageResult r;
  r.log = train_loop({cfg, manifest, store, model, LabelKind::city});
  r.checkpoint = Checkpoint::capture(model, Role::city_model, LabelKind::city, manifest.city_vocab);
  finish_result(r, model, LabelKind::city, cfg, manifest, store);
  return r;
}

StageResult train_stage2(const Checkpoint& city_model, const StageConfig& cfg, const Manifest& manifest,
                         FeatureStore* features) {
  if (city_model.label_kind != LabelKind::city) throw Error("stage 2 expects a city model checkpoint");
  if (city_model.encoder_spec != cfg.encoder) {
    throw Error("stage 2 backbone differs from the city model's backbone; stages must share one configuration");
  }
  if (manifest.scene_vocab.size() < 2) throw Error("scene classification needs at least two scene classes");
  std::optional<FeatureStore> local;
  FeatureStore& store = ensure_store(features, local, cfg);

  Model model = Model::from_checkpoint(freeze_encoder(city_model));
  model.reset_classifier(static_cast<int>(manifest.scene_vocab.size()), cfg.seed);
  const std::string hash_before = blob_hash(model.encoder_blob());

  StageResult r;
  r.log = train_loop({cfg, manifest, store, model, LabelKind::scene});
  const std::string hash_after = blob_hash(model.encoder_blob());
  if (hash_before != hash_after) {
    throw Error("internal assertion failed: frozen encoder changed during stage 2 (" + hash_before + " -> " +
                hash_after + ")");
  }
  r.checkpoint = Checkpoint::capture(model, Role::teacher, LabelKind::scene, manifest.scene_vocab);
  finish_result(r, model, LabelKind::scene, cfg, manifest, store);
  r.checkpoint.metrics["encoder_hash_before"] = hash_before;
  r.checkpoint.metrics["encoder_hash_after"] = hash_after;
  return r;
}

StageResult train_stage3(const StageConfig& cfg, std::span<const Checkpoint> teachers, const Manifest& manifest,
                         FeatureStore* features) {
  if (teachers.empty()) {
    throw Error("stage 3 needs at least one teacher checkpoint; run stage2 to produce one");
  }
  return train_scene_model(cfg, teachers, manifest, features, Role::student);
}

StageResult train_baseline(const StageConfig& cfg, const Manifest& manifest, FeatureStore* features) {
  return train_scene_model(cfg, {}, manifest, features, Role::baseline);
}

void write_run_dir(const std::filesystem::path& dir, const StageConfig& cfg, const StageResult& result) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  {
    std::ofstream out(dir / "config.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "config.json").string());
    out << to_json(cfg).dump(2) << '\n';
  }
  save_checkpoint(result.checkpoint, dir / "checkpoint.c2s");
  {
    nlohmann::json metrics = result.test_metrics ? to_json(*result.test_metrics) : nlohmann::json::object();
    metrics["role"] = to_string(result.checkpoint.role);
    metrics["summary"] = result.checkpoint.metrics;
    std::ofstream out(dir / "metrics.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "metrics.json").string());
    out << metrics.dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "train_log.csv", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "train_log.csv").string());
    const bool city = result.checkpoint.label_kind == LabelKind::city && result.checkpoint.role == Role::city_model;
    out << "epoch,lr,loss," << (city ? "L_city" : "L_scene") << ",L_city2scene,train_accuracy,val_accuracy,test_accuracy\n";
    char buf[256];
    for (const auto& r : result.log) {
      std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.6f,%s,%s\n", r.epoch, r.lr, r.loss, r.loss_label,
                    r.loss_city2scene, r.train_accuracy,
                    r.val_accuracy < 0 ? "" : std::to_string(r.val_accuracy).c_str(),
                    r.test_accuracy < 0 ? "" : std::to_string(r.test_accuracy).c_str());
      out << buf;
    }
  }
}

StageResult run_stage(const StageConfig& cfg, const std::filesystem::path& dir, bool baseline) {
  cfg.validate();
  const Manifest manifest = load_stage_manifest(cfg);
  StageResult result;
  switch (cfg.stage) {
    case 1: result = train_stage1(cfg, manifest); break;
    case 2: result = train_stage2(load_checkpoint(*cfg.city_checkpoint), cfg, manifest); break;
    default: {
      std::vector<Checkpoint> teachers;
      for (const auto& p : cfg.teacher_checkpoints) teachers.push_back(load_checkpoint(p));
      result = baseline && teachers.empty() ? train_baseline(cfg, manifest) : train_stage3(cfg, teachers, manifest);
    }
  }
  write_run_dir(dir, cfg, result);
  return result;
}

}  // namespace city2scene
