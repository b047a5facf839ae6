#include "city2scene/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "city2scene/error.hpp"

namespace city2scene {

nlohmann::json to_json(const Metrics& m) {
  return nlohmann::json{{"overall", m.overall_accuracy},
                        {"class_mean", m.class_mean_accuracy},
                        {"labels", m.labels},
                        {"per_class", m.per_class_accuracy},
                        {"per_city", m.per_city_accuracy},
                        {"confusion", m.confusion},
                        {"n_eval", m.n_eval}};
}

Metrics metrics_from_json(const nlohmann::json& j) {
  Metrics m;
  m.overall_accuracy = j.at("overall").get<double>();
  m.class_mean_accuracy = j.value("class_mean", 0.0);
  m.labels = j.value("labels", std::vector<std::string>{});
  m.per_class_accuracy = j.at("per_class").get<std::map<std::string, double>>();
  m.per_city_accuracy = j.value("per_city", std::map<std::string, double>{});
  m.confusion = j.at("confusion").get<std::vector<std::vector<long>>>();
  m.n_eval = j.at("n_eval").get<std::size_t>();
  return m;
}

Metrics compute_metrics(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                        std::span<const std::string> item_cities, const std::vector<std::string>& labels) {
  if (truth.size() != predicted.size() || (!item_cities.empty() && item_cities.size() != truth.size())) {
    throw ShapeError("compute_metrics: input length mismatch");
  }
  if (truth.empty()) throw Error("compute_metrics: nothing to evaluate");
  const std::size_t k = labels.size();
  Metrics m;
  m.labels = labels;
  m.n_eval = truth.size();
  m.confusion.assign(k, std::vector<long>(k, 0));
  std::map<std::string, std::pair<long, long>> city_hits;
  long correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= k || predicted[i] >= k) throw Error("compute_metrics: label index out of range");
    ++m.confusion[truth[i]][predicted[i]];
    const bool hit = truth[i] == predicted[i];
    correct += hit;
    if (!item_cities.empty()) {
      auto& [h, n] = city_hits[item_cities[i]];
      h += hit;
      ++n;
    }
  }
  m.overall_accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  double class_sum = 0.0;
  int classes_seen = 0;
  for (std::size_t c = 0; c < k; ++c) {
    long row = 0;
    for (long v : m.confusion[c]) row += v;
    if (row == 0) continue;
    const double acc = static_cast<double>(m.confusion[c][c]) / static_cast<double>(row);
    m.per_class_accuracy[labels[c]] = acc;
    class_sum += acc;
    ++classes_seen;
  }
  m.class_mean_accuracy = classes_seen ? class_sum / classes_seen : 0.0;
  for (const auto& [city, hn] : city_hits) {
    m.per_city_accuracy[city] = static_cast<double>(hn.first) / static_cast<double>(hn.second);
  }
  return m;
}

FeatureStore::FeatureStore(SpectrogramConfig cfg, std::optional<std::filesystem::path> cache_dir)
    : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (cache_dir) cache_.emplace(*cache_dir);
}

const std::vector<float>& FeatureStore::waveform(const ClipRecord& rec) {
  auto it = waveforms_.find(rec.clip_id);
  if (it != waveforms_.end()) return it->second;
  return waveforms_.emplace(rec.clip_id, load_audio(rec.path, cfg_.sample_rate_hz).samples).first->second;
}

const Spectrogram& FeatureStore::get(const ClipRecord& rec) {
  auto it = features_.find(rec.clip_id);
  if (it != features_.end()) return it->second;
  if (cache_) {
    if (auto cached = cache_->get(rec.clip_id, cfg_)) return features_.emplace(rec.clip_id, std::move(*cached)).first->second;
  }
  const Waveform wave = load_audio(rec.path, cfg_.sample_rate_hz);
  Spectrogram spec = mel_spectrogram(wave.samples, cfg_, rec.clip_id);
  if (cache_) cache_->put(spec);
  return features_.emplace(rec.clip_id, std::move(spec)).first->second;
}

Tensor stack_spectrograms(std::span<const Spectrogram* const> specs) {
  if (specs.empty()) return {};
  const int f = specs.front()->n_mels;
  int t = specs.front()->n_frames;
  for (const auto* s : specs) {
    if (s->n_mels != f) throw ShapeError("stack_spectrograms: mixed frequency sizes");
    t = std::min(t, s->n_frames);
  }
  Tensor x(static_cast<int>(specs.size()), 1, f, t);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    for (int m = 0; m < f; ++m) {
      const float* src = specs[i]->values.data() + static_cast<std::size_t>(m) * specs[i]->n_frames;
      std::copy(src, src + t, &x.at(static_cast<int>(i), 0, m, 0));
    }
  }
  return x;
}

namespace {

std::size_t argmax(const float* row, int k) {
  return static_cast<std::size_t>(std::max_element(row, row + k) - row);
}

std::size_t label_of(const Manifest& m, const ClipRecord& rec, LabelKind kind) {
  return kind == LabelKind::city ? m.city_index(rec) : m.scene_index(rec);
}

SpectrogramConfig snapshot_preprocessing(const Checkpoint& ckpt) {
  if (!ckpt.config_snapshot.contains("preprocessing")) {
    throw Error("checkpoint has no preprocessing config in its snapshot");
  }
  return ckpt.config_snapshot.at("preprocessing").get<SpectrogramConfig>();
}

void check_vocab(const Checkpoint& ckpt, const Manifest& manifest) {
  const auto& expected = ckpt.label_kind == LabelKind::city ? manifest.city_vocab : manifest.scene_vocab;
  if (ckpt.labels != expected) {
    throw Error("checkpoint " + to_string(ckpt.label_kind) + " vocabulary does not match the manifest");
  }
}

}  // namespace

Metrics evaluate(Model& model, LabelKind kind, const Manifest& manifest, Split split, FeatureStore& features,
                 int batch_size) {
  const auto idx = manifest.indices(split);
  if (idx.empty()) throw Error("evaluate: split '" + to_string(split) + "' is empty");
  std::vector<std::size_t> truth, pred;
  std::vector<std::string> cities;
  const auto& labels = kind == LabelKind::city ? manifest.city_vocab : manifest.scene_vocab;
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const Spectrogram*> specs;
    for (std::size_t i = start; i < end; ++i) {
      const auto& rec = manifest.records[idx[i]];
      specs.push_back(&features.get(rec));
      truth.push_back(label_of(manifest, rec, kind));
      cities.push_back(rec.city_label);
    }
    const Tensor logits = model.forward(stack_spectrograms(specs), false);
    for (int b = 0; b < logits.n; ++b) pred.push_back(argmax(logits.data.data() + static_cast<std::size_t>(b) * logits.c, logits.c));
  }
  return compute_metrics(truth, pred, cities, labels);
}

Metrics evaluate(const Checkpoint& ckpt, const Manifest& manifest, Split split, FeatureStore* features) {
  check_vocab(ckpt, manifest);
  const SpectrogramConfig cfg = snapshot_preprocessing(ckpt);
  std::optional<FeatureStore> local;
  if (!features || !(features->config() == cfg)) {
    local.emplace(cfg);
    features = &*local;
  }
  Model model = Model::from_checkpoint(ckpt);
  return evaluate(model, ckpt.label_kind, manifest, split, *features);
}

double round_pct(double pct) {
  return std::round(pct * 10.0 + std::copysign(1e-6, pct)) / 10.0;
}

namespace {

ClasswiseRow make_row(std::string label, double base, double treated) {
  ClasswiseRow r;
  r.label = std::move(label);
  r.baseline_pct = round_pct(100.0 * base);
  r.treated_pct = round_pct(100.0 * treated);
  r.diff_pct = round_pct(r.treated_pct - r.baseline_pct);
  return r;
}

std::string fmt1(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

std::string fmt_signed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.1f", v == 0.0 ? 0.0 : v);
  return buf;
}

}  // namespace

ClasswiseReport classwise_report(const Metrics& baseline, const Metrics& treated) {
  if (baseline.labels != treated.labels) throw Error("classwise_report: scene vocabularies differ");
  ClasswiseReport report;
  for (const auto& label : baseline.labels) {
    const auto b = baseline.per_class_accuracy.find(label);
    const auto t = treated.per_class_accuracy.find(label);
    if (b == baseline.per_class_accuracy.end() || t == treated.per_class_accuracy.end()) continue;
    report.rows.push_back(make_row(label, b->second, t->second));
  }
  report.average = make_row("Average", baseline.overall_accuracy, treated.overall_accuracy);
  report.class_mean = make_row("Class mean", baseline.class_mean_accuracy, treated.class_mean_accuracy);
  return report;
}

std::string ClasswiseReport::render_text() const {
  std::size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.label.size());
  width = std::max(width, class_mean.label.size());
  std::ostringstream out;
  auto line = [&](const std::string& a, const std::string& b, const std::string& c, const std::string& d) {
    out << a << std::string(width - a.size() + 2, ' ');
    out << std::string(8 - std::min<std::size_t>(8, b.size()), ' ') << b;
    out << std::string(10 - std::min<std::size_t>(10, c.size()), ' ') << c;
    out << std::string(8 - std::min<std::size_t>(8, d.size()), ' ') << d << '\n';
  };
  line("Class", "Base", "Treated", "Diff");
  for (const auto& r : rows) line(r.label, fmt1(r.baseline_pct), fmt1(r.treated_pct), fmt_signed(r.diff_pct));
  line(average.label, fmt1(average.baseline_pct), fmt1(average.treated_pct), fmt_signed(average.diff_pct));
  line(class_mean.label, fmt1(class_mean.baseline_pct), fmt1(class_mean.treated_pct), fmt_signed(class_mean.diff_pct));
  return out.str();
}

std::string ClasswiseReport::render_csv() const {
  std::ostringstream out;
  out << "class,baseline,treated,diff\n";
  auto row = [&](const ClasswiseRow& r) {
    out << r.label << ',' << fmt1(r.baseline_pct) << ',' << fmt1(r.treated_pct) << ',' << fmt_signed(r.diff_pct) << '\n';
  };
  for (const auto& r : rows) row(r);
  row(average);
  row(class_mean);
  return out.str();
}

void export_embeddings(const Checkpoint& ckpt, const Manifest& manifest, const std::filesystem::path& out_path,
                       FeatureStore* features) {
  if (!ckpt.frozen_encoder) throw Error("export_embeddings: checkpoint encoder is not frozen (expected a teacher)");
  const SpectrogramConfig cfg = snapshot_preprocessing(ckpt);
  std::optional<FeatureStore> local;
  if (!features || !(features->config() == cfg)) {
    local.emplace(cfg);
    features = &*local;
  }
  Model model = Model::from_checkpoint(ckpt);
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + out_path.string());
  const int d = ckpt.encoder_spec.embedding_dim();
  out << "clip_id,city_label,scene_label";
  for (int e = 0; e < d; ++e) out << ",e" << e;
  out << '\n';
  constexpr std::size_t kBatch = 64;
  char buf[32];
  for (std::size_t start = 0; start < manifest.records.size(); start += kBatch) {
    const std::size_t end = std::min(manifest.records.size(), start + kBatch);
    std::vector<const Spectrogram*> specs;
    for (std::size_t i = start; i < end; ++i) specs.push_back(&features->get(manifest.records[i]));
    const Tensor emb = model.encode(stack_spectrograms(specs), false);
    for (std::size_t i = start; i < end; ++i) {
      const auto& rec = manifest.records[i];
      out << rec.clip_id << ',' << rec.city_label << ',' << rec.scene_label;
      const float* row = emb.data.data() + (i - start) * static_cast<std::size_t>(d);
      for (int e = 0; e < d; ++e) {
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(row[e]));
        out << ',' << buf;
      }
      out << '\n';
    }
  }
  if (!out) throw IoError("short write to " + out_path.string());
}

}  // namespace city2scene
