#include "city2scene/models.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <mutex>

#include "city2scene/error.hpp"
#include "city2scene/hash.hpp"

namespace city2scene {

void to_json(nlohmann::json& j, const EncoderSpec& s) {
  j = nlohmann::json{{"kind", s.kind}, {"n_mels", s.n_mels}, {"widths", s.widths}};
}

void from_json(const nlohmann::json& j, EncoderSpec& s) {
  EncoderSpec d;
  s.kind = j.value("kind", d.kind);
  s.n_mels = j.value("n_mels", d.n_mels);
  s.widths = j.value("widths", d.widths);
}

void to_json(nlohmann::json& j, const ClassifierSpec& s) {
  j = nlohmann::json{{"in_dim", s.in_dim}, {"n_classes", s.n_classes}};
}

void from_json(const nlohmann::json& j, ClassifierSpec& s) {
  s.in_dim = j.at("in_dim").get<int>();
  s.n_classes = j.at("n_classes").get<int>();
}

ReferenceCnn::ReferenceCnn(const EncoderSpec& spec, Rng& rng) : spec_(spec) {
  if (spec.widths.empty()) throw ConfigError("reference_cnn needs at least one width");
  if (spec.n_mels < 8) throw ConfigError("reference_cnn needs n_mels >= 8");
  auto stem = std::make_unique<nn::Conv2d>("stem.conv", 1, spec.widths.front(), 3, rng);
  stem->set_need_input_grad(false);
  body_.add(std::move(stem));
  body_.add(std::make_unique<nn::BatchNorm2d>("stem.bn", spec.widths.front()));
  body_.add(std::make_unique<nn::ReLU>());
  body_.add(std::make_unique<nn::AvgPool2>());
  int in = spec.widths.front();
  for (std::size_t b = 0; b < spec.widths.size(); ++b) {
    body_.add(std::make_unique<nn::ResidualBlock>("block" + std::to_string(b + 1), in, spec.widths[b], rng));
    if (b + 1 < spec.widths.size()) body_.add(std::make_unique<nn::AvgPool2>());
    in = spec.widths[b];
  }
  body_.add(std::make_unique<nn::GlobalAvgPool>());
}

Tensor ReferenceCnn::encode(const Tensor& x, bool training) {
  if (x.c != 1 || x.h != spec_.n_mels) {
    throw ShapeError("encoder expects (n, 1, " + std::to_string(spec_.n_mels) + ", T) input, got " + x.shape_string());
  }
  return body_.forward(x, training);
}

Tensor ReferenceCnn::backward(const Tensor& d_embedding) { return body_.backward(d_embedding); }

namespace {

std::map<std::string, EncoderFactory>& registry() {
  static std::map<std::string, EncoderFactory> r = {
      {"reference_cnn", [](const EncoderSpec& s, Rng& rng) { return std::make_unique<ReferenceCnn>(s, rng); }}};
  return r;
}

std::mutex& registry_mutex() {
  static std::mutex mu;
  return mu;
}

}  // namespace

void register_encoder(const std::string& kind, EncoderFactory factory) {
  std::lock_guard lock(registry_mutex());
  registry()[kind] = std::move(factory);
}

std::unique_ptr<Encoder> make_encoder(const EncoderSpec& spec, Rng& rng) {
  EncoderFactory factory;
  {
    std::lock_guard lock(registry_mutex());
    const auto it = registry().find(spec.kind);
    if (it == registry().end()) throw ConfigError("unknown encoder kind '" + spec.kind + "'");
    factory = it->second;
  }
  return factory(spec, rng);
}

std::string to_string(Role role) {
  switch (role) {
    case Role::city_model: return "city_model";
    case Role::teacher: return "teacher";
    case Role::student: return "student";
    case Role::baseline: return "baseline";
  }
  return "?";
}

Role role_from_string(const std::string& s) {
  if (s == "city_model") return Role::city_model;
  if (s == "teacher") return Role::teacher;
  if (s == "student") return Role::student;
  if (s == "baseline") return Role::baseline;
  throw ParseError("unknown checkpoint role '" + s + "'");
}

std::string to_string(LabelKind kind) { return kind == LabelKind::city ? "city" : "scene"; }

LabelKind label_kind_from_string(const std::string& s) {
  if (s == "city") return LabelKind::city;
  if (s == "scene") return LabelKind::scene;
  throw ParseError("unknown label kind '" + s + "'");
}

namespace {
constexpr std::uint64_t kClassifierStream = 101;
}

Model::Model(const EncoderSpec& encoder_spec, int n_classes, std::uint64_t seed) : encoder_spec_(encoder_spec) {
  Rng rng = make_rng(seed, kStreamInit);
  encoder_ = make_encoder(encoder_spec, rng);
  reset_classifier(n_classes, seed);
}

void Model::reset_classifier(int n_classes, std::uint64_t seed) {
  if (n_classes < 1) throw ConfigError("classifier needs at least one class");
  Rng rng = make_rng(seed, kClassifierStream);
  classifier_ = std::make_unique<nn::Linear>("classifier", encoder_->embedding_dim(), n_classes, rng);
}

Model Model::from_checkpoint(const Checkpoint& ckpt) {
  ckpt.check_invariants();
  Model m(ckpt.encoder_spec, ckpt.classifier_spec.n_classes, 0);
  m.load_encoder_blob(ckpt.encoder_params);
  m.load_classifier_blob(ckpt.classifier_params);
  if (ckpt.frozen_encoder) m.freeze_encoder();
  return m;
}

Tensor Model::encode(const Tensor& x, bool training) {
  const bool enc_train = training && !frozen_encoder_;
  encoder_ran_training_ = enc_train;
  Tensor e = encoder_->encode(x, enc_train);
  e.c = static_cast<int>(e.item_size());
  e.h = e.w = 1;
  return e;
}

Tensor Model::classify(const Tensor& embeddings, bool training) {
  if (static_cast<int>(embeddings.item_size()) != classifier_->in_features()) {
    throw ShapeError("classifier expects " + std::to_string(classifier_->in_features()) + "-dim embeddings, got " +
                     std::to_string(embeddings.item_size()));
  }
  return classifier_->forward(embeddings, training);
}

Tensor Model::forward(const Tensor& x, bool training) { return classify(encode(x, training), training); }

void Model::backward(const Tensor& dlogits) {
  Tensor d_embed = classifier_->backward(dlogits);
  if (frozen_encoder_ || !encoder_ran_training_) return;
  d_embed.c = encoder_->embedding_dim();
  encoder_->backward(d_embed);
}

std::vector<nn::Parameter*> Model::trainable_parameters() {
  std::vector<nn::Parameter*> params;
  if (!frozen_encoder_) encoder_->parameters(params);
  classifier_->parameters(params);
  return params;
}

std::vector<float> Model::encoder_blob() {
  std::vector<nn::Parameter*> params;
  std::vector<nn::Buffer> bufs;
  encoder_->parameters(params);
  encoder_->buffers(bufs);
  std::vector<float> blob;
  for (auto* p : params) blob.insert(blob.end(), p->value.begin(), p->value.end());
  for (auto& b : bufs) blob.insert(blob.end(), b.value->begin(), b.value->end());
  return blob;
}

std::vector<float> Model::classifier_blob() {
  std::vector<float> blob = classifier_->weight().value;
  blob.insert(blob.end(), classifier_->bias().value.begin(), classifier_->bias().value.end());
  return blob;
}

void Model::load_encoder_blob(const std::vector<float>& blob) {
  std::vector<nn::Parameter*> params;
  std::vector<nn::Buffer> bufs;
  encoder_->parameters(params);
  encoder_->buffers(bufs);
  std::size_t need = 0;
  for (auto* p : params) need += p->value.size();
  for (auto& b : bufs) need += b.value->size();
  if (need != blob.size()) {
    throw ShapeError("encoder blob has " + std::to_string(blob.size()) + " values, architecture needs " +
                     std::to_string(need));
  }
  auto it = blob.begin();
  for (auto* p : params) {
    std::copy(it, it + static_cast<std::ptrdiff_t>(p->value.size()), p->value.begin());
    it += static_cast<std::ptrdiff_t>(p->value.size());
  }
  for (auto& b : bufs) {
    std::copy(it, it + static_cast<std::ptrdiff_t>(b.value->size()), b.value->begin());
    it += static_cast<std::ptrdiff_t>(b.value->size());
  }
}

void Model::load_classifier_blob(const std::vector<float>& blob) {
  auto& w = classifier_->weight().value;
  auto& b = classifier_->bias().value;
  if (blob.size() != w.size() + b.size()) throw ShapeError("classifier blob size mismatch");
  std::copy(blob.begin(), blob.begin() + static_cast<std::ptrdiff_t>(w.size()), w.begin());
  std::copy(blob.begin() + static_cast<std::ptrdiff_t>(w.size()), blob.end(), b.begin());
}

ClassifierSpec Model::classifier_spec() const {
  return {classifier_->in_features(), classifier_->out_features()};
}

std::size_t Model::parameter_count() {
  std::vector<nn::Parameter*> params;
  encoder_->parameters(params);
  classifier_->parameters(params);
  return nn::parameter_count(params);
}

std::string blob_hash(const std::vector<float>& blob) {
  Fnv1a h;
  h.update(std::span<const float>(blob));
  return h.hex();
}

Checkpoint Checkpoint::capture(Model& model, Role role, LabelKind kind, std::vector<std::string> labels) {
  Checkpoint c;
  c.encoder_spec = model.encoder_spec();
  c.classifier_spec = model.classifier_spec();
  c.encoder_params = model.encoder_blob();
  c.encoder_hash = blob_hash(c.encoder_params);
  c.classifier_params = model.classifier_blob();
  c.classifier_hash = blob_hash(c.classifier_params);
  c.role = role;
  c.frozen_encoder = model.frozen_encoder() || role == Role::teacher;
  c.label_kind = kind;
  c.labels = std::move(labels);
  return c;
}

void Checkpoint::check_invariants() const {
  if (role == Role::teacher && !frozen_encoder) throw Error("teacher checkpoint must have a frozen encoder");
  if (blob_hash(encoder_params) != encoder_hash) throw Error("encoder parameter hash mismatch");
  if (blob_hash(classifier_params) != classifier_hash) throw Error("classifier parameter hash mismatch");
  if (!labels.empty() && static_cast<int>(labels.size()) != classifier_spec.n_classes) {
    throw Error("classifier has " + std::to_string(classifier_spec.n_classes) + " outputs but " +
                std::to_string(labels.size()) + " labels");
  }
}

Checkpoint freeze_encoder(Checkpoint ckpt) {
  ckpt.frozen_encoder = true;
  return ckpt;
}

namespace {

constexpr char kMagic[8] = {'C', '2', 'S', 'C', 'K', 'P', 'T', '\0'};

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& buf, std::size_t& pos) {
  if (pos + 8 > buf.size()) throw IoError("corrupt checkpoint: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  pos += 8;
  return v;
}

void put_blob(std::string& buf, const std::vector<float>& blob) {
  put_u64(buf, blob.size());
  const auto* p = reinterpret_cast<const char*>(blob.data());
  buf.append(p, blob.size() * sizeof(float));
}

std::vector<float> get_blob(const std::string& buf, std::size_t& pos) {
  const std::uint64_t n = get_u64(buf, pos);
  if (n > (buf.size() - pos) / sizeof(float)) throw IoError("corrupt checkpoint: truncated parameter blob");
  std::vector<float> blob(n);
  std::memcpy(blob.data(), buf.data() + pos, n * sizeof(float));
  pos += n * sizeof(float);
  return blob;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  ckpt.check_invariants();
  nlohmann::json header = {{"version", kCheckpointVersion},
                           {"role", to_string(ckpt.role)},
                           {"frozen_encoder", ckpt.frozen_encoder},
                           {"encoder_spec", ckpt.encoder_spec},
                           {"classifier_spec", ckpt.classifier_spec},
                           {"encoder_hash", ckpt.encoder_hash},
                           {"classifier_hash", ckpt.classifier_hash},
                           {"label_kind", to_string(ckpt.label_kind)},
                           {"labels", ckpt.labels},
                           {"scene_vocab", ckpt.scene_vocab},
                           {"city_vocab", ckpt.city_vocab},
                           {"config_snapshot", ckpt.config_snapshot},
                           {"metrics", ckpt.metrics}};
  const std::string header_text = header.dump();

  std::string buf(kMagic, sizeof kMagic);
  put_u64(buf, kCheckpointVersion);
  put_u64(buf, header_text.size());
  buf += header_text;
  put_blob(buf, ckpt.encoder_params);
  put_blob(buf, ckpt.classifier_params);
  Fnv1a h;
  h.update(buf);
  put_u64(buf, h.digest());

  const auto tmp = std::filesystem::path(path).concat(".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string() + ": ";
  if (buf.size() < sizeof kMagic + 24 || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
    throw IoError(where + "not a checkpoint file or truncated");
  }
  {
    Fnv1a h;
    h.update(std::string_view(buf.data(), buf.size() - 8));
    std::size_t tail = buf.size() - 8;
    if (get_u64(buf, tail) != h.digest()) throw IoError(where + "corrupt (checksum mismatch or truncated)");
  }
  std::size_t pos = sizeof kMagic;
  const std::uint64_t version = get_u64(buf, pos);
  if (version != kCheckpointVersion) {
    throw IoError(where + "version " + std::to_string(version) + " is not supported (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t header_len = get_u64(buf, pos);
  if (header_len > buf.size() - pos) throw IoError(where + "corrupt header length");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(where + "corrupt header: " + e.what());
  }
  pos += header_len;

  Checkpoint c;
  try {
    c.role = role_from_string(header.at("role").get<std::string>());
    c.frozen_encoder = header.at("frozen_encoder").get<bool>();
    c.encoder_spec = header.at("encoder_spec").get<EncoderSpec>();
    c.classifier_spec = header.at("classifier_spec").get<ClassifierSpec>();
    c.encoder_hash = header.at("encoder_hash").get<std::string>();
    c.classifier_hash = header.at("classifier_hash").get<std::string>();
    c.label_kind = label_kind_from_string(header.at("label_kind").get<std::string>());
    c.labels = header.at("labels").get<std::vector<std::string>>();
    c.scene_vocab = header.at("scene_vocab").get<std::vector<std::string>>();
    c.city_vocab = header.at("city_vocab").get<std::vector<std::string>>();
    c.config_snapshot = header.at("config_snapshot");
    c.metrics = header.at("metrics");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(where + "corrupt header: " + e.what());
  }
  c.encoder_params = get_blob(buf, pos);
  c.classifier_params = get_blob(buf, pos);
  if (pos != buf.size() - 8) throw IoError(where + "trailing bytes after parameter blobs");
  if (blob_hash(c.encoder_params) != c.encoder_hash || blob_hash(c.classifier_params) != c.classifier_hash) {
    throw IoError(where + "parameter hash mismatch");
  }
  try {
    c.check_invariants();
  } catch (const Error& e) {
    throw IoError(where + e.what());
  }
  return c;
}

}  // namespace city2scene
