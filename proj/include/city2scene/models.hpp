#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "city2scene/nn.hpp"
#include "city2scene/tensor.hpp"

namespace city2scene {

struct EncoderSpec {
  /// "reference_cnn" or the identifier of a registered plugin.
  std::string kind = "reference_cnn";
  /// Input frequency bins F; the time axis is free.
  int n_mels = 32;
  std::vector<int> widths = {32, 64, 128};

  int embedding_dim() const { return widths.empty() ? 0 : widths.back(); }
  bool operator==(const EncoderSpec&) const = default;
};

struct ClassifierSpec {
  int in_dim = 128;
  int n_classes = 10;
  bool operator==(const ClassifierSpec&) const = default;
};

void to_json(nlohmann::json& j, const EncoderSpec& s);
void from_json(const nlohmann::json& j, EncoderSpec& s);
void to_json(nlohmann::json& j, const ClassifierSpec& s);
void from_json(const nlohmann::json& j, ClassifierSpec& s);

/// Everything before the final fully connected layer.
class Encoder {
 public:
  virtual ~Encoder() = default;
  /// x is (n, 1, F, T) -> (n, D, 1, 1).
  virtual Tensor encode(const Tensor& x, bool training) = 0;
  virtual Tensor backward(const Tensor& d_embedding) = 0;
  virtual void parameters(std::vector<nn::Parameter*>& out) = 0;
  virtual void buffers(std::vector<nn::Buffer>& out) = 0;
  virtual int embedding_dim() const = 0;
  virtual int input_bins() const = 0;
};

/// Stem conv3x3 + BN + ReLU + pool, one residual block per width (pooling
/// between blocks), then global average pooling over frequency and time.
class ReferenceCnn final : public Encoder {
 public:
  ReferenceCnn(const EncoderSpec& spec, Rng& rng);
  Tensor encode(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& d_embedding) override;
  void parameters(std::vector<nn::Parameter*>& out) override { body_.parameters(out); }
  void buffers(std::vector<nn::Buffer>& out) override { body_.buffers(out); }
  int embedding_dim() const override { return spec_.embedding_dim(); }
  int input_bins() const override { return spec_.n_mels; }

 private:
  EncoderSpec spec_;
  nn::Sequential body_;
};

using EncoderFactory = std::function<std::unique_ptr<Encoder>(const EncoderSpec&, Rng&)>;

/// External backbones attach here under their EncoderSpec::kind.
void register_encoder(const std::string& kind, EncoderFactory factory);
std::unique_ptr<Encoder> make_encoder(const EncoderSpec& spec, Rng& rng);

enum class Role { city_model, teacher, student, baseline };
std::string to_string(Role role);
Role role_from_string(const std::string& s);

/// Which vocabulary the classifier's logits index.
enum class LabelKind { city, scene };
std::string to_string(LabelKind kind);
LabelKind label_kind_from_string(const std::string& s);

struct Checkpoint;

/// Encoder plus a single fully connected classifier producing raw logits.
class Model {
 public:
  Model(const EncoderSpec& encoder_spec, int n_classes, std::uint64_t seed);
  /// Rebuilds a model with the checkpoint's parameters.
  static Model from_checkpoint(const Checkpoint& ckpt);

  /// Embeddings (n, D). Wrong input frequency size raises ShapeError.
  Tensor encode(const Tensor& x, bool training);
  /// Logits (n, K) from embeddings (n, D).
  Tensor classify(const Tensor& embeddings, bool training);
  /// encode + classify. The encoder runs in inference mode when frozen.
  Tensor forward(const Tensor& x, bool training);
  /// Backpropagates dL/dlogits through the classifier, and the encoder unless frozen.
  void backward(const Tensor& dlogits);

  std::vector<nn::Parameter*> trainable_parameters();
  std::vector<float> encoder_blob();
  std::vector<float> classifier_blob();
  void load_encoder_blob(const std::vector<float>& blob);
  void load_classifier_blob(const std::vector<float>& blob);
  /// Replaces the classifier with a freshly initialised one.
  void reset_classifier(int n_classes, std::uint64_t seed);

  void freeze_encoder() { frozen_encoder_ = true; }
  bool frozen_encoder() const { return frozen_encoder_; }
  const EncoderSpec& encoder_spec() const { return encoder_spec_; }
  ClassifierSpec classifier_spec() const;
  nn::Linear& classifier() { return *classifier_; }
  std::size_t parameter_count();

 private:
  EncoderSpec encoder_spec_;
  std::unique_ptr<Encoder> encoder_;
  std::unique_ptr<nn::Linear> classifier_;
  bool frozen_encoder_ = false;
  bool encoder_ran_training_ = false;
};

std::string blob_hash(const std::vector<float>& blob);

struct Checkpoint {
  EncoderSpec encoder_spec;
  ClassifierSpec classifier_spec;
  std::vector<float> encoder_params;
  std::string encoder_hash;
  std::vector<float> classifier_params;
  std::string classifier_hash;
  Role role = Role::city_model;
  bool frozen_encoder = false;
  LabelKind label_kind = LabelKind::city;
  std::vector<std::string> labels;
  std::vector<std::string> scene_vocab;
  std::vector<std::string> city_vocab;
  nlohmann::json config_snapshot = nlohmann::json::object();
  nlohmann::json metrics = nlohmann::json::object();

  /// Captures parameters and recomputes hashes.
  static Checkpoint capture(Model& model, Role role, LabelKind kind, std::vector<std::string> labels);
  /// Throws Error when role/freeze or blob/hash invariants are broken.
  void check_invariants() const;
};

/// Marks the encoder frozen. Idempotent.
Checkpoint freeze_encoder(Checkpoint ckpt);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws IoError on version mismatch, truncation or hash mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace city2scene
