#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "city2scene/error.hpp"
#include "city2scene/models.hpp"
#include "support.hpp"

using namespace city2scene;
using c2s_test::TempDir;

namespace {

Tensor random_input(std::uint64_t seed, int n, int f, int t) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(-4.0f, 2.0f);
  Tensor x(n, 1, f, t);
  for (auto& v : x.data) v = d(rng);
  return x;
}

/// One Adam step on cross-entropy-like gradients for a fixed target class.
void train_steps(Model& m, int steps) {
  auto params = m.trainable_parameters();
  nn::Adam adam(params, {});
  const Tensor x = random_input(3, 4, m.encoder_spec().n_mels, 16);
  for (int s = 0; s < steps; ++s) {
    const Tensor z = m.forward(x, true);
    Tensor dz = z;
    for (int i = 0; i < z.n; ++i) {
      for (int k = 0; k < z.c; ++k) dz.data[static_cast<std::size_t>(i * z.c + k)] = k == 0 ? -0.25f : 0.05f;
    }
    adam.zero_grad();
    m.backward(dz);
    adam.step(1e-3);
  }
}

}  // namespace

TEST_CASE("reference CNN shapes and size") {
  EncoderSpec spec;
  Model m(spec, 10, 1);
  CHECK(m.parameter_count() < 200000);
  CHECK(m.parameter_count() > 50000);
  const Tensor e = m.encode(random_input(1, 8, 32, 63), false);
  CHECK(e.n == 8);
  CHECK(e.c == 128);
  CHECK(m.encode(random_input(1, 2, 32, 101), false).c == 128);
  CHECK(m.forward(random_input(1, 8, 32, 63), false).c == 10);
  CHECK(m.forward(random_input(1, 1, 32, 20), false).n == 1);
  CHECK_THROWS_AS(m.encode(random_input(1, 2, 40, 32), false), ShapeError);

  EncoderSpec wide;
  wide.n_mels = 256;
  wide.widths = {16, 32, 64};
  Model big(wide, 10, 1);
  const Tensor eb = big.encode(random_input(2, 8, 256, 63), false);
  CHECK(eb.n == 8);
  CHECK(eb.c == 64);
}

TEST_CASE("encoding is deterministic and finite") {
  Model m(EncoderSpec{}, 4, 2);
  const Tensor x = random_input(4, 3, 32, 32);
  CHECK(m.encode(x, false).data == m.encode(x, false).data);
  const Tensor zero(3, 1, 32, 32, 0.0f);
  for (float v : m.encode(zero, false).data) CHECK(std::isfinite(v));
  Model same(EncoderSpec{}, 4, 2);
  CHECK(same.encoder_blob() == m.encoder_blob());
  Model other(EncoderSpec{}, 4, 3);
  CHECK(other.encoder_blob() != m.encoder_blob());
}

TEST_CASE("classifier is a plain linear map") {
  Model m(EncoderSpec{}, 10, 1);
  auto& fc = m.classifier();
  std::fill(fc.weight().value.begin(), fc.weight().value.end(), 0.0f);
  std::fill(fc.bias().value.begin(), fc.bias().value.end(), 0.0f);
  const Tensor z = m.classify(Tensor::matrix(2, 128, 1.0f), false);
  CHECK(z.n == 2);
  CHECK(z.c == 10);
  for (float v : z.data) CHECK(v == 0.0f);
  CHECK_THROWS_AS(m.classify(Tensor::matrix(2, 64, 1.0f), false), ShapeError);
  CHECK(m.classifier_spec() == ClassifierSpec{128, 10});
}

TEST_CASE("frozen encoder stays put while the classifier trains") {
  Model m(EncoderSpec{}, 3, 1);
  train_steps(m, 2);
  m.freeze_encoder();
  const std::string enc = blob_hash(m.encoder_blob());
  const std::string cls = blob_hash(m.classifier_blob());
  train_steps(m, 100);
  CHECK(blob_hash(m.encoder_blob()) == enc);
  CHECK(blob_hash(m.classifier_blob()) != cls);
}

TEST_CASE("unfrozen training changes the encoder") {
  Model m(EncoderSpec{}, 3, 1);
  const std::string enc = blob_hash(m.encoder_blob());
  train_steps(m, 3);
  CHECK(blob_hash(m.encoder_blob()) != enc);
}

TEST_CASE("checkpoint save and load") {
  TempDir tmp("ckpt");
  Model m(EncoderSpec{}, 4, 5);
  train_steps(m, 2);
  Checkpoint c = Checkpoint::capture(m, Role::city_model, LabelKind::city, {"a", "b", "c", "d"});
  c.config_snapshot = {{"seed", 5}, {"nested", {{"x", 1.5}, {"list", {1, 2, 3}}}}};
  c.metrics = {{"overall", 0.75}};
  c.scene_vocab = {"park", "tram"};
  c.city_vocab = c.labels;
  save_checkpoint(c, tmp / "m.c2s");
  const Checkpoint back = load_checkpoint(tmp / "m.c2s");
  CHECK(back.encoder_hash == c.encoder_hash);
  CHECK(back.classifier_hash == c.classifier_hash);
  CHECK(back.encoder_params == c.encoder_params);
  CHECK(back.config_snapshot == c.config_snapshot);
  CHECK(back.metrics == c.metrics);
  CHECK(back.labels == c.labels);
  CHECK(back.scene_vocab == c.scene_vocab);
  CHECK(back.role == Role::city_model);
  CHECK(back.encoder_spec == c.encoder_spec);

  Model restored = Model::from_checkpoint(back);
  const Tensor x = random_input(9, 2, 32, 32);
  CHECK(restored.forward(x, false).data == m.forward(x, false).data);
}

TEST_CASE("truncated or corrupted checkpoints fail to load") {
  TempDir tmp("corrupt");
  Model m(EncoderSpec{}, 2, 1);
  save_checkpoint(Checkpoint::capture(m, Role::baseline, LabelKind::scene, {"x", "y"}), tmp / "m.c2s");
  std::ifstream in(tmp / "m.c2s", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  for (std::size_t cut : {std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    std::ofstream(tmp / "t.c2s", std::ios::binary) << bytes.substr(0, cut);
    CHECK_THROWS_AS(load_checkpoint(tmp / "t.c2s"), IoError);
  }
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  std::ofstream(tmp / "f.c2s", std::ios::binary) << flipped;
  CHECK_THROWS_AS(load_checkpoint(tmp / "f.c2s"), IoError);

  std::string version = bytes;
  version[8] = 9;
  std::ofstream(tmp / "v.c2s", std::ios::binary) << version;
  CHECK_THROWS_AS(load_checkpoint(tmp / "v.c2s"), IoError);
  CHECK_THROWS_AS(load_checkpoint(tmp / "none.c2s"), IoError);
}

TEST_CASE("freeze_encoder on checkpoints") {
  Model m(EncoderSpec{}, 2, 1);
  Checkpoint c = Checkpoint::capture(m, Role::city_model, LabelKind::city, {"x", "y"});
  CHECK_FALSE(c.frozen_encoder);
  const Checkpoint f = freeze_encoder(c);
  CHECK(f.frozen_encoder);
  const Checkpoint ff = freeze_encoder(f);
  CHECK(ff.frozen_encoder);
  CHECK(ff.encoder_hash == f.encoder_hash);
  CHECK(Model::from_checkpoint(f).frozen_encoder());
}

TEST_CASE("teacher role requires a frozen encoder") {
  Model m(EncoderSpec{}, 2, 1);
  Checkpoint c = Checkpoint::capture(m, Role::teacher, LabelKind::scene, {"x", "y"});
  c.frozen_encoder = false;
  CHECK_THROWS_AS(c.check_invariants(), Error);
  c.frozen_encoder = true;
  CHECK_NOTHROW(c.check_invariants());
  c.encoder_hash = "0000";
  CHECK_THROWS_AS(c.check_invariants(), Error);
}

TEST_CASE("reset classifier keeps the encoder") {
  Model m(EncoderSpec{}, 3, 1);
  const auto enc = m.encoder_blob();
  m.reset_classifier(7, 2);
  CHECK(m.encoder_blob() == enc);
  CHECK(m.classifier_spec().n_classes == 7);
  Model n(EncoderSpec{}, 3, 1);
  n.reset_classifier(7, 2);
  CHECK(n.classifier_blob() == m.classifier_blob());
}

TEST_CASE("encoder registry") {
  CHECK_THROWS_AS(make_encoder(EncoderSpec{"unknown_backbone"}, *std::make_unique<Rng>(1).get()), ConfigError);
  register_encoder("tiny_test", [](const EncoderSpec& s, Rng& rng) {
    EncoderSpec inner = s;
    inner.kind = "reference_cnn";
    return std::make_unique<ReferenceCnn>(inner, rng);
  });
  EncoderSpec spec;
  spec.kind = "tiny_test";
  spec.widths = {8};
  Model m(spec, 2, 1);
  CHECK(m.encode(random_input(1, 2, 32, 16), false).c == 8);
}

TEST_CASE("role and label kind names round trip") {
  for (Role r : {Role::city_model, Role::teacher, Role::student, Role::baseline}) CHECK(role_from_string(to_string(r)) == r);
  CHECK(label_kind_from_string(to_string(LabelKind::scene)) == LabelKind::scene);
  CHECK_THROWS(role_from_string("oracle"));
}
