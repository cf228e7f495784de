#include <doctest.h>

#include <filesystem>
#include <map>

#include "mtalk/common/error.hpp"
#include "mtalk/common/rng.hpp"
#include "mtalk/lm/model.hpp"
#include "mtalk/vision/vision.hpp"

using namespace mtalk;
using namespace mtalk::vision;
using motion::Vec3;

namespace {

VisualFeature random_feature(Rng& rng, int t, int d) {
  VisualFeature f{Tensor<float>({t, d}), "test"};
  for (auto& v : f.rows.data) v = static_cast<float>(normal(rng));
  return f;
}

VisualEncoderConfig small_perceiver(bool temporal) {
  VisualEncoderConfig c;
  c.arch = Arch::perceiver;
  c.feature_dim = 24;
  c.model_dim = 20;
  c.perceiver.depth = 2;
  c.perceiver.queries = 5;
  c.perceiver.media_dim = 24;
  c.perceiver.heads = 2;
  c.perceiver.head_dim = 8;
  c.perceiver.out_dim = 20;
  c.perceiver.temporal_embeddings = temporal;
  c.perceiver.max_frames = 20;
  return c;
}

}  // namespace

TEST_CASE("pose splat: determinism, hand-computed cells, disjoint support") {
  const std::vector<Vec3> pose{{0.1, 0.9, 0.3}, {-0.6, 1.6, 0.3}};
  const auto a = pose_render_features({pose});
  CHECK(a.rows.data == pose_render_features({pose}).rows.data);
  CHECK(a.dim() == 512);
  CHECK(a.frames() == 1);

  // Grid: 16 cells over 4 m centred on (0, 1, 0); cell size 0.25 m.
  // Joint 0: ix = floor(2.1/0.25) = 8, iy = floor(1.9/0.25) = 7, iz = floor(2.3/0.25) = 9.
  // Joint 1: ix = floor(1.4/0.25) = 5, iy = floor(2.6/0.25) = 10, iz = 9.
  std::map<int, float> expect{{9 * 16 + 8, 1}, {256 + 7 * 16 + 8, 1}, {9 * 16 + 5, 1}, {256 + 10 * 16 + 5, 1}};
  for (int i = 0; i < 512; ++i) CHECK(a.rows.data[i] == (expect.count(i) ? expect[i] : 0.0f));

  auto shifted = pose;
  for (auto& p : shifted) p.x() += 0.25;
  const auto b = pose_render_features({shifted});
  std::map<int, float> expect_b{{9 * 16 + 9, 1}, {256 + 7 * 16 + 9, 1}, {9 * 16 + 6, 1}, {256 + 10 * 16 + 6, 1}};
  for (int i = 0; i < 512; ++i) CHECK(b.rows.data[i] == (expect_b.count(i) ? expect_b[i] : 0.0f));

  const std::vector<Vec3> far{{-1.9, -0.9, -1.9}};
  const std::vector<Vec3> other{{1.9, 2.9, 1.9}};
  const auto fa = pose_render_features({far}), fb = pose_render_features({other});
  double dot = 0;
  for (int i = 0; i < 512; ++i) dot += fa.rows.data[i] * fb.rows.data[i];
  CHECK(dot == 0.0);
  CHECK(pose_render_features({{{50.0, 0.0, 0.0}}}).rows.data == std::vector<float>(512, 0.0f));
  CHECK(splat_cells({50, 0, 0}, {}).first == -1);
  CHECK_THROWS_AS(pose_render_features({}), InvalidArgument);

  motion::JointPositions jp(3, 2);
  jp.at(0, 0) = {0.1, 0.9, 0.3};
  jp.at(2, 0) = {0.6, 0.9, 0.3};
  jp.at(0, 1) = jp.at(2, 1) = {50, 0, 0};
  const auto img = clip_image_features(jp);
  CHECK(img.frames() == 1);
  CHECK(img.rows.data[9 * 16 + 8] == 1.0f);
  CHECK(img.rows.data[9 * 16 + 10] == 0.5f);
}

TEST_CASE("linear projection: zero map, shape, exact affinity") {
  Rng rng = make_rng(1);
  const auto f = random_feature(rng, 3, 10);
  CHECK(project_linear(f, Tensor<float>({10, 6}), Tensor<float>({6})).data == std::vector<float>(18, 0.0f));
  Tensor<float> w({10, 6}), b({6});
  for (auto& x : w.data) x = static_cast<float>(normal(rng));
  for (auto& x : b.data) x = static_cast<float>(normal(rng));
  const auto y = project_linear(f, w, b);
  CHECK(y.rows() == 3);
  CHECK(y.cols() == 6);
  auto zero = f;
  std::fill(zero.rows.data.begin(), zero.rows.data.end(), 0.0f);
  const auto y0 = project_linear(zero, w, b);
  for (float alpha : {0.0f, 0.5f, 2.0f, -1.0f}) {
    auto fa = f;
    for (auto& x : fa.rows.data) x *= alpha;
    const auto ya = project_linear(fa, w, b);
    for (std::size_t i = 0; i < ya.data.size(); ++i)
      CHECK(ya.data[i] == doctest::Approx(alpha * y.data[i] + (1 - alpha) * y0.data[i]).epsilon(1e-5));
  }
  CHECK_THROWS_AS(project_linear(f, Tensor<float>({9, 6}), b), ShapeError);

  // The encoder's linear path agrees with the reference map.
  VisualEncoderConfig cfg;
  cfg.feature_dim = 10;
  cfg.model_dim = 6;
  VisualEncoder enc(cfg, 2);
  const auto e = enc.encode(f);
  const auto r = project_linear(f, enc.params().get("visual.proj.w").value, enc.params().get("visual.proj.b").value);
  for (std::size_t i = 0; i < e.data.size(); ++i) CHECK(e.data[i] == doctest::Approx(r.data[i]).epsilon(1e-5));
}

TEST_CASE("perceiver: reference layer shapes") {
  PerceiverConfig c;  // 1024 / 512 / 4096 / 768
  std::map<std::string, ad::Shape> s;
  for (const auto& [n, sh] : perceiver_shapes(c)) s[n] = sh;
  for (int i = 0; i < 6; ++i) {
    const auto p = "perceiver.layer" + std::to_string(i) + ".";
    CHECK(s.at(p + "to_q") == ad::Shape{1024, 512});
    CHECK(s.at(p + "to_kv") == ad::Shape{1024, 1024});
    CHECK(s.at(p + "to_out") == ad::Shape{512, 1024});
    CHECK(s.at(p + "ff.w1") == ad::Shape{1024, 4096});
    CHECK(s.at(p + "ff.w2") == ad::Shape{4096, 1024});
  }
  CHECK(!s.count("perceiver.layer6.to_q"));
  CHECK(s.at("perceiver.proj.w") == ad::Shape{1024, 768});
  CHECK(s.at("perceiver.latents") == ad::Shape{16, 1024});
}

TEST_CASE("perceiver: fixed-length output and frame-order behaviour") {
  Rng rng = make_rng(3);
  VisualEncoder plain(small_perceiver(false), 4);
  for (int t : {1, 17}) {
    const auto out = plain.encode(random_feature(rng, t, 24));
    CHECK(out.rows() == 5);
    CHECK(out.cols() == 20);
  }
  const auto f = random_feature(rng, 6, 24);
  auto perm = f;
  const std::vector<int> order{3, 0, 5, 1, 4, 2};
  for (int r = 0; r < 6; ++r)
    std::copy_n(&f.rows.at(order[static_cast<std::size_t>(r)], 0), 24, &perm.rows.at(r, 0));
  const auto a = plain.encode(f), b = plain.encode(perm);
  for (std::size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == doctest::Approx(b.data[i]).epsilon(1e-5).scale(1e-5));

  VisualEncoder timed(small_perceiver(true), 4);
  const auto c = timed.encode(f), d = timed.encode(perm);
  double diff = 0;
  for (std::size_t i = 0; i < c.data.size(); ++i) diff = std::max(diff, double(std::abs(c.data[i] - d.data[i])));
  CHECK(diff > 1e-4);
  CHECK_THROWS_AS(timed.encode(random_feature(rng, 21, 24)), InvalidArgument);
  CHECK_THROWS_AS(plain.encode(random_feature(rng, 2, 23)), ShapeError);
}

TEST_CASE("visual projection receives gradient from a masked-in target") {
  lm::LmConfig lc;
  lc.layers = 1;
  lc.heads = 2;
  lc.dim = 16;
  lc.ff = 32;
  lc.context = 32;
  lc.vocab = 12;
  lm::LanguageModel m(lc, 5);
  VisualEncoderConfig vc;
  vc.feature_dim = 8;
  vc.model_dim = 16;
  VisualEncoder enc(vc, 6);
  Rng rng = make_rng(7);
  const auto feat = random_feature(rng, 1, 8);

  const std::vector<int> ids{5, 3, 6, 7, 8};
  const std::vector<int> targets{3, 6, 7, 8, 2};
  const std::vector<std::uint8_t> mask{0, 0, 0, 1, 1};
  ad::Tape<float> t;
  const auto v = m.bind_frozen(t);
  const auto vis = enc.build(t, feat, true);
  enc.params().zero_grad();
  t.backward(lm::lm_loss(t, m.build_logits(t, v, ids, vis), targets, mask));
  double g = 0;
  for (float x : enc.params().get("visual.proj.w").grad.data) g += std::abs(x);
  CHECK(g > 0);
}

TEST_CASE("feature files round trip and reject malformed content") {
  Rng rng = make_rng(8);
  const auto f = random_feature(rng, 2, 5);
  const auto path = std::filesystem::temp_directory_path() / "mtalk_feature.json";
  save_feature_file(path, f);
  const auto back = load_feature_file(path);
  std::filesystem::remove(path);
  CHECK(back.rows.data == f.rows.data);
  CHECK(back.provider == "test");
  auto j = feature_to_json(f);
  j["t"] = 3;
  CHECK_THROWS_AS(feature_from_json(j), FormatError);
  j = feature_to_json(f);
  j["rows"][0].push_back(1.0);
  CHECK_THROWS_AS(feature_from_json(j), FormatError);
  CHECK_THROWS_AS(feature_from_json(nlohmann::json::object()), FormatError);
}

TEST_CASE("encoder checkpoints round trip") {
  VisualEncoder e(small_perceiver(true), 9);
  Rng rng = make_rng(9);
  const auto f = random_feature(rng, 4, 24);
  const auto back = VisualEncoder::from_checkpoint(ad::deserialize_checkpoint(ad::serialize_checkpoint(e.to_checkpoint())));
  CHECK(back.encode(f).data == e.encode(f).data);
}
