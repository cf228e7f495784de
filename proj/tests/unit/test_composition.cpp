#include <doctest.h>

#include "mtalk/common/error.hpp"
#include "mtalk/common/rng.hpp"
#include "mtalk/composition/composition.hpp"

using namespace mtalk;
using namespace mtalk::comp;
using tok::MotionTokens;

namespace {

tok::MotionTokenizer small_tokenizer() {
  tok::TokenizerConfig c;
  c.codebook_size = 16;
  c.code_dim = 16;
  c.width = 32;
  return tok::MotionTokenizer(c, 3);
}

MotionTokens random_tokens(Rng& rng, int length, int layers = 2, int k = 16) {
  MotionTokens t;
  t.layers.resize(static_cast<std::size_t>(layers));
  for (auto& l : t.layers)
    for (int i = 0; i < length; ++i) l.push_back(uniform_int(rng, 0, k - 1));
  return t;
}

std::vector<double> frames_of(const motion::MotionFeatures& f, int begin, int end) {
  return {f.data.begin() + static_cast<std::ptrdiff_t>(begin) * f.dim(), f.data.begin() + static_cast<std::ptrdiff_t>(end) * f.dim()};
}

}  // namespace

TEST_CASE("strategies: degenerate single segment is identical everywhere") {
  const auto tk = small_tokenizer();
  Rng rng = make_rng(1);
  const auto seg = random_tokens(rng, 6);
  const auto a = compose(tk, {seg}, Strategy::independent());
  CHECK(a.frames == 24);
  CHECK(a.data == compose(tk, {seg}, Strategy::past()).data);
  CHECK(a.data == compose(tk, {seg}, Strategy::joint()).data);
}

TEST_CASE("strategies: frame counts and decode-context oracles") {
  const auto tk = small_tokenizer();
  Rng rng = make_rng(2);
  const std::vector<MotionTokens> segs{random_tokens(rng, 5), random_tokens(rng, 7), random_tokens(rng, 3)};
  const auto copy = segs;
  for (const auto& s : {Strategy::independent(), Strategy::past(2), Strategy::joint()})
    CHECK(compose(tk, segs, s).frames == 4 * 15);
  CHECK(segs == copy);
  CHECK(seam_frames(segs, 4) == std::vector<int>{20, 48});

  // Independent is the plain concatenation of per-segment decodes.
  const auto ind = compose(tk, segs, Strategy::independent());
  std::vector<double> expect;
  for (const auto& s : segs) {
    const auto d = tk.decode(s).data;
    expect.insert(expect.end(), d.begin(), d.end());
  }
  CHECK(ind.data == expect);

  // Joint delegates to the single concatenated decode.
  CHECK(compose(tk, segs, Strategy::joint()).data == tk.decode(tok::concat_tokens(segs)).data);

  // With a window spanning the whole previous segment, the second part equals
  // the matching frames of the joint decode of the first two segments.
  const std::vector<MotionTokens> two{segs[0], segs[1]};
  const auto past = compose(tk, two, Strategy::past(5));
  const auto joint = compose(tk, two, Strategy::joint());
  CHECK(frames_of(past, 20, 48) == frames_of(joint, 20, 48));
  CHECK(frames_of(past, 0, 20) == tk.decode(segs[0]).data);
  // A window longer than the previous segment is clamped.
  CHECK(compose(tk, two, Strategy::past(50)).data == past.data);
  // Short windows only see part of the context.
  CHECK(frames_of(compose(tk, two, Strategy::past(1)), 20, 48) != frames_of(joint, 20, 48));
}

TEST_CASE("strategies: argument errors") {
  const auto tk = small_tokenizer();
  Rng rng = make_rng(3);
  CHECK_THROWS_AS(compose(tk, {random_tokens(rng, 3), random_tokens(rng, 3, 3)}, Strategy::joint()), InvalidArgument);
  CHECK_THROWS_AS(compose(tk, {random_tokens(rng, 3), MotionTokens{{{}, {}}}}, Strategy::independent()), InvalidArgument);
  CHECK_THROWS_AS(compose(tk, {random_tokens(rng, 3, 3)}, Strategy::joint()), InvalidArgument);
  CHECK_THROWS_AS(compose(tk, {}, Strategy::joint()), InvalidArgument);
  CHECK_THROWS_AS(compose(tk, {random_tokens(rng, 3)}, Strategy::past(0)), InvalidArgument);
  CHECK(parse_strategy("past", 3).window == 3);
  CHECK(strategy_name(parse_strategy("independent")) == "independent");
  CHECK_THROWS_AS(parse_strategy("mixed"), InvalidArgument);
}

TEST_CASE("seam metrics: constant clip, teleport fixture, range errors") {
  motion::JointPositions still(10, 3);
  for (int f = 0; f < 10; ++f)
    for (int j = 0; j < 3; ++j) still.at(f, j) = {0.1 * j, 0.9, 0.0};
  auto r = seam_metrics(still, {1, 5, 8});
  for (const auto& s : r.seams) {
    CHECK(s.displacement == 0.0);
    CHECK(s.acceleration == 0.0);
  }
  CHECK(!r.errors);

  auto jump = still;
  for (int f = 5; f < 10; ++f)
    for (int j = 0; j < 3; ++j) jump.at(f, j).x() += 1.0;
  r = seam_metrics(jump, {5}, &still);
  CHECK(r.seams[0].displacement == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.seams[0].acceleration == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.errors->mpjpe == doctest::Approx(500.0));
  CHECK(seam_metrics(jump, {3}).seams[0].displacement == 0.0);
  CHECK_THROWS_AS(seam_metrics(jump, {0}), InvalidArgument);
  CHECK_THROWS_AS(seam_metrics(jump, {9}), InvalidArgument);
}

TEST_CASE("ordering experiment produces one score per strategy") {
  const auto tk = small_tokenizer();
  const auto skel = motion::Skeleton::toy5();
  const auto pairs = motion::synth_two_phase(4, 3, skel, 32);
  const auto res = ordering_experiment(tk, skel, pairs);
  CHECK(res.pairs == 3);
  CHECK(res.scores.size() == 3);
  for (const auto& s : res.scores) {
    CHECK(s.mpjpe > 0);
    CHECK(s.pa_mpjpe <= s.mpjpe);
    CHECK(s.accl >= 0);
  }
  CHECK(res.joint_le_independent_seam >= 0);
  CHECK(res.joint_le_independent_seam <= 1);
  CHECK(kTokensJointReference.mpjpe == 108.77);
}
