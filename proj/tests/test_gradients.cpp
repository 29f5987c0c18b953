#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dstd/distill.hpp"
#include "dstd/dst.hpp"
#include "dstd/encoder.hpp"
#include "dstd/optimizer.hpp"
#include "dstd/rng.hpp"

using namespace dstd;

namespace {

PackedInput make_input(const std::vector<int>& ids, int real_len) {
  PackedInput p;
  p.ids = ids;
  p.segment_ids.assign(ids.size(), 0);
  p.attention_mask.assign(ids.size(), 0);
  for (int i = 0; i < real_len; ++i) p.attention_mask[i] = 1;
  for (size_t i = real_len; i < ids.size(); ++i) p.ids[i] = kPadId;
  return p;
}

struct FlatView {
  std::vector<std::pair<double*, size_t>> spans;
  size_t total = 0;

  explicit FlatView(ModelParamsT<double>& p) {
    visit_tensors(p, [&](const char*, double* d, size_t n, bool) {
      spans.push_back({d, n});
      total += n;
    });
  }
  double& coord(size_t idx) {
    for (auto& [data, n] : spans) {
      if (idx < n) return data[idx];
      idx -= n;
    }
    FAIL("coordinate out of range");
    return spans[0].first[0];
  }
};

// Central finite differences against the analytic gradient on n_samples
// randomly chosen coordinates. Everything runs in double.
void check_gradients(ModelParamsT<double>& params, GradientsT<double>& analytic,
                     const std::function<double()>& eval, int n_samples, uint64_t seed,
                     double tol = 1e-4) {
  FlatView pview(params);
  FlatView gview(analytic);
  REQUIRE(pview.total == gview.total);

  Rng rng(seed);
  const double h = 1e-4;
  for (int s = 0; s < n_samples; ++s) {
    size_t idx = rng.below(pview.total);
    double& x = pview.coord(idx);
    double saved = x;
    x = saved + h;
    double up = eval();
    x = saved - h;
    double down = eval();
    x = saved;
    double fd = (up - down) / (2.0 * h);
    double g = gview.coord(idx);
    double rel = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-6});
    INFO("coordinate " << idx << " fd " << fd << " analytic " << g);
    CHECK(rel <= tol);
  }
}

}  // namespace

TEST_CASE("constant loss gives zero gradients") {
  EncoderConfig c{1, 4, 8, 1, 20, 16, 0.0f};
  ModelParams p = init_params(c, 1);
  std::vector<PackedInput> batch = {make_input({kClsId, 6, kSepId}, 3)};
  auto [loss, grads] = compute_gradients<float>(
      p, batch, [](size_t, const ForwardCache<float>&, Mat<float>& dh, Gradients&) {
        dh.zero();
        return 0.0;
      });
  CHECK(loss == 0.0);
  visit_tensors(grads, [](const char*, float* d, size_t n, bool) {
    for (size_t i = 0; i < n; ++i) CHECK(d[i] == 0.0f);
  });
}

TEST_CASE("scorer BCE gradients match finite differences") {
  EncoderConfig c{2, 8, 12, 2, 24, 12, 0.0f};
  ModelParamsT<double> params = init_params<double>(c, 99);
  std::vector<PackedInput> inputs = {
      make_input({kClsId, 6, 7, kSepId, 9, kSepId, kPadId, kPadId}, 6),
      make_input({kClsId, 10, kSepId, 11, 12, kSepId}, 6),
      make_input({kClsId, 13, 14, 15, kSepId, 16, kSepId, kPadId}, 7),
  };
  std::vector<float> labels = {1.0f, 0.0f, 1.0f};

  GradientsT<double> grads = alloc_params<double>(c);
  scorer_bce_loss<double>(params, inputs, labels, &grads);
  auto eval = [&]() { return scorer_bce_loss<double>(params, inputs, labels, nullptr); };
  check_gradients(params, grads, eval, 120, 1234);
}

TEST_CASE("scorer bias gradient equals mean sigmoid error") {
  EncoderConfig c{1, 6, 8, 2, 24, 12, 0.0f};
  ModelParamsT<double> params = init_params<double>(c, 7);
  std::vector<PackedInput> inputs = {
      make_input({kClsId, 6, kSepId, 7, kSepId, kPadId}, 5),
      make_input({kClsId, 8, 9, kSepId, 10, kSepId}, 6),
      make_input({kClsId, 11, kSepId, 12, kSepId, kPadId}, 5),
      make_input({kClsId, 13, kSepId, 14, kSepId, kPadId}, 5),
  };
  std::vector<float> labels = {1.0f, 0.0f, 0.0f, 1.0f};

  GradientsT<double> grads = alloc_params<double>(c);
  scorer_bce_loss<double>(params, inputs, labels, &grads);

  double expected = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    Mat<double> hidden = forward(params, inputs[i]);
    expected += sigmoid(scorer_logit(params, hidden)) - labels[i];
  }
  expected /= static_cast<double>(inputs.size());
  CHECK(grads.scorer_b[0] == Catch::Approx(expected).margin(1e-10));
}

TEST_CASE("masked-LM gradients match finite differences") {
  EncoderConfig c{2, 8, 12, 2, 24, 12, 0.0f};
  ModelParamsT<double> params = init_params<double>(c, 55);
  Rng mask_rng(5);
  std::vector<MaskedExample> batch;
  batch.push_back(
      mask_sentence(make_input({kClsId, 6, 7, 8, 9, 10, kSepId, kPadId}, 7), 0.3, mask_rng));
  batch.push_back(mask_sentence(
      make_input({kClsId, 11, 12, 13, kSepId, kPadId, kPadId, kPadId}, 5), 0.3, mask_rng));

  GradientsT<double> grads = alloc_params<double>(c);
  mlm_ce_loss_and_grads<double>(params, batch, &grads);
  auto eval = [&]() { return mlm_ce_loss_and_grads<double>(params, batch, nullptr); };
  check_gradients(params, grads, eval, 120, 4321);
}

TEST_CASE("distillation gradients match finite differences, both position modes") {
  EncoderConfig teacher_cfg{1, 4, 8, 1, 20, 12, 0.0f};
  EncoderConfig student_cfg{2, 8, 12, 2, 20, 12, 0.0f};
  ModelParamsT<double> teacher = init_params<double>(teacher_cfg, 17);
  ModelParamsT<double> student = init_params<double>(student_cfg, 18);

  Rng mask_rng(9);
  std::vector<MaskedExample> batch;
  batch.push_back(mask_sentence(make_input({kClsId, 6, 7, 8, kSepId, kPadId}, 5), 0.2, mask_rng));
  batch.push_back(
      mask_sentence(make_input({kClsId, 9, 10, kSepId, kPadId, kPadId}, 4), 0.2, mask_rng));

  for (LossPositions mode : {LossPositions::all_tokens, LossPositions::masked_only}) {
    DistillConfig cfg;
    cfg.temperature = 10.0;
    cfg.loss_positions = mode;
    GradientsT<double> grads = alloc_params<double>(student_cfg);
    distill_loss_and_grads<double>(teacher, student, batch, cfg, &grads);
    auto eval = [&]() {
      return distill_loss_and_grads<double>(teacher, student, batch, cfg, nullptr);
    };
    check_gradients(student, grads, eval, 100, 777 + static_cast<uint64_t>(mode));
  }
}

TEST_CASE("gradients flow into used embedding rows only") {
  EncoderConfig c{1, 6, 8, 2, 24, 12, 0.0f};
  ModelParamsT<double> params = init_params<double>(c, 3);
  std::vector<PackedInput> inputs = {make_input({kClsId, 9, kSepId, 10, kSepId, kPadId}, 5)};
  std::vector<float> labels = {1.0f};
  GradientsT<double> grads = alloc_params<double>(c);
  scorer_bce_loss<double>(params, inputs, labels, &grads);

  double used = 0.0, unused = 0.0;
  for (int j = 0; j < c.hidden; ++j) {
    used += std::abs(grads.tok_emb.at(9, j));
    unused += std::abs(grads.tok_emb.at(15, j));
  }
  CHECK(used > 0.0);
  CHECK(unused == 0.0);
}

TEST_CASE("optimizer: zero gradients leave parameters unchanged") {
  EncoderConfig c{1, 4, 8, 1, 20, 12, 0.0f};
  ModelParams p = init_params(c, 77);
  ModelParams before = p;
  Gradients zeros = zeros_like(p);
  AdamState state = init_adam_state(p);
  optimizer_step(p, zeros, state, OptimizerHyper{});
  bool same = true;
  visit_tensors(p, [&](const char* name, float* d, size_t n, bool) {
    float* other = nullptr;
    visit_tensors(before, [&](const char* name2, float* d2, size_t n2, bool) {
      if (std::string(name) == name2 && n == n2) other = d2;
    });
    for (size_t i = 0; i < n; ++i)
      if (d[i] != other[i]) same = false;
  });
  CHECK(same);
}

TEST_CASE("optimizer: clipping rescales the update to the clip norm") {
  EncoderConfig c{0, 4, 8, 1, 6, 4, 0.0f};
  ModelParams a = init_params(c, 5);
  ModelParams b = a;

  // gradient of global norm 100, and the same gradient pre-scaled to norm 1
  Gradients g_big = zeros_like(a);
  Gradients g_unit = zeros_like(a);
  size_t total = 0;
  visit_tensors(g_big, [&](const char*, float*, size_t n, bool) { total += n; });
  double per_coord = 100.0 / std::sqrt(static_cast<double>(total));
  visit_tensors(g_big, [&](const char*, float* d, size_t n, bool) {
    for (size_t i = 0; i < n; ++i) d[i] = static_cast<float>(per_coord);
  });
  visit_tensors(g_unit, [&](const char*, float* d, size_t n, bool) {
    for (size_t i = 0; i < n; ++i) d[i] = static_cast<float>(per_coord / 100.0);
  });

  OptimizerHyper clip1;
  clip1.clip_norm = 1.0;
  OptimizerHyper noclip;
  noclip.clip_norm = 0.0;

  AdamState sa = init_adam_state(a), sb = init_adam_state(b);
  optimizer_step(a, g_big, sa, clip1);
  optimizer_step(b, g_unit, sb, noclip);
  visit_tensors(a, [&](const char* name, float* d, size_t n, bool) {
    float* other = nullptr;
    visit_tensors(b, [&](const char* name2, float* d2, size_t n2, bool) {
      if (std::string(name) == name2 && n == n2) other = d2;
    });
    for (size_t i = 0; i < n; ++i) CHECK(d[i] == Catch::Approx(other[i]).margin(1e-6));
  });
}

TEST_CASE("optimizer matches the hand-iterated scalar recurrence") {
  EncoderConfig c{0, 4, 8, 1, 6, 4, 0.0f};
  ModelParams p = init_params(c, 2);
  p.scorer_b[0] = 0.5f;
  Gradients g = zeros_like(p);
  g.scorer_b[0] = 0.3f;

  OptimizerHyper hyper;
  hyper.lr = 0.01;
  hyper.clip_norm = 0.0;
  AdamState state = init_adam_state(p);
  optimizer_step(p, g, state, hyper);
  optimizer_step(p, g, state, hyper);

  // same recurrence in plain double with float rounding at each store
  float pv = 0.5f, m = 0.0f, v = 0.0f;
  const double grad = 0.3;
  for (int t = 1; t <= 2; ++t) {
    double mi = 0.9 * m + 0.1 * grad;
    double vi = 0.999 * v + 0.001 * grad * grad;
    m = static_cast<float>(mi);
    v = static_cast<float>(vi);
    double alpha = 0.01 * std::sqrt(1.0 - std::pow(0.999, t)) / (1.0 - std::pow(0.9, t));
    pv = static_cast<float>(pv - alpha * mi / (std::sqrt(vi) + 1e-8));
  }
  CHECK(p.scorer_b[0] == Catch::Approx(pv).margin(1e-8));
}

TEST_CASE("optimizer rejects mismatched trees") {
  EncoderConfig c{1, 4, 8, 1, 20, 12, 0.0f};
  EncoderConfig c2{2, 4, 8, 1, 20, 12, 0.0f};
  ModelParams p = init_params(c, 1);
  Gradients g = alloc_params<float>(c2);
  AdamState state = init_adam_state(p);
  CHECK_THROWS_MATCHES(optimizer_step(p, g, state, OptimizerHyper{}), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == Errc::shape_mismatch;
                       }));
}
