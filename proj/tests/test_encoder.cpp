#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dstd/encoder.hpp"
#include "dstd/rng.hpp"
#include "dstd/tokenizer.hpp"

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

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.layers = 1;
  c.hidden = 4;
  c.ffn = 8;
  c.heads = 1;
  c.vocab_size = 20;
  c.max_positions = 16;
  return c;
}

}  // namespace

TEST_CASE("init_params is deterministic and seed-sensitive") {
  EncoderConfig c = tiny_config();
  ModelParams a = init_params(c, 42);
  ModelParams b = init_params(c, 42);
  ModelParams d = init_params(c, 43);

  bool identical = true, differs = false;
  visit_tensors(a, [&](const char* name, float* data, size_t n, bool) {
    float* other = nullptr;
    visit_tensors(b, [&](const char* name2, float* data2, size_t n2, bool) {
      if (std::string(name) == name2 && n == n2) other = data2;
    });
    REQUIRE(other != nullptr);
    for (size_t i = 0; i < n; ++i)
      if (data[i] != other[i]) identical = false;
  });
  CHECK(identical);

  visit_tensors(a, [&](const char* name, float* data, size_t n, bool) {
    float* other = nullptr;
    visit_tensors(d, [&](const char* name2, float* data2, size_t n2, bool) {
      if (std::string(name) == name2 && n == n2) other = data2;
    });
    for (size_t i = 0; i < n; ++i)
      if (data[i] != other[i]) differs = true;
  });
  CHECK(differs);

  for (float g : a.layers[0].ln1_gain) CHECK(g == 1.0f);
  for (float g : a.layers[0].ln2_gain) CHECK(g == 1.0f);
  for (float b2 : a.layers[0].bq) CHECK(b2 == 0.0f);

  // truncated normal: everything within 2 sigma of 0.02
  visit_tensors(a, [&](const char* name, float* data, size_t n, bool) {
    std::string nm(name);
    if (nm.find("emb") == std::string::npos && nm.find("w") == std::string::npos) return;
    for (size_t i = 0; i < n; ++i) CHECK(std::abs(data[i]) <= 0.04f + 1e-6f);
  });
}

TEST_CASE("init rejects indivisible head count") {
  EncoderConfig c = tiny_config();
  c.heads = 3;
  CHECK_THROWS_MATCHES(init_params(c, 1), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == Errc::invalid_config;
                       }));
}

TEST_CASE("count_params matches the closed form and the paper configs") {
  auto closed_form = [](const EncoderConfig& c) {
    int64_t d1 = c.hidden, d2 = c.ffn, v = c.vocab_size, p = c.max_positions, n = c.layers;
    int64_t emb = (v + 2 + p) * d1;
    int64_t per_layer = 4 * d1 * d1 + 2 * d1 * d2 + 9 * d1 + d2;
    return emb + n * per_layer;
  };

  EncoderConfig teacher{12, 768, 3072, 12, 30522, 512, 0.0f};
  EncoderConfig student{8, 256, 1024, 8, 30522, 512, 0.0f};
  int64_t teacher_n = count_params(teacher);
  int64_t student_n = count_params(student);
  CHECK(teacher_n == closed_form(teacher));
  CHECK(student_n == closed_form(student));
  CHECK(std::abs(teacher_n - 110'000'000.0) / 110'000'000.0 < 0.02);
  CHECK(std::abs(student_n - 14'000'000.0) / 14'000'000.0 < 0.05);

  EncoderConfig degenerate{0, 4, 8, 1, 10, 4, 0.0f};
  CHECK(count_params(degenerate) == (10 + 2 + 4) * 4);
  CHECK(count_head_params(degenerate) == 4 * 10 + 10 + 4 + 1);

  // shape-tree congruence with an allocated model
  EncoderConfig c = tiny_config();
  ModelParams m = init_params(c, 7);
  int64_t total = 0;
  visit_tensors(m, [&](const char*, float*, size_t n, bool is_head) {
    if (!is_head) total += n;
  });
  CHECK(total == count_params(c));
}

TEST_CASE("stable_softmax closed forms") {
  std::vector<double> a = stable_softmax(std::vector<double>{0.0, 0.0}, 10.0);
  CHECK(a[0] == Catch::Approx(0.5).margin(1e-12));
  CHECK(a[1] == Catch::Approx(0.5).margin(1e-12));

  std::vector<double> b = stable_softmax(std::vector<double>{10.0, 0.0}, 10.0);
  double e = std::exp(1.0);
  CHECK(b[0] == Catch::Approx(e / (e + 1.0)).margin(1e-4));
  CHECK(b[1] == Catch::Approx(1.0 / (e + 1.0)).margin(1e-4));

  std::vector<double> c = stable_softmax(std::vector<double>{1000.0, 0.0}, 1.0);
  CHECK(std::isfinite(c[0]));
  CHECK(c[0] == Catch::Approx(1.0).margin(1e-9));
  CHECK(c[1] == Catch::Approx(0.0).margin(1e-9));

  double sum = 0.0;
  std::vector<double> d = stable_softmax(std::vector<double>{3.0, -2.0, 0.5, 9.0}, 2.5);
  for (double v : d) sum += v;
  CHECK(sum == Catch::Approx(1.0).margin(1e-9));

  CHECK_THROWS_MATCHES(
      stable_softmax(std::vector<double>{std::numeric_limits<double>::infinity()}, 1.0), Error,
      Catch::Matchers::Predicate<Error>(
          [](const Error& e) { return e.code() == Errc::non_finite; }));
}

TEST_CASE("forward is deterministic without dropout") {
  EncoderConfig c = tiny_config();
  c.layers = 2;
  ModelParams p = init_params(c, 5);
  PackedInput in = make_input({kClsId, 7, 9, kSepId, kPadId, kPadId}, 4);
  HiddenStates h1 = forward(p, in);
  HiddenStates h2 = forward(p, in);
  CHECK(h1.data == h2.data);
  CHECK(h1.rows == in.length());
  CHECK(h1.cols == c.hidden);
}

TEST_CASE("attention rows are normalized and padding gets no mass") {
  EncoderConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.ffn = 32;
  c.heads = 4;
  c.vocab_size = 30;
  c.max_positions = 12;
  ModelParams p = init_params(c, 11);
  PackedInput in = make_input({kClsId, 6, 7, 8, 9, kSepId, kPadId, kPadId, kPadId, kPadId}, 6);
  ForwardCache<float> cache = forward_cached(p, in);
  int real = in.real_length();
  for (const auto& layer : cache.layers) {
    for (const auto& probs : layer.attn_probs) {
      for (int i = 0; i < real; ++i) {
        double sum = 0.0, pad_mass = 0.0;
        for (int j = 0; j < probs.cols; ++j) {
          sum += probs.at(i, j);
          if (j >= real) pad_mass += probs.at(i, j);
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-6));
        CHECK(pad_mass <= 1e-6);
      }
    }
  }
}

TEST_CASE("outputs at real positions ignore padding ids", "[property]") {
  EncoderConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.ffn = 16;
  c.heads = 2;
  c.vocab_size = 40;
  c.max_positions = 10;
  ModelParams p = init_params(c, 13);
  Rng rng(77);
  for (int trial = 0; trial < 25; ++trial) {
    int real = 2 + static_cast<int>(rng.below(6));
    std::vector<int> ids(10, kPadId);
    ids[0] = kClsId;
    for (int i = 1; i < real - 1; ++i) ids[i] = 5 + static_cast<int>(rng.below(30));
    ids[real - 1] = kSepId;
    PackedInput a = make_input(ids, real);
    PackedInput b = a;
    for (int i = real; i < 10; ++i) b.ids[i] = 5 + static_cast<int>(rng.below(30));
    HiddenStates ha = forward(p, a);
    HiddenStates hb = forward(p, b);
    for (int i = 0; i < real; ++i)
      for (int j = 0; j < c.hidden; ++j)
        CHECK(std::abs(ha.at(i, j) - hb.at(i, j)) <= 1e-6f);
  }
}

TEST_CASE("layer norm output has zero mean unit variance before gain") {
  EncoderConfig c;
  c.layers = 1;
  c.hidden = 32;
  c.ffn = 64;
  c.heads = 4;
  c.vocab_size = 25;
  c.max_positions = 8;
  ModelParams p = init_params(c, 3);
  PackedInput in = make_input({kClsId, 5, 6, 7, 8, 9, 10, kSepId}, 8);
  ForwardCache<float> cache = forward_cached(p, in);
  const Mat<float>& xhat = cache.layers[0].ln1_xhat;
  for (int i = 0; i < xhat.rows; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < xhat.cols; ++j) mean += xhat.at(i, j);
    mean /= xhat.cols;
    for (int j = 0; j < xhat.cols; ++j) var += (xhat.at(i, j) - mean) * (xhat.at(i, j) - mean);
    var /= xhat.cols;
    CHECK(mean == Catch::Approx(0.0).margin(1e-6));
    CHECK(var == Catch::Approx(1.0).margin(1e-4));
  }
}

TEST_CASE("single attention layer matches a hand-rolled oracle") {
  // Independent double-precision reimplementation with plain loops.
  EncoderConfig c = tiny_config();  // N=1, d1=4, h=1, d2=8
  ModelParamsT<double> p = init_params<double>(c, 21);
  PackedInput in = make_input({kClsId, 7, 11}, 3);
  const int m = 3, d1 = 4, d2 = 8;

  auto vecmat = [&](const std::vector<std::vector<double>>& x, const Mat<double>& w,
                    const Vec<double>& b) {
    std::vector<std::vector<double>> y(x.size(), std::vector<double>(w.cols, 0.0));
    for (size_t i = 0; i < x.size(); ++i)
      for (int j = 0; j < w.cols; ++j) {
        double acc = b[j];
        for (size_t k = 0; k < x[i].size(); ++k) acc += x[i][k] * w.at(static_cast<int>(k), j);
        y[i][j] = acc;
      }
    return y;
  };
  auto layernorm = [&](const std::vector<std::vector<double>>& x, const Vec<double>& gain,
                       const Vec<double>& bias) {
    std::vector<std::vector<double>> y = x;
    for (auto& row : y) {
      double mean = 0.0;
      for (double v : row) mean += v;
      mean /= row.size();
      double var = 0.0;
      for (double v : row) var += (v - mean) * (v - mean);
      var /= row.size();
      for (size_t j = 0; j < row.size(); ++j)
        row[j] = (row[j] - mean) / std::sqrt(var + 1e-12) * gain[j] + bias[j];
    }
    return y;
  };

  // embeddings, standardized per position
  std::vector<std::vector<double>> x(m, std::vector<double>(d1));
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < d1; ++j)
      x[i][j] = p.tok_emb.at(in.ids[i], j) + p.seg_emb.at(0, j) + p.pos_emb.at(i, j);
    double mean = 0.0;
    for (double v : x[i]) mean += v;
    mean /= d1;
    double var = 0.0;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= d1;
    for (int j = 0; j < d1; ++j) x[i][j] = (x[i][j] - mean) / std::sqrt(var + 1e-12);
  }

  const LayerParamsT<double>& lp = p.layers[0];
  auto q = vecmat(x, lp.wq, lp.bq), k = vecmat(x, lp.wk, lp.bk), v = vecmat(x, lp.wv, lp.bv);
  // scores, softmax (h=1, dk=4)
  std::vector<std::vector<double>> probs(m, std::vector<double>(m));
  for (int i = 0; i < m; ++i) {
    double mx = -1e300;
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      for (int t = 0; t < d1; ++t) s += q[i][t] * k[j][t];
      probs[i][j] = s / 2.0;  // sqrt(4) = 2
      mx = std::max(mx, probs[i][j]);
    }
    double sum = 0.0;
    for (int j = 0; j < m; ++j) {
      probs[i][j] = std::exp(probs[i][j] - mx);
      sum += probs[i][j];
    }
    for (int j = 0; j < m; ++j) probs[i][j] /= sum;
  }
  std::vector<std::vector<double>> ctx(m, std::vector<double>(d1, 0.0));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      for (int t = 0; t < d1; ++t) ctx[i][t] += probs[i][j] * v[j][t];
  auto attn = vecmat(ctx, lp.wo, lp.bo);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d1; ++j) attn[i][j] += x[i][j];
  auto y1 = layernorm(attn, lp.ln1_gain, lp.ln1_bias);
  auto ff1 = vecmat(y1, lp.ff1_w, lp.ff1_b);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d2; ++j)
      ff1[i][j] = 0.5 * ff1[i][j] * (1.0 + std::erf(ff1[i][j] / std::sqrt(2.0)));
  auto ff2 = vecmat(ff1, lp.ff2_w, lp.ff2_b);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d1; ++j) ff2[i][j] += y1[i][j];
  auto expected = layernorm(ff2, lp.ln2_gain, lp.ln2_bias);

  HiddenStatesT<double> actual = forward(p, in);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d1; ++j)
      CHECK(actual.at(i, j) == Catch::Approx(expected[i][j]).margin(1e-5));
}

TEST_CASE("mlm logits") {
  EncoderConfig c = tiny_config();
  ModelParamsT<double> p = init_params<double>(c, 31);
  PackedInput in = make_input({kClsId, 6, 8, kSepId}, 4);
  HiddenStatesT<double> h = forward(p, in);

  Mat<double> logits = mlm_logits(p, h);
  CHECK(logits.rows == in.length());
  CHECK(logits.cols == c.vocab_size);

  // independent dense multiply
  for (int i = 0; i < logits.rows; ++i)
    for (int j = 0; j < logits.cols; ++j) {
      double acc = p.mlm_b[j];
      for (int t = 0; t < c.hidden; ++t) acc += h.at(i, t) * p.mlm_w.at(t, j);
      CHECK(logits.at(i, j) == Catch::Approx(acc).margin(1e-6));
    }

  // zero head -> zero logits
  p.mlm_w.zero();
  std::fill(p.mlm_b.begin(), p.mlm_b.end(), 0.0);
  Mat<double> z = mlm_logits(p, h);
  for (double v : z.data) CHECK(v == 0.0);

  // restricted positions agree with the full projection
  ModelParamsT<double> p2 = init_params<double>(c, 32);
  Mat<double> full = mlm_logits(p2, h);
  Mat<double> some = mlm_logits_at(p2, h, {1, 3});
  for (int j = 0; j < c.vocab_size; ++j) {
    CHECK(some.at(0, j) == Catch::Approx(full.at(1, j)).margin(1e-12));
    CHECK(some.at(1, j) == Catch::Approx(full.at(3, j)).margin(1e-12));
  }
}

TEST_CASE("forward validates input") {
  EncoderConfig c = tiny_config();
  ModelParams p = init_params(c, 1);
  PackedInput too_long = make_input(std::vector<int>(17, kClsId), 17);
  CHECK_THROWS_MATCHES(forward(p, too_long), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == Errc::input_too_long;
                       }));
  PackedInput bad_id = make_input({kClsId, 25, kSepId}, 3);
  CHECK_THROWS_MATCHES(forward(p, bad_id), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == Errc::id_out_of_range;
                       }));
}

TEST_CASE("dropout only acts in train mode and rescales") {
  EncoderConfig c = tiny_config();
  c.dropout_rate = 0.5f;
  ModelParams p = init_params(c, 9);
  PackedInput in = make_input({kClsId, 7, 9, kSepId}, 4);

  HiddenStates eval1 = forward(p, in, false);
  HiddenStates eval2 = forward(p, in, false);
  CHECK(eval1.data == eval2.data);

  Rng rng1(123), rng2(123), rng3(321);
  HiddenStates t1 = forward(p, in, true, &rng1);
  HiddenStates t2 = forward(p, in, true, &rng2);
  HiddenStates t3 = forward(p, in, true, &rng3);
  CHECK(t1.data == t2.data);   // same rng stream, same masks
  CHECK(t1.data != t3.data);   // different stream
  CHECK(t1.data != eval1.data);
}

TEST_CASE("N = 0 returns the standardized embeddings") {
  EncoderConfig c = tiny_config();
  c.layers = 0;
  ModelParams p = init_params(c, 2);
  PackedInput in = make_input({kClsId, 3, kSepId}, 3);
  HiddenStates h = forward(p, in);
  std::vector<double> raw(c.hidden);
  double mean = 0.0;
  for (int j = 0; j < c.hidden; ++j) {
    raw[j] = p.tok_emb.at(3, j) + p.seg_emb.at(0, j) + p.pos_emb.at(1, j);
    mean += raw[j];
  }
  mean /= c.hidden;
  double var = 0.0;
  for (double v : raw) var += (v - mean) * (v - mean);
  var /= c.hidden;
  for (int j = 0; j < c.hidden; ++j)
    CHECK(h.at(1, j) ==
          Catch::Approx((raw[j] - mean) / std::sqrt(var + 1e-12)).margin(1e-5));
}
