// Adam with global gradient-norm clipping. Per-coordinate arithmetic runs
// in double and is rounded once on store, so two runs of the same binary
// produce identical parameters.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dstd/encoder.hpp"
#include "dstd/error.hpp"

namespace dstd {

struct OptimizerHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

template <typename T>
struct AdamStateT {
  GradientsT<T> m;
  GradientsT<T> v;
  int64_t step = 0;
};

using AdamState = AdamStateT<float>;

template <typename T>
AdamStateT<T> init_adam_state(const ModelParamsT<T>& params) {
  return AdamStateT<T>{zeros_like(params), zeros_like(params), 0};
}

template <typename T>
double global_grad_norm(const GradientsT<T>& grads) {
  double sq = 0.0;
  visit_tensors(const_cast<GradientsT<T>&>(grads), [&](const char*, T* data, size_t n, bool) {
    for (size_t i = 0; i < n; ++i) sq += static_cast<double>(data[i]) * data[i];
  });
  return std::sqrt(sq);
}

template <typename T>
void optimizer_step(ModelParamsT<T>& params, const GradientsT<T>& grads, AdamStateT<T>& state,
                    const OptimizerHyper& hyper) {
  require(params.config.hidden == grads.config.hidden &&
              params.config.layers == grads.config.layers &&
              params.config.vocab_size == grads.config.vocab_size,
          Errc::shape_mismatch, "gradient tree does not match parameter tree");

  double clip_scale = 1.0;
  if (hyper.clip_norm > 0.0) {
    double norm = global_grad_norm(grads);
    require(std::isfinite(norm), Errc::non_finite, "gradient norm is not finite");
    if (norm > hyper.clip_norm) clip_scale = hyper.clip_norm / norm;
  }

  state.step += 1;
  double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  double alpha = hyper.lr * std::sqrt(bc2) / bc1;

  // Walk the three trees in lockstep; visit order is identical by
  // construction.
  struct Cursor {
    std::vector<std::pair<T*, size_t>> spans;
  };
  Cursor pc, gc, mc, vc;
  visit_tensors(params, [&](const char*, T* d, size_t n, bool) { pc.spans.push_back({d, n}); });
  visit_tensors(const_cast<GradientsT<T>&>(grads),
                [&](const char*, T* d, size_t n, bool) { gc.spans.push_back({d, n}); });
  visit_tensors(state.m, [&](const char*, T* d, size_t n, bool) { mc.spans.push_back({d, n}); });
  visit_tensors(state.v, [&](const char*, T* d, size_t n, bool) { vc.spans.push_back({d, n}); });
  require(pc.spans.size() == gc.spans.size(), Errc::shape_mismatch, "tensor count mismatch");

  for (size_t s = 0; s < pc.spans.size(); ++s) {
    auto [p, np] = pc.spans[s];
    auto [g, ng] = gc.spans[s];
    auto [m, nm] = mc.spans[s];
    auto [v, nv] = vc.spans[s];
    require(np == ng && np == nm && np == nv, Errc::shape_mismatch,
            "tensor size mismatch in optimizer step");
    for (size_t i = 0; i < np; ++i) {
      double gi = static_cast<double>(g[i]) * clip_scale;
      double mi = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
      double vi = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      p[i] = static_cast<T>(p[i] - alpha * mi / (std::sqrt(vi) + hyper.eps));
    }
  }
}

}  // namespace dstd
