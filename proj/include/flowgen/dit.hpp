#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "flowgen/codec.hpp"
#include "flowgen/rng.hpp"
#include "flowgen/tensor.hpp"

namespace flowgen::dit {

// ---------------------------------------------------------------------------
// Conditioning modes for reference latents (editing)
// ---------------------------------------------------------------------------

enum class CondMode : int { none = 0, cross_attn, noise_concat, both };

const char* cond_mode_name(CondMode m);
CondMode cond_mode_from_name(const std::string& name);

inline bool uses_cross(CondMode m) {
  return m == CondMode::cross_attn || m == CondMode::both;
}
inline bool uses_concat(CondMode m) {
  return m == CondMode::noise_concat || m == CondMode::both;
}

constexpr int kPositions = codec::kLatentSide * codec::kLatentSide;  // 64
constexpr int kChannels = codec::kLatentChannels;

struct DiTConfig {
  int d_model = 128;
  int layers = 4;
  int heads = 4;
  int ffn_mult = 4;
  int channels = kChannels;
  int cond_width = 128;                // AR hidden width
  int max_positions = 2 * kPositions;  // composite input doubles the rows
  int max_context = 2 * kPositions;
};

// ---------------------------------------------------------------------------
// Rectified-flow primitives: x_t = (1-t) x0 + t x1, v = x1 - x0
// (t = 0 is noise, t = 1 is data)
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> interpolate(TapeT<T>* tape, TensorT<T> x0, TensorT<T> x1, double t) {
  check(x0.shape() == x1.shape(), "interpolate: shape mismatch " +
                                      shape_str(x0.shape()) + " vs " +
                                      shape_str(x1.shape()));
  check(t >= 0.0 && t <= 1.0, "interpolate: t outside [0,1]");
  return add(tape, scale(tape, x0, static_cast<T>(1.0 - t)),
             scale(tape, x1, static_cast<T>(t)));
}

template <class T>
TensorT<T> velocity_target(TapeT<T>* tape, TensorT<T> x0, TensorT<T> x1) {
  check(x0.shape() == x1.shape(), "velocity_target: shape mismatch " +
                                      shape_str(x0.shape()) + " vs " +
                                      shape_str(x1.shape()));
  return sub(tape, x1, x0);
}

// ---------------------------------------------------------------------------
// DiT: self-attention over latent positions, cross-attention to the
// condition tokens, timestep via sinusoidal embedding -> MLP added per token
// ---------------------------------------------------------------------------

template <class T>
struct DitModelT {
  DiTConfig cfg;

  TensorT<T> in_w, in_b;              // [d, C]
  TensorT<T> pos_emb;                 // [max_positions, d]
  TensorT<T> t_w1, t_b1, t_w2, t_b2;  // timestep MLP
  TensorT<T> cond_w, cond_b;          // [d, cond_width], AR hidden projection
  TensorT<T> edit_w, edit_b;          // [d, C], per-token ref-latent projection

  struct Layer {
    TensorT<T> sq, sk, sv, so;  // self-attention
    TensorT<T> cq, ck, cv, co;  // cross-attention
    TensorT<T> g1, g2, g3;      // rmsnorm gains
    TensorT<T> w1, w2;          // mlp
  };
  std::vector<Layer> layers;
  TensorT<T> gf;
  TensorT<T> out_w, out_b;  // [C, d]

  void init(Rng& rng, DiTConfig config = {}) {
    cfg = config;
    check(cfg.d_model % cfg.heads == 0, "dit: d_model must divide into heads");
    T s = T(0.02);
    int d = cfg.d_model;
    in_w = TensorT<T>::randn({d, cfg.channels}, rng, s, true);
    in_b = TensorT<T>::zeros({d}, true);
    pos_emb = TensorT<T>::randn({cfg.max_positions, d}, rng, s, true);
    t_w1 = TensorT<T>::randn({d, d}, rng, s, true);
    t_b1 = TensorT<T>::zeros({d}, true);
    t_w2 = TensorT<T>::randn({d, d}, rng, s, true);
    t_b2 = TensorT<T>::zeros({d}, true);
    cond_w = TensorT<T>::randn({d, cfg.cond_width}, rng, s, true);
    cond_b = TensorT<T>::zeros({d}, true);
    edit_w = TensorT<T>::randn({d, cfg.channels}, rng, s, true);
    edit_b = TensorT<T>::zeros({d}, true);
    layers.clear();
    for (int l = 0; l < cfg.layers; ++l) {
      Layer lay;
      for (TensorT<T>* w : {&lay.sq, &lay.sk, &lay.sv, &lay.so, &lay.cq, &lay.ck,
                            &lay.cv, &lay.co})
        *w = TensorT<T>::randn({d, d}, rng, s, true);
      lay.g1 = TensorT<T>::full({d}, T(1), true);
      lay.g2 = TensorT<T>::full({d}, T(1), true);
      lay.g3 = TensorT<T>::full({d}, T(1), true);
      lay.w1 = TensorT<T>::randn({cfg.ffn_mult * d, d}, rng, s, true);
      lay.w2 = TensorT<T>::randn({d, cfg.ffn_mult * d}, rng, s, true);
      layers.push_back(lay);
    }
    gf = TensorT<T>::full({d}, T(1), true);
    out_w = TensorT<T>::randn({cfg.channels, d}, rng, s, true);
    out_b = TensorT<T>::zeros({cfg.channels}, true);
  }

  std::vector<NamedParamT<T>> named_params(const std::string& prefix = "dit") {
    std::vector<NamedParamT<T>> out = {
        {prefix + ".in_w", in_w},       {prefix + ".in_b", in_b},
        {prefix + ".pos_emb", pos_emb}, {prefix + ".t_w1", t_w1},
        {prefix + ".t_b1", t_b1},       {prefix + ".t_w2", t_w2},
        {prefix + ".t_b2", t_b2},       {prefix + ".cond_w", cond_w},
        {prefix + ".cond_b", cond_b},   {prefix + ".edit_w", edit_w},
        {prefix + ".edit_b", edit_b},
    };
    for (size_t l = 0; l < layers.size(); ++l) {
      std::string p = prefix + ".layer" + std::to_string(l);
      auto& lay = layers[l];
      out.push_back({p + ".sq", lay.sq});
      out.push_back({p + ".sk", lay.sk});
      out.push_back({p + ".sv", lay.sv});
      out.push_back({p + ".so", lay.so});
      out.push_back({p + ".cq", lay.cq});
      out.push_back({p + ".ck", lay.ck});
      out.push_back({p + ".cv", lay.cv});
      out.push_back({p + ".co", lay.co});
      out.push_back({p + ".g1", lay.g1});
      out.push_back({p + ".g2", lay.g2});
      out.push_back({p + ".g3", lay.g3});
      out.push_back({p + ".w1", lay.w1});
      out.push_back({p + ".w2", lay.w2});
    }
    out.push_back({prefix + ".gf", gf});
    out.push_back({prefix + ".out_w", out_w});
    out.push_back({prefix + ".out_b", out_b});
    return out;
  }

  // sinusoidal timestep basis (host constant; t itself is not differentiated)
  std::vector<T> time_basis(double t) const {
    int d = cfg.d_model;
    int half = d / 2;
    std::vector<T> out(d);
    for (int j = 0; j < half; ++j) {
      double freq = std::pow(10000.0, -static_cast<double>(j) / std::max(1, half - 1));
      double ang = t * 1000.0 * freq;
      out[2 * j] = static_cast<T>(std::sin(ang));
      out[2 * j + 1] = static_cast<T>(std::cos(ang));
    }
    return out;
  }

  // x_tokens [P, C] position-major, context [Cn, d] -> velocity [P, C]
  TensorT<T> velocity(TapeT<T>* tape, TensorT<T> x_tokens, double t,
                      TensorT<T> context) const {
    int P = x_tokens.dim(0);
    check(P <= cfg.max_positions, "dit: too many latent positions");
    check(context.dim(0) <= cfg.max_context, "dit: context too long");
    TensorT<T> x = linear(tape, x_tokens, in_w, in_b);
    x = add(tape, x, slice(tape, pos_emb, 0, 0, P));
    TensorT<T> tb = TensorT<T>::from_data({cfg.d_model}, time_basis(t));
    TensorT<T> temb =
        linear(tape, silu(tape, linear(tape, tb, t_w1, t_b1)), t_w2, t_b2);
    x = add_rowvec(tape, x, temb);
    for (const auto& lay : layers) {
      TensorT<T> h = row_scale(tape, rms_normalize(tape, x), lay.g1);
      TensorT<T> q = split_heads(tape, linear(tape, h, lay.sq), cfg.heads);
      TensorT<T> k = split_heads(tape, linear(tape, h, lay.sk), cfg.heads);
      TensorT<T> v = split_heads(tape, linear(tape, h, lay.sv), cfg.heads);
      TensorT<T> att =
          merge_heads(tape, scaled_dot_product_attention(tape, q, k, v, false));
      x = add(tape, x, linear(tape, att, lay.so));

      TensorT<T> hc = row_scale(tape, rms_normalize(tape, x), lay.g2);
      TensorT<T> cq = split_heads(tape, linear(tape, hc, lay.cq), cfg.heads);
      TensorT<T> ck = split_heads(tape, linear(tape, context, lay.ck), cfg.heads);
      TensorT<T> cv = split_heads(tape, linear(tape, context, lay.cv), cfg.heads);
      TensorT<T> catt =
          merge_heads(tape, scaled_dot_product_attention(tape, cq, ck, cv, false));
      x = add(tape, x, linear(tape, catt, lay.co));

      TensorT<T> m = row_scale(tape, rms_normalize(tape, x), lay.g3);
      m = linear(tape, silu(tape, linear(tape, m, lay.w1)), lay.w2);
      x = add(tape, x, m);
    }
    x = row_scale(tape, rms_normalize(tape, x), gf);
    return linear(tape, x, out_w, out_b);
  }
};

using DitModel = DitModelT<float>;

// ---------------------------------------------------------------------------
// Condition set: projected AR hidden states, with the per-token projected
// reference latent appended in cross_attn/both; concat modes also carry the
// raw reference tokens for the composite model input.
// ---------------------------------------------------------------------------

template <class T>
struct ConditionSetT {
  CondMode mode = CondMode::none;
  TensorT<T> context;     // [64 or 128, d]
  TensorT<T> ref_tokens;  // [64, C] raw reference latent, concat modes only
};

using ConditionSet = ConditionSetT<float>;

template <class T>
ConditionSetT<T> build_condition(TapeT<T>* tape, const DitModelT<T>& model,
                                 TensorT<T> hidden,
                                 std::optional<TensorT<T>> ref_latent,
                                 CondMode mode) {
  check(hidden.rank() == 2 && hidden.dim(0) == kPositions &&
            hidden.dim(1) == model.cfg.cond_width,
        "build_condition: hidden must be [64," +
            std::to_string(model.cfg.cond_width) + "], got " +
            shape_str(hidden.shape()));
  if (mode != CondMode::none)
    check(ref_latent.has_value(), std::string("build_condition: mode ") +
                                      cond_mode_name(mode) +
                                      " requires a reference latent");
  ConditionSetT<T> out;
  out.mode = mode;
  TensorT<T> base = linear(tape, hidden, model.cond_w, model.cond_b);
  if (uses_cross(mode)) {
    TensorT<T> edit = linear(tape, *ref_latent, model.edit_w, model.edit_b);
    out.context = concat(tape, {base, edit}, 0);
  } else {
    out.context = base;
  }
  if (uses_concat(mode)) out.ref_tokens = *ref_latent;
  return out;
}

// ---------------------------------------------------------------------------
// Noise plan: the model input and scored-region mask for one training draw.
// Concat modes stack the reference rows above the noised rows along the
// height axis (positions 0..63 reference, 64..127 noise path).
// ---------------------------------------------------------------------------

template <class T>
struct NoisePlanT {
  double t = 0;
  TensorT<T> x0;           // [64, C] standard normal
  TensorT<T> model_input;  // [64 or 128, C]
  std::vector<uint8_t> region_mask;  // over model-output elements; empty = all
  int noise_row_start = 0;
};

template <class T>
NoisePlanT<T> build_noise_plan(TapeT<T>* tape, TensorT<T> x0, TensorT<T> x1,
                               double t, const ConditionSetT<T>& cond) {
  check(x0.shape() == x1.shape() &&
            x0.shape() == std::vector<int>({kPositions, kChannels}),
        "build_noise_plan: latents must be [64,C]");
  NoisePlanT<T> plan;
  plan.t = t;
  plan.x0 = x0;
  TensorT<T> xt = interpolate(tape, x0, x1, t);
  if (uses_concat(cond.mode)) {
    check(cond.ref_tokens.defined(), "build_noise_plan: missing reference tokens");
    plan.model_input = concat(tape, {cond.ref_tokens, xt}, 0);
    plan.noise_row_start = kPositions;
    plan.region_mask.assign(static_cast<size_t>(2) * kPositions * kChannels, 0);
    for (size_t i = static_cast<size_t>(kPositions) * kChannels;
         i < plan.region_mask.size(); ++i)
      plan.region_mask[i] = 1;
  } else {
    plan.model_input = xt;
    plan.noise_row_start = 0;
    plan.region_mask.clear();
  }
  return plan;
}

// velocity callable: (tape, model_input, t) -> velocity over the input rows
template <class T>
using VelocityFn = std::function<TensorT<T>(TapeT<T>*, TensorT<T>, double)>;

template <class T>
VelocityFn<T> model_velocity(const DitModelT<T>& model, const ConditionSetT<T>& cond) {
  TensorT<T> ctx = cond.context;
  const DitModelT<T>* m = &model;
  return [m, ctx](TapeT<T>* tape, TensorT<T> input, double t) {
    return m->velocity(tape, input, t, ctx);
  };
}

// rectified-flow loss: MSE between predicted velocity and (x1 - x0), averaged
// over the noise region only (all positions when no region mask applies).
// Masked-out rows never enter the loss.
template <class T>
TensorT<T> flow_loss_fn(TapeT<T>* tape, const VelocityFn<T>& velocity_fn,
                        TensorT<T> x1, const ConditionSetT<T>& cond, double t,
                        TensorT<T> x0) {
  check(t > 0.0 && t <= 1.0, "flow_loss: t must lie in (0,1]");
  NoisePlanT<T> plan = build_noise_plan(tape, x0, x1, t, cond);
  TensorT<T> pred = velocity_fn(tape, plan.model_input, t);
  check(pred.shape() == plan.model_input.shape(),
        "flow_loss: velocity shape mismatch");
  TensorT<T> target = velocity_target(tape, x0, x1);
  if (plan.region_mask.empty()) return mean_squared_error(tape, pred, target);
  TensorT<T> pred_noise = slice(tape, pred, 0, plan.noise_row_start, kPositions);
  return mean_squared_error(tape, pred_noise, target);
}

template <class T>
TensorT<T> flow_loss(TapeT<T>* tape, const DitModelT<T>& model, TensorT<T> x1,
                     const ConditionSetT<T>& cond, double t, TensorT<T> x0) {
  return flow_loss_fn(tape, model_velocity(model, cond), x1, cond, t, x0);
}

// ---------------------------------------------------------------------------
// Samplers. Both integrate on the right-endpoint grid t_k = (k+1)/steps,
// which never evaluates at t = 0 (the SDE drift is singular there).
// ---------------------------------------------------------------------------

struct SigmaSchedule {
  // sigma_t = clip(a * sqrt(t / (1-t)), 0, max_sigma); a = 0 turns the SDE
  // into the deterministic ODE
  double a = 0.3;
  double max_sigma = 1.0;

  double operator()(double t) const {
    if (a == 0.0) return 0.0;
    double s = (t >= 1.0) ? max_sigma : a * std::sqrt(t / (1.0 - t));
    return std::min(max_sigma, std::max(0.0, s));
  }
};

codec::LatentGrid tokens_to_latent(const std::vector<float>& position_major);

// deterministic ODE sampling; in concat modes the reference rows are pinned
// to the reference latent at every step and only the noise rows integrate
template <class T>
TensorT<T> euler_sample_fn(const VelocityFn<T>& velocity_fn,
                           const ConditionSetT<T>& cond, int steps, uint64_t seed) {
  check(steps >= 1, "euler_sample: steps must be >= 1");
  Rng rng(Rng::mix(seed, 0x0de));
  TensorT<T> x = TensorT<T>::randn({kPositions, kChannels}, rng, T(1));
  double dt = 1.0 / steps;
  for (int k = 0; k < steps; ++k) {
    double t = static_cast<double>(k + 1) / steps;
    TensorT<T> input =
        uses_concat(cond.mode) ? concat<T>(nullptr, {cond.ref_tokens, x}, 0) : x;
    TensorT<T> v = velocity_fn(nullptr, input, t);
    if (uses_concat(cond.mode)) v = slice<T>(nullptr, v, 0, kPositions, kPositions);
    x = add<T>(nullptr, x, scale<T>(nullptr, v, static_cast<T>(dt)));
  }
  return x;
}

template <class T>
TensorT<T> euler_sample(const DitModelT<T>& model, const ConditionSetT<T>& cond,
                        int steps, uint64_t seed) {
  return euler_sample_fn(model_velocity(model, cond), cond, steps, seed);
}

template <class T>
struct SdeResult {
  TensorT<T> final_latent;            // [64, C]
  std::vector<TensorT<T>> states;     // steps+1 states including x0
  std::vector<double> step_logprobs;  // Gaussian transition log-densities
  std::vector<double> t_grid;
};

// Euler-Maruyama discretization of
//   dx = (v + sigma_t^2/(2t) (x + (1-t) v)) dt + sigma_t dw
// each transition is Gaussian with mean x + drift*dt and std sigma_t*sqrt(dt);
// its log-density under that Gaussian is recorded per step
template <class T>
SdeResult<T> sde_sample_fn(const VelocityFn<T>& velocity_fn,
                           const ConditionSetT<T>& cond, int steps,
                           const SigmaSchedule& sigma, uint64_t seed,
                           const std::vector<double>& t_grid = {}) {
  check(steps >= 1, "sde_sample: steps must be >= 1");
  std::vector<double> grid = t_grid;
  if (grid.empty())
    for (int k = 0; k < steps; ++k)
      grid.push_back(static_cast<double>(k + 1) / steps);
  check(static_cast<int>(grid.size()) == steps, "sde_sample: grid length mismatch");
  for (double t : grid)
    check(t > 0.0, "sde_sample: t-grid contains t = 0 (drift singular there)");

  Rng init_rng(Rng::mix(seed, 0x0de));  // same stream as euler_sample
  Rng noise_rng(Rng::mix(seed, 0x5de));
  SdeResult<T> out;
  out.t_grid = grid;
  TensorT<T> x = TensorT<T>::randn({kPositions, kChannels}, init_rng, T(1));
  out.states.push_back(x.detached_copy());
  double dt = 1.0 / steps;
  const double log2pi = std::log(2.0 * 3.14159265358979323846);
  for (int k = 0; k < steps; ++k) {
    double t = grid[k];
    double s = sigma(t);
    TensorT<T> input =
        uses_concat(cond.mode) ? concat<T>(nullptr, {cond.ref_tokens, x}, 0) : x;
    TensorT<T> v = velocity_fn(nullptr, input, t);
    if (uses_concat(cond.mode)) v = slice<T>(nullptr, v, 0, kPositions, kPositions);
    TensorT<T> drift = v;
    if (s > 0.0) {
      TensorT<T> corr =
          add<T>(nullptr, x, scale<T>(nullptr, v, static_cast<T>(1.0 - t)));
      drift = add<T>(nullptr, v,
                     scale<T>(nullptr, corr, static_cast<T>(s * s / (2.0 * t))));
    }
    TensorT<T> mu = add<T>(nullptr, x, scale<T>(nullptr, drift, static_cast<T>(dt)));
    double std_dev = s * std::sqrt(dt);
    TensorT<T> next = mu.detached_copy();
    double logprob = 0.0;
    for (int64_t i = 0; i < next.numel(); ++i) {
      double w = noise_rng.normal();
      next.data()[i] = mu.data()[i] + static_cast<T>(std_dev * w);
      if (std_dev > 0.0) {
        double z =
            (static_cast<double>(next.data()[i]) - mu.data()[i]) / std_dev;
        logprob += -0.5 * z * z - std::log(std_dev) - 0.5 * log2pi;
      }
    }
    out.step_logprobs.push_back(logprob);
    x = next;
    out.states.push_back(x.detached_copy());
  }
  out.final_latent = x;
  return out;
}

template <class T>
SdeResult<T> sde_sample(const DitModelT<T>& model, const ConditionSetT<T>& cond,
                        int steps, const SigmaSchedule& sigma, uint64_t seed,
                        const std::vector<double>& t_grid = {}) {
  return sde_sample_fn(model_velocity(model, cond), cond, steps, sigma, seed,
                       t_grid);
}

// differentiable log-probability of a recorded SDE trajectory under the
// current model (the Flow-GRPO policy likelihood)
template <class T>
TensorT<T> sde_trajectory_logprob(TapeT<T>* tape, const DitModelT<T>& model,
                                  const ConditionSetT<T>& cond,
                                  const std::vector<TensorT<T>>& states,
                                  const SigmaSchedule& sigma,
                                  const std::vector<double>& t_grid) {
  int steps = static_cast<int>(t_grid.size());
  check(static_cast<int>(states.size()) == steps + 1,
        "sde_trajectory_logprob: states/grid mismatch");
  double dt = 1.0 / steps;
  const double log2pi = std::log(2.0 * 3.14159265358979323846);
  TensorT<T> total;
  double const_part = 0.0;
  for (int k = 0; k < steps; ++k) {
    double t = t_grid[k];
    double s = sigma(t);
    check(s > 0.0, "sde_trajectory_logprob: sigma must be positive on the grid");
    double std_dev = s * std::sqrt(dt);
    TensorT<T> x = states[k].detached_copy();
    TensorT<T> input =
        uses_concat(cond.mode) ? concat(tape, {cond.ref_tokens, x}, 0) : x;
    TensorT<T> v = model.velocity(tape, input, t, cond.context);
    if (uses_concat(cond.mode)) v = slice(tape, v, 0, kPositions, kPositions);
    TensorT<T> corr = add(tape, x, scale(tape, v, static_cast<T>(1.0 - t)));
    TensorT<T> drift =
        add(tape, v, scale(tape, corr, static_cast<T>(s * s / (2.0 * t))));
    TensorT<T> mu = add(tape, x, scale(tape, drift, static_cast<T>(dt)));
    TensorT<T> diff = sub(tape, states[k + 1].detached_copy(), mu);
    TensorT<T> sq = sum(tape, mul(tape, diff, diff));
    TensorT<T> term = scale(tape, sq, static_cast<T>(-0.5 / (std_dev * std_dev)));
    total = total.defined() ? add(tape, total, term) : term;
    const_part += states[k].numel() * (-std::log(std_dev) - 0.5 * log2pi);
  }
  return add(tape, total, TensorT<T>::scalar(static_cast<T>(const_part)));
}

}  // namespace flowgen::dit
