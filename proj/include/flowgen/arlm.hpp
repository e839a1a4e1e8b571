#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flowgen/codec.hpp"
#include "flowgen/rng.hpp"
#include "flowgen/tensor.hpp"

namespace flowgen::arlm {

// ---------------------------------------------------------------------------
// Vocabulary: text words [0,64), image tokens [64,320), specials [320,325)
// ---------------------------------------------------------------------------

constexpr int kTextBase = 0;
constexpr int kTextSize = 64;
constexpr int kImageBase = 64;
constexpr int kImageSize = codec::kCodebookSize;  // 256
constexpr int kBos = 320;
constexpr int kBoi = 321;
constexpr int kEoi = 322;
constexpr int kSepEdit = 323;
constexpr int kPad = 324;
constexpr int kVocab = 325;
constexpr int kMaxLen = 160;

int word_id(const std::string& word);  // throws when outside the grammar

inline int image_token(uint16_t code) { return kImageBase + code; }
inline bool is_image_token(int id) {
  return id >= kImageBase && id < kImageBase + kImageSize;
}
inline uint16_t image_code(int id) {
  check(is_image_token(id), "image_code: " + std::to_string(id) +
                                " is not in the image vocab region");
  return static_cast<uint16_t>(id - kImageBase);
}

// prompt text -> word token ids (grammar words only)
std::vector<int> encode_prompt(const std::string& prompt);

// ---------------------------------------------------------------------------
// Sequence templates
//   t2i:       [BOS, prompt..., BOI, img 0..63, EOI]
//   edit/recon:[BOS, prompt..., SEP_EDIT, ref 0..63, BOI, target 0..63, EOI]
// loss_mask marks the scored target positions: 64 target tokens plus EOI.
// ---------------------------------------------------------------------------

struct BuiltSequence {
  std::vector<int> ids;
  std::vector<uint8_t> loss_mask;
  int target_start = 0;  // index of the first target image token
};

BuiltSequence build_sequence(const std::string& prompt,
                             const std::optional<codec::TokenGrid>& ref_tokens,
                             const codec::TokenGrid& target_tokens);

// prefix ending at BOI, used for sampling
std::vector<int> build_prefix(const std::string& prompt,
                              const std::optional<codec::TokenGrid>& ref_tokens);

// ---------------------------------------------------------------------------
// Decoder-only causal transformer with rotary position encoding
// ---------------------------------------------------------------------------

struct ARConfig {
  int d_model = 128;
  int layers = 4;
  int heads = 4;
  int ffn_mult = 4;
  int vocab = kVocab;
  int max_len = kMaxLen;
};

template <class T>
struct ArModelT {
  ARConfig cfg;

  struct Layer {
    TensorT<T> wq, wk, wv, wo;  // [d, d]
    TensorT<T> g1, g2;          // rmsnorm gains
    TensorT<T> w1, w2;          // mlp [4d, d], [d, 4d]
  };

  TensorT<T> tok_emb;   // [V, d]
  std::vector<Layer> layers;
  TensorT<T> gf;        // final norm gain
  TensorT<T> lm_head;   // [V, d]

  void init(Rng& rng, ARConfig config = {}) {
    cfg = config;
    check(cfg.d_model % cfg.heads == 0, "arlm: d_model must divide into heads");
    T s = T(0.02);
    tok_emb = TensorT<T>::randn({cfg.vocab, cfg.d_model}, rng, s, true);
    layers.clear();
    for (int l = 0; l < cfg.layers; ++l) {
      Layer lay;
      lay.wq = TensorT<T>::randn({cfg.d_model, cfg.d_model}, rng, s, true);
      lay.wk = TensorT<T>::randn({cfg.d_model, cfg.d_model}, rng, s, true);
      lay.wv = TensorT<T>::randn({cfg.d_model, cfg.d_model}, rng, s, true);
      lay.wo = TensorT<T>::randn({cfg.d_model, cfg.d_model}, rng, s, true);
      lay.g1 = TensorT<T>::full({cfg.d_model}, T(1), true);
      lay.g2 = TensorT<T>::full({cfg.d_model}, T(1), true);
      lay.w1 = TensorT<T>::randn({cfg.ffn_mult * cfg.d_model, cfg.d_model}, rng, s, true);
      lay.w2 = TensorT<T>::randn({cfg.d_model, cfg.ffn_mult * cfg.d_model}, rng, s, true);
      layers.push_back(lay);
    }
    gf = TensorT<T>::full({cfg.d_model}, T(1), true);
    lm_head = TensorT<T>::randn({cfg.vocab, cfg.d_model}, rng, s, true);
  }

  std::vector<NamedParamT<T>> named_params(const std::string& prefix = "ar") {
    std::vector<NamedParamT<T>> out;
    out.push_back({prefix + ".tok_emb", tok_emb});
    for (size_t l = 0; l < layers.size(); ++l) {
      std::string p = prefix + ".layer" + std::to_string(l);
      out.push_back({p + ".wq", layers[l].wq});
      out.push_back({p + ".wk", layers[l].wk});
      out.push_back({p + ".wv", layers[l].wv});
      out.push_back({p + ".wo", layers[l].wo});
      out.push_back({p + ".g1", layers[l].g1});
      out.push_back({p + ".g2", layers[l].g2});
      out.push_back({p + ".w1", layers[l].w1});
      out.push_back({p + ".w2", layers[l].w2});
    }
    out.push_back({prefix + ".gf", gf});
    out.push_back({prefix + ".lm_head", lm_head});
    return out;
  }

  struct ForwardOut {
    TensorT<T> logits;  // [L, V]
    TensorT<T> hidden;  // [L, d], final-layer activations after the last norm
  };

  // full teacher-forced pass; causal by construction
  ForwardOut forward(TapeT<T>* tape, const std::vector<int>& ids) const {
    check(static_cast<int>(ids.size()) <= cfg.max_len,
          "arlm: sequence length " + std::to_string(ids.size()) +
              " exceeds max " + std::to_string(cfg.max_len));
    check(!ids.empty(), "arlm: empty sequence");
    TensorT<T> x = embedding(tape, tok_emb, ids);
    for (const auto& lay : layers) {
      TensorT<T> h = row_scale(tape, rms_normalize(tape, x), lay.g1);
      TensorT<T> q = rope(tape, split_heads(tape, linear(tape, h, lay.wq), cfg.heads));
      TensorT<T> k = rope(tape, split_heads(tape, linear(tape, h, lay.wk), cfg.heads));
      TensorT<T> v = split_heads(tape, linear(tape, h, lay.wv), cfg.heads);
      TensorT<T> att = merge_heads(tape, scaled_dot_product_attention(tape, q, k, v, true));
      x = add(tape, x, linear(tape, att, lay.wo));
      TensorT<T> m = row_scale(tape, rms_normalize(tape, x), lay.g2);
      m = linear(tape, silu(tape, linear(tape, m, lay.w1)), lay.w2);
      x = add(tape, x, m);
    }
    ForwardOut out;
    out.hidden = row_scale(tape, rms_normalize(tape, x), gf);
    out.logits = linear(tape, out.hidden, lm_head);
    return out;
  }
};

using ArModel = ArModelT<float>;

// mean next-token cross entropy: logits[i-1] scored against ids[i] at
// positions where loss_mask[i] != 0
template <class T>
TensorT<T> ce_loss(TapeT<T>* tape, TensorT<T> logits, const std::vector<int>& ids,
                   const std::vector<uint8_t>& loss_mask) {
  check(logits.dim(0) == static_cast<int>(ids.size()),
        "ce_loss: logits/sequence length mismatch");
  check(ids.size() == loss_mask.size(), "ce_loss: mask length mismatch");
  int L = static_cast<int>(ids.size());
  std::vector<int> targets(L - 1, 0);
  std::vector<uint8_t> shifted(L - 1, 0);
  for (int i = 1; i < L; ++i) {
    targets[i - 1] = ids[i];
    shifted[i - 1] = loss_mask[i];
  }
  TensorT<T> head = slice(tape, logits, 0, 0, L - 1);
  return cross_entropy(tape, head, targets, shifted);
}

// teacher-forced log-probs of ids[i] at masked positions, under the
// temperature-scaled distribution restricted to the image vocab region
// (identical to the sampling distribution). Masked positions must be
// contiguous and hold image-region tokens.
template <class T>
TensorT<T> logprob_of(TapeT<T>* tape, const ArModelT<T>& model,
                      const std::vector<int>& ids,
                      const std::vector<uint8_t>& loss_mask, T temperature) {
  check(temperature > T(0), "logprob_of: temperature must be positive");
  int L = static_cast<int>(ids.size());
  check(static_cast<int>(loss_mask.size()) == L, "logprob_of: mask length mismatch");
  int first = -1, last = -1;
  for (int i = 0; i < L; ++i)
    if (loss_mask[i]) {
      if (first < 0) first = i;
      last = i;
    }
  check(first > 0, "logprob_of: empty mask");
  for (int i = first; i <= last; ++i)
    check(loss_mask[i], "logprob_of: mask must be contiguous");
  auto out = model.forward(tape, ids);
  // logits at position i-1 predict ids[i]
  TensorT<T> rows = slice(tape, out.logits, 0, first - 1, last - first + 1);
  std::vector<int> picked(ids.begin() + first, ids.begin() + last + 1);
  return masked_logprob(tape, rows, picked, T(1) / temperature, kImageBase,
                        kImageBase + kImageSize);
}

// per-position exact KL(model || ref) over the image-region distribution at
// the masked positions
template <class T>
TensorT<T> kl_to_reference(TapeT<T>* tape, const ArModelT<T>& model,
                           const ArModelT<T>& reference, const std::vector<int>& ids,
                           const std::vector<uint8_t>& loss_mask, T temperature) {
  check(temperature > T(0), "kl_to_reference: temperature must be positive");
  int L = static_cast<int>(ids.size());
  int first = -1, last = -1;
  for (int i = 0; i < L; ++i)
    if (loss_mask[i]) {
      if (first < 0) first = i;
      last = i;
    }
  check(first > 0, "kl_to_reference: empty mask");
  auto out_p = model.forward(tape, ids);
  auto out_q = reference.forward(nullptr, ids);
  TensorT<T> rows_p = slice(tape, out_p.logits, 0, first - 1, last - first + 1);
  TensorT<T> rows_q = slice<T>(nullptr, out_q.logits, 0, first - 1, last - first + 1);
  return masked_kl(tape, rows_p, rows_q, T(1) / temperature, kImageBase,
                   kImageBase + kImageSize);
}

// ---------------------------------------------------------------------------
// Incremental sampler with per-layer KV cache (inference only, no tape)
// ---------------------------------------------------------------------------

class ArSampler {
 public:
  explicit ArSampler(const ArModel& model);

  // feeds one token at the next position; returns logits for the following
  // position and the hidden state at the fed position
  void step(int token, std::vector<float>* logits, std::vector<float>* hidden);

  int pos() const { return pos_; }

 private:
  const ArModel& model_;
  int pos_ = 0;
  // cached K (post-rope) and V per layer, row-major [pos][d_model]
  std::vector<std::vector<float>> k_cache_, v_cache_;
};

struct SampleResult {
  codec::TokenGrid tokens;
  std::vector<float> hidden;    // [64, d_model] at the generated positions
  std::vector<float> logprobs;  // [64], under the sampling distribution
  std::vector<int> sequence;    // the full sequence including EOI
};

// autoregressive sampling of exactly 64 image-region tokens after BOI;
// temperature 0 means greedy argmax decoding (logprobs reported as 0)
SampleResult sample_tokens(const ArModel& model, const std::string& prompt,
                           const std::optional<codec::TokenGrid>& ref_tokens,
                           float temperature, uint64_t seed);

}  // namespace flowgen::arlm
