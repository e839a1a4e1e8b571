#include "flowgen/arlm.hpp"

#include <algorithm>

#include "flowgen/world.hpp"

namespace flowgen::arlm {

int word_id(const std::string& word) {
  const auto& words = world::grammar_words();
  auto it = std::find(words.begin(), words.end(), word);
  check(it != words.end(), "word_id: '" + word + "' is outside the grammar");
  return kTextBase + static_cast<int>(it - words.begin());
}

std::vector<int> encode_prompt(const std::string& prompt) {
  std::vector<int> out;
  for (const auto& w : world::tokenize_prompt(prompt)) out.push_back(word_id(w));
  return out;
}

BuiltSequence build_sequence(const std::string& prompt,
                             const std::optional<codec::TokenGrid>& ref_tokens,
                             const codec::TokenGrid& target_tokens) {
  BuiltSequence out;
  out.ids.push_back(kBos);
  for (int id : encode_prompt(prompt)) out.ids.push_back(id);
  if (ref_tokens) {
    out.ids.push_back(kSepEdit);
    for (uint16_t code : ref_tokens->ids) out.ids.push_back(image_token(code));
  }
  out.ids.push_back(kBoi);
  out.target_start = static_cast<int>(out.ids.size());
  for (uint16_t code : target_tokens.ids) out.ids.push_back(image_token(code));
  out.ids.push_back(kEoi);
  check(static_cast<int>(out.ids.size()) <= kMaxLen,
        "build_sequence: length " + std::to_string(out.ids.size()) +
            " exceeds max " + std::to_string(kMaxLen));
  out.loss_mask.assign(out.ids.size(), 0);
  for (int i = out.target_start; i < static_cast<int>(out.ids.size()); ++i)
    out.loss_mask[i] = 1;  // 64 target tokens + EOI
  return out;
}

std::vector<int> build_prefix(const std::string& prompt,
                              const std::optional<codec::TokenGrid>& ref_tokens) {
  std::vector<int> ids;
  ids.push_back(kBos);
  for (int id : encode_prompt(prompt)) ids.push_back(id);
  if (ref_tokens) {
    ids.push_back(kSepEdit);
    for (uint16_t code : ref_tokens->ids) ids.push_back(image_token(code));
  }
  ids.push_back(kBoi);
  return ids;
}

// ---------------------------------------------------------------------------
// Incremental sampler
// ---------------------------------------------------------------------------

ArSampler::ArSampler(const ArModel& model) : model_(model) {
  k_cache_.resize(model.cfg.layers);
  v_cache_.resize(model.cfg.layers);
}

void ArSampler::step(int token, std::vector<float>* logits,
                     std::vector<float>* hidden) {
  const auto& cfg = model_.cfg;
  check(pos_ < cfg.max_len, "sampler: position exceeds max length");
  int H = cfg.heads, D = cfg.d_model / cfg.heads;

  Tensor x = embedding<float>(nullptr, model_.tok_emb, {token});  // [1, d]
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& lay = model_.layers[l];
    Tensor h = row_scale<float>(nullptr, rms_normalize<float>(nullptr, x), lay.g1);
    Tensor q = rope<float>(
        nullptr, split_heads<float>(nullptr, linear<float>(nullptr, h, lay.wq), H),
        pos_);
    Tensor k = rope<float>(
        nullptr, split_heads<float>(nullptr, linear<float>(nullptr, h, lay.wk), H),
        pos_);
    Tensor v = split_heads<float>(nullptr, linear<float>(nullptr, h, lay.wv), H);
    // cache layout per layer: [pos][H*D], heads contiguous
    auto& kc = k_cache_[l];
    auto& vc = v_cache_[l];
    kc.resize(static_cast<size_t>(pos_ + 1) * cfg.d_model);
    vc.resize(static_cast<size_t>(pos_ + 1) * cfg.d_model);
    for (int hh = 0; hh < H; ++hh)
      for (int d = 0; d < D; ++d) {
        kc[static_cast<size_t>(pos_) * cfg.d_model + hh * D + d] =
            k.data()[static_cast<size_t>(hh) * D + d];
        vc[static_cast<size_t>(pos_) * cfg.d_model + hh * D + d] =
            v.data()[static_cast<size_t>(hh) * D + d];
      }
    int Tk = pos_ + 1;
    Tensor kt = Tensor::zeros({H, Tk, D});
    Tensor vt = Tensor::zeros({H, Tk, D});
    for (int hh = 0; hh < H; ++hh)
      for (int t = 0; t < Tk; ++t)
        for (int d = 0; d < D; ++d) {
          kt.data()[(static_cast<size_t>(hh) * Tk + t) * D + d] =
              kc[static_cast<size_t>(t) * cfg.d_model + hh * D + d];
          vt.data()[(static_cast<size_t>(hh) * Tk + t) * D + d] =
              vc[static_cast<size_t>(t) * cfg.d_model + hh * D + d];
        }
    Tensor att = merge_heads<float>(
        nullptr, scaled_dot_product_attention<float>(nullptr, q, kt, vt, false));
    x = add<float>(nullptr, x, linear<float>(nullptr, att, lay.wo));
    Tensor m = row_scale<float>(nullptr, rms_normalize<float>(nullptr, x), lay.g2);
    m = linear<float>(nullptr,
                      silu<float>(nullptr, linear<float>(nullptr, m, lay.w1)), lay.w2);
    x = add<float>(nullptr, x, m);
  }
  Tensor hid = row_scale<float>(nullptr, rms_normalize<float>(nullptr, x), model_.gf);
  if (hidden) *hidden = hid.data();
  if (logits) *logits = linear<float>(nullptr, hid, model_.lm_head).data();
  ++pos_;
}

SampleResult sample_tokens(const ArModel& model, const std::string& prompt,
                           const std::optional<codec::TokenGrid>& ref_tokens,
                           float temperature, uint64_t seed) {
  check(temperature >= 0.0f, "sample_tokens: negative temperature");
  std::vector<int> prefix = build_prefix(prompt, ref_tokens);
  check(static_cast<int>(prefix.size()) + codec::kTokens + 1 <= model.cfg.max_len,
        "sample_tokens: sequence would exceed max length");
  Rng rng(Rng::mix(seed, 0x5a3d));

  ArSampler sampler(model);
  std::vector<float> logits;
  for (int id : prefix) sampler.step(id, &logits, nullptr);

  SampleResult out;
  out.sequence = prefix;
  out.hidden.reserve(static_cast<size_t>(codec::kTokens) * model.cfg.d_model);
  std::vector<float> hidden;
  const int lo = kImageBase, hi = kImageBase + kImageSize;
  for (int k = 0; k < codec::kTokens; ++k) {
    int chosen;
    float logprob = 0.0f;
    if (temperature <= 0.0f) {
      chosen = lo;
      for (int j = lo; j < hi; ++j)
        if (logits[j] > logits[chosen]) chosen = j;
    } else {
      // stable masked softmax over the image region at this temperature
      float inv = 1.0f / temperature;
      float mx = -std::numeric_limits<float>::infinity();
      for (int j = lo; j < hi; ++j)
        mx = std::max(mx, logits[j] * inv);
      std::vector<double> probs(hi - lo);
      double z = 0.0;
      for (int j = lo; j < hi; ++j) {
        probs[j - lo] = std::exp(static_cast<double>(logits[j]) * inv - mx);
        z += probs[j - lo];
      }
      int idx = rng.categorical(probs);
      chosen = lo + idx;
      logprob = static_cast<float>(std::log(probs[idx] / z));
    }
    out.tokens.ids[k] = image_code(chosen);
    out.logprobs.push_back(logprob);
    out.sequence.push_back(chosen);
    sampler.step(chosen, &logits, &hidden);
    out.hidden.insert(out.hidden.end(), hidden.begin(), hidden.end());
  }
  out.sequence.push_back(kEoi);
  return out;
}

}  // namespace flowgen::arlm
