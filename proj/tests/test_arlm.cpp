#include "flowgen/arlm.hpp"

#include <cmath>

#include "doctest.h"
#include "flowgen/world.hpp"

using namespace flowgen;
using namespace flowgen::arlm;

namespace {

codec::TokenGrid grid_from_seed(uint64_t seed) {
  Rng rng(seed);
  codec::TokenGrid g;
  for (auto& id : g.ids)
    id = static_cast<uint16_t>(rng.uniform_index(codec::kCodebookSize));
  return g;
}

ArModel small_model(uint64_t seed = 11) {
  Rng rng(seed);
  ArModel m;
  ARConfig cfg;
  cfg.d_model = 32;
  cfg.layers = 2;
  cfg.heads = 2;
  m.init(rng, cfg);
  return m;
}

}  // namespace

TEST_SUITE_BEGIN("arlm");

TEST_CASE("t2i sequence layout: 5-word prompt gives length 72") {
  codec::TokenGrid target = grid_from_seed(1);
  auto built = build_sequence("a circle and a square", std::nullopt, target);
  CHECK(built.ids.size() == 72);  // 1 + 5 + 1 + 64 + 1
  CHECK(built.ids.front() == kBos);
  CHECK(built.ids[6] == kBoi);
  CHECK(built.ids.back() == kEoi);
  int mask_sum = 0;
  for (uint8_t m : built.loss_mask) mask_sum += m;
  CHECK(mask_sum == 65);
}

TEST_CASE("reconstruction sequence uses the fixed prompt and ref==target") {
  codec::TokenGrid t = grid_from_seed(2);
  auto built = build_sequence(world::kReconstructionPrompt, t, t);
  // [BOS, 5 words, SEP_EDIT, 64 ref, BOI, 64 target, EOI]
  CHECK(built.ids.size() == 1 + 5 + 1 + 64 + 1 + 64 + 1);
  CHECK(built.ids[6] == kSepEdit);
  CHECK(built.ids[6 + 65] == kBoi);
  for (int i = 0; i < 64; ++i)
    CHECK(built.ids[7 + i] == built.ids[built.target_start + i]);
  int mask_sum = 0;
  for (uint8_t m : built.loss_mask) mask_sum += m;
  CHECK(mask_sum == 65);
  // mask covers only target positions and EOI
  for (int i = 0; i < built.target_start; ++i) CHECK(built.loss_mask[i] == 0);
}

TEST_CASE("prompt outside the grammar fails") {
  codec::TokenGrid t = grid_from_seed(3);
  CHECK_THROWS_AS(build_sequence("a purple dodecahedron", std::nullopt, t),
                  std::runtime_error);
}

TEST_CASE("forward shapes and causality") {
  ArModel m = small_model();
  codec::TokenGrid t = grid_from_seed(4);
  auto built = build_sequence("a red circle", std::nullopt, t);
  auto out = m.forward(nullptr, built.ids);
  int L = static_cast<int>(built.ids.size());
  CHECK(out.logits.shape() == std::vector<int>{L, kVocab});
  CHECK(out.hidden.shape() == std::vector<int>{L, m.cfg.d_model});

  // perturb token at position j: logits before j are bit-identical
  int j = 10;
  auto ids2 = built.ids;
  ids2[j] = image_token(200);
  auto out2 = m.forward(nullptr, ids2);
  for (int i = 0; i < j; ++i)
    for (int v = 0; v < kVocab; ++v)
      CHECK(out.logits.data()[i * kVocab + v] == out2.logits.data()[i * kVocab + v]);
}

TEST_CASE("fresh init cross entropy is near uniform") {
  Rng rng(5);
  ArModel m;
  m.init(rng);
  codec::TokenGrid t = grid_from_seed(6);
  auto built = build_sequence("a red circle", std::nullopt, t);
  auto out = m.forward(nullptr, built.ids);
  Tensor loss = ce_loss<float>(nullptr, out.logits, built.ids, built.loss_mask);
  CHECK(loss.item() == doctest::Approx(std::log(325.0)).epsilon(0.09));
}

TEST_CASE("ce_loss basics") {
  // one-hot logits on the true targets drive the loss to zero
  std::vector<int> ids = {kBos, image_token(3), image_token(7), kEoi};
  std::vector<uint8_t> mask = {0, 1, 1, 1};
  Tensor logits = Tensor::zeros({4, kVocab});
  auto set_peak = [&](int row, int id) { logits.data()[row * kVocab + id] = 50.0f; };
  set_peak(0, image_token(3));
  set_peak(1, image_token(7));
  set_peak(2, kEoi);
  Tensor loss = ce_loss<float>(nullptr, logits, ids, mask);
  CHECK(loss.item() < 1e-4f);

  // uniform logits give ln(V)
  Tensor flat = Tensor::zeros({4, kVocab});
  Tensor uloss = ce_loss<float>(nullptr, flat, ids, mask);
  CHECK(uloss.item() == doctest::Approx(std::log(325.0)).epsilon(1e-5));

  // empty mask fails
  std::vector<uint8_t> none = {0, 0, 0, 0};
  CHECK_THROWS_AS(ce_loss<float>(nullptr, logits, ids, none), std::runtime_error);

  // loss is invariant to logits at unmasked (prompt) positions
  Tensor perturbed = Tensor::from_data({4, kVocab}, logits.data());
  for (int v = 0; v < kVocab; ++v) perturbed.data()[3 * kVocab + v] += 5.0f;
  // position 3 predicts nothing (last); its logits never enter the loss
  Tensor ploss = ce_loss<float>(nullptr, perturbed, ids, mask);
  CHECK(ploss.item() == loss.item());
}

TEST_CASE("sampling: determinism, region masking, greedy limit") {
  ArModel m = small_model(21);
  auto r1 = sample_tokens(m, "a red circle", std::nullopt, 1.0f, 77);
  auto r2 = sample_tokens(m, "a red circle", std::nullopt, 1.0f, 77);
  CHECK(r1.tokens == r2.tokens);
  CHECK(r1.logprobs == r2.logprobs);

  for (int id : r1.sequence)
    if (id != kBos && id != kBoi && id != kEoi && !is_image_token(id))
      CHECK(id < kTextSize);  // only prefix words outside the image region

  // tiny temperature converges to greedy argmax
  auto greedy = sample_tokens(m, "a red circle", std::nullopt, 0.0f, 1);
  auto cold = sample_tokens(m, "a red circle", std::nullopt, 1e-6f, 123);
  CHECK(greedy.tokens == cold.tokens);
}

TEST_CASE("sampled log-probs match teacher-forced logprob_of") {
  ArModel m = small_model(31);
  auto res = sample_tokens(m, "a blue square", std::nullopt, 0.8f, 5);
  std::vector<uint8_t> mask(res.sequence.size(), 0);
  int start = static_cast<int>(res.sequence.size()) - 1 - codec::kTokens;
  for (int i = 0; i < codec::kTokens; ++i) mask[start + i] = 1;
  Tensor lp = logprob_of<float>(nullptr, m, res.sequence, mask, 0.8f);
  REQUIRE(lp.numel() == codec::kTokens);
  for (int i = 0; i < codec::kTokens; ++i)
    CHECK(std::abs(lp.data()[i] - res.logprobs[i]) < 1e-5f);
}

TEST_CASE("logprob_of sums to the sequence log-probability and is stable") {
  ArModel m = small_model(41);
  auto res = sample_tokens(m, "a red circle", std::nullopt, 1.0f, 9);
  std::vector<uint8_t> mask(res.sequence.size(), 0);
  int start = static_cast<int>(res.sequence.size()) - 1 - codec::kTokens;
  for (int i = 0; i < codec::kTokens; ++i) mask[start + i] = 1;
  Tensor a = logprob_of<float>(nullptr, m, res.sequence, mask, 1.0f);
  Tensor b = logprob_of<float>(nullptr, m, res.sequence, mask, 1.0f);
  CHECK(a.data() == b.data());  // same model, same values
  double seq_lp = 0;
  for (float v : a.data()) seq_lp += v;
  double sampled = 0;
  for (float v : res.logprobs) sampled += v;
  CHECK(seq_lp == doctest::Approx(sampled).epsilon(1e-4));
}

TEST_CASE("one ascent step on a token log-prob strictly increases it") {
  ArModel m = small_model(51);
  auto res = sample_tokens(m, "a red circle", std::nullopt, 1.0f, 3);
  std::vector<uint8_t> mask(res.sequence.size(), 0);
  int start = static_cast<int>(res.sequence.size()) - 1 - codec::kTokens;
  mask[start] = 1;  // just the first generated token
  auto lp_value = [&] {
    Tensor lp = logprob_of<float>(nullptr, m, res.sequence, mask, 1.0f);
    return lp.data()[0];
  };
  float before = lp_value();
  Tape tape;
  Tensor lp = logprob_of<float>(&tape, m, res.sequence, mask, 1.0f);
  Tensor loss = scale<float>(&tape, sum<float>(&tape, lp), -1.0f);  // descend = ascend lp
  tape.backward(loss);
  auto params = m.named_params();
  Adam opt;
  opt.lr = 1e-3f;
  opt.init(params);
  opt.step(params);
  CHECK(lp_value() > before);
}

TEST_CASE("KL of a model against itself is zero") {
  ArModel m = small_model(61);
  auto res = sample_tokens(m, "a red circle", std::nullopt, 1.0f, 4);
  std::vector<uint8_t> mask(res.sequence.size(), 0);
  int start = static_cast<int>(res.sequence.size()) - 1 - codec::kTokens;
  for (int i = 0; i < codec::kTokens; ++i) mask[start + i] = 1;
  Tensor kl = kl_to_reference<float>(nullptr, m, m, res.sequence, mask, 1.0f);
  for (float v : kl.data()) CHECK(v == 0.0f);
}

TEST_CASE("full-model gradient check in 64-bit on a tiny config") {
  Rng rng(71);
  ArModelT<double> m;
  ARConfig cfg;
  cfg.d_model = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.vocab = 24;
  cfg.max_len = 16;
  m.init(rng, cfg);
  std::vector<int> ids = {0, 5, 9, 13, 17, 21, 2, 7};
  std::vector<uint8_t> mask = {0, 0, 1, 1, 1, 1, 1, 1};

  auto params = m.named_params();
  double worst = 0.0;
  for (auto& p : params) {
    Tensor64 point = p.tensor.detached_copy();
    auto f = [&](Tape64* tape, Tensor64 x) {
      ArModelT<double> probe = m;  // shallow copies of all handles
      // rebind the probed parameter tensor
      auto plist = probe.named_params();
      for (size_t i = 0; i < plist.size(); ++i)
        if (plist[i].name == p.name) {
          // find and replace the member by matching node pointers
          if (probe.tok_emb.node() == p.tensor.node()) probe.tok_emb = x;
          if (probe.gf.node() == p.tensor.node()) probe.gf = x;
          if (probe.lm_head.node() == p.tensor.node()) probe.lm_head = x;
          for (auto& lay : probe.layers) {
            if (lay.wq.node() == p.tensor.node()) lay.wq = x;
            if (lay.wk.node() == p.tensor.node()) lay.wk = x;
            if (lay.wv.node() == p.tensor.node()) lay.wv = x;
            if (lay.wo.node() == p.tensor.node()) lay.wo = x;
            if (lay.g1.node() == p.tensor.node()) lay.g1 = x;
            if (lay.g2.node() == p.tensor.node()) lay.g2 = x;
            if (lay.w1.node() == p.tensor.node()) lay.w1 = x;
            if (lay.w2.node() == p.tensor.node()) lay.w2 = x;
          }
        }
      auto out = probe.forward(tape, ids);
      return ce_loss(tape, out.logits, ids, mask);
    };
    worst = std::max(worst, grad_check(f, point, 1e-5));
  }
  CHECK(worst < 1e-3);
}

TEST_SUITE_END();
