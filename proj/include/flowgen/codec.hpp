#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "flowgen/image.hpp"
#include "flowgen/rng.hpp"
#include "flowgen/tensor.hpp"

namespace flowgen::codec {

constexpr int kCodebookSize = 256;  // K
constexpr int kPatch = 4;           // 4x4 RGB patches
constexpr int kPatchDim = kPatch * kPatch * 3;
constexpr int kTokenSide = 8;  // 8x8 token grid over a 32x32 image
constexpr int kTokens = kTokenSide * kTokenSide;
constexpr int kLatentSide = 8;  // downsampling ratio 4
constexpr int kLatentChannels = 4;

// ---------------------------------------------------------------------------
// Token grid
// ---------------------------------------------------------------------------

struct TokenGrid {
  std::array<uint16_t, kTokens> ids{};  // row-major, values < kCodebookSize

  uint16_t& at(int row, int col) { return ids[row * kTokenSide + col]; }
  uint16_t at(int row, int col) const { return ids[row * kTokenSide + col]; }
  bool operator==(const TokenGrid&) const = default;
};

// ---------------------------------------------------------------------------
// Codebook (k-means over raw patches)
// ---------------------------------------------------------------------------

struct Codebook {
  std::vector<float> codes;  // K x kPatchDim
  bool trained = false;

  const float* code(int id) const { return codes.data() + id * kPatchDim; }
};

// k-means++ init then fixed Lloyd iterations; deterministic in seed.
// Fails when the images hold fewer than K distinct patches.
Codebook train_codebook(const std::vector<Image>& images, uint64_t seed,
                        int iterations = 25);

TokenGrid encode_tokens(const Image& img, const Codebook& cb);

// mean squared quantization error of the codebook over a set of images
double quantization_mse(const Codebook& cb, const std::vector<Image>& images);

// fraction of codes used at least once when encoding the images
double codebook_utilization(const Codebook& cb, const std::vector<Image>& images);

// deterministic diversity images mixed into codebook training: solid palette
// tiles plus seeded noise textures (guarantees >= K distinct patches)
std::vector<Image> diversity_images(uint64_t seed, int noise_count = 6);

// extract the 64 flattened patches of an image
std::vector<float> image_patches(const Image& img);

// ---------------------------------------------------------------------------
// Latent grid (the diffusion target), stored channel-major [C][H][W]
// ---------------------------------------------------------------------------

struct LatentGrid {
  std::array<float, kLatentChannels * kLatentSide * kLatentSide> v{};

  float& at(int c, int y, int x) {
    return v[(c * kLatentSide + y) * kLatentSide + x];
  }
  float at(int c, int y, int x) const {
    return v[(c * kLatentSide + y) * kLatentSide + x];
  }
  // position-major view [H*W, C] used as DiT tokens
  std::vector<float> positions_major() const {
    std::vector<float> out(kLatentSide * kLatentSide * kLatentChannels);
    for (int y = 0; y < kLatentSide; ++y)
      for (int x = 0; x < kLatentSide; ++x)
        for (int c = 0; c < kLatentChannels; ++c)
          out[(y * kLatentSide + x) * kLatentChannels + c] = at(c, y, x);
    return out;
  }
  bool operator==(const LatentGrid&) const = default;
};

// ---------------------------------------------------------------------------
// Autoencoder: 2 strided convs down, 2 transposed convs up. Deterministic
// (no sampling); the bottleneck tanh keeps latents in (-1,1).
// ---------------------------------------------------------------------------

template <class T>
struct VaeT {
  int hidden = 48;
  bool trained = false;
  TensorT<T> e1w, e1b, e2w, e2b;  // encoder convs
  TensorT<T> d1w, d1b, d2w, d2b;  // decoder transposed convs

  void init(Rng& rng, int hidden_ch = 48) {
    hidden = hidden_ch;
    T s = T(0.05);
    e1w = TensorT<T>::randn({hidden, 3, 4, 4}, rng, s, true);
    e1b = TensorT<T>::zeros({hidden}, true);
    e2w = TensorT<T>::randn({kLatentChannels, hidden, 4, 4}, rng, s, true);
    e2b = TensorT<T>::zeros({kLatentChannels}, true);
    d1w = TensorT<T>::randn({kLatentChannels, hidden, 4, 4}, rng, s, true);
    d1b = TensorT<T>::zeros({hidden}, true);
    d2w = TensorT<T>::randn({hidden, 3, 4, 4}, rng, s, true);
    d2b = TensorT<T>::zeros({3}, true);
    trained = false;
  }

  std::vector<NamedParamT<T>> named_params(const std::string& prefix) {
    return {{prefix + ".e1w", e1w}, {prefix + ".e1b", e1b},
            {prefix + ".e2w", e2w}, {prefix + ".e2b", e2b},
            {prefix + ".d1w", d1w}, {prefix + ".d1b", d1b},
            {prefix + ".d2w", d2w}, {prefix + ".d2b", d2b}};
  }

  // [3,32,32] -> [C,8,8]
  TensorT<T> encode(TapeT<T>* tape, TensorT<T> img) const {
    auto h = silu(tape, conv2d(tape, img, e1w, e1b, 2, 1));
    return flowgen::tanh(tape, conv2d(tape, h, e2w, e2b, 2, 1));
  }

  // [C,8,8] -> [3,32,32] (unclamped; clamping happens at the image boundary)
  TensorT<T> decode(TapeT<T>* tape, TensorT<T> z) const {
    auto h = silu(tape, conv2d_transpose(tape, z, d1w, d1b, 2, 1));
    return conv2d_transpose(tape, h, d2w, d2b, 2, 1);
  }
};

using Vae = VaeT<float>;

// image <-> tensor helpers ([3,32,32] channel-major)
Tensor image_to_tensor(const Image& img);
Image tensor_to_image(const Tensor& t);  // clamps to [0,1]

// deterministic encode/decode; fail on untrained params
LatentGrid vae_encode(const Vae& vae, const Image& img);
Image vae_decode(const Vae& vae, const LatentGrid& z);

struct VaeTrainConfig {
  int steps = 3000;
  int batch = 32;
  float lr = 1e-3f;
  uint64_t seed = 0;
  int hidden = 48;
};

struct VaeTrainResult {
  std::vector<float> loss_curve;  // one entry per step
};

VaeTrainResult train_vae(Vae& vae, const std::vector<Image>& images,
                         const VaeTrainConfig& cfg);

}  // namespace flowgen::codec
