#include "flowgen/codec.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "flowgen/world.hpp"

namespace flowgen::codec {

std::vector<float> image_patches(const Image& img) {
  std::vector<float> out(static_cast<size_t>(kTokens) * kPatchDim);
  for (int py = 0; py < kTokenSide; ++py)
    for (int px = 0; px < kTokenSide; ++px) {
      float* dst = out.data() + (py * kTokenSide + px) * kPatchDim;
      for (int y = 0; y < kPatch; ++y)
        for (int x = 0; x < kPatch; ++x)
          for (int c = 0; c < 3; ++c)
            dst[(y * kPatch + x) * 3 + c] = img.at(py * kPatch + y, px * kPatch + x, c);
    }
  return out;
}

namespace {

double patch_dist2(const float* a, const float* b) {
  double d = 0;
  for (int i = 0; i < kPatchDim; ++i) {
    double diff = static_cast<double>(a[i]) - b[i];
    d += diff * diff;
  }
  return d;
}

struct WeightedPatches {
  std::vector<float> points;  // U x kPatchDim, unique
  std::vector<int64_t> weights;
};

WeightedPatches unique_patches(const std::vector<Image>& images) {
  std::map<std::vector<float>, int64_t> counts;
  std::vector<float> key(kPatchDim);
  for (const auto& img : images) {
    auto patches = image_patches(img);
    for (int p = 0; p < kTokens; ++p) {
      std::copy_n(patches.data() + p * kPatchDim, kPatchDim, key.begin());
      ++counts[key];
    }
  }
  WeightedPatches out;
  out.points.reserve(counts.size() * kPatchDim);
  for (const auto& [patch, count] : counts) {
    out.points.insert(out.points.end(), patch.begin(), patch.end());
    out.weights.push_back(count);
  }
  return out;
}

}  // namespace

std::vector<Image> diversity_images(uint64_t seed, int noise_count) {
  std::vector<Image> out;
  for (int c = 0; c < world::kColors; ++c) {
    Image img;
    auto rgb = world::color_rgb(static_cast<world::Color>(c));
    for (int y = 0; y < Image::kSize; ++y)
      for (int x = 0; x < Image::kSize; ++x)
        for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = rgb[ch];
    out.push_back(img);
  }
  // low-amplitude textures near the background: enough distinct patches to
  // meet the k-means precondition without pulling centroids away from the
  // patch atoms the renders actually produce
  Rng rng(Rng::mix(seed, 0x7e97));
  for (int i = 0; i < noise_count; ++i) {
    Image img;
    for (auto& v : img.px)
      v = world::kBackground + static_cast<float>(rng.uniform(-0.06, 0.06));
    out.push_back(img);
  }
  return out;
}

Codebook train_codebook(const std::vector<Image>& images, uint64_t seed,
                        int iterations) {
  auto wp = unique_patches(images);
  int64_t unique = static_cast<int64_t>(wp.weights.size());
  check(unique >= kCodebookSize,
        "train_codebook: only " + std::to_string(unique) +
            " distinct patches available, need at least " +
            std::to_string(kCodebookSize));

  const int K = kCodebookSize;
  const float* pts = wp.points.data();
  Rng init_rng(Rng::mix(seed, 0xc0de));

  // k-means++ init over the weighted unique points
  std::vector<float> centers(static_cast<size_t>(K) * kPatchDim);
  std::vector<double> d2(unique, std::numeric_limits<double>::infinity());
  {
    // first seed: weighted uniform
    std::vector<double> w(unique);
    for (int64_t i = 0; i < unique; ++i) w[i] = static_cast<double>(wp.weights[i]);
    int64_t first = init_rng.categorical(w);
    std::copy_n(pts + first * kPatchDim, kPatchDim, centers.begin());
    for (int k = 1; k < K; ++k) {
      const float* last = centers.data() + (k - 1) * kPatchDim;
      for (int64_t i = 0; i < unique; ++i)
        d2[i] = std::min(d2[i], patch_dist2(pts + i * kPatchDim, last));
      std::vector<double> probs(unique);
      for (int64_t i = 0; i < unique; ++i)
        probs[i] = d2[i] * static_cast<double>(wp.weights[i]);
      int64_t pick = init_rng.categorical(probs);
      std::copy_n(pts + pick * kPatchDim, kPatchDim, centers.data() + k * kPatchDim);
    }
  }

  // Lloyd iterations on the weighted points
  std::vector<int> assign(unique, 0);
  for (int it = 0; it < iterations; ++it) {
    for (int64_t i = 0; i < unique; ++i) {
      const float* p = pts + i * kPatchDim;
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) {
        double d = patch_dist2(p, centers.data() + k * kPatchDim);
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      assign[i] = best;
    }
    std::vector<double> acc(static_cast<size_t>(K) * kPatchDim, 0.0);
    std::vector<int64_t> mass(K, 0);
    for (int64_t i = 0; i < unique; ++i) {
      int k = assign[i];
      mass[k] += wp.weights[i];
      const float* p = pts + i * kPatchDim;
      double w = static_cast<double>(wp.weights[i]);
      for (int d = 0; d < kPatchDim; ++d) acc[k * kPatchDim + d] += w * p[d];
    }
    for (int k = 0; k < K; ++k) {
      if (mass[k] > 0) {
        for (int d = 0; d < kPatchDim; ++d)
          centers[k * kPatchDim + d] =
              static_cast<float>(acc[k * kPatchDim + d] / static_cast<double>(mass[k]));
      } else {
        // empty cluster: reseed deterministically to the point farthest from
        // its current center
        int64_t far_i = 0;
        double far_d = -1;
        for (int64_t i = 0; i < unique; ++i) {
          double d = patch_dist2(pts + i * kPatchDim,
                                 centers.data() + assign[i] * kPatchDim);
          if (d > far_d) {
            far_d = d;
            far_i = i;
          }
        }
        std::copy_n(pts + far_i * kPatchDim, kPatchDim, centers.data() + k * kPatchDim);
        assign[far_i] = k;
      }
    }
  }

  Codebook cb;
  cb.codes = std::move(centers);
  cb.trained = true;

  // invariant: no two code vectors identical
  for (int a = 0; a < K; ++a)
    for (int b = a + 1; b < K; ++b)
      if (patch_dist2(cb.code(a), cb.code(b)) == 0.0)
        fail("train_codebook: duplicate code vectors " + std::to_string(a) +
             " and " + std::to_string(b));
  return cb;
}

TokenGrid encode_tokens(const Image& img, const Codebook& cb) {
  check(cb.trained, "encode_tokens: codebook is not trained");
  auto patches = image_patches(img);
  TokenGrid grid;
  for (int p = 0; p < kTokens; ++p) {
    const float* patch = patches.data() + p * kPatchDim;
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < kCodebookSize; ++k) {
      double d = patch_dist2(patch, cb.code(k));
      if (d < best_d) {  // strict: ties break to the lowest id
        best_d = d;
        best = k;
      }
    }
    grid.ids[p] = static_cast<uint16_t>(best);
  }
  return grid;
}

double quantization_mse(const Codebook& cb, const std::vector<Image>& images) {
  double total = 0;
  int64_t n = 0;
  for (const auto& img : images) {
    auto patches = image_patches(img);
    for (int p = 0; p < kTokens; ++p) {
      const float* patch = patches.data() + p * kPatchDim;
      double best = std::numeric_limits<double>::infinity();
      for (int k = 0; k < kCodebookSize; ++k)
        best = std::min(best, patch_dist2(patch, cb.code(k)));
      total += best;
      n += kPatchDim;
    }
  }
  return total / static_cast<double>(n);
}

double codebook_utilization(const Codebook& cb, const std::vector<Image>& images) {
  std::vector<bool> used(kCodebookSize, false);
  for (const auto& img : images) {
    TokenGrid g = encode_tokens(img, cb);
    for (uint16_t id : g.ids) used[id] = true;
  }
  int n = 0;
  for (bool u : used) n += u;
  return static_cast<double>(n) / kCodebookSize;
}

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

Tensor image_to_tensor(const Image& img) {
  Tensor t = Tensor::zeros({3, Image::kSize, Image::kSize});
  auto& d = t.data();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < Image::kSize; ++y)
      for (int x = 0; x < Image::kSize; ++x)
        d[(c * Image::kSize + y) * Image::kSize + x] = img.at(y, x, c);
  return t;
}

Image tensor_to_image(const Tensor& t) {
  check(t.shape() == std::vector<int>({3, Image::kSize, Image::kSize}),
        "tensor_to_image: expected [3,32,32], got " + shape_str(t.shape()));
  Image img;
  const auto& d = t.data();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < Image::kSize; ++y)
      for (int x = 0; x < Image::kSize; ++x)
        img.at(y, x, c) = d[(c * Image::kSize + y) * Image::kSize + x];
  img.clamp01();
  return img;
}

LatentGrid vae_encode(const Vae& vae, const Image& img) {
  check(vae.trained, "vae_encode: autoencoder is not trained");
  Tensor z = vae.encode(nullptr, image_to_tensor(img));
  LatentGrid out;
  std::copy(z.data().begin(), z.data().end(), out.v.begin());
  return out;
}

Image vae_decode(const Vae& vae, const LatentGrid& z) {
  check(vae.trained, "vae_decode: autoencoder is not trained");
  Tensor zt = Tensor::from_data({kLatentChannels, kLatentSide, kLatentSide},
                                std::vector<float>(z.v.begin(), z.v.end()));
  Tensor img = vae.decode(nullptr, zt);
  return tensor_to_image(img);
}

VaeTrainResult train_vae(Vae& vae, const std::vector<Image>& images,
                         const VaeTrainConfig& cfg) {
  check(!images.empty(), "train_vae: no images");
  Rng rng(Rng::mix(cfg.seed, 0x7ae));
  vae.init(rng, cfg.hidden);

  auto params = vae.named_params("vae");
  Adam opt;
  opt.lr = cfg.lr;
  opt.init(params);

  // cache image tensors
  std::vector<Tensor> tensors;
  tensors.reserve(images.size());
  for (const auto& img : images) tensors.push_back(image_to_tensor(img));

  VaeTrainResult result;
  result.loss_curve.reserve(cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    Tape tape;
    Tensor loss;
    for (int b = 0; b < cfg.batch; ++b) {
      const Tensor& x = tensors[rng.uniform_index(tensors.size())];
      Tensor z = vae.encode(&tape, x);
      Tensor rec = vae.decode(&tape, z);
      Tensor l = mean_squared_error<float>(&tape, rec, x);
      loss = loss.defined() ? add<float>(&tape, loss, l) : l;
    }
    loss = scale<float>(&tape, loss, 1.0f / static_cast<float>(cfg.batch));
    tape.backward(loss);
    opt.step(params);
    result.loss_curve.push_back(loss.item());
  }
  vae.trained = true;
  return result;
}

}  // namespace flowgen::codec
