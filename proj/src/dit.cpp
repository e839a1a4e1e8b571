#include "flowgen/dit.hpp"

namespace flowgen::dit {

const char* cond_mode_name(CondMode m) {
  switch (m) {
    case CondMode::none: return "none";
    case CondMode::cross_attn: return "cross_attn";
    case CondMode::noise_concat: return "noise_concat";
    case CondMode::both: return "both";
  }
  fail("cond_mode_name: bad mode");
}

CondMode cond_mode_from_name(const std::string& name) {
  for (CondMode m : {CondMode::none, CondMode::cross_attn, CondMode::noise_concat,
                     CondMode::both})
    if (name == cond_mode_name(m)) return m;
  fail("unknown conditioning mode '" + name + "'");
}

codec::LatentGrid tokens_to_latent(const std::vector<float>& position_major) {
  check(position_major.size() ==
            static_cast<size_t>(kPositions) * kChannels,
        "tokens_to_latent: bad length");
  codec::LatentGrid out;
  for (int y = 0; y < codec::kLatentSide; ++y)
    for (int x = 0; x < codec::kLatentSide; ++x)
      for (int c = 0; c < kChannels; ++c)
        out.at(c, y, x) = position_major[(y * codec::kLatentSide + x) * kChannels + c];
  return out;
}

}  // namespace flowgen::dit
