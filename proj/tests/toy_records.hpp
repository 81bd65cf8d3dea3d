#pragma once

#include <string>
#include <vector>

#include "simcmf/data.hpp"

namespace simcmf::testing {

// Record with instances taken from a semantic grid.
inline ModalityRecord record_from(const std::string& id, Tensor image, const LabelGrid& semantic,
                                  Split split = Split::train) {
  ModalityRecord r;
  r.id = id;
  r.channels = image.dim(0);
  r.image = std::move(image);
  r.split = split;
  r.instances = decompose_semantic_to_instances(semantic);
  return r;
}

// Two well separated blobs (a square on the left, a disc on the right) on a
// C-channel S x S image. Every channel carries the signal with its own gain.
inline ModalityRecord two_blob_record(const std::string& id, std::int64_t channels = 9,
                                      std::int64_t S = 32, std::uint64_t seed = 0) {
  LabelGrid g(S, S, std::vector<std::int64_t>(static_cast<std::size_t>(S * S), 0));
  for (std::int64_t r = 0; r < S; ++r)
    for (std::int64_t c = 0; c < S; ++c) {
      if (r >= S / 4 && r < S / 4 + S / 3 && c >= 2 && c < 2 + S / 3) g.labels[r * S + c] = 1;
      const double dr = r - 0.65 * S, dc = c - 0.72 * S;
      if (dr * dr + dc * dc <= (S / 5.0) * (S / 5.0)) g.labels[r * S + c] = 2;
    }
  Rng rng(seed);
  auto img = Tensor::zeros({channels, S, S});
  auto px = img.mutable_data();
  for (std::int64_t ch = 0; ch < channels; ++ch) {
    const double gain = 0.5 + 0.1 * static_cast<double>(ch % 5);
    for (std::int64_t i = 0; i < S * S; ++i) {
      const double v = g.labels[i] == 1 ? 1.0 : g.labels[i] == 2 ? -1.0 : 0.0;
      px[ch * S * S + i] = gain * v + 0.02 * rng.normal();
    }
  }
  return record_from(id, std::move(img), g);
}

inline std::vector<const ModalityRecord*> pointers(const std::vector<ModalityRecord>& v) {
  std::vector<const ModalityRecord*> out;
  for (const auto& r : v) out.push_back(&r);
  return out;
}

}  // namespace simcmf::testing
