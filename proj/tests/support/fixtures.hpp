#pragma once

#include "firescan/models.hpp"
#include "firescan/synthgen.hpp"

namespace fixtures {

// Classifier whose weights are set by hand so that its output is > 0.5
// exactly when some pixel of `band` exceeds `cut` by more than `margin`.
// Stage 1 passes relu(x_band - cut) through channel 0, later stages copy
// channel 0 forward, and the head scales the global maximum.
inline firescan::Classifier band_detector(const std::vector<int>& bands, int band, float cut, float margin = 0.01f) {
  using namespace firescan;
  Classifier net(NetworkSpec::classifier(bands), 0);
  std::size_t pos = 0;
  while (bands[pos] != band) ++pos;
  for (auto& [name, t] : net.parameters()) t->fill(0.0f);
  for (auto& [name, t] : net.parameters())
    if (name.find("bn.gamma") != std::string::npos) t->fill(1.0f);
  for (auto& [name, t] : net.buffers()) t->fill(name.find("running_var") != std::string::npos ? 1.0f : 0.0f);
  const std::size_t k = net.spec().kernel, center = (k / 2) * k + k / 2;
  for (auto& [name, t] : net.parameters()) {
    if (name == "enc1.conv.weight") (*t)[pos * k * k + center] = 1.0f;
    if (name == "enc1.conv.bias") (*t)[0] = -cut;
    if (name == "enc2.conv.weight" || name == "enc3.conv.weight") (*t)[center] = 1.0f;
  }
  net.dense_weight()[0] = 1.0f / margin;
  net.dense_bias()[0] = -1.0f;
  return net;
}

// Single-patch scenes with or without fire, as a patch list.
inline firescan::DatasetSplit feed_patches(std::size_t count, std::size_t positives, std::size_t size,
                                           std::uint64_t seed) {
  firescan::PatchSetSpec ps;
  ps.count = count;
  ps.size = size;
  ps.positive_fraction = static_cast<double>(positives) / static_cast<double>(count);
  return firescan::generate_patch_set(ps, seed);
}

}  // namespace fixtures
