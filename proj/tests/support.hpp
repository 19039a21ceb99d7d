// SPDX-License-Identifier: Apache-2.0
// Shared fixtures for the unit and acceptance tests.
#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "seqlidar/equirect.hpp"
#include "seqlidar/metrics.hpp"
#include "seqlidar/scene.hpp"

namespace seqlidar::testing {

inline SensorConfig desk_sensor() {
  SensorConfig cfg;
  cfg.H = 32;
  cfg.W = 128;
  return cfg;
}

inline std::vector<SequenceSample> synth_set(std::uint64_t first_seed, std::size_t count, std::size_t frames,
                                             const SensorConfig& cfg) {
  std::vector<SequenceSample> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t seed = first_seed + i;
    out.push_back(simulate_sequence(synth_world(seed, WorldParams{}), frames, cfg, seed));
  }
  return out;
}

inline std::vector<FrameSequence> frames_of(const std::vector<SequenceSample>& set) {
  std::vector<FrameSequence> out;
  for (const auto& s : set) out.push_back(s.frames);
  return out;
}

/// Adds N(0, amp^2) to both channels of occupied bins; the mask is kept.
inline std::vector<FrameSequence> corrupt(const std::vector<FrameSequence>& set, double amp, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<FrameSequence> out = set;
  for (auto& seq : out) {
    for (auto& img : seq) {
      const std::size_t plane = img.mask.size();
      for (std::size_t p = 0; p < plane; ++p) {
        const double e0 = n(rng), e1 = n(rng);
        if (!img.mask[p]) continue;
        img.channels[p] = static_cast<float>(std::clamp(img.channels[p] + amp * e0, -1.0, 1.0));
        img.channels[plane + p] = static_cast<float>(std::clamp(img.channels[plane + p] + amp * e1, 0.0, 1.0));
      }
    }
  }
  return out;
}

/// Frames of uniform noise in [-1, 1] decoded like generated output.
inline std::vector<FrameSequence> noise_set(std::size_t count, std::size_t frames, const SensorConfig& cfg,
                                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<FrameSequence> out(count);
  for (auto& seq : out) {
    for (std::size_t f = 0; f < frames; ++f) {
      Tensor<float> ch({2, cfg.H, cfg.W});
      for (auto& v : ch.data()) v = u(rng);
      seq.push_back(image_from_channels(std::move(ch), cfg));
    }
  }
  return out;
}

}  // namespace seqlidar::testing
