#pragma once

#include <random>
#include <string>
#include <vector>

#include "gisp/data.hpp"
#include "gisp/model.hpp"

namespace fixtures {

inline gisp::ModelConfig tiny_config(int layers = 2, std::uint64_t seed = 0) {
  gisp::ModelConfig c;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_ff = 6;
  c.max_seq_len = 16;
  c.rng_seed = seed;
  return c;
}

// Weights with larger spread than init_weights so masking effects are visible.
inline gisp::TransformerWeights noisy_weights(const gisp::ModelConfig& c, std::uint64_t seed) {
  auto w = gisp::init_weights(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  w.for_each([&](const std::string& name, gisp::Tensor& t) {
    const bool gain = name.find("norm") != std::string::npos;
    for (auto& x : t.storage()) x = gain ? 1.0 + 0.2 * n(rng) : n(rng);
  });
  return w;
}

inline std::vector<int> random_tokens(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> d(0, 255);
  std::vector<int> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

// Removes random structures while respecting the floor rule.
inline gisp::MaskState random_masks(const gisp::ModelConfig& c, std::mt19937_64& rng, double p) {
  gisp::MaskState m(c);
  std::bernoulli_distribution drop(p);
  for (const auto& id : gisp::enumerate_structures(c)) {
    if (drop(rng) && !m.would_violate_floor(id)) m.remove(id);
  }
  return m;
}

inline std::string small_corpus() {
  gisp::WorldSpec w;
  w.entities = 12;
  return gisp::make_synthetic_corpus(w, 20000, 3);
}

}  // namespace fixtures
