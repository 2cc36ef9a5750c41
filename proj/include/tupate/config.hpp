#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "tupate/numerics.hpp"

namespace tupate {

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 16;
  std::size_t d_h = 32;
  std::size_t n_heads = 2;
  std::size_t n_layers = 2;
  std::size_t d_ffn = 64;
  std::size_t n_classes = 2;

  std::size_t head_dim() const { return d_h / n_heads; }

  void validate() const {
    if (vocab_size == 0 || max_seq_len == 0 || d_h == 0 || n_heads == 0 || n_layers == 0 ||
        d_ffn == 0 || n_classes == 0) {
      throw Error("model config: all sizes must be positive");
    }
    if (d_h % n_heads != 0) {
      throw Error("model config: d_h " + std::to_string(d_h) + " not divisible by n_heads " +
                  std::to_string(n_heads));
    }
  }

  /// Stable textual form, used for hashing and manifests.
  std::string canonical() const {
    return "vocab=" + std::to_string(vocab_size) + ";seq=" + std::to_string(max_seq_len) +
           ";d_h=" + std::to_string(d_h) + ";heads=" + std::to_string(n_heads) +
           ";layers=" + std::to_string(n_layers) + ";ffn=" + std::to_string(d_ffn) +
           ";classes=" + std::to_string(n_classes);
  }

  std::uint64_t hash() const { return Rng::fnv1a(canonical()); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace tupate
