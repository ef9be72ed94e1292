#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace creat::model {

// A masked-LM prediction site: token `token` is expected at `position` of
// example `example`.
struct MaskedTarget {
  std::size_t example = 0;
  std::size_t position = 0;
  std::size_t token = 0;

  bool operator==(const MaskedTarget&) const = default;
};

// A padded batch of token sequences, row-major [size, seq_len].
// mask[i] == 1 marks a real token, 0 marks padding.
struct Batch {
  std::size_t size = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> labels;     // classification
  std::vector<MaskedTarget> targets;   // masked LM

  std::span<const std::uint8_t> example_mask(std::size_t b) const {
    return std::span<const std::uint8_t>(mask).subspan(b * seq_len, seq_len);
  }
  std::size_t real_tokens(std::size_t b) const;
  // Throws InputError if shapes are inconsistent or an example has no real token.
  void validate() const;
};

}  // namespace creat::model
