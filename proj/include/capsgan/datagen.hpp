#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "capsgan/data_io.hpp"

namespace capsgan {

// Procedurally rendered 28x28 handwritten-style digits: per-class stroke
// skeletons drawn with jittered affine pose, stroke width and anti-aliased
// falloff. Fully determined by the seed.

struct DigitsDataset {
    std::vector<uint8_t> pixels;  // count * 28 * 28, row-major
    std::vector<uint8_t> labels;  // count entries, 0..9
    int64_t count = 0;
};

// one 28x28 tile
void render_digit(int digit, Rng& rng, uint8_t* out);

// near-balanced random labels
DigitsDataset generate_digits(int64_t count, uint64_t seed);

// writes <prefix>-images.idx / <prefix>-labels.idx
void write_digits_idx(const DigitsDataset& ds, const std::string& prefix);

// in-memory conversion to the normalized training representation
Dataset digits_to_dataset(const DigitsDataset& ds);

}  // namespace capsgan
