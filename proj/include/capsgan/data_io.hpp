#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "capsgan/tensor.hpp"

namespace capsgan {

// ---------------------------------------------------------------------------
// Datasets (IDX files, 28x28 grayscale)
// ---------------------------------------------------------------------------

struct Dataset {
    Tensor images;            // [N,1,28,28], values in [-1,1]
    std::vector<int> labels;  // empty when no label file was given

    int64_t count() const { return images.dim(0); }
    bool has_labels() const { return !labels.empty(); }
};

// pixel <-> value maps; denormalize(normalize(p)) == p for every p in 0..255
float normalize_pixel(uint8_t p);
uint8_t denormalize_pixel(float x);

// Parses IDX files (big-endian headers, magic 0x00000803 for images and
// 0x00000801 for labels). Every malformed input raises a DataFormatError
// with a specific kind.
Dataset load_idx(const std::string& images_path, const std::string& labels_path = "");

void write_idx_images(const std::string& path, const std::vector<uint8_t>& pixels, int64_t count,
                      int64_t rows = 28, int64_t cols = 28);
void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels);

// Deterministic per-epoch shuffle; the trailing partial batch is dropped.
std::vector<std::vector<int64_t>> make_batches(int64_t count, int64_t batch_size, uint64_t seed,
                                               int64_t epoch);

Tensor gather_images(const Dataset& ds, const std::vector<int64_t>& indices);
std::vector<int> gather_labels(const Dataset& ds, const std::vector<int64_t>& indices);

// ---------------------------------------------------------------------------
// Sample grids (binary PGM, 2px black separators)
// ---------------------------------------------------------------------------

void write_image_grid(const Tensor& samples, int rows, int cols, const std::string& path);

struct PgmImage {
    int64_t width = 0, height = 0;
    std::vector<uint8_t> pixels;
};
PgmImage read_pgm(const std::string& path);

// ---------------------------------------------------------------------------
// Checkpoint container. Layout (all integers little-endian):
//   magic "CGANCKPT" | u32 version | u32 arch-name length + bytes
//   tensor section:  u32 count | per entry: u32 name length + bytes,
//                    u32 rank, u64 dims[rank] | f32 payloads in entry order
//   optimizer section: same scheme
//   counter section: u32 count | per entry: u32 name length + bytes, u64 value
// ---------------------------------------------------------------------------

struct Checkpoint {
    uint32_t version = 1;
    std::string arch;
    NamedTensors tensors;
    NamedTensors opt_tensors;
    std::vector<std::pair<std::string, uint64_t>> counters;

    uint64_t counter(const std::string& name) const;  // throws CheckpointError if absent
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace capsgan
