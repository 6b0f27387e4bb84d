#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "maslora/model.hpp"

namespace maslora {

// Checkpoint directory layout:
//   header.txt          config echo, seed, matrix index
//   weights/<name>.bin  base matrices, one blob per matrix
//   adapters/index.txt  layer-path, accent, d, k, r, alpha per expert
//   adapters/<...>.bin  A and B factor blobs
// Blobs are two little-endian int64 dims followed by raw doubles.
void save_model(const std::string& dir, const Transformer& m, uint64_t seed);
Transformer load_model(const std::string& dir, uint64_t* seed_out = nullptr);

void write_blob(const std::string& path, const Mat& m);
Mat read_blob(const std::string& path);

// Snapshot of every base matrix by name, for reusing one pretrained
// backbone across many fine-tuning configs.
std::map<std::string, Mat> base_weights(Transformer& m);
void apply_base_weights(Transformer& m, const std::map<std::string, Mat>& weights);

}  // namespace maslora
