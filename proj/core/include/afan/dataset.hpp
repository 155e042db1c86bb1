#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "afan/tensor.hpp"

namespace afan {

enum class Split : uint8_t { kTrain = 0, kVal = 1, kTest = 2 };

// Labeled inputs with a split-tag partition. Inputs live in [0,1].
struct Dataset {
  Tensor inputs;  // [N,D] vectors or [N,C,H,W] images
  std::vector<int> labels;
  int classes = 2;
  std::vector<Split> tags;
  std::string provenance;  // generator id + seed, or source path

  int64_t size() const { return inputs.defined() ? inputs.dim(0) : 0; }
  std::vector<int64_t> indices_of(Split s) const;
  void validate() const;
};

struct SyntheticOptions {
  double test_fraction = 0.25;
  double noise = 0.08;  // kind-specific noise scale
  int classes = 0;      // 0 = kind default (blobs 2, spirals 2, shapes16 4)
};

// blobs:    Gaussian clusters in the unit square (vector inputs for mlp)
// spirals:  interleaved spirals in the unit square (vector inputs for mlp)
// shapes16: 16x16x1 procedural shape images (disk, square, cross, ring)
// Deterministic per seed; classes balanced (exact when n divides evenly).
Dataset gen_synthetic(const std::string& kind, int64_t n, uint64_t seed,
                      const SyntheticOptions& opt = {});

// csv-vectors: one sample per line, comma-separated features then an integer
// label. Full-precision round trip.
Dataset load_csv_vectors(const std::string& path, int classes = 0, Split tag = Split::kTrain);
void save_csv_vectors(const Dataset& ds, const std::string& path);

// raw-gray-images: magic "AFIG", u32 {count, H, W, classes} little-endian,
// then per sample H*W bytes (0..255, scaled to [0,1]) and one label byte.
Dataset load_raw_gray(const std::string& path, Split tag = Split::kTrain);
void save_raw_gray(const Dataset& ds, const std::string& path);

// Tags every sample of `test` as kTest and appends it to `train`.
Dataset concat_as_test(Dataset train, const Dataset& test);

// New dataset holding the selected samples, uniformly retagged.
Dataset subset(const Dataset& ds, const std::vector<int64_t>& idx, Split tag);

// Batch assembly; an empty index list is a domain error.
Tensor gather_inputs(const Dataset& ds, const std::vector<int64_t>& idx);
std::vector<int> gather_labels(const Dataset& ds, const std::vector<int64_t>& idx);

}  // namespace afan
