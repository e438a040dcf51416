#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "irnet/tensor.hpp"

namespace irnet {

// Label encoding is fixed: 0 = NORMAL, 1 = PNEUMONIA (the positive class).
constexpr int kLabelNormal = 0;
constexpr int kLabelPneumonia = 1;

const char* label_name(int label);
int label_from_name(const std::string& name);  // throws on unknown names

struct Sample {
  Tensor image;  // (H,W,C), values in [0,1]
  int label = 0;
  std::string id;
};

struct ManifestRow {
  std::string path;
  int label = 0;
  std::string split;  // "train" or "test"
};

struct DatasetManifest {
  std::string base_dir;  // paths are relative to the manifest's directory
  std::vector<ManifestRow> rows;

  std::vector<ManifestRow> split_rows(const std::string& split) const {
    std::vector<ManifestRow> out;
    for (const auto& r : rows) {
      if (r.split == split) out.push_back(r);
    }
    return out;
  }
};

// CSV with header "path,label,split"; label in {NORMAL, PNEUMONIA}, split in
// {train, test}. Malformed rows are reported with their line number.
DatasetManifest load_manifest(const std::string& path);

// Binary PGM (P5) / PPM (P6), 8-bit only. Grayscale is replicated to three
// channels; values are scaled to [0,1].
Tensor decode_image(const std::string& path);

// Half-pixel-centered bilinear resize to a square target.
Tensor resize_bilinear(const Tensor& image, int64_t target);

// Decode (and optionally resize) every row of one split.
std::vector<Sample> load_samples(const DatasetManifest& manifest, const std::string& split,
                                 int64_t resize_to = 0);

struct FoldAssignment {
  std::vector<std::vector<std::string>> folds;  // per fold: sample ids
};

// Stratified k-fold over (id, label) pairs: folds are disjoint, exhaustive,
// sizes differ by at most one overall and per class; deterministic by seed.
FoldAssignment stratified_kfold(const std::vector<std::pair<std::string, int>>& id_labels, int k,
                                uint64_t seed);

// One epoch of batch index lists: a seeded permutation (or input order when
// shuffle is off) chopped into batches, final short batch kept.
std::vector<std::vector<int64_t>> batch_indices(int64_t n, int64_t batch_size, uint64_t seed,
                                                bool shuffle);

// Stacks samples into a (B,S,S,C) tensor, resizing each image to `input_size`
// when it is not already that size.
std::pair<Tensor, std::vector<int>> assemble_batch(const std::vector<Sample>& samples,
                                                   const std::vector<int64_t>& indices,
                                                   int64_t input_size);

enum class SyntheticTask {
  OpacityPresence,  // class 1 carries hard-edged elliptical opacities
  BlobPosition,     // class by blob center in the left vs right half
};

// Deterministic two-class stand-in for the radiograph data: smooth Gaussian
// blob per image, plus per-class structure, plus pixel noise (sigma 0.05,
// clipped to [0,1]). Classes are balanced; n must be even.
std::vector<Sample> gen_synthetic(int64_t n, int64_t image_size, uint64_t seed,
                                  SyntheticTask task = SyntheticTask::OpacityPresence);

}  // namespace irnet
