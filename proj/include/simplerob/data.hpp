#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "simplerob/tensor.hpp"

namespace simplerob::data {

struct Dataset {
  ad::Tensor inputs;                // [n × ...]
  std::vector<std::size_t> labels;  // [n], each in [0, num_classes)
  std::size_t num_classes = 0;
  std::string name;

  std::size_t size() const { return labels.size(); }
  ad::Shape example_shape() const;

  // Throws PreconditionError on empty data, label/input count mismatch or
  // out-of-range labels.
  void validate() const;

  ad::Tensor gather_inputs(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> gather_labels(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_counts() const;
};

// Total map from original classes onto [0, new_num_classes).
struct RelabelMap {
  std::vector<std::size_t> mapping;
  std::size_t new_num_classes = 0;

  std::size_t operator()(std::size_t original) const { return mapping.at(original); }
  // Totality and surjectivity.
  void validate() const;
};

// k Gaussian blobs in 2-D; class c centred on the unit circle at angle 2πc/k
// with isotropic standard deviation `spread`.
Dataset gen_gaussians(std::size_t k, std::size_t n_per_class, double spread, std::uint64_t seed);

// ---- IDX ------------------------------------------------------------------

class IdxError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, CountMismatch, Truncated, Io };
  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// Images scaled to [0,1], shaped [n×1×H×W]; `downsample` applies 2×2 average
// pooling (odd trailing rows/columns dropped).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, bool downsample = true);

void write_idx_images(const std::filesystem::path& path, std::size_t rows, std::size_t cols,
                      std::span<const std::uint8_t> pixels);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

// ---- relabelling ------------------------------------------------------------

// 0-based form of MODEL[j]: classes 0..j−2 keep their index, j−1..k−1 merge
// into j−1. Requires 2 ≤ j ≤ k.
RelabelMap make_model_j(std::size_t k, std::size_t j);

// Indicator of class i: 1 for class i, 0 otherwise.
RelabelMap make_one_vs_all(std::size_t k, std::size_t i);

// Uniformly random bijection of [0, k). Deterministic in seed.
RelabelMap class_permutation(std::size_t k, std::uint64_t seed);

// Labels rewritten through `map`; inputs are shared, not copied.
Dataset relabel(const Dataset& dataset, const RelabelMap& map);

// ---- batching ---------------------------------------------------------------

// Shuffled mini-batches covering all n indices once; last batch may be short.
std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed);

// Half-positive, half-negative batches for a 0/1-labelled dataset. Negatives
// are visited without replacement once per epoch (the last batch wraps to the
// start of the permutation); positives are drawn with replacement when they
// are the minority, otherwise without.
class BalancedBatches {
 public:
  BalancedBatches(std::span<const std::size_t> binary_labels, std::size_t batch_size, std::uint64_t seed);

  std::size_t batches_per_epoch() const;
  std::vector<std::vector<std::size_t>> epoch(std::size_t index) const;

 private:
  std::vector<std::size_t> positives_;
  std::vector<std::size_t> negatives_;
  std::size_t half_;
  std::uint64_t seed_;
};

// ---- CSV (2-D synthetic data) -------------------------------------------------

void write_csv(std::ostream& out, const Dataset& dataset);
Dataset read_csv(std::istream& in, const std::string& name = "csv");

}  // namespace simplerob::data
