#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "simplerob/tensor.hpp"

namespace simplerob::models {

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
};

struct Conv {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t padding = 0;
};

struct Relu {};
struct Flatten {};

using Layer = std::variant<Dense, Conv, Relu, Flatten>;

struct ModelSpec {
  ad::Shape input_shape;  // per example, without the batch axis
  std::vector<Layer> layers;

  // Number of logits. Throws when the layer chain does not compose.
  std::size_t output_dim() const;
  // Checks that adjacent layers compose and the output is a flat vector.
  void validate() const;

  // Round-trippable text form, e.g. "in=2;dense(2,64);relu;dense(64,3)".
  std::string describe() const;
  static ModelSpec parse(std::string_view text);

  bool operator==(const ModelSpec&) const;
};

ModelSpec mlp(std::size_t inputs, std::span<const std::size_t> hidden, std::size_t outputs);
// conv(c→8,3×3)-relu-conv(8→16,3×3)-relu-flatten-dense(→outputs).
ModelSpec small_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t outputs);

// The same architecture with its final dense layer resized to `outputs`.
ModelSpec with_outputs(ModelSpec spec, std::size_t outputs);

// Named weights, keyed "layerNN.weight" / "layerNN.bias".
using Parameters = std::map<std::string, ad::Tensor>;

// He-normal weights (std = sqrt(2 / fan_in)), zero biases. Deterministic in seed.
Parameters init_model(const ModelSpec& spec, std::uint64_t seed);

// Logits [batch×k]. Tape-aware: gradients flow to any parameter or input that
// requires them.
ad::Tensor forward(const ModelSpec& spec, const Parameters& params, const ad::Tensor& x);

// Shape check of params against spec; the message names both shapes.
void check_parameters(const ModelSpec& spec, const Parameters& params);

// Row-wise argmax, lowest index on ties.
std::vector<std::size_t> argmax_rows(const ad::Tensor& logits);

// A spec plus trained parameters.
struct Model {
  ModelSpec spec;
  Parameters params;

  // Class logits. Single-logit models are lifted to (0, s) so that every
  // model is a ≥2-class scorer to the attacks.
  ad::Tensor logits(const ad::Tensor& x) const;
  std::vector<std::size_t> predict(const ad::Tensor& x) const;
  std::size_t num_classes() const;
};

// Class-logit function of a batch; the common currency of the attack code.
using LogitFn = std::function<ad::Tensor(const ad::Tensor&)>;
LogitFn logit_fn(const Model& model);

// ---- checkpoint (.rbn) ---------------------------------------------------

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, VersionMismatch, Truncated, Malformed, Io };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> save_checkpoint(const Parameters& params);
Parameters load_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, const Parameters& params);
Parameters read_checkpoint(const std::filesystem::path& path);

}  // namespace simplerob::models
