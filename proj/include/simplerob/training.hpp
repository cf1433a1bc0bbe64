#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "simplerob/attacks.hpp"
#include "simplerob/data.hpp"
#include "simplerob/models.hpp"
#include "simplerob/tensor.hpp"

namespace simplerob::training {

enum class Defense { Standard, AdvTrain, Trades, Mart };

std::string to_string(Defense defense);
Defense parse_defense(std::string_view text);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double learning_rate = 0.1;
  // Epochs (0-based) at whose start the rate is multiplied by decay_factor.
  // Empty means a single decay at epochs / 2.
  std::vector<std::size_t> decay_epochs;
  double decay_factor = 0.1;
  double weight_decay = 5e-4;
  Defense defense = Defense::Standard;
  double lambda = 1.0;
  // Cosine warm-up of the adversarial share; AdvTrain always uses it, the
  // surrogate losses only when this is set.
  bool warmup_surrogates = false;
  // Half-positive batches for 0/1 tasks.
  bool balanced = false;
  attacks::AttackConfig attack;
  std::uint64_t seed = 0;

  void validate() const;
  double learning_rate_at(std::size_t epoch) const;
  // Share of each batch that is adversarial during `epoch` (0-based).
  double adversarial_share(std::size_t epoch) const;
};

// 1 − ½(1 + cos(πt/T)). Requires 0 ≤ t ≤ T and T > 0.
double warmup_fraction(double t, double total);

class TrainError : public std::runtime_error {
 public:
  TrainError(std::size_t epoch, std::size_t batch, const std::string& what)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

struct EpochLog {
  std::size_t epoch = 0;
  double clean_loss = 0.0;    // mean cross-entropy over the training set after the epoch
  double adv_fraction = 0.0;  // adversarial share used during the epoch
  double train_acc = 0.0;     // clean training accuracy after the epoch
};

struct TrainResult {
  models::Parameters params;
  std::vector<EpochLog> log;
};

// Class logits of spec/params on x, lifting single-logit models to (0, s).
ad::Tensor class_logits(const models::ModelSpec& spec, const models::Parameters& params, const ad::Tensor& x);

// Per-row CE(h(x), y) + λ·KL(h(x) ‖ h(x′)) from precomputed logits.
ad::Tensor trades_rows(const ad::Tensor& clean_logits, const ad::Tensor& adv_logits, std::span<const std::size_t> labels,
                       double lambda);
// Per-row BCE(h(x′), y) + λ·KL(h(x) ‖ h(x′))·(1 − h(x)_y), with
// BCE = −log p_y − log(1 − max_{i≠y} p_i).
ad::Tensor mart_rows(const ad::Tensor& clean_logits, const ad::Tensor& adv_logits, std::span<const std::size_t> labels,
                     double lambda);

// Inner maximizers. TRADES ascends Σ KL(h(x) ‖ h(x′)) from a random start;
// MART ascends cross-entropy.
ad::Tensor trades_adversary(const models::ModelSpec& spec, const models::Parameters& params, const ad::Tensor& x,
                            const attacks::AttackConfig& attack, std::size_t first_index = 0);
ad::Tensor mart_adversary(const models::ModelSpec& spec, const models::Parameters& params, const ad::Tensor& x,
                          std::span<const std::size_t> labels, const attacks::AttackConfig& attack,
                          std::size_t first_index = 0);

// Batch-mean surrogate losses, differentiable in whatever params require grad.
ad::Tensor trades_loss(const models::ModelSpec& spec, const models::Parameters& params, const ad::Tensor& x,
                       std::span<const std::size_t> labels, double lambda, const attacks::AttackConfig& attack);
ad::Tensor mart_loss(const models::ModelSpec& spec, const models::Parameters& params, const ad::Tensor& x,
                     std::span<const std::size_t> labels, double lambda, const attacks::AttackConfig& attack);

// SGD with weight decay: p ← p − lr·(g + wd·p).
models::Parameters sgd_step(const models::Parameters& params, const models::Parameters& grads, double lr,
                            double weight_decay);

// Trains from init_model(spec, derive_seed(seed, "init")) with the configured defense.
TrainResult train(const models::ModelSpec& spec, const data::Dataset& dataset, const TrainConfig& config);
// As train(), from the given starting parameters.
TrainResult train_from(const models::ModelSpec& spec, models::Parameters init, const data::Dataset& dataset,
                       const TrainConfig& config);

// Defense-specific entry points; each checks config.defense.
models::Parameters standard_train(const models::ModelSpec& spec, const data::Dataset& dataset, const TrainConfig& config);
models::Parameters adversarial_train(const models::ModelSpec& spec, const data::Dataset& dataset,
                                     const TrainConfig& config);

void write_log_csv(std::ostream& out, std::span<const EpochLog> log);

}  // namespace simplerob::training
