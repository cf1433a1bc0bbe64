#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "simplerob/attacks.hpp"
#include "simplerob/data.hpp"
#include "simplerob/models.hpp"
#include "simplerob/training.hpp"

namespace simplerob::robin {

// One single-logit arm per class; prediction is the arm with the highest score.
struct BinaryAggregate {
  std::vector<models::Model> arms;
  std::vector<std::string> class_names;

  std::size_t num_classes() const { return arms.size(); }
  // At least two arms, one logit each, shared input shape, names match.
  void validate() const;
  // Raw arm logits stacked into [b×k]; tape-aware.
  ad::Tensor arm_logits(const ad::Tensor& x) const;
  // Lifted two-class logits of arm i, for its own 0/1 task.
  ad::Tensor arm_binary_logits(std::size_t arm, const ad::Tensor& x) const;
};

struct AggregatePrediction {
  std::vector<std::size_t> labels;
  ad::Tensor scores;  // [b×k], sigmoid of the arm logits
};

// Argmax over arms (lowest index on ties). The argmax is taken over the raw
// logits, which orders exactly like the sigmoid scores but never saturates.
AggregatePrediction predict_aggregate(const BinaryAggregate& agg, const ad::Tensor& x);
std::vector<std::size_t> predict_labels(const BinaryAggregate& agg, const ad::Tensor& x);

std::vector<std::string> default_class_names(std::size_t k);

struct RobinTraining {
  BinaryAggregate aggregate;
  std::vector<std::vector<training::EpochLog>> logs;  // per arm
};

// Arm i is trained on make_one_vs_all(k, i) with balanced batches and seed
// config.seed + i. `arm_spec` must emit a single logit. Arms run on up to
// `jobs` threads; results do not depend on `jobs`.
RobinTraining train_robin(const models::ModelSpec& arm_spec, const data::Dataset& dataset,
                          const training::TrainConfig& config, std::size_t jobs = 1);

// ---- attacks -------------------------------------------------------------------

enum class BaseAttack { Pgd, Cw };

struct RobinAttackConfig {
  BaseAttack base = BaseAttack::Pgd;
  attacks::AttackConfig pgd;
  attacks::CwConfig cw;
};

enum class AggregateAttack { BestArm, HighestArm, Top2, AvgGradient, Softmax, SoftmaxTop2 };

std::string to_string(AggregateAttack attack);
AggregateAttack parse_aggregate_attack(std::string_view text);
inline constexpr AggregateAttack kAllAggregateAttacks[] = {
    AggregateAttack::BestArm,     AggregateAttack::HighestArm, AggregateAttack::Top2,
    AggregateAttack::AvgGradient, AggregateAttack::Softmax,    AggregateAttack::SoftmaxTop2};

// Each arm i is attacked on its own 0/1 loss with seed + i; the first
// candidate (by arm order) that fools the aggregate is kept, else the last.
attacks::AttackResult attack_best_arm(const BinaryAggregate& agg, const ad::Tensor& x,
                                      std::span<const std::size_t> labels, const RobinAttackConfig& cfg,
                                      std::size_t first_index = 0);
// Only the arm with the highest clean score is attacked, under the same
// seed rule as attack_best_arm.
attacks::AttackResult attack_highest_arm(const BinaryAggregate& agg, const ad::Tensor& x,
                                         std::span<const std::size_t> labels, const RobinAttackConfig& cfg,
                                         std::size_t first_index = 0);
// PGD ascending ½[BCE(s_top1, 1) − BCE(s_top2, 1)], top-2 taken at the
// current iterate. PGD only.
attacks::AttackResult attack_top2(const BinaryAggregate& agg, const ad::Tensor& x, std::span<const std::size_t> labels,
                                  const RobinAttackConfig& cfg, std::size_t first_index = 0);
// PGD ascending (1/k)[BCE(s_y, 1) − Σ_{j≠y} BCE(s_j, 1)]. PGD only.
attacks::AttackResult attack_avg_gradient(const BinaryAggregate& agg, const ad::Tensor& x,
                                          std::span<const std::size_t> labels, const RobinAttackConfig& cfg,
                                          std::size_t first_index = 0);
// Base attack on softmax over the stacked arm logits.
attacks::AttackResult attack_softmax(const BinaryAggregate& agg, const ad::Tensor& x,
                                     std::span<const std::size_t> labels, const RobinAttackConfig& cfg,
                                     std::size_t first_index = 0);
// Base attack on softmax over the two arms that score highest on the clean input.
attacks::AttackResult attack_softmax_top2(const BinaryAggregate& agg, const ad::Tensor& x,
                                          std::span<const std::size_t> labels, const RobinAttackConfig& cfg,
                                          std::size_t first_index = 0);

attacks::AttackResult run_aggregate_attack(AggregateAttack kind, const BinaryAggregate& agg, const ad::Tensor& x,
                                           std::span<const std::size_t> labels, const RobinAttackConfig& cfg,
                                           std::size_t first_index = 0);

enum class TransferMode { Untargeted, Targeted };

// Crafted on `surrogate`, judged on `agg`. Targeted mode aims at the
// aggregate's second-highest arm on the clean input and succeeds only when
// the aggregate predicts that class.
attacks::AttackResult transfer_attack(const models::LogitFn& surrogate, const BinaryAggregate& agg,
                                      const ad::Tensor& x, std::span<const std::size_t> labels,
                                      const RobinAttackConfig& cfg, TransferMode mode, std::size_t first_index = 0);

// ---- hierarchical classifier ---------------------------------------------------

// Total map from original classes onto blocks [0, num_blocks).
struct Partition {
  std::vector<std::size_t> block_of;
  std::size_t num_blocks = 0;

  void validate() const;
  std::vector<std::size_t> members(std::size_t block) const;
};

struct HierarchicalClassifier {
  Partition partition;
  std::optional<models::Model> coarse;             // absent for a single block
  std::vector<std::optional<models::Model>> fine;  // absent for singleton blocks

  std::vector<std::size_t> predict(const ad::Tensor& x) const;
};

// `trunk` provides the architecture; output widths are set per model.
HierarchicalClassifier train_hierarchical(const models::ModelSpec& trunk, const data::Dataset& dataset,
                                          const Partition& partition, const training::TrainConfig& config,
                                          std::size_t jobs = 1);

// 1: attack the coarse model; 2: attack the fine model of the true block;
// 3: strategy 1, then strategy 2 from the clean input where 1 failed.
attacks::AttackResult hierarchical_attack(const HierarchicalClassifier& h, const ad::Tensor& x,
                                          std::span<const std::size_t> labels, const attacks::AttackConfig& cfg,
                                          int strategy, std::size_t first_index = 0);

// ---- robust accuracy ---------------------------------------------------------------

struct AttackOutcome {
  std::string name;
  std::vector<bool> success;
};

struct RobustReport {
  std::size_t examples = 0;
  std::vector<bool> clean_correct;
  double clean_accuracy = 0.0;
  std::vector<std::string> names;             // deduplicated, first occurrence order
  std::vector<std::vector<bool>> success;     // per attack, per example
  std::vector<double> accuracy;               // per attack
  std::vector<bool> robust;                   // survives every attack
  double strongest_of = 0.0;
  // overlap[a][b]: clean-correct examples on which both a and b succeed.
  std::vector<std::vector<std::size_t>> overlap;
};

// robust_i = clean_correct_i ∧ ¬success_i for each attack; strongest-of is the
// pointwise AND over attacks. Outcomes with a repeated name are ignored.
RobustReport summarize(std::vector<bool> clean_correct, std::span<const AttackOutcome> outcomes);

// Runs the listed aggregate attacks over the dataset in chunks of `chunk`
// examples, on up to `jobs` threads.
RobustReport robust_accuracy(const BinaryAggregate& agg, const data::Dataset& dataset,
                             std::span<const AggregateAttack> attack_list, const RobinAttackConfig& cfg,
                             std::size_t jobs = 1, std::size_t chunk = 64);

enum class ModelAttack { Pgd, Cw };
std::string to_string(ModelAttack attack);
ModelAttack parse_model_attack(std::string_view text);

RobustReport robust_accuracy(const models::Model& model, const data::Dataset& dataset,
                             std::span<const ModelAttack> attack_list, const RobinAttackConfig& cfg,
                             std::size_t jobs = 1, std::size_t chunk = 64);

// Applies fn(first_index, x, labels) to consecutive chunks and concatenates.
attacks::AttackResult attack_dataset(
    const data::Dataset& dataset,
    const std::function<attacks::AttackResult(std::size_t, const ad::Tensor&, std::span<const std::size_t>)>& fn,
    std::size_t jobs = 1, std::size_t chunk = 64);

// ---- aggregate checkpoint --------------------------------------------------------

// Writes arm_<i>.rbn files and manifest.txt into `dir`.
void save_aggregate(const std::filesystem::path& dir, const BinaryAggregate& agg, std::string_view config_hash,
                    bool overwrite = false);
BinaryAggregate load_aggregate(const std::filesystem::path& dir);

}  // namespace simplerob::robin
