#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "simplerob/models.hpp"
#include "simplerob/tensor.hpp"

namespace simplerob::attacks {

enum class Norm { L2, Linf };

std::string to_string(Norm norm);
Norm parse_norm(std::string_view text);

struct Box {
  double lo = 0.0;
  double hi = 1.0;
};

struct AttackConfig {
  Norm norm = Norm::L2;
  double epsilon = 0.5;
  std::size_t steps = 10;
  double step_size = 0.0;  // 0 selects 2.5·ε/steps
  bool random_init = true;
  std::uint64_t seed = 0;
  std::optional<Box> input_box;

  double effective_step_size() const;
  void validate() const;
};

struct AttackResult {
  ad::Tensor adversarial;
  std::vector<bool> success;
  std::vector<double> perturbation_norm;

  std::size_t success_count() const;
};

// NaN/inf gradient during an attack; `example` is the global example index.
class AttackError : public std::runtime_error {
 public:
  AttackError(std::size_t example, const std::string& what) : std::runtime_error(what), example_(example) {}
  std::size_t example() const { return example_; }

 private:
  std::size_t example_;
};

// Untargeted: leave `label`. Targeted: reach `label`.
struct Goal {
  std::size_t label = 0;
  bool targeted = false;
};

std::vector<Goal> untargeted(std::span<const std::size_t> labels);
std::vector<Goal> targeted(std::span<const std::size_t> targets);
bool goal_met(const Goal& goal, std::size_t prediction);
std::vector<bool> goals_met(std::span<const std::size_t> predictions, std::span<const Goal> goals);

double distance(std::span<const double> a, std::span<const double> b, Norm norm);

// Projection of each example of `point` onto the ε-ball around the matching
// example of `center`, then onto `box`. Points inside stay bit-identical.
ad::Tensor project_ball(const ad::Tensor& center, const ad::Tensor& point, Norm norm, double epsilon,
                        std::optional<Box> box = std::nullopt);

// Scalar to ascend, evaluated on a tape-attached batch.
using Objective = std::function<ad::Tensor(const ad::Tensor& x)>;

// Σ_b ±CE(logits_b, goal_b): + for untargeted (ascend), − for targeted.
ad::Tensor goal_objective(const ad::Tensor& logits, std::span<const Goal> goals);

// Per-example PGD schedule for the general driver.
struct PgdSchedule {
  std::vector<double> epsilon;
  std::vector<double> step_size;
  std::vector<std::uint64_t> stream;  // RNG stream id per example
};

// PGD iterate: normalized (ℓ2) or sign (ℓ∞) ascent on `objective`, projected
// after every step. Example r draws its random start from
// derive_seed(cfg.seed, first_index + r), so results do not depend on how a
// dataset is split into batches.
ad::Tensor pgd_perturb(const ad::Tensor& x, const Objective& objective, const AttackConfig& cfg,
                       std::size_t first_index = 0);
ad::Tensor pgd_perturb(const ad::Tensor& x, const Objective& objective, const AttackConfig& cfg,
                       const PgdSchedule& schedule);

AttackResult make_result(const ad::Tensor& x, const ad::Tensor& adversarial, std::vector<bool> success, Norm norm);

AttackResult pgd_attack(const models::LogitFn& model, const ad::Tensor& x, std::span<const Goal> goals,
                        const AttackConfig& cfg, std::size_t first_index = 0);
AttackResult pgd_attack(const models::LogitFn& model, const ad::Tensor& x, std::span<const std::size_t> labels,
                        const AttackConfig& cfg, std::size_t first_index = 0);

// ---- Carlini–Wagner ℓ2 -------------------------------------------------------

struct CwConfig {
  std::size_t search_steps = 9;
  double c_lo = 1e-3;
  double c_hi = 1e2;
  std::size_t iterations = 200;
  double learn_rate = 0.01;
  double kappa = 0.0;
  // Successful examples farther than this are discarded.
  double epsilon = std::numeric_limits<double>::infinity();

  void validate() const;
};

// Minimizes ‖x(ω) − x‖² + c·max(Z_y − max_{i≠y} Z_i, −κ) with
// x(ω) = ½(tanh ω + 1), Adam on ω, and a geometric binary search for c in
// [c_lo, c_hi]. Keeps the smallest successful perturbation seen. Inputs must
// lie in [0, 1].
AttackResult cw_attack_l2(const models::LogitFn& model, const ad::Tensor& x, std::span<const std::size_t> labels,
                          const CwConfig& cfg);

// ---- decision-boundary distance ---------------------------------------------

struct BoundaryConfig {
  Norm norm = Norm::L2;
  double eps_max = 2.0;
  double tolerance = 1e-3;
  std::size_t steps = 20;
  bool random_init = false;
  std::uint64_t seed = 0;
  std::optional<Box> input_box;
};

struct BoundaryDistances {
  std::vector<double> distance;
  std::vector<bool> capped;  // eps_max did not suffice
};

// Bisection over ε: the smallest budget at which PGD (step 2.5·ε/steps)
// reaches each example's goal, to within `tolerance`.
BoundaryDistances boundary_distance(const models::LogitFn& model, const ad::Tensor& x, std::span<const Goal> goals,
                                    const BoundaryConfig& cfg, std::size_t first_index = 0);

}  // namespace simplerob::attacks
