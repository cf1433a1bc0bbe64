#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "simplerob/attacks.hpp"
#include "simplerob/data.hpp"
#include "simplerob/models.hpp"
#include "simplerob/robin.hpp"
#include "simplerob/training.hpp"

namespace simplerob::analysis {

// A zero gradient has no direction; such examples are skipped in distributions.
class DegenerateGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ⟨g0, g1⟩ / (‖g0‖·‖g1‖), clamped to [−1, 1].
double cosine_similarity(std::span<const double> g0, std::span<const double> g1);

// Input gradient [b×d...] of Σ_r CE(fn(x)_r, labels_r).
ad::Tensor input_gradient(const models::LogitFn& fn, const ad::Tensor& x, std::span<const std::size_t> labels);

struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<double> edges;  // bins + 1 entries
  std::vector<std::size_t> counts;
  double mean = 0.0;
  std::size_t total = 0;
};

// Uniform bins over [lo, hi]; values outside are clamped into the end bins.
Histogram histogram(std::span<const double> values, double lo, double hi, std::size_t bins = 30);

// Per example: max over j ≠ y of CS(∇ₓ L_y, ∇ₓ L_j), where L_i = −log σ(s_i)
// is arm i's binary cross-entropy for claiming x, taken at the clean input.
// Arms with identical parameters therefore have coherence 1. nullopt when
// the true arm's gradient is zero.
std::vector<std::optional<double>> coherence(const robin::BinaryAggregate& agg, const ad::Tensor& x,
                                             std::span<const std::size_t> labels);

// Per example: max over model pairs of CS between cross-entropy input gradients.
std::vector<std::optional<double>> ensemble_coherence(std::span<const models::Model> models_, const ad::Tensor& x,
                                                      std::span<const std::size_t> labels);

std::size_t pair_count(std::size_t models_);

struct CoherenceReport {
  std::string kind;                            // "robin" or "ensemble"
  std::vector<std::optional<double>> values;   // per example
  std::size_t skipped = 0;
  Histogram summary;                           // over [−1, 1]
};

CoherenceReport coherence_report(const robin::BinaryAggregate& agg, const data::Dataset& dataset, std::size_t bins = 30);
CoherenceReport coherence_report(std::span<const models::Model> ensemble, const data::Dataset& dataset,
                                 std::size_t bins = 30);

// ---- binary-task evaluation --------------------------------------------------------

// Goals for the one-vs-rest evaluation of a model whose label 0 is the
// distinguished class: label-0 examples must leave 0 (untargeted), every
// other example must reach 0 (targeted).
std::vector<attacks::Goal> binary_task_goals(std::span<const std::size_t> labels);

struct BinaryTaskResult {
  double clean_accuracy = 0.0;
  std::vector<double> robust_accuracy;  // per ε
  std::size_t evaluated = 0;
};

// `labels` are the model's own labels (label 0 is the distinguished class).
// An example is robust at ε when it is binary-correct on the clean input and
// the PGD attack toward its goal fails.
BinaryTaskResult evaluate_binary_task(const models::Model& model, const ad::Tensor& x,
                                      std::span<const std::size_t> labels, std::span<const double> eps_grid,
                                      const attacks::AttackConfig& attack, std::size_t jobs = 1);

// ---- sweeps ---------------------------------------------------------------------------

struct SweepConfig {
  models::ModelSpec trunk;           // output width is set per j
  training::TrainConfig train;       // defense decides the regime
  std::vector<double> eps_grid;      // evaluation budgets
  attacks::AttackConfig attack;      // evaluation attack (epsilon overridden by the grid)
  std::size_t permutations = 20;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SweepCell {
  std::size_t permutation = 0;
  std::size_t j = 0;
  double clean_accuracy = 0.0;
  std::vector<double> robust_accuracy;  // per ε
};

struct SweepRow {
  std::size_t j = 0;
  double clean_mean = 0.0;
  double clean_std = 0.0;
  std::vector<double> robust_mean;  // per ε
  std::vector<double> robust_std;
};

struct SweepTable {
  std::size_t k = 0;
  std::vector<double> eps_grid;
  std::vector<SweepCell> cells;  // permutation-major, then j
  std::vector<SweepRow> rows;    // j = 2..k
  std::size_t evaluated = 0;     // test examples per cell

  const SweepRow& row(std::size_t j) const;
};

// MODEL[j] for every class permutation and j ∈ {2..k}, trained with
// config.train and evaluated on the binary task for every ε in the grid.
SweepTable simplicity_sweep(const data::Dataset& train_set, const data::Dataset& test_set, const SweepConfig& config,
                            std::size_t jobs = 1);

struct SeparationCurves {
  double eps_eval = 0.0;
  std::vector<std::size_t> js;
  std::vector<double> robust_mean, robust_std;      // adversarially trained, robust at eps_eval
  std::vector<double> standard_mean, standard_std;  // standard trained, clean
};

// Runs the sweep in both regimes; config.train.defense selects the robust one.
SeparationCurves separation_sweep(const data::Dataset& train_set, const data::Dataset& test_set,
                                  const SweepConfig& config, double eps_eval, std::size_t jobs = 1);
// Combines existing robust and standard tables; eps_eval must be in the robust grid.
SeparationCurves separation_from(const SweepTable& robust, const SweepTable& standard, double eps_eval);

// ---- boundary distances ----------------------------------------------------------------

struct BoundaryReport {
  std::vector<double> distances;
  std::vector<bool> capped;
  Histogram summary;  // over [0, eps_max]
};

BoundaryReport boundary_distribution(const models::LogitFn& model, const ad::Tensor& x,
                                     std::span<const attacks::Goal> goals, const attacks::BoundaryConfig& cfg,
                                     std::size_t bins = 30, std::size_t jobs = 1);

void write_histogram_csv(std::ostream& out, const Histogram& h);

}  // namespace simplerob::analysis
