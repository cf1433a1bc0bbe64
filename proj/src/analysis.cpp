#include "simplerob/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "simplerob/common.hpp"

namespace simplerob::analysis {

double cosine_similarity(std::span<const double> g0, std::span<const double> g1) {
  if (g0.size() != g1.size()) throw ad::ShapeError("cosine_similarity: length mismatch");
  double dot = 0.0, n0 = 0.0, n1 = 0.0;
  for (std::size_t i = 0; i < g0.size(); ++i) {
    dot += g0[i] * g1[i];
    n0 += g0[i] * g0[i];
    n1 += g1[i] * g1[i];
  }
  if (n0 == 0.0 || n1 == 0.0) throw DegenerateGradient("cosine_similarity: zero gradient");
  return std::clamp(dot / (std::sqrt(n0) * std::sqrt(n1)), -1.0, 1.0);
}

ad::Tensor input_gradient(const models::LogitFn& fn, const ad::Tensor& x, std::span<const std::size_t> labels) {
  ad::Tape tape;
  const ad::Tensor xv = tape.variable(x);
  const ad::Tensor loss = ad::sum(ad::cross_entropy_rows(fn(xv), labels));
  if (!loss.requires_grad()) return ad::Tensor::zeros(x.shape());
  tape.backward(loss);
  if (!xv.has_grad()) return ad::Tensor::zeros(x.shape());
  return ad::Tensor(x.shape(), std::vector<double>(xv.grad().begin(), xv.grad().end()));
}

Histogram histogram(std::span<const double> values, double lo, double hi, std::size_t bins) {
  if (bins == 0) throw PreconditionError("histogram: need at least one bin");
  if (!(hi > lo)) throw PreconditionError("histogram: need hi > lo");
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.counts.assign(bins, 0);
  for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins));
  double sum = 0.0;
  for (double v : values) {
    const double pos = (v - lo) / (hi - lo) * static_cast<double>(bins);
    const auto bin = static_cast<std::size_t>(std::clamp(std::floor(pos), 0.0, static_cast<double>(bins - 1)));
    ++h.counts[bin];
    sum += v;
  }
  h.total = values.size();
  h.mean = values.empty() ? 0.0 : sum / static_cast<double>(values.size());
  return h;
}

namespace {

std::span<const double> row_of(const ad::Tensor& g, std::size_t r) {
  const std::size_t d = g.size() / g.dim(0);
  return g.data().subspan(r * d, d);
}

bool is_zero(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double a) { return a == 0.0; });
}

// Max CS between `anchor` and each of `others`, skipping zero gradients.
std::optional<double> max_similarity(std::span<const double> anchor, const std::vector<std::span<const double>>& others) {
  if (is_zero(anchor)) return std::nullopt;
  std::optional<double> best;
  for (const auto& o : others) {
    if (is_zero(o)) continue;
    const double cs = cosine_similarity(anchor, o);
    best = best ? std::max(*best, cs) : cs;
  }
  return best;
}

}  // namespace

std::vector<std::optional<double>> coherence(const robin::BinaryAggregate& agg, const ad::Tensor& x,
                                             std::span<const std::size_t> labels) {
  const std::size_t k = agg.num_classes(), b = x.dim(0);
  if (k < 2) throw PreconditionError("coherence: need at least two arms");
  if (labels.size() != b) throw ad::ShapeError("coherence: label count does not match batch");
  const std::vector<std::size_t> positive(b, 1);
  std::vector<ad::Tensor> grads;
  for (std::size_t i = 0; i < k; ++i) {
    grads.push_back(input_gradient([&agg, i](const ad::Tensor& xv) { return agg.arm_binary_logits(i, xv); }, x, positive));
  }
  std::vector<std::optional<double>> out(b);
  for (std::size_t r = 0; r < b; ++r) {
    std::vector<std::span<const double>> others;
    for (std::size_t j = 0; j < k; ++j) {
      if (j != labels[r]) others.push_back(row_of(grads[j], r));
    }
    out[r] = max_similarity(row_of(grads[labels[r]], r), others);
  }
  return out;
}

std::size_t pair_count(std::size_t m) { return m < 2 ? 0 : m * (m - 1) / 2; }

std::vector<std::optional<double>> ensemble_coherence(std::span<const models::Model> models_, const ad::Tensor& x,
                                                      std::span<const std::size_t> labels) {
  const std::size_t m = models_.size(), b = x.dim(0);
  if (m < 2) throw PreconditionError("ensemble_coherence: need at least two models");
  std::vector<ad::Tensor> grads;
  for (const auto& model : models_) grads.push_back(input_gradient(models::logit_fn(model), x, labels));
  std::vector<std::optional<double>> out(b);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t a = 0; a < m; ++a) {
      const auto ga = row_of(grads[a], r);
      if (is_zero(ga)) continue;
      for (std::size_t c = a + 1; c < m; ++c) {
        const auto gc = row_of(grads[c], r);
        if (is_zero(gc)) continue;
        const double cs = cosine_similarity(ga, gc);
        out[r] = out[r] ? std::max(*out[r], cs) : cs;
      }
    }
  }
  return out;
}

namespace {

CoherenceReport finish_report(std::string kind, std::vector<std::optional<double>> values, std::size_t bins) {
  CoherenceReport rep;
  rep.kind = std::move(kind);
  std::vector<double> present;
  for (const auto& v : values) {
    if (v) {
      present.push_back(*v);
    } else {
      ++rep.skipped;
    }
  }
  rep.values = std::move(values);
  rep.summary = histogram(present, -1.0, 1.0, bins);
  return rep;
}

}  // namespace

CoherenceReport coherence_report(const robin::BinaryAggregate& agg, const data::Dataset& dataset, std::size_t bins) {
  return finish_report("robin", coherence(agg, dataset.inputs, dataset.labels), bins);
}

CoherenceReport coherence_report(std::span<const models::Model> ensemble, const data::Dataset& dataset,
                                 std::size_t bins) {
  return finish_report("ensemble", ensemble_coherence(ensemble, dataset.inputs, dataset.labels), bins);
}

// ---- binary task -------------------------------------------------------------------------

std::vector<attacks::Goal> binary_task_goals(std::span<const std::size_t> labels) {
  std::vector<attacks::Goal> goals;
  goals.reserve(labels.size());
  for (auto y : labels) goals.push_back(y == 0 ? attacks::Goal{0, false} : attacks::Goal{0, true});
  return goals;
}

namespace {

ad::Tensor slice_rows(const ad::Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t d = x.size() / x.dim(0);
  ad::Shape shape = x.shape();
  shape[0] = end - begin;
  const auto v = x.data().subspan(begin * d, (end - begin) * d);
  return ad::Tensor(std::move(shape), std::vector<double>(v.begin(), v.end()));
}

constexpr std::size_t kChunk = 64;

}  // namespace

BinaryTaskResult evaluate_binary_task(const models::Model& model, const ad::Tensor& x,
                                      std::span<const std::size_t> labels, std::span<const double> eps_grid,
                                      const attacks::AttackConfig& attack, std::size_t jobs) {
  const std::size_t n = labels.size();
  if (n == 0 || x.dim(0) != n) throw ad::ShapeError("evaluate_binary_task: label count does not match inputs");
  const auto goals = binary_task_goals(labels);
  const auto clean_pred = model.predict(x);
  std::vector<bool> clean_ok(n);
  for (std::size_t i = 0; i < n; ++i) clean_ok[i] = !attacks::goal_met(goals[i], clean_pred[i]);

  BinaryTaskResult result;
  result.evaluated = n;
  result.clean_accuracy = static_cast<double>(std::count(clean_ok.begin(), clean_ok.end(), true)) / static_cast<double>(n);
  const models::LogitFn fn = models::logit_fn(model);
  for (double eps : eps_grid) {
    if (eps == 0.0) {
      result.robust_accuracy.push_back(result.clean_accuracy);
      continue;
    }
    attacks::AttackConfig cfg = attack;
    cfg.epsilon = eps;
    cfg.step_size = 0.0;
    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    std::vector<std::vector<bool>> success(chunks);
    parallel_for(chunks, jobs, [&](std::size_t c) {
      const std::size_t begin = c * kChunk, end = std::min(n, begin + kChunk);
      const std::span<const attacks::Goal> g(goals.data() + begin, end - begin);
      success[c] = attacks::pgd_attack(fn, slice_rows(x, begin, end), g, cfg, begin).success;
    });
    std::size_t robust = 0;
    for (std::size_t c = 0; c < chunks; ++c) {
      for (std::size_t i = 0; i < success[c].size(); ++i) robust += clean_ok[c * kChunk + i] && !success[c][i] ? 1 : 0;
    }
    result.robust_accuracy.push_back(static_cast<double>(robust) / static_cast<double>(n));
  }
  return result;
}

// ---- sweeps ---------------------------------------------------------------------------------

void SweepConfig::validate() const {
  if (permutations == 0) throw PreconditionError("sweep: permutations must be >= 1");
  for (double e : eps_grid) {
    if (!(e >= 0.0)) throw PreconditionError("sweep: eps_grid values must be >= 0");
  }
  train.validate();
  attack.validate();
}

const SweepRow& SweepTable::row(std::size_t j) const {
  for (const auto& r : rows) {
    if (r.j == j) return r;
  }
  throw PreconditionError("sweep table has no row for j=" + std::to_string(j));
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double a : v) ss += (a - mean) * (a - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace

SweepTable simplicity_sweep(const data::Dataset& train_set, const data::Dataset& test_set, const SweepConfig& config,
                            std::size_t jobs) {
  config.validate();
  train_set.validate();
  test_set.validate();
  const std::size_t k = train_set.num_classes;
  if (k < 3) throw PreconditionError("sweep: need k >= 3 classes");
  if (test_set.num_classes != k) throw PreconditionError("sweep: train and test class counts differ");

  SweepTable table;
  table.k = k;
  table.eps_grid = config.eps_grid;
  table.evaluated = test_set.size();
  const std::size_t per_perm = k - 1;
  table.cells.resize(config.permutations * per_perm);
  parallel_for(table.cells.size(), jobs, [&](std::size_t cell) {
    const std::size_t p = cell / per_perm;
    const std::size_t j = 2 + cell % per_perm;
    const auto perm = data::class_permutation(k, derive_seed(derive_seed(config.seed, "permutation"), p));
    const auto coarse = data::make_model_j(k, j);
    const data::Dataset train_j = data::relabel(data::relabel(train_set, perm), coarse);
    const data::Dataset test_j = data::relabel(data::relabel(test_set, perm), coarse);

    training::TrainConfig tc = config.train;
    tc.seed = derive_seed(derive_seed(config.seed, "train"), p);
    const auto spec = models::with_outputs(config.trunk, j);
    const models::Model model{spec, training::train(spec, train_j, tc).params};

    attacks::AttackConfig eval = config.attack;
    eval.seed = derive_seed(derive_seed(config.seed, "eval"), p);
    const auto res = evaluate_binary_task(model, test_j.inputs, test_j.labels, config.eps_grid, eval);
    table.cells[cell] = SweepCell{p, j, res.clean_accuracy, res.robust_accuracy};
  });

  for (std::size_t j = 2; j <= k; ++j) {
    SweepRow row;
    row.j = j;
    std::vector<double> clean;
    std::vector<std::vector<double>> robust(config.eps_grid.size());
    for (const auto& c : table.cells) {
      if (c.j != j) continue;
      clean.push_back(c.clean_accuracy);
      for (std::size_t e = 0; e < robust.size(); ++e) robust[e].push_back(c.robust_accuracy[e]);
    }
    std::tie(row.clean_mean, row.clean_std) = mean_std(clean);
    for (const auto& r : robust) {
      const auto [m, s] = mean_std(r);
      row.robust_mean.push_back(m);
      row.robust_std.push_back(s);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

SeparationCurves separation_from(const SweepTable& robust, const SweepTable& standard, double eps_eval) {
  std::size_t e = robust.eps_grid.size();
  for (std::size_t i = 0; i < robust.eps_grid.size(); ++i) {
    if (std::abs(robust.eps_grid[i] - eps_eval) <= 1e-12) e = i;
  }
  if (e == robust.eps_grid.size()) throw PreconditionError("separation: eps_eval is not in the robust sweep grid");
  if (robust.rows.size() != standard.rows.size()) throw PreconditionError("separation: sweeps cover different j");
  SeparationCurves out;
  out.eps_eval = eps_eval;
  for (std::size_t i = 0; i < robust.rows.size(); ++i) {
    out.js.push_back(robust.rows[i].j);
    out.robust_mean.push_back(robust.rows[i].robust_mean[e]);
    out.robust_std.push_back(robust.rows[i].robust_std[e]);
    out.standard_mean.push_back(standard.rows[i].clean_mean);
    out.standard_std.push_back(standard.rows[i].clean_std);
  }
  return out;
}

SeparationCurves separation_sweep(const data::Dataset& train_set, const data::Dataset& test_set,
                                  const SweepConfig& config, double eps_eval, std::size_t jobs) {
  if (config.train.defense == training::Defense::Standard) {
    throw PreconditionError("separation: the robust regime needs a non-standard defense");
  }
  SweepConfig robust_cfg = config;
  robust_cfg.eps_grid = {eps_eval};
  SweepConfig standard_cfg = config;
  standard_cfg.train.defense = training::Defense::Standard;
  standard_cfg.eps_grid = {};
  return separation_from(simplicity_sweep(train_set, test_set, robust_cfg, jobs),
                         simplicity_sweep(train_set, test_set, standard_cfg, jobs), eps_eval);
}

// ---- boundary --------------------------------------------------------------------------------

BoundaryReport boundary_distribution(const models::LogitFn& model, const ad::Tensor& x,
                                     std::span<const attacks::Goal> goals, const attacks::BoundaryConfig& cfg,
                                     std::size_t bins, std::size_t jobs) {
  const std::size_t n = goals.size();
  if (x.dim(0) != n) throw ad::ShapeError("boundary_distribution: goal count does not match inputs");
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<attacks::BoundaryDistances> parts(chunks);
  parallel_for(chunks, jobs, [&](std::size_t c) {
    const std::size_t begin = c * kChunk, end = std::min(n, begin + kChunk);
    parts[c] = attacks::boundary_distance(model, slice_rows(x, begin, end), goals.subspan(begin, end - begin), cfg, begin);
  });
  BoundaryReport rep;
  for (const auto& p : parts) {
    rep.distances.insert(rep.distances.end(), p.distance.begin(), p.distance.end());
    rep.capped.insert(rep.capped.end(), p.capped.begin(), p.capped.end());
  }
  rep.summary = histogram(rep.distances, 0.0, cfg.eps_max, bins);
  return rep;
}

void write_histogram_csv(std::ostream& out, const Histogram& h) {
  out << "bin,lower,upper,count\n" << std::setprecision(12);
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    out << i << ',' << h.edges[i] << ',' << h.edges[i + 1] << ',' << h.counts[i] << '\n';
  }
}

}  // namespace simplerob::analysis
