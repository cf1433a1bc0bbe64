#include "simplerob/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "simplerob/common.hpp"

namespace simplerob::attacks {

std::string to_string(Norm norm) { return norm == Norm::L2 ? "l2" : "linf"; }

Norm parse_norm(std::string_view text) {
  if (text == "l2" || text == "L2") return Norm::L2;
  if (text == "linf" || text == "Linf" || text == "inf") return Norm::Linf;
  throw PreconditionError("unknown norm '" + std::string(text) + "' (expected l2 or linf)");
}

double AttackConfig::effective_step_size() const {
  if (step_size > 0.0) return step_size;
  return steps == 0 ? 0.0 : 2.5 * epsilon / static_cast<double>(steps);
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw PreconditionError("attack: epsilon must be finite and >= 0");
  if (step_size < 0.0) throw PreconditionError("attack: step_size must be > 0");
  if (input_box && !(input_box->lo <= input_box->hi)) throw PreconditionError("attack: empty input box");
}

std::size_t AttackResult::success_count() const {
  return static_cast<std::size_t>(std::count(success.begin(), success.end(), true));
}

std::vector<Goal> untargeted(std::span<const std::size_t> labels) {
  std::vector<Goal> goals;
  goals.reserve(labels.size());
  for (auto y : labels) goals.push_back({y, false});
  return goals;
}

std::vector<Goal> targeted(std::span<const std::size_t> targets) {
  std::vector<Goal> goals;
  goals.reserve(targets.size());
  for (auto t : targets) goals.push_back({t, true});
  return goals;
}

bool goal_met(const Goal& goal, std::size_t prediction) {
  return goal.targeted ? prediction == goal.label : prediction != goal.label;
}

std::vector<bool> goals_met(std::span<const std::size_t> predictions, std::span<const Goal> goals) {
  std::vector<bool> out(goals.size());
  for (std::size_t i = 0; i < goals.size(); ++i) out[i] = goal_met(goals[i], predictions[i]);
  return out;
}

double distance(std::span<const double> a, std::span<const double> b, Norm norm) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    acc = norm == Norm::L2 ? acc + d * d : std::max(acc, d);
  }
  return norm == Norm::L2 ? std::sqrt(acc) : acc;
}

namespace {

std::size_t example_stride(const ad::Tensor& x) {
  if (x.rank() < 2) throw ad::ShapeError("attack inputs need a batch axis, got " + ad::shape_str(x.shape()));
  return x.size() / x.dim(0);
}

// Projects one example in place.
void project_row(const double* center, double* point, std::size_t d, Norm norm, double eps,
                 const std::optional<Box>& box) {
  if (norm == Norm::L2) {
    double n2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) n2 += (point[i] - center[i]) * (point[i] - center[i]);
    const double n = std::sqrt(n2);
    if (n > eps) {
      const double f = n > 0.0 ? eps / n : 0.0;
      for (std::size_t i = 0; i < d; ++i) point[i] = center[i] + (point[i] - center[i]) * f;
    }
  } else {
    for (std::size_t i = 0; i < d; ++i) point[i] = std::clamp(point[i], center[i] - eps, center[i] + eps);
  }
  if (box) {
    for (std::size_t i = 0; i < d; ++i) point[i] = std::clamp(point[i], box->lo, box->hi);
  }
}

void random_start(const double* center, double* point, std::size_t d, Norm norm, double eps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  if (norm == Norm::Linf) {
    std::uniform_real_distribution<double> u(-eps, eps);
    for (std::size_t i = 0; i < d; ++i) point[i] = center[i] + u(rng);
    return;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> dir(d);
  double n2 = 0.0;
  for (double& v : dir) {
    v = normal(rng);
    n2 += v * v;
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double radius = eps * std::pow(u(rng), 1.0 / static_cast<double>(d));
  const double f = n2 > 0.0 ? radius / std::sqrt(n2) : 0.0;
  for (std::size_t i = 0; i < d; ++i) point[i] = center[i] + dir[i] * f;
}

}  // namespace

ad::Tensor project_ball(const ad::Tensor& center, const ad::Tensor& point, Norm norm, double epsilon,
                        std::optional<Box> box) {
  if (epsilon < 0.0) throw PreconditionError("project_ball: negative epsilon");
  if (center.shape() != point.shape()) {
    throw ad::ShapeError("project_ball: shape mismatch " + ad::shape_str(center.shape()) + " vs " +
                         ad::shape_str(point.shape()));
  }
  const std::size_t d = center.rank() >= 2 ? center.size() / center.dim(0) : center.size();
  const std::size_t rows = center.size() / d;
  std::vector<double> out(point.data().begin(), point.data().end());
  const auto c = center.data();
  for (std::size_t r = 0; r < rows; ++r) project_row(c.data() + r * d, out.data() + r * d, d, norm, epsilon, box);
  return ad::Tensor(point.shape(), std::move(out));
}

ad::Tensor goal_objective(const ad::Tensor& logits, std::span<const Goal> goals) {
  std::vector<std::size_t> labels;
  std::vector<double> sign;
  labels.reserve(goals.size());
  for (const auto& g : goals) {
    labels.push_back(g.label);
    sign.push_back(g.targeted ? -1.0 : 1.0);
  }
  const std::size_t b = goals.size();
  return ad::sum(ad::mul(ad::cross_entropy_rows(logits, labels), ad::Tensor({b}, std::move(sign))));
}

ad::Tensor pgd_perturb(const ad::Tensor& x, const Objective& objective, const AttackConfig& cfg,
                       std::size_t first_index) {
  const std::size_t b = x.dim(0);
  PgdSchedule schedule{std::vector<double>(b, cfg.epsilon), std::vector<double>(b, cfg.effective_step_size()), {}};
  schedule.stream.reserve(b);
  for (std::size_t r = 0; r < b; ++r) schedule.stream.push_back(first_index + r);
  return pgd_perturb(x, objective, cfg, schedule);
}

ad::Tensor pgd_perturb(const ad::Tensor& x, const Objective& objective, const AttackConfig& cfg,
                       const PgdSchedule& schedule) {
  cfg.validate();
  const std::size_t d = example_stride(x);
  const std::size_t b = x.dim(0);
  if (schedule.epsilon.size() != b || schedule.step_size.size() != b || schedule.stream.size() != b) {
    throw PreconditionError("pgd: schedule does not cover the batch");
  }
  const auto xc = x.data();
  std::vector<double> adv(xc.begin(), xc.end());
  bool any_budget = false;
  for (std::size_t r = 0; r < b; ++r) {
    if (schedule.epsilon[r] < 0.0) throw PreconditionError("pgd: negative epsilon");
    if (schedule.epsilon[r] > 0.0) any_budget = true;
  }
  if (!any_budget) return ad::Tensor(x.shape(), std::move(adv));

  if (cfg.random_init) {
    for (std::size_t r = 0; r < b; ++r) {
      if (schedule.epsilon[r] == 0.0) continue;
      double* row = adv.data() + r * d;
      random_start(xc.data() + r * d, row, d, cfg.norm, schedule.epsilon[r], derive_seed(cfg.seed, schedule.stream[r]));
      project_row(xc.data() + r * d, row, d, cfg.norm, schedule.epsilon[r], cfg.input_box);
    }
  }

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    ad::Tape tape;
    const ad::Tensor xv = tape.variable(ad::Tensor(x.shape(), adv));
    const ad::Tensor loss = objective(xv);
    if (!loss.requires_grad()) break;  // objective does not depend on x
    tape.backward(loss);
    if (!xv.has_grad()) break;
    const auto g = xv.grad();
    for (std::size_t r = 0; r < b; ++r) {
      if (schedule.epsilon[r] == 0.0) continue;
      const double* gr = g.data() + r * d;
      double* row = adv.data() + r * d;
      double n2 = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        if (!std::isfinite(gr[i])) {
          throw AttackError(schedule.stream[r], "attack: non-finite gradient at example " +
                                                    std::to_string(schedule.stream[r]));
        }
        n2 += gr[i] * gr[i];
      }
      if (n2 == 0.0) continue;
      const double eta = schedule.step_size[r];
      if (cfg.norm == Norm::L2) {
        const double f = eta / std::sqrt(n2);
        for (std::size_t i = 0; i < d; ++i) row[i] += f * gr[i];
      } else {
        for (std::size_t i = 0; i < d; ++i) row[i] += gr[i] > 0.0 ? eta : (gr[i] < 0.0 ? -eta : 0.0);
      }
      project_row(xc.data() + r * d, row, d, cfg.norm, schedule.epsilon[r], cfg.input_box);
    }
  }
  return ad::Tensor(x.shape(), std::move(adv));
}

AttackResult make_result(const ad::Tensor& x, const ad::Tensor& adversarial, std::vector<bool> success, Norm norm) {
  const std::size_t d = example_stride(x);
  const std::size_t b = x.dim(0);
  AttackResult result{adversarial, std::move(success), std::vector<double>(b)};
  const auto xv = x.data(), av = adversarial.data();
  for (std::size_t r = 0; r < b; ++r) result.perturbation_norm[r] = distance(xv.subspan(r * d, d), av.subspan(r * d, d), norm);
  return result;
}

AttackResult pgd_attack(const models::LogitFn& model, const ad::Tensor& x, std::span<const Goal> goals,
                        const AttackConfig& cfg, std::size_t first_index) {
  if (goals.size() != x.dim(0)) throw ad::ShapeError("pgd_attack: goal count does not match batch");
  std::vector<Goal> g(goals.begin(), goals.end());
  const ad::Tensor adv = pgd_perturb(
      x, [&](const ad::Tensor& xv) { return goal_objective(model(xv), g); }, cfg, first_index);
  const auto pred = models::argmax_rows(model(adv));
  return make_result(x, adv, goals_met(pred, g), cfg.norm);
}

AttackResult pgd_attack(const models::LogitFn& model, const ad::Tensor& x, std::span<const std::size_t> labels,
                        const AttackConfig& cfg, std::size_t first_index) {
  const auto goals = untargeted(labels);
  return pgd_attack(model, x, goals, cfg, first_index);
}

// ---- CW ------------------------------------------------------------------------

void CwConfig::validate() const {
  if (search_steps == 0) throw PreconditionError("cw: search_steps must be >= 1");
  if (!(c_lo > 0.0) || !(c_hi >= c_lo)) throw PreconditionError("cw: need 0 < c_lo <= c_hi");
  if (!(learn_rate > 0.0)) throw PreconditionError("cw: learn_rate must be > 0");
  if (kappa < 0.0) throw PreconditionError("cw: kappa must be >= 0");
}

AttackResult cw_attack_l2(const models::LogitFn& model, const ad::Tensor& x, std::span<const std::size_t> labels,
                          const CwConfig& cfg) {
  cfg.validate();
  const std::size_t d = example_stride(x);
  const std::size_t b = x.dim(0);
  if (labels.size() != b) throw ad::ShapeError("cw: label count does not match batch");
  const auto xc = x.data();
  for (std::size_t i = 0; i < xc.size(); ++i) {
    if (xc[i] < 0.0 || xc[i] > 1.0) {
      throw PreconditionError("cw: input outside [0,1] at example " + std::to_string(i / d));
    }
  }
  std::vector<std::size_t> y(labels.begin(), labels.end());

  std::vector<double> best(xc.begin(), xc.end());
  std::vector<double> best_norm(b, std::numeric_limits<double>::infinity());
  std::vector<bool> found(b, false);
  {
    const auto pred = models::argmax_rows(model(x));
    for (std::size_t r = 0; r < b; ++r) {
      if (pred[r] != y[r]) {
        found[r] = true;
        best_norm[r] = 0.0;
      }
    }
  }

  std::vector<double> omega0(xc.size());
  for (std::size_t i = 0; i < xc.size(); ++i) omega0[i] = std::atanh((2.0 * xc[i] - 1.0) * (1.0 - 1e-6));

  std::vector<double> lower(b, cfg.c_lo), upper(b, cfg.c_hi), c(b, std::sqrt(cfg.c_lo * cfg.c_hi));
  const std::size_t rounds = cfg.c_lo == cfg.c_hi ? 1 : cfg.search_steps;
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  for (std::size_t round = 0; round < rounds; ++round) {
    std::vector<double> omega = omega0;
    std::vector<double> m(omega.size(), 0.0), v(omega.size(), 0.0);
    std::vector<bool> round_success(b, false);
    for (std::size_t it = 0; it <= cfg.iterations; ++it) {
      ad::Tape tape;
      const ad::Tensor w = tape.variable(ad::Tensor(x.shape(), omega));
      const ad::Tensor xw = ad::scale(ad::add_scalar(ad::tanh(w), 1.0), 0.5);
      const ad::Tensor logits = model(xw);
      const ad::Tensor diff = ad::sub(xw, x);
      const ad::Tensor hinge = ad::clamp_min(ad::margin_rows(logits, y), -cfg.kappa);
      const ad::Tensor objective = ad::add(ad::sum(ad::mul(diff, diff)), ad::sum(ad::mul(ad::Tensor({b}, c), hinge)));

      const auto pred = models::argmax_rows(logits);
      const auto xwv = xw.data();
      for (std::size_t r = 0; r < b; ++r) {
        if (pred[r] == y[r]) continue;
        const double n = distance(xwv.subspan(r * d, d), xc.subspan(r * d, d), Norm::L2);
        if (n > cfg.epsilon) continue;
        round_success[r] = true;
        if (n < best_norm[r]) {
          best_norm[r] = n;
          found[r] = true;
          std::copy_n(xwv.begin() + static_cast<std::ptrdiff_t>(r * d), d, best.begin() + static_cast<std::ptrdiff_t>(r * d));
        }
      }
      if (it == cfg.iterations) break;

      tape.backward(objective);
      const auto g = w.grad();
      const double t = static_cast<double>(it + 1);
      const double corr1 = 1.0 - std::pow(beta1, t), corr2 = 1.0 - std::pow(beta2, t);
      for (std::size_t i = 0; i < omega.size(); ++i) {
        if (!std::isfinite(g[i])) throw AttackError(i / d, "cw: non-finite gradient at example " + std::to_string(i / d));
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        omega[i] -= cfg.learn_rate * (m[i] / corr1) / (std::sqrt(v[i] / corr2) + adam_eps);
      }
    }
    for (std::size_t r = 0; r < b; ++r) {
      if (round_success[r]) {
        upper[r] = std::min(upper[r], c[r]);
      } else {
        lower[r] = std::max(lower[r], c[r]);
      }
      c[r] = std::sqrt(lower[r] * upper[r]);
    }
  }
  return make_result(x, ad::Tensor(x.shape(), std::move(best)), found, Norm::L2);
}

// ---- boundary distance ---------------------------------------------------------------

BoundaryDistances boundary_distance(const models::LogitFn& model, const ad::Tensor& x, std::span<const Goal> goals,
                                    const BoundaryConfig& cfg, std::size_t first_index) {
  if (!(cfg.eps_max > 0.0)) throw PreconditionError("boundary_distance: eps_max must be > 0");
  if (!(cfg.tolerance > 0.0)) throw PreconditionError("boundary_distance: tolerance must be > 0");
  const std::size_t b = x.dim(0);
  if (goals.size() != b) throw ad::ShapeError("boundary_distance: goal count does not match batch");
  std::vector<Goal> g(goals.begin(), goals.end());

  AttackConfig attack;
  attack.norm = cfg.norm;
  attack.steps = std::max<std::size_t>(cfg.steps, 1);
  attack.random_init = cfg.random_init;
  attack.seed = cfg.seed;
  attack.input_box = cfg.input_box;

  // Success of PGD at per-example budget eps for the examples in `active`.
  auto probe = [&](const std::vector<std::size_t>& active, const std::vector<double>& eps) {
    const ad::Tensor xa = x.dim(0) == active.size() ? x : [&] {
      const std::size_t d = x.size() / b;
      std::vector<double> buf(active.size() * d);
      const auto xv = x.data();
      for (std::size_t i = 0; i < active.size(); ++i)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(active[i] * d), d, buf.begin() + static_cast<std::ptrdiff_t>(i * d));
      ad::Shape s = x.shape();
      s[0] = active.size();
      return ad::Tensor(std::move(s), std::move(buf));
    }();
    std::vector<Goal> ga;
    PgdSchedule schedule;
    for (std::size_t i = 0; i < active.size(); ++i) {
      ga.push_back(g[active[i]]);
      schedule.epsilon.push_back(eps[i]);
      schedule.step_size.push_back(2.5 * eps[i] / static_cast<double>(attack.steps));
      schedule.stream.push_back(first_index + active[i]);
    }
    const ad::Tensor adv = pgd_perturb(
        xa, [&](const ad::Tensor& xv) { return goal_objective(model(xv), ga); }, attack, schedule);
    return goals_met(models::argmax_rows(model(adv)), ga);
  };

  BoundaryDistances out{std::vector<double>(b, 0.0), std::vector<bool>(b, false)};
  const auto clean_pred = models::argmax_rows(model(x));
  std::vector<std::size_t> active;
  for (std::size_t r = 0; r < b; ++r) {
    if (!goal_met(g[r], clean_pred[r])) active.push_back(r);
  }
  if (active.empty()) return out;

  {
    const auto ok = probe(active, std::vector<double>(active.size(), cfg.eps_max));
    std::vector<std::size_t> reachable;
    for (std::size_t i = 0; i < active.size(); ++i) {
      if (ok[i]) {
        reachable.push_back(active[i]);
      } else {
        out.distance[active[i]] = cfg.eps_max;
        out.capped[active[i]] = true;
      }
    }
    active = std::move(reachable);
  }
  std::vector<double> lo(b, 0.0), hi(b, cfg.eps_max);
  while (!active.empty()) {
    std::vector<double> mid;
    for (auto r : active) mid.push_back(0.5 * (lo[r] + hi[r]));
    const auto ok = probe(active, mid);
    std::vector<std::size_t> next;
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t r = active[i];
      (ok[i] ? hi[r] : lo[r]) = mid[i];
      if (hi[r] - lo[r] > cfg.tolerance) next.push_back(r);
    }
    active = std::move(next);
  }
  for (std::size_t r = 0; r < b; ++r) {
    if (!out.capped[r] && !goal_met(g[r], clean_pred[r])) out.distance[r] = hi[r];
  }
  return out;
}

}  // namespace simplerob::attacks
