// Acceptance runner: `acceptance N` evaluates criterion N (1..14) and prints
// one PASS/FAIL line; `acceptance` with no argument runs them all.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "simplerob/analysis.hpp"
#include "simplerob/cli.hpp"
#include "simplerob/common.hpp"
#include "simplerob/robin.hpp"
#include "support.hpp"

using namespace simplerob;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

const std::size_t kHidden[] = {64, 64};

training::TrainConfig toy_train(std::uint64_t seed, training::Defense defense = training::Defense::AdvTrain) {
  training::TrainConfig tc;
  tc.defense = defense;
  tc.attack.epsilon = 0.25;
  tc.attack.norm = attacks::Norm::L2;
  tc.seed = seed;
  return tc;
}

// ---- 1: gradients ----------------------------------------------------------------------

struct OpCase {
  std::string name;
  std::function<std::vector<Tensor>(std::mt19937_64&)> inputs;
  std::function<Tensor(const std::vector<Tensor>&, std::mt19937_64&)> build;  // may draw fixed constants
};

std::size_t dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor reduce(const Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return testing::weighted_sum(t, testing::random_tensor(rng, {t.size()}));
}

std::vector<OpCase> op_cases() {
  using V = std::vector<Tensor>;
  auto mat = [](std::mt19937_64& rng) {
    const std::size_t n = dim(rng, 1, 4), m = dim(rng, 1, 5);
    return V{testing::random_tensor(rng, {n, m}), testing::random_tensor(rng, {n, m})};
  };
  auto one = [](std::mt19937_64& rng) { return V{testing::random_tensor(rng, {dim(rng, 1, 4), dim(rng, 2, 5)}, -3, 3)}; };
  auto logits_pair = [](std::mt19937_64& rng) {
    const std::size_t n = dim(rng, 1, 4), k = dim(rng, 2, 5);
    return V{testing::random_tensor(rng, {n, k}, -3, 3), testing::random_tensor(rng, {n, k}, -3, 3)};
  };
  auto labels_for = [](const Tensor& z, std::mt19937_64& rng) { return testing::random_labels(rng, z.dim(0), z.dim(1)); };
  std::vector<OpCase> c;
  c.push_back({"matmul",
               [](std::mt19937_64& rng) {
                 const std::size_t n = dim(rng, 1, 4), k = dim(rng, 1, 5), m = dim(rng, 1, 4);
                 return V{testing::random_tensor(rng, {n, k}), testing::random_tensor(rng, {k, m})};
               },
               [](const V& in, std::mt19937_64& rng) { return reduce(ad::matmul(in[0], in[1]), rng()); }});
  c.push_back({"add", mat, [](const V& in, std::mt19937_64& rng) { return reduce(ad::add(in[0], in[1]), rng()); }});
  c.push_back({"sub", mat, [](const V& in, std::mt19937_64& rng) { return reduce(ad::sub(in[0], in[1]), rng()); }});
  c.push_back({"mul", mat, [](const V& in, std::mt19937_64& rng) { return reduce(ad::mul(in[0], in[1]), rng()); }});
  c.push_back({"scale", one, [](const V& in, std::mt19937_64& rng) { return reduce(ad::scale(in[0], -1.7), rng()); }});
  c.push_back({"add_scalar", one, [](const V& in, std::mt19937_64& rng) { return reduce(ad::add_scalar(in[0], 0.3), rng()); }});
  c.push_back({"relu", one, [](const V& in, std::mt19937_64& rng) { return reduce(ad::relu(in[0]), rng()); }});
  c.push_back({"sigmoid", one, [](const V& in, std::mt19937_64& rng) { return reduce(ad::sigmoid(in[0]), rng()); }});
  c.push_back({"tanh", one, [](const V& in, std::mt19937_64& rng) { return reduce(ad::tanh(in[0]), rng()); }});
  c.push_back({"clamp_min", one, [](const V& in, std::mt19937_64& rng) { return reduce(ad::clamp_min(in[0], -0.5), rng()); }});
  c.push_back({"sum", one, [](const V& in, std::mt19937_64&) { return ad::scale(ad::sum(ad::mul(in[0], in[0])), 0.5); }});
  c.push_back({"mean", one, [](const V& in, std::mt19937_64&) { return ad::mean(ad::mul(in[0], in[0])); }});
  c.push_back({"reshape", one, [](const V& in, std::mt19937_64& rng) { return reduce(ad::reshape(in[0], {in[0].size()}), rng()); }});
  c.push_back({"add_bias",
               [](std::mt19937_64& rng) {
                 const std::size_t n = dim(rng, 1, 4), m = dim(rng, 1, 5);
                 return V{testing::random_tensor(rng, {n, m}), testing::random_tensor(rng, {m})};
               },
               [](const V& in, std::mt19937_64& rng) { return reduce(ad::add_bias(in[0], in[1]), rng()); }});
  c.push_back({"conv2d",
               [](std::mt19937_64& rng) {
                 const std::size_t n = dim(rng, 1, 2), ch = dim(rng, 1, 2), h = dim(rng, 3, 5), w = dim(rng, 3, 5),
                                   o = dim(rng, 1, 3);
                 return V{testing::random_tensor(rng, {n, ch, h, w}), testing::random_tensor(rng, {o, ch, 3, 3}),
                          testing::random_tensor(rng, {o})};
               },
               [](const V& in, std::mt19937_64& rng) {
                 const std::size_t pad = rng() % 2;
                 return reduce(ad::conv2d(in[0], in[1], in[2], pad), rng());
               }});
  c.push_back({"softmax", one, [](const V& in, std::mt19937_64& rng) { return reduce(ad::softmax(in[0]), rng()); }});
  c.push_back({"cross_entropy_rows", one, [=](const V& in, std::mt19937_64& rng) {
                 const auto y = labels_for(in[0], rng);
                 return reduce(ad::cross_entropy_rows(in[0], y), rng());
               }});
  c.push_back({"softmax_cross_entropy", one, [=](const V& in, std::mt19937_64& rng) {
                 return ad::softmax_cross_entropy(in[0], labels_for(in[0], rng));
               }});
  c.push_back({"kl_rows", logits_pair, [](const V& in, std::mt19937_64& rng) { return reduce(ad::kl_rows(in[0], in[1]), rng()); }});
  c.push_back({"kl_divergence", logits_pair, [](const V& in, std::mt19937_64&) { return ad::kl_divergence(in[0], in[1]); }});
  c.push_back({"margin_rows", one, [=](const V& in, std::mt19937_64& rng) {
                 const auto y = labels_for(in[0], rng);
                 return reduce(ad::margin_rows(in[0], y), rng());
               }});
  c.push_back({"runner_up_nll_rows", one, [=](const V& in, std::mt19937_64& rng) {
                 const auto y = labels_for(in[0], rng);
                 return reduce(ad::runner_up_nll_rows(in[0], y), rng());
               }});
  c.push_back({"pick", one, [=](const V& in, std::mt19937_64& rng) {
                 const auto cols = labels_for(in[0], rng);
                 return reduce(ad::pick(in[0], cols), rng());
               }});
  c.push_back({"lift_binary",
               [](std::mt19937_64& rng) { return V{testing::random_tensor(rng, {dim(rng, 1, 5), 1}, -3, 3)}; },
               [](const V& in, std::mt19937_64& rng) { return reduce(ad::softmax(ad::lift_binary(in[0])), rng()); }});
  c.push_back({"concat_columns",
               [](std::mt19937_64& rng) {
                 const std::size_t n = dim(rng, 1, 4);
                 return V{testing::random_tensor(rng, {n, 1}), testing::random_tensor(rng, {n}), testing::random_tensor(rng, {n, 1})};
               },
               [](const V& in, std::mt19937_64& rng) { return reduce(ad::concat_columns(in), rng()); }});
  return c;
}

// Surrogate losses through a small ReLU network; x′ is held fixed, so the
// check covers the parameter gradient the trainer actually uses.
OpCase surrogate_case(bool mart) {
  const std::size_t hidden[] = {5};
  const auto spec = models::mlp(3, hidden, 4);
  auto names = std::make_shared<std::vector<std::string>>();
  for (const auto& [name, t] : models::init_model(spec, 0)) names->push_back(name);
  return {mart ? "mart_rows" : "trades_rows",
          [spec](std::mt19937_64& rng) {
            std::vector<Tensor> v;
            for (const auto& [name, t] : models::init_model(spec, rng())) {
              v.push_back(testing::random_tensor(rng, t.shape(), -0.8, 0.8));
            }
            return v;
          },
          [spec, names, mart](const std::vector<Tensor>& in, std::mt19937_64& rng) {
            models::Parameters p;
            for (std::size_t i = 0; i < names->size(); ++i) p[(*names)[i]] = in[i];
            const std::size_t n = dim(rng, 2, 5);
            const Tensor x = testing::random_tensor(rng, {n, 3});
            const Tensor xa = ad::add(x, testing::random_tensor(rng, {n, 3}, -0.2, 0.2));
            const auto y = testing::random_labels(rng, n, 4);
            const double lambda = std::uniform_real_distribution<double>(0.5, 6.0)(rng);
            const Tensor clean = training::class_logits(spec, p, x), adv = training::class_logits(spec, p, xa);
            return ad::mean(mart ? training::mart_rows(clean, adv, y, lambda) : training::trades_rows(clean, adv, y, lambda));
          }};
}

Verdict criterion_gradients() {
  auto cases = op_cases();
  cases.push_back(surrogate_case(false));
  cases.push_back(surrogate_case(true));
  double worst = 0.0;
  std::string worst_op;
  std::ostringstream failures;
  for (const auto& op : cases) {
    double op_worst = 0.0;
    for (std::uint64_t inst = 0; inst < 100; ++inst) {
      std::mt19937_64 rng(derive_seed(derive_seed(1, op.name), inst));
      const auto inputs = op.inputs(rng);
      const std::uint64_t build_seed = rng();
      // Every evaluation must draw the same constants, so each call reseeds.
      const testing::ScalarFn f = [&](const std::vector<Tensor>& in) {
        std::mt19937_64 local(build_seed);
        return op.build(in, local);
      };
      op_worst = std::max(op_worst, testing::gradcheck(f, inputs));
    }
    if (op_worst >= 1e-5) failures << ' ' << op.name << '=' << op_worst;
    if (op_worst >= worst) worst = op_worst, worst_op = op.name;
  }
  const bool pass = failures.str().empty();
  return {pass, std::to_string(cases.size()) + " operations x 100 instances, worst relative error " + fmt("%.2e", worst) +
                    " (" + worst_op + ")" + (pass ? "" : ", failing:" + failures.str())};
}

// ---- 2: ball invariant ------------------------------------------------------------------

Verdict criterion_ball() {
  std::mt19937_64 rng(2);
  const std::size_t hidden[] = {8};
  std::vector<models::Model> multi;
  std::vector<robin::BinaryAggregate> aggs;
  for (std::uint64_t s = 0; s < 4; ++s) {
    const auto spec = models::mlp(2, hidden, 3);
    multi.push_back({spec, models::init_model(spec, s)});
    robin::BinaryAggregate agg;
    const auto arm = models::mlp(2, hidden, 1);
    for (std::uint64_t i = 0; i < 3; ++i) agg.arms.push_back({arm, models::init_model(arm, 10 * s + i)});
    agg.class_names = robin::default_class_names(3);
    aggs.push_back(std::move(agg));
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t invocations = 0, violations = 0;
  double worst_excess = -1.0;
  for (; invocations < 10000; ++invocations) {
    attacks::AttackConfig cfg;
    cfg.norm = rng() % 2 ? attacks::Norm::L2 : attacks::Norm::Linf;
    cfg.epsilon = rng() % 10 == 0 ? 0.0 : 2.0 * u(rng);
    cfg.steps = 1 + rng() % 6;
    cfg.step_size = rng() % 2 ? 0.0 : 3.0 * u(rng);
    cfg.random_init = rng() % 2;
    cfg.seed = rng();
    const bool boxed = rng() % 2;
    if (boxed) cfg.input_box = attacks::Box{0.0, 1.0};
    const std::size_t b = 1 + rng() % 4;
    const Tensor x = boxed ? testing::random_tensor(rng, {b, 2}, 0.0, 1.0) : testing::random_tensor(rng, {b, 2}, -2.0, 2.0);
    const auto labels = testing::random_labels(rng, b, 3);
    const auto& agg = aggs[rng() % aggs.size()];
    robin::RobinAttackConfig rc;
    rc.pgd = cfg;
    const std::size_t kind = rng() % 8;
    attacks::AttackResult res;
    if (kind == 6) {
      res = attacks::pgd_attack(models::logit_fn(multi[rng() % multi.size()]), x, labels, cfg, rng() % 100);
    } else if (kind == 7) {
      res = robin::transfer_attack(models::logit_fn(multi[0]), agg, x, labels, rc,
                                   rng() % 2 ? robin::TransferMode::Targeted : robin::TransferMode::Untargeted);
    } else {
      res = robin::run_aggregate_attack(robin::kAllAggregateAttacks[kind], agg, x, labels, rc, rng() % 100);
    }
    const auto xa = res.adversarial.data(), xc = x.data();
    for (std::size_t r = 0; r < b; ++r) {
      const double d = attacks::distance(xc.subspan(2 * r, 2), xa.subspan(2 * r, 2), cfg.norm);
      worst_excess = std::max(worst_excess, d - cfg.epsilon);
      bool bad = d > cfg.epsilon + 1e-9;
      if (boxed) {
        for (std::size_t i = 0; i < 2; ++i) bad = bad || xa[2 * r + i] < 0.0 || xa[2 * r + i] > 1.0;
      }
      violations += bad;
    }
  }
  return {violations == 0, std::to_string(invocations) + " invocations, " + std::to_string(violations) +
                               " violations, max(norm - eps) = " + fmt("%.3e", worst_excess)};
}

// ---- 3: warm-up -----------------------------------------------------------------------------

Verdict criterion_warmup() {
  double worst = 0.0;
  for (double total : {1.0, 7.0, 30.0, 1000.0}) {
    worst = std::max({worst, std::abs(training::warmup_fraction(0.0, total)),
                      std::abs(training::warmup_fraction(total, total) - 1.0),
                      std::abs(training::warmup_fraction(total / 2.0, total) - 0.5)});
  }
  return {worst <= 1e-12, "max endpoint deviation " + fmt("%.1e", worst)};
}

// ---- toy k=4 setup shared by 4, 5, 10, 11, 12 ----------------------------------------------------

struct Toy4 {
  data::Dataset train, test;
  robin::BinaryAggregate agg;
  std::vector<models::Model> ensemble;  // ensemble[0] is the multiclass baseline
  robin::RobinAttackConfig attack;
};

Toy4 make_toy4(std::uint64_t seed, std::size_t members) {
  Toy4 t;
  t.train = data::gen_gaussians(4, 150, 0.25, 200 + seed);
  t.test = data::gen_gaussians(4, 125, 0.25, 700 + seed);
  const auto tc = toy_train(seed);
  t.agg = robin::train_robin(models::mlp(2, kHidden, 1), t.train, tc).aggregate;
  const auto spec = models::mlp(2, kHidden, 4);
  for (std::size_t e = 0; e < members; ++e) {
    auto te = tc;
    te.seed = seed * 10 + e;
    t.ensemble.push_back({spec, training::train(spec, t.train, te).params});
  }
  t.attack.pgd = tc.attack;
  t.attack.pgd.seed = 11;
  return t;
}

// ---- 4: containment ------------------------------------------------------------------------

Verdict criterion_containment() {
  const auto toy = make_toy4(0, 0);
  const auto best = robin::attack_dataset(toy.test, [&](std::size_t f, const Tensor& x, std::span<const std::size_t> y) {
    return robin::attack_best_arm(toy.agg, x, y, toy.attack, f);
  });
  const auto high = robin::attack_dataset(toy.test, [&](std::size_t f, const Tensor& x, std::span<const std::size_t> y) {
    return robin::attack_highest_arm(toy.agg, x, y, toy.attack, f);
  });
  std::size_t violations = 0;
  for (std::size_t i = 0; i < toy.test.size(); ++i) violations += high.success[i] && !best.success[i];
  return {violations == 0 && toy.test.size() == 500,
          std::to_string(toy.test.size()) + " points, highest-arm successes " + std::to_string(high.success_count()) +
              ", best-arm successes " + std::to_string(best.success_count()) + ", violations " + std::to_string(violations)};
}

// ---- 5: strongest-of bound ------------------------------------------------------------------------

bool bound_holds(const robin::RobustReport& r) {
  for (double a : r.accuracy) {
    if (r.strongest_of > a) return false;
  }
  return true;
}

Verdict criterion_strongest_of() {
  std::size_t reports = 0, violations = 0;
  auto check = [&](const robin::RobustReport& r) {
    ++reports;
    violations += !bound_holds(r);
  };
  std::mt19937_64 rng(5);
  for (int i = 0; i < 2000; ++i) {
    const std::size_t n = 1 + rng() % 40, a = 1 + rng() % 6;
    std::vector<bool> clean(n);
    for (std::size_t e = 0; e < n; ++e) clean[e] = rng() % 4 != 0;
    std::vector<robin::AttackOutcome> outcomes;
    for (std::size_t k = 0; k < a; ++k) {
      robin::AttackOutcome o{"a" + std::to_string(rng() % 4), std::vector<bool>(n)};
      for (std::size_t e = 0; e < n; ++e) o.success[e] = rng() % 3 == 0;
      outcomes.push_back(std::move(o));
    }
    check(robin::summarize(clean, outcomes));
  }
  const auto toy = make_toy4(1, 1);
  for (double eps : {0.0, 0.25, 0.5, 1.0}) {
    auto cfg = toy.attack;
    cfg.pgd.epsilon = eps;
    check(robin::robust_accuracy(toy.agg, toy.test, robin::kAllAggregateAttacks, cfg));
    const robin::ModelAttack pgd[] = {robin::ModelAttack::Pgd};
    check(robin::robust_accuracy(toy.ensemble[0], toy.test, pgd, cfg));
  }
  return {violations == 0, std::to_string(reports) + " reports, " + std::to_string(violations) + " violations"};
}

// ---- 6: defense works ---------------------------------------------------------------------------

Verdict criterion_defense() {
  const std::size_t hidden[] = {64, 64};
  const auto spec = models::mlp(2, hidden, 2);
  double standard = 0.0, robust = 0.0;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto train = data::gen_gaussians(2, 200, 0.25, 100 + seed);
    const auto test = data::gen_gaussians(2, 250, 0.25, 900 + seed);
    training::TrainConfig tc;
    tc.seed = seed;
    tc.attack.epsilon = 0.3;
    tc.attack.norm = attacks::Norm::L2;
    const models::Model std_model{spec, training::train(spec, train, tc).params};
    tc.defense = training::Defense::AdvTrain;
    const models::Model adv_model{spec, training::train(spec, train, tc).params};
    robin::RobinAttackConfig ac;
    ac.pgd = tc.attack;
    ac.pgd.seed = 7;
    const robin::ModelAttack pgd[] = {robin::ModelAttack::Pgd};
    const double s = robin::robust_accuracy(std_model, test, pgd, ac).strongest_of;
    const double a = robin::robust_accuracy(adv_model, test, pgd, ac).strongest_of;
    per_seed << ' ' << fmt("%.3f", s) << '/' << fmt("%.3f", a);
    standard += s / 5.0;
    robust += a / 5.0;
  }
  const double gap = robust - standard;
  return {gap >= 0.10, "robust accuracy standard " + fmt("%.4f", standard) + ", adversarial " + fmt("%.4f", robust) +
                           ", gap " + fmt("%+.4f", gap) + " (need >= +0.10); per seed std/adv:" + per_seed.str()};
}

// ---- 7, 8: simplicity and separation --------------------------------------------------------------

struct SweepSummary {
  double robust2 = 0, robust6 = 0, standard2 = 0, standard6 = 0;
};

SweepSummary sweep_runs() {
  SweepSummary s;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto train = data::gen_gaussians(6, 150, 0.25, 100 + seed);
    const auto test = data::gen_gaussians(6, 100, 0.25, 900 + seed);
    analysis::SweepConfig sc;
    sc.trunk = models::mlp(2, kHidden, 6);
    sc.train = toy_train(0);
    sc.attack = sc.train.attack;
    sc.eps_grid = {0.0, 0.25, 0.5};
    sc.permutations = 3;
    sc.seed = seed;
    const auto robust = analysis::simplicity_sweep(train, test, sc);
    auto standard_cfg = sc;
    standard_cfg.train.defense = training::Defense::Standard;
    standard_cfg.eps_grid = {};
    const auto standard = analysis::simplicity_sweep(train, test, standard_cfg);
    s.robust2 += robust.row(2).robust_mean[2] / 3.0;
    s.robust6 += robust.row(6).robust_mean[2] / 3.0;
    s.standard2 += standard.row(2).clean_mean / 3.0;
    s.standard6 += standard.row(6).clean_mean / 3.0;
  }
  return s;
}

Verdict criterion_simplicity() {
  const auto s = sweep_runs();
  return {s.robust2 > s.robust6, "robust accuracy at 2x train eps: MODEL[2] " + fmt("%.4f", s.robust2) + ", MODEL[6] " +
                                     fmt("%.4f", s.robust6)};
}

Verdict criterion_separation() {
  const auto s = sweep_runs();
  const double std_drop = s.standard2 - s.standard6, rob_drop = s.robust2 - s.robust6;
  return {std_drop < rob_drop, "j=2 to j=6 drop: standard clean " + fmt("%+.4f", std_drop) + ", robust at 2x eps " +
                                   fmt("%+.4f", rob_drop)};
}

// ---- 9: boundary distances -----------------------------------------------------------------------

Verdict criterion_boundary() {
  double binary = 0.0, multi = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto train = data::gen_gaussians(6, 150, 0.25, 100 + seed);
    const auto test = data::gen_gaussians(6, 50, 0.25, 900 + seed);
    const auto tc = toy_train(seed);
    attacks::BoundaryConfig bc;
    bc.eps_max = 1.5;
    for (std::size_t j : {2u, 6u}) {
      const auto map = data::make_model_j(6, j);
      const auto tr = data::relabel(train, map), te = data::relabel(test, map);
      const auto spec = models::mlp(2, kHidden, j);
      const models::Model m{spec, training::train(spec, tr, tc).params};
      const auto goals = analysis::binary_task_goals(te.labels);
      const double mean = analysis::boundary_distribution(models::logit_fn(m), te.inputs, goals, bc).summary.mean;
      (j == 2 ? binary : multi) += mean / 5.0;
    }
  }
  return {binary > multi, "mean boundary distance: binary " + fmt("%.4f", binary) + ", multiclass " + fmt("%.4f", multi)};
}

// ---- 10, 11, 12 ---------------------------------------------------------------------------------------

Verdict criterion_robin() {
  double robin_acc = 0.0, mc = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto toy = make_toy4(seed, 1);
    const robin::ModelAttack pgd[] = {robin::ModelAttack::Pgd};
    robin_acc += robin::robust_accuracy(toy.agg, toy.test, robin::kAllAggregateAttacks, toy.attack).strongest_of / 5.0;
    mc += robin::robust_accuracy(toy.ensemble[0], toy.test, pgd, toy.attack).strongest_of / 5.0;
  }
  return {robin_acc >= mc - 0.01, "strongest-of RoBin " + fmt("%.4f", robin_acc) + ", multiclass PGD " + fmt("%.4f", mc) +
                                      ", signed gap " + fmt("%+.4f", robin_acc - mc)};
}

Verdict criterion_coherence() {
  // Identical arms.
  robin::BinaryAggregate same;
  const std::size_t hidden[] = {16};
  const auto arm = models::mlp(2, hidden, 1);
  const auto params = models::init_model(arm, 3);
  for (int i = 0; i < 4; ++i) same.arms.push_back({arm, params});
  same.class_names = robin::default_class_names(4);
  const auto probe = data::gen_gaussians(4, 50, 0.25, 1);
  double identical_dev = 0.0;
  std::size_t out_of_range = 0, values = 0;
  for (const auto& v : analysis::coherence(same, probe.inputs, probe.labels)) {
    if (v) identical_dev = std::max(identical_dev, std::abs(*v - 1.0));
  }
  double robin_mean = 0.0, ens_mean = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto toy = make_toy4(seed, 5);
    const auto r = analysis::coherence_report(toy.agg, toy.test);
    const auto e = analysis::coherence_report(toy.ensemble, toy.test);
    for (const auto* rep : {&r, &e}) {
      for (const auto& v : rep->values) {
        if (!v) continue;
        ++values;
        out_of_range += *v < -1.0 || *v > 1.0;
      }
    }
    robin_mean += r.summary.mean / 5.0;
    ens_mean += e.summary.mean / 5.0;
  }
  const bool pass = out_of_range == 0 && identical_dev <= 1e-9 && robin_mean < ens_mean;
  return {pass, std::to_string(values) + " values, " + std::to_string(out_of_range) + " outside [-1,1]; identical arms |c-1| <= " +
                    fmt("%.1e", identical_dev) + "; mean coherence RoBin " + fmt("%.4f", robin_mean) + ", ensemble " +
                    fmt("%.4f", ens_mean)};
}

Verdict criterion_transfer() {
  double transfer = 0.0, softmax = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto toy = make_toy4(seed, 1);
    const robin::AggregateAttack sm[] = {robin::AggregateAttack::Softmax};
    const auto rep = robin::robust_accuracy(toy.agg, toy.test, sm, toy.attack);
    const auto surrogate = models::logit_fn(toy.ensemble[0]);
    const auto tr = robin::attack_dataset(toy.test, [&](std::size_t f, const Tensor& x, std::span<const std::size_t> y) {
      return robin::transfer_attack(surrogate, toy.agg, x, y, toy.attack, robin::TransferMode::Untargeted, f);
    });
    const std::vector<robin::AttackOutcome> outcome{{"transfer", tr.success}};
    transfer += robin::summarize(rep.clean_correct, outcome).strongest_of / 5.0;
    softmax += rep.accuracy[0] / 5.0;
  }
  return {transfer > softmax, "surviving accuracy: transfer " + fmt("%.4f", transfer) + ", softmax attack " + fmt("%.4f", softmax)};
}

// ---- 13: CW sanity ------------------------------------------------------------------------------------

Verdict criterion_cw() {
  // A linear two-class model trained without any defense on data squeezed into the unit box.
  auto train = data::gen_gaussians(2, 200, 0.35, 13);
  auto test = data::gen_gaussians(2, 250, 0.35, 14);
  auto squeeze = [](data::Dataset& d) {
    for (auto& v : d.inputs.mutable_data()) v = std::clamp((v + 1.6) / 3.2, 0.0, 1.0);
  };
  squeeze(train);
  squeeze(test);
  const auto spec = models::ModelSpec::parse("in=2;dense(2,2)");
  training::TrainConfig tc;
  tc.seed = 13;
  const models::Model m{spec, training::train(spec, train, tc).params};
  const auto& w = m.params.at("layer00.weight");
  const auto& b = m.params.at("layer00.bias");
  const double a0 = w.at(0) - w.at(1), a1 = w.at(2) - w.at(3), c = b.at(0) - b.at(1);
  const double norm = std::hypot(a0, a1);

  const auto pred = m.predict(test.inputs);
  const auto r = attacks::cw_attack_l2(models::logit_fn(m), test.inputs, pred, attacks::CwConfig{});
  std::size_t eligible = 0, within = 0, failed = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const double x0 = test.inputs.at(2 * i), x1 = test.inputs.at(2 * i + 1);
    const double s = a0 * x0 + a1 * x1 + c;
    const double d = std::abs(s) / norm;
    // The nearest boundary point must lie in the box for d to be the true distance.
    const double p0 = x0 - s * a0 / (norm * norm), p1 = x1 - s * a1 / (norm * norm);
    if (p0 < 0.0 || p0 > 1.0 || p1 < 0.0 || p1 > 1.0 || d == 0.0) continue;
    ++eligible;
    if (!r.success[i]) {
      ++failed;
      continue;
    }
    within += std::abs(r.perturbation_norm[i] - d) <= 0.1 * d;
  }
  const double frac = eligible ? double(within) / double(eligible) : 0.0;
  return {eligible > 0 && frac >= 0.95, std::to_string(within) + "/" + std::to_string(eligible) +
                                            " examples within 10% of the hyperplane distance (" + fmt("%.3f", frac) +
                                            "), " + std::to_string(failed) + " unsuccessful"};
}

// ---- 14: determinism ----------------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::map<std::string, std::string> dir_contents(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = slurp(e.path());
  return out;
}

Verdict criterion_determinism() {
  const fs::path root = fs::temp_directory_path() / "simplerob_acceptance_14";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string base =
      "[data]\nclasses = 3\ntrain_per_class = 40\ntest_per_class = 20\n[model]\nhidden = 16,16\n"
      "[train]\nepochs = 4\nbatch_size = 32\n[analysis]\nensemble_size = 2\naggregate = agg1\n";
  std::ofstream(root / "train.ini") << base;
  std::ofstream(root / "attack_model.ini") << base << "[attack]\ncheckpoint = model1\n";
  std::ofstream(root / "attack_agg.ini") << base << "[attack]\ncheckpoint = agg1\n";

  std::vector<std::string> problems;
  auto run = [&](const std::string& command, const std::string& config, const std::string& out, std::size_t jobs,
                 const std::string& mode = "") {
    cli::Options o;
    o.command = command;
    o.config = root / config;
    o.out = root / out;
    o.jobs = jobs;
    o.mode = mode;
    std::ostringstream log, err;
    if (cli::run(o, log, err) != 0) problems.push_back(command + " -> " + out + " failed: " + err.str());
  };
  std::size_t compared = 0;
  auto same = [&](const std::string& a, const std::string& b) {
    const auto ca = dir_contents(root / a), cb = dir_contents(root / b);
    compared += ca.size();
    if (ca.empty() || ca != cb) problems.push_back(a + " and " + b + " differ");
  };

  run("train", "train.ini", "model1", 1);
  run("train", "train.ini", "model2", 1);
  run("train", "train.ini", "model4", 4);
  run("robin-train", "train.ini", "agg1", 1);
  run("robin-train", "train.ini", "agg2", 1);
  run("robin-train", "train.ini", "agg4", 4);
  run("attack", "attack_model.ini", "att1", 1);
  run("attack", "attack_model.ini", "att2", 1);
  run("attack", "attack_model.ini", "att4", 4);
  run("robin-attack", "attack_agg.ini", "ratt1", 1);
  run("robin-attack", "attack_agg.ini", "ratt2", 1);
  run("robin-attack", "attack_agg.ini", "ratt4", 4);
  run("analyze", "train.ini", "coh1", 1, "coherence");
  run("analyze", "train.ini", "coh4", 4, "coherence");
  if (problems.empty()) {
    for (const char* stem : {"model", "agg", "att", "ratt"}) {
      same(std::string(stem) + "1", std::string(stem) + "2");
      same(std::string(stem) + "1", std::string(stem) + "4");
    }
    same("coh1", "coh4");
  }

  // Checkpoint round trips: bytes → parameters → bytes.
  std::size_t round_trips = 0;
  if (problems.empty()) {
    const std::string bytes = slurp(root / "model1" / "model.rbn");
    const auto params = models::read_checkpoint(root / "model1" / "model.rbn");
    const auto again = models::save_checkpoint(params);
    if (std::string(again.begin(), again.end()) != bytes) problems.push_back("model checkpoint round trip differs");
    ++round_trips;
    const auto agg = robin::load_aggregate(root / "agg1");
    robin::save_aggregate(root / "agg_copy", agg, "roundtrip");
    for (std::size_t i = 0; i < agg.num_classes(); ++i) {
      const std::string f = "arm_" + std::to_string(i) + ".rbn";
      if (slurp(root / "agg1" / f) != slurp(root / "agg_copy" / f)) problems.push_back(f + " round trip differs");
      ++round_trips;
    }
  }
  std::ostringstream detail;
  detail << compared << " files compared across repeat and --jobs 4 runs, " << round_trips << " checkpoint round trips";
  for (const auto& p : problems) detail << "; " << p;
  fs::remove_all(root);
  return {problems.empty(), detail.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, std::function<Verdict()>>> criteria = {
      {1, criterion_gradients},  {2, criterion_ball},        {3, criterion_warmup},     {4, criterion_containment},
      {5, criterion_strongest_of}, {6, criterion_defense},   {7, criterion_simplicity}, {8, criterion_separation},
      {9, criterion_boundary},   {10, criterion_robin},      {11, criterion_coherence}, {12, criterion_transfer},
      {13, criterion_cw},        {14, criterion_determinism}};
  const int only = argc > 1 ? std::atoi(argv[1]) : 0;
  if (argc > 1 && (only < 1 || only > 14)) {
    std::cerr << "usage: acceptance [1-14]\n";
    return 2;
  }
  bool all_pass = true;
  for (const auto& [n, fn] : criteria) {
    if (only && n != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "criterion " << n << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << " [" << fmt("%.1f", secs)
              << " s]" << std::endl;
    all_pass = all_pass && v.pass;
  }
  return all_pass ? 0 : 1;
}
