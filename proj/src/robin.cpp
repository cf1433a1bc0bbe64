#include "simplerob/robin.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "simplerob/common.hpp"

namespace simplerob::robin {

namespace {

std::size_t row_stride(const ad::Tensor& x) { return x.size() / x.dim(0); }

ad::Tensor gather_rows(const ad::Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t d = row_stride(x);
  std::vector<double> out(rows.size() * d);
  const auto xv = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  ad::Shape shape = x.shape();
  shape[0] = rows.size();
  return ad::Tensor(std::move(shape), std::move(out));
}

void scatter_rows(std::vector<double>& dest, std::size_t d, const ad::Tensor& src, std::span<const std::size_t> rows) {
  const auto sv = src.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(sv.begin() + static_cast<std::ptrdiff_t>(i * d), d, dest.begin() + static_cast<std::ptrdiff_t>(rows[i] * d));
  }
}

std::vector<std::size_t> ones(std::size_t n) { return std::vector<std::size_t>(n, 1); }

// BCE(sigmoid(z), 1) per row, via the lifted two-class form.
ad::Tensor score_loss(const ad::Tensor& z) {
  const auto y = ones(z.dim(0));
  return ad::cross_entropy_rows(ad::lift_binary(z), y);
}

std::vector<std::uint64_t> streams_for(std::span<const std::size_t> rows, std::size_t first_index) {
  std::vector<std::uint64_t> s;
  s.reserve(rows.size());
  for (auto r : rows) s.push_back(first_index + r);
  return s;
}

std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

// Base attack (PGD or CW) against `fn` on the given rows of x; returns the
// perturbed rows in order. Per-example RNG streams use the original row index.
ad::Tensor base_perturb(const models::LogitFn& fn, const ad::Tensor& x, std::span<const attacks::Goal> goals,
                        const RobinAttackConfig& cfg, std::uint64_t seed, std::span<const std::uint64_t> streams) {
  if (cfg.base == BaseAttack::Cw) {
    std::vector<std::size_t> labels;
    for (const auto& g : goals) {
      if (g.targeted) throw PreconditionError("cw base attack supports untargeted goals only");
      labels.push_back(g.label);
    }
    return attacks::cw_attack_l2(fn, x, labels, cfg.cw).adversarial;
  }
  attacks::AttackConfig pgd = cfg.pgd;
  pgd.seed = seed;
  const std::size_t b = x.dim(0);
  attacks::PgdSchedule schedule{std::vector<double>(b, pgd.epsilon), std::vector<double>(b, pgd.effective_step_size()),
                                std::vector<std::uint64_t>(streams.begin(), streams.end())};
  std::vector<attacks::Goal> g(goals.begin(), goals.end());
  return attacks::pgd_perturb(
      x, [&](const ad::Tensor& xv) { return attacks::goal_objective(fn(xv), g); }, pgd, schedule);
}

attacks::Norm result_norm(const RobinAttackConfig& cfg) {
  return cfg.base == BaseAttack::Pgd ? cfg.pgd.norm : attacks::Norm::L2;
}

attacks::AttackResult judged(const BinaryAggregate& agg, const ad::Tensor& x, const ad::Tensor& adv,
                             std::span<const std::size_t> labels, const RobinAttackConfig& cfg) {
  const auto pred = predict_labels(agg, adv);
  std::vector<bool> success(labels.size());
  for (std::size_t r = 0; r < labels.size(); ++r) success[r] = pred[r] != labels[r];
  return attacks::make_result(x, adv, std::move(success), result_norm(cfg));
}

void check_batch(const BinaryAggregate& agg, const ad::Tensor& x, std::span<const std::size_t> labels) {
  if (x.rank() < 2 || x.dim(0) != labels.size()) {
    throw ad::ShapeError("aggregate attack: " + std::to_string(labels.size()) + " labels for input " +
                         ad::shape_str(x.shape()));
  }
  for (auto y : labels) {
    if (y >= agg.num_classes()) throw PreconditionError("aggregate attack: label out of range");
  }
}

// Top-2 arm indices per row, lowest index first on ties.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> top2(const ad::Tensor& z) {
  const std::size_t b = z.dim(0), k = z.dim(1);
  const auto v = z.data();
  std::vector<std::size_t> first(b), second(b);
  for (std::size_t r = 0; r < b; ++r) {
    std::size_t a = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (v[r * k + j] > v[r * k + a]) a = j;
    }
    std::size_t s = a == 0 ? 1 : 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j != a && v[r * k + j] > v[r * k + s]) s = j;
    }
    first[r] = a;
    second[r] = s;
  }
  return {first, second};
}

}  // namespace

// ---- aggregate -------------------------------------------------------------------

void BinaryAggregate::validate() const {
  if (arms.size() < 2) throw PreconditionError("aggregate: need at least two arms");
  if (class_names.size() != arms.size()) throw PreconditionError("aggregate: class name count differs from arm count");
  for (std::size_t i = 0; i < arms.size(); ++i) {
    if (arms[i].spec.output_dim() != 1) throw PreconditionError("aggregate: arm " + std::to_string(i) + " is not single-logit");
    if (arms[i].spec.input_shape != arms[0].spec.input_shape) {
      throw ad::ShapeError("aggregate: arm " + std::to_string(i) + " input " + ad::shape_str(arms[i].spec.input_shape) +
                           " differs from " + ad::shape_str(arms[0].spec.input_shape));
    }
    models::check_parameters(arms[i].spec, arms[i].params);
  }
}

ad::Tensor BinaryAggregate::arm_logits(const ad::Tensor& x) const {
  std::vector<ad::Tensor> cols;
  cols.reserve(arms.size());
  for (const auto& arm : arms) cols.push_back(models::forward(arm.spec, arm.params, x));
  return ad::concat_columns(cols);
}

ad::Tensor BinaryAggregate::arm_binary_logits(std::size_t arm, const ad::Tensor& x) const {
  return ad::lift_binary(models::forward(arms.at(arm).spec, arms.at(arm).params, x));
}

AggregatePrediction predict_aggregate(const BinaryAggregate& agg, const ad::Tensor& x) {
  const ad::Tensor z = agg.arm_logits(x).detach();
  return {models::argmax_rows(z), ad::sigmoid(z)};
}

std::vector<std::size_t> predict_labels(const BinaryAggregate& agg, const ad::Tensor& x) {
  return models::argmax_rows(agg.arm_logits(x).detach());
}

std::vector<std::string> default_class_names(std::size_t k) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < k; ++i) names.push_back("class" + std::to_string(i));
  return names;
}

RobinTraining train_robin(const models::ModelSpec& arm_spec, const data::Dataset& dataset,
                          const training::TrainConfig& config, std::size_t jobs) {
  dataset.validate();
  const std::size_t k = dataset.num_classes;
  if (k < 2) throw PreconditionError("train_robin: need at least two classes");
  if (arm_spec.output_dim() != 1) throw PreconditionError("train_robin: arm architecture must emit a single logit");
  config.validate();

  RobinTraining out;
  out.aggregate.arms.resize(k);
  out.aggregate.class_names = default_class_names(k);
  out.logs.resize(k);
  parallel_for(k, jobs, [&](std::size_t i) {
    training::TrainConfig arm_config = config;
    arm_config.seed = config.seed + i;
    arm_config.balanced = true;
    const data::Dataset task = data::relabel(dataset, data::make_one_vs_all(k, i));
    try {
      auto result = training::train(arm_spec, task, arm_config);
      out.aggregate.arms[i] = models::Model{arm_spec, std::move(result.params)};
      out.logs[i] = std::move(result.log);
    } catch (const training::TrainError& e) {
      throw training::TrainError(e.epoch(), e.batch(), "arm " + std::to_string(i) + ": " + e.what());
    }
  });
  return out;
}

// ---- attacks -------------------------------------------------------------------------

std::string to_string(AggregateAttack attack) {
  switch (attack) {
    case AggregateAttack::BestArm: return "best_arm";
    case AggregateAttack::HighestArm: return "highest_arm";
    case AggregateAttack::Top2: return "top2";
    case AggregateAttack::AvgGradient: return "avg_gradient";
    case AggregateAttack::Softmax: return "softmax";
    case AggregateAttack::SoftmaxTop2: return "softmax_top2";
  }
  return "?";
}

AggregateAttack parse_aggregate_attack(std::string_view text) {
  for (auto a : kAllAggregateAttacks) {
    if (to_string(a) == text) return a;
  }
  throw PreconditionError("unknown aggregate attack '" + std::string(text) +
                          "' (expected best_arm, highest_arm, top2, avg_gradient, softmax or softmax_top2)");
}

attacks::AttackResult attack_best_arm(const BinaryAggregate& agg, const ad::Tensor& x,
                                      std::span<const std::size_t> labels, const RobinAttackConfig& cfg,
                                      std::size_t first_index) {
  check_batch(agg, x, labels);
  const std::size_t b = x.dim(0), d = row_stride(x), k = agg.num_classes();
  const auto rows = iota_rows(b);
  const auto streams = streams_for(rows, first_index);
  std::vector<double> chosen(b * d);
  std::vector<bool> done(b, false);
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<attacks::Goal> goals;
    for (auto y : labels) goals.push_back({y == i ? std::size_t{1} : std::size_t{0}, false});
    const models::LogitFn arm = [&agg, i](const ad::Tensor& xv) { return agg.arm_binary_logits(i, xv); };
    const ad::Tensor cand = base_perturb(arm, x, goals, cfg, cfg.pgd.seed + i, streams);
    const auto pred = predict_labels(agg, cand);
    const auto cv = cand.data();
    for (std::size_t r = 0; r < b; ++r) {
      if (done[r]) continue;
      if (pred[r] != labels[r] || i + 1 == k) {
        std::copy_n(cv.begin() + static_cast<std::ptrdiff_t>(r * d), d, chosen.begin() + static_cast<std::ptrdiff_t>(r * d));
        done[r] = pred[r] != labels[r];
      }
    }
  }
  return judged(agg, x, ad::Tensor(x.shape(), std::move(chosen)), labels, cfg);
}

attacks::AttackResult attack_highest_arm(const BinaryAggregate& agg, const ad::Tensor& x,
                                         std::span<const std::size_t> labels, const RobinAttackConfig& cfg,
                                         std::size_t first_index) {
  check_batch(agg, x, labels);
  const std::size_t b = x.dim(0), d = row_stride(x);
  const auto highest = predict_labels(agg, x);
  std::vector<double> adv(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < agg.num_classes(); ++i) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < b; ++r) {
      if (highest[r] == i) rows.push_back(r);
    }
    if (rows.empty()) continue;
    std::vector<attacks::Goal> goals;
    for (auto r : rows) goals.push_back({labels[r] == i ? std::size_t{1} : std::size_t{0}, false});
    const models::LogitFn arm = [&agg, i](const ad::Tensor& xv) { return agg.arm_binary_logits(i, xv); };
    const ad::Tensor cand = base_perturb(arm, gather_rows(x, rows), goals, cfg, cfg.pgd.seed + i,
                                         streams_for(rows, first_index));
    scatter_rows(adv, d, cand, rows);
  }
  return judged(agg, x, ad::Tensor(x.shape(), std::move(adv)), labels, cfg);
}

attacks::AttackResult attack_top2(const BinaryAggregate& agg, const ad::Tensor& x, std::span<const std::size_t> labels,
                                  const RobinAttackConfig& cfg, std::size_t first_index) {
  check_batch(agg, x, labels);
  if (cfg.base != BaseAttack::Pgd) throw PreconditionError("top2 attack requires the PGD base attack");
  const ad::Tensor adv = attacks::pgd_perturb(
      x,
      [&](const ad::Tensor& xv) {
        const ad::Tensor z = agg.arm_logits(xv);
        const auto [first, second] = top2(z);
        return ad::scale(ad::sum(ad::sub(score_loss(ad::pick(z, first)), score_loss(ad::pick(z, second)))), 0.5);
      },
      cfg.pgd, first_index);
  return judged(agg, x, adv, labels, cfg);
}

attacks::AttackResult attack_avg_gradient(const BinaryAggregate& agg, const ad::Tensor& x,
                                          std::span<const std::size_t> labels, const RobinAttackConfig& cfg,
                                          std::size_t first_index) {
  check_batch(agg, x, labels);
  if (cfg.base != BaseAttack::Pgd) throw PreconditionError("avg_gradient attack requires the PGD base attack");
  const std::size_t b = x.dim(0), k = agg.num_classes();
  std::vector<ad::Tensor> signs;
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<double> s(b);
    for (std::size_t r = 0; r < b; ++r) s[r] = labels[r] == j ? 1.0 : -1.0;
    signs.emplace_back(ad::Shape{b}, std::move(s));
  }
  const ad::Tensor adv = attacks::pgd_perturb(
      x,
      [&](const ad::Tensor& xv) {
        const ad::Tensor z = agg.arm_logits(xv);
        ad::Tensor total;
        for (std::size_t j = 0; j < k; ++j) {
          const std::vector<std::size_t> col(b, j);
          const ad::Tensor term = ad::sum(ad::mul(score_loss(ad::pick(z, col)), signs[j]));
          total = total.defined() ? ad::add(total, term) : term;
        }
        return ad::scale(total, 1.0 / static_cast<double>(k));
      },
      cfg.pgd, first_index);
  return judged(agg, x, adv, labels, cfg);
}

attacks::AttackResult attack_softmax(const BinaryAggregate& agg, const ad::Tensor& x,
                                     std::span<const std::size_t> labels, const RobinAttackConfig& cfg,
                                     std::size_t first_index) {
  check_batch(agg, x, labels);
  const models::LogitFn composite = [&agg](const ad::Tensor& xv) { return agg.arm_logits(xv); };
  const auto goals = attacks::untargeted(labels);
  const ad::Tensor adv =
      base_perturb(composite, x, goals, cfg, cfg.pgd.seed, streams_for(iota_rows(x.dim(0)), first_index));
  return judged(agg, x, adv, labels, cfg);
}

attacks::AttackResult attack_softmax_top2(const BinaryAggregate& agg, const ad::Tensor& x,
                                          std::span<const std::size_t> labels, const RobinAttackConfig& cfg,
                                          std::size_t first_index) {
  check_batch(agg, x, labels);
  const auto [first, second] = top2(agg.arm_logits(x).detach());
  std::vector<attacks::Goal> goals;
  for (std::size_t r = 0; r < labels.size(); ++r) goals.push_back({labels[r] == second[r] ? std::size_t{1} : std::size_t{0}, false});
  const models::LogitFn composite = [&, a = first, s = second](const ad::Tensor& xv) {
    const ad::Tensor z = agg.arm_logits(xv);
    const ad::Tensor cols[] = {ad::pick(z, a), ad::pick(z, s)};
    return ad::concat_columns(cols);
  };
  const ad::Tensor adv =
      base_perturb(composite, x, goals, cfg, cfg.pgd.seed, streams_for(iota_rows(x.dim(0)), first_index));
  return judged(agg, x, adv, labels, cfg);
}

attacks::AttackResult run_aggregate_attack(AggregateAttack kind, const BinaryAggregate& agg, const ad::Tensor& x,
                                           std::span<const std::size_t> labels, const RobinAttackConfig& cfg,
                                           std::size_t first_index) {
  switch (kind) {
    case AggregateAttack::BestArm: return attack_best_arm(agg, x, labels, cfg, first_index);
    case AggregateAttack::HighestArm: return attack_highest_arm(agg, x, labels, cfg, first_index);
    case AggregateAttack::Top2: return attack_top2(agg, x, labels, cfg, first_index);
    case AggregateAttack::AvgGradient: return attack_avg_gradient(agg, x, labels, cfg, first_index);
    case AggregateAttack::Softmax: return attack_softmax(agg, x, labels, cfg, first_index);
    case AggregateAttack::SoftmaxTop2: return attack_softmax_top2(agg, x, labels, cfg, first_index);
  }
  throw PreconditionError("unknown aggregate attack");
}

attacks::AttackResult transfer_attack(const models::LogitFn& surrogate, const BinaryAggregate& agg,
                                      const ad::Tensor& x, std::span<const std::size_t> labels,
                                      const RobinAttackConfig& cfg, TransferMode mode, std::size_t first_index) {
  check_batch(agg, x, labels);
  const std::size_t b = x.dim(0);
  std::vector<attacks::Goal> goals;
  if (mode == TransferMode::Untargeted) {
    goals = attacks::untargeted(labels);
  } else {
    const auto second = top2(agg.arm_logits(x).detach()).second;
    goals = attacks::targeted(second);
  }
  const ad::Tensor adv = base_perturb(surrogate, x, goals, cfg, cfg.pgd.seed, streams_for(iota_rows(b), first_index));
  const auto pred = predict_labels(agg, adv);
  return attacks::make_result(x, adv, attacks::goals_met(pred, goals), result_norm(cfg));
}

// ---- hierarchical ------------------------------------------------------------------------

void Partition::validate() const {
  if (num_blocks == 0 || block_of.empty()) throw PreconditionError("partition: empty");
  std::vector<bool> used(num_blocks, false);
  for (std::size_t c = 0; c < block_of.size(); ++c) {
    if (block_of[c] >= num_blocks) {
      throw PreconditionError("partition: class " + std::to_string(c) + " maps outside [0, " + std::to_string(num_blocks) + ")");
    }
    used[block_of[c]] = true;
  }
  for (std::size_t b = 0; b < num_blocks; ++b) {
    if (!used[b]) throw PreconditionError("partition: block " + std::to_string(b) + " is empty");
  }
}

std::vector<std::size_t> Partition::members(std::size_t block) const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < block_of.size(); ++c) {
    if (block_of[c] == block) out.push_back(c);
  }
  return out;
}

std::vector<std::size_t> HierarchicalClassifier::predict(const ad::Tensor& x) const {
  const std::size_t b = x.dim(0);
  std::vector<std::size_t> block(b, 0);
  if (coarse) block = coarse->predict(x);
  std::vector<std::size_t> out(b);
  for (std::size_t blk = 0; blk < partition.num_blocks; ++blk) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < b; ++r) {
      if (block[r] == blk) rows.push_back(r);
    }
    if (rows.empty()) continue;
    const auto members = partition.members(blk);
    std::vector<std::size_t> within(rows.size(), 0);
    if (fine[blk]) within = fine[blk]->predict(gather_rows(x, rows));
    for (std::size_t i = 0; i < rows.size(); ++i) out[rows[i]] = members[within[i]];
  }
  return out;
}

HierarchicalClassifier train_hierarchical(const models::ModelSpec& trunk, const data::Dataset& dataset,
                                          const Partition& partition, const training::TrainConfig& config,
                                          std::size_t jobs) {
  dataset.validate();
  partition.validate();
  if (partition.block_of.size() != dataset.num_classes) {
    throw PreconditionError("hierarchical: partition covers " + std::to_string(partition.block_of.size()) +
                            " classes, dataset has " + std::to_string(dataset.num_classes));
  }
  HierarchicalClassifier h;
  h.partition = partition;
  h.fine.resize(partition.num_blocks);
  // Task 0 is the coarse model, task 1 + b the fine model of block b.
  parallel_for(partition.num_blocks + 1, jobs, [&](std::size_t task) {
    training::TrainConfig cfg = config;
    if (task == 0) {
      if (partition.num_blocks < 2) return;
      cfg.seed = derive_seed(config.seed, "coarse");
      const data::Dataset coarse = data::relabel(dataset, data::RelabelMap{partition.block_of, partition.num_blocks});
      const auto spec = models::with_outputs(trunk, partition.num_blocks);
      h.coarse = models::Model{spec, training::train(spec, coarse, cfg).params};
      return;
    }
    const std::size_t blk = task - 1;
    const auto members = partition.members(blk);
    if (members.size() < 2) return;
    cfg.seed = derive_seed(derive_seed(config.seed, "fine"), blk);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      if (partition.block_of[dataset.labels[i]] == blk) rows.push_back(i);
    }
    data::RelabelMap within{std::vector<std::size_t>(dataset.num_classes, 0), members.size()};
    for (std::size_t m = 0; m < members.size(); ++m) within.mapping[members[m]] = m;
    const data::Dataset sub = data::relabel(dataset.subset(rows), within);
    const auto spec = models::with_outputs(trunk, members.size());
    h.fine[blk] = models::Model{spec, training::train(spec, sub, cfg).params};
  });
  return h;
}

namespace {

std::vector<double> strategy_one(const HierarchicalClassifier& h, const ad::Tensor& x,
                                 std::span<const std::size_t> labels, const attacks::AttackConfig& cfg,
                                 std::size_t first_index) {
  if (!h.coarse) return {x.data().begin(), x.data().end()};
  std::vector<std::size_t> blocks;
  for (auto y : labels) blocks.push_back(h.partition.block_of.at(y));
  const auto goals = attacks::untargeted(blocks);
  const models::Model& coarse = *h.coarse;
  const ad::Tensor adv = attacks::pgd_perturb(
      x, [&](const ad::Tensor& xv) { return attacks::goal_objective(coarse.logits(xv), goals); }, cfg, first_index);
  return {adv.data().begin(), adv.data().end()};
}

std::vector<double> strategy_two(const HierarchicalClassifier& h, const ad::Tensor& x,
                                 std::span<const std::size_t> labels, const attacks::AttackConfig& cfg,
                                 std::size_t first_index) {
  const std::size_t b = x.dim(0), d = row_stride(x);
  std::vector<double> adv(x.data().begin(), x.data().end());
  for (std::size_t blk = 0; blk < h.partition.num_blocks; ++blk) {
    if (!h.fine[blk]) continue;
    const auto members = h.partition.members(blk);
    std::vector<std::size_t> rows;
    std::vector<attacks::Goal> goals;
    for (std::size_t r = 0; r < b; ++r) {
      if (h.partition.block_of.at(labels[r]) != blk) continue;
      rows.push_back(r);
      const auto pos = static_cast<std::size_t>(std::find(members.begin(), members.end(), labels[r]) - members.begin());
      goals.push_back({pos, false});
    }
    if (rows.empty()) continue;
    const models::Model& fine = *h.fine[blk];
    attacks::PgdSchedule schedule{std::vector<double>(rows.size(), cfg.epsilon),
                                  std::vector<double>(rows.size(), cfg.effective_step_size()),
                                  streams_for(rows, first_index)};
    const ad::Tensor cand = attacks::pgd_perturb(
        gather_rows(x, rows), [&](const ad::Tensor& xv) { return attacks::goal_objective(fine.logits(xv), goals); },
        cfg, schedule);
    scatter_rows(adv, d, cand, rows);
  }
  return adv;
}

}  // namespace

attacks::AttackResult hierarchical_attack(const HierarchicalClassifier& h, const ad::Tensor& x,
                                          std::span<const std::size_t> labels, const attacks::AttackConfig& cfg,
                                          int strategy, std::size_t first_index) {
  if (strategy < 1 || strategy > 3) throw PreconditionError("hierarchical_attack: strategy must be 1, 2 or 3");
  if (x.dim(0) != labels.size()) throw ad::ShapeError("hierarchical_attack: label count does not match batch");
  const std::size_t b = x.dim(0), d = row_stride(x);
  std::vector<double> adv = strategy == 2 ? strategy_two(h, x, labels, cfg, first_index)
                                          : strategy_one(h, x, labels, cfg, first_index);
  auto success_of = [&](const std::vector<double>& values) {
    const auto pred = h.predict(ad::Tensor(x.shape(), values));
    std::vector<bool> s(b);
    for (std::size_t r = 0; r < b; ++r) s[r] = pred[r] != labels[r];
    return s;
  };
  std::vector<bool> success = success_of(adv);
  if (strategy == 3) {
    const auto second = strategy_two(h, x, labels, cfg, first_index);
    for (std::size_t r = 0; r < b; ++r) {
      if (!success[r]) std::copy_n(second.begin() + static_cast<std::ptrdiff_t>(r * d), d, adv.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    success = success_of(adv);
  }
  return attacks::make_result(x, ad::Tensor(x.shape(), std::move(adv)), std::move(success), cfg.norm);
}

// ---- robust accuracy ------------------------------------------------------------------

RobustReport summarize(std::vector<bool> clean_correct, std::span<const AttackOutcome> outcomes) {
  if (outcomes.empty()) throw PreconditionError("robust accuracy: attack list is empty");
  RobustReport rep;
  rep.examples = clean_correct.size();
  if (rep.examples == 0) throw PreconditionError("robust accuracy: no examples");
  const auto n = static_cast<double>(rep.examples);
  rep.clean_accuracy = static_cast<double>(std::count(clean_correct.begin(), clean_correct.end(), true)) / n;
  rep.robust = clean_correct;
  for (const auto& o : outcomes) {
    if (std::find(rep.names.begin(), rep.names.end(), o.name) != rep.names.end()) continue;
    if (o.success.size() != rep.examples) throw PreconditionError("robust accuracy: outcome size mismatch for " + o.name);
    rep.names.push_back(o.name);
    rep.success.push_back(o.success);
    std::size_t survived = 0;
    for (std::size_t i = 0; i < rep.examples; ++i) {
      const bool robust = clean_correct[i] && !o.success[i];
      survived += robust ? 1 : 0;
      rep.robust[i] = rep.robust[i] && robust;
    }
    rep.accuracy.push_back(static_cast<double>(survived) / n);
  }
  rep.strongest_of = static_cast<double>(std::count(rep.robust.begin(), rep.robust.end(), true)) / n;
  const std::size_t m = rep.names.size();
  rep.overlap.assign(m, std::vector<std::size_t>(m, 0));
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t c = 0; c < m; ++c) {
      for (std::size_t i = 0; i < rep.examples; ++i) {
        rep.overlap[a][c] += clean_correct[i] && rep.success[a][i] && rep.success[c][i] ? 1 : 0;
      }
    }
  }
  rep.clean_correct = std::move(clean_correct);
  return rep;
}

attacks::AttackResult attack_dataset(
    const data::Dataset& dataset,
    const std::function<attacks::AttackResult(std::size_t, const ad::Tensor&, std::span<const std::size_t>)>& fn,
    std::size_t jobs, std::size_t chunk) {
  if (chunk == 0) throw PreconditionError("attack_dataset: chunk must be positive");
  const std::size_t n = dataset.size();
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::vector<attacks::AttackResult> parts(chunks);
  parallel_for(chunks, jobs, [&](std::size_t c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = c * chunk; i < std::min(n, (c + 1) * chunk); ++i) idx.push_back(i);
    const auto labels = dataset.gather_labels(idx);
    parts[c] = fn(c * chunk, dataset.gather_inputs(idx), labels);
  });
  std::vector<double> adv;
  attacks::AttackResult out;
  for (auto& p : parts) {
    adv.insert(adv.end(), p.adversarial.data().begin(), p.adversarial.data().end());
    out.success.insert(out.success.end(), p.success.begin(), p.success.end());
    out.perturbation_norm.insert(out.perturbation_norm.end(), p.perturbation_norm.begin(), p.perturbation_norm.end());
  }
  out.adversarial = ad::Tensor(dataset.inputs.shape(), std::move(adv));
  return out;
}

namespace {

std::vector<bool> clean_correct_of(const data::Dataset& dataset, const std::function<std::vector<std::size_t>(const ad::Tensor&)>& predict) {
  std::vector<bool> out(dataset.size());
  constexpr std::size_t chunk = 1024;
  for (std::size_t start = 0; start < dataset.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(dataset.size(), start + chunk); ++i) idx.push_back(i);
    const auto pred = predict(dataset.gather_inputs(idx));
    for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] = pred[i] == dataset.labels[idx[i]];
  }
  return out;
}

}  // namespace

RobustReport robust_accuracy(const BinaryAggregate& agg, const data::Dataset& dataset,
                             std::span<const AggregateAttack> attack_list, const RobinAttackConfig& cfg,
                             std::size_t jobs, std::size_t chunk) {
  if (attack_list.empty()) throw PreconditionError("robust accuracy: attack list is empty");
  std::vector<AttackOutcome> outcomes;
  std::set<AggregateAttack> seen;
  for (auto kind : attack_list) {
    if (!seen.insert(kind).second) continue;
    const auto res = attack_dataset(
        dataset,
        [&](std::size_t first, const ad::Tensor& x, std::span<const std::size_t> y) {
          return run_aggregate_attack(kind, agg, x, y, cfg, first);
        },
        jobs, chunk);
    outcomes.push_back({to_string(kind), res.success});
  }
  return summarize(clean_correct_of(dataset, [&](const ad::Tensor& x) { return predict_labels(agg, x); }), outcomes);
}

std::string to_string(ModelAttack attack) { return attack == ModelAttack::Pgd ? "pgd" : "cw"; }

ModelAttack parse_model_attack(std::string_view text) {
  if (text == "pgd") return ModelAttack::Pgd;
  if (text == "cw") return ModelAttack::Cw;
  throw PreconditionError("unknown attack '" + std::string(text) + "' (expected pgd or cw)");
}

RobustReport robust_accuracy(const models::Model& model, const data::Dataset& dataset,
                             std::span<const ModelAttack> attack_list, const RobinAttackConfig& cfg,
                             std::size_t jobs, std::size_t chunk) {
  if (attack_list.empty()) throw PreconditionError("robust accuracy: attack list is empty");
  const models::LogitFn fn = models::logit_fn(model);
  std::vector<AttackOutcome> outcomes;
  std::set<ModelAttack> seen;
  for (auto kind : attack_list) {
    if (!seen.insert(kind).second) continue;
    const auto res = attack_dataset(
        dataset,
        [&](std::size_t first, const ad::Tensor& x, std::span<const std::size_t> y) {
          return kind == ModelAttack::Pgd ? attacks::pgd_attack(fn, x, y, cfg.pgd, first)
                                          : attacks::cw_attack_l2(fn, x, y, cfg.cw);
        },
        jobs, chunk);
    outcomes.push_back({to_string(kind), res.success});
  }
  return summarize(clean_correct_of(dataset, [&](const ad::Tensor& x) { return model.predict(x); }), outcomes);
}

// ---- checkpoint -----------------------------------------------------------------------

void save_aggregate(const std::filesystem::path& dir, const BinaryAggregate& agg, std::string_view config_hash,
                    bool overwrite) {
  agg.validate();
  for (const auto& name : agg.class_names) {
    if (name.empty() || name.find_first_of(",\n\r") != std::string::npos) {
      throw PreconditionError("aggregate: class name '" + name + "' is empty or contains a comma or newline");
    }
  }
  std::vector<std::filesystem::path> files;
  for (std::size_t i = 0; i < agg.num_classes(); ++i) files.push_back(dir / ("arm_" + std::to_string(i) + ".rbn"));
  const auto manifest_path = dir / "manifest.txt";
  if (!overwrite) {
    for (const auto& f : files) {
      if (std::filesystem::exists(f)) throw PreconditionError("refusing to overwrite " + f.string() + " (pass --overwrite)");
    }
    if (std::filesystem::exists(manifest_path)) {
      throw PreconditionError("refusing to overwrite " + manifest_path.string() + " (pass --overwrite)");
    }
  }
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "kind=robin\nk=" << agg.num_classes() << "\nclasses=";
  for (std::size_t i = 0; i < agg.class_names.size(); ++i) manifest << (i ? "," : "") << agg.class_names[i];
  manifest << "\narch=" << agg.arms[0].spec.describe() << "\narms=";
  for (std::size_t i = 0; i < files.size(); ++i) manifest << (i ? "," : "") << files[i].filename().string();
  manifest << "\nconfig_hash=" << config_hash << "\n";
  for (std::size_t i = 0; i < files.size(); ++i) models::write_checkpoint(files[i], agg.arms[i].params);
  std::ofstream out(manifest_path, std::ios::binary);
  out << manifest.str();
  if (!out) throw PreconditionError("cannot write " + manifest_path.string());
}

namespace {

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) out.push_back(item);
  return out;
}

}  // namespace

BinaryAggregate load_aggregate(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.txt";
  std::ifstream in(manifest_path);
  if (!in) throw PreconditionError("no aggregate manifest at " + manifest_path.string() + " (run robin-train first)");
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw PreconditionError("aggregate manifest: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  for (const char* key : {"kind", "k", "classes", "arch", "arms"}) {
    if (!kv.count(key)) throw PreconditionError(std::string("aggregate manifest: missing key '") + key + "'");
  }
  if (kv["kind"] != "robin") throw PreconditionError("aggregate manifest: kind is '" + kv["kind"] + "', expected robin");
  const auto spec = models::ModelSpec::parse(kv["arch"]);
  const auto arms = split_commas(kv["arms"]);
  BinaryAggregate agg;
  agg.class_names = split_commas(kv["classes"]);
  const std::size_t k = std::stoul(kv["k"]);
  if (arms.size() != k || agg.class_names.size() != k) {
    throw PreconditionError("aggregate manifest: k=" + kv["k"] + " but " + std::to_string(arms.size()) + " arms listed");
  }
  for (const auto& file : arms) {
    auto params = models::read_checkpoint(dir / file);
    models::check_parameters(spec, params);
    agg.arms.push_back(models::Model{spec, std::move(params)});
  }
  agg.validate();
  return agg;
}

}  // namespace simplerob::robin
