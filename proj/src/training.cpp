#include "simplerob/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>

#include "simplerob/common.hpp"

namespace simplerob::training {

std::string to_string(Defense defense) {
  switch (defense) {
    case Defense::Standard: return "standard";
    case Defense::AdvTrain: return "adv";
    case Defense::Trades: return "trades";
    case Defense::Mart: return "mart";
  }
  return "?";
}

Defense parse_defense(std::string_view text) {
  if (text == "standard") return Defense::Standard;
  if (text == "adv" || text == "advtrain") return Defense::AdvTrain;
  if (text == "trades") return Defense::Trades;
  if (text == "mart") return Defense::Mart;
  throw PreconditionError("unknown defense '" + std::string(text) + "' (expected standard, adv, trades or mart)");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw PreconditionError("train: batch_size must be positive");
  if (!(learning_rate > 0.0)) throw PreconditionError("train: learning_rate must be > 0");
  if (!(decay_factor > 0.0)) throw PreconditionError("train: decay_factor must be > 0");
  if (!(weight_decay >= 0.0)) throw PreconditionError("train: weight_decay must be >= 0");
  if (!(lambda >= 0.0)) throw PreconditionError("train: lambda must be >= 0");
  if (balanced && batch_size % 2 != 0) throw PreconditionError("train: balanced batches need an even batch_size");
  attack.validate();
}

double TrainConfig::learning_rate_at(std::size_t epoch) const {
  double lr = learning_rate;
  if (decay_epochs.empty()) {
    if (epochs >= 2 && epoch >= epochs / 2) lr *= decay_factor;
    return lr;
  }
  for (auto e : decay_epochs) {
    if (epoch >= e) lr *= decay_factor;
  }
  return lr;
}

double TrainConfig::adversarial_share(std::size_t epoch) const {
  switch (defense) {
    case Defense::Standard: return 0.0;
    case Defense::AdvTrain: return warmup_fraction(static_cast<double>(epoch + 1), static_cast<double>(epochs));
    case Defense::Trades:
    case Defense::Mart:
      return warmup_surrogates ? warmup_fraction(static_cast<double>(epoch + 1), static_cast<double>(epochs)) : 1.0;
  }
  return 0.0;
}

double warmup_fraction(double t, double total) {
  if (!(total > 0.0)) throw PreconditionError("warmup_fraction: T must be > 0");
  if (!(t >= 0.0) || t > total) throw PreconditionError("warmup_fraction: need 0 <= t <= T");
  return 1.0 - 0.5 * (1.0 + std::cos(std::numbers::pi * t / total));
}

ad::Tensor class_logits(const models::ModelSpec& spec, const models::Parameters& params, const ad::Tensor& x) {
  ad::Tensor z = models::forward(spec, params, x);
  return z.dim(1) == 1 ? ad::lift_binary(z) : z;
}

ad::Tensor trades_rows(const ad::Tensor& clean_logits, const ad::Tensor& adv_logits, std::span<const std::size_t> labels,
                       double lambda) {
  ad::Tensor ce = ad::cross_entropy_rows(clean_logits, labels);
  if (lambda == 0.0) return ce;
  return ad::add(ce, ad::scale(ad::kl_rows(clean_logits, adv_logits), lambda));
}

ad::Tensor mart_rows(const ad::Tensor& clean_logits, const ad::Tensor& adv_logits, std::span<const std::size_t> labels,
                     double lambda) {
  ad::Tensor bce = ad::add(ad::cross_entropy_rows(adv_logits, labels), ad::runner_up_nll_rows(adv_logits, labels));
  if (lambda == 0.0) return bce;
  const ad::Tensor confidence = ad::pick(ad::softmax(clean_logits), labels);
  const ad::Tensor weight = ad::add_scalar(ad::scale(confidence, -1.0), 1.0);
  return ad::add(bce, ad::scale(ad::mul(ad::kl_rows(clean_logits, adv_logits), weight), lambda));
}

ad::Tensor trades_adversary(const models::ModelSpec& spec, const models::Parameters& params, const ad::Tensor& x,
                            const attacks::AttackConfig& attack, std::size_t first_index) {
  const ad::Tensor clean = class_logits(spec, params, x).detach();
  attacks::AttackConfig cfg = attack;
  cfg.random_init = true;  // KL has zero gradient at x′ = x
  return attacks::pgd_perturb(
      x, [&](const ad::Tensor& xv) { return ad::sum(ad::kl_rows(clean, class_logits(spec, params, xv))); }, cfg,
      first_index);
}

ad::Tensor mart_adversary(const models::ModelSpec& spec, const models::Parameters& params, const ad::Tensor& x,
                          std::span<const std::size_t> labels, const attacks::AttackConfig& attack,
                          std::size_t first_index) {
  const auto goals = attacks::untargeted(labels);
  return attacks::pgd_perturb(
      x, [&](const ad::Tensor& xv) { return attacks::goal_objective(class_logits(spec, params, xv), goals); }, attack,
      first_index);
}

namespace {

models::Parameters detached(const models::Parameters& params) {
  models::Parameters out;
  for (const auto& [name, p] : params) out.emplace(name, p.detach());
  return out;
}

}  // namespace

ad::Tensor trades_loss(const models::ModelSpec& spec, const models::Parameters& params, const ad::Tensor& x,
                       std::span<const std::size_t> labels, double lambda, const attacks::AttackConfig& attack) {
  if (lambda < 0.0) throw PreconditionError("trades_loss: lambda must be >= 0");
  const ad::Tensor adv = trades_adversary(spec, detached(params), x, attack);
  return ad::mean(trades_rows(class_logits(spec, params, x), class_logits(spec, params, adv), labels, lambda));
}

ad::Tensor mart_loss(const models::ModelSpec& spec, const models::Parameters& params, const ad::Tensor& x,
                     std::span<const std::size_t> labels, double lambda, const attacks::AttackConfig& attack) {
  if (lambda < 0.0) throw PreconditionError("mart_loss: lambda must be >= 0");
  const ad::Tensor adv = mart_adversary(spec, detached(params), x, labels, attack);
  return ad::mean(mart_rows(class_logits(spec, params, x), class_logits(spec, params, adv), labels, lambda));
}

models::Parameters sgd_step(const models::Parameters& params, const models::Parameters& grads, double lr,
                            double weight_decay) {
  models::Parameters out;
  for (const auto& [name, p] : params) {
    const auto it = grads.find(name);
    const auto pv = p.data();
    std::vector<double> next(pv.begin(), pv.end());
    if (it != grads.end()) {
      const auto g = it->second.data();
      if (g.size() != next.size()) throw ad::ShapeError("sgd_step: gradient shape mismatch for " + name);
      for (std::size_t i = 0; i < next.size(); ++i) next[i] -= lr * (g[i] + weight_decay * pv[i]);
    } else {
      for (std::size_t i = 0; i < next.size(); ++i) next[i] -= lr * weight_decay * pv[i];
    }
    out.emplace(name, ad::Tensor(p.shape(), std::move(next)));
  }
  return out;
}

namespace {

ad::Tensor concat_rows(const ad::Tensor& head, const ad::Tensor& tail) {
  ad::Shape shape = head.shape();
  shape[0] += tail.dim(0);
  std::vector<double> values(head.data().begin(), head.data().end());
  values.insert(values.end(), tail.data().begin(), tail.data().end());
  return ad::Tensor(std::move(shape), std::move(values));
}

struct Split {
  ad::Tensor head;
  ad::Tensor tail;
  std::vector<std::size_t> head_labels;
  std::vector<std::size_t> tail_labels;
};

Split split_batch(const data::Dataset& dataset, std::span<const std::size_t> batch, std::size_t m) {
  const auto head_idx = batch.first(m);
  const auto tail_idx = batch.subspan(m);
  Split s;
  if (!head_idx.empty()) s.head = dataset.gather_inputs(head_idx);
  if (!tail_idx.empty()) s.tail = dataset.gather_inputs(tail_idx);
  s.head_labels = dataset.gather_labels(head_idx);
  s.tail_labels = dataset.gather_labels(tail_idx);
  return s;
}

void evaluate(const models::ModelSpec& spec, const models::Parameters& params, const data::Dataset& dataset,
              EpochLog& entry) {
  constexpr std::size_t chunk = 1024;
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < dataset.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(dataset.size(), start + chunk); ++i) idx.push_back(i);
    const auto labels = dataset.gather_labels(idx);
    const ad::Tensor z = class_logits(spec, params, dataset.gather_inputs(idx));
    loss += ad::sum(ad::cross_entropy_rows(z, labels)).item();
    const auto pred = models::argmax_rows(z);
    for (std::size_t r = 0; r < labels.size(); ++r) correct += pred[r] == labels[r] ? 1 : 0;
  }
  entry.clean_loss = loss / static_cast<double>(dataset.size());
  entry.train_acc = static_cast<double>(correct) / static_cast<double>(dataset.size());
}

// Loss of one batch with tape-attached parameters.
ad::Tensor batch_loss(const models::ModelSpec& spec, const models::Parameters& live, const models::Parameters& frozen,
                      const data::Dataset& dataset, std::span<const std::size_t> batch, const TrainConfig& config,
                      double share, const attacks::AttackConfig& attack) {
  const std::size_t b = batch.size();
  const auto m = static_cast<std::size_t>(std::llround(share * static_cast<double>(b)));
  if (config.defense == Defense::Standard || m == 0) {
    return ad::softmax_cross_entropy(class_logits(spec, live, dataset.gather_inputs(batch)),
                                     dataset.gather_labels(batch));
  }
  Split s = split_batch(dataset, batch, m);
  if (config.defense == Defense::AdvTrain) {
    const auto goals = attacks::untargeted(s.head_labels);
    const models::Model current{spec, frozen};
    const ad::Tensor adv = attacks::pgd_perturb(
        s.head, [&](const ad::Tensor& xv) { return attacks::goal_objective(current.logits(xv), goals); }, attack);
    const ad::Tensor mixed = m == b ? adv : concat_rows(adv, s.tail);
    return ad::softmax_cross_entropy(class_logits(spec, live, mixed), dataset.gather_labels(batch));
  }
  ad::Tensor rows;
  if (config.defense == Defense::Trades) {
    const ad::Tensor adv = trades_adversary(spec, frozen, s.head, attack);
    rows = trades_rows(class_logits(spec, live, s.head), class_logits(spec, live, adv), s.head_labels, config.lambda);
  } else {
    const ad::Tensor adv = mart_adversary(spec, frozen, s.head, s.head_labels, attack);
    rows = mart_rows(class_logits(spec, live, s.head), class_logits(spec, live, adv), s.head_labels, config.lambda);
  }
  ad::Tensor total = ad::sum(rows);
  if (m < b) {
    total = ad::add(total, ad::sum(ad::cross_entropy_rows(class_logits(spec, live, s.tail), s.tail_labels)));
  }
  return ad::scale(total, 1.0 / static_cast<double>(b));
}

}  // namespace

TrainResult train_from(const models::ModelSpec& spec, models::Parameters init, const data::Dataset& dataset,
                       const TrainConfig& config) {
  config.validate();
  spec.validate();
  dataset.validate();
  models::check_parameters(spec, init);
  const std::size_t k = spec.output_dim() == 1 ? 2 : spec.output_dim();
  if (dataset.num_classes > k) {
    throw PreconditionError("train: dataset has " + std::to_string(dataset.num_classes) + " classes but the model emits " +
                            std::to_string(k));
  }

  TrainResult result{std::move(init), {}};
  const std::uint64_t batch_seed = derive_seed(config.seed, "batches");
  const std::uint64_t attack_seed = derive_seed(derive_seed(config.seed, "inner-attack"), config.attack.seed);
  std::optional<data::BalancedBatches> balanced;
  if (config.balanced) balanced.emplace(dataset.labels, config.batch_size, batch_seed);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.learning_rate_at(epoch);
    const double share = config.adversarial_share(epoch);
    const auto batches =
        balanced ? balanced->epoch(epoch) : data::shuffled_batches(dataset.size(), config.batch_size, derive_seed(batch_seed, epoch));
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      attacks::AttackConfig attack = config.attack;
      attack.seed = derive_seed(derive_seed(attack_seed, epoch), bi);
      try {
        ad::Tape tape;
        models::Parameters live;
        for (const auto& [name, p] : result.params) live.emplace(name, tape.variable(p));
        const ad::Tensor loss = batch_loss(spec, live, result.params, dataset, batches[bi], config, share, attack);
        tape.backward(loss);
        models::Parameters grads;
        for (const auto& [name, p] : live) {
          if (p.has_grad()) grads.emplace(name, ad::Tensor(p.shape(), std::vector<double>(p.grad().begin(), p.grad().end())));
        }
        result.params = sgd_step(result.params, grads, lr, config.weight_decay);
      } catch (const attacks::AttackError& e) {
        throw TrainError(epoch, bi, "training: epoch " + std::to_string(epoch) + " batch " + std::to_string(bi) + ": " +
                                        e.what());
      } catch (const ad::NumericError& e) {
        throw TrainError(epoch, bi, "training: epoch " + std::to_string(epoch) + " batch " + std::to_string(bi) + ": " +
                                        e.what());
      }
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.adv_fraction = share;
    evaluate(spec, result.params, dataset, entry);
    result.log.push_back(entry);
  }
  return result;
}

TrainResult train(const models::ModelSpec& spec, const data::Dataset& dataset, const TrainConfig& config) {
  return train_from(spec, models::init_model(spec, derive_seed(config.seed, "init")), dataset, config);
}

models::Parameters standard_train(const models::ModelSpec& spec, const data::Dataset& dataset,
                                  const TrainConfig& config) {
  if (config.defense != Defense::Standard) throw PreconditionError("standard_train: defense must be standard");
  return train(spec, dataset, config).params;
}

models::Parameters adversarial_train(const models::ModelSpec& spec, const data::Dataset& dataset,
                                     const TrainConfig& config) {
  if (config.defense != Defense::AdvTrain) throw PreconditionError("adversarial_train: defense must be adv");
  return train(spec, dataset, config).params;
}

void write_log_csv(std::ostream& out, std::span<const EpochLog> log) {
  out << "epoch,clean_loss,adv_fraction,train_acc\n";
  out << std::setprecision(12);
  for (const auto& e : log) out << e.epoch << ',' << e.clean_loss << ',' << e.adv_fraction << ',' << e.train_acc << '\n';
}

}  // namespace simplerob::training
