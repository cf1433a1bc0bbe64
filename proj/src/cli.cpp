#include "simplerob/cli.hpp"

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>

#include "simplerob/analysis.hpp"
#include "simplerob/attacks.hpp"
#include "simplerob/common.hpp"
#include "simplerob/data.hpp"
#include "simplerob/models.hpp"
#include "simplerob/robin.hpp"
#include "simplerob/training.hpp"

#ifndef SIMPLEROB_VERSION
#define SIMPLEROB_VERSION "unknown"
#endif

namespace simplerob::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string version() { return SIMPLEROB_VERSION; }

// ---- configuration schema ------------------------------------------------------------

namespace {

struct KeySpec {
  const char* key;
  const char* fallback;
  bool is_path = false;
};

const std::vector<std::pair<std::string, std::vector<KeySpec>>>& schema() {
  static const std::vector<std::pair<std::string, std::vector<KeySpec>>> s = {
      {"run", {{"seed", "0"}, {"out", "", true}}},
      {"data",
       {{"source", "gaussians"},
        {"classes", "3"},
        {"train_per_class", "150"},
        {"test_per_class", "100"},
        {"spread", "0.25"},
        {"train_images", "", true},
        {"train_labels", "", true},
        {"test_images", "", true},
        {"test_labels", "", true},
        {"downsample", "true"},
        {"max_train", "0"},
        {"max_test", "0"},
        {"train_csv", "", true},
        {"test_csv", "", true}}},
      {"model", {{"arch", "mlp"}, {"hidden", "64,64"}, {"spec", ""}}},
      {"train",
       {{"epochs", "30"},
        {"batch_size", "128"},
        {"learning_rate", "0.1"},
        {"decay_epochs", ""},
        {"decay_factor", "0.1"},
        {"weight_decay", "5e-4"},
        {"defense", "adv"},
        {"lambda", "1"},
        {"warmup_surrogates", "false"},
        {"norm", "l2"},
        {"epsilon", "0.25"},
        {"steps", "10"},
        {"step_size", "0"},
        {"random_init", "true"}}},
      {"attack",
       {{"checkpoint", "", true},
        {"attacks", "auto"},
        {"base", "pgd"},
        {"norm", "l2"},
        {"epsilon", "0.25"},
        {"steps", "10"},
        {"step_size", "0"},
        {"random_init", "true"},
        {"input_box", "auto"},
        {"chunk", "64"},
        {"cw_search_steps", "9"},
        {"cw_c_lo", "1e-3"},
        {"cw_c_hi", "100"},
        {"cw_iterations", "200"},
        {"cw_learn_rate", "0.01"},
        {"cw_kappa", "0"},
        {"cw_epsilon", "inf"}}},
      {"analysis",
       {{"aggregate", "", true},
        {"model", "", true},
        {"surrogate", "", true},
        {"permutations", "20"},
        {"eps_grid", "0.5,1,1.5,2"},
        {"eps_eval", "2"},
        {"eps_max", "1.5"},
        {"tolerance", "1e-3"},
        {"boundary_steps", "20"},
        {"boundary_task", "untargeted"},
        {"bins", "30"},
        {"ensemble_size", "5"},
        {"transfer_mode", "both"},
        {"partition", "halves"},
        {"strategies", "1,2,3"}}},
  };
  return s;
}

const KeySpec* find_key(const std::string& section, const std::string& key) {
  for (const auto& [name, keys] : schema()) {
    if (name != section) continue;
    for (const auto& k : keys) {
      if (key == k.key) return &k;
    }
  }
  return nullptr;
}

bool known_section(const std::string& section) {
  return std::any_of(schema().begin(), schema().end(), [&](const auto& s) { return s.first == section; });
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string dotted(const std::string& section, const std::string& key) { return section + "." + key; }

}  // namespace

Config Config::defaults() {
  Config c;
  for (const auto& [section, keys] : schema()) {
    for (const auto& k : keys) c.values_[section][k.key] = k.fallback;
  }
  return c;
}

Config Config::parse(std::istream& in, const fs::path& base_dir) {
  const std::string text{std::istreambuf_iterator<char>(in), {}};
  // The INI reader silently drops empty sections, so headers are checked here.
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    line = trim(line);
    if (line.size() < 2 || line.front() != '[' || line.back() != ']') continue;
    const std::string section = trim(line.substr(1, line.size() - 2));
    if (!known_section(section)) throw ConfigError(section, "config: unknown section [" + section + "]");
  }
  boost::property_tree::ptree tree;
  try {
    std::istringstream body(text);
    boost::property_tree::ini_parser::read_ini(body, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("", std::string("config: ") + e.what());
  }
  Config c = defaults();
  c.base_dir_ = base_dir;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError(section, "config: key '" + section + "' must be inside a [section]");
    if (!known_section(section)) throw ConfigError(section, "config: unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      if (!find_key(section, key)) {
        throw ConfigError(dotted(section, key), "config: unknown key '" + key + "' in [" + section + "]");
      }
      c.set(section, key, value.get_value<std::string>());
    }
  }
  return c;
}

Config Config::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "config: cannot open " + path.string());
  return parse(in, fs::absolute(path).parent_path());
}

void Config::set(const std::string& section, const std::string& key, const std::string& value) {
  const KeySpec* spec = find_key(section, key);
  if (!spec) throw ConfigError(dotted(section, key), "config: unknown key '" + key + "' in [" + section + "]");
  std::string v = trim(value);
  if (spec->is_path && !v.empty()) {
    fs::path p(v);
    if (p.is_relative()) p = (base_dir_.empty() ? fs::current_path() : base_dir_) / p;
    v = p.lexically_normal().string();
  }
  values_[section][key] = v;
}

std::string Config::str(const std::string& section, const std::string& key) const {
  const auto s = values_.find(section);
  if (s == values_.end() || !s->second.count(key)) throw ConfigError(dotted(section, key), "config: no key " + dotted(section, key));
  return s->second.at(key);
}

double Config::num(const std::string& section, const std::string& key) const {
  const std::string v = str(section, key);
  if (v == "inf") return std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size() && !std::isnan(d)) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError(dotted(section, key), "config: [" + section + "] " + key + ": expected a number, got '" + v + "'");
}

std::uint64_t Config::u64(const std::string& section, const std::string& key) const {
  const std::string v = str(section, key);
  if (!v.empty() && std::all_of(v.begin(), v.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
    try {
      return std::stoull(v);
    } catch (const std::exception&) {
    }
  }
  throw ConfigError(dotted(section, key),
                    "config: [" + section + "] " + key + ": expected a non-negative integer, got '" + v + "'");
}

std::size_t Config::count(const std::string& section, const std::string& key) const {
  return static_cast<std::size_t>(u64(section, key));
}

bool Config::flag(const std::string& section, const std::string& key) const {
  const std::string v = str(section, key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(dotted(section, key), "config: [" + section + "] " + key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> Config::list(const std::string& section, const std::string& key) const {
  std::vector<std::string> out;
  std::istringstream in(str(section, key));
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> Config::nums(const std::string& section, const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : list(section, key)) {
    try {
      std::size_t used = 0;
      const double d = std::stod(item, &used);
      if (used == item.size()) {
        out.push_back(d);
        continue;
      }
    } catch (const std::exception&) {
    }
    throw ConfigError(dotted(section, key), "config: [" + section + "] " + key + ": bad number '" + item + "'");
  }
  return out;
}

std::optional<fs::path> Config::path(const std::string& section, const std::string& key) const {
  const std::string v = str(section, key);
  if (v.empty()) return std::nullopt;
  return fs::path(v);
}

std::string Config::canonical() const {
  std::string s;
  for (const auto& [section, keys] : values_) {
    for (const auto& [key, value] : keys) {
      if (section == "run" && key == "out") continue;
      s += section + "." + key + "=" + value + "\n";
    }
  }
  return s;
}

std::string Config::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canonical())));
  return buf;
}

// ---- helpers ----------------------------------------------------------------------------

namespace {

json config_json(const Config& cfg) {
  json j = json::object();
  for (const auto& [section, keys] : cfg.values()) {
    for (const auto& [key, value] : keys) {
      if (section == "run" && key == "out") continue;
      j[section][key] = value;
    }
  }
  return j;
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Output directory that refuses to clobber existing files.
class OutputDir {
 public:
  OutputDir(fs::path dir, bool overwrite) : dir_(std::move(dir)), overwrite_(overwrite) {}

  const fs::path& dir() const { return dir_; }

  // Fails before any work is done when a planned output already exists.
  void reserve(const std::vector<std::string>& names) const {
    if (overwrite_) return;
    for (const auto& n : names) {
      if (fs::exists(dir_ / n)) {
        throw ConfigError("run.out", "output " + (dir_ / n).string() + " already exists (pass --overwrite to replace it)");
      }
    }
  }

  void write(const std::string& name, const std::string& content) const {
    fs::create_directories(dir_);
    const fs::path p = dir_ / name;
    if (!overwrite_ && fs::exists(p)) {
      throw ConfigError("run.out", "output " + p.string() + " already exists (pass --overwrite to replace it)");
    }
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << content;
    if (!out) throw std::runtime_error("cannot write " + p.string());
  }

  bool overwrite() const { return overwrite_; }

 private:
  fs::path dir_;
  bool overwrite_;
};

struct Context {
  const Config& cfg;
  std::uint64_t seed;
  std::size_t jobs;
  OutputDir out;
  std::ostream& log;
};

json provenance(const Context& ctx, const std::string& command) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["tool"] = "simplerob";
  j["version"] = version();
  j["command"] = command;
  j["seed"] = ctx.seed;
  j["config_hash"] = ctx.cfg.hash();
  j["config"] = config_json(ctx.cfg);
  return j;
}

fs::path require_file(const Config& cfg, const std::string& section, const std::string& key) {
  const auto p = cfg.path(section, key);
  if (!p) throw ConfigError(dotted(section, key), "config: [" + section + "] " + key + " is required");
  if (!fs::exists(*p)) {
    throw ConfigError(dotted(section, key), "config: [" + section + "] " + key + ": " + p->string() + " does not exist");
  }
  return *p;
}

// ---- data ----------------------------------------------------------------------------------

struct Splits {
  data::Dataset train;
  data::Dataset test;
};

data::Dataset head(const data::Dataset& d, std::size_t n) {
  if (n == 0 || n >= d.size()) return d;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  data::Dataset out = d.subset(idx);
  out.num_classes = d.num_classes;
  return out;
}

void check_data_paths(const Config& cfg) {
  const std::string source = cfg.str("data", "source");
  if (source == "gaussians") return;
  if (source == "idx") {
    for (const char* key : {"train_images", "train_labels", "test_images", "test_labels"}) require_file(cfg, "data", key);
    return;
  }
  if (source == "csv") {
    for (const char* key : {"train_csv", "test_csv"}) require_file(cfg, "data", key);
    return;
  }
  throw ConfigError("data.source", "config: [data] source: expected gaussians, idx or csv, got '" + source + "'");
}

Splits load_data(const Config& cfg, std::uint64_t seed) {
  const std::string source = cfg.str("data", "source");
  Splits s;
  if (source == "gaussians") {
    const std::size_t k = cfg.count("data", "classes");
    if (k < 2) throw ConfigError("data.classes", "config: [data] classes must be >= 2");
    const double spread = cfg.num("data", "spread");
    if (spread < 0.0) throw ConfigError("data.spread", "config: [data] spread must be >= 0");
    s.train = data::gen_gaussians(k, cfg.count("data", "train_per_class"), spread, derive_seed(seed, "data:train"));
    s.test = data::gen_gaussians(k, cfg.count("data", "test_per_class"), spread, derive_seed(seed, "data:test"));
  } else if (source == "idx") {
    const bool down = cfg.flag("data", "downsample");
    s.train = data::load_idx(require_file(cfg, "data", "train_images"), require_file(cfg, "data", "train_labels"), down);
    s.test = data::load_idx(require_file(cfg, "data", "test_images"), require_file(cfg, "data", "test_labels"), down);
    const std::size_t k = std::max(s.train.num_classes, s.test.num_classes);
    s.train.num_classes = s.test.num_classes = k;
    s.train = head(s.train, cfg.count("data", "max_train"));
    s.test = head(s.test, cfg.count("data", "max_test"));
  } else if (source == "csv") {
    std::ifstream tr(require_file(cfg, "data", "train_csv")), te(require_file(cfg, "data", "test_csv"));
    s.train = data::read_csv(tr, "train");
    s.test = data::read_csv(te, "test");
    const std::size_t k = std::max(s.train.num_classes, s.test.num_classes);
    s.train.num_classes = s.test.num_classes = k;
  } else {
    check_data_paths(cfg);
  }
  s.train.validate();
  s.test.validate();
  return s;
}

bool image_data(const Config& cfg) { return cfg.str("data", "source") == "idx"; }

// ---- model / train / attack settings ------------------------------------------------------

models::ModelSpec build_spec(const Config& cfg, const ad::Shape& example_shape, std::size_t outputs) {
  const std::string explicit_spec = cfg.str("model", "spec");
  models::ModelSpec spec;
  if (!explicit_spec.empty()) {
    try {
      spec = models::ModelSpec::parse(explicit_spec);
    } catch (const std::exception& e) {
      throw ConfigError("model.spec", std::string("config: [model] spec: ") + e.what());
    }
    spec = models::with_outputs(spec, outputs);
  } else {
    const std::string arch = cfg.str("model", "arch");
    if (arch == "mlp") {
      std::vector<std::size_t> hidden;
      for (const auto& h : cfg.list("model", "hidden")) {
        try {
          hidden.push_back(std::stoul(h));
        } catch (const std::exception&) {
          throw ConfigError("model.hidden", "config: [model] hidden: bad width '" + h + "'");
        }
      }
      spec = models::mlp(ad::numel(example_shape), hidden, outputs);
      if (example_shape.size() > 1) {
        spec.input_shape = example_shape;
        spec.layers.insert(spec.layers.begin(), models::Flatten{});
      }
    } else if (arch == "cnn") {
      if (example_shape.size() != 3) {
        throw ConfigError("model.arch", "config: [model] arch=cnn needs image data, got example shape " +
                                            ad::shape_str(example_shape));
      }
      spec = models::small_cnn(example_shape[0], example_shape[1], example_shape[2], outputs);
    } else {
      throw ConfigError("model.arch", "config: [model] arch: expected mlp or cnn, got '" + arch + "'");
    }
  }
  if (spec.input_shape != example_shape) {
    throw ConfigError("model.spec", "config: model input " + ad::shape_str(spec.input_shape) +
                                        " does not match data example shape " + ad::shape_str(example_shape));
  }
  spec.validate();
  return spec;
}

attacks::Norm norm_of(const Config& cfg, const std::string& section) {
  try {
    return attacks::parse_norm(cfg.str(section, "norm"));
  } catch (const PreconditionError& e) {
    throw ConfigError(dotted(section, "norm"), "config: [" + section + "] norm: " + e.what());
  }
}

std::optional<attacks::Box> input_box(const Config& cfg) {
  const std::string v = cfg.str("attack", "input_box");
  if (v == "unit") return attacks::Box{0.0, 1.0};
  if (v == "none") return std::nullopt;
  if (v == "auto") return image_data(cfg) ? std::optional<attacks::Box>(attacks::Box{0.0, 1.0}) : std::nullopt;
  throw ConfigError("attack.input_box", "config: [attack] input_box: expected auto, none or unit, got '" + v + "'");
}

training::TrainConfig train_config(const Config& cfg, std::uint64_t seed) {
  training::TrainConfig t;
  t.epochs = cfg.count("train", "epochs");
  t.batch_size = cfg.count("train", "batch_size");
  t.learning_rate = cfg.num("train", "learning_rate");
  for (double e : cfg.nums("train", "decay_epochs")) {
    if (e < 0 || e != std::floor(e)) throw ConfigError("train.decay_epochs", "config: [train] decay_epochs must be integers");
    t.decay_epochs.push_back(static_cast<std::size_t>(e));
  }
  t.decay_factor = cfg.num("train", "decay_factor");
  t.weight_decay = cfg.num("train", "weight_decay");
  try {
    t.defense = training::parse_defense(cfg.str("train", "defense"));
  } catch (const PreconditionError& e) {
    throw ConfigError("train.defense", std::string("config: [train] defense: ") + e.what());
  }
  t.lambda = cfg.num("train", "lambda");
  t.warmup_surrogates = cfg.flag("train", "warmup_surrogates");
  t.attack.norm = norm_of(cfg, "train");
  t.attack.epsilon = cfg.num("train", "epsilon");
  t.attack.steps = cfg.count("train", "steps");
  t.attack.step_size = cfg.num("train", "step_size");
  t.attack.random_init = cfg.flag("train", "random_init");
  t.attack.input_box = input_box(cfg);
  t.seed = derive_seed(seed, "train");
  try {
    t.validate();
  } catch (const PreconditionError& e) {
    throw ConfigError("train", std::string("config: [train] ") + e.what());
  }
  return t;
}

robin::RobinAttackConfig attack_config(const Config& cfg, std::uint64_t seed) {
  robin::RobinAttackConfig a;
  const std::string base = cfg.str("attack", "base");
  if (base == "pgd") {
    a.base = robin::BaseAttack::Pgd;
  } else if (base == "cw") {
    a.base = robin::BaseAttack::Cw;
  } else {
    throw ConfigError("attack.base", "config: [attack] base: expected pgd or cw, got '" + base + "'");
  }
  a.pgd.norm = norm_of(cfg, "attack");
  a.pgd.epsilon = cfg.num("attack", "epsilon");
  a.pgd.steps = cfg.count("attack", "steps");
  a.pgd.step_size = cfg.num("attack", "step_size");
  a.pgd.random_init = cfg.flag("attack", "random_init");
  a.pgd.input_box = input_box(cfg);
  a.pgd.seed = derive_seed(seed, "attack");
  a.cw.search_steps = cfg.count("attack", "cw_search_steps");
  a.cw.c_lo = cfg.num("attack", "cw_c_lo");
  a.cw.c_hi = cfg.num("attack", "cw_c_hi");
  a.cw.iterations = cfg.count("attack", "cw_iterations");
  a.cw.learn_rate = cfg.num("attack", "cw_learn_rate");
  a.cw.kappa = cfg.num("attack", "cw_kappa");
  a.cw.epsilon = cfg.num("attack", "cw_epsilon");
  try {
    a.pgd.validate();
    if (a.base == robin::BaseAttack::Cw) a.cw.validate();
  } catch (const PreconditionError& e) {
    throw ConfigError("attack", std::string("config: [attack] ") + e.what());
  }
  if (cfg.count("attack", "chunk") == 0) throw ConfigError("attack.chunk", "config: [attack] chunk must be positive");
  return a;
}

json attack_settings(const robin::RobinAttackConfig& a) {
  json j;
  j["base"] = a.base == robin::BaseAttack::Pgd ? "pgd" : "cw";
  j["norm"] = attacks::to_string(a.pgd.norm);
  j["epsilon"] = a.pgd.epsilon;
  j["steps"] = a.pgd.steps;
  j["step_size"] = a.pgd.effective_step_size();
  j["random_init"] = a.pgd.random_init;
  j["seed"] = a.pgd.seed;
  if (a.base == robin::BaseAttack::Cw) {
    j["cw"] = {{"search_steps", a.cw.search_steps}, {"c_lo", a.cw.c_lo},         {"c_hi", a.cw.c_hi},
               {"iterations", a.cw.iterations},     {"learn_rate", a.cw.learn_rate}, {"kappa", a.cw.kappa}};
  }
  return j;
}

// ---- checkpoints -------------------------------------------------------------------------

std::map<std::string, std::string> read_manifest(const fs::path& dir, const std::string& key) {
  const fs::path p = dir / "manifest.txt";
  std::ifstream in(p);
  if (!in) throw ConfigError(key, "config: " + key + ": no manifest.txt in " + dir.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

models::Model load_model_dir(const fs::path& dir, const std::string& key) {
  auto kv = read_manifest(dir, key);
  if (kv["kind"] != "model") {
    throw ConfigError(key, "config: " + key + ": " + dir.string() + " holds a '" + kv["kind"] + "' checkpoint, expected a model (run train)");
  }
  const auto spec = models::ModelSpec::parse(kv["arch"]);
  auto params = models::read_checkpoint(dir / kv["checkpoint"]);
  models::check_parameters(spec, params);
  return models::Model{spec, std::move(params)};
}

robin::BinaryAggregate load_aggregate_dir(const fs::path& dir, const std::string& key) {
  auto kv = read_manifest(dir, key);
  if (kv["kind"] != "robin") {
    throw ConfigError(key, "config: " + key + ": " + dir.string() + " holds a '" + kv["kind"] + "' checkpoint, expected an aggregate (run robin-train)");
  }
  return robin::load_aggregate(dir);
}

void check_shape(const ad::Shape& model_shape, std::size_t model_classes, const data::Dataset& d, const std::string& what) {
  if (model_shape != d.example_shape()) {
    throw ConfigError("attack.checkpoint", what + " input shape " + ad::shape_str(model_shape) +
                                               " does not match dataset example shape " + ad::shape_str(d.example_shape()));
  }
  if (model_classes != d.num_classes) {
    throw ConfigError("attack.checkpoint", what + " has " + std::to_string(model_classes) + " classes, dataset has " +
                                               std::to_string(d.num_classes));
  }
}

std::string log_csv(const std::vector<training::EpochLog>& log) {
  std::ostringstream s;
  training::write_log_csv(s, log);
  return s.str();
}

// ---- reports ------------------------------------------------------------------------------

json report_json(const robin::RobustReport& rep) {
  json j;
  j["examples"] = rep.examples;
  j["clean_accuracy"] = rep.clean_accuracy;
  json list = json::array();
  for (std::size_t a = 0; a < rep.names.size(); ++a) {
    const auto succ = static_cast<std::size_t>(std::count(rep.success[a].begin(), rep.success[a].end(), true));
    list.push_back({{"name", rep.names[a]}, {"robust_accuracy", rep.accuracy[a]}, {"successes", succ}});
  }
  j["attacks"] = list;
  j["strongest_of"] = rep.strongest_of;
  j["overlap"] = {{"names", rep.names}, {"matrix", rep.overlap}};
  return j;
}

std::string examples_csv(const robin::RobustReport& rep, const data::Dataset& d) {
  std::ostringstream s;
  s << "index,label,clean_correct";
  for (const auto& n : rep.names) s << ',' << n << "_success";
  s << ",robust\n";
  for (std::size_t i = 0; i < rep.examples; ++i) {
    s << i << ',' << d.labels[i] << ',' << int(rep.clean_correct[i]);
    for (const auto& succ : rep.success) s << ',' << int(succ[i]);
    s << ',' << int(rep.robust[i]) << '\n';
  }
  return s.str();
}

json histogram_json(const analysis::Histogram& h) {
  return {{"lo", h.lo}, {"hi", h.hi}, {"edges", h.edges}, {"counts", h.counts}, {"mean", h.mean}, {"total", h.total}};
}

// ---- commands -------------------------------------------------------------------------------

int cmd_train(Context& ctx) {
  ctx.out.reserve({"model.rbn", "manifest.txt", "train_log.csv"});
  const Splits s = load_data(ctx.cfg, ctx.seed);
  const auto spec = build_spec(ctx.cfg, s.train.example_shape(), s.train.num_classes);
  const auto tc = train_config(ctx.cfg, ctx.seed);
  ctx.log << "train: " << s.train.size() << " examples, " << s.train.num_classes << " classes, arch " << spec.describe()
          << ", defense " << training::to_string(tc.defense) << "\n";
  const auto result = training::train(spec, s.train, tc);
  const auto bytes = models::save_checkpoint(result.params);
  ctx.out.write("model.rbn", std::string(bytes.begin(), bytes.end()));
  std::ostringstream manifest;
  manifest << "kind=model\narch=" << spec.describe() << "\nclasses=" << s.train.num_classes
           << "\ncheckpoint=model.rbn\nconfig_hash=" << ctx.cfg.hash() << "\nversion=" << version() << "\n";
  ctx.out.write("manifest.txt", manifest.str());
  ctx.out.write("train_log.csv", log_csv(result.log));
  if (!result.log.empty()) ctx.log << "train: final train accuracy " << fmt(result.log.back().train_acc) << "\n";
  return 0;
}

int cmd_robin_train(Context& ctx) {
  const Splits s = load_data(ctx.cfg, ctx.seed);
  const std::size_t k = s.train.num_classes;
  std::vector<std::string> planned{"manifest.txt"};
  for (std::size_t i = 0; i < k; ++i) {
    planned.push_back("arm_" + std::to_string(i) + ".rbn");
    planned.push_back("train_log_arm_" + std::to_string(i) + ".csv");
  }
  ctx.out.reserve(planned);
  const auto spec = build_spec(ctx.cfg, s.train.example_shape(), 1);
  const auto tc = train_config(ctx.cfg, ctx.seed);
  ctx.log << "robin-train: " << k << " arms, arch " << spec.describe() << ", jobs " << ctx.jobs << "\n";
  const auto trained = robin::train_robin(spec, s.train, tc, ctx.jobs);
  robin::save_aggregate(ctx.out.dir(), trained.aggregate, ctx.cfg.hash(), ctx.out.overwrite());
  for (std::size_t i = 0; i < k; ++i) ctx.out.write("train_log_arm_" + std::to_string(i) + ".csv", log_csv(trained.logs[i]));
  return 0;
}

int cmd_attack(Context& ctx, bool aggregate) {
  const std::string prefix = aggregate ? "robin-attack" : "attack";
  ctx.out.reserve({"attack_report.json", "attack_examples.csv"});
  const fs::path ckpt = require_file(ctx.cfg, "attack", "checkpoint");
  const Splits s = load_data(ctx.cfg, ctx.seed);
  const auto ac = attack_config(ctx.cfg, ctx.seed);
  const std::size_t chunk = ctx.cfg.count("attack", "chunk");
  auto names = ctx.cfg.list("attack", "attacks");
  if (names.empty()) throw ConfigError("attack.attacks", "config: [attack] attacks: empty attack list");

  robin::RobustReport rep;
  if (aggregate) {
    const auto agg = load_aggregate_dir(ckpt, "attack.checkpoint");
    check_shape(agg.arms[0].spec.input_shape, agg.num_classes(), s.test, "aggregate");
    if (names == std::vector<std::string>{"auto"}) {
      names.clear();
      for (auto a : robin::kAllAggregateAttacks) {
        const bool pgd_only = a == robin::AggregateAttack::Top2 || a == robin::AggregateAttack::AvgGradient;
        if (ac.base == robin::BaseAttack::Pgd || !pgd_only) names.push_back(robin::to_string(a));
      }
    }
    std::vector<robin::AggregateAttack> list;
    for (const auto& n : names) {
      try {
        list.push_back(robin::parse_aggregate_attack(n));
      } catch (const PreconditionError& e) {
        throw ConfigError("attack.attacks", std::string("config: [attack] attacks: ") + e.what());
      }
    }
    ctx.log << "robin-attack: " << s.test.size() << " examples, " << list.size() << " attacks\n";
    rep = robin::robust_accuracy(agg, s.test, list, ac, ctx.jobs, chunk);
  } else {
    const auto model = load_model_dir(ckpt, "attack.checkpoint");
    check_shape(model.spec.input_shape, model.num_classes(), s.test, "checkpoint");
    if (names == std::vector<std::string>{"auto"}) names = {ac.base == robin::BaseAttack::Cw ? "cw" : "pgd"};
    std::vector<robin::ModelAttack> list;
    for (const auto& n : names) {
      try {
        list.push_back(robin::parse_model_attack(n));
      } catch (const PreconditionError& e) {
        throw ConfigError("attack.attacks", std::string("config: [attack] attacks: ") + e.what());
      }
    }
    ctx.log << "attack: " << s.test.size() << " examples, " << list.size() << " attacks\n";
    rep = robin::robust_accuracy(model, s.test, list, ac, ctx.jobs, chunk);
  }
  json j = provenance(ctx, aggregate ? "robin-attack" : "attack");
  j["attack_settings"] = attack_settings(ac);
  j["report"] = report_json(rep);
  ctx.out.write("attack_report.json", j.dump(2) + "\n");
  ctx.out.write("attack_examples.csv", examples_csv(rep, s.test));
  ctx.log << prefix << ": clean " << fmt(rep.clean_accuracy) << ", strongest-of " << fmt(rep.strongest_of) << "\n";
  return 0;
}

// ---- analyze modes ------------------------------------------------------------------------

void write_analysis(Context& ctx, const std::string& mode, const std::string& csv, json body) {
  json j = provenance(ctx, "analyze");
  j["mode"] = mode;
  j["result"] = std::move(body);
  ctx.out.write("analysis_" + mode + ".csv", csv);
  ctx.out.write("analysis_" + mode + ".json", j.dump(2) + "\n");
}

std::vector<models::Model> train_ensemble(Context& ctx, const Splits& s, std::size_t m) {
  const auto spec = build_spec(ctx.cfg, s.train.example_shape(), s.train.num_classes);
  const auto base = train_config(ctx.cfg, ctx.seed);
  std::vector<models::Model> out(m);
  parallel_for(m, ctx.jobs, [&](std::size_t e) {
    training::TrainConfig tc = base;
    tc.seed = derive_seed(derive_seed(ctx.seed, "ensemble"), e);
    out[e] = models::Model{spec, training::train(spec, s.train, tc).params};
  });
  return out;
}

int analyze_coherence(Context& ctx) {
  const fs::path dir = require_file(ctx.cfg, "analysis", "aggregate");
  const Splits s = load_data(ctx.cfg, ctx.seed);
  const auto agg = load_aggregate_dir(dir, "analysis.aggregate");
  check_shape(agg.arms[0].spec.input_shape, agg.num_classes(), s.test, "aggregate");
  const std::size_t bins = ctx.cfg.count("analysis", "bins");
  const std::size_t m = ctx.cfg.count("analysis", "ensemble_size");
  if (m == 1) throw ConfigError("analysis.ensemble_size", "config: [analysis] ensemble_size must be 0 or >= 2");
  const auto robin_rep = analysis::coherence_report(agg, s.test, bins);
  std::optional<analysis::CoherenceReport> ens_rep;
  if (m >= 2) {
    const auto ensemble = train_ensemble(ctx, s, m);
    ens_rep = analysis::coherence_report(ensemble, s.test, bins);
  }
  std::ostringstream csv;
  csv << "index,label,robin_coherence" << (ens_rep ? ",ensemble_coherence" : "") << "\n";
  for (std::size_t i = 0; i < s.test.size(); ++i) {
    csv << i << ',' << s.test.labels[i] << ',' << (robin_rep.values[i] ? fmt(*robin_rep.values[i]) : "");
    if (ens_rep) csv << ',' << (ens_rep->values[i] ? fmt(*ens_rep->values[i]) : "");
    csv << '\n';
  }
  json body;
  body["robin"] = {{"skipped", robin_rep.skipped}, {"histogram", histogram_json(robin_rep.summary)}};
  if (ens_rep) {
    body["ensemble"] = {{"models", m},
                        {"pairs", analysis::pair_count(m)},
                        {"skipped", ens_rep->skipped},
                        {"histogram", histogram_json(ens_rep->summary)}};
  }
  write_analysis(ctx, "coherence", csv.str(), body);
  ctx.log << "coherence: robin mean " << fmt(robin_rep.summary.mean)
          << (ens_rep ? ", ensemble mean " + fmt(ens_rep->summary.mean) : std::string()) << "\n";
  return 0;
}

analysis::SweepConfig sweep_config(Context& ctx, const Splits& s) {
  analysis::SweepConfig sc;
  sc.trunk = build_spec(ctx.cfg, s.train.example_shape(), s.train.num_classes);
  sc.train = train_config(ctx.cfg, ctx.seed);
  const auto ac = attack_config(ctx.cfg, ctx.seed);
  sc.attack = ac.pgd;
  sc.permutations = ctx.cfg.count("analysis", "permutations");
  if (sc.permutations == 0) throw ConfigError("analysis.permutations", "config: [analysis] permutations must be >= 1");
  sc.seed = derive_seed(ctx.seed, "sweep");
  if (s.train.num_classes < 3) throw ConfigError("data.classes", "config: sweeps need at least 3 classes");
  return sc;
}

json sweep_json(const analysis::SweepTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"j", r.j},
                    {"clean_mean", r.clean_mean},
                    {"clean_std", r.clean_std},
                    {"robust_mean", r.robust_mean},
                    {"robust_std", r.robust_std}});
  }
  json cells = json::array();
  for (const auto& c : t.cells) {
    cells.push_back({{"permutation", c.permutation}, {"j", c.j}, {"clean_accuracy", c.clean_accuracy}, {"robust_accuracy", c.robust_accuracy}});
  }
  return {{"k", t.k}, {"eps_grid", t.eps_grid}, {"evaluated_per_cell", t.evaluated}, {"rows", rows}, {"cells", cells}};
}

int analyze_simplicity(Context& ctx) {
  const Splits s = load_data(ctx.cfg, ctx.seed);
  auto sc = sweep_config(ctx, s);
  const double train_eps = sc.train.attack.epsilon;
  for (double m : ctx.cfg.nums("analysis", "eps_grid")) {
    if (m < 0) throw ConfigError("analysis.eps_grid", "config: [analysis] eps_grid entries must be >= 0");
    sc.eps_grid.push_back(m * train_eps);
  }
  ctx.log << "simplicity: k=" << s.train.num_classes << ", " << sc.permutations << " permutations\n";
  const auto table = analysis::simplicity_sweep(s.train, s.test, sc, ctx.jobs);
  std::ostringstream csv;
  csv << "j,clean_mean,clean_std";
  for (double e : table.eps_grid) csv << ",robust_mean@" << fmt(e) << ",robust_std@" << fmt(e);
  csv << "\n";
  for (const auto& r : table.rows) {
    csv << r.j << ',' << fmt(r.clean_mean) << ',' << fmt(r.clean_std);
    for (std::size_t e = 0; e < r.robust_mean.size(); ++e) csv << ',' << fmt(r.robust_mean[e]) << ',' << fmt(r.robust_std[e]);
    csv << "\n";
  }
  json body = sweep_json(table);
  body["eval_attack"] = {{"norm", attacks::to_string(sc.attack.norm)}, {"steps", sc.attack.steps}, {"random_init", sc.attack.random_init}};
  write_analysis(ctx, "simplicity", csv.str(), body);
  return 0;
}

int analyze_separation(Context& ctx) {
  const Splits s = load_data(ctx.cfg, ctx.seed);
  const auto sc = sweep_config(ctx, s);
  const double eps_eval = ctx.cfg.num("analysis", "eps_eval") * sc.train.attack.epsilon;
  ctx.log << "separation: k=" << s.train.num_classes << ", eval epsilon " << fmt(eps_eval) << "\n";
  const auto curves = analysis::separation_sweep(s.train, s.test, sc, eps_eval, ctx.jobs);
  std::ostringstream csv;
  csv << "j,robust_mean,robust_std,standard_mean,standard_std\n";
  for (std::size_t i = 0; i < curves.js.size(); ++i) {
    csv << curves.js[i] << ',' << fmt(curves.robust_mean[i]) << ',' << fmt(curves.robust_std[i]) << ','
        << fmt(curves.standard_mean[i]) << ',' << fmt(curves.standard_std[i]) << "\n";
  }
  json body = {{"eps_eval", eps_eval},         {"j", curves.js},
               {"robust_mean", curves.robust_mean}, {"robust_std", curves.robust_std},
               {"standard_mean", curves.standard_mean}, {"standard_std", curves.standard_std}};
  write_analysis(ctx, "separation", csv.str(), body);
  return 0;
}

int analyze_boundary(Context& ctx) {
  const Splits s = load_data(ctx.cfg, ctx.seed);
  attacks::BoundaryConfig bc;
  const auto ac = attack_config(ctx.cfg, ctx.seed);
  bc.norm = ac.pgd.norm;
  bc.eps_max = ctx.cfg.num("analysis", "eps_max");
  bc.tolerance = ctx.cfg.num("analysis", "tolerance");
  bc.steps = ctx.cfg.count("analysis", "boundary_steps");
  bc.input_box = ac.pgd.input_box;
  bc.seed = ac.pgd.seed;
  if (!(bc.eps_max > 0)) throw ConfigError("analysis.eps_max", "config: [analysis] eps_max must be > 0");
  if (!(bc.tolerance > 0)) throw ConfigError("analysis.tolerance", "config: [analysis] tolerance must be > 0");
  const std::string task = ctx.cfg.str("analysis", "boundary_task");
  std::vector<attacks::Goal> goals;
  if (task == "untargeted") {
    goals = attacks::untargeted(s.test.labels);
  } else if (task == "binary") {
    goals = analysis::binary_task_goals(s.test.labels);
  } else {
    throw ConfigError("analysis.boundary_task", "config: [analysis] boundary_task: expected untargeted or binary, got '" + task + "'");
  }
  models::LogitFn fn;
  std::optional<models::Model> model;
  std::optional<robin::BinaryAggregate> agg;
  std::string kind;
  if (ctx.cfg.path("analysis", "model")) {
    model = load_model_dir(require_file(ctx.cfg, "analysis", "model"), "analysis.model");
    check_shape(model->spec.input_shape, model->num_classes(), s.test, "model");
    fn = models::logit_fn(*model);
    kind = "model";
  } else if (ctx.cfg.path("analysis", "aggregate")) {
    agg = load_aggregate_dir(require_file(ctx.cfg, "analysis", "aggregate"), "analysis.aggregate");
    check_shape(agg->arms[0].spec.input_shape, agg->num_classes(), s.test, "aggregate");
    fn = [&a = *agg](const ad::Tensor& x) { return a.arm_logits(x); };
    kind = "robin";
  } else {
    throw ConfigError("analysis.model", "config: boundary mode needs [analysis] model or [analysis] aggregate");
  }
  const auto rep = analysis::boundary_distribution(fn, s.test.inputs, goals, bc, ctx.cfg.count("analysis", "bins"), ctx.jobs);
  std::ostringstream csv;
  analysis::write_histogram_csv(csv, rep.summary);
  const auto capped = static_cast<std::size_t>(std::count(rep.capped.begin(), rep.capped.end(), true));
  json body = {{"kind", kind}, {"task", task}, {"eps_max", bc.eps_max}, {"capped", capped},
               {"histogram", histogram_json(rep.summary)}, {"distances", rep.distances}};
  write_analysis(ctx, "boundary", csv.str(), body);
  ctx.log << "boundary: mean distance " << fmt(rep.summary.mean) << ", " << capped << " capped\n";
  return 0;
}

int analyze_transfer(Context& ctx) {
  const Splits s = load_data(ctx.cfg, ctx.seed);
  const auto agg = load_aggregate_dir(require_file(ctx.cfg, "analysis", "aggregate"), "analysis.aggregate");
  const auto surrogate = load_model_dir(require_file(ctx.cfg, "analysis", "surrogate"), "analysis.surrogate");
  check_shape(agg.arms[0].spec.input_shape, agg.num_classes(), s.test, "aggregate");
  check_shape(surrogate.spec.input_shape, surrogate.num_classes(), s.test, "surrogate");
  const auto ac = attack_config(ctx.cfg, ctx.seed);
  const std::size_t chunk = ctx.cfg.count("attack", "chunk");
  const std::string mode = ctx.cfg.str("analysis", "transfer_mode");
  std::vector<std::pair<std::string, robin::TransferMode>> modes;
  if (mode == "both" || mode == "untargeted") modes.push_back({"transfer_untargeted", robin::TransferMode::Untargeted});
  if (mode == "both" || mode == "targeted") modes.push_back({"transfer_targeted", robin::TransferMode::Targeted});
  if (modes.empty()) {
    throw ConfigError("analysis.transfer_mode", "config: [analysis] transfer_mode: expected both, untargeted or targeted, got '" + mode + "'");
  }
  const models::LogitFn fn = models::logit_fn(surrogate);
  std::vector<robin::AttackOutcome> outcomes;
  for (const auto& [name, m] : modes) {
    const auto res = robin::attack_dataset(
        s.test,
        [&, m = m](std::size_t first, const ad::Tensor& x, std::span<const std::size_t> y) {
          return robin::transfer_attack(fn, agg, x, y, ac, m, first);
        },
        ctx.jobs, chunk);
    outcomes.push_back({name, res.success});
  }
  const robin::AggregateAttack direct[] = {robin::AggregateAttack::Softmax};
  const auto softmax = robin::robust_accuracy(agg, s.test, direct, ac, ctx.jobs, chunk);
  outcomes.push_back({"softmax", softmax.success[0]});
  const auto rep = robin::summarize(softmax.clean_correct, outcomes);
  json body = report_json(rep);
  body["attack_settings"] = attack_settings(ac);
  write_analysis(ctx, "transfer", examples_csv(rep, s.test), body);
  for (std::size_t a = 0; a < rep.names.size(); ++a) ctx.log << "transfer: " << rep.names[a] << " surviving " << fmt(rep.accuracy[a]) << "\n";
  return 0;
}

robin::Partition parse_partition(const Config& cfg, std::size_t k) {
  const std::string v = cfg.str("analysis", "partition");
  robin::Partition p;
  if (v == "halves") {
    for (std::size_t c = 0; c < k; ++c) p.block_of.push_back(c < (k + 1) / 2 ? 0 : 1);
  } else if (v == "interleaved") {
    for (std::size_t c = 0; c < k; ++c) p.block_of.push_back(c % 2);
  } else {
    for (double b : cfg.nums("analysis", "partition")) {
      if (b < 0 || b != std::floor(b)) throw ConfigError("analysis.partition", "config: [analysis] partition: block ids must be integers");
      p.block_of.push_back(static_cast<std::size_t>(b));
    }
  }
  if (p.block_of.size() != k) {
    throw ConfigError("analysis.partition", "config: [analysis] partition lists " + std::to_string(p.block_of.size()) +
                                                " classes, dataset has " + std::to_string(k));
  }
  p.num_blocks = *std::max_element(p.block_of.begin(), p.block_of.end()) + 1;
  try {
    p.validate();
  } catch (const PreconditionError& e) {
    throw ConfigError("analysis.partition", std::string("config: [analysis] ") + e.what());
  }
  return p;
}

int analyze_hierarchical(Context& ctx) {
  const Splits s = load_data(ctx.cfg, ctx.seed);
  const auto partition = parse_partition(ctx.cfg, s.train.num_classes);
  std::vector<int> strategies;
  for (double v : ctx.cfg.nums("analysis", "strategies")) {
    if (v != 1 && v != 2 && v != 3) throw ConfigError("analysis.strategies", "config: [analysis] strategies must be 1, 2 or 3");
    strategies.push_back(static_cast<int>(v));
  }
  if (strategies.empty()) throw ConfigError("analysis.strategies", "config: [analysis] strategies is empty");
  const auto trunk = build_spec(ctx.cfg, s.train.example_shape(), s.train.num_classes);
  const auto tc = train_config(ctx.cfg, ctx.seed);
  const auto ac = attack_config(ctx.cfg, ctx.seed);
  const std::size_t chunk = ctx.cfg.count("attack", "chunk");
  ctx.log << "hierarchical: " << partition.num_blocks << " blocks\n";
  const auto h = robin::train_hierarchical(trunk, s.train, partition, tc, ctx.jobs);
  const auto pred = h.predict(s.test.inputs);
  std::vector<bool> clean(s.test.size());
  for (std::size_t i = 0; i < clean.size(); ++i) clean[i] = pred[i] == s.test.labels[i];
  std::vector<robin::AttackOutcome> outcomes;
  for (int st : strategies) {
    const auto res = robin::attack_dataset(
        s.test,
        [&](std::size_t first, const ad::Tensor& x, std::span<const std::size_t> y) {
          return robin::hierarchical_attack(h, x, y, ac.pgd, st, first);
        },
        ctx.jobs, chunk);
    outcomes.push_back({"strategy" + std::to_string(st), res.success});
  }
  const auto rep = robin::summarize(clean, outcomes);
  json body = report_json(rep);
  body["partition"] = partition.block_of;
  body["attack_settings"] = attack_settings(ac);
  write_analysis(ctx, "hierarchical", examples_csv(rep, s.test), body);
  for (std::size_t a = 0; a < rep.names.size(); ++a) ctx.log << "hierarchical: " << rep.names[a] << " surviving " << fmt(rep.accuracy[a]) << "\n";
  return 0;
}

const std::vector<std::string>& analysis_modes() {
  static const std::vector<std::string> m = {"coherence", "simplicity", "separation", "boundary", "transfer", "hierarchical"};
  return m;
}

int cmd_analyze(Context& ctx, const std::string& mode) {
  if (std::find(analysis_modes().begin(), analysis_modes().end(), mode) == analysis_modes().end()) {
    throw ConfigError("mode", "unknown analysis mode '" + mode + "'");
  }
  ctx.out.reserve({"analysis_" + mode + ".csv", "analysis_" + mode + ".json"});
  if (mode == "coherence") return analyze_coherence(ctx);
  if (mode == "simplicity") return analyze_simplicity(ctx);
  if (mode == "separation") return analyze_separation(ctx);
  if (mode == "boundary") return analyze_boundary(ctx);
  if (mode == "transfer") return analyze_transfer(ctx);
  return analyze_hierarchical(ctx);
}

// Validates everything that can be checked without running.
void preflight(const Config& cfg, const Options& o) {
  check_data_paths(cfg);
  (void)train_config(cfg, 0);
  (void)attack_config(cfg, 0);
  if (o.command == "attack" || o.command == "robin-attack") require_file(cfg, "attack", "checkpoint");
  if (o.command == "analyze") {
    if (o.mode == "coherence" || o.mode == "transfer") require_file(cfg, "analysis", "aggregate");
    if (o.mode == "transfer") require_file(cfg, "analysis", "surrogate");
    for (const char* key : {"model", "aggregate", "surrogate"}) {
      if (cfg.path("analysis", key)) require_file(cfg, "analysis", key);
    }
  }
}

}  // namespace

int run(const Options& options, std::ostream& log, std::ostream& err) {
  try {
    Config cfg = Config::load(options.config);
    const std::uint64_t seed = options.seed ? *options.seed : cfg.u64("run", "seed");
    cfg.set("run", "seed", std::to_string(seed));
    fs::path out_dir;
    if (options.out) {
      out_dir = fs::absolute(*options.out).lexically_normal();
    } else if (auto p = cfg.path("run", "out")) {
      out_dir = *p;
    } else {
      throw ConfigError("run.out", "config: no output directory (set [run] out or pass --out)");
    }
    if (options.jobs == 0) throw ConfigError("jobs", "--jobs must be >= 1");
    preflight(cfg, options);
    Context ctx{cfg, seed, options.jobs, OutputDir(out_dir, options.overwrite), log};
    if (options.command == "train") return cmd_train(ctx);
    if (options.command == "robin-train") return cmd_robin_train(ctx);
    if (options.command == "attack") return cmd_attack(ctx, false);
    if (options.command == "robin-attack") return cmd_attack(ctx, true);
    if (options.command == "analyze") return cmd_analyze(ctx, options.mode);
    throw ConfigError("command", "unknown command '" + options.command + "'");
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

int main(int argc, char** argv, std::ostream& log, std::ostream& err) {
  CLI::App app{"simplerob: adversarial robustness workbench"};
  app.set_version_flag("--version", version());
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  std::string out;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "INI experiment config")->required();
    sub->add_option("--seed", seed, "master seed (overrides [run] seed)");
    sub->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", out, "output directory (overrides [run] out)");
    sub->add_flag("--overwrite", o.overwrite, "replace existing outputs");
  };
  const std::pair<const char*, const char*> commands[] = {
      {"train", "train a multiclass model"},
      {"attack", "attack a trained model on the test split"},
      {"robin-train", "train one one-vs-all arm per class"},
      {"robin-attack", "attack a trained aggregate on the test split"}};
  for (const auto& [name, about] : commands) add_common(app.add_subcommand(name, about));
  CLI::App* analyze = app.add_subcommand("analyze", "run an analysis");
  add_common(analyze);
  analyze->add_option("--mode", o.mode, "analysis mode")->required()->check(CLI::IsMember(analysis_modes()));
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, log, err) == 0 ? 0 : 2;
  }
  for (const auto* sub : app.get_subcommands()) o.command = sub->get_name();
  if (app.get_subcommands().front()->count("--seed")) o.seed = seed;
  if (!out.empty()) o.out = out;
  return run(o, log, err);
}

}  // namespace simplerob::cli
