#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace simplerob::cli {

inline constexpr int kSchemaVersion = 1;

// Version string baked in at configure time.
std::string version();

// Bad or missing configuration; `key` is "section.key" when one is to blame.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what) : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

// Every known key with its resolved value (defaults filled in, paths made
// absolute against the config file's directory).
class Config {
 public:
  using Sections = std::map<std::string, std::map<std::string, std::string>>;

  // Unknown sections or keys are rejected.
  static Config parse(std::istream& in, const std::filesystem::path& base_dir);
  static Config load(const std::filesystem::path& path);
  static Config defaults();

  const Sections& values() const { return values_; }
  void set(const std::string& section, const std::string& key, const std::string& value);

  std::string str(const std::string& section, const std::string& key) const;
  double num(const std::string& section, const std::string& key) const;
  std::size_t count(const std::string& section, const std::string& key) const;
  std::uint64_t u64(const std::string& section, const std::string& key) const;
  bool flag(const std::string& section, const std::string& key) const;
  std::vector<std::string> list(const std::string& section, const std::string& key) const;
  std::vector<double> nums(const std::string& section, const std::string& key) const;
  // Empty when unset; otherwise absolute.
  std::optional<std::filesystem::path> path(const std::string& section, const std::string& key) const;

  // Canonical single-line rendering, the basis of the config hash.
  std::string canonical() const;
  std::string hash() const;

 private:
  Sections values_;
  std::filesystem::path base_dir_;
};

struct Options {
  std::string command;  // train | attack | robin-train | robin-attack | analyze
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::optional<std::filesystem::path> out;
  bool overwrite = false;
  std::string mode;  // analyze only
};

// Runs one command; messages go to `log` and `err`. Returns the exit code:
// 0 on success, 2 for configuration errors, 1 for anything else.
int run(const Options& options, std::ostream& log, std::ostream& err);

// Parses argv with subcommands and dispatches to run().
int main(int argc, char** argv, std::ostream& log, std::ostream& err);

}  // namespace simplerob::cli
