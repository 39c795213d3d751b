#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace aad {

inline constexpr std::string_view kEngineVersion = "0.1.0";

/// TOML (by extension .toml, or as a first guess for unknown extensions) or JSON,
/// returned as a JSON object. Throws ParseError with the source position.
nlohmann::json load_config_file(const std::filesystem::path& path);

/// Hex SHA-256 digests.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

/// Deep merge: values of `overrides` replace or extend `base` (objects merge recursively).
nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& overrides);

struct RunManifest {
  std::string command;
  nlohmann::json config;               // effective config
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::string> inputs;     // path -> sha256
  std::map<std::string, std::string> artifacts;  // name -> path
  std::string engine_version{kEngineVersion};
  std::string started;
  std::string finished;  // empty while running or after a failure
  std::string status = "running";

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

/// A locked output directory with one manifest.json and an events.jsonl log.
class RunDirectory {
 public:
  enum class State { fresh, up_to_date };

  /// Creates the directory and takes an exclusive lock (Error when another process
  /// holds it). An existing manifest must match `command`, the config hash and every
  /// input digest; a completed match yields State::up_to_date, anything else is an
  /// error unless `force` is set.
  RunDirectory(std::filesystem::path dir, std::string command, nlohmann::json config,
               const std::vector<std::filesystem::path>& inputs, bool force);
  ~RunDirectory();
  RunDirectory(const RunDirectory&) = delete;
  RunDirectory& operator=(const RunDirectory&) = delete;

  State state() const noexcept { return state_; }
  const std::filesystem::path& path() const noexcept { return dir_; }
  RunManifest& manifest() noexcept { return manifest_; }

  /// Appends {"time", "event", ...fields} to events.jsonl.
  void event(std::string_view name, const nlohmann::json& fields = nlohmann::json::object());
  void add_artifact(const std::string& name, const std::filesystem::path& path);
  void write_manifest() const;
  /// Marks the run complete and rewrites the manifest.
  void finish();

 private:
  void open(std::string command, nlohmann::json config, const std::vector<std::filesystem::path>& inputs,
            bool force);

  std::filesystem::path dir_;
  int lock_fd_ = -1;
  State state_ = State::fresh;
  RunManifest manifest_;
};

std::string utc_timestamp();

}  // namespace aad
