#include "aad/runio.hpp"

#include <chrono>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <fmt/chrono.h>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>
#include <toml.hpp>

#include "aad/error.hpp"

namespace aad {

using nlohmann::json;

namespace {

json toml_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    json out = json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = toml_to_json(v);
    return out;
  }
  if (const auto* a = node.as_array()) {
    json out = json::array();
    for (const auto& v : *a) out.push_back(toml_to_json(v));
    return out;
  }
  if (const auto* v = node.as_string()) return v->get();
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  std::ostringstream ss;
  if (const auto* v = node.as_date()) ss << v->get();
  if (const auto* v = node.as_time()) ss << v->get();
  if (const auto* v = node.as_date_time()) ss << v->get();
  return ss.str();  // dates and times as text
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json_text(const std::string& text, const std::filesystem::path& path) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), 0, e.what());
  }
}

json parse_toml_text(const std::string& text, const std::filesystem::path& path) {
  try {
    return toml_to_json(toml::parse(text, path.string()));
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << e.description();
    throw ParseError(path.string(), static_cast<std::size_t>(e.source().begin.line), msg.str());
  }
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_, data, n) != 1) throw Error("SHA-256 update failed");
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_, md, &len) != 1) throw Error("SHA-256 final failed");
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out.push_back(kHex[md[i] >> 4]);
      out.push_back(kHex[md[i] & 0xf]);
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

json load_config_file(const std::filesystem::path& path) {
  const std::string text = read_all(path);
  const std::string ext = path.extension().string();
  json j;
  if (ext == ".json") {
    j = parse_json_text(text, path);
  } else if (ext == ".toml") {
    j = parse_toml_text(text, path);
  } else {
    try {
      j = parse_toml_text(text, path);
    } catch (const ParseError&) {
      j = parse_json_text(text, path);
    }
  }
  if (!j.is_object()) throw ParseError(path.string(), 0, "config root must be a table/object");
  return j;
}

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data.data(), data.size());
  return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  Sha256 h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

json merge_config(json base, const json& overrides) {
  if (!base.is_object() || !overrides.is_object()) return overrides;
  for (auto it = overrides.begin(); it != overrides.end(); ++it) {
    if (base.contains(it.key()) && base[it.key()].is_object() && it->is_object()) {
      base[it.key()] = merge_config(base[it.key()], *it);
    } else {
      base[it.key()] = *it;
    }
  }
  return base;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(now));
}

// ---------------------------------------------------------------------------

json RunManifest::to_json() const {
  return {{"command", command},   {"config", config},       {"config_hash", config_hash},
          {"seeds", seeds},       {"inputs", inputs},       {"artifacts", artifacts},
          {"engine_version", engine_version}, {"started", started}, {"finished", finished},
          {"status", status}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config = j.at("config");
  m.config_hash = j.at("config_hash").get<std::string>();
  m.seeds = j.value("seeds", std::vector<std::uint64_t>{});
  m.inputs = j.value("inputs", std::map<std::string, std::string>{});
  m.artifacts = j.value("artifacts", std::map<std::string, std::string>{});
  m.engine_version = j.value("engine_version", "");
  m.started = j.value("started", "");
  m.finished = j.value("finished", "");
  m.status = j.value("status", "running");
  return m;
}

RunDirectory::RunDirectory(std::filesystem::path dir, std::string command, json config,
                           const std::vector<std::filesystem::path>& inputs, bool force)
    : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
  const auto lock_path = dir_ / ".lock";
  lock_fd_ = ::open(lock_path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (lock_fd_ < 0) throw Error("cannot create lock file " + lock_path.string());
  if (::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(lock_fd_);
    lock_fd_ = -1;
    throw Error("run directory " + dir_.string() + " is locked by another process");
  }
  try {
    open(std::move(command), std::move(config), inputs, force);
  } catch (...) {
    ::close(lock_fd_);
    lock_fd_ = -1;
    throw;
  }
}

void RunDirectory::open(std::string command, json config, const std::vector<std::filesystem::path>& inputs,
                        bool force) {
  manifest_.command = std::move(command);
  manifest_.config = std::move(config);
  manifest_.config_hash = sha256_hex(manifest_.config.dump());
  for (const auto& p : inputs) manifest_.inputs[p.string()] = sha256_file(p);
  manifest_.started = utc_timestamp();

  const auto manifest_path = dir_ / "manifest.json";
  if (!std::filesystem::exists(manifest_path) && !force) {
    for (const auto& entry : std::filesystem::directory_iterator(dir_)) {
      if (entry.path().filename() != ".lock") {
        throw ValidationError(dir_.string() + " is not empty and holds no run manifest (use --force)");
      }
    }
  }
  if (std::filesystem::exists(manifest_path)) {
    RunManifest old;
    try {
      old = RunManifest::from_json(json::parse(read_all(manifest_path)));
    } catch (const std::exception& e) {
      if (!force) throw ValidationError("unreadable manifest in " + dir_.string() + " (use --force): " + e.what());
    }
    const bool same = old.command == manifest_.command && old.config_hash == manifest_.config_hash &&
                      old.inputs == manifest_.inputs;
    if (same && old.status == "complete" && !force) {
      state_ = State::up_to_date;
      manifest_ = old;
      return;
    }
    if (!same && !force) {
      throw ValidationError(dir_.string() + " holds a run with different command, config or inputs (use --force)");
    }
  }
  write_manifest();
  event("start", {{"command", manifest_.command}});
}

RunDirectory::~RunDirectory() {
  if (lock_fd_ >= 0) {
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
  }
}

void RunDirectory::event(std::string_view name, const json& fields) {
  json e = fields.is_object() ? fields : json{{"value", fields}};
  e["time"] = utc_timestamp();
  e["event"] = name;
  std::ofstream out(dir_ / "events.jsonl", std::ios::app);
  out << e.dump() << '\n';
}

void RunDirectory::add_artifact(const std::string& name, const std::filesystem::path& path) {
  manifest_.artifacts[name] = path.string();
}

void RunDirectory::write_manifest() const {
  const auto tmp = dir_ / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("cannot write manifest in " + dir_.string());
    out << manifest_.to_json().dump(2) << '\n';
  }
  std::filesystem::rename(tmp, dir_ / "manifest.json");
}

void RunDirectory::finish() {
  manifest_.finished = utc_timestamp();
  manifest_.status = "complete";
  write_manifest();
  event("finish");
}

}  // namespace aad
