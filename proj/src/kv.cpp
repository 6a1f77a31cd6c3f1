#include "advbyte/kv.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "advbyte/error.hpp"

namespace advbyte {

namespace {
std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}
}  // namespace

KeyValues KeyValues::parse(std::string_view text) {
  KeyValues kv;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::InvalidConfig, "config line " + std::to_string(line_no) + ": expected key = value");
    }
    kv.entries_[trim(std::string_view(t).substr(0, eq))] = trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

void KeyValues::set(const std::string& key, double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  entries_[key] = buf;
}

const std::string& KeyValues::get(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) fail(ErrorKind::InvalidConfig, "missing config key " + key);
  return it->second;
}

double KeyValues::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::InvalidConfig, "config key " + key + " is not a number: " + v);
}

long long KeyValues::get_int(const std::string& key) const {
  const std::string& v = get(key);
  long long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    fail(ErrorKind::InvalidConfig, "config key " + key + " is not an integer: " + v);
  }
  return out;
}

std::uint64_t KeyValues::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    fail(ErrorKind::InvalidConfig, "config key " + key + " is not an unsigned integer: " + v);
  }
  return out;
}

bool KeyValues::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(ErrorKind::InvalidConfig, "config key " + key + " is not a boolean: " + v);
}

std::string KeyValues::dump() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

void KeyValues::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << dump();
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
}

}  // namespace advbyte
