#include "lumen/keyvalue.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "lumen/error.hpp"

namespace lumen {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key, "invalid number '" + text + "'");
  return v;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(trim(item));
  return parts;
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("key=value: missing '=' in '" + line + "'", line_no);
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError("key=value: empty key", line_no);
    if (kv.values_.count(key)) throw ParseError("key=value: duplicate key '" + key + "'", line_no);
    kv.values_[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::optional<std::string> KeyValues::take(const std::string& key) {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  consumed_.insert(key);
  return it->second;
}

std::string KeyValues::take_string(const std::string& key, const std::string& fallback) {
  return take(key).value_or(fallback);
}

int KeyValues::take_int(const std::string& key, int fallback) {
  auto v = take(key);
  return v ? parse_number<int>(key, *v) : fallback;
}

double KeyValues::take_double(const std::string& key, double fallback) {
  auto v = take(key);
  return v ? parse_number<double>(key, *v) : fallback;
}

std::vector<int> KeyValues::take_int_list(const std::string& key, const std::vector<int>& fallback) {
  auto v = take(key);
  if (!v) return fallback;
  std::vector<int> out;
  if (v->empty()) return out;
  for (const auto& p : split_list(*v)) out.push_back(parse_number<int>(key, p));
  return out;
}

std::vector<double> KeyValues::take_double_list(const std::string& key,
                                                const std::vector<double>& fallback) {
  auto v = take(key);
  if (!v) return fallback;
  std::vector<double> out;
  if (v->empty()) return out;
  for (const auto& p : split_list(*v)) out.push_back(parse_number<double>(key, p));
  return out;
}

void KeyValues::expect_consumed() const {
  for (const auto& [key, value] : values_)
    if (!consumed_.count(key)) throw ConfigError(key, "unknown key");
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void put_kv(std::string& out, const std::string& key, const std::string& value) {
  out += key;
  out += '=';
  out += value;
  out += '\n';
}

void put_kv(std::string& out, const std::string& key, double value) {
  put_kv(out, key, format_number(value));
}

void put_kv(std::string& out, const std::string& key, int value) {
  put_kv(out, key, std::to_string(value));
}

void put_kv(std::string& out, const std::string& key, const std::vector<int>& value) {
  std::string s;
  for (std::size_t i = 0; i < value.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(value[i]);
  }
  put_kv(out, key, s);
}

void put_kv(std::string& out, const std::string& key, const std::vector<double>& value) {
  std::string s;
  for (std::size_t i = 0; i < value.size(); ++i) {
    if (i) s += ',';
    s += format_number(value[i]);
  }
  put_kv(out, key, s);
}

}  // namespace lumen
