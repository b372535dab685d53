#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace lumen {

// Flat `key=value` text: one pair per line, `#` starts a comment, blank lines
// ignored. Consumers `take` the keys they understand; `expect_consumed`
// rejects whatever is left so typos surface as errors naming the key.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::filesystem::path& path);

  bool contains(const std::string& key) const { return values_.count(key) != 0; }

  std::optional<std::string> take(const std::string& key);
  std::string take_string(const std::string& key, const std::string& fallback);
  int take_int(const std::string& key, int fallback);
  double take_double(const std::string& key, double fallback);
  std::vector<int> take_int_list(const std::string& key, const std::vector<int>& fallback);
  std::vector<double> take_double_list(const std::string& key, const std::vector<double>& fallback);

  void expect_consumed() const;

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

// Appends `key=value\n`.
void put_kv(std::string& out, const std::string& key, const std::string& value);
void put_kv(std::string& out, const std::string& key, double value);
void put_kv(std::string& out, const std::string& key, int value);
void put_kv(std::string& out, const std::string& key, const std::vector<int>& value);
void put_kv(std::string& out, const std::string& key, const std::vector<double>& value);

// Shortest decimal text that parses back to the same double.
std::string format_number(double v);

}  // namespace lumen
