#include "attrobf/kv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "attrobf/errors.hpp"

namespace attrobf::kv {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::pair<std::string, std::string> split_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ParseError("expected key=value, got '" + text + "'");
  auto key = trim(text.substr(0, eq));
  if (key.empty()) throw ParseError("empty key in '" + text + "'");
  return {key, trim(text.substr(eq + 1))};
}

Map parse(std::istream& in) {
  Map out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    try {
      auto [k, v] = split_assignment(line);
      if (out.count(k)) throw ParseError("duplicate key '" + k + "'");
      out[k] = v;
    } catch (const ParseError& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return out;
}

Map parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  try {
    return parse(in);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

void write(std::ostream& out, const Map& m) {
  for (const auto& [k, v] : m) out << k << " = " << v << '\n';
}

void reject_unknown(const Map& m, const std::set<std::string>& allowed, const std::string& context) {
  for (const auto& [k, v] : m)
    if (!allowed.count(k)) throw ParseError("unknown " + context + " key '" + k + "'");
}

long long to_int(const std::string& key, const std::string& value) {
  long long out = 0;
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ParseError("key '" + key + "' expects an integer, got '" + value + "'");
  return out;
}

double to_double(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const double out = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return out;
  } catch (const std::exception&) {
    throw ParseError("key '" + key + "' expects a number, got '" + value + "'");
  }
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ParseError("key '" + key + "' expects true/false, got '" + value + "'");
}

std::vector<std::string> to_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string from_list(const std::vector<std::string>& items) {
  std::string out;
  for (size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace attrobf::kv
