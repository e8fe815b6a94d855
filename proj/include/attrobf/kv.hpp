#pragma once

#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace attrobf::kv {

/// Flat "key = value" text. '#' starts a comment; blank lines are ignored.
using Map = std::map<std::string, std::string>;

Map parse(std::istream& in);
Map parse_file(const std::string& path);
void write(std::ostream& out, const Map& m);

/// Splits "key=value"; throws ParseError when '=' is missing.
std::pair<std::string, std::string> split_assignment(const std::string& text);

/// Throws ParseError naming the first key not in allowed.
void reject_unknown(const Map& m, const std::set<std::string>& allowed, const std::string& context);

long long to_int(const std::string& key, const std::string& value);
double to_double(const std::string& key, const std::string& value);
bool to_bool(const std::string& key, const std::string& value);
std::vector<std::string> to_list(const std::string& value);
std::string from_list(const std::vector<std::string>& items);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace attrobf::kv
