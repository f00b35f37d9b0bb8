#include "stegdet/toml_lite.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "stegdet/common.hpp"

namespace stegdet {

namespace {

using nlohmann::json;

class Parser {
 public:
  explicit Parser(const std::string& text) : s_(text) {}

  json run() {
    json root = json::object();
    json* table = &root;
    while (true) {
      skip_blank_lines();
      if (at_end()) break;
      if (peek() == '[') {
        ++pos_;
        if (peek() == '[') fail("arrays of tables are not supported");
        const auto path = parse_key_path();
        skip_space();
        expect(']');
        table = &descend(root, path);
      } else {
        const auto path = parse_key_path();
        skip_space();
        expect('=');
        skip_space();
        json value = parse_value();
        json* parent = table;
        for (std::size_t k = 0; k + 1 < path.size(); ++k) parent = &descend(*parent, {path[k]});
        if (parent->contains(path.back())) fail("duplicate key '" + path.back() + "'");
        (*parent)[path.back()] = std::move(value);
      }
      end_of_line();
    }
    return root;
  }

 private:
  const std::string& s_;
  std::size_t pos_ = 0;
  int line_ = 1;

  [[noreturn]] void fail(const std::string& what) const {
    throw Error("TOML line " + std::to_string(line_) + ": " + what);
  }
  bool at_end() const { return pos_ >= s_.size(); }
  char peek() const { return at_end() ? '\0' : s_[pos_]; }
  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }
  void skip_space() {
    while (peek() == ' ' || peek() == '\t') ++pos_;
  }
  void skip_comment() {
    if (peek() == '#') {
      while (!at_end() && peek() != '\n') ++pos_;
    }
  }
  void newline() {
    if (peek() == '\r') ++pos_;
    expect('\n');
    ++line_;
  }
  void skip_blank_lines() {
    for (;;) {
      skip_space();
      skip_comment();
      if (peek() == '\n' || peek() == '\r') {
        newline();
      } else {
        return;
      }
    }
  }
  void end_of_line() {
    skip_space();
    skip_comment();
    if (!at_end()) newline();
  }

  static json& descend(json& node, const std::vector<std::string>& path) {
    json* cur = &node;
    for (const auto& k : path) {
      if (!cur->contains(k)) (*cur)[k] = json::object();
      cur = &(*cur)[k];
      if (!cur->is_object()) throw Error("TOML key '" + k + "' is not a table");
    }
    return *cur;
  }

  std::vector<std::string> parse_key_path() {
    std::vector<std::string> path;
    for (;;) {
      skip_space();
      if (peek() == '"') {
        path.push_back(parse_basic_string());
      } else if (peek() == '\'') {
        path.push_back(parse_literal_string());
      } else {
        std::string key;
        while (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-') {
          key += s_[pos_++];
        }
        if (key.empty()) fail("expected a key");
        path.push_back(key);
      }
      skip_space();
      if (peek() != '.') return path;
      ++pos_;
    }
  }

  std::string parse_basic_string() {
    expect('"');
    std::string out;
    for (;;) {
      if (at_end() || peek() == '\n') fail("unterminated string");
      const char c = s_[pos_++];
      if (c == '"') return out;
      if (c != '\\') {
        out += c;
        continue;
      }
      const char e = s_[pos_++];
      switch (e) {
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        default: fail(std::string("unsupported escape \\") + e);
      }
    }
  }

  std::string parse_literal_string() {
    expect('\'');
    const auto end = s_.find('\'', pos_);
    const auto nl = s_.find('\n', pos_);
    if (end == std::string::npos || (nl != std::string::npos && nl < end)) fail("unterminated string");
    std::string out = s_.substr(pos_, end - pos_);
    pos_ = end + 1;
    return out;
  }

  json parse_value() {
    const char c = peek();
    if (c == '"') {
      if (s_.compare(pos_, 3, "\"\"\"") == 0) fail("multi-line strings are not supported");
      return parse_basic_string();
    }
    if (c == '\'') return parse_literal_string();
    if (c == '[') return parse_array();
    if (c == '{') fail("inline tables are not supported");
    std::string tok;
    while (!at_end() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '+' ||
                         peek() == '-' || peek() == '.' || peek() == '_')) {
      tok += s_[pos_++];
    }
    if (tok == "true") return true;
    if (tok == "false") return false;
    return parse_number(tok);
  }

  json parse_number(std::string tok) {
    if (tok.empty()) fail("expected a value");
    std::string clean;
    for (std::size_t i = 0; i < tok.size(); ++i) {
      if (tok[i] == '_') {
        if (i == 0 || i + 1 == tok.size() || !std::isdigit(static_cast<unsigned char>(tok[i - 1])) ||
            !std::isdigit(static_cast<unsigned char>(tok[i + 1]))) {
          fail("misplaced underscore in '" + tok + "'");
        }
        continue;
      }
      clean += tok[i];
    }
    const bool is_float = clean.find_first_of(".eE") != std::string::npos ||
                          clean == "inf" || clean == "+inf" || clean == "-inf" || clean == "nan";
    std::size_t used = 0;
    try {
      if (is_float) {
        if (clean.find("inf") != std::string::npos || clean.find("nan") != std::string::npos) {
          fail("non-finite numbers are not supported");
        }
        const double v = std::stod(clean, &used);
        if (used == clean.size()) return v;
      } else {
        const long long v = std::stoll(clean, &used, 10);
        if (used == clean.size()) return v;
      }
    } catch (const std::logic_error&) {
    }
    fail("invalid value '" + tok + "'");
  }

  json parse_array() {
    expect('[');
    json arr = json::array();
    for (;;) {
      skip_blank_lines();
      if (peek() == ']') {
        ++pos_;
        return arr;
      }
      arr.push_back(parse_value());
      skip_blank_lines();
      if (peek() == ',') {
        ++pos_;
      } else if (peek() != ']') {
        fail("expected ',' or ']' in array");
      }
    }
  }
};

}  // namespace

nlohmann::json parse_toml(const std::string& text) { return Parser(text).run(); }

nlohmann::json load_toml(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw Error("cannot open config " + file.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return parse_toml(ss.str());
  } catch (const Error& e) {
    throw Error(file.string() + ": " + e.what());
  }
}

}  // namespace stegdet
