#include "moralmech/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "moralmech/error.hpp"

namespace moralmech {

namespace {

class ValueParser {
 public:
  ValueParser(const std::string& text, std::size_t line) : text_(text), line_(line) {}

  nlohmann::json parse() {
    nlohmann::json v = value();
    skip_space();
    if (pos_ != text_.size()) fail("trailing characters after value");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + what);
  }

  void skip_space() {
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (c == '#') {
        while (pos_ < text_.size() && text_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  nlohmann::json value() {
    skip_space();
    if (pos_ >= text_.size()) fail("missing value");
    const char c = text_[pos_];
    if (c == '"') return string();
    if (c == '[') return array();
    return scalar();
  }

  nlohmann::json string() {
    ++pos_;
    std::string out;
    while (pos_ < text_.size() && text_[pos_] != '"') {
      char c = text_[pos_++];
      if (c == '\\') {
        if (pos_ >= text_.size()) fail("unterminated escape");
        const char e = text_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
      }
      out += c;
    }
    if (pos_ >= text_.size()) fail("unterminated string");
    ++pos_;
    return out;
  }

  nlohmann::json array() {
    ++pos_;
    nlohmann::json out = nlohmann::json::array();
    skip_space();
    if (pos_ < text_.size() && text_[pos_] == ']') {
      ++pos_;
      return out;
    }
    while (true) {
      out.push_back(value());
      skip_space();
      if (pos_ >= text_.size()) fail("unterminated array");
      if (text_[pos_] == ',') {
        ++pos_;
        skip_space();
        if (pos_ < text_.size() && text_[pos_] == ']') {
          ++pos_;
          return out;
        }
        continue;
      }
      if (text_[pos_] == ']') {
        ++pos_;
        return out;
      }
      fail("expected ',' or ']' in array");
    }
  }

  nlohmann::json scalar() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() && text_[pos_] != ',' && text_[pos_] != ']' && text_[pos_] != '#' &&
           !std::isspace(static_cast<unsigned char>(text_[pos_])))
      ++pos_;
    std::string token = text_.substr(start, pos_ - start);
    if (token == "true") return true;
    if (token == "false") return false;
    std::string digits;
    for (char c : token)
      if (c != '_') digits += c;
    if (digits.empty()) fail("missing value");
    const bool looks_float = digits.find_first_of(".eE") != std::string::npos || digits == "inf" || digits == "nan";
    try {
      std::size_t used = 0;
      if (!looks_float) {
        const long long v = std::stoll(digits, &used);
        if (used == digits.size()) return v;
      } else {
        const double v = std::stod(digits, &used);
        if (used == digits.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("cannot parse value '" + token + "'");
  }

  const std::string& text_;
  std::size_t line_;
  std::size_t pos_ = 0;
};

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

bool valid_key(const std::string& key) {
  if (key.empty()) return false;
  for (char c : key)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  return true;
}

int bracket_balance(const std::string& s) {
  int depth = 0;
  bool in_string = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (in_string) {
      if (c == '\\') ++i;
      else if (c == '"') in_string = false;
    } else if (c == '"') {
      in_string = true;
    } else if (c == '#') {
      break;
    } else if (c == '[') {
      ++depth;
    } else if (c == ']') {
      --depth;
    }
  }
  return depth;
}

}  // namespace

nlohmann::json parse_config(std::istream& in) {
  nlohmann::json root = nlohmann::json::object();
  nlohmann::json* section = &root;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t start_line = line_no;
    std::string body = trim(line);
    if (body.empty() || body[0] == '#') continue;

    if (body[0] == '[') {
      const std::size_t close = body.find(']');
      if (close == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section");
      const std::string rest = trim(body.substr(close + 1));
      if (!rest.empty() && rest[0] != '#')
        throw ConfigError("config line " + std::to_string(line_no) + ": text after section header");
      const std::string name = trim(body.substr(1, close - 1));
      section = &root;
      std::stringstream parts(name);
      std::string part;
      bool any = false;
      while (std::getline(parts, part, '.')) {
        part = trim(part);
        if (!valid_key(part)) throw ConfigError("config line " + std::to_string(line_no) + ": bad section name '" + name + "'");
        nlohmann::json& next = (*section)[part];
        if (next.is_null()) next = nlohmann::json::object();
        if (!next.is_object())
          throw ConfigError("config line " + std::to_string(line_no) + ": section '" + name + "' clashes with a key");
        section = &next;
        any = true;
      }
      if (!any) throw ConfigError("config line " + std::to_string(line_no) + ": empty section name");
      continue;
    }

    const std::size_t eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(body.substr(0, eq));
    if (key.size() >= 2 && key.front() == '"' && key.back() == '"') key = key.substr(1, key.size() - 2);
    if (!valid_key(key)) throw ConfigError("config line " + std::to_string(line_no) + ": bad key '" + key + "'");
    std::string value = body.substr(eq + 1);
    while (bracket_balance(value) > 0) {
      std::string more;
      if (!std::getline(in, more))
        throw ConfigError("config line " + std::to_string(start_line) + ": unterminated array");
      ++line_no;
      value += "\n" + more;
    }
    if (section->contains(key)) throw ConfigError("config line " + std::to_string(start_line) + ": duplicate key '" + key + "'");
    (*section)[key] = ValueParser(value, start_line).parse();
  }
  return root;
}

nlohmann::json parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in);
}

nlohmann::json parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

nlohmann::json config_section(const nlohmann::json& config, const std::string& name) {
  if (config.is_object() && config.contains(name)) {
    if (!config.at(name).is_object()) throw ConfigError("config entry '" + name + "' must be a section");
    return config.at(name);
  }
  return nlohmann::json::object();
}

}  // namespace moralmech
