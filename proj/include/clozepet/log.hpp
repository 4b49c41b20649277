#pragma once

#include <cstdio>
#include <initializer_list>
#include <iostream>
#include <string>
#include <utility>

namespace clozepet {

// Line-oriented key=value logging. Values with spaces or quotes are
// double-quoted with backslash escapes, so lines stay machine-parseable.
class Logger {
 public:
  explicit Logger(std::ostream& out = std::cerr, int verbosity = 1)
      : out_(&out), verbosity_(verbosity) {}

  int verbosity() const { return verbosity_; }
  void set_verbosity(int v) { verbosity_ = v; }

  void kv(int level,
          std::initializer_list<std::pair<const char*, std::string>> fields) {
    if (level > verbosity_) return;
    std::string line;
    for (const auto& [key, value] : fields) {
      if (!line.empty()) line += ' ';
      line += key;
      line += '=';
      line += quote(value);
    }
    (*out_) << line << '\n';
    out_->flush();
  }

  static std::string quote(const std::string& v) {
    bool needs = v.empty();
    for (char c : v) {
      if (c == ' ' || c == '"' || c == '=' || c == '\\' || c == '\n') needs = true;
    }
    if (!needs) return v;
    std::string q = "\"";
    for (char c : v) {
      if (c == '"' || c == '\\') q += '\\';
      if (c == '\n') {
        q += "\\n";
        continue;
      }
      q += c;
    }
    q += '"';
    return q;
  }

  static std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
  }

 private:
  std::ostream* out_;
  int verbosity_;
};

}  // namespace clozepet
