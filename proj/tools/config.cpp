#include "config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "evax/error.hpp"

namespace evax::cli {

namespace {

std::string trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string unquote(const std::string &s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\''))) {
        return s.substr(1, s.size() - 2);
    }
    return s;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <typename I>
I parse_integer(const std::string &key, const std::string &text) {
    I v{};
    const auto *b = text.data(), *e = text.data() + text.size();
    const auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e || text.empty()) {
        throw ConfigError(key, key + ": expected an integer, got '" + text + "'");
    }
    return v;
}

double parse_double(const std::string &key, const std::string &text) {
    if (text.empty()) throw ConfigError(key, key + ": expected a number, got ''");
    char *end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (end != text.c_str() + text.size() || !std::isfinite(v)) {
        throw ConfigError(key, key + ": expected a finite number, got '" + text + "'");
    }
    return v;
}

std::vector<std::string> split_list(const std::string &text) {
    std::string body = trim(text);
    if (!body.empty() && body.front() == '[' && body.back() == ']') body = body.substr(1, body.size() - 2);
    std::vector<std::string> out;
    if (trim(body).empty()) return out;
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    return out;
}

}  // namespace

void RawConfig::append(const RawConfig &other) {
    entries.insert(entries.end(), other.entries.begin(), other.entries.end());
}

RawConfig parse_config_text(const std::string &text, const std::string &origin) {
    RawConfig raw;
    const auto body = trim(text);
    if (!body.empty() && body.front() == '{') {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception &e) {
            throw ConfigError("config", origin + ": invalid JSON: " + e.what());
        }
        for (const auto &[k, v] : j.items()) {
            if (v.is_string()) {
                raw.set(k, v.get<std::string>());
            } else if (v.is_number_float()) {
                raw.set(k, format_double(v.get<double>()));
            } else if (v.is_array()) {
                std::string s;
                for (const auto &x : v) {
                    if (!s.empty()) s += ",";
                    s += x.is_number_float() ? format_double(x.get<double>()) : x.dump();
                }
                raw.set(k, s);
            } else if (v.is_boolean() || v.is_number()) {
                raw.set(k, v.dump());
            } else {
                throw ConfigError(k, origin + ": unsupported value for '" + k + "'");
            }
        }
        return raw;
    }
    std::stringstream ss(text);
    std::string line;
    int n = 0;
    while (std::getline(ss, line)) {
        ++n;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config", origin + ":" + std::to_string(n) + ": expected 'key = value'");
        }
        raw.set(trim(line.substr(0, eq)), unquote(trim(line.substr(eq + 1))));
    }
    return raw;
}

RawConfig parse_config_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config", path.string() + ": cannot read config file");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path.string());
}

std::pair<std::string, std::string> parse_assignment(const std::string &s) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects KEY=VALUE, got '" + s + "'");
    return {trim(s.substr(0, eq)), unquote(trim(s.substr(eq + 1)))};
}

bool Schema::has(const std::string &key) const {
    for (const auto &f : fields_)
        if (f.first == key) return true;
    return false;
}

void Schema::apply(const RawConfig &raw) const {
    for (const auto &[key, value] : raw.entries) {
        const Field *field = nullptr;
        for (const auto &f : fields_)
            if (f.first == key) field = &f.second;
        if (!field) throw ConfigError(key, "unknown config key '" + key + "'");
        std::visit(
            [&, &key = key, &value = value](auto *p) {
                using T = std::remove_pointer_t<decltype(p)>;
                if constexpr (std::is_same_v<T, std::string>) {
                    *p = value;
                } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
                    *p = value;
                } else if constexpr (std::is_same_v<T, std::int64_t>) {
                    *p = parse_integer<std::int64_t>(key, value);
                } else if constexpr (std::is_same_v<T, std::uint64_t>) {
                    *p = parse_integer<std::uint64_t>(key, value);
                } else if constexpr (std::is_same_v<T, double>) {
                    *p = parse_double(key, value);
                } else if constexpr (std::is_same_v<T, bool>) {
                    if (value == "true" || value == "1") {
                        *p = true;
                    } else if (value == "false" || value == "0") {
                        *p = false;
                    } else {
                        throw ConfigError(key, key + ": expected true or false, got '" + value + "'");
                    }
                } else if constexpr (std::is_same_v<T, std::vector<double>>) {
                    p->clear();
                    for (const auto &item : split_list(value)) p->push_back(parse_double(key, item));
                } else {
                    p->clear();
                    for (const auto &item : split_list(value)) p->push_back(parse_integer<std::int64_t>(key, item));
                }
            },
            *field);
    }
}

std::string Schema::resolved() const {
    std::string out;
    for (const auto &[key, field] : fields_) {
        std::string v = std::visit(
            [](auto *p) -> std::string {
                using T = std::remove_pointer_t<decltype(p)>;
                if constexpr (std::is_same_v<T, std::string>) {
                    return *p;
                } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
                    return p->string();
                } else if constexpr (std::is_same_v<T, double>) {
                    return format_double(*p);
                } else if constexpr (std::is_same_v<T, bool>) {
                    return *p ? "true" : "false";
                } else if constexpr (std::is_same_v<T, std::vector<double>>) {
                    std::string s;
                    for (double x : *p) s += (s.empty() ? "" : ",") + format_double(x);
                    return s;
                } else if constexpr (std::is_same_v<T, std::vector<std::int64_t>>) {
                    std::string s;
                    for (auto x : *p) s += (s.empty() ? "" : ",") + std::to_string(x);
                    return s;
                } else {
                    return std::to_string(*p);
                }
            },
            field);
        out += key + " = " + v + "\n";
    }
    return out;
}

}  // namespace evax::cli
