#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace evax::cli {

// Ordered key/value settings; later entries win.
struct RawConfig {
    std::vector<std::pair<std::string, std::string>> entries;
    void set(std::string key, std::string value) { entries.emplace_back(std::move(key), std::move(value)); }
    void append(const RawConfig &other);
};

// A JSON object, or `key = value` lines with `#` comments.
RawConfig parse_config_text(const std::string &text, const std::string &origin);
RawConfig parse_config_file(const std::filesystem::path &path);

// `KEY=VALUE` from --set.
std::pair<std::string, std::string> parse_assignment(const std::string &s);

using Field = std::variant<std::string *, std::filesystem::path *, std::int64_t *, std::uint64_t *, double *,
                           bool *, std::vector<double> *, std::vector<std::int64_t> *>;

// Binds config keys to typed fields. apply() rejects unknown keys and values
// that do not parse as the field's type, naming the key.
class Schema {
   public:
    void add(std::string key, Field field) { fields_.emplace_back(std::move(key), field); }
    void apply(const RawConfig &raw) const;
    bool has(const std::string &key) const;
    // Every key with its current value, one `key = value` line each, in
    // declaration order. Doubles are written with 17 significant digits.
    std::string resolved() const;

   private:
    std::vector<std::pair<std::string, Field>> fields_;
};

}  // namespace evax::cli
