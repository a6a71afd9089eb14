#pragma once

#include <stdexcept>
#include <string>

namespace evax {

// Error categories double as CLI exit codes.
enum class ErrorCategory : int {
    usage = 2,
    config = 3,
    data = 4,
    numerical = 5,
};

const char *category_name(ErrorCategory c);

class Error : public std::runtime_error {
   public:
    Error(ErrorCategory category, const std::string &what)
        : std::runtime_error(what), category_(category) {}
    ErrorCategory category() const noexcept { return category_; }

   private:
    ErrorCategory category_;
};

class ShapeError : public Error {
   public:
    explicit ShapeError(const std::string &what) : Error(ErrorCategory::numerical, what) {}
};

class NumericalError : public Error {
   public:
    explicit NumericalError(const std::string &what) : Error(ErrorCategory::numerical, what) {}
};

class ConfigError : public Error {
   public:
    ConfigError(std::string key, const std::string &what)
        : Error(ErrorCategory::config, what), key_(std::move(key)) {}
    const std::string &key() const noexcept { return key_; }

   private:
    std::string key_;
};

class UsageError : public Error {
   public:
    explicit UsageError(const std::string &what) : Error(ErrorCategory::usage, what) {}
};

class DataError : public Error {
   public:
    explicit DataError(const std::string &what) : Error(ErrorCategory::data, what) {}
};

}  // namespace evax
