#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "evax/tensor.hpp"

namespace evax {

// File layout, all integers little-endian:
//   "EVAX" | u32 version | u64 metadata bytes | UTF-8 JSON metadata |
//   zero padding to an 8-byte boundary | f32 payloads
// metadata["tensors"][name] = {dtype, shape, offset, length}, offsets relative
// to the payload start and 8-byte aligned. Other metadata keys are free-form.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json metadata = nlohmann::json::object();
    std::map<std::string, Tensor> tensors;

    const Tensor &tensor(const std::string &name) const;
    bool has(const std::string &name) const { return tensors.count(name) != 0; }
};

class CheckpointError : public DataError {
   public:
    enum class Kind { io, bad_magic, version_mismatch, truncated, integrity };
    CheckpointError(Kind kind, const std::string &what) : DataError(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

   private:
    Kind kind_;
};

const char *checkpoint_error_name(CheckpointError::Kind kind);

void save_checkpoint(const Checkpoint &ckpt, const std::filesystem::path &path);
Checkpoint load_checkpoint(const std::filesystem::path &path);

}  // namespace evax
