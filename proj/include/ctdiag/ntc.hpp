#pragma once

// NTC v1: a flat little-endian container of named float32 tensors.
//
//   offset 0   "NTC1"                       4 bytes
//              u32 version (= 1)
//              u32 entry count
//   table      per entry:
//                u32 name length, name bytes (UTF-8, no terminator)
//                u32 dtype (0 = F32)
//                u32 rank, u32 dims[rank]
//                u64 absolute payload offset
//              u32 CRC-32 of every byte from offset 0 to the end of the table
//   padding    zero bytes up to the next multiple of 4
//   payloads   4 * prod(dims) bytes per entry, contiguous, in table order
//
// Nothing may follow the last payload.

#include "ctdiag/errors.hpp"
#include "ctdiag/tensor.hpp"
#include "ctdiag/xception.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ctdiag {

inline constexpr char kNtcMagic[4] = {'N', 'T', 'C', '1'};
inline constexpr std::uint32_t kNtcVersion = 1;
inline constexpr std::uint32_t kNtcDtypeF32 = 0;

struct NtcEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;

  friend bool operator==(const NtcEntry&, const NtcEntry&) = default;
};

enum class NtcErrorKind {
  kIo,
  kBadMagic,
  kBadVersion,
  kTruncated,
  kCorrupt,
  kNonFinite,
  kDuplicateName,
  kBadEntry,
};

class NtcError : public ModelError {
 public:
  NtcError(NtcErrorKind kind, const std::string& what) : ModelError(what), kind_(kind) {}
  NtcErrorKind kind() const noexcept { return kind_; }

 private:
  NtcErrorKind kind_;
};

std::vector<std::uint8_t> encode_ntc(std::span<const NtcEntry> entries);
std::vector<NtcEntry> decode_ntc(std::span<const std::uint8_t> bytes);

void save_ntc(std::span<const NtcEntry> entries, const std::filesystem::path& path);
void save_ntc(const ModelGraph& model, const std::filesystem::path& path);
std::vector<NtcEntry> load_ntc(const std::filesystem::path& path);

// Registry order; throws ModelError if any tensor is unloaded.
std::vector<NtcEntry> registry_entries(const ModelGraph& model);

class BindError : public ModelError {
 public:
  BindError(std::vector<std::string> missing, std::vector<std::string> extra,
            std::vector<std::string> mismatched);
  const std::vector<std::string>& missing() const noexcept { return missing_; }
  const std::vector<std::string>& extra() const noexcept { return extra_; }
  // "name [file shape] vs [model shape]"
  const std::vector<std::string>& mismatched() const noexcept { return mismatched_; }

 private:
  std::vector<std::string> missing_, extra_, mismatched_;
};

enum class BindScope {
  kFull,      // every registry tensor must be present
  kBaseOnly,  // exactly the base tensors; head tensors must be absent
};

// Entries naming no "head/" tensor are treated as a base-only set.
BindScope detect_bind_scope(std::span<const NtcEntry> entries);

// Assigns registry tensors from same-named entries; all-or-nothing.
ModelGraph& bind_weights(ModelGraph& model, std::vector<NtcEntry> entries, BindScope scope);

// One "<name> <d0>,<d1>,..." line per registry tensor, registry order.
std::string name_manifest(const ModelGraph& model);

// Hex SHA-256 over the names and raw bytes of every base tensor.
std::string base_digest(const ModelGraph& model);

}  // namespace ctdiag
