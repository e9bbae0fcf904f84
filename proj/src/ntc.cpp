#include "ctdiag/ntc.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <memory>
#include <set>
#include <sstream>
#include <unordered_map>

namespace ctdiag {
namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::size_t align4(std::size_t n) { return (n + 3) & ~std::size_t{3}; }

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool has(std::size_t n) const { return pos_ <= bytes_.size() && bytes_.size() - pos_ >= n; }
  std::size_t pos() const { return pos_; }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (!has(n)) {
      throw NtcError(NtcErrorKind::kTruncated,
                     std::string("ntc: file truncated while reading ") + what);
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

struct TableEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_ntc(std::span<const NtcEntry> entries) {
  std::set<std::string_view> seen;
  for (const auto& e : entries) {
    if (!seen.insert(e.name).second) {
      throw NtcError(NtcErrorKind::kDuplicateName, "ntc: duplicate tensor name " + e.name);
    }
    if (e.name.empty()) throw NtcError(NtcErrorKind::kBadEntry, "ntc: empty tensor name");
    if (e.shape.empty() || shape_numel(e.shape) != e.values.size() ||
        std::find(e.shape.begin(), e.shape.end(), 0) != e.shape.end()) {
      throw NtcError(NtcErrorKind::kBadEntry, "ntc: tensor " + e.name + " has shape " +
                                                  shape_str(e.shape) + " but " +
                                                  std::to_string(e.values.size()) + " values");
    }
    for (auto d : e.shape) {
      if (d > 0xFFFFFFFFu) throw NtcError(NtcErrorKind::kBadEntry, "ntc: dimension overflow");
    }
  }

  std::size_t table_bytes = 12;
  for (const auto& e : entries) table_bytes += 4 + e.name.size() + 8 + 4 * e.shape.size() + 8;
  std::size_t offset = align4(table_bytes + 4);

  std::vector<std::uint8_t> out;
  out.insert(out.end(), std::begin(kNtcMagic), std::end(kNtcMagic));
  put_u32(out, kNtcVersion);
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(out, kNtcDtypeF32);
    put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
    put_u64(out, offset);
    offset += 4 * e.values.size();
  }
  put_u32(out, crc_of(out));
  out.resize(align4(out.size()), 0);
  for (const auto& e : entries) {
    for (float v : e.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<NtcEntry> decode_ntc(std::span<const std::uint8_t> bytes) {
  // A short prefix of the magic is a truncated file, not a foreign one.
  if (std::memcmp(bytes.data(), kNtcMagic, std::min<std::size_t>(bytes.size(), 4)) != 0) {
    throw NtcError(NtcErrorKind::kBadMagic, "ntc: bad magic (expected \"NTC1\")");
  }
  Reader in(bytes);
  in.str(4, "magic");
  const std::uint32_t version = in.u32("version");
  if (version != kNtcVersion) {
    throw NtcError(NtcErrorKind::kBadVersion,
                   "ntc: unsupported format version " + std::to_string(version));
  }
  const std::uint32_t count = in.u32("entry count");

  std::vector<TableEntry> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    TableEntry t;
    const std::uint32_t name_len = in.u32("entry name length");
    t.name = in.str(name_len, "entry name");
    const std::uint32_t dtype = in.u32("entry dtype");
    if (dtype != kNtcDtypeF32) {
      throw NtcError(NtcErrorKind::kCorrupt,
                     "ntc: entry " + std::to_string(i) + " has unknown dtype " +
                         std::to_string(dtype));
    }
    const std::uint32_t rank = in.u32("entry rank");
    if (rank == 0 || rank > 8) {
      throw NtcError(NtcErrorKind::kCorrupt,
                     "ntc: entry " + std::to_string(i) + " has invalid rank " +
                         std::to_string(rank));
    }
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(in.u32("entry dims"));
    t.offset = in.u64("entry offset");
    table.push_back(std::move(t));
  }
  const std::size_t table_end = in.pos();
  const std::uint32_t stored_crc = in.u32("table checksum");
  if (stored_crc != crc_of(bytes.first(table_end))) {
    throw NtcError(NtcErrorKind::kCorrupt, "ntc: entry table checksum mismatch");
  }

  std::set<std::string_view> seen;
  std::size_t expected = align4(in.pos());
  for (std::size_t p = in.pos(); p < std::min(expected, bytes.size()); ++p) {
    if (bytes[p] != 0) throw NtcError(NtcErrorKind::kCorrupt, "ntc: non-zero alignment padding");
  }
  for (const auto& t : table) {
    if (!seen.insert(t.name).second) {
      throw NtcError(NtcErrorKind::kDuplicateName, "ntc: duplicate tensor name " + t.name);
    }
    for (auto d : t.shape) {
      if (d == 0) throw NtcError(NtcErrorKind::kCorrupt, "ntc: zero dimension in " + t.name);
    }
    if (t.offset != expected) {
      throw NtcError(NtcErrorKind::kCorrupt, "ntc: payload of " + t.name + " at offset " +
                                                 std::to_string(t.offset) + ", expected " +
                                                 std::to_string(expected));
    }
    std::size_t n = 1;
    for (auto d : t.shape) {
      if (n > bytes.size() / d) {
        throw NtcError(NtcErrorKind::kTruncated, "ntc: payload of " + t.name + " is truncated");
      }
      n *= d;
    }
    expected += 4 * n;
  }

  std::vector<NtcEntry> entries;
  entries.reserve(table.size());
  for (auto& t : table) {
    const std::size_t n = shape_numel(t.shape);
    if (t.offset > bytes.size() || bytes.size() - t.offset < 4 * n) {
      throw NtcError(NtcErrorKind::kTruncated, "ntc: payload of " + t.name + " is truncated");
    }
    NtcEntry e{std::move(t.name), std::move(t.shape), std::vector<float>(n)};
    const std::uint8_t* p = bytes.data() + t.offset;
    for (std::size_t k = 0; k < n; ++k, p += 4) {
      const std::uint32_t bits = std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 |
                                 std::uint32_t{p[2]} << 16 | std::uint32_t{p[3]} << 24;
      e.values[k] = std::bit_cast<float>(bits);
      if (!std::isfinite(e.values[k])) {
        throw NtcError(NtcErrorKind::kNonFinite,
                       "ntc: non-finite value in " + e.name + " at index " + std::to_string(k));
      }
    }
    entries.push_back(std::move(e));
  }
  if (expected != bytes.size()) {
    throw NtcError(NtcErrorKind::kCorrupt, "ntc: " + std::to_string(bytes.size() - expected) +
                                               " trailing bytes after the last payload");
  }
  return entries;
}

void save_ntc(std::span<const NtcEntry> entries, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = encode_ntc(entries);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw NtcError(NtcErrorKind::kIo, "ntc: cannot open " + tmp.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw NtcError(NtcErrorKind::kIo, "ntc: write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw NtcError(NtcErrorKind::kIo, "ntc: cannot write " + path.string());
  }
}

void save_ntc(const ModelGraph& model, const std::filesystem::path& path) {
  const auto entries = registry_entries(model);
  save_ntc(entries, path);
}

std::vector<NtcEntry> load_ntc(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NtcError(NtcErrorKind::kIo, "ntc: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  if (is.bad()) throw NtcError(NtcErrorKind::kIo, "ntc: read failed for " + path.string());
  try {
    return decode_ntc(bytes);
  } catch (const NtcError& e) {
    throw NtcError(e.kind(), std::string(e.what()) + " [" + path.string() + "]");
  }
}

std::vector<NtcEntry> registry_entries(const ModelGraph& model) {
  std::vector<NtcEntry> out;
  out.reserve(model.params.size());
  for (const auto& p : model.params) {
    if (!p.loaded()) throw ModelError("cannot export unloaded tensor " + p.name);
    out.push_back({p.name, p.shape, {p.values.data().begin(), p.values.data().end()}});
  }
  return out;
}

namespace {

std::string join_names(const std::vector<std::string>& names) {
  std::string s;
  for (const auto& n : names) s += (s.empty() ? "" : ", ") + n;
  return s;
}

std::string bind_message(const std::vector<std::string>& missing,
                         const std::vector<std::string>& extra,
                         const std::vector<std::string>& mismatched) {
  std::ostringstream os;
  os << "weight binding failed:";
  if (!missing.empty()) os << " missing [" << join_names(missing) << "]";
  if (!extra.empty()) os << " extra [" << join_names(extra) << "]";
  if (!mismatched.empty()) os << " shape mismatch [" << join_names(mismatched) << "]";
  return os.str();
}

}  // namespace

BindError::BindError(std::vector<std::string> missing, std::vector<std::string> extra,
                     std::vector<std::string> mismatched)
    : ModelError(bind_message(missing, extra, mismatched)),
      missing_(std::move(missing)),
      extra_(std::move(extra)),
      mismatched_(std::move(mismatched)) {}

BindScope detect_bind_scope(std::span<const NtcEntry> entries) {
  const bool any_head = std::any_of(entries.begin(), entries.end(), [](const NtcEntry& e) {
    return e.name.starts_with("head/");
  });
  return any_head ? BindScope::kFull : BindScope::kBaseOnly;
}

ModelGraph& bind_weights(ModelGraph& model, std::vector<NtcEntry> entries, BindScope scope) {
  std::unordered_map<std::string, std::size_t> by_name;
  std::vector<std::string> extra, missing, mismatched;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!by_name.emplace(entries[i].name, i).second) extra.push_back(entries[i].name);
  }
  std::vector<std::pair<std::size_t, std::size_t>> plan;  // (registry index, entry index)
  for (std::size_t r = 0; r < model.params.size(); ++r) {
    const auto& p = model.params[r];
    const bool wanted = scope == BindScope::kFull || p.base;
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      if (wanted) missing.push_back(p.name);
      continue;
    }
    if (!wanted) continue;  // reported as extra below
    if (entries[it->second].shape != p.shape) {
      mismatched.push_back(p.name + " " + shape_str(entries[it->second].shape) + " vs " +
                           shape_str(p.shape));
    } else {
      plan.emplace_back(r, it->second);
    }
  }
  for (const auto& e : entries) {
    const auto idx = model.find_param(e.name);
    if (!idx || (scope == BindScope::kBaseOnly && !model.params[*idx].base)) {
      extra.push_back(e.name);
    }
  }
  if (!missing.empty() || !extra.empty() || !mismatched.empty()) {
    throw BindError(std::move(missing), std::move(extra), std::move(mismatched));
  }
  for (auto [r, e] : plan) {
    auto& p = model.params[r];
    p.values = Tensor(p.shape, std::move(entries[e].values));
  }
  return model;
}

std::string name_manifest(const ModelGraph& model) {
  std::ostringstream os;
  for (const auto& p : model.params) {
    os << p.name << ' ';
    for (std::size_t i = 0; i < p.shape.size(); ++i) os << (i ? "," : "") << p.shape[i];
    os << '\n';
  }
  return os.str();
}

std::string base_digest(const ModelGraph& model) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 initialization failed");
  }
  for (const auto& p : model.params) {
    if (!p.base) continue;
    EVP_DigestUpdate(ctx.get(), p.name.data(), p.name.size());
    EVP_DigestUpdate(ctx.get(), p.values.raw(), p.values.size() * sizeof(float));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  }
  return os.str();
}

}  // namespace ctdiag
