#ifndef RSDS_DATASET_HPP
#define RSDS_DATASET_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rsds/error.hpp"
#include "rsds/types.hpp"

namespace rsds {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

/// N sequences of length T. Regime labels are 0-based in memory and
/// 1-based on disk.
struct Dataset {
  std::size_t n = 0;  // observation dim
  std::size_t m = 0;  // latent dim (0 when unknown)
  std::size_t K = 0;  // regime count (0 when unknown)
  std::vector<RowMatrix> x;                       // N x (T x n)
  std::vector<RowMatrix> z;                       // empty or N x (T x m)
  std::vector<std::vector<std::uint32_t>> s;      // empty or N x T
  std::map<std::string, std::string> metadata;

  std::size_t size() const { return x.size(); }
  std::size_t length() const { return x.empty() ? 0 : static_cast<std::size_t>(x.front().rows()); }
  bool has_z() const { return !z.empty(); }
  bool has_s() const { return !s.empty(); }

  void validate() const {
    const std::size_t T = length();
    for (const auto& xi : x)
      require(static_cast<std::size_t>(xi.rows()) == T && static_cast<std::size_t>(xi.cols()) == n,
              "Dataset: inconsistent observation shapes");
    if (has_z()) {
      require(z.size() == x.size(), "Dataset: z count differs from x count");
      for (const auto& zi : z)
        require(static_cast<std::size_t>(zi.rows()) == T && static_cast<std::size_t>(zi.cols()) == m,
                "Dataset: inconsistent latent shapes");
    }
    if (has_s()) {
      require(s.size() == x.size(), "Dataset: s count differs from x count");
      for (const auto& si : s) {
        require(si.size() == T, "Dataset: inconsistent regime sequence length");
        for (auto v : si) require(v < K, "Dataset: regime label out of range");
      }
    }
  }

  /// Sequences [begin, end) as a new dataset (shares metadata).
  Dataset slice(std::size_t begin, std::size_t end) const {
    require(begin <= end && end <= size(), "Dataset::slice: range out of bounds");
    Dataset d;
    d.n = n;
    d.m = m;
    d.K = K;
    d.metadata = metadata;
    d.x.assign(x.begin() + static_cast<std::ptrdiff_t>(begin), x.begin() + static_cast<std::ptrdiff_t>(end));
    if (has_z()) d.z.assign(z.begin() + static_cast<std::ptrdiff_t>(begin), z.begin() + static_cast<std::ptrdiff_t>(end));
    if (has_s()) d.s.assign(s.begin() + static_cast<std::ptrdiff_t>(begin), s.begin() + static_cast<std::ptrdiff_t>(end));
    return d;
  }
};

struct DatasetHeader {
  std::uint16_t version = 0;
  std::uint8_t flags = 0;
  std::uint32_t N = 0, T = 0, n = 0, m = 0, K = 0;
  bool has_z() const { return flags & 1u; }
  bool has_s() const { return flags & 2u; }
};

inline constexpr std::uint16_t kDatasetVersion = 1;

namespace detail {

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

/// Cursor over an in-memory byte buffer; failures name the section and offset.
class Reader {
 public:
  explicit Reader(const std::string& data) : data_(data) {}

  template <class T>
  T get(const char* section) {
    need(sizeof(T), section);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  void bytes(void* dst, std::size_t count, const char* section) {
    need(count, section);
    std::memcpy(dst, data_.data() + pos_, count);
    pos_ += count;
  }

  std::string str(std::size_t count, const char* section) {
    need(count, section);
    std::string s = data_.substr(pos_, count);
    pos_ += count;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t count, const char* section) {
    if (data_.size() - pos_ < count)
      throw ParseError(std::string("truncated file: missing ") + section + " at byte offset " + std::to_string(pos_) +
                       " (need " + std::to_string(count) + " bytes, have " + std::to_string(data_.size() - pos_) + ")");
  }
  const std::string& data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ParseError("write failed for '" + path + "'");
}

inline DatasetHeader parse_dataset_header(Reader& r) {
  const std::string magic = r.str(4, "magic");
  if (magic != "RSDS") throw ParseError("bad magic at byte offset 0: expected 'RSDS'");
  DatasetHeader h;
  h.version = r.get<std::uint16_t>("version");
  if (h.version != kDatasetVersion)
    throw ParseError("unsupported dataset version " + std::to_string(h.version) + " at byte offset 4");
  h.flags = r.get<std::uint8_t>("flags");
  if (h.flags & ~3u) throw ParseError("unknown flag bits at byte offset 6");
  h.N = r.get<std::uint32_t>("header field N");
  h.T = r.get<std::uint32_t>("header field T");
  h.n = r.get<std::uint32_t>("header field n");
  h.m = r.get<std::uint32_t>("header field m");
  h.K = r.get<std::uint32_t>("header field K");
  if (h.n == 0) throw ParseError("header field n is zero at byte offset 15");
  if (h.has_z() && h.m == 0) throw ParseError("latents present but header field m is zero");
  if (h.has_s() && h.K == 0) throw ParseError("regimes present but header field K is zero");
  return h;
}

}  // namespace detail

inline std::string metadata_text(const std::map<std::string, std::string>& meta) {
  std::string out;
  for (const auto& [k, v] : meta) out += k + "=" + v + "\n";
  return out;
}

inline std::string serialize_dataset(const Dataset& d) {
  d.validate();
  std::string out = "RSDS";
  detail::put<std::uint16_t>(out, kDatasetVersion);
  detail::put<std::uint8_t>(out, static_cast<std::uint8_t>((d.has_z() ? 1 : 0) | (d.has_s() ? 2 : 0)));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d.size()));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d.length()));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d.n));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d.m));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d.K));
  for (const auto& x : d.x) out.append(reinterpret_cast<const char*>(x.data()), static_cast<std::size_t>(x.size()) * 8);
  for (const auto& z : d.z) out.append(reinterpret_cast<const char*>(z.data()), static_cast<std::size_t>(z.size()) * 8);
  for (const auto& s : d.s)
    for (auto v : s) detail::put<std::uint32_t>(out, v + 1);
  const std::string meta = metadata_text(d.metadata);
  detail::put<std::uint64_t>(out, meta.size());
  out += meta;
  return out;
}

inline Dataset deserialize_dataset(const std::string& bytes) {
  detail::Reader r(bytes);
  const DatasetHeader h = detail::parse_dataset_header(r);
  Dataset d;
  d.n = h.n;
  d.m = h.m;
  d.K = h.K;
  const auto T = static_cast<Eigen::Index>(h.T);
  d.x.resize(h.N);
  for (auto& x : d.x) {
    x.resize(T, static_cast<Eigen::Index>(h.n));
    r.bytes(x.data(), static_cast<std::size_t>(x.size()) * 8, "observation payload");
  }
  if (h.has_z()) {
    d.z.resize(h.N);
    for (auto& z : d.z) {
      z.resize(T, static_cast<Eigen::Index>(h.m));
      r.bytes(z.data(), static_cast<std::size_t>(z.size()) * 8, "latent payload");
    }
  }
  if (h.has_s()) {
    d.s.assign(h.N, std::vector<std::uint32_t>(h.T));
    for (auto& s : d.s)
      for (auto& v : s) {
        const std::size_t at = r.pos();
        v = r.get<std::uint32_t>("regime payload");
        if (v < 1 || v > h.K)
          throw ParseError("regime label " + std::to_string(v) + " out of range at byte offset " + std::to_string(at));
        v -= 1;
      }
  }
  const auto len = r.get<std::uint64_t>("metadata length");
  std::istringstream meta(r.str(static_cast<std::size_t>(len), "metadata blob"));
  if (!r.done()) throw ParseError("trailing bytes after metadata at byte offset " + std::to_string(r.pos()));
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("malformed metadata line '" + line + "'");
    d.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return d;
}

/// Writes the binary file and a plain-text summary at `path + ".txt"`.
inline void write_dataset(const std::string& path, const Dataset& d) {
  detail::write_file(path, serialize_dataset(d));
  std::ostringstream txt;
  txt << "format=RSDS v" << kDatasetVersion << "\nN=" << d.size() << "\nT=" << d.length() << "\nn=" << d.n
      << "\nm=" << d.m << "\nK=" << d.K << "\nhas_z=" << d.has_z() << "\nhas_s=" << d.has_s() << "\n"
      << metadata_text(d.metadata);
  detail::write_file(path + ".txt", txt.str());
}

inline Dataset read_dataset(const std::string& path) { return deserialize_dataset(detail::read_file(path)); }

/// Shapes only; reads nothing past the fixed-size header.
inline DatasetHeader read_dataset_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::string buf(27, '\0');
  in.read(buf.data(), 27);
  buf.resize(static_cast<std::size_t>(in.gcount()));
  detail::Reader r(buf);
  return detail::parse_dataset_header(r);
}

}  // namespace rsds

#endif  // RSDS_DATASET_HPP
