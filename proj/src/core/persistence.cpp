#include "blc/persistence.hpp"

#include "blc/error.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace blc {

namespace fs = std::filesystem;

namespace {

constexpr std::uint8_t kMagic[4] = {0x42, 0x4C, 0x54, 0x31};
constexpr std::size_t kHeader = 8;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

template <class U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(p[b]) << (8 * b);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.order() < 1 || t.order() > kMaxOrder) fail(ErrorKind::Argument, "BLT1 stores orders 1..4");
  const bool f32 = t.dtype() == DType::F32;
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(static_cast<std::uint8_t>(t.dtype()));
  out.push_back(static_cast<std::uint8_t>(t.order()));
  out.push_back(0);
  out.push_back(0);
  for (std::size_t e : t.shape()) put_le<std::uint64_t>(out, e);
  out.reserve(out.size() + t.size() * (f32 ? 4 : 8));
  for (double v : t.data()) {
    if (f32)
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    else
      put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeader || std::memcmp(bytes.data(), kMagic, 4) != 0)
    fail(ErrorKind::Format, "not a BLT1 tensor file (bad magic)");
  const std::uint8_t dtype = bytes[4];
  if (dtype > 1) fail(ErrorKind::Version, "unknown BLT1 dtype code " + std::to_string(dtype));
  const std::size_t order = bytes[5];
  if (order < 1 || order > kMaxOrder) fail(ErrorKind::Format, "BLT1 order must be 1..4");
  if (bytes[6] != 0 || bytes[7] != 0) fail(ErrorKind::Format, "BLT1 reserved bytes must be zero");
  if (bytes.size() < kHeader + 8 * order) fail(ErrorKind::Length, "BLT1 header truncated");

  std::vector<std::size_t> shape(order);
  std::uint64_t count = 1;
  for (std::size_t a = 0; a < order; ++a) {
    const std::uint64_t e = get_le<std::uint64_t>(bytes.data() + kHeader + 8 * a);
    if (e == 0) fail(ErrorKind::Format, "BLT1 extents must be positive");
    if (count > (std::uint64_t{1} << 40) / e) fail(ErrorKind::Length, "BLT1 extents are implausibly large");
    count *= e;
    shape[a] = static_cast<std::size_t>(e);
  }
  const std::size_t width = dtype == 0 ? 4 : 8;
  const std::size_t payload = bytes.size() - kHeader - 8 * order;
  if (payload != count * width) {
    std::ostringstream os;
    os << "BLT1 payload has " << payload << " bytes, expected " << count * width;
    fail(ErrorKind::Length, os.str());
  }
  std::vector<double> data(count);
  const std::uint8_t* p = bytes.data() + kHeader + 8 * order;
  for (std::size_t i = 0; i < count; ++i, p += width) {
    data[i] = width == 4 ? static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(p)))
                         : std::bit_cast<double>(get_le<std::uint64_t>(p));
  }
  return Tensor(std::move(shape), std::move(data), dtype == 0 ? DType::F32 : DType::F64);
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Io, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename " + tmp.string() + ": " + ec.message());
}

void write_tensor(const Tensor& t, const fs::path& path) {
  write_file_atomic(path, encode_tensor(t));
}

Tensor read_tensor(const fs::path& path) { return decode_tensor(read_file(path)); }

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    fail(ErrorKind::Io, "SHA-256 computation failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string tensor_file_name(const std::string& param) { return param + ".blt"; }

void write_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());

  nlohmann::json manifest;
  manifest["format_version"] = kManifestVersion;
  manifest["arch"] = ckpt.arch;
  manifest["seed"] = ckpt.seed;
  manifest["config"] = ckpt.config;
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, t] : ckpt.tensors) {
    const auto bytes = encode_tensor(t);
    const std::string file = tensor_file_name(name);
    write_file_atomic(dir / file, bytes);
    tensors[name] = {{"file", file},
                     {"sha256", sha256_hex(bytes)},
                     {"shape", std::vector<std::size_t>(t.shape().begin(), t.shape().end())},
                     {"dtype", t.dtype() == DType::F32 ? "f32" : "f64"}};
  }
  manifest["tensors"] = tensors;
  const std::string text = manifest.dump(2) + "\n";
  write_file_atomic(dir / kManifestName,
                    std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Checkpoint read_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / kManifestName;
  if (!fs::exists(mpath)) fail(ErrorKind::Integrity, "checkpoint manifest missing: " + mpath.string());
  nlohmann::json manifest;
  try {
    const auto bytes = read_file(mpath);
    manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("manifest is not valid JSON: ") + e.what());
  }
  try {
    const int version = manifest.at("format_version").get<int>();
    if (version != kManifestVersion)
      fail(ErrorKind::Version, "unsupported checkpoint format version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.arch = manifest.at("arch").get<std::string>();
    ckpt.seed = manifest.at("seed").get<std::uint64_t>();
    ckpt.config = manifest.value("config", nlohmann::json::object());
    for (const auto& [name, entry] : manifest.at("tensors").items()) {
      const fs::path file = dir / entry.at("file").get<std::string>();
      if (!fs::exists(file)) fail(ErrorKind::Integrity, "tensor " + name + " missing: " + file.string());
      const auto bytes = read_file(file);
      if (sha256_hex(bytes) != entry.at("sha256").get<std::string>())
        fail(ErrorKind::Integrity, "tensor " + name + " does not match its manifest hash");
      ckpt.tensors.emplace(name, decode_tensor(bytes));
    }
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("malformed manifest: ") + e.what());
  }
}

}  // namespace blc
