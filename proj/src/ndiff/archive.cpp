#include "raseg/ndiff/archive.hpp"

#include <bit>
#include <cstring>

namespace raseg::nd {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'N', 'D', 'A', 'R', 'C', '\0', '\1', '\0'};

template <typename U>
void put_pod(std::vector<char>& out, U v) {
  const char* p = reinterpret_cast<const char*>(&v);
  out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
 public:
  Reader(const std::vector<char>& b, const std::string& src) : bytes_(b), src_(src) {}

  template <typename U>
  U pod(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void raw(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(src_ + ": truncated archive while reading " + what);
  }
  const std::vector<char>& bytes_;
  std::string src_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t ArchiveEntry::numel() const {
  std::size_t n = 1;
  for (auto d : dims) n *= static_cast<std::size_t>(d);
  return n;
}

void Archive::put(const std::string& name, const Tensor5<float>& t) {
  ArchiveEntry e;
  e.dtype = DType::F32;
  for (int d : t.shape().dims()) e.dims.push_back(d);
  e.f32.assign(t.data(), t.data() + t.size());
  entries_[name] = std::move(e);
}

void Archive::put(const std::string& name, std::vector<std::int64_t> dims, std::vector<double> values) {
  ArchiveEntry e;
  e.dtype = DType::F64;
  e.dims = std::move(dims);
  if (e.numel() != values.size()) {
    throw DimensionError("archive entry '" + name + "': dims hold " + std::to_string(e.numel()) + " values, got " +
                         std::to_string(values.size()));
  }
  e.f64 = std::move(values);
  entries_[name] = std::move(e);
}

const ArchiveEntry& Archive::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw FormatError("archive has no entry '" + name + "'");
  return it->second;
}

Tensor5<float> Archive::tensor_f32(const std::string& name) const {
  const ArchiveEntry& e = entry(name);
  if (e.dtype != DType::F32 || e.dims.size() != 5) {
    throw FormatError("archive entry '" + name + "' is not a rank-5 f32 tensor");
  }
  Tensor5<float> t(Shape5{static_cast<int>(e.dims[0]), static_cast<int>(e.dims[1]), static_cast<int>(e.dims[2]),
                          static_cast<int>(e.dims[3]), static_cast<int>(e.dims[4])});
  std::copy(e.f32.begin(), e.f32.end(), t.data());
  return t;
}

const std::vector<double>& Archive::values_f64(const std::string& name, int expected_rank) const {
  const ArchiveEntry& e = entry(name);
  if (e.dtype != DType::F64) throw FormatError("archive entry '" + name + "' is not f64");
  if (expected_rank >= 0 && static_cast<int>(e.dims.size()) != expected_rank) {
    throw FormatError("archive entry '" + name + "' has rank " + std::to_string(e.dims.size()) + ", expected " +
                      std::to_string(expected_rank));
  }
  return e.f64;
}

std::vector<char> Archive::serialize() const {
  std::vector<char> out(kMagic, kMagic + sizeof(kMagic));
  const std::string meta = metadata.dump();
  put_pod<std::uint64_t>(out, meta.size());
  out.insert(out.end(), meta.begin(), meta.end());
  put_pod<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, e] : entries_) {
    put_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_pod<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    put_pod<std::uint32_t>(out, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) put_pod<std::int64_t>(out, d);
    const char* p = e.dtype == DType::F32 ? reinterpret_cast<const char*>(e.f32.data())
                                          : reinterpret_cast<const char*>(e.f64.data());
    const std::size_t nbytes = e.numel() * (e.dtype == DType::F32 ? sizeof(float) : sizeof(double));
    out.insert(out.end(), p, p + nbytes);
  }
  return out;
}

Archive Archive::parse(const std::vector<char>& bytes, const std::string& source) {
  Reader r(bytes, source);
  if (r.str(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic))) {
    throw FormatError(source + ": not an NDARC archive (bad magic)");
  }
  Archive ar;
  const auto meta_len = r.pod<std::uint64_t>("metadata length");
  const std::string meta = r.str(static_cast<std::size_t>(meta_len), "metadata");
  try {
    ar.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": archive metadata is not valid JSON: " + e.what());
  }
  const auto count = r.pod<std::uint32_t>("entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.pod<std::uint32_t>("entry name length");
    const std::string name = r.str(name_len, "entry name");
    ArchiveEntry e;
    const auto dt = r.pod<std::uint8_t>("dtype");
    if (dt > 1) throw FormatError(source + ": entry '" + name + "' has unknown dtype " + std::to_string(dt));
    e.dtype = static_cast<DType>(dt);
    const auto rank = r.pod<std::uint32_t>("rank");
    if (rank > 8) throw FormatError(source + ": entry '" + name + "' has implausible rank " + std::to_string(rank));
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.pod<std::int64_t>("dims");
      if (d < 0) throw FormatError(source + ": entry '" + name + "' has a negative dimension");
      e.dims.push_back(d);
    }
    const std::size_t n = e.numel();
    if (e.dtype == DType::F32) {
      e.f32.resize(n);
      r.raw(e.f32.data(), n * sizeof(float), "payload");
    } else {
      e.f64.resize(n);
      r.raw(e.f64.data(), n * sizeof(double), "payload");
    }
    ar.entries_[name] = std::move(e);
  }
  if (!r.done()) throw FormatError(source + ": trailing bytes after the last archive entry");
  return ar;
}

void Archive::save(const std::filesystem::path& path) const { write_binary_file(path, serialize()); }

Archive Archive::load(const std::filesystem::path& path) { return parse(read_binary_file(path), path.string()); }

void put_params(Archive& ar, const ParamStore<float>& params) {
  for (const auto& [name, p] : params) ar.put("param/" + name, p.value);
}

ParamStore<float> get_params(const Archive& ar) {
  ParamStore<float> out;
  const std::string prefix = "param/";
  for (const auto& [name, e] : ar.entries()) {
    if (name.rfind(prefix, 0) != 0) continue;
    Parameter<float> p;
    p.value = ar.tensor_f32(name);
    p.grad = Tensor5<float>(p.value.shape());
    out.emplace(name.substr(prefix.size()), std::move(p));
  }
  if (out.empty()) throw FormatError("archive holds no parameters");
  return out;
}

void put_adam(Archive& ar, const AdamState<float>& state) {
  ar.metadata["adam"] = {{"step", state.step},
                         {"lr", state.config.lr},
                         {"beta1", state.config.beta1},
                         {"beta2", state.config.beta2},
                         {"eps", state.config.eps}};
  for (const auto& [name, m] : state.m) ar.put("adam.m/" + name, m);
  for (const auto& [name, v] : state.v) ar.put("adam.v/" + name, v);
}

AdamState<float> get_adam(const Archive& ar) {
  if (!ar.metadata.contains("adam")) throw FormatError("archive holds no optimizer state");
  const auto& j = ar.metadata["adam"];
  AdamState<float> s;
  s.step = j.at("step").get<std::int64_t>();
  s.config.lr = j.at("lr").get<double>();
  s.config.beta1 = j.at("beta1").get<double>();
  s.config.beta2 = j.at("beta2").get<double>();
  s.config.eps = j.at("eps").get<double>();
  for (const auto& [name, e] : ar.entries()) {
    if (name.rfind("adam.m/", 0) == 0) s.m.emplace(name.substr(7), ar.tensor_f32(name));
    if (name.rfind("adam.v/", 0) == 0) s.v.emplace(name.substr(7), ar.tensor_f32(name));
  }
  return s;
}

}  // namespace raseg::nd
