#include "mvh/dataset.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mvh {

namespace {

constexpr const char* kMagic = "MVHDATA";
constexpr int kVersion = 1;

void put_array(std::string& out, const Array& a) {
  for (double v : a.values()) put_f64_le(out, v);
}

class Reader {
 public:
  Reader(const unsigned char* data, std::size_t size) : p_(data), end_(data + size) {}
  Array array(Shape shape) {
    Array a(std::move(shape));
    const std::size_t bytes = a.size() * 8;
    if (static_cast<std::size_t>(end_ - p_) < bytes) throw DatasetError("dataset truncated inside a data block");
    for (auto& v : a.values()) {
      v = get_f64_le(p_);
      p_ += 8;
    }
    return a;
  }
  std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }

 private:
  const unsigned char* p_;
  const unsigned char* end_;
};

std::string expect_line(std::istringstream& in, const std::string& key) {
  std::string line;
  if (!std::getline(in, line)) throw DatasetError("dataset header ends before '" + key + "'");
  if (line.compare(0, key.size() + 1, key + " ") != 0 && line != key)
    throw DatasetError("dataset header: expected '" + key + "', got '" + line + "'");
  return line.size() > key.size() ? line.substr(key.size() + 1) : std::string();
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::uint64_t parse_u64(const std::string& s) {
  std::size_t used = 0;
  const unsigned long long v = std::stoull(s, &used);
  if (used != s.size()) throw DatasetError("bad integer '" + s + "'");
  return v;
}

}  // namespace

std::uint32_t crc32_of(const void* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_hex_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || s.empty()) throw DatasetError("bad float literal '" + s + "'");
  return v;
}

void put_f64_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double get_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32_le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::string encode_dataset(const Dataset& d) {
  d.profile.validate();
  d.skeleton.validate();
  const std::size_t nv = d.rig.size(), nj = kHandJoints;
  std::ostringstream h;
  h << kMagic << ' ' << kVersion << '\n';
  h << "seed " << d.seed << '\n';
  h << "frame_size " << hex_double(d.frame_size) << '\n';
  h << "views " << nv << '\n';
  for (std::size_t v = 0; v < nv; ++v) {
    const Camera& c = d.rig.cameras[v];
    h << "camera " << (d.rig.view_ids.empty() ? static_cast<int>(v) : d.rig.view_ids[v]);
    for (double x : {c.fx, c.fy, c.cx, c.cy}) h << ' ' << hex_double(x);
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) h << ' ' << hex_double(c.R(r, k));
    for (int k = 0; k < 3; ++k) h << ' ' << hex_double(c.t(k));
    h << '\n';
  }
  h << "parents";
  for (int p : d.skeleton.parents) h << ' ' << p;
  h << '\n';
  for (std::size_t j = 0; j < nj; ++j)
    h << "bone " << j << ' ' << hex_double(d.skeleton.bones[j].x()) << ' ' << hex_double(d.skeleton.bones[j].y()) << ' '
      << hex_double(d.skeleton.bones[j].z()) << '\n';
  const CorruptionProfile& p = d.profile;
  h << "profile " << p.name;
  for (double x : {p.sigma, p.outlier_prob, p.outlier_mag, p.occlusion_prob, p.occlusion_inflation, p.occlusion_conf,
                   p.conf_scale, p.conf_noise})
    h << ' ' << hex_double(x);
  h << '\n';
  h << "sequences " << d.sequences.size() << '\n';
  for (const auto& s : d.sequences) {
    const std::size_t t = s.frames();
    if (s.params.shape() != Shape{t, kSkeletonParams} || s.gt3d.shape() != Shape{t, nj, 3} ||
        s.gt2d.shape() != Shape{t, nv, nj, 2} || s.pseudo.shape() != Shape{t, nv, nj, 2} ||
        s.conf.shape() != Shape{t, nv, nj})
      throw ContractError("sequence " + std::to_string(s.id) + " has inconsistent array shapes");
    h << "sequence " << s.id << ' ' << s.seed << ' ' << t << '\n';
  }
  h << "data\n";
  std::string out = h.str();
  for (const auto& s : d.sequences) {
    put_array(out, s.params);
    put_array(out, s.gt3d);
    put_array(out, s.gt2d);
    put_array(out, s.pseudo);
    put_array(out, s.conf);
  }
  put_u32_le(out, crc32_of(out.data(), out.size()));
  return out;
}

Dataset decode_dataset(const std::string& bytes) {
  if (bytes.size() < 4) throw DatasetError("dataset truncated: no checksum");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t body = bytes.size() - 4;
  if (get_u32_le(raw + body) != crc32_of(raw, body)) throw DatasetError("dataset checksum mismatch");

  const std::size_t data_pos = bytes.find("\ndata\n");
  if (data_pos == std::string::npos) throw DatasetError("dataset header has no data marker");
  std::istringstream in(bytes.substr(0, data_pos + 6));
  Dataset d;
  try {
    const auto head = words(expect_line(in, kMagic));
    if (head.size() != 1 || head[0] != std::to_string(kVersion))
      throw DatasetError("unsupported dataset version '" + (head.empty() ? std::string() : head[0]) + "'");
    d.seed = parse_u64(expect_line(in, "seed"));
    d.frame_size = parse_hex_double(expect_line(in, "frame_size"));
    const std::size_t nv = parse_u64(expect_line(in, "views"));
    for (std::size_t v = 0; v < nv; ++v) {
      const auto w = words(expect_line(in, "camera"));
      if (w.size() != 17) throw DatasetError("camera line needs 17 fields");
      Camera c;
      c.fx = parse_hex_double(w[1]);
      c.fy = parse_hex_double(w[2]);
      c.cx = parse_hex_double(w[3]);
      c.cy = parse_hex_double(w[4]);
      for (int r = 0; r < 3; ++r)
        for (int k = 0; k < 3; ++k) c.R(r, k) = parse_hex_double(w[static_cast<std::size_t>(5 + 3 * r + k)]);
      for (int k = 0; k < 3; ++k) c.t(k) = parse_hex_double(w[static_cast<std::size_t>(14 + k)]);
      d.rig.cameras.push_back(c);
      d.rig.view_ids.push_back(std::stoi(w[0]));
    }
    const auto par = words(expect_line(in, "parents"));
    if (par.size() != kHandJoints) throw DatasetError("parents line needs 21 entries");
    for (std::size_t j = 0; j < kHandJoints; ++j) d.skeleton.parents[j] = std::stoi(par[j]);
    for (std::size_t j = 0; j < kHandJoints; ++j) {
      const auto w = words(expect_line(in, "bone"));
      if (w.size() != 4 || parse_u64(w[0]) != j) throw DatasetError("bad bone line for joint " + std::to_string(j));
      d.skeleton.bones[j] = Eigen::Vector3d(parse_hex_double(w[1]), parse_hex_double(w[2]), parse_hex_double(w[3]));
    }
    const auto pw = words(expect_line(in, "profile"));
    if (pw.size() != 9) throw DatasetError("profile line needs 9 fields");
    CorruptionProfile& p = d.profile;
    p.name = pw[0];
    double* fields[] = {&p.sigma,       &p.outlier_prob,        &p.outlier_mag,    &p.occlusion_prob,
                        &p.occlusion_inflation, &p.occlusion_conf, &p.conf_scale, &p.conf_noise};
    for (std::size_t i = 0; i < 8; ++i) *fields[i] = parse_hex_double(pw[i + 1]);
    const std::size_t ns = parse_u64(expect_line(in, "sequences"));
    std::vector<std::size_t> frames;
    for (std::size_t i = 0; i < ns; ++i) {
      const auto w = words(expect_line(in, "sequence"));
      if (w.size() != 3) throw DatasetError("sequence line needs 3 fields");
      Sequence s;
      s.id = parse_u64(w[0]);
      s.seed = parse_u64(w[1]);
      frames.push_back(parse_u64(w[2]));
      d.sequences.push_back(std::move(s));
    }
    expect_line(in, "data");

    Reader r(raw + data_pos + 6, body - data_pos - 6);
    for (std::size_t i = 0; i < ns; ++i) {
      Sequence& s = d.sequences[i];
      const std::size_t t = frames[i];
      s.params = r.array({t, kSkeletonParams});
      s.gt3d = r.array({t, kHandJoints, 3});
      s.gt2d = r.array({t, nv, kHandJoints, 2});
      s.pseudo = r.array({t, nv, kHandJoints, 2});
      s.conf = r.array({t, nv, kHandJoints});
    }
    if (r.remaining() != 0) throw DatasetError("dataset has trailing bytes after the last block");
  } catch (const std::invalid_argument& e) {
    throw DatasetError(std::string("malformed dataset header: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw DatasetError(std::string("malformed dataset header: ") + e.what());
  }
  d.skeleton.validate();
  d.profile.validate();
  return d;
}

void write_dataset(const Dataset& d, const std::filesystem::path& path) {
  const std::string bytes = encode_dataset(d);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DatasetError("failed writing '" + path.string() + "'");
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open dataset '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_dataset(ss.str());
}

}  // namespace mvh
