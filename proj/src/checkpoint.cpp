#include <cstring>
#include <fstream>
#include <sstream>

#include "mvh/trainer.hpp"

namespace mvh {

namespace {

constexpr int kCheckpointVersion = 1;

std::string next_line(const std::string& bytes, std::size_t& pos) {
  const auto nl = bytes.find('\n', pos);
  if (nl == std::string::npos) throw CheckpointError("checkpoint header truncated");
  std::string line = bytes.substr(pos, nl - pos);
  pos = nl + 1;
  return line;
}

std::vector<std::string> words(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> w;
  for (std::string s; in >> s;) w.push_back(s);
  return w;
}

std::vector<std::string> expect(const std::string& line, const std::string& key, std::size_t min_fields) {
  auto w = words(line);
  if (w.empty() || w[0] != key || w.size() < min_fields + 1)
    throw CheckpointError("checkpoint: expected '" + key + "', got '" + line + "'");
  return w;
}

std::uint64_t as_u64(const std::string& s) {
  std::size_t used = 0;
  const auto v = std::stoull(s, &used);
  if (used != s.size()) throw CheckpointError("checkpoint: bad integer '" + s + "'");
  return v;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  std::string out = "MVHCKPT " + std::to_string(kCheckpointVersion) + "\n";
  out += "step " + std::to_string(c.step) + "\n";
  out += "adam " + std::to_string(c.store.step_count()) + "\n";
  const std::string cfg = config_text(c.config);
  std::size_t lines = 0;
  for (char ch : cfg) lines += ch == '\n';
  out += "config " + std::to_string(lines) + "\n" + cfg;
  out += "params " + std::to_string(c.store.entries().size()) + "\n";
  for (const auto& [name, e] : c.store.entries()) {
    out += "param " + name + " " + std::to_string(e.value.rank());
    for (std::size_t d : e.value.shape()) out += " " + std::to_string(d);
    out += "\n";
  }
  out += "data\n";
  for (const auto& [name, e] : c.store.entries())
    for (const Array* a : {&e.value, &e.m, &e.v})
      for (double x : a->values()) put_f64_le(out, x);
  put_u32_le(out, crc32_of(out.data(), out.size()));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4) throw CheckpointError("checkpoint truncated");
  const std::size_t body = bytes.size() - 4;
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (crc32_of(bytes.data(), body) != get_u32_le(raw + body)) throw CheckpointError("checkpoint checksum mismatch");
  try {
    std::size_t pos = 0;
    const auto magic = expect(next_line(bytes, pos), "MVHCKPT", 1);
    if (magic[1] != std::to_string(kCheckpointVersion))
      throw CheckpointError("unsupported checkpoint version " + magic[1]);
    Checkpoint c;
    c.step = as_u64(expect(next_line(bytes, pos), "step", 1)[1]);
    const std::uint64_t adam = as_u64(expect(next_line(bytes, pos), "adam", 1)[1]);
    const std::uint64_t lines = as_u64(expect(next_line(bytes, pos), "config", 1)[1]);
    std::string cfg;
    for (std::uint64_t i = 0; i < lines; ++i) cfg += next_line(bytes, pos) + "\n";
    c.config = TrainConfig{};
    apply_config(c.config, cfg);
    const std::uint64_t np = as_u64(expect(next_line(bytes, pos), "params", 1)[1]);
    std::vector<std::pair<std::string, Shape>> specs;
    for (std::uint64_t i = 0; i < np; ++i) {
      const auto w = expect(next_line(bytes, pos), "param", 2);
      const std::uint64_t rank = as_u64(w[2]);
      if (w.size() != 3 + rank) throw CheckpointError("checkpoint: bad param line for " + w[1]);
      Shape s;
      for (std::uint64_t k = 0; k < rank; ++k) s.push_back(as_u64(w[3 + k]));
      specs.emplace_back(w[1], s);
    }
    if (next_line(bytes, pos) != "data") throw CheckpointError("checkpoint: missing data marker");
    for (const auto& [name, shape] : specs) {
      Array value(shape);
      c.store.add(name, value);
      auto& e = c.store.entry(name);
      for (Array* a : {&e.value, &e.m, &e.v}) {
        if (pos + 8 * a->size() > body) throw CheckpointError("checkpoint data truncated");
        for (double& x : a->values()) {
          x = get_f64_le(raw + pos);
          pos += 8;
        }
      }
    }
    if (pos != body) throw CheckpointError("checkpoint has trailing bytes");
    c.store.set_step_count(adam);
    return c;
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw CheckpointError("checkpoint header malformed");
  } catch (const std::out_of_range&) {
    throw CheckpointError("checkpoint header malformed");
  }
}

void write_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(c);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace mvh
