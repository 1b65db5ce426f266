#include "gisp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "gisp/error.hpp"

namespace gisp {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  template <class T>
  void put(T v) {
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    bytes.insert(bytes.end(), buf, buf + sizeof(T));
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  template <class T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw UsageError("checkpoint truncated at byte " + std::to_string(pos_));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const TransformerWeights& weights, const ModelConfig& config) {
  config.validate();
  Writer w;
  for (char c : kCheckpointMagic) w.put(c);
  w.put(kCheckpointVersion);
  for (int v : {config.n_layers, config.n_heads, config.d_model, config.d_head, config.d_ff, config.vocab_size,
                config.max_seq_len}) {
    w.put(static_cast<std::int32_t>(v));
  }
  w.put(static_cast<std::uint64_t>(config.rng_seed));
  const bool per_layer = !config.uniform();
  w.put(static_cast<std::uint32_t>(per_layer ? 1 : 0));
  if (per_layer) {
    for (int l = 0; l < config.n_layers; ++l) {
      w.put(static_cast<std::int32_t>(config.heads_in(l)));
      w.put(static_cast<std::int32_t>(config.ff_in(l)));
    }
  }
  w.put(static_cast<std::uint64_t>(weights.param_count()));
  w.bytes.reserve(w.bytes.size() + weights.param_count() * sizeof(double));
  weights.for_each([&](const std::string&, const Tensor& t) {
    for (double v : t.data()) w.put(v);
  });
  return std::move(w.bytes);
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  for (char& c : magic) c = r.get<char>();
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw UsageError("not a GISP checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw UsageError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  auto& c = ck.config;
  c.n_layers = r.get<std::int32_t>();
  c.n_heads = r.get<std::int32_t>();
  c.d_model = r.get<std::int32_t>();
  c.d_head = r.get<std::int32_t>();
  c.d_ff = r.get<std::int32_t>();
  c.vocab_size = r.get<std::int32_t>();
  c.max_seq_len = r.get<std::int32_t>();
  c.rng_seed = r.get<std::uint64_t>();
  if (c.n_layers < 1 || c.n_layers > 4096) throw UsageError("checkpoint has implausible layer count");
  if (r.get<std::uint32_t>() != 0) {
    for (int l = 0; l < c.n_layers; ++l) {
      c.layer_heads.push_back(r.get<std::int32_t>());
      c.layer_ff.push_back(r.get<std::int32_t>());
    }
  }
  c.validate();
  const auto count = r.get<std::uint64_t>();
  // Zero tensors of the right shapes, filled below in checkpoint order.
  TransformerWeights w;
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  w.tok_emb = Tensor(Shape{v, d});
  w.pos_emb = Tensor(Shape{static_cast<std::size_t>(c.max_seq_len), d});
  for (int l = 0; l < c.n_layers; ++l) {
    const auto hw = static_cast<std::size_t>(c.heads_in(l) * c.d_head);
    const auto ff = static_cast<std::size_t>(c.ff_in(l));
    w.layers.push_back(LayerWeights{Tensor(Shape{d}, 1.0), Tensor(Shape{hw, d}), Tensor(Shape{hw, d}),
                                    Tensor(Shape{hw, d}), Tensor(Shape{d, hw}), Tensor(Shape{d}, 1.0),
                                    Tensor(Shape{ff, d}), Tensor(Shape{ff, d}), Tensor(Shape{d, ff})});
  }
  w.final_norm = Tensor(Shape{d});
  w.lm_head = Tensor(Shape{v, d});
  if (count != w.param_count()) throw UsageError("checkpoint parameter count does not match its config");
  if (r.remaining() != count * sizeof(double)) throw UsageError("checkpoint payload size mismatch");
  w.for_each([&](const std::string&, Tensor& t) {
    for (auto& x : t.data()) x = r.get<double>();
  });
  ck.weights = std::move(w);
  return ck;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(contents.data()), static_cast<std::streamsize>(contents.size()));
    if (!out) throw UsageError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  write_file_atomic(path, std::vector<std::uint8_t>(contents.begin(), contents.end()));
}

void save_checkpoint(const std::filesystem::path& path, const TransformerWeights& weights,
                     const ModelConfig& config) {
  write_file_atomic(path, serialize_checkpoint(weights, config));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file_bytes(path)); }

std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t model_fingerprint(const TransformerWeights& weights, const ModelConfig& config) {
  return fnv1a64(serialize_checkpoint(weights, config));
}

std::string fingerprint_hex(std::uint64_t fp) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fp;
  return os.str();
}

std::uint64_t parse_fingerprint_hex(const std::string& text) {
  if (text.size() != 16 || text.find_first_not_of("0123456789abcdef") != std::string::npos) {
    throw UsageError("malformed fingerprint: " + text);
  }
  return std::stoull(text, nullptr, 16);
}

}  // namespace gisp
