#include "latent_depth/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "latent_depth/errors.hpp"

namespace latent_depth {

namespace {

constexpr char kMagic[8] = {'L', 'D', 'E', 'P', 'T', 'H', 'C', 'K'};

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
}

template <typename U>
U get_le(std::string_view bytes, std::size_t offset) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return value;
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw IoError(std::string("checkpoint truncated while reading ") + what);
    }
  }
  template <typename U>
  U read(const char* what) {
    need(sizeof(U), what);
    U v = get_le<U>(bytes_, pos_);
    pos_ += sizeof(U);
    return v;
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    std::string_view v = bytes_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

nlohmann::json config_to_json(const NetworkConfig& c) {
  return {{"input_channels", c.input_channels}, {"output_channels", c.output_channels},
          {"base_width", c.base_width},         {"bottleneck_blocks", c.bottleneck_blocks},
          {"input_h", c.input_h},               {"input_w", c.input_w}};
}

NetworkConfig config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  try {
    c.input_channels = j.at("input_channels").get<std::size_t>();
    c.output_channels = j.at("output_channels").get<std::size_t>();
    c.base_width = j.at("base_width").get<std::size_t>();
    c.bottleneck_blocks = j.at("bottleneck_blocks").get<std::size_t>();
    c.input_h = j.at("input_h").get<std::size_t>();
    c.input_w = j.at("input_w").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("network config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string serialize_checkpoint(const DepthModel& model, const nlohmann::json& metadata) {
  nlohmann::json table = nlohmann::json::array();
  model.for_each_tensor([&](const std::string& name, const Tensor& t, TensorRole role) {
    table.push_back({{"name", name},
                     {"shape", t.shape()},
                     {"role", role == TensorRole::kParameter ? "parameter" : "buffer"}});
  });
  nlohmann::json header = {{"format", "latent_depth.checkpoint"},
                           {"config", config_to_json(model.config())},
                           {"frozen", model.frozen()},
                           {"metadata", metadata},
                           {"tensors", table}};
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, 0);
  put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  model.for_each_tensor([&](const std::string&, const Tensor& t, TensorRole) {
    for (Real v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  });
  put_le<std::uint64_t>(out, fnv1a(out));
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 24) throw IoError("checkpoint truncated");
  const std::size_t payload_end = bytes.size() - sizeof(std::uint64_t);
  if (get_le<std::uint64_t>(bytes, payload_end) !=
      fnv1a(std::string_view(bytes).substr(0, payload_end))) {
    throw IoError("checkpoint: checksum mismatch, file is corrupt or truncated");
  }
  Reader r(std::string_view(bytes).substr(0, payload_end));
  if (r.take(sizeof(kMagic), "magic") != std::string_view(kMagic, sizeof(kMagic))) {
    throw IoError("checkpoint: bad magic, not a latent_depth checkpoint");
  }
  const auto version = r.read<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  }
  r.read<std::uint32_t>("reserved");
  const auto header_len = r.read<std::uint64_t>("header length");
  if (header_len > bytes.size()) throw IoError("checkpoint truncated while reading header");
  const std::string_view header_text = r.take(header_len, "header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (!header.is_object() || !header.contains("config") || !header.contains("tensors")) {
    throw IoError("checkpoint: header lacks config or tensor table");
  }
  Checkpoint ck{DepthModel(config_from_json(header["config"]), 0),
                header.value("metadata", nlohmann::json::object())};

  const auto& table = header["tensors"];
  std::size_t index = 0;
  ck.model.for_each_tensor([&](const std::string& name, Tensor& t, TensorRole) {
    if (!table.is_array() || index >= table.size()) {
      throw IoError("checkpoint: tensor table shorter than the model");
    }
    const auto& entry = table[index++];
    if (entry.value("name", "") != name || entry.value("shape", Shape{}) != t.shape()) {
      throw IoError("checkpoint: tensor table entry " + std::to_string(index - 1) +
                    " does not match model tensor " + name);
    }
    for (Real& v : t.mutable_data()) v = std::bit_cast<Real>(r.read<std::uint64_t>("tensor data"));
  });
  if (index != table.size()) throw IoError("checkpoint: tensor table longer than the model");

  if (r.pos() != payload_end) throw IoError("checkpoint: payload size does not match the model");
  if (header.value("frozen", false)) ck.model.freeze();
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const DepthModel& model,
                     const nlohmann::json& metadata) {
  const std::string bytes = serialize_checkpoint(model, metadata);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize_checkpoint(ss.str());
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace latent_depth
