#include "atomicl/icl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

namespace atomicl::icl {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"layers", c.layers},     {"embed_dim", c.embed_dim}, {"heads", c.heads},
          {"ffn_dim", c.ffn_dim},   {"max_pairs", c.max_pairs}, {"positional", c.positional},
          {"users", c.users},       {"antennas", c.antennas},   {"token_dim", c.token_dim()}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.max_pairs = j.at("max_pairs").get<std::size_t>();
  c.positional = j.at("positional").get<bool>();
  c.users = j.at("users").get<std::size_t>();
  c.antennas = j.at("antennas").get<std::size_t>();
  if (j.at("token_dim").get<std::size_t>() != c.token_dim())
    throw CheckpointError("checkpoint: token_dim disagrees with max(N, 2K)");
  return c;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json parse_header(const std::vector<std::uint8_t>& bytes, std::size_t& payload_start) {
  if (bytes.size() < 8) throw CheckpointError("checkpoint: truncated before header length");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), 8);
  if (len > bytes.size() - 8) throw CheckpointError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (!header.is_object() || header.value("format", "") != kCheckpointFormat)
    throw CheckpointError("checkpoint: not an atomicl checkpoint");
  if (header.value("format_version", -1) != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported format_version " +
                          header.value("format_version", nlohmann::json(-1)).dump() + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  payload_start = 8 + static_cast<std::size_t>(len);
  return header;
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const ModelParams<T>& params, const ModelConfig& cfg) {
  cfg.validate();
  params.check_shapes(cfg);
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.named()) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(t->value.size()) * sizeof(T);
    manifest.push_back({{"name", name},
                        {"shape", {t->value.rows(), t->value.cols()}},
                        {"dtype", dtype_name<T>()},
                        {"offset", offset},
                        {"nbytes", nbytes}});
    offset += nbytes;
  }
  const nlohmann::json header = {{"format", kCheckpointFormat},
                                 {"format_version", kCheckpointVersion},
                                 {"dtype", dtype_name<T>()},
                                 {"config", config_to_json(cfg)},
                                 {"arrays", manifest},
                                 {"payload_bytes", offset}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(8 + text.size() + offset);
  const std::uint64_t len = text.size();
  std::memcpy(out.data(), &len, 8);
  std::memcpy(out.data() + 8, text.data(), text.size());
  std::size_t pos = 8 + text.size();
  for (const auto& [name, t] : params.named()) {
    const std::size_t n = static_cast<std::size_t>(t->value.size()) * sizeof(T);
    std::memcpy(out.data() + pos, t->value.data(), n);
    pos += n;
  }
  return out;
}

template <typename T>
Checkpoint<T> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  std::size_t start = 0;
  const nlohmann::json header = parse_header(bytes, start);
  const std::string dtype = header.value("dtype", "");
  if (dtype != dtype_name<T>())
    throw CheckpointError("checkpoint: stored precision is " + dtype + " but " + dtype_name<T>() +
                          " was requested; cross-precision loads are not supported");
  Checkpoint<T> ck;
  try {
    ck.config = config_from_json(header.at("config"));
    ck.config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: bad config: ") + e.what());
  }

  // Shape template from the config, then fill from the manifest.
  Rng dummy(0);
  ck.params = ModelParams<T>::init(ck.config, dummy);
  auto named = ck.params.named();
  if (!header.contains("arrays")) throw CheckpointError("checkpoint: header has no array manifest");
  const auto& arrays = header["arrays"];
  if (!arrays.is_array() || arrays.size() != named.size())
    throw CheckpointError("checkpoint: manifest lists " + std::to_string(arrays.size()) + " arrays, config implies " +
                          std::to_string(named.size()));
  const std::size_t payload = bytes.size() - start;
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& entry = arrays[i];
    auto& [name, tensor] = named[i];
    try {
      if (entry.at("name").get<std::string>() != name)
        throw CheckpointError("checkpoint: array " + std::to_string(i) + " is " + entry.at("name").get<std::string>() +
                              ", expected " + name);
      if (entry.at("dtype").get<std::string>() != dtype_name<T>())
        throw CheckpointError("checkpoint: array " + name + " has dtype " + entry.at("dtype").get<std::string>());
      const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
      if (shape.size() != 2 || shape[0] != tensor->value.rows() || shape[1] != tensor->value.cols())
        throw CheckpointError("checkpoint: array " + name + " has shape " + entry.at("shape").dump() +
                              ", config implies [" + std::to_string(tensor->value.rows()) + "," +
                              std::to_string(tensor->value.cols()) + "]");
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (nbytes != static_cast<std::uint64_t>(tensor->value.size()) * sizeof(T))
        throw CheckpointError("checkpoint: array " + name + " byte length disagrees with its shape");
      if (offset > payload || nbytes > payload - offset)
        throw CheckpointError("checkpoint: truncated payload in array " + name);
      std::memcpy(tensor->value.data(), bytes.data() + start + offset, nbytes);
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError("checkpoint: bad manifest entry for " + name + ": " + e.what());
    }
  }
  return ck;
}

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const ModelConfig& cfg, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(params, cfg);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint<T>(read_file(path));
}

std::string checkpoint_dtype(const std::filesystem::path& path) {
  std::size_t start = 0;
  return parse_header(read_file(path), start).value("dtype", "");
}

template std::vector<std::uint8_t> serialize_checkpoint<float>(const ModelParams<float>&, const ModelConfig&);
template std::vector<std::uint8_t> serialize_checkpoint<double>(const ModelParams<double>&, const ModelConfig&);
template Checkpoint<float> deserialize_checkpoint<float>(const std::vector<std::uint8_t>&);
template Checkpoint<double> deserialize_checkpoint<double>(const std::vector<std::uint8_t>&);
template void save_checkpoint<float>(const ModelParams<float>&, const ModelConfig&, const std::filesystem::path&);
template void save_checkpoint<double>(const ModelParams<double>&, const ModelConfig&, const std::filesystem::path&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace atomicl::icl
