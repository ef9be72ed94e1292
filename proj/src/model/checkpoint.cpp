#include "creat/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "creat/common.hpp"

namespace creat::model {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw InputError("checkpoint truncated while reading " + what);
  }
  return value;
}

std::string read_string(std::istream& in, std::size_t length, const std::string& what) {
  std::string s(length, '\0');
  if (length > 0 && !in.read(s.data(), static_cast<std::streamsize>(length))) {
    throw InputError("checkpoint truncated while reading " + what);
  }
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open checkpoint for writing: " + path.string());
  out.write(kCheckpointMagic, 6);
  const std::string config = nlohmann::json(params.config).dump();
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  for (const auto& t : params.all()) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.name().size()));
    out.write(t.name().data(), static_cast<std::streamsize>(t.name().size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path,
                            const std::optional<ModelConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint: " + path.string());
  if (read_string(in, 6, "magic") != std::string(kCheckpointMagic, 6)) {
    throw InputError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto config_length = read_pod<std::uint32_t>(in, "config length");
  ModelConfig stored;
  try {
    stored = nlohmann::json::parse(read_string(in, config_length, "config"))
                 .get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError("checkpoint config is invalid: " + std::string(e.what()));
  }
  const ModelConfig config = expected.value_or(stored);
  config.validate();

  // Template with the right names and shapes; values are overwritten below.
  ModelParams params = init_params(config, 0);
  std::map<std::string, ad::Tensor> slots;
  for (auto& t : params.all()) slots.emplace(t.name(), t);

  std::map<std::string, bool> seen;
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto name_length = read_pod<std::uint32_t>(in, "tensor name length");
    const std::string name = read_string(in, name_length, "tensor name");
    const auto rank = read_pod<std::uint32_t>(in, "rank of " + name);
    ad::Shape shape(rank);
    for (auto& d : shape) d = read_pod<std::uint64_t>(in, "dims of " + name);
    auto it = slots.find(name);
    if (it == slots.end()) {
      throw ConfigError("checkpoint tensor '" + name + "' is not part of the model config");
    }
    if (it->second.shape() != shape) {
      throw ConfigError("checkpoint tensor '" + name + "' has shape " + ad::shape_str(shape) +
                        " but the config expects " + ad::shape_str(it->second.shape()));
    }
    auto values = it->second.mutable_data();
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw InputError("checkpoint truncated while reading values of " + name);
    }
    seen[name] = true;
  }
  for (const auto& [name, tensor] : slots) {
    if (!seen.contains(name)) {
      throw ConfigError("checkpoint is missing tensor '" + name + "'");
    }
  }
  return params;
}

}  // namespace creat::model
