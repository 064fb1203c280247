#include "normfree/checkpoint.hpp"

#include "normfree/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace normfree {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("checkpoint: truncated header");
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, Index step) {
  nlohmann::json header;
  header["config"] = to_json(model.config());
  header["seed"] = model.config().seed;
  header["step"] = step;
  header["tensors"] = nlohmann::json::array();
  Index offset = 0;
  for (const auto& p : model.parameters().entries()) {
    header["tensors"].push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}});
    offset += p.value.numel();
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.parameters().entries()) {
    const auto d = p.value.data();
    out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, Checkpoint* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[sizeof kCheckpointMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  const std::uint64_t n = read_u64(in);
  std::string text(n, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(n))) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);

  Model model(model_config_from_json(header.at("config")));
  const auto data_start = in.tellg();
  std::size_t matched = 0;
  for (const auto& t : header.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    if (!model.parameters().contains(name)) throw std::runtime_error("checkpoint: unexpected tensor " + name);
    Tensor& p = model.parameters().get(name);
    if (t.at("shape").get<Shape>() != p.shape()) throw std::runtime_error("checkpoint: shape mismatch for " + name);
    in.seekg(data_start + static_cast<std::streamoff>(t.at("offset").get<Index>() * Index(sizeof(Scalar))));
    auto d = p.data();
    if (!in.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()))) {
      throw std::runtime_error("checkpoint: truncated data for " + name);
    }
    ++matched;
  }
  if (matched != model.parameters().size()) throw std::runtime_error("checkpoint: missing parameters");
  if (meta) {
    meta->config = model.config();
    meta->seed = header.at("seed").get<std::uint64_t>();
    meta->step = header.at("step").get<Index>();
  }
  return model;
}

}  // namespace normfree
