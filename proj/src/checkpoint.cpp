#include "rlcf/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>

namespace rlcf {

namespace fs = std::filesystem;

fs::path manifest_path(const fs::path& stem) { return fs::path(stem.string() + ".manifest.json"); }
fs::path blob_path(const fs::path& stem) { return fs::path(stem.string() + ".bin"); }

bool checkpoint_exists(const fs::path& stem) {
  return fs::exists(manifest_path(stem)) && fs::exists(blob_path(stem));
}

namespace {

void put_le(std::string& out, std::uint64_t bits, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(const std::string& in, std::size_t offset, int bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < bytes; ++i) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return bits;
}

const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

}  // namespace

void save_checkpoint(const fs::path& stem, const Checkpoint& ckpt, Dtype dtype) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  const int width = dtype == Dtype::f32 ? 4 : 8;
  std::string blob;
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : ckpt.params.blocks()) {
    blocks.push_back({{"name", b.name},
                      {"shape", {b.value.rows(), b.value.cols()}},
                      {"offset", blob.size()},
                      {"trainable", b.trainable}});
    for (double x : b.value.values()) {
      if (dtype == Dtype::f32) {
        put_le(blob, std::bit_cast<std::uint32_t>(static_cast<float>(x)), width);
      } else {
        put_le(blob, std::bit_cast<std::uint64_t>(x), width);
      }
    }
  }
  nlohmann::json manifest = {{"format", "rlcf-tensors"},
                             {"version", 1},
                             {"dtype", dtype_name(dtype)},
                             {"byte_order", "little"},
                             {"blob", blob_path(stem).filename().string()},
                             {"blob_bytes", blob.size()},
                             {"blocks", blocks},
                             {"meta", ckpt.meta}};
  std::ofstream mf(manifest_path(stem), std::ios::binary);
  if (!mf) throw Error("cannot write " + manifest_path(stem).string());
  mf << manifest.dump(2) << '\n';
  std::ofstream bf(blob_path(stem), std::ios::binary);
  if (!bf) throw Error("cannot write " + blob_path(stem).string());
  bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

Checkpoint load_checkpoint(const fs::path& stem) {
  const fs::path mpath = manifest_path(stem);
  std::ifstream mf(mpath);
  if (!mf) throw Error("checkpoint manifest not found: " + mpath.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed checkpoint manifest " + mpath.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "rlcf-tensors") {
    throw Error("not an rlcf tensor manifest: " + mpath.string());
  }
  const std::string dtype = manifest.at("dtype").get<std::string>();
  if (dtype != "f32" && dtype != "f64") throw Error("unsupported dtype " + dtype);
  const int width = dtype == "f32" ? 4 : 8;

  const fs::path bpath = stem.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream bf(bpath, std::ios::binary);
  if (!bf) throw Error("checkpoint blob not found: " + bpath.string());
  const std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  if (blob.size() != manifest.at("blob_bytes").get<std::size_t>()) {
    throw Error("checkpoint blob size mismatch: " + bpath.string());
  }

  Checkpoint ckpt;
  for (const auto& jb : manifest.at("blocks")) {
    const std::size_t rows = jb.at("shape")[0], cols = jb.at("shape")[1];
    const std::size_t offset = jb.at("offset");
    if (offset + rows * cols * width > blob.size()) throw Error("checkpoint block out of bounds");
    Tensor2 t(rows, cols);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::uint64_t bits = get_le(blob, offset + i * width, width);
      t[i] = width == 4 ? static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)))
                        : std::bit_cast<double>(bits);
    }
    ckpt.params.add(jb.at("name").get<std::string>(), std::move(t), jb.value("trainable", true));
  }
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  return ckpt;
}

void round_to_f32(ParamTree& params) {
  for (const auto& name : params.names()) {
    for (double& x : params.values(name)) x = static_cast<double>(static_cast<float>(x));
  }
}

}  // namespace rlcf
