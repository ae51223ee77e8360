// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spt/adapter.hpp"
#include "spt/errors.hpp"
#include "spt/hash.hpp"
#include "spt/model.hpp"

namespace spt {

// Container layout: "SPTC" magic, u32 version, u32 metadata length, JSON
// metadata (kind, arch, vocab hash, tensor manifest with names/shapes/offsets),
// then raw little-endian f32 tensor data in manifest order.
namespace ckpt {

inline constexpr char kMagic[4] = {'S', 'P', 'T', 'C'};
inline constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

template <class Visitable>
inline std::string serialize(const Visitable& obj, nlohmann::json meta) {
  nlohmann::json manifest = nlohmann::json::array();
  std::string payload;
  std::uint64_t offset = 0;
  obj.for_each_tensor([&](const std::string& name, const Matrix<float>& m) {
    manifest.push_back({{"name", name}, {"rows", m.rows}, {"cols", m.cols}, {"offset", offset}});
    const std::size_t bytes = m.data.size() * sizeof(float);
    const std::size_t pos = payload.size();
    payload.resize(pos + bytes);
    std::memcpy(payload.data() + pos, m.data.data(), bytes);
    offset += bytes;
  });
  meta["tensors"] = std::move(manifest);
  const std::string meta_str = meta.dump();
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(meta_str.size()));
  out += meta_str;
  out += payload;
  return out;
}

inline nlohmann::json parse_header(const std::string& bytes, std::size_t& data_off) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    fail(Errc::IoError, "not an SPTC container");
  if (get_u32(bytes, 4) != kVersion) fail(Errc::IoError, "unsupported SPTC version");
  const std::uint32_t meta_len = get_u32(bytes, 8);
  if (bytes.size() < 12 + meta_len) fail(Errc::IoError, "truncated SPTC metadata");
  nlohmann::json meta = nlohmann::json::parse(bytes.substr(12, meta_len));
  data_off = 12 + meta_len;
  return meta;
}

template <class Visitable>
inline void deserialize_tensors(const std::string& bytes, std::size_t data_off,
                                const nlohmann::json& meta, Visitable& obj) {
  std::map<std::string, const nlohmann::json*> by_name;
  for (const auto& t : meta.at("tensors")) by_name[t.at("name").get<std::string>()] = &t;
  obj.for_each_tensor([&](const std::string& name, Matrix<float>& m) {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail(Errc::IoError, "missing tensor " + name);
    const auto& t = *it->second;
    const int rows = t.at("rows").get<int>();
    const int cols = t.at("cols").get<int>();
    m = Matrix<float>(rows, cols);
    const std::size_t off = data_off + t.at("offset").get<std::uint64_t>();
    const std::size_t bytes_n = m.data.size() * sizeof(float);
    if (off + bytes_n > bytes.size()) fail(Errc::IoError, "truncated tensor " + name);
    std::memcpy(m.data.data(), bytes.data() + off, bytes_n);
  });
}

}  // namespace ckpt

inline std::string model_bytes(const ModelParamsF& p) {
  nlohmann::json meta{{"kind", "model"},
                      {"arch",
                       {{"layers", p.arch.layers},
                        {"dim", p.arch.dim},
                        {"heads", p.arch.heads},
                        {"ff", p.arch.ff},
                        {"max_seq", p.arch.max_seq},
                        {"vocab", p.arch.vocab}}},
                      {"rng_seed", p.rng_seed},
                      {"vocab_hash", p.vocab_hash},
                      {"reserved_dims", p.reserved_dims}};
  return ckpt::serialize(p, std::move(meta));
}

inline ModelParamsF model_from_bytes(const std::string& bytes) {
  std::size_t off = 0;
  nlohmann::json meta = ckpt::parse_header(bytes, off);
  if (meta.at("kind") != "model") fail(Errc::IoError, "container is not a model checkpoint");
  ModelParamsF p;
  const auto& a = meta.at("arch");
  p.arch = Arch{a.at("layers"), a.at("dim"), a.at("heads"),
                a.at("ff"),     a.at("max_seq"), a.at("vocab")};
  p.rng_seed = meta.at("rng_seed").get<std::uint64_t>();
  p.vocab_hash = meta.at("vocab_hash").get<std::string>();
  p.reserved_dims = meta.at("reserved_dims").get<std::vector<int>>();
  p.layers.resize(static_cast<std::size_t>(p.arch.layers));
  ckpt::deserialize_tensors(bytes, off, meta, p);
  return p;
}

inline std::string adapter_bytes(const LoraAdapter<float>& ad) {
  nlohmann::json meta{{"kind", "adapter"}, {"rank", ad.rank}, {"alpha", ad.alpha}};
  return ckpt::serialize(ad, std::move(meta));
}

inline LoraAdapter<float> adapter_from_bytes(const std::string& bytes) {
  std::size_t off = 0;
  nlohmann::json meta = ckpt::parse_header(bytes, off);
  if (meta.at("kind") != "adapter") fail(Errc::IoError, "container is not an adapter checkpoint");
  LoraAdapter<float> ad;
  ad.rank = meta.at("rank").get<int>();
  ad.alpha = meta.at("alpha").get<float>();
  for (const auto& t : meta.at("tensors")) {
    std::string name = t.at("name").get<std::string>();
    const bool is_a = name.size() > 2 && name.substr(name.size() - 2) == ".A";
    const bool is_b = name.size() > 2 && name.substr(name.size() - 2) == ".B";
    if (!is_a && !is_b) fail(Errc::IoError, "unexpected adapter tensor " + name);
    ad.targets[name.substr(0, name.size() - 2)];  // ensure target exists
  }
  ckpt::deserialize_tensors(bytes, off, meta, ad);
  return ad;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Errc::IoError, "cannot open for write: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(Errc::IoError, "write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Errc::MissingArtifact, "cannot open: " + path);
  std::string out((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return out;
}

inline void save_model(const std::string& path, const ModelParamsF& p) {
  write_file(path, model_bytes(p));
}
inline ModelParamsF load_model(const std::string& path) { return model_from_bytes(read_file(path)); }
inline void save_adapter(const std::string& path, const LoraAdapter<float>& ad) {
  write_file(path, adapter_bytes(ad));
}
inline LoraAdapter<float> load_adapter(const std::string& path) {
  return adapter_from_bytes(read_file(path));
}

inline std::string model_hash(const ModelParamsF& p) { return content_hash(model_bytes(p)); }
inline std::string adapter_hash(const LoraAdapter<float>& ad) {
  return content_hash(adapter_bytes(ad));
}

}  // namespace spt
