#pragma once

// Versioned binary checkpoint: model structure (mode, registry, schema,
// architecture) followed by every parameter and Adagrad accumulator, doubles
// stored little-endian in a fixed order, the whole payload guarded by an
// FNV-1a checksum. Writes are atomic (temp file + rename); a load rebuilds
// the model and must reproduce its predictions bitwise.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mmn/errors.hpp"
#include "mmn/model.hpp"

namespace mmn {
namespace ckpt {

inline constexpr char kMagic[8] = {'M', 'M', 'N', 'C', 'K', 'P', 'T', '\x01'};
inline constexpr std::uint32_t kVersion = 1;

inline void put_u8(std::string& out, std::uint8_t v) {
  out.push_back(static_cast<char>(v));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline void put_string(std::string& out, const std::string& s) {
  put_u64(out, s.size());
  out += s;
}

inline void put_matrix(std::string& out, const Matrix& m) {
  for (double v : m.data) put_f64(out, v);
}

inline void put_param_set(std::string& out, const ParamSet& p) {
  for (const auto& layer : p.layers) {
    put_matrix(out, layer.w);
    put_matrix(out, layer.b);
  }
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw IntegrityError("checkpoint truncated");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes[pos++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[pos++])) << (8 * i);
    }
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes[pos++])) << (8 * i);
    }
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
  void matrix(Matrix& m) {
    for (double& v : m.data) v = f64();
  }
  void param_set(ParamSet& p) {
    for (auto& layer : p.layers) {
      matrix(layer.w);
      matrix(layer.b);
    }
  }
};

}  // namespace ckpt

inline void save_checkpoint(const MmnModel& model, const std::filesystem::path& path) {
  std::string out;
  out.append(ckpt::kMagic, sizeof(ckpt::kMagic));
  ckpt::put_u32(out, ckpt::kVersion);
  const ModelConfig& cfg = model.config();
  ckpt::put_u8(out, static_cast<std::uint8_t>(cfg.mode));
  ckpt::put_u8(out, cfg.include_domain_features ? 1 : 0);
  ckpt::put_u8(out, cfg.ctr_tower ? 1 : 0);
  ckpt::put_u8(out, 0);
  ckpt::put_u64(out, cfg.num_slots);
  ckpt::put_u64(out, cfg.embedding_dim);
  ckpt::put_f64(out, cfg.init_range);

  const Schema& schema = model.schema();
  ckpt::put_u64(out, schema.field_count());
  for (const auto& f : schema.fields) ckpt::put_string(out, f);

  const DomainRegistry& reg = model.registry();
  ckpt::put_u64(out, reg.types().size());
  for (const auto& t : reg.types()) ckpt::put_string(out, t);
  ckpt::put_u64(out, reg.scenarios().size());
  for (const auto& s : reg.scenarios()) ckpt::put_string(out, s);

  ckpt::put_u64(out, cfg.hidden_units.size());
  for (std::size_t u : cfg.hidden_units) ckpt::put_u64(out, u);

  ckpt::put_matrix(out, model.embedding().weights);
  ckpt::put_matrix(out, model.embedding().accum);
  if (cfg.ctr_tower) {
    ckpt::put_param_set(out, model.ctr_params());
    ckpt::put_param_set(out, model.ctr_accum());
  }
  ckpt::put_param_set(out, model.base_params());
  ckpt::put_param_set(out, model.base_accum());
  if (model.is_multi_tower()) {
    for (std::size_t i = 0; i < model.type_sets().size(); ++i) {
      ckpt::put_param_set(out, model.type_sets()[i]);
      ckpt::put_param_set(out, model.type_accums()[i]);
    }
    for (std::size_t j = 0; j < model.scenario_sets().size(); ++j) {
      ckpt::put_param_set(out, model.scenario_sets()[j]);
      ckpt::put_param_set(out, model.scenario_accums()[j]);
    }
  }
  ckpt::put_u64(out, fnv1a64(out));

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint: " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline MmnModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());

  if (bytes.size() < sizeof(ckpt::kMagic) + 12) {
    throw IntegrityError("checkpoint truncated");
  }
  if (bytes.compare(0, sizeof(ckpt::kMagic), ckpt::kMagic, sizeof(ckpt::kMagic)) != 0) {
    throw IntegrityError("not a checkpoint file: " + path.string());
  }
  // Checksum covers everything before the trailing 8 bytes.
  {
    const std::string payload = bytes.substr(0, bytes.size() - 8);
    ckpt::Reader tail{bytes, bytes.size() - 8};
    if (tail.u64() != fnv1a64(payload)) {
      throw IntegrityError("checkpoint checksum mismatch: " + path.string());
    }
  }

  ckpt::Reader r{bytes, sizeof(ckpt::kMagic)};
  if (r.u32() != ckpt::kVersion) throw IntegrityError("unsupported checkpoint version");

  ModelConfig cfg;
  const std::uint8_t mode_raw = r.u8();
  if (mode_raw > static_cast<std::uint8_t>(ModelMode::dnn)) {
    throw IntegrityError("checkpoint holds an unknown mode");
  }
  cfg.mode = static_cast<ModelMode>(mode_raw);
  cfg.include_domain_features = r.u8() != 0;
  cfg.ctr_tower = r.u8() != 0;
  r.u8();
  cfg.num_slots = r.u64();
  cfg.embedding_dim = r.u64();
  cfg.init_range = r.f64();

  Schema schema;
  const std::uint64_t nf = r.u64();
  for (std::uint64_t i = 0; i < nf; ++i) schema.fields.push_back(r.str());

  std::vector<std::string> types, scenarios;
  const std::uint64_t nt = r.u64();
  for (std::uint64_t i = 0; i < nt; ++i) types.push_back(r.str());
  const std::uint64_t ns = r.u64();
  for (std::uint64_t i = 0; i < ns; ++i) scenarios.push_back(r.str());

  cfg.hidden_units.clear();
  const std::uint64_t nh = r.u64();
  for (std::uint64_t i = 0; i < nh; ++i) cfg.hidden_units.push_back(r.u64());

  MmnModel model(DomainRegistry(std::move(types), std::move(scenarios)),
                 std::move(schema), cfg, /*seed=*/0);

  r.matrix(model.embedding().weights);
  r.matrix(model.embedding().accum);
  if (cfg.ctr_tower) {
    r.param_set(model.ctr_params());
    r.param_set(model.ctr_accum());
  }
  r.param_set(model.base_params());
  r.param_set(model.base_accum());
  if (model.is_multi_tower()) {
    for (std::size_t i = 0; i < model.type_sets().size(); ++i) {
      r.param_set(model.type_sets()[i]);
      r.param_set(model.type_accums()[i]);
    }
    for (std::size_t j = 0; j < model.scenario_sets().size(); ++j) {
      r.param_set(model.scenario_sets()[j]);
      r.param_set(model.scenario_accums()[j]);
    }
  }
  if (r.pos != bytes.size() - 8) {
    throw IntegrityError("checkpoint has trailing or missing bytes");
  }
  return model;
}

}  // namespace mmn
