#pragma once

// Feature hashing and the shared embedding table. Each categorical
// (field, value) pair is hashed into a fixed-size slot table; the input to a
// tower is the concatenation of the looked-up embedding rows in schema order.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmn/errors.hpp"
#include "mmn/tensor.hpp"

namespace mmn {

// Ordered field names of the log format. Conversion type and display
// scenario are carried separately on each record; they are only hashed as
// regular features when a model explicitly asks for that.
struct Schema {
  std::vector<std::string> fields;

  std::size_t field_count() const { return fields.size(); }
};

// One impression with its click/conversion labels and resolved domain ids.
// Field values are stored in schema order; the names live in the Schema.
struct FeatureVector {
  std::vector<std::string> values;
  int type_id = 0;
  int scenario_id = 0;
  std::uint8_t click = 0;       // y
  std::uint8_t conversion = 0;  // z, implies click
};

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Slot index for a (field, value) pair: FNV-1a 64 over "field=value",
// reduced modulo the table size. Stable across runs and platforms.
inline std::size_t hash_feature(std::string_view field, std::string_view value,
                                std::size_t num_slots) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : field) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  h ^= static_cast<unsigned char>('=');
  h *= 1099511628211ULL;
  for (unsigned char c : value) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return static_cast<std::size_t>(h % static_cast<std::uint64_t>(num_slots));
}

struct EmbeddingTable {
  std::size_t num_slots = 0;
  std::size_t dim = 0;
  Matrix weights;  // num_slots x dim
  Matrix accum;    // adagrad accumulators, same shape

  EmbeddingTable() = default;
  EmbeddingTable(std::size_t slots, std::size_t d)
      : num_slots(slots), dim(d), weights(slots, d), accum(slots, d) {}

  // Uniform init in [-range, range]; draw order is row-major.
  void init_uniform(RngState& rng, double range = 0.05) {
    for (double& w : weights.data) w = rng.uniform(-range, range);
  }
};

// Concatenated embedding of the schema fields of one instance, written into
// out (length field_count * dim).
inline void embed_into(const FeatureVector& instance, const Schema& schema,
                       const EmbeddingTable& table, std::span<double> out) {
  const std::size_t f_count = schema.field_count();
  for (std::size_t f = 0; f < f_count; ++f) {
    const std::size_t slot =
        hash_feature(schema.fields[f], instance.values[f], table.num_slots);
    const auto row = table.weights.row(slot);
    for (std::size_t d = 0; d < table.dim; ++d) out[f * table.dim + d] = row[d];
  }
}

inline std::vector<double> embed(const FeatureVector& instance, const Schema& schema,
                                 const EmbeddingTable& table) {
  std::vector<double> out(schema.field_count() * table.dim);
  embed_into(instance, schema, table, out);
  return out;
}

}  // namespace mmn
