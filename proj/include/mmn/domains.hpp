#pragma once

// Conversion-type / display-scenario registry, per-batch mask construction,
// and the dynamic loss weights. A domain is one (type, scenario) pair; masks
// partition every mini-batch across the nonempty domains.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmn/errors.hpp"

namespace mmn {

class DomainRegistry {
 public:
  DomainRegistry() = default;

  DomainRegistry(std::vector<std::string> types, std::vector<std::string> scenarios)
      : types_(std::move(types)), scenarios_(std::move(scenarios)) {
    if (types_.empty() || scenarios_.empty()) {
      throw DomainError("registry needs at least one type and one scenario");
    }
    for (std::size_t i = 0; i < types_.size(); ++i) {
      if (!type_ix_.emplace(types_[i], static_cast<int>(i)).second) {
        throw DomainError("duplicate conversion type code: " + types_[i]);
      }
    }
    for (std::size_t j = 0; j < scenarios_.size(); ++j) {
      if (!scen_ix_.emplace(scenarios_[j], static_cast<int>(j)).second) {
        throw DomainError("duplicate display scenario code: " + scenarios_[j]);
      }
    }
  }

  int num_types() const { return static_cast<int>(types_.size()); }
  int num_scenarios() const { return static_cast<int>(scenarios_.size()); }
  int num_domains() const { return num_types() * num_scenarios(); }

  // Flattened index of domain (i, j).
  int domain_index(int type_id, int scenario_id) const {
    return type_id * num_scenarios() + scenario_id;
  }
  int domain_type(int domain) const { return domain / num_scenarios(); }
  int domain_scenario(int domain) const { return domain % num_scenarios(); }

  int type_index(const std::string& code) const {
    auto it = type_ix_.find(code);
    if (it == type_ix_.end()) throw DomainError("unknown conversion type: " + code);
    return it->second;
  }
  int scenario_index(const std::string& code) const {
    auto it = scen_ix_.find(code);
    if (it == scen_ix_.end()) throw DomainError("unknown display scenario: " + code);
    return it->second;
  }

  bool has_type(const std::string& code) const { return type_ix_.count(code) != 0; }
  bool has_scenario(const std::string& code) const { return scen_ix_.count(code) != 0; }

  const std::string& type_code(int i) const { return types_.at(i); }
  const std::string& scenario_code(int j) const { return scenarios_.at(j); }
  const std::vector<std::string>& types() const { return types_; }
  const std::vector<std::string>& scenarios() const { return scenarios_; }

 private:
  std::vector<std::string> types_;
  std::vector<std::string> scenarios_;
  std::unordered_map<std::string, int> type_ix_;
  std::unordered_map<std::string, int> scen_ix_;
};

// Rows and 0/1 mask of one nonempty domain inside a batch.
struct DomainSlice {
  int domain = 0;
  int type_id = 0;
  int scenario_id = 0;
  std::vector<std::uint32_t> rows;  // batch positions, ascending
  std::vector<double> mask;         // length N, mask[n] == 1 iff n in rows

  std::size_t count() const { return rows.size(); }
};

// Masks of one mini-batch. Only nonempty domains are materialized; slices are
// ordered by ascending domain index so every consumer iterates the same way.
struct BatchMasks {
  std::size_t batch_size = 0;
  std::vector<DomainSlice> nonempty;

  std::size_t num_nonempty() const { return nonempty.size(); }
};

inline BatchMasks compute_masks(std::span<const std::pair<int, int>> domain_ids,
                                const DomainRegistry& registry) {
  const std::size_t n = domain_ids.size();
  BatchMasks out;
  out.batch_size = n;

  // domain index -> slice position, built in first-seen order then sorted.
  std::unordered_map<int, std::size_t> where;
  for (std::size_t pos = 0; pos < n; ++pos) {
    const auto [t, s] = domain_ids[pos];
    if (t < 0 || t >= registry.num_types()) {
      throw DomainError("type id out of range: " + std::to_string(t));
    }
    if (s < 0 || s >= registry.num_scenarios()) {
      throw DomainError("scenario id out of range: " + std::to_string(s));
    }
    const int dom = registry.domain_index(t, s);
    auto it = where.find(dom);
    if (it == where.end()) {
      it = where.emplace(dom, out.nonempty.size()).first;
      DomainSlice slice;
      slice.domain = dom;
      slice.type_id = t;
      slice.scenario_id = s;
      out.nonempty.push_back(std::move(slice));
    }
    out.nonempty[it->second].rows.push_back(static_cast<std::uint32_t>(pos));
  }

  std::sort(out.nonempty.begin(), out.nonempty.end(),
            [](const DomainSlice& a, const DomainSlice& b) { return a.domain < b.domain; });
  for (auto& slice : out.nonempty) {
    slice.mask.assign(n, 0.0);
    for (std::uint32_t r : slice.rows) slice.mask[r] = 1.0;
  }
  return out;
}

// Per-instance weights N / N_c, recomputed for every batch. Weights over each
// nonempty domain sum to N exactly.
inline std::vector<double> dynamic_weights(const BatchMasks& masks) {
  std::vector<double> w(masks.batch_size, 0.0);
  const double n = static_cast<double>(masks.batch_size);
  for (const auto& slice : masks.nonempty) {
    const double wc = n / static_cast<double>(slice.count());
    for (std::uint32_t r : slice.rows) w[r] = wc;
  }
  return w;
}

}  // namespace mmn
