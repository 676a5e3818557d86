#pragma once

// Conversion-log ingestion, train/validation splitting, mini-batching, and a
// synthetic multi-domain log generator.
//
// Log format: one record per line, tab separated, UTF-8:
//   y  z  type_code  scenario_code  field_1 ... field_F
// '#'-prefixed lines are comments. A conversion implies a click (z=1 => y=1).
//
// The generator's ground truth is additive in log-odds: conversions follow
// sigma(b0 + phi(x) + u_type + v_scenario) where phi(x) is a per-field +/-
// amplitude keyed off the sampled value. Per-domain conversion and click
// rates are therefore computable exactly, which the truth sidecar records.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmn/config.hpp"
#include "mmn/domains.hpp"
#include "mmn/errors.hpp"
#include "mmn/features.hpp"
#include "mmn/tensor.hpp"

namespace mmn {

struct ConversionLog {
  Schema schema;
  DomainRegistry registry;
  std::vector<FeatureVector> records;

  std::size_t size() const { return records.size(); }
};

// A subset of a log's rows (train/validation/test splits). Row ids are
// positions in the underlying log.
struct LogView {
  const ConversionLog* log = nullptr;
  std::vector<std::uint32_t> rows;

  LogView() = default;
  explicit LogView(const ConversionLog& l) : log(&l) {
    rows.resize(l.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<std::uint32_t>(i);
  }
  LogView(const ConversionLog& l, std::vector<std::uint32_t> r)
      : log(&l), rows(std::move(r)) {}

  std::size_t size() const { return rows.size(); }
  const FeatureVector& record(std::size_t k) const { return log->records[rows[k]]; }
};

struct MiniBatch {
  const ConversionLog* log = nullptr;
  std::vector<std::uint32_t> rows;

  std::size_t size() const { return rows.size(); }
  const FeatureVector& record(std::size_t k) const { return log->records[rows[k]]; }
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return out;
}

inline std::uint8_t parse_binary_label(std::string_view s, const std::string& what,
                                       std::size_t line_no) {
  if (s == "0") return 0;
  if (s == "1") return 1;
  throw ParseError("line " + std::to_string(line_no) + ": " + what +
                   " must be 0 or 1, got '" + std::string(s) + "'");
}

}  // namespace detail

// Parses one record line. Domain codes are resolved against the registry.
inline FeatureVector parse_tsv_record(std::string_view line, const Schema& schema,
                                      const DomainRegistry& registry,
                                      std::size_t line_no = 0) {
  const auto cols = detail::split_tabs(line);
  const std::size_t expected = 4 + schema.field_count();
  if (cols.size() != expected) {
    throw ParseError("line " + std::to_string(line_no) + ": expected " +
                     std::to_string(expected) + " columns, got " +
                     std::to_string(cols.size()));
  }
  FeatureVector rec;
  rec.click = detail::parse_binary_label(cols[0], "click label", line_no);
  rec.conversion = detail::parse_binary_label(cols[1], "conversion label", line_no);
  if (rec.conversion == 1 && rec.click == 0) {
    throw IntegrityError("line " + std::to_string(line_no) +
                         ": conversion without click");
  }
  rec.type_id = registry.type_index(std::string(cols[2]));
  rec.scenario_id = registry.scenario_index(std::string(cols[3]));
  rec.values.reserve(schema.field_count());
  for (std::size_t f = 0; f < schema.field_count(); ++f) {
    rec.values.emplace_back(cols[4 + f]);
  }
  return rec;
}

// Loads a TSV log. When fixed_registry is null the registry is inferred from
// a scan of the file: codes sorted lexicographically, so the same data always
// produces the same index mapping.
inline ConversionLog load_tsv(const std::filesystem::path& path, const Schema& schema,
                              const DomainRegistry* fixed_registry = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open log file: " + path.string());

  std::vector<std::pair<std::size_t, std::string>> lines;  // (line number, text)
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    lines.emplace_back(line_no, line);
  }

  ConversionLog log;
  log.schema = schema;
  if (fixed_registry) {
    log.registry = *fixed_registry;
  } else {
    std::set<std::string> types, scenarios;
    for (const auto& [no, text] : lines) {
      const auto cols = detail::split_tabs(text);
      if (cols.size() < 4) {
        throw ParseError("line " + std::to_string(no) + ": expected at least 4 columns");
      }
      types.emplace(cols[2]);
      scenarios.emplace(cols[3]);
    }
    if (lines.empty()) {
      return log;  // empty file, empty log, no registry
    }
    log.registry = DomainRegistry({types.begin(), types.end()},
                                  {scenarios.begin(), scenarios.end()});
  }

  log.records.reserve(lines.size());
  for (const auto& [no, text] : lines) {
    log.records.push_back(parse_tsv_record(text, schema, log.registry, no));
  }
  return log;
}

inline std::string format_record(const FeatureVector& rec, const DomainRegistry& registry) {
  std::string out;
  out += rec.click ? '1' : '0';
  out += '\t';
  out += rec.conversion ? '1' : '0';
  out += '\t';
  out += registry.type_code(rec.type_id);
  out += '\t';
  out += registry.scenario_code(rec.scenario_id);
  for (const auto& v : rec.values) {
    out += '\t';
    out += v;
  }
  return out;
}

// Writes a log atomically (temp file + rename).
inline void save_tsv(const ConversionLog& log, const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write: " + tmp.string());
    for (const auto& rec : log.records) {
      out << format_record(rec, log.registry) << '\n';
    }
  }
  std::filesystem::rename(tmp, path);
}

// --- synthetic generation ---------------------------------------------------

struct SyntheticSpec {
  std::size_t num_types = 1;
  std::size_t num_scenarios = 1;
  std::vector<double> type_offsets;      // u_i, size num_types
  std::vector<double> scenario_offsets;  // v_j, size num_scenarios
  double cvr_base_logit = 0.0;
  double ctr_base_logit = 0.0;
  double feature_logit_scale = 0.0;      // per-field +/- amplitude on the cvr logit
  double ctr_feature_logit_scale = 0.0;  // per-field +/- amplitude on the ctr logit
  std::size_t num_fields = 1;
  std::vector<std::size_t> vocab_sizes;  // per field
  std::size_t num_instances = 0;
  double dominant_share = 0.0;  // 0 => uniform mixture
  std::size_t dominant_type = 0;
  std::size_t dominant_scenario = 0;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_types == 0 || num_scenarios == 0) {
      throw ConfigError("spec needs num_types >= 1 and num_scenarios >= 1");
    }
    if (type_offsets.size() != num_types) {
      throw ConfigError("type_offsets size must equal num_types");
    }
    if (scenario_offsets.size() != num_scenarios) {
      throw ConfigError("scenario_offsets size must equal num_scenarios");
    }
    if (num_fields == 0) throw ConfigError("spec needs num_fields >= 1");
    if (vocab_sizes.size() != num_fields) {
      throw ConfigError("vocab_sizes size must equal num_fields");
    }
    for (std::size_t v : vocab_sizes) {
      if (v < 4) throw ConfigError("vocab sizes must be >= 4");
    }
    if (dominant_share < 0.0 || dominant_share >= 1.0) {
      throw ConfigError("dominant_share must lie in [0, 1)");
    }
    if (dominant_share > 0.0 &&
        (dominant_type >= num_types || dominant_scenario >= num_scenarios)) {
      throw ConfigError("dominant domain indices out of range");
    }
  }

  std::size_t num_domains() const { return num_types * num_scenarios; }

  double mixture_share(std::size_t i, std::size_t j) const {
    const std::size_t c = num_domains();
    if (dominant_share <= 0.0) return 1.0 / static_cast<double>(c);
    if (i == dominant_type && j == dominant_scenario) return dominant_share;
    return (1.0 - dominant_share) / static_cast<double>(c - 1);
  }

  Schema schema() const {
    Schema s;
    for (std::size_t f = 0; f < num_fields; ++f) s.fields.push_back(field_name(f));
    return s;
  }

  static std::string field_name(std::size_t f) { return "f" + std::to_string(f); }

  static std::string code(char prefix, std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%c%02zu", prefix, i);
    return buf;
  }

  DomainRegistry registry() const {
    std::vector<std::string> types, scenarios;
    for (std::size_t i = 0; i < num_types; ++i) types.push_back(code('t', i));
    for (std::size_t j = 0; j < num_scenarios; ++j) scenarios.push_back(code('s', j));
    return DomainRegistry(std::move(types), std::move(scenarios));
  }

  // Offsets come either as an explicit list or as a two-value range spread
  // evenly across the indices.
  static std::vector<double> offsets_from(const Config& cfg, const std::string& list_key,
                                          const std::string& range_key, std::size_t n) {
    if (cfg.has(list_key)) return cfg.get_double_list(list_key);
    if (!cfg.has(range_key)) return std::vector<double>(n, 0.0);
    const auto range = cfg.get_double_list(range_key);
    if (range.size() != 2) {
      throw ConfigError(range_key + " must hold exactly two values");
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double t =
          n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
      out[i] = range[0] + t * (range[1] - range[0]);
    }
    return out;
  }

  // Value v of any field contributes +amp to the cvr logit when bit 0 of v is
  // set and -amp otherwise; bit 1 plays the same role for the ctr logit.
  static bool cvr_high(std::size_t value) { return (value & 1) != 0; }
  static bool ctr_high(std::size_t value) { return (value & 2) != 0; }

  // Exact joint pmf over (number of cvr-high fields, number of ctr-high
  // fields), by dynamic programming over the per-field residue counts.
  std::vector<std::vector<double>> field_count_pmf() const {
    std::vector<std::vector<double>> pmf(1, std::vector<double>(1, 1.0));
    for (std::size_t f = 0; f < num_fields; ++f) {
      const std::size_t vocab = vocab_sizes[f];
      double q[2][2] = {{0, 0}, {0, 0}};  // [cvr_high][ctr_high]
      for (std::size_t r = 0; r < 4; ++r) {
        const std::size_t count = vocab / 4 + (r < vocab % 4 ? 1 : 0);
        q[r & 1][(r & 2) >> 1] += static_cast<double>(count) / static_cast<double>(vocab);
      }
      std::vector<std::vector<double>> next(f + 2, std::vector<double>(f + 2, 0.0));
      for (std::size_t m = 0; m <= f; ++m) {
        for (std::size_t n = 0; n <= f; ++n) {
          const double p = pmf[m][n];
          if (p == 0.0) continue;
          next[m][n] += p * q[0][0];
          next[m][n + 1] += p * q[0][1];
          next[m + 1][n] += p * q[1][0];
          next[m + 1][n + 1] += p * q[1][1];
        }
      }
      pmf = std::move(next);
    }
    return pmf;
  }

  double phi_cvr(std::size_t high_count) const {
    return feature_logit_scale *
           (2.0 * static_cast<double>(high_count) - static_cast<double>(num_fields));
  }
  double phi_ctr(std::size_t high_count) const {
    return ctr_feature_logit_scale *
           (2.0 * static_cast<double>(high_count) - static_cast<double>(num_fields));
  }

  // Ground-truth click rate; identical for every domain.
  double domain_ctr() const {
    const auto pmf = field_count_pmf();
    double acc = 0.0;
    for (std::size_t m = 0; m <= num_fields; ++m) {
      for (std::size_t n = 0; n <= num_fields; ++n) {
        if (pmf[m][n] == 0.0) continue;
        acc += pmf[m][n] * sigmoid_scalar(ctr_base_logit + phi_ctr(n));
      }
    }
    return acc;
  }

  // Ground-truth conversion rate among clicks for domain (i, j):
  // E[sigma_ctr * sigma_cvr] / E[sigma_ctr] over the joint feature effects.
  static SyntheticSpec from_config(const Config& cfg) {
    SyntheticSpec s;
    s.num_types = cfg.get_size("num_types");
    s.num_scenarios = cfg.get_size("num_scenarios");
    s.type_offsets = offsets_from(cfg, "type_offsets", "type_offset_range", s.num_types);
    s.scenario_offsets =
        offsets_from(cfg, "scenario_offsets", "scenario_offset_range", s.num_scenarios);
    s.cvr_base_logit = cfg.get_double("cvr_base_logit", 0.0);
    s.ctr_base_logit = cfg.get_double("ctr_base_logit", 0.0);
    s.feature_logit_scale = cfg.get_double("feature_logit_scale", 0.0);
    s.ctr_feature_logit_scale = cfg.get_double("ctr_feature_logit_scale", 0.0);
    s.num_fields = cfg.get_size("num_fields");
    if (cfg.has("vocab_sizes")) {
      s.vocab_sizes = cfg.get_size_list("vocab_sizes");
    } else {
      s.vocab_sizes.assign(s.num_fields, cfg.get_size("vocab_size"));
    }
    s.num_instances = cfg.get_size("num_instances");
    const std::string mixture = cfg.get_string("mixture", "uniform");
    if (mixture == "dominant") {
      s.dominant_share = cfg.get_double("dominant_share");
      s.dominant_type = cfg.get_size("dominant_type", 0);
      s.dominant_scenario = cfg.get_size("dominant_scenario", 0);
      if (s.dominant_share <= 0.0) {
        throw ConfigError("dominant mixture needs dominant_share > 0");
      }
    } else if (mixture != "uniform") {
      throw ConfigError("mixture must be 'uniform' or 'dominant', got '" + mixture + "'");
    }
    s.seed = cfg.get_uint64("seed", 1);
    s.validate();
    return s;
  }

  double domain_cvr(std::size_t i, std::size_t j) const {
    const auto pmf = field_count_pmf();
    const double offset = cvr_base_logit + type_offsets[i] + scenario_offsets[j];
    double num = 0.0, den = 0.0;
    for (std::size_t m = 0; m <= num_fields; ++m) {
      for (std::size_t n = 0; n <= num_fields; ++n) {
        const double p = pmf[m][n];
        if (p == 0.0) continue;
        const double pc = p * sigmoid_scalar(ctr_base_logit + phi_ctr(n));
        den += pc;
        num += pc * sigmoid_scalar(offset + phi_cvr(m));
      }
    }
    return num / den;
  }
};

inline ConversionLog generate(const SyntheticSpec& spec) {
  spec.validate();
  ConversionLog log;
  log.schema = spec.schema();
  log.registry = spec.registry();
  log.records.reserve(spec.num_instances);

  // Cumulative mixture over flattened domains.
  std::vector<double> cum;
  cum.reserve(spec.num_domains());
  double acc = 0.0;
  for (std::size_t i = 0; i < spec.num_types; ++i) {
    for (std::size_t j = 0; j < spec.num_scenarios; ++j) {
      acc += spec.mixture_share(i, j);
      cum.push_back(acc);
    }
  }
  cum.back() = 1.0;

  RngState rng(spec.seed);
  for (std::size_t inst = 0; inst < spec.num_instances; ++inst) {
    const double u = rng.next_double();
    const std::size_t dom =
        std::lower_bound(cum.begin(), cum.end(), u) - cum.begin();
    FeatureVector rec;
    rec.type_id = static_cast<int>(dom / spec.num_scenarios);
    rec.scenario_id = static_cast<int>(dom % spec.num_scenarios);

    double ctr_logit = spec.ctr_base_logit;
    double cvr_logit = spec.cvr_base_logit + spec.type_offsets[rec.type_id] +
                       spec.scenario_offsets[rec.scenario_id];
    rec.values.reserve(spec.num_fields);
    for (std::size_t f = 0; f < spec.num_fields; ++f) {
      const std::size_t v = rng.next_below(spec.vocab_sizes[f]);
      rec.values.push_back(SyntheticSpec::field_name(f) + "_v" + std::to_string(v));
      ctr_logit += SyntheticSpec::ctr_high(v) ? spec.ctr_feature_logit_scale
                                              : -spec.ctr_feature_logit_scale;
      cvr_logit += SyntheticSpec::cvr_high(v) ? spec.feature_logit_scale
                                              : -spec.feature_logit_scale;
    }
    rec.click = rng.bernoulli(sigmoid_scalar(ctr_logit)) ? 1 : 0;
    rec.conversion =
        rec.click && rng.bernoulli(sigmoid_scalar(cvr_logit)) ? 1 : 0;
    log.records.push_back(std::move(rec));
  }
  return log;
}

// Per-domain ground truth: type, scenario, mixture share, click rate,
// conversion rate among clicks. Written atomically next to the log.
inline void write_truth_sidecar(const SyntheticSpec& spec,
                                const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write: " + tmp.string());
    out << "# type\tscenario\tshare\tctr\tcvr\n";
    const double ctr = spec.domain_ctr();
    char buf[128];
    for (std::size_t i = 0; i < spec.num_types; ++i) {
      for (std::size_t j = 0; j < spec.num_scenarios; ++j) {
        std::snprintf(buf, sizeof(buf), "%s\t%s\t%.12g\t%.12g\t%.12g\n",
                      SyntheticSpec::code('t', i).c_str(),
                      SyntheticSpec::code('s', j).c_str(), spec.mixture_share(i, j),
                      ctr, spec.domain_cvr(i, j));
        out << buf;
      }
    }
  }
  std::filesystem::rename(tmp, path);
}

// --- splitting and batching -------------------------------------------------

// Deterministic record-index split: the first ceil(fraction * N) rows train.
inline std::pair<LogView, LogView> split_view(const ConversionLog& log,
                                              double train_fraction) {
  const std::size_t n = log.size();
  const std::size_t n_train =
      static_cast<std::size_t>(std::ceil(train_fraction * static_cast<double>(n)));
  LogView train, val;
  train.log = &log;
  val.log = &log;
  for (std::size_t i = 0; i < n; ++i) {
    (i < n_train ? train : val).rows.push_back(static_cast<std::uint32_t>(i));
  }
  return {std::move(train), std::move(val)};
}

// One epoch of mini-batches: a seeded shuffle of the view's rows, chunked.
// The final partial batch is emitted. Domains stay mixed; nothing is
// pre-partitioned.
inline std::vector<MiniBatch> make_batches(const LogView& view, std::size_t batch_size,
                                           std::uint64_t shuffle_seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::uint32_t> order = view.rows;
  RngState rng(shuffle_seed);
  rng.shuffle(order);

  std::vector<MiniBatch> out;
  out.reserve((order.size() + batch_size - 1) / batch_size);
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    MiniBatch b;
    b.log = view.log;
    const std::size_t end = std::min(order.size(), start + batch_size);
    b.rows.assign(order.begin() + start, order.begin() + end);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace mmn
