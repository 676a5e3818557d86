#pragma once

// Rank-based AUC, per-type / per-scenario metric tables, and the scalability
// counters (stored parameter sets, composable towers, datasets consumed).
//
// CVR AUC is computed over clicked impressions only (conversion label vs
// p_cvr), matching the conditional definition of the CVR task; CTCVR AUC over
// all impressions (label y*z vs p_ctr*p_cvr) is a diagnostic column. Groups
// without both a positive and a negative are undefined and excluded from
// averages rather than being counted as 0.5.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmn/data.hpp"
#include "mmn/errors.hpp"
#include "mmn/model.hpp"

namespace mmn {

// Mann-Whitney AUC with average ranks for ties: the probability a random
// positive outranks a random negative, ties counted half. Sorting is by
// (score, original index) so the result is deterministic. Returns nullopt
// when either class is missing.
inline std::optional<double> auc(std::span<const double> scores,
                                 std::span<const std::uint8_t> labels) {
  const std::size_t n = scores.size();
  if (n != labels.size()) throw ShapeError("auc: scores/labels size mismatch");
  std::size_t positives = 0;
  for (std::uint8_t l : labels) positives += l != 0;
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) return std::nullopt;

  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return a < b;
  });

  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // Tied block occupies ranks i+1 .. j (1-based); all share the average.
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) rank_sum_pos += avg_rank;
    }
    i = j;
  }
  const double p = static_cast<double>(positives);
  const double q = static_cast<double>(negatives);
  return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q);
}

struct GroupMetrics {
  std::string code;
  std::size_t count = 0;
  std::size_t clicks = 0;
  std::size_t conversions = 0;
  double empirical_cvr = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> auc_cvr;    // over clicked impressions
  std::optional<double> auc_ctcvr;  // over all impressions
};

struct DomainStat {
  std::string type_code;
  std::string scenario_code;
  std::size_t count = 0;
  std::size_t clicks = 0;
  std::size_t conversions = 0;
  double empirical_cvr = std::numeric_limits<double>::quiet_NaN();
};

struct MetricsReport {
  std::string mode;
  std::vector<GroupMetrics> per_type;
  std::vector<GroupMetrics> per_scenario;
  std::vector<DomainStat> per_domain;
  std::optional<double> average_auc;  // mean over valid type + scenario CVR AUCs
  std::size_t parameter_sets = 0;
  std::size_t composable_towers = 0;
  std::size_t dataset_count = 1;

  std::string to_text() const;
  void write_kv(const std::filesystem::path& path) const;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_opt(const std::optional<double>& v, const char* pattern) {
  if (!v) return "na";
  char buf[40];
  std::snprintf(buf, sizeof(buf), pattern, *v);
  return buf;
}

inline GroupMetrics group_metrics(std::string code, std::span<const std::uint32_t> rows,
                                  const std::vector<double>& p_ctr,
                                  const std::vector<double>& p_cvr,
                                  const std::vector<std::uint8_t>& y,
                                  const std::vector<std::uint8_t>& z, bool has_ctr) {
  GroupMetrics g;
  g.code = std::move(code);
  g.count = rows.size();
  std::vector<double> cvr_scores, ctcvr_scores;
  std::vector<std::uint8_t> cvr_labels, ctcvr_labels;
  for (std::uint32_t r : rows) {
    g.clicks += y[r] != 0;
    g.conversions += z[r] != 0;
    if (y[r]) {
      cvr_scores.push_back(p_cvr[r]);
      cvr_labels.push_back(z[r]);
    }
    if (has_ctr) {
      ctcvr_scores.push_back(p_ctr[r] * p_cvr[r]);
      ctcvr_labels.push_back(z[r]);
    }
  }
  if (g.clicks > 0) {
    g.empirical_cvr =
        static_cast<double>(g.conversions) / static_cast<double>(g.clicks);
  }
  g.auc_cvr = auc(cvr_scores, cvr_labels);
  if (has_ctr) g.auc_ctcvr = auc(ctcvr_scores, ctcvr_labels);
  return g;
}

}  // namespace detail

// Evaluates the model over a view of a log. Predictions run in fixed-size
// chunks in view order; every aggregate is a pure function of the inputs.
inline MetricsReport report(const MmnModel& model, const LogView& view,
                            std::size_t chunk = 4096) {
  const std::size_t n = view.size();
  std::vector<double> p_ctr(n), p_cvr(n);
  std::vector<std::uint8_t> y(n), z(n);
  for (std::size_t start = 0; start < n; start += chunk) {
    MiniBatch b;
    b.log = view.log;
    const std::size_t end = std::min(n, start + chunk);
    b.rows.assign(view.rows.begin() + start, view.rows.begin() + end);
    const BatchPrediction pred = model.predict_batch(b);
    for (std::size_t k = 0; k < b.rows.size(); ++k) {
      p_ctr[start + k] = pred.p_ctr[k];
      p_cvr[start + k] = pred.p_cvr[k];
    }
  }
  for (std::size_t k = 0; k < n; ++k) {
    const FeatureVector& rec = view.record(k);
    y[k] = rec.click;
    z[k] = rec.conversion;
  }

  const DomainRegistry& reg = model.registry();
  const int nt = reg.num_types();
  const int ns = reg.num_scenarios();
  std::vector<std::vector<std::uint32_t>> by_type(nt), by_scen(ns), by_dom(reg.num_domains());
  for (std::size_t k = 0; k < n; ++k) {
    const FeatureVector& rec = view.record(k);
    by_type[rec.type_id].push_back(static_cast<std::uint32_t>(k));
    by_scen[rec.scenario_id].push_back(static_cast<std::uint32_t>(k));
    by_dom[reg.domain_index(rec.type_id, rec.scenario_id)].push_back(
        static_cast<std::uint32_t>(k));
  }

  MetricsReport rep;
  rep.mode = mode_name(model.mode());
  rep.parameter_sets = model.parameter_set_count();
  rep.composable_towers = model.composable_tower_count();
  rep.dataset_count = 1;
  const bool has_ctr = model.has_ctr_tower();

  double auc_sum = 0.0;
  std::size_t auc_n = 0;
  for (int i = 0; i < nt; ++i) {
    rep.per_type.push_back(
        detail::group_metrics(reg.type_code(i), by_type[i], p_ctr, p_cvr, y, z, has_ctr));
    if (rep.per_type.back().auc_cvr) {
      auc_sum += *rep.per_type.back().auc_cvr;
      ++auc_n;
    }
  }
  for (int j = 0; j < ns; ++j) {
    rep.per_scenario.push_back(detail::group_metrics(reg.scenario_code(j), by_scen[j],
                                                     p_ctr, p_cvr, y, z, has_ctr));
    if (rep.per_scenario.back().auc_cvr) {
      auc_sum += *rep.per_scenario.back().auc_cvr;
      ++auc_n;
    }
  }
  if (auc_n > 0) rep.average_auc = auc_sum / static_cast<double>(auc_n);

  for (int d = 0; d < reg.num_domains(); ++d) {
    DomainStat ds;
    ds.type_code = reg.type_code(reg.domain_type(d));
    ds.scenario_code = reg.scenario_code(reg.domain_scenario(d));
    ds.count = by_dom[d].size();
    for (std::uint32_t r : by_dom[d]) {
      ds.clicks += y[r] != 0;
      ds.conversions += z[r] != 0;
    }
    if (ds.clicks > 0) {
      ds.empirical_cvr =
          static_cast<double>(ds.conversions) / static_cast<double>(ds.clicks);
    }
    rep.per_domain.push_back(std::move(ds));
  }
  return rep;
}

inline std::string MetricsReport::to_text() const {
  std::string out;
  char buf[256];
  auto line = [&](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof(buf), fmt, args...);
    out += buf;
    out += '\n';
  };
  line("mode               %s", mode.c_str());
  line("dataset count      %zu", dataset_count);
  line("parameter sets     %zu", parameter_sets);
  line("composable towers  %zu", composable_towers);
  line("average auc        %s", detail::fmt_opt(average_auc, "%.6f").c_str());
  out += '\n';
  auto table = [&](const char* title, const std::vector<GroupMetrics>& groups) {
    line("%-10s %10s %10s %12s %10s %8s %8s", title, "count", "clicks", "conversions",
         "cvr", "auc", "ctcvr");
    for (const auto& g : groups) {
      line("%-10s %10zu %10zu %12zu %10.5f %8s %8s", g.code.c_str(), g.count, g.clicks,
           g.conversions, g.empirical_cvr, detail::fmt_opt(g.auc_cvr, "%.4f").c_str(),
           detail::fmt_opt(g.auc_ctcvr, "%.4f").c_str());
    }
    out += '\n';
  };
  table("type", per_type);
  table("scenario", per_scenario);
  line("%-10s %-10s %10s %10s %12s %10s", "type", "scenario", "count", "clicks",
       "conversions", "cvr");
  for (const auto& d : per_domain) {
    line("%-10s %-10s %10zu %10zu %12zu %10.5f", d.type_code.c_str(),
         d.scenario_code.c_str(), d.count, d.clicks, d.conversions, d.empirical_cvr);
  }
  return out;
}

// One metric per line, 17 significant digits, stable ordering; intended for
// machine comparison.
inline void MetricsReport::write_kv(const std::filesystem::path& path) const {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write: " + tmp.string());
    out << "mode = " << mode << '\n';
    out << "dataset_count = " << dataset_count << '\n';
    out << "parameter_sets = " << parameter_sets << '\n';
    out << "composable_towers = " << composable_towers << '\n';
    out << "avg_auc = " << (average_auc ? detail::fmt_double(*average_auc) : "na")
        << '\n';
    auto dump = [&](const char* prefix, const std::vector<GroupMetrics>& groups) {
      for (const auto& g : groups) {
        const std::string base = std::string(prefix) + "." + g.code + ".";
        out << base << "count = " << g.count << '\n';
        out << base << "clicks = " << g.clicks << '\n';
        out << base << "conversions = " << g.conversions << '\n';
        out << base << "cvr = "
            << (g.clicks ? detail::fmt_double(g.empirical_cvr) : "na") << '\n';
        out << base << "auc = " << (g.auc_cvr ? detail::fmt_double(*g.auc_cvr) : "na")
            << '\n';
        out << base
            << "ctcvr_auc = " << (g.auc_ctcvr ? detail::fmt_double(*g.auc_ctcvr) : "na")
            << '\n';
      }
    };
    dump("type", per_type);
    dump("scenario", per_scenario);
    for (const auto& d : per_domain) {
      const std::string base = "domain." + d.type_code + "." + d.scenario_code + ".";
      out << base << "count = " << d.count << '\n';
      out << base << "clicks = " << d.clicks << '\n';
      out << base << "conversions = " << d.conversions << '\n';
      out << base << "cvr = " << (d.clicks ? detail::fmt_double(d.empirical_cvr) : "na")
          << '\n';
    }
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace mmn
