#pragma once

// Training orchestration: run configuration, the epoch loop over shuffled
// mixed-domain mini-batches, per-epoch validation with early stopping, best
// checkpoint retention, and a multi-mode ablation driver.
//
// Everything is deterministic given (config, seed, data bytes): shuffles are
// seeded per epoch, log lines carry no wall-clock data, and checkpoints are
// byte-stable across reruns.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmn/checkpoint.hpp"
#include "mmn/config.hpp"
#include "mmn/data.hpp"
#include "mmn/eval.hpp"
#include "mmn/model.hpp"

namespace mmn {

struct RunConfig {
  std::filesystem::path data_path;
  std::vector<std::string> schema_fields;
  std::vector<std::string> types;      // empty: infer registry from the data
  std::vector<std::string> scenarios;  // empty: infer registry from the data
  ModelMode mode = ModelMode::mmn;
  std::optional<bool> domain_features_override;  // unset: mode default
  std::size_t num_slots = std::size_t{1} << 18;
  std::size_t embedding_dim = 4;
  std::vector<std::size_t> hidden_units{32, 16};
  bool ctr_tower = true;
  double init_range = 0.05;
  double alpha = 1.0;
  double learning_rate = 0.05;
  double adagrad_eps = 1e-8;
  std::size_t batch_size = 256;
  std::size_t epochs = 10;
  std::size_t patience = 3;
  double train_fraction = 0.7;
  std::uint64_t seed = 1;
  std::filesystem::path checkpoint_out;
  std::filesystem::path log_out;  // empty: no log file

  static RunConfig from_file(const std::filesystem::path& path) {
    return from_config(Config::from_file(path));
  }

  static RunConfig from_config(const Config& cfg) {
    RunConfig rc;
    rc.data_path = cfg.get_string("data");
    for (const auto& f : split_list(cfg.get_string("schema"))) {
      rc.schema_fields.push_back(f);
    }
    if (cfg.has("types")) rc.types = split_list(cfg.get_string("types"));
    if (cfg.has("scenarios")) rc.scenarios = split_list(cfg.get_string("scenarios"));
    rc.mode = parse_mode(cfg.get_string("mode", "mmn"));
    if (cfg.has("include_domain_features")) {
      rc.domain_features_override = cfg.get_bool("include_domain_features");
    }
    rc.num_slots = cfg.get_size("num_slots", rc.num_slots);
    rc.embedding_dim = cfg.get_size("embedding_dim", rc.embedding_dim);
    if (cfg.has("hidden_units")) rc.hidden_units = cfg.get_size_list("hidden_units");
    rc.ctr_tower = cfg.get_bool("ctr_tower", true);
    rc.init_range = cfg.get_double("init_range", rc.init_range);
    rc.alpha = cfg.get_double("alpha", rc.alpha);
    rc.learning_rate = cfg.get_double("learning_rate", rc.learning_rate);
    rc.adagrad_eps = cfg.get_double("adagrad_eps", rc.adagrad_eps);
    rc.batch_size = cfg.get_size("batch_size", rc.batch_size);
    rc.epochs = cfg.get_size("epochs", rc.epochs);
    rc.patience = cfg.get_size("patience", rc.patience);
    rc.train_fraction = cfg.get_double("train_fraction", rc.train_fraction);
    rc.seed = cfg.get_uint64("seed");
    rc.checkpoint_out = cfg.get_string("checkpoint_out");
    rc.log_out = cfg.get_string("log_out", "");
    cfg.reject_unknown_keys();
    rc.validate();
    return rc;
  }

  void validate() const {
    if (schema_fields.empty()) throw ConfigError("schema must name at least one field");
    if (train_fraction <= 0.0 || train_fraction >= 1.0) {
      throw ConfigError("train_fraction must lie in (0, 1)");
    }
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (checkpoint_out.empty()) throw ConfigError("checkpoint_out is required");
    model_config(mode).validate();
  }

  ModelConfig model_config(ModelMode m) const {
    ModelConfig mc;
    mc.mode = m;
    mc.num_slots = num_slots;
    mc.embedding_dim = embedding_dim;
    mc.hidden_units = hidden_units;
    mc.include_domain_features =
        domain_features_override.value_or(ModelConfig::default_domain_features(m));
    mc.ctr_tower = ctr_tower;
    mc.init_range = init_range;
    return mc;
  }

  Schema schema() const {
    Schema s;
    s.fields = schema_fields;
    return s;
  }

  static std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
      std::size_t comma = s.find(',', start);
      if (comma == std::string::npos) comma = s.size();
      std::string item = s.substr(start, comma - start);
      while (!item.empty() && (item.front() == ' ' || item.front() == '\t')) {
        item.erase(item.begin());
      }
      while (!item.empty() && (item.back() == ' ' || item.back() == '\t')) {
        item.pop_back();
      }
      if (!item.empty()) out.push_back(std::move(item));
      start = comma + 1;
    }
    return out;
  }
};

struct TrainResult {
  MmnModel best_model;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;  // 0 means the initialization checkpoint
  std::optional<double> best_val_auc;
  std::vector<std::string> log_lines;
  // How many dataset files the pipeline opened; one mixed-domain file serves
  // every registry size.
  std::size_t dataset_files_opened = 0;
  std::filesystem::path checkpoint_path;
};

namespace detail {

inline std::string fmt_prob(double v) {
  if (std::isnan(v)) return "na";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_lines(const std::filesystem::path& path,
                        const std::vector<std::string>& lines) {
  if (path.empty()) return;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write log: " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace detail

// Trains per the config and returns the best-validation model. The best
// checkpoint is saved on every improvement, so the file always holds the last
// good state even if a later step aborts.
inline TrainResult train(const RunConfig& rc, const ConversionLog* preloaded = nullptr) {
  TrainResult result;
  result.checkpoint_path = rc.checkpoint_out;

  ConversionLog loaded;
  const ConversionLog* log = preloaded;
  if (!log) {
    DomainRegistry explicit_reg;
    const bool has_explicit = !rc.types.empty() || !rc.scenarios.empty();
    if (has_explicit) {
      if (rc.types.empty() || rc.scenarios.empty()) {
        throw ConfigError("types and scenarios must be given together");
      }
      explicit_reg = DomainRegistry(rc.types, rc.scenarios);
    }
    result.dataset_files_opened += 1;
    loaded = load_tsv(rc.data_path, rc.schema(), has_explicit ? &explicit_reg : nullptr);
    log = &loaded;
  }
  if (log->size() == 0) throw ConfigError("training data is empty");

  MmnModel model(log->registry, log->schema, rc.model_config(rc.mode), rc.seed);
  auto [train_view, val_view] = split_view(*log, rc.train_fraction);

  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "run mode=%s records=%zu train=%zu val=%zu parameter_sets=%zu "
                "composable_towers=%zu seed=%llu",
                mode_name(model.mode()), log->size(), train_view.size(),
                val_view.size(), model.parameter_set_count(),
                model.composable_tower_count(),
                static_cast<unsigned long long>(rc.seed));
  result.log_lines.emplace_back(buf);

  result.best_model = model;
  save_checkpoint(model, rc.checkpoint_out);

  std::size_t bad_epochs = 0;
  std::uint64_t step = 0;
  try {
    for (std::size_t epoch = 1; epoch <= rc.epochs; ++epoch) {
      const auto batches =
          make_batches(train_view, rc.batch_size, derive_seed(rc.seed, 1000 + epoch));
      double sum_ctr = 0.0, sum_ctcvr = 0.0, sum_weighted = 0.0, sum_total = 0.0;
      double total_n = 0.0;
      for (const auto& batch : batches) {
        const LossBreakdown b =
            model.train_step(batch, rc.alpha, rc.learning_rate, rc.adagrad_eps, step);
        ++step;
        const double bn = static_cast<double>(batch.size());
        sum_ctr += b.loss_ctr * bn;
        sum_ctcvr += b.loss_ctcvr * bn;
        sum_weighted += b.loss_ctcvr_weighted * bn;
        sum_total += b.total * bn;
        total_n += bn;
      }
      const MetricsReport val = report(model, val_view);
      const std::string val_str =
          val.average_auc ? detail::fmt_prob(*val.average_auc) : "na";
      std::snprintf(buf, sizeof(buf),
                    "epoch=%zu steps=%llu loss_ctr=%.9g loss_ctcvr=%.9g "
                    "loss_ctcvr_weighted=%.9g loss_total=%.9g val_avg_auc=%s",
                    epoch, static_cast<unsigned long long>(step), sum_ctr / total_n,
                    sum_ctcvr / total_n, sum_weighted / total_n, sum_total / total_n,
                    val_str.c_str());
      result.log_lines.emplace_back(buf);
      result.epochs_run = epoch;

      const bool improved =
          val.average_auc &&
          (!result.best_val_auc || *val.average_auc > *result.best_val_auc);
      if (improved) {
        result.best_val_auc = val.average_auc;
        result.best_epoch = epoch;
        result.best_model = model;
        save_checkpoint(model, rc.checkpoint_out);
        bad_epochs = 0;
      } else {
        ++bad_epochs;
        if (bad_epochs > rc.patience) {
          std::snprintf(buf, sizeof(buf), "early_stop epoch=%zu best_epoch=%zu", epoch,
                        result.best_epoch);
          result.log_lines.emplace_back(buf);
          break;
        }
      }
    }
  } catch (const TrainError& e) {
    result.log_lines.emplace_back(std::string("train_error ") + e.what());
    detail::write_lines(rc.log_out, result.log_lines);
    throw;
  }

  if (log->size() > 0) {
    const InstancePrediction p = result.best_model.predict_one(log->records[0]);
    std::snprintf(buf, sizeof(buf), "ref_pred row=0 p_ctr=%s p_cvr=%s",
                  detail::fmt_prob(p.p_ctr).c_str(), detail::fmt_prob(p.p_cvr).c_str());
    result.log_lines.emplace_back(buf);
  }
  std::snprintf(buf, sizeof(buf), "done best_epoch=%zu best_val_auc=%s",
                result.best_epoch,
                result.best_val_auc ? detail::fmt_prob(*result.best_val_auc).c_str()
                                    : "na");
  result.log_lines.emplace_back(buf);
  detail::write_lines(rc.log_out, result.log_lines);
  return result;
}

struct AblationResult {
  std::vector<std::string> modes;
  std::vector<MetricsReport> reports;  // one per mode, on the validation split

  // Per-group AUC deltas of the first mode against each other mode.
  std::string to_text() const {
    std::string out;
    char buf[256];
    auto line = [&](const char* fmt, auto... args) {
      std::snprintf(buf, sizeof(buf), fmt, args...);
      out += buf;
      out += '\n';
    };
    line("%-12s %-24s %12s", "group", "mode", "avg_auc");
    for (std::size_t m = 0; m < modes.size(); ++m) {
      line("%-12s %-24s %12s", "all", modes[m].c_str(),
           detail::fmt_opt(reports[m].average_auc, "%.4f").c_str());
    }
    out += '\n';
    for (std::size_t m = 1; m < modes.size(); ++m) {
      line("deltas: auc(%s) - auc(%s)", modes[0].c_str(), modes[m].c_str());
      auto dump = [&](const char* kind, const std::vector<GroupMetrics>& a,
                      const std::vector<GroupMetrics>& b) {
        for (std::size_t g = 0; g < a.size(); ++g) {
          if (a[g].auc_cvr && b[g].auc_cvr) {
            line("  %-10s %-10s %+.4f", kind, a[g].code.c_str(),
                 *a[g].auc_cvr - *b[g].auc_cvr);
          } else {
            line("  %-10s %-10s %s", kind, a[g].code.c_str(), "na");
          }
        }
      };
      dump("type", reports[0].per_type, reports[m].per_type);
      dump("scenario", reports[0].per_scenario, reports[m].per_scenario);
      out += '\n';
    }
    return out;
  }

  // Bar chart of the per-group deltas between the first two modes.
  void write_svg(const std::filesystem::path& path) const {
    if (modes.size() < 2) throw ConfigError("ablation plot needs >= 2 modes");
    struct Bar {
      std::string label;
      double delta;
    };
    std::vector<Bar> bars;
    auto collect = [&](const std::vector<GroupMetrics>& a,
                       const std::vector<GroupMetrics>& b) {
      for (std::size_t g = 0; g < a.size(); ++g) {
        if (a[g].auc_cvr && b[g].auc_cvr) {
          bars.push_back({a[g].code, *a[g].auc_cvr - *b[g].auc_cvr});
        }
      }
    };
    collect(reports[0].per_type, reports[1].per_type);
    collect(reports[0].per_scenario, reports[1].per_scenario);

    double max_abs = 1e-4;
    for (const auto& b : bars) max_abs = std::max(max_abs, std::fabs(b.delta));
    const double bar_w = 28.0, gap = 8.0, half_h = 140.0, margin = 48.0;
    const double width = margin * 2 + bars.size() * (bar_w + gap);
    const double mid = margin + half_h;

    std::string svg;
    char buf[512];
    auto add = [&](const char* fmt, auto... args) {
      std::snprintf(buf, sizeof(buf), fmt, args...);
      svg += buf;
    };
    add("<svg xmlns='http://www.w3.org/2000/svg' width='%.0f' height='%.0f'>\n", width,
        mid + half_h + margin);
    add("<text x='%.0f' y='24' font-size='14' font-family='monospace'>"
        "auc(%s) - auc(%s) per group</text>\n",
        margin, modes[0].c_str(), modes[1].c_str());
    add("<line x1='%.0f' y1='%.0f' x2='%.0f' y2='%.0f' stroke='black'/>\n", margin, mid,
        width - margin, mid);
    for (std::size_t i = 0; i < bars.size(); ++i) {
      const double x = margin + i * (bar_w + gap);
      const double h = std::fabs(bars[i].delta) / max_abs * half_h;
      const double y = bars[i].delta >= 0 ? mid - h : mid;
      add("<rect x='%.1f' y='%.1f' width='%.1f' height='%.1f' fill='%s'/>\n", x, y,
          bar_w, h, bars[i].delta >= 0 ? "#2b6cb0" : "#c53030");
      add("<text x='%.1f' y='%.1f' font-size='10' font-family='monospace' "
          "transform='rotate(60 %.1f %.1f)'>%s</text>\n",
          x, mid + half_h + 14, x, mid + half_h + 14, bars[i].label.c_str());
    }
    svg += "</svg>\n";

    const std::filesystem::path tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      if (!out) throw IoError("cannot write: " + tmp.string());
      out << svg;
    }
    std::filesystem::rename(tmp, path);
  }
};

// Trains each mode on identical data and seed; checkpoints land next to the
// configured path with the mode name appended.
inline AblationResult run_ablation(const RunConfig& base,
                                   const std::vector<std::string>& modes) {
  if (modes.size() < 2) throw ConfigError("ablation needs >= 2 modes");
  AblationResult out;
  DomainRegistry explicit_reg;
  const bool has_explicit = !base.types.empty() || !base.scenarios.empty();
  if (has_explicit) explicit_reg = DomainRegistry(base.types, base.scenarios);
  const ConversionLog log =
      load_tsv(base.data_path, base.schema(), has_explicit ? &explicit_reg : nullptr);
  for (const auto& mode_str : modes) {
    RunConfig rc = base;
    rc.mode = parse_mode(mode_str);
    rc.checkpoint_out = base.checkpoint_out.string() + "." + mode_str;
    if (!base.log_out.empty()) rc.log_out = base.log_out.string() + "." + mode_str;
    const TrainResult r = train(rc, &log);
    auto [train_view, val_view] = split_view(log, rc.train_fraction);
    out.modes.push_back(mode_str);
    out.reports.push_back(report(r.best_model, val_view));
  }
  return out;
}

}  // namespace mmn
