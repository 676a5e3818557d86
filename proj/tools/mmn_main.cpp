// Command-line entry point: gen-data, train, eval, predict, serve, ablate.
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "mmn/mmn.hpp"

namespace {

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

std::string fmt_prob(double v) {
  if (std::isnan(v)) return "na";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int cmd_gen_data(const std::string& spec_path, const std::string& out_path,
                 std::string truth_path) {
  const mmn::Config cfg = mmn::Config::from_file(spec_path);
  const mmn::SyntheticSpec spec = mmn::SyntheticSpec::from_config(cfg);
  cfg.reject_unknown_keys();
  if (truth_path.empty()) truth_path = out_path + ".truth";

  const mmn::ConversionLog log = mmn::generate(spec);
  mmn::save_tsv(log, out_path);
  mmn::write_truth_sidecar(spec, truth_path);

  double lo = 1.0, hi = 0.0;
  for (std::size_t i = 0; i < spec.num_types; ++i) {
    for (std::size_t j = 0; j < spec.num_scenarios; ++j) {
      const double cvr = spec.domain_cvr(i, j);
      lo = std::min(lo, cvr);
      hi = std::max(hi, cvr);
    }
  }
  std::printf("wrote %zu records to %s\n", log.size(), out_path.c_str());
  std::printf("domains %zu, ground-truth ctr %.6f, cvr range [%.6f, %.6f]\n",
              spec.num_domains(), spec.domain_ctr(), lo, hi);
  std::printf("truth sidecar: %s\n", truth_path.c_str());
  return 0;
}

int cmd_train(const std::string& config_path) {
  const mmn::RunConfig rc = mmn::RunConfig::from_file(config_path);
  const mmn::TrainResult result = mmn::train(rc);
  for (const auto& line : result.log_lines) std::printf("%s\n", line.c_str());
  std::printf("checkpoint: %s\n", result.checkpoint_path.c_str());
  std::printf("dataset_files_opened: %zu\n", result.dataset_files_opened);
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& report_path, const std::string& kv_path) {
  const mmn::MmnModel model = mmn::load_checkpoint(ckpt_path);
  const mmn::DomainRegistry& reg = model.registry();
  const mmn::ConversionLog log = mmn::load_tsv(data_path, model.schema(), &reg);
  if (log.size() == 0) throw mmn::ConfigError("evaluation data is empty");
  const mmn::MetricsReport rep = mmn::report(model, mmn::LogView(log));
  const std::string text = rep.to_text();
  std::fputs(text.c_str(), stdout);
  if (!report_path.empty()) {
    std::ofstream out(report_path, std::ios::trunc);
    if (!out) throw mmn::IoError("cannot write: " + report_path);
    out << text;
  }
  if (!kv_path.empty()) rep.write_kv(kv_path);
  return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& in_path,
                const std::string& out_path) {
  const mmn::MmnModel model = mmn::load_checkpoint(ckpt_path);
  std::ifstream in(in_path);
  if (!in) throw mmn::IoError("cannot open log file: " + in_path);
  const std::string tmp = out_path + ".tmp";
  std::ofstream out(tmp, std::ios::trunc);
  if (!out) throw mmn::IoError("cannot write: " + tmp);

  std::string line;
  std::size_t line_no = 0, ok = 0, failed = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') {
      out << line << '\n';
      continue;
    }
    try {
      const mmn::FeatureVector rec =
          mmn::parse_tsv_record(line, model.schema(), model.registry(), line_no);
      const mmn::InstancePrediction p = model.predict_one(rec);
      out << line << '\t' << fmt_prob(p.p_ctr) << '\t' << fmt_prob(p.p_cvr) << '\n';
      ++ok;
    } catch (const mmn::Error& e) {
      out << line << "\tERR\t" << e.what() << '\n';
      ++failed;
    }
  }
  out.close();
  std::filesystem::rename(tmp, out_path);
  std::printf("predicted %zu records, %zu errors, wrote %s\n", ok, failed,
              out_path.c_str());
  return 0;
}

int cmd_serve(const std::string& ckpt_path, int port, int workers) {
  mmn::MmnModel model = mmn::load_checkpoint(ckpt_path);
  mmn::PredictionServer server(
      std::move(model),
      {static_cast<std::uint16_t>(port), static_cast<std::size_t>(workers)});
  server.start();
  std::printf("listening on 127.0.0.1:%u workers=%d\n", server.port(), workers);
  std::fflush(stdout);

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!server.shutdown_requested() && !g_interrupted.load()) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  server.stop();
  const mmn::PredictionServer::Stats s = server.stats();
  std::printf("served %llu requests, latency p50 %.1f us, p99 %.1f us\n",
              static_cast<unsigned long long>(s.requests), s.p50_us, s.p99_us);
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& modes_csv,
               const std::string& table_path, const std::string& svg_path) {
  const mmn::RunConfig rc = mmn::RunConfig::from_file(config_path);
  const std::vector<std::string> modes = mmn::RunConfig::split_list(modes_csv);
  const mmn::AblationResult result = mmn::run_ablation(rc, modes);
  const std::string text = result.to_text();
  std::fputs(text.c_str(), stdout);
  if (!table_path.empty()) {
    std::ofstream out(table_path, std::ios::trunc);
    if (!out) throw mmn::IoError("cannot write: " + table_path);
    out << text;
  }
  if (!svg_path.empty()) result.write_svg(svg_path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-domain conversion-rate model toolkit"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic conversion log");
  std::string gen_spec, gen_out, gen_truth;
  gen->add_option("--spec", gen_spec, "synthetic spec config file")->required();
  gen->add_option("--out", gen_out, "output TSV path")->required();
  gen->add_option("--truth", gen_truth, "truth sidecar path (default: <out>.truth)");

  auto* train = app.add_subcommand("train", "train a model from a run config");
  std::string train_config;
  train->add_option("--config", train_config, "run config file")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a TSV log");
  std::string eval_ckpt, eval_data, eval_report, eval_kv;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
  eval->add_option("--data", eval_data, "TSV log path")->required();
  eval->add_option("--report", eval_report, "write the text report here");
  eval->add_option("--kv", eval_kv, "write the key-value report here");

  auto* predict = app.add_subcommand("predict", "append p_ctr/p_cvr columns to a log");
  std::string pred_ckpt, pred_in, pred_out;
  predict->add_option("--checkpoint", pred_ckpt, "checkpoint path")->required();
  predict->add_option("--in", pred_in, "input TSV path")->required();
  predict->add_option("--out", pred_out, "output TSV path")->required();

  auto* serve = app.add_subcommand("serve", "serve predictions over TCP");
  std::string serve_ckpt;
  int serve_port = 0, serve_workers = 4;
  serve->add_option("--checkpoint", serve_ckpt, "checkpoint path")->required();
  serve->add_option("--port", serve_port, "port (0 picks one)")
      ->check(CLI::Range(0, 65535));
  serve->add_option("--workers", serve_workers, "worker threads")
      ->check(CLI::Range(1, 256));

  auto* ablate = app.add_subcommand("ablate", "train several modes on one dataset");
  std::string abl_config, abl_modes, abl_table, abl_svg;
  ablate->add_option("--config", abl_config, "run config file")->required();
  ablate->add_option("--modes", abl_modes, "comma-separated mode list")->required();
  ablate->add_option("--table", abl_table, "write the delta table here");
  ablate->add_option("--svg", abl_svg, "write a delta bar chart here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_spec, gen_out, gen_truth);
    if (train->parsed()) return cmd_train(train_config);
    if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_report, eval_kv);
    if (predict->parsed()) return cmd_predict(pred_ckpt, pred_in, pred_out);
    if (serve->parsed()) return cmd_serve(serve_ckpt, serve_port, serve_workers);
    if (ablate->parsed()) return cmd_ablate(abl_config, abl_modes, abl_table, abl_svg);
  } catch (const mmn::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const mmn::ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return 2;
  } catch (const mmn::IoError& e) {
    const std::string msg = e.what();
    std::fprintf(stderr, "io error: %s\n", msg.c_str());
    return msg.rfind("cannot open", 0) == 0 ? 2 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
