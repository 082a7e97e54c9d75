// fdrec: ingest, synth, analyze, train, eval and report over one config file.

#include <CLI11.hpp>
#include <cstdio>
#include <exception>
#include <iostream>

#include "fdrec/pipeline.hpp"

namespace fs = std::filesystem;
using namespace fdrec;

namespace {

void print_chain(const std::exception& e, int depth = 0) {
  std::cerr << (depth == 0 ? "fdrec: error: " : "  caused by: ") << e.what() << "\n";
  try {
    std::rethrow_if_nested(e);
  } catch (const std::exception& inner) {
    print_chain(inner, depth + 1);
  } catch (...) {
  }
}

template <class F>
auto step(const std::string& what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const UsageError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    std::throw_with_nested(Error(what));
  }
}

void progress(const std::string& model, const EpochRecord& r) {
  std::fprintf(stderr, "[%s] epoch %zu loss %.6f valid %.6f\n", model.c_str(), r.epoch, r.loss, r.valid);
}

std::vector<Protocol> protocols_from_flag(const std::string& flag, const std::string& model) {
  if (flag == "all") return supported_protocols(model);
  return {parse_protocol(flag)};
}

std::string synth_config_text() {
  return "; written by fdrec synth\n"
         "[data]\n"
         "interactions = interactions.tsv\n"
         "catalog = catalog.tsv\n"
         "\n"
         "[run]\n"
         "out = runs\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fdrec: repeat and exploration recommendation for food delivery logs"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::string config_path, model, protocol = "all", out_dir;
  std::uint64_t seed = 7;

  auto* ingest = app.add_subcommand("ingest", "parse, filter and split; write the split manifest");
  ingest->add_option("--config", config_path, "config file")->required();

  auto* synth = app.add_subcommand("synth", "write a synthetic interaction log and catalog");
  synth->add_option("--seed", seed, "generator seed");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--config", config_path, "read generator settings from this config's [synth] section");

  auto* analyze = app.add_subcommand("analyze", "behavioral analysis CSVs");
  analyze->add_option("--config", config_path, "config file")->required();
  analyze->add_option("--out", out_dir, "output directory (default: <run dir>/analysis)");

  auto* train = app.add_subcommand("train", "train a model and write its checkpoint");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--model", model, "model")->required()->check(CLI::IsMember(trainable_models()));

  auto* eval = app.add_subcommand("eval", "evaluate a model and write its metrics report");
  eval->add_option("--config", config_path, "config file")->required();
  eval->add_option("--model", model, "model")->required()->check(CLI::IsMember(evaluable_models()));
  eval->add_option("--protocol", protocol, "repeat, exploration, combined or all")
      ->check(CLI::IsMember({"repeat", "exploration", "combined", "all"}));

  auto* report = app.add_subcommand("report", "aggregate metrics reports into one table");
  report->add_option("--config", config_path, "config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) {
      SynthConfig sc;
      if (!config_path.empty()) sc = load_config(config_path).synth;
      sc.validate();
      fs::create_directories(out_dir);
      auto log = step("generating synthetic data", [&] { return generate_synthetic(sc, seed); });
      write_interactions(log, (fs::path(out_dir) / "interactions.tsv").string());
      write_catalog(log, (fs::path(out_dir) / "catalog.tsv").string());
      write_text(fs::path(out_dir) / "cfg", synth_config_text());
      std::cout << "wrote " << log.size() << " interactions to " << out_dir << "\n";
      return 0;
    }

    const RunConfig cfg = load_config(config_path);
    const fs::path run_dir = run_directory(cfg);

    if (report->parsed()) {
      auto table = step("summarizing reports", [&] { return summarize_reports(run_dir); });
      write_text(run_dir / "summary.md", table);
      std::cout << table;
      return 0;
    }

    if (eval->parsed()) {
      // Reject incompatible model/protocol pairs before loading anything.
      auto protos = protocols_from_flag(protocol, model);
      auto ok = supported_protocols(model);
      for (auto p : protos)
        if (std::find(ok.begin(), ok.end(), p) == ok.end())
          throw UsageError("model '" + model + "' cannot be evaluated on the " + protocol_name(p) + " protocol");
      RunLock lock(run_dir);
      auto d = step("loading dataset", [&] { return load_dataset(cfg); });
      auto rep = step("evaluating " + model, [&] { return evaluate_model(cfg, d, run_dir, model, protos); });
      for (auto p : protos) {
        const auto& m = rep.protocols.at(protocol_name(p));
        std::printf("%s %s hr@%zu %.6f ndcg@%zu %.6f n %zu\n", model.c_str(), protocol_name(p), rep.k, m.hr, rep.k,
                    m.ndcg, m.n);
      }
      return 0;
    }

    RunLock lock(run_dir);
    write_text(run_dir / "config.canonical", cfg.canonical());

    if (ingest->parsed()) {
      auto d = step("loading dataset", [&] { return load_dataset(cfg); });
      auto j = split_manifest(cfg, d);
      write_text(run_dir / "split.json", j.dump(2) + "\n");
      std::cout << run_dir.string() << "\n";
      return 0;
    }

    if (analyze->parsed()) {
      auto log = step("loading dataset", [&] { return load_log(cfg); });
      fs::path dest = out_dir.empty() ? run_dir / "analysis" : fs::path(out_dir);
      auto res = step("running analysis", [&] { return run_analysis(*log, analysis_options(cfg)); });
      step("writing analysis CSVs", [&] { emit_analysis_report(res, dest); });
      std::cout << dest.string() << "\n";
      return 0;
    }

    if (train->parsed()) {
      auto d = step("loading dataset", [&] { return load_dataset(cfg); });
      auto n = step("training " + model, [&] { return train_model(cfg, d, run_dir, model, progress); });
      std::cout << model << " parameters " << n << " checkpoint " << checkpoint_path(run_dir, model).string() << "\n";
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "fdrec: usage error: " << e.what() << "\n" << app.help();
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "fdrec: config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    print_chain(e);
    return 1;
  }
  return 2;
}
