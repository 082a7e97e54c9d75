#pragma once

#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "fdrec/analysis.hpp"
#include "fdrec/config.hpp"

namespace fdrec {

/// Usage problems (bad flags, incompatible model/protocol); exit code 2.
struct UsageError : Error {
  using Error::Error;
};

struct Dataset {
  std::shared_ptr<const InteractionLog> log;
  DatasetSplit split;
};

/// Raw log from the config: parsed files or the synthetic generator, then
/// the single-pass user filter.
inline std::shared_ptr<const InteractionLog> load_log(const RunConfig& cfg) {
  InteractionLog raw = cfg.synthetic
                           ? generate_synthetic(cfg.synth, cfg.synth_seed)
                           : parse_interactions(cfg.data.interactions.string(), cfg.data.tz_offset_minutes,
                                                cfg.data.catalog.string());
  if (cfg.data.min_orders > 1) raw = filter_users(raw, cfg.data.min_orders);
  if (raw.empty()) throw Error("no interactions left after filtering (min_orders = " +
                               std::to_string(cfg.data.min_orders) + ")");
  return std::make_shared<const InteractionLog>(std::move(raw));
}

inline Dataset load_dataset(const RunConfig& cfg) {
  Dataset d;
  d.log = load_log(cfg);
  d.split = split_global_timeline(d.log, cfg.data.test_window_s, cfg.data.valid_window_s);
  return d;
}

/// Exclusive claim on a run directory; released on destruction.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error("cannot create run directory " + dir.string() + ": " + ec.message());
    std::FILE* f = std::fopen(path_.string().c_str(), "wx");
    if (!f) throw Error("run directory is locked by another process: " + path_.string());
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

// ---- manifest -------------------------------------------------------------

inline nlohmann::json split_manifest(const RunConfig& cfg, const Dataset& d) {
  const auto& log = *d.log;
  nlohmann::json j;
  j["config_hash"] = config_hash(cfg);
  j["source"] = cfg.synthetic ? "synthetic" : cfg.data.interactions.string();
  j["min_orders"] = cfg.data.min_orders;
  j["users"] = log.num_users();
  j["stores"] = log.num_stores();
  j["orders"] = log.size();
  std::size_t rep = 0;
  for (auto f : d.split.repeat) rep += f;
  j["repeat_fraction"] = log.empty() ? 0.0 : static_cast<double>(rep) / static_cast<double>(log.size());
  j["epoch"] = log.epoch();
  j["valid_begin"] = d.split.valid_begin;
  j["test_begin"] = d.split.test_begin;
  for (auto p : {Partition::Train, Partition::Valid, Partition::Test}) {
    std::size_t r = 0;
    for (std::size_t i = d.split.begin(p); i < d.split.end(p); ++i) r += d.split.repeat[i];
    j["partitions"][partition_name(p)] = {{"rows", d.split.count(p)}, {"repeat", r}};
  }
  return j;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
  if (!out) throw Error("write failed: " + p.string());
}

// ---- models ---------------------------------------------------------------

inline const std::vector<std::string>& trainable_models() {
  static const std::vector<std::string> m = {"sonly", "reprec", "exprec", "ensemble"};
  return m;
}

inline const std::vector<std::string>& evaluable_models() {
  static const std::vector<std::string> m = {"hispop", "sonly", "reprec", "exprec", "ensemble", "concat"};
  return m;
}

/// Protocols each model can score. HisPop and RepRec only rank stores the
/// user has visited; ExpRec only unvisited ones; the ensemble and the plain
/// concatenation need both halves of a combined case.
inline std::vector<Protocol> supported_protocols(const std::string& model) {
  if (model == "hispop" || model == "reprec") return {Protocol::Repeat};
  if (model == "exprec") return {Protocol::Exploration};
  if (model == "ensemble" || model == "concat") return {Protocol::Combined};
  if (model == "sonly") return {Protocol::Repeat, Protocol::Exploration, Protocol::Combined};
  throw UsageError("unknown model '" + model + "'");
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, const std::string& model) {
  return run_dir / (model + ".ckpt");
}

using EpochLog = std::function<void(const std::string&, const EpochRecord&)>;

namespace detail {

inline Checkpoint read_checked(const std::filesystem::path& run_dir, const std::string& model,
                               const RunConfig& cfg) {
  auto p = checkpoint_path(run_dir, model);
  if (!std::filesystem::exists(p))
    throw Error("missing checkpoint " + p.string() + " (run `fdrec train --model " + model + "` first)");
  auto c = read_checkpoint(p.string());
  if (c.meta["model"] != model) throw Error(p.string() + ": checkpoint holds model '" + c.meta["model"] + "'");
  if (c.meta["config_hash"] != config_hash(cfg)) throw Error(p.string() + ": checkpoint was trained with another config");
  return c;
}

inline void save_trained(const std::filesystem::path& run_dir, const std::string& model, const RunConfig& cfg,
                         const ModelState& state, const TrainHistory& h) {
  std::map<std::string, std::string> meta = {{"model", model},
                                             {"config_hash", config_hash(cfg)},
                                             {"best_epoch", std::to_string(h.best_epoch)},
                                             {"epochs", std::to_string(h.epochs.size())}};
  save_checkpoint(state, meta, checkpoint_path(run_dir, model).string());
  std::ostringstream os;
  os << "epoch\tloss\tvalid\n";
  for (const auto& e : h.epochs) os << e.epoch << '\t' << detail::fmt_real(e.loss) << '\t' << detail::fmt_real(e.valid) << '\n';
  write_text(run_dir / ("train-" + model + ".tsv"), os.str());
}

inline ExpRecConfig exprec_config(const RunConfig& cfg) {
  ExpRecConfig x;
  x.train = cfg.train_for("exprec");
  x.history_limit = cfg.model.exprec_history;
  x.neighbors = cfg.model.neighbors;
  x.ablate = cfg.model.ablate;
  return x;
}

}  // namespace detail

inline SOnlyModel load_sonly(const RunConfig& cfg, const Dataset& d, const std::filesystem::path& run_dir) {
  auto m = SOnlyModel::create(d.log->num_stores(), LocationMap::from_split(d.split), cfg.model.dim, cfg.train.seed);
  load_into(m.state, detail::read_checked(run_dir, "sonly", cfg));
  return m;
}

inline RepRecModel load_reprec(const RunConfig& cfg, const Dataset& d, const std::filesystem::path& run_dir) {
  auto m = RepRecModel::create(d.log->num_stores(), LocationMap::from_split(d.split), cfg.model.dim, cfg.train.seed,
                               cfg.model.reprec_history);
  load_into(m.state, detail::read_checked(run_dir, "reprec", cfg));
  return m;
}

inline ExpRecModel load_exprec(const RunConfig& cfg, const Dataset& d, const std::filesystem::path& run_dir) {
  auto m = ExpRecModel::create(d.log->num_stores(), d.log->num_users(), LocationMap::from_split(d.split),
                               cfg.model.dim, cfg.train.seed);
  m.history_limit = cfg.model.exprec_history;
  m.ablate = cfg.model.ablate;
  load_into(m.state, detail::read_checked(run_dir, "exprec", cfg));
  m.neighbors = frozen_neighbors(d.split, cfg.model.neighbors);
  return m;
}

inline EnsembleModel load_ensemble(const RunConfig& cfg, const Dataset& d, const std::filesystem::path& run_dir) {
  auto m = EnsembleModel::create(d.log->num_users(), LocationMap::from_split(d.split), cfg.model.dim,
                                 cfg.model.attn_dim, cfg.train.seed);
  m.history_limit = cfg.model.intent_history;
  load_into(m.state, detail::read_checked(run_dir, "ensemble", cfg));
  return m;
}

/// Trains one model and writes `<model>.ckpt` plus `train-<model>.tsv`.
/// The ensemble requires the RepRec and ExpRec checkpoints. Returns the
/// parameter count.
inline std::size_t train_model(const RunConfig& cfg, const Dataset& d, const std::filesystem::path& run_dir,
                               const std::string& model, const EpochLog& log = {}) {
  auto lg = [&](const EpochRecord& r) {
    if (log) log(model, r);
  };
  TrainHistory h;
  if (model == "sonly") {
    auto m = sonly_train(d.split, cfg.train_for("sonly"), &h, lg);
    detail::save_trained(run_dir, model, cfg, m.state, h);
    return m.state.parameter_count();
  }
  if (model == "reprec") {
    RepRecConfig rc{cfg.train_for("reprec"), cfg.model.reprec_history};
    auto m = reprec_train(d.split, rc, &h, lg);
    detail::save_trained(run_dir, model, cfg, m.state, h);
    return m.state.parameter_count();
  }
  if (model == "exprec") {
    auto m = exprec_train(d.split, detail::exprec_config(cfg), &h, lg);
    detail::save_trained(run_dir, model, cfg, m.state, h);
    return m.state.parameter_count();
  }
  if (model == "ensemble") {
    auto rr = load_reprec(cfg, d, run_dir);
    auto er = load_exprec(cfg, d, run_dir);
    EnsembleConfig ec;
    ec.train = cfg.train_for("ensemble");
    ec.attn_dim = cfg.model.attn_dim;
    ec.history_limit = cfg.model.intent_history;
    ec.intent_weight = cfg.ensemble.intent_weight;
    ec.intent_epochs = cfg.ensemble.intent_epochs;
    ec.train_candidates = cfg.ensemble.train_candidates;
    ec.train_instances = cfg.ensemble.train_instances;
    auto m = ensemble_train(d.split, rr, er, ec, &h, lg);
    detail::save_trained(run_dir, model, cfg, m.state, h);
    return m.state.parameter_count();
  }
  throw UsageError("cannot train model '" + model + "' (choose sonly, reprec, exprec or ensemble)");
}

/// Evaluates a model on the requested protocols and merges the result into
/// `report-<model>.json` (metrics for other protocols already in the file are
/// kept).
inline MetricsReport evaluate_model(const RunConfig& cfg, const Dataset& d, const std::filesystem::path& run_dir,
                                    const std::string& model, const std::vector<Protocol>& protocols) {
  auto ok = supported_protocols(model);
  for (auto p : protocols)
    if (std::find(ok.begin(), ok.end(), p) == ok.end())
      throw UsageError("model '" + model + "' cannot be evaluated on the " + protocol_name(p) + " protocol");

  MetricsReport rep;
  auto path = run_dir / ("report-" + model + ".json");
  if (std::filesystem::exists(path)) rep = MetricsReport::read(path.string());
  rep.model = model;
  rep.seed = cfg.eval.seed;
  rep.k = cfg.eval.k;

  auto cases_for = [&](Protocol p) { return build_cases(d.split, p, cfg.eval.seed, Partition::Test, cfg.eval.max_cases); };
  auto run = [&](const CaseScorer& scorer) {
    for (auto p : protocols) rep.protocols[protocol_name(p)] = evaluate(scorer, cases_for(p), cfg.eval.k);
  };

  if (model == "hispop") {
    rep.parameter_counts = {{"hispop", 0}};
    run(hispop_scorer(d.split));
  } else if (model == "sonly") {
    auto m = load_sonly(cfg, d, run_dir);
    rep.parameter_counts = {{"sonly", m.state.parameter_count()}};
    run(sonly_scorer(m, d.split));
  } else if (model == "reprec") {
    auto m = load_reprec(cfg, d, run_dir);
    rep.parameter_counts = {{"reprec", m.state.parameter_count()}};
    run(reprec_scorer(m, d.split));
  } else if (model == "exprec") {
    auto m = load_exprec(cfg, d, run_dir);
    rep.parameter_counts = {{"exprec", m.state.parameter_count()}};
    run(exprec_scorer(m, d.split));
  } else {
    auto rr = load_reprec(cfg, d, run_dir);
    auto er = load_exprec(cfg, d, run_dir);
    rep.parameter_counts = {{"reprec", rr.state.parameter_count()}, {"exprec", er.state.parameter_count()}};
    if (model == "ensemble") {
      auto m = load_ensemble(cfg, d, run_dir);
      rep.parameter_counts["ensemble"] = m.state.parameter_count();
      run(ensemble_scorer(m, rr, er, d.split));
    } else {
      run(concat_scorer(rr, er, d.split));
    }
  }
  rep.write(path.string());
  return rep;
}

/// Markdown summary of every `report-*.json` in the run directory. Metrics
/// are copied, never recomputed.
inline std::string summarize_reports(const std::filesystem::path& run_dir) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(run_dir))
    for (const auto& e : std::filesystem::directory_iterator(run_dir)) {
      auto name = e.path().filename().string();
      if (name.rfind("report-", 0) == 0 && e.path().extension() == ".json") files.push_back(e.path());
    }
  if (files.empty()) throw Error("no report-*.json files in " + run_dir.string() + " (run `fdrec eval` first)");
  std::sort(files.begin(), files.end());

  std::ostringstream os;
  os << "| model | protocol | HR@K | NDCG@K | K | cases | parameters |\n";
  os << "|---|---|---|---|---|---|---|\n";
  for (const auto& f : files) {
    auto r = MetricsReport::read(f.string());
    std::size_t params = 0;
    for (const auto& [name, n] : r.parameter_counts) params += n;
    for (auto p : {Protocol::Repeat, Protocol::Exploration, Protocol::Combined}) {
      auto it = r.protocols.find(protocol_name(p));
      if (it == r.protocols.end()) continue;
      os << "| " << r.model << " | " << it->first << " | " << detail::fmt_real(it->second.hr) << " | "
         << detail::fmt_real(it->second.ndcg) << " | " << r.k << " | " << it->second.n << " | " << params << " |\n";
    }
  }
  return os.str();
}

inline AnalysisOptions analysis_options(const RunConfig& cfg) {
  AnalysisOptions o;
  o.max_n = cfg.analysis.max_n;
  o.cdf_window_s = cfg.analysis.cdf_window_s;
  o.k = cfg.analysis.k;
  o.t_delta_s = cfg.analysis.t_delta_s;
  return o;
}

}  // namespace fdrec
