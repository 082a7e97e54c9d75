#pragma once

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "fdrec/baselines.hpp"
#include "fdrec/ensemble.hpp"
#include "fdrec/exprec.hpp"
#include "fdrec/reprec.hpp"
#include "fdrec/synthetic.hpp"

namespace fdrec {

/// Bad configuration content; the CLI maps it to a usage error.
struct ConfigError : Error {
  using Error::Error;
};

struct DataSection {
  std::filesystem::path interactions;
  std::filesystem::path catalog;  // optional
  int tz_offset_minutes = 0;
  int min_orders = 1;
  std::int64_t test_window_s = 14 * kSecondsPerDay;
  std::int64_t valid_window_s = 7 * kSecondsPerDay;
};

struct ModelSection {
  std::size_t dim = 64;
  std::size_t reprec_history = 50;
  std::size_t exprec_history = 20;
  std::size_t neighbors = 10;
  std::size_t attn_dim = 32;
  std::size_t intent_history = 20;
  TriggerMask ablate{};
};

/// Per-model optimizer settings; unset fields inherit from [train].
struct OptimSection {
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::size_t max_epochs = 100;
};

struct EnsembleSection {
  double intent_weight = 1.0;
  std::size_t intent_epochs = 20;
  std::size_t train_candidates = 100;
  std::size_t train_instances = 20000;
};

struct EvalSection {
  std::size_t k = 3;
  std::uint64_t seed = 1;
  std::size_t max_cases = 0;
};

struct AnalysisSection {
  int max_n = 30;
  std::int64_t cdf_window_s = 14 * kSecondsPerDay;
  std::size_t k = 10;
  std::int64_t t_delta_s = 7 * kSecondsPerDay;
};

struct RunConfig {
  std::filesystem::path source;  // config file; relative paths resolve against its directory
  std::filesystem::path out = "runs";
  DataSection data;
  bool synthetic = false;  // [synth] present and [data] has no interactions path
  SynthConfig synth;
  std::uint64_t synth_seed = 7;
  ModelSection model;
  TrainConfig train;
  std::map<std::string, OptimSection> optim;  // sonly, reprec, exprec, ensemble
  EnsembleSection ensemble;
  EvalSection eval;
  AnalysisSection analysis;

  /// Canonical key=value text of every effective setting (resolved paths).
  std::string canonical() const;

  TrainConfig train_for(const std::string& model) const {
    TrainConfig t = train;
    const auto& o = optim.at(model);
    t.adam.lr = o.lr;
    t.adam.weight_decay = o.weight_decay;
    t.max_epochs = o.max_epochs;
    return t;
  }
};

namespace detail {

using Ptree = boost::property_tree::ptree;

/// Reads typed keys out of one section and remembers which ones were seen.
class SectionReader {
 public:
  SectionReader(const Ptree* tree, std::string name) : tree_(tree), name_(std::move(name)) {}

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!tree_) return;
    auto v = tree_->get_optional<std::string>(key);
    if (!v) return;
    out = parse<T>(key, *v);
  }

  template <class T>
  void get(const std::string& key, T& out, T lo, T hi) {
    get(key, out);
    if (out < lo || out > hi) {
      std::ostringstream os;
      os << "[" << name_ << "] " << key << " = " << out << " out of range [" << lo << ", " << hi << "]";
      throw ConfigError(os.str());
    }
  }

  bool has(const std::string& key) const { return tree_ && tree_->get_child_optional(key); }

  void check_unknown() const {
    if (!tree_) return;
    for (const auto& [k, v] : *tree_)
      if (!seen_.count(k)) throw ConfigError("unknown key [" + name_ + "] " + k);
  }

 private:
  template <class T>
  T parse(const std::string& key, const std::string& text) const {
    T out{};
    std::istringstream is(text);
    if constexpr (std::is_same_v<T, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw ConfigError("[" + name_ + "] " + key + ": expected true/false, got '" + text + "'");
    } else {
      if constexpr (std::is_unsigned_v<T>)
        if (!text.empty() && text[0] == '-')
          throw ConfigError("[" + name_ + "] " + key + ": expected a non-negative value, got '" + text + "'");
      is >> out;
      if (is.fail() || !(is >> std::ws).eof())
        throw ConfigError("[" + name_ + "] " + key + ": cannot parse '" + text + "'");
    }
    return out;
  }

  const Ptree* tree_;
  std::string name_;
  std::set<std::string> seen_;
};

inline TriggerMask parse_ablate(const std::string& text) {
  TriggerMask m{};
  std::string tok;
  std::istringstream is(text);
  while (std::getline(is, tok, ',')) {
    auto a = tok.find_first_not_of(" \t"), b = tok.find_last_not_of(" \t");
    if (a == std::string::npos) continue;
    try {
      m[parse_trigger(tok.substr(a, b - a + 1))] = true;
    } catch (const Error& e) {
      throw ConfigError(std::string("[model] ablate: ") + e.what());
    }
  }
  if (std::all_of(m.begin(), m.end(), [](bool x) { return x; }))
    throw ConfigError("[model] ablate: cannot mask every trigger");
  return m;
}

inline std::string format_ablate(const TriggerMask& m) {
  std::string out;
  for (std::size_t i = 0; i < kNumTriggers; ++i)
    if (m[i]) out += (out.empty() ? "" : ",") + std::string(trigger_name(i));
  return out;
}

// The ptree reader drops sections without keys, so headers are found here.
inline bool has_section_header(const std::string& text, const std::string& name) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    auto b = line.find_first_not_of(" \t\r");
    auto e = line.find_last_not_of(" \t\r");
    if (b == std::string::npos || line[b] != '[' || line[e] != ']') continue;
    auto inner = line.substr(b + 1, e - b - 1);
    auto ib = inner.find_first_not_of(" \t"), ie = inner.find_last_not_of(" \t");
    if (ib != std::string::npos && inner.substr(ib, ie - ib + 1) == name) return true;
  }
  return false;
}

}  // namespace detail

/// Parses an INI config. Every key is checked; unknown sections or keys are
/// rejected so typos fail before any work starts.
inline RunConfig parse_config_text(const std::string& text, const std::filesystem::path& source = {}) {
  detail::Ptree pt;
  std::istringstream is(text);
  try {
    boost::property_tree::ini_parser::read_ini(is, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config syntax: " + std::string(e.message()) + " at line " + std::to_string(e.line()));
  }
  static const std::set<std::string> sections = {"run",    "data",     "synth", "model", "train",
                                                 "sonly",  "reprec",   "exprec", "ensemble", "eval",
                                                 "analysis"};
  for (const auto& [k, v] : pt) {
    if (v.empty() && !v.data().empty()) throw ConfigError("key outside a section: " + k);
    if (!sections.count(k)) throw ConfigError("unknown section [" + k + "]");
  }
  auto section = [&](const std::string& name) {
    auto c = pt.get_child_optional(name);
    return detail::SectionReader(c ? &*c : nullptr, name);
  };

  RunConfig cfg;
  cfg.source = source;
  const auto base = source.empty() ? std::filesystem::path{} : source.parent_path();
  auto resolve = [&](const std::filesystem::path& p) {
    if (p.empty()) return p;
    return std::filesystem::weakly_canonical(p.is_absolute() ? p : base / p);
  };

  {
    auto s = section("run");
    std::string out = cfg.out.string();
    s.get("out", out);
    cfg.out = resolve(out);
    s.check_unknown();
  }
  {
    auto s = section("data");
    std::string inter, cat;
    s.get("interactions", inter);
    s.get("catalog", cat);
    s.get("tz_offset_minutes", cfg.data.tz_offset_minutes, -24 * 60, 24 * 60);
    s.get("min_orders", cfg.data.min_orders, 1, 1 << 30);
    s.get("test_window_s", cfg.data.test_window_s, std::int64_t{1}, std::int64_t{1} << 40);
    s.get("valid_window_s", cfg.data.valid_window_s, std::int64_t{1}, std::int64_t{1} << 40);
    s.check_unknown();
    cfg.data.interactions = resolve(inter);
    cfg.data.catalog = resolve(cat);
  }
  {
    auto s = section("synth");
    auto& c = cfg.synth;
    const bool present = detail::has_section_header(text, "synth");
    s.get("seed", cfg.synth_seed);
    s.get("n_users", c.n_users);
    s.get("n_stores", c.n_stores);
    s.get("n_orders_per_user", c.n_orders_per_user);
    s.get("repeat_prob", c.repeat_prob);
    s.get("situation_coupling", c.situation_coupling);
    s.get("collab_coupling", c.collab_coupling);
    s.get("n_locations", c.n_locations);
    s.get("n_brands", c.n_brands);
    s.get("n_cuisines", c.n_cuisines);
    s.get("n_days", c.n_days);
    s.get("n_clusters", c.n_clusters);
    s.get("repeat_prob_spread", c.repeat_prob_spread);
    s.get("situation_sharpness", c.situation_sharpness);
    s.get("n_phases", c.n_phases);
    s.get("trend_boost", c.trend_boost);
    s.get("off_taste", c.off_taste);
    s.get("off_location", c.off_location);
    s.get("locations_per_cluster", c.locations_per_cluster);
    s.get("roaming", c.roaming);
    s.get("phase_days", c.phase_days);
    s.get("liked_cuisines", c.liked_cuisines);
    s.get("start_time", c.start_time);
    s.check_unknown();
    try {
      c.validate();
    } catch (const Error& e) {
      throw ConfigError(std::string("[synth] ") + e.what());
    }
    cfg.synthetic = present && cfg.data.interactions.empty();
  }
  if (cfg.data.interactions.empty() && !cfg.synthetic)
    throw ConfigError("[data] interactions is required unless a [synth] section is given");
  {
    auto s = section("model");
    auto& m = cfg.model;
    s.get("dim", m.dim, std::size_t{1}, std::size_t{4096});
    s.get("reprec_history", m.reprec_history);
    s.get("exprec_history", m.exprec_history);
    s.get("neighbors", m.neighbors, std::size_t{1}, std::size_t{1} << 20);
    s.get("attn_dim", m.attn_dim, std::size_t{1}, std::size_t{4096});
    s.get("intent_history", m.intent_history);
    std::string ablate;
    s.get("ablate", ablate);
    m.ablate = detail::parse_ablate(ablate);
    s.check_unknown();
    cfg.train.dim = m.dim;
  }
  OptimSection defaults;
  {
    auto s = section("train");
    auto& t = cfg.train;
    s.get("lr", defaults.lr, 0.0, 10.0);
    s.get("weight_decay", defaults.weight_decay, 0.0, 10.0);
    s.get("max_epochs", defaults.max_epochs, std::size_t{1}, std::size_t{100000});
    s.get("batch", t.batch, std::size_t{1}, std::size_t{1} << 24);
    s.get("patience", t.patience, std::size_t{1}, std::size_t{100000});
    s.get("valid_cases", t.valid_cases);
    s.get("seed", t.seed);
    s.get("beta1", t.adam.beta1, 0.0, 0.999999);
    s.get("beta2", t.adam.beta2, 0.0, 0.999999999);
    s.get("eps", t.adam.eps, 0.0, 1.0);
    s.check_unknown();
  }
  for (std::string name : {"sonly", "reprec", "exprec", "ensemble"}) {
    auto s = section(name);
    OptimSection o = defaults;
    s.get("lr", o.lr, 0.0, 10.0);
    s.get("weight_decay", o.weight_decay, 0.0, 10.0);
    s.get("max_epochs", o.max_epochs, std::size_t{1}, std::size_t{100000});
    if (name == "ensemble") {
      auto& e = cfg.ensemble;
      s.get("intent_weight", e.intent_weight, 0.0, 1e6);
      s.get("intent_epochs", e.intent_epochs);
      s.get("train_candidates", e.train_candidates, std::size_t{2}, kMaxCandidates);
      s.get("train_instances", e.train_instances);
    }
    s.check_unknown();
    cfg.optim[name] = o;
  }
  {
    auto s = section("eval");
    s.get("k", cfg.eval.k, std::size_t{1}, kMaxCandidates);
    s.get("seed", cfg.eval.seed);
    s.get("max_cases", cfg.eval.max_cases);
    s.check_unknown();
  }
  {
    auto s = section("analysis");
    auto& a = cfg.analysis;
    s.get("max_n", a.max_n, 2, 1 << 20);
    s.get("cdf_window_s", a.cdf_window_s, std::int64_t{1}, std::int64_t{1} << 40);
    s.get("k", a.k, std::size_t{1}, std::size_t{1} << 20);
    s.get("t_delta_s", a.t_delta_s, std::int64_t{1}, std::int64_t{1} << 40);
    s.check_unknown();
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

inline std::string RunConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  auto kv = [&](const std::string& k, const auto& v) { os << k << "=" << v << "\n"; };
  kv("data.interactions", data.interactions.string());
  kv("data.catalog", data.catalog.string());
  kv("data.tz_offset_minutes", data.tz_offset_minutes);
  kv("data.min_orders", data.min_orders);
  kv("data.test_window_s", data.test_window_s);
  kv("data.valid_window_s", data.valid_window_s);
  if (synthetic) {
    const auto& c = synth;
    kv("synth.seed", synth_seed);
    kv("synth.n_users", c.n_users);
    kv("synth.n_stores", c.n_stores);
    kv("synth.n_orders_per_user", c.n_orders_per_user);
    kv("synth.repeat_prob", c.repeat_prob);
    kv("synth.situation_coupling", c.situation_coupling);
    kv("synth.collab_coupling", c.collab_coupling);
    kv("synth.n_locations", c.n_locations);
    kv("synth.n_brands", c.n_brands);
    kv("synth.n_cuisines", c.n_cuisines);
    kv("synth.n_days", c.n_days);
    kv("synth.n_clusters", c.n_clusters);
    kv("synth.repeat_prob_spread", c.repeat_prob_spread);
    kv("synth.situation_sharpness", c.situation_sharpness);
    kv("synth.n_phases", c.n_phases);
    kv("synth.trend_boost", c.trend_boost);
    kv("synth.off_taste", c.off_taste);
    kv("synth.off_location", c.off_location);
    kv("synth.locations_per_cluster", c.locations_per_cluster);
    kv("synth.roaming", c.roaming);
    kv("synth.phase_days", c.phase_days);
    kv("synth.liked_cuisines", c.liked_cuisines);
    kv("synth.start_time", c.start_time);
  }
  kv("model.dim", model.dim);
  kv("model.reprec_history", model.reprec_history);
  kv("model.exprec_history", model.exprec_history);
  kv("model.neighbors", model.neighbors);
  kv("model.attn_dim", model.attn_dim);
  kv("model.intent_history", model.intent_history);
  kv("model.ablate", detail::format_ablate(model.ablate));
  kv("train.batch", train.batch);
  kv("train.patience", train.patience);
  kv("train.valid_cases", train.valid_cases);
  kv("train.beta1", train.adam.beta1);
  kv("train.beta2", train.adam.beta2);
  kv("train.eps", train.adam.eps);
  for (const auto& [name, o] : optim) {
    kv(name + ".lr", o.lr);
    kv(name + ".weight_decay", o.weight_decay);
    kv(name + ".max_epochs", o.max_epochs);
  }
  kv("ensemble.intent_weight", ensemble.intent_weight);
  kv("ensemble.intent_epochs", ensemble.intent_epochs);
  kv("ensemble.train_candidates", ensemble.train_candidates);
  kv("ensemble.train_instances", ensemble.train_instances);
  kv("eval.k", eval.k);
  kv("eval.seed", eval.seed);
  kv("eval.max_cases", eval.max_cases);
  kv("analysis.max_n", analysis.max_n);
  kv("analysis.cdf_window_s", analysis.cdf_window_s);
  kv("analysis.k", analysis.k);
  kv("analysis.t_delta_s", analysis.t_delta_s);
  return os.str();
}

/// FNV-1a over the canonical text, as 8 hex digits.
inline std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : cfg.canonical()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf, 8);
}

/// run-<hash8>-s<seed> under the configured output root; every setting but
/// the training seed goes into the hash.
inline std::filesystem::path run_directory(const RunConfig& cfg) {
  return cfg.out / ("run-" + config_hash(cfg) + "-s" + std::to_string(cfg.train.seed));
}

}  // namespace fdrec
