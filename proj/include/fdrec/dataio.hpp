#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fdrec/common.hpp"

namespace fdrec {

using UserId = std::uint32_t;
using StoreId = std::uint32_t;
using LocationId = std::uint32_t;

constexpr std::int64_t kSecondsPerDay = 86400;

/// Dense interning of opaque string ids; index order is first appearance.
class Vocab {
 public:
  std::uint32_t intern(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it != index_.end()) return it->second;
    auto id = static_cast<std::uint32_t>(names_.size());
    names_.emplace_back(name);
    index_.emplace(names_.back(), id);
    return id;
  }
  std::optional<std::uint32_t> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  const std::string& name(std::uint32_t id) const { return names_.at(id); }
  std::size_t size() const { return names_.size(); }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

struct Interaction {
  UserId user = 0;
  StoreId store = 0;
  std::int64_t time = 0;  // unix seconds, UTC
  LocationId location = 0;
};

/// Store attributes, interned per attribute kind.
struct StoreMeta {
  std::uint32_t brand = 0;
  std::uint32_t cuisine = 0;
  std::uint32_t location = 0;
};

struct SituationFeatures {
  int day_index = 0;
  int hour = 0;
  int day_of_week = 0;  // 0 = Monday
  LocationId location = 0;
};

/// Calendar facets of a unix time shifted by a fixed UTC offset.
inline SituationFeatures situation_at(std::int64_t time, LocationId location, std::int64_t epoch,
                                      int tz_offset_minutes) {
  auto floor_div = [](std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    return (a % b != 0 && (a < 0) != (b < 0)) ? q - 1 : q;
  };
  std::int64_t shift = static_cast<std::int64_t>(tz_offset_minutes) * 60;
  std::int64_t local = time + shift;
  std::int64_t day = floor_div(local, kSecondsPerDay);
  std::int64_t sec_of_day = local - day * kSecondsPerDay;
  SituationFeatures f;
  f.day_index = static_cast<int>(day - floor_div(epoch + shift, kSecondsPerDay));
  f.hour = static_cast<int>(sec_of_day / 3600);
  // 1970-01-01 was a Thursday (index 3 with Monday = 0).
  f.day_of_week = static_cast<int>(((day + 3) % 7 + 7) % 7);
  f.location = location;
  return f;
}

/// Time-ordered interaction log with its store catalog and interned ids.
/// Immutable once built; construct through LogBuilder.
class InteractionLog {
 public:
  std::span<const Interaction> rows() const { return rows_; }
  const Interaction& row(std::size_t i) const { return rows_[i]; }
  std::size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }

  /// Row positions of one user in time order.
  std::span<const std::uint32_t> user_rows(UserId u) const { return by_user_[u]; }
  /// Position of row i within its user's sequence.
  std::uint32_t rank_in_user(std::size_t i) const { return rank_[i]; }

  std::size_t num_users() const { return users_.size(); }
  std::size_t num_stores() const { return stores_.size(); }
  std::size_t num_locations() const { return locations_.size(); }

  const Vocab& users() const { return users_; }
  const Vocab& stores() const { return stores_; }
  const Vocab& locations() const { return locations_; }
  const Vocab& brands() const { return brands_; }
  const Vocab& cuisines() const { return cuisines_; }
  const Vocab& store_locations() const { return store_locations_; }

  bool has_catalog() const { return has_catalog_; }
  const StoreMeta& store_meta(StoreId s) const { return catalog_[s]; }

  std::int64_t epoch() const { return epoch_; }
  std::int64_t last_time() const { return rows_.empty() ? 0 : rows_.back().time; }
  int tz_offset_minutes() const { return tz_offset_minutes_; }

  SituationFeatures situation(std::size_t i) const {
    return situation_at(rows_[i].time, rows_[i].location, epoch_, tz_offset_minutes_);
  }
  SituationFeatures situation_of(std::int64_t time, LocationId loc) const {
    return situation_at(time, loc, epoch_, tz_offset_minutes_);
  }

 private:
  friend class LogBuilder;

  std::vector<Interaction> rows_;
  std::vector<std::vector<std::uint32_t>> by_user_;
  std::vector<std::uint32_t> rank_;
  std::vector<StoreMeta> catalog_;
  bool has_catalog_ = false;
  Vocab users_, stores_, locations_, brands_, cuisines_, store_locations_;
  std::int64_t epoch_ = 0;
  int tz_offset_minutes_ = 0;
};

/// Accumulates raw string rows and produces a sorted, indexed log.
class LogBuilder {
 public:
  explicit LogBuilder(int tz_offset_minutes = 0) { log_.tz_offset_minutes_ = tz_offset_minutes; }

  void add(std::string_view user, std::string_view store, std::int64_t time,
           std::string_view location) {
    Interaction x;
    x.user = log_.users_.intern(user);
    x.store = log_.stores_.intern(store);
    x.time = time;
    x.location = log_.locations_.intern(location);
    log_.rows_.push_back(x);
  }

  void add_store(std::string_view store, std::string_view brand, std::string_view cuisine,
                 std::string_view location) {
    StoreId s = log_.stores_.intern(store);
    if (meta_.size() <= s) {
      meta_.resize(s + 1);
      seen_.resize(s + 1, false);
    }
    if (seen_[s]) throw Error("duplicate store_id in catalog: " + std::string(store));
    seen_[s] = true;
    meta_[s] = StoreMeta{log_.brands_.intern(brand), log_.cuisines_.intern(cuisine),
                         log_.store_locations_.intern(location)};
    log_.has_catalog_ = true;
  }

  InteractionLog build() && {
    auto& L = log_;
    std::stable_sort(L.rows_.begin(), L.rows_.end(),
                     [](const Interaction& a, const Interaction& b) { return a.time < b.time; });
    L.epoch_ = L.rows_.empty() ? 0 : L.rows_.front().time;
    L.by_user_.assign(L.users_.size(), {});
    L.rank_.resize(L.rows_.size());
    for (std::size_t i = 0; i < L.rows_.size(); ++i) {
      auto& seq = L.by_user_[L.rows_[i].user];
      L.rank_[i] = static_cast<std::uint32_t>(seq.size());
      seq.push_back(static_cast<std::uint32_t>(i));
    }
    if (L.has_catalog_) {
      meta_.resize(L.stores_.size());
      seen_.resize(L.stores_.size(), false);
      for (StoreId s = 0; s < L.stores_.size(); ++s)
        if (!seen_[s]) throw Error("store without catalog entry: " + L.stores_.name(s));
      L.catalog_ = std::move(meta_);
    }
    return std::move(L);
  }

 private:
  InteractionLog log_;
  std::vector<StoreMeta> meta_;
  std::vector<bool> seen_;
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

template <class RowFn>
void read_tsv(const std::string& path, std::string_view header, RowFn&& on_row) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error(path + ": missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header) throw Error(path + ": line 1: expected header '" + std::string(header) + "'");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    if (fields.size() != 4)
      throw Error(path + ": line " + std::to_string(lineno) + ": expected 4 fields, got " +
                  std::to_string(fields.size()));
    for (auto f : fields)
      if (f.empty()) throw Error(path + ": line " + std::to_string(lineno) + ": empty field");
    on_row(fields, lineno);
  }
}

}  // namespace detail

constexpr std::string_view kInteractionsHeader = "user_id\tstore_id\tunix_time_s\tlocation_id";
constexpr std::string_view kCatalogHeader = "store_id\tbrand_id\tcuisine_id\tstore_location_id";

/// Reads an interactions TSV (and optionally a store catalog TSV).
inline InteractionLog parse_interactions(const std::string& path, int tz_offset_minutes,
                                         const std::string& catalog_path = {}) {
  LogBuilder b(tz_offset_minutes);
  detail::read_tsv(path, kInteractionsHeader, [&](const auto& f, std::size_t lineno) {
    std::int64_t t = 0;
    auto [p, ec] = std::from_chars(f[2].data(), f[2].data() + f[2].size(), t);
    if (ec != std::errc() || p != f[2].data() + f[2].size())
      throw Error(path + ": line " + std::to_string(lineno) + ": unix_time_s is not an integer: '" +
                  std::string(f[2]) + "'");
    if (t <= 0) throw Error(path + ": line " + std::to_string(lineno) + ": unix_time_s must be > 0");
    b.add(f[0], f[1], t, f[3]);
  });
  if (!catalog_path.empty()) {
    detail::read_tsv(catalog_path, kCatalogHeader, [&](const auto& f, std::size_t) {
      b.add_store(f[0], f[1], f[2], f[3]);
    });
  }
  return std::move(b).build();
}

inline void write_interactions(const InteractionLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << kInteractionsHeader << '\n';
  for (const auto& x : log.rows())
    out << log.users().name(x.user) << '\t' << log.stores().name(x.store) << '\t' << x.time << '\t'
        << log.locations().name(x.location) << '\n';
  if (!out) throw Error("write failed: " + path);
}

inline void write_catalog(const InteractionLog& log, const std::string& path) {
  if (!log.has_catalog()) throw Error("log has no store catalog");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << kCatalogHeader << '\n';
  for (StoreId s = 0; s < log.num_stores(); ++s) {
    const auto& m = log.store_meta(s);
    out << log.stores().name(s) << '\t' << log.brands().name(m.brand) << '\t'
        << log.cuisines().name(m.cuisine) << '\t' << log.store_locations().name(m.location) << '\n';
  }
  if (!out) throw Error("write failed: " + path);
}

/// Rebuilds a log from the rows selected by keep(row index); the catalog is
/// restricted to stores that remain referenced.
template <class Keep>
InteractionLog select_rows(const InteractionLog& log, Keep&& keep) {
  LogBuilder b(log.tz_offset_minutes());
  std::vector<bool> used(log.num_stores(), false);
  for (std::size_t i = 0; i < log.size(); ++i) {
    if (!keep(i)) continue;
    const auto& x = log.row(i);
    b.add(log.users().name(x.user), log.stores().name(x.store), x.time,
          log.locations().name(x.location));
    used[x.store] = true;
  }
  if (log.has_catalog()) {
    for (StoreId s = 0; s < log.num_stores(); ++s) {
      if (!used[s]) continue;
      const auto& m = log.store_meta(s);
      b.add_store(log.stores().name(s), log.brands().name(m.brand), log.cuisines().name(m.cuisine),
                  log.store_locations().name(m.location));
    }
  }
  return std::move(b).build();
}

/// Keeps users with at least min_orders interactions. Single pass.
inline InteractionLog filter_users(const InteractionLog& log, int min_orders) {
  if (min_orders < 1) throw Error("min_orders must be >= 1");
  return select_rows(log, [&](std::size_t i) {
    return log.user_rows(log.row(i).user).size() >= static_cast<std::size_t>(min_orders);
  });
}

/// flag[i] is 1 iff the same (user, store) pair occurs at an earlier row.
inline std::vector<std::uint8_t> label_repeat_flags(const InteractionLog& log) {
  std::vector<std::uint8_t> flags(log.size(), 0);
  std::unordered_set<std::uint64_t> seen;
  seen.reserve(log.size());
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto& x = log.row(i);
    std::uint64_t key = (static_cast<std::uint64_t>(x.user) << 32) | x.store;
    flags[i] = seen.insert(key).second ? 0 : 1;
  }
  return flags;
}

enum class Partition : std::uint8_t { Train, Valid, Test };

inline const char* partition_name(Partition p) {
  switch (p) {
    case Partition::Train: return "train";
    case Partition::Valid: return "valid";
    case Partition::Test: return "test";
  }
  return "?";
}

/// Train/valid/test views over one time-sorted log. Rows are contiguous per
/// partition because the log is sorted by time.
struct DatasetSplit {
  std::shared_ptr<const InteractionLog> log;
  std::int64_t valid_begin = 0;  // first valid time boundary
  std::int64_t test_begin = 0;   // first test time boundary
  std::size_t valid_start = 0;   // first valid row
  std::size_t test_start = 0;    // first test row
  std::vector<std::uint8_t> repeat;

  std::size_t begin(Partition p) const {
    return p == Partition::Train ? 0 : p == Partition::Valid ? valid_start : test_start;
  }
  std::size_t end(Partition p) const {
    return p == Partition::Train ? valid_start : p == Partition::Valid ? test_start : log->size();
  }
  std::size_t count(Partition p) const { return end(p) - begin(p); }
  Partition partition_of(std::size_t row) const {
    return row < valid_start ? Partition::Train : row < test_start ? Partition::Valid : Partition::Test;
  }
};

/// Test = the last test_window_s seconds of the timeline, valid = the
/// valid_window_s before it, train = the rest.
inline DatasetSplit split_global_timeline(std::shared_ptr<const InteractionLog> log,
                                          std::int64_t test_window_s, std::int64_t valid_window_s) {
  if (test_window_s <= 0 || valid_window_s <= 0) throw Error("split windows must be positive");
  if (!log || log->empty()) throw Error("cannot split an empty log");
  std::int64_t span = log->last_time() - log->epoch();
  if (test_window_s > span) throw Error("test window exceeds the dataset time span");
  if (test_window_s + valid_window_s >= span)
    throw Error("train partition is empty: windows cover the whole time span");

  DatasetSplit s;
  s.test_begin = log->last_time() - test_window_s;
  s.valid_begin = s.test_begin - valid_window_s;
  auto rows = log->rows();
  auto first_at = [&](std::int64_t t) {
    return static_cast<std::size_t>(
        std::lower_bound(rows.begin(), rows.end(), t,
                         [](const Interaction& x, std::int64_t v) { return x.time < v; }) -
        rows.begin());
  };
  s.valid_start = first_at(s.valid_begin);
  s.test_start = first_at(s.test_begin);
  s.log = std::move(log);
  for (auto p : {Partition::Train, Partition::Valid, Partition::Test})
    if (s.count(p) == 0) throw Error(std::string(partition_name(p)) + " partition is empty");
  s.repeat = label_repeat_flags(*s.log);
  return s;
}

/// Distinct stores a user ordered from strictly before row i (in first-visit
/// order).
inline std::vector<StoreId> prior_stores(const InteractionLog& log, std::size_t i) {
  const auto& x = log.row(i);
  auto seq = log.user_rows(x.user);
  std::vector<StoreId> out;
  std::unordered_set<StoreId> seen;
  for (std::uint32_t k = 0; k < log.rank_in_user(i); ++k) {
    StoreId s = log.row(seq[k]).store;
    if (seen.insert(s).second) out.push_back(s);
  }
  return out;
}

}  // namespace fdrec
