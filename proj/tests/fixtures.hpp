#pragma once

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "fdrec/dataio.hpp"
#include "fdrec/synthetic.hpp"

namespace fdrec::testing {

// (user, store, time, location)
using Row = std::tuple<std::string, std::string, std::int64_t, std::string>;

inline InteractionLog make_log(const std::vector<Row>& rows, bool with_catalog = false) {
  LogBuilder b;
  for (const auto& [u, s, t, l] : rows) b.add(u, s, t, l);
  if (with_catalog) {
    std::vector<std::string> seen;
    for (const auto& r : rows) {
      const auto& s = std::get<1>(r);
      if (std::find(seen.begin(), seen.end(), s) != seen.end()) continue;
      seen.push_back(s);
      b.add_store(s, "b_" + s, "c_" + s, "l_" + s);
    }
  }
  return std::move(b).build();
}

inline std::shared_ptr<const InteractionLog> share(InteractionLog log) {
  return std::make_shared<const InteractionLog>(std::move(log));
}

/// Small synthetic log split into train / 7-day valid / 7-day test.
inline DatasetSplit synth_split(std::size_t users, std::size_t stores, std::size_t orders, std::uint64_t seed,
                                SynthConfig c = {}) {
  c.n_users = users;
  c.n_stores = stores;
  c.n_orders_per_user = orders;
  return split_global_timeline(share(generate_synthetic(c, seed)), 7 * kSecondsPerDay, 7 * kSecondsPerDay);
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fdrec-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace fdrec::testing
