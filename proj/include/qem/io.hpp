#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "qem/dsl.hpp"
#include "qem/qem.hpp"

namespace qem::io {

// ---------------------------------------------------------------------------
// Trace CSV
//
// Columns: iter, lambda, log_evidence, predictive_ll, one first-moment column per
// latent cell (headed by the cell label), one "<label>:m2" column per cell of a
// two-statistic family, then clamp_count and elapsed_ms. Optional values are empty.

inline std::vector<std::string> trace_header(const Trace& t) {
  std::vector<std::string> h{"iter", "lambda", "log_evidence", "predictive_ll"};
  for (const auto& cells : t.cells) h.insert(h.end(), cells.begin(), cells.end());
  for (std::size_t i = 0; i < t.cells.size(); ++i)
    if (stat_count(t.families[i]) > 1)
      for (const auto& c : t.cells[i]) h.push_back(c + ":m2");
  h.push_back("clamp_count");
  h.push_back("elapsed_ms");
  return h;
}

inline void write_trace(std::ostream& out, const Trace& t) {
  const auto h = trace_header(t);
  for (std::size_t i = 0; i < h.size(); ++i) out << (i ? "," : "") << h[i];
  out << "\n";
  for (const auto& r : t.rows) {
    out << r.iter << "," << dsl::format_number(r.lambda) << "," << dsl::format_number(r.log_evidence) << ",";
    if (r.predictive_ll) out << dsl::format_number(*r.predictive_ll);
    for (const auto& l : r.moments)
      for (const auto& m : l) out << "," << dsl::format_number(m.m[0]);
    for (std::size_t i = 0; i < r.moments.size(); ++i)
      if (stat_count(t.families[i]) > 1)
        for (const auto& m : r.moments[i]) out << "," << dsl::format_number(m.m[1]);
    out << "," << r.clamp_count << ",";
    if (r.elapsed_ms) out << dsl::format_number(*r.elapsed_ms);
    out << "\n";
  }
}

inline void write_trace(const std::filesystem::path& path, const Trace& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write '" + path.string() + "'");
  write_trace(out, t);
  if (!out) fail(ErrorKind::io, "write to '" + path.string() + "' failed");
}

/// Plain view of a trace file: header plus cells, empty cells as nullopt.
struct TraceTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::optional<double>>> rows;

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }
};

inline TraceTable read_trace_table(std::istream& in, const std::string& origin = "trace") {
  TraceTable t;
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::schema, "'" + origin + "' has no header row");
  t.header = dsl::split_csv_line(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = dsl::split_csv_line(line);
    if (cells.size() != t.header.size())
      fail(ErrorKind::schema, "'" + origin + "' line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                                  " fields, header has " + std::to_string(t.header.size()));
    std::vector<std::optional<double>> row;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (cells[c].empty()) {
        row.push_back(std::nullopt);
        continue;
      }
      auto v = dsl::parse_number(cells[c]);
      if (!v)
        fail(ErrorKind::schema, "'" + origin + "' line " + std::to_string(lineno) + " column '" + t.header[c] +
                                    "': not a number '" + cells[c] + "'");
      row.push_back(v);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline TraceTable read_trace_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open '" + path.string() + "'");
  return read_trace_table(in, path.string());
}

/// Rebuilds trace rows for a run with the given latent layout (latents, cells and
/// families of `shape`). Fails on a header that does not match the layout.
inline Trace read_trace(std::istream& in, const Trace& shape, const std::string& origin = "trace") {
  const auto table = read_trace_table(in, origin);
  if (table.header != trace_header(shape)) fail(ErrorKind::schema, "'" + origin + "' header does not match the model");
  Trace t;
  t.latents = shape.latents;
  t.cells = shape.cells;
  t.families = shape.families;
  auto need = [&](const std::optional<double>& v, std::string_view col) {
    if (!v) fail(ErrorKind::schema, "'" + origin + "' column '" + std::string(col) + "' is empty");
    return *v;
  };
  for (const auto& cells : table.rows) {
    TraceRow r;
    std::size_t c = 0;
    r.iter = static_cast<std::size_t>(need(cells[c++], "iter"));
    r.lambda = need(cells[c++], "lambda");
    r.log_evidence = need(cells[c++], "log_evidence");
    r.predictive_ll = cells[c++];
    r.moments.resize(t.cells.size());
    for (std::size_t i = 0; i < t.cells.size(); ++i)
      for (std::size_t k = 0; k < t.cells[i].size(); ++k) {
        MeanParams m;
        m.family = t.families[i];
        m.m = {need(cells[c], table.header[c]), 0.0};
        ++c;
        r.moments[i].push_back(m);
      }
    for (std::size_t i = 0; i < t.cells.size(); ++i)
      if (stat_count(t.families[i]) > 1)
        for (auto& m : r.moments[i]) {
          m.m[1] = need(cells[c], table.header[c]);
          ++c;
        }
    r.clamp_count = static_cast<std::size_t>(need(cells[c++], "clamp_count"));
    r.elapsed_ms = cells[c++];
    t.rows.push_back(std::move(r));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Flat "key = value" configuration. '#' starts a comment; lists are comma separated.

struct Config {
  std::map<std::string, std::string> values;
  std::filesystem::path base_dir;  // relative paths resolve against this

  bool has(const std::string& key) const { return values.count(key) > 0; }

  std::optional<std::string> get(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) return std::nullopt;
    return it->second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const { return get(key).value_or(fallback); }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    auto v = get(key);
    if (!v) return out;
    for (auto s : dsl::split_csv_line(*v))
      if (!s.empty()) out.push_back(s);
    return out;
  }

  double number(const std::string& key, double fallback) const {
    auto v = get(key);
    if (!v) return fallback;
    return to_number(key, *v);
  }

  std::uint64_t integer(const std::string& key, std::uint64_t fallback) const {
    auto v = get(key);
    if (!v) return fallback;
    return to_integer(key, *v);
  }

  std::vector<std::uint64_t> integers(const std::string& key) const {
    std::vector<std::uint64_t> out;
    for (const auto& s : list(key)) out.push_back(to_integer(key, s));
    return out;
  }

  bool flag(const std::string& key, bool fallback) const {
    auto v = get(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "yes" || *v == "1" || *v == "on") return true;
    if (*v == "false" || *v == "no" || *v == "0" || *v == "off") return false;
    fail(ErrorKind::config, "'" + key + "' expects true or false, got '" + *v + "'");
  }

  std::filesystem::path path(const std::string& key) const {
    auto v = get(key);
    if (!v) fail(ErrorKind::config, "missing '" + key + "'");
    std::filesystem::path p(*v);
    return p.is_absolute() ? p : base_dir / p;
  }

  void require_known(const std::vector<std::string>& known) const {
    for (const auto& [k, v] : values)
      if (std::find(known.begin(), known.end(), k) == known.end()) fail(ErrorKind::config, "unknown key '" + k + "'");
  }

  static double to_number(const std::string& key, const std::string& s) {
    auto v = dsl::parse_number(s);
    if (!v) fail(ErrorKind::config, "'" + key + "' expects a number, got '" + s + "'");
    return *v;
  }

  static std::uint64_t to_integer(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
      fail(ErrorKind::config, "'" + key + "' expects a non-negative integer, got '" + s + "'");
    return v;
  }
};

inline Config parse_config(std::string_view text, const std::filesystem::path& base_dir = {}) {
  Config c;
  c.base_dir = base_dir;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::config, "line " + std::to_string(lineno) + ": expected 'key = value'");
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) fail(ErrorKind::config, "line " + std::to_string(lineno) + ": empty key");
    if (!c.values.emplace(key, value).second)
      fail(ErrorKind::config, "line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }
  return c;
}

inline Config load_config(const std::filesystem::path& path) {
  return parse_config(dsl::read_text(path), path.parent_path());
}

// ---------------------------------------------------------------------------
// summary.json

inline nlohmann::ordered_json moments_json(const Trace& t, const std::vector<std::vector<MeanParams>>& moments) {
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < t.cells.size(); ++i)
    for (std::size_t c = 0; c < t.cells[i].size(); ++c) {
      const auto& m = moments[i][c];
      nlohmann::ordered_json cell;
      cell["family"] = std::string(family_name(m.family));
      cell["mean_params"] = std::vector<double>(m.m.begin(), m.m.begin() + static_cast<std::ptrdiff_t>(stat_count(m.family)));
      out[t.cells[i][c]] = std::move(cell);
    }
  return out;
}

struct SummaryExtras {
  std::optional<double> moment_mse;  // final-row first-moment MSE against an exact oracle
  std::string method;
  std::vector<std::string> warnings;
};

inline nlohmann::ordered_json summary_json(const Trace& t, const Config& config, const SummaryExtras& extra = {}) {
  nlohmann::ordered_json j;
  j["method"] = extra.method;
  j["iterations"] = t.rows.size();
  if (!t.rows.empty()) {
    std::size_t best = 0;
    double total = 0.0;
    bool timed = true;
    std::size_t clamps = 0;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      if (t.rows[r].log_evidence > t.rows[best].log_evidence) best = r;
      if (t.rows[r].elapsed_ms) total += *t.rows[r].elapsed_ms;
      else timed = false;
      clamps += t.rows[r].clamp_count;
    }
    j["final_log_evidence"] = t.rows.back().log_evidence;
    j["best_log_evidence"] = t.rows[best].log_evidence;
    j["best_iter"] = t.rows[best].iter;
    j["total_time_ms"] = timed ? nlohmann::ordered_json(total) : nlohmann::ordered_json(nullptr);
    j["clamp_total"] = clamps;
    j["final_moments"] = moments_json(t, t.rows.back().moments);
  }
  j["moment_mse"] = extra.moment_mse ? nlohmann::ordered_json(*extra.moment_mse) : nlohmann::ordered_json(nullptr);
  j["warnings"] = extra.warnings;
  nlohmann::ordered_json echo = nlohmann::ordered_json::object();
  for (const auto& [k, v] : config.values) echo[k] = v;
  j["config"] = std::move(echo);
  return j;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
  if (!out) fail(ErrorKind::io, "write to '" + path.string() + "' failed");
}

}  // namespace qem::io
