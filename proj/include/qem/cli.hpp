#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <functional>
#include <thread>

#include "qem/io.hpp"
#include "qem/oracles.hpp"

namespace qem::cli {

namespace fs = std::filesystem;
using namespace qem::oracles;

enum Exit : int { ok = 0, domain_failure = 1, io_failure = 2 };

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::io:
    case ErrorKind::config:
    case ErrorKind::schema: return io_failure;
    default: return domain_failure;
  }
}

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "model",     "builtin", "data",           "test_data",      "test_seed", "method",       "K",
      "T",         "seed",    "ema",            "ema_p",          "ema_weight", "denominator", "variance_floor",
      "rank_cap",  "oracle",  "predictive_samples", "timing",     "output",    "workers",    "metrics"};
  return keys;
}

inline bool metric_on(const io::Config& c, const std::string& name) {
  const auto m = c.list("metrics");
  for (const auto& x : m)
    if (x != "elbo" && x != "predictive_ll" && x != "moment_mse")
      fail(ErrorKind::config, "unknown metric '" + x + "' (elbo, predictive_ll, moment_mse)");
  return std::find(m.begin(), m.end(), name) != m.end();
}

inline bool oracle_on(const io::Config& c) { return c.flag("oracle", false) || metric_on(c, "moment_mse"); }

inline std::uint64_t predictive_samples(const io::Config& c) {
  return c.integer("predictive_samples", metric_on(c, "predictive_ll") ? 1000 : 0);
}

/// The model side of a run: IR with data bound, plus optional oracle and held-out data.
struct Problem {
  ModelIR ir;
  Model model;
  std::optional<ExactPosterior> exact;
  std::optional<Dataset> test_data;
  std::vector<std::string> warnings;
};

inline ModelIR parse_model_file(const fs::path& path) {
  const auto text = dsl::read_text(path);
  auto res = dsl::parse(text);
  if (!res.ok()) {
    std::string msg = "'" + path.string() + "' does not parse:";
    for (const auto& e : res.errors) msg += "\n  " + dsl::format(e);
    fail(ErrorKind::validation, msg);
  }
  return *res.model;
}

inline Problem load_problem(const io::Config& c) {
  Problem p;
  if (c.has("model") == c.has("builtin")) fail(ErrorKind::config, "exactly one of 'model' and 'builtin' is required");
  std::optional<BuiltinModel> bm;
  if (c.has("builtin")) {
    bm = builtin(*c.get("builtin"));
    p.ir = bm->ir;
    if (c.has("data")) p.ir.data = dsl::load_dataset(c.path("data"), p.ir);
  } else {
    p.ir = parse_model_file(c.path("model"));
    if (!c.has("data")) fail(ErrorKind::config, "'data' is required with 'model'");
    p.ir.data = dsl::load_dataset(c.path("data"), p.ir);
  }
  p.model = compile(p.ir);
  p.warnings = p.model.warnings;

  if (oracle_on(c)) {
    p.exact = exact_posterior(p.ir);
    if (!p.exact) p.warnings.push_back("no exact posterior for this model; moment_mse is not reported");
  }
  if (predictive_samples(c) > 0) {
    if (c.has("test_data")) {
      p.test_data = dsl::load_dataset(c.path("test_data"), p.ir);
    } else if (bm) {
      // fresh observations from the same true latents
      p.test_data = synth_data(p.ir, {.seed = c.integer("test_seed", 1000), .overrides = bm->truth}).data;
    } else {
      fail(ErrorKind::config, "'predictive_samples' needs 'test_data' for a file model");
    }
  }
  return p;
}

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> m{"qem", "global_iw", "mpiw_fixed"};
  return m;
}

/// Engine settings for one method, K and seed; everything else comes from the config.
inline QemConfig qem_config(const io::Config& c, const std::string& method, std::size_t K, std::uint64_t seed) {
  QemConfig q;
  q.K = K;
  q.seed = seed;
  q.T = c.integer("T", 100);
  const auto ema = c.get_or("ema", "scheduled");
  if (ema == "scheduled") q.ema = EmaConfig::scheduled(c.number("ema_p", 0.5));
  else if (ema == "fixed") q.ema = EmaConfig::fixed(c.number("ema_weight", 0.3));
  else fail(ErrorKind::config, "'ema' must be scheduled or fixed, got '" + ema + "'");
  const auto den = c.get_or("denominator", "self_normalized");
  if (den == "self_normalized") q.denominator = Denominator::self_normalized;
  else if (den == "fresh_sample") q.denominator = Denominator::fresh_sample;
  else fail(ErrorKind::config, "'denominator' must be self_normalized or fresh_sample, got '" + den + "'");
  q.variance_floor = c.number("variance_floor", 1e-8);
  q.factors.rank_cap = c.integer("rank_cap", 4);
  q.record_timing = c.flag("timing", false);
  q.predictive_samples = predictive_samples(c);
  if (method == "qem") {
  } else if (method == "global_iw") {
    q.estep = EStep::global_iw;
  } else if (method == "mpiw_fixed") {
    q.adapt = false;
  } else {
    fail(ErrorKind::config, "unknown method '" + method + "' (qem, global_iw, mpiw_fixed)");
  }
  return q;
}

/// Mean squared error of the first moments against the oracle, per trace row.
inline std::vector<double> moment_mse(const Trace& t, const ExactPosterior& exact) {
  std::vector<double> out;
  for (const auto& r : t.rows) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < t.latents.size(); ++i) {
      const auto it = std::find(exact.latents.begin(), exact.latents.end(), t.latents[i]);
      if (it == exact.latents.end()) fail(ErrorKind::validation, "oracle lacks latent '" + t.latents[i] + "'");
      const auto& ex = exact.moments[static_cast<std::size_t>(it - exact.latents.begin())];
      for (std::size_t c = 0; c < r.moments[i].size(); ++c) {
        const double d = r.moments[i][c].m[0] - ex[c].m[0];
        s += d * d;
        ++n;
      }
    }
    out.push_back(n ? s / static_cast<double>(n) : 0.0);
  }
  return out;
}

struct CellResult {
  Trace trace;
  std::optional<std::vector<double>> mse;
};

inline CellResult run_cell(const Problem& p, const io::Config& c, const std::string& method, std::size_t K,
                           std::uint64_t seed, const fs::path& dir) {
  auto q = qem_config(c, method, K, seed);
  q.test_data = p.test_data;
  CellResult res;
  res.trace = run_qem(p.model, q);
  io::SummaryExtras extra;
  extra.method = method;
  extra.warnings = p.warnings;
  if (p.exact) {
    res.mse = moment_mse(res.trace, *p.exact);
    extra.moment_mse = res.mse->back();
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create '" + dir.string() + "': " + ec.message());
  io::write_trace(dir / "trace.csv", res.trace);
  io::write_json(dir / "summary.json", io::summary_json(res.trace, c, extra));
  return res;
}

inline fs::path output_dir(const io::Config& c) {
  if (const char* env = std::getenv("QEM_OUTPUT_DIR"); env && *env) return fs::path(env);
  return c.has("output") ? c.path("output") : fs::path("out");
}

inline std::string single(const io::Config& c, const std::string& key, const std::string& fallback) {
  auto l = c.list(key);
  if (l.empty()) return fallback;
  if (l.size() > 1) fail(ErrorKind::config, "'" + key + "' takes one value for run; use sweep for lists");
  return l.front();
}

template <class F>
int guarded(std::ostream& err, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    err << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return domain_failure;
  }
}

// ---------------------------------------------------------------------------
// Commands

inline std::size_t factor_rank(const ValidationReport& r) {
  std::size_t k = 0;
  for (const auto& [name, ps] : r.latent_parents) k = std::max(k, 1 + ps.size());
  for (const auto& [name, ps] : r.observation_parents) k = std::max(k, ps.size());
  return k;
}

inline int cmd_validate(const fs::path& model, const std::optional<fs::path>& data, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto text = dsl::read_text(model);
    auto res = dsl::parse(text);
    if (!res.ok()) {
      for (const auto& e : res.errors) err << model.string() << ":" << dsl::format(e) << "\n";
      return int(domain_failure);
    }
    ModelIR ir = *res.model;
    if (data) ir.data = dsl::load_dataset(*data, ir);
    const auto report = validate(ir, {.require_data = data.has_value()});
    for (const auto& w : res.warnings) out << "warning: " << w << "\n";
    if (!report.ok()) {
      err << report.text() << "\n";
      return int(domain_failure);
    }
    for (const auto& w : report.warnings) out << "warning: " << w.message << "\n";
    out << "OK: " << ir.latents.size() << " latents, " << ir.observations.size() << " observations, max factor rank "
        << factor_rank(report) << "\n";
    return int(ok);
  });
}

inline int cmd_run(const fs::path& config_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto c = io::load_config(config_path);
    c.require_known(config_keys());
    const auto method = single(c, "method", "qem");
    const auto K = io::Config::to_integer("K", single(c, "K", "30"));
    const auto seed = io::Config::to_integer("seed", single(c, "seed", "0"));
    const auto p = load_problem(c);
    for (const auto& w : p.warnings) err << "warning: " << w << "\n";
    const auto dir = output_dir(c);
    const auto res = run_cell(p, c, method, K, seed, dir);
    const auto& last = res.trace.rows.back();
    out << method << " K=" << K << " seed=" << seed << " T=" << res.trace.rows.size()
        << " log_evidence=" << dsl::format_number(last.log_evidence);
    if (res.mse) out << " moment_mse=" << dsl::format_number(res.mse->back());
    out << "\nwrote " << (dir / "trace.csv").string() << " and " << (dir / "summary.json").string() << "\n";
    return int(ok);
  });
}

struct SweepCell {
  std::string method;
  std::size_t K = 0;
  std::uint64_t seed = 0;
  std::string name() const { return method + "_K" + std::to_string(K) + "_seed" + std::to_string(seed); }
};

inline int cmd_sweep(const fs::path& config_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto c = io::load_config(config_path);
    c.require_known(config_keys());
    auto methods = c.list("method");
    if (methods.empty()) methods = {"qem"};
    auto Ks = c.integers("K");
    if (Ks.empty()) Ks = {30};
    auto seeds = c.integers("seed");
    if (seeds.empty()) seeds = {0};
    for (const auto& m : methods) qem_config(c, m, 1, 0);  // reject bad methods and settings up front

    const auto p = load_problem(c);
    for (const auto& w : p.warnings) err << "warning: " << w << "\n";
    const auto dir = output_dir(c);

    std::vector<SweepCell> cells;
    for (const auto& m : methods)
      for (auto K : Ks)
        for (auto s : seeds) cells.push_back({m, static_cast<std::size_t>(K), s});

    std::vector<std::optional<CellResult>> results(cells.size());
    std::vector<std::string> failures(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < cells.size(); i = next++) {
        try {
          results[i] = run_cell(p, c, cells[i].method, cells[i].K, cells[i].seed, dir / "cells" / cells[i].name());
        } catch (const std::exception& e) {
          failures[i] = e.what();
        }
      }
    };
    std::size_t workers = c.integer("workers", std::max(1u, std::thread::hardware_concurrency()));
    workers = std::clamp<std::size_t>(workers, 1, cells.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorKind::io, "cannot create '" + dir.string() + "': " + ec.message());
    std::ofstream agg(dir / "aggregate.csv", std::ios::binary);
    if (!agg) fail(ErrorKind::io, "cannot write '" + (dir / "aggregate.csv").string() + "'");
    agg << "method,K,iter,metric,n,mean,stderr\n";
    using Metric = std::function<std::optional<double>(const CellResult&, std::size_t)>;
    const std::vector<std::pair<std::string, Metric>> metrics{
        {"log_evidence", [](const CellResult& r, std::size_t t) { return std::optional(r.trace.rows[t].log_evidence); }},
        {"predictive_ll", [](const CellResult& r, std::size_t t) { return r.trace.rows[t].predictive_ll; }},
        {"moment_mse",
         [](const CellResult& r, std::size_t t) { return r.mse ? std::optional((*r.mse)[t]) : std::nullopt; }},
    };
    for (const auto& m : methods)
      for (auto K : Ks) {
        std::vector<const CellResult*> group;
        for (std::size_t i = 0; i < cells.size(); ++i)
          if (cells[i].method == m && cells[i].K == K && results[i]) group.push_back(&*results[i]);
        if (group.empty()) continue;
        const std::size_t T = group.front()->trace.rows.size();
        for (std::size_t t = 0; t < T; ++t)
          for (const auto& [name, get] : metrics) {
            std::vector<double> xs;
            for (const auto* r : group)
              if (auto v = get(*r, t)) xs.push_back(*v);
            if (xs.empty()) continue;
            const double n = static_cast<double>(xs.size());
            double mean = 0.0;
            for (double x : xs) mean += x;
            mean /= n;
            double se = 0.0;
            if (xs.size() > 1) {
              double ss = 0.0;
              for (double x : xs) ss += (x - mean) * (x - mean);
              se = std::sqrt(ss / (n - 1.0) / n);
            }
            agg << m << "," << K << "," << (t + 1) << "," << name << "," << xs.size() << ","
                << dsl::format_number(mean) << "," << dsl::format_number(se) << "\n";
          }
      }

    std::ofstream fails(dir / "failures.csv", std::ios::binary);
    fails << "method,K,seed,error\n";
    std::size_t n_failed = 0;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (failures[i].empty()) continue;
      ++n_failed;
      std::string msg = failures[i];
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      std::replace(msg.begin(), msg.end(), '"', '\'');
      fails << cells[i].method << "," << cells[i].K << "," << cells[i].seed << ",\"" << msg << "\"\n";
      err << "cell " << cells[i].name() << " failed: " << failures[i] << "\n";
    }
    out << cells.size() - n_failed << " of " << cells.size() << " cells succeeded; wrote "
        << (dir / "aggregate.csv").string() << "\n";
    return n_failed ? int(domain_failure) : int(ok);
  });
}

inline nlohmann::ordered_json tensor_json(const Tensor& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

inline int cmd_oracle(const std::string& id, const fs::path& dir, std::optional<std::uint64_t> seed, std::ostream& out,
                      std::ostream& err) {
  return guarded(err, [&] {
    auto bm = builtin(id);
    if (seed) {
      auto syn = synth_data(bm.ir, {.seed = *seed, .overrides = bm.truth});
      bm.ir.data = syn.data;
    }
    std::error_code ec;
    fs::create_directories(dir / "data", ec);
    if (ec) fail(ErrorKind::io, "cannot create '" + dir.string() + "': " + ec.message());
    dsl::write_dataset(dir / "data", bm.ir, bm.ir.data);
    {
      std::ofstream m(dir / "model.dsl", std::ios::binary);
      if (!m) fail(ErrorKind::io, "cannot write '" + (dir / "model.dsl").string() + "'");
      m << dsl::pretty_print(bm.ir);
    }
    nlohmann::ordered_json j;
    j["builtin"] = bm.id;
    j["scaled_latent"] = bm.scaled_latent ? nlohmann::ordered_json(*bm.scaled_latent) : nlohmann::ordered_json(nullptr);
    nlohmann::ordered_json truth = nlohmann::ordered_json::object();
    for (const auto& [name, t] : bm.truth) truth[name] = tensor_json(t);
    j["truth"] = std::move(truth);
    const auto exact = exact_posterior(bm.ir);
    if (exact) {
      j["log_evidence"] = exact->log_evidence;
      nlohmann::ordered_json post = nlohmann::ordered_json::object();
      for (std::size_t i = 0; i < exact->latents.size(); ++i) {
        nlohmann::ordered_json cells = nlohmann::ordered_json::array();
        for (const auto& m : exact->moments[i])
          cells.push_back(std::vector<double>(m.m.begin(), m.m.begin() + static_cast<std::ptrdiff_t>(stat_count(m.family))));
        post[exact->latents[i]] = std::move(cells);
      }
      j["posterior_mean_params"] = std::move(post);
    } else {
      j["log_evidence"] = nullptr;
      j["posterior_mean_params"] = nullptr;
    }
    io::write_json(dir / "oracle.json", j);
    out << bm.id << ": wrote model.dsl, data/ and oracle.json to " << dir.string();
    if (!exact) out << " (no exact posterior for this model)";
    out << "\n";
    return int(ok);
  });
}

}  // namespace qem::cli
