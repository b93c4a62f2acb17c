#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "qem/cli.hpp"
#include "qem/io.hpp"
#include "qem/oracles.hpp"

using namespace qem;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("qem_io_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) { return dsl::read_text(p); }

void put(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

Trace round_trip(const Trace& t) {
  std::ostringstream os;
  io::write_trace(os, t);
  std::istringstream is(os.str());
  return io::read_trace(is, t);
}

}  // namespace

TEST(TraceCsv, RoundTripIsExactWithOptionalColumns) {
  const auto bm = oracles::radon_linear();
  QemConfig cfg;
  cfg.K = 8;
  cfg.T = 6;
  cfg.seed = 11;
  cfg.record_timing = true;
  cfg.predictive_samples = 50;
  cfg.test_data = oracles::synth_data(bm.ir, {.seed = 77, .overrides = bm.truth}).data;
  const auto t = run_qem(bm.ir, cfg);
  ASSERT_TRUE(t.rows.front().predictive_ll.has_value());
  ASSERT_TRUE(t.rows.front().elapsed_ms.has_value());
  EXPECT_EQ(round_trip(t).rows, t.rows);
}

TEST(TraceCsv, RoundTripBernoulliGammaBeta) {
  ModelIR ir = dsl::parse_or_throw(R"(
latent r ~ Gamma(2, 1)
latent p ~ Beta(2, 2)
latent z ~ Bernoulli(0.3)
observe x ~ Gaussian(r + z, 1) from x_data
observe y ~ Bernoulli(p) from y_data
)");
  ir.data = {{"x_data", Tensor(1.5)}, {"y_data", Tensor(1.0)}};
  QemConfig cfg;
  cfg.K = 6;
  cfg.T = 4;
  const auto t = run_qem(ir, cfg);
  const auto back = round_trip(t);
  EXPECT_EQ(back.rows, t.rows);
  // empty optional cells stay empty
  EXPECT_FALSE(back.rows[0].predictive_ll.has_value());
  EXPECT_FALSE(back.rows[0].elapsed_ms.has_value());
}

TEST(TraceCsv, HeaderLayout) {
  const auto bm = oracles::conjugate_chain(2);
  QemConfig cfg;
  cfg.K = 4;
  cfg.T = 1;
  const auto t = run_qem(bm.ir, cfg);
  const std::vector<std::string> want{"iter", "lambda", "log_evidence", "predictive_ll", "z1",
                                      "z2",   "z1:m2",  "z2:m2",        "clamp_count",   "elapsed_ms"};
  EXPECT_EQ(io::trace_header(t), want);
  std::ostringstream os;
  io::write_trace(os, t);
  std::istringstream is(os.str());
  const auto table = io::read_trace_table(is);
  ASSERT_EQ(table.rows.size(), 1u);
  EXPECT_EQ(table.rows[0][0], 1.0);
  EXPECT_EQ(table.rows[0][1], 0.0);  // lambda at t = 1
  EXPECT_FALSE(table.rows[0][3].has_value());
}

TEST(TraceCsv, MalformedInputIsSchemaError) {
  const auto bm = oracles::conjugate_chain(2);
  QemConfig cfg;
  cfg.K = 4;
  cfg.T = 1;
  const auto t = run_qem(bm.ir, cfg);
  auto kind_of = [&](const std::string& text) {
    std::istringstream is(text);
    try {
      io::read_trace(is, t);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::domain;
  };
  EXPECT_EQ(kind_of(""), ErrorKind::schema);
  EXPECT_EQ(kind_of("iter,lambda\n1,0\n"), ErrorKind::schema);
  std::ostringstream os;
  io::write_trace(os, t);
  auto text = os.str();
  text.replace(text.find("\n1,") + 1, 1, "x");
  EXPECT_EQ(kind_of(text), ErrorKind::schema);
}

TEST(Config, ParsesKeysListsAndComments) {
  const auto c = io::parse_config("# comment\nK = 4, 8 ,16\nmethod=qem # trailing\n\n  T =  20\noracle = yes\n", "/base");
  EXPECT_EQ(c.integers("K"), (std::vector<std::uint64_t>{4, 8, 16}));
  EXPECT_EQ(c.get_or("method", ""), "qem");
  EXPECT_EQ(c.integer("T", 0), 20u);
  EXPECT_TRUE(c.flag("oracle", false));
  EXPECT_EQ(c.number("ema_p", 0.5), 0.5);
  EXPECT_EQ(io::parse_config("data = d.csv", "/base").path("data"), fs::path("/base/d.csv"));
  EXPECT_EQ(io::parse_config("data = /abs/d.csv", "/base").path("data"), fs::path("/abs/d.csv"));
}

TEST(Config, ErrorsAreConfigKind) {
  auto kind_of = [](auto&& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::domain;
  };
  EXPECT_EQ(kind_of([] { io::parse_config("no equals sign"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { io::parse_config("K = 1\nK = 2"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { io::parse_config("K = four").integer("K", 0); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { io::parse_config("K = -1").integer("K", 0); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { io::parse_config("oracle = maybe").flag("oracle", false); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { io::parse_config("typo = 1").require_known(cli::config_keys()); }), ErrorKind::config);
}

TEST(Summary, CarriesBestEvidenceMomentsAndConfig) {
  const auto bm = oracles::conjugate_chain(2);
  QemConfig cfg;
  cfg.K = 16;
  cfg.T = 5;
  const auto t = run_qem(bm.ir, cfg);
  const auto c = io::parse_config("K = 16\nT = 5");
  const auto j = io::summary_json(t, c, {.moment_mse = 0.25, .method = "qem", .warnings = {}});
  double best = t.rows[0].log_evidence;
  for (const auto& r : t.rows) best = std::max(best, r.log_evidence);
  EXPECT_EQ(j["best_log_evidence"].get<double>(), best);
  EXPECT_EQ(j["iterations"].get<std::size_t>(), 5u);
  EXPECT_TRUE(j["total_time_ms"].is_null());
  EXPECT_EQ(j["moment_mse"].get<double>(), 0.25);
  EXPECT_EQ(j["config"]["K"].get<std::string>(), "16");
  EXPECT_EQ(j["final_moments"]["z1"]["mean_params"][0].get<double>(), t.rows.back().moments[0][0].m[0]);
}

TEST(Cli, ExitCodesForValidate) {
  const auto dir = scratch("validate");
  std::ostringstream out, err;
  EXPECT_EQ(cli::cmd_validate(fs::path(QEM_MODELS_DIR) / "radon_full.dsl", std::nullopt, out, err), 0);
  EXPECT_NE(out.str().find("max factor rank 4"), std::string::npos);
  put(dir / "cycle.dsl", "latent z ~ Gaussian(w, 1)\nlatent w ~ Gaussian(z, 1)\n");
  EXPECT_EQ(cli::cmd_validate(dir / "cycle.dsl", std::nullopt, out, err), 1);
  EXPECT_EQ(cli::cmd_validate(dir / "missing.dsl", std::nullopt, out, err), 2);
  // data bound but missing a column
  put(dir / "m.dsl", "latent z ~ Gaussian(0, 1)\nobserve x ~ Gaussian(z, 1) from x_data\n");
  put(dir / "d.csv", "other\n1\n");
  EXPECT_EQ(cli::cmd_validate(dir / "m.dsl", dir / "d.csv", out, err), 2);
  put(dir / "d.csv", "x_data\n1\n");
  EXPECT_EQ(cli::cmd_validate(dir / "m.dsl", dir / "d.csv", out, err), 0);
  fs::remove_all(dir);
}

TEST(Cli, RunIsDeterministicAndWritesOutputs) {
  const auto dir = scratch("run");
  put(dir / "a.cfg", "builtin = conjugate_chain:3\nK = 8\nT = 12\nseed = 5\noracle = true\noutput = a\n");
  put(dir / "b.cfg", "builtin = conjugate_chain:3\nK = 8\nT = 12\nseed = 5\noracle = true\noutput = b\n");
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_run(dir / "a.cfg", out, err), 0) << err.str();
  ASSERT_EQ(cli::cmd_run(dir / "b.cfg", out, err), 0) << err.str();
  EXPECT_EQ(slurp(dir / "a" / "trace.csv"), slurp(dir / "b" / "trace.csv"));
  const auto j = nlohmann::json::parse(slurp(dir / "a" / "summary.json"));
  EXPECT_TRUE(j["moment_mse"].is_number());
  EXPECT_EQ(j["config"]["output"], "a");
  fs::remove_all(dir);
}

TEST(Cli, RunWithModelFileAndData) {
  const auto dir = scratch("runfile");
  put(dir / "m.dsl", "latent z ~ Gaussian(0, 1)\nobserve x ~ Gaussian(z, 1) from x_data\n");
  put(dir / "d.csv", "x_data\n2\n");
  put(dir / "run.cfg", "model = m.dsl\ndata = d.csv\nK = 64\nT = 30\noracle = true\noutput = out\n");
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_run(dir / "run.cfg", out, err), 0) << err.str();
  const auto j = nlohmann::json::parse(slurp(dir / "out" / "summary.json"));
  EXPECT_NEAR(j["final_moments"]["z"]["mean_params"][0].get<double>(), 1.0, 0.05);
  EXPECT_LT(j["moment_mse"].get<double>(), 2.5e-3);
  fs::remove_all(dir);
}

TEST(Cli, RunConfigFailuresExitTwo) {
  const auto dir = scratch("badcfg");
  std::ostringstream out, err;
  EXPECT_EQ(cli::cmd_run(dir / "none.cfg", out, err), 2);
  put(dir / "typo.cfg", "builtin = conjugate_chain\nKK = 3\n");
  EXPECT_EQ(cli::cmd_run(dir / "typo.cfg", out, err), 2);
  put(dir / "both.cfg", "builtin = conjugate_chain\nmodel = m.dsl\n");
  EXPECT_EQ(cli::cmd_run(dir / "both.cfg", out, err), 2);
  put(dir / "method.cfg", "builtin = conjugate_chain\nmethod = magic\n");
  EXPECT_EQ(cli::cmd_run(dir / "method.cfg", out, err), 2);
  put(dir / "list.cfg", "builtin = conjugate_chain\nK = 2, 4\n");
  EXPECT_EQ(cli::cmd_run(dir / "list.cfg", out, err), 2);
  put(dir / "nodata.cfg", "model = m.dsl\ndata = nowhere.csv\n");
  put(dir / "m.dsl", "latent z ~ Gaussian(0, 1)\nobserve x ~ Gaussian(z, 1) from x_data\n");
  EXPECT_EQ(cli::cmd_run(dir / "nodata.cfg", out, err), 2);
  fs::remove_all(dir);
}

TEST(Cli, RunDomainFailureExitsOne) {
  const auto dir = scratch("domain");
  // rank cap below the model's factor rank
  put(dir / "r.cfg", "builtin = radon_full\nK = 4\nT = 1\nrank_cap = 2\noutput = o\n");
  std::ostringstream out, err;
  EXPECT_EQ(cli::cmd_run(dir / "r.cfg", out, err), 1);
  EXPECT_NE(err.str().find("iteration 1"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, OutputDirEnvironmentOverride) {
  const auto dir = scratch("env");
  put(dir / "c.cfg", "builtin = conjugate_chain\nK = 4\nT = 2\noutput = ignored\n");
  ::setenv("QEM_OUTPUT_DIR", (dir / "env_out").c_str(), 1);
  std::ostringstream out, err;
  const int rc = cli::cmd_run(dir / "c.cfg", out, err);
  ::unsetenv("QEM_OUTPUT_DIR");
  ASSERT_EQ(rc, 0) << err.str();
  EXPECT_TRUE(fs::exists(dir / "env_out" / "trace.csv"));
  EXPECT_FALSE(fs::exists(dir / "ignored"));
  fs::remove_all(dir);
}

TEST(Cli, SweepParallelMatchesSerialAndRecordsFailures) {
  const auto dir = scratch("sweep");
  const std::string base = "builtin = conjugate_chain\nmethod = qem, global_iw, mpiw_fixed\nK = 0, 4\nseed = 1, 2, 3\n"
                           "T = 5\noracle = true\n";
  put(dir / "par.cfg", base + "workers = 4\noutput = par\n");
  put(dir / "ser.cfg", base + "workers = 1\noutput = ser\n");
  std::ostringstream out, err;
  EXPECT_EQ(cli::cmd_sweep(dir / "par.cfg", out, err), 1);  // K = 0 cells fail
  EXPECT_EQ(cli::cmd_sweep(dir / "ser.cfg", out, err), 1);
  EXPECT_EQ(slurp(dir / "par" / "aggregate.csv"), slurp(dir / "ser" / "aggregate.csv"));
  EXPECT_EQ(slurp(dir / "par" / "failures.csv"), slurp(dir / "ser" / "failures.csv"));
  EXPECT_EQ(slurp(dir / "par" / "cells" / "global_iw_K4_seed2" / "trace.csv"),
            slurp(dir / "ser" / "cells" / "global_iw_K4_seed2" / "trace.csv"));

  const auto agg = dsl::read_text(dir / "par" / "aggregate.csv");
  std::istringstream lines(agg);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "method,K,iter,metric,n,mean,stderr");
  std::size_t rows = 0;
  while (std::getline(lines, line)) {
    ++rows;
    EXPECT_NE(line.find(",4,"), std::string::npos) << line;
    EXPECT_NE(line.find(",3,"), std::string::npos) << line;  // three seeds per group
  }
  EXPECT_EQ(rows, 3u * 5u * 2u);  // methods x iterations x (log_evidence, moment_mse)

  std::istringstream f(slurp(dir / "par" / "failures.csv"));
  std::size_t failed = 0;
  std::getline(f, line);
  while (std::getline(f, line)) ++failed;
  EXPECT_EQ(failed, 9u);
  fs::remove_all(dir);
}

TEST(Cli, SweepSingleSeedHasZeroStderr) {
  const auto dir = scratch("sweep1");
  put(dir / "s.cfg", "builtin = conjugate_chain\nK = 4\nseed = 9\nT = 3\noutput = o\n");
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_sweep(dir / "s.cfg", out, err), 0) << err.str();
  std::istringstream lines(slurp(dir / "o" / "aggregate.csv"));
  std::string line;
  std::getline(lines, line);
  std::size_t rows = 0;
  while (std::getline(lines, line)) {
    ++rows;
    EXPECT_EQ(line.substr(line.rfind(',') + 1), "0");
  }
  EXPECT_EQ(rows, 3u);
  fs::remove_all(dir);
}

TEST(Cli, OracleWritesLoadableModelAndData) {
  const auto dir = scratch("oracle");
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_oracle("radon_linear", dir, std::nullopt, out, err), 0) << err.str();
  ModelIR ir = dsl::parse_or_throw(slurp(dir / "model.dsl"));
  ir.data = dsl::load_dataset(dir / "data", ir);
  const auto bm = oracles::radon_linear();
  EXPECT_EQ(ir, bm.ir);
  const auto j = nlohmann::json::parse(slurp(dir / "oracle.json"));
  const auto exact = oracles::exact_posterior(bm.ir);
  ASSERT_TRUE(exact.has_value());
  EXPECT_EQ(j["log_evidence"].get<double>(), exact->log_evidence);
  EXPECT_EQ(j["truth"]["StateMean"].size(), 4u);

  EXPECT_EQ(cli::cmd_oracle("radon_full", dir / "full", std::nullopt, out, err), 0);
  EXPECT_TRUE(nlohmann::json::parse(slurp(dir / "full" / "oracle.json"))["log_evidence"].is_null());
  EXPECT_EQ(cli::cmd_oracle("nonsense", dir / "x", std::nullopt, out, err), 2);
  fs::remove_all(dir);
}

TEST(Cli, ConjugateChainMomentMseAfterTenIterations) {
  const auto dir = scratch("chain10");
  put(dir / "c.cfg", "builtin = conjugate_chain\nK = 64\nT = 10\noracle = true\noutput = o\n");
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_run(dir / "c.cfg", out, err), 0) << err.str();
  const auto j = nlohmann::json::parse(slurp(dir / "o" / "summary.json"));
  const double mse = j["moment_mse"].get<double>();
  EXPECT_TRUE(std::isfinite(mse));
  EXPECT_LT(mse, 1e-2);
  fs::remove_all(dir);
}

TEST(Cli, MetricsToggleEnablesPredictiveAndOracle) {
  const auto dir = scratch("metrics");
  put(dir / "c.cfg", "builtin = radon_linear\nK = 8\nT = 3\nmetrics = elbo, predictive_ll, moment_mse\n"
                     "predictive_samples = 100\noutput = o\n");
  put(dir / "bad.cfg", "builtin = radon_linear\nmetrics = accuracy\n");
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_run(dir / "c.cfg", out, err), 0) << err.str();
  const auto t = io::read_trace_table(dir / "o" / "trace.csv");
  EXPECT_TRUE(t.rows[0][*t.column("predictive_ll")].has_value());
  EXPECT_TRUE(nlohmann::json::parse(slurp(dir / "o" / "summary.json"))["moment_mse"].is_number());
  EXPECT_EQ(cli::cmd_run(dir / "bad.cfg", out, err), 2);
  fs::remove_all(dir);
}

TEST(Cli, SingleIterationGivesOneRow) {
  const auto dir = scratch("t1");
  put(dir / "c.cfg", "builtin = bus_mini\nK = 4\nT = 1\noutput = o\n");
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_run(dir / "c.cfg", out, err), 0) << err.str();
  EXPECT_EQ(io::read_trace_table(dir / "o" / "trace.csv").rows.size(), 1u);
  fs::remove_all(dir);
}

TEST(Cli, SweepStderrIsStandardErrorOverSeeds) {
  const auto dir = scratch("sweep5");
  put(dir / "s.cfg", "builtin = conjugate_chain\nK = 4\nseed = 1, 2, 3, 4, 5\nT = 2\noutput = o\n");
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_sweep(dir / "s.cfg", out, err), 0) << err.str();
  std::vector<double> final_le;
  for (int s = 1; s <= 5; ++s) {
    const auto t = io::read_trace_table(dir / "o" / "cells" / ("qem_K4_seed" + std::to_string(s)) / "trace.csv");
    final_le.push_back(*t.rows.back()[2]);
  }
  double mean = 0.0, ss = 0.0;
  for (double x : final_le) mean += x / 5.0;
  for (double x : final_le) ss += (x - mean) * (x - mean);
  const double se = std::sqrt(ss / 4.0 / 5.0);

  std::istringstream lines(slurp(dir / "o" / "aggregate.csv"));
  std::string line;
  bool found = false;
  while (std::getline(lines, line)) {
    if (line.rfind("qem,4,2,log_evidence,5,", 0) != 0) continue;
    found = true;
    const auto cells = dsl::split_csv_line(line);
    EXPECT_NEAR(*dsl::parse_number(cells[5]), mean, 1e-12 * std::abs(mean));
    EXPECT_NEAR(*dsl::parse_number(cells[6]), se, 1e-12 * se);
  }
  EXPECT_TRUE(found);
  fs::remove_all(dir);
}
