#include <iostream>

#include "CLI11.hpp"
#include "qem/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Quasi-EM with massively parallel importance weighting"};
  app.require_subcommand(1);

  std::string model, data, config, builtin_id, out_dir = "oracle_out";
  std::optional<std::uint64_t> seed;

  auto* validate = app.add_subcommand("validate", "Parse and check a model file");
  validate->add_option("model", model, "model file")->required();
  validate->add_option("--data", data, "CSV file or directory to bind and check");

  auto* run = app.add_subcommand("run", "Run one configuration");
  run->add_option("config", config, "key = value config file")->required();

  auto* sweep = app.add_subcommand("sweep", "Run the product of methods, K and seeds");
  sweep->add_option("config", config, "key = value config file")->required();

  auto* oracle = app.add_subcommand("oracle", "Write a built-in model, its data and exact posterior");
  oracle->add_option("builtin", builtin_id, "built-in id")->required();
  oracle->add_option("-o,--output", out_dir, "output directory");
  oracle->add_option("--seed", seed, "redraw observations from the true latents with this seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : qem::cli::io_failure;
  }

  namespace cli = qem::cli;
  if (*validate)
    return cli::cmd_validate(model, data.empty() ? std::nullopt : std::optional<std::filesystem::path>(data), std::cout,
                             std::cerr);
  if (*run) return cli::cmd_run(config, std::cout, std::cerr);
  if (*sweep) return cli::cmd_sweep(config, std::cout, std::cerr);
  if (*oracle) return cli::cmd_oracle(builtin_id, out_dir, seed, std::cout, std::cerr);
  return cli::io_failure;
}
