#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "s2ip/errors.hpp"
#include "s2ip/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"s2ip: semantic-prompted time-series forecasting at desk scale"};
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string checkpoint;
  app.add_option("command", command, "train | evaluate | forecast | ablate | gen-data | export-embeddings")
      ->required();
  app.add_option("--config", config_path, "key = value configuration file");
  app.add_option("--seed", seed, "overrides model.seed, train.seed and synth.seed");
  app.add_option("--out", out_dir, "output directory (overrides run.out_dir)");
  app.add_option("--checkpoint", checkpoint, "checkpoint path (overrides run.checkpoint)");
  CLI11_PARSE(app, argc, argv);

  try {
    const s2ip::Command cmd = s2ip::parse_command(command);
    s2ip::RunConfig config = config_path.empty() ? s2ip::RunConfig{} : s2ip::parse_config(config_path);
    if (seed) config.set_seed(*seed);
    if (!out_dir.empty()) config.out_dir = out_dir;
    if (!checkpoint.empty()) config.checkpoint = checkpoint;
    return s2ip::run(cmd, config, std::cout);
  } catch (const s2ip::LoadError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const s2ip::NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
