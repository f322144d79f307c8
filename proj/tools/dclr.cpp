// dclr: command-line driver for the pipeline stages.
//
//   dclr gen|pretrain|segment|refine|eval|all [--config PATH] [--seed N]
//        [--threads N] [--out DIR] [--set key=value]...
//
// Errors go to stderr as a single line "error: <kind>: <message>".

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dclr/app.hpp"

namespace {

int fail(const char* kind, const std::string& what, int code) {
  std::string msg = what;
  for (auto& ch : msg)
    if (ch == '\n') ch = ' ';
  std::cerr << "error: " << kind << ": " << msg << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace dclr;
  CLI::App cli{"Unsupervised tumour segmentation by contrastive patch embeddings"};
  cli.require_subcommand(1);

  std::string config_path, out;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen", "generate a synthetic slide dataset"},
      {"pretrain", "train the encoder with the contrastive loss"},
      {"segment", "cluster patch embeddings and stitch probability maps"},
      {"refine", "refine probability maps with the convolutional CRF"},
      {"eval", "score masks against ground truth"},
      {"all", "run every stage in order"}};
  for (const auto& [name, help] : commands) {
    auto* sub = cli.add_subcommand(name, help);
    sub->add_option("--config", config_path, "config file of 'section.key = value' lines");
    sub->add_option("--seed", seed, "top-level seed");
    sub->add_option("--threads", threads, "worker threads (0 = all cores, 1 = bit-exact)");
    sub->add_option("--out", out, "run directory");
    sub->add_option("--set", overrides, "override a config key (key=value)");
  }
  try {
    cli.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return cli.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    config::RunConfig cfg;
    if (!config_path.empty()) config::apply_file(cfg, config_path);
    for (const auto& kv : overrides) config::apply_override(cfg, kv);
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    if (!out.empty()) cfg.out = out;
    config::validate(cfg);

    const std::string cmd = cli.get_subcommands().front()->get_name();
    if (cmd == "gen") app::cmd_gen(cfg, std::cerr);
    else if (cmd == "pretrain") app::cmd_pretrain(cfg, std::cerr);
    else if (cmd == "segment") app::cmd_segment(cfg, std::cerr);
    else if (cmd == "refine") app::cmd_refine(cfg, std::cerr);
    else if (cmd == "eval") app::cmd_eval(cfg, std::cerr);
    else app::run_all(cfg, std::cerr);
  } catch (const config::ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const FormatError& e) {
    return fail("format", e.what(), 3);
  } catch (const ShapeError& e) {
    return fail("shape", e.what(), 4);
  } catch (const NumericError& e) {
    return fail("numeric", e.what(), 5);
  } catch (const pipeline::TrainingError& e) {
    return fail("training", e.what(), 5);
  } catch (const std::invalid_argument& e) {
    return fail("argument", e.what(), 2);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
  return 0;
}
