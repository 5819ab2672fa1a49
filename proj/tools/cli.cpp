#include "cli.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "hvgg/error.hpp"
#include "hvgg/pipeline.hpp"

namespace hvgg {

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Coarse-to-fine hierarchical classification toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  std::string model;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> samples;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value run configuration")->required();
    cmd->add_option("--seed", seed, "override the root seed");
  };
  auto* synth = app.add_subcommand("synth", "write a synthetic slide corpus and its manifest");
  add_common(synth);
  synth->add_option("--samples", samples, "slides per fine class");
  auto* patch = app.add_subcommand("patch", "cut slides into resized patches");
  add_common(patch);
  auto* filter = app.add_subcommand("filter", "flag background patches with the auto-encoder filter");
  add_common(filter);
  auto* normalize = app.add_subcommand("normalize", "stain-normalize kept patches and convert to gray");
  add_common(normalize);
  normalize->add_option("--samples", samples, "before/after triplets to write");
  auto* train = app.add_subcommand("train", "train one model family for every run");
  add_common(train);
  train->add_option("--model", model, "flat or hier")->required()->check(CLI::IsMember({"flat", "hier"}));
  auto* evaluate = app.add_subcommand("evaluate", "score both families and write the reports");
  add_common(evaluate);
  auto* keys = app.add_subcommand("config", "print every config key with its default");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (keys->parsed()) {
      RunConfig defaults;
      for (const auto& k : config_keys()) out << "# " << k.name << ": " << k.doc << '\n';
      out << defaults.render();
      return 0;
    }
    RunConfig config = RunConfig::load(config_path);
    if (seed) {
      config.set("seed", std::to_string(*seed));
      config.validate();
    }
    if (synth->parsed()) cmd_synth(config, out, samples);
    if (patch->parsed()) cmd_patch(config, out);
    if (filter->parsed()) cmd_filter(config, out);
    if (normalize->parsed()) cmd_normalize(config, out, samples);
    if (train->parsed()) cmd_train(config, model == "hier", out);
    if (evaluate->parsed()) cmd_evaluate(config, out);
    return 0;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace hvgg
