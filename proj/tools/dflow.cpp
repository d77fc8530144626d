// dflow: data generation, staged training, evaluation and oracle suites for
// the discrete-flow trajectory planner.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <CLI11.hpp>

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dflow/harness.hpp"

namespace {

std::vector<int> parse_steps(const std::string& list) {
  std::vector<int> out;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      throw dflow::ValidationError("--steps: '" + item + "' is not an integer");
    }
    if (used != item.size() || v < 1) throw dflow::ValidationError("--steps: '" + item + "' must be a positive integer");
    out.push_back(v);
  }
  if (out.empty()) throw dflow::ValidationError("--steps: empty list");
  return out;
}

struct Common {
  std::string config;
  std::string out;
  std::string steps;
  std::string checkpoint;
  std::string scenes;
  long long seed = -1;
};

dflow::RunConfig resolve(const Common& c) {
  dflow::RunConfig cfg = c.config.empty() ? dflow::RunConfig{} : dflow::load_config(c.config);
  if (c.seed >= 0) cfg.seed = static_cast<std::uint64_t>(c.seed);
  if (!c.steps.empty()) cfg.steps_list = parse_steps(c.steps);
  cfg.out = dflow::harness::resolve_out(cfg, c.out);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dflow: discrete flow matching planner toolkit"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "run configuration (JSON)");
    sub->add_option("--seed", common.seed, "override the run seed")->check(CLI::NonNegativeNumber);
    sub->add_option("--out", common.out, "output directory");
  };

  auto* gen = app.add_subcommand("gen-data", "generate train/val/test scene files");
  add_common(gen);

  std::string stage;
  auto* train = app.add_subcommand("train", "run a training stage");
  train->add_option("stage", stage, "embed | flow | grpo")->required()->check(CLI::IsMember({"embed", "flow", "grpo"}));
  add_common(train);

  auto* eval = app.add_subcommand("eval", "coarse-to-fine evaluation over step counts");
  add_common(eval);
  eval->add_option("--steps", common.steps, "comma separated step counts, e.g. 1,2,3,5,10");
  eval->add_option("--checkpoint", common.checkpoint, "policy checkpoint (default: grpo, else flow)");
  eval->add_option("--scenes", common.scenes, "scene JSONL (default: the test split)");

  auto* sample = app.add_subcommand("sample", "sample trajectories for a scene file");
  add_common(sample);
  sample->add_option("--steps", common.steps, "comma separated step counts");
  sample->add_option("--checkpoint", common.checkpoint, "policy checkpoint (default: grpo, else flow)");
  sample->add_option("--scenes", common.scenes, "scene JSONL (default: the test split)");

  std::string suite;
  auto* oracle = app.add_subcommand("oracle", "run an oracle suite");
  oracle->add_option("suite", suite, "ctmc | gradcheck | reward")
      ->required()
      ->check(CLI::IsMember({"ctmc", "gradcheck", "reward"}));
  add_common(oracle);

  auto* report = app.add_subcommand("report", "summarize the artifacts of a run");
  add_common(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    const auto cfg = resolve(common);
    const dflow::harness::Artifacts art{cfg.out};
    if (*gen) {
      const auto m = dflow::harness::cmd_gen_data(cfg, art);
      std::cout << m.dump(2) << '\n';
    } else if (*train) {
      dflow::harness::cmd_train(stage, cfg, art, std::cout);
    } else if (*eval) {
      dflow::harness::cmd_eval(cfg, art, common.checkpoint, common.scenes, std::cout);
    } else if (*sample) {
      dflow::harness::cmd_sample(cfg, art, common.checkpoint, common.scenes, std::cout);
    } else if (*oracle) {
      if (!dflow::harness::cmd_oracle(suite, cfg, art, std::cout)) return 2;
    } else if (*report) {
      dflow::harness::cmd_report(cfg, art, std::cout);
    }
  } catch (const dflow::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
