#pragma once

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dflow/codebook.hpp"
#include "dflow/config.hpp"
#include "dflow/flow_trainer.hpp"
#include "dflow/grpo.hpp"
#include "dflow/jump_sampler.hpp"
#include "dflow/oracles.hpp"
#include "dflow/scene_io.hpp"
#include "dflow/stats.hpp"

namespace dflow::harness {

namespace fs = std::filesystem;

// Fixed artifact layout under the run's output directory.
struct Artifacts {
  fs::path root;

  fs::path data_dir() const { return root / "data"; }
  fs::path split(const std::string& name) const { return data_dir() / (name + ".jsonl"); }
  fs::path embed_dir() const { return root / "embed"; }
  fs::path embeddings() const { return embed_dir() / "embeddings.emb"; }
  fs::path flow_dir() const { return root / "flow"; }
  fs::path flow_policy() const { return flow_dir() / "policy.net"; }
  fs::path grpo_dir() const { return root / "grpo"; }
  fs::path grpo_policy() const { return grpo_dir() / "policy.net"; }
  fs::path eval_dir() const { return root / "eval"; }
  fs::path sample_dir() const { return root / "sample"; }
  fs::path oracle_dir() const { return root / "oracle"; }
  fs::path report_dir() const { return root / "report"; }
};

/// Output directory precedence: explicit flag, then DFLOW_OUT, then config.
inline std::string resolve_out(const RunConfig& cfg, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("DFLOW_OUT"); env != nullptr && *env != '\0') return env;
  return cfg.out;
}

inline std::uint64_t run_hash(const RunConfig& cfg) { return config_hash(cfg); }

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw RuntimeFailure(p.string() + ": cannot create directory (" + ec.message() + ")");
}

inline std::ofstream open_out(const fs::path& p) {
  ensure_dir(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw RuntimeFailure(p.string() + ": cannot open for writing");
  os << std::setprecision(17);
  return os;
}

inline void close_out(std::ofstream& os, const fs::path& p) {
  os.close();
  if (!os) throw RuntimeFailure(p.string() + ": write failed");
}

// CSV with a leading "# config_hash=..." comment line, then the header row.
inline std::ofstream open_csv(const fs::path& p, std::uint64_t hash, const std::string& header) {
  auto os = open_out(p);
  os << "# config_hash=" << hex64(hash) << '\n' << header << '\n';
  return os;
}

inline std::uint64_t file_hash(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw RuntimeFailure(p.string() + ": cannot open for reading");
  std::ostringstream ss;
  ss << is.rdbuf();
  return fnv1a(ss.str());
}

inline void write_json(const fs::path& p, const json& j) {
  auto os = open_out(p);
  os << j.dump(2) << '\n';
  close_out(os, p);
}

inline json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw RuntimeFailure(p.string() + ": cannot open for reading");
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw RuntimeFailure(p.string() + ": " + e.what());
  }
}

inline void require_artifact(const fs::path& p, const std::string& stage, const std::string& prerequisite) {
  if (!fs::exists(p)) {
    throw StageOrderError(stage + " requires " + p.string() + "; run `dflow " + prerequisite + "` first");
  }
}

// ---------------------------------------------------------------------------
// gen-data

inline sim::Difficulty draw_difficulty(SplitMix64& rng, const std::array<double, 3>& mix) {
  return static_cast<sim::Difficulty>(sample_categorical(rng, std::span<const double>(mix.data(), mix.size())));
}

inline const std::array<const char*, 3> kSplits = {"train", "val", "test"};

/// Scene i of split s: seed derive(data_seed, s, i), id s * 10^6 + i.
inline std::vector<sim::Scene> generate_split(const RunConfig& cfg, int split, int count) {
  std::vector<sim::Scene> out;
  out.reserve(static_cast<std::size_t>(count));
  const std::uint64_t base = cfg.stage_seed(kSeedData);
  sim::GeneratorConfig gen;
  gen.codebook = cfg.codebook;
  for (int i = 0; i < count; ++i) {
    auto rng = substream(base, {static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(i), 0xD1FF});
    const auto difficulty = draw_difficulty(rng, cfg.data.mix);
    auto scene = sim::generate_scene(derive_seed(base, {static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(i)}),
                                     difficulty, gen);
    scene.id = static_cast<std::int64_t>(split) * 1000000 + i;
    out.push_back(std::move(scene));
  }
  return out;
}

inline json cmd_gen_data(const RunConfig& cfg, const Artifacts& art) {
  const std::array<int, 3> counts = {cfg.data.train, cfg.data.val, cfg.data.test};
  for (int c : counts) {
    if (c >= 1000000) throw ValidationError("gen-data: at most 999999 scenes per split");
  }
  ensure_dir(art.data_dir());
  const auto hash = run_hash(cfg);
  json files = json::object();
  for (int s = 0; s < 3; ++s) {
    const auto scenes = generate_split(cfg, s, counts[static_cast<std::size_t>(s)]);
    const auto path = art.split(kSplits[static_cast<std::size_t>(s)]);
    sim::write_scenes_jsonl(path.string(), scenes);
    files[kSplits[static_cast<std::size_t>(s)]] = {
        {"path", path.filename().string()}, {"lines", scenes.size()}, {"fnv1a", hex64(file_hash(path))}};
  }
  json manifest = {{"stage", "gen-data"},
                   {"config_hash", hex64(hash)},
                   {"seed", cfg.seed},
                   {"counts", {{"train", counts[0]}, {"val", counts[1]}, {"test", counts[2]}}},
                   {"mix", {{"easy", cfg.data.mix[0]}, {"medium", cfg.data.mix[1]}, {"hard", cfg.data.mix[2]}}},
                   {"files", files}};
  write_json(art.data_dir() / "manifest.json", manifest);
  return manifest;
}

// ---------------------------------------------------------------------------
// train

inline json cmd_train_embed(const RunConfig& cfg, const Artifacts& art, std::ostream& log) {
  EmbedConfig ec = cfg.embed;
  ec.seed = cfg.stage_seed(kSeedEmbed);
  const auto result = train_embeddings(cfg.codebook, ec);
  const auto hash = run_hash(cfg);
  ensure_dir(art.embed_dir());
  save_embeddings(result.table, art.embeddings().string());
  {
    const auto p = art.embed_dir() / "trace.csv";
    auto os = open_csv(p, hash, "step,loss");
    for (std::size_t i = 0; i < result.loss_trace.size(); ++i) os << i << ',' << result.loss_trace[i] << '\n';
    close_out(os, p);
  }
  const double rho = stats::embedding_alignment(result.table);
  json manifest = {{"stage", "embed"},
                   {"config_hash", hex64(hash)},
                   {"checkpoint", art.embeddings().filename().string()},
                   {"checkpoint_fnv1a", hex64(file_hash(art.embeddings()))},
                   {"spearman", rho},
                   {"initial_eval_loss", result.initial_eval_loss},
                   {"final_eval_loss", result.final_eval_loss}};
  write_json(art.embed_dir() / "manifest.json", manifest);
  log << "embed: spearman " << rho << ", eval loss " << result.initial_eval_loss << " -> " << result.final_eval_loss
      << '\n';
  return manifest;
}

inline std::vector<sim::Scene> load_split(const Artifacts& art, const std::string& name, const std::string& stage) {
  const auto p = art.split(name);
  require_artifact(p, stage, "gen-data");
  return sim::read_scenes_jsonl(p.string());
}

inline json cmd_train_flow(const RunConfig& cfg, const Artifacts& art, std::ostream& log) {
  require_artifact(art.embeddings(), "train flow", "train embed");
  const auto scenes = load_split(art, "train", "train flow");
  if (scenes.empty()) throw ValidationError("train flow: the train split is empty");
  const auto table = load_embeddings(art.embeddings().string());
  if (table.size() != cfg.codebook.size() || table.dimension() != cfg.model.d_in) {
    throw ValidationError("train flow: embedding checkpoint does not match the configured codebook / d_in");
  }
  std::vector<FlowExample> data;
  data.reserve(scenes.size());
  for (const auto& s : scenes) data.push_back(example_from_scene(s, cfg.codebook));

  const auto hash = run_hash(cfg);
  auto theta = PolicyParams::initialize(cfg.model, cfg.stage_seed(kSeedFlow), &table);
  FlowConfig fc = cfg.flow;
  fc.seed = cfg.stage_seed(kSeedFlow);
  ensure_dir(art.flow_dir());
  auto result = train_flow(data, std::move(theta), fc, cfg.space(), cfg.schedule, [&](long step, const PolicyParams& p) {
    PolicyParams copy = p;
    copy.checkpoint_id = hash;
    save_policy(copy, (art.flow_dir() / ("policy-" + std::to_string(step) + ".net")).string());
  });
  result.params.checkpoint_id = hash;
  save_policy(result.params, art.flow_policy().string());
  {
    const auto p = art.flow_dir() / "trace.csv";
    auto os = open_csv(p, hash, "step,ce,grad_norm");
    for (const auto& r : result.trace) os << r.step << ',' << r.ce << ',' << r.grad_norm << '\n';
    close_out(os, p);
  }
  json manifest = {{"stage", "flow"},
                   {"config_hash", hex64(hash)},
                   {"checkpoint", art.flow_policy().filename().string()},
                   {"checkpoint_fnv1a", hex64(file_hash(art.flow_policy()))},
                   {"steps", fc.steps},
                   {"final_ce", result.trace.empty() ? 0.0 : result.trace.back().ce}};
  write_json(art.flow_dir() / "manifest.json", manifest);
  log << "flow: " << fc.steps << " steps, final CE " << manifest["final_ce"].get<double>() << '\n';
  return manifest;
}

inline json cmd_train_grpo(const RunConfig& cfg, const Artifacts& art, std::ostream& log) {
  require_artifact(art.flow_policy(), "train grpo", "train flow");
  const auto scenes = load_split(art, "train", "train grpo");
  if (scenes.empty()) throw ValidationError("train grpo: the train split is empty");
  const auto sft = load_policy(art.flow_policy().string());
  if (!(sft.dims() == cfg.model)) throw ValidationError("train grpo: flow checkpoint does not match model dims");

  const auto hash = run_hash(cfg);
  GrpoConfig gc = cfg.grpo;
  gc.seed = cfg.stage_seed(kSeedGrpo);
  auto result = grpo_finetune(sft, scenes, gc, cfg.space());
  result.params.checkpoint_id = hash;
  ensure_dir(art.grpo_dir());
  save_policy(result.params, art.grpo_policy().string());
  {
    const auto p = art.grpo_dir() / "trace.csv";
    auto os = open_csv(p, hash, "iter,mean_reward,mean_kl,clip_fraction");
    for (const auto& r : result.trace) os << r.iter << ',' << r.mean_reward << ',' << r.mean_kl << ',' << r.clip_fraction << '\n';
    close_out(os, p);
  }
  json manifest = {{"stage", "grpo"},
                   {"config_hash", hex64(hash)},
                   {"checkpoint", art.grpo_policy().filename().string()},
                   {"checkpoint_fnv1a", hex64(file_hash(art.grpo_policy()))},
                   {"iterations", gc.steps},
                   {"group_size", gc.group_size}};
  write_json(art.grpo_dir() / "manifest.json", manifest);
  log << "grpo: " << gc.steps << " iterations, last mean reward "
      << (result.trace.empty() ? 0.0 : result.trace.back().mean_reward) << '\n';
  return manifest;
}

inline json cmd_train(const std::string& stage, const RunConfig& cfg, const Artifacts& art, std::ostream& log) {
  if (stage == "embed") return cmd_train_embed(cfg, art, log);
  if (stage == "flow") return cmd_train_flow(cfg, art, log);
  if (stage == "grpo") return cmd_train_grpo(cfg, art, log);
  throw ValidationError("train: unknown stage '" + stage + "' (expected embed, flow or grpo)");
}

// ---------------------------------------------------------------------------
// eval / sample

/// The explicit checkpoint, else the GRPO policy, else the flow policy.
inline fs::path resolve_checkpoint(const Artifacts& art, const std::string& flag, const std::string& stage) {
  if (!flag.empty()) {
    if (!fs::exists(flag)) throw ValidationError(stage + ": checkpoint " + flag + " does not exist");
    return flag;
  }
  if (fs::exists(art.grpo_policy())) return art.grpo_policy();
  require_artifact(art.flow_policy(), stage, "train flow");
  return art.flow_policy();
}

inline std::vector<sim::Scene> resolve_scenes(const Artifacts& art, const std::string& flag, const std::string& stage) {
  if (!flag.empty()) return sim::read_scenes_jsonl(flag);
  return load_split(art, "test", stage);
}

inline json waypoints_json(const sim::Waypoints& w) {
  json a = json::array();
  for (const auto& p : w) a.push_back({p.x(), p.y()});
  return a;
}

inline std::vector<StepCountRow> cmd_eval(const RunConfig& cfg, const Artifacts& art, const std::string& checkpoint,
                                          const std::string& scenes_path, std::ostream& log) {
  const auto ckpt = resolve_checkpoint(art, checkpoint, "eval");
  const auto theta = load_policy(ckpt.string());
  if (!(theta.dims() == cfg.model)) throw ValidationError("eval: checkpoint does not match model dims");
  const auto scenes = resolve_scenes(art, scenes_path, "eval");
  SamplerConfig sc = cfg.sampler;
  sc.seed = cfg.stage_seed(kSeedSample);
  const auto rows = coarse_to_fine_eval(scenes, theta, cfg.steps_list, sc, cfg.space(), cfg.grpo.weights);

  const auto hash = run_hash(cfg);
  {
    const auto p = art.eval_dir() / "metrics.csv";
    auto os = open_csv(p, hash, "n_steps,mean_reward,mean_pdms,mean_l2,wall_time");
    for (const auto& r : rows) {
      os << r.n_steps << ',' << r.mean_reward << ',' << r.mean_pdms << ',' << r.mean_l2 << ',' << r.wall_time << '\n';
    }
    close_out(os, p);
  }
  {
    const auto p = art.eval_dir() / "scenes.jsonl";
    auto os = open_out(p);
    for (const auto& r : rows) {
      for (const auto& s : r.scenes) {
        os << json{{"config_hash", hex64(hash)},
                   {"scene_id", s.scene_id},
                   {"n_steps", s.n_steps},
                   {"seed", s.seed},
                   {"final_snap", sc.final_snap},
                   {"tokens", s.tokens},
                   {"waypoints", waypoints_json(s.waypoints)},
                   {"l2", s.l2},
                   {"reward", s.reward.reward},
                   {"pdms", s.reward.pdms},
                   {"nc", s.reward.nc},
                   {"dac", s.reward.dac},
                   {"ttc", s.reward.ttc},
                   {"comfort", s.reward.comfort},
                   {"ep", s.reward.ep}}
                  .dump()
           << '\n';
      }
    }
    close_out(os, p);
  }
  {
    const auto p = art.eval_dir() / "scores.csv";
    auto os = open_csv(p, hash, "scene_id,n_steps,nc,dac,ttc,comfort,ep,reward,pdms");
    for (const auto& r : rows) {
      for (const auto& s : r.scenes) {
        os << s.scene_id << ',' << s.n_steps << ',' << s.reward.nc << ',' << s.reward.dac << ',' << s.reward.ttc << ','
           << s.reward.comfort << ',' << s.reward.ep << ',' << s.reward.reward << ',' << s.reward.pdms << '\n';
      }
    }
    close_out(os, p);
  }
  log << "eval " << ckpt.string() << " on " << scenes.size() << " scenes (final_snap "
      << (sc.final_snap ? "on" : "off") << ")\n";
  log << "n_steps,mean_reward,mean_pdms,mean_l2,wall_time\n";
  for (const auto& r : rows) {
    log << r.n_steps << ',' << r.mean_reward << ',' << r.mean_pdms << ',' << r.mean_l2 << ',' << r.wall_time << '\n';
  }
  return rows;
}

inline std::size_t cmd_sample(const RunConfig& cfg, const Artifacts& art, const std::string& checkpoint,
                              const std::string& scenes_path, std::ostream& log) {
  const auto ckpt = resolve_checkpoint(art, checkpoint, "sample");
  const auto theta = load_policy(ckpt.string());
  if (!(theta.dims() == cfg.model)) throw ValidationError("sample: checkpoint does not match model dims");
  const auto scenes = resolve_scenes(art, scenes_path, "sample");
  const auto hash = run_hash(cfg);
  const auto space = cfg.space();
  const auto p = art.sample_dir() / "samples.jsonl";
  auto os = open_out(p);
  std::size_t written = 0;
  for (int n : cfg.steps_list) {
    SamplerConfig sc = cfg.sampler;
    sc.steps = n;
    std::vector<ContextEncoding> contexts;
    std::vector<std::uint64_t> seeds;
    for (const auto& s : scenes) {
      contexts.push_back(sim::context_of(s, cfg.codebook));
      seeds.push_back(scene_sampling_seed(cfg.stage_seed(kSeedSample), s.id));
    }
    const auto tokens = sample_batch(model_posterior(theta, contexts), seeds, space, sc);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      os << json{{"config_hash", hex64(hash)},
                 {"scene_id", scenes[i].id},
                 {"n_steps", n},
                 {"seed", seeds[i]},
                 {"final_snap", sc.final_snap},
                 {"tokens", tokens[i]},
                 {"waypoints", waypoints_json(sim::decode_waypoints(tokens[i], scenes[i].ego0, cfg.codebook))}}
                .dump()
         << '\n';
      ++written;
    }
  }
  close_out(os, p);
  log << "sample: " << written << " trajectories -> " << p.string() << '\n';
  return written;
}

// ---------------------------------------------------------------------------
// oracle

inline bool cmd_oracle(const std::string& suite, const RunConfig& cfg, const Artifacts& art, std::ostream& log) {
  const auto hash = run_hash(cfg);
  std::vector<oracle::Check> checks;
  if (suite == "ctmc") {
    oracle::CtmcOptions o;
    o.seed = cfg.seed;
    const auto r = oracle::run_ctmc(o, cfg.schedule);
    checks = oracle::ctmc_checks(r, o.target);
    const auto space = oracle::small_space();
    const auto p = art.oracle_dir() / "ctmc_marginals.csv";
    auto os = open_csv(p, hash, "t,x,p_analytic,p_empirical,residual");
    for (const auto* rep : {&r.mid, &r.terminal}) {
      const double t = std::min(rep->time, cfg.schedule.t_max - 1e-3);
      const double residual = gibbs_forward_residual(space, o.target, t, 1e-5, cfg.schedule);
      write_marginal_csv(os, *rep, residual, false);
    }
    close_out(os, p);
  } else if (suite == "gradcheck") {
    oracle::GradcheckOptions o;
    o.seed = cfg.seed;
    const auto r = oracle::gradcheck(cfg.model, o);
    checks = oracle::gradcheck_checks(r, o.tolerance);
    const auto p = art.oracle_dir() / "gradcheck.csv";
    auto os = open_csv(p, hash, "block,index,analytic,numeric,rel_error");
    for (const auto& e : r.entries) {
      os << block_name(e.block) << ',' << e.index << ',' << e.analytic << ',' << e.numeric << ',' << e.rel_error << '\n';
    }
    close_out(os, p);
    log << "gradcheck: " << r.entries.size() << " coordinates, max relative error " << r.max_rel_error << '\n';
  } else if (suite == "reward") {
    checks = oracle::reward_checks(100, cfg.seed);
  } else {
    throw ValidationError("oracle: unknown suite '" + suite + "' (expected ctmc, gradcheck or reward)");
  }
  oracle::print(log, checks);
  return oracle::all_pass(checks);
}

// ---------------------------------------------------------------------------
// report

/// Collects stage manifests and the eval table into report/summary.csv
/// {section, key, value}; plot-ready tables stay where their stage wrote them.
inline std::size_t cmd_report(const RunConfig& cfg, const Artifacts& art, std::ostream& log) {
  const auto hash = run_hash(cfg);
  const auto p = art.report_dir() / "summary.csv";
  auto os = open_csv(p, hash, "section,key,value");
  std::size_t rows = 0;
  auto emit = [&](const std::string& section, const std::string& key, const std::string& value) {
    os << section << ',' << key << ',' << value << '\n';
    log << section << '.' << key << " = " << value << '\n';
    ++rows;
  };
  const std::vector<std::pair<std::string, fs::path>> manifests = {
      {"data", art.data_dir() / "manifest.json"},
      {"embed", art.embed_dir() / "manifest.json"},
      {"flow", art.flow_dir() / "manifest.json"},
      {"grpo", art.grpo_dir() / "manifest.json"}};
  for (const auto& [section, path] : manifests) {
    if (!fs::exists(path)) {
      emit(section, "status", "missing");
      continue;
    }
    const auto j = read_json(path);
    for (const auto& [k, v] : j.items()) {
      if (v.is_primitive()) emit(section, k, v.is_string() ? v.get<std::string>() : v.dump());
    }
    if (j.value("config_hash", "") != hex64(hash)) emit(section, "note", "config hash differs from the current config");
  }
  const auto metrics = art.eval_dir() / "metrics.csv";
  if (fs::exists(metrics)) {
    std::ifstream is(metrics);
    std::string line;
    std::vector<std::string> header;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::vector<std::string> cells;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
      if (header.empty()) {
        header = cells;
        continue;
      }
      for (std::size_t i = 1; i < cells.size() && i < header.size(); ++i) emit("eval", "n" + cells[0] + "." + header[i], cells[i]);
    }
  } else {
    emit("eval", "status", "missing");
  }
  close_out(os, p);
  return rows;
}

}  // namespace dflow::harness
