#pragma once

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dflow/codebook.hpp"
#include "dflow/drivesim.hpp"
#include "dflow/errors.hpp"
#include "dflow/flow_trainer.hpp"
#include "dflow/grpo.hpp"
#include "dflow/jump_sampler.hpp"
#include "dflow/posterior_net.hpp"
#include "dflow/prob_path.hpp"

namespace dflow {

using json = nlohmann::json;

struct DataConfig {
  int train = 1000;
  int val = 100;
  int test = 200;
  std::array<double, 3> mix{1.0, 1.0, 1.0};  // easy, medium, hard
};

struct RunConfig {
  std::uint64_t seed = 7;
  CodebookSpec codebook = CodebookSpec::desk();
  GibbsSchedule schedule{};
  NetDims model{};
  EmbedConfig embed{};
  FlowConfig flow{};
  GrpoConfig grpo{};
  SamplerConfig sampler{};
  std::vector<int> steps_list{1, 2, 3, 5, 10};
  DataConfig data{};
  std::string out = "runs/desk";

  CoordinateSpace space() const { return CoordinateSpace::uniform(codebook, model.positions); }

  // Stage seeds hang off the single run seed.
  std::uint64_t stage_seed(std::uint64_t tag) const { return derive_seed(seed, {tag}); }

  void validate() const;
};

enum : std::uint64_t { kSeedData = 0xDA7A, kSeedEmbed = 0xE3B, kSeedFlow = 0xF10, kSeedGrpo = 0x6290, kSeedSample = 0x5A3 };

namespace detail {

// Reads one JSON object, rejecting keys that were not consumed.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("config: '" + path_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    const std::string where = path_.empty() ? key : path_ + "." + key;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ValidationError("config: '" + where + "' must be a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ValidationError("config: '" + where + "' must be an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned()) {
            throw ValidationError("config: '" + where + "' must be non-negative");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ValidationError("config: '" + where + "' must be a number");
      }
      out = v.get<T>();
    } catch (const json::exception& e) {
      throw ValidationError("config: '" + where + "': " + e.what());
    }
  }

  ObjectReader child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return {j_.contains(key) ? j_.at(key) : empty, path_.empty() ? key : path_ + "." + key};
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ValidationError("config: unknown key '" + (path_.empty() ? k : path_ + "." + k) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline RateClock clock_from_string(const std::string& s) {
  if (s == "instantaneous") return RateClock::instantaneous;
  if (s == "step_integrated") return RateClock::step_integrated;
  throw ValidationError("config: sampler.clock must be 'instantaneous' or 'step_integrated', got '" + s + "'");
}

inline const char* to_string(RateClock c) { return c == RateClock::instantaneous ? "instantaneous" : "step_integrated"; }

}  // namespace detail

inline void RunConfig::validate() const {
  codebook.validate();
  schedule.validate();
  model.validate();
  if (model.alphabet != codebook.size()) {
    throw ValidationError("config: model.alphabet (" + std::to_string(model.alphabet) + ") != codebook size (" +
                          std::to_string(codebook.size()) + ")");
  }
  if (model.positions != 2 * sim::kWaypoints) throw ValidationError("config: model.positions must be 16");
  if (!(embed.lr > 0.0) || embed.steps < 0 || embed.batch < 1 || embed.dimension != model.d_in) {
    throw ValidationError("config: embed needs lr > 0, steps >= 0, batch >= 1 and dimension == model.d_in");
  }
  flow.validate();
  grpo.validate();
  sampler.validate();
  if (steps_list.empty()) throw ValidationError("config: sampler.steps_list must not be empty");
  for (int n : steps_list) {
    if (n < 1) throw ValidationError("config: sampler.steps_list entries must be >= 1");
  }
  if (data.train < 0 || data.val < 0 || data.test < 0) throw ValidationError("config: data counts must be >= 0");
  double mix_sum = 0.0;
  for (double m : data.mix) {
    if (!(m >= 0.0)) throw ValidationError("config: data.mix weights must be >= 0");
    mix_sum += m;
  }
  if (!(mix_sum > 0.0)) throw ValidationError("config: data.mix must have a positive weight");
  if (out.empty()) throw ValidationError("config: out must not be empty");
}

inline json to_json(const RunConfig& c) {
  return json{
      {"seed", c.seed},
      {"codebook", {{"min", c.codebook.min_value}, {"max", c.codebook.max_value}, {"resolution", c.codebook.resolution}}},
      {"schedule", {{"scale", c.schedule.scale}, {"exponent", c.schedule.exponent}, {"t_max", c.schedule.t_max}}},
      {"model",
       {{"positions", c.model.positions},
        {"alphabet", c.model.alphabet},
        {"d_in", c.model.d_in},
        {"time_features", c.model.time_features},
        {"hidden", c.model.hidden}}},
      {"embed",
       {{"dimension", c.embed.dimension},
        {"lr", c.embed.lr},
        {"weight_decay", c.embed.weight_decay},
        {"margin", c.embed.margin},
        {"steps", c.embed.steps},
        {"batch", c.embed.batch},
        {"eval_triplets", c.embed.eval_triplets},
        {"global_fraction", c.embed.sampler.global_fraction}}},
      {"flow",
       {{"lr", c.flow.lr},
        {"weight_decay", c.flow.weight_decay},
        {"steps", c.flow.steps},
        {"batch", c.flow.batch},
        {"warmup", c.flow.warmup},
        {"cosine", c.flow.cosine},
        {"freeze_embeddings", c.flow.freeze_embeddings},
        {"checkpoint_every", c.flow.checkpoint_every}}},
      {"grpo",
       {{"group_size", c.grpo.group_size},
        {"clip", c.grpo.clip},
        {"kl_strength", c.grpo.kl_strength},
        {"lr", c.grpo.lr},
        {"weight_decay", c.grpo.weight_decay},
        {"steps", c.grpo.steps},
        {"batch", c.grpo.groups_per_step},
        {"warmup", c.grpo.warmup},
        {"inner_steps", c.grpo.inner_steps},
        {"freeze_embeddings", c.grpo.freeze_embeddings},
        {"weights", {{"ep", c.grpo.weights.ep}, {"ttc", c.grpo.weights.ttc}, {"comfort", c.grpo.weights.comfort}}}}},
      {"sampler",
       {{"steps", c.sampler.steps},
        {"steps_list", c.steps_list},
        {"final_snap", c.sampler.final_snap},
        {"clock", detail::to_string(c.sampler.clock)}}},
      {"data",
       {{"train", c.data.train},
        {"val", c.data.val},
        {"test", c.data.test},
        {"mix", {{"easy", c.data.mix[0]}, {"medium", c.data.mix[1]}, {"hard", c.data.mix[2]}}}}},
      {"out", c.out},
  };
}

/// Parses a config document over the defaults. Unknown keys and
/// out-of-range values raise ValidationError.
inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  detail::ObjectReader root(j, "");
  root.get("seed", c.seed);
  root.get("out", c.out);
  {
    auto r = root.child("codebook");
    r.get("min", c.codebook.min_value);
    r.get("max", c.codebook.max_value);
    r.get("resolution", c.codebook.resolution);
    r.finish();
  }
  {
    auto r = root.child("schedule");
    r.get("scale", c.schedule.scale);
    r.get("exponent", c.schedule.exponent);
    r.get("t_max", c.schedule.t_max);
    r.finish();
  }
  {
    auto r = root.child("model");
    r.get("positions", c.model.positions);
    r.get("alphabet", c.model.alphabet);
    r.get("d_in", c.model.d_in);
    r.get("time_features", c.model.time_features);
    r.get("hidden", c.model.hidden);
    r.finish();
    if (!r.has("alphabet") && c.codebook.resolution > 0.0 && c.codebook.max_value > c.codebook.min_value) {
      c.model.alphabet = c.codebook.size();
    }
  }
  {
    auto r = root.child("embed");
    c.embed.dimension = c.model.d_in;
    r.get("dimension", c.embed.dimension);
    r.get("lr", c.embed.lr);
    r.get("weight_decay", c.embed.weight_decay);
    r.get("margin", c.embed.margin);
    r.get("steps", c.embed.steps);
    r.get("batch", c.embed.batch);
    r.get("eval_triplets", c.embed.eval_triplets);
    r.get("global_fraction", c.embed.sampler.global_fraction);
    r.finish();
  }
  {
    auto r = root.child("flow");
    r.get("lr", c.flow.lr);
    r.get("weight_decay", c.flow.weight_decay);
    r.get("steps", c.flow.steps);
    r.get("batch", c.flow.batch);
    r.get("warmup", c.flow.warmup);
    r.get("cosine", c.flow.cosine);
    r.get("freeze_embeddings", c.flow.freeze_embeddings);
    r.get("checkpoint_every", c.flow.checkpoint_every);
    r.finish();
  }
  {
    auto r = root.child("grpo");
    r.get("group_size", c.grpo.group_size);
    r.get("clip", c.grpo.clip);
    r.get("kl_strength", c.grpo.kl_strength);
    r.get("lr", c.grpo.lr);
    r.get("weight_decay", c.grpo.weight_decay);
    r.get("steps", c.grpo.steps);
    r.get("batch", c.grpo.groups_per_step);
    r.get("warmup", c.grpo.warmup);
    r.get("inner_steps", c.grpo.inner_steps);
    r.get("freeze_embeddings", c.grpo.freeze_embeddings);
    if (r.has("preset")) {
      std::string name;
      r.get("preset", name);
      const auto p = grpo_preset(name);
      c.grpo.group_size = p.group_size;
      c.grpo.weights = p.weights;
    }
    auto w = r.child("weights");
    w.get("ep", c.grpo.weights.ep);
    w.get("ttc", c.grpo.weights.ttc);
    w.get("comfort", c.grpo.weights.comfort);
    w.finish();
    r.finish();
  }
  {
    auto r = root.child("sampler");
    r.get("steps", c.sampler.steps);
    r.get("steps_list", c.steps_list);
    r.get("final_snap", c.sampler.final_snap);
    if (r.has("clock")) {
      std::string s;
      r.get("clock", s);
      c.sampler.clock = detail::clock_from_string(s);
    }
    r.finish();
  }
  {
    auto r = root.child("data");
    r.get("train", c.data.train);
    r.get("val", c.data.val);
    r.get("test", c.data.test);
    auto m = r.child("mix");
    m.get("easy", c.data.mix[0]);
    m.get("medium", c.data.mix[1]);
    m.get("hard", c.data.mix[2]);
    m.finish();
    r.finish();
  }
  root.finish();
  c.sampler.schedule = c.schedule;
  c.grpo.sampler = c.sampler;
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError(path + ": cannot open config");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return config_from_json(j);
}

/// FNV-1a over the canonical (sorted-key, compact) serialization.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// The output directory does not affect results and is left out.
inline std::uint64_t config_hash(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("out");
  return fnv1a(j.dump());
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace dflow
