#pragma once

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "dflow/drivesim.hpp"
#include "dflow/errors.hpp"

namespace dflow::sim {

using nlohmann::json;

inline json vec_json(const Vec2& v) { return json::array({v.x(), v.y()}); }

inline json scene_to_json(const Scene& s) {
  json agents = json::array();
  for (const auto& a : s.agents) {
    agents.push_back({{"center", vec_json(a.center)}, {"radius", a.radius}, {"velocity", vec_json(a.velocity)}});
  }
  json obstacles = json::array();
  for (const auto& o : s.obstacles) obstacles.push_back({{"center", vec_json(o.center)}, {"radius", o.radius}});
  json drivable = json::array();
  for (const auto& p : s.drivable) drivable.push_back(vec_json(p));
  json route = json::array();
  for (const auto& p : s.route) route.push_back(vec_json(p));
  json expert = json::array();
  for (const auto& p : s.expert) expert.push_back(vec_json(p));
  return {{"id", s.id},
          {"seed", s.seed},
          {"command", to_string(s.command)},
          {"ego0", {{"x", s.ego0.x}, {"y", s.ego0.y}, {"heading", s.ego0.heading}, {"v", s.ego0.v}, {"a", s.ego0.a}}},
          {"agents", agents},
          {"obstacles", obstacles},
          {"drivable", drivable},
          {"route", route},
          {"expert", expert}};
}

namespace detail {

struct SchemaError {
  std::string what;
};

inline void only_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw SchemaError{where + " must be an object"};
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw SchemaError{"unknown field '" + where + k + "'"};
  }
  for (const char* k : keys) {
    if (!j.contains(k)) throw SchemaError{"missing field '" + where + k + "'"};
  }
}

inline double number(const json& j, const std::string& where) {
  if (!j.is_number()) throw SchemaError{"'" + where + "' must be a number"};
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw SchemaError{"'" + where + "' must be finite"};
  return v;
}

inline Vec2 vec(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2) throw SchemaError{"'" + where + "' must be a [x, y] pair"};
  return {number(j[0], where + "[0]"), number(j[1], where + "[1]")};
}

inline std::vector<Vec2> polyline(const json& j, const std::string& where) {
  if (!j.is_array()) throw SchemaError{"'" + where + "' must be an array of points"};
  std::vector<Vec2> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(vec(j[i], where + "[" + std::to_string(i) + "]"));
  return out;
}

inline double positive(const json& j, const std::string& where) {
  const double v = number(j, where);
  if (!(v > 0.0)) throw SchemaError{"'" + where + "' must be > 0"};
  return v;
}

}  // namespace detail

/// Parses one scene record. Schema problems raise ValidationError naming `where`.
inline Scene scene_from_json(const json& j, const std::string& where = "scene") {
  using namespace detail;
  try {
    only_keys(j, {"id", "seed", "command", "ego0", "agents", "obstacles", "drivable", "route", "expert"}, "");
    Scene s;
    if (!j["id"].is_number_integer()) throw SchemaError{"'id' must be an integer"};
    s.id = j["id"].get<std::int64_t>();
    if (!j["seed"].is_number_unsigned()) throw SchemaError{"'seed' must be a non-negative integer"};
    s.seed = j["seed"].get<std::uint64_t>();
    if (!j["command"].is_string()) throw SchemaError{"'command' must be a string"};
    try {
      s.command = command_from_string(j["command"].get<std::string>());
    } catch (const ValidationError& e) {
      throw SchemaError{e.what()};
    }
    const json& e = j["ego0"];
    only_keys(e, {"x", "y", "heading", "v", "a"}, "ego0.");
    s.ego0 = {number(e["x"], "ego0.x"), number(e["y"], "ego0.y"), number(e["heading"], "ego0.heading"),
              number(e["v"], "ego0.v"), number(e["a"], "ego0.a")};
    if (!j["agents"].is_array()) throw SchemaError{"'agents' must be an array"};
    for (std::size_t i = 0; i < j["agents"].size(); ++i) {
      const std::string w = "agents[" + std::to_string(i) + "].";
      const json& a = j["agents"][i];
      only_keys(a, {"center", "radius", "velocity"}, w);
      s.agents.push_back({vec(a["center"], w + "center"), positive(a["radius"], w + "radius"),
                          vec(a["velocity"], w + "velocity")});
    }
    if (!j["obstacles"].is_array()) throw SchemaError{"'obstacles' must be an array"};
    for (std::size_t i = 0; i < j["obstacles"].size(); ++i) {
      const std::string w = "obstacles[" + std::to_string(i) + "].";
      const json& o = j["obstacles"][i];
      only_keys(o, {"center", "radius"}, w);
      s.obstacles.push_back({vec(o["center"], w + "center"), positive(o["radius"], w + "radius")});
    }
    s.drivable = polyline(j["drivable"], "drivable");
    s.route = polyline(j["route"], "route");
    if (s.route.size() < 2) throw SchemaError{"'route' needs at least 2 points"};
    const auto expert = polyline(j["expert"], "expert");
    if (expert.size() != kWaypoints) throw SchemaError{"'expert' must have exactly 8 waypoints"};
    std::copy(expert.begin(), expert.end(), s.expert.begin());
    try {
      validate_polygon(s.drivable);
    } catch (const ValidationError& err) {
      throw SchemaError{err.what()};
    }
    return s;
  } catch (const SchemaError& err) {
    throw ValidationError(where + ": " + err.what);
  }
}

inline void write_scenes_jsonl(std::ostream& os, std::span<const Scene> scenes) {
  for (const auto& s : scenes) os << scene_to_json(s).dump() << '\n';
}

inline void write_scenes_jsonl(const std::string& path, std::span<const Scene> scenes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure(path + ": cannot open for writing");
  write_scenes_jsonl(os, scenes);
  if (!os) throw RuntimeFailure(path + ": write failed");
}

/// Reads a scene JSONL stream; blank lines are skipped, every other line must
/// be one scene. Errors name `source` and the 1-based line number.
inline std::vector<Scene> read_scenes_jsonl(std::istream& is, const std::string& source) {
  std::vector<Scene> out;
  std::string line;
  long line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError(where + ": malformed JSON (" + e.what() + ")");
    }
    out.push_back(scene_from_json(j, where));
  }
  return out;
}

inline std::vector<Scene> read_scenes_jsonl(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError(path + ": cannot open scene file");
  return read_scenes_jsonl(is, path);
}

}  // namespace dflow::sim
