#pragma once

// Task files: JSON with the keys targets[], obstacles[], tau and weights{}.
// Parsing is strict; unknown keys are rejected.
//
//   {
//     "targets":   [{"joint": "pelvis", "frame": 50, "x": 1.2, "axes": "x"}],
//     "obstacles": [{"frame": 0, "circles": [{"x": 1.0, "y": 0.0, "radius": 0.3}]}],
//     "tau": 0.1,
//     "weights":   {"obs": 1.0, "cont": 0.01, "decorr": 1000}
//   }

#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "dno/io.hpp"
#include "dno/objectives.hpp"

namespace dno {

class TaskError : public std::runtime_error {
 public:
  enum class Code { Malformed, UnknownKey, OutOfRange, Duplicate };
  TaskError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

struct Task {
  ObservedSet observed;
  SdfScene scene;
  LossWeights weights;
};

namespace detail {

inline void only_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw TaskError(TaskError::Code::Malformed, where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw TaskError(TaskError::Code::UnknownKey, where + ": unknown key \"" + key + "\"");
  }
}

inline Joint parse_joint(const std::string& s, const std::string& where) {
  for (Joint j : kJoints)
    if (s == joint_name(j)) return j;
  throw TaskError(TaskError::Code::Malformed, where + ": unknown joint \"" + s + "\"");
}

inline AxisMask parse_axes(const nlohmann::json& j, const std::string& where) {
  const auto s = j.get<std::string>();
  if (s == "x") return {true, false};
  if (s == "y") return {false, true};
  if (s == "xy") return {true, true};
  throw TaskError(TaskError::Code::Malformed, where + ": axes must be \"x\", \"y\" or \"xy\"");
}

}  // namespace detail

/// Parses task text. When `frames` is given, keyframes must lie in [0, frames).
inline Task parse_task(const std::string& text, std::optional<std::size_t> frames = std::nullopt,
                       const std::string& what = "task") {
  using Code = TaskError::Code;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw TaskError(Code::Malformed, what + ": " + e.what());
  }
  Task task;
  try {
    detail::only_keys(j, {"targets", "obstacles", "tau", "weights"}, what);
    if (j.contains("targets")) {
      std::size_t i = 0;
      for (const auto& t : j.at("targets")) {
        const std::string where = what + ": targets[" + std::to_string(i++) + "]";
        detail::only_keys(t, {"joint", "frame", "x", "y", "axes"}, where);
        Observation o;
        o.joint = detail::parse_joint(t.at("joint").get<std::string>(), where);
        const auto frame = t.at("frame").get<long long>();
        if (frame < 0 || (frames && static_cast<std::size_t>(frame) >= *frames))
          throw TaskError(Code::OutOfRange, where + ": frame " + std::to_string(frame) + " out of range");
        o.frame = static_cast<std::size_t>(frame);
        o.axes = t.contains("axes") ? detail::parse_axes(t.at("axes"), where) : AxisMask{};
        if (o.axes.x) o.target.x = t.at("x").get<double>();
        if (o.axes.y) o.target.y = t.at("y").get<double>();
        try {
          task.observed.add(o);
        } catch (const std::invalid_argument& e) {
          throw TaskError(Code::Duplicate, where + ": " + e.what());
        }
      }
    }
    if (j.contains("obstacles")) {
      std::size_t i = 0;
      for (const auto& g : j.at("obstacles")) {
        const std::string where = what + ": obstacles[" + std::to_string(i++) + "]";
        detail::only_keys(g, {"frame", "circles"}, where);
        const auto frame = g.contains("frame") ? g.at("frame").get<long long>() : 0;
        if (frame < 0 || (frames && static_cast<std::size_t>(frame) >= *frames))
          throw TaskError(Code::OutOfRange, where + ": frame " + std::to_string(frame) + " out of range");
        if (task.scene.keyframes.count(static_cast<std::size_t>(frame)))
          throw TaskError(Code::Duplicate, where + ": duplicate obstacle keyframe " + std::to_string(frame));
        auto& list = task.scene.keyframes[static_cast<std::size_t>(frame)];
        for (const auto& c : g.at("circles")) {
          detail::only_keys(c, {"x", "y", "radius"}, where);
          list.push_back({{c.at("x").get<double>(), c.at("y").get<double>()}, c.at("radius").get<double>()});
        }
      }
    }
    if (j.contains("tau")) task.scene.tau = j.at("tau").get<double>();
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      detail::only_keys(w, {"obs", "cont", "decorr"}, what + ": weights");
      if (w.contains("obs")) task.weights.obs = w.at("obs").get<double>();
      if (w.contains("cont")) task.weights.cont = w.at("cont").get<double>();
      if (w.contains("decorr")) task.weights.decorr = w.at("decorr").get<double>();
      if (task.weights.obs < 0 || task.weights.cont < 0 || task.weights.decorr < 0)
        throw TaskError(Code::OutOfRange, what + ": weights must be non-negative");
    }
  } catch (const nlohmann::json::exception& e) {
    throw TaskError(Code::Malformed, what + ": " + e.what());
  }
  try {
    task.scene.validate();
  } catch (const std::invalid_argument& e) {
    throw TaskError(Code::OutOfRange, what + ": " + e.what());
  }
  return task;
}

inline Task load_task(const std::filesystem::path& path, std::optional<std::size_t> frames = std::nullopt) {
  const auto bytes = io::read_file(path);
  return parse_task(std::string(bytes.begin(), bytes.end()), frames, path.string());
}

inline nlohmann::json task_to_json(const Task& t) {
  nlohmann::json j;
  auto& targets = j["targets"] = nlohmann::json::array();
  for (const auto& o : t.observed.entries()) {
    nlohmann::json e{{"joint", joint_name(o.joint)}, {"frame", o.frame}};
    e["axes"] = o.axes.x && o.axes.y ? "xy" : o.axes.x ? "x" : "y";
    if (o.axes.x) e["x"] = o.target.x;
    if (o.axes.y) e["y"] = o.target.y;
    targets.push_back(e);
  }
  auto& obstacles = j["obstacles"] = nlohmann::json::array();
  for (const auto& [k, circles] : t.scene.keyframes) {
    nlohmann::json g{{"frame", k}, {"circles", nlohmann::json::array()}};
    for (const auto& c : circles) g["circles"].push_back({{"x", c.center.x}, {"y", c.center.y}, {"radius", c.radius}});
    obstacles.push_back(g);
  }
  j["tau"] = t.scene.tau;
  j["weights"] = {{"obs", t.weights.obs}, {"cont", t.weights.cont}, {"decorr", t.weights.decorr}};
  return j;
}

}  // namespace dno
