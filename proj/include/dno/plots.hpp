#pragma once

// CSV and SVG renderings of a motion in the side-view plane.

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>

#include "dno/io.hpp"
#include "dno/motion.hpp"
#include "dno/objectives.hpp"

namespace dno {

/// Header plus one row per frame: frame, six features, action label.
inline std::string motion_csv(const Motion& m) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "frame,pelvis_x,pelvis_y,left_foot_x,left_foot_y,right_foot_x,right_foot_y,label\n";
  const auto labels = label_frames(m);
  for (std::size_t k = 0; k < m.frames; ++k) {
    os << k;
    for (std::size_t d = 0; d < kFeatures; ++d) os << ',' << m.at(d, k);
    os << ',' << (labels[k] == Action::Jump ? "jump" : "ground") << '\n';
  }
  return os.str();
}

/// Ground line, one polyline per joint, one circle per obstacle per scene
/// keyframe, and a cross for every target.
inline std::string motion_svg(const Motion& m, const SdfScene* scene = nullptr, const ObservedSet* targets = nullptr) {
  double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo, y_hi = 1.0;
  auto extend = [&](double x, double y) {
    x_lo = std::min(x_lo, x);
    x_hi = std::max(x_hi, x);
    y_hi = std::max(y_hi, y);
  };
  for (std::size_t k = 0; k < m.frames; ++k)
    for (Joint j : kJoints) extend(m.joint(j, k).x, m.joint(j, k).y);
  if (scene)
    for (const auto& [k, circles] : scene->keyframes)
      for (const auto& c : circles) {
        extend(c.center.x - c.radius, c.center.y + c.radius);
        extend(c.center.x + c.radius, c.center.y);
      }
  if (targets)
    for (const auto& o : targets->entries()) extend(o.target.x, o.target.y);
  x_lo -= 0.2;
  x_hi += 0.2;
  y_hi += 0.2;
  constexpr double px_per_m = 200.0, margin = 20.0;
  const double width = (x_hi - x_lo) * px_per_m + 2 * margin;
  const double height = (y_hi + 0.2) * px_per_m + 2 * margin;
  auto sx = [&](double x) { return margin + (x - x_lo) * px_per_m; };
  auto sy = [&](double y) { return margin + (y_hi - y) * px_per_m; };

  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  os << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "  <line x1=\"0\" y1=\"" << sy(0.0) << "\" x2=\"" << width << "\" y2=\"" << sy(0.0)
     << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  if (scene) {
    os << "  <g id=\"obstacles\">\n";
    for (const auto& [k, circles] : scene->keyframes) {
      os << "    <g data-keyframe=\"" << k << "\">\n";
      for (const auto& c : circles)
        os << "      <circle cx=\"" << sx(c.center.x) << "\" cy=\"" << sy(c.center.y) << "\" r=\"" << c.radius * px_per_m
           << "\" fill=\"gray\" fill-opacity=\"0.3\" stroke=\"gray\"/>\n";
      os << "    </g>\n";
    }
    os << "  </g>\n";
  }
  const char* colors[] = {"black", "royalblue", "firebrick"};
  for (Joint j : kJoints) {
    os << "  <polyline id=\"" << joint_name(j) << "\" fill=\"none\" stroke=\"" << colors[static_cast<int>(j)]
       << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < m.frames; ++k) os << (k ? " " : "") << sx(m.joint(j, k).x) << ',' << sy(m.joint(j, k).y);
    os << "\"/>\n";
  }
  if (targets) {
    os << "  <g id=\"targets\" stroke=\"darkorange\" stroke-width=\"2\">\n";
    for (const auto& o : targets->entries()) {
      const double cx = sx(o.target.x), cy = o.axes.y ? sy(o.target.y) : sy(0.0);
      os << "    <path d=\"M " << cx - 5 << ' ' << cy - 5 << " L " << cx + 5 << ' ' << cy + 5 << " M " << cx - 5 << ' '
         << cy + 5 << " L " << cx + 5 << ' ' << cy - 5 << "\"/>\n";
    }
    os << "  </g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Writes <stem>.csv and <stem>.svg.
inline void export_plots(const Motion& m, const std::filesystem::path& stem, const SdfScene* scene = nullptr,
                         const ObservedSet* targets = nullptr) {
  auto csv = stem;
  csv += ".csv";
  auto svg = stem;
  svg += ".svg";
  io::write_text_atomic(csv, motion_csv(m));
  io::write_text_atomic(svg, motion_svg(m, scene, targets));
}

}  // namespace dno
