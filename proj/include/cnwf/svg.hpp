/// @file svg.hpp
/// @brief Minimal dependency-free SVG emission: nodal-field fills over a
///        triangulation, polylines/markers in domain coordinates, and simple
///        annotated line charts for scalar series.
#pragma once

#include <string>
#include <vector>

#include "cnwf/mesh.hpp"
#include "cnwf/types.hpp"

namespace cnwf {

/// Domain-coordinate canvas: y is flipped so the domain renders upright.
class SvgCanvas {
 public:
  SvgCanvas(double xmin, double ymin, double xmax, double ymax,
            int width_px = 720);

  /// Per-triangle fill from the mean of the nodal values (sequential ramp,
  /// normalized to the field's range).
  void fill_field(const TriMesh& mesh, const Vec& nodal);
  void mesh_edges(const TriMesh& mesh, const std::string& color,
                  double width = 0.5);
  void polyline(const Mat& points, const std::string& color, double width);
  void marker(double x, double y, double radius, const std::string& color);
  void text(double x, double y, const std::string& s, int font_px = 14);
  void save(const std::string& path) const;

 private:
  double px(double x) const;
  double py(double y) const;
  double xmin_, ymin_, xmax_, ymax_;
  int w_, h_;
  double scale_;
  std::string body_;
};

/// Line chart with linear or log-10 y axis, ticks, and a legend.
class CurvePlot {
 public:
  CurvePlot(std::string title, std::string xlabel, std::string ylabel,
            bool log_y = false);
  void add(const std::vector<double>& x, const std::vector<double>& y,
           const std::string& color, const std::string& label);
  void save(const std::string& path) const;

 private:
  struct Series {
    std::vector<double> x, y;
    std::string color, label;
  };
  std::string title_, xlabel_, ylabel_;
  bool log_y_;
  std::vector<Series> series_;
};

}  // namespace cnwf
