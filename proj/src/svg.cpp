#include "cnwf/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "cnwf/errors.hpp"

namespace cnwf {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(2);
  os << std::fixed << v;
  return os.str();
}

/// Five-stop sequential ramp (dark blue -> teal -> green -> yellow).
std::string ramp(double t) {
  static const double stops[5][3] = {{68, 1, 84},
                                     {59, 82, 139},
                                     {33, 145, 140},
                                     {94, 201, 98},
                                     {253, 231, 37}};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(t));
  const double f = t - i;
  std::ostringstream os;
  os << "rgb(" << static_cast<int>(stops[i][0] + f * (stops[i + 1][0] - stops[i][0]))
     << ',' << static_cast<int>(stops[i][1] + f * (stops[i + 1][1] - stops[i][1]))
     << ',' << static_cast<int>(stops[i][2] + f * (stops[i + 1][2] - stops[i][2]))
     << ')';
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write file: " + path);
  out << content;
}

}  // namespace

SvgCanvas::SvgCanvas(double xmin, double ymin, double xmax, double ymax,
                     int width_px)
    : xmin_(xmin), ymin_(ymin), xmax_(xmax), ymax_(ymax), w_(width_px) {
  if (!(xmax > xmin && ymax > ymin))
    throw ValidationError("SvgCanvas: empty extent");
  scale_ = w_ / (xmax_ - xmin_);
  h_ = static_cast<int>(std::lround((ymax_ - ymin_) * scale_));
}

double SvgCanvas::px(double x) const { return (x - xmin_) * scale_; }
double SvgCanvas::py(double y) const { return (ymax_ - y) * scale_; }

void SvgCanvas::fill_field(const TriMesh& mesh, const Vec& nodal) {
  if (nodal.size() != mesh.n_vertices())
    throw ValidationError("fill_field: value size does not match the mesh");
  const double lo = nodal.minCoeff();
  const double hi = nodal.maxCoeff();
  const double span = hi - lo > 0 ? hi - lo : 1.0;
  std::ostringstream os;
  for (int t = 0; t < mesh.n_triangles(); ++t) {
    const int a = mesh.triangles(t, 0), b = mesh.triangles(t, 1),
              c = mesh.triangles(t, 2);
    const double v = (nodal[a] + nodal[b] + nodal[c]) / 3.0;
    os << "<polygon points=\"" << fmt(px(mesh.vertices(a, 0))) << ','
       << fmt(py(mesh.vertices(a, 1))) << ' ' << fmt(px(mesh.vertices(b, 0)))
       << ',' << fmt(py(mesh.vertices(b, 1))) << ' '
       << fmt(px(mesh.vertices(c, 0))) << ',' << fmt(py(mesh.vertices(c, 1)))
       << "\" fill=\"" << ramp((v - lo) / span) << "\" stroke=\"none\"/>\n";
  }
  body_ += os.str();
}

void SvgCanvas::mesh_edges(const TriMesh& mesh, const std::string& color,
                           double width) {
  std::ostringstream os;
  os << "<path d=\"";
  for (int e = 0; e < mesh.n_edges(); ++e) {
    const int a = mesh.edges(e, 0), b = mesh.edges(e, 1);
    os << 'M' << fmt(px(mesh.vertices(a, 0))) << ' '
       << fmt(py(mesh.vertices(a, 1))) << 'L' << fmt(px(mesh.vertices(b, 0)))
       << ' ' << fmt(py(mesh.vertices(b, 1)));
  }
  os << "\" stroke=\"" << color << "\" stroke-width=\"" << width
     << "\" fill=\"none\"/>\n";
  body_ += os.str();
}

void SvgCanvas::polyline(const Mat& points, const std::string& color,
                         double width) {
  if (points.rows() == 0) return;
  std::ostringstream os;
  os << "<polyline points=\"";
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    os << fmt(px(points(i, 0))) << ',' << fmt(py(points(i, 1))) << ' ';
  os << "\" stroke=\"" << color << "\" stroke-width=\"" << width
     << "\" fill=\"none\"/>\n";
  body_ += os.str();
}

void SvgCanvas::marker(double x, double y, double radius,
                       const std::string& color) {
  std::ostringstream os;
  os << "<circle cx=\"" << fmt(px(x)) << "\" cy=\"" << fmt(py(y)) << "\" r=\""
     << radius << "\" fill=\"" << color << "\"/>\n";
  body_ += os.str();
}

void SvgCanvas::text(double x, double y, const std::string& s, int font_px) {
  std::ostringstream os;
  os << "<text x=\"" << fmt(px(x)) << "\" y=\"" << fmt(py(y))
     << "\" font-size=\"" << font_px
     << "\" font-family=\"sans-serif\" fill=\"#222\">" << s << "</text>\n";
  body_ += os.str();
}

void SvgCanvas::save(const std::string& path) const {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_
     << "\" height=\"" << h_ << "\" viewBox=\"0 0 " << w_ << ' ' << h_
     << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << body_ << "</svg>\n";
  write_file(path, os.str());
}

CurvePlot::CurvePlot(std::string title, std::string xlabel, std::string ylabel,
                     bool log_y)
    : title_(std::move(title)),
      xlabel_(std::move(xlabel)),
      ylabel_(std::move(ylabel)),
      log_y_(log_y) {}

void CurvePlot::add(const std::vector<double>& x, const std::vector<double>& y,
                    const std::string& color, const std::string& label) {
  if (x.size() != y.size())
    throw ValidationError("CurvePlot: series lengths differ");
  series_.push_back({x, y, color, label});
}

void CurvePlot::save(const std::string& path) const {
  const int W = 760, H = 480, ML = 80, MR = 20, MT = 40, MB = 60;
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo;
  double ylo = xlo, yhi = -xlo;
  for (const Series& s : series_)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      double yv = s.y[i];
      if (log_y_) {
        if (yv <= 0) continue;
        yv = std::log10(yv);
      }
      xlo = std::min(xlo, s.x[i]);
      xhi = std::max(xhi, s.x[i]);
      ylo = std::min(ylo, yv);
      yhi = std::max(yhi, yv);
    }
  if (!(xhi > xlo)) xhi = xlo + 1;
  if (!(yhi > ylo)) yhi = ylo + 1;
  const double sx = (W - ML - MR) / (xhi - xlo);
  const double sy = (H - MT - MB) / (yhi - ylo);
  auto PX = [&](double x) { return ML + (x - xlo) * sx; };
  auto PY = [&](double y) { return H - MB - (y - ylo) * sy; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
     << "\" height=\"" << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
        "font-size=\"17\" font-family=\"sans-serif\">" << title_ << "</text>\n"
     << "<text x=\"" << W / 2 << "\" y=\"" << H - 14
     << "\" text-anchor=\"middle\" font-size=\"14\" "
        "font-family=\"sans-serif\">" << xlabel_ << "</text>\n"
     << "<text x=\"18\" y=\"" << H / 2
     << "\" text-anchor=\"middle\" font-size=\"14\" font-family=\"sans-serif\""
        " transform=\"rotate(-90 18 " << H / 2 << ")\">" << ylabel_
     << "</text>\n";
  // axes and ticks
  os << "<rect x=\"" << ML << "\" y=\"" << MT << "\" width=\"" << W - ML - MR
     << "\" height=\"" << H - MT - MB
     << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double tx = xlo + (xhi - xlo) * i / 4.0;
    const double ty = ylo + (yhi - ylo) * i / 4.0;
    std::ostringstream lx, ly;
    lx.precision(3);
    ly.precision(3);
    lx << tx;
    if (log_y_)
      ly << "1e" << (std::abs(ty - std::round(ty)) < 0.05
                         ? std::to_string(static_cast<int>(std::round(ty)))
                         : fmt(ty));
    else
      ly << ty;
    os << "<text x=\"" << PX(tx) << "\" y=\"" << H - MB + 18
       << "\" text-anchor=\"middle\" font-size=\"12\" "
          "font-family=\"sans-serif\">" << lx.str() << "</text>\n"
       << "<text x=\"" << ML - 8 << "\" y=\"" << PY(ty) + 4
       << "\" text-anchor=\"end\" font-size=\"12\" "
          "font-family=\"sans-serif\">" << ly.str() << "</text>\n"
       << "<line x1=\"" << ML << "\" x2=\"" << W - MR << "\" y1=\"" << PY(ty)
       << "\" y2=\"" << PY(ty)
       << "\" stroke=\"#ddd\" stroke-width=\"0.6\"/>\n";
  }
  int li = 0;
  for (const Series& s : series_) {
    os << "<polyline points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      double yv = s.y[i];
      if (log_y_) {
        if (yv <= 0) continue;
        yv = std::log10(yv);
      }
      os << PX(s.x[i]) << ',' << PY(yv) << ' ';
    }
    os << "\" stroke=\"" << s.color
       << "\" stroke-width=\"1.6\" fill=\"none\"/>\n";
    if (!s.label.empty()) {
      const int yy = MT + 18 + 18 * li++;
      os << "<line x1=\"" << W - MR - 150 << "\" x2=\"" << W - MR - 122
         << "\" y1=\"" << yy - 4 << "\" y2=\"" << yy - 4 << "\" stroke=\""
         << s.color << "\" stroke-width=\"2\"/>\n"
         << "<text x=\"" << W - MR - 116 << "\" y=\"" << yy
         << "\" font-size=\"12\" font-family=\"sans-serif\">" << s.label
         << "</text>\n";
    }
  }
  os << "</svg>\n";
  write_file(path, os.str());
}

}  // namespace cnwf
