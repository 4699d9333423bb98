#pragma once

// Plain-text matrix files: a header line "rows cols min max", then one line
// per row of space-separated values, all printed with %.9g.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "xagent/numerics.hpp"

namespace xagent::cli {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string format_g9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string heatmap_text(const Matrix& w) {
  if (w.rows() == 0 || w.cols() == 0) throw ShapeError("emit_heatmap: empty matrix");
  require_finite(w, "emit_heatmap");
  double lo = w.data()[0], hi = w.data()[0];
  for (double v : w.data()) lo = std::min(lo, v), hi = std::max(hi, v);
  std::string out = std::to_string(w.rows()) + " " + std::to_string(w.cols()) + " " +
                    format_g9(lo) + " " + format_g9(hi) + "\n";
  for (Index i = 0; i < w.rows(); ++i) {
    for (Index j = 0; j < w.cols(); ++j) {
      if (j != 0) out += ' ';
      out += format_g9(w(i, j));
    }
    out += '\n';
  }
  return out;
}

inline void emit_heatmap(const Matrix& w, const std::string& path) {
  const std::string text = heatmap_text(w);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("emit_heatmap: cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw IoError("emit_heatmap: write to '" + path + "' failed");
}

inline Matrix read_heatmap(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("read_heatmap: cannot open '" + path + "'");
  Index rows = 0, cols = 0;
  double lo = 0, hi = 0;
  if (!(f >> rows >> cols >> lo >> hi)) throw IoError("read_heatmap: bad header in '" + path + "'");
  Matrix w(rows, cols);
  for (double& v : w.data())
    if (!(f >> v)) throw IoError("read_heatmap: truncated data in '" + path + "'");
  return w;
}

}  // namespace xagent::cli
