#pragma once

// Text and image encodings used by the harness: CSV tables (LF endings,
// %.17g numbers), image grids as CSV and PGM, and registration summaries.

#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "geolab/errors.hpp"
#include "geolab/lddmm.hpp"

namespace geolab::io {

using nlohmann::json;

/// Round-trip decimal form of a double ('.' separator regardless of locale).
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s(buf);
  for (char& c : s)
    if (c == ',') c = '.';
  return s;
}

/// One CSV field, quoted when it holds a delimiter, quote or line break.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  class Row {
   public:
    Row& operator<<(const std::string& s) { return add(s); }
    Row& operator<<(const char* s) { return add(s); }
    Row& operator<<(double v) { return add(format_double(v)); }
    Row& operator<<(int v) { return add(std::to_string(v)); }
    Row& operator<<(std::uint64_t v) { return add(std::to_string(v)); }
    Row& operator<<(bool v) { return add(v ? "true" : "false"); }

   private:
    friend class CsvTable;
    explicit Row(std::vector<std::string>& cells) : cells_(cells) {}
    Row& add(const std::string& s) {
      cells_.push_back(s);
      return *this;
    }
    std::vector<std::string>& cells_;
  };

  Row row() {
    rows_.emplace_back();
    return Row(rows_.back());
  }

  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      if (cells.size() != header_.size()) throw DomainError("CsvTable: row width does not match the header");
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += csv_field(cells[i]);
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// ---------------------------------------------------------------------------
// Image grids

/// Header line "rows,cols,spacing", the three values, then one line per
/// grid row.
inline std::string image_to_csv(const lddmm::Image& image) {
  const lddmm::Grid& g = image.grid;
  if (g.dims == 2 && g.spacing[0] != g.spacing[1])
    throw DomainError("image_to_csv: anisotropic grids have no single spacing");
  std::string out = "rows,cols,spacing\n";
  out += std::to_string(g.size[1]) + "," + std::to_string(g.size[0]) + "," + format_double(g.spacing[0]) + "\n";
  for (int iy = 0; iy < g.size[1]; ++iy) {
    for (int ix = 0; ix < g.size[0]; ++ix) {
      if (ix) out += ',';
      out += format_double(image.values(g.index(ix, iy)));
    }
    out += '\n';
  }
  return out;
}

inline lddmm::Image image_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(in, line)) throw ConfigError(std::string("image CSV: missing ") + what);
    if (!line.empty() && line.back() == '\r') line.pop_back();
  };
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(s);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    return cells;
  };
  auto number = [](const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("image CSV: not a number: '" + s + "'");
    }
  };
  next_line("header");
  if (line != "rows,cols,spacing") throw ConfigError("image CSV: header must be 'rows,cols,spacing'");
  next_line("dimensions");
  const auto dims = split(line);
  if (dims.size() != 3) throw ConfigError("image CSV: dimension line needs rows, cols and spacing");
  const double rows_d = number(dims[0]), cols_d = number(dims[1]), h = number(dims[2]);
  const int rows = static_cast<int>(rows_d), cols = static_cast<int>(cols_d);
  if (rows != rows_d || cols != cols_d || rows < 1) throw ConfigError("image CSV: rows and cols must be positive integers");
  lddmm::Grid g;
  try {
    g = rows == 1 ? lddmm::Grid(cols, h) : lddmm::Grid(cols, rows, h, h);
  } catch (const DomainError& e) {
    throw ConfigError(std::string("image CSV: ") + e.what());
  }
  Vector v(g.nodes());
  for (int iy = 0; iy < rows; ++iy) {
    next_line("grid row");
    const auto cells = split(line);
    if (static_cast<int>(cells.size()) != cols)
      throw ConfigError("image CSV: row " + std::to_string(iy) + " has " + std::to_string(cells.size()) + " values, expected " +
                        std::to_string(cols));
    for (int ix = 0; ix < cols; ++ix) v(g.index(ix, iy)) = number(cells[static_cast<std::size_t>(ix)]);
  }
  return lddmm::Image(g, v);
}

/// Binary greymap with intensities scaled from [min, max] to [0, 255].
inline std::string image_to_pgm(const lddmm::Image& image) {
  const lddmm::Grid& g = image.grid;
  const double lo = image.values.minCoeff(), hi = image.values.maxCoeff();
  std::string out = "P5\n" + std::to_string(g.size[0]) + " " + std::to_string(g.size[1]) + "\n255\n";
  for (int n = 0; n < g.nodes(); ++n) {
    const double s = hi > lo ? (image.values(n) - lo) / (hi - lo) : 0.0;
    out += static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * s)));
  }
  return out;
}

inline json registration_json(const lddmm::Registration& r) {
  return json{{"energy_trace", r.energy_trace},
              {"total_energy", r.final_energy.total},
              {"kinetic_energy", r.final_energy.kinetic},
              {"matching_energy", r.final_energy.matching},
              {"path_length", r.path_length},
              {"iterations", r.iterations},
              {"converged", r.converged},
              {"diffeomorphic", r.diffeomorphic},
              {"min_jacobian", r.min_jacobian},
              {"ep_residual", r.ep_residual},
              {"pointwise_ep_residual", r.pointwise_ep_residual},
              {"gradient_residual", r.gradient_residual}};
}

}  // namespace geolab::io
