#pragma once

#include "dakit/core.hpp"

#include <iosfwd>
#include <string>

namespace dakit::io {

// Shortest decimal text that round-trips the double exactly.
std::string format_real(double x);

// `j,x0,...,x{d-1}` with j = 0..J.
void write_trajectory_csv(std::ostream& os, const Trajectory& t);
// `j,y0,...,y{k-1}` with j = 1..J.
void write_observations_csv(std::ostream& os, const ObservationSeries& y);
Trajectory read_trajectory_csv(std::istream& is);
ObservationSeries read_observations_csv(std::istream& is);

// Generic numeric CSV: optional header line, one row per sample.
Matrix read_matrix_csv(std::istream& is, bool has_header);
void write_matrix_csv(std::ostream& os, const Matrix& m, const std::string& header);

std::string gaussian_to_json(const Gaussian& g);
Gaussian gaussian_from_json(const std::string& text);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

}  // namespace dakit::io
