#include "dakit/io.hpp"

#include "dakit/error.hpp"

#include <json.hpp>

#include <charconv>
#include <fstream>
#include <sstream>
#include <vector>

namespace dakit::io {

std::string format_real(double x) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

namespace {

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_real(const std::string& s, std::size_t line_no) {
    std::size_t b = s.find_first_not_of(" \t\r");
    std::size_t e = s.find_last_not_of(" \t\r");
    if (b == std::string::npos) fail(ErrorKind::parse, "CSV line " + std::to_string(line_no) + ": empty cell");
    const std::string t = s.substr(b, e - b + 1);
    double v = 0.0;
    const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size())
        fail(ErrorKind::parse, "CSV line " + std::to_string(line_no) + ": not a number '" + t + "'");
    return v;
}

void write_indexed(std::ostream& os, const Matrix& rows, char prefix, Eigen::Index first_index) {
    os << 'j';
    for (Eigen::Index c = 0; c < rows.cols(); ++c) os << ',' << prefix << c;
    os << '\n';
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
        os << (first_index + r);
        for (Eigen::Index c = 0; c < rows.cols(); ++c) os << ',' << format_real(rows(r, c));
        os << '\n';
    }
}

Matrix read_indexed(std::istream& is, char prefix, Eigen::Index first_index) {
    std::string line;
    require(static_cast<bool>(std::getline(is, line)), ErrorKind::parse, "CSV: missing header");
    const auto header = split(line);
    require(header.size() >= 2 && header[0] == "j", ErrorKind::parse, "CSV: header must start with 'j'");
    for (std::size_t c = 1; c < header.size(); ++c) {
        std::string want = std::string(1, prefix) + std::to_string(c - 1);
        std::string got = header[c];
        if (!got.empty() && got.back() == '\r') got.pop_back();
        require(got == want, ErrorKind::parse, "CSV: unexpected column '" + got + "', wanted '" + want + "'");
    }
    const Matrix body = read_matrix_csv(is, false);
    require(body.cols() == static_cast<Eigen::Index>(header.size()) || body.rows() == 0, ErrorKind::parse,
            "CSV: row width does not match header");
    for (Eigen::Index r = 0; r < body.rows(); ++r)
        require(body(r, 0) == static_cast<double>(first_index + r), ErrorKind::parse,
                "CSV: index column is not consecutive");
    if (body.rows() == 0) return Matrix(0, static_cast<Eigen::Index>(header.size()) - 1);
    return body.rightCols(body.cols() - 1);
}

}  // namespace

Matrix read_matrix_csv(std::istream& is, bool has_header) {
    std::string line;
    std::size_t line_no = 0;
    if (has_header) {
        std::getline(is, line);
        ++line_no;
    }
    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::vector<double> row;
        for (const auto& cell : split(line)) row.push_back(parse_real(cell, line_no));
        if (!rows.empty())
            require(row.size() == rows.front().size(), ErrorKind::parse,
                    "CSV line " + std::to_string(line_no) + ": ragged row");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) return Matrix(0, 0);
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    return m;
}

void write_matrix_csv(std::ostream& os, const Matrix& m, const std::string& header) {
    if (!header.empty()) os << header << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) os << (c ? "," : "") << format_real(m(r, c));
        os << '\n';
    }
}

void write_trajectory_csv(std::ostream& os, const Trajectory& t) { write_indexed(os, t.states, 'x', 0); }

void write_observations_csv(std::ostream& os, const ObservationSeries& y) { write_indexed(os, y.obs, 'y', 1); }

Trajectory read_trajectory_csv(std::istream& is) { return Trajectory{read_indexed(is, 'x', 0)}; }

ObservationSeries read_observations_csv(std::istream& is) { return ObservationSeries{read_indexed(is, 'y', 1)}; }

std::string gaussian_to_json(const Gaussian& g) {
    nlohmann::json j;
    j["mean"] = std::vector<double>(g.mean.data(), g.mean.data() + g.mean.size());
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < g.cov.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(g.cov.cols()));
        for (Eigen::Index c = 0; c < g.cov.cols(); ++c) row[static_cast<std::size_t>(c)] = g.cov(r, c);
        rows.push_back(row);
    }
    j["cov"] = rows;
    return j.dump();
}

Gaussian gaussian_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, std::string("Gaussian JSON: ") + e.what());
    }
    require(j.is_object() && j.contains("mean") && j.contains("cov"), ErrorKind::parse,
            "Gaussian JSON needs 'mean' and 'cov'");
    try {
        const auto mean = j.at("mean").get<std::vector<double>>();
        const auto cov = j.at("cov").get<std::vector<std::vector<double>>>();
        Gaussian g;
        g.mean = Eigen::Map<const Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
        g.cov.resize(static_cast<Eigen::Index>(cov.size()), static_cast<Eigen::Index>(mean.size()));
        for (std::size_t r = 0; r < cov.size(); ++r) {
            require(cov[r].size() == mean.size(), ErrorKind::parse, "Gaussian JSON: covariance row length");
            for (std::size_t c = 0; c < cov[r].size(); ++c)
                g.cov(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = cov[r][c];
        }
        g.validate("Gaussian JSON");
        return g;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, std::string("Gaussian JSON: ") + e.what());
    }
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot open '" + path + "' for writing");
    out << contents;
    require(static_cast<bool>(out), ErrorKind::io, "write to '" + path + "' failed");
}

}  // namespace dakit::io
