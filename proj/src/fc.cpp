#include "lcm/fc.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <vector>

#include "lcm/errors.hpp"

namespace lcm {

namespace {

std::vector<double> split_numbers(const std::string& line, const std::string& path) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= line.size()) {
        std::size_t next = line.find(',', pos);
        if (next == std::string::npos) next = line.size();
        const std::string field = line.substr(pos, next - pos);
        const char* begin = field.c_str();
        char* end = nullptr;
        const double v = std::strtod(begin, &end);
        if (end == begin) {
            throw IoError(path + ": not a number: '" + field + "'");
        }
        out.push_back(v);
        pos = next + 1;
        if (next == line.size()) break;
    }
    return out;
}

std::string format_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

}  // namespace

Tensor compute_fc(const Tensor& bold) {
    if (bold.rank() != 2) {
        throw ShapeError("compute_fc: scan must be regions x timepoints, got " +
                         shape_string(bold.shape()));
    }
    const std::size_t n = bold.rows(), t = bold.cols();
    if (t < 3) {
        throw ValidationError("compute_fc: " + std::to_string(t) +
                              " timepoints, correlation needs at least 3");
    }

    std::vector<double> mean(n, 0.0), ssd(n, 0.0);
    std::vector<double> centered(n * t);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < t; ++k) acc += bold.at(i, k);
        mean[i] = acc / static_cast<double>(t);
        double sq = 0.0;
        for (std::size_t k = 0; k < t; ++k) {
            const double c = bold.at(i, k) - mean[i];
            centered[i * t + k] = c;
            sq += c * c;
        }
        ssd[i] = sq;
        if (sq == 0.0) {
            throw DegenerateSignal("compute_fc: region " + std::to_string(i) +
                                   " has zero variance");
        }
    }

    Tensor fc = Tensor::zeros({n, n});
    auto out = fc.raw_data();
    for (std::size_t i = 0; i < n; ++i) {
        out[i * n + i] = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < t; ++k) {
                dot += centered[i * t + k] * centered[j * t + k];
            }
            const double r = dot / std::sqrt(ssd[i] * ssd[j]);
            out[i * n + j] = r;
            out[j * n + i] = r;
        }
    }
    return fc;
}

void validate_fc(const Tensor& fc) {
    if (fc.rank() != 2 || fc.rows() != fc.cols()) {
        throw ValidationError("fc: expected a square matrix, got " + shape_string(fc.shape()));
    }
    const std::size_t n = fc.rows();
    for (std::size_t i = 0; i < n; ++i) {
        if (fc.at(i, i) != 1.0) {
            throw ValidationError("fc: diagonal entry " + std::to_string(i) + " is " +
                                  format_value(fc.at(i, i)) + ", expected 1");
        }
        for (std::size_t j = 0; j < n; ++j) {
            const double v = fc.at(i, j);
            if (std::abs(v) > 1.0 + 1e-12) {
                throw ValidationError("fc: entry (" + std::to_string(i) + "," + std::to_string(j) +
                                      ") = " + format_value(v) + " outside [-1, 1]");
            }
            if (std::abs(v - fc.at(j, i)) > 1e-12) {
                throw ValidationError("fc: asymmetric at (" + std::to_string(i) + "," +
                                      std::to_string(j) + ")");
            }
        }
    }
}

Tensor read_scan_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open scan file: " + path);
    }
    std::string header;
    if (!std::getline(in, header)) {
        throw IoError(path + ": empty file");
    }
    header = strip_cr(header);

    std::vector<std::string> cols;
    std::stringstream hs(header);
    std::string col;
    while (std::getline(hs, col, ',')) cols.push_back(col);
    if (cols.size() < 2 || cols[0] != "t") {
        throw IoError(path + ": expected header starting with 't,region_0,...'");
    }
    const std::size_t n = cols.size() - 1;
    for (std::size_t i = 0; i < n; ++i) {
        if (cols[i + 1] != "region_" + std::to_string(i)) {
            throw IoError(path + ": header column " + std::to_string(i + 1) + " is '" +
                          cols[i + 1] + "', expected 'region_" + std::to_string(i) + "'");
        }
    }

    std::vector<double> rows;  // timepoint-major while reading
    std::size_t t = 0;
    std::string line;
    while (std::getline(in, line)) {
        line = strip_cr(line);
        if (line.empty()) continue;
        auto vals = split_numbers(line, path);
        if (vals.size() != n + 1) {
            throw IoError(path + ": row " + std::to_string(t + 1) + " has " +
                          std::to_string(vals.size()) + " fields, expected " +
                          std::to_string(n + 1));
        }
        rows.insert(rows.end(), vals.begin() + 1, vals.end());
        ++t;
    }
    if (t == 0) {
        throw IoError(path + ": no timepoint rows");
    }

    Tensor bold = Tensor::zeros({n, t});
    auto out = bold.raw_data();
    for (std::size_t k = 0; k < t; ++k) {
        for (std::size_t i = 0; i < n; ++i) {
            out[i * t + k] = rows[k * n + i];
        }
    }
    return bold;
}

void write_scan_csv(const Tensor& bold, const std::string& path) {
    if (bold.rank() != 2) {
        throw ShapeError("write_scan_csv: scan must be regions x timepoints, got " +
                         shape_string(bold.shape()));
    }
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write scan file: " + path);
    }
    const std::size_t n = bold.rows(), t = bold.cols();
    out << "t";
    for (std::size_t i = 0; i < n; ++i) out << ",region_" << i;
    out << "\n";
    for (std::size_t k = 0; k < t; ++k) {
        out << k;
        for (std::size_t i = 0; i < n; ++i) out << "," << format_value(bold.at(i, k));
        out << "\n";
    }
    if (!out) {
        throw IoError("failed writing scan file: " + path);
    }
}

Tensor read_fc_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open fc file: " + path);
    }
    std::vector<double> values;
    std::size_t rows = 0, cols = 0;
    std::string line;
    while (std::getline(in, line)) {
        line = strip_cr(line);
        if (line.empty()) continue;
        auto vals = split_numbers(line, path);
        if (rows == 0) {
            cols = vals.size();
        } else if (vals.size() != cols) {
            throw IoError(path + ": ragged row " + std::to_string(rows));
        }
        values.insert(values.end(), vals.begin(), vals.end());
        ++rows;
    }
    if (rows == 0 || rows != cols) {
        throw IoError(path + ": expected a square matrix, got " + std::to_string(rows) + " x " +
                      std::to_string(cols));
    }
    return Tensor::from_values({rows, cols}, std::move(values));
}

void write_fc_csv(const Tensor& fc, const std::string& path) {
    if (fc.rank() != 2 || fc.rows() != fc.cols()) {
        throw ShapeError("write_fc_csv: expected a square matrix, got " +
                         shape_string(fc.shape()));
    }
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write fc file: " + path);
    }
    const std::size_t n = fc.rows();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (j) out << ",";
            out << format_value(fc.at(i, j));
        }
        out << "\n";
    }
    if (!out) {
        throw IoError("failed writing fc file: " + path);
    }
}

Tensor load_fc_any(const std::string& path) {
    std::ifstream probe(path);
    if (!probe) {
        throw IoError("cannot open: " + path);
    }
    std::string first;
    std::getline(probe, first);
    probe.close();
    if (first.rfind("t,", 0) == 0) {
        return compute_fc(read_scan_csv(path));
    }
    Tensor fc = read_fc_csv(path);
    validate_fc(fc);
    return fc;
}

}  // namespace lcm
