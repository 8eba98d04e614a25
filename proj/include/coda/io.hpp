#pragma once

// File formats: the tensor text format used by fixtures and checkpoints
// (header line "rows cols", then one line of space-separated reals per row)
// and binary PGM (P5) for heatmap export.

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>

#include "coda/matrix.hpp"

namespace coda {

class io_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void write_tensor_text(std::ostream& os, const Matrix& m) {
    os << m.rows << ' ' << m.cols << '\n';
    os << std::setprecision(17);
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j) {
            if (j) os << ' ';
            os << m(i, j);
        }
        os << '\n';
    }
}

inline std::string tensor_to_text(const Matrix& m) {
    std::ostringstream ss;
    write_tensor_text(ss, m);
    return ss.str();
}

inline Matrix read_tensor_text(std::istream& is) {
    std::size_t rows = 0, cols = 0;
    if (!(is >> rows >> cols)) {
        throw io_error("tensor text: malformed header, expected 'rows cols'");
    }
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows * cols; ++i) {
        if (!(is >> m.data[i])) {
            throw io_error("tensor text: expected " + std::to_string(rows * cols) +
                           " values, got " + std::to_string(i));
        }
    }
    return m;
}

inline void save_tensor_text(const std::string& path, const Matrix& m) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for writing: " + path);
    write_tensor_text(f, m);
    if (!f) throw io_error("write failed: " + path);
}

inline Matrix load_tensor_text(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open for reading: " + path);
    return read_tensor_text(f);
}

// values are clamped to [0,1] and scaled to the 8-bit gray range
inline void write_pgm(const std::string& path, const Matrix& values) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open for writing: " + path);
    f << "P5\n" << values.cols << ' ' << values.rows << "\n255\n";
    for (double v : values.data) {
        const double clamped = std::min(1.0, std::max(0.0, v));
        const auto byte = static_cast<unsigned char>(std::lround(clamped * 255.0));
        f.put(static_cast<char>(byte));
    }
    if (!f) throw io_error("write failed: " + path);
}

}  // namespace coda
