#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace radapter {

// Thrown when operand shapes do not line up; the message names both shapes.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Dense row-major matrix of 64-bit floats. The only numeric carrier in the
// project; vectors are represented as 1xN tensors.
class Tensor2D {
public:
    Tensor2D() = default;

    Tensor2D(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("Tensor2D: data length " + std::to_string(data_.size()) +
                             " does not match shape " + std::to_string(rows_) + "x" +
                             std::to_string(cols_));
        }
    }

    static Tensor2D filled(std::size_t rows, std::size_t cols, double value) {
        Tensor2D t(rows, cols);
        for (double& x : t.data_) x = value;
        return t;
    }

    static Tensor2D identity(std::size_t n) {
        Tensor2D t(n, n);
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double* row(std::size_t r) { return data_.data() + r * cols_; }
    const double* row(std::size_t r) const { return data_.data() + r * cols_; }

    bool same_shape(const Tensor2D& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    Tensor2D& operator+=(const Tensor2D& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Tensor2D& operator-=(const Tensor2D& o) {
        require_same_shape(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }

    Tensor2D& operator*=(double s) {
        for (double& x : data_) x *= s;
        return *this;
    }

    // this += alpha * o
    void add_scaled(double alpha, const Tensor2D& o) {
        require_same_shape(o, "add_scaled");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += alpha * o.data_[i];
    }

    void fill(double value) {
        for (double& x : data_) x = value;
    }

    friend bool operator==(const Tensor2D& a, const Tensor2D& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    void require_same_shape(const Tensor2D& o, const char* what) const {
        if (!same_shape(o)) {
            throw ShapeError(std::string("Tensor2D") + what + ": shape " + shape_str() +
                             " vs " + o.shape_str());
        }
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Tensor2D operator+(Tensor2D a, const Tensor2D& b) { return a += b; }
inline Tensor2D operator-(Tensor2D a, const Tensor2D& b) { return a -= b; }
inline Tensor2D operator*(Tensor2D a, double s) { return a *= s; }
inline Tensor2D operator*(double s, Tensor2D a) { return a *= s; }

}  // namespace radapter
