#pragma once

#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "gdoc/errors.hpp"
#include "gdoc/rng.hpp"

namespace gdoc::ad {

// Dense row-major matrix. The whole math core works on rank-2 tensors;
// vectors are 1xN rows. T is float for training, double for certification.
template <typename T>
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // filled by Graph::backward for leaves; else empty

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, T(0)) {}

    static Tensor zeros(int r, int c) { return Tensor(r, c); }

    static Tensor full(int r, int c, T v) {
        Tensor t(r, c);
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor from_rows(int r, int c, std::vector<T> values) {
        Tensor t(r, c);
        if (values.size() != t.data.size())
            throw ShapeError("tensor init: expected " + std::to_string(t.data.size()) +
                             " values, got " + std::to_string(values.size()));
        t.data = std::move(values);
        return t;
    }

    static Tensor row(std::vector<T> values) {
        int n = static_cast<int>(values.size());
        return from_rows(1, n, std::move(values));
    }

    // Scaled-normal init, std = scale / sqrt(fan_in).
    static Tensor randn(int r, int c, Rng& rng, T scale = T(1)) {
        Tensor t(r, c);
        for (auto& v : t.data) v = static_cast<T>(rng.normal()) * scale;
        return t;
    }

    size_t numel() const { return data.size(); }

    T& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    const T& at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    std::string shape_str() const {
        std::ostringstream os;
        os << rows << "x" << cols;
        return os.str();
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.rows = rows;
        out.cols = cols;
        out.requires_grad = requires_grad;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

}  // namespace gdoc::ad
