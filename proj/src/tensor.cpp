#include "atp/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "atp/errors.hpp"

namespace atp {

namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)), data_(element_count(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
        throw DimensionError("tensor: shape holds " + std::to_string(element_count(shape_)) +
                             " elements but buffer has " + std::to_string(data_.size()));
    }
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw DimensionError("tensor: expected rank 2, got rank " + std::to_string(rank()));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw DimensionError("tensor: expected rank 2, got rank " + std::to_string(rank()));
    return shape_[1];
}

bool Tensor::all_finite() const noexcept {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::slice_rows(std::size_t first, std::size_t count) const {
    const std::size_t c = cols();
    if (first + count > rows()) throw DimensionError("tensor: row slice out of range");
    std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(first * c),
                            data_.begin() + static_cast<std::ptrdiff_t>((first + count) * c));
    return Tensor({count, c}, std::move(out));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> indices) const {
    const std::size_t c = cols();
    Tensor out = Tensor::matrix(indices.size(), c);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows()) throw DimensionError("tensor: gather index out of range");
        auto src = row(indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) return Tensor::matrix(0, 0);
    const std::size_t c = parts.front().cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.cols() != c) throw DimensionError("concat_rows: column mismatch");
        total += p.rows();
    }
    std::vector<double> out;
    out.reserve(total * c);
    for (const auto& p : parts) out.insert(out.end(), p.storage().begin(), p.storage().end());
    return Tensor({total, c}, std::move(out));
}

}  // namespace atp
