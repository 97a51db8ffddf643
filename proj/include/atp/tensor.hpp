#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace atp {

/// Dense row-major float64 tensor. Most of the kernel only needs rank 2
/// (batch x features), so the accessors below are rank-2 helpers.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }

    std::size_t rows() const;
    std::size_t cols() const;

    double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * shape_[1], shape_[1]}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * shape_[1], shape_[1]}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    bool all_finite() const noexcept;

    /// Rows [first, first + count) as a new tensor.
    Tensor slice_rows(std::size_t first, std::size_t count) const;
    /// Rows selected by index, in the given order.
    Tensor gather_rows(std::span<const std::size_t> indices) const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

/// Stacks rank-2 tensors with equal column counts.
Tensor concat_rows(std::span<const Tensor> parts);

}  // namespace atp
