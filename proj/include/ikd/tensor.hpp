#pragma once

#include <Eigen/Dense>

#include <cstring>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace ikd {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Number of elements described by a shape. The empty shape is a scalar.
Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major n-dimensional array.
///
/// Storage is a flat Eigen array so element-wise maths can be written as
/// Eigen expressions on data(); matrix views are provided for the GEMM
/// paths. Every dimension is strictly positive.
template <typename Scalar_>
class DenseTensor {
public:
    using Scalar = Scalar_;
    using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    DenseTensor() : data_(Storage::Zero(1)) {}

    explicit DenseTensor(Shape shape) : shape_(std::move(shape)) {
        check_dims();
        data_ = Storage::Zero(numel(shape_));
    }

    DenseTensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (data_.size() != numel(shape_)) {
            throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                        " does not match shape " + to_string(shape_));
        }
    }

    DenseTensor(Shape shape, std::initializer_list<Scalar> values)
        : DenseTensor(std::move(shape), from_list(values)) {}

    static DenseTensor scalar(Scalar value) {
        DenseTensor t;
        t.data_(0) = value;
        return t;
    }

    static DenseTensor full(Shape shape, Scalar value) {
        DenseTensor t(std::move(shape));
        t.data_.setConstant(value);
        return t;
    }

    const Shape& shape() const { return shape_; }
    Index rank() const { return static_cast<Index>(shape_.size()); }
    Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    Index size() const { return data_.size(); }

    Storage& data() { return data_; }
    const Storage& data() const { return data_; }
    Scalar* raw() { return data_.data(); }
    const Scalar* raw() const { return data_.data(); }

    Scalar& operator[](Index i) { return data_(i); }
    Scalar operator[](Index i) const { return data_(i); }

    Scalar item() const {
        if (data_.size() != 1) {
            throw std::invalid_argument("item() on tensor of shape " + to_string(shape_));
        }
        return data_(0);
    }

    /// Same data under a new shape with equal element count.
    DenseTensor reshaped(Shape shape) const { return DenseTensor(std::move(shape), data_); }

    Eigen::Map<RowMatrix> matrix(Index rows, Index cols) {
        return Eigen::Map<RowMatrix>(data_.data(), rows, cols);
    }
    Eigen::Map<const RowMatrix> matrix(Index rows, Index cols) const {
        return Eigen::Map<const RowMatrix>(data_.data(), rows, cols);
    }

    bool all_finite() const { return data_.isFinite().all(); }

private:
    void check_dims() const {
        for (Index d : shape_) {
            if (d <= 0) {
                throw std::invalid_argument("tensor shape " + to_string(shape_) +
                                            " has a non-positive dimension");
            }
        }
    }

    static Storage from_list(std::initializer_list<Scalar> values) {
        Storage s(static_cast<Index>(values.size()));
        Index i = 0;
        for (Scalar v : values) s(i++) = v;
        return s;
    }

    Shape shape_;
    Storage data_;
};

using Tensor = DenseTensor<double>;

/// Bit-for-bit equality of shape and data.
template <typename Scalar>
bool bitwise_equal(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.raw(), b.raw(), sizeof(Scalar) * static_cast<std::size_t>(a.size())) == 0;
}

/// Largest absolute element-wise difference. Shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace ikd
