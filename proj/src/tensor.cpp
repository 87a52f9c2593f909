#include "ikd/tensor.hpp"

#include <sstream>

namespace ikd {

Index numel(const Shape& shape) {
    Index n = 1;
    for (Index d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("max_abs_diff: shape " + to_string(a.shape()) + " vs " +
                                    to_string(b.shape()));
    }
    return (a.data() - b.data()).abs().maxCoeff();
}

}  // namespace ikd
