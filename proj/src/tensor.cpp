#include "tfids/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace tfids::ad {

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    if (static_cast<std::int64_t>(values_.size()) != shape_numel(shape_)) {
        throw std::invalid_argument("Tensor: value count " + std::to_string(values_.size()) +
                                    " does not match shape " + shape_str(shape_));
    }
}

Tensor Tensor::full(Shape shape, float v) {
    Tensor t(std::move(shape));
    for (auto& x : t.values_) x = v;
    return t;
}

float Tensor::item() const {
    if (size() != 1) {
        throw std::invalid_argument("Tensor::item: tensor of shape " + shape_str(shape_) +
                                    " is not scalar");
    }
    return values_[0];
}

bool Tensor::all_finite() const {
    for (float v : values_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

} // namespace tfids::ad
