#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

namespace tfids::ad {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s);

// Dense row-major float32 tensor. Plain value type: differentiation state
// lives on the tape, not here, except for the requires_grad hint consumed
// when a tensor becomes a tape leaf.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), values_(static_cast<size_t>(shape_numel(shape_)), 0.0f) {}

    Tensor(Shape shape, std::vector<float> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, float v);
    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(values_.size()); }

    float* data() { return values_.data(); }
    const float* data() const { return values_.data(); }
    std::vector<float>& values() { return values_; }
    const std::vector<float>& values() const { return values_; }

    float& operator[](std::int64_t i) { return values_[static_cast<size_t>(i)]; }
    float operator[](std::int64_t i) const { return values_[static_cast<size_t>(i)]; }

    // 2-D accessor, mostly for tests and small setup code.
    float& at2(int i, int j) { return values_[static_cast<size_t>(i) * shape_[1] + j]; }
    float at2(int i, int j) const { return values_[static_cast<size_t>(i) * shape_[1] + j]; }

    float item() const;

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool b) {
        requires_grad_ = b;
        return *this;
    }

    bool all_finite() const;

private:
    Shape shape_;
    std::vector<float> values_;
    bool requires_grad_ = false;
};

} // namespace tfids::ad
