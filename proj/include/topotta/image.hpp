#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "topotta/tensor.hpp"

namespace topotta {

// Plain grayscale image, values nominally in [0,1], row-major.
struct ImageF {
    int h = 0, w = 0;
    std::vector<double> v;

    ImageF() = default;
    ImageF(int h_, int w_, double fill = 0.0)
        : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, fill) {}
    double& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
    double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

struct BinaryMask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> v;

    BinaryMask() = default;
    BinaryMask(int h_, int w_, std::uint8_t fill = 0)
        : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, fill) {}
    std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
    std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
    std::size_t count() const {
        std::size_t n = 0;
        for (auto b : v) n += b ? 1 : 0;
        return n;
    }
};

inline Tensor tensor_from_image(const ImageF& im) {
    return Tensor::from_data({1, 1, im.h, im.w}, im.v);
}

inline ImageF image_from_tensor(const Tensor& t) {
    if (t.shape().size() != 4 || t.dim(0) != 1 || t.dim(1) != 1)
        throw std::invalid_argument("image_from_tensor: expected [1,1,H,W], got " + shape_str(t.shape()));
    ImageF im(t.dim(2), t.dim(3));
    im.v = t.data();
    return im;
}

inline BinaryMask binarize(const ImageF& prob, double threshold) {
    BinaryMask m(prob.h, prob.w);
    for (std::size_t i = 0; i < prob.v.size(); ++i) m.v[i] = prob.v[i] > threshold ? 1 : 0;
    return m;
}

inline ImageF image_from_mask(const BinaryMask& m) {
    ImageF im(m.h, m.w);
    for (std::size_t i = 0; i < m.v.size(); ++i) im.v[i] = m.v[i] ? 1.0 : 0.0;
    return im;
}

}  // namespace topotta
