#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gasnet/errors.hpp"

namespace gasnet::ad {

// 64-byte-aligned buffers: Eigen's vectorized reductions choose their
// head/tail splits by pointer alignment, so unaligned heap blocks would make
// summation order (and low-order float bits) vary between allocations.
template <class T>
struct AlignedAlloc {
    using value_type = T;
    static constexpr std::size_t alignment = 64;

    AlignedAlloc() = default;
    template <class U>
    AlignedAlloc(const AlignedAlloc<U>&) {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(alignment)));
    }
    void deallocate(T* p, std::size_t) noexcept {
        ::operator delete(p, std::align_val_t(alignment));
    }
    template <class U>
    bool operator==(const AlignedAlloc<U>&) const { return true; }
    template <class U>
    bool operator!=(const AlignedAlloc<U>&) const { return false; }
};

template <class T>
using AVec = std::vector<T, AlignedAlloc<T>>;

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Dense tensor with a shared buffer. Copies are shallow; use clone() for a
// deep copy. Element order is row-major with the last axis fastest, i.e.
// (N, C, D, H, W) stores W contiguously.
template <class T>
struct Tensor {
    Shape shape;
    std::shared_ptr<AVec<T>> buf;

    Tensor() = default;
    explicit Tensor(Shape s)
        : shape(std::move(s)), buf(std::make_shared<AVec<T>>(numel(shape), T(0))) {}
    Tensor(Shape s, std::shared_ptr<AVec<T>> b)
        : shape(std::move(s)), buf(std::move(b)) {
        if (!buf || static_cast<int64_t>(buf->size()) != numel(shape))
            throw ShapeError("tensor buffer size does not match shape " + shape_str(shape));
    }

    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        std::fill(t.buf->begin(), t.buf->end(), v);
        return t;
    }
    static Tensor from(const std::vector<T>& v, Shape s) {
        auto b = std::make_shared<AVec<T>>(v.begin(), v.end());
        return Tensor(std::move(s), std::move(b));
    }

    bool defined() const { return static_cast<bool>(buf); }
    int64_t size() const { return defined() ? static_cast<int64_t>(buf->size()) : 0; }
    T* data() { return buf->data(); }
    const T* data() const { return buf->data(); }
    T& operator[](int64_t i) { return (*buf)[i]; }
    const T& operator[](int64_t i) const { return (*buf)[i]; }

    Tensor clone() const {
        Tensor t;
        t.shape = shape;
        if (buf) t.buf = std::make_shared<AVec<T>>(*buf);
        return t;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> t;
        t.shape = shape;
        t.buf = std::make_shared<AVec<U>>(size());
        for (int64_t i = 0; i < size(); ++i) (*t.buf)[i] = static_cast<U>((*buf)[i]);
        return t;
    }
};

inline void check_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b)
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) +
                         " vs " + shape_str(b));
}

}  // namespace gasnet::ad
