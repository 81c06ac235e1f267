#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cipa/errors.hpp"

namespace cipa {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    bool is_leaf = true;  // false for outputs of recorded ops

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

// Dense row-major n-d array of T with an optional gradient slot. Handle
// semantics: copies share the underlying buffer.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : p_(std::make_shared<TensorImpl<T>>()) {
        p_->shape = std::move(shape);
        p_->data.assign(numel_of(p_->shape), fill);
    }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        if (numel_of(shape) != data.size())
            throw ShapeError("tensor: " + shape_str(shape) + " cannot hold " +
                             std::to_string(data.size()) + " values");
        Tensor t;
        t.p_ = std::make_shared<TensorImpl<T>>();
        t.p_->shape = std::move(shape);
        t.p_->data = std::move(data);
        return t;
    }

    static Tensor scalar(T v) { return from_data({1}, {v}); }

    bool defined() const { return p_ != nullptr; }
    const Shape& shape() const { return p_->shape; }
    std::size_t rank() const { return p_->shape.size(); }
    std::size_t extent(std::size_t axis) const { return p_->shape.at(axis); }
    std::size_t numel() const { return p_->data.size(); }

    T* data() { return p_->data.data(); }
    const T* data() const { return p_->data.data(); }
    std::vector<T>& vec() { return p_->data; }
    const std::vector<T>& vec() const { return p_->data; }

    T item() const {
        if (numel() != 1)
            throw ContractError("item: tensor " + shape_str(shape()) + " is not scalar");
        return p_->data[0];
    }

    T& at(std::initializer_list<std::size_t> idx) {
        return p_->data[offset(idx)];
    }
    T at(std::initializer_list<std::size_t> idx) const {
        return p_->data[offset(idx)];
    }

    bool requires_grad() const { return p_->requires_grad; }
    Tensor& set_requires_grad(bool v = true) {
        p_->requires_grad = v;
        return *this;
    }
    bool is_leaf() const { return p_->is_leaf; }

    bool has_grad() const { return !p_->grad.empty(); }
    const std::vector<T>& grad() const {
        if (p_->grad.empty())
            throw ContractError("grad: no gradient accumulated for this tensor");
        return p_->grad;
    }
    void zero_grad() { p_->grad.clear(); }

    std::shared_ptr<TensorImpl<T>> impl() const { return p_; }

    // Deep copy; detached from any graph.
    Tensor clone() const {
        Tensor t = from_data(p_->shape, p_->data);
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> d(p_->data.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<U>(p_->data[i]);
        return Tensor<U>::from_data(p_->shape, std::move(d));
    }

private:
    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != p_->shape.size())
            throw ShapeError("at: rank mismatch for " + shape_str(p_->shape));
        std::size_t off = 0, i = 0;
        for (std::size_t v : idx) {
            off = off * p_->shape[i] + v;
            ++i;
        }
        return off;
    }

    std::shared_ptr<TensorImpl<T>> p_;
};

template <typename T>
inline bool all_finite(const Tensor<T>& t) {
    for (const T& v : t.vec())
        if (!std::isfinite(double(v))) return false;
    return true;
}

template <typename T>
inline void check_finite(const char* op, const Tensor<T>& t) {
    if (!all_finite(t))
        throw NumericFault(std::string(op) + ": non-finite value in output " +
                           shape_str(t.shape()));
}

// ---------------------------------------------------------------------------
// TSR1 file format: 8-byte magic "TSR1\0\0\0\0", u32 LE rank, rank x u64 LE
// extents, then row-major float32 LE payload.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = (v >> (8 * i)) & 0xff;
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xff;
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

inline constexpr char kTsrMagic[8] = {'T', 'S', 'R', '1', 0, 0, 0, 0};

}  // namespace detail

template <typename T>
inline void write_tsr(std::ostream& os, const Tensor<T>& t) {
    os.write(detail::kTsrMagic, 8);
    detail::put_u32(os, std::uint32_t(t.rank()));
    for (std::size_t e : t.shape()) detail::put_u64(os, e);
    for (std::size_t i = 0; i < t.numel(); ++i) {
        float f = float(t.data()[i]);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        detail::put_u32(os, bits);
    }
}

template <typename T>
inline void save_tsr(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_tsr: cannot open " + path.string());
    write_tsr(os, t);
    if (!os) throw IoError("save_tsr: write failed for " + path.string());
}

template <typename T = float>
inline Tensor<T> read_tsr(std::istream& is, const std::string& name = "<stream>") {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kTsrMagic, 8) != 0)
        throw IoError("read_tsr: bad magic in " + name);
    std::uint32_t rank = detail::get_u32(is);
    if (rank > 8) throw IoError("read_tsr: implausible rank in " + name);
    Shape shape(rank);
    for (auto& e : shape) e = detail::get_u64(is);
    std::size_t n = numel_of(shape);
    std::vector<T> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = detail::get_u32(is);
        float f;
        std::memcpy(&f, &bits, 4);
        data[i] = T(f);
    }
    if (!is) throw IoError("read_tsr: truncated payload in " + name);
    return Tensor<T>::from_data(std::move(shape), std::move(data));
}

template <typename T = float>
inline Tensor<T> load_tsr(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_tsr: cannot open " + path.string());
    return read_tsr<T>(is, path.string());
}

}  // namespace cipa
