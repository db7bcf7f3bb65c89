#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace lel {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s)
{
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major tensor. Owns its storage.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(shape_size(shape), fill) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d))
    {
        if (data.size() != shape_size(shape))
            throw ContractError("tensor data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
    }

    std::size_t size() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    /// Size of the trailing axis.
    std::size_t last() const { return shape.empty() ? 1 : shape.back(); }

    T& operator[](std::size_t i) noexcept { return data[i]; }
    const T& operator[](std::size_t i) const noexcept { return data[i]; }

    std::span<T> span() noexcept { return data; }
    std::span<const T> span() const noexcept { return data; }

    template <class U>
    Tensor<U> cast() const
    {
        Tensor<U> out(shape);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

inline void require_shape(const Shape& got, const Shape& want, const std::string& what)
{
    if (got != want)
        throw ContractError(what + ": expected shape " + shape_str(want) + ", got " +
                            shape_str(got));
}

} // namespace lel
