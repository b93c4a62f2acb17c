#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qem/error.hpp"

namespace qem {

/// A tensor dimension: either the copy axis of a latent declaration (size K)
/// or a plate axis. Copy axes order before plate axes.
struct Axis {
  enum class Kind : std::uint8_t { copy = 0, plate = 1 };
  Kind kind = Kind::copy;
  int id = 0;

  static constexpr Axis copy(int id) { return {Kind::copy, id}; }
  static constexpr Axis plate(int id) { return {Kind::plate, id}; }
  bool is_copy() const { return kind == Kind::copy; }
  bool is_plate() const { return kind == Kind::plate; }

  auto operator<=>(const Axis&) const = default;
  bool operator==(const Axis&) const = default;
};

inline std::string to_string(Axis a) { return (a.is_copy() ? "k" : "p") + std::to_string(a.id); }

/// Dense row-major tensor whose dimensions are labelled by Axis, kept in sorted order.
class Tensor {
 public:
  Tensor() : data_{0.0} {}
  explicit Tensor(double scalar) : data_{scalar} {}

  Tensor(std::vector<Axis> axes, std::vector<std::size_t> shape, double fill)
      : axes_(std::move(axes)), shape_(std::move(shape)) {
    check_layout();
    data_.assign(element_count(shape_), fill);
  }

  Tensor(std::vector<Axis> axes, std::vector<std::size_t> shape, std::vector<double> data)
      : axes_(std::move(axes)), shape_(std::move(shape)), data_(std::move(data)) {
    check_layout();
    if (data_.size() != element_count(shape_)) {
      fail(ErrorKind::broadcast, "tensor data size " + std::to_string(data_.size()) + " does not match its shape");
    }
  }

  /// Build from axes in arbitrary order; data is permuted into canonical order.
  static Tensor from_unsorted(const std::vector<Axis>& axes, const std::vector<std::size_t>& shape,
                              const std::vector<double>& data) {
    std::vector<std::size_t> order(axes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return axes[a] < axes[b]; });
    std::vector<Axis> sorted_axes;
    std::vector<std::size_t> sorted_shape;
    for (std::size_t i : order) {
      sorted_axes.push_back(axes[i]);
      sorted_shape.push_back(shape[i]);
    }
    Tensor out(sorted_axes, sorted_shape, 0.0);
    const auto src_strides = strides_of(shape);
    std::vector<std::size_t> idx(axes.size(), 0);
    for (std::size_t flat = 0; flat < out.data_.size(); ++flat) {
      std::size_t src = 0;
      for (std::size_t d = 0; d < order.size(); ++d) src += idx[d] * src_strides[order[d]];
      out.data_[flat] = data[src];
      for (std::size_t d = idx.size(); d-- > 0;) {
        if (++idx[d] < sorted_shape[d]) break;
        idx[d] = 0;
      }
    }
    return out;
  }

  std::size_t rank() const { return axes_.size(); }
  std::size_t size() const { return data_.size(); }
  const std::vector<Axis>& axes() const { return axes_; }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  std::vector<double>& storage() { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double scalar() const {
    if (rank() != 0) fail(ErrorKind::broadcast, "tensor is not a scalar");
    return data_[0];
  }

  std::optional<std::size_t> position(Axis a) const {
    auto it = std::lower_bound(axes_.begin(), axes_.end(), a);
    if (it == axes_.end() || *it != a) return std::nullopt;
    return static_cast<std::size_t>(it - axes_.begin());
  }
  bool has(Axis a) const { return position(a).has_value(); }
  std::size_t extent(Axis a) const {
    auto p = position(a);
    if (!p) fail(ErrorKind::broadcast, "tensor has no axis " + to_string(a));
    return shape_[*p];
  }

  std::vector<std::size_t> strides() const { return strides_of(shape_); }

  std::vector<Axis> copy_axes() const {
    std::vector<Axis> out;
    for (Axis a : axes_)
      if (a.is_copy()) out.push_back(a);
    return out;
  }

  bool operator==(const Tensor&) const = default;

  static std::vector<std::size_t> strides_of(const std::vector<std::size_t>& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t d = shape.size(); d-- > 1;) s[d - 1] = s[d] * shape[d];
    return s;
  }
  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  void check_layout() const {
    if (axes_.size() != shape_.size()) fail(ErrorKind::broadcast, "tensor axes and shape lengths differ");
    for (std::size_t i = 1; i < axes_.size(); ++i) {
      if (!(axes_[i - 1] < axes_[i])) fail(ErrorKind::broadcast, "tensor axes must be sorted and unique");
    }
  }

  std::vector<Axis> axes_;
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

namespace detail {

struct Layout {
  std::vector<Axis> axes;
  std::vector<std::size_t> shape;
};

// Sorted union of the inputs' axes, checking that shared axes agree in extent.
inline Layout union_layout(std::span<const Tensor* const> inputs) {
  Layout out;
  for (const Tensor* t : inputs) {
    for (std::size_t d = 0; d < t->rank(); ++d) {
      const Axis a = t->axes()[d];
      auto it = std::lower_bound(out.axes.begin(), out.axes.end(), a);
      const auto pos = static_cast<std::size_t>(it - out.axes.begin());
      if (it != out.axes.end() && *it == a) {
        if (out.shape[pos] != t->shape()[d]) {
          fail(ErrorKind::broadcast, "axis " + to_string(a) + " has extent " + std::to_string(out.shape[pos]) +
                                         " in one operand and " + std::to_string(t->shape()[d]) + " in another");
        }
      } else {
        out.axes.insert(it, a);
        out.shape.insert(out.shape.begin() + static_cast<std::ptrdiff_t>(pos), t->shape()[d]);
      }
    }
  }
  return out;
}

// Strides of `t` laid over `layout`, zero where t lacks the axis.
inline std::vector<std::size_t> strides_over(const Tensor& t, const Layout& layout) {
  std::vector<std::size_t> s(layout.axes.size(), 0);
  const auto own = t.strides();
  for (std::size_t d = 0; d < t.rank(); ++d) {
    const auto pos = static_cast<std::size_t>(
        std::lower_bound(layout.axes.begin(), layout.axes.end(), t.axes()[d]) - layout.axes.begin());
    s[pos] = own[d];
  }
  return s;
}

// Visits every cell of `layout` in row-major order, maintaining N+1 running
// offsets (N inputs plus one output). visit(offsets) is called once per cell.
template <std::size_t M, class Visit>
void walk(const Layout& layout, const std::array<std::vector<std::size_t>, M>& strides, Visit&& visit) {
  const std::size_t rank = layout.shape.size();
  std::array<std::size_t, M> off{};
  if (rank == 0) {
    visit(off);
    return;
  }
  for (std::size_t e : layout.shape)
    if (e == 0) return;
  const std::size_t inner = layout.shape.back();
  std::array<std::size_t, M> inner_stride{};
  for (std::size_t i = 0; i < M; ++i) inner_stride[i] = strides[i][rank - 1];
  std::vector<std::size_t> idx(rank - 1, 0);
  const std::size_t outer = Tensor::element_count(layout.shape) / inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::array<std::size_t, M> cur = off;
    for (std::size_t j = 0; j < inner; ++j) {
      visit(cur);
      for (std::size_t i = 0; i < M; ++i) cur[i] += inner_stride[i];
    }
    for (std::size_t d = rank - 1; d-- > 0;) {
      for (std::size_t i = 0; i < M; ++i) off[i] += strides[i][d];
      if (++idx[d] < layout.shape[d]) break;
      for (std::size_t i = 0; i < M; ++i) off[i] -= strides[i][d] * layout.shape[d];
      idx[d] = 0;
    }
  }
}

template <std::size_t N, class F, std::size_t... I>
double call_with(F& f, const std::array<const double*, N>& src, const std::array<std::size_t, N + 1>& off,
                 std::index_sequence<I...>) {
  return f(src[I][off[I]]...);
}

}  // namespace detail

/// Elementwise f over the broadcast union of the inputs' axes.
template <std::size_t N, class F>
Tensor broadcast_map(const std::array<const Tensor*, N>& inputs, F f) {
  const auto layout = detail::union_layout(std::span<const Tensor* const>(inputs.data(), N));
  Tensor out(layout.axes, layout.shape, 0.0);
  std::array<std::vector<std::size_t>, N + 1> strides;
  std::array<const double*, N> src{};
  for (std::size_t i = 0; i < N; ++i) {
    strides[i] = detail::strides_over(*inputs[i], layout);
    src[i] = inputs[i]->data().data();
  }
  strides[N] = out.strides();
  double* dst = out.data().data();
  detail::walk<N + 1>(layout, strides, [&](const std::array<std::size_t, N + 1>& off) {
    dst[off[N]] = detail::call_with<N>(f, src, off, std::make_index_sequence<N>{});
  });
  return out;
}

/// Sums f over the broadcast union of the inputs, keeping only the axes for which keep(axis) holds.
template <std::size_t N, class F, class Keep>
Tensor broadcast_reduce(const std::array<const Tensor*, N>& inputs, Keep keep, F f) {
  const auto layout = detail::union_layout(std::span<const Tensor* const>(inputs.data(), N));
  std::vector<Axis> out_axes;
  std::vector<std::size_t> out_shape;
  for (std::size_t d = 0; d < layout.axes.size(); ++d) {
    if (keep(layout.axes[d])) {
      out_axes.push_back(layout.axes[d]);
      out_shape.push_back(layout.shape[d]);
    }
  }
  Tensor out(out_axes, out_shape, 0.0);
  std::array<std::vector<std::size_t>, N + 1> strides;
  std::array<const double*, N> src{};
  for (std::size_t i = 0; i < N; ++i) {
    strides[i] = detail::strides_over(*inputs[i], layout);
    src[i] = inputs[i]->data().data();
  }
  strides[N] = detail::strides_over(out, layout);
  double* dst = out.data().data();
  detail::walk<N + 1>(layout, strides, [&](const std::array<std::size_t, N + 1>& off) {
    dst[off[N]] += detail::call_with<N>(f, src, off, std::make_index_sequence<N>{});
  });
  return out;
}

template <class F>
Tensor map(const Tensor& t, F f) {
  Tensor out = t;
  for (double& x : out.data()) x = f(x);
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return broadcast_map<2>({&a, &b}, [](double x, double y) { return x + y; });
}

/// Sum of several tensors over the union of their axes.
inline Tensor add_all(std::span<const Tensor* const> ts) {
  if (ts.empty()) return Tensor(0.0);
  Tensor acc = *ts[0];
  for (std::size_t i = 1; i < ts.size(); ++i) acc = add(acc, *ts[i]);
  return acc;
}

namespace detail {

// Splits a tensor around one axis into (outer, extent, inner) blocks.
struct AxisSplit {
  std::size_t pos, outer, extent, inner;
};

inline AxisSplit split_at(const Tensor& t, Axis a) {
  const auto pos = t.position(a);
  if (!pos) fail(ErrorKind::broadcast, "tensor has no axis " + to_string(a));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < *pos; ++d) outer *= t.shape()[d];
  for (std::size_t d = *pos + 1; d < t.rank(); ++d) inner *= t.shape()[d];
  return {*pos, outer, t.shape()[*pos], inner};
}

inline Tensor without_axis(const Tensor& t, std::size_t pos) {
  auto axes = t.axes();
  auto shape = t.shape();
  axes.erase(axes.begin() + static_cast<std::ptrdiff_t>(pos));
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(pos));
  return Tensor(std::move(axes), std::move(shape), 0.0);
}

}  // namespace detail

inline Tensor sum_axis(const Tensor& t, Axis a) {
  const auto s = detail::split_at(t, a);
  Tensor out = detail::without_axis(t, s.pos);
  const double* src = t.data().data();
  double* dst = out.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.extent; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) dst[o * s.inner + i] += src[(o * s.extent + k) * s.inner + i];
  return out;
}

/// log sum_k exp(t) over axis a, with per-slice max subtraction. All -inf slices stay -inf.
inline Tensor logsumexp_axis(const Tensor& t, Axis a) {
  const auto s = detail::split_at(t, a);
  Tensor out = detail::without_axis(t, s.pos);
  const double* src = t.data().data();
  double* dst = out.data().data();
  std::vector<double> mx(s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::fill(mx.begin(), mx.end(), -std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < s.extent; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) mx[i] = std::max(mx[i], src[(o * s.extent + k) * s.inner + i]);
    double* row = dst + o * s.inner;
    for (std::size_t k = 0; k < s.extent; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) {
        if (mx[i] == -std::numeric_limits<double>::infinity()) continue;
        row[i] += std::exp(src[(o * s.extent + k) * s.inner + i] - mx[i]);
      }
    for (std::size_t i = 0; i < s.inner; ++i)
      row[i] = mx[i] == -std::numeric_limits<double>::infinity() ? mx[i] : std::log(row[i]) + mx[i];
  }
  return out;
}

inline double logsumexp(std::span<const double> xs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : xs) mx = std::max(mx, x);
  if (mx == -std::numeric_limits<double>::infinity()) return mx;
  if (mx == std::numeric_limits<double>::infinity()) return mx;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - mx);
  return std::log(acc) + mx;
}

/// Fix axis a at `index`, removing it.
inline Tensor slice(const Tensor& t, Axis a, std::size_t index) {
  const auto s = detail::split_at(t, a);
  if (index >= s.extent) fail(ErrorKind::broadcast, "slice index out of range on axis " + to_string(a));
  Tensor out = detail::without_axis(t, s.pos);
  const double* src = t.data().data();
  double* dst = out.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) dst[o * s.inner + i] = src[(o * s.extent + index) * s.inner + i];
  return out;
}

/// Sum over every plate axis, leaving only copy axes.
inline Tensor sum_plates(const Tensor& t) {
  std::size_t first_plate = t.rank();
  for (std::size_t d = 0; d < t.rank(); ++d)
    if (t.axes()[d].is_plate()) {
      first_plate = d;
      break;
    }
  std::vector<Axis> axes(t.axes().begin(), t.axes().begin() + static_cast<std::ptrdiff_t>(first_plate));
  std::vector<std::size_t> shape(t.shape().begin(), t.shape().begin() + static_cast<std::ptrdiff_t>(first_plate));
  Tensor out(axes, shape, 0.0);
  const std::size_t block = t.size() / std::max<std::size_t>(out.size(), 1);
  const double* src = t.data().data();
  for (std::size_t o = 0; o < out.size(); ++o) {
    double acc = 0.0;
    for (std::size_t i = 0; i < block; ++i) acc += src[o * block + i];
    out[o] = acc;
  }
  return out;
}

/// Look up src along `axis` using integer values of `index`: the result drops `axis`
/// from src and gains the axes of `index`.
inline Tensor gather(const Tensor& src, Axis axis, const Tensor& index) {
  const auto pos = src.position(axis);
  if (!pos) fail(ErrorKind::broadcast, "gather source lacks axis " + to_string(axis));
  if (index.has(axis)) fail(ErrorKind::broadcast, "gather index may not carry the gathered axis " + to_string(axis));
  const Tensor reduced = detail::without_axis(src, *pos);
  const std::array<const Tensor*, 2> ins{&reduced, &index};
  const auto layout = detail::union_layout(std::span<const Tensor* const>(ins.data(), 2));
  Tensor out(layout.axes, layout.shape, 0.0);

  // Strides of the original src laid over the result layout (gathered axis handled separately).
  std::vector<std::size_t> src_strides(layout.axes.size(), 0);
  const auto own = src.strides();
  for (std::size_t d = 0; d < src.rank(); ++d) {
    if (d == *pos) continue;
    const auto lp = static_cast<std::size_t>(
        std::lower_bound(layout.axes.begin(), layout.axes.end(), src.axes()[d]) - layout.axes.begin());
    src_strides[lp] = own[d];
  }
  const std::size_t gather_stride = own[*pos];
  const std::size_t extent = src.shape()[*pos];
  std::array<std::vector<std::size_t>, 3> strides{src_strides, detail::strides_over(index, layout), out.strides()};
  const double* s = src.data().data();
  const double* ix = index.data().data();
  double* dst = out.data().data();
  detail::walk<3>(layout, strides, [&](const std::array<std::size_t, 3>& off) {
    const double raw = ix[off[1]];
    if (!(raw >= 0.0) || raw != std::floor(raw) || static_cast<std::size_t>(raw) >= extent) {
      fail(ErrorKind::broadcast, "gather index " + std::to_string(raw) + " outside [0, " + std::to_string(extent) +
                                     ") on axis " + to_string(axis));
    }
    dst[off[2]] = s[off[0] + static_cast<std::size_t>(raw) * gather_stride];
  });
  return out;
}

/// Replace axis labels (each old axis maps to a distinct new one) and re-sort.
inline Tensor relabel(const Tensor& t, const std::function<Axis(Axis)>& f) {
  std::vector<Axis> axes;
  for (Axis a : t.axes()) axes.push_back(f(a));
  return Tensor::from_unsorted(axes, t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
}

}  // namespace qem
