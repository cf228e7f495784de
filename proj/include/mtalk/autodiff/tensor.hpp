#pragma once

#include <cstddef>
#include <deque>
#include <numeric>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mtalk/common/error.hpp"

namespace mtalk::ad {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape);

// Dense row-major array. Most primitives treat it as a matrix of
// shape[0] rows by (numel / shape[0]) columns.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {
    check_shape();
  }
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    check_shape();
    require<ShapeError>(data.size() == shape_numel(shape),
                        "tensor: value count " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
  }

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.empty() || shape[0] == 0 ? 0 : static_cast<int>(data.size() / shape[0]); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

 private:
  void check_shape() const {
    for (int d : shape) require<ShapeError>(d > 0, "tensor: non-positive dimension in " + shape_str(shape));
  }
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

// Named parameter collection with stable addresses and insertion order.
// Insertion order is the serialization order of checkpoints.
template <typename T>
class ParamSet {
 public:
  Parameter<T>& add(std::string name, Tensor<T> init) {
    require(!index_.contains(name), "param set: duplicate parameter '" + name + "'");
    index_.emplace(name, params_.size());
    Tensor<T> g(init.shape);
    params_.push_back(Parameter<T>{std::move(name), std::move(init), std::move(g)});
    return params_.back();
  }

  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  Parameter<T>& get(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw InvalidArgument("param set: unknown parameter '" + std::string(name) + "'");
    return params_[it->second];
  }
  const Parameter<T>& get(std::string_view name) const {
    return const_cast<ParamSet*>(this)->get(name);
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), T(0));
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

 private:
  std::deque<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mtalk::ad
