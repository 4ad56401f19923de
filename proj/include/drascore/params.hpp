#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "drascore/common.hpp"
#include "drascore/tensor.hpp"

namespace drascore {

// Ordered collection of named trainable parameters plus non-trainable buffers
// (BN running statistics). Iteration order is insertion order everywhere, so
// initialization, updates and serialization are deterministic.
template <typename T>
class ParamStore {
 public:
  TensorPtr<T> add(const std::string& name, Shape shape, bool weight_decay) {
    require(!params_.count(name), "param store: duplicate parameter ", name);
    auto t = make_tensor<T>(std::move(shape), true);
    t->name = name;
    params_[name] = Entry{t, weight_decay};
    order_.push_back(name);
    return t;
  }

  TensorPtr<T> add_buffer(const std::string& name, Shape shape) {
    require(!buffers_.count(name), "param store: duplicate buffer ", name);
    auto t = make_tensor<T>(std::move(shape), false);
    t->name = name;
    buffers_[name] = t;
    buffer_order_.push_back(name);
    return t;
  }

  TensorPtr<T> get(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), "param store: unknown parameter ", name);
    return it->second.value;
  }

  TensorPtr<T> buffer(const std::string& name) const {
    auto it = buffers_.find(name);
    require(it != buffers_.end(), "param store: unknown buffer ", name);
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) > 0; }

  bool decays(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), "param store: unknown parameter ", name);
    return it->second.decay;
  }

  const std::vector<std::string>& names() const { return order_; }
  const std::vector<std::string>& buffer_names() const { return buffer_order_; }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& name : order_) n += get(name)->numel();
    return n;
  }

  void zero_grads() {
    for (const auto& name : order_) {
      auto t = get(name);
      t->ensure_grad();
      t->zero_grad();
    }
  }

  ParamStore<T> clone() const {
    ParamStore<T> out;
    for (const auto& name : order_) {
      const auto& e = params_.at(name);
      auto t = out.add(name, e.value->shape, e.decay);
      t->data = e.value->data;
    }
    for (const auto& name : buffer_order_) {
      auto t = out.add_buffer(name, buffers_.at(name)->shape);
      t->data = buffers_.at(name)->data;
    }
    return out;
  }

  // Structural identity: same names, same shapes, in the same order.
  void check_same_structure(const ParamStore<T>& other) const {
    require(order_ == other.order_ && buffer_order_ == other.buffer_order_,
            "param store: structural mismatch (parameter lists differ)");
    for (const auto& name : order_)
      require(get(name)->shape == other.get(name)->shape,
              "param store: shape mismatch for ", name);
  }

 private:
  struct Entry {
    TensorPtr<T> value;
    bool decay;
  };
  std::unordered_map<std::string, Entry> params_;
  std::unordered_map<std::string, TensorPtr<T>> buffers_;
  std::vector<std::string> order_;
  std::vector<std::string> buffer_order_;
};

}  // namespace drascore
