#pragma once

#include <functional>
#include <map>
#include <memory>

#include "ssmlab/autodiff.hpp"

namespace ssmlab {

/// Owns a tape and binds model parameter tensors to leaves, once each.
class ModelGraph {
 public:
  explicit ModelGraph(bool record = true) : tape_(std::make_unique<Tape>()) {
    tape_->set_recording(record);
  }

  Tape& tape() { return *tape_; }
  const Tape& tape() const { return *tape_; }

  /// Leaf for `param`; repeated calls with the same tensor return the same Var.
  Var bind(const Tensor& param) {
    auto it = bound_.find(&param);
    if (it != bound_.end()) return it->second;
    Var v = tape_->leaf(param);
    bound_.emplace(&param, v);
    return v;
  }

  Var constant(Tensor value) { return tape_->constant(std::move(value)); }
  Var scalar(double value) { return tape_->constant(Tensor::scalar(value)); }

  /// Leaf previously bound for `param`, if any.
  const Var* bound(const Tensor& param) const {
    auto it = bound_.find(&param);
    return it == bound_.end() ? nullptr : &it->second;
  }

 private:
  std::unique_ptr<Tape> tape_;
  std::map<const Tensor*, Var> bound_;
};

/// Where an activation hook fires inside a block.
enum class HookSite {
  /// Gated scan output, right before the output projection (width d_inner).
  kScanOutput,
  /// Output projection result, before the residual add (width d_model).
  kMixerOutput,
};

/// Called at every hook site of every layer; returns the (possibly replaced)
/// activations. Must preserve shape.
using ActivationHook = std::function<Var(std::size_t layer, HookSite site, Var acts)>;

/// Applies `first` then `second`.
ActivationHook compose_hooks(ActivationHook first, ActivationHook second);

/// Multiplies the activations at (`layer`, `site`) columnwise by `factors`
/// (length = activation width). Other layers and sites pass through.
ActivationHook scale_dims_hook(std::size_t layer, HookSite site, Tensor factors);

inline Var run_hook(const ActivationHook& hook, std::size_t layer, HookSite site, Var acts) {
  return hook ? hook(layer, site, acts) : acts;
}

}  // namespace ssmlab
