#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "rl4seg/tensor.hpp"

namespace rl4seg::ad {

// Reverse-mode tape node. Ops build a DAG of these; backward() walks it once
// in reverse topological order. Values are never mutated after creation.
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.values.empty()) grad = Tensor(value.shape);
  }
};

using Var = std::shared_ptr<Node>;

// While a NoGradGuard is alive on this thread, ops produce constant nodes that
// retain neither parents nor backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var constant(Tensor value);
Var leaf(Tensor value, bool requires_grad = true);

// Cross-correlation over the three trailing dims of x=[Ci,T,H,W] with
// w=[Co,Ci,kt,kh,kw]; uniform stride/padding on all spatial axes. Output dim =
// floor((dim + 2*padding - k)/stride) + 1.
Var conv3d(const Var& x, const Var& w, int stride, int padding);

Var leaky_relu(const Var& x, real slope = real(0.01));
Var softmax_classes(const Var& logits);      // softmax over axis 0 of [K,...]
Var log_softmax_classes(const Var& logits);  // numerically stable log-softmax
Var sigmoid(const Var& x);

// Elementwise with trailing-dimension broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

Var minimum(const Var& a, const Var& b);  // same shape; ties split gradient
Var clip(const Var& x, real lo, real hi);
Var vlog(const Var& x);
Var vexp(const Var& x);
Var scale(const Var& x, real factor);
Var add_scalar(const Var& x, real c);

Var mean_all(const Var& x);     // -> shape {1}
Var sum_classes(const Var& x);  // [K,rest...] -> [rest...]
Var concat_channels(const Var& a, const Var& b);

enum class Resize { Nearest, Trilinear };
Var resize3d(const Var& x, int t_out, int h_out, int w_out, Resize mode);

Var bce_loss(const Var& pred, const Var& target);  // mean; pred clamped to [1e-7, 1-1e-7]
Var mse_loss(const Var& a, const Var& b);          // mean squared error

// Seeds grad(root)=1 (root must be scalar) and propagates through the DAG.
// Leaf gradients accumulate; callers zero them between steps.
void backward(const Var& root);

// Plain-value (non-tape) helpers shared by data paths.
Tensor resize3d_values(const Tensor& x, int t_out, int h_out, int w_out, Resize mode);

}  // namespace rl4seg::ad
