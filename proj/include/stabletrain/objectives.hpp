#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stabletrain/common.hpp"
#include "stabletrain/tensor.hpp"

namespace stabletrain {

// Per-class probabilities P(y_j | x). Conceptual interface for the loss
// definitions; the training path works on logits via log-softmax throughout
// so log(0) never occurs.
template <typename T>
using Likelihood = std::vector<T>;

template <typename T>
void validate_likelihood(const char* op, const Likelihood<T>& p) {
  T s = T(0);
  for (T v : p) {
    if (v < T(0) || v > T(1))
      throw DataError(std::string(op) + ": probability " + std::to_string(v) +
                      " outside [0,1]");
    s += v;
  }
  if (std::abs(s - T(1)) > T(1e-4))
    throw DataError(std::string(op) + ": probabilities sum to " +
                    std::to_string(s));
}

// -log P(y_label | x)
template <typename T>
T cross_entropy(const Likelihood<T>& probs, std::size_t label) {
  validate_likelihood("cross_entropy", probs);
  if (label >= probs.size())
    throw DataError("cross_entropy: label " + std::to_string(label) +
                    " out of range [0," + std::to_string(probs.size()) + ")");
  return -std::log(probs[label]);
}

// D_KL(p || q) = sum p (log p - log q), with the convention 0 log 0 = 0.
template <typename T>
T kl_divergence(const Likelihood<T>& p, const Likelihood<T>& q) {
  if (p.size() != q.size())
    throw DataError("kl_divergence: length mismatch " +
                    std::to_string(p.size()) + " vs " +
                    std::to_string(q.size()));
  T s = T(0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == T(0)) continue;
    s += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return s;
}

// 0.5 (KL(p||q) + KL(q||p)), computed in argument order so swapping the
// arguments permutes the two summands only.
template <typename T>
T sym_kl(const Likelihood<T>& p, const Likelihood<T>& q) {
  return T(0.5) * (kl_divergence(p, q) + kl_divergence(q, p));
}

template <typename T>
T stability_loss(const Likelihood<T>& f_x, const Likelihood<T>& f_xp,
                 bool symmetric) {
  return symmetric ? sym_kl(f_x, f_xp) : kl_divergence(f_x, f_xp);
}

// L = L0 + alpha * Lstab
template <typename T>
T combined_loss(T l0, T lstab, T alpha) {
  if (alpha < T(0))
    throw DataError("combined_loss: negative alpha " + std::to_string(alpha));
  return l0 + alpha * lstab;
}

// L = mu * L0(clean) + (1 - mu) * L0(adversarial)
template <typename T>
T adversarial_objective(T l0_clean, T l0_adv, T mu) {
  if (mu < T(0) || mu > T(1))
    throw DataError("adversarial_objective: mu " + std::to_string(mu) +
                    " outside [0,1]");
  return mu * l0_clean + (T(1) - mu) * l0_adv;
}

// ---- graph losses on logits (batch mean) ----

// Mean cross-entropy of [N,C] logits against integer labels, via
// log-softmax.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits,
                               const std::vector<std::size_t>& labels) {
  return nll_loss(log_softmax(logits), labels);
}

// Batch-mean KL(softmax(logits_p) || softmax(logits_q)). Gradients flow
// through both branches; detach a branch before calling to block it.
template <typename T>
Tensor<T> kl_divergence_logits(const Tensor<T>& logits_p,
                               const Tensor<T>& logits_q) {
  detail::require_same_shape("kl_divergence_logits", logits_p, logits_q);
  if (logits_p.shape().size() != 2)
    throw ShapeError("kl_divergence_logits: expects [N,C], got " +
                     shape_str(logits_p.shape()));
  const T n = static_cast<T>(logits_p.shape()[0]);
  auto lp = log_softmax(logits_p);
  auto lq = log_softmax(logits_q);
  auto p = exp_op(lp);
  return scale(sum_all(mul(p, sub(lp, lq))), T(1) / n);
}

// Batch-mean stability loss on logits of the clean and perturbed branches.
// `block_reference` detaches the clean branch (off by default).
template <typename T>
Tensor<T> stability_loss_logits(const Tensor<T>& logits_clean,
                                const Tensor<T>& logits_pert, bool symmetric,
                                bool block_reference = false) {
  Tensor<T> ref = block_reference ? logits_clean.detached() : logits_clean;
  if (!symmetric) return kl_divergence_logits(ref, logits_pert);
  auto a = kl_divergence_logits(ref, logits_pert);
  auto b = kl_divergence_logits(logits_pert, ref);
  return scale(add(a, b), T(0.5));
}

}  // namespace stabletrain
