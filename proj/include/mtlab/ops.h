#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "mtlab/tensor.h"

namespace mtlab {

// Differentiable primitives. Every function records a backward closure when
// any input requires grad; otherwise it is a plain forward computation.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x: [..., d], bias: [d]; bias added to every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
// Normalises over the last dimension.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Mean NLL over rows whose target != ignore_id.
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, TokenId ignore_id);
Tensor sum(const Tensor& x);
// Gathers rows of `table` ([V x d]) -> [ids.size() x d].
Tensor embedding(const Tensor& table, std::span<const TokenId> ids);
// Inverted dropout; rate 0 returns x unchanged.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

// Per-row log-softmax of a matrix, no autodiff (decoding helper).
std::vector<double> log_softmax_row(std::span<const double> row);

// Boolean visibility for a batch of attention problems: allowed(b, i, j) says
// whether query i of item b may attend to key j.
class AttentionMask {
 public:
  AttentionMask(std::size_t batch, std::size_t q_len, std::size_t k_len, bool fill = true);

  // Keys at positions >= key_lengths[b] are hidden. Optionally causal (j <= i).
  static AttentionMask padded(std::span<const std::size_t> key_lengths, std::size_t q_len,
                              std::size_t k_len, bool causal);

  std::size_t batch() const { return batch_; }
  std::size_t q_len() const { return q_len_; }
  std::size_t k_len() const { return k_len_; }
  bool allowed(std::size_t b, std::size_t i, std::size_t j) const {
    return bits_[(b * q_len_ + i) * k_len_ + j] != 0;
  }
  void set(std::size_t b, std::size_t i, std::size_t j, bool allowed) {
    bits_[(b * q_len_ + i) * k_len_ + j] = allowed ? 1 : 0;
  }

 private:
  std::size_t batch_, q_len_, k_len_;
  std::vector<std::uint8_t> bits_;
};

// Scaled dot-product attention: softmax(Q K^T / sqrt(d_k), masked) V.
// q: [n x d_k], k: [m x d_k], v: [m x d_v], mask: 1 x n x m.
// Throws if some query row has no visible key.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask);

// Batched multi-head form. q: [B*Tq x d], k, v: [B*Tk x d], rows grouped per
// batch item; heads split d into equal contiguous column blocks.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const AttentionMask& mask);

}  // namespace mtlab
