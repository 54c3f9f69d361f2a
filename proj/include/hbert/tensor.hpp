#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "hbert/rng.hpp"

namespace hbert {

using Shape = std::vector<std::size_t>;
using Mask = std::vector<std::uint8_t>;  // 1 = active, 0 = masked out

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized on first use
    bool requires_grad = false;

    // Backprop record. Present only between a recorded forward op and the
    // next backward(); backward() clears both fields.
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;

    std::size_t size() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

// Dense row-major tensor of 64-bit floats. Value-semantic handle to a shared
// node; ops build a define-by-run tape that backward() consumes.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    std::vector<double>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    }

    // Value of a single-element tensor.
    double item() const;

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Thread-local switch: when disabled, ops compute values but record nothing.
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// ---- elementwise and shape ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// x: [..., d] plus a length-d row vector broadcast over leading dims.
Tensor add_rowvec(const Tensor& x, const Tensor& bias);
Tensor sum(const Tensor& x);  // -> scalar
Tensor slice_rows(const Tensor& x, std::size_t row_begin, std::size_t row_end);
Tensor concat_rows(const std::vector<Tensor>& parts);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]

// ---- nonlinearities ----
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor leaky_relu(const Tensor& x, double slope = 0.2);

// ---- normalization / attention building blocks ----
// Row softmax over the last dimension with max-subtraction. Masked entries
// are exactly zero in the output and receive zero gradient. Throws
// AllMaskedRow when a row has no active entry.
Tensor softmax_rows(const Tensor& x, const Mask* mask = nullptr);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// ---- embedding / regularization / pooling ----
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);
// Mean over rows of x[n,d] where row_mask is 1; -> [d].
Tensor mean_pool(const Tensor& x, const Mask& row_mask);

// ---- losses ----
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);
// logits [n,V]; mean cross entropy over positions with loss_mask set.
// With zero masked positions the result is a constant 0 (no gradient).
Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int>& target_ids,
                            const Mask& loss_mask);

// ---- fused attention kernels ----

// Copy of attention probabilities (pre-dropout), for inspection in tests.
struct AttnProbe {
    std::size_t batch = 0, seq_len = 0, n_heads = 0;
    // [batch, head, query, key] row-major
    std::vector<double> alpha;
    double& at(std::size_t b, std::size_t h, std::size_t q, std::size_t k) {
        return alpha[((b * n_heads + h) * seq_len + q) * seq_len + k];
    }
};

// Multi-head scaled dot-product self-attention over a padded batch.
// q, k, v: [batch*seq_len, d]; key_mask: batch*seq_len bytes, 1 = real token.
// Attention to masked keys is exactly zero. Returns [batch*seq_len, d] with
// heads concatenated. Dropout (training only) applies to the probabilities.
Tensor attention_context(const Tensor& q, const Tensor& k, const Tensor& v,
                         std::size_t batch, std::size_t seq_len, std::size_t n_heads,
                         const Mask& key_mask, double dropout_p, Rng* rng, bool training,
                         AttnProbe* probe = nullptr);

// Pairwise additive attention logits: e[i,j] = sum_d a[d] * lrelu(p[i,d] + q[j,d]).
// The nonlinearity sits between the sum and the dot product with `a`, which is
// what makes the resulting rankings query-dependent.
Tensor gat_scores(const Tensor& p, const Tensor& q, const Tensor& a, double slope = 0.2);

// ---- backward ----
// Reverse-mode sweep from a scalar loss; populates .grad() of every
// reachable tensor that requires grad, then clears the tape.
void backward(const Tensor& loss);

}  // namespace hbert
