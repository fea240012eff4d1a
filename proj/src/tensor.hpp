#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace headpatch {

// Dense 64-bit float tensor with an optional gradient buffer. Values are
// written once by the operation that creates the tensor; parameter updates
// (optimizer steps, initializers) go through mutable_values() outside any
// recording scope.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return data_ != nullptr; }
    const std::vector<int>& shape() const;
    int rank() const;
    int dim(int i) const;
    std::size_t size() const;  // number of elements

    bool requires_grad() const;
    void set_requires_grad(bool flag);

    std::span<const double> values() const;
    std::span<double> mutable_values();

    bool has_grad() const;
    std::span<const double> grad() const;  // allocates lazily on first access
    std::span<double> mutable_grad();
    void zero_grad();

    double item() const;  // value of a one-element tensor

    std::string shape_string() const;

    // Identity of the underlying buffer; two handles to the same storage
    // compare equal.
    bool same_storage(const Tensor& other) const { return data_ == other.data_; }

private:
    struct Data;
    std::shared_ptr<Data> data_;

    friend class Tape;
    friend struct TensorOps;
};

// Records primitive operations during a forward pass so backward() can replay
// their adjoint rules in exact reverse order. A Tape activates itself for the
// constructing thread and restores the previous tape on destruction; taping is
// confined to one logical execution context.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    static Tape* active();

private:
    struct Node {
        std::function<void()> backward;
    };
    std::vector<Node> nodes_;
    Tape* previous_ = nullptr;

    friend struct TensorOps;
    friend void backward(const Tensor&);
};

// Suspends recording for the current thread (RAII). Used for pure evaluation
// inside a training step and to keep the finite-difference oracle independent
// of the tape machinery.
class TapeSuspend {
public:
    TapeSuspend();
    ~TapeSuspend();
    TapeSuspend(const TapeSuspend&) = delete;
    TapeSuspend& operator=(const TapeSuspend&) = delete;

private:
    Tape* saved_;
};

// ---- Differentiable primitives -------------------------------------------
// Each op validates shapes, computes the forward value, and, when a tape is
// active and an input requires grad, records the adjoint rule.

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);

// 2-D transpose.
Tensor transpose(const Tensor& x);

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double c);

// x: [n x d], row: [d]; adds row to every row of x.
Tensor add_rows(const Tensor& x, const Tensor& row);

// Softmax over the last dimension, max-subtracted for stability.
Tensor softmax_lastdim(const Tensor& x);

// Per-row normalization over the last dimension: gain * (x - mean) / sqrt(var + eps) + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// Gaussian error linear unit, tanh approximation:
//   0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))
Tensor gelu(const Tensor& x);

// table: [v x d], ids in [0, v); returns [ids.size() x d]. Repeated ids
// accumulate gradient into the same table row.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// Row i of a 2-D tensor as [1 x d].
Tensor row(const Tensor& x, int i);

// Sum of all elements as a scalar.
Tensor sum(const Tensor& x);

// Binary cross-entropy from the raw logit, computed in log-space so the value
// and gradient stay finite for any logit. Matches bce_loss(sigmoid(z), y).
Tensor bce_from_logit(const Tensor& logit, int label);

// Runs backward over the active tape from a scalar loss, accumulating into the
// grad buffer of every requires_grad tensor reachable from it. Repeated calls
// without zero_grad accumulate.
void backward(const Tensor& loss);

// ---- Finite-difference oracle --------------------------------------------

// Central differences (f(x + h e_i) - f(x - h e_i)) / (2h) per coordinate.
// f runs with taping suspended, so the oracle shares nothing with backward().
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero gradients from
// inflating the ratio; 1e-3 still flags any real adjoint bug.
double gradcheck_rel_err(double analytic, double numeric, double floor = 1e-3);

}  // namespace headpatch
