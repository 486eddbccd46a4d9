#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "radlads/tensor.hpp"

namespace radlads {

// A value in the computation graph. Gradients are accumulated (+=), never
// overwritten; zero_grad drops the buffer.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;

    bool has_grad() const { return grad.numel() == value.numel() && grad.defined(); }
    void accum_grad(const Tensor& delta);
    void zero_grad() { grad = Tensor{}; }
};

using Var = std::shared_ptr<Node>;

Var make_var(Tensor value, bool requires_grad = false);
inline Var constant(Tensor value) { return make_var(std::move(value), false); }

// Ordered record of executed primitives. Replaying the recorded adjoints in
// reverse order yields gradients for every reachable node.
class Tape {
public:
    static Tape* current();

    // activates a tape for the enclosing scope
    struct Scope {
        explicit Scope(Tape& t);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    void record(std::vector<Var> outputs, std::function<void()> backward_fn);
    void backward_from(const Var& loss);
    size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

private:
    struct Entry {
        std::vector<Var> outputs;
        std::function<void()> backward_fn;
    };
    std::vector<Entry> entries_;
};

// backward on the active tape; hard error when no tape is active or the loss
// is not scalar
void backward(const Var& loss);

// ---------------------------------------------------------------------------
// trainable parameters

enum class ParamGroup : uint8_t { main, att };

struct Parameter {
    std::string name;
    Var node;
    ParamGroup group = ParamGroup::main;
    bool trainable = true;
    bool is_decay = false;       // decay adapters (step-3a unfreeze set)
    bool is_tokenshift = false;  // ddlerp/tokenshift params (step-3a unfreeze set)

    Tensor& value() { return node->value; }
    const Tensor& value() const { return node->value; }
    Tensor& grad() { return node->grad; }
    void zero_grad() { node->zero_grad(); }
};

using ParamPtr = std::shared_ptr<Parameter>;

ParamPtr make_param(std::string name, Tensor value, ParamGroup group);

// ---------------------------------------------------------------------------
// primitive operations (all recorded on the active tape)

Var matmul(const Var& a, const Var& b);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var lerp(const Var& a, const Var& b, const Var& x);  // a + (b-a) .* x
Var neg(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var scale(const Var& x, double c);
Var add_scalar(const Var& x, double c);
Var max_scalar(const Var& x, double c);

enum class EwOp { add, sub, mul, sigmoid, tanh, exp, neg, max_scalar, scale, lerp };
// uniform entry point; c is the constant for max_scalar/scale
Var elementwise(EwOp op, const std::vector<Var>& args, double c = 0.0);

enum class ReduceOp { sum, mean, l2norm };
// axis = nullopt reduces all elements to a scalar
Var reduce(ReduceOp op, const Var& x, std::optional<int> axis = std::nullopt);
Var reduce_sum(const Var& x, std::optional<int> axis = std::nullopt);
Var reduce_mean(const Var& x, std::optional<int> axis = std::nullopt);
Var reduce_l2norm(const Var& x, std::optional<int> axis = std::nullopt);

Var reshape(const Var& x, Shape shape);
Var swap_axes(const Var& x, int axis_a, int axis_b);
Var gather_rows(const Var& table, const std::vector<int32_t>& ids);
// x: [..., V]; ids has numel(x)/V entries; picks one element per row
Var take_last(const Var& x, const std::vector<int32_t>& ids);
// [..., T, D]: row t of the output holds row t-1 of the input; row 0 is zeros
Var tokenshift_prev(const Var& x);
// [..., h_kv, d] -> [..., h_kv*group, d]; output head q reads input head q/group
Var repeat_kv_heads(const Var& x, int group);

Var log_softmax_last(const Var& x);
// [..., T, T]: per-row softmax over columns 0..row (strict causal mask)
Var causal_softmax(const Var& scores);
// [..., T, h, d]: pairwise rotation, angle = (t + pos_offset) * base^(-2i/d)
Var rope(const Var& x, double base, int64_t pos_offset);
Var rms_norm(const Var& x, const Var& gamma, double eps);
// gamma/beta shapes must be a trailing suffix of x's shape
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
// per last-axis row x/||x||; rows with norm < zero_floor map to zero
Var l2_normalize_last(const Var& x, double zero_floor);

struct ScanOut {
    Var p;      // [B,T,h,d]
    Var state;  // [B,h,d,d]
};
// wkv_t = diag(w_t) wkv_{t-1} + k_t^T v_t;  p_t = r_t wkv_t
ScanOut wkv6_scan(const Var& w, const Var& k, const Var& v, const Var& r, const Var& s0);
// wkv_t = wkv_{t-1} (diag(w_t) - kappa_t^T (a_t .* kappa_t)) + v_t^T kt_t;  p_t = r_t wkv_t^T
ScanOut wkv7_scan(const Var& w, const Var& kt, const Var& kappa, const Var& a, const Var& v,
                  const Var& r, const Var& s0);

// ---------------------------------------------------------------------------
// finite-difference gradient checking (float64 only)

// Evaluates max over sampled parameter entries of
//   |analytic - (f(th+eps) - f(th-eps)) / (2 eps)| / max(1e-8, |analytic|).
// samples_per_param < 0 checks every entry. NaN anywhere reports +inf.
double grad_check(const std::function<Var()>& f, const std::vector<ParamPtr>& params, double eps,
                  int samples_per_param = -1, uint64_t seed = 12345);

}  // namespace radlads
