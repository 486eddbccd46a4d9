#include "radlads/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace radlads {

namespace {

thread_local Tape* g_current_tape = nullptr;

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;

bool want_grad(std::initializer_list<Var> ins) {
    if (!Tape::current()) return false;
    for (const auto& v : ins)
        if (v && v->requires_grad) return true;
    return false;
}

// -------------------------------------------------------------------------
// broadcast machinery (right-aligned, extent-1 expansion)

struct Bcast {
    Shape out;
    std::vector<int64_t> stride_a;
    std::vector<int64_t> stride_b;
};

std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

Bcast broadcast_shapes(const Shape& a, const Shape& b, const char* opname) {
    const int ra = static_cast<int>(a.size());
    const int rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    Bcast bc;
    bc.out.resize(static_cast<size_t>(r));
    const auto sa = row_major_strides(a);
    const auto sb = row_major_strides(b);
    bc.stride_a.assign(static_cast<size_t>(r), 0);
    bc.stride_b.assign(static_cast<size_t>(r), 0);
    for (int i = 0; i < r; ++i) {
        const int ia = ra - r + i;
        const int ib = rb - r + i;
        const int64_t ea = ia >= 0 ? a[static_cast<size_t>(ia)] : 1;
        const int64_t eb = ib >= 0 ? b[static_cast<size_t>(ib)] : 1;
        if (ea != eb && ea != 1 && eb != 1)
            fail(opname, ": shapes ", shape_str(a), " and ", shape_str(b),
                 " are not broadcast-compatible");
        bc.out[static_cast<size_t>(i)] = std::max(ea, eb);
        if (ia >= 0 && ea != 1) bc.stride_a[static_cast<size_t>(i)] = sa[static_cast<size_t>(ia)];
        if (ib >= 0 && eb != 1) bc.stride_b[static_cast<size_t>(i)] = sb[static_cast<size_t>(ib)];
    }
    return bc;
}

// walks every output element of a broadcast binary op, calling f(oi, ai, bi)
template <class F>
void bcast_for_each(const Bcast& bc, F&& f) {
    const int r = static_cast<int>(bc.out.size());
    const int64_t n = shape_numel(bc.out);
    if (n == 0) return;
    if (r == 0) {
        f(int64_t{0}, int64_t{0}, int64_t{0});
        return;
    }
    std::vector<int64_t> coord(static_cast<size_t>(r), 0);
    int64_t ai = 0, bi = 0;
    for (int64_t oi = 0; oi < n; ++oi) {
        f(oi, ai, bi);
        for (int ax = r - 1; ax >= 0; --ax) {
            coord[static_cast<size_t>(ax)]++;
            ai += bc.stride_a[static_cast<size_t>(ax)];
            bi += bc.stride_b[static_cast<size_t>(ax)];
            if (coord[static_cast<size_t>(ax)] < bc.out[static_cast<size_t>(ax)]) break;
            ai -= bc.stride_a[static_cast<size_t>(ax)] * bc.out[static_cast<size_t>(ax)];
            bi -= bc.stride_b[static_cast<size_t>(ax)] * bc.out[static_cast<size_t>(ax)];
            coord[static_cast<size_t>(ax)] = 0;
        }
    }
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* opname) {
    check(a.dtype() == b.dtype(), opname, ": dtype mismatch (", dtype_name(a.dtype()), " vs ",
          dtype_name(b.dtype()), ")");
}

template <class T, class F>
void ew_binary_kernel(const Tensor& a, const Tensor& b, Tensor& out, const Bcast& bc, F f) {
    auto pa = a.data<T>();
    auto pb = b.data<T>();
    auto po = out.data<T>();
    if (a.shape() == b.shape()) {  // fast path
        for (size_t i = 0; i < po.size(); ++i) po[i] = f(pa[i], pb[i]);
        return;
    }
    bcast_for_each(bc, [&](int64_t oi, int64_t ai, int64_t bi) {
        po[static_cast<size_t>(oi)] =
            f(pa[static_cast<size_t>(ai)], pb[static_cast<size_t>(bi)]);
    });
}

template <class F>
Tensor ew_binary(const Tensor& a, const Tensor& b, const char* opname, F f) {
    check_same_dtype(a, b, opname);
    const Bcast bc = broadcast_shapes(a.shape(), b.shape(), opname);
    Tensor out = Tensor::zeros(bc.out, a.dtype());
    with_dtype(a.dtype(), [&]<class T>(T) { ew_binary_kernel<T>(a, b, out, bc, f); });
    return out;
}

template <class F>
Tensor ew_unary(const Tensor& x, F f) {
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    with_dtype(x.dtype(), [&]<class T>(T) {
        auto px = x.data<T>();
        auto po = out.data<T>();
        for (size_t i = 0; i < po.size(); ++i) po[i] = static_cast<T>(f(static_cast<double>(px[i])));
    });
    return out;
}

// sums a broadcast-shaped gradient back down to the operand's shape
Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
    if (g.shape() == target) return g;
    Tensor out = Tensor::zeros(target, g.dtype());
    const Bcast bc = broadcast_shapes(target, g.shape(), "reduce_to_shape");
    check(bc.out == g.shape(), "reduce_to_shape: grad shape ", shape_str(g.shape()),
          " incompatible with ", shape_str(target));
    with_dtype(g.dtype(), [&]<class T>(T) {
        auto pg = g.data<T>();
        auto po = out.data<T>();
        bcast_for_each(bc, [&](int64_t gi, int64_t oi, int64_t gi2) {
            (void)gi2;
            po[static_cast<size_t>(oi)] += pg[static_cast<size_t>(gi)];
        });
    });
    return out;
}

void accum_into(const Var& v, const Tensor& delta_bcast_shape) {
    if (!v->requires_grad) return;
    v->accum_grad(reduce_to_shape(delta_bcast_shape, v->value.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Node / Tape

void Node::accum_grad(const Tensor& delta) {
    check(delta.shape() == value.shape(), "grad shape ", shape_str(delta.shape()),
          " != value shape ", shape_str(value.shape()));
    if (!has_grad()) {
        grad = delta.clone();
        return;
    }
    with_dtype(value.dtype(), [&]<class T>(T) {
        auto pg = grad.data<T>();
        auto pd = delta.data<T>();
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += pd[i];
    });
}

Var make_var(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

ParamPtr make_param(std::string name, Tensor value, ParamGroup group) {
    auto p = std::make_shared<Parameter>();
    p->name = std::move(name);
    p->node = make_var(std::move(value), true);
    p->group = group;
    return p;
}

Tape* Tape::current() { return g_current_tape; }

Tape::Scope::Scope(Tape& t) : prev_(g_current_tape) { g_current_tape = &t; }
Tape::Scope::~Scope() { g_current_tape = prev_; }

void Tape::record(std::vector<Var> outputs, std::function<void()> backward_fn) {
    entries_.push_back({std::move(outputs), std::move(backward_fn)});
}

void Tape::backward_from(const Var& loss) {
    check(loss != nullptr, "backward: null loss");
    check(loss->value.numel() == 1, "backward: loss must be scalar, got shape ",
          shape_str(loss->value.shape()));
    // intermediate grads are per-pass scratch; parameter grads accumulate across passes
    for (auto& e : entries_)
        for (auto& o : e.outputs) o->zero_grad();
    loss->accum_grad(Tensor::full(loss->value.shape(), 1.0, loss->value.dtype()));
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward_fn();
}

void backward(const Var& loss) {
    Tape* t = Tape::current();
    if (!t) fail("backward: no active tape");
    t->backward_from(loss);
}

// ---------------------------------------------------------------------------
// matmul

Var matmul(const Var& a, const Var& b) {
    const Tensor& ta = a->value;
    const Tensor& tb = b->value;
    check_same_dtype(ta, tb, "matmul");
    check(ta.rank() >= 2 && tb.rank() >= 2, "matmul: ranks must be >= 2, got ",
          shape_str(ta.shape()), " x ", shape_str(tb.shape()));
    const int64_t m = ta.dim(-2), k = ta.dim(-1);
    const int64_t kb = tb.dim(-2), n = tb.dim(-1);
    if (k != kb)
        fail("matmul: inner extents differ: ", shape_str(ta.shape()), " x ", shape_str(tb.shape()));
    const bool shared_b = tb.rank() == 2;
    int64_t batch = 1;
    Shape out_shape;
    if (shared_b) {
        out_shape = ta.shape();
        out_shape.back() = n;
        batch = ta.numel() / (m * k);
    } else {
        check(ta.rank() == tb.rank(), "matmul: batched ranks differ: ", shape_str(ta.shape()),
              " x ", shape_str(tb.shape()));
        for (int i = 0; i < ta.rank() - 2; ++i)
            check(ta.dim(i) == tb.dim(i), "matmul: batch dims differ: ", shape_str(ta.shape()),
                  " x ", shape_str(tb.shape()));
        out_shape = ta.shape();
        out_shape.back() = n;
        batch = ta.numel() / (m * k);
    }
    Tensor tc = Tensor::zeros(out_shape, ta.dtype());
    with_dtype(ta.dtype(), [&]<class T>(T) {
        const T* pa = ta.data<T>().data();
        const T* pb = tb.data<T>().data();
        T* pc = tc.data<T>().data();
        if (shared_b) {
            ECMap<T> A(pa, batch * m, k);
            ECMap<T> B(pb, k, n);
            EMap<T> C(pc, batch * m, n);
            C.noalias() = A * B;
        } else {
            for (int64_t i = 0; i < batch; ++i) {
                ECMap<T> A(pa + i * m * k, m, k);
                ECMap<T> B(pb + i * k * n, k, n);
                EMap<T> C(pc + i * m * n, m, n);
                C.noalias() = A * B;
            }
        }
    });

    Var out = make_var(std::move(tc));
    if (want_grad({a, b})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [a, b, out, m, k, n, batch, shared_b]() {
            if (!out->has_grad()) return;
            const Tensor& g = out->grad;
            with_dtype(g.dtype(), [&]<class T>(T) {
                const T* pg = g.data<T>().data();
                const T* pa = a->value.data<T>().data();
                const T* pb = b->value.data<T>().data();
                if (a->requires_grad) {
                    Tensor da = Tensor::zeros(a->value.shape(), g.dtype());
                    T* pda = da.data<T>().data();
                    if (shared_b) {
                        ECMap<T> G(pg, batch * m, n);
                        ECMap<T> B(pb, k, n);
                        EMap<T> DA(pda, batch * m, k);
                        DA.noalias() = G * B.transpose();
                    } else {
                        for (int64_t i = 0; i < batch; ++i) {
                            ECMap<T> G(pg + i * m * n, m, n);
                            ECMap<T> B(pb + i * k * n, k, n);
                            EMap<T> DA(pda + i * m * k, m, k);
                            DA.noalias() = G * B.transpose();
                        }
                    }
                    a->accum_grad(da);
                }
                if (b->requires_grad) {
                    Tensor db = Tensor::zeros(b->value.shape(), g.dtype());
                    T* pdb = db.data<T>().data();
                    if (shared_b) {
                        ECMap<T> G(pg, batch * m, n);
                        ECMap<T> A(pa, batch * m, k);
                        EMap<T> DB(pdb, k, n);
                        DB.noalias() = A.transpose() * G;
                    } else {
                        for (int64_t i = 0; i < batch; ++i) {
                            ECMap<T> G(pg + i * m * n, m, n);
                            ECMap<T> A(pa + i * m * k, m, k);
                            EMap<T> DB(pdb + i * k * n, k, n);
                            DB.noalias() = A.transpose() * G;
                        }
                    }
                    b->accum_grad(db);
                }
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var& a, const Var& b) {
    Tensor val = ew_binary(a->value, b->value, "add", [](auto x, auto y) { return x + y; });
    Var out = make_var(std::move(val));
    if (want_grad({a, b})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [a, b, out]() {
            if (!out->has_grad()) return;
            accum_into(a, out->grad);
            accum_into(b, out->grad);
        });
    }
    return out;
}

Var sub(const Var& a, const Var& b) {
    Tensor val = ew_binary(a->value, b->value, "sub", [](auto x, auto y) { return x - y; });
    Var out = make_var(std::move(val));
    if (want_grad({a, b})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [a, b, out]() {
            if (!out->has_grad()) return;
            accum_into(a, out->grad);
            accum_into(b, ew_unary(out->grad, [](double g) { return -g; }));
        });
    }
    return out;
}

Var mul(const Var& a, const Var& b) {
    Tensor val = ew_binary(a->value, b->value, "mul", [](auto x, auto y) { return x * y; });
    Var out = make_var(std::move(val));
    if (want_grad({a, b})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [a, b, out]() {
            if (!out->has_grad()) return;
            if (a->requires_grad)
                accum_into(a, ew_binary(out->grad, b->value, "mul_bw",
                                        [](auto g, auto y) { return g * y; }));
            if (b->requires_grad)
                accum_into(b, ew_binary(out->grad, a->value, "mul_bw",
                                        [](auto g, auto x) { return g * x; }));
        });
    }
    return out;
}

Var lerp(const Var& a, const Var& b, const Var& x) {
    // a + (b - a) .* x, recorded through its constituent primitives
    return add(a, mul(sub(b, a), x));
}

namespace {

template <class FwdF, class BwdF>
Var unary_op(const Var& x, FwdF fwd, BwdF bwd_from_in_out) {
    Tensor val = ew_unary(x->value, fwd);
    Var out = make_var(std::move(val));
    if (want_grad({x})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [x, out, bwd_from_in_out]() {
            if (!out->has_grad()) return;
            Tensor dx = Tensor::zeros(x->value.shape(), x->value.dtype());
            with_dtype(dx.dtype(), [&]<class T>(T) {
                auto pg = out->grad.data<T>();
                auto pi = x->value.data<T>();
                auto po = out->value.data<T>();
                auto pd = dx.data<T>();
                for (size_t i = 0; i < pd.size(); ++i)
                    pd[i] = static_cast<T>(static_cast<double>(pg[i]) *
                                           bwd_from_in_out(static_cast<double>(pi[i]),
                                                           static_cast<double>(po[i])));
            });
            x->accum_grad(dx);
        });
    }
    return out;
}

}  // namespace

Var neg(const Var& x) {
    return unary_op(
        x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Var sigmoid(const Var& x) {
    return unary_op(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& x) {
    return unary_op(
        x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(const Var& x) {
    return unary_op(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(const Var& x) {
    return unary_op(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sqrt(const Var& x) {
    return unary_op(
        x, [](double v) { return std::sqrt(v); },
        [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var scale(const Var& x, double c) {
    return unary_op(
        x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Var add_scalar(const Var& x, double c) {
    return unary_op(
        x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var max_scalar(const Var& x, double c) {
    return unary_op(
        x, [c](double v) { return v > c ? v : c; },
        [c](double v, double) { return v > c ? 1.0 : 0.0; });
}

Var elementwise(EwOp op, const std::vector<Var>& args, double c) {
    auto need = [&](size_t n) {
        check(args.size() == n, "elementwise: expected ", n, " args, got ", args.size());
    };
    switch (op) {
        case EwOp::add: need(2); return add(args[0], args[1]);
        case EwOp::sub: need(2); return sub(args[0], args[1]);
        case EwOp::mul: need(2); return mul(args[0], args[1]);
        case EwOp::sigmoid: need(1); return sigmoid(args[0]);
        case EwOp::tanh: need(1); return tanh(args[0]);
        case EwOp::exp: need(1); return exp(args[0]);
        case EwOp::neg: need(1); return neg(args[0]);
        case EwOp::max_scalar: need(1); return max_scalar(args[0], c);
        case EwOp::scale: need(1); return scale(args[0], c);
        case EwOp::lerp: need(3); return lerp(args[0], args[1], args[2]);
    }
    fail("elementwise: unknown op");
}

// ---------------------------------------------------------------------------
// reductions

namespace {

// decomposes a shape around one axis: [lead, extent, trail]
struct AxisSplit {
    int64_t lead = 1, extent = 1, trail = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
    const int r = static_cast<int>(s.size());
    if (axis < 0) axis += r;
    check(axis >= 0 && axis < r, "reduce: axis out of range for shape ", shape_str(s));
    AxisSplit sp;
    for (int i = 0; i < axis; ++i) sp.lead *= s[static_cast<size_t>(i)];
    sp.extent = s[static_cast<size_t>(axis)];
    for (int i = axis + 1; i < r; ++i) sp.trail *= s[static_cast<size_t>(i)];
    check(sp.extent > 0, "reduce: cannot reduce empty axis of shape ", shape_str(s));
    return sp;
}

Shape drop_axis(const Shape& s, int axis) {
    const int r = static_cast<int>(s.size());
    if (axis < 0) axis += r;
    Shape out;
    for (int i = 0; i < r; ++i)
        if (i != axis) out.push_back(s[static_cast<size_t>(i)]);
    return out;
}

}  // namespace

Var reduce_sum(const Var& x, std::optional<int> axis) {
    const Tensor& tx = x->value;
    Tensor val;
    if (!axis) {
        double s = 0.0;
        for (int64_t i = 0; i < tx.numel(); ++i) s += tx.item_at(i);
        val = Tensor::scalar(s, tx.dtype());
    } else {
        const AxisSplit sp = split_axis(tx.shape(), *axis);
        val = Tensor::zeros(drop_axis(tx.shape(), *axis), tx.dtype());
        with_dtype(tx.dtype(), [&]<class T>(T) {
            auto px = tx.data<T>();
            auto po = val.data<T>();
            for (int64_t l = 0; l < sp.lead; ++l)
                for (int64_t e = 0; e < sp.extent; ++e)
                    for (int64_t t = 0; t < sp.trail; ++t)
                        po[static_cast<size_t>(l * sp.trail + t)] +=
                            px[static_cast<size_t>((l * sp.extent + e) * sp.trail + t)];
        });
    }
    Var out = make_var(std::move(val));
    if (want_grad({x})) {
        out->requires_grad = true;
        auto ax = axis;
        Tape::current()->record({out}, [x, out, ax]() {
            if (!out->has_grad()) return;
            Tensor dx = Tensor::zeros(x->value.shape(), x->value.dtype());
            if (!ax) {
                dx.fill(out->grad.item());
            } else {
                const AxisSplit sp = split_axis(x->value.shape(), *ax);
                with_dtype(dx.dtype(), [&]<class T>(T) {
                    auto pg = out->grad.data<T>();
                    auto pd = dx.data<T>();
                    for (int64_t l = 0; l < sp.lead; ++l)
                        for (int64_t e = 0; e < sp.extent; ++e)
                            for (int64_t t = 0; t < sp.trail; ++t)
                                pd[static_cast<size_t>((l * sp.extent + e) * sp.trail + t)] =
                                    pg[static_cast<size_t>(l * sp.trail + t)];
                });
            }
            x->accum_grad(dx);
        });
    }
    return out;
}

Var reduce_mean(const Var& x, std::optional<int> axis) {
    const int64_t n = axis ? split_axis(x->value.shape(), *axis).extent : x->value.numel();
    check(n > 0, "reduce_mean: empty tensor");
    return scale(reduce_sum(x, axis), 1.0 / static_cast<double>(n));
}

Var reduce_l2norm(const Var& x, std::optional<int> axis) {
    const Tensor& tx = x->value;
    Tensor val;
    if (!axis) {
        double s = 0.0;
        for (int64_t i = 0; i < tx.numel(); ++i) s += tx.item_at(i) * tx.item_at(i);
        val = Tensor::scalar(std::sqrt(s), tx.dtype());
    } else {
        const AxisSplit sp = split_axis(tx.shape(), *axis);
        val = Tensor::zeros(drop_axis(tx.shape(), *axis), tx.dtype());
        with_dtype(tx.dtype(), [&]<class T>(T) {
            auto px = tx.data<T>();
            auto po = val.data<T>();
            for (int64_t l = 0; l < sp.lead; ++l)
                for (int64_t e = 0; e < sp.extent; ++e)
                    for (int64_t t = 0; t < sp.trail; ++t) {
                        const T v = px[static_cast<size_t>((l * sp.extent + e) * sp.trail + t)];
                        po[static_cast<size_t>(l * sp.trail + t)] += v * v;
                    }
            for (auto& v : po) v = static_cast<T>(std::sqrt(static_cast<double>(v)));
        });
    }
    Var out = make_var(std::move(val));
    if (want_grad({x})) {
        out->requires_grad = true;
        auto ax = axis;
        // d||x||/dx = x/||x||; zero vectors get subgradient 0
        Tape::current()->record({out}, [x, out, ax]() {
            if (!out->has_grad()) return;
            Tensor dx = Tensor::zeros(x->value.shape(), x->value.dtype());
            with_dtype(dx.dtype(), [&]<class T>(T) {
                auto px = x->value.data<T>();
                auto pd = dx.data<T>();
                auto pn = out->value.data<T>();
                auto pg = out->grad.data<T>();
                if (!ax) {
                    const double nrm = static_cast<double>(pn[0]);
                    const double g = static_cast<double>(pg[0]);
                    if (nrm > 0.0)
                        for (size_t i = 0; i < pd.size(); ++i)
                            pd[i] = static_cast<T>(g * static_cast<double>(px[i]) / nrm);
                } else {
                    const AxisSplit sp = split_axis(x->value.shape(), *ax);
                    for (int64_t l = 0; l < sp.lead; ++l)
                        for (int64_t t = 0; t < sp.trail; ++t) {
                            const size_t oi = static_cast<size_t>(l * sp.trail + t);
                            const double nrm = static_cast<double>(pn[oi]);
                            if (nrm <= 0.0) continue;
                            const double g = static_cast<double>(pg[oi]);
                            for (int64_t e = 0; e < sp.extent; ++e) {
                                const size_t xi =
                                    static_cast<size_t>((l * sp.extent + e) * sp.trail + t);
                                pd[xi] = static_cast<T>(g * static_cast<double>(px[xi]) / nrm);
                            }
                        }
                }
            });
            x->accum_grad(dx);
        });
    }
    return out;
}

Var reduce(ReduceOp op, const Var& x, std::optional<int> axis) {
    switch (op) {
        case ReduceOp::sum: return reduce_sum(x, axis);
        case ReduceOp::mean: return reduce_mean(x, axis);
        case ReduceOp::l2norm: return reduce_l2norm(x, axis);
    }
    fail("reduce: unknown op");
}

// ---------------------------------------------------------------------------
// structural ops

Var reshape(const Var& x, Shape shape) {
    Var out = make_var(x->value.reshaped(shape));
    if (want_grad({x})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [x, out]() {
            if (!out->has_grad()) return;
            x->accum_grad(out->grad.reshaped(x->value.shape()));
        });
    }
    return out;
}

namespace {

Tensor swap_axes_tensor(const Tensor& x, int a, int b) {
    const int r = x.rank();
    if (a < 0) a += r;
    if (b < 0) b += r;
    check(a >= 0 && a < r && b >= 0 && b < r, "swap_axes: axes out of range for ",
          shape_str(x.shape()));
    Shape os = x.shape();
    std::swap(os[static_cast<size_t>(a)], os[static_cast<size_t>(b)]);
    Tensor out = Tensor::zeros(os, x.dtype());
    if (a == b) return x.clone();
    const auto xs = row_major_strides(x.shape());
    std::vector<int64_t> istr(xs.size());
    for (int i = 0; i < r; ++i) istr[static_cast<size_t>(i)] = xs[static_cast<size_t>(i)];
    std::swap(istr[static_cast<size_t>(a)], istr[static_cast<size_t>(b)]);
    with_dtype(x.dtype(), [&]<class T>(T) {
        auto px = x.data<T>();
        auto po = out.data<T>();
        std::vector<int64_t> coord(static_cast<size_t>(r), 0);
        int64_t xi = 0;
        for (int64_t oi = 0; oi < out.numel(); ++oi) {
            po[static_cast<size_t>(oi)] = px[static_cast<size_t>(xi)];
            for (int ax = r - 1; ax >= 0; --ax) {
                coord[static_cast<size_t>(ax)]++;
                xi += istr[static_cast<size_t>(ax)];
                if (coord[static_cast<size_t>(ax)] < os[static_cast<size_t>(ax)]) break;
                xi -= istr[static_cast<size_t>(ax)] * os[static_cast<size_t>(ax)];
                coord[static_cast<size_t>(ax)] = 0;
            }
        }
    });
    return out;
}

}  // namespace

Var swap_axes(const Var& x, int axis_a, int axis_b) {
    Var out = make_var(swap_axes_tensor(x->value, axis_a, axis_b));
    if (want_grad({x})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [x, out, axis_a, axis_b]() {
            if (!out->has_grad()) return;
            x->accum_grad(swap_axes_tensor(out->grad, axis_a, axis_b));
        });
    }
    return out;
}

Var gather_rows(const Var& table, const std::vector<int32_t>& ids) {
    const Tensor& tt = table->value;
    check(tt.rank() == 2, "gather_rows: table must be rank 2, got ", shape_str(tt.shape()));
    const int64_t v = tt.dim(0), d = tt.dim(1);
    for (int32_t id : ids)
        check(id >= 0 && id < v, "gather_rows: id ", id, " out of range [0,", v, ")");
    Tensor val = Tensor::zeros({static_cast<int64_t>(ids.size()), d}, tt.dtype());
    const size_t row_bytes = static_cast<size_t>(d) * dtype_size(tt.dtype());
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(static_cast<char*>(val.raw_data()) + i * row_bytes,
                    static_cast<const char*>(tt.raw_data()) +
                        static_cast<size_t>(ids[i]) * row_bytes,
                    row_bytes);
    Var out = make_var(std::move(val));
    if (want_grad({table})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [table, out, ids, d]() {
            if (!out->has_grad()) return;
            Tensor dt = Tensor::zeros(table->value.shape(), table->value.dtype());
            with_dtype(dt.dtype(), [&]<class T>(T) {
                auto pg = out->grad.data<T>();
                auto pd = dt.data<T>();
                for (size_t i = 0; i < ids.size(); ++i)
                    for (int64_t j = 0; j < d; ++j)
                        pd[static_cast<size_t>(ids[i] * d + j)] +=
                            pg[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
            });
            table->accum_grad(dt);
        });
    }
    return out;
}

Var take_last(const Var& x, const std::vector<int32_t>& ids) {
    const Tensor& tx = x->value;
    check(tx.rank() >= 1, "take_last: needs rank >= 1");
    const int64_t v = tx.dim(-1);
    const int64_t rows = tx.numel() / v;
    check(static_cast<int64_t>(ids.size()) == rows, "take_last: ids count ", ids.size(),
          " != row count ", rows);
    Shape os(tx.shape().begin(), tx.shape().end() - 1);
    Tensor val = Tensor::zeros(os, tx.dtype());
    for (int64_t r = 0; r < rows; ++r) {
        const int32_t id = ids[static_cast<size_t>(r)];
        check(id >= 0 && id < v, "take_last: id ", id, " out of range [0,", v, ")");
        val.set_at(r, tx.item_at(r * v + id));
    }
    Var out = make_var(std::move(val));
    if (want_grad({x})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [x, out, ids, v, rows]() {
            if (!out->has_grad()) return;
            Tensor dx = Tensor::zeros(x->value.shape(), x->value.dtype());
            for (int64_t r = 0; r < rows; ++r)
                dx.set_at(r * v + ids[static_cast<size_t>(r)], out->grad.item_at(r));
            x->accum_grad(dx);
        });
    }
    return out;
}

Var tokenshift_prev(const Var& x) {
    const Tensor& tx = x->value;
    check(tx.rank() >= 2, "tokenshift_prev: needs rank >= 2, got ", shape_str(tx.shape()));
    const int64_t d = tx.dim(-1), t = tx.dim(-2);
    const int64_t batch = tx.numel() / (t * d);
    Tensor val = Tensor::zeros(tx.shape(), tx.dtype());
    const size_t row_bytes = static_cast<size_t>(d) * dtype_size(tx.dtype());
    for (int64_t b = 0; b < batch; ++b) {
        const char* src = static_cast<const char*>(tx.raw_data()) +
                          static_cast<size_t>(b * t * d) * dtype_size(tx.dtype());
        char* dst = static_cast<char*>(val.raw_data()) +
                    static_cast<size_t>(b * t * d) * dtype_size(tx.dtype());
        if (t > 1) std::memcpy(dst + row_bytes, src, static_cast<size_t>(t - 1) * row_bytes);
    }
    Var out = make_var(std::move(val));
    if (want_grad({x})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [x, out, batch, t, d]() {
            if (!out->has_grad()) return;
            Tensor dx = Tensor::zeros(x->value.shape(), x->value.dtype());
            with_dtype(dx.dtype(), [&]<class T>(T) {
                auto pg = out->grad.data<T>();
                auto pd = dx.data<T>();
                for (int64_t b = 0; b < batch; ++b)
                    for (int64_t row = 1; row < t; ++row)
                        for (int64_t j = 0; j < d; ++j)
                            pd[static_cast<size_t>((b * t + row - 1) * d + j)] +=
                                pg[static_cast<size_t>((b * t + row) * d + j)];
            });
            x->accum_grad(dx);
        });
    }
    return out;
}

Var repeat_kv_heads(const Var& x, int group) {
    check(group >= 1, "repeat_kv_heads: group must be >= 1");
    if (group == 1) return x;
    const Tensor& tx = x->value;
    check(tx.rank() >= 2, "repeat_kv_heads: needs rank >= 2");
    const int64_t d = tx.dim(-1), hkv = tx.dim(-2);
    const int64_t lead = tx.numel() / (hkv * d);
    Shape os = tx.shape();
    os[os.size() - 2] = hkv * group;
    Tensor val = Tensor::zeros(os, tx.dtype());
    const size_t row_bytes = static_cast<size_t>(d) * dtype_size(tx.dtype());
    for (int64_t l = 0; l < lead; ++l)
        for (int64_t h = 0; h < hkv; ++h)
            for (int64_t g = 0; g < group; ++g)
                std::memcpy(static_cast<char*>(val.raw_data()) +
                                static_cast<size_t>((l * hkv * group + h * group + g)) * row_bytes,
                            static_cast<const char*>(tx.raw_data()) +
                                static_cast<size_t>(l * hkv + h) * row_bytes,
                            row_bytes);
    Var out = make_var(std::move(val));
    if (want_grad({x})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [x, out, group, lead, hkv, d]() {
            if (!out->has_grad()) return;
            Tensor dx = Tensor::zeros(x->value.shape(), x->value.dtype());
            with_dtype(dx.dtype(), [&]<class T>(T) {
                auto pg = out->grad.data<T>();
                auto pd = dx.data<T>();
                for (int64_t l = 0; l < lead; ++l)
                    for (int64_t h = 0; h < hkv; ++h)
                        for (int64_t g = 0; g < group; ++g)
                            for (int64_t j = 0; j < d; ++j)
                                pd[static_cast<size_t>((l * hkv + h) * d + j)] +=
                                    pg[static_cast<size_t>(
                                        (l * hkv * group + h * group + g) * d + j)];
            });
            x->accum_grad(dx);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// fused NN ops

Var log_softmax_last(const Var& x) {
    const Tensor& tx = x->value;
    check(tx.rank() >= 1, "log_softmax_last: needs rank >= 1");
    const int64_t v = tx.dim(-1);
    const int64_t rows = tx.numel() / v;
    Tensor val = Tensor::zeros(tx.shape(), tx.dtype());
    with_dtype(tx.dtype(), [&]<class T>(T) {
        auto px = tx.data<T>();
        auto po = val.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px.data() + r * v;
            T* orow = po.data() + r * v;
            double mx = -1e300;
            for (int64_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
            double se = 0.0;
            for (int64_t j = 0; j < v; ++j) se += std::exp(static_cast<double>(xr[j]) - mx);
            const double lse = mx + std::log(se);
            for (int64_t j = 0; j < v; ++j)
                orow[j] = static_cast<T>(static_cast<double>(xr[j]) - lse);
        }
    });
    Var out = make_var(std::move(val));
    if (want_grad({x})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [x, out, rows, v]() {
            if (!out->has_grad()) return;
            Tensor dx = Tensor::zeros(x->value.shape(), x->value.dtype());
            with_dtype(dx.dtype(), [&]<class T>(T) {
                auto pg = out->grad.data<T>();
                auto py = out->value.data<T>();
                auto pd = dx.data<T>();
                for (int64_t r = 0; r < rows; ++r) {
                    double gsum = 0.0;
                    for (int64_t j = 0; j < v; ++j)
                        gsum += static_cast<double>(pg[static_cast<size_t>(r * v + j)]);
                    for (int64_t j = 0; j < v; ++j) {
                        const size_t i = static_cast<size_t>(r * v + j);
                        pd[i] = static_cast<T>(static_cast<double>(pg[i]) -
                                               std::exp(static_cast<double>(py[i])) * gsum);
                    }
                }
            });
            x->accum_grad(dx);
        });
    }
    return out;
}

Var causal_softmax(const Var& scores) {
    const Tensor& tx = scores->value;
    check(tx.rank() >= 2, "causal_softmax: needs rank >= 2");
    const int64_t tq = tx.dim(-2), tk = tx.dim(-1);
    check(tq == tk, "causal_softmax: last two extents must match, got ", shape_str(tx.shape()));
    const int64_t batch = tx.numel() / (tq * tk);
    Tensor val = Tensor::zeros(tx.shape(), tx.dtype());
    with_dtype(tx.dtype(), [&]<class T>(T) {
        auto px = tx.data<T>();
        auto po = val.data<T>();
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t i = 0; i < tq; ++i) {
                const T* xr = px.data() + (b * tq + i) * tk;
                T* orow = po.data() + (b * tq + i) * tk;
                double mx = -1e300;
                for (int64_t j = 0; j <= i; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
                double se = 0.0;
                for (int64_t j = 0; j <= i; ++j) se += std::exp(static_cast<double>(xr[j]) - mx);
                for (int64_t j = 0; j <= i; ++j)
                    orow[j] = static_cast<T>(std::exp(static_cast<double>(xr[j]) - mx) / se);
            }
    });
    Var out = make_var(std::move(val));
    if (want_grad({scores})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [scores, out, batch, tq, tk]() {
            if (!out->has_grad()) return;
            Tensor dx = Tensor::zeros(scores->value.shape(), scores->value.dtype());
            with_dtype(dx.dtype(), [&]<class T>(T) {
                auto pg = out->grad.data<T>();
                auto pp = out->value.data<T>();
                auto pd = dx.data<T>();
                for (int64_t b = 0; b < batch; ++b)
                    for (int64_t i = 0; i < tq; ++i) {
                        const size_t base = static_cast<size_t>((b * tq + i) * tk);
                        double dot = 0.0;
                        for (int64_t j = 0; j <= i; ++j)
                            dot += static_cast<double>(pp[base + static_cast<size_t>(j)]) *
                                   static_cast<double>(pg[base + static_cast<size_t>(j)]);
                        for (int64_t j = 0; j <= i; ++j) {
                            const size_t idx = base + static_cast<size_t>(j);
                            pd[idx] = static_cast<T>(
                                static_cast<double>(pp[idx]) *
                                (static_cast<double>(pg[idx]) - dot));
                        }
                    }
            });
            scores->accum_grad(dx);
        });
    }
    return out;
}

namespace {

// rotation tables for rope: cos/sin per (t, pair)
void rope_tables(int64_t t_len, int64_t d, double base, int64_t pos_offset,
                 std::vector<double>& cs, std::vector<double>& sn) {
    const int64_t half = d / 2;
    cs.resize(static_cast<size_t>(t_len * half));
    sn.resize(static_cast<size_t>(t_len * half));
    for (int64_t t = 0; t < t_len; ++t)
        for (int64_t i = 0; i < half; ++i) {
            const double theta =
                static_cast<double>(t + pos_offset) *
                std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
            cs[static_cast<size_t>(t * half + i)] = std::cos(theta);
            sn[static_cast<size_t>(t * half + i)] = std::sin(theta);
        }
}

template <class T>
void rope_kernel(const T* x, T* y, int64_t batch, int64_t t_len, int64_t h, int64_t d,
                 const std::vector<double>& cs, const std::vector<double>& sn, bool inverse) {
    const int64_t half = d / 2;
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t t = 0; t < t_len; ++t)
            for (int64_t hh = 0; hh < h; ++hh) {
                const T* xr = x + ((b * t_len + t) * h + hh) * d;
                T* yr = y + ((b * t_len + t) * h + hh) * d;
                for (int64_t i = 0; i < half; ++i) {
                    const double c = cs[static_cast<size_t>(t * half + i)];
                    const double s = inverse ? -sn[static_cast<size_t>(t * half + i)]
                                             : sn[static_cast<size_t>(t * half + i)];
                    const double x0 = static_cast<double>(xr[2 * i]);
                    const double x1 = static_cast<double>(xr[2 * i + 1]);
                    yr[2 * i] = static_cast<T>(x0 * c - x1 * s);
                    yr[2 * i + 1] = static_cast<T>(x0 * s + x1 * c);
                }
            }
}

}  // namespace

Var rope(const Var& x, double base, int64_t pos_offset) {
    const Tensor& tx = x->value;
    check(tx.rank() >= 3, "rope: needs [..., T, h, d], got ", shape_str(tx.shape()));
    const int64_t d = tx.dim(-1), h = tx.dim(-2), t_len = tx.dim(-3);
    check(d % 2 == 0, "rope: head dim must be even, got ", d);
    const int64_t batch = tx.numel() / (t_len * h * d);
    std::vector<double> cs, sn;
    rope_tables(t_len, d, base, pos_offset, cs, sn);
    Tensor val = Tensor::zeros(tx.shape(), tx.dtype());
    with_dtype(tx.dtype(), [&]<class T>(T) {
        rope_kernel<T>(tx.data<T>().data(), val.data<T>().data(), batch, t_len, h, d, cs, sn,
                       false);
    });
    Var out = make_var(std::move(val));
    if (want_grad({x})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [x, out, batch, t_len, h, d, cs, sn]() {
            if (!out->has_grad()) return;
            Tensor dx = Tensor::zeros(x->value.shape(), x->value.dtype());
            with_dtype(dx.dtype(), [&]<class T>(T) {
                rope_kernel<T>(out->grad.data<T>().data(), dx.data<T>().data(), batch, t_len, h,
                               d, cs, sn, true);
            });
            x->accum_grad(dx);
        });
    }
    return out;
}

Var rms_norm(const Var& x, const Var& gamma, double eps) {
    const Tensor& tx = x->value;
    const Tensor& tg = gamma->value;
    check_same_dtype(tx, tg, "rms_norm");
    const int64_t d = tx.dim(-1);
    check(tg.numel() == d, "rms_norm: gamma must have ", d, " entries, got ",
          shape_str(tg.shape()));
    const int64_t rows = tx.numel() / d;
    Tensor val = Tensor::zeros(tx.shape(), tx.dtype());
    with_dtype(tx.dtype(), [&]<class T>(T) {
        auto px = tx.data<T>();
        auto pg = tg.data<T>();
        auto po = val.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px.data() + r * d;
            T* orow = po.data() + r * d;
            double ms = 0.0;
            for (int64_t j = 0; j < d; ++j)
                ms += static_cast<double>(xr[j]) * static_cast<double>(xr[j]);
            const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
            for (int64_t j = 0; j < d; ++j)
                orow[j] = static_cast<T>(static_cast<double>(xr[j]) * inv *
                                         static_cast<double>(pg[static_cast<size_t>(j)]));
        }
    });
    Var out = make_var(std::move(val));
    if (want_grad({x, gamma})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [x, gamma, out, rows, d, eps]() {
            if (!out->has_grad()) return;
            with_dtype(x->value.dtype(), [&]<class T>(T) {
                auto px = x->value.data<T>();
                auto pw = gamma->value.data<T>();
                auto pg = out->grad.data<T>();
                Tensor dx = Tensor::zeros(x->value.shape(), x->value.dtype());
                Tensor dw = Tensor::zeros(gamma->value.shape(), gamma->value.dtype());
                auto pdx = dx.data<T>();
                auto pdw = dw.data<T>();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* xr = px.data() + r * d;
                    const T* gr = pg.data() + r * d;
                    double ms = 0.0;
                    for (int64_t j = 0; j < d; ++j)
                        ms += static_cast<double>(xr[j]) * static_cast<double>(xr[j]);
                    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
                    double dot = 0.0;  // sum of g*gamma*x
                    for (int64_t j = 0; j < d; ++j)
                        dot += static_cast<double>(gr[j]) *
                               static_cast<double>(pw[static_cast<size_t>(j)]) *
                               static_cast<double>(xr[j]);
                    const double c = dot * inv * inv * inv / static_cast<double>(d);
                    for (int64_t j = 0; j < d; ++j) {
                        const double gj = static_cast<double>(gr[j]);
                        const double wj = static_cast<double>(pw[static_cast<size_t>(j)]);
                        const double xj = static_cast<double>(xr[j]);
                        pdx[static_cast<size_t>(r * d + j)] =
                            static_cast<T>(gj * wj * inv - xj * c);
                        pdw[static_cast<size_t>(j)] += static_cast<T>(gj * xj * inv);
                    }
                }
                if (x->requires_grad) x->accum_grad(dx);
                if (gamma->requires_grad) gamma->accum_grad(dw.reshaped(gamma->value.shape()));
            });
        });
    }
    return out;
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Tensor& tx = x->value;
    check_same_dtype(tx, gamma->value, "layer_norm");
    check_same_dtype(tx, beta->value, "layer_norm");
    const int64_t d = tx.dim(-1);
    const int64_t gsz = gamma->value.numel();
    check(gsz == beta->value.numel(), "layer_norm: gamma/beta size mismatch");
    check(gsz % d == 0 && tx.numel() % gsz == 0, "layer_norm: affine shape ",
          shape_str(gamma->value.shape()), " must be a trailing suffix of ", shape_str(tx.shape()));
    const int64_t rows = tx.numel() / d;
    Tensor val = Tensor::zeros(tx.shape(), tx.dtype());
    with_dtype(tx.dtype(), [&]<class T>(T) {
        auto px = tx.data<T>();
        auto pw = gamma->value.data<T>();
        auto pb = beta->value.data<T>();
        auto po = val.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px.data() + r * d;
            T* orow = po.data() + r * d;
            const int64_t abase = (r * d) % gsz;
            double mu = 0.0;
            for (int64_t j = 0; j < d; ++j) mu += static_cast<double>(xr[j]);
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                const double c = static_cast<double>(xr[j]) - mu;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double inv = 1.0 / std::sqrt(var + eps);
            for (int64_t j = 0; j < d; ++j) {
                const double xhat = (static_cast<double>(xr[j]) - mu) * inv;
                orow[j] = static_cast<T>(
                    xhat * static_cast<double>(pw[static_cast<size_t>(abase + j)]) +
                    static_cast<double>(pb[static_cast<size_t>(abase + j)]));
            }
        }
    });
    Var out = make_var(std::move(val));
    if (want_grad({x, gamma, beta})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [x, gamma, beta, out, rows, d, gsz, eps]() {
            if (!out->has_grad()) return;
            with_dtype(x->value.dtype(), [&]<class T>(T) {
                auto px = x->value.data<T>();
                auto pw = gamma->value.data<T>();
                auto pg = out->grad.data<T>();
                Tensor dx = Tensor::zeros(x->value.shape(), x->value.dtype());
                Tensor dw = Tensor::zeros(gamma->value.shape(), gamma->value.dtype());
                Tensor db = Tensor::zeros(beta->value.shape(), beta->value.dtype());
                auto pdx = dx.data<T>();
                auto pdw = dw.data<T>();
                auto pdb = db.data<T>();
                std::vector<double> xhat(static_cast<size_t>(d));
                for (int64_t r = 0; r < rows; ++r) {
                    const T* xr = px.data() + r * d;
                    const T* gr = pg.data() + r * d;
                    const int64_t abase = (r * d) % gsz;
                    double mu = 0.0;
                    for (int64_t j = 0; j < d; ++j) mu += static_cast<double>(xr[j]);
                    mu /= static_cast<double>(d);
                    double var = 0.0;
                    for (int64_t j = 0; j < d; ++j) {
                        const double c = static_cast<double>(xr[j]) - mu;
                        var += c * c;
                    }
                    var /= static_cast<double>(d);
                    const double inv = 1.0 / std::sqrt(var + eps);
                    double m1 = 0.0, m2 = 0.0;  // means of dxhat and dxhat*xhat
                    for (int64_t j = 0; j < d; ++j) {
                        xhat[static_cast<size_t>(j)] = (static_cast<double>(xr[j]) - mu) * inv;
                        const double dxh = static_cast<double>(gr[j]) *
                                           static_cast<double>(pw[static_cast<size_t>(abase + j)]);
                        m1 += dxh;
                        m2 += dxh * xhat[static_cast<size_t>(j)];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (int64_t j = 0; j < d; ++j) {
                        const double dxh = static_cast<double>(gr[j]) *
                                           static_cast<double>(pw[static_cast<size_t>(abase + j)]);
                        pdx[static_cast<size_t>(r * d + j)] = static_cast<T>(
                            inv * (dxh - m1 - xhat[static_cast<size_t>(j)] * m2));
                        pdw[static_cast<size_t>(abase + j)] += static_cast<T>(
                            static_cast<double>(gr[j]) * xhat[static_cast<size_t>(j)]);
                        pdb[static_cast<size_t>(abase + j)] += gr[j];
                    }
                }
                if (x->requires_grad) x->accum_grad(dx);
                if (gamma->requires_grad) gamma->accum_grad(dw);
                if (beta->requires_grad) beta->accum_grad(db);
            });
        });
    }
    return out;
}

Var l2_normalize_last(const Var& x, double zero_floor) {
    const Tensor& tx = x->value;
    const int64_t d = tx.dim(-1);
    const int64_t rows = tx.numel() / d;
    Tensor val = Tensor::zeros(tx.shape(), tx.dtype());
    with_dtype(tx.dtype(), [&]<class T>(T) {
        auto px = tx.data<T>();
        auto po = val.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px.data() + r * d;
            T* orow = po.data() + r * d;
            double n2 = 0.0;
            for (int64_t j = 0; j < d; ++j)
                n2 += static_cast<double>(xr[j]) * static_cast<double>(xr[j]);
            const double n = std::sqrt(n2);
            if (n < zero_floor) continue;  // row stays zero
            for (int64_t j = 0; j < d; ++j)
                orow[j] = static_cast<T>(static_cast<double>(xr[j]) / n);
        }
    });
    Var out = make_var(std::move(val));
    if (want_grad({x})) {
        out->requires_grad = true;
        Tape::current()->record({out}, [x, out, rows, d, zero_floor]() {
            if (!out->has_grad()) return;
            with_dtype(x->value.dtype(), [&]<class T>(T) {
                auto px = x->value.data<T>();
                auto py = out->value.data<T>();
                auto pg = out->grad.data<T>();
                Tensor dx = Tensor::zeros(x->value.shape(), x->value.dtype());
                auto pd = dx.data<T>();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* xr = px.data() + r * d;
                    const T* yr = py.data() + r * d;
                    const T* gr = pg.data() + r * d;
                    double n2 = 0.0;
                    for (int64_t j = 0; j < d; ++j)
                        n2 += static_cast<double>(xr[j]) * static_cast<double>(xr[j]);
                    const double n = std::sqrt(n2);
                    if (n < zero_floor) continue;
                    double dot = 0.0;
                    for (int64_t j = 0; j < d; ++j)
                        dot += static_cast<double>(yr[j]) * static_cast<double>(gr[j]);
                    for (int64_t j = 0; j < d; ++j)
                        pd[static_cast<size_t>(r * d + j)] = static_cast<T>(
                            (static_cast<double>(gr[j]) - static_cast<double>(yr[j]) * dot) / n);
                }
                x->accum_grad(dx);
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// gradient checking

double grad_check(const std::function<Var()>& f, const std::vector<ParamPtr>& params, double eps,
                  int samples_per_param, uint64_t seed) {
    for (const auto& p : params)
        check(p->value().dtype() == Dtype::f64, "grad_check requires float64 parameters (",
              p->name, " is ", dtype_name(p->value().dtype()), ")");
    // analytic gradients
    std::vector<Tensor> analytic;
    {
        Tape tape;
        Tape::Scope scope(tape);
        for (const auto& p : params) p->zero_grad();
        Var loss = f();
        if (!loss->value.all_finite()) return std::numeric_limits<double>::infinity();
        backward(loss);
        for (const auto& p : params)
            analytic.push_back(p->node->has_grad() ? p->node->grad.clone()
                                                   : Tensor::zeros(p->value().shape(), Dtype::f64));
        for (const auto& p : params) p->zero_grad();
    }
    auto eval = [&]() -> double {
        Var loss = f();  // no tape active: forward only
        return loss->value.item();
    };
    Rng rng(seed);
    double max_rel = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& v = params[pi]->value();
        const int64_t n = v.numel();
        std::vector<int64_t> idx;
        if (samples_per_param < 0 || samples_per_param >= n) {
            idx.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        } else {
            for (int s = 0; s < samples_per_param; ++s)
                idx.push_back(static_cast<int64_t>(rng.below(static_cast<uint64_t>(n))));
        }
        for (int64_t i : idx) {
            const double orig = v.item_at(i);
            v.set_at(i, orig + eps);
            const double lp = eval();
            v.set_at(i, orig - eps);
            const double lm = eval();
            v.set_at(i, orig);
            if (!std::isfinite(lp) || !std::isfinite(lm))
                return std::numeric_limits<double>::infinity();
            const double numeric = (lp - lm) / (2.0 * eps);
            const double a = analytic[pi].item_at(i);
            const double rel = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace radlads
