#include <doctest.h>

#include <cmath>

#include "radlads/autograd.hpp"

using namespace radlads;

namespace {

Var var64(Shape shape, std::vector<double> vals, bool rg = false) {
    return make_var(Tensor::from(std::move(shape), vals, Dtype::f64), rg);
}

}  // namespace

TEST_CASE("matmul: identity, zero and hand-checked products") {
    Var I = var64({2, 2}, {1, 0, 0, 1});
    Var A = var64({2, 2}, {1, 2, 3, 4});
    Var Z = var64({2, 2}, {0, 0, 0, 0});
    Var B = var64({2, 2}, {5, 6, 7, 8});

    CHECK(matmul(I, A)->value.bit_equal(A->value));
    CHECK(matmul(A, Z)->value.max_abs() == 0.0);

    Tensor prod = matmul(A, B)->value;
    CHECK(prod.item_at(0) == doctest::Approx(19));
    CHECK(prod.item_at(1) == doctest::Approx(22));
    CHECK(prod.item_at(2) == doctest::Approx(43));
    CHECK(prod.item_at(3) == doctest::Approx(50));
}

TEST_CASE("matmul: shape mismatch reports both shapes") {
    Var A = var64({2, 3}, {1, 2, 3, 4, 5, 6});
    Var B = var64({2, 2}, {1, 2, 3, 4});
    try {
        matmul(A, B);
        FAIL("expected shape error");
    } catch (const ValidationError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[2x2]") != std::string::npos);
    }
}

TEST_CASE("matmul: associativity on random instances (float64)") {
    Rng rng(7);
    for (int trial = 0; trial < 4; ++trial) {
        Var A = make_var(Tensor::randn({5, 4}, rng, 1.0, Dtype::f64));
        Var B = make_var(Tensor::randn({4, 6}, rng, 1.0, Dtype::f64));
        Var C = make_var(Tensor::randn({6, 3}, rng, 1.0, Dtype::f64));
        Tensor left = matmul(matmul(A, B), C)->value;
        Tensor right = matmul(A, matmul(B, C))->value;
        CHECK(left.max_abs_diff(right) <= 1e-10);
    }
}

TEST_CASE("elementwise: sigmoid symmetry, lerp endpoints, clamp saturation") {
    Var z = var64({1}, {0.0});
    CHECK(sigmoid(z)->value.item() == doctest::Approx(0.5));

    Var a = var64({3}, {1, 2, 3});
    Var b = var64({3}, {4, 5, 6});
    CHECK(lerp(a, b, var64({3}, {0, 0, 0}))->value.bit_equal(a->value));
    CHECK(lerp(a, b, var64({3}, {1, 1, 1}))->value.max_abs_diff(b->value) == 0.0);

    CHECK(max_scalar(var64({1}, {-7.2}), -5.0)->value.item() == doctest::Approx(-5.0));
}

TEST_CASE("elementwise: broadcast of trailing vector, incompatible shapes rejected") {
    Var x = var64({2, 3}, {1, 2, 3, 4, 5, 6});
    Var v = var64({3}, {10, 20, 30});
    Tensor s = add(x, v)->value;
    CHECK(s.item_at(0) == doctest::Approx(11));
    CHECK(s.item_at(5) == doctest::Approx(36));

    Var bad = var64({2}, {1, 2});
    CHECK_THROWS_AS(add(x, bad), ValidationError);
}

TEST_CASE("elementwise dispatcher covers every op tag") {
    Var x = var64({2}, {0.5, -0.5});
    Var y = var64({2}, {2.0, 3.0});
    CHECK(elementwise(EwOp::add, {x, y})->value.item_at(0) == doctest::Approx(2.5));
    CHECK(elementwise(EwOp::sub, {x, y})->value.item_at(1) == doctest::Approx(-3.5));
    CHECK(elementwise(EwOp::mul, {x, y})->value.item_at(0) == doctest::Approx(1.0));
    CHECK(elementwise(EwOp::sigmoid, {x})->value.item_at(0) == doctest::Approx(1.0 / (1.0 + std::exp(-0.5))));
    CHECK(elementwise(EwOp::tanh, {x})->value.item_at(0) == doctest::Approx(std::tanh(0.5)));
    CHECK(elementwise(EwOp::exp, {x})->value.item_at(0) == doctest::Approx(std::exp(0.5)));
    CHECK(elementwise(EwOp::neg, {x})->value.item_at(0) == doctest::Approx(-0.5));
    CHECK(elementwise(EwOp::max_scalar, {x}, 0.0)->value.item_at(1) == doctest::Approx(0.0));
    CHECK(elementwise(EwOp::scale, {x}, 4.0)->value.item_at(0) == doctest::Approx(2.0));
    CHECK(elementwise(EwOp::lerp, {x, y, x})->value.item_at(0) == doctest::Approx(0.5 + 1.5 * 0.5));
}

TEST_CASE("reduce: l2norm 3-4-5, mean, per-axis sum, invalid axis") {
    CHECK(reduce_l2norm(var64({2}, {3, 4}))->value.item() == doctest::Approx(5.0));
    CHECK(reduce_mean(var64({3}, {1, 2, 3}))->value.item() == doctest::Approx(2.0));

    Tensor s = reduce_sum(var64({2, 2}, {1, 2, 3, 4}), 0)->value;
    CHECK(s.shape() == Shape{2});
    CHECK(s.item_at(0) == doctest::Approx(4));
    CHECK(s.item_at(1) == doctest::Approx(6));

    CHECK_THROWS_AS(reduce_sum(var64({2}, {1, 2}), 3), ValidationError);
    CHECK(reduce(ReduceOp::l2norm, var64({2}, {3, 4}))->value.item() == doctest::Approx(5.0));
}

TEST_CASE("backward: quadratic and linear gradients") {
    ParamPtr p = make_param("p", Tensor::from({2}, {1, 2}, Dtype::f64), ParamGroup::main);
    {
        Tape tape;
        Tape::Scope scope(tape);
        Var loss = reduce_sum(mul(p->node, p->node));
        backward(loss);
        CHECK(p->grad().item_at(0) == doctest::Approx(2.0));
        CHECK(p->grad().item_at(1) == doctest::Approx(4.0));
    }
    p->zero_grad();
    {
        Tape tape;
        Tape::Scope scope(tape);
        Var I = var64({2, 2}, {1, 0, 0, 1});
        Var loss = reduce_sum(matmul(I, reshape(p->node, {2, 1})));
        backward(loss);
        CHECK(p->grad().item_at(0) == doctest::Approx(1.0));
        CHECK(p->grad().item_at(1) == doctest::Approx(1.0));
    }
}

TEST_CASE("backward: errors on non-scalar loss and missing tape") {
    ParamPtr p = make_param("p", Tensor::from({2}, {1, 2}, Dtype::f64), ParamGroup::main);
    CHECK_THROWS_AS(backward(p->node), ValidationError);  // no tape
    Tape tape;
    Tape::Scope scope(tape);
    Var y = mul(p->node, p->node);
    CHECK_THROWS_AS(backward(y), ValidationError);  // non-scalar
}

TEST_CASE("backward: replaying twice doubles accumulated grads") {
    ParamPtr p = make_param("p", Tensor::from({2}, {1, 2}, Dtype::f64), ParamGroup::main);
    Tape tape;
    Tape::Scope scope(tape);
    Var loss = reduce_sum(mul(p->node, p->node));
    tape.backward_from(loss);
    tape.backward_from(loss);
    CHECK(p->grad().item_at(0) == doctest::Approx(4.0));
    CHECK(p->grad().item_at(1) == doctest::Approx(8.0));
}

TEST_CASE("grad_check: quadratic is exact, composed graph within 1e-4") {
    ParamPtr theta = make_param("theta", Tensor::from({1}, {3.0}, Dtype::f64), ParamGroup::main);
    double err = grad_check([&]() { return mul(theta->node, theta->node); }, {theta}, 1e-5);
    CHECK(err <= 1e-7);

    Rng rng(11);
    ParamPtr a = make_param("a", Tensor::randn({4, 4}, rng, 0.5, Dtype::f64), ParamGroup::main);
    ParamPtr b = make_param("b", Tensor::randn({4}, rng, 0.5, Dtype::f64), ParamGroup::main);
    Var x = make_var(Tensor::randn({3, 4}, rng, 1.0, Dtype::f64));
    auto f = [&]() {
        Var h = tanh(matmul(x, a->node));
        Var g = mul(sigmoid(h), add(h, b->node));
        return reduce_l2norm(exp(scale(g, 0.3)));
    };
    CHECK(grad_check(f, {a, b}, 1e-5) <= 1e-4);
}

TEST_CASE("structural ops round-trip gradients") {
    Rng rng(3);
    ParamPtr t = make_param("t", Tensor::randn({2, 3, 4}, rng, 1.0, Dtype::f64), ParamGroup::main);
    auto f = [&]() {
        Var y = swap_axes(t->node, 0, 2);
        y = reshape(y, {4, 6});
        return reduce_l2norm(y);
    };
    CHECK(grad_check(f, {t}, 1e-5) <= 1e-6);

    ParamPtr table =
        make_param("tab", Tensor::randn({5, 3}, rng, 1.0, Dtype::f64), ParamGroup::main);
    std::vector<int32_t> ids{0, 2, 2, 4};
    auto g = [&]() { return reduce_sum(mul(gather_rows(table->node, ids),
                                           gather_rows(table->node, ids))); };
    CHECK(grad_check(g, {table}, 1e-5) <= 1e-6);
}

TEST_CASE("tokenshift_prev: shift by one with zero first row") {
    Var x = var64({3, 1}, {1, 2, 3});
    Tensor s = tokenshift_prev(x)->value;
    CHECK(s.item_at(0) == 0.0);
    CHECK(s.item_at(1) == 1.0);
    CHECK(s.item_at(2) == 2.0);

    Var one = var64({1, 4}, {1, 2, 3, 4});
    CHECK(tokenshift_prev(one)->value.max_abs() == 0.0);
}

TEST_CASE("float32 path stays in float32") {
    Rng rng(5);
    Var a = make_var(Tensor::randn({3, 3}, rng, 1.0, Dtype::f32));
    Var b = make_var(Tensor::randn({3, 3}, rng, 1.0, Dtype::f32));
    CHECK(matmul(a, b)->value.dtype() == Dtype::f32);
    Var c = make_var(Tensor::randn({3, 3}, rng, 1.0, Dtype::f64));
    CHECK_THROWS_AS(matmul(a, c), ValidationError);
}
