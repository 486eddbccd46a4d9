#include "radlads/mixers.hpp"

#include <cmath>

namespace radlads {

namespace {

constexpr double kKappaFloor = 1e-12;  // keys below this norm get kappa = 0
constexpr double kLinAttLnEps = 1e-5;

Var zeros_state_var(int64_t batch, int h, int d, Dtype dt) {
    return constant(Tensor::zeros({batch, h, d, d}, dt));
}

// tokenshift input: previous-token rows, with the decode carry substituted at
// row 0 when a state is present
Var shifted_input(const Var& x, const MixerState* state) {
    if (state == nullptr || state->pos == 0) return tokenshift_prev(x);
    // incremental decoding: row 0 comes from the carry, never differentiated
    const Tensor& tx = x->value;
    const int64_t b = tx.dim(0), t = tx.dim(1), d = tx.dim(2);
    Tensor prev = Tensor::zeros(tx.shape(), tx.dtype());
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t j = 0; j < d; ++j)
            prev.set_at((bi * t) * d + j, state->prev_x.item_at(bi * d + j));
        for (int64_t ti = 1; ti < t; ++ti)
            for (int64_t j = 0; j < d; ++j)
                prev.set_at((bi * t + ti) * d + j, tx.item_at((bi * t + ti - 1) * d + j));
    }
    return constant(std::move(prev));
}

Tensor last_token_rows(const Tensor& x) {  // [B,T,D] -> [B,D]
    const int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
    Tensor out = Tensor::zeros({b, d}, x.dtype());
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t j = 0; j < d; ++j)
            out.set_at(bi * d + j, x.item_at((bi * t + t - 1) * d + j));
    return out;
}

}  // namespace

const char* mixer_kind_name(MixerKind k) {
    switch (k) {
        case MixerKind::softmax: return "softmax";
        case MixerKind::rad_rwkv6: return "rad_rwkv6";
        case MixerKind::rad_rwkv7: return "rad_rwkv7";
        case MixerKind::linatt: return "linatt";
    }
    return "?";
}

MixerKind mixer_kind_from(const std::string& name) {
    if (name == "softmax") return MixerKind::softmax;
    if (name == "rad_rwkv6") return MixerKind::rad_rwkv6;
    if (name == "rad_rwkv7") return MixerKind::rad_rwkv7;
    if (name == "linatt") return MixerKind::linatt;
    fail("unknown mixer kind '", name, "'");
}

MixerState MixerState::fresh(int64_t batch, int n_heads, int d_head, int d_model, Dtype dtype) {
    MixerState s;
    s.wkv = Tensor::zeros({batch, n_heads, d_head, d_head}, dtype);
    s.prev_x = Tensor::zeros({batch, d_model}, dtype);
    s.pos = 0;
    return s;
}

void Rwkv6MixerParams::collect(std::vector<ParamPtr>& out) const {
    out.push_back(mu_x);
    for (const auto* ad : {&ddl_r, &ddl_v, &ddl_g, &ddl_w, &ddl_k}) ad->collect(out);
    for (const auto& p : {w_r, w_v, w_g, gate_bias, w_decay, w_key, w_o}) out.push_back(p);
    lora_w.collect(out);
}

void Rwkv7MixerParams::collect(std::vector<ParamPtr>& out) const {
    for (const auto& p : {w_r, w_k, w_v, w_o}) out.push_back(p);
    for (const auto* ad : {&ad_a, &ad_d, &ad_nu, &ad_g}) ad->collect(out);
}

void LinAttMixerParams::collect(std::vector<ParamPtr>& out) const {
    for (const auto& p : {w_q, w_k, w_v, w_o, ln_gamma, ln_beta}) out.push_back(p);
}

void SoftmaxMixerParams::collect(std::vector<ParamPtr>& out) const {
    for (const auto& p : {w_q, w_k, w_v, w_o}) out.push_back(p);
}

// ---------------------------------------------------------------------------
// single-token steps

std::pair<MixerState, Tensor> wkv6_step(const MixerState& state, const Tensor& w, const Tensor& k,
                                        const Tensor& v, const Tensor& r) {
    const int64_t b = w.dim(0), h = w.dim(1), d = w.dim(2);
    auto as_seq = [&](const Tensor& t) { return constant(t.reshaped({b, 1, h, d})); };
    ScanOut sc = wkv6_scan(as_seq(w), as_seq(k), as_seq(v), as_seq(r), constant(state.wkv));
    MixerState next = state;
    next.wkv = sc.state->value;
    next.pos = state.pos + 1;
    return {next, sc.p->value.reshaped({b, h, d})};
}

std::pair<MixerState, Tensor> wkv7_step(const MixerState& state, const Tensor& w,
                                        const Tensor& kt, const Tensor& kappa, const Tensor& a,
                                        const Tensor& v, const Tensor& r) {
    const int64_t b = w.dim(0), h = w.dim(1), d = w.dim(2);
    auto as_seq = [&](const Tensor& t) { return constant(t.reshaped({b, 1, h, d})); };
    ScanOut sc = wkv7_scan(as_seq(w), as_seq(kt), as_seq(kappa), as_seq(a), as_seq(v), as_seq(r),
                           constant(state.wkv));
    MixerState next = state;
    next.wkv = sc.state->value;
    next.pos = state.pos + 1;
    return {next, sc.p->value.reshaped({b, h, d})};
}

// ---------------------------------------------------------------------------
// quadratic reference forms

Tensor wkv6_parallel(const Tensor& w, const Tensor& k, const Tensor& v, const Tensor& r) {
    const int64_t B = w.dim(0), T = w.dim(1), H = w.dim(2), D = w.dim(3);
    Tensor p = Tensor::zeros({B, T, H, D}, w.dtype());
    with_dtype(w.dtype(), [&]<class TT>(TT) {
        auto pw = w.data<TT>();
        auto pk = k.data<TT>();
        auto pv = v.data<TT>();
        auto pr = r.data<TT>();
        auto pp = p.data<TT>();
        std::vector<double> ku(static_cast<size_t>(D));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t i = 0; i < T; ++i) {
                    // source token i contributes diag(prod_{j=i+1..t} w_j) k_i^T v_i to wkv_t
                    const int64_t ioff = ((b * T + i) * H + h) * D;
                    for (int64_t c = 0; c < D; ++c)
                        ku[static_cast<size_t>(c)] = static_cast<double>(pk[ioff + c]);
                    for (int64_t t = i; t < T; ++t) {
                        const int64_t toff = ((b * T + t) * H + h) * D;
                        if (t > i)
                            for (int64_t c = 0; c < D; ++c)
                                ku[static_cast<size_t>(c)] *= static_cast<double>(pw[toff + c]);
                        double score = 0.0;
                        for (int64_t c = 0; c < D; ++c)
                            score += static_cast<double>(pr[toff + c]) * ku[static_cast<size_t>(c)];
                        for (int64_t j = 0; j < D; ++j)
                            pp[toff + j] += static_cast<TT>(score *
                                                            static_cast<double>(pv[ioff + j]));
                    }
                }
    });
    return p;
}

Tensor wkv7_parallel(const Tensor& w, const Tensor& kt, const Tensor& kappa, const Tensor& a,
                     const Tensor& v, const Tensor& r) {
    const int64_t B = w.dim(0), T = w.dim(1), H = w.dim(2), D = w.dim(3);
    Tensor p = Tensor::zeros({B, T, H, D}, w.dtype());
    with_dtype(w.dtype(), [&]<class TT>(TT) {
        auto pw = w.data<TT>();
        auto pkt = kt.data<TT>();
        auto pka = kappa.data<TT>();
        auto pa = a.data<TT>();
        auto pv = v.data<TT>();
        auto pr = r.data<TT>();
        auto pp = p.data<TT>();
        std::vector<double> u(static_cast<size_t>(D)), nu(static_cast<size_t>(D));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t i = 0; i < T; ++i) {
                    // u carries kt_i composed through G_{i+1} ... G_t on the right
                    const int64_t ioff = ((b * T + i) * H + h) * D;
                    for (int64_t c = 0; c < D; ++c)
                        u[static_cast<size_t>(c)] = static_cast<double>(pkt[ioff + c]);
                    for (int64_t t = i; t < T; ++t) {
                        const int64_t toff = ((b * T + t) * H + h) * D;
                        if (t > i) {
                            // u <- u (diag(w_t) - kappa_t^T (a_t .* kappa_t))
                            double uk = 0.0;
                            for (int64_t c = 0; c < D; ++c)
                                uk += u[static_cast<size_t>(c)] *
                                      static_cast<double>(pka[toff + c]);
                            for (int64_t c = 0; c < D; ++c)
                                nu[static_cast<size_t>(c)] =
                                    u[static_cast<size_t>(c)] * static_cast<double>(pw[toff + c]) -
                                    uk * static_cast<double>(pa[toff + c]) *
                                        static_cast<double>(pka[toff + c]);
                            u.swap(nu);
                        }
                        double score = 0.0;
                        for (int64_t c = 0; c < D; ++c)
                            score += u[static_cast<size_t>(c)] * static_cast<double>(pr[toff + c]);
                        for (int64_t j = 0; j < D; ++j)
                            pp[toff + j] += static_cast<TT>(score *
                                                            static_cast<double>(pv[ioff + j]));
                    }
                }
    });
    return p;
}

Tensor linatt_parallel(const Tensor& q, const Tensor& k, const Tensor& v) {
    const int64_t B = q.dim(0), T = q.dim(1), H = q.dim(2), D = q.dim(3);
    Tensor p = Tensor::zeros({B, T, H, D}, q.dtype());
    with_dtype(q.dtype(), [&]<class TT>(TT) {
        auto pq = q.data<TT>();
        auto pk = k.data<TT>();
        auto pv = v.data<TT>();
        auto pp = p.data<TT>();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t t = 0; t < T; ++t) {
                    const int64_t toff = ((b * T + t) * H + h) * D;
                    for (int64_t i = 0; i <= t; ++i) {
                        const int64_t ioff = ((b * T + i) * H + h) * D;
                        double score = 0.0;
                        for (int64_t c = 0; c < D; ++c)
                            score += static_cast<double>(pq[toff + c]) *
                                     static_cast<double>(pk[ioff + c]);
                        for (int64_t j = 0; j < D; ++j)
                            pp[toff + j] += static_cast<TT>(score *
                                                            static_cast<double>(pv[ioff + j]));
                    }
                }
    });
    return p;
}

// ---------------------------------------------------------------------------
// full forwards

MixerOut rad_rwkv6_forward(const Rwkv6MixerParams& p, const Var& x, const MixerState* state) {
    const Tensor& tx = x->value;
    check(tx.rank() == 3 && tx.dim(2) == p.d_model, "rad_rwkv6_forward: want [B,T,", p.d_model,
          "], got ", shape_str(tx.shape()));
    check(p.d_model % p.n_heads == 0 && p.n_heads % p.n_kv_heads == 0,
          "rad_rwkv6_forward: invalid head layout");
    const int64_t B = tx.dim(0), T = tx.dim(1);
    const int h = p.n_heads, d = p.d_head(), kv = p.kv_dim(), group = p.n_heads / p.n_kv_heads;
    const int64_t pos = state ? state->pos : 0;

    Var xprev = shifted_input(x, state);
    Var xr = ddlerp(p.mu_x, p.ddl_r, x, xprev);
    Var xv = ddlerp(p.mu_x, p.ddl_v, x, xprev);
    Var xg = ddlerp(p.mu_x, p.ddl_g, x, xprev);
    Var xw = ddlerp(p.mu_x, p.ddl_w, x, xprev);
    Var xk = ddlerp(p.mu_x, p.ddl_k, x, xprev);

    Var r = reshape(matmul(xr, p.w_r->node), {B, T, h, d});
    r = scale(rope_apply(r, p.rope, pos), 1.0 / std::sqrt(static_cast<double>(d)));

    Var v = repeat_kv_heads(reshape(matmul(xv, p.w_v->node), {B, T, p.n_kv_heads, d}), group);
    Var g = sigmoid(add(matmul(xg, p.w_g->node), p.gate_bias->node));

    // w = exp(max(-exp(lora_w(w_tilde)), -5)), so every channel lands in [e^-5, 1)
    Var w_tilde = matmul(xw, p.w_decay->node);
    Var decay_log = max_scalar(neg(exp(lora(p.lora_w, w_tilde))), -5.0);
    Var w = exp(decay_log);  // [B,T,kv]

    // state balancing: k = k_tilde (1 - w) d_k^-1/2 with d_k = d_head
    Var k_tilde = matmul(xk, p.w_key->node);
    Var k = scale(mul(k_tilde, add_scalar(neg(w), 1.0)), 1.0 / std::sqrt(static_cast<double>(d)));

    Var w_rep = repeat_kv_heads(reshape(w, {B, T, p.n_kv_heads, d}), group);
    Var k_rep = repeat_kv_heads(reshape(k, {B, T, p.n_kv_heads, d}), group);

    Var s0 = state ? constant(state->wkv) : zeros_state_var(B, h, d, tx.dtype());
    ScanOut sc = wkv6_scan(w_rep, k_rep, v, r, s0);

    Var o = matmul(mul(g, reshape(sc.p, {B, T, static_cast<int64_t>(p.d_model)})), p.w_o->node);

    MixerOut out;
    out.o = o;
    out.state.wkv = sc.state->value;
    out.state.prev_x = last_token_rows(tx);
    out.state.pos = pos + T;
    return out;
}

Rwkv7Out rad_rwkv7_forward(const Rwkv7MixerParams& p, const Var& x, const MixerState* state,
                           const Var& v0_in) {
    const Tensor& tx = x->value;
    check(tx.rank() == 3 && tx.dim(2) == p.d_model, "rad_rwkv7_forward: want [B,T,", p.d_model,
          "], got ", shape_str(tx.shape()));
    if (p.layer_index >= 1)
        check(v0_in != nullptr, "rad_rwkv7_forward: layer ", p.layer_index,
              " requires the layer-0 value precursors");
    const int64_t B = tx.dim(0), T = tx.dim(1);
    const int h = p.n_heads, d = p.d_head(), group = p.n_heads / p.n_kv_heads;
    const int64_t pos = state ? state->pos : 0;

    Var k_pre = reshape(matmul(x, p.w_k->node), {B, T, p.n_kv_heads, d});
    k_pre = rope_apply(k_pre, p.rope, pos);

    Var a = reshape(sigmoid(lora(p.ad_a, x)), {B, T, p.n_kv_heads, d});
    // w = exp(-e^-0.5 sigmoid(d_t)): bounded in (exp(-e^-0.5), 1)
    Var w = reshape(exp(scale(sigmoid(lora(p.ad_d, x)), -std::exp(-0.5))),
                    {B, T, p.n_kv_heads, d});
    // replacement key and normalized removal key both derive from the rope'd precursor
    Var k_tilde = mul(k_pre, add(add_scalar(neg(w), 1.0), a));
    Var kappa = l2_normalize_last(k_pre, kKappaFloor);

    Var v_pre = matmul(x, p.w_v->node);  // [B,T,kv]
    Var v_mixed;
    if (p.layer_index == 0) {
        v_mixed = v_pre;  // nu is ignored at layer 0
    } else {
        Var nu = sigmoid(lora(p.ad_nu, x));
        v_mixed = lerp(v0_in, v_pre, nu);
    }
    Var v = repeat_kv_heads(reshape(v_mixed, {B, T, p.n_kv_heads, d}), group);

    Var r = reshape(matmul(x, p.w_r->node), {B, T, h, d});
    r = scale(rope_apply(r, p.rope, pos), 1.0 / std::sqrt(static_cast<double>(d)));
    Var g = lora(p.ad_g, x);  // sigmoid activation inside the adapter, no bias

    Var s0 = state ? constant(state->wkv) : zeros_state_var(B, h, d, tx.dtype());
    ScanOut sc = wkv7_scan(repeat_kv_heads(w, group), repeat_kv_heads(k_tilde, group),
                           repeat_kv_heads(kappa, group), repeat_kv_heads(a, group), v, r, s0);

    Var o = matmul(mul(g, reshape(sc.p, {B, T, static_cast<int64_t>(p.d_model)})), p.w_o->node);

    Rwkv7Out out;
    out.o = o;
    out.state.wkv = sc.state->value;
    out.state.pos = pos + T;
    out.v0 = (p.layer_index == 0) ? v_pre : v0_in;
    return out;
}

MixerOut linatt_forward(const LinAttMixerParams& p, const Var& x, const MixerState* state) {
    const Tensor& tx = x->value;
    check(tx.rank() == 3 && tx.dim(2) == p.d_model, "linatt_forward: want [B,T,", p.d_model,
          "], got ", shape_str(tx.shape()));
    const int64_t B = tx.dim(0), T = tx.dim(1);
    const int h = p.n_heads, d = p.d_head(), group = p.n_heads / p.n_kv_heads;
    const int64_t pos = state ? state->pos : 0;

    Var q = rope_apply(reshape(matmul(x, p.w_q->node), {B, T, h, d}), p.rope, pos);
    Var k = rope_apply(reshape(matmul(x, p.w_k->node), {B, T, p.n_kv_heads, d}), p.rope, pos);
    Var v = reshape(matmul(x, p.w_v->node), {B, T, p.n_kv_heads, d});
    k = repeat_kv_heads(k, group);
    v = repeat_kv_heads(v, group);

    // cumulative sum of k^T v outer products is the decay-free wkv6 recurrence
    Var ones = constant(Tensor::full({B, T, h, d}, 1.0, tx.dtype()));
    Var s0 = state ? constant(state->wkv) : zeros_state_var(B, h, d, tx.dtype());
    ScanOut sc = wkv6_scan(ones, k, v, q, s0);

    Var norm = layer_norm(sc.p, p.ln_gamma->node, p.ln_beta->node, kLinAttLnEps);
    Var o = matmul(reshape(norm, {B, T, static_cast<int64_t>(p.d_model)}), p.w_o->node);

    MixerOut out;
    out.o = o;
    out.state.wkv = sc.state->value;
    out.state.pos = pos + T;
    return out;
}

MixerOut softmax_mixer_forward(const SoftmaxMixerParams& p, const Var& x) {
    const Tensor& tx = x->value;
    const int64_t B = tx.dim(0), T = tx.dim(1);
    const int h = p.n_heads, d = p.d_head();
    Var q = reshape(rope_apply(reshape(matmul(x, p.w_q->node), {B, T, h, d}), p.rope, 0),
                    {B, T, static_cast<int64_t>(p.d_model)});
    Var k = reshape(
        rope_apply(reshape(matmul(x, p.w_k->node), {B, T, p.n_kv_heads, d}), p.rope, 0),
        {B, T, static_cast<int64_t>(p.kv_dim())});
    Var v = matmul(x, p.w_v->node);
    Var attn = softmax_attention_gqa(q, k, v, p.n_heads, p.n_kv_heads, true);
    MixerOut out;
    out.o = matmul(attn, p.w_o->node);
    return out;
}

// ---------------------------------------------------------------------------
// attention-matrix oracle

OracleOut attention_matrix_oracle(MixerKind kind, const Tensor& w, const Tensor& kappa,
                                  const Tensor& a, const Tensor& r, const Tensor& k,
                                  const Tensor& v) {
    check(kind == MixerKind::rad_rwkv6 || kind == MixerKind::rad_rwkv7,
          "attention_matrix_oracle: unsupported mixer kind ", mixer_kind_name(kind));
    const int64_t B = w.dim(0), T = w.dim(1), H = w.dim(2), D = w.dim(3);
    OracleOut out;
    out.scores = Tensor::zeros({B, H, T, T}, w.dtype());
    out.p = Tensor::zeros({B, T, H, D}, w.dtype());
    const bool delta = (kind == MixerKind::rad_rwkv7);
    with_dtype(w.dtype(), [&]<class TT>(TT) {
        auto pw = w.data<TT>();
        auto pr = r.data<TT>();
        auto pk = k.data<TT>();
        auto pv = v.data<TT>();
        auto pA = out.scores.data<TT>();
        auto pp = out.p.data<TT>();
        std::vector<double> u(static_cast<size_t>(D)), nu(static_cast<size_t>(D));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t j = 0; j < T; ++j) {
                    const int64_t joff = ((b * T + j) * H + h) * D;
                    for (int64_t c = 0; c < D; ++c)
                        u[static_cast<size_t>(c)] = static_cast<double>(pk[joff + c]);
                    for (int64_t i = j; i < T; ++i) {
                        const int64_t ioff = ((b * T + i) * H + h) * D;
                        if (i > j) {
                            if (delta) {
                                auto pka = kappa.data<TT>();
                                auto pa = a.data<TT>();
                                double uk = 0.0;
                                for (int64_t c = 0; c < D; ++c)
                                    uk += u[static_cast<size_t>(c)] *
                                          static_cast<double>(pka[ioff + c]);
                                for (int64_t c = 0; c < D; ++c)
                                    nu[static_cast<size_t>(c)] =
                                        u[static_cast<size_t>(c)] *
                                            static_cast<double>(pw[ioff + c]) -
                                        uk * static_cast<double>(pa[ioff + c]) *
                                            static_cast<double>(pka[ioff + c]);
                                u.swap(nu);
                            } else {
                                for (int64_t c = 0; c < D; ++c)
                                    u[static_cast<size_t>(c)] *=
                                        static_cast<double>(pw[ioff + c]);
                            }
                        }
                        double score = 0.0;
                        for (int64_t c = 0; c < D; ++c)
                            score += u[static_cast<size_t>(c)] * static_cast<double>(pr[ioff + c]);
                        pA[((b * H + h) * T + i) * T + j] = static_cast<TT>(score);
                        for (int64_t c = 0; c < D; ++c)
                            pp[ioff + c] += static_cast<TT>(score *
                                                            static_cast<double>(pv[joff + c]));
                    }
                }
    });
    return out;
}

}  // namespace radlads
