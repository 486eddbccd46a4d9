#pragma once

#include <utility>

#include "radlads/mixer_primitives.hpp"

namespace radlads {

enum class MixerKind : uint8_t { softmax, rad_rwkv6, rad_rwkv7, linatt };

const char* mixer_kind_name(MixerKind k);
MixerKind mixer_kind_from(const std::string& name);

// Per-layer recurrent carry for incremental decoding. A fresh state is all
// zeros with pos = 0.
struct MixerState {
    Tensor wkv;     // [B, h, d, d]
    Tensor prev_x;  // [B, D]; tokenshift carry (RWKV6 only)
    int64_t pos = 0;

    static MixerState fresh(int64_t batch, int n_heads, int d_head, int d_model, Dtype dtype);
};

// ---------------------------------------------------------------------------
// parameter blocks

struct Rwkv6MixerParams {
    int d_model = 0, n_heads = 0, n_kv_heads = 0;
    RopeConfig rope;  // disabled by default in this formulation
    ParamPtr mu_x;
    LoraAdapter ddl_r, ddl_v, ddl_g, ddl_w, ddl_k;  // tokenshift adapters, D -> D
    ParamPtr w_r, w_v, w_g, gate_bias, w_decay, w_key, w_o;
    LoraAdapter lora_w;  // decay adapter, kv_dim -> kv_dim

    int d_head() const { return d_model / n_heads; }
    int kv_dim() const { return n_kv_heads * d_head(); }
    void collect(std::vector<ParamPtr>& out) const;
};

struct Rwkv7MixerParams {
    int d_model = 0, n_heads = 0, n_kv_heads = 0, layer_index = 0;
    RopeConfig rope{true, 10000.0};
    ParamPtr w_r, w_k, w_v, w_o;
    LoraAdapter ad_a;   // in-context learning rate, identity + bias, D -> kv
    LoraAdapter ad_d;   // decay precursor, tanh + bias, D -> kv
    LoraAdapter ad_nu;  // value residual gate, identity + bias, D -> kv
    LoraAdapter ad_g;   // rwkv gate, sigmoid, no bias, D -> D

    int d_head() const { return d_model / n_heads; }
    int kv_dim() const { return n_kv_heads * d_head(); }
    void collect(std::vector<ParamPtr>& out) const;
};

struct LinAttMixerParams {
    int d_model = 0, n_heads = 0, n_kv_heads = 0;
    RopeConfig rope{true, 10000.0};
    ParamPtr w_q, w_k, w_v, w_o;
    ParamPtr ln_gamma, ln_beta;  // [h, d_head], per-head LayerNorm after the attention product

    int d_head() const { return d_model / n_heads; }
    int kv_dim() const { return n_kv_heads * d_head(); }
    void collect(std::vector<ParamPtr>& out) const;
};

struct SoftmaxMixerParams {
    int d_model = 0, n_heads = 0, n_kv_heads = 0;
    RopeConfig rope{true, 10000.0};
    ParamPtr w_q, w_k, w_v, w_o;

    int d_head() const { return d_model / n_heads; }
    int kv_dim() const { return n_kv_heads * d_head(); }
    void collect(std::vector<ParamPtr>& out) const;
};

// ---------------------------------------------------------------------------
// single-token recurrences (per-head inputs [B,h,d]); inference-level API

std::pair<MixerState, Tensor> wkv6_step(const MixerState& state, const Tensor& w, const Tensor& k,
                                        const Tensor& v, const Tensor& r);
std::pair<MixerState, Tensor> wkv7_step(const MixerState& state, const Tensor& w,
                                        const Tensor& kt, const Tensor& kappa, const Tensor& a,
                                        const Tensor& v, const Tensor& r);

// ---------------------------------------------------------------------------
// quadratic reference forms (correctness oracles; no autodiff)
// all inputs [B,T,h,d], result is the p sequence [B,T,h,d]

Tensor wkv6_parallel(const Tensor& w, const Tensor& k, const Tensor& v, const Tensor& r);
Tensor wkv7_parallel(const Tensor& w, const Tensor& kt, const Tensor& kappa, const Tensor& a,
                     const Tensor& v, const Tensor& r);
// unnormalized causal linear attention via the masked score matrix (pre-LayerNorm)
Tensor linatt_parallel(const Tensor& q, const Tensor& k, const Tensor& v);

// ---------------------------------------------------------------------------
// full sequence-mixer forwards; x is [B,T,D]

struct MixerOut {
    Var o;
    MixerState state;
};

MixerOut rad_rwkv6_forward(const Rwkv6MixerParams& p, const Var& x, const MixerState* state);

struct Rwkv7Out {
    Var o;
    MixerState state;
    Var v0;  // layer-0 value precursors [B,T,kv_dim]; produced at layer 0, consumed above
};

// layer 0: pass v0_in = nullptr; layers >= 1 must supply the layer-0 precursors
Rwkv7Out rad_rwkv7_forward(const Rwkv7MixerParams& p, const Var& x, const MixerState* state,
                           const Var& v0_in);

MixerOut linatt_forward(const LinAttMixerParams& p, const Var& x, const MixerState* state);

MixerOut softmax_mixer_forward(const SoftmaxMixerParams& p, const Var& x);

// ---------------------------------------------------------------------------
// attention-matrix oracle: scores as cumulative compositions of per-token
// transition transforms G_t, with outputs recovered as p_i = sum_j A_ij v_j

struct OracleOut {
    Tensor scores;  // [B, h, T, T], strictly causal (zero above the diagonal)
    Tensor p;       // [B, T, h, d]
};

// kind rad_rwkv6: G_t = diag(w_t), sources keyed by k
// kind rad_rwkv7: G_t = diag(w_t) - kappa_t^T (a_t .* kappa_t), sources keyed by kt;
//                 the composition acts on the state's right side, so
//                 A_ij = kt_j (G_{j+1} ... G_i) r_i^T
OracleOut attention_matrix_oracle(MixerKind kind, const Tensor& w, const Tensor& kappa,
                                  const Tensor& a, const Tensor& r, const Tensor& k,
                                  const Tensor& v);

}  // namespace radlads
