#pragma once

#include "radlads/autograd.hpp"

namespace radlads {

enum class Activation : uint8_t { identity, tanh, sigmoid };

// lambda + act(x A) B, the low-rank adapter used throughout both mixers.
// loramlp is the same operation with a selectable activation and optional bias.
struct LoraAdapter {
    ParamPtr a;       // [D_in x z]
    ParamPtr b;       // [z x D_out]
    ParamPtr lambda;  // [D_out]; null means no bias
    Activation act = Activation::tanh;

    int64_t rank() const { return a->value().dim(1); }
    void collect(std::vector<ParamPtr>& out) const;
};

Var lora(const LoraAdapter& adapter, const Var& x);

// a + (b-a) .* lora(a + (b-a) .* mu_x)
Var ddlerp(const ParamPtr& mu_x, const LoraAdapter& adapter, const Var& a, const Var& b);

struct RopeConfig {
    bool enabled = false;
    double base = 10000.0;
};

// x: [..., T, h, d]; identity when disabled
Var rope_apply(const Var& x, const RopeConfig& cfg, int64_t pos_offset);

// q: [..., T, n_q*d], k/v: [..., T, n_kv*d]; kv heads are repeated n_q/n_kv
// times at runtime. Scores are scaled by d^-1/2.
Var softmax_attention_gqa(const Var& q, const Var& k, const Var& v, int n_q_heads, int n_kv_heads,
                          bool causal = true);

}  // namespace radlads
