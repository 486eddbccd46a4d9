#include "radlads/mixer_primitives.hpp"

#include <cmath>

namespace radlads {

void LoraAdapter::collect(std::vector<ParamPtr>& out) const {
    out.push_back(a);
    out.push_back(b);
    if (lambda) out.push_back(lambda);
}

Var lora(const LoraAdapter& adapter, const Var& x) {
    const int64_t d_in = adapter.a->value().dim(0);
    check(x->value.dim(-1) == d_in, "lora: input dim ", x->value.dim(-1), " != adapter dim ",
          d_in);
    Var h = matmul(x, adapter.a->node);
    switch (adapter.act) {
        case Activation::identity: break;
        case Activation::tanh: h = tanh(h); break;
        case Activation::sigmoid: h = sigmoid(h); break;
    }
    Var out = matmul(h, adapter.b->node);
    if (adapter.lambda) out = add(out, adapter.lambda->node);
    return out;
}

Var ddlerp(const ParamPtr& mu_x, const LoraAdapter& adapter, const Var& a, const Var& b) {
    check(a->value.shape() == b->value.shape(), "ddlerp: operand shapes differ: ",
          shape_str(a->value.shape()), " vs ", shape_str(b->value.shape()));
    Var inner = lerp(a, b, mu_x->node);
    Var mix = lora(adapter, inner);
    return lerp(a, b, mix);
}

Var rope_apply(const Var& x, const RopeConfig& cfg, int64_t pos_offset) {
    if (!cfg.enabled) return x;
    check(x->value.dim(-1) % 2 == 0, "rope_apply: head dim must be even, got ", x->value.dim(-1));
    return rope(x, cfg.base, pos_offset);
}

Var softmax_attention_gqa(const Var& q, const Var& k, const Var& v, int n_q_heads, int n_kv_heads,
                          bool causal) {
    check(n_kv_heads >= 1 && n_q_heads % n_kv_heads == 0, "softmax_attention_gqa: ", n_q_heads,
          " query heads not divisible by ", n_kv_heads, " kv heads");
    const int group = n_q_heads / n_kv_heads;
    const Tensor& tq = q->value;
    const int64_t t_len = tq.dim(-2);
    const int64_t dq = tq.dim(-1);
    check(dq % n_q_heads == 0, "softmax_attention_gqa: q dim ", dq, " not divisible by ",
          n_q_heads, " heads");
    const int64_t d = dq / n_q_heads;
    check(k->value.dim(-1) == d * n_kv_heads && v->value.dim(-1) == d * n_kv_heads,
          "softmax_attention_gqa: kv dim mismatch");
    const int64_t batch = tq.numel() / (t_len * dq);

    auto split = [&](const Var& x, int heads) {
        return reshape(x, {batch, t_len, heads, d});
    };
    Var qh = swap_axes(split(q, n_q_heads), 1, 2);                         // [B,h,T,d]
    Var kh = swap_axes(repeat_kv_heads(split(k, n_kv_heads), group), 1, 2);
    Var vh = swap_axes(repeat_kv_heads(split(v, n_kv_heads), group), 1, 2);

    Var scores = scale(matmul(qh, swap_axes(kh, 2, 3)), 1.0 / std::sqrt(static_cast<double>(d)));
    Var probs = causal ? causal_softmax(scores) : exp(log_softmax_last(scores));
    Var ctx = swap_axes(matmul(probs, vh), 1, 2);  // [B,T,h,d]
    Shape out_shape = tq.shape();
    return reshape(ctx, out_shape);
}

}  // namespace radlads
