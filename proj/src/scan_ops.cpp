// Fused sequence-scan primitives for the recurrent mixers. The parallel
// (quadratic) reference forms live with the mixers; these are the production
// path and carry hand-written adjoints, validated by finite differences.

#include <cmath>
#include <vector>

#include "radlads/autograd.hpp"

namespace radlads {

namespace {

void check_scan_inputs(std::initializer_list<const Var*> seqs, const Var& s0, const char* name) {
    const Tensor& first = (*seqs.begin())->get()->value;
    check(first.rank() == 4, name, ": sequence inputs must be [B,T,h,d], got ",
          shape_str(first.shape()));
    for (const Var* v : seqs) {
        const Tensor& t = (*v)->value;
        check(t.shape() == first.shape(), name, ": input shape ", shape_str(t.shape()),
              " differs from ", shape_str(first.shape()));
        check(t.dtype() == first.dtype(), name, ": dtype mismatch");
        if (!t.all_finite()) fail_numeric(name, ": non-finite input");
    }
    const int64_t b = first.dim(0), h = first.dim(2), d = first.dim(3);
    const Shape want{b, h, d, d};
    check(s0->value.shape() == want, name, ": state must be ", shape_str(want), ", got ",
          shape_str(s0->value.shape()));
    check(s0->value.dtype() == first.dtype(), name, ": state dtype mismatch");
    if (!s0->value.all_finite()) fail_numeric(name, ": non-finite state");
}

}  // namespace

// ---------------------------------------------------------------------------
// wkv6: S_t = diag(w_t) S_{t-1} + k_t^T v_t ;  p_t = r_t S_t
// state layout S[i][j]: i = key channel, j = value channel

ScanOut wkv6_scan(const Var& w, const Var& k, const Var& v, const Var& r, const Var& s0) {
    check_scan_inputs({&w, &k, &v, &r}, s0, "wkv6_scan");
    const Tensor& tw = w->value;
    const int64_t B = tw.dim(0), T = tw.dim(1), H = tw.dim(2), D = tw.dim(3);
    const Dtype dt = tw.dtype();

    Tensor p = Tensor::zeros({B, T, H, D}, dt);
    Tensor s_out = Tensor::zeros({B, H, D, D}, dt);
    // pre-update states per step, plus the final state: [B, T+1, h, d, d]
    auto states = std::make_shared<Tensor>(Tensor::zeros({B, T + 1, H, D, D}, dt));

    with_dtype(dt, [&]<class TT>(TT) {
        const TT* pw = w->value.data<TT>().data();
        const TT* pk = k->value.data<TT>().data();
        const TT* pv = v->value.data<TT>().data();
        const TT* pr = r->value.data<TT>().data();
        const TT* ps0 = s0->value.data<TT>().data();
        TT* pp = p.data<TT>().data();
        TT* pso = s_out.data<TT>().data();
        TT* pst = states->data<TT>().data();
        std::vector<TT> s(static_cast<size_t>(D * D));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < H; ++h) {
                const TT* src0 = ps0 + (b * H + h) * D * D;
                for (int64_t i = 0; i < D * D; ++i) s[static_cast<size_t>(i)] = src0[i];
                for (int64_t t = 0; t < T; ++t) {
                    TT* saved = pst + (((b * (T + 1) + t) * H + h)) * D * D;
                    for (int64_t i = 0; i < D * D; ++i) saved[i] = s[static_cast<size_t>(i)];
                    const int64_t off = ((b * T + t) * H + h) * D;
                    const TT* wt = pw + off;
                    const TT* kt = pk + off;
                    const TT* vt = pv + off;
                    const TT* rt = pr + off;
                    TT* pt = pp + off;
                    for (int64_t i = 0; i < D; ++i) {
                        TT* srow = s.data() + i * D;
                        const TT wi = wt[i], ki = kt[i];
                        for (int64_t j = 0; j < D; ++j) srow[j] = wi * srow[j] + ki * vt[j];
                    }
                    for (int64_t j = 0; j < D; ++j) pt[j] = TT(0);
                    for (int64_t i = 0; i < D; ++i) {
                        const TT ri = rt[i];
                        const TT* srow = s.data() + i * D;
                        for (int64_t j = 0; j < D; ++j) pt[j] += ri * srow[j];
                    }
                }
                TT* savedT = pst + (((b * (T + 1) + T) * H + h)) * D * D;
                TT* dst = pso + (b * H + h) * D * D;
                for (int64_t i = 0; i < D * D; ++i) {
                    savedT[i] = s[static_cast<size_t>(i)];
                    dst[i] = s[static_cast<size_t>(i)];
                }
            }
    });

    Var pv_out = make_var(std::move(p));
    Var sv_out = make_var(std::move(s_out));
    if (Tape::current() && (w->requires_grad || k->requires_grad || v->requires_grad ||
                            r->requires_grad || s0->requires_grad)) {
        pv_out->requires_grad = true;
        sv_out->requires_grad = true;
        Tape::current()->record(
            {pv_out, sv_out}, [w, k, v, r, s0, pv_out, sv_out, states, B, T, H, D]() {
                const bool have_dp = pv_out->has_grad();
                const bool have_ds = sv_out->has_grad();
                if (!have_dp && !have_ds) return;
                const Dtype dt = w->value.dtype();
                Tensor dw = Tensor::zeros(w->value.shape(), dt);
                Tensor dk = Tensor::zeros(w->value.shape(), dt);
                Tensor dv = Tensor::zeros(w->value.shape(), dt);
                Tensor dr = Tensor::zeros(w->value.shape(), dt);
                Tensor ds0 = Tensor::zeros(s0->value.shape(), dt);
                with_dtype(dt, [&]<class TT>(TT) {
                    const TT* pw = w->value.data<TT>().data();
                    const TT* pk = k->value.data<TT>().data();
                    const TT* pv = v->value.data<TT>().data();
                    const TT* pr = r->value.data<TT>().data();
                    const TT* pst = states->data<TT>().data();
                    const TT* gdp = have_dp ? pv_out->grad.data<TT>().data() : nullptr;
                    const TT* gds = have_ds ? sv_out->grad.data<TT>().data() : nullptr;
                    TT* pdw = dw.data<TT>().data();
                    TT* pdk = dk.data<TT>().data();
                    TT* pdv = dv.data<TT>().data();
                    TT* pdr = dr.data<TT>().data();
                    TT* pds0 = ds0.data<TT>().data();
                    std::vector<TT> dS(static_cast<size_t>(D * D));
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t h = 0; h < H; ++h) {
                            if (have_ds) {
                                const TT* src = gds + (b * H + h) * D * D;
                                for (int64_t i = 0; i < D * D; ++i)
                                    dS[static_cast<size_t>(i)] = src[i];
                            } else {
                                std::fill(dS.begin(), dS.end(), TT(0));
                            }
                            for (int64_t t = T - 1; t >= 0; --t) {
                                const int64_t off = ((b * T + t) * H + h) * D;
                                const TT* wt = pw + off;
                                const TT* kt = pk + off;
                                const TT* vt = pv + off;
                                const TT* rt = pr + off;
                                const TT* s_pre = pst + ((b * (T + 1) + t) * H + h) * D * D;
                                const TT* s_post = pst + ((b * (T + 1) + t + 1) * H + h) * D * D;
                                if (have_dp) {
                                    const TT* dpt = gdp + off;
                                    // p[j] = sum_i r[i] S_post[i][j]
                                    for (int64_t i = 0; i < D; ++i) {
                                        const TT* srow = s_post + i * D;
                                        TT* drow = dS.data() + i * D;
                                        TT acc = TT(0);
                                        const TT ri = rt[i];
                                        for (int64_t j = 0; j < D; ++j) {
                                            acc += dpt[j] * srow[j];
                                            drow[j] += ri * dpt[j];
                                        }
                                        pdr[off + i] += acc;
                                    }
                                }
                                // S_post = diag(w) S_pre + k^T v
                                for (int64_t i = 0; i < D; ++i) {
                                    TT* drow = dS.data() + i * D;
                                    const TT* prow = s_pre + i * D;
                                    TT acc_w = TT(0), acc_k = TT(0);
                                    const TT ki = kt[i], wi = wt[i];
                                    for (int64_t j = 0; j < D; ++j) {
                                        acc_w += drow[j] * prow[j];
                                        acc_k += drow[j] * vt[j];
                                        pdv[off + j] += drow[j] * ki;
                                        drow[j] *= wi;
                                    }
                                    pdw[off + i] += acc_w;
                                    pdk[off + i] += acc_k;
                                }
                            }
                            TT* dst = pds0 + (b * H + h) * D * D;
                            for (int64_t i = 0; i < D * D; ++i) dst[i] = dS[static_cast<size_t>(i)];
                        }
                });
                if (w->requires_grad) w->accum_grad(dw);
                if (k->requires_grad) k->accum_grad(dk);
                if (v->requires_grad) v->accum_grad(dv);
                if (r->requires_grad) r->accum_grad(dr);
                if (s0->requires_grad) s0->accum_grad(ds0);
            });
    }
    return {pv_out, sv_out};
}

// ---------------------------------------------------------------------------
// wkv7: Z_t = Z_{t-1} (diag(w_t) - kap_t^T (a_t .* kap_t)) + v_t^T kt_t ;  p_t = r_t Z_t^T
// state layout Z[i][j]: i = value channel, j = key channel

ScanOut wkv7_scan(const Var& w, const Var& kt, const Var& kappa, const Var& a, const Var& v,
                  const Var& r, const Var& s0) {
    check_scan_inputs({&w, &kt, &kappa, &a, &v, &r}, s0, "wkv7_scan");
    const Tensor& tw = w->value;
    const int64_t B = tw.dim(0), T = tw.dim(1), H = tw.dim(2), D = tw.dim(3);
    const Dtype dt = tw.dtype();

    Tensor p = Tensor::zeros({B, T, H, D}, dt);
    Tensor s_out = Tensor::zeros({B, H, D, D}, dt);
    auto states = std::make_shared<Tensor>(Tensor::zeros({B, T + 1, H, D, D}, dt));

    with_dtype(dt, [&]<class TT>(TT) {
        const TT* pw = w->value.data<TT>().data();
        const TT* pkt = kt->value.data<TT>().data();
        const TT* pka = kappa->value.data<TT>().data();
        const TT* pa = a->value.data<TT>().data();
        const TT* pv = v->value.data<TT>().data();
        const TT* pr = r->value.data<TT>().data();
        const TT* ps0 = s0->value.data<TT>().data();
        TT* pp = p.data<TT>().data();
        TT* pso = s_out.data<TT>().data();
        TT* pst = states->data<TT>().data();
        std::vector<TT> z(static_cast<size_t>(D)), bv(static_cast<size_t>(D));
        std::vector<TT> s(static_cast<size_t>(D * D));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < H; ++h) {
                const TT* src0 = ps0 + (b * H + h) * D * D;
                for (int64_t i = 0; i < D * D; ++i) s[static_cast<size_t>(i)] = src0[i];
                for (int64_t t = 0; t < T; ++t) {
                    TT* saved = pst + ((b * (T + 1) + t) * H + h) * D * D;
                    for (int64_t i = 0; i < D * D; ++i) saved[i] = s[static_cast<size_t>(i)];
                    const int64_t off = ((b * T + t) * H + h) * D;
                    const TT* wt = pw + off;
                    const TT* ktt = pkt + off;
                    const TT* kat = pka + off;
                    const TT* at = pa + off;
                    const TT* vt = pv + off;
                    const TT* rt = pr + off;
                    TT* pt = pp + off;
                    for (int64_t j = 0; j < D; ++j) bv[static_cast<size_t>(j)] = at[j] * kat[j];
                    for (int64_t i = 0; i < D; ++i) {
                        TT* srow = s.data() + i * D;
                        TT zi = TT(0);
                        for (int64_t j = 0; j < D; ++j) zi += srow[j] * kat[j];
                        const TT vi = vt[i];
                        TT pi = TT(0);
                        for (int64_t j = 0; j < D; ++j) {
                            srow[j] = srow[j] * wt[j] - zi * bv[static_cast<size_t>(j)] +
                                      vi * ktt[j];
                            pi += srow[j] * rt[j];
                        }
                        pt[i] = pi;
                    }
                }
                TT* savedT = pst + ((b * (T + 1) + T) * H + h) * D * D;
                TT* dst = pso + (b * H + h) * D * D;
                for (int64_t i = 0; i < D * D; ++i) {
                    savedT[i] = s[static_cast<size_t>(i)];
                    dst[i] = s[static_cast<size_t>(i)];
                }
            }
    });

    Var pv_out = make_var(std::move(p));
    Var sv_out = make_var(std::move(s_out));
    if (Tape::current() &&
        (w->requires_grad || kt->requires_grad || kappa->requires_grad || a->requires_grad ||
         v->requires_grad || r->requires_grad || s0->requires_grad)) {
        pv_out->requires_grad = true;
        sv_out->requires_grad = true;
        Tape::current()->record(
            {pv_out, sv_out},
            [w, kt, kappa, a, v, r, s0, pv_out, sv_out, states, B, T, H, D]() {
                const bool have_dp = pv_out->has_grad();
                const bool have_ds = sv_out->has_grad();
                if (!have_dp && !have_ds) return;
                const Dtype dt = w->value.dtype();
                Tensor dw_t = Tensor::zeros(w->value.shape(), dt);
                Tensor dkt_t = Tensor::zeros(w->value.shape(), dt);
                Tensor dka_t = Tensor::zeros(w->value.shape(), dt);
                Tensor da_t = Tensor::zeros(w->value.shape(), dt);
                Tensor dv_t = Tensor::zeros(w->value.shape(), dt);
                Tensor dr_t = Tensor::zeros(w->value.shape(), dt);
                Tensor ds0_t = Tensor::zeros(s0->value.shape(), dt);
                with_dtype(dt, [&]<class TT>(TT) {
                    const TT* pw = w->value.data<TT>().data();
                    const TT* pkt = kt->value.data<TT>().data();
                    const TT* pka = kappa->value.data<TT>().data();
                    const TT* pa = a->value.data<TT>().data();
                    const TT* pv = v->value.data<TT>().data();
                    const TT* pr = r->value.data<TT>().data();
                    const TT* pst = states->data<TT>().data();
                    const TT* gdp = have_dp ? pv_out->grad.data<TT>().data() : nullptr;
                    const TT* gds = have_ds ? sv_out->grad.data<TT>().data() : nullptr;
                    TT* pdw = dw_t.data<TT>().data();
                    TT* pdkt = dkt_t.data<TT>().data();
                    TT* pdka = dka_t.data<TT>().data();
                    TT* pda = da_t.data<TT>().data();
                    TT* pdv = dv_t.data<TT>().data();
                    TT* pdr = dr_t.data<TT>().data();
                    TT* pds0 = ds0_t.data<TT>().data();
                    std::vector<TT> dZ(static_cast<size_t>(D * D));
                    std::vector<TT> z(static_cast<size_t>(D)), dz(static_cast<size_t>(D));
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t h = 0; h < H; ++h) {
                            if (have_ds) {
                                const TT* src = gds + (b * H + h) * D * D;
                                for (int64_t i = 0; i < D * D; ++i)
                                    dZ[static_cast<size_t>(i)] = src[i];
                            } else {
                                std::fill(dZ.begin(), dZ.end(), TT(0));
                            }
                            for (int64_t t = T - 1; t >= 0; --t) {
                                const int64_t off = ((b * T + t) * H + h) * D;
                                const TT* wt = pw + off;
                                const TT* ktt = pkt + off;
                                const TT* kat = pka + off;
                                const TT* at = pa + off;
                                const TT* vt = pv + off;
                                const TT* rt = pr + off;
                                const TT* z_pre = pst + ((b * (T + 1) + t) * H + h) * D * D;
                                const TT* z_post = pst + ((b * (T + 1) + t + 1) * H + h) * D * D;
                                if (have_dp) {
                                    const TT* dpt = gdp + off;
                                    // p[i] = sum_j Z_post[i][j] r[j]
                                    for (int64_t i = 0; i < D; ++i) {
                                        const TT gpi = dpt[i];
                                        const TT* srow = z_post + i * D;
                                        TT* drow = dZ.data() + i * D;
                                        for (int64_t j = 0; j < D; ++j) {
                                            pdr[off + j] += gpi * srow[j];
                                            drow[j] += gpi * rt[j];
                                        }
                                    }
                                }
                                // recompute z_t = Z_pre kappa^T
                                for (int64_t i = 0; i < D; ++i) {
                                    const TT* prow = z_pre + i * D;
                                    TT zi = TT(0);
                                    for (int64_t j = 0; j < D; ++j) zi += prow[j] * kat[j];
                                    z[static_cast<size_t>(i)] = zi;
                                }
                                // Z_post[i][j] = Z_pre[i][j] w[j] - z[i] a[j] kap[j] + v[i] kt[j]
                                for (int64_t i = 0; i < D; ++i) {
                                    TT* drow = dZ.data() + i * D;
                                    const TT* prow = z_pre + i * D;
                                    const TT zi = z[static_cast<size_t>(i)];
                                    const TT vi = vt[i];
                                    TT acc_dz = TT(0), acc_dv = TT(0);
                                    for (int64_t j = 0; j < D; ++j) {
                                        const TT g = drow[j];
                                        pdw[off + j] += g * prow[j];
                                        acc_dz -= g * at[j] * kat[j];
                                        pda[off + j] -= zi * g * kat[j];
                                        pdka[off + j] -= zi * g * at[j];
                                        acc_dv += g * ktt[j];
                                        pdkt[off + j] += g * vi;
                                    }
                                    dz[static_cast<size_t>(i)] = acc_dz;
                                    pdv[off + i] += acc_dv;
                                }
                                // dZ_pre = dZ .cols w + dz^T kappa ; dkappa += Z_pre^T dz
                                for (int64_t i = 0; i < D; ++i) {
                                    TT* drow = dZ.data() + i * D;
                                    const TT* prow = z_pre + i * D;
                                    const TT dzi = dz[static_cast<size_t>(i)];
                                    for (int64_t j = 0; j < D; ++j) {
                                        pdka[off + j] += dzi * prow[j];
                                        drow[j] = drow[j] * wt[j] + dzi * kat[j];
                                    }
                                }
                            }
                            TT* dst = pds0 + (b * H + h) * D * D;
                            for (int64_t i = 0; i < D * D; ++i) dst[i] = dZ[static_cast<size_t>(i)];
                        }
                });
                if (w->requires_grad) w->accum_grad(dw_t);
                if (kt->requires_grad) kt->accum_grad(dkt_t);
                if (kappa->requires_grad) kappa->accum_grad(dka_t);
                if (a->requires_grad) a->accum_grad(da_t);
                if (v->requires_grad) v->accum_grad(dv_t);
                if (r->requires_grad) r->accum_grad(dr_t);
                if (s0->requires_grad) s0->accum_grad(ds0_t);
            });
    }
    return {pv_out, sv_out};
}

}  // namespace radlads
