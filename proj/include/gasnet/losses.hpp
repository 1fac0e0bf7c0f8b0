#pragma once

// The seven loss terms and their phase-wise composition. Tape-level
// functions build differentiable graphs; *_value wrappers evaluate the same
// code on a throwaway tape for tests and reporting. Every log runs on
// probabilities clamped to [kProbEps, 1-kProbEps].

#include <map>
#include <string>
#include <vector>

#include "gasnet/tape.hpp"

namespace gasnet::losses {

using ad::Tape;
using ad::Tensor;
using ad::VarId;

constexpr double kProbEps = 1e-6;

struct LossWeights {
    double lambda_s = 100.0;
    bool use_recons = true;
    bool use_ig_to_d = true;
    bool use_id_to_d = true;
    bool use_mil = true;
    bool use_ps = true;
    bool non_saturating_gs = false;  // -log(1-D(I_s)) variant for the S/G phase
    bool mil_smooth_max = false;     // log-sum-exp instead of exact max
    double mil_lse_temp = 100.0;
};

inline void validate(const LossWeights& w) {
    if (!(w.lambda_s > 0)) throw ConfigError("losses: lambda_s > 0 required");
}

// Per-step telemetry; keys present only for terms actually computed.
struct LossReport {
    std::map<std::string, double> values;

    bool has(const std::string& k) const { return values.count(k) != 0; }
    double get(const std::string& k) const { return values.at(k); }
    void set(const std::string& k, double v) { values[k] = v; }
};

namespace detail {

template <class T>
VarId mean_log(Tape<T>& t, VarId p) {
    return t.mean_all(t.log_(t.clamp_prob(p, static_cast<T>(kProbEps))));
}

template <class T>
VarId mean_log_one_minus(Tape<T>& t, VarId p) {
    return mean_log(t, t.scale_add(p, T(-1), T(1)));
}

template <class T>
void check_batch(Tape<T>& t, VarId p, const char* what) {
    if (!p.valid() || t.val(p).size() == 0)
        throw Error(std::string(what) + ": empty batch");
}

}  // namespace detail

// D ascends E[log D(I_s)] + E[log(1-D(I_h))] (+ E[log D(I_d)] + E[log D(I_g)]
// behind their flags); returned negated for a minimizing optimizer.
template <class T>
VarId loss_adv_d(Tape<T>& t, VarId d_is, VarId d_ih, VarId d_id, VarId d_ig,
                 const LossWeights& w) {
    detail::check_batch(t, d_is, "loss_adv_d");
    detail::check_batch(t, d_ih, "loss_adv_d");
    std::vector<std::pair<VarId, T>> items;
    items.push_back({detail::mean_log(t, d_is), T(-1)});
    items.push_back({detail::mean_log_one_minus(t, d_ih), T(-1)});
    if (w.use_id_to_d) {
        detail::check_batch(t, d_id, "loss_adv_d (IdToD)");
        items.push_back({detail::mean_log(t, d_id), T(-1)});
    }
    if (w.use_ig_to_d) {
        detail::check_batch(t, d_ig, "loss_adv_d (IgToD)");
        items.push_back({detail::mean_log(t, d_ig), T(-1)});
    }
    return t.wsum(items);
}

// S and G minimize E[log D(I_s)] (+ E[log D(I_g)] when enabled); the
// non-saturating variant minimizes -E[log(1-D(.))] instead.
template <class T>
VarId loss_adv_gs(Tape<T>& t, VarId d_is, VarId d_ig, const LossWeights& w) {
    detail::check_batch(t, d_is, "loss_adv_gs");
    auto term = [&](VarId p) {
        if (w.non_saturating_gs)
            return std::pair<VarId, T>{detail::mean_log_one_minus(t, p), T(-1)};
        return std::pair<VarId, T>{detail::mean_log(t, p), T(1)};
    };
    std::vector<std::pair<VarId, T>> items{term(d_is)};
    if (w.use_ig_to_d) {
        detail::check_batch(t, d_ig, "loss_adv_gs (IgToD)");
        items.push_back(term(d_ig));
    }
    return t.wsum(items);
}

// MSE(G(I_h), I_h)
template <class T>
VarId loss_recons(Tape<T>& t, VarId g_on_ih, VarId i_h) {
    return t.mse_loss(g_on_ih, i_h);
}

// -log(max S(I_d)) per volume, batch-averaged
template <class T>
VarId loss_mil(Tape<T>& t, VarId m_hat_d, const LossWeights& w) {
    VarId mx = w.mil_smooth_max
                   ? t.lse_spatial(m_hat_d, static_cast<T>(w.mil_lse_temp))
                   : t.max_spatial(m_hat_d);
    return t.wsum({{detail::mean_log(t, mx), T(-1)}});
}

// Mean BCE over voxels whose target != 2 (the ignore label).
template <class T>
VarId loss_seg_ce(Tape<T>& t, VarId m_hat, const Tensor<T>& target) {
    return t.bce_masked(m_hat, target, static_cast<T>(kProbEps));
}

// Composed S/G-phase objective. Invalid VarIds mean "not computed this step".
template <class T>
struct GsParts {
    VarId adv_gs, recons, seg_labeled, seg_healthy, mil, ps;
};

template <class T>
VarId compose_gs_objective(Tape<T>& t, const GsParts<T>& p, const LossWeights& w) {
    std::vector<std::pair<VarId, T>> items;
    auto push = [&](VarId id, T weight) {
        if (!id.valid()) return;
        if (!std::isfinite(static_cast<double>(t.scalar(id))))
            throw TrainError("compose_gs_objective: non-finite loss part");
        items.push_back({id, weight});
    };
    const T ls = static_cast<T>(w.lambda_s);
    push(p.adv_gs, T(1));
    push(p.recons, T(1));
    push(p.seg_labeled, ls);
    push(p.seg_healthy, ls);
    push(p.mil, ls);
    push(p.ps, ls);
    if (items.empty()) return t.constant(Tensor<T>::full({1}, T(0)));
    return t.wsum(items);
}

// Same composition on reported scalar values.
inline double compose_gs_total(const LossReport& r, const LossWeights& w) {
    double total = 0;
    auto add = [&](const char* k, double weight) {
        if (r.has(k)) total += weight * r.get(k);
    };
    add("adv_gs", 1.0);
    add("recons", 1.0);
    add("seg_labeled", w.lambda_s);
    add("seg_healthy", w.lambda_s);
    add("mil", w.lambda_s);
    add("ps", w.lambda_s);
    return total;
}

// ---- value-level wrappers (tests, telemetry) ----

namespace detail {

inline VarId vec_leaf(Tape<double>& t, const std::vector<double>& v) {
    if (v.empty()) return VarId{};
    return t.constant(Tensor<double>::from(v, {static_cast<int>(v.size())}));
}

}  // namespace detail

inline double loss_adv_d_value(const std::vector<double>& d_is,
                               const std::vector<double>& d_ih,
                               const std::vector<double>& d_id,
                               const std::vector<double>& d_ig,
                               const LossWeights& w = {}) {
    Tape<double> t(false);
    return t.scalar(loss_adv_d(t, detail::vec_leaf(t, d_is), detail::vec_leaf(t, d_ih),
                               detail::vec_leaf(t, d_id), detail::vec_leaf(t, d_ig), w));
}

inline double loss_adv_gs_value(const std::vector<double>& d_is,
                                const std::vector<double>& d_ig,
                                const LossWeights& w = {}) {
    Tape<double> t(false);
    return t.scalar(loss_adv_gs(t, detail::vec_leaf(t, d_is), detail::vec_leaf(t, d_ig), w));
}

inline double loss_recons_value(const Tensor<double>& a, const Tensor<double>& b) {
    Tape<double> t(false);
    return t.scalar(t.mse_loss(t.constant(a), t.constant(b)));
}

inline double loss_mil_value(const Tensor<double>& m_hat, const LossWeights& w = {}) {
    Tape<double> t(false);
    return t.scalar(loss_mil(t, t.constant(m_hat), w));
}

inline double loss_seg_ce_value(const Tensor<double>& m_hat, const Tensor<double>& target) {
    Tape<double> t(false);
    return t.scalar(loss_seg_ce(t, t.constant(m_hat), target));
}

}  // namespace gasnet::losses
