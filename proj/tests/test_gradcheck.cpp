#include <doctest.h>

#include <cmath>
#include <functional>

#include "gasnet/fusion.hpp"
#include "gasnet/losses.hpp"
#include "gasnet/nets.hpp"
#include "gasnet/rng.hpp"

using namespace gasnet;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::VarId;
using nets::Bindings;
using nets::Param;

namespace {

Tensor<double> random_tensor(Shape sh, uint64_t seed, double lo = -1, double hi = 1) {
    Tensor<double> x(sh);
    for (int64_t i = 0; i < x.size(); ++i)
        x[i] = lo + (hi - lo) * rng::uniform(seed, 0x99, i);
    return x;
}

// max relative error between analytic gradient and central differences,
// perturbing the underlying buffer of each leaf
double max_rel_err(const std::function<double()>& eval,
                   const std::function<Tensor<double>(void)>& analytic,
                   Tensor<double>& theta) {
    const Tensor<double> g = analytic();
    double worst = 0;
    for (int64_t i = 0; i < theta.size(); ++i) {
        const double h = 1e-5 * (1.0 + std::abs(theta[i]));
        const double orig = theta[i];
        theta[i] = orig + h;
        const double fp = eval();
        theta[i] = orig - h;
        const double fm = eval();
        theta[i] = orig;
        const double fd = (fp - fm) / (2 * h);
        const double denom = std::max({std::abs(g[i]), std::abs(fd), 1e-6});
        worst = std::max(worst, std::abs(g[i] - fd) / denom);
    }
    return worst;
}

}  // namespace

TEST_CASE("op-level gradients match central differences") {
    Tensor<double> x = random_tensor({2, 2, 3, 4, 4}, 1);

    auto check_op = [&](const std::function<VarId(Tape<double>&, VarId)>& op) {
        auto eval = [&] {
            Tape<double> t(false);
            return t.scalar(t.mean_all(op(t, t.constant(x))));
        };
        auto analytic = [&] {
            Tape<double> t(true);
            const VarId xi = t.leaf(x, true);
            const VarId l = t.mean_all(op(t, xi));
            t.backward(l);
            return t.grad(xi);
        };
        return max_rel_err(eval, analytic, x);
    };

    SUBCASE("activations") {
        CHECK(check_op([](Tape<double>& t, VarId v) { return t.sigmoid_(v); }) < 1e-6);
        CHECK(check_op([](Tape<double>& t, VarId v) { return t.tanh_(v); }) < 1e-6);
        CHECK(check_op([](Tape<double>& t, VarId v) { return t.leaky_relu(v, 0.2); }) < 1e-4);
        CHECK(check_op([](Tape<double>& t, VarId v) {
                  return t.mul(v, t.scale_add(v, 2.0, 0.3));
              }) < 1e-6);
    }
    SUBCASE("reductions") {
        CHECK(check_op([](Tape<double>& t, VarId v) { return t.spatial_mean(v); }) < 1e-6);
        CHECK(check_op([](Tape<double>& t, VarId v) { return t.max_spatial(v); }) < 1e-4);
        CHECK(check_op([](Tape<double>& t, VarId v) { return t.lse_spatial(v, 50.0); }) <
              1e-5);
        CHECK(check_op([](Tape<double>& t, VarId v) {
                  return t.log_(t.clamp_prob(t.sigmoid_(v), 1e-6));
              }) < 1e-5);
    }
    SUBCASE("upsample and concat") {
        CHECK(check_op([](Tape<double>& t, VarId v) { return t.upsample_nearest2(v); }) <
              1e-6);
        CHECK(check_op([](Tape<double>& t, VarId v) { return t.concat_ch(v, v); }) < 1e-6);
    }
}

TEST_CASE("conv3d gradients (input, weight, bias) match central differences") {
    Tensor<double> x = random_tensor({2, 2, 4, 4, 4}, 2);
    Tensor<double> w = random_tensor({3, 2, 3, 3, 3}, 3, -0.3, 0.3);
    Tensor<double> b = random_tensor({3}, 4, -0.1, 0.1);

    for (const int stride : {1, 2}) {
        auto eval = [&] {
            Tape<double> t(false);
            return t.scalar(t.mean_all(
                t.conv3d(t.constant(x), t.constant(w), t.constant(b), stride, 1)));
        };
        auto run = [&](Tensor<double>& target) {
            auto analytic = [&] {
                Tape<double> t(true);
                const VarId xi = t.leaf(x, true);
                const VarId wi = t.leaf(w, true);
                const VarId bi = t.leaf(b, true);
                const VarId l = t.mean_all(t.conv3d(xi, wi, bi, stride, 1));
                t.backward(l);
                if (target.buf == x.buf) return t.grad(xi);
                if (target.buf == w.buf) return t.grad(wi);
                return t.grad(bi);
            };
            return max_rel_err(eval, analytic, target);
        };
        CHECK(run(x) < 1e-6);
        CHECK(run(w) < 1e-6);
        CHECK(run(b) < 1e-6);
    }
}

TEST_CASE("group_norm gradients match central differences") {
    Tensor<double> x = random_tensor({2, 4, 2, 3, 3}, 5);
    Tensor<double> gm = random_tensor({4}, 6, 0.5, 1.5);
    Tensor<double> be = random_tensor({4}, 7, -0.2, 0.2);
    for (const int groups : {1, 2, 4}) {
        auto eval = [&] {
            Tape<double> t(false);
            const VarId y =
                t.group_norm(t.constant(x), t.constant(gm), t.constant(be), groups);
            return t.scalar(t.mean_all(t.mul(y, y)));  // quadratic head
        };
        auto run = [&](Tensor<double>& target) {
            auto analytic = [&] {
                Tape<double> t(true);
                const VarId xi = t.leaf(x, true);
                const VarId gi = t.leaf(gm, true);
                const VarId bi = t.leaf(be, true);
                const VarId y = t.group_norm(xi, gi, bi, groups);
                t.backward(t.mean_all(t.mul(y, y)));
                if (target.buf == x.buf) return t.grad(xi);
                if (target.buf == gm.buf) return t.grad(gi);
                return t.grad(bi);
            };
            return max_rel_err(eval, analytic, target);
        };
        CHECK(run(x) < 1e-4);
        CHECK(run(gm) < 1e-5);
        CHECK(run(be) < 1e-6);
    }
}

TEST_CASE("spectral_norm gradient matches central differences at convergence") {
    Tensor<double> w = random_tensor({3, 2, 2, 2, 2}, 8, -0.5, 0.5);
    std::vector<double> u;
    auto eval = [&] {
        Tape<double> t(false);
        const VarId wn = t.spectral_norm(t.constant(w), &u, 500, 1e-14);
        return t.scalar(t.mean_all(t.mul(wn, wn)));
    };
    auto analytic = [&] {
        Tape<double> t(true);
        const VarId wi = t.leaf(w, true);
        const VarId wn = t.spectral_norm(wi, &u, 500, 1e-14);
        t.backward(t.mean_all(t.mul(wn, wn)));
        return t.grad(wi);
    };
    CHECK(max_rel_err(eval, analytic, w) < 1e-4);
}

// ---- full composed objectives on tiny nets (the acceptance-grade check) ----

namespace {

struct TinySetup {
    nets::Segmenter3D<double> S;
    nets::Generator3D<double> G;
    nets::Discriminator3D<double> D;
    Tensor<double> x_d{{1, 1, 4, 4, 4}};
    Tensor<double> x_h{{1, 1, 4, 4, 4}};
    Tensor<double> x_l{{1, 1, 4, 4, 4}};
    Tensor<double> m_l{{1, 1, 4, 4, 4}};
    Tensor<double> x_ps{{1, 1, 4, 4, 4}};
    Tensor<double> m_ps{{1, 1, 4, 4, 4}};
    losses::LossWeights w;

    TinySetup()
        : S({1, 1, 2}, 17), G({1, 1, 0}, 17), D({1, 2, 1, true}, 17) {
        // evaluate at a generic point: zero-initialized biases/affines put
        // ReLU inputs exactly on their kinks, where finite differences and
        // subgradients legitimately disagree
        uint64_t ctr = 0;
        auto jitter = [&ctr](std::vector<Param<double>*> ps) {
            for (auto* p : ps)
                for (int64_t i = 0; i < p->value.size(); ++i)
                    p->value[i] += 0.05 * rng::normal(0x71773e5, 1, ctr++);
        };
        jitter(S.params());
        jitter(G.params());
        jitter(D.params());

        x_d = random_tensor({1, 1, 4, 4, 4}, 21);
        x_h = random_tensor({1, 1, 4, 4, 4}, 22);
        x_l = random_tensor({1, 1, 4, 4, 4}, 23);
        for (int64_t i = 0; i < m_l.size(); ++i)
            m_l[i] = rng::uniform(24, 1, i) > 0.7 ? 1.0 : 0.0;
        w.lambda_s = 10.0;  // keep all parts on the same numeric scale

        // pseudo pair synthesized once from the unperturbed segmenter: the
        // detach makes (I_ps, M_ps) data, not a function of theta
        Tape<double> t(false);
        const Tensor<double> m_hat = t.val(S.forward(t, t.constant(x_d)));
        fusion::PseudoSynthConfig pcfg;
        for (int64_t i = 0; i < x_ps.size(); ++i) {
            const float p = static_cast<float>(m_hat[i]);  // lung mask = 1
            x_ps[i] = x_h[i] * (1.0 - p) + x_d[i] * p;
            m_ps[i] = static_cast<double>(fusion::pseudo_label(p, pcfg));
        }
    }

    // Composed S/G objective; binds S and G when requested, D always frozen.
    double gs_objective(Bindings<double>* bs, Bindings<double>* bg, Tape<double>& t) {
        const VarId xd = t.constant(x_d);
        const VarId m_hat_d = S.forward(t, xd, bs);
        const VarId i_g_d = G.forward(t, xd, bg);
        const VarId i_s = fusion::fuse_synthetic_t(t, m_hat_d, i_g_d, xd);
        const VarId d_is = D.forward(t, i_s, nullptr);
        const VarId d_ig = D.forward(t, i_g_d, nullptr);

        losses::GsParts<double> parts;
        parts.adv_gs = losses::loss_adv_gs(t, d_is, d_ig, w);
        parts.mil = losses::loss_mil(t, m_hat_d, w);
        const VarId xh = t.constant(x_h);
        parts.recons = losses::loss_recons(t, G.forward(t, xh, bg), xh);
        parts.seg_healthy =
            losses::loss_seg_ce(t, S.forward(t, xh, bs), Tensor<double>({1, 1, 4, 4, 4}));
        parts.seg_labeled =
            losses::loss_seg_ce(t, S.forward(t, t.constant(x_l), bs), m_l);
        parts.ps = losses::loss_seg_ce(t, S.forward(t, t.constant(x_ps), bs), m_ps);
        return t.scalar(losses::compose_gs_objective(t, parts, w));
    }

    double d_objective(Bindings<double>* bd, Tape<double>& t) {
        // S, G frozen: synthetic inputs are constants
        Tensor<double> m_hat, i_g;
        {
            Tape<double> ti(false);
            const VarId xd = ti.constant(x_d);
            m_hat = ti.val(S.forward(ti, xd));
            i_g = ti.val(G.forward(ti, xd));
        }
        Tensor<double> i_s(x_d.shape);
        for (int64_t i = 0; i < i_s.size(); ++i)
            i_s[i] = m_hat[i] * i_g[i] + (1 - m_hat[i]) * x_d[i];
        const VarId d_is = D.forward(t, t.constant(i_s), bd);
        const VarId d_ih = D.forward(t, t.constant(x_h), bd);
        const VarId d_id = D.forward(t, t.constant(x_d), bd);
        const VarId d_ig = D.forward(t, t.constant(i_g), bd);
        return t.scalar(losses::loss_adv_d(t, d_is, d_ih, d_id, d_ig, w));
    }
};

// Checks every parameter of `params` against central differences of `eval`.
// `run_backward` must stash each bound param's analytic gradient in its
// Adam scratch buffer p->m (unused by these tests otherwise).
void check_all_params(const std::function<double()>& eval,
                      const std::function<void(Bindings<double>&)>& run_backward,
                      std::vector<Param<double>*> params, const char* what) {
    Bindings<double> binds;
    run_backward(binds);

    int64_t checked = 0;
    double worst = 0;
    std::string worst_name;
    double worst_a = 0, worst_fd = 0;
    for (auto* p : params) {
        const VarId id = binds.find(p);
        REQUIRE(id.valid());
        // analytic gradient captured by the caller through binds' tape is
        // stored in p->m as scratch by run_backward
        for (int64_t i = 0; i < p->value.size(); ++i) {
            const double h = 1e-6 * (1.0 + std::abs(p->value[i]));
            const double orig = p->value[i];
            p->value[i] = orig + h;
            const double fp = eval();
            p->value[i] = orig - h;
            const double fm = eval();
            p->value[i] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double a = p->m[i];  // scratch: analytic gradient
            // the 1e-4 floor keeps sub-FD-noise gradients (|g| ~ 1e-8 vs
            // roundoff ~ eps*|f|/h ~ 1e-9) from drowning the relative test
            const double denom = std::max({std::abs(a), std::abs(fd), 1e-4});
            const double rel = std::abs(a - fd) / denom;
            if (rel > worst) {
                worst = rel;
                worst_name = p->name + "[" + std::to_string(i) + "]";
                worst_a = a;
                worst_fd = fd;
            }
            ++checked;
        }
    }
    INFO(what << ": checked " << checked << " parameters, worst rel err " << worst
              << " at " << worst_name << " analytic=" << worst_a << " fd=" << worst_fd);
    CHECK(worst <= 1e-3);
}

}  // namespace

TEST_CASE("composed S/G objective: analytic gradients vs central differences") {
    TinySetup ts;
    REQUIRE(nets::param_count(ts.S.params()) <= 1000);
    REQUIRE(nets::param_count(ts.G.params()) <= 1000);
    REQUIRE(nets::param_count(ts.D.params()) <= 1000);

    auto eval = [&] {
        Tape<double> t(false);
        return ts.gs_objective(nullptr, nullptr, t);
    };
    auto run_backward = [&](Bindings<double>& binds) {
        Tape<double> t2(true);
        Bindings<double> bs2, bg2;
        const VarId xd = t2.constant(ts.x_d);
        const VarId m_hat_d = ts.S.forward(t2, xd, &bs2);
        const VarId i_g_d = ts.G.forward(t2, xd, &bg2);
        const VarId i_s = fusion::fuse_synthetic_t(t2, m_hat_d, i_g_d, xd);
        const VarId d_is = ts.D.forward(t2, i_s, nullptr);
        const VarId d_ig = ts.D.forward(t2, i_g_d, nullptr);
        losses::GsParts<double> parts;
        parts.adv_gs = losses::loss_adv_gs(t2, d_is, d_ig, ts.w);
        parts.mil = losses::loss_mil(t2, m_hat_d, ts.w);
        const VarId xh = t2.constant(ts.x_h);
        parts.recons = losses::loss_recons(t2, ts.G.forward(t2, xh, &bg2), xh);
        parts.seg_healthy = losses::loss_seg_ce(t2, ts.S.forward(t2, xh, &bs2),
                                                Tensor<double>({1, 1, 4, 4, 4}));
        parts.seg_labeled =
            losses::loss_seg_ce(t2, ts.S.forward(t2, t2.constant(ts.x_l), &bs2), ts.m_l);
        parts.ps = losses::loss_seg_ce(t2, ts.S.forward(t2, t2.constant(ts.x_ps), &bs2),
                                       ts.m_ps);
        const VarId total = losses::compose_gs_objective(t2, parts, ts.w);
        t2.backward(total);
        for (auto& [p, id] : bs2.items) {
            p->m = t2.grad(id).clone();  // stash analytic gradient in scratch
            binds.items.push_back({p, id});
        }
        for (auto& [p, id] : bg2.items) {
            p->m = t2.grad(id).clone();
            binds.items.push_back({p, id});
        }
    };
    std::vector<Param<double>*> all = ts.S.params();
    for (auto* p : ts.G.params()) all.push_back(p);
    check_all_params(eval, run_backward, all, "S/G objective");
}

TEST_CASE("D objective: analytic gradients vs central differences") {
    TinySetup ts;
    auto eval = [&] {
        Tape<double> t(false);
        return ts.d_objective(nullptr, t);
    };
    auto run_backward = [&](Bindings<double>& binds) {
        Tape<double> t(true);
        Bindings<double> bd;
        Tensor<double> m_hat, i_g;
        {
            Tape<double> ti(false);
            const VarId xd = ti.constant(ts.x_d);
            m_hat = ti.val(ts.S.forward(ti, xd));
            i_g = ti.val(ts.G.forward(ti, xd));
        }
        Tensor<double> i_s(ts.x_d.shape);
        for (int64_t i = 0; i < i_s.size(); ++i)
            i_s[i] = m_hat[i] * i_g[i] + (1 - m_hat[i]) * ts.x_d[i];
        const VarId d_is = ts.D.forward(t, t.constant(i_s), &bd);
        const VarId d_ih = ts.D.forward(t, t.constant(ts.x_h), &bd);
        const VarId d_id = ts.D.forward(t, t.constant(ts.x_d), &bd);
        const VarId d_ig = ts.D.forward(t, t.constant(i_g), &bd);
        const VarId loss = losses::loss_adv_d(t, d_is, d_ih, d_id, d_ig, ts.w);
        t.backward(loss);
        for (auto& [p, id] : bd.items) {
            p->m = t.grad(id).clone();
            binds.items.push_back({p, id});
        }
    };
    check_all_params(eval, run_backward, ts.D.params(), "D objective");
}

TEST_CASE("descent property: a small S/G step does not increase E[D(I_s)]") {
    TinySetup ts;
    ts.w.lambda_s = 0.0 + 1e-9;  // adversarial part only drives this check
    ts.w.use_mil = false;
    ts.w.use_recons = false;
    ts.w.use_ig_to_d = false;

    auto eval_d_is = [&] {
        Tape<double> t(false);
        const VarId xd = t.constant(ts.x_d);
        const VarId m = ts.S.forward(t, xd);
        const VarId g = ts.G.forward(t, xd);
        const VarId i_s = fusion::fuse_synthetic_t(t, m, g, xd);
        double s = 0;
        const auto& dv = t.val(ts.D.forward(t, i_s));
        for (int64_t i = 0; i < dv.size(); ++i) s += dv[i];
        return s / dv.size();
    };

    const double before = eval_d_is();

    // gradient of the adversarial S/G loss
    Tape<double> t(true);
    Bindings<double> bs, bg;
    const VarId xd = t.constant(ts.x_d);
    const VarId m = ts.S.forward(t, xd, &bs);
    const VarId g = ts.G.forward(t, xd, &bg);
    const VarId i_s = fusion::fuse_synthetic_t(t, m, g, xd);
    const VarId d_is = ts.D.forward(t, i_s, nullptr);
    const VarId loss = losses::loss_adv_gs(t, d_is, {}, ts.w);
    t.backward(loss);

    std::vector<std::pair<Param<double>*, Tensor<double>>> grads;
    for (auto& [p, id] : bs.items) grads.push_back({p, t.grad(id).clone()});
    for (auto& [p, id] : bg.items) grads.push_back({p, t.grad(id).clone()});

    double lr = 1e-3;
    bool decreased = false;
    for (int attempt = 0; attempt < 12 && !decreased; ++attempt, lr /= 2) {
        for (auto& [p, gr] : grads)
            for (int64_t i = 0; i < p->value.size(); ++i) p->value[i] -= lr * gr[i];
        const double after = eval_d_is();
        if (after <= before) decreased = true;
        else
            for (auto& [p, gr] : grads)  // roll back and halve the step
                for (int64_t i = 0; i < p->value.size(); ++i) p->value[i] += lr * gr[i];
    }
    CHECK(decreased);
}
