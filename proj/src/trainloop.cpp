#include "gasnet/trainloop.hpp"

#include <cstdlib>
#include <future>

#include <nlohmann/json.hpp>

#include "gasnet/checkpoint.hpp"
#include "gasnet/rng.hpp"

namespace gasnet::trainloop {

using json = nlohmann::json;
using ad::Tape;
using ad::Tensor;
using ad::VarId;
using voldata::Domain;
using voldata::MaskKind;

void validate(const TrainConfig& c) {
    if (c.repeat_g < 1 || c.repeat_d < 1)
        throw ConfigError("train: repeat_g and repeat_d must be >= 1");
    if (c.iter_ps < 0 || c.iter_ps > c.max_iter)
        throw ConfigError("train: 0 <= iter_ps <= max_iter required");
    if (c.batch_size < 2)
        throw ConfigError("train: batch_size >= 2 required (one diseased + one healthy)");
    if (c.val_iter < 1) throw ConfigError("train: val_iter >= 1 required");
    if (!(c.lr_s > 0 && c.lr_g > 0 && c.lr_d > 0))
        throw ConfigError("train: learning rates must be positive");
    losses::validate(c.weights);
    fusion::validate(c.pseudo);
    preprocess::validate(c.augment);
}

namespace {

json net_cfg_json(const nets::SegmenterConfig& c) {
    return {{"in_channels", c.in_channels},
            {"base_channels", c.base_channels},
            {"depth", c.depth}};
}
json net_cfg_json(const nets::GeneratorConfig& c) {
    return {{"in_channels", c.in_channels},
            {"base_channels", c.base_channels},
            {"n_resblocks", c.n_resblocks}};
}
json net_cfg_json(const nets::DiscriminatorConfig& c) {
    return {{"in_channels", c.in_channels},
            {"base_channels", c.base_channels},
            {"n_downsamples", c.n_downsamples},
            {"spectral_norm", c.spectral_norm}};
}

Tensor<float> stack_volumes(const std::vector<Sample>& ss) {
    const auto& sh = ss.front().vol.shape;
    Tensor<float> t({static_cast<int>(ss.size()), 1, sh[0], sh[1], sh[2]});
    const int64_t m = ss.front().vol.size();
    for (size_t n = 0; n < ss.size(); ++n)
        std::copy(ss[n].vol.data.begin(), ss[n].vol.data.end(), t.data() + n * m);
    return t;
}

Tensor<float> stack_masks(const std::vector<Sample>& ss) {
    const auto& sh = ss.front().vol.shape;
    Tensor<float> t({static_cast<int>(ss.size()), 1, sh[0], sh[1], sh[2]});
    const int64_t m = ss.front().vol.size();
    for (size_t n = 0; n < ss.size(); ++n) {
        if (!ss[n].mask) throw TrainError("sample '" + ss[n].case_id + "' lacks a mask");
        std::copy(ss[n].mask->data.begin(), ss[n].mask->data.end(), t.data() + n * m);
    }
    return t;
}

double batch_mean(const Tensor<float>& t) {
    double s = 0;
    for (int64_t i = 0; i < t.size(); ++i) s += t[i];
    return t.size() ? s / t.size() : 0.0;
}

Volume tensor_slice_volume(const Tensor<float>& t, int n, std::array<int, 3> shape) {
    Volume v = Volume::zeros(shape, Domain::unit_normalized);
    const int64_t m = v.size();
    std::copy(t.data() + n * m, t.data() + (n + 1) * m, v.data.begin());
    return v;
}

SegMask tensor_slice_prob(const Tensor<float>& t, int n, std::array<int, 3> shape) {
    SegMask m = SegMask::zeros(shape, MaskKind::prob);
    const int64_t k = m.size();
    std::copy(t.data() + n * k, t.data() + (n + 1) * k, m.data.begin());
    return m;
}

// I_s on plain tensors for the D phase (S, G frozen, no gradients needed)
Tensor<float> fuse_tensors(const Tensor<float>& m, const Tensor<float>& g,
                           const Tensor<float>& d) {
    Tensor<float> out(d.shape);
    for (int64_t i = 0; i < out.size(); ++i)
        out[i] = m[i] * g[i] + (1.0f - m[i]) * d[i];
    return out;
}

}  // namespace

Trainer::Trainer(const nets::SegmenterConfig& sc, const nets::GeneratorConfig& gc,
                 const nets::DiscriminatorConfig& dc, const TrainConfig& cfg,
                 const DatasetManifest& manifest, fs::path out_dir)
    : nets_(sc, gc, dc, cfg.seed), cfg_(cfg), out_dir_(std::move(out_dir)) {
    trainloop::validate(cfg_);
    fs::create_directories(out_dir_);
    opt_s_.lr = cfg_.lr_s;
    opt_g_.lr = cfg_.lr_g;
    opt_d_.lr = cfg_.lr_d;

    auto cache = [&](const voldata::CaseRecord& rec, bool need_lesion) {
        CachedCase c;
        c.id = rec.case_id;
        c.label = rec.class_label;
        c.vol = voldata::load_volume(rec.volume_path);
        if (c.vol.domain != Domain::unit_normalized)
            throw TrainError("case '" + rec.case_id +
                             "' is not preprocessed (domain != unit_normalized)");
        if (vol_shape_[0] == 0) vol_shape_ = c.vol.shape;
        if (c.vol.shape != vol_shape_)
            throw TrainError("case '" + rec.case_id + "' shape differs from dataset shape");
        if (rec.lesion_mask_path) c.lesion = voldata::load_mask(*rec.lesion_mask_path);
        else if (need_lesion)
            throw TrainError("case '" + rec.case_id + "' lacks required lesion mask");
        if (rec.lung_mask_path) c.lung = voldata::load_mask(*rec.lung_mask_path);
        return c;
    };
    for (const auto& rec : manifest.train_volume_level) {
        auto c = cache(rec, false);
        (c.label == ClassLabel::diseased ? diseased_ : healthy_).push_back(std::move(c));
    }
    for (const auto& rec : manifest.train_voxel_level) labeled_.push_back(cache(rec, true));
    for (const auto& rec : manifest.val) val_.push_back(cache(rec, true));

    if (diseased_.empty()) throw TrainError("empty required split: no diseased training cases");
    if (healthy_.empty()) throw TrainError("empty required split: no healthy training cases");
    if (labeled_.empty()) throw TrainError("empty required split: no voxel-labeled cases");
    if (val_.empty()) throw TrainError("empty required split: no validation cases");

    if (const char* env = std::getenv("GASNET_NUM_WORKERS"))
        loader_workers_ = std::max(0, std::atoi(env));

    log_path_ = out_dir_ / "train_log.ndjson";
    log_.open(log_path_, std::ios::app);
    if (!log_) throw IoError("cannot open training log: " + log_path_.string());
}

Sample Trainer::make_sample(const CachedCase& c, bool with_lesion, long aug_draw) {
    Sample s;
    s.case_id = c.id;
    std::optional<SegMask> mask;
    if (with_lesion) {
        if (!c.lesion) throw TrainError("case '" + c.id + "' lacks a lesion mask");
        mask = c.lesion;
    } else if (c.label == ClassLabel::healthy && c.lung) {
        mask = c.lung;  // transported through augmentation for pseudo synthesis
    }
    if (!cfg_.augment_enabled) {
        s.vol = c.vol;
        s.mask = std::move(mask);
        return s;
    }
    preprocess::AugmentConfig ac = cfg_.augment;
    ac.seed = ac.seed ? ac.seed : (cfg_.seed ^ 0xa7631);
    auto [v, m] = preprocess::augment(c.vol, mask, ac, static_cast<uint64_t>(aug_draw));
    s.vol = std::move(v);
    s.mask = std::move(m);
    return s;
}

Batch Trainer::sample_batch(long draw, bool with_labeled) {
    const int n_d = cfg_.batch_size / 2;
    const int n_h = cfg_.batch_size - n_d;
    Batch b;
    const uint64_t base = static_cast<uint64_t>(draw) * 64;
    for (int i = 0; i < n_d; ++i) {
        const auto idx = rng::uniform_int(cfg_.seed, rng::kStreamSample, base + i, 0,
                                          static_cast<int64_t>(diseased_.size()) - 1);
        b.diseased.push_back(make_sample(diseased_[idx], false, draw * 64 + i));
    }
    for (int i = 0; i < n_h; ++i) {
        const auto idx = rng::uniform_int(cfg_.seed, rng::kStreamSample, base + 16 + i, 0,
                                          static_cast<int64_t>(healthy_.size()) - 1);
        b.healthy.push_back(make_sample(healthy_[idx], false, draw * 64 + 16 + i));
    }
    if (with_labeled) {
        const auto idx = rng::uniform_int(cfg_.seed, rng::kStreamSample, base + 32, 0,
                                          static_cast<int64_t>(labeled_.size()) - 1);
        b.labeled.push_back(make_sample(labeled_[idx], true, draw * 64 + 32));
    }
    return b;
}

void Trainer::build_gs_graph(Tape<float>& t, const Batch& b, long iter, GsGraph& g) {
    const auto& w = cfg_.weights;
    const long draw = iter;  // pairing stream counter; unique per S/G step below

    if (!b.diseased.empty()) {
        const VarId x_d = t.constant(stack_volumes(b.diseased));
        const VarId m_hat_d = nets_.S.forward(t, x_d, &g.bs);
        const VarId i_g_d = nets_.G.forward(t, x_d, &g.bg);
        const VarId i_s = fusion::fuse_synthetic_t(t, m_hat_d, i_g_d, x_d);
        const VarId d_is = nets_.D.forward(t, i_s, nullptr);
        VarId d_ig{};
        if (w.use_ig_to_d) d_ig = nets_.D.forward(t, i_g_d, nullptr);
        g.parts.adv_gs = losses::loss_adv_gs(t, d_is, d_ig, w);
        g.report.set("adv_gs", t.scalar(g.parts.adv_gs));
        g.report.set("d_is", batch_mean(t.val(d_is)));
        if (w.use_ig_to_d) g.report.set("d_ig", batch_mean(t.val(d_ig)));
        if (w.use_mil) {
            g.parts.mil = losses::loss_mil(t, m_hat_d, w);
            g.report.set("mil", t.scalar(g.parts.mil));
        }
        if (w.use_ps && iter > cfg_.iter_ps && !b.healthy.empty()) {
            const uint64_t pc = static_cast<uint64_t>(draw) * 4;
            const auto di = rng::uniform_int(cfg_.seed, rng::kStreamSynthPair, pc, 0,
                                             static_cast<int64_t>(b.diseased.size()) - 1);
            const auto hi = rng::uniform_int(cfg_.seed, rng::kStreamSynthPair, pc + 1, 0,
                                             static_cast<int64_t>(b.healthy.size()) - 1);
            const Sample& sd = b.diseased[di];
            const Sample& sh = b.healthy[hi];
            if (!sh.mask || sh.mask->kind != MaskKind::binary)
                throw TrainError("pseudo synthesis needs a lung mask for healthy case '" +
                                 sh.case_id + "'");
            // segmenter output detached: the synthesized pair is data
            const SegMask m_hat =
                tensor_slice_prob(t.val(m_hat_d), static_cast<int>(di), vol_shape_);
            const Volume i_d_vol =
                tensor_slice_volume(t.val(x_d), static_cast<int>(di), vol_shape_);
            auto [i_ps, m_ps] =
                fusion::synth_pseudo_case(i_d_vol, m_hat, sh.vol, *sh.mask, cfg_.pseudo);
            std::vector<Sample> ps_batch{Sample{"ps", std::move(i_ps), std::nullopt}};
            const VarId x_ps = t.constant(stack_volumes(ps_batch));
            const VarId m_hat_ps = nets_.S.forward(t, x_ps, &g.bs);
            Tensor<float> target({1, 1, vol_shape_[0], vol_shape_[1], vol_shape_[2]});
            std::copy(m_ps.data.begin(), m_ps.data.end(), target.data());
            g.parts.ps = losses::loss_seg_ce(t, m_hat_ps, target);
            g.report.set("ps", t.scalar(g.parts.ps));
        }
    }
    if (!b.healthy.empty()) {
        const VarId x_h = t.constant(stack_volumes(b.healthy));
        if (w.use_recons) {
            const VarId g_ih = nets_.G.forward(t, x_h, &g.bg);
            g.parts.recons = losses::loss_recons(t, g_ih, x_h);
            g.report.set("recons", t.scalar(g.parts.recons));
        }
        const VarId m_hat_h = nets_.S.forward(t, x_h, &g.bs);
        const Tensor<float> zeros(t.shape(m_hat_h));
        g.parts.seg_healthy = losses::loss_seg_ce(t, m_hat_h, zeros);
        g.report.set("seg_healthy", t.scalar(g.parts.seg_healthy));
    }
    if (!b.labeled.empty()) {
        const VarId x_l = t.constant(stack_volumes(b.labeled));
        const VarId m_hat_l = nets_.S.forward(t, x_l, &g.bs);
        g.parts.seg_labeled = losses::loss_seg_ce(t, m_hat_l, stack_masks(b.labeled));
        g.report.set("seg_labeled", t.scalar(g.parts.seg_labeled));
    }
}

losses::LossReport Trainer::assemble_gs_report(const Batch& b, long iter) {
    Tape<float> t(true);
    GsGraph g{};
    build_gs_graph(t, b, iter, g);
    const VarId total = losses::compose_gs_objective(t, g.parts, cfg_.weights);
    g.report.set("total_gs", t.scalar(total));
    return g.report;
}

losses::LossReport Trainer::train_step_gs(const Batch& b, long iter) {
    Tape<float> t(true);
    GsGraph g{};
    build_gs_graph(t, b, iter, g);
    const VarId total = losses::compose_gs_objective(t, g.parts, cfg_.weights);
    const double tv = t.scalar(total);
    g.report.set("total_gs", tv);
    if (!std::isfinite(tv)) {
        json dump{{"iter", iter}, {"phase", "gs"}, {"losses", g.report.values}};
        std::ofstream(out_dir_ / "diagnostic_dump.json") << dump.dump(2) << "\n";
        throw TrainError("non-finite S/G loss at iter " + std::to_string(iter) +
                         " (see diagnostic_dump.json)");
    }
    t.backward(total);
    opt_s_.step(t, g.bs);
    opt_g_.step(t, g.bg);
    return g.report;
}

losses::LossReport Trainer::train_step_d(const Batch& b) {
    const auto& w = cfg_.weights;
    if (b.diseased.empty() || b.healthy.empty())
        throw TrainError("D step needs diseased and healthy samples");
    const Tensor<float> x_d = stack_volumes(b.diseased);
    const Tensor<float> x_h = stack_volumes(b.healthy);

    // S and G frozen: plain inference
    Tensor<float> m_hat, i_g;
    {
        Tape<float> ti(false);
        const VarId xd = ti.constant(x_d);
        m_hat = ti.val(nets_.S.forward(ti, xd));
        i_g = ti.val(nets_.G.forward(ti, xd));
    }
    const Tensor<float> i_s = fuse_tensors(m_hat, i_g, x_d);

    Tape<float> t(true);
    nets::Bindings<float> bd;
    const VarId d_is = nets_.D.forward(t, t.constant(i_s), &bd);
    const VarId d_ih = nets_.D.forward(t, t.constant(x_h), &bd);
    VarId d_id{}, d_ig{};
    if (w.use_id_to_d) d_id = nets_.D.forward(t, t.constant(x_d), &bd);
    if (w.use_ig_to_d) d_ig = nets_.D.forward(t, t.constant(i_g), &bd);
    const VarId loss = losses::loss_adv_d(t, d_is, d_ih, d_id, d_ig, w);

    losses::LossReport r;
    const double lv = t.scalar(loss);
    r.set("adv_d", lv);
    r.set("total_d", lv);
    r.set("d_is", batch_mean(t.val(d_is)));
    r.set("d_ih", batch_mean(t.val(d_ih)));
    if (w.use_id_to_d) r.set("d_id", batch_mean(t.val(d_id)));
    if (w.use_ig_to_d) r.set("d_ig", batch_mean(t.val(d_ig)));
    if (!std::isfinite(lv)) {
        json dump{{"phase", "d"}, {"losses", r.values}};
        std::ofstream(out_dir_ / "diagnostic_dump.json") << dump.dump(2) << "\n";
        throw TrainError("non-finite D loss (see diagnostic_dump.json)");
    }
    t.backward(loss);
    opt_d_.step(t, bd);
    return r;
}

SegMask Trainer::predict_mask(const Volume& v) {
    Tape<float> t(false);
    Tensor<float> x({1, 1, v.shape[0], v.shape[1], v.shape[2]});
    std::copy(v.data.begin(), v.data.end(), x.data());
    const VarId m = nets_.S.forward(t, t.constant(x));
    return tensor_slice_prob(t.val(m), 0, v.shape);
}

double Trainer::validate() {
    if (val_.empty()) throw TrainError("validate: empty val split");
    double sum = 0;
    for (const auto& c : val_) {
        const SegMask pred = metrics::binarize(predict_mask(c.vol), 0.5);
        sum += metrics::dice(metrics::confusion(pred, *c.lesion));
    }
    return sum / static_cast<double>(val_.size());
}

void Trainer::write_d_probe(losses::LossReport& r) {
    const int nd = static_cast<int>(std::min<size_t>(2, diseased_.size()));
    const int nh = static_cast<int>(std::min<size_t>(2, healthy_.size()));
    std::vector<Sample> ds, hs;
    for (int i = 0; i < nd; ++i) ds.push_back({diseased_[i].id, diseased_[i].vol, {}});
    for (int i = 0; i < nh; ++i) hs.push_back({healthy_[i].id, healthy_[i].vol, {}});
    const Tensor<float> x_d = stack_volumes(ds);
    const Tensor<float> x_h = stack_volumes(hs);
    Tape<float> t(false);
    const VarId xd = t.constant(x_d);
    const Tensor<float> m_hat = t.val(nets_.S.forward(t, xd));
    const Tensor<float> i_g = t.val(nets_.G.forward(t, xd));
    const Tensor<float> i_s = fuse_tensors(m_hat, i_g, x_d);
    r.set("val_d_is", batch_mean(t.val(nets_.D.forward(t, t.constant(i_s)))));
    r.set("val_d_ih", batch_mean(t.val(nets_.D.forward(t, t.constant(x_h)))));
    r.set("val_d_id", batch_mean(t.val(nets_.D.forward(t, xd))));
}

void Trainer::log_record(long iter, const std::string& phase,
                         const losses::LossReport& r) {
    json j{{"iter", iter}, {"phase", phase}, {"losses", r.values}};
    log_ << j.dump() << "\n";
    log_.flush();
}

void Trainer::save_checkpoint(const fs::path& path) {
    json meta{{"format_version", 1},
              {"segmenter", net_cfg_json(nets_.S.config())},
              {"generator", net_cfg_json(nets_.G.config())},
              {"discriminator", net_cfg_json(nets_.D.config())},
              {"train_state",
               {{"iter", state_.iter},
                {"best_val_dice", state_.best_val_dice},
                {"best_checkpoint_path", state_.best_checkpoint_path}}},
              {"optim", {{"s_t", opt_s_.t}, {"g_t", opt_g_.t}, {"d_t", opt_d_.t}}}};
    std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
    auto add_params = [&](std::vector<nets::Param<float>*> ps) {
        for (auto* p : ps) {
            tensors.push_back({p->name, &p->value});
            tensors.push_back({"opt." + p->name + ".m", &p->m});
            tensors.push_back({"opt." + p->name + ".v", &p->v});
        }
    };
    add_params(nets_.S.params());
    add_params(nets_.G.params());
    add_params(nets_.D.params());
    for (auto& [name, buf] : nets_.D.buffers()) tensors.push_back({name, buf});
    ckpt::save(path, meta, tensors);
}

namespace {

void restore_params(const std::map<std::string, Tensor<float>>& loaded,
                    std::vector<nets::Param<float>*> ps, bool with_optim) {
    for (auto* p : ps) {
        const auto it = loaded.find(p->name);
        if (it == loaded.end()) throw IoError("checkpoint missing tensor " + p->name);
        if (it->second.shape != p->value.shape)
            throw IoError("checkpoint tensor shape mismatch for " + p->name);
        *p->value.buf = *it->second.buf;
        if (with_optim) {
            const auto mi = loaded.find("opt." + p->name + ".m");
            const auto vi = loaded.find("opt." + p->name + ".v");
            if (mi != loaded.end()) *p->m.buf = *mi->second.buf;
            if (vi != loaded.end()) *p->v.buf = *vi->second.buf;
        }
    }
}

void restore_buffers(const std::map<std::string, Tensor<float>>& loaded,
                     std::vector<std::pair<std::string, Tensor<float>*>> bufs) {
    for (auto& [name, buf] : bufs) {
        const auto it = loaded.find(name);
        if (it != loaded.end()) *buf->buf = *it->second.buf;
    }
}

}  // namespace

void Trainer::resume_from(const fs::path& checkpoint) {
    const auto loaded = ckpt::load(checkpoint);
    restore_params(loaded.tensors, nets_.S.params(), true);
    restore_params(loaded.tensors, nets_.G.params(), true);
    restore_params(loaded.tensors, nets_.D.params(), true);
    restore_buffers(loaded.tensors, nets_.D.buffers());
    const auto& ts = loaded.meta.at("train_state");
    state_.iter = ts.at("iter").get<long>();
    state_.best_val_dice = ts.at("best_val_dice").get<double>();
    state_.best_checkpoint_path = ts.value("best_checkpoint_path", "");
    const auto& ot = loaded.meta.at("optim");
    opt_s_.t = ot.at("s_t").get<long>();
    opt_g_.t = ot.at("g_t").get<long>();
    opt_d_.t = ot.at("d_t").get<long>();
}

TrainResult Trainer::train() {
    const long per_iter = cfg_.repeat_g + cfg_.repeat_d;
    for (long iter = state_.iter + 1; iter <= cfg_.max_iter; ++iter) {
        // batch assembly is pure, so optional worker threads change nothing
        std::vector<std::future<Batch>> prefetch;
        if (loader_workers_ > 0) {
            for (int j = 0; j < cfg_.repeat_g; ++j) {
                const long draw = (iter - 1) * per_iter + j;
                prefetch.push_back(std::async(std::launch::async, [this, draw] {
                    return sample_batch(draw, true);
                }));
            }
            for (int j = 0; j < cfg_.repeat_d; ++j) {
                const long draw = (iter - 1) * per_iter + cfg_.repeat_g + j;
                prefetch.push_back(std::async(std::launch::async, [this, draw] {
                    return sample_batch(draw, false);
                }));
            }
        }
        auto next_batch = [&](int k, long draw, bool labeled) {
            return loader_workers_ > 0 ? prefetch[k].get() : sample_batch(draw, labeled);
        };
        for (int j = 0; j < cfg_.repeat_g; ++j) {
            const long draw = (iter - 1) * per_iter + j;
            log_record(iter, "gs", train_step_gs(next_batch(j, draw, true), iter));
        }
        for (int j = 0; j < cfg_.repeat_d; ++j) {
            const long draw = (iter - 1) * per_iter + cfg_.repeat_g + j;
            log_record(iter, "d",
                       train_step_d(next_batch(cfg_.repeat_g + j, draw, false)));
        }
        state_.iter = iter;
        if (iter % cfg_.val_iter == 0 || iter == cfg_.max_iter) {
            const double dice = validate();
            losses::LossReport vr;
            vr.set("val_dice", dice);
            write_d_probe(vr);
            log_record(iter, "val", vr);
            if (dice > state_.best_val_dice) {
                state_.best_val_dice = dice;
                const fs::path best = out_dir_ / "best.ckpt";
                state_.best_checkpoint_path = best.string();
                save_checkpoint(best);
            }
            save_checkpoint(out_dir_ / "last.ckpt");
        }
    }
    save_checkpoint(out_dir_ / "last.ckpt");
    if (state_.best_checkpoint_path.empty()) {
        // never validated above threshold; keep the final weights as best
        const fs::path best = out_dir_ / "best.ckpt";
        state_.best_checkpoint_path = best.string();
        save_checkpoint(best);
    }
    TrainResult res;
    res.state = state_;
    res.best_checkpoint = state_.best_checkpoint_path;
    res.last_checkpoint = out_dir_ / "last.ckpt";
    res.log_path = log_path_;
    return res;
}

LoadedBundle load_bundle(const fs::path& checkpoint) {
    const auto loaded = ckpt::load(checkpoint);
    LoadedBundle out;
    const auto& m = loaded.meta;
    const auto& sj = m.at("segmenter");
    out.scfg = {sj.at("in_channels").get<int>(), sj.at("base_channels").get<int>(),
                sj.at("depth").get<int>()};
    if (m.contains("generator")) {
        const auto& gj = m.at("generator");
        out.gcfg = {gj.at("in_channels").get<int>(), gj.at("base_channels").get<int>(),
                    gj.at("n_resblocks").get<int>()};
        const auto& dj = m.at("discriminator");
        out.dcfg = {dj.at("in_channels").get<int>(), dj.at("base_channels").get<int>(),
                    dj.at("n_downsamples").get<int>(), dj.at("spectral_norm").get<bool>()};
        out.nets = nets::NetBundle<float>(out.scfg, out.gcfg, out.dcfg, 0);
        restore_params(loaded.tensors, out.nets.G.params(), false);
        restore_params(loaded.tensors, out.nets.D.params(), false);
        restore_buffers(loaded.tensors, out.nets.D.buffers());
    } else {
        out.nets = nets::NetBundle<float>(out.scfg, out.gcfg, out.dcfg, 0);
    }
    restore_params(loaded.tensors, out.nets.S.params(), false);
    if (m.contains("train_state")) {
        const auto& ts = m.at("train_state");
        out.state.iter = ts.at("iter").get<long>();
        out.state.best_val_dice = ts.at("best_val_dice").get<double>();
    }
    return out;
}

metrics::EvalReport evaluate_split(nets::Segmenter3D<float>& seg,
                                   const DatasetManifest& manifest,
                                   const std::string& split_name, double threshold) {
    const auto& records = manifest.split(split_name);
    if (records.empty()) throw ValidationError("evaluate: empty split " + split_name);
    std::vector<metrics::CaseMetrics> cases;
    for (const auto& rec : records) {
        if (!rec.lesion_mask_path)
            throw ValidationError("evaluate: case '" + rec.case_id + "' has no ground truth");
        const Volume v = voldata::load_volume(rec.volume_path);
        if (v.domain != Domain::unit_normalized)
            throw ValidationError("evaluate: case '" + rec.case_id +
                                  "' is not preprocessed");
        const SegMask gt = voldata::load_mask(*rec.lesion_mask_path);
        Tape<float> t(false);
        Tensor<float> x({1, 1, v.shape[0], v.shape[1], v.shape[2]});
        std::copy(v.data.begin(), v.data.end(), x.data());
        const Tensor<float> mp = t.val(seg.forward(t, t.constant(x)));
        SegMask prob = SegMask::zeros(v.shape, MaskKind::prob);
        std::copy(mp.data(), mp.data() + mp.size(), prob.data.begin());
        cases.push_back(
            metrics::evaluate_case(rec.case_id, metrics::binarize(prob, threshold), gt));
    }
    return metrics::make_report(std::move(cases));
}

TrainResult train_supervised_baseline(const nets::SegmenterConfig& sc,
                                      const TrainConfig& cfg,
                                      const DatasetManifest& manifest,
                                      const fs::path& out_dir) {
    validate(cfg);
    fs::create_directories(out_dir);
    nets::Segmenter3D<float> seg(sc, cfg.seed);
    Adam<float> opt;
    opt.lr = cfg.lr_s;

    struct Labeled {
        Volume vol;
        SegMask lesion;
    };
    std::vector<Labeled> labeled;
    for (const auto& rec : manifest.train_voxel_level) {
        Labeled l{voldata::load_volume(rec.volume_path),
                  voldata::load_mask(*rec.lesion_mask_path)};
        if (l.vol.domain != Domain::unit_normalized)
            throw TrainError("baseline: case '" + rec.case_id + "' is not preprocessed");
        labeled.push_back(std::move(l));
    }
    if (labeled.empty()) throw TrainError("baseline: no voxel-labeled cases");

    const fs::path log_path = out_dir / "train_log.ndjson";
    std::ofstream log(log_path, std::ios::app);
    TrainState state;

    auto validate_dice = [&] {
        double sum = 0;
        int n = 0;
        for (const auto& rec : manifest.val) {
            const Volume v = voldata::load_volume(rec.volume_path);
            const SegMask gt = voldata::load_mask(*rec.lesion_mask_path);
            Tape<float> t(false);
            Tensor<float> x({1, 1, v.shape[0], v.shape[1], v.shape[2]});
            std::copy(v.data.begin(), v.data.end(), x.data());
            const Tensor<float> mp = t.val(seg.forward(t, t.constant(x)));
            SegMask prob = SegMask::zeros(v.shape, MaskKind::prob);
            std::copy(mp.data(), mp.data() + mp.size(), prob.data.begin());
            sum += metrics::dice(
                metrics::confusion(metrics::binarize(prob, 0.5), gt));
            ++n;
        }
        return n ? sum / n : 0.0;
    };

    auto save_seg = [&](const fs::path& path) {
        json meta{{"format_version", 1},
                  {"baseline", true},
                  {"segmenter", net_cfg_json(seg.config())},
                  {"train_state",
                   {{"iter", state.iter}, {"best_val_dice", state.best_val_dice}}}};
        std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
        for (auto* p : seg.params()) tensors.push_back({p->name, &p->value});
        ckpt::save(path, meta, tensors);
    };

    for (long iter = 1; iter <= cfg.max_iter; ++iter) {
        // one batch of augmented copies of the labeled case(s)
        std::vector<Sample> batch;
        for (int i = 0; i < cfg.batch_size; ++i) {
            const uint64_t c = static_cast<uint64_t>(iter) * 64 + i;
            const auto idx = rng::uniform_int(cfg.seed, rng::kStreamSample, c, 0,
                                              static_cast<int64_t>(labeled.size()) - 1);
            preprocess::AugmentConfig ac = cfg.augment;
            ac.seed = ac.seed ? ac.seed : (cfg.seed ^ 0xa7631);
            Sample s;
            if (cfg.augment_enabled) {
                auto [v, mk] = preprocess::augment(labeled[idx].vol, labeled[idx].lesion,
                                                   ac, c);
                s.vol = std::move(v);
                s.mask = std::move(mk);
            } else {
                s.vol = labeled[idx].vol;
                s.mask = labeled[idx].lesion;
            }
            batch.push_back(std::move(s));
        }
        Tape<float> t(true);
        nets::Bindings<float> bs;
        const VarId x = t.constant(stack_volumes(batch));
        const VarId m_hat = seg.forward(t, x, &bs);
        const VarId loss = losses::loss_seg_ce(t, m_hat, stack_masks(batch));
        if (!std::isfinite(static_cast<double>(t.scalar(loss))))
            throw TrainError("baseline: non-finite loss");
        t.backward(loss);
        opt.step(t, bs);
        state.iter = iter;
        log << json{{"iter", iter},
                    {"phase", "baseline"},
                    {"losses", {{"seg_labeled", t.scalar(loss)}}}}
                   .dump()
            << "\n";
        if (iter % cfg.val_iter == 0 || iter == cfg.max_iter) {
            const double dice = validate_dice();
            log << json{{"iter", iter}, {"phase", "val"}, {"losses", {{"val_dice", dice}}}}
                       .dump()
                << "\n";
            if (dice > state.best_val_dice) {
                state.best_val_dice = dice;
                const fs::path best = out_dir / "best.ckpt";
                state.best_checkpoint_path = best.string();
                save_seg(best);
            }
        }
    }
    if (state.best_checkpoint_path.empty()) {
        const fs::path best = out_dir / "best.ckpt";
        state.best_checkpoint_path = best.string();
        save_seg(best);
    }
    TrainResult res;
    res.state = state;
    res.best_checkpoint = state.best_checkpoint_path;
    res.last_checkpoint = res.best_checkpoint;
    res.log_path = log_path;
    return res;
}

}  // namespace gasnet::trainloop
