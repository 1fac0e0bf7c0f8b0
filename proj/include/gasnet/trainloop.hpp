#pragma once

// Alternating optimization of (S,G) and D with pseudo-label synthesis after
// a warm-up, periodic validation and best-checkpoint retention. The loop is
// sequential and single-owner over the nets; batch assembly is counter-based
// so runs are reproducible (and resumable) per seed.

#include <filesystem>
#include <fstream>
#include <optional>

#include "gasnet/fusion.hpp"
#include "gasnet/losses.hpp"
#include "gasnet/metrics.hpp"
#include "gasnet/nets.hpp"
#include "gasnet/preprocess.hpp"
#include "gasnet/voldata.hpp"

namespace gasnet::trainloop {

namespace fs = std::filesystem;
using voldata::ClassLabel;
using voldata::DatasetManifest;
using voldata::SegMask;
using voldata::Volume;

struct TrainConfig {
    int repeat_g = 1;
    int repeat_d = 5;
    long iter_ps = 7000;
    long max_iter = 14000;
    long val_iter = 200;
    int batch_size = 4;
    double lr_s = 1e-4;
    double lr_g = 1e-5;
    double lr_d = 1e-5;
    losses::LossWeights weights;
    fusion::PseudoSynthConfig pseudo;
    preprocess::AugmentConfig augment;
    bool augment_enabled = true;
    uint64_t seed = 0;
};

void validate(const TrainConfig& c);

struct TrainState {
    long iter = 0;
    double best_val_dice = -1.0;
    std::string best_checkpoint_path;
};

struct TrainResult {
    TrainState state;
    fs::path best_checkpoint;
    fs::path last_checkpoint;
    fs::path log_path;
};

// One augmented training sample; healthy samples carry their lung mask,
// labeled samples their lesion mask.
struct Sample {
    std::string case_id;
    Volume vol;
    std::optional<SegMask> mask;
};

struct Batch {
    std::vector<Sample> diseased;
    std::vector<Sample> healthy;
    std::vector<Sample> labeled;  // empty for D-phase batches
};

template <class T>
struct Adam {
    double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long t = 0;

    void step(ad::Tape<T>& tape, nets::Bindings<T>& binds) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, t);
        const double bc2 = 1.0 - std::pow(beta2, t);
        for (auto& [p, var] : binds.items) {
            const ad::Tensor<T> g = tape.grad(var);
            for (int64_t i = 0; i < p->value.size(); ++i) {
                const double gi = g[i];
                p->m[i] = static_cast<T>(beta1 * p->m[i] + (1.0 - beta1) * gi);
                p->v[i] = static_cast<T>(beta2 * p->v[i] + (1.0 - beta2) * gi * gi);
                const double mhat = p->m[i] / bc1;
                const double vhat = p->v[i] / bc2;
                p->value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }
};

class Trainer {
public:
    Trainer(const nets::SegmenterConfig& sc, const nets::GeneratorConfig& gc,
            const nets::DiscriminatorConfig& dc, const TrainConfig& cfg,
            const DatasetManifest& manifest, fs::path out_dir);

    // Runs (or continues) the loop to max_iter.
    TrainResult train();
    void resume_from(const fs::path& checkpoint);

    // Deterministic batch assembly; with_labeled selects the S/G-phase
    // composition (diseased + healthy + voxel-labeled).
    Batch sample_batch(long draw, bool with_labeled);

    // One S/G update (D frozen) / one D update (S,G frozen).
    losses::LossReport train_step_gs(const Batch& b, long iter);
    losses::LossReport train_step_d(const Batch& b);

    // Mean Dice at 0.5 on the val split, evaluation mode.
    double validate();

    nets::NetBundle<float>& bundle() { return nets_; }
    const TrainState& state() const { return state_; }
    const TrainConfig& config() const { return cfg_; }

    void save_checkpoint(const fs::path& path);
    fs::path out_dir() const { return out_dir_; }

    // Loss assembly on an arbitrary batch composition (exposed so tests can
    // drive edge cases like all-healthy batches). Updates no parameters.
    losses::LossReport assemble_gs_report(const Batch& b, long iter);

private:
    struct CachedCase {
        std::string id;
        ClassLabel label;
        Volume vol;
        std::optional<SegMask> lesion;
        std::optional<SegMask> lung;
    };

    struct GsGraph {
        ad::Tape<float>* tape;
        losses::GsParts<float> parts;
        losses::LossReport report;
        nets::Bindings<float> bs, bg;
    };

    void build_gs_graph(ad::Tape<float>& t, const Batch& b, long iter, GsGraph& g);
    Sample make_sample(const CachedCase& c, bool with_lesion, long aug_draw);
    void log_record(long iter, const std::string& phase, const losses::LossReport& r);
    void write_d_probe(losses::LossReport& r);
    SegMask predict_mask(const Volume& v);

    nets::NetBundle<float> nets_;
    Adam<float> opt_s_, opt_g_, opt_d_;
    TrainConfig cfg_;
    TrainState state_;
    fs::path out_dir_;
    std::ofstream log_;
    fs::path log_path_;

    std::vector<CachedCase> diseased_, healthy_, labeled_, val_;
    std::array<int, 3> vol_shape_{0, 0, 0};
    int loader_workers_ = 0;
};

// Plain supervised U-Net baseline: S alone on the voxel-labeled split, same
// augmentation and validation-based checkpoint retention.
TrainResult train_supervised_baseline(const nets::SegmenterConfig& sc,
                                      const TrainConfig& cfg,
                                      const DatasetManifest& manifest,
                                      const fs::path& out_dir);

// Runs S over a split and scores against ground truth.
metrics::EvalReport evaluate_split(nets::Segmenter3D<float>& seg,
                                   const DatasetManifest& manifest,
                                   const std::string& split_name,
                                   double threshold = 0.5);

// Restores a NetBundle (and optionally optimizer/train state) from a
// checkpoint written by Trainer::save_checkpoint.
struct LoadedBundle {
    nets::SegmenterConfig scfg;
    nets::GeneratorConfig gcfg;
    nets::DiscriminatorConfig dcfg;
    nets::NetBundle<float> nets;
    TrainState state;
};
LoadedBundle load_bundle(const fs::path& checkpoint);

}  // namespace gasnet::trainloop
