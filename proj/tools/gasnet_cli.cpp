// Command-line surface: phantom-gen, preprocess, train, eval, synth, report.
// Every command validates its config before touching the filesystem and
// writes a provenance stamp (config hash, seed, code version) into --out.

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "gasnet/phantom.hpp"
#include "gasnet/report.hpp"
#include "gasnet/runconfig.hpp"
#include "gasnet/trainloop.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace gasnet;

namespace {

struct CommonArgs {
    std::string config;
    std::string out = "out";
    int64_t seed = -1;  // -1: keep config seed
};

runconfig::RunConfig load_config(const CommonArgs& a) {
    auto rc = runconfig::load_run_config(a.config);
    if (a.seed >= 0) {
        rc.seed = static_cast<uint64_t>(a.seed);
        rc.train.seed = rc.seed;
        rc.phantom.seed = rc.seed;
    }
    return rc;
}

void write_provenance(const CommonArgs& a, const std::string& command,
                      uint64_t effective_seed) {
    fs::create_directories(a.out);
    json j{{"command", command},
           {"config_path", fs::absolute(a.config).string()},
           {"config_hash", runconfig::config_hash(a.config)},
           {"seed", effective_seed},
           {"code_version", runconfig::code_version()},
           {"timestamp_utc",
            std::chrono::duration_cast<std::chrono::seconds>(
                std::chrono::system_clock::now().time_since_epoch())
                .count()}};
    std::ofstream(fs::path(a.out) / "provenance.json") << j.dump(2) << "\n";
}

int fail(const std::string& type, const std::string& msg) {
    json j{{"error", msg}, {"type", type}};
    std::cerr << j.dump() << std::endl;
    return 1;
}

void preprocess_manifest(const runconfig::RunConfig& rc, const fs::path& manifest_path,
                         const fs::path& out_dir) {
    const auto manifest = voldata::load_manifest(manifest_path);
    fs::create_directories(out_dir);
    voldata::DatasetManifest out_manifest;
    for (const auto& split : voldata::DatasetManifest::split_names()) {
        for (const auto& rec : manifest.split(split)) {
            voldata::Volume vol = voldata::load_volume(rec.volume_path);
            std::optional<voldata::SegMask> lesion, lung;
            if (rec.lesion_mask_path) lesion = voldata::load_mask(*rec.lesion_mask_path);
            if (rec.lung_mask_path) lung = voldata::load_mask(*rec.lung_mask_path);
            auto pc = preprocess::preprocess_case(vol, lesion, lung, rc.preprocess);

            voldata::CaseRecord nr;
            nr.case_id = rec.case_id;
            nr.class_label = rec.class_label;
            nr.volume_path = out_dir / (rec.case_id + ".rawvol");
            nr.lung_mask_path = out_dir / (rec.case_id + "_lung.rawmask");
            voldata::save_volume(pc.vol, nr.volume_path);
            voldata::save_mask(pc.lung, *nr.lung_mask_path);
            if (pc.lesion) {
                nr.lesion_mask_path = out_dir / (rec.case_id + "_lesion.rawmask");
                voldata::save_mask(*pc.lesion, *nr.lesion_mask_path);
            }
            out_manifest.split(split).push_back(nr);
        }
    }
    voldata::save_manifest(out_manifest, out_dir / "manifest.json");
    std::cout << "preprocessed manifest written to "
              << (out_dir / "manifest.json").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"GASNet: weakly-supervised volumetric lesion segmentation"};
    app.require_subcommand(1);

    CommonArgs common;
    std::string manifest_path, checkpoint_path, resume_path, split = "test",
                log_path;
    int n_synth = 3;
    bool overlays = false;

    auto add_common = [&](CLI::App* cmd, bool needs_out = true) {
        cmd->add_option("--config", common.config, "run configuration (YAML)")->required();
        cmd->add_option("--seed", common.seed, "override the config seed");
        if (needs_out) cmd->add_option("--out", common.out, "output directory");
    };

    auto* gen = app.add_subcommand("phantom-gen", "generate a phantom dataset");
    add_common(gen);

    auto* prep = app.add_subcommand("preprocess", "normalize/crop/resize a dataset");
    add_common(prep);
    prep->add_option("--manifest", manifest_path, "input manifest")->required();

    auto* train = app.add_subcommand("train", "train GASNet (Algorithm 1)");
    add_common(train);
    train->add_option("--manifest", manifest_path, "preprocessed manifest")->required();
    train->add_option("--resume", resume_path, "checkpoint to resume from");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    add_common(eval);
    eval->add_option("--manifest", manifest_path, "preprocessed manifest")->required();
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--split", split, "manifest split to evaluate");
    eval->add_flag("--overlays", overlays, "write per-case mid-slice overlays");

    auto* synth = app.add_subcommand("synth", "dump pseudo-positive (I_ps, M_ps) pairs");
    add_common(synth);
    synth->add_option("--manifest", manifest_path, "preprocessed manifest")->required();
    synth->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    synth->add_option("--n", n_synth, "number of pairs to synthesize");

    auto* rep = app.add_subcommand("report", "render loss/validation curves from a log");
    rep->add_option("--log", log_path, "training log (NDJSON)")->required();
    rep->add_option("--out", common.out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (rep->parsed()) {
            report::render_training_curves(log_path, common.out);
            std::cout << "curves written to " << common.out << "\n";
            return 0;
        }

        const auto rc = load_config(common);

        if (gen->parsed()) {
            write_provenance(common, "phantom-gen", rc.seed);
            const auto manifest = phantom::gen_phantom_dataset(rc.phantom, common.out);
            const auto sep = phantom::lesion_separability_report(manifest);
            std::cout << "phantom dataset written to " << common.out
                      << " (separability gap " << sep.gap << ")\n";
        } else if (prep->parsed()) {
            write_provenance(common, "preprocess", rc.seed);
            preprocess_manifest(rc, manifest_path, common.out);
        } else if (train->parsed()) {
            write_provenance(common, "train", rc.seed);
            const auto manifest = voldata::load_manifest(manifest_path);
            trainloop::Trainer trainer(rc.segmenter, rc.generator, rc.discriminator,
                                       rc.train, manifest, common.out);
            if (!resume_path.empty()) trainer.resume_from(resume_path);
            const auto res = trainer.train();
            std::cout << "best checkpoint " << res.best_checkpoint.string()
                      << " (val dice " << res.state.best_val_dice << ")\n"
                      << "training log " << res.log_path.string() << "\n";
        } else if (eval->parsed()) {
            write_provenance(common, "eval", rc.seed);
            const auto manifest = voldata::load_manifest(manifest_path);
            auto loaded = trainloop::load_bundle(checkpoint_path);
            const auto report_ =
                trainloop::evaluate_split(loaded.nets.S, manifest, split);
            const fs::path out_json = fs::path(common.out) / "eval_report.json";
            std::ofstream(out_json) << metrics::to_json_string(report_) << "\n";
            std::ofstream(fs::path(common.out) / "eval_report.txt")
                << metrics::to_table(report_);
            if (overlays) {
                for (const auto& rec : manifest.split(split)) {
                    const auto vol = voldata::load_volume(rec.volume_path);
                    const auto gt = voldata::load_mask(*rec.lesion_mask_path);
                    ad::Tape<float> t(false);
                    ad::Tensor<float> x({1, 1, vol.shape[0], vol.shape[1], vol.shape[2]});
                    std::copy(vol.data.begin(), vol.data.end(), x.data());
                    const auto mp = t.val(loaded.nets.S.forward(t, t.constant(x)));
                    voldata::SegMask prob =
                        voldata::SegMask::zeros(vol.shape, voldata::MaskKind::prob);
                    std::copy(mp.data(), mp.data() + mp.size(), prob.data.begin());
                    report::write_png(
                        report::midslice_overlay(vol, metrics::binarize(prob, 0.5), gt),
                        fs::path(common.out) / (rec.case_id + "_overlay.png"));
                }
            }
            std::cout << metrics::to_table(report_);
            std::cout << "eval report written to " << out_json.string() << "\n";
        } else if (synth->parsed()) {
            write_provenance(common, "synth", rc.seed);
            const auto manifest = voldata::load_manifest(manifest_path);
            auto loaded = trainloop::load_bundle(checkpoint_path);
            std::vector<const voldata::CaseRecord*> diseased, healthy;
            for (const auto& r : manifest.train_volume_level)
                (r.class_label == voldata::ClassLabel::diseased ? diseased : healthy)
                    .push_back(&r);
            if (diseased.empty() || healthy.empty())
                throw ValidationError("synth: need diseased and healthy train cases");
            for (int i = 0; i < n_synth; ++i) {
                const auto& rd = *diseased[i % diseased.size()];
                const auto& rh = *healthy[i % healthy.size()];
                if (!rh.lung_mask_path)
                    throw ValidationError("synth: healthy case '" + rh.case_id +
                                          "' lacks a lung mask");
                const auto i_d = voldata::load_volume(rd.volume_path);
                const auto i_h = voldata::load_volume(rh.volume_path);
                const auto lung = voldata::load_mask(*rh.lung_mask_path);
                ad::Tape<float> t(false);
                ad::Tensor<float> x({1, 1, i_d.shape[0], i_d.shape[1], i_d.shape[2]});
                std::copy(i_d.data.begin(), i_d.data.end(), x.data());
                const auto mp = t.val(loaded.nets.S.forward(t, t.constant(x)));
                voldata::SegMask m_hat =
                    voldata::SegMask::zeros(i_d.shape, voldata::MaskKind::prob);
                std::copy(mp.data(), mp.data() + mp.size(), m_hat.data.begin());
                const auto [i_ps, m_ps] =
                    fusion::synth_pseudo_case(i_d, m_hat, i_h, lung, rc.train.pseudo);
                char name[32];
                std::snprintf(name, sizeof(name), "ps%03d", i);
                voldata::save_volume(i_ps, fs::path(common.out) / (std::string(name) + ".rawvol"));
                voldata::save_mask(m_ps, fs::path(common.out) / (std::string(name) + ".rawmask"));
                const auto img = report::hstack({report::midslice_gray(i_d),
                                                 report::midslice_gray(i_h),
                                                 report::midslice_mask_tint(i_ps, m_ps)});
                report::write_png(img, fs::path(common.out) / (std::string(name) + ".png"));
            }
            std::cout << n_synth << " pseudo-positive pairs written to " << common.out
                      << "\n";
        }
        return 0;
    } catch (const ConfigError& e) {
        return fail("config", e.what());
    } catch (const ValidationError& e) {
        return fail("validation", e.what());
    } catch (const IoError& e) {
        return fail("io", e.what());
    } catch (const TrainError& e) {
        return fail("train", e.what());
    } catch (const std::exception& e) {
        return fail("internal", e.what());
    }
}
