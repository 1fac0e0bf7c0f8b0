#include "gasnet/fusion.hpp"

#include <algorithm>

namespace gasnet::fusion {

using voldata::Domain;
using voldata::MaskKind;

Volume fuse_synthetic(const Volume& i_d, const Volume& i_g, const SegMask& m_hat) {
    if (i_g.shape != i_d.shape || m_hat.shape != i_d.shape)
        throw ShapeError("fuse_synthetic: shape mismatch");
    if (m_hat.kind != MaskKind::prob)
        throw ValidationError("fuse_synthetic: m_hat must be a prob mask");
    Volume out = i_d;
    out.domain = Domain::unit_normalized;
    for (int64_t i = 0; i < out.size(); ++i) {
        const double m = m_hat.data[i];
        const double v = m * i_g.data[i] + (1.0 - m) * i_d.data[i];
        out.data[i] = std::clamp(static_cast<float>(v), -1.0f, 1.0f);
    }
    return out;
}

int pseudo_label(float product, const PseudoSynthConfig& cfg) {
    const float hi = static_cast<float>(0.5 + cfg.xi);
    const float lo = static_cast<float>(0.5 - cfg.xi);
    if (product >= hi) return 1;
    if (product <= lo) return 0;
    return PseudoSynthConfig::ignore_label;
}

std::pair<Volume, SegMask> synth_pseudo_case(const Volume& i_d, const SegMask& m_hat,
                                             const Volume& i_h, const SegMask& m_lung,
                                             const PseudoSynthConfig& cfg) {
    validate(cfg);
    if (m_hat.shape != i_d.shape || i_h.shape != i_d.shape || m_lung.shape != i_d.shape)
        throw ShapeError("synth_pseudo_case: shape mismatch");
    if (m_hat.kind != MaskKind::prob)
        throw ValidationError("synth_pseudo_case: m_hat must be a prob mask");
    if (m_lung.kind != MaskKind::binary)
        throw ValidationError("synth_pseudo_case: m_lung must be a binary mask");

    Volume i_ps = i_h;
    i_ps.domain = Domain::unit_normalized;
    SegMask m_ps = SegMask::zeros(i_d.shape, MaskKind::pseudo3);
    m_ps.spacing = i_d.spacing;
    for (int64_t i = 0; i < i_ps.size(); ++i) {
        const float p = m_hat.data[i] * m_lung.data[i];
        const double v = i_h.data[i] * (1.0 - static_cast<double>(p)) +
                         i_d.data[i] * static_cast<double>(p);
        i_ps.data[i] = std::clamp(static_cast<float>(v), -1.0f, 1.0f);
        m_ps.data[i] = static_cast<float>(pseudo_label(p, cfg));
    }
    return {std::move(i_ps), std::move(m_ps)};
}

}  // namespace gasnet::fusion
