#pragma once

// The two data-combination formulas: synthetic-healthy fusion
// I_s = M^ * I_g + (1 - M^) * I_d, and pseudo-positive case synthesis
// (I_ps, M_ps) with the {0, 1, ignore} label split.

#include <utility>

#include "gasnet/tape.hpp"
#include "gasnet/voldata.hpp"

namespace gasnet::fusion {

using voldata::SegMask;
using voldata::Volume;

struct PseudoSynthConfig {
    double xi = 0.3;
    static constexpr int ignore_label = 2;
};

inline void validate(const PseudoSynthConfig& c) {
    if (!(c.xi > 0.0 && c.xi < 0.5)) throw ConfigError("pseudo synth: xi in (0, 0.5) required");
}

// Voxelwise I_s = m * i_g + (1 - m) * i_d; endpoints are exact.
Volume fuse_synthetic(const Volume& i_d, const Volume& i_g, const SegMask& m_hat);

// Tape variant for the training graph.
template <class T>
ad::VarId fuse_synthetic_t(ad::Tape<T>& t, ad::VarId m_hat, ad::VarId i_g, ad::VarId i_d) {
    ad::check_same_shape(t.shape(m_hat), t.shape(i_g), "fuse_synthetic");
    ad::check_same_shape(t.shape(m_hat), t.shape(i_d), "fuse_synthetic");
    const ad::VarId a = t.mul(m_hat, i_g);
    const ad::VarId b = t.mul(t.scale_add(m_hat, T(-1), T(1)), i_d);
    return t.add(a, b);
}

// I_ps = I_h * (1 - m*lung) + I_d * (m*lung);
// M_ps = 1 where m*lung >= 0.5+xi, 0 where m*lung <= 0.5-xi, else 2.
// Products and thresholds are evaluated in float32 so the boundary cases
// land bit-exactly on the <=/>= branches.
std::pair<Volume, SegMask> synth_pseudo_case(const Volume& i_d, const SegMask& m_hat,
                                             const Volume& i_h, const SegMask& m_lung,
                                             const PseudoSynthConfig& cfg);

// The M_ps case split for one blend weight (exposed for tests).
int pseudo_label(float product, const PseudoSynthConfig& cfg);

}  // namespace gasnet::fusion
