#pragma once

// Binarization, confusion counts and the three evaluation metrics with
// per-case and aggregate (mean +/- sample std) reporting.

#include <optional>
#include <string>
#include <vector>

#include "gasnet/voldata.hpp"

namespace gasnet::metrics {

using voldata::SegMask;

struct ConfusionCounts {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    int64_t total() const { return tp + fp + fn + tn; }
};

// voxel -> 1 iff value > threshold (exact threshold maps to 0)
SegMask binarize(const SegMask& prob, double threshold = 0.5);

ConfusionCounts confusion(const SegMask& pred, const SegMask& gt);

// 2TP/(2TP+FP+FN); both-empty convention returns 1.
double dice(const ConfusionCounts& c);
// TP/(TP+FN) and TN/(FP+TN); nullopt when the denominator is 0 (the case is
// then excluded from that metric's aggregate).
std::optional<double> sensitivity(const ConfusionCounts& c);
std::optional<double> specificity(const ConfusionCounts& c);

struct CaseMetrics {
    std::string case_id;
    ConfusionCounts counts;
    double dice = 0.0;
    std::optional<double> sensitivity, specificity;
};

CaseMetrics evaluate_case(const std::string& case_id, const SegMask& pred_binary,
                          const SegMask& gt);

struct Aggregate {
    double mean = 0.0;
    double stddev = 0.0;  // sample (n-1); 0 when n <= 1
    int n = 0;
    int excluded = 0;
};

struct EvalReport {
    std::vector<CaseMetrics> cases;
    Aggregate dice, sensitivity, specificity;
};

EvalReport make_report(std::vector<CaseMetrics> cases);

std::string to_json_string(const EvalReport& r);
std::string to_table(const EvalReport& r);

}  // namespace gasnet::metrics
