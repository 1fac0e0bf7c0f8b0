#include "gasnet/metrics.hpp"

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

namespace gasnet::metrics {

using json = nlohmann::json;
using voldata::MaskKind;

SegMask binarize(const SegMask& prob, double threshold) {
    if (prob.kind != MaskKind::prob)
        throw ValidationError("binarize: input must be a prob mask");
    SegMask out = prob;
    out.kind = MaskKind::binary;
    const float t = static_cast<float>(threshold);
    for (auto& x : out.data) x = x > t ? 1.0f : 0.0f;
    return out;
}

ConfusionCounts confusion(const SegMask& pred, const SegMask& gt) {
    if (pred.shape != gt.shape) throw ShapeError("confusion: shape mismatch");
    ConfusionCounts c;
    for (int64_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.data[i] != 0.0f;
        const bool g = gt.data[i] != 0.0f;
        if (p && g) ++c.tp;
        else if (p && !g) ++c.fp;
        else if (!p && g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

double dice(const ConfusionCounts& c) {
    const int64_t denom = 2 * c.tp + c.fp + c.fn;
    if (denom == 0) return 1.0;  // both empty
    return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

std::optional<double> sensitivity(const ConfusionCounts& c) {
    if (c.tp + c.fn == 0) return std::nullopt;
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

std::optional<double> specificity(const ConfusionCounts& c) {
    if (c.fp + c.tn == 0) return std::nullopt;
    return static_cast<double>(c.tn) / static_cast<double>(c.fp + c.tn);
}

CaseMetrics evaluate_case(const std::string& case_id, const SegMask& pred_binary,
                          const SegMask& gt) {
    CaseMetrics m;
    m.case_id = case_id;
    m.counts = confusion(pred_binary, gt);
    m.dice = dice(m.counts);
    m.sensitivity = sensitivity(m.counts);
    m.specificity = specificity(m.counts);
    return m;
}

namespace {

template <class Get>
Aggregate aggregate(const std::vector<CaseMetrics>& cases, Get get) {
    Aggregate a;
    std::vector<double> vals;
    for (const auto& c : cases) {
        const auto v = get(c);
        if (v) vals.push_back(*v);
        else ++a.excluded;
    }
    a.n = static_cast<int>(vals.size());
    if (a.n == 0) return a;
    double s = 0;
    for (double v : vals) s += v;
    a.mean = s / a.n;
    if (a.n > 1) {
        double q = 0;
        for (double v : vals) q += (v - a.mean) * (v - a.mean);
        a.stddev = std::sqrt(q / (a.n - 1));
    }
    return a;
}

json aggregate_json(const Aggregate& a) {
    return json{{"mean", a.mean}, {"std", a.stddev}, {"n", a.n}, {"excluded", a.excluded}};
}

}  // namespace

EvalReport make_report(std::vector<CaseMetrics> cases) {
    EvalReport r;
    r.cases = std::move(cases);
    r.dice = aggregate(r.cases, [](const CaseMetrics& c) {
        return std::optional<double>(c.dice);
    });
    r.sensitivity = aggregate(r.cases, [](const CaseMetrics& c) { return c.sensitivity; });
    r.specificity = aggregate(r.cases, [](const CaseMetrics& c) { return c.specificity; });
    return r;
}

std::string to_json_string(const EvalReport& r) {
    json j;
    j["cases"] = json::array();
    for (const auto& c : r.cases) {
        json cj{{"case_id", c.case_id},
                {"dice", c.dice},
                {"tp", c.counts.tp},
                {"fp", c.counts.fp},
                {"fn", c.counts.fn},
                {"tn", c.counts.tn}};
        cj["sensitivity"] = c.sensitivity ? json(*c.sensitivity) : json(nullptr);
        cj["specificity"] = c.specificity ? json(*c.specificity) : json(nullptr);
        j["cases"].push_back(cj);
    }
    j["aggregates"] = {{"dice", aggregate_json(r.dice)},
                       {"sensitivity", aggregate_json(r.sensitivity)},
                       {"specificity", aggregate_json(r.specificity)}};
    return j.dump(2);
}

std::string to_table(const EvalReport& r) {
    std::ostringstream os;
    os << "case_id            dice     sens     spec\n";
    auto fmt = [](const std::optional<double>& v) {
        if (!v) return std::string("   --  ");
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%7.4f", *v);
        return std::string(buf);
    };
    for (const auto& c : r.cases) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%-16s", c.case_id.c_str());
        os << buf << " " << fmt(c.dice) << "  " << fmt(c.sensitivity) << "  "
           << fmt(c.specificity) << "\n";
    }
    char line[160];
    std::snprintf(line, sizeof(line),
                  "mean+/-std        dice %.4f+/-%.4f (n=%d, excl=%d)  sens %.4f+/-%.4f "
                  "(n=%d, excl=%d)  spec %.4f+/-%.4f (n=%d, excl=%d)\n",
                  r.dice.mean, r.dice.stddev, r.dice.n, r.dice.excluded,
                  r.sensitivity.mean, r.sensitivity.stddev, r.sensitivity.n,
                  r.sensitivity.excluded, r.specificity.mean, r.specificity.stddev,
                  r.specificity.n, r.specificity.excluded);
    os << line;
    return os.str();
}

}  // namespace gasnet::metrics
