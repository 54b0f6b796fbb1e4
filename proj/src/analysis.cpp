#include "precdiff/analysis.hpp"

#include "precdiff/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace precdiff {

TracePair capture_first_token_traces(const TransformerModel& m_ref, const TransformerModel& m_dist,
                                     const TokenSequence& x) {
    if (m_ref.layer_order() != m_dist.layer_order()) {
        throw Error("capture_first_token_traces: models have different layer orders and are not comparable");
    }
    TracePair out;
    (void)forward_logits(m_ref, x, &out.ref);
    (void)forward_logits(m_dist, x, &out.dist);
    return out;
}

double mad(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw ShapeError("mad: sizes differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
    }
    if (a.empty()) throw ShapeError("mad: empty tensors");
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        total += std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    }
    return total / static_cast<double>(a.size());
}

double mad(const PTensor& o_ref, const PTensor& o_dist) {
    if (o_ref.shape() != o_dist.shape()) {
        throw ShapeError("mad: shapes differ: " + shape_to_string(o_ref.shape()) + " vs " +
                         shape_to_string(o_dist.shape()));
    }
    return mad(o_ref.data(), o_dist.data());
}

std::vector<double> relative_lift(const std::vector<double>& mad_series, double eps) {
    if (mad_series.empty()) throw Error("relative_lift: empty series");
    for (std::size_t i = 0; i < mad_series.size(); ++i) {
        if (!(mad_series[i] >= 0.0)) {
            throw Error("relative_lift: mad[" + std::to_string(i) + "] is negative or NaN");
        }
    }
    std::vector<double> rl(mad_series.size(), 0.0);
    double prefix_max = mad_series[0];
    for (std::size_t i = 1; i < mad_series.size(); ++i) {
        rl[i] = (mad_series[i] - prefix_max) / (prefix_max + eps);
        prefix_max = std::max(prefix_max, mad_series[i]);
    }
    return rl;
}

double percentile_linear(std::vector<double> values, double pct) {
    if (values.empty()) throw Error("percentile: empty input");
    std::sort(values.begin(), values.end());
    const double rank = pct / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

std::vector<std::size_t> critical_layers(const std::vector<double>& rl, double percentile) {
    if (rl.empty()) throw Error("critical_layers: empty input");
    const double threshold = percentile_linear(rl, percentile);
    std::vector<std::size_t> out;
    for (std::size_t i = 1; i < rl.size(); ++i) {
        if (rl[i] > threshold) out.push_back(i);
    }
    return out;
}

LayerDivergenceReport layer_report(std::vector<std::string> names, std::vector<double> mad_series, double eps) {
    if (names.size() != mad_series.size()) throw ShapeError("layer_report: names and MAD series differ in length");
    LayerDivergenceReport r;
    r.layer_names = std::move(names);
    r.mad = std::move(mad_series);
    r.epsilon = eps;
    r.rl = relative_lift(r.mad, eps);
    r.percentile_threshold = percentile_linear(r.rl, kCriticalPercentile);
    r.critical = critical_layers(r.rl, kCriticalPercentile);
    return r;
}

LayerDivergenceReport layer_report(const TracePair& traces, double eps) {
    const auto& a = traces.ref.layers;
    const auto& b = traces.dist.layers;
    if (a.size() != b.size()) throw Error("layer_report: traces have different lengths");
    std::vector<std::string> names;
    std::vector<double> series;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].name != b[i].name) throw Error("layer_report: traces disagree at layer " + std::to_string(i));
        names.push_back(a[i].name);
        series.push_back(mad(a[i].output, b[i].output));
    }
    return layer_report(std::move(names), std::move(series), eps);
}

LayerDivergenceReport pooled_report(const std::vector<LayerDivergenceReport>& reports, double eps) {
    if (reports.empty()) throw Error("pooled_report: no reports");
    const auto& names = reports.front().layer_names;
    std::vector<double> mean(names.size(), 0.0);
    for (const auto& r : reports) {
        if (r.layer_names != names) throw Error("pooled_report: reports cover different layers");
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += r.mad[i];
    }
    for (double& m : mean) m /= static_cast<double>(reports.size());
    return layer_report(names, std::move(mean), eps);
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string layer_report_csv(const LayerDivergenceReport& r) {
    std::ostringstream os;
    os << kLayerCsvHeader << '\n';
    for (std::size_t i = 0; i < r.layer_names.size(); ++i) {
        const bool crit = std::binary_search(r.critical.begin(), r.critical.end(), i);
        os << i << ',' << r.layer_names[i] << ',' << format_double(r.mad[i]) << ',' << format_double(r.rl[i]) << ','
           << (crit ? 1 : 0) << '\n';
    }
    return os.str();
}

namespace {

std::string one_decimal(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

}  // namespace

std::string CampaignMetrics::success_rate_text() const { return one_decimal(success_rate) + "%"; }

std::string CampaignMetrics::avg_iterations_text() const {
    return avg_iterations ? one_decimal(*avg_iterations) : "N/A";
}

CampaignMetrics aggregate_metrics(const std::vector<PromptOutcome>& results) {
    if (results.empty()) throw Error("aggregate_metrics: no prompt results");
    CampaignMetrics m;
    m.n_prompts = static_cast<int>(results.size());
    double iter_sum = 0.0;
    for (const auto& r : results) {
        if (!r.success) continue;
        ++m.n_success;
        if (!r.first_success_iter) throw Error("aggregate_metrics: successful prompt without a first-success iteration");
        iter_sum += *r.first_success_iter;
    }
    m.success_rate = 100.0 * m.n_success / m.n_prompts;
    if (m.n_success > 0) m.avg_iterations = iter_sum / m.n_success;
    return m;
}

}  // namespace precdiff
