#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "asdlab/core.hpp"

namespace asdlab {

struct LossWeights {
    double lambda_a = 0.5;
    double lambda_v = 0.5;
    double lambda_talknce = 0.3;

    void validate() const {
        for (double w : {lambda_a, lambda_v, lambda_talknce})
            if (!std::isfinite(w) || w < 0.0)
                throw std::invalid_argument("LossWeights: weights must be finite and >= 0");
    }
};

struct LossBreakdown {
    double l_av = 0.0;
    double l_a = 0.0;
    double l_v = 0.0;
    double l_talknce = 0.0;
    double total = 0.0;
    int n_tracks_used = 0; // tracks that contributed to l_talknce
};

constexpr double kBceEps = 1e-7;

/// Mean binary cross-entropy over frames; predictions are clamped to
/// [eps, 1 - eps] before the logs.
inline double frame_bce(const std::vector<double>& predictions, const FrameLabels& labels) {
    if (predictions.size() != labels.values.size())
        throw std::invalid_argument("frame_bce: " + std::to_string(predictions.size()) +
                                    " predictions vs " + std::to_string(labels.values.size()) + " labels");
    if (predictions.empty()) throw std::invalid_argument("frame_bce: empty input");
    double sum = 0.0;
    for (std::size_t t = 0; t < predictions.size(); ++t) {
        double p = predictions[t];
        if (p < kBceEps) p = kBceEps;
        if (p > 1.0 - kBceEps) p = 1.0 - kBceEps;
        sum += labels.values[t] ? -std::log(p) : -std::log(1.0 - p);
    }
    return sum / static_cast<double>(predictions.size());
}

/// total = l_av + lambda_a * l_a + lambda_v * l_v + lambda_talknce * l_talknce,
/// summed left to right in that order so the lambda = 0 baseline is
/// bit-identical to the composite without the contrastive term.
inline LossBreakdown compose(double l_av, double l_a, double l_v, double l_talknce,
                             const LossWeights& w) {
    w.validate();
    for (double x : {l_av, l_a, l_v, l_talknce})
        if (!std::isfinite(x)) throw std::invalid_argument("compose: non-finite loss input");
    LossBreakdown b;
    b.l_av = l_av;
    b.l_a = l_a;
    b.l_v = l_v;
    b.l_talknce = l_talknce;
    b.total = ((l_av + w.lambda_a * l_a) + w.lambda_v * l_v) + w.lambda_talknce * l_talknce;
    return b;
}

} // namespace asdlab
