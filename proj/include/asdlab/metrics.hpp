#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace asdlab {

struct FrameId {
    std::string scene_id;
    std::string speaker_id;
    int frame_idx = 0;

    friend bool operator<(const FrameId& a, const FrameId& b) {
        return std::tie(a.scene_id, a.speaker_id, a.frame_idx) <
               std::tie(b.scene_id, b.speaker_id, b.frame_idx);
    }
    friend bool operator==(const FrameId& a, const FrameId& b) {
        return std::tie(a.scene_id, a.speaker_id, a.frame_idx) ==
               std::tie(b.scene_id, b.speaker_id, b.frame_idx);
    }
};

/// Pooled frame-level predictions: every (scene, speaker, frame) contributes
/// one score/label pair; metrics never average per video.
struct ScoredFrames {
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    std::vector<FrameId> ids;

    std::size_t size() const { return scores.size(); }

    int positives() const {
        int n = 0;
        for (auto l : labels) n += (l != 0);
        return n;
    }
    int negatives() const { return static_cast<int>(labels.size()) - positives(); }

    void validate() const {
        if (scores.size() != labels.size() || scores.size() != ids.size())
            throw std::invalid_argument("ScoredFrames: scores/labels/ids length mismatch");
        for (auto l : labels)
            if (l != 0 && l != 1) throw std::invalid_argument("ScoredFrames: label not in {0, 1}");
        for (double s : scores)
            if (!std::isfinite(s)) throw std::invalid_argument("ScoredFrames: non-finite score");
    }
};

struct MetricReport {
    double map = 0.0;
    double auc = 0.0;
    double eer = 0.0;
    int n_pos = 0;
    int n_neg = 0;
};

namespace detail {

/// Indices sorted by score descending; ties broken by ascending id so every
/// ordering-dependent output is stable.
inline std::vector<std::size_t> rank_order(const ScoredFrames& sf) {
    std::vector<std::size_t> order(sf.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (sf.scores[a] != sf.scores[b]) return sf.scores[a] > sf.scores[b];
        return sf.ids[a] < sf.ids[b];
    });
    return order;
}

} // namespace detail

/// All-points average precision: the mean over positives of precision at each
/// positive's rank. A block of tied scores contributes the expectation of that
/// sum over uniformly random orderings within the block, which keeps the value
/// independent of tie order.
inline double average_precision(const ScoredFrames& sf) {
    sf.validate();
    const int n_pos = sf.positives();
    if (n_pos == 0) throw std::invalid_argument("average_precision: no positive labels");
    const auto order = detail::rank_order(sf);
    double sum = 0.0;
    int before = 0;      // positives ranked above the current block
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        int block_pos = 0;
        while (j < order.size() && sf.scores[order[j]] == sf.scores[order[i]]) {
            block_pos += (sf.labels[order[j]] != 0);
            ++j;
        }
        const int n0 = static_cast<int>(j - i);
        if (block_pos > 0) {
            const double start_rank = static_cast<double>(i); // items strictly above the block
            const double frac = static_cast<double>(block_pos) / n0;
            for (int m = 1; m <= n0; ++m) {
                const double expected_above =
                    n0 > 1 ? static_cast<double>(m - 1) * (block_pos - 1) / (n0 - 1) : 0.0;
                sum += frac * (before + 1.0 + expected_above) / (start_rank + m);
            }
        }
        before += block_pos;
        i = j;
    }
    return sum / n_pos;
}

/// AUC by the pairwise-concordance definition (ties count 1/2), computed via
/// average ranks (Mann-Whitney U) in O(N log N).
inline double roc_auc(const ScoredFrames& sf) {
    sf.validate();
    const int n_pos = sf.positives();
    const int n_neg = sf.negatives();
    if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("roc_auc: need both classes present");
    std::vector<std::size_t> order(sf.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return sf.scores[a] < sf.scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        int tied_pos = 0;
        while (j < order.size() && sf.scores[order[j]] == sf.scores[order[i]]) {
            tied_pos += (sf.labels[order[j]] != 0);
            ++j;
        }
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j)); // 1-based
        rank_sum_pos += avg_rank * tied_pos;
        i = j;
    }
    const double u = rank_sum_pos - 0.5 * n_pos * (n_pos + 1.0);
    return u / (static_cast<double>(n_pos) * n_neg);
}

/// Equal error rate: the point where FPR = FNR on the ROC, linearly
/// interpolated between the two adjacent thresholds that bracket the crossing.
inline double eer(const ScoredFrames& sf) {
    sf.validate();
    const int n_pos = sf.positives();
    const int n_neg = sf.negatives();
    if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("eer: need both classes present");
    const auto order = detail::rank_order(sf);
    // Sweep thresholds from above the max score downwards; each step accepts
    // one tie block as predicted-positive.
    double prev_fpr = 0.0, prev_fnr = 1.0;
    int tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && sf.scores[order[j]] == sf.scores[order[i]]) {
            if (sf.labels[order[j]] != 0)
                ++tp;
            else
                ++fp;
            ++j;
        }
        const double fpr = static_cast<double>(fp) / n_neg;
        const double fnr = 1.0 - static_cast<double>(tp) / n_pos;
        if (fnr <= fpr) {
            const double d1 = prev_fnr - prev_fpr; // > 0 before the crossing
            const double d2 = fnr - fpr;           // <= 0 at it
            const double t = (d1 - d2) > 0.0 ? d1 / (d1 - d2) : 1.0;
            return prev_fpr + t * (fpr - prev_fpr);
        }
        prev_fpr = fpr;
        prev_fnr = fnr;
        i = j;
    }
    return 1.0; // FNR stays above FPR until everything is accepted: (1, 0) endpoint
}

inline MetricReport compute_report(const ScoredFrames& sf) {
    MetricReport r;
    r.map = average_precision(sf);
    r.auc = roc_auc(sf);
    r.eer = eer(sf);
    r.n_pos = sf.positives();
    r.n_neg = sf.negatives();
    return r;
}

// --- prediction dump: text table, one row per frame ---

inline void save_predictions(const ScoredFrames& sf, const std::string& path) {
    sf.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_predictions: cannot open '" + path + "'");
    out << "scene_id\tspeaker_id\tframe_idx\tscore\tlabel\n";
    char buf[64];
    for (std::size_t i = 0; i < sf.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", sf.scores[i]);
        out << sf.ids[i].scene_id << '\t' << sf.ids[i].speaker_id << '\t' << sf.ids[i].frame_idx << '\t'
            << buf << '\t' << static_cast<int>(sf.labels[i]) << '\n';
    }
    if (!out) throw std::runtime_error("save_predictions: write failed for '" + path + "'");
}

inline ScoredFrames load_predictions(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_predictions: cannot open '" + path + "'");
    ScoredFrames sf;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        std::istringstream ss(line);
        FrameId id;
        double score = 0.0;
        int label = 0;
        if (!(ss >> id.scene_id >> id.speaker_id >> id.frame_idx >> score >> label))
            throw std::runtime_error("load_predictions: malformed row in '" + path + "': " + line);
        sf.ids.push_back(std::move(id));
        sf.scores.push_back(score);
        sf.labels.push_back(static_cast<std::uint8_t>(label));
    }
    sf.validate();
    return sf;
}

} // namespace asdlab
