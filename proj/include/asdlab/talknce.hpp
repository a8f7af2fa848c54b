#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "asdlab/core.hpp"
#include "asdlab/mat.hpp"

namespace asdlab {

/// Whether the denominator sum skips the positive term (the printed form of
/// the loss uses an indicator that excludes j = i) or includes it as standard
/// InfoNCE does.
enum class Denominator { exclusive_as_written, inclusive_standard };

/// The printed loss anchors on visual frames and sums over audio candidates;
/// symmetric averages that with the audio-anchored mirror.
enum class Direction { video_anchored, symmetric };

/// Frame selection for one modality: only active frames, or every frame.
enum class FrameSampling { active, all };

/// Where the loss attaches in the pipeline: on the encoder outputs, or on the
/// attention-weighted features after fusion.
enum class Placement { before_fusion, after_fusion };

struct TalkNCEConfig {
    double tau = 1.0;
    Denominator denominator = Denominator::exclusive_as_written;
    Direction direction = Direction::video_anchored;
    FrameSampling visual_sampling = FrameSampling::active;
    FrameSampling audio_sampling = FrameSampling::active;
    Placement placement = Placement::before_fusion;
    double lambda = 0.3;

    /// Minimum usable anchor count: the exclusive denominator is empty with a
    /// single anchor.
    int min_anchors() const { return denominator == Denominator::exclusive_as_written ? 2 : 1; }

    void validate() const {
        if (!(tau > 0.0)) throw std::invalid_argument("TalkNCEConfig: tau must be positive");
        if (!(lambda >= 0.0) || !std::isfinite(lambda))
            throw std::invalid_argument("TalkNCEConfig: lambda must be finite and >= 0");
    }
};

/// Raised when a track has too few anchors for the configured denominator.
/// Callers skip the track; this is not a batch-level error.
class NotEnoughActiveFrames : public std::runtime_error {
public:
    explicit NotEnoughActiveFrames(const std::string& msg) : std::runtime_error(msg) {}
};

/// Cosine similarities between two embedding streams; entries in [-1, 1].
struct SimilarityMatrix {
    Mat s; // T_v x T_a
    bool normalized = true;
};

namespace detail {

constexpr double kZeroNormFloor = 1e-30;

/// Row-wise L2 normalization. `frame_of` maps local rows back to original
/// frame indices for error messages; pass nullptr when rows are frames.
inline Mat unit_rows(const Mat& m, const std::string& track_id, const std::vector<int>* frame_of) {
    Mat u(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        const double n = row_l2_norm(m, i);
        if (!(n > kZeroNormFloor)) {
            const int frame = frame_of ? (*frame_of)[static_cast<std::size_t>(i)] : i;
            throw std::invalid_argument("similarity: zero-norm embedding in track '" + track_id +
                                        "' at frame " + std::to_string(frame));
        }
        const double inv = 1.0 / n;
        const double* src = m.row(i);
        double* dst = u.row(i);
        for (int c = 0; c < m.cols; ++c) dst[c] = src[c] * inv;
    }
    return u;
}

inline std::vector<int> select_frames(const FrameLabels& labels, FrameSampling sampling) {
    if (sampling == FrameSampling::active) return active_indices(labels);
    std::vector<int> all(static_cast<std::size_t>(labels.frames()));
    std::iota(all.begin(), all.end(), 0);
    return all;
}

inline Mat gather_rows(const Mat& m, const std::vector<int>& idx) {
    Mat out(static_cast<int>(idx.size()), m.cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const double* src = m.row(idx[r]);
        double* dst = out.row(static_cast<int>(r));
        for (int c = 0; c < m.cols; ++c) dst[c] = src[c];
    }
    return out;
}

/// One anchored direction on a similarity matrix. Anchors are (row, col)
/// positions of positive pairs; candidates run over columns. Accumulates
/// d(loss)/d(s) into ds when non-null. Returns the mean loss over anchors.
struct AnchorPair {
    int row; // position of the anchor in the row index set
    int col; // position of its positive in the column index set
};

inline double anchored_nce(const Mat& s, const std::vector<AnchorPair>& anchors, double tau,
                           Denominator den, Mat* ds, double grad_scale) {
    const double inv_tau = 1.0 / tau;
    const int n_cand = s.cols;
    double total = 0.0;
    const double anchor_w = 1.0 / static_cast<double>(anchors.size());
    std::vector<double> p(static_cast<std::size_t>(n_cand));
    for (const auto& a : anchors) {
        const double* srow = s.row(a.row);
        // log-sum-exp with max subtraction over the candidate set
        double m = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n_cand; ++j) {
            if (den == Denominator::exclusive_as_written && j == a.col) continue;
            m = std::max(m, srow[j] * inv_tau);
        }
        double z = 0.0;
        for (int j = 0; j < n_cand; ++j) {
            if (den == Denominator::exclusive_as_written && j == a.col) {
                p[static_cast<std::size_t>(j)] = 0.0;
                continue;
            }
            const double e = std::exp(srow[j] * inv_tau - m);
            p[static_cast<std::size_t>(j)] = e;
            z += e;
        }
        const double log_den = m + std::log(z);
        total += -(srow[a.col] * inv_tau - log_den);
        if (ds) {
            const double w = grad_scale * anchor_w * inv_tau;
            double* drow = ds->row(a.row);
            for (int j = 0; j < n_cand; ++j) drow[j] += w * (p[static_cast<std::size_t>(j)] / z);
            drow[a.col] -= w;
        }
    }
    return total / static_cast<double>(anchors.size());
}

} // namespace detail

/// s[i][j] = dot(unit(e_v[i]), unit(e_a[j])). Rows of both inputs are
/// L2-normalized before the inner product; a zero-norm row is an error.
inline SimilarityMatrix similarity(const EmbeddingSequence& e_v, const EmbeddingSequence& e_a) {
    if (e_v.dim() != e_a.dim())
        throw std::invalid_argument("similarity: embedding dims differ (" + std::to_string(e_v.dim()) +
                                    " vs " + std::to_string(e_a.dim()) + ")");
    const Mat uv = detail::unit_rows(e_v.data, e_v.track_id, nullptr);
    const Mat ua = detail::unit_rows(e_a.data, e_a.track_id, nullptr);
    SimilarityMatrix out;
    matmul_nt(uv, ua, out.s);
    return out;
}

struct TalkNCEResult {
    double loss = 0.0;
    std::vector<int> visual_idx; // I: frames selected on the visual side
    std::vector<int> audio_idx;  // J: frames selected on the audio side
};

struct TalkNCEGrad {
    Mat d_visual; // T x C, zero rows for unselected frames
    Mat d_audio;  // T x C
};

namespace detail {

struct Selection {
    std::vector<int> visual_idx, audio_idx;
    std::vector<int> anchor_frames;       // I intersect J, ascending
    std::vector<AnchorPair> va_anchors;   // positions in (I, J)
    std::vector<AnchorPair> av_anchors;   // positions in (J, I), the mirror
};

inline Selection select(const FrameLabels& labels, int frames, const TalkNCEConfig& cfg) {
    if (labels.frames() != frames)
        throw std::invalid_argument("talknce: labels length " + std::to_string(labels.frames()) +
                                    " != embedding length " + std::to_string(frames));
    Selection sel;
    sel.visual_idx = select_frames(labels, cfg.visual_sampling);
    sel.audio_idx = select_frames(labels, cfg.audio_sampling);
    std::set_intersection(sel.visual_idx.begin(), sel.visual_idx.end(), sel.audio_idx.begin(),
                          sel.audio_idx.end(), std::back_inserter(sel.anchor_frames));
    if (static_cast<int>(sel.anchor_frames.size()) < cfg.min_anchors())
        throw NotEnoughActiveFrames("talknce: " + std::to_string(sel.anchor_frames.size()) +
                                    " anchor frame(s), need at least " + std::to_string(cfg.min_anchors()));
    // positions of each anchor frame inside the sorted index sets
    auto position_of = [](const std::vector<int>& idx, int frame) {
        return static_cast<int>(std::lower_bound(idx.begin(), idx.end(), frame) - idx.begin());
    };
    for (int f : sel.anchor_frames) {
        const int pi = position_of(sel.visual_idx, f);
        const int pj = position_of(sel.audio_idx, f);
        sel.va_anchors.push_back({pi, pj});
        sel.av_anchors.push_back({pj, pi});
    }
    return sel;
}

struct LossWork {
    Selection sel;
    Mat uv, ua;   // unit rows of the selected embeddings
    Mat s;        // |I| x |J|
    double loss = 0.0;
    Mat ds;       // filled only when grad requested
};

inline LossWork run_loss(const EmbeddingSequence& e_v, const EmbeddingSequence& e_a,
                         const FrameLabels& labels, const TalkNCEConfig& cfg, bool want_grad) {
    cfg.validate();
    if (e_v.frames() != e_a.frames())
        throw std::invalid_argument("talknce: visual and audio embeddings have different lengths");
    if (e_v.dim() != e_a.dim())
        throw std::invalid_argument("talknce: visual and audio embeddings have different dims");
    LossWork w;
    w.sel = select(labels, e_v.frames(), cfg);
    w.uv = unit_rows(gather_rows(e_v.data, w.sel.visual_idx), e_v.track_id, &w.sel.visual_idx);
    w.ua = unit_rows(gather_rows(e_a.data, w.sel.audio_idx), e_a.track_id, &w.sel.audio_idx);
    matmul_nt(w.uv, w.ua, w.s);
    Mat* ds = nullptr;
    if (want_grad) {
        w.ds = Mat(w.s.rows, w.s.cols);
        ds = &w.ds;
    }
    if (cfg.direction == Direction::video_anchored) {
        w.loss = anchored_nce(w.s, w.sel.va_anchors, cfg.tau, cfg.denominator, ds, 1.0);
    } else {
        const double l_va = anchored_nce(w.s, w.sel.va_anchors, cfg.tau, cfg.denominator, ds, 0.5);
        Mat st = transpose(w.s);
        Mat dst;
        if (want_grad) dst = Mat(st.rows, st.cols);
        const double l_av =
            anchored_nce(st, w.sel.av_anchors, cfg.tau, cfg.denominator, want_grad ? &dst : nullptr, 0.5);
        if (want_grad)
            for (int i = 0; i < w.s.rows; ++i)
                for (int j = 0; j < w.s.cols; ++j) w.ds(i, j) += dst(j, i);
        w.loss = 0.5 * (l_va + l_av);
    }
    return w;
}

/// Backward through s = U W^T and the row normalization, scattering into the
/// full-length gradient at the selected frame rows.
inline void scatter_normalized_grad(const Mat& raw, const std::vector<int>& idx, const Mat& unit,
                                    const Mat& d_unit, Mat& d_raw) {
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const int frame = idx[r];
        const double norm = row_l2_norm(raw, frame);
        const double* u = unit.row(static_cast<int>(r));
        const double* g = d_unit.row(static_cast<int>(r));
        double dot = 0.0;
        for (int c = 0; c < unit.cols; ++c) dot += g[c] * u[c];
        double* out = d_raw.row(frame);
        const double inv = 1.0 / norm;
        for (int c = 0; c < unit.cols; ++c) out[c] += (g[c] - dot * u[c]) * inv;
    }
}

} // namespace detail

/// The frame-level contrastive loss. Anchors are frames selected on both
/// sides; each pairs its own audio frame as the positive against candidates
/// drawn from the audio selection (and mirrored when symmetric). Uses
/// log-sum-exp with max subtraction throughout.
inline TalkNCEResult talknce_loss(const EmbeddingSequence& e_v, const EmbeddingSequence& e_a,
                                  const FrameLabels& labels, const TalkNCEConfig& cfg) {
    detail::LossWork w = detail::run_loss(e_v, e_a, labels, cfg, false);
    return {w.loss, std::move(w.sel.visual_idx), std::move(w.sel.audio_idx)};
}

/// Exact gradient of talknce_loss with respect to the raw (pre-normalization)
/// embeddings. Unselected frames receive exactly zero rows.
inline TalkNCEGrad talknce_grad(const EmbeddingSequence& e_v, const EmbeddingSequence& e_a,
                                const FrameLabels& labels, const TalkNCEConfig& cfg) {
    detail::LossWork w = detail::run_loss(e_v, e_a, labels, cfg, true);
    TalkNCEGrad g;
    g.d_visual = Mat(e_v.frames(), e_v.dim());
    g.d_audio = Mat(e_a.frames(), e_a.dim());
    Mat d_uv, d_ua;
    matmul_nn(w.ds, w.ua, d_uv);          // d(loss)/d(unit visual rows)
    matmul_tn(w.ds, w.uv, d_ua);          // d(loss)/d(unit audio rows)
    detail::scatter_normalized_grad(e_v.data, w.sel.visual_idx, w.uv, d_uv, g.d_visual);
    detail::scatter_normalized_grad(e_a.data, w.sel.audio_idx, w.ua, d_ua, g.d_audio);
    return g;
}

/// True when the track has enough anchors to contribute under cfg.
inline bool talknce_usable(const FrameLabels& labels, const TalkNCEConfig& cfg) {
    const auto vis = detail::select_frames(labels, cfg.visual_sampling);
    const auto aud = detail::select_frames(labels, cfg.audio_sampling);
    std::vector<int> anchors;
    std::set_intersection(vis.begin(), vis.end(), aud.begin(), aud.end(), std::back_inserter(anchors));
    return static_cast<int>(anchors.size()) >= cfg.min_anchors();
}

} // namespace asdlab
