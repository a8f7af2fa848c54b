#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "asdlab/model.hpp"
#include "asdlab/talknce.hpp"

namespace asdlab {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_coordinate;
    int checked = 0;
    bool pass(double tol) const { return max_rel_err < tol; }
};

namespace gradcheck_detail {

/// Relative error with an absolute floor: coordinates where both sides are
/// below the floor count as exact.
inline double rel_err(double analytic, double numeric, double abs_floor = 1e-8) {
    const double diff = std::abs(analytic - numeric);
    const double mag = std::max(std::abs(analytic), std::abs(numeric));
    if (mag < abs_floor) return diff < abs_floor ? 0.0 : diff / abs_floor;
    return diff / mag;
}

} // namespace gradcheck_detail

/// Central finite differences of the TalkNCE loss against the analytic
/// gradient, every coordinate of both embedding matrices.
inline GradCheckReport check_talknce_grad(const EmbeddingSequence& e_v, const EmbeddingSequence& e_a,
                                          const FrameLabels& labels, const TalkNCEConfig& cfg,
                                          double h = 1e-5, double corrupt = 0.0) {
    TalkNCEGrad g = talknce_grad(e_v, e_a, labels, cfg);
    if (corrupt != 0.0 && g.d_visual.size() > 0) g.d_visual.d[0] += corrupt;
    GradCheckReport rep;
    auto run_side = [&](const Mat& grad, bool visual_side, const char* tag) {
        EmbeddingSequence ev = e_v, ea = e_a;
        Mat& target = visual_side ? ev.data : ea.data;
        for (int r = 0; r < grad.rows; ++r) {
            for (int c = 0; c < grad.cols; ++c) {
                const double keep = target(r, c);
                target(r, c) = keep + h;
                const double up = talknce_loss(ev, ea, labels, cfg).loss;
                target(r, c) = keep - h;
                const double dn = talknce_loss(ev, ea, labels, cfg).loss;
                target(r, c) = keep;
                const double fd = (up - dn) / (2.0 * h);
                const double re = gradcheck_detail::rel_err(grad(r, c), fd);
                ++rep.checked;
                if (re > rep.max_rel_err) {
                    rep.max_rel_err = re;
                    rep.worst_coordinate =
                        std::string(tag) + "[" + std::to_string(r) + "," + std::to_string(c) + "]";
                }
            }
        }
    };
    run_side(g.d_visual, true, "d_visual");
    run_side(g.d_audio, false, "d_audio");
    return rep;
}

/// Full-model check: tape gradients of the composite loss versus central
/// differences over every parameter scalar.
inline GradCheckReport check_model_grad(Model& model, const Scene& scene, const TalkNCEConfig& nce_cfg,
                                        const LossWeights& weights, double h = 1e-5,
                                        double corrupt = 0.0) {
    Tape tape;
    Model::GraphRefs refs;
    model.forward(scene, nce_cfg, weights, &tape, &refs);
    tape.backward(refs.total);
    std::vector<Mat> grads;
    for (int p = 0; p < model.param_count(); ++p)
        grads.push_back(tape.grad(refs.param_leafs[static_cast<std::size_t>(p)]));
    if (corrupt != 0.0 && !grads.empty() && grads[0].size() > 0) grads[0].d[0] += corrupt;

    GradCheckReport rep;
    for (int p = 0; p < model.param_count(); ++p) {
        Mat& w = model.param(p);
        const Mat& g = grads[static_cast<std::size_t>(p)];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double keep = w.d[i];
            w.d[i] = keep + h;
            const double up = model.forward(scene, nce_cfg, weights).loss.total;
            w.d[i] = keep - h;
            const double dn = model.forward(scene, nce_cfg, weights).loss.total;
            w.d[i] = keep;
            const double fd = (up - dn) / (2.0 * h);
            const double re = gradcheck_detail::rel_err(g.d[i], fd);
            ++rep.checked;
            if (re > rep.max_rel_err) {
                rep.max_rel_err = re;
                rep.worst_coordinate = model.param_name(p) + "[" + std::to_string(i) + "]";
            }
        }
    }
    return rep;
}

} // namespace asdlab
