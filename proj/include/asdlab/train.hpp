#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "asdlab/data.hpp"
#include "asdlab/metrics.hpp"
#include "asdlab/model.hpp"
#include "asdlab/rng.hpp"

namespace asdlab {

struct OptimizerConfig {
    std::string kind = "adam";
    double lr = 1e-3;
    double weight_decay = 1e-4;
    int epochs = 25;
    int batch_scenes = 1;

    void validate() const {
        if (kind != "adam") throw std::invalid_argument("OptimizerConfig: unsupported kind '" + kind + "'");
        if (lr <= 0.0) throw std::invalid_argument("OptimizerConfig: lr must be positive");
        if (weight_decay < 0.0) throw std::invalid_argument("OptimizerConfig: weight_decay must be >= 0");
        if (epochs <= 0 || batch_scenes <= 0)
            throw std::invalid_argument("OptimizerConfig: epochs and batch_scenes must be positive");
    }
};

/// Adam with L2 weight decay folded into the gradient.
class Adam {
public:
    Adam(const Model& model, double lr, double weight_decay)
        : lr_(lr), wd_(weight_decay) {
        m_.reserve(static_cast<std::size_t>(model.param_count()));
        v_.reserve(static_cast<std::size_t>(model.param_count()));
        for (int i = 0; i < model.param_count(); ++i) {
            m_.emplace_back(model.param(i).rows, model.param(i).cols);
            v_.emplace_back(model.param(i).rows, model.param(i).cols);
        }
    }

    void step(Model& model, const std::vector<Mat>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (int p = 0; p < model.param_count(); ++p) {
            Mat& w = model.param(p);
            Mat& m = m_[static_cast<std::size_t>(p)];
            Mat& v = v_[static_cast<std::size_t>(p)];
            const Mat& g = grads[static_cast<std::size_t>(p)];
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g.d[i] + wd_ * w.d[i];
                m.d[i] = beta1_ * m.d[i] + (1.0 - beta1_) * gi;
                v.d[i] = beta2_ * v.d[i] + (1.0 - beta2_) * gi * gi;
                w.d[i] -= lr_ * (m.d[i] / bc1) / (std::sqrt(v.d[i] / bc2) + eps_);
            }
        }
    }

private:
    double lr_;
    double wd_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::uint64_t t_ = 0;
    std::vector<Mat> m_, v_;
};

struct TrainLogRecord {
    int epoch = 0;
    int step = 0;
    LossBreakdown loss;
    double wall_ms = 0.0;
};

struct TrainOptions {
    OptimizerConfig optimizer;
    TalkNCEConfig talknce;
    LossWeights weights;
    std::uint64_t seed = 1;
    /// Per-step sink for the training log; may be empty.
    std::function<void(const TrainLogRecord&)> log_sink;
    /// Per-epoch sink: (epoch, mean total loss, validation mAP or NaN).
    std::function<void(int, double, double)> epoch_sink;
};

struct TrainResult {
    int steps = 0;
    int skipped_tracks = 0;
    double best_val_map = std::numeric_limits<double>::quiet_NaN();
    int best_epoch = -1;
    std::vector<double> epoch_mean_loss;
};

/// Frame scores from the temporally-modeled head, pooled over every
/// (scene, speaker, frame).
inline ScoredFrames score_scenes(const Model& model, const std::vector<Scene>& scenes,
                                 const TalkNCEConfig& nce_cfg, const LossWeights& weights) {
    ScoredFrames sf;
    for (const Scene& scene : scenes) {
        ForwardResult fr = model.forward(scene, nce_cfg, weights);
        for (int s = 0; s < scene.n_speakers(); ++s) {
            const auto& probs = fr.out.p_av[static_cast<std::size_t>(s)];
            for (int t = 0; t < scene.frames(); ++t) {
                sf.scores.push_back(probs[static_cast<std::size_t>(t)]);
                sf.labels.push_back(scene.labels[static_cast<std::size_t>(s)].values[static_cast<std::size_t>(t)]);
                sf.ids.push_back({scene.scene_id, scene.visual.track_ids[static_cast<std::size_t>(s)], t});
            }
        }
    }
    return sf;
}

/// Deterministic training: fixed scene order per epoch (seeded shuffle), one
/// Adam step per batch of scenes, gradients averaged over the batch. Keeps the
/// parameters of the best validation-mAP epoch when a validation set exists.
inline TrainResult train_model(Model& model, const std::vector<Scene>& train_scenes,
                               const std::vector<Scene>& val_scenes, const TrainOptions& opts) {
    opts.optimizer.validate();
    opts.talknce.validate();
    opts.weights.validate();
    if (train_scenes.empty()) throw std::invalid_argument("train_model: no training scenes");

    Adam adam(model, opts.optimizer.lr, opts.optimizer.weight_decay);
    TrainResult res;
    std::vector<Mat> grad_acc;
    for (int p = 0; p < model.param_count(); ++p)
        grad_acc.emplace_back(model.param(p).rows, model.param(p).cols);

    std::vector<Mat> best_params;
    double best_map = -1.0;

    std::vector<std::size_t> order(train_scenes.size());
    std::iota(order.begin(), order.end(), 0u);

    int step = 0;
    for (int epoch = 0; epoch < opts.optimizer.epochs; ++epoch) {
        // seeded in-epoch shuffle, independent of previous epochs
        Rng shuffle_rng(Rng::derive(opts.seed, 7000 + static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.below(i))]);

        double epoch_loss = 0.0;
        int in_batch = 0;
        for (auto& g : grad_acc) g.fill(0.0);
        for (std::size_t oi = 0; oi < order.size(); ++oi) {
            const Scene& scene = train_scenes[order[oi]];
            const auto t0 = std::chrono::steady_clock::now();
            Tape tape;
            Model::GraphRefs refs;
            ForwardResult fr = model.forward(scene, opts.talknce, opts.weights, &tape, &refs);
            if (!std::isfinite(fr.loss.total))
                throw std::runtime_error("train_model: non-finite loss at scene '" + scene.scene_id +
                                         "', step " + std::to_string(step));
            tape.backward(refs.total);
            for (int p = 0; p < model.param_count(); ++p) {
                const Mat& g = tape.grad(refs.param_leafs[static_cast<std::size_t>(p)]);
                Mat& acc = grad_acc[static_cast<std::size_t>(p)];
                for (std::size_t j = 0; j < acc.size(); ++j) acc.d[j] += g.d[j];
            }
            ++in_batch;
            res.skipped_tracks += fr.skipped_tracks;
            epoch_loss += fr.loss.total;

            const bool last = oi + 1 == order.size();
            if (in_batch == opts.optimizer.batch_scenes || last) {
                if (in_batch > 1)
                    for (auto& g : grad_acc)
                        for (auto& x : g.d) x /= static_cast<double>(in_batch);
                adam.step(model, grad_acc);
                for (auto& g : grad_acc) g.fill(0.0);
                in_batch = 0;
            }
            ++step;
            if (opts.log_sink) {
                const auto t1 = std::chrono::steady_clock::now();
                TrainLogRecord rec;
                rec.epoch = epoch;
                rec.step = step;
                rec.loss = fr.loss;
                rec.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
                opts.log_sink(rec);
            }
        }
        res.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(order.size()));

        double val_map = std::numeric_limits<double>::quiet_NaN();
        if (!val_scenes.empty()) {
            val_map = average_precision(score_scenes(model, val_scenes, opts.talknce, opts.weights));
            if (val_map > best_map) {
                best_map = val_map;
                res.best_epoch = epoch;
                best_params.clear();
                for (int p = 0; p < model.param_count(); ++p) best_params.push_back(model.param(p));
            }
        }
        if (opts.epoch_sink) opts.epoch_sink(epoch, res.epoch_mean_loss.back(), val_map);
    }
    res.steps = step;
    if (!best_params.empty()) {
        for (int p = 0; p < model.param_count(); ++p) model.param(p) = best_params[static_cast<std::size_t>(p)];
        res.best_val_map = best_map;
    }
    return res;
}

/// FNV-1a over a file's bytes; used to compare checkpoints across runs.
inline std::uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("file_hash: cannot open '" + path + "'");
    std::uint64_t h = 1469598103934665603ull;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (in.eof()) break;
    }
    return h;
}

/// Loads every scene of a split, mel features attached.
inline std::vector<Scene> load_split(const Manifest& manifest, const std::string& corpus_dir,
                                     const std::string& split, int mel_bins) {
    std::vector<Scene> scenes;
    for (const auto& e : manifest.scenes) {
        if (e.split != split) continue;
        Scene s = load_scene(manifest, e, corpus_dir);
        s.audio.mel = mel_frontend(s.audio.waveform, s.audio.sample_rate_hz, s.frames(), manifest.fps,
                                   mel_bins);
        scenes.push_back(std::move(s));
    }
    return scenes;
}

} // namespace asdlab
