#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "asdlab/binio.hpp"
#include "asdlab/core.hpp"
#include "asdlab/mat.hpp"
#include "asdlab/objective.hpp"
#include "asdlab/rng.hpp"
#include "asdlab/talknce.hpp"
#include "asdlab/tape.hpp"

namespace asdlab {

enum class TemporalKind { bilstm, self_attention, gru };

inline const char* to_string(TemporalKind k) {
    switch (k) {
        case TemporalKind::bilstm: return "bilstm";
        case TemporalKind::self_attention: return "self_attention";
        case TemporalKind::gru: return "gru";
    }
    return "?";
}

inline TemporalKind temporal_kind_from_string(const std::string& s) {
    if (s == "bilstm") return TemporalKind::bilstm;
    if (s == "self_attention") return TemporalKind::self_attention;
    if (s == "gru") return TemporalKind::gru;
    throw std::invalid_argument("unknown temporal kind '" + s + "'");
}

struct ModelConfig {
    int embed_dim = 128;   // C
    int mel_bins = 13;     // C_mel
    int visual_h = 112;
    int visual_w = 112;
    TemporalKind temporal_kind = TemporalKind::bilstm;
    int attention_heads = 2;
    int hidden_dim = 64;
    std::uint64_t seed = 1;

    void validate() const {
        if (embed_dim <= 0) throw std::invalid_argument("ModelConfig: embed_dim must be positive");
        if (visual_h <= 0 || visual_w <= 0) throw std::invalid_argument("ModelConfig: visual size must be positive");
        if (mel_bins <= 0) throw std::invalid_argument("ModelConfig: mel_bins must be positive");
        if (attention_heads <= 0 || embed_dim % attention_heads != 0)
            throw std::invalid_argument("ModelConfig: attention_heads must divide embed_dim");
        if (hidden_dim <= 0) throw std::invalid_argument("ModelConfig: hidden_dim must be positive");
    }
};

/// Every tensor the pipeline produces for one scene, in eval form.
struct ForwardOutput {
    Mat e_a;                    // T x C
    std::vector<Mat> e_v;       // n_s of T x C
    std::vector<Mat> f_a;       // n_s of T x C
    std::vector<Mat> f_v;       // n_s of T x C
    std::vector<Mat> f_av;      // n_s of T x 2C
    std::vector<Mat> attn_av;   // audio-query attention weights, n_s of T x T
    std::vector<Mat> attn_va;   // visual-query attention weights, n_s of T x T
    std::vector<std::vector<double>> p_av, p_a, p_v; // n_s of T
};

struct ForwardResult {
    ForwardOutput out;
    LossBreakdown loss;
    int skipped_tracks = 0;
};

/// Representative toy ASD network with the four pipeline stages: per-modality
/// encoders, audio repeat + cross-attention fusion, channel concatenation,
/// and a temporal model with three sigmoid heads.
class Model {
public:
    explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        init_params();
    }

    const ModelConfig& config() const { return cfg_; }

    int param_count() const { return static_cast<int>(params_.size()); }
    const std::string& param_name(int i) const { return names_[static_cast<std::size_t>(i)]; }
    Mat& param(int i) { return params_[static_cast<std::size_t>(i)]; }
    const Mat& param(int i) const { return params_[static_cast<std::size_t>(i)]; }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.size();
        return n;
    }

    // --- stage operations (eval form; each builds a scratch tape) ---

    /// mel (4T x C_mel) -> T x C. Two stride-2 temporal convolutions give the
    /// 4T -> T downsampling.
    EmbeddingSequence encode_audio(const Mat& mel) const {
        if (mel.rows % 4 != 0)
            throw std::invalid_argument("encode_audio: mel frame count " + std::to_string(mel.rows) +
                                        " not divisible by 4");
        if (mel.cols != cfg_.mel_bins)
            throw std::invalid_argument("encode_audio: expected " + std::to_string(cfg_.mel_bins) +
                                        " mel bins, got " + std::to_string(mel.cols));
        Tape tape;
        auto leafs = make_leafs(tape);
        Tape::Val e_a = audio_tower(tape, leafs, tape.leaf(mel));
        return {tape.value(e_a), Modality::audio, "audio"};
    }

    /// frames (n_s x T x H x W in [0,1]) -> one T x C sequence per speaker,
    /// shared weights across speakers.
    std::vector<EmbeddingSequence> encode_visual(const VisualClip& clip) const {
        clip.validate();
        if (clip.height != cfg_.visual_h || clip.width != cfg_.visual_w)
            throw std::invalid_argument("encode_visual: clip is " + std::to_string(clip.height) + "x" +
                                        std::to_string(clip.width) + ", model expects " +
                                        std::to_string(cfg_.visual_h) + "x" + std::to_string(cfg_.visual_w));
        Tape tape;
        auto leafs = make_leafs(tape);
        std::vector<EmbeddingSequence> out;
        for (int s = 0; s < clip.n_speakers; ++s) {
            Tape::Val e_v = visual_tower(tape, leafs, tape.leaf(speaker_frames(clip, s)));
            out.push_back({tape.value(e_v), Modality::visual, clip.track_ids[static_cast<std::size_t>(s)]});
        }
        return out;
    }

    struct FuseOutput {
        std::vector<Mat> f_a, f_v, f_av;
        std::vector<Mat> attn_av, attn_va;
    };

    /// Cross-attention fusion. The audio stream is shared (broadcast) across
    /// speakers; per speaker k, f_a attends audio queries over visual
    /// keys/values and f_v the reverse; f_av is the channel concatenation.
    FuseOutput fuse(const Mat& e_a, const std::vector<Mat>& e_v) const {
        Tape tape;
        auto leafs = make_leafs(tape);
        Tape::Val a = tape.leaf(e_a);
        FuseOutput out;
        for (const Mat& ev : e_v) {
            check_shape(ev, e_a.rows, cfg_.embed_dim, "fuse: e_v");
            FusedTrack ft = fuse_track(tape, leafs, a, tape.leaf(ev));
            out.f_a.push_back(tape.value(ft.f_a));
            out.f_v.push_back(tape.value(ft.f_v));
            out.f_av.push_back(tape.value(ft.f_av));
            out.attn_av.push_back(tape.value(ft.attn_av));
            out.attn_va.push_back(tape.value(ft.attn_va));
        }
        return out;
    }

    struct HeadsOutput {
        std::vector<std::vector<double>> p_av, p_a, p_v;
    };

    /// Temporal model over f_av plus per-frame heads on the attention-weighted
    /// uni-modal features.
    HeadsOutput temporal_and_heads(const std::vector<Mat>& f_av, const std::vector<Mat>& f_a,
                                   const std::vector<Mat>& f_v) const {
        if (f_av.size() != f_a.size() || f_av.size() != f_v.size())
            throw std::invalid_argument("temporal_and_heads: per-speaker list sizes differ");
        Tape tape;
        auto leafs = make_leafs(tape);
        HeadsOutput out;
        for (std::size_t k = 0; k < f_av.size(); ++k) {
            TrackHeads th = heads_track(tape, leafs, tape.leaf(f_av[k]), tape.leaf(f_a[k]), tape.leaf(f_v[k]));
            out.p_av.push_back(column(tape.value(th.p_av)));
            out.p_a.push_back(column(tape.value(th.p_a)));
            out.p_v.push_back(column(tape.value(th.p_v)));
        }
        return out;
    }

    /// Full pipeline with the composite objective. When `tape` is provided the
    /// graph stays alive for backward(); grads land in the leaf handles
    /// reachable via the returned GraphRefs.
    struct GraphRefs {
        std::vector<Tape::Val> param_leafs;
        Tape::Val total;
    };

    ForwardResult forward(const Scene& scene, const TalkNCEConfig& nce_cfg, const LossWeights& weights,
                          Tape* external_tape = nullptr, GraphRefs* refs = nullptr) const {
        scene.validate();
        nce_cfg.validate();
        weights.validate();
        if (!scene.audio.mel)
            throw std::invalid_argument("forward: scene '" + scene.scene_id +
                                        "' has no mel features (run the mel front-end first)");
        Tape local;
        Tape& tape = external_tape ? *external_tape : local;
        auto leafs = make_leafs(tape);

        const int n_s = scene.n_speakers();
        ForwardResult res;

        Tape::Val e_a = audio_tower(tape, leafs, tape.leaf(*scene.audio.mel));
        std::vector<Tape::Val> e_v;
        for (int s = 0; s < n_s; ++s)
            e_v.push_back(visual_tower(tape, leafs, tape.leaf(speaker_frames(scene.visual, s))));

        std::vector<FusedTrack> fused;
        for (int s = 0; s < n_s; ++s) fused.push_back(fuse_track(tape, leafs, e_a, e_v[static_cast<std::size_t>(s)]));

        std::vector<TrackHeads> heads;
        for (int s = 0; s < n_s; ++s)
            heads.push_back(heads_track(tape, leafs, fused[static_cast<std::size_t>(s)].f_av,
                                        fused[static_cast<std::size_t>(s)].f_a,
                                        fused[static_cast<std::size_t>(s)].f_v));

        // per-track BCE terms, averaged over tracks
        std::vector<std::pair<double, Tape::Val>> av_terms, a_terms, v_terms;
        const double track_w = 1.0 / n_s;
        for (int s = 0; s < n_s; ++s) {
            const auto& lab = scene.labels[static_cast<std::size_t>(s)];
            av_terms.push_back({track_w, tape.bce_mean(heads[static_cast<std::size_t>(s)].p_av, lab)});
            a_terms.push_back({track_w, tape.bce_mean(heads[static_cast<std::size_t>(s)].p_a, lab)});
            v_terms.push_back({track_w, tape.bce_mean(heads[static_cast<std::size_t>(s)].p_v, lab)});
        }
        Tape::Val l_av = tape.weighted_sum(av_terms);
        Tape::Val l_a = tape.weighted_sum(a_terms);
        Tape::Val l_v = tape.weighted_sum(v_terms);

        // TalkNCE per track on the placement-selected pair, averaged over
        // usable tracks; under-populated tracks are skipped, not errors.
        std::vector<Tape::Val> nce_nodes;
        for (int s = 0; s < n_s; ++s) {
            const auto& lab = scene.labels[static_cast<std::size_t>(s)];
            if (!talknce_usable(lab, nce_cfg)) {
                ++res.skipped_tracks;
                continue;
            }
            Tape::Val tv, ta;
            if (nce_cfg.placement == Placement::before_fusion) {
                tv = e_v[static_cast<std::size_t>(s)];
                ta = e_a;
            } else {
                tv = fused[static_cast<std::size_t>(s)].f_v;
                ta = fused[static_cast<std::size_t>(s)].f_a;
            }
            nce_nodes.push_back(tape.talknce(tv, ta, lab, nce_cfg));
        }
        Tape::Val l_nce;
        if (nce_nodes.empty()) {
            l_nce = tape.constant_scalar(0.0);
        } else {
            std::vector<std::pair<double, Tape::Val>> nce_terms;
            for (auto v : nce_nodes) nce_terms.push_back({1.0 / static_cast<double>(nce_nodes.size()), v});
            l_nce = tape.weighted_sum(nce_terms);
        }

        LossWeights w = weights;
        w.lambda_talknce = nce_cfg.lambda;
        Tape::Val total = tape.weighted_sum(
            {{1.0, l_av}, {w.lambda_a, l_a}, {w.lambda_v, l_v}, {w.lambda_talknce, l_nce}});

        res.loss = compose(tape.value(l_av)(0, 0), tape.value(l_a)(0, 0), tape.value(l_v)(0, 0),
                           tape.value(l_nce)(0, 0), w);
        res.loss.n_tracks_used = static_cast<int>(nce_nodes.size());
        if (res.loss.total != tape.value(total)(0, 0))
            throw std::runtime_error("forward: composed total mismatch"); // same summation order by construction

        res.out.e_a = tape.value(e_a);
        for (int s = 0; s < n_s; ++s) {
            const auto& ft = fused[static_cast<std::size_t>(s)];
            res.out.e_v.push_back(tape.value(e_v[static_cast<std::size_t>(s)]));
            res.out.f_a.push_back(tape.value(ft.f_a));
            res.out.f_v.push_back(tape.value(ft.f_v));
            res.out.f_av.push_back(tape.value(ft.f_av));
            res.out.attn_av.push_back(tape.value(ft.attn_av));
            res.out.attn_va.push_back(tape.value(ft.attn_va));
            res.out.p_av.push_back(column(tape.value(heads[static_cast<std::size_t>(s)].p_av)));
            res.out.p_a.push_back(column(tape.value(heads[static_cast<std::size_t>(s)].p_a)));
            res.out.p_v.push_back(column(tape.value(heads[static_cast<std::size_t>(s)].p_v)));
        }
        if (refs) {
            refs->param_leafs = leafs.all;
            refs->total = total;
        }
        return res;
    }

    // --- checkpoint: binary container that round-trips weights and config exactly ---

    static constexpr char kCheckpointMagic[4] = {'A', 'S', 'D', 'C'};
    static constexpr std::uint32_t kCheckpointVersion = 1;

    void save(const std::string& path) const;
    static Model load(const std::string& path);

private:
    struct Leafs {
        std::vector<Tape::Val> all; // one per parameter, same order as params_
        Tape::Val operator[](int i) const { return all[static_cast<std::size_t>(i)]; }
    };

    struct FusedTrack {
        Tape::Val f_a, f_v, f_av;
        Tape::Val attn_av, attn_va;
    };

    struct TrackHeads {
        Tape::Val p_av, p_a, p_v;
    };

    // parameter registry ------------------------------------------------

    int add_param(const std::string& name, int rows, int cols, Rng& rng) {
        Mat m(rows, cols);
        const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
        for (auto& x : m.d) x = rng.uniform(-bound, bound);
        names_.push_back(name);
        params_.push_back(std::move(m));
        index_[name] = static_cast<int>(params_.size()) - 1;
        return static_cast<int>(params_.size()) - 1;
    }

    int add_zero_param(const std::string& name, int rows, int cols) {
        names_.push_back(name);
        params_.push_back(Mat(rows, cols));
        index_[name] = static_cast<int>(params_.size()) - 1;
        return static_cast<int>(params_.size()) - 1;
    }

    int idx(const std::string& name) const { return index_.at(name); }

    static int visual_ch(int stage, int c) {
        const int base[3] = {std::max(4, c / 4), std::max(8, c / 2), c};
        return base[stage];
    }

    void init_params() {
        Rng rng(Rng::derive(cfg_.seed, 0x5eedu));
        const int c = cfg_.embed_dim;
        // visual tower: three stride-2 3x3 convs, GAP, linear
        int in_ch = 1;
        for (int s = 0; s < 3; ++s) {
            const int out_ch = visual_ch(s, c);
            add_param("vis.conv" + std::to_string(s) + ".w", 9 * in_ch, out_ch, rng);
            add_zero_param("vis.conv" + std::to_string(s) + ".b", 1, out_ch);
            in_ch = out_ch;
        }
        add_param("vis.proj.w", in_ch, c, rng);
        add_zero_param("vis.proj.b", 1, c);
        // audio tower: two stride-2 kernel-3 temporal convs, linear
        const int a0 = std::max(4, c / 2);
        add_param("aud.conv0.w", 3 * cfg_.mel_bins, a0, rng);
        add_zero_param("aud.conv0.b", 1, a0);
        add_param("aud.conv1.w", 3 * a0, c, rng);
        add_zero_param("aud.conv1.b", 1, c);
        add_param("aud.proj.w", c, c, rng);
        add_zero_param("aud.proj.b", 1, c);
        // cross-attention: audio-query and visual-query triplets
        for (const char* side : {"aq", "vq"}) {
            add_param(std::string("fuse.") + side + ".wq", c, c, rng);
            add_param(std::string("fuse.") + side + ".wk", c, c, rng);
            add_param(std::string("fuse.") + side + ".wv", c, c, rng);
        }
        // temporal model over f_av (2C wide)
        const int h = cfg_.hidden_dim;
        switch (cfg_.temporal_kind) {
            case TemporalKind::bilstm:
                for (const char* dir : {"fwd", "bwd"}) {
                    add_param(std::string("tmp.lstm.") + dir + ".w", 2 * c, 4 * h, rng);
                    add_param(std::string("tmp.lstm.") + dir + ".u", h, 4 * h, rng);
                    add_zero_param(std::string("tmp.lstm.") + dir + ".b", 1, 4 * h);
                }
                add_param("tmp.out.w", 2 * h, 1, rng);
                break;
            case TemporalKind::gru:
                add_param("tmp.gru.w", 2 * c, 3 * h, rng);
                add_param("tmp.gru.u", h, 3 * h, rng);
                add_zero_param("tmp.gru.b", 1, 3 * h);
                add_param("tmp.out.w", h, 1, rng);
                break;
            case TemporalKind::self_attention:
                add_param("tmp.attn.wq", 2 * c, h, rng);
                add_param("tmp.attn.wk", 2 * c, h, rng);
                add_param("tmp.attn.wv", 2 * c, h, rng);
                add_param("tmp.out.w", h, 1, rng);
                break;
        }
        add_zero_param("tmp.out.b", 1, 1);
        // per-frame uni-modal heads
        add_param("head.a.w", c, 1, rng);
        add_zero_param("head.a.b", 1, 1);
        add_param("head.v.w", c, 1, rng);
        add_zero_param("head.v.b", 1, 1);
    }

    Leafs make_leafs(Tape& tape) const {
        Leafs l;
        l.all.reserve(params_.size());
        for (const auto& p : params_) l.all.push_back(tape.leaf(p));
        return l;
    }

    // towers --------------------------------------------------------------

    static Mat speaker_frames(const VisualClip& clip, int s) {
        Mat m(clip.frames, clip.height * clip.width);
        const std::size_t base = static_cast<std::size_t>(s) * clip.frames * clip.height * clip.width;
        for (std::size_t i = 0; i < m.size(); ++i) m.d[i] = static_cast<double>(clip.pixels[base + i]);
        return m;
    }

    Tape::Val visual_tower(Tape& tape, const Leafs& l, Tape::Val frames) const {
        const int T = tape.value(frames).rows;
        int h = cfg_.visual_h, w = cfg_.visual_w, in_ch = 1;
        Tape::Val x = frames;
        for (int s = 0; s < 3; ++s) {
            Tape::Conv2dSpec sp{T, h, w, in_ch, 3, 2, 1};
            Tape::Val cols = tape.im2col2d(x, sp);
            Tape::Val conv = tape.add_row(tape.matmul(cols, l[idx("vis.conv" + std::to_string(s) + ".w")]),
                                          l[idx("vis.conv" + std::to_string(s) + ".b")]);
            x = tape.relu(conv);
            h = sp.out_h();
            w = sp.out_w();
            in_ch = visual_ch(s, cfg_.embed_dim);
            // rows are (T*OH*OW); reshape is implicit in the next im2col spec
            if (s < 2) {
                // re-pack rows back to frames x (H*W*C) layout for the next conv
                x = repack_rows(tape, x, T, h * w);
            }
        }
        Tape::Val pooled = tape.row_group_mean(x, h * w); // T x C3
        return tape.add_row(tape.matmul(pooled, l[idx("vis.proj.w")]), l[idx("vis.proj.b")]);
    }

    /// (T*P) x C -> T x (P*C): regroup conv rows into per-frame feature maps.
    /// Both layouts are row-major over (t, p, c), so this is a pure reshape.
    static Tape::Val repack_rows(Tape& tape, Tape::Val x, int frames, int positions) {
        return tape.reshape(x, frames, positions * tape.value(x).cols);
    }

    Tape::Val audio_tower(Tape& tape, const Leafs& l, Tape::Val mel) const {
        const Mat& m = tape.value(mel);
        const int a0 = std::max(4, cfg_.embed_dim / 2);
        Tape::Conv1dSpec sp0{m.rows, cfg_.mel_bins, 3, 2, 1};
        Tape::Val x = tape.relu(
            tape.add_row(tape.matmul(tape.im2col1d(mel, sp0), l[idx("aud.conv0.w")]), l[idx("aud.conv0.b")]));
        Tape::Conv1dSpec sp1{sp0.out_len(), a0, 3, 2, 1};
        x = tape.relu(
            tape.add_row(tape.matmul(tape.im2col1d(x, sp1), l[idx("aud.conv1.w")]), l[idx("aud.conv1.b")]));
        return tape.add_row(tape.matmul(x, l[idx("aud.proj.w")]), l[idx("aud.proj.b")]);
    }

    /// Multi-head cross-attention: softmax((Q K^T)/sqrt(dk)) V per head, heads
    /// concatenated. Output is the attention-weighted value projection of the
    /// key/value stream. Also returns the head-0 attention weights.
    struct AttnOut {
        Tape::Val out;
        Tape::Val weights;
    };

    AttnOut cross_attention(Tape& tape, Tape::Val query, Tape::Val kv, Tape::Val wq, Tape::Val wk,
                            Tape::Val wv) const {
        const int heads = cfg_.attention_heads;
        const int dk = cfg_.embed_dim / heads;
        Tape::Val q = tape.matmul(query, wq);
        Tape::Val k = tape.matmul(kv, wk);
        Tape::Val v = tape.matmul(kv, wv);
        std::vector<Tape::Val> head_outs;
        Tape::Val first_weights;
        for (int hd = 0; hd < heads; ++hd) {
            Tape::Val qh = tape.slice_cols(q, hd * dk, (hd + 1) * dk);
            Tape::Val kh = tape.slice_cols(k, hd * dk, (hd + 1) * dk);
            Tape::Val vh = tape.slice_cols(v, hd * dk, (hd + 1) * dk);
            Tape::Val scores = tape.scale(tape.matmul(qh, tape.transpose_val(kh)),
                                          1.0 / std::sqrt(static_cast<double>(dk)));
            Tape::Val attn = tape.softmax_rows(scores);
            if (hd == 0) first_weights = attn;
            head_outs.push_back(tape.matmul(attn, vh));
        }
        Tape::Val out = head_outs[0];
        for (std::size_t i = 1; i < head_outs.size(); ++i) out = tape.concat_cols(out, head_outs[i]);
        return {out, first_weights};
    }

    FusedTrack fuse_track(Tape& tape, const Leafs& l, Tape::Val e_a, Tape::Val e_v) const {
        FusedTrack ft;
        AttnOut fa = cross_attention(tape, e_a, e_v, l[idx("fuse.aq.wq")], l[idx("fuse.aq.wk")],
                                     l[idx("fuse.aq.wv")]);
        AttnOut fv = cross_attention(tape, e_v, e_a, l[idx("fuse.vq.wq")], l[idx("fuse.vq.wk")],
                                     l[idx("fuse.vq.wv")]);
        ft.f_a = fa.out;
        ft.f_v = fv.out;
        ft.attn_av = fa.weights;
        ft.attn_va = fv.weights;
        ft.f_av = tape.concat_cols(ft.f_a, ft.f_v);
        return ft;
    }

    Tape::Val lstm_direction(Tape& tape, const Leafs& l, Tape::Val x, const std::string& prefix) const {
        const int T = tape.value(x).rows;
        const int h = cfg_.hidden_dim;
        Tape::Val xw = tape.add_row(tape.matmul(x, l[idx(prefix + ".w")]), l[idx(prefix + ".b")]);
        Tape::Val u = l[idx(prefix + ".u")];
        Tape::Val h_prev = tape.leaf(Mat(1, h));
        Tape::Val c_prev = tape.leaf(Mat(1, h));
        std::vector<Tape::Val> hs;
        hs.reserve(static_cast<std::size_t>(T));
        for (int t = 0; t < T; ++t) {
            Tape::Val gates = tape.add(tape.slice_rows(xw, t, t + 1), tape.matmul(h_prev, u));
            Tape::Val gi = tape.sigmoid(tape.slice_cols(gates, 0, h));
            Tape::Val gf = tape.sigmoid(tape.slice_cols(gates, h, 2 * h));
            Tape::Val go = tape.sigmoid(tape.slice_cols(gates, 2 * h, 3 * h));
            Tape::Val gc = tape.tanh_act(tape.slice_cols(gates, 3 * h, 4 * h));
            c_prev = tape.add(tape.hadamard(gf, c_prev), tape.hadamard(gi, gc));
            h_prev = tape.hadamard(go, tape.tanh_act(c_prev));
            hs.push_back(h_prev);
        }
        return tape.concat_rows(hs);
    }

    Tape::Val gru_layer(Tape& tape, const Leafs& l, Tape::Val x) const {
        const int T = tape.value(x).rows;
        const int h = cfg_.hidden_dim;
        Tape::Val xw = tape.add_row(tape.matmul(x, l[idx("tmp.gru.w")]), l[idx("tmp.gru.b")]);
        Tape::Val u = l[idx("tmp.gru.u")];
        Tape::Val h_prev = tape.leaf(Mat(1, h));
        std::vector<Tape::Val> hs;
        for (int t = 0; t < T; ++t) {
            Tape::Val hu = tape.matmul(h_prev, u);
            Tape::Val xt = tape.slice_rows(xw, t, t + 1);
            Tape::Val z = tape.sigmoid(tape.add(tape.slice_cols(xt, 0, h), tape.slice_cols(hu, 0, h)));
            Tape::Val r = tape.sigmoid(tape.add(tape.slice_cols(xt, h, 2 * h), tape.slice_cols(hu, h, 2 * h)));
            Tape::Val n = tape.tanh_act(tape.add(tape.slice_cols(xt, 2 * h, 3 * h),
                                                 tape.hadamard(r, tape.slice_cols(hu, 2 * h, 3 * h))));
            // h = (1 - z) * n + z * h_prev
            Tape::Val zh = tape.hadamard(z, h_prev);
            Tape::Val one_minus_z = tape.affine(z, -1.0, 1.0);
            h_prev = tape.add(tape.hadamard(one_minus_z, n), zh);
            hs.push_back(h_prev);
        }
        return tape.concat_rows(hs);
    }

    Tape::Val temporal_model(Tape& tape, const Leafs& l, Tape::Val f_av) const {
        switch (cfg_.temporal_kind) {
            case TemporalKind::bilstm: {
                Tape::Val fwd = lstm_direction(tape, l, f_av, "tmp.lstm.fwd");
                Tape::Val bwd = tape.reverse_rows(lstm_direction(tape, l, tape.reverse_rows(f_av), "tmp.lstm.bwd"));
                return tape.concat_cols(fwd, bwd);
            }
            case TemporalKind::gru:
                return gru_layer(tape, l, f_av);
            case TemporalKind::self_attention: {
                const int h = cfg_.hidden_dim;
                Tape::Val q = tape.matmul(f_av, l[idx("tmp.attn.wq")]);
                Tape::Val k = tape.matmul(f_av, l[idx("tmp.attn.wk")]);
                Tape::Val v = tape.matmul(f_av, l[idx("tmp.attn.wv")]);
                Tape::Val scores =
                    tape.scale(tape.matmul(q, tape.transpose_val(k)), 1.0 / std::sqrt(static_cast<double>(h)));
                return tape.matmul(tape.softmax_rows(scores), v);
            }
        }
        throw std::logic_error("temporal_model: unreachable");
    }

    TrackHeads heads_track(Tape& tape, const Leafs& l, Tape::Val f_av, Tape::Val f_a, Tape::Val f_v) const {
        TrackHeads th;
        Tape::Val seq = temporal_model(tape, l, f_av);
        th.p_av = tape.sigmoid(tape.add_row(tape.matmul(seq, l[idx("tmp.out.w")]), l[idx("tmp.out.b")]));
        th.p_a = tape.sigmoid(tape.add_row(tape.matmul(f_a, l[idx("head.a.w")]), l[idx("head.a.b")]));
        th.p_v = tape.sigmoid(tape.add_row(tape.matmul(f_v, l[idx("head.v.w")]), l[idx("head.v.b")]));
        return th;
    }

    static std::vector<double> column(const Mat& m) {
        std::vector<double> v(static_cast<std::size_t>(m.rows));
        for (int i = 0; i < m.rows; ++i) v[static_cast<std::size_t>(i)] = m(i, 0);
        return v;
    }

    ModelConfig cfg_;
    std::vector<std::string> names_;
    std::vector<Mat> params_;
    std::map<std::string, int> index_;
};

inline void Model::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    out.write(kCheckpointMagic, 4);
    binio::write_u32(out, kCheckpointVersion);
    binio::write_u32(out, static_cast<std::uint32_t>(cfg_.embed_dim));
    binio::write_u32(out, static_cast<std::uint32_t>(cfg_.mel_bins));
    binio::write_u32(out, static_cast<std::uint32_t>(cfg_.visual_h));
    binio::write_u32(out, static_cast<std::uint32_t>(cfg_.visual_w));
    const std::string kind = to_string(cfg_.temporal_kind);
    binio::write_u32(out, static_cast<std::uint32_t>(kind.size()));
    out.write(kind.data(), static_cast<std::streamsize>(kind.size()));
    binio::write_u32(out, static_cast<std::uint32_t>(cfg_.attention_heads));
    binio::write_u32(out, static_cast<std::uint32_t>(cfg_.hidden_dim));
    binio::write_u64(out, cfg_.seed);
    binio::write_u32(out, static_cast<std::uint32_t>(params_.size()));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const std::string& name = names_[i];
        binio::write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        binio::write_u32(out, static_cast<std::uint32_t>(params_[i].rows));
        binio::write_u32(out, static_cast<std::uint32_t>(params_[i].cols));
        for (double v : params_[i].d) binio::write_f64(out, v);
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline Model Model::load(const std::string& path) {
    binio::Reader in(path);
    char magic[4];
    in.take(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw std::runtime_error("checkpoint '" + path + "': bad magic, not a checkpoint file");
    const std::uint32_t version = in.read_u32();
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint '" + path + "': unsupported version " +
                                 std::to_string(version) + " (supported: " +
                                 std::to_string(kCheckpointVersion) + ")");
    ModelConfig cfg;
    cfg.embed_dim = static_cast<int>(in.read_u32());
    cfg.mel_bins = static_cast<int>(in.read_u32());
    cfg.visual_h = static_cast<int>(in.read_u32());
    cfg.visual_w = static_cast<int>(in.read_u32());
    cfg.temporal_kind = temporal_kind_from_string(in.read_string(in.read_u32()));
    cfg.attention_heads = static_cast<int>(in.read_u32());
    cfg.hidden_dim = static_cast<int>(in.read_u32());
    cfg.seed = in.read_u64();
    Model m(cfg);
    const std::uint32_t n = in.read_u32();
    if (n != m.params_.size())
        throw std::runtime_error("checkpoint '" + path + "': has " + std::to_string(n) +
                                 " tensors, model built from its config has " +
                                 std::to_string(m.params_.size()));
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::string name = in.read_string(in.read_u32());
        if (name != m.names_[i])
            throw std::runtime_error("checkpoint '" + path + "': tensor " + std::to_string(i) + " is '" +
                                     name + "', expected '" + m.names_[i] + "'");
        const int rows = static_cast<int>(in.read_u32());
        const int cols = static_cast<int>(in.read_u32());
        Mat& p = m.params_[i];
        if (rows != p.rows || cols != p.cols)
            throw std::runtime_error("checkpoint '" + path + "': tensor '" + name + "' is " +
                                     std::to_string(rows) + "x" + std::to_string(cols) + ", expected " +
                                     std::to_string(p.rows) + "x" + std::to_string(p.cols));
        for (double& v : p.d) v = in.read_f64();
    }
    return m;
}

} // namespace asdlab
