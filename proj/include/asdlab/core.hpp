#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "asdlab/mat.hpp"

namespace asdlab {

enum class Modality { audio, visual, fused };

inline const char* to_string(Modality m) {
    switch (m) {
        case Modality::audio: return "audio";
        case Modality::visual: return "visual";
        case Modality::fused: return "fused";
    }
    return "?";
}

/// Per-frame binary speaking labels for one speaker track.
struct FrameLabels {
    std::vector<std::uint8_t> values; // each exactly 0 or 1
    double frame_rate_hz = 25.0;

    int frames() const { return static_cast<int>(values.size()); }

    /// T_act: number of active frames.
    int active_count() const {
        int n = 0;
        for (auto v : values) n += (v != 0);
        return n;
    }

    void validate() const {
        if (frame_rate_hz <= 0.0) throw std::invalid_argument("FrameLabels: frame_rate_hz must be positive");
        for (std::size_t i = 0; i < values.size(); ++i)
            if (values[i] != 0 && values[i] != 1)
                throw std::invalid_argument("FrameLabels: value at frame " + std::to_string(i) +
                                            " is not 0 or 1");
    }
};

/// Ascending frame indices where the label is 1. Empty result is allowed.
inline std::vector<int> active_indices(const FrameLabels& labels) {
    std::vector<int> idx;
    idx.reserve(labels.values.size());
    for (int t = 0; t < labels.frames(); ++t)
        if (labels.values[static_cast<std::size_t>(t)]) idx.push_back(t);
    return idx;
}

/// A T x C frame-aligned embedding stream for one modality of one track.
struct EmbeddingSequence {
    Mat data; // T x C
    Modality modality = Modality::fused;
    std::string track_id;

    int frames() const { return data.rows; }
    int dim() const { return data.cols; }

    void validate() const {
        if (data.rows <= 0 || data.cols <= 0)
            throw std::invalid_argument("EmbeddingSequence: T and C must be positive");
        if (!data.all_finite())
            throw std::invalid_argument("EmbeddingSequence: non-finite entry in track '" + track_id + "'");
    }
};

/// Row-gather preserving order and metadata. Indices must lie in [0, T).
inline EmbeddingSequence gather_frames(const EmbeddingSequence& e, const std::vector<int>& idx) {
    EmbeddingSequence out;
    out.modality = e.modality;
    out.track_id = e.track_id;
    out.data = Mat(static_cast<int>(idx.size()), e.data.cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const int src = idx[r];
        if (src < 0 || src >= e.data.rows)
            throw std::out_of_range("gather_frames: index " + std::to_string(src) + " out of range [0, " +
                                    std::to_string(e.data.rows) + ") in track '" + e.track_id + "'");
        const double* in = e.data.row(src);
        double* dst = out.data.row(static_cast<int>(r));
        for (int c = 0; c < e.data.cols; ++c) dst[c] = in[c];
    }
    return out;
}

/// Grayscale face crops for all tracks of a scene: n_s x T x H x W in [0, 1].
struct VisualClip {
    int n_speakers = 0;
    int frames = 0;
    int height = 0;
    int width = 0;
    std::vector<float> pixels; // row-major (speaker, frame, y, x)
    std::vector<std::string> track_ids;

    std::size_t index(int s, int t, int y, int x) const {
        return ((static_cast<std::size_t>(s) * frames + t) * height + y) * width + x;
    }
    float at(int s, int t, int y, int x) const { return pixels[index(s, t, y, x)]; }

    void validate() const {
        if (n_speakers <= 0 || frames <= 0 || height <= 0 || width <= 0)
            throw std::invalid_argument("VisualClip: empty dimensions");
        if (pixels.size() != static_cast<std::size_t>(n_speakers) * frames * height * width)
            throw std::invalid_argument("VisualClip: pixel buffer does not match declared shape");
        if (track_ids.size() != static_cast<std::size_t>(n_speakers))
            throw std::invalid_argument("VisualClip: track_ids count != n_speakers");
        for (float v : pixels)
            if (!(v >= 0.0f && v <= 1.0f))
                throw std::invalid_argument("VisualClip: pixel outside [0, 1]");
    }
};

/// One shared audio stream; mel is present only after the front-end ran and
/// then has exactly 4*T rows for the paired VisualClip.
struct AudioClip {
    std::vector<float> waveform;
    int sample_rate_hz = 16000;
    std::optional<Mat> mel; // 4T x C_mel

    void validate(int frames) const {
        if (sample_rate_hz <= 0) throw std::invalid_argument("AudioClip: sample_rate_hz must be positive");
        if (mel && mel->rows != 4 * frames)
            throw std::invalid_argument("AudioClip: mel has " + std::to_string(mel->rows) +
                                        " frames, expected 4*T = " + std::to_string(4 * frames));
    }
};

/// The unit of training and evaluation: n_s face tracks sharing one audio
/// stream over T video frames.
struct Scene {
    VisualClip visual;
    AudioClip audio;
    std::vector<FrameLabels> labels; // one per track
    std::string scene_id;

    int frames() const { return visual.frames; }
    int n_speakers() const { return visual.n_speakers; }

    void validate() const {
        visual.validate();
        audio.validate(visual.frames);
        if (labels.size() != static_cast<std::size_t>(visual.n_speakers))
            throw std::invalid_argument("Scene '" + scene_id + "': labels count != n_speakers");
        for (const auto& l : labels) {
            l.validate();
            if (l.frames() != visual.frames)
                throw std::invalid_argument("Scene '" + scene_id + "': label length != T");
        }
    }
};

} // namespace asdlab
