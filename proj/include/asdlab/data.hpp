#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "asdlab/binio.hpp"
#include "asdlab/core.hpp"
#include "asdlab/mat.hpp"
#include "asdlab/rng.hpp"

namespace asdlab {

struct GenConfig {
    int n_scenes = 50;
    int n_speakers = 2;
    int frames = 100; // T
    double fps = 25.0;
    int sample_rate_hz = 16000;
    double active_ratio = 0.567;
    double snr_db = 15.0; // +inf disables noise
    int latent_dim = 2;
    int height = 112;
    int width = 112;
    double train_fraction = 0.8;
    double val_fraction = 0.1; // remainder is the test split
    std::uint64_t seed = 7;

    int samples_per_frame() const {
        const double spf = static_cast<double>(sample_rate_hz) / fps;
        const int s = static_cast<int>(std::lround(spf));
        if (std::abs(spf - s) > 1e-9)
            throw std::invalid_argument("GenConfig: sample_rate/fps must be an integer sample count");
        return s;
    }

    void validate() const {
        if (n_scenes <= 0) throw std::invalid_argument("GenConfig: n_scenes must be positive");
        if (n_speakers <= 0) throw std::invalid_argument("GenConfig: n_speakers must be positive");
        if (frames < 4) throw std::invalid_argument("GenConfig: T must be >= 4");
        if (!(active_ratio > 0.0 && active_ratio < 1.0))
            throw std::invalid_argument("GenConfig: active_ratio must lie in (0, 1)");
        if (fps <= 0.0 || sample_rate_hz <= 0) throw std::invalid_argument("GenConfig: bad rates");
        if (height <= 0 || width <= 0) throw std::invalid_argument("GenConfig: bad visual size");
        if (latent_dim < 1) throw std::invalid_argument("GenConfig: latent_dim must be >= 1");
        if (train_fraction < 0.0 || val_fraction < 0.0 || train_fraction + val_fraction > 1.0)
            throw std::invalid_argument("GenConfig: bad splitfractions");
        if (samples_per_frame() % 4 != 0)
            throw std::invalid_argument("GenConfig: sample_rate/(4*fps) must be an integer hop");
    }
};

struct SceneEntry {
    std::string scene_id;
    std::string visual_path; // relative to the manifest directory
    std::string audio_path;
    std::string labels_path;
    int frames = 0;
    int n_speakers = 0;
    std::string split; // train | val | test
};

struct Manifest {
    int version = 1;
    double fps = 25.0;
    int sample_rate_hz = 16000;
    int height = 0, width = 0;
    std::uint64_t seed = 0;
    double active_ratio = 0.0;
    std::vector<SceneEntry> scenes;
};

// --- AVSF array container -------------------------------------------------

namespace avsf {

constexpr char kMagic[4] = {'A', 'V', 'S', 'F'};
constexpr std::uint32_t kVersion = 1;

inline void save(const std::string& path, const std::vector<std::uint32_t>& dims,
                 const std::vector<float>& payload) {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    if (n != payload.size()) throw std::invalid_argument("avsf::save: dims do not match payload size");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("avsf: cannot open '" + path + "' for writing");
    out.write(kMagic, 4);
    binio::write_u32(out, kVersion);
    binio::write_u32(out, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) binio::write_u32(out, d);
    for (float v : payload) binio::write_f32(out, v);
    if (!out) throw std::runtime_error("avsf: write failed for '" + path + "'");
}

struct Array {
    std::vector<std::uint32_t> dims;
    std::vector<float> payload;
};

inline Array load(const std::string& path) {
    binio::Reader in(path);
    char magic[4];
    in.take(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("avsf '" + path + "': bad magic, not an AVSF array");
    const std::uint32_t version = in.read_u32();
    if (version != kVersion)
        throw std::runtime_error("avsf '" + path + "': unsupported version " + std::to_string(version) +
                                 " (supported: " + std::to_string(kVersion) + ")");
    Array a;
    const std::uint32_t rank = in.read_u32();
    if (rank == 0 || rank > 8) throw std::runtime_error("avsf '" + path + "': implausible rank");
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        a.dims.push_back(in.read_u32());
        n *= a.dims.back();
    }
    a.payload.resize(n);
    for (auto& v : a.payload) v = in.read_f32();
    if (!in.at_eof()) throw std::runtime_error("avsf '" + path + "': trailing bytes after payload");
    return a;
}

} // namespace avsf

// --- mel front-end ----------------------------------------------------------

namespace melfe {

/// HTK mel scale.
inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular filter center frequencies (Hz) for n_mels filters over
/// [0, sample_rate/2].
inline std::vector<double> filter_centers_hz(int sample_rate_hz, int n_mels) {
    const double mel_max = hz_to_mel(sample_rate_hz / 2.0);
    std::vector<double> centers(static_cast<std::size_t>(n_mels));
    for (int k = 1; k <= n_mels; ++k)
        centers[static_cast<std::size_t>(k - 1)] = mel_to_hz(mel_max * k / (n_mels + 1));
    return centers;
}

/// In-place iterative radix-2 FFT over interleaved complex pairs.
inline void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
    const std::size_t n = re.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * 3.14159265358979323846 / static_cast<double>(len);
        const double wr = std::cos(ang), wi = std::sin(ang);
        for (std::size_t i = 0; i < n; i += len) {
            double cr = 1.0, ci = 0.0;
            for (std::size_t k = 0; k < len / 2; ++k) {
                const double ur = re[i + k], ui = im[i + k];
                const double vr = re[i + k + len / 2] * cr - im[i + k + len / 2] * ci;
                const double vi = re[i + k + len / 2] * ci + im[i + k + len / 2] * cr;
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                const double nr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = nr;
            }
        }
    }
}

} // namespace melfe

/// Log-mel features with exactly 4*T frames: hop = sample_rate/(4*fps), 25 ms
/// Hann window, zero-padded past the end of the waveform.
inline Mat mel_frontend(const std::vector<float>& waveform, int sample_rate_hz, int frames,
                        double fps = 25.0, int mel_bins = 13) {
    if (frames <= 0) throw std::invalid_argument("mel_frontend: T must be positive");
    const double hop_f = static_cast<double>(sample_rate_hz) / (4.0 * fps);
    const int hop = static_cast<int>(std::lround(hop_f));
    if (std::abs(hop_f - hop) > 1e-9 || hop <= 0)
        throw std::invalid_argument("mel_frontend: sample_rate/(4*fps) must be a positive integer hop");
    const std::size_t needed = static_cast<std::size_t>(std::ceil(frames * sample_rate_hz / fps));
    if (waveform.size() < needed)
        throw std::invalid_argument("mel_frontend: waveform has " + std::to_string(waveform.size()) +
                                    " samples, need at least " + std::to_string(needed) + " (T/fps seconds)");
    const int win = std::max(8, static_cast<int>(std::lround(0.025 * sample_rate_hz)));
    std::size_t n_fft = 8;
    while (n_fft < static_cast<std::size_t>(win)) n_fft <<= 1;

    // Hann window
    std::vector<double> window(static_cast<std::size_t>(win));
    for (int i = 0; i < win; ++i)
        window[static_cast<std::size_t>(i)] =
            0.5 - 0.5 * std::cos(2.0 * 3.14159265358979323846 * i / (win - 1));

    // Triangular mel filters over FFT bins.
    const int n_bins = static_cast<int>(n_fft) / 2 + 1;
    const double mel_max = melfe::hz_to_mel(sample_rate_hz / 2.0);
    std::vector<double> mel_points(static_cast<std::size_t>(mel_bins) + 2);
    for (int k = 0; k < mel_bins + 2; ++k)
        mel_points[static_cast<std::size_t>(k)] = melfe::mel_to_hz(mel_max * k / (mel_bins + 1));
    auto bin_hz = [&](int b) { return static_cast<double>(b) * sample_rate_hz / static_cast<double>(n_fft); };

    const int total = 4 * frames;
    Mat mel(total, mel_bins);
    std::vector<double> re(n_fft), im(n_fft), power(static_cast<std::size_t>(n_bins));
    for (int f = 0; f < total; ++f) {
        const std::size_t start = static_cast<std::size_t>(f) * hop;
        std::fill(re.begin(), re.end(), 0.0);
        std::fill(im.begin(), im.end(), 0.0);
        for (int i = 0; i < win; ++i) {
            const std::size_t s = start + static_cast<std::size_t>(i);
            const double x = s < waveform.size() ? static_cast<double>(waveform[s]) : 0.0;
            re[static_cast<std::size_t>(i)] = x * window[static_cast<std::size_t>(i)];
        }
        melfe::fft_radix2(re, im);
        for (int b = 0; b < n_bins; ++b)
            power[static_cast<std::size_t>(b)] = re[static_cast<std::size_t>(b)] * re[static_cast<std::size_t>(b)] +
                                                 im[static_cast<std::size_t>(b)] * im[static_cast<std::size_t>(b)];
        for (int m = 0; m < mel_bins; ++m) {
            const double lo = mel_points[static_cast<std::size_t>(m)];
            const double mid = mel_points[static_cast<std::size_t>(m) + 1];
            const double hi = mel_points[static_cast<std::size_t>(m) + 2];
            double acc = 0.0;
            for (int b = 0; b < n_bins; ++b) {
                const double hz = bin_hz(b);
                double w = 0.0;
                if (hz > lo && hz < mid)
                    w = (hz - lo) / (mid - lo);
                else if (hz >= mid && hz < hi)
                    w = (hi - hz) / (hi - mid);
                acc += w * power[static_cast<std::size_t>(b)];
            }
            mel(f, m) = std::log(acc + 1e-10);
        }
    }
    return mel;
}

// --- synthetic scene generation --------------------------------------------

struct GeneratedScene {
    Scene scene;
    /// The rendered lip aperture per speaker per frame, in [0, 1]; also the
    /// source of each speaker's audio envelope. Exposed for the sync tests.
    std::vector<std::vector<double>> lip_params;
};

namespace gendetail {

/// Markov activity pattern with stationary probability `ratio` and mean
/// active run length `mean_run` frames.
inline std::vector<std::uint8_t> activity_pattern(int frames, double ratio, double mean_run, Rng& rng) {
    const double p_leave_active = 1.0 / mean_run;
    const double p_leave_inactive = p_leave_active * ratio / (1.0 - ratio);
    std::vector<std::uint8_t> v(static_cast<std::size_t>(frames));
    bool active = rng.bernoulli(ratio);
    for (int t = 0; t < frames; ++t) {
        v[static_cast<std::size_t>(t)] = active ? 1 : 0;
        active = active ? !rng.bernoulli(p_leave_active) : rng.bernoulli(p_leave_inactive);
    }
    return v;
}

/// Smooth oscillatory latent in [0, 1]: a phase random walk at syllabic rate.
struct LatentProcess {
    double phase;
    double rate;
    double jitter;

    static LatentProcess make(Rng& rng, double fps) {
        LatentProcess p;
        p.phase = rng.uniform(0.0, 6.283185307179586);
        p.rate = 2.0 * 3.14159265358979323846 * rng.uniform(3.0, 5.0) / fps; // 3-5 Hz syllables
        p.jitter = 0.35;
        return p;
    }

    double step(Rng& rng) {
        phase += rate + jitter * rng.normal();
        return 0.5 * (1.0 + std::sin(phase));
    }
};

struct FaceGeometry {
    double cx, cy, rx, ry;
    double bob_phase, bob_rate;
};

inline FaceGeometry face_geometry(int h, int w, Rng& rng) {
    FaceGeometry g;
    g.cx = w * rng.uniform(0.45, 0.55);
    g.cy = h * rng.uniform(0.42, 0.5);
    g.rx = w * rng.uniform(0.3, 0.36);
    g.ry = h * rng.uniform(0.36, 0.42);
    g.bob_phase = rng.uniform(0.0, 6.283185307179586);
    g.bob_rate = rng.uniform(0.1, 0.3);
    return g;
}

/// Paints one grayscale face frame: background, face ellipse, eyes, and a
/// mouth ellipse whose vertical aperture follows the lip parameter.
inline void render_face(float* px, int h, int w, const FaceGeometry& g, double bob, double aperture,
                        double mouth_width, Rng& noise_rng) {
    const double cy = g.cy + bob;
    const double eye_y = cy - 0.3 * g.ry;
    const double eye_dx = 0.38 * g.rx;
    const double eye_r = 0.11 * g.rx;
    const double mouth_y = cy + 0.45 * g.ry;
    const double mouth_rx = (0.3 + 0.15 * mouth_width) * g.rx;
    const double mouth_ry = (0.04 + 0.30 * aperture) * g.ry;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double dxf = (x - g.cx) / g.rx;
            const double dyf = (y - cy) / g.ry;
            double v = 0.15;
            if (dxf * dxf + dyf * dyf <= 1.0) {
                v = 0.65;
                const double del = (x - (g.cx - eye_dx)) * (x - (g.cx - eye_dx)) + (y - eye_y) * (y - eye_y);
                const double der = (x - (g.cx + eye_dx)) * (x - (g.cx + eye_dx)) + (y - eye_y) * (y - eye_y);
                if (del <= eye_r * eye_r || der <= eye_r * eye_r) v = 0.1;
                const double mx = (x - g.cx) / mouth_rx;
                const double my = (y - mouth_y) / mouth_ry;
                if (mx * mx + my * my <= 1.0) v = 0.05;
            }
            v += 0.02 * noise_rng.normal();
            px[y * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
}

} // namespace gendetail

/// Deterministic synthetic scene: each speaker's latent drives both the lip
/// aperture (rendered) and, on active frames only, an additive harmonic audio
/// component; inactive frames keep statistically identical idle lip motion
/// that never reaches the audio, so activity is decidable only through
/// audio-visual correspondence.
inline GeneratedScene generate_scene(const GenConfig& cfg, int scene_idx) {
    cfg.validate();
    const std::uint64_t scene_seed = Rng::derive(cfg.seed, static_cast<std::uint64_t>(scene_idx));
    Rng rng(scene_seed);
    const int T = cfg.frames;
    const int n_s = cfg.n_speakers;
    const int spf = cfg.samples_per_frame();

    GeneratedScene g;
    Scene& scene = g.scene;
    {
        std::ostringstream id;
        id << "scene_" << std::setw(6) << std::setfill('0') << scene_idx;
        scene.scene_id = id.str();
    }
    scene.visual.n_speakers = n_s;
    scene.visual.frames = T;
    scene.visual.height = cfg.height;
    scene.visual.width = cfg.width;
    scene.visual.pixels.assign(static_cast<std::size_t>(n_s) * T * cfg.height * cfg.width, 0.0f);
    scene.audio.sample_rate_hz = cfg.sample_rate_hz;
    scene.audio.waveform.assign(static_cast<std::size_t>(T) * spf, 0.0f);

    std::vector<double> mix(static_cast<std::size_t>(T) * spf, 0.0);
    for (int s = 0; s < n_s; ++s) {
        Rng srng(Rng::derive(scene_seed, 100 + static_cast<std::uint64_t>(s)));
        scene.visual.track_ids.push_back("s" + std::to_string(s));

        FrameLabels labels;
        labels.frame_rate_hz = cfg.fps;
        labels.values = gendetail::activity_pattern(T, cfg.active_ratio, 12.0, srng);
        scene.labels.push_back(labels);

        auto speech = gendetail::LatentProcess::make(srng, cfg.fps);
        auto idle = gendetail::LatentProcess::make(srng, cfg.fps);
        auto width_proc = gendetail::LatentProcess::make(srng, cfg.fps);
        gendetail::FaceGeometry geom = gendetail::face_geometry(cfg.height, cfg.width, srng);
        const double base_freq = 170.0 + 70.0 * s + srng.uniform(-15.0, 15.0);

        std::vector<double>& lips = g.lip_params.emplace_back(static_cast<std::size_t>(T));
        std::vector<double> widths(static_cast<std::size_t>(T));
        for (int t = 0; t < T; ++t) {
            const double sp = speech.step(srng);
            const double idl = idle.step(srng);
            lips[static_cast<std::size_t>(t)] = labels.values[static_cast<std::size_t>(t)] ? sp : idl;
            widths[static_cast<std::size_t>(t)] = width_proc.step(srng);
        }

        // audio: harmonic stack gated by activity, envelope affine in the lip
        // aperture so frame RMS tracks the rendered parameter
        double phase = srng.uniform(0.0, 6.283185307179586);
        const double amps[3] = {1.0, 0.5, 0.25};
        for (int t = 0; t < T; ++t) {
            if (!scene.labels[static_cast<std::size_t>(s)].values[static_cast<std::size_t>(t)]) {
                phase += 2.0 * 3.14159265358979323846 * base_freq / cfg.sample_rate_hz * spf;
                continue;
            }
            const double env = 0.1 + 0.9 * lips[static_cast<std::size_t>(t)];
            const double vib = 1.0 + 0.04 * (widths[static_cast<std::size_t>(t)] - 0.5);
            const double dphase = 2.0 * 3.14159265358979323846 * base_freq * vib / cfg.sample_rate_hz;
            for (int i = 0; i < spf; ++i) {
                phase += dphase;
                double v = 0.0;
                for (int hmc = 0; hmc < 3; ++hmc) v += amps[hmc] * std::sin((hmc + 1) * phase);
                mix[static_cast<std::size_t>(t) * spf + i] += 0.22 * env * v;
            }
        }

        // visual frames
        Rng noise_rng(Rng::derive(scene_seed, 200 + static_cast<std::uint64_t>(s)));
        double bob_phase = geom.bob_phase;
        for (int t = 0; t < T; ++t) {
            bob_phase += geom.bob_rate;
            const double bob = 0.02 * cfg.height * std::sin(bob_phase);
            float* px = scene.visual.pixels.data() +
                        (static_cast<std::size_t>(s) * T + t) * cfg.height * cfg.width;
            gendetail::render_face(px, cfg.height, cfg.width, geom, bob, lips[static_cast<std::size_t>(t)],
                                   widths[static_cast<std::size_t>(t)], noise_rng);
        }
    }

    // additive noise at the configured SNR relative to the nominal speech level
    if (std::isfinite(cfg.snr_db)) {
        Rng nrng(Rng::derive(scene_seed, 999));
        const double nominal_rms = 0.2;
        const double noise_std = nominal_rms * std::pow(10.0, -cfg.snr_db / 20.0);
        for (auto& v : mix) v += noise_std * nrng.normal();
    }
    for (std::size_t i = 0; i < mix.size(); ++i)
        scene.audio.waveform[i] = static_cast<float>(std::clamp(mix[i], -1.0, 1.0));
    return g;
}

/// The split is a pure function of scene index and the configured fractions.
inline std::string split_of(const GenConfig& cfg, int scene_idx) {
    const int n_train = static_cast<int>(std::lround(cfg.train_fraction * cfg.n_scenes));
    const int n_val = static_cast<int>(std::lround(cfg.val_fraction * cfg.n_scenes));
    if (scene_idx < n_train) return "train";
    if (scene_idx < n_train + n_val) return "val";
    return "test";
}

// --- scene save/load ---------------------------------------------------------

inline SceneEntry save_scene(const Scene& scene, const std::string& corpus_dir,
                             const std::string& rel_dir) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(corpus_dir) / rel_dir;
    fs::create_directories(dir);
    SceneEntry e;
    e.scene_id = scene.scene_id;
    e.frames = scene.frames();
    e.n_speakers = scene.n_speakers();
    e.visual_path = (fs::path(rel_dir) / "visual.avsf").generic_string();
    e.audio_path = (fs::path(rel_dir) / "audio.avsf").generic_string();
    e.labels_path = (fs::path(rel_dir) / "labels.tsv").generic_string();

    avsf::save((dir / "visual.avsf").string(),
               {static_cast<std::uint32_t>(scene.visual.n_speakers),
                static_cast<std::uint32_t>(scene.visual.frames),
                static_cast<std::uint32_t>(scene.visual.height),
                static_cast<std::uint32_t>(scene.visual.width)},
               scene.visual.pixels);
    avsf::save((dir / "audio.avsf").string(),
               {static_cast<std::uint32_t>(scene.audio.waveform.size())}, scene.audio.waveform);

    std::ofstream lab((dir / "labels.tsv").string(), std::ios::binary);
    if (!lab) throw std::runtime_error("save_scene: cannot open labels file in '" + dir.string() + "'");
    lab << "frame_idx\tspeaker_id\tlabel\n";
    for (int t = 0; t < scene.frames(); ++t)
        for (int s = 0; s < scene.n_speakers(); ++s)
            lab << t << '\t' << scene.visual.track_ids[static_cast<std::size_t>(s)] << '\t'
                << static_cast<int>(scene.labels[static_cast<std::size_t>(s)].values[static_cast<std::size_t>(t)])
                << '\n';
    if (!lab) throw std::runtime_error("save_scene: label write failed in '" + dir.string() + "'");
    return e;
}

inline Scene load_scene(const Manifest& manifest, const SceneEntry& entry, const std::string& corpus_dir) {
    namespace fs = std::filesystem;
    Scene scene;
    scene.scene_id = entry.scene_id;

    avsf::Array vis = avsf::load((fs::path(corpus_dir) / entry.visual_path).string());
    if (vis.dims.size() != 4)
        throw std::runtime_error("load_scene '" + entry.scene_id + "': visual array must have rank 4");
    scene.visual.n_speakers = static_cast<int>(vis.dims[0]);
    scene.visual.frames = static_cast<int>(vis.dims[1]);
    scene.visual.height = static_cast<int>(vis.dims[2]);
    scene.visual.width = static_cast<int>(vis.dims[3]);
    scene.visual.pixels = std::move(vis.payload);
    if (scene.visual.n_speakers != entry.n_speakers || scene.visual.frames != entry.frames)
        throw std::runtime_error("load_scene '" + entry.scene_id + "': array shape disagrees with manifest");

    avsf::Array aud = avsf::load((fs::path(corpus_dir) / entry.audio_path).string());
    if (aud.dims.size() != 1)
        throw std::runtime_error("load_scene '" + entry.scene_id + "': audio array must have rank 1");
    scene.audio.waveform = std::move(aud.payload);
    scene.audio.sample_rate_hz = manifest.sample_rate_hz;

    // labels: text table keyed by (frame, speaker); speakers ordered by first appearance
    std::ifstream lab((fs::path(corpus_dir) / entry.labels_path).string(), std::ios::binary);
    if (!lab)
        throw std::runtime_error("load_scene '" + entry.scene_id + "': cannot open labels file '" +
                                 entry.labels_path + "'");
    std::map<std::string, int> speaker_index;
    std::string line;
    bool header = true;
    std::vector<FrameLabels> labels;
    while (std::getline(lab, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        std::istringstream ss(line);
        int frame_idx = 0, value = 0;
        std::string speaker;
        if (!(ss >> frame_idx >> speaker >> value))
            throw std::runtime_error("load_scene '" + entry.scene_id + "': malformed label row: " + line);
        auto [it, inserted] = speaker_index.try_emplace(speaker, static_cast<int>(scene.visual.track_ids.size()));
        if (inserted) {
            scene.visual.track_ids.push_back(speaker);
            FrameLabels fl;
            fl.frame_rate_hz = manifest.fps;
            fl.values.assign(static_cast<std::size_t>(entry.frames), 0);
            labels.push_back(std::move(fl));
        }
        if (frame_idx < 0 || frame_idx >= entry.frames)
            throw std::runtime_error("load_scene '" + entry.scene_id + "': label frame out of range");
        labels[static_cast<std::size_t>(it->second)].values[static_cast<std::size_t>(frame_idx)] =
            static_cast<std::uint8_t>(value);
    }
    scene.labels = std::move(labels);
    scene.validate();
    return scene;
}

// --- manifest ---------------------------------------------------------------

inline void save_manifest(const Manifest& m, const std::string& path) {
    nlohmann::json j;
    j["version"] = m.version;
    j["fps"] = m.fps;
    j["sample_rate_hz"] = m.sample_rate_hz;
    j["height"] = m.height;
    j["width"] = m.width;
    j["seed"] = m.seed;
    j["active_ratio"] = m.active_ratio;
    j["scenes"] = nlohmann::json::array();
    for (const auto& e : m.scenes)
        j["scenes"].push_back({{"scene_id", e.scene_id},
                               {"visual", e.visual_path},
                               {"audio", e.audio_path},
                               {"labels", e.labels_path},
                               {"frames", e.frames},
                               {"n_speakers", e.n_speakers},
                               {"split", e.split}});
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_manifest: cannot open '" + path + "'");
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("save_manifest: write failed for '" + path + "'");
}

inline Manifest load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_manifest: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_manifest: '" + path + "' is not valid JSON: " + e.what());
    }
    Manifest m;
    m.version = j.at("version").get<int>();
    if (m.version != 1)
        throw std::runtime_error("load_manifest: unsupported manifest version " + std::to_string(m.version));
    m.fps = j.at("fps").get<double>();
    m.sample_rate_hz = j.at("sample_rate_hz").get<int>();
    m.height = j.at("height").get<int>();
    m.width = j.at("width").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.active_ratio = j.at("active_ratio").get<double>();
    for (const auto& je : j.at("scenes")) {
        SceneEntry e;
        e.scene_id = je.at("scene_id").get<std::string>();
        e.visual_path = je.at("visual").get<std::string>();
        e.audio_path = je.at("audio").get<std::string>();
        e.labels_path = je.at("labels").get<std::string>();
        e.frames = je.at("frames").get<int>();
        e.n_speakers = je.at("n_speakers").get<int>();
        e.split = je.at("split").get<std::string>();
        m.scenes.push_back(std::move(e));
    }
    return m;
}

/// Generates and writes the whole corpus; returns the manifest (also written
/// to <out_dir>/manifest.json).
inline Manifest generate_corpus(const GenConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    Manifest m;
    m.fps = cfg.fps;
    m.sample_rate_hz = cfg.sample_rate_hz;
    m.height = cfg.height;
    m.width = cfg.width;
    m.seed = cfg.seed;
    m.active_ratio = cfg.active_ratio;
    for (int i = 0; i < cfg.n_scenes; ++i) {
        GeneratedScene g = generate_scene(cfg, i);
        SceneEntry e = save_scene(g.scene, out_dir, "scenes/" + g.scene.scene_id);
        e.split = split_of(cfg, i);
        m.scenes.push_back(std::move(e));
    }
    save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
    return m;
}

} // namespace asdlab
