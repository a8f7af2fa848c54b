#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "asdlab/core.hpp"
#include "asdlab/mat.hpp"
#include "asdlab/objective.hpp"
#include "asdlab/talknce.hpp"

namespace asdlab {

/// Reverse-mode tape over Mat values. One tape per forward pass; backward()
/// sweeps nodes in reverse creation order. Single-threaded and fully
/// deterministic.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = delete;
    Tape& operator=(Tape&&) = delete;

    struct Val {
        int idx = -1;
        bool ok() const { return idx >= 0; }
    };

    const Mat& value(Val v) const { return nodes_[check(v)].val; }
    const Mat& grad(Val v) const { return nodes_[check(v)].grad; }

    Val leaf(Mat m) { return push(std::move(m), nullptr); }

    Val matmul(Val a, Val b) {
        Mat out;
        matmul_nn(value(a), value(b), out);
        return push(std::move(out), [this, a, b](const Mat& g) {
            matmul_nt(g, value(b), nodes_[a.idx].grad, true); // dA += g B^T
            matmul_tn(value(a), g, nodes_[b.idx].grad, true); // dB += A^T g
        });
    }

    Val add(Val a, Val b) {
        const Mat& x = value(a);
        const Mat& y = value(b);
        if (!x.same_shape(y)) throw std::invalid_argument("Tape::add: shape mismatch");
        Mat out = x;
        for (std::size_t i = 0; i < out.size(); ++i) out.d[i] += y.d[i];
        return push(std::move(out), [this, a, b](const Mat& g) {
            accumulate(a, g);
            accumulate(b, g);
        });
    }

    /// a + row-broadcast bias (bias is 1 x C).
    Val add_row(Val a, Val bias) {
        const Mat& x = value(a);
        const Mat& b = value(bias);
        if (b.rows != 1 || b.cols != x.cols) throw std::invalid_argument("Tape::add_row: bias must be 1xC");
        Mat out = x;
        for (int i = 0; i < out.rows; ++i) {
            double* r = out.row(i);
            for (int j = 0; j < out.cols; ++j) r[j] += b.d[static_cast<std::size_t>(j)];
        }
        return push(std::move(out), [this, a, bias](const Mat& g) {
            accumulate(a, g);
            Mat& db = nodes_[bias.idx].grad;
            for (int i = 0; i < g.rows; ++i) {
                const double* r = g.row(i);
                for (int j = 0; j < g.cols; ++j) db.d[static_cast<std::size_t>(j)] += r[j];
            }
        });
    }

    Val hadamard(Val a, Val b) {
        const Mat& x = value(a);
        const Mat& y = value(b);
        if (!x.same_shape(y)) throw std::invalid_argument("Tape::hadamard: shape mismatch");
        Mat out = x;
        for (std::size_t i = 0; i < out.size(); ++i) out.d[i] *= y.d[i];
        return push(std::move(out), [this, a, b](const Mat& g) {
            Mat& da = nodes_[a.idx].grad;
            Mat& db = nodes_[b.idx].grad;
            const Mat& x2 = value(a);
            const Mat& y2 = value(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                da.d[i] += g.d[i] * y2.d[i];
                db.d[i] += g.d[i] * x2.d[i];
            }
        });
    }

    Val scale(Val a, double c) {
        Mat out = value(a);
        for (auto& x : out.d) x *= c;
        return push(std::move(out), [this, a, c](const Mat& g) {
            Mat& da = nodes_[a.idx].grad;
            for (std::size_t i = 0; i < g.size(); ++i) da.d[i] += c * g.d[i];
        });
    }

    /// out = mul * a + shift, elementwise.
    Val affine(Val a, double mul, double shift) {
        Mat out = value(a);
        for (auto& x : out.d) x = mul * x + shift;
        return push(std::move(out), [this, a, mul](const Mat& g) {
            Mat& da = nodes_[a.idx].grad;
            for (std::size_t i = 0; i < g.size(); ++i) da.d[i] += mul * g.d[i];
        });
    }

    /// Pure reinterpretation of the row-major buffer under a new shape.
    Val reshape(Val a, int rows, int cols) {
        const Mat& x = value(a);
        if (static_cast<std::size_t>(rows) * cols != x.size())
            throw std::invalid_argument("Tape::reshape: element count mismatch");
        Mat out(rows, cols);
        out.d = x.d;
        return push(std::move(out), [this, a](const Mat& g) {
            Mat& da = nodes_[a.idx].grad;
            for (std::size_t i = 0; i < g.size(); ++i) da.d[i] += g.d[i];
        });
    }

    Val sigmoid(Val a) {
        Mat out = value(a);
        for (auto& x : out.d) x = 1.0 / (1.0 + std::exp(-x));
        return unary_with_saved(a, std::move(out), [](double y, double g) { return g * y * (1.0 - y); });
    }

    Val tanh_act(Val a) {
        Mat out = value(a);
        for (auto& x : out.d) x = std::tanh(x);
        return unary_with_saved(a, std::move(out), [](double y, double g) { return g * (1.0 - y * y); });
    }

    Val relu(Val a) {
        Mat out = value(a);
        for (auto& x : out.d) x = x > 0.0 ? x : 0.0;
        return unary_with_saved(a, std::move(out), [](double y, double g) { return y > 0.0 ? g : 0.0; });
    }

    /// Row-wise softmax with max subtraction.
    Val softmax_rows(Val a) {
        Mat out = value(a);
        for (int i = 0; i < out.rows; ++i) {
            double* r = out.row(i);
            double m = r[0];
            for (int j = 1; j < out.cols; ++j) m = std::max(m, r[j]);
            double z = 0.0;
            for (int j = 0; j < out.cols; ++j) {
                r[j] = std::exp(r[j] - m);
                z += r[j];
            }
            const double inv = 1.0 / z;
            for (int j = 0; j < out.cols; ++j) r[j] *= inv;
        }
        const int self = next_index();
        return push(std::move(out), [this, a, self](const Mat& g) {
            const Mat& y = nodes_[self].val;
            Mat& da = nodes_[a.idx].grad;
            for (int i = 0; i < y.rows; ++i) {
                const double* yr = y.row(i);
                const double* gr = g.row(i);
                double dot = 0.0;
                for (int j = 0; j < y.cols; ++j) dot += gr[j] * yr[j];
                double* dr = da.row(i);
                for (int j = 0; j < y.cols; ++j) dr[j] += yr[j] * (gr[j] - dot);
            }
        });
    }

    Val transpose_val(Val a) {
        Mat out = transpose(value(a));
        return push(std::move(out), [this, a](const Mat& g) {
            Mat& da = nodes_[a.idx].grad;
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) da(j, i) += g(i, j);
        });
    }

    Val concat_cols(Val a, Val b) {
        const Mat& x = value(a);
        const Mat& y = value(b);
        if (x.rows != y.rows) throw std::invalid_argument("Tape::concat_cols: row mismatch");
        Mat out(x.rows, x.cols + y.cols);
        for (int i = 0; i < x.rows; ++i) {
            double* r = out.row(i);
            const double* xr = x.row(i);
            const double* yr = y.row(i);
            for (int j = 0; j < x.cols; ++j) r[j] = xr[j];
            for (int j = 0; j < y.cols; ++j) r[x.cols + j] = yr[j];
        }
        const int ac = x.cols;
        return push(std::move(out), [this, a, b, ac](const Mat& g) {
            Mat& da = nodes_[a.idx].grad;
            Mat& db = nodes_[b.idx].grad;
            for (int i = 0; i < g.rows; ++i) {
                const double* gr = g.row(i);
                double* dar = da.row(i);
                double* dbr = db.row(i);
                for (int j = 0; j < da.cols; ++j) dar[j] += gr[j];
                for (int j = 0; j < db.cols; ++j) dbr[j] += gr[ac + j];
            }
        });
    }

    Val slice_cols(Val a, int c0, int c1) {
        const Mat& x = value(a);
        if (c0 < 0 || c1 > x.cols || c0 >= c1) throw std::invalid_argument("Tape::slice_cols: bad range");
        Mat out(x.rows, c1 - c0);
        for (int i = 0; i < x.rows; ++i) {
            const double* xr = x.row(i);
            double* r = out.row(i);
            for (int j = c0; j < c1; ++j) r[j - c0] = xr[j];
        }
        return push(std::move(out), [this, a, c0](const Mat& g) {
            Mat& da = nodes_[a.idx].grad;
            for (int i = 0; i < g.rows; ++i) {
                const double* gr = g.row(i);
                double* dar = da.row(i);
                for (int j = 0; j < g.cols; ++j) dar[c0 + j] += gr[j];
            }
        });
    }

    Val slice_rows(Val a, int r0, int r1) {
        const Mat& x = value(a);
        if (r0 < 0 || r1 > x.rows || r0 >= r1) throw std::invalid_argument("Tape::slice_rows: bad range");
        Mat out(r1 - r0, x.cols);
        for (int i = r0; i < r1; ++i)
            for (int j = 0; j < x.cols; ++j) out(i - r0, j) = x(i, j);
        return push(std::move(out), [this, a, r0](const Mat& g) {
            Mat& da = nodes_[a.idx].grad;
            for (int i = 0; i < g.rows; ++i) {
                const double* gr = g.row(i);
                double* dar = da.row(r0 + i);
                for (int j = 0; j < g.cols; ++j) dar[j] += gr[j];
            }
        });
    }

    Val reverse_rows(Val a) {
        const Mat& x = value(a);
        Mat out(x.rows, x.cols);
        for (int i = 0; i < x.rows; ++i)
            for (int j = 0; j < x.cols; ++j) out(i, j) = x(x.rows - 1 - i, j);
        return push(std::move(out), [this, a](const Mat& g) {
            Mat& da = nodes_[a.idx].grad;
            for (int i = 0; i < g.rows; ++i) {
                const double* gr = g.row(i);
                double* dar = da.row(g.rows - 1 - i);
                for (int j = 0; j < g.cols; ++j) dar[j] += gr[j];
            }
        });
    }

    Val concat_rows(const std::vector<Val>& parts) {
        if (parts.empty()) throw std::invalid_argument("Tape::concat_rows: empty");
        int rows = 0;
        const int cols = value(parts[0]).cols;
        for (Val p : parts) {
            if (value(p).cols != cols) throw std::invalid_argument("Tape::concat_rows: col mismatch");
            rows += value(p).rows;
        }
        Mat out(rows, cols);
        int r = 0;
        for (Val p : parts) {
            const Mat& x = value(p);
            for (int i = 0; i < x.rows; ++i, ++r)
                for (int j = 0; j < cols; ++j) out(r, j) = x(i, j);
        }
        auto parts_copy = parts;
        return push(std::move(out), [this, parts_copy](const Mat& g) {
            int r = 0;
            for (Val p : parts_copy) {
                Mat& dp = nodes_[p.idx].grad;
                for (int i = 0; i < dp.rows; ++i, ++r) {
                    const double* gr = g.row(r);
                    double* dr = dp.row(i);
                    for (int j = 0; j < g.cols; ++j) dr[j] += gr[j];
                }
            }
        });
    }

    /// Mean over groups of `group` consecutive rows: (n*group) x C -> n x C.
    Val row_group_mean(Val a, int group) {
        const Mat& x = value(a);
        if (group <= 0 || x.rows % group != 0)
            throw std::invalid_argument("Tape::row_group_mean: rows not divisible by group");
        Mat out(x.rows / group, x.cols);
        const double inv = 1.0 / group;
        for (int i = 0; i < out.rows; ++i) {
            double* r = out.row(i);
            for (int k = 0; k < group; ++k) {
                const double* xr = x.row(i * group + k);
                for (int j = 0; j < x.cols; ++j) r[j] += xr[j];
            }
            for (int j = 0; j < x.cols; ++j) r[j] *= inv;
        }
        return push(std::move(out), [this, a, group, inv](const Mat& g) {
            Mat& da = nodes_[a.idx].grad;
            for (int i = 0; i < g.rows; ++i) {
                const double* gr = g.row(i);
                for (int k = 0; k < group; ++k) {
                    double* dr = da.row(i * group + k);
                    for (int j = 0; j < g.cols; ++j) dr[j] += gr[j] * inv;
                }
            }
        });
    }

    // --- im2col for strided convolutions ---

    struct Conv2dSpec {
        int frames;      // batch of per-frame feature maps
        int in_h, in_w, in_ch;
        int kernel, stride, pad;
        int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
        int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
    };

    /// Input: frames x (H*W*Cin), channel-last. Output: (frames*OH*OW) x (K*K*Cin).
    Val im2col2d(Val a, const Conv2dSpec& sp) {
        const Mat& x = value(a);
        if (x.rows != sp.frames || x.cols != sp.in_h * sp.in_w * sp.in_ch)
            throw std::invalid_argument("Tape::im2col2d: input shape mismatch");
        const int oh = sp.out_h(), ow = sp.out_w();
        Mat out(sp.frames * oh * ow, sp.kernel * sp.kernel * sp.in_ch);
        for (int t = 0; t < sp.frames; ++t) {
            const double* frame = x.row(t);
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    double* dst = out.row((t * oh + oy) * ow + ox);
                    for (int ky = 0; ky < sp.kernel; ++ky) {
                        const int sy = oy * sp.stride + ky - sp.pad;
                        for (int kx = 0; kx < sp.kernel; ++kx) {
                            const int sx = ox * sp.stride + kx - sp.pad;
                            double* cell = dst + (ky * sp.kernel + kx) * sp.in_ch;
                            if (sy >= 0 && sy < sp.in_h && sx >= 0 && sx < sp.in_w) {
                                const double* src = frame + (sy * sp.in_w + sx) * sp.in_ch;
                                for (int c = 0; c < sp.in_ch; ++c) cell[c] = src[c];
                            }
                        }
                    }
                }
            }
        }
        return push(std::move(out), [this, a, sp](const Mat& g) {
            Mat& da = nodes_[a.idx].grad;
            const int oh = sp.out_h(), ow = sp.out_w();
            for (int t = 0; t < sp.frames; ++t) {
                double* frame = da.row(t);
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const double* src = g.row((t * oh + oy) * ow + ox);
                        for (int ky = 0; ky < sp.kernel; ++ky) {
                            const int sy = oy * sp.stride + ky - sp.pad;
                            if (sy < 0 || sy >= sp.in_h) continue;
                            for (int kx = 0; kx < sp.kernel; ++kx) {
                                const int sx = ox * sp.stride + kx - sp.pad;
                                if (sx < 0 || sx >= sp.in_w) continue;
                                const double* cell = src + (ky * sp.kernel + kx) * sp.in_ch;
                                double* dst = frame + (sy * sp.in_w + sx) * sp.in_ch;
                                for (int c = 0; c < sp.in_ch; ++c) dst[c] += cell[c];
                            }
                        }
                    }
                }
            }
        });
    }

    struct Conv1dSpec {
        int length, in_ch;
        int kernel, stride, pad;
        int out_len() const { return (length + 2 * pad - kernel) / stride + 1; }
    };

    /// Input: L x C (time-major). Output: L_out x (K*C).
    Val im2col1d(Val a, const Conv1dSpec& sp) {
        const Mat& x = value(a);
        if (x.rows != sp.length || x.cols != sp.in_ch)
            throw std::invalid_argument("Tape::im2col1d: input shape mismatch");
        const int lo = sp.out_len();
        Mat out(lo, sp.kernel * sp.in_ch);
        for (int o = 0; o < lo; ++o) {
            double* dst = out.row(o);
            for (int k = 0; k < sp.kernel; ++k) {
                const int si = o * sp.stride + k - sp.pad;
                if (si < 0 || si >= sp.length) continue;
                const double* src = x.row(si);
                for (int c = 0; c < sp.in_ch; ++c) dst[k * sp.in_ch + c] = src[c];
            }
        }
        return push(std::move(out), [this, a, sp](const Mat& g) {
            Mat& da = nodes_[a.idx].grad;
            const int lo = sp.out_len();
            for (int o = 0; o < lo; ++o) {
                const double* src = g.row(o);
                for (int k = 0; k < sp.kernel; ++k) {
                    const int si = o * sp.stride + k - sp.pad;
                    if (si < 0 || si >= sp.length) continue;
                    double* dst = da.row(si);
                    for (int c = 0; c < sp.in_ch; ++c) dst[c] += src[k * sp.in_ch + c];
                }
            }
        });
    }

    /// Mean binary cross-entropy of a T x 1 probability column against labels,
    /// clamped to [kBceEps, 1 - kBceEps]. Gradient is zero where clamped.
    Val bce_mean(Val p, const FrameLabels& labels) {
        const Mat& x = value(p);
        if (x.cols != 1 || x.rows != labels.frames())
            throw std::invalid_argument("Tape::bce_mean: need T x 1 probabilities matching labels");
        std::vector<double> col(x.d.begin(), x.d.end());
        Mat out(1, 1);
        out(0, 0) = frame_bce(col, labels);
        auto y = labels.values;
        return push(std::move(out), [this, p, y](const Mat& g) {
            const Mat& px = value(p);
            Mat& dp = nodes_[p.idx].grad;
            const double w = g(0, 0) / static_cast<double>(px.rows);
            for (int t = 0; t < px.rows; ++t) {
                const double v = px(t, 0);
                if (v < kBceEps || v > 1.0 - kBceEps) continue;
                dp(t, 0) += w * (y[static_cast<std::size_t>(t)] ? -1.0 / v : 1.0 / (1.0 - v));
            }
        });
    }

    /// TalkNCE as a single node: forward via talknce_loss, backward via the
    /// analytic talknce_grad.
    Val talknce(Val e_v, Val e_a, const FrameLabels& labels, const TalkNCEConfig& cfg) {
        EmbeddingSequence sv{value(e_v), Modality::visual, ""};
        EmbeddingSequence sa{value(e_a), Modality::audio, ""};
        Mat out(1, 1);
        out(0, 0) = talknce_loss(sv, sa, labels, cfg).loss;
        return push(std::move(out), [this, e_v, e_a, labels, cfg](const Mat& g) {
            EmbeddingSequence sv2{value(e_v), Modality::visual, ""};
            EmbeddingSequence sa2{value(e_a), Modality::audio, ""};
            TalkNCEGrad tg = talknce_grad(sv2, sa2, labels, cfg);
            Mat& dv = nodes_[e_v.idx].grad;
            Mat& da = nodes_[e_a.idx].grad;
            const double s = g(0, 0);
            for (std::size_t i = 0; i < dv.size(); ++i) dv.d[i] += s * tg.d_visual.d[i];
            for (std::size_t i = 0; i < da.size(); ++i) da.d[i] += s * tg.d_audio.d[i];
        });
    }

    /// Weighted sum of 1x1 scalars, accumulated left to right.
    Val weighted_sum(const std::vector<std::pair<double, Val>>& terms) {
        if (terms.empty()) throw std::invalid_argument("Tape::weighted_sum: empty");
        Mat out(1, 1);
        for (const auto& [w, v] : terms) {
            const Mat& x = value(v);
            if (x.rows != 1 || x.cols != 1) throw std::invalid_argument("Tape::weighted_sum: need 1x1 terms");
            out(0, 0) += w * x(0, 0);
        }
        auto terms_copy = terms;
        return push(std::move(out), [this, terms_copy](const Mat& g) {
            for (const auto& [w, v] : terms_copy) nodes_[v.idx].grad(0, 0) += w * g(0, 0);
        });
    }

    Val constant_scalar(double v) {
        Mat m(1, 1);
        m(0, 0) = v;
        return leaf(std::move(m));
    }

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
    void backward(Val loss) {
        const Mat& l = value(loss);
        if (l.rows != 1 || l.cols != 1) throw std::invalid_argument("Tape::backward: loss must be 1x1");
        for (auto& n : nodes_) n.grad = Mat(n.val.rows, n.val.cols);
        nodes_[check(loss)].grad(0, 0) = 1.0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i)
            if (nodes_[static_cast<std::size_t>(i)].back)
                nodes_[static_cast<std::size_t>(i)].back(nodes_[static_cast<std::size_t>(i)].grad);
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Mat val;
        Mat grad;
        std::function<void(const Mat&)> back;
    };

    int next_index() const { return static_cast<int>(nodes_.size()); }

    Val push(Mat val, std::function<void(const Mat&)> back) {
        Node n;
        n.val = std::move(val);
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return {static_cast<int>(nodes_.size()) - 1};
    }

    template <typename F>
    Val unary_with_saved(Val a, Mat out, F dfn) {
        const int self = next_index();
        return push(std::move(out), [this, a, self, dfn](const Mat& g) {
            const Mat& y = nodes_[self].val;
            Mat& da = nodes_[a.idx].grad;
            for (std::size_t i = 0; i < g.size(); ++i) da.d[i] += dfn(y.d[i], g.d[i]);
        });
    }

    int check(Val v) const {
        if (v.idx < 0 || v.idx >= static_cast<int>(nodes_.size()))
            throw std::out_of_range("Tape: invalid value handle");
        return v.idx;
    }

    void accumulate(Val v, const Mat& g) {
        Mat& d = nodes_[v.idx].grad;
        for (std::size_t i = 0; i < g.size(); ++i) d.d[i] += g.d[i];
    }

    std::vector<Node> nodes_;
};

} // namespace asdlab
