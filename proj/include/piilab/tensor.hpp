#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "piilab/common.hpp"
#include "piilab/rng.hpp"

namespace piilab {

// ---------------------------------------------------------------------------
// Tensor: dense row-major array of doubles with an optional gradient buffer.
// Shapes are explicit; no broadcasting beyond the row-wise helpers below.
// ---------------------------------------------------------------------------
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty means "no gradient slot"

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw ShapeError("non-positive dimension " + std::to_string(d));
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor from(std::vector<int> s, std::vector<double> values) {
        Tensor t(std::move(s));
        if (static_cast<int64_t>(values.size()) != t.numel())
            throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape numel " +
                             std::to_string(t.numel()));
        t.data = std::move(values);
        return t;
    }

    static Tensor randn(std::vector<int> s, Rng& rng, double stdev) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.normal() * stdev;
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }
};

// ---------------------------------------------------------------------------
// Raw kernels. Shared by the autograd ops and the no-grad inference path so
// both produce bit-identical values.
// ---------------------------------------------------------------------------
namespace kern {

// C[m x n] (+)= op(A) * op(B). trans_a/trans_b select A^T / B^T reads.
inline void gemm(int m, int n, int k, const double* a, const double* b, double* c, bool trans_a, bool trans_b,
                 bool accumulate) {
    if (!accumulate) std::fill(c, c + static_cast<size_t>(m) * n, 0.0);
    if (!trans_a && !trans_b) {
        for (int i = 0; i < m; ++i) {
            const double* arow = a + static_cast<size_t>(i) * k;
            double* crow = c + static_cast<size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                const double av = arow[p];
                if (av == 0.0) continue;  // exploits sparse activations (TopK latents)
                const double* brow = b + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // B is [n x k]; dot products of contiguous rows. Four output columns
        // run interleaved to hide FMA latency; each keeps its own sequential
        // accumulation chain, so results are independent of the unroll.
        for (int i = 0; i < m; ++i) {
            const double* arow = a + static_cast<size_t>(i) * k;
            double* crow = c + static_cast<size_t>(i) * n;
            int j = 0;
            for (; j + 4 <= n; j += 4) {
                const double* b0 = b + static_cast<size_t>(j) * k;
                const double* b1 = b + static_cast<size_t>(j + 1) * k;
                const double* b2 = b + static_cast<size_t>(j + 2) * k;
                const double* b3 = b + static_cast<size_t>(j + 3) * k;
                double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                for (int p = 0; p < k; ++p) {
                    const double av = arow[p];
                    a0 += av * b0[p];
                    a1 += av * b1[p];
                    a2 += av * b2[p];
                    a3 += av * b3[p];
                }
                crow[j] += a0;
                crow[j + 1] += a1;
                crow[j + 2] += a2;
                crow[j + 3] += a3;
            }
            for (; j < n; ++j) {
                const double* brow = b + static_cast<size_t>(j) * k;
                double acc = 0.0;
                for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] += acc;
            }
        }
    } else if (trans_a && !trans_b) {
        // A is [k x m].
        for (int p = 0; p < k; ++p) {
            const double* arow = a + static_cast<size_t>(p) * m;
            const double* brow = b + static_cast<size_t>(p) * n;
            for (int i = 0; i < m; ++i) {
                const double av = arow[i];
                if (av == 0.0) continue;
                double* crow = c + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int p = 0; p < k; ++p)
                    acc += a[static_cast<size_t>(p) * m + i] * b[static_cast<size_t>(j) * k + p];
                c[static_cast<size_t>(i) * n + j] += acc;
            }
    }
}

constexpr double kLnEps = 1e-5;

inline void layernorm_row(const double* x, int d, const double* gain, const double* bias, double* y, double* mu_out,
                          double* rstd_out) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
        const double c = x[j] - mu;
        var += c * c;
    }
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    for (int j = 0; j < d; ++j) y[j] = (x[j] - mu) * rstd * gain[j] + bias[j];
    if (mu_out) *mu_out = mu;
    if (rstd_out) *rstd_out = rstd;
}

inline double gelu_one(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad_one(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

// Softmax over the causal prefix of each row: row i attends to columns [0, i].
inline void causal_softmax_rows(const double* s, int t, double* p) {
    for (int i = 0; i < t; ++i) {
        const double* srow = s + static_cast<size_t>(i) * t;
        double* prow = p + static_cast<size_t>(i) * t;
        double mx = srow[0];
        for (int j = 1; j <= i; ++j) mx = std::max(mx, srow[j]);
        double z = 0.0;
        for (int j = 0; j <= i; ++j) {
            prow[j] = std::exp(srow[j] - mx);
            z += prow[j];
        }
        const double inv = 1.0 / z;
        for (int j = 0; j <= i; ++j) prow[j] *= inv;
        for (int j = i + 1; j < t; ++j) prow[j] = 0.0;
    }
}

// Indices of the k largest entries by value; ties broken by lowest index.
// Nonzero entries outrank exact zeros, which makes masking idempotent even
// when negative values survive. `eligible`, when given, restricts candidates.
inline void topk_select(const double* x, int h, int k, const uint8_t* eligible, std::vector<int>& out) {
    out.clear();
    for (int i = 0; i < h; ++i)
        if (!eligible || eligible[i]) out.push_back(i);
    const int kk = std::min<int>(k, static_cast<int>(out.size()));
    std::partial_sort(out.begin(), out.begin() + kk, out.end(), [&](int i, int j) {
        const bool nzi = x[i] != 0.0, nzj = x[j] != 0.0;
        if (nzi != nzj) return nzi;
        if (x[i] != x[j]) return x[i] > x[j];
        return i < j;
    });
    out.resize(kk);
}

}  // namespace kern

// ---------------------------------------------------------------------------
// Reverse-mode autograd tape. Ops append nodes in topological order; backward
// walks the tape in reverse. Leaf nodes may be bound to external parameter
// tensors, whose grad slots receive the accumulated gradients.
// ---------------------------------------------------------------------------
struct Var {
    int id = -1;
};

class Tape {
public:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        std::function<void(Tape&, int)> backward;  // (tape, own id); empty for leaves
        Tensor* bound = nullptr;
    };

    std::vector<Node> nodes;

    const Tensor& val(Var v) const { return nodes[v.id].value; }
    std::vector<double>& grad_of(int id) { return nodes[id].grad; }

    // Leaf bound to an external parameter tensor; the value is snapshotted.
    Var param(Tensor& t) {
        Node n;
        n.value = t;
        n.bound = &t;
        nodes.push_back(std::move(n));
        return {static_cast<int>(nodes.size()) - 1};
    }

    // Unbound input; no gradient is reported for it.
    Var constant(Tensor t) {
        Node n;
        n.value = std::move(t);
        nodes.push_back(std::move(n));
        return {static_cast<int>(nodes.size()) - 1};
    }

    Var make(Tensor value, std::function<void(Tape&, int)> bw) {
        Node n;
        n.value = std::move(value);
        n.backward = std::move(bw);
        nodes.push_back(std::move(n));
        return {static_cast<int>(nodes.size()) - 1};
    }

    // Populates grad slots of all participating bound leaves with d(loss)/d(leaf).
    void backward(Var loss) {
        if (nodes[loss.id].value.numel() != 1)
            throw ShapeError("backward requires a scalar loss, got shape " + nodes[loss.id].value.shape_str());
        for (auto& n : nodes) n.grad.assign(n.value.data.size(), 0.0);
        nodes[loss.id].grad[0] = 1.0;
        for (int i = loss.id; i >= 0; --i) {
            if (nodes[i].backward) nodes[i].backward(*this, i);
        }
        for (auto& n : nodes) {
            if (!n.bound) continue;
            n.bound->ensure_grad();
            for (size_t j = 0; j < n.grad.size(); ++j) n.bound->grad[j] += n.grad[j];
        }
    }
};

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": mismatched shapes " + a.shape_str() + " vs " + b.shape_str());
}
}  // namespace detail

// --------------------------- elementwise ops ------------------------------

inline Var add(Tape& t, Var a, Var b) {
    detail::check_same_shape(t.val(a), t.val(b), "add");
    Tensor out = t.val(a);
    const auto& bd = t.val(b).data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bd[i];
    const int ai = a.id, bi = b.id;
    return t.make(std::move(out), [ai, bi](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        auto& ga = tp.grad_of(ai);
        auto& gb = tp.grad_of(bi);
        for (size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
}

inline Var sub(Tape& t, Var a, Var b) {
    detail::check_same_shape(t.val(a), t.val(b), "sub");
    Tensor out = t.val(a);
    const auto& bd = t.val(b).data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bd[i];
    const int ai = a.id, bi = b.id;
    return t.make(std::move(out), [ai, bi](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        auto& ga = tp.grad_of(ai);
        auto& gb = tp.grad_of(bi);
        for (size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] -= g[i];
        }
    });
}

inline Var mul(Tape& t, Var a, Var b) {
    detail::check_same_shape(t.val(a), t.val(b), "mul");
    Tensor out = t.val(a);
    const auto& bd = t.val(b).data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bd[i];
    const int ai = a.id, bi = b.id;
    return t.make(std::move(out), [ai, bi](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        const auto& av = tp.nodes[ai].value.data;
        const auto& bv = tp.nodes[bi].value.data;
        auto& ga = tp.grad_of(ai);
        auto& gb = tp.grad_of(bi);
        for (size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * bv[i];
            gb[i] += g[i] * av[i];
        }
    });
}

inline Var scale(Tape& t, Var a, double c) {
    Tensor out = t.val(a);
    for (auto& v : out.data) v *= c;
    const int ai = a.id;
    return t.make(std::move(out), [ai, c](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        auto& ga = tp.grad_of(ai);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
}

inline Var add_scalar(Tape& t, Var a, double c) {
    Tensor out = t.val(a);
    for (auto& v : out.data) v += c;
    const int ai = a.id;
    return t.make(std::move(out), [ai](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        auto& ga = tp.grad_of(ai);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

inline Var gelu(Tape& t, Var a) {
    Tensor out = t.val(a);
    for (auto& v : out.data) v = kern::gelu_one(v);
    const int ai = a.id;
    return t.make(std::move(out), [ai](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        const auto& av = tp.nodes[ai].value.data;
        auto& ga = tp.grad_of(ai);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * kern::gelu_grad_one(av[i]);
    });
}

inline Var sigmoid(Tape& t, Var a) {
    Tensor out = t.val(a);
    for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    const int ai = a.id;
    return t.make(std::move(out), [ai](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        const auto& yv = tp.nodes[self].value.data;
        auto& ga = tp.grad_of(ai);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
    });
}

// ------------------------------ matmul ------------------------------------

inline Var matmul(Tape& t, Var a, Var b) {
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    if (av.shape.size() != 2 || bv.shape.size() != 2 || av.cols() != bv.rows())
        throw ShapeError("matmul: incompatible shapes " + av.shape_str() + " x " + bv.shape_str());
    const int m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out({m, n});
    kern::gemm(m, n, k, av.data.data(), bv.data.data(), out.data.data(), false, false, false);
    const int ai = a.id, bi = b.id;
    return t.make(std::move(out), [ai, bi, m, n, k](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        const auto& avd = tp.nodes[ai].value.data;
        const auto& bvd = tp.nodes[bi].value.data;
        // dA += dC * B^T ; dB += A^T * dC
        kern::gemm(m, k, n, g.data(), bvd.data(), tp.grad_of(ai).data(), false, true, true);
        kern::gemm(k, n, m, avd.data(), g.data(), tp.grad_of(bi).data(), true, false, true);
    });
}

// C = A * B^T without materializing the transpose. Shares the NT kernel with
// the inference path, so values agree bit-exactly under FP contraction.
inline Var matmul_nt(Tape& t, Var a, Var b) {
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    if (av.shape.size() != 2 || bv.shape.size() != 2 || av.cols() != bv.cols())
        throw ShapeError("matmul_nt: incompatible shapes " + av.shape_str() + " x " + bv.shape_str() + "^T");
    const int m = av.rows(), k = av.cols(), n = bv.rows();
    Tensor out({m, n});
    kern::gemm(m, n, k, av.data.data(), bv.data.data(), out.data.data(), false, true, false);
    const int ai = a.id, bi = b.id;
    return t.make(std::move(out), [ai, bi, m, n, k](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        const auto& avd = tp.nodes[ai].value.data;
        const auto& bvd = tp.nodes[bi].value.data;
        // C = A B^T: dA += dC * B ; dB += dC^T * A
        kern::gemm(m, k, n, g.data(), bvd.data(), tp.grad_of(ai).data(), false, false, true);
        kern::gemm(n, k, m, g.data(), avd.data(), tp.grad_of(bi).data(), true, false, true);
    });
}

inline Var transpose(Tape& t, Var a) {
    const Tensor& av = t.val(a);
    if (av.shape.size() != 2) throw ShapeError("transpose: need 2-d tensor, got " + av.shape_str());
    const int m = av.rows(), n = av.cols();
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
    const int ai = a.id;
    return t.make(std::move(out), [ai, m, n](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        auto& ga = tp.grad_of(ai);
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i) ga[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
    });
}

// ----------------------- row-broadcast helpers ----------------------------

inline Var add_row(Tape& t, Var mat, Var rowvec) {
    const Tensor& mv = t.val(mat);
    const Tensor& rv = t.val(rowvec);
    if (static_cast<int64_t>(mv.cols()) != rv.numel())
        throw ShapeError("add_row: row width " + std::to_string(mv.cols()) + " vs vector length " +
                         std::to_string(rv.numel()));
    Tensor out = mv;
    const int m = mv.rows(), n = mv.cols();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) += rv.data[j];
    const int ai = mat.id, bi = rowvec.id;
    return t.make(std::move(out), [ai, bi, m, n](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        auto& ga = tp.grad_of(ai);
        auto& gb = tp.grad_of(bi);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                const double gv = g[static_cast<size_t>(i) * n + j];
                ga[static_cast<size_t>(i) * n + j] += gv;
                gb[j] += gv;
            }
    });
}

inline Var sub_row(Tape& t, Var mat, Var rowvec) {
    Var neg = scale(t, rowvec, -1.0);
    return add_row(t, mat, neg);
}

// ------------------------------- reshapes ---------------------------------

inline Var slice_cols(Tape& t, Var a, int c0, int c1) {
    const Tensor& av = t.val(a);
    const int m = av.rows(), n = av.cols();
    if (c0 < 0 || c1 > n || c0 >= c1) throw ShapeError("slice_cols: bad range");
    Tensor out({m, c1 - c0});
    for (int i = 0; i < m; ++i)
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = av.at(i, j);
    const int ai = a.id, w = c1 - c0;
    return t.make(std::move(out), [ai, c0, w, n, m](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        auto& ga = tp.grad_of(ai);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) ga[static_cast<size_t>(i) * n + c0 + j] += g[static_cast<size_t>(i) * w + j];
    });
}

inline Var slice_rows(Tape& t, Var a, int r0, int r1) {
    const Tensor& av = t.val(a);
    const int m = av.rows(), n = av.cols();
    if (r0 < 0 || r1 > m || r0 >= r1) throw ShapeError("slice_rows: bad range");
    Tensor out({r1 - r0, n});
    std::copy(av.data.begin() + static_cast<size_t>(r0) * n, av.data.begin() + static_cast<size_t>(r1) * n,
              out.data.begin());
    const int ai = a.id, h = r1 - r0;
    return t.make(std::move(out), [ai, r0, h, n](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        auto& ga = tp.grad_of(ai);
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < n; ++j) ga[static_cast<size_t>(r0 + i) * n + j] += g[static_cast<size_t>(i) * n + j];
    });
}

inline Var concat_cols(Tape& t, const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    const int m = t.val(parts[0]).rows();
    int total = 0;
    for (Var p : parts) {
        if (t.val(p).rows() != m) throw ShapeError("concat_cols: row mismatch");
        total += t.val(p).cols();
    }
    Tensor out({m, total});
    int off = 0;
    std::vector<int> ids, widths, offsets;
    for (Var p : parts) {
        const Tensor& pv = t.val(p);
        const int w = pv.cols();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) out.at(i, off + j) = pv.at(i, j);
        ids.push_back(p.id);
        widths.push_back(w);
        offsets.push_back(off);
        off += w;
    }
    return t.make(std::move(out), [ids, widths, offsets, m, total](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        for (size_t pi = 0; pi < ids.size(); ++pi) {
            auto& gp = tp.grad_of(ids[pi]);
            const int w = widths[pi], o = offsets[pi];
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j)
                    gp[static_cast<size_t>(i) * w + j] += g[static_cast<size_t>(i) * total + o + j];
        }
    });
}

// --------------------------- normalization --------------------------------

inline Var layernorm(Tape& t, Var x, Var gain, Var bias) {
    const Tensor& xv = t.val(x);
    const int m = xv.rows(), d = xv.cols();
    if (t.val(gain).numel() != d || t.val(bias).numel() != d)
        throw ShapeError("layernorm: gain/bias length must equal row width " + std::to_string(d));
    Tensor out({m, d});
    auto mus = std::make_shared<std::vector<double>>(m);
    auto rstds = std::make_shared<std::vector<double>>(m);
    for (int i = 0; i < m; ++i)
        kern::layernorm_row(&xv.data[static_cast<size_t>(i) * d], d, t.val(gain).data.data(),
                            t.val(bias).data.data(), &out.data[static_cast<size_t>(i) * d], &(*mus)[i],
                            &(*rstds)[i]);
    const int xi = x.id, gi = gain.id, bi = bias.id;
    return t.make(std::move(out), [xi, gi, bi, m, d, mus, rstds](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        const auto& xd = tp.nodes[xi].value.data;
        const auto& gaind = tp.nodes[gi].value.data;
        auto& gx = tp.grad_of(xi);
        auto& gg = tp.grad_of(gi);
        auto& gb = tp.grad_of(bi);
        for (int i = 0; i < m; ++i) {
            const double mu = (*mus)[i], rstd = (*rstds)[i];
            const double* xrow = &xd[static_cast<size_t>(i) * d];
            const double* grow = &g[static_cast<size_t>(i) * d];
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (int j = 0; j < d; ++j) {
                const double xhat = (xrow[j] - mu) * rstd;
                const double gy = grow[j] * gaind[j];
                sum_gy += gy;
                sum_gy_xhat += gy * xhat;
                gg[j] += grow[j] * xhat;
                gb[j] += grow[j];
            }
            for (int j = 0; j < d; ++j) {
                const double xhat = (xrow[j] - mu) * rstd;
                gx[static_cast<size_t>(i) * d + j] +=
                    rstd * (grow[j] * gaind[j] - sum_gy / d - xhat * sum_gy_xhat / d);
            }
        }
    });
}

// --------------------------- attention pieces -----------------------------

// Row-wise causal softmax on a [T x T] score matrix.
inline Var causal_softmax(Tape& t, Var scores) {
    const Tensor& sv = t.val(scores);
    if (sv.rows() != sv.cols()) throw ShapeError("causal_softmax: scores must be square, got " + sv.shape_str());
    const int n = sv.rows();
    Tensor out({n, n});
    kern::causal_softmax_rows(sv.data.data(), n, out.data.data());
    const int si = scores.id;
    return t.make(std::move(out), [si, n](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        const auto& p = tp.nodes[self].value.data;
        auto& gs = tp.grad_of(si);
        for (int i = 0; i < n; ++i) {
            const double* prow = &p[static_cast<size_t>(i) * n];
            const double* grow = &g[static_cast<size_t>(i) * n];
            double dot = 0.0;
            for (int j = 0; j <= i; ++j) dot += grow[j] * prow[j];
            for (int j = 0; j <= i; ++j) gs[static_cast<size_t>(i) * n + j] += prow[j] * (grow[j] - dot);
        }
    });
}

// ----------------------------- gathers ------------------------------------

// Gathers rows of `table` by index; backward scatters into the table.
inline Var embed_rows(Tape& t, Var table, const std::vector<int>& indices) {
    const Tensor& tv = t.val(table);
    const int v = tv.rows(), d = tv.cols();
    Tensor out({static_cast<int>(indices.size()), d});
    for (size_t i = 0; i < indices.size(); ++i) {
        const int ix = indices[i];
        if (ix < 0 || ix >= v) throw InputError("embed_rows: index " + std::to_string(ix) + " out of table rows");
        std::copy(tv.data.begin() + static_cast<size_t>(ix) * d, tv.data.begin() + static_cast<size_t>(ix + 1) * d,
                  out.data.begin() + i * d);
    }
    const int ti = table.id;
    auto idx = std::make_shared<std::vector<int>>(indices);
    return t.make(std::move(out), [ti, idx, d](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        auto& gt = tp.grad_of(ti);
        for (size_t i = 0; i < idx->size(); ++i) {
            const int ix = (*idx)[i];
            for (int j = 0; j < d; ++j) gt[static_cast<size_t>(ix) * d + j] += g[i * d + j];
        }
    });
}

// ------------------------------- TopK -------------------------------------

// Keeps the k largest-valued entries of each row, zeroing the rest. Exactly
// min(k, width) entries are selected per row; ties break to the lowest index.
// Gradient is passthrough on the selected entries only.
inline Var topk_rows(Tape& t, Var x, int k, const std::vector<uint8_t>* eligible = nullptr) {
    const Tensor& xv = t.val(x);
    const int m = xv.rows(), h = xv.cols();
    if (k < 1 || k > h) throw ParamError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(h) + "]");
    if (eligible && static_cast<int>(eligible->size()) != h) throw ParamError("topk: eligibility mask length");
    Tensor out({m, h});
    auto keep = std::make_shared<std::vector<int>>();
    keep->reserve(static_cast<size_t>(m) * k);
    auto row_counts = std::make_shared<std::vector<int>>(m);
    std::vector<int> sel;
    for (int i = 0; i < m; ++i) {
        kern::topk_select(&xv.data[static_cast<size_t>(i) * h], h, k, eligible ? eligible->data() : nullptr, sel);
        (*row_counts)[i] = static_cast<int>(sel.size());
        for (int j : sel) {
            out.at(i, j) = xv.at(i, j);
            keep->push_back(j);
        }
    }
    const int xi = x.id;
    return t.make(std::move(out), [xi, keep, row_counts, h](Tape& tp, int self) {
        const auto& g = tp.nodes[self].grad;
        auto& gx = tp.grad_of(xi);
        size_t pos = 0;
        for (size_t i = 0; i < row_counts->size(); ++i) {
            for (int c = 0; c < (*row_counts)[i]; ++c) {
                const int j = (*keep)[pos++];
                gx[i * h + j] += g[i * h + j];
            }
        }
    });
}

// ------------------------------ reductions --------------------------------

inline Var sum(Tape& t, Var a) {
    double s = 0.0;
    for (double v : t.val(a).data) s += v;
    const int ai = a.id;
    return t.make(Tensor::from({1}, {s}), [ai](Tape& tp, int self) {
        const double g = tp.nodes[self].grad[0];
        auto& ga = tp.grad_of(ai);
        for (auto& v : ga) v += g;
    });
}

inline Var mean_all(Tape& t, Var a) {
    const double n = static_cast<double>(t.val(a).numel());
    Var s = sum(t, a);
    return scale(t, s, 1.0 / n);
}

inline Var sqnorm(Tape& t, Var a) {
    double s = 0.0;
    for (double v : t.val(a).data) s += v * v;
    const int ai = a.id;
    return t.make(Tensor::from({1}, {s}), [ai](Tape& tp, int self) {
        const double g = tp.nodes[self].grad[0];
        const auto& av = tp.nodes[ai].value.data;
        auto& ga = tp.grad_of(ai);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * av[i] * g;
    });
}

// ------------------------------- losses -----------------------------------

// Mean next-token cross entropy over rows of logits. Fused log-softmax for
// numerical stability.
inline Var cross_entropy_mean(Tape& t, Var logits, const std::vector<int>& targets) {
    const Tensor& lv = t.val(logits);
    const int n = lv.rows(), v = lv.cols();
    if (static_cast<int>(targets.size()) != n)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                         " rows");
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * v);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = &lv.data[static_cast<size_t>(i) * v];
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        const int y = targets[i];
        if (y < 0 || y >= v) throw InputError("cross_entropy: target out of vocab");
        total += lse - row[y];
        for (int j = 0; j < v; ++j) (*probs)[static_cast<size_t>(i) * v + j] = std::exp(row[j] - lse);
    }
    const int li = logits.id;
    auto tgt = std::make_shared<std::vector<int>>(targets);
    return t.make(Tensor::from({1}, {total / n}), [li, probs, tgt, n, v](Tape& tp, int self) {
        const double g = tp.nodes[self].grad[0] / n;
        auto& gl = tp.grad_of(li);
        for (int i = 0; i < n; ++i) {
            const double* prow = &(*probs)[static_cast<size_t>(i) * v];
            for (int j = 0; j < v; ++j) gl[static_cast<size_t>(i) * v + j] += g * prow[j];
            gl[static_cast<size_t>(i) * v + (*tgt)[i]] -= g;
        }
    });
}

// Mean binary cross entropy with logits (labels in {0,1}).
inline Var bce_with_logits_mean(Tape& t, Var logits, const std::vector<double>& labels) {
    const Tensor& lv = t.val(logits);
    const int n = static_cast<int>(lv.numel());
    if (static_cast<int>(labels.size()) != n) throw ShapeError("bce: label count mismatch");
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = lv.data[i], y = labels[i];
        total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    const int li = logits.id;
    auto lab = std::make_shared<std::vector<double>>(labels);
    return t.make(Tensor::from({1}, {total / n}), [li, lab, n](Tape& tp, int self) {
        const double g = tp.nodes[self].grad[0] / n;
        const auto& zd = tp.nodes[li].value.data;
        auto& gl = tp.grad_of(li);
        for (int i = 0; i < n; ++i) {
            const double s = 1.0 / (1.0 + std::exp(-zd[i]));
            gl[i] += g * (s - (*lab)[i]);
        }
    });
}

// ------------------------- free-standing topk_mask -------------------------

// Plain-tensor form used outside training graphs (SAE inference, ranking).
inline Tensor topk_mask(const Tensor& x, int k) {
    const int h = static_cast<int>(x.numel());
    if (k < 1 || k > h) throw ParamError("topk_mask: k=" + std::to_string(k) + " outside [1, " + std::to_string(h) + "]");
    Tensor out = Tensor::zeros(x.shape);
    std::vector<int> sel;
    kern::topk_select(x.data.data(), h, k, nullptr, sel);
    for (int j : sel) out.data[j] = x.data[j];
    return out;
}

// ------------------------------ optimizer ---------------------------------

struct AdamState {
    Tensor first_moment;
    Tensor second_moment;
    int64_t step_count = 0;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState for_param(const Tensor& p, double lr_) {
        AdamState s;
        s.first_moment = Tensor::zeros(p.shape);
        s.second_moment = Tensor::zeros(p.shape);
        s.lr = lr_;
        return s;
    }
};

// Standard Adam update with bias correction. The parameter's grad slot must
// be populated; it is consumed (zeroed) by the step.
inline void adam_step(Tensor& param, AdamState& state) {
    if (param.grad.size() != param.data.size())
        throw StateError("adam_step: parameter has no gradient");
    if (!state.first_moment.same_shape(param) || !state.second_moment.same_shape(param))
        throw ShapeError("adam_step: moment shapes do not match parameter");
    state.step_count += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
    for (size_t i = 0; i < param.data.size(); ++i) {
        const double g = param.grad[i];
        state.first_moment.data[i] = b1 * state.first_moment.data[i] + (1.0 - b1) * g;
        state.second_moment.data[i] = b2 * state.second_moment.data[i] + (1.0 - b2) * g * g;
        const double mhat = state.first_moment.data[i] / bc1;
        const double vhat = state.second_moment.data[i] / bc2;
        param.data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    param.zero_grad();
}

// Global gradient-norm clipping across a parameter group. Returns the norm
// before clipping.
inline double clip_grad_norm(const std::vector<Tensor*>& params, double max_norm) {
    double sq = 0.0;
    for (const Tensor* p : params)
        for (double g : p->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (Tensor* p : params)
            for (double& g : p->grad) g *= s;
    }
    return norm;
}

}  // namespace piilab
