#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "poguise/errors.hpp"

namespace poguise {

// ---------------------------------------------------------------------------
// Dense row-major tensor with reverse-mode derivatives for exactly the ops
// the model needs. float is the training precision, double the verification
// precision. Token axis always comes first.
// ---------------------------------------------------------------------------

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// RAII guard that disables graph construction (inference / instrumentation).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct Tensor {
    std::vector<int> dims;
    std::vector<T> data;
    std::vector<T> grad; // sized lazily, only when requires_grad
    bool requires_grad = false;

    std::vector<std::shared_ptr<Tensor<T>>> parents;
    std::function<void(Tensor<T>&)> backprop; // pulls this->grad into parents

    int size() const {
        int n = 1;
        for (int d : dims) n *= d;
        return n;
    }
    int rows() const { return dims.empty() ? 1 : dims[0]; }
    int cols() const { return dims.size() < 2 ? 1 : dims[1]; }
    bool is_matrix() const { return dims.size() == 2; }

    T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    T at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

namespace detail {

inline std::string dims_str(const std::vector<int>& d) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < d.size(); ++i) os << (i ? "x" : "") << d[i];
    os << "]";
    return os.str();
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    for (T v : t.data) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

template <typename T>
TensorPtr<T> alloc(std::vector<int> dims) {
    auto out = std::make_shared<Tensor<T>>();
    out->dims = std::move(dims);
    int n = out->size();
    if (n <= 0) throw ShapeError("tensor with non-positive size " + dims_str(out->dims));
    out->data.assign(static_cast<std::size_t>(n), T(0));
    return out;
}

// Links the output into the graph when grad mode is on and any parent needs it.
template <typename T>
void link(TensorPtr<T>& out, std::vector<TensorPtr<T>> parents,
          std::function<void(Tensor<T>&)> backprop) {
    if (!grad_enabled()) return;
    bool need = false;
    for (const auto& p : parents)
        if (p->requires_grad) need = true;
    if (!need) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backprop = std::move(backprop);
}

} // namespace detail

template <typename T>
TensorPtr<T> tensor(std::vector<int> dims, bool requires_grad = false) {
    auto out = detail::alloc<T>(std::move(dims));
    out->requires_grad = requires_grad;
    return out;
}

template <typename T>
TensorPtr<T> tensor(std::vector<int> dims, std::vector<T> values, bool requires_grad = false) {
    auto out = detail::alloc<T>(std::move(dims));
    if (values.size() != out->data.size())
        throw ShapeError("value count " + std::to_string(values.size()) + " does not fill " +
                         detail::dims_str(out->dims));
    out->data = std::move(values);
    out->requires_grad = requires_grad;
    return out;
}

template <typename T>
TensorPtr<T> scalar_tensor(T v, bool requires_grad = false) {
    return tensor<T>({1}, {v}, requires_grad);
}

// ---------------------------------------------------------------------------
// Core ops
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (!a->is_matrix() || !b->is_matrix())
        throw ShapeError("matmul expects matrices, got " + detail::dims_str(a->dims) + " and " +
                         detail::dims_str(b->dims));
    const int m = a->dims[0], k = a->dims[1], k2 = b->dims[0], n = b->dims[1];
    if (k != k2)
        throw ShapeError("matmul inner dims differ: " + detail::dims_str(a->dims) + " vs " +
                         detail::dims_str(b->dims));
    auto out = detail::alloc<T>({m, n});
    const T* A = a->data.data();
    const T* B = b->data.data();
    T* C = out->data.data();
    for (int i = 0; i < m; ++i) {
        const T* ai = A + static_cast<std::size_t>(i) * k;
        T* ci = C + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const T av = ai[kk];
            const T* bk = B + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
    detail::check_finite(*out, "matmul");
    detail::link<T>(out, {a, b}, [a, b, m, k, n](Tensor<T>& o) {
        const T* G = o.grad.data();
        if (a->requires_grad) {
            a->ensure_grad();
            T* dA = a->grad.data();
            const T* B_ = b->data.data();
            for (int i = 0; i < m; ++i) {
                const T* gi = G + static_cast<std::size_t>(i) * n;
                T* dai = dA + static_cast<std::size_t>(i) * k;
                for (int kk = 0; kk < k; ++kk) {
                    const T* bk = B_ + static_cast<std::size_t>(kk) * n;
                    T acc = 0;
                    for (int j = 0; j < n; ++j) acc += gi[j] * bk[j];
                    dai[kk] += acc;
                }
            }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            T* dB = b->grad.data();
            const T* A_ = a->data.data();
            for (int i = 0; i < m; ++i) {
                const T* ai = A_ + static_cast<std::size_t>(i) * k;
                const T* gi = G + static_cast<std::size_t>(i) * n;
                for (int kk = 0; kk < k; ++kk) {
                    const T av = ai[kk];
                    T* dbk = dB + static_cast<std::size_t>(kk) * n;
                    for (int j = 0; j < n; ++j) dbk[j] += av * gi[j];
                }
            }
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> transpose(const TensorPtr<T>& x) {
    if (!x->is_matrix()) throw ShapeError("transpose expects a matrix");
    const int m = x->dims[0], n = x->dims[1];
    auto out = detail::alloc<T>({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out->data[static_cast<std::size_t>(j) * m + i] = x->at(i, j);
    detail::link<T>(out, {x}, [x, m, n](Tensor<T>& o) {
        x->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                x->grad[static_cast<std::size_t>(i) * n + j] += o.grad[static_cast<std::size_t>(j) * m + i];
    });
    return out;
}

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->dims != b->dims)
        throw ShapeError("add shapes differ: " + detail::dims_str(a->dims) + " vs " +
                         detail::dims_str(b->dims));
    auto out = detail::alloc<T>(a->dims);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    detail::check_finite(*out, "add");
    detail::link<T>(out, {a, b}, [a, b](Tensor<T>& o) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) a->grad[i] += o.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) b->grad[i] += o.grad[i];
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& x, T c) {
    auto out = detail::alloc<T>(x->dims);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = x->data[i] * c;
    detail::check_finite(*out, "scale");
    detail::link<T>(out, {x}, [x, c](Tensor<T>& o) {
        x->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) x->grad[i] += c * o.grad[i];
    });
    return out;
}

template <typename T>
TensorPtr<T> sub(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    return add(a, scale(b, T(-1)));
}

// Elementwise (Hadamard) product.
template <typename T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->dims != b->dims)
        throw ShapeError("mul shapes differ: " + detail::dims_str(a->dims) + " vs " +
                         detail::dims_str(b->dims));
    auto out = detail::alloc<T>(a->dims);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
    detail::check_finite(*out, "mul");
    detail::link<T>(out, {a, b}, [a, b](Tensor<T>& o) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) a->grad[i] += b->data[i] * o.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) b->grad[i] += a->data[i] * o.grad[i];
        }
    });
    return out;
}

// Row-broadcast bias: x[N x D] + b[D].
template <typename T>
TensorPtr<T> add_bias(const TensorPtr<T>& x, const TensorPtr<T>& b) {
    if (!x->is_matrix() || x->dims[1] != b->size())
        throw ShapeError("add_bias: " + detail::dims_str(x->dims) + " with bias " +
                         detail::dims_str(b->dims));
    const int n = x->dims[0], d = x->dims[1];
    auto out = detail::alloc<T>(x->dims);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out->data[static_cast<std::size_t>(i) * d + j] = x->at(i, j) + b->data[j];
    detail::check_finite(*out, "add_bias");
    detail::link<T>(out, {x, b}, [x, b, n, d](Tensor<T>& o) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) x->grad[i] += o.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) b->grad[j] += o.grad[static_cast<std::size_t>(i) * d + j];
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> linear(const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& b) {
    return add_bias(matmul(x, w), b);
}

// Exact (erf) GELU.
template <typename T>
TensorPtr<T> gelu(const TensorPtr<T>& x) {
    auto out = detail::alloc<T>(x->dims);
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        const T v = x->data[i];
        out->data[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
    }
    detail::check_finite(*out, "gelu");
    detail::link<T>(out, {x}, [x](Tensor<T>& o) {
        x->ensure_grad();
        constexpr T inv_sqrt2pi = T(0.39894228040143267794);
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const T v = x->data[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * T(0.70710678118654752440)));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            x->grad[i] += (cdf + v * pdf) * o.grad[i];
        }
    });
    return out;
}

// Row-wise softmax with max-subtraction stabilization.
template <typename T>
TensorPtr<T> softmax_rows(const TensorPtr<T>& x) {
    if (!x->is_matrix()) throw ShapeError("softmax_rows expects a matrix");
    const int n = x->dims[0], d = x->dims[1];
    auto out = detail::alloc<T>(x->dims);
    for (int i = 0; i < n; ++i) {
        const T* xi = x->data.data() + static_cast<std::size_t>(i) * d;
        T* yi = out->data.data() + static_cast<std::size_t>(i) * d;
        T mx = xi[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, xi[j]);
        T sum = 0;
        for (int j = 0; j < d; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            sum += yi[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < d; ++j) yi[j] *= inv;
    }
    detail::check_finite(*out, "softmax_rows");
    detail::link<T>(out, {x}, [x, n, d](Tensor<T>& o) {
        x->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const T* yi = o.data.data() + static_cast<std::size_t>(i) * d;
            const T* gi = o.grad.data() + static_cast<std::size_t>(i) * d;
            T dot = 0;
            for (int j = 0; j < d; ++j) dot += yi[j] * gi[j];
            T* dxi = x->grad.data() + static_cast<std::size_t>(i) * d;
            for (int j = 0; j < d; ++j) dxi[j] += yi[j] * (gi[j] - dot);
        }
    });
    return out;
}

// Per-row layer normalization over the last axis with affine parameters.
template <typename T>
TensorPtr<T> layernorm(const TensorPtr<T>& x, const TensorPtr<T>& gamma, const TensorPtr<T>& beta,
                       T eps = T(1e-5)) {
    if (!x->is_matrix()) throw ShapeError("layernorm expects a matrix");
    const int n = x->dims[0], d = x->dims[1];
    if (gamma->size() != d || beta->size() != d)
        throw ShapeError("layernorm affine params must have length " + std::to_string(d));
    auto out = detail::alloc<T>(x->dims);
    // normalized values are recomputed in backward from these
    auto inv_std = std::make_shared<std::vector<T>>(n);
    auto means = std::make_shared<std::vector<T>>(n);
    for (int i = 0; i < n; ++i) {
        const T* xi = x->data.data() + static_cast<std::size_t>(i) * d;
        T mu = 0;
        for (int j = 0; j < d; ++j) mu += xi[j];
        mu /= d;
        T var = 0;
        for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= d;
        const T istd = T(1) / std::sqrt(var + eps);
        (*means)[i] = mu;
        (*inv_std)[i] = istd;
        T* yi = out->data.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) yi[j] = (xi[j] - mu) * istd * gamma->data[j] + beta->data[j];
    }
    detail::check_finite(*out, "layernorm");
    detail::link<T>(out, {x, gamma, beta}, [x, gamma, beta, means, inv_std, n, d](Tensor<T>& o) {
        std::vector<T> xhat(static_cast<std::size_t>(d));
        for (int i = 0; i < n; ++i) {
            const T* xi = x->data.data() + static_cast<std::size_t>(i) * d;
            const T* gi = o.grad.data() + static_cast<std::size_t>(i) * d;
            const T istd = (*inv_std)[i];
            const T mu = (*means)[i];
            for (int j = 0; j < d; ++j) xhat[j] = (xi[j] - mu) * istd;
            if (gamma->requires_grad) {
                gamma->ensure_grad();
                for (int j = 0; j < d; ++j) gamma->grad[j] += gi[j] * xhat[j];
            }
            if (beta->requires_grad) {
                beta->ensure_grad();
                for (int j = 0; j < d; ++j) beta->grad[j] += gi[j];
            }
            if (x->requires_grad) {
                x->ensure_grad();
                T sum_dh = 0, sum_dh_xhat = 0;
                for (int j = 0; j < d; ++j) {
                    const T dh = gi[j] * gamma->data[j];
                    sum_dh += dh;
                    sum_dh_xhat += dh * xhat[j];
                }
                T* dxi = x->grad.data() + static_cast<std::size_t>(i) * d;
                for (int j = 0; j < d; ++j) {
                    const T dh = gi[j] * gamma->data[j];
                    dxi[j] += istd * (dh - sum_dh / d - xhat[j] * sum_dh_xhat / d);
                }
            }
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> sum_all(const TensorPtr<T>& x) {
    auto out = detail::alloc<T>({1});
    T acc = 0;
    for (T v : x->data) acc += v;
    out->data[0] = acc;
    detail::check_finite(*out, "sum_all");
    detail::link<T>(out, {x}, [x](Tensor<T>& o) {
        x->ensure_grad();
        for (std::size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += o.grad[0];
    });
    return out;
}

template <typename T>
TensorPtr<T> mean_all(const TensorPtr<T>& x) {
    const T inv = T(1) / static_cast<T>(x->size());
    return scale(sum_all(x), inv);
}

template <typename T>
TensorPtr<T> reshape(const TensorPtr<T>& x, std::vector<int> dims) {
    auto out = detail::alloc<T>(std::move(dims));
    if (out->size() != x->size())
        throw ShapeError("reshape " + detail::dims_str(x->dims) + " -> " + detail::dims_str(out->dims));
    out->data = x->data;
    detail::link<T>(out, {x}, [x](Tensor<T>& o) {
        x->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) x->grad[i] += o.grad[i];
    });
    return out;
}

// --- token-axis (row) structure ops ---

template <typename T>
TensorPtr<T> slice_rows(const TensorPtr<T>& x, int r0, int r1) {
    if (!x->is_matrix()) throw ShapeError("slice_rows expects a matrix");
    const int n = x->dims[0], d = x->dims[1];
    if (r0 < 0 || r1 > n || r0 >= r1) throw ShapeError("slice_rows range invalid");
    auto out = detail::alloc<T>({r1 - r0, d});
    std::copy(x->data.begin() + static_cast<std::size_t>(r0) * d,
              x->data.begin() + static_cast<std::size_t>(r1) * d, out->data.begin());
    detail::link<T>(out, {x}, [x, r0, d](Tensor<T>& o) {
        x->ensure_grad();
        const std::size_t off = static_cast<std::size_t>(r0) * d;
        for (std::size_t i = 0; i < o.grad.size(); ++i) x->grad[off + i] += o.grad[i];
    });
    return out;
}

template <typename T>
TensorPtr<T> concat_rows(const std::vector<TensorPtr<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows of nothing");
    const int d = parts[0]->cols();
    int n = 0;
    for (const auto& p : parts) {
        if (!p->is_matrix() || p->dims[1] != d) throw ShapeError("concat_rows column mismatch");
        n += p->dims[0];
    }
    auto out = detail::alloc<T>({n, d});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->data.begin(), p->data.end(), out->data.begin() + off);
        off += p->data.size();
    }
    detail::link<T>(out, parts, [parts](Tensor<T>& o) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += o.grad[off + i];
            }
            off += p->data.size();
        }
    });
    return out;
}

// split along the token axis; returns one slice per requested size
template <typename T>
std::vector<TensorPtr<T>> split_rows(const TensorPtr<T>& x, const std::vector<int>& sizes) {
    int total = 0;
    for (int s : sizes) total += s;
    if (total != x->rows()) throw ShapeError("split_rows sizes do not cover the token axis");
    std::vector<TensorPtr<T>> parts;
    int r = 0;
    for (int s : sizes) {
        parts.push_back(slice_rows(x, r, r + s));
        r += s;
    }
    return parts;
}

template <typename T>
TensorPtr<T> slice_cols(const TensorPtr<T>& x, int c0, int c1) {
    if (!x->is_matrix()) throw ShapeError("slice_cols expects a matrix");
    const int n = x->dims[0], d = x->dims[1];
    if (c0 < 0 || c1 > d || c0 >= c1) throw ShapeError("slice_cols range invalid");
    const int w = c1 - c0;
    auto out = detail::alloc<T>({n, w});
    for (int i = 0; i < n; ++i)
        std::copy(x->data.begin() + static_cast<std::size_t>(i) * d + c0,
                  x->data.begin() + static_cast<std::size_t>(i) * d + c1,
                  out->data.begin() + static_cast<std::size_t>(i) * w);
    detail::link<T>(out, {x}, [x, c0, n, d, w](Tensor<T>& o) {
        x->ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j)
                x->grad[static_cast<std::size_t>(i) * d + c0 + j] +=
                    o.grad[static_cast<std::size_t>(i) * w + j];
    });
    return out;
}

template <typename T>
TensorPtr<T> concat_cols(const std::vector<TensorPtr<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols of nothing");
    const int n = parts[0]->rows();
    int d = 0;
    for (const auto& p : parts) {
        if (!p->is_matrix() || p->dims[0] != n) throw ShapeError("concat_cols row mismatch");
        d += p->dims[1];
    }
    auto out = detail::alloc<T>({n, d});
    int c = 0;
    for (const auto& p : parts) {
        const int w = p->dims[1];
        for (int i = 0; i < n; ++i)
            std::copy(p->data.begin() + static_cast<std::size_t>(i) * w,
                      p->data.begin() + static_cast<std::size_t>(i) * w + w,
                      out->data.begin() + static_cast<std::size_t>(i) * d + c);
        c += w;
    }
    detail::link<T>(out, parts, [parts, n, d](Tensor<T>& o) {
        int c = 0;
        for (const auto& p : parts) {
            const int w = p->dims[1];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < w; ++j)
                        p->grad[static_cast<std::size_t>(i) * w + j] +=
                            o.grad[static_cast<std::size_t>(i) * d + c + j];
            }
            c += w;
        }
    });
    return out;
}

// Gathers whole token rows; duplicate indices accumulate grads into the same row.
template <typename T>
TensorPtr<T> gather_rows(const TensorPtr<T>& x, const std::vector<int>& idx) {
    if (!x->is_matrix()) throw ShapeError("gather_rows expects a matrix");
    const int n = x->dims[0], d = x->dims[1];
    if (idx.empty()) throw ShapeError("gather_rows with empty index set");
    for (int i : idx)
        if (i < 0 || i >= n) throw ShapeError("gather_rows index out of range");
    auto out = detail::alloc<T>({static_cast<int>(idx.size()), d});
    for (std::size_t k = 0; k < idx.size(); ++k)
        std::copy(x->data.begin() + static_cast<std::size_t>(idx[k]) * d,
                  x->data.begin() + static_cast<std::size_t>(idx[k]) * d + d,
                  out->data.begin() + k * d);
    detail::link<T>(out, {x}, [x, idx, d](Tensor<T>& o) {
        x->ensure_grad();
        for (std::size_t k = 0; k < idx.size(); ++k)
            for (int j = 0; j < d; ++j)
                x->grad[static_cast<std::size_t>(idx[k]) * d + j] += o.grad[k * d + j];
    });
    return out;
}

// --- convolution ops for the heatmap decoder ---

namespace detail {
struct DeconvGeom {
    int cin, cout, k, stride, pad, h, w, oh, ow;
};

inline DeconvGeom deconv_geometry(const std::vector<int>& xd, const std::vector<int>& kd, int stride,
                                  int pad) {
    if (xd.size() != 3) throw ShapeError("conv_transpose2d input must be CxHxW");
    if (kd.size() != 4 || kd[2] != kd[3]) throw ShapeError("conv_transpose2d kernel must be Cin x Cout x k x k");
    if (xd[0] != kd[0]) throw ShapeError("conv_transpose2d channel mismatch");
    DeconvGeom g;
    g.cin = xd[0];
    g.h = xd[1];
    g.w = xd[2];
    g.cout = kd[1];
    g.k = kd[2];
    g.stride = stride;
    g.pad = pad;
    g.oh = (g.h - 1) * stride - 2 * pad + g.k;
    g.ow = (g.w - 1) * stride - 2 * pad + g.k;
    if (g.oh <= 0 || g.ow <= 0) throw ShapeError("conv_transpose2d output dims are non-positive");
    return g;
}
} // namespace detail

// Scatter half of the transposed convolution: cols[(cout,kh,kw), (ih,iw)] is
// added into the output image at (ih*stride - pad + kh, iw*stride - pad + kw).
template <typename T>
TensorPtr<T> col2im_add(const TensorPtr<T>& cols, int cout, int k, int h, int w, int stride, int pad,
                        int oh, int ow) {
    if (cols->dims != std::vector<int>{cout * k * k, h * w})
        throw ShapeError("col2im_add column matrix has wrong shape");
    auto out = detail::alloc<T>({cout, oh, ow});
    const int hw = h * w;
    for (int co = 0; co < cout; ++co) {
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                const T* src = cols->data.data() + static_cast<std::size_t>((co * k + kh) * k + kw) * hw;
                T* dst = out->data.data() + static_cast<std::size_t>(co) * oh * ow;
                for (int ih = 0; ih < h; ++ih) {
                    const int y = ih * stride - pad + kh;
                    if (y < 0 || y >= oh) continue;
                    for (int iw = 0; iw < w; ++iw) {
                        const int x = iw * stride - pad + kw;
                        if (x < 0 || x >= ow) continue;
                        dst[y * ow + x] += src[ih * w + iw];
                    }
                }
            }
        }
    }
    detail::link<T>(out, {cols}, [cols, cout, k, h, w, stride, pad, oh, ow](Tensor<T>& o) {
        cols->ensure_grad();
        const int hw = h * w;
        for (int co = 0; co < cout; ++co) {
            for (int kh = 0; kh < k; ++kh) {
                for (int kw = 0; kw < k; ++kw) {
                    T* dst = cols->grad.data() + static_cast<std::size_t>((co * k + kh) * k + kw) * hw;
                    const T* src = o.grad.data() + static_cast<std::size_t>(co) * oh * ow;
                    for (int ih = 0; ih < h; ++ih) {
                        const int y = ih * stride - pad + kh;
                        if (y < 0 || y >= oh) continue;
                        for (int iw = 0; iw < w; ++iw) {
                            const int x = iw * stride - pad + kw;
                            if (x < 0 || x >= ow) continue;
                            dst[ih * w + iw] += src[y * ow + x];
                        }
                    }
                }
            }
        }
    });
    return out;
}

// Transposed 2D convolution, x[Cin x H x W] * kernel[Cin x Cout x k x k].
// Lowered to a matmul so the heavy work runs through one tight kernel.
template <typename T>
TensorPtr<T> conv_transpose2d(const TensorPtr<T>& x, const TensorPtr<T>& kernel, int stride, int pad) {
    auto g = detail::deconv_geometry(x->dims, kernel->dims, stride, pad);
    auto xm = reshape(x, {g.cin, g.h * g.w});
    auto km = reshape(kernel, {g.cin, g.cout * g.k * g.k});
    auto cols = matmul(transpose(km), xm); // [Cout*k*k, H*W]
    return col2im_add(cols, g.cout, g.k, g.h, g.w, stride, pad, g.oh, g.ow);
}

// Per-channel bias over a CxHxW image.
template <typename T>
TensorPtr<T> add_channel_bias(const TensorPtr<T>& x, const TensorPtr<T>& b) {
    if (x->dims.size() != 3 || b->size() != x->dims[0])
        throw ShapeError("add_channel_bias expects CxHxW and bias of length C");
    const int c = x->dims[0], hw = x->dims[1] * x->dims[2];
    auto out = detail::alloc<T>(x->dims);
    for (int ci = 0; ci < c; ++ci)
        for (int i = 0; i < hw; ++i)
            out->data[static_cast<std::size_t>(ci) * hw + i] =
                x->data[static_cast<std::size_t>(ci) * hw + i] + b->data[ci];
    detail::check_finite(*out, "add_channel_bias");
    detail::link<T>(out, {x, b}, [x, b, c, hw](Tensor<T>& o) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) x->grad[i] += o.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int ci = 0; ci < c; ++ci)
                for (int i = 0; i < hw; ++i) b->grad[ci] += o.grad[static_cast<std::size_t>(ci) * hw + i];
        }
    });
    return out;
}

// 1x1 convolution: x[Cin x H x W], w[Cin x Cout], b[Cout] -> [Cout x H x W].
template <typename T>
TensorPtr<T> conv2d_1x1(const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& b) {
    if (x->dims.size() != 3) throw ShapeError("conv2d_1x1 input must be CxHxW");
    const int cin = x->dims[0], h = x->dims[1], ww = x->dims[2];
    if (!w->is_matrix() || w->dims[0] != cin) throw ShapeError("conv2d_1x1 kernel must be Cin x Cout");
    const int cout = w->dims[1];
    auto xm = reshape(x, {cin, h * ww});
    auto ym = linear(transpose(xm), w, b);           // [H*W, Cout]
    return reshape(transpose(ym), {cout, h, ww});
}

// --- loss primitives ---

// Cross-entropy of logits[C] against a label-smoothed one-hot target.
template <typename T>
TensorPtr<T> cross_entropy_smoothed(const TensorPtr<T>& logits, int target, T smoothing) {
    const int c = logits->size();
    if (target < 0 || target >= c) throw ShapeError("cross_entropy target out of range");
    if (smoothing < T(0) || smoothing >= T(1)) throw ConfigError("label smoothing must be in [0,1)");
    auto out = detail::alloc<T>({1});
    // stable log-softmax
    T mx = logits->data[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits->data[j]);
    T lse = 0;
    for (int j = 0; j < c; ++j) lse += std::exp(logits->data[j] - mx);
    lse = std::log(lse) + mx;
    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
    T loss = 0;
    for (int j = 0; j < c; ++j) {
        const T logp = logits->data[j] - lse;
        (*probs)[j] = std::exp(logp);
        const T tj = (j == target ? T(1) - smoothing : T(0)) + smoothing / static_cast<T>(c);
        loss -= tj * logp;
    }
    out->data[0] = loss;
    detail::check_finite(*out, "cross_entropy_smoothed");
    detail::link<T>(out, {logits}, [logits, probs, target, smoothing, c](Tensor<T>& o) {
        logits->ensure_grad();
        for (int j = 0; j < c; ++j) {
            const T tj = (j == target ? T(1) - smoothing : T(0)) + smoothing / static_cast<T>(c);
            logits->grad[j] += o.grad[0] * ((*probs)[j] - tj);
        }
    });
    return out;
}

// y = ln(1 + s*x), elementwise.
template <typename T>
TensorPtr<T> log1p_scale(const TensorPtr<T>& x, T s) {
    auto out = detail::alloc<T>(x->dims);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = std::log1p(s * x->data[i]);
    detail::check_finite(*out, "log1p_scale");
    detail::link<T>(out, {x}, [x, s](Tensor<T>& o) {
        x->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            x->grad[i] += o.grad[i] * s / (T(1) + s * x->data[i]);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

template <typename T>
void backward(const TensorPtr<T>& root) {
    if (root->size() != 1) throw ShapeError("backward: root must be a scalar");
    if (!root->requires_grad) return;
    // iterative post-order topo sort
    std::vector<Tensor<T>*> order;
    std::unordered_set<Tensor<T>*> seen;
    std::vector<std::pair<Tensor<T>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Tensor<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backprop && !(*it)->grad.empty()) (*it)->backprop(**it);
    }
}

} // namespace poguise
