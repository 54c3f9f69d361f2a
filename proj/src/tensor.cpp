#include "hbert/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_set>

#include "hbert/errors.hpp"

namespace hbert {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::TensorNode>;

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

NodePtr make_node(Shape shape, double fill) {
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data.assign(shape_numel(n->shape), fill);
    return n;
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

// Registers the backprop record on `out` when grad recording is active.
void record(Tensor& out, std::initializer_list<const Tensor*> inputs,
            std::function<void()> fn) {
    if (!g_grad_enabled || !any_requires_grad(inputs)) return;
    out.node()->requires_grad = true;
    for (const Tensor* t : inputs) out.node()->parents.push_back(t->node());
    out.node()->backward_fn = std::move(fn);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    }
}

// Row-major matmul kernels, unit-stride inner loops.
void mm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
        std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// c[m,k] += a[m,n] * b[k,n]^T
void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
           std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += ai[j] * bp[j];
            c[i * k + p] += acc;
        }
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
        }
    }
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = make_node(std::move(shape), 0.0);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = make_node(std::move(shape), value);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeMismatch("from_data: " + std::to_string(values.size()) +
                            " values for shape " + shape_str(shape));
    }
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

double Tensor::item() const {
    if (size() != 1) throw ShapeMismatch("item: tensor has " + std::to_string(size()) + " elements");
    return data()[0];
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    auto an = a.node(), bn = b.node(), on = out.node();
    record(out, {&a, &b}, [an, bn, on] {
        const auto& g = on->grad;
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i];
        }
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    auto an = a.node(), bn = b.node(), on = out.node();
    record(out, {&a, &b}, [an, bn, on] {
        const auto& g = on->grad;
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] -= g[i];
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    auto an = a.node(), bn = b.node(), on = out.node();
    record(out, {&a, &b}, [an, bn, on] {
        const auto& g = on->grad;
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * an->data[i];
        }
    });
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    auto an = a.node(), on = out.node();
    record(out, {&a}, [an, on, c] {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    });
    return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
    if (x.shape().empty() || bias.shape().size() != 1 || x.shape().back() != bias.dim(0)) {
        throw ShapeMismatch("add_rowvec: " + shape_str(x.shape()) + " + " +
                            shape_str(bias.shape()));
    }
    const std::size_t d = bias.dim(0);
    const std::size_t rows = x.size() / d;
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    const auto& bv = bias.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) ov[r * d + j] = xv[r * d + j] + bv[j];
    auto xn = x.node(), bn = bias.node(), on = out.node();
    record(out, {&x, &bias}, [xn, bn, on, rows, d] {
        const auto& g = on->grad;
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j) bn->grad[j] += g[r * d + j];
        }
    });
    return out;
}

Tensor sum(const Tensor& x) {
    Tensor out = Tensor::zeros({1});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out.data()[0] = acc;
    auto xn = x.node(), on = out.node();
    record(out, {&x}, [xn, on] {
        xn->ensure_grad();
        const double g = on->grad[0];
        for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    });
    return out;
}

Tensor slice_rows(const Tensor& x, std::size_t row_begin, std::size_t row_end) {
    if (x.shape().size() != 2) throw ShapeMismatch("slice_rows: expected 2-d tensor");
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (row_begin > row_end || row_end > rows) {
        throw ShapeMismatch("slice_rows: range [" + std::to_string(row_begin) + "," +
                            std::to_string(row_end) + ") of " + std::to_string(rows));
    }
    const std::size_t n = row_end - row_begin;
    Tensor out = Tensor::zeros({n, d});
    std::copy(x.data().begin() + row_begin * d, x.data().begin() + row_end * d,
              out.data().begin());
    auto xn = x.node(), on = out.node();
    record(out, {&x}, [xn, on, row_begin, d, n] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n * d; ++i) xn->grad[row_begin * d + i] += on->grad[i];
    });
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat_rows: no parts");
    std::size_t d = 0, total = 0;
    for (const Tensor& t : parts) {
        const std::size_t td = t.shape().size() == 1 ? t.dim(0) : t.dim(1);
        const std::size_t tr = t.shape().size() == 1 ? 1 : t.dim(0);
        if (d == 0) d = td;
        if (td != d || t.shape().size() > 2) {
            throw ShapeMismatch("concat_rows: incompatible part " + shape_str(t.shape()));
        }
        total += tr;
    }
    Tensor out = Tensor::zeros({total, d});
    std::size_t row = 0;
    bool needs_grad = false;
    for (const Tensor& t : parts) {
        std::copy(t.data().begin(), t.data().end(), out.data().begin() + row * d);
        row += t.size() / d;
        needs_grad = needs_grad || t.requires_grad();
    }
    if (g_grad_enabled && needs_grad) {
        out.node()->requires_grad = true;
        std::vector<NodePtr> srcs;
        srcs.reserve(parts.size());
        for (const Tensor& t : parts) {
            out.node()->parents.push_back(t.node());
            srcs.push_back(t.node());
        }
        auto on = out.node();
        out.node()->backward_fn = [srcs, on, d] {
            std::size_t row = 0;
            for (const auto& s : srcs) {
                const std::size_t n = s->data.size();
                if (s->requires_grad) {
                    s->ensure_grad();
                    for (std::size_t i = 0; i < n; ++i) s->grad[i] += on->grad[row * d + i];
                }
                row += n / d;
            }
        };
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    mm(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    auto an = a.node(), bn = b.node(), on = out.node();
    record(out, {&a, &b}, [an, bn, on, m, k, n] {
        if (an->requires_grad) {
            an->ensure_grad();  // dA = dC * B^T
            mm_nt(on->grad.data(), bn->data.data(), an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();  // dB = A^T * dC
            mm_tn(an->data.data(), on->grad.data(), bn->grad.data(), m, k, n);
        }
    });
    return out;
}

Tensor gelu(const Tensor& x) {
    static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double kA = 0.044715;
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        const double v = xv[i];
        ov[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
    }
    auto xn = x.node(), on = out.node();
    record(out, {&x}, [xn, on] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) {
            const double v = xn->data[i];
            const double t = std::tanh(kC * (v + kA * v * v * v));
            const double du = kC * (1.0 + 3.0 * kA * v * v);
            const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
            xn->grad[i] += on->grad[i] * d;
        }
    });
    return out;
}

Tensor leaky_relu(const Tensor& x, double slope) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] >= 0.0 ? xv[i] : slope * xv[i];
    auto xn = x.node(), on = out.node();
    record(out, {&x}, [xn, on, slope] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) {
            xn->grad[i] += on->grad[i] * (xn->data[i] >= 0.0 ? 1.0 : slope);
        }
    });
    return out;
}

Tensor softmax_rows(const Tensor& x, const Mask* mask) {
    if (x.shape().empty()) throw ShapeMismatch("softmax_rows: scalar input");
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.size() / n;
    if (mask && mask->size() != x.size()) {
        throw ShapeMismatch("softmax_rows: mask size " + std::to_string(mask->size()) +
                            " vs tensor " + std::to_string(x.size()));
    }
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data();
    // Keep a copy of the mask; callers may hand in temporaries.
    auto mask_copy = std::make_shared<Mask>(mask ? *mask : Mask());
    const bool masked = !mask_copy->empty();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = &xv[r * n];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (!masked || (*mask_copy)[r * n + j]) mx = std::max(mx, row[j]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw AllMaskedRow("softmax_rows: row " + std::to_string(r) + " fully masked");
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!masked || (*mask_copy)[r * n + j]) {
                ov[r * n + j] = std::exp(row[j] - mx);
                denom += ov[r * n + j];
            }
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (!masked || (*mask_copy)[r * n + j]) ov[r * n + j] /= denom;
        }
    }
    auto xn = x.node(), on = out.node();
    record(out, {&x}, [xn, on, rows, n, mask_copy, masked] {
        xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (!masked || (*mask_copy)[r * n + j]) {
                    dot += on->grad[r * n + j] * on->data[r * n + j];
                }
            }
            for (std::size_t j = 0; j < n; ++j) {
                if (!masked || (*mask_copy)[r * n + j]) {
                    xn->grad[r * n + j] +=
                        on->data[r * n + j] * (on->grad[r * n + j] - dot);
                }
            }
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.shape().empty()) throw ShapeMismatch("layer_norm: scalar input");
    const std::size_t d = x.shape().back();
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        throw ShapeMismatch("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
    }
    const std::size_t rows = x.size() / d;
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = &xv[r * d];
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            ov[r * d + j] = gv[j] * ((row[j] - mean) * inv) + bv[j];
        }
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    record(out, {&x, &gain, &bias}, [xn, gn, bn, on, rows, d, eps] {
        for (std::size_t r = 0; r < rows; ++r) {
            const double* row = &xn->data[r * d];
            const double* g = &on->grad[r * d];
            double mean = 0.0;
            for (std::size_t j = 0; j < d; ++j) mean += row[j];
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
            var /= static_cast<double>(d);
            const double inv = 1.0 / std::sqrt(var + eps);
            if (gn->requires_grad || bn->requires_grad) {
                if (gn->requires_grad) gn->ensure_grad();
                if (bn->requires_grad) bn->ensure_grad();
                for (std::size_t j = 0; j < d; ++j) {
                    const double xhat = (row[j] - mean) * inv;
                    if (gn->requires_grad) gn->grad[j] += g[j] * xhat;
                    if (bn->requires_grad) bn->grad[j] += g[j];
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                double sum_gy = 0.0, sum_gyx = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double xhat = (row[j] - mean) * inv;
                    const double gy = g[j] * gn->data[j];
                    sum_gy += gy;
                    sum_gyx += gy * xhat;
                }
                const double nd = static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const double xhat = (row[j] - mean) * inv;
                    const double gy = g[j] * gn->data[j];
                    xn->grad[r * d + j] += inv * (gy - sum_gy / nd - xhat * sum_gyx / nd);
                }
            }
        }
    });
    return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2) throw ShapeMismatch("embedding_lookup: table must be 2-d");
    const std::size_t v = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw IdOutOfRange("embedding_lookup: id " + std::to_string(id) +
                               " outside vocabulary of " + std::to_string(v));
        }
    }
    Tensor out = Tensor::zeros({ids.size(), d});
    const auto& tv = table.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy(tv.begin() + ids[i] * d, tv.begin() + (ids[i] + 1) * d, ov.begin() + i * d);
    }
    auto tn = table.node(), on = out.node();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    record(out, {&table}, [tn, on, ids_copy, d] {
        tn->ensure_grad();
        for (std::size_t i = 0; i < ids_copy->size(); ++i) {
            const std::size_t base = static_cast<std::size_t>((*ids_copy)[i]) * d;
            for (std::size_t j = 0; j < d; ++j) tn->grad[base + j] += on->grad[i * d + j];
        }
    });
    return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw NumericError("dropout: p must be in [0, 1)");
    if (!training || p == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - p);
    auto mask = std::make_shared<Mask>(x.size());
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        const bool drop = rng.uniform() < p;
        (*mask)[i] = drop ? 0 : 1;
        ov[i] = drop ? 0.0 : xv[i] * keep_scale;
    }
    auto xn = x.node(), on = out.node();
    record(out, {&x}, [xn, on, mask, keep_scale] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) {
            if ((*mask)[i]) xn->grad[i] += on->grad[i] * keep_scale;
        }
    });
    return out;
}

Tensor mean_pool(const Tensor& x, const Mask& row_mask) {
    if (x.shape().size() != 2) throw ShapeMismatch("mean_pool: expected 2-d tensor");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (row_mask.size() != n) throw ShapeMismatch("mean_pool: mask size mismatch");
    std::size_t count = 0;
    for (auto m : row_mask) count += m ? 1 : 0;
    if (count == 0) throw AllMaskedRow("mean_pool: no active rows");
    Tensor out = Tensor::zeros({d});
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        if (!row_mask[i]) continue;
        for (std::size_t j = 0; j < d; ++j) ov[j] += xv[i * d + j];
    }
    const double inv = 1.0 / static_cast<double>(count);
    for (std::size_t j = 0; j < d; ++j) ov[j] *= inv;
    auto xn = x.node(), on = out.node();
    auto mask_copy = std::make_shared<Mask>(row_mask);
    record(out, {&x}, [xn, on, mask_copy, n, d, inv] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            if (!(*mask_copy)[i]) continue;
            for (std::size_t j = 0; j < d; ++j) xn->grad[i * d + j] += on->grad[j] * inv;
        }
    });
    return out;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    check_same_shape(logits, targets, "bce_with_logits");
    const std::size_t n = logits.size();
    Tensor out = Tensor::zeros({1});
    const auto& zv = logits.data();
    const auto& yv = targets.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = zv[i];
        acc += std::max(z, 0.0) - z * yv[i] + std::log1p(std::exp(-std::abs(z)));
    }
    out.data()[0] = acc / static_cast<double>(n);
    auto zn = logits.node(), yn = targets.node(), on = out.node();
    record(out, {&logits, &targets}, [zn, yn, on, n] {
        const double g = on->grad[0] / static_cast<double>(n);
        if (zn->requires_grad) {
            zn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double sig = 1.0 / (1.0 + std::exp(-zn->data[i]));
                zn->grad[i] += g * (sig - yn->data[i]);
            }
        }
        if (yn->requires_grad) {
            yn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) yn->grad[i] += g * (-zn->data[i]);
        }
    });
    return out;
}

Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int>& target_ids,
                            const Mask& loss_mask) {
    if (logits.shape().size() != 2) throw ShapeMismatch("masked_cross_entropy: logits must be 2-d");
    const std::size_t n = logits.dim(0), v = logits.dim(1);
    if (target_ids.size() != n || loss_mask.size() != n) {
        throw ShapeMismatch("masked_cross_entropy: targets/mask length mismatch");
    }
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!loss_mask[i]) continue;
        ++count;
        if (target_ids[i] < 0 || static_cast<std::size_t>(target_ids[i]) >= v) {
            throw IdOutOfRange("masked_cross_entropy: target id out of range");
        }
    }
    if (count == 0) return Tensor::scalar(0.0);  // constant, no gradient path
    Tensor out = Tensor::zeros({1});
    const auto& zv = logits.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!loss_mask[i]) continue;
        const double* row = &zv[i * v];
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
        acc += mx + std::log(denom) - row[target_ids[i]];
    }
    out.data()[0] = acc / static_cast<double>(count);
    auto zn = logits.node(), on = out.node();
    auto tgt = std::make_shared<std::vector<int>>(target_ids);
    auto msk = std::make_shared<Mask>(loss_mask);
    record(out, {&logits}, [zn, on, tgt, msk, n, v, count] {
        zn->ensure_grad();
        const double g = on->grad[0] / static_cast<double>(count);
        for (std::size_t i = 0; i < n; ++i) {
            if (!(*msk)[i]) continue;
            const double* row = &zn->data[i * v];
            double mx = row[0];
            for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            double denom = 0.0;
            for (std::size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
            for (std::size_t j = 0; j < v; ++j) {
                const double p = std::exp(row[j] - mx) / denom;
                zn->grad[i * v + j] += g * (p - (static_cast<int>(j) == (*tgt)[i] ? 1.0 : 0.0));
            }
        }
    });
    return out;
}

Tensor attention_context(const Tensor& q, const Tensor& k, const Tensor& v,
                         std::size_t batch, std::size_t seq_len, std::size_t n_heads,
                         const Mask& key_mask, double dropout_p, Rng* rng, bool training,
                         AttnProbe* probe) {
    if (q.shape().size() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
        throw ShapeMismatch("attention_context: q/k/v shape mismatch");
    }
    const std::size_t d = q.dim(1);
    if (q.dim(0) != batch * seq_len || d % n_heads != 0) {
        throw ShapeMismatch("attention_context: layout mismatch");
    }
    if (key_mask.size() != batch * seq_len) {
        throw ShapeMismatch("attention_context: key mask length mismatch");
    }
    const std::size_t dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool drop = training && dropout_p > 0.0;
    const double keep_scale = drop ? 1.0 / (1.0 - dropout_p) : 1.0;

    Tensor out = Tensor::zeros(q.shape());
    // Saved for backward: post-softmax probabilities (pre-dropout) and the
    // dropout keep mask, per (batch, head).
    auto alpha = std::make_shared<std::vector<double>>(batch * n_heads * seq_len * seq_len, 0.0);
    auto keep = drop ? std::make_shared<Mask>(batch * n_heads * seq_len * seq_len, 1)
                     : std::shared_ptr<Mask>();
    auto mask_copy = std::make_shared<Mask>(key_mask);

    if (probe) {
        probe->batch = batch;
        probe->seq_len = seq_len;
        probe->n_heads = n_heads;
        probe->alpha.assign(batch * n_heads * seq_len * seq_len, 0.0);
    }

    const auto& qv = q.data();
    const auto& kv = k.data();
    const auto& vv = v.data();
    auto& ov = out.data();
    std::vector<double> srow(seq_len);
    for (std::size_t b = 0; b < batch; ++b) {
        bool any_key = false;
        for (std::size_t j = 0; j < seq_len; ++j) any_key = any_key || key_mask[b * seq_len + j];
        if (!any_key) throw AllMaskedRow("attention_context: example with no real tokens");
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t hoff = h * dh;
            double* arow_base = &(*alpha)[(b * n_heads + h) * seq_len * seq_len];
            for (std::size_t i = 0; i < seq_len; ++i) {
                const double* qi = &qv[(b * seq_len + i) * d + hoff];
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < seq_len; ++j) {
                    if (!key_mask[b * seq_len + j]) continue;
                    const double* kj = &kv[(b * seq_len + j) * d + hoff];
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    srow[j] = s * scale;
                    mx = std::max(mx, srow[j]);
                }
                double denom = 0.0;
                double* arow = arow_base + i * seq_len;
                for (std::size_t j = 0; j < seq_len; ++j) {
                    if (!key_mask[b * seq_len + j]) continue;
                    arow[j] = std::exp(srow[j] - mx);
                    denom += arow[j];
                }
                for (std::size_t j = 0; j < seq_len; ++j) {
                    if (key_mask[b * seq_len + j]) arow[j] /= denom;
                }
                if (probe) {
                    for (std::size_t j = 0; j < seq_len; ++j) {
                        probe->at(b, h, i, j) = arow[j];
                    }
                }
                // context = (dropped) probabilities times V
                double* oi = &ov[(b * seq_len + i) * d + hoff];
                for (std::size_t j = 0; j < seq_len; ++j) {
                    if (!key_mask[b * seq_len + j]) continue;
                    double w = arow[j];
                    if (drop) {
                        const bool kept = !(rng->uniform() < dropout_p);
                        (*keep)[(b * n_heads + h) * seq_len * seq_len + i * seq_len + j] =
                            kept ? 1 : 0;
                        w = kept ? w * keep_scale : 0.0;
                    }
                    if (w == 0.0) continue;
                    const double* vj = &vv[(b * seq_len + j) * d + hoff];
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
                }
            }
        }
    }

    auto qn = q.node(), kn = k.node(), vn = v.node(), on = out.node();
    record(out, {&q, &k, &v},
           [qn, kn, vn, on, alpha, keep, mask_copy, batch, seq_len, n_heads, dh, d, scale,
            keep_scale, drop] {
        if (qn->requires_grad) qn->ensure_grad();
        if (kn->requires_grad) kn->ensure_grad();
        if (vn->requires_grad) vn->ensure_grad();
        std::vector<double> dalpha(seq_len), ds(seq_len);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t hoff = h * dh;
                const double* arow_base = &(*alpha)[(b * n_heads + h) * seq_len * seq_len];
                for (std::size_t i = 0; i < seq_len; ++i) {
                    const double* go = &on->grad[(b * seq_len + i) * d + hoff];
                    const double* arow = arow_base + i * seq_len;
                    // d(alpha~) and dV
                    for (std::size_t j = 0; j < seq_len; ++j) {
                        dalpha[j] = 0.0;
                        if (!(*mask_copy)[b * seq_len + j]) continue;
                        double w_scale = 1.0;
                        if (drop) {
                            const bool kept =
                                (*keep)[(b * n_heads + h) * seq_len * seq_len + i * seq_len + j];
                            if (!kept) continue;  // dropped: no flow either way
                            w_scale = keep_scale;
                        }
                        const double* vj = &vn->data[(b * seq_len + j) * d + hoff];
                        double dot = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) dot += go[c] * vj[c];
                        dalpha[j] = dot * w_scale;
                        if (vn->requires_grad) {
                            double* gv = &vn->grad[(b * seq_len + j) * d + hoff];
                            const double w = arow[j] * w_scale;
                            for (std::size_t c = 0; c < dh; ++c) gv[c] += w * go[c];
                        }
                    }
                    // softmax backward over active keys
                    double dot = 0.0;
                    for (std::size_t j = 0; j < seq_len; ++j) {
                        if ((*mask_copy)[b * seq_len + j]) dot += dalpha[j] * arow[j];
                    }
                    for (std::size_t j = 0; j < seq_len; ++j) {
                        ds[j] = (*mask_copy)[b * seq_len + j]
                                    ? arow[j] * (dalpha[j] - dot) * scale
                                    : 0.0;
                    }
                    // dQ_i and dK_j
                    if (qn->requires_grad) {
                        double* gq = &qn->grad[(b * seq_len + i) * d + hoff];
                        for (std::size_t j = 0; j < seq_len; ++j) {
                            if (ds[j] == 0.0) continue;
                            const double* kj = &kn->data[(b * seq_len + j) * d + hoff];
                            for (std::size_t c = 0; c < dh; ++c) gq[c] += ds[j] * kj[c];
                        }
                    }
                    if (kn->requires_grad) {
                        const double* qi = &qn->data[(b * seq_len + i) * d + hoff];
                        for (std::size_t j = 0; j < seq_len; ++j) {
                            if (ds[j] == 0.0) continue;
                            double* gk = &kn->grad[(b * seq_len + j) * d + hoff];
                            for (std::size_t c = 0; c < dh; ++c) gk[c] += ds[j] * qi[c];
                        }
                    }
                }
            }
        }
    });
    return out;
}

Tensor gat_scores(const Tensor& p, const Tensor& q, const Tensor& a, double slope) {
    if (p.shape().size() != 2 || p.shape() != q.shape()) {
        throw ShapeMismatch("gat_scores: p/q shape mismatch");
    }
    const std::size_t n = p.dim(0), d = p.dim(1);
    if (a.shape() != Shape{d}) throw ShapeMismatch("gat_scores: a must be [" + std::to_string(d) + "]");
    Tensor out = Tensor::zeros({n, n});
    const auto& pv = p.data();
    const auto& qv = q.data();
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* pi = &pv[i * d];
        for (std::size_t j = 0; j < n; ++j) {
            const double* qj = &qv[j * d];
            double e = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double t = pi[c] + qj[c];
                e += av[c] * (t >= 0.0 ? t : slope * t);
            }
            ov[i * n + j] = e;
        }
    }
    auto pn = p.node(), qn = q.node(), an = a.node(), on = out.node();
    record(out, {&p, &q, &a}, [pn, qn, an, on, n, d, slope] {
        if (pn->requires_grad) pn->ensure_grad();
        if (qn->requires_grad) qn->ensure_grad();
        if (an->requires_grad) an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            const double* pi = &pn->data[i * d];
            for (std::size_t j = 0; j < n; ++j) {
                const double ge = on->grad[i * n + j];
                if (ge == 0.0) continue;
                const double* qj = &qn->data[j * d];
                for (std::size_t c = 0; c < d; ++c) {
                    const double t = pi[c] + qj[c];
                    const double r = t >= 0.0 ? t : slope * t;
                    const double dr = t >= 0.0 ? 1.0 : slope;
                    const double common = ge * an->data[c] * dr;
                    if (pn->requires_grad) pn->grad[i * d + c] += common;
                    if (qn->requires_grad) qn->grad[j * d + c] += common;
                    if (an->requires_grad) an->grad[c] += ge * r;
                }
            }
        }
    });
    return out;
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw NonScalarLoss("backward: loss must be a defined scalar");
    }
    // Topological order by iterative post-order DFS over the recorded graph.
    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> seen;
    std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::TensorNode* parent = node->parents[next].get();
            ++next;
            if (seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
    // The tape is single-use: drop records so the graph can be rebuilt next pass.
    for (auto* node : order) {
        node->backward_fn = nullptr;
        node->parents.clear();
    }
}

}  // namespace hbert
