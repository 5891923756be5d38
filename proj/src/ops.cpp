#include "selftrans/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "selftrans/errors.hpp"

namespace st::ops {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;
using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using MapCM = Eigen::Map<const RowMat>;

template <typename F>
void accumulate(const NodePtr& n, F&& f) {
    if (n && n->requires_grad) f(n->ensure_grad());
}

Tensor unary(const Tensor& a, float (*fwd)(float), float (*deriv)(float x, float y)) {
    std::vector<float> out(a.values().size());
    const auto& x = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
    return make_result(a.shape(), std::move(out), {a}, [pa = a.node_ptr(), deriv](detail::Node& o) {
        accumulate(pa, [&](std::vector<float>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * deriv(pa->data[i], o.data[i]);
        });
    });
}

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;

int64_t last_dim(const Tensor& t, const char* what) {
    if (t.rank() < 1) throw ShapeError(std::string(what) + ": expected at least rank 1");
    return t.shape().back();
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return weighted_sum(a, 1.0f, b, 1.0f); }

Tensor sub(const Tensor& a, const Tensor& b) { return weighted_sum(a, 1.0f, b, -1.0f); }

Tensor weighted_sum(const Tensor& a, float wa, const Tensor& b, float wb) {
    check_same_shape(a, b, "weighted_sum");
    const auto& x = a.values();
    const auto& y = b.values();
    std::vector<float> out(x.size());
    if (wa == 1.0f && wb == 1.0f) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    } else if (wa == 1.0f && wb == -1.0f) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = wa * x[i] + wb * y[i];
    }
    return make_result(a.shape(), std::move(out), {a, b},
                       [pa = a.node_ptr(), pb = b.node_ptr(), wa, wb](detail::Node& o) {
                           accumulate(pa, [&](std::vector<float>& g) {
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += wa * o.grad[i];
                           });
                           accumulate(pb, [&](std::vector<float>& g) {
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += wb * o.grad[i];
                           });
                       });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    const auto& x = a.values();
    const auto& y = b.values();
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [pa = a.node_ptr(), pb = b.node_ptr()](detail::Node& o) {
                           accumulate(pa, [&](std::vector<float>& g) {
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb->data[i];
                           });
                           accumulate(pb, [&](std::vector<float>& g) {
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa->data[i];
                           });
                       });
}

Tensor scale(const Tensor& a, float s) {
    std::vector<float> out(a.values());
    for (auto& v : out) v *= s;
    return make_result(a.shape(), std::move(out), {a}, [pa = a.node_ptr(), s](detail::Node& o) {
        accumulate(pa, [&](std::vector<float>& g) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * o.grad[i];
        });
    });
}

Tensor exp(const Tensor& a) {
    return unary(
        a, [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

Tensor silu(const Tensor& a) {
    return unary(
        a, [](float x) { return x * sigmoid(x); },
        [](float x, float) {
            const float s = sigmoid(x);
            return s * (1.0f + x * (1.0f - s));
        });
}

Tensor gelu(const Tensor& a) {
    return unary(
        a,
        [](float x) { return 0.5f * x * (1.0f + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
        [](float x, float) {
            const float th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
            return 0.5f * (1.0f + th) +
                   0.5f * x * (1.0f - th * th) * kGeluC * (1.0f + 3.0f * kGeluA * x * x);
        });
}

Tensor tanh(const Tensor& a) {
    return unary(
        a, [](float x) { return std::tanh(x); }, [](float, float y) { return 1.0f - y * y; });
}

Tensor softmax(const Tensor& a) {
    const int64_t d = last_dim(a, "softmax");
    const int64_t rows = a.numel() / d;
    const auto& x = a.values();
    std::vector<float> out(x.size());
    for (int64_t r = 0; r < rows; ++r) {
        const float* xi = x.data() + r * d;
        float* yi = out.data() + r * d;
        float mx = xi[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xi[j]);
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            s += yi[j];
        }
        const float inv = static_cast<float>(1.0 / s);
        for (int64_t j = 0; j < d; ++j) yi[j] *= inv;
    }
    return make_result(a.shape(), std::move(out), {a}, [pa = a.node_ptr(), d, rows](detail::Node& o) {
        accumulate(pa, [&](std::vector<float>& g) {
            for (int64_t r = 0; r < rows; ++r) {
                const float* y = o.data.data() + r * d;
                const float* dy = o.grad.data() + r * d;
                double dot = 0.0;
                for (int64_t j = 0; j < d; ++j) dot += static_cast<double>(dy[j]) * y[j];
                const float fd = static_cast<float>(dot);
                for (int64_t j = 0; j < d; ++j) g[r * d + j] += y[j] * (dy[j] - fd);
            }
        });
    });
}

Tensor layer_norm(const Tensor& a, float eps) {
    const int64_t d = last_dim(a, "layer_norm");
    const int64_t rows = a.numel() / d;
    const auto& x = a.values();
    std::vector<float> out(x.size());
    std::vector<float> rstd(static_cast<std::size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const float* xi = x.data() + r * d;
        double m = 0.0;
        for (int64_t j = 0; j < d; ++j) m += xi[j];
        m /= static_cast<double>(d);
        double v = 0.0;
        for (int64_t j = 0; j < d; ++j) v += (xi[j] - m) * (xi[j] - m);
        v /= static_cast<double>(d);
        const float rs = static_cast<float>(1.0 / std::sqrt(v + eps));
        rstd[static_cast<std::size_t>(r)] = rs;
        const float mf = static_cast<float>(m);
        for (int64_t j = 0; j < d; ++j) out[r * d + j] = (xi[j] - mf) * rs;
    }
    return make_result(a.shape(), std::move(out), {a},
                       [pa = a.node_ptr(), d, rows, rstd = std::move(rstd)](detail::Node& o) {
                           accumulate(pa, [&](std::vector<float>& g) {
                               for (int64_t r = 0; r < rows; ++r) {
                                   const float* y = o.data.data() + r * d;
                                   const float* dy = o.grad.data() + r * d;
                                   double mdy = 0.0, mdyy = 0.0;
                                   for (int64_t j = 0; j < d; ++j) {
                                       mdy += dy[j];
                                       mdyy += static_cast<double>(dy[j]) * y[j];
                                   }
                                   const float a1 = static_cast<float>(mdy / d);
                                   const float a2 = static_cast<float>(mdyy / d);
                                   const float rs = rstd[static_cast<std::size_t>(r)];
                                   for (int64_t j = 0; j < d; ++j)
                                       g[r * d + j] += rs * (dy[j] - a1 - y[j] * a2);
                               }
                           });
                       });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2");
    const int64_t in = w.dim(1);
    const int64_t out_dim = w.dim(0);
    if (last_dim(x, "linear") != in)
        throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != out_dim))
        throw ShapeError("linear: bias shape " + shape_str(b.shape()));
    const int64_t m = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    std::vector<float> out(static_cast<std::size_t>(m * out_dim));
    {
        MapCM X(x.values().data(), m, in);
        MapCM W(w.values().data(), out_dim, in);
        MapM Y(out.data(), m, out_dim);
        Y.noalias() = X * W.transpose();
        if (b.defined()) {
            Eigen::Map<const Eigen::RowVectorXf> bv(b.values().data(), out_dim);
            Y.rowwise() += bv;
        }
    }
    std::vector<Tensor> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    return make_result(
        std::move(out_shape), std::move(out), std::move(inputs),
        [px = x.node_ptr(), pw = w.node_ptr(), pb = b.defined() ? b.node_ptr() : nullptr, m, in,
         out_dim](detail::Node& o) {
            MapCM dY(o.grad.data(), m, out_dim);
            accumulate(px, [&](std::vector<float>& g) {
                MapM dX(g.data(), m, in);
                dX.noalias() += dY * MapCM(pw->data.data(), out_dim, in);
            });
            accumulate(pw, [&](std::vector<float>& g) {
                MapM dW(g.data(), out_dim, in);
                dW.noalias() += dY.transpose() * MapCM(px->data.data(), m, in);
            });
            // Plain loops: Eigen's vectorized reductions peel by pointer
            // alignment, which makes the summation order vary between runs.
            accumulate(pb, [&](std::vector<float>& g) {
                const float* dy = o.grad.data();
                for (int64_t r = 0; r < m; ++r)
                    for (int64_t j = 0; j < out_dim; ++j) g[j] += dy[r * out_dim + j];
            });
        });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        throw ShapeError("bmm: expected [G, *, *] operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int64_t groups = a.dim(0);
    const int64_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
    const int64_t m = ta ? ac : ar;
    const int64_t k = ta ? ar : ac;
    const int64_t kb = tb ? bc : br;
    const int64_t n = tb ? br : bc;
    if (k != kb) throw ShapeError("bmm: inner dimensions differ");
    std::vector<float> out(static_cast<std::size_t>(groups * m * n));
    for (int64_t g = 0; g < groups; ++g) {
        MapCM A(a.values().data() + g * ar * ac, ar, ac);
        MapCM B(b.values().data() + g * br * bc, br, bc);
        MapM C(out.data() + g * m * n, m, n);
        if (!ta && !tb) C.noalias() = A * B;
        else if (!ta && tb) C.noalias() = A * B.transpose();
        else if (ta && !tb) C.noalias() = A.transpose() * B;
        else C.noalias() = A.transpose() * B.transpose();
    }
    return make_result(
        {groups, m, n}, std::move(out), {a, b},
        [pa = a.node_ptr(), pb = b.node_ptr(), groups, ar, ac, br, bc, m, n, ta, tb](detail::Node& o) {
            for (int64_t g = 0; g < groups; ++g) {
                MapCM dC(o.grad.data() + g * m * n, m, n);
                MapCM A(pa->data.data() + g * ar * ac, ar, ac);
                MapCM B(pb->data.data() + g * br * bc, br, bc);
                accumulate(pa, [&](std::vector<float>& grad) {
                    MapM dA(grad.data() + g * ar * ac, ar, ac);
                    // dAeff = dC * Beff^T
                    if (!ta) {
                        if (!tb) dA.noalias() += dC * B.transpose();
                        else dA.noalias() += dC * B;
                    } else {
                        if (!tb) dA.noalias() += B * dC.transpose();
                        else dA.noalias() += B.transpose() * dC.transpose();
                    }
                });
                accumulate(pb, [&](std::vector<float>& grad) {
                    MapM dB(grad.data() + g * br * bc, br, bc);
                    // dBeff = Aeff^T * dC
                    if (!tb) {
                        if (!ta) dB.noalias() += A.transpose() * dC;
                        else dB.noalias() += A * dC;
                    } else {
                        if (!ta) dB.noalias() += dC.transpose() * A;
                        else dB.noalias() += dC.transpose() * A.transpose();
                    }
                });
            }
        });
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_t) {
    if (x.rank() != 3) throw ShapeError("modulate: x must be [B, N, D]");
    const int64_t bsz = x.dim(0), n = x.dim(1), d = x.dim(2);
    const Shape cond{bsz, d};
    if (shift.shape() != cond || scale_t.shape() != cond)
        throw ShapeError("modulate: shift/scale must be " + shape_str(cond));
    const auto& xv = x.values();
    const auto& sh = shift.values();
    const auto& sc = scale_t.values();
    std::vector<float> out(xv.size());
    for (int64_t b = 0; b < bsz; ++b)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) {
                const auto idx = (b * n + i) * d + j;
                out[idx] = xv[idx] * (1.0f + sc[b * d + j]) + sh[b * d + j];
            }
    return make_result(
        x.shape(), std::move(out), {x, shift, scale_t},
        [px = x.node_ptr(), psh = shift.node_ptr(), psc = scale_t.node_ptr(), bsz, n, d](detail::Node& o) {
            const auto& dy = o.grad;
            accumulate(px, [&](std::vector<float>& g) {
                for (int64_t b = 0; b < bsz; ++b)
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < d; ++j) {
                            const auto idx = (b * n + i) * d + j;
                            g[idx] += dy[idx] * (1.0f + psc->data[b * d + j]);
                        }
            });
            accumulate(psh, [&](std::vector<float>& g) {
                for (int64_t b = 0; b < bsz; ++b)
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < d; ++j) g[b * d + j] += dy[(b * n + i) * d + j];
            });
            accumulate(psc, [&](std::vector<float>& g) {
                for (int64_t b = 0; b < bsz; ++b)
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < d; ++j) {
                            const auto idx = (b * n + i) * d + j;
                            g[b * d + j] += dy[idx] * px->data[idx];
                        }
            });
        });
}

Tensor gated_add(const Tensor& x, const Tensor& gate, const Tensor& y) {
    check_same_shape(x, y, "gated_add");
    if (x.rank() != 3) throw ShapeError("gated_add: x must be [B, N, D]");
    const int64_t bsz = x.dim(0), n = x.dim(1), d = x.dim(2);
    if (gate.shape() != Shape{bsz, d}) throw ShapeError("gated_add: gate must be [B, D]");
    const auto& xv = x.values();
    const auto& gv = gate.values();
    const auto& yv = y.values();
    std::vector<float> out(xv.size());
    for (int64_t b = 0; b < bsz; ++b)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) {
                const auto idx = (b * n + i) * d + j;
                out[idx] = xv[idx] + gv[b * d + j] * yv[idx];
            }
    return make_result(
        x.shape(), std::move(out), {x, gate, y},
        [px = x.node_ptr(), pg = gate.node_ptr(), py = y.node_ptr(), bsz, n, d](detail::Node& o) {
            const auto& dy = o.grad;
            accumulate(px, [&](std::vector<float>& g) {
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
            });
            accumulate(pg, [&](std::vector<float>& g) {
                for (int64_t b = 0; b < bsz; ++b)
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < d; ++j) {
                            const auto idx = (b * n + i) * d + j;
                            g[b * d + j] += dy[idx] * py->data[idx];
                        }
            });
            accumulate(py, [&](std::vector<float>& g) {
                for (int64_t b = 0; b < bsz; ++b)
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < d; ++j) {
                            const auto idx = (b * n + i) * d + j;
                            g[idx] += dy[idx] * pg->data[b * d + j];
                        }
            });
        });
}

Tensor add_broadcast(const Tensor& x, const Tensor& v) {
    if (x.rank() < 1 || Shape(x.shape().begin() + 1, x.shape().end()) != v.shape())
        throw ShapeError("add_broadcast: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
    const int64_t inner = v.numel();
    const int64_t outer = x.dim(0);
    std::vector<float> out(x.values());
    const auto& vv = v.values();
    for (int64_t b = 0; b < outer; ++b)
        for (int64_t i = 0; i < inner; ++i) out[b * inner + i] += vv[i];
    return make_result(x.shape(), std::move(out), {x, v},
                       [px = x.node_ptr(), pv = v.node_ptr(), inner, outer](detail::Node& o) {
                           accumulate(px, [&](std::vector<float>& g) {
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                           });
                           accumulate(pv, [&](std::vector<float>& g) {
                               for (int64_t b = 0; b < outer; ++b)
                                   for (int64_t i = 0; i < inner; ++i) g[i] += o.grad[b * inner + i];
                           });
                       });
}

Tensor gather(const Tensor& x, std::vector<int64_t> index, Shape out_shape) {
    if (shape_numel(out_shape) != static_cast<int64_t>(index.size()))
        throw ShapeError("gather: index count does not match output shape");
    const auto& xv = x.values();
    const auto n = static_cast<int64_t>(xv.size());
    std::vector<float> out(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= n) throw ShapeError("gather: index out of range");
        out[i] = xv[static_cast<std::size_t>(index[i])];
    }
    return make_result(std::move(out_shape), std::move(out), {x},
                       [px = x.node_ptr(), index = std::move(index)](detail::Node& o) {
                           accumulate(px, [&](std::vector<float>& g) {
                               for (std::size_t i = 0; i < index.size(); ++i)
                                   g[static_cast<std::size_t>(index[i])] += o.grad[i];
                           });
                       });
}

Tensor slice_last(const Tensor& x, int64_t start, int64_t len) {
    const int64_t d = last_dim(x, "slice_last");
    if (start < 0 || len < 0 || start + len > d) throw ShapeError("slice_last: range out of bounds");
    const int64_t rows = x.numel() / d;
    std::vector<int64_t> idx;
    idx.reserve(static_cast<std::size_t>(rows * len));
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < len; ++j) idx.push_back(r * d + start + j);
    Shape s = x.shape();
    s.back() = len;
    return gather(x, std::move(idx), std::move(s));
}

Tensor embedding(const Tensor& table, const std::vector<int64_t>& rows) {
    if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2");
    const int64_t r = table.dim(0), d = table.dim(1);
    std::vector<int64_t> idx;
    idx.reserve(rows.size() * static_cast<std::size_t>(d));
    for (auto row : rows) {
        if (row < 0 || row >= r) throw ShapeError("embedding: row " + std::to_string(row) + " out of range");
        for (int64_t j = 0; j < d; ++j) idx.push_back(row * d + j);
    }
    return gather(table, std::move(idx), {static_cast<int64_t>(rows.size()), d});
}

Tensor mse(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse");
    const auto& x = a.values();
    const auto& y = b.values();
    const auto n = x.size();
    if (n == 0) throw ShapeError("mse: empty tensors");
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(x[i]) - y[i];
        s += d * d;
    }
    const float loss = static_cast<float>(s / static_cast<double>(n));
    return make_result({}, {loss}, {a, b}, [pa = a.node_ptr(), pb = b.node_ptr(), n](detail::Node& o) {
        const float k = 2.0f * o.grad[0] / static_cast<float>(n);
        accumulate(pa, [&](std::vector<float>& g) {
            for (std::size_t i = 0; i < n; ++i) g[i] += k * (pa->data[i] - pb->data[i]);
        });
        accumulate(pb, [&](std::vector<float>& g) {
            for (std::size_t i = 0; i < n; ++i) g[i] -= k * (pa->data[i] - pb->data[i]);
        });
    });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (float v : a.values()) s += v;
    return make_result({}, {static_cast<float>(s)}, {a}, [pa = a.node_ptr()](detail::Node& o) {
        accumulate(pa, [&](std::vector<float>& g) {
            for (auto& v : g) v += o.grad[0];
        });
    });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<int64_t>(labels.size()))
        throw ShapeError("cross_entropy: logits must be [B, K] with B labels");
    const int64_t bsz = logits.dim(0), k = logits.dim(1);
    const auto& x = logits.values();
    std::vector<float> probs(x.size());
    double total = 0.0;
    for (int64_t b = 0; b < bsz; ++b) {
        const float* xi = x.data() + b * k;
        float mx = xi[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, xi[j]);
        double s = 0.0;
        for (int64_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(xi[j] - mx));
        const double lse = mx + std::log(s);
        const auto lbl = labels[static_cast<std::size_t>(b)];
        if (lbl < 0 || lbl >= k) throw ShapeError("cross_entropy: label out of range");
        total += lse - xi[lbl];
        for (int64_t j = 0; j < k; ++j) probs[b * k + j] = static_cast<float>(std::exp(xi[j] - lse));
    }
    const float loss = static_cast<float>(total / static_cast<double>(bsz));
    return make_result({}, {loss}, {logits},
                       [pl = logits.node_ptr(), probs = std::move(probs), labels, bsz, k](detail::Node& o) {
                           accumulate(pl, [&](std::vector<float>& g) {
                               const float s = o.grad[0] / static_cast<float>(bsz);
                               for (int64_t b = 0; b < bsz; ++b)
                                   for (int64_t j = 0; j < k; ++j) {
                                       const float onehot = labels[static_cast<std::size_t>(b)] == j ? 1.0f : 0.0f;
                                       g[b * k + j] += s * (probs[b * k + j] - onehot);
                                   }
                           });
                       });
}

namespace {

struct ConvGeom {
    int64_t c, h, w, k, stride, pad, ho, wo;
};

void im2col(const float* img, const ConvGeom& g, float* cols) {
    const int64_t hw = g.ho * g.wo;
    for (int64_t c = 0; c < g.c; ++c)
        for (int64_t ky = 0; ky < g.k; ++ky)
            for (int64_t kx = 0; kx < g.k; ++kx) {
                float* row = cols + ((c * g.k + ky) * g.k + kx) * hw;
                for (int64_t oy = 0; oy < g.ho; ++oy) {
                    const int64_t iy = oy * g.stride - g.pad + ky;
                    for (int64_t ox = 0; ox < g.wo; ++ox) {
                        const int64_t ix = ox * g.stride - g.pad + kx;
                        row[oy * g.wo + ox] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                                                  ? img[(c * g.h + iy) * g.w + ix]
                                                  : 0.0f;
                    }
                }
            }
}

void col2im(const float* cols, const ConvGeom& g, float* img) {
    const int64_t hw = g.ho * g.wo;
    for (int64_t c = 0; c < g.c; ++c)
        for (int64_t ky = 0; ky < g.k; ++ky)
            for (int64_t kx = 0; kx < g.k; ++kx) {
                const float* row = cols + ((c * g.k + ky) * g.k + kx) * hw;
                for (int64_t oy = 0; oy < g.ho; ++oy) {
                    const int64_t iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    for (int64_t ox = 0; ox < g.wo; ++ox) {
                        const int64_t ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.w) img[(c * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
    if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3))
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
    const int64_t bsz = x.dim(0), oc = w.dim(0);
    ConvGeom g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, padding, 0, 0};
    g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
    g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
    if (g.ho < 1 || g.wo < 1) throw ShapeError("conv2d: kernel larger than padded input");
    if (b.defined() && b.shape() != Shape{oc}) throw ShapeError("conv2d: bias shape");
    const int64_t ckk = g.c * g.k * g.k;
    const int64_t hw = g.ho * g.wo;
    std::vector<float> out(static_cast<std::size_t>(bsz * oc * hw));
    std::vector<float> cols(static_cast<std::size_t>(ckk * hw));
    MapCM W(w.values().data(), oc, ckk);
    for (int64_t n = 0; n < bsz; ++n) {
        im2col(x.values().data() + n * g.c * g.h * g.w, g, cols.data());
        MapM Y(out.data() + n * oc * hw, oc, hw);
        Y.noalias() = W * MapCM(cols.data(), ckk, hw);
        if (b.defined()) {
            Eigen::Map<const Eigen::VectorXf> bv(b.values().data(), oc);
            Y.colwise() += bv;
        }
    }
    std::vector<Tensor> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    return make_result(
        {bsz, oc, g.ho, g.wo}, std::move(out), std::move(inputs),
        [px = x.node_ptr(), pw = w.node_ptr(), pb = b.defined() ? b.node_ptr() : nullptr, g, bsz, oc, ckk,
         hw](detail::Node& o) {
            std::vector<float> colbuf(static_cast<std::size_t>(ckk * hw));
            MapCM W(pw->data.data(), oc, ckk);
            for (int64_t n = 0; n < bsz; ++n) {
                MapCM dY(o.grad.data() + n * oc * hw, oc, hw);
                accumulate(pw, [&](std::vector<float>& gw) {
                    im2col(px->data.data() + n * g.c * g.h * g.w, g, colbuf.data());
                    MapM dW(gw.data(), oc, ckk);
                    dW.noalias() += dY * MapCM(colbuf.data(), ckk, hw).transpose();
                });
                accumulate(pb, [&](std::vector<float>& gb) {
                    const float* dy = o.grad.data() + n * oc * hw;
                    for (int64_t c = 0; c < oc; ++c) {
                        float s = 0.0f;
                        for (int64_t i = 0; i < hw; ++i) s += dy[c * hw + i];
                        gb[c] += s;
                    }
                });
                accumulate(px, [&](std::vector<float>& gx) {
                    MapM dcols(colbuf.data(), ckk, hw);
                    dcols.noalias() = W.transpose() * dY;
                    col2im(colbuf.data(), g, gx.data() + n * g.c * g.h * g.w);
                });
            }
        });
}

Tensor upsample_nearest2x(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("upsample_nearest2x: expected [B, C, H, W]");
    const int64_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<int64_t> idx;
    idx.reserve(static_cast<std::size_t>(bc * 4 * h * w));
    for (int64_t p = 0; p < bc; ++p)
        for (int64_t y = 0; y < 2 * h; ++y)
            for (int64_t xx = 0; xx < 2 * w; ++xx) idx.push_back((p * h + y / 2) * w + xx / 2);
    return gather(x, std::move(idx), {x.dim(0), x.dim(1), 2 * h, 2 * w});
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool: expected [B, C, H, W]");
    const int64_t bc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<float> out(static_cast<std::size_t>(bc));
    const auto& xv = x.values();
    for (int64_t p = 0; p < bc; ++p) {
        double s = 0.0;
        for (int64_t i = 0; i < hw; ++i) s += xv[p * hw + i];
        out[p] = static_cast<float>(s / static_cast<double>(hw));
    }
    return make_result({x.dim(0), x.dim(1)}, std::move(out), {x}, [px = x.node_ptr(), bc, hw](detail::Node& o) {
        accumulate(px, [&](std::vector<float>& g) {
            for (int64_t p = 0; p < bc; ++p) {
                const float v = o.grad[p] / static_cast<float>(hw);
                for (int64_t i = 0; i < hw; ++i) g[p * hw + i] += v;
            }
        });
    });
}

Tensor mean_tokens(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("mean_tokens: expected [B, N, D]");
    const int64_t bsz = x.dim(0), n = x.dim(1), d = x.dim(2);
    std::vector<float> out(static_cast<std::size_t>(bsz * d));
    const auto& xv = x.values();
    for (int64_t b = 0; b < bsz; ++b)
        for (int64_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (int64_t i = 0; i < n; ++i) s += xv[(b * n + i) * d + j];
            out[b * d + j] = static_cast<float>(s / static_cast<double>(n));
        }
    return make_result({bsz, d}, std::move(out), {x}, [px = x.node_ptr(), bsz, n, d](detail::Node& o) {
        accumulate(px, [&](std::vector<float>& g) {
            for (int64_t b = 0; b < bsz; ++b)
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < d; ++j) g[(b * n + i) * d + j] += o.grad[b * d + j] / static_cast<float>(n);
        });
    });
}

}  // namespace st::ops
