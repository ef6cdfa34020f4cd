#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "scmm/tensor.hpp"

namespace scmm::ad {

// Reverse-mode autodiff over a dynamically built tape of 2-D tensors.
// One Graph per forward pass; node ids are creation-ordered, so the reverse
// sweep visits consumers before producers.

class Graph;

struct Value {
    Graph* g = nullptr;
    int id = -1;
    bool valid() const { return g != nullptr && id >= 0; }
};

class Graph {
  public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    struct Node {
        Tensor val;
        Tensor grad;
        bool requires_grad = false;
        bool grad_live = false;
        std::function<void(Graph&, Value)> back;
    };

    Value leaf(Tensor t, bool requires_grad) {
        nodes_.push_back(Node{std::move(t), Tensor{}, requires_grad, false, nullptr});
        return Value{this, int(nodes_.size()) - 1};
    }

    Value constant(Tensor t) { return leaf(std::move(t), false); }

    Value constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    Node& node(Value v) { return nodes_[std::size_t(v.id)]; }
    const Node& node(Value v) const { return nodes_[std::size_t(v.id)]; }

    const Tensor& val(Value v) const { return nodes_[std::size_t(v.id)].val; }

    // Gradient of the last backward() target w.r.t. v; zero tensor if no flow.
    Tensor grad(Value v) const {
        const Node& n = nodes_[std::size_t(v.id)];
        if (n.grad_live) return n.grad;
        return Tensor(n.val.rows, n.val.cols, 0.0);
    }

    Tensor& grad_ref(Value v) {
        Node& n = nodes_[std::size_t(v.id)];
        if (!n.grad_live) {
            n.grad = Tensor(n.val.rows, n.val.cols, 0.0);
            n.grad_live = true;
        }
        return n.grad;
    }

    bool has_grad(Value v) const { return nodes_[std::size_t(v.id)].grad_live; }

    Value make(Tensor val, std::vector<Value> parents, std::function<void(Graph&, Value)> back) {
        bool req = false;
        for (const Value& p : parents) req = req || nodes_[std::size_t(p.id)].requires_grad;
        Node n;
        n.val = std::move(val);
        n.requires_grad = req;
        if (req) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Value{this, int(nodes_.size()) - 1};
    }

    void backward(Value loss) {
        Node& top = node(loss);
        if (top.val.size() != 1) throw data_error("backward target must be scalar, got " + top.val.shape_str());
        grad_ref(loss).data[0] = 1.0;
        for (int id = int(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[std::size_t(id)];
            if (n.requires_grad && n.grad_live && n.back) n.back(*this, Value{this, id});
        }
    }

    std::size_t size() const { return nodes_.size(); }

  private:
    std::deque<Node> nodes_;  // stable references while the tape grows
};

inline void check_same_graph(Value a, Value b) {
    if (a.g != b.g) throw data_error("values belong to different graphs");
}

inline Value add(Value a, Value b) {
    check_same_graph(a, b);
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    if (!ta.same_shape(tb)) throw data_error("add shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += tb.data[i];
    Value res = g.make(std::move(out), {a, b}, [a, b](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        if (gr.node(a).requires_grad) {
            Tensor& da = gr.grad_ref(a);
            for (std::size_t i = 0; i < d.size(); ++i) da.data[i] += d.data[i];
        }
        if (gr.node(b).requires_grad) {
            Tensor& db = gr.grad_ref(b);
            for (std::size_t i = 0; i < d.size(); ++i) db.data[i] += d.data[i];
        }
    });
    return res;
}

inline Value sub(Value a, Value b) {
    check_same_graph(a, b);
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    if (!ta.same_shape(tb)) throw data_error("sub shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= tb.data[i];
    Value res = g.make(std::move(out), {a, b}, [a, b](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        if (gr.node(a).requires_grad) {
            Tensor& da = gr.grad_ref(a);
            for (std::size_t i = 0; i < d.size(); ++i) da.data[i] += d.data[i];
        }
        if (gr.node(b).requires_grad) {
            Tensor& db = gr.grad_ref(b);
            for (std::size_t i = 0; i < d.size(); ++i) db.data[i] -= d.data[i];
        }
    });
    return res;
}

inline Value mul(Value a, Value b) {
    check_same_graph(a, b);
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    if (!ta.same_shape(tb)) throw data_error("mul shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= tb.data[i];
    Value res = g.make(std::move(out), {a, b}, [a, b](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        const Tensor& ta2 = gr.val(a);
        const Tensor& tb2 = gr.val(b);
        if (gr.node(a).requires_grad) {
            Tensor& da = gr.grad_ref(a);
            for (std::size_t i = 0; i < d.size(); ++i) da.data[i] += d.data[i] * tb2.data[i];
        }
        if (gr.node(b).requires_grad) {
            Tensor& db = gr.grad_ref(b);
            for (std::size_t i = 0; i < d.size(); ++i) db.data[i] += d.data[i] * ta2.data[i];
        }
    });
    return res;
}

inline Value scale(Value a, double c) {
    Graph& g = *a.g;
    Tensor out = g.val(a);
    for (double& v : out.data) v *= c;
    Value res = g.make(std::move(out), {a}, [a, c](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        Tensor& da = gr.grad_ref(a);
        for (std::size_t i = 0; i < d.size(); ++i) da.data[i] += c * d.data[i];
    });
    return res;
}

inline Value add_const(Value a, double c) {
    Graph& g = *a.g;
    Tensor out = g.val(a);
    for (double& v : out.data) v += c;
    Value res = g.make(std::move(out), {a}, [a](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        Tensor& da = gr.grad_ref(a);
        for (std::size_t i = 0; i < d.size(); ++i) da.data[i] += d.data[i];
    });
    return res;
}

// a [n x d] + b [1 x d], broadcast over rows.
inline Value add_rowvec(Value a, Value b) {
    check_same_graph(a, b);
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    if (tb.rows != 1 || tb.cols != ta.cols)
        throw data_error("add_rowvec shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (std::size_t r = 0; r < out.rows; ++r)
        for (std::size_t c = 0; c < out.cols; ++c) out.at(r, c) += tb.at(0, c);
    Value res = g.make(std::move(out), {a, b}, [a, b](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        if (gr.node(a).requires_grad) {
            Tensor& da = gr.grad_ref(a);
            for (std::size_t i = 0; i < d.size(); ++i) da.data[i] += d.data[i];
        }
        if (gr.node(b).requires_grad) {
            Tensor& db = gr.grad_ref(b);
            for (std::size_t r = 0; r < d.rows; ++r)
                for (std::size_t c = 0; c < d.cols; ++c) db.at(0, c) += d.at(r, c);
        }
    });
    return res;
}

inline Value matmul(Value a, Value b) {
    check_same_graph(a, b);
    Graph& g = *a.g;
    Tensor out;
    matmul_into(g.val(a), g.val(b), out);
    Value res = g.make(std::move(out), {a, b}, [a, b](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        const Tensor& ta = gr.val(a);
        const Tensor& tb = gr.val(b);
        if (gr.node(a).requires_grad) {
            // da += d * b^T
            Tensor& da = gr.grad_ref(a);
            for (std::size_t i = 0; i < ta.rows; ++i)
                for (std::size_t j = 0; j < tb.cols; ++j) {
                    double dv = d.at(i, j);
                    if (dv == 0.0) continue;
                    const double* brow = nullptr;
                    (void)brow;
                    for (std::size_t k = 0; k < ta.cols; ++k) da.at(i, k) += dv * tb.at(k, j);
                }
        }
        if (gr.node(b).requires_grad) {
            // db += a^T * d
            Tensor& db = gr.grad_ref(b);
            for (std::size_t i = 0; i < ta.rows; ++i)
                for (std::size_t k = 0; k < ta.cols; ++k) {
                    double av = ta.at(i, k);
                    if (av == 0.0) continue;
                    const double* drow = d.row_ptr(i);
                    double* dbrow = db.row_ptr(k);
                    for (std::size_t j = 0; j < d.cols; ++j) dbrow[j] += av * drow[j];
                }
        }
    });
    return res;
}

inline Value transpose(Value a) {
    Graph& g = *a.g;
    Tensor out = scmm::transpose(g.val(a));
    Value res = g.make(std::move(out), {a}, [a](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        Tensor& da = gr.grad_ref(a);
        for (std::size_t i = 0; i < d.rows; ++i)
            for (std::size_t j = 0; j < d.cols; ++j) da.at(j, i) += d.at(i, j);
    });
    return res;
}

inline Value slice_cols(Value a, std::size_t start, std::size_t count) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    if (start + count > ta.cols) throw data_error("slice_cols out of range");
    Tensor out(ta.rows, count);
    for (std::size_t r = 0; r < ta.rows; ++r)
        for (std::size_t c = 0; c < count; ++c) out.at(r, c) = ta.at(r, start + c);
    Value res = g.make(std::move(out), {a}, [a, start, count](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        Tensor& da = gr.grad_ref(a);
        for (std::size_t r = 0; r < d.rows; ++r)
            for (std::size_t c = 0; c < count; ++c) da.at(r, start + c) += d.at(r, c);
    });
    return res;
}

inline Value slice_rows(Value a, std::size_t start, std::size_t count) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    if (start + count > ta.rows) throw data_error("slice_rows out of range");
    Tensor out(count, ta.cols);
    for (std::size_t r = 0; r < count; ++r)
        for (std::size_t c = 0; c < ta.cols; ++c) out.at(r, c) = ta.at(start + r, c);
    Value res = g.make(std::move(out), {a}, [a, start, count](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        Tensor& da = gr.grad_ref(a);
        for (std::size_t r = 0; r < count; ++r)
            for (std::size_t c = 0; c < d.cols; ++c) da.at(start + r, c) += d.at(r, c);
    });
    return res;
}

inline Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw data_error("concat_rows: empty input");
    Graph& g = *parts.front().g;
    std::size_t cols = g.val(parts.front()).cols;
    std::size_t rows = 0;
    for (const Value& p : parts) {
        if (g.val(p).cols != cols) throw data_error("concat_rows column mismatch");
        rows += g.val(p).rows;
    }
    Tensor out(rows, cols);
    std::size_t r0 = 0;
    for (const Value& p : parts) {
        const Tensor& tp = g.val(p);
        for (std::size_t r = 0; r < tp.rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out.at(r0 + r, c) = tp.at(r, c);
        r0 += tp.rows;
    }
    Value res{&g, -1};
    std::vector<Value> ps = parts;
    res = g.make(std::move(out), ps, [ps](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        std::size_t r0 = 0;
        for (const Value& p : ps) {
            const Tensor& tp = gr.val(p);
            if (gr.node(p).requires_grad) {
                Tensor& dp = gr.grad_ref(p);
                for (std::size_t r = 0; r < tp.rows; ++r)
                    for (std::size_t c = 0; c < d.cols; ++c) dp.at(r, c) += d.at(r0 + r, c);
            }
            r0 += tp.rows;
        }
    });
    return res;
}

inline Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw data_error("concat_cols: empty input");
    Graph& g = *parts.front().g;
    std::size_t rows = g.val(parts.front()).rows;
    std::size_t cols = 0;
    for (const Value& p : parts) {
        if (g.val(p).rows != rows) throw data_error("concat_cols row mismatch");
        cols += g.val(p).cols;
    }
    Tensor out(rows, cols);
    std::size_t c0 = 0;
    for (const Value& p : parts) {
        const Tensor& tp = g.val(p);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < tp.cols; ++c) out.at(r, c0 + c) = tp.at(r, c);
        c0 += tp.cols;
    }
    Value res{&g, -1};
    std::vector<Value> ps = parts;
    res = g.make(std::move(out), ps, [ps](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        std::size_t c0 = 0;
        for (const Value& p : ps) {
            const Tensor& tp = gr.val(p);
            if (gr.node(p).requires_grad) {
                Tensor& dp = gr.grad_ref(p);
                for (std::size_t r = 0; r < d.rows; ++r)
                    for (std::size_t c = 0; c < tp.cols; ++c) dp.at(r, c) += d.at(r, c0 + c);
            }
            c0 += tp.cols;
        }
    });
    return res;
}

// Embedding lookup: out row i = table row indices[i]. Backward scatter-adds.
inline Value gather_rows(Value table, std::vector<std::size_t> indices) {
    Graph& g = *table.g;
    const Tensor& tt = g.val(table);
    Tensor out(indices.size(), tt.cols);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= tt.rows)
            throw data_error("gather_rows: index " + std::to_string(indices[i]) + " out of range " +
                             std::to_string(tt.rows));
        for (std::size_t c = 0; c < tt.cols; ++c) out.at(i, c) = tt.at(indices[i], c);
    }
    Value res = g.make(std::move(out), {table}, [table, idx = std::move(indices)](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        Tensor& dt = gr.grad_ref(table);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < d.cols; ++c) dt.at(idx[i], c) += d.at(i, c);
    });
    return res;
}

// Row-wise softmax with max-shift. Additive masks are the caller's business.
inline Value softmax_rows(Value a) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    Tensor out(ta.rows, ta.cols);
    for (std::size_t r = 0; r < ta.rows; ++r) {
        const double* x = ta.row_ptr(r);
        double* y = out.row_ptr(r);
        double mx = x[0];
        for (std::size_t c = 1; c < ta.cols; ++c) mx = std::max(mx, x[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < ta.cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            sum += y[c];
        }
        for (std::size_t c = 0; c < ta.cols; ++c) y[c] /= sum;
    }
    Value res = g.make(std::move(out), {a}, [a](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        const Tensor& y = gr.val(res);
        Tensor& da = gr.grad_ref(a);
        for (std::size_t r = 0; r < y.rows; ++r) {
            double inner = 0.0;
            for (std::size_t c = 0; c < y.cols; ++c) inner += d.at(r, c) * y.at(r, c);
            for (std::size_t c = 0; c < y.cols; ++c) da.at(r, c) += y.at(r, c) * (d.at(r, c) - inner);
        }
    });
    return res;
}

// Row-wise log(sum(exp(.))) -> n x 1.
inline Value logsumexp_rows(Value a) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    Tensor out(ta.rows, 1);
    for (std::size_t r = 0; r < ta.rows; ++r) {
        const double* x = ta.row_ptr(r);
        double mx = x[0];
        for (std::size_t c = 1; c < ta.cols; ++c) mx = std::max(mx, x[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < ta.cols; ++c) sum += std::exp(x[c] - mx);
        out.at(r, 0) = mx + std::log(sum);
    }
    Value res = g.make(std::move(out), {a}, [a](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        const Tensor& ta2 = gr.val(a);
        const Tensor& lse = gr.val(res);
        Tensor& da = gr.grad_ref(a);
        for (std::size_t r = 0; r < ta2.rows; ++r)
            for (std::size_t c = 0; c < ta2.cols; ++c)
                da.at(r, c) += d.at(r, 0) * std::exp(ta2.at(r, c) - lse.at(r, 0));
    });
    return res;
}

// Layer normalization over columns of each row, with learned gain/shift.
inline Value layernorm_rows(Value x, Value gamma, Value beta, double eps = 1e-5) {
    check_same_graph(x, gamma);
    check_same_graph(x, beta);
    Graph& g = *x.g;
    const Tensor& tx = g.val(x);
    const Tensor& tg = g.val(gamma);
    const Tensor& tb = g.val(beta);
    if (tg.rows != 1 || tg.cols != tx.cols || !tg.same_shape(tb))
        throw data_error("layernorm parameter shape mismatch");
    std::size_t n = tx.cols;
    Tensor out(tx.rows, n);
    Tensor xhat(tx.rows, n);
    std::vector<double> inv_std(tx.rows);
    for (std::size_t r = 0; r < tx.rows; ++r) {
        const double* xr = tx.row_ptr(r);
        double mean = 0.0;
        for (std::size_t c = 0; c < n; ++c) mean += xr[c];
        mean /= double(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            double dv = xr[c] - mean;
            var += dv * dv;
        }
        var /= double(n);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < n; ++c) {
            double h = (xr[c] - mean) * is;
            xhat.at(r, c) = h;
            out.at(r, c) = h * tg.at(0, c) + tb.at(0, c);
        }
    }
    Value res = g.make(std::move(out), {x, gamma, beta},
                 [x, gamma, beta, xh = std::move(xhat), is = std::move(inv_std)](Graph& gr, Value res) {
                     const Tensor& d = gr.grad_ref(res);
                     const Tensor& tg2 = gr.val(gamma);
                     std::size_t n = d.cols;
                     if (gr.node(gamma).requires_grad) {
                         Tensor& dg = gr.grad_ref(gamma);
                         for (std::size_t r = 0; r < d.rows; ++r)
                             for (std::size_t c = 0; c < n; ++c) dg.at(0, c) += d.at(r, c) * xh.at(r, c);
                     }
                     if (gr.node(beta).requires_grad) {
                         Tensor& db = gr.grad_ref(beta);
                         for (std::size_t r = 0; r < d.rows; ++r)
                             for (std::size_t c = 0; c < n; ++c) db.at(0, c) += d.at(r, c);
                     }
                     if (gr.node(x).requires_grad) {
                         Tensor& dx = gr.grad_ref(x);
                         for (std::size_t r = 0; r < d.rows; ++r) {
                             double sum_dy = 0.0, sum_dy_xhat = 0.0;
                             for (std::size_t c = 0; c < n; ++c) {
                                 double dy = d.at(r, c) * tg2.at(0, c);
                                 sum_dy += dy;
                                 sum_dy_xhat += dy * xh.at(r, c);
                             }
                             for (std::size_t c = 0; c < n; ++c) {
                                 double dy = d.at(r, c) * tg2.at(0, c);
                                 dx.at(r, c) += is[r] * (dy - sum_dy / double(n) -
                                                         xh.at(r, c) * sum_dy_xhat / double(n));
                             }
                         }
                     }
                 });
    return res;
}

inline Value gelu(Value a) {
    Graph& g = *a.g;
    Tensor out = g.val(a);
    for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440));
    Value res = g.make(std::move(out), {a}, [a](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        const Tensor& tx = gr.val(a);
        Tensor& da = gr.grad_ref(a);
        for (std::size_t i = 0; i < tx.size(); ++i) {
            double x = tx.data[i];
            double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
            double pdf = std::exp(-0.5 * x * x) * 0.39894228040143267794;
            da.data[i] += d.data[i] * (cdf + x * pdf);
        }
    });
    return res;
}

inline Value sigmoid(Value a) {
    Graph& g = *a.g;
    Tensor out = g.val(a);
    for (double& v : out.data) v = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    Value res = g.make(std::move(out), {a}, [a](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        const Tensor& y = gr.val(res);
        Tensor& da = gr.grad_ref(a);
        for (std::size_t i = 0; i < y.size(); ++i) da.data[i] += d.data[i] * y.data[i] * (1.0 - y.data[i]);
    });
    return res;
}

// Numerically stable ln(1 + e^x).
inline Value softplus(Value a) {
    Graph& g = *a.g;
    Tensor out = g.val(a);
    for (double& v : out.data) v = std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v)));
    Value res = g.make(std::move(out), {a}, [a](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        const Tensor& tx = gr.val(a);
        Tensor& da = gr.grad_ref(a);
        for (std::size_t i = 0; i < tx.size(); ++i) {
            double x = tx.data[i];
            double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            da.data[i] += d.data[i] * s;
        }
    });
    return res;
}

inline Value l2_normalize_rows(Value a, double eps = 1e-12) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    Tensor out(ta.rows, ta.cols);
    std::vector<double> norms(ta.rows);
    for (std::size_t r = 0; r < ta.rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < ta.cols; ++c) s += ta.at(r, c) * ta.at(r, c);
        double n = std::max(std::sqrt(s), eps);
        norms[r] = n;
        for (std::size_t c = 0; c < ta.cols; ++c) out.at(r, c) = ta.at(r, c) / n;
    }
    Value res = g.make(std::move(out), {a}, [a, ns = std::move(norms)](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        const Tensor& y = gr.val(res);
        Tensor& da = gr.grad_ref(a);
        for (std::size_t r = 0; r < y.rows; ++r) {
            double inner = 0.0;
            for (std::size_t c = 0; c < y.cols; ++c) inner += d.at(r, c) * y.at(r, c);
            for (std::size_t c = 0; c < y.cols; ++c)
                da.at(r, c) += (d.at(r, c) - y.at(r, c) * inner) / ns[r];
        }
    });
    return res;
}

inline Value mean_rows(Value a) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    Tensor out(1, ta.cols, 0.0);
    for (std::size_t r = 0; r < ta.rows; ++r)
        for (std::size_t c = 0; c < ta.cols; ++c) out.at(0, c) += ta.at(r, c);
    for (double& v : out.data) v /= double(ta.rows);
    Value res = g.make(std::move(out), {a}, [a, rows = ta.rows](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        Tensor& da = gr.grad_ref(a);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d.cols; ++c) da.at(r, c) += d.at(0, c) / double(rows);
    });
    return res;
}

inline Value sum_all(Value a) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    double s = 0.0;
    for (double v : ta.data) s += v;
    Value res = g.make(Tensor::scalar(s), {a}, [a](Graph& gr, Value res) {
        double d = gr.grad_ref(res).data[0];
        Tensor& da = gr.grad_ref(a);
        for (double& v : da.data) v += d;
    });
    return res;
}

inline Value mean_all(Value a) {
    const Tensor& ta = a.g->val(a);
    return scale(sum_all(a), 1.0 / double(ta.size()));
}

// Row-wise dot product of two equally shaped matrices -> n x 1.
inline Value dot_rows(Value a, Value b) {
    check_same_graph(a, b);
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    if (!ta.same_shape(tb)) throw data_error("dot_rows shape mismatch");
    Tensor out(ta.rows, 1);
    for (std::size_t r = 0; r < ta.rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < ta.cols; ++c) s += ta.at(r, c) * tb.at(r, c);
        out.at(r, 0) = s;
    }
    Value res = g.make(std::move(out), {a, b}, [a, b](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        const Tensor& ta2 = gr.val(a);
        const Tensor& tb2 = gr.val(b);
        if (gr.node(a).requires_grad) {
            Tensor& da = gr.grad_ref(a);
            for (std::size_t r = 0; r < ta2.rows; ++r)
                for (std::size_t c = 0; c < ta2.cols; ++c) da.at(r, c) += d.at(r, 0) * tb2.at(r, c);
        }
        if (gr.node(b).requires_grad) {
            Tensor& db = gr.grad_ref(b);
            for (std::size_t r = 0; r < ta2.rows; ++r)
                for (std::size_t c = 0; c < ta2.cols; ++c) db.at(r, c) += d.at(r, 0) * ta2.at(r, c);
        }
    });
    return res;
}

// Token-level negative log-likelihood summed over rows: for each row l,
// loss += logsumexp(logits_l) - logits_l[targets[l]].
inline Value nll_rows(Value logits, std::vector<std::size_t> targets) {
    Graph& g = *logits.g;
    const Tensor& tl = g.val(logits);
    if (targets.size() != tl.rows) throw data_error("nll_rows: target count mismatch");
    double loss = 0.0;
    for (std::size_t r = 0; r < tl.rows; ++r) {
        if (targets[r] >= tl.cols) throw data_error("nll_rows: target id out of range");
        const double* x = tl.row_ptr(r);
        double mx = x[0];
        for (std::size_t c = 1; c < tl.cols; ++c) mx = std::max(mx, x[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < tl.cols; ++c) sum += std::exp(x[c] - mx);
        loss += mx + std::log(sum) - x[targets[r]];
    }
    Value res = g.make(Tensor::scalar(loss), {logits}, [logits, tg = std::move(targets)](Graph& gr, Value res) {
        double d = gr.grad_ref(res).data[0];
        const Tensor& tl2 = gr.val(logits);
        Tensor& dl = gr.grad_ref(logits);
        for (std::size_t r = 0; r < tl2.rows; ++r) {
            const double* x = tl2.row_ptr(r);
            double mx = x[0];
            for (std::size_t c = 1; c < tl2.cols; ++c) mx = std::max(mx, x[c]);
            double sum = 0.0;
            for (std::size_t c = 0; c < tl2.cols; ++c) sum += std::exp(x[c] - mx);
            for (std::size_t c = 0; c < tl2.cols; ++c) {
                double soft = std::exp(x[c] - mx) / sum;
                dl.at(r, c) += d * (soft - (c == tg[r] ? 1.0 : 0.0));
            }
        }
    });
    return res;
}

// Rows where keep[r] is false become exact +0.0 and block gradient flow.
inline Value mask_rows(Value a, std::vector<bool> keep) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    if (keep.size() != ta.rows) throw data_error("mask_rows: mask length mismatch");
    Tensor out(ta.rows, ta.cols, 0.0);
    for (std::size_t r = 0; r < ta.rows; ++r)
        if (keep[r])
            for (std::size_t c = 0; c < ta.cols; ++c) out.at(r, c) = ta.at(r, c);
    Value res = g.make(std::move(out), {a}, [a, k = std::move(keep)](Graph& gr, Value res) {
        const Tensor& d = gr.grad_ref(res);
        Tensor& da = gr.grad_ref(a);
        for (std::size_t r = 0; r < d.rows; ++r)
            if (k[r])
                for (std::size_t c = 0; c < d.cols; ++c) da.at(r, c) += d.at(r, c);
    });
    return res;
}

// Inverted dropout; identity when rate <= 0. Mask drawn from the given stream.
inline Value dropout(Value a, double rate, rng::Stream& stream) {
    if (rate <= 0.0) return a;
    if (rate >= 1.0) throw config_error("dropout rate must be < 1");
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    Tensor mask(ta.rows, ta.cols);
    double keep = 1.0 - rate;
    for (double& m : mask.data) m = stream.bernoulli(rate) ? 0.0 : 1.0 / keep;
    return mul(a, g.constant(std::move(mask)));
}

inline Value operator+(Value a, Value b) { return add(a, b); }
inline Value operator-(Value a, Value b) { return sub(a, b); }
inline Value operator*(Value a, Value b) { return mul(a, b); }

} // namespace scmm::ad
