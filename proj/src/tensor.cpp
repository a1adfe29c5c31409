#include "unifusion/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace unifusion {

namespace {

constexpr double kGeluK = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluC = 0.044715;
constexpr double kLayernormEps = 1e-5;
constexpr double kNormFloor = 1e-12;

std::shared_ptr<std::vector<double>> alloc(int n) {
    return std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), 0.0);
}

int product(const std::vector<int>& shape) {
    int n = 1;
    for (int e : shape) {
        if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

bool want(const Tape* tp, const Tensor& a) { return tp != nullptr && a.requires_grad; }

// Builds the output tensor and, when any input is differentiable, its node.
// The caller installs the pull closure afterwards via Tape::set_pull.
Tensor make(Tape* tp, const char* op, std::vector<int> shape,
            std::initializer_list<const Tensor*> ins) {
    Tensor out;
    out.shape = std::move(shape);
    out.data = alloc(product(out.shape));
    bool rg = false;
    for (const Tensor* t : ins) rg = rg || want(tp, *t);
    if (rg) {
        out.requires_grad = true;
        std::vector<int> in_ids;
        for (const Tensor* t : ins) in_ids.push_back(t->node);
        out.node = tp->push(op, out.numel(), std::move(in_ids), nullptr);
    }
    return out;
}

void axpy(std::vector<double>& dst, const double* g, int n) {
    for (int i = 0; i < n; ++i) dst[i] += g[i];
}

} // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = alloc(product(t.shape));
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data->begin(), t.data->end(), value);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(shape);
    if (product(t.shape) != static_cast<int>(values.size()))
        throw std::invalid_argument("from: " + std::to_string(values.size()) + " values for shape " + shape_str(t.shape));
    t.data = std::make_shared<std::vector<double>>(std::move(values));
    return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

int Tensor::numel() const { return data ? static_cast<int>(data->size()) : 0; }

int Tensor::rows() const {
    if (rank() == 2) return shape[0];
    if (rank() == 1) return 1;
    throw std::invalid_argument("rows: rank-1/2 tensor required, got " + shape_str(shape));
}

int Tensor::cols() const {
    if (rank() == 2) return shape[1];
    if (rank() == 1) return shape[0];
    throw std::invalid_argument("cols: rank-1/2 tensor required, got " + shape_str(shape));
}

double Tensor::value() const {
    if (numel() != 1) throw std::invalid_argument("value: tensor has " + std::to_string(numel()) + " elements");
    return (*data)[0];
}

int Tape::push(const char* op, int out_size, std::vector<int> inputs, std::function<void(Tape&)> pull) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.out_size = out_size;
    n.pull = std::move(pull);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(int out_size) { return push("leaf", out_size, {}, nullptr); }

void Tape::set_pull(int id, std::function<void(Tape&)> pull) {
    nodes_[id].pull = std::move(pull);
}

std::vector<double>& Tape::grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(n.out_size), 0.0);
    return n.grad;
}

void Tape::backward_from(int loss_node) {
    grad(loss_node)[0] += 1.0;
    for (int i = loss_node; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.grad.empty() || !n.pull) continue;
        n.pull(*this);
        n.grad.clear(); // leaves keep theirs and accumulate across calls
        n.grad.shrink_to_fit();
    }
}

Tensor leaf(Tape& tape, const Tensor& t) {
    Tensor out = t;
    out.requires_grad = true;
    out.node = tape.leaf(t.numel());
    return out;
}

void backward(Tape& tape, const Tensor& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape));
    if (loss.node < 0)
        throw std::invalid_argument("backward: loss is not on the tape");
    tape.backward_from(loss.node);
}

// --- elementwise -------------------------------------------------------

Tensor add(Tape* tp, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) shape_error("add", a, b);
    const int n = a.numel();
    Tensor out = make(tp, "add", a.shape, {&a, &b});
    for (int i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
    if (out.node >= 0) {
        int id = out.node, ia = a.node, ib = b.node;
        tp->set_pull(id, [id, ia, ib, n](Tape& t) {
            const double* g = t.grad(id).data();
            if (ia >= 0) axpy(t.grad(ia), g, n);
            if (ib >= 0) axpy(t.grad(ib), g, n);
        });
    }
    return out;
}

Tensor sub(Tape* tp, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) shape_error("sub", a, b);
    const int n = a.numel();
    Tensor out = make(tp, "sub", a.shape, {&a, &b});
    for (int i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
    if (out.node >= 0) {
        int id = out.node, ia = a.node, ib = b.node;
        tp->set_pull(id, [id, ia, ib, n](Tape& t) {
            const double* g = t.grad(id).data();
            if (ia >= 0) axpy(t.grad(ia), g, n);
            if (ib >= 0) {
                auto& gb = t.grad(ib);
                for (int i = 0; i < n; ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

Tensor mul(Tape* tp, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) shape_error("mul", a, b);
    const int n = a.numel();
    Tensor out = make(tp, "mul", a.shape, {&a, &b});
    for (int i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
    if (out.node >= 0) {
        int id = out.node, ia = a.node, ib = b.node;
        auto da = a.data, db = b.data;
        tp->set_pull(id, [id, ia, ib, n, da, db](Tape& t) {
            const double* g = t.grad(id).data();
            if (ia >= 0) {
                auto& ga = t.grad(ia);
                for (int i = 0; i < n; ++i) ga[i] += g[i] * (*db)[i];
            }
            if (ib >= 0) {
                auto& gb = t.grad(ib);
                for (int i = 0; i < n; ++i) gb[i] += g[i] * (*da)[i];
            }
        });
    }
    return out;
}

Tensor scale(Tape* tp, const Tensor& a, double c) {
    const int n = a.numel();
    Tensor out = make(tp, "scale", a.shape, {&a});
    for (int i = 0; i < n; ++i) out.at(i) = a.at(i) * c;
    if (out.node >= 0) {
        int id = out.node, ia = a.node;
        tp->set_pull(id, [id, ia, c, n](Tape& t) {
            const double* g = t.grad(id).data();
            auto& ga = t.grad(ia);
            for (int i = 0; i < n; ++i) ga[i] += g[i] * c;
        });
    }
    return out;
}

Tensor mul_scalar(Tape* tp, const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw std::invalid_argument("mul_scalar: scalar operand has shape " + shape_str(s.shape));
    const int n = a.numel();
    const double sv = s.at(0);
    Tensor out = make(tp, "mul_scalar", a.shape, {&a, &s});
    for (int i = 0; i < n; ++i) out.at(i) = a.at(i) * sv;
    if (out.node >= 0) {
        int id = out.node, ia = a.node, is = s.node;
        auto da = a.data;
        tp->set_pull(id, [id, ia, is, sv, n, da](Tape& t) {
            const double* g = t.grad(id).data();
            if (ia >= 0) {
                auto& ga = t.grad(ia);
                for (int i = 0; i < n; ++i) ga[i] += g[i] * sv;
            }
            if (is >= 0) {
                double acc = 0.0;
                for (int i = 0; i < n; ++i) acc += g[i] * (*da)[i];
                t.grad(is)[0] += acc;
            }
        });
    }
    return out;
}

Tensor add_rowvec(Tape* tp, const Tensor& a, const Tensor& v) {
    const int m = a.rows(), n = a.cols();
    if (v.numel() != n) shape_error("add_rowvec", a, v);
    Tensor out = make(tp, "add_rowvec", a.shape, {&a, &v});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i * n + j) = a.at(i * n + j) + v.at(j);
    if (out.node >= 0) {
        int id = out.node, ia = a.node, iv = v.node;
        tp->set_pull(id, [id, ia, iv, m, n](Tape& t) {
            const double* g = t.grad(id).data();
            if (ia >= 0) axpy(t.grad(ia), g, m * n);
            if (iv >= 0) {
                auto& gv = t.grad(iv);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) gv[j] += g[i * n + j];
            }
        });
    }
    return out;
}

// --- linear algebra ----------------------------------------------------

namespace {

// C += A(m x k) * B(k x n), optional transposes on logical views
void mm_acc(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (int t = 0; t < k; ++t) {
            const double av = arow[t];
            if (av == 0.0) continue;
            const double* brow = b + t * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A^T(m x k from k x m) * B(k x n): c[i][j] += a[t][i]*b[t][j]
void mm_acc_tn(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int t = 0; t < k; ++t) {
        const double* arow = a + t * m;
        const double* brow = b + t * n;
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A(m x k) * B^T(k x n from n x k): c[i][j] += a[i][t]*b[j][t]
void mm_acc_nt(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (int t = 0; t < k; ++t) acc += arow[t] * brow[t];
            crow[j] += acc;
        }
    }
}

} // namespace

Tensor matmul(Tape* tp, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: rank-2 required, got " + shape_str(a.shape) + " x " + shape_str(b.shape));
    if (a.shape[1] != b.shape[0])
        throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape) + " x " + shape_str(b.shape));
    const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out = make(tp, "matmul", {m, n}, {&a, &b});
    mm_acc(out.data->data(), a.data->data(), b.data->data(), m, k, n);
    if (out.node >= 0) {
        int id = out.node, ia = a.node, ib = b.node;
        auto da = a.data, db = b.data;
        tp->set_pull(id, [id, ia, ib, m, k, n, da, db](Tape& t) {
            const double* g = t.grad(id).data();
            if (ia >= 0) mm_acc_nt(t.grad(ia).data(), g, db->data(), m, n, k); // gA = G * B^T
            if (ib >= 0) mm_acc_tn(t.grad(ib).data(), da->data(), g, k, m, n); // gB = A^T * G
        });
    }
    return out;
}

Tensor transpose(Tape* tp, const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose: rank-2 required, got " + shape_str(a.shape));
    const int m = a.shape[0], n = a.shape[1];
    Tensor out = make(tp, "transpose", {n, m}, {&a});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j * m + i) = a.at(i * n + j);
    if (out.node >= 0) {
        int id = out.node, ia = a.node;
        tp->set_pull(id, [id, ia, m, n](Tape& t) {
            const double* g = t.grad(id).data();
            auto& ga = t.grad(ia);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

Tensor reshape(Tape* tp, const Tensor& a, std::vector<int> shape) {
    Tensor probe;
    probe.shape = shape;
    int n = 1;
    for (int e : shape) n *= e;
    if (n != a.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape) + " as " + shape_str(shape));
    Tensor out = make(tp, "reshape", std::move(shape), {&a});
    *out.data = *a.data;
    if (out.node >= 0) {
        int id = out.node, ia = a.node;
        tp->set_pull(id, [id, ia, n](Tape& t) {
            axpy(t.grad(ia), t.grad(id).data(), n);
        });
    }
    return out;
}

// --- nonlinearities ----------------------------------------------------

Tensor gelu(Tape* tp, const Tensor& a) {
    const int n = a.numel();
    Tensor out = make(tp, "gelu", a.shape, {&a});
    for (int i = 0; i < n; ++i) {
        const double x = a.at(i);
        const double u = kGeluK * (x + kGeluC * x * x * x);
        out.at(i) = 0.5 * x * (1.0 + std::tanh(u));
    }
    if (out.node >= 0) {
        int id = out.node, ia = a.node;
        auto da = a.data;
        tp->set_pull(id, [id, ia, n, da](Tape& t) {
            const double* g = t.grad(id).data();
            auto& ga = t.grad(ia);
            for (int i = 0; i < n; ++i) {
                const double x = (*da)[i];
                const double u = kGeluK * (x + kGeluC * x * x * x);
                const double th = std::tanh(u);
                const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluK * (1.0 + 3.0 * kGeluC * x * x);
                ga[i] += g[i] * d;
            }
        });
    }
    return out;
}

Tensor softmax_masked(Tape* tp, const Tensor& logits, const Tensor* mask) {
    const int m = logits.rows(), n = logits.cols();
    if (mask && mask->shape != logits.shape) shape_error("softmax_masked", logits, *mask);
    Tensor out = make(tp, "softmax_masked", logits.shape, {&logits});
    const double* md = mask ? mask->data->data() : nullptr;
    for (int i = 0; i < m; ++i) {
        double rowmax = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) {
            const double z = logits.at(i * n + j) + (md ? md[i * n + j] : 0.0);
            rowmax = std::max(rowmax, z);
        }
        if (!std::isfinite(rowmax))
            throw std::domain_error("softmax_masked: fully masked row " + std::to_string(i));
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            const double z = logits.at(i * n + j) + (md ? md[i * n + j] : 0.0);
            const double e = std::exp(z - rowmax);
            out.at(i * n + j) = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < n; ++j) out.at(i * n + j) *= inv;
    }
    if (out.node >= 0) {
        int id = out.node, ia = logits.node;
        auto dp = out.data;
        tp->set_pull(id, [id, ia, m, n, dp](Tape& t) {
            const double* g = t.grad(id).data();
            auto& ga = t.grad(ia);
            for (int i = 0; i < m; ++i) {
                const double* p = dp->data() + i * n;
                const double* gr = g + i * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += gr[j] * p[j];
                for (int j = 0; j < n; ++j) ga[i * n + j] += p[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

Tensor layernorm(Tape* tp, const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const int m = x.rows(), d = x.cols();
    if (d < 2) throw std::invalid_argument("layernorm: needs at least 2 columns, got " + shape_str(x.shape));
    if (gain.numel() != d || bias.numel() != d)
        throw std::invalid_argument("layernorm: gain/bias must have " + std::to_string(d) + " elements");
    Tensor out = make(tp, "layernorm", x.shape, {&x, &gain, &bias});
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m) * d);
    auto invs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        const double* xr = x.data->data() + i * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xr[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + kLayernormEps);
        (*invs)[i] = inv;
        for (int j = 0; j < d; ++j) {
            const double h = (xr[j] - mean) * inv;
            (*xhat)[i * d + j] = h;
            out.at(i * d + j) = gain.at(j) * h + bias.at(j);
        }
    }
    if (out.node >= 0) {
        int id = out.node, ix = x.node, ig = gain.node, ib = bias.node;
        auto dg = gain.data;
        tp->set_pull(id, [id, ix, ig, ib, m, d, xhat, invs, dg](Tape& t) {
            const double* g = t.grad(id).data();
            for (int i = 0; i < m; ++i) {
                const double* gr = g + i * d;
                const double* h = xhat->data() + i * d;
                if (ig >= 0) {
                    auto& gg = t.grad(ig);
                    for (int j = 0; j < d; ++j) gg[j] += gr[j] * h[j];
                }
                if (ib >= 0) {
                    auto& gb = t.grad(ib);
                    for (int j = 0; j < d; ++j) gb[j] += gr[j];
                }
                if (ix >= 0) {
                    auto& gx = t.grad(ix);
                    double mean_hg = 0.0, mean_hgh = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double hg = gr[j] * (*dg)[j];
                        mean_hg += hg;
                        mean_hgh += hg * h[j];
                    }
                    mean_hg /= d;
                    mean_hgh /= d;
                    const double inv = (*invs)[i];
                    for (int j = 0; j < d; ++j) {
                        const double hg = gr[j] * (*dg)[j];
                        gx[i * d + j] += inv * (hg - mean_hg - h[j] * mean_hgh);
                    }
                }
            }
        });
    }
    return out;
}

// --- gather / layout ----------------------------------------------------

Tensor embedding_lookup(Tape* tp, const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw std::invalid_argument("embedding_lookup: table must be rank-2");
    const int v = table.shape[0], d = table.shape[1];
    const int L = static_cast<int>(ids.size());
    for (int idx : ids)
        if (idx < 0 || idx >= v)
            throw std::out_of_range("embedding_lookup: index " + std::to_string(idx) + " outside table of " + std::to_string(v));
    Tensor out = make(tp, "embedding_lookup", {L, d}, {&table});
    for (int l = 0; l < L; ++l)
        std::copy_n(table.data->data() + ids[l] * d, d, out.data->data() + l * d);
    if (out.node >= 0) {
        int id = out.node, it = table.node;
        auto ids_copy = ids;
        tp->set_pull(id, [id, it, d, ids_copy](Tape& t) {
            const double* g = t.grad(id).data();
            auto& gt = t.grad(it);
            for (std::size_t l = 0; l < ids_copy.size(); ++l)
                for (int j = 0; j < d; ++j) gt[ids_copy[l] * d + j] += g[l * d + j];
        });
    }
    return out;
}

Tensor concat_rows(Tape* tp, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    const int n = parts[0].cols();
    int m = 0;
    for (const Tensor& p : parts) {
        if (p.cols() != n) shape_error("concat_rows", parts[0], p);
        m += p.rows();
    }
    Tensor out;
    out.shape = {m, n};
    out.data = alloc(m * n);
    bool rg = false;
    for (const Tensor& p : parts) rg = rg || want(tp, p);
    int r = 0;
    for (const Tensor& p : parts) {
        std::copy_n(p.data->data(), p.numel(), out.data->data() + r * n);
        r += p.rows();
    }
    if (rg) {
        out.requires_grad = true;
        std::vector<int> in_ids;
        std::vector<int> in_rows;
        for (const Tensor& p : parts) {
            in_ids.push_back(p.node);
            in_rows.push_back(p.rows());
        }
        out.node = tp->push("concat_rows", m * n, in_ids, nullptr);
        int id = out.node;
        tp->set_pull(id, [id, in_ids, in_rows, n](Tape& t) {
            const double* g = t.grad(id).data();
            int r0 = 0;
            for (std::size_t p = 0; p < in_ids.size(); ++p) {
                if (in_ids[p] >= 0) axpy(t.grad(in_ids[p]), g + r0 * n, in_rows[p] * n);
                r0 += in_rows[p];
            }
        });
    }
    return out;
}

Tensor slice_rows(Tape* tp, const Tensor& a, int r0, int nrows) {
    const int m = a.rows(), n = a.cols();
    if (r0 < 0 || nrows <= 0 || r0 + nrows > m)
        throw std::out_of_range("slice_rows: [" + std::to_string(r0) + ", +" + std::to_string(nrows) + ") of " + shape_str(a.shape));
    Tensor out = make(tp, "slice_rows", {nrows, n}, {&a});
    std::copy_n(a.data->data() + r0 * n, nrows * n, out.data->data());
    if (out.node >= 0) {
        int id = out.node, ia = a.node;
        tp->set_pull(id, [id, ia, r0, nrows, n](Tape& t) {
            const double* g = t.grad(id).data();
            auto& ga = t.grad(ia);
            for (int i = 0; i < nrows * n; ++i) ga[r0 * n + i] += g[i];
        });
    }
    return out;
}

Tensor concat_cols(Tape* tp, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const int m = parts[0].rows();
    int n = 0;
    for (const Tensor& p : parts) {
        if (p.rows() != m) shape_error("concat_cols", parts[0], p);
        n += p.cols();
    }
    Tensor out;
    out.shape = {m, n};
    out.data = alloc(m * n);
    bool rg = false;
    for (const Tensor& p : parts) rg = rg || want(tp, p);
    int c = 0;
    for (const Tensor& p : parts) {
        const int pc = p.cols();
        for (int i = 0; i < m; ++i)
            std::copy_n(p.data->data() + i * pc, pc, out.data->data() + i * n + c);
        c += pc;
    }
    if (rg) {
        out.requires_grad = true;
        std::vector<int> in_ids, in_cols;
        for (const Tensor& p : parts) {
            in_ids.push_back(p.node);
            in_cols.push_back(p.cols());
        }
        out.node = tp->push("concat_cols", m * n, in_ids, nullptr);
        int id = out.node;
        tp->set_pull(id, [id, in_ids, in_cols, m, n](Tape& t) {
            const double* g = t.grad(id).data();
            int c0 = 0;
            for (std::size_t p = 0; p < in_ids.size(); ++p) {
                const int pc = in_cols[p];
                if (in_ids[p] >= 0) {
                    auto& gp = t.grad(in_ids[p]);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < pc; ++j) gp[i * pc + j] += g[i * n + c0 + j];
                }
                c0 += pc;
            }
        });
    }
    return out;
}

Tensor slice_cols(Tape* tp, const Tensor& a, int c0, int ncols) {
    const int m = a.rows(), n = a.cols();
    if (c0 < 0 || ncols <= 0 || c0 + ncols > n)
        throw std::out_of_range("slice_cols: [" + std::to_string(c0) + ", +" + std::to_string(ncols) + ") of " + shape_str(a.shape));
    Tensor out = make(tp, "slice_cols", {m, ncols}, {&a});
    for (int i = 0; i < m; ++i)
        std::copy_n(a.data->data() + i * n + c0, ncols, out.data->data() + i * ncols);
    if (out.node >= 0) {
        int id = out.node, ia = a.node;
        tp->set_pull(id, [id, ia, c0, ncols, m, n](Tape& t) {
            const double* g = t.grad(id).data();
            auto& ga = t.grad(ia);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < ncols; ++j) ga[i * n + c0 + j] += g[i * ncols + j];
        });
    }
    return out;
}

// --- reductions ----------------------------------------------------------

Tensor row_max(Tape* tp, const Tensor& a) {
    const int m = a.rows(), n = a.cols();
    Tensor out = make(tp, "row_max", {m}, {&a});
    auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        int best = 0;
        double bv = a.at(i * n);
        for (int j = 1; j < n; ++j) {
            if (a.at(i * n + j) > bv) {
                bv = a.at(i * n + j);
                best = j;
            }
        }
        (*argmax)[i] = best;
        out.at(i) = bv;
    }
    if (out.node >= 0) {
        int id = out.node, ia = a.node;
        tp->set_pull(id, [id, ia, m, n, argmax](Tape& t) {
            const double* g = t.grad(id).data();
            auto& ga = t.grad(ia);
            for (int i = 0; i < m; ++i) ga[i * n + (*argmax)[i]] += g[i];
        });
    }
    return out;
}

Tensor mean_all(Tape* tp, const Tensor& a) {
    const int n = a.numel();
    Tensor out = make(tp, "mean_all", {1}, {&a});
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += a.at(i);
    out.at(0) = acc / n;
    if (out.node >= 0) {
        int id = out.node, ia = a.node;
        tp->set_pull(id, [id, ia, n](Tape& t) {
            const double g = t.grad(id)[0] / n;
            auto& ga = t.grad(ia);
            for (int i = 0; i < n; ++i) ga[i] += g;
        });
    }
    return out;
}

Tensor sum_all(Tape* tp, const Tensor& a) {
    const int n = a.numel();
    Tensor out = make(tp, "sum_all", {1}, {&a});
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += a.at(i);
    out.at(0) = acc;
    if (out.node >= 0) {
        int id = out.node, ia = a.node;
        tp->set_pull(id, [id, ia, n](Tape& t) {
            const double g = t.grad(id)[0];
            auto& ga = t.grad(ia);
            for (int i = 0; i < n; ++i) ga[i] += g;
        });
    }
    return out;
}

Tensor mse(Tape* tp, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) shape_error("mse", a, b);
    const int n = a.numel();
    Tensor out = make(tp, "mse", {1}, {&a, &b});
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = a.at(i) - b.at(i);
        acc += d * d;
    }
    out.at(0) = acc / n;
    if (out.node >= 0) {
        int id = out.node, ia = a.node, ib = b.node;
        auto da = a.data, db = b.data;
        tp->set_pull(id, [id, ia, ib, n, da, db](Tape& t) {
            const double g = t.grad(id)[0] * 2.0 / n;
            for (int i = 0; i < n; ++i) {
                const double d = ((*da)[i] - (*db)[i]) * g;
                if (ia >= 0) t.grad(ia)[i] += d;
                if (ib >= 0) t.grad(ib)[i] -= d;
            }
        });
    }
    return out;
}

Tensor cross_entropy_logits(Tape* tp, const Tensor& logits, const std::vector<int>& targets) {
    const int L = logits.rows(), v = logits.cols();
    if (static_cast<int>(targets.size()) != L)
        throw std::invalid_argument("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " + std::to_string(L) + " rows");
    for (int t : targets)
        if (t < 0 || t >= v)
            throw std::out_of_range("cross_entropy_logits: target " + std::to_string(t) + " outside vocab of " + std::to_string(v));
    Tensor out = make(tp, "cross_entropy_logits", {1}, {&logits});
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(L) * v);
    double acc = 0.0;
    for (int i = 0; i < L; ++i) {
        const double* xr = logits.data->data() + i * v;
        double rowmax = xr[0];
        for (int j = 1; j < v; ++j) rowmax = std::max(rowmax, xr[j]);
        double sum = 0.0;
        for (int j = 0; j < v; ++j) {
            const double e = std::exp(xr[j] - rowmax);
            (*probs)[i * v + j] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < v; ++j) (*probs)[i * v + j] *= inv;
        acc += std::log(sum) + rowmax - xr[targets[i]];
    }
    out.at(0) = acc / L;
    if (out.node >= 0) {
        int id = out.node, ia = logits.node;
        auto tgt = targets;
        tp->set_pull(id, [id, ia, L, v, probs, tgt](Tape& t) {
            const double g = t.grad(id)[0] / L;
            auto& ga = t.grad(ia);
            for (int i = 0; i < L; ++i) {
                for (int j = 0; j < v; ++j) ga[i * v + j] += g * (*probs)[i * v + j];
                ga[i * v + tgt[i]] -= g;
            }
        });
    }
    return out;
}

Tensor exp_elem(Tape* tp, const Tensor& a) {
    const int n = a.numel();
    Tensor out = make(tp, "exp_elem", a.shape, {&a});
    for (int i = 0; i < n; ++i) out.at(i) = std::exp(a.at(i));
    if (out.node >= 0) {
        int id = out.node, ia = a.node;
        auto dy = out.data;
        tp->set_pull(id, [id, ia, n, dy](Tape& t) {
            const double* g = t.grad(id).data();
            auto& ga = t.grad(ia);
            for (int i = 0; i < n; ++i) ga[i] += g[i] * (*dy)[i];
        });
    }
    return out;
}

Tensor clamp_max(Tape* tp, const Tensor& a, double hi) {
    const int n = a.numel();
    Tensor out = make(tp, "clamp_max", a.shape, {&a});
    for (int i = 0; i < n; ++i) out.at(i) = std::min(a.at(i), hi);
    if (out.node >= 0) {
        int id = out.node, ia = a.node;
        auto da = a.data;
        tp->set_pull(id, [id, ia, n, hi, da](Tape& t) {
            const double* g = t.grad(id).data();
            auto& ga = t.grad(ia);
            for (int i = 0; i < n; ++i)
                if ((*da)[i] <= hi) ga[i] += g[i];
        });
    }
    return out;
}

Tensor l2_normalize_rows(Tape* tp, const Tensor& a) {
    const int m = a.rows(), d = a.cols();
    Tensor out = make(tp, "l2_normalize_rows", a.shape, {&a});
    auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
    static bool warned = false;
    for (int i = 0; i < m; ++i) {
        const double* xr = a.data->data() + i * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += xr[j] * xr[j];
        double norm = std::sqrt(s);
        if (norm < kNormFloor) {
            norm = kNormFloor;
            if (!warned) {
                std::fprintf(stderr, "l2_normalize_rows: zero-norm row floored at %g\n", kNormFloor);
                warned = true;
            }
        }
        (*norms)[i] = norm;
        const double inv = 1.0 / norm;
        for (int j = 0; j < d; ++j) out.at(i * d + j) = xr[j] * inv;
    }
    if (out.node >= 0) {
        int id = out.node, ia = a.node;
        auto dy = out.data;
        tp->set_pull(id, [id, ia, m, d, dy, norms](Tape& t) {
            const double* g = t.grad(id).data();
            auto& ga = t.grad(ia);
            for (int i = 0; i < m; ++i) {
                const double* y = dy->data() + i * d;
                const double* gr = g + i * d;
                double dot = 0.0;
                for (int j = 0; j < d; ++j) dot += y[j] * gr[j];
                const double inv = 1.0 / (*norms)[i];
                for (int j = 0; j < d; ++j) ga[i * d + j] += (gr[j] - y[j] * dot) * inv;
            }
        });
    }
    return out;
}

} // namespace unifusion
