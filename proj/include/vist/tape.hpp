#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "vist/tensor.hpp"

namespace vist {

// Reverse-mode tape over a fixed op set. Each op records a closure that pulls
// the node's gradient back into its inputs; backward() replays closures in
// reverse creation order. Handles are plain ints into the node array.
template <class T>
class Tape {
  public:
    using Id = int;

    Id leaf(Tensor<T> value, bool requires_grad = false) {
        return push(std::move(value), requires_grad, {});
    }

    const Tensor<T>& val(Id id) const { return nodes_[std::size_t(id)].val; }
    Tensor<T>& grad(Id id) { return ensure_grad(id); }
    bool requires_grad(Id id) const { return nodes_[std::size_t(id)].requires_grad; }
    std::size_t node_count() const { return nodes_.size(); }

    // ---- arithmetic ----

    Id add(Id a, Id b) {
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out.v[i] += vb.v[i];
        return push(std::move(out), requires_grad(a) || requires_grad(b), [this, a, b](const Tensor<T>& g) {
            accumulate(a, g);
            accumulate(b, g);
        });
    }

    Id sub(Id a, Id b) {
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out.v[i] -= vb.v[i];
        return push(std::move(out), requires_grad(a) || requires_grad(b), [this, a, b](const Tensor<T>& g) {
            accumulate(a, g);
            if (needs(b)) {
                Tensor<T>& gb = ensure_grad(b);
                for (std::size_t i = 0; i < g.size(); ++i) gb.v[i] -= g.v[i];
            }
        });
    }

    Id mul(Id a, Id b) {
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out.v[i] *= vb.v[i];
        return push(std::move(out), requires_grad(a) || requires_grad(b), [this, a, b](const Tensor<T>& g) {
            if (needs(a)) {
                Tensor<T>& ga = ensure_grad(a);
                const Tensor<T>& vb2 = val(b);
                for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * vb2.v[i];
            }
            if (needs(b)) {
                Tensor<T>& gb = ensure_grad(b);
                const Tensor<T>& va2 = val(a);
                for (std::size_t i = 0; i < g.size(); ++i) gb.v[i] += g.v[i] * va2.v[i];
            }
        });
    }

    Id scale(Id a, T s) {
        Tensor<T> out = val(a);
        for (auto& x : out.v) x *= s;
        return push(std::move(out), requires_grad(a), [this, a, s](const Tensor<T>& g) {
            if (!needs(a)) return;
            Tensor<T>& ga = ensure_grad(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] += s * g.v[i];
        });
    }

    Id one_minus(Id a) {
        Tensor<T> out = val(a);
        for (auto& x : out.v) x = T(1) - x;
        return push(std::move(out), requires_grad(a), [this, a](const Tensor<T>& g) {
            if (!needs(a)) return;
            Tensor<T>& ga = ensure_grad(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] -= g.v[i];
        });
    }

    // [r x c] + broadcast [1 x c]
    Id add_rowvec(Id a, Id b) {
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        int r = out.rows(), c = out.cols();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) out.at(i, j) += vb.at(0, j);
        return push(std::move(out), requires_grad(a) || requires_grad(b),
                    [this, a, b, r, c](const Tensor<T>& g) {
                        accumulate(a, g);
                        if (needs(b)) {
                            Tensor<T>& gb = ensure_grad(b);
                            for (int i = 0; i < r; ++i)
                                for (int j = 0; j < c; ++j) gb.at(0, j) += g.at(i, j);
                        }
                    });
    }

    // out[i,j] = col[i,0] + row[0,j]
    Id outer_add(Id col, Id row) {
        const Tensor<T>& vc = val(col);
        const Tensor<T>& vr = val(row);
        int r = vc.rows(), c = vr.cols();
        Tensor<T> out({r, c});
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) out.at(i, j) = vc.at(i, 0) + vr.at(0, j);
        return push(std::move(out), requires_grad(col) || requires_grad(row),
                    [this, col, row, r, c](const Tensor<T>& g) {
                        if (needs(col)) {
                            Tensor<T>& gc = ensure_grad(col);
                            for (int i = 0; i < r; ++i) {
                                T s = T(0);
                                for (int j = 0; j < c; ++j) s += g.at(i, j);
                                gc.at(i, 0) += s;
                            }
                        }
                        if (needs(row)) {
                            Tensor<T>& gr = ensure_grad(row);
                            for (int j = 0; j < c; ++j) {
                                T s = T(0);
                                for (int i = 0; i < r; ++i) s += g.at(i, j);
                                gr.at(0, j) += s;
                            }
                        }
                    });
    }

    // ---- matmul ----

    Id matmul(Id a, Id b) {
        const Tensor<T>& va = val(a);
        const Tensor<T>& vb = val(b);
        int m = va.rows(), k = va.cols(), n = vb.cols();
        Tensor<T> out({m, n});
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                T aip = va.at(i, p);
                if (aip == T(0)) continue;
                for (int j = 0; j < n; ++j) out.at(i, j) += aip * vb.at(p, j);
            }
        return push(std::move(out), requires_grad(a) || requires_grad(b),
                    [this, a, b, m, k, n](const Tensor<T>& g) {
                        if (needs(a)) {  // dA += g . B^T
                            Tensor<T>& ga = ensure_grad(a);
                            const Tensor<T>& vb2 = val(b);
                            for (int i = 0; i < m; ++i)
                                for (int p = 0; p < k; ++p) {
                                    T s = T(0);
                                    for (int j = 0; j < n; ++j) s += g.at(i, j) * vb2.at(p, j);
                                    ga.at(i, p) += s;
                                }
                        }
                        if (needs(b)) {  // dB += A^T . g
                            Tensor<T>& gb = ensure_grad(b);
                            const Tensor<T>& va2 = val(a);
                            for (int i = 0; i < m; ++i)
                                for (int p = 0; p < k; ++p) {
                                    T aip = va2.at(i, p);
                                    if (aip == T(0)) continue;
                                    for (int j = 0; j < n; ++j) gb.at(p, j) += aip * g.at(i, j);
                                }
                        }
                    });
    }

    // out = A . B^T   (A [m x d], B [n x d] -> [m x n])
    Id matmul_nt(Id a, Id b) {
        const Tensor<T>& va = val(a);
        const Tensor<T>& vb = val(b);
        int m = va.rows(), d = va.cols(), n = vb.rows();
        Tensor<T> out({m, n});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                T s = T(0);
                for (int p = 0; p < d; ++p) s += va.at(i, p) * vb.at(j, p);
                out.at(i, j) = s;
            }
        return push(std::move(out), requires_grad(a) || requires_grad(b),
                    [this, a, b, m, d, n](const Tensor<T>& g) {
                        if (needs(a)) {  // dA += g . B
                            Tensor<T>& ga = ensure_grad(a);
                            const Tensor<T>& vb2 = val(b);
                            for (int i = 0; i < m; ++i)
                                for (int p = 0; p < d; ++p) {
                                    T s = T(0);
                                    for (int j = 0; j < n; ++j) s += g.at(i, j) * vb2.at(j, p);
                                    ga.at(i, p) += s;
                                }
                        }
                        if (needs(b)) {  // dB += g^T . A
                            Tensor<T>& gb = ensure_grad(b);
                            const Tensor<T>& va2 = val(a);
                            for (int j = 0; j < n; ++j)
                                for (int p = 0; p < d; ++p) {
                                    T s = T(0);
                                    for (int i = 0; i < m; ++i) s += g.at(i, j) * va2.at(i, p);
                                    gb.at(j, p) += s;
                                }
                        }
                    });
    }

    // ---- pointwise nonlinearities ----

    Id sigmoid(Id a) {
        Tensor<T> out = val(a);
        for (auto& x : out.v) x = T(1) / (T(1) + std::exp(-double(x)));
        Id id = push(std::move(out), requires_grad(a), {});
        set_back(id, [this, a, id](const Tensor<T>& g) {
            if (!needs(a)) return;
            Tensor<T>& ga = ensure_grad(a);
            const Tensor<T>& s = val(id);
            for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * s.v[i] * (T(1) - s.v[i]);
        });
        return id;
    }

    Id tanh_(Id a) {
        Tensor<T> out = val(a);
        for (auto& x : out.v) x = T(std::tanh(double(x)));
        Id id = push(std::move(out), requires_grad(a), {});
        set_back(id, [this, a, id](const Tensor<T>& g) {
            if (!needs(a)) return;
            Tensor<T>& ga = ensure_grad(a);
            const Tensor<T>& t = val(id);
            for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * (T(1) - t.v[i] * t.v[i]);
        });
        return id;
    }

    Id leaky_relu(Id a, T slope) {
        Tensor<T> out = val(a);
        for (auto& x : out.v) x = x > T(0) ? x : slope * x;
        return push(std::move(out), requires_grad(a), [this, a, slope](const Tensor<T>& g) {
            if (!needs(a)) return;
            Tensor<T>& ga = ensure_grad(a);
            const Tensor<T>& va = val(a);
            for (std::size_t i = 0; i < g.size(); ++i)
                ga.v[i] += g.v[i] * (va.v[i] > T(0) ? T(1) : slope);
        });
    }

    Id elu(Id a) {
        Tensor<T> out = val(a);
        for (auto& x : out.v) x = x > T(0) ? x : T(std::exp(double(x)) - 1.0);
        Id id = push(std::move(out), requires_grad(a), {});
        set_back(id, [this, a, id](const Tensor<T>& g) {
            if (!needs(a)) return;
            Tensor<T>& ga = ensure_grad(a);
            const Tensor<T>& va = val(a);
            const Tensor<T>& vo = val(id);
            for (std::size_t i = 0; i < g.size(); ++i)
                ga.v[i] += g.v[i] * (va.v[i] > T(0) ? T(1) : vo.v[i] + T(1));
        });
        return id;
    }

    // ---- softmax / losses ----

    // Row-wise softmax; entries where mask==0 get probability exactly 0 and
    // receive no gradient. mask==nullptr means fully unmasked. A row with no
    // unmasked entry stays all-zero.
    Id softmax_rows(Id a, const std::vector<std::uint8_t>* mask = nullptr) {
        const Tensor<T>& va = val(a);
        int r = va.rows(), c = va.cols();
        Tensor<T> out({r, c});
        auto on = [&](int i, int j) { return !mask || (*mask)[std::size_t(i) * c + j] != 0; };
        for (int i = 0; i < r; ++i) {
            T mx = T(0);
            bool any = false;
            for (int j = 0; j < c; ++j)
                if (on(i, j)) {
                    mx = any ? std::max(mx, va.at(i, j)) : va.at(i, j);
                    any = true;
                }
            if (!any) continue;
            T z = T(0);
            for (int j = 0; j < c; ++j)
                if (on(i, j)) {
                    out.at(i, j) = T(std::exp(double(va.at(i, j) - mx)));
                    z += out.at(i, j);
                }
            for (int j = 0; j < c; ++j)
                if (on(i, j)) out.at(i, j) /= z;
        }
        std::vector<std::uint8_t> mcopy;
        if (mask) mcopy = *mask;
        Id id = push(std::move(out), requires_grad(a), {});
        set_back(id, [this, a, id, r, c, mcopy = std::move(mcopy)](const Tensor<T>& g) {
            if (!needs(a)) return;
            Tensor<T>& ga = ensure_grad(a);
            const Tensor<T>& p = val(id);
            auto on = [&](int i, int j) { return mcopy.empty() || mcopy[std::size_t(i) * c + j] != 0; };
            for (int i = 0; i < r; ++i) {
                T dot = T(0);
                for (int j = 0; j < c; ++j)
                    if (on(i, j)) dot += g.at(i, j) * p.at(i, j);
                for (int j = 0; j < c; ++j)
                    if (on(i, j)) ga.at(i, j) += p.at(i, j) * (g.at(i, j) - dot);
            }
        });
        return id;
    }

    // Fused masked-softmax cross entropy for (possibly multi-hot) targets:
    //   L = -sum_j y_j log softmax(z)_j  over unmasked j.
    // Returns a [1 x 1] scalar node. y must be zero on masked entries.
    Id xent_softmax_row(Id scores, const std::vector<std::uint8_t>& mask, const std::vector<T>& y) {
        const Tensor<T>& z = val(scores);
        int c = z.cols();
        T mx = T(0);
        bool any = false;
        for (int j = 0; j < c; ++j)
            if (mask[j]) {
                mx = any ? std::max(mx, z.at(0, j)) : z.at(0, j);
                any = true;
            }
        std::vector<T> p(std::size_t(c), T(0));
        T zsum = T(0);
        if (any) {
            for (int j = 0; j < c; ++j)
                if (mask[j]) {
                    p[j] = T(std::exp(double(z.at(0, j) - mx)));
                    zsum += p[j];
                }
            for (int j = 0; j < c; ++j) p[j] /= zsum;
        }
        T loss = T(0), ysum = T(0);
        for (int j = 0; j < c; ++j)
            if (y[j] != T(0)) {
                loss -= y[j] * T(std::log(std::max(double(p[j]), 1e-300)));
                ysum += y[j];
            }
        Tensor<T> out({1, 1});
        out.v[0] = loss;
        return push(std::move(out), requires_grad(scores),
                    [this, scores, c, mask, y, p = std::move(p), ysum](const Tensor<T>& g) {
                        if (!needs(scores)) return;
                        Tensor<T>& gz = ensure_grad(scores);
                        T go = g.v[0];
                        for (int j = 0; j < c; ++j)
                            if (mask[j]) gz.at(0, j) += go * (ysum * p[j] - y[j]);
                    });
    }

    // Sum of squared differences against a constant target.
    Id sse_vs(Id a, Tensor<T> target) {
        const Tensor<T>& va = val(a);
        T s = T(0);
        for (std::size_t i = 0; i < va.size(); ++i) {
            T d = va.v[i] - target.v[i];
            s += d * d;
        }
        Tensor<T> out({1, 1});
        out.v[0] = s;
        return push(std::move(out), requires_grad(a),
                    [this, a, target = std::move(target)](const Tensor<T>& g) {
                        if (!needs(a)) return;
                        Tensor<T>& ga = ensure_grad(a);
                        const Tensor<T>& va2 = val(a);
                        for (std::size_t i = 0; i < va2.size(); ++i)
                            ga.v[i] += g.v[0] * T(2) * (va2.v[i] - target.v[i]);
                    });
    }

    // Multi-label binary cross entropy with logits, summed over entries.
    Id bce_logits_vs(Id z, Tensor<T> y) {
        const Tensor<T>& vz = val(z);
        T s = T(0);
        for (std::size_t i = 0; i < vz.size(); ++i) {
            double x = double(vz.v[i]);
            s += T(std::max(x, 0.0) - x * double(y.v[i]) + std::log1p(std::exp(-std::abs(x))));
        }
        Tensor<T> out({1, 1});
        out.v[0] = s;
        return push(std::move(out), requires_grad(z), [this, z, y = std::move(y)](const Tensor<T>& g) {
            if (!needs(z)) return;
            Tensor<T>& gz = ensure_grad(z);
            const Tensor<T>& vz2 = val(z);
            for (std::size_t i = 0; i < vz2.size(); ++i) {
                T sig = T(1) / (T(1) + T(std::exp(-double(vz2.v[i]))));
                gz.v[i] += g.v[0] * (sig - y.v[i]);
            }
        });
    }

    // ---- shape ops ----

    Id gather_rows(Id table, std::vector<int> idx) {
        const Tensor<T>& t = val(table);
        int c = t.cols();
        Tensor<T> out({int(idx.size()), c});
        for (std::size_t k = 0; k < idx.size(); ++k)
            for (int j = 0; j < c; ++j) out.at(int(k), j) = t.at(idx[k], j);
        return push(std::move(out), requires_grad(table),
                    [this, table, idx = std::move(idx), c](const Tensor<T>& g) {
                        if (!needs(table)) return;
                        Tensor<T>& gt = ensure_grad(table);
                        for (std::size_t k = 0; k < idx.size(); ++k)
                            for (int j = 0; j < c; ++j) gt.at(idx[k], j) += g.at(int(k), j);
                    });
    }

    Id slice_rows(Id a, int r0, int r1) {
        const Tensor<T>& va = val(a);
        int c = va.cols();
        Tensor<T> out({r1 - r0, c});
        for (int i = r0; i < r1; ++i)
            for (int j = 0; j < c; ++j) out.at(i - r0, j) = va.at(i, j);
        return push(std::move(out), requires_grad(a), [this, a, r0, r1, c](const Tensor<T>& g) {
            if (!needs(a)) return;
            Tensor<T>& ga = ensure_grad(a);
            for (int i = r0; i < r1; ++i)
                for (int j = 0; j < c; ++j) ga.at(i, j) += g.at(i - r0, j);
        });
    }

    Id concat_rows(const std::vector<Id>& parts) {
        int c = val(parts[0]).cols();
        int r = 0;
        bool rg = false;
        for (Id p : parts) {
            r += val(p).rows();
            rg = rg || requires_grad(p);
        }
        Tensor<T> out({r, c});
        int off = 0;
        for (Id p : parts) {
            const Tensor<T>& vp = val(p);
            for (int i = 0; i < vp.rows(); ++i)
                for (int j = 0; j < c; ++j) out.at(off + i, j) = vp.at(i, j);
            off += vp.rows();
        }
        return push(std::move(out), rg, [this, parts, c](const Tensor<T>& g) {
            int off2 = 0;
            for (Id p : parts) {
                int rp = val(p).rows();
                if (needs(p)) {
                    Tensor<T>& gp = ensure_grad(p);
                    for (int i = 0; i < rp; ++i)
                        for (int j = 0; j < c; ++j) gp.at(i, j) += g.at(off2 + i, j);
                }
                off2 += rp;
            }
        });
    }

    Id concat_cols(const std::vector<Id>& parts) {
        int r = val(parts[0]).rows();
        int c = 0;
        bool rg = false;
        for (Id p : parts) {
            c += val(p).cols();
            rg = rg || requires_grad(p);
        }
        Tensor<T> out({r, c});
        int off = 0;
        for (Id p : parts) {
            const Tensor<T>& vp = val(p);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < vp.cols(); ++j) out.at(i, off + j) = vp.at(i, j);
            off += vp.cols();
        }
        return push(std::move(out), rg, [this, parts, r](const Tensor<T>& g) {
            int off2 = 0;
            for (Id p : parts) {
                int cp = val(p).cols();
                if (needs(p)) {
                    Tensor<T>& gp = ensure_grad(p);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < cp; ++j) gp.at(i, j) += g.at(i, off2 + j);
                }
                off2 += cp;
            }
        });
    }

    Id mean_rows(Id a) {
        const Tensor<T>& va = val(a);
        int r = va.rows(), c = va.cols();
        Tensor<T> out({1, c});
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) out.at(0, j) += va.at(i, j) / T(r);
        return push(std::move(out), requires_grad(a), [this, a, r, c](const Tensor<T>& g) {
            if (!needs(a)) return;
            Tensor<T>& ga = ensure_grad(a);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) ga.at(i, j) += g.at(0, j) / T(r);
        });
    }

    Id sum_all(Id a) {
        const Tensor<T>& va = val(a);
        Tensor<T> out({1, 1});
        for (T x : va.v) out.v[0] += x;
        return push(std::move(out), requires_grad(a), [this, a](const Tensor<T>& g) {
            if (!needs(a)) return;
            Tensor<T>& ga = ensure_grad(a);
            for (auto& x : ga.v) x += g.v[0];
        });
    }

    // ---- backward ----

    void backward(Id loss) {
        if (val(loss).size() != 1) throw NumericError("backward from non-scalar node");
        ensure_grad(loss).v[0] = T(1);
        for (int i = loss; i >= 0; --i) {
            Node& n = nodes_[std::size_t(i)];
            if (!n.back || n.grad.v.empty()) continue;
            n.back(n.grad);
        }
    }

  private:
    struct Node {
        Tensor<T> val;
        Tensor<T> grad;  // lazily allocated, zero-initialized
        bool requires_grad = false;
        std::function<void(const Tensor<T>&)> back;
    };

    std::vector<Node> nodes_;

    Id push(Tensor<T> v, bool rg, std::function<void(const Tensor<T>&)> back) {
        Node n;
        n.val = std::move(v);
        n.requires_grad = rg;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Id(nodes_.size() - 1);
    }

    void set_back(Id id, std::function<void(const Tensor<T>&)> back) {
        nodes_[std::size_t(id)].back = std::move(back);
    }

    bool needs(Id id) const { return nodes_[std::size_t(id)].requires_grad; }

    Tensor<T>& ensure_grad(Id id) {
        Node& n = nodes_[std::size_t(id)];
        if (n.grad.v.empty()) n.grad = Tensor<T>(n.val.shape);
        return n.grad;
    }

    void accumulate(Id id, const Tensor<T>& g) {
        if (!needs(id)) return;
        Tensor<T>& gi = ensure_grad(id);
        for (std::size_t i = 0; i < g.size(); ++i) gi.v[i] += g.v[i];
    }
};

}  // namespace vist
