#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "vist/common.hpp"

namespace vist {

// Fixed-capacity bitset sized at runtime; enough for clique work on NK nodes.
class NodeSet {
  public:
    NodeSet() = default;
    explicit NodeSet(int n) : n_(n), words_((std::size_t(n) + 63) / 64, 0) {}

    void set(int i) { words_[std::size_t(i) >> 6] |= 1ULL << (i & 63); }
    void reset(int i) { words_[std::size_t(i) >> 6] &= ~(1ULL << (i & 63)); }
    bool test(int i) const { return (words_[std::size_t(i) >> 6] >> (i & 63)) & 1ULL; }

    bool empty() const {
        for (auto w : words_)
            if (w) return false;
        return true;
    }

    int count() const {
        int c = 0;
        for (auto w : words_) c += __builtin_popcountll(w);
        return c;
    }

    NodeSet intersect(const NodeSet& o) const {
        NodeSet r(n_);
        for (std::size_t i = 0; i < words_.size(); ++i) r.words_[i] = words_[i] & o.words_[i];
        return r;
    }

    int intersect_count(const NodeSet& o) const {
        int c = 0;
        for (std::size_t i = 0; i < words_.size(); ++i)
            c += __builtin_popcountll(words_[i] & o.words_[i]);
        return c;
    }

    template <class Fn>
    void for_each(Fn&& fn) const {
        for (std::size_t wi = 0; wi < words_.size(); ++wi) {
            std::uint64_t w = words_[wi];
            while (w) {
                int b = __builtin_ctzll(w);
                fn(int(wi * 64) + b);
                w &= w - 1;
            }
        }
    }

    std::vector<int> to_vector() const {
        std::vector<int> out;
        for_each([&](int i) { out.push_back(i); });
        return out;
    }

  private:
    int n_ = 0;
    std::vector<std::uint64_t> words_;
};

// Simple undirected graph as adjacency bitsets.
struct UndirectedGraph {
    int n = 0;
    std::vector<NodeSet> adj;

    explicit UndirectedGraph(int n_nodes = 0) : n(n_nodes), adj(std::size_t(n_nodes), NodeSet(n_nodes)) {}

    void add_edge(int u, int v) {
        if (u == v) return;
        adj[std::size_t(u)].set(v);
        adj[std::size_t(v)].set(u);
    }

    bool has_edge(int u, int v) const { return adj[std::size_t(u)].test(v); }

    int degree(int u) const { return adj[std::size_t(u)].count(); }
};

// Smallest-last (degeneracy) vertex ordering.
inline std::vector<int> degeneracy_order(const UndirectedGraph& g) {
    std::vector<int> deg(std::size_t(g.n));
    std::vector<bool> removed(std::size_t(g.n), false);
    for (int i = 0; i < g.n; ++i) deg[std::size_t(i)] = g.degree(i);
    std::vector<int> order;
    order.reserve(std::size_t(g.n));
    for (int step = 0; step < g.n; ++step) {
        int best = -1;
        for (int i = 0; i < g.n; ++i)
            if (!removed[std::size_t(i)] && (best < 0 || deg[std::size_t(i)] < deg[std::size_t(best)]))
                best = i;
        removed[std::size_t(best)] = true;
        order.push_back(best);
        g.adj[std::size_t(best)].for_each([&](int v) {
            if (!removed[std::size_t(v)]) --deg[std::size_t(v)];
        });
    }
    return order;
}

namespace detail {

// Bron-Kerbosch with pivoting on P u X (max |P n N(pivot)|).
inline void bron_kerbosch_pivot(const UndirectedGraph& g, NodeSet& r, NodeSet p, NodeSet x,
                                std::vector<std::vector<int>>& out, std::size_t cap) {
    if (p.empty() && x.empty()) {
        if (out.size() >= cap)
            throw ResourceError("maximal clique count exceeded cap of " + std::to_string(cap));
        out.push_back(r.to_vector());
        return;
    }
    int pivot = -1, best = -1;
    auto consider = [&](int u) {
        int c = p.intersect_count(g.adj[std::size_t(u)]);
        if (c > best) {
            best = c;
            pivot = u;
        }
    };
    p.for_each(consider);
    x.for_each(consider);
    std::vector<int> branch;
    p.for_each([&](int v) {
        if (!g.adj[std::size_t(pivot)].test(v)) branch.push_back(v);
    });
    for (int v : branch) {
        r.set(v);
        bron_kerbosch_pivot(g, r, p.intersect(g.adj[std::size_t(v)]), x.intersect(g.adj[std::size_t(v)]),
                            out, cap);
        r.reset(v);
        p.reset(v);
        x.set(v);
    }
}

}  // namespace detail

// All maximal cliques, each exactly once, members sorted ascending; the outer
// loop follows a degeneracy ordering, recursion uses pivoting. Throws
// ResourceError past the cap.
inline std::vector<std::vector<int>> enumerate_maximal_cliques(const UndirectedGraph& g,
                                                               std::size_t cap = 100000) {
    std::vector<std::vector<int>> out;
    if (g.n == 0) return out;
    auto order = degeneracy_order(g);
    std::vector<int> pos(std::size_t(g.n));
    for (int i = 0; i < g.n; ++i) pos[std::size_t(order[std::size_t(i)])] = i;
    for (int i = 0; i < g.n; ++i) {
        int v = order[std::size_t(i)];
        NodeSet p(g.n), x(g.n), r(g.n);
        g.adj[std::size_t(v)].for_each([&](int u) {
            if (pos[std::size_t(u)] > i)
                p.set(u);
            else
                x.set(u);
        });
        r.set(v);
        detail::bron_kerbosch_pivot(g, r, std::move(p), std::move(x), out, cap);
    }
    for (auto& c : out) std::sort(c.begin(), c.end());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace vist
