#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "vist/clique.hpp"
#include "vist/planner.hpp"

namespace vist {

// Correlation maps of one sequence. m_c is n_nodes x n_nodes; m_i is stored
// padded [N x K_max] with k_per_image giving the valid column count per row.
template <class T>
struct CorrelationMaps {
    Tensor<T> m_c;
    Tensor<T> m_i;
    std::vector<int> k_per_image;
};

template <class T>
struct TargetMaps {
    Tensor<T> m_c;
    Tensor<T> m_i;
    std::vector<int> k_per_image;
};

template <class T>
struct CliqueScore {
    T s = T(0), s_c = T(0), s_i = T(0);
};

template <class T>
struct CliquePlan {
    std::vector<int> members;                       // node ids, sorted
    std::vector<std::vector<std::string>> by_image; // C_P^i partitions
    CliqueScore<T> score;
    double tau = 0;
    bool exited_above_floor = false;
    std::string fallback;  // empty, "floor-any-size" or "per-image-argmax"
};

struct TauPolicy {
    double start = 0.3;
    double step = 0.02;
    double floor = 0.05;
    int min_cliques = 5;
    int min_size = 7;
    int max_size = 15;
    std::size_t clique_cap = 100000;
};

// ---- parameters and forward pass ----

template <class T>
void ensure_mcsm(ParamStore<T>& store, const PlannerCore<T>& core, int d_corr, Rng& rng) {
    int d_emb = core.gat_cfg.d_emb;
    int d_h = core.enc_cfg.d_h;
    store.init("mcsm.w_a", {d_emb, d_corr}, [&] { return Tensor<T>::glorot(d_emb, d_corr, rng); });
    store.init("mcsm.w_b", {d_emb, d_corr}, [&] { return Tensor<T>::glorot(d_emb, d_corr, rng); });
    store.init("mcsm.image_proj", {d_h, d_corr}, [&] { return Tensor<T>::glorot(d_h, d_corr, rng); });
    store.init("mcsm.w_d", {d_emb, d_corr}, [&] { return Tensor<T>::glorot(d_emb, d_corr, rng); });
}

template <class T>
struct CorrelationIds {
    typename Tape<T>::Id m_c;
    std::vector<typename Tape<T>::Id> m_i_rows;  // [1 x k_i] per image
};

// M_C[i,j] = sigmoid(<W_a v_i, W_b v_j>); M_I[i,j] = sigmoid(<W_c I_i, W_d v_ij>).
template <class T>
CorrelationIds<T> correlation_maps_t(Tape<T>& tape, TapeBind<T>& P, const CandidateGraph& graph,
                                     typename Tape<T>::Id concept_feats,
                                     typename Tape<T>::Id encoded) {
    CorrelationIds<T> out;
    auto a = tape.matmul(concept_feats, P("mcsm.w_a"));
    auto b = tape.matmul(concept_feats, P("mcsm.w_b"));
    out.m_c = tape.sigmoid(tape.matmul_nt(a, b));
    auto img = tape.matmul(encoded, P("mcsm.image_proj"));
    auto q = tape.matmul(concept_feats, P("mcsm.w_d"));
    for (int i = 0; i < graph.n_images; ++i) {
        auto [lo, hi] = graph.image_ranges[std::size_t(i)];
        auto qi = tape.slice_rows(q, lo, hi);
        auto pi = tape.slice_rows(img, i, i + 1);
        out.m_i_rows.push_back(tape.sigmoid(tape.matmul_nt(pi, qi)));
    }
    return out;
}

template <class T>
CorrelationMaps<T> correlation_maps(ParamStore<T>& store, const PlannerCore<T>& core,
                                    const CandidateGraph& graph, const SequenceRecord& rec) {
    Tape<T> tape;
    TapeBind<T> P(tape, store);
    auto fwd = core.forward_t(tape, P, graph, rec);
    auto ids = correlation_maps_t(tape, P, graph, fwd.features, fwd.encoded);
    CorrelationMaps<T> maps;
    maps.m_c = tape.val(ids.m_c);
    check_finite(maps.m_c, "correlation map M_C");
    int kmax = 0;
    for (auto [lo, hi] : graph.image_ranges) kmax = std::max(kmax, hi - lo);
    maps.m_i = Tensor<T>({graph.n_images, kmax});
    for (int i = 0; i < graph.n_images; ++i) {
        const auto& row = tape.val(ids.m_i_rows[std::size_t(i)]);
        maps.k_per_image.push_back(row.cols());
        for (int j = 0; j < row.cols(); ++j) maps.m_i.at(i, j) = row.at(0, j);
    }
    check_finite(maps.m_i, "correlation map M_I");
    return maps;
}

// ---- targets (Eq. 4 indicator semantics) ----

template <class T>
TargetMaps<T> target_maps(const CandidateGraph& graph, const GoldSets& gold) {
    TargetMaps<T> t;
    int n = graph.node_count();
    t.m_c = Tensor<T>({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            t.m_c.at(i, j) = gold.node_in_ct[std::size_t(i)] && gold.node_in_ct[std::size_t(j)]
                                 ? T(1)
                                 : T(0);
    int kmax = 0;
    for (auto [lo, hi] : graph.image_ranges) kmax = std::max(kmax, hi - lo);
    t.m_i = Tensor<T>({graph.n_images, kmax});
    for (int i = 0; i < graph.n_images; ++i) {
        auto [lo, hi] = graph.image_ranges[std::size_t(i)];
        t.k_per_image.push_back(hi - lo);
        for (int node : gold.per_image_nodes[std::size_t(i)]) t.m_i.at(i, node - lo) = T(1);
    }
    return t;
}

// ---- loss (Eq. 5): lambda1 ||M_C - target||_F^2 + lambda2 ||M_I - target||_F^2 ----

template <class T>
T mcsm_loss(const CorrelationMaps<T>& maps, const TargetMaps<T>& targets, T lambda1, T lambda2) {
    if (lambda1 < T(0) || lambda2 < T(0)) throw ConfigError("mcsm loss weights must be >= 0");
    T lc = T(0);
    for (std::size_t i = 0; i < maps.m_c.size(); ++i) {
        T d = maps.m_c.v[i] - targets.m_c.v[i];
        lc += d * d;
    }
    T li = T(0);
    for (int i = 0; i < maps.m_i.rows(); ++i)
        for (int j = 0; j < maps.k_per_image[std::size_t(i)]; ++j) {
            T d = maps.m_i.at(i, j) - targets.m_i.at(i, j);
            li += d * d;
        }
    return lambda1 * lc + lambda2 * li;
}

template <class T>
typename Tape<T>::Id mcsm_loss_t(Tape<T>& tape, const CorrelationIds<T>& ids,
                                 const TargetMaps<T>& targets, T lambda1, T lambda2) {
    auto lc = tape.sse_vs(ids.m_c, targets.m_c);
    typename Tape<T>::Id li = tape.leaf(Tensor<T>({1, 1}));
    for (std::size_t i = 0; i < ids.m_i_rows.size(); ++i) {
        Tensor<T> row({1, targets.k_per_image[i]});
        for (int j = 0; j < targets.k_per_image[i]; ++j) row.at(0, j) = targets.m_i.at(int(i), j);
        li = tape.add(li, tape.sse_vs(ids.m_i_rows[i], std::move(row)));
    }
    return tape.add(tape.scale(lc, lambda1), tape.scale(li, lambda2));
}

// ---- pruning: min-symmetrized threshold ----

// Edge (i, j) kept iff min(M_C[i,j], M_C[j,i]) >= tau; no self-edges.
template <class T>
UndirectedGraph prune_graph(const Tensor<T>& m_c, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0,1)");
    int n = m_c.rows();
    UndirectedGraph g(n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (double(std::min(m_c.at(i, j), m_c.at(j, i))) >= tau) g.add_edge(i, j);
    return g;
}

// ---- scoring (Eq. 6) ----

// s_C averages log M_C over ordered in-clique pairs; s_I sums log M_I of the
// clique members grouped by image, divided by |C_P|. Logs clamp at 1e-8;
// singleton cliques define s_C = 0.
template <class T>
CliqueScore<T> score_clique(const std::vector<int>& members, const Tensor<T>& m_c,
                            const Tensor<T>& m_i, const CandidateGraph& graph) {
    constexpr double kEps = 1e-8;
    CliqueScore<T> out;
    std::size_t m = members.size();
    if (m == 0) throw ConfigError("score_clique requires at least one member");
    if (m >= 2) {
        double acc = 0;
        for (int u : members)
            for (int v : members) {
                if (u == v) continue;
                acc += std::log(std::max(double(m_c.at(u, v)), kEps));
            }
        out.s_c = T(acc / (double(m - 1) * double(m)));
    }
    double acc_i = 0;
    for (int node : members) {
        int img = graph.image_of(node);
        int col = node - graph.image_ranges[std::size_t(img)].first;
        acc_i += std::log(std::max(double(m_i.at(img, col)), kEps));
    }
    out.s_i = T(acc_i / double(m));
    out.s = out.s_c + out.s_i;
    return out;
}

// ---- tau search (section 4.4 procedure with total fallbacks) ----

template <class T>
CliquePlan<T> plan_from_members(std::vector<int> members, const CorrelationMaps<T>& maps,
                                const CandidateGraph& graph) {
    CliquePlan<T> plan;
    std::sort(members.begin(), members.end());
    plan.score = score_clique(members, maps.m_c, maps.m_i, graph);
    plan.by_image.assign(std::size_t(graph.n_images), {});
    for (int node : members)
        plan.by_image[std::size_t(graph.image_of(node))].push_back(
            graph.nodes[std::size_t(node)].word);
    plan.members = std::move(members);
    return plan;
}

// Lower tau beats: pick max s; ties go to the lexicographically smallest
// sorted member list.
template <class T>
const std::vector<int>* best_clique(const std::vector<std::vector<int>>& cliques,
                                    const CorrelationMaps<T>& maps, const CandidateGraph& graph,
                                    CliqueScore<T>* score_out) {
    const std::vector<int>* best = nullptr;
    CliqueScore<T> best_score;
    for (const auto& c : cliques) {
        auto sc = score_clique(c, maps.m_c, maps.m_i, graph);
        if (!best || sc.s > best_score.s || (sc.s == best_score.s && c < *best)) {
            best = &c;
            best_score = sc;
        }
    }
    if (best && score_out) *score_out = best_score;
    return best;
}

template <class T>
CliquePlan<T> tau_search(const CorrelationMaps<T>& maps, const CandidateGraph& graph,
                         const TauPolicy& policy = {},
                         std::vector<std::string>* diagnostics = nullptr) {
    std::vector<double> ladder;
    for (double tau = policy.start; tau > policy.floor + 1e-12; tau -= policy.step)
        ladder.push_back(tau);
    ladder.push_back(policy.floor);

    std::vector<std::vector<int>> floor_cliques;
    bool floor_enumerated = false;
    for (double tau : ladder) {
        std::vector<std::vector<int>> cliques;
        try {
            cliques = enumerate_maximal_cliques(prune_graph(maps.m_c, tau), policy.clique_cap);
        } catch (const ResourceError& e) {
            if (diagnostics)
                diagnostics->push_back("tau=" + std::to_string(tau) + ": " + e.what());
            continue;
        }
        if (tau == policy.floor) {
            floor_cliques = cliques;
            floor_enumerated = true;
        }
        std::vector<std::vector<int>> qualifying;
        for (auto& c : cliques)
            if (int(c.size()) >= policy.min_size && int(c.size()) <= policy.max_size)
                qualifying.push_back(std::move(c));
        if (int(qualifying.size()) >= policy.min_cliques) {
            CliqueScore<T> sc;
            const auto* best = best_clique(qualifying, maps, graph, &sc);
            auto plan = plan_from_members(*best, maps, graph);
            plan.tau = tau;
            plan.exited_above_floor = tau > policy.floor + 1e-12;
            return plan;
        }
    }

    // Floor fallback: the best clique of any size >= 2 at the floor tau.
    if (floor_enumerated) {
        std::vector<std::vector<int>> sized;
        for (auto& c : floor_cliques)
            if (c.size() >= 2) sized.push_back(std::move(c));
        if (!sized.empty()) {
            CliqueScore<T> sc;
            const auto* best = best_clique(sized, maps, graph, &sc);
            auto plan = plan_from_members(*best, maps, graph);
            plan.tau = policy.floor;
            plan.fallback = "floor-any-size";
            return plan;
        }
    }

    // Final fallback: per-image argmax of M_I, one concept per image.
    std::vector<int> members;
    for (int i = 0; i < graph.n_images; ++i) {
        auto [lo, hi] = graph.image_ranges[std::size_t(i)];
        int best = lo;
        for (int node = lo + 1; node < hi; ++node)
            if (maps.m_i.at(i, node - lo) > maps.m_i.at(i, best - lo)) best = node;
        members.push_back(best);
    }
    auto plan = plan_from_members(std::move(members), maps, graph);
    plan.tau = policy.floor;
    plan.fallback = "per-image-argmax";
    if (diagnostics) diagnostics->push_back("tau search fell back to per-image argmax");
    return plan;
}

}  // namespace vist
