#pragma once

#include <algorithm>
#include <cstdint>
#include <ostream>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "vist/data.hpp"

namespace vist {

struct ConceptNode {
    int image_index = 0;
    std::string word;
    int node_id = 0;
};

// Per-sequence commonsense candidate graph. Node ids are dense, grouped by
// image in order; every image node is linked to exactly its own concepts.
struct CandidateGraph {
    std::string sequence_id;
    int n_images = 0;
    int k = 0;  // configured per-image cap
    std::vector<ConceptNode> nodes;
    std::vector<std::pair<int, int>> edges;         // undirected concept-concept, u < v
    std::vector<std::vector<int>> adjacency;        // concept-concept only
    std::vector<std::pair<int, int>> image_ranges;  // [begin, end) node ids per image

    int node_count() const { return int(nodes.size()); }

    int image_of(int node_id) const { return nodes[std::size_t(node_id)].image_index; }

    std::vector<std::vector<std::string>> concepts_by_image() const {
        std::vector<std::vector<std::string>> out(static_cast<std::size_t>(n_images));
        for (const auto& n : nodes) out[std::size_t(n.image_index)].push_back(n.word);
        return out;
    }

    // Debug edge-list dump: one "u_image:u_concept v_image:v_concept" per line.
    void dump_edges(std::ostream& os) const {
        for (auto [u, v] : edges) {
            const auto& a = nodes[std::size_t(u)];
            const auto& b = nodes[std::size_t(v)];
            os << a.image_index << ":" << a.word << "\t" << b.image_index << ":" << b.word
               << "\n";
        }
    }
};

// Seeds union their 1-hop KB neighbors; seeds keep input order (deduplicated),
// expansion follows sorted. A seed absent from the KB yields just itself.
inline std::vector<std::vector<std::string>> expand_seeds(
    const std::vector<std::vector<std::string>>& seeds, const KnowledgeEdgeList& kb) {
    std::vector<std::vector<std::string>> out;
    out.reserve(seeds.size());
    for (const auto& image_seeds : seeds) {
        std::vector<std::string> raw;
        std::unordered_set<std::string> seen;
        for (const auto& s : image_seeds)
            if (seen.insert(s).second) raw.push_back(s);
        std::vector<std::string> expansion;
        for (const auto& s : image_seeds)
            for (const auto& n : kb.neighbors(s))
                if (!seen.count(n)) {
                    seen.insert(n);
                    expansion.push_back(n);
                }
        std::sort(expansion.begin(), expansion.end());
        raw.insert(raw.end(), expansion.begin(), expansion.end());
        out.push_back(std::move(raw));
    }
    return out;
}

struct FilterOptions {
    std::int64_t min_frequency = 5;
    bool apply_frequency_rule = true;
    bool apply_cooccurrence_rule = true;
};

// The three filtering rules, in order:
//   (1) drop candidates with training frequency < 5 (seeds exempt);
//   (2) drop non-seeds with zero sentence- and story-level co-occurrence with
//       every seed of the image;
//   (3) if more than K survive, keep all seeds and fill the rest by seeded
//       uniform sampling without replacement.
// If everything is filtered out the raw seeds are restored and a warning
// diagnostic is appended.
inline std::vector<std::vector<std::string>> filter_candidates(
    const std::vector<std::vector<std::string>>& raw,
    const std::vector<std::vector<std::string>>& seeds, const CorpusStats& stats, int k,
    std::uint64_t rng_seed, std::vector<std::string>* diagnostics = nullptr,
    const FilterOptions& opt = {}) {
    if (k < 1) throw ConfigError("filter_candidates requires K >= 1");
    std::vector<std::vector<std::string>> out;
    out.reserve(raw.size());
    for (std::size_t img = 0; img < raw.size(); ++img) {
        const auto& image_seeds = seeds[img];
        std::unordered_set<std::string> seed_set(image_seeds.begin(), image_seeds.end());
        std::vector<std::string> survivors;
        for (const auto& c : raw[img]) {
            bool is_seed = seed_set.count(c) != 0;
            if (!is_seed && opt.apply_frequency_rule && stats.freq(c) < opt.min_frequency) continue;
            if (!is_seed && opt.apply_cooccurrence_rule) {
                bool coocs = false;
                for (const auto& s : image_seeds) {
                    if (stats.sent_cooc(c, s) > 0 || stats.story_cooc_count(c, s) > 0) {
                        coocs = true;
                        break;
                    }
                }
                if (!coocs) continue;
            }
            survivors.push_back(c);
        }
        if (survivors.empty()) {
            survivors = image_seeds;
            if (diagnostics)
                diagnostics->push_back("image " + std::to_string(img) +
                                       ": all candidates filtered out, falling back to raw seeds");
        }
        if (int(survivors.size()) > k) {
            std::vector<std::string> kept;
            std::vector<std::string> pool;
            for (const auto& c : survivors)
                (seed_set.count(c) ? kept : pool).push_back(c);
            if (int(kept.size()) > k) kept.resize(std::size_t(k));
            int room = k - int(kept.size());
            if (room > 0) {
                Rng rng = Rng(rng_seed).fork(img);
                auto picks = sample_without_replacement(pool.size(), std::size_t(room), rng);
                std::sort(picks.begin(), picks.end());  // keep original relative order
                for (auto p : picks) kept.push_back(pool[p]);
            }
            survivors = std::move(kept);
        }
        out.push_back(std::move(survivors));
    }
    return out;
}

// Edge rule: (u, v) connected iff the KB relates their concepts and the images
// are identical or adjacent. Identical strings in adjacent images always get
// an identity edge. Image->concept links are implicit in image_ranges.
inline CandidateGraph build_graph(const std::vector<std::vector<std::string>>& filtered,
                                  const KnowledgeEdgeList& kb, int k,
                                  const std::string& sequence_id = "") {
    CandidateGraph g;
    g.sequence_id = sequence_id;
    g.n_images = int(filtered.size());
    g.k = k;
    for (int img = 0; img < g.n_images; ++img) {
        if (filtered[std::size_t(img)].empty())
            throw DataError("image " + std::to_string(img) + " has no candidates");
        int begin = g.node_count();
        for (const auto& c : filtered[std::size_t(img)])
            g.nodes.push_back(ConceptNode{img, c, g.node_count()});
        g.image_ranges.emplace_back(begin, g.node_count());
    }
    g.adjacency.assign(std::size_t(g.node_count()), {});
    for (int u = 0; u < g.node_count(); ++u) {
        for (int v = u + 1; v < g.node_count(); ++v) {
            const auto& a = g.nodes[std::size_t(u)];
            const auto& b = g.nodes[std::size_t(v)];
            int gap = std::abs(a.image_index - b.image_index);
            if (gap > 1) continue;
            bool identity = gap == 1 && a.word == b.word;
            if (!identity && !kb.related(a.word, b.word)) continue;
            g.edges.emplace_back(u, v);
            g.adjacency[std::size_t(u)].push_back(v);
            g.adjacency[std::size_t(v)].push_back(u);
        }
    }
    return g;
}

// ---- graph artifact io (structured text, one graph per line) ----

inline Json graph_to_json(const CandidateGraph& g) {
    Json j;
    j["sequence_id"] = g.sequence_id;
    j["n_images"] = g.n_images;
    j["k"] = g.k;
    Json nodes = Json::array();
    for (const auto& n : g.nodes) nodes.push_back(Json::array({n.image_index, n.word}));
    j["nodes"] = std::move(nodes);
    Json edges = Json::array();
    for (auto [u, v] : g.edges) edges.push_back(Json::array({u, v}));
    j["edges"] = std::move(edges);
    return j;
}

inline CandidateGraph graph_from_json(const Json& j) {
    CandidateGraph g;
    g.sequence_id = j.at("sequence_id").get<std::string>();
    g.n_images = j.at("n_images").get<int>();
    g.k = j.at("k").get<int>();
    int prev_img = -1;
    for (const auto& jn : j.at("nodes")) {
        ConceptNode n;
        n.image_index = jn.at(0).get<int>();
        n.word = jn.at(1).get<std::string>();
        n.node_id = g.node_count();
        if (n.image_index != prev_img) {
            for (int img = prev_img + 1; img <= n.image_index; ++img)
                g.image_ranges.emplace_back(g.node_count(), g.node_count());
            prev_img = n.image_index;
        }
        g.image_ranges.back().second = g.node_count() + 1;
        g.nodes.push_back(std::move(n));
    }
    for (int img = prev_img + 1; img < g.n_images; ++img)
        g.image_ranges.emplace_back(g.node_count(), g.node_count());
    g.adjacency.assign(std::size_t(g.node_count()), {});
    for (const auto& je : j.at("edges")) {
        int u = je.at(0).get<int>(), v = je.at(1).get<int>();
        g.edges.emplace_back(u, v);
        g.adjacency[std::size_t(u)].push_back(v);
        g.adjacency[std::size_t(v)].push_back(u);
    }
    return g;
}

}  // namespace vist
