#pragma once

#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "vist/data.hpp"
#include "vist/graph.hpp"
#include "vist/nn.hpp"

namespace vist {

// Concept vocabulary over all training candidate strings; index 0 is <unk>
// for concepts never seen in training graphs.
struct ConceptVocab {
    std::vector<std::string> words{"<unk>"};
    std::unordered_map<std::string, int> index;

    static ConceptVocab build(const std::vector<CandidateGraph>& graphs) {
        std::set<std::string> uniq;
        for (const auto& g : graphs)
            for (const auto& n : g.nodes) uniq.insert(n.word);
        ConceptVocab v;
        for (const auto& w : uniq) {
            v.index.emplace(w, int(v.words.size()));
            v.words.push_back(w);
        }
        return v;
    }

    int id(const std::string& w) const {
        auto it = index.find(w);
        return it == index.end() ? 0 : it->second;
    }

    int size() const { return int(words.size()); }
};

// Supervision sets for one (sequence, gold story) pair.
//   story_level: C_T = C_S n C_G, string level;
//   per_image_nodes: node ids whose word appears in sentence i of the story;
//   node_in_ct: node-level view of story_level membership.
struct GoldSets {
    std::set<std::string> story_level;
    std::vector<std::vector<int>> per_image_nodes;
    std::vector<bool> node_in_ct;
};

inline GoldSets gold_sets(const CandidateGraph& graph, const SequenceRecord& record,
                          std::size_t story_index, const std::set<std::string>& stopwords) {
    const GoldStory& story = record.gold_stories.at(story_index);
    std::set<std::string> cg = gold_concepts(story, stopwords);
    GoldSets out;
    out.per_image_nodes.assign(std::size_t(graph.n_images), {});
    out.node_in_ct.assign(std::size_t(graph.node_count()), false);
    std::vector<std::set<std::string>> sent_words;
    for (int i = 0; i < graph.n_images; ++i)
        sent_words.push_back(gold_concepts_for_image(story, i, stopwords));
    for (const auto& n : graph.nodes) {
        if (cg.count(n.word)) {
            out.story_level.insert(n.word);
            out.node_in_ct[std::size_t(n.node_id)] = true;
        }
        if (sent_words[std::size_t(n.image_index)].count(n.word))
            out.per_image_nodes[std::size_t(n.image_index)].push_back(n.node_id);
    }
    return out;
}

// Shared trainable front end of both planners: concept embedding table,
// image sequence encoder and the two-layer GAT.
template <class T>
struct PlannerCore {
    EncoderConfig<T> enc_cfg;
    GatConfig<T> gat_cfg;
    ConceptVocab vocab;

    void ensure(ParamStore<T>& store, Rng& rng) const {
        store.init("emb.table", {vocab.size(), gat_cfg.d_emb},
                   [&] { return Tensor<T>::randn(vocab.size(), gat_cfg.d_emb, rng, T(0.1)); });
        ensure_encoder(store, "enc", enc_cfg, rng);
        ensure_gat(store, "gat", gat_cfg, rng);
    }

    // Optionally seed embedding rows from a pretrained token->vector file.
    void load_pretrained(ParamStore<T>& store,
                         const std::unordered_map<std::string, std::vector<double>>& emb) const {
        Tensor<T>& table = store.get("emb.table");
        for (int i = 1; i < vocab.size(); ++i) {
            auto it = emb.find(vocab.words[std::size_t(i)]);
            if (it == emb.end()) continue;
            if (int(it->second.size()) != gat_cfg.d_emb)
                throw SchemaError("pretrained embedding width mismatch for " +
                                  vocab.words[std::size_t(i)]);
            for (int j = 0; j < gat_cfg.d_emb; ++j) table.at(i, j) = T(it->second[std::size_t(j)]);
        }
    }

    Tensor<T> feature_matrix(const SequenceRecord& rec) const {
        int n = rec.n_images();
        Tensor<T> f({n, enc_cfg.d_img});
        for (int i = 0; i < n; ++i) {
            if (int(rec.images[std::size_t(i)].feature.size()) != enc_cfg.d_img)
                throw SchemaError("record feature dimension mismatch");
            for (int j = 0; j < enc_cfg.d_img; ++j)
                f.at(i, j) = T(rec.images[std::size_t(i)].feature[std::size_t(j)]);
        }
        return f;
    }

    struct Forward {
        typename Tape<T>::Id encoded;   // [N x D_h]
        typename Tape<T>::Id features;  // [n_nodes x D_emb], GAT-updated
    };

    Forward forward_t(Tape<T>& tape, TapeBind<T>& P, const CandidateGraph& graph,
                      const SequenceRecord& rec) const {
        auto feats = tape.leaf(feature_matrix(rec));
        auto enc = encode_images_t(tape, P, "enc", enc_cfg, feats);
        std::vector<int> ids;
        ids.reserve(std::size_t(graph.node_count()));
        for (const auto& n : graph.nodes) ids.push_back(vocab.id(n.word));
        auto emb0 = tape.gather_rows(P("emb.table"), std::move(ids));
        auto updated = gat_update_t(tape, P, "gat", gat_cfg, graph, emb0, enc);
        return {enc, updated};
    }
};

}  // namespace vist
