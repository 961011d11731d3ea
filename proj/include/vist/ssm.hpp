#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "vist/planner.hpp"

namespace vist {

// Decoder state of the sequential selector. The mask marks already selected
// candidates; a masked candidate can never be selected again. The end token
// occupies slot n_candidates and is never masked.
template <class T>
struct SsmState {
    Tensor<T> hidden;                 // [1 x D_h]
    std::vector<int> selected;        // candidate node ids in selection order
    std::vector<std::uint8_t> mask;   // per candidate: 1 = still available
};

struct SelectionResult {
    std::vector<std::vector<std::string>> by_image;  // selection order within image
    std::vector<int> node_ids;                       // global selection order
};

template <class T>
void ensure_ssm(ParamStore<T>& store, const PlannerCore<T>& core, int d_att, Rng& rng) {
    int d_emb = core.gat_cfg.d_emb;
    int d_h = core.enc_cfg.d_h;
    ensure_gru(store, "ssm.gru", d_emb, d_h, rng);
    store.init("ssm.query_proj", {d_h, d_att}, [&] { return Tensor<T>::glorot(d_h, d_att, rng); });
    store.init("ssm.key_proj", {d_emb, d_att}, [&] { return Tensor<T>::glorot(d_emb, d_att, rng); });
    // Start and end token features: uniform random, frozen during training.
    store.init("ssm.start_emb", {1, d_emb}, [&] { return Tensor<T>::uniform(1, d_emb, rng, T(-0.5), T(0.5)); });
    store.init("ssm.end_emb", {1, d_emb}, [&] { return Tensor<T>::uniform(1, d_emb, rng, T(-0.5), T(0.5)); });
    store.frozen.insert("ssm.start_emb");
    store.frozen.insert("ssm.end_emb");
}

template <class T>
struct SsmStepIds {
    typename Tape<T>::Id hidden;
    typename Tape<T>::Id scores;  // [1 x (n_candidates + 1)], unmasked raw scores
};

// Eq. 1: h^t = GRU(h^{t-1}, v^{t-1}); scores = (W_h h)^T W_c [V_S; end].
template <class T>
SsmStepIds<T> ssm_step_t(Tape<T>& tape, TapeBind<T>& P, typename Tape<T>::Id h_prev,
                         typename Tape<T>::Id prev_emb, typename Tape<T>::Id candidate_feats) {
    SsmStepIds<T> out;
    out.hidden = gru_step_t(tape, P, "ssm.gru", h_prev, prev_emb);
    auto query = tape.matmul(out.hidden, P("ssm.query_proj"));
    auto keys_in = tape.concat_rows({candidate_feats, P("ssm.end_emb")});
    auto keys = tape.matmul(keys_in, P("ssm.key_proj"));
    out.scores = tape.matmul_nt(query, keys);
    return out;
}

template <class T>
std::vector<std::uint8_t> ssm_step_mask(const std::vector<std::uint8_t>& candidate_mask) {
    std::vector<std::uint8_t> m = candidate_mask;
    m.push_back(1);  // end token is always available
    return m;
}

// One inference step on plain tensors: masked distribution plus next state.
template <class T>
std::pair<Tensor<T>, SsmState<T>> ssm_step(ParamStore<T>& store, const SsmState<T>& state,
                                           const Tensor<T>& prev_emb,
                                           const Tensor<T>& candidate_feats) {
    Tape<T> tape;
    TapeBind<T> P(tape, store);
    auto ids = ssm_step_t(tape, P, tape.leaf(state.hidden), tape.leaf(prev_emb),
                          tape.leaf(candidate_feats));
    auto mask = ssm_step_mask<T>(state.mask);
    auto p = tape.softmax_rows(ids.scores, &mask);
    Tensor<T> dist = tape.val(p);
    check_finite(dist, "ssm step distribution");
    SsmState<T> next = state;
    next.hidden = tape.val(ids.hidden);
    return {dist, next};
}

// Greedy selection loop. Ties break toward the lowest candidate index; the
// end token wins a tie only against nothing (it is the last slot). Initial
// hidden state is the mean encoded image feature; first input is the frozen
// start embedding.
template <class T>
SelectionResult ssm_select(ParamStore<T>& store, const PlannerCore<T>& core,
                           const CandidateGraph& graph, const SequenceRecord& rec, int t_max) {
    if (t_max < 1) throw ConfigError("ssm_select requires T_max >= 1");
    Tape<T> tape;
    TapeBind<T> P(tape, store);
    auto fwd = core.forward_t(tape, P, graph, rec);
    int n = graph.node_count();

    auto h = tape.mean_rows(fwd.encoded);
    auto prev = P("ssm.start_emb");
    std::vector<std::uint8_t> mask(std::size_t(n), 1);
    SelectionResult result;
    result.by_image.assign(std::size_t(graph.n_images), {});
    for (int t = 0; t < t_max; ++t) {
        auto step = ssm_step_t(tape, P, h, prev, fwd.features);
        auto full_mask = ssm_step_mask<T>(mask);
        auto p = tape.softmax_rows(step.scores, &full_mask);
        const Tensor<T>& dist = tape.val(p);
        int best = -1;
        for (int k = 0; k <= n; ++k) {
            if (!full_mask[std::size_t(k)]) continue;
            if (best < 0 || dist.at(0, k) > dist.at(0, best)) best = k;
        }
        if (best == n) break;  // end token
        mask[std::size_t(best)] = 0;
        result.node_ids.push_back(best);
        result.by_image[std::size_t(graph.image_of(best))].push_back(
            graph.nodes[std::size_t(best)].word);
        h = step.hidden;
        prev = tape.slice_rows(fwd.features, best, best + 1);
    }
    return result;
}

// Teacher-forced target order: the per-image gold nodes shuffled within each
// image (seeded), images in sequence order.
inline std::vector<int> ssm_target_order(const GoldSets& gold, std::uint64_t seed) {
    std::vector<int> order;
    Rng rng(seed ^ 0x55a4f3c2d1ULL);
    for (std::size_t i = 0; i < gold.per_image_nodes.size(); ++i) {
        auto group = gold.per_image_nodes[i];
        shuffle(group, rng);
        order.insert(order.end(), group.begin(), group.end());
    }
    return order;
}

// Eq. 2 with set supervision: at each step y marks every not-yet-consumed
// target; the final step supervises the end token alone. Unnormalized sum.
template <class T>
typename Tape<T>::Id ssm_loss_t(Tape<T>& tape, TapeBind<T>& P, const PlannerCore<T>& core,
                                const CandidateGraph& graph, const SequenceRecord& rec,
                                const std::vector<int>& target_order) {
    auto fwd = core.forward_t(tape, P, graph, rec);
    int n = graph.node_count();
    auto h = tape.mean_rows(fwd.encoded);
    auto prev = P("ssm.start_emb");
    std::vector<std::uint8_t> mask(std::size_t(n), 1);
    std::vector<std::uint8_t> remaining(std::size_t(n), 0);
    for (int t : target_order) remaining[std::size_t(t)] = 1;

    typename Tape<T>::Id loss = tape.leaf(Tensor<T>({1, 1}));
    for (std::size_t t = 0; t <= target_order.size(); ++t) {
        auto step = ssm_step_t(tape, P, h, prev, fwd.features);
        auto full_mask = ssm_step_mask<T>(mask);
        std::vector<T> y(std::size_t(n) + 1, T(0));
        bool any = false;
        for (int k = 0; k < n; ++k)
            if (remaining[std::size_t(k)] && full_mask[std::size_t(k)]) {
                y[std::size_t(k)] = T(1);
                any = true;
            }
        if (!any) y[std::size_t(n)] = T(1);  // all targets consumed: supervise <end>
        loss = tape.add(loss, tape.xent_softmax_row(step.scores, full_mask, y));
        if (t < target_order.size()) {
            int tgt = target_order[t];
            remaining[std::size_t(tgt)] = 0;
            mask[std::size_t(tgt)] = 0;  // teacher forcing consumes the gold concept
            h = step.hidden;
            prev = tape.slice_rows(fwd.features, tgt, tgt + 1);
        }
    }
    return loss;
}

template <class T>
T ssm_loss(ParamStore<T>& store, const PlannerCore<T>& core, const CandidateGraph& graph,
           const SequenceRecord& rec, const std::vector<int>& target_order,
           bool with_grad = false) {
    Tape<T> tape;
    TapeBind<T> P(tape, store);
    auto loss = ssm_loss_t(tape, P, core, graph, rec, target_order);
    if (with_grad) {
        tape.backward(loss);
        P.harvest();
    }
    T out = tape.val(loss).v[0];
    if (!std::isfinite(double(out))) throw NumericError("ssm loss is not finite");
    return out;
}

// ---- I2C baseline: project each encoded image onto the concept vocabulary ----

template <class T>
void ensure_i2c(ParamStore<T>& store, const PlannerCore<T>& core, Rng& rng) {
    store.init("i2c.proj", {core.enc_cfg.d_h, core.vocab.size()},
               [&] { return Tensor<T>::glorot(core.enc_cfg.d_h, core.vocab.size(), rng); });
    store.init("i2c.bias", {1, core.vocab.size()},
               [&] { return Tensor<T>::zeros(1, core.vocab.size()); });
    ensure_encoder(store, "enc", core.enc_cfg, rng);
}

template <class T>
typename Tape<T>::Id i2c_logits_t(Tape<T>& tape, TapeBind<T>& P, const PlannerCore<T>& core,
                                  const SequenceRecord& rec) {
    auto feats = tape.leaf(core.feature_matrix(rec));
    auto enc = encode_images_t(tape, P, "enc", core.enc_cfg, feats);
    return tape.add_rowvec(tape.matmul(enc, P("i2c.proj")), P("i2c.bias"));
}

// Multi-label binary cross entropy against each image's per-image gold words.
template <class T>
T i2c_loss(ParamStore<T>& store, const PlannerCore<T>& core, const CandidateGraph& graph,
           const SequenceRecord& rec, const GoldSets& gold, bool with_grad = false) {
    Tape<T> tape;
    TapeBind<T> P(tape, store);
    auto logits = i2c_logits_t(tape, P, core, rec);
    Tensor<T> y({graph.n_images, core.vocab.size()});
    for (int i = 0; i < graph.n_images; ++i)
        for (int node : gold.per_image_nodes[std::size_t(i)])
            y.at(i, core.vocab.id(graph.nodes[std::size_t(node)].word)) = T(1);
    auto loss = tape.bce_logits_vs(logits, std::move(y));
    if (with_grad) {
        tape.backward(loss);
        P.harvest();
    }
    return tape.val(loss).v[0];
}

// Top-k concepts per image from the full concept vocabulary. The output may
// fall outside C_S; that is the baseline's documented weakness.
template <class T>
SelectionResult i2c_baseline(ParamStore<T>& store, const PlannerCore<T>& core,
                             const SequenceRecord& rec, int k_per_image = 3) {
    Tape<T> tape;
    TapeBind<T> P(tape, store);
    auto logits_id = i2c_logits_t(tape, P, core, rec);
    const Tensor<T>& logits = tape.val(logits_id);
    SelectionResult out;
    out.by_image.assign(std::size_t(rec.n_images()), {});
    for (int i = 0; i < rec.n_images(); ++i) {
        std::vector<int> order(std::size_t(core.vocab.size()));
        for (std::size_t j = 0; j < order.size(); ++j) order[j] = int(j);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return logits.at(i, a) > logits.at(i, b); });
        for (int k = 0; k < k_per_image && k < core.vocab.size(); ++k) {
            int id = order[std::size_t(k)];
            if (id == 0) continue;  // never emit <unk>
            out.by_image[std::size_t(i)].push_back(core.vocab.words[std::size_t(id)]);
        }
    }
    return out;
}

}  // namespace vist
