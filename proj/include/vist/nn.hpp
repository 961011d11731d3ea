#pragma once

#include <string>
#include <vector>

#include "vist/graph.hpp"
#include "vist/params.hpp"
#include "vist/tape.hpp"

namespace vist {

// Layer builders. Each ensure_* lazily creates the named parameters in a
// store; each *_t builds the forward pass on a tape so one code path serves
// training, inference and the finite-difference oracle.

// ---- GRU cell ----

template <class T>
void ensure_gru(ParamStore<T>& store, const std::string& p, int d_in, int d_h, Rng& rng) {
    for (const char* gate : {"z", "r", "h"}) {
        store.init(p + ".w" + gate, {d_in, d_h},
                   [&] { return Tensor<T>::glorot(d_in, d_h, rng); });
        store.init(p + ".u" + gate, {d_h, d_h}, [&] { return Tensor<T>::glorot(d_h, d_h, rng); });
        store.init(p + ".b" + gate, {1, d_h}, [&] { return Tensor<T>::zeros(1, d_h); });
    }
}

// Standard GRU update: reset/update gates with sigmoid, candidate with tanh,
// h' = (1-z) o h + z o h~.
template <class T>
typename Tape<T>::Id gru_step_t(Tape<T>& tape, TapeBind<T>& P, const std::string& p,
                                typename Tape<T>::Id h_prev, typename Tape<T>::Id x) {
    auto lin = [&](const char* gate, typename Tape<T>::Id hh) {
        auto wx = tape.matmul(x, P(p + ".w" + gate));
        auto uh = tape.matmul(hh, P(p + ".u" + gate));
        return tape.add_rowvec(tape.add(wx, uh), P(p + ".b" + gate));
    };
    auto z = tape.sigmoid(lin("z", h_prev));
    auto r = tape.sigmoid(lin("r", h_prev));
    auto rh = tape.mul(r, h_prev);
    auto wx = tape.matmul(x, P(p + ".wh"));
    auto uh = tape.matmul(rh, P(p + ".uh"));
    auto cand = tape.tanh_(tape.add_rowvec(tape.add(wx, uh), P(p + ".bh")));
    auto keep = tape.mul(tape.one_minus(z), h_prev);
    return tape.add(keep, tape.mul(z, cand));
}

template <class T>
Tensor<T> gru_step(ParamStore<T>& store, const std::string& p, const Tensor<T>& h_prev,
                   const Tensor<T>& x) {
    Tape<T> tape;
    TapeBind<T> P(tape, store);
    auto h = gru_step_t(tape, P, p, tape.leaf(h_prev), tape.leaf(x));
    Tensor<T> out = tape.val(h);
    check_finite(out, "gru_step output");
    return out;
}

// ---- image sequence encoder: position embedding + projection + BiGRU ----

template <class T>
struct EncoderConfig {
    int d_img = 0;
    int d_h = 0;     // concat of the two direction states; must be even
    int n_max = 8;   // position embedding capacity
};

template <class T>
void ensure_encoder(ParamStore<T>& store, const std::string& p, const EncoderConfig<T>& cfg,
                    Rng& rng) {
    int half = cfg.d_h / 2;
    store.init(p + ".pos_emb", {cfg.n_max, cfg.d_img},
               [&] { return Tensor<T>::randn(cfg.n_max, cfg.d_img, rng, T(0.1)); });
    store.init(p + ".in_proj", {cfg.d_img, half},
               [&] { return Tensor<T>::glorot(cfg.d_img, half, rng); });
    store.init(p + ".in_bias", {1, half}, [&] { return Tensor<T>::zeros(1, half); });
    ensure_gru(store, p + ".fw", half, half, rng);
    ensure_gru(store, p + ".bw", half, half, rng);
}

// features [N x D_img] -> [N x D_h]; row i = concat(forward state i, backward
// state i) of projected(feature_i + pos_emb_i).
template <class T>
typename Tape<T>::Id encode_images_t(Tape<T>& tape, TapeBind<T>& P, const std::string& p,
                                     const EncoderConfig<T>& cfg, typename Tape<T>::Id features) {
    int n = tape.val(features).rows();
    if (n < 1) throw SchemaError("encode_images requires N >= 1");
    if (tape.val(features).cols() != cfg.d_img)
        throw SchemaError("encode_images: feature dimension mismatch");
    if (n > cfg.n_max) throw SchemaError("encode_images: N exceeds position embedding capacity");
    int half = cfg.d_h / 2;
    auto pos = tape.slice_rows(P(p + ".pos_emb"), 0, n);
    auto x = tape.add_rowvec(tape.matmul(tape.add(features, pos), P(p + ".in_proj")),
                             P(p + ".in_bias"));
    std::vector<typename Tape<T>::Id> fwd(static_cast<std::size_t>(n));
    std::vector<typename Tape<T>::Id> bwd(static_cast<std::size_t>(n));
    auto h = tape.leaf(Tensor<T>::zeros(1, half));
    for (int i = 0; i < n; ++i) {
        h = gru_step_t(tape, P, p + ".fw", h, tape.slice_rows(x, i, i + 1));
        fwd[std::size_t(i)] = h;
    }
    h = tape.leaf(Tensor<T>::zeros(1, half));
    for (int i = n - 1; i >= 0; --i) {
        h = gru_step_t(tape, P, p + ".bw", h, tape.slice_rows(x, i, i + 1));
        bwd[std::size_t(i)] = h;
    }
    std::vector<typename Tape<T>::Id> rows(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        rows[std::size_t(i)] = tape.concat_cols({fwd[std::size_t(i)], bwd[std::size_t(i)]});
    return tape.concat_rows(rows);
}

template <class T>
Tensor<T> encode_images(ParamStore<T>& store, const std::string& p, const EncoderConfig<T>& cfg,
                        const Tensor<T>& features) {
    Tape<T> tape;
    TapeBind<T> P(tape, store);
    auto enc = encode_images_t(tape, P, p, cfg, tape.leaf(features));
    Tensor<T> out = tape.val(enc);
    check_finite(out, "encode_images output");
    return out;
}

// ---- two-layer graph attention update ----

template <class T>
struct GatConfig {
    int d_emb = 0;
    int d_h = 0;       // encoded image feature width
    int heads = 4;     // layer-1 heads concatenate, layer-2 heads average
    T leaky_slope = T(0.2);
};

template <class T>
void ensure_gat(ParamStore<T>& store, const std::string& p, const GatConfig<T>& cfg, Rng& rng) {
    if (cfg.d_emb % cfg.heads != 0) throw ConfigError("gat: heads must divide d_emb");
    store.init(p + ".img_proj", {cfg.d_h, cfg.d_emb},
               [&] { return Tensor<T>::glorot(cfg.d_h, cfg.d_emb, rng); });
    int d1 = cfg.d_emb / cfg.heads;
    for (int layer = 1; layer <= 2; ++layer) {
        int dh = layer == 1 ? d1 : cfg.d_emb;
        for (int head = 0; head < cfg.heads; ++head) {
            std::string q = p + ".l" + std::to_string(layer) + ".h" + std::to_string(head);
            store.init(q + ".w", {cfg.d_emb, dh}, [&] { return Tensor<T>::glorot(cfg.d_emb, dh, rng); });
            store.init(q + ".a_src", {dh, 1}, [&] { return Tensor<T>::glorot(dh, 1, rng); });
            store.init(q + ".a_dst", {dh, 1}, [&] { return Tensor<T>::glorot(dh, 1, rng); });
        }
    }
}

// Attention mask over [n_nodes x (n_nodes + n_images)]: graph edges (both
// directions), self-loops, and each concept's own image as an extra key.
inline std::vector<std::uint8_t> gat_mask(const CandidateGraph& g) {
    int n = g.node_count(), cols = n + g.n_images;
    std::vector<std::uint8_t> mask(std::size_t(n) * cols, 0);
    for (int i = 0; i < n; ++i) {
        mask[std::size_t(i) * cols + i] = 1;
        mask[std::size_t(i) * cols + n + g.image_of(i)] = 1;
    }
    for (auto [u, v] : g.edges) {
        mask[std::size_t(u) * cols + v] = 1;
        mask[std::size_t(v) * cols + u] = 1;
    }
    return mask;
}

template <class T>
Tensor<T> ones_row(int n) {
    Tensor<T> t({1, n});
    t.fill(T(1));
    return t;
}

// One attention layer; keys/values are the concept rows plus projected image
// rows, queries are the concept rows only (image features are attention
// sources; they are not updated).
template <class T>
typename Tape<T>::Id gat_layer_t(Tape<T>& tape, TapeBind<T>& P, const std::string& q, int heads,
                                 bool concat_heads, T slope, typename Tape<T>::Id concepts,
                                 typename Tape<T>::Id images_proj,
                                 const std::vector<std::uint8_t>& mask,
                                 std::vector<typename Tape<T>::Id>* alphas_out = nullptr) {
    std::vector<typename Tape<T>::Id> outs;
    auto kv_in = tape.concat_rows({concepts, images_proj});
    for (int head = 0; head < heads; ++head) {
        std::string h = q + ".h" + std::to_string(head);
        auto kv = tape.matmul(kv_in, P(h + ".w"));                 // [(n+N) x dh]
        int n = tape.val(concepts).rows();
        auto qrows = tape.slice_rows(kv, 0, n);                    // [n x dh]
        auto src = tape.matmul(qrows, P(h + ".a_src"));            // [n x 1]
        auto dst = tape.matmul(kv, P(h + ".a_dst"));               // [(n+N) x 1]
        auto dst_row = tape.matmul_nt(tape.leaf(ones_row<T>(1)), dst);  // [1 x (n+N)]
        auto scores = tape.leaky_relu(tape.outer_add(src, dst_row), slope);
        auto alpha = tape.softmax_rows(scores, &mask);
        if (alphas_out) alphas_out->push_back(alpha);
        outs.push_back(tape.matmul(alpha, kv));
    }
    if (concat_heads) return tape.concat_cols(outs);
    auto sum = outs[0];
    for (std::size_t i = 1; i < outs.size(); ++i) sum = tape.add(sum, outs[i]);
    return tape.scale(sum, T(1) / T(heads));
}

// Two layers: heads concatenated + ELU after layer 1, averaged and linear on
// layer 2. Non-edges receive exactly zero attention via the mask.
template <class T>
typename Tape<T>::Id gat_update_t(Tape<T>& tape, TapeBind<T>& P, const std::string& p,
                                  const GatConfig<T>& cfg, const CandidateGraph& g,
                                  typename Tape<T>::Id concept_emb,
                                  typename Tape<T>::Id image_feats) {
    auto mask = gat_mask(g);
    auto images_proj = tape.matmul(image_feats, P(p + ".img_proj"));
    auto v1 = tape.elu(gat_layer_t(tape, P, p + ".l1", cfg.heads, true, cfg.leaky_slope,
                                   concept_emb, images_proj, mask));
    return gat_layer_t(tape, P, p + ".l2", cfg.heads, false, cfg.leaky_slope, v1, images_proj,
                       mask);
}

template <class T>
Tensor<T> gat_update(ParamStore<T>& store, const std::string& p, const GatConfig<T>& cfg,
                     const CandidateGraph& g, const Tensor<T>& concept_emb,
                     const Tensor<T>& image_feats) {
    Tape<T> tape;
    TapeBind<T> P(tape, store);
    auto out = gat_update_t(tape, P, p, cfg, g, tape.leaf(concept_emb), tape.leaf(image_feats));
    Tensor<T> res = tape.val(out);
    check_finite(res, "gat_update output");
    return res;
}

// ---- multi-head attention pooling of a concept set into one vector ----

template <class T>
void ensure_pool(ParamStore<T>& store, const std::string& p, int d_emb, int heads, Rng& rng) {
    if (d_emb % heads != 0) throw ConfigError("pool: heads must divide d_emb");
    int dh = d_emb / heads;
    for (int head = 0; head < heads; ++head) {
        std::string h = p + ".h" + std::to_string(head);
        store.init(h + ".score", {d_emb, 1}, [&] { return Tensor<T>::glorot(d_emb, 1, rng); });
        store.init(h + ".value", {d_emb, dh}, [&] { return Tensor<T>::glorot(d_emb, dh, rng); });
    }
    store.init(p + ".out", {d_emb, d_emb}, [&] { return Tensor<T>::glorot(d_emb, d_emb, rng); });
    store.init(p + ".empty", {1, d_emb}, [&] { return Tensor<T>::randn(1, d_emb, rng, T(0.1)); });
}

// emb [m x D] -> [1 x D]. Per-head softmax weights over the m rows sum to 1;
// weighted sums are concatenated and projected. m == 0 yields the learned
// empty-set vector.
template <class T>
typename Tape<T>::Id multihead_pool_t(Tape<T>& tape, TapeBind<T>& P, const std::string& p,
                                      int heads, typename Tape<T>::Id emb) {
    int m = tape.val(emb).rows();
    if (m == 0) return P(p + ".empty");
    std::vector<typename Tape<T>::Id> pooled;
    for (int head = 0; head < heads; ++head) {
        std::string h = p + ".h" + std::to_string(head);
        auto scores = tape.matmul(emb, P(h + ".score"));                   // [m x 1]
        auto srow = tape.matmul_nt(tape.leaf(ones_row<T>(1)), scores);     // [1 x m]
        auto alpha = tape.softmax_rows(srow);
        pooled.push_back(tape.matmul(alpha, tape.matmul(emb, P(h + ".value"))));
    }
    return tape.matmul(tape.concat_cols(pooled), P(p + ".out"));
}

template <class T>
Tensor<T> multihead_pool(ParamStore<T>& store, const std::string& p, int heads,
                         const Tensor<T>& emb) {
    Tape<T> tape;
    TapeBind<T> P(tape, store);
    auto out = multihead_pool_t(tape, P, p, heads, tape.leaf(emb));
    Tensor<T> res = tape.val(out);
    check_finite(res, "multihead_pool output");
    return res;
}

}  // namespace vist
