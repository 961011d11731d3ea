#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "vist/data.hpp"
#include "vist/nn.hpp"

namespace vist {

template <class T>
struct RealizerConfig {
    int d_img = 0;
    int d_emb = 32;
    int d_h = 32;
    int pool_heads = 2;
    int n_max = 8;
    int max_len = 20;

    EncoderConfig<T> encoder() const { return EncoderConfig<T>{d_img, d_h, n_max}; }
};

struct DecodeMeta {
    std::string strategy;
    double temperature = 0;
    double top_p = 0;
    int beam_width = 0;
    int max_len = 0;
    std::uint64_t rng_seed = 0;
};

struct StoryDraft {
    std::vector<std::vector<std::string>> sentences;  // each ends with </s>
    std::string merged;
    DecodeMeta meta;

    static std::string sentence_string(const std::vector<std::string>& tokens) {
        std::string out;
        for (const auto& t : tokens) {
            if (t == "</s>") continue;
            if (!out.empty()) out.push_back(' ');
            out += t;
        }
        return out;
    }

    void finish_merge() {
        merged.clear();
        for (const auto& s : sentences) {
            std::string line = sentence_string(s);
            if (line.empty()) continue;
            if (!merged.empty()) merged.push_back(' ');
            merged += line;
        }
    }
};

template <class T>
void ensure_realizer(ParamStore<T>& store, const RealizerConfig<T>& cfg, int vocab_size,
                     Rng& rng) {
    store.init("real.emb", {vocab_size, cfg.d_emb},
               [&] { return Tensor<T>::randn(vocab_size, cfg.d_emb, rng, T(0.1)); });
    ensure_encoder(store, "enc", cfg.encoder(), rng);
    ensure_pool(store, "pool", cfg.d_emb, cfg.pool_heads, rng);
    ensure_gru(store, "real.gru", cfg.d_emb + cfg.d_h + cfg.d_emb, cfg.d_h, rng);
    store.init("real.w_s", {cfg.d_h, vocab_size},
               [&] { return Tensor<T>::glorot(cfg.d_h, vocab_size, rng); });
}

// Eq. 7-8: h^t = GRU(h^{t-1}, [w_{t-1}; I_i; v_i]); pi^t = softmax(W_s h^t).
template <class T>
struct DecodeStepIds {
    typename Tape<T>::Id hidden;
    typename Tape<T>::Id logits;  // [1 x V]
};

template <class T>
DecodeStepIds<T> decode_step_t(Tape<T>& tape, TapeBind<T>& P, typename Tape<T>::Id h_prev,
                               typename Tape<T>::Id prev_token_emb, typename Tape<T>::Id image_feat,
                               typename Tape<T>::Id pooled) {
    DecodeStepIds<T> out;
    auto x = tape.concat_cols({prev_token_emb, image_feat, pooled});
    out.hidden = gru_step_t(tape, P, "real.gru", h_prev, x);
    out.logits = tape.matmul(out.hidden, P("real.w_s"));
    return out;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> decode_step(ParamStore<T>& store, const Tensor<T>& h_prev,
                                            const Tensor<T>& prev_token_emb,
                                            const Tensor<T>& image_feat, const Tensor<T>& pooled) {
    Tape<T> tape;
    TapeBind<T> P(tape, store);
    auto ids = decode_step_t(tape, P, tape.leaf(h_prev), tape.leaf(prev_token_emb),
                             tape.leaf(image_feat), tape.leaf(pooled));
    auto pi = tape.softmax_rows(ids.logits);
    Tensor<T> dist = tape.val(pi);
    check_finite(dist, "decode step distribution");
    return {dist, tape.val(ids.hidden)};
}

// ---- training-time noise (mask 30%, replace 20% of survivors) ----

// Nearest embedding neighbor among regular vocabulary tokens, excluding the
// token itself and specials.
template <class T>
int nearest_embedding_neighbor(const Tensor<T>& table, int token_id) {
    int best = -1;
    double best_d = 0;
    for (int j = Vocabulary::kNumSpecials; j < table.rows(); ++j) {
        if (j == token_id) continue;
        double d = 0;
        for (int c = 0; c < table.cols(); ++c) {
            double diff = double(table.at(token_id, c)) - double(table.at(j, c));
            d += diff * diff;
        }
        if (best < 0 || d < best_d) {
            best = j;
            best_d = d;
        }
    }
    return best;
}

// Masked concepts become the <mask> token; surviving concepts are replaced by
// their nearest embedding neighbor. List lengths never change.
template <class T>
std::vector<std::vector<std::string>> inject_noise(
    const std::vector<std::vector<std::string>>& concepts, const ParamStore<T>& store,
    const Vocabulary& vocab, double mask_rate, double replace_rate, std::uint64_t rng_seed) {
    if (mask_rate < 0 || mask_rate > 1 || replace_rate < 0 || replace_rate > 1)
        throw ConfigError("noise rates must lie in [0,1]");
    const Tensor<T>& table = store.param.at("real.emb");
    Rng rng(rng_seed ^ 0x6e015eULL);
    auto noised = concepts;
    for (auto& group : noised)
        for (auto& word : group) {
            if (rng.next_double() < mask_rate) {
                word = "<mask>";
                continue;
            }
            if (rng.next_double() < replace_rate) {
                int id = vocab.id(word);
                int nb = nearest_embedding_neighbor(table, id);
                if (nb >= 0) word = vocab.token(nb);
            }
        }
    return noised;
}

// ---- teacher-forced sentence loss ----

template <class T>
typename Tape<T>::Id pooled_concepts_t(Tape<T>& tape, TapeBind<T>& P,
                                       const RealizerConfig<T>& cfg, const Vocabulary& vocab,
                                       const std::vector<std::string>& concepts) {
    if (concepts.empty()) return P("pool.empty");
    std::vector<int> ids;
    for (const auto& w : concepts) ids.push_back(vocab.id(w));
    auto emb = tape.gather_rows(P("real.emb"), std::move(ids));
    return multihead_pool_t(tape, P, "pool", cfg.pool_heads, emb);
}

// Cross entropy of one sequence: all N sentences teacher forced.
template <class T>
typename Tape<T>::Id story_loss_t(Tape<T>& tape, TapeBind<T>& P, const RealizerConfig<T>& cfg,
                                  const Vocabulary& vocab, const Tensor<T>& features,
                                  const std::vector<std::vector<std::string>>& concepts,
                                  const GoldStory& story) {
    auto enc = encode_images_t(tape, P, "enc", cfg.encoder(), tape.leaf(features));
    typename Tape<T>::Id loss = tape.leaf(Tensor<T>({1, 1}));
    std::vector<std::uint8_t> mask(std::size_t(vocab.size()), 1);
    for (int i = 0; i < int(story.size()); ++i) {
        auto image_feat = tape.slice_rows(enc, i, i + 1);
        auto pooled = pooled_concepts_t(tape, P, cfg, vocab, concepts[std::size_t(i)]);
        std::vector<int> ids;
        ids.push_back(Vocabulary::kStart);
        for (const auto& w : story[std::size_t(i)]) ids.push_back(vocab.id(w));
        auto h = tape.leaf(Tensor<T>::zeros(1, cfg.d_h));
        for (std::size_t t = 0; t + 1 <= ids.size(); ++t) {
            auto prev = tape.gather_rows(P("real.emb"), {ids[t]});
            auto step = decode_step_t(tape, P, h, prev, image_feat, pooled);
            int target = t + 1 < ids.size() ? ids[t + 1] : Vocabulary::kEos;
            std::vector<T> y(std::size_t(vocab.size()), T(0));
            y[std::size_t(target)] = T(1);
            loss = tape.add(loss, tape.xent_softmax_row(step.logits, mask, y));
            h = step.hidden;
        }
    }
    return loss;
}

// ---- training with the optional image-blinding schedule ----

template <class T>
struct RealizerSample {
    Tensor<T> features;                               // [N x D_img]
    std::vector<std::vector<std::string>> concepts;   // per-image gold inputs
    GoldStory story;
};

struct TrainSchedule {
    int epochs = 30;
    double lr = 4e-4;
    double mask_rate = 0.30;
    double replace_rate = 0.20;
    bool noise = true;
    int blind_one_from = -1;  // epoch index from which one image is blinded; -1 disables
    int blind_two_from = -1;  // epoch index from which two images are blinded
    std::uint64_t seed = 1;
};

// Observer receives (epoch, blinded image positions) per sample; used by the
// schedule contract test.
template <class T>
std::vector<double> train_realizer(
    ParamStore<T>& store, const RealizerConfig<T>& cfg, const Vocabulary& vocab,
    const std::vector<RealizerSample<T>>& samples, const TrainSchedule& sched,
    const std::function<void(int, const std::vector<int>&)>& observer = nullptr) {
    std::vector<double> epoch_losses;
    for (int epoch = 0; epoch < sched.epochs; ++epoch) {
        int blind = 0;
        if (sched.blind_two_from >= 0 && epoch >= sched.blind_two_from)
            blind = 2;
        else if (sched.blind_one_from >= 0 && epoch >= sched.blind_one_from)
            blind = 1;
        double total = 0;
        for (std::size_t s = 0; s < samples.size(); ++s) {
            const auto& sample = samples[s];
            Rng rng(sched.seed ^ (std::uint64_t(epoch) << 32) ^ (s * 0x9e37ULL));
            Tensor<T> features = sample.features;
            std::vector<int> blinded;
            if (blind > 0) {
                auto picks = sample_without_replacement(std::size_t(features.rows()),
                                                        std::size_t(blind), rng);
                for (auto p : picks) {
                    blinded.push_back(int(p));
                    for (int j = 0; j < features.cols(); ++j) features.at(int(p), j) = T(0);
                }
            }
            if (observer) observer(epoch, blinded);
            auto concepts = sample.concepts;
            if (sched.noise)
                concepts = inject_noise(concepts, store, vocab, sched.mask_rate,
                                        sched.replace_rate, rng.next_u64());
            Tape<T> tape;
            TapeBind<T> P(tape, store);
            auto loss = story_loss_t(tape, P, cfg, vocab, features, concepts, sample.story);
            store.zero_grad();
            tape.backward(loss);
            P.harvest();
            adam_step(store, T(sched.lr));
            total += double(tape.val(loss).v[0]);
        }
        epoch_losses.push_back(total / double(samples.size()));
    }
    return epoch_losses;
}

// ---- decoding ----

// Candidate tokens during search: the regular vocabulary plus </s>. Other
// specials are never emitted.
inline bool decodable_token(int id) {
    return id == Vocabulary::kEos || id >= Vocabulary::kNumSpecials;
}

template <class T>
struct RealizerInput {
    std::string sequence_id;
    Tensor<T> features;                              // [N x D_img]
    std::vector<std::vector<std::string>> concepts;  // per-image plan
};

inline constexpr double kLengthNormExponent = 0.7;

// Length-normalized beam search per image sentence; beams are pruned on raw
// log probability, finished hypotheses compared at logp / len^0.7.
template <class T>
StoryDraft beam_decode(ParamStore<T>& store, const RealizerConfig<T>& cfg, const Vocabulary& vocab,
                       const RealizerInput<T>& input, int beam_width, int max_len) {
    if (beam_width < 1) throw ConfigError("beam width must be >= 1");
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
    Tape<T> tape;
    TapeBind<T> P(tape, store);
    auto enc = encode_images_t(tape, P, "enc", cfg.encoder(), tape.leaf(input.features));

    StoryDraft draft;
    draft.meta = DecodeMeta{"beam", 0, 0, beam_width, max_len, 0};
    int n = input.features.rows();
    for (int i = 0; i < n; ++i) {
        auto image_feat = tape.slice_rows(enc, i, i + 1);
        auto pooled = pooled_concepts_t(tape, P, cfg, vocab, input.concepts[std::size_t(i)]);
        struct Beam {
            std::vector<int> tokens;  // generated tokens, </s> included when emitted
            double logp = 0;
            typename Tape<T>::Id hidden;
            bool done = false;
        };
        std::vector<Beam> beams{Beam{{}, 0, tape.leaf(Tensor<T>::zeros(1, cfg.d_h)), false}};
        std::vector<Beam> finished;
        for (int t = 0; t < max_len; ++t) {
            std::vector<Beam> expanded;
            for (auto& b : beams) {
                if (b.done) continue;
                int prev = b.tokens.empty() ? Vocabulary::kStart : b.tokens.back();
                auto prev_emb = tape.gather_rows(P("real.emb"), {prev});
                auto step = decode_step_t(tape, P, b.hidden, prev_emb, image_feat, pooled);
                auto pi = tape.softmax_rows(step.logits);
                const Tensor<T>& dist = tape.val(pi);
                std::vector<int> order;
                for (int v = 0; v < vocab.size(); ++v)
                    if (decodable_token(v)) order.push_back(v);
                std::stable_sort(order.begin(), order.end(), [&](int a, int bb) {
                    return dist.at(0, a) > dist.at(0, bb);
                });
                int take = std::min<int>(beam_width, int(order.size()));
                for (int k = 0; k < take; ++k) {
                    Beam nb = b;
                    nb.tokens.push_back(order[std::size_t(k)]);
                    nb.logp += std::log(std::max(double(dist.at(0, order[std::size_t(k)])), 1e-300));
                    nb.hidden = step.hidden;
                    nb.done = order[std::size_t(k)] == Vocabulary::kEos;
                    expanded.push_back(std::move(nb));
                }
            }
            if (expanded.empty()) break;
            std::stable_sort(expanded.begin(), expanded.end(), [](const Beam& a, const Beam& b) {
                if (a.logp != b.logp) return a.logp > b.logp;
                return a.tokens < b.tokens;
            });
            if (int(expanded.size()) > beam_width) expanded.resize(std::size_t(beam_width));
            beams.clear();
            for (auto& b : expanded) {
                if (b.done)
                    finished.push_back(std::move(b));
                else
                    beams.push_back(std::move(b));
            }
            if (beams.empty()) break;
        }
        for (auto& b : beams) finished.push_back(std::move(b));  // length cutoff
        auto norm = [](const Beam& b) {
            return b.logp / std::pow(double(b.tokens.size()), kLengthNormExponent);
        };
        std::size_t best = 0;
        for (std::size_t k = 1; k < finished.size(); ++k) {
            if (norm(finished[k]) > norm(finished[best]) ||
                (norm(finished[k]) == norm(finished[best]) &&
                 finished[k].tokens < finished[best].tokens))
                best = k;
        }
        std::vector<std::string> sentence;
        for (int id : finished[best].tokens) sentence.push_back(vocab.token(id));
        if (sentence.empty() || sentence.back() != "</s>") sentence.push_back("</s>");
        draft.sentences.push_back(std::move(sentence));
    }
    draft.finish_merge();
    return draft;
}

// Nucleus sampling: logits / temperature, keep the smallest probability mass
// >= p, renormalize, sample. The per-step retained sets can be observed via
// the hook for the membership invariant.
template <class T>
StoryDraft nucleus_decode(ParamStore<T>& store, const RealizerConfig<T>& cfg,
                          const Vocabulary& vocab, const RealizerInput<T>& input,
                          double temperature, double top_p, std::uint64_t rng_seed, int max_len,
                          const std::function<void(const std::vector<int>&, int)>& step_hook = nullptr) {
    if (!(temperature > 0)) throw ConfigError("temperature must be positive");
    if (!(top_p > 0 && top_p <= 1)) throw ConfigError("p must lie in (0,1]");
    Tape<T> tape;
    TapeBind<T> P(tape, store);
    auto enc = encode_images_t(tape, P, "enc", cfg.encoder(), tape.leaf(input.features));
    Rng rng(rng_seed ^ 0x9c1e05ULL);

    StoryDraft draft;
    draft.meta = DecodeMeta{"nucleus", temperature, top_p, 0, max_len, rng_seed};
    int n = input.features.rows();
    for (int i = 0; i < n; ++i) {
        auto image_feat = tape.slice_rows(enc, i, i + 1);
        auto pooled = pooled_concepts_t(tape, P, cfg, vocab, input.concepts[std::size_t(i)]);
        auto h = tape.leaf(Tensor<T>::zeros(1, cfg.d_h));
        std::vector<int> tokens;
        int prev = Vocabulary::kStart;
        for (int t = 0; t < max_len; ++t) {
            auto prev_emb = tape.gather_rows(P("real.emb"), {prev});
            auto step = decode_step_t(tape, P, h, prev_emb, image_feat, pooled);
            auto scaled = tape.scale(step.logits, T(1.0 / temperature));
            auto pi = tape.softmax_rows(scaled);
            const Tensor<T>& dist = tape.val(pi);
            std::vector<int> order;
            for (int v = 0; v < vocab.size(); ++v)
                if (decodable_token(v)) order.push_back(v);
            std::stable_sort(order.begin(), order.end(),
                             [&](int a, int b) { return dist.at(0, a) > dist.at(0, b); });
            // Renormalize over decodable tokens, then take the top-p prefix.
            double z = 0;
            for (int v : order) z += double(dist.at(0, v));
            std::vector<int> nucleus;
            double mass = 0;
            for (int v : order) {
                nucleus.push_back(v);
                mass += double(dist.at(0, v)) / z;
                if (mass >= top_p - 1e-12) break;
            }
            double pick = rng.next_double() * mass;
            double acc = 0;
            int chosen = nucleus.back();
            for (int v : nucleus) {
                acc += double(dist.at(0, v)) / z;
                if (pick <= acc) {
                    chosen = v;
                    break;
                }
            }
            if (step_hook) step_hook(nucleus, chosen);
            tokens.push_back(chosen);
            if (chosen == Vocabulary::kEos) break;
            prev = chosen;
            h = step.hidden;
        }
        std::vector<std::string> sentence;
        for (int id : tokens) sentence.push_back(vocab.token(id));
        if (sentence.empty() || sentence.back() != "</s>") sentence.push_back("</s>");
        draft.sentences.push_back(std::move(sentence));
    }
    draft.finish_merge();
    return draft;
}

// ---- deterministic template realization ----

// Slot-filling templates embedding every planned concept verbatim.
inline StoryDraft template_realize(const std::vector<std::vector<std::string>>& plan) {
    StoryDraft draft;
    draft.meta.strategy = "template";
    for (const auto& concepts : plan) {
        std::vector<std::string> s;
        if (concepts.empty()) {
            s = {"it", "was", "a", "quiet", "moment", "."};
        } else {
            s = {"there", "was", "a", concepts[0]};
            if (concepts.size() >= 2) {
                s.push_back("at");
                s.push_back("the");
                s.push_back(concepts[1]);
            }
            for (std::size_t k = 2; k < concepts.size(); ++k) {
                s.push_back(k == 2 ? "with" : "and");
                s.push_back("a");
                s.push_back(concepts[k]);
            }
            s.push_back(".");
        }
        s.push_back("</s>");
        draft.sentences.push_back(std::move(s));
    }
    draft.finish_merge();
    return draft;
}

// ---- pluggable external realizer ----

struct ExternalRealizerConfig {
    std::string command;               // run as: command < request > response
    bool fallback_to_template = true;
};

// The wire token stream: <img_i> <sep> concepts... <sep> <img_{i+1}> ...
// Exactly N image separators plus N-1 group separators.
inline std::vector<std::string> external_request_tokens(
    const std::vector<std::vector<std::string>>& concepts) {
    std::vector<std::string> stream;
    for (std::size_t i = 0; i < concepts.size(); ++i) {
        if (i > 0) stream.push_back("<sep>");
        stream.push_back("<img_" + std::to_string(i) + ">");
        stream.push_back("<sep>");
        for (const auto& c : concepts[i]) stream.push_back(c);
    }
    return stream;
}

template <class T>
Json external_request_json(const RealizerInput<T>& input) {
    Json req;
    req["sequence_id"] = input.sequence_id;
    Json vecs = Json::array();
    for (int i = 0; i < input.features.rows(); ++i) {
        Json row = Json::array();
        for (int j = 0; j < input.features.cols(); ++j) row.push_back(double(input.features.at(i, j)));
        vecs.push_back(std::move(row));
    }
    req["image_vectors"] = std::move(vecs);
    req["concept_groups"] = input.concepts;
    req["tokens"] = external_request_tokens(input.concepts);
    req["separator"] = "<sep>";
    return req;
}

template <class T>
StoryDraft external_realize(const RealizerInput<T>& input, const ExternalRealizerConfig& cfg,
                            std::vector<std::string>* diagnostics = nullptr) {
    auto fail = [&](const std::string& why) -> StoryDraft {
        if (cfg.fallback_to_template) {
            if (diagnostics) diagnostics->push_back("external realizer failed (" + why + "), using template fallback");
            auto draft = template_realize(input.concepts);
            draft.meta.strategy = "external-fallback-template";
            return draft;
        }
        throw RealizationError(why);
    };
    if (cfg.command.empty()) return fail("no external command configured");

    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path();
    fs::path req_path = dir / ("vist_ext_req_" + std::to_string(std::uint64_t(::getpid())) + ".json");
    fs::path resp_path = dir / ("vist_ext_resp_" + std::to_string(std::uint64_t(::getpid())) + ".json");
    {
        std::ofstream os(req_path);
        os << external_request_json(input).dump() << "\n";
    }
    std::string cmdline = cfg.command + " < " + req_path.string() + " > " + resp_path.string();
    int rc = std::system(cmdline.c_str());
    std::error_code ec;
    fs::remove(req_path, ec);
    if (rc != 0) {
        fs::remove(resp_path, ec);
        return fail("endpoint command exited with status " + std::to_string(rc));
    }
    Json resp;
    try {
        std::ifstream is(resp_path);
        is >> resp;
    } catch (const std::exception& e) {
        fs::remove(resp_path, ec);
        return fail(std::string("malformed response: ") + e.what());
    }
    fs::remove(resp_path, ec);
    if (!resp.contains("sentences") || !resp["sentences"].is_array() ||
        int(resp["sentences"].size()) != input.features.rows())
        return fail("response must contain exactly N sentences");
    StoryDraft draft;
    draft.meta.strategy = "external";
    for (const auto& js : resp["sentences"]) {
        std::vector<std::string> sentence;
        for (const auto& t : js) sentence.push_back(t.get<std::string>());
        if (sentence.empty() || sentence.back() != "</s>") sentence.push_back("</s>");
        draft.sentences.push_back(std::move(sentence));
    }
    draft.finish_merge();
    return draft;
}

}  // namespace vist
