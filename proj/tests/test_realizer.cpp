#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "vist/realizer.hpp"

using namespace vist;
namespace fs = std::filesystem;

namespace {

Vocabulary tiny_vocab(const std::vector<std::string>& words) {
    Vocabulary v;
    for (const auto& w : words) v.add(w);
    return v;
}

struct Fixture {
    RealizerConfig<double> cfg;
    Vocabulary vocab;
    ParamStore<double> store;

    explicit Fixture(std::uint64_t seed, std::vector<std::string> words = {"dog", "park", "tree", "sun"},
                     int d_img = 3)
        : vocab(tiny_vocab(words)) {
        cfg.d_img = d_img;
        cfg.d_emb = 8;
        cfg.d_h = 6;
        cfg.pool_heads = 2;
        store.rng_seed = seed;
        Rng rng(seed);
        ensure_realizer(store, cfg, vocab.size(), rng);
    }

    RealizerInput<double> input(int n_images, std::uint64_t seed,
                                std::vector<std::vector<std::string>> concepts = {}) const {
        RealizerInput<double> in;
        in.sequence_id = "seq";
        Rng rng(seed);
        in.features = Tensor<double>::randn(n_images, cfg.d_img, rng);
        if (concepts.empty()) concepts.assign(std::size_t(n_images), {"dog"});
        in.concepts = std::move(concepts);
        return in;
    }
};

}  // namespace

TEST_CASE("decode_step: distribution sums to one; zero output weights give uniform") {
    Fixture fx(3);
    Tensor<double> h({1, 6});
    Rng rng(5);
    Tensor<double> w = Tensor<double>::randn(1, 8, rng);
    Tensor<double> img = Tensor<double>::randn(1, 6, rng);
    Tensor<double> pooled = Tensor<double>::randn(1, 8, rng);
    auto [pi, h2] = decode_step(fx.store, h, w, img, pooled);
    double sum = 0;
    for (int j = 0; j < pi.cols(); ++j) sum += pi.at(0, j);
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));

    fx.store.get("real.w_s").fill(0.0);
    auto [pi2, h3] = decode_step(fx.store, h, w, img, pooled);
    for (int j = 0; j < pi2.cols(); ++j)
        REQUIRE(pi2.at(0, j) == Catch::Approx(1.0 / pi2.cols()).margin(1e-12));
}

TEST_CASE("decode: teacher-forced sentence loss passes the finite-difference oracle") {
    Fixture fx(7);
    Rng rng(7);
    Tensor<double> features = Tensor<double>::randn(2, 3, rng, 0.5);
    std::vector<std::vector<std::string>> concepts = {{"dog"}, {"park", "tree"}};
    GoldStory story = {{"dog", "park"}, {"tree"}};
    auto loss = [&](ParamStore<double>& s, bool with_grad) -> double {
        Tape<double> tape;
        TapeBind<double> P(tape, s);
        auto L = story_loss_t(tape, P, fx.cfg, fx.vocab, features, concepts, story);
        if (with_grad) {
            tape.backward(L);
            P.harvest();
        }
        return tape.val(L).v[0];
    };
    REQUIRE(grad_check(loss, fx.store, 1e-5, 25) < 1e-4);
}

TEST_CASE("inject_noise: zero rates are the identity") {
    Fixture fx(9);
    std::vector<std::vector<std::string>> concepts = {{"dog", "park"}, {"tree"}};
    auto out = inject_noise(concepts, fx.store, fx.vocab, 0.0, 0.0, 1);
    REQUIRE(out == concepts);
}

TEST_CASE("inject_noise: full mask rate masks everything, lengths never change") {
    Fixture fx(9);
    std::vector<std::vector<std::string>> concepts = {{"dog", "park"}, {}, {"tree", "sun", "dog"}};
    auto out = inject_noise(concepts, fx.store, fx.vocab, 1.0, 0.5, 1);
    REQUIRE(out.size() == concepts.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        REQUIRE(out[i].size() == concepts[i].size());
        for (const auto& w : out[i]) REQUIRE(w == "<mask>");
    }
}

TEST_CASE("inject_noise: empirical rates over 10000 trials within +-0.02") {
    Fixture fx(11);
    std::vector<std::vector<std::string>> concepts = {{"dog", "park", "tree", "sun"}};
    int masked = 0, replaced = 0, survivors = 0, total = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        auto out = inject_noise(concepts, fx.store, fx.vocab, 0.30, 0.20, std::uint64_t(trial));
        for (std::size_t j = 0; j < 4; ++j) {
            ++total;
            if (out[0][j] == "<mask>") {
                ++masked;
            } else {
                ++survivors;
                if (out[0][j] != concepts[0][j]) ++replaced;
            }
        }
    }
    REQUIRE(double(masked) / total == Catch::Approx(0.30).margin(0.02));
    REQUIRE(double(replaced) / survivors == Catch::Approx(0.20).margin(0.02));
}

TEST_CASE("inject_noise: replacement uses the nearest embedding neighbor, not itself") {
    Fixture fx(13);
    // Make "park" the unambiguous nearest neighbor of "dog".
    auto& emb = fx.store.get("real.emb");
    for (int j = 0; j < emb.cols(); ++j) {
        emb.at(fx.vocab.id("dog"), j) = 1.0;
        emb.at(fx.vocab.id("park"), j) = 1.001;
        emb.at(fx.vocab.id("tree"), j) = 5.0;
        emb.at(fx.vocab.id("sun"), j) = -3.0;
    }
    std::vector<std::vector<std::string>> concepts = {{"dog"}};
    bool saw_replacement = false;
    for (int trial = 0; trial < 200 && !saw_replacement; ++trial) {
        auto out = inject_noise(concepts, fx.store, fx.vocab, 0.0, 1.0, std::uint64_t(trial));
        saw_replacement = true;
        REQUIRE(out[0][0] == "park");
    }
    REQUIRE(saw_replacement);
}

TEST_CASE("train_realizer: memorizes a 3-sample toy set") {
    Fixture fx(17, {"dog", "park", "tree", "sun", "cat", "hill"});
    Rng rng(17);
    std::vector<RealizerSample<double>> samples;
    std::vector<GoldStory> stories = {{{"dog", "park"}, {"tree"}},
                                      {{"cat", "hill"}, {"sun"}},
                                      {{"park", "tree"}, {"dog", "sun"}}};
    for (int s = 0; s < 3; ++s) {
        RealizerSample<double> sample;
        sample.features = Tensor<double>::randn(2, 3, rng);
        sample.concepts = {{stories[std::size_t(s)][0][0]}, {stories[std::size_t(s)][1][0]}};
        sample.story = stories[std::size_t(s)];
        samples.push_back(std::move(sample));
    }
    TrainSchedule sched;
    sched.epochs = 220;
    sched.lr = 0.01;
    sched.noise = false;
    auto losses = train_realizer(fx.store, fx.cfg, fx.vocab, samples, sched);
    REQUIRE(losses.back() < 0.1);
}

TEST_CASE("train_realizer: blinding disabled is deterministic; schedule counts are exact") {
    auto run = [](std::uint64_t seed) {
        Fixture fx(seed);
        Rng rng(seed + 5);
        std::vector<RealizerSample<double>> samples(2);
        for (auto& s : samples) {
            s.features = Tensor<double>::randn(2, 3, rng);
            s.concepts = {{"dog"}, {"park"}};
            s.story = {{"dog"}, {"park", "tree"}};
        }
        TrainSchedule sched;
        sched.epochs = 4;
        sched.noise = true;
        sched.seed = 99;
        return train_realizer(fx.store, fx.cfg, fx.vocab, samples, sched);
    };
    auto a = run(21), b = run(21);
    REQUIRE(a == b);

    // Blinding: one image from epoch 2, two from epoch 3 -- asserted per batch.
    Fixture fx(23);
    Rng rng(24);
    std::vector<RealizerSample<double>> samples(3);
    for (auto& s : samples) {
        s.features = Tensor<double>::randn(3, 3, rng);
        s.concepts = {{"dog"}, {"park"}, {"tree"}};
        s.story = {{"dog"}, {"park"}, {"tree"}};
    }
    TrainSchedule sched;
    sched.epochs = 4;
    sched.noise = false;
    sched.blind_one_from = 2;
    sched.blind_two_from = 3;
    train_realizer(fx.store, fx.cfg, fx.vocab, samples, sched,
                   [&](int epoch, const std::vector<int>& blinded) {
                       std::size_t expect = epoch >= 3 ? 2 : epoch >= 2 ? 1 : 0;
                       REQUIRE(blinded.size() == expect);
                   });
}

TEST_CASE("beam_decode: width one equals greedy argmax decoding") {
    for (int trial = 0; trial < 100; ++trial) {
        Fixture fx(100 + std::uint64_t(trial));
        auto input = fx.input(2, 7 + std::uint64_t(trial));
        auto beam = beam_decode(fx.store, fx.cfg, fx.vocab, input, 1, 6);
        // Greedy reference via direct step calls.
        Tape<double> tape;
        TapeBind<double> P(tape, fx.store);
        auto enc = encode_images_t(tape, P, "enc", fx.cfg.encoder(), tape.leaf(input.features));
        for (int i = 0; i < 2; ++i) {
            auto image_feat = tape.slice_rows(enc, i, i + 1);
            auto pooled = pooled_concepts_t(tape, P, fx.cfg, fx.vocab, input.concepts[std::size_t(i)]);
            auto h = tape.leaf(Tensor<double>::zeros(1, fx.cfg.d_h));
            std::vector<std::string> sentence;
            int prev = Vocabulary::kStart;
            for (int t = 0; t < 6; ++t) {
                auto step = decode_step_t(tape, P, h, tape.gather_rows(P("real.emb"), {prev}),
                                          image_feat, pooled);
                auto pi = tape.softmax_rows(step.logits);
                int best = -1;
                for (int v = 0; v < fx.vocab.size(); ++v) {
                    if (!decodable_token(v)) continue;
                    if (best < 0 || tape.val(pi).at(0, v) > tape.val(pi).at(0, best)) best = v;
                }
                sentence.push_back(fx.vocab.token(best));
                if (best == Vocabulary::kEos) break;
                prev = best;
                h = step.hidden;
            }
            if (sentence.empty() || sentence.back() != "</s>") sentence.push_back("</s>");
            REQUIRE(beam.sentences[std::size_t(i)] == sentence);
        }
    }
}

TEST_CASE("beam_decode: wide beam equals the exhaustive optimum on a 4-token vocabulary") {
    for (int trial = 0; trial < 10; ++trial) {
        Fixture fx(300 + std::uint64_t(trial));  // vocab: 4 content tokens + specials
        auto input = fx.input(1, 40 + std::uint64_t(trial));
        int max_len = 3;
        auto draft = beam_decode(fx.store, fx.cfg, fx.vocab, input, 200, max_len);

        // Exhaustive enumeration over decodable token sequences.
        Tape<double> tape;
        TapeBind<double> P(tape, fx.store);
        auto enc = encode_images_t(tape, P, "enc", fx.cfg.encoder(), tape.leaf(input.features));
        auto image_feat = tape.slice_rows(enc, 0, 1);
        auto pooled = pooled_concepts_t(tape, P, fx.cfg, fx.vocab, input.concepts[0]);
        std::vector<int> decodable;
        for (int v = 0; v < fx.vocab.size(); ++v)
            if (decodable_token(v)) decodable.push_back(v);

        double best_score = -1e300;
        std::vector<int> best_seq;
        std::function<void(std::vector<int>&, double, Tape<double>::Id)> walk =
            [&](std::vector<int>& seq, double logp, Tape<double>::Id h) {
                bool terminated = !seq.empty() && seq.back() == Vocabulary::kEos;
                if (terminated || int(seq.size()) == max_len) {
                    double norm = logp / std::pow(double(seq.size()), 0.7);
                    if (norm > best_score) {
                        best_score = norm;
                        best_seq = seq;
                    }
                    return;
                }
                int prev = seq.empty() ? Vocabulary::kStart : seq.back();
                auto step = decode_step_t(tape, P, h, tape.gather_rows(P("real.emb"), {prev}),
                                          image_feat, pooled);
                auto pi = tape.softmax_rows(step.logits);
                for (int v : decodable) {
                    seq.push_back(v);
                    walk(seq, logp + std::log(tape.val(pi).at(0, v)), step.hidden);
                    seq.pop_back();
                }
            };
        std::vector<int> seq;
        walk(seq, 0.0, tape.leaf(Tensor<double>::zeros(1, fx.cfg.d_h)));

        std::vector<std::string> expect;
        for (int id : best_seq) expect.push_back(fx.vocab.token(id));
        if (expect.empty() || expect.back() != "</s>") expect.push_back("</s>");
        REQUIRE(draft.sentences[0] == expect);
    }
}

TEST_CASE("beam_decode: repeated runs give identical drafts") {
    Fixture fx(31);
    auto input = fx.input(3, 9);
    auto a = beam_decode(fx.store, fx.cfg, fx.vocab, input, 3, 8);
    auto b = beam_decode(fx.store, fx.cfg, fx.vocab, input, 3, 8);
    REQUIRE(a.sentences == b.sentences);
    REQUIRE(a.merged == b.merged);
    REQUIRE(a.sentences.size() == 3);
    for (const auto& s : a.sentences) REQUIRE(s.back() == "</s>");
}

TEST_CASE("nucleus_decode: p=1, temperature=1 samples the unmodified distribution") {
    Fixture fx(37);
    auto input = fx.input(1, 11);
    int checked = 0;
    auto draft = nucleus_decode(fx.store, fx.cfg, fx.vocab, input, 1.0, 1.0, 5, 6,
                                [&](const std::vector<int>& nucleus, int chosen) {
                                    // Full nucleus: every decodable token retained.
                                    REQUIRE(int(nucleus.size()) == 4 + 1);  // 4 words + </s>
                                    REQUIRE(std::find(nucleus.begin(), nucleus.end(), chosen) !=
                                            nucleus.end());
                                    ++checked;
                                });
    REQUIRE(checked > 0);
    REQUIRE(draft.sentences.size() == 1);
}

TEST_CASE("nucleus_decode: p below the top probability degenerates to greedy") {
    Fixture fx(41);
    auto input = fx.input(2, 13);
    auto greedy = beam_decode(fx.store, fx.cfg, fx.vocab, input, 1, 6);
    auto nucleus = nucleus_decode(fx.store, fx.cfg, fx.vocab, input, 1.0, 1e-9, 77, 6);
    REQUIRE(nucleus.sentences == greedy.sentences);
}

TEST_CASE("nucleus_decode: every sampled token lies in the retained set; mass is minimal") {
    Fixture fx(43);
    auto input = fx.input(2, 17);
    int steps = 0;
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        nucleus_decode(fx.store, fx.cfg, fx.vocab, input, 0.9, 0.9, seed, 5,
                       [&](const std::vector<int>& nucleus, int chosen) {
                           ++steps;
                           REQUIRE(std::find(nucleus.begin(), nucleus.end(), chosen) !=
                                   nucleus.end());
                       });
    }
    REQUIRE(steps >= 600);
}

TEST_CASE("nucleus_decode: identical seeds give identical drafts, different seeds may differ") {
    Fixture fx(47);
    auto input = fx.input(2, 19);
    auto a = nucleus_decode(fx.store, fx.cfg, fx.vocab, input, 0.9, 0.9, 123, 8);
    auto b = nucleus_decode(fx.store, fx.cfg, fx.vocab, input, 0.9, 0.9, 123, 8);
    REQUIRE(a.sentences == b.sentences);
    REQUIRE(a.meta.rng_seed == 123);
}

TEST_CASE("template_realize: concepts embedded verbatim, template #1 exact") {
    auto draft = template_realize({{"dog", "park"}});
    REQUIRE(StoryDraft::sentence_string(draft.sentences[0]) == "there was a dog at the park .");

    auto empty = template_realize({{}});
    REQUIRE(StoryDraft::sentence_string(empty.sentences[0]) == "it was a quiet moment .");

    std::vector<std::vector<std::string>> plan = {{"dog"}, {"dog", "park", "tree", "sun"}, {}};
    auto multi = template_realize(plan);
    REQUIRE(multi.sentences.size() == 3);
    for (std::size_t i = 0; i < plan.size(); ++i) {
        auto line = StoryDraft::sentence_string(multi.sentences[i]);
        for (const auto& c : plan[i]) REQUIRE(line.find(c) != std::string::npos);
        REQUIRE(multi.sentences[i].back() == "</s>");
    }
}

TEST_CASE("external_realize: request serialization counts separators") {
    std::vector<std::vector<std::string>> groups = {{"a", "b"}, {"c"}, {}, {"d"}, {"e"}};
    auto tokens = external_request_tokens(groups);
    int seps = 0;
    for (const auto& t : tokens) seps += t == "<sep>" ? 1 : 0;
    REQUIRE(seps == 2 * 5 - 1);  // N image separators + N-1 group separators
    int imgs = 0;
    for (const auto& t : tokens) imgs += t.rfind("<img_", 0) == 0 ? 1 : 0;
    REQUIRE(imgs == 5);
}

TEST_CASE("external_realize: missing endpoint falls back to the template when permitted") {
    RealizerInput<double> input;
    input.sequence_id = "s";
    input.features = Tensor<double>({2, 3});
    input.concepts = {{"dog"}, {"park"}};
    ExternalRealizerConfig cfg;
    cfg.command = "";
    cfg.fallback_to_template = true;
    std::vector<std::string> diags;
    auto draft = external_realize(input, cfg, &diags);
    REQUIRE(draft.meta.strategy == "external-fallback-template");
    REQUIRE(draft.sentences.size() == 2);
    REQUIRE(diags.size() == 1);

    cfg.fallback_to_template = false;
    REQUIRE_THROWS_AS(external_realize(input, cfg), RealizationError);
}

TEST_CASE("external_realize: wrong sentence count is a realization error") {
    RealizerInput<double> input;
    input.sequence_id = "s";
    input.features = Tensor<double>({2, 2});
    input.concepts = {{"dog"}, {"park"}};
    // A stub endpoint that always returns one sentence.
    fs::path stub = fs::temp_directory_path() / "vist_bad_realizer.sh";
    {
        std::ofstream os(stub);
        os << "#!/bin/sh\ncat > /dev/null\necho '{\"sentences\": [[\"only\",\"one\"]]}'\n";
    }
    fs::permissions(stub, fs::perms::owner_all);
    ExternalRealizerConfig cfg;
    cfg.command = stub.string();
    cfg.fallback_to_template = false;
    REQUIRE_THROWS_AS(external_realize(input, cfg), RealizationError);
    fs::remove(stub);
}
