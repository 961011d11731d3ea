#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "vist/data.hpp"
#include "vist/graph.hpp"

namespace vist {

struct PrfResult {
    double precision = 0;
    double recall = 0;
    double f = 0;
};

inline double harmonic_mean(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0; }

// Concept selection P/R/F of one sequence. For each gold story g, the target
// set is C_T(g) = C_S n C_G(g); the story maximizing f is reported. Empty
// selection or empty targets scores (0,0,0).
inline PrfResult concept_prf(const std::vector<std::string>& selected,
                             const std::set<std::string>& candidate_strings,
                             const std::vector<std::set<std::string>>& gold_word_sets) {
    std::set<std::string> sel(selected.begin(), selected.end());
    PrfResult best;
    for (const auto& cg : gold_word_sets) {
        std::set<std::string> ct;
        for (const auto& c : candidate_strings)
            if (cg.count(c)) ct.insert(c);
        if (sel.empty() || ct.empty()) continue;
        int hit = 0;
        for (const auto& s : sel)
            if (ct.count(s)) ++hit;
        PrfResult r;
        r.precision = double(hit) / double(sel.size());
        r.recall = double(hit) / double(ct.size());
        r.f = harmonic_mean(r.precision, r.recall);
        if (r.f > best.f || (r.f == best.f && r.precision > best.precision)) best = r;
    }
    return best;
}

// Seeded uniform choice of min(3, K) concepts per image.
inline std::vector<std::vector<std::string>> rand_baseline(
    const std::vector<std::vector<std::string>>& candidates_by_image, int k_per_image,
    std::uint64_t rng_seed) {
    std::vector<std::vector<std::string>> out;
    Rng rng(rng_seed ^ 0x4a2dULL);
    for (const auto& cands : candidates_by_image) {
        if (cands.empty()) throw DataError("rand baseline requires >= 1 candidate per image");
        int k = std::min<int>(k_per_image, int(cands.size()));
        auto picks = sample_without_replacement(cands.size(), std::size_t(k), rng);
        std::vector<std::string> sel;
        for (auto p : picks) sel.push_back(cands[p]);
        out.push_back(std::move(sel));
    }
    return out;
}

// ---- diversity ----

// |unique n-grams| / |total n-gram tokens| over all stories. Stories shorter
// than n contribute nothing; an all-short corpus scores 0 with a warning.
inline double distinct_n(const std::vector<std::vector<std::string>>& stories, int n,
                         std::vector<std::string>* diagnostics = nullptr) {
    if (n < 1) throw ConfigError("distinct_n requires n >= 1");
    std::set<std::vector<std::string>> unique;
    std::size_t total = 0;
    for (const auto& story : stories) {
        if (int(story.size()) < n) continue;
        for (std::size_t i = 0; i + std::size_t(n) <= story.size(); ++i) {
            unique.insert(std::vector<std::string>(story.begin() + long(i), story.begin() + long(i + std::size_t(n))));
            ++total;
        }
    }
    if (total == 0) {
        if (diagnostics) diagnostics->push_back("distinct_n: all stories shorter than n");
        return 0;
    }
    return double(unique.size()) / double(total);
}

// ---- corpus BLEU (modified n-gram precision, uniform weights, brevity penalty) ----

namespace detail {

inline std::map<std::vector<std::string>, int> ngram_counts(const std::vector<std::string>& toks,
                                                            int n) {
    std::map<std::vector<std::string>, int> counts;
    if (int(toks.size()) < n) return counts;
    for (std::size_t i = 0; i + std::size_t(n) <= toks.size(); ++i)
        counts[std::vector<std::string>(toks.begin() + long(i), toks.begin() + long(i + std::size_t(n)))] += 1;
    return counts;
}

}  // namespace detail

// Corpus-level BLEU over aligned candidate/reference-list pairs. Standard
// smoothing disabled: any empty clipped count zeroes the score.
inline double bleu_n(const std::vector<std::vector<std::string>>& candidates,
                     const std::vector<std::vector<std::vector<std::string>>>& references,
                     int n_max = 4) {
    if (candidates.size() != references.size())
        throw ConfigError("bleu: candidate/reference count mismatch");
    std::vector<std::int64_t> clipped(std::size_t(n_max), 0), totals(std::size_t(n_max), 0);
    std::int64_t cand_len = 0, ref_len = 0;
    for (std::size_t s = 0; s < candidates.size(); ++s) {
        const auto& cand = candidates[s];
        const auto& refs = references[s];
        if (refs.empty()) throw ConfigError("bleu: every candidate needs >= 1 reference");
        cand_len += std::int64_t(cand.size());
        // Closest reference length (ties -> shorter).
        std::int64_t best_ref = std::int64_t(refs[0].size());
        for (const auto& r : refs) {
            auto len = std::int64_t(r.size());
            if (std::abs(len - std::int64_t(cand.size())) <
                    std::abs(best_ref - std::int64_t(cand.size())) ||
                (std::abs(len - std::int64_t(cand.size())) ==
                     std::abs(best_ref - std::int64_t(cand.size())) &&
                 len < best_ref))
                best_ref = len;
        }
        ref_len += best_ref;
        for (int n = 1; n <= n_max; ++n) {
            auto cc = detail::ngram_counts(cand, n);
            std::map<std::vector<std::string>, int> max_ref;
            for (const auto& r : refs)
                for (const auto& [g, c] : detail::ngram_counts(r, n))
                    max_ref[g] = std::max(max_ref[g], c);
            for (const auto& [g, c] : cc) {
                totals[std::size_t(n - 1)] += c;
                auto it = max_ref.find(g);
                if (it != max_ref.end()) clipped[std::size_t(n - 1)] += std::min(c, it->second);
            }
        }
    }
    double log_sum = 0;
    for (int n = 1; n <= n_max; ++n) {
        if (clipped[std::size_t(n - 1)] == 0 || totals[std::size_t(n - 1)] == 0) return 0;
        log_sum += std::log(double(clipped[std::size_t(n - 1)]) / double(totals[std::size_t(n - 1)])) /
                   double(n_max);
    }
    double bp = cand_len < ref_len && cand_len > 0
                    ? std::exp(1.0 - double(ref_len) / double(cand_len))
                    : 1.0;
    if (cand_len == 0) return 0;
    return bp * std::exp(log_sum);
}

// ---- ROUGE-L (LCS F-measure, beta = 1.2 as in the common implementation) ----

inline int lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            if (a[i - 1] == b[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline double rouge_l(const std::vector<std::string>& candidate,
                      const std::vector<std::vector<std::string>>& references) {
    if (references.empty()) throw ConfigError("rouge_l needs >= 1 reference");
    if (candidate.empty()) return 0;
    constexpr double kBeta = 1.2;
    double best = 0;
    for (const auto& ref : references) {
        if (ref.empty()) continue;
        double lcs = lcs_length(candidate, ref);
        if (lcs == 0) continue;
        double p = lcs / double(candidate.size());
        double r = lcs / double(ref.size());
        double f = (1 + kBeta * kBeta) * p * r / (r + kBeta * kBeta * p);
        best = std::max(best, f);
    }
    return best;
}

// ---- Pearson correlation ----

inline double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2)
        throw ConfigError("pearson requires two equally sized samples of >= 2 points");
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= double(xs.size());
    my /= double(ys.size());
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    if (sxx == 0 || syy == 0) throw NumericError("pearson undefined for zero-variance input");
    return sxy / std::sqrt(sxx * syy);
}

// ---- benchmark runner ----

struct PlannerRun {
    std::string name;
    // sequence_id -> per-image selected concepts; missing sequences score 0.
    std::map<std::string, std::vector<std::vector<std::string>>> selections;
};

struct BenchmarkRow {
    std::string name;
    double precision = 0, recall = 0, f = 0;  // macro averages in [0,1]
    int failures = 0;
};

struct BenchmarkReport {
    std::vector<BenchmarkRow> rows;
    std::vector<std::string> diagnostics;
};

// Macro-averaged P/R/F per planner over (record, graph) pairs. A planner
// failure on a sequence is recorded as a zero score and the run continues.
inline BenchmarkReport benchmark(const std::vector<PlannerRun>& planners,
                                 const std::vector<SequenceRecord>& records,
                                 const std::vector<CandidateGraph>& graphs,
                                 const std::set<std::string>& stopwords) {
    if (records.size() != graphs.size()) throw ConfigError("benchmark: records/graphs mismatch");
    BenchmarkReport report;
    for (const auto& planner : planners) {
        BenchmarkRow row;
        row.name = planner.name;
        double sp = 0, sr = 0, sf = 0;
        for (std::size_t s = 0; s < records.size(); ++s) {
            const auto& rec = records[s];
            std::set<std::string> cs;
            for (const auto& n : graphs[s].nodes) cs.insert(n.word);
            std::vector<std::set<std::string>> golds;
            for (const auto& story : rec.gold_stories)
                golds.push_back(gold_concepts(story, stopwords));
            auto it = planner.selections.find(rec.sequence_id);
            if (it == planner.selections.end()) {
                ++row.failures;
                report.diagnostics.push_back(planner.name + ": no selection for sequence " +
                                             rec.sequence_id + ", scored 0");
                continue;
            }
            std::vector<std::string> flat;
            for (const auto& group : it->second)
                flat.insert(flat.end(), group.begin(), group.end());
            auto prf = concept_prf(flat, cs, golds);
            sp += prf.precision;
            sr += prf.recall;
            sf += prf.f;
        }
        auto n = double(records.size());
        row.precision = sp / n;
        row.recall = sr / n;
        row.f = sf / n;
        report.rows.push_back(std::move(row));
    }
    return report;
}

// Fixed column ordering: Precision, Recall, F (reported x100).
inline std::string benchmark_table(const BenchmarkReport& report) {
    std::string out = "method\tprecision\trecall\tf\n";
    char buf[128];
    for (const auto& row : report.rows) {
        std::snprintf(buf, sizeof(buf), "%s\t%.2f\t%.2f\t%.2f\n", row.name.c_str(),
                      row.precision * 100, row.recall * 100, row.f * 100);
        out += buf;
    }
    return out;
}

}  // namespace vist
