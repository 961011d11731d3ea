#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "vist/common.hpp"

namespace vist {

using Json = nlohmann::json;

// ---- tokenization ----

// Lowercase; tokens are maximal runs of [a-z0-9']; punctuation is dropped.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        char c = char(std::tolower(static_cast<unsigned char>(ch)));
        if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '\'') {
            cur.push_back(c);
        } else if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

inline std::string lowercase(std::string s) {
    for (char& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

// ---- domain types ----

struct ImageEntry {
    std::string image_id;
    std::vector<double> feature;            // D_img activations
    std::vector<std::string> seed_concepts; // <= 10 detector outputs
};

// One gold story = one token list per image position.
using GoldStory = std::vector<std::vector<std::string>>;

struct SequenceRecord {
    std::string sequence_id;
    std::vector<ImageEntry> images;
    std::vector<GoldStory> gold_stories;

    int n_images() const { return int(images.size()); }
};

struct Vocabulary {
    // Special ids, fixed and dense from 0.
    static constexpr int kPad = 0;
    static constexpr int kStart = 1;  // start-of-story
    static constexpr int kEos = 2;    // end-of-sentence
    static constexpr int kSep = 3;
    static constexpr int kMask = 4;
    static constexpr int kUnk = 5;
    static constexpr int kNumSpecials = 6;

    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, int> token_to_id;

    Vocabulary() {
        for (const char* s : {"<pad>", "<s>", "</s>", "<sep>", "<mask>", "<unk>"}) add(s);
    }

    int add(const std::string& tok) {
        auto it = token_to_id.find(tok);
        if (it != token_to_id.end()) return it->second;
        int id = int(id_to_token.size());
        id_to_token.push_back(tok);
        token_to_id.emplace(tok, id);
        return id;
    }

    int id(const std::string& tok) const {
        auto it = token_to_id.find(tok);
        return it == token_to_id.end() ? kUnk : it->second;
    }

    const std::string& token(int id) const { return id_to_token[std::size_t(id)]; }
    int size() const { return int(id_to_token.size()); }
};

struct CorpusStats {
    // frequency(c) = number of gold sentences containing c (presence based).
    std::unordered_map<std::string, std::int64_t> frequency;
    // Unordered-pair co-occurrence, sentence and story granularity.
    std::map<std::pair<std::string, std::string>, std::int64_t> sentence_cooc;
    std::map<std::pair<std::string, std::string>, std::int64_t> story_cooc;

    static std::pair<std::string, std::string> key(const std::string& a, const std::string& b) {
        return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
    }

    std::int64_t freq(const std::string& c) const {
        auto it = frequency.find(c);
        return it == frequency.end() ? 0 : it->second;
    }
    std::int64_t sent_cooc(const std::string& a, const std::string& b) const {
        auto it = sentence_cooc.find(key(a, b));
        return it == sentence_cooc.end() ? 0 : it->second;
    }
    std::int64_t story_cooc_count(const std::string& a, const std::string& b) const {
        auto it = story_cooc.find(key(a, b));
        return it == story_cooc.end() ? 0 : it->second;
    }
};

struct KnowledgeEdgeList {
    // Unordered concept pairs, deduplicated, no self-pairs. Relation labels
    // are dropped on ingestion.
    std::set<std::pair<std::string, std::string>> edges;
    std::unordered_map<std::string, std::vector<std::string>> adjacency;

    void add(const std::string& a, const std::string& b) {
        if (a == b) return;
        auto k = a < b ? std::make_pair(a, b) : std::make_pair(b, a);
        if (!edges.insert(k).second) return;
        adjacency[a].push_back(b);
        adjacency[b].push_back(a);
    }

    bool related(const std::string& a, const std::string& b) const {
        if (a == b) return false;
        auto k = a < b ? std::make_pair(a, b) : std::make_pair(b, a);
        return edges.count(k) != 0;
    }

    std::vector<std::string> neighbors(const std::string& c) const {
        auto it = adjacency.find(c);
        if (it == adjacency.end()) return {};
        auto out = it->second;
        std::sort(out.begin(), out.end());
        return out;
    }
};

// ---- dataset io ----

enum class DatasetSchema { kTrain, kTest };

namespace detail {

inline bool is_header_line(const Json& j) {
    return j.is_object() && j.contains("artifact");
}

inline SequenceRecord record_from_json(const Json& j, int line_no) {
    auto fail = [&](const std::string& msg) {
        throw SchemaError("line " + std::to_string(line_no) + ": " + msg);
    };
    SequenceRecord rec;
    if (!j.is_object() || !j.contains("sequence_id") || !j.contains("images"))
        fail("record must be an object with sequence_id and images");
    rec.sequence_id = j.at("sequence_id").get<std::string>();
    for (const auto& ji : j.at("images")) {
        ImageEntry img;
        img.image_id = ji.value("image_id", "");
        img.feature = ji.at("feature").get<std::vector<double>>();
        for (const auto& s : ji.value("seed_concepts", Json::array()))
            img.seed_concepts.push_back(lowercase(s.get<std::string>()));
        rec.images.push_back(std::move(img));
    }
    if (rec.images.empty()) fail("record has no images");
    std::size_t dim = rec.images[0].feature.size();
    for (std::size_t i = 1; i < rec.images.size(); ++i)
        if (rec.images[i].feature.size() != dim)
            fail("feature dimension mismatch at image " + std::to_string(i) + " (" +
                 std::to_string(rec.images[i].feature.size()) + " vs " + std::to_string(dim) + ")");
    const int n = rec.n_images();
    for (const auto& js : j.value("gold_stories", Json::array())) {
        GoldStory story;
        for (const auto& jsent : js) {
            std::vector<std::string> sent;
            for (const auto& t : jsent) sent.push_back(lowercase(t.get<std::string>()));
            story.push_back(std::move(sent));
        }
        if (int(story.size()) != n)
            fail("gold story has " + std::to_string(story.size()) + " sentence slots, expected " +
                 std::to_string(n));
        rec.gold_stories.push_back(std::move(story));
    }
    return rec;
}

}  // namespace detail

// Line-delimited structured-text records; an optional artifact header line is
// skipped. Record order is preserved.
inline std::vector<SequenceRecord> load_dataset(const std::string& path, DatasetSchema schema) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open dataset: " + path);
    std::vector<SequenceRecord> out;
    std::optional<std::size_t> dim;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        Json j;
        try {
            j = Json::parse(line);
        } catch (const Json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        if (line_no == 1 && detail::is_header_line(j)) continue;
        SequenceRecord rec = detail::record_from_json(j, line_no);
        if (schema == DatasetSchema::kTrain) {
            if (rec.gold_stories.empty())
                throw SchemaError("line " + std::to_string(line_no) +
                                  ": train record requires at least one gold story");
            for (const auto& img : rec.images)
                if (img.seed_concepts.empty())
                    throw SchemaError("line " + std::to_string(line_no) +
                                      ": train record requires non-empty seed_concepts");
        }
        if (dim && rec.images[0].feature.size() != *dim)
            throw SchemaError("line " + std::to_string(line_no) + ": feature dimension " +
                              std::to_string(rec.images[0].feature.size()) +
                              " differs from dataset dimension " + std::to_string(*dim));
        if (!dim) dim = rec.images[0].feature.size();
        out.push_back(std::move(rec));
    }
    return out;
}

inline Json record_to_json(const SequenceRecord& rec) {
    Json j;
    j["sequence_id"] = rec.sequence_id;
    j["images"] = Json::array();
    for (const auto& img : rec.images) {
        Json ji;
        ji["image_id"] = img.image_id;
        ji["feature"] = img.feature;
        ji["seed_concepts"] = img.seed_concepts;
        j["images"].push_back(std::move(ji));
    }
    j["gold_stories"] = rec.gold_stories;
    return j;
}

inline void save_dataset(const std::vector<SequenceRecord>& records, const std::string& path,
                         std::uint64_t seed = 0) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write dataset: " + path);
    os << Json{{"artifact", "dataset"}, {"version", 1}, {"seed", seed}}.dump() << "\n";
    for (const auto& rec : records) os << record_to_json(rec).dump() << "\n";
}

// ---- vocabulary ----

// Tokens ranked by frequency over the gold stories, ties lexicographic,
// total size (specials included) capped.
inline Vocabulary build_vocab(const std::vector<SequenceRecord>& records, int cap) {
    if (cap < Vocabulary::kNumSpecials + 1)
        throw ConfigError("vocab cap must exceed the number of special tokens");
    std::map<std::string, std::int64_t> counts;
    for (const auto& rec : records)
        for (const auto& story : rec.gold_stories)
            for (const auto& sent : story)
                for (const auto& tok : sent) counts[tok] += 1;
    std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary vocab;
    for (const auto& [tok, cnt] : ranked) {
        if (vocab.size() >= cap) break;
        vocab.add(tok);
    }
    return vocab;
}

// ---- corpus statistics ----

inline CorpusStats corpus_stats(const std::vector<SequenceRecord>& records) {
    CorpusStats stats;
    for (const auto& rec : records) {
        for (const auto& story : rec.gold_stories) {
            std::set<std::string> story_set;
            for (const auto& sent : story) {
                std::set<std::string> sent_set(sent.begin(), sent.end());
                for (const auto& tok : sent_set) stats.frequency[tok] += 1;
                for (auto a = sent_set.begin(); a != sent_set.end(); ++a) {
                    auto b = a;
                    for (++b; b != sent_set.end(); ++b)
                        stats.sentence_cooc[CorpusStats::key(*a, *b)] += 1;
                }
                story_set.insert(sent_set.begin(), sent_set.end());
            }
            for (auto a = story_set.begin(); a != story_set.end(); ++a) {
                auto b = a;
                for (++b; b != story_set.end(); ++b)
                    stats.story_cooc[CorpusStats::key(*a, *b)] += 1;
            }
        }
    }
    return stats;
}

// ---- knowledge edges (two-column TSV) ----

inline KnowledgeEdgeList load_knowledge_edges(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open knowledge edges: " + path);
    KnowledgeEdgeList kb;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw ParseError("line " + std::to_string(line_no) + ": expected two tab-separated columns");
        std::string a = lowercase(line.substr(0, tab));
        std::string b = lowercase(line.substr(tab + 1));
        while (!b.empty() && (b.back() == '\r' || b.back() == '\n')) b.pop_back();
        if (a.empty() || b.empty())
            throw ParseError("line " + std::to_string(line_no) + ": empty concept");
        kb.add(a, b);
    }
    return kb;
}

inline void save_knowledge_edges(const KnowledgeEdgeList& kb, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write knowledge edges: " + path);
    for (const auto& [a, b] : kb.edges) os << a << "\t" << b << "\n";
}

// ---- pretrained embedding file: token then D_emb decimal floats per line ----

inline std::unordered_map<std::string, std::vector<double>> load_embedding_file(
    const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open embedding file: " + path);
    std::unordered_map<std::string, std::vector<double>> out;
    std::string line;
    int line_no = 0;
    std::size_t dim = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string tok;
        ss >> tok;
        std::vector<double> vec;
        double x;
        while (ss >> x) vec.push_back(x);
        if (vec.empty()) throw ParseError("line " + std::to_string(line_no) + ": no values");
        if (dim == 0) dim = vec.size();
        if (vec.size() != dim)
            throw SchemaError("line " + std::to_string(line_no) + ": dimension " +
                              std::to_string(vec.size()) + " differs from " + std::to_string(dim));
        out[lowercase(tok)] = std::move(vec);
    }
    return out;
}

// ---- stop words and gold concept sets ----

// Baseline list embedded so the library is usable without data files; the
// shipped data/stopwords.txt has identical content and can be overridden.
inline const std::set<std::string>& default_stopwords() {
    static const std::set<std::string> words = {
        "a",     "about", "after", "again",  "all",   "also",  "am",    "an",    "and",
        "any",   "are",   "as",    "at",     "be",    "been",  "before","being", "but",
        "by",    "came",  "can",   "come",   "could", "did",   "do",    "does",  "down",
        "each",  "for",   "from",  "get",    "got",   "had",   "has",   "have",  "he",
        "her",   "here",  "him",   "his",    "how",   "i",     "if",    "in",    "into",
        "is",    "it",    "its",   "just",   "like",  "lot",   "lots",  "made",  "make",
        "many",  "me",    "more",  "most",   "much",  "my",    "near",  "no",    "not",
        "now",   "of",    "off",   "on",     "one",   "only",  "or",    "other", "our",
        "out",   "over",  "own",   "said",   "saw",   "see",   "she",   "so",    "some",
        "such",  "than",  "that",  "the",    "their", "them",  "then",  "there", "these",
        "they",  "this",  "those", "through","to",    "too",   "took",  "under", "up",
        "us",    "very",  "was",   "we",     "went",  "were",  "what",  "when",  "where",
        "which", "while", "who",   "will",   "with",  "would", "you",   "your"};
    return words;
}

inline std::set<std::string> load_stopwords(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open stopword list: " + path);
    std::set<std::string> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (!line.empty()) out.insert(lowercase(line));
    }
    return out;
}

// C_G for one gold story: the full token set minus stop words.
inline std::set<std::string> gold_concepts(const GoldStory& story,
                                           const std::set<std::string>& stopwords) {
    std::set<std::string> out;
    for (const auto& sent : story)
        for (const auto& tok : sent)
            if (!stopwords.count(tok)) out.insert(tok);
    return out;
}

// Per-image gold set: tokens of sentence i minus stop words.
inline std::set<std::string> gold_concepts_for_image(const GoldStory& story, int image,
                                                     const std::set<std::string>& stopwords) {
    std::set<std::string> out;
    for (const auto& tok : story[std::size_t(image)])
        if (!stopwords.count(tok)) out.insert(tok);
    return out;
}

}  // namespace vist
