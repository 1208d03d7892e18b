#pragma once

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "xling/error.hpp"
#include "xling/rng.hpp"
#include "xling/vocab.hpp"

namespace xling {

// ASCII lowercasing; multi-byte UTF-8 sequences pass through untouched.
// Corpora for non-Latin scripts are expected pre-lowercased.
inline std::string lowercase(const std::string& s) {
    std::string out = s;
    for (char& c : out)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return out;
}

inline std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream iss(line);
    std::string tok;
    while (iss >> tok) out.push_back(tok);
    return out;
}

using Sentence = std::vector<int>;  // token ids, no BOS/EOS

struct SentencePair {
    Sentence src;
    Sentence tgt;
};

// One line-aligned bitext between a (source, target) language pair.
struct PairCorpus {
    int src_lang = 0;
    int tgt_lang = 0;
    std::vector<SentencePair> pairs;

    int size() const { return static_cast<int>(pairs.size()); }
};

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

// Incrementally builds per-language vocabularies while loading bitexts, so
// one language can appear in several parallel corpora (the multilingual
// case) with a single shared vocabulary.
class CorpusBuilder {
public:
    int language(const std::string& tag) {
        for (std::size_t i = 0; i < vocabs_.size(); ++i)
            if (vocabs_[i].lang() == tag) return static_cast<int>(i);
        vocabs_.emplace_back(tag);
        return static_cast<int>(vocabs_.size()) - 1;
    }

    // Tokens are lowercased on load. Rejects length-mismatched files (with
    // both counts) and empty lines (with the 1-based line number).
    PairCorpus add_pair(const std::string& src_tag, const std::string& src_path,
                        const std::string& tgt_tag, const std::string& tgt_path) {
        std::vector<std::string> src_lines = read_lines(src_path);
        std::vector<std::string> tgt_lines = read_lines(tgt_path);
        if (src_lines.size() != tgt_lines.size())
            throw DataError("line count mismatch: " + src_path + " has " +
                            std::to_string(src_lines.size()) + " lines, " + tgt_path + " has " +
                            std::to_string(tgt_lines.size()));
        PairCorpus corpus;
        corpus.src_lang = language(src_tag);
        corpus.tgt_lang = language(tgt_tag);
        for (std::size_t i = 0; i < src_lines.size(); ++i) {
            SentencePair pair;
            pair.src = tokenize_train(src_lines[i], corpus.src_lang, src_path, i + 1);
            pair.tgt = tokenize_train(tgt_lines[i], corpus.tgt_lang, tgt_path, i + 1);
            corpus.pairs.push_back(std::move(pair));
        }
        return corpus;
    }

    // Tokenization against a frozen vocabulary: unseen words map to UNK.
    Sentence tokenize_frozen(const std::string& line, int lang) const {
        Sentence out;
        for (const std::string& tok : split_ws(lowercase(line)))
            out.push_back(vocabs_[lang].lookup(tok));
        return out;
    }

    std::vector<Vocabulary>& vocabs() { return vocabs_; }
    const std::vector<Vocabulary>& vocabs() const { return vocabs_; }

private:
    Sentence tokenize_train(const std::string& line, int lang, const std::string& path,
                            std::size_t line_no) {
        std::vector<std::string> toks = split_ws(lowercase(line));
        if (toks.empty())
            throw DataError("empty line " + std::to_string(line_no) + " in " + path);
        Sentence out;
        out.reserve(toks.size());
        for (const std::string& tok : toks) out.push_back(vocabs_[lang].add(tok));
        return out;
    }

    std::vector<Vocabulary> vocabs_;
};

// Convenience wrapper for the bilingual case.
struct LoadedPair {
    PairCorpus corpus;
    std::vector<Vocabulary> vocabs;
};

inline LoadedPair load_parallel(const std::string& src_tag, const std::string& src_path,
                                const std::string& tgt_tag, const std::string& tgt_path) {
    CorpusBuilder builder;
    PairCorpus corpus = builder.add_pair(src_tag, src_path, tgt_tag, tgt_path);
    return {std::move(corpus), std::move(builder.vocabs())};
}

// One epoch's worth of training items, oversampled so every language pair
// contributes exactly max-pair-size items, then globally shuffled.
struct ScheduleItem {
    int corpus;  // index into the corpora list
    int pair;    // sentence pair index within that corpus
};

inline std::vector<ScheduleItem> oversample(const std::vector<PairCorpus>& corpora, Rng& rng) {
    if (corpora.empty()) throw DataError("oversample: no corpora");
    int target = 0;
    for (const auto& c : corpora) target = std::max(target, c.size());
    std::vector<ScheduleItem> schedule;
    schedule.reserve(static_cast<std::size_t>(target) * corpora.size());
    for (int ci = 0; ci < static_cast<int>(corpora.size()); ++ci) {
        const int n = corpora[ci].size();
        if (n == 0) throw DataError("oversample: empty corpus");
        for (int rep = 0; rep < target / n; ++rep)
            for (int j = 0; j < n; ++j) schedule.push_back({ci, j});
        // Remainder drawn without replacement so coverage stays even.
        const int rem = target % n;
        if (rem > 0) {
            std::vector<int> ids(n);
            for (int j = 0; j < n; ++j) ids[j] = j;
            rng.shuffle(ids);
            for (int j = 0; j < rem; ++j) schedule.push_back({ci, ids[j]});
        }
    }
    rng.shuffle(schedule);
    return schedule;
}

// Pseudo bilingual dictionary from sentence-level co-occurrence. For words x
// (source side) and y (target side): dice = 2*n_xy / (n_x + n_y) over
// sentence-presence counts; entries need n_x, n_y >= min_count and
// dice >= threshold. Output is sorted by (src id, tgt id).
struct DictEntry {
    int src = 0;
    int tgt = 0;
    double dice = 0.0;
};

inline std::vector<DictEntry> dice_dictionary(const PairCorpus& corpus, int min_count = 3,
                                              double threshold = 0.8) {
    std::unordered_map<int, int> n_src, n_tgt;
    std::unordered_map<long long, int> n_both;
    for (const auto& pair : corpus.pairs) {
        std::set<int> src_set(pair.src.begin(), pair.src.end());
        std::set<int> tgt_set(pair.tgt.begin(), pair.tgt.end());
        for (int x : src_set) n_src[x] += 1;
        for (int y : tgt_set) n_tgt[y] += 1;
        for (int x : src_set)
            for (int y : tgt_set) n_both[(static_cast<long long>(x) << 32) | static_cast<unsigned>(y)] += 1;
    }
    std::vector<DictEntry> out;
    for (const auto& [key, nxy] : n_both) {
        const int x = static_cast<int>(key >> 32);
        const int y = static_cast<int>(key & 0xFFFFFFFFLL);
        if (n_src[x] < min_count || n_tgt[y] < min_count) continue;
        const double dice = 2.0 * nxy / (n_src[x] + n_tgt[y]);
        if (dice >= threshold) out.push_back({x, y, dice});
    }
    std::sort(out.begin(), out.end(), [](const DictEntry& a, const DictEntry& b) {
        return a.src != b.src ? a.src < b.src : a.tgt < b.tgt;
    });
    return out;
}

}  // namespace xling
