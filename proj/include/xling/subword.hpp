#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "xling/error.hpp"
#include "xling/vocab.hpp"

namespace xling {

// UTF-8 codepoint split. Invalid bytes are passed through one at a time so
// segmentation stays total on arbitrary input.
inline std::vector<std::string> utf8_chars(const std::string& s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        unsigned char c = static_cast<unsigned char>(s[i]);
        std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
        if (i + len > s.size()) len = 1;
        out.push_back(s.substr(i, len));
        i += len;
    }
    return out;
}

// Shared cross-lingual subword inventory plus each language's word -> piece
// index lists Q(w). The first piece of every word carries a begin-of-word
// marker, e.g. "puts" -> ["@put", "s"]. Piece ids are shared across
// languages by surface form; id 0 is a catch-all piece for characters never
// seen in training.
class SubwordTable {
public:
    static constexpr char kMarker = '@';
    static constexpr int kUnkPiece = 0;

    SubwordTable() { intern("<unk>"); }

    int intern(const std::string& piece) {
        auto it = piece_index_.find(piece);
        if (it != piece_index_.end()) return it->second;
        int id = static_cast<int>(pieces_.size());
        pieces_.push_back(piece);
        piece_index_.emplace(piece, id);
        return id;
    }

    int piece_id(const std::string& piece) const {
        auto it = piece_index_.find(piece);
        return it == piece_index_.end() ? -1 : it->second;
    }

    const std::string& piece(int id) const { return pieces_[id]; }
    int piece_count() const { return static_cast<int>(pieces_.size()); }

    void set_language_count(int n) {
        word_pieces_.resize(n);
        char_mode_.resize(n, false);
    }

    void set_char_mode(int lang, bool on) { char_mode_[lang] = on; }
    bool char_mode(int lang) const { return char_mode_[lang]; }
    bool empty() const { return pieces_.size() <= 1; }

    // Q(w) for a vocabulary word; reserved ids have no subwords.
    const std::vector<int>& word_pieces(int lang, int word_id) const {
        static const std::vector<int> kNone;
        if (Vocabulary::is_reserved(word_id)) return kNone;
        const auto& per_lang = word_pieces_.at(lang);
        if (word_id >= static_cast<int>(per_lang.size())) return kNone;
        return per_lang[word_id];
    }

    void set_word_pieces(int lang, int word_id, std::vector<int> q) {
        auto& per_lang = word_pieces_.at(lang);
        if (word_id >= static_cast<int>(per_lang.size())) per_lang.resize(word_id + 1);
        per_lang[word_id] = std::move(q);
    }

    // Deterministic left-to-right longest-match segmentation over the piece
    // inventory. The first match must carry the begin marker; characters no
    // piece covers fall back to the shared unknown piece. Total on any word.
    std::vector<int> segment_word(const std::string& word) const {
        std::vector<int> out;
        std::vector<std::string> chars = utf8_chars(word);
        std::size_t pos = 0;
        bool first = true;
        while (pos < chars.size()) {
            int best_id = -1;
            std::size_t best_len = 0;
            std::string cand = first ? std::string(1, kMarker) : std::string();
            for (std::size_t end = pos; end < chars.size(); ++end) {
                cand += chars[end];
                int id = piece_id(cand);
                if (id >= 0) {
                    best_id = id;
                    best_len = end - pos + 1;
                }
            }
            if (best_id < 0) {
                out.push_back(kUnkPiece);
                pos += 1;
            } else {
                out.push_back(best_id);
                pos += best_len;
            }
            first = false;
        }
        if (out.empty()) out.push_back(kUnkPiece);
        return out;
    }

    // Character segmentation (each codepoint its own piece); used for
    // languages flagged char-mode.
    std::vector<int> segment_chars(const std::string& word) const {
        std::vector<int> out;
        bool first = true;
        for (const std::string& c : utf8_chars(word)) {
            int id = piece_id(first ? kMarker + c : c);
            out.push_back(id >= 0 ? id : kUnkPiece);
            first = false;
        }
        if (out.empty()) out.push_back(kUnkPiece);
        return out;
    }

    std::vector<int> segment_for_lang(int lang, const std::string& word) const {
        return char_mode(lang) ? segment_chars(word) : segment_word(word);
    }

    // Reconstruct a word from piece ids by stripping the begin marker and
    // concatenating. Inverse of segmentation for every in-vocabulary word.
    std::string join(const std::vector<int>& ids) const {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const std::string& p = pieces_[ids[i]];
            if (i == 0 && !p.empty() && p[0] == kMarker)
                out += p.substr(1);
            else
                out += p;
        }
        return out;
    }

    int language_count() const { return static_cast<int>(word_pieces_.size()); }

private:
    std::vector<std::string> pieces_;
    std::unordered_map<std::string, int> piece_index_;
    std::vector<std::vector<std::vector<int>>> word_pieces_;  // [lang][word_id]
    std::vector<bool> char_mode_;
};

namespace detail {

// Greedy pair-merge induction for one language: repeatedly merge the most
// frequent adjacent piece pair (frequency weighted by word counts) until the
// inventory reaches the budget or no pair occurs twice. Ties break toward
// the lexicographically smallest pair so induction is deterministic.
struct BpeState {
    std::vector<std::vector<std::string>> words;  // current piece sequences
    std::vector<long long> freq;
    std::vector<std::string> inventory;           // insertion-ordered, unique

    void note_piece(const std::string& p) {
        if (std::find(inventory.begin(), inventory.end(), p) == inventory.end())
            inventory.push_back(p);
    }

    void run(int target_size) {
        for (const auto& w : words)
            for (const auto& p : w) note_piece(p);
        if (static_cast<int>(inventory.size()) > target_size)
            throw ConfigError("subword vocab size " + std::to_string(target_size) +
                              " is below the number of distinct characters (" +
                              std::to_string(inventory.size()) + ")");
        while (static_cast<int>(inventory.size()) < target_size) {
            std::map<std::pair<std::string, std::string>, long long> pair_freq;
            for (std::size_t i = 0; i < words.size(); ++i)
                for (std::size_t j = 0; j + 1 < words[i].size(); ++j)
                    pair_freq[{words[i][j], words[i][j + 1]}] += freq[i];
            std::pair<std::string, std::string> best;
            long long best_count = 0;
            for (const auto& [pair, count] : pair_freq)
                if (count > best_count) {  // std::map order makes ties lexicographic
                    best = pair;
                    best_count = count;
                }
            if (best_count < 2) break;
            const std::string merged = best.first + best.second;
            for (auto& w : words) {
                for (std::size_t j = 0; j + 1 < w.size();) {
                    if (w[j] == best.first && w[j + 1] == best.second) {
                        w[j] = merged;
                        w.erase(w.begin() + j + 1);
                    } else {
                        ++j;
                    }
                }
            }
            inventory.push_back(merged);
        }
    }
};

}  // namespace detail

// Induce a shared subword table from per-language word frequency lists.
// word_freqs[lang] must be in vocabulary id order (reserved ids excluded),
// since entry i is stored as Q(w) for word id kReserved + i. Induction runs
// separately per language (char-mode languages contribute bare characters);
// the resulting inventories are unioned into one id space so pieces
// identical in spelling share an embedding across languages.
inline SubwordTable induce_subwords(
    const std::vector<std::vector<std::pair<std::string, long long>>>& word_freqs,
    int target_size, const std::vector<bool>& char_mode_langs) {
    const int n_langs = static_cast<int>(word_freqs.size());
    SubwordTable table;
    table.set_language_count(n_langs);

    std::vector<std::vector<std::vector<std::string>>> segmented(n_langs);
    for (int lang = 0; lang < n_langs; ++lang) {
        const bool char_mode = lang < static_cast<int>(char_mode_langs.size()) && char_mode_langs[lang];
        table.set_char_mode(lang, char_mode);
        detail::BpeState state;
        for (const auto& [word, f] : word_freqs[lang]) {
            std::vector<std::string> pieces;
            bool first = true;
            for (const std::string& c : utf8_chars(word)) {
                pieces.push_back(first ? SubwordTable::kMarker + c : c);
                first = false;
            }
            state.words.push_back(std::move(pieces));
            state.freq.push_back(f);
        }
        if (!char_mode) state.run(target_size);
        else {
            for (const auto& w : state.words)
                for (const auto& p : w) state.note_piece(p);
        }
        for (const std::string& p : state.inventory) table.intern(p);
        segmented[lang] = std::move(state.words);
    }

    for (int lang = 0; lang < n_langs; ++lang) {
        for (std::size_t i = 0; i < segmented[lang].size(); ++i) {
            std::vector<int> q;
            q.reserve(segmented[lang][i].size());
            for (const std::string& p : segmented[lang][i]) q.push_back(table.intern(p));
            table.set_word_pieces(lang, Vocabulary::kReserved + static_cast<int>(i), std::move(q));
        }
    }
    return table;
}

}  // namespace xling
