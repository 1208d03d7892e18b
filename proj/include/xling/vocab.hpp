#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "xling/error.hpp"

namespace xling {

// Per-language word <-> id map. Ids 0..3 are reserved for BOS, EOS, UNK and
// PAD; real words occupy a dense range above them.
class Vocabulary {
public:
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kUnk = 2;
    static constexpr int kPad = 3;
    static constexpr int kReserved = 4;

    explicit Vocabulary(std::string lang = "") : lang_(std::move(lang)) {
        for (const char* w : {"<bos>", "<eos>", "<unk>", "<pad>"}) add_internal(w);
    }

    const std::string& lang() const { return lang_; }

    int add(const std::string& word) {
        auto it = index_.find(word);
        if (it != index_.end()) return it->second;
        return add_internal(word);
    }

    // Unknown words map to UNK; words never "fail" to look up.
    int lookup(const std::string& word) const {
        auto it = index_.find(word);
        return it == index_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& word) const { return index_.count(word) != 0; }

    const std::string& word(int id) const {
        if (id < 0 || id >= static_cast<int>(words_.size()))
            throw DataError("vocabulary id out of range: " + std::to_string(id));
        return words_[id];
    }

    int size() const { return static_cast<int>(words_.size()); }
    int word_count() const { return size() - kReserved; }  // excluding reserved ids
    static bool is_reserved(int id) { return id < kReserved; }

private:
    int add_internal(const std::string& word) {
        int id = static_cast<int>(words_.size());
        words_.push_back(word);
        index_.emplace(word, id);
        return id;
    }

    std::string lang_;
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace xling
