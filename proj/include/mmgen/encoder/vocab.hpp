#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mmgen/core/error.hpp"
#include "mmgen/scenegen/sample.hpp"

namespace mmgen::encoder {

// Closed word-level vocabulary over the caption grammar plus the special
// tokens. Word ids are stable for a given word list; checkpoints store the
// list verbatim.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kNull = 1;
    static constexpr int kImgStart = 2;
    static constexpr int kImgEnd = 3;

    static Vocab from_words(std::vector<std::string> words) {
        Vocab v;
        v.words_ = std::move(words);
        for (size_t i = 0; i < v.words_.size(); ++i) v.index_[v.words_[i]] = static_cast<int>(i);
        for (const char* s : {"<pad>", "<null>", "<img_start>", "<img_end>"})
            if (!v.index_.count(s)) throw ConfigError("vocab missing special token " + std::string(s));
        if (v.index_.at("<pad>") != kPad || v.index_.at("<null>") != kNull ||
            v.index_.at("<img_start>") != kImgStart || v.index_.at("<img_end>") != kImgEnd)
            throw ConfigError("vocab special tokens must occupy the first four ids");
        return v;
    }

    // Grammar words in a canonical order: specials, function words, palette
    // colors, class words, style names.
    static Vocab default_vocab() {
        std::vector<std::string> words = {"<pad>", "<null>", "<img_start>", "<img_end>",
                                          "a", "and", "in", "style"};
        for (const auto& c : scenegen::palette()) words.push_back(c.name);
        for (auto cls : scenegen::all_classes()) words.push_back(scenegen::class_word(cls));
        for (const auto& s : scenegen::default_style_pool()) words.push_back(s.name);
        return from_words(std::move(words));
    }

    int size() const { return static_cast<int>(words_.size()); }
    const std::vector<std::string>& words() const { return words_; }
    const std::string& word(int id) const { return words_.at(static_cast<size_t>(id)); }

    int id(const std::string& w) const {
        auto it = index_.find(w);
        if (it == index_.end()) throw ParseError("out-of-vocabulary word: '" + w + "'");
        return it->second;
    }

    // Whitespace tokenization; the grammar has no punctuation.
    std::vector<int> tokenize(const std::string& text) const {
        std::vector<int> ids;
        std::istringstream is(text);
        std::string w;
        while (is >> w) ids.push_back(id(w));
        return ids;
    }

private:
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
};

}  // namespace mmgen::encoder
