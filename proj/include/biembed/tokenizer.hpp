#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "biembed/common.hpp"

// Byte-level BPE tokenizer trained jointly on two corpora. The base alphabet
// is all 256 byte values, so encoding is total on arbitrary input and the UNK
// token is never produced by encode; it exists for the special-token contract
// only. Words are maximal runs of non-whitespace (Unicode-aware), punctuation
// stays attached to its word, and merges never cross word boundaries.

namespace biembed {

using TokenId = std::int32_t;

struct SpecialTokens {
    TokenId pad = 0;
    TokenId unk = 1;
    TokenId cls = 2;
    TokenId sep = 3;
    TokenId mask = 4;
};

// Half-open [begin, end) token range covering one source word.
struct WordSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
};

struct TokenizedText {
    std::vector<TokenId> ids;
    std::vector<WordSpan> word_spans;
};

class BpeModel {
public:
    // Trains on two corpora balanced 1:1 by character count: the larger
    // corpus is consumed only up to the smaller one's byte budget (cut at a
    // line boundary). Greedy merges, deterministic tie-breaking, no RNG.
    static BpeModel train(std::istream& corpus_a, std::istream& corpus_b,
                          std::size_t target_vocab_size);
    static BpeModel train(const std::string& corpus_a, const std::string& corpus_b,
                          std::size_t target_vocab_size);

    TokenizedText encode(const std::string& text) const;
    std::string decode(const std::vector<TokenId>& ids) const;

    std::size_t vocab_size() const { return id_to_token_.size(); }
    std::size_t target_vocab_size() const { return target_vocab_size_; }
    const SpecialTokens& specials() const { return specials_; }
    std::size_t num_merges() const { return merges_.size(); }

    // Token string for an id (byte content for regular tokens, sentinel text
    // like "[CLS]" for specials).
    const std::string& token_string(TokenId id) const;
    bool is_special(TokenId id) const;

    // Ordered merge list as (left, right) token strings, rank order.
    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

    void save(std::ostream& out) const;
    void save_file(const std::string& path) const;
    static BpeModel load(std::istream& in);
    static BpeModel load_file(const std::string& path);

    // Maximal runs of non-whitespace in UTF-8 text. Exposed because the
    // masking and shingling code share this notion of "word".
    static std::vector<std::string> split_words(const std::string& text);

private:
    BpeModel() = default;
    void init_base_vocab();
    TokenId intern(const std::string& token);
    std::vector<TokenId> encode_word(const std::string& word) const;

    std::unordered_map<std::string, TokenId> token_to_id_;
    std::vector<std::string> id_to_token_;
    std::vector<std::pair<std::string, std::string>> merges_;
    // (left id, right id) -> rank, for fast greedy application
    std::map<std::pair<TokenId, TokenId>, std::size_t> merge_rank_;
    std::unordered_map<std::size_t, TokenId> merge_result_;  // rank -> merged id
    SpecialTokens specials_;
    std::size_t target_vocab_size_ = 0;
};

}  // namespace biembed
