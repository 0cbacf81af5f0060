#include "biembed/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>

namespace biembed {

namespace {

constexpr const char* kMagic = "BIEMBED-BPE 1";
const char* kSpecialNames[5] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

bool is_unicode_space(std::uint32_t cp) {
    switch (cp) {
        case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
        case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
        case 0x202F: case 0x205F: case 0x3000:
            return true;
        default:
            return cp >= 0x2000 && cp <= 0x200A;
    }
}

// Decode one UTF-8 codepoint starting at i; advances i. Invalid bytes are
// treated as single-byte codepoints so totality holds on arbitrary input.
std::uint32_t next_codepoint(const std::string& s, std::size_t& i) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
    if (i + len > s.size()) len = 1;
    std::uint32_t cp = 0;
    if (len == 1) {
        cp = c;
    } else {
        cp = c & (0x7F >> len);
        for (std::size_t k = 1; k < len; ++k) {
            unsigned char cc = static_cast<unsigned char>(s[i + k]);
            if ((cc & 0xC0) != 0x80) {  // malformed continuation: fall back
                cp = c;
                len = 1;
                break;
            }
            cp = (cp << 6) | (cc & 0x3F);
        }
    }
    i += len;
    return cp;
}

std::size_t codepoint_count(const std::string& s) {
    std::size_t i = 0, n = 0;
    while (i < s.size()) {
        next_codepoint(s, i);
        ++n;
    }
    return n;
}

// Truncate to at most `budget` codepoints, backing up to the last line
// break (or whitespace) so no word is cut in half.
std::string truncate_to_codepoints(const std::string& s, std::size_t budget) {
    std::size_t i = 0, n = 0;
    while (i < s.size() && n < budget) {
        next_codepoint(s, i);
        ++n;
    }
    if (i >= s.size()) return s;
    std::size_t cut = s.rfind('\n', i);
    if (cut == std::string::npos) {
        std::size_t j = i;
        while (j > 0 && !std::isspace(static_cast<unsigned char>(s[j - 1]))) --j;
        cut = j;
    }
    return s.substr(0, cut);
}

std::string read_stream(std::istream& in) {
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::string escape_token(const std::string& t) {
    std::string out;
    for (unsigned char c : t) {
        if (c == '\\') {
            out += "\\\\";
        } else if (c < 0x21 || c >= 0x7F) {
            static const char* hex = "0123456789abcdef";
            out += "\\x";
            out += hex[c >> 4];
            out += hex[c & 0xF];
        } else {
            out += static_cast<char>(c);
        }
    }
    return out;
}

std::string unescape_token(const std::string& t) {
    std::string out;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] != '\\') {
            out += t[i];
        } else if (i + 1 < t.size() && t[i + 1] == '\\') {
            out += '\\';
            ++i;
        } else if (i + 3 < t.size() && t[i + 1] == 'x') {
            out += static_cast<char>(std::stoi(t.substr(i + 2, 2), nullptr, 16));
            i += 3;
        } else {
            throw IoError("tokenizer model: bad escape in token '" + t + "'");
        }
    }
    return out;
}

using SymPair = std::pair<TokenId, TokenId>;

struct WorkWord {
    std::vector<TokenId> syms;
    std::int64_t freq = 0;
};

std::map<SymPair, std::int64_t> count_word_pairs(const std::vector<TokenId>& syms) {
    std::map<SymPair, std::int64_t> counts;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) ++counts[{syms[i], syms[i + 1]}];
    return counts;
}

// Merge all non-overlapping occurrences of `pair`, scanning left to right.
std::vector<TokenId> apply_merge(const std::vector<TokenId>& syms, SymPair pair, TokenId merged) {
    std::vector<TokenId> out;
    out.reserve(syms.size());
    for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == pair.first && syms[i + 1] == pair.second) {
            out.push_back(merged);
            i += 2;
        } else {
            out.push_back(syms[i]);
            ++i;
        }
    }
    return out;
}

}  // namespace

std::vector<std::string> BpeModel::split_words(const std::string& text) {
    std::vector<std::string> words;
    std::size_t i = 0;
    std::size_t word_start = std::string::npos;
    while (i < text.size()) {
        std::size_t at = i;
        std::uint32_t cp = next_codepoint(text, i);
        if (is_unicode_space(cp)) {
            if (word_start != std::string::npos) {
                words.push_back(text.substr(word_start, at - word_start));
                word_start = std::string::npos;
            }
        } else if (word_start == std::string::npos) {
            word_start = at;
        }
    }
    if (word_start != std::string::npos) words.push_back(text.substr(word_start));
    return words;
}

void BpeModel::init_base_vocab() {
    for (const char* name : kSpecialNames) intern(name);
    for (int b = 0; b < 256; ++b) intern(std::string(1, static_cast<char>(b)));
}

TokenId BpeModel::intern(const std::string& token) {
    auto it = token_to_id_.find(token);
    if (it != token_to_id_.end()) return it->second;
    TokenId id = static_cast<TokenId>(id_to_token_.size());
    token_to_id_.emplace(token, id);
    id_to_token_.push_back(token);
    return id;
}

const std::string& BpeModel::token_string(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
        throw Error("token_string: id " + std::to_string(id) + " out of range");
    return id_to_token_[static_cast<std::size_t>(id)];
}

bool BpeModel::is_special(TokenId id) const { return id >= 0 && id < 5; }

BpeModel BpeModel::train(std::istream& corpus_a, std::istream& corpus_b,
                         std::size_t target_vocab_size) {
    return train(read_stream(corpus_a), read_stream(corpus_b), target_vocab_size);
}

BpeModel BpeModel::train(const std::string& corpus_a, const std::string& corpus_b,
                         std::size_t target_vocab_size) {
    BpeModel model;
    model.init_base_vocab();
    model.target_vocab_size_ = target_vocab_size;
    if (target_vocab_size <= model.vocab_size())
        throw ConfigError("train_bpe: target_vocab_size " + std::to_string(target_vocab_size) +
                          " must exceed base vocabulary of " +
                          std::to_string(model.vocab_size()));

    // 1:1 language balance by character count.
    std::size_t na = codepoint_count(corpus_a), nb = codepoint_count(corpus_b);
    std::size_t budget = std::min(na, nb);
    if (budget == 0) throw IoError("train_bpe: empty corpus");
    const std::string a = na > budget ? truncate_to_codepoints(corpus_a, budget) : corpus_a;
    const std::string b = nb > budget ? truncate_to_codepoints(corpus_b, budget) : corpus_b;

    // Word frequency over both corpora; non-initial words carry a leading
    // space so decode can restore word boundaries.
    std::map<std::string, std::int64_t> word_freq;
    for (const std::string* corpus : {&a, &b}) {
        std::istringstream lines(*corpus);
        std::string line;
        while (std::getline(lines, line)) {
            bool first = true;
            for (const std::string& w : split_words(line)) {
                word_freq[first ? w : " " + w] += 1;
                first = false;
            }
        }
    }
    if (word_freq.empty()) throw IoError("train_bpe: empty corpus");

    std::vector<WorkWord> words;
    words.reserve(word_freq.size());
    for (const auto& [text, freq] : word_freq) {
        WorkWord w;
        w.freq = freq;
        w.syms.reserve(text.size());
        for (unsigned char c : text) w.syms.push_back(model.token_to_id_[std::string(1, c)]);
        words.push_back(std::move(w));
    }

    std::map<SymPair, std::int64_t> pair_counts;
    std::map<SymPair, std::set<std::size_t>> pair_words;
    for (std::size_t wi = 0; wi < words.size(); ++wi) {
        for (const auto& [p, c] : count_word_pairs(words[wi].syms)) {
            pair_counts[p] += c * words[wi].freq;
            pair_words[p].insert(wi);
        }
    }

    while (model.vocab_size() < target_vocab_size) {
        // Deterministic argmax: highest count, then lowest (left, right) ids.
        SymPair best{};
        std::int64_t best_count = 0;
        for (const auto& [p, c] : pair_counts) {
            if (c > best_count) {
                best = p;
                best_count = c;
            }
        }
        if (best_count < 1) break;  // corpus exhausted before target reached

        const std::string& ls = model.id_to_token_[best.first];
        const std::string& rs = model.id_to_token_[best.second];
        TokenId merged = model.intern(ls + rs);
        std::size_t rank = model.merges_.size();
        model.merges_.emplace_back(ls, rs);
        model.merge_rank_[best] = rank;
        model.merge_result_[rank] = merged;

        std::set<std::size_t> affected = pair_words[best];
        for (std::size_t wi : affected) {
            WorkWord& w = words[wi];
            for (const auto& [p, c] : count_word_pairs(w.syms)) {
                auto it = pair_counts.find(p);
                it->second -= c * w.freq;
                if (it->second <= 0) pair_counts.erase(it);
                auto pw = pair_words.find(p);
                pw->second.erase(wi);
                if (pw->second.empty()) pair_words.erase(pw);
            }
            w.syms = apply_merge(w.syms, best, merged);
            for (const auto& [p, c] : count_word_pairs(w.syms)) {
                pair_counts[p] += c * w.freq;
                pair_words[p].insert(wi);
            }
        }
    }
    return model;
}

std::vector<TokenId> BpeModel::encode_word(const std::string& word) const {
    std::vector<TokenId> syms;
    syms.reserve(word.size());
    for (unsigned char c : word) {
        auto it = token_to_id_.find(std::string(1, c));
        syms.push_back(it == token_to_id_.end() ? specials_.unk : it->second);
    }
    while (syms.size() > 1) {
        std::size_t best_rank = std::numeric_limits<std::size_t>::max();
        SymPair best{};
        for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
            auto it = merge_rank_.find({syms[i], syms[i + 1]});
            if (it != merge_rank_.end() && it->second < best_rank) {
                best_rank = it->second;
                best = it->first;
            }
        }
        if (best_rank == std::numeric_limits<std::size_t>::max()) break;
        syms = apply_merge(syms, best, merge_result_.at(best_rank));
    }
    return syms;
}

TokenizedText BpeModel::encode(const std::string& text) const {
    TokenizedText out;
    bool first = true;
    for (const std::string& w : split_words(text)) {
        std::vector<TokenId> ids = encode_word(first ? w : " " + w);
        first = false;
        WordSpan span;
        span.begin = out.ids.size();
        out.ids.insert(out.ids.end(), ids.begin(), ids.end());
        span.end = out.ids.size();
        out.word_spans.push_back(span);
    }
    return out;
}

std::string BpeModel::decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
            throw Error("decode: id " + std::to_string(id) + " out of range [0," +
                        std::to_string(id_to_token_.size()) + ")");
        out += id_to_token_[static_cast<std::size_t>(id)];
    }
    return out;
}

void BpeModel::save(std::ostream& out) const {
    out << kMagic << "\n";
    out << "target " << target_vocab_size_ << "\n";
    out << "specials " << specials_.pad << " " << specials_.unk << " " << specials_.cls << " "
        << specials_.sep << " " << specials_.mask << "\n";
    out << "vocab " << id_to_token_.size() << "\n";
    for (const std::string& t : id_to_token_) out << escape_token(t) << "\n";
    out << "merges " << merges_.size() << "\n";
    for (const auto& [l, r] : merges_)
        out << token_to_id_.at(l) << " " << token_to_id_.at(r) << "\n";
}

void BpeModel::save_file(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write tokenizer model: " + path);
    save(f);
}

BpeModel BpeModel::load(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kMagic)
        throw IoError("tokenizer model: bad magic line");
    BpeModel model;
    std::string key;
    std::size_t vocab_count = 0, merge_count = 0;
    {
        std::getline(in, line);
        std::istringstream ls(line);
        ls >> key >> model.target_vocab_size_;
        if (key != "target") throw IoError("tokenizer model: expected 'target'");
    }
    {
        std::getline(in, line);
        std::istringstream ls(line);
        ls >> key >> model.specials_.pad >> model.specials_.unk >> model.specials_.cls >>
            model.specials_.sep >> model.specials_.mask;
        if (key != "specials") throw IoError("tokenizer model: expected 'specials'");
    }
    {
        std::getline(in, line);
        std::istringstream ls(line);
        ls >> key >> vocab_count;
        if (key != "vocab") throw IoError("tokenizer model: expected 'vocab'");
    }
    for (std::size_t i = 0; i < vocab_count; ++i) {
        if (!std::getline(in, line)) throw IoError("tokenizer model: truncated vocab list");
        model.intern(unescape_token(line));
    }
    {
        std::getline(in, line);
        std::istringstream ls(line);
        ls >> key >> merge_count;
        if (key != "merges") throw IoError("tokenizer model: expected 'merges'");
    }
    for (std::size_t r = 0; r < merge_count; ++r) {
        if (!std::getline(in, line)) throw IoError("tokenizer model: truncated merges list");
        std::istringstream ls(line);
        TokenId li = 0, ri = 0;
        ls >> li >> ri;
        const std::string& lstr = model.token_string(li);
        const std::string& rstr = model.token_string(ri);
        auto it = model.token_to_id_.find(lstr + rstr);
        if (it == model.token_to_id_.end())
            throw IoError("tokenizer model: merge " + std::to_string(r) +
                          " produces token absent from vocab");
        model.merges_.emplace_back(lstr, rstr);
        model.merge_rank_[{li, ri}] = r;
        model.merge_result_[r] = it->second;
    }
    return model;
}

BpeModel BpeModel::load_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read tokenizer model: " + path);
    return load(f);
}

}  // namespace biembed
