#include "biembed/curation.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "json.hpp"

#include "biembed/rng.hpp"
#include "biembed/tokenizer.hpp"

namespace biembed {

namespace {

using nlohmann::json;

// Mersenne prime 2^61 - 1; MinHash permutations are universal hashes mod kP.
constexpr std::uint64_t kP = (1ULL << 61) - 1;

std::uint64_t mulmod61(std::uint64_t a, std::uint64_t b) {
    unsigned __int128 t = static_cast<unsigned __int128>(a) * b;
    std::uint64_t r = static_cast<std::uint64_t>(t & kP) + static_cast<std::uint64_t>(t >> 61);
    if (r >= kP) r -= kP;
    return r;
}

// Codepoint count = bytes that are not UTF-8 continuation bytes.
std::size_t count_chars(const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s)
        if ((c & 0xC0) != 0x80) ++n;
    return n;
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\f\v");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\f\v");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t nl = text.find('\n', start);
        if (nl == std::string::npos) {
            lines.push_back(text.substr(start));
            break;
        }
        lines.push_back(text.substr(start, nl - start));
        start = nl + 1;
    }
    return lines;
}

bool ends_sentence(const std::string& line) {
    // Peel closing quotes/brackets so «He said "stop".» style lines count.
    static const std::vector<std::string> closers = {"\"", "'", ")", "]",
                                                     "»", "”", "’"};
    std::string s = line;
    bool peeled = true;
    while (peeled && !s.empty()) {
        peeled = false;
        for (const auto& c : closers) {
            if (s.size() >= c.size() && s.compare(s.size() - c.size(), c.size(), c) == 0) {
                s.erase(s.size() - c.size());
                peeled = true;
                break;
            }
        }
    }
    static const std::vector<std::string> finals = {".", "!", "?", "…"};
    for (const auto& f : finals)
        if (s.size() >= f.size() && s.compare(s.size() - f.size(), f.size(), f) == 0) return true;
    return false;
}

// One side of refine(); empty optional means the side lost all its lines.
std::optional<std::string> refine_side(const std::string& text) {
    std::vector<std::string> kept;
    for (const std::string& raw : split_lines(text)) {
        std::string line = trim(raw);
        if (BpeModel::split_words(line).size() < 2) continue;
        kept.push_back(std::move(line));
    }
    // Trailing unfinished lines are cut only while the side stays multi-line:
    // a single surviving line (typical for queries) is kept as-is.
    while (kept.size() >= 2 && !ends_sentence(kept.back())) kept.pop_back();
    if (kept.empty()) return std::nullopt;
    std::string out = kept[0];
    for (std::size_t i = 1; i < kept.size(); ++i) out += "\n" + kept[i];
    return out;
}

struct DisjointSets {
    std::vector<std::size_t> parent;
    explicit DisjointSets(std::size_t n) : parent(n) {
        std::iota(parent.begin(), parent.end(), std::size_t(0));
    }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

struct Perm {
    std::uint64_t a, b;
};

std::vector<Perm> make_perms(const CurationConfig& cfg) {
    Rng rng(cfg.seed);
    std::vector<Perm> perms(static_cast<std::size_t>(cfg.minhash_permutations));
    for (auto& p : perms) {
        p.a = rng.next_u64() % (kP - 1) + 1;
        p.b = rng.next_u64() % kP;
    }
    return perms;
}

std::vector<std::uint64_t> signature_of(const std::set<std::uint64_t>& shingles,
                                        const std::vector<Perm>& perms) {
    std::vector<std::uint64_t> sig(perms.size(), kP);
    for (std::uint64_t x : shingles) {
        std::uint64_t xm = x % kP;
        for (std::size_t i = 0; i < perms.size(); ++i) {
            std::uint64_t h = mulmod61(perms[i].a, xm) + perms[i].b;
            if (h >= kP) h -= kP;
            sig[i] = std::min(sig[i], h);
        }
    }
    return sig;
}

}  // namespace

void CurationConfig::validate() const {
    if (min_chars < 0) throw ConfigError("curation: min_chars must be >= 0");
    if (max_chars < min_chars) throw ConfigError("curation: max_chars below min_chars");
    if (max_dup_line_frac < 0.0 || max_dup_line_frac > 1.0)
        throw ConfigError("curation: max_dup_line_frac outside [0,1]");
    if (max_dup_ngram_frac < 0.0 || max_dup_ngram_frac > 1.0)
        throw ConfigError("curation: max_dup_ngram_frac outside [0,1]");
    if (ngram_n < 1) throw ConfigError("curation: ngram_n must be >= 1");
    if (dedup_jaccard_threshold <= 0.0 || dedup_jaccard_threshold > 1.0)
        throw ConfigError("curation: dedup_jaccard_threshold outside (0,1]");
    if (minhash_permutations < 1) throw ConfigError("curation: minhash_permutations must be >= 1");
    if (lsh_bands < 1) throw ConfigError("curation: lsh_bands must be >= 1");
    if (minhash_permutations % lsh_bands != 0)
        throw ConfigError("curation: lsh_bands must divide minhash_permutations");
    if (consistency_top_k < 1) throw ConfigError("curation: consistency_top_k must be >= 1");
    if (consistency_sample_size < 1)
        throw ConfigError("curation: consistency_sample_size must be >= 1");
}

double dup_line_fraction(const std::string& text) {
    std::set<std::uint64_t> distinct;
    std::size_t total = 0;
    for (const std::string& raw : split_lines(text)) {
        std::string line = trim(raw);
        if (line.empty()) continue;
        ++total;
        distinct.insert(fnv1a64(line));
    }
    if (total == 0) return 0.0;
    return 1.0 - double(distinct.size()) / double(total);
}

double dup_ngram_fraction(const std::string& text, int n) {
    std::vector<std::string> words = BpeModel::split_words(text);
    if (words.size() < static_cast<std::size_t>(n)) return 0.0;
    std::set<std::uint64_t> distinct;
    std::size_t total = words.size() - static_cast<std::size_t>(n) + 1;
    for (std::size_t i = 0; i < total; ++i) {
        std::string gram = words[i];
        for (std::size_t j = 1; j < static_cast<std::size_t>(n); ++j)
            gram += '\x1f' + words[i + j];
        distinct.insert(fnv1a64(gram));
    }
    return 1.0 - double(distinct.size()) / double(total);
}

FilterDecision quality_filter(const PairRecord& rec, const CurationConfig& cfg) {
    std::size_t nq = count_chars(rec.q), np = count_chars(rec.p);
    if (nq < static_cast<std::size_t>(cfg.min_chars) || np < static_cast<std::size_t>(cfg.min_chars))
        return {false, "too_short"};
    if (nq > static_cast<std::size_t>(cfg.max_chars) || np > static_cast<std::size_t>(cfg.max_chars))
        return {false, "too_long"};
    if (dup_line_fraction(rec.q) > cfg.max_dup_line_frac ||
        dup_line_fraction(rec.p) > cfg.max_dup_line_frac)
        return {false, "dup_lines"};
    if (dup_ngram_fraction(rec.q, cfg.ngram_n) > cfg.max_dup_ngram_frac ||
        dup_ngram_fraction(rec.p, cfg.ngram_n) > cfg.max_dup_ngram_frac)
        return {false, "dup_ngrams"};
    return {true, ""};
}

std::optional<PairRecord> refine(const PairRecord& rec) {
    std::optional<std::string> q = refine_side(rec.q);
    std::optional<std::string> p = refine_side(rec.p);
    if (!q || !p) return std::nullopt;
    PairRecord out = rec;
    out.q = std::move(*q);
    out.p = std::move(*p);
    return out;
}

std::set<std::uint64_t> shingle_set(const std::string& text, int n) {
    std::vector<std::string> words = BpeModel::split_words(text);
    std::set<std::uint64_t> shingles;
    if (words.empty()) return shingles;
    std::size_t un = static_cast<std::size_t>(n);
    if (words.size() < un) {
        // Too short for a full shingle: the whole word sequence is one.
        std::string gram = words[0];
        for (std::size_t j = 1; j < words.size(); ++j) gram += '\x1f' + words[j];
        shingles.insert(fnv1a64(gram));
        return shingles;
    }
    for (std::size_t i = 0; i + un <= words.size(); ++i) {
        std::string gram = words[i];
        for (std::size_t j = 1; j < un; ++j) gram += '\x1f' + words[i + j];
        shingles.insert(fnv1a64(gram));
    }
    return shingles;
}

double jaccard(const std::set<std::uint64_t>& a, const std::set<std::uint64_t>& b) {
    if (a.empty() && b.empty()) return 1.0;
    std::size_t inter = 0;
    auto ita = a.begin();
    auto itb = b.begin();
    while (ita != a.end() && itb != b.end()) {
        if (*ita < *itb)
            ++ita;
        else if (*itb < *ita)
            ++itb;
        else {
            ++inter;
            ++ita;
            ++itb;
        }
    }
    return double(inter) / double(a.size() + b.size() - inter);
}

std::vector<std::uint64_t> minhash_signature(const std::set<std::uint64_t>& shingles,
                                             const CurationConfig& cfg) {
    cfg.validate();
    return signature_of(shingles, make_perms(cfg));
}

std::vector<std::size_t> near_dedup_keep_indices(const std::vector<PairRecord>& records,
                                                 const CurationConfig& cfg) {
    cfg.validate();
    std::size_t n = records.size();
    std::vector<std::set<std::uint64_t>> shingles(n);
    for (std::size_t i = 0; i < n; ++i)
        shingles[i] = shingle_set(records[i].q + " " + records[i].p, cfg.ngram_n);

    std::vector<Perm> perms = make_perms(cfg);
    std::size_t rows = perms.size() / static_cast<std::size_t>(cfg.lsh_bands);
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> buckets;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::uint64_t> sig = signature_of(shingles[i], perms);
        for (std::size_t b = 0; b < static_cast<std::size_t>(cfg.lsh_bands); ++b) {
            std::vector<std::uint64_t> key(sig.begin() + b * rows, sig.begin() + (b + 1) * rows);
            key.push_back(b);  // band index keeps bands from cross-matching
            buckets[fnv1a64(key.data(), key.size() * sizeof(std::uint64_t))].push_back(i);
        }
    }

    // Bucket co-membership proposes pairs; exact Jaccard confirms. The set
    // keeps the confirmation order-independent of the hash-map layout.
    std::set<std::pair<std::size_t, std::size_t>> candidates;
    for (const auto& [key, members] : buckets) {
        (void)key;
        for (std::size_t i = 0; i < members.size(); ++i)
            for (std::size_t j = i + 1; j < members.size(); ++j)
                candidates.emplace(std::min(members[i], members[j]),
                                   std::max(members[i], members[j]));
    }

    DisjointSets clusters(n);
    for (const auto& [i, j] : candidates)
        if (jaccard(shingles[i], shingles[j]) >= cfg.dedup_jaccard_threshold) clusters.unite(i, j);

    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < n; ++i)
        if (clusters.find(i) == i) keep.push_back(i);
    return keep;
}

std::vector<PairRecord> near_dedup(const std::vector<PairRecord>& records,
                                   const CurationConfig& cfg) {
    std::vector<PairRecord> out;
    for (std::size_t i : near_dedup_keep_indices(records, cfg)) out.push_back(records[i]);
    return out;
}

std::vector<std::size_t> consistency_ranks(const std::vector<PairRecord>& records,
                                           const EmbedFn& embed, const CurationConfig& cfg) {
    cfg.validate();
    std::size_t n = records.size();
    if (n == 0) return {};

    // Each record's candidate pool is its own passage plus the first
    // sample_size-1 other passages of one fixed seed-shuffled order, so the
    // pool always totals sample_size (clamped to the record count).
    std::size_t pool_total =
        std::min<std::size_t>(static_cast<std::size_t>(cfg.consistency_sample_size), n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    Rng rng(cfg.seed);
    rng.shuffle(order);

    std::vector<std::vector<double>> q_embs(n), p_embs(n);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        q_embs[static_cast<std::size_t>(i)] = embed(records[static_cast<std::size_t>(i)].q);
        p_embs[static_cast<std::size_t>(i)] = embed(records[static_cast<std::size_t>(i)].p);
    }

    std::vector<std::size_t> ranks(n);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        std::size_t i = static_cast<std::size_t>(ii);
        double own = cosine_of(q_embs[i], p_embs[i]);
        std::size_t above = 0, taken = 0;
        for (std::size_t j : order) {
            if (taken + 1 >= pool_total) break;
            if (j == i) continue;
            ++taken;
            double c = cosine_of(q_embs[i], p_embs[j]);
            if (c > own || (c == own && j < i)) ++above;
        }
        ranks[i] = above + 1;
    }
    return ranks;
}

std::vector<std::size_t> consistency_keep_indices(const std::vector<PairRecord>& records,
                                                  const EmbedFn& embed,
                                                  const CurationConfig& cfg) {
    std::vector<std::size_t> ranks = consistency_ranks(records, embed, cfg);
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < ranks.size(); ++i)
        if (ranks[i] <= static_cast<std::size_t>(cfg.consistency_top_k)) keep.push_back(i);
    return keep;
}

CurationResult curate_pairs(const std::vector<PairRecord>& records, const CurationConfig& cfg,
                            const EmbedFn* embed) {
    cfg.validate();
    CurationResult res;
    std::vector<PairRecord> stage;
    std::vector<std::size_t> lines;
    for (std::size_t i = 0; i < records.size(); ++i) {
        FilterDecision d = quality_filter(records[i], cfg);
        if (!d.keep) {
            res.dropped.push_back({i + 1, "quality_filter", d.reason});
            continue;
        }
        std::optional<PairRecord> refined = refine(records[i]);
        if (!refined) {
            res.dropped.push_back({i + 1, "refine", "emptied"});
            continue;
        }
        stage.push_back(std::move(*refined));
        lines.push_back(i + 1);
    }

    std::vector<std::size_t> keep = near_dedup_keep_indices(stage, cfg);
    std::vector<PairRecord> deduped;
    std::vector<std::size_t> deduped_lines;
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < stage.size(); ++i) {
        if (cursor < keep.size() && keep[cursor] == i) {
            deduped.push_back(std::move(stage[i]));
            deduped_lines.push_back(lines[i]);
            ++cursor;
        } else {
            res.dropped.push_back({lines[i], "near_dedup", "near_duplicate"});
        }
    }

    if (embed) {
        std::vector<std::size_t> ckeep = consistency_keep_indices(deduped, *embed, cfg);
        std::size_t cur = 0;
        for (std::size_t i = 0; i < deduped.size(); ++i) {
            if (cur < ckeep.size() && ckeep[cur] == i) {
                res.kept.push_back(std::move(deduped[i]));
                res.kept_lines.push_back(deduped_lines[i]);
                ++cur;
            } else {
                res.dropped.push_back({deduped_lines[i], "consistency_filter", "rank_above_top_k"});
            }
        }
    } else {
        res.kept = std::move(deduped);
        res.kept_lines = std::move(deduped_lines);
    }

    std::sort(res.dropped.begin(), res.dropped.end(),
              [](const DropEntry& a, const DropEntry& b) { return a.line < b.line; });
    return res;
}

std::vector<PairRecord> load_pair_records(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    std::vector<PairRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            PairRecord rec;
            rec.q = j.at("q").get<std::string>();
            rec.p = j.at("p").get<std::string>();
            rec.source = j.value("source", "");
            rec.lang = j.value("lang", "");
            records.push_back(std::move(rec));
        } catch (const json::exception& e) {
            throw IoError(path + ":" + std::to_string(lineno) + ": bad record: " + e.what());
        }
    }
    return records;
}

void save_pair_records(const std::string& path, const std::vector<PairRecord>& records) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    for (const PairRecord& rec : records) {
        json j;
        j["q"] = rec.q;
        j["p"] = rec.p;
        j["source"] = rec.source;
        j["lang"] = rec.lang;
        f << j.dump() << "\n";
    }
    if (!f) throw IoError("write failed: " + path);
}

void write_drop_log(const std::string& path, const std::vector<DropEntry>& dropped) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    for (const DropEntry& d : dropped) {
        json j;
        j["line"] = d.line;
        j["stage"] = d.stage;
        j["reason"] = d.reason;
        f << j.dump() << "\n";
    }
    if (!f) throw IoError("write failed: " + path);
}

}  // namespace biembed
