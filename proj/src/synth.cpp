#include "biembed/synth.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "biembed/rng.hpp"
#include "json.hpp"

namespace biembed {

namespace {

using json = nlohmann::json;

const char* kSyllables[2][20] = {
    {"ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du",
     "ga", "ge", "gi", "go", "gu", "la", "le", "li", "lo", "lu"},
    {"ka", "ke", "ki", "ko", "ku", "ta", "te", "ti", "to", "tu",
     "sa", "se", "si", "so", "su", "ra", "re", "ri", "ro", "ru"},
};
constexpr int kSyllableCount = 20;
// All 2- and 3-syllable combinations.
constexpr int kEnumerable = kSyllableCount * kSyllableCount * (1 + kSyllableCount);

// In-memory scores live in [0, 1]; files use the conventional 0..5 scale so
// loading them exercises the score-ceiling rescale.
constexpr double kStsCeiling = 5.0;

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    return f;
}

std::string doc_id(const char* prefix, int i) {
    std::ostringstream os;
    os << prefix << i;
    return os.str();
}

}  // namespace

void SynthConfig::validate() const {
    if (word_types < 2 || word_types > kEnumerable)
        throw ConfigError("synth: word_types must be in [2, " + std::to_string(kEnumerable) + "]");
    if (topics < 1) throw ConfigError("synth: topics must be positive");
    if (words_per_topic < 2) throw ConfigError("synth: words_per_topic must be at least 2");
    if (topics * words_per_topic > word_types)
        throw ConfigError("synth: topics * words_per_topic exceeds word_types");
    if (successors < 1) throw ConfigError("synth: successors must be positive");
    if (corpus_lines < 1) throw ConfigError("synth: corpus_lines must be positive");
    if (words_per_line < 2) throw ConfigError("synth: words_per_line must be at least 2");
    if (pair_train < 1) throw ConfigError("synth: pair_train must be positive");
    if (pair_holdout < 1) throw ConfigError("synth: pair_holdout must be positive");
    if (pair_holdout > 2 * topics)
        throw ConfigError("synth: pair_holdout exceeds 2 * topics, candidate topics would repeat");
    if (retrieval_train < 1) throw ConfigError("synth: retrieval_train must be positive");
    if (negatives < 1) throw ConfigError("synth: negatives must be positive");
    if (sts_train < 2) throw ConfigError("synth: sts_train must be at least 2");
    if (sts_holdout < 2) throw ConfigError("synth: sts_holdout must be at least 2");
}

SynthWorld::SynthWorld(const SynthConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    for (int lang = 0; lang < 2; ++lang) {
        std::vector<std::string> all;
        all.reserve(kEnumerable);
        for (int i = 0; i < kSyllableCount; ++i)
            for (int j = 0; j < kSyllableCount; ++j)
                all.push_back(std::string(kSyllables[lang][i]) + kSyllables[lang][j]);
        for (int i = 0; i < kSyllableCount; ++i)
            for (int j = 0; j < kSyllableCount; ++j)
                for (int k = 0; k < kSyllableCount; ++k)
                    all.push_back(std::string(kSyllables[lang][i]) + kSyllables[lang][j] +
                                  kSyllables[lang][k]);
        Rng word_rng(Rng::mix(cfg_.seed ^ (0x776f7264ULL + static_cast<std::uint64_t>(lang))));
        word_rng.shuffle(all);
        all.resize(static_cast<std::size_t>(cfg_.word_types));
        words_[lang] = std::move(all);

        Rng succ_rng(Rng::mix(cfg_.seed ^ (0x73756363ULL + static_cast<std::uint64_t>(lang))));
        successors_[lang].assign(words_[lang].size(), {});
        for (auto& out : successors_[lang]) {
            out.resize(static_cast<std::size_t>(cfg_.successors));
            for (int& s : out)
                s = static_cast<int>(succ_rng.uniform_index(words_[lang].size()));
        }

        // The shuffled word list makes consecutive slices an unbiased
        // partition, so topic banks are disjoint by construction.
        topics_[lang].resize(static_cast<std::size_t>(cfg_.topics));
        for (int t = 0; t < cfg_.topics; ++t) {
            auto& bank = topics_[lang][static_cast<std::size_t>(t)];
            for (int w = 0; w < cfg_.words_per_topic; ++w)
                bank.push_back(words_[lang][static_cast<std::size_t>(t * cfg_.words_per_topic + w)]);
        }
    }
}

const std::vector<std::string>& SynthWorld::words(int lang) const {
    if (lang < 0 || lang > 1) throw ConfigError("synth: lang must be 0 or 1");
    return words_[lang];
}

const std::vector<std::string>& SynthWorld::topic_words(int lang, int topic) const {
    if (lang < 0 || lang > 1) throw ConfigError("synth: lang must be 0 or 1");
    if (topic < 0 || topic >= cfg_.topics) throw ConfigError("synth: topic out of range");
    return topics_[lang][static_cast<std::size_t>(topic)];
}

std::vector<std::string> SynthWorld::corpus(int lang) const {
    words(lang);  // range check
    Rng rng(Rng::mix(cfg_.seed ^ (0x636f7270ULL + static_cast<std::uint64_t>(lang))));
    std::vector<std::string> lines;
    lines.reserve(static_cast<std::size_t>(cfg_.corpus_lines));
    for (int l = 0; l < cfg_.corpus_lines; ++l) {
        int w = static_cast<int>(rng.uniform_index(words_[lang].size()));
        std::string line = words_[lang][static_cast<std::size_t>(w)];
        for (int i = 1; i < cfg_.words_per_line; ++i) {
            const auto& out = successors_[lang][static_cast<std::size_t>(w)];
            w = out[rng.uniform_index(out.size())];
            line += ' ';
            line += words_[lang][static_cast<std::size_t>(w)];
        }
        lines.push_back(std::move(line));
    }
    return lines;
}

std::vector<std::string> SynthWorld::periodic_corpus(int lang, int period, int lines) const {
    words(lang);  // range check
    if (period < 2) throw ConfigError("synth: period must be at least 2");
    if (lines < 1) throw ConfigError("synth: lines must be positive");
    Rng rng(Rng::mix(cfg_.seed ^ (0x70657269ULL + static_cast<std::uint64_t>(lang))));
    std::vector<int> cycle(static_cast<std::size_t>(period));
    int w = static_cast<int>(rng.uniform_index(words_[lang].size()));
    for (int& c : cycle) {
        c = w;
        const auto& out = successors_[lang][static_cast<std::size_t>(w)];
        w = out[rng.uniform_index(out.size())];
    }
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(lines));
    std::size_t pos = 0;
    for (int l = 0; l < lines; ++l) {
        std::string line;
        for (int i = 0; i < cfg_.words_per_line; ++i) {
            if (i) line += ' ';
            line += words_[lang][static_cast<std::size_t>(cycle[pos % cycle.size()])];
            ++pos;
        }
        out.push_back(std::move(line));
    }
    return out;
}

std::string SynthWorld::sentence_from_topic(int lang, int topic, int n, Rng& rng) const {
    const auto& bank = topics_[lang][static_cast<std::size_t>(topic)];
    std::vector<std::size_t> idx(bank.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    if (n > static_cast<int>(bank.size())) n = static_cast<int>(bank.size());
    std::string s;
    for (int i = 0; i < n; ++i) {
        if (i) s += ' ';
        s += bank[idx[static_cast<std::size_t>(i)]];
    }
    return s;
}

std::string SynthWorld::mixed_sentence(int lang, int topic, int other, int from_topic, int total,
                                       Rng& rng) const {
    const auto& bank = topics_[lang][static_cast<std::size_t>(topic)];
    const auto& alt = topics_[lang][static_cast<std::size_t>(other)];
    std::vector<std::size_t> bi(bank.size()), ai(alt.size());
    std::iota(bi.begin(), bi.end(), 0);
    std::iota(ai.begin(), ai.end(), 0);
    rng.shuffle(bi);
    rng.shuffle(ai);
    std::vector<std::string> picked;
    for (int i = 0; i < from_topic; ++i) picked.push_back(bank[bi[static_cast<std::size_t>(i)]]);
    for (int i = 0; i < total - from_topic; ++i)
        picked.push_back(alt[ai[static_cast<std::size_t>(i)]]);
    rng.shuffle(picked);
    std::string s;
    for (std::size_t i = 0; i < picked.size(); ++i) {
        if (i) s += ' ';
        s += picked[i];
    }
    return s;
}

std::vector<PairExample> SynthWorld::train_pairs() const {
    Rng rng(Rng::mix(cfg_.seed ^ 0x70616972ULL));
    std::vector<PairExample> out;
    out.reserve(static_cast<std::size_t>(cfg_.pair_train));
    for (int i = 0; i < cfg_.pair_train; ++i) {
        int lang = i % 2;
        int topic = (i / 2) % cfg_.topics;
        out.push_back({sentence_from_topic(lang, topic, 3, rng),
                       sentence_from_topic(lang, topic, 4, rng)});
    }
    return out;
}

std::vector<PairExample> SynthWorld::holdout_pairs() const {
    Rng rng(Rng::mix(cfg_.seed ^ 0x686f6c64ULL));
    std::vector<PairExample> out;
    out.reserve(static_cast<std::size_t>(cfg_.pair_holdout));
    // (lang, topic) pairs never repeat, so topic banks — and hence relevant
    // passages — are unique per query.
    for (int i = 0; i < cfg_.pair_holdout; ++i) {
        int lang = i % 2;
        int topic = i / 2;
        out.push_back({sentence_from_topic(lang, topic, 3, rng),
                       sentence_from_topic(lang, topic, 4, rng)});
    }
    return out;
}

std::vector<RetrievalExample> SynthWorld::train_retrieval() const {
    Rng rng(Rng::mix(cfg_.seed ^ 0x72657472ULL));
    std::vector<RetrievalExample> out;
    out.reserve(static_cast<std::size_t>(cfg_.retrieval_train));
    for (int i = 0; i < cfg_.retrieval_train; ++i) {
        int lang = i % 2;
        int topic = (i / 2) % cfg_.topics;
        RetrievalExample ex;
        ex.q = sentence_from_topic(lang, topic, 3, rng);
        ex.p = sentence_from_topic(lang, topic, 4, rng);
        for (int n = 0; n < cfg_.negatives; ++n) {
            int other = topic;
            while (other == topic)
                other = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(cfg_.topics)));
            // Half the words match the query's topic: hard, but still wrong.
            ex.negs.push_back(mixed_sentence(lang, topic, other, 2, 4, rng));
        }
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<StsExample> SynthWorld::sts_items(int count, std::uint64_t salt) const {
    Rng rng(Rng::mix(cfg_.seed ^ salt));
    std::vector<StsExample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        int lang = i % 2;
        int topic = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(cfg_.topics)));
        int other = topic;
        while (other == topic)
            other = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(cfg_.topics)));
        int shared = static_cast<int>(rng.uniform_index(5));  // 0..4 of 4 words
        StsExample ex;
        ex.q = sentence_from_topic(lang, topic, 4, rng);
        ex.p = mixed_sentence(lang, topic, other, shared, 4, rng);
        ex.score = shared / 4.0;
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<StsExample> SynthWorld::train_sts() const {
    return sts_items(cfg_.sts_train, 0x73747374ULL);
}

std::vector<StsExample> SynthWorld::holdout_sts() const {
    return sts_items(cfg_.sts_holdout, 0x73747368ULL);
}

RetrievalTask SynthWorld::holdout_retrieval_task() const {
    auto pairs = holdout_pairs();
    RetrievalTask task;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        std::string qid = doc_id("q", static_cast<int>(i));
        std::string did = doc_id("d", static_cast<int>(i));
        task.queries[qid] = pairs[i].q;
        task.corpus[did] = pairs[i].p;
        task.qrels[qid][did] = 1;
    }
    task.validate();
    return task;
}

StsTask SynthWorld::holdout_sts_task() const {
    StsTask task;
    for (const auto& ex : holdout_sts()) {
        task.pairs.emplace_back(ex.q, ex.p);
        task.gold.push_back(ex.score * kStsCeiling);
    }
    task.validate();
    return task;
}

void SynthWorld::write_bundle(const std::string& dir) const {
    std::filesystem::path root(dir);
    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    if (ec) throw IoError("cannot create " + dir + ": " + ec.message());

    auto write_lines = [&](const char* name, const std::vector<std::string>& lines) {
        auto f = open_out(root / name);
        for (const auto& l : lines) f << l << '\n';
    };
    write_lines("corpus_a.txt", corpus(0));
    write_lines("corpus_b.txt", corpus(1));
    write_lines("periodic_a.txt", periodic_corpus(0, 8, 200));

    {
        auto f = open_out(root / "pairs_train.jsonl");
        for (const auto& ex : train_pairs())
            f << json{{"q", ex.q}, {"p", ex.p}}.dump() << '\n';
    }
    {
        auto f = open_out(root / "pairs_holdout.jsonl");
        for (const auto& ex : holdout_pairs())
            f << json{{"q", ex.q}, {"p", ex.p}}.dump() << '\n';
    }
    {
        auto f = open_out(root / "retrieval_train.jsonl");
        for (const auto& ex : train_retrieval())
            f << json{{"q", ex.q}, {"p", ex.p}, {"negs", ex.negs}}.dump() << '\n';
    }
    auto write_sts = [&](const char* name, const std::vector<StsExample>& xs) {
        auto f = open_out(root / name);
        for (const auto& ex : xs)
            f << json{{"q", ex.q}, {"p", ex.p}, {"score", ex.score * kStsCeiling}}.dump() << '\n';
    };
    write_sts("sts_train.jsonl", train_sts());
    write_sts("sts_holdout.jsonl", holdout_sts());

    auto task = holdout_retrieval_task();
    {
        auto f = open_out(root / "eval_corpus.jsonl");
        for (const auto& [id, text] : task.corpus)
            f << json{{"id", id}, {"text", text}}.dump() << '\n';
    }
    {
        auto f = open_out(root / "eval_queries.jsonl");
        for (const auto& [id, text] : task.queries)
            f << json{{"id", id}, {"text", text}}.dump() << '\n';
    }
    {
        auto f = open_out(root / "eval_qrels.jsonl");
        for (const auto& [qid, rels] : task.qrels)
            for (const auto& [did, rel] : rels)
                f << json{{"qid", qid}, {"docid", did}, {"rel", rel}}.dump() << '\n';
    }
    write_sts("eval_sts.jsonl", holdout_sts());
}

}  // namespace biembed
