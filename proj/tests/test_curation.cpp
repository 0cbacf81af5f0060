#include "doctest.h"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "biembed/curation.hpp"
#include "biembed/rng.hpp"
#include "biembed/tokenizer.hpp"

using namespace biembed;

namespace {

// independent word 3-shingle sets as plain strings, '|' separated
std::set<std::string> oracle_shingles(const std::string& text, int n) {
    std::vector<std::string> words = BpeModel::split_words(text);
    std::set<std::string> out;
    if (words.empty()) return out;
    if (words.size() < std::size_t(n)) {
        std::string g = words[0];
        for (std::size_t j = 1; j < words.size(); ++j) g += "|" + words[j];
        out.insert(g);
        return out;
    }
    for (std::size_t i = 0; i + std::size_t(n) <= words.size(); ++i) {
        std::string g = words[i];
        for (std::size_t j = 1; j < std::size_t(n); ++j) g += "|" + words[i + j];
        out.insert(g);
    }
    return out;
}

double oracle_jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
    if (a.empty() && b.empty()) return 1.0;
    std::vector<std::string> inter;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
    return double(inter.size()) / double(a.size() + b.size() - inter.size());
}

// deterministic pseudo-embedding: unit vector from the text hash
std::vector<double> hash_embed(const std::string& text, std::size_t dim = 16) {
    Rng rng(fnv1a64(text));
    std::vector<double> v(dim);
    double norm = 0.0;
    for (double& x : v) {
        x = rng.normal();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
}

// pseudo-embedding clustered by the text's first word ("topic") with a
// small text-specific perturbation; same-topic texts have high cosine
std::vector<double> topic_embed(const std::string& text) {
    std::vector<std::string> words = BpeModel::split_words(text);
    std::vector<double> base = hash_embed(words.empty() ? "" : words[0]);
    std::vector<double> jitter = hash_embed(text);
    for (std::size_t i = 0; i < base.size(); ++i) base[i] = 10.0 * base[i] + jitter[i];
    return base;
}

EmbedFn hash_embed_fn() {
    return [](const std::string& t) { return hash_embed(t); };
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

PairRecord rec_of(const std::string& q, const std::string& p) {
    return PairRecord{q, p, "test", "xx"};
}

std::string random_side(Rng& rng) {
    static const std::vector<std::string> words = {"alpha",  "beta",   "gamma.", "delta",
                                                   "x",      "runs?",  "very",   "slowly!",
                                                   "word",   "tail",   "end.",   "mid,"};
    int nlines = 1 + int(rng.uniform_index(4));
    std::string out;
    for (int l = 0; l < nlines; ++l) {
        if (l) out += "\n";
        if (rng.bernoulli(0.3)) out += "  ";
        int nwords = int(rng.uniform_index(6));
        for (int w = 0; w < nwords; ++w) {
            if (w) out += " ";
            out += words[rng.uniform_index(words.size())];
        }
        if (rng.bernoulli(0.3)) out += "\t";
    }
    return out;
}

}  // namespace

TEST_CASE("duplicate line fraction counts repeats of trimmed non-empty lines") {
    std::string ten_same;
    for (int i = 0; i < 10; ++i) ten_same += "the same line again\n";
    CHECK(dup_line_fraction(ten_same) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(dup_line_fraction("one\ntwo\nthree") == doctest::Approx(0.0));
    // 4 non-empty lines, 3 distinct (blank lines and spacing ignored)
    CHECK(dup_line_fraction("a b\n\n  a b  \nc d\ne f\n") == doctest::Approx(0.25));
    CHECK(dup_line_fraction("") == doctest::Approx(0.0));
}

TEST_CASE("duplicate ngram fraction on word trigrams") {
    // a b c a b c a b c: 7 trigrams, 3 distinct -> 4/7
    CHECK(dup_ngram_fraction("a b c a b c a b c", 3) == doctest::Approx(4.0 / 7.0).epsilon(1e-12));
    CHECK(dup_ngram_fraction("all words fully distinct here", 3) == doctest::Approx(0.0));
    CHECK(dup_ngram_fraction("two words", 3) == doctest::Approx(0.0));  // too short to repeat
    // unigrams: "a a b" -> 3 grams, 2 distinct -> 1/3
    CHECK(dup_ngram_fraction("a a b", 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("quality filter names the first failed rule") {
    CurationConfig cfg;
    cfg.min_chars = 10;

    FilterDecision d = quality_filter(rec_of("ok", "a perfectly fine passage."), cfg);
    CHECK_FALSE(d.keep);
    CHECK(d.reason == "too_short");

    std::string ten_same;
    for (int i = 0; i < 10; ++i) ten_same += "the same line again\n";
    d = quality_filter(rec_of("a clean enough query", ten_same), cfg);
    CHECK_FALSE(d.keep);
    CHECK(d.reason == "dup_lines");

    // short AND repetitive: the earlier rule wins
    d = quality_filter(rec_of("ok", ten_same), cfg);
    CHECK(d.reason == "too_short");

    cfg.max_chars = 50;
    std::string long_p(60, 'x');
    d = quality_filter(rec_of("a clean enough query", long_p), cfg);
    CHECK(d.reason == "too_long");

    std::string gram_spam;
    for (int i = 0; i < 30; ++i) gram_spam += "buy cheap stuff now ";
    d = quality_filter(rec_of("a clean enough query", gram_spam), CurationConfig{});
    CHECK(d.reason == "dup_ngrams");

    std::string clean_q = "what is the expected lifespan of a desk lamp";
    std::string clean_p =
        "Desk lamps typically last for many years. The bulb is usually the first part to fail, "
        "and replacing it restores the lamp completely. Wiring faults are rare in practice.";
    CHECK(clean_p.size() > 100);  // comfortably inside the default window
    d = quality_filter(rec_of(clean_q, clean_p), CurationConfig{});
    CHECK(d.keep);
    CHECK(d.reason.empty());
}

TEST_CASE("refine drops one-word lines, trailing fragments, and pads") {
    // the title line has one word, so only the sentence survives
    auto r = refine(rec_of("Title\nA full sentence here.", "Another complete sentence."));
    REQUIRE(r.has_value());
    CHECK(r->q == "A full sentence here.");
    CHECK(r->p == "Another complete sentence.");
    CHECK(r->source == "test");
    CHECK(r->lang == "xx");

    // trailing line without sentence-final punctuation is cut from a
    // multi-line side, but a lone unfinished line (a typical query) stays
    r = refine(rec_of("best pizza dough recipe",
                      "Knead the dough for ten minutes.\nthen you simply"));
    REQUIRE(r.has_value());
    CHECK(r->q == "best pizza dough recipe");
    CHECK(r->p == "Knead the dough for ten minutes.");

    // several trailing fragments all go; quoted sentence end counts as final
    r = refine(rec_of("  padded   query text? ",
                      "He said \"stop.\"\nnot finished one\nnot finished two"));
    REQUIRE(r.has_value());
    CHECK(r->q == "padded   query text?");
    CHECK(r->p == "He said \"stop.\"");

    // record of only one-word lines -> drop signal
    CHECK_FALSE(refine(rec_of("alpha\nbeta\ngamma", "A real passage here.")).has_value());
    CHECK_FALSE(refine(rec_of("A real query here?", "one\ntwo")).has_value());
    CHECK_FALSE(refine(rec_of("", "A real passage here.")).has_value());
}

TEST_CASE("refine is idempotent on random records") {
    Rng rng(41);
    int survivors = 0;
    for (int t = 0; t < 1000; ++t) {
        PairRecord rec = rec_of(random_side(rng), random_side(rng));
        auto once = refine(rec);
        if (!once) {
            continue;  // drop signal is trivially stable
        }
        ++survivors;
        CHECK_FALSE(once->q.empty());
        CHECK_FALSE(once->p.empty());
        auto twice = refine(*once);
        REQUIRE(twice.has_value());
        CHECK(twice->q == once->q);
        CHECK(twice->p == once->p);
    }
    CHECK(survivors > 100);  // the generator must exercise the surviving path too
}

TEST_CASE("shingles and jaccard match an independent oracle") {
    CurationConfig cfg;
    std::vector<std::string> texts = {
        "a b c d e",
        "a b c d f",
        "completely different words in this one",
        "a b c d e",
        "short",
    };
    for (const auto& ta : texts)
        for (const auto& tb : texts) {
            double got = jaccard(shingle_set(ta, cfg.ngram_n), shingle_set(tb, cfg.ngram_n));
            double want = oracle_jaccard(oracle_shingles(ta, 3), oracle_shingles(tb, 3));
            CHECK(got == doctest::Approx(want).epsilon(1e-12));
        }
    // the constructed pair: 3 shingles each, 2 shared -> exactly 0.5
    CHECK(jaccard(shingle_set("a b c d e", 3), shingle_set("a b c d f", 3)) ==
          doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("minhash signature is deterministic and tracks jaccard") {
    CurationConfig cfg;
    auto sa = shingle_set("a b c d e", cfg.ngram_n);
    auto sb = shingle_set("a b c d f", cfg.ngram_n);
    auto siga = minhash_signature(sa, cfg);
    auto sigb = minhash_signature(sb, cfg);
    REQUIRE(siga.size() == 128);
    CHECK(siga == minhash_signature(sa, cfg));  // same seed, same signature
    CHECK(minhash_signature(sa, cfg) == minhash_signature(shingle_set("a b c d e", 3), cfg));

    std::size_t agree = 0;
    for (std::size_t i = 0; i < siga.size(); ++i)
        if (siga[i] == sigb[i]) ++agree;
    // matching coordinates estimate the true jaccard of 0.5
    CHECK(double(agree) / double(siga.size()) == doctest::Approx(0.5).epsilon(0.5));
    CHECK(agree > 0);
    CHECK(agree < siga.size());

    CurationConfig other = cfg;
    other.seed = 99;
    CHECK(minhash_signature(sa, other) != siga);
}

TEST_CASE("near dedup keeps the first of identical records and spares jaccard 0.5") {
    CurationConfig cfg;
    std::vector<PairRecord> records = {
        rec_of("what makes bread rise when baked", "Yeast produces carbon dioxide during proofing."),
        rec_of("what makes bread rise when baked", "Yeast produces carbon dioxide during proofing."),
        rec_of("a b c", "d e"),
        rec_of("a b c", "d f"),
    };
    records[0].source = "first";
    records[1].source = "second";

    auto keep = near_dedup_keep_indices(records, cfg);
    CHECK(keep == std::vector<std::size_t>{0, 2, 3});  // jaccard(2,3)=0.5 < 0.8: both live

    auto out = near_dedup(records, cfg);
    REQUIRE(out.size() == 3);
    CHECK(out[0].source == "first");  // stream order decides the survivor

    cfg.dedup_jaccard_threshold = 0.5;
    CHECK(near_dedup_keep_indices(records, cfg) == std::vector<std::size_t>{0, 2});
}

TEST_CASE("near dedup matches a brute-force jaccard oracle on planted duplicates") {
    // 1,000 docs: 400 bases, 300 near-duplicate copies, 300 unrelated
    Rng rng(7);
    std::vector<std::string> vocab;
    for (int i = 0; i < 100; ++i) vocab.push_back("w" + std::to_string(100 + i));
    auto random_doc = [&](std::size_t len) {
        std::string d;
        for (std::size_t i = 0; i < len; ++i) {
            if (i) d += " ";
            d += vocab[rng.uniform_index(vocab.size())];
        }
        return d;
    };

    std::vector<PairRecord> records;
    std::vector<std::string> bases;
    for (int i = 0; i < 400; ++i) {
        bases.push_back(random_doc(20 + rng.uniform_index(20)));
        records.push_back(rec_of("q " + std::to_string(i), bases.back()));
    }
    for (int i = 0; i < 300; ++i) {
        // copy a base and swap one or two words
        std::vector<std::string> words = BpeModel::split_words(bases[std::size_t(i)]);
        std::uint64_t edits = 1 + rng.uniform_index(2);
        for (std::uint64_t e = 0; e < edits; ++e)
            words[rng.uniform_index(words.size())] = vocab[rng.uniform_index(vocab.size())];
        std::string edited = words[0];
        for (std::size_t w = 1; w < words.size(); ++w) edited += " " + words[w];
        records.push_back(rec_of("q " + std::to_string(i), edited));
    }
    for (int i = 0; i < 300; ++i)
        records.push_back(rec_of("r " + std::to_string(i), random_doc(20 + rng.uniform_index(20))));
    REQUIRE(records.size() == 1000);

    CurationConfig cfg;
    auto keep = near_dedup_keep_indices(records, cfg);
    std::set<std::size_t> impl_dropped;
    for (std::size_t i = 0, c = 0; i < records.size(); ++i) {
        if (c < keep.size() && keep[c] == i)
            ++c;
        else
            impl_dropped.insert(i);
    }

    // oracle: exact all-pairs jaccard >= threshold, transitive clusters,
    // drop everything but the first of each cluster
    std::vector<std::set<std::string>> sh(records.size());
    for (std::size_t i = 0; i < records.size(); ++i)
        sh[i] = oracle_shingles(records[i].q + " " + records[i].p, 3);
    std::vector<std::size_t> cluster(records.size());
    for (std::size_t i = 0; i < cluster.size(); ++i) cluster[i] = i;
    std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
        return cluster[x] == x ? x : cluster[x] = find(cluster[x]);
    };
    std::size_t oracle_edges = 0;
    for (std::size_t i = 0; i < records.size(); ++i)
        for (std::size_t j = i + 1; j < records.size(); ++j)
            if (oracle_jaccard(sh[i], sh[j]) >= cfg.dedup_jaccard_threshold) {
                ++oracle_edges;
                std::size_t a = find(i), b = find(j);
                if (a != b) cluster[std::max(a, b)] = std::min(a, b);
            }
    std::set<std::size_t> oracle_dropped;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (find(i) != i) oracle_dropped.insert(i);

    REQUIRE(oracle_edges > 100);  // the planting actually produced near-dupes
    REQUIRE(!oracle_dropped.empty());

    std::size_t correct = 0;
    for (std::size_t i : impl_dropped)
        if (oracle_dropped.count(i)) ++correct;
    double precision = impl_dropped.empty() ? 1.0 : double(correct) / double(impl_dropped.size());
    double recall = double(correct) / double(oracle_dropped.size());
    CHECK(precision >= 0.95);
    CHECK(recall >= 0.95);

    // order stability and determinism
    CHECK(std::is_sorted(keep.begin(), keep.end()));
    CHECK(near_dedup_keep_indices(records, cfg) == keep);
}

TEST_CASE("consistency filter keeps everything with a one-passage pool") {
    CurationConfig cfg;
    cfg.consistency_sample_size = 1;
    std::vector<PairRecord> records;
    for (int i = 0; i < 10; ++i)
        records.push_back(rec_of("query " + std::to_string(i), "passage " + std::to_string(i)));
    auto ranks = consistency_ranks(records, hash_embed_fn(), cfg);
    for (std::size_t r : ranks) CHECK(r == 1);
    auto keep = consistency_keep_indices(records, hash_embed_fn(), cfg);
    CHECK(keep.size() == records.size());
}

TEST_CASE("consistency filter drops a planted mismatch among coherent pairs") {
    // coherent pairs share a leading topic word; the planted pair does not
    std::vector<PairRecord> records;
    for (int i = 0; i < 100; ++i) {
        std::string topic = "topic" + std::to_string(i);
        records.push_back(rec_of(topic + " question about it", topic + " passage answering it"));
    }
    records.push_back(rec_of("topic3 question variant", "topic77 unrelated passage"));

    CurationConfig cfg;
    cfg.consistency_sample_size = int(records.size());
    cfg.consistency_top_k = 2;
    EmbedFn embed = [](const std::string& t) { return topic_embed(t); };
    auto keep = consistency_keep_indices(records, embed, cfg);

    std::set<std::size_t> kept(keep.begin(), keep.end());
    CHECK(!kept.count(records.size() - 1));  // the mismatch ranks far below top 2
    CHECK(kept.size() >= 100);               // coherent pairs all survive
}

TEST_CASE("consistency ranks agree with a brute-force sort over the full pool") {
    std::vector<PairRecord> records;
    for (int i = 0; i < 200; ++i)
        records.push_back(
            rec_of("q" + std::to_string(i) + " text", "p" + std::to_string(i) + " body"));
    CurationConfig cfg;
    cfg.consistency_sample_size = int(records.size());
    EmbedFn embed = hash_embed_fn();
    auto ranks = consistency_ranks(records, embed, cfg);
    REQUIRE(ranks.size() == records.size());

    for (std::size_t i = 0; i < records.size(); ++i) {
        std::vector<std::pair<double, std::size_t>> scored;
        auto qe = embed(records[i].q);
        for (std::size_t j = 0; j < records.size(); ++j)
            scored.emplace_back(-cosine_of(qe, embed(records[j].p)), j);
        std::sort(scored.begin(), scored.end());
        std::size_t pos = 0;
        while (scored[pos].second != i) ++pos;
        CHECK(ranks[i] == pos + 1);
    }

    CHECK(consistency_ranks(records, embed, cfg) == ranks);  // deterministic
}

TEST_CASE("curation pipeline composes stages and logs drops by line") {
    std::string ten_same;
    for (int i = 0; i < 10; ++i) ten_same += "the same line again\n";
    std::vector<PairRecord> records = {
        rec_of("what makes sourdough tangy over time",
               "Lactic acid bacteria produce the tang. Longer fermentation means more acid."),
        rec_of("ok", "a passage that will never be read."),        // line 2: too_short
        rec_of("a clean enough query string", ten_same),           // line 3: dup_lines
        rec_of("alphabetical\nbedazzlement\ncataclysmic",
               "Real passage text goes here."),                    // line 4: refine empties q
        rec_of("what makes sourdough tangy over time",
               "Lactic acid bacteria produce the tang. Longer fermentation means more acid."),
        // line 5: duplicate of line 1
    };

    CurationConfig cfg;
    CurationResult res = curate_pairs(records, cfg);
    REQUIRE(res.kept.size() == 1);
    CHECK(res.kept_lines == std::vector<std::size_t>{1});
    CHECK(res.kept[0].q == records[0].q);

    REQUIRE(res.dropped.size() == 4);
    CHECK(res.dropped[0].line == 2);
    CHECK(res.dropped[0].stage == "quality_filter");
    CHECK(res.dropped[0].reason == "too_short");
    CHECK(res.dropped[1].line == 3);
    CHECK(res.dropped[1].reason == "dup_lines");
    CHECK(res.dropped[2].line == 4);
    CHECK(res.dropped[2].stage == "refine");
    CHECK(res.dropped[2].reason == "emptied");
    CHECK(res.dropped[3].line == 5);
    CHECK(res.dropped[3].stage == "near_dedup");
    CHECK(res.dropped[3].reason == "near_duplicate");

    // with an embedder attached, the trivial pool still keeps the survivor
    CurationConfig cfg1 = cfg;
    cfg1.consistency_sample_size = 1;
    EmbedFn embed = hash_embed_fn();
    CurationResult res2 = curate_pairs(records, cfg1, &embed);
    CHECK(res2.kept.size() == 1);

    // rerun bit-reproduces
    CurationResult res3 = curate_pairs(records, cfg);
    CHECK(res3.kept_lines == res.kept_lines);
    REQUIRE(res3.dropped.size() == res.dropped.size());
    for (std::size_t i = 0; i < res.dropped.size(); ++i) {
        CHECK(res3.dropped[i].line == res.dropped[i].line);
        CHECK(res3.dropped[i].reason == res.dropped[i].reason);
    }
}

TEST_CASE("pair record files and drop logs round-trip") {
    std::string rec_path = temp_path("biembed_pairs_test.jsonl");
    std::string log_path = temp_path("biembed_drops_test.jsonl");

    std::vector<PairRecord> records = {
        {"a query with \"quotes\"", "a passage\nwith a newline", "webqa", "en"},
        {"deuxième requête", "deuxième passage utile", "webqa", "fr"},
    };
    save_pair_records(rec_path, records);
    auto loaded = load_pair_records(rec_path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].q == records[0].q);
    CHECK(loaded[0].p == records[0].p);
    CHECK(loaded[1].source == "webqa");
    CHECK(loaded[1].lang == "fr");

    write_drop_log(log_path, {{2, "quality_filter", "too_short"}, {7, "refine", "emptied"}});
    std::ifstream lf(log_path);
    std::string line;
    std::getline(lf, line);
    CHECK(line.find("\"line\":2") != std::string::npos);
    CHECK(line.find("too_short") != std::string::npos);
    std::getline(lf, line);
    CHECK(line.find("\"line\":7") != std::string::npos);

    // malformed line reports its position
    std::ofstream bad(rec_path);
    bad << R"({"q":"fine","p":"fine too"})" << "\n" << "{broken\n";
    bad.close();
    CHECK_THROWS_AS(load_pair_records(rec_path), IoError);
    CHECK_THROWS_AS(load_pair_records(temp_path("no_such_pairs_file.jsonl")), IoError);

    std::remove(rec_path.c_str());
    std::remove(log_path.c_str());
}

TEST_CASE("curation config validation") {
    CurationConfig cfg;
    CHECK_NOTHROW(cfg.validate());

    CurationConfig bad = cfg;
    bad.lsh_bands = 33;  // does not divide 128
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.dedup_jaccard_threshold = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.max_chars = 5;  // below min_chars
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.max_dup_line_frac = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.consistency_top_k = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.consistency_sample_size = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
