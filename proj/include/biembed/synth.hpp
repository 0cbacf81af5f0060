#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "biembed/common.hpp"
#include "biembed/eval.hpp"
#include "biembed/training.hpp"

namespace biembed {

// Seeded generator for two invented syllable languages plus the task data
// built on top of them. The languages share no surface forms; each has
//   - a successor-table Markov structure, so a masked word is predictable
//     from its neighbours (pretraining corpora),
//   - a bank of disjoint topics (fixed word sets), so pair / retrieval / sts
//     tasks are solvable by topic matching but not by string overlap.
// Everything is a pure function of the config, so a rerun with the same seed
// reproduces every byte.
struct SynthConfig {
    std::uint64_t seed = 0;

    int word_types = 2200;      // distinct words per language
    int topics = 300;           // disjoint topics per language
    int words_per_topic = 6;
    int successors = 4;         // Markov out-degree

    int corpus_lines = 4000;    // per language
    int words_per_line = 8;

    int pair_train = 5000;
    int pair_holdout = 500;     // also the retrieval candidate pool; <= 2*topics
    int retrieval_train = 2000;
    int negatives = 2;          // hard negatives per retrieval example
    int sts_train = 2000;
    int sts_holdout = 500;

    void validate() const;
};

class SynthWorld {
public:
    explicit SynthWorld(const SynthConfig& cfg);

    const SynthConfig& config() const { return cfg_; }
    // lang is 0 or 1 throughout.
    const std::vector<std::string>& words(int lang) const;
    const std::vector<std::string>& topic_words(int lang, int topic) const;

    // Markov-walk corpus, one sentence per line.
    std::vector<std::string> corpus(int lang) const;
    // A fixed cycle of `period` words repeated for `lines` lines of
    // words_per_line words; the cycle runs on across line breaks, so longer
    // windows stay locally predictable. The cycle itself is a successor-table
    // walk, so its word bigrams (except the wrap-around seam) follow the same
    // local statistics as corpus().
    std::vector<std::string> periodic_corpus(int lang, int period, int lines) const;

    // Train pairs cycle through (lang, topic); holdout pairs use a distinct
    // (lang, topic) per pair, so each holdout query has exactly one matching
    // candidate passage.
    std::vector<PairExample> train_pairs() const;
    std::vector<PairExample> holdout_pairs() const;
    // Negatives mix topic words with another topic's words.
    std::vector<RetrievalExample> train_retrieval() const;
    // Score = shared-word fraction, already in [0, 1]; the written files use
    // the conventional 0..5 scale (ceiling 5.0) instead.
    std::vector<StsExample> train_sts() const;
    std::vector<StsExample> holdout_sts() const;

    // The holdout pairs as an eval retrieval task: query i's only relevant
    // document is passage i.
    RetrievalTask holdout_retrieval_task() const;
    StsTask holdout_sts_task() const;

    // Writes the whole bundle under dir (created if missing):
    //   corpus_a.txt corpus_b.txt periodic_a.txt
    //   pairs_train.jsonl pairs_holdout.jsonl retrieval_train.jsonl
    //   sts_train.jsonl sts_holdout.jsonl
    //   eval_corpus.jsonl eval_queries.jsonl eval_qrels.jsonl eval_sts.jsonl
    void write_bundle(const std::string& dir) const;

private:
    SynthConfig cfg_;
    std::vector<std::string> words_[2];
    std::vector<std::vector<int>> successors_[2];           // [word][out-edge]
    std::vector<std::vector<std::string>> topics_[2];       // [topic][word]

    std::string sentence_from_topic(int lang, int topic, int n, Rng& rng) const;
    std::string mixed_sentence(int lang, int topic, int other, int from_topic, int total,
                               Rng& rng) const;
    std::vector<StsExample> sts_items(int count, std::uint64_t salt) const;
};

}  // namespace biembed
