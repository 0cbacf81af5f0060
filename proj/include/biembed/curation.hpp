#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "biembed/eval.hpp"  // EmbedFn

namespace biembed {

struct PairRecord {
    std::string q;
    std::string p;
    std::string source;
    std::string lang;
};

struct CurationConfig {
    int min_chars = 20;
    int max_chars = 20000;
    double max_dup_line_frac = 0.3;
    double max_dup_ngram_frac = 0.2;
    int ngram_n = 3;
    double dedup_jaccard_threshold = 0.8;
    int minhash_permutations = 128;
    int lsh_bands = 32;
    int consistency_top_k = 2;
    int consistency_sample_size = 1000;
    std::uint64_t seed = 0;

    void validate() const;
};

// keep/drop with the first failed rule named
struct FilterDecision {
    bool keep = true;
    std::string reason;  // empty when kept
};

// One sidecar-log line: which input record died where and why.
struct DropEntry {
    std::size_t line = 0;  // 1-based input line number
    std::string stage;
    std::string reason;
};

struct CurationResult {
    std::vector<PairRecord> kept;
    std::vector<std::size_t> kept_lines;  // input line numbers of survivors
    std::vector<DropEntry> dropped;
};

// --- stage 1: quality filter ----------------------------------------------

// fraction of lines (non-empty) that repeat an earlier line: 1 - distinct/total
double dup_line_fraction(const std::string& text);

// fraction of word n-grams that repeat: 1 - distinct/total (0 when fewer
// than n words)
double dup_ngram_fraction(const std::string& text, int n);

FilterDecision quality_filter(const PairRecord& rec, const CurationConfig& cfg);

// --- stage 2: refinement ---------------------------------------------------

// Per-line cleanup of both sides: trims whitespace, deletes lines with fewer
// than two words, and trims trailing unfinished lines (no sentence-final
// punctuation) from multi-line sides. Returns nothing when a side ends up
// empty. Idempotent.
std::optional<PairRecord> refine(const PairRecord& rec);

// --- stage 3: near-deduplication ------------------------------------------

// Hashed word n-shingles of a text (whole multiset collapsed to a set). A
// text with fewer than n words contributes its full word sequence as a
// single shingle so short records still compare.
std::set<std::uint64_t> shingle_set(const std::string& text, int n);

double jaccard(const std::set<std::uint64_t>& a, const std::set<std::uint64_t>& b);

// MinHash signature of a shingle set under cfg.minhash_permutations
// universal-hash permutations seeded by cfg.seed.
std::vector<std::uint64_t> minhash_signature(const std::set<std::uint64_t>& shingles,
                                             const CurationConfig& cfg);

// Indices (ascending) of the records that survive near-duplicate removal:
// LSH banding proposes candidates, exact Jaccard >= threshold confirms, and
// each duplicate cluster keeps its first record in stream order.
std::vector<std::size_t> near_dedup_keep_indices(const std::vector<PairRecord>& records,
                                                 const CurationConfig& cfg);

std::vector<PairRecord> near_dedup(const std::vector<PairRecord>& records,
                                   const CurationConfig& cfg);

// --- stage 4: consistency filter ------------------------------------------

// Rank of each record's own passage among a candidate pool of
// consistency_sample_size passages: the record's own passage plus the first
// sample_size-1 other passages of one fixed seed-shuffled order, scored by
// cosine to the query embedding. Rank is 1-based; ties break toward lower
// record index.
std::vector<std::size_t> consistency_ranks(const std::vector<PairRecord>& records,
                                           const EmbedFn& embed, const CurationConfig& cfg);

// Keeps records whose passage ranks within consistency_top_k.
std::vector<std::size_t> consistency_keep_indices(const std::vector<PairRecord>& records,
                                                  const EmbedFn& embed,
                                                  const CurationConfig& cfg);

// --- full pipeline ---------------------------------------------------------

// filter -> refine -> near_dedup -> (optional) consistency_filter.
// `embed` may be null to skip the consistency stage (no model at hand).
CurationResult curate_pairs(const std::vector<PairRecord>& records, const CurationConfig& cfg,
                            const EmbedFn* embed = nullptr);

// --- record and log I/O ----------------------------------------------------

std::vector<PairRecord> load_pair_records(const std::string& path);
void save_pair_records(const std::string& path, const std::vector<PairRecord>& records);
void write_drop_log(const std::string& path, const std::vector<DropEntry>& dropped);

}  // namespace biembed
