#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "biembed/common.hpp"

namespace biembed {

// Embedding backend: text -> dense vector. The harness never sees model
// internals, so tests can substitute lookup tables.
using EmbedFn = std::function<std::vector<double>(const std::string&)>;

struct StsTask {
    std::vector<std::pair<std::string, std::string>> pairs;
    std::vector<double> gold;

    void validate() const;
    static StsTask load_file(const std::string& path);
};

struct RetrievalTask {
    std::map<std::string, std::string> queries;  // id -> text
    std::map<std::string, std::string> corpus;   // id -> text
    // query id -> (doc id -> relevance grade >= 0)
    std::map<std::string, std::map<std::string, int>> qrels;

    void validate() const;
    static RetrievalTask load_files(const std::string& corpus_path, const std::string& queries_path,
                                    const std::string& qrels_path);
};

struct MetricReport {
    std::string task_name;
    std::string model_tag;
    std::map<std::string, double> values;

    void validate() const;
    std::string to_json() const;
    std::string table() const;  // aligned plain-text rendering
};

// --- metric primitives -----------------------------------------------------

// Average ranks (ties share the mean of their positions), 1-based.
std::vector<double> average_ranks(const std::vector<double>& xs);

// Pearson correlation of raw values.
double pearson(const std::vector<double>& xs, const std::vector<double>& ys);

// Pearson correlation of average ranks.
double spearman(const std::vector<double>& xs, const std::vector<double>& ys);

// Exponential-gain nDCG: gain 2^rel - 1, discount log2(rank+1), normalized
// by the ideal ordering truncated at k. 0 when the query has no relevant
// documents.
double ndcg_at_k(const std::vector<std::string>& ranked,
                 const std::map<std::string, int>& rels, std::size_t k = 10);

// Binary-relevance average precision for one ranked list.
double average_precision(const std::vector<std::string>& ranked,
                         const std::set<std::string>& relevant);

struct MapResult {
    double map = 0.0;
    std::size_t evaluated = 0;
    std::size_t excluded = 0;  // queries with no relevant documents
};

// MAP over queries; queries without relevant documents are excluded from the
// mean and counted.
MapResult mean_average_precision(
    const std::map<std::string, std::vector<std::string>>& ranked_by_query,
    const std::map<std::string, std::set<std::string>>& relevant_by_query);

double recall_at_k(const std::vector<std::string>& ranked, const std::set<std::string>& relevant,
                   std::size_t k);

double accuracy(std::size_t correct, std::size_t total);

// Cosine over plain vectors (no autodiff); zero norm is a degenerate input.
double cosine_of(const std::vector<double>& x, const std::vector<double>& y);

// --- task runners ----------------------------------------------------------

MetricReport run_sts_eval(const EmbedFn& embed, const StsTask& task,
                          const std::string& task_name = "sts",
                          const std::string& model_tag = "model");

// Brute-force exact ranking (cosine descending, doc id ascending on ties).
// Reports ndcg@k, recall@1, recall@k, map, and the excluded-query count.
MetricReport run_retrieval_eval(const EmbedFn& embed, const RetrievalTask& task, std::size_t k = 10,
                                const std::string& task_name = "retrieval",
                                const std::string& model_tag = "model");

// The ranked doc ids for every query (exposed for oracle comparison).
std::map<std::string, std::vector<std::string>> rank_corpus(const EmbedFn& embed,
                                                            const RetrievalTask& task);

}  // namespace biembed
