#include "biembed/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace biembed {

namespace {

using nlohmann::json;

json parse_jsonl_line(const std::string& line, const std::string& path, std::size_t lineno) {
    try {
        return json::parse(line);
    } catch (const json::exception& e) {
        throw IoError(path + ":" + std::to_string(lineno) + ": bad record: " + e.what());
    }
}

template <typename Fn>
void for_each_jsonl(const std::string& path, Fn&& fn) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        fn(parse_jsonl_line(line, path, lineno), lineno);
    }
}

double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

}  // namespace

void StsTask::validate() const {
    if (pairs.size() != gold.size())
        throw ConfigError("sts task: " + std::to_string(pairs.size()) + " pairs vs " +
                          std::to_string(gold.size()) + " gold scores");
    if (pairs.size() < 2) throw ConfigError("sts task: need at least 2 pairs");
    for (double g : gold)
        if (!std::isfinite(g)) throw ConfigError("sts task: non-finite gold score");
}

StsTask StsTask::load_file(const std::string& path) {
    StsTask task;
    for_each_jsonl(path, [&](const json& j, std::size_t) {
        task.pairs.emplace_back(j.at("q").get<std::string>(), j.at("p").get<std::string>());
        task.gold.push_back(j.at("score").get<double>());
    });
    task.validate();
    return task;
}

void RetrievalTask::validate() const {
    if (corpus.empty()) throw IoError("retrieval task: empty corpus");
    if (queries.empty()) throw IoError("retrieval task: no queries");
    for (const auto& [qid, docs] : qrels) {
        if (!queries.count(qid))
            throw ConfigError("retrieval task: qrels reference unknown query " + qid);
        for (const auto& [did, rel] : docs) {
            if (!corpus.count(did))
                throw ConfigError("retrieval task: qrels reference unknown doc " + did);
            if (rel < 0) throw ConfigError("retrieval task: negative relevance for doc " + did);
        }
    }
}

RetrievalTask RetrievalTask::load_files(const std::string& corpus_path,
                                        const std::string& queries_path,
                                        const std::string& qrels_path) {
    RetrievalTask task;
    for_each_jsonl(corpus_path, [&](const json& j, std::size_t) {
        task.corpus[j.at("id").get<std::string>()] = j.at("text").get<std::string>();
    });
    for_each_jsonl(queries_path, [&](const json& j, std::size_t) {
        task.queries[j.at("id").get<std::string>()] = j.at("text").get<std::string>();
    });
    for_each_jsonl(qrels_path, [&](const json& j, std::size_t) {
        task.qrels[j.at("qid").get<std::string>()][j.at("docid").get<std::string>()] =
            j.at("rel").get<int>();
    });
    task.validate();
    return task;
}

void MetricReport::validate() const {
    for (const auto& [name, v] : values) {
        if (!std::isfinite(v)) throw NumericError("metric " + name + " is not finite");
        bool corr = name.rfind("spearman", 0) == 0 || name.rfind("pearson", 0) == 0;
        bool unit = name.rfind("ndcg", 0) == 0 || name.rfind("map", 0) == 0 ||
                    name.rfind("recall", 0) == 0 || name.rfind("accuracy", 0) == 0;
        if (corr && (v < -1.0 || v > 1.0))
            throw NumericError("metric " + name + " outside [-1,1]: " + std::to_string(v));
        if (unit && (v < 0.0 || v > 1.0))
            throw NumericError("metric " + name + " outside [0,1]: " + std::to_string(v));
    }
}

std::string MetricReport::to_json() const {
    json j;
    j["task"] = task_name;
    j["model"] = model_tag;
    j["metrics"] = json::object();
    for (const auto& [name, v] : values) j["metrics"][name] = v;
    return j.dump();
}

std::string MetricReport::table() const {
    std::size_t w = 6;
    for (const auto& [name, v] : values) w = std::max(w, name.size());
    std::ostringstream os;
    os << "task: " << task_name << "  model: " << model_tag << "\n";
    for (const auto& [name, v] : values) {
        os << "  " << name << std::string(w - name.size() + 2, ' ');
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        os << buf << "\n";
    }
    return os.str();
}

std::vector<double> average_ranks(const std::vector<double>& xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
        // positions i..j (0-based) share the average of 1-based ranks i+1..j+1
        double avg = (double(i + 1) + double(j + 1)) / 2.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
        i = j + 1;
    }
    return ranks;
}

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw ConfigError("pearson: length mismatch");
    if (xs.size() < 2) throw ConfigError("pearson: need at least 2 observations");
    const double n = double(xs.size());
    double mx = mean_of(xs), my = mean_of(ys);
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        double dx = xs[i] - mx, dy = ys[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    sxx /= n;
    syy /= n;
    sxy /= n;
    if (!(sxx > 0) || !(syy > 0))
        throw DegenerateError("pearson: zero variance (constant input)");
    return sxy / std::sqrt(sxx * syy);
}

double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw ConfigError("spearman: length mismatch");
    if (xs.size() < 2) throw ConfigError("spearman: need at least 2 observations");
    return pearson(average_ranks(xs), average_ranks(ys));
}

namespace {

double dcg(const std::vector<int>& rels_in_rank_order, std::size_t k) {
    double total = 0;
    for (std::size_t r = 0; r < std::min(k, rels_in_rank_order.size()); ++r)
        total += (std::pow(2.0, rels_in_rank_order[r]) - 1.0) / std::log2(double(r) + 2.0);
    return total;
}

}  // namespace

double ndcg_at_k(const std::vector<std::string>& ranked, const std::map<std::string, int>& rels,
                 std::size_t k) {
    if (k < 1) throw ConfigError("ndcg_at_k: k must be >= 1");
    std::vector<int> gains;
    gains.reserve(ranked.size());
    for (const auto& id : ranked) {
        auto it = rels.find(id);
        gains.push_back(it == rels.end() ? 0 : it->second);
    }
    std::vector<int> ideal;
    for (const auto& [id, rel] : rels)
        if (rel > 0) ideal.push_back(rel);
    std::sort(ideal.rbegin(), ideal.rend());
    double idcg = dcg(ideal, k);
    if (idcg == 0.0) return 0.0;  // no relevant documents retrievable
    return dcg(gains, k) / idcg;
}

double average_precision(const std::vector<std::string>& ranked,
                         const std::set<std::string>& relevant) {
    if (relevant.empty()) throw DegenerateError("average_precision: no relevant documents");
    double hits = 0, total = 0;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
        if (relevant.count(ranked[r])) {
            hits += 1;
            total += hits / double(r + 1);
        }
    }
    return total / double(relevant.size());
}

MapResult mean_average_precision(
    const std::map<std::string, std::vector<std::string>>& ranked_by_query,
    const std::map<std::string, std::set<std::string>>& relevant_by_query) {
    MapResult out;
    double total = 0;
    for (const auto& [qid, ranked] : ranked_by_query) {
        auto it = relevant_by_query.find(qid);
        if (it == relevant_by_query.end() || it->second.empty()) {
            ++out.excluded;
            continue;
        }
        total += average_precision(ranked, it->second);
        ++out.evaluated;
    }
    if (out.evaluated == 0) throw DegenerateError("mean_average_precision: no evaluable queries");
    out.map = total / double(out.evaluated);
    return out;
}

double recall_at_k(const std::vector<std::string>& ranked, const std::set<std::string>& relevant,
                   std::size_t k) {
    if (relevant.empty()) throw DegenerateError("recall_at_k: no relevant documents");
    std::size_t found = 0;
    for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r)
        if (relevant.count(ranked[r])) ++found;
    return double(found) / double(relevant.size());
}

double accuracy(std::size_t correct, std::size_t total) {
    if (total == 0) throw DegenerateError("accuracy: empty sample");
    return double(correct) / double(total);
}

double cosine_of(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw ShapeError("cosine_of: dimension mismatch");
    double dot = 0, nx = 0, ny = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        dot += x[i] * y[i];
        nx += x[i] * x[i];
        ny += y[i] * y[i];
    }
    if (!(nx > 0) || !(ny > 0)) throw DegenerateError("cosine_of: zero-norm vector");
    return dot / std::sqrt(nx * ny);
}

MetricReport run_sts_eval(const EmbedFn& embed, const StsTask& task, const std::string& task_name,
                          const std::string& model_tag) {
    task.validate();
    const std::size_t n = task.pairs.size();
    std::vector<double> sims(n);
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        auto qe = embed(task.pairs[i].first);
        auto pe = embed(task.pairs[i].second);
        sims[i] = cosine_of(qe, pe);
    }
    MetricReport report;
    report.task_name = task_name;
    report.model_tag = model_tag;
    report.values["spearman"] = spearman(sims, task.gold);
    report.values["pearson"] = pearson(sims, task.gold);
    report.validate();
    return report;
}

std::map<std::string, std::vector<std::string>> rank_corpus(const EmbedFn& embed,
                                                            const RetrievalTask& task) {
    task.validate();
    // embed the corpus once, in deterministic id order
    std::vector<const std::string*> doc_ids;
    std::vector<const std::string*> doc_texts;
    for (const auto& [id, text] : task.corpus) {
        doc_ids.push_back(&id);
        doc_texts.push_back(&text);
    }
    std::vector<std::vector<double>> doc_embs(doc_ids.size());
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < static_cast<long long>(doc_ids.size()); ++i)
        doc_embs[i] = embed(*doc_texts[i]);

    std::vector<const std::string*> query_ids;
    std::vector<const std::string*> query_texts;
    for (const auto& [id, text] : task.queries) {
        query_ids.push_back(&id);
        query_texts.push_back(&text);
    }
    std::vector<std::vector<std::string>> ranked_all(query_ids.size());
#pragma omp parallel for schedule(dynamic)
    for (long long qi = 0; qi < static_cast<long long>(query_ids.size()); ++qi) {
        auto qe = embed(*query_texts[qi]);
        std::vector<std::pair<double, std::size_t>> scored(doc_ids.size());
        for (std::size_t d = 0; d < doc_ids.size(); ++d)
            scored[d] = {cosine_of(qe, doc_embs[d]), d};
        // cosine descending; doc id ascending on exact ties (ids are already
        // in ascending order, so the index is the tie-break)
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        std::vector<std::string> ranked;
        ranked.reserve(scored.size());
        for (const auto& [s, d] : scored) ranked.push_back(*doc_ids[d]);
        ranked_all[qi] = std::move(ranked);
    }
    std::map<std::string, std::vector<std::string>> out;
    for (std::size_t qi = 0; qi < query_ids.size(); ++qi)
        out[*query_ids[qi]] = std::move(ranked_all[qi]);
    return out;
}

MetricReport run_retrieval_eval(const EmbedFn& embed, const RetrievalTask& task, std::size_t k,
                                const std::string& task_name, const std::string& model_tag) {
    auto ranked_by_query = rank_corpus(embed, task);

    std::map<std::string, std::set<std::string>> relevant_by_query;
    for (const auto& [qid, docs] : task.qrels)
        for (const auto& [did, rel] : docs)
            if (rel > 0) relevant_by_query[qid].insert(did);

    std::vector<double> ndcgs, rec1, reck;
    std::size_t excluded = 0;
    for (const auto& [qid, ranked] : ranked_by_query) {
        auto rels_it = task.qrels.find(qid);
        auto rel_it = relevant_by_query.find(qid);
        if (rel_it == relevant_by_query.end() || rel_it->second.empty()) {
            ++excluded;
            continue;
        }
        ndcgs.push_back(ndcg_at_k(ranked, rels_it->second, k));
        rec1.push_back(recall_at_k(ranked, rel_it->second, 1));
        reck.push_back(recall_at_k(ranked, rel_it->second, k));
    }
    if (ndcgs.empty()) throw DegenerateError("retrieval eval: no query has relevant documents");

    MetricReport report;
    report.task_name = task_name;
    report.model_tag = model_tag;
    report.values["ndcg@" + std::to_string(k)] = mean_of(ndcgs);
    report.values["recall@1"] = mean_of(rec1);
    report.values["recall@" + std::to_string(k)] = mean_of(reck);
    auto mar = mean_average_precision(ranked_by_query, relevant_by_query);
    report.values["map"] = mar.map;
    report.values["queries_evaluated"] = double(mar.evaluated);
    report.values["queries_excluded"] = double(mar.excluded);
    report.validate();
    return report;
}

}  // namespace biembed
