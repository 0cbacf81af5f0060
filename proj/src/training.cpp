#include "biembed/training.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <ostream>

#include "json.hpp"

namespace biembed {

namespace {

using nlohmann::json;

template <typename Fn>
void for_each_jsonl(const std::string& path, Fn&& fn) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            fn(json::parse(line));
        } catch (const json::exception& e) {
            throw IoError(path + ":" + std::to_string(lineno) + ": bad record: " + e.what());
        }
    }
}

}  // namespace

const char* task_kind_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::pair: return "pair";
        case TaskKind::retrieval: return "retrieval";
        case TaskKind::sts: return "sts";
    }
    return "?";
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "pair") return TaskKind::pair;
    if (name == "retrieval") return TaskKind::retrieval;
    if (name == "sts") return TaskKind::sts;
    throw ConfigError("unknown task kind: " + name);
}

std::size_t TaskDataset::size() const {
    switch (kind) {
        case TaskKind::pair: return pairs.size();
        case TaskKind::retrieval: return retrieval.size();
        case TaskKind::sts: return sts.size();
    }
    return 0;
}

void TaskDataset::validate() const {
    if (size() == 0) throw ConfigError("dataset " + name + ": no records");
    if (!(weight > 0.0) || !std::isfinite(weight))
        throw ConfigError("dataset " + name + ": weight must be positive");
    if (kind == TaskKind::retrieval)
        for (const RetrievalExample& ex : retrieval)
            if (ex.negs.empty())
                throw ConfigError("dataset " + name + ": retrieval record without negatives");
    if (kind == TaskKind::sts)
        for (const StsExample& ex : sts)
            if (!(ex.score >= 0.0 && ex.score <= 1.0))
                throw ConfigError("dataset " + name + ": sts score outside [0,1] after rescale");
}

TaskDataset TaskDataset::load_pair_file(const std::string& path, const std::string& name,
                                        double weight) {
    TaskDataset ds;
    ds.kind = TaskKind::pair;
    ds.name = name;
    ds.weight = weight;
    for_each_jsonl(path, [&](const json& j) {
        ds.pairs.push_back({j.at("q").get<std::string>(), j.at("p").get<std::string>()});
    });
    ds.validate();
    return ds;
}

TaskDataset TaskDataset::load_retrieval_file(const std::string& path, const std::string& name,
                                             double weight) {
    TaskDataset ds;
    ds.kind = TaskKind::retrieval;
    ds.name = name;
    ds.weight = weight;
    for_each_jsonl(path, [&](const json& j) {
        RetrievalExample ex;
        ex.q = j.at("q").get<std::string>();
        ex.p = j.at("p").get<std::string>();
        for (const auto& n : j.at("negs")) ex.negs.push_back(n.get<std::string>());
        ds.retrieval.push_back(std::move(ex));
    });
    ds.validate();
    return ds;
}

TaskDataset TaskDataset::load_sts_file(const std::string& path, const std::string& name,
                                       double score_ceiling, double weight) {
    if (!(score_ceiling > 0.0))
        throw ConfigError("sts dataset " + name + ": score ceiling must be positive");
    TaskDataset ds;
    ds.kind = TaskKind::sts;
    ds.name = name;
    ds.weight = weight;
    for_each_jsonl(path, [&](const json& j) {
        StsExample ex;
        ex.q = j.at("q").get<std::string>();
        ex.p = j.at("p").get<std::string>();
        ex.score = j.at("score").get<double>() / score_ceiling;
        ds.sts.push_back(std::move(ex));
    });
    ds.validate();
    return ds;
}

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
    if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be >= 0");
    if (total_steps < 1) throw ConfigError("train: total_steps must be >= 1");
    if (warmup_steps > total_steps) throw ConfigError("train: warmup_steps exceeds total_steps");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(tau > 0.0)) throw ConfigError("train: tau must be positive");
    if (!(mask_rate > 0.0 && mask_rate < 1.0))
        throw ConfigError("train: mask_rate must be in (0,1)");
    if (precision != 32 && precision != 64) throw ConfigError("train: precision must be 32 or 64");
    if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be positive");
    if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be >= 0");
}

double lr_at(int step, const TrainConfig& cfg) {
    if (step < 1) throw ConfigError("lr_at: step is 1-based");
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
        return cfg.lr * double(step) / double(cfg.warmup_steps);
    int decay_span = cfg.total_steps - cfg.warmup_steps;
    if (decay_span <= 0) return cfg.lr;  // all-warmup schedule
    double frac = double(cfg.total_steps - step) / double(decay_span);
    return cfg.lr * std::max(0.0, frac);
}

void TrainLog::append(const StepLog& entry) {
    steps.push_back(entry);
    if (sink) {
        json j;
        j["step"] = entry.step;
        j["dataset"] = entry.dataset;
        j["kind"] = entry.kind;
        j["value"] = entry.value;
        (*sink) << j.dump() << "\n";
    }
}

MaskedText whole_word_mask(const TokenizedText& tok, double rate, std::size_t vocab_size,
                           const SpecialTokens& specials, Rng& rng) {
    if (rate < 0.0 || rate > 1.0) throw ConfigError("whole_word_mask: rate outside [0,1]");
    MaskedText out;
    out.input = tok.ids;
    out.labels.assign(tok.ids.size(), -1);
    std::size_t first_regular = 5;  // random replacements never produce specials
    if (vocab_size <= first_regular)
        throw ConfigError("whole_word_mask: vocab too small for replacement draws");
    for (const WordSpan& span : tok.word_spans) {
        if (!rng.bernoulli(rate)) continue;
        double mode = rng.uniform();
        for (std::size_t i = span.begin; i < span.end; ++i) {
            out.labels[i] = tok.ids[i];
            out.positions.push_back(i);
            if (mode < 0.8) {
                out.input[i] = specials.mask;
            } else if (mode < 0.9) {
                out.input[i] = static_cast<TokenId>(
                    first_regular + rng.uniform_index(vocab_size - first_regular));
            }  // else: label set, token left unchanged
        }
    }
    return out;
}

std::size_t sample_task_index(const std::vector<TaskDataset>& datasets, Rng& rng) {
    if (datasets.empty()) throw ConfigError("sample_task: no datasets");
    std::vector<double> weights;
    weights.reserve(datasets.size());
    for (const TaskDataset& ds : datasets) {
        if (!(ds.weight > 0.0)) throw ConfigError("sample_task: non-positive weight on " + ds.name);
        weights.push_back(ds.weight);
    }
    return rng.categorical(weights);
}

const TaskDataset& sample_task(const std::vector<TaskDataset>& datasets, Rng& rng) {
    return datasets[sample_task_index(datasets, rng)];
}

EpochSampler::EpochSampler(std::size_t n, Rng rng) : order_(n), rng_(rng) {
    if (n == 0) throw ConfigError("EpochSampler: empty dataset");
    std::iota(order_.begin(), order_.end(), std::size_t(0));
    reshuffle();
}

void EpochSampler::reshuffle() {
    rng_.shuffle(order_);
    pos_ = 0;
}

std::vector<std::size_t> EpochSampler::next_batch(std::size_t k) {
    if (k > order_.size()) throw ConfigError("EpochSampler: batch larger than dataset");
    if (pos_ + k > order_.size()) reshuffle();
    std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                   order_.begin() + static_cast<std::ptrdiff_t>(pos_ + k));
    pos_ += k;
    return batch;
}

}  // namespace biembed
