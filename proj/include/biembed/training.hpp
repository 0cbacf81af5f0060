#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "biembed/common.hpp"
#include "biembed/encoder.hpp"
#include "biembed/losses.hpp"
#include "biembed/rng.hpp"
#include "biembed/tensor.hpp"
#include "biembed/tokenizer.hpp"

// The three training stages: masked-language pretraining with strict A/B
// language alternation, in-batch-negative pair training, and multi-task
// fine-tuning where each step samples one dataset and backpropagates exactly
// that task's loss. Everything is bit-deterministic under a fixed seed.

namespace biembed {

enum class TaskKind { pair, retrieval, sts };

const char* task_kind_name(TaskKind kind);
TaskKind task_kind_from_name(const std::string& name);

struct PairExample {
    std::string q, p;
};

struct RetrievalExample {
    std::string q, p;
    std::vector<std::string> negs;  // hard negatives, at least one
};

struct StsExample {
    std::string q, p;
    double score = 0.0;  // in [0,1] after load-time rescale
};

struct TaskDataset {
    TaskKind kind = TaskKind::pair;
    std::string name;
    double weight = 1.0;
    std::vector<PairExample> pairs;
    std::vector<RetrievalExample> retrieval;
    std::vector<StsExample> sts;

    std::size_t size() const;
    void validate() const;

    // JSONL loaders; sts scores are divided by the dataset's documented
    // score ceiling once at load time (never per batch).
    static TaskDataset load_pair_file(const std::string& path, const std::string& name,
                                      double weight = 1.0);
    static TaskDataset load_retrieval_file(const std::string& path, const std::string& name,
                                           double weight = 1.0);
    static TaskDataset load_sts_file(const std::string& path, const std::string& name,
                                     double score_ceiling, double weight = 1.0);
};

struct TrainConfig {
    double lr = 1e-3;
    int warmup_steps = 100;
    int total_steps = 1000;
    int batch_size = 16;
    double tau = 0.05;
    double mask_rate = 0.30;
    std::uint64_t seed = 0;
    int precision = 64;  // 32 or 64; the CLI picks the scalar type from this
    double grad_clip = 1.0;
    bool sts_use_mse = false;  // ablation: squared-error STS loss instead of Pearson
    Sim sim = Sim::cosine;
    int checkpoint_every = 0;  // steps between checkpoints; 0 disables
    std::string checkpoint_dir;

    void validate() const;
};

// Linear warmup to `lr` over warmup_steps, then linear decay to zero at
// total_steps. `step` is 1-based and names the step being applied.
double lr_at(int step, const TrainConfig& cfg);

struct StepLog {
    int step = 0;
    std::string dataset;
    std::string kind;  // loss name, "skipped", or a validation metric name
    double value = 0.0;
};

struct TrainLog {
    std::vector<StepLog> steps;
    std::ostream* sink = nullptr;  // optional JSONL mirror
    void append(const StepLog& entry);
};

// --- whole-word masking ----------------------------------------------------

struct MaskedText {
    std::vector<TokenId> input;          // corrupted ids, same length as source
    std::vector<TokenId> labels;         // original id at corrupted positions, -1 elsewhere
    std::vector<std::size_t> positions;  // corrupted token positions, ascending
};

// Selects each word independently with probability `rate` and corrupts all
// of its tokens together: 80% MASK, 10% a random non-special token, 10%
// left unchanged. Labels cover every token of every selected word.
MaskedText whole_word_mask(const TokenizedText& tok, double rate, std::size_t vocab_size,
                           const SpecialTokens& specials, Rng& rng);

// --- optimizer -------------------------------------------------------------

// Global L2 norm over all populated parameter gradients.
template <typename S>
double global_grad_norm(const std::map<std::string, Tensor<S>>& params) {
    double total = 0.0;
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        for (S g : p.grad()) total += double(g) * double(g);
    }
    return std::sqrt(total);
}

// Rescales gradients so the global norm is at most max_norm; returns the
// pre-clip norm. The bound is re-checked after scaling.
template <typename S>
double clip_gradients(std::map<std::string, Tensor<S>>& params, double max_norm) {
    double norm = global_grad_norm(params);
    if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
    if (norm > max_norm) {
        S scale = static_cast<S>(max_norm / norm);
        for (auto& [name, p] : params) {
            if (!p.has_grad()) continue;
            for (S& g : p.mutable_grad()) g *= scale;
        }
    }
    double after = global_grad_norm(params);
    if (after > max_norm * (1.0 + 1e-6))
        throw NumericError("gradient clipping failed: norm " + std::to_string(after) +
                           " exceeds bound " + std::to_string(max_norm));
    return norm;
}

// Adaptive-moment optimizer with decoupled weight decay. Decay applies only
// to matrix-shaped parameters (weights and embeddings), never to vectors
// (biases, layer-norm gains). Parameters without a populated gradient are
// skipped for the step.
template <typename S>
class AdamW {
public:
    using Params = std::map<std::string, Tensor<S>>;

    explicit AdamW(Params& params, double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-8,
                   double weight_decay = 0.01)
        : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
        for (auto& [name, p] : params_) {
            m_[name].assign(p.numel(), S(0));
            v_[name].assign(p.numel(), S(0));
        }
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    void step(double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, double(t_));
        double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (auto& [name, p] : params_) {
            if (!p.has_grad()) continue;
            const std::vector<S>& g = p.grad();
            std::vector<S>& w = p.mutable_values();
            std::vector<S>& m = m_[name];
            std::vector<S>& v = v_[name];
            bool decay = p.ndim() >= 2;
            for (std::size_t i = 0; i < w.size(); ++i) {
                double gi = double(g[i]);
                double mi = beta1_ * double(m[i]) + (1.0 - beta1_) * gi;
                double vi = beta2_ * double(v[i]) + (1.0 - beta2_) * gi * gi;
                m[i] = static_cast<S>(mi);
                v[i] = static_cast<S>(vi);
                double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
                if (decay) update += weight_decay_ * double(w[i]);
                w[i] = static_cast<S>(double(w[i]) - lr * update);
            }
        }
    }

    std::int64_t steps_taken() const { return t_; }

private:
    Params& params_;
    double beta1_, beta2_, eps_, weight_decay_;
    std::int64_t t_ = 0;
    std::map<std::string, std::vector<S>> m_, v_;
};

// --- sampling and batching -------------------------------------------------

// Weighted draw of a dataset index; deterministic under a seeded rng.
std::size_t sample_task_index(const std::vector<TaskDataset>& datasets, Rng& rng);

const TaskDataset& sample_task(const std::vector<TaskDataset>& datasets, Rng& rng);

// Sequential epochs with per-epoch shuffling. next_batch(k) never splits a
// batch across an epoch boundary: if fewer than k indices remain, the epoch
// reshuffles early, so a batch never repeats an example.
class EpochSampler {
public:
    EpochSampler(std::size_t n, Rng rng);
    std::vector<std::size_t> next_batch(std::size_t k);

private:
    void reshuffle();
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
    Rng rng_;
};

// Mean cross-entropy of `logits` [seq, vocab] at positions whose label is
// non-negative.
template <typename S>
Tensor<S> masked_ce(const Tensor<S>& logits, const std::vector<TokenId>& labels) {
    std::vector<std::size_t> rows, cols;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0) continue;
        rows.push_back(i);
        cols.push_back(static_cast<std::size_t>(labels[i]));
    }
    if (rows.empty()) throw DegenerateError("masked_ce: no labeled positions");
    Tensor<S> lse = logsumexp_lastdim(logits);
    Tensor<S> picked_lse = take_rc(lse, rows, std::vector<std::size_t>(rows.size(), 0));
    Tensor<S> picked_logit = take_rc(logits, rows, cols);
    return mean_all(sub(picked_lse, picked_logit));
}

namespace detail {

// [CLS] body [SEP], with the body clipped to max_len - 2 tokens.
inline std::vector<TokenId> wrap_sequence(const std::vector<TokenId>& body,
                                          const SpecialTokens& sp, int max_len) {
    std::size_t budget = static_cast<std::size_t>(max_len) - 2;
    std::vector<TokenId> ids;
    ids.reserve(std::min(body.size(), budget) + 2);
    ids.push_back(sp.cls);
    ids.insert(ids.end(), body.begin(),
               body.begin() + static_cast<std::ptrdiff_t>(std::min(body.size(), budget)));
    ids.push_back(sp.sep);
    return ids;
}

// Clip a tokenized text to max_len - 2 tokens, dropping any word left
// incomplete by the cut so masking always covers whole words.
inline TokenizedText clip_tokens(const TokenizedText& tok, int max_len) {
    std::size_t budget = static_cast<std::size_t>(max_len) - 2;
    if (tok.ids.size() <= budget) return tok;
    TokenizedText out;
    for (const WordSpan& span : tok.word_spans) {
        if (span.end > budget) break;
        out.word_spans.push_back(span);
    }
    std::size_t keep = out.word_spans.empty() ? 0 : out.word_spans.back().end;
    out.ids.assign(tok.ids.begin(), tok.ids.begin() + static_cast<std::ptrdiff_t>(keep));
    return out;
}

template <typename S>
Tensor<S> embed_text(const EncoderModel<S>& model, const BpeModel& bpe, const std::string& text,
                     Rng* dropout_rng) {
    std::vector<TokenId> ids =
        wrap_sequence(bpe.encode(text).ids, bpe.specials(), model.config().trained_max_len);
    PadMask mask(ids.size(), 1);
    return dropout_rng ? model.embed_train(ids, mask, *dropout_rng) : model.embed(ids, mask);
}

}  // namespace detail

// --- stage I: masked-language pretraining ---------------------------------

struct Stage1Result {
    double first_loss = 0.0;
    double final_loss = 0.0;
    double val_accuracy_a = 0.0;  // held-out masked-token accuracy per language
    double val_accuracy_b = 0.0;
    int steps_run = 0;
};

// Pretrains on two monolingual corpora (one text per line) with a strict
// A,B,A,B batch schedule. Every 100th line is held out for validation and
// never trained on. Loss entries are logged as dataset "lang_a"/"lang_b",
// kind "mlm_ce"; final validation accuracy as kind "mlm_accuracy".
template <typename S>
Stage1Result stage1_pretrain(const std::string& corpus_a, const std::string& corpus_b,
                             const BpeModel& bpe, EncoderModel<S>& model, const TrainConfig& cfg,
                             TrainLog& log,
                             const std::function<void(int)>& after_step = nullptr);

// --- stage II: pair training ----------------------------------------------

struct StageResult {
    double first_loss = 0.0;
    double final_loss = 0.0;
    int steps_run = 0;
    int skipped = 0;
};

// Per step: sample a pair dataset by weight, draw an in-epoch batch, embed
// both sides, and minimize the bidirectional in-batch-negative loss.
template <typename S>
StageResult stage2_pair_train(const std::vector<TaskDataset>& datasets, const BpeModel& bpe,
                              EncoderModel<S>& model, const TrainConfig& cfg, TrainLog& log,
                              const std::function<void(int)>& after_step = nullptr);

// --- stage III: multi-task fine-tuning ------------------------------------

// Per step: sample one dataset, build a batch of its kind, and backpropagate
// exactly that task's loss (pair -> bidirectional in-batch negatives;
// retrieval -> triplet loss with hard negatives; sts -> negative-Pearson, or
// squared error under the ablation flag). Degenerate STS batches are skipped
// and logged, never fatal.
template <typename S>
StageResult stage3_multitask(const std::vector<TaskDataset>& datasets, const BpeModel& bpe,
                             EncoderModel<S>& model, const TrainConfig& cfg, TrainLog& log,
                             const std::function<void(int)>& after_step = nullptr);

// Evaluation-mode bidirectional pair loss on a fixed probe batch; used to
// watch training progress without touching the schedule.
template <typename S>
double pair_batch_loss(const std::vector<PairExample>& batch, const BpeModel& bpe,
                       const EncoderModel<S>& model, const TrainConfig& cfg) {
    std::vector<Tensor<S>> q_rows, p_rows;
    for (const PairExample& ex : batch) {
        q_rows.push_back(detail::embed_text(model, bpe, ex.q, nullptr));
        p_rows.push_back(detail::embed_text(model, bpe, ex.p, nullptr));
    }
    PairBatch<S> pb{stack_rows(q_rows), stack_rows(p_rows)};
    return double(bidirectional_info_nce(pb, static_cast<S>(cfg.tau), cfg.sim).item());
}

// ---------------------------------------------------------------------------
// implementation of the stage loops
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> corpus_lines(const std::string& corpus, const char* which) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < corpus.size()) {
        std::size_t nl = corpus.find('\n', start);
        std::size_t end = nl == std::string::npos ? corpus.size() : nl;
        if (end > start) lines.push_back(corpus.substr(start, end - start));
        if (nl == std::string::npos) break;
        start = nl + 1;
    }
    if (lines.empty()) throw IoError(std::string("stage1: empty corpus ") + which);
    return lines;
}

template <typename S>
void checkpoint_maybe(const EncoderModel<S>& model, const TrainConfig& cfg, int step) {
    if (cfg.checkpoint_every <= 0 || step % cfg.checkpoint_every != 0) return;
    if (cfg.checkpoint_dir.empty()) return;
    char name[32];
    std::snprintf(name, sizeof(name), "step_%06d.ckpt", step);
    model.save_file(cfg.checkpoint_dir + "/" + name);
}

}  // namespace detail

template <typename S>
Stage1Result stage1_pretrain(const std::string& corpus_a, const std::string& corpus_b,
                             const BpeModel& bpe, EncoderModel<S>& model, const TrainConfig& cfg,
                             TrainLog& log, const std::function<void(int)>& after_step) {
    cfg.validate();
    const SpecialTokens& sp = bpe.specials();
    int max_len = model.config().trained_max_len;

    // tokenize once; every 100th line is validation-only
    struct LangData {
        std::vector<TokenizedText> train, val;
        const char* name;
    };
    LangData langs[2] = {{{}, {}, "lang_a"}, {{}, {}, "lang_b"}};
    for (int l = 0; l < 2; ++l) {
        std::vector<std::string> lines =
            detail::corpus_lines(l == 0 ? corpus_a : corpus_b, langs[l].name);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            TokenizedText tok = detail::clip_tokens(bpe.encode(lines[i]), max_len);
            if (tok.ids.empty()) continue;
            (i % 100 == 0 ? langs[l].val : langs[l].train).push_back(std::move(tok));
        }
        if (langs[l].train.empty())
            throw ConfigError(std::string("stage1: no training lines for ") + langs[l].name);
    }

    Rng master(cfg.seed);
    Rng mask_rng = master.fork(1);
    Rng dropout_rng = master.fork(2);
    EpochSampler samplers[2] = {
        EpochSampler(langs[0].train.size(), master.fork(3)),
        EpochSampler(langs[1].train.size(), master.fork(4)),
    };

    AdamW<S> opt(model.parameters());
    Stage1Result res;
    bool have_first = false;

    for (int step = 1; step <= cfg.total_steps; ++step) {
        int l = (step - 1) % 2;  // strict A,B,A,B schedule
        LangData& lang = langs[l];
        std::size_t k =
            std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), lang.train.size());

        std::vector<std::size_t> rows, cols;  // (flattened later per row)
        Tensor<S> total = Tensor<S>::scalar(S(0));
        std::size_t labeled = 0;
        for (std::size_t idx : samplers[l].next_batch(k)) {
            const TokenizedText& tok = lang.train[idx];
            MaskedText masked = whole_word_mask(tok, cfg.mask_rate, bpe.vocab_size(), sp, mask_rng);
            if (masked.positions.empty()) continue;
            std::vector<TokenId> ids = detail::wrap_sequence(masked.input, sp, max_len);
            std::vector<TokenId> labels(ids.size(), -1);
            for (std::size_t i = 0; i < masked.labels.size(); ++i)
                labels[i + 1] = masked.labels[i];  // +1 for the leading CLS
            PadMask mask(ids.size(), 1);
            Tensor<S> logits = model.forward_mlm_train(ids, mask, dropout_rng);
            rows.clear();
            cols.clear();
            for (std::size_t i = 0; i < labels.size(); ++i) {
                if (labels[i] < 0) continue;
                rows.push_back(i);
                cols.push_back(static_cast<std::size_t>(labels[i]));
            }
            Tensor<S> lse = logsumexp_lastdim(logits);
            Tensor<S> term = sum_all(sub(take_rc(lse, rows, std::vector<std::size_t>(rows.size(), 0)),
                                         take_rc(logits, rows, cols)));
            total = add(total, term);
            labeled += rows.size();
        }
        if (labeled == 0) {
            log.append({step, lang.name, "skipped", 0.0});
            continue;
        }
        Tensor<S> loss = mul_scalar(total, static_cast<S>(1.0 / double(labeled)));
        double loss_v = double(loss.item());
        if (!std::isfinite(loss_v))
            throw NumericError("stage1 step " + std::to_string(step) + ": non-finite loss");

        opt.zero_grad();
        backward(loss);
        clip_gradients(model.parameters(), cfg.grad_clip);
        opt.step(lr_at(step, cfg));

        log.append({step, lang.name, "mlm_ce", loss_v});
        if (!have_first) {
            res.first_loss = loss_v;
            have_first = true;
        }
        res.final_loss = loss_v;
        ++res.steps_run;
        detail::checkpoint_maybe(model, cfg, step);
        if (after_step) after_step(step);
    }

    // held-out masked-token accuracy, inference mode, fixed masking stream
    for (int l = 0; l < 2; ++l) {
        Rng val_rng(Rng::mix(cfg.seed ^ 0x76616cULL));  // independent of the training stream
        std::size_t correct = 0, total_pred = 0;
        for (const TokenizedText& tok : langs[l].val) {
            MaskedText masked = whole_word_mask(tok, cfg.mask_rate, bpe.vocab_size(), sp, val_rng);
            if (masked.positions.empty()) continue;
            std::vector<TokenId> ids = detail::wrap_sequence(masked.input, sp, max_len);
            PadMask mask(ids.size(), 1);
            Tensor<S> logits = model.forward_mlm(ids, mask);
            std::size_t vocab = logits.dim(1);
            const std::vector<S>& lv = logits.values();
            for (std::size_t pos : masked.positions) {
                std::size_t row = pos + 1;  // CLS offset
                if (row + 1 >= ids.size()) continue;  // clipped by wrap_sequence
                const S* base = lv.data() + row * vocab;
                std::size_t best = 0;
                for (std::size_t jj = 1; jj < vocab; ++jj)
                    if (base[jj] > base[best]) best = jj;
                if (static_cast<TokenId>(best) == tok.ids[pos]) ++correct;
                ++total_pred;
            }
        }
        double acc = total_pred == 0 ? 0.0 : double(correct) / double(total_pred);
        (l == 0 ? res.val_accuracy_a : res.val_accuracy_b) = acc;
        log.append({cfg.total_steps, l == 0 ? "val_a" : "val_b", "mlm_accuracy", acc});
    }
    return res;
}

namespace detail {

// Shared per-step state for stages II and III.
template <typename S>
struct MultitaskLoop {
    const std::vector<TaskDataset>& datasets;
    const BpeModel& bpe;
    EncoderModel<S>& model;
    const TrainConfig& cfg;
    TrainLog& log;
    Rng task_rng, dropout_rng;
    std::vector<EpochSampler> samplers;
    AdamW<S> opt;
    StageResult res;
    bool have_first = false;

    MultitaskLoop(const std::vector<TaskDataset>& ds, const BpeModel& b, EncoderModel<S>& m,
                  const TrainConfig& c, TrainLog& lg)
        : datasets(ds), bpe(b), model(m), cfg(c), log(lg), task_rng(0), dropout_rng(0),
          opt(m.parameters()) {
        c.validate();
        if (ds.empty()) throw ConfigError("training: no datasets");
        for (const TaskDataset& d : ds) d.validate();
        Rng master(c.seed);
        task_rng = master.fork(1);
        dropout_rng = master.fork(2);
        for (std::size_t i = 0; i < ds.size(); ++i)
            samplers.emplace_back(ds[i].size(), master.fork(10 + i));
    }

    Tensor<S> embed_rows(const std::vector<const std::string*>& texts) {
        std::vector<Tensor<S>> rows;
        rows.reserve(texts.size());
        for (const std::string* t : texts)
            rows.push_back(embed_text(model, bpe, *t, &dropout_rng));
        Tensor<S> out = stack_rows(rows);
        // A NaN/Inf embedding here means the model diverged; surface it as a
        // numerical abort instead of letting the batch validators call it a
        // degenerate input (that path is reserved for zero-variance skips).
        for (S v : out.values())
            if (!std::isfinite(double(v)))
                throw NumericError("training: non-finite embedding, model diverged");
        return out;
    }

    // Evaluates one sampled dataset at `step`; returns the loss kind logged.
    void run_step(int step) {
        std::size_t di = sample_task_index(datasets, task_rng);
        const TaskDataset& ds = datasets[di];
        std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), ds.size());
        if (k < 2) {
            // in-batch and cross-batch statistics both need at least 2 rows
            log.append({step, ds.name, "skipped", 0.0});
            ++res.skipped;
            return;
        }
        std::vector<std::size_t> batch = samplers[di].next_batch(k);

        Tensor<S> loss;
        const char* kind = "";
        S tau = static_cast<S>(cfg.tau);
        if (ds.kind == TaskKind::pair) {
            std::vector<const std::string*> qs, ps;
            for (std::size_t i : batch) {
                qs.push_back(&ds.pairs[i].q);
                ps.push_back(&ds.pairs[i].p);
            }
            PairBatch<S> pb{embed_rows(qs), embed_rows(ps)};
            loss = bidirectional_info_nce(pb, tau, cfg.sim);
            kind = "bidirectional_info_nce";
        } else if (ds.kind == TaskKind::retrieval) {
            std::size_t m = SIZE_MAX;
            for (std::size_t i : batch) m = std::min(m, ds.retrieval[i].negs.size());
            std::vector<const std::string*> qs, ps, ns;
            for (std::size_t i : batch) {
                qs.push_back(&ds.retrieval[i].q);
                ps.push_back(&ds.retrieval[i].p);
                for (std::size_t j = 0; j < m; ++j) ns.push_back(&ds.retrieval[i].negs[j]);
            }
            TripletBatch<S> tb{embed_rows(qs), embed_rows(ps),
                               reshape(embed_rows(ns),
                                       {k, m, static_cast<std::size_t>(
                                                  model.config().hidden_dim)})};
            loss = triplet_info_nce(tb, tau, cfg.sim);
            kind = "triplet_info_nce";
        } else {
            std::vector<const std::string*> qs, ps;
            std::vector<S> scores;
            for (std::size_t i : batch) {
                qs.push_back(&ds.sts[i].q);
                ps.push_back(&ds.sts[i].p);
                scores.push_back(static_cast<S>(ds.sts[i].score));
            }
            StsBatch<S> sb{embed_rows(qs), embed_rows(ps), Tensor<S>::from({k}, std::move(scores))};
            if (cfg.sts_use_mse) {
                loss = mse_sts_loss(sb, cfg.sim);
                kind = "mse_sts";
            } else {
                try {
                    loss = pearson_sts_loss(sb, cfg.sim);
                } catch (const DegenerateError&) {
                    log.append({step, ds.name, "skipped_degenerate", 0.0});
                    ++res.skipped;
                    return;
                }
                kind = "pearson_sts";
            }
        }

        double loss_v = double(loss.item());
        if (!std::isfinite(loss_v))
            throw NumericError("step " + std::to_string(step) + ": non-finite loss on dataset " +
                               ds.name);
        opt.zero_grad();
        backward(loss);
        clip_gradients(model.parameters(), cfg.grad_clip);
        opt.step(lr_at(step, cfg));

        log.append({step, ds.name, kind, loss_v});
        if (!have_first) {
            res.first_loss = loss_v;
            have_first = true;
        }
        res.final_loss = loss_v;
        ++res.steps_run;
        checkpoint_maybe(model, cfg, step);
    }
};

}  // namespace detail

template <typename S>
StageResult stage2_pair_train(const std::vector<TaskDataset>& datasets, const BpeModel& bpe,
                              EncoderModel<S>& model, const TrainConfig& cfg, TrainLog& log,
                              const std::function<void(int)>& after_step) {
    for (const TaskDataset& ds : datasets)
        if (ds.kind != TaskKind::pair)
            throw ConfigError("stage2: dataset " + ds.name + " is not pair-kind");
    detail::MultitaskLoop<S> loop(datasets, bpe, model, cfg, log);
    for (int step = 1; step <= cfg.total_steps; ++step) {
        loop.run_step(step);
        if (after_step) after_step(step);
    }
    return loop.res;
}

template <typename S>
StageResult stage3_multitask(const std::vector<TaskDataset>& datasets, const BpeModel& bpe,
                             EncoderModel<S>& model, const TrainConfig& cfg, TrainLog& log,
                             const std::function<void(int)>& after_step) {
    detail::MultitaskLoop<S> loop(datasets, bpe, model, cfg, log);
    for (int step = 1; step <= cfg.total_steps; ++step) {
        loop.run_step(step);
        if (after_step) after_step(step);
    }
    return loop.res;
}

}  // namespace biembed
