#include "biembed/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "biembed/eval.hpp"
#include "biembed/losses.hpp"
#include "biembed/rng.hpp"
#include "biembed/tokenizer.hpp"

namespace biembed {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string join_path(const std::string& base, const std::string& key) {
    return base.empty() ? key : base + "." + key;
}

// One JSON object under strict parsing: typed reads that keep the default
// when the key is absent, dotted-path diagnostics, and unknown-key rejection
// once every known key has been claimed.
class Section {
  public:
    Section(const json* j, std::string path) : j_(j), path_(std::move(path)) {
        if (j_ && !j_->is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <class T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        if (!j_ || !j_->contains(key)) return;
        try {
            out = j_->at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError(join_path(path_, key) + ": wrong type (found " +
                              std::string(j_->at(key).type_name()) + ")");
        }
    }

    void read_sim(const char* key, Sim& out) {
        std::string name = sim_name(out);
        read(key, name);
        try {
            out = sim_from_name(name);
        } catch (const ConfigError& e) {
            throw ConfigError(join_path(path_, key) + ": " + e.what());
        }
    }

    // Claims a nested value (object or array); nullptr when absent.
    const json* child(const char* key) {
        seen_.insert(key);
        if (!j_ || !j_->contains(key)) return nullptr;
        return &j_->at(key);
    }

    const std::string& path() const { return path_; }

    void finish() const {
        if (!j_) return;
        for (auto it = j_->begin(); it != j_->end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError(join_path(path_, it.key()) + ": unknown key");
    }

  private:
    const json* j_;
    std::string path_;
    std::set<std::string> seen_;
};

void parse_train_fields(Section& s, TrainConfig& tc) {
    s.read("lr", tc.lr);
    s.read("warmup_steps", tc.warmup_steps);
    s.read("total_steps", tc.total_steps);
    s.read("batch_size", tc.batch_size);
    s.read("tau", tc.tau);
    s.read("mask_rate", tc.mask_rate);
    s.read("seed", tc.seed);
    s.read("precision", tc.precision);
    s.read("grad_clip", tc.grad_clip);
    s.read("sts_use_mse", tc.sts_use_mse);
    s.read_sim("sim", tc.sim);
    s.read("checkpoint_every", tc.checkpoint_every);
    s.read("checkpoint_dir", tc.checkpoint_dir);
}

json train_fields_json(const TrainConfig& tc) {
    return {{"lr", tc.lr},
            {"warmup_steps", tc.warmup_steps},
            {"total_steps", tc.total_steps},
            {"batch_size", tc.batch_size},
            {"tau", tc.tau},
            {"mask_rate", tc.mask_rate},
            {"seed", tc.seed},
            {"precision", tc.precision},
            {"grad_clip", tc.grad_clip},
            {"sts_use_mse", tc.sts_use_mse},
            {"sim", sim_name(tc.sim)},
            {"checkpoint_every", tc.checkpoint_every},
            {"checkpoint_dir", tc.checkpoint_dir}};
}

std::vector<DatasetSpec> parse_datasets(const json& arr, const std::string& path) {
    if (!arr.is_array()) throw ConfigError(path + ": expected an array");
    std::vector<DatasetSpec> out;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        Section s(&arr[i], path + "." + std::to_string(i));
        DatasetSpec d;
        s.read("name", d.name);
        s.read("kind", d.kind);
        s.read("path", d.path);
        s.read("weight", d.weight);
        s.read("score_ceiling", d.score_ceiling);
        s.finish();
        out.push_back(std::move(d));
    }
    return out;
}

json datasets_json(const std::vector<DatasetSpec>& specs) {
    json arr = json::array();
    for (const DatasetSpec& d : specs)
        arr.push_back({{"name", d.name},
                       {"kind", d.kind},
                       {"path", d.path},
                       {"weight", d.weight},
                       {"score_ceiling", d.score_ceiling}});
    return arr;
}

void parse_stage(const json* j, const std::string& path, StageSection& st, bool is_stage1) {
    Section s(j, path);
    parse_train_fields(s, st.train);
    if (is_stage1) {
        s.read("corpus_a", st.corpus_a);
        s.read("corpus_b", st.corpus_b);
    } else {
        s.read("init_checkpoint", st.init_checkpoint);
        if (const json* d = s.child("datasets"))
            st.datasets = parse_datasets(*d, path + ".datasets");
    }
    s.finish();
}

json stage_json(const StageSection& st, bool is_stage1) {
    json j = train_fields_json(st.train);
    if (is_stage1) {
        j["corpus_a"] = st.corpus_a;
        j["corpus_b"] = st.corpus_b;
    } else {
        j["init_checkpoint"] = st.init_checkpoint;
        j["datasets"] = datasets_json(st.datasets);
    }
    return j;
}

std::vector<EvalTaskSpec> parse_eval_tasks(const json& arr, const std::string& path) {
    if (!arr.is_array()) throw ConfigError(path + ": expected an array");
    std::vector<EvalTaskSpec> out;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        Section s(&arr[i], path + "." + std::to_string(i));
        EvalTaskSpec t;
        s.read("name", t.name);
        s.read("kind", t.kind);
        s.read("corpus", t.corpus);
        s.read("queries", t.queries);
        s.read("qrels", t.qrels);
        s.read("path", t.path);
        s.read("k", t.k);
        s.finish();
        out.push_back(std::move(t));
    }
    return out;
}

json eval_tasks_json(const std::vector<EvalTaskSpec>& tasks) {
    json arr = json::array();
    for (const EvalTaskSpec& t : tasks)
        arr.push_back({{"name", t.name},
                       {"kind", t.kind},
                       {"corpus", t.corpus},
                       {"queries", t.queries},
                       {"qrels", t.qrels},
                       {"path", t.path},
                       {"k", t.k}});
    return arr;
}

}  // namespace

json PipelineConfig::to_json() const {
    json j;
    j["tokenizer"] = {{"corpus_a", tokenizer.corpus_a},
                      {"corpus_b", tokenizer.corpus_b},
                      {"vocab_size", tokenizer.vocab_size},
                      {"file", tokenizer.file}};
    j["model"] = model.to_json();
    j["stage1"] = stage_json(stage1, true);
    j["stage2"] = stage_json(stage2, false);
    j["stage3"] = stage_json(stage3, false);
    j["curation"] = {{"min_chars", curation.filter.min_chars},
                     {"max_chars", curation.filter.max_chars},
                     {"max_dup_line_frac", curation.filter.max_dup_line_frac},
                     {"max_dup_ngram_frac", curation.filter.max_dup_ngram_frac},
                     {"ngram_n", curation.filter.ngram_n},
                     {"dedup_jaccard_threshold", curation.filter.dedup_jaccard_threshold},
                     {"minhash_permutations", curation.filter.minhash_permutations},
                     {"lsh_bands", curation.filter.lsh_bands},
                     {"consistency_top_k", curation.filter.consistency_top_k},
                     {"consistency_sample_size", curation.filter.consistency_sample_size},
                     {"seed", curation.filter.seed},
                     {"input", curation.input},
                     {"use_consistency", curation.use_consistency},
                     {"checkpoint", curation.checkpoint}};
    j["eval"] = {{"checkpoint", eval.checkpoint}, {"tasks", eval_tasks_json(eval.tasks)}};
    j["synth"] = {{"seed", synth.seed},
                  {"word_types", synth.word_types},
                  {"topics", synth.topics},
                  {"words_per_topic", synth.words_per_topic},
                  {"successors", synth.successors},
                  {"corpus_lines", synth.corpus_lines},
                  {"words_per_line", synth.words_per_line},
                  {"pair_train", synth.pair_train},
                  {"pair_holdout", synth.pair_holdout},
                  {"retrieval_train", synth.retrieval_train},
                  {"negatives", synth.negatives},
                  {"sts_train", synth.sts_train},
                  {"sts_holdout", synth.sts_holdout}};
    return j;
}

PipelineConfig PipelineConfig::from_json(const json& doc) {
    if (!doc.is_object()) throw ConfigError("config: expected a JSON object at the top level");
    PipelineConfig cfg;
    Section root(&doc, "");
    {
        Section s(root.child("tokenizer"), "tokenizer");
        s.read("corpus_a", cfg.tokenizer.corpus_a);
        s.read("corpus_b", cfg.tokenizer.corpus_b);
        s.read("vocab_size", cfg.tokenizer.vocab_size);
        s.read("file", cfg.tokenizer.file);
        s.finish();
    }
    {
        Section s(root.child("model"), "model");
        s.read("layers", cfg.model.layers);
        s.read("hidden_dim", cfg.model.hidden_dim);
        s.read("heads", cfg.model.heads);
        s.read("ffn_dim", cfg.model.ffn_dim);
        s.read("vocab_size", cfg.model.vocab_size);
        s.read("trained_max_len", cfg.model.trained_max_len);
        s.read("qk_norm", cfg.model.qk_norm);
        s.read("dropout_rate", cfg.model.dropout_rate);
        s.read("layer_norm_eps", cfg.model.layer_norm_eps);
        s.finish();
    }
    parse_stage(root.child("stage1"), "stage1", cfg.stage1, true);
    parse_stage(root.child("stage2"), "stage2", cfg.stage2, false);
    parse_stage(root.child("stage3"), "stage3", cfg.stage3, false);
    {
        Section s(root.child("curation"), "curation");
        s.read("min_chars", cfg.curation.filter.min_chars);
        s.read("max_chars", cfg.curation.filter.max_chars);
        s.read("max_dup_line_frac", cfg.curation.filter.max_dup_line_frac);
        s.read("max_dup_ngram_frac", cfg.curation.filter.max_dup_ngram_frac);
        s.read("ngram_n", cfg.curation.filter.ngram_n);
        s.read("dedup_jaccard_threshold", cfg.curation.filter.dedup_jaccard_threshold);
        s.read("minhash_permutations", cfg.curation.filter.minhash_permutations);
        s.read("lsh_bands", cfg.curation.filter.lsh_bands);
        s.read("consistency_top_k", cfg.curation.filter.consistency_top_k);
        s.read("consistency_sample_size", cfg.curation.filter.consistency_sample_size);
        s.read("seed", cfg.curation.filter.seed);
        s.read("input", cfg.curation.input);
        s.read("use_consistency", cfg.curation.use_consistency);
        s.read("checkpoint", cfg.curation.checkpoint);
        s.finish();
    }
    {
        Section s(root.child("eval"), "eval");
        s.read("checkpoint", cfg.eval.checkpoint);
        if (const json* t = s.child("tasks")) cfg.eval.tasks = parse_eval_tasks(*t, "eval.tasks");
        s.finish();
    }
    {
        Section s(root.child("synth"), "synth");
        s.read("seed", cfg.synth.seed);
        s.read("word_types", cfg.synth.word_types);
        s.read("topics", cfg.synth.topics);
        s.read("words_per_topic", cfg.synth.words_per_topic);
        s.read("successors", cfg.synth.successors);
        s.read("corpus_lines", cfg.synth.corpus_lines);
        s.read("words_per_line", cfg.synth.words_per_line);
        s.read("pair_train", cfg.synth.pair_train);
        s.read("pair_holdout", cfg.synth.pair_holdout);
        s.read("retrieval_train", cfg.synth.retrieval_train);
        s.read("negatives", cfg.synth.negatives);
        s.read("sts_train", cfg.synth.sts_train);
        s.read("sts_holdout", cfg.synth.sts_holdout);
        s.finish();
    }
    root.finish();
    cfg.validate();
    return cfg;
}

namespace {

void validate_datasets(const std::vector<DatasetSpec>& specs, const std::string& path) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const DatasetSpec& d = specs[i];
        const std::string at = path + "." + std::to_string(i);
        if (d.name.empty()) throw ConfigError(at + ".name: must not be empty");
        if (d.kind != "pair" && d.kind != "retrieval" && d.kind != "sts")
            throw ConfigError(at + ".kind: '" + d.kind + "' is not pair|retrieval|sts");
        if (d.path.empty()) throw ConfigError(at + ".path: must not be empty");
        if (!(d.weight > 0.0) || !std::isfinite(d.weight))
            throw ConfigError(at + ".weight: must be positive and finite");
        if (!(d.score_ceiling > 0.0) || !std::isfinite(d.score_ceiling))
            throw ConfigError(at + ".score_ceiling: must be positive and finite");
    }
}

}  // namespace

void PipelineConfig::validate() const {
    if (tokenizer.vocab_size < 262)
        throw ConfigError(
            "tokenizer.vocab_size: must be at least 262 (the byte alphabet plus specials "
            "leaves no room for merges below that)");
    try {
        model.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    const char* names[] = {"stage1", "stage2", "stage3"};
    const StageSection* stages[] = {&stage1, &stage2, &stage3};
    for (int i = 0; i < 3; ++i) {
        try {
            stages[i]->train.validate();
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(names[i]) + ": " + e.what());
        }
    }
    validate_datasets(stage2.datasets, "stage2.datasets");
    for (std::size_t i = 0; i < stage2.datasets.size(); ++i)
        if (stage2.datasets[i].kind != "pair")
            throw ConfigError("stage2.datasets." + std::to_string(i) +
                              ".kind: stage2 accepts only pair datasets");
    validate_datasets(stage3.datasets, "stage3.datasets");
    try {
        curation.filter.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("curation: ") + e.what());
    }
    if (curation.use_consistency && curation.checkpoint.empty())
        throw ConfigError("curation.checkpoint: required when curation.use_consistency is set");
    for (std::size_t i = 0; i < eval.tasks.size(); ++i) {
        const EvalTaskSpec& t = eval.tasks[i];
        const std::string at = "eval.tasks." + std::to_string(i);
        if (t.name.empty()) throw ConfigError(at + ".name: must not be empty");
        if (t.kind == "retrieval") {
            if (t.corpus.empty() || t.queries.empty() || t.qrels.empty())
                throw ConfigError(at + ": retrieval tasks need corpus, queries and qrels paths");
            if (t.k < 1) throw ConfigError(at + ".k: must be at least 1");
        } else if (t.kind == "sts") {
            if (t.path.empty()) throw ConfigError(at + ".path: must not be empty");
        } else {
            throw ConfigError(at + ".kind: '" + t.kind + "' is not retrieval|sts");
        }
    }
    try {
        synth.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("synth: ") + e.what());
    }
}

void PipelineConfig::require_for(const std::string& subcommand) const {
    auto need = [&](const std::string& value, const char* field, const char* what) {
        if (value.empty())
            throw ConfigError(subcommand + " needs " + std::string(field) + " (" + what + ")");
    };
    if (subcommand == "tokenizer-train") {
        need(tokenizer.corpus_a, "tokenizer.corpus_a", "language-A training text");
        need(tokenizer.corpus_b, "tokenizer.corpus_b", "language-B training text");
    } else if (subcommand == "curate") {
        need(curation.input, "curation.input", "raw pair JSONL to filter");
        if (curation.use_consistency) {
            need(curation.checkpoint, "curation.checkpoint", "encoder for the consistency stage");
            need(tokenizer.file, "tokenizer.file", "trained tokenizer model");
        }
    } else if (subcommand == "pretrain") {
        need(tokenizer.file, "tokenizer.file", "trained tokenizer model");
        need(stage1.corpus_a, "stage1.corpus_a", "language-A training text");
        need(stage1.corpus_b, "stage1.corpus_b", "language-B training text");
    } else if (subcommand == "train-pairs") {
        need(tokenizer.file, "tokenizer.file", "trained tokenizer model");
        if (stage2.datasets.empty())
            throw ConfigError("train-pairs needs stage2.datasets (at least one pair dataset)");
    } else if (subcommand == "train-multitask") {
        need(tokenizer.file, "tokenizer.file", "trained tokenizer model");
        if (stage3.datasets.empty())
            throw ConfigError("train-multitask needs stage3.datasets (at least one dataset)");
    } else if (subcommand == "eval") {
        need(tokenizer.file, "tokenizer.file", "trained tokenizer model");
        need(eval.checkpoint, "eval.checkpoint", "encoder checkpoint to evaluate");
        if (eval.tasks.empty()) throw ConfigError("eval needs eval.tasks (at least one task)");
    } else if (subcommand != "synth-data") {
        throw ConfigError("unknown subcommand '" + subcommand + "'");
    }
}

PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config file " + path);
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
    return PipelineConfig::from_json(doc);
}

void apply_override(json& doc, const std::string& spec) {
    const std::size_t eq = spec.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override '" + spec + "': expected dotted.path=value");
    const std::string path = spec.substr(0, eq);
    const std::string raw = spec.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;  // unquoted strings are taken verbatim
    }

    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        std::size_t dot = path.find('.', start);
        parts.push_back(path.substr(start, dot - start));
        if (parts.back().empty())
            throw ConfigError("override '" + spec + "': empty path component");
        if (dot == std::string::npos) break;
        start = dot + 1;
    }

    json* node = &doc;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const std::string& part = parts[i];
        const bool last = i + 1 == parts.size();
        if (node->is_array()) {
            if (part.find_first_not_of("0123456789") != std::string::npos)
                throw ConfigError("override '" + spec + "': '" + part +
                                  "' is not an array index");
            std::size_t idx = std::stoul(part);
            if (idx >= node->size())
                throw ConfigError("override '" + spec + "': index " + part +
                                  " out of range (array has " + std::to_string(node->size()) +
                                  " entries)");
            node = &(*node)[idx];
        } else if (node->is_object() || node->is_null()) {
            node = &(*node)[part];  // creates missing objects along the way
        } else {
            throw ConfigError("override '" + spec + "': '" + parts[i - 1] +
                              "' is not an object or array");
        }
        if (last) *node = value;
    }
}

void prepare_run_dir(const std::string& dir, bool force) {
    fs::path p(dir);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create run dir " + dir + ": " + ec.message());
    if (fs::exists(p / "config.json") && !force)
        throw IoError("run dir " + dir +
                      " already holds a run (config.json present); pass --force to redo it");
}

namespace {

// --- shared command plumbing ----------------------------------------------

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("write failed for " + path.string());
}

std::string slurp_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

struct RunContext {
    PipelineConfig cfg;
    fs::path run;
};

RunContext start_run(const std::string& config_path, const std::vector<std::string>& overrides,
                     const std::string& run_dir, bool force, const std::string& subcommand) {
    json doc = json::object();
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) throw IoError("cannot read config file " + config_path);
        try {
            doc = json::parse(f);
        } catch (const json::exception& e) {
            throw ConfigError("config file " + config_path + ": " + e.what());
        }
    }
    for (const std::string& s : overrides) apply_override(doc, s);
    PipelineConfig cfg = PipelineConfig::from_json(doc);  // validates
    cfg.require_for(subcommand);
    prepare_run_dir(run_dir, force);
    write_text(fs::path(run_dir) / "config.json", cfg.to_json().dump(2) + "\n");
    return {std::move(cfg), fs::path(run_dir)};
}

// Scalar width recorded in a checkpoint's manifest (4 or 8), so commands
// that only read a model can dispatch without being told the precision.
int checkpoint_width(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint " + path);
    std::string line;
    if (!std::getline(f, line) || line != "BIEMBED-CKPT 1")
        throw IoError("checkpoint " + path + ": bad magic line");
    if (!std::getline(f, line)) throw IoError("checkpoint " + path + ": truncated");
    if (!std::getline(f, line) || line.rfind("params ", 0) != 0)
        throw IoError("checkpoint " + path + ": missing params line");
    if (!std::getline(f, line)) throw IoError("checkpoint " + path + ": truncated manifest");
    std::istringstream ls(line);
    std::string name;
    std::size_t width = 0;
    ls >> name >> width;
    if (!ls || (width != 4 && width != 8))
        throw IoError("checkpoint " + path + ": malformed manifest entry");
    return static_cast<int>(width);
}

template <class S>
EmbedFn embed_fn_for(std::shared_ptr<BpeModel> bpe, std::shared_ptr<EncoderModel<S>> model) {
    return [bpe = std::move(bpe), model = std::move(model)](const std::string& text) {
        auto v = detail::embed_text(*model, *bpe, text, nullptr).values();
        return std::vector<double>(v.begin(), v.end());
    };
}

EmbedFn make_embed_fn(const std::string& tokenizer_file, const std::string& checkpoint) {
    auto bpe = std::make_shared<BpeModel>(BpeModel::load_file(tokenizer_file));
    if (checkpoint_width(checkpoint) == 4)
        return embed_fn_for(bpe, std::make_shared<EncoderModel<float>>(
                                     EncoderModel<float>::load_file(checkpoint)));
    return embed_fn_for(
        bpe, std::make_shared<EncoderModel<double>>(EncoderModel<double>::load_file(checkpoint)));
}

template <class Fn>
void with_scalar(int precision, Fn&& fn) {
    if (precision == 32)
        fn(std::type_identity<float>{});
    else
        fn(std::type_identity<double>{});
}

void check_vocab_fits(const BpeModel& bpe, const EncoderConfig& model) {
    if (static_cast<int>(bpe.vocab_size()) > model.vocab_size)
        throw ConfigError("model.vocab_size " + std::to_string(model.vocab_size) +
                          " is smaller than the tokenizer vocabulary " +
                          std::to_string(bpe.vocab_size()));
}

// checkpoint_dir defaults to the run directory when periodic checkpoints
// are requested without one.
TrainConfig resolve_train(const TrainConfig& in, const fs::path& run) {
    TrainConfig tc = in;
    if (tc.checkpoint_every > 0 && tc.checkpoint_dir.empty()) tc.checkpoint_dir = run.string();
    return tc;
}

constexpr std::uint64_t kModelInitSalt = 0x6d6f64656cULL;  // distinct from the step streams

template <class S>
EncoderModel<S> initial_model(const PipelineConfig& cfg, const StageSection& st) {
    if (!st.init_checkpoint.empty()) return EncoderModel<S>::load_file(st.init_checkpoint);
    Rng init(Rng::mix(st.train.seed ^ kModelInitSalt));
    return EncoderModel<S>(cfg.model, init);
}

std::vector<TaskDataset> load_datasets(const std::vector<DatasetSpec>& specs) {
    std::vector<TaskDataset> out;
    for (const DatasetSpec& d : specs) {
        if (d.kind == "pair")
            out.push_back(TaskDataset::load_pair_file(d.path, d.name, d.weight));
        else if (d.kind == "retrieval")
            out.push_back(TaskDataset::load_retrieval_file(d.path, d.name, d.weight));
        else
            out.push_back(TaskDataset::load_sts_file(d.path, d.name, d.score_ceiling, d.weight));
    }
    return out;
}

std::ofstream open_metrics(const fs::path& run) {
    std::ofstream f(run / "metrics.jsonl", std::ios::binary);
    if (!f) throw IoError("cannot write " + (run / "metrics.jsonl").string());
    return f;
}

// --- subcommands -----------------------------------------------------------

void do_tokenizer_train(const RunContext& ctx) {
    std::ifstream a(ctx.cfg.tokenizer.corpus_a), b(ctx.cfg.tokenizer.corpus_b);
    if (!a) throw IoError("cannot read " + ctx.cfg.tokenizer.corpus_a);
    if (!b) throw IoError("cannot read " + ctx.cfg.tokenizer.corpus_b);
    BpeModel bpe =
        BpeModel::train(a, b, static_cast<std::size_t>(ctx.cfg.tokenizer.vocab_size));
    const fs::path out = ctx.run / "tokenizer.bpe";
    bpe.save_file(out.string());
    std::cout << "tokenizer-train: vocab " << bpe.vocab_size() << " (" << bpe.num_merges()
              << " merges) -> " << out.string() << "\n";
}

void do_synth_data(const RunContext& ctx) {
    SynthWorld world(ctx.cfg.synth);
    world.write_bundle(ctx.run.string());
    std::cout << "synth-data: seed " << ctx.cfg.synth.seed << ", bundle -> " << ctx.run.string()
              << "\n";
}

void do_curate(const RunContext& ctx) {
    const CurationSection& cs = ctx.cfg.curation;
    std::vector<PairRecord> records = load_pair_records(cs.input);
    EmbedFn embed;
    const EmbedFn* embed_ptr = nullptr;
    if (cs.use_consistency) {
        embed = make_embed_fn(ctx.cfg.tokenizer.file, cs.checkpoint);
        embed_ptr = &embed;
    }
    CurationResult res = curate_pairs(records, cs.filter, embed_ptr);
    save_pair_records((ctx.run / "pairs.jsonl").string(), res.kept);
    write_drop_log((ctx.run / "drop_log.jsonl").string(), res.dropped);
    std::cout << "curate: kept " << res.kept.size() << " of " << records.size() << " (dropped "
              << res.dropped.size() << ") -> " << (ctx.run / "pairs.jsonl").string() << "\n";
}

template <class S>
void do_pretrain(const RunContext& ctx) {
    BpeModel bpe = BpeModel::load_file(ctx.cfg.tokenizer.file);
    check_vocab_fits(bpe, ctx.cfg.model);
    const std::string corpus_a = slurp_file(ctx.cfg.stage1.corpus_a);
    const std::string corpus_b = slurp_file(ctx.cfg.stage1.corpus_b);
    TrainConfig tc = resolve_train(ctx.cfg.stage1.train, ctx.run);
    Rng init(Rng::mix(tc.seed ^ kModelInitSalt));
    EncoderModel<S> model(ctx.cfg.model, init);
    std::ofstream metrics = open_metrics(ctx.run);
    TrainLog log;
    log.sink = &metrics;
    Stage1Result res = stage1_pretrain(corpus_a, corpus_b, bpe, model, tc, log);
    model.save_file((ctx.run / "model.ckpt").string());
    write_text(ctx.run / "result.json",
               json{{"first_loss", res.first_loss},
                    {"final_loss", res.final_loss},
                    {"val_accuracy_a", res.val_accuracy_a},
                    {"val_accuracy_b", res.val_accuracy_b},
                    {"steps_run", res.steps_run}}
                       .dump(2) +
                   "\n");
    std::cout << "pretrain: " << res.steps_run << " steps, loss " << res.first_loss << " -> "
              << res.final_loss << ", val accuracy a=" << res.val_accuracy_a
              << " b=" << res.val_accuracy_b << "\n";
}

template <class S>
void do_stage_train(const RunContext& ctx, const StageSection& st, const char* name,
                    bool multitask) {
    BpeModel bpe = BpeModel::load_file(ctx.cfg.tokenizer.file);
    EncoderModel<S> model = initial_model<S>(ctx.cfg, st);
    check_vocab_fits(bpe, model.config());
    std::vector<TaskDataset> datasets = load_datasets(st.datasets);
    TrainConfig tc = resolve_train(st.train, ctx.run);
    std::ofstream metrics = open_metrics(ctx.run);
    TrainLog log;
    log.sink = &metrics;
    StageResult res = multitask ? stage3_multitask(datasets, bpe, model, tc, log)
                                : stage2_pair_train(datasets, bpe, model, tc, log);
    model.save_file((ctx.run / "model.ckpt").string());
    write_text(ctx.run / "result.json",
               json{{"first_loss", res.first_loss},
                    {"final_loss", res.final_loss},
                    {"steps_run", res.steps_run},
                    {"skipped", res.skipped}}
                       .dump(2) +
                   "\n");
    std::cout << name << ": " << res.steps_run << " steps (" << res.skipped << " skipped), loss "
              << res.first_loss << " -> " << res.final_loss << "\n";
}

void do_eval(const RunContext& ctx) {
    EmbedFn embed = make_embed_fn(ctx.cfg.tokenizer.file, ctx.cfg.eval.checkpoint);
    json all = json::array();
    std::ostringstream tables;
    std::ofstream metrics = open_metrics(ctx.run);
    for (const EvalTaskSpec& t : ctx.cfg.eval.tasks) {
        MetricReport report;
        if (t.kind == "sts")
            report = run_sts_eval(embed, StsTask::load_file(t.path), t.name);
        else
            report = run_retrieval_eval(embed,
                                        RetrievalTask::load_files(t.corpus, t.queries, t.qrels),
                                        static_cast<std::size_t>(t.k), t.name);
        all.push_back(json::parse(report.to_json()));
        tables << report.table() << "\n";
        // flat rows so `report` can tabulate and compare eval runs too
        for (const auto& [metric, value] : report.values) {
            json j;
            j["step"] = 0;
            j["dataset"] = t.name;
            j["kind"] = metric;
            j["value"] = value;
            metrics << j.dump() << "\n";
        }
    }
    write_text(ctx.run / "metrics.json", all.dump(2) + "\n");
    write_text(ctx.run / "eval_report.txt", tables.str());
    std::cout << tables.str();
}

// --- report ----------------------------------------------------------------

struct MetricRow {
    int step = 0;
    std::string dataset, kind;
    double value = 0.0;
};

std::vector<MetricRow> read_metric_log(const fs::path& file, std::ostream& warn) {
    std::ifstream f(file);
    if (!f) throw IoError("cannot read metrics log " + file.string());
    std::vector<MetricRow> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            json j = json::parse(line);
            rows.push_back({j.at("step").get<int>(), j.at("dataset").get<std::string>(),
                            j.at("kind").get<std::string>(), j.at("value").get<double>()});
        } catch (const json::exception&) {
            warn << "warning: " << file.string() << ":" << lineno << ": malformed line skipped\n";
        }
    }
    return rows;
}

std::string format_num(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

// full-fidelity value rendering for the plot file
std::string exact_num(double v) { return json(v).dump(); }

std::string render_table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
    for (const auto& r : rows)
        for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t c = 0; c < cells.size(); ++c) {
            os << std::left << std::setw(static_cast<int>(width[c])) << cells[c];
            os << (c + 1 == cells.size() ? "\n" : "  ");
        }
    };
    line(header);
    {
        std::vector<std::string> rule;
        for (std::size_t w : width) rule.push_back(std::string(w, '-'));
        line(rule);
    }
    for (const auto& r : rows) line(r);
    return os.str();
}

std::string run_label(const std::string& dir) {
    fs::path p = fs::path(dir).lexically_normal();
    std::string label = p.filename().string();
    if (label.empty() || label == ".") label = dir;
    return label;
}

int run_report(const std::vector<std::string>& dirs, const std::string& out_path,
               std::ostream& out, std::ostream& warn) {
    using Key = std::pair<std::string, std::string>;  // (dataset, kind)
    if (dirs.size() == 1) {
        const fs::path dir(dirs[0]);
        auto rows = read_metric_log(dir / "metrics.jsonl", warn);
        if (rows.empty())
            warn << "warning: " << (dir / "metrics.jsonl").string()
                 << ": empty metrics log, nothing to report\n";
        struct Agg {
            int n = 0;
            double first = 0, last = 0;
            double lo = std::numeric_limits<double>::infinity();
            double hi = -std::numeric_limits<double>::infinity();
        };
        std::map<Key, Agg> agg;
        std::vector<Key> order;
        for (const MetricRow& r : rows) {
            Key k{r.dataset, r.kind};
            auto [it, fresh] = agg.try_emplace(k);
            if (fresh) {
                order.push_back(k);
                it->second.first = r.value;
            }
            it->second.last = r.value;
            it->second.lo = std::min(it->second.lo, r.value);
            it->second.hi = std::max(it->second.hi, r.value);
            ++it->second.n;
        }
        std::vector<std::vector<std::string>> cells;
        for (const Key& k : order) {
            const Agg& a = agg[k];
            cells.push_back({k.first, k.second, std::to_string(a.n), format_num(a.first),
                             format_num(a.last), format_num(a.lo), format_num(a.hi)});
        }
        std::string table =
            render_table({"dataset", "kind", "entries", "first", "last", "min", "max"}, cells);
        out << table;
        write_text(dir / "report.txt", table);
        std::ostringstream tsv;
        tsv << "step\tdataset\tkind\tvalue\n";
        for (const MetricRow& r : rows)
            tsv << r.step << '\t' << r.dataset << '\t' << r.kind << '\t' << exact_num(r.value)
                << '\n';
        write_text(out_path.empty() ? dir / "report.tsv" : fs::path(out_path), tsv.str());
        return 0;
    }

    // several runs: side-by-side final values, one column per run
    std::vector<std::map<Key, double>> last(dirs.size());
    std::vector<Key> order;
    std::set<Key> known;
    for (std::size_t d = 0; d < dirs.size(); ++d) {
        for (const MetricRow& r : read_metric_log(fs::path(dirs[d]) / "metrics.jsonl", warn)) {
            Key k{r.dataset, r.kind};
            last[d][k] = r.value;
            if (known.insert(k).second) order.push_back(k);
        }
    }
    if (order.empty())
        warn << "warning: no metrics found in any of the " << dirs.size() << " run dirs\n";
    std::vector<std::string> header = {"dataset", "kind"};
    for (const std::string& d : dirs) header.push_back(run_label(d));
    std::vector<std::vector<std::string>> cells;
    std::ostringstream tsv;
    tsv << "dataset\tkind";
    for (const std::string& d : dirs) tsv << '\t' << run_label(d);
    tsv << '\n';
    for (const Key& k : order) {
        std::vector<std::string> row = {k.first, k.second};
        tsv << k.first << '\t' << k.second;
        for (std::size_t d = 0; d < dirs.size(); ++d) {
            auto it = last[d].find(k);
            row.push_back(it == last[d].end() ? "-" : format_num(it->second));
            tsv << '\t' << (it == last[d].end() ? std::string("-") : exact_num(it->second));
        }
        cells.push_back(std::move(row));
        tsv << '\n';
    }
    std::string table = render_table(header, cells);
    out << table;
    write_text(out_path.empty() ? fs::path("report.tsv") : fs::path(out_path), tsv.str());
    return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"bilingual text-embedding pipeline"};
    app.require_subcommand(1);

    struct CommandOpts {
        std::string config, run_dir;
        std::vector<std::string> overrides;
        bool force = false;
    };
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"tokenizer-train", "train the byte-level BPE tokenizer on two corpora"},
        {"curate", "filter, refine and deduplicate raw text pairs"},
        {"pretrain", "stage I: masked-language pretraining on two corpora"},
        {"train-pairs", "stage II: contrastive pair training"},
        {"train-multitask", "stage III: multi-task fine-tuning"},
        {"eval", "run retrieval/sts evaluation tasks against a checkpoint"},
        {"synth-data", "emit the seeded synthetic corpora and task files"},
    };
    std::map<std::string, CommandOpts> opts;
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        CommandOpts& o = opts[name];
        sub->add_option("-c,--config", o.config,
                        "pipeline config file (JSON); defaults apply when omitted");
        sub->add_option("-o,--run-dir", o.run_dir, "run directory for artifacts")->required();
        sub->add_option("--set", o.overrides,
                        "dotted.path=value override; wins over the config file (repeatable)");
        sub->add_flag("--force", o.force, "redo a run directory that already holds a run");
    }
    std::vector<std::string> report_dirs;
    std::string report_out;
    CLI::App* rep = app.add_subcommand(
        "report", "tabulate a run's metrics log; several dirs give a side-by-side comparison");
    rep->add_option("dirs", report_dirs, "run directories with metrics.jsonl")
        ->required()
        ->expected(-1);
    rep->add_option("--out", report_out,
                    "path for the tab-separated plot data (default: <dir>/report.tsv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand("report")) return run_report(report_dirs, report_out, std::cout, std::cerr);
        for (const auto& [name, help] : commands) {
            if (!app.got_subcommand(name)) continue;
            const CommandOpts& o = opts[name];
            RunContext ctx = start_run(o.config, o.overrides, o.run_dir, o.force, name);
            if (name == "tokenizer-train") {
                do_tokenizer_train(ctx);
            } else if (name == "curate") {
                do_curate(ctx);
            } else if (name == "pretrain") {
                with_scalar(ctx.cfg.stage1.train.precision, [&](auto tag) {
                    do_pretrain<typename decltype(tag)::type>(ctx);
                });
            } else if (name == "train-pairs") {
                with_scalar(ctx.cfg.stage2.train.precision, [&](auto tag) {
                    do_stage_train<typename decltype(tag)::type>(ctx, ctx.cfg.stage2,
                                                                 "train-pairs", false);
                });
            } else if (name == "train-multitask") {
                with_scalar(ctx.cfg.stage3.train.precision, [&](auto tag) {
                    do_stage_train<typename decltype(tag)::type>(ctx, ctx.cfg.stage3,
                                                                 "train-multitask", true);
                });
            } else if (name == "eval") {
                do_eval(ctx);
            } else {
                do_synth_data(ctx);
            }
            break;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace biembed
