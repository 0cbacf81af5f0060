#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "biembed/common.hpp"
#include "biembed/curation.hpp"
#include "biembed/encoder.hpp"
#include "biembed/synth.hpp"
#include "biembed/training.hpp"

namespace biembed {

// One pipeline = one JSON config document. Every field has a default (the
// struct initializers below); a config file overlays the defaults and
// --set overrides overlay the file, so precedence is override > file >
// default. Unknown keys anywhere are rejected with their full dotted path.

struct DatasetSpec {
    std::string name;
    std::string kind = "pair";  // pair | retrieval | sts
    std::string path;           // JSONL file of examples
    double weight = 1.0;        // sampling weight across datasets
    double score_ceiling = 5.0;  // sts only: gold scores are divided by this at load
};

struct EvalTaskSpec {
    std::string name;
    std::string kind = "retrieval";      // retrieval | sts
    std::string corpus, queries, qrels;  // retrieval file triple
    std::string path;                    // sts file
    int k = 10;                          // retrieval ranking cutoff
};

struct TokenizerSection {
    std::string corpus_a, corpus_b;  // training inputs (one text per line)
    int vocab_size = 4096;
    // Trained tokenizer artifact consumed by every command that tokenizes;
    // produced by tokenizer-train.
    std::string file;
};

struct StageSection {
    TrainConfig train;
    std::string corpus_a, corpus_b;     // stage1 inputs
    std::string init_checkpoint;        // stage2/3: empty = fresh init from [model]
    std::vector<DatasetSpec> datasets;  // stage2/3 inputs
};

struct CurationSection {
    CurationConfig filter;
    std::string input;             // raw pair JSONL
    bool use_consistency = false;  // enables the model-based consistency stage
    std::string checkpoint;        // encoder used when use_consistency is set
};

struct EvalSection {
    std::string checkpoint;
    std::vector<EvalTaskSpec> tasks;
};

struct PipelineConfig {
    TokenizerSection tokenizer;
    EncoderConfig model;
    StageSection stage1, stage2, stage3;
    CurationSection curation;
    EvalSection eval;
    SynthConfig synth;

    // Fully resolved document, defaults materialized; from_json(to_json())
    // round-trips. Unknown keys or ill-typed values throw ConfigError naming
    // the dotted field path.
    nlohmann::json to_json() const;
    static PipelineConfig from_json(const nlohmann::json& doc);

    // Structural checks on every section (delegates to the per-module
    // config validators), independent of which command will run.
    void validate() const;
    // Input-path requirements of one subcommand; errors name the missing
    // config field.
    void require_for(const std::string& subcommand) const;
};

// Reads and strictly parses a config file. Missing/unreadable file -> IoError;
// malformed JSON or invalid fields -> ConfigError.
PipelineConfig load_pipeline_config(const std::string& path);

// Applies one "dotted.path=value" override to a raw config document. The
// value is parsed as JSON when possible and taken as a string otherwise;
// integer path components index into arrays. New keys may be created (they
// are still subject to unknown-key rejection when the document is parsed).
void apply_override(nlohmann::json& doc, const std::string& spec);

// Creates the run directory. A directory that already holds a config
// snapshot is considered used and is refused unless force is set.
void prepare_run_dir(const std::string& dir, bool force);

// Entry point behind main(); returns the process exit code:
//   0 success, 2 config error, 3 numerical abort, 4 I/O error, 1 other.
int cli_main(int argc, const char* const* argv);

}  // namespace biembed
