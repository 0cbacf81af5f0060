#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "biembed/common.hpp"
#include "biembed/rng.hpp"
#include "biembed/tensor.hpp"
#include "biembed/tokenizer.hpp"

namespace biembed {

// 1 = real token, 0 = padding.
using PadMask = std::vector<std::uint8_t>;

inline PadMask pad_mask_from_ids(const std::vector<TokenId>& ids, TokenId pad_id) {
    PadMask m(ids.size(), 1);
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == pad_id) m[i] = 0;
    return m;
}

struct EncoderConfig {
    int layers = 2;
    int hidden_dim = 64;
    int heads = 4;
    int ffn_dim = 256;
    int vocab_size = 4096;
    int trained_max_len = 64;  // training bound; inference extrapolates via the distance bias
    bool qk_norm = false;
    double dropout_rate = 0.1;
    double layer_norm_eps = 1e-12;

    void validate() const {
        if (layers <= 0 || hidden_dim <= 0 || heads <= 0 || ffn_dim <= 0 || vocab_size <= 0 ||
            trained_max_len <= 0)
            throw ConfigError("encoder config: all dimensions must be positive");
        if (hidden_dim % heads != 0)
            throw ConfigError("encoder config: hidden_dim " + std::to_string(hidden_dim) +
                              " not divisible by heads " + std::to_string(heads));
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw ConfigError("encoder config: dropout_rate must be in [0,1)");
        if (!(layer_norm_eps > 0.0)) throw ConfigError("encoder config: layer_norm_eps must be > 0");
    }

    nlohmann::json to_json() const {
        return {{"layers", layers},     {"hidden_dim", hidden_dim},
                {"heads", heads},       {"ffn_dim", ffn_dim},
                {"vocab_size", vocab_size}, {"trained_max_len", trained_max_len},
                {"qk_norm", qk_norm},   {"dropout_rate", dropout_rate},
                {"layer_norm_eps", layer_norm_eps}};
    }

    static EncoderConfig from_json(const nlohmann::json& j) {
        EncoderConfig c;
        c.layers = j.at("layers").get<int>();
        c.hidden_dim = j.at("hidden_dim").get<int>();
        c.heads = j.at("heads").get<int>();
        c.ffn_dim = j.at("ffn_dim").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.trained_max_len = j.at("trained_max_len").get<int>();
        c.qk_norm = j.at("qk_norm").get<bool>();
        c.dropout_rate = j.at("dropout_rate").get<double>();
        c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
        c.validate();
        return c;
    }
};

// Per-head additive attention bias: bias[h,i,j] = -slope(h) * |i-j| with
// slope(h) = 2^(-8*(h+1)/heads). Symmetric in (i,j); the bidirectional
// encoder penalizes distance in both directions equally.
template <class S>
Tensor<S> alibi_bias(int heads, int qlen, int klen) {
    if (heads <= 0 || qlen <= 0 || klen <= 0)
        throw ConfigError("alibi_bias: dimensions must be positive");
    std::vector<S> data(static_cast<std::size_t>(heads) * qlen * klen);
    std::size_t at = 0;
    for (int h = 0; h < heads; ++h) {
        double slope = std::pow(2.0, -8.0 * (h + 1) / heads);
        for (int i = 0; i < qlen; ++i)
            for (int j = 0; j < klen; ++j)
                data[at++] = static_cast<S>(-slope * std::abs(i - j));
    }
    return Tensor<S>::from({static_cast<std::size_t>(heads), static_cast<std::size_t>(qlen),
                            static_cast<std::size_t>(klen)},
                           std::move(data));
}

template <class S>
class EncoderModel {
  public:
    using Params = std::map<std::string, Tensor<S>>;

    EncoderModel(EncoderConfig cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const auto d = static_cast<std::size_t>(cfg_.hidden_dim);
        const auto f = static_cast<std::size_t>(cfg_.ffn_dim);
        const auto v = static_cast<std::size_t>(cfg_.vocab_size);
        add_param("embed.tokens", Tensor<S>::randn({v, d}, rng, 0.02));
        add_param("embed.ln.gain", Tensor<S>::full({d}, S(1)));
        add_param("embed.ln.bias", Tensor<S>::zeros({d}));
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = layer_prefix(l);
            for (const char* side : {"wq", "wk", "wv", "wo"})
                add_param(p + ".attn." + side, Tensor<S>::randn({d, d}, rng, 0.02));
            for (const char* side : {"bq", "bk", "bv", "bo"})
                add_param(p + ".attn." + side, Tensor<S>::zeros({d}));
            if (cfg_.qk_norm) {
                add_param(p + ".attn.qnorm.gain", Tensor<S>::full({d}, S(1)));
                add_param(p + ".attn.qnorm.bias", Tensor<S>::zeros({d}));
                add_param(p + ".attn.knorm.gain", Tensor<S>::full({d}, S(1)));
                add_param(p + ".attn.knorm.bias", Tensor<S>::zeros({d}));
            }
            add_param(p + ".attn.ln.gain", Tensor<S>::full({d}, S(1)));
            add_param(p + ".attn.ln.bias", Tensor<S>::zeros({d}));
            add_param(p + ".ffn.w1", Tensor<S>::randn({d, f}, rng, 0.02));
            add_param(p + ".ffn.b1", Tensor<S>::zeros({f}));
            add_param(p + ".ffn.w2", Tensor<S>::randn({f, d}, rng, 0.02));
            add_param(p + ".ffn.b2", Tensor<S>::zeros({d}));
            add_param(p + ".ffn.ln.gain", Tensor<S>::full({d}, S(1)));
            add_param(p + ".ffn.ln.bias", Tensor<S>::zeros({d}));
        }
        add_param("mlm.bias", Tensor<S>::zeros({v}));
    }

    const EncoderConfig& config() const { return cfg_; }
    Params& parameters() { return params_; }
    const Params& parameters() const { return params_; }

    Tensor<S>& param(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("encoder: no parameter named " + name);
        return it->second;
    }
    const Tensor<S>& param(const std::string& name) const {
        return const_cast<EncoderModel*>(this)->param(name);
    }

    // Final-layer hidden states [seq, hidden]. No dropout.
    Tensor<S> forward(const std::vector<TokenId>& ids, const PadMask& pad_mask) const {
        return forward_impl(ids, pad_mask, nullptr, -1, nullptr);
    }

    // Training-mode forward with dropout drawn from `rng`.
    Tensor<S> forward_train(const std::vector<TokenId>& ids, const PadMask& pad_mask, Rng& rng) const {
        return forward_impl(ids, pad_mask, &rng, -1, nullptr);
    }

    // Masked-token logits [seq, vocab]: tied input-embedding projection plus
    // a learned per-token bias.
    Tensor<S> forward_mlm(const std::vector<TokenId>& ids, const PadMask& pad_mask) const {
        return mlm_logits(forward(ids, pad_mask));
    }

    Tensor<S> forward_mlm_train(const std::vector<TokenId>& ids, const PadMask& pad_mask,
                                Rng& rng) const {
        return mlm_logits(forward_train(ids, pad_mask, rng));
    }

    // Mean of final hidden states over non-pad positions -> [hidden].
    // Unnormalized; similarity functions normalize downstream.
    Tensor<S> embed(const std::vector<TokenId>& ids, const PadMask& pad_mask) const {
        return embed_impl(ids, pad_mask, nullptr);
    }

    // Training-mode pooled embedding with dropout drawn from `rng`.
    Tensor<S> embed_train(const std::vector<TokenId>& ids, const PadMask& pad_mask,
                          Rng& rng) const {
        return embed_impl(ids, pad_mask, &rng);
    }

    // Attention probabilities [heads, seq, seq] of one layer (inference mode).
    Tensor<S> attention_probs(int layer, const std::vector<TokenId>& ids,
                              const PadMask& pad_mask) const {
        if (layer < 0 || layer >= cfg_.layers) throw ConfigError("attention_probs: bad layer index");
        Tensor<S> probs;
        forward_impl(ids, pad_mask, nullptr, layer, &probs);
        return probs;
    }

    void save(std::ostream& out) const {
        out << "BIEMBED-CKPT 1\n";
        out << "config " << cfg_.to_json().dump() << "\n";
        out << "params " << params_.size() << "\n";
        for (const auto& [name, t] : params_) {
            out << name << " " << sizeof(S) << " " << t.ndim();
            for (std::size_t i = 0; i < t.ndim(); ++i) out << " " << t.dim(i);
            out << "\n";
        }
        out << "blobs\n";
        for (const auto& [name, t] : params_) {
            const auto& v = t.values();
            out.write(reinterpret_cast<const char*>(v.data()),
                      static_cast<std::streamsize>(v.size() * sizeof(S)));
        }
        if (!out) throw IoError("checkpoint: write failed");
    }

    void save_file(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot write checkpoint: " + path);
        save(f);
    }

    static EncoderModel load(std::istream& in) {
        std::string line;
        if (!std::getline(in, line) || line != "BIEMBED-CKPT 1")
            throw IoError("checkpoint: bad magic line");
        if (!std::getline(in, line) || line.rfind("config ", 0) != 0)
            throw IoError("checkpoint: missing config line");
        EncoderConfig cfg;
        try {
            cfg = EncoderConfig::from_json(nlohmann::json::parse(line.substr(7)));
        } catch (const nlohmann::json::exception& e) {
            throw IoError(std::string("checkpoint: config parse failure: ") + e.what());
        }
        if (!std::getline(in, line) || line.rfind("params ", 0) != 0)
            throw IoError("checkpoint: missing params line");
        std::size_t count = std::stoul(line.substr(7));

        EncoderModel model(cfg);
        struct Entry {
            std::string name;
            Shape shape;
        };
        std::vector<Entry> manifest;
        for (std::size_t i = 0; i < count; ++i) {
            if (!std::getline(in, line)) throw IoError("checkpoint: truncated manifest");
            std::istringstream ls(line);
            Entry e;
            std::size_t width = 0, ndim = 0;
            ls >> e.name >> width >> ndim;
            if (width != sizeof(S))
                throw IoError("checkpoint: scalar width " + std::to_string(width) +
                              " does not match model width " + std::to_string(sizeof(S)));
            for (std::size_t k = 0; k < ndim; ++k) {
                std::size_t dim = 0;
                ls >> dim;
                e.shape.push_back(dim);
            }
            if (!ls) throw IoError("checkpoint: malformed manifest entry for " + e.name);
            manifest.push_back(std::move(e));
        }
        if (!std::getline(in, line) || line != "blobs")
            throw IoError("checkpoint: missing blobs marker");

        // manifest must name exactly the parameters this config creates,
        // with matching shapes
        Rng init_rng(0);
        EncoderModel fresh(cfg, init_rng);
        for (const auto& e : manifest) {
            auto it = fresh.params_.find(e.name);
            if (it == fresh.params_.end())
                throw IoError("checkpoint: unexpected parameter " + e.name);
            if (it->second.shape() != e.shape)
                throw IoError("checkpoint: shape mismatch for " + e.name + ": file has " +
                              shape_str(e.shape) + ", config implies " +
                              shape_str(it->second.shape()));
        }
        if (manifest.size() != fresh.params_.size())
            throw IoError("checkpoint: manifest lists " + std::to_string(manifest.size()) +
                          " parameters, config implies " + std::to_string(fresh.params_.size()));

        for (const auto& e : manifest) {
            std::vector<S> data(shape_numel(e.shape));
            in.read(reinterpret_cast<char*>(data.data()),
                    static_cast<std::streamsize>(data.size() * sizeof(S)));
            if (static_cast<std::size_t>(in.gcount()) != data.size() * sizeof(S))
                throw IoError("checkpoint: truncated blob for " + e.name);
            for (S v : data)
                if (!std::isfinite(double(v)))
                    throw IoError("checkpoint: non-finite value in " + e.name);
            Tensor<S> t = Tensor<S>::from(e.shape, std::move(data));
            t.set_requires_grad(true);
            model.params_.emplace(e.name, std::move(t));
        }
        return model;
    }

    static EncoderModel load_file(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot read checkpoint: " + path);
        return load(f);
    }

  private:
    explicit EncoderModel(EncoderConfig cfg) : cfg_(cfg) {}  // load() fills params

    static std::string layer_prefix(int l) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "layer%02d", l);
        return buf;
    }

    void add_param(const std::string& name, Tensor<S> t) {
        t.set_requires_grad(true);
        params_.emplace(name, std::move(t));
    }

    void check_inputs(const std::vector<TokenId>& ids, const PadMask& pad_mask) const {
        if (ids.empty()) throw ShapeError("encoder: empty input sequence");
        if (ids.size() != pad_mask.size())
            throw ShapeError("encoder: ids/pad_mask length mismatch");
        for (TokenId id : ids)
            if (id < 0 || id >= cfg_.vocab_size)
                throw ShapeError("encoder: token id " + std::to_string(id) +
                                 " outside vocab of " + std::to_string(cfg_.vocab_size));
    }

    Tensor<S> maybe_dropout(Tensor<S> x, Rng* rng) const {
        if (rng == nullptr || cfg_.dropout_rate == 0.0) return x;
        return dropout(x, cfg_.dropout_rate, *rng);
    }

    Tensor<S> embed_impl(const std::vector<TokenId>& ids, const PadMask& pad_mask,
                         Rng* rng) const {
        check_inputs(ids, pad_mask);
        std::size_t n = 0;
        for (std::uint8_t m : pad_mask) n += m;
        if (n == 0) throw DegenerateError("embed: all positions are padding");
        Tensor<S> h = forward_impl(ids, pad_mask, rng, -1, nullptr);
        // Pooling as a constant selector matmul keeps the accumulation order
        // fixed, so appended padding cannot perturb a single bit.
        std::vector<S> sel(ids.size(), S(0));
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (pad_mask[i]) sel[i] = static_cast<S>(1.0 / double(n));
        Tensor<S> selector = Tensor<S>::from({1, ids.size()}, std::move(sel));
        return reshape(matmul(selector, h), {static_cast<std::size_t>(cfg_.hidden_dim)});
    }

    Tensor<S> mlm_logits(const Tensor<S>& hidden) const {
        return add(matmul(hidden, transpose2(param("embed.tokens"))), param("mlm.bias"));
    }

    // Shared forward plumbing. When probe_layer >= 0, stores that layer's
    // attention probabilities into *probs_out.
    Tensor<S> forward_impl(const std::vector<TokenId>& ids, const PadMask& pad_mask, Rng* rng,
                           int probe_layer, Tensor<S>* probs_out) const {
        check_inputs(ids, pad_mask);
        const std::size_t seq = ids.size();
        const auto d = static_cast<std::size_t>(cfg_.hidden_dim);
        const auto heads = static_cast<std::size_t>(cfg_.heads);
        const std::size_t dh = d / heads;
        const double eps = cfg_.layer_norm_eps;

        std::vector<std::int64_t> ids64(ids.begin(), ids.end());
        Tensor<S> x = embedding_lookup(param("embed.tokens"), ids64);
        x = layer_norm(x, param("embed.ln.gain"), param("embed.ln.bias"), eps);
        x = maybe_dropout(x, rng);

        // Constant additive attention bias: distance penalty plus -inf at
        // padded keys (exactly removes them from every softmax row).
        Tensor<S> bias;
        {
            Tensor<S> dist = alibi_bias<S>(cfg_.heads, static_cast<int>(seq),
                                           static_cast<int>(seq));
            std::vector<S> pad_bias(seq, S(0));
            for (std::size_t j = 0; j < seq; ++j)
                if (!pad_mask[j]) pad_bias[j] = -std::numeric_limits<S>::infinity();
            bias = add(dist, Tensor<S>::from({seq}, std::move(pad_bias)));
        }

        const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(double(dh)));
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = layer_prefix(l);
            Tensor<S> q = add(matmul(x, param(p + ".attn.wq")), param(p + ".attn.bq"));
            Tensor<S> k = add(matmul(x, param(p + ".attn.wk")), param(p + ".attn.bk"));
            Tensor<S> v = add(matmul(x, param(p + ".attn.wv")), param(p + ".attn.bv"));
            if (cfg_.qk_norm) {
                // normalized over the whole hidden axis, heads still flattened
                q = layer_norm(q, param(p + ".attn.qnorm.gain"), param(p + ".attn.qnorm.bias"), eps);
                k = layer_norm(k, param(p + ".attn.knorm.gain"), param(p + ".attn.knorm.bias"), eps);
            }
            auto split = [&](const Tensor<S>& t) {
                return permute(reshape(t, {seq, heads, dh}), {1, 0, 2});  // [heads, seq, dh]
            };
            Tensor<S> q3 = split(q), k3 = split(k), v3 = split(v);
            Tensor<S> scores =
                mul_scalar(matmul(q3, permute(k3, {0, 2, 1})), inv_sqrt_dh);  // [heads, seq, seq]
            Tensor<S> probs = softmax_rows(scores, bias);
            if (probe_layer == l && probs_out != nullptr) *probs_out = probs;
            probs = maybe_dropout(probs, rng);
            Tensor<S> ctx = reshape(permute(matmul(probs, v3), {1, 0, 2}), {seq, d});
            Tensor<S> attn_out = add(matmul(ctx, param(p + ".attn.wo")), param(p + ".attn.bo"));
            x = layer_norm(add(x, maybe_dropout(attn_out, rng)), param(p + ".attn.ln.gain"),
                           param(p + ".attn.ln.bias"), eps);

            Tensor<S> h = gelu(add(matmul(x, param(p + ".ffn.w1")), param(p + ".ffn.b1")));
            Tensor<S> ffn_out = add(matmul(h, param(p + ".ffn.w2")), param(p + ".ffn.b2"));
            x = layer_norm(add(x, maybe_dropout(ffn_out, rng)), param(p + ".ffn.ln.gain"),
                           param(p + ".ffn.ln.bias"), eps);
        }
        return x;
    }

    EncoderConfig cfg_;
    Params params_;
};

using EncoderModelD = EncoderModel<double>;
using EncoderModelF = EncoderModel<float>;

}  // namespace biembed
