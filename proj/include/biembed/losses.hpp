#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "biembed/common.hpp"
#include "biembed/tensor.hpp"

namespace biembed {

// Similarity used inside the contrastive losses. Cosine is the default;
// raw dot product is kept as an escape hatch for experiments.
enum class Sim { cosine, dot };

inline const char* sim_name(Sim s) { return s == Sim::cosine ? "cosine" : "dot"; }

inline Sim sim_from_name(const std::string& s) {
    if (s == "cosine") return Sim::cosine;
    if (s == "dot") return Sim::dot;
    throw ConfigError("unknown similarity '" + s + "' (expected cosine|dot)");
}

namespace detail {

template <class S>
void check_rows(const Tensor<S>& t, const char* what) {
    if (!t.defined() || t.ndim() != 2) throw ShapeError(std::string(what) + ": need a [k,d] tensor");
    for (S v : t.values())
        if (!std::isfinite(double(v)))
            throw DegenerateError(std::string(what) + ": non-finite embedding entry");
}

}  // namespace detail

// One in-batch positive per query: rows pair up (q_i, p_i).
template <class S>
struct PairBatch {
    Tensor<S> q_embs;  // [k, d]
    Tensor<S> p_embs;  // [k, d]

    std::size_t k() const { return q_embs.dim(0); }

    void validate() const {
        detail::check_rows(q_embs, "PairBatch.q_embs");
        detail::check_rows(p_embs, "PairBatch.p_embs");
        if (q_embs.shape() != p_embs.shape())
            throw ShapeError("PairBatch: q " + shape_str(q_embs.shape()) + " vs p " +
                             shape_str(p_embs.shape()));
        if (k() < 2) throw ShapeError("PairBatch: need k >= 2 rows");
    }
};

// Pairs plus m hard negatives per row.
template <class S>
struct TripletBatch {
    Tensor<S> q_embs;    // [k, d]
    Tensor<S> p_embs;    // [k, d]
    Tensor<S> neg_embs;  // [k, m, d]

    std::size_t k() const { return q_embs.dim(0); }
    std::size_t m() const { return neg_embs.dim(1); }

    void validate() const {
        detail::check_rows(q_embs, "TripletBatch.q_embs");
        detail::check_rows(p_embs, "TripletBatch.p_embs");
        if (!neg_embs.defined() || neg_embs.ndim() != 3)
            throw ShapeError("TripletBatch.neg_embs: need a [k,m,d] tensor");
        if (q_embs.shape() != p_embs.shape())
            throw ShapeError("TripletBatch: q/p shape mismatch");
        if (neg_embs.dim(0) != k() || neg_embs.dim(2) != q_embs.dim(1))
            throw ShapeError("TripletBatch: negs " + shape_str(neg_embs.shape()) +
                             " incompatible with q " + shape_str(q_embs.shape()));
        if (m() < 1) throw ShapeError("TripletBatch: need m >= 1 negatives per row");
        for (S v : neg_embs.values())
            if (!std::isfinite(double(v))) throw DegenerateError("TripletBatch: non-finite negative");
    }
};

// Pairs with graded similarity targets in [0,1].
template <class S>
struct StsBatch {
    Tensor<S> q_embs;  // [k, d]
    Tensor<S> p_embs;  // [k, d]
    Tensor<S> scores;  // [k]

    std::size_t k() const { return q_embs.dim(0); }

    void validate() const {
        detail::check_rows(q_embs, "StsBatch.q_embs");
        detail::check_rows(p_embs, "StsBatch.p_embs");
        if (q_embs.shape() != p_embs.shape()) throw ShapeError("StsBatch: q/p shape mismatch");
        if (!scores.defined() || scores.ndim() != 1 || scores.dim(0) != k())
            throw ShapeError("StsBatch: scores must be a [k] vector");
        if (k() < 2) throw ShapeError("StsBatch: need k >= 2 rows");
        for (S v : scores.values())
            if (!(v >= S(0) && v <= S(1)))
                throw ConfigError("StsBatch: score " + std::to_string(double(v)) +
                                  " outside [0,1]");
    }
};

// Row-wise similarity matrix: out[i,j] = s(x_i, y_j).
template <class S>
Tensor<S> sim_matrix(const Tensor<S>& x, const Tensor<S>& y, Sim sim) {
    if (sim == Sim::cosine) return matmul(normalize_lastdim(x), transpose2(normalize_lastdim(y)));
    return matmul(x, transpose2(y));
}

// Aligned-row similarities: out[i] = s(x_i, y_i).
template <class S>
Tensor<S> sim_diag(const Tensor<S>& x, const Tensor<S>& y, Sim sim) {
    Tensor<S> a = x, b = y;
    if (sim == Sim::cosine) {
        a = normalize_lastdim(x);
        b = normalize_lastdim(y);
    }
    return reshape(sum_lastdim(mul(a, b)), {x.dim(0)});
}

namespace detail {

template <class S>
void check_tau(double tau) {
    if (!(tau > 0)) throw ConfigError("info_nce: temperature must be positive");
}

// sum over rows of [ logsumexp_j(S[i,j]/tau) - S[i,i]/tau ]
template <class S>
Tensor<S> nce_from_sims(const Tensor<S>& sims, double tau) {
    const std::size_t rows = sims.dim(0);
    Tensor<S> scaled = mul_scalar(sims, static_cast<S>(1.0 / tau));
    Tensor<S> lse = logsumexp_lastdim(scaled);  // [rows, 1]
    std::vector<std::size_t> idx(rows);
    for (std::size_t i = 0; i < rows; ++i) idx[i] = i;
    Tensor<S> diag_terms = take_rc(scaled, idx, idx);  // [rows]
    return sub(sum_all(lse), sum_all(diag_terms));
}

}  // namespace detail

// One-directional contrastive loss, summed (not averaged) over the batch:
//   L = -sum_i ln( e^{s(q_i,p_i)/tau} / sum_j e^{s(q_i,p_j)/tau} )
template <class S>
Tensor<S> info_nce(const PairBatch<S>& batch, double tau, Sim sim = Sim::cosine) {
    batch.validate();
    detail::check_tau<S>(tau);
    return detail::nce_from_sims(sim_matrix(batch.q_embs, batch.p_embs, sim), tau);
}

// Sum of both pairing directions: queries over passages plus passages over
// queries.
template <class S>
Tensor<S> bidirectional_info_nce(const PairBatch<S>& batch, double tau, Sim sim = Sim::cosine) {
    PairBatch<S> swapped{batch.p_embs, batch.q_embs};
    return add(info_nce(batch, tau, sim), info_nce(swapped, tau, sim));
}

// Hard-negative contrastive loss, averaged over rows. The forward direction
// ranks each query against every in-batch positive plus every in-batch
// negative; the reverse direction ranks each positive against the queries
// only (negatives deliberately excluded).
template <class S>
Tensor<S> triplet_info_nce(const TripletBatch<S>& batch, double tau, Sim sim = Sim::cosine) {
    batch.validate();
    detail::check_tau<S>(tau);
    const std::size_t k = batch.k(), m = batch.m(), d = batch.q_embs.dim(1);
    Tensor<S> negs_flat = reshape(batch.neg_embs, {k * m, d});
    Tensor<S> cols = concat<S>({batch.p_embs, negs_flat}, 0);  // [k + k*m, d]
    Tensor<S> fwd_sims = mul_scalar(sim_matrix(batch.q_embs, cols, sim), static_cast<S>(1.0 / tau));
    Tensor<S> fwd_lse = logsumexp_lastdim(fwd_sims);  // [k,1]
    std::vector<std::size_t> idx(k);
    for (std::size_t i = 0; i < k; ++i) idx[i] = i;
    Tensor<S> fwd_diag = take_rc(fwd_sims, idx, idx);  // positives sit in the first k columns
    Tensor<S> fwd = mul_scalar(sub(sum_all(fwd_lse), sum_all(fwd_diag)), static_cast<S>(1.0 / double(k)));

    Tensor<S> rev = mul_scalar(
        detail::nce_from_sims(sim_matrix(batch.p_embs, batch.q_embs, sim), tau),
        static_cast<S>(1.0 / double(k)));
    return add(fwd, rev);
}

// Negative Pearson correlation between pair similarities and target scores.
// Biased (1/k) moment estimators throughout; the normalization cancels.
template <class S>
Tensor<S> pearson_sts_loss(const StsBatch<S>& batch, Sim sim = Sim::cosine) {
    batch.validate();
    Tensor<S> sims = sim_diag(batch.q_embs, batch.p_embs, sim);  // [k]
    Tensor<S> dev_s = sub(sims, mean_all(sims));
    Tensor<S> dev_t = sub(batch.scores, mean_all(batch.scores));
    Tensor<S> var_s = mean_all(mul(dev_s, dev_s));
    Tensor<S> var_t = mean_all(mul(dev_t, dev_t));
    if (!(double(var_t.item()) > 1e-12))
        throw DegenerateError("pearson_sts_loss: target scores have (near-)zero variance");
    if (!(double(var_s.item()) > 1e-12))
        throw DegenerateError("pearson_sts_loss: similarities have (near-)zero variance");
    Tensor<S> cov = mean_all(mul(dev_s, dev_t));
    return neg(div(cov, sqrt_t(mul(var_s, var_t))));
}

// Plain mean squared error between similarities and targets (ablation
// baseline; scale-sensitive, unlike the Pearson form).
template <class S>
Tensor<S> mse_sts_loss(const StsBatch<S>& batch, Sim sim = Sim::cosine) {
    batch.validate();
    Tensor<S> diff = sub(sim_diag(batch.q_embs, batch.p_embs, sim), batch.scores);
    return mean_all(mul(diff, diff));
}

}  // namespace biembed
