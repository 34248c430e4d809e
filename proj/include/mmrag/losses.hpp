#pragma once

// The three training objectives and their weighted sum: softmax contrastive
// alignment of the image query with its matching policy vector, squared
// error on the retrieved similarity scores, and teacher-forced negative
// log-likelihood for generation.

#include <cstdint>
#include <vector>

#include "mmrag/ops.hpp"

namespace mmrag {

struct LossWeights {
    double contrastive = 1.0;
    double retrieval = 1.0;
    double generation = 1.0;

    void validate() const {
        if (contrastive < 0 || retrieval < 0 || generation < 0)
            throw ConfigError("loss weights must be non-negative");
        if (contrastive == 0 && retrieval == 0 && generation == 0)
            throw ConfigError("at least one loss weight must be positive");
    }
};

// Differentiable cosine similarity of two rank-1 tensors.
inline Tensor cosine_sim_t(Tape& tape, const Tensor& q, const Tensor& v) {
    Tensor qq = ops::sqrt(tape, ops::dot(tape, q, q));
    Tensor vv = ops::sqrt(tape, ops::dot(tape, v, v));
    return ops::div(tape, ops::dot(tape, q, v), ops::mul(tape, qq, vv));
}

// Similarity row of q against every corpus vector, kept on tape: [M].
inline Tensor similarity_row(Tape& tape, const Tensor& q, const std::vector<Tensor>& vectors) {
    if (vectors.empty()) throw ContractError("similarity_row: no vectors");
    std::vector<Tensor> sims;
    sims.reserve(vectors.size());
    for (const Tensor& v : vectors) sims.push_back(cosine_sim_t(tape, q, v));
    return ops::concat_vec(tape, sims);
}

// -log( exp(s+ / tau) / sum_j exp(s_j / tau) ); tau defaults to 1, matching
// the objective as printed.
inline Tensor contrastive_loss_from_sims(Tape& tape, const Tensor& sims, std::size_t positive_idx,
                                         double temperature = 1.0) {
    if (positive_idx >= sims.numel())
        throw ContractError("contrastive positive index " + std::to_string(positive_idx) +
                            " outside " + std::to_string(sims.numel()) + " similarities");
    if (temperature <= 0) throw ConfigError("contrastive temperature must be positive");
    Tensor scaled = ops::as_row(tape, ops::affine(tape, sims, 1.0 / temperature, 0.0));
    Tensor logp = ops::log_softmax_rows(tape, scaled);
    Tensor pos = ops::gather_flat(tape, logp, {1}, {static_cast<std::int64_t>(positive_idx)});
    return ops::affine(tape, pos, -1.0, 0.0);
}

inline Tensor contrastive_loss(Tape& tape, const Tensor& q, const std::vector<Tensor>& vectors,
                               std::size_t positive_idx, double temperature = 1.0) {
    return contrastive_loss_from_sims(tape, similarity_row(tape, q, vectors), positive_idx,
                                      temperature);
}

// sum_j (s_j - y_j)^2 over the candidate set.
inline Tensor retrieval_loss(Tape& tape, const Tensor& scores, const std::vector<double>& labels) {
    if (scores.rank() != 1 || scores.numel() != labels.size())
        throw ContractError("retrieval_loss: " + std::to_string(scores.numel()) + " scores vs " +
                            std::to_string(labels.size()) + " labels");
    for (double y : labels)
        if (y != 0.0 && y != 1.0)
            throw ContractError("retrieval label " + std::to_string(y) + " not in {0,1}");
    Tensor y = Tensor::from_values({labels.size()}, std::vector<double>(labels));
    Tensor diff = ops::sub(tape, scores, y);
    return ops::dot(tape, diff, diff);
}

// -sum_t log P(y_t); step_logprobs is the [T, V] teacher-forced matrix.
inline Tensor generation_loss(Tape& tape, const Tensor& step_logprobs,
                              const std::vector<std::size_t>& target) {
    if (step_logprobs.rank() != 2 || step_logprobs.rows() != target.size())
        throw ContractError("generation_loss: logprob rows " +
                            std::to_string(step_logprobs.rank() == 2 ? step_logprobs.rows() : 0) +
                            " vs " + std::to_string(target.size()) + " target steps");
    const std::size_t vocab = step_logprobs.cols();
    std::vector<std::int64_t> idx(target.size());
    for (std::size_t t = 0; t < target.size(); ++t) {
        if (target[t] >= vocab)
            throw ContractError("target token " + std::to_string(target[t]) +
                                " outside vocabulary of " + std::to_string(vocab));
        idx[t] = static_cast<std::int64_t>(t * vocab + target[t]);
    }
    Tensor picked = ops::gather_flat(tape, step_logprobs, {target.size()}, idx);
    return ops::affine(tape, ops::sum_all(tape, picked), -1.0, 0.0);
}

// L_total = w1 * L_contrast + w2 * L_retrieval + w3 * L_gen, exactly.
inline Tensor total_loss(Tape& tape, const Tensor& contrast, const Tensor& retrieval,
                         const Tensor& generation, const LossWeights& w) {
    w.validate();
    Tensor acc = ops::affine(tape, contrast, w.contrastive, 0.0);
    acc = ops::add(tape, acc, ops::affine(tape, retrieval, w.retrieval, 0.0));
    return ops::add(tape, acc, ops::affine(tape, generation, w.generation, 0.0));
}

}  // namespace mmrag
