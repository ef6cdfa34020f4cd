#pragma once

#include <vector>

#include "scmm/model.hpp"

namespace scmm::objectives {

/// Per-batch loss terms. total is the sum of the active terms; counts record
/// how many pairs / target tokens contributed.
struct LossBreakdown {
    double info_nce = 0.0;
    double match_ce = 0.0;
    double c2t = 0.0;
    double t2c = 0.0;
    double total = 0.0;
    std::size_t pair_count = 0;
    std::size_t token_count = 0;
};

struct AblationFlags {
    bool no_infonce = false;
    bool no_match_ce = false;
    bool no_c2t = false;
    bool no_t2c = false;
};

/// One aligned cell-text pair. pair_id is a stable identity (corpus index);
/// seeded sampling keys on it, never on batch position.
struct PairExample {
    corpus::CellTokens tokens;
    corpus::TextDescription desc;
    std::vector<double> normalized_values; // Eq-target for the t2c direction
    std::uint64_t pair_id = 0;
};

// ---------------------------------------------------------------------------
// Negative sampling
// ---------------------------------------------------------------------------

/// For each anchor, the n other batch members with the smallest
/// hash(seed, anchor_id, candidate_id): deterministic, independent of batch
/// order, without replacement.
inline std::vector<std::vector<std::size_t>> sample_negatives(const std::vector<std::uint64_t>& pair_ids,
                                                              std::size_t n, std::uint64_t seed) {
    if (pair_ids.size() < n + 1)
        throw config_error("negative sampling needs batch size > num_negatives (" +
                           std::to_string(pair_ids.size()) + " <= " + std::to_string(n) + ")");
    std::vector<std::vector<std::size_t>> out(pair_ids.size());
    for (std::size_t i = 0; i < pair_ids.size(); ++i) {
        std::vector<std::pair<std::uint64_t, std::size_t>> scored;
        for (std::size_t j = 0; j < pair_ids.size(); ++j) {
            if (j == i) continue;
            scored.emplace_back(rng::mix(seed, pair_ids[i], pair_ids[j]), j);
        }
        std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            return pair_ids[a.second] < pair_ids[b.second];
        });
        for (std::size_t k = 0; k < n; ++k) out[i].push_back(scored[k].second);
    }
    return out;
}

/// Seeded in-batch swap partner per anchor, for the unmatched pairs of the
/// matching loss.
inline std::vector<std::size_t> sample_swap_partner(const std::vector<std::uint64_t>& pair_ids,
                                                    std::uint64_t seed) {
    if (pair_ids.size() < 2) throw config_error("matching swap needs at least 2 pairs");
    std::vector<std::size_t> out(pair_ids.size());
    for (std::size_t i = 0; i < pair_ids.size(); ++i) {
        std::size_t best = i == 0 ? 1 : 0;
        std::uint64_t best_score = rng::mix(seed, pair_ids[i] ^ 0x5afu, pair_ids[best]);
        for (std::size_t j = 0; j < pair_ids.size(); ++j) {
            if (j == i) continue;
            std::uint64_t s = rng::mix(seed, pair_ids[i] ^ 0x5afu, pair_ids[j]);
            if (s < best_score || (s == best_score && pair_ids[j] < pair_ids[best])) {
                best = j;
                best_score = s;
            }
        }
        out[i] = best;
    }
    return out;
}

// ---------------------------------------------------------------------------
// InfoNCE
// ---------------------------------------------------------------------------

namespace detail {

// Sum over anchors of the softmax NLL of the matched similarity against that
// anchor's negatives. Per-anchor rows are built by selection matmuls so
// gradients flow to both feature matrices; anchors may carry different
// negative counts.
inline ad::Value anchor_nll_sum(ad::Value scores, const std::vector<std::vector<std::size_t>>& negatives,
                                double tau) {
    ad::Graph& g = *scores.g;
    std::size_t b = g.val(scores).rows;
    ad::Value total = g.constant_scalar(0.0);
    for (std::size_t i = 0; i < b; ++i) {
        Tensor sel(b, 1 + negatives[i].size(), 0.0);
        sel.at(i, 0) = 1.0;
        for (std::size_t k = 0; k < negatives[i].size(); ++k) sel.at(negatives[i][k], k + 1) = 1.0;
        ad::Value row = ad::matmul(ad::slice_rows(scores, i, 1), g.constant(std::move(sel)));
        total = ad::add(total, ad::nll_rows(ad::scale(row, 1.0 / tau), {0}));
    }
    return total;
}

} // namespace detail

/// Symmetrized InfoNCE with explicit per-anchor negative assignments. Both
/// feature matrices hold unit rows; matched pairs share a row index.
inline ad::Value info_nce_with_negatives(ad::Value cell_feats, ad::Value text_feats,
                                         const std::vector<std::vector<std::size_t>>& negatives, double tau) {
    if (tau <= 0.0) throw config_error("info_nce: temperature must be positive");
    ad::Graph& g = *cell_feats.g;
    std::size_t b = g.val(cell_feats).rows;
    if (g.val(text_feats).rows != b) throw config_error("info_nce: feature batches misaligned");
    if (negatives.size() != b) throw config_error("info_nce: negative assignment size mismatch");

    ad::Value sim_ct = ad::matmul(cell_feats, ad::transpose(text_feats)); // cell anchor vs texts
    ad::Value sim_tc = ad::matmul(text_feats, ad::transpose(cell_feats)); // text anchor vs cells
    ad::Value loss_ct = detail::anchor_nll_sum(sim_ct, negatives, tau);
    ad::Value loss_tc = detail::anchor_nll_sum(sim_tc, negatives, tau);
    return ad::scale(ad::add(loss_ct, loss_tc), 0.5 / double(b));
}

/// InfoNCE with identity-keyed seeded sampling of n negatives per anchor.
inline ad::Value info_nce(ad::Value cell_feats, ad::Value text_feats, const std::vector<std::uint64_t>& pair_ids,
                          double tau, std::size_t num_negatives, std::uint64_t seed) {
    return info_nce_with_negatives(cell_feats, text_feats, sample_negatives(pair_ids, num_negatives, seed), tau);
}

// ---------------------------------------------------------------------------
// Matching cross-entropy
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy of match logits against matched/unmatched labels.
inline ad::Value matching_ce(ad::Value logits, const std::vector<double>& labels) {
    ad::Graph& g = *logits.g;
    const Tensor& lv = g.val(logits);
    if (lv.size() == 0) throw config_error("matching_ce: empty batch");
    if (lv.cols != 1 || lv.rows != labels.size()) throw config_error("matching_ce: logit/label shape mismatch");
    Tensor y(lv.rows, 1);
    for (std::size_t i = 0; i < labels.size(); ++i) y.at(i, 0) = labels[i];
    // BCE(z, y) = softplus(z) - y*z, numerically stable for either label.
    ad::Value bce = ad::sub(ad::softplus(logits), ad::mul(logits, g.constant(std::move(y))));
    return ad::mean_all(bce);
}

// ---------------------------------------------------------------------------
// Generative losses
// ---------------------------------------------------------------------------

/// Teacher-forced NLL summed over the target tokens, conditioned on projected
/// query states as soft prompt. Prompt positions carry no loss.
inline ad::Value c2t_loss(model::Workspace& ws, ad::Value query_states, const std::vector<int>& target_tokens) {
    if (target_tokens.empty()) throw data_error("c2t_loss: empty target");
    ad::Value logits = model::decode_text_logits(ws, &query_states, target_tokens);
    // Row l predicts target_tokens[l]; the final row predicts the continuation
    // and carries no loss.
    ad::Value pred = ad::slice_rows(logits, 0, target_tokens.size());
    std::vector<std::size_t> targets;
    for (int t : target_tokens) targets.push_back(std::size_t(t));
    return ad::nll_rows(pred, targets);
}

/// Squared error summed over genes.
inline ad::Value t2c_loss(ad::Value pseudo_cell, const std::vector<double>& target_values) {
    ad::Graph& g = *pseudo_cell.g;
    const Tensor& pv = g.val(pseudo_cell);
    if (pv.rows != 1 || pv.cols != target_values.size())
        throw data_error("t2c_loss: prediction/target length mismatch (" + pv.shape_str() + " vs " +
                         std::to_string(target_values.size()) + ")");
    Tensor target(1, target_values.size());
    target.data.assign(target_values.begin(), target_values.end());
    ad::Value diff = ad::sub(pseudo_cell, g.constant(std::move(target)));
    return ad::sum_all(ad::mul(diff, diff));
}

// ---------------------------------------------------------------------------
// Batch-level stage losses
// ---------------------------------------------------------------------------

struct AlignmentOptions {
    double tau = 0.07;
    std::size_t num_negatives = 2;
    std::uint64_t seed = 0;
};

/// Stage-1 alignment loss over a batch of matched pairs: InfoNCE plus the
/// matching head's binary cross-entropy, either term removable by ablation.
inline ad::Value alignment_loss(model::Workspace& ws, const std::vector<PairExample>& batch,
                                const AlignmentOptions& opt, const AblationFlags& flags,
                                LossBreakdown* breakdown = nullptr) {
    if (batch.empty()) throw config_error("alignment_loss: empty batch");

    std::vector<model::CellSeq> cells;
    cells.reserve(batch.size());
    std::vector<ad::Value> cell_rows, text_rows;
    for (const PairExample& ex : batch) {
        cells.push_back(model::encode_cell(ws, ex.tokens));
        cell_rows.push_back(model::project_cell_to_text(ws, cells.back()).pooled);
        text_rows.push_back(model::embed_text(ws, ex.desc));
    }

    std::vector<std::uint64_t> ids;
    for (const PairExample& ex : batch) ids.push_back(ex.pair_id);

    ad::Value total = ws.g.constant_scalar(0.0);
    double info_val = 0.0, match_val = 0.0;
    if (!flags.no_infonce) {
        ad::Value cf = ad::concat_rows(cell_rows);
        ad::Value tf = ad::concat_rows(text_rows);
        // Short batches carry fewer negatives rather than being dropped.
        std::size_t n_neg = std::min(opt.num_negatives, batch.size() - 1);
        if (n_neg == 0) throw config_error("alignment_loss: batch of one cannot form negatives");
        ad::Value nce = info_nce(cf, tf, ids, opt.tau, n_neg, opt.seed);
        info_val = ws.g.val(nce).data[0];
        total = ad::add(total, nce);
    }
    if (!flags.no_match_ce) {
        std::vector<std::size_t> swap = sample_swap_partner(ids, opt.seed);
        std::vector<ad::Value> logits;
        std::vector<double> labels;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            logits.push_back(model::match_logit(ws, cells[i], batch[i].desc));
            labels.push_back(1.0);
            logits.push_back(model::match_logit(ws, cells[i], batch[swap[i]].desc));
            labels.push_back(0.0);
        }
        ad::Value mce = matching_ce(ad::concat_rows(logits), labels);
        match_val = ws.g.val(mce).data[0];
        total = ad::add(total, mce);
    }
    if (breakdown != nullptr) {
        breakdown->info_nce = info_val;
        breakdown->match_ce = match_val;
        breakdown->c2t = 0.0;
        breakdown->t2c = 0.0;
        breakdown->total = ws.g.val(total).data[0];
        breakdown->pair_count = batch.size();
        breakdown->token_count = 0;
    }
    return total;
}

enum class GenTask { c2t, t2c };

struct Stage2Item {
    PairExample example;
    GenTask task = GenTask::c2t;
};

/// Stage-2 generative loss: mean token-summed NLL over c2t-task items plus
/// mean gene-summed squared error over t2c-task items, equally weighted.
inline ad::Value stage2_loss(model::Workspace& ws, const std::vector<Stage2Item>& batch,
                             const AblationFlags& flags, LossBreakdown* breakdown = nullptr) {
    if (batch.empty()) throw config_error("stage2_loss: empty batch");
    std::vector<ad::Value> c2t_terms, t2c_terms;
    std::size_t tokens = 0;
    for (const Stage2Item& item : batch) {
        if (item.task == GenTask::c2t) {
            if (flags.no_c2t) continue;
            model::CellSeq cell = model::encode_cell(ws, item.example.tokens);
            model::CellFeatureV feat = model::project_cell_to_text(ws, cell);
            c2t_terms.push_back(c2t_loss(ws, feat.query_states, item.example.desc.tokens));
            tokens += item.example.desc.tokens.size();
        } else {
            if (flags.no_t2c) continue;
            ad::Value prompt = model::project_text_to_cell(ws, item.example.desc);
            ad::Value pseudo = model::predict_pseudo_cell(ws, prompt);
            t2c_terms.push_back(t2c_loss(pseudo, item.example.normalized_values));
        }
    }
    ad::Value total = ws.g.constant_scalar(0.0);
    double c2t_val = 0.0, t2c_val = 0.0;
    if (!c2t_terms.empty()) {
        ad::Value sum = c2t_terms[0];
        for (std::size_t i = 1; i < c2t_terms.size(); ++i) sum = ad::add(sum, c2t_terms[i]);
        ad::Value mean = ad::scale(sum, 1.0 / double(c2t_terms.size()));
        c2t_val = ws.g.val(mean).data[0];
        total = ad::add(total, mean);
    }
    if (!t2c_terms.empty()) {
        ad::Value sum = t2c_terms[0];
        for (std::size_t i = 1; i < t2c_terms.size(); ++i) sum = ad::add(sum, t2c_terms[i]);
        ad::Value mean = ad::scale(sum, 1.0 / double(t2c_terms.size()));
        t2c_val = ws.g.val(mean).data[0];
        total = ad::add(total, mean);
    }
    if (breakdown != nullptr) {
        breakdown->info_nce = 0.0;
        breakdown->match_ce = 0.0;
        breakdown->c2t = c2t_val;
        breakdown->t2c = t2c_val;
        breakdown->total = ws.g.val(total).data[0];
        breakdown->pair_count = batch.size();
        breakdown->token_count = tokens;
    }
    return total;
}

// ---------------------------------------------------------------------------
// Annotation scoring
// ---------------------------------------------------------------------------

/// Per-candidate combined losses and the induced ranking (ascending loss,
/// ties by candidate index).
struct AnnotationScore {
    std::vector<double> contrastive;
    std::vector<double> matching;
    std::vector<double> combined;
    std::vector<std::size_t> ranking;
    double lambda = 0.5;
};

/// Scores candidate descriptions for one cell: the contrastive term is the
/// softmax NLL of the candidate's cosine similarity over the candidate set,
/// the matching term is the binary CE of the match logit against "matched".
inline AnnotationScore annotation_score(const model::ParameterStore& store, const corpus::CellTokens& tokens,
                                        const std::vector<corpus::TextDescription>& candidates, double lambda,
                                        double tau) {
    if (candidates.empty()) throw config_error("annotation_score: no candidates");
    if (lambda < 0.0 || lambda > 1.0) throw config_error("annotation_score: lambda must lie in [0,1]");
    if (tau <= 0.0) throw config_error("annotation_score: temperature must be positive");

    model::Workspace ws(store);
    model::CellSeq cell = model::encode_cell(ws, tokens);
    model::CellFeatureV feat = model::project_cell_to_text(ws, cell);
    Tensor pooled = ws.g.val(feat.pooled);

    AnnotationScore out;
    out.lambda = lambda;
    std::vector<double> sims;
    for (const corpus::TextDescription& cand : candidates) {
        Tensor h = ws.g.val(model::embed_text(ws, cand));
        sims.push_back(dot(pooled.data, h.data) / tau);
        double z = ws.g.val(model::match_logit(ws, cell, cand)).data[0];
        // -ln sigmoid(z) = softplus(-z)
        out.matching.push_back(std::max(-z, 0.0) + std::log1p(std::exp(-std::fabs(z))));
    }
    double mx = sims[0];
    for (double s : sims) mx = std::max(mx, s);
    double lse = 0.0;
    for (double s : sims) lse += std::exp(s - mx);
    lse = mx + std::log(lse);
    for (double s : sims) out.contrastive.push_back(lse - s);

    for (std::size_t k = 0; k < candidates.size(); ++k)
        out.combined.push_back(lambda * out.contrastive[k] + (1.0 - lambda) * out.matching[k]);

    out.ranking.resize(candidates.size());
    for (std::size_t k = 0; k < candidates.size(); ++k) out.ranking[k] = k;
    std::stable_sort(out.ranking.begin(), out.ranking.end(), [&](std::size_t a, std::size_t b) {
        if (out.combined[a] != out.combined[b]) return out.combined[a] < out.combined[b];
        return a < b;
    });
    return out;
}

} // namespace scmm::objectives
