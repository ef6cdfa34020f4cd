#pragma once

#include <iostream>

#include "scmm/metrics.hpp"
#include "scmm/objectives.hpp"

namespace scmm::inference {

/// Candidate description for one type label.
struct Candidate {
    std::string type_label;
    corpus::TextDescription desc;
};

/// Builds one candidate per type label over the task's label set.
inline std::vector<Candidate> candidates_for_types(const std::vector<std::string>& types,
                                                   const corpus::Corpus& c,
                                                   const corpus::TextTokenizer& tokenizer,
                                                   corpus::TextSource source) {
    std::map<std::string, const corpus::CellRecord*> rep;
    for (const corpus::CellRecord& r : c.records)
        if (!rep.count(r.cell_type)) rep[r.cell_type] = &r;
    std::vector<Candidate> out;
    for (const std::string& t : types) {
        auto it = rep.find(t);
        if (it == rep.end()) throw data_error("no cell record carries type '" + t + "'");
        out.push_back({t, corpus::render_description(*it->second, c.ontology, source, tokenizer)});
    }
    return out;
}

struct AnnotationResult {
    std::string predicted_type;
    std::vector<std::string> ranking;    // all candidate labels, best first
    std::vector<double> ranked_losses;   // combined losses aligned with ranking
    double lambda = 0.5;

    std::size_t rank_of(const std::string& label) const {
        for (std::size_t i = 0; i < ranking.size(); ++i)
            if (ranking[i] == label) return i + 1;
        throw data_error("label '" + label + "' is not among the candidates");
    }
};

/// Zero-shot annotation: ranks candidate type descriptions by the λ-combined
/// contrastive + matching loss.
inline AnnotationResult annotate(const model::ParameterStore& store, const corpus::CellTokens& tokens,
                                 const std::vector<Candidate>& candidates, double lambda, double tau = 0.07) {
    if (candidates.empty()) throw config_error("annotate: no candidates");
    std::set<std::string> labels;
    for (const Candidate& c : candidates)
        if (!labels.insert(c.type_label).second)
            throw config_error("annotate: duplicate candidate type '" + c.type_label + "'");
    std::vector<corpus::TextDescription> descs;
    for (const Candidate& c : candidates) descs.push_back(c.desc);
    objectives::AnnotationScore score = objectives::annotation_score(store, tokens, descs, lambda, tau);
    AnnotationResult out;
    out.lambda = lambda;
    for (std::size_t r : score.ranking) {
        out.ranking.push_back(candidates[r].type_label);
        out.ranked_losses.push_back(score.combined[r]);
    }
    out.predicted_type = out.ranking.front();
    return out;
}

// ---------------------------------------------------------------------------
// Embedding extraction
// ---------------------------------------------------------------------------

struct EmbeddingTable {
    std::vector<std::string> cell_ids;
    metrics::Points rows;
    std::size_t dim = 0;
};

/// Cell-encoder summary states (no projector), one row per input cell.
inline EmbeddingTable extract_embeddings(const model::ParameterStore& store, const corpus::Corpus& c,
                                         const std::vector<std::size_t>& indices) {
    EmbeddingTable table;
    table.dim = store.config.gene_embed_dim;
    for (std::size_t idx : indices) {
        model::Workspace ws(store);
        corpus::CellTokens tokens = corpus::cell_tokens(c, idx, store.config.max_cell_tokens);
        model::CellSeq seq = model::encode_cell(ws, tokens);
        Tensor summary = ws.g.val(ad::slice_rows(seq.states, 0, 1));
        table.cell_ids.push_back(c.matrix.cell_ids[idx]);
        table.rows.push_back(summary.data);
    }
    return table;
}

// ---------------------------------------------------------------------------
// Captioning
// ---------------------------------------------------------------------------

/// Greedy (default) caption for one cell: encode, project, generate.
inline corpus::TextDescription caption(const model::ParameterStore& store, const corpus::TextTokenizer& tokenizer,
                                       const corpus::CellTokens& tokens, const model::GenerateOptions& opt) {
    model::Workspace ws(store);
    model::CellSeq seq = model::encode_cell(ws, tokens);
    model::CellFeatureV feat = model::project_cell_to_text(ws, seq);
    Tensor qs = ws.g.val(feat.query_states);
    return model::generate_text(store, qs, tokenizer, opt);
}

/// The metadata template makes the type span unambiguous: everything between
/// "This is a/an " and " from". Returns an empty string when the caption does
/// not follow the template.
inline std::string extract_type_from_caption(const std::string& raw) {
    const std::string prefix_an = "This is an ", prefix_a = "This is a ";
    std::size_t start;
    if (raw.rfind(prefix_an, 0) == 0)
        start = prefix_an.size();
    else if (raw.rfind(prefix_a, 0) == 0)
        start = prefix_a.size();
    else
        return "";
    std::size_t end = raw.find(" from ", start);
    if (end == std::string::npos) return "";
    return raw.substr(start, end - start);
}

// ---------------------------------------------------------------------------
// Pseudo-cell generation
// ---------------------------------------------------------------------------

/// n pseudo-cells conditioned on one description. Samples diversify through
/// seeded Gaussian prompt-space noise; noise_scale 0 yields n identical cells.
inline metrics::Points generate_pseudo_cells(const model::ParameterStore& store,
                                             const corpus::TextDescription& desc, std::size_t n,
                                             double noise_scale, std::uint64_t seed) {
    if (n == 0) throw config_error("generate_pseudo_cells: n must be positive");
    model::Workspace base(store);
    Tensor prompt = base.g.val(model::project_text_to_cell(base, desc));

    metrics::Points out;
    for (std::size_t s = 0; s < n; ++s) {
        Tensor noisy = prompt;
        if (noise_scale != 0.0) {
            rng::Stream stream(rng::mix(seed, 0x9ce1u, s));
            for (double& v : noisy.data) v += noise_scale * stream.normal();
        }
        model::Workspace ws(store);
        ad::Value pred = model::predict_pseudo_cell(ws, ws.g.constant(noisy));
        out.push_back(ws.g.val(pred).data);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Lambda sweep
// ---------------------------------------------------------------------------

struct LambdaSweepRow {
    double lambda = 0.0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
};

/// The published sweep grid.
inline std::vector<double> default_lambda_grid() {
    return {0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 1.0};
}

/// Annotation accuracy and macro F1 at each λ of the grid (deduplicated, with
/// a warning on duplicates).
inline std::vector<LambdaSweepRow> lambda_sweep(const model::ParameterStore& store,
                                                const std::vector<corpus::CellTokens>& cells,
                                                const std::vector<std::string>& true_labels,
                                                const std::vector<Candidate>& candidates,
                                                const std::vector<double>& grid, double tau = 0.07) {
    if (cells.size() != true_labels.size()) throw data_error("lambda_sweep: labels misaligned");
    if (cells.empty()) throw data_error("lambda_sweep: no cells");
    std::vector<double> lambdas;
    for (double l : grid) {
        if (std::find(lambdas.begin(), lambdas.end(), l) != lambdas.end()) {
            std::cerr << "lambda_sweep: duplicate grid value " << fmt_g9(l) << " ignored\n";
            continue;
        }
        lambdas.push_back(l);
    }
    std::vector<LambdaSweepRow> rows;
    for (double l : lambdas) {
        std::vector<std::string> predicted;
        for (const corpus::CellTokens& t : cells) predicted.push_back(annotate(store, t, candidates, l, tau).predicted_type);
        LambdaSweepRow row;
        row.lambda = l;
        row.accuracy = metrics::label_accuracy(true_labels, predicted);
        row.macro_f1 = metrics::macro_f1(true_labels, predicted);
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Result file writers
// ---------------------------------------------------------------------------

inline void write_embeddings_tsv(const std::string& path, const EmbeddingTable& table) {
    std::string out = "cell_id";
    for (std::size_t d = 0; d < table.dim; ++d) out += "\tv" + std::to_string(d + 1);
    out += "\n";
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        out += table.cell_ids[i];
        for (double v : table.rows[i]) out += "\t" + fmt_g9(v);
        out += "\n";
    }
    write_file(path, out);
}

struct AnnotationRow {
    std::string cell_id;
    std::string predicted;
    std::string truth;
    std::size_t rank_of_true = 0;
    double combined_loss_best = 0.0;
};

inline void write_annotations_tsv(const std::string& path, const std::vector<AnnotationRow>& rows) {
    std::string out = "cell_id\tpredicted\ttrue\trank_of_true\tcombined_loss_best\n";
    for (const AnnotationRow& r : rows)
        out += r.cell_id + "\t" + r.predicted + "\t" + r.truth + "\t" + std::to_string(r.rank_of_true) + "\t" +
               fmt_g9(r.combined_loss_best) + "\n";
    write_file(path, out);
}

inline void write_pseudo_cells_tsv(const std::string& path, const std::vector<std::string>& types,
                                   const metrics::Points& cells) {
    if (types.size() != cells.size()) throw data_error("write_pseudo_cells_tsv: misaligned inputs");
    std::string out = "sample_id\ttype";
    if (!cells.empty())
        for (std::size_t d = 0; d < cells[0].size(); ++d) out += "\tv" + std::to_string(d + 1);
    out += "\n";
    for (std::size_t i = 0; i < cells.size(); ++i) {
        out += "s" + std::to_string(i) + "\t" + types[i];
        for (double v : cells[i]) out += "\t" + fmt_g9(v);
        out += "\n";
    }
    write_file(path, out);
}

inline void write_lambda_sweep_csv(const std::string& path, const std::vector<LambdaSweepRow>& rows) {
    std::string out = "lambda,accuracy,macro_f1\n";
    for (const LambdaSweepRow& r : rows)
        out += fmt_g9(r.lambda) + "," + fmt_g9(r.accuracy) + "," + fmt_g9(r.macro_f1) + "\n";
    write_file(path, out);
}

inline void write_confusion_csv(const std::string& path, const std::vector<std::string>& truth,
                                const std::vector<std::string>& predicted) {
    std::vector<std::string> labels;
    metrics::label_ids(truth, &labels);
    std::map<std::string, std::map<std::string, std::size_t>> counts;
    for (std::size_t i = 0; i < truth.size(); ++i) counts[truth[i]][predicted[i]] += 1;
    std::string out = "true_type";
    for (const std::string& l : labels) out += "," + l;
    out += "\n";
    for (const std::string& t : labels) {
        out += t;
        for (const std::string& p : labels) out += "," + std::to_string(counts[t][p]);
        out += "\n";
    }
    write_file(path, out);
}

inline void write_clustering_report_csv(const std::string& path, const metrics::ClusteringReport& r) {
    std::string out = "nmi_cell,ari_cell,asw_cell,avg_bio,asw_batch,graph_conn,avg_batch\n";
    out += fmt_g9(r.nmi_cell) + "," + fmt_g9(r.ari_cell) + "," + fmt_g9(r.asw_cell) + "," + fmt_g9(r.avg_bio) +
           "," + fmt_g9(r.asw_batch) + "," + fmt_g9(r.graph_conn) + "," + fmt_g9(r.avg_batch) + "\n";
    write_file(path, out);
}

inline void write_text_report_csv(const std::string& path, const metrics::TextReport& r) {
    std::string out = "bleu2,rouge2,meteor,mmd,emd,type_accuracy,type_macro_f1\n";
    out += fmt_g9(r.bleu2) + "," + fmt_g9(r.rouge2) + "," + fmt_g9(r.meteor) + "," + fmt_g9(r.mmd) + "," +
           fmt_g9(r.emd) + "," + fmt_g9(r.type_accuracy) + "," + fmt_g9(r.type_macro_f1) + "\n";
    write_file(path, out);
}

inline void write_knn_gen_csv(const std::string& path, const std::map<std::size_t, double>& acc) {
    std::string header, row;
    for (const auto& [k, a] : acc) {
        if (!header.empty()) {
            header += ",";
            row += ",";
        }
        header += "k" + std::to_string(k);
        row += fmt_g9(a);
    }
    write_file(path, header + "\n" + row + "\n");
}

} // namespace scmm::inference
