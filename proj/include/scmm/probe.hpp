#pragma once

#include "scmm/autodiff.hpp"
#include "scmm/corpus.hpp"
#include "scmm/metrics.hpp"

namespace scmm::probe {

/// Two identically configured feed-forward classifiers trained on the same
/// schedule: one reads the full normalized expression vector, the other only
/// a rank-order indicator of the most expressed genes (values discarded).
struct ProbeConfig {
    std::size_t hidden_dim = 64;
    std::size_t steps = 300;
    std::size_t batch_size = 16;
    double lr = 1e-2;
    double weight_decay = 1e-4;
    std::size_t sentence_len = 100; // top-gene count of the rank-only input
    std::uint64_t seed = 7;
};

struct ProbeReport {
    double value_train_accuracy = 0.0;
    double value_test_accuracy = 0.0;
    double rank_train_accuracy = 0.0;
    double rank_test_accuracy = 0.0;
    double gap = 0.0; // value minus rank, test split, in accuracy points
    bool value_signal_corpus = false;
    std::map<std::string, double> value_per_type; // test accuracy per type
    std::map<std::string, double> rank_per_type;
};

namespace detail {

struct Mlp {
    Tensor w1, b1, w2, b2;

    static Mlp init(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed) {
        Mlp m;
        auto randn = [&](Tensor& t, std::size_t rows, std::size_t cols, std::uint64_t salt) {
            rng::Stream s(rng::mix(seed, salt));
            t = Tensor(rows, cols);
            double scale = 1.0 / std::sqrt(double(rows));
            for (double& v : t.data) v = s.normal() * scale;
        };
        randn(m.w1, in, hidden, 1);
        m.b1 = Tensor(1, hidden, 0.0);
        randn(m.w2, hidden, out, 2);
        m.b2 = Tensor(1, out, 0.0);
        return m;
    }

    ad::Value logits(ad::Graph& g, ad::Value x, std::array<ad::Value, 4>& leaves) const {
        ad::Value h = ad::gelu(ad::add_rowvec(ad::matmul(x, leaves[0]), leaves[1]));
        return ad::add_rowvec(ad::matmul(h, leaves[2]), leaves[3]);
    }
};

inline Tensor feature_matrix(const metrics::Points& feats, const std::vector<std::size_t>& rows) {
    Tensor t(rows.size(), feats[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < feats[rows[i]].size(); ++j) t.at(i, j) = feats[rows[i]][j];
    return t;
}

// Plain Adam over the four tensors; identical schedule for both probes.
struct MlpTrainer {
    Mlp net;
    std::array<Tensor, 4> m, v;
    std::size_t t = 0;

    explicit MlpTrainer(Mlp n) : net(std::move(n)) {
        Tensor* ws[4] = {&net.w1, &net.b1, &net.w2, &net.b2};
        for (int i = 0; i < 4; ++i) {
            m[std::size_t(i)] = Tensor(ws[i]->rows, ws[i]->cols, 0.0);
            v[std::size_t(i)] = Tensor(ws[i]->rows, ws[i]->cols, 0.0);
        }
    }

    void step(const Tensor& x, const std::vector<std::size_t>& targets, const ProbeConfig& cfg) {
        ad::Graph g;
        std::array<ad::Value, 4> leaves{g.leaf(net.w1, true), g.leaf(net.b1, true), g.leaf(net.w2, true),
                                        g.leaf(net.b2, true)};
        ad::Value logits = net.logits(g, g.constant(x), leaves);
        ad::Value loss = ad::scale(ad::nll_rows(logits, targets), 1.0 / double(targets.size()));
        g.backward(loss);
        ++t;
        double bc1 = 1.0 - std::pow(0.9, double(t));
        double bc2 = 1.0 - std::pow(0.999, double(t));
        Tensor* ws[4] = {&net.w1, &net.b1, &net.w2, &net.b2};
        for (int i = 0; i < 4; ++i) {
            Tensor grad = g.grad(leaves[std::size_t(i)]);
            Tensor& mt = m[std::size_t(i)];
            Tensor& vt = v[std::size_t(i)];
            for (std::size_t j = 0; j < grad.size(); ++j) {
                mt.data[j] = 0.9 * mt.data[j] + 0.1 * grad.data[j];
                vt.data[j] = 0.999 * vt.data[j] + 0.001 * grad.data[j] * grad.data[j];
                double update = (mt.data[j] / bc1) / (std::sqrt(vt.data[j] / bc2) + 1e-8);
                ws[i]->data[j] -= cfg.lr * (update + cfg.weight_decay * ws[i]->data[j]);
            }
        }
    }

    std::vector<std::size_t> predict(const Tensor& x) {
        ad::Graph g;
        std::array<ad::Value, 4> leaves{g.leaf(net.w1, false), g.leaf(net.b1, false), g.leaf(net.w2, false),
                                        g.leaf(net.b2, false)};
        const Tensor& logits = g.val(net.logits(g, g.constant(x), leaves));
        std::vector<std::size_t> out;
        for (std::size_t r = 0; r < logits.rows; ++r) {
            const double* row = logits.row_ptr(r);
            std::size_t best = 0;
            for (std::size_t c = 1; c < logits.cols; ++c)
                if (row[c] > row[best]) best = c;
            out.push_back(best);
        }
        return out;
    }
};

inline double accuracy_of(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth) {
    double hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i] ? 1 : 0;
    return hit / double(pred.size());
}

struct ProbeRun {
    double train_acc = 0, test_acc = 0;
    std::map<std::string, double> per_type;
};

inline ProbeRun train_probe(const metrics::Points& feats, const std::vector<std::size_t>& targets,
                            const std::vector<std::string>& type_names, const std::vector<std::size_t>& train,
                            const std::vector<std::size_t>& test, std::size_t num_types,
                            const ProbeConfig& cfg) {
    MlpTrainer trainer(Mlp::init(feats[0].size(), cfg.hidden_dim, num_types, cfg.seed));
    std::size_t n = train.size();
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
        std::size_t epoch = (step - 1) / steps_per_epoch;
        std::size_t within = (step - 1) % steps_per_epoch;
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        rng::Stream s(rng::mix(cfg.seed, 0x9106eu, epoch));
        s.shuffle(order);
        std::size_t lo = within * cfg.batch_size, hi = std::min(lo + cfg.batch_size, n);
        std::vector<std::size_t> rows, batch_targets;
        for (std::size_t i = lo; i < hi; ++i) {
            rows.push_back(train[order[i]]);
            batch_targets.push_back(targets[train[order[i]]]);
        }
        trainer.step(feature_matrix(feats, rows), batch_targets, cfg);
    }

    ProbeRun out;
    auto evaluate = [&](const std::vector<std::size_t>& split, double& acc, bool per_type) {
        std::vector<std::size_t> truth;
        for (std::size_t i : split) truth.push_back(targets[i]);
        std::vector<std::size_t> pred = trainer.predict(feature_matrix(feats, split));
        acc = accuracy_of(pred, truth);
        if (per_type) {
            std::map<std::string, double> hits, totals;
            for (std::size_t i = 0; i < split.size(); ++i) {
                const std::string& ty = type_names[split[i]];
                totals[ty] += 1;
                if (pred[i] == truth[i]) hits[ty] += 1;
            }
            for (const auto& [ty, tot] : totals) out.per_type[ty] = hits[ty] / tot;
        }
    };
    evaluate(train, out.train_acc, false);
    evaluate(test, out.test_acc, true);
    return out;
}

} // namespace detail

/// Trains the value probe and the rank-sentence probe with identical
/// hyperparameters and reports both accuracies and their gap.
inline ProbeReport run_probe(const corpus::Corpus& c, const corpus::CorpusSplit& split, const ProbeConfig& cfg,
                             bool value_signal_corpus) {
    if (split.train.empty() || split.test.empty()) throw config_error("probe: needs non-empty train and test splits");

    std::vector<std::string> type_names;
    std::map<std::string, std::size_t> type_index;
    for (const std::string& t : c.type_labels())
        type_index.emplace(t, type_index.size());
    std::vector<std::size_t> targets;
    metrics::Points value_feats, rank_feats;
    for (std::size_t i = 0; i < c.num_cells(); ++i) {
        corpus::NormalizedCell norm = corpus::normalized(c, i);
        corpus::CellTokens sent = corpus::tokenize_cell(norm, cfg.sentence_len);
        std::vector<double> indicator(c.num_genes(), 0.0);
        for (std::size_t p = 0; p < sent.capacity(); ++p)
            if (sent.mask[p]) indicator[sent.gene_indices[p]] = 1.0;
        value_feats.push_back(std::move(norm.values));
        rank_feats.push_back(std::move(indicator));
        targets.push_back(type_index.at(c.records[i].cell_type));
        type_names.push_back(c.records[i].cell_type);
    }

    ProbeReport rep;
    rep.value_signal_corpus = value_signal_corpus;
    detail::ProbeRun value_run =
        detail::train_probe(value_feats, targets, type_names, split.train, split.test, type_index.size(), cfg);
    detail::ProbeRun rank_run =
        detail::train_probe(rank_feats, targets, type_names, split.train, split.test, type_index.size(), cfg);
    rep.value_train_accuracy = value_run.train_acc;
    rep.value_test_accuracy = value_run.test_acc;
    rep.rank_train_accuracy = rank_run.train_acc;
    rep.rank_test_accuracy = rank_run.test_acc;
    rep.value_per_type = std::move(value_run.per_type);
    rep.rank_per_type = std::move(rank_run.per_type);
    rep.gap = (rep.value_test_accuracy - rep.rank_test_accuracy) * 100.0;
    return rep;
}

inline void write_probe_report_csv(const std::string& path, const ProbeReport& r) {
    std::string out = "input,split,accuracy\n";
    out += "value,train," + fmt_g9(r.value_train_accuracy) + "\n";
    out += "value,test," + fmt_g9(r.value_test_accuracy) + "\n";
    out += "rank_sentence,train," + fmt_g9(r.rank_train_accuracy) + "\n";
    out += "rank_sentence,test," + fmt_g9(r.rank_test_accuracy) + "\n";
    out += "gap_points,test," + fmt_g9(r.gap) + "\n";
    for (const auto& [type, acc] : r.value_per_type) out += "value_type:" + type + ",test," + fmt_g9(acc) + "\n";
    for (const auto& [type, acc] : r.rank_per_type)
        out += "rank_type:" + type + ",test," + fmt_g9(acc) + "\n";
    write_file(path, out);
}

} // namespace scmm::probe
