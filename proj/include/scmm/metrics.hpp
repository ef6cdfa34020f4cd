#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "scmm/common.hpp"
#include "scmm/tensor.hpp"

namespace scmm::metrics {

using Points = std::vector<std::vector<double>>;

// ---------------------------------------------------------------------------
// Label utilities
// ---------------------------------------------------------------------------

/// Maps string labels onto dense ids in sorted label order.
inline std::vector<int> label_ids(const std::vector<std::string>& labels, std::vector<std::string>* universe = nullptr) {
    std::set<std::string> uniq(labels.begin(), labels.end());
    std::vector<std::string> sorted(uniq.begin(), uniq.end());
    std::map<std::string, int> index;
    for (std::size_t i = 0; i < sorted.size(); ++i) index[sorted[i]] = int(i);
    std::vector<int> out;
    out.reserve(labels.size());
    for (const std::string& l : labels) out.push_back(index[l]);
    if (universe != nullptr) *universe = std::move(sorted);
    return out;
}

inline std::size_t num_distinct(const std::vector<int>& ids) {
    return std::set<int>(ids.begin(), ids.end()).size();
}

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

struct ClassificationReport {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::map<std::size_t, double> acc_at; // top-N accuracy per requested N
};

/// Macro F1 with the absent-class convention: classes present in the true
/// labels but never predicted (or never correct) contribute F1 = 0; classes
/// only ever predicted are ignored by the mean.
inline double macro_f1(const std::vector<std::string>& truth, const std::vector<std::string>& predicted) {
    if (truth.size() != predicted.size()) throw data_error("macro_f1: length mismatch");
    std::set<std::string> classes(truth.begin(), truth.end());
    std::map<std::string, double> tp, fp, fn;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (predicted[i] == truth[i])
            tp[truth[i]] += 1;
        else {
            fn[truth[i]] += 1;
            fp[predicted[i]] += 1;
        }
    }
    double sum = 0.0;
    for (const std::string& c : classes) {
        double p_den = tp[c] + fp[c], r_den = tp[c] + fn[c];
        double prec = p_den > 0 ? tp[c] / p_den : 0.0;
        double rec = r_den > 0 ? tp[c] / r_den : 0.0;
        sum += (prec + rec) > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    }
    return sum / double(classes.size());
}

inline double label_accuracy(const std::vector<std::string>& truth, const std::vector<std::string>& predicted) {
    if (truth.size() != predicted.size()) throw data_error("label_accuracy: length mismatch");
    if (truth.empty()) throw data_error("label_accuracy: empty input");
    double hit = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i] ? 1.0 : 0.0;
    return hit / double(truth.size());
}

/// Accuracy, macro F1 and Acc@N from full candidate rankings (best first).
/// Every ranking must be a permutation of one candidate set covering all true
/// labels.
inline ClassificationReport classification_metrics(const std::vector<std::string>& truth,
                                                   const std::vector<std::vector<std::string>>& rankings,
                                                   const std::vector<std::size_t>& top_ns) {
    if (truth.size() != rankings.size()) throw data_error("classification_metrics: length mismatch");
    if (truth.empty()) throw data_error("classification_metrics: empty input");
    std::set<std::string> universe(rankings[0].begin(), rankings[0].end());
    for (const auto& r : rankings) {
        if (std::set<std::string>(r.begin(), r.end()) != universe || r.size() != universe.size())
            throw data_error("classification_metrics: rankings disagree on the candidate set");
    }
    for (const std::string& t : truth)
        if (universe.count(t) == 0)
            throw data_error("classification_metrics: true label '" + t + "' missing from rankings");

    ClassificationReport rep;
    std::vector<std::string> top1;
    for (const auto& r : rankings) top1.push_back(r[0]);
    rep.accuracy = label_accuracy(truth, top1);
    rep.macro_f1 = macro_f1(truth, top1);
    for (std::size_t n : top_ns) {
        double hit = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            std::size_t depth = std::min(n, rankings[i].size());
            for (std::size_t k = 0; k < depth; ++k)
                if (rankings[i][k] == truth[i]) {
                    hit += 1;
                    break;
                }
        }
        rep.acc_at[n] = hit / double(truth.size());
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Clustering machinery
// ---------------------------------------------------------------------------

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

} // namespace detail

/// Seeded k-means++ with Lloyd iterations; assignment ties and empty-cluster
/// repairs resolve by lowest index, so runs are reproducible.
inline std::vector<int> kmeans(const Points& points, std::size_t k, std::uint64_t seed,
                               std::size_t max_iters = 100) {
    if (k == 0) throw config_error("kmeans: k must be positive");
    if (points.size() < k)
        throw config_error("kmeans: fewer points (" + std::to_string(points.size()) + ") than clusters (" +
                           std::to_string(k) + ")");
    rng::Stream s(rng::mix(seed, 0x4aeau));
    std::size_t n = points.size();

    std::vector<std::vector<double>> centers;
    centers.push_back(points[std::size_t(s.uniform_int(n))]);
    std::vector<double> d2(n);
    while (centers.size() < k) {
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = detail::sq_dist(points[i], centers[0]);
            for (std::size_t c = 1; c < centers.size(); ++c)
                best = std::min(best, detail::sq_dist(points[i], centers[c]));
            d2[i] = best;
            total += best;
        }
        std::size_t pick = 0;
        if (total > 0) {
            double u = s.uniform() * total, acc = 0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (u < acc) {
                    pick = i;
                    break;
                }
                if (i == n - 1) pick = i;
            }
        } else {
            pick = std::size_t(s.uniform_int(n));
        }
        centers.push_back(points[pick]);
    }

    std::vector<int> assign(n, 0);
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double bd = detail::sq_dist(points[i], centers[0]);
            for (std::size_t c = 1; c < k; ++c) {
                double d = detail::sq_dist(points[i], centers[c]);
                if (d < bd) {
                    bd = d;
                    best = int(c);
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        std::vector<std::vector<double>> sums(k, std::vector<double>(points[0].size(), 0.0));
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            counts[std::size_t(assign[i])] += 1;
            for (std::size_t dch = 0; dch < points[i].size(); ++dch) sums[std::size_t(assign[i])][dch] += points[i][dch];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                // Repair: steal the point farthest from its center.
                std::size_t far = 0;
                double fd = -1;
                for (std::size_t i = 0; i < n; ++i) {
                    double d = detail::sq_dist(points[i], centers[std::size_t(assign[i])]);
                    if (d > fd) {
                        fd = d;
                        far = i;
                    }
                }
                assign[far] = int(c);
                centers[c] = points[far];
                changed = true;
            } else {
                for (std::size_t dch = 0; dch < sums[c].size(); ++dch) centers[c][dch] = sums[c][dch] / double(counts[c]);
            }
        }
        if (!changed && iter > 0) break;
    }
    return assign;
}

/// Normalized mutual information with arithmetic-mean normalization.
inline double nmi(const std::vector<int>& u, const std::vector<int>& v) {
    if (u.size() != v.size() || u.empty()) throw data_error("nmi: label vectors misaligned");
    double n = double(u.size());
    std::map<int, double> cu, cv;
    std::map<std::pair<int, int>, double> joint;
    for (std::size_t i = 0; i < u.size(); ++i) {
        cu[u[i]] += 1;
        cv[v[i]] += 1;
        joint[{u[i], v[i]}] += 1;
    }
    double hu = 0, hv = 0;
    for (const auto& [key, c] : cu) hu -= (c / n) * std::log(c / n);
    for (const auto& [key, c] : cv) hv -= (c / n) * std::log(c / n);
    if (hu + hv == 0.0) return 1.0; // both partitions trivial, hence identical
    double mi = 0;
    for (const auto& [key, c] : joint) {
        double pij = c / n;
        mi += pij * std::log(pij / ((cu[key.first] / n) * (cv[key.second] / n)));
    }
    return std::max(0.0, std::min(1.0, mi / (0.5 * (hu + hv))));
}

/// Adjusted Rand index under the permutation model.
inline double ari(const std::vector<int>& u, const std::vector<int>& v) {
    if (u.size() != v.size() || u.empty()) throw data_error("ari: label vectors misaligned");
    std::map<int, double> cu, cv;
    std::map<std::pair<int, int>, double> joint;
    for (std::size_t i = 0; i < u.size(); ++i) {
        cu[u[i]] += 1;
        cv[v[i]] += 1;
        joint[{u[i], v[i]}] += 1;
    }
    auto choose2 = [](double x) { return x * (x - 1) / 2.0; };
    double sum_ij = 0, sum_u = 0, sum_v = 0;
    for (const auto& [key, c] : joint) sum_ij += choose2(c);
    for (const auto& [key, c] : cu) sum_u += choose2(c);
    for (const auto& [key, c] : cv) sum_v += choose2(c);
    double total = choose2(double(u.size()));
    double expected = sum_u * sum_v / total;
    double maximum = 0.5 * (sum_u + sum_v);
    if (maximum == expected) return 1.0; // degenerate: identical trivial partitions
    return (sum_ij - expected) / (maximum - expected);
}

/// Per-point silhouette coefficients; singleton clusters score 0.
inline std::vector<double> silhouette_values(const Points& points, const std::vector<int>& labels) {
    if (points.size() != labels.size() || points.empty()) throw data_error("silhouette: input misaligned");
    std::size_t n = points.size();
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) groups[labels[i]].push_back(i);
    std::vector<double> out(n, 0.0);
    if (groups.size() < 2) return out;
    for (std::size_t i = 0; i < n; ++i) {
        double a = 0;
        std::size_t own = groups[labels[i]].size();
        if (own <= 1) {
            out[i] = 0.0;
            continue;
        }
        for (std::size_t j : groups[labels[i]])
            if (j != i) a += std::sqrt(detail::sq_dist(points[i], points[j]));
        a /= double(own - 1);
        double b = 1e300;
        for (const auto& [lab, members] : groups) {
            if (lab == labels[i]) continue;
            double m = 0;
            for (std::size_t j : members) m += std::sqrt(detail::sq_dist(points[i], points[j]));
            b = std::min(b, m / double(members.size()));
        }
        double denom = std::max(a, b);
        out[i] = denom > 0 ? (b - a) / denom : 0.0;
    }
    return out;
}

/// Type-conservation silhouette rescaled to [0, 1].
inline double asw_cell(const Points& points, const std::vector<int>& type_labels) {
    std::vector<double> s = silhouette_values(points, type_labels);
    double mean = 0;
    for (double v : s) mean += v;
    mean /= double(s.size());
    return (mean + 1.0) / 2.0;
}

/// Batch-mixing score: mean over types of mean(1 - |silhouette w.r.t. batch
/// labels within the type|). A type with a single batch is vacuously mixed.
inline double asw_batch(const Points& points, const std::vector<int>& type_labels,
                        const std::vector<int>& batch_labels) {
    if (points.size() != type_labels.size() || points.size() != batch_labels.size())
        throw data_error("asw_batch: input misaligned");
    std::map<int, std::vector<std::size_t>> types;
    for (std::size_t i = 0; i < points.size(); ++i) types[type_labels[i]].push_back(i);
    double total = 0;
    for (const auto& [t, members] : types) {
        Points sub;
        std::vector<int> sub_batches;
        for (std::size_t i : members) {
            sub.push_back(points[i]);
            sub_batches.push_back(batch_labels[i]);
        }
        std::vector<double> s = silhouette_values(sub, sub_batches);
        double score = 0;
        for (double v : s) score += 1.0 - std::fabs(v);
        total += score / double(s.size());
    }
    return total / double(types.size());
}

/// Mutual-kNN adjacency (Euclidean, ties by index).
inline std::vector<std::vector<std::size_t>> mutual_knn_graph(const Points& points, std::size_t k) {
    std::size_t n = points.size();
    k = std::min(k, n >= 1 ? n - 1 : 0);
    std::vector<std::set<std::size_t>> nbrs(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::pair<double, std::size_t>> ds;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) ds.emplace_back(detail::sq_dist(points[i], points[j]), j);
        std::sort(ds.begin(), ds.end());
        for (std::size_t t = 0; t < k && t < ds.size(); ++t) nbrs[i].insert(ds[t].second);
    }
    std::vector<std::vector<std::size_t>> adj(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j : nbrs[i])
            if (j > i && nbrs[j].count(i)) {
                adj[i].push_back(j);
                adj[j].push_back(i);
            }
    return adj;
}

/// Mean over labels of (largest connected component fraction) within each
/// label's induced subgraph of the mutual-kNN graph.
inline double graph_connectivity(const Points& points, const std::vector<int>& labels, std::size_t knn_k) {
    if (points.size() != labels.size() || points.empty()) throw data_error("graph_connectivity: input misaligned");
    auto adj = mutual_knn_graph(points, knn_k);
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
    double total = 0;
    for (const auto& [lab, members] : groups) {
        std::map<std::size_t, std::size_t> local;
        for (std::size_t i = 0; i < members.size(); ++i) local[members[i]] = i;
        std::vector<int> comp(members.size(), -1);
        int ncomp = 0;
        std::vector<std::size_t> largest_count;
        for (std::size_t s = 0; s < members.size(); ++s) {
            if (comp[s] != -1) continue;
            std::vector<std::size_t> stack{s};
            comp[s] = ncomp;
            std::size_t size = 0;
            while (!stack.empty()) {
                std::size_t cur = stack.back();
                stack.pop_back();
                ++size;
                for (std::size_t nb : adj[members[cur]]) {
                    auto it = local.find(nb);
                    if (it != local.end() && comp[it->second] == -1) {
                        comp[it->second] = ncomp;
                        stack.push_back(it->second);
                    }
                }
            }
            largest_count.push_back(size);
            ++ncomp;
        }
        total += double(*std::max_element(largest_count.begin(), largest_count.end())) / double(members.size());
    }
    return total / double(groups.size());
}

struct ClusteringReport {
    double nmi_cell = 0, ari_cell = 0, asw_cell = 0, avg_bio = 0;
    double asw_batch = 0, graph_conn = 0, avg_batch = 0;
};

struct ClusteringOptions {
    std::size_t knn_k = 15;
    std::uint64_t seed = 0;
};

/// Full clustering/integration report: predicted clusters come from seeded
/// k-means with k equal to the number of true types.
inline ClusteringReport clustering_report(const Points& embeddings, const std::vector<std::string>& type_labels,
                                          const std::vector<std::string>& batch_labels,
                                          const ClusteringOptions& opt = {}) {
    if (embeddings.size() != type_labels.size() || embeddings.size() != batch_labels.size())
        throw data_error("clustering_report: input misaligned");
    std::vector<int> types = label_ids(type_labels);
    std::vector<int> batches = label_ids(batch_labels);
    if (num_distinct(types) < 2) throw config_error("clustering_report: need at least 2 cell types");

    ClusteringReport rep;
    std::vector<int> clusters = kmeans(embeddings, num_distinct(types), opt.seed);
    rep.nmi_cell = nmi(clusters, types);
    rep.ari_cell = ari(clusters, types);
    rep.asw_cell = asw_cell(embeddings, types);
    rep.avg_bio = (rep.nmi_cell + rep.ari_cell + rep.asw_cell) / 3.0;
    rep.asw_batch = asw_batch(embeddings, types, batches);
    rep.graph_conn = graph_connectivity(embeddings, types, opt.knn_k);
    rep.avg_batch = (rep.asw_batch + rep.graph_conn) / 2.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Text similarity
// ---------------------------------------------------------------------------

/// Lowercased whitespace tokens; the shared preprocessing of all rule-based
/// text metrics.
inline std::vector<std::string> text_tokens(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(char(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

namespace detail {

inline std::map<std::string, int> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
    std::map<std::string, int> out;
    if (toks.size() < n) return out;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
        std::string key;
        for (std::size_t j = 0; j < n; ++j) key += toks[i + j] + "\x1f";
        out[key] += 1;
    }
    return out;
}

} // namespace detail

/// BLEU-n: geometric mean of clipped 1..n-gram precisions times the brevity
/// penalty; clipping against the per-gram maximum over references.
inline double bleu(const std::string& candidate, const std::vector<std::string>& references, std::size_t max_n = 2) {
    if (references.empty()) throw data_error("bleu: no references");
    std::vector<std::string> cand = text_tokens(candidate);
    if (cand.empty()) return 0.0;
    std::vector<std::vector<std::string>> refs;
    for (const std::string& r : references) refs.push_back(text_tokens(r));

    double log_prec = 0.0;
    for (std::size_t n = 1; n <= max_n; ++n) {
        auto cc = detail::ngram_counts(cand, n);
        std::size_t total = 0, clipped = 0;
        for (const auto& [gram, count] : cc) {
            total += std::size_t(count);
            int best = 0;
            for (const auto& rt : refs) {
                auto rc = detail::ngram_counts(rt, n);
                auto it = rc.find(gram);
                if (it != rc.end()) best = std::max(best, it->second);
            }
            clipped += std::size_t(std::min(count, best));
        }
        if (total == 0 || clipped == 0) return 0.0;
        log_prec += std::log(double(clipped) / double(total)) / double(max_n);
    }
    // Closest reference length; ties toward the shorter reference.
    std::size_t r_len = refs[0].size();
    for (const auto& rt : refs) {
        auto diff = [&](std::size_t L) {
            return L > cand.size() ? L - cand.size() : cand.size() - L;
        };
        if (diff(rt.size()) < diff(r_len) || (diff(rt.size()) == diff(r_len) && rt.size() < r_len))
            r_len = rt.size();
    }
    double bp = cand.size() >= r_len ? 1.0 : std::exp(1.0 - double(r_len) / double(cand.size()));
    return bp * std::exp(log_prec);
}

/// ROUGE-n F1 on clipped n-gram overlap. When either side has no n-grams the
/// score is 1 for identical token streams and 0 otherwise.
inline double rouge_n(const std::string& candidate, const std::string& reference, std::size_t n = 2) {
    std::vector<std::string> cand = text_tokens(candidate);
    std::vector<std::string> ref = text_tokens(reference);
    auto cc = detail::ngram_counts(cand, n);
    auto rc = detail::ngram_counts(ref, n);
    if (cc.empty() || rc.empty()) return cand == ref && !cand.empty() ? 1.0 : 0.0;
    double overlap = 0, cand_total = 0, ref_total = 0;
    for (const auto& [gram, count] : cc) cand_total += count;
    for (const auto& [gram, count] : rc) ref_total += count;
    for (const auto& [gram, count] : cc) {
        auto it = rc.find(gram);
        if (it != rc.end()) overlap += std::min(count, it->second);
    }
    if (overlap == 0) return 0.0;
    double prec = overlap / cand_total, rec = overlap / ref_total;
    return 2 * prec * rec / (prec + rec);
}

/// Exact-match METEOR: recall-weighted harmonic mean (weight 9) over unigram
/// matches, discounted by the cubed chunk fragmentation ratio. A single-chunk
/// alignment carries no penalty, so identical strings score exactly 1.
inline double meteor_simplified(const std::string& candidate, const std::string& reference) {
    std::vector<std::string> cand = text_tokens(candidate);
    std::vector<std::string> ref = text_tokens(reference);
    if (cand.empty() || ref.empty()) return 0.0;

    // Greedy leftmost alignment of repeated tokens.
    std::map<std::string, std::vector<std::size_t>> ref_positions;
    for (std::size_t j = 0; j < ref.size(); ++j) ref_positions[ref[j]].push_back(j);
    std::map<std::string, std::size_t> used;
    std::vector<std::pair<std::size_t, std::size_t>> pairs; // (cand pos, ref pos)
    for (std::size_t i = 0; i < cand.size(); ++i) {
        auto it = ref_positions.find(cand[i]);
        if (it == ref_positions.end()) continue;
        std::size_t& u = used[cand[i]];
        if (u < it->second.size()) {
            pairs.emplace_back(i, it->second[u]);
            ++u;
        }
    }
    if (pairs.empty()) return 0.0;
    double m = double(pairs.size());
    double prec = m / double(cand.size());
    double rec = m / double(ref.size());
    double fmean = 10.0 * prec * rec / (rec + 9.0 * prec);
    std::size_t chunks = 1;
    for (std::size_t k = 1; k < pairs.size(); ++k)
        if (pairs[k].first != pairs[k - 1].first + 1 || pairs[k].second != pairs[k - 1].second + 1) ++chunks;
    double penalty = chunks > 1 ? 0.5 * std::pow(double(chunks) / m, 3.0) : 0.0;
    return fmean * (1.0 - penalty);
}

// ---------------------------------------------------------------------------
// Distributional distances
// ---------------------------------------------------------------------------

/// Median pairwise distance over the pooled sets (seeded subsample above the
/// cap); 1.0 when all points coincide.
inline double median_heuristic_bandwidth(const Points& a, const Points& b, std::uint64_t seed = 0,
                                         std::size_t cap = 1000) {
    Points pool = a;
    pool.insert(pool.end(), b.begin(), b.end());
    if (pool.size() > cap) {
        rng::Stream s(rng::mix(seed, 0xbdcfu));
        std::vector<std::size_t> idx(pool.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        s.shuffle(idx);
        Points sub;
        for (std::size_t i = 0; i < cap; ++i) sub.push_back(pool[idx[i]]);
        pool = std::move(sub);
    }
    std::vector<double> dists;
    for (std::size_t i = 0; i < pool.size(); ++i)
        for (std::size_t j = i + 1; j < pool.size(); ++j)
            dists.push_back(std::sqrt(detail::sq_dist(pool[i], pool[j])));
    if (dists.empty()) return 1.0;
    std::sort(dists.begin(), dists.end());
    double med = dists.size() % 2 == 1 ? dists[dists.size() / 2]
                                       : 0.5 * (dists[dists.size() / 2 - 1] + dists[dists.size() / 2]);
    return med > 0 ? med : 1.0;
}

/// Unbiased Gaussian-kernel MMD^2 estimator, unclamped. bandwidth <= 0 selects
/// the median heuristic.
inline double mmd_unbiased_raw(const Points& a, const Points& b, double bandwidth = -1.0,
                               std::uint64_t seed = 0) {
    if (a.size() < 2 || b.size() < 2) throw data_error("mmd: each set needs at least 2 points");
    if (a[0].size() != b[0].size()) throw data_error("mmd: embedding dimensions disagree");
    double sigma = bandwidth > 0 ? bandwidth : median_heuristic_bandwidth(a, b, seed);
    double gamma = 1.0 / (2.0 * sigma * sigma);
    auto kern = [&](const std::vector<double>& x, const std::vector<double>& y) {
        return std::exp(-gamma * detail::sq_dist(x, y));
    };
    double kaa = 0, kbb = 0, kab = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a.size(); ++j)
            if (i != j) kaa += kern(a[i], a[j]);
    for (std::size_t i = 0; i < b.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j)
            if (i != j) kbb += kern(b[i], b[j]);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) kab += kern(a[i], b[j]);
    double m = double(a.size()), n = double(b.size());
    return kaa / (m * (m - 1)) + kbb / (n * (n - 1)) - 2.0 * kab / (m * n);
}

/// MMD^2 clamped at zero (the reported value).
inline double mmd(const Points& a, const Points& b, double bandwidth = -1.0, std::uint64_t seed = 0) {
    return std::max(0.0, mmd_unbiased_raw(a, b, bandwidth, seed));
}

constexpr std::size_t kEmdSizeCap = 512;

namespace detail {

// O(n^3) Hungarian algorithm with potentials; returns the minimal total
// assignment cost for a square cost matrix.
inline double hungarian_min_cost(const std::vector<std::vector<double>>& cost) {
    std::size_t n = cost.size();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, 1e300);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            std::size_t i0 = p[j0], j1 = 0;
            double delta = 1e300;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    double total = 0;
    for (std::size_t j = 1; j <= n; ++j) total += cost[p[j] - 1][j - 1];
    return total;
}

} // namespace detail

/// Exact earth mover's distance between equal-size sets under the Euclidean
/// ground metric: mean per-point cost of the optimal assignment.
inline double emd(const Points& a, const Points& b) {
    if (a.empty() || b.empty()) throw data_error("emd: empty set");
    if (a.size() != b.size()) throw data_error("emd: exact assignment needs equal-size sets");
    if (a[0].size() != b[0].size()) throw data_error("emd: embedding dimensions disagree");
    if (a.size() > kEmdSizeCap)
        throw data_error("emd: set size " + std::to_string(a.size()) + " exceeds the exact-solver cap " +
                         std::to_string(kEmdSizeCap) + "; subsample both sets with a fixed seed first");
    std::vector<std::vector<double>> cost(a.size(), std::vector<double>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a.size(); ++j) cost[i][j] = std::sqrt(detail::sq_dist(a[i], b[j]));
    return detail::hungarian_min_cost(cost) / double(a.size());
}

// ---------------------------------------------------------------------------
// Text embedding for distributional metrics
// ---------------------------------------------------------------------------

using TextEmbedder = std::function<std::vector<double>(const std::string&)>;

/// Deterministic hashed bag-of-words embedder, L2-normalized. The pluggable
/// stand-in for an external sentence embedding model.
inline TextEmbedder hashed_bow_embedder(std::size_t dim = 64) {
    if (dim == 0) throw config_error("hashed_bow_embedder: dim must be positive");
    return [dim](const std::string& s) {
        std::vector<double> v(dim, 0.0);
        for (const std::string& tok : text_tokens(s)) {
            std::uint64_t h = 1469598103934665603ULL;
            for (char c : tok) {
                h ^= std::uint64_t(static_cast<unsigned char>(c));
                h *= 1099511628211ULL;
            }
            v[h % dim] += 1.0;
        }
        double norm = l2_norm(v);
        if (norm > 0)
            for (double& x : v) x /= norm;
        return v;
    };
}

inline Points embed_text_for_distribution(const std::vector<std::string>& strings,
                                          const TextEmbedder& embedder) {
    Points out;
    out.reserve(strings.size());
    for (const std::string& s : strings) out.push_back(embedder(s));
    return out;
}

struct TextReport {
    double bleu2 = 0, rouge2 = 0, meteor = 0;
    double mmd = 0, emd = 0;
    double type_accuracy = 0, type_macro_f1 = 0;
};

// ---------------------------------------------------------------------------
// k-NN evaluation of generated cells
// ---------------------------------------------------------------------------

/// Fits k-NN on real expression vectors and scores how often generated cells
/// are assigned their intended label. Vote ties resolve toward the smallest
/// label id (sorted label order); distance ties toward the smaller index.
inline std::map<std::size_t, double> knn_generation_accuracy(const Points& real,
                                                             const std::vector<std::string>& real_labels,
                                                             const Points& generated,
                                                             const std::vector<std::string>& intended_labels,
                                                             const std::vector<std::size_t>& k_list) {
    if (real.size() != real_labels.size() || generated.size() != intended_labels.size())
        throw data_error("knn_generation_accuracy: input misaligned");
    if (real.empty() || generated.empty()) throw data_error("knn_generation_accuracy: empty input");
    if (real[0].size() != generated[0].size())
        throw data_error("knn_generation_accuracy: gene dimensions disagree");
    std::vector<std::string> universe;
    std::vector<int> real_ids = label_ids(real_labels, &universe);
    std::map<std::string, int> to_id;
    for (std::size_t i = 0; i < universe.size(); ++i) to_id[universe[i]] = int(i);

    std::map<std::size_t, double> out;
    for (std::size_t k : k_list) {
        if (k == 0 || k > real.size())
            throw config_error("knn_generation_accuracy: k = " + std::to_string(k) +
                               " exceeds the real set size " + std::to_string(real.size()));
        double hits = 0;
        for (std::size_t g = 0; g < generated.size(); ++g) {
            std::vector<std::pair<double, std::size_t>> ds;
            for (std::size_t r = 0; r < real.size(); ++r)
                ds.emplace_back(detail::sq_dist(generated[g], real[r]), r);
            std::sort(ds.begin(), ds.end());
            std::map<int, std::size_t> votes;
            for (std::size_t t = 0; t < k; ++t) votes[real_ids[ds[t].second]] += 1;
            int best = votes.begin()->first;
            for (const auto& [lab, c] : votes)
                if (c > votes[best]) best = lab;
            auto it = to_id.find(intended_labels[g]);
            if (it != to_id.end() && it->second == best) hits += 1;
        }
        out[k] = hits / double(generated.size());
    }
    return out;
}

} // namespace scmm::metrics
