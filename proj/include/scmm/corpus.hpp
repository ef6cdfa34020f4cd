#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <array>
#include <string>
#include <vector>

#include "scmm/common.hpp"
#include "scmm/tensor.hpp"

namespace scmm::corpus {

/// Ordered gene identifiers; position order defines the index space.
struct GeneVocabulary {
    std::vector<std::string> symbols;
    std::map<std::string, std::size_t> lookup;

    static GeneVocabulary from_symbols(std::vector<std::string> syms) {
        GeneVocabulary v;
        v.symbols = std::move(syms);
        if (v.symbols.empty()) throw data_error("gene vocabulary must hold at least one symbol");
        for (std::size_t i = 0; i < v.symbols.size(); ++i) {
            if (!v.lookup.emplace(v.symbols[i], i).second)
                throw data_error("duplicate gene symbol: " + v.symbols[i]);
        }
        return v;
    }

    std::size_t size() const { return symbols.size(); }
};

/// Raw count matrix, cells x genes. Counts are stored as non-negative reals.
struct ExpressionMatrix {
    Tensor counts;
    std::vector<std::string> cell_ids;

    std::size_t num_cells() const { return counts.rows; }
    std::size_t num_genes() const { return counts.cols; }
};

/// Row-normalized expression (log1p of library-size fractions), entries in [0, ln 2].
struct NormalizedCell {
    std::vector<double> values;
    double library_size = 0.0;
};

/// Top-K expression tokens: (gene index, normalized value) pairs plus padding mask.
struct CellTokens {
    std::vector<std::size_t> gene_indices;
    std::vector<double> values;
    std::vector<bool> mask; // true = real token

    std::size_t capacity() const { return gene_indices.size(); }
    std::size_t num_real() const { return std::size_t(std::count(mask.begin(), mask.end(), true)); }
};

struct CellRecord {
    std::string cell_id;
    std::string cell_type;
    std::string tissue;
    std::string batch;
    std::string disease;
    std::string donor;
};

enum class TextSource { metadata, free_text, merged };

inline std::string to_string(TextSource s) {
    switch (s) {
        case TextSource::metadata: return "metadata";
        case TextSource::free_text: return "free_text";
        case TextSource::merged: return "merged";
    }
    return "?";
}

inline TextSource text_source_from_string(const std::string& s) {
    if (s == "metadata") return TextSource::metadata;
    if (s == "free_text") return TextSource::free_text;
    if (s == "merged") return TextSource::merged;
    throw config_error("unknown text source: " + s);
}

struct TextDescription {
    std::string raw;
    std::vector<int> tokens; // includes the trailing EOS
    TextSource source = TextSource::merged;

    std::size_t length() const { return tokens.size(); }
};

/// Disjoint train/val/test index sets; held_out_types lists labels absent from train.
struct CorpusSplit {
    std::vector<std::size_t> train, val, test;
    std::set<std::string> held_out_types;
};

using Ontology = std::map<std::string, std::string>;

struct Corpus {
    ExpressionMatrix matrix;
    std::vector<CellRecord> records;
    GeneVocabulary vocab;
    Ontology ontology;
    std::optional<CorpusSplit> split;

    std::size_t num_cells() const { return matrix.num_cells(); }
    std::size_t num_genes() const { return matrix.num_genes(); }

    std::vector<std::string> type_labels() const {
        std::set<std::string> s;
        for (const auto& r : records) s.insert(r.cell_type);
        return {s.begin(), s.end()};
    }
};

// ---------------------------------------------------------------------------
// Normalization and tokenization
// ---------------------------------------------------------------------------

/// values_j = log1p(row_j / sum(row)); a zero row maps to the zero vector.
/// Only ratios enter the computation, so positive rescaling of the row is a
/// no-op whenever the scaling itself is exact in floating point.
inline NormalizedCell normalize_cell(const std::vector<double>& row, std::size_t expected_genes) {
    if (row.size() != expected_genes)
        throw data_error("normalize_cell: row length " + std::to_string(row.size()) + " != gene count " +
                         std::to_string(expected_genes));
    NormalizedCell out;
    out.values.assign(row.size(), 0.0);
    double total = 0.0;
    for (double v : row) {
        if (v < 0.0) throw data_error("normalize_cell: negative count " + fmt_g9(v));
        total += v;
    }
    out.library_size = total;
    if (total == 0.0) return out;
    for (std::size_t j = 0; j < row.size(); ++j)
        if (row[j] != 0.0) out.values[j] = std::log1p(row[j] / total);
    return out;
}

/// Selects the K highest-valued genes (ties broken by ascending index). Only
/// nonzero genes become real tokens; the remainder is masked padding.
inline CellTokens tokenize_cell(const NormalizedCell& cell, std::size_t k) {
    if (k == 0) throw config_error("tokenize_cell: K must be positive");
    std::vector<std::size_t> nonzero;
    nonzero.reserve(cell.values.size());
    for (std::size_t j = 0; j < cell.values.size(); ++j)
        if (cell.values[j] != 0.0) nonzero.push_back(j);
    std::stable_sort(nonzero.begin(), nonzero.end(), [&](std::size_t a, std::size_t b) {
        if (cell.values[a] != cell.values[b]) return cell.values[a] > cell.values[b];
        return a < b;
    });
    if (nonzero.size() > k) nonzero.resize(k);

    CellTokens t;
    t.gene_indices.assign(k, 0);
    t.values.assign(k, 0.0);
    t.mask.assign(k, false);
    for (std::size_t i = 0; i < nonzero.size(); ++i) {
        t.gene_indices[i] = nonzero[i];
        t.values[i] = cell.values[nonzero[i]];
        t.mask[i] = true;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Text tokenizer
// ---------------------------------------------------------------------------

// Case-preserving word tokenizer. The characters . , ; : become standalone
// tokens; detokenization re-attaches them, so template-shaped text round-trips
// byte-exactly.
class TextTokenizer {
  public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;

    static std::vector<std::string> split_words(const std::string& raw) {
        std::vector<std::string> out;
        std::string cur;
        auto flush = [&] {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        };
        for (char ch : raw) {
            if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
                flush();
            } else if (ch == '.' || ch == ',' || ch == ';' || ch == ':') {
                flush();
                out.push_back(std::string(1, ch));
            } else {
                cur.push_back(ch);
            }
        }
        flush();
        return out;
    }

    static std::string join_words(const std::vector<std::string>& words) {
        std::string out;
        for (const std::string& w : words) {
            bool punct = w.size() == 1 && (w[0] == '.' || w[0] == ',' || w[0] == ';' || w[0] == ':');
            if (!out.empty() && !punct) out.push_back(' ');
            out += w;
        }
        return out;
    }

    static TextTokenizer build(const std::vector<std::string>& texts) {
        TextTokenizer tk;
        std::set<std::string> words;
        for (const std::string& t : texts)
            for (const std::string& w : split_words(t)) words.insert(w);
        tk.id_to_word_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
        for (const std::string& w : words) {
            tk.word_to_id_[w] = int(tk.id_to_word_.size());
            tk.id_to_word_.push_back(w);
        }
        return tk;
    }

    std::size_t vocab_size() const { return id_to_word_.size(); }

    /// Token ids for raw text, with a trailing EOS.
    std::vector<int> encode(const std::string& raw) const {
        std::vector<int> ids;
        for (const std::string& w : split_words(raw)) {
            auto it = word_to_id_.find(w);
            ids.push_back(it == word_to_id_.end() ? kUnk : it->second);
        }
        ids.push_back(kEos);
        return ids;
    }

    // Ids beyond this tokenizer's table render as <unk>; generation may emit
    // any id below the model's text vocabulary size.
    std::string decode(const std::vector<int>& ids) const {
        std::vector<std::string> words;
        for (int id : ids) {
            if (id == kPad || id == kBos || id == kEos) continue;
            if (id < 0 || std::size_t(id) >= id_to_word_.size())
                words.push_back(id_to_word_[kUnk]);
            else
                words.push_back(id_to_word_[std::size_t(id)]);
        }
        return join_words(words);
    }

  private:
    std::map<std::string, int> word_to_id_;
    std::vector<std::string> id_to_word_;
};

// ---------------------------------------------------------------------------
// Description rendering
// ---------------------------------------------------------------------------

inline std::string metadata_sentence(const CellRecord& r) {
    bool vowel = !r.cell_type.empty() && std::string("aeiouAEIOU").find(r.cell_type[0]) != std::string::npos;
    return std::string("This is ") + (vowel ? "an " : "a ") + r.cell_type + " from " + r.tissue +
           " tissue; disease: " + r.disease + ".";
}

/// Deterministic description text for a record under the given source mode.
inline std::string render_text(const CellRecord& record, const Ontology& ontology, TextSource mode) {
    if (mode == TextSource::metadata) return metadata_sentence(record);
    auto it = ontology.find(record.cell_type);
    if (it == ontology.end())
        throw data_error("ontology has no entry for cell type '" + record.cell_type + "'");
    if (mode == TextSource::free_text) return it->second;
    return metadata_sentence(record) + " " + it->second;
}

inline TextDescription render_description(const CellRecord& record, const Ontology& ontology, TextSource mode,
                                           const TextTokenizer& tokenizer) {
    TextDescription d;
    d.raw = render_text(record, ontology, mode);
    d.tokens = tokenizer.encode(d.raw);
    d.source = mode;
    return d;
}

/// Tokenizer over every text the corpus can render (all three source modes for
/// every type), so captions and candidate descriptions never hit <unk>.
inline TextTokenizer build_corpus_tokenizer(const Corpus& c) {
    std::vector<std::string> texts;
    std::set<std::string> seen_types;
    for (const CellRecord& r : c.records) {
        if (!seen_types.insert(r.cell_type).second) continue;
        texts.push_back(render_text(r, c.ontology, TextSource::metadata));
        texts.push_back(render_text(r, c.ontology, TextSource::merged));
    }
    for (const auto& [type, passage] : c.ontology) texts.push_back(passage);
    return TextTokenizer::build(texts);
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation
// ---------------------------------------------------------------------------

struct CorpusSpec {
    std::size_t num_types = 8;
    std::size_t num_cells = 200;
    std::size_t num_genes = 128;
    std::size_t num_batches = 2;
    std::size_t marker_genes_per_type = 12;
    double dropout_rate = 0.1;
    bool value_signal = false;
};

namespace detail {

inline std::string type_name(std::size_t t) {
    static const char* greek[] = {"alpha", "beta",  "gamma",   "delta", "epsilon", "zeta",
                                  "eta",   "theta", "iota",    "kappa", "lambda",  "mu",
                                  "nu",    "xi",    "omicron", "pi",    "rho",     "sigma",
                                  "tau",   "upsilon", "phi",   "chi",   "psi",     "omega"};
    if (t < 24) return std::string(greek[t]) + " cell";
    return "type" + std::to_string(t) + " cell";
}

inline std::string tissue_name(std::size_t t) {
    static const char* tissues[] = {"pancreas", "liver", "lung", "blood", "brain", "kidney", "heart", "skin"};
    return tissues[t % 8];
}

inline std::string gene_name(std::size_t j, std::size_t m) {
    int width = m > 9999 ? 5 : 4;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "g%0*zu", width, j);
    return buf;
}

} // namespace detail

/// Seed-deterministic synthetic cell-text corpus. Each type owns a disjoint
/// marker block with log-normal elevated counts; batches apply multiplicative
/// per-gene shifts; dropout zeroes entries. With value_signal, the last two
/// types share one marker block and differ only in the magnitude ramp across
/// it, so rank-order representations cannot separate them.
inline Corpus generate_synthetic_corpus(const CorpusSpec& spec, std::uint64_t seed) {
    if (spec.num_types < 2) throw config_error("corpus spec: num_types must be >= 2");
    if (spec.num_cells == 0) throw config_error("corpus spec: num_cells must be positive");
    if (spec.num_batches == 0) throw config_error("corpus spec: num_batches must be positive");
    if (spec.marker_genes_per_type == 0) throw config_error("corpus spec: marker_genes_per_type must be positive");
    if (spec.marker_genes_per_type * spec.num_types > spec.num_genes)
        throw config_error("corpus spec: marker_genes_per_type * num_types exceeds gene count (" +
                           std::to_string(spec.marker_genes_per_type * spec.num_types) + " > " +
                           std::to_string(spec.num_genes) + ")");
    if (spec.dropout_rate < 0.0 || spec.dropout_rate > 1.0)
        throw config_error("corpus spec: dropout_rate must lie in [0, 1]");
    if (spec.value_signal && spec.marker_genes_per_type < 2)
        throw config_error("corpus spec: value_signal needs at least 2 marker genes per type");

    const std::size_t T = spec.num_types;
    const std::size_t M = spec.num_genes;
    const std::size_t mpt = spec.marker_genes_per_type;

    Corpus c;
    std::vector<std::string> symbols(M);
    for (std::size_t j = 0; j < M; ++j) symbols[j] = detail::gene_name(j, M);
    c.vocab = GeneVocabulary::from_symbols(std::move(symbols));

    // Corpus-level draws: gene base rates, batch shifts, marker boost patterns.
    rng::Stream corpus_rng(rng::mix(seed, 0xC0ABu));
    std::vector<double> base_log(M);
    for (double& v : base_log) v = corpus_rng.normal(std::log(0.5), 0.25);
    std::vector<std::vector<double>> batch_log(spec.num_batches, std::vector<double>(M));
    for (auto& row : batch_log)
        for (double& v : row) v = corpus_rng.normal(0.0, 0.15);

    // Marker block of type t starts at block(t)*mpt. With value_signal the
    // last type reuses the block of its twin.
    auto block_of = [&](std::size_t t) {
        if (spec.value_signal && t == T - 1) return T - 2;
        return t;
    };
    std::vector<std::vector<double>> boost_mu(T, std::vector<double>(mpt));
    for (std::size_t t = 0; t < T; ++t) {
        bool twin = spec.value_signal && t >= T - 2;
        for (std::size_t g = 0; g < mpt; ++g) {
            if (!twin) {
                boost_mu[t][g] = corpus_rng.normal(std::log(20.0), 0.15);
            } else {
                // Opposite magnitude ramps over the shared block.
                double frac = double(g) / double(mpt - 1);
                if (t == T - 1) frac = 1.0 - frac;
                boost_mu[t][g] = std::log(44.0) + frac * (std::log(6.0) - std::log(44.0));
            }
        }
    }

    c.matrix.counts = Tensor(spec.num_cells, M, 0.0);
    c.matrix.cell_ids.resize(spec.num_cells);
    c.records.resize(spec.num_cells);

    for (std::size_t i = 0; i < spec.num_cells; ++i) {
        std::size_t t = i % T;
        rng::Stream cell_rng(rng::mix(seed, 0xCE11u, i));
        std::size_t b = std::size_t(cell_rng.uniform_int(spec.num_batches));
        std::size_t donor = std::size_t(cell_rng.uniform_int(4));

        CellRecord& r = c.records[i];
        char idbuf[24];
        std::snprintf(idbuf, sizeof(idbuf), "cell_%05zu", i);
        r.cell_id = idbuf;
        r.cell_type = detail::type_name(t);
        r.tissue = detail::tissue_name(t);
        r.batch = "batch" + std::to_string(b);
        r.disease = "normal";
        r.donor = "donor" + std::to_string(donor);
        c.matrix.cell_ids[i] = r.cell_id;

        std::size_t blk = block_of(t) * mpt;
        double* row = c.matrix.counts.row_ptr(i);
        for (std::size_t j = 0; j < M; ++j) {
            double logv = base_log[j] + cell_rng.normal(0.0, 0.35) + batch_log[b][j];
            if (j >= blk && j < blk + mpt) logv += boost_mu[t][j - blk] + cell_rng.normal(0.0, 0.2);
            bool dropped = cell_rng.bernoulli(spec.dropout_rate);
            row[j] = dropped ? 0.0 : round_g9(std::exp(logv));
        }
    }

    // Ontology passage per type, mentioning its leading marker genes.
    std::set<std::string> done;
    for (std::size_t t = 0; t < T; ++t) {
        std::string name = detail::type_name(t);
        if (!done.insert(name).second) continue;
        std::size_t blk = block_of(t) * mpt;
        std::string g1 = c.vocab.symbols[blk];
        std::string g2 = c.vocab.symbols[blk + std::min<std::size_t>(1, mpt - 1)];
        c.ontology[name] = "The " + name + " population of " + detail::tissue_name(t) +
                           " shows strong activity of marker genes " + g1 + " and " + g2 +
                           ", forming a compact expression program.";
    }
    return c;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct SplitFractions {
    double train = 0.8, val = 0.1, test = 0.1;
};

namespace detail {

inline void check_fractions(const SplitFractions& f) {
    for (double v : {f.train, f.val, f.test})
        if (v < 0.0 || v > 1.0) throw config_error("split fraction out of [0,1]: " + fmt_g9(v));
    if (std::fabs(f.train + f.val + f.test - 1.0) > 1e-9)
        throw config_error("split fractions must sum to 1");
}

// Largest-remainder apportionment of n into three parts.
inline std::array<std::size_t, 3> apportion(std::size_t n, const SplitFractions& f) {
    double targets[3] = {f.train * double(n), f.val * double(n), f.test * double(n)};
    std::array<std::size_t, 3> counts{};
    double rema[3];
    std::size_t used = 0;
    for (int i = 0; i < 3; ++i) {
        counts[std::size_t(i)] = std::size_t(targets[i]);
        rema[i] = targets[i] - double(counts[std::size_t(i)]);
        used += counts[std::size_t(i)];
    }
    while (used < n) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (rema[i] > rema[best]) best = i;
        counts[std::size_t(best)] += 1;
        rema[best] = -1.0;
        ++used;
    }
    return counts;
}

inline void stratified_assign(const std::vector<std::size_t>& idx, const SplitFractions& f, rng::Stream& s,
                              CorpusSplit& out) {
    std::vector<std::size_t> shuffled = idx;
    s.shuffle(shuffled);
    auto counts = apportion(shuffled.size(), f);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < counts[0]; ++i) out.train.push_back(shuffled[pos++]);
    for (std::size_t i = 0; i < counts[1]; ++i) out.val.push_back(shuffled[pos++]);
    for (std::size_t i = 0; i < counts[2]; ++i) out.test.push_back(shuffled[pos++]);
}

} // namespace detail

/// Stratified-by-type random split with per-type proportions within one cell
/// of target.
inline CorpusSplit split_random(const std::vector<CellRecord>& records, const SplitFractions& fractions,
                                std::uint64_t seed) {
    detail::check_fractions(fractions);
    std::map<std::string, std::vector<std::size_t>> by_type;
    for (std::size_t i = 0; i < records.size(); ++i) by_type[records[i].cell_type].push_back(i);
    CorpusSplit out;
    for (auto& [type, idx] : by_type) {
        rng::Stream s(rng::mix(seed, 0x5b117u, crc32(type)));
        detail::stratified_assign(idx, fractions, s, out);
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

/// Out-of-distribution split: a fraction of type labels appears only in test.
inline CorpusSplit split_by_type(const std::vector<CellRecord>& records, double held_out_fraction,
                                 std::uint64_t seed, const SplitFractions& seen_fractions = {}) {
    if (held_out_fraction <= 0.0 || held_out_fraction >= 1.0)
        throw config_error("held_out_fraction must lie in (0,1)");
    detail::check_fractions(seen_fractions);
    std::map<std::string, std::vector<std::size_t>> by_type;
    for (std::size_t i = 0; i < records.size(); ++i) by_type[records[i].cell_type].push_back(i);

    std::vector<std::string> types;
    for (const auto& [t, _] : by_type) types.push_back(t);
    rng::Stream s(rng::mix(seed, 0x0edu));
    s.shuffle(types);
    std::size_t num_held = std::size_t(std::llround(held_out_fraction * double(types.size())));
    num_held = std::min(std::max<std::size_t>(num_held, 1), types.size() - 1);

    CorpusSplit out;
    for (std::size_t i = 0; i < num_held; ++i) out.held_out_types.insert(types[i]);
    for (auto& [type, idx] : by_type) {
        if (out.held_out_types.count(type)) {
            for (std::size_t i : idx) out.test.push_back(i);
        } else {
            rng::Stream ts(rng::mix(seed, 0x5b117u, crc32(type)));
            detail::stratified_assign(idx, seen_fractions, ts, out);
        }
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

// ---------------------------------------------------------------------------
// Corpus directory I/O
// ---------------------------------------------------------------------------
// Layout: matrix.tsv (sparse triplets with a "#cells=N genes=M" header),
// records.tsv, vocab.txt, ontology.tsv, splits.tsv. UTF-8, LF, TAB separators,
// numbers carry at most 9 significant digits.

inline void save_corpus(const Corpus& c, const std::string& dir) {
    {
        std::string out = "#cells=" + std::to_string(c.num_cells()) + " genes=" + std::to_string(c.num_genes()) + "\n";
        for (std::size_t i = 0; i < c.num_cells(); ++i) {
            const double* row = c.matrix.counts.row_ptr(i);
            for (std::size_t j = 0; j < c.num_genes(); ++j)
                if (row[j] != 0.0)
                    out += c.matrix.cell_ids[i] + "\t" + std::to_string(j) + "\t" + fmt_g9(row[j]) + "\n";
        }
        write_file(dir + "/matrix.tsv", out);
    }
    {
        std::string out;
        for (const CellRecord& r : c.records)
            out += r.cell_id + "\t" + r.cell_type + "\t" + r.tissue + "\t" + r.batch + "\t" + r.disease + "\t" +
                   r.donor + "\n";
        write_file(dir + "/records.tsv", out);
    }
    {
        std::string out;
        for (const std::string& s : c.vocab.symbols) out += s + "\n";
        write_file(dir + "/vocab.txt", out);
    }
    {
        std::string out;
        for (const auto& [type, passage] : c.ontology) out += type + "\t" + passage + "\n";
        write_file(dir + "/ontology.tsv", out);
    }
    if (c.split) {
        std::string out;
        if (!c.split->held_out_types.empty()) {
            out += "#held_out=";
            bool first = true;
            for (const std::string& t : c.split->held_out_types) {
                if (!first) out += ",";
                out += t;
                first = false;
            }
            out += "\n";
        }
        std::vector<std::pair<std::size_t, std::string>> rows;
        for (std::size_t i : c.split->train) rows.emplace_back(i, "train");
        for (std::size_t i : c.split->val) rows.emplace_back(i, "val");
        for (std::size_t i : c.split->test) rows.emplace_back(i, "test");
        std::sort(rows.begin(), rows.end());
        for (const auto& [i, tag] : rows) out += c.matrix.cell_ids[i] + "\t" + tag + "\n";
        write_file(dir + "/splits.tsv", out);
    }
}

inline Corpus load_corpus(const std::string& dir) {
    Corpus c;

    {
        std::vector<std::string> lines = read_lines_strict(dir + "/vocab.txt");
        if (lines.empty()) throw data_error(dir + "/vocab.txt: missing gene vocabulary section");
        c.vocab = GeneVocabulary::from_symbols(lines);
    }
    const std::size_t M = c.vocab.size();

    std::map<std::string, std::size_t> cell_index;
    {
        std::vector<std::string> lines = read_lines_strict(dir + "/records.tsv");
        if (lines.empty()) throw data_error(dir + "/records.tsv: missing cell records section");
        for (std::size_t ln = 0; ln < lines.size(); ++ln) {
            auto f = split(lines[ln], '\t');
            if (f.size() != 6)
                throw data_error(dir + "/records.tsv:" + std::to_string(ln + 1) + ": expected 6 fields, got " +
                                 std::to_string(f.size()));
            CellRecord r{f[0], f[1], f[2], f[3], f[4], f[5]};
            if (!cell_index.emplace(r.cell_id, c.records.size()).second)
                throw data_error(dir + "/records.tsv:" + std::to_string(ln + 1) + ": duplicate cell id " + r.cell_id);
            c.records.push_back(std::move(r));
        }
    }

    {
        std::vector<std::string> lines = read_lines_strict(dir + "/matrix.tsv");
        if (lines.empty()) throw data_error(dir + "/matrix.tsv: missing matrix section");
        std::size_t n = 0, m = 0;
        if (std::sscanf(lines[0].c_str(), "#cells=%zu genes=%zu", &n, &m) != 2)
            throw data_error(dir + "/matrix.tsv:1: malformed header '" + lines[0] + "'");
        if (m != M)
            throw data_error(dir + "/matrix.tsv: gene count " + std::to_string(m) + " disagrees with vocab.txt (" +
                             std::to_string(M) + ")");
        if (n != c.records.size())
            throw data_error(dir + "/matrix.tsv: cell count " + std::to_string(n) +
                             " disagrees with records.tsv (" + std::to_string(c.records.size()) + ")");
        c.matrix.counts = Tensor(n, M, 0.0);
        c.matrix.cell_ids.resize(n);
        for (std::size_t i = 0; i < n; ++i) c.matrix.cell_ids[i] = c.records[i].cell_id;
        for (std::size_t ln = 1; ln < lines.size(); ++ln) {
            auto f = split(lines[ln], '\t');
            const std::string ctx = dir + "/matrix.tsv:" + std::to_string(ln + 1);
            if (f.size() != 3) throw data_error(ctx + ": expected 3 fields, got " + std::to_string(f.size()));
            auto it = cell_index.find(f[0]);
            if (it == cell_index.end()) throw data_error(ctx + ": unknown cell id " + f[0]);
            long j = parse_long(f[1], ctx);
            if (j < 0 || std::size_t(j) >= M) throw data_error(ctx + ": gene index out of range");
            double v = parse_double(f[2], ctx);
            if (v < 0.0) throw data_error(ctx + ": negative count");
            c.matrix.counts.at(it->second, std::size_t(j)) = v;
        }
    }

    {
        std::vector<std::string> lines = read_lines_strict(dir + "/ontology.tsv");
        if (lines.empty()) throw data_error(dir + "/ontology.tsv: missing ontology section");
        for (std::size_t ln = 0; ln < lines.size(); ++ln) {
            auto f = split(lines[ln], '\t');
            if (f.size() != 2)
                throw data_error(dir + "/ontology.tsv:" + std::to_string(ln + 1) + ": expected 2 fields");
            c.ontology[f[0]] = f[1];
        }
    }

    {
        std::ifstream probe(dir + "/splits.tsv");
        if (probe) {
            std::vector<std::string> lines = read_lines_strict(dir + "/splits.tsv");
            CorpusSplit sp;
            for (std::size_t ln = 0; ln < lines.size(); ++ln) {
                const std::string& line = lines[ln];
                if (line.rfind("#held_out=", 0) == 0) {
                    for (const std::string& t : split(line.substr(10), ','))
                        if (!t.empty()) sp.held_out_types.insert(t);
                    continue;
                }
                auto f = split(line, '\t');
                const std::string ctx = dir + "/splits.tsv:" + std::to_string(ln + 1);
                if (f.size() != 2) throw data_error(ctx + ": expected 2 fields");
                auto it = cell_index.find(f[0]);
                if (it == cell_index.end()) throw data_error(ctx + ": unknown cell id " + f[0]);
                if (f[1] == "train")
                    sp.train.push_back(it->second);
                else if (f[1] == "val")
                    sp.val.push_back(it->second);
                else if (f[1] == "test")
                    sp.test.push_back(it->second);
                else
                    throw data_error(ctx + ": unknown split tag '" + f[1] + "'");
            }
            c.split = std::move(sp);
        }
    }
    return c;
}

/// Normalized expression of cell i.
inline NormalizedCell normalized(const Corpus& c, std::size_t i) {
    const double* row = c.matrix.counts.row_ptr(i);
    std::vector<double> v(row, row + c.num_genes());
    return normalize_cell(v, c.num_genes());
}

inline CellTokens cell_tokens(const Corpus& c, std::size_t i, std::size_t k) {
    return tokenize_cell(normalized(c, i), k);
}

} // namespace scmm::corpus
