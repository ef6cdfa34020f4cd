#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "scmm/corpus.hpp"

#include <array>
#include <cstdio>
#include <filesystem>

using namespace scmm;
using namespace scmm::corpus;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("scmm_corpus_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

bool corpora_equal(const Corpus& a, const Corpus& b) {
    if (!a.matrix.counts.bit_equal(b.matrix.counts)) return false;
    if (a.matrix.cell_ids != b.matrix.cell_ids) return false;
    if (a.vocab.symbols != b.vocab.symbols) return false;
    if (a.ontology != b.ontology) return false;
    if (a.records.size() != b.records.size()) return false;
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        const CellRecord &x = a.records[i], &y = b.records[i];
        if (x.cell_id != y.cell_id || x.cell_type != y.cell_type || x.tissue != y.tissue || x.batch != y.batch ||
            x.disease != y.disease || x.donor != y.donor)
            return false;
    }
    if (a.split.has_value() != b.split.has_value()) return false;
    if (a.split) {
        if (a.split->train != b.split->train || a.split->val != b.split->val || a.split->test != b.split->test)
            return false;
        if (a.split->held_out_types != b.split->held_out_types) return false;
    }
    return true;
}

} // namespace

TEST_CASE("normalize_cell evaluates the log ratio transform") {
    NormalizedCell n = normalize_cell({3, 1}, 2);
    CHECK(n.values[0] == doctest::Approx(std::log(1.75)).epsilon(1e-12));
    CHECK(n.values[1] == doctest::Approx(std::log(1.25)).epsilon(1e-12));
    CHECK(n.library_size == doctest::Approx(4.0));

    NormalizedCell half = normalize_cell({6, 2}, 2);
    CHECK(half.values == n.values);
}

TEST_CASE("normalize_cell zero row maps to zero vector") {
    NormalizedCell n = normalize_cell({0, 0, 0}, 3);
    CHECK(n.library_size == 0.0);
    for (double v : n.values) CHECK(v == 0.0);
}

TEST_CASE("normalize_cell rejects bad input") {
    CHECK_THROWS_AS(normalize_cell({1, 2}, 3), data_error);
    CHECK_THROWS_AS(normalize_cell({1, -0.5}, 2), data_error);
}

TEST_CASE("normalization is exactly invariant to exact scalings") {
    rng::Stream s(101);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t m = 2 + std::size_t(s.uniform_int(30));
        std::vector<double> row(m);
        bool nonzero = false;
        for (double& v : row) {
            v = double(s.uniform_int(500));
            nonzero = nonzero || v != 0.0;
        }
        if (!nonzero) row[0] = 3.0;
        double a = trial % 2 == 0 ? double(1 + s.uniform_int(1000))
                                  : std::ldexp(1.0, int(s.uniform_int(40)) - 20);
        std::vector<double> scaled(m);
        for (std::size_t j = 0; j < m; ++j) scaled[j] = a * row[j];
        NormalizedCell base = normalize_cell(row, m);
        NormalizedCell sc = normalize_cell(scaled, m);
        REQUIRE(base.values == sc.values);
    }
}

TEST_CASE("normalization is scale invariant for arbitrary reals within ulps") {
    rng::Stream s(102);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t m = 2 + std::size_t(s.uniform_int(20));
        std::vector<double> row(m);
        for (double& v : row) v = s.uniform(0.0, 50.0);
        double a = std::exp(s.uniform(-3.0, 3.0));
        std::vector<double> scaled(m);
        for (std::size_t j = 0; j < m; ++j) scaled[j] = a * row[j];
        NormalizedCell base = normalize_cell(row, m);
        NormalizedCell sc = normalize_cell(scaled, m);
        for (std::size_t j = 0; j < m; ++j)
            CHECK(sc.values[j] == doctest::Approx(base.values[j]).epsilon(1e-13));
    }
}

TEST_CASE("normalized values stay in range and exp-sum to one") {
    rng::Stream s(103);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t m = 1 + std::size_t(s.uniform_int(40));
        std::vector<double> row(m);
        for (double& v : row) v = s.bernoulli(0.3) ? 0.0 : s.uniform(0.0, 100.0);
        NormalizedCell n = normalize_cell(row, m);
        double expsum = 0.0;
        for (double v : n.values) {
            CHECK(v >= 0.0);
            CHECK(v <= std::log(2.0) + 1e-15);
            expsum += std::expm1(v);
        }
        if (n.library_size > 0) CHECK(expsum == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("tokenize_cell keeps the highest values and pads the rest") {
    NormalizedCell n;
    n.values = {0.5, 0.2, 0.9, 0.0};
    n.library_size = 1;
    CellTokens t = tokenize_cell(n, 2);
    CHECK(t.gene_indices == std::vector<std::size_t>{2, 0});
    CHECK(t.mask == std::vector<bool>{true, true});

    NormalizedCell three;
    three.values = {0.1, 0.0, 0.3, 0.0, 0.2, 0.0};
    three.library_size = 1;
    CellTokens padded = tokenize_cell(three, 10);
    CHECK(padded.num_real() == 3);
    for (std::size_t i = 3; i < 10; ++i) {
        CHECK(!padded.mask[i]);
        CHECK(padded.gene_indices[i] == 0);
        CHECK(padded.values[i] == 0.0);
    }
}

TEST_CASE("tokenize_cell breaks ties by ascending gene index") {
    NormalizedCell n;
    n.values = {0.4, 0.4};
    n.library_size = 1;
    CellTokens t = tokenize_cell(n, 1);
    CHECK(t.gene_indices == std::vector<std::size_t>{0});
}

TEST_CASE("tokenize_cell output values are non-increasing") {
    rng::Stream s(104);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t m = 3 + std::size_t(s.uniform_int(60));
        std::vector<double> row(m);
        for (double& v : row) v = s.bernoulli(0.4) ? 0.0 : double(s.uniform_int(20));
        NormalizedCell n = normalize_cell(row, m);
        std::size_t k = 1 + std::size_t(s.uniform_int(m));
        CellTokens t = tokenize_cell(n, k);
        std::set<std::size_t> seen;
        double prev = 1e300;
        for (std::size_t i = 0; i < k && t.mask[i]; ++i) {
            CHECK(t.values[i] <= prev);
            prev = t.values[i];
            CHECK(seen.insert(t.gene_indices[i]).second);
        }
    }
}

TEST_CASE("render_text produces the fixed metadata template") {
    CellRecord r{"c1", "alpha cell", "pancreas", "batch0", "normal", "donor1"};
    Ontology onto{{"alpha cell", "The alpha cell population is compact."}};
    CHECK(render_text(r, onto, TextSource::metadata) ==
          "This is an alpha cell from pancreas tissue; disease: normal.");
    CHECK(render_text(r, onto, TextSource::free_text) == "The alpha cell population is compact.");
    CHECK(render_text(r, onto, TextSource::merged) ==
          "This is an alpha cell from pancreas tissue; disease: normal. The alpha cell population is compact.");

    CellRecord beta{"c2", "beta cell", "liver", "batch0", "normal", "donor1"};
    CHECK(render_text(beta, onto, TextSource::metadata) ==
          "This is a beta cell from liver tissue; disease: normal.");

    CHECK(render_text(r, onto, TextSource::merged) == render_text(r, onto, TextSource::merged));
    CHECK_THROWS_WITH_AS(render_text(beta, onto, TextSource::merged),
                         doctest::Contains("beta cell"), data_error);
}

TEST_CASE("text tokenizer round-trips template strings byte-exactly") {
    std::string raw = "This is an alpha cell from pancreas tissue; disease: normal.";
    TextTokenizer tk = TextTokenizer::build({raw, "extra words, here."});
    std::vector<int> ids = tk.encode(raw);
    CHECK(ids.back() == TextTokenizer::kEos);
    CHECK(tk.decode(ids) == raw);
    CHECK(ids.size() >= 2);

    std::vector<int> unk = tk.encode("unknown token stream");
    CHECK(unk[0] == TextTokenizer::kUnk);
}

TEST_CASE("synthetic corpus generation is seed-deterministic") {
    CorpusSpec spec;
    spec.num_types = 8;
    spec.num_cells = 200;
    spec.num_genes = 128;
    Corpus a = generate_synthetic_corpus(spec, 7);
    Corpus b = generate_synthetic_corpus(spec, 7);
    CHECK(corpora_equal(a, b));
    Corpus c = generate_synthetic_corpus(spec, 8);
    CHECK(!a.matrix.counts.bit_equal(c.matrix.counts));
    CHECK(a.num_cells() == 200);
    CHECK(a.num_genes() == 128);
    CHECK(a.type_labels().size() == 8);
}

TEST_CASE("full dropout yields an all-zero matrix") {
    CorpusSpec spec;
    spec.num_cells = 30;
    spec.num_genes = 64;
    spec.marker_genes_per_type = 4;
    spec.dropout_rate = 1.0;
    Corpus c = generate_synthetic_corpus(spec, 3);
    for (double v : c.matrix.counts.data) CHECK(v == 0.0);
}

TEST_CASE("infeasible corpus specs are rejected") {
    CorpusSpec spec;
    spec.num_types = 10;
    spec.num_genes = 32;
    spec.marker_genes_per_type = 4; // 40 > 32
    CHECK_THROWS_AS(generate_synthetic_corpus(spec, 1), config_error);
    spec.num_types = 1;
    CHECK_THROWS_AS(generate_synthetic_corpus(spec, 1), config_error);
}

namespace {

// Two-sample permutation test: statistic is the L2 distance between group
// means; p-value estimated over seeded label shuffles.
double permutation_pvalue(const std::vector<std::vector<double>>& feats, std::vector<int> labels, int n_perm,
                          std::uint64_t seed) {
    auto stat = [&](const std::vector<int>& lab) {
        std::size_t dim = feats[0].size();
        std::vector<double> ma(dim, 0.0), mb(dim, 0.0);
        double na = 0, nb = 0;
        for (std::size_t i = 0; i < feats.size(); ++i) {
            auto& m = lab[i] == 0 ? ma : mb;
            (lab[i] == 0 ? na : nb) += 1;
            for (std::size_t d = 0; d < dim; ++d) m[d] += feats[i][d];
        }
        double s = 0;
        for (std::size_t d = 0; d < dim; ++d) {
            double diff = ma[d] / na - mb[d] / nb;
            s += diff * diff;
        }
        return std::sqrt(s);
    };
    double observed = stat(labels);
    rng::Stream s(seed);
    int geq = 0;
    for (int p = 0; p < n_perm; ++p) {
        s.shuffle(labels);
        if (stat(labels) >= observed) ++geq;
    }
    return double(1 + geq) / double(1 + n_perm);
}

} // namespace

TEST_CASE("value_signal twins are rank-indistinguishable but value-distinguishable") {
    CorpusSpec spec;
    spec.num_types = 8;
    spec.num_cells = 240;
    spec.num_genes = 256;
    spec.marker_genes_per_type = 12;
    spec.dropout_rate = 0.1;
    spec.value_signal = true;
    Corpus c = generate_synthetic_corpus(spec, 5);

    // Twins are the last two declared types.
    std::string twin_a = "eta cell", twin_b = "theta cell";
    std::vector<std::vector<double>> rank_feats, value_feats;
    std::vector<int> labels;
    for (std::size_t i = 0; i < c.num_cells(); ++i) {
        const std::string& t = c.records[i].cell_type;
        if (t != twin_a && t != twin_b) continue;
        NormalizedCell n = normalized(c, i);
        CellTokens tok = tokenize_cell(n, 100);
        std::vector<double> indicator(c.num_genes(), 0.0);
        for (std::size_t p = 0; p < tok.capacity(); ++p)
            if (tok.mask[p]) indicator[tok.gene_indices[p]] = 1.0;
        rank_feats.push_back(std::move(indicator));
        value_feats.push_back(n.values);
        labels.push_back(t == twin_a ? 0 : 1);
    }
    REQUIRE(rank_feats.size() >= 40);

    double p_rank = permutation_pvalue(rank_feats, labels, 300, 2024);
    double p_value = permutation_pvalue(value_feats, labels, 300, 2024);
    CHECK(p_rank > 0.05);
    CHECK(p_value <= 0.01);
}

TEST_CASE("random split is stratified within one cell of target") {
    CorpusSpec spec;
    spec.num_cells = 200;
    Corpus c = generate_synthetic_corpus(spec, 7);
    CorpusSplit sp = split_random(c.records, SplitFractions{0.8, 0.1, 0.1}, 11);
    CHECK(sp.train.size() + sp.val.size() + sp.test.size() == 200);

    std::set<std::size_t> seen;
    for (auto* part : {&sp.train, &sp.val, &sp.test})
        for (std::size_t i : *part) CHECK(seen.insert(i).second);

    std::map<std::string, std::array<double, 3>> per_type;
    std::map<std::string, double> totals;
    for (std::size_t i : sp.train) per_type[c.records[i].cell_type][0] += 1;
    for (std::size_t i : sp.val) per_type[c.records[i].cell_type][1] += 1;
    for (std::size_t i : sp.test) per_type[c.records[i].cell_type][2] += 1;
    for (const auto& r : c.records) totals[r.cell_type] += 1;
    for (const auto& [type, counts] : per_type) {
        double n = totals[type];
        CHECK(std::fabs(counts[0] - 0.8 * n) <= 1.0);
        CHECK(std::fabs(counts[1] - 0.1 * n) <= 1.0);
        CHECK(std::fabs(counts[2] - 0.1 * n) <= 1.0);
    }

    CorpusSplit sp2 = split_random(c.records, SplitFractions{0.8, 0.1, 0.1}, 11);
    CHECK(sp.train == sp2.train);
    CHECK(sp.val == sp2.val);
    CHECK(sp.test == sp2.test);
}

TEST_CASE("by-type split holds out the requested fraction of labels") {
    CorpusSpec spec;
    spec.num_types = 10;
    spec.num_cells = 300;
    spec.num_genes = 160;
    spec.marker_genes_per_type = 10;
    Corpus c = generate_synthetic_corpus(spec, 9);
    CorpusSplit sp = split_by_type(c.records, 0.3, 21);
    CHECK(sp.held_out_types.size() == 3);
    for (std::size_t i : sp.train) CHECK(sp.held_out_types.count(c.records[i].cell_type) == 0);
    std::set<std::string> test_types;
    for (std::size_t i : sp.test) test_types.insert(c.records[i].cell_type);
    for (const std::string& t : sp.held_out_types) CHECK(test_types.count(t) == 1);
}

TEST_CASE("split rejects bad fractions") {
    CorpusSpec spec;
    spec.num_cells = 40;
    Corpus c = generate_synthetic_corpus(spec, 2);
    CHECK_THROWS_AS(split_random(c.records, SplitFractions{0.9, 0.2, 0.1}, 1), config_error);
    CHECK_THROWS_AS(split_by_type(c.records, 1.5, 1), config_error);
    CHECK_THROWS_AS(split_by_type(c.records, 0.0, 1), config_error);
}

TEST_CASE("corpus save/load round-trips exactly") {
    CorpusSpec spec;
    spec.num_cells = 80;
    Corpus c = generate_synthetic_corpus(spec, 7);
    c.split = split_random(c.records, {}, 7);
    fs::path dir = fresh_dir("roundtrip");
    save_corpus(c, dir.string());
    Corpus back = load_corpus(dir.string());
    CHECK(corpora_equal(c, back));
}

TEST_CASE("by-type split survives the round trip") {
    CorpusSpec spec;
    spec.num_cells = 80;
    Corpus c = generate_synthetic_corpus(spec, 7);
    c.split = split_by_type(c.records, 0.25, 3);
    fs::path dir = fresh_dir("roundtrip_heldout");
    save_corpus(c, dir.string());
    Corpus back = load_corpus(dir.string());
    CHECK(corpora_equal(c, back));
}

TEST_CASE("truncated matrix file fails to parse") {
    CorpusSpec spec;
    spec.num_cells = 40;
    Corpus c = generate_synthetic_corpus(spec, 7);
    fs::path dir = fresh_dir("truncated");
    save_corpus(c, dir.string());
    std::string content = read_file((dir / "matrix.tsv").string());
    write_file((dir / "matrix.tsv").string(), content.substr(0, content.size() - 5));
    CHECK_THROWS_AS(load_corpus(dir.string()), data_error);
}

TEST_CASE("empty ontology file fails with a section name") {
    CorpusSpec spec;
    spec.num_cells = 40;
    Corpus c = generate_synthetic_corpus(spec, 7);
    fs::path dir = fresh_dir("empty_onto");
    save_corpus(c, dir.string());
    write_file((dir / "ontology.tsv").string(), "");
    CHECK_THROWS_WITH_AS(load_corpus(dir.string()), doctest::Contains("ontology"), data_error);
}

TEST_CASE("corpus tokenizer covers every rendered description") {
    CorpusSpec spec;
    spec.num_cells = 64;
    Corpus c = generate_synthetic_corpus(spec, 7);
    TextTokenizer tk = build_corpus_tokenizer(c);
    for (const CellRecord& r : c.records) {
        for (TextSource m : {TextSource::metadata, TextSource::free_text, TextSource::merged}) {
            TextDescription d = render_description(r, c.ontology, m, tk);
            for (int id : d.tokens) CHECK(id != TextTokenizer::kUnk);
            CHECK(tk.decode(d.tokens) == d.raw);
            CHECK(d.length() >= 1);
        }
    }
}
