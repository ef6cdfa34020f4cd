#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "scmm/inference.hpp"
#include "scmm/training.hpp"

#include <filesystem>

using namespace scmm;
using namespace scmm::inference;
namespace fs = std::filesystem;

namespace {

struct Fixture {
    corpus::Corpus c;
    corpus::TextTokenizer tk;
    model::ParameterStore store;
    std::vector<Candidate> cands;

    Fixture() : store(model::init_parameters(make_config(), 19)) {
        corpus::CorpusSpec spec;
        spec.num_types = 4;
        spec.num_cells = 24;
        spec.num_genes = 64;
        spec.marker_genes_per_type = 6;
        c = corpus::generate_synthetic_corpus(spec, 13);
        tk = corpus::build_corpus_tokenizer(c);
        cands = candidates_for_types(c.type_labels(), c, tk, corpus::TextSource::merged);
    }

    static model::ModelConfig make_config() {
        model::ModelConfig m;
        m.gene_vocab_size = 64;
        m.max_cell_tokens = 16;
        m.gene_embed_dim = 32;
        m.cell_layers = 1;
        m.cell_heads = 2;
        m.text_vocab_size = 128;
        m.text_hidden_dim = 32;
        m.text_layers = 1;
        m.text_heads = 2;
        m.max_text_len = 48;
        m.num_query_tokens = 4;
        m.qformer_hidden_dim = 32;
        m.qformer_layers = 2;
        m.qformer_heads = 2;
        m.cross_attention_freq = 2;
        m.projector_dim = 16;
        m.t2c_layers = 1;
        m.t2c_heads = 2;
        return m;
    }

    corpus::CellTokens tokens(std::size_t i) const { return corpus::cell_tokens(c, i, 16); }
};

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("scmm_inf_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("annotate picks the single candidate and rejects duplicates") {
    Fixture f;
    AnnotationResult one = annotate(f.store, f.tokens(0), {f.cands[2]}, 0.3);
    CHECK(one.predicted_type == f.cands[2].type_label);
    CHECK(one.ranking.size() == 1);
    CHECK(one.rank_of(f.cands[2].type_label) == 1);

    std::vector<Candidate> dup{f.cands[0], f.cands[0]};
    CHECK_THROWS_AS(annotate(f.store, f.tokens(0), dup, 0.3), config_error);
    CHECK_THROWS_AS(annotate(f.store, f.tokens(0), {}, 0.3), config_error);
}

TEST_CASE("annotate is invariant to candidate order") {
    Fixture f;
    AnnotationResult base = annotate(f.store, f.tokens(1), f.cands, 0.5);
    std::vector<Candidate> rev(f.cands.rbegin(), f.cands.rend());
    AnnotationResult flipped = annotate(f.store, f.tokens(1), rev, 0.5);
    CHECK(base.predicted_type == flipped.predicted_type);
    CHECK(base.ranking == flipped.ranking);
}

TEST_CASE("extract_embeddings is a pure map over cells") {
    Fixture f;
    EmbeddingTable t = extract_embeddings(f.store, f.c, {0, 1, 0, 2});
    CHECK(t.rows.size() == 4);
    CHECK(t.dim == 32);
    CHECK(t.rows[0] == t.rows[2]); // duplicate input, identical rows
    CHECK(t.cell_ids[0] == t.cell_ids[2]);

    EmbeddingTable p = extract_embeddings(f.store, f.c, {2, 0, 1});
    CHECK(p.rows[0] == t.rows[3]);
    CHECK(p.rows[1] == t.rows[0]);
    CHECK(p.rows[2] == t.rows[1]);
}

TEST_CASE("caption with greedy decoding is idempotent") {
    Fixture f;
    model::GenerateOptions opt;
    opt.max_len = 16;
    corpus::TextDescription a = caption(f.store, f.tk, f.tokens(3), opt);
    corpus::TextDescription b = caption(f.store, f.tk, f.tokens(3), opt);
    CHECK(a.tokens == b.tokens);
    CHECK(a.raw == b.raw);
}

TEST_CASE("caption type extraction parses the metadata template") {
    CHECK(extract_type_from_caption("This is an alpha cell from pancreas tissue; disease: normal.") ==
          "alpha cell");
    CHECK(extract_type_from_caption("This is a beta cell from liver tissue; disease: normal. More text.") ==
          "beta cell");
    CHECK(extract_type_from_caption("Totally unrelated text") == "");
    CHECK(extract_type_from_caption("This is an alpha cell without the separator") == "");
}

TEST_CASE("pseudo-cell generation honors noise and seeds") {
    Fixture f;
    corpus::TextDescription d = f.cands[0].desc;
    metrics::Points same = generate_pseudo_cells(f.store, d, 3, 0.0, 5);
    CHECK(same.size() == 3);
    CHECK(same[0] == same[1]);
    CHECK(same[1] == same[2]);
    CHECK(same[0].size() == 64);

    metrics::Points a = generate_pseudo_cells(f.store, d, 4, 0.1, 5);
    metrics::Points b = generate_pseudo_cells(f.store, d, 4, 0.1, 5);
    CHECK(a == b);
    metrics::Points c = generate_pseudo_cells(f.store, d, 4, 0.1, 6);
    CHECK(a != c);
    CHECK(a[0] != a[1]);

    CHECK_THROWS_AS(generate_pseudo_cells(f.store, d, 0, 0.0, 1), config_error);
}

TEST_CASE("lambda sweep endpoints match pure rankings and dedupe the grid") {
    Fixture f;
    std::vector<corpus::CellTokens> cells;
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < 8; ++i) {
        cells.push_back(f.tokens(i));
        labels.push_back(f.c.records[i].cell_type);
    }
    std::vector<LambdaSweepRow> rows = lambda_sweep(f.store, cells, labels, f.cands, {0.0, 1.0, 1.0});
    CHECK(rows.size() == 2);

    for (const LambdaSweepRow& row : rows) {
        std::vector<std::string> manual;
        for (const corpus::CellTokens& t : cells)
            manual.push_back(annotate(f.store, t, f.cands, row.lambda).predicted_type);
        CHECK(row.accuracy == doctest::Approx(metrics::label_accuracy(labels, manual)));
        CHECK(row.macro_f1 == doctest::Approx(metrics::macro_f1(labels, manual)));
    }

    CHECK(default_lambda_grid().size() == 15);
}

TEST_CASE("result writers emit the declared headers") {
    Fixture f;
    fs::path dir = fresh_dir("writers");

    EmbeddingTable t = extract_embeddings(f.store, f.c, {0, 1});
    write_embeddings_tsv((dir / "embeddings.tsv").string(), t);
    auto emb_lines = read_lines((dir / "embeddings.tsv").string());
    CHECK(emb_lines.size() == 3);
    CHECK(emb_lines[0].rfind("cell_id\tv1\t", 0) == 0);
    CHECK(split(emb_lines[1], '\t').size() == 33);

    write_annotations_tsv((dir / "annotations.tsv").string(),
                          {{"cell_0", "alpha cell", "alpha cell", 1, 0.25}});
    auto ann_lines = read_lines((dir / "annotations.tsv").string());
    CHECK(ann_lines[0] == "cell_id\tpredicted\ttrue\trank_of_true\tcombined_loss_best");

    write_pseudo_cells_tsv((dir / "pseudo_cells.tsv").string(), {"alpha cell"}, {{0.1, 0.2}});
    auto pc_lines = read_lines((dir / "pseudo_cells.tsv").string());
    CHECK(pc_lines[0] == "sample_id\ttype\tv1\tv2");
    CHECK(pc_lines[1].rfind("s0\talpha cell\t", 0) == 0);

    write_lambda_sweep_csv((dir / "lambda_sweep.csv").string(), {{0.5, 0.75, 0.5}});
    CHECK(read_lines((dir / "lambda_sweep.csv").string())[0] == "lambda,accuracy,macro_f1");

    write_confusion_csv((dir / "confusion.csv").string(), {"a", "a", "b"}, {"a", "b", "b"});
    auto conf = read_lines((dir / "confusion.csv").string());
    CHECK(conf[0] == "true_type,a,b");
    CHECK(conf[1] == "a,1,1");
    CHECK(conf[2] == "b,0,1");

    metrics::ClusteringReport cr;
    write_clustering_report_csv((dir / "clustering_report.csv").string(), cr);
    CHECK(read_lines((dir / "clustering_report.csv").string())[0] ==
          "nmi_cell,ari_cell,asw_cell,avg_bio,asw_batch,graph_conn,avg_batch");

    metrics::TextReport tr;
    write_text_report_csv((dir / "text_report.csv").string(), tr);
    CHECK(read_lines((dir / "text_report.csv").string())[0] ==
          "bleu2,rouge2,meteor,mmd,emd,type_accuracy,type_macro_f1");

    write_knn_gen_csv((dir / "knn_gen.csv").string(), {{3, 0.5}, {5, 0.25}, {10, 0.1}, {25, 0.05}});
    auto knn = read_lines((dir / "knn_gen.csv").string());
    CHECK(knn[0] == "k3,k5,k10,k25");
    CHECK(split(knn[1], ',').size() == 4);
}

TEST_CASE("candidate construction requires known types") {
    Fixture f;
    CHECK_THROWS_AS(candidates_for_types({"nonexistent cell"}, f.c, f.tk, corpus::TextSource::merged),
                    data_error);
}
