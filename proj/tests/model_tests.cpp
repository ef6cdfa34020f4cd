#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "scmm/model.hpp"

using namespace scmm;
using namespace scmm::model;
using corpus::CellTokens;
using corpus::TextDescription;
using corpus::TextTokenizer;

namespace {

bool stores_bit_equal(const ParameterStore& a, const ParameterStore& b) {
    if (a.entries.size() != b.entries.size()) return false;
    for (const auto& [name, e] : a.entries) {
        auto it = b.entries.find(name);
        if (it == b.entries.end() || it->second.group != e.group) return false;
        if (!it->second.tensor.bit_equal(e.tensor)) return false;
    }
    return true;
}

CellTokens make_tokens(const ModelConfig& cfg, std::vector<std::pair<std::size_t, double>> real) {
    CellTokens t;
    t.gene_indices.assign(cfg.max_cell_tokens, 0);
    t.values.assign(cfg.max_cell_tokens, 0.0);
    t.mask.assign(cfg.max_cell_tokens, false);
    for (std::size_t i = 0; i < real.size(); ++i) {
        t.gene_indices[i] = real[i].first;
        t.values[i] = real[i].second;
        t.mask[i] = true;
    }
    return t;
}

TextDescription make_desc(std::vector<int> tokens) {
    TextDescription d;
    d.tokens = std::move(tokens);
    d.raw = "synthetic";
    return d;
}

// Analytic parameter count assembled from the config alone; the independent
// route against ParameterStore bookkeeping.
std::size_t analytic_parameter_count(const ModelConfig& c) {
    auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };
    auto ln = [](std::size_t d) { return 2 * d; };
    auto attn = [&](std::size_t d, std::size_t kv) {
        return linear(d, d) + linear(kv, d) + linear(kv, d) + linear(d, d);
    };
    auto ffn = [&](std::size_t d) { return linear(d, 4 * d) + linear(4 * d, d); };

    std::size_t ged = c.gene_embed_dim, qh = c.qformer_hidden_dim, td = c.text_hidden_dim;
    std::size_t n = 0;
    n += c.gene_vocab_size * ged + ged;               // gene embed + cls
    n += linear(1, ged) + linear(ged, ged);           // value mlp
    if (c.cell_positional) n += (c.max_cell_tokens + 1) * ged;
    n += c.cell_layers * (ln(ged) * 2 + attn(ged, ged) + ffn(ged));
    n += ln(ged);

    n += c.num_query_tokens * qh + c.text_vocab_size * qh + c.max_text_len * qh;
    for (std::size_t l = 0; l < c.qformer_layers; ++l) {
        n += ln(qh) * 2 + attn(qh, qh) + ffn(qh);
        if (l % c.cross_attention_freq == 0) n += ln(qh) + attn(qh, ged);
    }
    n += ln(qh) + linear(qh, c.projector_dim) * 2 + linear(qh, 1);
    if (c.projector_kind == "mlp") n += linear(ged, qh) + linear(qh, qh);

    n += c.text_vocab_size * td + (c.effective_prompt_len() + c.max_text_len + 1) * td;
    n += linear(c.projector_dim, td);
    n += c.text_layers * (ln(td) * 2 + attn(td, td) + ffn(td));
    n += ln(td) + linear(td, c.text_vocab_size);

    n += linear(td, td) + linear(td, ged) + c.effective_prompt_len() * ged;
    n += c.t2c_layers * (ln(ged) * 2 + attn(ged, ged) + ffn(ged));
    n += ln(ged);

    n += linear(ged, c.gene_vocab_size);
    return n;
}

} // namespace

TEST_CASE("init_parameters is deterministic in (config, seed)") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore a = init_parameters(cfg, 17);
    ParameterStore b = init_parameters(cfg, 17);
    CHECK(stores_bit_equal(a, b));
    ParameterStore c = init_parameters(cfg, 18);
    CHECK(!stores_bit_equal(a, c));
    for (ParamGroup g : all_groups()) CHECK(a.trainable.at(g));
}

TEST_CASE("paper_scale preset carries the published shape") {
    ModelConfig c = ModelConfig::paper_scale();
    c.validate();
    CHECK(c.num_query_tokens == 32);
    CHECK(c.gene_vocab_size == 60697);
    CHECK(c.cross_attention_freq == 2);
    CHECK(c.max_cell_tokens == 2048);
    CHECK(c.gene_embed_dim == 512);
    CHECK(c.qformer_hidden_dim == 768);
    CHECK(c.projector_dim == 256);
    CHECK(c.text_hidden_dim == 2048);
    CHECK(c.max_text_len == 128);
    CHECK(c.t2c_layers == 1);
    CHECK(c.t2c_heads == 4);
    CHECK(c.adapter.rank == 8);
    CHECK(c.adapter.alpha == 32.0);
    CHECK(c.adapter.dropout == 0.1);
}

TEST_CASE("toy preset stays under two million parameters and matches the analytic count") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore store = init_parameters(cfg, 7);
    std::size_t total = store.total_parameters();
    CHECK(total == analytic_parameter_count(cfg));
    CHECK(total < 2000000);
}

TEST_CASE("config validation rejects bad shapes and the max-pool stub") {
    ModelConfig cfg = ModelConfig::toy();
    cfg.gene_embed_dim = 65; // not divisible by 4 heads
    CHECK_THROWS_AS(cfg.validate(), config_error);
    cfg = ModelConfig::toy();
    cfg.contrastive_pool = "max";
    CHECK_THROWS_AS(cfg.validate(), config_error);
    cfg = ModelConfig::toy();
    cfg.projector_kind = "conv";
    CHECK_THROWS_AS(cfg.validate(), config_error);
}

TEST_CASE("encode_cell rejects out-of-vocabulary gene indices") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore store = init_parameters(cfg, 7);
    Workspace ws(store);
    CellTokens bad = make_tokens(cfg, {{cfg.gene_vocab_size, 0.1}});
    CHECK_THROWS_AS(encode_cell(ws, bad), data_error);
}

TEST_CASE("masked positions are bit-opaque to the encoder output") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore store = init_parameters(cfg, 7);
    CellTokens t = make_tokens(cfg, {{3, 0.4}, {10, 0.3}, {22, 0.2}});

    Workspace ws1(store);
    Tensor out1 = ws1.g.val(encode_cell(ws1, t).states);

    CellTokens perturbed = t;
    perturbed.values[10] = 0.77; // masked slot
    perturbed.gene_indices[12] = 55;
    Workspace ws2(store);
    Tensor out2 = ws2.g.val(encode_cell(ws2, perturbed).states);
    CHECK(out1.bit_equal(out2));
}

TEST_CASE("an all-masked cell depends only on summary-token parameters") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore store = init_parameters(cfg, 7);
    CellTokens empty = make_tokens(cfg, {});

    Workspace ws1(store);
    Tensor base = ws1.g.val(encode_cell(ws1, empty).states);

    // Gene embeddings and value MLP feed only (masked) token rows.
    ParameterStore other = store;
    for (const char* name : {"cell.gene_embed", "cell.value_mlp.fc1.w", "cell.value_mlp.fc2.b"})
        for (double& v : other.at(name).data) v += 0.25;
    Workspace ws2(other);
    Tensor shifted = ws2.g.val(encode_cell(ws2, empty).states);
    CHECK(base.bit_equal(shifted));

    ParameterStore cls_changed = store;
    for (double& v : cls_changed.at("cell.cls").data) v += 0.25;
    Workspace ws3(cls_changed);
    CHECK(!base.bit_equal(ws3.g.val(encode_cell(ws3, empty).states)));
}

TEST_CASE("token permutation leaves the pooled summary unchanged without positions") {
    ModelConfig cfg = ModelConfig::toy();
    REQUIRE(!cfg.cell_positional);
    ParameterStore store = init_parameters(cfg, 9);
    CellTokens a = make_tokens(cfg, {{5, 0.5}, {9, 0.4}, {70, 0.1}});
    CellTokens b = make_tokens(cfg, {{9, 0.4}, {5, 0.5}, {70, 0.1}});

    Workspace wa(store), wb(store);
    Tensor sa = wa.g.val(ad::slice_rows(encode_cell(wa, a).states, 0, 1));
    Tensor sb = wb.g.val(ad::slice_rows(encode_cell(wb, b).states, 0, 1));
    for (std::size_t i = 0; i < sa.size(); ++i) CHECK(sa.data[i] == doctest::Approx(sb.data[i]).epsilon(1e-9));
}

TEST_CASE("cell feature is unit-norm under arbitrary parameters") {
    ModelConfig cfg = ModelConfig::toy();
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        ParameterStore store = init_parameters(cfg, seed);
        Workspace ws(store);
        CellTokens t = make_tokens(cfg, {{1, 0.6}, {64, 0.2}});
        CellFeatureV f = project_cell_to_text(ws, encode_cell(ws, t));
        const Tensor& pooled = ws.g.val(f.pooled);
        CHECK(pooled.rows == 1);
        CHECK(pooled.cols == cfg.projector_dim);
        CHECK(l2_norm(pooled.data) == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(ws.g.val(f.query_states).rows == cfg.num_query_tokens);
    }
}

TEST_CASE("zeroed cross-attention output makes the cell feature input-independent") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore store = init_parameters(cfg, 11);
    for (auto& [name, e] : store.entries)
        if (name.find(".cross.wo.") != std::string::npos) e.tensor.fill(0.0);

    CellTokens t1 = make_tokens(cfg, {{2, 0.5}, {40, 0.3}});
    CellTokens t2 = make_tokens(cfg, {{7, 0.7}, {90, 0.1}, {17, 0.05}});
    Workspace w1(store), w2(store);
    Tensor f1 = w1.g.val(project_cell_to_text(w1, encode_cell(w1, t1)).pooled);
    Tensor f2 = w2.g.val(project_cell_to_text(w2, encode_cell(w2, t2)).pooled);
    CHECK(f1.bit_equal(f2));
}

TEST_CASE("distinct cells produce distinct pooled features") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore store = init_parameters(cfg, 11);
    CellTokens t1 = make_tokens(cfg, {{2, 0.5}, {40, 0.3}});
    CellTokens t2 = make_tokens(cfg, {{7, 0.7}, {90, 0.1}});
    Workspace w1(store), w2(store);
    Tensor f1 = w1.g.val(project_cell_to_text(w1, encode_cell(w1, t1)).pooled);
    Tensor f2 = w2.g.val(project_cell_to_text(w2, encode_cell(w2, t2)).pooled);
    double cos = dot(f1.data, f2.data);
    CHECK(cos < 1.0 - 1e-9);
}

TEST_CASE("text embedding is unit-norm deterministic and padding-free") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore store = init_parameters(cfg, 5);
    TextDescription d = make_desc({4, 17, 30, TextTokenizer::kEos});
    Workspace w1(store), w2(store);
    Tensor e1 = w1.g.val(embed_text(w1, d));
    Tensor e2 = w2.g.val(embed_text(w2, d));
    CHECK(e1.bit_equal(e2));
    CHECK(l2_norm(e1.data) == doctest::Approx(1.0).epsilon(1e-6));

    Workspace w3(store);
    Tensor single = w3.g.val(embed_text(w3, make_desc({9})));
    CHECK(single.cols == cfg.projector_dim);
    CHECK(l2_norm(single.data) == doctest::Approx(1.0).epsilon(1e-6));

    std::vector<int> too_long(cfg.max_text_len + 1, 4);
    Workspace w4(store);
    CHECK_THROWS_AS(embed_text(w4, make_desc(too_long)), data_error);
}

TEST_CASE("match logit is finite and sensitive to the text") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore store = init_parameters(cfg, 6);
    CellTokens t = make_tokens(cfg, {{3, 0.4}, {11, 0.2}});
    Workspace ws(store);
    CellSeq cell = encode_cell(ws, t);
    double z1 = ws.g.val(match_logit(ws, cell, make_desc({4, 8, 2}))).data[0];
    double z2 = ws.g.val(match_logit(ws, cell, make_desc({9, 21, 2}))).data[0];
    CHECK(std::isfinite(z1));
    CHECK(std::isfinite(z2));
    CHECK(z1 != z2);
}

TEST_CASE("greedy generation is deterministic and honors max_len") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore store = init_parameters(cfg, 8);
    Workspace ws(store);
    CellTokens t = make_tokens(cfg, {{3, 0.4}});
    CellFeatureV f = project_cell_to_text(ws, encode_cell(ws, t));
    Tensor qs = ws.g.val(f.query_states);
    TextTokenizer tk = TextTokenizer::build({"a b c"});

    GenerateOptions opt;
    opt.max_len = 12;
    corpus::TextDescription g1 = generate_text(store, qs, tk, opt);
    corpus::TextDescription g2 = generate_text(store, qs, tk, opt);
    CHECK(g1.tokens == g2.tokens);
    CHECK(g1.tokens.size() <= 12);

    opt.max_len = 1;
    corpus::TextDescription one = generate_text(store, qs, tk, opt);
    CHECK(one.tokens.size() == 1);

    GenerateOptions sampled;
    sampled.greedy = false;
    sampled.temperature = 1.0;
    sampled.seed = 33;
    sampled.max_len = 12;
    corpus::TextDescription s1 = generate_text(store, qs, tk, sampled);
    corpus::TextDescription s2 = generate_text(store, qs, tk, sampled);
    CHECK(s1.tokens == s2.tokens);
}

TEST_CASE("text-to-cell projection yields prompt states of the configured shape") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore store = init_parameters(cfg, 4);
    Workspace w1(store), w2(store), w3(store);
    Tensor p1 = w1.g.val(project_text_to_cell(w1, make_desc({5, 9, 2})));
    Tensor p2 = w2.g.val(project_text_to_cell(w2, make_desc({5, 9, 2})));
    Tensor p3 = w3.g.val(project_text_to_cell(w3, make_desc({6, 14, 2})));
    CHECK(p1.rows == cfg.effective_prompt_len());
    CHECK(p1.cols == cfg.gene_embed_dim);
    CHECK(p1.bit_equal(p2));
    double diff = 0;
    for (std::size_t i = 0; i < p1.size(); ++i) diff += (p1.data[i] - p3.data[i]) * (p1.data[i] - p3.data[i]);
    CHECK(std::sqrt(diff) > 0.0);
    CHECK(p1.all_finite());
}

TEST_CASE("pseudo-cell prediction is deterministic with M outputs") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore store = init_parameters(cfg, 4);
    Workspace w1(store);
    ad::Value prompt1 = project_text_to_cell(w1, make_desc({5, 9, 2}));
    Tensor x1 = w1.g.val(predict_pseudo_cell(w1, prompt1));
    Workspace w2(store);
    ad::Value prompt2 = project_text_to_cell(w2, make_desc({5, 9, 2}));
    Tensor x2 = w2.g.val(predict_pseudo_cell(w2, prompt2));
    CHECK(x1.rows == 1);
    CHECK(x1.cols == cfg.gene_vocab_size);
    CHECK(x1.bit_equal(x2));
    CHECK(x1.all_finite());
}

TEST_CASE("mlp projector variant keeps the cell feature contract") {
    ModelConfig cfg = ModelConfig::toy();
    cfg.projector_kind = "mlp";
    ParameterStore store = init_parameters(cfg, 12);
    Workspace ws(store);
    CellTokens t = make_tokens(cfg, {{1, 0.6}, {2, 0.4}});
    CellFeatureV f = project_cell_to_text(ws, encode_cell(ws, t));
    const Tensor& qs = ws.g.val(f.query_states);
    CHECK(qs.rows == cfg.num_query_tokens);
    CHECK(l2_norm(ws.g.val(f.pooled).data) == doctest::Approx(1.0).epsilon(1e-6));
    // All query slots replicate one vector.
    for (std::size_t r = 1; r < qs.rows; ++r)
        for (std::size_t c = 0; c < qs.cols; ++c) CHECK(qs.at(r, c) == qs.at(0, c));
}

TEST_CASE("fresh adapters are a bit-exact identity and removable") {
    ModelConfig cfg = ModelConfig::toy();
    cfg.adapter = AdapterConfig{4, 8.0, 0.0};
    ParameterStore store = init_parameters(cfg, 3);
    CellTokens t = make_tokens(cfg, {{3, 0.4}, {11, 0.2}});
    TextDescription d = make_desc({4, 8, 2});

    Workspace base_ws(store);
    Tensor base_logits = base_ws.g.val(decode_text_logits(base_ws, nullptr, d.tokens));

    apply_adapters(store, {ParamGroup::text_backbone}, 99);
    std::size_t adapter_params = store.group_parameters(ParamGroup::adapters);
    std::size_t per_target = cfg.adapter.rank * (cfg.text_hidden_dim + cfg.text_hidden_dim);
    CHECK(adapter_params == cfg.text_layers * 4 * per_target);

    Workspace lora_ws(store);
    Tensor lora_logits = lora_ws.g.val(decode_text_logits(lora_ws, nullptr, d.tokens));
    CHECK(base_logits.bit_equal(lora_logits));

    // Move the up-projection off zero: outputs change.
    for (auto& [name, e] : store.entries)
        if (e.group == ParamGroup::adapters && name.find(".lora_b") != std::string::npos)
            for (double& v : e.tensor.data) v = 0.01;
    Workspace moved_ws(store);
    CHECK(!base_logits.bit_equal(moved_ws.g.val(decode_text_logits(moved_ws, nullptr, d.tokens))));

    remove_adapters(store);
    CHECK(store.group_parameters(ParamGroup::adapters) == 0);
    Workspace stripped_ws(store);
    CHECK(base_logits.bit_equal(stripped_ws.g.val(decode_text_logits(stripped_ws, nullptr, d.tokens))));
}

TEST_CASE("adapters reject groups without attention projections") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore store = init_parameters(cfg, 3);
    CHECK_THROWS_AS(apply_adapters(store, {ParamGroup::pseudo_cell_head}, 1), config_error);
}

TEST_CASE("frozen groups produce no gradient leaves") {
    ModelConfig cfg = ModelConfig::toy();
    ParameterStore store = init_parameters(cfg, 3);
    store.trainable[ParamGroup::cell_encoder] = false;
    Workspace ws(store, true);
    CellTokens t = make_tokens(cfg, {{3, 0.4}});
    CellFeatureV f = project_cell_to_text(ws, encode_cell(ws, t));
    ad::Value loss = ad::sum_all(ad::mul(f.pooled, f.pooled));
    ws.g.backward(loss);
    Tensor frozen_grad = ws.leaf_grad("cell.gene_embed");
    for (double v : frozen_grad.data) CHECK(v == 0.0);
    Tensor live_grad = ws.leaf_grad("qf.cell_proj.w");
    double norm = 0;
    for (double v : live_grad.data) norm += v * v;
    CHECK(norm > 0.0);
}
