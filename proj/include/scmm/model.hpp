#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "scmm/autodiff.hpp"
#include "scmm/corpus.hpp"

namespace scmm::model {

struct AdapterConfig {
    std::size_t rank = 8;
    double alpha = 32.0;
    double dropout = 0.1;
};

// Architecture knobs for the cell encoder, text decoder, both projectors and
// the pseudo-cell head. The paper_scale preset pins the published shape; toy
// is the desk-scale default every test trains.
struct ModelConfig {
    std::size_t gene_vocab_size = 128;  // M
    std::size_t max_cell_tokens = 32;   // K
    std::size_t gene_embed_dim = 64;
    std::size_t cell_layers = 2;
    std::size_t cell_heads = 4;
    bool cell_positional = false; // gene tokens are a set; order is a sorting artifact

    std::size_t text_vocab_size = 512;
    std::size_t text_hidden_dim = 64;
    std::size_t text_layers = 2;
    std::size_t text_heads = 4;
    std::size_t max_text_len = 64;

    std::size_t num_query_tokens = 8;
    std::size_t qformer_hidden_dim = 64;
    std::size_t qformer_layers = 2;
    std::size_t qformer_heads = 4;
    std::size_t cross_attention_freq = 2;
    std::size_t projector_dim = 32;

    std::size_t t2c_layers = 1;
    std::size_t t2c_heads = 4;
    std::size_t prompt_len = 0; // 0 -> num_query_tokens

    std::string projector_kind = "qformer";  // or "mlp"
    std::string contrastive_pool = "mean";   // "max" is a declared stub, rejected on use
    AdapterConfig adapter;

    std::size_t effective_prompt_len() const { return prompt_len == 0 ? num_query_tokens : prompt_len; }

    void validate() const {
        auto positive = [](std::size_t v, const char* what) {
            if (v == 0) throw config_error(std::string("model config: ") + what + " must be positive");
        };
        positive(gene_vocab_size, "gene_vocab_size");
        positive(max_cell_tokens, "max_cell_tokens");
        positive(gene_embed_dim, "gene_embed_dim");
        positive(cell_layers, "cell_layers");
        positive(cell_heads, "cell_heads");
        positive(text_vocab_size, "text_vocab_size");
        positive(text_hidden_dim, "text_hidden_dim");
        positive(text_layers, "text_layers");
        positive(text_heads, "text_heads");
        positive(max_text_len, "max_text_len");
        positive(num_query_tokens, "num_query_tokens");
        positive(qformer_hidden_dim, "qformer_hidden_dim");
        positive(qformer_layers, "qformer_layers");
        positive(qformer_heads, "qformer_heads");
        positive(cross_attention_freq, "cross_attention_freq");
        positive(projector_dim, "projector_dim");
        positive(t2c_layers, "t2c_layers");
        positive(t2c_heads, "t2c_heads");
        if (gene_embed_dim % cell_heads != 0)
            throw config_error("model config: gene_embed_dim must be divisible by cell_heads");
        if (text_hidden_dim % text_heads != 0)
            throw config_error("model config: text_hidden_dim must be divisible by text_heads");
        if (qformer_hidden_dim % qformer_heads != 0)
            throw config_error("model config: qformer_hidden_dim must be divisible by qformer_heads");
        if (gene_embed_dim % t2c_heads != 0)
            throw config_error("model config: gene_embed_dim must be divisible by t2c_heads");
        if (projector_kind != "qformer" && projector_kind != "mlp")
            throw config_error("model config: projector must be 'qformer' or 'mlp'");
        if (contrastive_pool == "max")
            throw config_error("model config: contrastive_pool 'max' is a documented stub, not implemented");
        if (contrastive_pool != "mean")
            throw config_error("model config: unknown contrastive_pool '" + contrastive_pool + "'");
        if (adapter.rank == 0) throw config_error("model config: adapter rank must be positive");
        if (adapter.dropout < 0.0 || adapter.dropout >= 1.0)
            throw config_error("model config: adapter dropout must lie in [0,1)");
    }

    static ModelConfig toy() { return ModelConfig{}; }

    // Published architecture shape. Config-level only at desk scale; nothing
    // here instantiates the 60k-gene embedding.
    static ModelConfig paper_scale() {
        ModelConfig c;
        c.gene_vocab_size = 60697;
        c.max_cell_tokens = 2048;
        c.gene_embed_dim = 512;
        c.cell_layers = 12;
        c.cell_heads = 8;
        c.text_vocab_size = 32000;
        c.text_hidden_dim = 2048;
        c.text_layers = 32;
        c.text_heads = 32;
        c.max_text_len = 128;
        c.num_query_tokens = 32;
        c.qformer_hidden_dim = 768;
        c.qformer_layers = 12;
        c.qformer_heads = 12;
        c.cross_attention_freq = 2;
        c.projector_dim = 256;
        c.t2c_layers = 1;
        c.t2c_heads = 4;
        c.adapter = AdapterConfig{8, 32.0, 0.1};
        return c;
    }
};

enum class ParamGroup { cell_encoder, c2t_projector, text_backbone, t2c_projector, pseudo_cell_head, adapters };

inline const std::array<ParamGroup, 6>& all_groups() {
    static const std::array<ParamGroup, 6> g = {ParamGroup::cell_encoder,    ParamGroup::c2t_projector,
                                                ParamGroup::text_backbone,   ParamGroup::t2c_projector,
                                                ParamGroup::pseudo_cell_head, ParamGroup::adapters};
    return g;
}

inline std::string to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::cell_encoder: return "cell_encoder";
        case ParamGroup::c2t_projector: return "c2t_projector";
        case ParamGroup::text_backbone: return "text_backbone";
        case ParamGroup::t2c_projector: return "t2c_projector";
        case ParamGroup::pseudo_cell_head: return "pseudo_cell_head";
        case ParamGroup::adapters: return "adapters";
    }
    throw config_error("unknown parameter group");
}

inline ParamGroup group_from_string(const std::string& s) {
    for (ParamGroup g : all_groups())
        if (to_string(g) == s) return g;
    throw config_error("unknown parameter group: " + s);
}

/// Named parameter tensors partitioned into groups with per-group trainable
/// flags. Values live on the f32 grid so checkpoints round-trip bit-exactly.
struct ParameterStore {
    struct Entry {
        Tensor tensor;
        ParamGroup group;
    };

    ModelConfig config;
    std::map<std::string, Entry> entries;
    std::map<ParamGroup, bool> trainable;

    bool has(const std::string& name) const { return entries.count(name) != 0; }

    Tensor& at(const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw config_error("no parameter named '" + name + "'");
        return it->second.tensor;
    }

    const Tensor& at(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw config_error("no parameter named '" + name + "'");
        return it->second.tensor;
    }

    ParamGroup group_of(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw config_error("no parameter named '" + name + "'");
        return it->second.group;
    }

    bool is_trainable(const std::string& name) const { return trainable.at(group_of(name)); }

    void add(const std::string& name, ParamGroup group, Tensor t) {
        t.quantize_f32_inplace();
        if (!entries.emplace(name, Entry{std::move(t), group}).second)
            throw config_error("duplicate parameter name '" + name + "'");
    }

    std::size_t total_parameters() const {
        std::size_t n = 0;
        for (const auto& [name, e] : entries) n += e.tensor.size();
        return n;
    }

    std::size_t group_parameters(ParamGroup g) const {
        std::size_t n = 0;
        for (const auto& [name, e] : entries)
            if (e.group == g) n += e.tensor.size();
        return n;
    }

    /// Snapshot of every tensor in a group, for freeze-soundness comparisons.
    std::map<std::string, Tensor> snapshot_group(ParamGroup g) const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, e] : entries)
            if (e.group == g) out[name] = e.tensor;
        return out;
    }

    bool group_bit_equal(const std::map<std::string, Tensor>& snapshot, ParamGroup g) const {
        std::size_t seen = 0;
        for (const auto& [name, e] : entries) {
            if (e.group != g) continue;
            ++seen;
            auto it = snapshot.find(name);
            if (it == snapshot.end() || !it->second.bit_equal(e.tensor)) return false;
        }
        return seen == snapshot.size();
    }
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

// Every tensor draws from its own name-keyed substream, so initialization is
// independent of creation order.
inline Tensor init_weight(const std::string& name, std::size_t rows, std::size_t cols, std::uint64_t seed) {
    rng::Stream s(rng::mix(seed, crc32(name)));
    Tensor t(rows, cols);
    double scale = 1.0 / std::sqrt(double(rows)); // 1/sqrt(fan_in) in the x*W convention
    for (double& v : t.data) v = s.normal() * scale;
    return t;
}

inline Tensor init_embed(const std::string& name, std::size_t rows, std::size_t cols, std::uint64_t seed) {
    rng::Stream s(rng::mix(seed, crc32(name)));
    Tensor t(rows, cols);
    double scale = 1.0 / std::sqrt(double(cols));
    for (double& v : t.data) v = s.normal() * scale;
    return t;
}

struct Builder {
    ParameterStore& store;
    std::uint64_t seed;

    void weight(const std::string& name, ParamGroup g, std::size_t in, std::size_t out) {
        store.add(name, g, init_weight(name, in, out, seed));
    }
    void bias(const std::string& name, ParamGroup g, std::size_t dim) {
        store.add(name, g, Tensor(1, dim, 0.0));
    }
    void linear(const std::string& prefix, ParamGroup g, std::size_t in, std::size_t out) {
        weight(prefix + ".w", g, in, out);
        bias(prefix + ".b", g, out);
    }
    void embed(const std::string& name, ParamGroup g, std::size_t rows, std::size_t cols) {
        store.add(name, g, init_embed(name, rows, cols, seed));
    }
    void layernorm(const std::string& prefix, ParamGroup g, std::size_t dim) {
        store.add(prefix + ".gamma", g, Tensor(1, dim, 1.0));
        store.add(prefix + ".beta", g, Tensor(1, dim, 0.0));
    }
    // Self-attention projections; kv_dim covers cross-attention over a memory
    // of a different width.
    void attention(const std::string& prefix, ParamGroup g, std::size_t dim, std::size_t kv_dim) {
        linear(prefix + ".wq", g, dim, dim);
        linear(prefix + ".wk", g, kv_dim, dim);
        linear(prefix + ".wv", g, kv_dim, dim);
        linear(prefix + ".wo", g, dim, dim);
    }
    void ffn(const std::string& prefix, ParamGroup g, std::size_t dim) {
        linear(prefix + ".w1", g, dim, 4 * dim);
        linear(prefix + ".w2", g, 4 * dim, dim);
    }
};

} // namespace detail

/// Deterministic random initialization of the full parameter set; all groups
/// start trainable.
inline ParameterStore init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParameterStore store;
    store.config = cfg;
    for (ParamGroup g : all_groups()) store.trainable[g] = true;
    detail::Builder b{store, seed};

    const std::size_t ged = cfg.gene_embed_dim;
    const std::size_t qh = cfg.qformer_hidden_dim;
    const std::size_t td = cfg.text_hidden_dim;

    // Cell encoder.
    b.embed("cell.gene_embed", ParamGroup::cell_encoder, cfg.gene_vocab_size, ged);
    b.embed("cell.cls", ParamGroup::cell_encoder, 1, ged);
    b.linear("cell.value_mlp.fc1", ParamGroup::cell_encoder, 1, ged);
    b.linear("cell.value_mlp.fc2", ParamGroup::cell_encoder, ged, ged);
    if (cfg.cell_positional)
        b.embed("cell.pos", ParamGroup::cell_encoder, cfg.max_cell_tokens + 1, ged);
    for (std::size_t l = 0; l < cfg.cell_layers; ++l) {
        std::string p = "cell.layer" + std::to_string(l);
        b.layernorm(p + ".ln1", ParamGroup::cell_encoder, ged);
        b.attention(p + ".attn", ParamGroup::cell_encoder, ged, ged);
        b.layernorm(p + ".ln2", ParamGroup::cell_encoder, ged);
        b.ffn(p + ".ffn", ParamGroup::cell_encoder, ged);
    }
    b.layernorm("cell.ln_out", ParamGroup::cell_encoder, ged);

    // Cell-to-text projector (query transformer with its own text tower).
    b.embed("qf.queries", ParamGroup::c2t_projector, cfg.num_query_tokens, qh);
    b.embed("qf.text_embed", ParamGroup::c2t_projector, cfg.text_vocab_size, qh);
    b.embed("qf.text_pos", ParamGroup::c2t_projector, cfg.max_text_len, qh);
    for (std::size_t l = 0; l < cfg.qformer_layers; ++l) {
        std::string p = "qf.layer" + std::to_string(l);
        b.layernorm(p + ".ln1", ParamGroup::c2t_projector, qh);
        b.attention(p + ".self", ParamGroup::c2t_projector, qh, qh);
        if (l % cfg.cross_attention_freq == 0) {
            b.layernorm(p + ".ln_cross", ParamGroup::c2t_projector, qh);
            b.attention(p + ".cross", ParamGroup::c2t_projector, qh, ged);
        }
        b.layernorm(p + ".ln2", ParamGroup::c2t_projector, qh);
        b.ffn(p + ".ffn", ParamGroup::c2t_projector, qh);
    }
    b.layernorm("qf.ln_out", ParamGroup::c2t_projector, qh);
    b.linear("qf.cell_proj", ParamGroup::c2t_projector, qh, cfg.projector_dim);
    b.linear("qf.text_proj", ParamGroup::c2t_projector, qh, cfg.projector_dim);
    b.linear("qf.match_head", ParamGroup::c2t_projector, qh, 1);
    if (cfg.projector_kind == "mlp") {
        b.linear("qf.mlp.fc1", ParamGroup::c2t_projector, ged, qh);
        b.linear("qf.mlp.fc2", ParamGroup::c2t_projector, qh, qh);
    }

    // Text decoder.
    b.embed("txt.embed", ParamGroup::text_backbone, cfg.text_vocab_size, td);
    b.embed("txt.pos", ParamGroup::text_backbone, cfg.effective_prompt_len() + cfg.max_text_len + 1, td);
    b.linear("txt.prompt_proj", ParamGroup::text_backbone, cfg.projector_dim, td);
    for (std::size_t l = 0; l < cfg.text_layers; ++l) {
        std::string p = "txt.layer" + std::to_string(l);
        b.layernorm(p + ".ln1", ParamGroup::text_backbone, td);
        b.attention(p + ".attn", ParamGroup::text_backbone, td, td);
        b.layernorm(p + ".ln2", ParamGroup::text_backbone, td);
        b.ffn(p + ".ffn", ParamGroup::text_backbone, td);
    }
    b.layernorm("txt.ln_out", ParamGroup::text_backbone, td);
    b.linear("txt.lm_head", ParamGroup::text_backbone, td, cfg.text_vocab_size);

    // Text-to-cell projector.
    b.linear("t2c.mlp.fc1", ParamGroup::t2c_projector, td, td);
    b.linear("t2c.mlp.fc2", ParamGroup::t2c_projector, td, ged);
    b.embed("t2c.latents", ParamGroup::t2c_projector, cfg.effective_prompt_len(), ged);
    for (std::size_t l = 0; l < cfg.t2c_layers; ++l) {
        std::string p = "t2c.layer" + std::to_string(l);
        b.layernorm(p + ".ln1", ParamGroup::t2c_projector, ged);
        b.attention(p + ".cross", ParamGroup::t2c_projector, ged, ged);
        b.layernorm(p + ".ln2", ParamGroup::t2c_projector, ged);
        b.ffn(p + ".ffn", ParamGroup::t2c_projector, ged);
    }
    b.layernorm("t2c.ln_out", ParamGroup::t2c_projector, ged);

    // Gene prediction head.
    b.linear("head.gene", ParamGroup::pseudo_cell_head, ged, cfg.gene_vocab_size);

    return store;
}

// ---------------------------------------------------------------------------
// Low-rank adapters
// ---------------------------------------------------------------------------

inline bool is_attention_projection(const std::string& name) {
    bool in_attention = name.find(".attn.") != std::string::npos ||
                        name.find(".self.") != std::string::npos ||
                        name.find(".cross.") != std::string::npos;
    bool is_weight = name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0;
    return in_attention && is_weight;
}

/// Attaches rank-r factors to attention projection weights in the target
/// groups. The up-projection starts at zero, so forwards are unchanged until
/// training moves it.
inline void apply_adapters(ParameterStore& store, const std::vector<ParamGroup>& target_groups,
                           std::uint64_t seed) {
    const AdapterConfig& a = store.config.adapter;
    std::vector<std::pair<std::string, std::size_t>> targets; // name, fan_out
    for (const auto& [name, e] : store.entries) {
        if (e.group == ParamGroup::adapters) continue;
        bool in_target = false;
        for (ParamGroup g : target_groups) in_target = in_target || g == e.group;
        if (in_target && is_attention_projection(name)) targets.emplace_back(name, e.tensor.cols);
    }
    if (targets.empty()) throw config_error("apply_adapters: no attention projections found in target groups");
    for (const auto& [name, fan_out] : targets) {
        const Tensor& w = store.at(name);
        store.add(name + ".lora_a", ParamGroup::adapters,
                  detail::init_weight(name + ".lora_a", w.rows, a.rank, seed));
        store.add(name + ".lora_b", ParamGroup::adapters, Tensor(a.rank, fan_out, 0.0));
    }
}

inline void remove_adapters(ParameterStore& store) {
    for (auto it = store.entries.begin(); it != store.entries.end();) {
        if (it->second.group == ParamGroup::adapters)
            it = store.entries.erase(it);
        else
            ++it;
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// One forward pass context: owns the tape, hands out parameter leaves (one
/// per name), and carries train-mode dropout state.
struct Workspace {
    ad::Graph g;
    const ParameterStore* store = nullptr;
    bool train_mode = false;
    rng::Stream dropout_rng{0};

    explicit Workspace(const ParameterStore& s, bool train = false, std::uint64_t dropout_seed = 0)
        : store(&s), train_mode(train), dropout_rng(dropout_seed) {}

    const ModelConfig& cfg() const { return store->config; }

    ad::Value p(const std::string& name) {
        auto it = leaves_.find(name);
        if (it != leaves_.end()) return it->second;
        auto entry = store->entries.find(name);
        if (entry == store->entries.end()) throw config_error("no parameter named '" + name + "'");
        ad::Value v = g.leaf(entry->second.tensor, store->trainable.at(entry->second.group));
        leaves_.emplace(name, v);
        return v;
    }

    /// Gradient accumulated on a parameter leaf during backward, if any.
    bool leaf_used(const std::string& name) const { return leaves_.count(name) != 0; }

    Tensor leaf_grad(const std::string& name) {
        auto it = leaves_.find(name);
        if (it == leaves_.end()) {
            const Tensor& t = store->at(name);
            return Tensor(t.rows, t.cols, 0.0);
        }
        return g.grad(it->second);
    }

  private:
    std::map<std::string, ad::Value> leaves_;
};

namespace detail {

inline bool all_zero(const Tensor& t) {
    for (double v : t.data)
        if (v != 0.0) return false;
    return true;
}

// x * W + b, with the low-rank adapter delta when one is attached to W.
inline ad::Value linear(Workspace& ws, ad::Value x, const std::string& prefix) {
    ad::Value y = ad::matmul(x, ws.p(prefix + ".w"));
    std::string a_name = prefix + ".w.lora_a";
    if (ws.store->has(a_name)) {
        const Tensor& b_val = ws.store->at(prefix + ".w.lora_b");
        bool b_zero = all_zero(b_val);
        bool b_train = ws.store->trainable.at(ParamGroup::adapters) && ws.train_mode;
        // Skip the delta only when it is exactly zero and cannot receive
        // gradient, keeping base outputs bit-identical at initialization.
        if (!b_zero || b_train) {
            const AdapterConfig& a = ws.cfg().adapter;
            ad::Value xin = x;
            if (ws.train_mode && a.dropout > 0.0) xin = ad::dropout(x, a.dropout, ws.dropout_rng);
            ad::Value delta = ad::matmul(ad::matmul(xin, ws.p(a_name)), ws.p(prefix + ".w.lora_b"));
            y = ad::add(y, ad::scale(delta, a.alpha / double(a.rank)));
        }
    }
    return ad::add_rowvec(y, ws.p(prefix + ".b"));
}

inline ad::Value layernorm(Workspace& ws, ad::Value x, const std::string& prefix) {
    return ad::layernorm_rows(x, ws.p(prefix + ".gamma"), ws.p(prefix + ".beta"));
}

// Additive attention mask over keys; -1e30 underflows to exactly zero weight
// after the max-shifted softmax.
inline Tensor key_mask_bias(std::size_t q_rows, const std::vector<bool>* key_mask, std::size_t m, bool causal,
                            std::size_t causal_offset) {
    Tensor bias(q_rows, m, 0.0);
    for (std::size_t i = 0; i < q_rows; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            bool masked = key_mask != nullptr && !(*key_mask)[j];
            if (causal && j > i + causal_offset) masked = true;
            if (masked) bias.at(i, j) = -1e30;
        }
    return bias;
}

/// Multi-head attention. q_in: n x dq rows; kv_in: m x dk memory. Weights map
/// both into the model width of q_in's stack.
inline ad::Value attention(Workspace& ws, const std::string& prefix, ad::Value q_in, ad::Value kv_in,
                           const std::vector<bool>* key_mask, bool causal, std::size_t heads) {
    ad::Value q = linear(ws, q_in, prefix + ".wq");
    ad::Value k = linear(ws, kv_in, prefix + ".wk");
    ad::Value v = linear(ws, kv_in, prefix + ".wv");
    std::size_t dim = ws.g.val(q).cols;
    std::size_t n = ws.g.val(q).rows;
    std::size_t m = ws.g.val(k).rows;
    if (dim % heads != 0) throw config_error("attention width not divisible by head count");
    std::size_t dh = dim / heads;
    ad::Value bias = ws.g.constant(key_mask_bias(n, key_mask, m, causal, 0));

    std::vector<ad::Value> head_outs;
    head_outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        ad::Value qh = ad::slice_cols(q, h * dh, dh);
        ad::Value kh = ad::slice_cols(k, h * dh, dh);
        ad::Value vh = ad::slice_cols(v, h * dh, dh);
        ad::Value scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), 1.0 / std::sqrt(double(dh)));
        ad::Value weights = ad::softmax_rows(ad::add(scores, bias));
        head_outs.push_back(ad::matmul(weights, vh));
    }
    return linear(ws, ad::concat_cols(head_outs), prefix + ".wo");
}

inline ad::Value ffn(Workspace& ws, ad::Value x, const std::string& prefix) {
    return linear(ws, ad::gelu(linear(ws, x, prefix + ".w1")), prefix + ".w2");
}

// Pre-LN residual block: self-attention then feed-forward.
inline ad::Value encoder_block(Workspace& ws, ad::Value x, const std::string& layer_prefix,
                               const std::string& attn_name, const std::vector<bool>* mask, bool causal,
                               std::size_t heads) {
    ad::Value h = layernorm(ws, x, layer_prefix + ".ln1");
    x = ad::add(x, attention(ws, layer_prefix + "." + attn_name, h, h, mask, causal, heads));
    return ad::add(x, ffn(ws, layernorm(ws, x, layer_prefix + ".ln2"), layer_prefix + ".ffn"));
}

} // namespace detail

/// Contextualized per-token states from the cell encoder; row 0 is the cell
/// summary token. Masked rows are zeroed and never reach any pooled output.
struct CellSeq {
    ad::Value states;       // (K+1) x gene_embed_dim
    std::vector<bool> mask; // length K+1, position 0 always true
};

inline CellSeq encode_cell(Workspace& ws, const corpus::CellTokens& tokens) {
    const ModelConfig& cfg = ws.cfg();
    if (tokens.capacity() != cfg.max_cell_tokens)
        throw data_error("encode_cell: token capacity " + std::to_string(tokens.capacity()) +
                         " != configured K " + std::to_string(cfg.max_cell_tokens));
    for (std::size_t i = 0; i < tokens.capacity(); ++i)
        if (tokens.mask[i] && tokens.gene_indices[i] >= cfg.gene_vocab_size)
            throw data_error("encode_cell: gene index " + std::to_string(tokens.gene_indices[i]) +
                             " outside vocabulary of size " + std::to_string(cfg.gene_vocab_size));

    ad::Value gene_emb = ad::gather_rows(ws.p("cell.gene_embed"), tokens.gene_indices);
    Tensor vals(tokens.capacity(), 1);
    for (std::size_t i = 0; i < tokens.capacity(); ++i) vals.at(i, 0) = tokens.values[i];
    ad::Value v = ws.g.constant(std::move(vals));
    ad::Value val_emb = detail::linear(ws, ad::gelu(detail::linear(ws, v, "cell.value_mlp.fc1")),
                                       "cell.value_mlp.fc2");
    ad::Value x = ad::concat_rows({ws.p("cell.cls"), ad::add(gene_emb, val_emb)});

    std::vector<bool> mask(tokens.capacity() + 1, true);
    for (std::size_t i = 0; i < tokens.capacity(); ++i) mask[i + 1] = tokens.mask[i];

    if (cfg.cell_positional) x = ad::add(x, ad::slice_rows(ws.p("cell.pos"), 0, tokens.capacity() + 1));

    for (std::size_t l = 0; l < cfg.cell_layers; ++l)
        x = detail::encoder_block(ws, x, "cell.layer" + std::to_string(l), "attn", &mask, false, cfg.cell_heads);
    x = detail::layernorm(ws, x, "cell.ln_out");

    // Zero masked rows so padding cannot leak anywhere downstream.
    x = ad::mask_rows(x, mask);
    return CellSeq{x, std::move(mask)};
}

/// Cell encoder run with soft prompt states in place of gene tokens; returns
/// the summary-token state.
inline ad::Value encode_prompted_summary(Workspace& ws, ad::Value prompt_states) {
    const ModelConfig& cfg = ws.cfg();
    ad::Value x = ad::concat_rows({ws.p("cell.cls"), prompt_states});
    for (std::size_t l = 0; l < cfg.cell_layers; ++l)
        x = detail::encoder_block(ws, x, "cell.layer" + std::to_string(l), "attn", nullptr, false, cfg.cell_heads);
    x = detail::layernorm(ws, x, "cell.ln_out");
    return ad::slice_rows(x, 0, 1);
}

struct CellFeatureV {
    ad::Value query_states; // num_query_tokens x projector_dim
    ad::Value pooled;       // 1 x projector_dim, unit norm
};

namespace detail {

// Mean over unmasked rows; masked rows are already zero.
inline ad::Value masked_mean_rows(Workspace& ws, ad::Value states, const std::vector<bool>& mask) {
    std::size_t real = 0;
    for (bool b : mask) real += b ? 1 : 0;
    ad::Value m = ad::mean_rows(states);
    return ad::scale(m, double(mask.size()) / double(real));
}

inline ad::Value qformer_stack(Workspace& ws, ad::Value x, const std::vector<bool>* self_mask,
                               const CellSeq* memory) {
    const ModelConfig& cfg = ws.cfg();
    for (std::size_t l = 0; l < cfg.qformer_layers; ++l) {
        std::string p = "qf.layer" + std::to_string(l);
        ad::Value h = layernorm(ws, x, p + ".ln1");
        x = ad::add(x, attention(ws, p + ".self", h, h, self_mask, false, cfg.qformer_heads));
        if (memory != nullptr && l % cfg.cross_attention_freq == 0) {
            x = ad::add(x, attention(ws, p + ".cross", layernorm(ws, x, p + ".ln_cross"), memory->states,
                                     &memory->mask, false, cfg.qformer_heads));
        }
        x = ad::add(x, ffn(ws, layernorm(ws, x, p + ".ln2"), p + ".ffn"));
    }
    return layernorm(ws, x, "qf.ln_out");
}

} // namespace detail

/// Cell-to-text projector: learnable queries distill the encoder states into
/// projector-space query states plus a unit-norm pooled feature. The mlp
/// variant replaces the query transformer with a feed-forward map over the
/// mean encoder state, replicated across query slots.
inline CellFeatureV project_cell_to_text(Workspace& ws, const CellSeq& cell) {
    const ModelConfig& cfg = ws.cfg();
    if (std::size_t(ws.g.val(cell.states).cols) != cfg.gene_embed_dim)
        throw config_error("project_cell_to_text: encoder width mismatch");
    ad::Value qs;
    if (cfg.projector_kind == "mlp") {
        ad::Value pooled_h = detail::masked_mean_rows(ws, cell.states, cell.mask);
        ad::Value h = detail::linear(ws, ad::gelu(detail::linear(ws, pooled_h, "qf.mlp.fc1")), "qf.mlp.fc2");
        std::vector<ad::Value> reps(cfg.num_query_tokens, h);
        qs = ad::concat_rows(reps);
    } else {
        qs = detail::qformer_stack(ws, ws.p("qf.queries"), nullptr, &cell);
    }
    ad::Value projected = detail::linear(ws, qs, "qf.cell_proj");
    ad::Value pooled = ad::l2_normalize_rows(ad::mean_rows(projected));
    return CellFeatureV{projected, pooled};
}

/// Bidirectional text encoding through the projector's text tower; pooled is
/// the unit-norm projection of the first-position state.
inline ad::Value embed_text(Workspace& ws, const corpus::TextDescription& desc) {
    const ModelConfig& cfg = ws.cfg();
    if (desc.tokens.empty()) throw data_error("embed_text: empty token sequence");
    if (desc.tokens.size() > cfg.max_text_len)
        throw data_error("embed_text: length " + std::to_string(desc.tokens.size()) + " exceeds max_text_len " +
                         std::to_string(cfg.max_text_len) + "; truncate explicitly");
    std::vector<std::size_t> ids;
    for (int t : desc.tokens) {
        if (t < 0 || std::size_t(t) >= cfg.text_vocab_size)
            throw data_error("embed_text: token id outside vocabulary");
        ids.push_back(std::size_t(t));
    }
    ad::Value x = ad::add(ad::gather_rows(ws.p("qf.text_embed"), ids),
                          ad::slice_rows(ws.p("qf.text_pos"), 0, ids.size()));
    x = detail::qformer_stack(ws, x, nullptr, nullptr);
    return ad::l2_normalize_rows(detail::linear(ws, ad::slice_rows(x, 0, 1), "qf.text_proj"));
}

/// Matched-vs-unmatched logit from the joint query+text encoding with
/// cross-attention into the cell states.
inline ad::Value match_logit(Workspace& ws, const CellSeq& cell, const corpus::TextDescription& desc) {
    const ModelConfig& cfg = ws.cfg();
    if (desc.tokens.empty()) throw data_error("match_logit: empty token sequence");
    if (desc.tokens.size() > cfg.max_text_len)
        throw data_error("match_logit: text exceeds max_text_len; truncate explicitly");
    std::vector<std::size_t> ids;
    for (int t : desc.tokens) {
        if (t < 0 || std::size_t(t) >= cfg.text_vocab_size)
            throw data_error("match_logit: token id outside vocabulary");
        ids.push_back(std::size_t(t));
    }
    ad::Value text = ad::add(ad::gather_rows(ws.p("qf.text_embed"), ids),
                             ad::slice_rows(ws.p("qf.text_pos"), 0, ids.size()));
    ad::Value joint = ad::concat_rows({ws.p("qf.queries"), text});
    joint = detail::qformer_stack(ws, joint, nullptr, &cell);
    return detail::linear(ws, ad::mean_rows(joint), "qf.match_head");
}

// ---------------------------------------------------------------------------
// Text decoder
// ---------------------------------------------------------------------------

/// Causal decoder over [soft prompt; BOS; tokens]; returns logits for every
/// position after the prompt (predicting tokens[0..] and the continuation).
inline ad::Value decode_text_logits(Workspace& ws, const ad::Value* prompt_states_proj,
                                    const std::vector<int>& tokens) {
    const ModelConfig& cfg = ws.cfg();
    if (tokens.size() > cfg.max_text_len)
        throw data_error("decode_text_logits: target exceeds max_text_len; truncate explicitly");
    std::vector<std::size_t> ids;
    ids.push_back(std::size_t(corpus::TextTokenizer::kBos));
    for (int t : tokens) {
        if (t < 0 || std::size_t(t) >= cfg.text_vocab_size)
            throw data_error("decode_text_logits: token id outside vocabulary");
        ids.push_back(std::size_t(t));
    }
    ad::Value tok = ad::gather_rows(ws.p("txt.embed"), ids);
    std::size_t prompt_rows = 0;
    ad::Value x = tok;
    if (prompt_states_proj != nullptr) {
        ad::Value prompt = detail::linear(ws, *prompt_states_proj, "txt.prompt_proj");
        prompt_rows = ws.g.val(prompt).rows;
        x = ad::concat_rows({prompt, tok});
    }
    std::size_t total = prompt_rows + ids.size();
    x = ad::add(x, ad::slice_rows(ws.p("txt.pos"), 0, total));
    for (std::size_t l = 0; l < cfg.text_layers; ++l)
        x = detail::encoder_block(ws, x, "txt.layer" + std::to_string(l), "attn", nullptr, true, cfg.text_heads);
    x = detail::layernorm(ws, x, "txt.ln_out");
    ad::Value text_states = ad::slice_rows(x, prompt_rows, ids.size());
    return detail::linear(ws, text_states, "txt.lm_head");
}

struct GenerateOptions {
    std::size_t max_len = 32;
    bool greedy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

/// Autoregressive generation conditioned on projected query states. Greedy
/// decoding is deterministic; ties go to the lowest token id.
inline corpus::TextDescription generate_text(const ParameterStore& store, const Tensor& query_states,
                                             const corpus::TextTokenizer& tokenizer, const GenerateOptions& opt) {
    if (opt.max_len == 0) throw config_error("generate_text: max_len must be positive");
    if (opt.max_len > store.config.max_text_len)
        throw data_error("generate_text: max_len exceeds max_text_len");
    std::vector<int> out;
    rng::Stream sample_rng(rng::mix(opt.seed, 0x9e17u));
    while (out.size() < opt.max_len) {
        Workspace ws(store);
        ad::Value qs = ws.g.constant(query_states);
        ad::Value logits = decode_text_logits(ws, &qs, out);
        const Tensor& lv = ws.g.val(logits);
        const double* row = lv.row_ptr(lv.rows - 1);
        std::size_t v = lv.cols;
        std::size_t next = 0;
        if (opt.greedy) {
            for (std::size_t c = 1; c < v; ++c)
                if (row[c] > row[next]) next = c;
        } else {
            double temp = opt.temperature <= 0 ? 1.0 : opt.temperature;
            double mx = row[0];
            for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
            std::vector<double> probs(v);
            double sum = 0;
            for (std::size_t c = 0; c < v; ++c) {
                probs[c] = std::exp((row[c] - mx) / temp);
                sum += probs[c];
            }
            double u = sample_rng.uniform() * sum;
            double acc = 0;
            for (std::size_t c = 0; c < v; ++c) {
                acc += probs[c];
                if (u < acc || c == v - 1) {
                    next = c;
                    break;
                }
            }
        }
        out.push_back(int(next));
        if (int(next) == corpus::TextTokenizer::kEos) break;
    }
    corpus::TextDescription d;
    d.tokens = out;
    d.raw = tokenizer.decode(out);
    d.source = corpus::TextSource::free_text;
    return d;
}

// ---------------------------------------------------------------------------
// Text-to-cell projection and pseudo-cell prediction
// ---------------------------------------------------------------------------

/// Soft prompt (P x gene_embed_dim) from a description: causal encoding, a
/// feed-forward map of the final-position state, then latents cross-attending
/// into it.
inline ad::Value project_text_to_cell(Workspace& ws, const corpus::TextDescription& desc) {
    const ModelConfig& cfg = ws.cfg();
    if (desc.tokens.empty()) throw data_error("project_text_to_cell: empty token sequence");
    if (desc.tokens.size() > cfg.max_text_len)
        throw data_error("project_text_to_cell: text exceeds max_text_len; truncate explicitly");
    std::vector<std::size_t> ids;
    ids.push_back(std::size_t(corpus::TextTokenizer::kBos));
    for (int t : desc.tokens) {
        if (t < 0 || std::size_t(t) >= cfg.text_vocab_size)
            throw data_error("project_text_to_cell: token id outside vocabulary");
        ids.push_back(std::size_t(t));
    }
    ad::Value x = ad::add(ad::gather_rows(ws.p("txt.embed"), ids),
                          ad::slice_rows(ws.p("txt.pos"), 0, ids.size()));
    for (std::size_t l = 0; l < cfg.text_layers; ++l)
        x = detail::encoder_block(ws, x, "txt.layer" + std::to_string(l), "attn", nullptr, true, cfg.text_heads);
    x = detail::layernorm(ws, x, "txt.ln_out");
    ad::Value last = ad::slice_rows(x, ids.size() - 1, 1);
    ad::Value memory = detail::linear(ws, ad::gelu(detail::linear(ws, last, "t2c.mlp.fc1")), "t2c.mlp.fc2");

    ad::Value lat = ws.p("t2c.latents");
    for (std::size_t l = 0; l < cfg.t2c_layers; ++l) {
        std::string p = "t2c.layer" + std::to_string(l);
        lat = ad::add(lat, detail::attention(ws, p + ".cross", detail::layernorm(ws, lat, p + ".ln1"), memory,
                                             nullptr, false, cfg.t2c_heads));
        lat = ad::add(lat, detail::ffn(ws, detail::layernorm(ws, lat, p + ".ln2"), p + ".ffn"));
    }
    return detail::layernorm(ws, lat, "t2c.ln_out");
}

/// One-shot gene prediction head over the prompted encoder's summary state.
inline ad::Value predict_pseudo_cell(Workspace& ws, ad::Value prompt_states) {
    ad::Value summary = encode_prompted_summary(ws, prompt_states);
    return detail::linear(ws, summary, "head.gene");
}

} // namespace scmm::model
