#pragma once

#include <filesystem>
#include <functional>
#include <set>

#include "scmm/objectives.hpp"

namespace scmm::training {

using model::ParamGroup;
using model::ParameterStore;

enum class Stage { stage1, stage2, ft_annotation, ft_caption };

inline std::string to_string(Stage s) {
    switch (s) {
        case Stage::stage1: return "stage1";
        case Stage::stage2: return "stage2";
        case Stage::ft_annotation: return "ft_annotation";
        case Stage::ft_caption: return "ft_caption";
    }
    throw config_error("unknown stage");
}

inline Stage stage_from_string(const std::string& s) {
    for (Stage st : {Stage::stage1, Stage::stage2, Stage::ft_annotation, Stage::ft_caption})
        if (to_string(st) == s) return st;
    throw config_error("unknown stage tag: " + s);
}

/// Freeze plan per training phase. stage1 trains the cell encoder and the
/// cell-to-text projector; stage2 freezes that projector while training the
/// encoder, text backbone, text-to-cell projector and gene head; caption
/// fine-tuning trains adapters only.
struct StageSchedule {
    Stage stage = Stage::stage1;
    std::set<ParamGroup> trainable_groups;

    static StageSchedule for_stage(Stage s) {
        StageSchedule sched;
        sched.stage = s;
        switch (s) {
            case Stage::stage1:
            case Stage::ft_annotation:
                sched.trainable_groups = {ParamGroup::cell_encoder, ParamGroup::c2t_projector};
                break;
            case Stage::stage2:
                sched.trainable_groups = {ParamGroup::cell_encoder, ParamGroup::text_backbone,
                                          ParamGroup::t2c_projector, ParamGroup::pseudo_cell_head};
                break;
            case Stage::ft_caption:
                sched.trainable_groups = {ParamGroup::adapters};
                break;
        }
        return sched;
    }

    void apply(ParameterStore& store) const {
        for (ParamGroup g : model::all_groups()) store.trainable[g] = trainable_groups.count(g) != 0;
    }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct OptimizerConfig {
    double peak_lr = 2e-3;
    double warmup_origin_lr = 0.0; // paper pre-training warms from 1e-6
    double floor_lr = 0.0;
    std::size_t warmup_steps = 20;
    std::size_t max_steps = 300;
    double weight_decay = 0.001;
    std::size_t batch_size = 8;
    double clip_norm = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 7;

    /// Paper-shape optimizer settings (Appendix tables): peak 1e-5 from a
    /// 1e-6 origin over 1000 warmup steps, weight decay 0.001, batch 12.
    static OptimizerConfig paper_scale() {
        OptimizerConfig c;
        c.peak_lr = 1e-5;
        c.warmup_origin_lr = 1e-6;
        c.warmup_steps = 1000;
        c.weight_decay = 0.001;
        c.batch_size = 12;
        c.max_steps = 10000;
        return c;
    }

    void validate() const {
        if (peak_lr <= 0) throw config_error("optimizer: peak_lr must be positive");
        if (warmup_origin_lr < 0 || floor_lr < 0) throw config_error("optimizer: learning rates must be >= 0");
        if (warmup_steps > max_steps) throw config_error("optimizer: warmup_steps must not exceed max_steps");
        if (batch_size == 0) throw config_error("optimizer: batch_size must be positive");
        if (weight_decay < 0) throw config_error("optimizer: weight_decay must be >= 0");
        if (clip_norm < 0) throw config_error("optimizer: clip_norm must be >= 0");
    }

    /// Linear warmup from the origin to peak over warmup_steps, then linear
    /// decay to the floor at max_steps. step is 1-based.
    double lr_at(std::size_t step) const {
        if (warmup_steps > 0 && step <= warmup_steps)
            return warmup_origin_lr + (peak_lr - warmup_origin_lr) * double(step) / double(warmup_steps);
        if (max_steps == warmup_steps) return peak_lr;
        double frac = double(step - warmup_steps) / double(max_steps - warmup_steps);
        return peak_lr - (peak_lr - floor_lr) * std::min(frac, 1.0);
    }
};

/// Decoupled-weight-decay adaptive-moment optimizer over the trainable groups
/// of a ParameterStore. Moments are f64; updated parameters are re-quantized
/// onto the f32 grid so checkpoints stay bit-exact.
struct AdamW {
    std::map<std::string, Tensor> m, v;
    std::size_t t = 0;

    void step(ParameterStore& store, std::map<std::string, Tensor>& grads, double lr,
              const OptimizerConfig& cfg) {
        ++t;
        if (cfg.clip_norm > 0) {
            double norm_sq = 0;
            for (auto& [name, g] : grads)
                for (double x : g.data) norm_sq += x * x;
            double norm = std::sqrt(norm_sq);
            if (norm > cfg.clip_norm) {
                double scale = cfg.clip_norm / norm;
                for (auto& [name, g] : grads)
                    for (double& x : g.data) x *= scale;
            }
        }
        double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
        double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
        for (auto& [name, g] : grads) {
            if (!store.is_trainable(name)) continue;
            Tensor& w = store.at(name);
            Tensor& mt = m.try_emplace(name, Tensor(w.rows, w.cols, 0.0)).first->second;
            Tensor& vt = v.try_emplace(name, Tensor(w.rows, w.cols, 0.0)).first->second;
            for (std::size_t i = 0; i < w.size(); ++i) {
                mt.data[i] = cfg.beta1 * mt.data[i] + (1 - cfg.beta1) * g.data[i];
                vt.data[i] = cfg.beta2 * vt.data[i] + (1 - cfg.beta2) * g.data[i] * g.data[i];
                double update = (mt.data[i] / bc1) / (std::sqrt(vt.data[i] / bc2) + cfg.eps);
                w.data[i] = quantize_f32(w.data[i] - lr * (update + cfg.weight_decay * w.data[i]));
            }
        }
    }
};

/// Serializable training cursor: step counter, stage, optimizer moments and
/// the data-order seed. Restoring it resumes the exact loss trajectory.
struct TrainState {
    std::size_t step = 0;
    Stage stage = Stage::stage1;
    AdamW optimizer;
    double best_metric = 0.0;
    std::uint64_t data_seed = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------
// Byte layout (little-endian), documented in the README:
//   magic "SCMMCKPT" | u32 version | kv-text ModelConfig block |
//   u64 tensor count | per tensor: name, group byte, u32 rows, u32 cols,
//   f32 payload | per group: trainable byte | stage tag | optional TrainState
//   (u64 step, stage tag, u64 adam_t, moment tensors as f64, u64 data_seed,
//   f64 best_metric) | u32 crc32 of everything before it.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

inline void put_str(std::string& out, const std::string& s) {
    put_u32(out, std::uint32_t(s.size()));
    out += s;
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw data_error("checkpoint: unexpected end of file");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(buf[pos + std::size_t(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(buf[pos + std::size_t(i)])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str() {
        std::uint32_t n = u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    std::uint8_t byte() {
        need(1);
        return std::uint8_t(buf[pos++]);
    }
};

inline std::string config_to_kv(const model::ModelConfig& c) {
    std::string out;
    auto kv = [&](const std::string& k, const std::string& v) { out += k + "=" + v + "\n"; };
    kv("gene_vocab_size", std::to_string(c.gene_vocab_size));
    kv("max_cell_tokens", std::to_string(c.max_cell_tokens));
    kv("gene_embed_dim", std::to_string(c.gene_embed_dim));
    kv("cell_layers", std::to_string(c.cell_layers));
    kv("cell_heads", std::to_string(c.cell_heads));
    kv("cell_positional", c.cell_positional ? "1" : "0");
    kv("text_vocab_size", std::to_string(c.text_vocab_size));
    kv("text_hidden_dim", std::to_string(c.text_hidden_dim));
    kv("text_layers", std::to_string(c.text_layers));
    kv("text_heads", std::to_string(c.text_heads));
    kv("max_text_len", std::to_string(c.max_text_len));
    kv("num_query_tokens", std::to_string(c.num_query_tokens));
    kv("qformer_hidden_dim", std::to_string(c.qformer_hidden_dim));
    kv("qformer_layers", std::to_string(c.qformer_layers));
    kv("qformer_heads", std::to_string(c.qformer_heads));
    kv("cross_attention_freq", std::to_string(c.cross_attention_freq));
    kv("projector_dim", std::to_string(c.projector_dim));
    kv("t2c_layers", std::to_string(c.t2c_layers));
    kv("t2c_heads", std::to_string(c.t2c_heads));
    kv("prompt_len", std::to_string(c.prompt_len));
    kv("projector_kind", c.projector_kind);
    kv("contrastive_pool", c.contrastive_pool);
    kv("adapter_rank", std::to_string(c.adapter.rank));
    kv("adapter_alpha", fmt_g17(c.adapter.alpha));
    kv("adapter_dropout", fmt_g17(c.adapter.dropout));
    return out;
}

inline model::ModelConfig config_from_kv(const std::string& text) {
    model::ModelConfig c;
    for (const std::string& line : split(text, '\n')) {
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw data_error("checkpoint config: malformed line '" + line + "'");
        std::string k = line.substr(0, eq), v = line.substr(eq + 1);
        auto as_size = [&] { return std::size_t(parse_long(v, "checkpoint config " + k)); };
        if (k == "gene_vocab_size") c.gene_vocab_size = as_size();
        else if (k == "max_cell_tokens") c.max_cell_tokens = as_size();
        else if (k == "gene_embed_dim") c.gene_embed_dim = as_size();
        else if (k == "cell_layers") c.cell_layers = as_size();
        else if (k == "cell_heads") c.cell_heads = as_size();
        else if (k == "cell_positional") c.cell_positional = v == "1";
        else if (k == "text_vocab_size") c.text_vocab_size = as_size();
        else if (k == "text_hidden_dim") c.text_hidden_dim = as_size();
        else if (k == "text_layers") c.text_layers = as_size();
        else if (k == "text_heads") c.text_heads = as_size();
        else if (k == "max_text_len") c.max_text_len = as_size();
        else if (k == "num_query_tokens") c.num_query_tokens = as_size();
        else if (k == "qformer_hidden_dim") c.qformer_hidden_dim = as_size();
        else if (k == "qformer_layers") c.qformer_layers = as_size();
        else if (k == "qformer_heads") c.qformer_heads = as_size();
        else if (k == "cross_attention_freq") c.cross_attention_freq = as_size();
        else if (k == "projector_dim") c.projector_dim = as_size();
        else if (k == "t2c_layers") c.t2c_layers = as_size();
        else if (k == "t2c_heads") c.t2c_heads = as_size();
        else if (k == "prompt_len") c.prompt_len = as_size();
        else if (k == "projector_kind") c.projector_kind = v;
        else if (k == "contrastive_pool") c.contrastive_pool = v;
        else if (k == "adapter_rank") c.adapter.rank = as_size();
        else if (k == "adapter_alpha") c.adapter.alpha = parse_double(v, "checkpoint config");
        else if (k == "adapter_dropout") c.adapter.dropout = parse_double(v, "checkpoint config");
        else throw data_error("checkpoint config: unknown key '" + k + "'");
    }
    return c;
}

} // namespace detail

constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const ParameterStore& store, Stage stage,
                            const TrainState* state = nullptr) {
    std::string out = "SCMMCKPT";
    detail::put_u32(out, kCheckpointVersion);
    detail::put_str(out, detail::config_to_kv(store.config));
    detail::put_u64(out, store.entries.size());
    for (const auto& [name, e] : store.entries) {
        detail::put_str(out, name);
        out.push_back(char(static_cast<int>(e.group)));
        detail::put_u32(out, std::uint32_t(e.tensor.rows));
        detail::put_u32(out, std::uint32_t(e.tensor.cols));
        for (double v : e.tensor.data) detail::put_f32(out, float(v));
    }
    for (ParamGroup g : model::all_groups()) out.push_back(store.trainable.at(g) ? 1 : 0);
    detail::put_str(out, to_string(stage));
    out.push_back(state != nullptr ? 1 : 0);
    if (state != nullptr) {
        detail::put_u64(out, state->step);
        detail::put_str(out, to_string(state->stage));
        detail::put_u64(out, state->optimizer.t);
        detail::put_u64(out, state->optimizer.m.size());
        for (const auto& [name, mt] : state->optimizer.m) {
            detail::put_str(out, name);
            detail::put_u32(out, std::uint32_t(mt.rows));
            detail::put_u32(out, std::uint32_t(mt.cols));
            for (double v : mt.data) detail::put_f64(out, v);
            const Tensor& vt = state->optimizer.v.at(name);
            for (double v : vt.data) detail::put_f64(out, v);
        }
        detail::put_u64(out, state->data_seed);
        detail::put_f64(out, state->best_metric);
    }
    detail::put_u32(out, crc32(out));
    write_file(path, out);
}

struct Checkpoint {
    ParameterStore store;
    Stage stage = Stage::stage1;
    bool has_state = false;
    TrainState state;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::string buf = read_file(path);
    if (buf.size() < 16) throw data_error("checkpoint: file too short");
    std::uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i)
        stored_crc |= std::uint32_t(static_cast<unsigned char>(buf[buf.size() - 4 + std::size_t(i)])) << (8 * i);
    std::string payload = buf.substr(0, buf.size() - 4);
    if (crc32(payload) != stored_crc)
        throw data_error("checkpoint: checksum mismatch, file is corrupt or truncated");

    detail::Reader r{payload};
    r.need(8);
    if (payload.compare(0, 8, "SCMMCKPT") != 0) throw data_error("checkpoint: bad magic");
    r.pos = 8;
    std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw data_error("checkpoint: format version " + std::to_string(version) +
                         " is incompatible with supported version " + std::to_string(kCheckpointVersion));

    Checkpoint ck;
    ck.store.config = detail::config_from_kv(r.str());
    std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.str();
        ParamGroup group = static_cast<ParamGroup>(r.byte());
        std::uint32_t rows = r.u32(), cols = r.u32();
        Tensor t(rows, cols);
        for (std::size_t j = 0; j < t.size(); ++j) t.data[j] = double(r.f32());
        ck.store.entries.emplace(name, ParameterStore::Entry{std::move(t), group});
    }
    for (ParamGroup g : model::all_groups()) ck.store.trainable[g] = r.byte() != 0;
    ck.stage = stage_from_string(r.str());
    ck.has_state = r.byte() != 0;
    if (ck.has_state) {
        ck.state.step = r.u64();
        ck.state.stage = stage_from_string(r.str());
        ck.state.optimizer.t = r.u64();
        std::uint64_t moments = r.u64();
        for (std::uint64_t i = 0; i < moments; ++i) {
            std::string name = r.str();
            std::uint32_t rows = r.u32(), cols = r.u32();
            Tensor mt(rows, cols), vt(rows, cols);
            for (std::size_t j = 0; j < mt.size(); ++j) mt.data[j] = r.f64();
            for (std::size_t j = 0; j < vt.size(); ++j) vt.data[j] = r.f64();
            ck.state.optimizer.m.emplace(name, std::move(mt));
            ck.state.optimizer.v.emplace(name, std::move(vt));
        }
        ck.state.data_seed = r.u64();
        ck.state.best_metric = r.f64();
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Data ordering
// ---------------------------------------------------------------------------

/// Position stream for one step: the epoch order is a pure function of
/// (seed, epoch), so any step can be replayed without cursor state. With
/// shuffle off the window is contiguous, for callers that pre-shuffle their
/// own item stream (the alternating stage-2 task plan).
inline std::vector<std::size_t> batch_positions(std::size_t n, std::size_t batch_size, std::size_t step_1based,
                                                std::uint64_t seed, bool shuffle = true) {
    if (n == 0) throw config_error("batch_positions: empty split");
    std::size_t steps_per_epoch = (n + batch_size - 1) / batch_size;
    if (n % batch_size == 1 && steps_per_epoch > 1) steps_per_epoch -= 1;
    std::size_t epoch = (step_1based - 1) / steps_per_epoch;
    std::size_t within = (step_1based - 1) % steps_per_epoch;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (shuffle) {
        rng::Stream s(rng::mix(seed, 0xda7au, epoch));
        s.shuffle(order);
    }
    std::size_t lo = within * batch_size;
    std::size_t hi = std::min(lo + batch_size, n);
    // A singleton tail cannot form contrastive or matching pairs; fold it
    // into the preceding batch instead of dropping it.
    if (n % batch_size == 1 && steps_per_epoch > 1 && within == steps_per_epoch - 1) hi = n;
    return {order.begin() + long(lo), order.begin() + long(hi)};
}

/// Alternating task assignment for generative training: a seeded shuffle of
/// the split with tasks alternating c2t, t2c, so every window of two holds
/// exactly one of each.
inline std::vector<std::pair<std::size_t, objectives::GenTask>>
build_downstream_batches(const std::vector<std::size_t>& split_indices, std::uint64_t seed) {
    if (split_indices.empty()) throw config_error("build_downstream_batches: empty split");
    std::vector<std::size_t> order = split_indices;
    rng::Stream s(rng::mix(seed, 0x1a5cu));
    s.shuffle(order);
    std::vector<std::pair<std::size_t, objectives::GenTask>> out;
    out.reserve(order.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        out.emplace_back(order[i], i % 2 == 0 ? objectives::GenTask::c2t : objectives::GenTask::t2c);
    return out;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct TrainOptions {
    corpus::TextSource text_source = corpus::TextSource::merged;
    objectives::AblationFlags ablation;
    double tau = 0.07;
    std::size_t num_negatives = 2;
    std::string run_dir;               // when set: losses.csv + checkpoints/
    std::size_t checkpoint_every = 0;  // 0 = final checkpoint only
    std::size_t stop_at_step = 0;      // interrupt mid-schedule (0 = run to max_steps)
};

struct StepLog {
    std::size_t step = 0;
    Stage stage = Stage::stage1;
    objectives::LossBreakdown losses;
};

namespace detail {

inline std::vector<objectives::PairExample> build_pair_examples(const corpus::Corpus& c,
                                                                const std::vector<std::size_t>& indices,
                                                                const corpus::TextTokenizer& tokenizer,
                                                                corpus::TextSource source, std::size_t k) {
    std::vector<objectives::PairExample> out;
    out.reserve(indices.size());
    for (std::size_t idx : indices) {
        objectives::PairExample ex;
        corpus::NormalizedCell norm = corpus::normalized(c, idx);
        ex.tokens = corpus::tokenize_cell(norm, k);
        ex.normalized_values = std::move(norm.values);
        ex.desc = corpus::render_description(c.records[idx], c.ontology, source, tokenizer);
        ex.pair_id = idx;
        out.push_back(std::move(ex));
    }
    return out;
}

inline void append_losses_csv(const std::string& run_dir, const StepLog& log) {
    namespace fs = std::filesystem;
    fs::path path = fs::path(run_dir) / "losses.csv";
    bool fresh = !fs::exists(path);
    std::ofstream out(path, std::ios::app);
    if (!out) throw data_error("cannot append to " + path.string());
    if (fresh) out << "step,stage,info_nce,match_ce,c2t,t2c,total\n";
    out << log.step << "," << to_string(log.stage) << "," << fmt_g17(log.losses.info_nce) << ","
        << fmt_g17(log.losses.match_ce) << "," << fmt_g17(log.losses.c2t) << "," << fmt_g17(log.losses.t2c)
        << "," << fmt_g17(log.losses.total) << "\n";
}

inline void maybe_checkpoint(const std::string& run_dir, std::size_t every, const ParameterStore& store,
                             Stage stage, const TrainState& state, bool final_step) {
    if (run_dir.empty()) return;
    if (!final_step && (every == 0 || state.step % every != 0)) return;
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(run_dir) / "checkpoints");
    save_checkpoint((fs::path(run_dir) / "checkpoints" / ("step_" + std::to_string(state.step) + ".ckpt")).string(),
                    store, stage, &state);
}

// Shared step loop: builds the loss for each batch, backpropagates, applies
// AdamW over trainable leaves, logs, checkpoints, and aborts on NaN with a
// diagnostic snapshot.
template <typename LossBuilder>
std::vector<StepLog> run_steps(ParameterStore& store, const OptimizerConfig& opt, Stage stage,
                               const TrainOptions& topt, std::size_t dataset_size, LossBuilder&& build_loss,
                               TrainState* resume, bool shuffle_positions = true) {
    opt.validate();
    StageSchedule::for_stage(stage).apply(store);

    TrainState local;
    TrainState& state = resume != nullptr ? *resume : local;
    if (resume == nullptr || state.step == 0) {
        state = TrainState{};
        state.stage = stage;
        state.data_seed = opt.seed;
    }
    if (state.stage != stage) throw config_error("resume state belongs to a different stage");

    std::size_t stop = topt.stop_at_step == 0 ? opt.max_steps : std::min(opt.max_steps, topt.stop_at_step);
    std::vector<StepLog> logs;
    for (std::size_t step = state.step + 1; step <= stop; ++step) {
        std::vector<std::size_t> positions =
            batch_positions(dataset_size, opt.batch_size, step, state.data_seed, shuffle_positions);

        model::Workspace ws(store, true, rng::mix(opt.seed, 0xd407u, step));
        objectives::LossBreakdown breakdown;
        ad::Value loss = build_loss(ws, positions, step, breakdown);
        if (!std::isfinite(breakdown.total)) {
            if (!topt.run_dir.empty()) {
                state.step = step;
                save_checkpoint((std::filesystem::path(topt.run_dir) / "nan_snapshot.ckpt").string(), store,
                                stage, &state);
            }
            throw numeric_error("loss is not finite at step " + std::to_string(step) +
                                (topt.run_dir.empty() ? "" : "; diagnostic snapshot written to " + topt.run_dir));
        }
        ws.g.backward(loss);

        std::map<std::string, Tensor> grads;
        for (const auto& [name, entry] : store.entries) {
            if (!store.trainable.at(entry.group)) continue;
            if (!ws.leaf_used(name)) continue;
            grads.emplace(name, ws.leaf_grad(name));
        }
        state.optimizer.step(store, grads, opt.lr_at(step), opt);
        state.step = step;

        StepLog log{step, stage, breakdown};
        logs.push_back(log);
        if (!topt.run_dir.empty()) append_losses_csv(topt.run_dir, log);
        maybe_checkpoint(topt.run_dir, topt.checkpoint_every, store, stage, state, step == stop);
    }
    return logs;
}

} // namespace detail

/// Stage-1 discriminative pre-training over the train split.
inline std::vector<StepLog> run_stage1(const corpus::Corpus& c, const std::vector<std::size_t>& train_indices,
                                       const corpus::TextTokenizer& tokenizer, ParameterStore& store,
                                       const OptimizerConfig& opt, const TrainOptions& topt = {},
                                       TrainState* resume = nullptr) {
    if (train_indices.empty()) throw config_error("run_stage1: empty train split");
    std::vector<objectives::PairExample> examples =
        detail::build_pair_examples(c, train_indices, tokenizer, topt.text_source, store.config.max_cell_tokens);
    objectives::AlignmentOptions aopt;
    aopt.tau = topt.tau;
    aopt.num_negatives = topt.num_negatives;
    auto build = [&](model::Workspace& ws, const std::vector<std::size_t>& positions, std::size_t step,
                     objectives::LossBreakdown& bd) {
        std::vector<objectives::PairExample> batch;
        for (std::size_t p : positions) batch.push_back(examples[p]);
        aopt.seed = rng::mix(opt.seed, 0x5eedu, step);
        return objectives::alignment_loss(ws, batch, aopt, topt.ablation, &bd);
    };
    return detail::run_steps(store, opt, Stage::stage1, topt, examples.size(), build, resume);
}

/// Stage-2 generative pre-training: 1:1 alternating c2t/t2c task stream; the
/// cell-to-text projector stays frozen.
inline std::vector<StepLog> run_stage2(const corpus::Corpus& c, const std::vector<std::size_t>& train_indices,
                                       const corpus::TextTokenizer& tokenizer, ParameterStore& store,
                                       const OptimizerConfig& opt, const TrainOptions& topt = {},
                                       TrainState* resume = nullptr) {
    if (train_indices.empty()) throw config_error("run_stage2: empty train split");
    std::vector<objectives::PairExample> examples =
        detail::build_pair_examples(c, train_indices, tokenizer, topt.text_source, store.config.max_cell_tokens);

    auto build = [&](model::Workspace& ws, const std::vector<std::size_t>& positions, std::size_t step,
                     objectives::LossBreakdown& bd) {
        std::size_t n = examples.size();
        std::size_t steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
        std::size_t epoch = (step - 1) / steps_per_epoch;
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        auto stream = build_downstream_batches(all, rng::mix(opt.seed, 0x57a2u, epoch));
        std::vector<objectives::Stage2Item> batch;
        for (std::size_t p : positions) batch.push_back({examples[stream[p].first], stream[p].second});
        return objectives::stage2_loss(ws, batch, topt.ablation, &bd);
    };
    // Contiguous windows over the pre-shuffled alternating stream keep the
    // 1:1 task split within every window of two.
    return detail::run_steps(store, opt, Stage::stage2, topt, examples.size(), build, resume, false);
}

/// Downstream annotation fine-tuning: alignment loss under the stage-1 freeze
/// plan on the given split.
inline std::vector<StepLog> finetune_annotation(const corpus::Corpus& c,
                                                const std::vector<std::size_t>& train_indices,
                                                const corpus::TextTokenizer& tokenizer, ParameterStore& store,
                                                const OptimizerConfig& opt, const TrainOptions& topt = {},
                                                TrainState* resume = nullptr) {
    if (train_indices.empty()) throw config_error("finetune_annotation: empty train split");
    std::vector<objectives::PairExample> examples =
        detail::build_pair_examples(c, train_indices, tokenizer, topt.text_source, store.config.max_cell_tokens);
    objectives::AlignmentOptions aopt;
    aopt.tau = topt.tau;
    aopt.num_negatives = topt.num_negatives;
    auto build = [&](model::Workspace& ws, const std::vector<std::size_t>& positions, std::size_t step,
                     objectives::LossBreakdown& bd) {
        std::vector<objectives::PairExample> batch;
        for (std::size_t p : positions) batch.push_back(examples[p]);
        aopt.seed = rng::mix(opt.seed, 0x5eedu, step);
        return objectives::alignment_loss(ws, batch, aopt, topt.ablation, &bd);
    };
    return detail::run_steps(store, opt, Stage::ft_annotation, topt, examples.size(), build, resume);
}

/// Caption fine-tuning: adapters must already be attached; only they train,
/// under the c2t loss alone.
inline std::vector<StepLog> finetune_caption(const corpus::Corpus& c, const std::vector<std::size_t>& train_indices,
                                             const corpus::TextTokenizer& tokenizer, ParameterStore& store,
                                             const OptimizerConfig& opt, const TrainOptions& topt = {},
                                             TrainState* resume = nullptr) {
    if (train_indices.empty()) throw config_error("finetune_caption: empty train split");
    if (store.group_parameters(ParamGroup::adapters) == 0)
        throw config_error("finetune_caption: no adapters attached; apply adapters to the text backbone first");
    std::vector<objectives::PairExample> examples =
        detail::build_pair_examples(c, train_indices, tokenizer, topt.text_source, store.config.max_cell_tokens);
    auto build = [&](model::Workspace& ws, const std::vector<std::size_t>& positions, std::size_t step,
                     objectives::LossBreakdown& bd) {
        std::vector<objectives::Stage2Item> batch;
        for (std::size_t p : positions) batch.push_back({examples[p], objectives::GenTask::c2t});
        return objectives::stage2_loss(ws, batch, topt.ablation, &bd);
    };
    return detail::run_steps(store, opt, Stage::ft_caption, topt, examples.size(), build, resume);
}

} // namespace scmm::training
