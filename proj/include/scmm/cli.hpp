#pragma once

#include <filesystem>
#include <iostream>

#include "scmm/inference.hpp"
#include "scmm/probe.hpp"
#include "scmm/training.hpp"

namespace scmm::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config file: [section] headers over flat key = value lines, '#' comments.
// Unknown sections or keys are startup errors. SCMM_SEED overrides the seed.
// ---------------------------------------------------------------------------

class ConfigFile {
  public:
    static ConfigFile parse_text(const std::string& text, const std::string& origin) {
        ConfigFile cfg;
        std::string section = "run";
        std::size_t lineno = 0;
        for (const std::string& raw_line : split(text, '\n')) {
            ++lineno;
            std::string line = strip(raw_line);
            if (line.empty() || line[0] == '#') continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw config_error(origin + ":" + std::to_string(lineno) + ": malformed section header");
                section = strip(line.substr(1, line.size() - 2));
                if (section.empty())
                    throw config_error(origin + ":" + std::to_string(lineno) + ": empty section name");
                continue;
            }
            std::size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw config_error(origin + ":" + std::to_string(lineno) + ": expected key = value");
            std::string key = strip(line.substr(0, eq));
            std::string value = strip(line.substr(eq + 1));
            if (key.empty()) throw config_error(origin + ":" + std::to_string(lineno) + ": empty key");
            if (!cfg.values_[section].emplace(key, value).second)
                throw config_error(origin + ":" + std::to_string(lineno) + ": duplicate key '" + section + "." +
                                   key + "'");
        }
        return cfg;
    }

    static ConfigFile parse_file(const std::string& path) { return parse_text(read_file(path), path); }

    bool has(const std::string& section, const std::string& key) const {
        auto s = values_.find(section);
        return s != values_.end() && s->second.count(key) != 0;
    }

    std::string get(const std::string& section, const std::string& key, const std::string& fallback) const {
        mark_used(section, key);
        auto s = values_.find(section);
        if (s == values_.end()) return fallback;
        auto it = s->second.find(key);
        return it == s->second.end() ? fallback : it->second;
    }

    std::string require(const std::string& section, const std::string& key) const {
        mark_used(section, key);
        auto s = values_.find(section);
        if (s != values_.end()) {
            auto it = s->second.find(key);
            if (it != s->second.end()) return it->second;
        }
        throw config_error("missing required config key [" + section + "] " + key);
    }

    std::size_t get_size(const std::string& section, const std::string& key, std::size_t fallback) const {
        if (!has(section, key)) {
            mark_used(section, key);
            return fallback;
        }
        long v = parse_long(get(section, key, ""), "[" + section + "] " + key);
        if (v < 0) throw config_error("config key [" + section + "] " + key + " must be non-negative");
        return std::size_t(v);
    }

    double get_double(const std::string& section, const std::string& key, double fallback) const {
        if (!has(section, key)) {
            mark_used(section, key);
            return fallback;
        }
        return parse_double(get(section, key, ""), "[" + section + "] " + key);
    }

    bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
        if (!has(section, key)) {
            mark_used(section, key);
            return fallback;
        }
        std::string v = get(section, key, "");
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw config_error("config key [" + section + "] " + key + " must be boolean, got '" + v + "'");
    }

    /// Startup guard: every key present in the file must belong to the
    /// documented key set. One config file may drive several commands, so
    /// keys consumed by other commands stay valid.
    void reject_unknown() const {
        static const std::set<std::string> known = [] {
            std::set<std::string> k;
            auto add = [&](const std::string& section, std::initializer_list<const char*> keys) {
                for (const char* key : keys) k.insert(section + "\x1f" + key);
            };
            add("run", {"seed"});
            add("corpus", {"num_types", "num_cells", "num_genes", "num_batches", "marker_genes_per_type",
                           "dropout_rate", "value_signal", "split", "train_fraction", "val_fraction",
                           "test_fraction", "held_out_fraction"});
            add("model", {"preset", "gene_vocab_size", "max_cell_tokens", "gene_embed_dim", "cell_layers",
                          "cell_heads", "cell_positional", "text_vocab_size", "text_hidden_dim", "text_layers",
                          "text_heads", "max_text_len", "num_query_tokens", "qformer_hidden_dim",
                          "qformer_layers", "qformer_heads", "cross_attention_freq", "projector_dim",
                          "t2c_layers", "t2c_heads", "prompt_len", "projector", "contrastive_pool",
                          "adapter_rank", "adapter_alpha", "adapter_dropout"});
            for (const char* sec : {"stage1", "stage2", "finetune"})
                add(sec, {"peak_lr", "warmup_origin_lr", "floor_lr", "warmup_steps", "max_steps",
                          "weight_decay", "batch_size", "clip_norm"});
            add("finetune", {"mode"});
            add("train", {"text_source", "tau", "num_negatives", "checkpoint_every", "matching_negatives"});
            add("ablation", {"no_stage1", "no_stage2", "no_infonce", "no_match_ce", "scratch_init"});
            add("eval", {"task", "split", "lambda", "knn_k", "gen_per_type", "gen_noise", "caption_max_len",
                         "acc_at", "embed_dim", "knn_list", "lambda_grid", "type"});
            add("probe", {"hidden_dim", "steps", "batch_size", "lr", "sentence_len"});
            add("paths", {"corpus_dir", "run_dir", "checkpoint", "out_dir", "out_file"});
            return k;
        }();
        for (const auto& [section, kv] : values_)
            for (const auto& [key, value] : kv)
                if (!known.count(section + "\x1f" + key))
                    throw config_error("unknown config key [" + section + "] " + key);
    }

    void override_value(const std::string& section, const std::string& key, const std::string& value) {
        values_[section][key] = value;
    }

    /// Flat key=value snapshot with sections, for the run directory.
    std::string snapshot() const {
        std::string out;
        for (const auto& [section, kv] : values_) {
            out += "[" + section + "]\n";
            for (const auto& [key, value] : kv) out += key + " = " + value + "\n";
        }
        return out;
    }

  private:
    static std::string strip(const std::string& s) {
        std::size_t a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        std::size_t b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }

    void mark_used(const std::string& section, const std::string& key) const {
        used_.insert(section + "\x1f" + key);
    }

    std::map<std::string, std::map<std::string, std::string>> values_;
    mutable std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Config resolution
// ---------------------------------------------------------------------------

struct CliFlags {
    bool force = false;
    bool no_stage1 = false, no_stage2 = false, no_infonce = false, no_match_ce = false, scratch_init = false;
    bool seed_overridden = false;
    std::uint64_t seed = 0;
};

inline std::uint64_t resolved_seed(const ConfigFile& cfg, const CliFlags& flags) {
    std::uint64_t seed = std::uint64_t(cfg.get_size("run", "seed", 7));
    if (flags.seed_overridden) seed = flags.seed;
    if (const char* env = std::getenv("SCMM_SEED")) {
        std::string s(env);
        seed = std::uint64_t(parse_long(s, "SCMM_SEED"));
    }
    return seed;
}

inline corpus::CorpusSpec corpus_spec_from(const ConfigFile& cfg) {
    corpus::CorpusSpec spec;
    spec.num_types = cfg.get_size("corpus", "num_types", spec.num_types);
    spec.num_cells = cfg.get_size("corpus", "num_cells", spec.num_cells);
    spec.num_genes = cfg.get_size("corpus", "num_genes", spec.num_genes);
    spec.num_batches = cfg.get_size("corpus", "num_batches", spec.num_batches);
    spec.marker_genes_per_type = cfg.get_size("corpus", "marker_genes_per_type", spec.marker_genes_per_type);
    spec.dropout_rate = cfg.get_double("corpus", "dropout_rate", spec.dropout_rate);
    spec.value_signal = cfg.get_bool("corpus", "value_signal", spec.value_signal);
    return spec;
}

inline model::ModelConfig model_config_from(const ConfigFile& cfg) {
    std::string preset = cfg.get("model", "preset", "toy");
    model::ModelConfig m;
    if (preset == "toy")
        m = model::ModelConfig::toy();
    else if (preset == "paper_scale")
        m = model::ModelConfig::paper_scale();
    else
        throw config_error("unknown model preset '" + preset + "'");
    m.gene_vocab_size = cfg.get_size("model", "gene_vocab_size", m.gene_vocab_size);
    m.max_cell_tokens = cfg.get_size("model", "max_cell_tokens", m.max_cell_tokens);
    m.gene_embed_dim = cfg.get_size("model", "gene_embed_dim", m.gene_embed_dim);
    m.cell_layers = cfg.get_size("model", "cell_layers", m.cell_layers);
    m.cell_heads = cfg.get_size("model", "cell_heads", m.cell_heads);
    m.cell_positional = cfg.get_bool("model", "cell_positional", m.cell_positional);
    m.text_vocab_size = cfg.get_size("model", "text_vocab_size", m.text_vocab_size);
    m.text_hidden_dim = cfg.get_size("model", "text_hidden_dim", m.text_hidden_dim);
    m.text_layers = cfg.get_size("model", "text_layers", m.text_layers);
    m.text_heads = cfg.get_size("model", "text_heads", m.text_heads);
    m.max_text_len = cfg.get_size("model", "max_text_len", m.max_text_len);
    m.num_query_tokens = cfg.get_size("model", "num_query_tokens", m.num_query_tokens);
    m.qformer_hidden_dim = cfg.get_size("model", "qformer_hidden_dim", m.qformer_hidden_dim);
    m.qformer_layers = cfg.get_size("model", "qformer_layers", m.qformer_layers);
    m.qformer_heads = cfg.get_size("model", "qformer_heads", m.qformer_heads);
    m.cross_attention_freq = cfg.get_size("model", "cross_attention_freq", m.cross_attention_freq);
    m.projector_dim = cfg.get_size("model", "projector_dim", m.projector_dim);
    m.t2c_layers = cfg.get_size("model", "t2c_layers", m.t2c_layers);
    m.t2c_heads = cfg.get_size("model", "t2c_heads", m.t2c_heads);
    m.prompt_len = cfg.get_size("model", "prompt_len", m.prompt_len);
    m.projector_kind = cfg.get("model", "projector", m.projector_kind);
    m.contrastive_pool = cfg.get("model", "contrastive_pool", m.contrastive_pool);
    m.adapter.rank = cfg.get_size("model", "adapter_rank", 4);
    m.adapter.alpha = cfg.get_double("model", "adapter_alpha", 8.0);
    m.adapter.dropout = cfg.get_double("model", "adapter_dropout", 0.0);
    m.validate();
    return m;
}

/// Calibrated toy defaults per phase; every knob remains overridable.
inline training::OptimizerConfig optimizer_from(const ConfigFile& cfg, const std::string& section,
                                                std::uint64_t seed) {
    training::OptimizerConfig o;
    if (section == "stage1") {
        o.peak_lr = 1e-3;
        o.max_steps = 300;
    } else if (section == "stage2") {
        o.peak_lr = 2e-3;
        o.max_steps = 400;
    } else {
        o.peak_lr = 2e-3;
        o.max_steps = 150;
    }
    o.warmup_steps = 20;
    o.batch_size = 8;
    o.peak_lr = cfg.get_double(section, "peak_lr", o.peak_lr);
    o.warmup_origin_lr = cfg.get_double(section, "warmup_origin_lr", o.warmup_origin_lr);
    o.floor_lr = cfg.get_double(section, "floor_lr", o.floor_lr);
    o.warmup_steps = cfg.get_size(section, "warmup_steps", o.warmup_steps);
    o.max_steps = cfg.get_size(section, "max_steps", o.max_steps);
    o.weight_decay = cfg.get_double(section, "weight_decay", o.weight_decay);
    o.batch_size = cfg.get_size(section, "batch_size", o.batch_size);
    o.clip_norm = cfg.get_double(section, "clip_norm", o.clip_norm);
    if (o.warmup_steps > o.max_steps) o.warmup_steps = o.max_steps;
    o.seed = seed;
    o.validate();
    return o;
}

inline training::TrainOptions train_options_from(const ConfigFile& cfg, const CliFlags& flags) {
    training::TrainOptions t;
    t.text_source = corpus::text_source_from_string(cfg.get("train", "text_source", "merged"));
    t.tau = cfg.get_double("train", "tau", 0.07);
    t.num_negatives = cfg.get_size("train", "num_negatives", 2);
    t.checkpoint_every = cfg.get_size("train", "checkpoint_every", 0);
    std::string matching = cfg.get("train", "matching_negatives", "uniform");
    if (matching == "hard")
        throw config_error("matching_negatives = hard is a documented stub, not implemented; use uniform");
    if (matching != "uniform") throw config_error("unknown matching_negatives mode '" + matching + "'");
    t.ablation.no_infonce = flags.no_infonce || cfg.get_bool("ablation", "no_infonce", false);
    t.ablation.no_match_ce = flags.no_match_ce || cfg.get_bool("ablation", "no_match_ce", false);
    return t;
}

// ---------------------------------------------------------------------------
// Shared command plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline void require_empty_or_force(const fs::path& dir, bool force, const std::string& what) {
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force)
            throw config_error(what + " '" + dir.string() +
                               "' exists and is not empty; pass --force to overwrite");
        // A forced rerun starts from a clean directory; losses.csv appends
        // and stale artifacts would otherwise leak into the new run.
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

inline corpus::Corpus load_corpus_dir(const ConfigFile& cfg) {
    std::string dir = cfg.require("paths", "corpus_dir");
    if (!fs::exists(fs::path(dir) / "matrix.tsv"))
        throw data_error("corpus directory '" + dir + "' has no matrix.tsv");
    return corpus::load_corpus(dir);
}

inline std::vector<std::size_t> split_indices(const corpus::Corpus& c, const std::string& which) {
    if (!c.split) throw data_error("corpus has no splits.tsv; run gen-data with splitting enabled");
    if (which == "train") return c.split->train;
    if (which == "val") return c.split->val;
    if (which == "test") return c.split->test;
    if (which == "all") {
        std::vector<std::size_t> all(c.num_cells());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return all;
    }
    throw config_error("unknown split '" + which + "' (expected train|val|test|all)");
}

inline model::ParameterStore load_checkpoint_store(const ConfigFile& cfg) {
    std::string path = cfg.require("paths", "checkpoint");
    if (!fs::exists(path)) throw data_error("checkpoint not found: " + path);
    return training::load_checkpoint(path).store;
}

inline void write_stage_tag(const std::string& run_dir, const std::string& tag) {
    write_file((fs::path(run_dir) / "stage.txt").string(), tag + "\n");
}

} // namespace detail

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_gen_data(const ConfigFile& cfg, const CliFlags& flags) {
    std::uint64_t seed = resolved_seed(cfg, flags);
    corpus::CorpusSpec spec = corpus_spec_from(cfg);
    // The corpus lands where every other command will read it; out_dir is the
    // fallback so a gen-data-only config stays minimal.
    std::string out_dir = cfg.has("paths", "corpus_dir") ? cfg.get("paths", "corpus_dir", "")
                                                         : cfg.require("paths", "out_dir");
    std::string split_kind = cfg.get("corpus", "split", "random");
    corpus::SplitFractions fractions{cfg.get_double("corpus", "train_fraction", 0.7),
                                     cfg.get_double("corpus", "val_fraction", 0.1),
                                     cfg.get_double("corpus", "test_fraction", 0.2)};
    double held_out = cfg.get_double("corpus", "held_out_fraction", 0.3);
    cfg.reject_unknown();

    detail::require_empty_or_force(out_dir, flags.force, "output directory");
    corpus::Corpus c = corpus::generate_synthetic_corpus(spec, seed);
    if (split_kind == "random")
        c.split = corpus::split_random(c.records, fractions, seed);
    else if (split_kind == "by_type")
        c.split = corpus::split_by_type(c.records, held_out, seed, fractions);
    else
        throw config_error("unknown split strategy '" + split_kind + "' (expected random|by_type)");
    corpus::save_corpus(c, out_dir);

    // Provenance note so downstream commands can see how the corpus was made.
    std::string gen = "num_types\t" + std::to_string(spec.num_types) + "\n" +
                      "num_cells\t" + std::to_string(spec.num_cells) + "\n" +
                      "num_genes\t" + std::to_string(spec.num_genes) + "\n" +
                      "num_batches\t" + std::to_string(spec.num_batches) + "\n" +
                      "marker_genes_per_type\t" + std::to_string(spec.marker_genes_per_type) + "\n" +
                      "dropout_rate\t" + fmt_g9(spec.dropout_rate) + "\n" +
                      "value_signal\t" + (spec.value_signal ? std::string("1") : std::string("0")) + "\n" +
                      "seed\t" + std::to_string(seed) + "\n";
    write_file((fs::path(out_dir) / "genspec.tsv").string(), gen);
    std::cout << "corpus written to " << out_dir << " (" << c.num_cells() << " cells, " << c.num_genes()
              << " genes)\n";
    return 0;
}

inline int cmd_pretrain(const ConfigFile& cfg, const CliFlags& flags) {
    std::uint64_t seed = resolved_seed(cfg, flags);
    corpus::Corpus c = detail::load_corpus_dir(cfg);
    model::ModelConfig mc = model_config_from(cfg);
    training::TrainOptions topt = train_options_from(cfg, flags);
    bool no_stage1 = flags.no_stage1 || cfg.get_bool("ablation", "no_stage1", false);
    bool no_stage2 = flags.no_stage2 || cfg.get_bool("ablation", "no_stage2", false);
    cfg.get_bool("ablation", "scratch_init", true); // always true here: no published weights exist
    training::OptimizerConfig o1 = optimizer_from(cfg, "stage1", seed);
    training::OptimizerConfig o2 = optimizer_from(cfg, "stage2", seed);
    std::string run_dir = cfg.require("paths", "run_dir");
    cfg.reject_unknown();

    if (!no_stage1 && topt.ablation.no_infonce && topt.ablation.no_match_ce)
        throw config_error("both stage-1 loss terms are ablated; this degenerate configuration is refused");

    detail::require_empty_or_force(run_dir, flags.force, "run directory");
    write_file((fs::path(run_dir) / "config.snapshot").string(), cfg.snapshot());

    corpus::TextTokenizer tk = corpus::build_corpus_tokenizer(c);
    model::ParameterStore store = model::init_parameters(mc, seed);
    if (!c.split) throw data_error("corpus has no splits.tsv");
    topt.run_dir = run_dir;

    if (!no_stage1) {
        training::run_stage1(c, c.split->train, tk, store, o1, topt);
        detail::write_stage_tag(run_dir, "stage1");
    }
    if (!no_stage2) {
        training::run_stage2(c, c.split->train, tk, store, o2, topt);
        detail::write_stage_tag(run_dir, "stage2");
    }
    if (no_stage1 && no_stage2) detail::write_stage_tag(run_dir, "none");
    training::save_checkpoint((fs::path(run_dir) / "final.ckpt").string(), store,
                              no_stage2 ? training::Stage::stage1 : training::Stage::stage2);
    std::cout << "pretraining complete; run directory " << run_dir << "\n";
    return 0;
}

inline int cmd_finetune(const ConfigFile& cfg, const CliFlags& flags) {
    std::uint64_t seed = resolved_seed(cfg, flags);
    corpus::Corpus c = detail::load_corpus_dir(cfg);
    model::ParameterStore store = detail::load_checkpoint_store(cfg);
    training::TrainOptions topt = train_options_from(cfg, flags);
    std::string mode = cfg.get("finetune", "mode", "annotation");
    training::OptimizerConfig o = optimizer_from(cfg, "finetune", seed);
    std::string run_dir = cfg.require("paths", "run_dir");
    cfg.reject_unknown();

    detail::require_empty_or_force(run_dir, flags.force, "run directory");
    write_file((fs::path(run_dir) / "config.snapshot").string(), cfg.snapshot());
    if (!c.split) throw data_error("corpus has no splits.tsv");
    corpus::TextTokenizer tk = corpus::build_corpus_tokenizer(c);
    topt.run_dir = run_dir;

    if (mode == "annotation") {
        training::finetune_annotation(c, c.split->train, tk, store, o, topt);
        detail::write_stage_tag(run_dir, "ft_annotation");
    } else if (mode == "caption") {
        if (store.group_parameters(model::ParamGroup::adapters) == 0)
            model::apply_adapters(store, {model::ParamGroup::text_backbone}, seed);
        training::finetune_caption(c, c.split->train, tk, store, o, topt);
        detail::write_stage_tag(run_dir, "ft_caption");
    } else {
        throw config_error("unknown finetune mode '" + mode + "' (expected annotation|caption)");
    }
    training::save_checkpoint((fs::path(run_dir) / "final.ckpt").string(), store,
                              mode == "annotation" ? training::Stage::ft_annotation
                                                   : training::Stage::ft_caption);
    std::cout << "fine-tuning (" << mode << ") complete; run directory " << run_dir << "\n";
    return 0;
}

inline int cmd_eval(const ConfigFile& cfg, const CliFlags& flags) {
    std::uint64_t seed = resolved_seed(cfg, flags);
    corpus::Corpus c = detail::load_corpus_dir(cfg);
    model::ParameterStore store = detail::load_checkpoint_store(cfg);
    std::string task = cfg.get("eval", "task", "annotation");
    std::string split_name = cfg.get("eval", "split", "test");
    double lambda = cfg.get_double("eval", "lambda", 0.5);
    double tau = cfg.get_double("train", "tau", 0.07);
    corpus::TextSource source = corpus::text_source_from_string(cfg.get("train", "text_source", "merged"));
    std::string out_dir = cfg.require("paths", "out_dir");
    std::size_t knn_k = cfg.get_size("eval", "knn_k", 15);
    std::size_t gen_per_type = cfg.get_size("eval", "gen_per_type", 8);
    double gen_noise = cfg.get_double("eval", "gen_noise", 0.02);
    std::size_t caption_max_len = cfg.get_size("eval", "caption_max_len", store.config.max_text_len);
    std::string acc_at_str = cfg.get("eval", "acc_at", "1,3,5");
    cfg.reject_unknown();

    fs::create_directories(out_dir);
    std::vector<std::size_t> indices = detail::split_indices(c, split_name);
    if (indices.empty()) throw data_error("eval split '" + split_name + "' is empty");
    corpus::TextTokenizer tk = corpus::build_corpus_tokenizer(c);

    if (task == "annotation") {
        std::vector<std::size_t> top_ns;
        for (const std::string& p : scmm::split(acc_at_str, ','))
            top_ns.push_back(std::size_t(parse_long(p, "[eval] acc_at")));
        auto cands = inference::candidates_for_types(c.type_labels(), c, tk, source);
        std::vector<std::string> truth, predicted;
        std::vector<std::vector<std::string>> rankings;
        std::vector<inference::AnnotationRow> rows;
        for (std::size_t i : indices) {
            auto res = inference::annotate(store, corpus::cell_tokens(c, i, store.config.max_cell_tokens),
                                           cands, lambda, tau);
            truth.push_back(c.records[i].cell_type);
            predicted.push_back(res.predicted_type);
            rankings.push_back(res.ranking);
            rows.push_back({c.matrix.cell_ids[i], res.predicted_type, c.records[i].cell_type,
                            res.rank_of(c.records[i].cell_type), res.ranked_losses.front()});
        }
        metrics::ClassificationReport rep = metrics::classification_metrics(truth, rankings, top_ns);
        inference::write_annotations_tsv((fs::path(out_dir) / "annotations.tsv").string(), rows);
        inference::write_confusion_csv((fs::path(out_dir) / "confusion.csv").string(), truth, predicted);
        std::string summary = "accuracy,macro_f1";
        std::string vals = fmt_g9(rep.accuracy) + "," + fmt_g9(rep.macro_f1);
        for (const auto& [n, acc] : rep.acc_at) {
            summary += ",acc@" + std::to_string(n);
            vals += "," + fmt_g9(acc);
        }
        write_file((fs::path(out_dir) / "annotation_report.csv").string(), summary + "\n" + vals + "\n");
        std::cout << "annotation: accuracy " << fmt_g9(rep.accuracy) << ", macro F1 " << fmt_g9(rep.macro_f1)
                  << "\n";
    } else if (task == "clustering") {
        inference::EmbeddingTable table = inference::extract_embeddings(store, c, indices);
        std::vector<std::string> types, batches;
        for (std::size_t i : indices) {
            types.push_back(c.records[i].cell_type);
            batches.push_back(c.records[i].batch);
        }
        metrics::ClusteringReport rep = metrics::clustering_report(table.rows, types, batches, {knn_k, seed});
        inference::write_embeddings_tsv((fs::path(out_dir) / "embeddings.tsv").string(), table);
        inference::write_clustering_report_csv((fs::path(out_dir) / "clustering_report.csv").string(), rep);
        std::cout << "clustering: avg_bio " << fmt_g9(rep.avg_bio) << ", avg_batch " << fmt_g9(rep.avg_batch)
                  << "\n";
    } else if (task == "caption") {
        auto cands = inference::candidates_for_types(c.type_labels(), c, tk, source);
        std::map<std::string, std::string> ref_by_type;
        for (const auto& cand : cands) ref_by_type[cand.type_label] = cand.desc.raw;
        std::vector<std::string> captions, references, truth, extracted;
        std::string dump = "cell_id\tcaption\treference\n";
        model::GenerateOptions gopt;
        gopt.max_len = caption_max_len;
        for (std::size_t i : indices) {
            corpus::TextDescription cap =
                inference::caption(store, tk, corpus::cell_tokens(c, i, store.config.max_cell_tokens), gopt);
            const std::string& ref = ref_by_type.at(c.records[i].cell_type);
            captions.push_back(cap.raw);
            references.push_back(ref);
            truth.push_back(c.records[i].cell_type);
            extracted.push_back(inference::extract_type_from_caption(cap.raw));
            dump += c.matrix.cell_ids[i] + "\t" + cap.raw + "\t" + ref + "\n";
        }
        metrics::TextReport rep;
        double b = 0, r = 0, m = 0;
        for (std::size_t i = 0; i < captions.size(); ++i) {
            b += metrics::bleu(captions[i], {references[i]});
            r += metrics::rouge_n(captions[i], references[i]);
            m += metrics::meteor_simplified(captions[i], references[i]);
        }
        rep.bleu2 = b / double(captions.size());
        rep.rouge2 = r / double(captions.size());
        rep.meteor = m / double(captions.size());
        metrics::TextEmbedder embedder = metrics::hashed_bow_embedder(cfg.get_size("eval", "embed_dim", 64));
        metrics::Points cap_emb = metrics::embed_text_for_distribution(captions, embedder);
        metrics::Points ref_emb = metrics::embed_text_for_distribution(references, embedder);
        rep.mmd = metrics::mmd(cap_emb, ref_emb, -1.0, seed);
        rep.emd = metrics::emd(cap_emb, ref_emb);
        rep.type_accuracy = metrics::label_accuracy(truth, extracted);
        rep.type_macro_f1 = metrics::macro_f1(truth, extracted);
        write_file((fs::path(out_dir) / "captions.tsv").string(), dump);
        inference::write_text_report_csv((fs::path(out_dir) / "text_report.csv").string(), rep);
        std::cout << "caption: bleu2 " << fmt_g9(rep.bleu2) << ", type accuracy " << fmt_g9(rep.type_accuracy)
                  << "\n";
    } else if (task == "generation") {
        auto cands = inference::candidates_for_types(c.type_labels(), c, tk, source);
        metrics::Points real, generated;
        std::vector<std::string> real_labels, intended;
        for (std::size_t i : indices) {
            real.push_back(corpus::normalized(c, i).values);
            real_labels.push_back(c.records[i].cell_type);
        }
        for (const auto& cand : cands) {
            metrics::Points cells = inference::generate_pseudo_cells(store, cand.desc, gen_per_type, gen_noise, seed);
            for (auto& cell : cells) {
                generated.push_back(std::move(cell));
                intended.push_back(cand.type_label);
            }
        }
        std::vector<std::size_t> k_list;
        for (const std::string& p : scmm::split(cfg.get("eval", "knn_list", "3,5,10,25"), ','))
            k_list.push_back(std::size_t(parse_long(p, "[eval] knn_list")));
        auto acc = metrics::knn_generation_accuracy(real, real_labels, generated, intended, k_list);
        inference::write_pseudo_cells_tsv((fs::path(out_dir) / "pseudo_cells.tsv").string(), intended, generated);
        inference::write_knn_gen_csv((fs::path(out_dir) / "knn_gen.csv").string(), acc);
        std::cout << "generation: knn accuracy at k=" << k_list.front() << " is " << fmt_g9(acc[k_list.front()])
                  << "\n";
    } else {
        throw config_error("unknown eval task '" + task + "' (expected annotation|clustering|caption|generation)");
    }
    return 0;
}

inline int cmd_probe(const ConfigFile& cfg, const CliFlags& flags) {
    std::uint64_t seed = resolved_seed(cfg, flags);
    corpus::Corpus c = detail::load_corpus_dir(cfg);
    probe::ProbeConfig pcfg;
    pcfg.hidden_dim = cfg.get_size("probe", "hidden_dim", pcfg.hidden_dim);
    pcfg.steps = cfg.get_size("probe", "steps", pcfg.steps);
    pcfg.batch_size = cfg.get_size("probe", "batch_size", pcfg.batch_size);
    pcfg.lr = cfg.get_double("probe", "lr", pcfg.lr);
    pcfg.sentence_len = cfg.get_size("probe", "sentence_len", pcfg.sentence_len);
    pcfg.seed = seed;
    std::string out_dir = cfg.require("paths", "out_dir");
    std::string corpus_dir = cfg.get("paths", "corpus_dir", "");
    cfg.reject_unknown();

    bool value_signal = false;
    fs::path genspec = fs::path(corpus_dir) / "genspec.tsv";
    if (fs::exists(genspec)) {
        for (const std::string& line : read_lines(genspec.string())) {
            auto f = split(line, '\t');
            if (f.size() == 2 && f[0] == "value_signal") value_signal = f[1] == "1";
        }
    }
    if (!value_signal)
        std::cerr << "warning: corpus was not generated with value_signal; the value-vs-rank contrast is not "
                     "forced\n";
    if (!c.split) throw data_error("corpus has no splits.tsv");

    fs::create_directories(out_dir);
    probe::ProbeReport rep = probe::run_probe(c, *c.split, pcfg, value_signal);
    probe::write_probe_report_csv((fs::path(out_dir) / "probe_report.csv").string(), rep);
    std::cout << "probe: value " << fmt_g9(rep.value_test_accuracy) << ", rank "
              << fmt_g9(rep.rank_test_accuracy) << ", gap " << fmt_g9(rep.gap) << " points\n";
    return 0;
}

inline int cmd_sweep_lambda(const ConfigFile& cfg, const CliFlags& flags) {
    std::uint64_t seed = resolved_seed(cfg, flags);
    (void)seed;
    corpus::Corpus c = detail::load_corpus_dir(cfg);
    model::ParameterStore store = detail::load_checkpoint_store(cfg);
    std::string split_name = cfg.get("eval", "split", "test");
    double tau = cfg.get_double("train", "tau", 0.07);
    corpus::TextSource source = corpus::text_source_from_string(cfg.get("train", "text_source", "merged"));
    std::string out_dir = cfg.require("paths", "out_dir");
    std::string grid_str = cfg.get("eval", "lambda_grid", "");
    cfg.reject_unknown();

    std::vector<double> grid;
    if (grid_str.empty())
        grid = inference::default_lambda_grid();
    else
        for (const std::string& p : scmm::split(grid_str, ','))
            grid.push_back(parse_double(p, "[eval] lambda_grid"));

    corpus::TextTokenizer tk = corpus::build_corpus_tokenizer(c);
    auto cands = inference::candidates_for_types(c.type_labels(), c, tk, source);
    std::vector<std::size_t> indices = detail::split_indices(c, split_name);
    std::vector<corpus::CellTokens> cells;
    std::vector<std::string> labels;
    for (std::size_t i : indices) {
        cells.push_back(corpus::cell_tokens(c, i, store.config.max_cell_tokens));
        labels.push_back(c.records[i].cell_type);
    }
    auto rows = inference::lambda_sweep(store, cells, labels, cands, grid, tau);
    fs::create_directories(out_dir);
    inference::write_lambda_sweep_csv((fs::path(out_dir) / "lambda_sweep.csv").string(), rows);
    std::cout << "lambda sweep: " << rows.size() << " rows written\n";
    return 0;
}

inline int cmd_gen_cells(const ConfigFile& cfg, const CliFlags& flags) {
    std::uint64_t seed = resolved_seed(cfg, flags);
    corpus::Corpus c = detail::load_corpus_dir(cfg);
    model::ParameterStore store = detail::load_checkpoint_store(cfg);
    corpus::TextSource source = corpus::text_source_from_string(cfg.get("train", "text_source", "merged"));
    std::string type_filter = cfg.get("eval", "type", "");
    std::size_t per_type = cfg.get_size("eval", "gen_per_type", 8);
    double noise = cfg.get_double("eval", "gen_noise", 0.02);
    std::string out_dir = cfg.require("paths", "out_dir");
    cfg.reject_unknown();

    corpus::TextTokenizer tk = corpus::build_corpus_tokenizer(c);
    std::vector<std::string> types = type_filter.empty() ? c.type_labels() : std::vector<std::string>{type_filter};
    auto cands = inference::candidates_for_types(types, c, tk, source);
    metrics::Points generated;
    std::vector<std::string> intended;
    for (const auto& cand : cands) {
        metrics::Points cells = inference::generate_pseudo_cells(store, cand.desc, per_type, noise, seed);
        for (auto& cell : cells) {
            generated.push_back(std::move(cell));
            intended.push_back(cand.type_label);
        }
    }
    fs::create_directories(out_dir);
    inference::write_pseudo_cells_tsv((fs::path(out_dir) / "pseudo_cells.tsv").string(), intended, generated);
    std::cout << generated.size() << " pseudo-cells written\n";
    return 0;
}

/// Merges per-run metric CSVs into one comparison table. Single-row CSVs with
/// a header line are flattened into columns; missing files leave their
/// columns absent-marked.
inline int cmd_report(const ConfigFile& cfg, const CliFlags& flags, const std::vector<std::string>& run_dirs) {
    (void)flags;
    std::string out_path = cfg.get("paths", "out_file", "report.csv");
    cfg.reject_unknown();
    if (run_dirs.empty()) throw config_error("report: no run directories given");

    const std::vector<std::string> files = {"annotation_report.csv", "clustering_report.csv", "text_report.csv",
                                            "knn_gen.csv"};
    // Collect the union of columns in stable (file, column) order.
    std::vector<std::string> columns;
    std::map<std::string, std::map<std::string, std::string>> per_run; // run -> column -> value
    for (const std::string& dir : run_dirs) {
        for (const std::string& file : files) {
            fs::path p = fs::path(dir) / file;
            if (!fs::exists(p)) continue;
            std::vector<std::string> lines = read_lines(p.string());
            if (lines.size() < 2) continue;
            std::vector<std::string> header = split(lines[0], ',');
            std::vector<std::string> vals = split(lines[1], ',');
            for (std::size_t i = 0; i < header.size() && i < vals.size(); ++i) {
                if (std::find(columns.begin(), columns.end(), header[i]) == columns.end())
                    columns.push_back(header[i]);
                per_run[dir][header[i]] = vals[i];
            }
        }
    }
    std::string out = "run";
    for (const std::string& col : columns) out += "," + col;
    out += "\n";
    for (const std::string& dir : run_dirs) {
        out += dir;
        for (const std::string& col : columns) {
            auto it = per_run[dir].find(col);
            out += "," + (it == per_run[dir].end() ? std::string("absent") : it->second);
        }
        out += "\n";
    }
    write_file(out_path, out);
    std::cout << "report written to " << out_path << " (" << run_dirs.size() << " runs)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline void print_usage(std::ostream& os) {
    os << "usage: scmm <gen-data|pretrain|finetune|eval|probe|sweep-lambda|gen-cells|report>"
          " --config <path> [--seed N] [--force]\n"
          "       [--no-stage1] [--no-stage2] [--no-infonce] [--no-match-ce] [--scratch-init]\n"
          "       report also accepts positional run directories\n";
}

inline int run_cli(const std::vector<std::string>& args) {
    try {
        if (args.empty()) {
            print_usage(std::cerr);
            throw config_error("no command given");
        }
        std::string command = args[0];
        std::string config_path;
        CliFlags flags;
        std::vector<std::string> positional;
        for (std::size_t i = 1; i < args.size(); ++i) {
            const std::string& a = args[i];
            if (a == "--config") {
                if (i + 1 >= args.size()) throw config_error("--config needs a path");
                config_path = args[++i];
            } else if (a == "--seed") {
                if (i + 1 >= args.size()) throw config_error("--seed needs a value");
                flags.seed = std::uint64_t(parse_long(args[++i], "--seed"));
                flags.seed_overridden = true;
            } else if (a == "--force") {
                flags.force = true;
            } else if (a == "--no-stage1") {
                flags.no_stage1 = true;
            } else if (a == "--no-stage2") {
                flags.no_stage2 = true;
            } else if (a == "--no-infonce") {
                flags.no_infonce = true;
            } else if (a == "--no-match-ce") {
                flags.no_match_ce = true;
            } else if (a == "--scratch-init") {
                flags.scratch_init = true;
            } else if (a == "--help" || a == "-h") {
                print_usage(std::cout);
                return 0;
            } else if (!a.empty() && a[0] == '-') {
                throw config_error("unknown flag '" + a + "'");
            } else {
                positional.push_back(a);
            }
        }
        ConfigFile cfg = config_path.empty() ? ConfigFile::parse_text("", "<empty>")
                                             : ConfigFile::parse_file(config_path);
        if (command == "gen-data") return cmd_gen_data(cfg, flags);
        if (command == "pretrain") return cmd_pretrain(cfg, flags);
        if (command == "finetune") return cmd_finetune(cfg, flags);
        if (command == "eval") return cmd_eval(cfg, flags);
        if (command == "probe") return cmd_probe(cfg, flags);
        if (command == "sweep-lambda") return cmd_sweep_lambda(cfg, flags);
        if (command == "gen-cells") return cmd_gen_cells(cfg, flags);
        if (command == "report") return cmd_report(cfg, flags, positional);
        print_usage(std::cerr);
        throw config_error("unknown command '" + command + "'");
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const data_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    }
}

} // namespace scmm::cli
