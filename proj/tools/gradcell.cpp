// Command-line front end: synthetic data, preprocessing, pre-training,
// gradient-equivalence verification, memory planning, fine-tuning and
// metric evaluation. Exit codes: 0 success, 1 validation or input
// error, 2 numerical failure, 3 equivalence-check failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gradcell/checkpoint.hpp"
#include "gradcell/dac.hpp"
#include "gradcell/downstream.hpp"
#include "gradcell/errors.hpp"
#include "gradcell/preprocess.hpp"
#include "gradcell/runconfig.hpp"

using namespace gradcell;

namespace {

std::vector<std::int64_t> parse_int_list(const std::string& csv) {
    std::vector<std::int64_t> out;
    std::istringstream in(csv);
    std::string tok;
    while (std::getline(in, tok, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoll(tok, &used));
            if (used != tok.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw UsageError("'" + tok + "' is not an integer");
        }
    }
    if (out.empty()) throw UsageError("expected a comma-separated integer list");
    return out;
}

bool same_encoder(const enc::EncoderConfig& a, const enc::EncoderConfig& b) {
    return a.feature_size == b.feature_size && a.n_layers == b.n_layers &&
           a.n_heads == b.n_heads && a.max_seq_len == b.max_seq_len &&
           a.dropout_p == b.dropout_p && a.n_random_features == b.n_random_features &&
           a.attention_mode == b.attention_mode &&
           a.exact_attention_cap == b.exact_attention_cap && a.n_genes == b.n_genes &&
           a.n_tokens == b.n_tokens && a.proj_dim == b.proj_dim &&
           a.favor_redraw == b.favor_redraw;
}

// Sidecar label files: '#' comments, "cell_id label" per line, ids
// matching the 1-indexed count-matrix rows.
std::map<std::int64_t, std::string> read_label_sidecar(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open label file: " + path);
    std::map<std::int64_t, std::string> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::int64_t id = 0;
        std::string label;
        if (!(ls >> id)) continue;
        if (!(ls >> label))
            throw ParseError(path + ":" + std::to_string(lineno) + ": missing label");
        if (!out.emplace(id, label).second)
            throw SchemaError(path + ": duplicate entry for cell " + std::to_string(id));
    }
    return out;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw UsageError("cannot write " + path);
    out << text;
    if (!out) throw UsageError("write failed: " + path);
}

void save_trainer_checkpoint(const std::string& path, dac::Trainer& trainer) {
    ckpt::save_checkpoint(path, trainer.config().encoder, trainer.step_count(),
                          trainer.trainable(), trainer.optimizer().state_blobs());
}

int run_synth(std::int64_t cells, std::int64_t genes, double density, std::uint64_t seed,
              const std::string& out, const std::string& labels_out) {
    const auto m = pre::synth_counts(cells, genes, density, seed);
    pre::write_count_matrix(out, m);
    if (!labels_out.empty()) {
        const auto labels = pre::synth_labels(cells, seed);
        std::ofstream lf(labels_out);
        if (!lf) throw UsageError("cannot write " + labels_out);
        lf << "# cell_id label\n";
        for (std::int64_t c = 0; c < cells; ++c)
            lf << (c + 1) << " " << (labels[static_cast<std::size_t>(c)] == pre::Label::cancer
                                         ? "cancer"
                                         : "normal")
               << "\n";
    }
    std::cerr << "wrote " << m.n_cells << " cells x " << m.n_genes << " genes, "
              << m.entries.size() << " entries\n";
    return 0;
}

int run_preprocess(const std::string& input, const std::string& format, const std::string& output,
                   const std::string& bins, const std::string& labels_path) {
    if (format != "counts")
        throw ConfigError("unsupported input format '" + format + "' (only: counts)");
    const auto m = pre::ingest_count_matrix(input);

    std::vector<pre::Label> labels;
    if (!labels_path.empty()) {
        const auto sidecar = read_label_sidecar(labels_path);
        labels.reserve(static_cast<std::size_t>(m.n_cells));
        for (std::int64_t i = 0; i < m.n_cells; ++i) {
            const auto it = sidecar.find(m.original_cell_ids[static_cast<std::size_t>(i)] + 1);
            if (it == sidecar.end()) {
                labels.push_back(pre::Label::unknown);
            } else if (it->second == "normal") {
                labels.push_back(pre::Label::normal);
            } else if (it->second == "cancer") {
                labels.push_back(pre::Label::cancer);
            } else if (it->second == "unknown") {
                labels.push_back(pre::Label::unknown);
            } else {
                throw SchemaError("pre-training labels must be normal/cancer/unknown, got '" +
                                  it->second + "'");
            }
        }
    }

    const auto profiles = pre::profiles_from_counts(m, labels.empty() ? nullptr : &labels);
    pre::write_profiles(output, profiles, m.n_genes);
    const std::string bins_path = bins.empty() ? output + ".bins" : bins;
    pre::write_binspec(bins_path, pre::BinSpec{});
    std::cerr << "wrote " << profiles.size() << " profiles to " << output << ", bins to "
              << bins_path << "\n";
    return 0;
}

int run_pretrain(const std::string& config_path, const std::string& data,
                 const std::string& out_dir, std::int64_t steps, const std::string& resume,
                 const std::string& bins, std::int64_t ckpt_every, bool seed_flag,
                 std::uint64_t seed_val) {
    cli::RunConfig rc = config_path.empty() ? cli::RunConfig{} : cli::parse_run_config(config_path);
    rc.train.seed = cli::resolve_seed(seed_flag, seed_val, &rc);

    if (!bins.empty()) {
        const auto spec = pre::read_binspec(bins);
        const pre::BinSpec expected{};
        if (spec.n_tokens != expected.n_tokens || spec.edges != expected.edges)
            throw SchemaError("the trainer only supports the default expression bins");
    }

    auto [profiles, n_genes] = pre::read_profiles(data);
    if (rc.train.encoder.n_genes == 0) {
        rc.train.encoder.n_genes = n_genes;
    } else if (rc.train.encoder.n_genes != n_genes) {
        throw SchemaError("config says " + std::to_string(rc.train.encoder.n_genes) +
                          " genes but the corpus has " + std::to_string(n_genes));
    }
    std::vector<pre::Label> labels;
    labels.reserve(profiles.size());
    for (const auto& p : profiles) labels.push_back(p.label);
    // the step function expects cells that already fit the context window
    for (auto& p : profiles) p = pre::truncate_profile(p, rc.train.encoder.max_seq_len - 1);

    rc.train.validate();
    if (steps <= 0) throw ConfigError("--steps must be positive");
    if (ckpt_every < 0) throw ConfigError("--ckpt-every cannot be negative");

    std::filesystem::create_directories(out_dir);
    const std::string metrics_path = out_dir + "/metrics.txt";

    std::optional<dac::Trainer> trainer;
    if (resume.empty()) {
        trainer.emplace(rc.train,
                        enc::EncoderParams::init(rc.train.encoder, rc.train.seed,
                                                 rc.train.precision),
                        obj::PretrainHeads::init(rc.train.encoder.feature_size,
                                                 pre::BinSpec{}.n_bins(), rc.train.seed,
                                                 rc.train.precision));
        // a fresh run owns its log; resumed runs append to the existing one
        std::ofstream(metrics_path, std::ios::trunc);
    } else {
        const auto c = ckpt::load_checkpoint(resume);
        if (!same_encoder(c.config, rc.train.encoder))
            throw SchemaError("checkpoint encoder config disagrees with the run config");
        auto params = enc::EncoderParams::init(c.config, rc.train.seed, rc.train.precision);
        auto heads = obj::PretrainHeads::init(c.config.feature_size, pre::BinSpec{}.n_bins(),
                                              rc.train.seed, rc.train.precision);
        std::vector<ad::Parameter*> all = params.all();
        for (auto* p : heads.all()) all.push_back(p);
        ckpt::load_params(c, all);
        trainer.emplace(rc.train, std::move(params), std::move(heads));
        trainer->optimizer().load_state(c.blobs, c.step);
        trainer->set_step_count(c.step);
    }

    const std::int64_t target = trainer->step_count() + steps;
    while (trainer->step_count() < target) {
        const auto left = target - trainer->step_count();
        const auto seg = ckpt_every > 0 ? std::min(ckpt_every, left) : left;
        dac::pretrain(profiles, labels, rc.train, seg, metrics_path, &*trainer);
        if (ckpt_every > 0 && trainer->step_count() < target)
            save_trainer_checkpoint(
                out_dir + "/ckpt_" + std::to_string(trainer->step_count()) + ".bin", *trainer);
    }
    save_trainer_checkpoint(out_dir + "/final.bin", *trainer);
    std::cerr << "trained to step " << trainer->step_count() << ", checkpoint in " << out_dir
              << "/final.bin\n";
    return 0;
}

int run_verify(const std::string& config_path, std::int64_t batch, const std::string& chunks,
               bool seed_flag, std::uint64_t seed_val, double threshold, double temperature,
               bool hook_desync) {
    enc::EncoderConfig cfg;
    if (config_path.empty()) {
        // small exact-attention model; the theorem does not depend on size
        cfg.feature_size = 16;
        cfg.n_layers = 2;
        cfg.n_heads = 2;
        cfg.max_seq_len = 32;
        cfg.dropout_p = 0.1;
        cfg.attention_mode = enc::AttentionMode::exact;
        cfg.exact_attention_cap = 64;
        cfg.n_genes = 24;
        cfg.n_tokens = 8;
    } else {
        cfg = cli::parse_run_config(config_path).train.encoder;
        if (cfg.n_genes == 0) cfg.n_genes = 24;
    }
    cfg.validate();
    const auto seed = cli::resolve_seed(seed_flag, seed_val, nullptr);
    const auto t_list = parse_int_list(chunks);

    dac::DacHooks hooks;
    if (hook_desync) hooks.perturb_sample = 0;

    const auto report = dac::verify_gradient_equivalence(cfg, batch, t_list, seed, temperature,
                                                         threshold, hook_desync ? &hooks : nullptr);
    std::printf("batch=%lld threshold=%.3e seed=%llu\n",
                static_cast<long long>(report.batch_size), report.threshold,
                static_cast<unsigned long long>(seed));
    for (const auto& row : report.rows)
        std::printf("t=%-4lld max_rel=%.6e worst=%-24s %s\n",
                    static_cast<long long>(row.mini_size), row.max_rel_diff,
                    row.worst_param.c_str(), row.pass ? "pass" : "FAIL");
    std::printf("RESULT %s\n", report.all_pass() ? "PASS" : "FAIL");
    return report.all_pass() ? 0 : 3;
}

int run_memplan(double budget, const std::vector<std::int64_t>& minis, std::int64_t seq_len,
                const std::string& preset, double bytes_per_token, double fixed_overhead,
                std::int64_t layers) {
    dac::MemoryModel model;
    if (preset == "published") {
        model = dac::published_memory_preset();
    } else if (preset == "custom") {
        model.bytes_per_token_per_layer = bytes_per_token;
        model.fixed_overhead_bytes = fixed_overhead;
        model.budget_bytes = budget > 0 ? budget : 1.0;
    } else {
        throw ConfigError("unknown preset '" + preset + "' (use: published, custom)");
    }
    if (budget > 0) model.budget_bytes = budget;
    model.validate();

    enc::EncoderConfig cfg;  // only the layer count enters the estimate
    cfg.n_layers = layers;

    std::printf("budget_bytes=%.6g per_token_per_layer=%.6g fixed=%.6g layers=%lld\n",
                model.budget_bytes, model.bytes_per_token_per_layer, model.fixed_overhead_bytes,
                static_cast<long long>(layers));
    if (seq_len > 0) {
        // the estimate is linear in mini*len, so the roles swap cleanly
        const auto max_mini = dac::max_len_for_budget(model, model.budget_bytes, seq_len, cfg);
        std::printf("seq_len=%lld max_mini=%lld est_bytes=%.6g\n",
                    static_cast<long long>(seq_len), static_cast<long long>(max_mini),
                    max_mini > 0 ? dac::memory_estimate(model, seq_len, max_mini, cfg) : 0.0);
        return 0;
    }
    for (const auto mini : minis) {
        const auto max_len = dac::max_len_for_budget(model, model.budget_bytes, mini, cfg);
        std::printf("mini=%-6lld max_len=%-8lld est_bytes=%.6g\n", static_cast<long long>(mini),
                    static_cast<long long>(max_len),
                    max_len > 0 ? dac::memory_estimate(model, max_len, mini, cfg) : 0.0);
    }
    return 0;
}

down::FineTuneConfig finetune_config(const cli::RunConfig& rc, std::uint64_t seed) {
    down::FineTuneConfig ft;
    ft.split.train_frac = rc.train_frac;
    ft.split.val_frac = rc.val_frac;
    ft.split.seed = seed;
    ft.adam.lr = rc.finetune_lr;
    ft.adam.weight_decay = rc.finetune_weight_decay;
    ft.batch_size = rc.finetune_batch_size;
    ft.n_epochs = rc.n_epochs;
    ft.freeze_encoder = rc.freeze_encoder;
    ft.head_dropout = rc.head_dropout;
    ft.seed = seed;
    return ft;
}

int run_finetune(const std::string& task, const std::string& checkpoint, const std::string& data,
                 const std::string& labels, const std::string& config_path,
                 const std::string& report_path, const std::string& drugs,
                 const std::string& pairs, bool cold_split, bool seed_flag,
                 std::uint64_t seed_val) {
    cli::RunConfig rc = config_path.empty() ? cli::RunConfig{} : cli::parse_run_config(config_path);
    const auto seed = cli::resolve_seed(seed_flag, seed_val, &rc);

    const auto c = ckpt::load_checkpoint(checkpoint);
    auto params = enc::EncoderParams::init(c.config, seed, rc.train.precision);
    ckpt::load_params(c, params.all());
    const auto ft = finetune_config(rc, seed);
    const pre::BinSpec spec{};
    const auto dt = rc.train.precision;

    down::EvalReport rep;
    if (task == "annotation" || task == "drug-class") {
        auto cells = down::load_labeled_cells(data, labels);
        for (auto& p : cells.cells) p = pre::truncate_profile(p, c.config.max_seq_len - 1);
        down::ClassifierHead head =
            task == "annotation"
                ? down::annotation_head(c.config.pooled_dim(),
                                        static_cast<std::int64_t>(cells.class_names.size()), seed,
                                        dt)
                : down::drug_sensitivity_head(c.config.pooled_dim(), seed, dt);
        rep = down::fine_tune_classifier(cells, spec, params, head, ft);
    } else if (task == "drug-regress") {
        if (drugs.empty() || pairs.empty())
            throw UsageError("drug-regress needs --drugs and --pairs");
        down::DrugResponsePairs resp;
        const auto m = pre::ingest_count_matrix(data);
        resp.cells = pre::profiles_from_counts(m);
        for (auto& p : resp.cells) p = pre::truncate_profile(p, c.config.max_seq_len - 1);
        resp.drug_features = pre::ingest_gene_embeddings(drugs);
        resp.cold_cell_split = cold_split;

        std::map<std::int64_t, std::int64_t> cell_of_id;  // 1-indexed file id -> row
        for (std::size_t i = 0; i < resp.cells.size(); ++i)
            cell_of_id[m.original_cell_ids[i] + 1] = static_cast<std::int64_t>(i);

        std::ifstream in(pairs);
        if (!in) throw ParseError("cannot open pairs file: " + pairs);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            std::istringstream ls(line);
            std::int64_t cell_id = 0, drug_id = 0;
            double ic50 = 0.0;
            if (!(ls >> cell_id)) continue;
            if (!(ls >> drug_id >> ic50))
                throw ParseError(pairs + ":" + std::to_string(lineno) +
                                 ": expected cell drug ic50");
            const auto it = cell_of_id.find(cell_id);
            if (it == cell_of_id.end())
                throw SchemaError(pairs + ": unknown cell id " + std::to_string(cell_id));
            resp.pairs.push_back({it->second, drug_id - 1, ic50});
        }
        auto head = down::cell_line_head(c.config.pooled_dim(), resp.drug_features.cols(), seed,
                                         dt);
        rep = down::fine_tune_regressor(resp, spec, params, head, ft);
    } else {
        throw ConfigError("unknown task '" + task +
                          "' (use: annotation, drug-class, drug-regress)");
    }

    const auto text = rep.to_text();
    if (!report_path.empty()) write_text(report_path, text);
    std::fputs(text.c_str(), stdout);
    return 0;
}

int run_eval(const std::string& pred_path, const std::string& kind,
             const std::string& report_path) {
    std::ifstream in(pred_path);
    if (!in) throw ParseError("cannot open predictions file: " + pred_path);

    down::EvalReport rep;
    std::vector<std::int64_t> yt, yp;
    std::vector<double> y, yh;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        if (kind == "class") {
            std::int64_t a = 0, b = 0;
            if (!(ls >> a)) continue;
            if (!(ls >> b))
                throw ParseError(pred_path + ":" + std::to_string(lineno) +
                                 ": expected 'true pred'");
            yt.push_back(a);
            yp.push_back(b);
        } else if (kind == "regress") {
            double a = 0, b = 0;
            if (!(ls >> a)) continue;
            if (!(ls >> b))
                throw ParseError(pred_path + ":" + std::to_string(lineno) +
                                 ": expected 'true pred'");
            y.push_back(a);
            yh.push_back(b);
        } else {
            throw ConfigError("unknown kind '" + kind + "' (use: class, regress)");
        }
    }

    if (kind == "class") {
        rep.is_classification = true;
        rep.scores = down::class_scores(yt, yp);
        rep.accuracy = down::accuracy(yt, yp);
        rep.macro_f1 = down::macro_f1(yt, yp);
        rep.weighted_f1 = down::weighted_f1(yt, yp);
    } else {
        rep.is_classification = false;
        rep.pearson = down::pearson(y, yh);
        rep.r2 = down::r2(y, yh);
        rep.rmse = down::rmse(y, yh);
        rep.mae = down::mae(y, yh);
    }
    const auto text = rep.to_text();
    if (!report_path.empty()) write_text(report_path, text);
    std::fputs(text.c_str(), stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"single-cell contrastive pre-training toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic count matrix");
    std::int64_t sy_cells = 256, sy_genes = 64;
    double sy_density = 0.3;
    std::uint64_t sy_seed = 0;
    std::string sy_out, sy_labels;
    synth->add_option("--cells", sy_cells, "number of cells");
    synth->add_option("--genes", sy_genes, "number of genes");
    synth->add_option("--density", sy_density, "expected fraction of nonzero counts");
    auto* sy_seed_opt = synth->add_option("--seed", sy_seed, "rng seed");
    synth->add_option("--out", sy_out, "count matrix output path")->required();
    synth->add_option("--labels", sy_labels, "also write a normal/cancer label sidecar here");

    // preprocess
    auto* prep = app.add_subcommand("preprocess", "normalize counts into a profile corpus");
    std::string pp_input, pp_format = "counts", pp_output, pp_bins, pp_labels;
    prep->add_option("--input", pp_input, "count matrix file")->required();
    prep->add_option("--format", pp_format, "input format (counts)");
    prep->add_option("--output", pp_output, "profile corpus output path")->required();
    prep->add_option("--bins", pp_bins, "bin vocabulary output path (default <output>.bins)");
    prep->add_option("--labels", pp_labels, "label sidecar to fold into the profiles");

    // pretrain
    auto* pt = app.add_subcommand("pretrain", "run the chunked contrastive pre-training loop");
    std::string pt_config, pt_data, pt_out, pt_resume, pt_bins;
    std::int64_t pt_steps = 100, pt_ckpt_every = 0;
    std::uint64_t pt_seed = 0;
    pt->add_option("--config", pt_config, "run config file");
    pt->add_option("--data", pt_data, "profile corpus from preprocess")->required();
    pt->add_option("--out", pt_out, "output directory")->required();
    pt->add_option("--steps", pt_steps, "number of optimizer steps");
    pt->add_option("--resume", pt_resume, "checkpoint to continue from");
    pt->add_option("--bins", pt_bins, "bin vocabulary file to cross-check");
    pt->add_option("--ckpt-every", pt_ckpt_every, "write intermediate checkpoints every N steps");
    auto* pt_seed_opt = pt->add_option("--seed", pt_seed, "rng seed (overrides config)");

    // verify
    auto* vf = app.add_subcommand("verify",
                                  "check chunked gradients against the end-to-end pass");
    std::string vf_config, vf_chunks = "1,2,4,8,16";
    std::int64_t vf_batch = 16;
    std::uint64_t vf_seed = 0;
    double vf_threshold = 1e-6, vf_temperature = 0.05;
    bool vf_hook = false;
    vf->add_option("--config", vf_config, "run config file (encoder section)");
    vf->add_option("--batch", vf_batch, "full batch size T");
    vf->add_option("--chunks", vf_chunks, "comma-separated mini-batch sizes");
    auto* vf_seed_opt = vf->add_option("--seed", vf_seed, "rng seed");
    vf->add_option("--threshold", vf_threshold, "max relative gradient difference");
    vf->add_option("--temperature", vf_temperature, "contrastive temperature");
    vf->add_flag("--hook-desync", vf_hook, "negative control: desync one recomputation");

    // memplan
    auto* mp = app.add_subcommand("memplan", "activation-memory budget planning table");
    double mp_budget = 0.0, mp_bpt = 0.0, mp_fixed = 0.0;
    std::vector<std::int64_t> mp_minis{1, 16, 64, 256};
    std::int64_t mp_seq_len = 0, mp_layers = 10;
    std::string mp_preset = "published";
    mp->add_option("--budget", mp_budget, "memory budget in bytes (default: preset budget)");
    mp->add_option("--mini", mp_minis, "mini-batch sizes to tabulate");
    mp->add_option("--seq-len", mp_seq_len, "invert: max mini-batch for this length");
    mp->add_option("--model-preset", mp_preset, "published or custom");
    mp->add_option("--bytes-per-token", mp_bpt, "custom: activation bytes per token per layer");
    mp->add_option("--fixed-overhead", mp_fixed, "custom: fixed bytes (weights, optimizer)");
    mp->add_option("--layers", mp_layers, "encoder depth the estimate scales with");

    // finetune
    auto* ft = app.add_subcommand("finetune", "train a task head on a pre-trained encoder");
    std::string ft_task, ft_ckpt, ft_data, ft_labels, ft_config, ft_report, ft_drugs, ft_pairs;
    bool ft_cold = false;
    std::uint64_t ft_seed = 0;
    ft->add_option("--task", ft_task, "annotation | drug-class | drug-regress")->required();
    ft->add_option("--checkpoint", ft_ckpt, "pre-trained checkpoint")->required();
    ft->add_option("--data", ft_data, "count matrix file")->required();
    ft->add_option("--labels", ft_labels, "label sidecar (classification tasks)");
    ft->add_option("--config", ft_config, "run config file");
    ft->add_option("--report", ft_report, "where to write the eval report");
    ft->add_option("--drugs", ft_drugs, "drug feature table (binary, regression task)");
    ft->add_option("--pairs", ft_pairs, "cell/drug/ic50 triples (regression task)");
    ft->add_flag("--cold-split", ft_cold, "hold out whole cell lines in the split");
    auto* ft_seed_opt = ft->add_option("--seed", ft_seed, "rng seed");

    // eval
    auto* ev = app.add_subcommand("eval", "score saved predictions");
    std::string ev_pred, ev_kind = "class", ev_report;
    ev->add_option("--pred", ev_pred, "predictions file: 'true pred' per line")->required();
    ev->add_option("--kind", ev_kind, "class or regress");
    ev->add_option("--report", ev_report, "where to write the eval report");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed())
            return run_synth(sy_cells, sy_genes, sy_density,
                             cli::resolve_seed(sy_seed_opt->count() > 0, sy_seed, nullptr), sy_out,
                             sy_labels);
        if (prep->parsed()) return run_preprocess(pp_input, pp_format, pp_output, pp_bins,
                                                  pp_labels);
        if (pt->parsed())
            return run_pretrain(pt_config, pt_data, pt_out, pt_steps, pt_resume, pt_bins,
                                pt_ckpt_every, pt_seed_opt->count() > 0, pt_seed);
        if (vf->parsed())
            return run_verify(vf_config, vf_batch, vf_chunks, vf_seed_opt->count() > 0, vf_seed,
                              vf_threshold, vf_temperature, vf_hook);
        if (mp->parsed())
            return run_memplan(mp_budget, mp_minis, mp_seq_len, mp_preset, mp_bpt, mp_fixed,
                               mp_layers);
        if (ft->parsed())
            return run_finetune(ft_task, ft_ckpt, ft_data, ft_labels, ft_config, ft_report,
                                ft_drugs, ft_pairs, ft_cold, ft_seed_opt->count() > 0, ft_seed);
        if (ev->parsed()) return run_eval(ev_pred, ev_kind, ev_report);
    } catch (const ReplayError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
