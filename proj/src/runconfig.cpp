#include "gradcell/runconfig.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "gradcell/errors.hpp"

namespace gradcell::cli {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::int64_t parse_i64(const std::string& v, const std::string& where) {
    try {
        std::size_t used = 0;
        const auto x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing");
        return x;
    } catch (const std::exception&) {
        throw ParseError(where + ": '" + v + "' is not an integer");
    }
}

double parse_f64(const std::string& v, const std::string& where) {
    try {
        std::size_t used = 0;
        const auto x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing");
        return x;
    } catch (const std::exception&) {
        throw ParseError(where + ": '" + v + "' is not a number");
    }
}

bool parse_bool(const std::string& v, const std::string& where) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ParseError(where + ": '" + v + "' is not a boolean (use 0/1/true/false)");
}

std::uint64_t parse_u64(const std::string& v, const std::string& where) {
    const auto x = parse_i64(v, where);
    if (x < 0) throw ParseError(where + ": seed cannot be negative");
    return static_cast<std::uint64_t>(x);
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text, const std::string& origin) {
    RunConfig rc;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = origin + ":" + std::to_string(lineno);
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError(where + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw ParseError(where + ": empty key");
        if (val.empty()) throw ParseError(where + ": empty value for '" + key + "'");

        auto& ec = rc.train.encoder;
        if (key == "feature_size") ec.feature_size = parse_i64(val, where);
        else if (key == "n_layers") ec.n_layers = parse_i64(val, where);
        else if (key == "n_heads") ec.n_heads = parse_i64(val, where);
        else if (key == "max_seq_len") ec.max_seq_len = parse_i64(val, where);
        else if (key == "dropout_p") ec.dropout_p = parse_f64(val, where);
        else if (key == "n_random_features") ec.n_random_features = parse_i64(val, where);
        else if (key == "attention_mode") ec.attention_mode = enc::attention_mode_from(val);
        else if (key == "exact_attention_cap") ec.exact_attention_cap = parse_i64(val, where);
        else if (key == "n_genes") ec.n_genes = parse_i64(val, where);
        else if (key == "n_tokens") ec.n_tokens = parse_i64(val, where);
        else if (key == "proj_dim") ec.proj_dim = parse_i64(val, where);
        else if (key == "favor_redraw") ec.favor_redraw = parse_bool(val, where);
        else if (key == "batch_size") rc.train.batch_size = parse_i64(val, where);
        else if (key == "mini_size") rc.train.mini_size = parse_i64(val, where);
        else if (key == "temperature") rc.train.temperature = parse_f64(val, where);
        else if (key == "mask_rate") rc.train.mask_rate = parse_f64(val, where);
        else if (key == "w_cl") rc.train.weights.cl = parse_f64(val, where);
        else if (key == "w_mlm") rc.train.weights.mlm = parse_f64(val, where);
        else if (key == "w_cls") rc.train.weights.cls = parse_f64(val, where);
        else if (key == "lr") rc.train.adam.lr = parse_f64(val, where);
        else if (key == "beta1") rc.train.adam.beta1 = parse_f64(val, where);
        else if (key == "beta2") rc.train.adam.beta2 = parse_f64(val, where);
        else if (key == "eps") rc.train.adam.eps = parse_f64(val, where);
        else if (key == "weight_decay") rc.train.adam.weight_decay = parse_f64(val, where);
        else if (key == "seed") {
            rc.train.seed = parse_u64(val, where);
            rc.seed_given = true;
        } else if (key == "precision") {
            if (val == "f32") rc.train.precision = ad::Dtype::f32;
            else if (val == "f64") rc.train.precision = ad::Dtype::f64;
            else throw ConfigError(where + ": precision must be f32 or f64");
        }
        else if (key == "train_frac") rc.train_frac = parse_f64(val, where);
        else if (key == "val_frac") rc.val_frac = parse_f64(val, where);
        else if (key == "n_epochs") rc.n_epochs = parse_i64(val, where);
        else if (key == "finetune_batch_size") rc.finetune_batch_size = parse_i64(val, where);
        else if (key == "head_dropout") rc.head_dropout = parse_f64(val, where);
        else if (key == "freeze_encoder") rc.freeze_encoder = parse_bool(val, where);
        else if (key == "finetune_lr") rc.finetune_lr = parse_f64(val, where);
        else if (key == "finetune_weight_decay") rc.finetune_weight_decay = parse_f64(val, where);
        else throw ConfigError(where + ": unknown config key '" + key + "'");
    }
    return rc;
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config_text(buf.str(), path);
}

std::uint64_t resolve_seed(bool flag_given, std::uint64_t flag_value, const RunConfig* config) {
    if (flag_given) return flag_value;
    if (config && config->seed_given) return config->train.seed;
    if (const char* env = std::getenv("GRADCELL_SEED")) {
        return parse_u64(trim(env), "GRADCELL_SEED");
    }
    return 0;
}

}  // namespace gradcell::cli
