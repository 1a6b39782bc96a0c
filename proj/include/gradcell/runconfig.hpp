#pragma once

#include <string>

#include "gradcell/dac.hpp"

namespace gradcell::cli {

// Everything a run can configure, parsed from flat key=value text.
// '#' starts a comment, blank lines are skipped, later assignments to
// the same key win. Unknown keys are rejected outright so a typo cannot
// silently fall back to a default.
struct RunConfig {
    dac::TrainConfig train;  // encoder config nested inside

    // fine-tuning knobs
    double train_frac = 0.8;
    double val_frac = 0.1;
    std::int64_t n_epochs = 10;
    std::int64_t finetune_batch_size = 32;
    double head_dropout = 0.1;
    bool freeze_encoder = true;
    double finetune_lr = 1e-4;
    double finetune_weight_decay = 0.0;

    bool seed_given = false;  // true when the file assigned `seed`
};

RunConfig parse_run_config_text(const std::string& text, const std::string& origin);
RunConfig parse_run_config(const std::string& path);

// Seed precedence: an explicit --seed flag, then the config file, then
// the GRADCELL_SEED environment variable, then zero.
std::uint64_t resolve_seed(bool flag_given, std::uint64_t flag_value, const RunConfig* config);

}  // namespace gradcell::cli
