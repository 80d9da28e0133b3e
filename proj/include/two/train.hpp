// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "two/model.hpp"

namespace two {

struct TrainConfig {
    std::string stage = "finetune";  // "pretrain" or "finetune"
    int epochs = 3;
    int batch_size = 8;
    double lr_mm = 1e-5;   // multimodal-encoder parameter group
    double lr_txt = 1e-4;  // textual encoder, decoder and bridge
    int warmup_steps = -1;  // -1 means 10% of total steps
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    uint64_t seed = 0;
    int log_every = 10;

    void validate() const;
};

// step/warmup during warmup, then linear decay to 0 at total_steps.
double lr_factor(int64_t step, int64_t warmup_steps, int64_t total_steps);

struct OptimizerState {
    std::map<std::string, Matrix> m;
    std::map<std::string, Matrix> v;
    int64_t t = 0;
};

// One decoupled-weight-decay moment update over all parameters. lr per
// parameter comes from its group ("mm." prefix vs everything else).
void optimizer_step(Model& model, OptimizerState& state, const TrainConfig& cfg,
                    double schedule_factor);

struct StepLog {
    int64_t step = 0;
    std::string stage;
    double loss = 0.0;
    double lr_mm = 0.0;
    double lr_txt = 0.0;
};

class Trainer {
public:
    Trainer(Model& model, TrainConfig cfg, std::vector<const Sample*> data);

    // Resume bookkeeping: fast-forwards past already-consumed steps.
    void restore(OptimizerState state, int64_t completed_steps);

    int64_t total_steps() const { return total_steps_; }
    int64_t step() const { return step_; }
    const OptimizerState& optimizer() const { return opt_; }

    // Runs until max_steps (or to completion when max_steps < 0). Returns the
    // last batch loss. Logs one JSON line per log_every steps to `log`.
    double run(std::ostream* log, int64_t max_steps = -1);

    // Single batch over explicit samples, exposed for tests.
    double train_step(const std::vector<const Sample*>& batch);

private:
    Model& model_;
    TrainConfig cfg_;
    std::vector<const Sample*> data_;
    OptimizerState opt_;
    int64_t step_ = 0;
    int64_t total_steps_ = 0;
    int64_t steps_per_epoch_ = 0;
    int64_t warmup_ = 0;

    std::vector<size_t> epoch_order(int64_t epoch) const;
    void check_stage_rules(const AssembledInput& input) const;
    AssemblyOptions assembly_options() const;
};

Model pretrain(Model model, const std::vector<Sample>& source, const TrainConfig& cfg,
               std::ostream* log, OptimizerState* out_opt = nullptr);
Model finetune(Model model, const std::vector<Sample>& target, const TrainConfig& cfg,
               std::ostream* log, OptimizerState* out_opt = nullptr);

// Synthetic pretraining stand-in: templated questions over random image
// features, answers drawn from answer_pool so vocabulary overlap with a
// target set is controllable.
std::vector<Sample> generate_toy_source(int n, int object_count, int feat_dim, uint64_t seed,
                                        const std::vector<std::string>& answer_pool);

}  // namespace two
