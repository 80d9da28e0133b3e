// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#include "two/train.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "two/common.hpp"
#include "two/implicit.hpp"
#include "two/rng.hpp"

using nlohmann::json;

namespace two {

void TrainConfig::validate() const {
    if (stage != "pretrain" && stage != "finetune")
        throw ValidationError("stage must be \"pretrain\" or \"finetune\"");
    if (epochs < 1) throw ValidationError("epochs must be positive");
    if (batch_size < 1) throw ValidationError("batch_size must be positive");
    if (lr_mm <= 0.0 || lr_txt <= 0.0) throw ValidationError("learning rates must be positive");
    if (weight_decay < 0.0) throw ValidationError("weight_decay must be non-negative");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ValidationError("betas must lie in [0, 1)");
    if (eps <= 0.0) throw ValidationError("eps must be positive");
}

double lr_factor(int64_t step, int64_t warmup_steps, int64_t total_steps) {
    if (total_steps < 1) throw ValidationError("total_steps must be positive");
    if (step < 0 || step > total_steps)
        throw ValidationError("step " + std::to_string(step) + " outside [0, " +
                              std::to_string(total_steps) + "]");
    if (warmup_steps < 0 || warmup_steps >= total_steps)
        throw ValidationError("warmup_steps must lie in [0, total_steps)");
    if (step < warmup_steps)
        return static_cast<double>(step) / static_cast<double>(warmup_steps);
    return static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - warmup_steps);
}

void optimizer_step(Model& model, OptimizerState& state, const TrainConfig& cfg,
                    double schedule_factor) {
    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (auto& [name, param] : model.params()) {
        const bool mm_group = name.rfind("mm.", 0) == 0;
        const double lr = (mm_group ? cfg.lr_mm : cfg.lr_txt) * schedule_factor;
        Matrix& m = state.m.try_emplace(name, Matrix::Zero(param->value.rows(),
                                                           param->value.cols()))
                        .first->second;
        Matrix& v = state.v.try_emplace(name, Matrix::Zero(param->value.rows(),
                                                           param->value.cols()))
                        .first->second;
        const Matrix& g = param->grad;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        Matrix update = (m / bc1).array() / ((v / bc2).array().sqrt() + cfg.eps);
        param->value -= lr * (update + cfg.weight_decay * param->value);
    }
}

Trainer::Trainer(Model& model, TrainConfig cfg, std::vector<const Sample*> data)
    : model_(model), cfg_(std::move(cfg)), data_(std::move(data)) {
    cfg_.validate();
    if (data_.empty()) throw ValidationError("training set is empty");
    steps_per_epoch_ = (static_cast<int64_t>(data_.size()) + cfg_.batch_size - 1) /
                       cfg_.batch_size;
    total_steps_ = steps_per_epoch_ * cfg_.epochs;
    warmup_ = cfg_.warmup_steps >= 0 ? cfg_.warmup_steps : total_steps_ / 10;
    if (warmup_ >= total_steps_) warmup_ = total_steps_ - 1;

    const bool need_knowledge = cfg_.stage == "finetune" &&
                                (model_.config().include_implicit_textual ||
                                 model_.config().include_implicit_multimodal);
    if (need_knowledge) {
        std::vector<std::string> missing;
        for (const Sample* s : data_)
            if (!s->knowledge) missing.push_back(s->id);
        if (!missing.empty())
            throw MissingKnowledgeError("finetune requires knowledge bundles; missing for " +
                                        std::to_string(missing.size()) + " samples, first \"" +
                                        missing.front() + "\"");
    }
}

void Trainer::restore(OptimizerState state, int64_t completed_steps) {
    if (completed_steps < 0 || completed_steps > total_steps_)
        throw ValidationError("resume step outside this run's schedule");
    opt_ = std::move(state);
    step_ = completed_steps;
}

std::vector<size_t> Trainer::epoch_order(int64_t epoch) const {
    std::vector<size_t> order(data_.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 gen(derive_seed(cfg_.seed, "epoch." + std::to_string(epoch)));
    rng::shuffle(gen, order);
    return order;
}

AssemblyOptions Trainer::assembly_options() const {
    AssemblyOptions opts;
    if (cfg_.stage == "pretrain") {
        opts.include_implicit_textual = false;
        opts.include_implicit_multimodal = false;
    } else {
        opts.include_implicit_textual = model_.config().include_implicit_textual;
        opts.include_implicit_multimodal = model_.config().include_implicit_multimodal;
    }
    return opts;
}

void Trainer::check_stage_rules(const AssembledInput& input) const {
    if (cfg_.stage != "pretrain") return;
    for (const auto& stream : input.passages)
        for (int id : stream)
            if (id == Vocabulary::SEP_M || id == Vocabulary::SEP_T)
                throw Error("stage invariant violated: implicit-knowledge separator in a "
                            "pretrain batch");
}

double Trainer::train_step(const std::vector<const Sample*>& batch) {
    if (batch.empty()) throw ValidationError("empty batch");
    const AssemblyOptions opts = assembly_options();
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    model_.zero_grads();
    ag::Value total;
    for (const Sample* s : batch) {
        AssembledInput input = assemble_input(*s, model_.config(), model_.vocab(), opts);
        check_stage_rules(input);
        std::vector<int> gold = model_.encode_answer(example_answer(*s));
        ag::Value loss = ag::scale(model_.forward_loss(input, s->features, gold), inv_b);
        total = total ? ag::add(total, loss) : loss;
    }
    double loss_value = total->value(0, 0);
    if (!std::isfinite(loss_value))
        throw Error("non-finite loss " + std::to_string(loss_value) + " at step " +
                    std::to_string(step_ + 1) + " (stage " + cfg_.stage + ")");
    ag::backward(total);
    optimizer_step(model_, opt_, cfg_, lr_factor(step_, warmup_, total_steps_));
    ++step_;
    return loss_value;
}

double Trainer::run(std::ostream* log, int64_t max_steps) {
    int64_t stop = total_steps_;
    if (max_steps >= 0) stop = std::min(stop, step_ + max_steps);
    double last_loss = 0.0;
    while (step_ < stop) {
        const int64_t epoch = step_ / steps_per_epoch_;
        const int64_t batch_idx = step_ % steps_per_epoch_;
        std::vector<size_t> order = epoch_order(epoch);
        const size_t begin = static_cast<size_t>(batch_idx) * cfg_.batch_size;
        const size_t end = std::min(order.size(), begin + cfg_.batch_size);
        std::vector<const Sample*> batch;
        for (size_t i = begin; i < end; ++i) batch.push_back(data_[order[i]]);

        const double factor = lr_factor(step_, warmup_, total_steps_);
        last_loss = train_step(batch);
        if (log && (step_ % cfg_.log_every == 0 || step_ == total_steps_)) {
            json line;
            line["step"] = step_;
            line["stage"] = cfg_.stage;
            line["loss"] = last_loss;
            line["lr_mm"] = cfg_.lr_mm * factor;
            line["lr_txt"] = cfg_.lr_txt * factor;
            (*log) << line.dump() << "\n";
        }
    }
    return last_loss;
}

namespace {

std::vector<const Sample*> pointers_to(const std::vector<Sample>& samples) {
    std::vector<const Sample*> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(&s);
    return out;
}

}  // namespace

Model pretrain(Model model, const std::vector<Sample>& source, const TrainConfig& cfg,
               std::ostream* log, OptimizerState* out_opt) {
    TrainConfig c = cfg;
    c.stage = "pretrain";
    Trainer trainer(model, c, pointers_to(source));
    trainer.run(log);
    if (out_opt) *out_opt = trainer.optimizer();
    return model;
}

Model finetune(Model model, const std::vector<Sample>& target, const TrainConfig& cfg,
               std::ostream* log, OptimizerState* out_opt) {
    TrainConfig c = cfg;
    c.stage = "finetune";
    Trainer trainer(model, c, pointers_to(target));
    trainer.run(log);
    if (out_opt) *out_opt = trainer.optimizer();
    return model;
}

std::vector<Sample> generate_toy_source(int n, int object_count, int feat_dim, uint64_t seed,
                                        const std::vector<std::string>& answer_pool) {
    if (n < 1) throw ValidationError("toy source size must be positive");
    if (object_count < 1 || feat_dim < 1)
        throw ValidationError("toy source shapes must be positive");
    if (answer_pool.empty()) throw ValidationError("answer pool is empty");
    std::mt19937_64 gen(derive_seed(seed, "toy.source"));
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const std::string& answer = answer_pool[static_cast<size_t>(i) % answer_pool.size()];
        const size_t marker = static_cast<size_t>(i) % answer_pool.size();
        Sample s;
        s.id = "src-" + std::to_string(i);
        s.image_ref = "toy-img-" + std::to_string(i);
        s.question = "what goes with code" + std::to_string(marker);
        s.answers.assign(5, answer);
        s.visual_context.caption = "synthetic scene " + std::to_string(i);
        s.visual_context.labels = {{{"synthetic"}, "object"}};
        s.features.object_features = rng::uniform_matrix(gen, object_count, feat_dim, 0.0, 1.0);
        s.features.boxes = rng::uniform_matrix(gen, object_count, 4, 0.0, 1.0);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace two
