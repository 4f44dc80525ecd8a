#include "vplan/training.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

namespace vplan {

using nlohmann::json;

void StageConfig::validate() const {
    if (stage != Stage::PRIMARY_FINETUNE && (head_mode != HeadMode::NTP || K != 0)) {
        throw UsageError(std::string(to_string(stage)) + " trains with next-token prediction only; MTP heads are "
                         "available in PRIMARY_FINETUNE");
    }
    if (head_mode == HeadMode::NTP && K != 0) throw UsageError("head_mode NTP requires K == 0");
    if (head_mode != HeadMode::NTP && K < 1) throw UsageError("MTP head modes need K >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw UsageError("learning rate must be positive");
    if (batch_size < 1 || epochs < 0 || warmup_steps < 0) throw UsageError("invalid batch size, epochs or warmup");
    if (!(final_lr_fraction >= 0.0 && final_lr_fraction <= 1.0)) throw UsageError("final_lr_fraction must lie in [0,1]");
}

json to_json(const StageConfig& c) {
    return {{"stage", std::string(to_string(c.stage))},
            {"head_mode", std::string(to_string(c.head_mode))},
            {"K", c.K},
            {"mask_mode", std::string(to_string(c.mask_mode))},
            {"loss_norm", std::string(to_string(c.loss_norm))},
            {"lr", c.lr},
            {"warmup_steps", c.warmup_steps},
            {"final_lr_fraction", c.final_lr_fraction},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"clip_norm", c.clip_norm},
            {"seed", c.seed}};
}

StageConfig default_stage_config(Stage stage) {
    StageConfig c;
    c.stage = stage;
    switch (stage) {
        case Stage::ALIGN:
            c.lr = 1e-3;
            c.epochs = 2;
            break;
        case Stage::AUX_PRETRAIN:
            c.lr = 3e-4;
            c.epochs = 2;
            break;
        case Stage::PRIMARY_FINETUNE:
            c.lr = 6e-4;
            c.epochs = 8;
            break;
    }
    return c;
}

StageConfig stage_config_from_json(const json& j, Stage stage) {
    StageConfig c = default_stage_config(stage);
    try {
        if (j.contains("head_mode")) c.head_mode = head_mode_from_string(j.at("head_mode").get<std::string>());
        c.K = j.value("K", c.K);
        if (j.contains("mask_mode")) c.mask_mode = mask_mode_from_string(j.at("mask_mode").get<std::string>());
        if (j.contains("loss_norm")) c.loss_norm = loss_norm_from_string(j.at("loss_norm").get<std::string>());
        c.lr = j.value("lr", c.lr);
        c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
        c.final_lr_fraction = j.value("final_lr_fraction", c.final_lr_fraction);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs = j.value("epochs", c.epochs);
        c.clip_norm = j.value("clip_norm", c.clip_norm);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw DataError(std::string("stage config: ") + e.what());
    }
    return c;
}

bool stage_trains(Stage stage, const std::string& name) {
    switch (stage) {
        case Stage::ALIGN: return name.rfind("adapter.", 0) == 0;
        case Stage::AUX_PRETRAIN: return name.rfind("head.", 0) != 0;
        case Stage::PRIMARY_FINETUNE: return !name.ends_with(".base");
    }
    return false;
}

namespace {

bool task_fits_stage(Stage stage, TaskType t) {
    switch (stage) {
        case Stage::ALIGN: return t == TaskType::CAPTION;
        case Stage::AUX_PRETRAIN:
            return t == TaskType::GMA_TEXT || t == TaskType::GMA_IMAGE || t == TaskType::GMA_NONE ||
                   t == TaskType::GP || t == TaskType::SP;
        case Stage::PRIMARY_FINETUNE: return t == TaskType::VPA;
    }
    return false;
}

double scheduled_lr(const StageConfig& c, long step, long total) {
    if (step < c.warmup_steps) return c.lr * static_cast<double>(step + 1) / c.warmup_steps;
    const double span = static_cast<double>(std::max<long>(1, total - c.warmup_steps));
    const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / span);
    const double f = c.final_lr_fraction;
    return c.lr * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(3.141592653589793 * progress)));
}

}  // namespace

StageResult run_stage(Model& model, const StageConfig& config, const std::vector<InstructionSample>& data,
                      const SpecialTokens& special, std::ostream* log_out) {
    config.validate();
    if (data.empty()) throw DataError("empty training set for stage " + std::string(to_string(config.stage)));
    for (const auto& s : data) {
        if (!task_fits_stage(config.stage, s.task_type)) {
            throw DataError("task type " + std::string(to_string(s.task_type)) + " does not belong to stage " +
                            std::string(to_string(config.stage)));
        }
    }
    if (config.stage == Stage::PRIMARY_FINETUNE) {
        attach_heads(model, config.head_mode, config.K, config.seed);
    } else if (model.config.K != 0) {
        throw UsageError("model carries MTP heads; stage " + std::string(to_string(config.stage)) + " needs NTP only");
    }
    for (auto& [name, t] : model.params.tensors) t.trainable = stage_trains(config.stage, name);

    std::vector<EncodedSample> encoded;
    encoded.reserve(data.size());
    for (const auto& s : data) encoded.push_back(encode_sample(s, model.config, special));

    const auto B = static_cast<std::size_t>(config.batch_size);
    const long steps_per_epoch = static_cast<long>((encoded.size() + B - 1) / B);
    const long total_steps = steps_per_epoch * config.epochs;
    AdamState<float> opt;
    StageResult result;
    long step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<std::size_t> order(encoded.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng = substream(config.seed, stream::shuffle, static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_sum = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += B, ++step) {
            const auto t0 = std::chrono::steady_clock::now();
            std::vector<const EncodedSample*> batch;
            for (std::size_t k = begin; k < std::min(order.size(), begin + B); ++k) batch.push_back(&encoded[order[k]]);
            auto grads = model.params.zero_grads();
            StepRecord rec;
            rec.step = step;
            rec.epoch = epoch;
            rec.loss = loss_and_grad(model, batch, config.mask_mode, config.loss_norm, &grads,
                                     config.seed ^ static_cast<std::uint64_t>(step));
            rec.grad_norm = clip_global_norm(grads, config.clip_norm);
            rec.lr = scheduled_lr(config, step, total_steps);
            optimizer_step(model.params, grads, opt, AdamConfig{rec.lr});
            rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            epoch_sum += rec.loss.total;
            if (log_out) {
                *log_out << json{{"stage", std::string(to_string(config.stage))},
                                 {"epoch", epoch},
                                 {"step", step},
                                 {"loss", rec.loss.total},
                                 {"per_head", rec.loss.per_head},
                                 {"counts", rec.loss.counts},
                                 {"lr", rec.lr},
                                 {"grad_norm", rec.grad_norm},
                                 {"wall_ms", rec.wall_ms}}
                                .dump()
                         << '\n';
            }
            result.log.push_back(std::move(rec));
        }
        result.epoch_mean_loss.push_back(epoch_sum / static_cast<double>(steps_per_epoch));
    }
    return result;
}

}  // namespace vplan
