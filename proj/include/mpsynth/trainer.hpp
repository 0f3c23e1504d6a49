#pragma once

#include "mpsynth/metrics.hpp"
#include "mpsynth/nets.hpp"
#include "mpsynth/objectives.hpp"
#include "mpsynth/phantom.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mpsynth {

enum class CheckpointPolicy { every_epoch, final_only, none };

std::string to_string(CheckpointPolicy p);
CheckpointPolicy parse_checkpoint_policy(const std::string& text);

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 4;
    double lr = 1e-3;
    double lr_decay = 0.9;
    std::size_t lr_decay_every = 5;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    LossWeights weights;
    GanMode gan_mode = GanMode::saturating;
    NetConfig net;
    CheckpointPolicy checkpoint_policy = CheckpointPolicy::every_epoch;

    /// Throws ConfigError naming the first invalid field.
    void validate() const;
};

/// Flat JSON whose keys mirror the field names above.
std::string config_to_json(const TrainConfig& cfg);
/// Unknown keys and wrongly typed values are ConfigErrors naming the key.
TrainConfig config_from_json(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);

/// initial * decay^floor(epoch / every)
double lr_schedule(std::size_t epoch, double initial, double decay = 0.9, std::size_t every = 5);

struct AdamConfig {
    double beta1 = 0.5, beta2 = 0.999, eps = 1e-8;
};

template <typename T>
struct AdamState {
    std::map<std::string, BasicTensor<T>> m, v;
    std::uint64_t t = 0;

    bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam step over every parameter, in name order, with
/// double-precision arithmetic. Every parameter needs a matching gradient.
template <typename T>
void adam_step(ParamStore<T>& params, const std::map<std::string, BasicTensor<T>>& grads, AdamState<T>& state,
               double lr, const AdamConfig& cfg);

struct ModelCheckpoint {
    TrainConfig config;
    std::size_t epoch = 0;
    std::string rng_state;
    ParamStore<float> generator, discriminator;
    AdamState<float> generator_opt, discriminator_opt;
};

/// Directory with manifest.json and one MPT1 file per tensor.
void checkpoint_save(const std::filesystem::path& dir, const ModelCheckpoint& ckpt);
/// CheckpointError names a missing or mis-shaped tensor, or both variant
/// kinds when `expected` disagrees with the stored config.
ModelCheckpoint checkpoint_load(const std::filesystem::path& dir, std::optional<Variant> expected = std::nullopt);

/// Stacks the chosen input parameters of `cases` into N x 1 x H x W tensors.
std::vector<Tensor> stack_inputs(const std::vector<const CaseRecord*>& cases, const NetConfig& net);
Tensor stack_targets(const std::vector<const CaseRecord*>& cases);

/// Generator output for each case, computed in batches without gradients.
std::vector<Tensor> synthesize(const ParamStore<float>& generator, const NetConfig& net,
                               const std::vector<CaseRecord>& cases, std::size_t batch = 8);

MetricsReport evaluate_model(const ParamStore<float>& generator, const NetConfig& net,
                             const std::vector<CaseRecord>& cases, PerceptualNet& perceptual);

std::vector<CaseRecord> load_split(const DatasetManifest& manifest, Split split);

struct TrainState {
    ParamStore<float> generator, discriminator;
    AdamState<float> generator_opt, discriminator_opt;
};

/// Fresh He-initialized weights for cfg.net at `image_size`, seeded by cfg.seed.
TrainState init_train_state(const TrainConfig& cfg, std::size_t image_size);

/// One alternating update on a batch: a discriminator step with the
/// generator frozen, then a generator + reconstructor step against the
/// updated, frozen discriminator. `after_discriminator` runs between them.
LossBreakdown train_step(TrainState& state, const TrainConfig& cfg, PerceptualNet& perceptual,
                         const std::vector<Tensor>& inputs, const Tensor& target, double lr,
                         const std::function<void()>& after_discriminator = {});

struct StepLosses {
    std::size_t step = 0, epoch = 0;
    LossBreakdown losses;
};

struct TrainResult {
    ParamStore<float> generator, discriminator;
    AdamState<float> generator_opt, discriminator_opt;
    std::vector<StepLosses> log;
    std::optional<MetricsReport> test_metrics; ///< absent when the test split is empty
};

using LogFn = std::function<void(const std::string&)>;

/// Alternating minimax training. Writes config.json, losses.csv,
/// ckpt_epoch_E/ (per checkpoint_policy) and metrics.csv into `out_dir`.
TrainResult train(const TrainConfig& cfg, const DatasetManifest& manifest, const std::filesystem::path& out_dir,
                  const LogFn& log = {});

std::string losses_csv(const std::vector<StepLosses>& log);

struct AblationRow {
    std::string label; ///< variant kind, or input count
    std::uint64_t seed = 0;
    MetricsAggregate mean;
};

/// Trains mp, mpf, mpfa and full for each seed under `base`'s budget.
/// Writes ablation.csv (variant,seed,ssim,psnr_db,nmse,lp) and one run dir per pair.
std::vector<AblationRow> run_ablation(const TrainConfig& base, const DatasetManifest& manifest,
                                      const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir,
                                      const LogFn& log = {});

/// Trains the full model on the first 1, 2 and 3 entries of param_order
/// for each seed. Writes inputs.csv (n_inputs,seed,ssim,psnr_db,nmse,lp).
std::vector<AblationRow> run_input_study(const TrainConfig& base, const DatasetManifest& manifest,
                                         const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir,
                                         const LogFn& log = {});

} // namespace mpsynth
