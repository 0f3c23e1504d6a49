#include "mpsynth/tensor_io.hpp"
#include "mpsynth/trainer.hpp"

#include "test_util.hpp"

#include <json.hpp>

#include <cmath>
#include <set>
#include <fstream>

using namespace mpsynth;
using mpsynth::testing::random_tensor;
using mpsynth::testing::TempDir;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config()
{
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 3;
    cfg.net.base_width = 8;
    cfg.net.attention_ratio = 4;
    cfg.checkpoint_policy = CheckpointPolicy::final_only;
    return cfg;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Bias-corrected Adam on one scalar, written from the update equations.
struct ScalarAdam {
    double m = 0, v = 0, theta;
    int t = 0;
    explicit ScalarAdam(double theta0) : theta(theta0) {}
    void step(double g, double lr, double b1, double b2, double eps)
    {
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
        theta -= lr * mh / (std::sqrt(vh) + eps);
    }
};

ModelCheckpoint sample_checkpoint(const TrainConfig& cfg)
{
    TrainState s = init_train_state(cfg, 32);
    // Give the optimizer non-trivial moments.
    std::map<std::string, Tensor> grads;
    Rng rng(5);
    for (const auto& [name, t] : s.generator)
        grads[name] = random_tensor(rng, t.shape());
    adam_step(s.generator, grads, s.generator_opt, 1e-3, AdamConfig{});
    Rng stream(17);
    stream.next();
    return {cfg, 3, stream.state(), s.generator, s.discriminator, s.generator_opt, s.discriminator_opt};
}

} // namespace

TEST(LrSchedule, DecaysEveryFiveEpochs)
{
    for (std::size_t e = 0; e < 5; ++e)
        EXPECT_EQ(lr_schedule(e, 1e-3), 1e-3);
    EXPECT_NEAR(lr_schedule(5, 1e-3), 9e-4, 1e-18);
    EXPECT_NEAR(lr_schedule(10, 1e-3), 8.1e-4, 1e-18);
    double last = 1;
    for (std::size_t e = 0; e < 200; ++e) {
        const double lr = lr_schedule(e, 1e-3);
        EXPECT_LE(lr, last);
        last = lr;
    }
    EXPECT_THROW(lr_schedule(0, 1e-3, 0.9, 0), ConfigError);
}

TEST(Adam, FirstStepOnScalar)
{
    ParamStore<double> p;
    p.set("theta", BasicTensor<double>({1}, 0.0));
    AdamState<double> s;
    adam_step(p, {{"theta", BasicTensor<double>({1}, 1.0)}}, s, 1e-3, AdamConfig{0.5, 0.999, 1e-8});
    EXPECT_NEAR(p.get("theta")[0], -1e-3 / (1 + 1e-8), 1e-15);
    EXPECT_NEAR(p.get("theta")[0], -9.99999990e-4, 1e-12);
    EXPECT_EQ(s.t, 1u);
}

TEST(Adam, MatchesScalarOracle)
{
    for (const AdamConfig cfg : {AdamConfig{0.5, 0.999, 1e-8}, AdamConfig{0.9, 0.999, 1e-8}}) {
        ParamStore<double> p;
        p.set("a", BasicTensor<double>({2}, std::vector<double>{0.3, -0.7}));
        AdamState<double> s;
        ScalarAdam o0(0.3), o1(-0.7);
        const double gs[][2] = {{0.5, -2.0}, {0.5, -2.0}, {-1.5, 0.25}, {3.0, 0.0}};
        for (const auto& g : gs) {
            adam_step(p, {{"a", BasicTensor<double>({2}, std::vector<double>{g[0], g[1]})}}, s, 1e-3, cfg);
            o0.step(g[0], 1e-3, cfg.beta1, cfg.beta2, cfg.eps);
            o1.step(g[1], 1e-3, cfg.beta1, cfg.beta2, cfg.eps);
            EXPECT_NEAR(p.get("a")[0], o0.theta, 1e-12);
            EXPECT_NEAR(p.get("a")[1], o1.theta, 1e-12);
        }
        EXPECT_EQ(s.t, 4u);
    }
}

TEST(Adam, ZeroGradientKeepsParametersAndDecaysMoments)
{
    ParamStore<double> p;
    p.set("a", BasicTensor<double>({1}, 0.4));
    AdamState<double> s;
    adam_step(p, {{"a", BasicTensor<double>({1}, 1.0)}}, s, 1e-3, AdamConfig{});
    const double m = s.m.at("a")[0], v = s.v.at("a")[0];
    adam_step(p, {{"a", BasicTensor<double>({1}, 0.0)}}, s, 1e-3, AdamConfig{});
    EXPECT_LT(std::abs(s.m.at("a")[0]), std::abs(m));
    EXPECT_LT(s.v.at("a")[0], v);

    ParamStore<double> q;
    q.set("b", BasicTensor<double>({1}, 0.4));
    AdamState<double> sq;
    adam_step(q, {{"b", BasicTensor<double>({1}, 0.0)}}, sq, 1e-3, AdamConfig{});
    EXPECT_EQ(q.get("b")[0], 0.4);
}

TEST(Adam, MisalignedGradientsAreContractErrors)
{
    ParamStore<float> p;
    p.set("a", Tensor({2}));
    AdamState<float> s;
    EXPECT_THROW(adam_step(p, {}, s, 1e-3, AdamConfig{}), ContractError);
    EXPECT_THROW(adam_step(p, {{"a", Tensor({3})}}, s, 1e-3, AdamConfig{}), ContractError);
}

TEST(Config, Defaults)
{
    const TrainConfig cfg;
    EXPECT_EQ(cfg.lr, 1e-3);
    EXPECT_EQ(cfg.lr_decay, 0.9);
    EXPECT_EQ(cfg.lr_decay_every, 5u);
    EXPECT_EQ(cfg.weights.lambda1, 100.0);
    EXPECT_EQ(cfg.weights.lambda2, 25.0);
    EXPECT_EQ(cfg.weights.lambda3, 200.0);
    EXPECT_EQ(cfg.epochs, 20u);
    EXPECT_EQ(cfg.batch_size, 4u);
    EXPECT_EQ(cfg.beta1, 0.5);
}

TEST(Config, JsonRoundTripAndFlatKeys)
{
    TrainConfig cfg = tiny_config();
    cfg.seed = 12345678901234ULL;
    cfg.gan_mode = GanMode::non_saturating;
    cfg.net.variant = Variant::mpfa;
    cfg.net.param_order = {"p3", "p1"};
    cfg.weights.lambda3 = 150;
    const std::string text = config_to_json(cfg);
    EXPECT_EQ(config_to_json(config_from_json(text)), text);

    const auto j = nlohmann::json::parse(text);
    for (const auto& [key, value] : j.items())
        EXPECT_FALSE(value.is_object()) << key;
    for (const char* key : {"epochs", "batch_size", "lr", "lr_decay", "lr_decay_every", "beta1", "beta2", "adam_eps",
                            "seed", "lambda1", "lambda2", "lambda3", "alpha", "gan_mode", "variant", "n_params",
                            "param_order", "base_width", "attention_ratio", "checkpoint_policy"})
        EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(j.at("gan_mode"), "non-saturating");
    EXPECT_EQ(j.at("n_params"), 2);
}

TEST(Config, LambdaDefaultsComeFromEmptyConfig)
{
    const TrainConfig cfg = config_from_json("{}");
    EXPECT_EQ(cfg.weights.lambda1, 100.0);
    EXPECT_EQ(cfg.weights.lambda2, 25.0);
    EXPECT_EQ(cfg.weights.lambda3, 200.0);
}

TEST(Config, StrictParsing)
{
    EXPECT_THROW(config_from_json("{\"epoch\": 3}"), ConfigError);
    EXPECT_THROW(config_from_json("{\"epochs\": \"3\"}"), ConfigError);
    EXPECT_THROW(config_from_json("{\"epochs\": 0}"), ConfigError);
    EXPECT_THROW(config_from_json("{\"lr\": -1}"), ConfigError);
    EXPECT_THROW(config_from_json("{\"variant\": \"unet\"}"), ConfigError);
    EXPECT_THROW(config_from_json("{\"n_params\": 3, \"param_order\": [\"p1\", \"p2\"]}"), ConfigError);
    EXPECT_THROW(config_from_json("[1, 2]"), ConfigError);
    EXPECT_THROW(config_from_json("{ nope"), ConfigError);
    EXPECT_THROW(config_from_json("{\"alpha\": [1, 2]}"), ConfigError);
    try {
        config_from_json("{\"base_widht\": 8}");
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("base_widht"), std::string::npos);
    }
    EXPECT_EQ(config_from_json("{\"n_params\": 2}").net.param_order, (std::vector<std::string>{"p1", "p2"}));
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical)
{
    TempDir dir("ckpt");
    const ModelCheckpoint ck = sample_checkpoint(tiny_config());
    checkpoint_save(dir / "a", ck);
    const ModelCheckpoint back = checkpoint_load(dir / "a");
    EXPECT_EQ(back.generator, ck.generator);
    EXPECT_EQ(back.discriminator, ck.discriminator);
    EXPECT_EQ(back.generator_opt, ck.generator_opt);
    EXPECT_EQ(back.epoch, 3u);
    EXPECT_EQ(back.rng_state, ck.rng_state);
    EXPECT_EQ(config_to_json(back.config), config_to_json(ck.config));
    checkpoint_save(dir / "b", back);
    for (const auto& entry : fs::recursive_directory_iterator(dir / "a")) {
        if (!entry.is_regular_file())
            continue;
        const auto rel = fs::relative(entry.path(), dir / "a");
        EXPECT_EQ(slurp(entry.path()), slurp(dir / "b" / rel)) << rel;
    }
}

TEST(Checkpoint, RoundTripSynthesisIsBitExact)
{
    TempDir dir("ckpt_synth");
    const TrainConfig cfg = tiny_config();
    const ModelCheckpoint ck = sample_checkpoint(cfg);
    checkpoint_save(dir.path(), ck);
    const ModelCheckpoint back = checkpoint_load(dir.path(), cfg.net.variant);
    const std::vector<CaseRecord> cases{generate_case(1, 32, "a"), generate_case(2, 32, "b")};
    const auto before = synthesize(ck.generator, cfg.net, cases), after = synthesize(back.generator, cfg.net, cases);
    ASSERT_EQ(before.size(), 2u);
    EXPECT_EQ(before[0].shape(), (Shape{1, 32, 32}));
    EXPECT_EQ(before, after);
}

TEST(Checkpoint, MissingTensorIsNamed)
{
    TempDir dir("ckpt_missing");
    checkpoint_save(dir.path(), sample_checkpoint(tiny_config()));
    const fs::path victim = dir / "tensors" / "generator" / "gen.head.w.mpt";
    ASSERT_TRUE(fs::exists(victim));
    fs::remove(victim);
    try {
        checkpoint_load(dir.path());
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("gen.head.w"), std::string::npos) << e.what();
        EXPECT_EQ(e.exit_code(), 2);
    }
}

TEST(Checkpoint, ShapeMismatchIsNamed)
{
    TempDir dir("ckpt_shape");
    checkpoint_save(dir.path(), sample_checkpoint(tiny_config()));
    write_tensor(dir / "tensors" / "discriminator" / "disc.head.b.mpt", Tensor({2}));
    try {
        checkpoint_load(dir.path());
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("disc.head.b"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, VariantMismatchNamesBothKinds)
{
    TempDir dir("ckpt_variant");
    checkpoint_save(dir.path(), sample_checkpoint(tiny_config()));
    try {
        checkpoint_load(dir.path(), Variant::mp);
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        const std::string what = e.what();
        EXPECT_NE(what.find("'full'"), std::string::npos) << what;
        EXPECT_NE(what.find("'mp'"), std::string::npos) << what;
    }
    EXPECT_THROW(checkpoint_load(dir / "nothing"), CheckpointError);
}

TEST(TrainStep, FrozenSetsAreUntouched)
{
    const TrainConfig cfg = tiny_config();
    TrainState s = init_train_state(cfg, 32);
    PerceptualNet net;
    const CaseRecord a = generate_case(1, 32), b = generate_case(2, 32);
    const std::vector<const CaseRecord*> batch{&a, &b};
    const auto g0 = content_hash(s.generator), d0 = content_hash(s.discriminator);
    std::uint64_t d_after_step = 0;
    bool hook_ran = false;
    train_step(s, cfg, net, stack_inputs(batch, cfg.net), stack_targets(batch), 1e-3, [&] {
        hook_ran = true;
        EXPECT_EQ(content_hash(s.generator), g0) << "discriminator step changed the generator";
        d_after_step = content_hash(s.discriminator);
        EXPECT_NE(d_after_step, d0);
    });
    EXPECT_TRUE(hook_ran);
    EXPECT_EQ(content_hash(s.discriminator), d_after_step) << "generator step changed the discriminator";
    EXPECT_NE(content_hash(s.generator), g0);
    EXPECT_EQ(s.generator_opt.t, 1u);
    EXPECT_EQ(s.discriminator_opt.t, 1u);
}

TEST(TrainStep, BreakdownIsConsistent)
{
    const TrainConfig cfg = tiny_config();
    TrainState s = init_train_state(cfg, 32);
    PerceptualNet net;
    const CaseRecord a = generate_case(3, 32);
    const std::vector<const CaseRecord*> batch{&a};
    const auto b = train_step(s, cfg, net, stack_inputs(batch, cfg.net), stack_targets(batch), 1e-3);
    EXPECT_NEAR(b.total, b.g_adv + 100 * b.l1 + b.l_d + 25 * b.l_rec + 200 * b.l_p, 1e-6 * std::abs(b.total));
    EXPECT_GT(b.l_rec, 0.0);
    EXPECT_GT(b.l_p, 0.0);
    EXPECT_GE(b.l_d, 0.0);
    double lp = 0;
    for (std::size_t j = 0; j < 5; ++j)
        lp += cfg.weights.alpha[j] * b.lp_layers[j];
    EXPECT_NEAR(lp, b.l_p, 1e-6);
}

TEST(TrainStep, MpVariantHasNoReconstructionTerm)
{
    TrainConfig cfg = tiny_config();
    cfg.net.variant = Variant::mp;
    TrainState s = init_train_state(cfg, 32);
    PerceptualNet net;
    const CaseRecord a = generate_case(3, 32);
    const std::vector<const CaseRecord*> batch{&a};
    EXPECT_EQ(train_step(s, cfg, net, stack_inputs(batch, cfg.net), stack_targets(batch), 1e-3).l_rec, 0.0);
}

TEST(Stacking, SelectsParametersInOrder)
{
    const CaseRecord a = generate_case(1, 16), b = generate_case(2, 16);
    NetConfig net;
    net.param_order = {"p3", "p1"};
    const auto in = stack_inputs({&a, &b}, net);
    ASSERT_EQ(in.size(), 2u);
    EXPECT_EQ(in[0].shape(), (Shape{2, 1, 16, 16}));
    EXPECT_TRUE(std::equal(a.p3.data().begin(), a.p3.data().end(), in[0].data().begin()));
    EXPECT_TRUE(std::equal(b.p1.data().begin(), b.p1.data().end(), in[1].data().begin() + 256));
    const Tensor y = stack_targets({&a, &b});
    EXPECT_TRUE(std::equal(b.y.data().begin(), b.y.data().end(), y.data().begin() + 256));
    EXPECT_THROW(stack_inputs({}, net), ContractError);
}

TEST(Train, RunDirectoryAndDeterminism)
{
    TempDir dir("train");
    const auto m = build_dataset(dir / "data", 10, 32, 4);
    const TrainConfig cfg = tiny_config();
    const auto r1 = train(cfg, m, dir / "run1");
    const auto r2 = train(cfg, m, dir / "run2");

    const std::size_t n_train = m.entries(Split::train).size();
    const std::size_t per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    EXPECT_EQ(r1.log.size(), cfg.epochs * per_epoch);
    const std::string csv = slurp(dir / "run1" / "losses.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(1 + cfg.epochs * per_epoch));
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,epoch,L_G_adv,L1,L_D,L_Rec,L_P,total");
    EXPECT_EQ(csv, slurp(dir / "run2" / "losses.csv"));
    EXPECT_EQ(r1.generator, r2.generator);

    EXPECT_EQ(config_from_json(slurp(dir / "run1" / "config.json")).net.base_width, 8u);
    EXPECT_TRUE(fs::exists(dir / "run1" / "metrics.csv"));
    EXPECT_TRUE(fs::exists(dir / "run1" / "ckpt_epoch_2" / "manifest.json"));
    EXPECT_FALSE(fs::exists(dir / "run1" / "ckpt_epoch_1"));
    ASSERT_TRUE(r1.test_metrics);
    EXPECT_EQ(r1.test_metrics->rows.size(), m.entries(Split::test).size());

    const auto ck = checkpoint_load(dir / "run1" / "ckpt_epoch_2");
    EXPECT_EQ(ck.generator, r1.generator);
    EXPECT_EQ(ck.epoch, 2u);
}

TEST(Train, DifferentSeedDiffers)
{
    TempDir dir("train_seed");
    const auto m = build_dataset(dir / "data", 6, 32, 4);
    TrainConfig cfg = tiny_config();
    cfg.epochs = 1;
    cfg.checkpoint_policy = CheckpointPolicy::none;
    train(cfg, m, dir / "a");
    cfg.seed = 1;
    train(cfg, m, dir / "b");
    EXPECT_NE(slurp(dir / "a" / "losses.csv"), slurp(dir / "b" / "losses.csv"));
    EXPECT_FALSE(fs::exists(dir / "a" / "ckpt_epoch_1"));
}

TEST(Train, EmptyTrainSplitIsConfigError)
{
    DatasetManifest m;
    m.image_size = 32;
    EXPECT_THROW(train(tiny_config(), m, "/nonexistent/never"), ConfigError);
}

TEST(Ablation, TableShape)
{
    TempDir dir("ablate");
    const auto m = build_dataset(dir / "data", 5, 32, 9);
    TrainConfig cfg = tiny_config();
    cfg.epochs = 1;
    cfg.checkpoint_policy = CheckpointPolicy::none;
    const auto rows = run_ablation(cfg, m, {0, 1}, dir / "out");
    ASSERT_EQ(rows.size(), 8u);
    const std::string csv = slurp(dir / "out" / "ablation.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "variant,seed,ssim,psnr_db,nmse,lp");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);
    std::set<std::string> labels;
    for (const auto& r : rows)
        labels.insert(r.label);
    EXPECT_EQ(labels, (std::set<std::string>{"mp", "mpf", "mpfa", "full"}));
    EXPECT_TRUE(fs::exists(dir / "out" / "mpf_seed1" / "losses.csv"));
    EXPECT_THROW(run_ablation(cfg, m, {}, dir / "none"), ConfigError);
}

TEST(Ablation, InputStudyShape)
{
    TempDir dir("inputs");
    const auto m = build_dataset(dir / "data", 5, 32, 9);
    TrainConfig cfg = tiny_config();
    cfg.epochs = 1;
    cfg.checkpoint_policy = CheckpointPolicy::none;
    const auto rows = run_input_study(cfg, m, {3}, dir / "out");
    ASSERT_EQ(rows.size(), 3u);
    const std::string csv = slurp(dir / "out" / "inputs.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "n_inputs,seed,ssim,psnr_db,nmse,lp");
    EXPECT_EQ(rows[0].label, "1");
    EXPECT_EQ(rows[2].label, "3");
}
