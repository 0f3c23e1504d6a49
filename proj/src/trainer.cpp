#include "mpsynth/trainer.hpp"

#include "mpsynth/rng.hpp"
#include "mpsynth/tensor_io.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace mpsynth {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

std::string to_string(CheckpointPolicy p)
{
    switch (p) {
    case CheckpointPolicy::every_epoch: return "every_epoch";
    case CheckpointPolicy::final_only: return "final";
    case CheckpointPolicy::none: return "none";
    }
    return "?";
}

CheckpointPolicy parse_checkpoint_policy(const std::string& text)
{
    for (auto p : {CheckpointPolicy::every_epoch, CheckpointPolicy::final_only, CheckpointPolicy::none})
        if (to_string(p) == text)
            return p;
    throw ConfigError("unknown checkpoint_policy '" + text + "' (expected every_epoch, final or none)");
}

void TrainConfig::validate() const
{
    if (epochs < 1)
        throw ConfigError("epochs must be >= 1");
    if (batch_size < 1)
        throw ConfigError("batch_size must be >= 1");
    auto positive = [](double v, const char* name) {
        if (!(v > 0) || !std::isfinite(v))
            throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
    };
    positive(lr, "lr");
    positive(lr_decay, "lr_decay");
    positive(adam_eps, "adam_eps");
    if (lr_decay_every < 1)
        throw ConfigError("lr_decay_every must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1))
        throw ConfigError("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1))
        throw ConfigError("beta2 must lie in [0, 1)");
    weights.validate();
    net.validate();
}

std::string config_to_json(const TrainConfig& cfg)
{
    json j;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["lr"] = cfg.lr;
    j["lr_decay"] = cfg.lr_decay;
    j["lr_decay_every"] = cfg.lr_decay_every;
    j["beta1"] = cfg.beta1;
    j["beta2"] = cfg.beta2;
    j["adam_eps"] = cfg.adam_eps;
    j["seed"] = cfg.seed;
    j["lambda1"] = cfg.weights.lambda1;
    j["lambda2"] = cfg.weights.lambda2;
    j["lambda3"] = cfg.weights.lambda3;
    j["alpha"] = cfg.weights.alpha;
    j["gan_mode"] = to_string(cfg.gan_mode);
    j["variant"] = to_string(cfg.net.variant);
    j["n_params"] = cfg.net.n_params();
    j["param_order"] = cfg.net.param_order;
    j["base_width"] = cfg.net.base_width;
    j["attention_ratio"] = cfg.net.attention_ratio;
    j["checkpoint_policy"] = to_string(cfg.checkpoint_policy);
    return j.dump(2) + "\n";
}

namespace {

std::size_t get_count(const json& v, const std::string& key)
{
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ConfigError("config key '" + key + "' must be a nonnegative integer");
    return v.get<std::size_t>();
}

double get_real(const json& v, const std::string& key)
{
    if (!v.is_number())
        throw ConfigError("config key '" + key + "' must be a number");
    return v.get<double>();
}

std::string get_text(const json& v, const std::string& key)
{
    if (!v.is_string())
        throw ConfigError("config key '" + key + "' must be a string");
    return v.get<std::string>();
}

TrainConfig config_from_object(const json& j)
{
    if (!j.is_object())
        throw ConfigError("config must be a JSON object");
    TrainConfig cfg;
    std::optional<std::size_t> n_params;
    bool have_order = false;
    for (const auto& [key, v] : j.items()) {
        if (key == "epochs")
            cfg.epochs = get_count(v, key);
        else if (key == "batch_size")
            cfg.batch_size = get_count(v, key);
        else if (key == "lr")
            cfg.lr = get_real(v, key);
        else if (key == "lr_decay")
            cfg.lr_decay = get_real(v, key);
        else if (key == "lr_decay_every")
            cfg.lr_decay_every = get_count(v, key);
        else if (key == "beta1")
            cfg.beta1 = get_real(v, key);
        else if (key == "beta2")
            cfg.beta2 = get_real(v, key);
        else if (key == "adam_eps")
            cfg.adam_eps = get_real(v, key);
        else if (key == "seed")
            cfg.seed = get_count(v, key);
        else if (key == "lambda1")
            cfg.weights.lambda1 = get_real(v, key);
        else if (key == "lambda2")
            cfg.weights.lambda2 = get_real(v, key);
        else if (key == "lambda3")
            cfg.weights.lambda3 = get_real(v, key);
        else if (key == "alpha") {
            if (!v.is_array() || v.size() != cfg.weights.alpha.size())
                throw ConfigError("config key 'alpha' must be an array of 5 numbers");
            for (std::size_t i = 0; i < v.size(); ++i)
                cfg.weights.alpha[i] = get_real(v[i], "alpha");
        } else if (key == "gan_mode")
            cfg.gan_mode = parse_gan_mode(get_text(v, key));
        else if (key == "variant")
            cfg.net.variant = parse_variant(get_text(v, key));
        else if (key == "n_params")
            n_params = get_count(v, key);
        else if (key == "param_order") {
            if (!v.is_array())
                throw ConfigError("config key 'param_order' must be an array of strings");
            cfg.net.param_order.clear();
            for (const auto& e : v)
                cfg.net.param_order.push_back(get_text(e, key));
            have_order = true;
        } else if (key == "base_width")
            cfg.net.base_width = get_count(v, key);
        else if (key == "attention_ratio")
            cfg.net.attention_ratio = get_count(v, key);
        else if (key == "checkpoint_policy")
            cfg.checkpoint_policy = parse_checkpoint_policy(get_text(v, key));
        else
            throw ConfigError("unknown config key '" + key + "'");
    }
    if (n_params) {
        if (have_order && *n_params != cfg.net.param_order.size())
            throw ConfigError("n_params " + std::to_string(*n_params) + " disagrees with param_order of length " +
                              std::to_string(cfg.net.param_order.size()));
        if (!have_order) {
            if (*n_params < 1 || *n_params > kParamNames.size())
                throw ConfigError("n_params must be 1, 2 or 3");
            cfg.net.param_order.assign(kParamNames.begin(), kParamNames.begin() + static_cast<std::ptrdiff_t>(*n_params));
        }
    }
    cfg.validate();
    return cfg;
}

} // namespace

TrainConfig config_from_json(const std::string& text)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_object(j);
}

TrainConfig load_config(const fs::path& path)
{
    const auto bytes = read_file(path);
    return config_from_json(std::string(bytes.begin(), bytes.end()));
}

double lr_schedule(std::size_t epoch, double initial, double decay, std::size_t every)
{
    if (every == 0)
        throw ConfigError("lr decay interval must be >= 1");
    return initial * std::pow(decay, static_cast<double>(epoch / every));
}

template <typename T>
void adam_step(ParamStore<T>& params, const std::map<std::string, BasicTensor<T>>& grads, AdamState<T>& state,
               double lr, const AdamConfig& cfg)
{
    for (const auto& [name, p] : params) {
        const auto it = grads.find(name);
        if (it == grads.end())
            throw ContractError("adam_step: no gradient for parameter '" + name + "'");
        if (it->second.shape() != p.shape())
            throw ContractError("adam_step: gradient for '" + name + "' has shape " + shape_string(it->second.shape()) +
                                ", parameter has " + shape_string(p.shape()));
    }
    ++state.t;
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& [name, p] : params) {
        const BasicTensor<T>& g = grads.at(name);
        auto& m = state.m.try_emplace(name, p.shape()).first->second;
        auto& v = state.v.try_emplace(name, p.shape()).first->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            p[i] = static_cast<T>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
        }
    }
}

template void adam_step(ParamStore<float>&, const std::map<std::string, Tensor>&, AdamState<float>&, double,
                        const AdamConfig&);
template void adam_step(ParamStore<double>&, const std::map<std::string, BasicTensor<double>>&, AdamState<double>&,
                        double, const AdamConfig&);

namespace {

struct TensorSlot {
    std::string group;
    std::string name;
    const Tensor* tensor;
};

std::vector<TensorSlot> checkpoint_slots(const ModelCheckpoint& c)
{
    std::vector<TensorSlot> out;
    auto add_store = [&](const std::string& group, const ParamStore<float>& s) {
        for (const auto& [name, t] : s)
            out.push_back({group, name, &t});
    };
    auto add_map = [&](const std::string& group, const std::map<std::string, Tensor>& m) {
        for (const auto& [name, t] : m)
            out.push_back({group, name, &t});
    };
    add_store("generator", c.generator);
    add_store("discriminator", c.discriminator);
    add_map("generator.m", c.generator_opt.m);
    add_map("generator.v", c.generator_opt.v);
    add_map("discriminator.m", c.discriminator_opt.m);
    add_map("discriminator.v", c.discriminator_opt.v);
    return out;
}

std::string slot_file(const std::string& group, const std::string& name)
{
    return "tensors/" + group + "/" + name + ".mpt";
}

} // namespace

void checkpoint_save(const fs::path& dir, const ModelCheckpoint& ckpt)
{
    std::error_code ec;
    fs::create_directories(dir / "tensors", ec);
    if (ec)
        throw IoError("cannot create checkpoint directory '" + dir.string() + "': " + ec.message());
    json j;
    j["format"] = "mpsynth-checkpoint";
    j["version"] = 1;
    j["config"] = json::parse(config_to_json(ckpt.config));
    j["epoch"] = ckpt.epoch;
    j["rng_state"] = ckpt.rng_state;
    j["optimizer"] = {{"generator", {{"t", ckpt.generator_opt.t}}}, {"discriminator", {{"t", ckpt.discriminator_opt.t}}}};
    json tensors = json::array();
    for (const auto& slot : checkpoint_slots(ckpt)) {
        const std::string file = slot_file(slot.group, slot.name);
        fs::create_directories((dir / file).parent_path(), ec);
        write_tensor(dir / file, *slot.tensor);
        tensors.push_back({{"group", slot.group}, {"name", slot.name}, {"shape", slot.tensor->shape()}, {"file", file}});
    }
    j["tensors"] = std::move(tensors);
    write_text(dir / "manifest.json", j.dump(2) + "\n");
}

ModelCheckpoint checkpoint_load(const fs::path& dir, std::optional<Variant> expected)
{
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path))
        throw CheckpointError("checkpoint '" + dir.string() + "' has no manifest.json");
    json j;
    try {
        const auto bytes = read_file(manifest_path);
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw CheckpointError("checkpoint manifest '" + manifest_path.string() + "' is not valid JSON: " + e.what());
    }
    ModelCheckpoint c;
    try {
        if (j.at("format").get<std::string>() != "mpsynth-checkpoint")
            throw CheckpointError("'" + manifest_path.string() + "' is not a checkpoint manifest");
        if (j.at("version").get<int>() != 1)
            throw CheckpointError("unsupported checkpoint version " + j.at("version").dump());
        c.config = config_from_object(j.at("config"));
        if (expected && *expected != c.config.net.variant)
            throw CheckpointError("checkpoint variant kind '" + to_string(c.config.net.variant) +
                                  "' does not match requested kind '" + to_string(*expected) + "'");
        c.epoch = j.at("epoch").get<std::size_t>();
        c.rng_state = j.at("rng_state").get<std::string>();
        c.generator_opt.t = j.at("optimizer").at("generator").at("t").get<std::uint64_t>();
        c.discriminator_opt.t = j.at("optimizer").at("discriminator").at("t").get<std::uint64_t>();
        for (const auto& e : j.at("tensors")) {
            const std::string group = e.at("group").get<std::string>();
            const std::string name = e.at("name").get<std::string>();
            const Shape shape = e.at("shape").get<Shape>();
            const std::string file = e.at("file").get<std::string>();
            const std::string label = group + "/" + name;
            if (!fs::exists(dir / file))
                throw CheckpointError("checkpoint tensor '" + label + "' is missing (" + (dir / file).string() + ")");
            Tensor t;
            try {
                t = read_tensor(dir / file);
            } catch (const Error& err) {
                throw CheckpointError("checkpoint tensor '" + label + "' is unreadable: " + err.what());
            }
            if (t.shape() != shape)
                throw CheckpointError("checkpoint tensor '" + label + "' has shape " + shape_string(t.shape()) +
                                      ", manifest says " + shape_string(shape));
            if (group == "generator")
                c.generator.set(name, std::move(t));
            else if (group == "discriminator")
                c.discriminator.set(name, std::move(t));
            else if (group == "generator.m")
                c.generator_opt.m[name] = std::move(t);
            else if (group == "generator.v")
                c.generator_opt.v[name] = std::move(t);
            else if (group == "discriminator.m")
                c.discriminator_opt.m[name] = std::move(t);
            else if (group == "discriminator.v")
                c.discriminator_opt.v[name] = std::move(t);
            else
                throw CheckpointError("checkpoint tensor '" + label + "' has unknown group");
        }
    } catch (const json::exception& e) {
        throw CheckpointError("checkpoint manifest '" + manifest_path.string() + "' is malformed: " + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError("checkpoint config is invalid: " + std::string(e.what()));
    }
    const auto expected_names = init_generator(c.config.net, 16, 0).names();
    if (c.generator.names() != expected_names)
        throw CheckpointError("checkpoint generator tensors do not match a '" + to_string(c.config.net.variant) +
                              "' generator with " + std::to_string(c.config.net.n_params()) + " inputs");
    return c;
}

std::vector<Tensor> stack_inputs(const std::vector<const CaseRecord*>& cases, const NetConfig& net)
{
    if (cases.empty())
        throw ContractError("stack_inputs: no cases");
    std::vector<Tensor> out;
    for (const auto& pname : net.param_order) {
        const Tensor& first = cases.front()->input(pname);
        const std::size_t plane = first.size();
        Tensor t({cases.size(), 1, first.dim(first.rank() - 2), first.dim(first.rank() - 1)});
        for (std::size_t n = 0; n < cases.size(); ++n) {
            const Tensor& src = cases[n]->input(pname);
            if (src.shape() != first.shape())
                throw ContractError("stack_inputs: case '" + cases[n]->id + "' has shape " + shape_string(src.shape()));
            std::memcpy(t.raw() + n * plane, src.raw(), plane * sizeof(float));
        }
        out.push_back(std::move(t));
    }
    return out;
}

Tensor stack_targets(const std::vector<const CaseRecord*>& cases)
{
    if (cases.empty())
        throw ContractError("stack_targets: no cases");
    const Tensor& first = cases.front()->y;
    const std::size_t plane = first.size();
    Tensor t({cases.size(), 1, first.dim(first.rank() - 2), first.dim(first.rank() - 1)});
    for (std::size_t n = 0; n < cases.size(); ++n) {
        if (cases[n]->y.shape() != first.shape())
            throw ContractError("stack_targets: case '" + cases[n]->id + "' has shape " +
                                shape_string(cases[n]->y.shape()));
        std::memcpy(t.raw() + n * plane, cases[n]->y.raw(), plane * sizeof(float));
    }
    return t;
}

std::vector<Tensor> synthesize(const ParamStore<float>& generator, const NetConfig& net,
                               const std::vector<CaseRecord>& cases, std::size_t batch)
{
    ParamStore<float> weights = generator;
    std::vector<Tensor> out;
    for (std::size_t start = 0; start < cases.size(); start += batch) {
        std::vector<const CaseRecord*> chunk;
        for (std::size_t i = start; i < std::min(cases.size(), start + batch); ++i)
            chunk.push_back(&cases[i]);
        Graph<float> g;
        g.disable_grad();
        g.bind(weights, false);
        std::vector<Var<float>> in;
        for (auto& t : stack_inputs(chunk, net))
            in.push_back(g.input(std::move(t)));
        const Tensor& y = generator_forward(g, in, net).synthesis.value();
        const std::size_t h = y.dim(2), w = y.dim(3), plane = h * w;
        for (std::size_t n = 0; n < chunk.size(); ++n) {
            Tensor img({1, h, w});
            std::memcpy(img.raw(), y.raw() + n * plane, plane * sizeof(float));
            out.push_back(std::move(img));
        }
    }
    return out;
}

MetricsReport evaluate_model(const ParamStore<float>& generator, const NetConfig& net,
                             const std::vector<CaseRecord>& cases, PerceptualNet& perceptual)
{
    const auto synth = synthesize(generator, net, cases);
    std::vector<EvalPair> pairs;
    for (std::size_t i = 0; i < cases.size(); ++i)
        pairs.push_back({cases[i].id, cases[i].y, synth[i]});
    return evaluate_pairs(pairs, perceptual);
}

std::vector<CaseRecord> load_split(const DatasetManifest& manifest, Split split)
{
    std::vector<CaseRecord> out;
    for (const ManifestEntry* e : manifest.entries(split))
        out.push_back(load_case(manifest, *e));
    return out;
}

TrainState init_train_state(const TrainConfig& cfg, std::size_t image_size)
{
    TrainState s;
    s.generator = init_generator(cfg.net, image_size, cfg.seed);
    s.discriminator = init_discriminator(cfg.net, image_size, cfg.seed);
    return s;
}

LossBreakdown train_step(TrainState& state, const TrainConfig& cfg, PerceptualNet& perceptual,
                         const std::vector<Tensor>& inputs, const Tensor& target, double lr,
                         const std::function<void()>& after_discriminator)
{
    const AdamConfig adam{cfg.beta1, cfg.beta2, cfg.adam_eps};
    LossComponents c;

    Graph<float> gg;
    gg.bind(state.generator, true);
    gg.bind(state.discriminator, false);
    std::vector<Var<float>> in;
    for (const auto& t : inputs)
        in.push_back(gg.input(t));
    const Var<float> y = gg.input(target);
    const GeneratorOutput<float> out = generator_forward(gg, in, cfg.net);

    {
        Graph<float> gd;
        gd.bind(state.discriminator, true);
        std::vector<Var<float>> din;
        for (const auto& t : inputs)
            din.push_back(gd.input(t));
        const Var<float> fake_image = gd.input(out.synthesis.value());
        const Var<float> real = sigmoid(discriminator_forward(gd, din, gd.input(target), cfg.net));
        const Var<float> fake = sigmoid(discriminator_forward(gd, din, fake_image, cfg.net));
        const Var<float> ld = loss_discriminator(real, fake);
        c.l_d = ld.value()[0];
        adam_step(state.discriminator, gd.backward(ld), state.discriminator_opt, lr, adam);
    }
    if (after_discriminator)
        after_discriminator();

    const Var<float> fake_prob = sigmoid(discriminator_forward(gg, in, out.synthesis, cfg.net));
    const GeneratorLoss<float> lg = loss_generator(fake_prob, out.synthesis, y, cfg.weights.lambda1, cfg.gan_mode);
    Var<float> objective = lg.value;
    if (!out.reconstructions.empty()) {
        std::vector<std::pair<Var<float>, Var<float>>> pairs;
        for (std::size_t i = 0; i < in.size(); ++i)
            pairs.emplace_back(in[i], out.reconstructions[i]);
        const Var<float> lrec = loss_reconstruction(pairs);
        c.l_rec = lrec.value()[0];
        objective = objective + scale(lrec, cfg.weights.lambda2);
    }
    const PerceptualLoss<float> lp = loss_perceptual(gg, perceptual, y, out.synthesis, cfg.weights.alpha);
    objective = objective + scale(lp.value, cfg.weights.lambda3);
    c.g_adv = lg.adversarial.value()[0];
    c.l1 = lg.l1.value()[0];
    c.l_p = lp.value.value()[0];
    for (std::size_t j = 0; j < lp.layers.size(); ++j)
        c.lp_layers[j] = lp.layers[j].value()[0];
    adam_step(state.generator, gg.backward(objective), state.generator_opt, lr, adam);
    return loss_total(c, cfg.weights);
}

std::string losses_csv(const std::vector<StepLosses>& log)
{
    std::string out = "step,epoch,L_G_adv,L1,L_D,L_Rec,L_P,total\n";
    for (const auto& s : log) {
        const auto& l = s.losses;
        out += std::to_string(s.step) + "," + std::to_string(s.epoch) + "," + format_number(l.g_adv) + "," +
               format_number(l.l1) + "," + format_number(l.l_d) + "," + format_number(l.l_rec) + "," +
               format_number(l.l_p) + "," + format_number(l.total) + "\n";
    }
    return out;
}

TrainResult train(const TrainConfig& cfg, const DatasetManifest& manifest, const fs::path& out_dir, const LogFn& log)
{
    cfg.validate();
    const auto train_cases = load_split(manifest, Split::train);
    if (train_cases.empty())
        throw ConfigError("dataset '" + manifest.root.string() + "' has no train cases");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec)
        throw IoError("cannot create run directory '" + out_dir.string() + "': " + ec.message());
    write_text(out_dir / "config.json", config_to_json(cfg));

    TrainState state = init_train_state(cfg, manifest.image_size);
    PerceptualNet perceptual;
    Rng shuffle(derive_seed(cfg.seed, "shuffle"));
    TrainResult result;
    std::vector<std::size_t> order(train_cases.size());
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        const double lr = lr_schedule(epoch, cfg.lr, cfg.lr_decay, cfg.lr_decay_every);
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i)))]);
        double epoch_l1 = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<const CaseRecord*> batch;
            for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
                batch.push_back(&train_cases[order[i]]);
            const LossBreakdown b =
                train_step(state, cfg, perceptual, stack_inputs(batch, cfg.net), stack_targets(batch), lr);
            result.log.push_back({++step, epoch + 1, b});
            epoch_l1 += b.l1;
            ++batches;
        }
        write_text(out_dir / "losses.csv", losses_csv(result.log));
        const bool last = epoch + 1 == cfg.epochs;
        if (cfg.checkpoint_policy == CheckpointPolicy::every_epoch ||
            (cfg.checkpoint_policy == CheckpointPolicy::final_only && last)) {
            ModelCheckpoint ck{cfg, epoch + 1, shuffle.state(), state.generator, state.discriminator,
                               state.generator_opt, state.discriminator_opt};
            checkpoint_save(out_dir / ("ckpt_epoch_" + std::to_string(epoch + 1)), ck);
        }
        if (log) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
            std::ostringstream msg;
            msg << "epoch " << epoch + 1 << "/" << cfg.epochs << " lr " << lr << " mean L1 "
                << epoch_l1 / static_cast<double>(batches) << " (" << secs << " s)";
            log(msg.str());
        }
    }

    const auto test_cases = load_split(manifest, Split::test);
    if (!test_cases.empty()) {
        result.test_metrics = evaluate_model(state.generator, cfg.net, test_cases, perceptual);
        write_metrics_csv(out_dir / "metrics.csv", *result.test_metrics);
    }
    result.generator = std::move(state.generator);
    result.discriminator = std::move(state.discriminator);
    result.generator_opt = std::move(state.generator_opt);
    result.discriminator_opt = std::move(state.discriminator_opt);
    return result;
}

namespace {

std::string study_csv(const std::string& label_column, const std::vector<AblationRow>& rows)
{
    std::string out = label_column + ",seed,ssim,psnr_db,nmse,lp\n";
    for (const auto& r : rows)
        out += r.label + "," + std::to_string(r.seed) + "," + format_number(r.mean.ssim) + "," +
               (r.mean.psnr.infinite ? std::string("inf") : format_number(r.mean.psnr.db)) + "," +
               format_number(r.mean.nmse) + "," + format_number(r.mean.lp) + "\n";
    return out;
}

AblationRow run_one(const TrainConfig& cfg, const DatasetManifest& manifest, const fs::path& dir,
                    const std::string& label, const LogFn& log)
{
    if (log)
        log("training " + label + " seed " + std::to_string(cfg.seed) + " -> " + dir.string());
    const TrainResult r = train(cfg, manifest, dir, log);
    if (!r.test_metrics)
        throw ConfigError("dataset '" + manifest.root.string() + "' has no test cases to evaluate");
    return {label, cfg.seed, r.test_metrics->mean};
}

} // namespace

std::vector<AblationRow> run_ablation(const TrainConfig& base, const DatasetManifest& manifest,
                                      const std::vector<std::uint64_t>& seeds, const fs::path& out_dir,
                                      const LogFn& log)
{
    if (seeds.empty())
        throw ConfigError("ablation needs at least one seed");
    std::vector<AblationRow> rows;
    for (std::uint64_t seed : seeds)
        for (Variant v : {Variant::mp, Variant::mpf, Variant::mpfa, Variant::full}) {
            TrainConfig cfg = base;
            cfg.seed = seed;
            cfg.net.variant = v;
            const std::string label = to_string(v);
            rows.push_back(run_one(cfg, manifest, out_dir / (label + "_seed" + std::to_string(seed)), label, log));
            write_text(out_dir / "ablation.csv", study_csv("variant", rows));
        }
    return rows;
}

std::vector<AblationRow> run_input_study(const TrainConfig& base, const DatasetManifest& manifest,
                                         const std::vector<std::uint64_t>& seeds, const fs::path& out_dir,
                                         const LogFn& log)
{
    if (seeds.empty())
        throw ConfigError("input study needs at least one seed");
    std::vector<AblationRow> rows;
    for (std::uint64_t seed : seeds)
        for (std::size_t n = 1; n <= base.net.param_order.size(); ++n) {
            TrainConfig cfg = base;
            cfg.seed = seed;
            cfg.net.variant = Variant::full;
            cfg.net.param_order.resize(n);
            const std::string label = std::to_string(n);
            rows.push_back(
                run_one(cfg, manifest, out_dir / ("inputs" + label + "_seed" + std::to_string(seed)), label, log));
            write_text(out_dir / "inputs.csv", study_csv("n_inputs", rows));
        }
    return rows;
}

} // namespace mpsynth
