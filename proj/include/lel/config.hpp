#pragma once

// Flat "key = value" run configuration with '#' comments. Unknown keys are
// rejected; echo() writes every effective value back out.

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "training.hpp"

namespace lel {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline KeyValues parse_key_values(std::istream& is, const std::string& source = "config")
{
    KeyValues out;
    std::string line;
    int n = 0;
    while (std::getline(is, line)) {
        ++n;
        if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError(source + ":" + std::to_string(n) + ": expected 'key = value'");
        auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.empty()) throw FormatError(source + ":" + std::to_string(n) + ": empty key");
        out.emplace_back(std::move(key), std::move(value));
    }
    return out;
}

inline KeyValues read_key_values(const std::string& path)
{
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config '" + path + "'");
    return parse_key_values(is, path);
}

namespace detail {

inline double to_double(const std::string& k, const std::string& v)
{
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw FormatError("config key '" + k + "': '" + v + "' is not a number");
    }
}

inline long long to_int(const std::string& k, const std::string& v)
{
    try {
        std::size_t pos = 0;
        const long long d = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw FormatError("config key '" + k + "': '" + v + "' is not an integer");
    }
}

inline std::size_t to_size(const std::string& k, const std::string& v)
{
    const auto x = to_int(k, v);
    if (x < 0) throw FormatError("config key '" + k + "' must be non-negative");
    return static_cast<std::size_t>(x);
}

inline bool to_bool(const std::string& k, const std::string& v)
{
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw FormatError("config key '" + k + "': expected true/false, got '" + v + "'");
}

/// Shortest text that parses back to the same double.
inline std::string num(double v)
{
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

} // namespace detail

enum class FloatMode { f32, f64 };

inline const char* float_mode_name(FloatMode m) { return m == FloatMode::f64 ? "f64" : "f32"; }

inline FloatMode parse_float_mode(const std::string& s)
{
    if (s == "f32") return FloatMode::f32;
    if (s == "f64") return FloatMode::f64;
    throw FormatError("float mode must be f32 or f64, got '" + s + "'");
}

/// Every setting a subcommand can read.
struct RunConfig {
    std::string dataset;
    std::string out = "out";
    std::string checkpoint;
    FloatMode float_mode = FloatMode::f32;
    std::uint64_t seed = 1;

    SynthSpec synth;
    TrainConfig train;
    SplitRatios split;

    std::size_t probe_pairs = 1000;
    std::size_t probe_batch = 50;
    bool grad_checks = true;

    std::size_t window = 0;  ///< 0: the checkpoint's window length
    std::size_t stride = 0;  ///< 0: window (non-overlapping, causal)
    std::size_t record = 0;  ///< index into the dataset for stream mode
    double connectivity_blend = 0.5;  ///< weight of attention vs. correlation

    struct Key {
        std::string name;
        std::function<void(RunConfig&, const std::string&)> set;
        std::function<std::string(const RunConfig&)> get;
    };

    static const std::vector<Key>& keys()
    {
        using namespace detail;
        using C = RunConfig;
        using S = std::string;
        static const std::vector<Key> k = {
            {"dataset", [](C& c, const S& v) { c.dataset = v; }, [](const C& c) { return c.dataset; }},
            {"out", [](C& c, const S& v) { c.out = v; }, [](const C& c) { return c.out; }},
            {"checkpoint", [](C& c, const S& v) { c.checkpoint = v; }, [](const C& c) { return c.checkpoint; }},
            {"float_mode", [](C& c, const S& v) { c.float_mode = parse_float_mode(v); },
             [](const C& c) { return S(float_mode_name(c.float_mode)); }},
            {"seed", [](C& c, const S& v) { c.set_seed(static_cast<std::uint64_t>(to_size("seed", v))); },
             [](const C& c) { return std::to_string(c.seed); }},
            // synthetic data
            {"classes", [](C& c, const S& v) { c.synth.classes = static_cast<int>(to_int("classes", v)); },
             [](const C& c) { return std::to_string(c.synth.classes); }},
            {"channels", [](C& c, const S& v) { c.synth.channels = to_size("channels", v); },
             [](const C& c) { return std::to_string(c.synth.channels); }},
            {"samples", [](C& c, const S& v) { c.synth.samples = to_size("samples", v); },
             [](const C& c) { return std::to_string(c.synth.samples); }},
            {"sampling_rate", [](C& c, const S& v) { c.synth.sampling_rate = to_double("sampling_rate", v); },
             [](const C& c) { return num(c.synth.sampling_rate); }},
            {"boost_db", [](C& c, const S& v) { c.synth.boost_db = to_double("boost_db", v); },
             [](const C& c) { return num(c.synth.boost_db); }},
            {"noise_exponent", [](C& c, const S& v) { c.synth.noise_exponent = to_double("noise_exponent", v); },
             [](const C& c) { return num(c.synth.noise_exponent); }},
            {"trials_per_class", [](C& c, const S& v) { c.synth.trials_per_class = to_size("trials_per_class", v); },
             [](const C& c) { return std::to_string(c.synth.trials_per_class); }},
            {"subjects", [](C& c, const S& v) { c.synth.subjects = to_size("subjects", v); },
             [](const C& c) { return std::to_string(c.synth.subjects); }},
            // training
            {"learning_rate", [](C& c, const S& v) { c.train.learning_rate = to_double("learning_rate", v); },
             [](const C& c) { return num(c.train.learning_rate); }},
            {"dropout", [](C& c, const S& v) { c.train.dropout = to_double("dropout", v); },
             [](const C& c) { return num(c.train.dropout); }},
            {"epochs", [](C& c, const S& v) { c.train.epochs = static_cast<int>(to_int("epochs", v)); },
             [](const C& c) { return std::to_string(c.train.epochs); }},
            {"batch_size", [](C& c, const S& v) { c.train.batch_size = to_size("batch_size", v); },
             [](const C& c) { return std::to_string(c.train.batch_size); }},
            {"L_s", [](C& c, const S& v) { c.train.budget.L_s = to_double("L_s", v); },
             [](const C& c) { return num(c.train.budget.L_s); }},
            {"L_att", [](C& c, const S& v) { c.train.budget.L_att = to_double("L_att", v); },
             [](const C& c) { return num(c.train.budget.L_att); }},
            {"L_affine", [](C& c, const S& v) { c.train.budget.L_affine = to_double("L_affine", v); },
             [](const C& c) { return num(c.train.budget.L_affine); }},
            {"L_linear", [](C& c, const S& v) { c.train.budget.L_linear = to_double("L_linear", v); },
             [](const C& c) { return num(c.train.budget.L_linear); }},
            {"aux_weight", [](C& c, const S& v) { c.train.aux_weight = to_double("aux_weight", v); },
             [](const C& c) { return num(c.train.aux_weight); }},
            {"adam_beta1", [](C& c, const S& v) { c.train.beta1 = to_double("adam_beta1", v); },
             [](const C& c) { return num(c.train.beta1); }},
            {"adam_beta2", [](C& c, const S& v) { c.train.beta2 = to_double("adam_beta2", v); },
             [](const C& c) { return num(c.train.beta2); }},
            {"adam_eps", [](C& c, const S& v) { c.train.adam_eps = to_double("adam_eps", v); },
             [](const C& c) { return num(c.train.adam_eps); }},
            {"embed_dim", [](C& c, const S& v) { c.train.model.embed_dim = to_size("embed_dim", v); },
             [](const C& c) { return std::to_string(c.train.model.embed_dim); }},
            {"heads", [](C& c, const S& v) { c.train.model.heads = to_size("heads", v); },
             [](const C& c) { return std::to_string(c.train.model.heads); }},
            {"mlp_hidden", [](C& c, const S& v) { c.train.model.mlp_hidden = to_size("mlp_hidden", v); },
             [](const C& c) { return std::to_string(c.train.model.mlp_hidden); }},
            {"tokens", [](C& c, const S& v) { c.train.model.tokens = to_size("tokens", v); },
             [](const C& c) { return std::to_string(c.train.model.tokens); }},
            {"log_floor", [](C& c, const S& v) { c.train.model.log_floor = to_double("log_floor", v); },
             [](const C& c) { return num(c.train.model.log_floor); }},
            {"lgcn_stats", [](C& c, const S& v) { c.train.model.lgcn_stats = parse_lgcn_stats(v); },
             [](const C& c) { return S(lgcn_stats_name(c.train.model.lgcn_stats)); }},
            {"constrain_qkv", [](C& c, const S& v) { c.train.model.constrain_qkv = to_bool("constrain_qkv", v); },
             [](const C& c) { return S(c.train.model.constrain_qkv ? "true" : "false"); }},
            {"split_train", [](C& c, const S& v) { c.split.train = to_double("split_train", v); },
             [](const C& c) { return num(c.split.train); }},
            {"split_val", [](C& c, const S& v) { c.split.val = to_double("split_val", v); },
             [](const C& c) { return num(c.split.val); }},
            {"split_test", [](C& c, const S& v) { c.split.test = to_double("split_test", v); },
             [](const C& c) { return num(c.split.test); }},
            // verification
            {"probe_pairs", [](C& c, const S& v) { c.probe_pairs = to_size("probe_pairs", v); },
             [](const C& c) { return std::to_string(c.probe_pairs); }},
            {"probe_batch", [](C& c, const S& v) { c.probe_batch = to_size("probe_batch", v); },
             [](const C& c) { return std::to_string(c.probe_batch); }},
            {"grad_checks", [](C& c, const S& v) { c.grad_checks = to_bool("grad_checks", v); },
             [](const C& c) { return S(c.grad_checks ? "true" : "false"); }},
            // stream / export
            {"window", [](C& c, const S& v) { c.window = to_size("window", v); },
             [](const C& c) { return std::to_string(c.window); }},
            {"stride", [](C& c, const S& v) { c.stride = to_size("stride", v); },
             [](const C& c) { return std::to_string(c.stride); }},
            {"record", [](C& c, const S& v) { c.record = to_size("record", v); },
             [](const C& c) { return std::to_string(c.record); }},
            {"connectivity_blend", [](C& c, const S& v) { c.connectivity_blend = to_double("connectivity_blend", v); },
             [](const C& c) { return num(c.connectivity_blend); }},
        };
        return k;
    }

    void set_seed(std::uint64_t s)
    {
        seed = s;
        synth.seed = s;
        train.seed = s;
    }

    void set(const std::string& key, const std::string& value)
    {
        for (const auto& k : keys())
            if (k.name == key) return k.set(*this, value);
        throw FormatError("unknown config key '" + key + "'");
    }

    void apply(const KeyValues& kv)
    {
        for (const auto& [k, v] : kv) set(k, v);
    }

    std::string get(const std::string& key) const
    {
        for (const auto& k : keys())
            if (k.name == key) return k.get(*this);
        throw FormatError("unknown config key '" + key + "'");
    }

    /// Every key with its effective value; parsing it back reproduces *this.
    std::string echo() const
    {
        std::ostringstream os;
        for (const auto& k : keys()) os << k.name << " = " << k.get(*this) << "\n";
        return os.str();
    }

    void validate() const
    {
        if (!(connectivity_blend >= 0.0 && connectivity_blend <= 1.0))
            throw ParameterError("connectivity_blend must be in [0, 1]");
        if (probe_batch == 0) throw ParameterError("probe_batch must be positive");
        const double s = split.train + split.val + split.test;
        if (!(split.train > 0 && split.val >= 0 && split.test >= 0) || std::abs(s - 1.0) > 1e-9)
            throw ParameterError("split ratios must be non-negative and sum to 1");
        train.validate();
    }
};

// ------------------------------------------------------------------ model config

inline std::string model_config_text(const ModelConfig& m)
{
    using detail::num;
    std::ostringstream os;
    os << "channels = " << m.channels << "\n"
       << "samples = " << m.samples << "\n"
       << "classes = " << m.classes << "\n"
       << "sampling_rate = " << num(m.sampling_rate) << "\n"
       << "L_s = " << num(m.budget.L_s) << "\n"
       << "L_att = " << num(m.budget.L_att) << "\n"
       << "L_affine = " << num(m.budget.L_affine) << "\n"
       << "L_linear = " << num(m.budget.L_linear) << "\n"
       << "embed_dim = " << m.embed_dim << "\n"
       << "heads = " << m.heads << "\n"
       << "mlp_hidden = " << m.mlp_hidden << "\n"
       << "tokens = " << m.tokens << "\n"
       << "dropout = " << num(m.dropout) << "\n"
       << "log_floor = " << num(m.log_floor) << "\n"
       << "lgcn_stats = " << lgcn_stats_name(m.lgcn_stats) << "\n"
       << "constrain_qkv = " << (m.constrain_qkv ? "true" : "false") << "\n"
       << "seed = " << m.seed << "\n";
    return os.str();
}

inline ModelConfig parse_model_config(const KeyValues& kv)
{
    using namespace detail;
    ModelConfig m;
    std::map<std::string, std::function<void(const std::string&)>> setters = {
        {"channels", [&](const std::string& v) { m.channels = to_size("channels", v); }},
        {"samples", [&](const std::string& v) { m.samples = to_size("samples", v); }},
        {"classes", [&](const std::string& v) { m.classes = static_cast<int>(to_int("classes", v)); }},
        {"sampling_rate", [&](const std::string& v) { m.sampling_rate = to_double("sampling_rate", v); }},
        {"L_s", [&](const std::string& v) { m.budget.L_s = to_double("L_s", v); }},
        {"L_att", [&](const std::string& v) { m.budget.L_att = to_double("L_att", v); }},
        {"L_affine", [&](const std::string& v) { m.budget.L_affine = to_double("L_affine", v); }},
        {"L_linear", [&](const std::string& v) { m.budget.L_linear = to_double("L_linear", v); }},
        {"embed_dim", [&](const std::string& v) { m.embed_dim = to_size("embed_dim", v); }},
        {"heads", [&](const std::string& v) { m.heads = to_size("heads", v); }},
        {"mlp_hidden", [&](const std::string& v) { m.mlp_hidden = to_size("mlp_hidden", v); }},
        {"tokens", [&](const std::string& v) { m.tokens = to_size("tokens", v); }},
        {"dropout", [&](const std::string& v) { m.dropout = to_double("dropout", v); }},
        {"log_floor", [&](const std::string& v) { m.log_floor = to_double("log_floor", v); }},
        {"lgcn_stats", [&](const std::string& v) { m.lgcn_stats = parse_lgcn_stats(v); }},
        {"constrain_qkv", [&](const std::string& v) { m.constrain_qkv = to_bool("constrain_qkv", v); }},
        {"seed", [&](const std::string& v) { m.seed = static_cast<std::uint64_t>(to_size("seed", v)); }},
    };
    for (const auto& [k, v] : kv) {
        auto it = setters.find(k);
        if (it == setters.end()) throw FormatError("model config: unknown key '" + k + "'");
        it->second(v);
    }
    m.validate();
    return m;
}

} // namespace lel
