// lel: synthetic data, training, evaluation, verification, streaming and
// exports for the LEL ensemble.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "lel/checkpoint.hpp"
#include "lel/report.hpp"

namespace fs = std::filesystem;
using namespace lel;

namespace {

enum Exit : int {
    ok = 0,
    internal = 1,
    usage = 2,
    io_error = 3,
    shape_mismatch = 4,
    divergence = 5,
    verification_failed = 6,
    invalid_config = 7,
    numeric = 8,
};

const char* kExitCodes =
    "Exit codes:\n"
    "  0  success\n"
    "  1  internal error\n"
    "  2  usage error (bad flags, unknown export kind)\n"
    "  3  missing or unreadable/unwritable file\n"
    "  4  shape or contract mismatch (dataset vs. checkpoint, labels, split)\n"
    "  5  training diverged (non-finite loss)\n"
    "  6  verification failed (a bound or gradient check)\n"
    "  7  invalid config or file format\n"
    "  8  numeric failure (non-finite activations, power iteration)\n";

struct Cli {
    std::string config_file;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> float_mode;
    std::optional<int> epochs;
    std::optional<std::size_t> batch_size;
    std::optional<std::string> dataset;
    std::optional<std::string> checkpoint;
    std::vector<double> lip_K;
    bool grid = false;
    std::size_t grid_run = 0;
    std::string kind;
    std::optional<std::size_t> window, stride, record;
};

RunConfig resolve(const Cli& cli)
{
    RunConfig rc;
    if (!cli.config_file.empty()) rc.apply(read_key_values(cli.config_file));
    for (const auto& o : cli.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw FormatError("--set expects KEY=VALUE, got '" + o + "'");
        rc.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
    }
    if (cli.seed) rc.set_seed(*cli.seed);
    if (cli.out) rc.out = *cli.out;
    if (cli.float_mode) rc.float_mode = parse_float_mode(*cli.float_mode);
    if (cli.epochs) rc.train.epochs = *cli.epochs;
    if (cli.batch_size) rc.train.batch_size = *cli.batch_size;
    if (cli.dataset) rc.dataset = *cli.dataset;
    if (cli.checkpoint) rc.checkpoint = *cli.checkpoint;
    if (cli.window) rc.window = *cli.window;
    if (cli.stride) rc.stride = *cli.stride;
    if (cli.record) rc.record = *cli.record;
    rc.validate();
    return rc;
}

void prepare_out(const RunConfig& rc)
{
    std::error_code ec;
    fs::create_directories(rc.out, ec);
    if (ec) throw IoError("cannot create output directory '" + rc.out + "': " + ec.message());
    write_text(fs::path(rc.out) / "config.txt", rc.echo());
}

std::ofstream open_out(const fs::path& p)
{
    std::ofstream os(p);
    if (!os) throw IoError("cannot write '" + p.string() + "'");
    return os;
}

template <class F>
int with_float(FloatMode m, F&& f)
{
    return m == FloatMode::f64 ? f.template operator()<double>() : f.template operator()<float>();
}

/// The configured dataset, or a synthetic one from the config's spec.
TrialSet load_or_synth(const RunConfig& rc)
{
    if (!rc.dataset.empty()) {
        if (!fs::exists(rc.dataset)) throw IoError("dataset '" + rc.dataset + "' not found");
        return io::load_dataset(rc.dataset);
    }
    return synth_dataset(rc.synth);
}

SplitAssignment split_for(const RunConfig& rc, const TrialSet& set)
{
    if (!rc.checkpoint.empty() && has_split(rc.checkpoint)) return read_split(rc.checkpoint);
    return split_trials(set, rc.split, rc.seed);
}

std::string metrics_text(const Snapshot<double>& best, const Evaluation& test)
{
    std::ostringstream os;
    os.precision(10);
    os << "best_epoch = " << best.epoch << "\n"
       << "val_acc = " << best.val_acc << "\n"
       << "val_loss = " << best.val_loss << "\n"
       << "test_acc = " << test.fused.accuracy << "\n"
       << "test_macro_f1 = " << test.fused.macro_f1 << "\n";
    for (auto id : kBranches)
        os << "test_acc_" << branch_name(id) << " = " << test.branch[static_cast<std::size_t>(id)].accuracy << "\n";
    return os.str();
}

void write_eval(const fs::path& dir, const Evaluation& ev)
{
    auto m = open_out(dir / "metrics.jsonl");
    report::emit(m, report::metrics(ev.fused, "fused"));
    for (auto id : kBranches) report::emit(m, report::metrics(ev.branch[static_cast<std::size_t>(id)], branch_name(id)));
    auto r = open_out(dir / "roc.jsonl");
    report::emit(r, report::roc(ev.fused, "fused"));
}

// ------------------------------------------------------------------ commands

int cmd_synth(const RunConfig& rc)
{
    auto set = synth_dataset(rc.synth);
    prepare_out(rc);
    const auto path = fs::path(rc.out) / "dataset.leld";
    io::save_dataset(path.string(), set);
    const double acc = band_power_oracle_accuracy(set, rc.synth);
    std::cout << "wrote " << path.string() << " (" << set.size() << " windows, C=" << set.channels()
              << ", T=" << set.samples() << ", K=" << set.classes << ")\n"
              << "oracle_accuracy = " << acc << "\n";
    return ok;
}

template <class T>
Evaluation train_one(RunConfig rc, const TrialSet& set, const SplitAssignment& split, const fs::path& dir,
                     std::vector<std::pair<int, Evaluation>>* milestone_evals = nullptr)
{
    const auto idx = assign_windows(split, set);
    audit_no_leakage(idx, set);
    LelModel<T> model(make_model_config(rc.train, set));
    auto log = open_out(dir / "train_report.jsonl");
    auto res = train(model, set, idx, rc.train, [&](const EpochRecord& r) {
        report::emit(log, report::epoch(r));
        log.flush();
        std::cout << "epoch " << r.epoch << " loss " << r.train_loss << " val_acc " << r.val_acc << "\n";
    });
    auto test = evaluate(model, set, idx.test, rc.train.batch_size, rc.train.aux_weight);
    Snapshot<double> best{res.best.epoch, res.best.val_acc, res.best.val_loss, {}};
    save_checkpoint((dir / "checkpoint").string(), model, rc.echo(), metrics_text(best, test), &split);
    write_eval(dir, test);
    if (milestone_evals)
        for (auto& [epoch, snap] : res.milestones) {
            restore(model, snap.params);
            milestone_evals->emplace_back(epoch, evaluate(model, set, idx.test, rc.train.batch_size, rc.train.aux_weight));
        }
    return test;
}

int cmd_train(const Cli& cli, RunConfig rc)
{
    if (cli.grid) {
        prepare_out(rc);
        auto os = open_out(fs::path(rc.out) / "grid.jsonl");
        std::vector<RunConfig> cells;
        for (double lr : TrainConfig::learning_rate_grid())
            for (int e : TrainConfig::epoch_grid())
                for (auto b : TrainConfig::batch_size_grid())
                    for (double ls : TrainConfig::budget_grid())
                        for (double la : TrainConfig::budget_grid())
                            for (double lf : TrainConfig::budget_grid())
                                for (double ll : TrainConfig::budget_grid()) {
                                    RunConfig c = rc;
                                    c.train.learning_rate = lr;
                                    c.train.epochs = e;
                                    c.train.batch_size = b;
                                    c.train.budget = {ls, la, lf, ll};
                                    c.out = (fs::path(rc.out) / ("cell_" + std::to_string(cells.size()))).string();
                                    report::emit(os, {{"type", "grid_cell"}, {"index", cells.size()}, {"learning_rate", lr},
                                                      {"epochs", e}, {"batch_size", b}, {"L_s", ls}, {"L_att", la},
                                                      {"L_affine", lf}, {"L_linear", ll}, {"out", c.out}});
                                    cells.push_back(std::move(c));
                                }
        std::cout << cells.size() << " grid cells listed in " << (fs::path(rc.out) / "grid.jsonl").string() << "\n";
        const std::size_t n = std::min(cli.grid_run, cells.size());
        if (n == 0) return ok;
        auto set = load_or_synth(rc);
        const auto split = split_trials(set, rc.split, rc.seed);
        for (std::size_t i = 0; i < n; ++i) {
            prepare_out(cells[i]);
            with_float(rc.float_mode, [&]<class T>() {
                (void)train_one<T>(cells[i], set, split, cells[i].out);
                return 0;
            });
        }
        return ok;
    }

    auto set = load_or_synth(rc);
    const auto split = split_trials(set, rc.split, rc.seed);

    if (!cli.lip_K.empty()) {
        prepare_out(rc);
        auto summary = open_out(fs::path(rc.out) / "sweep.jsonl");
        for (double K : cli.lip_K) {
            RunConfig c = rc;
            c.train.budget = LipschitzBudget::uniform(K);
            c.train.milestones.clear();
            for (int e : TrainConfig::sensitivity_epochs())
                if (e <= c.train.epochs) c.train.milestones.push_back(e);
            if (c.train.milestones.empty() || c.train.milestones.back() != c.train.epochs)
                c.train.milestones.push_back(c.train.epochs);
            std::ostringstream name;
            name << "K_" << K;
            c.out = (fs::path(rc.out) / name.str()).string();
            prepare_out(c);
            std::vector<std::pair<int, Evaluation>> evals;
            with_float(rc.float_mode, [&]<class T>() {
                (void)train_one<T>(c, set, split, c.out, &evals);
                return 0;
            });
            for (auto& [epoch, ev] : evals) {
                const auto cell = fs::path(c.out) / ("epochs_" + std::to_string(epoch));
                fs::create_directories(cell);
                write_eval(cell, ev);
                report::emit(summary, {{"type", "sweep_cell"}, {"K", K}, {"epochs", epoch},
                                       {"accuracy", ev.fused.accuracy}, {"macro_f1", ev.fused.macro_f1},
                                       {"roc", (cell / "roc.jsonl").string()}});
                std::cout << "K=" << K << " epochs=" << epoch << " accuracy=" << ev.fused.accuracy << "\n";
            }
        }
        return ok;
    }

    prepare_out(rc);
    return with_float(rc.float_mode, [&]<class T>() {
        auto ev = train_one<T>(rc, set, split, rc.out);
        std::cout << "test_accuracy = " << ev.fused.accuracy << "\n"
                  << "test_macro_f1 = " << ev.fused.macro_f1 << "\n"
                  << "checkpoint = " << (fs::path(rc.out) / "checkpoint").string() << "\n";
        return static_cast<int>(ok);
    });
}

void require_checkpoint(const RunConfig& rc)
{
    if (rc.checkpoint.empty()) throw IoError("no checkpoint given (--checkpoint or 'checkpoint =')");
    if (!fs::is_directory(rc.checkpoint)) throw IoError("checkpoint directory '" + rc.checkpoint + "' not found");
}

int cmd_eval(const RunConfig& rc)
{
    require_checkpoint(rc);
    auto set = load_or_synth(rc);
    prepare_out(rc);
    return with_float(rc.float_mode, [&]<class T>() {
        auto model = load_checkpoint<T>(rc.checkpoint);
        const auto idx = assign_windows(split_for(rc, set), set);
        auto ev = evaluate(*model, set, idx.test, rc.train.batch_size, rc.train.aux_weight);
        write_eval(rc.out, ev);
        std::cout << "test_accuracy = " << ev.fused.accuracy << "\n"
                  << "test_macro_f1 = " << ev.fused.macro_f1 << "\n";
        for (auto id : kBranches)
            std::cout << "accuracy_" << branch_name(id) << " = " << ev.branch[static_cast<std::size_t>(id)].accuracy << "\n";
        return static_cast<int>(ok);
    });
}

int cmd_verify(const RunConfig& rc)
{
    require_checkpoint(rc);
    prepare_out(rc);
    auto model = load_checkpoint<double>(rc.checkpoint);
    std::optional<TrialSet> set;
    if (!rc.dataset.empty()) set = load_or_synth(rc);
    const auto& cfg = model->config();
    Sampler sample = set ? mixed_sampler(*set) : normal_sampler({cfg.channels, cfg.samples});
    VerifyOptions opt;
    opt.pairs = rc.probe_pairs;
    opt.batch = rc.probe_batch;
    opt.seed = rc.seed;
    opt.grad_checks = rc.grad_checks;
    const auto rep = verify_model(*model, sample, opt);
    auto os = open_out(fs::path(rc.out) / "verification.jsonl");
    report::verification(os, rep);
    write_text(fs::path(rc.out) / "verification.txt", rep.table());
    std::cout << rep.table();
    return rep.pass() ? ok : verification_failed;
}

int cmd_stream(const RunConfig& rc)
{
    require_checkpoint(rc);
    auto set = load_or_synth(rc);
    if (rc.record >= set.size()) throw ContractError("record index " + std::to_string(rc.record) + " out of range");
    prepare_out(rc);
    return with_float(rc.float_mode, [&]<class T>() {
        auto model = load_checkpoint<T>(rc.checkpoint);
        const std::size_t window = rc.window ? rc.window : model->config().samples;
        const std::size_t stride = rc.stride ? rc.stride : window;
        const auto r = stream_evaluate(*model, set.recording(rc.record), window, stride);
        auto os = open_out(fs::path(rc.out) / "stream.jsonl");
        report::stream(os, r);
        std::cout << "windows = " << r.posteriors.size() << "\n"
                  << "majority_class = " << r.majority(model->config().classes) << "\n"
                  << "mean_latency_ms = " << r.mean_latency_ms() << "\n"
                  << "max_latency_ms = " << r.max_latency_ms() << "\n";
        return static_cast<int>(ok);
    });
}

int cmd_export(const Cli& cli, const RunConfig& rc)
{
    require_checkpoint(rc);
    prepare_out(rc);
    return with_float(rc.float_mode, [&]<class T>() {
        auto model = load_checkpoint<T>(rc.checkpoint);
        if (cli.kind == "fusion_weights") {
            const auto w = model->weights();
            auto os = open_out(fs::path(rc.out) / "fusion_weights.jsonl");
            report::json j{{"type", "fusion_weights"}};
            double sum = 0.0;
            for (auto id : kBranches) {
                j[branch_name(id)] = static_cast<double>(w[static_cast<std::size_t>(id)]);
                sum += static_cast<double>(w[static_cast<std::size_t>(id)]);
            }
            j["sum"] = sum;
            report::emit(os, j);
            std::cout << j.dump() << "\n";
            return static_cast<int>(ok);
        }
        auto set = load_or_synth(rc);
        const auto idx = assign_windows(split_for(rc, set), set);
        if (cli.kind == "roc") {
            auto ev = evaluate(*model, set, idx.test, rc.train.batch_size, rc.train.aux_weight);
            auto os = open_out(fs::path(rc.out) / "roc.jsonl");
            report::emit(os, report::roc(ev.fused, "fused"));
            for (auto id : kBranches) report::emit(os, report::roc(ev.branch[static_cast<std::size_t>(id)], branch_name(id)));
        } else {
            const auto m = connectivity(*model, set, idx.test, rc.connectivity_blend);
            auto os = open_out(fs::path(rc.out) / "connectivity.jsonl");
            report::emit(os, report::connectivity(m, rc.connectivity_blend));
        }
        std::cout << "wrote " << (fs::path(rc.out) / (cli.kind + ".jsonl")).string() << "\n";
        return static_cast<int>(ok);
    });
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"LEL: Lipschitz-constrained ensemble for EEG-style signals"};
    app.footer(kExitCodes);
    app.require_subcommand(1);
    Cli cli;

    auto common = [&](CLI::App* s) {
        s->add_option("--config", cli.config_file, "key = value config file")->check(CLI::ExistingFile);
        s->add_option("--set", cli.overrides, "override one config key (KEY=VALUE), repeatable");
        s->add_option("--seed", cli.seed, "seed for data, split, init, batches and dropout");
        s->add_option("--out", cli.out, "output directory");
        s->add_option("--float-mode", cli.float_mode, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
        s->add_option("--dataset", cli.dataset, "LELD dataset (default: synthesize from the config)");
    };
    auto with_checkpoint = [&](CLI::App* s) { s->add_option("--checkpoint", cli.checkpoint, "checkpoint directory"); };

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset and print the band-power oracle accuracy");
    common(synth);

    auto* trn = app.add_subcommand("train", "train and write a checkpoint plus line-delimited reports");
    common(trn);
    trn->add_option("--epochs", cli.epochs, "training epochs");
    trn->add_option("--batch-size", cli.batch_size, "batch size");
    trn->add_option("--lip-K", cli.lip_K, "sensitivity sweep: one run per K with all budget constants = K")
        ->delimiter(',');
    trn->add_flag("--grid", cli.grid, "list the hyperparameter grid (grid.jsonl)");
    trn->add_option("--grid-run", cli.grid_run, "with --grid: train the first N cells");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on its test split");
    common(ev);
    with_checkpoint(ev);

    auto* ver = app.add_subcommand("verify", "spectral norms, Lipschitz probes, composition and gradient checks");
    common(ver);
    with_checkpoint(ver);

    auto* str = app.add_subcommand("stream", "causal windowed inference over one recording");
    common(str);
    with_checkpoint(str);
    str->add_option("--window", cli.window, "window length in samples (default: checkpoint T)");
    str->add_option("--stride", cli.stride, "stride in samples (default: window)");
    str->add_option("--record", cli.record, "recording index in the dataset");

    auto* exp = app.add_subcommand("export", "export roc, connectivity or fusion_weights data");
    common(exp);
    with_checkpoint(exp);
    exp->add_option("--kind", cli.kind, "roc | connectivity | fusion_weights")
        ->required()
        ->check(CLI::IsMember({"roc", "connectivity", "fusion_weights"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : usage;
    }

    try {
        const RunConfig rc = resolve(cli);
        if (synth->parsed()) return cmd_synth(rc);
        if (trn->parsed()) return cmd_train(cli, rc);
        if (ev->parsed()) return cmd_eval(rc);
        if (ver->parsed()) return cmd_verify(rc);
        if (str->parsed()) return cmd_stream(rc);
        if (exp->parsed()) return cmd_export(cli, rc);
        return usage;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return io_error;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return divergence;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return invalid_config;
    } catch (const ParameterError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return invalid_config;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return shape_mismatch;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return numeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return internal;
    }
}
