// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <Eigen/Dense>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <lel/report.hpp>
#include <lel/training.hpp>
#include <lel/verification.hpp>

using namespace lel;
using V = ad::Var<double>;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances and limits.
constexpr double kGradTol = 1e-4;
constexpr int kGradInstances = 5;
constexpr double kGradSeconds = 120.0;
constexpr double kSigmaTol = 1e-6;
constexpr double kSvdRelTol = 1e-6;
constexpr std::size_t kSvdSmall = 8;
constexpr std::size_t kProbePairs = 1000;
constexpr int kBoundEpochs = 10;
constexpr double kComposeTol = 1e-6;
constexpr double kComposeSeconds = 300.0;
constexpr double kRoundTripTol = 1e-10;
constexpr double kRowSumTol = 1e-12;
constexpr double kMinAccuracy = 0.95;
constexpr double kBranchSlack = 0.01;
constexpr double kEndToEndSeconds = 600.0;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = true;
    std::ostringstream detail;
    void require(bool ok, const std::string& what)
    {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

int failures = 0;

void report_line(int id, const std::string& title, const std::function<void(Outcome&)>& body)
{
    Outcome o;
    const auto t0 = Clock::now();
    try {
        body(o);
    } catch (const std::exception& e) {
        o.pass = false;
        o.detail << " [exception: " << e.what() << "]";
    }
    std::printf("%s %d %s:%s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, title.c_str(), o.detail.str().c_str(),
                seconds_since(t0));
    std::fflush(stdout);
    if (!o.pass) ++failures;
}

Tensor<double> randn(Shape s, std::uint64_t seed, double scale = 1.0)
{
    Rng rng(seed);
    Tensor<double> t(std::move(s));
    for (auto& x : t.data) x = scale * rng.normal();
    return t;
}

ModelConfig small_config(std::uint64_t seed)
{
    ModelConfig c;
    c.channels = 4;
    c.samples = 128;
    c.classes = 3;
    c.embed_dim = 8;
    c.heads = 2;
    c.mlp_hidden = 8;
    c.tokens = 4;
    c.seed = seed;
    return c;
}

using Leaves = std::vector<std::pair<std::string, V>>;

template <class P>
Leaves leaves_of(const V& x, P& params, const std::string& prefix)
{
    Leaves out{{"x", x}};
    ParamRefs<double> refs;
    params.collect(refs, prefix);
    for (auto& [n, p] : refs) out.push_back({n, p->var});
    return out;
}

double svd_sigma(const Tensor<double>& W)
{
    Eigen::MatrixXd M(W.dim(0), W.dim(1));
    for (std::size_t r = 0; r < W.dim(0); ++r)
        for (std::size_t c = 0; c < W.dim(1); ++c)
            M(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = W[r * W.dim(1) + c];
    return Eigen::JacobiSVD<Eigen::MatrixXd>(M).singularValues()(0);
}

// ------------------------------------------------------------------ 1

void gradient_suite(Outcome& o)
{
    const auto t0 = Clock::now();
    GradCheckOptions full;
    full.tol = kGradTol;
    GradCheckOptions sampled = full;
    sampled.max_coords = 24;
    double worst = 0.0;
    std::size_t checks = 0;
    auto record = [&](const GradCheckResult& r, const std::string& what) {
        ++checks;
        worst = std::max(worst, r.max_residual);
        o.require(r.pass && r.checked > 0, what + " residual " + std::to_string(r.max_residual) + " at " + r.worst);
    };

    const auto bins = make_all_band_bins(default_bands(), 64, 128.0);
    for (int s = 0; s < kGradInstances; ++s) {
        const auto seed = static_cast<std::uint64_t>(s);
        Rng rng(seed);
        LgcbeParams<double> pb(4, 64, bins, 1.0, 1.0, rng);
        V xb(randn({2, 4, 64}, 10 + seed), true);
        record(grad_check("lgcbe", [&] { return lgcbe_forward(xb, pb).out; }, leaves_of(xb, pb, "lgcbe"), full),
               "lgcbe");

        for (auto stats : {LgcnStats::per_sample, LgcnStats::batch}) {
            LgcnParams<double> pn(6, 1.0 + 0.2 * s, stats);
            Rng r2(20 + seed);
            for (auto& v : pn.gamma.value().data) v = r2.normal();
            for (auto& v : pn.beta.value().data) v = r2.normal();
            V z(randn({4, 6}, 30 + seed), true);
            record(grad_check("lgcn", [&] { return lgcn_forward(z, pn); },
                              {{"z", z}, {"gamma", pn.gamma.var}, {"beta", pn.beta.var}}, full),
                   "lgcn");
        }

        LgcaParams<double> pa(8, 2, 0.5 + 0.25 * s, 1.0, 0.3, rng);
        V xa(randn({2, 4, 8}, 40 + seed, 2.0), true);
        record(grad_check("lgca", [&] { return lgca_forward(xa, pa, false); }, leaves_of(xa, pa, "lgca"), full),
               "lgca");

        LelModel<double> m(small_config(100 + seed));
        for (auto& v : m.alpha.value().data) v = rng.normal();
        V x(randn({2, 4, 128}, 50 + seed), true);
        for (auto id : kBranches) {
            Leaves lv{{"x", x}};
            ParamRefs<double> refs;
            m.branch(id).collect(refs);
            for (auto& [n, p] : refs) lv.push_back({n, p->var});
            record(grad_check(
                       branch_name(id),
                       [&] {
                           ForwardContext<double> ctx;
                           return m.branch_forward(id, x, ctx);
                       },
                       lv, sampled),
                   branch_name(id));
        }
        Leaves all{{"x", x}};
        for (auto& [n, p] : m.parameters()) all.push_back({n, p->var});
        record(grad_check_composite_loss(m, x, {0, 2}, all, sampled), "composite_loss");
    }
    const double secs = seconds_since(t0);
    o.detail << " " << checks << " checks, max residual " << worst << " < " << kGradTol << ", " << secs << "s";
    o.require(secs < kGradSeconds, "runtime over " + std::to_string(kGradSeconds) + "s");
}

// ------------------------------------------------------------------ 2, 3

struct BoundRun {
    std::unique_ptr<LelModel<double>> model;
    VerificationReport report;
    double probe_seconds = 0.0;
};

BoundRun& bound_run()
{
    static BoundRun run = [] {
        BoundRun r;
        SynthSpec spec;
        const auto set = synth_dataset(spec);
        const auto idx = assign_windows(split_trials(set, {}, spec.seed), set);
        TrainConfig tc;
        tc.epochs = kBoundEpochs;
        tc.budget = LipschitzBudget::uniform(1.0);
        r.model = std::make_unique<LelModel<double>>(make_model_config(tc, set));
        (void)train(*r.model, set, idx, tc);
        VerifyOptions opt;
        opt.pairs = kProbePairs;
        opt.grad_checks = false;
        const auto t0 = Clock::now();
        r.report = verify_model(*r.model, mixed_sampler(set), opt);
        r.probe_seconds = seconds_since(t0);
        return r;
    }();
    return run;
}

void bound_suite(Outcome& o)
{
    auto& run = bound_run();
    double worst_sigma = 0.0;
    for (const auto& w : run.report.weights) {
        worst_sigma = std::max(worst_sigma, w.sigma / w.bound);
        o.require(w.sigma <= w.bound + kSigmaTol, w.name + " sigma " + std::to_string(w.sigma));
    }
    // Power iteration against the SVD oracle on every constrained weight.
    std::size_t svd_checked = 0;
    for (const auto& [name, p] : run.model->parameters()) {
        if (!p->constraint.constrained()) continue;
        const auto& W = p->value();
        const double ref = svd_sigma(W);
        const double pi = power_iteration(W, 2000, 1e-12).sigma;
        o.require(std::abs(pi - ref) <= kSvdRelTol * std::max(ref, 1e-300), name + " power iteration vs SVD");
        ++svd_checked;
    }
    // No model weight is as small as 8x8, so random ones are added.
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto W = randn({kSvdSmall, kSvdSmall - s % 4}, 900 + s);
        const double ref = svd_sigma(W);
        o.require(std::abs(power_iteration(W, 5000, 1e-14).sigma - ref) <= kSvdRelTol * ref, "random matrix vs SVD");
        ++svd_checked;
    }
    std::size_t stages = 0;
    double worst_ratio = 0.0;
    for (const auto& b : run.report.branches) {
        o.require(b.pairs == kProbePairs, "probe pair count");
        for (const auto& s : b.stages) {
            if (s.kind != BoundKind::declared) continue;
            ++stages;
            worst_ratio = std::max(worst_ratio, s.measured / s.declared);
            o.require(s.measured <= s.declared * (1.0 + kBoundTol),
                      std::string(branch_name(b.id)) + "/" + s.name + " measured " + std::to_string(s.measured));
        }
    }
    o.detail << " " << run.report.weights.size() << " weights, max sigma/bound " << worst_sigma << "; " << svd_checked
             << " SVD cross-checks; " << stages << " declared stages, max measured/declared " << worst_ratio
             << " over " << kProbePairs << " pairs x " << default_scales().size() << " scales";
}

void composition(Outcome& o)
{
    auto& run = bound_run();
    for (const auto& b : run.report.branches) {
        o.detail << " " << branch_name(b.id) << " " << b.end_to_end << "<=" << b.composed << ";";
        o.require(b.end_to_end <= b.composed * (1.0 + kComposeTol), branch_name(b.id));
    }
    o.detail << " probes " << run.probe_seconds << "s";
    o.require(run.probe_seconds < kComposeSeconds, "runtime over " + std::to_string(kComposeSeconds) + "s");
}

// ------------------------------------------------------------------ 4

void exactness(Outcome& o)
{
    double rt = 0.0;
    for (std::size_t n : {2u, 7u, 64u, 512u, 1000u}) {
        const auto x = randn({3, n}, n);
        const auto back = fft::irfft(fft::rfft(V(x)), n).value();
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            num += (back[i] - x[i]) * (back[i] - x[i]);
            den += x[i] * x[i];
        }
        rt = std::max(rt, std::sqrt(num / den));
    }
    o.require(rt < kRoundTripTol, "fft round trip " + std::to_string(rt));

    LgcnParams<double> p(6, 1.3);
    Rng rng(1);
    for (auto& v : p.gamma.value().data) v = rng.normal();
    for (auto& v : p.beta.value().data) v = rng.normal();
    const auto z = randn({4, 6}, 2);
    const auto a = lgcn_forward(V(z), p).value();
    double inv = 0.0;
    for (double s : {2.0, 0.125, 1024.0}) {
        auto q = p;
        for (auto& v : q.gamma.value().data) v *= s;
        const auto b = lgcn_forward(V(z), q).value();
        for (std::size_t i = 0; i < a.size(); ++i)
            inv = std::max(inv, std::abs(a[i] - b[i]) / (std::numeric_limits<double>::epsilon() * (1 + std::abs(a[i]))));
    }
    o.require(inv <= 4.0, "lgcn gain scale invariance " + std::to_string(inv) + " ulp");

    double rowsum = 0.0;
    for (double scale : {1.0, 1e3, 1e6}) {
        const auto s = clamp_softmax(V(randn({3, 7, 7}, 5, scale)), 2.0).value();
        for (std::size_t r = 0; r < 21; ++r) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 7; ++j) sum += s[r * 7 + j];
            rowsum = std::max(rowsum, std::abs(sum - 1.0));
        }
    }
    o.require(rowsum <= kRowSumTol, "clamp_softmax row sum");

    const auto w = fusion_weights(Tensor<double>({4}));
    for (auto v : w) o.require(v == 0.25, "fusion weights at alpha = 0");

    auto W = randn({6, 4}, 3);
    spectral_norm_project(W, 1.0);
    const auto once = W;
    const auto again = spectral_norm_project(W, 1.0);
    o.require(!again.scaled && W.data == once.data, "projection idempotent");
    o.detail << " round trip " << rt << ", gain invariance " << inv << " ulp, row sum " << rowsum
             << ", fusion 0.25 x4, projection idempotent";
}

// ------------------------------------------------------------------ 5, 7

struct EndToEnd {
    std::unique_ptr<LelModel<float>> model;
    Evaluation test;
    bool deterministic = false;
    double seconds = 0.0;
    bool ran = false;
};

EndToEnd& end_to_end()
{
    static EndToEnd e = [] {
        EndToEnd r;
        SynthSpec spec;  // K=5, C=8, T=512, fs=200, 12 dB
        const auto set = synth_dataset(spec);
        const auto idx = assign_windows(split_trials(set, {}, spec.seed), set);
        TrainConfig tc;  // lr 3e-4, dropout 0.3, batch 128, 100 epochs
        auto once = [&] {
            auto m = std::make_unique<LelModel<float>>(make_model_config(tc, set));
            auto res = train(*m, set, idx, tc);
            return std::pair{std::move(m), std::move(res)};
        };
        const auto t0 = Clock::now();
        auto [m1, r1] = once();
        r.seconds = seconds_since(t0);
        auto [m2, r2] = once();
        r.deterministic = r1.history.size() == r2.history.size();
        for (std::size_t i = 0; r.deterministic && i < r1.history.size(); ++i)
            r.deterministic = r1.history[i].train_loss == r2.history[i].train_loss &&
                              r1.history[i].val_loss == r2.history[i].val_loss;
        const auto p1 = capture(*m1), p2 = capture(*m2);
        for (std::size_t i = 0; r.deterministic && i < p1.size(); ++i) r.deterministic = p1[i].data == p2[i].data;
        r.test = evaluate(*m1, set, idx.test, tc.batch_size, tc.aux_weight);
        r.model = std::move(m1);
        r.ran = true;
        return r;
    }();
    return e;
}

void synthetic_end_to_end(Outcome& o)
{
    auto& e = end_to_end();
    const double acc = e.test.fused.accuracy;
    o.detail << " fused " << acc;
    o.require(acc >= kMinAccuracy, "fused accuracy below " + std::to_string(kMinAccuracy));
    for (auto id : kBranches) {
        const double b = e.test.branch[static_cast<std::size_t>(id)].accuracy;
        o.detail << ", " << branch_name(id) << " " << b;
        o.require(acc >= b - kBranchSlack, std::string("fused below ") + branch_name(id));
    }
    o.detail << "; repeat bitwise identical " << (e.deterministic ? "yes" : "no") << "; one run " << e.seconds << "s";
    o.require(e.deterministic, "seeded repeats differ");
    o.require(e.seconds < kEndToEndSeconds, "runtime over " + std::to_string(kEndToEndSeconds) + "s");
}

void streaming(Outcome& o)
{
    auto& e = end_to_end();
    SynthSpec spec;
    spec.samples = 2048;
    spec.trials_per_class = 1;
    const auto rec = synth_dataset(spec).recording(0);
    const std::size_t W = e.model->config().samples;
    const auto full = stream_evaluate(*e.model, rec, W, W / 2);
    bool causal = true;
    for (std::size_t cut : {2000u, 1536u, 1100u, 512u}) {
        Recording r = rec;
        r.samples = Tensor<double>({rec.channels(), cut});
        for (std::size_t c = 0; c < rec.channels(); ++c)
            std::copy_n(rec.samples.data.begin() + static_cast<std::ptrdiff_t>(c * rec.length()), cut,
                        r.samples.data.begin() + static_cast<std::ptrdiff_t>(c * cut));
        const auto part = stream_evaluate(*e.model, r, W, W / 2);
        causal = causal && part.posteriors.size() == window_count(cut, W, W / 2);
        for (std::size_t t = 0; causal && t < part.posteriors.size(); ++t) causal = part.posteriors[t] == full.posteriors[t];
    }
    o.require(causal, "posteriors change when future samples are removed");
    bool latency = full.latency_ms.size() == full.posteriors.size();
    for (double l : full.latency_ms) latency = latency && std::isfinite(l) && l >= 0.0;
    o.require(latency, "per-window latency missing");
    const auto tiled = stream_evaluate(*e.model, rec, W, W);
    const std::size_t closed = (rec.length() - W) / W + 1;
    o.require(tiled.posteriors.size() == closed, "window=stride count");
    o.detail << " " << full.posteriors.size() << " windows bitwise stable under 4 truncations; mean latency "
             << full.mean_latency_ms() << " ms; tiling " << tiled.posteriors.size() << " == " << closed;
}

// ------------------------------------------------------------------ 6

void sensitivity(Outcome& o)
{
    const auto dir = fs::temp_directory_path() / "lel_acceptance_sweep";
    fs::remove_all(dir);
    SynthSpec spec;
    const auto set = synth_dataset(spec);
    const auto idx = assign_windows(split_trials(set, {}, spec.seed), set);
    const auto& epochs = TrainConfig::sensitivity_epochs();
    std::size_t cells = 0;
    double acc_first = 0.0, acc_last = 0.0;
    for (double K : TrainConfig::sensitivity_grid()) {
        TrainConfig tc;
        tc.budget = LipschitzBudget::uniform(K);
        tc.epochs = epochs.back();
        tc.milestones = epochs;
        LelModel<float> m(make_model_config(tc, set));
        auto res = train(m, set, idx, tc);
        o.require(res.milestones.size() == epochs.size(), "milestone count");
        for (auto& [epoch, snap] : res.milestones) {
            restore(m, snap.params);
            const auto ev = evaluate(m, set, idx.test, tc.batch_size, tc.aux_weight);
            std::ostringstream name;
            name << "K_" << K << "/epochs_" << epoch;
            const auto cell = dir / name.str();
            fs::create_directories(cell);
            {
                std::ofstream os(cell / "roc.jsonl");
                report::emit(os, report::roc(ev.fused, "fused"));
            }
            std::ifstream is(cell / "roc.jsonl");
            std::string line;
            o.require(std::getline(is, line) && !nlohmann::json::parse(line)["curves"].empty(),
                      "roc file for " + name.str());
            ++cells;
            o.detail << " " << name.str() << "=" << ev.fused.accuracy;
            if (K == 1.0 && epoch == epochs.front()) acc_first = ev.fused.accuracy;
            if (K == 1.0 && epoch == epochs.back()) acc_last = ev.fused.accuracy;
        }
    }
    o.require(cells == 9, "expected 9 cells");
    o.require(acc_last >= acc_first, "K=1 accuracy at the last epoch below the first");
    fs::remove_all(dir);
}

// ------------------------------------------------------------------ 8

void leakage(Outcome& o)
{
    SynthSpec spec;
    spec.trials_per_class = 20;
    auto set = synth_dataset(spec);
    // Adversarial duplicates: every window of trial 0 appended three more times.
    const auto victim = set.records[0];
    const std::size_t N = set.size(), C = set.channels(), T = set.samples();
    Tensor<double> data({N + 3, C, T});
    std::copy(set.data.data.begin(), set.data.data.end(), data.data.begin());
    for (std::size_t k = 0; k < 3; ++k) {
        std::copy_n(set.data.data.begin(), C * T, data.data.begin() + static_cast<std::ptrdiff_t>((N + k) * C * T));
        set.records.push_back(victim);
    }
    set.data = std::move(data);

    const auto split = split_trials(set, {}, 11);
    const auto idx = assign_windows(split, set);
    audit_no_leakage(idx, set);
    int homes = 0;
    for (const auto* part : {&idx.train, &idx.val, &idx.test}) {
        bool has = false;
        for (auto i : *part) has = has || (set.records[i].subject_id == victim.subject_id && set.records[i].trial_id == victim.trial_id);
        homes += has;
    }
    o.require(homes == 1, "duplicate windows spread over several splits");

    bool rejected_split = false;
    auto bad = split;
    bad.test.insert(*bad.train.begin());
    try {
        validate_split(bad, set);
    } catch (const ContractError&) {
        rejected_split = true;
    }
    o.require(rejected_split, "trial in two splits accepted");

    bool rejected_windows = false;
    SplitIndices leaky{{0}, {}, {N}};
    try {
        audit_no_leakage(leaky, set);
    } catch (const ContractError&) {
        rejected_windows = true;
    }
    o.require(rejected_windows, "hand-built leaky window assignment accepted");
    o.detail << " 4 copies of one trial land in one split; cross-split trial and window assignments rejected";
}

} // namespace

int main()
{
    report_line(1, "gradient suite", gradient_suite);
    report_line(2, "bound suite", bound_suite);
    report_line(3, "composition", composition);
    report_line(4, "exactness", exactness);
    report_line(5, "synthetic end-to-end", synthetic_end_to_end);
    report_line(6, "sensitivity sweep", sensitivity);
    report_line(7, "streaming causality", streaming);
    report_line(8, "no leakage", leakage);
    std::printf("%d of 8 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
