#pragma once

// Spectral norms, empirical Lipschitz probes, the composition product and
// finite-difference gradient checks.

#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ensemble.hpp"

namespace lel {

inline constexpr double kBoundTol = 1e-6;

/// Draws a batch [B, ...] of probe inputs.
using Sampler = std::function<Tensor<double>(Rng&, std::size_t)>;
/// Maps a batch row-wise: output row b depends on input row b only.
using BatchMap = std::function<Tensor<double>(const Tensor<double>&)>;

inline std::vector<double> default_scales() { return {1e-3, 1e-2, 1e-1}; }

inline Sampler normal_sampler(Shape row)
{
    return [row](Rng& rng, std::size_t B) {
        Shape s{B};
        s.insert(s.end(), row.begin(), row.end());
        Tensor<double> x(s);
        for (auto& v : x.data) v = rng.normal();
        return x;
    };
}

/// Alternates standard-normal draws with windows replayed from `set`,
/// which must outlive the sampler.
inline Sampler mixed_sampler(const TrialSet& set)
{
    auto normal = normal_sampler({set.channels(), set.samples()});
    return [normal, &set, calls = std::size_t{0}](Rng& rng, std::size_t B) mutable {
        if (set.size() == 0 || (calls++ % 2) == 0) return normal(rng, B);
        std::vector<std::size_t> idx(B);
        for (auto& i : idx) i = static_cast<std::size_t>(rng.below(set.size()));
        return gather<double>(set, idx).data;
    };
}

namespace detail {

/// Per-group l2 norms of a - b, groups being rows (or the whole tensor).
inline std::vector<double> diff_norms(const Tensor<double>& a, const Tensor<double>& b, bool joint)
{
    if (a.shape != b.shape) throw ContractError("probe pair shape mismatch");
    const std::size_t B = joint || a.rank() == 0 ? 1 : a.dim(0);
    const std::size_t n = a.size() / B;
    std::vector<double> out(B, 0.0);
    for (std::size_t r = 0; r < B; ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = a[r * n + i] - b[r * n + i];
            s += d * d;
        }
        out[r] = std::sqrt(s);
    }
    return out;
}

inline void require_finite(const Tensor<double>& t, const std::string& who, std::size_t probe, double input_norm)
{
    for (auto v : t.data)
        if (!std::isfinite(v)) {
            std::ostringstream os;
            os << who << ": non-finite output at probe " << probe << " (input norm " << input_norm << ")";
            throw NumericError(os.str());
        }
}

/// x + delta with per-row RMS of delta equal to `scale`, random direction.
inline Tensor<double> perturb(const Tensor<double>& x, double scale, Rng& rng, bool joint)
{
    Tensor<double> y = x;
    const std::size_t B = joint || x.rank() == 0 ? 1 : x.dim(0);
    const std::size_t n = x.size() / B;
    std::vector<double> d(n);
    for (std::size_t r = 0; r < B; ++r) {
        double s = 0.0;
        for (auto& v : d) {
            v = rng.normal();
            s += v * v;
        }
        const double f = scale * std::sqrt(static_cast<double>(n)) / std::sqrt(s);
        for (std::size_t i = 0; i < n; ++i) y[r * n + i] += f * d[i];
    }
    return y;
}

inline double input_norm(const Tensor<double>& x)
{
    double s = 0.0;
    for (auto v : x.data) s += v * v;
    return std::sqrt(s);
}

} // namespace detail

struct LipschitzEstimate {
    double L_hat = 0.0;
    std::size_t pairs = 0;
    double worst_scale = 0.0;
};

/// max ||f(x+d) - f(x)|| / ||d|| over n_pairs probes, drawn in batches;
/// batch j uses scales[j % scales.size()] as the per-element RMS of d.
/// With `joint`, a whole batch is one probe vector. A lower bound on the
/// true constant.
inline LipschitzEstimate empirical_lipschitz(const BatchMap& f, const Sampler& sample, std::size_t n_pairs = 1000,
                                             const std::vector<double>& scales = default_scales(),
                                             std::uint64_t seed = 7, std::size_t batch = 100, bool joint = false)
{
    if (scales.empty() || batch == 0) throw ContractError("empirical_lipschitz: need scales and a positive batch");
    Rng rng(seed);
    LipschitzEstimate est;
    std::size_t probe = 0, round = 0;
    while (probe < n_pairs) {
        const std::size_t B = std::min(batch, n_pairs - probe);
        const double scale = scales[round++ % scales.size()];
        auto x = sample(rng, B);
        auto xp = detail::perturb(x, scale, rng, joint);
        auto y = f(x), yp = f(xp);
        detail::require_finite(y, "empirical_lipschitz", probe, detail::input_norm(x));
        detail::require_finite(yp, "empirical_lipschitz", probe, detail::input_norm(xp));
        const auto din = detail::diff_norms(x, xp, joint), dout = detail::diff_norms(y, yp, joint);
        for (std::size_t r = 0; r < din.size(); ++r) {
            const double ratio = din[r] > 0.0 ? dout[r] / din[r] : 0.0;
            if (ratio > est.L_hat) {
                est.L_hat = ratio;
                est.worst_scale = scale;
            }
        }
        probe += B;
        est.pairs += B;
    }
    return est;
}

/// Product of per-module constants along a path. Every entry must be set.
inline double compose_bound(const std::vector<std::optional<double>>& path)
{
    double p = 1.0;
    for (std::size_t i = 0; i < path.size(); ++i) {
        if (!path[i] || !(*path[i] >= 0.0) || !std::isfinite(*path[i]))
            throw ContractError("compose_bound: module " + std::to_string(i) + " has no declared constant");
        p *= *path[i];
    }
    return p;
}

// ------------------------------------------------------------------ stages

struct StageReport {
    std::string name;
    BoundKind kind = BoundKind::declared;
    double declared = std::numeric_limits<double>::quiet_NaN();
    double measured = 0.0;
    std::size_t pairs = 0;
    bool pass = true;  ///< declared stages only; measured stages always pass

    double margin() const { return kind == BoundKind::declared ? declared - measured : 0.0; }
};

struct BranchReport {
    BranchId id = BranchId::global_feature;
    std::vector<StageReport> stages;
    double composed = 0.0;    ///< declared constants x measured constants
    double end_to_end = 0.0;  ///< empirical ratio of the whole branch
    std::size_t pairs = 0;
    bool pass = false;
};

/// Pushes probe pairs through the branch stage by stage. Each stage's
/// constant is measured on the pairs it actually receives, so the
/// end-to-end ratio of a pair is the product of its stage ratios.
inline BranchReport probe_branch(const Branch<double>& branch, const Sampler& sample, std::size_t n_pairs = 1000,
                                 const std::vector<double>& scales = default_scales(), std::uint64_t seed = 7,
                                 std::size_t batch = 50, bool joint = false)
{
    ad::NoGradGuard ng;
    const auto stages = branch.stages();
    BranchReport rep;
    rep.id = branch.id();
    for (const auto& s : stages) {
        const double d = s.kind == BoundKind::declared ? s.declared : std::numeric_limits<double>::quiet_NaN();
        rep.stages.push_back({s.name, s.kind, d, 0.0, 0, true});
    }
    Rng rng(seed);
    ForwardContext<double> ctx;
    std::size_t probe = 0, round = 0;
    while (probe < n_pairs) {
        const std::size_t B = std::min(batch, n_pairs - probe);
        const double scale = scales[round++ % scales.size()];
        ad::Var<double> h(sample(rng, B));
        ad::Var<double> hp(detail::perturb(h.value(), scale, rng, joint));
        const auto d0 = detail::diff_norms(h.value(), hp.value(), joint);
        for (std::size_t i = 0; i < stages.size(); ++i) {
            auto g = stages[i].apply(h, ctx), gp = stages[i].apply(hp, ctx);
            detail::require_finite(g.value(), std::string(branch_name(branch.id())) + "/" + stages[i].name, probe,
                                   detail::input_norm(h.value()));
            detail::require_finite(gp.value(), std::string(branch_name(branch.id())) + "/" + stages[i].name, probe,
                                   detail::input_norm(hp.value()));
            const auto din = detail::diff_norms(h.value(), hp.value(), joint);
            const auto dout = detail::diff_norms(g.value(), gp.value(), joint);
            for (std::size_t r = 0; r < din.size(); ++r)
                if (din[r] > 0.0) rep.stages[i].measured = std::max(rep.stages[i].measured, dout[r] / din[r]);
            rep.stages[i].pairs += B;
            h = g;
            hp = gp;
        }
        const auto dn = detail::diff_norms(h.value(), hp.value(), joint);
        for (std::size_t r = 0; r < dn.size(); ++r)
            if (d0[r] > 0.0) rep.end_to_end = std::max(rep.end_to_end, dn[r] / d0[r]);
        probe += B;
        rep.pairs += B;
    }
    std::vector<std::optional<double>> path;
    bool ok = true;
    for (auto& s : rep.stages) {
        if (s.kind == BoundKind::declared) {
            s.pass = s.measured <= s.declared * (1.0 + kBoundTol);
            ok = ok && s.pass;
            path.push_back(s.declared);
        } else {
            path.push_back(s.measured);
        }
    }
    rep.composed = compose_bound(path);
    rep.pass = ok && rep.end_to_end <= rep.composed * (1.0 + kBoundTol);
    return rep;
}

// ------------------------------------------------------------------ gradients

struct GradCheckOptions {
    double h = 1e-5;
    double tol = 1e-4;
    double floor_ratio = 1e-3;     ///< residual denominator floor, relative to the largest gradient entry
    std::size_t max_coords = 0;    ///< per leaf; 0 checks every coordinate
    std::uint64_t seed = 11;
};

struct GradCheckResult {
    std::string name;
    double max_residual = 0.0;
    std::size_t checked = 0;
    std::size_t excluded = 0;  ///< coordinates within 10h of a kink
    std::string worst;         ///< leaf[index] of the largest residual
    bool pass = false;
};

/// Central differences of r . f against the analytic gradient for every
/// leaf, with r a fixed random projection of the output. Coordinates whose
/// +-10h neighbourhood crosses a relu/clamp kink are excluded and counted.
/// Residual: |a - n| / max(|a|, |n|, floor_ratio * max|a|, 1e-12).
/// `reference`, when given, is the map differenced numerically (for maps
/// whose backward deliberately stops gradient somewhere).
inline GradCheckResult grad_check(const std::string& name, const std::function<ad::Var<double>()>& f,
                                  const std::vector<std::pair<std::string, ad::Var<double>>>& leaves,
                                  const GradCheckOptions& opt = {},
                                  const std::function<ad::Var<double>()>& reference = {})
{
    const auto& g = reference ? reference : f;
    GradCheckResult res;
    res.name = name;
    Rng rng(opt.seed);
    for (const auto& [n, v] : leaves) {
        if (!v.requires_grad()) throw ContractError("grad_check: leaf " + n + " does not require grad");
        auto leaf = v;
        leaf.zero_grad();
    }
    auto y = f();
    std::vector<double> r(y.size());
    for (auto& v : r) v = rng.normal();
    y.backward(r);
    std::vector<std::vector<double>> analytic;
    double gmax = 0.0;
    for (const auto& [n, v] : leaves) {
        analytic.push_back(v.grad());
        for (auto g : analytic.back()) gmax = std::max(gmax, std::abs(g));
    }
    auto objective = [&]() {
        ad::NoGradGuard ng;
        const auto out = g();
        if (out.size() != r.size()) throw ContractError("grad_check: reference output size differs");
        double s = 0.0;
        for (std::size_t i = 0; i < r.size(); ++i) s += r[i] * out.value()[i];
        return s;
    };
    auto regimes = [&]() {
        ad::NoGradGuard ng;
        ad::RegimeRecorder rec;
        (void)g();
        return rec.bits();
    };
    const double floor = std::max(opt.floor_ratio * gmax, 1e-12);
    for (std::size_t l = 0; l < leaves.size(); ++l) {
        auto leaf = leaves[l].second;
        auto& x = leaf.mutable_value().data;
        std::vector<std::size_t> coords(x.size());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (opt.max_coords && coords.size() > opt.max_coords) {
            rng.shuffle(coords.begin(), coords.end());
            coords.resize(opt.max_coords);
        }
        for (auto i : coords) {
            const double x0 = x[i];
            const auto base = regimes();
            x[i] = x0 + 10.0 * opt.h;
            const bool up = regimes() == base;
            x[i] = x0 - 10.0 * opt.h;
            const bool down = regimes() == base;
            if (!up || !down) {
                x[i] = x0;
                ++res.excluded;
                continue;
            }
            x[i] = x0 + opt.h;
            const double fp = objective();
            x[i] = x0 - opt.h;
            const double fm = objective();
            x[i] = x0;
            const double num = (fp - fm) / (2.0 * opt.h);
            const double a = analytic[l][i];
            const double resid = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
            ++res.checked;
            if (resid > res.max_residual) {
                res.max_residual = resid;
                res.worst = leaves[l].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    res.pass = res.max_residual < opt.tol;
    return res;
}

// ------------------------------------------------------------------ report

struct WeightNorm {
    std::string name;
    Shape shape;
    double sigma = 0.0;
    double bound = 0.0;
    int iterations = 0;
    bool converged = false;
    bool pass = false;
};

struct VerificationReport {
    std::vector<WeightNorm> weights;
    std::vector<BranchReport> branches;
    double fused_bound = 0.0;  ///< max over branches of the composed bound
    std::vector<GradCheckResult> grad_checks;

    bool pass() const
    {
        for (const auto& w : weights)
            if (!w.pass) return false;
        for (const auto& b : branches)
            if (!b.pass) return false;
        for (const auto& g : grad_checks)
            if (!g.pass) return false;
        return true;
    }

    std::string table() const
    {
        std::ostringstream os;
        os << std::scientific << std::setprecision(6);
        os << "weights (sigma_max <= bound)\n";
        for (const auto& w : weights)
            os << "  " << std::left << std::setw(44) << w.name << " sigma=" << w.sigma << " bound=" << w.bound
               << (w.pass ? "  ok" : "  FAIL") << "\n";
        for (const auto& b : branches) {
            os << "branch " << branch_name(b.id) << " (" << b.pairs << " pairs)\n";
            for (const auto& s : b.stages) {
                os << "  " << std::left << std::setw(22) << s.name;
                if (s.kind == BoundKind::declared)
                    os << " declared=" << s.declared << " measured=" << s.measured << (s.pass ? "  ok" : "  FAIL");
                else
                    os << " measured=" << s.measured << "  (measured constant)";
                os << "\n";
            }
            os << "  composed=" << b.composed << " end_to_end=" << b.end_to_end << (b.pass ? "  ok" : "  FAIL") << "\n";
        }
        os << "fused bound " << fused_bound << "\n";
        for (const auto& g : grad_checks)
            os << "grad " << std::left << std::setw(24) << g.name << " residual=" << g.max_residual
               << " checked=" << g.checked << " excluded=" << g.excluded << (g.pass ? "  ok" : "  FAIL") << "\n";
        os << (pass() ? "PASS" : "FAIL") << "\n";
        return os.str();
    }
};

/// Composite loss against its stop-gradient reading: the fused term is
/// differenced with the branch posteriors frozen at the base point.
inline GradCheckResult grad_check_composite_loss(LelModel<double>& model, const ad::Var<double>& x,
                                                 const std::vector<int>& labels,
                                                 const std::vector<std::pair<std::string, ad::Var<double>>>& leaves,
                                                 const GradCheckOptions& opt = {})
{
    std::vector<ad::Var<double>> frozen;
    {
        ad::NoGradGuard ng;
        for (const auto& p : model.forward(x, false).branch_probs) frozen.push_back(p.detach());
    }
    return grad_check(
        "composite_loss", [&]() { return composite_loss(model.forward(x, false), labels); }, leaves, opt,
        [&]() {
            auto out = model.forward(x, false);
            out.fused = fuse(model.alpha.var, frozen);
            return composite_loss(out, labels);
        });
}

struct VerifyOptions {
    std::size_t pairs = 1000;
    std::vector<double> scales = default_scales();
    std::size_t batch = 50;
    std::uint64_t seed = 7;
    bool grad_checks = true;
    std::size_t grad_batch = 2;
    std::size_t grad_coords = 24;  ///< sampled coordinates per leaf
};

template <class T>
std::vector<WeightNorm> weight_norms(LelModel<T>& model)
{
    std::vector<WeightNorm> out;
    for (const auto& [name, p] : model.parameters()) {
        if (!p->constraint.constrained()) continue;
        auto pi = power_iteration(p->value(), 2000, 1e-10);
        WeightNorm w{name, p->value().shape, pi.sigma, p->constraint.bound, pi.iterations, pi.converged, false};
        w.pass = w.sigma <= w.bound * (1.0 + kBoundTol);
        out.push_back(std::move(w));
    }
    return out;
}

/// Full report for a float64 model. Probes come from `sample`.
inline VerificationReport verify_model(LelModel<double>& model, const Sampler& sample, const VerifyOptions& opt = {})
{
    VerificationReport rep;
    rep.weights = weight_norms(model);
    const bool joint = model.config().lgcn_stats == LgcnStats::batch;
    for (auto id : kBranches) {
        rep.branches.push_back(probe_branch(model.branch(id), sample, opt.pairs, opt.scales,
                                            opt.seed + static_cast<std::uint64_t>(id), opt.batch, joint));
        rep.fused_bound = std::max(rep.fused_bound, rep.branches.back().composed);
    }
    if (opt.grad_checks) {
        Rng rng(opt.seed);
        ad::Var<double> x(sample(rng, opt.grad_batch), true);
        std::vector<int> labels(opt.grad_batch);
        for (auto& l : labels) l = static_cast<int>(rng.below(static_cast<std::uint64_t>(model.config().classes)));
        GradCheckOptions go;
        go.max_coords = opt.grad_coords;
        for (auto id : kBranches) {
            std::vector<std::pair<std::string, ad::Var<double>>> leaves{{"input", x}};
            ParamRefs<double> refs;
            model.branch(id).collect(refs);
            for (auto& [n, p] : refs) leaves.push_back({n, p->var});
            rep.grad_checks.push_back(grad_check(
                branch_name(id),
                [&, id]() {
                    ForwardContext<double> ctx;
                    return model.branch_forward(id, x, ctx);
                },
                leaves, go));
        }
        std::vector<std::pair<std::string, ad::Var<double>>> leaves{{"input", x}};
        for (auto& [n, p] : model.parameters()) leaves.push_back({n, p->var});
        rep.grad_checks.push_back(grad_check_composite_loss(model, x, labels, leaves, go));
    }
    return rep;
}

} // namespace lel
