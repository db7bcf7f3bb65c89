#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "fft.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace lel {

// ------------------------------------------------------------------ bands

struct BandSpec {
    std::string name;
    double low = 0.0;   // Hz, inclusive
    double high = 0.0;  // Hz, exclusive
};

/// Delta 1-4, Theta 4-8, Alpha 8-13, Beta 13-30, Gamma 30-50 Hz.
inline std::vector<BandSpec> default_bands()
{
    return {{"delta", 1.0, 4.0}, {"theta", 4.0, 8.0}, {"alpha", 8.0, 13.0}, {"beta", 13.0, 30.0}, {"gamma", 30.0, 50.0}};
}

/// Half-open bin range [lo, hi) of the real half-spectrum.
struct BinRange {
    std::size_t lo = 0;
    std::size_t hi = 0;
    std::size_t width() const { return hi - lo; }
    bool operator==(const BinRange&) const = default;
};

class BandTooNarrow : public ContractError {
public:
    using ContractError::ContractError;
};

/// Bin k sits at k*fs/T Hz and belongs to the band when low <= f_k < high.
inline BinRange make_band_bins(const BandSpec& band, std::size_t samples, double fs)
{
    if (samples < 2) throw ContractError("make_band_bins: need at least 2 samples");
    if (!(fs > 0.0)) throw ContractError("make_band_bins: sampling rate must be positive");
    if (!(band.low >= 0.0 && band.low < band.high && band.high <= fs / 2.0))
        throw ContractError("band '" + band.name + "' [" + std::to_string(band.low) + ", " + std::to_string(band.high) +
                            ") is not valid for fs = " + std::to_string(fs));
    // Scale by T/fs; the small slack absorbs rounding of exactly aligned edges.
    const double res = static_cast<double>(samples) / fs;
    auto edge = [&](double f) {
        const double x = f * res;
        const double r = std::round(x);
        return static_cast<std::size_t>(std::abs(x - r) < 1e-9 ? r : std::ceil(x));
    };
    BinRange b{edge(band.low), edge(band.high)};
    b.hi = std::min(b.hi, fft::half_size(samples));
    if (b.lo >= b.hi)
        throw BandTooNarrow("band '" + band.name + "' contains no DFT bin at T = " + std::to_string(samples) +
                            ", fs = " + std::to_string(fs));
    return b;
}

inline std::vector<BinRange> make_all_band_bins(const std::vector<BandSpec>& bands, std::size_t samples, double fs)
{
    std::vector<BinRange> out;
    for (const auto& b : bands) out.push_back(make_band_bins(b, samples, fs));
    return out;
}

/// Throws when two ranges share a bin.
inline void require_disjoint(const std::vector<BinRange>& bins)
{
    for (std::size_t i = 0; i < bins.size(); ++i)
        for (std::size_t j = i + 1; j < bins.size(); ++j)
            if (bins[i].lo < bins[j].hi && bins[j].lo < bins[i].hi)
                throw ContractError("band bin ranges " + std::to_string(i) + " and " + std::to_string(j) + " overlap");
}

// ------------------------------------------------------------------ records

/// One labeled multichannel window. samples is [C x T].
struct Recording {
    Tensor<double> samples;
    double sampling_rate = 0.0;
    std::string subject_id;
    std::string trial_id;
    int label = 0;

    std::size_t channels() const { return samples.dim(0); }
    std::size_t length() const { return samples.dim(1); }
};

struct RecordInfo {
    std::string subject_id;
    std::string trial_id;
    int label = 0;
};

/// A set of equally shaped windows: data is [N x C x T]. Several records may
/// share a trial id (windows cut from the same trial).
struct TrialSet {
    Tensor<double> data;
    std::vector<RecordInfo> records;
    double sampling_rate = 0.0;
    int classes = 0;

    std::size_t size() const { return records.size(); }
    std::size_t channels() const { return data.dim(1); }
    std::size_t samples() const { return data.dim(2); }

    void validate() const
    {
        if (data.rank() != 3) throw ContractError("trial set data must be [N x C x T]");
        if (data.dim(0) != records.size()) throw ContractError("trial set: record count does not match data");
        if (channels() < 1) throw ContractError("trial set: need C >= 1");
        if (samples() < 2) throw ContractError("trial set: need T >= 2");
        if (!(sampling_rate > 0.0)) throw ContractError("trial set: sampling rate must be positive");
        if (classes < 1) throw ContractError("trial set: need at least one class");
        for (const auto& r : records)
            if (r.label < 0 || r.label >= classes)
                throw ContractError("trial set: label " + std::to_string(r.label) + " outside [0, " +
                                    std::to_string(classes) + ")");
    }

    Recording recording(std::size_t i) const
    {
        const std::size_t C = channels(), T = samples();
        Tensor<double> s({C, T});
        std::copy_n(data.data.begin() + static_cast<std::ptrdiff_t>(i * C * T), C * T, s.data.begin());
        return {std::move(s), sampling_rate, records[i].subject_id, records[i].trial_id, records[i].label};
    }
};

/// Batch of windows converted to the compute precision.
template <class T>
struct Batch {
    Tensor<T> data;  // [B x C x T]
    std::vector<int> labels;
};

template <class T>
Batch<T> gather(const TrialSet& set, const std::vector<std::size_t>& idx)
{
    const std::size_t C = set.channels(), S = set.samples();
    Batch<T> b{Tensor<T>({idx.size(), C, S}), {}};
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const double* src = set.data.data.data() + idx[i] * C * S;
        for (std::size_t k = 0; k < C * S; ++k) b.data[i * C * S + k] = static_cast<T>(src[k]);
        b.labels.push_back(set.records[idx[i]].label);
    }
    return b;
}

// ------------------------------------------------------------------ splitting

using TrialKey = std::pair<std::string, std::string>;  // (subject, trial)

struct SplitRatios {
    double train = 0.6;
    double val = 0.1;
    double test = 0.3;
};

struct SplitAssignment {
    std::set<TrialKey> train;
    std::set<TrialKey> val;
    std::set<TrialKey> test;
    SplitRatios ratios;
    std::uint64_t seed = 0;

    bool operator==(const SplitAssignment& o) const
    {
        return train == o.train && val == o.val && test == o.test;
    }
};

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

namespace detail {
inline std::uint64_t fnv1a(const std::string& s)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}
} // namespace detail

/// Trial-level (per-subject, label-stratified) 60/10/30 style partition.
/// All windows sharing a (subject, trial) key land in one split.
inline SplitAssignment split_trials(const TrialSet& set, SplitRatios ratios, std::uint64_t seed)
{
    if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
        std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
        throw ContractError("split ratios must be nonnegative and sum to 1");

    // subject -> trial -> label
    std::map<std::string, std::map<std::string, int>> subjects;
    for (const auto& r : set.records) {
        auto [it, inserted] = subjects[r.subject_id].emplace(r.trial_id, r.label);
        if (!inserted && it->second != r.label)
            throw ContractError("trial '" + r.trial_id + "' of subject '" + r.subject_id +
                                "' has windows with different labels");
    }

    SplitAssignment out;
    out.ratios = ratios;
    out.seed = seed;
    for (const auto& [subject, trials] : subjects) {
        const std::size_t n = trials.size();
        std::map<int, std::vector<std::string>> by_label;
        for (const auto& [trial, label] : trials) by_label[label].push_back(trial);

        if (n < static_cast<std::size_t>(set.classes)) {
            std::ostringstream os;
            os << "subject '" << subject << "' has " << n << " trials for " << set.classes
               << " classes; classes without trials:";
            for (int k = 0; k < set.classes; ++k)
                if (!by_label.count(k)) os << ' ' << k;
            throw ContractError(os.str());
        }
        if (n < 10)
            throw ContractError("subject '" + subject + "' has " + std::to_string(n) +
                                " trials; at least 10 are needed for a trial-wise split");

        Rng rng = Rng::derive(seed, detail::fnv1a(subject));
        // Stratified interleave: trial j of a class with m trials sits at
        // (j + 0.5) / m, so every prefix holds each class in proportion.
        struct Slot {
            double pos;
            int label;
            std::string trial;
        };
        std::vector<Slot> order;
        for (auto& [label, list] : by_label) {
            rng.shuffle(list.begin(), list.end());
            for (std::size_t j = 0; j < list.size(); ++j)
                order.push_back({(static_cast<double>(j) + 0.5) / static_cast<double>(list.size()), label, list[j]});
        }
        std::sort(order.begin(), order.end(), [](const Slot& a, const Slot& b) {
            if (a.pos != b.pos) return a.pos < b.pos;
            return a.label < b.label;
        });

        const auto n_train = static_cast<std::size_t>(std::llround(ratios.train * static_cast<double>(n)));
        const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(ratios.val * static_cast<double>(n))));
        for (std::size_t i = 0; i < n; ++i) {
            TrialKey key{subject, order[i].trial};
            if (i < n_train)
                out.train.insert(key);
            else if (i < n_train + n_val)
                out.val.insert(key);
            else
                out.test.insert(key);
        }
    }
    return out;
}

/// Rejects assignments where a trial sits in more than one split or a trial
/// of the set is not assigned at all.
inline void validate_split(const SplitAssignment& s, const TrialSet& set)
{
    auto check = [](const std::set<TrialKey>& a, const std::set<TrialKey>& b, const char* na, const char* nb) {
        for (const auto& k : a)
            if (b.count(k))
                throw ContractError("trial '" + k.second + "' of subject '" + k.first + "' appears in both " + na +
                                    " and " + nb + " splits");
    };
    check(s.train, s.val, "train", "val");
    check(s.train, s.test, "train", "test");
    check(s.val, s.test, "val", "test");
    for (const auto& r : set.records) {
        TrialKey k{r.subject_id, r.trial_id};
        if (!s.train.count(k) && !s.val.count(k) && !s.test.count(k))
            throw ContractError("trial '" + r.trial_id + "' of subject '" + r.subject_id + "' is not assigned");
    }
}

/// Window indices per split, in record order.
inline SplitIndices assign_windows(const SplitAssignment& s, const TrialSet& set)
{
    validate_split(s, set);
    SplitIndices out;
    for (std::size_t i = 0; i < set.records.size(); ++i) {
        TrialKey k{set.records[i].subject_id, set.records[i].trial_id};
        if (s.train.count(k))
            out.train.push_back(i);
        else if (s.val.count(k))
            out.val.push_back(i);
        else
            out.test.push_back(i);
    }
    return out;
}

/// Leakage audit over window indices: no evaluation window may come from a
/// trial that also contributes a training window.
inline void audit_no_leakage(const SplitIndices& idx, const TrialSet& set)
{
    std::set<TrialKey> train;
    for (auto i : idx.train) train.insert({set.records[i].subject_id, set.records[i].trial_id});
    for (const auto* eval : {&idx.val, &idx.test})
        for (auto i : *eval) {
            const auto& r = set.records[i];
            if (train.count({r.subject_id, r.trial_id}))
                throw ContractError("leakage: window " + std::to_string(i) + " of trial '" + r.trial_id +
                                    "' is in an evaluation split and its trial is in train");
        }
}

// ------------------------------------------------------------------ synthetic EEG

struct SynthSpec {
    int classes = 5;
    std::size_t channels = 8;
    std::size_t samples = 512;
    double sampling_rate = 200.0;
    double boost_db = 12.0;
    double noise_exponent = 1.0;
    std::size_t trials_per_class = 200;
    std::size_t subjects = 1;
    std::uint64_t seed = 1;

    void validate() const
    {
        const auto nb = default_bands().size();
        if (classes < 1) throw ParameterError("synth: classes must be >= 1");
        if (channels < 1) throw ParameterError("synth: channels must be >= 1");
        if (samples < 2) throw ParameterError("synth: samples must be >= 2");
        if (static_cast<std::size_t>(classes) > nb * channels)
            throw ParameterError("synth: " + std::to_string(classes) + " classes exceed the " +
                                std::to_string(nb * channels) +
                                " distinct (band, channel-group) signatures available with " +
                                std::to_string(channels) + " channels");
        if (!(sampling_rate > 2.0 * default_bands().back().high))
            throw ParameterError("synth: sampling rate must exceed twice the highest band edge (100 Hz)");
        if (!(boost_db >= 0.0)) throw ParameterError("synth: boost_db must be >= 0");
        if (trials_per_class < 1 || subjects < 1) throw ParameterError("synth: need trials and subjects");
        for (const auto& b : default_bands()) (void)make_band_bins(b, samples, sampling_rate);
    }

    std::size_t groups() const
    {
        const auto nb = default_bands().size();
        return (static_cast<std::size_t>(classes) + nb - 1) / nb;
    }
    /// Class k boosts band (k mod 5) on channel group (k / 5).
    std::size_t band_of(int k) const { return static_cast<std::size_t>(k) % default_bands().size(); }
    std::size_t group_of(int k) const { return static_cast<std::size_t>(k) / default_bands().size(); }
    std::pair<std::size_t, std::size_t> group_channels(std::size_t g) const
    {
        const std::size_t G = groups();
        return {g * channels / G, (g + 1) * channels / G};
    }
};

namespace detail {

/// Pink-noise amplitude per bin and the scale that gives unit variance.
inline std::vector<double> pink_amplitudes(const SynthSpec& s)
{
    const std::size_t F = fft::half_size(s.samples);
    std::vector<double> a(F, 0.0);
    double var = 0.0;
    const double n = static_cast<double>(s.samples);
    for (std::size_t k = 1; k < F; ++k) {
        const double f = static_cast<double>(k) * s.sampling_rate / n;
        a[k] = std::pow(f, -s.noise_exponent / 2.0);
        const bool nyq = s.samples % 2 == 0 && k == F - 1;
        var += (nyq ? 1.0 : 4.0) * a[k] * a[k];
    }
    const double scale = 1.0 / std::sqrt(var / (n * n));
    for (auto& v : a) v *= scale;
    return a;
}

} // namespace detail

/// Expected noise-only energy (sum |X_k|^2) of each default band.
inline std::vector<double> expected_band_energy(const SynthSpec& s)
{
    const auto amp = detail::pink_amplitudes(s);
    const std::size_t F = fft::half_size(s.samples);
    std::vector<double> e;
    for (const auto& band : default_bands()) {
        const auto r = make_band_bins(band, s.samples, s.sampling_rate);
        double acc = 0.0;
        for (std::size_t k = r.lo; k < r.hi; ++k) {
            const bool nyq = s.samples % 2 == 0 && k == F - 1;
            acc += (nyq ? 1.0 : 2.0) * amp[k] * amp[k];
        }
        e.push_back(acc);
    }
    return e;
}

/// Pink noise per channel plus, on the class's channel group, a bin-aligned
/// sinusoid inside the class's band carrying boost_db extra band power.
inline TrialSet synth_dataset(const SynthSpec& spec)
{
    spec.validate();
    const std::size_t C = spec.channels, S = spec.samples, F = fft::half_size(S);
    const std::size_t per_subject = spec.trials_per_class * static_cast<std::size_t>(spec.classes);
    const std::size_t N = per_subject * spec.subjects;
    const auto amp = detail::pink_amplitudes(spec);
    const auto base = expected_band_energy(spec);
    const auto bins = make_all_band_bins(default_bands(), S, spec.sampling_rate);
    const double gain = std::pow(10.0, spec.boost_db / 10.0) - 1.0;

    TrialSet set;
    set.data = Tensor<double>({N, C, S});
    set.sampling_rate = spec.sampling_rate;
    set.classes = spec.classes;
    std::vector<double> spec_buf(2 * F), row(S);
    std::size_t n = 0;
    for (std::size_t subj = 0; subj < spec.subjects; ++subj)
        for (std::size_t j = 0; j < spec.trials_per_class; ++j)
            for (int k = 0; k < spec.classes; ++k, ++n) {
                Rng rng = Rng::derive(spec.seed, n);
                const std::size_t band = spec.band_of(k);
                const auto [c0, c1] = spec.group_channels(spec.group_of(k));
                // Interior bin of the band so the tone leaks nowhere else.
                const BinRange r = bins[band];
                const std::size_t lo = r.width() > 2 ? r.lo + 1 : r.lo;
                const std::size_t hi = r.width() > 2 ? r.hi - 1 : r.hi;
                const std::size_t tone_bin = lo + rng.below(hi - lo);
                const double tone_amp = 2.0 / static_cast<double>(S) * std::sqrt(gain * base[band]);
                for (std::size_t c = 0; c < C; ++c) {
                    for (std::size_t b = 0; b < F; ++b) {
                        const double re = rng.normal(), im = rng.normal();
                        const bool real_only = b == 0 || (S % 2 == 0 && b == F - 1);
                        spec_buf[2 * b] = amp[b] * re;
                        spec_buf[2 * b + 1] = real_only ? 0.0 : amp[b] * im;
                    }
                    fft::irfft_row(spec_buf.data(), S, row.data());
                    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
                    if (c >= c0 && c < c1 && gain > 0.0)
                        for (std::size_t t = 0; t < S; ++t)
                            row[t] += tone_amp * std::cos(2.0 * std::numbers::pi * static_cast<double>(tone_bin * t) /
                                                              static_cast<double>(S) + phase);
                    std::copy(row.begin(), row.end(), set.data.data.begin() + static_cast<std::ptrdiff_t>((n * C + c) * S));
                }
                set.records.push_back({"s" + std::to_string(subj), "t" + std::to_string(n), k});
            }
    return set;
}

/// Band energies of one [C x T] window: out[c][b] = sum_k |X_c[k]|^2.
inline std::vector<std::vector<double>> window_band_energy(const double* window, std::size_t C, std::size_t S,
                                                           const std::vector<BinRange>& bins)
{
    const std::size_t F = fft::half_size(S);
    std::vector<double> spec(2 * F);
    std::vector<std::vector<double>> e(C, std::vector<double>(bins.size(), 0.0));
    for (std::size_t c = 0; c < C; ++c) {
        fft::rfft_row(window + c * S, S, spec.data());
        for (std::size_t b = 0; b < bins.size(); ++b)
            for (std::size_t k = bins[b].lo; k < bins[b].hi; ++k)
                e[c][b] += spec[2 * k] * spec[2 * k] + spec[2 * k + 1] * spec[2 * k + 1];
    }
    return e;
}

/// Band-power oracle: for every class signature, the group's band energy
/// relative to the expected noise energy; predict the largest.
inline int band_power_oracle_predict(const double* window, const SynthSpec& spec)
{
    const auto bins = make_all_band_bins(default_bands(), spec.samples, spec.sampling_rate);
    const auto base = expected_band_energy(spec);
    const auto e = window_band_energy(window, spec.channels, spec.samples, bins);
    int best = 0;
    double best_score = -1.0;
    for (int k = 0; k < spec.classes; ++k) {
        const auto [c0, c1] = spec.group_channels(spec.group_of(k));
        double score = 0.0;
        for (std::size_t c = c0; c < c1; ++c) score += e[c][spec.band_of(k)] / base[spec.band_of(k)];
        score /= static_cast<double>(c1 - c0);
        if (score > best_score) {
            best_score = score;
            best = k;
        }
    }
    return best;
}

inline double band_power_oracle_accuracy(const TrialSet& set, const SynthSpec& spec)
{
    if (set.size() == 0) return 0.0;
    const std::size_t stride = set.channels() * set.samples();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < set.size(); ++i)
        if (band_power_oracle_predict(set.data.data.data() + i * stride, spec) == set.records[i].label) ++hits;
    return static_cast<double>(hits) / static_cast<double>(set.size());
}

} // namespace lel
