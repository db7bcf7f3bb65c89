#pragma once

// Checkpoint directory:
//   weights.bin   LELD containers, one per named tensor, back to back
//   manifest.txt  name, shape, dtype, constraint, byte offset (tab separated)
//   model.txt     architecture (key = value)
//   config.txt    run config echo
//   metrics.txt   final metrics (key = value)
//   split.txt     split, train|val|test, subject, trial

#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "container.hpp"

namespace lel {

struct ManifestEntry {
    std::string name;
    Shape shape;
    io::DType dtype = io::DType::f32;
    std::string constraint;
    std::uint64_t offset = 0;
};

template <class T>
constexpr io::DType dtype_of()
{
    return std::is_same_v<T, double> ? io::DType::f64 : io::DType::f32;
}

inline std::string read_text(const std::filesystem::path& p)
{
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot open '" + p.string() + "'");
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text)
{
    std::ofstream os(p, std::ios::binary);
    if (!os) throw IoError("cannot write '" + p.string() + "'");
    os << text;
    if (!os) throw IoError("write failed for '" + p.string() + "'");
}

inline std::string split_text(const SplitAssignment& s)
{
    std::ostringstream os;
    for (const auto& [name, set] : {std::pair{"train", &s.train}, {"val", &s.val}, {"test", &s.test}})
        for (const auto& [subject, trial] : *set) os << name << '\t' << subject << '\t' << trial << '\n';
    return os.str();
}

inline SplitAssignment parse_split(const std::string& text)
{
    SplitAssignment s;
    for (const auto& f : io::split_lines(text)) {
        if (f.size() != 3) throw FormatError("split file: expected 'split<TAB>subject<TAB>trial'");
        auto& dst = f[0] == "train" ? s.train : f[0] == "val" ? s.val : f[0] == "test" ? s.test
                  : throw FormatError("split file: unknown split '" + f[0] + "'");
        dst.insert({f[1], f[2]});
    }
    return s;
}

template <class T>
void save_checkpoint(const std::string& dir, LelModel<T>& model, const std::string& config_echo = {},
                     const std::string& metrics = {}, const SplitAssignment* split = nullptr)
{
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory '" + dir + "': " + ec.message());
    std::ofstream bin(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!bin) throw IoError("cannot write '" + dir + "/weights.bin'");
    std::ostringstream manifest;
    manifest << "# name\tshape\tdtype\tconstraint\toffset\n";
    for (const auto& [name, p] : model.parameters()) {
        const auto offset = static_cast<std::uint64_t>(bin.tellp());
        io::write_container(bin, p->value().template cast<double>(), dtype_of<T>(), "name\t" + name + "\n");
        std::string dims;
        for (std::size_t i = 0; i < p->value().rank(); ++i) dims += (i ? "x" : "") + std::to_string(p->value().dim(i));
        manifest << name << '\t' << dims << '\t' << io::dtype_name(dtype_of<T>()) << '\t' << p->constraint.str() << '\t'
                 << offset << '\n';
    }
    bin.close();
    if (!bin) throw IoError("write failed for '" + dir + "/weights.bin'");
    write_text(fs::path(dir) / "manifest.txt", manifest.str());
    write_text(fs::path(dir) / "model.txt", model_config_text(model.config()));
    if (!config_echo.empty()) write_text(fs::path(dir) / "config.txt", config_echo);
    if (!metrics.empty()) write_text(fs::path(dir) / "metrics.txt", metrics);
    if (split) write_text(fs::path(dir) / "split.txt", split_text(*split));
}

inline std::vector<ManifestEntry> read_manifest(const std::string& dir)
{
    std::vector<ManifestEntry> out;
    for (const auto& f : io::split_lines(read_text(std::filesystem::path(dir) / "manifest.txt"))) {
        if (!f.empty() && !f[0].empty() && f[0][0] == '#') continue;
        if (f.size() != 5) throw FormatError("manifest: expected 5 tab-separated fields");
        ManifestEntry e;
        e.name = f[0];
        try {
            std::stringstream ds(f[1]);
            for (std::string d; std::getline(ds, d, 'x');) e.shape.push_back(std::stoull(d));
            e.offset = std::stoull(f[4]);
        } catch (const std::logic_error&) {
            throw FormatError("manifest: bad shape or offset for '" + e.name + "'");
        }
        e.dtype = io::parse_dtype(f[2]);
        e.constraint = f[3];
        out.push_back(std::move(e));
    }
    return out;
}

inline ModelConfig read_model_config(const std::string& dir)
{
    std::istringstream is(read_text(std::filesystem::path(dir) / "model.txt"));
    return parse_model_config(parse_key_values(is, dir + "/model.txt"));
}

inline bool has_split(const std::string& dir) { return std::filesystem::exists(std::filesystem::path(dir) / "split.txt"); }

inline SplitAssignment read_split(const std::string& dir)
{
    return parse_split(read_text(std::filesystem::path(dir) / "split.txt"));
}

/// Loads into precision T whatever dtype the weights were saved in. The
/// manifest must list exactly the model's parameters with matching shapes.
template <class T>
std::unique_ptr<LelModel<T>> load_checkpoint(const std::string& dir)
{
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("checkpoint directory '" + dir + "' not found");
    auto model = std::make_unique<LelModel<T>>(read_model_config(dir));
    const auto manifest = read_manifest(dir);
    auto params = model->parameters();
    if (manifest.size() != params.size())
        throw ContractError("checkpoint lists " + std::to_string(manifest.size()) + " tensors, model has " +
                            std::to_string(params.size()));
    std::ifstream bin(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!bin) throw IoError("cannot open '" + dir + "/weights.bin'");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = manifest[i];
        auto& [name, p] = params[i];
        if (e.name != name) throw ContractError("checkpoint tensor " + std::to_string(i) + " is '" + e.name + "', expected '" + name + "'");
        require_shape(e.shape, p->value().shape, name);
        if (e.constraint != p->constraint.str())
            throw ContractError(name + ": constraint '" + e.constraint + "' does not match model '" + p->constraint.str() + "'");
        bin.seekg(static_cast<std::streamoff>(e.offset));
        auto c = io::read_container(bin);
        if (c.metadata != "name\t" + name + "\n") throw FormatError("weights.bin: tensor at offset " + std::to_string(e.offset) + " is not '" + name + "'");
        require_shape(c.tensor.shape, p->value().shape, name);
        p->value() = c.tensor.template cast<T>();
    }
    // A zero-norm normalization gain has no direction; reset it to ones.
    for (auto& [name, p] : params) {
        if (!name.ends_with("/lgcn/gamma")) continue;
        double n = 0.0;
        for (auto v : p->value().data) n += static_cast<double>(v) * static_cast<double>(v);
        if (n == 0.0) std::fill(p->value().data.begin(), p->value().data.end(), T{1});
    }
    return model;
}

} // namespace lel
