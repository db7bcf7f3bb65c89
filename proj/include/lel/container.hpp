#pragma once

// LELD binary container:
//   "LELD" | u16 version=1 | u8 dtype (1=f32, 2=f64) | u8 rank | rank x u64 dims
//   | little-endian payload | u64 metadata length | UTF-8 metadata
// Metadata is line oriented, fields separated by tabs.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "data_model.hpp"
#include "error.hpp"
#include "tensor.hpp"

namespace lel::io {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

inline constexpr char kMagic[4] = {'L', 'E', 'L', 'D'};
inline constexpr std::uint16_t kVersion = 1;

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

inline DType parse_dtype(const std::string& s)
{
    if (s == "f32") return DType::f32;
    if (s == "f64") return DType::f64;
    throw FormatError("unknown dtype '" + s + "'");
}

namespace detail {

template <class U>
void put_le(std::ostream& os, U v)
{
    unsigned char b[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& is, const char* what)
{
    unsigned char b[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw FormatError(std::string("LELD: truncated ") + what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
    return v;
}

} // namespace detail

struct Container {
    Tensor<double> tensor;
    DType dtype = DType::f32;
    std::string metadata;
};

inline void write_container(std::ostream& os, const Tensor<double>& t, DType dtype, const std::string& metadata)
{
    if (t.rank() > 255) throw ContractError("LELD: rank too large");
    os.write(kMagic, 4);
    detail::put_le<std::uint16_t>(os, kVersion);
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape) detail::put_le<std::uint64_t>(os, d);
    for (double v : t.data) {
        if (dtype == DType::f32)
            detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        else
            detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
    detail::put_le<std::uint64_t>(os, metadata.size());
    os.write(metadata.data(), static_cast<std::streamsize>(metadata.size()));
    if (!os) throw IoError("LELD: write failed");
}

inline Container read_container(std::istream& is)
{
    char magic[4];
    if (!is.read(magic, 4)) throw FormatError("LELD: file too short for magic bytes");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("LELD: bad magic bytes (not a LELD container)");
    const auto version = detail::get_le<std::uint16_t>(is, "version");
    if (version != kVersion)
        throw FormatError("LELD: unsupported version " + std::to_string(version) + " (expected 1)");
    const auto code = detail::get_le<std::uint8_t>(is, "dtype");
    if (code != 1 && code != 2) throw FormatError("LELD: unknown dtype code " + std::to_string(code));
    Container c;
    c.dtype = static_cast<DType>(code);
    const auto rank = detail::get_le<std::uint8_t>(is, "rank");
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_le<std::uint64_t>(is, "dims");
    c.tensor = Tensor<double>(shape);
    for (auto& v : c.tensor.data) {
        if (c.dtype == DType::f32)
            v = static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(is, "payload")));
        else
            v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is, "payload"));
    }
    const auto len = detail::get_le<std::uint64_t>(is, "metadata length");
    c.metadata.resize(len);
    if (len && !is.read(c.metadata.data(), static_cast<std::streamsize>(len))) throw FormatError("LELD: truncated metadata");
    return c;
}

inline std::vector<std::vector<std::string>> split_lines(const std::string& text)
{
    std::vector<std::vector<std::string>> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t pos = 0;
        while (true) {
            auto tab = line.find('\t', pos);
            fields.push_back(line.substr(pos, tab == std::string::npos ? std::string::npos : tab - pos));
            if (tab == std::string::npos) break;
            pos = tab + 1;
        }
        out.push_back(std::move(fields));
    }
    return out;
}

// ------------------------------------------------------------------ datasets

inline std::string dataset_metadata(const TrialSet& set)
{
    std::ostringstream os;
    os.precision(17);
    os << "sampling_rate\t" << set.sampling_rate << '\n';
    os << "classes\t" << set.classes << '\n';
    for (const auto& r : set.records) {
        if (r.subject_id.find_first_of("\t\n") != std::string::npos || r.trial_id.find_first_of("\t\n") != std::string::npos)
            throw ContractError("subject/trial ids may not contain tabs or newlines");
        os << "record\t" << r.subject_id << '\t' << r.trial_id << '\t' << r.label << '\n';
    }
    return os.str();
}

inline void write_dataset(std::ostream& os, const TrialSet& set, DType dtype = DType::f32)
{
    set.validate();
    write_container(os, set.data, dtype, dataset_metadata(set));
}

inline TrialSet read_dataset(std::istream& is)
{
    Container c = read_container(is);
    TrialSet set;
    set.data = std::move(c.tensor);
    for (const auto& f : split_lines(c.metadata)) {
        if (f[0] == "sampling_rate" && f.size() == 2)
            set.sampling_rate = std::stod(f[1]);
        else if (f[0] == "classes" && f.size() == 2)
            set.classes = std::stoi(f[1]);
        else if (f[0] == "record" && f.size() == 4)
            set.records.push_back({f[1], f[2], std::stoi(f[3])});
        else
            throw FormatError("LELD dataset: unrecognized metadata line starting with '" + f[0] + "'");
    }
    set.validate();
    return set;
}

inline void save_dataset(const std::string& path, const TrialSet& set, DType dtype = DType::f32)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    write_dataset(os, set, dtype);
}

inline TrialSet load_dataset(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    return read_dataset(is);
}

} // namespace lel::io
