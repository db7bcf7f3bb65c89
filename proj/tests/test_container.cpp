#include <gtest/gtest.h>

#include <sstream>

#include <lel/container.hpp>

using namespace lel;

namespace {

TrialSet small_set()
{
    SynthSpec spec;
    spec.channels = 2;
    spec.samples = 128;
    spec.classes = 3;
    spec.trials_per_class = 2;
    return synth_dataset(spec);
}

std::string bytes_of(const TrialSet& set, io::DType d)
{
    std::ostringstream os;
    io::write_dataset(os, set, d);
    return os.str();
}

} // namespace

TEST(Container, HeaderLayout)
{
    Tensor<double> t({2, 3}, 1.0);
    std::ostringstream os;
    io::write_container(os, t, io::DType::f64, "k\tv\n");
    const auto s = os.str();
    ASSERT_EQ(s.size(), 4u + 2 + 1 + 1 + 2 * 8 + 6 * 8 + 8 + 4);
    EXPECT_EQ(s.substr(0, 4), "LELD");
    EXPECT_EQ(s[4], 1);
    EXPECT_EQ(s[5], 0);
    EXPECT_EQ(s[6], 2);
    EXPECT_EQ(s[7], 2);
    EXPECT_EQ(s[8], 2);
    EXPECT_EQ(s.substr(s.size() - 4), "k\tv\n");
}

TEST(Container, RoundTripF64IsExact)
{
    const auto set = small_set();
    std::istringstream is(bytes_of(set, io::DType::f64));
    const auto back = io::read_dataset(is);
    EXPECT_EQ(back.data.shape, set.data.shape);
    EXPECT_EQ(back.data.data, set.data.data);
    EXPECT_EQ(back.sampling_rate, set.sampling_rate);
    EXPECT_EQ(back.classes, set.classes);
    ASSERT_EQ(back.records.size(), set.records.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
        EXPECT_EQ(back.records[i].subject_id, set.records[i].subject_id);
        EXPECT_EQ(back.records[i].trial_id, set.records[i].trial_id);
        EXPECT_EQ(back.records[i].label, set.records[i].label);
    }
}

TEST(Container, RoundTripF32RoundsToFloat)
{
    const auto set = small_set();
    std::istringstream is(bytes_of(set, io::DType::f32));
    const auto back = io::read_dataset(is);
    for (std::size_t i = 0; i < set.data.size(); ++i)
        EXPECT_EQ(back.data[i], static_cast<double>(static_cast<float>(set.data[i])));
}

TEST(Container, WritesAreByteIdentical)
{
    const auto set = small_set();
    EXPECT_EQ(bytes_of(set, io::DType::f32), bytes_of(set, io::DType::f32));
}

TEST(Container, RejectsCorruptHeaders)
{
    const auto good = bytes_of(small_set(), io::DType::f32);
    auto expect_format_error = [](std::string bytes) {
        std::istringstream is(bytes);
        EXPECT_THROW(io::read_dataset(is), FormatError);
    };
    auto magic = good;
    magic[0] = 'X';
    expect_format_error(magic);
    auto version = good;
    version[4] = 2;
    expect_format_error(version);
    auto dtype = good;
    dtype[6] = 7;
    expect_format_error(dtype);
    expect_format_error(good.substr(0, 3));
    expect_format_error(good.substr(0, good.size() / 2));
    expect_format_error(good.substr(0, good.size() - 1));
}

TEST(Container, RejectsUnknownMetadataAndBadLabels)
{
    auto set = small_set();
    std::ostringstream os;
    io::write_container(os, set.data, io::DType::f32, io::dataset_metadata(set) + "bogus\t1\n");
    std::istringstream is(os.str());
    EXPECT_THROW(io::read_dataset(is), FormatError);

    set.records[0].label = 9;
    std::ostringstream os2;
    EXPECT_THROW(io::write_dataset(os2, set), ContractError);
}

TEST(Container, MissingFileIsIoError)
{
    EXPECT_THROW(io::load_dataset("/nonexistent/dir/x.leld"), IoError);
}
