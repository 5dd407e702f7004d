#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "syndist/io.hpp"
#include "syndist/layers.hpp"

using namespace syndist;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("syndist_io_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST(Png, RoundTripsAtEightBits) {
    for (int ch : {1, 3}) {
        Image img(5, 7, ch);
        for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>((i * 37) % 256) / 255.0;
        const Image back = decode_png(encode_png(img));
        ASSERT_EQ(back.height(), 5);
        ASSERT_EQ(back.width(), 7);
        ASSERT_EQ(back.channels(), ch);
        for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 1e-12);
    }
}

TEST(Png, QuantizesAndClamps) {
    Image img(1, 3, 1);
    img[0] = -0.5;
    img[1] = 0.5;
    img[2] = 1.5;
    const Image back = decode_png(encode_png(img));
    EXPECT_EQ(back[0], 0.0);
    EXPECT_NEAR(back[1], 128.0 / 255.0, 1e-12);
    EXPECT_EQ(back[2], 1.0);
    EXPECT_THROW(encode_png(Image(2, 2, 2)), Error);
    EXPECT_THROW(decode_png("not a png"), Error);
}

TEST(Pfm, RoundTripsAtFloatPrecision) {
    DistanceMap d(4, 6);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.1 + 3.7 * static_cast<double>(i);
    const DistanceMap back = decode_pfm(encode_pfm(d));
    ASSERT_EQ(back.height(), 4);
    ASSERT_EQ(back.width(), 6);
    for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(back[i], static_cast<double>(static_cast<float>(d[i])));
    Image rgb(2, 2, 3, 0.25);
    EXPECT_EQ(decode_pfm<Image>(encode_pfm(rgb)).channels(), 3);
}

TEST(Pfm, StoresRowsBottomUp) {
    DistanceMap d(2, 1);
    d(0, 0) = 1.0;
    d(1, 0) = 2.0;
    const std::string bytes = encode_pfm(d);
    const std::string header = "Pf\n1 2\n-1.0\n";
    ASSERT_EQ(bytes.substr(0, header.size()), header);
    float first = 0.0f;
    std::memcpy(&first, bytes.data() + header.size(), 4);
    EXPECT_EQ(first, 2.0f);
    EXPECT_THROW(decode_pfm("P6\n1 1\n255\n"), Error);
    EXPECT_THROW(decode_pfm(header), Error);
}

TEST(ParamBlob, AttentionRoundTrip) {
    const AttentionParams p = AttentionParams::random(3, 2, 4, 31);
    const fs::path path = scratch_dir("attn") / "attn.bin";
    write_blob(path, to_blob(p));
    const AttentionParams q = attention_from_blob(read_blob(path));
    EXPECT_EQ(q.k, 3);
    EXPECT_LT((q.w_query - p.w_query).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((q.w_value - p.w_value).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((q.col_embed - p.col_embed).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_EQ(q.row_embed.rows(), 3);
}

TEST(ParamBlob, PacRoundTripAndLayout) {
    PacParams p = PacParams::zeros(3, 2, 1);
    for (std::size_t i = 0; i < p.weights.size(); ++i) p.weights[i] = 0.5 * static_cast<double>(i);
    p.bias[0] = -1.25;
    p.sigma[0] = 0.75;
    const std::string bytes = encode_blob(to_blob(p));
    // little-endian header length, then the JSON header
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
    const auto header = nlohmann::json::parse(bytes.substr(8, len));
    EXPECT_EQ(header["tensors"][0]["name"], "weights");
    EXPECT_EQ(bytes.size(), 8 + len + 4 * (p.weights.size() + 2));
    const PacParams q = pac_from_blob(decode_blob(bytes));
    EXPECT_EQ(q.weights, p.weights);
    EXPECT_EQ(q.bias, p.bias);
    EXPECT_EQ(q.sigma, p.sigma);
    EXPECT_THROW(decode_blob(bytes.substr(0, bytes.size() - 3)), Error);
    EXPECT_THROW(attention_from_blob(decode_blob(bytes)), Error);
}

TEST(AtomicWrite, ReplacesWithoutLeavingTemporaries) {
    const fs::path dir = scratch_dir("atomic");
    const fs::path path = dir / "nested" / "out.txt";
    write_file_atomic(path, "first");
    write_file_atomic(path, "second");
    EXPECT_EQ(read_file(path), "second");
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir)) files += e.is_regular_file();
    EXPECT_EQ(files, 1u);
    EXPECT_THROW(read_file(dir / "missing"), Error);
}

TEST(Visualization, ColorizeAndStack) {
    DistanceMap d(2, 2);
    d[0] = 0;
    d[1] = 1;
    d[2] = 2;
    d[3] = 5;
    const Image c = colorize(d, 0.0, 2.0);
    EXPECT_EQ(c.channels(), 3);
    for (int k = 0; k < 3; ++k) EXPECT_EQ(c(1, 0, k), c(1, 1, k));  // clamped above
    const Image s = stack_panels({Image(2, 3, 1, 0.2), Image(4, 2, 3, 0.4)});
    EXPECT_EQ(s.height(), 8);
    EXPECT_EQ(s.width(), 3);
    EXPECT_EQ(s(0, 0, 2), 0.2);
    EXPECT_EQ(s(4, 1, 0), 0.4);
}
