#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "ddcn/arch.hpp"

using namespace ddcn;

namespace {

constexpr std::uint64_t conv(std::uint64_t in, std::uint64_t out, std::uint64_t k) { return out * in * k * k + out; }
constexpr std::uint64_t fc(std::uint64_t in, std::uint64_t out) { return in * out + out; }

// Counted by hand, layer by layer.
constexpr std::uint64_t kOurs = conv(3, 64, 3) + conv(64, 64, 3) + conv(64, 128, 3) + conv(128, 128, 3) +
                                conv(128, 256, 3) + 2 * conv(256, 256, 3) + conv(256, 512, 3) +
                                2 * conv(512, 512, 3) + 3 * conv(512, 512, 3) + conv(512, 512, 7) +
                                conv(512, 512, 1) + conv(512, 1, 1);
constexpr std::uint64_t kVgg = conv(3, 64, 3) + conv(64, 64, 3) + conv(64, 128, 3) + conv(128, 128, 3) +
                               conv(128, 256, 3) + 2 * conv(256, 256, 3) + conv(256, 512, 3) +
                               2 * conv(512, 512, 3) + 3 * conv(512, 512, 3) + fc(512 * 10 * 7, 4096) +
                               fc(4096, 4096) + fc(4096, 80 * 60);
constexpr std::uint64_t kFine = conv(3, 63, 9) + conv(64, 64, 5) + conv(64, 1, 5);

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ArchSpec full_arch(double scale = 1.0) {
  return {{coarse_dilated_spec(scale), coarse_vgg_spec(scale), fine_spec(scale)}, scale};
}

}  // namespace

TEST(Arch, TotalsMatchHandCount) {
  const auto r = count_parameters(full_arch());
  EXPECT_EQ(r.stack_totals.at(kStackOurs), kOurs);
  EXPECT_EQ(r.stack_totals.at(kStackVgg), kVgg);
  EXPECT_EQ(r.stack_totals.at(kStackFine), kFine);
  EXPECT_EQ(kOurs, 27823425u);
  EXPECT_EQ(kVgg, 197966336u);
  ASSERT_TRUE(r.ratio_vgg_over_ours);
  EXPECT_GE(*r.ratio_vgg_over_ours, 7.0);
  EXPECT_GE(static_cast<double>(kVgg + kFine) / static_cast<double>(kOurs + kFine), 7.0);
}

TEST(Arch, PerLayerCounts) {
  const auto r = count_parameters(ArchSpec{{coarse_dilated_spec()}, 1.0});
  const std::uint64_t expected[] = {38720, 221440, 1475328, 5899776, 7079424, 12845568, 262656, 513};
  ASSERT_EQ(r.per_layer.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(r.per_layer[i].params, expected[i]) << r.per_layer[i].layer;
}

TEST(Arch, DilatedStackKeepsFullResolution) {
  const auto g = geometry_report(coarse_dilated_spec(), Size2{80, 60});
  const std::size_t rf[] = {5, 13, 31, 43, 61, 85, 85, 85};
  ASSERT_EQ(g.size(), 8u);
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_EQ(g[i].size, (Size2{80, 60})) << g[i].name;
    EXPECT_EQ(g[i].out, (Size2{80, 60})) << g[i].name;
    ASSERT_TRUE(g[i].rf);
    EXPECT_EQ(*g[i].rf, (ReceptiveField{rf[i], rf[i]})) << g[i].name;
  }
  for (const auto& lg : geometry_report(fine_spec(), Size2{80, 60})) EXPECT_EQ(lg.out, (Size2{80, 60}));
}

TEST(Arch, VggShrinksThenReshapes) {
  const auto g = geometry_report(coarse_vgg_spec(), Size2{160, 120});
  const Size2 outs[] = {{80, 60}, {40, 30}, {20, 15}, {10, 7}, {10, 7}, {1, 1}, {1, 1}, {1, 1}, {80, 60}};
  ASSERT_EQ(g.size(), 9u);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g[i].out, outs[i]) << g[i].name;
  EXPECT_FALSE(g.back().rf);
  const auto up = coarse_vgg_spec(1.0, {160, 120}, true);
  EXPECT_EQ(geometry_report(up, up.input).back().out, (Size2{80, 60}));
}

TEST(Arch, WidthScale) {
  const auto s = coarse_dilated_spec(0.125);
  EXPECT_EQ(s.layers[0].out_channels, 8u);
  EXPECT_EQ(s.layers[5].out_channels, 64u);
  EXPECT_EQ(s.layers.back().out_channels, 1u);
  EXPECT_EQ(fine_spec(0.125).layers[0].out_channels, 8u);  // 63 / 8 rounds to 8
  EXPECT_EQ(scale_channels(63, 0.5, "x"), 32u);
  EXPECT_THROW(scale_channels(64, 0.0, "x"), ConfigError);
  EXPECT_THROW(scale_channels(64, 1.5, "x"), ConfigError);
  EXPECT_THROW(scale_channels(64, 0.001, "x"), ConfigError);
  EXPECT_LT(count_parameters(ArchSpec{{s}, 0.125}).total(), kOurs / 32);
}

TEST(Arch, TableRoundTrip) {
  for (double scale : {1.0, 0.125, 0.3}) {
    const auto arch = full_arch(scale);
    const auto text = render_table(arch);
    EXPECT_EQ(parse_table(text), arch);
    EXPECT_EQ(render_table(parse_table(text)), text);
  }
}

TEST(Arch, TableMatchesGolden) {
  EXPECT_EQ(render_table(full_arch()), read_text(std::string(DDCN_GOLDEN_DIR) + "/table1.txt"));
}

TEST(Arch, FingerprintSeparatesArchitectures) {
  EXPECT_EQ(fingerprint(full_arch()), fingerprint(full_arch()));
  EXPECT_NE(fingerprint(full_arch()), fingerprint(full_arch(0.5)));
  auto a = full_arch();
  a.stacks[0].layers[2].dilation = 2;
  EXPECT_NE(fingerprint(a), fingerprint(full_arch()));
}

TEST(Arch, Errors) {
  EXPECT_THROW(parse_size2("80"), FormatError);
  EXPECT_THROW(parse_size2("80x"), FormatError);
  EXPECT_THROW(parse_size2("8ax60"), FormatError);
  EXPECT_EQ(parse_size2("80x60"), (Size2{80, 60}));
  EXPECT_THROW(parse_table("nonsense"), FormatError);

  auto s = coarse_dilated_spec();
  s.layers[3].in_channels = 7;
  EXPECT_THROW(validate(s), ConfigError);
  s = coarse_dilated_spec();
  s.layers[0].kernel = {2, 2};
  EXPECT_THROW(validate(s), ConfigError);
  EXPECT_THROW(geometry_report(coarse_vgg_spec(), Size2{8, 8}), GeometryError);
  EXPECT_THROW(full_arch().stack("nope"), ConfigError);

  auto text = render_table(ArchSpec{{coarse_dilated_spec()}, 1.0});
  text.replace(text.find("80x60 |"), 5, "40x30");
  EXPECT_THROW(parse_table(text), FormatError);
}
