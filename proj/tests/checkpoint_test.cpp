#include "ncprobe/checkpoint.hpp"

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace ncprobe {
namespace {

TEST(Checkpoint, RoundTripPreservesNetworkAndOutputs) {
  SeededRng rng(21);
  for (auto net : {build_mlp(3, 5, 4, 3, rng), build_conv(2, 3, {1, 8, 8}, 4, rng)}) {
    Shape bs{6};
    bs.insert(bs.end(), net.input_shape.begin(), net.input_shape.end());
    auto x = testing::random_tensor(rng, bs);
    forward(net, x, Mode::Train);  // move running stats off their defaults
    auto bytes = encode_checkpoint(net);
    auto back = decode_checkpoint(bytes);
    EXPECT_EQ(back, net);
    EXPECT_EQ(forward_eval(back, x).logits, forward_eval(net, x).logits);
    EXPECT_EQ(encode_checkpoint(back), bytes);
  }
}

TEST(Checkpoint, HeaderLayout) {
  SeededRng rng(0x0102030405060708ULL);
  auto bytes = encode_checkpoint(build_mlp(1, 2, 2, 2, rng));
  ASSERT_GE(bytes.size(), 13u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 5), "NCPK1");
  EXPECT_EQ(bytes[5], 0x08);  // seed, little-endian
  EXPECT_EQ(bytes[12], 0x01);
}

TEST(Checkpoint, BadMagicRejected) {
  SeededRng rng(1);
  auto bytes = encode_checkpoint(build_mlp(1, 2, 2, 2, rng));
  bytes[4] = '2';
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.offset, 0u);
  }
}

TEST(Checkpoint, TruncationReportsOffset) {
  SeededRng rng(1);
  auto bytes = encode_checkpoint(build_mlp(2, 3, 2, 2, rng));
  bytes.resize(bytes.size() - 3);
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_LE(e.offset, bytes.size());
    EXPECT_GT(e.offset, 5u);
  }
}

TEST(Checkpoint, FileRoundTrip) {
  SeededRng rng(3);
  auto net = build_mlp(2, 3, 2, 2, rng);
  auto p = std::filesystem::temp_directory_path() / "ncprobe_ckpt_test.ncpk";
  save_checkpoint(net, p);
  EXPECT_EQ(load_checkpoint(p), net);
  std::filesystem::remove(p);
}

}  // namespace
}  // namespace ncprobe
