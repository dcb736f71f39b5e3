#include <gtest/gtest.h>

#include "kvmem/checkpoint.hpp"
#include "kvmem/hash.hpp"

using namespace kvmem;

namespace {

ModelConfig small(FfnKind kind) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_e = 8;
  c.n_heads = 2;
  c.vocab_size = 12;
  c.max_seq = 6;
  c.ffn_kind = kind;
  c.seed = 9;
  return c;
}

std::uint64_t all_hash(const Model<float>& m) { return unmasked_hash(m, ParamMask{}, true); }

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  for (auto kind : {FfnKind::standard, FfnKind::swiglu}) {
    const auto m = init_params<float>(small(kind));
    const auto bytes = checkpoint_bytes(m);
    const auto back = checkpoint_from_bytes(bytes);
    EXPECT_EQ(back.config, m.config);
    EXPECT_EQ(all_hash(back), all_hash(m));
    EXPECT_EQ(checkpoint_bytes(back), bytes);
  }
}

TEST(Checkpoint, PayloadIsLittleEndianF32) {
  auto m = init_params<float>(small(FfnKind::standard));
  m.tok_emb[0] = 1.0f;  // 0x3f800000
  const auto bytes = checkpoint_bytes(m);
  const auto start = bytes.find("end\n") + 4;
  EXPECT_EQ(static_cast<unsigned char>(bytes[start + 0]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(bytes[start + 2]), 0x80);
  EXPECT_EQ(static_cast<unsigned char>(bytes[start + 3]), 0x3f);
  EXPECT_EQ(bytes.substr(0, 19), "kvmem-checkpoint 1\n");
}

TEST(Checkpoint, LoraRestoresAdaptersAndFrozenBase) {
  auto m = init_params<float>(small(FfnKind::swiglu));
  LoraSpec spec;
  spec.rank = 2;
  spec.alpha = 3.5;
  spec.targets = {LoraTarget::attn_v, LoraTarget::ffn_key_up};
  attach(m, spec);
  for (auto& v : m.blocks[1].adapters.at(LoraTarget::ffn_key_up).B.data()) v = 0.25f;
  const auto back = checkpoint_from_bytes(checkpoint_bytes(m));
  ASSERT_TRUE(back.lora.has_value());
  EXPECT_EQ(*back.lora, spec);
  EXPECT_EQ(all_hash(back), all_hash(m));
  visit_params(back, [](const std::string& name, const Tensor<float>& t, bool adapter) {
    EXPECT_EQ(t.requires_grad(), adapter) << name;
  });
  const std::vector<std::size_t> ids{1, 2, 3};
  EXPECT_TRUE(logits(back, ids).same_values(logits(m, ids)));
}

TEST(Checkpoint, TruncatedPayloadIsRejected) {
  const auto bytes = checkpoint_bytes(init_params<float>(small(FfnKind::standard)));
  try {
    checkpoint_from_bytes(bytes.substr(0, bytes.size() - 1));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
  EXPECT_THROW(checkpoint_from_bytes(bytes + "x"), FormatError);
}

TEST(Checkpoint, VersionAndManifestErrors) {
  auto bytes = checkpoint_bytes(init_params<float>(small(FfnKind::standard)));
  auto v2 = bytes;
  v2[17] = '2';
  try {
    checkpoint_from_bytes(v2);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
  EXPECT_THROW(checkpoint_from_bytes("hello\n"), FormatError);
  EXPECT_THROW(checkpoint_from_bytes(""), FormatError);

  auto renamed = bytes;
  renamed.replace(renamed.find("tok_emb"), 7, "tok_xxx");
  EXPECT_THROW(checkpoint_from_bytes(renamed), FormatError);

  auto bad_cfg = bytes;
  bad_cfg.replace(bad_cfg.find("n_heads=2"), 9, "n_heads=3");
  EXPECT_THROW(checkpoint_from_bytes(bad_cfg), FormatError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = testing::TempDir() + "kvmem_ckpt_test.bin";
  const auto m = init_params<float>(small(FfnKind::standard));
  save_checkpoint(m, path);
  EXPECT_EQ(all_hash(load_checkpoint(path)), all_hash(m));
  EXPECT_THROW(load_checkpoint(path + ".missing"), std::runtime_error);
}
