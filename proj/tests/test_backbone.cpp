// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>

#include "rass/backbone.hpp"
#include "rass/errors.hpp"

namespace fs = std::filesystem;
using namespace rass;
using namespace rass::backbone;

namespace {

BackboneConfig tiny_cfg() {
  BackboneConfig c;
  c.ae_widths = {8, 8, 8};
  c.denoiser_widths = {8, 16, 16};
  c.embed_dim = 16;
  c.vocab = {"circle", "square", "ring"};
  return c;
}

}  // namespace

TEST(Backbone, EncodeDecodeShapesAndRange) {
  torch::manual_seed(0);
  Backbone m(tiny_cfg());
  torch::NoGradGuard g;
  const auto enc = m->encode(torch::rand({2, 3, 32, 32}));
  EXPECT_EQ(enc.z.sizes(), (torch::IntArrayRef{2, 4, 8, 8}));
  EXPECT_FALSE(enc.feats.empty());
  for (std::size_t i = 1; i < enc.feats.size(); ++i) EXPECT_LT(enc.feats[i - 1].size(-1), enc.feats[i].size(-1));
  const auto dec = m->decode(enc.z);
  EXPECT_EQ(dec.image.sizes(), (torch::IntArrayRef{2, 3, 32, 32}));
  EXPECT_GE(dec.image.min().item<float>(), 0.0f);
  EXPECT_LE(dec.image.max().item<float>(), 1.0f);
  EXPECT_EQ(m->encode(torch::rand({3, 16, 16})).z.sizes(), (torch::IntArrayRef{4, 4, 4}));
}

TEST(Backbone, RejectsSizesNotDivisibleByLatentFactor) {
  Backbone m(tiny_cfg());
  EXPECT_THROW(m->encode(torch::rand({3, 63, 63})), ValidationError);
}

TEST(Backbone, ConfigValidationNamesField) {
  auto c = tiny_cfg();
  c.timestep = 2;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "backbone.timestep");
  }
  c = tiny_cfg();
  c.latent_downsample = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Tags, UnknownTagsMapToUnkRow) {
  Backbone m(tiny_cfg());
  const auto e = m->embed_tags({"circle", "zebra"});
  ASSERT_EQ(e.size(), 2);
  EXPECT_FALSE(e.unknown[0]);
  EXPECT_TRUE(e.unknown[1]);
  EXPECT_TRUE(torch::equal(e.tokens[1], m->embed_tags({kUnkTag}).tokens[0]));
  EXPECT_EQ(e.row_of("zebra"), 1);
  EXPECT_EQ(e.row_of("ring"), -1);
}

TEST(Tags, EmptyTagListIsRejected) {
  Backbone m(tiny_cfg());
  EXPECT_THROW(m->embed_tags({}), ValidationError);
  EXPECT_THROW(m->embed_batch({{"circle"}, {}}), ValidationError);
}

TEST(Tags, BatchPadsAndMarksValidTokens) {
  Backbone m(tiny_cfg());
  const auto b = m->embed_batch({{"circle", "square", "ring"}, {"square"}});
  EXPECT_EQ(b.tokens.sizes(), (torch::IntArrayRef{2, 3, 16}));
  EXPECT_EQ(b.counts, (std::vector<int64_t>{3, 1}));
  EXPECT_TRUE(b.valid[0].all().item<bool>());
  EXPECT_EQ(b.valid[1].sum().item<int64_t>(), 1);
}

TEST(Attention, SoftmaxSumsToOneOverValidTokens) {
  torch::manual_seed(1);
  Backbone m(tiny_cfg());
  torch::NoGradGuard g;
  const auto out = m->denoise(torch::randn({2, 4, 8, 8}), m->embed_batch({{"circle", "square"}, {"ring"}}));
  ASSERT_FALSE(out.attention.empty());
  for (const auto& layer : out.attention) {
    const auto s0 = layer.raw[0].sum(0);
    EXPECT_TRUE(torch::allclose(s0, torch::ones_like(s0), 1e-5, 1e-5)) << layer.layer_id;
    const auto s1 = layer.raw[1][0];
    EXPECT_TRUE(torch::allclose(s1, torch::ones_like(s1), 1e-5, 1e-5));
    EXPECT_EQ(layer.raw[1][1].abs().max().item<float>(), 0.0f);
    EXPECT_LE(layer.maps.max().item<float>(), 1.0f + 1e-6f);
    EXPECT_NEAR(layer.maps[0][0].max().item<float>(), 1.0f, 1e-5);
  }
}

TEST(Attention, DuplicateTagsReceiveIdenticalMaps) {
  torch::manual_seed(2);
  Backbone m(tiny_cfg());
  torch::NoGradGuard g;
  const auto out = m->denoise_step(torch::randn({1, 4, 8, 8}), m->embed_tags({"square", "circle", "square"}));
  for (const auto& layer : out.attention) {
    EXPECT_TRUE(torch::allclose(layer.raw[0][0], layer.raw[0][2], 1e-6, 1e-7));
  }
}

TEST(Attention, TokenPermutationPermutesMapsAndKeepsOutput) {
  torch::manual_seed(3);
  Backbone m(tiny_cfg());
  torch::NoGradGuard g;
  const auto z = torch::randn({1, 4, 8, 8});
  const auto a = m->denoise_step(z, m->embed_tags({"circle", "square", "ring"}));
  const auto b = m->denoise_step(z, m->embed_tags({"ring", "circle", "square"}));
  EXPECT_TRUE(torch::allclose(a.eps, b.eps, 1e-5, 1e-5));
  for (std::size_t l = 0; l < a.attention.size(); ++l) {
    const auto& ra = a.attention[l].raw[0];
    const auto& rb = b.attention[l].raw[0];
    EXPECT_TRUE(torch::allclose(ra[0], rb[1], 1e-5, 1e-6));
    EXPECT_TRUE(torch::allclose(ra[1], rb[2], 1e-5, 1e-6));
    EXPECT_TRUE(torch::allclose(ra[2], rb[0], 1e-5, 1e-6));
  }
}

TEST(Restore, ZeroDenoiserOutputGivesAutoencoderReconstruction) {
  torch::manual_seed(4);
  Backbone m(tiny_cfg());
  {
    torch::NoGradGuard g;
    for (auto& item : m->denoiser->named_parameters()) {
      if (item.key().rfind("out.", 0) == 0) item.value().zero_();
    }
  }
  torch::NoGradGuard g;
  const auto x = torch::rand({2, 3, 32, 32});
  const auto r = m->restore(x, m->embed_batch({{"circle"}, {"ring"}}));
  EXPECT_TRUE(torch::allclose(r.image, m->decode(m->encode(x).z).image, 1e-5, 1e-6));
}

TEST(Restore, DecoderFeaturesOnlyWhenRequested) {
  Backbone m(tiny_cfg());
  torch::NoGradGuard g;
  const auto cond = m->embed_batch({{"circle"}});
  const auto x = torch::rand({1, 3, 16, 16});
  const auto calls0 = m->decoder->calls();
  const auto a = m->restore(x, cond, false);
  EXPECT_EQ(m->decoder->calls(), calls0 + 1);
  EXPECT_TRUE(a.features.decoder_feats.empty());
  const auto b = m->restore(x, cond, true);
  EXPECT_FALSE(b.features.decoder_feats.empty());
  EXPECT_FALSE(b.features.encoder_feats.empty());
  EXPECT_FALSE(b.features.denoiser_feats.empty());
}

TEST(Checkpoint, SaveLoadReproducesOutputs) {
  torch::manual_seed(5);
  Backbone m(tiny_cfg());
  const auto path = fs::temp_directory_path() / "rass_test_backbone.ckpt";
  save_backbone(m, path);
  auto back = load_backbone(path);
  EXPECT_EQ(back->config().vocab, tiny_cfg().vocab);
  torch::NoGradGuard g;
  const auto x = torch::rand({1, 3, 16, 16});
  const auto c1 = m->embed_batch({{"square"}});
  const auto c2 = back->embed_batch({{"square"}});
  EXPECT_TRUE(torch::equal(m->restore(x, c1).image, back->restore(x, c2).image));

  auto clone = clone_backbone(m);
  EXPECT_TRUE(torch::equal(m->restore(x, c1).image, clone->restore(x, clone->embed_batch({{"square"}})).image));
}
