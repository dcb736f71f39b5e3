#include <gtest/gtest.h>

#include "kvmem/editor.hpp"
#include "kvmem/hash.hpp"

using namespace kvmem;

namespace {

struct Fixture {
  World world = generate_world(7, 8, 3, 4);
  Model<float> model;

  explicit Fixture(FfnKind kind = FfnKind::standard) {
    ModelConfig c;
    c.vocab_size = world.vocab.size();
    c.d_e = 16;
    c.n_heads = 2;
    c.ffn_kind = kind;
    c.seed = 5;
    model = init_params<float>(c);
  }

  EditRequest request(EditTarget target, std::size_t n = 1) const {
    EditRequest r;
    r.edits = sample_edits(world, n, 3);
    r.target = target;
    r.layers = {1};
    r.check_recall = false;
    return r;
  }
};

std::vector<std::string> masked_names(const ParamMask& m) {
  std::vector<std::string> out;
  for (const auto& [name, bits] : m.entries) out.push_back(name);
  return out;
}

bool models_equal(const Model<float>& a, const Model<float>& b) {
  std::vector<const Tensor<float>*> ta, tb;
  visit_params(a, [&](const std::string&, const Tensor<float>& t, bool) { ta.push_back(&t); });
  visit_params(b, [&](const std::string&, const Tensor<float>& t, bool) { tb.push_back(&t); });
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (!ta[i]->same_values(*tb[i])) return false;
  return true;
}

}  // namespace

TEST(DefaultEditLayers, MiddleThird) {
  EXPECT_EQ(default_edit_layers(3), (std::set<std::size_t>{1}));
  EXPECT_EQ(default_edit_layers(6), (std::set<std::size_t>{2, 3}));
  EXPECT_EQ(default_edit_layers(1), (std::set<std::size_t>{0}));
  EXPECT_EQ(default_edit_layers(12), (std::set<std::size_t>{4, 5, 6, 7}));
}

TEST(BuildMask, ValuesAllRowsStandard) {
  Fixture f;
  auto r = f.request(EditTarget::values);
  r.layers = {2};
  const auto mask = build_mask(f.model, r, f.world);
  EXPECT_EQ(masked_names(mask), std::vector<std::string>{"layers.2.ffn.value"});
  for (bool b : mask.entries.at("layers.2.ffn.value")) EXPECT_TRUE(b);
}

TEST(BuildMask, KeysSwigluMapsToGateAndUp) {
  Fixture f(FfnKind::swiglu);
  const auto mask = build_mask(f.model, f.request(EditTarget::keys), f.world);
  EXPECT_EQ(masked_names(mask),
            (std::vector<std::string>{"layers.1.ffn.key_gate", "layers.1.ffn.key_up"}));
  const auto vmask = build_mask(f.model, f.request(EditTarget::values), f.world);
  EXPECT_EQ(masked_names(vmask), std::vector<std::string>{"layers.1.ffn.value_down"});
}

TEST(BuildMask, TopOneMatchesBruteForceRanking) {
  for (auto kind : {FfnKind::standard, FfnKind::swiglu}) {
    Fixture f(kind);
    auto r = f.request(EditTarget::keys, 3);
    r.row_scope = RowScope::top_k_activated;
    r.top_k = 1;
    const auto mask = build_mask(f.model, r, f.world);

    // Brute force: mean |activation| of layer 1 at the final position.
    std::vector<double> score(f.model.config.d_m, 0.0);
    for (const auto& e : r.edits) {
      const auto ids = render_prompts(e.fact, f.world).edit.ids;
      ForwardTrace<float> trace;
      logits(f.model, ids, &trace);
      const auto& a = trace.ffn_activations[1];
      for (std::size_t i = 0; i < score.size(); ++i) score[i] += std::abs(a(a.rows() - 1, i));
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < score.size(); ++i)
      if (score[i] > score[best]) best = i;

    for (const auto& [name, bits] : mask.entries) {
      const std::size_t cols = f.model.config.d_e;
      for (std::size_t k = 0; k < bits.size(); ++k) EXPECT_EQ(bits[k], k / cols == best) << name;
    }
  }
}

TEST(BuildMask, RejectsInvalidRequests) {
  Fixture f;
  auto r = f.request(EditTarget::values);
  r.layers = {};
  try {
    build_mask(f.model, r, f.world);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "layers");
  }
  r.layers = {3};
  EXPECT_THROW(build_mask(f.model, r, f.world), ConfigError);

  r = f.request(EditTarget::values);
  r.row_scope = RowScope::top_k_activated;
  r.top_k = f.model.config.d_m + 1;
  try {
    build_mask(f.model, r, f.world);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "top_k");
  }

  r = f.request(EditTarget::values);
  r.edits[0].new_object = r.edits[0].fact.object;
  EXPECT_THROW(build_mask(f.model, r, f.world), ConfigError);

  r = f.request(EditTarget::values);
  r.edits.push_back(r.edits[0]);
  EXPECT_THROW(build_mask(f.model, r, f.world), ConfigError);
}

TEST(Edit, RequiresRecalledFacts) {
  Fixture f;
  auto r = f.request(EditTarget::values);
  r.check_recall = true;
  EXPECT_THROW(edit(f.model, r, f.world), PreconditionError);
}

TEST(Edit, ZeroStepsLeavesModelBitIdentical) {
  Fixture f;
  const auto before = f.model;
  auto r = f.request(EditTarget::keys);
  r.optimizer.max_steps = 0;
  const auto trace = edit(f.model, r, f.world);
  EXPECT_EQ(trace.reason, StopReason::max_steps);
  EXPECT_EQ(trace.steps, 0u);
  EXPECT_TRUE(trace.loss.empty());
  EXPECT_TRUE(models_equal(f.model, before));
}

TEST(Edit, MaskIsolationByteHash) {
  for (auto kind : {FfnKind::standard, FfnKind::swiglu}) {
    for (auto target : {EditTarget::keys, EditTarget::values}) {
      Fixture f(kind);
      auto r = f.request(target, 2);
      r.optimizer.max_steps = 5;
      const auto mask = build_mask(f.model, r, f.world);
      const auto outside = unmasked_hash(f.model, mask);
      const auto all = base_weight_hash(f.model);
      const auto trace = edit(f.model, r, f.world);
      EXPECT_EQ(trace.steps, 5u);
      EXPECT_EQ(unmasked_hash(f.model, mask), outside);
      EXPECT_NE(base_weight_hash(f.model), all);
    }
  }
}

TEST(Edit, TopKEditMovesOnlySelectedRows) {
  Fixture f;
  auto r = f.request(EditTarget::values);
  r.row_scope = RowScope::top_k_activated;
  r.top_k = 2;
  r.optimizer.max_steps = 3;
  const auto mask = build_mask(f.model, r, f.world);
  const auto before = std::get<StandardFfn<float>>(f.model.blocks[1].ffn);
  edit(f.model, r, f.world);
  const auto& after = std::get<StandardFfn<float>>(f.model.blocks[1].ffn);
  const auto& bits = mask.entries.at("layers.1.ffn.value");
  std::size_t moved = 0;
  for (std::size_t k = 0; k < bits.size(); ++k) {
    if (!bits[k]) {
      EXPECT_EQ(after.V[k], before.V[k]);
    }
    moved += after.V[k] != before.V[k];
  }
  EXPECT_GT(moved, 0u);
  EXPECT_TRUE(after.K.same_values(before.K));
}

TEST(Edit, TraceContractAndLossDecreases) {
  Fixture f;
  auto r = f.request(EditTarget::values);
  r.optimizer.max_steps = 20;
  r.optimizer.lr = 1e-2;
  r.optimizer.stop_prob = 1.0;
  const auto trace = edit(f.model, r, f.world);
  EXPECT_EQ(trace.loss.size(), trace.steps);
  EXPECT_EQ(trace.steps, 20u);
  EXPECT_GE(trace.seconds, 0.0);
  EXPECT_LT(trace.loss.back(), trace.loss.front());
  EXPECT_FALSE(f.model.blocks[1].attn.W_q.requires_grad());
}

TEST(Edit, StopsWhenTargetProbabilityReached) {
  Fixture f;
  auto r = f.request(EditTarget::values);
  r.layers = {0, 1, 2};
  r.optimizer.lr = 1e-2;
  r.optimizer.max_steps = 300;
  r.optimizer.stop_prob = 0.1;
  const auto trace = edit(f.model, r, f.world);
  ASSERT_EQ(trace.reason, StopReason::converged);
  const auto p = render_prompts(r.edits[0].fact, f.world).edit;
  EXPECT_GE(next_token_probs(f.model, p.ids)[f.world.object_token(r.edits[0].new_object)], 0.1f);
  EXPECT_LT(trace.steps, 300u);
}

TEST(Edit, RepeatedRunsAreBitIdentical) {
  Fixture a, b;
  auto r = a.request(EditTarget::keys, 3);
  r.optimizer.max_steps = 4;
  const auto ta = edit(a.model, r, a.world);
  const auto tb = edit(b.model, r, b.world);
  EXPECT_EQ(ta.loss, tb.loss);
  EXPECT_TRUE(models_equal(a.model, b.model));
}

TEST(Edit, SecondsGrowWithSteps) {
  Fixture a, b;
  auto r = a.request(EditTarget::values);
  r.optimizer.stop_prob = 1.0;
  r.optimizer.max_steps = 0;
  const auto none = edit(a.model, r, a.world);
  r.optimizer.max_steps = 30;
  const auto many = edit(b.model, r, b.world);
  EXPECT_LE(none.seconds, many.seconds);
}
