#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "kvmem/corpus.hpp"

using namespace kvmem;

namespace {

World default_world(std::uint64_t seed = 7) { return generate_world(seed, 8, 3, 4); }

}  // namespace

TEST(GenerateWorld, DeterministicPerSeed) {
  EXPECT_EQ(world_to_string(default_world()), world_to_string(default_world()));
  EXPECT_NE(world_to_string(default_world(7)), world_to_string(default_world(8)));
}

TEST(GenerateWorld, ProductCount) {
  const auto w = default_world();
  EXPECT_EQ(w.facts.size(), 24u);
  EXPECT_EQ(w.objects.size(), 12u);
  for (std::size_t s = 0; s < 8; ++s)
    for (std::size_t r = 0; r < 3; ++r) EXPECT_NE(w.find(s, r), nullptr);
}

TEST(GenerateWorld, EveryFactHasTwoNeighborsByBruteForce) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto w = generate_world(seed, 3 + seed % 14, 2 + seed % 4, 2 + seed % 5);
    for (const auto& f : w.facts) {
      std::size_t n = 0;
      for (const auto& g : w.facts)
        n += g.relation == f.relation && g.object == f.object && g.subject != f.subject;
      EXPECT_GE(n, 2u);
    }
  }
}

TEST(GenerateWorld, InfeasibleCountsAreRejected) {
  EXPECT_THROW(generate_world(1, 1, 3, 4), ConfigError);
  EXPECT_THROW(generate_world(1, 2, 3, 4), ConfigError);
  EXPECT_THROW(generate_world(1, 8, 1, 4), ConfigError);
  EXPECT_THROW(generate_world(1, 8, 3, 1), ConfigError);
}

TEST(GenerateWorld, LargeCountsUseSyntheticNames) {
  const auto w = generate_world(3, 30, 10, 9);
  EXPECT_EQ(w.facts.size(), 300u);
  EXPECT_EQ(w.subjects.back(), "person29");
  EXPECT_EQ(w.relations.back().noun, "rel9");
}

TEST(RenderPrompts, EditPromptTargetsObject) {
  const auto w = default_world();
  for (const auto& f : w.facts) {
    const auto ps = render_prompts(f, w);
    EXPECT_EQ(ps.edit.target, w.object_token(f.object));
    EXPECT_EQ(ps.edit.ids.front(), Vocab::bos);
    for (const auto& p : ps.paraphrases) EXPECT_EQ(p.target, ps.edit.target);
    for (const auto& p : ps.neighborhood) EXPECT_EQ(p.target, ps.edit.target);
  }
}

TEST(RenderPrompts, ParaphrasesDifferButShareSubjectAndRelation) {
  const auto w = default_world();
  const auto& f = w.facts[5];
  const auto ps = render_prompts(f, w);
  ASSERT_GE(ps.paraphrases.size(), 2u);
  const auto subj = w.subject_token(f.subject);
  for (const auto& p : ps.paraphrases) {
    EXPECT_NE(p.ids, ps.edit.ids);
    EXPECT_NE(std::find(p.ids.begin(), p.ids.end(), subj), p.ids.end());
    EXPECT_NE(p.text.find(w.relations[f.relation].noun), std::string::npos);
  }
  EXPECT_NE(ps.paraphrases[0].ids, ps.paraphrases[1].ids);
}

TEST(RenderPrompts, NeighborhoodNeverMentionsEditedSubject) {
  const auto w = default_world();
  for (const auto& f : w.facts) {
    const auto subj = w.subject_token(f.subject);
    for (const auto& p : render_prompts(f, w).neighborhood)
      EXPECT_EQ(std::find(p.ids.begin(), p.ids.end(), subj), p.ids.end());
  }
}

TEST(RenderPrompts, NeighborhoodCountMatchesBruteForce) {
  const auto w = generate_world(11, 16, 3, 4);
  for (std::size_t cap : {1u, 2u, 3u, 100u}) {
    for (const auto& f : w.facts) {
      std::set<std::size_t> expected;
      for (std::size_t s = 0; s < w.subjects.size(); ++s)
        if (s != f.subject && w.find(s, f.relation)->object == f.object) expected.insert(s);
      PromptOptions opts;
      opts.neighborhood_cap = cap;
      const auto ps = render_prompts(f, w, opts);
      EXPECT_EQ(ps.neighborhood.size(), std::min(cap, expected.size()));
      for (auto s : ps.neighborhood_subjects) EXPECT_TRUE(expected.count(s));
    }
  }
}

TEST(RenderPrompts, ExcludedSubjectsAreSkipped) {
  const auto w = default_world();
  const auto& f = w.facts[0];
  auto all = w.neighbors(f);
  PromptOptions opts;
  opts.neighborhood_cap = 100;
  opts.exclude_subjects = {all.front()};
  const auto ps = render_prompts(f, w, opts);
  EXPECT_EQ(ps.neighborhood.size(), all.size() - 1);
  for (auto s : ps.neighborhood_subjects) EXPECT_NE(s, all.front());
}

TEST(RenderPrompts, AbsentTripletIsRejected) {
  const auto w = default_world();
  auto f = w.facts[0];
  f.object = (f.object + 1) % w.objects.size();
  EXPECT_THROW(render_prompts(f, w), std::invalid_argument);
}

TEST(Tokenize, RoundTripsEveryPrompt) {
  const auto w = default_world();
  for (const auto& p : training_prompts(w)) {
    EXPECT_EQ(detokenize(tokenize(p.text, w.vocab), w.vocab), p.text);
    EXPECT_EQ(detokenize(p.ids, w.vocab), p.text);
  }
}

TEST(Tokenize, EmptyText) {
  const auto w = default_world();
  EXPECT_TRUE(tokenize("", w.vocab).empty());
  EXPECT_EQ(tokenize("", w.vocab, true), std::vector<std::size_t>{Vocab::bos});
}

TEST(Tokenize, UnknownWordAndBadIdThrow) {
  const auto w = default_world();
  EXPECT_THROW(tokenize("alice lives in atlantis", w.vocab), std::invalid_argument);
  EXPECT_THROW(detokenize({w.vocab.size()}, w.vocab), std::out_of_range);
}

TEST(Vocab, SpecialsComeFirstAndWordsAreUnique) {
  const auto w = default_world();
  EXPECT_EQ(w.vocab.word(Vocab::pad), "<pad>");
  EXPECT_EQ(w.vocab.word(Vocab::bos), "<bos>");
  EXPECT_EQ(w.vocab.word(Vocab::eos), "<eos>");
  std::set<std::string> seen(w.vocab.words().begin(), w.vocab.words().end());
  EXPECT_EQ(seen.size(), w.vocab.size());
  EXPECT_THROW(Vocab({"<pad>", "<bos>", "<eos>", "a", "a"}), FormatError);
}

TEST(WorldFile, RoundTripsByteExactly) {
  for (auto w : {default_world(), generate_world(4, 16, 5, 6)}) {
    const auto text = world_to_string(w);
    const auto back = world_from_string(text);
    EXPECT_EQ(world_to_string(back), text);
    EXPECT_EQ(back.facts, w.facts);
    EXPECT_EQ(back.vocab, w.vocab);
  }
}

TEST(WorldFile, RejectsCorruptInput) {
  const auto text = world_to_string(default_world());
  EXPECT_THROW(world_from_string("kvmem-world 9\n"), FormatError);
  EXPECT_THROW(world_from_string(text.substr(0, text.size() / 2)), FormatError);
  auto bad = text;
  bad.replace(bad.find("facts 24"), 8, "facts 23");
  EXPECT_THROW(world_from_string(bad), FormatError);
}

TEST(SampleEdits, SameRelationPoolAndDistinctSubjects) {
  const auto w = generate_world(2, 16, 3, 4);
  const auto edits = sample_edits(w, 10, 99);
  ASSERT_EQ(edits.size(), 10u);
  std::set<std::size_t> subjects;
  for (const auto& e : edits) {
    EXPECT_TRUE(w.contains(e.fact));
    EXPECT_NE(e.new_object, e.fact.object);
    EXPECT_EQ(w.object_relation[e.new_object], e.fact.relation);
    subjects.insert(e.fact.subject);
  }
  EXPECT_EQ(subjects.size(), 10u);
  EXPECT_EQ(sample_edits(w, 10, 99), edits);
}

TEST(SampleEdits, LeavesTwoUneditedNeighbors) {
  const auto w = generate_world(2, 16, 3, 4);
  const auto edits = sample_edits(w, 10, 5);
  for (const auto& e : edits) {
    PromptOptions opts;
    opts.neighborhood_cap = 100;
    opts.exclude_subjects = edited_subjects(edits, e.fact.relation);
    EXPECT_GE(render_prompts(e.fact, w, opts).neighborhood.size(), 2u);
  }
}

TEST(SampleEdits, TooManyForWorld) {
  EXPECT_THROW(sample_edits(default_world(), 9, 0), ConfigError);
}

TEST(BuildTasks, SplitsAndAnswerSets) {
  const auto w = default_world();
  const auto tasks = build_tasks(w, 500, 1);
  ASSERT_EQ(tasks.size(), 3u);
  for (const auto& t : tasks) {
    EXPECT_EQ(t.train.size(), 2 * w.facts.size());
    EXPECT_EQ(t.test.size(), w.facts.size());
    for (const auto& s : t.test) {
      EXPECT_NE(std::find(s.accepted.begin(), s.accepted.end(), s.target), s.accepted.end());
    }
  }
  EXPECT_EQ(tasks[2].test[0].accepted.size(), w.neighbors(w.facts[0]).size() + 1);
  EXPECT_EQ(build_tasks(w, 5, 1)[0].train.size(), 5u);
}
