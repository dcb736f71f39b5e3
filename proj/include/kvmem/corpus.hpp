#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "kvmem/error.hpp"

namespace kvmem {

/// Closed word-level vocabulary; one token per word.
class Vocab {
 public:
  static constexpr std::size_t pad = 0, bos = 1, eos = 2;

  Vocab() : Vocab(std::vector<std::string>{"<pad>", "<bos>", "<eos>"}) {}

  /// Builds from an explicit id order. The first three words must be the
  /// specials.
  explicit Vocab(std::vector<std::string> words) : words_(std::move(words)) {
    if (words_.size() < 3 || words_[pad] != "<pad>" || words_[bos] != "<bos>" ||
        words_[eos] != "<eos>") {
      throw FormatError("vocab must start with <pad> <bos> <eos>");
    }
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (words_[i].empty() || words_[i].find_first_of(" \t\n") != std::string::npos) {
        throw FormatError("invalid vocab word '" + words_[i] + "'");
      }
      if (!index_.emplace(words_[i], i).second) {
        throw FormatError("duplicate vocab word '" + words_[i] + "'");
      }
    }
  }

  /// Appends `word` if new; returns its id.
  std::size_t add(const std::string& word) {
    auto it = index_.find(word);
    if (it != index_.end()) return it->second;
    if (word.empty() || word.find_first_of(" \t\n") != std::string::npos) {
      throw std::invalid_argument("invalid vocab word '" + word + "'");
    }
    words_.push_back(word);
    index_.emplace(word, words_.size() - 1);
    return words_.size() - 1;
  }

  std::size_t id(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) throw std::invalid_argument("unknown word '" + word + "'");
    return it->second;
  }
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  const std::string& word(std::size_t id) const {
    if (id >= words_.size()) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(words_.size()));
    }
    return words_[id];
  }
  std::size_t size() const noexcept { return words_.size(); }
  const std::vector<std::string>& words() const noexcept { return words_; }

  bool operator==(const Vocab& o) const { return words_ == o.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Whitespace tokenisation against a closed vocabulary. Unknown words are
/// an error, never mapped to a fallback id.
inline std::vector<std::size_t> tokenize(const std::string& text, const Vocab& vocab,
                                         bool add_bos = false) {
  std::vector<std::size_t> ids;
  if (add_bos) ids.push_back(Vocab::bos);
  std::istringstream in(text);
  std::string w;
  while (in >> w) ids.push_back(vocab.id(w));
  return ids;
}

/// Inverse of tokenize; a leading <bos> is dropped.
inline std::string detokenize(const std::vector<std::size_t>& ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::string& w = vocab.word(ids[i]);
    if (i == 0 && ids[i] == Vocab::bos) continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

/// (subject, relation, object). `object` indexes World::objects.
struct KnowledgeTriplet {
  std::size_t subject = 0;
  std::size_t relation = 0;
  std::size_t object = 0;

  auto operator<=>(const KnowledgeTriplet&) const = default;
};

/// A template is a word list with "{s}" marking the subject slot; it ends
/// where the answer token would follow.
using Template = std::vector<std::string>;
inline const std::string kSubjectSlot = "{s}";

struct Relation {
  std::string noun;
  std::array<Template, 3> templates;  // 0: edit prompt, 1-2: paraphrases
};

struct World {
  std::uint64_t seed = 0;
  std::vector<std::string> subjects;
  std::vector<Relation> relations;
  std::vector<std::string> objects;
  std::vector<std::size_t> object_relation;  // owning relation per object
  std::vector<KnowledgeTriplet> facts;        // sorted by (subject, relation)
  Vocab vocab;

  /// Object pool of one relation, ascending.
  std::vector<std::size_t> relation_objects(std::size_t relation) const {
    std::vector<std::size_t> out;
    for (std::size_t o = 0; o < objects.size(); ++o)
      if (object_relation[o] == relation) out.push_back(o);
    return out;
  }

  const KnowledgeTriplet* find(std::size_t subject, std::size_t relation) const {
    auto it = std::lower_bound(facts.begin(), facts.end(),
                               KnowledgeTriplet{subject, relation, 0},
                               [](const auto& a, const auto& b) {
                                 return std::tie(a.subject, a.relation) <
                                        std::tie(b.subject, b.relation);
                               });
    if (it == facts.end() || it->subject != subject || it->relation != relation) return nullptr;
    return &*it;
  }

  bool contains(const KnowledgeTriplet& t) const {
    const auto* f = find(t.subject, t.relation);
    return f && f->object == t.object;
  }

  std::size_t subject_token(std::size_t s) const { return vocab.id(subjects.at(s)); }
  std::size_t object_token(std::size_t o) const { return vocab.id(objects.at(o)); }
  std::size_t relation_token(std::size_t r) const { return vocab.id(relations.at(r).noun); }

  /// Subjects other than `t.subject` holding the same (relation, object).
  std::vector<std::size_t> neighbors(const KnowledgeTriplet& t) const {
    std::vector<std::size_t> out;
    for (const auto& f : facts)
      if (f.relation == t.relation && f.object == t.object && f.subject != t.subject)
        out.push_back(f.subject);
    return out;
  }
};

struct Prompt {
  std::vector<std::size_t> ids;  // starts with <bos>
  std::size_t target = 0;        // gold next token after the last position
  std::string text;
};

struct PromptSet {
  Prompt edit;
  std::vector<Prompt> paraphrases;
  std::vector<Prompt> neighborhood;
  std::vector<std::size_t> neighborhood_subjects;
};

struct PromptOptions {
  std::size_t neighborhood_cap = 4;
  std::set<std::size_t> exclude_subjects;  // never used as neighbors
};

namespace detail {

struct RelationSeed {
  const char* noun;
  std::vector<const char*> phrase;
  std::vector<const char*> objects;
};

inline const std::vector<RelationSeed>& relation_seeds() {
  static const std::vector<RelationSeed> seeds = {
      {"city", {"lives", "in"}, {"paris", "rome", "tokyo", "cairo", "lima", "oslo", "delhi", "seattle"}},
      {"company", {"works", "at"}, {"acme", "globex", "initech", "hooli", "stark", "wayne", "umbrella", "cyberdyne"}},
      {"sport", {"competes", "in"}, {"chess", "tennis", "rugby", "golf", "hockey", "cricket", "polo", "judo"}},
      {"language", {"speaks", "fluent"}, {"french", "german", "spanish", "hindi", "swahili", "latin", "greek", "dutch"}},
      {"instrument", {"plays", "the"}, {"piano", "violin", "flute", "drums", "cello", "harp", "oboe", "tuba"}},
      {"food", {"loves", "eating"}, {"pasta", "sushi", "curry", "tacos", "ramen", "paella", "kimchi", "falafel"}},
      {"color", {"likes", "the", "color"}, {"red", "blue", "green", "yellow", "purple", "orange", "black", "white"}},
      {"pet", {"owns", "a", "pet"}, {"cat", "dog", "horse", "eagle", "shark", "wolf", "otter", "tiger"}},
  };
  return seeds;
}

inline const std::vector<const char*>& subject_names() {
  static const std::vector<const char*> names = {
      "alice", "bob",   "carol", "dave",  "erin",  "frank",  "grace", "heidi",
      "ivan",  "judy",  "ken",   "liam",  "mia",   "noah",   "olga",  "paul",
      "quinn", "rosa",  "sam",   "tara",  "uma",   "victor", "wendy", "xavier"};
  return names;
}

/// Filler words of the multi-task templates.
inline const std::vector<const char*>& task_words() {
  static const std::vector<const char*> words = {
      "relation", "between", "and", "how", "linked", "to", "link", "from",
      "who", "has", "whose", "name", "someone", "with"};
  return words;
}

inline std::string render(const Template& tpl, const std::string& subject) {
  std::string out;
  for (const auto& w : tpl) {
    if (!out.empty()) out += ' ';
    out += (w == kSubjectSlot) ? subject : w;
  }
  return out;
}

}  // namespace detail

/// Checks structural invariants; throws FormatError/PreconditionError.
inline void validate_world(const World& w) {
  if (w.object_relation.size() != w.objects.size()) throw FormatError("object table size");
  for (auto r : w.object_relation)
    if (r >= w.relations.size()) throw FormatError("object owned by unknown relation");
  for (std::size_t i = 0; i < w.facts.size(); ++i) {
    const auto& f = w.facts[i];
    if (f.subject >= w.subjects.size() || f.relation >= w.relations.size() ||
        f.object >= w.objects.size() || w.object_relation[f.object] != f.relation) {
      throw FormatError("fact " + std::to_string(i) + " has invalid ids");
    }
    if (i && std::tie(w.facts[i - 1].subject, w.facts[i - 1].relation) >=
                 std::tie(f.subject, f.relation)) {
      throw FormatError("facts must be sorted with unique (subject, relation)");
    }
  }
  if (w.facts.size() != w.subjects.size() * w.relations.size()) {
    throw FormatError("every subject needs exactly one object per relation");
  }
  for (const auto& f : w.facts) {
    if (w.neighbors(f).size() < 2) {
      throw PreconditionError("fact (" + w.subjects[f.subject] + ", " +
                              w.relations[f.relation].noun + ") has fewer than 2 neighbors");
    }
  }
  auto check_words = [&](const std::string& word) {
    if (!w.vocab.contains(word)) throw FormatError("word '" + word + "' missing from vocab");
  };
  for (const auto& s : w.subjects) check_words(s);
  for (const auto& o : w.objects) check_words(o);
  for (const auto& r : w.relations) {
    check_words(r.noun);
    for (const auto& t : r.templates)
      for (const auto& word : t)
        if (word != kSubjectSlot) check_words(word);
  }
}

/// Deterministic synthetic fact world. Within each relation the subjects
/// are split into groups of at least three sharing one object, so every
/// fact has at least two neighborhood subjects.
inline World generate_world(std::uint64_t seed, std::size_t n_subjects, std::size_t n_relations,
                            std::size_t n_objects_per_relation) {
  if (n_subjects < 2) throw ConfigError("subjects", "need at least 2");
  if (n_relations < 2) throw ConfigError("relations", "need at least 2");
  if (n_objects_per_relation < 2) throw ConfigError("objects", "need at least 2");
  if (n_subjects < 3) {
    throw ConfigError("subjects",
                      "need at least 3 so that each fact has 2 neighbors sharing its object");
  }

  World w;
  w.seed = seed;
  const auto& seeds = detail::relation_seeds();
  const auto& names = detail::subject_names();
  for (std::size_t i = 0; i < n_subjects; ++i)
    w.subjects.push_back(i < names.size() ? names[i] : "person" + std::to_string(i));

  std::vector<std::vector<std::string>> phrases;
  for (std::size_t r = 0; r < n_relations; ++r) {
    Relation rel;
    std::vector<std::string> phrase;
    std::vector<std::string> pool;
    if (r < seeds.size()) {
      rel.noun = seeds[r].noun;
      phrase.assign(seeds[r].phrase.begin(), seeds[r].phrase.end());
      for (std::size_t j = 0; j < n_objects_per_relation; ++j)
        pool.push_back(j < seeds[r].objects.size() ? std::string(seeds[r].objects[j])
                                                   : rel.noun + std::to_string(j));
    } else {
      rel.noun = "rel" + std::to_string(r);
      phrase = {"has" + rel.noun};
      for (std::size_t j = 0; j < n_objects_per_relation; ++j)
        pool.push_back(rel.noun + "obj" + std::to_string(j));
    }
    rel.templates[0] = {kSubjectSlot};
    rel.templates[0].insert(rel.templates[0].end(), phrase.begin(), phrase.end());
    rel.templates[1] = {"the", rel.noun, "of", kSubjectSlot, "is"};
    rel.templates[2] = {"when", "asked", "about", rel.noun, kSubjectSlot, "said"};
    for (auto& o : pool) {
      w.objects.push_back(o);
      w.object_relation.push_back(r);
    }
    w.relations.push_back(std::move(rel));
  }

  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> object_of(n_subjects,
                                                  std::vector<std::size_t>(n_relations));
  const std::size_t groups = std::min(n_objects_per_relation, n_subjects / 3);
  for (std::size_t r = 0; r < n_relations; ++r) {
    std::vector<std::size_t> order(n_subjects);
    for (std::size_t i = 0; i < n_subjects; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    auto pool = w.relation_objects(r);
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t i = 0; i < n_subjects; ++i) object_of[order[i]][r] = pool[i % groups];
  }
  for (std::size_t s = 0; s < n_subjects; ++s)
    for (std::size_t r = 0; r < n_relations; ++r) w.facts.push_back({s, r, object_of[s][r]});

  // Vocab: specials, template words, task words, then entities.
  for (const auto& rel : w.relations)
    for (const auto& t : rel.templates)
      for (const auto& word : t)
        if (word != kSubjectSlot) w.vocab.add(word);
  for (const char* word : detail::task_words()) w.vocab.add(word);
  std::set<std::string> reserved(w.vocab.words().begin(), w.vocab.words().end());
  auto add_entity = [&](const std::string& name) {
    if (reserved.count(name)) throw ConfigError("world", "entity name '" + name + "' collides");
    reserved.insert(name);
    w.vocab.add(name);
  };
  for (const auto& s : w.subjects) add_entity(s);
  for (const auto& o : w.objects) add_entity(o);

  validate_world(w);
  return w;
}

inline Prompt make_prompt(const World& w, const Template& tpl, std::size_t subject,
                          std::size_t target_token) {
  Prompt p;
  p.text = detail::render(tpl, w.subjects.at(subject));
  p.ids = tokenize(p.text, w.vocab, true);
  p.target = target_token;
  return p;
}

/// Edit prompt from template 0, paraphrases from templates 1 and 2, and
/// neighborhood prompts (template 0) for other subjects sharing the
/// triplet's relation and original object, in ascending subject order.
inline PromptSet render_prompts(const KnowledgeTriplet& t, const World& w,
                                const PromptOptions& opts = {}) {
  if (!w.contains(t)) throw std::invalid_argument("render_prompts: triplet not in world");
  const auto& rel = w.relations[t.relation];
  const std::size_t gold = w.object_token(t.object);
  PromptSet ps;
  ps.edit = make_prompt(w, rel.templates[0], t.subject, gold);
  ps.paraphrases.push_back(make_prompt(w, rel.templates[1], t.subject, gold));
  ps.paraphrases.push_back(make_prompt(w, rel.templates[2], t.subject, gold));
  for (auto s : w.neighbors(t)) {
    if (ps.neighborhood.size() >= opts.neighborhood_cap) break;
    if (opts.exclude_subjects.count(s)) continue;
    ps.neighborhood.push_back(make_prompt(w, rel.templates[0], s, gold));
    ps.neighborhood_subjects.push_back(s);
  }
  return ps;
}

/// Every fact rendered with all three of its relation's templates.
inline std::vector<Prompt> training_prompts(const World& w) {
  std::vector<Prompt> out;
  for (const auto& f : w.facts)
    for (const auto& tpl : w.relations[f.relation].templates)
      out.push_back(make_prompt(w, tpl, f.subject, w.object_token(f.object)));
  return out;
}

/// One counterfactual: rewrite `fact` to `new_object`.
struct FactEdit {
  KnowledgeTriplet fact;
  std::size_t new_object = 0;

  bool operator==(const FactEdit&) const = default;
};

/// Subjects whose fact for `relation` is rewritten by the batch; their
/// template-0 prompts no longer probe unchanged knowledge.
inline std::set<std::size_t> edited_subjects(const std::vector<FactEdit>& edits,
                                             std::size_t relation) {
  std::set<std::size_t> out;
  for (const auto& e : edits)
    if (e.fact.relation == relation) out.insert(e.fact.subject);
  return out;
}

/// Draws `n` edits with distinct subjects. New objects come from the same
/// relation's pool. A fact is skipped if editing it would leave another
/// selected fact with fewer than two unedited neighbors.
inline std::vector<FactEdit> sample_edits(const World& w, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(w.facts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<FactEdit> out;
  std::set<std::size_t> used_subjects;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> edited_in_group;
  for (auto idx : order) {
    if (out.size() == n) break;
    const auto& f = w.facts[idx];
    if (used_subjects.count(f.subject)) continue;
    const auto key = std::make_pair(f.relation, f.object);
    const std::size_t group = w.neighbors(f).size() + 1;
    if (group - (edited_in_group[key] + 1) < 2) continue;
    auto pool = w.relation_objects(f.relation);
    pool.erase(std::remove(pool.begin(), pool.end(), f.object), pool.end());
    const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng);
    out.push_back({f, pool[pick]});
    used_subjects.insert(f.subject);
    ++edited_in_group[key];
  }
  if (out.size() < n) {
    throw ConfigError("batch", "cannot draw " + std::to_string(n) +
                                   " edits with distinct subjects from this world (max " +
                                   std::to_string(out.size()) + ")");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-task tuning data

enum class TaskKind { object_recall, relation_classification, subject_recall };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::object_recall: return "object_recall";
    case TaskKind::relation_classification: return "relation_classification";
    case TaskKind::subject_recall: return "subject_recall";
  }
  return "?";
}

struct TaskSample {
  std::vector<std::size_t> ids;
  std::size_t target = 0;
  std::vector<std::size_t> accepted;  // any of these counts as correct
};

struct Task {
  TaskKind kind;
  std::vector<TaskSample> train, test;
};

/// Three next-token tasks over the world's facts, each with its own answer
/// token set (objects, relation nouns, subjects). Template variants 0-1
/// form the train split and variant 2 the test split. At most `cap` train
/// samples are kept per task.
inline std::vector<Task> build_tasks(const World& w, std::size_t cap = 500,
                                     std::uint64_t seed = 0) {
  std::vector<Task> tasks;
  std::mt19937_64 rng(seed);
  auto sample = [&](const std::vector<std::string>& words, std::size_t target,
                    std::vector<std::size_t> accepted) {
    std::string text;
    for (const auto& word : words) text += (text.empty() ? "" : " ") + word;
    return TaskSample{tokenize(text, w.vocab, true), target, std::move(accepted)};
  };
  for (auto kind : {TaskKind::object_recall, TaskKind::relation_classification,
                    TaskKind::subject_recall}) {
    Task task{kind, {}, {}};
    for (const auto& f : w.facts) {
      const auto& subj = w.subjects[f.subject];
      const auto& noun = w.relations[f.relation].noun;
      const auto& obj = w.objects[f.object];
      for (int variant = 0; variant < 3; ++variant) {
        TaskSample s;
        switch (kind) {
          case TaskKind::object_recall: {
            const auto& tpl = w.relations[f.relation].templates[variant];
            const auto t = w.object_token(f.object);
            s = TaskSample{tokenize(detail::render(tpl, subj), w.vocab, true), t, {t}};
            break;
          }
          case TaskKind::relation_classification: {
            static const std::array<std::vector<std::string>, 3> pre = {
                std::vector<std::string>{"relation", "between", "@s", "and", "@o", "is"},
                std::vector<std::string>{"how", "is", "@s", "linked", "to", "@o"},
                std::vector<std::string>{"the", "link", "from", "@s", "to", "@o", "is"}};
            std::vector<std::string> words;
            for (const auto& word : pre[variant])
              words.push_back(word == "@s" ? subj : word == "@o" ? obj : word);
            const auto t = w.relation_token(f.relation);
            s = sample(words, t, {t});
            break;
          }
          case TaskKind::subject_recall: {
            static const std::array<std::vector<std::string>, 3> pre = {
                std::vector<std::string>{"who", "has", "@n", "@o"},
                std::vector<std::string>{"whose", "@n", "is", "@o"},
                std::vector<std::string>{"name", "someone", "with", "@n", "@o"}};
            std::vector<std::string> words;
            for (const auto& word : pre[variant])
              words.push_back(word == "@n" ? noun : word == "@o" ? obj : word);
            std::vector<std::size_t> accepted{w.subject_token(f.subject)};
            for (auto n : w.neighbors(f)) accepted.push_back(w.subject_token(n));
            std::sort(accepted.begin(), accepted.end());
            s = sample(words, w.subject_token(f.subject), std::move(accepted));
            break;
          }
        }
        (variant < 2 ? task.train : task.test).push_back(std::move(s));
      }
    }
    std::shuffle(task.train.begin(), task.train.end(), rng);
    if (task.train.size() > cap) task.train.resize(cap);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

// ---------------------------------------------------------------------------
// World file (plain text, versioned)

inline constexpr int kWorldFormatVersion = 1;

inline void write_world(std::ostream& os, const World& w) {
  auto join = [](const Template& t) {
    std::string s;
    for (const auto& word : t) s += (s.empty() ? "" : " ") + word;
    return s;
  };
  os << "kvmem-world " << kWorldFormatVersion << "\n";
  os << "seed " << w.seed << "\n";
  os << "subjects " << w.subjects.size() << "\n";
  for (const auto& s : w.subjects) os << s << "\n";
  os << "relations " << w.relations.size() << "\n";
  for (const auto& r : w.relations) {
    os << "relation " << r.noun << "\n";
    for (std::size_t i = 0; i < r.templates.size(); ++i)
      os << "template " << i << " " << join(r.templates[i]) << "\n";
  }
  os << "objects " << w.objects.size() << "\n";
  for (std::size_t o = 0; o < w.objects.size(); ++o)
    os << w.objects[o] << " " << w.object_relation[o] << "\n";
  os << "vocab " << w.vocab.size() << "\n";
  for (const auto& word : w.vocab.words()) os << word << "\n";
  os << "facts " << w.facts.size() << "\n";
  for (const auto& f : w.facts) os << f.subject << " " << f.relation << " " << f.object << "\n";
  os << "end\n";
}

inline std::string world_to_string(const World& w) {
  std::ostringstream os;
  write_world(os, w);
  return os.str();
}

inline World read_world(std::istream& is) {
  std::string line;
  std::size_t line_no = 0;
  auto next = [&]() -> std::string {
    if (!std::getline(is, line)) throw FormatError("world file truncated");
    ++line_no;
    return line;
  };
  auto fail = [&](const std::string& what) {
    return FormatError("world file line " + std::to_string(line_no) + ": " + what);
  };
  auto header = [&](const std::string& key) -> std::size_t {
    std::istringstream in(next());
    std::string k;
    long long n = -1;
    if (!(in >> k >> n) || k != key || n < 0) throw fail("expected '" + key + " <count>'");
    return static_cast<std::size_t>(n);
  };
  auto words_of = [](const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string word;
    while (in >> word) out.push_back(word);
    return out;
  };

  {
    std::istringstream in(next());
    std::string magic;
    int version = 0;
    if (!(in >> magic >> version) || magic != "kvmem-world") throw fail("not a world file");
    if (version != kWorldFormatVersion) {
      throw FormatError("unsupported world format version " + std::to_string(version));
    }
  }
  World w;
  {
    std::istringstream in(next());
    std::string k;
    if (!(in >> k >> w.seed) || k != "seed") throw fail("expected 'seed <n>'");
  }
  const auto n_subjects = header("subjects");
  for (std::size_t i = 0; i < n_subjects; ++i) w.subjects.push_back(next());
  const auto n_relations = header("relations");
  for (std::size_t r = 0; r < n_relations; ++r) {
    auto head = words_of(next());
    if (head.size() != 2 || head[0] != "relation") throw fail("expected 'relation <noun>'");
    Relation rel;
    rel.noun = head[1];
    for (std::size_t i = 0; i < rel.templates.size(); ++i) {
      auto words = words_of(next());
      if (words.size() < 3 || words[0] != "template" || words[1] != std::to_string(i)) {
        throw fail("expected 'template " + std::to_string(i) + " ...'");
      }
      rel.templates[i].assign(words.begin() + 2, words.end());
    }
    w.relations.push_back(std::move(rel));
  }
  const auto n_objects = header("objects");
  for (std::size_t o = 0; o < n_objects; ++o) {
    std::istringstream in(next());
    std::string name;
    std::size_t rel = 0;
    if (!(in >> name >> rel)) throw fail("expected '<object> <relation>'");
    w.objects.push_back(name);
    w.object_relation.push_back(rel);
  }
  const auto n_vocab = header("vocab");
  std::vector<std::string> words;
  for (std::size_t i = 0; i < n_vocab; ++i) words.push_back(next());
  w.vocab = Vocab(std::move(words));
  const auto n_facts = header("facts");
  for (std::size_t i = 0; i < n_facts; ++i) {
    std::istringstream in(next());
    KnowledgeTriplet f;
    if (!(in >> f.subject >> f.relation >> f.object)) throw fail("expected '<s> <r> <o>'");
    w.facts.push_back(f);
  }
  if (next() != "end") throw fail("expected 'end'");
  validate_world(w);
  return w;
}

inline World world_from_string(const std::string& text) {
  std::istringstream is(text);
  return read_world(is);
}

}  // namespace kvmem
