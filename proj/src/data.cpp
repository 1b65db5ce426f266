#include "gisp/data.hpp"

#include <algorithm>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>
#include <set>
#include <sstream>

#include "gisp/error.hpp"

namespace gisp {

namespace {

using nlohmann::json;

const std::vector<std::string> kColors = {"red", "blue", "green", "gold", "pink", "gray", "white", "black"};
const std::vector<std::string> kFoods = {"apples", "bread", "rice", "fish", "cheese", "soup", "honey", "nuts"};

const std::vector<std::string> kDets = {"the", "a", "every", "one", "this"};
const std::vector<std::string> kAdjs = {"small", "big", "old", "young", "quiet", "happy", "bright",
                                        "dark",  "cold", "warm", "tall", "slow", "quick"};
const std::vector<std::string> kNouns = {"dog",  "cat",  "bird",   "child", "farmer", "teacher", "river", "house",
                                         "tree", "boat", "garden", "city",  "friend", "horse",   "window"};
const std::vector<std::string> kVerbs = {"saw",      "found",  "liked",   "painted", "followed",
                                         "helped",   "visited", "carried", "watched", "built"};
const std::vector<std::string> kIntrans = {"slept", "sang", "waited", "laughed", "walked"};
const std::vector<std::string> kPreps = {"near", "under", "behind", "with"};

template <class T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& v) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

struct World {
  std::vector<std::string> names;
  std::vector<int> color;
  std::vector<int> food;
};

World build_world(const WorldSpec& spec) {
  if (spec.entities < 1) throw UsageError("world needs at least one entity");
  std::mt19937_64 rng(spec.world_seed);
  const std::string cons = "bdfgklmnprstvz";
  const std::string vows = "aeiou";
  std::set<std::string> taken;
  for (const auto* list : {&kColors, &kFoods, &kDets, &kAdjs, &kNouns, &kVerbs, &kIntrans, &kPreps})
    taken.insert(list->begin(), list->end());
  World w;
  auto ch = [&](const std::string& s) { return s[std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng)]; };
  while (static_cast<int>(w.names.size()) < spec.entities) {
    std::string n{ch(cons), ch(vows), ch(cons), ch(vows)};
    if (rng() % 2) n.push_back(ch(cons));
    if (taken.insert(n).second) w.names.push_back(n);
  }
  for (int i = 0; i < spec.entities; ++i) {
    w.color.push_back(static_cast<int>(rng() % kColors.size()));
    w.food.push_back(static_cast<int>(rng() % kFoods.size()));
  }
  return w;
}

std::string color_prompt(const std::string& e) { return "the color of " + e + " is"; }
std::string food_prompt(const std::string& e) { return e + " likes to eat"; }

std::string generic_sentence(std::mt19937_64& rng, const World& w) {
  std::ostringstream os;
  switch (rng() % 4) {
    case 0:
      os << pick(rng, kDets) << ' ' << pick(rng, kAdjs) << ' ' << pick(rng, kNouns) << ' ' << pick(rng, kVerbs)
         << " the " << pick(rng, kNouns) << '.';
      break;
    case 1:
      os << pick(rng, kDets) << ' ' << pick(rng, kNouns) << ' ' << pick(rng, kIntrans) << ' ' << pick(rng, kPreps)
         << " the " << pick(rng, kNouns) << '.';
      break;
    case 2:
      os << pick(rng, w.names) << ' ' << pick(rng, kVerbs) << " the " << pick(rng, kAdjs) << ' ' << pick(rng, kNouns)
         << '.';
      break;
    default:
      os << "the " << pick(rng, kNouns) << ' ' << pick(rng, kVerbs) << ' ' << pick(rng, w.names) << '.';
      break;
  }
  return os.str();
}

std::string fact_sentence(std::mt19937_64& rng, const World& w) {
  const auto e = std::uniform_int_distribution<std::size_t>(0, w.names.size() - 1)(rng);
  if (rng() % 2) return color_prompt(w.names[e]) + " " + kColors[w.color[e]] + ".";
  return food_prompt(w.names[e]) + " " + kFoods[w.food[e]] + ".";
}

std::vector<int> bytes_of(const std::string& s) { return tokenize(s); }

std::string json_string(const std::vector<int>& ids) { return detokenize(ids); }

}  // namespace

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<unsigned char>(c));
  return out;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id > 255) throw UsageError("token id " + std::to_string(id) + " is not a byte");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

std::vector<int> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open corpus " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.empty()) throw UsageError("corpus is empty: " + path.string());
  return tokenize(text);
}

CorpusSplit split_corpus(std::span<const int> corpus, double heldout_fraction) {
  if (heldout_fraction < 0 || heldout_fraction >= 1) throw UsageError("heldout_fraction must be in [0,1)");
  const auto cut = corpus.size() - static_cast<std::size_t>(static_cast<double>(corpus.size()) * heldout_fraction);
  return {std::vector<int>(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(cut)),
          std::vector<int>(corpus.begin() + static_cast<std::ptrdiff_t>(cut), corpus.end())};
}

void QAItem::validate() const {
  if (prompt.empty()) throw UsageError("QA item has an empty prompt");
  if (positive.empty()) throw UsageError("QA item has an empty positive candidate");
  if (negatives.empty()) throw UsageError("QA item has no negative candidates");
  for (const auto& n : negatives) {
    if (n.empty()) throw UsageError("QA item has an empty negative candidate");
    if (n == positive) throw UsageError("QA item lists its positive among the negatives");
  }
}

CalibrationSet sample_calibration(std::span<const int> corpus, std::size_t count, std::size_t seq_len,
                                  std::uint64_t seed) {
  if (seq_len < 2) throw UsageError("calibration seq_len must be >= 2");
  if (corpus.size() < seq_len) throw UsageError("corpus shorter than one calibration window");
  CalibrationSet set;
  set.kind = CalibrationKind::Perplexity;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> offset(0, corpus.size() - seq_len);
  for (std::size_t i = 0; i < count; ++i) {
    const auto o = static_cast<std::ptrdiff_t>(offset(rng));
    set.sequences.emplace_back(corpus.begin() + o, corpus.begin() + o + static_cast<std::ptrdiff_t>(seq_len));
  }
  return set;
}

CalibrationSet qa_text_calibration(std::span<const QAItem> items) {
  CalibrationSet set;
  set.kind = CalibrationKind::Perplexity;
  for (const auto& it : items) {
    auto seq = it.prompt;
    seq.insert(seq.end(), it.positive.begin(), it.positive.end());
    set.sequences.push_back(std::move(seq));
  }
  return set;
}

std::string make_synthetic_corpus(const WorldSpec& spec, std::size_t target_bytes, std::uint64_t seed) {
  const World w = build_world(spec);
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution is_fact(spec.fact_fraction);
  std::string out;
  out.reserve(target_bytes + 128);
  int on_line = 0;
  while (out.size() < target_bytes) {
    out += is_fact(rng) ? fact_sentence(rng, w) : generic_sentence(rng, w);
    if (++on_line == 6) {
      out.push_back('\n');
      on_line = 0;
    } else {
      out.push_back(' ');
    }
  }
  return out;
}

std::vector<QAItem> make_synthetic_qa(const QASpec& spec, std::size_t count, std::uint64_t seed,
                                      std::span<const int> corpus) {
  if (spec.negatives < 1) throw UsageError("QA generator needs at least one negative");
  std::vector<QAItem> items;
  if (count == 0) return items;
  std::mt19937_64 rng(seed);

  if (spec.kind == QASpec::Kind::FactCloze) {
    const World w = build_world(spec.world);
    if (spec.negatives >= static_cast<int>(std::min(kColors.size(), kFoods.size()))) {
      throw UsageError("too many negatives for the attribute vocabulary");
    }
    for (std::size_t i = 0; i < count; ++i) {
      const auto e = std::uniform_int_distribution<std::size_t>(0, w.names.size() - 1)(rng);
      const bool color = rng() % 2;
      const auto& values = color ? kColors : kFoods;
      const int truth = color ? w.color[e] : w.food[e];
      QAItem it;
      it.prompt = bytes_of(color ? color_prompt(w.names[e]) : food_prompt(w.names[e]));
      it.positive = bytes_of(" " + values[truth] + ".");
      std::vector<int> others;
      for (int v = 0; v < static_cast<int>(values.size()); ++v)
        if (v != truth) others.push_back(v);
      std::shuffle(others.begin(), others.end(), rng);
      for (int n = 0; n < spec.negatives; ++n) it.negatives.push_back(bytes_of(" " + values[others[n]] + "."));
      items.push_back(std::move(it));
    }
    return items;
  }

  // WordCloze over the supplied corpus.
  if (corpus.size() < 256) throw UsageError("word cloze needs a corpus of at least 256 bytes");
  std::vector<std::pair<std::size_t, std::size_t>> words;  // [begin, end)
  std::set<std::vector<int>> vocab_set;
  for (std::size_t i = 0; i < corpus.size();) {
    while (i < corpus.size() && !std::isalpha(corpus[i])) ++i;
    std::size_t j = i;
    while (j < corpus.size() && std::isalpha(corpus[j])) ++j;
    if (j > i) {
      words.emplace_back(i, j);
      vocab_set.emplace(corpus.begin() + static_cast<std::ptrdiff_t>(i), corpus.begin() + static_cast<std::ptrdiff_t>(j));
    }
    i = j;
  }
  const std::vector<std::vector<int>> vocab(vocab_set.begin(), vocab_set.end());
  if (static_cast<int>(vocab.size()) <= spec.negatives) throw UsageError("corpus vocabulary too small");
  constexpr std::size_t kContext = 48;
  std::uniform_int_distribution<std::size_t> pick_word(0, words.size() - 1);
  while (items.size() < count) {
    const auto [b, e] = words[pick_word(rng)];
    if (b < kContext || corpus[b - 1] != ' ') continue;
    QAItem it;
    it.prompt.assign(corpus.begin() + static_cast<std::ptrdiff_t>(b - kContext),
                     corpus.begin() + static_cast<std::ptrdiff_t>(b - 1));
    std::vector<int> word(corpus.begin() + static_cast<std::ptrdiff_t>(b), corpus.begin() + static_cast<std::ptrdiff_t>(e));
    it.positive = {' '};
    it.positive.insert(it.positive.end(), word.begin(), word.end());
    std::set<std::vector<int>> used{word};
    while (static_cast<int>(it.negatives.size()) < spec.negatives) {
      const auto& cand = vocab[std::uniform_int_distribution<std::size_t>(0, vocab.size() - 1)(rng)];
      if (!used.insert(cand).second) continue;
      std::vector<int> neg{' '};
      neg.insert(neg.end(), cand.begin(), cand.end());
      it.negatives.push_back(std::move(neg));
    }
    items.push_back(std::move(it));
  }
  return items;
}

std::string qa_to_jsonl(std::span<const QAItem> items) {
  std::string out;
  for (const auto& it : items) {
    json j;
    j["prompt"] = json_string(it.prompt);
    j["positive"] = json_string(it.positive);
    j["negatives"] = json::array();
    for (const auto& n : it.negatives) j["negatives"].push_back(json_string(n));
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<QAItem> qa_from_jsonl(std::string_view text) {
  std::vector<QAItem> items;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      QAItem it;
      it.prompt = tokenize(j.at("prompt").get<std::string>());
      it.positive = tokenize(j.at("positive").get<std::string>());
      for (const auto& n : j.at("negatives")) it.negatives.push_back(tokenize(n.get<std::string>()));
      it.validate();
      items.push_back(std::move(it));
    } catch (const json::exception& e) {
      throw UsageError("QA line " + std::to_string(lineno) + ": " + e.what());
    } catch (const UsageError& e) {
      throw UsageError("QA line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return items;
}

std::vector<QAItem> load_qa(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open QA file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return qa_from_jsonl(text);
}

MarginBatches build_margin_batches(std::span<const QAItem> items) {
  if (items.empty()) throw UsageError("margin calibration is empty");
  std::size_t n_neg = 0;
  for (const auto& it : items) {
    if (it.prompt.empty() || it.positive.empty()) throw UsageError("margin item with empty prompt or positive");
    if (it.negatives.empty()) throw UsageError("margin item lacks negatives");
    n_neg += it.negatives.size();
  }
  auto make = [](const QAItem& it, const std::vector<int>& cand, double pool) {
    ScoredSequence s;
    s.tokens = it.prompt;
    s.tokens.insert(s.tokens.end(), cand.begin(), cand.end());
    s.first_target = it.prompt.size();
    s.weight = 1.0 / (pool * static_cast<double>(cand.size()));
    return s;
  };
  MarginBatches out;
  for (const auto& it : items) {
    out.positive.push_back(make(it, it.positive, static_cast<double>(items.size())));
    for (const auto& n : it.negatives) {
      if (n.empty()) throw UsageError("margin item with an empty negative");
      out.negative.push_back(make(it, n, static_cast<double>(n_neg)));
    }
  }
  return out;
}

}  // namespace gisp
