#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gisp/model.hpp"

namespace gisp {

// Byte-level tokenizer: one token per byte, vocabulary of 256.
std::vector<int> tokenize(std::string_view text);
std::string detokenize(std::span<const int> ids);

std::vector<int> load_corpus(const std::filesystem::path& path);

struct CorpusSplit {
  std::vector<int> train;
  std::vector<int> heldout;
};
// The last `heldout_fraction` of the corpus is held out.
CorpusSplit split_corpus(std::span<const int> corpus, double heldout_fraction);

struct QAItem {
  std::vector<int> prompt;
  std::vector<int> positive;
  std::vector<std::vector<int>> negatives;

  // Candidate order used for scoring: positive first, then negatives.
  std::size_t candidate_count() const { return 1 + negatives.size(); }
  const std::vector<int>& candidate(std::size_t i) const { return i == 0 ? positive : negatives.at(i - 1); }
  void validate() const;

  friend bool operator==(const QAItem&, const QAItem&) = default;
};

enum class CalibrationKind { Perplexity, Margin };

struct CalibrationSet {
  CalibrationKind kind = CalibrationKind::Perplexity;
  std::vector<std::vector<int>> sequences;  // Perplexity
  std::vector<QAItem> items;                // Margin

  bool empty() const { return kind == CalibrationKind::Perplexity ? sequences.empty() : items.empty(); }
};

// N contiguous windows of seq_len tokens at seeded uniform offsets.
CalibrationSet sample_calibration(std::span<const int> corpus, std::size_t count, std::size_t seq_len,
                                  std::uint64_t seed);

// Perplexity calibration built from QA text: each item's prompt followed by
// its positive candidate, scored on every position.
CalibrationSet qa_text_calibration(std::span<const QAItem> items);

// ---- synthetic data -------------------------------------------------------

// Parameters of the bundled toy world: a population of named entities with
// fixed attributes, mentioned in generic sentences and in fact sentences.
struct WorldSpec {
  std::uint64_t world_seed = 7;
  int entities = 48;
  double fact_fraction = 0.3;
};

struct QASpec {
  enum class Kind { FactCloze, WordCloze } kind = Kind::FactCloze;
  WorldSpec world;
  int negatives = 3;
};

std::string make_synthetic_corpus(const WorldSpec& spec, std::size_t target_bytes, std::uint64_t seed);

// FactCloze: prompt states an entity/attribute question taken from the
// world's fact templates, positive is the true attribute, negatives are
// distinct wrong attributes. WordCloze: prompt is a corpus window ending at a
// word boundary, positive is the next word, negatives are other corpus words.
std::vector<QAItem> make_synthetic_qa(const QASpec& spec, std::size_t count, std::uint64_t seed,
                                      std::span<const int> corpus = {});

// JSON-lines: {"prompt": str, "positive": str, "negatives": [str, ...]}
std::string qa_to_jsonl(std::span<const QAItem> items);
std::vector<QAItem> qa_from_jsonl(std::string_view text);
std::vector<QAItem> load_qa(const std::filesystem::path& path);

// ---- margin batches -------------------------------------------------------

// prompt + candidate sequences with the loss restricted to candidate tokens.
// Sequence weights make each batch's weighted loss equal the mean over
// candidates of the per-candidate mean token NLL.
struct MarginBatches {
  std::vector<ScoredSequence> positive;
  std::vector<ScoredSequence> negative;
};
MarginBatches build_margin_batches(std::span<const QAItem> items);

}  // namespace gisp
