#include "gisp/eval.hpp"

#include <cmath>

#include "gisp/checkpoint.hpp"
#include "gisp/error.hpp"

namespace gisp {

double perplexity(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks,
                  std::span<const std::vector<int>> sequences, std::size_t micro_batch) {
  if (sequences.empty()) throw UsageError("perplexity needs at least one sequence");
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < sequences.size(); b += micro_batch) {
    std::vector<ScoredSequence> batch;
    for (std::size_t i = b; i < std::min(sequences.size(), b + micro_batch); ++i) {
      batch.push_back(ScoredSequence{sequences[i], 1, 1.0});
    }
    for (const auto& r : sequence_nll(weights, config, masks, batch)) {
      nll += r.nll;
      count += r.tokens;
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

std::size_t argmin_candidate(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] < scores[best]) best = i;
  return best;
}

std::vector<QADecision> score_qa(const TransformerWeights& weights, const ModelConfig& config,
                                 const MaskState& masks, std::span<const QAItem> items, AccuracyMode mode,
                                 std::size_t micro_batch) {
  std::vector<ScoredSequence> all;
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (it.prompt.empty()) throw UsageError("QA item " + std::to_string(i) + " has an empty prompt");
    for (std::size_t c = 0; c < it.candidate_count(); ++c) {
      const auto& cand = it.candidate(c);
      if (cand.empty()) throw UsageError("QA item " + std::to_string(i) + " has an empty candidate");
      ScoredSequence s;
      s.tokens = it.prompt;
      s.tokens.insert(s.tokens.end(), cand.begin(), cand.end());
      s.first_target = it.prompt.size();
      all.push_back(std::move(s));
      owner.push_back(i);
    }
  }
  std::vector<QADecision> out(items.size());
  for (std::size_t b = 0; b < all.size(); b += micro_batch) {
    const auto n = std::min(micro_batch, all.size() - b);
    const auto nll = sequence_nll(weights, config, masks, std::span<const ScoredSequence>(all.data() + b, n));
    for (std::size_t k = 0; k < n; ++k) {
      auto& d = out[owner[b + k]];
      d.total_nll.push_back(nll[k].nll);
      d.mean_nll.push_back(nll[k].nll / static_cast<double>(nll[k].tokens));
    }
  }
  for (auto& d : out) d.chosen = argmin_candidate(mode == AccuracyMode::Acc ? d.total_nll : d.mean_nll);
  return out;
}

double qa_accuracy(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks,
                   std::span<const QAItem> items, AccuracyMode mode) {
  if (items.empty()) throw UsageError("qa_accuracy needs at least one item");
  std::size_t correct = 0;
  for (const auto& d : score_qa(weights, config, masks, items, mode)) correct += d.chosen == 0;
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

std::string masks_fingerprint(const MaskState& masks) {
  std::string canon;
  for (int l = 0; l < masks.n_layers(); ++l) {
    canon += std::to_string(masks.head_slots(l)) + "/" + std::to_string(masks.channel_slots(l)) + ";";
  }
  for (const auto& id : masks.removed()) canon += to_string(id);
  return fingerprint_hex(fnv1a64(std::vector<std::uint8_t>(canon.begin(), canon.end())));
}

EvalReport evaluate_model(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks,
                          std::span<const std::vector<int>> eval_sequences, std::span<const QAItem> qa_items) {
  EvalReport r;
  r.masks_fingerprint = masks_fingerprint(masks);
  if (!eval_sequences.empty()) r.perplexity = perplexity(weights, config, masks, eval_sequences);
  if (!qa_items.empty()) {
    // Both modes share the same NLLs; score once.
    const auto scored = score_qa(weights, config, masks, qa_items, AccuracyMode::Acc);
    std::size_t acc = 0, acc_norm = 0;
    for (const auto& d : scored) {
      const auto a = argmin_candidate(d.total_nll);
      const auto an = argmin_candidate(d.mean_nll);
      r.decisions_acc.push_back(a);
      r.decisions_acc_norm.push_back(an);
      acc += a == 0;
      acc_norm += an == 0;
    }
    r.qa_items = qa_items.size();
    r.accuracy = static_cast<double>(acc) / static_cast<double>(qa_items.size());
    r.accuracy_norm = static_cast<double>(acc_norm) / static_cast<double>(qa_items.size());
  }
  return r;
}

}  // namespace gisp
