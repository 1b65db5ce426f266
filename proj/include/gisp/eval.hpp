#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gisp/data.hpp"
#include "gisp/model.hpp"

namespace gisp {

enum class AccuracyMode { Acc, AccNorm };

// exp of the mean next-token NLL over every predicted position.
double perplexity(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks,
                  std::span<const std::vector<int>> sequences, std::size_t micro_batch = 16);

struct QADecision {
  std::size_t chosen = 0;  // candidate index; 0 is the positive
  std::vector<double> total_nll;
  std::vector<double> mean_nll;
};

// Scores every candidate of every item by its NLL conditioned on the prompt.
std::vector<QADecision> score_qa(const TransformerWeights& weights, const ModelConfig& config,
                                 const MaskState& masks, std::span<const QAItem> items, AccuracyMode mode,
                                 std::size_t micro_batch = 32);

// Lowest score wins; ties go to the lower candidate index.
std::size_t argmin_candidate(std::span<const double> scores);

double qa_accuracy(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks,
                   std::span<const QAItem> items, AccuracyMode mode);

struct EvalReport {
  double perplexity = 0.0;
  double accuracy = 0.0;
  double accuracy_norm = 0.0;
  std::size_t qa_items = 0;
  std::vector<std::size_t> decisions_acc;
  std::vector<std::size_t> decisions_acc_norm;
  std::string masks_fingerprint;
};

EvalReport evaluate_model(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks,
                          std::span<const std::vector<int>> eval_sequences, std::span<const QAItem> qa_items);

std::string masks_fingerprint(const MaskState& masks);

}  // namespace gisp
