#include "gisp/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>
#include <random>

#include "gisp/error.hpp"

namespace gisp {

namespace {

std::string layer_name(std::size_t l, const char* field) { return "layers." + std::to_string(l) + "." + field; }

template <class W, class F>
void visit_params(W& w, F&& fn) {
  fn(std::string("tok_emb"), w.tok_emb);
  fn(std::string("pos_emb"), w.pos_emb);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    fn(layer_name(l, "attn_norm"), L.attn_norm);
    fn(layer_name(l, "wq"), L.wq);
    fn(layer_name(l, "wk"), L.wk);
    fn(layer_name(l, "wv"), L.wv);
    fn(layer_name(l, "wo"), L.wo);
    fn(layer_name(l, "mlp_norm"), L.mlp_norm);
    fn(layer_name(l, "w_gate"), L.w_gate);
    fn(layer_name(l, "w_up"), L.w_up);
    fn(layer_name(l, "w_down"), L.w_down);
  }
  fn(std::string("final_norm"), w.final_norm);
  fn(std::string("lm_head"), w.lm_head);
}

std::vector<std::size_t> head_rows(const std::vector<std::size_t>& heads, std::size_t d_head) {
  std::vector<std::size_t> rows;
  rows.reserve(heads.size() * d_head);
  for (auto h : heads)
    for (std::size_t i = 0; i < d_head; ++i) rows.push_back(h * d_head + i);
  return rows;
}

Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  const std::size_t c = t.cols();
  Tensor out(Shape{rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(t.data().begin() + rows[i] * c, c, out.data().begin() + i * c);
  return out;
}

Tensor take_cols(const Tensor& t, const std::vector<std::size_t>& cols) {
  const std::size_t r = t.rows(), c = t.cols();
  Tensor out(Shape{r, cols.size()});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) out[i * cols.size() + j] = t[i * c + cols[j]];
  return out;
}

void zero_rows(Tensor& t, std::size_t r0, std::size_t n) {
  std::fill_n(t.data().begin() + r0 * t.cols(), n * t.cols(), 0.0);
}

void zero_cols(Tensor& t, std::size_t c0, std::size_t n) {
  const std::size_t c = t.cols();
  for (std::size_t i = 0; i < t.rows(); ++i) std::fill_n(t.data().begin() + i * c + c0, n, 0.0);
}

void check_masks(const ModelConfig& config, const MaskState& masks) {
  if (masks.n_layers() != config.n_layers) throw UsageError("mask layer count does not match config");
  for (int l = 0; l < config.n_layers; ++l) {
    if (masks.head_slots(l) != config.heads_in(l) || masks.channel_slots(l) != config.ff_in(l)) {
      throw UsageError("mask widths do not match config at layer " + std::to_string(l));
    }
    if (masks.heads_kept(l) < 1 || masks.channels_kept(l) < 1) {
      throw ConstraintError("layer " + std::to_string(l) + " has an empty head or channel pool");
    }
  }
}

}  // namespace

// ---- config / ids ---------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw UsageError("invalid model config: " + m); };
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 || d_ff < 1 || max_seq_len < 2) fail("dims must be >= 1");
  if (d_model != n_heads * d_head) fail("d_model must equal n_heads * d_head");
  if (vocab_size != 256) fail("vocab_size must be 256 for the byte tokenizer");
  if (!layer_heads.empty() && static_cast<int>(layer_heads.size()) != n_layers) fail("layer_heads length");
  if (!layer_ff.empty() && static_cast<int>(layer_ff.size()) != n_layers) fail("layer_ff length");
  for (int l = 0; l < n_layers; ++l) {
    if (heads_in(l) < 1 || heads_in(l) > n_heads) fail("per-layer head count out of range");
    if (ff_in(l) < 1 || ff_in(l) > d_ff) fail("per-layer channel count out of range");
  }
}

std::string_view kind_name(StructureKind kind) {
  return kind == StructureKind::AttnHead ? "head" : "channel";
}

StructureKind parse_kind(std::string_view text) {
  if (text == "head") return StructureKind::AttnHead;
  if (text == "channel") return StructureKind::MlpChannel;
  throw UsageError("unknown structure kind: " + std::string(text));
}

std::string to_string(const StructureId& id) {
  return "(" + std::to_string(id.layer) + "," + std::string(kind_name(id.kind)) + "," + std::to_string(id.unit) + ")";
}

// ---- weights --------------------------------------------------------------

void TransformerWeights::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_params(*this, fn);
}

void TransformerWeights::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_params(*this, fn);
}

Tensor& TransformerWeights::param(std::string_view name) {
  Tensor* found = nullptr;
  for_each([&](const std::string& n, Tensor& t) {
    if (n == name) found = &t;
  });
  if (!found) throw UsageError("unknown parameter: " + std::string(name));
  return *found;
}

const Tensor& TransformerWeights::param(std::string_view name) const {
  return const_cast<TransformerWeights*>(this)->param(name);
}

std::size_t TransformerWeights::param_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

bool bit_identical(const TransformerWeights& a, const TransformerWeights& b) {
  std::vector<const Tensor*> ta, tb;
  a.for_each([&](const std::string&, const Tensor& t) { ta.push_back(&t); });
  b.for_each([&](const std::string&, const Tensor& t) { tb.push_back(&t); });
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i]->shape() != tb[i]->shape()) return false;
    if (std::memcmp(ta[i]->data().data(), tb[i]->data().data(), ta[i]->size() * sizeof(double)) != 0) return false;
  }
  return true;
}

TransformerWeights init_weights(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.rng_seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto randn = [&](Shape s) {
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = normal(rng);
    return t;
  };
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto dh = static_cast<std::size_t>(config.d_head);
  TransformerWeights w;
  w.tok_emb = randn({static_cast<std::size_t>(config.vocab_size), d});
  w.pos_emb = randn({static_cast<std::size_t>(config.max_seq_len), d});
  for (int l = 0; l < config.n_layers; ++l) {
    const auto hw = static_cast<std::size_t>(config.heads_in(l)) * dh;
    const auto ff = static_cast<std::size_t>(config.ff_in(l));
    LayerWeights L;
    L.attn_norm = Tensor(Shape{d}, 1.0);
    L.wq = randn({hw, d});
    L.wk = randn({hw, d});
    L.wv = randn({hw, d});
    L.wo = randn({d, hw});
    L.mlp_norm = Tensor(Shape{d}, 1.0);
    L.w_gate = randn({ff, d});
    L.w_up = randn({ff, d});
    L.w_down = randn({d, ff});
    w.layers.push_back(std::move(L));
  }
  w.final_norm = Tensor(Shape{d}, 1.0);
  w.lm_head = randn({static_cast<std::size_t>(config.vocab_size), d});
  return w;
}

// ---- structures -----------------------------------------------------------

std::vector<StructureId> enumerate_structures(const ModelConfig& config) {
  std::vector<StructureId> out;
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.heads_in(l); ++h) out.push_back({l, StructureKind::AttnHead, h});
    for (int c = 0; c < config.ff_in(l); ++c) out.push_back({l, StructureKind::MlpChannel, c});
  }
  return out;
}

std::size_t structure_param_count(const ModelConfig& config, const StructureId& id) {
  const auto d = static_cast<std::size_t>(config.d_model);
  if (id.kind == StructureKind::AttnHead) return 4 * static_cast<std::size_t>(config.d_head) * d;
  return 3 * d;
}

std::size_t unprunable_param_count(const ModelConfig& config) {
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  return v * d + static_cast<std::size_t>(config.max_seq_len) * d + 2 * d * config.n_layers + d + v * d;
}

std::size_t total_param_count(const ModelConfig& config) {
  std::size_t n = unprunable_param_count(config);
  for (const auto& id : enumerate_structures(config)) n += structure_param_count(config, id);
  return n;
}

// ---- masks ----------------------------------------------------------------

MaskState::MaskState(const ModelConfig& config) {
  for (int l = 0; l < config.n_layers; ++l) {
    heads_.emplace_back(static_cast<std::size_t>(config.heads_in(l)), 1);
    channels_.emplace_back(static_cast<std::size_t>(config.ff_in(l)), 1);
  }
}

bool MaskState::kept(const StructureId& id) const {
  const auto& pool = id.kind == StructureKind::AttnHead ? heads_.at(id.layer) : channels_.at(id.layer);
  return pool.at(static_cast<std::size_t>(id.unit)) != 0;
}

bool MaskState::would_violate_floor(const StructureId& id) const {
  const int left = id.kind == StructureKind::AttnHead ? heads_kept(id.layer) : channels_kept(id.layer);
  return kept(id) && left <= 1;
}

void MaskState::remove(const StructureId& id) {
  if (id.layer < 0 || id.layer >= n_layers() || id.unit < 0) throw UsageError("structure out of range: " + to_string(id));
  auto& pool = id.kind == StructureKind::AttnHead ? heads_[id.layer] : channels_[id.layer];
  if (static_cast<std::size_t>(id.unit) >= pool.size()) throw UsageError("structure out of range: " + to_string(id));
  if (!pool[id.unit]) throw UsageError("structure already removed: " + to_string(id));
  if (would_violate_floor(id)) {
    throw ConstraintError("removing " + to_string(id) + " would leave layer " + std::to_string(id.layer) +
                          " without any " + std::string(kind_name(id.kind)));
  }
  pool[id.unit] = 0;
}

int MaskState::heads_kept(int layer) const {
  const auto& p = heads_.at(layer);
  return static_cast<int>(std::count(p.begin(), p.end(), 1));
}

int MaskState::channels_kept(int layer) const {
  const auto& p = channels_.at(layer);
  return static_cast<int>(std::count(p.begin(), p.end(), 1));
}

std::vector<std::size_t> MaskState::kept_heads(int layer) const {
  std::vector<std::size_t> out;
  const auto& p = heads_.at(layer);
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i]) out.push_back(i);
  return out;
}

std::vector<std::size_t> MaskState::kept_channels(int layer) const {
  std::vector<std::size_t> out;
  const auto& p = channels_.at(layer);
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i]) out.push_back(i);
  return out;
}

std::vector<StructureId> MaskState::removed() const {
  std::vector<StructureId> out;
  for (int l = 0; l < n_layers(); ++l) {
    for (std::size_t h = 0; h < heads_[l].size(); ++h)
      if (!heads_[l][h]) out.push_back({l, StructureKind::AttnHead, static_cast<int>(h)});
    for (std::size_t c = 0; c < channels_[l].size(); ++c)
      if (!channels_[l][c]) out.push_back({l, StructureKind::MlpChannel, static_cast<int>(c)});
  }
  return out;
}

std::size_t MaskState::removed_count() const {
  std::size_t n = 0;
  for (int l = 0; l < n_layers(); ++l) {
    n += heads_[l].size() - static_cast<std::size_t>(heads_kept(l));
    n += channels_[l].size() - static_cast<std::size_t>(channels_kept(l));
  }
  return n;
}

bool MaskState::removed_subset_of(const MaskState& other) const {
  if (other.n_layers() != n_layers()) return false;
  for (const auto& id : removed()) {
    if (other.kept(id)) return false;
  }
  return true;
}

// ---- forward --------------------------------------------------------------

ForwardGraph build_forward(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks,
                           std::span<const ScoredSequence> batch) {
  check_masks(config, masks);
  if (batch.empty()) throw UsageError("empty batch");
  const auto dh = static_cast<std::size_t>(config.d_head);
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardGraph fg;
  auto& g = fg.graph;

  std::size_t total = 0;
  for (const auto& s : batch) {
    if (s.tokens.size() < 2) throw UsageError("sequence shorter than 2 tokens");
    if (s.tokens.size() > static_cast<std::size_t>(config.max_seq_len)) {
      throw UsageError("sequence length " + std::to_string(s.tokens.size()) + " exceeds max_seq_len " +
                       std::to_string(config.max_seq_len));
    }
    fg.row_offsets.push_back(total);
    total += s.tokens.size();
  }

  Tensor tok(Shape{total}), pos(Shape{total}), tgt(Shape{total}, -1.0), wts(Shape{total});
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& seq = batch[s];
    const std::size_t off = fg.row_offsets[s];
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
      const int t = seq.tokens[i];
      if (t < 0 || t >= config.vocab_size) throw UsageError("token id " + std::to_string(t) + " out of range");
      tok[off + i] = t;
      pos[off + i] = static_cast<double>(i);
      if (i + 1 < seq.tokens.size() && i + 1 >= seq.first_target) {
        tgt[off + i] = seq.tokens[i + 1];
        wts[off + i] = seq.weight;
      }
    }
  }

  std::vector<ad::NodeId> pnodes;
  weights.for_each([&](const std::string& name, const Tensor& t) { pnodes.push_back(g.parameter(name, t)); });
  std::size_t cursor = 0;
  auto next = [&] { return pnodes[cursor++]; };

  const auto tok_in = g.input("tokens", {total});
  const auto pos_in = g.input("positions", {total});
  const auto tgt_in = g.input("targets", {total});
  const auto wts_in = g.input("weights", {total});
  fg.bindings = {{"tokens", tok}, {"positions", pos}, {"targets", tgt}, {"weights", wts}};

  const auto tok_emb = next();
  const auto pos_emb = next();
  auto x = g.add(g.embedding(tok_emb, tok_in), g.embedding(pos_emb, pos_in));

  for (int l = 0; l < config.n_layers; ++l) {
    const auto attn_norm = next(), wq = next(), wk = next(), wv = next(), wo = next();
    const auto mlp_norm = next(), w_gate = next(), w_up = next(), w_down = next();
    ForwardGraph::LayerTaps taps{};

    const auto heads = masks.kept_heads(l);
    const bool all_heads = static_cast<int>(heads.size()) == config.heads_in(l);
    const auto rows = head_rows(heads, dh);
    auto sel_rows = [&](ad::NodeId w) { return all_heads ? w : g.gather_rows(w, rows); };

    const auto h = g.rms_norm(x, attn_norm);
    taps.attn_in = h;
    const auto q = g.matmul(h, sel_rows(wq), false, true);
    const auto k = g.matmul(h, sel_rows(wk), false, true);
    const auto v = g.matmul(h, sel_rows(wv), false, true);

    std::vector<ad::NodeId> per_seq;
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const std::size_t off = fg.row_offsets[s], len = batch[s].tokens.size();
      std::vector<ad::NodeId> per_head;
      for (std::size_t j = 0; j < heads.size(); ++j) {
        const auto qs = g.slice(q, off, len, j * dh, dh);
        const auto ks = g.slice(k, off, len, j * dh, dh);
        const auto vs = g.slice(v, off, len, j * dh, dh);
        const auto scores = g.scale(g.matmul(qs, ks, false, true), attn_scale);
        const auto probs = g.softmax(g.causal_mask(scores));
        per_head.push_back(g.matmul(probs, vs));
      }
      per_seq.push_back(per_head.size() == 1 ? per_head[0] : g.concat_cols(per_head));
    }
    const auto heads_out = per_seq.size() == 1 ? per_seq[0] : g.concat_rows(per_seq);
    taps.heads_out = heads_out;
    const auto wo_sel = all_heads ? wo : g.gather_cols(wo, rows);
    const auto attn = g.matmul(heads_out, wo_sel, false, true);
    taps.attn_out = attn;
    x = g.add(x, attn);

    const auto channels = masks.kept_channels(l);
    const bool all_channels = static_cast<int>(channels.size()) == config.ff_in(l);
    const auto m_in = g.rms_norm(x, mlp_norm);
    taps.mlp_in = m_in;
    const auto gate_w = all_channels ? w_gate : g.gather_rows(w_gate, channels);
    const auto up_w = all_channels ? w_up : g.gather_rows(w_up, channels);
    const auto down_w = all_channels ? w_down : g.gather_cols(w_down, channels);
    const auto hidden = g.gate(g.matmul(m_in, up_w, false, true), g.matmul(m_in, gate_w, false, true));
    taps.mlp_hidden = hidden;
    x = g.add(x, g.matmul(hidden, down_w, false, true));
    fg.taps.push_back(taps);
  }

  const auto final_norm = next();
  const auto lm_head = next();
  fg.logits = g.matmul(g.rms_norm(x, final_norm), lm_head, false, true);
  fg.loss = g.cross_entropy(fg.logits, tgt_in, wts_in);
  return fg;
}

double forward_loss(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks,
                    std::span<const int> tokens) {
  if (tokens.size() < 2) throw UsageError("forward_loss needs at least 2 tokens");
  ScoredSequence seq{std::vector<int>(tokens.begin(), tokens.end()), 1, 1.0 / static_cast<double>(tokens.size() - 1)};
  return batch_loss(weights, config, masks, std::span<const ScoredSequence>(&seq, 1));
}

double forward_loss(const TransformerWeights& weights, const ModelConfig& config, std::span<const int> tokens) {
  return forward_loss(weights, config, MaskState(config), tokens);
}

double batch_loss(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks,
                  std::span<const ScoredSequence> batch) {
  auto fg = build_forward(weights, config, masks, batch);
  return fg.graph.evaluate(fg.bindings).item();
}

LossAndGradient loss_and_gradient(const TransformerWeights& weights, const ModelConfig& config,
                                  const MaskState& masks, std::span<const ScoredSequence> batch) {
  auto fg = build_forward(weights, config, masks, batch);
  LossAndGradient out;
  out.loss = fg.graph.evaluate(fg.bindings).item();
  out.gradients = fg.graph.backward(fg.loss);
  return out;
}

std::vector<SequenceNll> sequence_nll(const TransformerWeights& weights, const ModelConfig& config,
                                      const MaskState& masks, std::span<const ScoredSequence> batch) {
  auto fg = build_forward(weights, config, masks, batch);
  fg.graph.evaluate(fg.bindings);
  const Tensor& logits = fg.graph.value(fg.logits);
  const std::size_t v = logits.cols();
  std::vector<SequenceNll> out(batch.size());
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& seq = batch[s];
    for (std::size_t i = 0; i + 1 < seq.tokens.size(); ++i) {
      if (i + 1 < seq.first_target) continue;
      const double* row = logits.data().data() + (fg.row_offsets[s] + i) * v;
      const double mx = *std::max_element(row, row + v);
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
      out[s].nll += mx + std::log(z) - row[seq.tokens[i + 1]];
      ++out[s].tokens;
    }
  }
  return out;
}

// ---- masking / compaction -------------------------------------------------

TransformerWeights zero_masked(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks) {
  check_masks(config, masks);
  TransformerWeights out = weights;
  const auto dh = static_cast<std::size_t>(config.d_head);
  for (const auto& id : masks.removed()) {
    auto& L = out.layers[id.layer];
    const auto u = static_cast<std::size_t>(id.unit);
    if (id.kind == StructureKind::AttnHead) {
      zero_rows(L.wq, u * dh, dh);
      zero_rows(L.wk, u * dh, dh);
      zero_rows(L.wv, u * dh, dh);
      zero_cols(L.wo, u * dh, dh);
    } else {
      zero_rows(L.w_gate, u, 1);
      zero_rows(L.w_up, u, 1);
      zero_cols(L.w_down, u, 1);
    }
  }
  return out;
}

Compacted compact(const TransformerWeights& weights, const ModelConfig& config, const MaskState& masks) {
  check_masks(config, masks);
  Compacted out;
  out.config = config;
  out.config.layer_heads.assign(config.n_layers, 0);
  out.config.layer_ff.assign(config.n_layers, 0);
  out.weights.tok_emb = weights.tok_emb;
  out.weights.pos_emb = weights.pos_emb;
  out.weights.final_norm = weights.final_norm;
  out.weights.lm_head = weights.lm_head;
  const auto dh = static_cast<std::size_t>(config.d_head);
  for (int l = 0; l < config.n_layers; ++l) {
    const auto& src = weights.layers[l];
    const auto heads = masks.kept_heads(l);
    const auto rows = head_rows(heads, dh);
    const auto channels = masks.kept_channels(l);
    LayerWeights L;
    L.attn_norm = src.attn_norm;
    L.wq = take_rows(src.wq, rows);
    L.wk = take_rows(src.wk, rows);
    L.wv = take_rows(src.wv, rows);
    L.wo = take_cols(src.wo, rows);
    L.mlp_norm = src.mlp_norm;
    L.w_gate = take_rows(src.w_gate, channels);
    L.w_up = take_rows(src.w_up, channels);
    L.w_down = take_cols(src.w_down, channels);
    out.weights.layers.push_back(std::move(L));
    out.config.layer_heads[l] = static_cast<int>(heads.size());
    out.config.layer_ff[l] = static_cast<int>(channels.size());
  }
  return out;
}

// ---- training -------------------------------------------------------------

TransformerWeights train_dense(const ModelConfig& config, std::span<const int> corpus, const TrainOptions& options,
                               TrainLog* log) {
  config.validate();
  TransformerWeights w = init_weights(config);
  if (options.steps <= 0) return w;
  const int seq_len = options.seq_len > 0 ? options.seq_len : config.max_seq_len;
  if (seq_len < 2 || seq_len > config.max_seq_len) throw UsageError("training seq_len out of range");
  if (corpus.size() < static_cast<std::size_t>(seq_len)) throw UsageError("corpus shorter than one training window");
  if (options.batch < 1) throw UsageError("batch must be >= 1");

  const MaskState dense(config);
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> offset(0, corpus.size() - static_cast<std::size_t>(seq_len));

  // Adam moments, in for_each order.
  std::vector<Tensor*> params;
  std::vector<std::string> names;
  w.for_each([&](const std::string& n, Tensor& t) {
    names.push_back(n);
    params.push_back(&t);
  });
  std::vector<Tensor> m1, m2;
  for (auto* p : params) {
    m1.emplace_back(p->shape());
    m2.emplace_back(p->shape());
  }
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  const double tok_weight = 1.0 / (static_cast<double>(options.batch) * (seq_len - 1));

  for (int step = 0; step < options.steps; ++step) {
    std::vector<ScoredSequence> batch(options.batch);
    for (auto& s : batch) {
      const std::size_t o = offset(rng);
      s.tokens.assign(corpus.begin() + static_cast<std::ptrdiff_t>(o),
                      corpus.begin() + static_cast<std::ptrdiff_t>(o + seq_len));
      s.weight = tok_weight;
    }
    LossAndGradient lg;
    try {
      lg = loss_and_gradient(w, config, dense, batch);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(lg.loss)) throw NumericError("training diverged at step " + std::to_string(step));
    if (log) log->losses.push_back(lg.loss);
    if (options.log_every > 0 && (step % options.log_every == 0 || step + 1 == options.steps)) {
      std::cerr << "step " << step << " loss " << lg.loss << '\n';
    }

    double sq = 0.0;
    for (const auto& n : names)
      for (double gval : lg.gradients.find(n)->second.data()) sq += gval * gval;
    const double norm = std::sqrt(sq);
    const double clip = (options.clip_norm > 0 && norm > options.clip_norm) ? options.clip_norm / norm : 1.0;

    const double progress = static_cast<double>(step) / options.steps;
    double lr = options.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
    if (step < options.warmup) lr = options.learning_rate * (step + 1) / options.warmup;
    const double bc1 = 1.0 - std::pow(beta1, step + 1);
    const double bc2 = 1.0 - std::pow(beta2, step + 1);

    for (std::size_t p = 0; p < params.size(); ++p) {
      const Tensor& grad = lg.gradients.find(names[p])->second;
      auto& value = *params[p];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double gi = grad[i] * clip;
        m1[p][i] = beta1 * m1[p][i] + (1 - beta1) * gi;
        m2[p][i] = beta2 * m2[p][i] + (1 - beta2) * gi * gi;
        value[i] -= lr * (m1[p][i] / bc1) / (std::sqrt(m2[p][i] / bc2) + eps);
      }
    }
  }
  return w;
}

}  // namespace gisp
