#pragma once

// Semantic affinity between text and visual keys, and agent-token selection
// by two-stage top-k with duplicate replacement.

#include <optional>
#include <set>
#include <string>
#include <string_view>

#include "xagent/numerics.hpp"
#include "xagent/transport.hpp"

namespace xagent {

/// Source marker for agent rows that do not come from the value matrix.
inline constexpr Index kNoSource = static_cast<Index>(-1);

struct AffinityMatrix {
  Matrix values;      // Nc x N, strictly inside (0, 1)
  Matrix plan;        // the transport plan used (empty for cosine-only)
  Matrix similarity;  // cosine similarity text/key (empty for ot-only)
};

inline Matrix cosine_similarity(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("cosine_similarity: " + shape_str(a) + " vs " + shape_str(b));
  }
  return matmul_nt(l2_normalize_rows(a), l2_normalize_rows(b));
}

/// A = sigmoid(P ⊙ cos(text, key)).
inline AffinityMatrix affinity(const Matrix& text, const Matrix& key, const TransportPlan& plan) {
  Matrix sim = cosine_similarity(text, key);
  require_same_shape(sim, plan.plan, "affinity: plan vs similarity");
  AffinityMatrix a;
  a.values = sigmoid(hadamard(plan.plan, sim));
  a.plan = plan.plan;
  a.similarity = std::move(sim);
  return a;
}

struct ChannelSelection {
  IndexList channels;  // idx_1, ranked by mean affinity
  Matrix rows;         // A*, k x N
};

inline ChannelSelection select_channels(const AffinityMatrix& a, Index k) {
  if (k > a.values.rows()) {
    throw ArgumentError("select_channels: k=" + std::to_string(k) + " exceeds Nc=" +
                        std::to_string(a.values.rows()));
  }
  const Vector means = row_means(a.values);
  ChannelSelection s;
  s.channels = topk(means, k, /*largest=*/true);
  s.rows = gather_rows(a.values, s.channels);
  return s;
}

struct AgentSelection {
  IndexList channel_idx;               // k category channels (empty for prior-free strategies)
  std::vector<IndexList> token_idx;    // per channel, q token positions
  std::vector<bool> dedup_mask;        // k*q, true = replaced by the mask token
  IndexList source;                    // k*q, value-row of each agent or kNoSource
  Matrix agents;                       // (k*q) x d

  Index count() const { return agents.rows(); }
};

/// Gather q tokens per selected channel from the value matrix. Tokens already
/// taken by an earlier agent (channel-major order) are replaced by mask_token.
inline AgentSelection select_tokens(const ChannelSelection& channels, const Matrix& value, Index q,
                                    std::span<const double> mask_token, bool largest = false) {
  const Matrix& a_star = channels.rows;
  if (a_star.cols() != value.rows()) {
    throw ShapeError("select_tokens: A* " + shape_str(a_star) + " vs value " + shape_str(value));
  }
  if (q > value.rows()) {
    throw ArgumentError("select_tokens: q=" + std::to_string(q) + " exceeds N=" +
                        std::to_string(value.rows()));
  }
  if (mask_token.size() != value.cols()) {
    throw ShapeError("select_tokens: mask token width " + std::to_string(mask_token.size()) +
                     " != d=" + std::to_string(value.cols()));
  }
  const Index k = a_star.rows();
  AgentSelection s;
  s.channel_idx = channels.channels;
  s.agents = Matrix(k * q, value.cols());
  s.dedup_mask.assign(k * q, false);
  s.source.assign(k * q, kNoSource);
  std::vector<bool> used(value.rows(), false);
  for (Index c = 0; c < k; ++c) {
    IndexList tokens = topk(a_star.row(c), q, largest);
    for (Index t = 0; t < q; ++t) {
      const Index slot = c * q + t;
      const Index tok = tokens[t];
      auto dst = s.agents.row(slot);
      if (used[tok]) {
        s.dedup_mask[slot] = true;
        std::copy(mask_token.begin(), mask_token.end(), dst.begin());
      } else {
        used[tok] = true;
        s.source[slot] = tok;
        std::copy(value.row(tok).begin(), value.row(tok).end(), dst.begin());
      }
    }
    s.token_idx.push_back(std::move(tokens));
  }
  return s;
}

/// Rebuild the agent rows for a fixed selection against a new value matrix.
inline Matrix regather_agents(const AgentSelection& s, const Matrix& value,
                              std::span<const double> mask_token,
                              const Matrix* learnable = nullptr) {
  Matrix out(s.source.size(), value.cols());
  for (Index r = 0; r < s.source.size(); ++r) {
    auto dst = out.row(r);
    if (s.source[r] != kNoSource) {
      std::copy(value.row(s.source[r]).begin(), value.row(s.source[r]).end(), dst.begin());
    } else if (s.dedup_mask[r]) {
      std::copy(mask_token.begin(), mask_token.end(), dst.begin());
    } else if (learnable != nullptr) {
      std::copy(learnable->row(r).begin(), learnable->row(r).end(), dst.begin());
    }
  }
  return out;
}

enum class SelectionStrategy { Random, LearnableInit, CosineOnly, OtOnly, Combined };

inline std::string_view to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::Random: return "random";
    case SelectionStrategy::LearnableInit: return "learnable-init";
    case SelectionStrategy::CosineOnly: return "cosine-only";
    case SelectionStrategy::OtOnly: return "ot-only";
    case SelectionStrategy::Combined: return "combined";
  }
  return "?";
}

inline SelectionStrategy parse_selection_strategy(std::string_view s) {
  if (s == "random") return SelectionStrategy::Random;
  if (s == "learnable-init") return SelectionStrategy::LearnableInit;
  if (s == "cosine-only") return SelectionStrategy::CosineOnly;
  if (s == "ot-only") return SelectionStrategy::OtOnly;
  if (s == "combined") return SelectionStrategy::Combined;
  throw ArgumentError("unknown selection strategy '" + std::string(s) + "'");
}

inline Matrix init_learnable_agents(Index count, Index d, Rng& rng, double scale = 0.02) {
  return rng.normal_matrix(count, d, scale);
}

struct SelectionInputs {
  const Matrix* text = nullptr;        // Nc x d
  const Matrix* key = nullptr;         // N x d, affinity side
  const Matrix* value = nullptr;       // N x d, gather side
  const TransportPlan* plan = nullptr; // required by ot-only and combined
  const Matrix* learnable = nullptr;   // optional (k*q) x d for learnable-init
  Rng* rng = nullptr;                  // random, and learnable-init without rows
  std::span<const double> mask_token;
  Index k = 10;
  Index q = 4;
  bool largest = false;
};

/// Agent selection under one of the ablation strategies. Prior-free
/// strategies (random, learnable-init) leave channel_idx/token_idx empty.
inline AgentSelection select_agents_baseline(SelectionStrategy strategy,
                                             const SelectionInputs& in) {
  auto need = [](const void* p, const char* what) {
    if (p == nullptr) throw ArgumentError(std::string("select_agents_baseline: missing ") + what);
  };
  const Index count = in.k * in.q;
  switch (strategy) {
    case SelectionStrategy::Random: {
      need(in.value, "value");
      need(in.rng, "rng");
      if (count > in.value->rows()) {
        throw ArgumentError("select_agents_baseline: k*q exceeds N for random sampling");
      }
      AgentSelection s;
      s.source = in.rng->sample_distinct(in.value->rows(), count);
      s.dedup_mask.assign(count, false);
      s.agents = gather_rows(*in.value, s.source);
      return s;
    }
    case SelectionStrategy::LearnableInit: {
      AgentSelection s;
      if (in.learnable != nullptr) {
        if (in.learnable->rows() != count) {
          throw ShapeError("select_agents_baseline: learnable agents have " +
                           std::to_string(in.learnable->rows()) + " rows, need " +
                           std::to_string(count));
        }
        s.agents = *in.learnable;
      } else {
        need(in.rng, "rng");
        need(in.value, "value");
        s.agents = init_learnable_agents(count, in.value->cols(), *in.rng);
      }
      s.source.assign(count, kNoSource);
      s.dedup_mask.assign(count, false);
      return s;
    }
    case SelectionStrategy::CosineOnly:
    case SelectionStrategy::OtOnly:
    case SelectionStrategy::Combined: {
      need(in.text, "text");
      need(in.key, "key");
      need(in.value, "value");
      AffinityMatrix a;
      if (strategy == SelectionStrategy::CosineOnly) {
        a.similarity = cosine_similarity(*in.text, *in.key);
        a.values = sigmoid(a.similarity);
      } else {
        need(in.plan, "transport plan");
        if (strategy == SelectionStrategy::OtOnly) {
          a.plan = in.plan->plan;
          a.values = sigmoid(a.plan);
        } else {
          a = affinity(*in.text, *in.key, *in.plan);
        }
      }
      return select_tokens(select_channels(a, in.k), *in.value, in.q, in.mask_token, in.largest);
    }
  }
  throw ArgumentError("select_agents_baseline: unknown strategy");
}

}  // namespace xagent
