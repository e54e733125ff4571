#pragma once

// Shared random generators for property tests and the acceptance runner.

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "hlguide/guidance.hpp"
#include "hlguide/models.hpp"
#include "hlguide/rng.hpp"

namespace hlguide::test_support {

inline std::unique_ptr<GuidableModel> random_model(Rng& rng) {
  const Vocabulary vocab = default_vocabulary();
  if (rng.below(2) == 0) {
    MicroTransformerDims dims{1 + rng.below(2), 2, 8, 16};
    return std::make_unique<MicroTransformer>(vocab, rng.next_u64(), dims);
  }
  const std::size_t dim = 2 + rng.below(6);
  auto toy = std::make_unique<OneLayerToy>(vocab, dim);
  for (std::size_t t = 0; t < vocab.size(); ++t) {
    Vector e(dim), r(dim), rr(dim);
    for (std::size_t c = 0; c < dim; ++c) {
      e[c] = rng.normal();
      r[c] = 2.0 * rng.normal();
      rr[c] = rng.normal();
    }
    const auto id = static_cast<TokenId>(t);
    toy->set_embedding(id, e);
    toy->set_readout(id, r);
    toy->set_residual_readout(id, rr);
    toy->set_readout_bias(id, 0.5 * rng.normal());
  }
  toy->set_score_scale(rng.uniform(0.2, 2.0));
  return toy;
}

/// Prompt of random non-reserved tokens.
inline TokenSequence random_prompt(const Vocabulary& vocab, Rng& rng, std::size_t min_len = 2,
                                   std::size_t max_len = 8) {
  const std::size_t n = min_len + rng.below(max_len - min_len + 1);
  TokenSequence seq;
  for (std::size_t i = 0; i < n; ++i) {
    const auto id = static_cast<TokenId>(2 + rng.below(vocab.size() - 2));
    seq.push(Token{id, vocab.surface(id)}, Role::prompt);
  }
  return seq;
}

inline HighlightMask random_mask(std::size_t n, Rng& rng) {
  HighlightMask m = HighlightMask::zeros(n);
  for (auto& b : m.bits) b = rng.bernoulli(0.4) ? 1 : 0;
  return m;
}

inline std::vector<TokenId> ids_of(const TokenSequence& s) { return s.ids(); }

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path fresh_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("hlguide_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace hlguide::test_support
