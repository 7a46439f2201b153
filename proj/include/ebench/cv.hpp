#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace ebench::cv {

// Fold id per row for each repeat. Rows are shuffled with a seeded stream
// (re-shuffled per repeat) and dealt round-robin, so fold sizes differ by at
// most one.
struct FoldPlan {
  std::size_t k = 0;
  std::size_t repeats = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> fold_of;  // [repeat][row]

  std::vector<std::size_t> train_rows(std::size_t repeat, std::size_t fold) const;
  std::vector<std::size_t> test_rows(std::size_t repeat, std::size_t fold) const;
  // FNV-1a over the assignment; equal plans hash equal.
  std::uint64_t fingerprint() const;
};

FoldPlan make_folds(std::size_t n, std::size_t k, std::size_t repeats, std::uint64_t seed);

// Runs fn(i) for i in [0, count) on up to `threads` workers (0 = hardware
// concurrency). Callers write results into per-index slots, so the outcome
// does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn);

}  // namespace ebench::cv

#include "ebench/cv_inl.hpp"
