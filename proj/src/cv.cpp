#include "ebench/cv.hpp"

#include <numeric>

#include "ebench/error.hpp"
#include "ebench/rng.hpp"

namespace ebench::cv {

std::vector<std::size_t> FoldPlan::train_rows(std::size_t repeat, std::size_t fold) const {
  std::vector<std::size_t> rows;
  const auto& assignment = fold_of.at(repeat);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] != fold) rows.push_back(i);
  }
  return rows;
}

std::vector<std::size_t> FoldPlan::test_rows(std::size_t repeat, std::size_t fold) const {
  std::vector<std::size_t> rows;
  const auto& assignment = fold_of.at(repeat);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] == fold) rows.push_back(i);
  }
  return rows;
}

std::uint64_t FoldPlan::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  feed(k);
  feed(repeats);
  for (const auto& assignment : fold_of) {
    for (std::size_t f : assignment) feed(f);
  }
  return h;
}

FoldPlan make_folds(std::size_t n, std::size_t k, std::size_t repeats, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorCode::kConfiguration, "cross-validation needs k >= 2", {{"k", k}});
  if (k > n) throw Error(ErrorCode::kConfiguration, "more folds than samples", {{"k", k}, {"n", n}});
  if (repeats < 1) throw Error(ErrorCode::kConfiguration, "cross-validation needs at least one repeat");
  FoldPlan plan;
  plan.k = k;
  plan.repeats = repeats;
  plan.seed = seed;
  for (std::size_t r = 0; r < repeats; ++r) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(seed, 0xF01D, r));
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<std::size_t> assignment(n);
    for (std::size_t i = 0; i < n; ++i) assignment[order[i]] = i % k;
    plan.fold_of.push_back(std::move(assignment));
  }
  return plan;
}

}  // namespace ebench::cv
