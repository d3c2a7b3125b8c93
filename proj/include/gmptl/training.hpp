#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gmptl/common.hpp"
#include "gmptl/nn.hpp"

namespace gmptl {

struct TrainHyperparams {
  double lr = 1e-4;
  int batch_size = 64;
  int epochs = 30;
  std::uint64_t seed = 0;
  bool freeze_encoder = false;
  double clip_norm = 0.0;
};

/// Batch size actually used for `n_examples`; warns when reduced.
int effective_batch_size(int requested, std::size_t n_examples, const std::string& stage);

/// Seeded epoch permutation split into consecutive batches.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, Rng& rng);

/// Simple CSV table: header fixed at construction, numeric rows.
struct CsvLog {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  void add(std::vector<double> row) { rows.push_back(std::move(row)); }
  void write(const std::filesystem::path& path) const;
  std::size_t column(const std::string& name) const;
};

/// Raises DivergedLoss when `loss` is not finite.
void check_finite_loss(double loss, const std::string& stage, long step);

}  // namespace gmptl
