#include "gmptl/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "gmptl/error.hpp"

namespace gmptl {

int effective_batch_size(int requested, std::size_t n_examples, const std::string& stage) {
  if (requested <= 0) fail(ErrorCode::ConfigInvalid, stage + ": batch size must be positive");
  if (n_examples == 0) fail(ErrorCode::EmptyInput, stage + ": no training examples");
  // Keep at least four optimizer steps per epoch.
  const int cap = std::max(1, static_cast<int>(n_examples / 4));
  if (requested > cap) {
    log_warn(stage + ": batch size " + std::to_string(requested) + " reduced to " + std::to_string(cap) + " for " +
             std::to_string(n_examples) + " examples");
    return cap;
  }
  return requested;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Fisher-Yates with explicit draws; std::shuffle is implementation-defined.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

void CsvLog::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) fail(ErrorCode::Io, "cannot write " + path.string());
  for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
  os << '\n';
  os.precision(10);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      os << (i ? "," : "");
      if (i == 0) os << static_cast<long long>(row[i]);
      else os << row[i];
    }
    os << '\n';
  }
}

std::size_t CsvLog::column(const std::string& name) const {
  auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) fail(ErrorCode::RangeViolation, "no log column " + name);
  return static_cast<std::size_t>(it - columns.begin());
}

void check_finite_loss(double loss, const std::string& stage, long step) {
  if (!std::isfinite(loss)) fail(ErrorCode::DivergedLoss, stage + " loss is not finite at step " + std::to_string(step));
}

}  // namespace gmptl
