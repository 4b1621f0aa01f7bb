#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "puda/tape.hpp"

namespace puda::ad {

/// Batch norm behaviour. `train_fixed_stats` normalizes with batch
/// statistics like `train` but leaves the running statistics untouched.
enum class Mode { train, eval, train_fixed_stats };

/// Running statistics owned by one batch-norm layer.
struct BatchNormState {
  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(Shape{channels}, 0.0), running_var(Shape{channels}, 1.0) {}

  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// out = x . w + bias on the last axis; x may have any leading shape.
Var linear(Var x, Var w, Var bias);

/// max(0, x); the subgradient at 0 is 0.
Var relu(Var x);

/// Per-channel normalization over every row of x (all leading axes).
/// Train mode uses batch statistics and updates `state`; eval mode uses
/// the running statistics.
Var batchnorm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode);

/// relu(batchnorm(...)) as one node; same values and gradients, one
/// activation tensor instead of two.
Var batchnorm_relu(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode);

struct PoolResult {
  Var values;
  /// Winning row for each (segment, channel), row-major.
  std::vector<std::size_t> argmax;
};

/// Max over the point axis of x[b, n, c] giving [b, c]. Ties go to the
/// lowest point index.
PoolResult maxpool_points(Var x);

/// Max over row segments of x[rows, c]. Segment s spans rows
/// [offsets[s], offsets[s+1]); result is [segments, c] and argmax holds
/// absolute row indices.
PoolResult maxpool_segments(Var x, std::span<const std::size_t> offsets);

/// Mean over the batch of -log softmax(logits)[label].
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

/// Concatenates along the last axis; leading shapes must match.
Var concat(Var a, Var b);

Var reduce_sum(Var x);
Var reduce_mean(Var x);

/// alpha * d + x.
Var scale_add(Var d, Var x, double alpha);

/// Row-masked scale_add on [n, c] tensors: rows where mask is set become
/// x + alpha * d, every other row is copied from x unchanged.
Var masked_scale_add(Var d, Var x, std::span<const std::uint8_t> mask,
                     double alpha);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var x, double c);
/// Sum of scalars (or equally shaped tensors).
Var add_n(std::span<const Var> xs);

/// out[i, :] = x[rows[i], :] on the [rows, c] view of x.
Var gather_rows(Var x, std::vector<std::size_t> rows);
/// Stacks [n_i, c] tensors into one [sum n_i, c] tensor.
Var concat_rows(std::span<const Var> xs);
/// Rows [begin, end) of the [rows, c] view of x.
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var reshape(Var x, Shape shape);

namespace branch {
/// While alive, nonsmooth ops on this thread (ReLU, max-pool, chamfer
/// nearest neighbours) append a digest of the branch they took. Two
/// evaluations with equal traces lie on the same smooth piece.
class Recorder {
 public:
  Recorder();
  ~Recorder();
  Recorder(const Recorder&) = delete;
  Recorder& operator=(const Recorder&) = delete;
  const std::vector<std::uint64_t>& trace() const { return trace_; }

 private:
  std::vector<std::uint64_t> trace_;
  std::vector<std::uint64_t>* prev_;
};

bool recording();
/// Appends a digest of `choices` to the active recorder, if any.
void note(std::span<const std::size_t> choices);
}  // namespace branch

namespace fault {
/// Multiplies the batch-norm input gradient by (1 + value). Zero in normal
/// operation; set by self-check negative controls to prove the gradient
/// check can fail.
void set_batchnorm_backward_skew(double value);
double batchnorm_backward_skew();
}  // namespace fault

}  // namespace puda::ad
