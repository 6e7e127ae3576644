#ifndef SPANSET_TENSOR_HPP
#define SPANSET_TENSOR_HPP

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace spanset {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

/// Allocator returning 64-byte aligned storage. Vectorized kernels then see the
/// same alignment on every run, which keeps their summation order, and so the
/// results, bit-identical across runs.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

/// Storage of tensor values and gradients.
using Buffer = std::vector<double, AlignedAllocator<double>>;
std::string shape_str(const Shape& shape);

namespace detail {

/// One vertex of the define-by-run graph. Leaves have no backward rule.
struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const noexcept { return !backward; }
  Buffer& ensure_grad();
};

}  // namespace detail

/// Dense row-major array of doubles with optional reverse-mode gradient.
///
/// Every op treats a tensor as a matrix of rows() x cols(), where cols() is
/// the last dimension. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::span<const double> data, bool requires_grad = false);
  static Tensor from(Shape shape, Buffer data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t cols() const;
  std::size_t rows() const;

  std::span<const double> data() const { return node_->value; }
  /// Writable view of a leaf's values (parameters, inputs). Throws for op results.
  std::span<double> mutable_data();
  double item() const;
  double operator()(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; empty span until backward reached this tensor.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  /// Copy of the values with no graph attached.
  Tensor detach() const;

  detail::Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared_node() const noexcept { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_op_result(Shape, Buffer, std::initializer_list<const Tensor*>,
                               std::function<void(detail::Node&)>);
  friend Tensor make_op_result(Shape, Buffer, const std::vector<Tensor>&,
                               std::function<void(detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

/// Builds an op output; records `backward` only when some input needs a gradient
/// and recording is enabled on this thread.
Tensor make_op_result(Shape shape, Buffer value,
                      std::initializer_list<const Tensor*> inputs,
                      std::function<void(detail::Node&)> backward);
Tensor make_op_result(Shape shape, Buffer value, const std::vector<Tensor>& inputs,
                      std::function<void(detail::Node&)> backward);

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled() noexcept;

/// Suspends graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Matrix ops. Shapes are checked; mismatches throw DimensionError.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
/// x * w + bias, bias broadcast over rows. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
/// a / b elementwise, with 0 (and zero gradient) wherever b == 0.
Tensor div_or_zero(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);
/// Natural log of max(x, floor). Entries raised to the floor get no gradient
/// and are counted in `clamped` when it is non-null.
Tensor log_clamped(const Tensor& x, double floor, std::size_t* clamped = nullptr);

/// Softmax along each row, max-subtracted.
Tensor softmax_rows(const Tensor& x);
/// Per-row normalization to zero mean and unit variance, then gain * x + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// out(i, j) = <a_i, b_j> / (|a_i| |b_j| + 1e-8) for rows a_i of a and b_j of b.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
/// Column vector of the entries x(r, c) for each (r, c).
Tensor pick(const Tensor& x, std::span<const std::pair<std::size_t, std::size_t>> entries);
/// Sorts each row of a two-column tensor ascending; gradients follow the values.
Tensor sort_pairs(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Inverted dropout. Identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }

/// Segment layout for batched attention. Query rows [q_offsets[b], q_offsets[b+1])
/// attend only to key rows [k_offsets[b], k_offsets[b+1]) of the same segment,
/// skipping keys whose key_mask entry is non-zero.
struct AttentionLayout {
  std::vector<std::size_t> q_offsets;
  std::vector<std::size_t> k_offsets;
  std::vector<std::uint8_t> key_mask;

  std::size_t segments() const noexcept { return q_offsets.empty() ? 0 : q_offsets.size() - 1; }
  /// One segment covering all rows, nothing masked.
  static AttentionLayout single(std::size_t q_rows, std::size_t k_rows);
};

/// Head-averaged attention weights of one segment, q_rows x k_rows.
struct AttentionMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> weights;
};

/// Scaled dot-product attention over already-projected q, k, v with `heads`
/// heads of width cols / heads. Masked keys receive exactly zero weight.
/// When `maps` is non-null it receives one AttentionMap per segment.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const AttentionLayout& layout, std::vector<AttentionMap>* maps = nullptr);

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls.
void backward(const Tensor& loss);

struct GradCheckOptions {
  double epsilon = 1e-5;
  /// Denominator floor of the relative error, so that near-zero gradients are
  /// compared on an absolute scale.
  double floor = 1e-6;
  /// Check at most this many entries per parameter (evenly strided); 0 = all.
  std::size_t max_entries_per_param = 0;
};

/// Largest elementwise relative error between the reverse-mode gradient and a
/// central finite difference. `loss_fn` must rebuild the graph from `params`
/// on every call. Throws std::domain_error when the loss is non-finite.
double grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                  GradCheckOptions options = {});

}  // namespace spanset

#endif  // SPANSET_TENSOR_HPP
