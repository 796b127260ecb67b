#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mdseg {

// Dense 64-bit float array with reverse-mode autodiff. Ops below record
// backward closures onto the nodes they produce; backward() replays them in
// reverse creation order, which is a valid topological order because every
// op's inputs exist before its output.
struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first backward touches it
    bool requires_grad = false;
    std::uint64_t id = 0;  // monotone creation order
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // nullptr on leaves

    std::size_t size() const;
    void ensure_grad();
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> data,
                       bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool valid() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->size(); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<double>& grad() { return node_->grad; }
    const std::vector<double>& grad() const { return node_->grad; }
    void zero_grad();

    // Drops graph edges, keeping the buffer. Used between training steps on
    // anything retained across steps.
    void detach_();

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<TensorNode> node_;

    friend Tensor make_op_result(std::vector<std::size_t> shape, std::vector<double> data,
                                 std::vector<std::shared_ptr<TensorNode>> parents,
                                 std::function<void(TensorNode&)> backward_fn);
};

enum class NormMode { kTrain, kEval };

// Batch-norm layer state: learned affine plus running statistics. Running
// buffers live outside the autodiff graph.
struct NormState {
    Tensor gamma;  // {1, D}
    Tensor beta;   // {1, D}
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double eps = 1e-5;
    double momentum = 0.1;
    bool update_running = true;  // set false to freeze stats in train mode

    static NormState create(std::size_t dim, bool requires_grad = true);
    std::size_t dim() const { return running_mean.size(); }
};

// --- ops ---

Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise; b may be a row vector {D} or {1, D} broadcast over a's rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor scalar_mul(const Tensor& x, double c);
Tensor sum(const Tensor& x);  // -> scalar {1}

Tensor batch_norm(const Tensor& x, NormState& state, NormMode mode);

// Mean over unmasked rows of -sum_k target * log softmax(logit). ignore_mask
// marks rows excluded from the loss.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<double>& targets,
                             const std::vector<bool>& ignore_mask);

// Per-cell per-channel max; empty cells are zero. argmax_out[c*D+d] holds the
// winning point index or -1; gradient flows only to winners.
Tensor scatter_max(const Tensor& point_feats, const std::vector<std::size_t>& cell_ids,
                   std::size_t num_cells, std::vector<std::ptrdiff_t>* argmax_out = nullptr);

Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& row_ids);

// k x k box mean over an H x W grid flattened row-major into rows of x.
// Columns wrap (azimuth), rows clamp to the grid edge, divisor is always k^2.
Tensor window_mean(const Tensor& x, std::size_t H, std::size_t W, std::size_t k);

Tensor concat_cols(const Tensor& a, const Tensor& b);

void backward(const Tensor& loss);

std::string shape_str(const std::vector<std::size_t>& shape);

}  // namespace mdseg
