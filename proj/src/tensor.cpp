#include "mdseg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "mdseg/error.hpp"

namespace mdseg {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

std::size_t TensorNode::size() const { return shape_product(shape); }

void TensorNode::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor make_op_result(std::vector<std::size_t> shape, std::vector<double> data,
                      std::vector<std::shared_ptr<TensorNode>> parents,
                      std::function<void(TensorNode&)> backward_fn) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    node->requires_grad = rg;
    if (rg) {
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
    std::vector<double> data(shape_product(shape), value);
    return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> data,
                    bool requires_grad) {
    if (shape_product(shape) != data.size())
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

double Tensor::item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
}

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

void Tensor::detach_() {
    node_->parents.clear();
    node_->backward_fn = nullptr;
}

NormState NormState::create(std::size_t dim, bool requires_grad) {
    NormState s;
    s.gamma = Tensor::full({1, dim}, 1.0, requires_grad);
    s.beta = Tensor::zeros({1, dim}, requires_grad);
    s.running_mean.assign(dim, 0.0);
    s.running_var.assign(dim, 1.0);
    return s;
}

// --- matmul ---

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<double> out(M * N, 0.0);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
            const double av = ad[i * K + k];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < N; ++j) out[i * N + j] += av * bd[k * N + j];
        }
    auto an = a.node();
    auto bn = b.node();
    return make_op_result(
        {M, N}, std::move(out), {an, bn}, [an, bn, M, K, N](TensorNode& self) {
            const auto& g = self.grad;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t j = 0; j < N; ++j) {
                        const double gv = g[i * N + j];
                        if (gv == 0.0) continue;
                        for (std::size_t k = 0; k < K; ++k)
                            an->grad[i * K + k] += gv * bn->data[k * N + j];
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t k = 0; k < K; ++k) {
                        const double av = an->data[i * K + k];
                        if (av == 0.0) continue;
                        for (std::size_t j = 0; j < N; ++j)
                            bn->grad[k * N + j] += av * self.grad[i * N + j];
                    }
            }
        });
}

// --- elementwise with trailing-axis broadcast ---

namespace {

enum class BinKind { kAdd, kSub, kMul };

bool broadcast_ok(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2) return false;
    if (b.rank() == 1 && b.dim(0) == a.dim(1)) return true;
    if (b.rank() == 2 && b.dim(0) == 1 && b.dim(1) == a.dim(1)) return true;
    return false;
}

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind) {
    const bool same = a.shape() == b.shape();
    const bool bcast = !same && broadcast_ok(a, b);
    if (!same && !bcast)
        throw DimensionError("elementwise shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const std::size_t n = a.size();
    const std::size_t D = bcast ? a.dim(1) : n;
    std::vector<double> out(n);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double bv = bcast ? bd[i % D] : bd[i];
        switch (kind) {
            case BinKind::kAdd: out[i] = ad[i] + bv; break;
            case BinKind::kSub: out[i] = ad[i] - bv; break;
            case BinKind::kMul: out[i] = ad[i] * bv; break;
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op_result(
        a.shape(), std::move(out), {an, bn}, [an, bn, kind, bcast, D, n](TensorNode& self) {
            const auto& g = self.grad;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    const double bv = bcast ? bn->data[i % D] : bn->data[i];
                    an->grad[i] += (kind == BinKind::kMul) ? g[i] * bv : g[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    double gi = g[i];
                    if (kind == BinKind::kSub) gi = -gi;
                    if (kind == BinKind::kMul) gi = self.grad[i] * an->data[i];
                    bn->grad[bcast ? i % D : i] += gi;
                }
            }
        });
}

Tensor unary_op(const Tensor& x, double (*fwd)(double), double (*dfdx)(double, double)) {
    const std::size_t n = x.size();
    std::vector<double> out(n);
    const auto& xd = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(xd[i]);
    auto xn = x.node();
    return make_op_result(x.shape(), std::move(out), {xn}, [xn, dfdx, n](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
            xn->grad[i] += self.grad[i] * dfdx(xn->data[i], self.data[i]);
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::kAdd); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::kSub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::kMul); }

Tensor relu(const Tensor& x) {
    return unary_op(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        // derivative at exactly 0 is 0
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor scalar_mul(const Tensor& x, double c) {
    const std::size_t n = x.size();
    std::vector<double> out(n);
    const auto& xd = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = xd[i] * c;
    auto xn = x.node();
    return make_op_result(x.shape(), std::move(out), {xn}, [xn, c, n](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) xn->grad[i] += self.grad[i] * c;
    });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    auto xn = x.node();
    return make_op_result({1}, {s}, {xn}, [xn](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (double& g : xn->grad) g += self.grad[0];
    });
}

// --- batch norm ---

Tensor batch_norm(const Tensor& x, NormState& state, NormMode mode) {
    if (x.rank() != 2 || x.dim(1) != state.dim())
        throw DimensionError("batch_norm expects [N x " + std::to_string(state.dim()) +
                             "], got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), D = x.dim(1);
    if (mode == NormMode::kTrain && N < 2)
        throw ValueError("batch_norm train mode needs N >= 2, got N=" + std::to_string(N));

    std::vector<double> mean(D, 0.0), var(D, 0.0);
    const auto& xd = x.data();
    if (mode == NormMode::kTrain) {
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t d = 0; d < D; ++d) mean[d] += xd[i * D + d];
        for (std::size_t d = 0; d < D; ++d) mean[d] /= static_cast<double>(N);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t d = 0; d < D; ++d) {
                const double c = xd[i * D + d] - mean[d];
                var[d] += c * c;
            }
        for (std::size_t d = 0; d < D; ++d) var[d] /= static_cast<double>(N);
        if (state.update_running) {
            const double m = state.momentum;
            for (std::size_t d = 0; d < D; ++d) {
                state.running_mean[d] = (1.0 - m) * state.running_mean[d] + m * mean[d];
                state.running_var[d] = (1.0 - m) * state.running_var[d] + m * var[d];
            }
        }
    } else {
        mean = state.running_mean;
        var = state.running_var;
    }

    std::vector<double> inv_std(D);
    for (std::size_t d = 0; d < D; ++d) inv_std[d] = 1.0 / std::sqrt(var[d] + state.eps);

    auto xhat = std::make_shared<std::vector<double>>(N * D);
    std::vector<double> out(N * D);
    const auto& gd = state.gamma.data();
    const auto& bd = state.beta.data();
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t d = 0; d < D; ++d) {
            const double h = (xd[i * D + d] - mean[d]) * inv_std[d];
            (*xhat)[i * D + d] = h;
            out[i * D + d] = gd[d] * h + bd[d];
        }

    auto xn = x.node();
    auto gn = state.gamma.node();
    auto bn = state.beta.node();
    const bool train = mode == NormMode::kTrain;
    return make_op_result(
        x.shape(), std::move(out), {xn, gn, bn},
        [xn, gn, bn, xhat, inv_std, N, D, train](TensorNode& self) {
            const auto& g = self.grad;
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (std::size_t i = 0; i < N; ++i)
                    for (std::size_t d = 0; d < D; ++d)
                        gn->grad[d] += g[i * D + d] * (*xhat)[i * D + d];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < N; ++i)
                    for (std::size_t d = 0; d < D; ++d) bn->grad[d] += g[i * D + d];
            }
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            if (!train) {
                // eval mode: stats are constants
                for (std::size_t i = 0; i < N; ++i)
                    for (std::size_t d = 0; d < D; ++d)
                        xn->grad[i * D + d] += g[i * D + d] * gn->data[d] * inv_std[d];
                return;
            }
            for (std::size_t d = 0; d < D; ++d) {
                double sum_g = 0.0, sum_gh = 0.0;
                for (std::size_t i = 0; i < N; ++i) {
                    sum_g += g[i * D + d];
                    sum_gh += g[i * D + d] * (*xhat)[i * D + d];
                }
                const double mg = sum_g / static_cast<double>(N);
                const double mgh = sum_gh / static_cast<double>(N);
                const double scale = gn->data[d] * inv_std[d];
                for (std::size_t i = 0; i < N; ++i)
                    xn->grad[i * D + d] +=
                        scale * (g[i * D + d] - mg - (*xhat)[i * D + d] * mgh);
            }
        });
}

// --- softmax cross entropy ---

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<double>& targets,
                             const std::vector<bool>& ignore_mask) {
    if (logits.rank() != 2)
        throw DimensionError("softmax_cross_entropy expects 2-D logits, got " +
                             shape_str(logits.shape()));
    const std::size_t N = logits.dim(0), K = logits.dim(1);
    if (targets.size() != N * K)
        throw DimensionError("target matrix size " + std::to_string(targets.size()) +
                             " does not match logits " + shape_str(logits.shape()));
    if (ignore_mask.size() != N)
        throw DimensionError("ignore mask length " + std::to_string(ignore_mask.size()) +
                             " does not match N=" + std::to_string(N));

    std::size_t unmasked = 0;
    for (std::size_t i = 0; i < N; ++i) {
        if (ignore_mask[i]) continue;
        ++unmasked;
        double row_sum = 0.0;
        for (std::size_t k = 0; k < K; ++k) row_sum += targets[i * K + k];
        if (std::abs(row_sum - 1.0) > 1e-6)
            throw ValueError("target row " + std::to_string(i) + " sums to " +
                             std::to_string(row_sum) + ", expected 1");
    }
    if (unmasked == 0) throw ValueError("softmax_cross_entropy: all rows masked");

    const auto& ld = logits.data();
    auto probs = std::make_shared<std::vector<double>>(N * K);
    double loss = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, ld[i * K + k]);
        double denom = 0.0;
        for (std::size_t k = 0; k < K; ++k) denom += std::exp(ld[i * K + k] - mx);
        const double log_denom = std::log(denom);
        for (std::size_t k = 0; k < K; ++k)
            (*probs)[i * K + k] = std::exp(ld[i * K + k] - mx) / denom;
        if (ignore_mask[i]) continue;
        for (std::size_t k = 0; k < K; ++k) {
            const double t = targets[i * K + k];
            if (t != 0.0) loss -= t * (ld[i * K + k] - mx - log_denom);
        }
    }
    loss /= static_cast<double>(unmasked);

    auto ln = logits.node();
    auto tgt = std::make_shared<std::vector<double>>(targets);
    auto mask = std::make_shared<std::vector<bool>>(ignore_mask);
    return make_op_result(
        {1}, {loss}, {ln}, [ln, probs, tgt, mask, N, K, unmasked](TensorNode& self) {
            if (!ln->requires_grad) return;
            ln->ensure_grad();
            const double g = self.grad[0] / static_cast<double>(unmasked);
            for (std::size_t i = 0; i < N; ++i) {
                if ((*mask)[i]) continue;
                for (std::size_t k = 0; k < K; ++k)
                    ln->grad[i * K + k] += g * ((*probs)[i * K + k] - (*tgt)[i * K + k]);
            }
        });
}

// --- scatter / gather ---

Tensor scatter_max(const Tensor& point_feats, const std::vector<std::size_t>& cell_ids,
                   std::size_t num_cells, std::vector<std::ptrdiff_t>* argmax_out) {
    if (point_feats.rank() != 2)
        throw DimensionError("scatter_max expects 2-D features, got " +
                             shape_str(point_feats.shape()));
    const std::size_t N = point_feats.dim(0), D = point_feats.dim(1);
    if (cell_ids.size() != N)
        throw DimensionError("scatter_max: " + std::to_string(cell_ids.size()) +
                             " cell ids for " + std::to_string(N) + " points");
    for (std::size_t i = 0; i < N; ++i)
        if (cell_ids[i] >= num_cells)
            throw IndexError("scatter_max: cell id " + std::to_string(cell_ids[i]) +
                             " out of range [0, " + std::to_string(num_cells) + ")");

    auto argmax = std::make_shared<std::vector<std::ptrdiff_t>>(num_cells * D, -1);
    std::vector<double> out(num_cells * D, 0.0);
    const auto& pd = point_feats.data();
    for (std::size_t i = 0; i < N; ++i) {
        const std::size_t c = cell_ids[i];
        for (std::size_t d = 0; d < D; ++d) {
            auto& a = (*argmax)[c * D + d];
            const double v = pd[i * D + d];
            if (a < 0 || v > out[c * D + d]) {
                a = static_cast<std::ptrdiff_t>(i);
                out[c * D + d] = v;
            }
        }
    }
    if (argmax_out) *argmax_out = *argmax;

    auto pn = point_feats.node();
    return make_op_result(
        {num_cells, D}, std::move(out), {pn}, [pn, argmax, num_cells, D](TensorNode& self) {
            if (!pn->requires_grad) return;
            pn->ensure_grad();
            for (std::size_t c = 0; c < num_cells; ++c)
                for (std::size_t d = 0; d < D; ++d) {
                    const std::ptrdiff_t i = (*argmax)[c * D + d];
                    if (i >= 0)
                        pn->grad[static_cast<std::size_t>(i) * D + d] += self.grad[c * D + d];
                }
        });
}

Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& row_ids) {
    if (src.rank() != 2)
        throw DimensionError("gather_rows expects 2-D source, got " + shape_str(src.shape()));
    const std::size_t C = src.dim(0), D = src.dim(1), N = row_ids.size();
    for (std::size_t id : row_ids)
        if (id >= C)
            throw IndexError("gather_rows: row id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(C) + ")");
    std::vector<double> out(N * D);
    const auto& sd = src.data();
    for (std::size_t i = 0; i < N; ++i)
        std::copy_n(sd.begin() + static_cast<std::ptrdiff_t>(row_ids[i] * D), D,
                    out.begin() + static_cast<std::ptrdiff_t>(i * D));
    auto sn = src.node();
    auto ids = std::make_shared<std::vector<std::size_t>>(row_ids);
    return make_op_result({N, D}, std::move(out), {sn}, [sn, ids, N, D](TensorNode& self) {
        if (!sn->requires_grad) return;
        sn->ensure_grad();
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t d = 0; d < D; ++d)
                sn->grad[(*ids)[i] * D + d] += self.grad[i * D + d];
    });
}

// --- window mean ---

Tensor window_mean(const Tensor& x, std::size_t H, std::size_t W, std::size_t k) {
    if (k % 2 == 0) throw ConfigError("window_mean: window size must be odd, got " +
                                      std::to_string(k));
    if (x.rank() != 2 || x.dim(0) != H * W)
        throw DimensionError("window_mean expects [" + std::to_string(H * W) + " x D], got " +
                             shape_str(x.shape()));
    const std::size_t D = x.dim(1);
    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(k / 2);
    const double inv = 1.0 / (static_cast<double>(k) * static_cast<double>(k));
    const auto& xd = x.data();
    std::vector<double> out(H * W * D, 0.0);
    const auto iH = static_cast<std::ptrdiff_t>(H);
    const auto iW = static_cast<std::ptrdiff_t>(W);
    for (std::ptrdiff_t r = 0; r < iH; ++r)
        for (std::ptrdiff_t c = 0; c < iW; ++c) {
            double* orow = out.data() + (r * iW + c) * static_cast<std::ptrdiff_t>(D);
            for (std::ptrdiff_t dr = -h; dr <= h; ++dr) {
                const std::ptrdiff_t rr = std::clamp(r + dr, std::ptrdiff_t{0}, iH - 1);
                for (std::ptrdiff_t dc = -h; dc <= h; ++dc) {
                    const std::ptrdiff_t cc = ((c + dc) % iW + iW) % iW;
                    const double* irow =
                        xd.data() + (rr * iW + cc) * static_cast<std::ptrdiff_t>(D);
                    for (std::size_t d = 0; d < D; ++d) orow[d] += irow[d];
                }
            }
            for (std::size_t d = 0; d < D; ++d) orow[d] *= inv;
        }
    auto xn = x.node();
    return make_op_result(
        x.shape(), std::move(out), {xn}, [xn, H, W, D, h, inv](TensorNode& self) {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const auto iH = static_cast<std::ptrdiff_t>(H);
            const auto iW = static_cast<std::ptrdiff_t>(W);
            for (std::ptrdiff_t r = 0; r < iH; ++r)
                for (std::ptrdiff_t c = 0; c < iW; ++c) {
                    const double* grow =
                        self.grad.data() + (r * iW + c) * static_cast<std::ptrdiff_t>(D);
                    for (std::ptrdiff_t dr = -h; dr <= h; ++dr) {
                        const std::ptrdiff_t rr = std::clamp(r + dr, std::ptrdiff_t{0}, iH - 1);
                        for (std::ptrdiff_t dc = -h; dc <= h; ++dc) {
                            const std::ptrdiff_t cc = ((c + dc) % iW + iW) % iW;
                            double* irow = xn->grad.data() +
                                           (rr * iW + cc) * static_cast<std::ptrdiff_t>(D);
                            for (std::size_t d = 0; d < D; ++d) irow[d] += grow[d] * inv;
                        }
                    }
                }
        });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        throw DimensionError("concat_cols row mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const std::size_t N = a.dim(0), Da = a.dim(1), Db = b.dim(1);
    std::vector<double> out(N * (Da + Db));
    for (std::size_t i = 0; i < N; ++i) {
        std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(i * Da), Da,
                    out.begin() + static_cast<std::ptrdiff_t>(i * (Da + Db)));
        std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(i * Db), Db,
                    out.begin() + static_cast<std::ptrdiff_t>(i * (Da + Db) + Da));
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op_result(
        {N, Da + Db}, std::move(out), {an, bn}, [an, bn, N, Da, Db](TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < N; ++i)
                    for (std::size_t d = 0; d < Da; ++d)
                        an->grad[i * Da + d] += self.grad[i * (Da + Db) + d];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < N; ++i)
                    for (std::size_t d = 0; d < Db; ++d)
                        bn->grad[i * Db + d] += self.grad[i * (Da + Db) + Da + d];
            }
        });
}

// --- backward ---

void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw DimensionError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    auto root = loss.node();
    if (!root->requires_grad) return;

    // Collect reachable grad-requiring nodes; creation ids give a topological
    // order since inputs always predate outputs.
    std::vector<std::shared_ptr<TensorNode>> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::shared_ptr<TensorNode>> stack{root};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });

    // Interior grads are scratch space for this pass; only leaves accumulate
    // across repeated calls.
    for (auto& n : order)
        if (n->backward_fn && !n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), 0.0);

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto& n : order)
        if (n->backward_fn) n->backward_fn(*n);
}

}  // namespace mdseg
