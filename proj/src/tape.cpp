#include "tfids/tape.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "tfids/errors.hpp"

namespace tfids::ad {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap map2(const Tensor& t, int rows, int cols) {
    return ConstMatMap(t.data(), rows, cols);
}

MatMap map2(Tensor& t, int rows, int cols) {
    return MatMap(t.data(), rows, cols);
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw NumericError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

[[noreturn]] void shape_error(const char* op, const Shape& a) {
    throw NumericError(std::string(op) + ": unsupported shape " + shape_str(a));
}

constexpr float kInvSqrt2 = 0.70710678118654752f;
constexpr float kInvSqrt2Pi = 0.39894228040143268f;

} // namespace

const Shape& Var::shape() const { return value().shape(); }
std::int64_t Var::size() const { return value().size(); }
const Tensor& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_ != nullptr && tape_->var_requires_grad(*this); }

int Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
}

const Tape::Node& Tape::node(Var v) const {
    return nodes_[static_cast<size_t>(v.id())];
}

void Tape::require_same_tape(Var v, const char* op) const {
    if (!v.valid() || v.tape_ != this || v.id_ < 0 ||
        v.id_ >= static_cast<int>(nodes_.size())) {
        throw NumericError(std::string(op) + ": operand does not belong to this tape");
    }
}

const Tensor& Tape::value(Var v) const {
    require_same_tape(v, "value");
    return node(v).value;
}

bool Tape::var_requires_grad(Var v) const {
    require_same_tape(v, "requires_grad");
    return node(v).requires_grad;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return wrap(push(std::move(n)));
}

Var Tape::matmul(Var a, Var b) {
    require_same_tape(a, "matmul");
    require_same_tape(b, "matmul");
    const Tensor& ta = node(a).value;
    const Tensor& tb = node(b).value;
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
        shape_error("matmul", ta.shape(), tb.shape());
    }
    const int m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    Node out;
    out.op = Op::Matmul;
    out.value = Tensor({m, n});
    map2(out.value, m, n).noalias() = map2(ta, m, k) * map2(tb, k, n);
    out.parents = {a.id_, b.id_, -1};
    out.n_parents = 2;
    out.requires_grad = node(a).requires_grad || node(b).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::bmm(Var a, Var b) {
    require_same_tape(a, "bmm");
    require_same_tape(b, "bmm");
    const Tensor& ta = node(a).value;
    const Tensor& tb = node(b).value;
    if (ta.rank() != 3 || tb.rank() != 3 || ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(1)) {
        shape_error("bmm", ta.shape(), tb.shape());
    }
    const int bt = ta.dim(0), m = ta.dim(1), k = ta.dim(2), n = tb.dim(2);
    Node out;
    out.op = Op::BatchMatmul;
    out.value = Tensor({bt, m, n});
    for (int i = 0; i < bt; ++i) {
        ConstMatMap ma(ta.data() + static_cast<std::int64_t>(i) * m * k, m, k);
        ConstMatMap mb(tb.data() + static_cast<std::int64_t>(i) * k * n, k, n);
        MatMap mo(out.value.data() + static_cast<std::int64_t>(i) * m * n, m, n);
        mo.noalias() = ma * mb;
    }
    out.parents = {a.id_, b.id_, -1};
    out.n_parents = 2;
    out.requires_grad = node(a).requires_grad || node(b).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::transpose_last(Var a) {
    require_same_tape(a, "transpose_last");
    const Tensor& ta = node(a).value;
    if (ta.rank() != 2 && ta.rank() != 3) shape_error("transpose_last", ta.shape());
    Node out;
    out.op = Op::TransposeLast;
    Shape os = ta.shape();
    std::swap(os[os.size() - 1], os[os.size() - 2]);
    out.value = Tensor(os);
    const int batch = ta.rank() == 3 ? ta.dim(0) : 1;
    const int m = ta.dim(ta.rank() - 2), n = ta.dim(ta.rank() - 1);
    for (int i = 0; i < batch; ++i) {
        ConstMatMap src(ta.data() + static_cast<std::int64_t>(i) * m * n, m, n);
        MatMap dst(out.value.data() + static_cast<std::int64_t>(i) * m * n, n, m);
        dst = src.transpose();
    }
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

namespace {
void permute0213_kernel(const float* src, float* dst, int d0, int d1, int d2, int d3) {
    // (d0,d1,d2,d3) -> (d0,d2,d1,d3)
    for (int i0 = 0; i0 < d0; ++i0) {
        for (int i1 = 0; i1 < d1; ++i1) {
            for (int i2 = 0; i2 < d2; ++i2) {
                const float* s =
                    src + (((static_cast<std::int64_t>(i0) * d1 + i1) * d2 + i2) * d3);
                float* d = dst + (((static_cast<std::int64_t>(i0) * d2 + i2) * d1 + i1) * d3);
                std::copy(s, s + d3, d);
            }
        }
    }
}
} // namespace

Var Tape::permute_0213(Var a) {
    require_same_tape(a, "permute_0213");
    const Tensor& ta = node(a).value;
    if (ta.rank() != 4) shape_error("permute_0213", ta.shape());
    Node out;
    out.op = Op::Permute0213;
    out.value = Tensor({ta.dim(0), ta.dim(2), ta.dim(1), ta.dim(3)});
    permute0213_kernel(ta.data(), out.value.data(), ta.dim(0), ta.dim(1), ta.dim(2), ta.dim(3));
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::reshape(Var a, Shape shape) {
    require_same_tape(a, "reshape");
    const Tensor& ta = node(a).value;
    if (shape_numel(shape) != ta.size()) shape_error("reshape", ta.shape(), shape);
    Node out;
    out.op = Op::Reshape;
    out.value = Tensor(std::move(shape), ta.values());
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::add(Var a, Var b) {
    require_same_tape(a, "add");
    require_same_tape(b, "add");
    const Tensor& ta = node(a).value;
    const Tensor& tb = node(b).value;
    if (ta.shape() != tb.shape()) shape_error("add", ta.shape(), tb.shape());
    Node out;
    out.op = Op::Add;
    out.value = Tensor(ta.shape(), ta.values());
    const float* pb = tb.data();
    float* po = out.value.data();
    for (std::int64_t i = 0; i < ta.size(); ++i) po[i] += pb[i];
    out.parents = {a.id_, b.id_, -1};
    out.n_parents = 2;
    out.requires_grad = node(a).requires_grad || node(b).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::sub(Var a, Var b) {
    require_same_tape(a, "sub");
    require_same_tape(b, "sub");
    const Tensor& ta = node(a).value;
    const Tensor& tb = node(b).value;
    if (ta.shape() != tb.shape()) shape_error("sub", ta.shape(), tb.shape());
    Node out;
    out.op = Op::Sub;
    out.value = Tensor(ta.shape(), ta.values());
    const float* pb = tb.data();
    float* po = out.value.data();
    for (std::int64_t i = 0; i < ta.size(); ++i) po[i] -= pb[i];
    out.parents = {a.id_, b.id_, -1};
    out.n_parents = 2;
    out.requires_grad = node(a).requires_grad || node(b).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::add_rowvec(Var a, Var bias) {
    require_same_tape(a, "add_rowvec");
    require_same_tape(bias, "add_rowvec");
    const Tensor& ta = node(a).value;
    const Tensor& tb = node(bias).value;
    const int n = ta.dim(ta.rank() - 1);
    if (tb.rank() != 1 || tb.dim(0) != n) shape_error("add_rowvec", ta.shape(), tb.shape());
    Node out;
    out.op = Op::AddRowVec;
    out.value = Tensor(ta.shape(), ta.values());
    const std::int64_t rows = ta.size() / n;
    float* po = out.value.data();
    const float* pb = tb.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        for (int j = 0; j < n; ++j) po[r * n + j] += pb[j];
    }
    out.parents = {a.id_, bias.id_, -1};
    out.n_parents = 2;
    out.requires_grad = node(a).requires_grad || node(bias).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::mul(Var a, Var b) {
    require_same_tape(a, "mul");
    require_same_tape(b, "mul");
    const Tensor& ta = node(a).value;
    const Tensor& tb = node(b).value;
    if (ta.shape() != tb.shape()) shape_error("mul", ta.shape(), tb.shape());
    Node out;
    out.op = Op::Mul;
    out.value = Tensor(ta.shape(), ta.values());
    const float* pb = tb.data();
    float* po = out.value.data();
    for (std::int64_t i = 0; i < ta.size(); ++i) po[i] *= pb[i];
    out.parents = {a.id_, b.id_, -1};
    out.n_parents = 2;
    out.requires_grad = node(a).requires_grad || node(b).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::affine(Var a, float scale, float shift) {
    require_same_tape(a, "affine");
    const Tensor& ta = node(a).value;
    Node out;
    out.op = Op::Affine;
    out.value = Tensor(ta.shape(), ta.values());
    for (auto& v : out.value.values()) v = scale * v + shift;
    out.a = scale;
    out.b = shift;
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::relu(Var a) {
    require_same_tape(a, "relu");
    const Tensor& ta = node(a).value;
    Node out;
    out.op = Op::Relu;
    out.value = Tensor(ta.shape(), ta.values());
    for (auto& v : out.value.values()) v = v > 0.0f ? v : 0.0f;
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::gelu(Var a) {
    require_same_tape(a, "gelu");
    const Tensor& ta = node(a).value;
    Node out;
    out.op = Op::Gelu;
    out.value = Tensor(ta.shape(), ta.values());
    for (auto& v : out.value.values()) {
        v = v * 0.5f * (1.0f + std::erf(v * kInvSqrt2));
    }
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::sigmoid(Var a) {
    require_same_tape(a, "sigmoid");
    const Tensor& ta = node(a).value;
    Node out;
    out.op = Op::Sigmoid;
    out.value = Tensor(ta.shape(), ta.values());
    for (auto& v : out.value.values()) v = 1.0f / (1.0f + std::exp(-v));
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::log_clamped(Var a, float floor) {
    require_same_tape(a, "log_clamped");
    const Tensor& ta = node(a).value;
    Node out;
    out.op = Op::LogClamped;
    out.value = Tensor(ta.shape(), ta.values());
    for (auto& v : out.value.values()) v = std::log(v > floor ? v : floor);
    out.a = floor;
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::clamp(Var a, float lo, float hi) {
    require_same_tape(a, "clamp");
    const Tensor& ta = node(a).value;
    Node out;
    out.op = Op::Clamp;
    out.value = Tensor(ta.shape(), ta.values());
    for (auto& v : out.value.values()) v = v < lo ? lo : (v > hi ? hi : v);
    out.a = lo;
    out.b = hi;
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::softmax_lastdim(Var a) {
    require_same_tape(a, "softmax_lastdim");
    const Tensor& ta = node(a).value;
    const int n = ta.dim(ta.rank() - 1);
    Node out;
    out.op = Op::SoftmaxLast;
    out.value = Tensor(ta.shape(), ta.values());
    const std::int64_t rows = ta.size() / n;
    float* p = out.value.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        float* row = p + r * n;
        float mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        float sum = 0.0f;
        for (int j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        const float inv = 1.0f / sum;
        for (int j = 0; j < n; ++j) row[j] *= inv;
    }
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::layer_norm_lastdim(Var x, Var gamma, Var beta, float eps) {
    require_same_tape(x, "layer_norm");
    require_same_tape(gamma, "layer_norm");
    require_same_tape(beta, "layer_norm");
    const Tensor& tx = node(x).value;
    const int n = tx.dim(tx.rank() - 1);
    const Tensor& tg = node(gamma).value;
    const Tensor& tb = node(beta).value;
    if (tg.rank() != 1 || tg.dim(0) != n || tb.rank() != 1 || tb.dim(0) != n) {
        shape_error("layer_norm", tx.shape(), tg.shape());
    }
    Node out;
    out.op = Op::LayerNormLast;
    out.value = Tensor(tx.shape());
    const std::int64_t rows = tx.size() / n;
    out.faux.resize(static_cast<size_t>(rows) * 2); // per row: mean, inv_std
    const float* px = tx.data();
    const float* pg = tg.data();
    const float* pb = tb.data();
    float* po = out.value.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* row = px + r * n;
        float mean = 0.0f;
        for (int j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<float>(n);
        float var = 0.0f;
        for (int j = 0; j < n; ++j) {
            const float d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<float>(n);
        const float inv = 1.0f / std::sqrt(var + eps);
        out.faux[static_cast<size_t>(r) * 2] = mean;
        out.faux[static_cast<size_t>(r) * 2 + 1] = inv;
        for (int j = 0; j < n; ++j) {
            po[r * n + j] = (row[j] - mean) * inv * pg[j] + pb[j];
        }
    }
    out.a = eps;
    out.parents = {x.id_, gamma.id_, beta.id_};
    out.n_parents = 3;
    out.requires_grad =
        node(x).requires_grad || node(gamma).requires_grad || node(beta).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::embedding(Var table, const std::vector<int>& indices) {
    require_same_tape(table, "embedding");
    const Tensor& tt = node(table).value;
    if (tt.rank() != 2) shape_error("embedding", tt.shape());
    const int vocab = tt.dim(0), e = tt.dim(1);
    Node out;
    out.op = Op::Embedding;
    out.value = Tensor({static_cast<int>(indices.size()), e});
    out.iaux.assign(indices.begin(), indices.end());
    float* po = out.value.data();
    for (size_t i = 0; i < indices.size(); ++i) {
        const int idx = indices[i];
        if (idx < 0 || idx >= vocab) {
            throw DataError("embedding: index " + std::to_string(idx) +
                            " out of range for vocabulary of size " + std::to_string(vocab));
        }
        std::copy(tt.data() + static_cast<std::int64_t>(idx) * e,
                  tt.data() + static_cast<std::int64_t>(idx + 1) * e,
                  po + static_cast<std::int64_t>(i) * e);
    }
    out.parents = {table.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(table).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::concat_lastdim(Var a, Var b) {
    require_same_tape(a, "concat_lastdim");
    require_same_tape(b, "concat_lastdim");
    const Tensor& ta = node(a).value;
    const Tensor& tb = node(b).value;
    if (ta.rank() != tb.rank()) shape_error("concat_lastdim", ta.shape(), tb.shape());
    for (int i = 0; i + 1 < ta.rank(); ++i) {
        if (ta.dim(i) != tb.dim(i)) shape_error("concat_lastdim", ta.shape(), tb.shape());
    }
    const int p = ta.dim(ta.rank() - 1), q = tb.dim(tb.rank() - 1);
    Shape os = ta.shape();
    os.back() = p + q;
    Node out;
    out.op = Op::ConcatLast;
    out.value = Tensor(os);
    const std::int64_t rows = ta.size() / p;
    float* po = out.value.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        std::copy(ta.data() + r * p, ta.data() + (r + 1) * p, po + r * (p + q));
        std::copy(tb.data() + r * q, tb.data() + (r + 1) * q, po + r * (p + q) + p);
    }
    out.a = static_cast<float>(p);
    out.parents = {a.id_, b.id_, -1};
    out.n_parents = 2;
    out.requires_grad = node(a).requires_grad || node(b).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::dropout(Var a, float rate, Rng& rng) {
    require_same_tape(a, "dropout");
    if (rate <= 0.0f) return a;
    if (rate >= 1.0f) throw NumericError("dropout: rate must be < 1");
    const Tensor& ta = node(a).value;
    Node out;
    out.op = Op::Dropout;
    out.value = Tensor(ta.shape());
    out.faux.resize(static_cast<size_t>(ta.size()));
    const float keep_scale = 1.0f / (1.0f - rate);
    const float* pa = ta.data();
    float* po = out.value.data();
    for (std::int64_t i = 0; i < ta.size(); ++i) {
        const float m = rng.uniform01() < rate ? 0.0f : keep_scale;
        out.faux[static_cast<size_t>(i)] = m;
        po[i] = pa[i] * m;
    }
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::select_step(Var a, int step) {
    require_same_tape(a, "select_step");
    const Tensor& ta = node(a).value;
    if (ta.rank() != 3 || step < 0 || step >= ta.dim(1)) shape_error("select_step", ta.shape());
    const int B = ta.dim(0), L = ta.dim(1), D = ta.dim(2);
    Node out;
    out.op = Op::SelectStep;
    out.value = Tensor({B, D});
    for (int i = 0; i < B; ++i) {
        const float* src = ta.data() + (static_cast<std::int64_t>(i) * L + step) * D;
        std::copy(src, src + D, out.value.data() + static_cast<std::int64_t>(i) * D);
    }
    out.a = static_cast<float>(step);
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::mean_axis1(Var a) {
    require_same_tape(a, "mean_axis1");
    const Tensor& ta = node(a).value;
    if (ta.rank() != 3) shape_error("mean_axis1", ta.shape());
    const int B = ta.dim(0), L = ta.dim(1), D = ta.dim(2);
    Node out;
    out.op = Op::MeanAxis1;
    out.value = Tensor({B, D});
    const float inv = 1.0f / static_cast<float>(L);
    for (int i = 0; i < B; ++i) {
        float* dst = out.value.data() + static_cast<std::int64_t>(i) * D;
        for (int l = 0; l < L; ++l) {
            const float* src = ta.data() + (static_cast<std::int64_t>(i) * L + l) * D;
            for (int j = 0; j < D; ++j) dst[j] += src[j];
        }
        for (int j = 0; j < D; ++j) dst[j] *= inv;
    }
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::sum_all(Var a) {
    require_same_tape(a, "sum_all");
    const Tensor& ta = node(a).value;
    double acc = 0.0;
    for (std::int64_t i = 0; i < ta.size(); ++i) acc += ta[i];
    Node out;
    out.op = Op::SumAll;
    out.value = Tensor::scalar(static_cast<float>(acc));
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Var Tape::mean_all(Var a) {
    require_same_tape(a, "mean_all");
    const Tensor& ta = node(a).value;
    double acc = 0.0;
    for (std::int64_t i = 0; i < ta.size(); ++i) acc += ta[i];
    Node out;
    out.op = Op::MeanAll;
    out.value = Tensor::scalar(static_cast<float>(acc / static_cast<double>(ta.size())));
    out.parents = {a.id_, -1, -1};
    out.n_parents = 1;
    out.requires_grad = node(a).requires_grad;
    return wrap(push(std::move(out)));
}

Tensor& Tape::grad_buf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) n.grad = Tensor(n.value.shape());
    return n.grad;
}

void Tape::add_into_grad(int id, const float* src, std::int64_t n) {
    Tensor& g = grad_buf(id);
    float* dst = g.data();
    for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

void Tape::backward(Var loss) {
    require_same_tape(loss, "backward");
    if (backward_done_) {
        throw std::logic_error("Tape::backward: tape already replayed; build a fresh tape");
    }
    backward_done_ = true;
    const Node& ln = node(loss);
    if (ln.value.size() != 1) {
        throw NumericError("backward: loss must be scalar, got shape " +
                           shape_str(ln.value.shape()));
    }
    if (!ln.requires_grad) return; // nothing differentiable upstream
    grad_buf(loss.id_)[0] = 1.0f;
    for (int id = loss.id_; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad || n.grad.size() == 0) continue;
        backward_node(id);
    }
}

void Tape::backward_node(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    const Tensor& g = n.grad;
    auto parent_needs = [&](int slot) {
        const int p = n.parents[static_cast<size_t>(slot)];
        return p >= 0 && nodes_[static_cast<size_t>(p)].requires_grad;
    };
    auto pval = [&](int slot) -> const Tensor& {
        return nodes_[static_cast<size_t>(n.parents[static_cast<size_t>(slot)])].value;
    };

    switch (n.op) {
    case Op::Leaf:
        break;
    case Op::Matmul: {
        const Tensor& A = pval(0);
        const Tensor& B = pval(1);
        const int m = A.dim(0), k = A.dim(1), c = B.dim(1);
        if (parent_needs(0)) {
            Tensor& ga = grad_buf(n.parents[0]);
            map2(ga, m, k).noalias() += map2(g, m, c) * map2(B, k, c).transpose();
        }
        if (parent_needs(1)) {
            Tensor& gb = grad_buf(n.parents[1]);
            map2(gb, k, c).noalias() += map2(A, m, k).transpose() * map2(g, m, c);
        }
        break;
    }
    case Op::BatchMatmul: {
        const Tensor& A = pval(0);
        const Tensor& B = pval(1);
        const int bt = A.dim(0), m = A.dim(1), k = A.dim(2), c = B.dim(2);
        for (int i = 0; i < bt; ++i) {
            ConstMatMap mg(g.data() + static_cast<std::int64_t>(i) * m * c, m, c);
            if (parent_needs(0)) {
                MatMap ga(grad_buf(n.parents[0]).data() + static_cast<std::int64_t>(i) * m * k,
                          m, k);
                ConstMatMap mb(B.data() + static_cast<std::int64_t>(i) * k * c, k, c);
                ga.noalias() += mg * mb.transpose();
            }
            if (parent_needs(1)) {
                MatMap gb(grad_buf(n.parents[1]).data() + static_cast<std::int64_t>(i) * k * c,
                          k, c);
                ConstMatMap ma(A.data() + static_cast<std::int64_t>(i) * m * k, m, k);
                gb.noalias() += ma.transpose() * mg;
            }
        }
        break;
    }
    case Op::TransposeLast: {
        if (!parent_needs(0)) break;
        const Tensor& A = pval(0);
        const int batch = A.rank() == 3 ? A.dim(0) : 1;
        const int m = A.dim(A.rank() - 2), c = A.dim(A.rank() - 1);
        Tensor& ga = grad_buf(n.parents[0]);
        for (int i = 0; i < batch; ++i) {
            ConstMatMap mg(g.data() + static_cast<std::int64_t>(i) * m * c, c, m);
            MatMap mga(ga.data() + static_cast<std::int64_t>(i) * m * c, m, c);
            mga += mg.transpose();
        }
        break;
    }
    case Op::Permute0213: {
        if (!parent_needs(0)) break;
        const Shape& os = n.value.shape(); // (d0,d2,d1,d3)
        Tensor tmp(pval(0).shape());
        permute0213_kernel(g.data(), tmp.data(), os[0], os[1], os[2], os[3]);
        add_into_grad(n.parents[0], tmp.data(), tmp.size());
        break;
    }
    case Op::Reshape:
        if (parent_needs(0)) add_into_grad(n.parents[0], g.data(), g.size());
        break;
    case Op::Add:
        if (parent_needs(0)) add_into_grad(n.parents[0], g.data(), g.size());
        if (parent_needs(1)) add_into_grad(n.parents[1], g.data(), g.size());
        break;
    case Op::Sub: {
        if (parent_needs(0)) add_into_grad(n.parents[0], g.data(), g.size());
        if (parent_needs(1)) {
            Tensor& gb = grad_buf(n.parents[1]);
            for (std::int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
        break;
    }
    case Op::AddRowVec: {
        if (parent_needs(0)) add_into_grad(n.parents[0], g.data(), g.size());
        if (parent_needs(1)) {
            Tensor& gb = grad_buf(n.parents[1]);
            const int c = gb.dim(0);
            const std::int64_t rows = g.size() / c;
            for (std::int64_t r = 0; r < rows; ++r) {
                for (int j = 0; j < c; ++j) gb[j] += g[r * c + j];
            }
        }
        break;
    }
    case Op::Mul: {
        const Tensor& A = pval(0);
        const Tensor& B = pval(1);
        if (parent_needs(0)) {
            Tensor& ga = grad_buf(n.parents[0]);
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
        }
        if (parent_needs(1)) {
            Tensor& gb = grad_buf(n.parents[1]);
            for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
        }
        break;
    }
    case Op::Affine: {
        if (!parent_needs(0)) break;
        Tensor& ga = grad_buf(n.parents[0]);
        for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.a;
        break;
    }
    case Op::Relu: {
        if (!parent_needs(0)) break;
        const Tensor& X = pval(0);
        Tensor& ga = grad_buf(n.parents[0]);
        for (std::int64_t i = 0; i < g.size(); ++i) {
            if (X[i] > 0.0f) ga[i] += g[i];
        }
        break;
    }
    case Op::Gelu: {
        if (!parent_needs(0)) break;
        const Tensor& X = pval(0);
        Tensor& ga = grad_buf(n.parents[0]);
        for (std::int64_t i = 0; i < g.size(); ++i) {
            const float x = X[i];
            const float cdf = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
            const float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
            ga[i] += g[i] * (cdf + x * pdf);
        }
        break;
    }
    case Op::Sigmoid: {
        if (!parent_needs(0)) break;
        Tensor& ga = grad_buf(n.parents[0]);
        for (std::int64_t i = 0; i < g.size(); ++i) {
            const float y = n.value[i];
            ga[i] += g[i] * y * (1.0f - y);
        }
        break;
    }
    case Op::LogClamped: {
        if (!parent_needs(0)) break;
        const Tensor& X = pval(0);
        Tensor& ga = grad_buf(n.parents[0]);
        for (std::int64_t i = 0; i < g.size(); ++i) {
            if (X[i] > n.a) ga[i] += g[i] / X[i];
        }
        break;
    }
    case Op::Clamp: {
        if (!parent_needs(0)) break;
        const Tensor& X = pval(0);
        Tensor& ga = grad_buf(n.parents[0]);
        for (std::int64_t i = 0; i < g.size(); ++i) {
            if (X[i] > n.a && X[i] < n.b) ga[i] += g[i];
        }
        break;
    }
    case Op::SoftmaxLast: {
        if (!parent_needs(0)) break;
        const int c = n.value.dim(n.value.rank() - 1);
        const std::int64_t rows = n.value.size() / c;
        Tensor& ga = grad_buf(n.parents[0]);
        for (std::int64_t r = 0; r < rows; ++r) {
            const float* y = n.value.data() + r * c;
            const float* gr = g.data() + r * c;
            float dot = 0.0f;
            for (int j = 0; j < c; ++j) dot += gr[j] * y[j];
            float* dst = ga.data() + r * c;
            for (int j = 0; j < c; ++j) dst[j] += (gr[j] - dot) * y[j];
        }
        break;
    }
    case Op::LayerNormLast: {
        const Tensor& X = pval(0);
        const Tensor& gamma = pval(1);
        const int c = X.dim(X.rank() - 1);
        const std::int64_t rows = X.size() / c;
        const bool need_x = parent_needs(0);
        const bool need_g = parent_needs(1);
        const bool need_b = parent_needs(2);
        for (std::int64_t r = 0; r < rows; ++r) {
            const float mean = n.faux[static_cast<size_t>(r) * 2];
            const float inv = n.faux[static_cast<size_t>(r) * 2 + 1];
            const float* gr = g.data() + r * c;
            const float* xr = X.data() + r * c;
            if (need_g || need_b) {
                Tensor& gg = grad_buf(n.parents[1]);
                Tensor& gb = grad_buf(n.parents[2]);
                for (int j = 0; j < c; ++j) {
                    const float xhat = (xr[j] - mean) * inv;
                    if (need_g) gg[j] += gr[j] * xhat;
                    if (need_b) gb[j] += gr[j];
                }
            }
            if (need_x) {
                Tensor& gx = grad_buf(n.parents[0]);
                float s1 = 0.0f, s2 = 0.0f;
                for (int j = 0; j < c; ++j) {
                    const float xhat = (xr[j] - mean) * inv;
                    const float dxh = gr[j] * gamma[j];
                    s1 += dxh;
                    s2 += dxh * xhat;
                }
                s1 /= static_cast<float>(c);
                s2 /= static_cast<float>(c);
                float* dst = gx.data() + r * c;
                for (int j = 0; j < c; ++j) {
                    const float xhat = (xr[j] - mean) * inv;
                    const float dxh = gr[j] * gamma[j];
                    dst[j] += inv * (dxh - s1 - xhat * s2);
                }
            }
        }
        break;
    }
    case Op::Embedding: {
        if (!parent_needs(0)) break;
        Tensor& gt = grad_buf(n.parents[0]);
        const int e = n.value.dim(1);
        for (size_t i = 0; i < n.iaux.size(); ++i) {
            const float* src = g.data() + static_cast<std::int64_t>(i) * e;
            float* dst = gt.data() + static_cast<std::int64_t>(n.iaux[i]) * e;
            for (int j = 0; j < e; ++j) dst[j] += src[j];
        }
        break;
    }
    case Op::ConcatLast: {
        const int p = static_cast<int>(n.a);
        const int total = n.value.dim(n.value.rank() - 1);
        const int q = total - p;
        const std::int64_t rows = n.value.size() / total;
        if (parent_needs(0)) {
            Tensor& ga = grad_buf(n.parents[0]);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (int j = 0; j < p; ++j) ga[r * p + j] += g[r * total + j];
            }
        }
        if (parent_needs(1)) {
            Tensor& gb = grad_buf(n.parents[1]);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (int j = 0; j < q; ++j) gb[r * q + j] += g[r * total + p + j];
            }
        }
        break;
    }
    case Op::Dropout: {
        if (!parent_needs(0)) break;
        Tensor& ga = grad_buf(n.parents[0]);
        for (std::int64_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * n.faux[static_cast<size_t>(i)];
        }
        break;
    }
    case Op::SelectStep: {
        if (!parent_needs(0)) break;
        const Tensor& X = pval(0);
        const int B = X.dim(0), L = X.dim(1), D = X.dim(2);
        const int step = static_cast<int>(n.a);
        Tensor& gx = grad_buf(n.parents[0]);
        for (int i = 0; i < B; ++i) {
            float* dst = gx.data() + (static_cast<std::int64_t>(i) * L + step) * D;
            const float* src = g.data() + static_cast<std::int64_t>(i) * D;
            for (int j = 0; j < D; ++j) dst[j] += src[j];
        }
        break;
    }
    case Op::MeanAxis1: {
        if (!parent_needs(0)) break;
        const Tensor& X = pval(0);
        const int B = X.dim(0), L = X.dim(1), D = X.dim(2);
        const float inv = 1.0f / static_cast<float>(L);
        Tensor& gx = grad_buf(n.parents[0]);
        for (int i = 0; i < B; ++i) {
            const float* src = g.data() + static_cast<std::int64_t>(i) * D;
            for (int l = 0; l < L; ++l) {
                float* dst = gx.data() + (static_cast<std::int64_t>(i) * L + l) * D;
                for (int j = 0; j < D; ++j) dst[j] += src[j] * inv;
            }
        }
        break;
    }
    case Op::SumAll: {
        if (!parent_needs(0)) break;
        Tensor& gx = grad_buf(n.parents[0]);
        const float gv = g[0];
        for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += gv;
        break;
    }
    case Op::MeanAll: {
        if (!parent_needs(0)) break;
        Tensor& gx = grad_buf(n.parents[0]);
        const float gv = g[0] / static_cast<float>(gx.size());
        for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += gv;
        break;
    }
    }
}

Tensor Tape::grad(Var v) const {
    require_same_tape(v, "grad");
    const Node& n = node(v);
    if (n.grad.size() == 0) return Tensor(n.value.shape());
    return n.grad;
}

std::vector<Tensor> Tape::gradients(Var loss, const std::vector<Var>& leaves) {
    backward(loss);
    std::vector<Tensor> out;
    out.reserve(leaves.size());
    for (Var v : leaves) out.push_back(grad(v));
    return out;
}

} // namespace tfids::ad
