#pragma once

#include <cassert>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xling/error.hpp"
#include "xling/rng.hpp"
#include "xling/tensor.hpp"

namespace xling {

// A named trainable (or frozen) tensor. Gradients accumulate into `grad`,
// which always matches the value's shape.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter(std::string n, Tensor v, bool train)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}
};

// Owns every parameter of a model. Iteration order is creation order, which
// is fixed per configuration, so anything derived from it (initialization
// draws, checkpoint layout, Adam slot indices) is reproducible.
class ParameterStore {
public:
    Parameter* create(std::string name, Tensor init, bool trainable = true) {
        params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(init), trainable));
        return params_.back().get();
    }

    Parameter* find(const std::string& name) const {
        for (const auto& p : params_)
            if (p->name == name) return p.get();
        return nullptr;
    }

    void zero_grad() {
        for (auto& p : params_) p->grad.zero();
    }

    std::size_t size() const { return params_.size(); }
    Parameter* at(std::size_t i) const { return params_[i].get(); }

    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    std::size_t value_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->value.size();
        return n;
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& p : params_)
            if (p->trainable) n += p->value.size();
        return n;
    }

private:
    std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

// Escape hatch for fused model-level operations (subword pooling, the tied
// output layer). Forward values are computed at construction; only the
// backward rule lives behind the interface. Custom ops may accumulate into
// Parameter::grad directly.
struct CustomOp {
    virtual ~CustomOp() = default;
    virtual void backward(Tape& tape, int self, const Tensor& gout) = 0;
};

enum class Op : std::uint8_t {
    kLeaf,          // parameter reference (value lives in the Parameter)
    kConst,         // constant, no gradient
    kAdd,           // elementwise a + b
    kMul,           // elementwise a * b
    kScale,         // x0 * a
    kConcat,        // 1-D concat(a, b)
    kSlice,         // 1-D a[i0 : i0+len]
    kSigmoid,
    kTanh,
    kMatvec,        // M (m x n) * v (n) -> m
    kMatvecT,       // M^T (m x n) * v (m) -> n
    kStackRows,     // k vectors of n -> k x n
    kRow,           // M[i0] -> n
    kMeanRows,      // mean over rows of (k x n) -> n
    kDot,           // scalar a . b
    kSoftmax,       // 1-D stable softmax
    kCrossEntropy,  // -log softmax(logits)[i0], scalar
    kDropout,       // inverted dropout, mask regenerated from seed
    kSum,           // variadic same-shape sum
    kLstmCell,      // fused cell; value = [h; c], aux = gates
    kConv3Tanh,     // width-3 same-padded conv over rows + tanh
    kCustom,
};

// Records an eagerly evaluated computation for one backward sweep. Node
// inputs always precede the node itself, so the graph is acyclic by
// construction and the reverse sweep is a single linear pass.
class Tape {
public:
    struct Node {
        Op op;
        std::vector<int> args;
        Tensor value;  // empty for kLeaf
        Tensor aux;    // op-specific cache
        double x0 = 0.0;
        int i0 = 0;
        std::uint64_t seed = 0;
        Parameter* param = nullptr;
        std::unique_ptr<CustomOp> custom;
    };

    int size() const { return static_cast<int>(nodes_.size()); }

    const Tensor& val(int id) const {
        const Node& n = nodes_[check(id)];
        return n.op == Op::kLeaf ? n.param->value : n.value;
    }

    const Node& node(int id) const { return nodes_[check(id)]; }

    // ---- node constructors -------------------------------------------------

    // One leaf node per parameter per tape; repeated requests return the
    // same node. Leaf values alias the parameter (no copy).
    int leaf(Parameter* p) {
        auto it = leaf_ids_.find(p);
        if (it != leaf_ids_.end()) return it->second;
        Node n{Op::kLeaf, {}, Tensor(), Tensor(), 0.0, 0, 0, p, nullptr};
        int id = push(std::move(n));
        leaf_ids_.emplace(p, id);
        return id;
    }

    int constant(Tensor v) { return push_value(Op::kConst, {}, std::move(v)); }

    int add(int a, int b) {
        val(a).require_same_shape(val(b), "add");
        Tensor out = val(a);
        kernels::add(out.data(), val(b).data(), out.size());
        return push_value(Op::kAdd, {a, b}, std::move(out));
    }

    int mul(int a, int b) {
        val(a).require_same_shape(val(b), "mul");
        Tensor out = val(a);
        const Tensor& vb = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
        return push_value(Op::kMul, {a, b}, std::move(out));
    }

    int scale(int a, double alpha) {
        Tensor out = val(a);
        out.scale(alpha);
        int id = push_value(Op::kScale, {a}, std::move(out));
        nodes_[id].x0 = alpha;
        return id;
    }

    int concat(int a, int b) {
        const Tensor& va = val(a);
        const Tensor& vb = val(b);
        Tensor out({static_cast<int>(va.size() + vb.size())});
        std::copy(va.data(), va.data() + va.size(), out.data());
        std::copy(vb.data(), vb.data() + vb.size(), out.data() + va.size());
        return push_value(Op::kConcat, {a, b}, std::move(out));
    }

    int slice(int a, int offset, int len) {
        const Tensor& va = val(a);
        if (offset < 0 || len <= 0 || offset + len > static_cast<int>(va.size()))
            throw std::invalid_argument("slice: out of range");
        Tensor out({len});
        std::copy(va.data() + offset, va.data() + offset + len, out.data());
        int id = push_value(Op::kSlice, {a}, std::move(out));
        nodes_[id].i0 = offset;
        return id;
    }

    int sigmoid(int a) {
        Tensor out = val(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(out[i]);
        return push_value(Op::kSigmoid, {a}, std::move(out));
    }

    int tanh_(int a) {
        Tensor out = val(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
        return push_value(Op::kTanh, {a}, std::move(out));
    }

    int matvec(int m, int v) {
        const Tensor& vm = val(m);
        const Tensor& vv = val(v);
        if (vm.rank() != 2 || vm.cols() != static_cast<int>(vv.size()))
            throw std::invalid_argument("matvec: incompatible shapes " + vm.shape_string() +
                                        " x " + vv.shape_string());
        Tensor out({vm.rows()});
        for (int r = 0; r < vm.rows(); ++r)
            out[r] = kernels::dot(vm.row(r), vv.data(), vv.size());
        return push_value(Op::kMatvec, {m, v}, std::move(out));
    }

    int matvec_t(int m, int v) {
        const Tensor& vm = val(m);
        const Tensor& vv = val(v);
        if (vm.rank() != 2 || vm.rows() != static_cast<int>(vv.size()))
            throw std::invalid_argument("matvec_t: incompatible shapes");
        Tensor out({vm.cols()});
        for (int r = 0; r < vm.rows(); ++r)
            kernels::axpy(out.data(), vv[r], vm.row(r), vm.cols());
        return push_value(Op::kMatvecT, {m, v}, std::move(out));
    }

    int stack_rows(const std::vector<int>& rows) {
        if (rows.empty()) throw std::invalid_argument("stack_rows: no rows");
        int n = static_cast<int>(val(rows[0]).size());
        Tensor out({static_cast<int>(rows.size()), n});
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const Tensor& vr = val(rows[r]);
            if (static_cast<int>(vr.size()) != n)
                throw std::invalid_argument("stack_rows: ragged rows");
            std::copy(vr.data(), vr.data() + n, out.row(static_cast<int>(r)));
        }
        return push_value(Op::kStackRows, rows, std::move(out));
    }

    int row(int m, int r) {
        const Tensor& vm = val(m);
        if (vm.rank() != 2 || r < 0 || r >= vm.rows())
            throw std::invalid_argument("row: index out of range");
        Tensor out({vm.cols()});
        std::copy(vm.row(r), vm.row(r) + vm.cols(), out.data());
        int id = push_value(Op::kRow, {m}, std::move(out));
        nodes_[id].i0 = r;
        return id;
    }

    int mean_rows(int m) {
        const Tensor& vm = val(m);
        if (vm.rank() != 2) throw std::invalid_argument("mean_rows: matrix expected");
        Tensor out({vm.cols()});
        for (int r = 0; r < vm.rows(); ++r)
            kernels::add(out.data(), vm.row(r), vm.cols());
        out.scale(1.0 / vm.rows());
        return push_value(Op::kMeanRows, {m}, std::move(out));
    }

    int dot(int a, int b) {
        val(a).require_same_shape(val(b), "dot");
        Tensor out({1});
        out[0] = kernels::dot(val(a).data(), val(b).data(), val(a).size());
        return push_value(Op::kDot, {a, b}, std::move(out));
    }

    int softmax(int a) {
        const Tensor& va = val(a);
        Tensor out = va;
        softmax_inplace(out.data(), out.size());
        return push_value(Op::kSoftmax, {a}, std::move(out));
    }

    // -log p(gold) under softmax(logits). Caches the softmax for backward.
    int cross_entropy(int logits, int gold) {
        const Tensor& vl = val(logits);
        if (gold < 0 || gold >= static_cast<int>(vl.size()))
            throw std::invalid_argument("cross_entropy: gold index out of range");
        Tensor probs = vl;
        softmax_inplace(probs.data(), probs.size());
        Tensor out({1});
        out[0] = -std::log(std::max(probs[gold], 1e-300));
        int id = push_value(Op::kCrossEntropy, {logits}, std::move(out));
        nodes_[id].i0 = gold;
        nodes_[id].aux = std::move(probs);
        return id;
    }

    // Inverted dropout: survivors are scaled by 1/(1-rate), so evaluation
    // needs no rescaling. The mask is a counter-based stream keyed on one
    // seed; backward regenerates it instead of storing it.
    int dropout(int a, double rate, bool training, Rng& rng) {
        if (rate >= 1.0 || rate < 0.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
        if (!training || rate == 0.0) return a;
        std::uint64_t seed = rng.next_u64();
        const Tensor& va = val(a);
        Tensor out = va;
        const double keep_scale = 1.0 / (1.0 - rate);
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = dropout_keep(seed, i, rate) ? out[i] * keep_scale : 0.0;
        int id = push_value(Op::kDropout, {a}, std::move(out));
        nodes_[id].x0 = rate;
        nodes_[id].seed = seed;
        return id;
    }

    int sum(const std::vector<int>& terms) {
        if (terms.empty()) throw std::invalid_argument("sum: no terms");
        Tensor out = val(terms[0]);
        for (std::size_t i = 1; i < terms.size(); ++i) {
            val(terms[i]).require_same_shape(out, "sum");
            kernels::add(out.data(), val(terms[i]).data(), out.size());
        }
        return push_value(Op::kSum, terms, std::move(out));
    }

    // Standard LSTM cell. Gate pre-activations a = Wx*x + Wh*h_prev + b are
    // laid out [input; forget; output; candidate], each of width H. Returns
    // (h, c) as two slices of one fused node whose value is [h; c].
    std::pair<int, int> lstm_cell(int x, int h_prev, int c_prev, int wx, int wh, int b) {
        const Tensor& vwx = val(wx);
        const Tensor& vwh = val(wh);
        const Tensor& vb = val(b);
        const Tensor& vx = val(x);
        const Tensor& vh = val(h_prev);
        const Tensor& vc = val(c_prev);
        const int hidden = static_cast<int>(vh.size());
        if (vwx.rank() != 2 || vwh.rank() != 2 || vwx.rows() != 4 * hidden ||
            vwh.rows() != 4 * hidden || vwh.cols() != hidden ||
            vwx.cols() != static_cast<int>(vx.size()) ||
            static_cast<int>(vb.size()) != 4 * hidden ||
            static_cast<int>(vc.size()) != hidden)
            throw std::invalid_argument("lstm_cell: shape mismatch");

        Tensor gates = vb;  // a = b + Wx x + Wh h
        for (int r = 0; r < 4 * hidden; ++r)
            gates[r] += kernels::dot(vwx.row(r), vx.data(), vx.size()) +
                        kernels::dot(vwh.row(r), vh.data(), vh.size());
        Tensor aux({5, hidden});  // rows: i, f, o, g, tanh(c)
        Tensor out({2 * hidden}); // [h; c]
        for (int j = 0; j < hidden; ++j) {
            const double i_g = sigmoid_scalar(gates[j]);
            const double f_g = sigmoid_scalar(gates[hidden + j]);
            const double o_g = sigmoid_scalar(gates[2 * hidden + j]);
            const double g_g = std::tanh(gates[3 * hidden + j]);
            const double c = f_g * vc[j] + i_g * g_g;
            const double tc = std::tanh(c);
            aux.at(0, j) = i_g;
            aux.at(1, j) = f_g;
            aux.at(2, j) = o_g;
            aux.at(3, j) = g_g;
            aux.at(4, j) = tc;
            out[j] = o_g * tc;
            out[hidden + j] = c;
        }
        int id = push_value(Op::kLstmCell, {x, h_prev, c_prev, wx, wh, b}, std::move(out));
        nodes_[id].aux = std::move(aux);
        nodes_[id].i0 = hidden;
        return {slice(id, 0, hidden), slice(id, hidden, hidden)};
    }

    // Same-padded width-3 convolution over the rows of X (k x n), n output
    // channels, tanh nonlinearity. W has shape (n, 3*n): output channel o at
    // position p sees [X[p-1]; X[p]; X[p+1]] flattened, missing rows zero.
    int conv3_tanh(int x, int w, int b) {
        Tensor out = conv3_tanh_forward(val(x), val(w), val(b));
        return push_value(Op::kConv3Tanh, {x, w, b}, std::move(out));
    }

    static Tensor conv3_tanh_forward(const Tensor& vx, const Tensor& vw, const Tensor& vb) {
        if (vx.rank() != 2 || vw.rank() != 2) throw std::invalid_argument("conv3_tanh: matrices expected");
        const int k = vx.rows(), n = vx.cols();
        if (vw.rows() != n || vw.cols() != 3 * n || static_cast<int>(vb.size()) != n)
            throw std::invalid_argument("conv3_tanh: weight shape mismatch");
        Tensor out({k, n});
        for (int p = 0; p < k; ++p) {
            for (int o = 0; o < n; ++o) {
                double acc = vb[o];
                const double* wrow = vw.row(o);
                for (int t = -1; t <= 1; ++t) {
                    if (p + t < 0 || p + t >= k) continue;
                    acc += kernels::dot(wrow + (t + 1) * n, vx.row(p + t), n);
                }
                out.at(p, o) = std::tanh(acc);
            }
        }
        return out;
    }

    int custom(std::unique_ptr<CustomOp> op, std::vector<int> args, Tensor value) {
        int id = push_value(Op::kCustom, std::move(args), std::move(value));
        nodes_[id].custom = std::move(op);
        return id;
    }

    // ---- gradients -----------------------------------------------------------

    // Gradient slot for a node. Leaf slots alias Parameter::grad so custom
    // ops and generic ops accumulate into the same storage.
    Tensor& grad(int id) {
        Node& n = nodes_[check(id)];
        if (n.op == Op::kLeaf) return n.param->grad;
        if (grads_.size() != nodes_.size()) grads_.resize(nodes_.size());
        Tensor& g = grads_[id];
        if (g.empty()) g = Tensor::zeros(val(id).shape());
        return g;
    }

    bool grad_touched(int id) const {
        return nodes_[id].op == Op::kLeaf ||
               (id < static_cast<int>(grads_.size()) && !grads_[id].empty());
    }

    // Reverse sweep from a scalar loss. Accumulates into Parameter::grad for
    // every reachable leaf; callers zero parameter gradients beforehand
    // (see tape_backward). Nodes the loss does not depend on are skipped, so
    // unreachable parameters keep their zero gradient.
    void backward(int loss) {
        if (val(loss).size() != 1)
            throw std::invalid_argument("backward: loss must be a scalar");
        grads_.assign(nodes_.size(), Tensor());
        grad(loss)[0] = 1.0;
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.op == Op::kLeaf || n.op == Op::kConst) continue;
            if (grads_[id].empty()) continue;  // not reachable from the loss
            backward_node(id, n, grads_[id]);
        }
    }

    void reset() {
        nodes_.clear();
        grads_.clear();
        leaf_ids_.clear();
    }

    static double sigmoid_scalar(double x) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }

    static void softmax_inplace(double* x, std::size_t n) {
        double mx = x[0];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
        double z = 0;
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = std::exp(x[i] - mx);
            z += x[i];
        }
        for (std::size_t i = 0; i < n; ++i) x[i] /= z;
    }

private:
    int check(int id) const {
        assert(id >= 0 && id < static_cast<int>(nodes_.size()));
        return id;
    }

    int push(Node n) {
        for (int a : n.args)
            if (a < 0 || a >= size())
                throw std::invalid_argument("tape: argument node does not precede its use");
        nodes_.push_back(std::move(n));
        return size() - 1;
    }

    int push_value(Op op, std::vector<int> args, Tensor value) {
        Node n{op, std::move(args), std::move(value), Tensor(), 0.0, 0, 0, nullptr, nullptr};
        return push(std::move(n));
    }

    void backward_node(int id, Node& n, const Tensor& g) {
        switch (n.op) {
            case Op::kAdd: {
                grad(n.args[0]).add_scaled(g, 1.0);
                grad(n.args[1]).add_scaled(g, 1.0);
                break;
            }
            case Op::kMul: {
                Tensor& ga = grad(n.args[0]);
                Tensor& gb = grad(n.args[1]);
                kernels::add_mul(ga.data(), g.data(), val(n.args[1]).data(), g.size());
                kernels::add_mul(gb.data(), g.data(), val(n.args[0]).data(), g.size());
                break;
            }
            case Op::kScale:
                grad(n.args[0]).add_scaled(g, n.x0);
                break;
            case Op::kConcat: {
                Tensor& ga = grad(n.args[0]);
                Tensor& gb = grad(n.args[1]);
                kernels::add(ga.data(), g.data(), ga.size());
                kernels::add(gb.data(), g.data() + ga.size(), gb.size());
                break;
            }
            case Op::kSlice: {
                Tensor& ga = grad(n.args[0]);
                kernels::add(ga.data() + n.i0, g.data(), g.size());
                break;
            }
            case Op::kSigmoid: {
                Tensor& ga = grad(n.args[0]);
                const Tensor& y = n.value;
                for (std::size_t i = 0; i < g.size(); ++i)
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                break;
            }
            case Op::kTanh: {
                Tensor& ga = grad(n.args[0]);
                const Tensor& y = n.value;
                for (std::size_t i = 0; i < g.size(); ++i)
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                break;
            }
            case Op::kMatvec: {
                const Tensor& m = val(n.args[0]);
                const Tensor& v = val(n.args[1]);
                Tensor& gm = grad(n.args[0]);
                Tensor& gv = grad(n.args[1]);
                for (int r = 0; r < m.rows(); ++r) {
                    kernels::axpy(gm.row(r), g[r], v.data(), v.size());
                    kernels::axpy(gv.data(), g[r], m.row(r), v.size());
                }
                break;
            }
            case Op::kMatvecT: {
                const Tensor& m = val(n.args[0]);
                const Tensor& v = val(n.args[1]);
                Tensor& gm = grad(n.args[0]);
                Tensor& gv = grad(n.args[1]);
                for (int r = 0; r < m.rows(); ++r) {
                    kernels::axpy(gm.row(r), v[r], g.data(), g.size());
                    gv[r] += kernels::dot(m.row(r), g.data(), g.size());
                }
                break;
            }
            case Op::kStackRows: {
                const int cols = n.value.cols();
                for (std::size_t r = 0; r < n.args.size(); ++r)
                    kernels::add(grad(n.args[r]).data(), g.data() + r * cols, cols);
                break;
            }
            case Op::kRow: {
                Tensor& gm = grad(n.args[0]);
                kernels::add(gm.row(n.i0), g.data(), g.size());
                break;
            }
            case Op::kMeanRows: {
                Tensor& gm = grad(n.args[0]);
                const double inv = 1.0 / gm.rows();
                for (int r = 0; r < gm.rows(); ++r)
                    kernels::axpy(gm.row(r), inv, g.data(), g.size());
                break;
            }
            case Op::kDot: {
                grad(n.args[0]).add_scaled(val(n.args[1]), g[0]);
                grad(n.args[1]).add_scaled(val(n.args[0]), g[0]);
                break;
            }
            case Op::kSoftmax: {
                Tensor& ga = grad(n.args[0]);
                const Tensor& y = n.value;
                const double gy = kernels::dot(g.data(), y.data(), y.size());
                for (std::size_t i = 0; i < y.size(); ++i)
                    ga[i] += y[i] * (g[i] - gy);
                break;
            }
            case Op::kCrossEntropy: {
                Tensor& ga = grad(n.args[0]);
                const Tensor& probs = n.aux;
                ga.add_scaled(probs, g[0]);
                ga[n.i0] -= g[0];
                break;
            }
            case Op::kDropout: {
                Tensor& ga = grad(n.args[0]);
                const double keep_scale = 1.0 / (1.0 - n.x0);
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (dropout_keep(n.seed, i, n.x0)) ga[i] += g[i] * keep_scale;
                break;
            }
            case Op::kSum: {
                for (int a : n.args) grad(a).add_scaled(g, 1.0);
                break;
            }
            case Op::kLstmCell:
                backward_lstm(n, g);
                break;
            case Op::kConv3Tanh:
                backward_conv3(n, g);
                break;
            case Op::kCustom:
                n.custom->backward(*this, id, g);
                break;
            case Op::kLeaf:
            case Op::kConst:
                break;
        }
    }

    void backward_lstm(Node& n, const Tensor& g) {
        const int hidden = n.i0;
        const Tensor& aux = n.aux;
        const Tensor& c_prev = val(n.args[2]);
        const Tensor& x = val(n.args[0]);
        const Tensor& h_prev = val(n.args[1]);
        const Tensor& wx = val(n.args[3]);
        const Tensor& wh = val(n.args[4]);

        Tensor da({4 * hidden});  // gradient wrt gate pre-activations
        Tensor& gc_prev = grad(n.args[2]);
        for (int j = 0; j < hidden; ++j) {
            const double i_g = aux.at(0, j), f_g = aux.at(1, j), o_g = aux.at(2, j);
            const double g_g = aux.at(3, j), tc = aux.at(4, j);
            const double dh = g[j];
            const double dc = g[hidden + j] + dh * o_g * (1.0 - tc * tc);
            const double do_ = dh * tc;
            da[j] = dc * g_g * i_g * (1.0 - i_g);
            da[hidden + j] = dc * c_prev[j] * f_g * (1.0 - f_g);
            da[2 * hidden + j] = do_ * o_g * (1.0 - o_g);
            da[3 * hidden + j] = dc * i_g * (1.0 - g_g * g_g);
            gc_prev[j] += dc * f_g;
        }
        Tensor& gx = grad(n.args[0]);
        Tensor& gh = grad(n.args[1]);
        Tensor& gwx = grad(n.args[3]);
        Tensor& gwh = grad(n.args[4]);
        Tensor& gb = grad(n.args[5]);
        for (int r = 0; r < 4 * hidden; ++r) {
            const double d = da[r];
            gb[r] += d;
            kernels::axpy(gwx.row(r), d, x.data(), x.size());
            kernels::axpy(gwh.row(r), d, h_prev.data(), h_prev.size());
            kernels::axpy(gx.data(), d, wx.row(r), x.size());
            kernels::axpy(gh.data(), d, wh.row(r), h_prev.size());
        }
    }

    void backward_conv3(Node& n, const Tensor& g) {
        const Tensor& x = val(n.args[0]);
        const Tensor& w = val(n.args[1]);
        const Tensor& y = n.value;
        Tensor& gx = grad(n.args[0]);
        Tensor& gw = grad(n.args[1]);
        Tensor& gb = grad(n.args[2]);
        const int k = x.rows(), cn = x.cols();
        for (int p = 0; p < k; ++p) {
            for (int o = 0; o < cn; ++o) {
                const double yo = y.at(p, o);
                const double dpre = g.at(p, o) * (1.0 - yo * yo);
                if (dpre == 0.0) continue;
                gb[o] += dpre;
                for (int t = -1; t <= 1; ++t) {
                    if (p + t < 0 || p + t >= k) continue;
                    kernels::axpy(gw.row(o) + (t + 1) * cn, dpre, x.row(p + t), cn);
                    kernels::axpy(gx.row(p + t), dpre, w.row(o) + (t + 1) * cn, cn);
                }
            }
        }
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::unordered_map<Parameter*, int> leaf_ids_;
};

// Spec-level entry point: gradients of `loss` with respect to every
// parameter of `store`. Parameters not reachable from the loss end up with
// zero gradients. The store itself is the gradient table.
inline void tape_backward(Tape& tape, int loss, ParameterStore& store) {
    store.zero_grad();
    tape.backward(loss);
}

}  // namespace xling
