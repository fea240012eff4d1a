#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>

#include "error.hpp"

namespace headpatch {

struct Tensor::Data {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first needed
    bool requires_grad = false;
    const Tape* producer = nullptr;  // tape that recorded the producing op
};

namespace {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) fail(ErrorCode::Dimension, "negative dimension in tensor shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

thread_local Tape* g_active_tape = nullptr;

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t;
    t.data_ = std::make_shared<Data>();
    std::size_t n = shape_numel(shape);
    t.data_->shape = std::move(shape);
    t.data_->values.assign(n, value);
    t.data_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size())
        fail(ErrorCode::Dimension, "value count " + std::to_string(values.size()) +
                                       " does not match shape " + shape_to_string(shape));
    Tensor t;
    t.data_ = std::make_shared<Data>();
    t.data_->shape = std::move(shape);
    t.data_->values = std::move(values);
    t.data_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_values({1}, {value}, requires_grad);
}

const std::vector<int>& Tensor::shape() const {
    if (!data_) fail(ErrorCode::State, "undefined tensor");
    return data_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int i) const {
    const auto& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size()))
        fail(ErrorCode::Dimension, "dimension index out of range");
    return s[static_cast<std::size_t>(i)];
}

std::size_t Tensor::size() const {
    if (!data_) return 0;
    return data_->values.size();
}

bool Tensor::requires_grad() const { return data_ && data_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    if (!data_) fail(ErrorCode::State, "undefined tensor");
    data_->requires_grad = flag;
}

std::span<const double> Tensor::values() const {
    if (!data_) fail(ErrorCode::State, "undefined tensor");
    return data_->values;
}

std::span<double> Tensor::mutable_values() {
    if (!data_) fail(ErrorCode::State, "undefined tensor");
    return data_->values;
}

bool Tensor::has_grad() const { return data_ && !data_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!data_) fail(ErrorCode::State, "undefined tensor");
    if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
    return data_->grad;
}

std::span<double> Tensor::mutable_grad() {
    if (!data_) fail(ErrorCode::State, "undefined tensor");
    if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
    return data_->grad;
}

void Tensor::zero_grad() {
    if (!data_) fail(ErrorCode::State, "undefined tensor");
    std::fill(data_->grad.begin(), data_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (size() != 1)
        fail(ErrorCode::Dimension, "item() requires a one-element tensor, got " + shape_string());
    return data_->values[0];
}

std::string Tensor::shape_string() const { return shape_to_string(shape()); }

// ---- Tape -------------------------------------------------------------------

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

TapeSuspend::TapeSuspend() : saved_(g_active_tape) { g_active_tape = nullptr; }

TapeSuspend::~TapeSuspend() { g_active_tape = saved_; }

// ---- Op plumbing -------------------------------------------------------------

struct TensorOps {
    using DataPtr = std::shared_ptr<Tensor::Data>;

    static DataPtr data(const Tensor& t) { return t.data_; }

    static std::vector<double>& grad_buf(const DataPtr& d) {
        if (d->grad.empty()) d->grad.assign(d->values.size(), 0.0);
        return d->grad;
    }

    // Marks `out` as produced on the active tape and records the adjoint rule,
    // but only when a tape is active and some input requires grad.
    static void record(Tensor& out, bool any_input_grad, std::function<void()> backward_fn) {
        Tape* tape = Tape::active();
        if (!tape || !any_input_grad) return;
        out.data_->requires_grad = true;
        out.data_->producer = tape;
        tape->nodes_.push_back(Tape::Node{std::move(backward_fn)});
    }
};

using DataPtr = TensorOps::DataPtr;

namespace {

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) fail(ErrorCode::State, std::string(op) + ": undefined tensor operand");
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        fail(ErrorCode::Dimension, std::string(op) + ": expected a 2-D tensor, got " + t.shape_string());
}

// Rows/cols view of an arbitrary-rank tensor, normalizing over the last dim.
std::pair<std::size_t, std::size_t> rows_cols_lastdim(const Tensor& t, const char* op) {
    if (t.size() == 0 || t.rank() == 0)
        fail(ErrorCode::Dimension, std::string(op) + ": empty tensor");
    std::size_t d = static_cast<std::size_t>(t.shape().back());
    if (d == 0) fail(ErrorCode::Dimension, std::string(op) + ": empty last dimension");
    return {t.size() / d, d};
}

double stable_sigmoid(double z) {
    if (z >= 0.0) {
        double e = std::exp(-z);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(z);
    return e / (1.0 + e);
}

constexpr double kGeluCoeff = 0.044715;
const double kGeluScale = std::sqrt(2.0 / 3.14159265358979323846);

}  // namespace

// ---- Primitives --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        fail(ErrorCode::Dimension,
             "matmul: inner dimensions disagree: " + a.shape_string() + " vs " + b.shape_string());

    Tensor out = Tensor::zeros({m, n});
    {
        auto av = a.values();
        auto bv = b.values();
        auto ov = out.mutable_values();
        for (int i = 0; i < m; ++i) {
            const double* arow = av.data() + static_cast<std::size_t>(i) * k;
            double* orow = ov.data() + static_cast<std::size_t>(i) * n;
            for (int kk = 0; kk < k; ++kk) {
                const double aik = arow[kk];
                if (aik == 0.0) continue;
                const double* brow = bv.data() + static_cast<std::size_t>(kk) * n;
                for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
        }
    }

    DataPtr ad = TensorOps::data(a), bd = TensorOps::data(b), od = TensorOps::data(out);
    TensorOps::record(out, a.requires_grad() || b.requires_grad(), [ad, bd, od, m, k, n]() {
        const auto& dout = od->grad;
        if (dout.empty()) return;
        if (ad->requires_grad) {
            auto& da = TensorOps::grad_buf(ad);
            // dA += dC . B^T
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    const double* dorow = dout.data() + static_cast<std::size_t>(i) * n;
                    const double* brow = bd->values.data() + static_cast<std::size_t>(kk) * n;
                    for (int j = 0; j < n; ++j) acc += dorow[j] * brow[j];
                    da[static_cast<std::size_t>(i) * k + kk] += acc;
                }
        }
        if (bd->requires_grad) {
            auto& db = TensorOps::grad_buf(bd);
            // dB += A^T . dC
            for (int i = 0; i < m; ++i) {
                const double* arow = ad->values.data() + static_cast<std::size_t>(i) * k;
                const double* dorow = dout.data() + static_cast<std::size_t>(i) * n;
                for (int kk = 0; kk < k; ++kk) {
                    const double aik = arow[kk];
                    if (aik == 0.0) continue;
                    double* dbrow = db.data() + static_cast<std::size_t>(kk) * n;
                    for (int j = 0; j < n; ++j) dbrow[j] += aik * dorow[j];
                }
            }
        }
    });
    return out;
}

Tensor transpose(const Tensor& x) {
    require_defined(x, "transpose");
    require_rank2(x, "transpose");
    const int n = x.dim(0), d = x.dim(1);
    Tensor out = Tensor::zeros({d, n});
    {
        auto xv = x.values();
        auto ov = out.mutable_values();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                ov[static_cast<std::size_t>(j) * n + i] = xv[static_cast<std::size_t>(i) * d + j];
    }
    DataPtr xd = TensorOps::data(x), od = TensorOps::data(out);
    TensorOps::record(out, x.requires_grad(), [xd, od, n, d]() {
        if (od->grad.empty()) return;
        auto& dx = TensorOps::grad_buf(xd);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                dx[static_cast<std::size_t>(i) * d + j] += od->grad[static_cast<std::size_t>(j) * n + i];
    });
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_defined(a, "add");
    require_defined(b, "add");
    if (a.shape() != b.shape())
        fail(ErrorCode::Dimension, "add: shape mismatch: " + a.shape_string() + " vs " + b.shape_string());
    Tensor out = Tensor::zeros(a.shape());
    {
        auto av = a.values();
        auto bv = b.values();
        auto ov = out.mutable_values();
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    }
    DataPtr ad = TensorOps::data(a), bd = TensorOps::data(b), od = TensorOps::data(out);
    TensorOps::record(out, a.requires_grad() || b.requires_grad(), [ad, bd, od]() {
        if (od->grad.empty()) return;
        if (ad->requires_grad) {
            auto& da = TensorOps::grad_buf(ad);
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += od->grad[i];
        }
        if (bd->requires_grad) {
            auto& db = TensorOps::grad_buf(bd);
            for (std::size_t i = 0; i < db.size(); ++i) db[i] += od->grad[i];
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_defined(a, "mul");
    require_defined(b, "mul");
    if (a.shape() != b.shape())
        fail(ErrorCode::Dimension, "mul: shape mismatch: " + a.shape_string() + " vs " + b.shape_string());
    Tensor out = Tensor::zeros(a.shape());
    {
        auto av = a.values();
        auto bv = b.values();
        auto ov = out.mutable_values();
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    }
    DataPtr ad = TensorOps::data(a), bd = TensorOps::data(b), od = TensorOps::data(out);
    TensorOps::record(out, a.requires_grad() || b.requires_grad(), [ad, bd, od]() {
        if (od->grad.empty()) return;
        if (ad->requires_grad) {
            auto& da = TensorOps::grad_buf(ad);
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += od->grad[i] * bd->values[i];
        }
        if (bd->requires_grad) {
            auto& db = TensorOps::grad_buf(bd);
            for (std::size_t i = 0; i < db.size(); ++i) db[i] += od->grad[i] * ad->values[i];
        }
    });
    return out;
}

Tensor scale(const Tensor& x, double c) {
    require_defined(x, "scale");
    Tensor out = Tensor::zeros(x.shape());
    {
        auto xv = x.values();
        auto ov = out.mutable_values();
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
    }
    DataPtr xd = TensorOps::data(x), od = TensorOps::data(out);
    TensorOps::record(out, x.requires_grad(), [xd, od, c]() {
        if (od->grad.empty()) return;
        auto& dx = TensorOps::grad_buf(xd);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += od->grad[i] * c;
    });
    return out;
}

Tensor add_rows(const Tensor& x, const Tensor& rowv) {
    require_defined(x, "add_rows");
    require_defined(rowv, "add_rows");
    require_rank2(x, "add_rows");
    if (rowv.rank() != 1 || rowv.dim(0) != x.dim(1))
        fail(ErrorCode::Dimension, "add_rows: row " + rowv.shape_string() +
                                       " does not match last dimension of " + x.shape_string());
    const int n = x.dim(0), d = x.dim(1);
    Tensor out = Tensor::zeros(x.shape());
    {
        auto xv = x.values();
        auto rv = rowv.values();
        auto ov = out.mutable_values();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                ov[static_cast<std::size_t>(i) * d + j] = xv[static_cast<std::size_t>(i) * d + j] + rv[j];
    }
    DataPtr xd = TensorOps::data(x), rd = TensorOps::data(rowv), od = TensorOps::data(out);
    TensorOps::record(out, x.requires_grad() || rowv.requires_grad(), [xd, rd, od, n, d]() {
        if (od->grad.empty()) return;
        if (xd->requires_grad) {
            auto& dx = TensorOps::grad_buf(xd);
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += od->grad[i];
        }
        if (rd->requires_grad) {
            auto& dr = TensorOps::grad_buf(rd);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) dr[j] += od->grad[static_cast<std::size_t>(i) * d + j];
        }
    });
    return out;
}

Tensor softmax_lastdim(const Tensor& x) {
    require_defined(x, "softmax_lastdim");
    auto [rows, d] = rows_cols_lastdim(x, "softmax_lastdim");
    Tensor out = Tensor::zeros(x.shape());
    {
        auto xv = x.values();
        auto ov = out.mutable_values();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* in = xv.data() + r * d;
            double* o = ov.data() + r * d;
            double mx = in[0];
            for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
            double total = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                o[j] = std::exp(in[j] - mx);
                total += o[j];
            }
            for (std::size_t j = 0; j < d; ++j) o[j] /= total;
        }
    }
    DataPtr xd = TensorOps::data(x), od = TensorOps::data(out);
    TensorOps::record(out, x.requires_grad(), [xd, od, rows = rows, d = d]() {
        if (od->grad.empty()) return;
        auto& dx = TensorOps::grad_buf(xd);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = od->values.data() + r * d;
            const double* dy = od->grad.data() + r * d;
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += y[j] * dy[j];
            double* dxr = dx.data() + r * d;
            for (std::size_t j = 0; j < d; ++j) dxr[j] += y[j] * (dy[j] - dot);
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_defined(x, "layer_norm");
    require_defined(gain, "layer_norm");
    require_defined(bias, "layer_norm");
    if (eps <= 0.0) fail(ErrorCode::Configuration, "layer_norm: eps must be > 0");
    auto [rows, d] = rows_cols_lastdim(x, "layer_norm");
    if (gain.size() != d || bias.size() != d)
        fail(ErrorCode::Dimension, "layer_norm: gain/bias must have length " + std::to_string(d));

    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> inv_std(rows), xhat(rows * d);
    {
        auto xv = x.values();
        auto gv = gain.values();
        auto bv = bias.values();
        auto ov = out.mutable_values();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* in = xv.data() + r * d;
            double mean = 0.0;
            for (std::size_t j = 0; j < d; ++j) mean += in[j];
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                double c = in[j] - mean;
                var += c * c;
            }
            var /= static_cast<double>(d);
            double is = 1.0 / std::sqrt(var + eps);
            inv_std[r] = is;
            for (std::size_t j = 0; j < d; ++j) {
                double xh = (in[j] - mean) * is;
                xhat[r * d + j] = xh;
                ov[r * d + j] = gv[j] * xh + bv[j];
            }
        }
    }

    DataPtr xd = TensorOps::data(x), gd = TensorOps::data(gain), bd = TensorOps::data(bias),
            od = TensorOps::data(out);
    TensorOps::record(out, x.requires_grad() || gain.requires_grad() || bias.requires_grad(),
                      [xd, gd, bd, od, rows = rows, d = d, inv_std = std::move(inv_std),
                       xhat = std::move(xhat)]() {
                          if (od->grad.empty()) return;
                          const double dn = static_cast<double>(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                              const double* dy = od->grad.data() + r * d;
                              const double* xh = xhat.data() + r * d;
                              if (gd->requires_grad) {
                                  auto& dg = TensorOps::grad_buf(gd);
                                  for (std::size_t j = 0; j < d; ++j) dg[j] += dy[j] * xh[j];
                              }
                              if (bd->requires_grad) {
                                  auto& db = TensorOps::grad_buf(bd);
                                  for (std::size_t j = 0; j < d; ++j) db[j] += dy[j];
                              }
                              if (xd->requires_grad) {
                                  auto& dx = TensorOps::grad_buf(xd);
                                  // u = gain * dy; dx = (u - mean(u) - xhat * mean(u*xhat)) / std
                                  double mean_u = 0.0, mean_uxh = 0.0;
                                  for (std::size_t j = 0; j < d; ++j) {
                                      double u = gd->values[j] * dy[j];
                                      mean_u += u;
                                      mean_uxh += u * xh[j];
                                  }
                                  mean_u /= dn;
                                  mean_uxh /= dn;
                                  double* dxr = dx.data() + r * d;
                                  for (std::size_t j = 0; j < d; ++j) {
                                      double u = gd->values[j] * dy[j];
                                      dxr[j] += (u - mean_u - xh[j] * mean_uxh) * inv_std[r];
                                  }
                              }
                          }
                      });
    return out;
}

Tensor gelu(const Tensor& x) {
    require_defined(x, "gelu");
    Tensor out = Tensor::zeros(x.shape());
    {
        auto xv = x.values();
        auto ov = out.mutable_values();
        for (std::size_t i = 0; i < ov.size(); ++i) {
            double v = xv[i];
            double inner = kGeluScale * (v + kGeluCoeff * v * v * v);
            ov[i] = 0.5 * v * (1.0 + std::tanh(inner));
        }
    }
    DataPtr xd = TensorOps::data(x), od = TensorOps::data(out);
    TensorOps::record(out, x.requires_grad(), [xd, od]() {
        if (od->grad.empty()) return;
        auto& dx = TensorOps::grad_buf(xd);
        for (std::size_t i = 0; i < dx.size(); ++i) {
            double v = xd->values[i];
            double inner = kGeluScale * (v + kGeluCoeff * v * v * v);
            double t = std::tanh(inner);
            double dinner = kGeluScale * (1.0 + 3.0 * kGeluCoeff * v * v);
            double deriv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
            dx[i] += od->grad[i] * deriv;
        }
    });
    return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    require_defined(table, "gather_rows");
    require_rank2(table, "gather_rows");
    const int v = table.dim(0), d = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= v)
            fail(ErrorCode::Index, "gather_rows: id " + std::to_string(id) + " outside [0, " +
                                       std::to_string(v) + ")");
    const int n = static_cast<int>(ids.size());
    Tensor out = Tensor::zeros({n, d});
    {
        auto tv = table.values();
        auto ov = out.mutable_values();
        for (int i = 0; i < n; ++i)
            std::copy_n(tv.data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d, d,
                        ov.data() + static_cast<std::size_t>(i) * d);
    }
    DataPtr td = TensorOps::data(table), od = TensorOps::data(out);
    TensorOps::record(out, table.requires_grad(), [td, od, ids, d]() {
        if (od->grad.empty()) return;
        auto& dt = TensorOps::grad_buf(td);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            double* drow = dt.data() + static_cast<std::size_t>(ids[i]) * d;
            const double* g = od->grad.data() + i * d;
            for (int j = 0; j < d; ++j) drow[j] += g[j];
        }
    });
    return out;
}

Tensor row(const Tensor& x, int i) {
    require_defined(x, "row");
    require_rank2(x, "row");
    const int n = x.dim(0), d = x.dim(1);
    if (i < 0 || i >= n)
        fail(ErrorCode::Index, "row: index " + std::to_string(i) + " outside [0, " + std::to_string(n) + ")");
    Tensor out = Tensor::zeros({1, d});
    {
        auto xv = x.values();
        auto ov = out.mutable_values();
        std::copy_n(xv.data() + static_cast<std::size_t>(i) * d, d, ov.data());
    }
    DataPtr xd = TensorOps::data(x), od = TensorOps::data(out);
    TensorOps::record(out, x.requires_grad(), [xd, od, i, d]() {
        if (od->grad.empty()) return;
        auto& dx = TensorOps::grad_buf(xd);
        for (int j = 0; j < d; ++j) dx[static_cast<std::size_t>(i) * d + j] += od->grad[static_cast<std::size_t>(j)];
    });
    return out;
}

Tensor sum(const Tensor& x) {
    require_defined(x, "sum");
    double total = 0.0;
    for (double v : x.values()) total += v;
    Tensor out = Tensor::scalar(total);
    DataPtr xd = TensorOps::data(x), od = TensorOps::data(out);
    TensorOps::record(out, x.requires_grad(), [xd, od]() {
        if (od->grad.empty()) return;
        auto& dx = TensorOps::grad_buf(xd);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += od->grad[0];
    });
    return out;
}

Tensor bce_from_logit(const Tensor& logit, int label) {
    require_defined(logit, "bce_from_logit");
    if (logit.size() != 1)
        fail(ErrorCode::Dimension, "bce_from_logit: logit must be a scalar, got " + logit.shape_string());
    if (label != 0 && label != 1)
        fail(ErrorCode::Label, "bce_from_logit: label must be 0 or 1, got " + std::to_string(label));
    const double z = logit.values()[0];
    const double y = static_cast<double>(label);
    // softplus(z) - y*z, rearranged so exp never overflows
    const double loss = std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::abs(z)));
    Tensor out = Tensor::scalar(loss);
    DataPtr zd = TensorOps::data(logit), od = TensorOps::data(out);
    TensorOps::record(out, logit.requires_grad(), [zd, od, y]() {
        if (od->grad.empty()) return;
        auto& dz = TensorOps::grad_buf(zd);
        dz[0] += od->grad[0] * (stable_sigmoid(zd->values[0]) - y);
    });
    return out;
}

void backward(const Tensor& loss) {
    if (!loss.defined()) fail(ErrorCode::State, "backward: undefined tensor");
    if (loss.size() != 1)
        fail(ErrorCode::Dimension, "backward: loss must be a scalar, got " + loss.shape_string());
    Tape* tape = Tape::active();
    if (!tape) fail(ErrorCode::State, "backward: no active tape");
    DataPtr ld = TensorOps::data(loss);
    if (ld->producer != tape)
        fail(ErrorCode::State, "backward: loss was not produced under the active tape");
    TensorOps::grad_buf(ld)[0] += 1.0;
    for (auto it = tape->nodes_.rbegin(); it != tape->nodes_.rend(); ++it) it->backward();
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (h <= 0.0) fail(ErrorCode::Argument, "finite_diff_grad: h must be > 0");
    if (!x.defined()) fail(ErrorCode::State, "finite_diff_grad: undefined tensor");
    TapeSuspend no_tape;
    std::vector<double> base(x.values().begin(), x.values().end());
    Tensor g = Tensor::zeros(x.shape());
    auto gv = g.mutable_values();
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> plus = base, minus = base;
        plus[i] += h;
        minus[i] -= h;
        double fp = f(Tensor::from_values(x.shape(), std::move(plus)));
        double fm = f(Tensor::from_values(x.shape(), std::move(minus)));
        gv[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

double gradcheck_rel_err(double analytic, double numeric, double floor) {
    double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

}  // namespace headpatch
