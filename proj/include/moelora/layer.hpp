#ifndef MOELORA_LAYER_HPP
#define MOELORA_LAYER_HPP

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "moelora/matrix.hpp"
#include "moelora/rng.hpp"

namespace moelora {

struct LayerShape {
    std::size_t output_dim = 0;   // m
    std::size_t input_dim = 0;    // n
    std::size_t num_experts = 0;  // N
    std::size_t top_k = 0;        // k
    std::size_t rank = 0;         // r
    double alpha = 16.0;

    double scaling() const { return alpha / static_cast<double>(rank); }

    void validate() const {
        if (output_dim < 1 || input_dim < 1)
            throw std::invalid_argument("LayerShape: dimensions must be >= 1");
        if (num_experts < 1)
            throw std::invalid_argument("LayerShape: at least one expert required");
        if (top_k < 1 || top_k > num_experts)
            throw std::invalid_argument("LayerShape: top_k must satisfy 1 <= k <= num_experts");
        if (rank < 1 || rank > std::min(output_dim, input_dim))
            throw std::invalid_argument("LayerShape: rank must satisfy 1 <= r <= min(m, n)");
        if (!(alpha > 0.0))
            throw std::invalid_argument("LayerShape: alpha must be positive");
    }
};

/// One expert's adapter pair: b is m x r, a is r x n; the adapter update is
/// scaling * b * a.
struct LoraExpert {
    Matrix b;
    Matrix a;
};

struct GateOutput {
    std::vector<std::size_t> selected;  // ascending, size k
    std::vector<double> gates;          // length N, zero off-selection, sums to 1
    std::vector<double> logits;         // length N
};

enum class ForwardMode { kStandard, kSqrtDetach };

struct MoeLoraLayer {
    Matrix base;                     // m x n, frozen
    std::vector<LoraExpert> experts; // length N
    Matrix router;                   // N x n
    LayerShape shape;
    ForwardMode mode = ForwardMode::kStandard;
};

/// Per-token backward bookkeeping: gate decision plus, per selected expert,
/// the rank-space activation u = a*x and the scaled output e = s*b*u.
struct TokenCache {
    GateOutput gate;
    std::vector<std::vector<double>> hidden;      // u_i, length r
    std::vector<std::vector<double>> expert_out;  // e_i, length m
};

struct ForwardCache {
    Matrix inputs;  // n x T
    std::vector<TokenCache> tokens;
    ForwardMode mode = ForwardMode::kStandard;
};

/// Draw order is fixed (base, router, experts 0..N-1 each b then a) so one
/// stream reproduces one layer. Base uses fan-in scale 1/sqrt(n), router
/// sigma 0.02 for near-uniform initial routing, experts use init_sigma; a
/// nonzero init_sigma keeps every b'b invertible with probability 1.
inline MoeLoraLayer init_layer(const LayerShape& shape, RngStream& rng, double init_sigma) {
    shape.validate();
    MoeLoraLayer layer;
    layer.shape = shape;
    layer.base = seeded_gaussian(rng, shape.output_dim, shape.input_dim,
                                 1.0 / std::sqrt(static_cast<double>(shape.input_dim)));
    layer.router = seeded_gaussian(rng, shape.num_experts, shape.input_dim, 0.02);
    layer.experts.reserve(shape.num_experts);
    for (std::size_t i = 0; i < shape.num_experts; ++i) {
        LoraExpert e;
        e.b = seeded_gaussian(rng, shape.output_dim, shape.rank, init_sigma);
        e.a = seeded_gaussian(rng, shape.rank, shape.input_dim, init_sigma);
        layer.experts.push_back(std::move(e));
    }
    return layer;
}

/// True when some expert has a zero column in b, i.e. b'b has a zero diagonal
/// entry and undamped inversion would fail.
inline bool needs_damping(const MoeLoraLayer& layer) {
    for (const LoraExpert& e : layer.experts) {
        for (std::size_t j = 0; j < e.b.cols(); ++j) {
            double col_sq = 0.0;
            for (std::size_t i = 0; i < e.b.rows(); ++i) col_sq += e.b(i, j) * e.b(i, j);
            if (col_sq == 0.0) return true;
        }
    }
    return false;
}

inline GateOutput route_token(const MoeLoraLayer& layer, const std::vector<double>& x) {
    const LayerShape& s = layer.shape;
    if (x.size() != s.input_dim)
        throw std::invalid_argument("route_token: input length mismatch");
    for (double v : x)
        if (!std::isfinite(v))
            throw std::invalid_argument("route_token: non-finite input");
    GateOutput out;
    out.logits.assign(s.num_experts, 0.0);
    for (std::size_t i = 0; i < s.num_experts; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < s.input_dim; ++j) acc += layer.router(i, j) * x[j];
        out.logits[i] = acc;
    }
    out.selected = top_k_select(out.logits, s.top_k);
    std::vector<double> restricted(out.selected.size());
    for (std::size_t i = 0; i < out.selected.size(); ++i)
        restricted[i] = out.logits[out.selected[i]];
    const std::vector<double> g = softmax(restricted);
    out.gates.assign(s.num_experts, 0.0);
    for (std::size_t i = 0; i < out.selected.size(); ++i)
        out.gates[out.selected[i]] = g[i];
    return out;
}

namespace detail {

inline ForwardCache forward_impl(const MoeLoraLayer& layer, const Matrix& x_in, ForwardMode mode,
                                 Matrix& y_out) {
    const LayerShape& shp = layer.shape;
    if (x_in.rows() != shp.input_dim)
        throw std::invalid_argument("forward: input rows must equal input_dim");
    const std::size_t tokens = x_in.cols();
    const double s = shp.scaling();

    y_out = mat_mul(layer.base, x_in);
    ForwardCache cache;
    cache.inputs = x_in;
    cache.mode = mode;
    cache.tokens.resize(tokens);

    for (std::size_t t = 0; t < tokens; ++t) {
        const std::vector<double> x = x_in.column(t);
        TokenCache& tc = cache.tokens[t];
        tc.gate = route_token(layer, x);
        tc.hidden.resize(tc.gate.selected.size());
        tc.expert_out.resize(tc.gate.selected.size());
        for (std::size_t si = 0; si < tc.gate.selected.size(); ++si) {
            const std::size_t ei = tc.gate.selected[si];
            const LoraExpert& ex = layer.experts[ei];
            std::vector<double> u(shp.rank, 0.0);
            for (std::size_t i = 0; i < shp.rank; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < shp.input_dim; ++j) acc += ex.a(i, j) * x[j];
                u[i] = acc;
            }
            std::vector<double> e(shp.output_dim, 0.0);
            for (std::size_t i = 0; i < shp.output_dim; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < shp.rank; ++j) acc += ex.b(i, j) * u[j];
                e[i] = s * acc;
            }
            const double g = tc.gate.gates[ei];
            if (mode == ForwardMode::kStandard) {
                for (std::size_t i = 0; i < shp.output_dim; ++i)
                    y_out(i, t) += g * e[i];
            } else {
                // Value-identical split: sq*e is the parameter-gradient path,
                // (g - sq)*e the gate-gradient path with e held constant.
                const double sq = std::sqrt(g);
                for (std::size_t i = 0; i < shp.output_dim; ++i)
                    y_out(i, t) += sq * e[i] + (g - sq) * e[i];
            }
            tc.hidden[si] = std::move(u);
            tc.expert_out[si] = std::move(e);
        }
    }
    require_finite(y_out, "forward");
    return cache;
}

} // namespace detail

struct ForwardResult {
    Matrix output;  // m x T
    ForwardCache cache;
};

inline ForwardResult forward_standard(const MoeLoraLayer& layer, const Matrix& x_in) {
    ForwardResult r;
    r.cache = detail::forward_impl(layer, x_in, ForwardMode::kStandard, r.output);
    return r;
}

inline ForwardResult forward_sqrt_detach(const MoeLoraLayer& layer, const Matrix& x_in) {
    ForwardResult r;
    r.cache = detail::forward_impl(layer, x_in, ForwardMode::kSqrtDetach, r.output);
    return r;
}

/// Dispatch on the layer's configured mode.
inline ForwardResult forward(const MoeLoraLayer& layer, const Matrix& x_in) {
    return layer.mode == ForwardMode::kStandard ? forward_standard(layer, x_in)
                                                : forward_sqrt_detach(layer, x_in);
}

/// W + sum_i gates[i] * s * b_i * a_i for a fixed gate vector on the simplex.
inline Matrix effective_weight(const MoeLoraLayer& layer, const std::vector<double>& gates) {
    const LayerShape& shp = layer.shape;
    if (gates.size() != shp.num_experts)
        throw std::invalid_argument("effective_weight: gate vector length mismatch");
    double sum = 0.0;
    for (double g : gates) {
        if (g < -1e-12)
            throw std::invalid_argument("effective_weight: negative gate");
        sum += g;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("effective_weight: gates must sum to 1");
    const double s = shp.scaling();
    Matrix x = layer.base;
    for (std::size_t i = 0; i < shp.num_experts; ++i) {
        if (gates[i] == 0.0) continue;
        x += (gates[i] * s) * mat_mul(layer.experts[i].b, layer.experts[i].a);
    }
    return x;
}

inline std::vector<double> mean_pool(const Matrix& x_in) {
    std::vector<double> out(x_in.rows(), 0.0);
    if (x_in.cols() == 0) return out;
    for (std::size_t i = 0; i < x_in.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t t = 0; t < x_in.cols(); ++t) acc += x_in(i, t);
        out[i] = acc / static_cast<double>(x_in.cols());
    }
    return out;
}

/// Matrix-mode routing: one gate vector for the whole step, produced by
/// routing the mean-pooled input.
inline GateOutput route_mean_pooled(const MoeLoraLayer& layer, const Matrix& x_in) {
    return route_token(layer, mean_pool(x_in));
}

// --- checkpoint serialization -----------------------------------------------
//
// Layout (all integers and doubles little-endian):
//   8 bytes magic "MOELORA1"
//   u64 m, n, N, k, r; f64 alpha; u8 mode
//   f64 base (m*n row-major), router (N*n), then per expert b (m*r), a (r*n)

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'E', 'L', 'O', 'R', 'A', '1'};

inline void put_u64(std::ostream& os, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(buf, 8);
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

inline void put_f64(std::ostream& os, double d) { put_u64(os, std::bit_cast<std::uint64_t>(d)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

inline void put_matrix(std::ostream& os, const Matrix& m) {
    for (double v : m.data()) put_f64(os, v);
}

inline Matrix get_matrix(std::istream& is, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = get_f64(is);
    return m;
}

} // namespace detail

inline void save_layer(const MoeLoraLayer& layer, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_layer: cannot open " + path);
    os.write(detail::kCheckpointMagic, 8);
    const LayerShape& s = layer.shape;
    detail::put_u64(os, s.output_dim);
    detail::put_u64(os, s.input_dim);
    detail::put_u64(os, s.num_experts);
    detail::put_u64(os, s.top_k);
    detail::put_u64(os, s.rank);
    detail::put_f64(os, s.alpha);
    os.put(layer.mode == ForwardMode::kSqrtDetach ? '\1' : '\0');
    detail::put_matrix(os, layer.base);
    detail::put_matrix(os, layer.router);
    for (const LoraExpert& e : layer.experts) {
        detail::put_matrix(os, e.b);
        detail::put_matrix(os, e.a);
    }
    if (!os) throw std::runtime_error("save_layer: write failed for " + path);
}

inline MoeLoraLayer load_layer(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_layer: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw std::runtime_error("load_layer: bad magic header");
    MoeLoraLayer layer;
    layer.shape.output_dim = detail::get_u64(is);
    layer.shape.input_dim = detail::get_u64(is);
    layer.shape.num_experts = detail::get_u64(is);
    layer.shape.top_k = detail::get_u64(is);
    layer.shape.rank = detail::get_u64(is);
    layer.shape.alpha = detail::get_f64(is);
    const int mode = is.get();
    if (mode != 0 && mode != 1)
        throw std::runtime_error("load_layer: bad mode byte");
    layer.mode = mode ? ForwardMode::kSqrtDetach : ForwardMode::kStandard;
    layer.shape.validate();
    const LayerShape& s = layer.shape;
    layer.base = detail::get_matrix(is, s.output_dim, s.input_dim);
    layer.router = detail::get_matrix(is, s.num_experts, s.input_dim);
    layer.experts.resize(s.num_experts);
    for (LoraExpert& e : layer.experts) {
        e.b = detail::get_matrix(is, s.output_dim, s.rank);
        e.a = detail::get_matrix(is, s.rank, s.input_dim);
    }
    require_finite(layer.base, "load_layer");
    require_finite(layer.router, "load_layer");
    for (const LoraExpert& e : layer.experts) {
        require_finite(e.b, "load_layer");
        require_finite(e.a, "load_layer");
    }
    return layer;
}

} // namespace moelora

#endif // MOELORA_LAYER_HPP
