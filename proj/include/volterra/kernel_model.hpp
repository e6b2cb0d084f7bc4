#pragma once

// Truncated symmetric Volterra series: parameter layout, regressors and
// noise-free simulation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace volterra {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// One stored coefficient of a symmetric kernel: a non-decreasing lag tuple and
/// the number of distinct orderings it stands for.
struct SymmetricIndex {
    std::vector<std::size_t> lags;
    std::uint64_t multiplicity = 1;

    friend bool operator==(const SymmetricIndex&, const SymmetricIndex&) = default;
};

/// Number of unique entries of a symmetric order-m tensor with n lags per axis,
/// C(n + m - 1, m). Throws std::range_error when the count does not fit 64 bits.
inline std::uint64_t count_coefficients(std::size_t order, std::size_t memory) {
    if (order < 1) throw std::invalid_argument("count_coefficients: order must be >= 1");
    if (memory < 1) throw std::invalid_argument("count_coefficients: memory must be >= 1");
    // C(n-1+m, m) = prod_{i=1..m} (n-1+i)/i, every partial product is an integer.
    unsigned __int128 c = 1;
    for (std::size_t i = 1; i <= order; ++i) {
        c = c * static_cast<unsigned __int128>(memory - 1 + i);
        c /= i;
        if (c > std::numeric_limits<std::uint64_t>::max())
            throw std::range_error("count_coefficients: coefficient count overflows 64 bits");
    }
    return static_cast<std::uint64_t>(c);
}

namespace detail {

inline std::uint64_t factorial(std::size_t k) {
    std::uint64_t f = 1;
    for (std::size_t i = 2; i <= k; ++i) f *= i;
    return f;
}

// m! / prod(run_length!) for a sorted tuple.
inline std::uint64_t permutation_count(const std::vector<std::size_t>& sorted) {
    std::uint64_t denom = 1;
    std::size_t run = 1;
    for (std::size_t i = 1; i <= sorted.size(); ++i) {
        if (i < sorted.size() && sorted[i] == sorted[i - 1]) {
            ++run;
        } else {
            denom *= factorial(run);
            run = 1;
        }
    }
    return factorial(sorted.size()) / denom;
}

}  // namespace detail

/// All non-decreasing lag tuples of an order-m kernel with n lags, in
/// lexicographic order, with their permutation multiplicities.
inline std::vector<SymmetricIndex> enumerate_symmetric_indices(std::size_t order, std::size_t memory) {
    if (order < 1) throw std::invalid_argument("enumerate_symmetric_indices: order must be >= 1");
    if (memory < 1) throw std::invalid_argument("enumerate_symmetric_indices: memory must be >= 1");
    if (order > 20) throw std::invalid_argument("enumerate_symmetric_indices: order too large");

    std::vector<SymmetricIndex> out;
    out.reserve(static_cast<std::size_t>(count_coefficients(order, memory)));
    std::vector<std::size_t> tuple(order, 0);
    while (true) {
        out.push_back({tuple, detail::permutation_count(tuple)});
        // Advance to the next non-decreasing tuple.
        std::size_t pos = order;
        while (pos > 0 && tuple[pos - 1] == memory - 1) --pos;
        if (pos == 0) break;
        const std::size_t next = tuple[pos - 1] + 1;
        for (std::size_t i = pos - 1; i < order; ++i) tuple[i] = next;
    }
    return out;
}

/// Degrees, memory lengths and the canonical parameter layout
/// [h0 | h1 | ... | hM], each block in lexicographic sorted-tuple order.
class VolterraStructure {
public:
    VolterraStructure() = default;

    /// `memory[m-1]` is the number of lags of the order-m kernel; the series
    /// degree is `memory.size()`.
    VolterraStructure(bool include_offset, std::vector<std::size_t> memory)
        : include_offset_(include_offset), memory_(std::move(memory)) {
        for (std::size_t m = 0; m < memory_.size(); ++m)
            if (memory_[m] < 1) throw std::invalid_argument("VolterraStructure: memory length must be >= 1");
        if (!include_offset_ && memory_.empty())
            throw std::invalid_argument("VolterraStructure: empty model (no offset and no kernels)");

        std::size_t offset = include_offset_ ? 1 : 0;
        for (std::size_t m = 1; m <= memory_.size(); ++m) {
            const auto idx = enumerate_symmetric_indices(m, memory_[m - 1]);
            Order ord;
            ord.offset = offset;
            ord.count = idx.size();
            ord.lags.reserve(idx.size() * m);
            ord.multiplicity.reserve(idx.size());
            for (const auto& s : idx) {
                ord.lags.insert(ord.lags.end(), s.lags.begin(), s.lags.end());
                ord.multiplicity.push_back(static_cast<double>(s.multiplicity));
            }
            offset += idx.size();
            orders_.push_back(std::move(ord));
        }
        n_theta_ = offset;
    }

    static VolterraStructure fir(std::size_t n1) { return VolterraStructure(false, {n1}); }

    bool include_offset() const noexcept { return include_offset_; }
    std::size_t max_degree() const noexcept { return memory_.size(); }
    std::size_t n_theta() const noexcept { return n_theta_; }
    const std::vector<std::size_t>& memory_lengths() const noexcept { return memory_; }

    std::size_t memory(std::size_t order) const {
        check_order(order);
        return memory_[order - 1];
    }
    /// Longest lag window over all kernels (0 for an offset-only model).
    std::size_t max_memory() const noexcept {
        return memory_.empty() ? 0 : *std::max_element(memory_.begin(), memory_.end());
    }
    /// First θ position of the order-m block (m = 0 is the offset).
    std::size_t block_offset(std::size_t order) const {
        if (order == 0) {
            if (!include_offset_) throw std::invalid_argument("VolterraStructure: model has no offset");
            return 0;
        }
        check_order(order);
        return orders_[order - 1].offset;
    }
    std::size_t block_size(std::size_t order) const {
        if (order == 0) return include_offset_ ? 1 : 0;
        check_order(order);
        return orders_[order - 1].count;
    }
    bool has_order(std::size_t order) const noexcept {
        return order == 0 ? include_offset_ : order <= memory_.size();
    }
    /// Lags of coefficient `k` (0-based within the order block).
    std::span<const std::size_t> lags(std::size_t order, std::size_t k) const {
        check_order(order);
        const auto& o = orders_[order - 1];
        return {o.lags.data() + k * order, order};
    }
    double multiplicity(std::size_t order, std::size_t k) const {
        check_order(order);
        return orders_[order - 1].multiplicity[k];
    }
    std::vector<SymmetricIndex> index_map(std::size_t order) const {
        check_order(order);
        std::vector<SymmetricIndex> out;
        const auto& o = orders_[order - 1];
        out.reserve(o.count);
        for (std::size_t k = 0; k < o.count; ++k) {
            auto l = lags(order, k);
            out.push_back({{l.begin(), l.end()}, static_cast<std::uint64_t>(o.multiplicity[k])});
        }
        return out;
    }

    /// Fills `out` (length n_theta) with the regressor at time n. Samples of u
    /// before index 0 are zero.
    void fill_regressor_row(std::span<const double> u, std::size_t n, std::span<double> out) const {
        if (n >= u.size()) throw std::invalid_argument("regressor_row: time index out of range");
        if (out.size() != n_theta_) throw std::invalid_argument("regressor_row: output length mismatch");
        std::size_t col = 0;
        if (include_offset_) out[col++] = 1.0;
        for (std::size_t m = 1; m <= orders_.size(); ++m) {
            const auto& o = orders_[m - 1];
            const std::size_t* lag = o.lags.data();
            for (std::size_t k = 0; k < o.count; ++k, lag += m) {
                double prod = o.multiplicity[k];
                for (std::size_t i = 0; i < m; ++i) {
                    const std::size_t tau = lag[i];
                    prod *= tau <= n ? u[n - tau] : 0.0;
                }
                out[col++] = prod;
            }
        }
    }

    friend bool operator==(const VolterraStructure& a, const VolterraStructure& b) {
        return a.include_offset_ == b.include_offset_ && a.memory_ == b.memory_;
    }

private:
    struct Order {
        std::size_t offset = 0;
        std::size_t count = 0;
        std::vector<std::size_t> lags;     // count × order, row-major
        std::vector<double> multiplicity;  // count
    };

    void check_order(std::size_t order) const {
        if (order < 1 || order > memory_.size())
            throw std::invalid_argument("VolterraStructure: order " + std::to_string(order) + " not in model");
    }

    bool include_offset_ = false;
    std::vector<std::size_t> memory_;
    std::vector<Order> orders_;
    std::size_t n_theta_ = 0;
};

/// Structure plus coefficient vector.
struct VolterraModel {
    VolterraStructure structure;
    Vector theta;

    VolterraModel(VolterraStructure s, Vector t) : structure(std::move(s)), theta(std::move(t)) {
        if (static_cast<std::size_t>(theta.size()) != structure.n_theta())
            throw std::invalid_argument("VolterraModel: theta length does not match structure");
        if (!theta.allFinite()) throw std::invalid_argument("VolterraModel: theta has non-finite entries");
    }
};

inline std::span<const double> as_span(const Vector& v) {
    return {v.data(), static_cast<std::size_t>(v.size())};
}

inline Vector regressor_row(const Vector& u, std::size_t n, const VolterraStructure& s) {
    Vector row(static_cast<Eigen::Index>(s.n_theta()));
    s.fill_regressor_row(as_span(u), n, {row.data(), s.n_theta()});
    return row;
}

/// Observation matrix K (N × n_theta); the order-1 block is lower-triangular Toeplitz in u.
inline Matrix build_observation_matrix(const Vector& u, const VolterraStructure& s) {
    if (u.size() == 0) throw std::invalid_argument("build_observation_matrix: empty input");
    const auto N = static_cast<std::size_t>(u.size());
    // Filled row by row into a row-major buffer, then converted.
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> K(u.size(), s.n_theta());
    for (std::size_t n = 0; n < N; ++n)
        s.fill_regressor_row(as_span(u), n, {K.row(static_cast<Eigen::Index>(n)).data(), s.n_theta()});
    return K;
}

/// Noise-free output K·θ, streamed one regressor row at a time.
inline Vector simulate_output(const Vector& u, const VolterraModel& model) {
    const auto& s = model.structure;
    const auto N = static_cast<std::size_t>(u.size());
    Vector y(u.size());
    std::vector<double> row(s.n_theta());
    for (std::size_t n = 0; n < N; ++n) {
        s.fill_regressor_row(as_span(u), n, row);
        double acc = 0.0;
        for (std::size_t k = 0; k < row.size(); ++k) acc += row[k] * model.theta[static_cast<Eigen::Index>(k)];
        y[static_cast<Eigen::Index>(n)] = acc;
    }
    return y;
}

/// Paired input/output record.
struct Dataset {
    Vector u;
    Vector y;
    double sample_period = 1.0;

    Dataset() = default;
    Dataset(Vector u_, Vector y_, double ts) : u(std::move(u_)), y(std::move(y_)), sample_period(ts) { validate(); }

    std::size_t size() const noexcept { return static_cast<std::size_t>(u.size()); }

    void validate() const {
        if (u.size() != y.size()) throw std::invalid_argument("Dataset: u and y lengths differ");
        if (u.size() < 1) throw std::invalid_argument("Dataset: empty record");
        if (!(sample_period > 0.0)) throw std::invalid_argument("Dataset: sample period must be positive");
        if (!u.allFinite() || !y.allFinite()) throw std::invalid_argument("Dataset: non-finite samples");
    }
};

/// Reads a `u,y` CSV. The sample period is not part of the file.
inline Dataset read_dataset_csv(const std::string& path, double sample_period) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("dataset '" + path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "u,y") throw std::runtime_error("dataset '" + path + "': expected header 'u,y'");
    std::vector<double> u, y;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw std::runtime_error("dataset '" + path + "' line " + std::to_string(lineno) + ": expected two fields");
        try {
            std::size_t used = 0;
            u.push_back(std::stod(line.substr(0, comma), &used));
            y.push_back(std::stod(line.substr(comma + 1), &used));
        } catch (const std::logic_error&) {
            throw std::runtime_error("dataset '" + path + "' line " + std::to_string(lineno) + ": bad number");
        }
    }
    return Dataset(Eigen::Map<Vector>(u.data(), static_cast<Eigen::Index>(u.size())),
                   Eigen::Map<Vector>(y.data(), static_cast<Eigen::Index>(y.size())), sample_period);
}

inline void write_dataset_csv(const std::string& path, const Dataset& d) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write dataset '" + path + "'");
    out.precision(17);
    out << "u,y\n";
    for (Eigen::Index n = 0; n < d.u.size(); ++n) out << d.u[n] << ',' << d.y[n] << '\n';
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace volterra
