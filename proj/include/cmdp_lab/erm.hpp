#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <istream>
#include <limits>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "errors.hpp"

namespace cmdp {

enum class Loss { L1, L2 };

inline double loss_value(Loss loss, double z, double y) {
    const double d = z - y;
    return loss == Loss::L1 ? std::abs(d) : d * d;
}

inline Loss parse_loss(const std::string& name) {
    if (name == "l1" || name == "L1") return Loss::L1;
    if (name == "l2" || name == "L2") return Loss::L2;
    throw InvalidParameter("unknown loss '" + name + "'");
}

inline std::string loss_name(Loss loss) { return loss == Loss::L1 ? "l1" : "l2"; }

inline double clip01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

/// (x_i, y_i) pairs with a fixed input arity, stored flat. Labels in [0,1].
class LabeledDataset {
public:
    LabeledDataset() = default;
    explicit LabeledDataset(std::size_t arity) : arity_(arity) {}

    void add(std::span<const double> x, double y) {
        if (x.size() != arity_)
            throw LengthMismatch("input of arity " + std::to_string(x.size()) + " added to a dataset of arity " +
                                 std::to_string(arity_));
        if (!(y >= 0.0 && y <= 1.0)) throw InvalidParameter("label " + std::to_string(y) + " outside [0,1]");
        xs_.insert(xs_.end(), x.begin(), x.end());
        ys_.push_back(y);
    }

    std::size_t arity() const { return arity_; }
    std::size_t size() const { return ys_.size(); }
    bool empty() const { return ys_.empty(); }
    std::span<const double> input(std::size_t i) const { return {xs_.data() + i * arity_, arity_}; }
    double label(std::size_t i) const { return ys_[i]; }
    const std::vector<double>& labels() const { return ys_; }

private:
    std::size_t arity_ = 0;
    std::vector<double> xs_;
    std::vector<double> ys_;
};

/**
Features for inputs laid out as (c_1..c_d', k_1..k_m): the trailing k's are
discrete indices (state, action, next state) with the given cardinalities.
The feature vector is one-hot over the discrete tuple tensored with
[1, c_1, ..., c_d'], so each tuple gets its own affine function of c.
With no discrete part this is the plain affine map [1, c].
*/
struct FeatureMap {
    std::size_t context_dim = 0;
    std::vector<std::size_t> cardinalities;

    std::size_t input_arity() const { return context_dim + cardinalities.size(); }
    std::size_t block_width() const { return context_dim + 1; }

    std::size_t num_blocks() const {
        std::size_t n = 1;
        for (std::size_t k : cardinalities) n *= k;
        return n;
    }

    std::size_t dim() const { return num_blocks() * block_width(); }

    std::size_t block(std::span<const double> x) const {
        std::size_t b = 0;
        for (std::size_t j = 0; j < cardinalities.size(); ++j) {
            const double v = x[context_dim + j];
            const auto k = static_cast<std::size_t>(v);
            if (v < 0.0 || static_cast<double>(k) != v || k >= cardinalities[j])
                throw InvalidParameter("discrete input " + std::to_string(v) + " out of range");
            b = b * cardinalities[j] + k;
        }
        return b;
    }

    /// <w, phi(x)> without clipping.
    double linear(std::span<const double> w, std::span<const double> x) const {
        const std::size_t off = block(x) * block_width();
        double v = w[off];
        for (std::size_t j = 0; j < context_dim; ++j) v += w[off + 1 + j] * x[j];
        return v;
    }

    nlohmann::json to_json() const { return {{"context_dim", context_dim}, {"cardinalities", cardinalities}}; }

    static FeatureMap from_json(const nlohmann::json& j) {
        return {j.at("context_dim").get<std::size_t>(), j.at("cardinalities").get<std::vector<std::size_t>>()};
    }
};

/// Complexity measure a class declares for the sample-size calculators.
enum class ComplexityKind { Pseudo, FatShattering };

/**
Hypothesis class: either an explicit finite list of functions into [0,1],
or clip(<w, phi(x)>, 0, 1) over a FeatureMap.

`declared_dim` is the pseudo-dimension (or, for FatShattering, unused for
linear classes which derive d from the weight bound and the scale).
*/
class FunctionClass {
public:
    using Member = std::function<double(std::span<const double>)>;
    enum class Kind { Finite, LinearClipped };

    static FunctionClass finite(std::vector<Member> members, std::size_t input_arity,
                                std::vector<std::string> names = {}) {
        if (members.empty()) throw InvalidParameter("a finite class needs at least one member");
        FunctionClass c;
        c.kind_ = Kind::Finite;
        c.members_ = std::make_shared<const std::vector<Member>>(std::move(members));
        c.arity_ = input_arity;
        c.names_ = std::move(names);
        const double bits = std::log2(static_cast<double>(c.members_->size()));
        c.declared_dim_ = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(bits)));
        return c;
    }

    static FunctionClass linear_clipped(FeatureMap features, double weight_bound = 1.0) {
        if (!(weight_bound > 0.0)) throw InvalidParameter("weight bound must be positive");
        FunctionClass c;
        c.kind_ = Kind::LinearClipped;
        c.features_ = std::move(features);
        c.arity_ = c.features_.input_arity();
        c.weight_bound_ = weight_bound;
        // Pseudo-dimension of affine functions over a block-sparse map: the
        // number of features.
        c.declared_dim_ = c.features_.dim();
        return c;
    }

    Kind kind() const { return kind_; }
    std::size_t input_arity() const { return arity_; }
    const FeatureMap& features() const { return features_; }
    double weight_bound() const { return weight_bound_; }
    const std::vector<Member>& members() const { return *members_; }
    std::size_t size() const { return members_ ? members_->size() : 0; }

    std::string member_name(std::size_t i) const {
        return i < names_.size() ? names_[i] : "f" + std::to_string(i);
    }

    ComplexityKind complexity_kind() const { return complexity_kind_; }
    double alpha1() const { return alpha1_; }
    double alpha2() const { return alpha2_; }

    FunctionClass& set_complexity(ComplexityKind kind, std::size_t d = 0) {
        complexity_kind_ = kind;
        if (d > 0) declared_dim_ = d;
        return *this;
    }

    FunctionClass& set_approximation(double alpha1, double alpha2) {
        if (alpha1 < 0.0 || alpha2 < 0.0) throw InvalidParameter("approximation errors are nonnegative");
        alpha1_ = alpha1;
        alpha2_ = alpha2;
        return *this;
    }

    /// Dimension entering the sample bound at accuracy eps. For a linear
    /// class under the fat-shattering measure this is fat(eps/256) taken as
    /// (W * 256 / eps)^2, assuming unit-norm features.
    std::size_t dimension(double eps) const {
        if (complexity_kind_ == ComplexityKind::FatShattering && kind_ == Kind::LinearClipped) {
            const double g = eps / 256.0;
            return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(weight_bound_ * weight_bound_ / (g * g))));
        }
        return declared_dim_;
    }

private:
    Kind kind_ = Kind::Finite;
    std::shared_ptr<const std::vector<Member>> members_;
    std::vector<std::string> names_;
    FeatureMap features_;
    std::size_t arity_ = 0;
    double weight_bound_ = 1.0;
    std::size_t declared_dim_ = 1;
    ComplexityKind complexity_kind_ = ComplexityKind::Pseudo;
    double alpha1_ = 0.0;
    double alpha2_ = 0.0;
};

/// Output of erm_fit, or the zero function. Always evaluates into [0,1].
class Predictor {
public:
    enum class Kind { Zero, Finite, Linear };

    struct Provenance {
        std::string class_kind = "zero";
        std::size_t samples = 0;
        std::string loss = "l2";
        double empirical_loss = 0.0;
        /// Number of one-hot blocks whose least-squares system had data but
        /// was rank deficient (solved by minimum norm).
        std::size_t rank_deficient_blocks = 0;
    };

    Predictor() = default;

    static Predictor zero() { return Predictor(); }

    static Predictor finite(const FunctionClass& cls, std::size_t index) {
        Predictor p;
        p.kind_ = Kind::Finite;
        p.member_ = cls.members().at(index);
        p.index_ = index;
        p.name_ = cls.member_name(index);
        p.prov_.class_kind = "finite";
        return p;
    }

    static Predictor linear(FeatureMap features, std::vector<double> weights) {
        if (weights.size() != features.dim()) throw LengthMismatch("weight vector does not match the feature map");
        Predictor p;
        p.kind_ = Kind::Linear;
        p.features_ = std::move(features);
        p.weights_ = std::move(weights);
        p.prov_.class_kind = "linear_clipped";
        return p;
    }

    Kind kind() const { return kind_; }
    const std::vector<double>& weights() const { return weights_; }
    const FeatureMap& features() const { return features_; }
    std::size_t index() const { return index_; }
    const Provenance& provenance() const { return prov_; }
    Provenance& provenance() { return prov_; }

    double operator()(std::span<const double> x) const {
        switch (kind_) {
            case Kind::Finite: return clip01(member_(x));
            case Kind::Linear: return clip01(features_.linear(weights_, x));
            case Kind::Zero:
            default: return 0.0;
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        switch (kind_) {
            case Kind::Zero: j["class"] = "zero"; break;
            case Kind::Finite:
                j["class"] = "finite";
                j["params"] = {{"index", index_}, {"name", name_}};
                break;
            case Kind::Linear:
                j["class"] = "linear_clipped";
                j["params"] = {{"features", features_.to_json()}, {"w", weights_}};
                break;
        }
        j["provenance"] = {{"samples", prov_.samples},
                           {"loss", prov_.loss},
                           {"empirical_loss", prov_.empirical_loss},
                           {"rank_deficient_blocks", prov_.rank_deficient_blocks}};
        return j;
    }

    /// Finite predictors need their class to be rebuilt.
    static Predictor from_json(const nlohmann::json& j, const FunctionClass* cls = nullptr) {
        const auto kind = j.at("class").get<std::string>();
        Predictor p;
        if (kind == "linear_clipped") {
            p = linear(FeatureMap::from_json(j.at("params").at("features")),
                       j.at("params").at("w").get<std::vector<double>>());
        } else if (kind == "finite") {
            if (!cls) throw ConfigError("a finite predictor needs its function class to be restored");
            p = finite(*cls, j.at("params").at("index").get<std::size_t>());
        } else if (kind != "zero") {
            throw ConfigError("unknown predictor class '" + kind + "'");
        }
        if (j.contains("provenance")) {
            const auto& pr = j.at("provenance");
            p.prov_.samples = pr.value("samples", std::size_t{0});
            p.prov_.loss = pr.value("loss", std::string("l2"));
            p.prov_.empirical_loss = pr.value("empirical_loss", 0.0);
            p.prov_.rank_deficient_blocks = pr.value("rank_deficient_blocks", std::size_t{0});
        }
        return p;
    }

private:
    Kind kind_ = Kind::Zero;
    FunctionClass::Member member_;
    std::size_t index_ = 0;
    std::string name_;
    FeatureMap features_;
    std::vector<double> weights_;
    Provenance prov_;
};

inline double empirical_loss(const Predictor& f, const LabeledDataset& data, Loss loss) {
    if (data.empty()) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) sum += loss_value(loss, f(data.input(i)), data.label(i));
    return sum / static_cast<double>(data.size());
}

namespace detail {

struct BlockRows {
    std::vector<std::vector<std::size_t>> rows;  // sample indices per block
};

inline BlockRows group_by_block(const FeatureMap& fm, const LabeledDataset& data) {
    BlockRows g;
    g.rows.resize(fm.num_blocks());
    for (std::size_t i = 0; i < data.size(); ++i) g.rows[fm.block(data.input(i))].push_back(i);
    return g;
}

inline Eigen::VectorXd weighted_lsq(const FeatureMap& fm, const LabeledDataset& data,
                                    const std::vector<std::size_t>& rows, const std::vector<double>* weights,
                                    bool* deficient) {
    const std::size_t k = fm.block_width();
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
    Eigen::VectorXd phi(static_cast<Eigen::Index>(k));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto x = data.input(rows[r]);
        phi(0) = 1.0;
        for (std::size_t j = 0; j < fm.context_dim; ++j) phi(static_cast<Eigen::Index>(j + 1)) = x[j];
        const double u = weights ? (*weights)[r] : 1.0;
        gram.noalias() += u * phi * phi.transpose();
        rhs.noalias() += u * data.label(rows[r]) * phi;
    }
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(gram);
    if (deficient) *deficient = cod.rank() < static_cast<Eigen::Index>(k);
    return cod.solve(rhs);
}

inline double block_l1(const FeatureMap& fm, const LabeledDataset& data, const std::vector<std::size_t>& rows,
                       const Eigen::VectorXd& w, std::vector<double>* residuals) {
    double sum = 0.0;
    if (residuals) residuals->resize(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto x = data.input(rows[r]);
        double z = w(0);
        for (std::size_t j = 0; j < fm.context_dim; ++j) z += w(static_cast<Eigen::Index>(j + 1)) * x[j];
        const double res = std::abs(z - data.label(rows[r]));
        if (residuals) (*residuals)[r] = res;
        sum += res;
    }
    return sum;
}

/// Least absolute deviations by iteratively reweighted least squares,
/// started from the least-squares solution.
inline Eigen::VectorXd lad_irls(const FeatureMap& fm, const LabeledDataset& data,
                                const std::vector<std::size_t>& rows, Eigen::VectorXd w) {
    std::vector<double> res;
    double best = block_l1(fm, data, rows, w, &res);
    Eigen::VectorXd best_w = w;
    std::vector<double> u(rows.size());
    for (int it = 0; it < 500; ++it) {
        for (std::size_t r = 0; r < rows.size(); ++r) u[r] = 1.0 / std::max(res[r], 1e-9);
        w = weighted_lsq(fm, data, rows, &u, nullptr);
        const double cur = block_l1(fm, data, rows, w, &res);
        if (cur < best) {
            const double gain = best - cur;
            best = cur;
            best_w = w;
            if (gain <= 1e-13 * std::max(1.0, best)) break;
        } else {
            break;
        }
    }
    return best_w;
}

}  // namespace detail

/**
Empirical risk minimizer over `cls`.

Finite classes are scanned exhaustively, ties going to the lowest index.
Linear classes are fitted per one-hot block: L2 by least squares (minimum
norm when the block is rank deficient), L1 by IRLS from the least-squares
start. The clip to [0,1] is applied to the fitted linear map. Blocks with no
data get zero weights.
*/
inline Predictor erm_fit(const FunctionClass& cls, const LabeledDataset& data, Loss loss) {
    if (data.empty()) throw EmptyDataset("erm_fit called on an empty dataset");
    if (data.arity() != cls.input_arity())
        throw LengthMismatch("dataset arity " + std::to_string(data.arity()) + " does not match class arity " +
                             std::to_string(cls.input_arity()));
    Predictor out;
    if (cls.kind() == FunctionClass::Kind::Finite) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < cls.size(); ++i) {
            const auto& f = cls.members()[i];
            double sum = 0.0;
            for (std::size_t n = 0; n < data.size(); ++n) sum += loss_value(loss, clip01(f(data.input(n))), data.label(n));
            if (sum < best) {
                best = sum;
                best_i = i;
            }
        }
        out = Predictor::finite(cls, best_i);
    } else {
        const FeatureMap& fm = cls.features();
        const auto groups = detail::group_by_block(fm, data);
        std::vector<double> w(fm.dim(), 0.0);
        std::size_t deficient_blocks = 0;
        for (std::size_t b = 0; b < groups.rows.size(); ++b) {
            const auto& rows = groups.rows[b];
            if (rows.empty()) continue;
            bool deficient = false;
            Eigen::VectorXd wb = detail::weighted_lsq(fm, data, rows, nullptr, &deficient);
            if (deficient) ++deficient_blocks;
            if (loss == Loss::L1) wb = detail::lad_irls(fm, data, rows, wb);
            for (std::size_t j = 0; j < fm.block_width(); ++j)
                w[b * fm.block_width() + j] = wb(static_cast<Eigen::Index>(j));
        }
        out = Predictor::linear(fm, std::move(w));
        out.provenance().rank_deficient_blocks = deficient_blocks;
    }
    out.provenance().samples = data.size();
    out.provenance().loss = loss_name(loss);
    out.provenance().empirical_loss = empirical_loss(out, data, loss);
    return out;
}

namespace detail {

/// Ceiling that ignores round-off just above an integer.
inline std::size_t ceil_count(double x) {
    const double slack = 1e-9 * std::abs(x);
    const double c = std::ceil(x - slack);
    if (!(c < 9.0e18)) throw InvalidParameter("sample count overflows");
    return static_cast<std::size_t>(std::max(0.0, c));
}

inline void require_open_unit(double v, const char* name) {
    if (!(v > 0.0 && v < 1.0)) throw InvalidParameter(std::string(name) + " must lie in (0,1), got " + std::to_string(v));
}

}  // namespace detail

/**
Uniform-convergence sample size for a class of complexity d:
ceil(scale * (d ln(1/eps) + ln(1/delta)) / eps^2); the fat-shattering form
uses ln^2(1/eps). Under L2 the caller passes the squared-error target.
*/
inline std::size_t n_rewards(std::size_t d, ComplexityKind kind, double eps, double delta, double constant_scale) {
    if (!(eps > 0.0 && eps <= 1.0)) throw InvalidParameter("eps must lie in (0,1], got " + std::to_string(eps));
    detail::require_open_unit(delta, "delta");
    if (!(constant_scale > 0.0)) throw InvalidParameter("constant_scale must be positive");
    if (d < 1) throw InvalidParameter("complexity dimension must be at least 1");
    const double l = std::log(1.0 / eps);
    const double body = static_cast<double>(d) * (kind == ComplexityKind::FatShattering ? l * l : l) + std::log(1.0 / delta);
    return detail::ceil_count(constant_scale * body / (eps * eps));
}

inline std::size_t n_rewards(const FunctionClass& cls, double eps, double delta, double constant_scale) {
    if (!(eps > 0.0 && eps <= 1.0)) throw InvalidParameter("eps must lie in (0,1], got " + std::to_string(eps));
    return n_rewards(cls.dimension(eps), cls.complexity_kind(), eps, delta, constant_scale);
}

/// Samples per row for an L1 (unhalved) error of gamma over S_next outcomes.
inline std::size_t n_dynamics_tabular(double gamma, double delta, std::size_t s_next, double constant_scale = 1.0) {
    detail::require_open_unit(gamma, "gamma");
    detail::require_open_unit(delta, "delta");
    if (!(constant_scale > 0.0)) throw InvalidParameter("constant_scale must be positive");
    const double body = std::log(1.0 / delta) + static_cast<double>(s_next + 1) * std::log(2.0);
    return detail::ceil_count(constant_scale * 2.0 / (gamma * gamma) * body);
}

/// Episodes so that a state visited with probability p is hit m times with
/// probability at least 1 - delta.
inline std::size_t episodes_for_visits(double p, double delta, double m) {
    if (!(p > 0.0 && p <= 1.0)) throw InvalidParameter("visit probability must lie in (0,1]");
    if (!(delta > 0.0 && delta <= 1.0)) throw InvalidParameter("delta must lie in (0,1]");
    if (!(m >= 1.0)) throw InvalidParameter("required visits must be at least 1");
    return detail::ceil_count(2.0 / p * (std::log(1.0 / delta) + m));
}

/// E_x[loss(f(x), truth(x))] over a finite weighted support.
inline double generalization_error(const std::function<double(std::span<const double>)>& f,
                                   const std::function<double(std::span<const double>)>& truth,
                                   const std::vector<std::pair<std::vector<double>, double>>& dist, Loss loss) {
    double e = 0.0;
    for (const auto& [x, w] : dist) e += w * loss_value(loss, f(x), truth(x));
    return e;
}

/// One {"x":[...],"y":...} object per line.
inline void dump_dataset(const LabeledDataset& data, std::ostream& out) {
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto x = data.input(i);
        nlohmann::json j{{"x", std::vector<double>(x.begin(), x.end())}, {"y", data.label(i)}};
        out << j.dump() << '\n';
    }
}

inline LabeledDataset load_dataset(std::istream& in) {
    LabeledDataset data;
    bool first = true;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("bad dataset line: ") + e.what());
        }
        const auto x = j.at("x").get<std::vector<double>>();
        if (first) {
            data = LabeledDataset(x.size());
            first = false;
        }
        data.add(x, j.at("y").get<double>());
    }
    return data;
}

}  // namespace cmdp
