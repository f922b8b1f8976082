#pragma once

#include "dakit/linalg.hpp"

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string_view>
#include <vector>

namespace dakit::ad {

// Primitive operations a tape can hold. Arithmetic is elementwise with
// broadcasting of 1x1 operands; the linear-algebra primitives carry
// hand-written tangent and adjoint rules so a Cholesky solve or a
// log-determinant is one node rather than an unrolled scalar graph.
enum class Prim : std::uint8_t {
    input,
    constant,
    add,
    sub,
    mul,
    div,
    neg,
    sin,
    cos,
    exp,
    log,
    pow,
    sqrt,
    dot,
    matvec,
    matmul,
    cholesky_solve,
    logdet,
    // Structural primitives: they move entries around without arithmetic.
    transpose,
    sum,
    vcat,
    block,
    reshape,
};

std::string_view prim_name(Prim p) noexcept;

struct Node {
    Prim prim = Prim::constant;
    std::vector<int> parents;
    Matrix value;
    // pow exponent, or block/reshape geometry {row, col, rows, cols}.
    double exponent = 0.0;
    int geom[4] = {0, 0, 0, 0};
    // Lower Cholesky factor kept by cholesky_solve and logdet nodes.
    Matrix factor;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while its tape lives
// at the same address.
class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape() const noexcept { return tape_; }
    int id() const noexcept { return id_; }
    const Matrix& value() const;
    double scalar() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

struct SweepCounters {
    std::uint64_t forward_passes = 0;
    std::uint64_t forward_node_visits = 0;
    std::uint64_t reverse_passes = 0;
    std::uint64_t reverse_node_visits = 0;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) noexcept = default;
    Tape& operator=(Tape&&) noexcept = default;

    Var input(double x);
    Var constant(const Matrix& m);
    Var constant(double x);

    // Generic entry point by primitive name; unknown names are a
    // construction error. `exponent` and `geom` feed pow/block/reshape.
    Var apply(std::string_view name, const std::vector<Var>& args, double exponent = 0.0,
              std::initializer_list<int> geom = {});
    Var apply(Prim prim, const std::vector<Var>& args, double exponent = 0.0,
              std::initializer_list<int> geom = {});

    void set_outputs(const std::vector<Var>& outs);

    std::size_t size() const noexcept { return nodes_.size(); }
    std::size_t input_arity() const noexcept { return inputs_.size(); }
    std::size_t output_arity() const noexcept;
    const Node& node(std::size_t i) const { return nodes_.at(i); }
    const std::vector<int>& inputs() const noexcept { return inputs_; }
    const std::vector<int>& outputs() const noexcept { return outputs_; }

    // Re-evaluates every node with new input values and returns the
    // flattened (column-major) outputs.
    Vector replay(const Vector& x);
    Vector output_values() const;

    // Local Jacobian of node i with respect to its parent in slot `slot`,
    // as a (numel(node) x numel(parent)) matrix in column-major flattening.
    Matrix local_jacobian(std::size_t i, std::size_t slot) const;

    // Tangent of every node for one input direction.
    std::vector<Matrix> push_tangent(const Vector& direction) const;
    // Adjoint of every node for one output cotangent.
    std::vector<Matrix> pull_adjoint(const Vector& output_cotangent) const;

    SweepCounters& counters() const noexcept { return counters_; }

private:
    friend class Var;
    int push(Node n);
    void evaluate(Node& n) const;

    std::vector<Node> nodes_;
    std::vector<int> inputs_;
    std::vector<int> outputs_;
    mutable SweepCounters counters_;
};

using Program = std::function<std::vector<Var>(Tape&, const std::vector<Var>&)>;

// Records `f` at `x`: every entry of x becomes a scalar input node.
Tape record(const Program& f, const Vector& x);

// Jacobian (outputs x inputs) by one tangent sweep per input direction.
Matrix forward_jacobian(Tape& t, const Vector& x);
// Jacobian by one adjoint sweep per output component.
Matrix reverse_jacobian(Tape& t, const Vector& x);
// Gradient of a tape with a single scalar output.
Vector reverse_gradient(Tape& t, const Vector& x);

// Elementwise arithmetic (1x1 operands broadcast).
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator+(const Var& a, double b);
Var operator+(double a, const Var& b);
Var operator-(const Var& a, double b);
Var operator-(double a, const Var& b);
Var operator*(const Var& a, double b);
Var operator*(double a, const Var& b);
Var operator/(const Var& a, double b);
Var operator/(double a, const Var& b);

Var sin(const Var& a);
Var cos(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var pow(const Var& a, double p);
Var sqrt(const Var& a);

Var dot(const Var& a, const Var& b);
Var matvec(const Var& a, const Var& x);
Var matmul(const Var& a, const Var& b);
// sym(A)^{-1} B via Cholesky of the symmetric part of A.
Var cholesky_solve(const Var& a, const Var& b);
// log det sym(A) via Cholesky.
Var logdet(const Var& a);

Var transpose(const Var& a);
Var sum(const Var& a);
Var vcat(const std::vector<Var>& parts);
Var block(const Var& a, int row, int col, int rows, int cols);
Var element(const Var& a, int row, int col = 0);
Var reshape(const Var& a, int rows, int cols);

// Constant on the same tape as `like`.
Var constant_like(const Var& like, const Matrix& m);

// Forward-mode number: value plus directional derivatives along the seeded
// directions.
struct Dual {
    double value = 0.0;
    Vector tangent;

    Dual() = default;
    Dual(double v, Vector t) : value(v), tangent(std::move(t)) {}
    static Dual variable(double v, Eigen::Index index, Eigen::Index directions);
    static Dual constant(double v, Eigen::Index directions);
};

Dual operator+(const Dual& a, const Dual& b);
Dual operator-(const Dual& a, const Dual& b);
Dual operator*(const Dual& a, const Dual& b);
Dual operator/(const Dual& a, const Dual& b);
Dual operator-(const Dual& a);
Dual operator+(const Dual& a, double b);
Dual operator+(double a, const Dual& b);
Dual operator-(const Dual& a, double b);
Dual operator-(double a, const Dual& b);
Dual operator*(const Dual& a, double b);
Dual operator*(double a, const Dual& b);
Dual operator/(const Dual& a, double b);
Dual operator/(double a, const Dual& b);
Dual sin(const Dual& a);
Dual cos(const Dual& a);
Dual exp(const Dual& a);
Dual log(const Dual& a);
Dual pow(const Dual& a, double p);
Dual sqrt(const Dual& a);

}  // namespace dakit::ad
