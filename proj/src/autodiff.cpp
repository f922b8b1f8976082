#include "dakit/autodiff.hpp"

#include "dakit/error.hpp"

#include <array>
#include <cmath>
#include <sstream>
#include <utility>

namespace dakit::ad {

namespace {

struct PrimInfo {
    Prim prim;
    std::string_view name;
    int arity;  // -1: variadic
};

constexpr std::array<PrimInfo, 23> registry = {{
    {Prim::input, "input", 0},
    {Prim::constant, "constant", 0},
    {Prim::add, "add", 2},
    {Prim::sub, "sub", 2},
    {Prim::mul, "mul", 2},
    {Prim::div, "div", 2},
    {Prim::neg, "neg", 1},
    {Prim::sin, "sin", 1},
    {Prim::cos, "cos", 1},
    {Prim::exp, "exp", 1},
    {Prim::log, "log", 1},
    {Prim::pow, "pow", 1},
    {Prim::sqrt, "sqrt", 1},
    {Prim::dot, "dot", 2},
    {Prim::matvec, "matvec", 2},
    {Prim::matmul, "matmul", 2},
    {Prim::cholesky_solve, "cholesky_solve", 2},
    {Prim::logdet, "logdet", 1},
    {Prim::transpose, "transpose", 1},
    {Prim::sum, "sum", 1},
    {Prim::vcat, "vcat", -1},
    {Prim::block, "block", 1},
    {Prim::reshape, "reshape", 1},
}};

const PrimInfo& info(Prim p) {
    for (const auto& r : registry)
        if (r.prim == p) return r;
    fail(ErrorKind::construction, "unregistered primitive id");
}

bool is_scalar(const Matrix& m) { return m.rows() == 1 && m.cols() == 1; }

// Shape of an elementwise binary result, with 1x1 operands broadcasting.
std::pair<Eigen::Index, Eigen::Index> broadcast_shape(const Matrix& a, const Matrix& b) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return {a.rows(), a.cols()};
    if (is_scalar(a)) return {b.rows(), b.cols()};
    if (is_scalar(b)) return {a.rows(), a.cols()};
    std::ostringstream os;
    os << "elementwise shape mismatch: " << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x"
       << b.cols();
    fail(ErrorKind::construction, os.str());
}

Matrix expand(const Matrix& m, Eigen::Index r, Eigen::Index c) {
    if (m.rows() == r && m.cols() == c) return m;
    return Matrix::Constant(r, c, m(0, 0));
}

// Adjoint of broadcasting: sum back onto a 1x1 operand.
Matrix reduce_to(const Matrix& g, const Matrix& like) {
    if (g.rows() == like.rows() && g.cols() == like.cols()) return g;
    return Matrix::Constant(1, 1, g.sum());
}

void accumulate(Matrix& into, const Matrix& delta) {
    if (into.size() == 0)
        into = delta;
    else
        into += delta;
}

Matrix vec(const Matrix& m) { return m.reshaped(m.size(), 1); }

}  // namespace

std::string_view prim_name(Prim p) noexcept {
    for (const auto& r : registry)
        if (r.prim == p) return r.name;
    return "unknown";
}

const Matrix& Var::value() const {
    require(tape_ != nullptr && id_ >= 0, ErrorKind::construction, "use of an unbound variable");
    return tape_->nodes_[static_cast<std::size_t>(id_)].value;
}

double Var::scalar() const {
    const Matrix& v = value();
    require(is_scalar(v), ErrorKind::argument, "scalar() on a non-scalar node");
    return v(0, 0);
}

int Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size() - 1);
}

Var Tape::input(double x) {
    Node n;
    n.prim = Prim::input;
    n.value = Matrix::Constant(1, 1, x);
    const int id = push(std::move(n));
    inputs_.push_back(id);
    return Var(this, id);
}

Var Tape::constant(const Matrix& m) {
    Node n;
    n.prim = Prim::constant;
    n.value = m;
    return Var(this, push(std::move(n)));
}

Var Tape::constant(double x) { return constant(Matrix::Constant(1, 1, x)); }

Var Tape::apply(std::string_view name, const std::vector<Var>& args, double exponent,
                std::initializer_list<int> geom) {
    for (const auto& r : registry) {
        if (r.name == name && r.prim != Prim::input && r.prim != Prim::constant)
            return apply(r.prim, args, exponent, geom);
    }
    fail(ErrorKind::construction, "unregistered primitive '" + std::string(name) + "'");
}

Var Tape::apply(Prim prim, const std::vector<Var>& args, double exponent,
                std::initializer_list<int> geom) {
    const PrimInfo& pi = info(prim);
    require(prim != Prim::input && prim != Prim::constant, ErrorKind::construction,
            "inputs and constants are created with input()/constant()");
    if (pi.arity >= 0)
        require(static_cast<int>(args.size()) == pi.arity, ErrorKind::construction,
                "wrong number of operands for " + std::string(pi.name));
    else
        require(!args.empty(), ErrorKind::construction, "vcat needs at least one operand");
    Node n;
    n.prim = prim;
    n.exponent = exponent;
    int k = 0;
    for (int g : geom) {
        if (k < 4) n.geom[k++] = g;
    }
    for (const Var& a : args) {
        require(a.tape() == this, ErrorKind::construction, "operand belongs to another tape");
        n.parents.push_back(a.id());
    }
    evaluate(n);
    return Var(this, push(std::move(n)));
}

void Tape::set_outputs(const std::vector<Var>& outs) {
    outputs_.clear();
    for (const Var& v : outs) {
        require(v.tape() == this, ErrorKind::construction, "output belongs to another tape");
        outputs_.push_back(v.id());
    }
}

std::size_t Tape::output_arity() const noexcept {
    std::size_t n = 0;
    for (int o : outputs_) n += static_cast<std::size_t>(nodes_[static_cast<std::size_t>(o)].value.size());
    return n;
}

void Tape::evaluate(Node& n) const {
    auto in = [&](std::size_t k) -> const Matrix& {
        return nodes_[static_cast<std::size_t>(n.parents[k])].value;
    };
    auto domain = [&](bool ok, const char* what) {
        if (!ok) fail(ErrorKind::evaluation, std::string("domain violation in ") + what);
    };
    switch (n.prim) {
        case Prim::input:
        case Prim::constant:
            return;
        case Prim::add: {
            auto [r, c] = broadcast_shape(in(0), in(1));
            n.value = expand(in(0), r, c) + expand(in(1), r, c);
            return;
        }
        case Prim::sub: {
            auto [r, c] = broadcast_shape(in(0), in(1));
            n.value = expand(in(0), r, c) - expand(in(1), r, c);
            return;
        }
        case Prim::mul: {
            auto [r, c] = broadcast_shape(in(0), in(1));
            n.value = expand(in(0), r, c).cwiseProduct(expand(in(1), r, c));
            return;
        }
        case Prim::div: {
            auto [r, c] = broadcast_shape(in(0), in(1));
            domain((in(1).array() != 0.0).all(), "div (zero divisor)");
            n.value = expand(in(0), r, c).cwiseQuotient(expand(in(1), r, c));
            return;
        }
        case Prim::neg:
            n.value = -in(0);
            return;
        case Prim::sin:
            n.value = in(0).array().sin().matrix();
            return;
        case Prim::cos:
            n.value = in(0).array().cos().matrix();
            return;
        case Prim::exp:
            n.value = in(0).array().exp().matrix();
            return;
        case Prim::log:
            domain((in(0).array() > 0.0).all(), "log (non-positive argument)");
            n.value = in(0).array().log().matrix();
            return;
        case Prim::pow: {
            const bool integral = std::floor(n.exponent) == n.exponent;
            domain(integral || (in(0).array() >= 0.0).all(), "pow (negative base, fractional exponent)");
            n.value = in(0).unaryExpr([p = n.exponent](double v) { return std::pow(v, p); });
            return;
        }
        case Prim::sqrt:
            domain((in(0).array() >= 0.0).all(), "sqrt (negative argument)");
            n.value = in(0).array().sqrt().matrix();
            return;
        case Prim::dot:
            require(in(0).cols() == 1 && in(1).cols() == 1 && in(0).rows() == in(1).rows(),
                    ErrorKind::construction, "dot needs equal-length column vectors");
            n.value = Matrix::Constant(1, 1, in(0).col(0).dot(in(1).col(0)));
            return;
        case Prim::matvec:
            require(in(1).cols() == 1 && in(0).cols() == in(1).rows(), ErrorKind::construction,
                    "matvec shape mismatch");
            n.value = in(0) * in(1);
            return;
        case Prim::matmul:
            require(in(0).cols() == in(1).rows(), ErrorKind::construction, "matmul shape mismatch");
            n.value = in(0) * in(1);
            return;
        case Prim::cholesky_solve: {
            require(in(0).rows() == in(0).cols() && in(0).rows() == in(1).rows(), ErrorKind::construction,
                    "cholesky_solve shape mismatch");
            Eigen::LLT<Matrix> llt(symmetrize(in(0)));
            domain(llt.info() == Eigen::Success, "cholesky_solve (matrix not positive definite)");
            n.factor = llt.matrixL();
            n.value = llt.solve(in(1));
            return;
        }
        case Prim::logdet: {
            require(in(0).rows() == in(0).cols(), ErrorKind::construction, "logdet of non-square matrix");
            Eigen::LLT<Matrix> llt(symmetrize(in(0)));
            domain(llt.info() == Eigen::Success, "logdet (matrix not positive definite)");
            n.factor = llt.matrixL();
            n.value = Matrix::Constant(1, 1, 2.0 * n.factor.diagonal().array().log().sum());
            return;
        }
        case Prim::transpose:
            n.value = in(0).transpose();
            return;
        case Prim::sum:
            n.value = Matrix::Constant(1, 1, in(0).sum());
            return;
        case Prim::vcat: {
            Eigen::Index rows = 0;
            const Eigen::Index cols = in(0).cols();
            for (std::size_t k = 0; k < n.parents.size(); ++k) {
                require(in(k).cols() == cols, ErrorKind::construction, "vcat column mismatch");
                rows += in(k).rows();
            }
            n.value.resize(rows, cols);
            Eigen::Index at = 0;
            for (std::size_t k = 0; k < n.parents.size(); ++k) {
                n.value.middleRows(at, in(k).rows()) = in(k);
                at += in(k).rows();
            }
            return;
        }
        case Prim::block: {
            const auto [r0, c0, h, w] = n.geom;
            require(r0 >= 0 && c0 >= 0 && h >= 0 && w >= 0 && r0 + h <= in(0).rows() && c0 + w <= in(0).cols(),
                    ErrorKind::construction, "block out of range");
            n.value = in(0).block(r0, c0, h, w);
            return;
        }
        case Prim::reshape:
            require(static_cast<Eigen::Index>(n.geom[0]) * n.geom[1] == in(0).size(), ErrorKind::construction,
                    "reshape size mismatch");
            n.value = in(0).reshaped(n.geom[0], n.geom[1]);
            return;
    }
}

namespace {

// Tangent of node n given its parents' tangents.
Matrix tangent_rule(const Node& n, const std::vector<Node>& nodes, const std::vector<Matrix>& tan) {
    auto val = [&](std::size_t k) -> const Matrix& { return nodes[static_cast<std::size_t>(n.parents[k])].value; };
    auto t = [&](std::size_t k) -> const Matrix& { return tan[static_cast<std::size_t>(n.parents[k])]; };
    const Eigen::Index r = n.value.rows(), c = n.value.cols();
    switch (n.prim) {
        case Prim::input:
        case Prim::constant:
            return Matrix::Zero(r, c);
        case Prim::add:
            return expand(t(0), r, c) + expand(t(1), r, c);
        case Prim::sub:
            return expand(t(0), r, c) - expand(t(1), r, c);
        case Prim::mul:
            return expand(t(0), r, c).cwiseProduct(expand(val(1), r, c)) +
                   expand(val(0), r, c).cwiseProduct(expand(t(1), r, c));
        case Prim::div: {
            const Matrix b = expand(val(1), r, c);
            return expand(t(0), r, c).cwiseQuotient(b) -
                   n.value.cwiseProduct(expand(t(1), r, c)).cwiseQuotient(b);
        }
        case Prim::neg:
            return -t(0);
        case Prim::sin:
            return val(0).array().cos().matrix().cwiseProduct(t(0));
        case Prim::cos:
            return -val(0).array().sin().matrix().cwiseProduct(t(0));
        case Prim::exp:
            return n.value.cwiseProduct(t(0));
        case Prim::log:
            return t(0).cwiseQuotient(val(0));
        case Prim::pow: {
            const double p = n.exponent;
            const Matrix d = val(0).unaryExpr([p](double v) { return p * std::pow(v, p - 1.0); });
            return d.cwiseProduct(t(0));
        }
        case Prim::sqrt:
            return (0.5 * t(0).array() / n.value.array()).matrix();
        case Prim::dot:
            return Matrix::Constant(1, 1, t(0).col(0).dot(val(1).col(0)) + val(0).col(0).dot(t(1).col(0)));
        case Prim::matvec:
        case Prim::matmul:
            return t(0) * val(1) + val(0) * t(1);
        case Prim::cholesky_solve: {
            // X = S^{-1} B  =>  dX = S^{-1} (dB - sym(dA) X)
            const Matrix rhs = t(1) - symmetrize(t(0)) * n.value;
            const auto l = n.factor.triangularView<Eigen::Lower>();
            return l.transpose().solve(l.solve(rhs));
        }
        case Prim::logdet: {
            const auto l = n.factor.triangularView<Eigen::Lower>();
            const Matrix sinv_dA = l.transpose().solve(l.solve(t(0)));
            return Matrix::Constant(1, 1, sinv_dA.trace());
        }
        case Prim::transpose:
            return t(0).transpose();
        case Prim::sum:
            return Matrix::Constant(1, 1, t(0).sum());
        case Prim::vcat: {
            Matrix out(r, c);
            Eigen::Index at = 0;
            for (std::size_t k = 0; k < n.parents.size(); ++k) {
                out.middleRows(at, t(k).rows()) = t(k);
                at += t(k).rows();
            }
            return out;
        }
        case Prim::block:
            return t(0).block(n.geom[0], n.geom[1], n.geom[2], n.geom[3]);
        case Prim::reshape:
            return t(0).reshaped(n.geom[0], n.geom[1]);
    }
    return Matrix::Zero(r, c);
}

// Accumulates the adjoint contribution of node n (with adjoint g) onto its parents.
void adjoint_rule(const Node& n, const Matrix& g, const std::vector<Node>& nodes, std::vector<Matrix>& adj) {
    auto val = [&](std::size_t k) -> const Matrix& { return nodes[static_cast<std::size_t>(n.parents[k])].value; };
    auto add_to = [&](std::size_t k, const Matrix& delta) {
        accumulate(adj[static_cast<std::size_t>(n.parents[k])], delta);
    };
    const Eigen::Index r = n.value.rows(), c = n.value.cols();
    switch (n.prim) {
        case Prim::input:
        case Prim::constant:
            return;
        case Prim::add:
            add_to(0, reduce_to(g, val(0)));
            add_to(1, reduce_to(g, val(1)));
            return;
        case Prim::sub:
            add_to(0, reduce_to(g, val(0)));
            add_to(1, reduce_to(-g, val(1)));
            return;
        case Prim::mul:
            add_to(0, reduce_to(g.cwiseProduct(expand(val(1), r, c)), val(0)));
            add_to(1, reduce_to(g.cwiseProduct(expand(val(0), r, c)), val(1)));
            return;
        case Prim::div: {
            const Matrix b = expand(val(1), r, c);
            add_to(0, reduce_to(g.cwiseQuotient(b), val(0)));
            add_to(1, reduce_to(-g.cwiseProduct(n.value).cwiseQuotient(b), val(1)));
            return;
        }
        case Prim::neg:
            add_to(0, -g);
            return;
        case Prim::sin:
            add_to(0, g.cwiseProduct(val(0).array().cos().matrix()));
            return;
        case Prim::cos:
            add_to(0, -g.cwiseProduct(val(0).array().sin().matrix()));
            return;
        case Prim::exp:
            add_to(0, g.cwiseProduct(n.value));
            return;
        case Prim::log:
            add_to(0, g.cwiseQuotient(val(0)));
            return;
        case Prim::pow: {
            const double p = n.exponent;
            add_to(0, g.cwiseProduct(val(0).unaryExpr([p](double v) { return p * std::pow(v, p - 1.0); })));
            return;
        }
        case Prim::sqrt:
            add_to(0, (0.5 * g.array() / n.value.array()).matrix());
            return;
        case Prim::dot:
            add_to(0, g(0, 0) * val(1));
            add_to(1, g(0, 0) * val(0));
            return;
        case Prim::matvec:
        case Prim::matmul:
            add_to(0, g * val(1).transpose());
            add_to(1, val(0).transpose() * g);
            return;
        case Prim::cholesky_solve: {
            const auto l = n.factor.triangularView<Eigen::Lower>();
            const Matrix gb = l.transpose().solve(l.solve(g));
            add_to(1, gb);
            add_to(0, -symmetrize(gb * n.value.transpose()));
            return;
        }
        case Prim::logdet: {
            const auto l = n.factor.triangularView<Eigen::Lower>();
            const Eigen::Index d = n.factor.rows();
            add_to(0, g(0, 0) * l.transpose().solve(l.solve(Matrix::Identity(d, d))));
            return;
        }
        case Prim::transpose:
            add_to(0, g.transpose());
            return;
        case Prim::sum:
            add_to(0, Matrix::Constant(val(0).rows(), val(0).cols(), g(0, 0)));
            return;
        case Prim::vcat: {
            Eigen::Index at = 0;
            for (std::size_t k = 0; k < n.parents.size(); ++k) {
                add_to(k, g.middleRows(at, val(k).rows()));
                at += val(k).rows();
            }
            return;
        }
        case Prim::block: {
            Matrix full = Matrix::Zero(val(0).rows(), val(0).cols());
            full.block(n.geom[0], n.geom[1], n.geom[2], n.geom[3]) = g;
            add_to(0, full);
            return;
        }
        case Prim::reshape:
            add_to(0, g.reshaped(val(0).rows(), val(0).cols()));
            return;
    }
}

}  // namespace

Vector Tape::replay(const Vector& x) {
    require(static_cast<std::size_t>(x.size()) == inputs_.size(), ErrorKind::argument,
            "replay: input length does not match tape input arity");
    for (std::size_t k = 0; k < inputs_.size(); ++k)
        nodes_[static_cast<std::size_t>(inputs_[k])].value(0, 0) = x(static_cast<Eigen::Index>(k));
    for (Node& n : nodes_) evaluate(n);
    return output_values();
}

Vector Tape::output_values() const {
    Vector out(static_cast<Eigen::Index>(output_arity()));
    Eigen::Index at = 0;
    for (int o : outputs_) {
        const Matrix& v = nodes_[static_cast<std::size_t>(o)].value;
        out.segment(at, v.size()) = vec(v);
        at += v.size();
    }
    return out;
}

std::vector<Matrix> Tape::push_tangent(const Vector& direction) const {
    require(static_cast<std::size_t>(direction.size()) == inputs_.size(), ErrorKind::argument,
            "tangent direction length does not match input arity");
    std::vector<Matrix> tan(nodes_.size());
    std::size_t next_input = 0;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        if (n.prim == Prim::input) {
            // Inputs are recorded in order, so the k-th input node met here is input k.
            tan[i] = Matrix::Constant(1, 1, direction(static_cast<Eigen::Index>(next_input++)));
        } else {
            tan[i] = tangent_rule(n, nodes_, tan);
        }
    }
    counters_.forward_passes += 1;
    counters_.forward_node_visits += nodes_.size();
    return tan;
}

std::vector<Matrix> Tape::pull_adjoint(const Vector& output_cotangent) const {
    require(static_cast<std::size_t>(output_cotangent.size()) == output_arity(), ErrorKind::argument,
            "cotangent length does not match output arity");
    std::vector<Matrix> adj(nodes_.size());
    Eigen::Index at = 0;
    for (int o : outputs_) {
        const Matrix& v = nodes_[static_cast<std::size_t>(o)].value;
        accumulate(adj[static_cast<std::size_t>(o)], output_cotangent.segment(at, v.size()).reshaped(v.rows(), v.cols()));
        at += v.size();
    }
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (adj[i].size() == 0) continue;
        adjoint_rule(nodes_[i], adj[i], nodes_, adj);
    }
    counters_.reverse_passes += 1;
    counters_.reverse_node_visits += nodes_.size();
    return adj;
}

Matrix Tape::local_jacobian(std::size_t i, std::size_t slot) const {
    const Node& n = nodes_.at(i);
    require(slot < n.parents.size(), ErrorKind::argument, "parent slot out of range");
    const Matrix& pv = nodes_[static_cast<std::size_t>(n.parents[slot])].value;
    Matrix jac(n.value.size(), pv.size());
    std::vector<Matrix> tan(nodes_.size());
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
        const Matrix& v = nodes_[static_cast<std::size_t>(n.parents[k])].value;
        tan[static_cast<std::size_t>(n.parents[k])] = Matrix::Zero(v.rows(), v.cols());
    }
    for (Eigen::Index e = 0; e < pv.size(); ++e) {
        Matrix unit = Matrix::Zero(pv.rows(), pv.cols());
        unit.reshaped()(e) = 1.0;
        tan[static_cast<std::size_t>(n.parents[slot])] = unit;
        jac.col(e) = vec(tangent_rule(n, nodes_, tan));
    }
    return jac;
}

Tape record(const Program& f, const Vector& x) {
    Tape t;
    std::vector<Var> in;
    in.reserve(static_cast<std::size_t>(x.size()));
    for (Eigen::Index i = 0; i < x.size(); ++i) in.push_back(t.input(x(i)));
    t.set_outputs(f(t, in));
    return t;
}

Matrix forward_jacobian(Tape& t, const Vector& x) {
    t.replay(x);
    const auto n_in = static_cast<Eigen::Index>(t.input_arity());
    Matrix jac(static_cast<Eigen::Index>(t.output_arity()), n_in);
    for (Eigen::Index i = 0; i < n_in; ++i) {
        const std::vector<Matrix> tan = t.push_tangent(Vector::Unit(n_in, i));
        Eigen::Index at = 0;
        for (int o : t.outputs()) {
            const Matrix& to = tan[static_cast<std::size_t>(o)];
            jac.col(i).segment(at, to.size()) = vec(to);
            at += to.size();
        }
    }
    return jac;
}

Matrix reverse_jacobian(Tape& t, const Vector& x) {
    t.replay(x);
    const auto n_out = static_cast<Eigen::Index>(t.output_arity());
    Matrix jac(n_out, static_cast<Eigen::Index>(t.input_arity()));
    for (Eigen::Index r = 0; r < n_out; ++r) {
        const std::vector<Matrix> adj = t.pull_adjoint(Vector::Unit(n_out, r));
        for (std::size_t k = 0; k < t.inputs().size(); ++k) {
            const Matrix& a = adj[static_cast<std::size_t>(t.inputs()[k])];
            jac(r, static_cast<Eigen::Index>(k)) = a.size() == 0 ? 0.0 : a(0, 0);
        }
    }
    return jac;
}

Vector reverse_gradient(Tape& t, const Vector& x) {
    require(t.output_arity() == 1, ErrorKind::argument, "reverse_gradient needs a scalar output");
    return reverse_jacobian(t, x).row(0).transpose();
}

// ---------------------------------------------------------------------------
// Operator sugar

namespace {
Tape& tape_of(const Var& a) {
    require(a.tape() != nullptr, ErrorKind::construction, "use of an unbound variable");
    return *a.tape();
}
}  // namespace

Var constant_like(const Var& like, const Matrix& m) { return tape_of(like).constant(m); }

Var operator+(const Var& a, const Var& b) { return tape_of(a).apply(Prim::add, {a, b}); }
Var operator-(const Var& a, const Var& b) { return tape_of(a).apply(Prim::sub, {a, b}); }
Var operator*(const Var& a, const Var& b) { return tape_of(a).apply(Prim::mul, {a, b}); }
Var operator/(const Var& a, const Var& b) { return tape_of(a).apply(Prim::div, {a, b}); }
Var operator-(const Var& a) { return tape_of(a).apply(Prim::neg, {a}); }
Var operator+(const Var& a, double b) { return a + tape_of(a).constant(b); }
Var operator+(double a, const Var& b) { return tape_of(b).constant(a) + b; }
Var operator-(const Var& a, double b) { return a - tape_of(a).constant(b); }
Var operator-(double a, const Var& b) { return tape_of(b).constant(a) - b; }
Var operator*(const Var& a, double b) { return a * tape_of(a).constant(b); }
Var operator*(double a, const Var& b) { return tape_of(b).constant(a) * b; }
Var operator/(const Var& a, double b) { return a / tape_of(a).constant(b); }
Var operator/(double a, const Var& b) { return tape_of(b).constant(a) / b; }

Var sin(const Var& a) { return tape_of(a).apply(Prim::sin, {a}); }
Var cos(const Var& a) { return tape_of(a).apply(Prim::cos, {a}); }
Var exp(const Var& a) { return tape_of(a).apply(Prim::exp, {a}); }
Var log(const Var& a) { return tape_of(a).apply(Prim::log, {a}); }
Var pow(const Var& a, double p) { return tape_of(a).apply(Prim::pow, {a}, p); }
Var sqrt(const Var& a) { return tape_of(a).apply(Prim::sqrt, {a}); }
Var dot(const Var& a, const Var& b) { return tape_of(a).apply(Prim::dot, {a, b}); }
Var matvec(const Var& a, const Var& x) { return tape_of(a).apply(Prim::matvec, {a, x}); }
Var matmul(const Var& a, const Var& b) { return tape_of(a).apply(Prim::matmul, {a, b}); }
Var cholesky_solve(const Var& a, const Var& b) { return tape_of(a).apply(Prim::cholesky_solve, {a, b}); }
Var logdet(const Var& a) { return tape_of(a).apply(Prim::logdet, {a}); }
Var transpose(const Var& a) { return tape_of(a).apply(Prim::transpose, {a}); }
Var sum(const Var& a) { return tape_of(a).apply(Prim::sum, {a}); }
Var vcat(const std::vector<Var>& parts) {
    require(!parts.empty(), ErrorKind::construction, "vcat needs at least one operand");
    return tape_of(parts.front()).apply(Prim::vcat, parts);
}
Var block(const Var& a, int row, int col, int rows, int cols) {
    return tape_of(a).apply(Prim::block, {a}, 0.0, {row, col, rows, cols});
}
Var element(const Var& a, int row, int col) { return block(a, row, col, 1, 1); }
Var reshape(const Var& a, int rows, int cols) { return tape_of(a).apply(Prim::reshape, {a}, 0.0, {rows, cols}); }

// ---------------------------------------------------------------------------
// Dual numbers

Dual Dual::variable(double v, Eigen::Index index, Eigen::Index directions) {
    return Dual(v, Vector::Unit(directions, index));
}

Dual Dual::constant(double v, Eigen::Index directions) { return Dual(v, Vector::Zero(directions)); }

namespace {
Dual lift(double v, const Dual& like) { return Dual::constant(v, like.tangent.size()); }
}  // namespace

Dual operator+(const Dual& a, const Dual& b) { return Dual(a.value + b.value, a.tangent + b.tangent); }
Dual operator-(const Dual& a, const Dual& b) { return Dual(a.value - b.value, a.tangent - b.tangent); }
Dual operator*(const Dual& a, const Dual& b) {
    return Dual(a.value * b.value, b.value * a.tangent + a.value * b.tangent);
}
Dual operator/(const Dual& a, const Dual& b) {
    require(b.value != 0.0, ErrorKind::evaluation, "domain violation in div (zero divisor)");
    const double q = a.value / b.value;
    return Dual(q, (a.tangent - q * b.tangent) / b.value);
}
Dual operator-(const Dual& a) { return Dual(-a.value, -a.tangent); }
Dual operator+(const Dual& a, double b) { return a + lift(b, a); }
Dual operator+(double a, const Dual& b) { return lift(a, b) + b; }
Dual operator-(const Dual& a, double b) { return a - lift(b, a); }
Dual operator-(double a, const Dual& b) { return lift(a, b) - b; }
Dual operator*(const Dual& a, double b) { return Dual(a.value * b, a.tangent * b); }
Dual operator*(double a, const Dual& b) { return Dual(a * b.value, a * b.tangent); }
Dual operator/(const Dual& a, double b) { return a / lift(b, a); }
Dual operator/(double a, const Dual& b) { return lift(a, b) / b; }
Dual sin(const Dual& a) { return Dual(std::sin(a.value), std::cos(a.value) * a.tangent); }
Dual cos(const Dual& a) { return Dual(std::cos(a.value), -std::sin(a.value) * a.tangent); }
Dual exp(const Dual& a) {
    const double e = std::exp(a.value);
    return Dual(e, e * a.tangent);
}
Dual log(const Dual& a) {
    require(a.value > 0.0, ErrorKind::evaluation, "domain violation in log (non-positive argument)");
    return Dual(std::log(a.value), a.tangent / a.value);
}
Dual pow(const Dual& a, double p) {
    require(std::floor(p) == p || a.value >= 0.0, ErrorKind::evaluation,
            "domain violation in pow (negative base, fractional exponent)");
    return Dual(std::pow(a.value, p), p * std::pow(a.value, p - 1.0) * a.tangent);
}
Dual sqrt(const Dual& a) {
    require(a.value >= 0.0, ErrorKind::evaluation, "domain violation in sqrt (negative argument)");
    const double s = std::sqrt(a.value);
    return Dual(s, a.tangent / (2.0 * s));
}

}  // namespace dakit::ad
