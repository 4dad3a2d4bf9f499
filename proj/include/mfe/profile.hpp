#pragma once

// Slow-time coefficient profiles c(tau), a(tau): a tiny expression language
// with exact symbolic derivatives.

#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "mfe/error.hpp"

namespace mfe {

namespace expr {

enum class Kind { Const, Var, Add, Sub, Mul, Div, Neg, Pow, Sin, Cos, Exp, Tanh };

struct Node;
using Ptr = std::shared_ptr<const Node>;

struct Node {
    Kind kind;
    double value = 0.0;  // Const
    int exponent = 0;    // Pow
    Ptr a, b;
};

inline Ptr make(Kind k, Ptr a = nullptr, Ptr b = nullptr, double v = 0.0, int n = 0) {
    return std::make_shared<const Node>(Node{k, v, n, std::move(a), std::move(b)});
}
inline Ptr constant(double v) { return make(Kind::Const, nullptr, nullptr, v); }
inline Ptr variable() { return make(Kind::Var); }

inline bool is_const(const Ptr& p, double v) { return p->kind == Kind::Const && p->value == v; }
inline bool is_const(const Ptr& p) { return p->kind == Kind::Const; }

// The builders fold constants and drop neutral elements so that repeated
// differentiation does not blow up the tree.
inline Ptr neg(Ptr a) {
    if (is_const(a)) return constant(-a->value);
    if (a->kind == Kind::Neg) return a->a;
    return make(Kind::Neg, std::move(a));
}
inline Ptr add(Ptr a, Ptr b) {
    if (is_const(a) && is_const(b)) return constant(a->value + b->value);
    if (is_const(a, 0.0)) return b;
    if (is_const(b, 0.0)) return a;
    if (b->kind == Kind::Neg) return make(Kind::Sub, std::move(a), b->a);
    return make(Kind::Add, std::move(a), std::move(b));
}
inline Ptr sub(Ptr a, Ptr b) {
    if (is_const(a) && is_const(b)) return constant(a->value - b->value);
    if (is_const(b, 0.0)) return a;
    if (is_const(a, 0.0)) return neg(std::move(b));
    if (b->kind == Kind::Neg) return make(Kind::Add, std::move(a), b->a);
    return make(Kind::Sub, std::move(a), std::move(b));
}
inline Ptr mul(Ptr a, Ptr b) {
    if (is_const(a) && is_const(b)) return constant(a->value * b->value);
    if (is_const(a, 0.0) || is_const(b, 0.0)) return constant(0.0);
    if (is_const(a, 1.0)) return b;
    if (is_const(b, 1.0)) return a;
    if (is_const(a, -1.0)) return neg(std::move(b));
    if (is_const(b, -1.0)) return neg(std::move(a));
    if (is_const(b)) std::swap(a, b);
    if (is_const(a) && b->kind == Kind::Mul && is_const(b->a))
        return mul(constant(a->value * b->a->value), b->b);
    if (is_const(a) && b->kind == Kind::Neg) return mul(constant(-a->value), b->a);
    return make(Kind::Mul, std::move(a), std::move(b));
}
inline Ptr div(Ptr a, Ptr b) {
    if (is_const(a) && is_const(b)) return constant(a->value / b->value);
    if (is_const(a, 0.0)) return constant(0.0);
    if (is_const(b, 1.0)) return a;
    return make(Kind::Div, std::move(a), std::move(b));
}
inline Ptr pow(Ptr a, int n) {
    if (n == 0) return constant(1.0);
    if (n == 1) return a;
    if (is_const(a)) return constant(std::pow(a->value, n));
    if (a->kind == Kind::Pow) return pow(a->a, a->exponent * n);
    return make(Kind::Pow, std::move(a), nullptr, 0.0, n);
}
inline Ptr func(Kind k, Ptr a) {
    if (is_const(a)) {
        double x = a->value;
        switch (k) {
            case Kind::Sin: return constant(std::sin(x));
            case Kind::Cos: return constant(std::cos(x));
            case Kind::Exp: return constant(std::exp(x));
            case Kind::Tanh: return constant(std::tanh(x));
            default: break;
        }
    }
    return make(k, std::move(a));
}

inline Ptr derivative(const Ptr& p) {
    switch (p->kind) {
        case Kind::Const: return constant(0.0);
        case Kind::Var: return constant(1.0);
        case Kind::Add: return add(derivative(p->a), derivative(p->b));
        case Kind::Sub: return sub(derivative(p->a), derivative(p->b));
        case Kind::Mul:
            return add(mul(derivative(p->a), p->b), mul(p->a, derivative(p->b)));
        case Kind::Div:
            return div(sub(mul(derivative(p->a), p->b), mul(p->a, derivative(p->b))),
                       pow(p->b, 2));
        case Kind::Neg: return neg(derivative(p->a));
        case Kind::Pow:
            return mul(mul(constant(p->exponent), pow(p->a, p->exponent - 1)), derivative(p->a));
        case Kind::Sin: return mul(func(Kind::Cos, p->a), derivative(p->a));
        case Kind::Cos: return neg(mul(func(Kind::Sin, p->a), derivative(p->a)));
        case Kind::Exp: return mul(p, derivative(p->a));
        case Kind::Tanh:
            return mul(sub(constant(1.0), pow(p, 2)), derivative(p->a));
    }
    return constant(0.0);
}

inline double evaluate(const Node& n, double tau) {
    switch (n.kind) {
        case Kind::Const: return n.value;
        case Kind::Var: return tau;
        case Kind::Add: return evaluate(*n.a, tau) + evaluate(*n.b, tau);
        case Kind::Sub: return evaluate(*n.a, tau) - evaluate(*n.b, tau);
        case Kind::Mul: return evaluate(*n.a, tau) * evaluate(*n.b, tau);
        case Kind::Div: return evaluate(*n.a, tau) / evaluate(*n.b, tau);
        case Kind::Neg: return -evaluate(*n.a, tau);
        case Kind::Pow: return std::pow(evaluate(*n.a, tau), n.exponent);
        case Kind::Sin: return std::sin(evaluate(*n.a, tau));
        case Kind::Cos: return std::cos(evaluate(*n.a, tau));
        case Kind::Exp: return std::exp(evaluate(*n.a, tau));
        case Kind::Tanh: return std::tanh(evaluate(*n.a, tau));
    }
    return 0.0;
}

// Fully parenthesised; constants printed with round-trip precision.
inline std::string to_string(const Node& n) {
    auto bin = [](const Node& x, const char* op) {
        return "(" + to_string(*x.a) + " " + op + " " + to_string(*x.b) + ")";
    };
    switch (n.kind) {
        case Kind::Const: {
            char buf[40];
            std::snprintf(buf, sizeof buf, "%.17g", n.value);
            return n.value < 0 ? "(" + std::string(buf) + ")" : std::string(buf);
        }
        case Kind::Var: return "tau";
        case Kind::Add: return bin(n, "+");
        case Kind::Sub: return bin(n, "-");
        case Kind::Mul: return bin(n, "*");
        case Kind::Div: return bin(n, "/");
        case Kind::Neg: return "(-" + to_string(*n.a) + ")";
        case Kind::Pow: return "(" + to_string(*n.a) + ")^(" + std::to_string(n.exponent) + ")";
        case Kind::Sin: return "sin(" + to_string(*n.a) + ")";
        case Kind::Cos: return "cos(" + to_string(*n.a) + ")";
        case Kind::Exp: return "exp(" + to_string(*n.a) + ")";
        case Kind::Tanh: return "tanh(" + to_string(*n.a) + ")";
    }
    return {};
}

class Parser {
public:
    explicit Parser(std::string_view text) : s_(text) {}

    Ptr parse() {
        Ptr e = parse_sum();
        skip();
        if (pos_ != s_.size()) throw ParseError(pos_, "unexpected character '" + std::string(1, s_[pos_]) + "'");
        return e;
    }

private:
    std::string_view s_;
    std::size_t pos_ = 0;

    void skip() {
        while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    }
    bool accept(char c) {
        skip();
        if (pos_ < s_.size() && s_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }
    void expect(char c) {
        if (!accept(c)) throw ParseError(pos_, std::string("expected '") + c + "'");
    }

    Ptr parse_sum() {
        Ptr lhs = parse_product();
        for (;;) {
            if (accept('+')) lhs = make(Kind::Add, lhs, parse_product());
            else if (accept('-')) lhs = make(Kind::Sub, lhs, parse_product());
            else return lhs;
        }
    }
    Ptr parse_product() {
        Ptr lhs = parse_unary();
        for (;;) {
            if (accept('*')) lhs = make(Kind::Mul, lhs, parse_unary());
            else if (accept('/')) lhs = make(Kind::Div, lhs, parse_unary());
            else return lhs;
        }
    }
    Ptr parse_unary() {
        if (accept('-')) return make(Kind::Neg, parse_unary());
        if (accept('+')) return parse_unary();
        return parse_power();
    }
    Ptr parse_power() {
        Ptr base = parse_primary();
        if (!accept('^')) return base;
        int n = 0;
        if (accept('(')) {
            n = parse_int();
            expect(')');
        } else {
            n = parse_int();
        }
        return make(Kind::Pow, base, nullptr, 0.0, n);
    }
    int parse_int() {
        skip();
        bool negative = accept('-');
        skip();
        std::size_t start = pos_;
        while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) ++pos_;
        if (start == pos_) throw ParseError(pos_, "exponent must be an integer");
        if (pos_ < s_.size() && (s_[pos_] == '.' || s_[pos_] == 'e' || s_[pos_] == 'E'))
            throw ParseError(pos_, "exponent must be an integer");
        int v = std::stoi(std::string(s_.substr(start, pos_ - start)));
        return negative ? -v : v;
    }
    Ptr parse_primary() {
        skip();
        if (pos_ >= s_.size()) throw ParseError(pos_, "unexpected end of input");
        char c = s_[pos_];
        if (c == '(') {
            ++pos_;
            Ptr e = parse_sum();
            expect(')');
            return e;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::size_t start = pos_;
            while (pos_ < s_.size() &&
                   (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_'))
                ++pos_;
            std::string id(s_.substr(start, pos_ - start));
            if (id == "tau") return variable();
            if (id == "pi") return constant(std::numbers::pi);
            if (id == "e") return constant(std::numbers::e);
            Kind k;
            if (id == "sin") k = Kind::Sin;
            else if (id == "cos") k = Kind::Cos;
            else if (id == "exp") k = Kind::Exp;
            else if (id == "tanh") k = Kind::Tanh;
            else throw ParseError(start, "unknown identifier '" + id + "'");
            expect('(');
            Ptr arg = parse_sum();
            expect(')');
            return make(k, arg);
        }
        throw ParseError(pos_, "unexpected character '" + std::string(1, c) + "'");
    }
    Ptr parse_number() {
        std::size_t start = pos_;
        auto digits = [&] {
            while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) ++pos_;
        };
        digits();
        if (pos_ < s_.size() && s_[pos_] == '.') {
            ++pos_;
            digits();
        }
        if (pos_ < s_.size() && (s_[pos_] == 'e' || s_[pos_] == 'E')) {
            std::size_t save = pos_++;
            if (pos_ < s_.size() && (s_[pos_] == '+' || s_[pos_] == '-')) ++pos_;
            if (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) digits();
            else pos_ = save;  // "2e" is not an exponent; leave 'e' for the caller
        }
        std::string tok(s_.substr(start, pos_ - start));
        if (tok == ".") throw ParseError(start, "malformed number");
        return constant(std::stod(tok));
    }
};

}  // namespace expr

class SlowProfile {
public:
    SlowProfile() = default;

    // q-th derivative at tau; q above max_derivative() is refused.
    double eval(double tau, int q = 0) const {
        if (q < 0 || q > max_derivative_)
            throw Error("derivative order " + std::to_string(q) + " outside [0, " +
                        std::to_string(max_derivative_) + "] for profile '" + label_ + "'");
        return expr::evaluate(*derivs_[static_cast<std::size_t>(q)], tau);
    }
    double operator()(double tau) const { return eval(tau, 0); }

    int max_derivative() const { return max_derivative_; }
    const std::string& label() const { return label_; }
    const std::string& source() const { return source_; }
    std::string derivative_text(int q) const { return expr::to_string(*derivs_.at(static_cast<std::size_t>(q))); }
    std::string to_string() const { return derivative_text(0); }
    bool is_constant() const { return derivs_[1]->kind == expr::Kind::Const && derivs_[1]->value == 0.0; }

private:
    friend SlowProfile parse_profile(std::string_view, int, std::string);
    std::vector<expr::Ptr> derivs_;
    int max_derivative_ = 0;
    std::string label_;
    std::string source_;
};

inline SlowProfile parse_profile(std::string_view text, int max_derivative = 6, std::string label = {}) {
    if (text.find_first_not_of(" \t\r\n") == std::string_view::npos)
        throw ParseError(0, "empty expression");
    if (max_derivative < 2) throw Error("max_derivative must be at least 2");
    SlowProfile p;
    p.derivs_.push_back(expr::Parser(text).parse());
    for (int q = 1; q <= max_derivative; ++q) p.derivs_.push_back(expr::derivative(p.derivs_.back()));
    p.max_derivative_ = max_derivative;
    p.label_ = label.empty() ? std::string(text) : std::move(label);
    p.source_ = std::string(text);
    return p;
}

struct ProfileReport {
    bool pass = false;
    double min_value = 0.0;
    double argmin = 0.0;
    std::array<double, 3> max_abs{};  // max |p^(q)| for q = 0, 1, 2
};

inline ProfileReport validate_profile(const SlowProfile& p, double horizon, double c0, int samples) {
    if (samples < 2) throw Error("validate_profile: need at least 2 samples");
    if (!(horizon > 0)) throw Error("validate_profile: horizon must be positive");
    ProfileReport r;
    r.min_value = INFINITY;
    for (int i = 0; i < samples; ++i) {
        double tau = horizon * i / (samples - 1);
        for (int q = 0; q <= 2; ++q) {
            double v = p.eval(tau, q);
            if (!std::isfinite(v))
                throw Error("profile '" + p.label() + "' is not finite at tau=" + std::to_string(tau));
            r.max_abs[static_cast<std::size_t>(q)] = std::max(r.max_abs[static_cast<std::size_t>(q)], std::abs(v));
            if (q == 0 && v < r.min_value) {
                r.min_value = v;
                r.argmin = tau;
            }
        }
    }
    r.pass = r.min_value >= c0;
    return r;
}

// Equation data: u_tt = c(eps t)^2 Laplace u + a(eps t) u^3 on a box with
// Dirichlet walls.
struct ProblemSpec {
    int dimension = 1;
    std::vector<double> lengths{std::numbers::pi};
    SlowProfile speed;
    SlowProfile coupling;
    double epsilon = 0.1;
    double c0 = 0.0;
};

}  // namespace mfe
