#pragma once

// Truncated Taylor series in slow time: f(tau + s) = sum_q f_q s^q with
// f_q = f^(q)(tau) / q!. All modulation-function derivatives are carried
// this way, so no finite differencing ever enters the expansion.

#include <cmath>
#include <complex>
#include <vector>

#include "mfe/profile.hpp"

namespace mfe::series {

// out[q] += scale * sum_{i<=q} a[i] b[q-i] for q = 0..order
template <class T, class U, class S>
inline void mul_acc(T* out, const U* a, const T* b, int order, S scale) {
    for (int q = 0; q <= order; ++q) {
        T s{};
        for (int i = 0; i <= q; ++i) s += a[i] * b[q - i];
        out[q] += scale * s;
    }
}

// Coefficients of the derivative: (f')_q = (q+1) f_{q+1}.
template <class T>
inline void derivative(T* out, const T* a, int order) {
    for (int q = 0; q < order; ++q) out[q] = static_cast<double>(q + 1) * a[q + 1];
}

inline std::vector<double> of_profile(const SlowProfile& p, double tau, int order) {
    std::vector<double> f(static_cast<std::size_t>(order) + 1);
    double fact = 1.0;
    for (int q = 0; q <= order; ++q) {
        if (q > 0) fact *= q;
        f[static_cast<std::size_t>(q)] = p.eval(tau, q) / fact;
    }
    return f;
}

inline std::vector<double> product(const std::vector<double>& a, const std::vector<double>& b, int order) {
    std::vector<double> r(static_cast<std::size_t>(order) + 1);
    mul_acc(r.data(), a.data(), b.data(), order, 1.0);
    return r;
}

inline std::vector<double> reciprocal(const std::vector<double>& a, int order) {
    std::vector<double> r(static_cast<std::size_t>(order) + 1);
    r[0] = 1.0 / a[0];
    for (int q = 1; q <= order; ++q) {
        double s = 0.0;
        for (int i = 1; i <= q; ++i) s += a[static_cast<std::size_t>(i)] * r[static_cast<std::size_t>(q - i)];
        r[static_cast<std::size_t>(q)] = -s / a[0];
    }
    return r;
}

// exp of a complex series given by f (f[0] may be any complex number).
inline std::vector<std::complex<double>> exp(const std::vector<std::complex<double>>& f, int order) {
    std::vector<std::complex<double>> e(static_cast<std::size_t>(order) + 1);
    e[0] = std::exp(f[0]);
    for (int q = 0; q < order; ++q) {
        std::complex<double> s{};
        for (int i = 0; i <= q; ++i)
            s += static_cast<double>(i + 1) * f[static_cast<std::size_t>(i + 1)] * e[static_cast<std::size_t>(q - i)];
        e[static_cast<std::size_t>(q + 1)] = s / static_cast<double>(q + 1);
    }
    return e;
}

}  // namespace mfe::series
