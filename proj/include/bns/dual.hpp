#pragma once

#include <cmath>

namespace bns::detail {

/// Forward-mode dual number with one tangent. Nest (Dual<Dual<double>>) for
/// second derivatives. Arithmetic mirrors the chain rule exactly, so
/// derivatives obtained this way are the analytic ones.
template <class T>
struct Dual {
    T v{};  // value
    T d{};  // tangent

    Dual() = default;
    Dual(T value) : v(value), d(T(0)) {}  // NOLINT(google-explicit-constructor)
    Dual(T value, T tangent) : v(value), d(tangent) {}
};

template <class T> Dual<T> operator+(const Dual<T>& a, const Dual<T>& b) { return {a.v + b.v, a.d + b.d}; }
template <class T> Dual<T> operator-(const Dual<T>& a, const Dual<T>& b) { return {a.v - b.v, a.d - b.d}; }
template <class T> Dual<T> operator-(const Dual<T>& a) { return {-a.v, -a.d}; }
template <class T> Dual<T> operator*(const Dual<T>& a, const Dual<T>& b) {
    return {a.v * b.v, a.d * b.v + a.v * b.d};
}
template <class T> Dual<T> operator/(const Dual<T>& a, const Dual<T>& b) {
    T q = a.v / b.v;
    return {q, (a.d - q * b.d) / b.v};
}

template <class T> Dual<T> operator+(const Dual<T>& a, double b) { return a + Dual<T>(T(b)); }
template <class T> Dual<T> operator+(double a, const Dual<T>& b) { return Dual<T>(T(a)) + b; }
template <class T> Dual<T> operator-(const Dual<T>& a, double b) { return a - Dual<T>(T(b)); }
template <class T> Dual<T> operator-(double a, const Dual<T>& b) { return Dual<T>(T(a)) - b; }
template <class T> Dual<T> operator*(const Dual<T>& a, double b) { return a * Dual<T>(T(b)); }
template <class T> Dual<T> operator*(double a, const Dual<T>& b) { return Dual<T>(T(a)) * b; }
template <class T> Dual<T> operator/(const Dual<T>& a, double b) { return a / Dual<T>(T(b)); }
template <class T> Dual<T> operator/(double a, const Dual<T>& b) { return Dual<T>(T(a)) / b; }

using std::cos;
using std::exp;
using std::expm1;
using std::log;
using std::sin;
using std::sqrt;
using std::tanh;

template <class T> Dual<T> exp(const Dual<T>& a) {
    T e = exp(a.v);
    return {e, a.d * e};
}
template <class T> Dual<T> expm1(const Dual<T>& a) { return {expm1(a.v), a.d * exp(a.v)}; }
template <class T> Dual<T> log(const Dual<T>& a) { return {log(a.v), a.d / a.v}; }
template <class T> Dual<T> sqrt(const Dual<T>& a) {
    T s = sqrt(a.v);
    return {s, a.d / (2.0 * s)};
}
template <class T> Dual<T> sin(const Dual<T>& a) { return {sin(a.v), a.d * cos(a.v)}; }
template <class T> Dual<T> cos(const Dual<T>& a) { return {cos(a.v), -a.d * sin(a.v)}; }
template <class T> Dual<T> tanh(const Dual<T>& a) {
    T t = tanh(a.v);
    return {t, a.d * (1.0 - t * t)};
}

inline double value_of(double x) { return x; }
template <class T> double value_of(const Dual<T>& x) { return value_of(x.v); }

/// First-order dual over double.
using Dual1 = Dual<double>;
/// Second-order (nested) dual over double.
using Dual2 = Dual<Dual<double>>;

/// Seeds a Dual2 to extract value, first and second derivative of a scalar
/// function of one variable: f(make_dual2(t)) has f.v.v = f, f.v.d = f',
/// f.d.d = f''.
inline Dual2 make_dual2(double t) {
    return Dual2(Dual1(t, 1.0), Dual1(1.0, 0.0));
}

}  // namespace bns::detail
