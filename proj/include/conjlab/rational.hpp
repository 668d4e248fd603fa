/** \file rational.hpp
 *  \brief Exact integer/rational arithmetic used throughout the laboratory.
 *
 *  All combinatorial data of the construction (stage denominators q_n, block
 *  counts, partition-element corners, sector offsets) is carried as exact
 *  rationals.  Doubles appear only when a point enters the transition region
 *  of a smooth block, and then only in O(1) local coordinates, so no
 *  precision is lost to the huge denominators that show up at later stages.
 */
#pragma once

#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace conjlab {

using Int = boost::multiprecision::cpp_int;
using Rat = boost::multiprecision::cpp_rational;

/// q^e for non-negative integer exponents.
inline Int ipow(const Int& q, unsigned e) {
    Int r = 1;
    for (unsigned i = 0; i < e; ++i) r *= q;
    return r;
}

inline Rat rpow(const Rat& q, unsigned e) {
    Rat r = 1;
    for (unsigned i = 0; i < e; ++i) r *= q;
    return r;
}

/// Floor of a rational as an integer.
inline Int rfloor(const Rat& x) {
    Int n = numerator(x), d = denominator(x);  // d > 0 by invariant
    Int q = n / d, r = n % d;
    if (r != 0 && n < 0) --q;
    return q;
}

inline Int rceil(const Rat& x) { return -rfloor(-x); }

/// Fractional part in [0,1).
inline Rat rfrac(const Rat& x) { return x - Rat(rfloor(x)); }

/// x reduced mod m into [0, m), m > 0.
inline Rat rmod(const Rat& x, const Rat& m) { return rfrac(x / m) * m; }

/// x reduced mod m into the balanced interval (-m/2, m/2].
inline Rat rmod_balanced(const Rat& x, const Rat& m) {
    Rat r = rmod(x, m);
    if (2 * r > m) r -= m;
    return r;
}

/// ceil(a/b) for positive integers.
inline Int ceil_div(const Int& a, const Int& b) { return (a + b - 1) / b; }

inline Rat rabs(const Rat& x) { return x < 0 ? Rat(-x) : x; }

/// Nearest-integer distance |x - round(x)| (distance to Z).
inline Rat dist_to_Z(const Rat& x) {
    Rat f = rfrac(x);
    return f <= Rat(1, 2) ? f : Rat(1) - f;
}

inline double to_double(const Rat& x) { return x.convert_to<double>(); }

/// Natural log of a positive rational, robust against double overflow or
/// underflow of the value itself (works off the bit lengths of num/den).
inline double rlog(const Rat& x) {
    if (x <= 0) throw std::domain_error("rlog: non-positive argument");
    auto lg = [](const Int& v) {
        const long b = static_cast<long>(msb(v));
        const long sh = b > 52 ? b - 52 : 0;
        const double m = Int(v >> sh).convert_to<double>();
        return std::log(m) + double(sh) * std::log(2.0);
    };
    return lg(numerator(x)) - lg(denominator(x));
}
inline double to_double(const Int& x) { return x.convert_to<double>(); }

/// Exact conversion of a finite double to a rational (binary expansion).
inline Rat rat_of_double(double v) {
    if (!std::isfinite(v)) throw std::invalid_argument("rat_of_double: non-finite");
    int e = 0;
    double m = std::frexp(v, &e);            // v = m * 2^e, |m| in [0.5, 1)
    Int num = static_cast<long long>(std::ldexp(m, 53));
    e -= 53;
    Rat r(num);
    if (e >= 0) r *= Rat(ipow(Int(2), unsigned(e)));
    else r /= Rat(ipow(Int(2), unsigned(-e)));
    return r;
}

/// Decimal-string round trip for serialization of big integers.
inline std::string int_to_string(const Int& v) { return v.str(); }
inline Int int_from_string(const std::string& s) { return Int(s); }

}  // namespace conjlab
