/** \file test_rational.cpp
 *  \brief Unit tests for the exact integer/rational helpers.
 */
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "conjlab/rational.hpp"

using namespace conjlab;

TEST_CASE("floor/ceil/frac on signed rationals") {
    CHECK(rfloor(Rat(7, 2)) == 3);
    CHECK(rfloor(Rat(-7, 2)) == -4);
    CHECK(rfloor(Rat(6, 2)) == 3);
    CHECK(rceil(Rat(7, 2)) == 4);
    CHECK(rceil(Rat(-7, 2)) == -3);
    CHECK(rfrac(Rat(-1, 4)) == Rat(3, 4));
    CHECK(rfrac(Rat(9, 4)) == Rat(1, 4));
}

TEST_CASE("modular reductions") {
    CHECK(rmod(Rat(13, 10), Rat(1, 2)) == Rat(3, 10));
    CHECK(rmod(Rat(-1, 10), Rat(1, 2)) == Rat(4, 10));
    // Balanced representative lies in (-m/2, m/2]; the midpoint maps to +m/2.
    CHECK(rmod_balanced(Rat(4, 10), Rat(1, 2)) == Rat(-1, 10));
    CHECK(rmod_balanced(Rat(1, 4), Rat(1, 2)) == Rat(1, 4));
    CHECK(rmod_balanced(Rat(-1, 4), Rat(1, 2)) == Rat(1, 4));
}

TEST_CASE("distance to the integers") {
    CHECK(dist_to_Z(Rat(0)) == 0);
    CHECK(dist_to_Z(Rat(1, 2)) == Rat(1, 2));
    CHECK(dist_to_Z(Rat(7, 3)) == Rat(1, 3));
    CHECK(dist_to_Z(Rat(-7, 3)) == Rat(1, 3));
}

TEST_CASE("exact double round trip") {
    for (double v : {0.5, 1.0 / 3.0, -0.731281, 1e-30, 123456.789}) {
        const Rat r = rat_of_double(v);
        CHECK(to_double(r) == v);
    }
}

TEST_CASE("rlog agrees with std::log in double range and survives outside it") {
    CHECK(rlog(Rat(3, 7)) == doctest::Approx(std::log(3.0 / 7.0)).epsilon(1e-14));
    const Int huge = ipow(Int(10), 500);
    CHECK(rlog(Rat(huge)) == doctest::Approx(500.0 * std::log(10.0)).epsilon(1e-12));
    CHECK(rlog(Rat(1, huge)) == doctest::Approx(-500.0 * std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("integer power and ceil_div") {
    CHECK(ipow(Int(3), 0) == 1);
    CHECK(ipow(Int(2), 10) == 1024);
    CHECK(ceil_div(Int(7), Int(3)) == 3);
    CHECK(ceil_div(Int(6), Int(3)) == 2);
}
