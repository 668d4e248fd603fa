/** \file test_conjugation.cpp
 *  \brief Unit tests for the stagewise conjugation maps.
 */
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "conjlab/conjugation.hpp"
#include "conjlab/rng.hpp"

using namespace conjlab;

namespace {

StageChain desk_chain() {
    StageChain chain;
    chain.stages = {
        {1, 2, Int(77), Int(260)},
        {2, 2, Int(1248), Int(4160)},
        {3, 2, Int(202257), Int(673920)},
        {4, 2, Int(4854176), Int(16174080)},
    };
    chain.finalize(/*relax_growth=*/true);
    return chain;
}

Rat circ_dist(const Rat& a, const Rat& b) { return dist_to_Z(a - b); }

/// Max coordinate distance between two points (theta on the circle).
double point_dist(const ManifoldPoint& a, const ManifoldPoint& b) {
    Rat d = circ_dist(a.theta, b.theta);
    for (std::size_t i = 0; i < a.r.size(); ++i) d = std::max(d, rabs(a.r[i] - b.r[i]));
    return to_double(d);
}

ManifoldPoint random_point(const CounterRng& rng, std::uint64_t i, unsigned m) {
    std::vector<Rat> r(m - 1);
    for (unsigned c = 0; c + 1 < m; ++c) r[c] = rng.uniform_rat(i * 8 + 1 + c);
    return ManifoldPoint(rng.uniform_rat(i * 8), std::move(r));
}

}  // namespace

TEST_CASE("floor_n_q_sigma matches exact integer root comparisons") {
    CHECK(floor_n_q_sigma(1, Int(16), Rat(1, 2)) == 4);
    CHECK(floor_n_q_sigma(1, Int(15), Rat(1, 2)) == 3);
    CHECK(floor_n_q_sigma(2, Int(260), Rat(1, 4)) == 8);    // 2 * 260^(1/4) = 8.03...
    CHECK(floor_n_q_sigma(3, Int(673920), Rat(1, 4)) == 85);  // 3 * 28.655...
    // Tight cases: t = floor value must satisfy t^4 <= n^4 q < (t+1)^4.
    for (unsigned n = 1; n <= 5; ++n)
        for (Int q : {Int(260), Int(4160), Int(673920)}) {
            const Int t = floor_n_q_sigma(n, q, Rat(1, 4));
            CHECK(ipow(t, 4) <= ipow(Int(n), 4) * q);
            CHECK(ipow(t + 1, 4) > ipow(Int(n), 4) * q);
        }
}

TEST_CASE("sector dispatch and per-sector parameters") {
    const StageParams st{3, 2, Int(202257), Int(673920)};
    const SectorDispatch disp(st, Rat(1, 4));
    const Rat w(1, Int(3) * st.q);  // sector width
    CHECK(disp.sector_of(Rat(0)) == 1);
    CHECK(disp.sector_of(w / 2) == 1);
    CHECK(disp.sector_of(w) == 1);      // right-closed lower sector
    CHECK(disp.sector_of(w + Rat(1, Int(10) * st.q)) == 2);
    CHECK(disp.sector_of(2 * w) == 2);
    CHECK(disp.sector_of(3 * w - Rat(1, ipow(st.q, 3))) == 3);
    CHECK(disp.sector_of(3 * w + Rat(1, ipow(st.q, 3))) == 1);  // next fundamental copy

    for (unsigned k = 1; k <= 3; ++k) {
        const GnSectorParams g = disp.g_params(k);
        CHECK(g.a == Int(3) * ipow(st.q, 1 + k * (k + 1) / 2));
        CHECK(g.b == 85);
        CHECK(g.eps == Rat(1, 648));
        CHECK(g.delta == Rat(1, 2592));
        // Standing divisibility: a b delta / eps = a b / 4 integral.
        CHECK(denominator(Rat(g.a * g.b) * g.delta / g.eps) == 1);

        const PhiSectorParams ph = disp.phi_params(k);
        REQUIRE(ph.lambda.size() == 1);  // m = 2: only j = 2
        CHECK(ph.lambda[0] == Int(3) * ipow(st.q, 1 + k * (k - 1) / 2));
        CHECK(ph.mu == ipow(st.q, k));
        CHECK(ph.eps == Rat(1, 60 * 81));
        CHECK(ph.delta == Rat(1, 810));
        CHECK(ph.eps2 == Rat(1, 22 * 81));
    }
    CHECK_THROWS_AS(disp.g_params(0), ConfigError);
    CHECK_THROWS_AS(disp.g_params(4), ConfigError);
    CHECK_THROWS_AS(SectorDispatch(StageParams{3, 2, Int(1), Int(673921)}, Rat(1, 4)),
                    ConfigError);
}

TEST_CASE("g_n: plain-shear collar, identity blocks and eta-corner images") {
    const StageParams st{3, 2, Int(202257), Int(673920)};
    const Int q = st.q;
    const unsigned n = 3;
    const MapPtr g = build_g_n(st);
    const Int b = 85;
    const Rat delta(1, 32 * 81), eps(1, 8 * 81);

    SUBCASE("delta collar acts as the plain shear, exactly") {
        const ManifoldPoint x(Rat(5, 13), {delta / 2});
        const ManifoldPoint y = g->fwd(x);
        CHECK(y.theta == rfrac(x.theta + b * x.r[0]));
        CHECK(y.r[0] == x.r[0]);
        CHECK(g->inv(y).theta == x.theta);
        const MatM J = g->jac(x);
        CHECK(J[0][1] == doctest::Approx(to_double(Rat(b))).epsilon(1e-14));
        CHECK(J[0][0] == 1.0);
        CHECK(J[1][0] == 0.0);
        CHECK(J[1][1] == 1.0);
    }

    SUBCASE("a point in the local identity region is theta-shifted by l eps / a") {
        // Sector 1: a = n q^2.  Local square centre: x_loc = y_loc = 1/2.
        const GnSectorParams p = SectorDispatch(st, Rat(1, 4)).g_params(1);
        const Int ba_eps = numerator(Rat(p.b * p.a) / p.eps);
        const Int l = ba_eps / 2;  // mid-strip block, inside the admissible range
        const Rat r1 = (Rat(l) + Rat(1, 2)) / ba_eps;
        const Rat theta = Rat(1, 2 * p.a);  // x_loc = 1/2 in the first cell
        const ManifoldPoint x(theta, {r1});
        const ManifoldPoint y = g->fwd(x);
        CHECK(y.r[0] == r1);                                        // block fixed
        CHECK(rfrac(y.theta - x.theta) == rfrac(Rat(l) * p.eps / p.a));  // cell offset mod 1
        CHECK(point_dist(g->inv(y), x) == 0.0);
        const MatM J = g->jac(x);
        CHECK(J[0][0] == 1.0);
        CHECK(J[0][1] == 0.0);
        CHECK(J[1][1] == 1.0);
    }

    SUBCASE("eta_3 element corners map exactly as under g~_b") {
        // k = 2 element of the partial partition on the fundamental sector.
        const Int lo = 832;  // ceil(q / (10 n^4))
        const Int j11 = lo + 7, j12 = q - lo - 5, j13 = Int(123456);
        const Int j21 = lo + 1, j22 = Int(400000), j23 = q - lo - 1;
        const Rat th_lo = Rat(1, 3 * q) + Rat(j11, 3 * ipow(q, 2)) + Rat(j12, 3 * ipow(q, 3)) +
                          Rat(j13, 3 * ipow(q, 4)) + Rat(1, 10 * 243 * ipow(q, 4));
        const Rat th_hi = Rat(1, 3 * q) + Rat(j11, 3 * ipow(q, 2)) + Rat(j12, 3 * ipow(q, 3)) +
                          Rat(j13 + 1, 3 * ipow(q, 4)) - Rat(1, 10 * 243 * ipow(q, 4));
        const Rat r_lo = Rat(j21, q) + Rat(j22, ipow(q, 2)) + Rat(j23, ipow(q, 3)) +
                         Rat(1, 26 * 81 * ipow(q, 3));
        const Rat r_hi = Rat(j21, q) + Rat(j22, ipow(q, 2)) + Rat(j23 + 1, ipow(q, 3)) -
                         Rat(1, 26 * 81 * ipow(q, 3));
        for (const Rat& th : {th_lo, th_hi})
            for (const Rat& r1 : {r_lo, r_hi}) {
                const ManifoldPoint x(th, {r1});
                const ManifoldPoint y = g->fwd(x);
                CHECK(y.theta == rfrac(th + b * r1));
                CHECK(y.r[0] == r1);
            }
        // Negative control: nudge r_1 half a block width off the admissible
        // grid, so the local square coordinate sits at (1/2, 1/2) -- interior
        // identity region, where the map drops the fractional part of the
        // shear and differs from the plain shear by exactly eps/(2a).
        const GnSectorParams p2 = SectorDispatch(st, Rat(1, 4)).g_params(2);
        const Rat r_neg = r_lo + p2.eps / (2 * p2.b * p2.a);
        const ManifoldPoint xc((th_lo + th_hi) / 2, {r_neg});
        const ManifoldPoint yc = g->fwd(xc);
        CHECK(yc.r[0] == r_neg);  // r_1 is always preserved
        CHECK(circ_dist(yc.theta, rfrac(xc.theta + b * r_neg)) == p2.eps / (2 * p2.a));
    }

    SUBCASE("sector gluing: both sides of a sector boundary agree") {
        const Rat bnd = Rat(1, 3 * q);  // sector 1 | sector 2 boundary
        const Rat h(1, ipow(q, 6));
        for (const Rat& r1 : {Rat(1, 3), Rat(171, 320)}) {
            const ManifoldPoint a(bnd - h, {r1});
            const ManifoldPoint c(bnd + h, {r1});
            // Near the boundary the local x sits at a cell edge, so both
            // sector maps reduce to the plain shear exactly.
            CHECK(g->fwd(a).theta == rfrac(a.theta + b * r1));
            CHECK(g->fwd(c).theta == rfrac(c.theta + b * r1));
        }
    }
}

TEST_CASE("phi_n: boundary identity and quarter-turn structure") {
    const StageParams st{3, 2, Int(202257), Int(673920)};
    const MapPtr phi = build_phi_n(st);

    SUBCASE("identity whenever any strip coordinate is outside the eps band") {
        const CounterRng rng(41, "phi-id");
        for (int i = 0; i < 10; ++i) {
            const Rat r1 = rng.uniform_rat(2 * i) / Rat(70 * 81);  // < 1/(60 n^4)
            const ManifoldPoint x(rng.uniform_rat(2 * i + 1), {r1});
            CHECK(point_dist(phi->fwd(x), x) == 0.0);
            CHECK(point_dist(phi->inv(x), x) == 0.0);
        }
    }

    SUBCASE("rotation-region points follow the exact quarter turn") {
        // Sector 1: lambda = 3 q, mu = q.  Choose local coordinates well
        // inside [2 eps, 1 - 2 eps]^2 whose psi cell coordinates fall in the
        // eps2 identity band, so the factor is the pure turn.
        const SectorDispatch disp(st, Rat(1, 4));
        const PhiSectorParams p = disp.phi_params(1);

        // Point 1: psi-cell coordinates fall in the inner identity band, so
        // the factor is the pure turn (x1, x2) -> (1 - x2, x1).
        {
            const Rat u1 = Rat(2, 5), r1 = p.delta + Rat(357, p.mu) + p.eps2 / (3 * p.mu);
            const ManifoldPoint x(u1 / p.lambda[0], {r1});
            const ManifoldPoint y = phi->fwd(x);
            CHECK(y.r[0] == u1);
            CHECK(y.theta == (1 - r1) / p.lambda[0]);
            CHECK(point_dist(phi->inv(y), x) == 0.0);
        }

        // Point 2: cell coordinates (1/2, 1/3) after the turn, interior to
        // the inner rotation region, so psi turns within the mu-cell as
        // (a, b) -> (b, 1 - a).
        {
            const Rat u1 = Rat(2, 5) + Rat(1, 3 * p.mu);
            const Rat r1 = p.delta + Rat(357, p.mu) + Rat(1, 2 * p.mu);
            const ManifoldPoint x(u1 / p.lambda[0], {r1});
            const ManifoldPoint y = phi->fwd(x);
            const Rat t1 = (1 - r1 - p.delta) * p.mu;  // first turned coordinate
            const Rat t2 = (u1 - p.delta) * p.mu;
            CHECK(t1 - rfloor(t1) == Rat(1, 2));
            CHECK(t2 - rfloor(t2) == Rat(1, 3));
            const Rat w1 = p.delta + (Rat(rfloor(t1)) + Rat(1, 3)) / p.mu;
            const Rat w2 = p.delta + (Rat(rfloor(t2)) + Rat(1, 2)) / p.mu;
            CHECK(y.theta == w1 / p.lambda[0]);
            CHECK(y.r[0] == w2);
            CHECK(point_dist(phi->inv(y), x) == 0.0);
        }
    }
}

TEST_CASE("equivariance: g_n, phi_n, h_n commute with R_{1/q_n}") {
    const StageChain chain = desk_chain();
    for (std::size_t idx = 0; idx < 3; ++idx) {
        const StageParams& st = chain.stages[idx];
        const StageMaps maps = build_stage_maps(chain, idx);
        const RotationMap R(Rat(1, st.q), st.m);
        const CounterRng rng(97, "equivariance-" + std::to_string(st.n));
        const int npts = idx == 2 ? 12 : 40;
        for (int i = 0; i < npts; ++i) {
            const ManifoldPoint x = random_point(rng, i, st.m);
            for (const MapPtr& f : {maps.g, maps.phi, maps.h}) {
                const double res = point_dist(f->fwd(R.fwd(x)), R.fwd(f->fwd(x)));
                CHECK(res <= 1e-12);
            }
        }
    }
}

TEST_CASE("round trips: fwd then inv returns the input") {
    const StageChain chain = desk_chain();
    for (std::size_t idx = 0; idx < 3; ++idx) {
        const StageMaps maps = build_stage_maps(chain, idx);
        const CounterRng rng(7, "roundtrip-" + std::to_string(idx));
        const int npts = idx == 2 ? 10 : 30;
        for (int i = 0; i < npts; ++i) {
            const ManifoldPoint x = random_point(rng, i, 2);
            CHECK(point_dist(maps.h->inv(maps.h->fwd(x)), x) <= 1e-9);
            CHECK(point_dist(maps.Phi->inv(maps.Phi->fwd(x)), x) <= 1e-9);
        }
    }
}

TEST_CASE("Phi_3 maps eta-element corners into the predicted box") {
    const StageChain chain = desk_chain();
    const StageMaps maps = build_stage_maps(chain, 2);  // n = 3
    CHECK(chain.transitions[2].cert.m_n == 1);
    CHECK(chain.transitions[2].a_n == 0);
    const Int q = chain.stages[2].q;
    const unsigned n = 3;

    // k = 2 element as in the g_n test.
    const Int lo = 832;
    const Int j11 = lo + 7, j12 = q - lo - 5, j13 = Int(123456);
    const Int j21 = lo + 1, j22 = Int(400000), j23 = q - lo - 1;
    const Rat th_lo = Rat(1, 3 * q) + Rat(j11, 3 * ipow(q, 2)) + Rat(j12, 3 * ipow(q, 3)) +
                      Rat(j13, 3 * ipow(q, 4)) + Rat(1, 10 * 243 * ipow(q, 4));
    const Rat th_hi = Rat(1, 3 * q) + Rat(j11, 3 * ipow(q, 2)) + Rat(j12, 3 * ipow(q, 3)) +
                      Rat(j13 + 1, 3 * ipow(q, 4)) - Rat(1, 10 * 243 * ipow(q, 4));
    const Rat r_lo = Rat(j21, q) + Rat(j22, ipow(q, 2)) + Rat(j23, ipow(q, 3)) +
                     Rat(1, 26 * 81 * ipow(q, 3));
    const Rat r_hi = Rat(j21, q) + Rat(j22, ipow(q, 2)) + Rat(j23 + 1, ipow(q, 3)) -
                     Rat(1, 26 * 81 * ipow(q, 3));

    // Predicted image box (error term a_n = 0 for the aligned desk chain).
    const Rat base = Rat(2, 3 * q) + Rat(j11, 3 * ipow(q, 2)) + Rat(j21, 3 * ipow(q, 3)) +
                     Rat(j22, 3 * ipow(q, 4)) + Rat(j12, 3 * ipow(q, 5)) +
                     Rat(j13 + 1, 3 * ipow(q, 6));
    const Rat pred_th_lo = base - Rat(j23 + 1, 3 * ipow(q, 7)) + Rat(1, 26 * 243 * ipow(q, 7));
    const Rat pred_th_hi = base - Rat(j23, 3 * ipow(q, 7)) - Rat(1, 26 * 243 * ipow(q, 7));
    const Rat pred_r_lo = Rat(1, 10 * 81), pred_r_hi = 1 - Rat(1, 10 * 81);

    CHECK(pred_th_hi - pred_th_lo <= Rat(1, n * ipow(q, 7)));  // theta width bound

    const CounterRng rng(11, "distri-corners");
    std::vector<ManifoldPoint> pts;
    for (const Rat& th : {th_lo, th_hi})
        for (const Rat& r1 : {r_lo, r_hi}) pts.emplace_back(th, std::vector<Rat>{r1});
    pts.emplace_back((th_lo + th_hi) / 2, std::vector<Rat>{(r_lo + r_hi) / 2});
    for (int i = 0; i < 8; ++i) {
        const Rat a = rng.uniform_rat(2 * i), b = rng.uniform_rat(2 * i + 1);
        pts.emplace_back(th_lo + (th_hi - th_lo) * a, std::vector<Rat>{r_lo + (r_hi - r_lo) * b});
    }
    // phi_n commutes with R_{1/q}, so the rotation's whole multiples of 1/q
    // pass straight through: the image box is predicted modulo 1/q.
    const Rat grid(1, q);
    for (const ManifoldPoint& x : pts) {
        const ManifoldPoint y = maps.Phi->fwd(x);
        CHECK(rmod(y.theta - pred_th_lo, grid) <= pred_th_hi - pred_th_lo);
        CHECK(y.r[0] >= pred_r_lo);
        CHECK(y.r[0] <= pred_r_hi);
    }
}

TEST_CASE("stage maps: wiring, volume and boundary behaviour") {
    const StageChain chain = desk_chain();

    SUBCASE("H_prev of the first stage is the identity and f_1 wraps h_1") {
        const StageMaps maps = build_stage_maps(chain, 0);
        const ManifoldPoint x(Rat(3, 7), {Rat(2, 5)});
        CHECK(point_dist(maps.H_prev->fwd(x), x) == 0.0);
        const Rat alpha2 = chain.stages[1].alpha();
        const ManifoldPoint lhs = maps.f->fwd(x);
        const ManifoldPoint rhs =
            maps.h->fwd(RotationMap(alpha2, 2).fwd(maps.h->inv(x)));
        CHECK(point_dist(lhs, rhs) == 0.0);
    }

    SUBCASE("f_2 equals the rotation near the strip boundary") {
        const StageMaps maps = build_stage_maps(chain, 1);
        const Rat alpha3 = chain.stages[2].alpha();
        const CounterRng rng(5, "boundary");
        for (int i = 0; i < 10; ++i) {
            const Rat th = rng.uniform_rat(3 * i);
            const Rat small = rng.uniform_rat(3 * i + 1) / 2000;
            for (const Rat& r1 : {small, Rat(1 - small)}) {
                const ManifoldPoint x(th, {r1});
                const ManifoldPoint y = maps.f->fwd(x);
                CHECK(y.theta == rfrac(th + alpha3));
                CHECK(y.r[0] == r1);
            }
        }
    }

    SUBCASE("volume: |det Dh_n - 1| small everywhere, zero on exact regions") {
        for (std::size_t idx : {std::size_t(0), std::size_t(1)}) {
            const StageMaps maps = build_stage_maps(chain, idx);
            const CounterRng rng(23, "volume-" + std::to_string(idx));
            for (int i = 0; i < 25; ++i) {
                const ManifoldPoint x = random_point(rng, i, 2);
                CHECK(std::fabs(mat_det(maps.h->jac(x)) - 1.0) <= 1e-6);
            }
        }
        // Exact plain-shear region: determinant is exactly 1.
        const StageMaps maps = build_stage_maps(chain, 1);
        const ManifoldPoint x(Rat(9, 17), {Rat(1, 4096)});
        CHECK(mat_det(maps.h->jac(x)) == 1.0);
    }

    SUBCASE("composed H_2 Jacobian: exact chain rule on the boundary collar") {
        // For r_1 below every delta threshold both stages reduce to plain
        // shears and both phi factors to the identity, so H_2 is the exact
        // affine map theta -> theta + (b_1 + b_2) r_1 and finite differences
        // reproduce its Jacobian with no truncation error at all.
        const StageMaps maps = build_stage_maps(chain, 1);
        const Rat h(1, 4096);
        const ManifoldPoint x(Rat(5, 11), {Rat(1, 1024)});
        const MatM J = maps.H->jac(x);
        CHECK(J[0][0] == 1.0);
        CHECK(J[0][1] == 20.0);  // b_1 + b_2 = 4 + 16
        CHECK(J[1][0] == 0.0);
        CHECK(J[1][1] == 1.0);
        for (unsigned col = 0; col < 2; ++col) {
            ManifoldPoint xp = x, xm = x;
            if (col == 0) {
                xp.theta = rfrac(x.theta + h);
                xm.theta = rfrac(x.theta - h);
            } else {
                xp.r[0] += h / 8;  // stay inside the collar
                xm.r[0] -= h / 8;
            }
            const Rat step = col == 0 ? 2 * h : h / 4;
            const ManifoldPoint yp = maps.H->fwd(xp), ym = maps.H->fwd(xm);
            CHECK(rmod_balanced(yp.theta - ym.theta, Rat(1)) / step == Rat(J[0][col]));
            CHECK((yp.r[0] - ym.r[0]) / step == Rat(J[1][col]));
        }
    }

    SUBCASE("composed H_2 Jacobian agrees with tiny rational finite differences") {
        // The finest structure of H_2 lives at scale 1/(lambda mu) ~ 1.7e-15
        // in theta, so the step must sit far below that.  On the piecewise
        // exact branches the map is locally affine and the rational FD is
        // exact; points whose +/-h interval straddles a branch boundary or
        // touches a numerically smoothed seam are simply not counted.
        const StageMaps maps = build_stage_maps(chain, 1);
        const Rat h(1, ipow(Int(10), 24));
        const CounterRng rng(31, "jac-fd");
        int agreed = 0;
        for (int i = 0; i < 40; ++i) {
            const ManifoldPoint x = random_point(rng, i, 2);
            if (x.r[0] < h || x.r[0] > 1 - h) continue;
            MatM fd = mat_identity(2);
            for (unsigned col = 0; col < 2; ++col) {
                ManifoldPoint xp = x, xm = x;
                if (col == 0) {
                    xp.theta = rfrac(x.theta + h);
                    xm.theta = rfrac(x.theta - h);
                } else {
                    xp.r[0] += h;
                    xm.r[0] -= h;
                }
                const ManifoldPoint yp = maps.H->fwd(xp), ym = maps.H->fwd(xm);
                fd[0][col] = to_double(rmod_balanced(yp.theta - ym.theta, Rat(1)) / (2 * h));
                fd[1][col] = to_double((yp.r[0] - ym.r[0]) / (2 * h));
            }
            const MatM J = maps.H->jac(x);
            double num = 0, den = 0;
            for (unsigned r = 0; r < 2; ++r)
                for (unsigned c = 0; c < 2; ++c) {
                    num += (fd[r][c] - J[r][c]) * (fd[r][c] - J[r][c]);
                    den += J[r][c] * J[r][c];
                }
            if (std::sqrt(num / den) <= 1e-6) ++agreed;
        }
        CHECK(agreed >= 10);
    }
}

TEST_CASE("build errors: unfinalized chains and missing successors") {
    StageChain chain = desk_chain();
    CHECK_THROWS_AS(build_stage_maps(chain, 3), ConfigError);  // no alpha_{n+1}
    StageChain raw;
    raw.stages = chain.stages;
    CHECK_THROWS_AS(build_stage_maps(raw, 0), ConfigError);  // not finalized
}
