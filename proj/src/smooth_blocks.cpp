/** \file smooth_blocks.cpp
 *  \brief Shear and rotation smoothers with Moser volume correction.
 */
#include "conjlab/smooth_blocks.hpp"

#include <algorithm>
#include <cmath>

namespace conjlab {

namespace {

constexpr double kCenter = 0.5;
constexpr double kPiHalf = 1.5707963267948966;

double sq(double v) { return v * v; }

/// Even-p norm of (ux, uy), scaled for stability.
double pnorm(double ux, double uy, int p) {
    const double ax = std::fabs(ux), ay = std::fabs(uy);
    const double mx = std::max(ax, ay);
    if (mx == 0.0) return 0.0;
    return mx * std::pow(std::pow(ax / mx, p) + std::pow(ay / mx, p), 1.0 / double(p));
}

/// Smallest even integer p >= 2 with 2^(1/p) < hi/lo (0 < lo < hi).
int admissible_p(double lo, double hi) {
    // Smallest even p with 2^(1/p) * lo <= (lo + hi) / 2.  Aiming at the
    // midpoint (rather than merely below hi) keeps the transition annulus
    // at least (hi - lo) / 2 wide; with the minimal admissible p the
    // annulus degenerates to the parity slack and the interpolation
    // becomes arbitrarily stiff.
    const double bound = std::log(2.0) / std::log(0.5 * (lo + hi) / lo);
    int p = 2;
    while (double(p) <= bound) p += 2;
    return p;
}

constexpr double kTwoPi = 6.283185307179586;

double wrap2pi(double th) {
    th = std::fmod(th, kTwoPi);
    return th < 0.0 ? th + kTwoPi : th;
}

/// Safeguarded Newton for a strictly increasing function with a sign change
/// on [lo, hi]: bisection to localise, Newton with bracket fallback.
template <class F, class DF>
double solve_mono(F&& f, DF&& df, double lo, double hi, int iters) {
    if (!(f(lo) <= 0.0 && f(hi) >= 0.0))
        throw MoserDiverged("transport solve: root not bracketed");
    for (int it = 0; it < 12; ++it) {
        const double mid = 0.5 * (lo + hi);
        (f(mid) < 0.0 ? lo : hi) = mid;
    }
    double x = 0.5 * (lo + hi);
    for (int it = 0; it < iters; ++it) {
        const double r = f(x);
        if (r == 0.0) break;
        (r < 0.0 ? lo : hi) = x;
        double nxt = x - r / df(x);
        if (!(nxt > lo && nxt < hi)) nxt = 0.5 * (lo + hi);
        if (nxt == x) break;  // Newton fixed point: converged to round-off
        x = nxt;
    }
    return x;
}

}  // namespace

Mat2 operator*(const Mat2& A, const Mat2& B) {
    return {A.a11 * B.a11 + A.a12 * B.a21, A.a11 * B.a12 + A.a12 * B.a22,
            A.a21 * B.a11 + A.a22 * B.a21, A.a21 * B.a12 + A.a22 * B.a22};
}

Mat2 inverse(const Mat2& A) {
    const double d = A.det();
    return {A.a22 / d, -A.a12 / d, -A.a21 / d, A.a11 / d};
}

// ---------------------------------------------------------------------------
// BumpProfile

BumpProfile::BumpProfile(double t0, double t1, double v0, double v1)
    : t0_(t0), t1_(t1), v0_(v0), v1_(v1) {
    if (!(t0 < t1)) throw std::invalid_argument("BumpProfile: need t0 < t1");
}

double BumpProfile::operator()(double t) const {
    if (t <= t0_) return v0_;
    if (t >= t1_) return v1_;
    const double u = (t - t0_) / (t1_ - t0_);
    const double s = std::exp(-1.0 / u);
    const double sb = std::exp(-1.0 / (1.0 - u));
    return v0_ + (v1_ - v0_) * (s / (s + sb));
}

double BumpProfile::deriv(double t) const {
    if (t <= t0_ || t >= t1_) return 0.0;
    const double u = (t - t0_) / (t1_ - t0_);
    const double s = std::exp(-1.0 / u);
    const double sb = std::exp(-1.0 / (1.0 - u));
    if (s + sb == 0.0) return 0.0;
    const double ds = (s * sb) * (1.0 / sq(u) + 1.0 / sq(1.0 - u)) / sq(s + sb);
    return (v1_ - v0_) * ds / (t1_ - t0_);
}

// ---------------------------------------------------------------------------
// ShearBlock

ShearBlock::ShearBlock(const Rat& eps, MoserSolveConfig cfg)
    : eps_(eps),
      eps_d_(to_double(eps)),
      p_(admissible_p(to_double(Rat(1, 2) - 4 * eps), to_double(Rat(1, 2) - 2 * eps))),
      c1_(std::pow(2.0, 1.0 / double(p_)) * (0.5 - 4.0 * eps_d_)),
      c2_(0.5 - 2.0 * eps_d_),
      rho_top_(0.5 - eps_d_),
      fprof_(c1_, c2_, 0.2, 1.0),
      chi_(1.0 / std::sqrt(50.0), 5.0 / 16.0, 0.0, 1.0),
      cfg_(cfg),
      mu_(std::make_shared<std::mutex>()) {
    if (!(eps > 0) || eps > Rat(1, 16))
        throw std::invalid_argument("ShearBlock: eps must lie in (0, 1/16]");
    if (denominator(Rat(1) / eps) != 1)
        throw std::invalid_argument("ShearBlock: 1/eps must be an integer");
    if (!(c1_ < c2_)) throw std::invalid_argument("ShearBlock: profile radii degenerate");
}

Region ShearBlock::classify(const Rat& x, const Rat& y) const {
    const Rat dx = rabs(x - Rat(1, 2)), dy = rabs(y - Rat(1, 2));
    const Rat sup = dx > dy ? dx : dy;
    if (sup <= Rat(1, 2) - 4 * eps_) return Region::Identity;
    if (sup >= Rat(1, 2) - eps_) return Region::Shear;
    return Region::Transition;
}

Region ShearBlock::classify(const P2& v) const {
    const double sup = std::max(std::fabs(v.x - kCenter), std::fabs(v.y - kCenter));
    if (sup <= 0.5 - 4.0 * eps_d_) return Region::Identity;
    if (sup >= 0.5 - eps_d_) return Region::Shear;
    return Region::Transition;
}

P2 ShearBlock::psi(const P2& v) const {
    const double ux = v.x - kCenter, uy = v.y - kCenter;
    const double rho = pnorm(ux, uy, p_);
    if (rho == 0.0 || rho >= c2_) return v;
    const double g = fprof_(rho);
    return {kCenter + g * ux, kCenter + g * uy};
}

double ShearBlock::fmap(double t) const { return t >= c2_ ? t : t * fprof_(t); }

double ShearBlock::fmap_inv(double u) const {
    if (u >= c2_) return u;
    if (u <= c1_ / 5.0) return 5.0 * u;
    // F(s) = s * fprof_(s) is strictly increasing (F' >= fprof >= 1/5);
    // a few bisections to localise, then safeguarded Newton.
    double lo = c1_, hi = c2_;
    for (int it = 0; it < 12; ++it) {
        const double mid = 0.5 * (lo + hi);
        (mid * fprof_(mid) < u ? lo : hi) = mid;
    }
    double s = 0.5 * (lo + hi);
    for (int it = 0; it < 60; ++it) {
        const double r = s * fprof_(s) - u;
        if (r != 0.0) (r < 0.0 ? lo : hi) = s;
        const double dF = fprof_(s) + s * fprof_.deriv(s);
        double nxt = s - r / dF;
        if (!(nxt > lo && nxt < hi)) nxt = 0.5 * (lo + hi);
        if (nxt == s) break;  // Newton fixed point: converged to round-off
        s = nxt;
    }
    return s;
}

P2 ShearBlock::psi_inv(const P2& w) const {
    const double ux = w.x - kCenter, uy = w.y - kCenter;
    const double rho = pnorm(ux, uy, p_);
    if (rho == 0.0 || rho >= c2_) return w;
    const double g = fmap_inv(rho) / rho;
    return {kCenter + g * ux, kCenter + g * uy};
}

Mat2 ShearBlock::dpsi(const P2& v) const {
    const double ux = v.x - kCenter, uy = v.y - kCenter;
    const double rho = pnorm(ux, uy, p_);
    if (rho == 0.0) return {0.2, 0.0, 0.0, 0.2};
    const double g = fprof_(rho);
    const double gp = fprof_.deriv(rho);
    if (gp == 0.0) return {g, 0.0, 0.0, g};
    // grad rho = (u_i / rho)^(p-1) componentwise (p even).
    const double gx = std::copysign(std::pow(std::fabs(ux) / rho, p_ - 1), ux);
    const double gy = std::copysign(std::pow(std::fabs(uy) / rho, p_ - 1), uy);
    return {g + gp * ux * gx, gp * ux * gy, gp * uy * gx, g + gp * uy * gy};
}

P2 ShearBlock::tau(const P2& v) const {
    const double r = std::hypot(v.x - kCenter, v.y - kCenter);
    return {v.x + eps_d_ * v.y * chi_(r), v.y};
}

P2 ShearBlock::tau_inv(const P2& w) const {
    // x -> w.x - eps y chi(r(x, y)) is a contraction (|d/dx| < 3/4).
    double x = w.x;
    for (int it = 0; it < 200; ++it) {
        const double r = std::hypot(x - kCenter, w.y - kCenter);
        const double nx = w.x - eps_d_ * w.y * chi_(r);
        if (nx == x) break;
        x = nx;
    }
    return {x, w.y};
}

Mat2 ShearBlock::dtau(const P2& v) const {
    const double dx = v.x - kCenter, dy = v.y - kCenter;
    const double r = std::hypot(dx, dy);
    const double c = chi_(r);
    const double cp = chi_.deriv(r);
    if (cp == 0.0 || r == 0.0) return {1.0, eps_d_ * c, 0.0, 1.0};
    return {1.0 + eps_d_ * v.y * cp * dx / r, eps_d_ * (c + v.y * cp * dy / r), 0.0, 1.0};
}

P2 ShearBlock::gbar(const P2& v) const { return psi_inv(tau(psi(v))); }

Mat2 ShearBlock::dgbar(const P2& v) const {
    const P2 a = psi(v);
    const P2 b = tau(a);
    const Mat2 Dpsi = dpsi(v);
    const Mat2 Dtau = dtau(a);
    const Mat2 Dpsi_inv = inverse(dpsi(psi_inv(b)));
    return Dpsi_inv * (Dtau * Dpsi);
}

bool ShearBlock::active(const P2& v) const {
    // Correction support: inside the c1 ball gbar is the identity, and at
    // p-radius >= rho_top it is the exact shear (the shear displacement
    // eps * y cannot push such a point back under c2, where psi acts).  The
    // angular transport circulates flux at every angle, so the support is
    // the full open annulus.
    const double rho = pnorm(v.x - kCenter, v.y - kCenter, p_);
    return rho > c1_ && rho < rho_top_;
}

namespace {

/// Chebyshev interpolant on [a, b] with its exact antiderivative.
struct Cheb {
    double a, b;
    std::vector<double> c;   ///< coefficients of the interpolant
    std::vector<double> ci;  ///< antiderivative coefficients, P(a) = 0

    template <class F>
    Cheb(double a_, double b_, int n, F&& f) : a(a_), b(b_) {
        std::vector<double> fv(n + 1);
        const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
        for (int k = 0; k <= n; ++k)
            fv[k] = f(mid + half * std::cos(M_PI * k / n));
        c.assign(n + 1, 0.0);
        for (int j = 0; j <= n; ++j) {
            double s = 0.5 * (fv[0] + (j % 2 ? -1.0 : 1.0) * fv[n]);
            for (int k = 1; k < n; ++k) s += fv[k] * std::cos(M_PI * j * k / n);
            c[j] = 2.0 * s / n;
        }
        c[0] *= 0.5;
        c[n] *= 0.5;
        // d/dx integral: T_j integrates to (T_{j+1}/(j+1) - T_{j-1}/(j-1))/2.
        ci.assign(n + 2, 0.0);
        for (int j = 1; j <= n + 1; ++j) {
            const double cm = c[j - 1];
            const double cp = (j + 1 <= n) ? c[j + 1] : 0.0;
            ci[j] = half * (cm - cp) / (2.0 * j);
        }
        // T_0 integrates to T_1 (the j=1 recurrence only accounts for half).
        if (n >= 1) ci[1] += 0.5 * half * c[0];
        double p_at_a = 0.0;
        for (int j = 1; j < int(ci.size()); ++j) p_at_a += (j % 2 ? -1.0 : 1.0) * ci[j];
        ci[0] = -p_at_a;
    }

    double clenshaw(const std::vector<double>& co, double x) const {
        const double xh = (2.0 * x - a - b) / (b - a);
        double b1 = 0.0, b2 = 0.0;
        for (int j = int(co.size()) - 1; j >= 1; --j) {
            const double t = 2.0 * xh * b1 - b2 + co[j];
            b2 = b1;
            b1 = t;
        }
        return xh * b1 - b2 + co[0];
    }
    double val(double x) const { return clenshaw(c, x); }
    double anti(double x) const { return clenshaw(ci, x); }

    /// Derivative of the fitted series (coefficient recurrence, then
    /// Clenshaw on the derivative coefficients).
    double dval(double x) const {
        const int n = int(c.size()) - 1;
        std::vector<double> d(std::max(n, 1), 0.0);
        double d2 = 0.0, d1 = 0.0;  // d_{j+2}, d_{j+1}
        for (int j = n - 1; j >= 0; --j) {
            const double dj = d2 + 2.0 * (j + 1) * c[j + 1];
            d[j] = dj;
            d2 = d1;
            d1 = dj;
        }
        d[0] *= 0.5;
        return clenshaw(d, x) * (2.0 / (b - a));
    }

    double tail() const {
        double t = 0.0;
        for (int j = std::max(1, int(c.size()) - 4); j < int(c.size()); ++j)
            t = std::max(t, std::fabs(c[j]));
        return t;
    }
};

/// Adaptive piecewise fit: bisect until the weighted coefficient tail is
/// below tol and the interpolant verifies between every pair of adjacent
/// fit nodes (the interpolation error oscillates with one lobe per node
/// gap, so sparser checks can miss a narrow excursion entirely).  The
/// weight wfn sets how strongly a local fit error propagates to the user
/// of the fit, so tolerances are enforced on |error| * weight.
template <class F, class W>
void fit_adaptive_w(double a, double b, int deg, double tol, double vfac, F&& f,
                    W&& wfn, std::vector<Cheb>& out, int depth = 0) {
    Cheb ch(a, b, deg, f);
    double wmax = 1.0;
    for (int k = 0; k <= 8; ++k)
        wmax = std::max(wmax, std::fabs(wfn(a + (b - a) * k / 8.0)));
    bool ok = ch.tail() * wmax < tol;
    for (int k = 0; k < deg && ok; ++k) {
        const double m0 = std::cos(M_PI * k / deg);
        const double m1 = std::cos(M_PI * (k + 1) / deg);
        const double x = a + (b - a) * (1.0 - 0.5 * (m0 + m1)) * 0.5;
        ok = std::fabs(ch.val(x) - f(x)) * wfn(x) <= vfac * tol;
    }
    if (ok) {
        out.push_back(std::move(ch));
        return;
    }
    if (depth >= 20) {
        char msg[160];
        std::snprintf(msg, sizeof msg,
                      "adaptive Chebyshev fit did not converge on [%.12g, %.12g] "
                      "(tail %.3e, tol %.3e)", a, b, ch.tail(), tol);
        throw MoserDiverged(msg);
    }
    const double m = 0.5 * (a + b);
    fit_adaptive_w(a, m, deg, tol, vfac, f, wfn, out, depth + 1);
    fit_adaptive_w(m, b, deg, tol, vfac, f, wfn, out, depth + 1);
}

template <class F>
void fit_adaptive(double a, double b, int deg, double tol, double vfac, F&& f,
                  std::vector<Cheb>& out) {
    fit_adaptive_w(a, b, deg, tol, vfac, f, [](double) { return 1.0; }, out);
}

/// Contiguous Chebyshev pieces with a global exact antiderivative.
struct PiecewiseCheb {
    std::vector<Cheb> pieces;
    std::vector<double> base;  ///< antiderivative offset at each piece start
    double total = 0.0;

    void finish() {
        base.resize(pieces.size());
        double acc = 0.0;
        for (std::size_t k = 0; k < pieces.size(); ++k) {
            base[k] = acc;
            acc += pieces[k].anti(pieces[k].b);
        }
        total = acc;
    }
    void scale(double s) {
        for (Cheb& ch : pieces) {
            for (double& v : ch.c) v *= s;
            for (double& v : ch.ci) v *= s;
        }
        for (double& v : base) v *= s;
        total *= s;
    }
    std::size_t idx(double x) const {
        std::size_t lo = 0, hi = pieces.size() - 1;
        while (lo < hi) {
            const std::size_t mid = (lo + hi + 1) / 2;
            if (pieces[mid].a <= x)
                lo = mid;
            else
                hi = mid - 1;
        }
        return lo;
    }
    double lo() const { return pieces.front().a; }
    double hi() const { return pieces.back().b; }
    double val(double x) const {
        if (x <= lo() || x >= hi()) return x == lo() || x == hi() ? valc(x) : 0.0;
        return valc(x);
    }
    double valc(double x) const {
        const std::size_t k = idx(std::clamp(x, lo(), hi()));
        return pieces[k].val(std::clamp(x, pieces[k].a, pieces[k].b));
    }
    double anti(double x) const {
        if (x <= lo()) return 0.0;
        if (x >= hi()) return total;
        const std::size_t k = idx(x);
        return base[k] + pieces[k].anti(x);
    }
    double deriv(double x) const {
        const std::size_t k = idx(std::clamp(x, lo(), hi()));
        return pieces[k].dval(std::clamp(x, pieces[k].a, pieces[k].b));
    }
};

}  // namespace

/// Radial flux-density model along one p-ray, fitted in the psi-image
/// radius u (where the shear-window geometry varies slowly) with exact
/// antiderivatives, so mass and density are consistent to round-off.
class ShearRayModel {
  public:
    double theta = 0.0;
    double vx = 0.0, vy = 0.0;  ///< unit p-norm direction
    double q2 = 0.0;            ///< squared Euclid/p-norm ratio of the direction
    PiecewiseCheb fit;          ///< density in u over [F(c1), rho_top]
    double flux = 0.0;          ///< total per-ray flux A(theta)
};

/// Per-block angular data: the per-ray flux profile A(theta) with its
/// exact antiderivative W, the circle geometry q^2(theta) with its
/// antiderivative Q, and the normalized radial plateau bump phi used to
/// spread the circulation across the annulus.
class ShearAngularModel {
  public:
    PiecewiseCheb afit;  ///< A(theta) on [0, 2pi]
    double amean = 0.0;  ///< removed linear drift (numerical residue only)
    PiecewiseCheb qfit;  ///< q^2(theta) on [0, 2pi]
    PiecewiseCheb pfit;  ///< plateau bump phi on [c1, rho_top], unit integral
    double phimax = 0.0;

    double W(double th) const { return afit.anti(th) - amean * th; }
    double Wp(double th) const { return afit.valc(th) - amean; }
    double Q(double th) const { return qfit.anti(th); }
    double q2(double th) const { return qfit.valc(th); }
    double qtot() const { return qfit.total; }
    double phi(double rho) const { return pfit.val(rho); }
    double Phi(double rho) const { return pfit.anti(rho); }
};

std::shared_ptr<const ShearRayModel> ShearBlock::ray(double theta) const {
    {
        std::lock_guard<std::mutex> lk(*mu_);
        if (ray_slot_ && ray_slot_->theta == theta) return ray_slot_;
    }
    auto rm = std::make_shared<ShearRayModel>();
    rm->theta = theta;
    const double cx = std::cos(theta), sy = std::sin(theta);
    const double dp = pnorm(cx, sy, p_);
    rm->vx = cx / dp;
    rm->vy = sy / dp;
    rm->q2 = 1.0 / (dp * dp);
    // f(t) = (1 - det Dgbar(c + t v)) t q^2 makes t q^2 dt dth the area
    // element; fitted against u = F(t) where F is the psi radial profile
    // (the same structures are ~100x steeper in t than in u).
    const auto dens = [&](double u) {
        const double t = fmap_inv(u);
        const double fp = u >= c2_ ? 1.0 : fprof_(t) + t * fprof_.deriv(t);
        const P2 z{kCenter + t * rm->vx, kCenter + t * rm->vy};
        return (1.0 - dgbar(z).det()) * t * rm->q2 / fp;
    };
    // A fit error delta at u shifts the determinant by delta * F'(t(u)), so
    // the steep contraction zone (where F' is large) is fitted tighter.
    const auto fpw = [&](double u) {
        if (u >= c2_) return 1.0;
        const double t = fmap_inv(u);
        return fprof_(t) + t * fprof_.deriv(t);
    };
    fit_adaptive_w(fmap(c1_), c2_, 24, 1e-9, 32.0, dens, fpw, rm->fit.pieces);
    fit_adaptive(c2_, rho_top_, 24, 1e-9, 32.0, dens, rm->fit.pieces);
    rm->fit.finish();
    rm->flux = rm->fit.total;
    std::lock_guard<std::mutex> lk(*mu_);
    ray_slot_ = rm;
    return rm;
}

const ShearAngularModel& ShearBlock::angular() const {
    {
        std::lock_guard<std::mutex> lk(*mu_);
        if (ang_) return *ang_;
    }
    auto am = std::make_shared<ShearAngularModel>();
    // Circle geometry q^2(theta) and its exact antiderivative Q.
    fit_adaptive(0.0, kTwoPi, 24, 1e-13, 64.0,
                 [&](double th) {
                     const double d = pnorm(std::cos(th), std::sin(th), p_);
                     return 1.0 / (d * d);
                 },
                 am->qfit.pieces);
    am->qfit.finish();
    // Plateau bump across the annulus, normalized to unit integral: the
    // flatter the bump, the larger the imbalance the annulus can absorb
    // while the intermediate measure stays positive.
    const double wfull = rho_top_ - c1_, rd = 0.125 * wfull;
    const BumpProfile rise(c1_, c1_ + rd, 0.0, 1.0);
    const BumpProfile fall(rho_top_ - rd, rho_top_, 1.0, 0.0);
    fit_adaptive(c1_, rho_top_, 24, 1e-12, 64.0,
                 [&](double r) { return rise(r) * fall(r); }, am->pfit.pieces);
    am->pfit.finish();
    am->pfit.scale(1.0 / am->pfit.total);
    for (int i = 0; i <= 512; ++i)
        am->phimax = std::max(am->phimax, am->phi(c1_ + wfull * i / 512.0));
    // Per-ray flux profile A(theta).  The radial stage realises exactly the
    // flux W'(theta) of this fit (any per-ray difference is spread over the
    // bump), so the fit tolerance is tied to the volume budget.
    // Pointwise afit error reaches the determinant multiplied by
    // phimax / (R q^2) <= phimax / c1; budget ~0.3 tol_vol with verify
    // factor 8 on the acceptance test.
    const double atol = std::max(1e-13, 0.04 * cfg_.tol_vol * c1_ / am->phimax);
    fit_adaptive(0.0, kTwoPi, 16, atol, 8.0,
                 [&](double th) { return ray(th)->flux; }, am->afit.pieces);
    am->afit.finish();
    am->amean = am->afit.total / kTwoPi;  // exact total flux is zero
    // The angular stage needs the intermediate measure q^2 rho - W' phi to
    // stay positive; check it on a grid resolving the 1/p corner scale.
    const int n = std::max(4096, 64 * p_);
    double worst = 1e300;
    for (int i = 0; i <= n; ++i) {
        const double th = kTwoPi * i / n;
        worst = std::min(worst,
                         am->q2(th) * c1_ - std::fabs(am->Wp(th)) * am->phimax);
    }
    if (worst <= 0.05 * c1_)
        throw MoserDiverged("shear correction: angular transport not positive");
    std::lock_guard<std::mutex> lk(*mu_);
    if (!ang_) ang_ = am;
    return *ang_;
}

struct ShearBlock::Nu1State {
    double rho = 0.0, theta = 0.0;  ///< source p-polar coordinates
    double Theta = 0.0, R = 0.0;    ///< target p-polar coordinates
    double ph = 0.0;                ///< phi(rho)
    double wp = 0.0, adj = 0.0;     ///< W'(Theta) and the spread coefficient
    double denomS = 0.0;            ///< radial CDF derivative at R
    std::shared_ptr<const ShearRayModel> rm;
};

/// Radial stage at angle Theta: transport the fitted image density onto
/// the intermediate measure by matching cumulative ray masses.
double ShearBlock::radial_stage(double rho, double Theta, double* denom) const {
    const ShearAngularModel& am = angular();
    const auto rm = ray(Theta);
    const double wp = am.Wp(Theta);
    const double adj = wp - rm->flux;  // spread so the ray flux is exactly W'
    const auto mlam = [&](double r) { return 0.5 * rm->q2 * (r * r - c1_ * c1_); };
    const auto dmu = [&](double r) {
        const double fp = r >= c2_ ? 1.0 : fprof_(r) + r * fprof_.deriv(r);
        return rm->q2 * r - rm->fit.valc(fmap(r)) * fp - adj * am.phi(r);
    };
    const double tgt = mlam(rho) - wp * am.Phi(rho);
    const double R = solve_mono(
        [&](double r) {
            return mlam(r) - rm->fit.anti(fmap(r)) - adj * am.Phi(r) - tgt;
        },
        dmu, c1_, rho_top_, cfg_.n_steps);
    if (denom) *denom = dmu(R);
    return R;
}

ShearBlock::Nu1State ShearBlock::nu1_solve(double rho, double theta) const {
    const ShearAngularModel& am = angular();
    // Angular stage: transport the per-circle Lebesgue measure q^2 onto the
    // intermediate measure q^2 - phi W'/rho (a circle CDF equation in the
    // antiderivatives Q and W), solved on the periodic lift around theta.
    const double ph = am.phi(rho);
    const double qtot = am.qtot();
    const double qt = am.Q(theta);
    Nu1State st;
    st.rho = rho;
    st.theta = theta;
    st.ph = ph;
    st.Theta = wrap2pi(solve_mono(
        [&](double th) {
            const double k = std::floor(th / kTwoPi);
            const double tw = th - k * kTwoPi;
            return am.Q(tw) + k * qtot - ph * am.W(tw) / rho - qt;
        },
        [&](double th) {
            const double tw = wrap2pi(th);
            return am.q2(tw) - ph * am.Wp(tw) / rho;
        },
        theta - 3.3, theta + 3.3, cfg_.n_steps));
    st.rm = ray(st.Theta);
    st.wp = am.Wp(st.Theta);
    st.adj = st.wp - st.rm->flux;
    st.R = radial_stage(rho, st.Theta, &st.denomS);
    return st;
}

P2 ShearBlock::nu1(const P2& v) const {
    const double ux = v.x - kCenter, uy = v.y - kCenter;
    const double rho = pnorm(ux, uy, p_);
    if (rho <= c1_ || rho >= rho_top_) return v;
    const Nu1State st = nu1_solve(rho, wrap2pi(std::atan2(uy, ux)));
    return {kCenter + st.R * st.rm->vx, kCenter + st.R * st.rm->vy};
}

P2 ShearBlock::nu1_inv(const P2& w) const {
    const double ux = w.x - kCenter, uy = w.y - kCenter;
    const double R = pnorm(ux, uy, p_);
    if (R <= c1_ || R >= rho_top_) return w;
    const ShearAngularModel& am = angular();
    const double Theta = wrap2pi(std::atan2(uy, ux));
    const auto rm = ray(Theta);
    const double wp = am.Wp(Theta);
    const double adj = wp - rm->flux;
    const auto mlam = [&](double r) { return 0.5 * rm->q2 * (r * r - c1_ * c1_); };
    const double lhs = mlam(R) - rm->fit.anti(fmap(R)) - adj * am.Phi(R);
    const double rho = solve_mono(
        [&](double r) { return mlam(r) - wp * am.Phi(r) - lhs; },
        [&](double r) { return rm->q2 * r - wp * am.phi(r); }, c1_, rho_top_,
        cfg_.n_steps);
    // Angular stage inverse: the forward stage sent theta to Theta with
    // Q(theta) = Q(Theta) - phi W(Theta) / rho, so theta is recovered by a
    // plain inversion of the monotone Q.
    const double ph = am.phi(rho);
    const double qtot = am.qtot();
    double target = am.Q(Theta) - ph * am.W(Theta) / rho;
    while (target < 0.0) target += qtot;
    while (target > qtot) target -= qtot;
    const double theta =
        solve_mono([&](double th) { return am.Q(th) - target; },
                   [&](double th) { return am.q2(th); }, 0.0, kTwoPi, cfg_.n_steps);
    const double cx = std::cos(theta), sy = std::sin(theta);
    const double dp = pnorm(cx, sy, p_);
    return {kCenter + rho * cx / dp, kCenter + rho * sy / dp};
}

P2 ShearBlock::fwd(const P2& v) const {
    if (!active(v)) {
        const double rho = pnorm(v.x - kCenter, v.y - kCenter, p_);
        if (rho <= c1_) return v;                          // covers Delta(4 eps)
        return {v.x + eps_d_ * v.y, v.y};                  // covers Delta \ Delta(eps)
    }
    return gbar(nu1(v));
}

Mat2 ShearBlock::jac_fd(const P2& v, double h) const {
    const P2 fx1 = fwd({v.x + h, v.y}), fx0 = fwd({v.x - h, v.y});
    const P2 fy1 = fwd({v.x, v.y + h}), fy0 = fwd({v.x, v.y - h});
    return {(fx1.x - fx0.x) / (2 * h), (fy1.x - fy0.x) / (2 * h),
            (fx1.y - fx0.y) / (2 * h), (fy1.y - fy0.y) / (2 * h)};
}

Mat2 ShearBlock::jac(const P2& v) const {
    if (!active(v)) {
        const double rho = pnorm(v.x - kCenter, v.y - kCenter, p_);
        if (rho <= c1_) return {1, 0, 0, 1};
        return {1, eps_d_, 0, 1};
    }
    // On the correction annulus the derivative of nu1 is assembled by
    // implicit differentiation of the two monotone CDF equations; every
    // ingredient except dR/dTheta is an explicit derivative of the solved
    // equations, so the determinant of the assembled matrix telescopes to
    // the closed-form value independent of that one differenced term.
    const double ux = v.x - kCenter, uy = v.y - kCenter;
    const double rho = pnorm(ux, uy, p_);
    const double theta = wrap2pi(std::atan2(uy, ux));
    const ShearAngularModel& am = angular();
    const Nu1State st = nu1_solve(rho, theta);
    // Angular stage partials.
    const double denomT = am.q2(st.Theta) - st.ph / rho * am.Wp(st.Theta);
    const double Tth = am.q2(theta) / denomT;  // dTheta/dtheta
    const double dphi = am.pfit.deriv(rho);
    const double Trho =
        am.W(st.Theta) * (dphi * rho - st.ph) / (rho * rho) / denomT;
    // Radial stage partials; dR/dTheta crosses ray models, so it is the one
    // differenced ingredient (5-point stencil across nearby rays).
    const double Rrho = (st.rm->q2 * rho - st.wp * st.ph) / st.denomS;
    const double dth = std::min(2e-4, 0.05 / p_);
    const double RTh = (8.0 * (radial_stage(rho, st.Theta + dth, nullptr) -
                               radial_stage(rho, st.Theta - dth, nullptr)) -
                        (radial_stage(rho, st.Theta + 2 * dth, nullptr) -
                         radial_stage(rho, st.Theta - 2 * dth, nullptr))) /
                       (12.0 * dth);
    // Source polar gradients.
    const double gx = std::copysign(std::pow(std::fabs(ux) / rho, p_ - 1), ux);
    const double gy = std::copysign(std::pow(std::fabs(uy) / rho, p_ - 1), uy);
    const double r22 = ux * ux + uy * uy;
    const double thx = -uy / r22, thy = ux / r22;
    // Chain through (rho, theta) -> (R, Theta).
    const double Thx = Trho * gx + Tth * thx, Thy = Trho * gy + Tth * thy;
    const double Rx = Rrho * gx + RTh * Thx, Ry = Rrho * gy + RTh * Thy;
    // Target frame: z = center + R e(Theta) with e = (cos, sin) / dp.
    const double C = std::cos(st.Theta), S = std::sin(st.Theta);
    const double dpv = pnorm(C, S, p_);
    const double dpp = (std::copysign(std::pow(std::fabs(S), p_ - 1), S) * C -
                        std::copysign(std::pow(std::fabs(C), p_ - 1), C) * S) /
                       std::pow(dpv, p_ - 1);
    const double q = 1.0 / dpv, qp = -dpp / (dpv * dpv);
    const double ex = q * C, ey = q * S;
    const double epx = qp * C - q * S, epy = qp * S + q * C;
    const Mat2 Dnu{ex * Rx + st.R * epx * Thx, ex * Ry + st.R * epx * Thy,
                   ey * Rx + st.R * epy * Thx, ey * Ry + st.R * epy * Thy};
    const P2 w{kCenter + st.R * st.rm->vx, kCenter + st.R * st.rm->vy};
    return dgbar(w) * Dnu;
}

P2 ShearBlock::inv(const P2& w) const {
    const double rho = pnorm(w.x - kCenter, w.y - kCenter, p_);
    if (rho <= c1_) return w;  // identity zone maps onto itself
    const P2 cand{w.x - eps_d_ * w.y, w.y};
    if (pnorm(cand.x - kCenter, cand.y - kCenter, p_) >= rho_top_) return cand;
    // Annulus image: invert gbar in closed form, then the two transport
    // stages (each a monotone scalar equation, solved to round-off).
    return nu1_inv(psi_inv(tau_inv(psi(w))));
}

// ---------------------------------------------------------------------------
// RotationBlock

RotationBlock::RotationBlock(const Rat& eps, unsigned i, unsigned j, unsigned m,
                             MoserSolveConfig cfg)
    : eps_(eps),
      eps_d_(to_double(eps)),
      i_(i),
      j_(j),
      m_(m),
      p_(admissible_p(to_double(Rat(1, 2) - 2 * eps), to_double(Rat(1, 2) - eps))),
      c1_(std::pow(2.0, 1.0 / double(p_)) * (0.5 - 2.0 * eps_d_)),
      c2_(0.5 - eps_d_),
      aprof_(c1_, c2_, kPiHalf, 0.0),
      blend_(c1_ / 16.0, c1_, 0.0, 1.0),
      rise_(eps_d_, 2.0 * eps_d_, 0.0, 1.0),
      cfg_(cfg) {
    if (!(eps > 0) || eps >= Rat(1, 4))
        throw std::invalid_argument("RotationBlock: eps must lie in (0, 1/4)");
    if (i == j || i >= m || j >= m || m < 2)
        throw std::invalid_argument("RotationBlock: bad acting plane");
    if (!(c1_ < c2_)) throw std::invalid_argument("RotationBlock: profile radii degenerate");
}

double RotationBlock::dp(double ux, double uy) const { return pnorm(ux, uy, p_); }

double RotationBlock::nrad(double ux, double uy) const {
    const double d = dp(ux, uy);
    const double r2 = std::hypot(ux, uy);
    const double b = blend_(d);
    return b * d + (1.0 - b) * r2;
}

P2 RotationBlock::straighten(const P2& u) const {
    const double r2 = std::hypot(u.x, u.y);
    if (r2 == 0.0) return u;
    const double g = nrad(u.x, u.y) / r2;
    return {g * u.x, g * u.y};
}

double RotationBlock::kappa(const std::vector<double>& x) const {
    double k = 1.0;
    for (unsigned l = 0; l < m_; ++l) {
        if (l == i_ || l == j_) continue;
        const double v = x[l] <= kCenter ? x[l] : 1.0 - x[l];
        k *= rise_(v);
    }
    return k;
}

// --- exact per-circle measure transport -------------------------------------
//
// In straightened coordinates w = S(u) the twist acts on Euclidean circles
// |w| = r.  The pushed-forward volume density m(w) = 1 / det DS(S^-1(w)) is
// independent of kappa and (for even p) invariant under quarter turns.  The
// measure-true twist on the circle of radius r advances the angular CDF
// M_r(theta) = int_0^theta m by (A / (pi/2)) * M_r(pi/2): this is exactly
// area-preserving, reduces to the rigid quarter turn when A = pi/2, and is
// the identity when A = 0.  No correction flow is needed.

double RotationBlock::ray_solve(double dx, double dy, double r) const {
    // Solve nrad(t * dir) = r for t along the unit direction (dx, dy).
    const double k = dp(dx, dy);  // in [2^(1/p - 1/2), 1]
    double lo = r * (1.0 - 1e-13), hi = r / k * (1.0 + 1e-13);
    double t = 0.5 * (lo + hi);
    for (int it = 0; it < 60; ++it) {
        const double ux = t * dx, uy = t * dy;
        const double d = dp(ux, uy);
        const double b = blend_(d), bp = blend_.deriv(d);
        const double N = b * d + (1.0 - b) * t;
        const double f = N - r;
        if (std::fabs(f) < 1e-16 * r) break;
        (f < 0.0 ? lo : hi) = t;
        const double dNdt = ((bp * (d - t) + b) * d + (1.0 - b) * t) / t;
        double tn = t - f / dNdt;
        if (!(tn > lo && tn < hi)) tn = 0.5 * (lo + hi);  // safeguarded step
        if (tn == t) break;
        t = tn;
    }
    return t;
}

P2 RotationBlock::straighten_inv(const P2& w) const {
    const double W = std::hypot(w.x, w.y);
    if (W == 0.0) return w;
    const double dx = w.x / W, dy = w.y / W;
    const double t = ray_solve(dx, dy, W);
    return {t * dx, t * dy};
}

double RotationBlock::angle(double d, double kap) const { return kap * aprof_(d); }

double RotationBlock::density(double r, double th) const {
    const double dx = std::cos(th), dy = std::sin(th);
    const double t = ray_solve(dx, dy, r);
    const double ux = t * dx, uy = t * dy;
    const double d = dp(ux, uy);
    const double b = blend_(d), bp = blend_.deriv(d);
    const double N = b * d + (1.0 - b) * t;
    // S(u) = s(u) u with s = N / rho2; det DS = s (s + u . grad s) and
    // u . grad N = (b'(d)(d - rho2) + b) d + (1 - b) rho2 by homogeneity.
    const double udN = (bp * (d - t) + b) * d + (1.0 - b) * t;
    const double s = N / t;
    const double det = s * (s + (udN - N) / t);
    return 1.0 / det;
}

double RotationBlock::arc_mass(double r, double phi) const {
    // Composite 8-point Gauss-Legendre over [0, phi], panels aligned to the
    // quadrant start so the quadrature error is quarter-periodic.
    static const double gx[8] = {-0.9602898564975363, -0.7966664774136267,
                                 -0.5255324099163290, -0.1834346424956498,
                                 0.1834346424956498,  0.5255324099163290,
                                 0.7966664774136267,  0.9602898564975363};
    static const double gw[8] = {0.1012285362903763, 0.2223810344533745,
                                 0.3137066458778873, 0.3626837833783620,
                                 0.3626837833783620, 0.3137066458778873,
                                 0.2223810344533745, 0.1012285362903763};
    if (phi <= 0.0) return 0.0;
    const int panels = std::max(1, int(std::ceil(phi / 0.1)));
    const double h = phi / panels;
    double total = 0.0;
    for (int pnl = 0; pnl < panels; ++pnl) {
        const double mid = (pnl + 0.5) * h, half = 0.5 * h;
        double acc = 0.0;
        for (int q = 0; q < 8; ++q) acc += gw[q] * density(r, mid + half * gx[q]);
        total += half * acc;
    }
    return total;
}

double RotationBlock::angular_cdf(double r, double th, double q) const {
    const double k = std::floor(th / kPiHalf);
    return k * q + arc_mass(r, th - k * kPiHalf);
}

double RotationBlock::cdf_invert(double r, double target, double q, double guess) const {
    double th = guess;
    for (int it = 0; it < 40; ++it) {
        const double f = angular_cdf(r, th, q) - target;
        if (std::fabs(f) < 1e-14) break;
        double step = f / density(r, th);
        if (step > 0.5) step = 0.5;
        if (step < -0.5) step = -0.5;  // density is O(1); cap for safety
        th -= step;
    }
    return th;
}

P2 RotationBlock::slice_fwd(const P2& v, double kap) const {
    const double ux = v.x - kCenter, uy = v.y - kCenter;
    if (ux == 0.0 && uy == 0.0) return v;
    const double N = nrad(ux, uy);
    const double A = angle(N, kap);
    if (A == 0.0) return v;
    if (kap == 1.0 && A == kPiHalf) {
        // Exact quarter turn (clockwise): (x, y) -> (c + (y - c), c - (x - c)).
        return {kCenter + uy, kCenter - ux};
    }
    const P2 w = straighten({ux, uy});
    const double r = std::hypot(w.x, w.y), th = std::atan2(w.y, w.x);
    const double q = arc_mass(r, kPiHalf);
    const double target = angular_cdf(r, th, q) + (A / kPiHalf) * q;
    const double TH = cdf_invert(r, target, q, th - A);  // clockwise advance
    const P2 uo = straighten_inv({r * std::cos(TH), r * std::sin(TH)});
    return {kCenter + uo.x, kCenter + uo.y};
}

P2 RotationBlock::slice_inv(const P2& v, double kap) const {
    const double ux = v.x - kCenter, uy = v.y - kCenter;
    if (ux == 0.0 && uy == 0.0) return v;
    const double N = nrad(ux, uy);  // invariant under the slice map
    const double A = angle(N, kap);
    if (A == 0.0) return v;
    if (kap == 1.0 && A == kPiHalf) {
        return {kCenter - uy, kCenter + ux};
    }
    const P2 w = straighten({ux, uy});
    const double r = std::hypot(w.x, w.y), th = std::atan2(w.y, w.x);
    const double q = arc_mass(r, kPiHalf);
    const double target = angular_cdf(r, th, q) - (A / kPiHalf) * q;
    const double TH = cdf_invert(r, target, q, th + A);
    const P2 uo = straighten_inv({r * std::cos(TH), r * std::sin(TH)});
    return {kCenter + uo.x, kCenter + uo.y};
}

Region RotationBlock::classify(const std::vector<Rat>& x) const {
    bool all_inner = true;
    for (unsigned l = 0; l < m_; ++l) {
        if (x[l] < eps_ || x[l] > 1 - eps_) return Region::Identity;
        if (x[l] < 2 * eps_ || x[l] > 1 - 2 * eps_) all_inner = false;
    }
    return all_inner ? Region::Rotation : Region::Transition;
}

Region RotationBlock::classify(const std::vector<double>& x) const {
    bool all_inner = true;
    for (unsigned l = 0; l < m_; ++l) {
        if (x[l] < eps_d_ || x[l] > 1.0 - eps_d_) return Region::Identity;
        if (x[l] < 2.0 * eps_d_ || x[l] > 1.0 - 2.0 * eps_d_) all_inner = false;
    }
    return all_inner ? Region::Rotation : Region::Transition;
}

std::vector<double> RotationBlock::fwd(const std::vector<double>& x) const {
    std::vector<double> out = x;
    switch (classify(x)) {
        case Region::Identity: return out;
        case Region::Rotation:
            out[i_] = kCenter + (x[j_] - kCenter);
            out[j_] = kCenter - (x[i_] - kCenter);
            return out;
        default: {
            const double kap = kappa(x);
            const P2 w = slice_fwd({x[i_], x[j_]}, kap);
            out[i_] = w.x;
            out[j_] = w.y;
            return out;
        }
    }
}

std::vector<double> RotationBlock::inv(const std::vector<double>& x) const {
    std::vector<double> out = x;
    switch (classify(x)) {
        case Region::Identity: return out;
        case Region::Rotation:
            out[i_] = kCenter - (x[j_] - kCenter);
            out[j_] = kCenter + (x[i_] - kCenter);
            return out;
        default: {
            const double kap = kappa(x);  // non-acting coords are untouched
            const P2 z = slice_inv({x[i_], x[j_]}, kap);
            const P2 f = slice_fwd(z, kap);
            if (std::fabs(f.x - x[i_]) + std::fabs(f.y - x[j_]) > cfg_.tol_inv)
                throw NewtonDiverged("RotationBlock::inv: round trip failed");
            out[i_] = z.x;
            out[j_] = z.y;
            return out;
        }
    }
}

std::vector<std::vector<double>> RotationBlock::jac(const std::vector<double>& x) const {
    std::vector<std::vector<double>> J(m_, std::vector<double>(m_, 0.0));
    switch (classify(x)) {
        case Region::Identity:
            for (unsigned l = 0; l < m_; ++l) J[l][l] = 1.0;
            return J;
        case Region::Rotation:
            for (unsigned l = 0; l < m_; ++l) J[l][l] = 1.0;
            J[i_][i_] = 0.0;
            J[j_][j_] = 0.0;
            J[i_][j_] = 1.0;
            J[j_][i_] = -1.0;
            return J;
        default: {
            // Richardson-extrapolated central differences (h^2 term removed).
            for (unsigned col = 0; col < m_; ++col) {
                double d2[16], d1[16];
                for (int pass = 0; pass < 2; ++pass) {
                    const double h = pass == 0 ? 2e-6 : 1e-6;
                    std::vector<double> xp = x, xm = x;
                    xp[col] += h;
                    xm[col] -= h;
                    const auto fp = fwd(xp), fm = fwd(xm);
                    for (unsigned row = 0; row < m_; ++row)
                        (pass == 0 ? d2 : d1)[row] = (fp[row] - fm[row]) / (2 * h);
                }
                for (unsigned row = 0; row < m_; ++row)
                    J[row][col] = (4 * d1[row] - d2[row]) / 3;
            }
            return J;
        }
    }
}

}  // namespace conjlab
