/** \file smooth_blocks.hpp
 *  \brief Local volume-preserving building blocks on the unit square/cube.
 *
 *  Two families of smooth, measure-preserving diffeomorphisms are built
 *  here, each with *exact* closed-form behaviour on prescribed regions and a
 *  numerically corrected smooth transition in between:
 *
 *  Shear smoother g_eps (planar):
 *      g_eps = identity on Delta(4 eps) = [4 eps, 1-4 eps]^2,
 *      g_eps = (x, y) -> (x + eps y, y) outside Delta(eps),
 *  constructed as gbar = psi^{-1} o tau o psi followed by a Moser volume
 *  correction nu_1 (g have = gbar o nu_1).  psi is a radial contraction by 1/5
 *  about the centre measured in an even p-norm (level sets stay smooth),
 *  tau is the shear switched off inside a round disk about the centre.
 *
 *  Rotation smoother phi_{eps,i,j} (on [0,1]^m, acting in the (i,j) plane):
 *      exact rotation by pi/2 about (1/2,...,1/2) on [2 eps, 1-2 eps]^m,
 *      exact identity outside [eps, 1-eps]^m,
 *  constructed by conjugating a Euclidean twist (angle profile in the
 *  p-radius d_p) with the radial map that carries p-spheres to round
 *  spheres; every p-sphere is invariant, so the transition band stays inside
 *  the cube.  For m > 2 the angle is scaled by a flat bump in each
 *  non-acting coordinate and the sphere-straightening map blends into the
 *  identity near the slice centre, keeping the map smooth there.  The twist
 *  transports the pushed-forward angular density exactly (via its CDF), so
 *  each invariant circle keeps its measure and the slice map preserves
 *  area; the non-acting rows of the Jacobian are identity rows, so slice
 *  area preservation is volume preservation.
 *
 *  The volume correction nu_1 solves the same normalization problem as the
 *  classical Moser flow -- compose with a map whose Jacobian cancels
 *  det Dgbar -- but is realised as two exact one-dimensional measure
 *  transports in p-polar coordinates (rho, th) about the centre, where the
 *  area element is rho q(th)^2 drho dth:
 *    1. an angular stage th -> Th(rho, th) moving, on each p-circle, the
 *       per-ray flux imbalance A(th) = integral of (1 - det Dgbar) along
 *       the ray (circulated with a normalized plateau bump phi(rho) across
 *       the annulus; the total imbalance vanishes because gbar moves no
 *       net area), and
 *    2. a radial stage rho -> R(rho, Th) matching, on each ray, the
 *       cumulative mass of a fitted density model of det Dgbar.
 *  Both stages are strictly monotone 1-D CDF equations solved by
 *  safeguarded Newton; the composite Jacobian telescopes to
 *  1 / model(nu_1(z)), so the corrected determinant misses 1 only by the
 *  sup error of the density fit.  The density along each ray is fitted by
 *  adaptive piecewise Chebyshev interpolants *in the psi-image radius*
 *  (where the shear window geometry is slow) with exact polynomial
 *  antiderivatives, keeping mass and density consistent to round-off.
 *  Both stages are the identity outside the open annulus, so the
 *  correction never touches the exact regions.  (A time-1 flow of the
 *  textbook primitive omega_0 - map^* omega_0 was tried first: that
 *  primitive is ~1000x larger than the best gauge representative on a thin
 *  annulus and no step count resolves it.)
 */
#pragma once

#include <memory>
#include <mutex>
#include <stdexcept>
#include <vector>

#include "conjlab/rational.hpp"

namespace conjlab {

struct MoserDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NotInjective : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NewtonDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct P2 {
    double x = 0, y = 0;
};

struct Mat2 {
    double a11 = 1, a12 = 0, a21 = 0, a22 = 1;
    double det() const { return a11 * a22 - a12 * a21; }
};

Mat2 operator*(const Mat2& A, const Mat2& B);
Mat2 inverse(const Mat2& A);

/// Smooth monotone all-orders-flat step: value v0 for t <= t0, v1 for
/// t >= t1, s(t) = sig(u)/(sig(u)+sig(1-u)) with sig(u) = exp(-1/u) between.
class BumpProfile {
  public:
    BumpProfile(double t0, double t1, double v0, double v1);
    double operator()(double t) const;
    double deriv(double t) const;
    double t0() const { return t0_; }
    double t1() const { return t1_; }

  private:
    double t0_, t1_, v0_, v1_;
};

struct MoserSolveConfig {
    int n_steps = 128;      ///< iteration budget for the monotone 1-D solves
    double tol_vol = 1e-6;  ///< |det - 1| target for built maps
    double tol_inv = 1e-9;  ///< forward/inverse round-trip target
};

enum class Region { Identity, Shear, Rotation, Transition };

class ShearRayModel;      // per-direction radial flux model (internal)
class ShearAngularModel;  // per-block angular flux/geometry model (internal)

/// Planar shear smoother g_eps.
class ShearBlock {
  public:
    explicit ShearBlock(const Rat& eps, MoserSolveConfig cfg = {});

    double eps() const { return eps_d_; }
    const Rat& eps_rat() const { return eps_; }
    int p() const { return p_; }
    const MoserSolveConfig& config() const { return cfg_; }

    /// Exact-region dispatch with exact rational comparisons.
    Region classify(const Rat& x, const Rat& y) const;
    Region classify(const P2& v) const;

    P2 fwd(const P2& v) const;
    P2 inv(const P2& v) const;
    Mat2 jac(const P2& v) const;  ///< closed form on exact regions, FD elsewhere

    // Building pieces, exposed for the unit tests.
    P2 psi(const P2& v) const;
    P2 psi_inv(const P2& v) const;
    Mat2 dpsi(const P2& v) const;
    P2 tau(const P2& v) const;
    P2 tau_inv(const P2& v) const;
    Mat2 dtau(const P2& v) const;
    P2 gbar(const P2& v) const;
    Mat2 dgbar(const P2& v) const;
    P2 nu1(const P2& v) const;
    P2 nu1_inv(const P2& v) const;

  private:
    struct Nu1State;  // transport solve intermediates (internal)
    Nu1State nu1_solve(double rho, double theta) const;
    double radial_stage(double rho, double Theta, double* denom) const;
    bool active(const P2& v) const;  ///< correction support (open annulus)
    Mat2 jac_fd(const P2& v, double h) const;
    double fmap(double t) const;      ///< psi radial profile F(t) = t fprof(t)
    double fmap_inv(double u) const;  ///< inverse of F
    /// Radial flux model along the unit p-ray at angle theta (memoised,
    /// the transport solvers evaluate one ray many times).
    std::shared_ptr<const ShearRayModel> ray(double theta) const;
    const ShearAngularModel& angular() const;  ///< lazy per-block model

    Rat eps_;
    double eps_d_;
    int p_;                 ///< even p-norm exponent for psi level sets
    double c1_, c2_;        ///< contraction / identity radii of the psi profile
    double rho_top_;        ///< outer bound of the correction support
    BumpProfile fprof_;     ///< radial blend 1/5 -> 1 over [c1, c2]
    BumpProfile chi_;       ///< shear switch over Euclid radius
    MoserSolveConfig cfg_;
    std::shared_ptr<std::mutex> mu_;  ///< guards the lazy caches
    mutable std::shared_ptr<const ShearRayModel> ray_slot_;
    mutable std::shared_ptr<const ShearAngularModel> ang_;
};

/// Rotation smoother phi_{eps,i,j} on [0,1]^m.
class RotationBlock {
  public:
    RotationBlock(const Rat& eps, unsigned i, unsigned j, unsigned m,
                  MoserSolveConfig cfg = {});

    double eps() const { return eps_d_; }
    const Rat& eps_rat() const { return eps_; }
    int p() const { return p_; }
    unsigned axis_i() const { return i_; }
    unsigned axis_j() const { return j_; }
    unsigned dim() const { return m_; }

    Region classify(const std::vector<Rat>& x) const;
    Region classify(const std::vector<double>& x) const;

    std::vector<double> fwd(const std::vector<double>& x) const;
    std::vector<double> inv(const std::vector<double>& x) const;
    /// Full m x m Jacobian: closed form on exact regions, central FD elsewhere.
    std::vector<std::vector<double>> jac(const std::vector<double>& x) const;

    /// Bump product over the non-acting coordinates (1 for m = 2).
    double kappa(const std::vector<double>& x) const;

    // Planar slice map at fixed kappa (centre (1/2,1/2)), for tests.
    P2 slice_fwd(const P2& v, double kap) const;
    P2 slice_inv(const P2& v, double kap) const;

  private:
    double dp(double ux, double uy) const;       ///< p-norm radius
    double nrad(double ux, double uy) const;     ///< blended radius N(u)
    double ray_solve(double dx, double dy, double r) const;  ///< t with N(t dir) = r
    P2 straighten(const P2& u) const;            ///< u -> (N/rho2) u (centred coords)
    P2 straighten_inv(const P2& w) const;
    double angle(double d, double kap) const;    ///< kappa * (pi/2) * profile(d)
    double density(double r, double th) const;   ///< pushed-forward volume density
    double arc_mass(double r, double phi) const; ///< integral of the density on [0, phi]
    double angular_cdf(double r, double th, double q) const;
    double cdf_invert(double r, double target, double q, double guess) const;

    Rat eps_;
    double eps_d_;
    unsigned i_, j_, m_;
    int p_;
    double c1_, c2_;        ///< rotation / identity radii in the p-norm
    BumpProfile aprof_;     ///< angle falloff pi/2 -> 0 over [c1, c2]
    BumpProfile blend_;     ///< sphere-straightening blend 0 -> 1 over [c1/16, c1]
    BumpProfile rise_;      ///< coordinate bump rise over [eps, 2 eps]
    MoserSolveConfig cfg_;
};

}  // namespace conjlab
