/** \file conjugation.hpp
 *  \brief Stagewise conjugation maps on M = S^1 x [0,1]^{m-1}.
 *
 *  Assembles, per stage n, the sectorwise shear conjugation g_n, the
 *  sectorwise rotation conjugation phi_n, their product h_n = g_n o phi_n,
 *  the accumulated conjugation H_n = h_1 o ... o h_n and the stage
 *  diffeomorphism f_n = H_n o R_{alpha_{n+1}} o H_n^{-1}.
 *
 *  Every map evaluates through an exact local-coordinate pipeline: the
 *  combinatorial part of a coordinate (sector index, 1/a- or 1/lambda-cell,
 *  r_1 block index, mu-cell) is resolved in exact rational arithmetic, only
 *  the O(1) local coordinate inside a smooth block is floated, and the
 *  result is re-anchored exactly.  Points whose local coordinates fall in
 *  an exact region of a block (identity / plain shear / quarter turn) never
 *  touch a double at all, so the structural identities (equivariance,
 *  partition-element images) hold to round-off or exactly.
 *
 *  Conventions:
 *  - Coordinates are (theta, r_1, ..., r_{m-1}), theta reduced mod 1.
 *  - Composition g o f means "apply f first"; a ComposedDiffeo stores its
 *    factors in application order (innermost first).
 *  - The planar quarter turn used by the rotation conjugations maps
 *    (x_1, x_j) -> (1 - x_j, x_1); this is the inverse of the RotationBlock
 *    forward map, see build_phi_n's implementation.
 */
#pragma once

#include <memory>
#include <stdexcept>
#include <vector>

#include "conjlab/rational.hpp"
#include "conjlab/smooth_blocks.hpp"
#include "conjlab/stage_params.hpp"

namespace conjlab {

/// Inadmissible construction parameters (failed divisibility, bad sector...).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A local coordinate could not be carried at the required precision.  The
/// pipeline below is fully rational-anchored, so this is never thrown by it;
/// it is part of the public error surface for alternative evaluators.
struct PrecisionLoss : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A point of M = S^1 x [0,1]^{m-1} with exact rational coordinates.
/// Doubles produced inside a smooth-block transition region are re-anchored
/// as exact rationals (a double is a rational), so no structural information
/// is ever lost to rounding at the large denominators of later stages.
struct ManifoldPoint {
    Rat theta;           ///< circle coordinate, reduced to [0,1)
    std::vector<Rat> r;  ///< m-1 strip coordinates in [0,1]

    ManifoldPoint() = default;
    ManifoldPoint(Rat th, std::vector<Rat> rr);

    unsigned dim() const { return static_cast<unsigned>(r.size()) + 1; }
    std::vector<double> as_doubles() const;  ///< (theta, r...) as doubles
};

/// Dense m x m Jacobian in the (theta, r_1, ..., r_{m-1}) coordinate order.
using MatM = std::vector<std::vector<double>>;

MatM mat_identity(unsigned m);
MatM mat_mul(const MatM& A, const MatM& B);  ///< A * B
MatM mat_inverse(const MatM& A);
double mat_det(const MatM& A);

/// A smooth (volume-preserving) diffeomorphism of M with exact-pipeline
/// evaluation.  Immutable after construction; all methods are reentrant.
class ManifoldMap {
  public:
    virtual ~ManifoldMap() = default;
    virtual unsigned dim() const = 0;  ///< m
    virtual ManifoldPoint fwd(const ManifoldPoint& x) const = 0;
    virtual ManifoldPoint inv(const ManifoldPoint& x) const = 0;
    virtual MatM jac(const ManifoldPoint& x) const = 0;
};

using MapPtr = std::shared_ptr<const ManifoldMap>;

/// Exact rotation R_alpha(theta, r) = (theta + alpha, r).
class RotationMap : public ManifoldMap {
  public:
    RotationMap(Rat alpha, unsigned m);
    unsigned dim() const override { return m_; }
    ManifoldPoint fwd(const ManifoldPoint& x) const override;
    ManifoldPoint inv(const ManifoldPoint& x) const override;
    MatM jac(const ManifoldPoint& x) const override;
    const Rat& alpha() const { return alpha_; }

  private:
    Rat alpha_;
    unsigned m_;
};

/// The identity map (H_0, empty compositions).
class IdentityMap : public ManifoldMap {
  public:
    explicit IdentityMap(unsigned m) : m_(m) {}
    unsigned dim() const override { return m_; }
    ManifoldPoint fwd(const ManifoldPoint& x) const override { return x; }
    ManifoldPoint inv(const ManifoldPoint& x) const override { return x; }
    MatM jac(const ManifoldPoint&) const override { return mat_identity(m_); }

  private:
    unsigned m_;
};

/// floor(n * q^sigma) for sigma = num/den, decided by exact integer
/// comparison t^den <= n^den * q^num (never by floating pow).
Int floor_n_q_sigma(unsigned n, const Int& q, const Rat& sigma);

/// Per-sector parameters of g_n: g_{a, b, eps, delta}.
struct GnSectorParams {
    Int a;      ///< theta compression, a_k = n q^{1+(m-1)k(k+1)/2}
    Int b;      ///< shear slope, floor(n q^sigma)
    Rat eps;    ///< 1/(8 n^4)
    Rat delta;  ///< 1/(32 n^4)
};

/// Per-sector parameters of phi_n's factors phi~^{(j)}, j = 2..m.
struct PhiSectorParams {
    std::vector<Int> lambda;  ///< lambda[j-2] = n q^{1+(m-1)k(k-1)/2+(j-2)k}
    Int mu;                   ///< q^k
    Rat eps;                  ///< 1/(60 n^4)
    Rat delta;                ///< 1/(10 n^4)
    Rat eps2;                 ///< 1/(22 n^4)
};

/// Sector bookkeeping for one stage: theta mod 1/q_n splits into n sectors
/// [(k-1)/(n q), k/(n q)], k = 1..n, each with its own block parameters.
class SectorDispatch {
  public:
    SectorDispatch(const StageParams& stage, const Rat& sigma);

    const StageParams& stage() const { return stage_; }
    const Rat& sigma() const { return sigma_; }

    /// Sector index in 1..n.  Exact boundaries theta = k/(n q) mod 1/q go to
    /// the lower (right-closed) sector; both sides agree there by the glued
    /// construction, the convention just fixes determinism.
    unsigned sector_of(const Rat& theta) const;

    GnSectorParams g_params(unsigned k) const;
    PhiSectorParams phi_params(unsigned k) const;

  private:
    StageParams stage_;
    Rat sigma_;
    Int b_;  ///< floor(n q^sigma), shared by all sectors
};

/// Composition with factors stored in application order (factors[0] first).
class ComposedDiffeo : public ManifoldMap {
  public:
    ComposedDiffeo(std::vector<MapPtr> factors, unsigned m);
    unsigned dim() const override { return m_; }
    ManifoldPoint fwd(const ManifoldPoint& x) const override;
    ManifoldPoint inv(const ManifoldPoint& x) const override;
    MatM jac(const ManifoldPoint& x) const override;  ///< chain rule
    const std::vector<MapPtr>& factors() const { return factors_; }

  private:
    std::vector<MapPtr> factors_;
    unsigned m_;
};

/// Formal inverse: fwd and inv swapped, jac(x) = (jac_base(inv(x)))^{-1}.
MapPtr inverse_of(MapPtr base);

/// Composition helper; maps listed outermost-first, i.e. compose({A, B})
/// is A o B (B applied first), matching the usual notation.
MapPtr compose(std::vector<MapPtr> outermost_first);

/// The sectorwise shear conjugation g_n.  For n = 1 the blocked smoother is
/// inadmissible (eps = 1/8 exceeds the g_eps design range (0, 1/16]) and the
/// plain shear g~_b is used instead; see build_g_n's implementation note.
MapPtr build_g_n(const StageParams& stage, const Rat& sigma = Rat(1, 4),
                 MoserSolveConfig cfg = {});

/// The sectorwise rotation conjugation phi_n.
MapPtr build_phi_n(const StageParams& stage, MoserSolveConfig cfg = {});

/// All maps attached to stage chain.stages[idx] (which must have a
/// successor, so alpha_{n+1} and m_n exist).
struct StageMaps {
    MapPtr g;       ///< g_n
    MapPtr phi;     ///< phi_n
    MapPtr h;       ///< h_n = g_n o phi_n
    MapPtr H_prev;  ///< H_{n-1} = h_1 o ... o h_{n-1} (identity for n = 1)
    MapPtr H;       ///< H_n
    MapPtr f;       ///< f_n = H_n o R_{alpha_{n+1}} o H_n^{-1}
    MapPtr Phi;     ///< Phi_n = phi_n o R^{m_n}_{alpha_{n+1}} o phi_n^{-1}
};

StageMaps build_stage_maps(const StageChain& chain, std::size_t idx,
                           const Rat& sigma = Rat(1, 4), MoserSolveConfig cfg = {});

}  // namespace conjlab
