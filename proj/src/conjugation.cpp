#include "conjlab/conjugation.hpp"

#include <algorithm>
#include <cmath>

namespace conjlab {

namespace {

Rat rat_from_double(double v) {
    // Exact: every finite double is a rational.
    return Rat(v);
}

}  // namespace

// ---------------------------------------------------------------------------
// ManifoldPoint & small dense matrices
// ---------------------------------------------------------------------------

ManifoldPoint::ManifoldPoint(Rat th, std::vector<Rat> rr)
    : theta(rfrac(th)), r(std::move(rr)) {
    for (const Rat& c : r)
        if (c < 0 || c > 1)
            throw std::invalid_argument("ManifoldPoint: r coordinate outside [0,1]");
}

std::vector<double> ManifoldPoint::as_doubles() const {
    std::vector<double> out;
    out.reserve(r.size() + 1);
    out.push_back(to_double(theta));
    for (const Rat& c : r) out.push_back(to_double(c));
    return out;
}

MatM mat_identity(unsigned m) {
    MatM J(m, std::vector<double>(m, 0.0));
    for (unsigned i = 0; i < m; ++i) J[i][i] = 1.0;
    return J;
}

MatM mat_mul(const MatM& A, const MatM& B) {
    const std::size_t n = A.size(), p = B[0].size(), k = B.size();
    MatM C(n, std::vector<double>(p, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            const double a = A[i][l];
            if (a == 0.0) continue;
            for (std::size_t j = 0; j < p; ++j) C[i][j] += a * B[l][j];
        }
    return C;
}

MatM mat_inverse(const MatM& A) {
    const std::size_t n = A.size();
    MatM M = A;
    MatM I = mat_identity(static_cast<unsigned>(n));
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::fabs(M[r][col]) > std::fabs(M[piv][col])) piv = r;
        if (M[piv][col] == 0.0) throw std::runtime_error("mat_inverse: singular matrix");
        std::swap(M[piv], M[col]);
        std::swap(I[piv], I[col]);
        const double d = M[col][col];
        for (std::size_t j = 0; j < n; ++j) {
            M[col][j] /= d;
            I[col][j] /= d;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = M[r][col];
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) {
                M[r][j] -= f * M[col][j];
                I[r][j] -= f * I[col][j];
            }
        }
    }
    return I;
}

double mat_det(const MatM& A) {
    const std::size_t n = A.size();
    MatM M = A;
    double det = 1.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::fabs(M[r][col]) > std::fabs(M[piv][col])) piv = r;
        if (M[piv][col] == 0.0) return 0.0;
        if (piv != col) {
            std::swap(M[piv], M[col]);
            det = -det;
        }
        det *= M[col][col];
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = M[r][col] / M[col][col];
            if (f == 0.0) continue;
            for (std::size_t j = col; j < n; ++j) M[r][j] -= f * M[col][j];
        }
    }
    return det;
}

// ---------------------------------------------------------------------------
// Elementary maps
// ---------------------------------------------------------------------------

RotationMap::RotationMap(Rat alpha, unsigned m) : alpha_(rfrac(alpha)), m_(m) {
    if (m < 2) throw ConfigError("RotationMap: dimension must be >= 2");
}

ManifoldPoint RotationMap::fwd(const ManifoldPoint& x) const {
    ManifoldPoint y = x;
    y.theta = rfrac(x.theta + alpha_);
    return y;
}

ManifoldPoint RotationMap::inv(const ManifoldPoint& x) const {
    ManifoldPoint y = x;
    y.theta = rfrac(x.theta - alpha_);
    return y;
}

MatM RotationMap::jac(const ManifoldPoint&) const { return mat_identity(m_); }

// ---------------------------------------------------------------------------
// Integer floor(n q^sigma)
// ---------------------------------------------------------------------------

Int floor_n_q_sigma(unsigned n, const Int& q, const Rat& sigma) {
    if (sigma <= 0 || sigma >= 1) throw ConfigError("floor_n_q_sigma: sigma must be in (0,1)");
    const Int sn = numerator(sigma), sd = denominator(sigma);
    if (sd > 64) throw ConfigError("floor_n_q_sigma: sigma denominator too large");
    const unsigned e_num = sn.convert_to<unsigned>(), e_den = sd.convert_to<unsigned>();
    // Largest t with t^e_den <= n^e_den * q^e_num.
    const Int M = ipow(Int(n), e_den) * ipow(q, e_num);
    Int lo = 1, hi = Int(1) << (static_cast<unsigned>(msb(M)) / e_den + 2);
    while (lo < hi) {  // invariant: lo^e_den <= M < (hi+1)^e_den is restored at exit
        const Int mid = (lo + hi + 1) / 2;
        if (ipow(mid, e_den) <= M)
            lo = mid;
        else
            hi = mid - 1;
    }
    return lo;
}

// ---------------------------------------------------------------------------
// SectorDispatch
// ---------------------------------------------------------------------------

SectorDispatch::SectorDispatch(const StageParams& stage, const Rat& sigma)
    : stage_(stage), sigma_(sigma), b_(floor_n_q_sigma(stage.n, stage.q, sigma)) {
    if (!validate_q(stage.n, stage.q))
        throw ConfigError("SectorDispatch: 260 n^4 does not divide q_n");
    if (stage.m < 2) throw ConfigError("SectorDispatch: dimension must be >= 2");
}

unsigned SectorDispatch::sector_of(const Rat& theta) const {
    const Rat th0 = rmod(theta, Rat(1, stage_.q));
    Int k = rceil(th0 * stage_.n * stage_.q);
    if (k < 1) k = 1;
    if (k > stage_.n) k = stage_.n;
    return k.convert_to<unsigned>();
}

GnSectorParams SectorDispatch::g_params(unsigned k) const {
    if (k < 1 || k > stage_.n) throw ConfigError("g_params: sector out of range");
    const unsigned n = stage_.n, m = stage_.m;
    const unsigned expo = 1 + (m - 1) * (k * (k + 1) / 2);
    const Int n4 = Int(n) * n * n * n;
    GnSectorParams p;
    p.a = Int(n) * ipow(stage_.q, expo);
    p.b = b_;
    p.eps = Rat(1, 8 * n4);
    p.delta = Rat(1, 32 * n4);
    return p;
}

PhiSectorParams SectorDispatch::phi_params(unsigned k) const {
    if (k < 1 || k > stage_.n) throw ConfigError("phi_params: sector out of range");
    const unsigned n = stage_.n, m = stage_.m;
    const Int n4 = Int(n) * n * n * n;
    PhiSectorParams p;
    for (unsigned j = 2; j <= m; ++j) {
        const unsigned expo = 1 + (m - 1) * (k * (k - 1) / 2) + (j - 2) * k;
        p.lambda.push_back(Int(n) * ipow(stage_.q, expo));
    }
    p.mu = ipow(stage_.q, k);
    p.eps = Rat(1, 60 * n4);
    p.delta = Rat(1, 10 * n4);
    p.eps2 = Rat(1, 22 * n4);
    return p;
}

// ---------------------------------------------------------------------------
// g_n
// ---------------------------------------------------------------------------

namespace {

/// Sectorwise blocked shear conjugation.  For n = 1 the smoother g_eps is
/// inadmissible (eps = 1/(8 n^4) = 1/8 > 1/16 breaks the contraction radii
/// 1/2 - 4 eps of its construction), so the map degrades to the plain shear
/// g~_b, which is still smooth, measure-preserving and equivariant; none of
/// the structural statements measured downstream concern stage 1.
class GnMap : public ManifoldMap {
  public:
    GnMap(const StageParams& stage, const Rat& sigma, MoserSolveConfig cfg)
        : disp_(stage, sigma), m_(stage.m) {
        const GnSectorParams p1 = disp_.g_params(1);
        b_ = p1.b;
        eps_ = p1.eps;
        delta_ = p1.delta;
        if (stage.n >= 2) {
            // One smoother serves all sectors: eps does not depend on k.
            block_ = std::make_shared<ShearBlock>(eps_, cfg);
            for (unsigned k = 1; k <= stage.n; ++k) {
                const GnSectorParams p = disp_.g_params(k);
                if (denominator(Rat(p.a * p.b) * p.delta / p.eps) != 1)
                    throw ConfigError("build_g_n: a b delta / eps is not an integer");
            }
        }
    }

    unsigned dim() const override { return m_; }

    ManifoldPoint fwd(const ManifoldPoint& x) const override {
        if (plain(x)) return shear_tilde(x, 1);
        const GnSectorParams p = disp_.g_params(disp_.sector_of(x.theta));
        const Int ba_eps = block_count(p);  // b a / eps
        Int l = rfloor(x.r[0] * ba_eps);
        clamp_l(l, ba_eps);
        const Rat y = x.r[0] * ba_eps - l;
        const Rat xloc = rmod(x.theta, Rat(1, p.a)) * p.a;
        const Rat cell = x.theta - xloc / p.a;  // multiple of 1/a
        Rat xo, yo;
        switch (block_->classify(xloc, y)) {
            case Region::Identity:
                xo = xloc;
                yo = y;
                break;
            case Region::Shear:
                xo = xloc + eps_ * y;
                yo = y;
                break;
            default: {
                const P2 w = block_->fwd({to_double(xloc), to_double(y)});
                xo = rat_from_double(w.x);
                yo = rat_from_double(w.y);
                break;
            }
        }
        ManifoldPoint out = x;
        out.theta = rfrac(cell + (xo + Rat(l) * eps_) / p.a);
        out.r[0] = (yo + l) / ba_eps;
        return out;
    }

    ManifoldPoint inv(const ManifoldPoint& x) const override {
        if (plain(x)) return shear_tilde(x, -1);
        // r_1 is block-preserved, so the g~_b pre-image pins the sector.
        const Rat th0 = rfrac(x.theta - Rat(b_) * x.r[0]);
        const GnSectorParams p = disp_.g_params(disp_.sector_of(th0));
        const Int ba_eps = block_count(p);
        Int l = rfloor(x.r[0] * ba_eps);
        clamp_l(l, ba_eps);
        const Rat yt = x.r[0] * ba_eps - l;
        const Rat base = x.theta - Rat(l) * eps_ / p.a;
        Rat xt = rmod(base, Rat(1, p.a)) * p.a;
        Rat cell = base - xt / p.a;
        // The image of one theta-cell is [eps y, 1 + eps y); lift xt there.
        if (xt < eps_ * yt) {
            xt += 1;
            cell -= Rat(1, p.a);
        }
        Rat xo, yo;
        const Rat xs = xt - eps_ * yt;  // plain-shear candidate pre-image
        if (block_->classify(xs, yt) == Region::Shear) {
            xo = xs;
            yo = yt;
        } else if (block_->classify(xt, yt) == Region::Identity) {
            xo = xt;
            yo = yt;
        } else {
            const P2 z = block_->inv({to_double(xt), to_double(yt)});
            xo = rat_from_double(z.x);
            yo = rat_from_double(z.y);
        }
        ManifoldPoint out = x;
        out.theta = rfrac(cell + xo / p.a);
        out.r[0] = (yo + l) / ba_eps;
        return out;
    }

    MatM jac(const ManifoldPoint& x) const override {
        MatM J = mat_identity(m_);
        if (plain(x)) {
            J[0][1] = to_double(Rat(b_));
            return J;
        }
        const GnSectorParams p = disp_.g_params(disp_.sector_of(x.theta));
        const Int ba_eps = block_count(p);
        Int l = rfloor(x.r[0] * ba_eps);
        clamp_l(l, ba_eps);
        const Rat y = x.r[0] * ba_eps - l;
        const Rat xloc = rmod(x.theta, Rat(1, p.a)) * p.a;
        const Mat2 L = block_->jac({to_double(xloc), to_double(y)});
        const double scale = to_double(Rat(b_) / eps_);
        J[0][0] = L.a11;
        J[0][1] = L.a12 * scale;
        J[1][0] = L.a21 / scale;
        J[1][1] = L.a22;
        return J;
    }

  private:
    bool plain(const ManifoldPoint& x) const {
        if (!block_) return true;  // n = 1 fallback
        for (const Rat& c : x.r)
            if (c < delta_ || c > 1 - delta_) return true;
        return false;
    }

    ManifoldPoint shear_tilde(const ManifoldPoint& x, int dir) const {
        ManifoldPoint out = x;
        out.theta = rfrac(x.theta + dir * Rat(b_) * x.r[0]);
        return out;
    }

    Int block_count(const GnSectorParams& p) const {
        return numerator(Rat(p.b * p.a) / p.eps);  // exact integer b a / eps
    }

    void clamp_l(Int& l, const Int& ba_eps) const {
        const Int lo = numerator(Rat(ba_eps) * delta_);  // b a delta / eps
        const Int hi = ba_eps - lo - 1;
        if (l < lo) l = lo;
        if (l > hi) l = hi;
    }

    SectorDispatch disp_;
    unsigned m_;
    Int b_;
    Rat eps_, delta_;
    std::shared_ptr<ShearBlock> block_;
};

}  // namespace

MapPtr build_g_n(const StageParams& stage, const Rat& sigma, MoserSolveConfig cfg) {
    return std::make_shared<GnMap>(stage, sigma, cfg);
}

// ---------------------------------------------------------------------------
// phi_n
// ---------------------------------------------------------------------------

namespace {

/// Sectorwise rotation conjugation
///   phi_n = phi~^{(m)} o ... o phi~^{(2)},
///   phi~^{(j)} = C_lambda^{-1} o psi_{mu,delta,1,j,eps2} o phi_{eps,1,j} o C_lambda.
///
/// The planar quarter turn phi_{eps,1,j} used here maps (x_1, x_j) to
/// (1 - x_j, x_1); RotationBlock's forward map is the opposite turn
/// (x_1, x_j) -> (x_j, 1 - x_1), so phi is realized as the block inverse
/// and the extended inverse rotation inside psi as the block forward map.
class PhiNMap : public ManifoldMap {
  public:
    PhiNMap(const StageParams& stage, MoserSolveConfig cfg) : disp_(stage, Rat(1, 4)), m_(stage.m) {
        const PhiSectorParams p = disp_.phi_params(1);
        for (unsigned j = 2; j <= m_; ++j) {
            rot_.push_back(std::make_shared<RotationBlock>(p.eps, 0, j - 1, m_, cfg));
            rot2_.push_back(std::make_shared<RotationBlock>(p.eps2, 0, j - 1, m_, cfg));
        }
    }

    unsigned dim() const override { return m_; }

    ManifoldPoint fwd(const ManifoldPoint& x) const override {
        const PhiSectorParams p = disp_.phi_params(disp_.sector_of(x.theta));
        ManifoldPoint cur = x;
        for (unsigned j = 2; j <= m_; ++j) cur = factor_fwd(cur, p, j);
        return cur;
    }

    ManifoldPoint inv(const ManifoldPoint& x) const override {
        const PhiSectorParams p = disp_.phi_params(disp_.sector_of(x.theta));
        ManifoldPoint cur = x;
        for (unsigned j = m_; j >= 2; --j) cur = factor_inv(cur, p, j);
        return cur;
    }

    MatM jac(const ManifoldPoint& x) const override {
        const PhiSectorParams p = disp_.phi_params(disp_.sector_of(x.theta));
        MatM J = mat_identity(m_);
        ManifoldPoint cur = x;
        for (unsigned j = 2; j <= m_; ++j) {
            J = mat_mul(factor_jac(cur, p, j), J);
            cur = factor_fwd(cur, p, j);
        }
        return J;
    }

  private:
    // --- one factor phi~^{(j)} ---------------------------------------------

    std::vector<Rat> lift(const ManifoldPoint& x, const Int& lambda, Rat* cell) const {
        std::vector<Rat> u(m_);
        u[0] = rmod(x.theta * lambda, Rat(1));
        *cell = x.theta - u[0] / lambda;
        for (unsigned i = 1; i < m_; ++i) u[i] = x.r[i - 1];
        return u;
    }

    ManifoldPoint drop(const std::vector<Rat>& u, const Int& lambda, const Rat& cell) const {
        ManifoldPoint out;
        out.theta = rfrac(cell + u[0] / lambda);
        out.r.assign(u.begin() + 1, u.end());
        return out;
    }

    static std::vector<double> as_doubles(const std::vector<Rat>& u) {
        std::vector<double> d(u.size());
        for (std::size_t i = 0; i < u.size(); ++i) d[i] = to_double(u[i]);
        return d;
    }

    static std::vector<Rat> as_rats(const std::vector<double>& d) {
        std::vector<Rat> u(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) u[i] = rat_from_double(d[i]);
        return u;
    }

    /// phi_{eps,1,j}: exact quarter turn / identity, doubles in transition.
    std::vector<Rat> turn(const std::vector<Rat>& u, unsigned j, bool inverse) const {
        const RotationBlock& rb = *rot_[j - 2];
        std::vector<Rat> v = u;
        switch (rb.classify(u)) {
            case Region::Identity: return v;
            case Region::Rotation:
                if (!inverse) {
                    v[0] = 1 - u[j - 1];
                    v[j - 1] = u[0];
                } else {
                    v[0] = u[j - 1];
                    v[j - 1] = 1 - u[0];
                }
                return v;
            default:
                return as_rats(inverse ? rb.fwd(as_doubles(u)) : rb.inv(as_doubles(u)));
        }
    }

    bool in_frame(const std::vector<Rat>& v, const Rat& delta) const {
        for (const Rat& c : v)
            if (c < delta || c > 1 - delta) return false;
        return true;
    }

    struct PsiCells {
        std::vector<Int> cell;
        std::vector<Rat> loc;
    };

    PsiCells psi_split(const std::vector<Rat>& v, const PhiSectorParams& p) const {
        PsiCells s;
        s.cell.resize(m_);
        s.loc.resize(m_);
        const Int top = numerator(Rat(p.mu) * (1 - 2 * p.delta));  // mu (1 - 2 delta)
        for (unsigned i = 0; i < m_; ++i) {
            const Rat t = (v[i] - p.delta) * p.mu;
            Int c = rfloor(t);
            if (c > top - 1) c = top - 1;
            if (c < 0) c = 0;
            s.cell[i] = c;
            s.loc[i] = t - c;
        }
        return s;
    }

    /// psi_{mu,delta,1,j,eps2} (inverse = its inverse map).
    std::vector<Rat> psi(const std::vector<Rat>& v, const PhiSectorParams& p, unsigned j,
                         bool inverse) const {
        if (!in_frame(v, p.delta)) return v;
        const RotationBlock& rb2 = *rot2_[j - 2];
        PsiCells s = psi_split(v, p);
        std::vector<Rat> loc = s.loc;
        switch (rb2.classify(loc)) {
            case Region::Identity: break;
            case Region::Rotation:
                // psi wraps the extended *inverse* rotation phi^{-1}_{eps2,1,j},
                // i.e. (x_1, x_j) -> (x_j, 1 - x_1); inverse undoes it.
                if (!inverse) {
                    const Rat a = loc[0];
                    loc[0] = loc[j - 1];
                    loc[j - 1] = 1 - a;
                } else {
                    const Rat a = loc[0];
                    loc[0] = 1 - loc[j - 1];
                    loc[j - 1] = a;
                }
                break;
            default:
                loc = as_rats(inverse ? rb2.inv(as_doubles(loc)) : rb2.fwd(as_doubles(loc)));
                break;
        }
        std::vector<Rat> out(m_);
        for (unsigned i = 0; i < m_; ++i) out[i] = p.delta + (loc[i] + s.cell[i]) / p.mu;
        return out;
    }

    ManifoldPoint factor_fwd(const ManifoldPoint& x, const PhiSectorParams& p, unsigned j) const {
        const Int& lambda = p.lambda[j - 2];
        Rat cell;
        std::vector<Rat> u = lift(x, lambda, &cell);
        u = turn(u, j, /*inverse=*/false);
        u = psi(u, p, j, /*inverse=*/false);
        return drop(u, lambda, cell);
    }

    ManifoldPoint factor_inv(const ManifoldPoint& x, const PhiSectorParams& p, unsigned j) const {
        const Int& lambda = p.lambda[j - 2];
        Rat cell;
        std::vector<Rat> u = lift(x, lambda, &cell);
        u = psi(u, p, j, /*inverse=*/true);
        u = turn(u, j, /*inverse=*/true);
        return drop(u, lambda, cell);
    }

    MatM factor_jac(const ManifoldPoint& x, const PhiSectorParams& p, unsigned j) const {
        const Int& lambda = p.lambda[j - 2];
        const RotationBlock& rb = *rot_[j - 2];
        const RotationBlock& rb2 = *rot2_[j - 2];
        Rat cell;
        const std::vector<Rat> u = lift(x, lambda, &cell);

        // D phi at u: the quarter turn is the block inverse, so
        // D phi(u) = (D block(phi(u)))^{-1}.
        MatM Jphi;
        std::vector<Rat> v;
        switch (rb.classify(u)) {
            case Region::Identity:
                Jphi = mat_identity(m_);
                v = u;
                break;
            case Region::Rotation: {
                Jphi = MatM(m_, std::vector<double>(m_, 0.0));
                for (unsigned i = 0; i < m_; ++i) Jphi[i][i] = 1.0;
                Jphi[0][0] = 0.0;
                Jphi[j - 1][j - 1] = 0.0;
                Jphi[0][j - 1] = -1.0;
                Jphi[j - 1][0] = 1.0;
                v = turn(u, j, false);
                break;
            }
            default: {
                v = turn(u, j, false);
                Jphi = mat_inverse(rb.jac(as_doubles(v)));
                break;
            }
        }

        // D psi at v: the uniform D_mu conjugation cancels, leaving the
        // block-forward Jacobian at the local cell coordinates.
        MatM Jpsi = mat_identity(m_);
        if (in_frame(v, p.delta)) {
            const PsiCells s = psi_split(v, p);
            Jpsi = rb2.jac(as_doubles(s.loc));
        }

        MatM J = mat_mul(Jpsi, Jphi);
        // Conjugate by C_lambda = diag(lambda, 1, ..., 1).
        const double ld = to_double(Rat(lambda));
        for (unsigned c = 1; c < m_; ++c) J[0][c] /= ld;
        for (unsigned r = 1; r < m_; ++r) J[r][0] *= ld;
        return J;
    }

    SectorDispatch disp_;
    unsigned m_;
    std::vector<std::shared_ptr<RotationBlock>> rot_;   // eps blocks, j = 2..m
    std::vector<std::shared_ptr<RotationBlock>> rot2_;  // eps2 blocks, j = 2..m
};

}  // namespace

MapPtr build_phi_n(const StageParams& stage, MoserSolveConfig cfg) {
    return std::make_shared<PhiNMap>(stage, cfg);
}

// ---------------------------------------------------------------------------
// Composition plumbing
// ---------------------------------------------------------------------------

ComposedDiffeo::ComposedDiffeo(std::vector<MapPtr> factors, unsigned m)
    : factors_(std::move(factors)), m_(m) {
    for (const MapPtr& f : factors_)
        if (!f || f->dim() != m) throw ConfigError("ComposedDiffeo: dimension mismatch");
}

ManifoldPoint ComposedDiffeo::fwd(const ManifoldPoint& x) const {
    ManifoldPoint cur = x;
    for (const MapPtr& f : factors_) cur = f->fwd(cur);
    return cur;
}

ManifoldPoint ComposedDiffeo::inv(const ManifoldPoint& x) const {
    ManifoldPoint cur = x;
    for (auto it = factors_.rbegin(); it != factors_.rend(); ++it) cur = (*it)->inv(cur);
    return cur;
}

MatM ComposedDiffeo::jac(const ManifoldPoint& x) const {
    MatM J = mat_identity(m_);
    ManifoldPoint cur = x;
    for (const MapPtr& f : factors_) {
        J = mat_mul(f->jac(cur), J);
        cur = f->fwd(cur);
    }
    return J;
}

namespace {

class InverseMap : public ManifoldMap {
  public:
    explicit InverseMap(MapPtr base) : base_(std::move(base)) {}
    unsigned dim() const override { return base_->dim(); }
    ManifoldPoint fwd(const ManifoldPoint& x) const override { return base_->inv(x); }
    ManifoldPoint inv(const ManifoldPoint& x) const override { return base_->fwd(x); }
    MatM jac(const ManifoldPoint& x) const override {
        return mat_inverse(base_->jac(base_->inv(x)));
    }

  private:
    MapPtr base_;
};

}  // namespace

MapPtr inverse_of(MapPtr base) { return std::make_shared<InverseMap>(std::move(base)); }

MapPtr compose(std::vector<MapPtr> outermost_first) {
    if (outermost_first.empty()) throw ConfigError("compose: empty factor list");
    const unsigned m = outermost_first.front()->dim();
    std::vector<MapPtr> app(outermost_first.rbegin(), outermost_first.rend());
    return std::make_shared<ComposedDiffeo>(std::move(app), m);
}

// ---------------------------------------------------------------------------
// Stage assembly
// ---------------------------------------------------------------------------

StageMaps build_stage_maps(const StageChain& chain, std::size_t idx, const Rat& sigma,
                           MoserSolveConfig cfg) {
    if (idx + 1 >= chain.stages.size())
        throw ConfigError("build_stage_maps: stage needs a successor for alpha_{n+1}");
    if (chain.transitions.size() + 1 != chain.stages.size())
        throw ConfigError("build_stage_maps: chain not finalized");
    const StageParams& cur = chain.stages[idx];
    const StageParams& next = chain.stages[idx + 1];
    const unsigned m = cur.m;

    StageMaps out;
    out.g = build_g_n(cur, sigma, cfg);
    out.phi = build_phi_n(cur, cfg);
    out.h = compose({out.g, out.phi});

    std::vector<MapPtr> H_app;  // application order: h_n first, then h_{n-1}, ...
    std::vector<MapPtr> Hp_app;
    for (std::size_t k = idx;; --k) {
        MapPtr hk;
        if (k == idx) {
            hk = out.h;
        } else {
            const StageParams& st = chain.stages[k];
            hk = compose({build_g_n(st, sigma, cfg), build_phi_n(st, cfg)});
            Hp_app.push_back(hk);
        }
        H_app.push_back(hk);
        if (k == 0) break;
    }
    out.H = std::make_shared<ComposedDiffeo>(H_app, m);
    out.H_prev = Hp_app.empty() ? MapPtr(std::make_shared<IdentityMap>(m))
                                : MapPtr(std::make_shared<ComposedDiffeo>(Hp_app, m));

    const Rat alpha_next = next.alpha();
    const MapPtr R = std::make_shared<RotationMap>(alpha_next, m);
    out.f = compose({out.H, R, inverse_of(out.H)});

    const Int& m_n = chain.transitions[idx].cert.m_n;
    const MapPtr Rm = std::make_shared<RotationMap>(rfrac(alpha_next * m_n), m);
    out.Phi = compose({out.phi, Rm, inverse_of(out.phi)});
    return out;
}

}  // namespace conjlab
