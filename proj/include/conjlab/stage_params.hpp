/** \file stage_params.hpp
 *  \brief Stage bookkeeping for the approximation-by-conjugation scheme.
 *
 *  A stage n is described by a rational rotation number alpha_n = p_n/q_n on
 *  the circle factor of M = S^1 x [0,1]^{m-1}.  The denominators must obey
 *
 *      260 n^4 | q_n,        q_n | q_{n+1},
 *      q_{n+1} >= 64 * 260 * (n+1)^4 * n^11 * q_n^{(m-1) n^2 + 3},
 *
 *  which feeds the closeness and norm estimates used downstream.  From a
 *  consecutive pair (p_n/q_n, p_{n+1}/q_{n+1}) two derived quantities drive
 *  the distribution analysis:
 *
 *    m_n = min { m in [1, q_{n+1}] :
 *                dist_Z( m * q_n * p_{n+1}/q_{n+1} - 1/n )
 *                  <= 260 (n+1)^4 q_n / q_{n+1} },
 *
 *    a_n = ( m_n * p_{n+1}/q_{n+1} - 1/(n q_n) )  mod 1/q_n,
 *
 *  with a_n balanced into (-1/(2 q_n), 1/(2 q_n)].  The minimiser m_n always
 *  exists under the divisibility/growth constraints and the resulting a_n
 *  satisfies |a_n| <= 260 (n+1)^4 / q_{n+1}; both facts are asserted here,
 *  not assumed.  All arithmetic is exact (cpp_int / cpp_rational).
 */
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "conjlab/rational.hpp"

namespace conjlab {

/// One stage of the construction: dimension m, index n, rotation p/q.
struct StageParams {
    unsigned n = 1;   ///< stage index (>= 1)
    unsigned m = 2;   ///< dimension of M = S^1 x [0,1]^{m-1}
    Int p = 0;        ///< numerator of alpha_n
    Int q = 1;        ///< denominator of alpha_n

    Rat alpha() const { return Rat(p, q); }
};

/// Divisibility requirement on a single stage denominator: 260 n^4 | q.
bool validate_q(unsigned n, const Int& q);

/// Lower bound required of q_{n+1} given q_n:
/// 64 * 260 * (n+1)^4 * n^11 * q_n^{(m-1) n^2 + 3}.
Int growth_lower_bound(unsigned n, unsigned m, const Int& q_n);

/// Certificate accompanying a computed m_n: the achieved distance, the
/// tolerance it had to meet, and how many candidates were scanned so a test
/// can independently confirm minimality.
struct MnCertificate {
    Int m_n = 1;       ///< the minimiser
    Rat dist = 0;      ///< dist_Z(m_n * q_n * p'/q' - 1/n), exact
    Rat tol = 0;       ///< 260 (n+1)^4 q_n / q'
    Int scanned = 0;   ///< number of candidates m examined (== m_n on success)
};

/// Exact scan for m_n.  Runs in integer arithmetic: with
/// s_m = (m * q_n * p') mod q', the defining condition is equivalent to
/// |balanced((n s_m - q') mod (n q'))| <= n * 260 (n+1)^4 * q_n.
/// Throws if no m <= q' qualifies (cannot happen for valid stage pairs).
MnCertificate compute_m_n(const StageParams& cur, const Int& p_next, const Int& q_next);

/// Balanced a_n for the pair (cur, next); asserts |a_n| <= 260 (n+1)^4 / q'.
Rat compute_a_n(const StageParams& cur, const Int& m_n, const Int& p_next, const Int& q_next);

/// Derived data for the transition n -> n+1.
struct StageTransition {
    MnCertificate cert;
    Rat a_n = 0;
};

StageTransition compute_transition(const StageParams& cur, const Int& p_next, const Int& q_next);

/// A target rotation number given through a list of rational approximants
/// (p_k/q_k), ordered by increasing q.  The final entry doubles as the proxy
/// for the limit value when measuring closeness.
struct LiouvilleTarget {
    std::vector<std::pair<Int, Int>> approximants;

    Rat value() const {
        if (approximants.empty()) throw std::invalid_argument("LiouvilleTarget: empty");
        return Rat(approximants.back().first, approximants.back().second);
    }
};

/// Norm data of the current conjugacy needed by the closeness conditions.
/// Norms are plain doubles; at the scales the harness runs they are far from
/// overflow, and comparisons happen in the log domain anyway.
struct ConvergenceInputs {
    unsigned k = 1;          ///< smoothness order targeted by condition 1
    double C_k = 1.0;        ///< combinatorial constant of order k
    double norm_H_kp1 = 1.0; ///< |||H_n|||_{k+1}
    double norm_H_1 = 1.0;   ///< |||H_n|||_1
    double norm_DH_0 = 0.0;  ///< ||DH_n||_0
};

/// Outcome of selecting q_{n+1}: the chosen approximant plus a per-candidate
/// audit trail (empty reason string = accepted).
struct SelectionResult {
    bool found = false;
    Int p_next = 0, q_next = 1;
    std::size_t index = 0;                 ///< index into target.approximants
    std::vector<std::string> audit;        ///< one line per examined candidate
};

/// Picks the first approximant of `target` that satisfies, for the candidate
/// alpha' = p'/q':
///   (a) q_n | q'  and  260 (n+1)^4 | q'        (divisibility),
///   (b) q' >= growth_lower_bound(n, m, q_n)    (growth),
///   (c) |alpha' - alpha_n| < 1 / (2 k C_k |||H_n|||_{k+1}^{k+1}),
///   (d) |alpha' - alpha_n| < 1 / (2^{n+1} q_n |||H_n|||_1),
///   (e) ||DH_n||_0 < ln(q') / (n+1).
SelectionResult select_next_stage(const StageParams& cur, const LiouvilleTarget& target,
                                  const ConvergenceInputs& conv);

/// A contiguous block of stages with shared dimension m and the derived
/// transitions between consecutive entries.
struct StageChain {
    std::vector<StageParams> stages;
    std::vector<StageTransition> transitions;  ///< size = stages.size() - 1

    /// Validates divisibility/growth along the chain and (re)computes all
    /// transitions.  Throws std::invalid_argument on a violated constraint
    /// unless `relax_growth` (desk-scale chains keep divisibility but not
    /// the astronomically large growth floor).
    void finalize(bool relax_growth);
};

/// JSON (de)serialization; big integers travel as decimal strings.
std::string chain_to_json(const StageChain& chain);
StageChain chain_from_json(const std::string& text, bool relax_growth = true);

}  // namespace conjlab
