/** \file stage_params.cpp
 *  \brief Exact stage arithmetic: divisibility, growth, m_n scan, a_n.
 */
#include "conjlab/stage_params.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

namespace conjlab {

bool validate_q(unsigned n, const Int& q) {
    if (q <= 0) return false;
    const Int d = 260 * ipow(Int(n), 4);
    return q % d == 0;
}

Int growth_lower_bound(unsigned n, unsigned m, const Int& q_n) {
    const unsigned e = (m - 1) * n * n + 3;
    return Int(64) * 260 * ipow(Int(n + 1), 4) * ipow(Int(n), 11) * ipow(q_n, e);
}

MnCertificate compute_m_n(const StageParams& cur, const Int& p_next, const Int& q_next) {
    const unsigned n = cur.n;
    const Int& qn = cur.q;
    // Integer reformulation.  For x_m = m * qn * p'/q' - 1/n we have
    //   dist_Z(x_m) = |balanced((n * s_m - q') mod (n q'))| / (n q'),
    // where s_m = (m * qn * p') mod q'.  The tolerance scales to
    //   n * 260 (n+1)^4 * qn  on the integer side.
    const Int nq = Int(n) * q_next;
    const Int step = (qn * p_next) % q_next;
    const Int tol_int = Int(n) * 260 * ipow(Int(n + 1), 4) * qn;

    MnCertificate cert;
    cert.tol = Rat(260 * ipow(Int(n + 1), 4) * qn, q_next);

    Int s = 0;
    for (Int m = 1; m <= q_next; ++m) {
        s += step;
        if (s >= q_next) s -= q_next;
        Int t = (Int(n) * s - q_next) % nq;
        if (t < 0) t += nq;               // now in [0, nq)
        if (2 * t > nq) t -= nq;          // balanced into (-nq/2, nq/2]
        if (rabs(Rat(t)) <= Rat(tol_int)) {
            cert.m_n = m;
            cert.dist = Rat(t < 0 ? -t : t, nq);
            cert.scanned = m;
            return cert;
        }
    }
    throw std::runtime_error("compute_m_n: no admissible m found (invalid stage pair)");
}

Rat compute_a_n(const StageParams& cur, const Int& m_n, const Int& p_next, const Int& q_next) {
    const unsigned n = cur.n;
    const Int& qn = cur.q;
    const Rat cell(1, qn);
    const Rat raw = Rat(m_n * p_next, q_next) - Rat(1, Int(n) * qn);
    const Rat a = rmod_balanced(raw, cell);
    // Guaranteed bound; |a_n| * q_n equals the distance certified by the
    // m_n scan, which is at most 260 (n+1)^4 q_n / q_{n+1}.
    if (rabs(a) > Rat(260 * ipow(Int(n + 1), 4), q_next))
        throw std::runtime_error("compute_a_n: bound violated (invalid stage pair)");
    return a;
}

StageTransition compute_transition(const StageParams& cur, const Int& p_next, const Int& q_next) {
    StageTransition t;
    t.cert = compute_m_n(cur, p_next, q_next);
    t.a_n = compute_a_n(cur, t.cert.m_n, p_next, q_next);
    return t;
}

SelectionResult select_next_stage(const StageParams& cur, const LiouvilleTarget& target,
                                  const ConvergenceInputs& conv) {
    SelectionResult res;
    const unsigned n = cur.n;
    const Int div = 260 * ipow(Int(n + 1), 4);
    const Int floor_q = growth_lower_bound(n, cur.m, cur.q);

    // Log-domain closeness thresholds (robust when candidate gaps get tiny).
    const double log_c1 = -std::log(2.0 * conv.k * conv.C_k)
                          - double(conv.k + 1) * std::log(conv.norm_H_kp1);
    const double log_c2 = -double(n + 1) * std::log(2.0) - rlog(Rat(cur.q))
                          - std::log(conv.norm_H_1);

    for (std::size_t i = 0; i < target.approximants.size(); ++i) {
        const auto& [pp, qq] = target.approximants[i];
        std::ostringstream line;
        line << "q'=" << qq.str() << ": ";
        if (qq % cur.q != 0) { line << "reject: q_n does not divide q'"; res.audit.push_back(line.str()); continue; }
        if (qq % div != 0)  { line << "reject: 260 (n+1)^4 does not divide q'"; res.audit.push_back(line.str()); continue; }
        if (qq < floor_q)   { line << "reject: growth floor not met"; res.audit.push_back(line.str()); continue; }
        const Rat gap = rabs(Rat(pp, qq) - cur.alpha());
        if (gap == 0)       { line << "reject: candidate equals current rotation"; res.audit.push_back(line.str()); continue; }
        const double lg = rlog(gap);
        if (lg >= log_c1)   { line << "reject: closeness condition 1 fails"; res.audit.push_back(line.str()); continue; }
        if (lg >= log_c2)   { line << "reject: closeness condition 2 fails"; res.audit.push_back(line.str()); continue; }
        if (!(conv.norm_DH_0 < rlog(Rat(qq)) / double(n + 1))) {
            line << "reject: derivative growth condition fails"; res.audit.push_back(line.str()); continue;
        }
        line << "accept";
        res.audit.push_back(line.str());
        res.found = true;
        res.p_next = pp;
        res.q_next = qq;
        res.index = i;
        return res;
    }
    return res;
}

void StageChain::finalize(bool relax_growth) {
    transitions.clear();
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const StageParams& s = stages[i];
        if (!validate_q(s.n, s.q))
            throw std::invalid_argument("stage " + std::to_string(s.n) + ": 260 n^4 must divide q");
        if (i > 0) {
            const StageParams& prev = stages[i - 1];
            if (s.n != prev.n + 1)
                throw std::invalid_argument("stage indices must be consecutive");
            if (s.m != prev.m)
                throw std::invalid_argument("dimension m must be constant along a chain");
            if (s.q % prev.q != 0)
                throw std::invalid_argument("q_n must divide q_{n+1}");
            if (!relax_growth && s.q < growth_lower_bound(prev.n, prev.m, prev.q))
                throw std::invalid_argument("growth floor violated between stages "
                                            + std::to_string(prev.n) + " and " + std::to_string(s.n));
            transitions.push_back(compute_transition(prev, s.p, s.q));
        }
    }
}

std::string chain_to_json(const StageChain& chain) {
    nlohmann::json j;
    j["stages"] = nlohmann::json::array();
    for (const auto& s : chain.stages) {
        j["stages"].push_back({{"n", s.n}, {"m", s.m},
                               {"p", int_to_string(s.p)}, {"q", int_to_string(s.q)}});
    }
    j["transitions"] = nlohmann::json::array();
    for (const auto& t : chain.transitions) {
        j["transitions"].push_back({
            {"m_n", int_to_string(t.cert.m_n)},
            {"dist_num", int_to_string(numerator(t.cert.dist))},
            {"dist_den", int_to_string(denominator(t.cert.dist))},
            {"a_num", int_to_string(numerator(t.a_n))},
            {"a_den", int_to_string(denominator(t.a_n))},
        });
    }
    return j.dump(2);
}

StageChain chain_from_json(const std::string& text, bool relax_growth) {
    const nlohmann::json j = nlohmann::json::parse(text);
    StageChain chain;
    for (const auto& js : j.at("stages")) {
        StageParams s;
        s.n = js.at("n").get<unsigned>();
        s.m = js.at("m").get<unsigned>();
        s.p = int_from_string(js.at("p").get<std::string>());
        s.q = int_from_string(js.at("q").get<std::string>());
        chain.stages.push_back(s);
    }
    chain.finalize(relax_growth);
    return chain;
}

}  // namespace conjlab
