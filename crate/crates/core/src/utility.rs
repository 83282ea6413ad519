//! Channel-utility evaluation: pointwise cellular rates against interfering
//! opponents, and their expectations conditioned on the broadcast threshold.
//!
//! Every semi-infinite integral over a channel gain is mapped to [0, 1) by
//! the exact exponential-measure substitution `h = -ln(1 - u) / lambda` and
//! integrated adaptively to an absolute tolerance. Interference from many
//! opponents is never treated as a multi-dimensional integral: a truncated
//! exponential beyond the threshold is the threshold plus a fresh exponential,
//! so the interference sum collapses to a shifted Erlang variable and each
//! utility evaluation is one nested 1-D quadrature per threshold shift.

use std::f64::consts::LN_2;

use dashmap::DashMap;
use thiserror::Error;

use crate::model::{Policy, SystemParams, UserProfile};
use crate::quad::{adaptive_gk15, QuadError};

const MAX_OUTER_PANELS: u32 = 4000;
const MAX_INNER_PANELS: u32 = 1000;
/// Below this state probability the conditional expectation is undefined.
const VANISHING_PROBABILITY: f64 = 1e-300;
/// Past this opponent count, binomial weights move to log space.
const EXACT_WEIGHT_LIMIT: u32 = 60;

#[derive(Debug, Clone, Error)]
pub enum NumericsError {
    #[error("quadrature did not converge: residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    Quadrature { residual: f64, tol: f64 },
    #[error("integrand returned a non-finite value at {at}")]
    NonFinite { at: f64 },
    #[error("empty conditioning set: {state}-state probability {probability:.3e} vanishes")]
    EmptyConditioningSet { state: &'static str, probability: f64 },
    #[error("{op} did not converge after {iterations} iterations (last iterate {last:.6e})")]
    NoConvergence { op: &'static str, iterations: u32, last: f64 },
    #[error("internal consistency violation: {0}")]
    Consistency(String),
}

impl From<QuadError> for NumericsError {
    fn from(e: QuadError) -> Self {
        match e {
            QuadError::Budget { abs_error, tol, .. } => {
                NumericsError::Quadrature { residual: abs_error, tol }
            }
            QuadError::NonFinite { at } => NumericsError::NonFinite { at },
        }
    }
}

/// Which part of the own-gain law the expectation runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GainCondition {
    /// Gain below the threshold (state 0).
    Bad,
    /// Gain above the threshold (state 1).
    Good,
    /// The full law, no conditioning.
    Unconditional,
}

impl GainCondition {
    pub fn tag(&self) -> &'static str {
        match self {
            GainCondition::Bad => "bad",
            GainCondition::Good => "good",
            GainCondition::Unconditional => "any",
        }
    }
}

/// Who the evaluated user is playing against: a single opponent's policy in
/// the two-user game, or the policy counts of the symmetric game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpponentDescriptor {
    Policy(Policy),
    Counts { cc: u32, wc: u32 },
}

impl std::fmt::Display for OpponentDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OpponentDescriptor::Policy(p) => write!(f, "{p}"),
            OpponentDescriptor::Counts { cc, wc } => write!(f, "c{cc}w{wc}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct ProfileKey {
    lambda: u64,
    beta: u64,
    psi: u64,
}

impl ProfileKey {
    fn of(u: &UserProfile) -> Self {
        Self {
            lambda: u.lambda().to_bits(),
            beta: u.beta().to_bits(),
            psi: u.psi().to_bits(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct CacheKey {
    desc: OpponentDescriptor,
    cond: GainCondition,
    me: ProfileKey,
    opp: Option<ProfileKey>,
    tol: u64,
}

/// One row of a dumped utility table.
#[derive(Debug, Clone)]
pub struct UtilityEntry {
    pub user: u8,
    pub descriptor: OpponentDescriptor,
    pub condition: GainCondition,
    pub value: f64,
}

/// Cached conditional utilities for a scenario, with the tolerance they were
/// computed at.
#[derive(Debug, Clone)]
pub struct UtilityTable {
    pub tol: f64,
    pub entries: Vec<UtilityEntry>,
}

/// Shared evaluator bound to the system constants and a quadrature tolerance.
/// Expectations are memoized; identical queries are answered from the cache,
/// and concurrent duplicate computation is harmless because evaluation is a
/// pure function of the key.
pub struct UtilityEngine {
    sys: SystemParams,
    quad_tol: f64,
    cache: DashMap<CacheKey, f64>,
}

impl UtilityEngine {
    pub fn new(sys: SystemParams, quad_tol: f64) -> Self {
        Self { sys, quad_tol, cache: DashMap::new() }
    }

    pub fn system(&self) -> &SystemParams {
        self.sys_ref()
    }

    fn sys_ref(&self) -> &SystemParams {
        &self.sys
    }

    pub fn quad_tol(&self) -> f64 {
        self.quad_tol
    }

    /// Rate with no interference: `log(1 + p h / sigma^2)`.
    pub fn c_ww(&self, h: f64) -> f64 {
        c_ww(h, &self.sys)
    }

    /// Expected rate against an interference sum distributed as a fixed gain
    /// offset plus an Erlang(m, lambda) variable. `m = 0` is the degenerate
    /// closed form with no quadrature.
    pub fn erlang_interference_expectation(
        &self,
        h: f64,
        m: u32,
        shift: f64,
        lambda: f64,
    ) -> Result<f64, NumericsError> {
        erlang_expectation(h, m, shift, lambda, &self.sys, self.quad_tol)
    }

    /// Pointwise rate against one opponent that holds cellular in both states.
    pub fn c_cc_two_user(&self, h: f64, opp: &UserProfile) -> Result<f64, NumericsError> {
        two_user_c(h, Policy::Cc, opp, &self.sys, self.quad_tol)
    }

    /// Pointwise rate against one opponent that takes cellular only above its
    /// own threshold.
    pub fn c_wc_two_user(&self, h: f64, opp: &UserProfile) -> Result<f64, NumericsError> {
        two_user_c(h, Policy::Wc, opp, &self.sys, self.quad_tol)
    }

    /// Pointwise rate against `k_cc` always-cellular and `k_wc`
    /// threshold-gated opponents drawn from the shared symmetric profile.
    pub fn c_multi(&self, h: f64, k_cc: u32, k_wc: u32, user: &UserProfile) -> Result<f64, NumericsError> {
        let c = MultiCFn::new(k_cc, k_wc, user, &self.sys, self.quad_tol);
        c.eval(h)
    }

    /// Conditional (or unconditional) expectation of the matching pointwise
    /// rate over the user's own gain. Results are cached by
    /// (descriptor, condition, profiles, tolerance).
    pub fn utility(
        &self,
        desc: OpponentDescriptor,
        cond: GainCondition,
        me: &UserProfile,
        opp: Option<&UserProfile>,
    ) -> Result<f64, NumericsError> {
        let key = CacheKey {
            desc,
            cond,
            me: ProfileKey::of(me),
            opp: opp.map(ProfileKey::of),
            tol: self.quad_tol.to_bits(),
        };
        if let Some(v) = self.cache.get(&key) {
            return Ok(*v);
        }
        let value = self.compute_utility(desc, cond, me, opp)?;
        self.cache.insert(key, value);
        Ok(value)
    }

    /// Two-user conditional utility of `me` against the opponent's policy.
    pub fn two_user_utility(
        &self,
        opp_policy: Policy,
        cond: GainCondition,
        me: &UserProfile,
        opp: &UserProfile,
    ) -> Result<f64, NumericsError> {
        self.utility(OpponentDescriptor::Policy(opp_policy), cond, me, Some(opp))
    }

    /// Symmetric-game conditional utility against `[k_cc, k_wc]` opponents.
    pub fn multi_utility(
        &self,
        k_cc: u32,
        k_wc: u32,
        cond: GainCondition,
        user: &UserProfile,
    ) -> Result<f64, NumericsError> {
        self.utility(OpponentDescriptor::Counts { cc: k_cc, wc: k_wc }, cond, user, None)
    }

    fn compute_utility(
        &self,
        desc: OpponentDescriptor,
        cond: GainCondition,
        me: &UserProfile,
        opp: Option<&UserProfile>,
    ) -> Result<f64, NumericsError> {
        let outer_tol = self.quad_tol * 0.5;
        let inner_tol = self.quad_tol * 0.25;
        let value = match desc {
            OpponentDescriptor::Policy(policy) => {
                let opp = opp.expect("two-user descriptor requires an opponent profile");
                state_average(
                    |h| two_user_c(h, policy, opp, &self.sys, inner_tol),
                    cond,
                    me,
                    outer_tol,
                )?
            }
            OpponentDescriptor::Counts { cc, wc } => {
                let c = MultiCFn::new(cc, wc, me, &self.sys, inner_tol);
                state_average(|h| c.eval(h), cond, me, outer_tol)?
            }
        };
        debug_assert!(value > -10.0 * self.quad_tol, "utility {value} far below zero");
        Ok(value.max(0.0))
    }

    /// Dump of every cached-worthy utility for a profile population, in
    /// deterministic order.
    pub fn table_two_user(
        &self,
        a: &UserProfile,
        b: &UserProfile,
    ) -> Result<UtilityTable, NumericsError> {
        let mut entries = Vec::new();
        for (user, me, opp) in [(1u8, a, b), (2u8, b, a)] {
            for policy in Policy::ALL {
                for cond in [GainCondition::Bad, GainCondition::Good, GainCondition::Unconditional] {
                    if cond == GainCondition::Bad && me.psi() == 0.0 {
                        continue;
                    }
                    let value = self.two_user_utility(policy, cond, me, opp)?;
                    entries.push(UtilityEntry {
                        user,
                        descriptor: OpponentDescriptor::Policy(policy),
                        condition: cond,
                        value,
                    });
                }
            }
        }
        Ok(UtilityTable { tol: self.quad_tol, entries })
    }

    /// Symmetric-game table over all opponent counts `k_cc + k_wc <= n - 1`.
    pub fn table_symmetric(&self, user: &UserProfile, n: u32) -> Result<UtilityTable, NumericsError> {
        let mut entries = Vec::new();
        for cc in 0..n {
            for wc in 0..(n - cc) {
                for cond in [GainCondition::Bad, GainCondition::Good, GainCondition::Unconditional] {
                    if cond == GainCondition::Bad && user.psi() == 0.0 {
                        continue;
                    }
                    let value = self.multi_utility(cc, wc, cond, user)?;
                    entries.push(UtilityEntry {
                        user: 0,
                        descriptor: OpponentDescriptor::Counts { cc, wc },
                        condition: cond,
                        value,
                    });
                }
            }
        }
        Ok(UtilityTable { tol: self.quad_tol, entries })
    }
}

fn c_ww(h: f64, sys: &SystemParams) -> f64 {
    if h <= 0.0 || sys.power() == 0.0 {
        return 0.0;
    }
    (sys.power() * h / sys.noise()).ln_1p()
}

/// Transform u in [0, 1) to a gain under Exp(lambda): `h = -ln(1 - u)/lambda`.
fn exp_gain(u: f64, lambda: f64) -> f64 {
    -(-u).ln_1p() / lambda
}

/// Knots for an outer integral whose transformed integrand grows like
/// log(-log(1 - u)) toward u = 1: geometric pre-split of the tail, which is
/// cheaper than letting worst-first refinement rediscover it.
fn tail_knots() -> [f64; 12] {
    [
        0.0,
        0.5,
        0.9,
        0.99,
        0.999,
        0.9999,
        0.99999,
        0.999999,
        1.0 - 1e-7,
        1.0 - 1e-8,
        1.0 - 1e-9,
        1.0,
    ]
}

/// Integrate a fallible integrand over [knots], surfacing the first inner
/// failure instead of the quadrature result.
fn run_outer<G: FnMut(f64) -> Result<f64, NumericsError>>(
    mut integrand: G,
    knots: &[f64],
    tol: f64,
) -> Result<f64, NumericsError> {
    let mut failure: Option<NumericsError> = None;
    let wrapped = |u: f64| match integrand(u) {
        Ok(v) => v,
        Err(e) => {
            if failure.is_none() {
                failure = Some(e);
            }
            0.0
        }
    };
    let out = adaptive_gk15(wrapped, knots, tol, MAX_OUTER_PANELS);
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(out?.value)
}

/// Expectation of a pointwise rate over the user's own gain, conditioned on
/// the channel state (or over the whole law).
fn state_average<F: Fn(f64) -> Result<f64, NumericsError>>(
    c: F,
    cond: GainCondition,
    me: &UserProfile,
    outer_tol: f64,
) -> Result<f64, NumericsError> {
    let lambda = me.lambda();
    let psi = me.psi();
    match cond {
        GainCondition::Bad => {
            // one_minus_alpha computed stably for tiny thresholds
            let one_minus_alpha = -(-lambda * psi).exp_m1();
            if one_minus_alpha < VANISHING_PROBABILITY {
                return Err(NumericsError::EmptyConditioningSet {
                    state: "bad",
                    probability: one_minus_alpha,
                });
            }
            // u = w * (1 - alpha) keeps the normalizer exact in the measure.
            run_outer(
                |w| c(exp_gain(w * one_minus_alpha, lambda)),
                &[0.0, 0.5, 1.0],
                outer_tol,
            )
        }
        GainCondition::Good => {
            let alpha = me.alpha();
            if alpha < VANISHING_PROBABILITY {
                return Err(NumericsError::EmptyConditioningSet { state: "good", probability: alpha });
            }
            // Memorylessness: gain above the threshold is psi plus a fresh
            // exponential, so no 1/alpha normalizer is ever formed.
            run_outer(|u| c(psi + exp_gain(u, lambda)), &tail_knots(), outer_tol)
        }
        GainCondition::Unconditional => {
            run_outer(|u| c(exp_gain(u, lambda)), &tail_knots(), outer_tol)
        }
    }
}

/// Cutoff T with a certified Chernoff tail: an Erlang(m, lambda) mixture has
/// `P(G > T) <= 2^m e^{-lambda T / 2}`, so truncating at the returned point
/// contributes at most `tail_tol` given the integrand bound `f_max`.
fn tail_cutoff(lambda: f64, m_max: u32, f_max: f64, tail_tol: f64) -> f64 {
    let budget = (f_max.max(1e-300) / tail_tol).ln();
    (2.0 / lambda) * (m_max as f64 * LN_2 + budget)
}

/// Initial panel boundaries that straddle the mass of an Erlang mixture with
/// shapes in [m_min, m_max], so no component's bump slips between quadrature
/// nodes. Returns the knots in a fixed buffer along with the count.
fn density_knots(lambda: f64, m_min: u32, m_max: u32, t_cut: f64) -> ([f64; 10], usize) {
    let lo = (m_min as f64).max(1.0) / lambda;
    let hi = (m_max as f64 + 1.0) / lambda;
    let anchors = [
        0.25 * lo,
        0.5 * lo,
        lo,
        0.5 * (lo + hi),
        hi,
        1.5 * hi,
        2.0 * hi,
        3.0 * hi,
    ];
    let mut ks = [0.0f64; 10];
    let mut len = 1;
    let sep = 1e-12 * t_cut;
    for &a in &anchors {
        if a > ks[len - 1] + sep && a < t_cut - sep {
            ks[len] = a;
            len += 1;
        }
    }
    ks[len] = t_cut;
    len += 1;
    (ks, len)
}

/// E[log(1 + p h / (sigma^2 + p (shift + G)))] with G ~ Erlang(m, lambda).
fn erlang_expectation(
    h: f64,
    m: u32,
    shift: f64,
    lambda: f64,
    sys: &SystemParams,
    tol: f64,
) -> Result<f64, NumericsError> {
    let p = sys.power();
    if h <= 0.0 || p == 0.0 {
        return Ok(0.0);
    }
    let denom0 = sys.noise() + p * shift;
    if m == 0 {
        return Ok((p * h / denom0).ln_1p());
    }
    let f0 = (p * h / denom0).ln_1p();
    let tail_tol = 0.25 * tol;
    let quad_tol = 0.75 * tol;
    let t_cut = tail_cutoff(lambda, m, f0, tail_tol);
    if t_cut <= 0.0 {
        return Ok(0.0);
    }
    let (knots, len) = density_knots(lambda, m, m, t_cut);
    let ln_fact_m1 = ln_factorial(m - 1);
    let integrand = move |t: f64| {
        let f = (p * h / (denom0 + p * t)).ln_1p();
        let x = lambda * t;
        let dens = if m <= EXACT_WEIGHT_LIMIT {
            let mut shape = 1.0;
            for i in 1..m {
                shape *= x / i as f64;
            }
            lambda * (-x).exp() * shape
        } else if x > 0.0 {
            lambda * (((m - 1) as f64) * x.ln() - ln_fact_m1 - x).exp()
        } else {
            0.0
        };
        f * dens
    };
    let out = adaptive_gk15(integrand, &knots[..len], quad_tol, MAX_INNER_PANELS)?;
    Ok(out.value.max(0.0))
}

fn ln_factorial(n: u32) -> f64 {
    (2..=n as u64).map(|i| (i as f64).ln()).sum()
}

/// Pointwise rate against a single opponent with the given policy. The
/// opponent interferes with probability beta (always-cellular) or
/// beta * alpha (threshold-gated, with gain at least its own threshold);
/// otherwise the rate is interference-free.
fn two_user_c(
    h: f64,
    opp_policy: Policy,
    opp: &UserProfile,
    sys: &SystemParams,
    tol: f64,
) -> Result<f64, NumericsError> {
    if h <= 0.0 || sys.power() == 0.0 {
        return Ok(0.0);
    }
    let base = c_ww(h, sys);
    let (interference_weight, shift) = match opp_policy {
        Policy::Ww => (0.0, 0.0),
        Policy::Cc => (opp.beta(), 0.0),
        Policy::Wc => (opp.beta() * opp.alpha(), opp.psi()),
    };
    if interference_weight <= 0.0 {
        return Ok(base);
    }
    let interfered = erlang_expectation(h, 1, shift, opp.lambda(), sys, tol)?;
    Ok(interference_weight * interfered + (1.0 - interference_weight) * base)
}

/// Binomial weights over the number of interfering opponents, grouped by the
/// count of threshold-gated interferers `v` (which fixes the gain offset
/// `v * psi`) and the total shape `r + v` of the Erlang sum.
enum WeightTable {
    /// `w[r][v]`, linear scale.
    Exact(Vec<Vec<f64>>),
    /// `ln w[r][v]` plus a log-factorial table up to the largest shape.
    Log { lw: Vec<Vec<f64>>, ln_fact: Vec<f64> },
}

fn binomial_row(n: u32, p: f64) -> Vec<f64> {
    let n_us = n as usize;
    let mut row = vec![0.0; n_us + 1];
    if p <= 0.0 {
        row[0] = 1.0;
        return row;
    }
    if p >= 1.0 {
        row[n_us] = 1.0;
        return row;
    }
    let q = 1.0 - p;
    let mut coeff = 1.0f64;
    for r in 0..=n_us {
        row[r] = coeff * p.powi(r as i32) * q.powi((n_us - r) as i32);
        coeff *= (n_us - r) as f64 / (r as f64 + 1.0);
    }
    row
}

fn ln_binomial_row(n: u32, p: f64, ln_fact: &[f64]) -> Vec<f64> {
    let n_us = n as usize;
    let mut row = vec![f64::NEG_INFINITY; n_us + 1];
    if p <= 0.0 {
        row[0] = 0.0;
        return row;
    }
    if p >= 1.0 {
        row[n_us] = 0.0;
        return row;
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    for r in 0..=n_us {
        let ln_choose = ln_fact[n_us] - ln_fact[r] - ln_fact[n_us - r];
        row[r] = ln_choose + r as f64 * lp + (n_us - r) as f64 * lq;
    }
    row
}

impl WeightTable {
    fn build(k1: u32, k2: u32, beta: f64, alpha: f64) -> Self {
        if k1 + k2 <= EXACT_WEIGHT_LIMIT {
            Self::build_exact(k1, k2, beta, alpha)
        } else {
            Self::build_log(k1, k2, beta, alpha)
        }
    }

    /// Literal expansion: over r demanding always-cellular opponents, q
    /// demanding gated opponents, and v of those q with gain above the
    /// threshold, accumulated by (r, v) since the interference law depends
    /// on the demands only through those two counts.
    fn build_exact(k1: u32, k2: u32, beta: f64, alpha: f64) -> Self {
        let bw1 = binomial_row(k1, beta);
        let bw2 = binomial_row(k2, beta);
        let mut w = vec![vec![0.0f64; k2 as usize + 1]; k1 as usize + 1];
        for (r, &w1) in bw1.iter().enumerate() {
            for (q, &w2) in bw2.iter().enumerate() {
                let bv = binomial_row(q as u32, alpha);
                for (v, &w3) in bv.iter().enumerate() {
                    w[r][v] += w1 * w2 * w3;
                }
            }
        }
        WeightTable::Exact(w)
    }

    /// Log-space form for large counts. The inner sum over q telescopes:
    /// each gated opponent independently interferes with probability
    /// beta * alpha, so the v-marginal is Binomial(k2, beta * alpha).
    /// Verified against the expanded sum in tests.
    fn build_log(k1: u32, k2: u32, beta: f64, alpha: f64) -> Self {
        let max_shape = (k1 + k2) as usize;
        let mut ln_fact = vec![0.0f64; max_shape + 1];
        for i in 1..=max_shape {
            ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
        }
        let row1 = ln_binomial_row(k1, beta, &ln_fact);
        let row2 = ln_binomial_row(k2, beta * alpha, &ln_fact);
        let lw = row1
            .iter()
            .map(|&a| row2.iter().map(|&b| a + b).collect())
            .collect();
        WeightTable::Log { lw, ln_fact }
    }

    /// Weight of the no-interference outcome (r = 0, v = 0).
    fn atom_weight(&self) -> f64 {
        match self {
            WeightTable::Exact(w) => w[0][0],
            WeightTable::Log { lw, .. } => lw[0][0].exp(),
        }
    }

    /// Linear-scale weight at (r, v); log-scale entries below the exp
    /// underflow threshold collapse to zero, which is exactly when they can
    /// no longer matter.
    fn weight(&self, r: usize, v: usize) -> f64 {
        match self {
            WeightTable::Exact(w) => w[r][v],
            WeightTable::Log { lw, .. } => {
                if lw[r][v] > -700.0 {
                    lw[r][v].exp()
                } else {
                    0.0
                }
            }
        }
    }

    fn rows(&self) -> usize {
        match self {
            WeightTable::Exact(w) => w.len(),
            WeightTable::Log { lw, .. } => lw.len(),
        }
    }

    /// Contributing always-cellular counts for a given v, excluding the atom,
    /// plus the column's total mass; `None` when the column carries nothing.
    fn column_profile(&self, v: usize) -> Option<(usize, usize, f64)> {
        let r_start = usize::from(v == 0);
        let rows = self.rows();
        let mut lo = None;
        let mut hi = 0;
        let mut mass = 0.0;
        for r in r_start..rows {
            let w = self.weight(r, v);
            if w > 0.0 {
                if lo.is_none() {
                    lo = Some(r);
                }
                hi = r;
                mass += w;
            }
        }
        lo.map(|lo| (lo, hi, mass))
    }

    /// Shrink [lo, hi] by dropping leading/trailing weights whose cumulative
    /// mass stays within `max_drop` on each side.
    fn trim(&self, v: usize, mut lo: usize, mut hi: usize, max_drop: f64) -> (usize, usize) {
        let mut dropped = 0.0;
        while lo < hi {
            let w = self.weight(lo, v);
            if dropped + w > max_drop {
                break;
            }
            dropped += w;
            lo += 1;
        }
        let mut dropped = 0.0;
        while hi > lo {
            let w = self.weight(hi, v);
            if dropped + w > max_drop {
                break;
            }
            dropped += w;
            hi -= 1;
        }
        (lo, hi)
    }

    /// Mixture density at interference t for column v (excluding the atom),
    /// including the exponential base measure.
    fn mixture_density(&self, v: usize, lambda: f64, t: f64, lo: usize, hi: usize) -> f64 {
        let x = lambda * t;
        match self {
            WeightTable::Exact(w) => {
                let m_start = lo + v;
                let mut shape = 1.0f64;
                for i in 1..m_start {
                    shape *= x / i as f64;
                }
                let mut acc = 0.0;
                let mut m = m_start;
                for r in lo..=hi {
                    acc += w[r][v] * shape;
                    shape *= x / m as f64;
                    m += 1;
                }
                lambda * (-x).exp() * acc
            }
            WeightTable::Log { lw, ln_fact } => {
                if x <= 0.0 {
                    // Only a shape-1 component is nonzero at t = 0.
                    return if lo + v == 1 { lambda * lw[lo][v].exp() } else { 0.0 };
                }
                let lx = x.ln();
                let mut emax = f64::NEG_INFINITY;
                let mut exps = Vec::with_capacity(hi - lo + 1);
                for r in lo..=hi {
                    let m = r + v;
                    let e = lw[r][v] + (m as f64 - 1.0) * lx - ln_fact[m - 1] - x;
                    exps.push(e);
                    if e > emax {
                        emax = e;
                    }
                }
                if emax == f64::NEG_INFINITY {
                    return 0.0;
                }
                let sum: f64 = exps.iter().map(|e| (e - emax).exp()).sum();
                lambda * emax.exp() * sum
            }
        }
    }
}

/// Pointwise symmetric-game rate evaluator: built once per expectation so the
/// binomial weights are shared across all own-gain quadrature nodes.
struct MultiCFn<'a> {
    k2: u32,
    user: &'a UserProfile,
    sys: &'a SystemParams,
    weights: WeightTable,
    /// Per-column (lo, hi, mass), hoisted out of the per-gain evaluation.
    columns: Vec<Option<(usize, usize, f64)>>,
    inner_tol: f64,
}

impl<'a> MultiCFn<'a> {
    fn new(k1: u32, k2: u32, user: &'a UserProfile, sys: &'a SystemParams, inner_tol: f64) -> Self {
        let weights = WeightTable::build(k1, k2, user.beta(), user.alpha());
        let columns = (0..=k2 as usize).map(|v| weights.column_profile(v)).collect();
        Self { k2, user, sys, weights, columns, inner_tol }
    }

    fn eval(&self, h: f64) -> Result<f64, NumericsError> {
        let p = self.sys.power();
        let s2 = self.sys.noise();
        if h <= 0.0 || p == 0.0 {
            return Ok(0.0);
        }
        let lambda = self.user.lambda();
        let psi = self.user.psi();
        let base = (p * h / s2).ln_1p();
        let mut total = self.weights.atom_weight() * base;
        // Per-column error budget: 1/4 for dropping negligible columns and
        // row tails, 1/8 for the certified cutoff, 1/2 for the quadrature.
        let share = self.inner_tol / (self.k2 as f64 + 1.0);
        for v in 0..=self.k2 as usize {
            let Some((lo, hi, mass)) = self.columns[v] else {
                continue;
            };
            let shift = v as f64 * psi;
            let denom0 = s2 + p * shift;
            let f0 = (p * h / denom0).ln_1p();
            if mass * f0 <= 0.25 * share {
                continue;
            }
            let (lo, hi) = self.weights.trim(v, lo, hi, 0.0625 * share / f0);
            let tail_tol = 0.125 * share;
            let quad_tol = 0.5 * share;
            let m_min = (lo + v) as u32;
            let m_max = (hi + v) as u32;
            let t_cut = tail_cutoff(lambda, m_max, f0, tail_tol);
            if t_cut <= 0.0 {
                continue;
            }
            let (knots, len) = density_knots(lambda, m_min, m_max, t_cut);
            let integrand = |t: f64| {
                let f = (p * h / (denom0 + p * t)).ln_1p();
                f * self.weights.mixture_density(v, lambda, t, lo, hi)
            };
            let out = adaptive_gk15(integrand, &knots[..len], quad_tol, MAX_INNER_PANELS)?;
            total += out.value;
        }
        debug_assert!(total.is_finite());
        Ok(total.max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SystemParams, UserProfile, Users};
    use crate::special::expected_log1p_exponential;
    use approx::assert_abs_diff_eq;

    fn sys(p: f64, sigma2: f64, v: f64) -> SystemParams {
        SystemParams::new(p, sigma2, v).unwrap()
    }

    fn user(lambda: f64, beta: f64, psi: f64) -> UserProfile {
        UserProfile::new(lambda, beta, psi).unwrap()
    }

    fn engine() -> UtilityEngine {
        UtilityEngine::new(sys(1.0, 1.0, 0.25), 1e-9)
    }

    #[test]
    fn c_ww_examples() {
        let e = engine();
        assert_eq!(e.c_ww(0.0), 0.0);
        assert_abs_diff_eq!(e.c_ww(std::f64::consts::E - 1.0), 1.0, epsilon = 1e-15);
        let zero_power = UtilityEngine::new(sys(0.0, 1.0, 0.25), 1e-9);
        assert_eq!(zero_power.c_ww(7.0), 0.0);
    }

    #[test]
    fn erlang_degenerate_closed_forms() {
        let e = engine();
        let v = e.erlang_interference_expectation(1.3, 0, 0.0, 0.6).unwrap();
        assert_abs_diff_eq!(v, (1.0f64 + 1.3).ln(), epsilon = 1e-15);
        let v = e.erlang_interference_expectation(1.3, 0, 2.0, 0.6).unwrap();
        assert_abs_diff_eq!(v, (1.3f64 / 3.0).ln_1p(), epsilon = 1e-15);
    }

    #[test]
    fn erlang_single_interferer_matches_closed_form() {
        // E[log(1 + h/(1 + X))], X ~ Exp(l): log(1+h) - e^{l(1+h)}E1(l(1+h)) + e^{l}E1(l)
        // via log(1 + h/(1+x)) = log(1+h+x) - log(1+x).
        let e = engine();
        let (h, l) = (1.0, 0.6);
        let direct = e.erlang_interference_expectation(h, 1, 0.0, l).unwrap();
        let expected = (1.0 + h).ln() + expected_log1p_exponential(1.0 / (1.0 + h), l)
            - expected_log1p_exponential(1.0, l);
        assert_abs_diff_eq!(direct, expected, epsilon = 1e-9);
    }

    #[test]
    fn c_cc_reduces_and_vanishes() {
        let e = engine();
        let opp_no_demand = user(0.6, 0.0, 1.0);
        assert_abs_diff_eq!(
            e.c_cc_two_user(1.7, &opp_no_demand).unwrap(),
            e.c_ww(1.7),
            epsilon = 0.0
        );
        let opp = user(0.6, 1.0, 1.0);
        assert_eq!(e.c_cc_two_user(0.0, &opp).unwrap(), 0.0);
    }

    #[test]
    fn c_wc_degenerations() {
        let e = engine();
        let opp_zero_threshold = user(0.6, 0.5, 0.0);
        let cc = e.c_cc_two_user(1.0, &opp_zero_threshold).unwrap();
        let wc = e.c_wc_two_user(1.0, &opp_zero_threshold).unwrap();
        assert_abs_diff_eq!(cc, wc, epsilon = 1e-12);

        let opp_far = user(0.6, 0.5, 90.0);
        let wc = e.c_wc_two_user(1.0, &opp_far).unwrap();
        assert_abs_diff_eq!(wc, e.c_ww(1.0), epsilon = 1e-9);
    }

    #[test]
    fn c_multi_footnote_reductions() {
        let e = engine();
        let u = user(0.6, 0.5, 1.0);
        assert_abs_diff_eq!(e.c_multi(1.4, 0, 0, &u).unwrap(), e.c_ww(1.4), epsilon = 1e-12);
        assert_abs_diff_eq!(
            e.c_multi(1.4, 1, 0, &u).unwrap(),
            e.c_cc_two_user(1.4, &u).unwrap(),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            e.c_multi(1.4, 0, 1, &u).unwrap(),
            e.c_wc_two_user(1.4, &u).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn c_multi_matches_expanded_reference() {
        // Literal triple sum with one Erlang expectation per (r, q, v) term.
        let e = engine();
        let u = user(0.6, 0.5, 1.0);
        let (k1, k2) = (2u32, 3u32);
        let b = u.beta();
        let a = u.alpha();
        let bw1 = binomial_row(k1, b);
        let bw2 = binomial_row(k2, b);
        for &h in &[0.3, 1.0, 2.7] {
            let mut reference = 0.0;
            for r in 0..=k1 as usize {
                for q in 0..=k2 as usize {
                    let bv = binomial_row(q as u32, a);
                    for v in 0..=q {
                        let weight = bw1[r] * bw2[q] * bv[v];
                        let term = e
                            .erlang_interference_expectation(
                                h,
                                (r + v) as u32,
                                v as f64 * u.psi(),
                                u.lambda(),
                            )
                            .unwrap();
                        reference += weight * term;
                    }
                }
            }
            let grouped = e.c_multi(h, k1, k2, &u).unwrap();
            assert_abs_diff_eq!(grouped, reference, epsilon = 1e-8);
        }
    }

    #[test]
    fn weight_table_branches_agree_and_sum_to_one() {
        for &(k1, k2) in &[(3u32, 5u32), (10, 7), (0, 12)] {
            let (beta, alpha) = (0.37, 0.61);
            let exact = WeightTable::build_exact(k1, k2, beta, alpha);
            let log = WeightTable::build_log(k1, k2, beta, alpha);
            let (WeightTable::Exact(w), WeightTable::Log { lw, .. }) = (&exact, &log) else {
                unreachable!()
            };
            let mut sum = 0.0;
            for r in 0..=k1 as usize {
                for v in 0..=k2 as usize {
                    sum += w[r][v];
                    let other = lw[r][v].exp();
                    assert_abs_diff_eq!(w[r][v], other, epsilon = 1e-12);
                }
            }
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn beta_zero_shortcuts_to_interference_free() {
        let e = engine();
        let u = user(0.6, 0.0, 1.0);
        assert_eq!(e.c_multi(2.0, 4, 5, &u).unwrap(), e.c_ww(2.0));
    }

    #[test]
    fn conditional_at_zero_threshold_equals_unconditional() {
        let e = engine();
        let u = user(0.6, 0.5, 0.0);
        let good = e.multi_utility(1, 1, GainCondition::Good, &u).unwrap();
        let any = e.multi_utility(1, 1, GainCondition::Unconditional, &u).unwrap();
        assert_abs_diff_eq!(good, any, epsilon = 1e-9);
    }

    #[test]
    fn bad_state_below_good_state() {
        let e = engine();
        let u = user(0.6, 0.5, 1.0);
        for (cc, wc) in [(0, 0), (1, 0), (0, 1), (2, 3)] {
            let bad = e.multi_utility(cc, wc, GainCondition::Bad, &u).unwrap();
            let good = e.multi_utility(cc, wc, GainCondition::Good, &u).unwrap();
            assert!(bad < good, "bad {bad} not below good {good} at c{cc}w{wc}");
        }
    }

    #[test]
    fn total_expectation_decomposition() {
        let e = engine();
        let u = user(0.6, 0.5, 1.0);
        for (cc, wc) in [(0, 0), (2, 1), (1, 4)] {
            let bad = e.multi_utility(cc, wc, GainCondition::Bad, &u).unwrap();
            let good = e.multi_utility(cc, wc, GainCondition::Good, &u).unwrap();
            let any = e.multi_utility(cc, wc, GainCondition::Unconditional, &u).unwrap();
            let mix = (1.0 - u.alpha()) * bad + u.alpha() * good;
            assert_abs_diff_eq!(any, mix, epsilon = 2e-9);
        }
    }

    #[test]
    fn empty_conditioning_set_is_an_error() {
        let e = engine();
        let u = user(0.6, 0.5, 0.0);
        let err = e.multi_utility(0, 0, GainCondition::Bad, &u).unwrap_err();
        assert!(matches!(err, NumericsError::EmptyConditioningSet { .. }));
    }

    #[test]
    fn interference_free_unconditional_matches_exponential_integral() {
        // With p = sigma^2 the no-interference expectation is e^l E1(l).
        let e = engine();
        let u = user(0.6, 0.5, 1.0);
        let any = e.multi_utility(0, 0, GainCondition::Unconditional, &u).unwrap();
        let closed = expected_log1p_exponential(1.0, 0.6);
        assert_abs_diff_eq!(any, closed, epsilon = 1e-9);
        assert_abs_diff_eq!(any, 0.827933, epsilon = 1e-5);
    }

    #[test]
    fn pointwise_rates_nondecreasing_in_gain() {
        let e = engine();
        let u = user(0.6, 0.5, 1.0);
        let mut last = -1.0;
        for i in 0..=50 {
            let h = i as f64 * 0.2;
            let c = e.c_multi(h, 2, 2, &u).unwrap();
            assert!(c >= last - 1e-12, "rate decreased at h = {h}");
            if h > 0.0 {
                assert!(c > last, "rate not strictly increasing at h = {h}");
            }
            last = c;
        }
    }

    #[test]
    fn policy_ordering_of_conditional_utilities() {
        let e = engine();
        let me = user(0.6, 0.5, 1.0);
        let opp = user(1.2, 0.5, 0.8);
        for cond in [GainCondition::Bad, GainCondition::Good] {
            let cc = e.two_user_utility(Policy::Cc, cond, &me, &opp).unwrap();
            let wc = e.two_user_utility(Policy::Wc, cond, &me, &opp).unwrap();
            let ww = e.two_user_utility(Policy::Ww, cond, &me, &opp).unwrap();
            assert!(cc < wc && wc < ww, "{cond:?}: {cc} {wc} {ww}");
        }
    }

    #[test]
    fn cache_hits_return_identical_values() {
        let e = engine();
        let u = user(0.6, 0.5, 1.0);
        let a = e.multi_utility(2, 3, GainCondition::Good, &u).unwrap();
        let b = e.multi_utility(2, 3, GainCondition::Good, &u).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn table_invariants_hold() {
        let e = engine();
        let u = user(0.6, 0.5, 1.0);
        let _ = Users::Symmetric(u);
        let table = e.table_symmetric(&u, 4).unwrap();
        assert!(!table.entries.is_empty());
        for entry in &table.entries {
            assert!(entry.value.is_finite() && entry.value >= 0.0);
        }
        for cc in 0..4u32 {
            for wc in 0..(4 - cc) {
                let find = |cond: GainCondition| {
                    table
                        .entries
                        .iter()
                        .find(|t| {
                            t.descriptor == OpponentDescriptor::Counts { cc, wc } && t.condition == cond
                        })
                        .unwrap()
                        .value
                };
                assert!(find(GainCondition::Bad) < find(GainCondition::Good));
            }
        }
    }

    #[test]
    fn large_population_utilities_stay_finite_and_ordered() {
        // Exercises the log-space weight branch.
        let e = engine();
        let u = user(0.6, 0.5, 1.0);
        let small = e.multi_utility(0, 80, GainCondition::Good, &u).unwrap();
        let smaller = e.multi_utility(0, 120, GainCondition::Good, &u).unwrap();
        assert!(small.is_finite() && smaller.is_finite());
        assert!(smaller < small);
    }
}
