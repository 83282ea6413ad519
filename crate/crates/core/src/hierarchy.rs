//! Threshold selection for the three coordination regimes: centralized,
//! base-station-led (two-user and symmetric n-user), and fully
//! non-cooperative (two-user threshold fixed point).
//!
//! All root finding is bisection on brackets established by doubling; the
//! conditional utilities are increasing in the threshold, which justifies
//! every monotone search here. "Any threshold works" freedoms are resolved
//! to the smallest feasible threshold plus a tolerance margin, which is
//! deterministic and maximizes the information the broadcast carries.

use rayon::prelude::*;

use crate::equilibrium::{certify_profile, check_no_deviation, EquilibriumCertificate, ProfileKind};
use crate::metrics::{bs_utility_symmetric, bs_utility_two_user, price_of_anarchy, Poa, UsersRef};
use crate::model::{Policy, PolicyStatistics, Scenario, UserProfile};
use crate::utility::{GainCondition, NumericsError, UtilityEngine};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdStatus {
    /// The defining inequalities pin the count strictly inside the range.
    Interior,
    /// Every count up to the cap satisfies the left inequality.
    SaturatedAtMax,
    /// Not even a single opponent-free user clears the rate.
    BelowFirst,
}

#[derive(Debug, Clone, Copy)]
pub struct ThresholdValue {
    pub count: u32,
    pub status: ThresholdStatus,
}

/// The two population thresholds: largest all-cellular count whose
/// unconditional utility still beats the WiFi rate, and the analogous count
/// for the threshold-gated pattern.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdCounts {
    pub k_star: ThresholdValue,
    pub n_star: ThresholdValue,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsiChoice {
    Single(f64),
    Pair(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveStatus {
    Feasible,
    Infeasible(String),
}

impl SolveStatus {
    pub fn is_feasible(&self) -> bool {
        matches!(self, SolveStatus::Feasible)
    }
}

/// One evaluated cell of the candidate table: `k` active users, `l` of them
/// always-cellular, the solved threshold, and the utility it buys.
#[derive(Debug, Clone)]
pub struct PsiCandidate {
    pub k: u32,
    pub l: u32,
    pub psi: Option<f64>,
    pub bs_utility: f64,
    pub excluded: Option<String>,
}

/// A leader's threshold choice plus everything needed to audit it.
#[derive(Debug, Clone)]
pub struct StackelbergOutcome {
    pub psi: PsiChoice,
    pub profile: ProfileKind,
    pub certificate: Option<EquilibriumCertificate>,
    pub bs_utility: f64,
    pub poa: Poa,
    pub status: SolveStatus,
    pub thresholds: Option<ThresholdCounts>,
    pub candidates: Vec<PsiCandidate>,
}

/// Non-cooperative two-user outcome: both users gate at the threshold where
/// their own pointwise gated rate crosses the WiFi rate.
#[derive(Debug, Clone)]
pub struct NoncoopOutcome {
    pub psi: (f64, f64),
    pub residuals: (f64, f64),
    pub iterations: u32,
    pub bs_utility: f64,
    pub poa: Poa,
    pub certificate: Option<EquilibriumCertificate>,
    pub status: SolveStatus,
}

/// Analytic upper bound on the all-cellular population threshold.
#[derive(Debug, Clone, Copy)]
pub struct KStarBound {
    pub k_double_star: u32,
    pub k_plus: Option<f64>,
    pub floor: f64,
    pub degenerate: bool,
}

/// Smallest psi in (0, psi_max] where the increasing map `f` reaches
/// `target`; `None` when even the ceiling falls short.
fn smallest_psi_reaching<F: Fn(f64) -> Result<f64, NumericsError>>(
    f: F,
    target: f64,
    psi_max: f64,
    xtol: f64,
) -> Result<Option<f64>, NumericsError> {
    if f(psi_max)? < target {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0f64, psi_max);
    while hi - lo > xtol {
        let mid = 0.5 * (lo + hi);
        if f(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

/// All users on cellular by fiat: any threshold works, so the scenario's own
/// threshold is reported; the optimum `sum beta` is attained and the price of
/// anarchy is exactly one.
pub fn centralized(scenario: &Scenario) -> StackelbergOutcome {
    let (psi, profile, optimum) = match &scenario.users {
        crate::model::Users::Symmetric(u) => (
            PsiChoice::Single(u.psi()),
            ProfileKind::Symmetric(
                PolicyStatistics::new(scenario.n, 0, scenario.n).expect("all-cellular is valid"),
            ),
            scenario.n as f64 * u.beta(),
        ),
        crate::model::Users::Two(a, b) => (
            PsiChoice::Pair(a.psi(), b.psi()),
            ProfileKind::TwoUser(Policy::Cc, Policy::Cc),
            a.beta() + b.beta(),
        ),
    };
    StackelbergOutcome {
        psi,
        profile,
        certificate: None,
        bs_utility: optimum,
        poa: Poa::Finite(1.0),
        status: SolveStatus::Feasible,
        thresholds: None,
        candidates: Vec::new(),
    }
}

/// Largest count whose defining utility ladder still clears the WiFi rate,
/// found by binary search (the ladder decreases in the count).
fn ladder_threshold<F: Fn(u32) -> Result<f64, NumericsError>>(
    value_at: F,
    v: f64,
    n_max: u32,
) -> Result<ThresholdValue, NumericsError> {
    if value_at(1)? < v {
        return Ok(ThresholdValue { count: 0, status: ThresholdStatus::BelowFirst });
    }
    if value_at(n_max)? >= v {
        return Ok(ThresholdValue { count: n_max, status: ThresholdStatus::SaturatedAtMax });
    }
    let (mut lo, mut hi) = (1u32, n_max);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if value_at(mid)? >= v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(ThresholdValue { count: lo, status: ThresholdStatus::Interior })
}

/// The population thresholds from the unconditional utility ladders
/// `C_{[k-1,0]}(any)` and `C_{[0,k-1]}(any)`, capped at `n_max`. The gated
/// ladder depends on the threshold and is evaluated at the scenario's.
pub fn find_kstar_nstar(
    engine: &UtilityEngine,
    scenario: &Scenario,
    n_max: u32,
) -> Result<ThresholdCounts, NumericsError> {
    let user = scenario
        .symmetric_user()
        .expect("population thresholds require a symmetric scenario");
    let v = scenario.system.wifi_rate();
    let k_star = ladder_threshold(
        |k| engine.multi_utility(k - 1, 0, GainCondition::Unconditional, user),
        v,
        n_max,
    )?;
    let n_star = ladder_threshold(
        |k| engine.multi_utility(0, k - 1, GainCondition::Unconditional, user),
        v,
        n_max,
    )?;
    Ok(ThresholdCounts { k_star, n_star })
}

/// Internal: the candidate threshold for `l` always-cellular and `k - l`
/// gated users, with the exclusion reason when the cell is dead.
fn candidate_cell(
    engine: &UtilityEngine,
    scenario: &Scenario,
    k: u32,
    l: u32,
) -> Result<PsiCandidate, NumericsError> {
    let user = scenario.symmetric_user().expect("symmetric scenario");
    let v = scenario.system.wifi_rate();
    let dead = |excluded: &str| PsiCandidate {
        k,
        l,
        psi: None,
        bs_utility: 0.0,
        excluded: Some(excluded.to_string()),
    };
    if k == 0 {
        return Ok(dead("no active users"));
    }
    // Equilibrium boundary: the binding constraint reaches the WiFi rate.
    // Gated players need their good-state value at [l, k-l-1]; cellular
    // players need their bad-state value at [l-1, k-l]. Either side may be
    // absent at the l = 0 / l = k edges.
    let boundary = |psi: f64| -> Result<f64, NumericsError> {
        let gated = user.with_psi(psi).expect("candidate threshold is valid");
        let mut m = f64::INFINITY;
        if l < k {
            m = m.min(engine.multi_utility(l, k - l - 1, GainCondition::Good, &gated)?);
        }
        if l > 0 {
            m = m.min(engine.multi_utility(l - 1, k - l, GainCondition::Bad, &gated)?);
        }
        Ok(m)
    };
    // Bisect a few times past root_tol so downstream margin checks are not
    // eaten by the boundary slope.
    let xtol = scenario.root_tol / 16.0;
    let Some(psi) = smallest_psi_reaching(boundary, v, scenario.psi_max, xtol)? else {
        return Ok(dead("no threshold reaches the rate"));
    };
    // With idle users present, the profile also needs them content: their
    // good-state value at [l, k-l] must not exceed the rate.
    if k < scenario.n {
        let gated = user.with_psi(psi).expect("candidate threshold is valid");
        let idle_good = engine.multi_utility(l, k - l, GainCondition::Good, &gated)?;
        if idle_good > v + scenario.root_tol {
            return Ok(dead("idle users would join"));
        }
    }
    let stats = PolicyStatistics::new(l, k - l, scenario.n).expect("candidate counts are valid");
    let bs = bs_utility_symmetric(&stats, psi, user);
    Ok(PsiCandidate { k, l, psi: Some(psi), bs_utility: bs, excluded: None })
}

/// The candidate threshold for a (k, l) cell, applying the exclusion rule.
pub fn solve_psi_kl(
    engine: &UtilityEngine,
    scenario: &Scenario,
    k: u32,
    l: u32,
) -> Result<Option<f64>, NumericsError> {
    Ok(candidate_cell(engine, scenario, k, l)?.psi)
}

/// Leader's choice in the symmetric game: drive everyone to cellular when the
/// population is small enough, otherwise scan the candidate table and take
/// the utility-maximizing (k, l) cell (ties: smallest k, then smallest l).
pub fn stackelberg_multi(
    engine: &UtilityEngine,
    scenario: &Scenario,
) -> Result<StackelbergOutcome, NumericsError> {
    let user = scenario
        .symmetric_user()
        .expect("stackelberg_multi requires a symmetric scenario");
    let v = scenario.system.wifi_rate();
    let n = scenario.n;
    let thresholds = find_kstar_nstar(engine, scenario, n)?;
    let k_star = thresholds.k_star.count;
    let n_star = thresholds.n_star.count;

    if n <= k_star {
        let all_cc_bad = |psi: f64| -> Result<f64, NumericsError> {
            let gated = user.with_psi(psi).expect("threshold is valid");
            engine.multi_utility(n - 1, 0, GainCondition::Bad, &gated)
        };
        if let Some(psi) =
            smallest_psi_reaching(all_cc_bad, v + scenario.root_tol, scenario.psi_max, scenario.root_tol)?
        {
            let stats = PolicyStatistics::new(n, 0, n).expect("all-cellular is valid");
            let profile = ProfileKind::Symmetric(stats);
            let adjusted = crate::equilibrium::override_psi(scenario, psi);
            let certificate = certify_profile(&profile, engine, &adjusted)?;
            return Ok(StackelbergOutcome {
                psi: PsiChoice::Single(psi),
                profile,
                certificate,
                bs_utility: n as f64 * user.beta(),
                poa: Poa::Finite(1.0),
                status: SolveStatus::Feasible,
                thresholds: Some(thresholds),
                candidates: Vec::new(),
            });
        }
        // The rate sits exactly on the all-cellular boundary; fall through to
        // the candidate scan.
    }

    let k_hi = n.min(n_star);
    let cells: Vec<(u32, u32)> =
        (k_star..=k_hi).flat_map(|k| (0..=k).map(move |l| (k, l))).collect();
    let candidates: Vec<PsiCandidate> = cells
        .par_iter()
        .map(|&(k, l)| candidate_cell(engine, scenario, k, l))
        .collect::<Result<_, _>>()?;

    let mut best: Option<&PsiCandidate> = None;
    for cand in &candidates {
        if cand.psi.is_some() && best.map(|b| cand.bs_utility > b.bs_utility).unwrap_or(true) {
            best = Some(cand);
        }
    }

    let Some(best) = best.filter(|b| b.bs_utility > 0.0) else {
        return Ok(StackelbergOutcome {
            psi: PsiChoice::Single(user.psi()),
            profile: ProfileKind::Symmetric(
                PolicyStatistics::new(0, 0, n).expect("all-wifi is valid"),
            ),
            certificate: None,
            bs_utility: 0.0,
            poa: Poa::Infinite,
            status: SolveStatus::Infeasible(
                "no candidate cell admits an equilibrium threshold".into(),
            ),
            thresholds: Some(thresholds),
            candidates,
        });
    };

    let psi = best.psi.expect("selected candidate has a threshold");
    let stats = PolicyStatistics::new(best.l, best.k - best.l, n).expect("candidate counts valid");
    let profile = ProfileKind::Symmetric(stats);
    let adjusted = crate::equilibrium::override_psi(scenario, psi);
    let deviation = check_no_deviation(&profile, engine, &adjusted)?;
    if !deviation.pass {
        return Err(NumericsError::Consistency(format!(
            "chosen candidate k={} l={} fails the deviation check with margin {:.3e}",
            best.k, best.l, deviation.min_margin
        )));
    }
    let certificate = certify_profile(&profile, engine, &adjusted)?;
    let bs = best.bs_utility;
    Ok(StackelbergOutcome {
        psi: PsiChoice::Single(psi),
        profile,
        certificate,
        bs_utility: bs,
        poa: price_of_anarchy(bs, UsersRef::Symmetric(user), n),
        status: SolveStatus::Feasible,
        thresholds: Some(thresholds),
        candidates,
    })
}

/// Helper: both users' profiles with overridden thresholds.
fn pair_with(
    users: (&UserProfile, &UserProfile),
    psi1: f64,
    psi2: f64,
) -> (UserProfile, UserProfile) {
    (
        users.0.with_psi(psi1).expect("threshold is valid"),
        users.1.with_psi(psi2).expect("threshold is valid"),
    )
}

/// One candidate solution of the two-user leader problem.
struct TwoUserPlan {
    psi: (f64, f64),
    profile: (Policy, Policy),
    objective: f64,
}

/// Leader's choice in the two-user game.
pub fn stackelberg_two_user(
    engine: &UtilityEngine,
    scenario: &Scenario,
) -> Result<StackelbergOutcome, NumericsError> {
    let users = scenario
        .two_users()
        .expect("stackelberg_two_user requires a two-user scenario");
    let v = scenario.system.wifi_rate();
    let root_tol = scenario.root_tol;
    let psi_max = scenario.psi_max;
    let optimum = users.0.beta() + users.1.beta();

    let finish = |plan: TwoUserPlan| -> Result<StackelbergOutcome, NumericsError> {
        let (a, b) = pair_with(users, plan.psi.0, plan.psi.1);
        let mut adjusted = *scenario;
        adjusted.users = crate::model::Users::Two(a, b);
        let profile = ProfileKind::TwoUser(plan.profile.0, plan.profile.1);
        let certificate = certify_profile(&profile, engine, &adjusted)?;
        let bs = bs_utility_two_user(plan.profile.0, plan.profile.1, (&a, &b));
        Ok(StackelbergOutcome {
            psi: PsiChoice::Pair(plan.psi.0, plan.psi.1),
            profile,
            certificate,
            bs_utility: bs,
            poa: price_of_anarchy(bs, UsersRef::Two(&a, &b), 2),
            status: SolveStatus::Feasible,
            thresholds: None,
            candidates: Vec::new(),
        })
    };

    // Regime 1: both users keep beating the rate unconditionally, so pushing
    // the thresholds up makes all-cellular an equilibrium. The always-cellular
    // descriptor does not depend on either threshold, so the search decouples.
    let cc_inf_1 = engine.two_user_utility(Policy::Cc, GainCondition::Unconditional, users.0, users.1)?;
    let cc_inf_2 = engine.two_user_utility(Policy::Cc, GainCondition::Unconditional, users.1, users.0)?;
    if cc_inf_1 > v && cc_inf_2 > v {
        let solve_one = |me: &UserProfile, opp: &UserProfile| {
            smallest_psi_reaching(
                |psi| {
                    let gated = me.with_psi(psi).expect("threshold is valid");
                    engine.two_user_utility(Policy::Cc, GainCondition::Bad, &gated, opp)
                },
                v + root_tol,
                psi_max,
                root_tol,
            )
        };
        if let (Some(p1), Some(p2)) = (solve_one(users.0, users.1)?, solve_one(users.1, users.0)?) {
            return finish(TwoUserPlan {
                psi: (p1, p2),
                profile: (Policy::Cc, Policy::Cc),
                objective: optimum,
            });
        }
    }

    let mut plans: Vec<TwoUserPlan> = Vec::new();

    // Regime 2a: both users gated. For a fixed psi1 the smallest psi2 keeping
    // both good-state values at the rate is found by bisection; the objective
    // decreases in both thresholds, so that boundary point is the best for
    // that psi1. A geometric grid over psi1 plus golden refinement finds the
    // best feasible pair.
    {
        let both_wc = |psi1: f64| -> Result<Option<(f64, f64)>, NumericsError> {
            let good_floor = |psi2: f64| -> Result<f64, NumericsError> {
                let (a, b) = pair_with(users, psi1, psi2);
                let g1 = engine.two_user_utility(Policy::Wc, GainCondition::Good, &a, &b)?;
                let g2 = engine.two_user_utility(Policy::Wc, GainCondition::Good, &b, &a)?;
                Ok(g1.min(g2))
            };
            let Some(psi2) = smallest_psi_reaching(good_floor, v + root_tol, psi_max, root_tol)?
            else {
                return Ok(None);
            };
            let (a, b) = pair_with(users, psi1, psi2);
            let b1 = engine.two_user_utility(Policy::Wc, GainCondition::Bad, &a, &b)?;
            let b2 = engine.two_user_utility(Policy::Wc, GainCondition::Bad, &b, &a)?;
            if b1 > v + root_tol || b2 > v + root_tol {
                return Ok(None);
            }
            let objective =
                users.0.beta() * (-users.0.lambda() * psi1).exp() + users.1.beta() * (-users.1.lambda() * psi2).exp();
            Ok(Some((psi2, objective)))
        };

        let objective_at = |psi1: f64| -> Result<f64, NumericsError> {
            Ok(both_wc(psi1)?.map(|(_, obj)| obj).unwrap_or(f64::NEG_INFINITY))
        };

        let grid: Vec<f64> = (0..28)
            .map(|i| psi_max * 1e-6 * (1e6f64).powf(i as f64 / 27.0))
            .collect();
        let mut best: Option<(usize, f64, f64, f64)> = None; // (idx, psi1, psi2, obj)
        for (idx, &psi1) in grid.iter().enumerate() {
            if let Some((psi2, obj)) = both_wc(psi1)? {
                if best.map(|(_, _, _, b)| obj > b).unwrap_or(true) {
                    best = Some((idx, psi1, psi2, obj));
                }
            }
        }
        if let Some((idx, psi1_best, psi2_best, obj_best)) = best {
            // Golden-section refinement around the best grid point.
            let lo = if idx == 0 { grid[0] * 0.5 } else { grid[idx - 1] };
            let hi = if idx + 1 == grid.len() { psi_max } else { grid[idx + 1] };
            let inv_phi = 0.618_033_988_749_894_8;
            let (mut a, mut b) = (lo, hi);
            let mut x1 = b - inv_phi * (b - a);
            let mut x2 = a + inv_phi * (b - a);
            let mut f1 = objective_at(x1)?;
            let mut f2 = objective_at(x2)?;
            for _ in 0..24 {
                if f1 >= f2 {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - inv_phi * (b - a);
                    f1 = objective_at(x1)?;
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + inv_phi * (b - a);
                    f2 = objective_at(x2)?;
                }
            }
            let refined = 0.5 * (a + b);
            let mut chosen = (psi1_best, psi2_best, obj_best);
            if let Some((psi2, obj)) = both_wc(refined)? {
                if obj > chosen.2 {
                    chosen = (refined, psi2, obj);
                }
            }
            plans.push(TwoUserPlan {
                psi: (chosen.0, chosen.1),
                profile: (Policy::Wc, Policy::Wc),
                objective: chosen.2,
            });
        }
    }

    // Regime 2b: one user held on cellular, the other gated. The gated user's
    // threshold is pushed as low as both coupled constraints allow; the
    // cellular user's own threshold only needs to clear its bad-state value.
    for cc_first in [true, false] {
        let (cc_user, wc_user) = if cc_first { (users.0, users.1) } else { (users.1, users.0) };
        let feasible_floor = |psi_wc: f64| -> Result<f64, NumericsError> {
            // Gated user's good-state value against the cellular user does
            // not depend on the cellular user's threshold; the cellular
            // user's bad-state value is checked at the most permissive own
            // threshold.
            let gated = wc_user.with_psi(psi_wc).expect("threshold is valid");
            let g = engine.two_user_utility(Policy::Cc, GainCondition::Good, &gated, cc_user)?;
            let cc_at_cap = cc_user.with_psi(psi_max).expect("threshold is valid");
            let b = engine.two_user_utility(Policy::Wc, GainCondition::Bad, &cc_at_cap, &gated)?;
            Ok(g.min(b))
        };
        let Some(psi_wc) = smallest_psi_reaching(feasible_floor, v + root_tol, psi_max, root_tol)?
        else {
            continue;
        };
        let gated = wc_user.with_psi(psi_wc).expect("threshold is valid");
        let Some(psi_cc) = smallest_psi_reaching(
            |psi| {
                let me = cc_user.with_psi(psi).expect("threshold is valid");
                engine.two_user_utility(Policy::Wc, GainCondition::Bad, &me, &gated)
            },
            v + root_tol,
            psi_max,
            root_tol,
        )?
        else {
            continue;
        };
        // Gated user must still prefer WiFi below its threshold.
        let wc_bad = engine.two_user_utility(
            Policy::Cc,
            GainCondition::Bad,
            &gated,
            &cc_user.with_psi(psi_cc).expect("threshold is valid"),
        )?;
        if wc_bad > v + root_tol {
            continue;
        }
        let objective = cc_user.beta() + wc_user.beta() * (-wc_user.lambda() * psi_wc).exp();
        let (psi1, psi2, profile) = if cc_first {
            (psi_cc, psi_wc, (Policy::Cc, Policy::Wc))
        } else {
            (psi_wc, psi_cc, (Policy::Wc, Policy::Cc))
        };
        plans.push(TwoUserPlan { psi: (psi1, psi2), profile, objective });
    }

    let best = plans
        .into_iter()
        .max_by(|a, b| a.objective.partial_cmp(&b.objective).expect("objectives are finite"));
    match best {
        Some(plan) => finish(plan),
        None => Ok(StackelbergOutcome {
            psi: PsiChoice::Pair(psi_max, psi_max),
            profile: ProfileKind::TwoUser(Policy::Ww, Policy::Ww),
            certificate: None,
            bs_utility: 0.0,
            poa: Poa::Infinite,
            status: SolveStatus::Infeasible(
                "neither the gated-pair nor the mixed problem admits a threshold below the ceiling"
                    .into(),
            ),
            thresholds: None,
            candidates: Vec::new(),
        }),
    }
}

/// Alternating best-response for the fully non-cooperative two-user stage:
/// each user's threshold solves its own pointwise gated rate to the WiFi
/// rate, given the opponent's current threshold.
pub fn noncooperative_two_user(
    engine: &UtilityEngine,
    scenario: &Scenario,
) -> Result<NoncoopOutcome, NumericsError> {
    let users = scenario
        .two_users()
        .expect("noncooperative_two_user requires a two-user scenario");
    let v = scenario.system.wifi_rate();
    let root_tol = scenario.root_tol;
    let psi_max = scenario.psi_max;

    // Own pointwise value at the candidate threshold, against the opponent's
    // gated policy.
    let pointwise = |own_psi: f64, opp: &UserProfile| -> Result<f64, NumericsError> {
        engine.c_wc_two_user(own_psi, opp)
    };

    let best_response = |opp: &UserProfile| -> Result<Option<f64>, NumericsError> {
        if pointwise(psi_max, opp)? < v {
            return Ok(None);
        }
        let (mut lo, mut hi) = (0.0f64, psi_max);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let c = pointwise(mid, opp)?;
            if (c - v).abs() <= 0.5 * root_tol {
                return Ok(Some(mid));
            }
            if c >= v {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-15 * psi_max {
                break;
            }
        }
        Ok(Some(0.5 * (lo + hi)))
    };

    // Interference-free starting point: log(1 + p psi / sigma^2) = v.
    let p = scenario.system.power();
    let start = if p > 0.0 {
        (scenario.system.noise() * v.exp_m1() / p).min(psi_max)
    } else {
        psi_max
    };
    let (mut psi1, mut psi2) = (start, start);
    let mut iterations = 0u32;
    let mut converged = false;
    while iterations < 200 {
        iterations += 1;
        let opp2 = users.1.with_psi(psi2).expect("threshold is valid");
        let Some(next1) = best_response(&opp2)? else {
            return Ok(infeasible_noncoop(scenario, "user 1's gated rate never reaches the WiFi rate"));
        };
        let opp1 = users.0.with_psi(next1).expect("threshold is valid");
        let Some(next2) = best_response(&opp1)? else {
            return Ok(infeasible_noncoop(scenario, "user 2's gated rate never reaches the WiFi rate"));
        };
        let delta = (next1 - psi1).abs().max((next2 - psi2).abs());
        psi1 = next1;
        psi2 = next2;
        if delta < 0.25 * root_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence {
            op: "non-cooperative threshold iteration",
            iterations,
            last: psi1,
        });
    }

    let (a, b) = pair_with(users, psi1, psi2);
    let r1 = (engine.c_wc_two_user(psi1, &b)? - v).abs();
    let r2 = (engine.c_wc_two_user(psi2, &a)? - v).abs();
    let mut adjusted = *scenario;
    adjusted.users = crate::model::Users::Two(a, b);
    let profile = ProfileKind::TwoUser(Policy::Wc, Policy::Wc);
    let certificate = certify_profile(&profile, engine, &adjusted)?;
    let bs = bs_utility_two_user(Policy::Wc, Policy::Wc, (&a, &b));
    Ok(NoncoopOutcome {
        psi: (psi1, psi2),
        residuals: (r1, r2),
        iterations,
        bs_utility: bs,
        poa: price_of_anarchy(bs, UsersRef::Two(&a, &b), 2),
        certificate,
        status: SolveStatus::Feasible,
    })
}

fn infeasible_noncoop(scenario: &Scenario, why: &str) -> NoncoopOutcome {
    NoncoopOutcome {
        psi: (scenario.psi_max, scenario.psi_max),
        residuals: (f64::NAN, f64::NAN),
        iterations: 0,
        bs_utility: 0.0,
        poa: Poa::Infinite,
        certificate: None,
        status: SolveStatus::Infeasible(why.into()),
    }
}

/// Concentration-based upper bound on the all-cellular population threshold:
/// `max(2/beta + 1, k+)` where `k+` solves a strictly decreasing scalar
/// equation built from the interference-free expected rate.
pub fn kstar_upper_bound(
    engine: &UtilityEngine,
    scenario: &Scenario,
) -> Result<KStarBound, NumericsError> {
    let user = scenario
        .symmetric_user()
        .expect("kstar_upper_bound requires a symmetric scenario");
    let beta = user.beta();
    let v = scenario.system.wifi_rate();
    if beta <= 0.0 || v <= 0.0 {
        return Err(NumericsError::Consistency(
            "the population bound requires positive demand probability and WiFi rate".into(),
        ));
    }
    let floor = 2.0 / beta + 1.0;
    // The weighted integral in the bound is half the interference-free
    // unconditional rate once the exponential weight is restored; the
    // identity is verified against direct quadrature in the tests.
    let half_cww = 0.5 * engine.multi_utility(0, 0, GainCondition::Unconditional, user)?;
    let lhs = |k: f64| -> f64 {
        let active = (k - 1.0) * beta;
        half_cww * (-(k - 1.0) * beta * beta / 2.0).exp() + (active / (active - 2.0)).ln()
    };
    let eps = 1e-9 * floor.max(1.0);
    if lhs(floor + eps) < v {
        return Ok(KStarBound {
            k_double_star: floor.ceil() as u32,
            k_plus: None,
            floor,
            degenerate: true,
        });
    }
    let mut delta = 1.0f64;
    while lhs(floor + delta) > v {
        delta *= 2.0;
        if delta > 1e15 {
            return Err(NumericsError::NoConvergence {
                op: "population bound bracket",
                iterations: 50,
                last: floor + delta,
            });
        }
    }
    let (mut lo, mut hi) = (floor + eps, floor + delta);
    while hi - lo > 1e-9 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if lhs(mid) > v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let k_plus = 0.5 * (lo + hi);
    Ok(KStarBound {
        k_double_star: floor.max(k_plus).ceil() as u32,
        k_plus: Some(k_plus),
        floor,
        degenerate: false,
    })
}
