//! Pure-strategy Bayes-Nash equilibrium enumeration for the two-user game and
//! the symmetric n-user game, plus a definition-based deviation checker used
//! as an internal oracle.
//!
//! An inequality "holds" when its margin is at least `-root_tol`; boundary
//! profiles can therefore satisfy adjacent families and are all emitted.
//! When a channel state occurs with probability zero (threshold at zero, or
//! so large the good state vanishes), that state's conditions are vacuous:
//! the expected payoff cannot be improved on a null event.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::model::{Access, ChannelState, Policy, PolicyStatistics, Scenario, UserProfile};
use crate::utility::{GainCondition, NumericsError, UtilityEngine};

/// Probability below which a channel state is treated as never occurring.
const STATE_VANISHES: f64 = 1e-300;

/// One recorded inequality: `left >= right` held with the given margin
/// (`margin = left - right`), or a vacuous check on a null state.
#[derive(Debug, Clone)]
pub struct ConditionRecord {
    pub label: String,
    pub left: f64,
    pub right: f64,
    pub margin: f64,
}

impl ConditionRecord {
    fn vacuous(label: String) -> Self {
        Self { label, left: f64::INFINITY, right: 0.0, margin: f64::INFINITY }
    }
}

/// The strategy profile a certificate speaks about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    TwoUser(Policy, Policy),
    Symmetric(PolicyStatistics),
}

impl ProfileKind {
    /// Policy counts of the profile (two-user profiles are counted too).
    pub fn statistics(&self) -> PolicyStatistics {
        match self {
            ProfileKind::Symmetric(s) => *s,
            ProfileKind::TwoUser(a, b) => {
                let count = |p: Policy| [a, b].iter().filter(|&&&q| q == p).count() as u32;
                PolicyStatistics::new(count(Policy::Cc), count(Policy::Wc), 2)
                    .expect("two policies always form valid statistics")
            }
        }
    }
}

/// An equilibrium plus the inequality margins proving it.
#[derive(Debug, Clone)]
pub struct EquilibriumCertificate {
    pub profile: ProfileKind,
    pub case_labels: Vec<String>,
    pub conditions: Vec<ConditionRecord>,
}

impl EquilibriumCertificate {
    pub fn min_margin(&self) -> f64 {
        self.conditions.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min)
    }
}

/// Outcome of the definition-based deviation sweep.
#[derive(Debug, Clone)]
pub struct DeviationReport {
    pub pass: bool,
    pub min_margin: f64,
    pub checks: Vec<ConditionRecord>,
}

/// Per-player-class conditional values needed by the per-state rule, with
/// vacuity resolved from the state probabilities.
struct StateValues {
    bad: Option<f64>,
    good: Option<f64>,
}

fn state_values(
    engine: &UtilityEngine,
    me: &UserProfile,
    fetch: impl Fn(GainCondition) -> Result<f64, NumericsError>,
) -> Result<StateValues, NumericsError> {
    let _ = engine;
    let one_minus_alpha = -(-me.lambda() * me.psi()).exp_m1();
    let bad = if one_minus_alpha < STATE_VANISHES { None } else { Some(fetch(GainCondition::Bad)?) };
    let good = if me.alpha() < STATE_VANISHES { None } else { Some(fetch(GainCondition::Good)?) };
    Ok(StateValues { bad, good })
}

/// The per-state equilibrium rule for one player class: at every state that
/// occurs, the chosen access must beat the alternative within tolerance.
fn class_conditions(
    who: &str,
    policy: Policy,
    values: &StateValues,
    v: f64,
) -> Vec<ConditionRecord> {
    let mut out = Vec::with_capacity(2);
    for (state, cell) in [(ChannelState::Bad, values.bad), (ChannelState::Good, values.good)] {
        let tag = match state {
            ChannelState::Bad => "bad",
            ChannelState::Good => "good",
        };
        let label_stay = format!("{who}: cellular at {tag} state beats wifi");
        let label_switch = format!("{who}: wifi at {tag} state beats cellular");
        match (policy.action_at(state), cell) {
            (_, None) => out.push(ConditionRecord::vacuous(format!("{who}: {tag} state never occurs"))),
            (Access::Cellular, Some(c)) => {
                out.push(ConditionRecord { label: label_stay, left: c, right: v, margin: c - v })
            }
            (Access::Wifi, Some(c)) => {
                out.push(ConditionRecord { label: label_switch, left: v, right: c, margin: v - c })
            }
        }
    }
    out
}

fn all_hold(conditions: &[ConditionRecord], root_tol: f64) -> bool {
    conditions.iter().all(|c| c.margin >= -root_tol)
}

/// Family tag of a symmetric profile shape, used as the certificate case
/// label and in CSV output.
pub fn family_label(stats: &PolicyStatistics) -> &'static str {
    let (cc, wc, ww) = (stats.k_cc(), stats.k_wc(), stats.k_ww());
    match (cc > 0, wc > 0, ww > 0) {
        (false, false, _) => "all-ww",
        (false, true, true) => "wc-ww",
        (false, true, false) => "all-wc",
        (true, true, false) => "cc-wc",
        (true, false, false) => "all-cc",
        (true, false, true) => "cc-ww",
        (true, true, true) => "cc-wc-ww",
    }
}

/// Enumerate equilibria of the two-user game over the nine policy pairs.
pub fn two_user_equilibria(
    engine: &UtilityEngine,
    scenario: &Scenario,
) -> Result<Vec<EquilibriumCertificate>, NumericsError> {
    let (u1, u2) = scenario
        .two_users()
        .expect("two_user_equilibria requires a two-user scenario");
    let v = scenario.system.wifi_rate();
    let mut found = Vec::new();
    for p1 in Policy::ALL {
        for p2 in Policy::ALL {
            let vals1 = state_values(engine, u1, |cond| engine.two_user_utility(p2, cond, u1, u2))?;
            let vals2 = state_values(engine, u2, |cond| engine.two_user_utility(p1, cond, u2, u1))?;
            let mut conditions = class_conditions("user 1", p1, &vals1, v);
            conditions.extend(class_conditions("user 2", p2, &vals2, v));
            if all_hold(&conditions, scenario.root_tol) {
                found.push(EquilibriumCertificate {
                    profile: ProfileKind::TwoUser(p1, p2),
                    case_labels: vec![format!("{p1}-{p2}")],
                    conditions,
                });
            }
        }
    }
    if found.is_empty() {
        return Err(NumericsError::Consistency(
            "no two-user profile satisfies its equilibrium conditions; \
             a pure equilibrium must exist, so this indicates a tolerance bug"
                .into(),
        ));
    }
    Ok(found)
}

/// Conditions for a symmetric profile, one class at a time. Opponent counts
/// seen by a class member have that member removed; players on the WiFi-only
/// policy never enter the counts.
fn symmetric_profile_conditions(
    engine: &UtilityEngine,
    user: &UserProfile,
    stats: &PolicyStatistics,
    v: f64,
) -> Result<Vec<ConditionRecord>, NumericsError> {
    let mut conditions = Vec::new();
    for policy in Policy::ALL {
        let Some((cc, wc)) = stats.opponents_of(policy) else {
            continue;
        };
        let vals = state_values(engine, user, |cond| engine.multi_utility(cc, wc, cond, user))?;
        let who = format!("{policy} player (vs c{cc}w{wc})");
        conditions.extend(class_conditions(&who, policy, &vals, v));
    }
    Ok(conditions)
}

/// Enumerate equilibria of the symmetric game by scanning all policy counts
/// in deterministic order (k_cc ascending, then k_wc ascending).
pub fn multi_user_equilibria(
    engine: &UtilityEngine,
    scenario: &Scenario,
) -> Result<Vec<EquilibriumCertificate>, NumericsError> {
    let user = scenario
        .symmetric_user()
        .expect("multi_user_equilibria requires a symmetric scenario");
    let v = scenario.system.wifi_rate();
    let n = scenario.n;
    let cells: Vec<PolicyStatistics> = (0..=n)
        .flat_map(|k_cc| {
            (0..=(n - k_cc))
                .map(move |k_wc| PolicyStatistics::new(k_cc, k_wc, n).expect("scan stays within n"))
        })
        .collect();
    let checked: Vec<(PolicyStatistics, Vec<ConditionRecord>)> = cells
        .par_iter()
        .map(|stats| symmetric_profile_conditions(engine, user, stats, v).map(|c| (*stats, c)))
        .collect::<Result<_, _>>()?;
    let mut found = Vec::new();
    for (stats, conditions) in checked {
        if all_hold(&conditions, scenario.root_tol) {
            found.push(EquilibriumCertificate {
                profile: ProfileKind::Symmetric(stats),
                case_labels: vec![family_label(&stats).to_string()],
                conditions,
            });
        }
    }
    if found.is_empty() {
        return Err(NumericsError::Consistency(
            "no symmetric policy statistics satisfy their equilibrium conditions; \
             a pure equilibrium must exist, so this indicates a tolerance bug"
                .into(),
        ));
    }
    Ok(found)
}

/// Definition-based check: for every player class and every alternative
/// policy, the unilateral switch must not improve the payoff at any state
/// that occurs. Margins are reported per (class, alternative, state).
pub fn check_no_deviation(
    profile: &ProfileKind,
    engine: &UtilityEngine,
    scenario: &Scenario,
) -> Result<DeviationReport, NumericsError> {
    let v = scenario.system.wifi_rate();
    let mut checks: Vec<ConditionRecord> = Vec::new();

    let mut per_player = |who: &str,
                          me: &UserProfile,
                          policy: Policy,
                          values: &StateValues|
     -> Result<(), NumericsError> {
        for alt in Policy::ALL {
            if alt == policy {
                continue;
            }
            for (state, cell) in [(ChannelState::Bad, values.bad), (ChannelState::Good, values.good)] {
                let tag = match state {
                    ChannelState::Bad => "bad",
                    ChannelState::Good => "good",
                };
                let Some(c) = cell else {
                    checks.push(ConditionRecord::vacuous(format!(
                        "{who}: {tag} state never occurs (vs {alt})"
                    )));
                    continue;
                };
                let payoff = |a: Access| if a == Access::Cellular { c } else { v };
                let chosen = payoff(policy.action_at(state));
                let switched = payoff(alt.action_at(state));
                checks.push(ConditionRecord {
                    label: format!("{who}: keeps {policy} over {alt} at {tag} state"),
                    left: chosen,
                    right: switched,
                    margin: chosen - switched,
                });
            }
        }
        let _ = me;
        Ok(())
    };

    match profile {
        ProfileKind::TwoUser(p1, p2) => {
            let (u1, u2) = scenario
                .two_users()
                .expect("two-user profile requires a two-user scenario");
            let vals1 = state_values(engine, u1, |cond| engine.two_user_utility(*p2, cond, u1, u2))?;
            let vals2 = state_values(engine, u2, |cond| engine.two_user_utility(*p1, cond, u2, u1))?;
            per_player("user 1", u1, *p1, &vals1)?;
            per_player("user 2", u2, *p2, &vals2)?;
        }
        ProfileKind::Symmetric(stats) => {
            let user = scenario
                .symmetric_user()
                .expect("symmetric profile requires a symmetric scenario");
            assert_eq!(stats.n(), scenario.n, "statistics population must match the scenario");
            for policy in Policy::ALL {
                let Some((cc, wc)) = stats.opponents_of(policy) else {
                    continue;
                };
                let vals = state_values(engine, user, |cond| engine.multi_utility(cc, wc, cond, user))?;
                let who = format!("{policy} player (vs c{cc}w{wc})");
                per_player(&who, user, policy, &vals)?;
            }
        }
    }

    let min_margin = checks.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min);
    Ok(DeviationReport { pass: min_margin >= -scenario.root_tol, min_margin, checks })
}

/// Build the certificate for one profile if its equilibrium conditions hold
/// at the scenario's tolerance; `None` when the profile is not an equilibrium.
pub fn certify_profile(
    profile: &ProfileKind,
    engine: &UtilityEngine,
    scenario: &Scenario,
) -> Result<Option<EquilibriumCertificate>, NumericsError> {
    let v = scenario.system.wifi_rate();
    let (conditions, labels) = match profile {
        ProfileKind::TwoUser(p1, p2) => {
            let (u1, u2) = scenario
                .two_users()
                .expect("two-user profile requires a two-user scenario");
            let vals1 = state_values(engine, u1, |cond| engine.two_user_utility(*p2, cond, u1, u2))?;
            let vals2 = state_values(engine, u2, |cond| engine.two_user_utility(*p1, cond, u2, u1))?;
            let mut conditions = class_conditions("user 1", *p1, &vals1, v);
            conditions.extend(class_conditions("user 2", *p2, &vals2, v));
            (conditions, vec![format!("{p1}-{p2}")])
        }
        ProfileKind::Symmetric(stats) => {
            let user = scenario
                .symmetric_user()
                .expect("symmetric profile requires a symmetric scenario");
            let conditions = symmetric_profile_conditions(engine, user, stats, v)?;
            (conditions, vec![family_label(stats).to_string()])
        }
    };
    if all_hold(&conditions, scenario.root_tol) {
        Ok(Some(EquilibriumCertificate { profile: *profile, case_labels: labels, conditions }))
    } else {
        Ok(None)
    }
}

/// Policies appearing in any equilibrium once every user's threshold is
/// overridden to `psi_value`. At a zero threshold the bad state never occurs
/// and the game reduces to its single-state form; the flag reports that
/// reduction instead of guessing.
#[derive(Debug, Clone)]
pub struct PolicyUsage {
    pub policies: BTreeSet<Policy>,
    pub single_state: bool,
}

pub fn limiting_policy_usage(
    engine: &UtilityEngine,
    scenario: &Scenario,
    psi_value: f64,
) -> Result<PolicyUsage, NumericsError> {
    let adjusted = override_psi(scenario, psi_value);
    let mut policies = BTreeSet::new();
    match adjusted.users {
        crate::model::Users::Two(..) => {
            for cert in two_user_equilibria(engine, &adjusted)? {
                if let ProfileKind::TwoUser(p1, p2) = cert.profile {
                    policies.insert(p1);
                    policies.insert(p2);
                }
            }
        }
        crate::model::Users::Symmetric(_) => {
            for cert in multi_user_equilibria(engine, &adjusted)? {
                if let ProfileKind::Symmetric(stats) = cert.profile {
                    if stats.k_cc() > 0 {
                        policies.insert(Policy::Cc);
                    }
                    if stats.k_wc() > 0 {
                        policies.insert(Policy::Wc);
                    }
                    if stats.k_ww() > 0 {
                        policies.insert(Policy::Ww);
                    }
                }
            }
        }
    }
    Ok(PolicyUsage { policies, single_state: psi_value == 0.0 })
}

/// A copy of the scenario with every threshold replaced.
pub fn override_psi(scenario: &Scenario, psi: f64) -> Scenario {
    let mut out = *scenario;
    out.users = match scenario.users {
        crate::model::Users::Symmetric(u) => {
            crate::model::Users::Symmetric(u.with_psi(psi).expect("override threshold must be valid"))
        }
        crate::model::Users::Two(a, b) => crate::model::Users::Two(
            a.with_psi(psi).expect("override threshold must be valid"),
            b.with_psi(psi).expect("override threshold must be valid"),
        ),
    };
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Scenario, SystemParams, UserProfile, Users};

    fn two_user_scenario(v: f64, psi: f64) -> Scenario {
        let sys = SystemParams::new(1.0, 1.0, v).unwrap();
        let u1 = UserProfile::new(0.6, 0.5, psi).unwrap();
        let u2 = UserProfile::new(1.2, 0.5, psi).unwrap();
        Scenario::new(sys, 2, Users::Two(u1, u2), 1e-9, 1e-7, 50.0 / 0.6, 0).unwrap()
    }

    fn symmetric_scenario(v: f64, n: u32, psi: f64) -> Scenario {
        let sys = SystemParams::new(1.0, 1.0, v).unwrap();
        let u = UserProfile::new(0.6, 0.5, psi).unwrap();
        Scenario::new(sys, n, Users::Symmetric(u), 1e-9, 1e-7, 50.0 / 0.6, 0).unwrap()
    }

    #[test]
    fn huge_wifi_rate_yields_all_wifi() {
        let sc = two_user_scenario(1e6, 1.0);
        let engine = UtilityEngine::new(sc.system, sc.quad_tol);
        let certs = two_user_equilibria(&engine, &sc).unwrap();
        assert!(certs
            .iter()
            .any(|c| c.profile == ProfileKind::TwoUser(Policy::Ww, Policy::Ww)));

        let sc = symmetric_scenario(1e6, 5, 1.0);
        let engine = UtilityEngine::new(sc.system, sc.quad_tol);
        let certs = multi_user_equilibria(&engine, &sc).unwrap();
        assert!(certs.iter().any(|c| match c.profile {
            ProfileKind::Symmetric(s) => s.k_cc() == 0 && s.k_wc() == 0,
            _ => false,
        }));
    }

    #[test]
    fn free_wifi_rate_yields_all_cellular() {
        let sc = two_user_scenario(0.0, 1.0);
        let engine = UtilityEngine::new(sc.system, sc.quad_tol);
        let certs = two_user_equilibria(&engine, &sc).unwrap();
        assert!(certs
            .iter()
            .any(|c| c.profile == ProfileKind::TwoUser(Policy::Cc, Policy::Cc)));

        let sc = symmetric_scenario(0.0, 5, 1.0);
        let engine = UtilityEngine::new(sc.system, sc.quad_tol);
        let certs = multi_user_equilibria(&engine, &sc).unwrap();
        assert!(certs.iter().any(|c| match c.profile {
            ProfileKind::Symmetric(s) => s.k_cc() == 5,
            _ => false,
        }));
    }

    #[test]
    fn certificates_pass_deviation_check() {
        for &(v, psi) in &[(0.25, 1.0), (0.6, 0.5), (0.1, 2.0)] {
            let sc = two_user_scenario(v, psi);
            let engine = UtilityEngine::new(sc.system, sc.quad_tol);
            for cert in two_user_equilibria(&engine, &sc).unwrap() {
                let report = check_no_deviation(&cert.profile, &engine, &sc).unwrap();
                assert!(report.pass, "{:?} fails with margin {}", cert.profile, report.min_margin);
            }
            let sc = symmetric_scenario(v, 4, psi);
            let engine = UtilityEngine::new(sc.system, sc.quad_tol);
            for cert in multi_user_equilibria(&engine, &sc).unwrap() {
                let report = check_no_deviation(&cert.profile, &engine, &sc).unwrap();
                assert!(report.pass, "{:?} fails with margin {}", cert.profile, report.min_margin);
            }
        }
    }

    #[test]
    fn two_user_cases_match_deviation_oracle() {
        let sc = two_user_scenario(0.25, 1.0);
        let engine = UtilityEngine::new(sc.system, sc.quad_tol);
        let from_cases: Vec<_> = two_user_equilibria(&engine, &sc)
            .unwrap()
            .into_iter()
            .map(|c| c.profile)
            .collect();
        let mut from_oracle = Vec::new();
        for p1 in Policy::ALL {
            for p2 in Policy::ALL {
                let profile = ProfileKind::TwoUser(p1, p2);
                if check_no_deviation(&profile, &engine, &sc).unwrap().pass {
                    from_oracle.push(profile);
                }
            }
        }
        assert_eq!(from_cases, from_oracle);
    }

    #[test]
    fn all_wifi_fails_deviation_when_cellular_is_free() {
        let sc = symmetric_scenario(0.0, 4, 1.0);
        let engine = UtilityEngine::new(sc.system, sc.quad_tol);
        let all_ww = ProfileKind::Symmetric(PolicyStatistics::new(0, 0, 4).unwrap());
        let report = check_no_deviation(&all_ww, &engine, &sc).unwrap();
        assert!(!report.pass);
        assert!(report.min_margin < 0.0);
    }

    #[test]
    fn all_cellular_fails_deviation_when_wifi_dominates() {
        let sc = symmetric_scenario(1e6, 4, 1.0);
        let engine = UtilityEngine::new(sc.system, sc.quad_tol);
        let all_cc = ProfileKind::Symmetric(PolicyStatistics::new(4, 0, 4).unwrap());
        let report = check_no_deviation(&all_cc, &engine, &sc).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn small_threshold_excludes_cellular_everywhere() {
        // Halve the threshold until every bad-state utility sits below v.
        let sc = symmetric_scenario(0.25, 4, 1.0);
        let engine = UtilityEngine::new(sc.system, sc.quad_tol);
        let mut psi = 1.0;
        for _ in 0..40 {
            let adjusted = override_psi(&sc, psi);
            let user = adjusted.symmetric_user().unwrap();
            let mut below = true;
            for cc in 0..4u32 {
                for wc in 0..(4 - cc) {
                    let c = engine.multi_utility(cc, wc, GainCondition::Bad, user).unwrap();
                    below &= c < 0.25;
                }
            }
            if below {
                break;
            }
            psi *= 0.5;
        }
        let usage = limiting_policy_usage(&engine, &sc, psi).unwrap();
        assert!(!usage.policies.contains(&Policy::Cc), "{:?}", usage.policies);
    }

    #[test]
    fn large_threshold_excludes_wifi_only() {
        let sc = symmetric_scenario(0.25, 4, 1.0);
        let engine = UtilityEngine::new(sc.system, sc.quad_tol);
        let mut psi = 1.0;
        for _ in 0..24 {
            let adjusted = override_psi(&sc, psi);
            let user = adjusted.symmetric_user().unwrap();
            let mut above = true;
            for cc in 0..4u32 {
                for wc in 0..(4 - cc) {
                    let c = engine.multi_utility(cc, wc, GainCondition::Bad, user).unwrap();
                    above &= c > 0.25;
                }
            }
            if above {
                break;
            }
            psi *= 2.0;
        }
        let usage = limiting_policy_usage(&engine, &sc, psi).unwrap();
        assert!(!usage.policies.contains(&Policy::Ww), "{:?}", usage.policies);
    }

    #[test]
    fn zero_threshold_reports_single_state_reduction() {
        let sc = symmetric_scenario(0.25, 4, 1.0);
        let engine = UtilityEngine::new(sc.system, sc.quad_tol);
        let usage = limiting_policy_usage(&engine, &sc, 0.0).unwrap();
        assert!(usage.single_state);
        assert!(!usage.policies.is_empty());
    }

    #[test]
    fn family_labels_cover_all_shapes() {
        let label = |cc, wc, n| family_label(&PolicyStatistics::new(cc, wc, n).unwrap());
        assert_eq!(label(0, 0, 5), "all-ww");
        assert_eq!(label(0, 2, 5), "wc-ww");
        assert_eq!(label(0, 5, 5), "all-wc");
        assert_eq!(label(2, 3, 5), "cc-wc");
        assert_eq!(label(5, 0, 5), "all-cc");
        assert_eq!(label(2, 0, 5), "cc-ww");
        assert_eq!(label(1, 2, 5), "cc-wc-ww");
    }
}
