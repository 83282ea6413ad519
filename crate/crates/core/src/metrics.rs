//! Base-station utility, price of anarchy, and system-load summaries.

use std::fmt;

use crate::equilibrium::ProfileKind;
use crate::model::{Policy, PolicyStatistics, UserProfile};

/// Price of anarchy: the centralized optimum over the achieved utility.
/// Zero achieved utility is reported as infinite rather than raised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Poa {
    Finite(f64),
    Infinite,
}

impl Poa {
    pub fn as_f64(&self) -> f64 {
        match self {
            Poa::Finite(x) => *x,
            Poa::Infinite => f64::INFINITY,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Poa::Finite(_))
    }
}

impl fmt::Display for Poa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Poa::Finite(x) => write!(f, "{x}"),
            Poa::Infinite => write!(f, "inf"),
        }
    }
}

/// Fraction of users attached to each system under a policy profile.
#[derive(Debug, Clone, Copy)]
pub struct LoadSummary {
    pub load_cellular: f64,
    pub load_wifi: f64,
    pub n: u32,
    pub statistics: PolicyStatistics,
    pub psi: f64,
}

/// Expected number of demanding users on cellular in the symmetric game:
/// `beta * (k_cc + e^{-lambda psi} k_wc)`.
pub fn bs_utility_symmetric(stats: &PolicyStatistics, psi: f64, user: &UserProfile) -> f64 {
    let alpha = (-user.lambda() * psi).exp();
    user.beta() * (stats.k_cc() as f64 + alpha * stats.k_wc() as f64)
}

/// Two-user form: each user contributes its demand probability when always on
/// cellular, scaled by its good-state probability when threshold-gated.
pub fn bs_utility_two_user(p1: Policy, p2: Policy, users: (&UserProfile, &UserProfile)) -> f64 {
    let one = |policy: Policy, u: &UserProfile| match policy {
        Policy::Cc => u.beta(),
        Policy::Wc => u.beta() * u.alpha(),
        Policy::Ww => 0.0,
    };
    one(p1, users.0) + one(p2, users.1)
}

/// Utility of a generic profile at the thresholds already carried by the
/// profiles / the supplied symmetric threshold.
pub fn bs_utility(profile: &ProfileKind, psi: f64, users: UsersRef<'_>) -> f64 {
    match (profile, users) {
        (ProfileKind::TwoUser(p1, p2), UsersRef::Two(a, b)) => bs_utility_two_user(*p1, *p2, (a, b)),
        (ProfileKind::Symmetric(stats), UsersRef::Symmetric(u)) => {
            bs_utility_symmetric(stats, psi, u)
        }
        _ => panic!("profile kind does not match the population"),
    }
}

/// Borrowed view of the population for the generic helpers.
#[derive(Debug, Clone, Copy)]
pub enum UsersRef<'a> {
    Symmetric(&'a UserProfile),
    Two(&'a UserProfile, &'a UserProfile),
}

impl<'a> UsersRef<'a> {
    /// The centralized optimum: the sum of demand probabilities with every
    /// user held on cellular.
    pub fn optimum(&self, n: u32) -> f64 {
        match self {
            UsersRef::Symmetric(u) => n as f64 * u.beta(),
            UsersRef::Two(a, b) => a.beta() + b.beta(),
        }
    }
}

/// Optimum-over-achieved ratio; infinite (flagged, not an error) at zero.
pub fn price_of_anarchy(bs_utility_at_play: f64, users: UsersRef<'_>, n: u32) -> Poa {
    let optimum = users.optimum(n);
    if bs_utility_at_play <= 0.0 {
        return Poa::Infinite;
    }
    Poa::Finite(optimum / bs_utility_at_play)
}

/// Verbatim load split: cellular gets `(k_cc + k_wc * alpha) / n` slots,
/// WiFi the rest. Counts policy slots, not realized demand.
pub fn system_loads(stats: &PolicyStatistics, psi: f64, user: &UserProfile, n: u32) -> LoadSummary {
    debug_assert_eq!(stats.n(), n);
    let alpha = (-user.lambda() * psi).exp();
    let load_cellular = (stats.k_cc() as f64 + stats.k_wc() as f64 * alpha) / n as f64;
    LoadSummary {
        load_cellular,
        load_wifi: 1.0 - load_cellular,
        n,
        statistics: *stats,
        psi,
    }
}

/// Demand-weighted variant of the load split (not the verbatim formula):
/// scales the cellular share by the demand probability, so it reports the
/// expected fraction of *active* users per system.
pub fn demand_weighted_loads(
    stats: &PolicyStatistics,
    psi: f64,
    user: &UserProfile,
    n: u32,
) -> LoadSummary {
    let verbatim = system_loads(stats, psi, user, n);
    let load_cellular = verbatim.load_cellular * user.beta();
    LoadSummary { load_cellular, load_wifi: 1.0 - load_cellular, ..verbatim }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn user(lambda: f64, beta: f64, psi: f64) -> UserProfile {
        UserProfile::new(lambda, beta, psi).unwrap()
    }

    #[test]
    fn symmetric_utility_examples() {
        let u = user(0.6, 0.5, 1.0);
        let all_cc = PolicyStatistics::new(9, 0, 9).unwrap();
        assert_abs_diff_eq!(bs_utility_symmetric(&all_cc, 1.0, &u), 4.5, epsilon = 1e-12);

        let all_wc = PolicyStatistics::new(0, 9, 9).unwrap();
        assert_abs_diff_eq!(bs_utility_symmetric(&all_wc, 0.0, &u), 4.5, epsilon = 1e-12);

        let mixed = PolicyStatistics::new(2, 3, 9).unwrap();
        assert_abs_diff_eq!(bs_utility_symmetric(&mixed, 1.0, &u), 1.8232, epsilon = 1e-4);
    }

    #[test]
    fn poa_flags_and_values() {
        let u = user(0.6, 0.5, 1.0);
        let users = UsersRef::Symmetric(&u);
        assert_eq!(price_of_anarchy(4.5, users, 9), Poa::Finite(1.0));
        assert_eq!(price_of_anarchy(0.0, users, 9), Poa::Infinite);
        assert_eq!(format!("{}", price_of_anarchy(0.0, users, 9)), "inf");
    }

    #[test]
    fn two_user_noncooperative_poa_form() {
        let a = user(0.6, 0.5, 1.3);
        let b = user(1.2, 0.4, 0.7);
        let achieved = bs_utility_two_user(Policy::Wc, Policy::Wc, (&a, &b));
        let expected = 0.5 * (-0.6f64 * 1.3).exp() + 0.4 * (-1.2f64 * 0.7).exp();
        assert_abs_diff_eq!(achieved, expected, epsilon = 1e-15);
        let poa = price_of_anarchy(achieved, UsersRef::Two(&a, &b), 2);
        assert_abs_diff_eq!(poa.as_f64(), 0.9 / expected, epsilon = 1e-12);
    }

    #[test]
    fn load_examples() {
        let u = user(0.6, 0.5, 1.0);
        let all_cc = PolicyStatistics::new(9, 0, 9).unwrap();
        assert_eq!(system_loads(&all_cc, 1.0, &u, 9).load_cellular, 1.0);

        let none = PolicyStatistics::new(0, 0, 9).unwrap();
        assert_eq!(system_loads(&none, 1.0, &u, 9).load_cellular, 0.0);

        let mixed = PolicyStatistics::new(3, 4, 9).unwrap();
        let loads = system_loads(&mixed, 1.0, &u, 9);
        assert_abs_diff_eq!(loads.load_cellular, 0.57725, epsilon = 1e-5);
        assert_abs_diff_eq!(loads.load_cellular + loads.load_wifi, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn loads_monotone_in_counts() {
        let u = user(0.6, 0.5, 1.0);
        let mut last = -1.0;
        for cc in 0..=5u32 {
            let l = system_loads(&PolicyStatistics::new(cc, 2, 9).unwrap(), 1.0, &u, 9);
            assert!(l.load_cellular > last);
            last = l.load_cellular;
        }
        let mut last = -1.0;
        for wc in 0..=5u32 {
            let l = system_loads(&PolicyStatistics::new(2, wc, 9).unwrap(), 1.0, &u, 9);
            assert!(l.load_cellular > last);
            last = l.load_cellular;
        }
    }

    #[test]
    fn utility_nonincreasing_in_threshold() {
        let u = user(0.6, 0.5, 1.0);
        let stats = PolicyStatistics::new(2, 3, 9).unwrap();
        let mut last = f64::INFINITY;
        for i in 0..20 {
            let psi = i as f64 * 0.4;
            let ub = bs_utility_symmetric(&stats, psi, &u);
            assert!(ub <= last + 1e-15);
            last = ub;
        }
    }

    #[test]
    fn demand_weighted_variant_scales_by_beta() {
        let u = user(0.6, 0.5, 1.0);
        let stats = PolicyStatistics::new(3, 4, 9).unwrap();
        let verbatim = system_loads(&stats, 1.0, &u, 9);
        let weighted = demand_weighted_loads(&stats, 1.0, &u, 9);
        assert_abs_diff_eq!(weighted.load_cellular, 0.5 * verbatim.load_cellular, epsilon = 1e-15);
    }
}
