//! Domain types shared by every solver: physical constants, user statistics,
//! association policies, and the scenario container.
//!
//! All values are immutable after construction, so they can be shared freely
//! between threads. Derived quantities (the good-channel probability `alpha`)
//! are always recomputed from their inputs, never stored independently.

use std::fmt;

use thiserror::Error;

/// A single invalid field, with the field name spelled out so callers can
/// surface it verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

/// Every violated invariant found during validation, aggregated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationErrors(pub Vec<ValidationError>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<String> = self.0.iter().map(|e| e.to_string()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

impl std::error::Error for ValidationErrors {}

impl From<ValidationError> for ValidationErrors {
    fn from(e: ValidationError) -> Self {
        ValidationErrors(vec![e])
    }
}

/// Collects validation errors and yields either the value or the full list.
#[derive(Default)]
struct Checker {
    errors: Vec<ValidationError>,
}

impl Checker {
    fn require(&mut self, ok: bool, field: &str, message: &str) {
        if !ok {
            self.errors.push(ValidationError::new(field, message));
        }
    }

    fn finish<T>(self, value: T) -> Result<T, ValidationErrors> {
        if self.errors.is_empty() {
            Ok(value)
        } else {
            Err(ValidationErrors(self.errors))
        }
    }
}

/// Physical constants of every throughput formula: cellular transmit power,
/// noise variance, and the constant WiFi rate.
///
/// Rates are in nats (natural-log Shannon capacity); the WiFi rate `v` is
/// interpreted in the same units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    p: f64,
    sigma2: f64,
    v: f64,
}

impl SystemParams {
    pub fn new(p: f64, sigma2: f64, v: f64) -> Result<Self, ValidationErrors> {
        let mut c = Checker::default();
        c.require(p.is_finite() && p >= 0.0, "p", "transmit power must be finite and >= 0");
        c.require(sigma2.is_finite() && sigma2 > 0.0, "sigma2", "sigma2 must be positive");
        c.require(v.is_finite() && v >= 0.0, "v", "WiFi rate must be finite and >= 0");
        c.finish(Self { p, sigma2, v })
    }

    /// Cellular transmit power (linear scale).
    pub fn power(&self) -> f64 {
        self.p
    }

    /// Noise variance (linear scale).
    pub fn noise(&self) -> f64 {
        self.sigma2
    }

    /// Constant WiFi throughput, the `v` every cellular utility is compared
    /// against.
    pub fn wifi_rate(&self) -> f64 {
        self.v
    }
}

/// One user's statistical description: channel rate `lambda`, demand
/// probability `beta`, broadcast threshold `psi`, and the derived
/// good-channel probability `alpha = exp(-lambda * psi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserProfile {
    lambda: f64,
    beta: f64,
    psi: f64,
    alpha: f64,
}

impl UserProfile {
    pub fn new(lambda: f64, beta: f64, psi: f64) -> Result<Self, ValidationErrors> {
        let mut c = Checker::default();
        c.require(lambda.is_finite() && lambda > 0.0, "lambda", "channel rate must be finite and > 0");
        c.require(beta.is_finite() && (0.0..=1.0).contains(&beta), "beta", "demand probability must lie in [0, 1]");
        c.require(psi.is_finite() && psi >= 0.0, "psi", "threshold must be finite and >= 0");
        let alpha = (-lambda * psi).exp();
        c.finish(Self { lambda, beta, psi, alpha })
    }

    /// Exponential rate of the channel power gain.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Probability that the user has traffic to send.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Broadcast channel-quality threshold.
    pub fn psi(&self) -> f64 {
        self.psi
    }

    /// Probability of the good channel state, `exp(-lambda * psi)`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Same user with a different threshold; `alpha` is recomputed.
    pub fn with_psi(&self, psi: f64) -> Result<Self, ValidationErrors> {
        Self::new(self.lambda, self.beta, psi)
    }
}

/// Radio access choice for one channel state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Access {
    Wifi,
    Cellular,
}

/// Channel state as seen through the broadcast threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelState {
    /// Gain below the threshold.
    Bad,
    /// Gain above the threshold.
    Good,
}

/// A user's policy: the access picked in the bad state and in the good state.
/// Cellular-then-WiFi is irrational (the good state always yields at least
/// the bad state's cellular throughput) and cannot be constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    /// Cellular in both states.
    Cc,
    /// WiFi in the bad state, cellular in the good state.
    Wc,
    /// WiFi in both states.
    Ww,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Cc, Policy::Wc, Policy::Ww];

    pub fn from_actions(bad: Access, good: Access) -> Result<Self, ValidationError> {
        match (bad, good) {
            (Access::Cellular, Access::Cellular) => Ok(Policy::Cc),
            (Access::Wifi, Access::Cellular) => Ok(Policy::Wc),
            (Access::Wifi, Access::Wifi) => Ok(Policy::Ww),
            (Access::Cellular, Access::Wifi) => Err(ValidationError::new(
                "policy",
                "cellular-then-wifi is irrational and not representable",
            )),
        }
    }

    pub fn action_at(&self, state: ChannelState) -> Access {
        match (self, state) {
            (Policy::Cc, _) => Access::Cellular,
            (Policy::Wc, ChannelState::Bad) => Access::Wifi,
            (Policy::Wc, ChannelState::Good) => Access::Cellular,
            (Policy::Ww, _) => Access::Wifi,
        }
    }

    pub fn bad_state_action(&self) -> Access {
        self.action_at(ChannelState::Bad)
    }

    pub fn good_state_action(&self) -> Access {
        self.action_at(ChannelState::Good)
    }

    /// Short lowercase tag used in tables and CSV output.
    pub fn tag(&self) -> &'static str {
        match self {
            Policy::Cc => "cc",
            Policy::Wc => "wc",
            Policy::Ww => "ww",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Counts of players per policy in the symmetric game. Players on the
/// WiFi-only policy are the remainder `n - k_cc - k_wc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PolicyStatistics {
    k_cc: u32,
    k_wc: u32,
    n: u32,
}

impl PolicyStatistics {
    pub fn new(k_cc: u32, k_wc: u32, n: u32) -> Result<Self, ValidationErrors> {
        let mut c = Checker::default();
        c.require(
            k_cc.checked_add(k_wc).map(|s| s <= n).unwrap_or(false),
            "policy_statistics",
            "k_cc + k_wc must not exceed n",
        );
        c.finish(Self { k_cc, k_wc, n })
    }

    pub fn k_cc(&self) -> u32 {
        self.k_cc
    }

    pub fn k_wc(&self) -> u32 {
        self.k_wc
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn k_ww(&self) -> u32 {
        self.n - self.k_cc - self.k_wc
    }

    /// Opponent statistics seen by one player of the given policy, i.e. the
    /// counts with that player removed. Returns `None` when no player uses
    /// the policy.
    pub fn opponents_of(&self, policy: Policy) -> Option<(u32, u32)> {
        match policy {
            Policy::Cc => self.k_cc.checked_sub(1).map(|k| (k, self.k_wc)),
            Policy::Wc => self.k_wc.checked_sub(1).map(|k| (self.k_cc, k)),
            Policy::Ww => {
                if self.k_ww() > 0 {
                    Some((self.k_cc, self.k_wc))
                } else {
                    None
                }
            }
        }
    }
}

impl fmt::Display for PolicyStatistics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}w{}", self.k_cc, self.k_wc)
    }
}

/// Player population: a single shared profile in the symmetric game or two
/// explicit profiles in the two-user game.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Users {
    Symmetric(UserProfile),
    Two(UserProfile, UserProfile),
}

/// A complete problem instance: physical constants, population, and the
/// numerical knobs every solver shares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub system: SystemParams,
    pub n: u32,
    pub users: Users,
    pub quad_tol: f64,
    pub root_tol: f64,
    pub psi_max: f64,
    pub seed: u64,
}

/// Default search ceiling for thresholds: beyond `50 / lambda` the good-state
/// probability is below `e^-50`, numerically indistinguishable from zero.
pub fn default_psi_max(lambda: f64) -> f64 {
    50.0 / lambda
}

impl Scenario {
    pub fn new(
        system: SystemParams,
        n: u32,
        users: Users,
        quad_tol: f64,
        root_tol: f64,
        psi_max: f64,
        seed: u64,
    ) -> Result<Self, ValidationErrors> {
        let mut c = Checker::default();
        c.require(n >= 2, "n", "at least two players");
        if let Users::Two(..) = users {
            c.require(n == 2, "n", "two-user mode requires n = 2");
        }
        c.require(quad_tol.is_finite() && quad_tol > 0.0, "quad_tol", "quadrature tolerance must be positive");
        c.require(root_tol.is_finite() && root_tol > 0.0, "root_tol", "root tolerance must be positive");
        c.require(psi_max.is_finite() && psi_max > 0.0, "psi_max", "threshold ceiling must be positive");
        c.finish(Self { system, n, users, quad_tol, root_tol, psi_max, seed })
    }

    /// Shared profile of the symmetric game, if this is a symmetric scenario.
    pub fn symmetric_user(&self) -> Option<&UserProfile> {
        match &self.users {
            Users::Symmetric(u) => Some(u),
            Users::Two(..) => None,
        }
    }

    /// Both profiles of the two-user game, if this is a two-user scenario.
    pub fn two_users(&self) -> Option<(&UserProfile, &UserProfile)> {
        match &self.users {
            Users::Two(a, b) => Some((a, b)),
            Users::Symmetric(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(lambda: f64, beta: f64, psi: f64) -> UserProfile {
        UserProfile::new(lambda, beta, psi).unwrap()
    }

    #[test]
    fn alpha_at_zero_threshold_is_one() {
        assert_eq!(profile(0.6, 0.5, 0.0).alpha(), 1.0);
    }

    #[test]
    fn alpha_matches_direct_evaluation() {
        let u = profile(0.6, 0.5, 1.0);
        assert!((u.alpha() - 0.548812).abs() < 1e-6);
        assert_eq!(u.alpha(), (-0.6_f64).exp());
    }

    #[test]
    fn negative_threshold_rejected_naming_field() {
        let err = UserProfile::new(0.6, 0.5, -1.0).unwrap_err();
        assert!(err.0.iter().any(|e| e.field == "psi"), "{err}");
    }

    #[test]
    fn profile_round_trips_inputs_bit_exactly() {
        let (l, b, p) = (0.6123456789, 0.3141592653, 2.718281828);
        let u = profile(l, b, p);
        assert_eq!(u.lambda(), l);
        assert_eq!(u.beta(), b);
        assert_eq!(u.psi(), p);
        assert_eq!(u.alpha(), (-l * p).exp());
    }

    #[test]
    fn alpha_strictly_decreasing_in_psi_and_lambda() {
        let psis: Vec<f64> = (0..25).map(|i| i as f64 * 0.3).collect();
        let mut last = f64::INFINITY;
        for &psi in &psis {
            let a = profile(0.6, 0.5, psi).alpha();
            assert!(a < last || (psi == 0.0 && a == 1.0));
            last = a;
        }
        let lambdas: Vec<f64> = (1..=25).map(|i| i as f64 * 0.2).collect();
        let mut last = f64::INFINITY;
        for &l in &lambdas {
            let a = profile(l, 0.5, 1.5).alpha();
            assert!(a < last);
            last = a;
        }
    }

    #[test]
    fn cellular_then_wifi_not_constructible() {
        assert!(Policy::from_actions(Access::Cellular, Access::Wifi).is_err());
        assert_eq!(Policy::from_actions(Access::Wifi, Access::Cellular).unwrap(), Policy::Wc);
    }

    #[test]
    fn statistics_counts_and_opponents() {
        let s = PolicyStatistics::new(2, 3, 9).unwrap();
        assert_eq!(s.k_ww(), 4);
        assert_eq!(s.opponents_of(Policy::Cc), Some((1, 3)));
        assert_eq!(s.opponents_of(Policy::Wc), Some((2, 2)));
        assert_eq!(s.opponents_of(Policy::Ww), Some((2, 3)));
        assert!(PolicyStatistics::new(5, 5, 9).is_err());
    }

    #[test]
    fn scenario_validation_aggregates_errors() {
        let sys = SystemParams::new(1.0, 0.0, 0.25);
        let err = sys.unwrap_err();
        assert!(err.to_string().contains("sigma2 must be positive"));

        let sys = SystemParams::new(1.0, 1.0, 0.25).unwrap();
        let u = profile(0.6, 0.5, 1.0);
        let err = Scenario::new(sys, 1, Users::Symmetric(u), 1e-9, 1e-7, 10.0, 0).unwrap_err();
        assert!(err.to_string().contains("at least two players"));

        let err = Scenario::new(sys, 2, Users::Symmetric(u), 0.0, 0.0, -1.0, 0).unwrap_err();
        assert_eq!(err.0.len(), 3);
    }

    #[test]
    fn valid_reference_scenario_accepted() {
        let sys = SystemParams::new(1.0, 1.0, 0.25).unwrap();
        let u = profile(0.6, 0.5, 1.0);
        assert!(Scenario::new(sys, 9, Users::Symmetric(u), 1e-9, 1e-7, default_psi_max(0.6), 7).is_ok());
    }
}
