//! Numerical solver and simulator for a two-tier wireless association game:
//! users pick between a WiFi hotspot with a constant shared rate and a
//! cellular cell whose rate depends on channel gains and mutual interference,
//! knowing only whether their own gain clears a broadcast threshold.
//!
//! The crate computes the conditional throughput utilities, enumerates
//! pure-strategy equilibria of the two-user and symmetric n-user games,
//! solves the centralized / leader-led / fully non-cooperative threshold
//! selection problems, evaluates base-station utility, loads, and the price
//! of anarchy, and ships a Monte-Carlo oracle that brute-forces every
//! analytic value from realized throughputs.

pub mod equilibrium;
pub mod hierarchy;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod quad;
pub mod rng;
pub mod special;
pub mod utility;

pub use equilibrium::{
    certify_profile, check_no_deviation, family_label, limiting_policy_usage,
    multi_user_equilibria, override_psi, two_user_equilibria, ConditionRecord, DeviationReport,
    EquilibriumCertificate, PolicyUsage, ProfileKind,
};
pub use hierarchy::{
    centralized, find_kstar_nstar, kstar_upper_bound, noncooperative_two_user, solve_psi_kl,
    stackelberg_multi, stackelberg_two_user, KStarBound, NoncoopOutcome, PsiCandidate, PsiChoice,
    SolveStatus, StackelbergOutcome, ThresholdCounts, ThresholdStatus, ThresholdValue,
};
pub use metrics::{
    bs_utility, bs_utility_symmetric, bs_utility_two_user, demand_weighted_loads,
    price_of_anarchy, system_loads, LoadSummary, Poa, UsersRef,
};
pub use model::{
    default_psi_max, Access, ChannelState, Policy, PolicyStatistics, Scenario, SystemParams,
    UserProfile, Users, ValidationError, ValidationErrors,
};
pub use oracle::{
    estimate_bs_utility, estimate_c_multi, estimate_conditional, simulate_throughput, McEstimate,
};
pub use rng::SampleStream;
pub use utility::{
    GainCondition, NumericsError, OpponentDescriptor, UtilityEngine, UtilityEntry, UtilityTable,
};
