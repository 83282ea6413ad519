//! Subcommand implementations. Every command produces a CSV document plus an
//! infeasibility flag for `--strict` exit handling.

use assoc_game::{
    bs_utility_symmetric, bs_utility_two_user, centralized, estimate_bs_utility,
    estimate_c_multi, estimate_conditional, find_kstar_nstar, kstar_upper_bound,
    multi_user_equilibria, noncooperative_two_user, override_psi, price_of_anarchy,
    stackelberg_multi, stackelberg_two_user, two_user_equilibria, EquilibriumCertificate,
    GainCondition, NumericsError, OpponentDescriptor, Poa, Policy, PolicyStatistics, ProfileKind,
    PsiChoice, Scenario, SystemParams, UserProfile, Users, UsersRef, UtilityEngine,
    ValidationError, ValidationErrors,
};
use rayon::prelude::*;

use crate::config::Config;
use crate::csvout::{q9, Cell, CsvDoc};

#[derive(Debug)]
pub enum CliError {
    /// Bad inputs: exit 1.
    Validation(String),
    /// Numerical failure: exit 2.
    Numerics(String),
}

impl From<ValidationErrors> for CliError {
    fn from(e: ValidationErrors) -> Self {
        CliError::Validation(e.to_string())
    }
}
impl From<ValidationError> for CliError {
    fn from(e: ValidationError) -> Self {
        CliError::Validation(e.to_string())
    }
}
impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        CliError::Numerics(e.to_string())
    }
}

pub struct CmdOutput {
    pub csv: CsvDoc,
    pub infeasible: bool,
}

fn ok(csv: CsvDoc) -> CmdOutput {
    CmdOutput { csv, infeasible: false }
}

/// The swept parameter of a `sweep` invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Psi,
    N,
    V,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "psi" => Ok(SweepParam::Psi),
            "n" => Ok(SweepParam::N),
            "v" => Ok(SweepParam::V),
            other => Err(CliError::Validation(format!(
                "param: expected one of psi, n, v; got `{other}`"
            ))),
        }
    }

    fn column(&self) -> &'static str {
        match self {
            SweepParam::Psi => "psi",
            SweepParam::N => "n",
            SweepParam::V => "v",
        }
    }
}

/// An inclusive parameter grid. Integer parameters demand an integer stride.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    pub from: f64,
    pub to: f64,
    pub steps: u32,
}

impl SweepSpec {
    pub fn new(parameter: SweepParam, from: f64, to: f64, steps: u32) -> Result<Self, CliError> {
        if !(from.is_finite() && to.is_finite() && from < to) {
            return Err(CliError::Validation("sweep bounds: need finite from < to".into()));
        }
        if steps < 2 {
            return Err(CliError::Validation("steps: need at least 2".into()));
        }
        if parameter == SweepParam::N {
            let stride = (to - from) / (steps - 1) as f64;
            let integral = |x: f64| (x - x.round()).abs() < 1e-9;
            if !(integral(from) && integral(to) && integral(stride) && stride >= 1.0) {
                return Err(CliError::Validation(
                    "sweep over n: from, to, and the stride must be whole numbers".into(),
                ));
            }
        }
        Ok(Self { parameter, from, to, steps })
    }

    /// Grid values, endpoints inclusive, quantized through the CSV format so
    /// derived columns reproduce exactly on re-parse.
    pub fn values(&self) -> Vec<f64> {
        let stride = (self.to - self.from) / (self.steps - 1) as f64;
        (0..self.steps)
            .map(|i| {
                let raw = if i + 1 == self.steps { self.to } else { self.from + i as f64 * stride };
                if self.parameter == SweepParam::N {
                    raw.round()
                } else {
                    q9(raw)
                }
            })
            .collect()
    }
}

/// Counting view of a profile for uniform CSV columns.
fn profile_counts(profile: &ProfileKind) -> PolicyStatistics {
    profile.statistics()
}

/// Policy-slot load split for any scenario shape: the cellular share counts
/// always-cellular slots fully and gated slots by their good-state
/// probability.
fn loads(scenario: &Scenario, stats: &PolicyStatistics, profile: &ProfileKind) -> (f64, f64) {
    match (&scenario.users, profile) {
        (Users::Symmetric(u), _) => {
            let l = assoc_game::system_loads(stats, u.psi(), u, scenario.n);
            (l.load_cellular, l.load_wifi)
        }
        (Users::Two(a, b), ProfileKind::TwoUser(p1, p2)) => {
            let one = |p: &Policy, u: &UserProfile| match p {
                Policy::Cc => 1.0,
                Policy::Wc => u.alpha(),
                Policy::Ww => 0.0,
            };
            let cell = (one(p1, a) + one(p2, b)) / 2.0;
            (cell, 1.0 - cell)
        }
        _ => unreachable!("profile kind matches the population"),
    }
}

fn bs_of(scenario: &Scenario, profile: &ProfileKind) -> f64 {
    match (&scenario.users, profile) {
        (Users::Symmetric(u), ProfileKind::Symmetric(stats)) => {
            bs_utility_symmetric(stats, u.psi(), u)
        }
        (Users::Two(a, b), ProfileKind::TwoUser(p1, p2)) => bs_utility_two_user(*p1, *p2, (a, b)),
        _ => unreachable!("profile kind matches the population"),
    }
}

fn users_ref(scenario: &Scenario) -> UsersRef<'_> {
    match &scenario.users {
        Users::Symmetric(u) => UsersRef::Symmetric(u),
        Users::Two(a, b) => UsersRef::Two(a, b),
    }
}

fn equilibria_of(
    engine: &UtilityEngine,
    scenario: &Scenario,
) -> Result<Vec<EquilibriumCertificate>, NumericsError> {
    match &scenario.users {
        Users::Symmetric(_) => multi_user_equilibria(engine, scenario),
        Users::Two(..) => two_user_equilibria(engine, scenario),
    }
}

/// The equilibrium a sweep row reports: maximal base-station utility, ties
/// resolved by enumeration order.
fn select_equilibrium(
    scenario: &Scenario,
    certs: &[EquilibriumCertificate],
) -> (ProfileKind, String, f64) {
    let mut best: Option<(ProfileKind, String, f64)> = None;
    for cert in certs {
        let bs = bs_of(scenario, &cert.profile);
        if best.as_ref().map(|(_, _, b)| bs > *b).unwrap_or(true) {
            best = Some((cert.profile, cert.case_labels.join("+"), bs));
        }
    }
    best.expect("equilibrium lists are never empty")
}

pub fn cmd_utilities(cfg: &Config, psi_override: Option<f64>) -> Result<CmdOutput, CliError> {
    let scenario = apply_psi_override(&cfg.scenario, psi_override)?;
    let engine = UtilityEngine::new(scenario.system, scenario.quad_tol);
    let table = match &scenario.users {
        Users::Symmetric(u) => engine.table_symmetric(u, scenario.n)?,
        Users::Two(a, b) => engine.table_two_user(a, b)?,
    };
    let mut csv = CsvDoc::new(vec!["user", "opponents", "state", "value"]);
    for e in &table.entries {
        csv.push(vec![
            Cell::Int(e.user as i64),
            Cell::Text(e.descriptor.to_string()),
            Cell::Text(e.condition.tag().into()),
            Cell::Num(e.value),
        ]);
    }
    Ok(ok(csv))
}

fn apply_psi_override(scenario: &Scenario, psi: Option<f64>) -> Result<Scenario, CliError> {
    match psi {
        None => Ok(*scenario),
        Some(p) => {
            if !(p.is_finite() && p >= 0.0) {
                return Err(CliError::Validation("psi: threshold must be finite and >= 0".into()));
            }
            Ok(override_psi(scenario, p))
        }
    }
}

pub fn cmd_equilibria(cfg: &Config, psi_override: Option<f64>) -> Result<CmdOutput, CliError> {
    let scenario = apply_psi_override(&cfg.scenario, psi_override)?;
    let engine = UtilityEngine::new(scenario.system, scenario.quad_tol);
    let certs = equilibria_of(&engine, &scenario)?;
    let mut csv = CsvDoc::new(vec![
        "k_cc",
        "k_wc",
        "case_label",
        "min_margin",
        "bs_utility",
        "load_3g",
        "load_wifi",
    ]);
    for cert in &certs {
        let stats = profile_counts(&cert.profile);
        let bs = bs_of(&scenario, &cert.profile);
        let (l3g, lwifi) = loads(&scenario, &stats, &cert.profile);
        csv.push(vec![
            stats.k_cc().into(),
            stats.k_wc().into(),
            Cell::Text(cert.case_labels.join("+")),
            Cell::Num(cert.min_margin()),
            Cell::Num(bs),
            Cell::Num(l3g),
            Cell::Num(lwifi),
        ]);
    }
    Ok(ok(csv))
}

fn psi_cells(psi: &PsiChoice) -> (Cell, Cell) {
    match psi {
        PsiChoice::Single(x) => (Cell::Num(*x), Cell::Num(*x)),
        PsiChoice::Pair(a, b) => (Cell::Num(*a), Cell::Num(*b)),
    }
}

fn poa_cell(poa: &Poa) -> Cell {
    match poa {
        Poa::Finite(x) => Cell::Num(*x),
        Poa::Infinite => Cell::Text("inf".into()),
    }
}

pub fn cmd_centralized(cfg: &Config) -> Result<CmdOutput, CliError> {
    let out = centralized(&cfg.scenario);
    let stats = profile_counts(&out.profile);
    let (p1, p2) = psi_cells(&out.psi);
    let mut csv = CsvDoc::new(vec!["psi1", "psi2", "k_cc", "k_wc", "bs_utility", "poa"]);
    csv.push(vec![
        p1,
        p2,
        stats.k_cc().into(),
        stats.k_wc().into(),
        Cell::Num(out.bs_utility),
        poa_cell(&out.poa),
    ]);
    Ok(ok(csv))
}

pub fn cmd_stackelberg(cfg: &Config) -> Result<CmdOutput, CliError> {
    let scenario = &cfg.scenario;
    let engine = UtilityEngine::new(scenario.system, scenario.quad_tol);
    let out = match &scenario.users {
        Users::Symmetric(_) => stackelberg_multi(&engine, scenario)?,
        Users::Two(..) => stackelberg_two_user(&engine, scenario)?,
    };
    let stats = profile_counts(&out.profile);
    let (p1, p2) = psi_cells(&out.psi);
    let (k_star, n_star): (Cell, Cell) = match &out.thresholds {
        Some(t) => (t.k_star.count.into(), t.n_star.count.into()),
        None => (Cell::Text(String::new()), Cell::Text(String::new())),
    };
    let infeasible = !out.status.is_feasible();
    let mut csv = CsvDoc::new(vec![
        "psi1",
        "psi2",
        "k_cc",
        "k_wc",
        "bs_utility",
        "poa",
        "k_star",
        "n_star",
        "feasible",
    ]);
    csv.push(vec![
        p1,
        p2,
        stats.k_cc().into(),
        stats.k_wc().into(),
        Cell::Num(out.bs_utility),
        poa_cell(&out.poa),
        k_star,
        n_star,
        (!infeasible).into(),
    ]);
    Ok(CmdOutput { csv, infeasible })
}

pub fn cmd_noncoop(cfg: &Config) -> Result<CmdOutput, CliError> {
    let scenario = &cfg.scenario;
    if scenario.two_users().is_none() {
        return Err(CliError::Validation(
            "noncoop: the fully non-cooperative stage is defined for the two-user game only"
                .into(),
        ));
    }
    let engine = UtilityEngine::new(scenario.system, scenario.quad_tol);
    let out = noncooperative_two_user(&engine, scenario)?;
    let infeasible = !out.status.is_feasible();
    let mut csv = CsvDoc::new(vec![
        "psi1",
        "psi2",
        "residual1",
        "residual2",
        "iterations",
        "bs_utility",
        "poa",
        "feasible",
    ]);
    csv.push(vec![
        Cell::Num(out.psi.0),
        Cell::Num(out.psi.1),
        Cell::Num(out.residuals.0),
        Cell::Num(out.residuals.1),
        out.iterations.into(),
        Cell::Num(out.bs_utility),
        poa_cell(&out.poa),
        (!infeasible).into(),
    ]);
    Ok(CmdOutput { csv, infeasible })
}

/// Scenario with one sweep value substituted.
fn scenario_at(
    base: &Scenario,
    param: SweepParam,
    value: f64,
) -> Result<Scenario, ValidationErrors> {
    match param {
        SweepParam::Psi => Ok(override_psi(base, value)),
        SweepParam::V => {
            let system =
                SystemParams::new(base.system.power(), base.system.noise(), value)?;
            let mut out = *base;
            out.system = system;
            Ok(out)
        }
        SweepParam::N => {
            let mut out = *base;
            out.n = value as u32;
            Ok(out)
        }
    }
}

pub fn cmd_sweep(cfg: &Config, spec: &SweepSpec) -> Result<CmdOutput, CliError> {
    if spec.parameter == SweepParam::N && cfg.scenario.two_users().is_some() {
        return Err(CliError::Validation(
            "sweep over n requires a symmetric scenario".into(),
        ));
    }
    let engine = UtilityEngine::new(cfg.scenario.system, cfg.scenario.quad_tol);
    let values = spec.values();
    let rows: Vec<Result<Vec<Cell>, CliError>> = values
        .par_iter()
        .map(|&value| -> Result<Vec<Cell>, CliError> {
            let scenario = scenario_at(&cfg.scenario, spec.parameter, value)?;
            let certs = equilibria_of(&engine, &scenario)?;
            let (profile, label, bs) = select_equilibrium(&scenario, &certs);
            let stats = profile_counts(&profile);
            let (l3g, lwifi) = loads(&scenario, &stats, &profile);
            let poa = price_of_anarchy(bs, users_ref(&scenario), scenario.n);
            let lead = if spec.parameter == SweepParam::N {
                Cell::Int(value as i64)
            } else {
                Cell::Num(value)
            };
            Ok(vec![
                lead,
                stats.k_cc().into(),
                stats.k_wc().into(),
                Cell::Num(l3g),
                Cell::Num(lwifi),
                Cell::Num(bs),
                poa_cell(&poa),
                Cell::Text(label),
            ])
        })
        .collect();
    let mut csv = CsvDoc::new(vec![
        spec.parameter.column(),
        "k_cc",
        "k_wc",
        "load_3g",
        "load_wifi",
        "bs_utility",
        "poa",
        "case_label",
    ]);
    for row in rows {
        csv.push(row?);
    }
    Ok(ok(csv))
}

pub fn cmd_poa_curve(cfg: &Config, n_from: u32, n_to: u32) -> Result<CmdOutput, CliError> {
    if cfg.scenario.two_users().is_some() {
        return Err(CliError::Validation("poa-curve requires a symmetric scenario".into()));
    }
    if !(2 <= n_from && n_from < n_to) {
        return Err(CliError::Validation("poa-curve: need 2 <= n-from < n-to".into()));
    }
    let engine = UtilityEngine::new(cfg.scenario.system, cfg.scenario.quad_tol);
    let mut csv = CsvDoc::new(vec![
        "n",
        "k_star",
        "n_star",
        "psi",
        "k_cc",
        "k_wc",
        "bs_utility",
        "poa",
        "feasible",
    ]);
    let mut infeasible = false;
    // Ascending n reuses every candidate cell already solved for smaller
    // populations through the shared utility cache.
    for n in n_from..=n_to {
        let mut scenario = cfg.scenario;
        scenario.n = n;
        let out = stackelberg_multi(&engine, &scenario)?;
        let stats = profile_counts(&out.profile);
        let psi = match out.psi {
            PsiChoice::Single(x) => x,
            PsiChoice::Pair(a, _) => a,
        };
        let t = out.thresholds.expect("symmetric outcome carries thresholds");
        infeasible |= !out.status.is_feasible();
        csv.push(vec![
            n.into(),
            t.k_star.count.into(),
            t.n_star.count.into(),
            Cell::Num(psi),
            stats.k_cc().into(),
            stats.k_wc().into(),
            Cell::Num(out.bs_utility),
            poa_cell(&out.poa),
            out.status.is_feasible().into(),
        ]);
    }
    Ok(CmdOutput { csv, infeasible })
}

pub fn cmd_oracle(
    cfg: &Config,
    samples_override: Option<u64>,
    seed_override: Option<u64>,
) -> Result<CmdOutput, CliError> {
    let scenario = &cfg.scenario;
    let samples = samples_override.unwrap_or(cfg.mc_samples).max(1000);
    let seed = seed_override.unwrap_or(scenario.seed);
    let engine = UtilityEngine::new(scenario.system, scenario.quad_tol);
    let sys = &scenario.system;
    let atol = 100.0 * scenario.quad_tol;

    struct Row {
        quantity: String,
        analytic: f64,
        est: assoc_game::McEstimate,
    }
    let mut rows: Vec<Row> = Vec::new();

    match &scenario.users {
        Users::Symmetric(user) => {
            let n = scenario.n;
            let k1 = 2.min(n - 1);
            let k2 = 3.min(n - 1 - k1);
            for (h, cc, wc) in [(0.7, 1.min(n - 1), 0), (1.3, 0, 1.min(n - 1)), (1.0, k1, k2)] {
                rows.push(Row {
                    quantity: format!("c[c{cc}w{wc}](h={h})"),
                    analytic: engine.c_multi(h, cc, wc, user)?,
                    est: estimate_c_multi(h, cc, wc, user, sys, samples, seed),
                });
            }
            let mut conds = vec![(0u32, 0u32, GainCondition::Good), (k1, k2, GainCondition::Unconditional)];
            if user.psi() > 0.0 {
                conds.push((1.min(n - 1), 0, GainCondition::Bad));
            }
            for (cc, wc, cond) in conds {
                let desc = OpponentDescriptor::Counts { cc, wc };
                rows.push(Row {
                    quantity: format!("C[c{cc}w{wc}]({})", cond.tag()),
                    analytic: engine.multi_utility(cc, wc, cond, user)?,
                    est: estimate_conditional(desc, cond, user, None, sys, samples, seed)?,
                });
            }
            for stats in [
                PolicyStatistics::new(2.min(n), 3.min(n - 2.min(n)), n).expect("valid counts"),
                PolicyStatistics::new(n, 0, n).expect("valid counts"),
            ] {
                rows.push(Row {
                    quantity: format!("U_BS[{stats}]"),
                    analytic: bs_utility_symmetric(&stats, user.psi(), user),
                    est: estimate_bs_utility(&stats, user.psi(), user, samples, seed),
                });
            }
        }
        Users::Two(a, b) => {
            rows.push(Row {
                quantity: "c_cc(u1, h=1)".into(),
                analytic: engine.c_cc_two_user(1.0, b)?,
                est: estimate_c_multi(1.0, 1, 0, b, sys, samples, seed),
            });
            rows.push(Row {
                quantity: "c_wc(u1, h=1)".into(),
                analytic: engine.c_wc_two_user(1.0, b)?,
                est: estimate_c_multi(1.0, 0, 1, b, sys, samples, seed),
            });
            rows.push(Row {
                quantity: "C1_wc(good)".into(),
                analytic: engine.two_user_utility(Policy::Wc, GainCondition::Good, a, b)?,
                est: estimate_conditional(
                    OpponentDescriptor::Policy(Policy::Wc),
                    GainCondition::Good,
                    a,
                    Some(b),
                    sys,
                    samples,
                    seed,
                )?,
            });
            if b.psi() > 0.0 {
                rows.push(Row {
                    quantity: "C2_cc(bad)".into(),
                    analytic: engine.two_user_utility(Policy::Cc, GainCondition::Bad, b, a)?,
                    est: estimate_conditional(
                        OpponentDescriptor::Policy(Policy::Cc),
                        GainCondition::Bad,
                        b,
                        Some(a),
                        sys,
                        samples,
                        seed,
                    )?,
                });
            }
            rows.push(Row {
                quantity: "C1_ww(any)".into(),
                analytic: engine.two_user_utility(Policy::Ww, GainCondition::Unconditional, a, b)?,
                est: estimate_conditional(
                    OpponentDescriptor::Policy(Policy::Ww),
                    GainCondition::Unconditional,
                    a,
                    Some(b),
                    sys,
                    samples,
                    seed,
                )?,
            });
        }
    }

    let mut csv = CsvDoc::new(vec![
        "case",
        "quantity",
        "analytic",
        "mc_mean",
        "mc_stderr",
        "z_score",
        "pass",
    ]);
    for (i, row) in rows.iter().enumerate() {
        let z = row.est.z_score(row.analytic, atol);
        csv.push(vec![
            Cell::Int(i as i64),
            Cell::Text(row.quantity.clone()),
            Cell::Num(row.analytic),
            Cell::Num(row.est.mean),
            Cell::Num(row.est.stderr),
            Cell::Num(z),
            (z <= 4.0).into(),
        ]);
    }
    Ok(ok(csv))
}

pub fn cmd_bound(cfg: &Config) -> Result<CmdOutput, CliError> {
    let scenario = &cfg.scenario;
    if scenario.symmetric_user().is_none() {
        return Err(CliError::Validation("bound requires a symmetric scenario".into()));
    }
    let engine = UtilityEngine::new(scenario.system, scenario.quad_tol);
    let bound = kstar_upper_bound(&engine, scenario)?;
    let n_max = bound.k_double_star.max(scenario.n) + 8;
    let t = find_kstar_nstar(&engine, scenario, n_max)?;
    let mut csv = CsvDoc::new(vec![
        "k_double_star",
        "k_plus",
        "floor",
        "degenerate",
        "k_star",
        "n_star",
    ]);
    csv.push(vec![
        bound.k_double_star.into(),
        match bound.k_plus {
            Some(x) => Cell::Num(x),
            None => Cell::Text(String::new()),
        },
        Cell::Num(bound.floor),
        bound.degenerate.into(),
        t.k_star.count.into(),
        t.n_star.count.into(),
    ]);
    Ok(ok(csv))
}
