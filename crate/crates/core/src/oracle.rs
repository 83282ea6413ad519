//! Monte-Carlo brute force of every analytic quantity: draw channel gains and
//! demands, apply the policies, score realized throughputs, and average.
//!
//! The estimators deliberately avoid the analytic integration machinery; they
//! only share the realized-throughput formula, so agreement between the two
//! routes validates the quadrature stack end to end. Accumulation uses
//! fixed-size chunks with compensated summation merged in index order, which
//! makes results identical for any worker count.

use rayon::prelude::*;

use crate::model::{Policy, PolicyStatistics, SystemParams, UserProfile};
use crate::rng::SampleStream;
use crate::utility::{GainCondition, NumericsError, OpponentDescriptor};

const CHUNK: u64 = 4096;

/// A Monte-Carlo estimate with its standard error and provenance.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: u64,
    pub seed: u64,
}

impl McEstimate {
    /// Absolute z-score of an analytic value against this estimate. A zero
    /// standard error degenerates to exact comparison scaled by `atol`.
    pub fn z_score(&self, analytic: f64, atol: f64) -> f64 {
        let diff = (analytic - self.mean).abs();
        if self.stderr > 0.0 {
            diff / self.stderr
        } else if diff <= atol {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    #[inline]
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Realized throughput of each user for one channel/demand/action draw:
/// cellular users share the spectrum through the interference sum, WiFi users
/// with demand get the constant rate, idle users get zero.
pub fn simulate_throughput(
    gains: &[f64],
    cellular: &[bool],
    demands: &[bool],
    sys: &SystemParams,
) -> Vec<f64> {
    assert_eq!(gains.len(), cellular.len());
    assert_eq!(gains.len(), demands.len());
    let p = sys.power();
    let total_interference: f64 = gains
        .iter()
        .zip(cellular)
        .zip(demands)
        .filter(|((_, &a), &b)| a && b)
        .map(|((&h, _), _)| h)
        .sum();
    gains
        .iter()
        .zip(cellular)
        .zip(demands)
        .map(|((&h, &a), &b)| {
            if !b {
                0.0
            } else if a {
                let others = total_interference - h;
                (p * h / (sys.noise() + p * others)).ln_1p()
            } else {
                sys.wifi_rate()
            }
        })
        .collect()
}

fn mean_stderr(chunks: Vec<(Kahan, Kahan)>, samples: u64, seed: u64) -> McEstimate {
    let mut sum = Kahan::default();
    let mut sumsq = Kahan::default();
    for (s, s2) in chunks {
        sum.add(s.total());
        sumsq.add(s2.total());
    }
    let n = samples as f64;
    let mean = sum.total() / n;
    let var = ((sumsq.total() - n * mean * mean) / (n - 1.0).max(1.0)).max(0.0);
    McEstimate { mean, stderr: (var / n).sqrt(), samples, seed }
}

fn chunked_estimate<F: Fn(u64) -> f64 + Sync>(
    samples: u64,
    seed: u64,
    value_of_sample: F,
) -> McEstimate {
    let chunk_count = samples.div_ceil(CHUNK);
    let chunks: Vec<(Kahan, Kahan)> = (0..chunk_count)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * CHUNK;
            let hi = ((ci + 1) * CHUNK).min(samples);
            let mut s = Kahan::default();
            let mut s2 = Kahan::default();
            for i in lo..hi {
                let x = value_of_sample(i);
                s.add(x);
                s2.add(x * x);
            }
            (s, s2)
        })
        .collect();
    mean_stderr(chunks, samples, seed)
}

/// Draw one opponent's contribution for a sample stream: (uses cellular,
/// gain). The draw layout is fixed per opponent so streams stay aligned
/// regardless of which branches fire.
#[inline]
fn draw_opponent(stream: &mut SampleStream, policy: Policy, user: &UserProfile) -> (bool, f64) {
    let demand = stream.next_bool(user.beta());
    let gain = stream.next_exp(user.lambda());
    let cellular = match policy {
        Policy::Cc => demand,
        Policy::Wc => demand && gain > user.psi(),
        Policy::Ww => false,
    };
    (cellular && demand, gain)
}

/// Estimate the pointwise symmetric-game rate at own gain `h` against
/// `k_cc` always-cellular and `k_wc` threshold-gated opponents.
pub fn estimate_c_multi(
    h: f64,
    k_cc: u32,
    k_wc: u32,
    user: &UserProfile,
    sys: &SystemParams,
    samples: u64,
    seed: u64,
) -> McEstimate {
    assert!(samples >= 1);
    let case = 0x6d75_6c74u64 ^ ((k_cc as u64) << 32 | k_wc as u64);
    chunked_estimate(samples, seed, |i| {
        let mut stream = SampleStream::new(seed, case, i);
        let total = k_cc + k_wc + 1;
        let mut gains = Vec::with_capacity(total as usize);
        let mut cellular = Vec::with_capacity(total as usize);
        let mut demands = Vec::with_capacity(total as usize);
        gains.push(h);
        cellular.push(true);
        demands.push(true);
        for j in 0..(k_cc + k_wc) {
            let policy = if j < k_cc { Policy::Cc } else { Policy::Wc };
            let (on, gain) = draw_opponent(&mut stream, policy, user);
            gains.push(gain);
            cellular.push(on);
            demands.push(on);
        }
        simulate_throughput(&gains, &cellular, &demands, sys)[0]
    })
}

/// Estimate a conditional utility: own gain drawn by inverse CDF restricted
/// to the conditioning interval, opponents realized per descriptor.
pub fn estimate_conditional(
    desc: OpponentDescriptor,
    cond: GainCondition,
    user: &UserProfile,
    opponent: Option<&UserProfile>,
    sys: &SystemParams,
    samples: u64,
    seed: u64,
) -> Result<McEstimate, NumericsError> {
    assert!(samples >= 1);
    let alpha = user.alpha();
    match cond {
        GainCondition::Bad if 1.0 - alpha < 1e-6 => {
            return Err(NumericsError::EmptyConditioningSet {
                state: "bad",
                probability: 1.0 - alpha,
            })
        }
        GainCondition::Good if alpha < 1e-6 => {
            return Err(NumericsError::EmptyConditioningSet { state: "good", probability: alpha })
        }
        _ => {}
    }
    let case = 0x636f_6e64u64
        ^ match desc {
            OpponentDescriptor::Policy(p) => p as u64,
            OpponentDescriptor::Counts { cc, wc } => 0x100 | (cc as u64) << 32 | (wc as u64) << 9,
        };
    let est = chunked_estimate(samples, seed, |i| {
        let mut stream = SampleStream::new(seed, case, i);
        let u = stream.next_f64();
        let own = match cond {
            GainCondition::Bad => {
                let one_minus_alpha = -(-user.lambda() * user.psi()).exp_m1();
                -(-u * one_minus_alpha).ln_1p() / user.lambda()
            }
            GainCondition::Good => user.psi() + -(-u).ln_1p() / user.lambda(),
            GainCondition::Unconditional => -(-u).ln_1p() / user.lambda(),
        };
        match desc {
            OpponentDescriptor::Policy(policy) => {
                let opp = opponent.expect("two-user descriptor requires an opponent profile");
                let (on, gain) = draw_opponent(&mut stream, policy, opp);
                let gains = [own, gain];
                let cellular = [true, on];
                let demands = [true, on];
                simulate_throughput(&gains, &cellular, &demands, sys)[0]
            }
            OpponentDescriptor::Counts { cc, wc } => {
                let total = cc + wc + 1;
                let mut gains = Vec::with_capacity(total as usize);
                let mut cellular = Vec::with_capacity(total as usize);
                let mut demands = Vec::with_capacity(total as usize);
                gains.push(own);
                cellular.push(true);
                demands.push(true);
                for j in 0..(cc + wc) {
                    let policy = if j < cc { Policy::Cc } else { Policy::Wc };
                    let (on, gain) = draw_opponent(&mut stream, policy, user);
                    gains.push(gain);
                    cellular.push(on);
                    demands.push(on);
                }
                simulate_throughput(&gains, &cellular, &demands, sys)[0]
            }
        }
    });
    Ok(est)
}

/// Estimate the expected number of demanding users on cellular under the
/// given policy counts and threshold.
pub fn estimate_bs_utility(
    stats: &PolicyStatistics,
    psi: f64,
    user: &UserProfile,
    samples: u64,
    seed: u64,
) -> McEstimate {
    assert!(samples >= 1);
    let case = 0x6273_7574u64 ^ ((stats.k_cc() as u64) << 32 | stats.k_wc() as u64);
    let gated = user.with_psi(psi).expect("threshold override must be valid");
    chunked_estimate(samples, seed, |i| {
        let mut stream = SampleStream::new(seed, case, i);
        let mut count = 0u32;
        for _ in 0..stats.k_cc() {
            if stream.next_bool(user.beta()) {
                count += 1;
            }
        }
        for _ in 0..stats.k_wc() {
            let (on, _) = draw_opponent(&mut stream, Policy::Wc, &gated);
            if on {
                count += 1;
            }
        }
        count as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SystemParams;
    use approx::assert_abs_diff_eq;

    fn sys() -> SystemParams {
        SystemParams::new(1.0, 1.0, 0.25).unwrap()
    }

    fn user(lambda: f64, beta: f64, psi: f64) -> UserProfile {
        UserProfile::new(lambda, beta, psi).unwrap()
    }

    #[test]
    fn throughput_examples() {
        let s = sys();
        let out = simulate_throughput(&[std::f64::consts::E - 1.0], &[true], &[true], &s);
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-15);

        let out = simulate_throughput(&[2.0], &[true], &[false], &s);
        assert_eq!(out[0], 0.0);

        let out = simulate_throughput(&[1.0, 1.0], &[true, true], &[true, true], &s);
        assert_abs_diff_eq!(out[0], 1.5f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 1.5f64.ln(), epsilon = 1e-15);

        let out = simulate_throughput(&[1.0, 1.0], &[false, true], &[true, true], &s);
        assert_eq!(out[0], 0.25);
    }

    #[test]
    fn degenerate_estimates_are_exact() {
        let s = sys();
        let u = user(0.6, 0.5, 1.0);
        let est = estimate_c_multi(1.3, 0, 0, &u, &s, 2000, 9);
        assert_eq!(est.mean, (1.3f64).ln_1p());
        assert_eq!(est.stderr, 0.0);

        let idle = user(0.6, 0.0, 1.0);
        let est = estimate_c_multi(1.3, 2, 3, &idle, &s, 2000, 9);
        assert_eq!(est.mean, (1.3f64).ln_1p());
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn determinism_across_repeat_runs() {
        let s = sys();
        let u = user(0.6, 0.5, 1.0);
        let a = estimate_c_multi(1.0, 2, 3, &u, &s, 50_000, 1234);
        let b = estimate_c_multi(1.0, 2, 3, &u, &s, 50_000, 1234);
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn determinism_across_worker_counts() {
        let s = sys();
        let u = user(0.6, 0.5, 1.0);
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let quad = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = single.install(|| estimate_c_multi(1.0, 2, 3, &u, &s, 30_000, 77));
        let b = quad.install(|| estimate_c_multi(1.0, 2, 3, &u, &s, 30_000, 77));
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn conditional_empty_set_errors() {
        let s = sys();
        let u = user(0.6, 0.5, 0.0);
        let err = estimate_conditional(
            OpponentDescriptor::Counts { cc: 0, wc: 0 },
            GainCondition::Bad,
            &u,
            None,
            &s,
            1000,
            5,
        );
        assert!(err.is_err());
    }

    #[test]
    fn bs_utility_estimate_matches_formula() {
        let s = sys();
        let _ = s;
        let u = user(0.6, 0.5, 1.0);
        let stats = PolicyStatistics::new(2, 3, 9).unwrap();
        let est = estimate_bs_utility(&stats, 1.0, &u, 200_000, 31);
        let exact = 0.5 * (2.0 + 3.0 * (-0.6f64).exp());
        assert!(est.z_score(exact, 1e-12) < 4.0, "z = {}", est.z_score(exact, 1e-12));
    }

    #[test]
    fn stderr_shrinks_with_sample_count() {
        let s = sys();
        let u = user(0.6, 0.5, 1.0);
        let small = estimate_c_multi(1.0, 1, 1, &u, &s, 10_000, 2024);
        let large = estimate_c_multi(1.0, 1, 1, &u, &s, 1_000_000, 2024);
        let ratio = small.stderr / large.stderr;
        assert!((ratio - 10.0).abs() < 2.0, "ratio = {ratio}");
    }
}
