//! Plain `key = value` configuration files: trivially parseable, diff-friendly
//! fixtures. `#` starts a comment; suffixed keys (`lambda1`, `psi2`, ...)
//! switch to two-user mode and override the shared value.

use std::collections::BTreeMap;

use assoc_game::{default_psi_max, Scenario, SystemParams, UserProfile, Users, ValidationError, ValidationErrors};

pub const KEYS: &[&str] = &[
    "lambda", "beta", "v", "p", "sigma2", "n", "psi", "quad_tol", "root_tol", "psi_max", "seed",
    "mc_samples", "lambda1", "lambda2", "beta1", "beta2", "psi1", "psi2",
];

/// Scenario plus the driver-level settings that are not part of the solver
/// contract.
#[derive(Debug, Clone)]
pub struct Config {
    pub scenario: Scenario,
    pub mc_samples: u64,
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ValidationErrors> {
    let mut map = BTreeMap::new();
    let mut problems = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            problems.push(ValidationError::new(
                format!("line {}", lineno + 1),
                "expected `key = value`",
            ));
            continue;
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            problems.push(ValidationError::new(key.clone(), "unknown configuration key"));
            continue;
        }
        if map.insert(key.clone(), value).is_some() {
            problems.push(ValidationError::new(key, "duplicate configuration key"));
        }
    }
    if problems.is_empty() {
        Ok(map)
    } else {
        Err(ValidationErrors(problems))
    }
}

struct Reader {
    map: BTreeMap<String, String>,
    problems: Vec<ValidationError>,
}

impl Reader {
    fn float(&mut self, key: &str) -> Option<f64> {
        let raw = self.map.get(key)?;
        match raw.parse::<f64>() {
            Ok(x) => Some(x),
            Err(_) => {
                self.problems.push(ValidationError::new(key, "not a number"));
                None
            }
        }
    }

    fn integer(&mut self, key: &str) -> Option<u64> {
        let raw = self.map.get(key)?;
        match raw.parse::<u64>() {
            Ok(x) => Some(x),
            Err(_) => {
                self.problems.push(ValidationError::new(key, "not a non-negative integer"));
                None
            }
        }
    }

    fn require_float(&mut self, key: &str) -> Option<f64> {
        let v = self.float(key);
        if v.is_none() && !self.map.contains_key(key) {
            self.problems.push(ValidationError::new(key, "missing required key"));
        }
        v
    }
}

/// Parse a configuration file into a validated scenario.
pub fn parse_config(text: &str) -> Result<Config, ValidationErrors> {
    let map = parse_pairs(text)?;
    let two_user = ["lambda1", "lambda2", "beta1", "beta2", "psi1", "psi2"]
        .iter()
        .any(|k| map.contains_key(*k));
    let mut r = Reader { map, problems: Vec::new() };

    let p = r.float("p").unwrap_or(1.0);
    let sigma2 = r.float("sigma2").unwrap_or(1.0);
    let v = r.require_float("v").unwrap_or(f64::NAN);
    let quad_tol = r.float("quad_tol").unwrap_or(1e-9);
    let root_tol = r.float("root_tol").unwrap_or(1e-7);
    let seed = r.integer("seed").unwrap_or(0);
    let mc_samples = r.integer("mc_samples").unwrap_or(100_000);

    let profile = |r: &mut Reader, suffix: &str| -> Option<UserProfile> {
        let pick = |r: &mut Reader, base: &str| -> Option<f64> {
            let specific = format!("{base}{suffix}");
            if r.map.contains_key(&specific) {
                r.float(&specific)
            } else if r.map.contains_key(base) {
                r.float(base)
            } else {
                r.problems.push(ValidationError::new(
                    if suffix.is_empty() { base.to_string() } else { specific },
                    "missing required key",
                ));
                None
            }
        };
        let lambda = pick(r, "lambda")?;
        let beta = pick(r, "beta")?;
        let psi = pick(r, "psi")?;
        match UserProfile::new(lambda, beta, psi) {
            Ok(u) => Some(u),
            Err(e) => {
                r.problems.extend(e.0);
                None
            }
        }
    };

    let (users, n, min_lambda) = if two_user {
        if let Some(n) = r.integer("n") {
            if n != 2 {
                r.problems.push(ValidationError::new("n", "two-user mode requires n = 2"));
            }
        }
        let u1 = profile(&mut r, "1");
        let u2 = profile(&mut r, "2");
        match (u1, u2) {
            (Some(a), Some(b)) => {
                let ml = a.lambda().min(b.lambda());
                (Some(Users::Two(a, b)), 2u32, ml)
            }
            _ => (None, 2, 1.0),
        }
    } else {
        let n = match r.integer("n") {
            Some(n) if n >= 2 && n <= u32::MAX as u64 => n as u32,
            Some(_) => {
                r.problems.push(ValidationError::new("n", "at least two players"));
                2
            }
            None => {
                r.problems.push(ValidationError::new("n", "missing required key"));
                2
            }
        };
        let u = profile(&mut r, "");
        (u.map(Users::Symmetric), n, u.map(|x| x.lambda()).unwrap_or(1.0))
    };

    let psi_max = r.float("psi_max").unwrap_or_else(|| default_psi_max(min_lambda));

    let system = match SystemParams::new(p, sigma2, v) {
        Ok(s) => Some(s),
        Err(e) => {
            r.problems.extend(e.0);
            None
        }
    };

    if !r.problems.is_empty() {
        return Err(ValidationErrors(r.problems));
    }
    let (system, users) = (system.expect("checked"), users.expect("checked"));
    let scenario = Scenario::new(system, n, users, quad_tol, root_tol, psi_max, seed)?;
    Ok(Config { scenario, mc_samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_defaults_and_required_keys() {
        let cfg = parse_config(
            "# reference scenario\nlambda = 0.6\nbeta = 0.5\nv = 0.25\nn = 9\npsi = 1.0\n",
        )
        .unwrap();
        assert_eq!(cfg.scenario.n, 9);
        assert_eq!(cfg.scenario.system.power(), 1.0);
        assert_eq!(cfg.scenario.quad_tol, 1e-9);
        assert_eq!(cfg.mc_samples, 100_000);
        assert!((cfg.scenario.psi_max - 50.0 / 0.6).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_is_rejected_naming_the_field() {
        let e = parse_config("lambda=0.6\nbeta=0.5\nv=0.25\nn=9\npsi=1\nsigma2=0\n").unwrap_err();
        assert!(e.to_string().contains("sigma2"), "{e}");
    }

    #[test]
    fn single_player_is_rejected() {
        let e = parse_config("lambda=0.6\nbeta=0.5\nv=0.25\nn=1\npsi=1\n").unwrap_err();
        assert!(e.to_string().contains("at least two players"), "{e}");
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let e = parse_config("lambda=0.6\nwhat=1\n").unwrap_err();
        assert!(e.to_string().contains("what"), "{e}");
        let e = parse_config("lambda=0.6\nlambda=0.7\n").unwrap_err();
        assert!(e.to_string().contains("duplicate"), "{e}");
    }

    #[test]
    fn suffixed_keys_switch_to_two_user_mode() {
        let cfg = parse_config(
            "lambda = 0.6\nlambda2 = 1.2\nbeta = 0.5\npsi = 1.0\nv = 0.25\n",
        )
        .unwrap();
        let (a, b) = cfg.scenario.two_users().unwrap();
        assert_eq!(a.lambda(), 0.6);
        assert_eq!(b.lambda(), 1.2);
        assert_eq!(a.beta(), 0.5);
        assert_eq!(cfg.scenario.n, 2);
    }

    #[test]
    fn missing_rate_is_reported() {
        let e = parse_config("lambda=0.6\nbeta=0.5\nn=4\npsi=1\n").unwrap_err();
        assert!(e.to_string().contains('v'), "{e}");
    }
}
