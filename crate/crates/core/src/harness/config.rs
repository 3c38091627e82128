//! Experiment configuration: profiles, TOML files with dotted section keys and
//! command-line overrides of the same dotted names.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::calibrate::{EkiConfig, InitialStateMode, McmcConfig};
use crate::dynamics::{IntegratorConfig, ParamName, Params, SystemShape, MAX_STABLE_DT};
use crate::statistics::SnapshotPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Smoke,
}

impl std::str::FromStr for Profile {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Profile::Paper),
            "smoke" => Ok(Profile::Smoke),
            other => Err(HarnessError::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(rename = "K")]
    pub n_slow: usize,
    #[serde(rename = "J")]
    pub n_fast: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    #[serde(rename = "F")]
    pub forcing: f64,
    pub h: f64,
    pub c: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    /// Length of the control run at the true parameters, days.
    pub duration: f64,
    /// Steady-state initial conditions are sampled from the control run after this many days.
    pub snapshot_after: f64,
    pub snapshot_interval: f64,
    /// Pool variances over statistically equivalent entries.
    pub pooled_variance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    /// Accumulation window of the full-system objective, days.
    #[serde(rename = "T")]
    pub slow: f64,
    /// Accumulation window of the fast-column objective, days.
    #[serde(rename = "T_fast")]
    pub fast: f64,
    /// Accumulation window of potential-energy scans, days.
    pub scan: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EkiSection {
    pub sizes: Vec<usize>,
    pub max_iter: usize,
    pub perturb: bool,
    pub initial_state: InitialStateMode,
    pub collapse_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmStart {
    /// Final mean of an ensemble Kalman inversion on the same target.
    Eki,
    /// Prior centers of the calibrated parameters.
    Prior,
    /// The `init` values of the section.
    Values,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSection {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub adapt: bool,
    /// Proposal step as a fraction of the prior standard deviation.
    pub scale_fraction: f64,
    pub r: f64,
    pub bins: usize,
    pub warm_start: WarmStart,
    /// Ensemble size of the warm-start inversion.
    pub warm_start_size: usize,
    /// Starting point `[F, h, c, b]` when `warm_start = "values"`.
    pub init: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FastSection {
    pub slow_value: f64,
    pub r: f64,
    pub control_duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    pub param: String,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub duration: f64,
    pub sample_interval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    /// Length of the control run checked against the steady-state balances, days.
    pub identity_duration: f64,
    pub identity_tol: f64,
    pub energy_tol: f64,
    pub mcmc_steps: usize,
    /// Multiplier on the coupling term of the conservative tendency; anything
    /// but 1 corrupts it.
    pub coupling_sign: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub system: SystemSection,
    pub truth: TruthSection,
    pub integrator: IntegratorSection,
    pub control: ControlSection,
    pub windows: WindowSection,
    pub noise: NoiseSection,
    pub eki: EkiSection,
    pub mcmc: McmcSection,
    pub fast: FastSection,
    pub scan: ScanSection,
    pub simulate: SimulateSection,
    pub validate: ValidateSection,
}

impl ExperimentConfig {
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            seed: 0,
            system: SystemSection { n_slow: 36, n_fast: 10 },
            truth: TruthSection {
                forcing: 10.0,
                h: 1.0,
                c: 10.0,
                b: 10.0,
            },
            integrator: IntegratorSection { dt: 1e-3 },
            control: ControlSection {
                duration: 46_416.0,
                snapshot_after: 1000.0,
                snapshot_interval: 100.0,
                pooled_variance: false,
            },
            windows: WindowSection {
                slow: 100.0,
                fast: 20.0,
                scan: 10_000.0,
            },
            noise: NoiseSection {
                levels: vec![0.1, 0.2, 0.5, 1.0],
            },
            eki: EkiSection {
                sizes: vec![10, 100],
                max_iter: 25,
                perturb: true,
                initial_state: InitialStateMode::Shared,
                collapse_tol: 1e-10,
            },
            mcmc: McmcSection {
                n_iter: 2200,
                burn_in: 200,
                thin: 2,
                adapt: true,
                scale_fraction: 0.02,
                r: 0.5,
                bins: 30,
                warm_start: WarmStart::Eki,
                warm_start_size: 100,
                init: [10.0, 1.0, 10.0, 10.0],
            },
            fast: FastSection {
                slow_value: 2.556,
                r: 0.5,
                control_duration: 46_416.0,
            },
            scan: ScanSection {
                param: "F".into(),
                lo: 8.0,
                hi: 12.0,
                points: 21,
            },
            simulate: SimulateSection {
                duration: 100.0,
                sample_interval: 1.0,
            },
            validate: ValidateSection {
                identity_duration: 10_000.0,
                identity_tol: 0.02,
                energy_tol: 1e-6,
                mcmc_steps: 100_000,
                coupling_sign: 1.0,
            },
        }
    }

    /// Scaled-down configuration for quick end-to-end runs.
    pub fn smoke() -> Self {
        let mut c = Self::paper();
        c.profile = Profile::Smoke;
        c.system = SystemSection { n_slow: 8, n_fast: 4 };
        c.control.duration = 500.0;
        c.control.snapshot_after = 50.0;
        c.control.snapshot_interval = 10.0;
        c.windows = WindowSection {
            slow: 10.0,
            fast: 5.0,
            scan: 50.0,
        };
        c.eki.sizes = vec![10];
        c.mcmc.n_iter = 200;
        c.mcmc.burn_in = 20;
        c.mcmc.warm_start_size = 10;
        c.fast.control_duration = 500.0;
        c.scan.points = 5;
        c.simulate.duration = 10.0;
        c.validate.identity_duration = 2000.0;
        c.validate.mcmc_steps = 20_000;
        c
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Smoke => Self::smoke(),
        }
    }

    /// Profile defaults, then the file, then `key = value` overrides in order.
    pub fn load(profile: Profile, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, HarnessError> {
        let mut value = toml::Value::try_from(Self::for_profile(profile)).map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
            let file_value: toml::Table = toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
            if let Some(p) = file_value.get("profile").and_then(|v| v.as_str()) {
                if p.parse::<Profile>()? != profile {
                    value = toml::Value::try_from(Self::for_profile(p.parse()?))
                        .map_err(|e| HarnessError::Config(e.to_string()))?;
                }
            }
            merge(&mut value, toml::Value::Table(file_value));
        }
        for (key, raw) in overrides {
            set_dotted(&mut value, key, parse_scalar(raw))?;
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        SystemShape::new(self.system.n_slow, self.system.n_fast).map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.integrator.dt > 0.0 && self.integrator.dt <= MAX_STABLE_DT) {
            return bad(format!("integrator.dt = {} outside (0, {MAX_STABLE_DT}]", self.integrator.dt));
        }
        for (name, v) in [
            ("control.duration", self.control.duration),
            ("windows.T", self.windows.slow),
            ("windows.T_fast", self.windows.fast),
            ("windows.scan", self.windows.scan),
            ("fast.control_duration", self.fast.control_duration),
            ("validate.identity_duration", self.validate.identity_duration),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.simulate.duration >= 0.0) || !(self.simulate.sample_interval > 0.0) {
            return bad("simulate.duration must be >= 0 and simulate.sample_interval > 0".into());
        }
        if self.noise.levels.is_empty() || self.noise.levels.iter().any(|r| !(*r > 0.0)) {
            return bad("noise.levels must be non-empty and positive".into());
        }
        if self.eki.sizes.iter().any(|m| *m < 2) {
            return bad("eki.sizes must all be at least 2".into());
        }
        if !(self.mcmc.r > 0.0) || !(self.fast.r > 0.0) {
            return bad("noise levels of mcmc and fast must be positive".into());
        }
        if self.mcmc.burn_in >= self.mcmc.n_iter || self.mcmc.thin == 0 || self.mcmc.bins == 0 {
            return bad("mcmc needs burn_in < n_iter, thin >= 1, bins >= 1".into());
        }
        if self.mcmc.warm_start == WarmStart::Eki && self.mcmc.warm_start_size < 2 {
            return bad("mcmc.warm_start_size must be at least 2".into());
        }
        if ParamName::from_label(&self.scan.param).is_none() {
            return bad(format!("scan.param `{}` is not one of F, h, c, b", self.scan.param));
        }
        if self.scan.points == 0 || !(self.scan.hi >= self.scan.lo) {
            return bad("scan needs points >= 1 and hi >= lo".into());
        }
        Ok(())
    }

    pub fn shape(&self) -> SystemShape {
        SystemShape::new(self.system.n_slow, self.system.n_fast).expect("validated shape")
    }

    pub fn truth(&self) -> Params {
        Params::new(self.truth.forcing, self.truth.h, self.truth.c, self.truth.b)
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig::new(self.integrator.dt).expect("validated step")
    }

    pub fn snapshot_plan(&self) -> SnapshotPlan {
        SnapshotPlan {
            interval: self.control.snapshot_interval,
            after: self.control.snapshot_after.min(self.control.duration),
        }
    }

    pub fn eki_config(&self, ensemble_size: usize, seed: u64) -> EkiConfig {
        EkiConfig {
            ensemble_size,
            max_iter: self.eki.max_iter,
            perturb: self.eki.perturb,
            seed,
            initial_state: self.eki.initial_state,
            collapse_tol: self.eki.collapse_tol,
        }
    }

    pub fn mcmc_config(&self, seed: u64, prior_std: &[f64]) -> McmcConfig {
        McmcConfig {
            n_iter: self.mcmc.n_iter,
            burn_in: self.mcmc.burn_in,
            thin: self.mcmc.thin,
            proposal_scale: prior_std.iter().map(|s| s * self.mcmc.scale_fraction).collect(),
            adapt: self.mcmc.adapt,
            seed,
        }
    }

    /// Evenly spaced scan grid, inclusive of both ends.
    pub fn scan_grid(&self) -> Vec<f64> {
        let n = self.scan.points;
        if n == 1 {
            return vec![self.scan.lo];
        }
        (0..n)
            .map(|i| self.scan.lo + (self.scan.hi - self.scan.lo) * i as f64 / (n - 1) as f64)
            .collect()
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Interpret a command-line value as a TOML literal, falling back to a string.
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), HarnessError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("`{key}` does not name a setting")))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) {
                return Err(HarnessError::Config(format!("unknown setting `{key}`")));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .get_mut(*part)
            .ok_or_else(|| HarnessError::Config(format!("unknown section in `{key}`")))?;
    }
    Ok(())
}

/// Split `--section.key value` and `--section.key=value` pairs out of an
/// argument list, returning the remaining arguments and the overrides.
pub fn extract_overrides<I: IntoIterator<Item = String>>(args: I) -> Result<(Vec<String>, Vec<(String, String)>), HarnessError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| HarnessError::Config(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}
