//! Flat key-value run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decay::{CorrelationConfig, DiagnosticsConfig, Family, Observable};
use crate::error::{Error, Result};
use crate::expansion::ExpansionConfig;
use crate::maps::MapModel;
use crate::preballs::BaseGeometry;
use crate::tower::{collar_epsilon_bound, EpsilonMode, TowerConfig};

/// Every knob of a batch run. Unset optional keys take model defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    pub alpha: Option<f64>,
    pub k_max: Option<usize>,
    pub lambda: Option<f64>,

    pub beta: f64,
    pub sigma: Option<f64>,
    pub b: Option<f64>,
    pub eps_rec: Option<f64>,
    pub delta_rec: Option<f64>,
    pub delta_hyp: Option<f64>,
    pub horizon: usize,

    pub delta0: f64,
    pub delta1: f64,
    pub eps_collar: Option<f64>,
    pub epsilon_mode: String,
    pub r0: usize,
    pub n_max: usize,
    pub particles: usize,
    pub p: Option<f64>,
    pub allow_unsafe_epsilon: bool,

    pub sample: usize,
    pub observable: String,
    pub observable_psi: Option<String>,
    pub corr_n_max: usize,
    pub corr_sample: usize,
    pub burn_in: usize,
    pub batches: usize,
    pub clt_n: usize,
    pub clt_sample: usize,
    pub markov_samples: usize,
    pub pair_sample: usize,
    pub separation_depth: usize,
    pub fit_family: String,
    pub fit_lo: usize,
    pub fit_hi: usize,
    pub gamma: f64,
    pub theta: Option<f64>,
    pub min_particles: usize,

    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "doubling".into(),
            alpha: None,
            k_max: None,
            lambda: None,
            beta: 1.0,
            sigma: None,
            b: None,
            eps_rec: None,
            delta_rec: None,
            delta_hyp: None,
            horizon: 1000,
            delta0: 0.01,
            delta1: 0.05,
            eps_collar: None,
            epsilon_mode: "fattened".into(),
            r0: 12,
            n_max: 60,
            particles: 20_000,
            p: None,
            allow_unsafe_epsilon: false,
            sample: 10_000,
            observable: "x".into(),
            observable_psi: None,
            corr_n_max: 50,
            corr_sample: 100_000,
            burn_in: 1000,
            batches: 32,
            clt_n: 2000,
            clt_sample: 20_000,
            markov_samples: 0,
            pair_sample: 1000,
            separation_depth: 20,
            fit_family: "polynomial".into(),
            fit_lo: 10,
            fit_hi: 1000,
            gamma: 1.8,
            theta: None,
            min_particles: 100,
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let c = RunConfig::from_toml(&text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn map_model(&self) -> Result<MapModel> {
        MapModel::by_name(&self.model, self.alpha, self.k_max, self.lambda)
    }

    pub fn expansion(&self, m: &MapModel) -> Result<ExpansionConfig> {
        let mut e = ExpansionConfig::for_model(m, self.beta);
        if let Some(s) = self.sigma {
            e.sigma = s;
        }
        if let Some(b) = self.b {
            e.b = b;
        }
        if let Some(v) = self.eps_rec {
            e.eps_rec = v;
        }
        if let Some(v) = self.delta_rec {
            e.delta_rec = v;
        }
        if let Some(v) = self.delta_hyp {
            e.delta_hyp = v;
        }
        e.horizon = self.horizon;
        e.validate(self.beta)?;
        Ok(e)
    }

    pub fn epsilon_mode(&self) -> Result<EpsilonMode> {
        match self.epsilon_mode.as_str() {
            "fattened" => Ok(EpsilonMode::Fattened),
            "zero" => Ok(EpsilonMode::Zero),
            other => Err(Error::config("epsilon_mode", format!("expected `fattened` or `zero`, got `{other}`"))),
        }
    }

    pub fn tower(&self) -> Result<TowerConfig> {
        Ok(TowerConfig {
            delta0: self.delta0,
            delta1: self.delta1,
            r0: self.r0,
            n_max: self.n_max,
            epsilon: self.eps_collar,
            epsilon_mode: self.epsilon_mode()?,
            particles: self.particles,
            p: self.p,
            allow_unsafe_epsilon: self.allow_unsafe_epsilon,
        })
    }

    pub fn phi(&self) -> Result<Observable> {
        Observable::parse(&self.observable)
    }

    pub fn psi(&self) -> Result<Observable> {
        Observable::parse(self.observable_psi.as_deref().unwrap_or(&self.observable))
    }

    pub fn correlation(&self) -> CorrelationConfig {
        CorrelationConfig {
            n_max: self.corr_n_max,
            sample: self.corr_sample,
            burn_in: self.burn_in,
            batches: self.batches,
            seed: self.seed,
        }
    }

    pub fn diagnostics(&self, theta: f64) -> DiagnosticsConfig {
        DiagnosticsConfig { r0: self.r0, theta, gamma: self.gamma, alpha: None, min_particles: self.min_particles }
    }

    pub fn family(&self) -> Result<Family> {
        Family::parse(&self.fit_family)
    }

    /// Checks every constraint relation; the base geometry is built for
    /// one-dimensional models so that the collar bound can be enforced.
    pub fn validate(&self) -> Result<()> {
        let m = self.map_model()?;
        self.expansion(&m)?;
        self.epsilon_mode()?;
        self.phi()?;
        self.psi()?;
        self.family()?;
        if !(self.delta0 > 0.0 && self.delta1 > 0.0 && self.delta0 < self.delta1) {
            return Err(Error::config("delta0", "need 0 < delta0 < delta1"));
        }
        if self.r0 == 0 || self.n_max <= self.r0 {
            return Err(Error::config("n_max", "need 0 < r0 < n_max"));
        }
        if self.particles == 0 || self.sample == 0 {
            return Err(Error::config("sample", "Monte Carlo sizes must be positive"));
        }
        if self.fit_lo >= self.fit_hi {
            return Err(Error::config("fit_lo", "fit window must satisfy fit_lo < fit_hi"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config("gamma", "gamma must be positive"));
        }
        if let Some(t) = self.theta {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::config("theta", "theta must lie in (0, 1]"));
            }
        }
        if m.dimension() == 1 {
            let g = BaseGeometry::build(&m, self.delta0, self.delta1, self.p)?;
            let exp = self.expansion(&m)?;
            if let Some(eps) = self.eps_collar {
                let bound = collar_epsilon_bound(&g, &exp);
                if !(eps > 0.0) {
                    return Err(Error::config("eps_collar", "eps_collar must be positive"));
                }
                if eps >= bound && !self.allow_unsafe_epsilon {
                    return Err(Error::config(
                        "collar_epsilon_bound",
                        format!("eps_collar = {eps:e} must lie below {bound:e}"),
                    ));
                }
            }
        }
        Ok(())
    }
}
