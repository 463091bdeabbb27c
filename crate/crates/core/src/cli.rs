//! Batch front end behind the `markov-tower` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::decay::{self, StatSeries};
use crate::error::{Error, Result};
use crate::expansion::{self, Certified, ExpansionConfig, HyperbolicTimeRecord};
use crate::geometry::IntervalSet;
use crate::induced::{ExpansionReport, InducedSummary, MarkovReport};
use crate::maps::MapModel;
use crate::tower::{csv_err, run_tower, TowerManifest};

#[derive(Debug, Parser)]
#[command(name = "markov-tower", version, about = "Markov towers and decay statistics for expanding maps")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Gamma_n fractions, time histograms and hyperbolic densities.
    OrbitStats,
    /// Hyperbolic times of a point sample.
    HyperbolicTimes,
    /// Builds the tower and writes its manifest.
    BuildTower,
    /// Checks a manifest without rebuilding the partition.
    VerifyTower {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Tail fits of Leb(Delta_n) from a manifest, or of Gamma_n otherwise.
    TailFit {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Correlation series of the configured observables.
    Correlations,
    /// Green-Kubo variance and normality of Birkhoff sums.
    Clt,
    /// Ratio diagnostics of a manifest's step history.
    Diagnose {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Manifest of the same run at a smaller delta0.
        #[arg(long)]
        rerun: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let c = RunConfig::default();
            c.validate()?;
            c
        }
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.global.out {
        cfg.out_dir = o.clone();
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ctx = Ctx { cfg };
    match cli.global.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config("threads", e.to_string()))?;
            pool.install(|| ctx.dispatch(&cli.command))
        }
        None => ctx.dispatch(&cli.command),
    }
}

struct Ctx {
    cfg: RunConfig,
}

impl Ctx {
    fn dispatch(&self, c: &Command) -> Result<()> {
        match c {
            Command::OrbitStats => self.orbit_stats(),
            Command::HyperbolicTimes => self.hyperbolic_times(),
            Command::BuildTower => self.build_tower(),
            Command::VerifyTower { manifest } => self.verify_tower(&self.manifest_path(manifest)),
            Command::TailFit { manifest } => self.tail_fit(manifest.as_deref()),
            Command::Correlations => self.correlations(),
            Command::Clt => self.clt(),
            Command::Diagnose { manifest, rerun } => self.diagnose(&self.manifest_path(manifest), rerun.as_deref()),
        }
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn manifest_path(&self, p: &Option<PathBuf>) -> PathBuf {
        p.clone().unwrap_or_else(|| self.path("manifest.json"))
    }

    fn model(&self) -> Result<(MapModel, ExpansionConfig)> {
        let m = self.cfg.map_model()?;
        let e = self.cfg.expansion(&m)?;
        Ok((m, e))
    }

    fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<PathBuf> {
        let mut j = serde_json::to_value(v).map_err(|e| Error::Parse(e.to_string()))?;
        if let Some(o) = j.as_object_mut() {
            o.insert("master_seed".into(), self.seed().into());
        }
        let p = self.path(name);
        std::fs::write(&p, serde_json::to_string_pretty(&j).map_err(|e| Error::Parse(e.to_string()))?)?;
        Ok(p)
    }

    fn csv(&self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut f = std::fs::File::create(self.path(name))?;
        writeln!(f, "# master_seed={}", self.seed())?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(&r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    fn orbit_stats(&self) -> Result<()> {
        let (m, e) = self.model()?;
        let times = expansion::sample_orbit_times(&m, &e, self.cfg.sample, self.seed())?;
        let g = expansion::gamma_series(&times, e.horizon);
        decay::write_series_csv(&self.path("gamma_fraction.csv"), &g, "fraction", self.seed())?;
        let hist = |pick: fn(&expansion::OrbitTimes) -> Certified| {
            let mut h = vec![0usize; e.horizon + 2];
            for t in &times {
                match pick(t) {
                    Certified::At(v) => h[v.min(e.horizon)] += 1,
                    Certified::Censored => h[e.horizon + 1] += 1,
                }
            }
            h.into_iter()
                .enumerate()
                .filter(|&(_, c)| c > 0)
                .map(|(t, c)| {
                    let t = if t > e.horizon { "censored".to_string() } else { t.to_string() };
                    vec![t, c.to_string()]
                })
                .collect::<Vec<_>>()
        };
        self.csv("expansion_hist.csv", &["time", "count"], hist(|t| t.expansion))?;
        self.csv("recurrence_hist.csv", &["time", "count"], hist(|t| t.recurrence))?;
        let recs = self.hyperbolic_records(&m, &e)?;
        let rows = recs.iter().map(|(i, r)| vec![i.to_string(), point_label(&r.point), r.density.to_string()]);
        self.csv("hyperbolic_density.csv", &["index", "point", "density"], rows)
    }

    /// Hyperbolic times of the sample points; singular orbits are skipped.
    fn hyperbolic_records(&self, m: &MapModel, e: &ExpansionConfig) -> Result<Vec<(u64, HyperbolicTimeRecord)>> {
        let recs: Vec<Option<(u64, HyperbolicTimeRecord)>> = (0..self.cfg.sample as u64)
            .into_par_iter()
            .map(|i| match expansion::hyperbolic_times(m, e, expansion::sample_point(m, self.seed(), i)) {
                Ok(r) => Ok(Some((i, r))),
                Err(Error::SingularOrbit { .. }) => Ok(None),
                Err(err) => Err(err),
            })
            .collect::<Result<_>>()?;
        Ok(recs.into_iter().flatten().collect())
    }

    fn hyperbolic_times(&self) -> Result<()> {
        let (m, e) = self.model()?;
        let recs = self.hyperbolic_records(&m, &e)?;
        let rows = recs
            .iter()
            .flat_map(|(_, r)| r.times.iter().map(move |t| vec![point_label(&r.point), t.to_string()]));
        self.csv("hyperbolic_times.csv", &["point", "n_hyp"], rows)
    }

    fn build_tower(&self) -> Result<()> {
        let (m, e) = self.model()?;
        m.require_branches()?;
        let run = run_tower(&m, &e, &self.cfg.tower()?)?;
        let mut man = run.manifest;
        man.master_seed = self.seed();
        man.write_json(&self.path("manifest.json"))?;
        man.write_csv(&self.path("tower_steps.csv"), self.seed())?;
        self.write_json("tower_summary.json", &man.summary)?;
        Ok(())
    }

    fn verify_tower(&self, manifest: &Path) -> Result<()> {
        let man = TowerManifest::load(manifest)?;
        let f = man.induced()?;
        let checks = f.element_checks(self.cfg.markov_samples);
        let markov = MarkovReport::from_checks(&checks);
        let expansion = ExpansionReport::from_checks(&checks).ok();
        let distortion = match &expansion {
            Some(x) => Some(f.verify_distortion(
                x.log_lambda_hat,
                self.cfg.pair_sample,
                self.cfg.separation_depth,
                self.seed(),
            )?),
            None => None,
        };
        f.write_csv(&self.path("verify_elements.csv"), &checks, self.seed())?;
        let summary = InducedSummary { markov, expansion, distortion, master_seed: self.seed() };
        let residual = decay::conservation_residual(&man.steps, man.summary.leb_delta0);
        let mut problems = Vec::new();
        if !summary.markov.passes() {
            problems.push(format!("{} of {} elements fail the Markov check", summary.markov.failures.len(), summary.markov.elements));
        }
        match &summary.expansion {
            None => problems.push("no uniform expansion".to_string()),
            Some(x) if !x.chain_rule_ok => problems.push("chain-rule derivative check failed".to_string()),
            _ => {}
        }
        if let Some(d) = &summary.distortion {
            if !d.k_consistent {
                problems.push("distortion constant exceeds its bound".to_string());
            }
        }
        if residual > 1e-12 {
            problems.push(format!("conservation residual {residual:e}"));
        }
        if man.summary.collar_failures > 0 {
            problems.push(format!("{} collar check failures", man.summary.collar_failures));
        }
        #[derive(Serialize)]
        struct Report<'a> {
            manifest: String,
            conservation_residual: f64,
            collar_failures: usize,
            problems: &'a [String],
            #[serde(flatten)]
            induced: &'a InducedSummary,
        }
        let report = Report {
            manifest: manifest.display().to_string(),
            conservation_residual: residual,
            collar_failures: man.summary.collar_failures,
            problems: &problems,
            induced: &summary,
        };
        let p = self.write_json("verify_summary.json", &report)?;
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Verification(format!("{}; report at {}", problems.join("; "), p.display())))
        }
    }

    fn gamma(&self, m: &MapModel, e: &ExpansionConfig) -> Result<StatSeries> {
        expansion::gamma_fraction(m, e, self.cfg.sample, self.seed())
    }

    fn tail_fit(&self, manifest: Option<&Path>) -> Result<()> {
        let series = match manifest {
            Some(p) => {
                let man = TowerManifest::load(p)?;
                let mut s = StatSeries::new("leb_delta");
                for r in &man.steps {
                    s.push(r.n, r.leb_delta, 0.0);
                }
                s
            }
            None => {
                let (m, e) = self.model()?;
                self.gamma(&m, &e)?
            }
        };
        decay::write_series_csv(&self.path("tails.csv"), &series, "value", self.seed())?;
        let ranked = decay::rank_families(&series, self.cfg.fit_lo, self.cfg.fit_hi)?;
        let chosen = decay::tail_fit(&series, self.cfg.family()?, self.cfg.fit_lo, self.cfg.fit_hi)?;
        #[derive(Serialize)]
        struct Fits {
            series: String,
            chosen: decay::TailFit,
            ranked: Vec<decay::TailFit>,
        }
        self.write_json("tail_fit.json", &Fits { series: series.name.clone(), chosen, ranked })?;
        Ok(())
    }

    fn correlations(&self) -> Result<()> {
        let m = self.cfg.map_model()?;
        let s = decay::correlation(&m, &self.cfg.phi()?, &self.cfg.psi()?, &self.cfg.correlation())?;
        decay::write_series_csv(&self.path("correlations.csv"), &s, "c_n", self.seed())
    }

    fn clt(&self) -> Result<()> {
        let m = self.cfg.map_model()?;
        let r = decay::clt_check(&m, &self.cfg.phi()?, self.cfg.clt_n, self.cfg.clt_sample, self.seed())?;
        self.write_json("clt.json", &r)?;
        Ok(())
    }

    fn diagnostics_of(&self, man: &TowerManifest) -> Result<decay::DecayDiagnostics> {
        let mut e = man.expansion.clone();
        e.horizon = man.steps.len().max(1);
        let theta = match self.cfg.theta {
            Some(t) => t,
            None => {
                let g = &man.geometry;
                let base = IntervalSet::from_arc(g.ball(0));
                expansion::theta_density(&man.model, &e, &base, e.horizon, self.cfg.sample, self.seed())?
            }
        };
        let gamma = self.gamma(&man.model, &e)?;
        let mut dc = self.cfg.diagnostics(theta);
        dc.r0 = man.config.r0;
        decay::decay_diagnostics(&man.steps, Some(&gamma), &dc)
    }

    fn diagnose(&self, manifest: &Path, rerun: Option<&Path>) -> Result<()> {
        let man = TowerManifest::load(manifest)?;
        let d = self.diagnostics_of(&man)?;
        d.write_csv(&self.path("diagnostics.csv"), self.seed())?;
        let comparison = match rerun {
            Some(p) => Some(decay::compare_rerun(&d, &self.diagnostics_of(&TowerManifest::load(p)?)?)),
            None => None,
        };
        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            diagnostics: &'a decay::DecayDiagnostics,
            rerun: Option<decay::RerunComparison>,
        }
        self.write_json("diagnostics.json", &Out { diagnostics: &d, rerun: comparison })?;
        Ok(())
    }
}

/// Coordinates joined by `;`.
fn point_label(p: &[f64]) -> String {
    p.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}
