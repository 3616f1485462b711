//! Simulated lattice data and Monte Carlo rejection rates.
//!
//! The data field is a separable AR(1) sheet with unit marginal variance.
//! Alternatives add a mean shift on a change block or reflect `Y^2 + Y'^2`
//! about 2 on it, which flips the skewness but keeps the mean.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_gram, bootstrap_sample, centered_gram, decide, original_scan, validate_alpha, MeanEstimator, TestConfig};
use crate::error::{Error, Result};
use crate::hilbert::ObservationField;
use crate::lattice::{Block, LatticeShape};
use crate::multiplier::{separable_ar_filter, KernelKind, KernelSpec};
use crate::rng::{derive_seed, stream_rng, tag};
use crate::scalar::Scalar;

/// Stationary field with covariance `prod_l a^|h_l|` and unit variance.
pub fn gen_ar_field<S: Scalar, R: Rng + ?Sized>(shape: &LatticeShape, a: f64, rng: &mut R) -> Result<ObservationField<S>> {
    check_ar(a)?;
    let mut buf: Vec<f64> = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
    separable_ar_filter(shape.dims(), a, &mut buf);
    ObservationField::scalar(shape.clone(), buf.into_iter().map(S::of).collect())
}

fn check_ar(a: f64) -> Result<()> {
    if a.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("AR parameter must satisfy |a| < 1, got {a}")))
    }
}

/// The box `(theta, gamma]` of the unit cube, mapped to a lattice as
/// `(floor(n theta), floor(n gamma)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionalBlock {
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl FractionalBlock {
    /// Requires `0 <= theta < gamma <= 1` on every axis.
    pub fn new(theta: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        if theta.len() != gamma.len() || theta.is_empty() {
            return Err(Error::config(format!("change set corners differ in length: {theta:?} / {gamma:?}")));
        }
        if theta.iter().zip(&gamma).any(|(&t, &g)| !(0.0 <= t && t < g && g <= 1.0)) {
            return Err(Error::config(format!(
                "change set needs 0 <= theta < gamma <= 1 on every axis, got ({theta:?}, {gamma:?}]"
            )));
        }
        Ok(Self { theta, gamma })
    }

    /// Small, medium and large two-dimensional reference change sets
    /// (`index` 1, 2, 3) with volumes about 0.1, 0.6 and 0.81.
    pub fn example(index: usize) -> Result<Self> {
        match index {
            1 => Self::new(vec![0.2, 0.3], vec![0.6, 0.55]),
            2 => Self::new(vec![0.1, 0.1], vec![0.9, 0.85]),
            3 => Self::new(vec![0.05, 0.1], vec![0.95, 1.0]),
            _ => Err(Error::config(format!("reference change sets are numbered 1 to 3, got {index}"))),
        }
    }

    pub fn ndim(&self) -> usize {
        self.theta.len()
    }

    /// The lattice block, or `None` when it is empty on some axis.
    pub fn to_block(&self, shape: &LatticeShape) -> Result<Option<Block>> {
        if self.ndim() != shape.ndim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}-dimensional change set", shape.ndim()),
                found: format!("{}-dimensional", self.ndim()),
            });
        }
        Ok(Block::from_fractions(shape, &self.theta, &self.gamma))
    }
}

impl fmt::Display for FractionalBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        write!(f, "{}:{}", join(&self.theta), join(&self.gamma))
    }
}

impl FromStr for FractionalBlock {
    type Err = Error;

    /// Parses `t1,...,td:g1,...,gd`.
    fn from_str(s: &str) -> Result<Self> {
        let (t, g) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("change set must look like t1,t2:g1,g2, got {s:?}")))?;
        let list = |part: &str| -> Result<Vec<f64>> {
            part.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::config(format!("bad number {x:?} in change set {s:?}")))
                })
                .collect()
        };
        Self::new(list(t)?, list(g)?)
    }
}

/// Adds `delta` to every component of the points in the change block.
pub fn inject_mean_change<S: Scalar>(field: &ObservationField<S>, delta: f64, c: &FractionalBlock) -> Result<ObservationField<S>> {
    let shape = field.shape();
    let Some(block) = c.to_block(shape)? else {
        return Ok(field.clone());
    };
    let p = field.p();
    let d = S::of(delta);
    let mask = block.mask(shape);
    let data = field
        .data()
        .iter()
        .enumerate()
        .map(|(k, &x)| if mask[k / p] { x + d } else { x })
        .collect();
    ObservationField::new(shape.clone(), p, data)
}

/// `Y^2 + Y'^2` off the change block and `4 - (Y^2 + Y'^2)` on it, for two
/// independent AR fields `Y`, `Y'`.
pub fn gen_skewness_change<S: Scalar, R: Rng + ?Sized>(
    shape: &LatticeShape,
    a: f64,
    c: &FractionalBlock,
    rng: &mut R,
) -> Result<ObservationField<S>> {
    let block = c.to_block(shape)?;
    skewness_field(shape, a, block.as_ref(), rng)
}

fn skewness_field<S: Scalar, R: Rng + ?Sized>(shape: &LatticeShape, a: f64, block: Option<&Block>, rng: &mut R) -> Result<ObservationField<S>> {
    let y: ObservationField<f64> = gen_ar_field(shape, a, rng)?;
    let y2: ObservationField<f64> = gen_ar_field(shape, a, rng)?;
    let mask = block.map(|b| b.mask(shape));
    let data = (0..shape.len())
        .map(|k| {
            let chi = y.data()[k].powi(2) + y2.data()[k].powi(2);
            S::of(if mask.as_ref().is_some_and(|m| m[k]) { 4.0 - chi } else { chi })
        })
        .collect();
    ObservationField::scalar(shape.clone(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Null,
    MeanChange { delta: f64, change_set: FractionalBlock },
    SkewnessChange { change_set: FractionalBlock },
}

impl Scenario {
    pub fn label(&self) -> &'static str {
        match self {
            Scenario::Null => "null",
            Scenario::MeanChange { .. } => "mean",
            Scenario::SkewnessChange { .. } => "skew",
        }
    }

    /// One data field of this scenario.
    pub fn generate<S: Scalar, R: Rng + ?Sized>(&self, shape: &LatticeShape, a: f64, rng: &mut R) -> Result<ObservationField<S>> {
        match self {
            Scenario::Null => gen_ar_field(shape, a, rng),
            Scenario::MeanChange { delta, change_set } => inject_mean_change(&gen_ar_field(shape, a, rng)?, *delta, change_set),
            Scenario::SkewnessChange { change_set } => gen_skewness_change(shape, a, change_set, rng),
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            Scenario::Null => Ok(()),
            Scenario::MeanChange { delta, change_set } => {
                if !delta.is_finite() {
                    return Err(Error::config(format!("mean shift must be finite, got {delta}")));
                }
                check_dim(change_set, d)
            }
            Scenario::SkewnessChange { change_set } => check_dim(change_set, d),
        }
    }
}

fn check_dim(c: &FractionalBlock, d: usize) -> Result<()> {
    if c.ndim() == d {
        Ok(())
    } else {
        Err(Error::config(format!("change set has {} axes but the lattice has d={d}", c.ndim())))
    }
}

/// A Monte Carlo experiment over a grid of bootstrap settings.
///
/// Every run draws one data field and evaluates it under each
/// `(mean estimator, kernel, q, alpha)` cell, so the cells of a run share
/// both the data and the multiplier seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub d: usize,
    pub n: usize,
    /// AR parameter of the data field.
    pub a: f64,
    pub scenario: Scenario,
    /// Statistic, weight, `K`, size bounds and memory cap; its kernel, alpha,
    /// mean estimator and seed are replaced by the grid below.
    pub template: TestConfig,
    pub kernels: Vec<KernelKind>,
    pub qs: Vec<u32>,
    pub alphas: Vec<f64>,
    pub mean_estimators: Vec<MeanEstimator>,
    /// Monte Carlo runs `N`.
    pub runs: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        LatticeShape::cube(self.d, self.n)?;
        check_ar(self.a)?;
        self.scenario.validate(self.d)?;
        if self.runs == 0 {
            return Err(Error::config("number of Monte Carlo runs must be at least 1"));
        }
        if self.kernels.is_empty() || self.qs.is_empty() || self.alphas.is_empty() || self.mean_estimators.is_empty() {
            return Err(Error::config("every grid axis (kernel, q, alpha, mean estimator) needs at least one value"));
        }
        if self.qs.contains(&0) {
            return Err(Error::config("kernel bandwidth q must be at least 1"));
        }
        self.alphas.iter().try_for_each(|&a| validate_alpha(a))?;
        self.template.validate()
    }

    pub fn shape(&self) -> Result<LatticeShape> {
        LatticeShape::cube(self.d, self.n)
    }

    /// Grid cells in table order.
    fn cells(&self) -> Vec<(MeanEstimator, KernelSpec, f64)> {
        let mut out = Vec::new();
        for &est in &self.mean_estimators {
            for &kind in &self.kernels {
                for &q in &self.qs {
                    for &alpha in &self.alphas {
                        out.push((est, KernelSpec { kind, q }, alpha));
                    }
                }
            }
        }
        out
    }

    /// Rejection decisions of run `index`, one per cell.
    pub fn run_once(&self, index: u64) -> Result<Vec<bool>> {
        let shape = self.shape()?;
        let mut data_rng = stream_rng(derive_seed(self.seed, tag::DATA, index), 0);
        let field: ObservationField<f64> = self.scenario.generate(&shape, self.a, &mut data_rng)?;
        let test_seed = derive_seed(self.seed, tag::TEST, index);
        let t = &self.template;
        let opts = t.scan_options(shape.len())?;
        let convention = t.statistic.convention();
        let g_global = centered_gram(&field, t.statistic, &t.weight)?;
        let scan = original_scan(&g_global, t.statistic, &opts)?;

        let mut out = Vec::new();
        for &est in &self.mean_estimators {
            let g_tilde = bootstrap_gram(&g_global, est, &scan.argmax_block)?;
            for &kind in &self.kernels {
                for &q in &self.qs {
                    let spec = KernelSpec::new(kind, q)?;
                    let sample = bootstrap_sample(&g_tilde, &spec, t.replicates, test_seed, convention, &opts)?;
                    for &alpha in &self.alphas {
                        out.push(decide(scan.statistic, &sample, alpha)?.2.rejects());
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One cell of a rejection table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionRow {
    pub scenario: String,
    pub estimator: MeanEstimator,
    pub kernel: KernelKind,
    pub a: f64,
    pub n: usize,
    pub q: u32,
    pub alpha: f64,
    pub rejections: usize,
    pub runs: usize,
    /// `rejections / runs`.
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionTable {
    pub config: ExperimentConfig,
    pub rows: Vec<RejectionRow>,
    /// Cells of one run share the data field and the multiplier seed.
    pub shared_data_across_grid: bool,
    pub runtime_ms: u64,
}

impl RejectionTable {
    /// The row of one grid cell.
    pub fn cell(&self, estimator: MeanEstimator, kernel: KernelKind, q: u32, alpha: f64) -> Option<&RejectionRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.kernel == kernel && r.q == q && r.alpha == alpha)
    }
}

/// Runs the experiment; the table depends only on `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RejectionTable> {
    let start = Instant::now();
    cfg.validate()?;
    if let Some(q) = cfg.qs.iter().max() {
        if let Some(w) = KernelSpec::new(cfg.kernels[0], *q)?.bandwidth_warning(&cfg.shape()?) {
            log::warn!("{w}");
        }
    }
    let cells = cfg.cells();
    let per_run: Vec<Vec<bool>> = (0..cfg.runs as u64)
        .into_par_iter()
        .map(|r| cfg.run_once(r))
        .collect::<Result<_>>()?;
    let rows = cells
        .iter()
        .enumerate()
        .map(|(c, &(estimator, kernel, alpha))| {
            let rejections = per_run.iter().filter(|run| run[c]).count();
            RejectionRow {
                scenario: cfg.scenario.label().to_string(),
                estimator,
                kernel: kernel.kind,
                a: cfg.a,
                n: cfg.n,
                q: kernel.q,
                alpha,
                rejections,
                runs: cfg.runs,
                frequency: rejections as f64 / cfg.runs as f64,
            }
        })
        .collect();
    Ok(RejectionTable {
        config: cfg.clone(),
        rows,
        shared_data_across_grid: true,
        runtime_ms: start.elapsed().as_millis() as u64,
    })
}
