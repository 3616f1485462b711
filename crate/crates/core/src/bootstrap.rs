//! Dependent wild bootstrap calibration of the scan statistics.
//!
//! A replicate multiplies the centred observations pointwise by a dependent
//! Gaussian field `V`, which turns the Gram matrix into `V_i V_j G~_ij`, and
//! rescans. The threshold is the `ceil((1 - alpha) K)`-th order statistic of
//! `K` replicates; the test rejects when `T >= threshold`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{center_gram, gram_euclidean, gram_indicator_cvm, GramMatrix, MeanAssignment, ObservationField, WeightSpec};
use crate::lattice::{Block, LatticeShape, PairPrefixTensor, VolumeBounds, DEFAULT_MEMORY_CAP_BYTES};
use crate::multiplier::{KernelSpec, MultiplierField};
use crate::rng::{stream_rng, tag};
use crate::scalar::Scalar;
use crate::scan::{fill_row_prefix, max_pair_value, scan_gram, BandPlan, Convention, ScanOptions, ScanResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StatisticKind {
    /// Euclidean mean scan, reported as the maximal norm.
    #[serde(rename = "mean")]
    MeanChange,
    /// Cramér–von Mises scan, reported as the maximal squared norm.
    #[serde(rename = "cvm")]
    Cvm,
}

impl StatisticKind {
    pub fn convention(self) -> Convention {
        match self {
            StatisticKind::MeanChange => Convention::Norm,
            StatisticKind::Cvm => Convention::SquaredNorm,
        }
    }
}

impl fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatisticKind::MeanChange => "mean",
            StatisticKind::Cvm => "cvm",
        })
    }
}

impl FromStr for StatisticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(StatisticKind::MeanChange),
            "cvm" => Ok(StatisticKind::Cvm),
            other => Err(Error::config(format!("statistic must be cvm or mean, got {other:?}"))),
        }
    }
}

/// Mean subtracted before multiplying by `V`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanEstimator {
    /// Grand mean.
    Global,
    /// Separate means inside and outside the estimated change block.
    Adapted,
}

impl MeanEstimator {
    pub fn assignment(self, change_block: &Block) -> MeanAssignment {
        match self {
            MeanEstimator::Global => MeanAssignment::Global,
            MeanEstimator::Adapted => MeanAssignment::TwoGroup(change_block.clone()),
        }
    }
}

impl fmt::Display for MeanEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MeanEstimator::Global => "global",
            MeanEstimator::Adapted => "adapted",
        })
    }
}

impl FromStr for MeanEstimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "global" => Ok(MeanEstimator::Global),
            "adapted" => Ok(MeanEstimator::Adapted),
            other => Err(Error::config(format!("mean estimator must be global or adapted, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub statistic: StatisticKind,
    /// Weight of the Cramér–von Mises norm; unused by the mean scan.
    pub weight: WeightSpec,
    pub kernel: KernelSpec,
    /// Number of bootstrap replicates `K`.
    pub replicates: usize,
    pub alpha: f64,
    pub mean_estimator: MeanEstimator,
    /// `(eps1, eps2)`: scan only blocks with `eps1 N <= |B| <= (1 - eps2) N`.
    pub size_bounds: Option<(f64, f64)>,
    pub seed: u64,
    /// Keep the `K` bootstrap values in the report.
    pub emit_bootstrap: bool,
    pub memory_cap_bytes: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            statistic: StatisticKind::Cvm,
            weight: WeightSpec::default(),
            kernel: KernelSpec {
                kind: crate::multiplier::KernelKind::ExponentialAr,
                q: 6,
            },
            replicates: 199,
            alpha: 0.05,
            mean_estimator: MeanEstimator::Global,
            size_bounds: None,
            seed: 0,
            emit_bootstrap: false,
            memory_cap_bytes: DEFAULT_MEMORY_CAP_BYTES,
        }
    }
}

impl TestConfig {
    /// Checks the parameters that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::config("number of bootstrap replicates K must be at least 1"));
        }
        validate_alpha(self.alpha)?;
        if self.kernel.q == 0 {
            return Err(Error::config("kernel bandwidth q must be at least 1"));
        }
        if let Some((e1, e2)) = self.size_bounds {
            if !(e1 >= 0.0 && e2 >= 0.0 && e1 + e2 < 1.0) {
                return Err(Error::config(format!(
                    "size bounds need eps1, eps2 >= 0 and eps1 + eps2 < 1, got ({e1}, {e2})"
                )));
            }
        }
        if self.statistic == StatisticKind::Cvm {
            self.weight.coords.iter().try_for_each(|c| c.validate())?;
        }
        Ok(())
    }

    /// Scan options for a lattice with `n_points` points.
    pub fn scan_options(&self, n_points: usize) -> Result<ScanOptions> {
        let bounds = self
            .size_bounds
            .map(|(e1, e2)| VolumeBounds::from_fractions(e1, e2, n_points))
            .transpose()?;
        Ok(ScanOptions {
            bounds,
            memory_cap_bytes: self.memory_cap_bytes,
            allow_fallback: true,
        })
    }
}

pub(crate) fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("significance level alpha must lie in (0, 1), got {alpha}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Reject,
    Retain,
}

impl Decision {
    pub fn rejects(self) -> bool {
        self == Decision::Reject
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Reject => "reject",
            Decision::Retain => "retain",
        })
    }
}

/// Outcome of one test, in the layout of the JSON report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub statistic_kind: StatisticKind,
    pub change_block: Block,
    pub threshold: f64,
    pub alpha: f64,
    pub p_value: f64,
    pub decision: Decision,
    #[serde(rename = "K")]
    pub replicates: usize,
    pub kernel: KernelSpec,
    pub mean_estimator: MeanEstimator,
    /// Present for the Cramér–von Mises statistic only.
    pub weight: Option<WeightSpec>,
    pub seed: u64,
    pub runtime_ms: u64,
    pub degenerate: bool,
    pub shape: LatticeShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_bounds: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap_sample: Option<Vec<f64>>,
}

impl TestReport {
    /// The decision implied by the statistic and the threshold.
    pub fn recomputed_decision(&self) -> Decision {
        if !self.degenerate && self.statistic >= self.threshold {
            Decision::Reject
        } else {
            Decision::Retain
        }
    }
}

/// The `ceil((1 - alpha) K)`-th smallest of `values` (1-based).
pub fn bootstrap_quantile<S: Scalar>(values: &[S], alpha: f64) -> Result<S> {
    if values.is_empty() {
        return Err(Error::config("bootstrap sample is empty"));
    }
    validate_alpha(alpha)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("bootstrap values are finite"));
    let k = values.len();
    // Products such as 0.95 * 200 may land a hair above an integer.
    let rank = (((1.0 - alpha) * k as f64) - 1e-9).ceil().clamp(1.0, k as f64) as usize;
    Ok(sorted[rank - 1])
}

/// `(1 + #{T* >= T}) / (K + 1)`.
pub fn p_value<S: Scalar>(statistic: S, sample: &[S]) -> f64 {
    let exceed = sample.iter().filter(|&&t| t >= statistic).count();
    (1 + exceed) as f64 / (sample.len() + 1) as f64
}

/// Threshold, p-value, decision and degeneracy flag for one bootstrap sample.
///
/// A zero statistic with an all-zero sample is degenerate and retained.
pub fn decide<S: Scalar>(statistic: S, sample: &[S], alpha: f64) -> Result<(S, f64, Decision, bool)> {
    let threshold = bootstrap_quantile(sample, alpha)?;
    let p = p_value(statistic, sample);
    let degenerate = statistic.is_zero() && sample.iter().all(|t| t.is_zero());
    let decision = if !degenerate && statistic >= threshold {
        Decision::Reject
    } else {
        Decision::Retain
    };
    Ok((threshold, p, decision, degenerate))
}

/// Reusable per-worker buffers for bootstrap replicates.
pub struct BootstrapWorkspace<S> {
    shape: LatticeShape,
    pair: Option<PairPrefixTensor<S>>,
    plan: BandPlan<S>,
    reduced: Vec<S>,
    reduced_rows: Vec<S>,
    positions: Vec<usize>,
    row_sums: Vec<S>,
    row_prefix: Vec<S>,
    draws: Vec<f64>,
    scratch: Vec<f64>,
    v: Vec<S>,
}

impl<S: Scalar> BootstrapWorkspace<S> {
    /// Allocates buffers for `shape`; without room for the pair tensor under
    /// `cap_bytes` replicates go through the per-row scan instead.
    pub fn new(shape: &LatticeShape, cap_bytes: u64) -> Result<Self> {
        let pair = match PairPrefixTensor::zeroed(shape, cap_bytes) {
            Ok(p) => Some(p),
            Err(Error::MemoryCap { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            shape: shape.clone(),
            pair,
            plan: BandPlan::new(shape),
            reduced: Vec::new(),
            reduced_rows: Vec::new(),
            positions: shape.padded_positions(),
            row_sums: vec![S::zero(); shape.len()],
            row_prefix: vec![S::zero(); shape.padded_len()],
            draws: vec![0.0; shape.len()],
            scratch: Vec::new(),
            v: vec![S::zero(); shape.len()],
        })
    }

    /// Scan value of `V_i V_j G~_ij` under `convention`.
    pub fn statistic(
        &mut self,
        g_tilde: &GramMatrix<S>,
        v: &[S],
        convention: Convention,
        opts: &ScanOptions,
    ) -> Result<S> {
        let n = self.shape.len();
        if g_tilde.shape() != &self.shape || v.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("lattice {:?} with {n} multipliers", self.shape.dims()),
                found: format!("lattice {:?} with {} multipliers", g_tilde.shape().dims(), v.len()),
            });
        }
        let entries = g_tilde.entries();
        let Some(pair) = self.pair.as_mut() else {
            let scaled: Vec<S> = (0..n * n).map(|k| v[k / n] * v[k % n] * entries[k]).collect();
            let g = GramMatrix::from_entries(self.shape.clone(), scaled)?;
            let r = scan_gram(&g, opts)?;
            return Ok(convention.apply(r.max_squared));
        };
        pair.refill_scaled(entries, v)?;
        for (i, slot) in self.row_sums.iter_mut().enumerate() {
            let row = &entries[i * n..(i + 1) * n];
            let dot: S = row.iter().zip(v).map(|(&g, &vj)| g * vj).sum();
            *slot = v[i] * dot;
        }
        let total: S = self.row_sums.iter().copied().sum();
        fill_row_prefix(&self.shape, &self.positions, &self.row_sums, &mut self.row_prefix);
        let best = max_pair_value(
            &self.shape,
            &self.plan,
            pair.values(),
            pair.side(),
            &self.row_prefix,
            total,
            opts.bounds,
            &mut self.reduced,
            &mut self.reduced_rows,
        )
        .ok_or_else(|| Error::config("no block satisfies the configured volume bounds"))?;
        let m = (best / S::of(n as f64)).max(S::zero());
        Ok(convention.apply(m))
    }

    /// Draws the multipliers of replicate `index` and evaluates it.
    fn replicate(
        &mut self,
        g_tilde: &GramMatrix<S>,
        kernel: &KernelSpec,
        seed: u64,
        index: u64,
        convention: Convention,
        opts: &ScanOptions,
    ) -> Result<S> {
        let mut rng = stream_rng(seed, replicate_stream(index));
        kernel.fill(&self.shape, &mut rng, &mut self.draws, &mut self.scratch);
        let mut v = std::mem::take(&mut self.v);
        v.iter_mut().zip(&self.draws).for_each(|(a, &b)| *a = S::of(b));
        let out = self.statistic(g_tilde, &v, convention, opts);
        self.v = v;
        out
    }
}

fn replicate_stream(index: u64) -> u64 {
    (tag::TEST << 48) ^ index
}

/// One bootstrap value for the multipliers `v`.
///
/// Allocates a fresh workspace; loops should hold a [`BootstrapWorkspace`].
pub fn bootstrap_statistic<S: Scalar>(
    g_tilde: &GramMatrix<S>,
    v: &MultiplierField<S>,
    convention: Convention,
    opts: &ScanOptions,
) -> Result<S> {
    if &v.shape != g_tilde.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("multipliers on {:?}", g_tilde.shape().dims()),
            found: format!("{:?}", v.shape.dims()),
        });
    }
    BootstrapWorkspace::new(g_tilde.shape(), opts.memory_cap_bytes)?.statistic(g_tilde, &v.values, convention, opts)
}

/// `K` bootstrap values with multipliers from the streams of `seed`.
///
/// Replicate `j` always uses stream `j`, so the sample does not depend on the
/// number of worker threads.
pub fn bootstrap_sample<S: Scalar>(
    g_tilde: &GramMatrix<S>,
    kernel: &KernelSpec,
    replicates: usize,
    seed: u64,
    convention: Convention,
    opts: &ScanOptions,
) -> Result<Vec<S>> {
    if g_tilde.is_zero() {
        return Ok(vec![S::zero(); replicates]);
    }
    let shape = g_tilde.shape();
    (0..replicates as u64)
        .into_par_iter()
        .map_init(
            || BootstrapWorkspace::new(shape, opts.memory_cap_bytes),
            |ws, j| match ws {
                Ok(ws) => ws.replicate(g_tilde, kernel, seed, j, convention, opts),
                Err(e) => Err(Error::config(e.to_string())),
            },
        )
        .collect()
}

/// Gram matrix of the test's feature map, centred at the grand mean.
pub fn centered_gram<S: Scalar>(field: &ObservationField<S>, kind: StatisticKind, weight: &WeightSpec) -> Result<GramMatrix<S>> {
    let g = match kind {
        StatisticKind::MeanChange => gram_euclidean(field),
        StatisticKind::Cvm => gram_indicator_cvm(field, &weight.fitted_to(field.p())?)?,
    };
    center_gram(&g, &MeanAssignment::Global)
}

/// The original statistic from a globally centred Gram matrix.
pub fn original_scan<S: Scalar>(g_global: &GramMatrix<S>, kind: StatisticKind, opts: &ScanOptions) -> Result<ScanResult<S>> {
    Ok(scan_gram(g_global, opts)?.with_convention(kind.convention()))
}

/// The Gram matrix the multipliers act on for `estimator`.
pub fn bootstrap_gram<S: Scalar>(
    g_global: &GramMatrix<S>,
    estimator: MeanEstimator,
    change_block: &Block,
) -> Result<GramMatrix<S>> {
    match estimator {
        MeanEstimator::Global => Ok(g_global.clone()),
        MeanEstimator::Adapted if g_global.is_zero() => Ok(g_global.clone()),
        MeanEstimator::Adapted => center_gram(g_global, &estimator.assignment(change_block)),
    }
}

/// Full test: statistic, change-set estimate, bootstrap threshold and decision.
pub fn run_test<S: Scalar>(field: &ObservationField<S>, cfg: &TestConfig) -> Result<TestReport> {
    let start = Instant::now();
    cfg.validate()?;
    let shape = field.shape();
    let opts = cfg.scan_options(shape.len())?;
    if let Some(w) = cfg.kernel.bandwidth_warning(shape) {
        log::warn!("{w}");
    }
    let convention = cfg.statistic.convention();

    let g_global = centered_gram(field, cfg.statistic, &cfg.weight)?;
    let scan = original_scan(&g_global, cfg.statistic, &opts)?;
    let g_tilde = bootstrap_gram(&g_global, cfg.mean_estimator, &scan.argmax_block)?;
    let sample = bootstrap_sample(&g_tilde, &cfg.kernel, cfg.replicates, cfg.seed, convention, &opts)?;
    let (threshold, p, decision, degenerate) = decide(scan.statistic, &sample, cfg.alpha)?;

    Ok(TestReport {
        statistic: scan.statistic.as_f64(),
        statistic_kind: cfg.statistic,
        change_block: scan.argmax_block,
        threshold: threshold.as_f64(),
        alpha: cfg.alpha,
        p_value: p,
        decision,
        replicates: cfg.replicates,
        kernel: cfg.kernel,
        mean_estimator: cfg.mean_estimator,
        weight: (cfg.statistic == StatisticKind::Cvm).then(|| cfg.weight.fitted_to(field.p())).transpose()?,
        seed: cfg.seed,
        runtime_ms: start.elapsed().as_millis() as u64,
        degenerate,
        shape: shape.clone(),
        size_bounds: cfg.size_bounds,
        bootstrap_sample: cfg.emit_bootstrap.then(|| sample.iter().map(|t| t.as_f64()).collect()),
    })
}
