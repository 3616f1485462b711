//! The epidemic-change scan over all blocks of a lattice.
//!
//! For a block `B` with `lambda_B = |B| / N` every scan evaluates
//!
//! ```text
//! Q(B) = || sum_{j in B} Y_j - lambda_B sum_j Y_j ||^2
//!      = P(B,B) - 2 lambda_B P(B,all) + lambda_B^2 P(all,all),
//! ```
//!
//! with `P(A,C) = sum_{i in A, j in C} <Y_i, Y_j>`, and reports
//! `M = max_B Q(B) / N` together with the maximizing block. The mean-change
//! statistic is `sqrt(M)`; the Cramér–von Mises statistic is `M` itself.
//!
//! Maxima that agree to a relative [`TIE_RTOL`] are treated as ties and
//! resolved to the lexicographically smallest `(lo, hi)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{GramMatrix, MeanAssignment, ObservationField};
use crate::lattice::{corners, cumsum_axes, Block, BlockCursor, LatticeShape, PairPrefixTensor, PrefixTensor, VolumeBounds, DEFAULT_MEMORY_CAP_BYTES};
use crate::scalar::Scalar;

/// Relative gap below which two block values count as equal.
pub const TIE_RTOL: f64 = 1e-10;

/// Whether a statistic is the maximal norm or the maximal squared norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    Norm,
    SquaredNorm,
}

impl Convention {
    pub fn apply<S: Scalar>(self, max_squared: S) -> S {
        match self {
            Convention::Norm => max_squared.sqrt(),
            Convention::SquaredNorm => max_squared,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOptions {
    /// Restrict the scan to blocks with volume in these bounds.
    pub bounds: Option<VolumeBounds>,
    /// Ceiling for the pair prefix tensor.
    pub memory_cap_bytes: u64,
    /// Fall back to per-row prefix sums when the pair tensor is over the cap.
    pub allow_fallback: bool,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            bounds: None,
            memory_cap_bytes: DEFAULT_MEMORY_CAP_BYTES,
            allow_fallback: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanResult<S> {
    /// `max_B Q(B) / N`.
    pub max_squared: S,
    /// `max_squared` under `convention`.
    pub statistic: S,
    pub convention: Convention,
    pub argmax_block: Block,
    pub blocks_evaluated: u64,
}

impl<S: Scalar> ScanResult<S> {
    pub fn with_convention(mut self, convention: Convention) -> Self {
        self.convention = convention;
        self.statistic = convention.apply(self.max_squared);
        self
    }
}

/// Running maximum with the lexicographic tie rule.
#[derive(Clone, Debug)]
pub(crate) struct Best<S> {
    pub value: S,
    pub block: Option<Block>,
    pub count: u64,
}

impl<S: Scalar> Best<S> {
    fn empty() -> Self {
        Self {
            value: S::neg_infinity(),
            block: None,
            count: 0,
        }
    }

    #[inline]
    fn beats(candidate: S, incumbent: S) -> bool {
        if incumbent == S::neg_infinity() {
            return true;
        }
        candidate > incumbent + S::of(TIE_RTOL) * incumbent.abs()
    }

    #[inline]
    fn offer(&mut self, value: S, cursor: &BlockCursor<'_>) {
        self.count += 1;
        if Self::beats(value, self.value) {
            self.value = value;
            match &mut self.block {
                Some(b) => {
                    b.lo.copy_from_slice(&cursor.lo);
                    b.hi.copy_from_slice(&cursor.hi);
                }
                None => self.block = Some(cursor.block()),
            }
        }
    }

    /// Merges a later partition into this one.
    fn absorb(mut self, later: Self) -> Self {
        self.count += later.count;
        if later.block.is_some() && Self::beats(later.value, self.value) {
            self.value = later.value;
            self.block = later.block;
        }
        self
    }

    pub(crate) fn into_result(self, n_points: usize, convention: Convention) -> Result<ScanResult<S>> {
        let block = self
            .block
            .ok_or_else(|| Error::config("no block satisfies the configured volume bounds"))?;
        let max_squared = (self.value / S::of(n_points as f64)).max(S::zero());
        Ok(ScanResult {
            max_squared,
            statistic: convention.apply(max_squared),
            convention,
            argmax_block: block,
            blocks_evaluated: self.count,
        })
    }
}

/// Drives `eval(corner offsets, corner signs, volume) -> Q(B)` over every
/// admissible block, split by leading lower corner when `parallel`.
pub(crate) fn sweep<S, F>(shape: &LatticeShape, bounds: Option<VolumeBounds>, parallel: bool, eval: F) -> Best<S>
where
    S: Scalar,
    F: Fn(&[usize], &[S], usize) -> S + Sync,
{
    let dims = shape.dims();
    let pstrides = shape.padded_strides();
    let ncorner = 1usize << shape.ndim();
    let run = |k0: usize| {
        let mut best = Best::empty();
        let mut cursor = BlockCursor::with_leading(dims, k0);
        let mut offsets = vec![0usize; ncorner];
        let mut fsigns = vec![0f64; ncorner];
        let mut signs = vec![S::zero(); ncorner];
        loop {
            let vol = cursor.volume();
            if bounds.is_none_or(|b| b.contains(vol)) {
                corners(&cursor.lo, &cursor.hi, &pstrides, &mut offsets, &mut fsigns);
                for (s, &f) in signs.iter_mut().zip(&fsigns) {
                    *s = S::of(f);
                }
                best.offer(eval(&offsets, &signs, vol), &cursor);
            }
            if !cursor.advance() {
                break;
            }
        }
        best
    };
    let parts: Vec<Best<S>> = if parallel {
        (0..dims[0]).into_par_iter().map(run).collect()
    } else {
        (0..dims[0]).map(run).collect()
    };
    parts.into_iter().fold(Best::empty(), Best::absorb)
}

/// Q(B) from a pair prefix tensor, a padded row-sum prefix and the grand total.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn gram_block_value<S: Scalar>(
    pair: &[S],
    side: usize,
    row_prefix: &[S],
    total: S,
    n_points: S,
    offsets: &[usize],
    signs: &[S],
    vol: usize,
) -> S {
    let mut pbb = S::zero();
    let mut pba = S::zero();
    for (&oe, &se) in offsets.iter().zip(signs) {
        let row = &pair[oe * side..(oe + 1) * side];
        let mut acc = S::zero();
        for (&of, &sf) in offsets.iter().zip(signs) {
            acc += sf * row[of];
        }
        pbb += se * acc;
        pba += se * row_prefix[oe];
    }
    let lambda = S::of(vol as f64) / n_points;
    pbb - (lambda + lambda) * pba + lambda * lambda * total
}

/// Blocks of the lattice without its leading axis, as corner offsets into
/// that sub-lattice's padded grid.
pub(crate) struct BandPlan<S> {
    ncorner: usize,
    side_rest: usize,
    offsets: Vec<usize>,
    signs: Vec<S>,
    volumes: Vec<usize>,
}

impl<S: Scalar> BandPlan<S> {
    pub(crate) fn new(shape: &LatticeShape) -> Self {
        let rest = &shape.dims()[1..];
        if rest.is_empty() {
            return Self {
                ncorner: 1,
                side_rest: 1,
                offsets: vec![0],
                signs: vec![S::one()],
                volumes: vec![1],
            };
        }
        let sub = LatticeShape::new(rest.to_vec()).expect("sub-lattice of a valid shape");
        let pstrides = sub.padded_strides();
        let ncorner = 1usize << sub.ndim();
        let mut offsets = Vec::new();
        let mut signs = Vec::new();
        let mut volumes = Vec::new();
        let mut off = vec![0usize; ncorner];
        let mut sg = vec![0f64; ncorner];
        for b in crate::lattice::enumerate_blocks(&sub, None) {
            corners(&b.lo, &b.hi, &pstrides, &mut off, &mut sg);
            offsets.extend_from_slice(&off);
            signs.extend(sg.iter().map(|&x| S::of(x)));
            volumes.push(b.volume());
        }
        Self {
            ncorner,
            side_rest: sub.padded_len(),
            offsets,
            signs,
            volumes,
        }
    }
}

/// `max_B Q(B)` from a pair prefix tensor, without the maximizing block.
///
/// For each band `(lo_0, hi_0]` of the leading axis the tensor is first
/// collapsed to a pair prefix tensor of the remaining axes, which keeps the
/// per-block work inside a small, cache-resident array.
#[allow(clippy::too_many_arguments)]
pub(crate) fn max_pair_value<S: Scalar>(
    shape: &LatticeShape,
    plan: &BandPlan<S>,
    pair: &[S],
    side: usize,
    row_prefix: &[S],
    total: S,
    bounds: Option<VolumeBounds>,
    reduced: &mut Vec<S>,
    reduced_rows: &mut Vec<S>,
) -> Option<S> {
    let n0 = shape.dims()[0];
    let pr = plan.side_rest;
    let nf = S::of(shape.len() as f64);
    reduced.resize(pr * pr, S::zero());
    reduced_rows.resize(pr, S::zero());
    let mut best: Option<S> = None;
    for lo in 0..n0 {
        for hi in lo + 1..=n0 {
            let width = hi - lo;
            if let Some(b) = bounds {
                if width * plan.volumes.iter().min().copied().unwrap_or(1) > b.max
                    || width * plan.volumes.iter().max().copied().unwrap_or(1) < b.min
                {
                    continue;
                }
            }
            for x in 0..pr {
                let hh = &pair[(hi * pr + x) * side + hi * pr..][..pr];
                let hl = &pair[(hi * pr + x) * side + lo * pr..][..pr];
                let lh = &pair[(lo * pr + x) * side + hi * pr..][..pr];
                let ll = &pair[(lo * pr + x) * side + lo * pr..][..pr];
                let out = &mut reduced[x * pr..(x + 1) * pr];
                for y in 0..pr {
                    out[y] = (hh[y] - hl[y]) - (lh[y] - ll[y]);
                }
                reduced_rows[x] = row_prefix[hi * pr + x] - row_prefix[lo * pr + x];
            }
            for (k, &vr) in plan.volumes.iter().enumerate() {
                let vol = width * vr;
                if bounds.is_some_and(|b| !b.contains(vol)) {
                    continue;
                }
                let c = k * plan.ncorner..(k + 1) * plan.ncorner;
                let q = gram_block_value(reduced, pr, reduced_rows, total, nf, &plan.offsets[c.clone()], &plan.signs[c], vol);
                if best.is_none_or(|m| q > m) {
                    best = Some(q);
                }
            }
        }
    }
    best
}

/// Padded prefix sums of a per-point scalar (row sums) into `out`.
pub(crate) fn fill_row_prefix<S: Scalar>(shape: &LatticeShape, positions: &[usize], values: &[S], out: &mut [S]) {
    out.iter_mut().for_each(|x| *x = S::zero());
    for (&pos, &v) in positions.iter().zip(values) {
        out[pos] = v;
    }
    cumsum_axes(out, &shape.padded_dims(), 1);
}

/// Maximizes `Q(B) / N` over all blocks using the Gram matrix `g`.
///
/// The result uses the squared-norm convention.
pub fn scan_gram<S: Scalar>(g: &GramMatrix<S>, opts: &ScanOptions) -> Result<ScanResult<S>> {
    let shape = g.shape();
    let n = shape.len();
    let positions = shape.padded_positions();
    let mut row_prefix = vec![S::zero(); shape.padded_len()];
    fill_row_prefix(shape, &positions, g.row_sums(), &mut row_prefix);
    let total = g.total();
    let nf = S::of(n as f64);

    let best = match PairPrefixTensor::from_matrix(shape, g.entries(), opts.memory_cap_bytes) {
        Ok(pair) => {
            let (values, side) = (pair.values(), pair.side());
            sweep(shape, opts.bounds, true, |off, sg, vol| {
                gram_block_value(values, side, &row_prefix, total, nf, off, sg, vol)
            })
        }
        Err(Error::MemoryCap { required, cap }) if opts.allow_fallback => {
            log::warn!(
                "pair prefix tensor needs {required} bytes (cap {cap}); using the per-row prefix scan, \
                 which costs O(|B|) per block"
            );
            scan_gram_rowwise(g, opts, &row_prefix)?
        }
        Err(e) => return Err(e),
    };
    best.into_result(n, Convention::SquaredNorm)
}

/// Fallback evaluation: `P(B,B) = sum_{i in B} (row i summed over B)` with a
/// prefix tensor per row.
fn scan_gram_rowwise<S: Scalar>(g: &GramMatrix<S>, opts: &ScanOptions, row_prefix: &[S]) -> Result<Best<S>> {
    let shape = g.shape();
    let n = shape.len();
    let side = shape.padded_len();
    let required = (n as u64).saturating_mul(side as u64).saturating_mul(std::mem::size_of::<S>() as u64);
    if required > opts.memory_cap_bytes {
        return Err(Error::MemoryCap {
            required,
            cap: opts.memory_cap_bytes,
        });
    }
    let positions = shape.padded_positions();
    let mut rows = vec![S::zero(); n * side];
    rows.par_chunks_mut(side).enumerate().for_each(|(i, out)| {
        fill_row_prefix(shape, &positions, &g.entries()[i * n..(i + 1) * n], out);
    });
    let total = g.total();
    let nf = S::of(n as f64);
    let dims = shape.dims();
    let strides = shape.strides();
    let pstrides = shape.padded_strides();
    Ok(sweep(shape, opts.bounds, true, |off, sg, vol| {
        // Recover the block from its lowest and highest corners.
        let lo_off = off[0];
        let hi_off = off[off.len() - 1];
        let mut lo = vec![0; dims.len()];
        let mut hi = vec![0; dims.len()];
        for l in 0..dims.len() {
            lo[l] = lo_off / pstrides[l] % (dims[l] + 1);
            hi[l] = hi_off / pstrides[l] % (dims[l] + 1);
        }
        let mut pbb = S::zero();
        let mut c = lo.clone();
        'points: loop {
            let flat: usize = c.iter().zip(&strides).map(|(a, s)| a * s).sum();
            let row = &rows[flat * side..(flat + 1) * side];
            for (&o, &s) in off.iter().zip(sg) {
                pbb += s * row[o];
            }
            for l in (0..dims.len()).rev() {
                c[l] += 1;
                if c[l] < hi[l] {
                    continue 'points;
                }
                c[l] = lo[l];
            }
            break;
        }
        let mut pba = S::zero();
        for (&o, &s) in off.iter().zip(sg) {
            pba += s * row_prefix[o];
        }
        let lambda = S::of(vol as f64) / nf;
        pbb - (lambda + lambda) * pba + lambda * lambda * total
    }))
}

/// Mean-change scan straight from vector prefix sums of the observations.
///
/// Returns `T_n = sqrt(max Q(B) / N)` under the norm convention. The field is
/// centred first, which leaves every `Q(B)` unchanged in exact arithmetic.
pub fn scan_mean_change<S: Scalar>(field: &ObservationField<S>, opts: &ScanOptions) -> Result<ScanResult<S>> {
    let shape = field.shape();
    let p = field.p();
    let n = shape.len();
    let mean = field.mean_where(|_| true);
    let centered: Vec<S> = field
        .data()
        .chunks_exact(p)
        .flat_map(|x| x.iter().zip(&mean).map(|(&a, &m)| a - m).collect::<Vec<_>>())
        .collect();
    let prefix = PrefixTensor::from_field(shape, p, &centered)?;
    let values = prefix.values();
    let all = prefix.box_sum(&shape.full_block())?;
    let nf = S::of(n as f64);
    let best = sweep(shape, opts.bounds, true, |off, sg, vol| {
        let lambda = S::of(vol as f64) / nf;
        let mut q = S::zero();
        for c in 0..p {
            let mut sb = S::zero();
            for (&o, &s) in off.iter().zip(sg) {
                sb += s * values[o * p + c];
            }
            let r = sb - lambda * all[c];
            q += r * r;
        }
        q
    });
    best.into_result(n, Convention::Norm)
}

/// The estimated change set: the maximizing block of a completed scan.
///
/// When the scan ran with volume bounds the block already satisfies them.
pub fn estimate_change_set<S: Scalar>(r: &ScanResult<S>) -> Block {
    r.argmax_block.clone()
}

/// Lag weights `omega(h)` for the long-run variance diagnostic.
pub trait LagWeight {
    fn weight(&self, lag: &[isize]) -> f64;

    /// Largest `|h_l|` with a nonzero weight, if the support is finite.
    fn support_radius(&self) -> Option<usize> {
        None
    }
}

/// Weight one at lag zero and zero elsewhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroLagKernel;

impl LagWeight for ZeroLagKernel {
    fn weight(&self, lag: &[isize]) -> f64 {
        if lag.iter().all(|&h| h == 0) {
            1.0
        } else {
            0.0
        }
    }

    fn support_radius(&self) -> Option<usize> {
        Some(0)
    }
}

/// Dense row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CovMatrix<S> {
    pub dim: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> CovMatrix<S> {
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.dim + c]
    }
}

/// Kernel long-run variance of the centred observations over block `b`:
///
/// ```text
/// sum_h omega(h) N^-1 sum_{a, a+h in B} (X_a - mu(a)) (X_{a+h} - mu(a+h))^T
/// ```
///
/// symmetrized as `(M + M^T) / 2`. For the full block it estimates the
/// long-run covariance matrix; for a sub-block, `|B|/N` times it.
pub fn lrv_estimate<S: Scalar>(
    field: &ObservationField<S>,
    kernel: &impl LagWeight,
    b: &Block,
    mean: &MeanAssignment,
) -> Result<CovMatrix<S>> {
    let shape = field.shape();
    shape.check_block(b)?;
    if b.volume() < 2 {
        return Err(Error::config(format!("long-run variance needs a block of at least 2 points, got {b:?}")));
    }
    let p = field.p();
    let n = shape.len();
    let (labels, _) = mean.groups(shape)?;
    let means = [
        field.mean_where(|f| labels[f] == 0),
        field.mean_where(|f| labels[f] == 1),
    ];
    let centered: Vec<S> = (0..n)
        .flat_map(|f| {
            let m = &means[labels[f] as usize];
            field.point(f).iter().zip(m).map(|(&x, &mu)| x - mu).collect::<Vec<_>>()
        })
        .collect();

    let d = shape.ndim();
    let widths: Vec<usize> = b.lo.iter().zip(&b.hi).map(|(a, c)| c - a).collect();
    let radius: Vec<isize> = widths
        .iter()
        .map(|&w| kernel.support_radius().map_or(w - 1, |r| r.min(w - 1)) as isize)
        .collect();
    let strides = shape.strides();

    let mut acc = vec![S::zero(); p * p];
    let mut lag: Vec<isize> = radius.iter().map(|r| -r).collect();
    loop {
        let w = kernel.weight(&lag);
        if w != 0.0 {
            let ws = S::of(w);
            // Points a of the block with a + h also inside: per axis the range
            // [lo + max(0, -h), hi - max(0, h)).
            let from: Vec<usize> = (0..d).map(|l| b.lo[l] + (-lag[l]).max(0) as usize).collect();
            let to: Vec<usize> = (0..d).map(|l| b.hi[l] - lag[l].max(0) as usize).collect();
            let shift: isize = (0..d).map(|l| lag[l] * strides[l] as isize).sum();
            let mut a = from.clone();
            'points: loop {
                let fa: usize = a.iter().zip(&strides).map(|(x, s)| x * s).sum();
                let fb = (fa as isize + shift) as usize;
                let xa = &centered[fa * p..(fa + 1) * p];
                let xb = &centered[fb * p..(fb + 1) * p];
                for r in 0..p {
                    for c in 0..p {
                        acc[r * p + c] += ws * xa[r] * xb[c];
                    }
                }
                for l in (0..d).rev() {
                    a[l] += 1;
                    if a[l] < to[l] {
                        continue 'points;
                    }
                    a[l] = from[l];
                }
                break;
            }
        }
        // Next lag.
        let mut l = d;
        loop {
            if l == 0 {
                let nf = S::of(n as f64);
                let half = S::of(0.5);
                let mut out = vec![S::zero(); p * p];
                for r in 0..p {
                    for c in 0..p {
                        out[r * p + c] = half * (acc[r * p + c] + acc[c * p + r]) / nf;
                    }
                }
                return Ok(CovMatrix { dim: p, data: out });
            }
            l -= 1;
            lag[l] += 1;
            if lag[l] <= radius[l] {
                break;
            }
            lag[l] = -radius[l];
        }
    }
}
