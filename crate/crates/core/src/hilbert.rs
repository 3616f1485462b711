//! Observations as elements of a Hilbert space, represented through their
//! Gram matrix.
//!
//! Two embeddings are supported: the identity on `R^p` with the dot product,
//! and `x -> 1{x <= .}` in `L^2(R^p, w)` for a product weight `w`. For the
//! latter `<1{x <= .}, 1{y <= .}> = W(max(x, y))` where `W(t)` is the weight
//! mass of the upper orthant at `t`; since every coordinate survival is
//! non-increasing this equals `prod_l min(W_l(x_l), W_l(y_l))`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Block, LatticeShape};
use crate::scalar::Scalar;

/// A lattice of `p`-dimensional real observations.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationField<S> {
    shape: LatticeShape,
    p: usize,
    data: Vec<S>,
}

impl<S: Scalar> ObservationField<S> {
    /// `data` holds `p` values per point in flat lattice order.
    pub fn new(shape: LatticeShape, p: usize, data: Vec<S>) -> Result<Self> {
        if p == 0 {
            return Err(Error::config("observation dimension p must be at least 1"));
        }
        if data.len() != shape.len() * p {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values ({} points x p={p})", shape.len() * p, shape.len()),
                found: format!("{} values", data.len()),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::data(None, format!("non-finite value at point {}", pos / p)));
        }
        Ok(Self { shape, p, data })
    }

    pub fn scalar(shape: LatticeShape, data: Vec<S>) -> Result<Self> {
        Self::new(shape, 1, data)
    }

    pub fn shape(&self) -> &LatticeShape {
        &self.shape
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn point(&self, flat: usize) -> &[S] {
        &self.data[flat * self.p..(flat + 1) * self.p]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Result<Self> {
        Self::new(self.shape.clone(), self.p, self.data.iter().map(|&x| f(x)).collect())
    }

    /// Component-wise mean over the points selected by `keep`.
    pub(crate) fn mean_where(&self, keep: impl Fn(usize) -> bool) -> Vec<S> {
        let mut acc = vec![S::zero(); self.p];
        let mut count = 0usize;
        for f in (0..self.shape.len()).filter(|&f| keep(f)) {
            acc.iter_mut().zip(self.point(f)).for_each(|(a, &x)| *a += x);
            count += 1;
        }
        let c = S::of(count.max(1) as f64);
        acc.iter_mut().for_each(|a| *a /= c);
        acc
    }
}

/// One factor of a product weight function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoordinateWeight {
    /// Normal density with the given location and scale.
    Gaussian { location: f64, scale: f64 },
    /// Uniform density on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

impl CoordinateWeight {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CoordinateWeight::Gaussian { location, scale } if location.is_finite() && scale.is_finite() && scale > 0.0 => Ok(()),
            CoordinateWeight::Uniform { lo, hi } if lo.is_finite() && hi.is_finite() && lo < hi => Ok(()),
            w => Err(Error::config(format!("invalid weight {w}"))),
        }
    }

    /// Mass of the weight on `[t, inf)`.
    pub fn survival(&self, t: f64) -> f64 {
        match *self {
            CoordinateWeight::Gaussian { location, scale } => {
                0.5 * libm::erfc((t - location) / (scale * std::f64::consts::SQRT_2))
            }
            CoordinateWeight::Uniform { lo, hi } => ((hi - t) / (hi - lo)).clamp(0.0, 1.0),
        }
    }
}

impl fmt::Display for CoordinateWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoordinateWeight::Gaussian { location, scale } => write!(f, "gaussian:{location}:{scale}"),
            CoordinateWeight::Uniform { lo, hi } => write!(f, "uniform:{lo}:{hi}"),
        }
    }
}

impl FromStr for CoordinateWeight {
    type Err = Error;

    /// Parses `gaussian:LOC:SCALE` or `uniform:A:B`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad number {x:?} in weight {s:?}")))
        };
        let w = match parts.as_slice() {
            [kind, a, b] if kind.eq_ignore_ascii_case("gaussian") => CoordinateWeight::Gaussian {
                location: num(a)?,
                scale: num(b)?,
            },
            [kind, a, b] if kind.eq_ignore_ascii_case("uniform") => CoordinateWeight::Uniform { lo: num(a)?, hi: num(b)? },
            _ => return Err(Error::config(format!("weight must be gaussian:LOC:SCALE or uniform:A:B, got {s:?}"))),
        };
        w.validate()?;
        Ok(w)
    }
}

/// Product weight `w(t) = prod_l w_l(t_l)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightSpec {
    pub coords: Vec<CoordinateWeight>,
}

impl WeightSpec {
    pub fn new(coords: Vec<CoordinateWeight>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::config("weight needs at least one coordinate"));
        }
        coords.iter().try_for_each(CoordinateWeight::validate)?;
        Ok(Self { coords })
    }

    /// The same factor on each of `p` coordinates.
    pub fn repeated(w: CoordinateWeight, p: usize) -> Result<Self> {
        Self::new(vec![w; p])
    }

    pub fn gaussian(location: f64, scale: f64, p: usize) -> Result<Self> {
        Self::repeated(CoordinateWeight::Gaussian { location, scale }, p)
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Expands a single factor to `p` coordinates; otherwise requires an exact match.
    pub fn fitted_to(&self, p: usize) -> Result<Self> {
        match self.coords.len() {
            n if n == p => Ok(self.clone()),
            1 => Self::repeated(self.coords[0], p),
            n => Err(Error::config(format!("weight has {n} coordinates but observations have p={p}"))),
        }
    }
}

impl Default for WeightSpec {
    /// `N(100, 1000^2)` density on a single coordinate.
    fn default() -> Self {
        Self {
            coords: vec![CoordinateWeight::Gaussian {
                location: 100.0,
                scale: 1000.0,
            }],
        }
    }
}

/// `integral_{s >= t} w(s) ds` for the product weight.
pub fn weight_survival<S: Scalar>(w: &WeightSpec, t: &[S]) -> S {
    debug_assert_eq!(w.dim(), t.len());
    S::of(w.coords.iter().zip(t).map(|(c, &x)| c.survival(x.as_f64())).product())
}

/// Symmetric matrix of inner products between the observations of a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<S> {
    shape: LatticeShape,
    entries: Vec<S>,
    row_sums: Vec<S>,
    total: S,
}

impl<S: Scalar> GramMatrix<S> {
    /// Wraps a row-major `N x N` matrix; it must be exactly symmetric.
    pub fn from_entries(shape: LatticeShape, entries: Vec<S>) -> Result<Self> {
        let n = shape.len();
        if entries.len() != n * n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{n} matrix"),
                found: format!("{} entries", entries.len()),
            });
        }
        for i in 0..n {
            for j in i + 1..n {
                if entries[i * n + j] != entries[j * n + i] {
                    return Err(Error::data(None, format!("Gram matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self::assemble(shape, entries))
    }

    fn assemble(shape: LatticeShape, entries: Vec<S>) -> Self {
        let n = shape.len();
        let row_sums: Vec<S> = entries.par_chunks(n).map(|r| r.iter().copied().sum()).collect();
        let total = row_sums.iter().copied().sum();
        Self {
            shape,
            entries,
            row_sums,
            total,
        }
    }

    pub fn shape(&self) -> &LatticeShape {
        &self.shape
    }

    pub fn n_points(&self) -> usize {
        self.shape.len()
    }

    pub fn entries(&self) -> &[S] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.entries[i * self.n_points() + j]
    }

    pub fn row_sums(&self) -> &[S] {
        &self.row_sums
    }

    pub fn total(&self) -> S {
        self.total
    }

    /// True when every entry is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|x| x.is_zero())
    }
}

/// Gram matrix of `x -> 1{x <= .}` in `L^2(R^p, w)`.
pub fn gram_indicator_cvm<S: Scalar>(field: &ObservationField<S>, w: &WeightSpec) -> Result<GramMatrix<S>> {
    let p = field.p();
    if w.dim() != p {
        return Err(Error::ShapeMismatch {
            expected: format!("weight over p={p} coordinates"),
            found: format!("{} coordinates", w.dim()),
        });
    }
    let n = field.shape().len();
    // Per-point, per-coordinate survival; G_ij = prod_l min(s_il, s_jl).
    let surv: Vec<f64> = (0..n)
        .flat_map(|f| {
            field
                .point(f)
                .iter()
                .zip(&w.coords)
                .map(|(&x, c)| c.survival(x.as_f64()))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut entries = vec![S::zero(); n * n];
    entries.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let si = &surv[i * p..(i + 1) * p];
        for (j, slot) in row.iter_mut().enumerate() {
            let sj = &surv[j * p..(j + 1) * p];
            *slot = S::of(si.iter().zip(sj).map(|(a, b)| a.min(*b)).product());
        }
    });
    Ok(GramMatrix::assemble(field.shape().clone(), entries))
}

/// Gram matrix of the observations under the dot product.
pub fn gram_euclidean<S: Scalar>(field: &ObservationField<S>) -> GramMatrix<S> {
    let n = field.shape().len();
    let mut entries = vec![S::zero(); n * n];
    entries.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let xi = field.point(i);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = xi.iter().zip(field.point(j)).map(|(&a, &b)| a * b).sum();
        }
    });
    GramMatrix::assemble(field.shape().clone(), entries)
}

/// How the mean subtracted before the bootstrap is estimated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MeanAssignment {
    /// One grand mean over the whole lattice.
    Global,
    /// Separate means inside the estimated change block and outside it.
    TwoGroup(Block),
}

impl MeanAssignment {
    /// Group label (0 or 1) of every point, with the group sizes.
    pub(crate) fn groups(&self, shape: &LatticeShape) -> Result<(Vec<u8>, [usize; 2])> {
        match self {
            MeanAssignment::Global => Ok((vec![0; shape.len()], [shape.len(), 0])),
            MeanAssignment::TwoGroup(b) => {
                shape.check_block(b)?;
                let labels: Vec<u8> = b.mask(shape).into_iter().map(u8::from).collect();
                let inside = labels.iter().filter(|&&g| g == 1).count();
                let outside = shape.len() - inside;
                if inside == 0 || outside == 0 {
                    return Err(Error::config(format!(
                        "two-group mean needs both groups nonempty; block {b:?} leaves {inside} inside, {outside} outside"
                    )));
                }
                Ok((labels, [outside, inside]))
            }
        }
    }
}

/// Inner products of the observations after subtracting their group means:
/// `<Y_i - mu(i), Y_j - mu(j)>`.
pub fn center_gram<S: Scalar>(g: &GramMatrix<S>, m: &MeanAssignment) -> Result<GramMatrix<S>> {
    let shape = g.shape();
    let n = shape.len();
    let (labels, sizes) = m.groups(shape)?;
    let groups = if sizes[1] == 0 { 1 } else { 2 };

    // Row sums restricted to each group: rs[i * 2 + a] = sum_{l in A_a} G_il.
    let mut rs = vec![S::zero(); n * 2];
    rs.par_chunks_mut(2).enumerate().for_each(|(i, out)| {
        for (j, &v) in g.entries[i * n..(i + 1) * n].iter().enumerate() {
            out[labels[j] as usize] += v;
        }
    });
    // Block totals between groups.
    let mut tot = [[S::zero(); 2]; 2];
    for i in 0..n {
        for c in 0..groups {
            tot[labels[i] as usize][c] += rs[i * 2 + c];
        }
    }
    let size = [S::of(sizes[0] as f64), S::of(sizes[1].max(1) as f64)];
    let mut cross = [[S::zero(); 2]; 2];
    for a in 0..groups {
        for c in 0..groups {
            cross[a][c] = tot[a][c] / (size[a] * size[c]);
        }
    }

    let mut entries = vec![S::zero(); n * n];
    entries.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let gi = labels[i] as usize;
        for (j, slot) in row.iter_mut().enumerate() {
            let gj = labels[j] as usize;
            let u = rs[i * 2 + gj] / size[gj];
            let v = rs[j * 2 + gi] / size[gi];
            // (u + v) is symmetric in (i, j), keeping the result exactly symmetric.
            *slot = g.entries[i * n + j] - (u + v) + cross[gi][gj];
        }
    });

    // Centering a constant leaves only rounding noise; snap it to zero.
    let scale = g.entries.iter().fold(S::zero(), |a, &x| a.max(x.abs()));
    let noise = S::epsilon() * S::of(64.0) * scale;
    if entries.iter().all(|x| x.abs() <= noise) {
        entries.iter_mut().for_each(|x| *x = S::zero());
    }
    Ok(GramMatrix::assemble(shape.clone(), entries))
}
