//! Index algebra for d-dimensional lattices.
//!
//! Lattice points are 1-based, `{1..n_1} x ... x {1..n_d}`, and stored
//! row-major (last axis fastest) under their 0-based coordinates `i - 1`.
//! A [`Block`] is the half-open box `(lo, hi]`, so with 0-based coordinates
//! `c` it contains exactly the points with `lo_l <= c_l < hi_l`.
//!
//! Prefix tensors live on the padded grid `{0..n_1} x ... x {0..n_d}`; every
//! entry with a zero coordinate is zero, and the entry at `m` holds the sum
//! over `(0, m]`. Box sums are the alternating sum over the `2^d` corners.

use std::mem::size_of;
use std::ops::{Add, Sub};

use num_traits::{Float, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default ceiling for [`PairPrefixTensor`] allocations (2 GiB).
pub const DEFAULT_MEMORY_CAP_BYTES: u64 = 2 << 30;

/// Element type of a prefix tensor: anything closed under `+` and `-`.
///
/// Integers give exact box sums; floats give the usual rounding behaviour.
pub trait Additive: Copy + Zero + Add<Output = Self> + Sub<Output = Self> + Send + Sync {}

impl<T> Additive for T where T: Copy + Zero + Add<Output = T> + Sub<Output = T> + Send + Sync {}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LatticeShape {
    dims: Vec<usize>,
}

impl TryFrom<Vec<usize>> for LatticeShape {
    type Error = Error;
    fn try_from(dims: Vec<usize>) -> Result<Self> {
        LatticeShape::new(dims)
    }
}

impl From<LatticeShape> for Vec<usize> {
    fn from(s: LatticeShape) -> Self {
        s.dims
    }
}

impl LatticeShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidShape("lattice needs at least one axis".into()));
        }
        if let Some(axis) = dims.iter().position(|&n| n == 0) {
            return Err(Error::InvalidShape(format!("axis {axis} has zero length")));
        }
        // Both the point count and the padded count must be addressable.
        let mut padded: usize = 1;
        for &n in &dims {
            if n == usize::MAX {
                return Err(Error::InvalidShape(format!("{dims:?} overflows the index range")));
            }
            padded = padded
                .checked_mul(n.saturating_add(1))
                .ok_or_else(|| Error::InvalidShape(format!("{dims:?} overflows the index range")))?;
        }
        Ok(Self { dims })
    }

    /// The equal-sided lattice `{1..n}^d`.
    pub fn cube(d: usize, n: usize) -> Result<Self> {
        Self::new(vec![n; d])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Number of lattice points `N = prod n_l`.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn padded_dims(&self) -> Vec<usize> {
        self.dims.iter().map(|n| n + 1).collect()
    }

    /// Number of entries of a scalar prefix tensor, `prod (n_l + 1)`.
    pub fn padded_len(&self) -> usize {
        self.dims.iter().map(|n| n + 1).product()
    }

    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.dims)
    }

    pub fn padded_strides(&self) -> Vec<usize> {
        row_major_strides(&self.padded_dims())
    }

    /// Flat storage index of the point with 0-based coordinates `coords`.
    pub fn flat_index(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.ndim());
        coords
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &n)| acc * n + c)
    }

    /// 0-based coordinates of flat index `flat`.
    pub fn coords(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.ndim()];
        for (slot, &n) in out.iter_mut().zip(&self.dims).rev() {
            *slot = flat % n;
            flat /= n;
        }
        out
    }

    /// For every lattice point (flat order), its index in the padded grid.
    pub fn padded_positions(&self) -> Vec<usize> {
        let pstrides = self.padded_strides();
        let d = self.ndim();
        let mut coords = vec![0usize; d];
        let mut out = Vec::with_capacity(self.len());
        for _ in 0..self.len() {
            out.push(
                coords
                    .iter()
                    .zip(&pstrides)
                    .map(|(&c, &s)| (c + 1) * s)
                    .sum(),
            );
            for l in (0..d).rev() {
                coords[l] += 1;
                if coords[l] < self.dims[l] {
                    break;
                }
                coords[l] = 0;
            }
        }
        out
    }

    pub fn check_block(&self, b: &Block) -> Result<()> {
        if b.ndim() != self.ndim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}-dimensional block", self.ndim()),
                found: format!("{}-dimensional block", b.ndim()),
            });
        }
        for (axis, ((&lo, &hi), &n)) in b.lo.iter().zip(&b.hi).zip(&self.dims).enumerate() {
            if lo >= hi || hi > n {
                return Err(Error::BlockOutOfRange {
                    axis,
                    lo,
                    hi,
                    extent: n,
                });
            }
        }
        Ok(())
    }

    /// The block `(0, n]` covering the whole lattice.
    pub fn full_block(&self) -> Block {
        Block {
            lo: vec![0; self.ndim()],
            hi: self.dims.clone(),
        }
    }

    /// Number of blocks `(k, m]` with `0 <= k < m <= n`: `prod n_l (n_l + 1) / 2`.
    pub fn block_count(&self) -> u128 {
        self.dims
            .iter()
            .map(|&n| (n as u128) * (n as u128 + 1) / 2)
            .product()
    }
}

fn row_major_strides(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for l in (0..dims.len().saturating_sub(1)).rev() {
        strides[l] = strides[l + 1] * dims[l + 1];
    }
    strides
}

/// The half-open integer box `(lo, hi]`.
///
/// Ordering is lexicographic on `(lo, hi)`, which is also the enumeration and
/// tie-break order of the scans.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Block {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl Block {
    pub fn new(lo: Vec<usize>, hi: Vec<usize>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidBlock(format!(
                "corner lengths differ or are empty: {lo:?} / {hi:?}"
            )));
        }
        if let Some(axis) = lo.iter().zip(&hi).position(|(a, b)| a >= b) {
            return Err(Error::InvalidBlock(format!(
                "empty on axis {axis}: ({}, {}]",
                lo[axis], hi[axis]
            )));
        }
        Ok(Self { lo, hi })
    }

    /// Maps the fractional box `(theta, gamma]` to `(floor(n theta), floor(n gamma)]`.
    ///
    /// Returns `None` when the integer box is empty on some axis.
    pub fn from_fractions(shape: &LatticeShape, theta: &[f64], gamma: &[f64]) -> Option<Block> {
        // Products such as 30 * 0.3 may land a hair below an integer.
        let fl = |n: usize, x: f64| ((n as f64) * x + 1e-9).floor().max(0.0) as usize;
        let lo: Vec<usize> = shape.dims().iter().zip(theta).map(|(&n, &t)| fl(n, t).min(n)).collect();
        let hi: Vec<usize> = shape.dims().iter().zip(gamma).map(|(&n, &g)| fl(n, g).min(n)).collect();
        Block::new(lo, hi).ok()
    }

    pub fn ndim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> usize {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    /// Whether the point with 0-based coordinates `coords` lies in the block.
    pub fn contains(&self, coords: &[usize]) -> bool {
        coords
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&c, (&lo, &hi))| lo <= c && c < hi)
    }

    /// Membership mask over the flat lattice storage.
    pub fn mask(&self, shape: &LatticeShape) -> Vec<bool> {
        (0..shape.len()).map(|f| self.contains(&shape.coords(f))).collect()
    }
}

/// Inclusive bounds on the number of points of a scanned block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeBounds {
    pub min: usize,
    pub max: usize,
}

impl VolumeBounds {
    /// `eps1 N <= volume <= (1 - eps2) N`.
    pub fn from_fractions(eps1: f64, eps2: f64, total: usize) -> Result<Self> {
        if !(eps1 >= 0.0 && eps2 >= 0.0 && eps1 + eps2 < 1.0) {
            return Err(Error::config(format!(
                "size bounds need eps1, eps2 >= 0 and eps1 + eps2 < 1, got ({eps1}, {eps2})"
            )));
        }
        let n = total as f64;
        let min = ((eps1 * n) - 1e-9).ceil().max(1.0) as usize;
        let max = ((1.0 - eps2) * n + 1e-9).floor() as usize;
        if min > max {
            return Err(Error::config(format!(
                "size bounds ({eps1}, {eps2}) admit no block volume for {total} points"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, volume: usize) -> bool {
        self.min <= volume && volume <= self.max
    }
}

/// Odometer over blocks in lexicographic `(lo, hi)` order.
///
/// Axes `< frozen` of `lo` never move, which lets a scan split the work by
/// the leading lower corner.
pub(crate) struct BlockCursor<'a> {
    dims: &'a [usize],
    frozen: usize,
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl<'a> BlockCursor<'a> {
    pub fn new(dims: &'a [usize]) -> Self {
        Self {
            dims,
            frozen: 0,
            lo: vec![0; dims.len()],
            hi: vec![1; dims.len()],
        }
    }

    /// Cursor over the blocks whose first lower coordinate is `k0`.
    pub fn with_leading(dims: &'a [usize], k0: usize) -> Self {
        let mut c = Self::new(dims);
        c.frozen = 1;
        c.lo[0] = k0;
        c.hi[0] = k0 + 1;
        c
    }

    /// Moves to the next block; false once exhausted.
    pub fn advance(&mut self) -> bool {
        let d = self.dims.len();
        for l in (0..d).rev() {
            if self.hi[l] < self.dims[l] {
                self.hi[l] += 1;
                return true;
            }
            self.hi[l] = self.lo[l] + 1;
        }
        for l in (self.frozen..d).rev() {
            if self.lo[l] + 1 < self.dims[l] {
                self.lo[l] += 1;
                for t in l + 1..d {
                    self.lo[t] = 0;
                }
                for t in 0..d {
                    self.hi[t] = self.lo[t] + 1;
                }
                return true;
            }
        }
        false
    }

    pub fn volume(&self) -> usize {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn block(&self) -> Block {
        Block {
            lo: self.lo.clone(),
            hi: self.hi.clone(),
        }
    }
}

/// Every block of `shape` in lexicographic `(lo, hi)` order, optionally
/// restricted to a volume range.
pub fn enumerate_blocks(shape: &LatticeShape, bounds: Option<VolumeBounds>) -> Blocks<'_> {
    Blocks {
        cursor: BlockCursor::new(shape.dims()),
        bounds,
        started: false,
        done: false,
    }
}

pub struct Blocks<'a> {
    cursor: BlockCursor<'a>,
    bounds: Option<VolumeBounds>,
    started: bool,
    done: bool,
}

impl Iterator for Blocks<'_> {
    type Item = Block;

    fn next(&mut self) -> Option<Block> {
        loop {
            if self.done {
                return None;
            }
            if self.started {
                if !self.cursor.advance() {
                    self.done = true;
                    return None;
                }
            } else {
                self.started = true;
            }
            if self.bounds.is_none_or(|b| b.contains(self.cursor.volume())) {
                return Some(self.cursor.block());
            }
        }
    }
}

/// Offsets and signs of the `2^d` corners of `(lo, hi]` in a padded grid.
///
/// Corner `e` (bit `l` set = upper face on axis `l`) carries the sign
/// `(-1)^(d - popcount(e))`.
#[inline]
pub(crate) fn corners(lo: &[usize], hi: &[usize], pstrides: &[usize], offsets: &mut [usize], signs: &mut [f64]) {
    let d = lo.len();
    for e in 0..(1usize << d) {
        let mut off = 0;
        for l in 0..d {
            off += if e >> l & 1 == 1 { hi[l] } else { lo[l] } * pstrides[l];
        }
        offsets[e] = off;
        signs[e] = if (d - e.count_ones() as usize).is_multiple_of(2) { 1.0 } else { -1.0 };
    }
}

fn corner_is_positive(d: usize, e: usize) -> bool {
    (d - e.count_ones() as usize).is_multiple_of(2)
}

/// In-place cumulative sums along every axis of a row-major tensor whose
/// innermost `unit` entries are independent components.
pub(crate) fn cumsum_axes<T: Additive>(buf: &mut [T], dims: &[usize], unit: usize) {
    let mut inner = unit;
    for l in (0..dims.len()).rev() {
        let extent = dims[l];
        let block = extent * inner;
        for base in (0..buf.len()).step_by(block) {
            for c in 1..extent {
                let (prev, cur) = buf[base + (c - 1) * inner..base + (c + 1) * inner].split_at_mut(inner);
                for (x, &p) in cur.iter_mut().zip(prev.iter()) {
                    *x = *x + p;
                }
            }
        }
        inner = block;
    }
}

/// Kahan-compensated variant of [`cumsum_axes`].
pub(crate) fn cumsum_axes_compensated<T: Float>(buf: &mut [T], dims: &[usize], unit: usize) {
    let mut inner = unit;
    for l in (0..dims.len()).rev() {
        let extent = dims[l];
        let block = extent * inner;
        let mut comp = vec![T::zero(); inner];
        for base in (0..buf.len()).step_by(block) {
            comp.iter_mut().for_each(|c| *c = T::zero());
            for c in 1..extent {
                for t in 0..inner {
                    let sum = buf[base + (c - 1) * inner + t];
                    let y = buf[base + c * inner + t] - comp[t];
                    let s = sum + y;
                    comp[t] = (s - sum) - y;
                    buf[base + c * inner + t] = s;
                }
            }
        }
        inner = block;
    }
}

/// Summation mode for prefix tensor construction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Summation {
    #[default]
    Plain,
    Compensated,
}

/// Cumulative sums of a scalar- or vector-valued lattice field.
#[derive(Clone, Debug)]
pub struct PrefixTensor<T> {
    shape: LatticeShape,
    components: usize,
    pstrides: Vec<usize>,
    values: Vec<T>,
}

impl<T: Additive> PrefixTensor<T> {
    /// Builds the tensor from `field`, laid out as `components` values per point
    /// in flat lattice order.
    pub fn from_field(shape: &LatticeShape, components: usize, field: &[T]) -> Result<Self> {
        let mut t = Self::scatter(shape, components, field)?;
        let pd = shape.padded_dims();
        cumsum_axes(&mut t.values, &pd, components);
        Ok(t)
    }

    pub fn from_scalar_field(shape: &LatticeShape, field: &[T]) -> Result<Self> {
        Self::from_field(shape, 1, field)
    }

    fn scatter(shape: &LatticeShape, components: usize, field: &[T]) -> Result<Self> {
        if components == 0 {
            return Err(Error::config("prefix tensor needs at least one component"));
        }
        if field.len() != shape.len() * components {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", shape.len() * components),
                found: format!("{} values", field.len()),
            });
        }
        let mut values = vec![T::zero(); shape.padded_len() * components];
        for (src, &pos) in field.chunks_exact(components).zip(&shape.padded_positions()) {
            values[pos * components..(pos + 1) * components].copy_from_slice(src);
        }
        Ok(Self {
            shape: shape.clone(),
            components,
            pstrides: shape.padded_strides(),
            values,
        })
    }

    pub fn shape(&self) -> &LatticeShape {
        &self.shape
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Entry at padded index `m`, i.e. the sum over `(0, m]`.
    pub fn at(&self, m: &[usize]) -> &[T] {
        let pos: usize = m.iter().zip(&self.pstrides).map(|(a, s)| a * s).sum();
        &self.values[pos * self.components..(pos + 1) * self.components]
    }

    /// Sum of the field over `b`.
    pub fn box_sum(&self, b: &Block) -> Result<Vec<T>> {
        self.shape.check_block(b)?;
        let mut out = vec![T::zero(); self.components];
        self.box_sum_into(b, &mut out);
        Ok(out)
    }

    /// Scalar shorthand for [`box_sum`](Self::box_sum).
    pub fn box_sum_scalar(&self, b: &Block) -> Result<T> {
        if self.components != 1 {
            return Err(Error::config("box_sum_scalar on a vector-valued tensor"));
        }
        Ok(self.box_sum(b)?[0])
    }

    pub(crate) fn box_sum_into(&self, b: &Block, out: &mut [T]) {
        let d = self.shape.ndim();
        let p = self.components;
        out.iter_mut().for_each(|x| *x = T::zero());
        for e in 0..(1usize << d) {
            let pos: usize = (0..d)
                .map(|l| if e >> l & 1 == 1 { b.hi[l] } else { b.lo[l] } * self.pstrides[l])
                .sum();
            let v = &self.values[pos * p..(pos + 1) * p];
            if corner_is_positive(d, e) {
                out.iter_mut().zip(v).for_each(|(o, &x)| *o = *o + x);
            } else {
                out.iter_mut().zip(v).for_each(|(o, &x)| *o = *o - x);
            }
        }
    }
}

impl<T: Float + Send + Sync> PrefixTensor<T> {
    pub fn from_field_with(
        shape: &LatticeShape,
        components: usize,
        field: &[T],
        summation: Summation,
    ) -> Result<Self> {
        let mut t = Self::scatter(shape, components, field)?;
        let pd = shape.padded_dims();
        match summation {
            Summation::Plain => cumsum_axes(&mut t.values, &pd, components),
            Summation::Compensated => cumsum_axes_compensated(&mut t.values, &pd, components),
        }
        Ok(t)
    }
}

/// Cumulative sums of an `N x N` matrix viewed as a field over pairs of
/// lattice points; the entry at `(m, m')` is `sum_{i in (0,m], j in (0,m']} M_ij`.
#[derive(Clone, Debug)]
pub struct PairPrefixTensor<T> {
    shape: LatticeShape,
    side: usize,
    pstrides: Vec<usize>,
    positions: Vec<usize>,
    values: Vec<T>,
}

impl<T: Additive> PairPrefixTensor<T> {
    /// Bytes needed for the tensor over `shape`.
    pub fn required_bytes(shape: &LatticeShape) -> u64 {
        let side = shape.padded_len() as u64;
        side.saturating_mul(side).saturating_mul(size_of::<T>() as u64)
    }

    /// Allocates a zeroed tensor, refusing when it would exceed `cap_bytes`.
    pub fn zeroed(shape: &LatticeShape, cap_bytes: u64) -> Result<Self> {
        let required = Self::required_bytes(shape);
        if required > cap_bytes {
            return Err(Error::MemoryCap {
                required,
                cap: cap_bytes,
            });
        }
        let side = shape.padded_len();
        Ok(Self {
            shape: shape.clone(),
            side,
            pstrides: shape.padded_strides(),
            positions: shape.padded_positions(),
            values: vec![T::zero(); side * side],
        })
    }

    /// Builds the tensor from a row-major `N x N` matrix.
    pub fn from_matrix(shape: &LatticeShape, matrix: &[T], cap_bytes: u64) -> Result<Self> {
        let mut t = Self::zeroed(shape, cap_bytes)?;
        t.refill_with(matrix.len(), |i, j| matrix[i * shape.len() + j])?;
        Ok(t)
    }

    /// Overwrites the tensor with the prefix sums of `entry(i, j)`.
    pub(crate) fn refill_with(&mut self, len: usize, entry: impl Fn(usize, usize) -> T) -> Result<()> {
        let n = self.shape.len();
        if len != n * n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{n} matrix"),
                found: format!("{len} entries"),
            });
        }
        // Faces stay zero; interior entries are all overwritten below.
        for (i, &pi) in self.positions.iter().enumerate() {
            let row = pi * self.side;
            for (j, &pj) in self.positions.iter().enumerate() {
                self.values[row + pj] = entry(i, j);
            }
        }
        let mut dims = self.shape.padded_dims();
        dims.extend(self.shape.padded_dims());
        cumsum_axes(&mut self.values, &dims, 1);
        Ok(())
    }

    pub fn shape(&self) -> &LatticeShape {
        &self.shape
    }

    /// `sum_{i in b, j in b} M_ij`.
    pub fn pair_box_sum(&self, b: &Block) -> Result<T> {
        self.shape.check_block(b)?;
        let d = self.shape.ndim();
        let pos = |e: usize| -> usize {
            (0..d)
                .map(|l| if e >> l & 1 == 1 { b.hi[l] } else { b.lo[l] } * self.pstrides[l])
                .sum()
        };
        let mut acc = T::zero();
        for e in 0..(1usize << d) {
            let row = pos(e) * self.side;
            for f in 0..(1usize << d) {
                let v = self.values[row + pos(f)];
                if corner_is_positive(d, e) == corner_is_positive(d, f) {
                    acc = acc + v;
                } else {
                    acc = acc - v;
                }
            }
        }
        Ok(acc)
    }

    pub(crate) fn side(&self) -> usize {
        self.side
    }

    pub(crate) fn values(&self) -> &[T] {
        &self.values
    }
}

impl<T: Float + Send + Sync> PairPrefixTensor<T> {
    /// Overwrites the tensor with the prefix sums of `v_i v_j M_ij`.
    pub(crate) fn refill_scaled(&mut self, matrix: &[T], v: &[T]) -> Result<()> {
        let n = self.shape.len();
        if v.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} multipliers"),
                found: format!("{}", v.len()),
            });
        }
        if matrix.len() != n * n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{n} matrix"),
                found: format!("{} entries", matrix.len()),
            });
        }
        for (i, &pi) in self.positions.iter().enumerate() {
            let row = &mut self.values[pi * self.side..(pi + 1) * self.side];
            let src = &matrix[i * n..(i + 1) * n];
            let vi = v[i];
            for ((&pj, &m), &vj) in self.positions.iter().zip(src).zip(v) {
                row[pj] = vi * vj * m;
            }
        }
        let mut dims = self.shape.padded_dims();
        dims.extend(self.shape.padded_dims());
        cumsum_axes(&mut self.values, &dims, 1);
        Ok(())
    }
}
