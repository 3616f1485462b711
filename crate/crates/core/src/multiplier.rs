//! Gaussian dependent multiplier fields.
//!
//! Two separable constructions with unit marginal variance:
//!
//! * `ar`: an Ornstein–Uhlenbeck sheet sampled on the lattice, covariance
//!   `prod_l exp(-|h_l| / q)`. Realized by one stationary AR(1) pass per axis
//!   with coefficient `a = exp(-1/q)`.
//! * `ma`: a moving average of i.i.d. normals over a cube of side
//!   `2 floor(q/2) + 1`, covariance `prod_l (1 - |h_l| / (2 floor(q/2) + 1))^+`.
//!   For even `q` the side is `q + 1`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::LatticeShape;
use crate::scalar::Scalar;
use crate::scan::LagWeight;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    /// Exponential kernel, autoregressive sampler.
    #[serde(rename = "ar")]
    ExponentialAr,
    /// Bartlett kernel, moving-average sampler.
    #[serde(rename = "ma")]
    BartlettMa,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::ExponentialAr => "ar",
            KernelKind::BartlettMa => "ma",
        })
    }
}

impl FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ar" => Ok(KernelKind::ExponentialAr),
            "ma" => Ok(KernelKind::BartlettMa),
            other => Err(Error::config(format!("kernel must be ar or ma, got {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub q: u32,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, q: u32) -> Result<Self> {
        if q == 0 {
            return Err(Error::config("kernel bandwidth q must be at least 1"));
        }
        Ok(Self { kind, q })
    }

    pub fn ar(q: u32) -> Result<Self> {
        Self::new(KernelKind::ExponentialAr, q)
    }

    pub fn ma(q: u32) -> Result<Self> {
        Self::new(KernelKind::BartlettMa, q)
    }

    /// AR(1) coefficient `exp(-1/q)` of the autoregressive sampler.
    pub fn ar_coefficient(&self) -> f64 {
        (-1.0 / self.q as f64).exp()
    }

    /// Half-width `floor(q/2)` of the moving-average window.
    pub fn ma_half_width(&self) -> usize {
        (self.q / 2) as usize
    }

    /// Covariance of the sampled field at lag `h`.
    pub fn kernel_value(&self, h: &[isize]) -> f64 {
        match self.kind {
            KernelKind::ExponentialAr => {
                let q = self.q as f64;
                h.iter().map(|&x| (-(x.unsigned_abs() as f64) / q).exp()).product()
            }
            KernelKind::BartlettMa => {
                let window = (2 * self.ma_half_width() + 1) as f64;
                h.iter()
                    .map(|&x| (1.0 - x.unsigned_abs() as f64 / window).max(0.0))
                    .product()
            }
        }
    }

    /// Warning text when `q >= sqrt(min n_l)`, where bootstrap consistency
    /// needs `q = o(sqrt(n))`.
    pub fn bandwidth_warning(&self, shape: &LatticeShape) -> Option<String> {
        let n = *shape.dims().iter().min().expect("nonempty shape") as f64;
        ((self.q as f64) >= n.sqrt()).then(|| {
            format!(
                "bandwidth q={} is at least sqrt(n)={:.2}; the bootstrap is only justified for q growing slower than sqrt(n)",
                self.q,
                n.sqrt()
            )
        })
    }

    /// Draws one field into `out` (flat lattice order); `scratch` is reused.
    pub(crate) fn fill<R: Rng + ?Sized>(&self, shape: &LatticeShape, rng: &mut R, out: &mut [f64], scratch: &mut Vec<f64>) {
        match self.kind {
            KernelKind::ExponentialAr => {
                out.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
                separable_ar_filter(shape.dims(), self.ar_coefficient(), out);
            }
            KernelKind::BartlettMa => moving_average(shape.dims(), self.ma_half_width(), rng, out, scratch),
        }
    }

    pub fn sample<S: Scalar, R: Rng + ?Sized>(&self, shape: &LatticeShape, rng: &mut R) -> MultiplierField<S> {
        let mut buf = vec![0.0; shape.len()];
        self.fill(shape, rng, &mut buf, &mut Vec::new());
        MultiplierField {
            shape: shape.clone(),
            values: buf.into_iter().map(S::of).collect(),
            spec: *self,
            seed: None,
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(q={})", self.kind, self.q)
    }
}

impl LagWeight for KernelSpec {
    fn weight(&self, lag: &[isize]) -> f64 {
        self.kernel_value(lag)
    }

    fn support_radius(&self) -> Option<usize> {
        match self.kind {
            KernelKind::ExponentialAr => None,
            KernelKind::BartlettMa => Some(2 * self.ma_half_width()),
        }
    }
}

/// Free-function form of [`KernelSpec::kernel_value`].
pub fn kernel_value(spec: &KernelSpec, h: &[isize]) -> f64 {
    spec.kernel_value(h)
}

/// Applies a stationary AR(1) filter `v_t = a v_{t-1} + sqrt(1 - a^2) e_t`
/// (with `v_0 = e_0`) along every axis of a row-major field of i.i.d.
/// unit-variance values. The result has covariance `prod_l a^|h_l|`.
pub(crate) fn separable_ar_filter(dims: &[usize], a: f64, buf: &mut [f64]) {
    let root = (1.0 - a * a).sqrt();
    let mut inner = 1;
    for l in (0..dims.len()).rev() {
        let extent = dims[l];
        let block = extent * inner;
        for base in (0..buf.len()).step_by(block) {
            for c in 1..extent {
                let (prev, cur) = buf[base + (c - 1) * inner..base + (c + 1) * inner].split_at_mut(inner);
                for (x, &p) in cur.iter_mut().zip(prev.iter()) {
                    *x = a * p + root * *x;
                }
            }
        }
        inner = block;
    }
}

/// Moving average of i.i.d. normals over a cube of half-width `w`, scaled to
/// unit variance.
fn moving_average<R: Rng + ?Sized>(dims: &[usize], w: usize, rng: &mut R, out: &mut [f64], scratch: &mut Vec<f64>) {
    let d = dims.len();
    let mut cur_dims: Vec<usize> = dims.iter().map(|n| n + 2 * w).collect();
    let padded: usize = cur_dims.iter().product();
    scratch.clear();
    scratch.extend((0..padded).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let mut src = std::mem::take(scratch);
    let mut dst = Vec::with_capacity(padded);
    let width = 2 * w + 1;
    for l in 0..d {
        let inner: usize = cur_dims[l + 1..].iter().product();
        let outer: usize = cur_dims[..l].iter().product();
        let ext_in = cur_dims[l];
        let ext_out = dims[l];
        dst.clear();
        dst.resize(outer * ext_out * inner, 0.0);
        for o in 0..outer {
            for t in 0..ext_out {
                let out_row = &mut dst[(o * ext_out + t) * inner..(o * ext_out + t + 1) * inner];
                for u in t..t + width {
                    let in_row = &src[(o * ext_in + u) * inner..(o * ext_in + u + 1) * inner];
                    out_row.iter_mut().zip(in_row).for_each(|(a, &b)| *a += b);
                }
            }
        }
        cur_dims[l] = ext_out;
        std::mem::swap(&mut src, &mut dst);
    }
    let scale = (width as f64).powf(-(d as f64) / 2.0);
    out.iter_mut().zip(&src).for_each(|(o, &x)| *o = scale * x);
    *scratch = src;
}

/// One realization of a multiplier field.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiplierField<S> {
    pub shape: LatticeShape,
    pub values: Vec<S>,
    pub spec: KernelSpec,
    /// Seed of the stream the field was drawn from, when known.
    pub seed: Option<u64>,
}

impl<S: Scalar> MultiplierField<S> {
    /// A field with explicitly supplied values.
    pub fn from_values(shape: LatticeShape, values: Vec<S>, spec: KernelSpec) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} multipliers", shape.len()),
                found: format!("{}", values.len()),
            });
        }
        Ok(Self {
            shape,
            values,
            spec,
            seed: None,
        })
    }

    /// Draws a field from the stream `(seed, stream)`.
    pub fn sample_seeded(spec: KernelSpec, shape: &LatticeShape, seed: u64, stream: u64) -> Self {
        let mut rng = crate::rng::stream_rng(seed, stream);
        let mut f = spec.sample(shape, &mut rng);
        f.seed = Some(seed);
        f
    }
}

/// Autoregressive multiplier field with covariance `prod_l exp(-|h_l|/q)`.
pub fn sample_ar_field<S: Scalar, R: Rng + ?Sized>(shape: &LatticeShape, q: u32, rng: &mut R) -> Result<MultiplierField<S>> {
    Ok(KernelSpec::ar(q)?.sample(shape, rng))
}

/// Moving-average multiplier field with a Bartlett covariance.
pub fn sample_ma_field<S: Scalar, R: Rng + ?Sized>(shape: &LatticeShape, q: u32, rng: &mut R) -> Result<MultiplierField<S>> {
    Ok(KernelSpec::ma(q)?.sample(shape, rng))
}

/// Monte Carlo mean of per-replicate statistics with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub replicates: usize,
}

impl MonteCarloEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let k = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / k;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / k).sqrt(),
            replicates: xs.len(),
        }
    }

    /// Whether `target` lies within `k` standard errors of the mean.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error
    }
}

/// Average of `V(i) V(i + lag)` over positions and replicates.
///
/// The standard error treats each replicate's spatial average as one draw.
pub fn empirical_multiplier_cov<R: Rng + ?Sized>(
    spec: &KernelSpec,
    shape: &LatticeShape,
    lag: &[isize],
    replicates: usize,
    rng: &mut R,
) -> Result<MonteCarloEstimate> {
    if replicates < 2 {
        return Err(Error::config("need at least 2 replicates"));
    }
    if lag.len() != shape.ndim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}-dimensional lag", shape.ndim()),
            found: format!("{}-dimensional lag", lag.len()),
        });
    }
    if let Some(axis) = lag.iter().zip(shape.dims()).position(|(&h, &n)| h.unsigned_abs() >= n) {
        return Err(Error::config(format!("lag {lag:?} leaves the lattice on axis {axis}")));
    }
    let d = shape.ndim();
    let dims = shape.dims();
    let strides = shape.strides();
    let from: Vec<usize> = lag.iter().map(|&h| (-h).max(0) as usize).collect();
    let to: Vec<usize> = lag.iter().zip(dims).map(|(&h, &n)| n - h.max(0) as usize).collect();
    let shift: isize = lag.iter().zip(&strides).map(|(&h, &s)| h * s as isize).sum();

    let mut buf = vec![0.0; shape.len()];
    let mut scratch = Vec::new();
    let mut per_rep = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        spec.fill(shape, rng, &mut buf, &mut scratch);
        let mut acc = 0.0;
        let mut count = 0usize;
        let mut a = from.clone();
        'points: loop {
            let fa: usize = a.iter().zip(&strides).map(|(x, s)| x * s).sum();
            acc += buf[fa] * buf[(fa as isize + shift) as usize];
            count += 1;
            for l in (0..d).rev() {
                a[l] += 1;
                if a[l] < to[l] {
                    continue 'points;
                }
                a[l] = from[l];
            }
            break;
        }
        per_rep.push(acc / count as f64);
    }
    Ok(MonteCarloEstimate::from_samples(&per_rep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_examples() {
        for spec in [KernelSpec::ar(3).unwrap(), KernelSpec::ma(4).unwrap()] {
            assert_eq!(spec.kernel_value(&[0, 0]), 1.0);
        }
        let ar = KernelSpec::ar(6).unwrap();
        assert_relative_eq!(ar.kernel_value(&[1, 0]), (-1.0f64 / 6.0).exp(), epsilon = 1e-15);
        assert_eq!(format!("{:.4}", ar.kernel_value(&[1, 0])), "0.8465");
        let ma = KernelSpec::ma(2).unwrap();
        assert_relative_eq!(ma.kernel_value(&[1, 1]), 4.0 / 9.0, epsilon = 1e-15);
        assert_eq!(ma.kernel_value(&[3, 0]), 0.0);
    }

    #[test]
    fn kernel_is_symmetric_and_bounded() {
        for spec in [KernelSpec::ar(2).unwrap(), KernelSpec::ma(6).unwrap(), KernelSpec::ma(5).unwrap()] {
            for a in -8isize..=8 {
                for b in -8isize..=8 {
                    let v = spec.kernel_value(&[a, b]);
                    assert!(v.abs() <= 1.0);
                    assert_eq!(v, spec.kernel_value(&[-a, b]));
                    assert_eq!(v, spec.kernel_value(&[a, -b]));
                    assert_eq!(v, spec.kernel_value(&[b, a]));
                }
            }
        }
    }

    #[test]
    fn kernel_mass_grows_like_q_to_the_d() {
        for kind in [KernelKind::ExponentialAr, KernelKind::BartlettMa] {
            let ratios: Vec<f64> = [2u32, 6, 10]
                .iter()
                .map(|&q| {
                    let spec = KernelSpec::new(kind, q).unwrap();
                    let mut mass = 0.0;
                    for a in -100isize..=100 {
                        for b in -100isize..=100 {
                            mass += spec.kernel_value(&[a, b]).abs();
                        }
                    }
                    mass / (q as f64).powi(2)
                })
                .collect();
            let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |(l, h), &r| (l.min(r), h.max(r)));
            assert!(hi / lo < 3.0, "{kind:?}: {ratios:?}");
        }
    }

    #[test]
    fn zero_bandwidth_is_rejected() {
        assert!(KernelSpec::ar(0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let shape = LatticeShape::new(vec![7, 5]).unwrap();
        for spec in [KernelSpec::ar(3).unwrap(), KernelSpec::ma(4).unwrap()] {
            let a: MultiplierField<f64> = MultiplierField::sample_seeded(spec, &shape, 99, 4);
            let b: MultiplierField<f64> = MultiplierField::sample_seeded(spec, &shape, 99, 4);
            let c: MultiplierField<f64> = MultiplierField::sample_seeded(spec, &shape, 99, 5);
            assert_eq!(a, b);
            assert_ne!(a.values, c.values);
        }
    }

    #[test]
    fn huge_bandwidth_is_nearly_constant() {
        let shape = LatticeShape::cube(2, 20).unwrap();
        let spec = KernelSpec::ar(10_000).unwrap();
        // Matched streams: both estimates see the same fields.
        let est = empirical_multiplier_cov(&spec, &shape, &[1, 0], 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let var = empirical_multiplier_cov(&spec, &shape, &[0, 0], 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((est.mean / var.mean - 1.0).abs() < 0.01, "{est:?} {var:?}");
    }

    #[test]
    fn ar_covariance_matches_kernel() {
        let shape = LatticeShape::cube(2, 60).unwrap();
        let spec = KernelSpec::ar(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let var = empirical_multiplier_cov(&spec, &shape, &[0, 0], 200, &mut rng).unwrap();
        assert!(var.within(1.0, 3.0), "{var:?}");
        let lag = empirical_multiplier_cov(&spec, &shape, &[0, 2], 200, &mut rng).unwrap();
        assert!(lag.within(spec.kernel_value(&[0, 2]), 3.0), "{lag:?}");
    }

    #[test]
    fn ma_covariance_matches_kernel() {
        let shape = LatticeShape::cube(2, 60).unwrap();
        let spec = KernelSpec::ma(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (lag, want) in [([0isize, 0], 1.0), ([1, 0], 2.0 / 3.0), ([2, 0], 1.0 / 3.0), ([3, 1], 0.0)] {
            let est = empirical_multiplier_cov(&spec, &shape, &lag, 200, &mut rng).unwrap();
            assert!(est.within(want, 3.0), "lag {lag:?}: {est:?}");
        }
    }

    #[test]
    fn odd_ma_bandwidth_uses_floor_half_width() {
        let spec = KernelSpec::ma(5).unwrap();
        assert_eq!(spec.ma_half_width(), 2);
        assert_relative_eq!(spec.kernel_value(&[1]), 0.8, epsilon = 1e-15);
        assert_eq!(spec.kernel_value(&[5]), 0.0);
        assert_eq!(spec.support_radius(), Some(4));
        let shape = LatticeShape::cube(1, 4000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let est = empirical_multiplier_cov(&spec, &shape, &[1], 100, &mut rng).unwrap();
        assert!(est.within(0.8, 3.0), "{est:?}");
    }

    #[test]
    fn ar_statistics_are_exchangeable_across_axes() {
        let shape = LatticeShape::cube(2, 50).unwrap();
        let spec = KernelSpec::ar(4).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(10);
        let mut r2 = ChaCha8Rng::seed_from_u64(10);
        let a = empirical_multiplier_cov(&spec, &shape, &[1, 0], 200, &mut r1).unwrap();
        let b = empirical_multiplier_cov(&spec, &shape, &[0, 1], 200, &mut r2).unwrap();
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.mean - b.mean).abs() <= 3.0 * se, "{a:?} {b:?}");
    }

    #[test]
    fn empirical_cov_validates_lag() {
        let shape = LatticeShape::cube(2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = KernelSpec::ar(2).unwrap();
        assert!(empirical_multiplier_cov(&spec, &shape, &[5, 0], 10, &mut rng).is_err());
        assert!(empirical_multiplier_cov(&spec, &shape, &[1], 10, &mut rng).is_err());
        assert!(empirical_multiplier_cov(&spec, &shape, &[1, 0], 1, &mut rng).is_err());
    }

    #[test]
    fn bandwidth_warning_threshold() {
        let shape = LatticeShape::cube(2, 30).unwrap();
        assert!(KernelSpec::ar(5).unwrap().bandwidth_warning(&shape).is_none());
        assert!(KernelSpec::ar(6).unwrap().bandwidth_warning(&shape).is_some());
    }
}
