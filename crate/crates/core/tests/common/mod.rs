//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use episcan::{Block, CoordinateWeight, LatticeShape, ObservationField};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

/// Every block in lexicographic `(lo, hi)` order.
pub fn all_blocks(dims: &[usize]) -> Vec<Block> {
    fn corners(dims: &[usize], lower: &[usize], upper: bool) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for (l, &n) in dims.iter().enumerate() {
            let range: Vec<usize> = if upper { (lower[l] + 1..=n).collect() } else { (0..n).collect() };
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    range.iter().map(move |&x| {
                        let mut v = prefix.clone();
                        v.push(x);
                        v
                    })
                })
                .collect();
        }
        out
    }
    let mut blocks = Vec::new();
    for lo in corners(dims, &[], false) {
        for hi in corners(dims, &lo, true) {
            blocks.push(Block::new(lo.clone(), hi).unwrap());
        }
    }
    blocks
}

/// First block whose value exceeds the incumbent by more than `1e-10`
/// relative, scanning in lexicographic order.
fn argmax(values: impl Iterator<Item = (Block, f64)>) -> (f64, Block) {
    let mut best: Option<(f64, Block)> = None;
    for (b, v) in values {
        match &best {
            Some((bv, _)) if v <= bv + 1e-10 * bv.abs() => {}
            _ => best = Some((v, b)),
        }
    }
    best.expect("at least one block")
}

/// `max_B |S(B) - |B|/N S(all)|^2 / N` by direct summation over the points.
pub fn brute_mean_scan(field: &ObservationField<f64>) -> (f64, Block) {
    let shape = field.shape();
    let n = shape.len();
    let p = field.p();
    let total: Vec<f64> = (0..p).map(|k| (0..n).map(|f| field.point(f)[k]).sum()).collect();
    let values = all_blocks(shape.dims()).into_iter().map(|b| {
        let lambda = b.volume() as f64 / n as f64;
        let mut s = vec![0.0; p];
        for f in 0..n {
            if b.contains(&shape.coords(f)) {
                for (acc, x) in s.iter_mut().zip(field.point(f)) {
                    *acc += x;
                }
            }
        }
        let q: f64 = (0..p).map(|k| (s[k] - lambda * total[k]).powi(2)).sum();
        (b, q / n as f64)
    });
    argmax(values)
}

/// `max_B Q(B) / N` from a dense Gram matrix by the double loop
/// `sum_{i,j} (1_B(i) - lambda)(1_B(j) - lambda) G_ij`.
pub fn brute_gram_scan(shape: &LatticeShape, g: &[f64]) -> (f64, Block) {
    let n = shape.len();
    let values = all_blocks(shape.dims()).into_iter().map(|b| {
        let lambda = b.volume() as f64 / n as f64;
        let c: Vec<f64> = (0..n).map(|f| f64::from(u8::from(b.contains(&shape.coords(f)))) - lambda).collect();
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                q += c[i] * c[j] * g[i * n + j];
            }
        }
        (b, q / n as f64)
    });
    argmax(values)
}

pub fn euclidean_gram(field: &ObservationField<f64>) -> Vec<f64> {
    let n = field.shape().len();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = field.point(i).iter().zip(field.point(j)).map(|(a, b)| a * b).sum();
        }
    }
    g
}

/// Standard normal mass on `[t, inf)` by composite Simpson quadrature.
pub fn normal_tail(t: f64) -> f64 {
    let upper = t.max(0.0) + 12.0;
    let m = 4000;
    let h = (upper - t) / m as f64;
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = phi(t) + phi(upper);
    for k in 1..m {
        acc += phi(t + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// `<1{Y_i <= .}, 1{Y_j <= .}>` in `L2(w)` for a product of standard normal
/// weights: the weight mass above the componentwise maximum.
pub fn indicator_gram(field: &ObservationField<f64>) -> Vec<f64> {
    let n = field.shape().len();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = field
                .point(i)
                .iter()
                .zip(field.point(j))
                .map(|(a, b)| normal_tail(a.max(*b)))
                .product();
        }
    }
    g
}

pub fn standard_normal_weight() -> CoordinateWeight {
    CoordinateWeight::Gaussian { location: 0.0, scale: 1.0 }
}

pub fn normal_field<R: Rng>(shape: &LatticeShape, p: usize, rng: &mut R) -> ObservationField<f64> {
    let data = (0..shape.len() * p).map(|_| rng.sample(StandardNormal)).collect();
    ObservationField::new(shape.clone(), p, data).unwrap()
}

/// Sup distance between the empirical distribution of `xs` and U(0, 1).
pub fn ks_uniform(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max)
}

/// Prints one verdict line past the test harness's output capture.
pub fn verdict(name: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let line = format!("[acceptance] {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}
