//! Unit-ball quadrature against the standard bump `C exp(-1/(1-|u|^2))`.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Scheme {
    /// Gauss-Legendre on [-1, 1].
    GaussLegendre,
    /// Gauss-Legendre radius times uniform angle.
    Polar,
    /// Halton points in the ball with antithetic mirrors.
    Halton,
}

/// Node/weight set on the closed unit ball of R^m, weights absorbing the bump.
#[derive(Clone, Debug)]
pub struct BallRule {
    pub dim: usize,
    pub scheme: Scheme,
    /// Row-major `len x dim`.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl BallRule {
    /// `count` is the requested total node count.
    pub fn new(dim: usize, count: usize, min_count: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Quadrature("dimension must be positive".into()));
        }
        if count < min_count.max(2) {
            return Err(Error::Quadrature(format!(
                "{count} nodes requested, minimum is {}",
                min_count.max(2)
            )));
        }
        let (scheme, nodes, raw) = match dim {
            1 => {
                let (x, w) = gauss_legendre(count);
                let raw = x
                    .iter()
                    .zip(&w)
                    .map(|(&u, &wi)| wi * bump_profile(u * u))
                    .collect();
                (Scheme::GaussLegendre, x, raw)
            }
            2 => {
                let nr = ((count as f64 / 2.0).sqrt().round() as usize).max(1);
                let nt = 2 * nr;
                let (x, w) = gauss_legendre(nr);
                let mut nodes = Vec::with_capacity(2 * nr * nt);
                let mut raw = Vec::with_capacity(nr * nt);
                for (xr, wr) in x.iter().zip(&w) {
                    let r = 0.5 * (xr + 1.0);
                    let wr = 0.5 * wr * r * bump_profile(r * r);
                    for j in 0..nt {
                        let th = std::f64::consts::TAU * (j as f64 + 0.5) / nt as f64;
                        nodes.push(r * th.cos());
                        nodes.push(r * th.sin());
                        raw.push(wr);
                    }
                }
                (Scheme::Polar, nodes, raw)
            }
            _ => {
                let half = count / 2;
                let mut nodes = Vec::with_capacity(dim * 2 * half);
                let mut raw = Vec::with_capacity(2 * half);
                let mut idx = 1u64;
                let mut p = vec![0.0; dim];
                while raw.len() < 2 * half {
                    for (d, pd) in p.iter_mut().enumerate() {
                        *pd = 2.0 * radical_inverse(idx, PRIMES[d % PRIMES.len()]) - 1.0;
                    }
                    idx += 1;
                    let r2: f64 = p.iter().map(|x| x * x).sum();
                    if r2 >= 1.0 {
                        continue;
                    }
                    let w = bump_profile(r2);
                    nodes.extend_from_slice(&p);
                    nodes.extend(p.iter().map(|x| -x));
                    raw.push(w);
                    raw.push(w);
                }
                (Scheme::Halton, nodes, raw)
            }
        };
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        Ok(Self {
            dim,
            scheme,
            nodes,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, j: usize) -> &[f64] {
        &self.nodes[j * self.dim..(j + 1) * self.dim]
    }
}

const PRIMES: [u64; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Unnormalised `exp(-1/(1-r2))` on the open ball, zero outside.
pub fn bump_profile(r2: f64) -> f64 {
    if r2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r2)).exp()
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1], ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, z);
        if d != 0.0 {
            dp = d;
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre(n: usize, z: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, z);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

fn sphere_area(m: usize) -> f64 {
    // |S^{m-1}| = 2 pi^{m/2} / Gamma(m/2)
    let half = m as f64 / 2.0;
    let gamma = if m.is_multiple_of(2) {
        (1..m / 2).map(|k| k as f64).product::<f64>()
    } else {
        let mut g = std::f64::consts::PI.sqrt();
        let mut s = 0.5;
        while s < half - 1e-9 {
            g *= s;
            s += 1.0;
        }
        g
    };
    2.0 * std::f64::consts::PI.powf(half) / gamma
}

/// `kappa = max(int |grad rho|, sup |grad rho|)` for the normalised bump on R^m.
pub fn bump_kappa(m: usize) -> f64 {
    let n = 200_000;
    let h = 1.0 / n as f64;
    let area = sphere_area(m);
    let (mut mass, mut grad_mass, mut grad_sup) = (0.0, 0.0, 0.0f64);
    for i in 0..n {
        let r = (i as f64 + 0.5) * h;
        let f = bump_profile(r * r);
        let df = f * 2.0 * r / ((1.0 - r * r) * (1.0 - r * r));
        let shell = area * r.powi(m as i32 - 1) * h;
        mass += f * shell;
        grad_mass += df * shell;
        grad_sup = grad_sup.max(df);
    }
    (grad_mass / mass).max(grad_sup / mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(7);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(12)).sum();
        assert_abs_diff_eq!(s, 2.0 / 13.0, epsilon = 1e-14);
        let (_, w) = gauss_legendre(640);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rules_have_unit_mass_and_stay_in_ball() {
        for m in 1..=3 {
            let rule = BallRule::new(m, 200, 8).unwrap();
            assert_abs_diff_eq!(rule.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-13);
            for j in 0..rule.len() {
                let r2: f64 = rule.node(j).iter().map(|x| x * x).sum();
                assert!(r2 <= 1.0);
                assert!(rule.weights[j] >= 0.0);
            }
        }
    }

    #[test]
    fn rules_are_symmetric() {
        for m in 1..=3 {
            let rule = BallRule::new(m, 100, 8).unwrap();
            let first: Vec<f64> = (0..m)
                .map(|d| {
                    (0..rule.len())
                        .map(|j| rule.weights[j] * rule.node(j)[d])
                        .sum()
                })
                .collect();
            for v in first {
                assert!(v.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn one_dimensional_moments_converge() {
        let coarse = BallRule::new(1, 64, 8).unwrap();
        let dense = BallRule::new(1, 640, 8).unwrap();
        let mom = |r: &BallRule, k: i32| -> f64 {
            (0..r.len())
                .map(|j| r.weights[j] * r.node(j)[0].powi(k))
                .sum()
        };
        for k in [2, 4, 6] {
            assert!((mom(&coarse, k) - mom(&dense, k)).abs() < 1e-11);
        }
    }

    #[test]
    fn too_few_nodes_rejected() {
        assert!(matches!(BallRule::new(1, 4, 8), Err(Error::Quadrature(_))));
    }

    #[test]
    fn kappa_one_dimensional() {
        // int |rho'| = 2 rho(0) for a unimodal bump
        let k = bump_kappa(1);
        let c = 1.0 / (2.0 * 0.443_993_816_168_079_4);
        assert!(k >= 2.0 * c * (-1.0f64).exp() - 1e-6);
        assert!(k.is_finite() && k < 10.0);
    }
}
