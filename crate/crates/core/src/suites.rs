//! Randomised property suites over the convex and driver catalogs, and the
//! smoothing convergence table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::convex::{ConvexKind, ConvexSpec, ABS_POWER_EXPONENTS};
use crate::error::Result;
use crate::exec::Exec;
use crate::generator::{beta_trunc, Ctx, DriverKind, GeneratorSpec, MollifierConfig};
use crate::sim::{exp_smooth, n_p, simulate, GridConfig, PathEnsemble};

/// Absolute tolerance of the closed-form identities.
pub const PROX_TOL: f64 = 1e-12;
/// Quadrature budget added to every analytic mollifier bound.
pub const QUAD_TOL: f64 = 1e-6;

/// Worst result of one property over a batch of samples.
#[derive(Clone, Debug, Serialize)]
pub struct PropertyRow {
    pub group: String,
    pub property: &'static str,
    pub samples: usize,
    pub worst: f64,
    pub tol: f64,
    pub pass: bool,
    /// Description of the sample with the worst residual.
    pub offending: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub rows: Vec<PropertyRow>,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<28} {:<14} {:>8} {:>12} {:>10}  verdict\n",
            "group", "property", "samples", "worst", "tol"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<28} {:<14} {:>8} {:>12.3e} {:>10.1e}  {}\n",
                r.group,
                r.property,
                r.samples,
                r.worst,
                r.tol,
                if r.pass { "PASS" } else { "FAIL" }
            ));
            if !r.pass {
                if let Some(o) = &r.offending {
                    s.push_str(&format!("    offending sample: {o}\n"));
                }
            }
        }
        s
    }
}

struct Tracker {
    group: String,
    property: &'static str,
    tol: f64,
    samples: usize,
    worst: f64,
    offending: Option<String>,
}

impl Tracker {
    fn new(group: &str, property: &'static str, tol: f64) -> Self {
        Self {
            group: group.to_string(),
            property,
            tol,
            samples: 0,
            worst: f64::NEG_INFINITY,
            offending: None,
        }
    }

    /// `excess` is `lhs - rhs` of an inequality `lhs <= rhs`.
    fn record(&mut self, excess: f64, sample: impl FnOnce() -> String) {
        self.samples += 1;
        let e = if excess.is_nan() {
            f64::INFINITY
        } else {
            excess
        };
        if e > self.worst {
            self.worst = e;
            self.offending = Some(sample());
        }
    }

    fn finish(self) -> PropertyRow {
        let worst = if self.samples == 0 { 0.0 } else { self.worst };
        PropertyRow {
            pass: worst <= self.tol,
            group: self.group,
            property: self.property,
            samples: self.samples,
            worst,
            tol: self.tol,
            offending: self.offending,
        }
    }
}

/// The catalog exercised by [`prox_suite`].
pub fn convex_catalog() -> Vec<ConvexSpec> {
    let mut v = vec![
        ConvexSpec::zero(1),
        ConvexSpec::indicator(-1.0, 1.0).unwrap(),
        ConvexSpec::indicator(0.0, f64::INFINITY).unwrap(),
        ConvexSpec::indicator(f64::NEG_INFINITY, 0.5).unwrap(),
        ConvexSpec::new(ConvexKind::Quadratic { scale: 1.0 }, 1).unwrap(),
        ConvexSpec::new(ConvexKind::Quadratic { scale: 3.0 }, 2).unwrap(),
        ConvexSpec::new(ConvexKind::MaxZero, 1).unwrap(),
        ConvexSpec::product(vec![
            ConvexKind::IndicatorInterval { lo: -0.5, hi: 2.0 },
            ConvexKind::AbsPower { exponent: 1.5 },
        ])
        .unwrap(),
    ];
    for &e in &ABS_POWER_EXPONENTS {
        v.push(ConvexSpec::new(ConvexKind::AbsPower { exponent: e }, 1).unwrap());
    }
    v
}

/// A proximal map under test: exact, or deliberately broken.
#[derive(Clone, Debug)]
enum Subject {
    Exact(ConvexSpec),
    /// `J(y) = (1 + eps) y` with the quadratic value: expansive.
    Faulty,
}

impl Subject {
    fn name(&self) -> String {
        match self {
            Subject::Exact(s) => s.to_string(),
            Subject::Faulty => "faulty".into(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Subject::Exact(s) => s.dim(),
            Subject::Faulty => 1,
        }
    }

    fn value(&self, y: &[f64]) -> f64 {
        match self {
            Subject::Exact(s) => s.value(y),
            Subject::Faulty => 0.5 * y[0] * y[0],
        }
    }

    fn prox(&self, y: &[f64], eps: f64) -> Vec<f64> {
        match self {
            Subject::Exact(s) => s.prox(y, eps).expect("finite sample"),
            Subject::Faulty => vec![(1.0 + eps) * y[0]],
        }
    }

    fn grad(&self, y: &[f64], eps: f64) -> Vec<f64> {
        match self {
            Subject::Exact(s) => s.grad(y, eps).expect("finite sample"),
            Subject::Faulty => vec![-y[0]],
        }
    }

    fn envelope(&self, y: &[f64], eps: f64) -> f64 {
        match self {
            Subject::Exact(s) => s.moreau(y, eps).expect("finite sample").envelope,
            Subject::Faulty => {
                let j = self.prox(y, eps);
                dist(y, &j).powi(2) / (2.0 * eps) + self.value(&j)
            }
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn fmt_pt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.17}")).collect();
    format!("[{}]", parts.join(","))
}

/// Property residuals over `samples` random `(spec, u, v, eps, delta)`.
///
/// An empty `eps_list` draws `eps` log-uniformly from `[0.05, 2]`; otherwise
/// the whole batch is repeated with `eps` fixed to each entry. `fault` adds
/// an expansive map that must fail.
pub fn prox_suite(eps_list: &[f64], samples: usize, seed: u64, fault: bool) -> SuiteReport {
    let mut subjects: Vec<Subject> = convex_catalog().into_iter().map(Subject::Exact).collect();
    if fault {
        subjects.push(Subject::Faulty);
    }
    let sweeps: Vec<Option<f64>> = if eps_list.is_empty() {
        vec![None]
    } else {
        eps_list.iter().map(|&e| Some(e)).collect()
    };
    let mut rows = Vec::new();
    for fixed in sweeps {
        let group = match fixed {
            Some(e) => format!("eps={e}"),
            None => "eps random".to_string(),
        };
        let props = [
            "resolvent nonexpansive",
            "gradient lipschitz",
            "gradient and envelope",
            "two-eps cross term",
            "sandwich",
            "monotone eps",
        ];
        let mut tr: Vec<Tracker> = props
            .iter()
            .map(|p| Tracker::new(&group, p, PROX_TOL))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log_eps = |rng: &mut ChaCha8Rng| (rng.random_range(0.05f64.ln()..2.0f64.ln())).exp();
        for s in 0..samples {
            let subj = &subjects[s % subjects.len()];
            let d = subj.dim();
            let u: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let e_draw = log_eps(&mut rng);
            let d_draw = log_eps(&mut rng);
            let eps = fixed.unwrap_or(e_draw);
            let delta = fixed.map_or(d_draw, |e| e * (0.5 + d_draw / 2.0));
            let desc = || {
                format!(
                    "{} u={} v={} eps={eps:e} delta={delta:e}",
                    subj.name(),
                    fmt_pt(&u),
                    fmt_pt(&v)
                )
            };

            let (ju, jv) = (subj.prox(&u, eps), subj.prox(&v, eps));
            tr[0].record(dist(&ju, &jv) - dist(&u, &v), desc);

            let (gu, gv) = (subj.grad(&u, eps), subj.grad(&v, eps));
            tr[1].record(dist(&gu, &gv) - dist(&u, &v) / eps, desc);

            // gradient and envelope identities
            let g_id = u
                .iter()
                .zip(&ju)
                .zip(&gu)
                .map(|((y, j), g)| (eps * g - (y - j)).abs())
                .fold(0.0, f64::max);
            let env = subj.envelope(&u, eps);
            let env_id = (env - (dist(&u, &ju).powi(2) / (2.0 * eps) + subj.value(&ju))).abs();
            tr[2].record(g_id.max(env_id), desc);

            let gd = subj.grad(&v, delta);
            let cross = -u
                .iter()
                .zip(&v)
                .zip(gu.iter().zip(&gd))
                .map(|((a, b), (x, y))| (a - b) * (x - y))
                .sum::<f64>()
                - (eps + delta) * gu.iter().zip(&gd).map(|(x, y)| x * y).sum::<f64>();
            tr[3].record(cross, desc);

            let fj = subj.value(&ju);
            let fu = subj.value(&u);
            let mut sw = (-fj).max(fj - env);
            if fu.is_finite() {
                sw = sw.max(env - fu);
            }
            tr[4].record(sw, desc);

            let (lo, hi) = if eps < delta {
                (eps, delta)
            } else {
                (delta, eps)
            };
            let mut mono = subj.envelope(&u, hi) - subj.envelope(&u, lo);
            if fu.is_finite() {
                mono = mono.max(subj.envelope(&u, lo) - fu);
            }
            tr[5].record(mono, desc);
        }
        rows.extend(tr.into_iter().map(Tracker::finish));
    }
    SuiteReport { rows }
}

/// Scalar driver pairs exercised by [`mollifier_suite`].
pub fn generator_catalog() -> Vec<(String, GeneratorSpec)> {
    let one = |f: DriverKind, g: DriverKind| GeneratorSpec::new(f, g, 1, 1).unwrap();
    let singular = DriverKind::SingularTanh {
        a_tilde: 0.2,
        a: 1.0,
        b: 0.5,
        c_tilde: 0.3,
        c: 0.5,
        d: 0.5,
    };
    vec![
        ("zero".into(), GeneratorSpec::zero(1, 1)),
        (
            "linear(1)".into(),
            one(DriverKind::linear(1.0), DriverKind::linear(2.0)),
        ),
        (
            "affine(0.5,-0.3,0.8)".into(),
            one(
                DriverKind::Affine {
                    slope: 0.5,
                    intercept: -0.3,
                    z_gain: 0.8,
                },
                DriverKind::constant(0.2),
            ),
        ),
        (
            "cubic/signedsquare".into(),
            one(DriverKind::Cubic, DriverKind::SignedSquare),
        ),
        ("singular_tanh".into(), one(singular, DriverKind::Zero)),
    ]
}

/// Mollifier bounds on `samples` random points per catalog generator, plus
/// the comparison against a rule with ten times as many nodes.
///
/// The `y`-Lipschitz bound and the dense comparison are only sampled where
/// no quadrature node is truncated at either point: the discrete rule is
/// discontinuous across a change of the truncation pattern. The dense
/// comparison covers `F` only; a driver with a kink inside the ball (signed
/// square `G`) converges algebraically in the node count.
pub fn mollifier_suite(samples: usize, seed: u64, nodes: usize) -> Result<SuiteReport> {
    let (lam, p) = (0.5, 2.0);
    let np = n_p(p);
    let mut rows = Vec::new();
    for (name, gen) in generator_catalog() {
        let props = [
            "sup bound",
            "z lipschitz",
            "y lipschitz",
            "one-sided growth",
            "two-eps monotone",
            "sharp bound",
            "dense 10x",
        ];
        let mut tr: Vec<Tracker> = props
            .iter()
            .map(|p| Tracker::new(&name, p, QUAD_TOL))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = MollifierConfig::new(1.0, 1, nodes)?;
        let dense = MollifierConfig::new(1.0, 1, 10 * nodes)?;
        let kappa = base.kappa;
        let (mut a, mut b) = ([0.0], [0.0]);
        for _ in 0..samples {
            let t = rng.random_range(0.05..1.0);
            let bb = [rng.random_range(-2.0..2.0)];
            let ctx = Ctx::new(t, &bb);
            let eps: f64 = rng.random_range(0.05..1.0);
            let delta: f64 = rng.random_range(0.05..1.0);
            let y: f64 = rng.random_range(-2.0..2.0);
            let yh: f64 = rng.random_range(-2.0..2.0);
            let y_near = y + rng.random_range(-0.1..0.1) * eps;
            let z: f64 = rng.random_range(-3.0..3.0);
            let zh: f64 = rng.random_range(-3.0..3.0);
            let desc = || {
                format!(
                    "t={t} b={} y={y} yhat={yh} z={z} zhat={zh} eps={eps} delta={delta}",
                    bb[0]
                )
            };
            let cfg = base.with_eps(eps);
            let (mu, nu, ell) = (gen.mu(ctx), gen.nu(ctx), gen.ell(ctx));
            let rho = 2.0;
            let (f_sharp, g_sharp) = gen.sharp_bound(rho + 1.0, ctx);

            let fe = |cfg: &MollifierConfig, y: f64, z: f64, out: &mut [f64; 1]| {
                cfg.mollify_f(&gen, ctx, &[y], Some(&[z]), out)
            };
            let ge = |cfg: &MollifierConfig, y: f64, out: &mut [f64; 1]| {
                cfg.mollify_g(&gen, ctx, &[y], out)
            };

            fe(&cfg, y, z, &mut a);
            let f_yz = a[0];
            let bz = beta_trunc(&[z], eps)[0].abs();
            ge(&cfg, y, &mut b);
            let g_y = b[0];
            tr[0].record(
                (f_yz.abs() - ell * bz - 1.0 / eps).max(g_y.abs() - 1.0 / eps),
                desc,
            );

            fe(&cfg, y, zh, &mut a);
            tr[1].record((f_yz - a[0]).abs() - ell * (z - zh).abs(), desc);

            let clean = |c: &MollifierConfig, y: f64| {
                c.untruncated_f(&gen, ctx, &[y]) && c.untruncated_g(&gen, ctx, &[y])
            };
            if clean(&cfg, y) && clean(&cfg, y_near) {
                fe(&cfg, y_near, z, &mut a);
                ge(&cfg, y_near, &mut b);
                let dy = (y - y_near).abs();
                let bound = kappa / eps * (ell * bz + 1.0 / eps) * dy;
                tr[2].record(
                    ((f_yz - a[0]).abs() - bound)
                        .max((g_y - b[0]).abs() - kappa / (eps * eps) * dy),
                    desc,
                );
            }

            // one-sided growth for F at (y, z) against yhat with |yhat| <= rho, and for G with z = 0
            let d = y - yh;
            let zf = if z != 0.0 { 1.0 } else { 0.0 };
            let rhs_f = d.abs() * f_sharp
                + (mu + ell * ell / (2.0 * np * lam) * zf).max(0.0) * d * d
                + np * lam / 2.0 * z * z;
            let rhs_g = d.abs() * g_sharp + nu.max(0.0) * d * d;
            tr[3].record((d * f_yz - rhs_f).max(d * g_y - rhs_g), desc);

            // two-eps bound with y, yhat both in the rho ball
            let cfg_d = base.with_eps(delta);
            fe(&cfg_d, yh, zh, &mut a);
            let de = (eps - delta).abs();
            let small = (1.0 / eps).min(1.0 / delta);
            let ind_z = if zh.abs() >= small && eps != delta {
                1.0
            } else {
                0.0
            };
            let ind_f = if f_sharp >= small { 1.0 } else { 0.0 };
            let ind_g = if g_sharp >= small { 1.0 } else { 0.0 };
            let zq = if z != zh { 1.0 } else { 0.0 };
            let mup = mu.max(0.0);
            let rhs3 = de * (mup * de + 2.0 * f_sharp + 2.0 * ell * z.abs())
                + d.abs()
                    * (2.0 * mup * de
                        + ell * zh.abs() * ind_z
                        + (f_sharp + ell * zh.abs()) * ind_f)
                + (mup + ell * ell / (2.0 * np * lam) * zq) * d * d
                + np * lam / 2.0 * (z - zh).powi(2);
            ge(&cfg_d, yh, &mut b);
            let nup = nu.max(0.0);
            let rhs3g = de * (nup * de + 2.0 * g_sharp)
                + d.abs() * (2.0 * nup * de + g_sharp * ind_g)
                + nup * d * d;
            tr[4].record(
                (d * (f_yz - a[0]) - rhs3).max(d * (g_y - b[0]) - rhs3g),
                desc,
            );

            let (f1, g1) = gen.sharp_bound(1.0, ctx);
            fe(&cfg, 0.0, 0.0, &mut a);
            ge(&cfg, 0.0, &mut b);
            let (fy_sharp, gy_sharp) = gen.sharp_bound(y.abs() + 1.0, ctx);
            let ma4 = (a[0].abs() - f1)
                .max(b[0].abs() - g1)
                .max(f_yz.abs() - ell * z.abs() - fy_sharp)
                .max(g_y.abs() - gy_sharp);
            tr[5].record(ma4, desc);

            let dn = dense.with_eps(eps);
            if clean(&cfg, y) && clean(&dn, y) {
                fe(&dn, y, z, &mut a);
                tr[6].record((f_yz - a[0]).abs(), desc);
            }
        }
        rows.extend(tr.into_iter().map(Tracker::finish));
    }
    Ok(SuiteReport { rows })
}

/// One row of the smoothing table.
#[derive(Clone, Debug, Serialize)]
pub struct SmoothRow {
    pub eps: f64,
    /// Ensemble mean of `sup_t |U^eps_t - B_t|`.
    pub mean_sup_error: f64,
    /// Largest `|U^eps - B|` over all paths and nodes.
    pub max_error: f64,
    /// `max_{p,i} (|M^eps_i| - E_i sup_r |B_r|)`.
    pub bound_excess: f64,
    pub bound_tol: f64,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SmoothReport {
    pub constant_error: f64,
    pub rows: Vec<SmoothRow>,
    pub decreasing: bool,
    pub bound_pass: bool,
}

impl SmoothReport {
    pub fn pass(&self) -> bool {
        self.constant_error <= 1e-12 && self.decreasing && self.bound_pass
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "constant input: max |M^eps - c| = {:.3e}\n",
            self.constant_error
        );
        s.push_str(&format!(
            "{:>8} {:>14} {:>12} {:>12} {:>10}\n",
            "eps", "E sup|U^e-B|", "max|U^e-B|", "bound excess", "bound tol"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:>8} {:>14.6} {:>12.6} {:>12.3e} {:>10.3e}\n",
                r.eps, r.mean_sup_error, r.max_error, r.bound_excess, r.bound_tol
            ));
        }
        s
    }
}

/// Smooths the constant `0.7` and the Brownian path over `eps_list`.
pub fn smooth_demo(
    grid: &GridConfig,
    eps_list: &[f64],
    degree: usize,
    exec: Exec,
) -> Result<SmoothReport> {
    let mut g = grid.clone();
    g.state_dim = 1;
    let ens = simulate(&g, exec)?;
    smooth_demo_on(&ens, eps_list, degree, exec)
}

pub fn smooth_demo_on(
    ens: &PathEnsemble,
    eps_list: &[f64],
    degree: usize,
    exec: Exec,
) -> Result<SmoothReport> {
    let (n, steps) = (ens.paths(), ens.steps());
    let w = steps + 1;
    let c = vec![0.7; n * w];
    let first = eps_list.first().copied().unwrap_or(0.1);
    let sc = exp_smooth(&c, 1, ens, first, degree, exec)?;
    let constant_error = sc
        .m_eps
        .iter()
        .chain(&sc.u_eps)
        .map(|v| (v - 0.7).abs())
        .fold(0.0, f64::max);

    let u: Vec<f64> = (0..n)
        .flat_map(|p| (0..w).map(move |i| (p, i)))
        .map(|(p, i)| ens.b_at(p, i)[0])
        .collect();
    // E_i sup_r |B_r| by the same regression
    let sup: Vec<f64> = (0..n)
        .map(|p| {
            u[p * w..(p + 1) * w]
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()))
        })
        .collect();
    let sup_rep: Vec<f64> = sup
        .iter()
        .flat_map(|s| std::iter::repeat_n(*s, w))
        .collect();
    let e_sup = crate::sim::conditional_expectation(&sup_rep, 1, ens, degree, exec)?;
    let mean = sup.iter().sum::<f64>() / n as f64;
    let sd =
        (sup.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0)).sqrt();
    let nb = (degree + 1) as f64;
    let bound_tol = 3.0 * sd * (nb / n as f64).sqrt();

    let mut rows = Vec::new();
    for &eps in eps_list {
        let s = exp_smooth(&u, 1, ens, eps, degree, exec)?;
        let pathwise: Vec<f64> = (0..n)
            .map(|p| {
                (0..w)
                    .map(|i| (s.u_eps[p * w + i] - u[p * w + i]).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        let excess = (0..n * w)
            .map(|j| s.m_eps[j].abs() - e_sup[j])
            .fold(f64::NEG_INFINITY, f64::max);
        rows.push(SmoothRow {
            eps,
            mean_sup_error: pathwise.iter().sum::<f64>() / n as f64,
            max_error: pathwise.iter().copied().fold(0.0, f64::max),
            bound_excess: excess,
            bound_tol,
            warning: s.warning,
        });
    }
    let decreasing = rows
        .windows(2)
        .all(|r| r[1].mean_sup_error < r[0].mean_sup_error);
    let bound_pass = rows.iter().all(|r| r.bound_excess <= r.bound_tol);
    Ok(SmoothReport {
        constant_error,
        rows,
        decreasing,
        bound_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::DEFAULT_NODES;

    #[test]
    fn prox_suite_passes_and_fault_fails() {
        let r = prox_suite(&[], 2000, 7, false);
        assert!(r.pass(), "{}", r.table());
        let bad = prox_suite(&[], 200, 7, true);
        assert!(!bad.pass());
        let row = bad.rows.iter().find(|r| !r.pass).unwrap();
        assert!(row.offending.as_deref().unwrap().starts_with("faulty"));
    }

    #[test]
    fn prox_suite_sweeps_eps() {
        let r = prox_suite(&[1.0, 0.1, 0.01], 300, 3, false);
        assert_eq!(r.rows.len(), 18);
        assert!(r.pass(), "{}", r.table());
    }

    #[test]
    fn mollifier_suite_small() {
        let r = mollifier_suite(150, 11, DEFAULT_NODES).unwrap();
        assert!(r.pass(), "{}", r.table());
    }

    #[test]
    fn smoothing_table() {
        let g = GridConfig {
            steps: 100,
            paths: 2000,
            seed: 5,
            ..GridConfig::default()
        };
        let r = smooth_demo(&g, &[0.2, 0.1, 0.05], 3, Exec::Parallel).unwrap();
        assert!(r.pass(), "{}", r.table());
    }
}
