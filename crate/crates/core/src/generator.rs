//! Drivers `F(t, y, z)`, `G(t, y)`, their coefficient processes and the
//! mollified approximations used by the penalised solver.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::convex::ConvexSpec;
use crate::error::{Error, Result};
use crate::quadrature::{bump_kappa, BallRule, Scheme};

/// Evaluation context: time and the Brownian state at that time.
#[derive(Clone, Copy, Debug)]
pub struct Ctx<'a> {
    pub t: f64,
    pub b: &'a [f64],
}

impl<'a> Ctx<'a> {
    pub fn new(t: f64, b: &'a [f64]) -> Self {
        Self { t, b }
    }

    fn b0(&self) -> f64 {
        self.b.first().copied().unwrap_or(0.0)
    }
}

type CustomFn = dyn Fn(Ctx<'_>, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// User-supplied driver with constant coefficients.
#[derive(Clone)]
pub struct CustomDriver {
    pub name: String,
    /// `f(ctx, y, z, out)`; `z` is row-major `m x k` (all zeros for `G`).
    pub f: Arc<CustomFn>,
    pub mu: f64,
    pub ell: f64,
}

impl fmt::Debug for CustomDriver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Custom({})", self.name)
    }
}

#[derive(Clone, Debug)]
pub enum DriverKind {
    Zero,
    /// `slope * y_i + intercept + z_gain * sum_j z_ij / sqrt(k)`.
    Affine {
        slope: f64,
        intercept: f64,
        z_gain: f64,
    },
    /// `-y_i^3`.
    Cubic,
    /// `-y_i |y_i|`.
    SignedSquare,
    /// `mu_t (y - tanh(B y)) + ell_t z` with `mu_t = a~ B|B|^a / t^b`,
    /// `ell_t = c~ |B|^((c+1)/2) / t^(d/2)`; one-dimensional.
    SingularTanh {
        a_tilde: f64,
        a: f64,
        b: f64,
        c_tilde: f64,
        c: f64,
        d: f64,
    },
    /// Inner driver plus a constant in every component.
    Shifted(Box<DriverKind>, f64),
    Custom(CustomDriver),
}

impl DriverKind {
    pub fn linear(rho: f64) -> Self {
        DriverKind::Affine {
            slope: -rho,
            intercept: 0.0,
            z_gain: 0.0,
        }
    }

    pub fn constant(c: f64) -> Self {
        DriverKind::Affine {
            slope: 0.0,
            intercept: c,
            z_gain: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, DriverKind::Zero)
    }

    /// True when the driver is not globally Lipschitz in `y` and the solver
    /// should use its mollified version.
    pub fn needs_mollifier(&self) -> bool {
        match self {
            DriverKind::Cubic | DriverKind::SignedSquare | DriverKind::SingularTanh { .. } => true,
            DriverKind::Shifted(inner, _) => inner.needs_mollifier(),
            _ => false,
        }
    }

    fn depends_on_z(&self) -> bool {
        match self {
            DriverKind::Affine { z_gain, .. } => *z_gain != 0.0,
            DriverKind::SingularTanh { .. } | DriverKind::Custom(_) => true,
            DriverKind::Shifted(inner, _) => inner.depends_on_z(),
            _ => false,
        }
    }

    /// `out = driver(ctx, y, z)`; `z = None` means the zero matrix.
    pub fn eval(&self, ctx: Ctx<'_>, y: &[f64], z: Option<&[f64]>, k: usize, out: &mut [f64]) {
        match self {
            DriverKind::Zero => out.fill(0.0),
            DriverKind::Affine {
                slope,
                intercept,
                z_gain,
            } => {
                let scale = z_gain / (k as f64).sqrt();
                for (i, o) in out.iter_mut().enumerate() {
                    let zs = match z {
                        Some(z) if *z_gain != 0.0 => z[i * k..(i + 1) * k].iter().sum::<f64>(),
                        _ => 0.0,
                    };
                    *o = slope * y[i] + intercept + scale * zs;
                }
            }
            DriverKind::Cubic => {
                for (o, &yi) in out.iter_mut().zip(y) {
                    *o = -yi * yi * yi;
                }
            }
            DriverKind::SignedSquare => {
                for (o, &yi) in out.iter_mut().zip(y) {
                    *o = -yi * yi.abs();
                }
            }
            DriverKind::SingularTanh { .. } => {
                let bt = ctx.b0();
                let zz = z.map_or(0.0, |z| z[0]);
                out[0] = self.mu(ctx) * (y[0] - (bt * y[0]).tanh()) + self.ell(ctx) * zz;
            }
            DriverKind::Shifted(inner, h) => {
                inner.eval(ctx, y, z, k, out);
                out.iter_mut().for_each(|o| *o += h);
            }
            DriverKind::Custom(c) => {
                let zero;
                let z = match z {
                    Some(z) => z,
                    None => {
                        zero = vec![0.0; y.len() * k];
                        &zero
                    }
                };
                (c.f)(ctx, y, z, out)
            }
        }
    }

    /// Monotonicity coefficient.
    pub fn mu(&self, ctx: Ctx<'_>) -> f64 {
        match self {
            DriverKind::Zero | DriverKind::Cubic | DriverKind::SignedSquare => 0.0,
            DriverKind::Affine { slope, .. } => *slope,
            DriverKind::SingularTanh { a_tilde, a, b, .. } => {
                let bt = ctx.b0();
                if bt == 0.0 {
                    0.0
                } else {
                    a_tilde * bt * bt.abs().powf(*a) / ctx.t.powf(*b)
                }
            }
            DriverKind::Shifted(inner, _) => inner.mu(ctx),
            DriverKind::Custom(c) => c.mu,
        }
    }

    /// Lipschitz coefficient in `z`.
    pub fn ell(&self, ctx: Ctx<'_>) -> f64 {
        match self {
            DriverKind::Affine { z_gain, .. } => z_gain.abs(),
            DriverKind::SingularTanh { c_tilde, c, d, .. } => {
                let bt = ctx.b0();
                if bt == 0.0 {
                    0.0
                } else {
                    c_tilde * bt.abs().powf(0.5 * (c + 1.0)) / ctx.t.powf(0.5 * d)
                }
            }
            DriverKind::Shifted(inner, _) => inner.ell(ctx),
            DriverKind::Custom(c) => c.ell,
            _ => 0.0,
        }
    }

    /// `sup_{|y| <= rho} |driver(ctx, y, 0)|`.
    pub fn sharp_bound(&self, rho: f64, ctx: Ctx<'_>, m: usize, k: usize) -> f64 {
        match self {
            DriverKind::Zero => 0.0,
            DriverKind::Affine {
                slope, intercept, ..
            } => slope.abs() * rho + intercept.abs() * (m as f64).sqrt(),
            DriverKind::Cubic => rho * rho * rho,
            DriverKind::SignedSquare => rho * rho,
            _ => grid_sharp_bound(self, rho, ctx, m, k),
        }
    }

    fn validate(&self, m: usize, k: usize) -> Result<()> {
        match self {
            DriverKind::SingularTanh {
                a_tilde,
                a,
                b,
                c_tilde,
                c,
                d,
            } => {
                if m != 1 || k != 1 {
                    return Err(Error::InvalidSpec(
                        "the singular tanh driver is one-dimensional (m = k = 1)".into(),
                    ));
                }
                let ok = *a_tilde > 0.0
                    && *c_tilde > 0.0
                    && (0.0..1.0).contains(b)
                    && (0.0..1.0).contains(d)
                    && *a > 0.0
                    && *a <= 1.0
                    && *c > -1.0
                    && *c <= 1.0;
                if !ok {
                    return Err(Error::InvalidSpec(format!(
                        "singular_tanh parameters out of range: {self}"
                    )));
                }
                Ok(())
            }
            DriverKind::Affine {
                slope,
                intercept,
                z_gain,
            } => {
                if ![slope, intercept, z_gain].iter().all(|x| x.is_finite()) {
                    return Err(Error::InvalidSpec(
                        "affine coefficients must be finite".into(),
                    ));
                }
                Ok(())
            }
            DriverKind::Shifted(inner, h) => {
                if !h.is_finite() {
                    return Err(Error::InvalidSpec("shift must be finite".into()));
                }
                inner.validate(m, k)
            }
            _ => Ok(()),
        }
    }
}

/// Grid density per unit length for sharp bounds without a closed form.
pub const SHARP_GRID_DENSITY: f64 = 1e3;

fn grid_sharp_bound(d: &DriverKind, rho: f64, ctx: Ctx<'_>, m: usize, k: usize) -> f64 {
    let mut out = vec![0.0; m];
    let mut best = 0.0f64;
    let n = ((2.0 * rho * SHARP_GRID_DENSITY).ceil() as usize).max(1);
    // m > 1: the same density along each coordinate axis and the diagonal
    let dirs: Vec<Vec<f64>> = if m == 1 {
        vec![vec![1.0]]
    } else {
        let mut v: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        v.push(vec![1.0 / (m as f64).sqrt(); m]);
        v
    };
    let mut y = vec![0.0; m];
    for dir in &dirs {
        for i in 0..=n {
            let s = -rho + 2.0 * rho * i as f64 / n as f64;
            for (yj, dj) in y.iter_mut().zip(dir) {
                *yj = s * dj;
            }
            d.eval(ctx, &y, None, k, &mut out);
            best = best.max(norm(&out));
        }
    }
    best
}

impl fmt::Display for DriverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriverKind::Zero => write!(f, "zero"),
            DriverKind::Affine {
                slope,
                intercept,
                z_gain,
            } => {
                if *intercept == 0.0 && *z_gain == 0.0 {
                    write!(f, "linear({})", -slope)
                } else if *slope == 0.0 && *z_gain == 0.0 {
                    write!(f, "constant({intercept})")
                } else {
                    write!(f, "affine({slope},{intercept},{z_gain})")
                }
            }
            DriverKind::Cubic => write!(f, "cubic"),
            DriverKind::SignedSquare => write!(f, "signedsquare"),
            DriverKind::SingularTanh {
                a_tilde,
                a,
                b,
                c_tilde,
                c,
                d,
            } => write!(f, "singular_tanh({a_tilde},{a},{b},{c_tilde},{c},{d})"),
            DriverKind::Shifted(inner, h) => write!(f, "shift({h},{inner})"),
            DriverKind::Custom(c) => write!(f, "custom:{}", c.name),
        }
    }
}

impl std::str::FromStr for DriverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("shift(") {
            let body = rest
                .strip_suffix(')')
                .ok_or_else(|| Error::InvalidSpec(format!("bad driver `{s}`")))?;
            let (h, inner) = body
                .split_once(',')
                .ok_or_else(|| Error::InvalidSpec(format!("bad driver `{s}`")))?;
            let h = crate::config::parse_f64(h)?;
            return Ok(DriverKind::Shifted(Box::new(inner.parse()?), h));
        }
        let (name, a) = crate::config::split_call(s)?;
        Ok(match (name.as_str(), a.len()) {
            ("zero", 0) => DriverKind::Zero,
            ("linear", 1) => DriverKind::linear(a[0]),
            ("constant", 1) => DriverKind::constant(a[0]),
            ("affine", 3) => DriverKind::Affine {
                slope: a[0],
                intercept: a[1],
                z_gain: a[2],
            },
            ("cubic", 0) => DriverKind::Cubic,
            ("signedsquare", 0) => DriverKind::SignedSquare,
            ("singular_tanh", 6) => DriverKind::SingularTanh {
                a_tilde: a[0],
                a: a[1],
                b: a[2],
                c_tilde: a[3],
                c: a[4],
                d: a[5],
            },
            _ => return Err(Error::InvalidSpec(format!("unknown driver `{s}`"))),
        })
    }
}

/// The pair `(F, G)` on `R^m` with `m x k` control matrices.
#[derive(Clone, Debug)]
pub struct GeneratorSpec {
    pub f: DriverKind,
    pub g: DriverKind,
    pub m: usize,
    pub k: usize,
}

impl GeneratorSpec {
    pub fn new(f: DriverKind, g: DriverKind, m: usize, k: usize) -> Result<Self> {
        if m == 0 || k == 0 {
            return Err(Error::InvalidSpec("dimensions must be positive".into()));
        }
        f.validate(m, k)?;
        g.validate(m, k)?;
        if g.depends_on_z() {
            return Err(Error::InvalidSpec(format!("G must not depend on z: {g}")));
        }
        Ok(Self { f, g, m, k })
    }

    pub fn zero(m: usize, k: usize) -> Self {
        Self {
            f: DriverKind::Zero,
            g: DriverKind::Zero,
            m,
            k,
        }
    }

    pub fn linear(rho: f64) -> Self {
        Self {
            f: DriverKind::linear(rho),
            g: DriverKind::Zero,
            m: 1,
            k: 1,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.f.is_zero() && self.g.is_zero()
    }

    pub fn eval_f(&self, ctx: Ctx<'_>, y: &[f64], z: Option<&[f64]>, out: &mut [f64]) {
        self.f.eval(ctx, y, z, self.k, out)
    }

    pub fn eval_g(&self, ctx: Ctx<'_>, y: &[f64], out: &mut [f64]) {
        self.g.eval(ctx, y, None, self.k, out)
    }

    pub fn mu(&self, ctx: Ctx<'_>) -> f64 {
        self.f.mu(ctx)
    }

    pub fn nu(&self, ctx: Ctx<'_>) -> f64 {
        self.g.mu(ctx)
    }

    pub fn ell(&self, ctx: Ctx<'_>) -> f64 {
        self.f.ell(ctx)
    }

    /// `(F_rho^#(t), G_rho^#(t))`.
    pub fn sharp_bound(&self, rho: f64, ctx: Ctx<'_>) -> (f64, f64) {
        (
            self.f.sharp_bound(rho, ctx, self.m, self.k),
            self.g.sharp_bound(rho, ctx, self.m, self.k),
        )
    }

    /// `1_h [alpha F + (1 - alpha) G]`.
    #[allow(clippy::too_many_arguments)]
    pub fn combined_h(
        &self,
        alpha: f64,
        in_horizon: bool,
        ctx: Ctx<'_>,
        y: &[f64],
        z: Option<&[f64]>,
        out: &mut [f64],
    ) {
        if !in_horizon {
            out.fill(0.0);
            return;
        }
        let mut g = vec![0.0; self.m];
        self.eval_f(ctx, y, z, out);
        if alpha < 1.0 {
            self.eval_g(ctx, y, &mut g);
        }
        for (o, gi) in out.iter_mut().zip(&g) {
            *o = if alpha < 1.0 {
                alpha * *o + (1.0 - alpha) * gi
            } else {
                *o
            };
        }
    }
}

impl fmt::Display for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F = {}, G = {}", self.f, self.g)
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `z / max(1, eps |z|)` with the Frobenius norm.
pub fn beta_trunc(z: &[f64], eps: f64) -> Vec<f64> {
    let s = (eps * norm(z)).max(1.0);
    z.iter().map(|v| v / s).collect()
}

/// Default node count of the mollifier quadrature.
pub const DEFAULT_NODES: usize = 64;
/// Default minimum accepted node count.
pub const DEFAULT_MIN_NODES: usize = 16;

#[derive(Clone, Debug)]
pub struct MollifierConfig {
    pub eps: f64,
    pub rule: Arc<BallRule>,
    pub kappa: f64,
}

impl MollifierConfig {
    pub fn new(eps: f64, m: usize, nodes: usize) -> Result<Self> {
        Self::with_min_nodes(eps, m, nodes, DEFAULT_MIN_NODES)
    }

    pub fn with_min_nodes(eps: f64, m: usize, nodes: usize, min_nodes: usize) -> Result<Self> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Domain(format!(
                "mollifier eps must be positive, got {eps}"
            )));
        }
        Ok(Self {
            eps,
            rule: Arc::new(BallRule::new(m, nodes, min_nodes)?),
            kappa: bump_kappa(m),
        })
    }

    /// Same nodes, different `eps`.
    pub fn with_eps(&self, eps: f64) -> Self {
        Self {
            eps,
            rule: Arc::clone(&self.rule),
            kappa: self.kappa,
        }
    }

    pub fn node_count(&self) -> usize {
        self.rule.len()
    }

    pub fn scheme(&self) -> Scheme {
        self.rule.scheme
    }

    /// `sum_j w_j F(t, y - eps u_j, beta_eps(z)) 1[eps |F(t, y - eps u_j, 0)| <= 1]`.
    pub fn mollify_f(
        &self,
        gen: &GeneratorSpec,
        ctx: Ctx<'_>,
        y: &[f64],
        z: Option<&[f64]>,
        out: &mut [f64],
    ) {
        let zb = z.map(|z| beta_trunc(z, self.eps));
        let zb = zb.as_deref().filter(|z| z.iter().any(|v| *v != 0.0));
        self.integrate(y, out, |yy, f0, fz| {
            gen.eval_f(ctx, yy, None, f0);
            if let Some(zb) = zb {
                gen.eval_f(ctx, yy, Some(zb), fz);
                true
            } else {
                false
            }
        })
    }

    /// `sum_j w_j G(t, y - eps u_j) 1[eps |G(t, y - eps u_j)| <= 1]`.
    pub fn mollify_g(&self, gen: &GeneratorSpec, ctx: Ctx<'_>, y: &[f64], out: &mut [f64]) {
        self.integrate(y, out, |yy, f0, _| {
            gen.eval_g(ctx, yy, f0);
            false
        })
    }

    fn integrate<E>(&self, y: &[f64], out: &mut [f64], mut eval: E)
    where
        E: FnMut(&[f64], &mut [f64], &mut [f64]) -> bool,
    {
        let m = y.len();
        let mut yy = vec![0.0; m];
        let mut f0 = vec![0.0; m];
        let mut fz = vec![0.0; m];
        out.fill(0.0);
        for j in 0..self.rule.len() {
            let u = self.rule.node(j);
            for i in 0..m {
                yy[i] = y[i] - self.eps * u[i];
            }
            let with_z = eval(&yy, &mut f0, &mut fz);
            if self.eps * norm(&f0) > 1.0 {
                continue;
            }
            let w = self.rule.weights[j];
            let src = if with_z { &fz } else { &f0 };
            for i in 0..m {
                out[i] += w * src[i];
            }
        }
    }

    /// True when the truncation indicator is active at every node for `y`.
    pub fn untruncated_f(&self, gen: &GeneratorSpec, ctx: Ctx<'_>, y: &[f64]) -> bool {
        let mut yy = vec![0.0; y.len()];
        let mut f0 = vec![0.0; y.len()];
        (0..self.rule.len()).all(|j| {
            let u = self.rule.node(j);
            for i in 0..y.len() {
                yy[i] = y[i] - self.eps * u[i];
            }
            gen.eval_f(ctx, &yy, None, &mut f0);
            self.eps * norm(&f0) <= 1.0
        })
    }

    /// As [`Self::untruncated_f`] for `G`.
    pub fn untruncated_g(&self, gen: &GeneratorSpec, ctx: Ctx<'_>, y: &[f64]) -> bool {
        let mut yy = vec![0.0; y.len()];
        let mut g = vec![0.0; y.len()];
        (0..self.rule.len()).all(|j| {
            let u = self.rule.node(j);
            for i in 0..y.len() {
                yy[i] = y[i] - self.eps * u[i];
            }
            gen.eval_g(ctx, &yy, &mut g);
            self.eps * norm(&g) <= 1.0
        })
    }

    /// Indicator pattern over the nodes for `F(., y - eps u, 0)`.
    pub fn truncation_pattern_f(&self, gen: &GeneratorSpec, ctx: Ctx<'_>, y: &[f64]) -> Vec<bool> {
        let mut yy = vec![0.0; y.len()];
        let mut f0 = vec![0.0; y.len()];
        (0..self.rule.len())
            .map(|j| {
                let u = self.rule.node(j);
                for i in 0..y.len() {
                    yy[i] = y[i] - self.eps * u[i];
                }
                gen.eval_f(ctx, &yy, None, &mut f0);
                self.eps * norm(&f0) <= 1.0
            })
            .collect()
    }
}

/// One sample point of the compatibility check.
#[derive(Clone, Debug)]
pub struct CompatSample {
    pub t: f64,
    pub b: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionResult {
    pub condition: &'static str,
    pub pass: bool,
    pub worst_violation: f64,
    /// `(sample index, eps)` of the worst violation.
    pub worst_at: Option<(usize, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompatReport {
    pub conditions: [ConditionResult; 3],
}

impl CompatReport {
    pub fn pass(&self) -> bool {
        self.conditions.iter().all(|c| c.pass)
    }
}

/// Checks the three compatibility conditions between the obstacles and the
/// drivers on every `(eps, sample)` pair.
pub fn check_compatibility(
    phi: &ConvexSpec,
    psi: &ConvexSpec,
    gen: &GeneratorSpec,
    samples: &[CompatSample],
    eps_list: &[f64],
) -> Result<CompatReport> {
    if samples.is_empty() {
        return Err(Error::Domain("compatibility check needs samples".into()));
    }
    let names = [
        "(i) <grad phi, grad psi> >= 0",
        "(ii) <grad phi, G> <= |grad psi||G|",
        "(iii) <grad psi, F> <= |grad phi||F|",
    ];
    let mut worst = [(0.0f64, None); 3];
    let m = gen.m;
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; m];
    for &eps in eps_list {
        for (si, s) in samples.iter().enumerate() {
            let gp = phi.grad(&s.y, eps)?;
            let gs = psi.grad(&s.y, eps)?;
            let ctx = Ctx::new(s.t, &s.b);
            gen.eval_f(ctx, &s.y, Some(&s.z), &mut f);
            gen.eval_g(ctx, &s.y, &mut g);
            let v = [
                -dot(&gp, &gs),
                dot(&gp, &g) - norm(&gs) * norm(&g),
                dot(&gs, &f) - norm(&gp) * norm(&f),
            ];
            for c in 0..3 {
                if v[c] > worst[c].0 {
                    worst[c] = (v[c], Some((si, eps)));
                }
            }
        }
    }
    let mk = |c: usize| ConditionResult {
        condition: names[c],
        pass: worst[c].0 <= 1e-12,
        worst_violation: worst[c].0,
        worst_at: worst[c].1,
    };
    Ok(CompatReport {
        conditions: [mk(0), mk(1), mk(2)],
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
