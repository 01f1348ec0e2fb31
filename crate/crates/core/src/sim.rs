//! Brownian ensembles, the clock `Q = t + A`, weight processes, martingale
//! representation pairs and exponential smoothing.

use std::fmt;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::generator::{Ctx, GeneratorSpec};
use crate::regression::Design;

/// Default cap on `paths * steps * brownian_dim`.
pub const DEFAULT_MAX_CELLS: usize = 200_000_000;

/// Integrand of an integral clock `A_t = int_0^t scale * g(B_s) ds`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum ClockFn {
    Abs,
    Square,
    Positive,
    Constant,
}

impl ClockFn {
    fn eval(self, b: f64) -> f64 {
        match self {
            ClockFn::Abs => b.abs(),
            ClockFn::Square => b * b,
            ClockFn::Positive => b.max(0.0),
            ClockFn::Constant => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub enum Clock {
    #[default]
    None,
    /// `A_t = c t`.
    Linear(f64),
    /// `A_t = int_0^t scale * g(B^1_s) ds`, left-point on the grid.
    Integral { g: ClockFn, scale: f64 },
}

impl fmt::Display for Clock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Clock::None => write!(f, "none"),
            Clock::Linear(c) => write!(f, "linear({c})"),
            Clock::Integral { g, scale } => {
                let name = match g {
                    ClockFn::Abs => "abs",
                    ClockFn::Square => "square",
                    ClockFn::Positive => "positive",
                    ClockFn::Constant => "constant",
                };
                write!(f, "integral({name},{scale})")
            }
        }
    }
}

impl std::str::FromStr for Clock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = crate::config::split_call_raw(s)?;
        let clock = match (name.as_str(), args.len()) {
            ("none", 0) => Clock::None,
            ("linear", 1) => Clock::Linear(crate::config::parse_f64(&args[0])?),
            ("integral", 2) => {
                let g = match args[0].as_str() {
                    "abs" => ClockFn::Abs,
                    "square" => ClockFn::Square,
                    "positive" => ClockFn::Positive,
                    "constant" => ClockFn::Constant,
                    other => {
                        return Err(Error::InvalidSpec(format!(
                            "unknown clock integrand `{other}`"
                        )))
                    }
                };
                Clock::Integral {
                    g,
                    scale: crate::config::parse_f64(&args[1])?,
                }
            }
            _ => return Err(Error::InvalidSpec(format!("unknown clock `{s}`"))),
        };
        Ok(clock)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub brownian_dim: usize,
    pub state_dim: usize,
    pub seed: u64,
    pub clock: Clock,
    /// Random horizon: first grid node where `B^1` leaves `(lo, hi)`.
    pub exit: Option<(f64, f64)>,
    pub max_cells: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 100,
            paths: 10_000,
            brownian_dim: 1,
            state_dim: 1,
            seed: 1,
            clock: Clock::None,
            exit: None,
            max_cells: DEFAULT_MAX_CELLS,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.steps == 0 || self.paths == 0 || self.brownian_dim == 0 || self.state_dim == 0 {
            return Err(Error::InvalidSpec(
                "steps, paths and dimensions must be positive".into(),
            ));
        }
        match self.clock {
            Clock::Linear(c) if !(c.is_finite() && c >= 0.0) => {
                return Err(Error::InvalidSpec(format!(
                    "linear clock rate must be >= 0, got {c}"
                )))
            }
            Clock::Integral { scale, .. } if !(scale.is_finite() && scale >= 0.0) => {
                return Err(Error::InvalidSpec(format!(
                    "clock scale must be >= 0, got {scale}"
                )))
            }
            _ => {}
        }
        if let Some((lo, hi)) = self.exit {
            if !(lo < 0.0 && 0.0 < hi) {
                return Err(Error::InvalidSpec(format!(
                    "exit interval ({lo}, {hi}) must contain 0"
                )));
            }
        }
        let cells = self
            .paths
            .checked_mul(self.steps)
            .and_then(|c| c.checked_mul(self.brownian_dim));
        match cells {
            Some(c) if c <= self.max_cells => Ok(()),
            _ => Err(Error::ResourceLimit(format!(
                "{} paths x {} steps x {} Brownian components exceeds the cap of {} cells",
                self.paths, self.steps, self.brownian_dim, self.max_cells
            ))),
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }
}

/// Simulated driving data on a uniform grid, stored path-major.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub cfg: GridConfig,
    pub dt: f64,
    /// `(K + 1) x k` per path.
    pub b: Vec<f64>,
    /// `K x k` per path.
    pub db: Vec<f64>,
    /// `K + 1` per path.
    pub a: Vec<f64>,
    pub q: Vec<f64>,
    /// Weight processes, zero until [`PathEnsemble::compute_weights`].
    pub v: Vec<f64>,
    pub vplus: Vec<f64>,
    /// First grid index at or beyond the random horizon (`K` without one).
    pub exit_step: Vec<usize>,
}

impl PathEnsemble {
    pub fn paths(&self) -> usize {
        self.cfg.paths
    }

    pub fn steps(&self) -> usize {
        self.cfg.steps
    }

    pub fn k(&self) -> usize {
        self.cfg.brownian_dim
    }

    pub fn m(&self) -> usize {
        self.cfg.state_dim
    }

    pub fn t(&self, i: usize) -> f64 {
        if i == self.steps() {
            self.cfg.horizon
        } else {
            i as f64 * self.dt
        }
    }

    fn node(&self, p: usize, i: usize) -> usize {
        p * (self.steps() + 1) + i
    }

    pub fn b_at(&self, p: usize, i: usize) -> &[f64] {
        let k = self.k();
        let n = self.node(p, i);
        &self.b[n * k..(n + 1) * k]
    }

    pub fn db_at(&self, p: usize, i: usize) -> &[f64] {
        let k = self.k();
        let n = p * self.steps() + i;
        &self.db[n * k..(n + 1) * k]
    }

    pub fn a_at(&self, p: usize, i: usize) -> f64 {
        self.a[self.node(p, i)]
    }

    pub fn q_at(&self, p: usize, i: usize) -> f64 {
        self.q[self.node(p, i)]
    }

    pub fn da(&self, p: usize, i: usize) -> f64 {
        self.a_at(p, i + 1) - self.a_at(p, i)
    }

    pub fn dq(&self, p: usize, i: usize) -> f64 {
        self.q_at(p, i + 1) - self.q_at(p, i)
    }

    /// `dt / dQ_i`.
    pub fn alpha(&self, p: usize, i: usize) -> f64 {
        self.dt / self.dq(p, i)
    }

    pub fn v_at(&self, p: usize, i: usize) -> f64 {
        self.v[self.node(p, i)]
    }

    pub fn vplus_at(&self, p: usize, i: usize) -> f64 {
        self.vplus[self.node(p, i)]
    }

    /// `t_i < tau`: the interval `[t_i, t_{i+1})` lies inside the horizon.
    pub fn in_horizon(&self, p: usize, i: usize) -> bool {
        i < self.exit_step[p]
    }

    pub fn has_exit(&self) -> bool {
        self.cfg.exit.is_some()
    }

    pub fn ctx(&self, p: usize, i: usize) -> Ctx<'_> {
        Ctx::new(self.t(i), self.b_at(p, i))
    }

    /// Regression state at step `i`: `B`, plus `A` for path-dependent clocks.
    pub fn features(&self, i: usize) -> (Vec<f64>, usize) {
        let k = self.k();
        let with_a = matches!(self.cfg.clock, Clock::Integral { .. }) && i > 0;
        let d = k + usize::from(with_a);
        let mut x = Vec::with_capacity(self.paths() * d);
        for p in 0..self.paths() {
            x.extend_from_slice(self.b_at(p, i));
            if with_a {
                x.push(self.a_at(p, i));
            }
        }
        (x, d)
    }

    /// Sub-grid keeping every `factor`-th node of the same Brownian paths.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps().is_multiple_of(factor) {
            return Err(Error::InvalidSpec(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps()
            )));
        }
        let mut cfg = self.cfg.clone();
        cfg.steps /= factor;
        let (n, k, kc) = (self.paths(), self.k(), cfg.steps);
        let mut b = Vec::with_capacity(n * (kc + 1) * k);
        let mut db = Vec::with_capacity(n * kc * k);
        for p in 0..n {
            for i in 0..=kc {
                b.extend_from_slice(self.b_at(p, i * factor));
            }
            for i in 0..kc {
                for j in 0..k {
                    db.push(self.b_at(p, (i + 1) * factor)[j] - self.b_at(p, i * factor)[j]);
                }
            }
        }
        let mut out = Self::assemble(cfg, b, db);
        if matches!(self.cfg.clock, Clock::Integral { .. }) {
            // keep the fine clock so both grids see the same A
            for p in 0..n {
                for i in 0..=kc {
                    let nc = out.node(p, i);
                    out.a[nc] = self.a_at(p, i * factor);
                    out.q[nc] = out.t(i) + out.a[nc];
                }
            }
        }
        Ok(out)
    }

    fn assemble(cfg: GridConfig, b: Vec<f64>, db: Vec<f64>) -> Self {
        let (n, steps, k) = (cfg.paths, cfg.steps, cfg.brownian_dim);
        let dt = cfg.dt();
        let mut a = vec![0.0; n * (steps + 1)];
        let mut q = vec![0.0; n * (steps + 1)];
        let mut exit_step = vec![steps; n];
        for p in 0..n {
            let base = p * (steps + 1);
            for i in 0..steps {
                let b0 = b[(base + i) * k];
                let da = match cfg.clock {
                    Clock::None => 0.0,
                    Clock::Linear(c) => c * dt,
                    Clock::Integral { g, scale } => scale * g.eval(b0) * dt,
                };
                a[base + i + 1] = a[base + i] + da;
            }
            for i in 0..=steps {
                let t = if i == steps {
                    cfg.horizon
                } else {
                    i as f64 * dt
                };
                q[base + i] = t + a[base + i];
            }
            if let Some((lo, hi)) = cfg.exit {
                if let Some(i) = (1..=steps).find(|&i| {
                    let x = b[(base + i) * k];
                    x <= lo || x >= hi
                }) {
                    exit_step[p] = i;
                }
            }
        }
        Self {
            dt,
            v: vec![0.0; n * (steps + 1)],
            vplus: vec![0.0; n * (steps + 1)],
            b,
            db,
            a,
            q,
            exit_step,
            cfg,
        }
    }

    /// `V` and `V^+` for the given drivers (left-endpoint sums gated by the horizon).
    pub fn compute_weights(&mut self, gen: &GeneratorSpec, p_exp: f64, lambda: f64) -> Result<()> {
        if !(p_exp > 1.0) || !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::Domain(format!(
                "weights need p > 1 and 0 < lambda < 1, got p = {p_exp}, lambda = {lambda}"
            )));
        }
        let np = n_p(p_exp);
        let steps = self.steps();
        let mut v = vec![0.0; self.v.len()];
        let mut vp = vec![0.0; self.v.len()];
        let this = &*self;
        let rows: Vec<(Vec<f64>, Vec<f64>)> = Exec::Parallel.map(self.paths(), |p| {
            let mut rv = vec![0.0; steps + 1];
            let mut rp = vec![0.0; steps + 1];
            for i in 0..steps {
                let (dv, dvp) = if this.in_horizon(p, i) {
                    let ctx = this.ctx(p, i);
                    let ell = gen.ell(ctx);
                    let dt_part = gen.mu(ctx) + ell * ell / (2.0 * np * lambda);
                    let nu = gen.nu(ctx);
                    let da = this.da(p, i);
                    (
                        dt_part * this.dt + nu * da,
                        dt_part.max(0.0) * this.dt + nu.max(0.0) * da,
                    )
                } else {
                    (0.0, 0.0)
                };
                rv[i + 1] = rv[i] + dv;
                rp[i + 1] = rp[i] + dvp;
            }
            (rv, rp)
        });
        for (p, (rv, rp)) in rows.into_iter().enumerate() {
            let base = p * (steps + 1);
            v[base..base + steps + 1].copy_from_slice(&rv);
            vp[base..base + steps + 1].copy_from_slice(&rp);
        }
        self.v = v;
        self.vplus = vp;
        Ok(())
    }

    /// Columnar CSV: `path,step,t,B,A,Q,V,Vplus` (first Brownian component).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "path,step,t,B,A,Q,V,Vplus")?;
        for p in 0..self.paths() {
            for i in 0..=self.steps() {
                writeln!(
                    w,
                    "{p},{i},{},{},{},{},{},{}",
                    self.t(i),
                    self.b_at(p, i)[0],
                    self.a_at(p, i),
                    self.q_at(p, i),
                    self.v_at(p, i),
                    self.vplus_at(p, i)
                )?;
            }
        }
        Ok(())
    }
}

/// `n_p = min(p - 1, 1)`.
pub fn n_p(p: f64) -> f64 {
    (p - 1.0).min(1.0)
}

/// Simulates `N` paths; path `p` draws from its own ChaCha stream so the
/// result does not depend on how paths are scheduled.
pub fn simulate(cfg: &GridConfig, exec: Exec) -> Result<PathEnsemble> {
    cfg.validate()?;
    let (steps, k) = (cfg.steps, cfg.brownian_dim);
    let sdt = cfg.dt().sqrt();
    let per_path: Vec<Vec<f64>> = exec.map(cfg.paths, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(p as u64);
        (0..steps * k)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x * sdt
            })
            .collect()
    });
    let mut b = Vec::with_capacity(cfg.paths * (steps + 1) * k);
    let mut db = Vec::with_capacity(cfg.paths * steps * k);
    for inc in per_path {
        let mut cur = vec![0.0; k];
        b.extend_from_slice(&cur);
        for i in 0..steps {
            for j in 0..k {
                cur[j] += inc[i * k + j];
            }
            b.extend_from_slice(&cur);
        }
        db.extend(inc);
    }
    Ok(PathEnsemble::assemble(cfg.clone(), b, db))
}

/// Terminal functional `eta`, evaluated on `B` at the exit node (or `T`).
/// Component `j` of `eta` reads Brownian component `j mod k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum TerminalKind {
    Constant(f64),
    Brownian,
    BrownianSquared,
    /// `B` clamped to `[lo, hi]`.
    Clamped {
        lo: f64,
        hi: f64,
    },
    /// `max(B - strike, 0)`.
    Call {
        strike: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Terminal {
    pub kind: TerminalKind,
    pub shift: f64,
}

impl Terminal {
    pub fn new(kind: TerminalKind) -> Self {
        Self { kind, shift: 0.0 }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(TerminalKind::Constant(c))
    }

    pub fn shifted(self, h: f64) -> Self {
        Self {
            shift: self.shift + h,
            ..self
        }
    }

    pub fn eval(&self, b: &[f64], out: &mut [f64]) {
        let k = b.len();
        for (j, o) in out.iter_mut().enumerate() {
            let x = b[j % k];
            *o = self.shift
                + match self.kind {
                    TerminalKind::Constant(c) => c,
                    TerminalKind::Brownian => x,
                    TerminalKind::BrownianSquared => x * x,
                    TerminalKind::Clamped { lo, hi } => x.clamp(lo, hi),
                    TerminalKind::Call { strike } => (x - strike).max(0.0),
                };
        }
    }

    /// `eta` per path, `N x m`.
    pub fn sample(&self, ens: &PathEnsemble) -> Vec<f64> {
        let m = ens.m();
        let mut out = vec![0.0; ens.paths() * m];
        for p in 0..ens.paths() {
            self.eval(ens.b_at(p, ens.exit_step[p]), &mut out[p * m..(p + 1) * m]);
        }
        out
    }
}

impl fmt::Display for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TerminalKind::Constant(c) => write!(f, "constant({})", c + self.shift)?,
            TerminalKind::Brownian => write!(f, "brownian")?,
            TerminalKind::BrownianSquared => write!(f, "brownian_sq")?,
            TerminalKind::Clamped { lo, hi } => write!(f, "clamped({lo},{hi})")?,
            TerminalKind::Call { strike } => write!(f, "call({strike})")?,
        }
        if self.shift != 0.0 && !matches!(self.kind, TerminalKind::Constant(_)) {
            write!(f, "+{}", self.shift)?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Terminal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (body, shift) = match s.rsplit_once(")+").map(|(a, b)| (format!("{a})"), b)) {
            Some((a, b)) => (a, crate::config::parse_f64(b)?),
            None => match s.split_once('+') {
                Some((a, b)) if !a.contains('(') => (a.to_string(), crate::config::parse_f64(b)?),
                _ => (s.to_string(), 0.0),
            },
        };
        let (name, a) = crate::config::split_call(&body)?;
        let kind = match (name.as_str(), a.len()) {
            ("constant", 1) => TerminalKind::Constant(a[0]),
            ("brownian", 0) => TerminalKind::Brownian,
            ("brownian_sq", 0) => TerminalKind::BrownianSquared,
            ("clamped", 2) => TerminalKind::Clamped { lo: a[0], hi: a[1] },
            ("call", 1) => TerminalKind::Call { strike: a[0] },
            _ => return Err(Error::InvalidSpec(format!("unknown terminal `{s}`"))),
        };
        Ok(Terminal { kind, shift })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PairMethod {
    ClosedForm,
    Regression,
}

/// `xi_i = E_i eta` and `zeta` with `xi = eta - int zeta dB`.
#[derive(Clone, Debug)]
pub struct MartingalePair {
    /// `N x (K + 1) x m`.
    pub xi: Vec<f64>,
    /// `N x K x (m k)`.
    pub zeta: Vec<f64>,
    pub method: PairMethod,
    pub m: usize,
    pub k: usize,
    pub steps: usize,
}

impl MartingalePair {
    pub fn xi_at(&self, p: usize, i: usize) -> &[f64] {
        let o = (p * (self.steps + 1) + i) * self.m;
        &self.xi[o..o + self.m]
    }

    pub fn zeta_at(&self, p: usize, i: usize) -> &[f64] {
        let w = self.m * self.k;
        let o = (p * self.steps + i) * w;
        &self.zeta[o..o + w]
    }
}

/// Closed forms exist for constants, `B_T` and (fixed horizon) `B_T^2`;
/// everything else is estimated by regression.
pub fn martingale_pair(
    eta: &Terminal,
    ens: &PathEnsemble,
    method: PairMethod,
    degree: usize,
    exec: Exec,
) -> Result<MartingalePair> {
    let (n, steps, m, k) = (ens.paths(), ens.steps(), ens.m(), ens.k());
    let closed = match eta.kind {
        TerminalKind::Constant(_) | TerminalKind::Brownian => true,
        TerminalKind::BrownianSquared => !ens.has_exit(),
        _ => false,
    };
    let mut xi = vec![0.0; n * (steps + 1) * m];
    let mut zeta = vec![0.0; n * steps * m * k];
    if method == PairMethod::ClosedForm && closed {
        for p in 0..n {
            let ex = ens.exit_step[p];
            for i in 0..=steps {
                let ii = i.min(ex);
                let b = ens.b_at(p, ii);
                let o = (p * (steps + 1) + i) * m;
                for j in 0..m {
                    let x = b[j % k];
                    xi[o + j] = eta.shift
                        + match eta.kind {
                            TerminalKind::Constant(c) => c,
                            TerminalKind::Brownian => x,
                            _ => x * x + ens.cfg.horizon - ens.t(ii),
                        };
                    if i < steps && i < ex {
                        let zo = (p * steps + i) * m * k + j * k + j % k;
                        zeta[zo] = match eta.kind {
                            TerminalKind::Constant(_) => 0.0,
                            TerminalKind::Brownian => 1.0,
                            _ => 2.0 * x,
                        };
                    }
                }
            }
        }
        return Ok(MartingalePair {
            xi,
            zeta,
            method: PairMethod::ClosedForm,
            m,
            k,
            steps,
        });
    }
    let target = eta.sample(ens);
    for p in 0..n {
        let o = (p * (steps + 1) + steps) * m;
        xi[o..o + m].copy_from_slice(&target[p * m..(p + 1) * m]);
    }
    for i in (0..steps).rev() {
        let alive: Vec<bool> = (0..n).map(|p| ens.in_horizon(p, i)).collect();
        if !alive.iter().any(|&a| a) {
            for p in 0..n {
                let o = (p * (steps + 1) + i) * m;
                xi[o..o + m].copy_from_slice(&target[p * m..(p + 1) * m]);
            }
            continue;
        }
        let (x, d) = ens.features(i);
        let design = Design::new(exec, &x, d, degree, Some(&alive), i)?;
        let fit = design.fit_predict(exec, &target, m);
        let mut inc = vec![0.0; n * m * k];
        for p in 0..n {
            let o = (p * (steps + 1) + i) * m;
            if alive[p] {
                xi[o..o + m].copy_from_slice(&fit[p * m..(p + 1) * m]);
            } else {
                xi[o..o + m].copy_from_slice(&target[p * m..(p + 1) * m]);
            }
        }
        for p in 0..n {
            if !alive[p] {
                continue;
            }
            let db = ens.db_at(p, i);
            let o1 = (p * (steps + 1) + i + 1) * m;
            let o0 = (p * (steps + 1) + i) * m;
            for a in 0..m {
                let dxi = xi[o1 + a] - xi[o0 + a];
                for c in 0..k {
                    inc[(p * m + a) * k + c] = dxi * db[c] / ens.dt;
                }
            }
        }
        let zfit = design.fit_predict(exec, &inc, m * k);
        for p in 0..n {
            if alive[p] {
                let zo = (p * steps + i) * m * k;
                zeta[zo..zo + m * k].copy_from_slice(&zfit[p * m * k..(p + 1) * m * k]);
            }
        }
    }
    Ok(MartingalePair {
        xi,
        zeta,
        method: PairMethod::Regression,
        m,
        k,
        steps,
    })
}

/// Output of [`exp_smooth`].
#[derive(Clone, Debug)]
pub struct Smoothed {
    pub eps: f64,
    /// Kernel average `U^eps`, `N x (K + 1) x m`.
    pub u_eps: Vec<f64>,
    /// `M^eps = E_t U^eps` by regression.
    pub m_eps: Vec<f64>,
    /// `Q_eps` per path.
    pub q_eps: Vec<f64>,
    pub warning: Option<String>,
}

/// Exponential smoothing `U^eps_t = (1/Q_eps) int_{t v eps}^inf e^{-(Q_r - Q_{t v eps})/Q_eps} U_r dQ_r`
/// with `U` piecewise linear in `Q` between nodes and `U_r = U_T` beyond `T`.
pub fn exp_smooth(
    u: &[f64],
    m: usize,
    ens: &PathEnsemble,
    eps: f64,
    degree: usize,
    exec: Exec,
) -> Result<Smoothed> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Domain(format!(
            "smoothing eps must be positive, got {eps}"
        )));
    }
    let (n, steps) = (ens.paths(), ens.steps());
    if u.len() != n * (steps + 1) * m {
        return Err(Error::DimensionMismatch {
            expected: n * (steps + 1) * m,
            got: u.len(),
        });
    }
    let warning = (eps < ens.dt).then(|| {
        format!(
            "eps = {eps} is below one grid step ({}); the kernel is under-resolved",
            ens.dt
        )
    });
    let horizon = ens.cfg.horizon;
    let rows: Vec<(Vec<f64>, f64)> = exec.map(n, |p| {
        let base = p * (steps + 1);
        let up = &u[base * m..(base + steps + 1) * m];
        // clock at time eps
        let (je, qe) = if eps >= horizon {
            (steps, ens.q_at(p, steps))
        } else {
            let f = eps / ens.dt;
            let j = (f.floor() as usize).min(steps - 1);
            let w = f - j as f64;
            (j, ens.q_at(p, j) + w * ens.dq(p, j))
        };
        let mut out = vec![0.0; (steps + 1) * m];
        // backward recursion I_i = seg_i + e^{-h_i} I_{i+1}
        for c in 0..m {
            out[steps * m + c] = up[steps * m + c];
        }
        for i in (0..steps).rev() {
            let h = ens.dq(p, i) / qe;
            let (e1, e2) = kernel_weights(h);
            for c in 0..m {
                let (u0, u1) = (up[i * m + c], up[(i + 1) * m + c]);
                out[i * m + c] = u0 * e1 + (u1 - u0) * e2 + (-h).exp() * out[(i + 1) * m + c];
            }
        }
        // t < eps uses the value started at eps
        if eps < horizon {
            let we = (qe - ens.q_at(p, je)) / ens.dq(p, je);
            let h = (ens.q_at(p, je + 1) - qe) / qe;
            let (e1, e2) = kernel_weights(h);
            for c in 0..m {
                let (ua, ub) = (up[je * m + c], up[(je + 1) * m + c]);
                let u0 = ua + we * (ub - ua);
                let start = u0 * e1 + (ub - u0) * e2 + (-h).exp() * out[(je + 1) * m + c];
                for i in 0..=steps {
                    if ens.t(i) < eps {
                        out[i * m + c] = start;
                    }
                }
            }
        } else {
            for i in 0..steps {
                for c in 0..m {
                    out[i * m + c] = up[steps * m + c];
                }
            }
        }
        (out, qe)
    });
    let mut u_eps = Vec::with_capacity(u.len());
    let mut q_eps = Vec::with_capacity(n);
    for (row, qe) in rows {
        u_eps.extend(row);
        q_eps.push(qe);
    }
    let m_eps = conditional_expectation(&u_eps, m, ens, degree, exec)?;
    Ok(Smoothed {
        eps,
        u_eps,
        m_eps,
        q_eps,
        warning,
    })
}

/// `int_0^h e^{-x} dx` and `int_0^h e^{-x} x/h dx`.
fn kernel_weights(h: f64) -> (f64, f64) {
    let e1 = -(-h).exp_m1();
    let e2 = if h < 1e-6 {
        h / 2.0 - h * h / 3.0
    } else {
        (e1 - h * (-h).exp()) / h
    };
    (e1, e2)
}

/// `E_i[X_i]` per node by regression on the step-`i` state (`N x (K + 1) x m`).
pub fn conditional_expectation(
    x: &[f64],
    m: usize,
    ens: &PathEnsemble,
    degree: usize,
    exec: Exec,
) -> Result<Vec<f64>> {
    let (n, steps) = (ens.paths(), ens.steps());
    let mut out = x.to_vec();
    for i in 0..=steps {
        let alive: Vec<bool> = (0..n).map(|p| i == steps || ens.in_horizon(p, i)).collect();
        if !alive.iter().any(|&a| a) {
            continue;
        }
        let (f, d) = ens.features(i);
        let design = Design::new(exec, &f, d, degree, Some(&alive), i)?;
        let tgt: Vec<f64> = (0..n)
            .flat_map(|p| {
                let o = (p * (steps + 1) + i) * m;
                x[o..o + m].to_vec()
            })
            .collect();
        let fit = design.fit_predict(exec, &tgt, m);
        for p in 0..n {
            if alive[p] {
                let o = (p * (steps + 1) + i) * m;
                out[o..o + m].copy_from_slice(&fit[p * m..(p + 1) * m]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::DriverKind;
    use approx::assert_abs_diff_eq;

    fn cfg(n: usize, k: usize) -> GridConfig {
        GridConfig {
            steps: k,
            paths: n,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn clock_examples() {
        let ens = simulate(&cfg(50, 20), Exec::Parallel).unwrap();
        for p in 0..50 {
            for i in 0..20 {
                assert_eq!(ens.a_at(p, i), 0.0);
                assert_abs_diff_eq!(ens.q_at(p, i), ens.t(i), epsilon = 1e-15);
                assert_abs_diff_eq!(ens.alpha(p, i), 1.0, epsilon = 1e-12);
            }
        }
        let mut c = cfg(20, 10);
        c.clock = Clock::Linear(1.0);
        let ens = simulate(&c, Exec::Parallel).unwrap();
        for i in 0..10 {
            assert_abs_diff_eq!(ens.q_at(3, i), 2.0 * ens.t(i), epsilon = 1e-14);
            assert_abs_diff_eq!(ens.alpha(3, i), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn clock_consistency_integral() {
        let mut c = cfg(100, 50);
        c.clock = Clock::Integral {
            g: ClockFn::Abs,
            scale: 2.0,
        };
        let ens = simulate(&c, Exec::Parallel).unwrap();
        for p in 0..100 {
            for i in 0..50 {
                let (al, dq) = (ens.alpha(p, i), ens.dq(p, i));
                assert!(dq > 0.0 && (0.0..=1.0).contains(&al));
                assert_abs_diff_eq!(al * dq, ens.dt, epsilon = 1e-15);
                assert_abs_diff_eq!((1.0 - al) * dq, ens.da(p, i), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn deterministic_across_policies() {
        let a = simulate(&cfg(300, 30), Exec::Parallel).unwrap();
        let b = simulate(&cfg(300, 30), Exec::Sequential).unwrap();
        assert_eq!(a.b, b.b);
        assert_eq!(a.q, b.q);
    }

    #[test]
    fn resource_cap() {
        let mut c = cfg(1000, 1000);
        c.max_cells = 10_000;
        assert!(matches!(
            simulate(&c, Exec::Parallel),
            Err(Error::ResourceLimit(_))
        ));
    }

    #[test]
    fn weight_examples() {
        let mut c = cfg(5, 20);
        c.horizon = 2.0;
        let mut ens = simulate(&c, Exec::Parallel).unwrap();
        ens.compute_weights(&GeneratorSpec::zero(1, 1), 2.0, 0.5)
            .unwrap();
        assert!(ens.v.iter().chain(&ens.vplus).all(|&x| x == 0.0));

        let up = GeneratorSpec::new(
            DriverKind::Affine {
                slope: 1.0,
                intercept: 0.0,
                z_gain: 0.0,
            },
            DriverKind::Zero,
            1,
            1,
        )
        .unwrap();
        ens.compute_weights(&up, 2.0, 0.5).unwrap();
        assert_abs_diff_eq!(ens.v_at(0, 20), 2.0, epsilon = 1e-12);
        let down = GeneratorSpec::linear(1.0);
        ens.compute_weights(&down, 2.0, 0.5).unwrap();
        assert_abs_diff_eq!(ens.v_at(0, 20), -2.0, epsilon = 1e-12);
        assert_eq!(ens.vplus_at(0, 20), 0.0);
    }

    #[test]
    fn closed_form_pairs() {
        let ens = simulate(&cfg(10, 10), Exec::Parallel).unwrap();
        let c = martingale_pair(
            &Terminal::constant(2.5),
            &ens,
            PairMethod::ClosedForm,
            3,
            Exec::Parallel,
        )
        .unwrap();
        assert!(c.xi.iter().all(|&x| x == 2.5) && c.zeta.iter().all(|&z| z == 0.0));
        let b = martingale_pair(
            &Terminal::new(TerminalKind::Brownian),
            &ens,
            PairMethod::ClosedForm,
            3,
            Exec::Parallel,
        )
        .unwrap();
        assert_eq!(b.xi_at(4, 7)[0], ens.b_at(4, 7)[0]);
        assert!(b.zeta.iter().all(|&z| z == 1.0));
        let s = martingale_pair(
            &Terminal::new(TerminalKind::BrownianSquared),
            &ens,
            PairMethod::ClosedForm,
            3,
            Exec::Parallel,
        )
        .unwrap();
        let x = ens.b_at(2, 3)[0];
        assert_abs_diff_eq!(s.xi_at(2, 3)[0], x * x + 1.0 - 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(s.zeta_at(2, 3)[0], 2.0 * x, epsilon = 1e-14);
        assert_eq!(s.xi_at(2, 10)[0], ens.b_at(2, 10)[0].powi(2));
    }

    #[test]
    fn regression_pair_is_a_martingale() {
        let ens = simulate(&cfg(20_000, 20), Exec::Parallel).unwrap();
        let eta = Terminal::new(TerminalKind::BrownianSquared);
        let pair = martingale_pair(&eta, &ens, PairMethod::Regression, 3, Exec::Parallel).unwrap();
        let n = ens.paths();
        for i in [0, 5, 19] {
            for pw in 0..3 {
                let vals: Vec<f64> = (0..n)
                    .map(|p| {
                        (pair.xi_at(p, i + 1)[0] - pair.xi_at(p, i)[0]) * ens.b_at(p, i)[0].powi(pw)
                    })
                    .collect();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
                assert!(
                    mean.abs() <= 3.0 * sd / (n as f64).sqrt() + 1e-12,
                    "i={i} pw={pw} mean={mean}"
                );
            }
        }
        // zeta close to 2B
        let err: f64 = (0..n)
            .map(|p| (pair.zeta_at(p, 10)[0] - 2.0 * ens.b_at(p, 10)[0]).abs())
            .sum::<f64>()
            / n as f64;
        assert!(err < 0.1, "zeta error {err}");
    }

    #[test]
    fn representation_residual_shrinks() {
        let eta = Terminal::new(TerminalKind::BrownianSquared);
        let mut res = Vec::new();
        for steps in [10, 40] {
            let ens = simulate(&cfg(4000, steps), Exec::Parallel).unwrap();
            let pair =
                martingale_pair(&eta, &ens, PairMethod::ClosedForm, 3, Exec::Parallel).unwrap();
            let ms: f64 = (0..ens.paths())
                .map(|p| {
                    let mut r = ens.b_at(p, steps)[0].powi(2) - pair.xi_at(p, 0)[0];
                    for i in 0..steps {
                        r -= pair.zeta_at(p, i)[0] * ens.db_at(p, i)[0];
                    }
                    r * r
                })
                .sum::<f64>()
                / ens.paths() as f64;
            res.push(ms);
        }
        assert!(res[1] < 0.5 * res[0], "{res:?}");
    }

    #[test]
    fn exit_pins_pair() {
        let mut c = cfg(500, 50);
        c.exit = Some((-0.3, 0.3));
        let ens = simulate(&c, Exec::Parallel).unwrap();
        let eta = Terminal::new(TerminalKind::Clamped { lo: -0.3, hi: 0.3 });
        let pair = martingale_pair(&eta, &ens, PairMethod::Regression, 2, Exec::Parallel).unwrap();
        let target = eta.sample(&ens);
        for p in 0..500 {
            for i in ens.exit_step[p]..=50 {
                assert_eq!(pair.xi_at(p, i)[0], target[p]);
                if i < 50 {
                    assert_eq!(pair.zeta_at(p, i)[0], 0.0);
                }
            }
        }
    }

    #[test]
    fn smoothing_constant_exact() {
        let mut c = cfg(50, 40);
        c.clock = Clock::Integral {
            g: ClockFn::Square,
            scale: 1.0,
        };
        let ens = simulate(&c, Exec::Parallel).unwrap();
        let u = vec![-1.75; 50 * 41];
        for eps in [0.2, 0.05, 0.01] {
            let s = exp_smooth(&u, 1, &ens, eps, 3, Exec::Parallel).unwrap();
            assert!(s.u_eps.iter().all(|v| (v + 1.75).abs() < 1e-12));
            assert!(s.m_eps.iter().all(|v| (v + 1.75).abs() < 1e-12));
            assert_eq!(s.warning.is_some(), eps < ens.dt);
        }
    }

    #[test]
    fn smoothing_contracts() {
        let ens = simulate(&cfg(200, 50), Exec::Parallel).unwrap();
        let s = exp_smooth(&ens.b, 1, &ens, 0.1, 3, Exec::Parallel).unwrap();
        for p in 0..200 {
            let sup_u = (0..=50)
                .map(|i| ens.b_at(p, i)[0].abs())
                .fold(0.0, f64::max);
            let sup_s = (0..=50)
                .map(|i| s.u_eps[p * 51 + i].abs())
                .fold(0.0, f64::max);
            assert!(sup_s <= sup_u + 1e-12);
        }
    }

    #[test]
    fn terminal_parse_roundtrip() {
        for s in [
            "constant(1)",
            "brownian",
            "brownian_sq",
            "clamped(-1,1)",
            "call(0.5)",
            "brownian_sq+0.1",
        ] {
            let t: Terminal = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
    }
}
