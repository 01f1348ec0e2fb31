//! Reference solutions: a recombining binomial tree with exact projection
//! and the closed-form linear equation.

use std::io::Write;

use crate::convex::{ConvexKind, ConvexSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::generator::{Ctx, GeneratorSpec};
use crate::sim::{PathEnsemble, Terminal, TerminalKind};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeConfig {
    pub steps: usize,
    pub horizon: f64,
}

impl TreeConfig {
    pub fn new(steps: usize, horizon: f64) -> Result<Self> {
        if steps == 0 || !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "tree needs steps >= 1 and T > 0, got {steps}, {horizon}"
            )));
        }
        Ok(Self { steps, horizon })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// State of node `j` at level `i`.
    pub fn node_b(&self, i: usize, j: usize) -> f64 {
        (2.0 * j as f64 - i as f64) * self.dt().sqrt()
    }
}

/// Per-level node arrays; level `i` holds `i + 1` nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeSolution {
    pub cfg: TreeConfig,
    pub y: Vec<Vec<f64>>,
    /// Levels `0..steps`.
    pub z: Vec<Vec<f64>>,
    /// Expected reflection still to come from the node, `E[K_T - K_t]`,
    /// with `K` counting the projection push (projected minus pre-projection).
    pub k: Vec<Vec<f64>>,
    /// Push applied at the node itself.
    pub push: Vec<Vec<f64>>,
}

impl TreeSolution {
    pub fn root_y(&self) -> f64 {
        self.y[0][0]
    }

    /// `E[K_T]`.
    pub fn root_k(&self) -> f64 {
        self.k[0][0]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "level,node,Y,Z,K")?;
        for (i, row) in self.y.iter().enumerate() {
            for (j, y) in row.iter().enumerate() {
                let z = self.z.get(i).map_or(0.0, |r| r[j]);
                writeln!(w, "{i},{j},{y:e},{z:e},{:e}", self.k[i][j])?;
            }
        }
        Ok(())
    }
}

/// Projection onto `[lo, hi]` for an interval indicator, identity otherwise.
pub fn project(phi: &ConvexSpec, y: f64) -> f64 {
    let (lo, hi) = phi.domain(0);
    y.clamp(lo, hi)
}

/// Reflected dynamic program
/// `Y = Pi(E + F(t, E, Z) dt)`, `Z = (Y_up - Y_down) / (2 sqrt(dt))`.
pub fn tree_solve(
    cfg: TreeConfig,
    gen: &GeneratorSpec,
    phi: &ConvexSpec,
    eta: &Terminal,
    exec: Exec,
) -> Result<TreeSolution> {
    if gen.m != 1 || gen.k != 1 || phi.dim() != 1 {
        return Err(Error::Unsupported("tree oracle is one-dimensional".into()));
    }
    if !matches!(
        phi.components()[0],
        ConvexKind::Zero | ConvexKind::IndicatorInterval { .. }
    ) {
        return Err(Error::Unsupported(format!(
            "tree oracle needs an interval indicator or zero, got {phi}"
        )));
    }
    let n = cfg.steps;
    let dt = cfg.dt();
    let sq = dt.sqrt();
    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n];
    let mut k = vec![Vec::new(); n + 1];
    let mut push = vec![Vec::new(); n + 1];
    y[n] = (0..=n)
        .map(|j| {
            let mut o = [0.0];
            eta.eval(&[cfg.node_b(n, j)], &mut o);
            o[0]
        })
        .collect();
    k[n] = vec![0.0; n + 1];
    push[n] = vec![0.0; n + 1];
    for i in (0..n).rev() {
        let t = i as f64 * dt;
        let next = &y[i + 1];
        let knext = &k[i + 1];
        let level: Vec<(f64, f64, f64, f64)> = exec.map(i + 1, |j| {
            let (yd, yu) = (next[j], next[j + 1]);
            let e = 0.5 * (yu + yd);
            let zz = (yu - yd) / (2.0 * sq);
            let b = [cfg.node_b(i, j)];
            let mut f = [0.0];
            gen.eval_f(Ctx::new(t, &b), &[e], Some(&[zz]), &mut f);
            let pre = e + f[0] * dt;
            let post = project(phi, pre);
            let pu = post - pre;
            (post, zz, pu, pu + 0.5 * (knext[j] + knext[j + 1]))
        });
        y[i] = level.iter().map(|v| v.0).collect();
        z[i] = level.iter().map(|v| v.1).collect();
        push[i] = level.iter().map(|v| v.2).collect();
        k[i] = level.iter().map(|v| v.3).collect();
    }
    Ok(TreeSolution { cfg, y, z, k, push })
}

/// `E_t[eta]` given `B_t = b` for catalog terminals with a closed form.
pub fn terminal_expectation(eta: &Terminal, b: f64, tau: f64) -> Result<f64> {
    let v = match eta.kind {
        TerminalKind::Constant(c) => c,
        TerminalKind::Brownian => b,
        TerminalKind::BrownianSquared => b * b + tau,
        other => {
            return Err(Error::Unsupported(format!(
                "no closed form for terminal {other:?}"
            )))
        }
    };
    Ok(v + eta.shift)
}

/// `Y_t = e^{-rho (T - t)} E_t[eta]` on an ensemble, `N x (K + 1) x m`.
pub fn linear_closed_form(rho: f64, eta: &Terminal, ens: &PathEnsemble) -> Result<Vec<f64>> {
    if ens.has_exit() {
        return Err(Error::Unsupported(
            "closed form needs a fixed horizon".into(),
        ));
    }
    let (n, steps, m, k) = (ens.paths(), ens.steps(), ens.m(), ens.k());
    let horizon = ens.t(steps);
    let mut out = vec![0.0; n * (steps + 1) * m];
    for p in 0..n {
        for i in 0..=steps {
            let tau = horizon - ens.t(i);
            let b = ens.b_at(p, i);
            for a in 0..m {
                out[(p * (steps + 1) + i) * m + a] =
                    (-rho * tau).exp() * terminal_expectation(eta, b[a % k], tau)?;
            }
        }
    }
    Ok(out)
}

/// Closed form at the tree nodes.
pub fn linear_closed_form_tree(rho: f64, eta: &Terminal, cfg: TreeConfig) -> Result<Vec<Vec<f64>>> {
    (0..=cfg.steps)
        .map(|i| {
            let tau = cfg.horizon - i as f64 * cfg.dt();
            (0..=i)
                .map(|j| Ok((-rho * tau).exp() * terminal_expectation(eta, cfg.node_b(i, j), tau)?))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::DriverKind;
    use crate::sim::{simulate, GridConfig};
    use approx::assert_abs_diff_eq;

    fn gen(f: DriverKind) -> GeneratorSpec {
        GeneratorSpec::new(f, DriverKind::Zero, 1, 1).unwrap()
    }

    #[test]
    fn martingale_root() {
        let cfg = TreeConfig::new(64, 1.0).unwrap();
        let s = tree_solve(
            cfg,
            &gen(DriverKind::Zero),
            &ConvexSpec::zero(1),
            &Terminal::new(TerminalKind::Brownian),
            Exec::Sequential,
        )
        .unwrap();
        assert_abs_diff_eq!(s.root_y(), 0.0, epsilon = 1e-12);
        assert!(s.z.iter().flatten().all(|z| (z - 1.0).abs() < 1e-12));
        assert_eq!(
            s.y.iter().map(Vec::len).collect::<Vec<_>>(),
            (1..=65).collect::<Vec<_>>()
        );
    }

    #[test]
    fn linear_limit() {
        let e = (-1.0f64).exp();
        let cfg = TreeConfig::new(512, 1.0).unwrap();
        let s = tree_solve(
            cfg,
            &gen(DriverKind::linear(1.0)),
            &ConvexSpec::zero(1),
            &Terminal::constant(1.0),
            Exec::Parallel,
        )
        .unwrap();
        assert_abs_diff_eq!(
            s.root_y(),
            (1.0 - 1.0 / 512.0f64).powi(512),
            epsilon = 1e-13
        );
        assert!((s.root_y() - e).abs() < 5e-3);
        // Richardson: error halves with the step
        let s2 = tree_solve(
            TreeConfig::new(1024, 1.0).unwrap(),
            &gen(DriverKind::linear(1.0)),
            &ConvexSpec::zero(1),
            &Terminal::constant(1.0),
            Exec::Parallel,
        )
        .unwrap();
        let r = (s.root_y() - e) / (s2.root_y() - e);
        assert!((r - 2.0).abs() < 0.05, "{r}");
    }

    #[test]
    fn reflected_downward_drift() {
        let cfg = TreeConfig::new(512, 1.0).unwrap();
        let phi = ConvexSpec::indicator(0.0, f64::INFINITY).unwrap();
        let s = tree_solve(
            cfg,
            &gen(DriverKind::constant(-1.0)),
            &phi,
            &Terminal::constant(0.0),
            Exec::Parallel,
        )
        .unwrap();
        assert_eq!(s.root_y(), 0.0);
        assert_abs_diff_eq!(s.root_k(), 1.0, epsilon = 1e-12);
        assert!(s.y.iter().flatten().all(|&y| y >= 0.0));
        assert!(s.push.iter().flatten().all(|&p| p >= 0.0));
    }

    #[test]
    fn lower_obstacle_pushes_up_and_projection_idempotent() {
        let cfg = TreeConfig::new(100, 1.0).unwrap();
        let phi = ConvexSpec::indicator(0.0, f64::INFINITY).unwrap();
        let s = tree_solve(
            cfg,
            &gen(DriverKind::constant(-0.3)),
            &phi,
            &Terminal::new(TerminalKind::Brownian),
            Exec::Parallel,
        )
        .unwrap();
        assert!(s.push.iter().flatten().all(|&p| p >= 0.0));
        assert!(s.root_y() > 0.0);
        for v in [-1.0, 0.0, 2.5] {
            let p = project(&phi, v);
            assert_eq!(project(&phi, p), p);
        }
    }

    #[test]
    fn deterministic_across_policies() {
        let cfg = TreeConfig::new(200, 1.0).unwrap();
        let phi = ConvexSpec::indicator(-0.5, 0.5).unwrap();
        let g = gen(DriverKind::Affine {
            slope: -0.5,
            intercept: 0.2,
            z_gain: 0.3,
        });
        let eta = Terminal::new(TerminalKind::Clamped { lo: -0.5, hi: 0.5 });
        let a = tree_solve(cfg, &g, &phi, &eta, Exec::Sequential).unwrap();
        let b = tree_solve(cfg, &g, &phi, &eta, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.y.iter().flatten().all(|&y| (-0.5..=0.5).contains(&y)));
    }

    #[test]
    fn rejects_unsupported() {
        let cfg = TreeConfig::new(10, 1.0).unwrap();
        let quad = ConvexSpec::new(ConvexKind::Quadratic { scale: 1.0 }, 1).unwrap();
        assert!(tree_solve(
            cfg,
            &gen(DriverKind::Zero),
            &quad,
            &Terminal::constant(0.0),
            Exec::Sequential
        )
        .is_err());
        assert!(TreeConfig::new(0, 1.0).is_err());
        assert!(
            terminal_expectation(&Terminal::new(TerminalKind::Call { strike: 0.0 }), 0.0, 1.0)
                .is_err()
        );
    }

    #[test]
    fn closed_form_examples() {
        let ens = simulate(
            &GridConfig {
                paths: 20,
                steps: 10,
                ..Default::default()
            },
            Exec::Sequential,
        )
        .unwrap();
        let c = linear_closed_form(0.0, &Terminal::constant(2.5), &ens).unwrap();
        assert!(c.iter().all(|&v| v == 2.5));
        let e = linear_closed_form(1.0, &Terminal::constant(1.0), &ens).unwrap();
        assert_abs_diff_eq!(e[0], 0.367879, epsilon = 1e-6);
        let b = linear_closed_form(1.0, &Terminal::new(TerminalKind::Brownian), &ens).unwrap();
        for p in 0..20 {
            assert_eq!(b[p * 11], 0.0);
            assert_abs_diff_eq!(
                b[p * 11 + 5],
                (-0.5f64).exp() * ens.b_at(p, 5)[0],
                epsilon = 1e-15
            );
        }
        let cfg = TreeConfig::new(8, 1.0).unwrap();
        let t = linear_closed_form_tree(1.0, &Terminal::new(TerminalKind::Brownian), cfg).unwrap();
        assert_eq!(t[0][0], 0.0);
        assert_abs_diff_eq!(t[8][8], 8.0 * (1.0f64 / 8.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn csv_layout() {
        let cfg = TreeConfig::new(2, 1.0).unwrap();
        let s = tree_solve(
            cfg,
            &gen(DriverKind::Zero),
            &ConvexSpec::zero(1),
            &Terminal::constant(1.0),
            Exec::Sequential,
        )
        .unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 1 + 2 + 3);
        assert!(text.starts_with("level,node,Y,Z,K\n0,0,"));
    }
}
