use mvbsde::config::RunConfig;
use mvbsde::convex::{implicit_penalty_step, ConvexKind, ConvexSpec};
use mvbsde::Exec;
use proptest::prelude::*;

fn spec(k: u8, p: f64) -> ConvexSpec {
    let kind = match k % 4 {
        0 => ConvexKind::IndicatorInterval { lo: -p, hi: p },
        1 => ConvexKind::Quadratic { scale: p },
        2 => ConvexKind::AbsPower { exponent: 1.5 },
        _ => ConvexKind::MaxZero,
    };
    ConvexSpec::new(kind, 1).unwrap()
}

proptest! {
    // v + h (a grad phi + b grad psi)(v) = x, and the step is monotone in x
    #[test]
    fn implicit_step_solves_and_is_monotone(
        kp in 0u8..4, ks in 0u8..4, p in 0.2..3.0f64,
        a in 0.0..2.0f64, b in 0.0..2.0f64, h in 1e-3..0.5f64, eps in 1e-3..1.0f64,
        x in -5.0..5.0f64, dx in 0.0..2.0f64,
    ) {
        let (phi, psi) = (spec(kp, p), spec(ks, p));
        let mut v = [0.0];
        let mut w = [0.0];
        implicit_penalty_step(&phi, &psi, a, b, h, eps, &[x], &mut v);
        implicit_penalty_step(&phi, &psi, a, b, h, eps, &[x + dx], &mut w);
        let g = |s: &ConvexSpec, y: f64| s.grad(&[y], eps).unwrap()[0];
        let back = v[0] + h * (a * g(&phi, v[0]) + b * g(&psi, v[0]));
        prop_assert!((back - x).abs() <= 1e-9 * (1.0 + x.abs() + h * (a + b) / eps));
        prop_assert!(w[0] >= v[0] - 1e-12);
        prop_assert!(w[0] - v[0] <= dx + 1e-9);
    }

    #[test]
    fn chunked_sum_matches_sequential(xs in prop::collection::vec(-1e6..1e6f64, 0..5000)) {
        let s = Exec::Sequential.sum(xs.len(), |i| xs[i]);
        let p = Exec::Parallel.sum(xs.len(), |i| xs[i]);
        prop_assert_eq!(s.to_bits(), p.to_bits());
    }

    #[test]
    fn config_echo_reparses(steps in 1usize..500, paths in 1usize..100000, seed in any::<u32>()) {
        let text = format!("[numerics]\nsteps = {steps}\npaths = {paths}\nseed = {seed}\n");
        let cfg = RunConfig::parse(&text).unwrap();
        let again = RunConfig::parse(&cfg.echo_text()).unwrap();
        prop_assert_eq!(cfg.echo_text(), again.echo_text());
    }
}
