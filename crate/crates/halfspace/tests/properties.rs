//! Property tests of the invariants that hold for any admissible input.

use proptest::prelude::*;

use halfspace::collision::{bgk_collision, CollisionModel};
use halfspace::direct::{apply_maxwell_bc, stretched_grid, WallModel};
use halfspace::knudsen::Diffuse;
use halfspace::numerics::loglog_fit;
use halfspace::velocity::{build_grid, maxwellian, moments, raw_moments, MaxwellianParams, VelocityGrid};

fn grid() -> VelocityGrid {
    build_grid(8, 5.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Corrected Maxwellians carry their parameters exactly.
    #[test]
    fn corrected_maxwellian_moments(rho in 0.3f64..3.0, u1 in -0.5f64..0.5, u3 in -0.5f64..0.5, t in 0.5f64..1.5) {
        let g = grid();
        let p = MaxwellianParams::new(rho, [u1, 0.0, u3], t);
        let m = maxwellian(&p, &g, true).unwrap();
        let (_, back) = moments(&m, &g).unwrap();
        prop_assert!((back.rho - rho).abs() < 1e-10 * rho);
        prop_assert!((back.u[0] - u1).abs() < 1e-10 && (back.u[2] - u3).abs() < 1e-10);
        prop_assert!((back.t - t).abs() < 1e-10 * t);
    }

    /// The relaxation operator conserves mass, momentum and energy.
    #[test]
    fn bgk_conserves(a in -0.3f64..0.3, b in -0.1f64..0.1, c in -0.2f64..0.2, t in 0.6f64..1.4) {
        let g = grid();
        let m = maxwellian(&MaxwellianParams::rest(1.0, t), &g, true).unwrap();
        let f: Vec<f64> = m
            .iter()
            .zip(&g.nodes)
            .map(|(x, v)| x * (1.0 + a * v[0] * v[2] + b * v[1].powi(3) + c * v[2]))
            .collect();
        let q = bgk_collision(&f, &g, &CollisionModel::bgk(1.0)).unwrap();
        let scale = q.iter().fold(0.0f64, |s, x| s.max(x.abs())).max(1e-300);
        for x in raw_moments(&q, &g).as_array() {
            prop_assert!(x.abs() <= 1e-12 * scale.max(1.0));
        }
    }

    /// Full diffusion with the flux-normalized operator leaves no net mass flux.
    #[test]
    fn normalized_wall_is_impermeable(rho in 0.5f64..2.0, t in 0.6f64..1.6, tw in 0.6f64..1.6, alpha in 0.0f64..1.0, tilt in -0.3f64..0.3) {
        let g = grid();
        let wall = WallModel::new(MaxwellianParams::rest(1.0, tw), alpha, Diffuse::Normalized, &g).unwrap();
        let mut f = maxwellian(&MaxwellianParams::new(rho, [tilt, 0.0, -0.2], t), &g, true).unwrap();
        apply_maxwell_bc(&mut f, &wall, &g);
        let flux: f64 = (0..g.len()).map(|q| g.weights[q] * g.nodes[q][2] * f[q]).sum();
        let out: f64 = (0..g.len())
            .filter(|&q| g.nodes[q][2] < 0.0)
            .map(|q| g.weights[q] * g.nodes[q][2].abs() * f[q])
            .sum();
        prop_assert!(flux.abs() <= 1e-12 * out);
    }

    /// Specular reflection of an even trace is the identity.
    #[test]
    fn specular_identity(rho in 0.5f64..2.0, t in 0.6f64..1.6, u1 in -0.4f64..0.4) {
        let g = grid();
        let wall = WallModel::new(MaxwellianParams::rest(1.0, 1.0), 0.0, Diffuse::Verbatim, &g).unwrap();
        let m = maxwellian(&MaxwellianParams::new(rho, [u1, 0.0, 0.0], t), &g, true).unwrap();
        let mut f = m.clone();
        apply_maxwell_bc(&mut f, &wall, &g);
        for (x, y) in f.iter().zip(&m) {
            prop_assert!((x - y).abs() <= 1e-14 * y.abs().max(1e-300));
        }
    }

    /// Stretched grids start at zero, end at `xmax`, grow geometrically.
    #[test]
    fn stretched_grid_shape(cells in 40usize..300, h0 in 1e-4f64..2e-3) {
        match stretched_grid(1.0, cells, h0, 1.1) {
            Ok(x) => {
                prop_assert_eq!(x.len(), cells + 1);
                prop_assert_eq!(x[0], 0.0);
                prop_assert!((x[cells] - 1.0).abs() < 1e-12);
                prop_assert!((x[1] - h0).abs() < 1e-15);
                for w in x.windows(2) {
                    prop_assert!(w[1] > w[0]);
                }
            }
            Err(e) => prop_assert!(e.is_config()),
        }
    }

    /// Exact power laws are recovered with zero standard error.
    #[test]
    fn loglog_recovers_power(c in 0.01f64..10.0, p in -2.0f64..2.0) {
        let x = [0.04, 0.02, 0.01, 0.005];
        let y: Vec<f64> = x.iter().map(|e: &f64| c * e.powf(p)).collect();
        let f = loglog_fit(&x, &y).unwrap();
        prop_assert!((f.slope - p).abs() < 1e-10);
        prop_assert!(f.slope_stderr < 1e-8);
    }
}
