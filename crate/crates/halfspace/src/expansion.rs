//! Builds the hierarchy order by order (Euler, correctors, viscous layers,
//! kinetic layers), assembles the truncated expansion on a physical grid
//! and evaluates its kinetic residual.
//!
//! The slip value and the Robin data of the viscous layer are obtained
//! from the solvability conditions of the kinetic layer datum on the
//! velocity lattice ("probes"): the datum is affine in the unknown wall
//! traces, so a handful of evaluations give the discrete boundary
//! relations exactly.

use nalgebra::{Matrix3, Vector3};

use crate::collision::{CollisionModel, LinearizedOperator};
use crate::error::{Error, Result};
use crate::knudsen::{boundary_data, check_solvability, Diffuse};
use crate::prandtl::{micro_layer_part, LayerMicroInputs};
use crate::velocity::{conserved_perturbation, MaxwellianJet, MaxwellianParams, Profile, VelocityGrid};

/// Lattice, collision model and wall operators at one time.
pub struct WallContext<'a> {
    pub g: &'a VelocityGrid,
    pub model: &'a CollisionModel,
    pub jet: &'a MaxwellianJet,
    pub l0: &'a LinearizedOperator,
    pub diffuse: Diffuse,
}

impl WallContext<'_> {
    pub fn p0(&self) -> &MaxwellianParams {
        &self.jet.params
    }

    pub fn sqrt_m(&self) -> &[f64] {
        &self.l0.basis.sqrt_m
    }

    /// `dM[dm] / sqrt(M0)`
    fn hydro(&self, dm: &[f64; 5]) -> Profile {
        let f = self.jet.first(self.g, dm);
        f.iter().zip(self.sqrt_m()).map(|(a, s)| a / s).collect()
    }

    fn normal_velocity(&self, u3: f64) -> [f64; 5] {
        conserved_perturbation(self.p0(), 0.0, [0.0, 0.0, u3], 0.0)
    }
}

/// Conserved perturbation of the viscous layer at constant pressure:
/// `rho^b = -rho0 theta^b / (3 T0)`, `T^b = theta^b / 3`, `u^b_3 = 0`.
pub fn layer_moments(p0: &MaxwellianParams, ub: [f64; 2], theta: f64) -> [f64; 5] {
    conserved_perturbation(
        p0,
        -p0.rho * theta / (3.0 * p0.t),
        [ub[0], ub[1], 0.0],
        theta / 3.0,
    )
}

/// Order-1 kinetic layer datum for an interior trace `m1` (conserved
/// perturbation of `F_1` at the wall).
pub fn order1_datum(ctx: &WallContext, m1: &[f64; 5]) -> Profile {
    let h = ctx.hydro(m1);
    boundary_data(&h, ctx.sqrt_m(), ctx.sqrt_m(), ctx.g, ctx.diffuse)
}

/// Slip value from the mass condition of the order-1 datum.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SlipProbe {
    pub u13: f64,
    /// Solvability residuals of the datum at that slip.
    pub residual: [f64; 4],
    /// `|datum|` on the lattice.
    pub datum_norm: f64,
}

/// `m1_tangential` is the wall trace of `F_1` without its normal velocity.
pub fn probe_slip(ctx: &WallContext, m1_tangential: &[f64; 5]) -> Result<SlipProbe> {
    let p0 = ctx.p0();
    let sm = ctx.sqrt_m();
    let at = |u: f64| -> [f64; 5] {
        let n = ctx.normal_velocity(u);
        std::array::from_fn(|i| m1_tangential[i] + n[i])
    };
    let r0 = check_solvability(&order1_datum(ctx, &at(0.0)), p0, sm, ctx.g);
    let r1 = check_solvability(&order1_datum(ctx, &at(1.0)), p0, sm, ctx.g);
    let slope = r1[0] - r0[0];
    if slope.abs() < 1e-14 {
        return Err(Error::Inconsistent("mass condition does not depend on the slip".into()));
    }
    let u13 = -r0[0] / slope;
    let datum = order1_datum(ctx, &at(u13));
    Ok(SlipProbe {
        u13,
        residual: check_solvability(&datum, p0, sm, ctx.g),
        datum_norm: ctx.g.norm(&datum),
    })
}

/// Wall traces entering the order-2 datum that do not depend on the
/// viscous layer.
pub struct Order2Traces<'a> {
    /// Conserved perturbation of `F_1` at the wall, slip included.
    pub m1: [f64; 5],
    /// `(I - P)(F_2 / sqrt(M))` at the wall.
    pub micro2: &'a [f64],
    /// `f^bb_1` at the wall; `None` when the order-1 kinetic layer vanishes.
    pub fbb1: Option<&'a [f64]>,
}

/// Discrete Robin relations `w' = R w + s` for `w = (u^b_11, u^b_12,
/// theta^b_1)` at the wall, and the total normal velocity of order 2 as an
/// affine function of the layer traces.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RobinProbe {
    pub r: [[f64; 3]; 3],
    pub s: [f64; 3],
    /// `u_{2,3} + u^b_{2,3}` at the wall `= c . (w, w') + d`.
    pub u2_coeffs: [f64; 6],
    pub u2_const: f64,
    /// Largest relative departure from an affine response.
    pub nonlinearity: f64,
}

impl RobinProbe {
    /// Off-diagonal size of `R` relative to its diagonal.
    pub fn coupling(&self) -> f64 {
        let diag = (0..3).map(|i| self.r[i][i].abs()).fold(0.0, f64::max);
        let mut off: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    off = off.max(self.r[i][j].abs());
                }
            }
        }
        off / diag.max(1e-300)
    }

    pub fn u2_total(&self, x: &[f64; 6]) -> f64 {
        self.u2_const + (0..6).map(|j| self.u2_coeffs[j] * x[j]).sum::<f64>()
    }
}

/// Order-2 datum for unknowns `x = (u^b_11, u^b_12, theta^b_1, their
/// zeta-derivatives, u_{2,3} total)` at the wall.
pub fn order2_datum(ctx: &WallContext, tr: &Order2Traces, x: &[f64; 7]) -> Result<Profile> {
    let g = ctx.g;
    let p0 = ctx.p0();
    let mb0 = layer_moments(p0, [x[0], x[1]], x[2]);
    let dmb = layer_moments(p0, [x[3], x[4]], x[5]);
    let dz = 1e-3;
    let zeta = [0.0, dz, 2.0 * dz];
    let mb: Vec<[f64; 5]> = zeta
        .iter()
        .map(|z| std::array::from_fn(|c| mb0[c] + z * dmb[c]))
        .collect();
    let inp = LayerMicroInputs {
        jet: ctx.jet,
        zeta: &zeta,
        mb: &mb,
        m1_wall: tr.m1,
        m_taylor: [0.0; 5],
    };
    let micro_b = micro_layer_part(2, &inp, g, ctx.model, ctx.l0)?;
    let normal = ctx.hydro(&ctx.normal_velocity(x[6]));
    let h2: Profile = (0..g.len())
        .map(|q| tr.micro2[q] + normal[q] + micro_b.values[0][q])
        .collect();
    let f1 = ctx.hydro(&tr.m1);
    let fb = ctx.hydro(&mb0);
    let h1: Profile = (0..g.len())
        .map(|q| f1[q] + fb[q] + tr.fbb1.map_or(0.0, |f| f[q]))
        .collect();
    Ok(boundary_data(&h2, &h1, ctx.sqrt_m(), g, ctx.diffuse))
}

/// Solve the four order-2 solvability conditions for the Robin relations.
pub fn probe_robin(ctx: &WallContext, tr: &Order2Traces) -> Result<RobinProbe> {
    let p0 = ctx.p0();
    let sm = ctx.sqrt_m();
    let resid = |x: &[f64; 7]| -> Result<[f64; 4]> {
        Ok(check_solvability(&order2_datum(ctx, tr, x)?, p0, sm, ctx.g))
    };
    let r0 = resid(&[0.0; 7])?;
    let mut a = [[0.0; 7]; 4];
    let mut curv = [[0.0f64; 7]; 4];
    for j in 0..7 {
        let mut e = [0.0; 7];
        e[j] = 1.0;
        let rp = resid(&e)?;
        e[j] = -1.0;
        let rm = resid(&e)?;
        for i in 0..4 {
            a[i][j] = 0.5 * (rp[i] - rm[i]);
            curv[i][j] = (0.5 * (rp[i] + rm[i]) - r0[i]).abs();
        }
    }
    let mut nonlin: f64 = 0.0;
    for i in 0..4 {
        let scale = a[i].iter().fold(r0[i].abs(), |m, x| m.max(x.abs())).max(1e-300);
        nonlin = nonlin.max(curv[i].iter().fold(0.0, |m: f64, x| m.max(*x)) / scale);
    }
    if a[0][6].abs() < 1e-14 {
        return Err(Error::Inconsistent("mass condition does not involve the normal velocity".into()));
    }
    // eliminate the normal velocity with the mass condition
    let u2_coeffs: [f64; 6] = std::array::from_fn(|j| -a[0][j] / a[0][6]);
    let u2_const = -r0[0] / a[0][6];
    let red = |i: usize, j: usize| a[i][j] - a[i][6] * a[0][j] / a[0][6];
    let b = Matrix3::from_fn(|i, j| red(i + 1, j + 3));
    let aw = Matrix3::from_fn(|i, j| red(i + 1, j));
    let c = Vector3::from_fn(|i, _| r0[i + 1] - a[i + 1][6] * r0[0] / a[0][6]);
    let binv = b.try_inverse().ok_or_else(|| {
        Error::Inconsistent("layer derivatives do not enter the solvability conditions".into())
    })?;
    let r = -binv * aw;
    let s = -binv * c;
    Ok(RobinProbe {
        r: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
        s: std::array::from_fn(|i| s[i]),
        u2_coeffs,
        u2_const,
        nonlinearity: nonlin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::assemble_linearized;
    use crate::fluid::{microscopic_part, FluidState};
    use crate::prandtl::robin_coefficients;
    use crate::velocity::build_grid;

    fn wall(n: usize, vmax: f64) -> (VelocityGrid, CollisionModel, MaxwellianJet, LinearizedOperator) {
        let g = build_grid(n, vmax).unwrap();
        let model = CollisionModel::bgk(1.0);
        let p0 = MaxwellianParams::rest(1.0, 1.0);
        let jet = MaxwellianJet::new(&p0, &g).unwrap();
        let l0 = assemble_linearized(&p0, &g, &model).unwrap();
        (g, model, jet, l0)
    }

    #[test]
    fn probes_at_rest() {
        let (g, model, jet, l0) = wall(12, 6.0);
        let state = FluidState::from_fn(200, 1.0, |x| {
            let t = 1.0 + 0.2 * (1.0 - (-x / 0.3).exp());
            (1.0 / t, [0.3 * (x / 0.2).tanh(), 0.0, 0.0], t)
        });
        let micro = microscopic_part(2, &state, None, &g, &model, &|p| assemble_linearized(p, &g, &model)).unwrap();
        for diffuse in [Diffuse::Verbatim, Diffuse::Normalized] {
            let ctx = WallContext { g: &g, model: &model, jet: &jet, l0: &l0, diffuse };
            let slip = probe_slip(&ctx, &[0.0; 5]).unwrap();
            assert!(slip.residual[0].abs() < 1e-12);
            let tr = Order2Traces { m1: ctx.normal_velocity(slip.u13), micro2: &micro.values[0], fbb1: None };
            let rp = probe_robin(&ctx, &tr).unwrap();
            assert!((0..3).all(|i| rp.r[i][i] > 0.0), "{rp:?}");
            assert!(rp.coupling() < 1e-10);
            assert!(rp.nonlinearity < 1e-8);
            // the wall shear 1.5 enters the tangential relation unchanged
            assert!((rp.s[0] + 1.5).abs() < 1e-6 && rp.s[1].abs() < 1e-12);
            if diffuse == Diffuse::Normalized {
                // the flux-normalized operator maps an even trace to zero
                assert_eq!(slip.u13, 0.0);
                assert_eq!(slip.datum_norm, 0.0);
                assert!((rp.s[2] + 2.0).abs() < 1e-6);
                assert!(rp.u2_const.abs() < 1e-12);
            }
        }
        let (mu, kappa) = crate::collision::transport_coefficients(&l0, &g).unwrap();
        let (ru, _) = robin_coefficients(&jet.params, mu, kappa).unwrap();
        assert!((ru - 3.0).abs() < 1e-6);
    }
}
