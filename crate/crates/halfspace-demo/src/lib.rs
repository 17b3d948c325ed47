//! Three small computations exposed to the browser. Each returns JSON so the
//! page needs no bindings beyond strings.

use halfspace::collision::{assemble_linearized, transport_coefficients, CollisionModel, LinearizedOperator};
use halfspace::direct::{apply_maxwell_bc, WallModel};
use halfspace::knudsen::{solvable_part, solve_halfspace, Diffuse, KnudsenProblem};
use halfspace::prandtl::{lift_profile, robin_coefficients};
use halfspace::velocity::{build_grid, maxwellian, moments, MaxwellianParams, Profile, VelocityGrid};
use halfspace::Error;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Velocity lattice used by every demo computation.
const N_VEL: usize = 8;
const V_MAX: f64 = 5.0;

fn lattice() -> Result<VelocityGrid, Error> {
    build_grid(N_VEL, V_MAX)
}

fn bgk_operator(p: &MaxwellianParams, g: &VelocityGrid) -> Result<LinearizedOperator, Error> {
    assemble_linearized(p, g, &CollisionModel::bgk(1.0))
}

#[derive(Debug, Serialize)]
pub struct LayerProfiles {
    pub zeta: Vec<f64>,
    pub velocity: Vec<f64>,
    pub temperature: Vec<f64>,
    pub r_u: f64,
    pub r_theta: f64,
    pub mu: f64,
    pub kappa: f64,
}

/// Robin lifts of the viscous layer for a wall at rest with density `rho`,
/// temperature `t` and Robin data `s_u`, `s_theta`.
pub fn layer_profiles(rho: f64, t: f64, s_u: f64, s_theta: f64, nz: usize) -> Result<LayerProfiles, Error> {
    if nz < 3 {
        return Err(Error::Grid(format!("nz = {nz}")));
    }
    let g = lattice()?;
    let p = MaxwellianParams::rest(rho, t);
    let (mu, kappa) = transport_coefficients(&bgk_operator(&p, &g)?, &g)?;
    let (r_u, r_theta) = robin_coefficients(&p, mu, kappa)?;
    let zeta: Vec<f64> = (0..=nz).map(|i| 4.0 * i as f64 / nz as f64).collect();
    Ok(LayerProfiles {
        velocity: lift_profile(r_u, s_u, &zeta)?,
        temperature: lift_profile(r_theta, s_theta, &zeta)?,
        zeta,
        r_u,
        r_theta,
        mu,
        kappa,
    })
}

#[derive(Debug, Serialize)]
pub struct LayerDecay {
    pub xi: Vec<f64>,
    pub norms: Vec<f64>,
    pub rate: f64,
    pub far_ratio: f64,
}

/// Kinetic layer driven by the solvable part of a polynomial wall datum
/// `a + b v1 + c v3^2` on incoming velocities.
pub fn knudsen_decay(a: f64, b: f64, c: f64, ximax: f64) -> Result<LayerDecay, Error> {
    let g = lattice()?;
    let l0 = bgk_operator(&MaxwellianParams::rest(1.0, 1.0), &g)?;
    let sm = &l0.basis.sqrt_m;
    let raw: Profile = (0..g.len())
        .map(|q| {
            let v = &g.nodes[q];
            if v[2] < 0.0 {
                (a + b * v[0] + c * v[2] * v[2]) * sm[q]
            } else {
                0.0
            }
        })
        .collect();
    let bc = solvable_part(&raw, &l0, &g)?;
    let prob = KnudsenProblem {
        l0: &l0,
        ximax,
        nxi: (ximax / 0.1).round().max(10.0) as usize,
        source: Vec::new(),
        bc,
        tol: 1e-6,
    };
    let s = solve_halfspace(&prob, &g)?;
    Ok(LayerDecay { xi: s.xi, norms: s.norms, rate: s.rate, far_ratio: s.far_ratio })
}

#[derive(Debug, Serialize)]
pub struct WallReflection {
    pub rho: f64,
    pub u: [f64; 3],
    pub t: f64,
    pub mass_flux: f64,
}

/// Apply the Maxwell condition to a drifting Maxwellian hitting the wall.
pub fn maxwell_wall(alpha: f64, t_wall: f64, rho: f64, t: f64, u1: f64, u3: f64, normalized: bool) -> Result<WallReflection, Error> {
    let g = lattice()?;
    let diffuse = if normalized { Diffuse::Normalized } else { Diffuse::Verbatim };
    let wall = WallModel::new(MaxwellianParams::rest(1.0, t_wall), alpha, diffuse, &g)?;
    let mut f = maxwellian(&MaxwellianParams::new(rho, [u1, 0.0, u3], t), &g, true)?;
    apply_maxwell_bc(&mut f, &wall, &g);
    let mass_flux = (0..g.len()).map(|q| g.weights[q] * g.nodes[q][2] * f[q]).sum();
    let (_, p) = moments(&f, &g)?;
    Ok(WallReflection { rho: p.rho, u: p.u, t: p.t, mass_flux })
}

fn to_js<T: Serialize>(r: Result<T, Error>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
        .and_then(|v| serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())))
}

#[wasm_bindgen(js_name = layerProfiles)]
pub fn layer_profiles_js(rho: f64, t: f64, s_u: f64, s_theta: f64, nz: usize) -> Result<String, JsValue> {
    to_js(layer_profiles(rho, t, s_u, s_theta, nz))
}

#[wasm_bindgen(js_name = knudsenDecay)]
pub fn knudsen_decay_js(a: f64, b: f64, c: f64, ximax: f64) -> Result<String, JsValue> {
    to_js(knudsen_decay(a, b, c, ximax))
}

#[wasm_bindgen(js_name = maxwellWall)]
pub fn maxwell_wall_js(alpha: f64, t_wall: f64, rho: f64, t: f64, u1: f64, u3: f64, normalized: bool) -> Result<String, JsValue> {
    to_js(maxwell_wall(alpha, t_wall, rho, t, u1, u3, normalized))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_lift_meets_robin_condition() {
        let l = layer_profiles(1.0, 1.0, -1.5, -2.0, 200).unwrap();
        assert!((l.r_u - 3.0).abs() < 1e-6);
        let h = l.zeta[1];
        let d = (l.velocity[1] - l.velocity[0]) / h;
        assert!((d - l.r_u * l.velocity[0] + 1.5).abs() < 0.05);
        assert!(l.temperature.last().unwrap().abs() < 1e-12);
    }

    #[test]
    fn kinetic_layer_decays() {
        let d = knudsen_decay(0.3, 1.0, -0.2, 12.0).unwrap();
        assert!(d.rate > 0.0);
        assert!(d.norms.last().unwrap() < &d.norms[0]);
    }

    #[test]
    fn normalized_wall_is_impermeable() {
        let w = maxwell_wall(1.0, 1.2, 1.0, 1.0, 0.2, -0.3, true).unwrap();
        assert!(w.mass_flux.abs() < 1e-12);
        let s = maxwell_wall(0.0, 1.2, 1.0, 1.0, 0.2, 0.0, false).unwrap();
        assert!(s.mass_flux.abs() < 1e-12 && (s.u[0] - 0.2).abs() < 1e-10);
    }
}
