//! Direct solver for the scaled kinetic equation on the half line with
//! Maxwell reflection: Strang splitting of exact BGK relaxation and
//! semi-Lagrangian transport on a wall-refined grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_field;
use crate::collision::{CollisionKind, CollisionModel};
use crate::error::{Error, Result};
use crate::knudsen::Diffuse;
use crate::numerics::{cubic_weights, trapezoid};
use crate::velocity::{corrected_multipliers_from, maxwellian, moments, Multipliers, MaxwellianParams, Profile, VelocityGrid};

/// Wall Maxwellian and accommodation.
#[derive(Clone, Debug)]
pub struct WallModel {
    pub mw: MaxwellianParams,
    pub alpha: f64,
    pub diffuse: Diffuse,
    /// Corrected lattice Maxwellian of `mw`.
    pub profile: Profile,
    /// `int_{v3 > 0} v3 M_w dv` on the lattice.
    pub incoming_flux: f64,
}

impl WallModel {
    pub fn new(mw: MaxwellianParams, alpha: f64, diffuse: Diffuse, g: &VelocityGrid) -> Result<Self> {
        if mw.u[2] != 0.0 {
            return Err(Error::Params("the wall does not move: u_w3 must vanish".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Params(format!("accommodation {alpha}")));
        }
        let profile = maxwellian(&mw, g, true)?;
        let incoming_flux = (0..g.len())
            .filter(|&q| g.nodes[q][2] > 0.0)
            .map(|q| g.weights[q] * g.nodes[q][2] * profile[q])
            .sum();
        Ok(WallModel {
            mw,
            alpha,
            diffuse,
            profile,
            incoming_flux,
        })
    }
}

/// Fill the incoming half (`v3 > 0`) of a wall trace from its outgoing half:
/// `(1 - alpha) F(v1, v2, -v3) + alpha K F` with the diffuse part
/// `sqrt(2 pi) M_w int_{v3<0} |v3| F` or, normalized, the same outgoing
/// flux re-emitted with zero net mass flux.
pub fn apply_maxwell_bc(f: &mut [f64], wall: &WallModel, g: &VelocityGrid) {
    let out_flux: f64 = (0..g.len())
        .filter(|&q| g.nodes[q][2] < 0.0)
        .map(|q| g.weights[q] * (-g.nodes[q][2]) * f[q])
        .sum();
    let factor = match wall.diffuse {
        Diffuse::Verbatim => (2.0 * std::f64::consts::PI).sqrt() * out_flux,
        Diffuse::Normalized => out_flux / wall.incoming_flux,
    };
    for q in 0..g.len() {
        if g.nodes[q][2] > 0.0 {
            let r = g.mirror3(q);
            f[q] = (1.0 - wall.alpha) * f[r] + wall.alpha * factor * wall.profile[q];
        }
    }
}

/// Geometric grid on `[0, xmax]` with first cell `h0` and `cells` cells.
pub fn stretched_grid(xmax: f64, cells: usize, h0: f64, max_ratio: f64) -> Result<Vec<f64>> {
    if !(xmax > 0.0 && h0 > 0.0) || cells < 4 {
        return Err(Error::Grid(format!("xmax = {xmax}, cells = {cells}, h0 = {h0}")));
    }
    let n = cells as f64;
    let length = |r: f64| if (r - 1.0).abs() < 1e-14 { h0 * n } else { h0 * (r.powf(n) - 1.0) / (r - 1.0) };
    if length(1.0) > xmax {
        return Err(Error::Grid(format!("{cells} cells of width {h0} overshoot {xmax}")));
    }
    let (mut lo, mut hi) = (1.0, 2.0);
    while length(hi) < xmax {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if length(mid) < xmax {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = 0.5 * (lo + hi);
    if r > max_ratio {
        return Err(Error::Grid(format!(
            "stretching ratio {r:.4} above {max_ratio}; use more cells"
        )));
    }
    let mut x = Vec::with_capacity(cells + 1);
    let (mut xi, mut h) = (0.0, h0);
    for _ in 0..cells {
        x.push(xi);
        xi += h;
        h *= r;
    }
    x.push(xmax);
    Ok(x)
}

/// Run parameters.
#[derive(Clone, Debug)]
pub struct DirectSettings {
    pub eps: f64,
    pub model: CollisionModel,
    pub alpha: f64,
    pub diffuse: Diffuse,
    pub t_final: f64,
    /// `dt <= cfl min(dx) / max |v3|`
    pub cfl: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub dt: f64,
    pub steps: usize,
    /// `max |v3| dt / min dx`
    pub cfl: f64,
    /// `exp(-nu dt / eps)` at unit density.
    pub relaxation_factor: f64,
    /// Largest relative mismatch between the mass change and the boundary fluxes.
    pub mass_defect: f64,
    /// Nodes where negative density forced clipping.
    pub clipped: usize,
}

#[derive(Clone, Debug)]
pub struct KineticRun {
    pub eps: f64,
    pub x: Vec<f64>,
    pub times: Vec<f64>,
    pub snapshots: Vec<Vec<Profile>>,
    pub diag: Diagnostics,
}

struct Stepper<'a> {
    g: &'a VelocityGrid,
    x: &'a [f64],
    set: &'a DirectSettings,
    /// Per `v3` axis index and node: interpolation stencil of the foot.
    feet: Vec<Vec<Foot>>,
    axis_of: Vec<usize>,
    mult: Vec<Option<Multipliers>>,
}

#[derive(Clone, Copy)]
enum Foot {
    Interior([usize; 4], [f64; 4]),
    /// Constant extrapolation from the far node.
    Far,
    /// Characteristic leaves the wall at fraction `lambda` of the step.
    Wall(f64),
}

impl<'a> Stepper<'a> {
    fn new(g: &'a VelocityGrid, x: &'a [f64], set: &'a DirectSettings, dt: f64) -> Self {
        let nx = x.len();
        let xmax = x[nx - 1];
        let feet = g
            .axis
            .iter()
            .map(|&v3| {
                (0..nx)
                    .map(|i| {
                        let foot = x[i] - v3 * dt;
                        if foot > xmax {
                            Foot::Far
                        } else if foot < 0.0 {
                            Foot::Wall(1.0 - x[i] / (v3 * dt))
                        } else {
                            let (idx, w) = cubic_weights(x, foot);
                            Foot::Interior(idx, w)
                        }
                    })
                    .collect()
            })
            .collect();
        let n = g.n;
        let axis_of = (0..g.len()).map(|q| q % n).collect();
        Stepper {
            g,
            x,
            set,
            feet,
            axis_of,
            mult: vec![None; nx],
        }
    }

    fn collide(&mut self, f: &mut [Profile], tau: f64) -> Result<()> {
        let g = self.g;
        for (i, fi) in f.iter_mut().enumerate() {
            let (_, p) = moments(fi, g)?;
            let start = self.mult[i].unwrap_or_else(|| Multipliers::continuous(&p));
            let lam = match corrected_multipliers_from(&p, g, start) {
                Ok(l) => l,
                Err(_) => corrected_multipliers_from(&p, g, Multipliers::continuous(&p))?,
            };
            self.mult[i] = Some(lam);
            let m = lam.profile(g);
            let decay = (-self.set.model.bgk_nu_scale * p.rho * tau / self.set.eps).exp();
            for (a, b) in fi.iter_mut().zip(&m) {
                *a = b + (*a - b) * decay;
            }
        }
        Ok(())
    }

    fn wall_flux(&self, f0: &[f64]) -> f64 {
        (0..self.g.len()).map(|q| self.g.weights[q] * self.g.nodes[q][2] * f0[q]).sum()
    }

    fn mass(&self, f: &[Profile]) -> f64 {
        let rho: Vec<f64> = f.iter().map(|fi| self.g.integrate(fi)).collect();
        trapezoid(self.x, &rho)
    }

    /// Transport over one step; `g_old` is the incoming wall trace at the
    /// start of the step and is replaced by the one at the end.
    fn transport(&self, f: &[Profile], wall: &WallModel, g_old: &mut Profile) -> Vec<Profile> {
        let g = self.g;
        let nx = self.x.len();
        let mut out = vec![g.zeros(); nx];
        for q in 0..g.len() {
            if g.nodes[q][2] >= 0.0 {
                continue;
            }
            let feet = &self.feet[self.axis_of[q]];
            for i in 0..nx {
                out[i][q] = match feet[i] {
                    Foot::Interior(idx, w) => (0..4).map(|j| w[j] * f[idx[j]][q]).sum(),
                    Foot::Far => f[nx - 1][q],
                    Foot::Wall(_) => unreachable!("outgoing feet move away from the wall"),
                };
            }
        }
        let mut g_new = out[0].clone();
        apply_maxwell_bc(&mut g_new, wall, g);
        for q in 0..g.len() {
            if g.nodes[q][2] <= 0.0 {
                continue;
            }
            let feet = &self.feet[self.axis_of[q]];
            for i in 0..nx {
                out[i][q] = match feet[i] {
                    Foot::Interior(idx, w) => (0..4)
                        .map(|j| {
                            let k = idx[j];
                            // the wall node carries the incoming trace at time t
                            if k == 0 {
                                w[j] * g_old[q]
                            } else {
                                w[j] * f[k][q]
                            }
                        })
                        .sum(),
                    Foot::Wall(l) => (1.0 - l) * g_old[q] + l * g_new[q],
                    Foot::Far => f[nx - 1][q],
                };
            }
        }
        *g_old = g_new;
        out
    }

    fn clip(&self, f: &mut [Profile], diag: &mut Diagnostics, t: f64) -> Result<()> {
        let before = self.mass(f);
        let mut changed = false;
        for fi in f.iter_mut() {
            if self.g.integrate(fi) <= 0.0 {
                for v in fi.iter_mut() {
                    *v = v.max(0.0);
                }
                diag.clipped += 1;
                changed = true;
            }
        }
        if changed {
            let defect = (self.mass(f) - before).abs() / before.abs().max(1e-300);
            if defect > 1e-6 {
                return Err(Error::BlowUp { t });
            }
        }
        Ok(())
    }
}

/// Integrate from `init` to `t_final`, saving at `save_times` (rounded to
/// the step grid). `wall_at(t)` gives the wall Maxwellian.
pub fn run_direct(
    set: &DirectSettings,
    g: &VelocityGrid,
    x: &[f64],
    init: Vec<Profile>,
    wall_at: &dyn Fn(f64) -> Result<MaxwellianParams>,
    save_times: &[f64],
) -> Result<KineticRun> {
    if set.model.kind != CollisionKind::Bgk {
        return Err(Error::CostGuard("the direct solver relaxes toward the BGK target only".into()));
    }
    if !(set.eps > 0.0 && set.t_final > 0.0 && set.cfl > 0.0 && set.cfl <= 1.0) {
        return Err(Error::Params(format!("eps = {}, t_final = {}, cfl = {}", set.eps, set.t_final, set.cfl)));
    }
    if init.len() != x.len() || x.len() < 5 {
        return Err(Error::Grid("initial datum does not match the spatial grid".into()));
    }
    let min_dx = x.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let vmax = g.axis.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dt0 = set.cfl * min_dx / vmax;
    let steps = (set.t_final / dt0).ceil() as usize;
    let dt = set.t_final / steps as f64;
    let save_steps: Vec<usize> = save_times.iter().map(|t| (t / dt).round() as usize).collect();
    if save_steps.iter().any(|&s| s > steps) {
        return Err(Error::Params("save time beyond t_final".into()));
    }
    let mut diag = Diagnostics {
        dt,
        steps,
        cfl: vmax * dt / min_dx,
        relaxation_factor: (-set.model.bgk_nu_scale * dt / set.eps).exp(),
        ..Default::default()
    };
    let mut st = Stepper::new(g, x, set, dt);
    let mut f = init;
    let mut wall = WallModel::new(wall_at(0.0)?, set.alpha, set.diffuse, g)?;
    let mut g_old = f[0].clone();
    apply_maxwell_bc(&mut g_old, &wall, g);
    let mut snaps: Vec<(usize, Vec<Profile>)> = Vec::new();
    if save_steps.contains(&0) {
        snaps.push((0, f.clone()));
    }
    st.collide(&mut f, 0.5 * dt)?;
    let nx = x.len();
    for n in 0..steps {
        let t1 = (n + 1) as f64 * dt;
        let mw = wall_at(t1)?;
        if mw != wall.mw {
            wall = WallModel::new(mw, set.alpha, set.diffuse, g)?;
        }
        let mass0 = st.mass(&f);
        let flux0 = st.wall_flux(&f[0]) - st.wall_flux(&f[nx - 1]);
        let mut fn1 = st.transport(&f, &wall, &mut g_old);
        st.clip(&mut fn1, &mut diag, t1)?;
        let flux1 = st.wall_flux(&fn1[0]) - st.wall_flux(&fn1[nx - 1]);
        let audit = (st.mass(&fn1) - mass0 - 0.5 * dt * (flux0 + flux1)).abs() / mass0.abs().max(1e-300);
        diag.mass_defect = diag.mass_defect.max(audit);
        f = fn1;
        if f.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { t: t1 });
        }
        let save = save_steps.contains(&(n + 1));
        if n + 1 == steps || save {
            // close the pending half step
            let mut done = f.clone();
            st.collide(&mut done, 0.5 * dt)?;
            if save {
                snaps.push((n + 1, done.clone()));
            }
            if n + 1 == steps {
                f = done;
                break;
            }
        }
        st.collide(&mut f, dt)?;
    }
    let _ = f;
    snaps.sort_by_key(|s| s.0);
    Ok(KineticRun {
        eps: set.eps,
        x: x.to_vec(),
        times: snaps.iter().map(|s| s.0 as f64 * dt).collect(),
        snapshots: snaps.into_iter().map(|s| s.1).collect(),
        diag,
    })
}

/// Density, velocity and temperature per node.
pub fn macroscopic(f: &[Profile], g: &VelocityGrid) -> Result<Vec<MaxwellianParams>> {
    f.iter().map(|fi| moments(fi, g).map(|m| m.1)).collect()
}

/// `u3(0)` extrapolated by a least-squares quadratic over `[a, b]`.
pub fn wall_normal_velocity(x: &[f64], f: &[Profile], g: &VelocityGrid, a: f64, b: f64) -> Result<f64> {
    let p = macroscopic(f, g)?;
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(&p)
        .filter(|(xi, _)| **xi >= a && **xi <= b)
        .map(|(xi, pi)| (*xi, pi.u[2]))
        .collect();
    if pts.len() < 4 {
        return Err(Error::Grid(format!("only {} nodes in [{a}, {b}]", pts.len())));
    }
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    for (xi, y) in pts {
        let r = nalgebra::Vector3::new(1.0, xi, xi * xi);
        ata += r * r.transpose();
        atb += r * y;
    }
    let c = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| Error::Fit("singular wall extrapolation".into()))?;
    Ok(c[0])
}

/// Header plus field array.
pub fn write_checkpoint(path: &Path, run: &KineticRun, which: usize, g: &VelocityGrid, model: &CollisionModel) -> Result<()> {
    let head = serde_json::json!({
        "eps": run.eps,
        "t": run.times[which],
        "n_vel": g.n,
        "vmax": g.v_max,
        "model": model,
        "x": run.x,
    });
    write_field(path, &head, &run.snapshots[which])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::build_grid;

    fn settings(eps: f64, alpha: f64, diffuse: Diffuse, t_final: f64) -> DirectSettings {
        DirectSettings {
            eps,
            model: CollisionModel::bgk(1.0),
            alpha,
            diffuse,
            t_final,
            cfl: 1.0,
        }
    }

    #[test]
    fn maxwell_bc_examples() {
        let g = build_grid(12, 6.0).unwrap();
        let p0 = MaxwellianParams::rest(1.0, 1.0);
        let m0 = maxwellian(&p0, &g, true).unwrap();
        // specular reflection of an even trace is the identity
        let wall = WallModel::new(p0, 0.0, Diffuse::Verbatim, &g).unwrap();
        let mut f = m0.clone();
        apply_maxwell_bc(&mut f, &wall, &g);
        assert!(f.iter().zip(&m0).all(|(a, b)| (a - b).abs() < 1e-15));
        // full diffusion of the wall Maxwellian
        let wall = WallModel::new(p0, 1.0, Diffuse::Normalized, &g).unwrap();
        let mut f = m0.clone();
        apply_maxwell_bc(&mut f, &wall, &g);
        assert!(f.iter().zip(&m0).all(|(a, b)| (a - b).abs() < 1e-14));
        let net: f64 = (0..g.len()).map(|q| g.weights[q] * g.nodes[q][2] * f[q]).sum();
        assert!(net.abs() < 1e-14);
        // verbatim re-emission carries the lattice half flux
        let wall = WallModel::new(p0, 1.0, Diffuse::Verbatim, &g).unwrap();
        let mut f = m0.clone();
        apply_maxwell_bc(&mut f, &wall, &g);
        let ratio = (2.0 * std::f64::consts::PI).sqrt() * wall.incoming_flux;
        for q in 0..g.len() {
            if g.nodes[q][2] > 0.0 {
                assert!((f[q] - ratio * m0[q]).abs() < 1e-14);
            }
        }
        assert!((ratio - 1.0459).abs() < 1e-3);
    }

    #[test]
    fn normalized_wall_has_zero_mass_flux() {
        let g = build_grid(8, 5.0).unwrap();
        let wall = WallModel::new(MaxwellianParams::rest(1.3, 0.8), 0.4, Diffuse::Normalized, &g).unwrap();
        let mut f: Profile = (0..g.len())
            .map(|q| {
                let v = g.nodes[q];
                (-(v[0] - 0.3).powi(2) - v[1] * v[1] - (v[2] + 0.5).powi(2)).exp()
            })
            .collect();
        apply_maxwell_bc(&mut f, &wall, &g);
        let net: f64 = (0..g.len()).map(|q| g.weights[q] * g.nodes[q][2] * f[q]).sum();
        let out: f64 = (0..g.len()).filter(|&q| g.nodes[q][2] < 0.0).map(|q| g.weights[q] * f[q]).sum();
        assert!(net.abs() < 1e-12 * out);
    }

    #[test]
    fn stretched_grid_properties() {
        let x = stretched_grid(1.0, 200, 0.005 / 8.0, 1.05).unwrap();
        assert_eq!(x.len(), 201);
        assert!((x[200] - 1.0).abs() < 1e-12);
        assert!((x[1] - 0.000625).abs() < 1e-15);
        let r = (x[2] - x[1]) / (x[1] - x[0]);
        assert!(r > 1.0 && r < 1.05);
        assert!(stretched_grid(1.0, 50, 1e-4, 1.05).is_err());
    }

    #[test]
    fn uniform_maxwellian_is_stationary() {
        let g = build_grid(8, 5.0).unwrap();
        let p = MaxwellianParams::new(1.0, [0.2, -0.1, 0.0], 1.0);
        let m = maxwellian(&p, &g, true).unwrap();
        let x = stretched_grid(0.5, 40, 0.005, 1.1).unwrap();
        for eps in [1.0, 0.01] {
            let set = settings(eps, 0.0, Diffuse::Verbatim, 0.01);
            let run = run_direct(&set, &g, &x, vec![m.clone(); x.len()], &|_| Ok(p), &[0.01]).unwrap();
            let worst = run.snapshots[0]
                .iter()
                .flat_map(|fi| fi.iter().zip(&m).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            assert!(worst < 1e-12 * run.diag.steps as f64, "eps {eps}: {worst}");
        }
    }

    #[test]
    fn homogeneous_relaxation_rate() {
        let g = build_grid(8, 5.0).unwrap();
        let p = MaxwellianParams::rest(1.0, 1.0);
        let m = maxwellian(&p, &g, true).unwrap();
        // even in v3 perturbation with zero moments to first order
        let pert: Profile = (0..g.len())
            .map(|q| {
                let v = g.nodes[q];
                m[q] * (1.0 + 0.1 * (v[0] * v[1]))
            })
            .collect();
        let x = stretched_grid(0.2, 16, 0.01, 1.2).unwrap();
        let eps = 0.05;
        let t_final = 0.02;
        let set = settings(eps, 0.0, Diffuse::Verbatim, t_final);
        let run = run_direct(&set, &g, &x, vec![pert.clone(); x.len()], &|_| Ok(p), &[t_final]).unwrap();
        let (m0, _) = moments(&pert, &g).unwrap();
        let f = &run.snapshots[0][5];
        let (m1, _) = moments(f, &g).unwrap();
        for (a, b) in m0.as_array().iter().zip(m1.as_array()) {
            assert!((a - b).abs() < 1e-12);
        }
        let expect = (-t_final / eps).exp();
        let q = g.index(5, 6, 2);
        let got = (f[q] - m[q]) / (pert[q] - m[q]);
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn specular_wall_keeps_even_traces_even() {
        let g = build_grid(8, 5.0).unwrap();
        let p = MaxwellianParams::rest(1.0, 1.0);
        let x = stretched_grid(0.3, 30, 0.002, 1.15).unwrap();
        let init: Vec<Profile> = x
            .iter()
            .map(|xi| {
                let q = MaxwellianParams::rest(1.0 + 0.2 * (-(xi - 0.15f64).powi(2) / 0.002).exp(), 1.0);
                maxwellian(&q, &g, true).unwrap()
            })
            .collect();
        let set = settings(0.02, 0.0, Diffuse::Verbatim, 0.01);
        let run = run_direct(&set, &g, &x, init, &|_| Ok(p), &[0.01]).unwrap();
        let f0 = &run.snapshots[0][0];
        let odd = (0..g.len()).map(|q| (f0[q] - f0[g.mirror3(q)]).abs()).fold(0.0, f64::max);
        let size = f0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(odd < 1e-10 * size, "{odd}");
    }

    #[test]
    fn deterministic_and_conservative() {
        let g = build_grid(8, 5.0).unwrap();
        let p = MaxwellianParams::rest(1.0, 1.0);
        let x = stretched_grid(0.3, 30, 0.002, 1.15).unwrap();
        let init: Vec<Profile> = x
            .iter()
            .map(|xi| {
                let q = MaxwellianParams::new(1.0, [0.1 * xi, 0.0, 0.05 * (-(xi - 0.15f64).powi(2) / 0.002).exp()], 1.0);
                maxwellian(&q, &g, true).unwrap()
            })
            .collect();
        let set = settings(0.02, (2.0 * std::f64::consts::PI * 0.02f64).sqrt(), Diffuse::Normalized, 0.005);
        let a = run_direct(&set, &g, &x, init.clone(), &|_| Ok(p), &[0.005]).unwrap();
        let b = run_direct(&set, &g, &x, init, &|_| Ok(p), &[0.005]).unwrap();
        assert!(a.snapshots[0]
            .iter()
            .flatten()
            .zip(b.snapshots[0].iter().flatten())
            .all(|(u, v)| u.to_bits() == v.to_bits()));
        assert!(a.diag.cfl <= 1.0 + 1e-12);
        assert!(a.diag.mass_defect < 1e-3, "{}", a.diag.mass_defect);
    }
}
