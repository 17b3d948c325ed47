//! Half-line compressible Euler solver, the linear corrector systems, the
//! microscopic parts of the interior terms and the slip formula.
//!
//! Fields depend on `x3` only. The wall `x3 = 0` and the far end
//! `x3 = X_max` are impermeable; both are treated by mirror ghost nodes
//! (`rho`, tangential velocity, `T` even; `u3` odd), which makes the
//! discrete mass and energy exactly conserved.

use crate::collision::{CollisionKind, CollisionModel, LinearizedOperator, solve_l_inverse};
use crate::error::{Error, Result};
use crate::numerics::{fd_weights, left_trace};
use crate::velocity::{
    MaxwellianJet, MaxwellianParams, NullBasis, Profile, VelocityGrid, conserved_perturbation,
};
use std::io::Write;
use std::path::Path;

const GHOST: usize = 3;

/// Primitive fields on the uniform grid `x_i = i dx`, `i = 0..=nx`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FluidState {
    pub dx: f64,
    pub rho: Vec<f64>,
    pub u: [Vec<f64>; 3],
    pub t: Vec<f64>,
}

impl FluidState {
    pub fn uniform(nx: usize, xmax: f64, rho: f64, u: [f64; 3], t: f64) -> Self {
        let n = nx + 1;
        FluidState {
            dx: xmax / nx as f64,
            rho: vec![rho; n],
            u: [vec![u[0]; n], vec![u[1]; n], vec![u[2]; n]],
            t: vec![t; n],
        }
    }

    /// Sample `f(x) -> (rho, u, T)` on `nx` intervals of `[0, xmax]`.
    pub fn from_fn(nx: usize, xmax: f64, f: impl Fn(f64) -> (f64, [f64; 3], f64)) -> Self {
        let mut s = Self::uniform(nx, xmax, 1.0, [0.0; 3], 1.0);
        for i in 0..=nx {
            let (r, u, t) = f(i as f64 * s.dx);
            s.rho[i] = r;
            for c in 0..3 {
                s.u[c][i] = u[c];
            }
            s.t[i] = t;
        }
        s
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn xmax(&self) -> f64 {
        self.dx * (self.len() - 1) as f64
    }

    pub fn x(&self) -> Vec<f64> {
        (0..self.len()).map(|i| i as f64 * self.dx).collect()
    }

    pub fn params(&self, i: usize) -> MaxwellianParams {
        MaxwellianParams::new(
            self.rho[i],
            [self.u[0][i], self.u[1][i], self.u[2][i]],
            self.t[i],
        )
    }

    fn fields(&self) -> [&Vec<f64>; 5] {
        [&self.rho, &self.u[0], &self.u[1], &self.u[2], &self.t]
    }

    fn conserved(&self) -> [Vec<f64>; 5] {
        let n = self.len();
        let mut q: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
        for i in 0..n {
            let p = self.params(i).conserved();
            for k in 0..5 {
                q[k][i] = p[k];
            }
        }
        q
    }

    fn from_conserved(q: &[Vec<f64>; 5], dx: f64, time: f64) -> Result<Self> {
        let n = q[0].len();
        let mut s = FluidState {
            dx,
            rho: vec![0.0; n],
            u: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            t: vec![0.0; n],
        };
        for i in 0..n {
            let r = q[0][i];
            if !(r > 0.0) {
                return Err(Error::BlowUp { t: time });
            }
            let u = [q[1][i] / r, q[2][i] / r, q[3][i] / r];
            let ke = 0.5 * r * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
            let t = 2.0 * (q[4][i] - ke) / (3.0 * r);
            if !(t > 0.0) {
                return Err(Error::BlowUp { t: time });
            }
            s.rho[i] = r;
            for c in 0..3 {
                s.u[c][i] = u[c];
            }
            s.t[i] = t;
        }
        Ok(s)
    }

    fn trapezoid(&self, f: &[f64]) -> f64 {
        let n = f.len();
        self.dx * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[n - 1]))
    }

    pub fn mass(&self) -> f64 {
        self.trapezoid(&self.rho)
    }

    pub fn total_energy(&self) -> f64 {
        self.trapezoid(&self.conserved()[4])
    }

    /// Largest `|u3| + sqrt(5T/3)`.
    pub fn max_speed(&self) -> f64 {
        (0..self.len())
            .map(|i| self.u[2][i].abs() + (5.0 * self.t[i] / 3.0).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn stable_dt(&self, cfl: f64) -> f64 {
        cfl * self.dx / self.max_speed()
    }
}

/// Extend with three mirror ghosts on each side. Odd fields are reflected
/// about `left` at the wall and about zero at the far end.
fn extend(f: &[f64], odd: bool, left: f64) -> Vec<f64> {
    let n = f.len();
    let mut e = Vec::with_capacity(n + 2 * GHOST);
    for j in (1..=GHOST).rev() {
        e.push(if odd { 2.0 * left - f[j] } else { f[j] });
    }
    e.extend_from_slice(f);
    for j in 1..=GHOST {
        let v = f[n - 1 - j];
        e.push(if odd { -v } else { v });
    }
    e
}

/// Sixth-order central first derivative of an extended array, returned on
/// the physical nodes.
fn d1_ext(e: &[f64], dx: f64) -> Vec<f64> {
    let n = e.len() - 2 * GHOST;
    (0..n)
        .map(|i| {
            let c = i + GHOST;
            (-e[c - 3] + 9.0 * e[c - 2] - 45.0 * e[c - 1] + 45.0 * e[c + 1] - 9.0 * e[c + 2]
                + e[c + 3])
                / (60.0 * dx)
        })
        .collect()
}

/// Sixth-order derivative of a field with mirror parity.
pub fn ddx(f: &[f64], dx: f64, odd: bool) -> Vec<f64> {
    d1_ext(&extend(f, odd, 0.0), dx)
}

/// Sixth-order derivative with one-sided seven-point stencils at the first
/// and last three nodes; no parity is assumed.
pub fn ddx_sided(f: &[f64], dx: f64) -> Vec<f64> {
    let n = f.len();
    let mut d = d1_ext(&extend(f, false, 0.0), dx);
    if n < 7 {
        return d;
    }
    let xs: Vec<f64> = (0..7).map(|j| j as f64).collect();
    for i in 0..GHOST {
        let w = fd_weights(i as f64, &xs, 1);
        d[i] = (0..7).map(|j| w[1][j] * f[j]).sum::<f64>() / dx;
        d[n - 1 - i] = -(0..7).map(|j| w[1][j] * f[n - 1 - j]).sum::<f64>() / dx;
    }
    d
}

const FLUX_ODD: [bool; 5] = [true, true, true, false, true];

/// Euler flux `(rho u3, rho u3 u1, rho u3 u2, rho u3^2 + p, u3 (E + p))`.
fn flux(q: &[f64; 5]) -> [f64; 5] {
    let r = q[0];
    let u = [q[1] / r, q[2] / r, q[3] / r];
    let ke = 0.5 * r * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    let p = 2.0 / 3.0 * (q[4] - ke);
    [
        q[3],
        q[3] * u[0],
        q[3] * u[1],
        q[3] * u[2] + p,
        u[2] * (q[4] + p),
    ]
}

/// `-d/dx F(q)` on the nodes.
fn euler_rhs(q: &[Vec<f64>; 5], dx: f64) -> [Vec<f64>; 5] {
    let n = q[0].len();
    let mut f: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    for i in 0..n {
        let fi = flux(&[q[0][i], q[1][i], q[2][i], q[3][i], q[4][i]]);
        for k in 0..5 {
            f[k][i] = fi[k];
        }
    }
    std::array::from_fn(|k| ddx(&f[k], dx, FLUX_ODD[k]).iter().map(|d| -d).collect())
}

/// `d q / dt` of the conserved variables, `-dF/dx`.
pub fn conserved_time_derivative(s: &FluidState) -> [Vec<f64>; 5] {
    euler_rhs(&s.conserved(), s.dx)
}

/// Conserved-moment rates `(d_t q, d_x q)` at node `i`, with the time
/// derivative taken from the Euler equations in quasi-linear form so that
/// `(d_t + v3 d_x) M` has no collision-invariant component beyond the
/// velocity quadrature error.
pub fn transport_rates(s: &FluidState) -> Vec<([f64; 5], [f64; 5])> {
    let dx = s.dx;
    let dr = ddx_sided(&s.rho, dx);
    let du: [Vec<f64>; 3] = std::array::from_fn(|c| ddx_sided(&s.u[c], dx));
    let dt = ddx_sided(&s.t, dx);
    (0..s.len())
        .map(|i| {
            let p = s.params(i);
            let (r, w, t) = (p.rho, p.u[2], p.t);
            let dp = dr[i] * t + r * dt[i];
            let rt = -(dr[i] * w + r * du[2][i]);
            let ut = [
                -w * du[0][i],
                -w * du[1][i],
                -w * du[2][i] - dp / r,
            ];
            let tt = -w * dt[i] - 2.0 / 3.0 * t * du[2][i];
            (
                conserved_perturbation(&p, rt, ut, tt),
                conserved_perturbation(&p, dr[i], [du[0][i], du[1][i], du[2][i]], dt[i]),
            )
        })
        .collect()
}

type Forcing<'a> = &'a dyn Fn(f64, f64) -> [f64; 5];

fn rk4_conserved(
    q0: &[Vec<f64>; 5],
    dx: f64,
    t0: f64,
    dt: f64,
    forcing: Option<Forcing>,
) -> Result<[Vec<f64>; 5]> {
    let n = q0[0].len();
    let rhs = |q: &[Vec<f64>; 5], t: f64| -> [Vec<f64>; 5] {
        let mut r = euler_rhs(q, dx);
        if let Some(f) = forcing {
            for i in 0..n {
                let s = f(t, i as f64 * dx);
                for k in 0..5 {
                    r[k][i] += s[k];
                }
            }
        }
        r
    };
    let axpy = |q: &[Vec<f64>; 5], a: f64, d: &[Vec<f64>; 5]| -> [Vec<f64>; 5] {
        let mut out: [Vec<f64>; 5] =
            std::array::from_fn(|k| q[k].iter().zip(&d[k]).map(|(x, y)| x + a * y).collect());
        out[3][0] = 0.0;
        out[3][n - 1] = 0.0;
        out
    };
    let check = |q: &[Vec<f64>; 5], t: f64| -> Result<()> {
        if q[0].iter().any(|r| !(*r > 0.0)) || q.iter().flatten().any(|x| !x.is_finite()) {
            Err(Error::BlowUp { t })
        } else {
            Ok(())
        }
    };
    let k1 = rhs(q0, t0);
    let q1 = axpy(q0, 0.5 * dt, &k1);
    check(&q1, t0 + 0.5 * dt)?;
    let k2 = rhs(&q1, t0 + 0.5 * dt);
    let q2 = axpy(q0, 0.5 * dt, &k2);
    check(&q2, t0 + 0.5 * dt)?;
    let k3 = rhs(&q2, t0 + 0.5 * dt);
    let q3 = axpy(q0, dt, &k3);
    check(&q3, t0 + dt)?;
    let k4 = rhs(&q3, t0 + dt);
    let mut sum: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    for k in 0..5 {
        for i in 0..n {
            sum[k][i] = (k1[k][i] + 2.0 * k2[k][i] + 2.0 * k3[k][i] + k4[k][i]) / 6.0;
        }
    }
    Ok(axpy(q0, dt, &sum))
}

/// One RK4 step. Errors if `dt` exceeds the CFL limit or positivity is lost.
pub fn euler_step(s: &FluidState, dt: f64, cfl: f64) -> Result<FluidState> {
    euler_step_at(s, 0.0, dt, cfl, None)
}

/// RK4 step from time `t0` with an optional source `forcing(t, x)` added
/// to the conserved equations.
pub fn euler_step_at(
    s: &FluidState,
    t0: f64,
    dt: f64,
    cfl: f64,
    forcing: Option<Forcing>,
) -> Result<FluidState> {
    let lim = s.stable_dt(cfl);
    if dt > lim * (1.0 + 1e-12) {
        return Err(Error::Cfl(format!("dt = {dt:.3e} > {lim:.3e}")));
    }
    let q = rk4_conserved(&s.conserved(), s.dx, t0, dt, forcing)?;
    FluidState::from_conserved(&q, s.dx, t0 + dt)
}

/// Stored Euler states at uniform time steps with wall traces.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EulerTrajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<FluidState>,
    /// `traces[n][field][d]`: `d`-th `x3` derivative at the wall of
    /// `(rho, u1, u2, u3, T)` at time `n`.
    pub traces: Vec<[Vec<f64>; 5]>,
    pub n_taylor: usize,
}

impl EulerTrajectory {
    /// Index of the stored time nearest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        let i = (t / self.dt).round();
        (i.max(0.0) as usize).min(self.times.len() - 1)
    }

    pub fn final_state(&self) -> &FluidState {
        self.states.last().unwrap()
    }

    /// Time derivative of a wall trace by differences of stored states
    /// (one-sided at the ends).
    pub fn trace_time_derivative(&self, n: usize, field: usize, d: usize) -> f64 {
        let m = self.times.len();
        let f = |j: usize| self.traces[j][field][d];
        if m < 2 {
            return 0.0;
        }
        if n == 0 {
            (f(1) - f(0)) / self.dt
        } else if n == m - 1 {
            (f(m - 1) - f(m - 2)) / self.dt
        } else {
            (f(n + 1) - f(n - 1)) / (2.0 * self.dt)
        }
    }
}

fn wall_traces(s: &FluidState, n_taylor: usize) -> [Vec<f64>; 5] {
    let f = s.fields();
    std::array::from_fn(|k| left_trace(f[k], s.dx, n_taylor, 7))
}

/// Integrate the Euler system to `tau` with a fixed step `dt <= cfl dx / c`,
/// the number of steps rounded up to an even count.
pub fn run_euler(init: &FluidState, tau: f64, cfl: f64, n_taylor: usize) -> Result<EulerTrajectory> {
    let dt0 = init.stable_dt(cfl) * 0.9;
    let mut steps = (tau / dt0).ceil().max(2.0) as usize;
    if steps % 2 == 1 {
        steps += 1;
    }
    let dt = tau / steps as f64;
    let mut states = vec![init.clone()];
    let mut traces = vec![wall_traces(init, n_taylor)];
    let mut times = vec![0.0];
    let mut s = init.clone();
    for n in 0..steps {
        s = euler_step_at(&s, n as f64 * dt, dt, cfl, None)?;
        traces.push(wall_traces(&s, n_taylor));
        states.push(s.clone());
        times.push((n + 1) as f64 * dt);
    }
    Ok(EulerTrajectory {
        dt,
        times,
        states,
        traces,
        n_taylor,
    })
}

/// Fluid part `(rho_k, u_k, T_k)` of the order-`k` interior term; the
/// temperature variable of the hierarchy is `theta_k = 3 T_k`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorrectorState {
    pub k: usize,
    pub rho: Vec<f64>,
    pub u: [Vec<f64>; 3],
    pub t: Vec<f64>,
}

impl CorrectorState {
    pub fn zeros(k: usize, n: usize) -> Self {
        CorrectorState {
            k,
            rho: vec![0.0; n],
            u: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            t: vec![0.0; n],
        }
    }

    pub fn theta(&self) -> Vec<f64> {
        self.t.iter().map(|x| 3.0 * x).collect()
    }

    fn as_array(&self) -> [&Vec<f64>; 5] {
        [&self.rho, &self.u[0], &self.u[1], &self.u[2], &self.t]
    }

    fn from_array(k: usize, a: [Vec<f64>; 5]) -> Self {
        let [rho, u1, u2, u3, t] = a;
        CorrectorState {
            k,
            rho,
            u: [u1, u2, u3],
            t,
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        let s = |v: &Vec<f64>| v.iter().map(|x| a * x).collect::<Vec<f64>>();
        CorrectorState {
            k: self.k,
            rho: s(&self.rho),
            u: [s(&self.u[0]), s(&self.u[1]), s(&self.u[2])],
            t: s(&self.t),
        }
    }

    /// Conserved-moment perturbation at node `i` around `p`.
    pub fn conserved_at(&self, p: &MaxwellianParams, i: usize) -> [f64; 5] {
        conserved_perturbation(
            p,
            self.rho[i],
            [self.u[0][i], self.u[1][i], self.u[2][i]],
            self.t[i],
        )
    }
}

/// Right-hand sides `(F_u1, F_u2, F_u3, G_theta)` of the corrector system.
pub type CorrectorSource = [Vec<f64>; 4];

/// Time derivative of the linear corrector system around `bg`.
fn corrector_rhs(bg: &FluidState, c: &[Vec<f64>; 5], wall_u3: f64, src: Option<&CorrectorSource>) -> [Vec<f64>; 5] {
    let dx = bg.dx;
    let n = bg.len();
    let b: [Vec<f64>; 5] = std::array::from_fn(|k| {
        extend(bg.fields()[k], k == 3, 0.0)
    });
    let e: [Vec<f64>; 5] = std::array::from_fn(|k| {
        extend(&c[k], k == 3, if k == 3 { wall_u3 } else { 0.0 })
    });
    let m = n + 2 * GHOST;
    let (rho, w, tt) = (&b[0], &b[3], &b[4]);
    let mass_flux: Vec<f64> = (0..m).map(|i| e[0][i] * w[i] + rho[i] * e[3][i]).collect();
    let pk: Vec<f64> = (0..m).map(|i| rho[i] * e[4][i] + tt[i] * e[0][i]).collect();
    let p0: Vec<f64> = (0..m).map(|i| rho[i] * tt[i]).collect();
    let d = |v: &Vec<f64>| d1_ext(v, dx);
    let dmass = d(&mass_flux);
    let dpk = d(&pk);
    let dp0 = d(&p0);
    let du: [Vec<f64>; 3] = std::array::from_fn(|i| d(&b[1 + i]));
    let dt0 = d(&b[4]);
    let dc: [Vec<f64>; 5] = std::array::from_fn(|k| d(&e[k]));
    let mut out: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    for i in 0..n {
        let j = i + GHOST;
        let (r, wi, ti) = (rho[j], w[j], tt[j]);
        let (r1, b1, s1) = (e[0][j], e[3][j], e[4][j]);
        out[0][i] = -dmass[i];
        for a in 0..2 {
            out[1 + a][i] = -wi * dc[1 + a][i] - b1 * du[a][i];
        }
        out[3][i] = -(wi * dc[3][i] + b1 * du[2][i]) - dpk[i] / r + dp0[i] * r1 / (r * r);
        out[4][i] = -wi * dc[4][i] - b1 * dt0[i] - 2.0 / 3.0 * (s1 * du[2][i] + ti * dc[3][i]);
        if let Some(s) = src {
            for a in 0..3 {
                out[1 + a][i] += s[a][i] / r;
            }
            out[4][i] += s[3][i] / (3.0 * r);
        }
    }
    out
}

/// Solve the order-`k` linear corrector system along `traj`.
///
/// The corrector advances with step `2 dt` so that its RK4 stages land on
/// stored Euler states; results are returned at every other stored time.
/// `sources(n)` gives the right-hand sides at stored index `n` (or `None`
/// when they vanish); `slip(n)` the wall value of `u_{k,3}`.
pub fn solve_corrector(
    k: usize,
    traj: &EulerTrajectory,
    init: &CorrectorState,
    sources: &dyn Fn(usize) -> Result<Option<CorrectorSource>>,
    slip: &dyn Fn(usize) -> Result<f64>,
) -> Result<Vec<CorrectorState>> {
    let n_nodes = traj.states[0].len();
    if init.rho.len() != n_nodes {
        return Err(Error::Missing(format!(
            "corrector initial data has {} nodes, trajectory {}",
            init.rho.len(),
            n_nodes
        )));
    }
    let h = 2.0 * traj.dt;
    let steps = (traj.times.len() - 1) / 2;
    let mut cur: [Vec<f64>; 5] = std::array::from_fn(|q| init.as_array()[q].clone());
    cur[3][0] = slip(0)?;
    let mut out = vec![CorrectorState::from_array(k, cur.clone())];
    let stage = |n: usize, c: &[Vec<f64>; 5]| -> Result<[Vec<f64>; 5]> {
        let s = sources(n)?;
        Ok(corrector_rhs(&traj.states[n], c, slip(n)?, s.as_ref()))
    };
    for step in 0..steps {
        let n0 = 2 * step;
        let axpy = |a: f64, d: &[Vec<f64>; 5], wall: f64| -> [Vec<f64>; 5] {
            let mut o: [Vec<f64>; 5] =
                std::array::from_fn(|q| cur[q].iter().zip(&d[q]).map(|(x, y)| x + a * y).collect());
            o[3][0] = wall;
            o[3][n_nodes - 1] = 0.0;
            o
        };
        let k1 = stage(n0, &cur)?;
        let c2 = axpy(0.5 * h, &k1, slip(n0 + 1)?);
        let k2 = stage(n0 + 1, &c2)?;
        let c3 = axpy(0.5 * h, &k2, slip(n0 + 1)?);
        let k3 = stage(n0 + 1, &c3)?;
        let c4 = axpy(h, &k3, slip(n0 + 2)?);
        let k4 = stage(n0 + 2, &c4)?;
        let sum: [Vec<f64>; 5] = std::array::from_fn(|q| {
            (0..n_nodes)
                .map(|i| (k1[q][i] + 2.0 * k2[q][i] + 2.0 * k3[q][i] + k4[q][i]) / 6.0)
                .collect()
        });
        cur = axpy(h, &sum, slip(n0 + 2)?);
        if cur.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::BlowUp { t: traj.times[n0 + 2] });
        }
        out.push(CorrectorState::from_array(k, cur.clone()));
    }
    Ok(out)
}

/// Residual of `d_t rho_k + d_x (rho u_{k,3} + rho_k u_3) = 0` at the
/// interior nodes between two corrector snapshots `2 dt` apart.
pub fn corrector_mass_residual(
    traj: &EulerTrajectory,
    sol: &[CorrectorState],
    m: usize,
) -> f64 {
    let (a, b) = (&sol[m], &sol[m + 1]);
    let s = &traj.states[2 * m + 1];
    let n = s.len();
    let mid: Vec<f64> = (0..n).map(|i| 0.5 * (a.rho[i] + b.rho[i])).collect();
    let mid3: Vec<f64> = (0..n).map(|i| 0.5 * (a.u[2][i] + b.u[2][i])).collect();
    let flux: Vec<f64> = (0..n).map(|i| s.rho[i] * mid3[i] + mid[i] * s.u[2][i]).collect();
    let df = d1_ext(&extend(&flux, false, 0.0), s.dx);
    let h = 2.0 * traj.dt;
    let mut r = 0.0f64;
    for i in 4..n - 4 {
        r = r.max(((b.rho[i] - a.rho[i]) / h + df[i]).abs());
    }
    r
}

/// Burnett-moment right-hand sides of the corrector system from a
/// microscopic part `(I - P)(F_k / sqrt(M))` given per node.
pub fn corrector_sources(
    state: &FluidState,
    micro: &[Profile],
    g: &VelocityGrid,
) -> Result<CorrectorSource> {
    let n = state.len();
    let mut stress: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
    let mut heat = vec![0.0; n];
    for i in 0..n {
        let p = state.params(i);
        let bu = crate::velocity::burnett(&p, g)?;
        for a in 0..3 {
            stress[a][i] = p.t * g.dot(&bu.a[2][a], &micro[i]);
        }
        heat[i] = 2.0 * p.t.powf(1.5) * g.dot(&bu.b[2], &micro[i]);
    }
    let mut fu: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
    for a in 0..3 {
        fu[a] = ddx_sided(&stress[a], state.dx).iter().map(|d| -d).collect();
    }
    let energy_flux: Vec<f64> = (0..n)
        .map(|i| heat[i] + 2.0 * (0..3).map(|l| state.u[l][i] * stress[l][i]).sum::<f64>())
        .collect();
    let de = ddx_sided(&energy_flux, state.dx);
    let gt: Vec<f64> = (0..n)
        .map(|i| -de[i] - 2.0 * (0..3).map(|l| state.u[l][i] * fu[l][i]).sum::<f64>())
        .collect();
    Ok([fu[0].clone(), fu[1].clone(), fu[2].clone(), gt])
}

/// Microscopic part per node with the size of the discarded projection.
#[derive(Clone, Debug)]
pub struct MicroField {
    pub values: Vec<Profile>,
    /// Largest `|P rhs| / |rhs|` removed before inversion.
    pub defect: f64,
}

/// Quadratic collision term `B(F1, F1)` for a hydrodynamic `F1 = dM[dm]`.
///
/// For relaxation dynamics this is `nu/2 d^2M[dm, dm]`, the second
/// variation of `nu (M[F] - F)`; for hard spheres the bilinear operator is
/// applied directly.
pub fn quadratic_term(
    jet: &MaxwellianJet,
    g: &VelocityGrid,
    model: &CollisionModel,
    dm: &[f64; 5],
) -> Result<Profile> {
    match model.kind {
        CollisionKind::Bgk => {
            let nu = model.bgk_nu_scale * jet.params.rho;
            Ok(jet.second(g, dm).iter().map(|x| 0.5 * nu * x).collect())
        }
        CollisionKind::HardSphere => {
            let f1 = jet.first(g, dm);
            crate::collision::hardsphere_bilinear(&f1, &f1, g, model, model.angular_n)
        }
    }
}

/// `B(F, G) + B(G, F)` for hydrodynamic `F = dM[a]`, `G = dM[b]` at the
/// jet's base point.
pub fn symmetric_bilinear(
    jet: &MaxwellianJet,
    g: &VelocityGrid,
    model: &CollisionModel,
    a: &[f64; 5],
    b: &[f64; 5],
) -> Result<Profile> {
    match model.kind {
        CollisionKind::Bgk => {
            let nu = model.bgk_nu_scale * jet.params.rho;
            let plus: [f64; 5] = std::array::from_fn(|i| a[i] + b[i]);
            let minus: [f64; 5] = std::array::from_fn(|i| a[i] - b[i]);
            let (sp, sm) = (jet.second(g, &plus), jet.second(g, &minus));
            Ok(sp.iter().zip(&sm).map(|(x, y)| 0.25 * nu * (x - y)).collect())
        }
        CollisionKind::HardSphere => {
            let (fa, fb) = (jet.first(g, a), jet.first(g, b));
            let n = model.angular_n;
            let ab = crate::collision::hardsphere_bilinear_ref(&fa, &fb, g, model, n, &jet.m)?;
            let ba = crate::collision::hardsphere_bilinear_ref(&fb, &fa, g, model, n, &jet.m)?;
            Ok(ab.iter().zip(&ba).map(|(x, y)| x + y).collect())
        }
    }
}

/// `(I - P)(F_k / sqrt(M))` at every node of `state` by inverting the
/// local linearized operator.
///
/// `k = 1` vanishes identically; `k = 2` uses the transport of `M` (with
/// the time derivative from the Euler fluxes) and the quadratic term of
/// the order-1 fluid part. Higher orders need bookkeeping that is not
/// carried here.
pub fn microscopic_part(
    k: usize,
    state: &FluidState,
    order1: Option<&CorrectorState>,
    g: &VelocityGrid,
    model: &CollisionModel,
    operator: &dyn Fn(&MaxwellianParams) -> Result<LinearizedOperator>,
) -> Result<MicroField> {
    let n = state.len();
    match k {
        1 => Ok(MicroField {
            values: vec![g.zeros(); n],
            defect: 0.0,
        }),
        2 => {
            let rates = transport_rates(state);
            let mut values = Vec::with_capacity(n);
            // defect measured against the largest source over the field, so
            // nodes with nearly vanishing gradients do not dominate
            let (mut removed, mut largest) = (0.0f64, 0.0f64);
            for i in 0..n {
                let p = state.params(i);
                let jet = MaxwellianJet::new(&p, g)?;
                let (mt, mx) = rates[i];
                let dt_m = jet.first(g, &mt);
                let dx_m = jet.first(g, &mx);
                let quad = match order1 {
                    Some(c) => quadratic_term(&jet, g, model, &c.conserved_at(&p, i))?,
                    None => g.zeros(),
                };
                let mut rhs: Profile = (0..g.len())
                    .map(|j| {
                        -(dt_m[j] + g.nodes[j][2] * dx_m[j] - quad[j]) / jet.m[j].sqrt()
                    })
                    .collect();
                let l = operator(&p)?;
                let total = g.norm(&rhs);
                let (clean, d) = project_out(&l.basis, &mut rhs, g);
                removed = removed.max(d * total.max(1e-8 * g.norm(&l.basis.sqrt_m)));
                largest = largest.max(total);
                values.push(solve_l_inverse(&l, &clean, g)?);
            }
            let worst = removed / largest.max(1e-300);
            if worst > 1e-6 {
                return Err(Error::Inconsistent(format!(
                    "projection defect {worst:.3e} of the order-2 source"
                )));
            }
            Ok(MicroField {
                values,
                defect: worst,
            })
        }
        _ => Err(Error::Missing(format!(
            "microscopic part of order {k} (only orders 1 and 2 are built)"
        ))),
    }
}

/// Remove the null-space component; returns the cleaned profile and the
/// relative size of what was removed.
pub fn project_out(basis: &NullBasis, rhs: &mut Profile, g: &VelocityGrid) -> (Profile, f64) {
    // Sources that vanish up to round-off carry no information about the
    // defect, so the norm is floored at a small multiple of |sqrt(M)|.
    let floor = 1e-8 * g.norm(&basis.sqrt_m);
    let total = g.norm(rhs).max(floor);
    let p = basis.project(rhs, g);
    let removed = g.norm(&p);
    let clean = rhs.iter().zip(&p).map(|(a, b)| a - b).collect();
    (clean, removed / total)
}

/// Wall data entering the slip formula at order `k`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SlipInputs {
    pub rho0: f64,
    pub t0: f64,
    /// `u^b_{k,3}` at the wall.
    pub ub3: f64,
    /// `Psi_k(0)` and `Theta_k(0)` of the kinetic layer lift.
    pub psi: f64,
    pub theta: f64,
    /// Outgoing half flux `int_{v3<0} |v3| (f_{k-1} + f^b_{k-1} + f^bb_{k-1}) sqrt(M0) dv`.
    pub outgoing_flux_prev: f64,
}

/// Slip value `u_{k,3}(t, 0)`, literal evaluation of the boundary formula.
///
/// With `f_0 = sqrt(M0)` the outgoing flux at `k = 1` is
/// `rho0 sqrt(T0) / sqrt(2 pi)`, giving `sqrt(T0)(rho0 sqrt(T0) + 1)`.
pub fn slip_value(k: usize, s: &SlipInputs) -> Result<f64> {
    if !(s.rho0 > 0.0 && s.t0 > 0.0) {
        return Err(Error::Params(format!(
            "wall state rho0 = {}, T0 = {}",
            s.rho0, s.t0
        )));
    }
    let st = s.t0.sqrt();
    if k == 1 {
        return Ok(st * (s.rho0 * st + 1.0));
    }
    let sq2pi = (2.0 * std::f64::consts::PI).sqrt();
    Ok(-s.ub3 - s.t0 * (s.psi + 5.0 * s.t0 * s.theta)
        + (s.rho0 * st + 1.0) / s.rho0 * sq2pi * s.outgoing_flux_prev)
}

/// Slip value that makes the wall mass flux of the order-1 kinetic layer
/// vanish: `sqrt(T0)(rho0 sqrt(T0) - 1)`.
pub fn slip_value_flux_consistent(rho0: f64, t0: f64) -> f64 {
    let st = t0.sqrt();
    st * (rho0 * st - 1.0)
}

/// Columnar text checkpoint `time x3 rho u1 u2 u3 T`.
pub fn write_trajectory(path: &Path, traj: &EulerTrajectory, every: usize) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "time,x3,rho,u1,u2,u3,T")?;
    for (n, s) in traj.states.iter().enumerate() {
        if n % every.max(1) != 0 && n + 1 != traj.states.len() {
            continue;
        }
        for i in 0..s.len() {
            writeln!(
                w,
                "{:.10e},{:.10e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                traj.times[n],
                i as f64 * s.dx,
                s.rho[i],
                s.u[0][i],
                s.u[1][i],
                s.u[2][i],
                s.t[i]
            )?;
        }
    }
    Ok(())
}
