//! Viscous boundary layer in the stretched variable `zeta = x3 / sqrt(eps)`.
//!
//! Each tangential velocity component and the temperature obey a scalar
//! linear parabolic equation
//!
//! `rho0 (w_t + c(t, zeta) w_zeta + r w) = D w_zz + f`,   `w_z - R w = b` at 0,
//!
//! with drift `c = (du3/dx3 zeta + u_{1,3}) chi_sigma(zeta)`. The solver
//! lifts the Robin data, evolves the homogeneous problem with
//! Crank-Nicolson on a uniform grid with a ghost node at the wall, and adds
//! the lift back.

use crate::collision::{solve_l_inverse, CollisionModel, LinearizedOperator};
use crate::error::{Error, Result};
use crate::fluid::{project_out, symmetric_bilinear, MicroField};
use crate::numerics::{cutoff, solve_tridiagonal, tail_integral, trapezoid};
use crate::velocity::{MaxwellianJet, MaxwellianParams, Profile, VelocityGrid};

const SQ2PI: f64 = 2.506_628_274_631_000_7;

/// Robin coefficients and boundary sources for one layer order.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct RobinData {
    pub r_u: f64,
    pub r_theta: f64,
    pub b: [f64; 2],
    pub a: f64,
}

/// `(R_u, R_theta)` from the wall state and transport coefficients.
pub fn robin_coefficients(p0: &MaxwellianParams, mu: f64, kappa: f64) -> Result<(f64, f64)> {
    if !(mu > 0.0 && kappa > 0.0) {
        return Err(Error::Params(format!("mu = {mu}, kappa = {kappa}")));
    }
    p0.validate()?;
    let s = p0.rho * p0.t.sqrt();
    let r_u = s * (2.0 + s) / mu;
    let r_t = s * (2.0 * s + SQ2PI * p0.rho / 3.0 + 2.0 / 3.0) / kappa;
    Ok((r_u, r_t))
}

/// Wall traces entering the Robin sources at order `k - 1`.
///
/// Velocity profiles are `None` when unknown and empty when identically
/// zero.
#[derive(Clone, Debug, Default)]
pub struct RobinTraces {
    pub rho0: f64,
    pub t0: f64,
    pub u0: [f64; 3],
    pub mu: f64,
    pub kappa: f64,
    /// `u_{k-1,i}(0)`
    pub u_prev: Option<[f64; 2]>,
    /// `Phi_{k,i}(0)`
    pub phi_k: Option<[f64; 2]>,
    /// `u_{1,i} + u^b_{1,i}` at the wall.
    pub u1_total: Option<[f64; 2]>,
    /// `u^b_{k-1,3}(0)`
    pub ub_prev_normal: Option<f64>,
    /// `<A_{3i}, J^b_{k-2} + (I - P) f_k>`
    pub a_moment: Option<[f64; 2]>,
    /// `<B_3, (I - P) f_k + J^b_{k-2}>`
    pub b_moment: Option<f64>,
    /// `theta_1 + theta^b_1` at the wall.
    pub theta1_total: Option<f64>,
    pub theta_k: Option<f64>,
    pub psi_prev: Option<f64>,
    pub theta_prev_layer: Option<f64>,
    /// `theta_{k-1}(0)`, `rho_{k-1}(0)`, `p^b_{k-1}(0)`.
    pub theta_prev: Option<f64>,
    pub rho_prev: Option<f64>,
    pub pb_prev: Option<f64>,
    /// `(I - P)(f_{k-1} + f^b_{k-1}) + f^bb_{k-1}` at the wall.
    pub micro_prev: Option<Profile>,
    /// `f_{k-2} + f^b_{k-2} + f^bb_{k-2}` at the wall.
    pub total_prev2: Option<Profile>,
}

impl RobinTraces {
    /// Every trace present and zero.
    pub fn zeros(rho0: f64, t0: f64, mu: f64, kappa: f64) -> Self {
        RobinTraces {
            rho0,
            t0,
            u0: [0.0; 3],
            mu,
            kappa,
            u_prev: Some([0.0; 2]),
            phi_k: Some([0.0; 2]),
            u1_total: Some([0.0; 2]),
            ub_prev_normal: Some(0.0),
            a_moment: Some([0.0; 2]),
            b_moment: Some(0.0),
            theta1_total: Some(0.0),
            theta_k: Some(0.0),
            psi_prev: Some(0.0),
            theta_prev_layer: Some(0.0),
            theta_prev: Some(0.0),
            rho_prev: Some(0.0),
            pb_prev: Some(0.0),
            micro_prev: Some(Vec::new()),
            total_prev2: Some(Vec::new()),
        }
    }

    fn missing(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        macro_rules! need {
            ($($f:ident),*) => { $( if self.$f.is_none() { out.push(stringify!($f)); } )* };
        }
        need!(
            u_prev,
            phi_k,
            u1_total,
            ub_prev_normal,
            a_moment,
            b_moment,
            theta1_total,
            theta_k,
            psi_prev,
            theta_prev_layer,
            theta_prev,
            rho_prev,
            pb_prev,
            micro_prev,
            total_prev2
        );
        out
    }
}

/// `int_{v3<0} h(v) f(v) sqrt(M0) dv`; an empty `f` counts as zero.
fn lower_half(g: &VelocityGrid, sqrt_m0: &[f64], f: &[f64], h: impl Fn(&[f64; 3]) -> f64) -> f64 {
    if f.is_empty() {
        return 0.0;
    }
    (0..g.len())
        .filter(|&j| g.nodes[j][2] < 0.0)
        .map(|j| g.weights[j] * h(&g.nodes[j]) * f[j] * sqrt_m0[j])
        .sum()
}

/// Boundary sources `(Lambda_i, Lambda_theta)` of the Robin conditions for
/// the order-`k-1` layer, term by term.
pub fn robin_sources(
    k: usize,
    tr: &RobinTraces,
    g: &VelocityGrid,
    sqrt_m0: &[f64],
) -> Result<([f64; 2], f64)> {
    if k < 2 {
        return Err(Error::Params(format!("Robin sources start at k = 2, got {k}")));
    }
    let miss = tr.missing();
    if !miss.is_empty() {
        return Err(Error::Missing(miss.join(", ")));
    }
    let (rho, t, mu, kappa) = (tr.rho0, tr.t0, tr.mu, tr.kappa);
    if !(rho > 0.0 && t > 0.0 && mu > 0.0 && kappa > 0.0) {
        return Err(Error::Params("wall state and transport coefficients must be positive".into()));
    }
    let st = t.sqrt();
    let u_prev = tr.u_prev.unwrap();
    let phi = tr.phi_k.unwrap();
    let u1 = tr.u1_total.unwrap();
    let ub3 = tr.ub_prev_normal.unwrap();
    let am = tr.a_moment.unwrap();
    let micro = tr.micro_prev.as_deref().unwrap();
    let prev2 = tr.total_prev2.as_deref().unwrap();

    let mut lam = [0.0; 2];
    for i in 0..2 {
        let flux = lower_half(g, sqrt_m0, micro, |v| (v[i] - tr.u0[i]) * v[2]);
        lam[i] = rho * st * u_prev[i] / mu
            + (rho * t * t * phi[i] + rho * u1[i] * ub3 + t * am[i]) / mu
            - SQ2PI / mu * flux;
    }

    let c = 0.5 + 1.5 * t - 2.0 * rho * t.powf(1.5);
    let psi = tr.psi_prev.unwrap();
    let big_theta_prev = tr.theta_prev_layer.unwrap();
    let energy_flux = lower_half(g, sqrt_m0, micro, |v| {
        let w2: f64 = (0..3).map(|d| (v[d] - tr.u0[d]).powi(2)).sum();
        v[2] * (w2 - 4.0 * rho * t.powf(1.5))
    });
    let mass_flux = lower_half(g, sqrt_m0, prev2, |v| v[2]);
    let lam_t = 2.0 * t.powf(1.5) / kappa * tr.b_moment.unwrap()
        + 5.0 / (3.0 * kappa) * rho * tr.theta1_total.unwrap() * ub3
        + rho * t / kappa * (10.0 * t * t * tr.theta_k.unwrap() - c * (psi + 5.0 * t * big_theta_prev))
        + rho * st / kappa
            * ((2.0 / 3.0 * rho * st + SQ2PI / 2.0 * rho + 2.0) * tr.theta_prev.unwrap()
                - 4.0 * (st - 1.0 / rho) * (t * tr.rho_prev.unwrap() + tr.pb_prev.unwrap()))
        - SQ2PI / kappa * energy_flux
        + SQ2PI / kappa * (rho * st + 1.0) * c * mass_flux;
    Ok((lam, lam_t))
}

/// Uniform layer grid on `[0, zmax]` with `nz` cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerGrid {
    pub zmax: f64,
    pub nz: usize,
}

impl LayerGrid {
    pub fn new(zmax: f64, nz: usize) -> Result<Self> {
        if !(zmax > 0.0) || nz < 8 {
            return Err(Error::Grid(format!("layer grid zmax = {zmax}, nz = {nz}")));
        }
        Ok(LayerGrid { zmax, nz })
    }

    pub fn dz(&self) -> f64 {
        self.zmax / self.nz as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.nz).map(|j| j as f64 * self.dz()).collect()
    }

    /// `chi_sigma(zeta) = chi(sigma zeta)` with `3 / sigma = zmax`.
    pub fn chi_sigma(&self, z: f64) -> f64 {
        cutoff(3.0 * z / self.zmax)
    }
}

/// Lift `(1/R + 2 zeta) s chi(zeta)` satisfying `w' - R w = s` at the wall.
pub fn lift_profile(r: f64, s: f64, zeta: &[f64]) -> Result<Vec<f64>> {
    if !(r > 0.0) {
        return Err(Error::Params(format!("Robin coefficient {r} must be positive")));
    }
    let w: Vec<f64> = zeta.iter().map(|&z| (1.0 / r + 2.0 * z) * s * cutoff(z)).collect();
    if zeta.len() >= 3 {
        let h1 = zeta[1] - zeta[0];
        let h2 = zeta[2] - zeta[0];
        // second-order one-sided derivative on possibly uneven spacing
        let d = -(h1 + h2) / (h1 * h2) * w[0] + h2 / (h1 * (h2 - h1)) * w[1]
            - h1 / (h2 * (h2 - h1)) * w[2];
        let res = (d - r * w[0] - s).abs();
        if res > 1e-6 * (1.0 + s.abs()) {
            return Err(Error::Resolution(format!(
                "Robin identity of the lift off by {res:.3e}"
            )));
        }
    }
    Ok(w)
}

/// Lifted profiles `(u_b1, u_b2, theta_a)`.
pub fn lift_boundary(rd: &RobinData, zeta: &[f64]) -> Result<[Vec<f64>; 3]> {
    Ok([
        lift_profile(rd.r_u, rd.b[0], zeta)?,
        lift_profile(rd.r_u, rd.b[1], zeta)?,
        lift_profile(rd.r_theta, rd.a, zeta)?,
    ])
}

/// Coefficients of one scalar layer equation at a given time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerCoefficients {
    pub rho0: f64,
    /// `mu` for velocity, `(2/5) kappa` for temperature.
    pub diffusion: f64,
    /// `d u3 / d x3` at the wall.
    pub drift_slope: f64,
    /// `u_{1,3}` at the wall.
    pub drift0: f64,
    /// zeroth-order coefficient, e.g. `(2/3) div u` for temperature.
    pub reaction: f64,
}

/// Data of one scalar layer problem.
pub struct ScalarLayerProblem<'a> {
    pub coeffs: &'a dyn Fn(f64) -> LayerCoefficients,
    /// `(R, s)` with `w' - R w = s` at the wall.
    pub robin: &'a dyn Fn(f64) -> (f64, f64),
    pub source: &'a dyn Fn(f64, f64) -> f64,
    pub init: Vec<f64>,
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
    /// far-field tolerance relative to the profile maximum
    pub far_tol: f64,
}

/// Stored layer snapshots.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerHistory {
    pub zeta: Vec<f64>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl LayerHistory {
    /// Linear interpolation in time.
    pub fn at_time(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.values[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1].clone();
        }
        let i = crate::numerics::locate(&self.times, t);
        let s = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        self.values[i]
            .iter()
            .zip(&self.values[i + 1])
            .map(|(a, b)| (1.0 - s) * a + s * b)
            .collect()
    }

    /// Centred time derivative (one-sided at the ends).
    pub fn time_derivative(&self, n: usize) -> Vec<f64> {
        let m = self.times.len();
        if m < 2 {
            return vec![0.0; self.zeta.len()];
        }
        let (a, b) = if n == 0 {
            (0, 1)
        } else if n + 1 >= m {
            (m - 2, m - 1)
        } else {
            (n - 1, n + 1)
        };
        let dt = self.times[b] - self.times[a];
        self.values[b]
            .iter()
            .zip(&self.values[a])
            .map(|(x, y)| (x - y) / dt)
            .collect()
    }
}

/// Tridiagonal rows of the discrete operator `L w = d w'' - c w' - r w`
/// on the unknowns `0..nz` (the node at `zmax` is pinned to zero), with the
/// homogeneous ghost `w_{-1} = w_1 - 2 dz R w_0`.
struct Rows {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

fn layer_rows(grid: &LayerGrid, zeta: &[f64], co: &LayerCoefficients, r: f64) -> Rows {
    let n = grid.nz;
    let dz = grid.dz();
    let d = co.diffusion / co.rho0;
    let mut rows = Rows {
        a: vec![0.0; n],
        b: vec![0.0; n],
        c: vec![0.0; n],
    };
    for j in 0..n {
        let z = zeta[j];
        let drift = (co.drift_slope * z + co.drift0) * grid.chi_sigma(z);
        let lo = d / (dz * dz) + drift / (2.0 * dz);
        let hi = d / (dz * dz) - drift / (2.0 * dz);
        rows.b[j] = -2.0 * d / (dz * dz) - co.reaction;
        if j == 0 {
            // fold the ghost into the diagonal and the super-diagonal
            rows.c[0] = hi + lo;
            rows.b[0] -= lo * 2.0 * dz * r;
        } else {
            rows.a[j] = lo;
            rows.c[j] = hi;
        }
    }
    if n > 0 {
        rows.c[n - 1] = 0.0;
    }
    rows
}

fn apply_rows(rows: &Rows, w: &[f64]) -> Vec<f64> {
    let n = rows.b.len();
    (0..n)
        .map(|j| {
            rows.b[j] * w[j]
                + if j > 0 { rows.a[j] * w[j - 1] } else { 0.0 }
                + if j + 1 < n { rows.c[j] * w[j + 1] } else { 0.0 }
        })
        .collect()
}

/// The continuous operator applied to the lift, on the grid including the
/// exact ghost value of the lift.
fn lift_operator(grid: &LayerGrid, zeta: &[f64], co: &LayerCoefficients, r: f64, s: f64) -> Vec<f64> {
    let dz = grid.dz();
    let d = co.diffusion / co.rho0;
    let lift = |z: f64| (1.0 / r + 2.0 * z) * s * cutoff(z.max(0.0));
    (0..grid.nz)
        .map(|j| {
            let z = zeta[j];
            let (wm, w0, wp) = (
                if j == 0 { (1.0 / r - 2.0 * dz) * s } else { lift(z - dz) },
                lift(z),
                lift(z + dz),
            );
            let drift = (co.drift_slope * z + co.drift0) * grid.chi_sigma(z);
            d * (wp - 2.0 * w0 + wm) / (dz * dz) - drift * (wp - wm) / (2.0 * dz) - co.reaction * w0
        })
        .collect()
}

/// Solve one scalar layer equation, storing every `save_every`-th step.
pub fn solve_scalar_layer(
    grid: &LayerGrid,
    prob: &ScalarLayerProblem,
    save_every: usize,
) -> Result<LayerHistory> {
    let zeta = grid.nodes();
    let n = grid.nz;
    if prob.init.len() != n + 1 {
        return Err(Error::Grid(format!(
            "initial layer profile has {} entries, grid has {}",
            prob.init.len(),
            n + 1
        )));
    }
    if !(prob.dt > 0.0) || prob.t_end < prob.t0 {
        return Err(Error::Params(format!("layer time step {} on [{}, {}]", prob.dt, prob.t0, prob.t_end)));
    }
    let steps = ((prob.t_end - prob.t0) / prob.dt).round().max(0.0) as usize;
    let steps = steps.max(if prob.t_end > prob.t0 { 1 } else { 0 });
    let dt = if steps > 0 {
        (prob.t_end - prob.t0) / steps as f64
    } else {
        0.0
    };
    let dz = grid.dz();

    let lift_at = |t: f64| -> Result<(f64, f64, Vec<f64>)> {
        let (r, s) = (prob.robin)(t);
        Ok((r, s, lift_profile(r, s, &zeta)?))
    };
    let rhs_at = |t: f64| -> Result<(LayerCoefficients, f64, Vec<f64>, Vec<f64>)> {
        let co = (prob.coeffs)(t);
        if !(co.rho0 > 0.0 && co.diffusion > 0.0) {
            return Err(Error::Params(format!("layer coefficients {co:?}")));
        }
        for &z in &zeta {
            let drift = (co.drift_slope * z + co.drift0) * grid.chi_sigma(z);
            if drift.abs() * dz > 2.0 * co.diffusion / co.rho0 {
                return Err(Error::Cfl(format!(
                    "cell Peclet number {:.3} above 2 at zeta = {z:.3}",
                    drift.abs() * dz * co.rho0 / co.diffusion
                )));
            }
        }
        let (r, s, l) = lift_at(t)?;
        let lw = lift_operator(grid, &zeta, &co, r, s);
        let f: Vec<f64> = (0..n)
            .map(|j| (prob.source)(t, zeta[j]) / co.rho0 + lw[j])
            .collect();
        Ok((co, r, f, l))
    };

    let (mut co, mut r, mut f, mut lift) = rhs_at(prob.t0)?;
    let mut w: Vec<f64> = (0..n)
        .map(|j| (prob.init[j] - lift[j]) * grid.chi_sigma(zeta[j]))
        .collect();
    let mut hist = LayerHistory {
        zeta: zeta.clone(),
        times: vec![prob.t0],
        values: vec![prob.init.clone()],
    };
    // theta-scheme substep from `t` to `t + h` with implicit weight `th`
    let substep = |w: &[f64],
                   now: (&LayerCoefficients, f64, &[f64], &[f64]),
                   t1: f64,
                   h: f64,
                   th: f64|
     -> Result<(Vec<f64>, (LayerCoefficients, f64, Vec<f64>, Vec<f64>))> {
        let (co, r, f, lift) = now;
        let (co1, r1, f1, lift1) = rhs_at(t1)?;
        let lw = apply_rows(&layer_rows(grid, &zeta, co, r), w);
        let next = layer_rows(grid, &zeta, &co1, r1);
        let d: Vec<f64> = (0..n)
            .map(|j| {
                w[j] + (1.0 - th) * h * lw[j] + h * ((1.0 - th) * f[j] + th * f1[j])
                    - (lift1[j] - lift[j])
            })
            .collect();
        let a: Vec<f64> = next.a.iter().map(|x| -th * h * x).collect();
        let b: Vec<f64> = next.b.iter().map(|x| 1.0 - th * h * x).collect();
        let c: Vec<f64> = next.c.iter().map(|x| -th * h * x).collect();
        Ok((solve_tridiagonal(&a, &b, &c, &d), (co1, r1, f1, lift1)))
    };
    for step in 0..steps {
        let t = prob.t0 + step as f64 * dt;
        let t1 = t + dt;
        let (wn, (co1, r1, f1, lift1)) = if step == 0 {
            // two backward Euler half steps damp the stiff start-up modes
            let (wh, mid) = substep(&w, (&co, r, &f, &lift), t + 0.5 * dt, 0.5 * dt, 1.0)?;
            substep(&wh, (&mid.0, mid.1, &mid.2, &mid.3), t1, 0.5 * dt, 1.0)?
        } else {
            substep(&w, (&co, r, &f, &lift), t1, dt, 0.5)?
        };
        w = wn;
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::BlowUp { t: t1 });
        }
        co = co1;
        r = r1;
        f = f1;
        lift = lift1;
        if (step + 1) % save_every.max(1) == 0 || step + 1 == steps {
            let mut full: Vec<f64> = (0..n).map(|j| w[j] + lift[j]).collect();
            full.push(0.0);
            hist.times.push(t1);
            hist.values.push(full);
        }
    }
    let last = hist.values.last().unwrap();
    let peak = last.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tail_start = (0.9 * n as f64) as usize;
    let tail = last[tail_start..].iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 && tail > prob.far_tol * peak {
        return Err(Error::Resolution(format!(
            "far-field value {tail:.3e} exceeds {:.1e} of the peak {peak:.3e}",
            prob.far_tol
        )));
    }
    Ok(hist)
}

/// Layer fields at one time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerProfile {
    pub zeta: Vec<f64>,
    pub ub: [Vec<f64>; 2],
    pub theta: Vec<f64>,
    pub rho: Vec<f64>,
    pub ub3: Vec<f64>,
    pub pb: Vec<f64>,
}

impl LayerProfile {
    /// Density from `p^b = (rho0 theta + 3 T0 rho) / 3`.
    pub fn density_from_pressure(theta: &[f64], pb: &[f64], rho0: f64, t0: f64) -> Vec<f64> {
        theta
            .iter()
            .zip(pb)
            .map(|(th, p)| (3.0 * p - rho0 * th) / (3.0 * t0))
            .collect()
    }

    /// `p^b = (rho0 theta + 3 T0 rho) / 3`
    pub fn pressure(&self, rho0: f64, t0: f64) -> Vec<f64> {
        self.theta
            .iter()
            .zip(&self.rho)
            .map(|(th, r)| (rho0 * th + 3.0 * t0 * r) / 3.0)
            .collect()
    }
}

/// `u^b_{k+1,3}(zeta) = int_zeta^zmax (1/rho0) d_t rho^b_k`.
pub fn reconstruct_normal(zeta: &[f64], drho_dt: &[f64], rho0: f64) -> Vec<f64> {
    let f: Vec<f64> = drho_dt.iter().map(|x| x / rho0).collect();
    tail_integral(zeta, &f)
}

/// Inputs of the normal momentum balance for `p^b_{k+1}`.
#[derive(Clone, Debug, Default)]
pub struct PressureInputs<'a> {
    pub rho0: f64,
    pub mu: f64,
    pub drift_slope: f64,
    pub drift0: f64,
    pub ub3: Option<&'a [f64]>,
    pub dub3_dt: Option<&'a [f64]>,
    /// `<T0 A_33, J^b_{k-1}>` along the layer; `None` means zero.
    pub j_moment: Option<&'a [f64]>,
    /// `W^b_{k-1,3}`; `None` means zero.
    pub w3: Option<&'a [f64]>,
}

/// Integrate `d_zeta p^b_{k+1}` from the far field inward:
///
/// `p_z = -rho0 u_t + rho0 u3' u + (4/3) mu u'' - (4/3) rho0 ((u3' zeta + u13) u)'
///        - (T0 <A_33, J>)' + W`.
pub fn reconstruct_pressure(zeta: &[f64], inp: &PressureInputs) -> Result<Vec<f64>> {
    let n = zeta.len();
    let u = inp
        .ub3
        .ok_or_else(|| Error::Missing("u^b_{k,3} profile".into()))?;
    let ut = inp
        .dub3_dt
        .ok_or_else(|| Error::Missing("time derivative of u^b_{k,3}".into()))?;
    if u.len() != n || ut.len() != n {
        return Err(Error::Grid("pressure inputs do not match the layer grid".into()));
    }
    let flux: Vec<f64> = (0..n)
        .map(|j| (inp.drift_slope * zeta[j] + inp.drift0) * u[j])
        .collect();
    let du = derivative(zeta, u);
    let d2u = derivative(zeta, &du);
    let dflux = derivative(zeta, &flux);
    let dj = inp.j_moment.map(|j| derivative(zeta, j));
    let rhs: Vec<f64> = (0..n)
        .map(|j| {
            -inp.rho0 * ut[j] + inp.rho0 * inp.drift_slope * u[j] + 4.0 / 3.0 * inp.mu * d2u[j]
                - 4.0 / 3.0 * inp.rho0 * dflux[j]
                - dj.as_ref().map_or(0.0, |d| d[j])
                + inp.w3.map_or(0.0, |w| w[j])
        })
        .collect();
    Ok(tail_integral(zeta, &rhs).into_iter().map(|x| -x).collect())
}

/// Second-order finite-difference derivative on a (possibly uneven) grid.
pub fn derivative(x: &[f64], f: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n];
    if n < 3 {
        if n == 2 {
            let s = (f[1] - f[0]) / (x[1] - x[0]);
            d = vec![s, s];
        }
        return d;
    }
    let three = |i0: usize, at: usize| {
        let xs = [x[i0], x[i0 + 1], x[i0 + 2]];
        let w = crate::numerics::fd_weights(x[at], &xs, 1);
        (0..3).map(|j| w[1][j] * f[i0 + j]).sum::<f64>()
    };
    d[0] = three(0, 0);
    for i in 1..n - 1 {
        d[i] = three(i - 1, i);
    }
    d[n - 1] = three(n - 3, n - 1);
    d
}

/// `|f|_{L^2_l}` with weight `(1 + zeta)^l`, trapezoid rule.
pub fn weighted_layer_norm(zeta: &[f64], f: &[f64], l: f64) -> f64 {
    let g: Vec<f64> = zeta
        .iter()
        .zip(f)
        .map(|(z, x)| (1.0 + z).powf(l) * x * x)
        .collect();
    trapezoid(zeta, &g).sqrt()
}

/// Inputs of the layer microscopic part at order 2.
pub struct LayerMicroInputs<'a> {
    pub jet: &'a MaxwellianJet,
    pub zeta: &'a [f64],
    /// Conserved-moment perturbation of `P0 F^b_1` per node.
    pub mb: &'a [[f64; 5]],
    /// Conserved-moment perturbation of the interior `F_1` at the wall.
    pub m1_wall: [f64; 5],
    /// Normal derivative of the wall conserved moments (first Taylor
    /// coefficient of the local Maxwellian).
    pub m_taylor: [f64; 5],
}

/// `(I - P0) f^b_{k+1}` at every layer node.
///
/// Order 1 vanishes; order 2 inverts `L0` on
/// `-(I - P0)(v3 d_zeta P0 f^b_1) + [zeta S(M', F^b) + S(F_1, F^b) + B(F^b, F^b)] / sqrt(M0)`
/// with `S(a, b) = B(a, b) + B(b, a)`.
pub fn micro_layer_part(
    order: usize,
    inp: &LayerMicroInputs,
    g: &VelocityGrid,
    model: &CollisionModel,
    l0: &LinearizedOperator,
) -> Result<MicroField> {
    let n = inp.zeta.len();
    match order {
        0 | 1 => Ok(MicroField {
            values: vec![g.zeros(); n],
            defect: 0.0,
        }),
        2 => {
            if inp.mb.len() != n {
                return Err(Error::Grid("layer moments do not match the layer grid".into()));
            }
            let jet = inp.jet;
            let sqrt_m: Vec<f64> = jet.m.iter().map(|x| x.sqrt()).collect();
            let dmb: Vec<[f64; 5]> = {
                let cols: Vec<Vec<f64>> = (0..5)
                    .map(|c| {
                        let f: Vec<f64> = inp.mb.iter().map(|m| m[c]).collect();
                        derivative(inp.zeta, &f)
                    })
                    .collect();
                (0..n).map(|j| std::array::from_fn(|c| cols[c][j])).collect()
            };
            let mut values = Vec::with_capacity(n);
            let (mut removed, mut largest) = (0.0f64, 0.0f64);
            for j in 0..n {
                let z = inp.zeta[j];
                let mb = &inp.mb[j];
                let dz_f = jet.first(g, &dmb[j]);
                let mut transport: Profile = (0..g.len())
                    .map(|q| g.nodes[q][2] * dz_f[q] / sqrt_m[q])
                    .collect();
                transport = l0.basis.complement(&transport, g);
                let mut pair = symmetric_bilinear(jet, g, model, &inp.m1_wall, mb)?;
                let self_term = crate::fluid::quadratic_term(jet, g, model, mb)?;
                if z != 0.0 {
                    let taylor = symmetric_bilinear(jet, g, model, &inp.m_taylor, mb)?;
                    for q in 0..g.len() {
                        pair[q] += z * taylor[q];
                    }
                }
                let mut rhs: Profile = (0..g.len())
                    .map(|q| -transport[q] + (pair[q] + self_term[q]) / sqrt_m[q])
                    .collect();
                let total = g.norm(&rhs);
                let (clean, d) = project_out(&l0.basis, &mut rhs, g);
                removed = removed.max(d * total.max(1e-8 * g.norm(&sqrt_m)));
                largest = largest.max(total);
                values.push(solve_l_inverse(l0, &clean, g)?);
            }
            // relative to the largest source along the layer
            let worst = removed / largest.max(1e-300);
            if worst > 1e-6 {
                return Err(Error::Inconsistent(format!(
                    "layer source projection defect {worst:.3e}"
                )));
            }
            Ok(MicroField {
                values,
                defect: worst,
            })
        }
        _ => Err(Error::Missing(format!(
            "layer microscopic part of order {order} (only orders up to 2 are built)"
        ))),
    }
}
