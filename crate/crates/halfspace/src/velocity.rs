//! Velocity lattice, Maxwellians, moments, the collision-invariant
//! projection and the Burnett functions.

use crate::error::{Error, Result};
use nalgebra::{Matrix5, Vector5};
use serde::{Deserialize, Serialize};

/// Values on the velocity lattice, one per node.
pub type Profile = Vec<f64>;

/// Uniform half-integer offset lattice on `[-v_max, v_max]^3`.
///
/// Node `(i, j, k)` is stored at `(i * n + j) * n + k`, the last index
/// running along `v3`.
#[derive(Clone, Debug)]
pub struct VelocityGrid {
    pub n: usize,
    pub v_max: f64,
    pub h: f64,
    pub axis: Vec<f64>,
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    mirror: Vec<usize>,
}

pub fn build_grid(n_per_axis: usize, v_max: f64) -> Result<VelocityGrid> {
    if n_per_axis < 4 {
        return Err(Error::Grid(format!("n_per_axis = {n_per_axis} < 4")));
    }
    if n_per_axis % 2 != 0 {
        return Err(Error::Grid(format!(
            "n_per_axis = {n_per_axis} is odd, the lattice would contain v3 = 0"
        )));
    }
    if !(v_max > 0.0 && v_max.is_finite()) {
        return Err(Error::Grid(format!("v_max = {v_max}")));
    }
    let n = n_per_axis;
    let h = 2.0 * v_max / n as f64;
    // Symmetric by construction: axis[n-1-i] == -axis[i] bit for bit.
    let axis: Vec<f64> = (0..n)
        .map(|i| {
            let s = (i as f64 + 0.5) - n as f64 / 2.0;
            s * h
        })
        .collect();
    let mut nodes = Vec::with_capacity(n * n * n);
    let mut mirror = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                nodes.push([axis[i], axis[j], axis[k]]);
                mirror.push((i * n + j) * n + (n - 1 - k));
            }
        }
    }
    let w = h * h * h;
    Ok(VelocityGrid {
        n,
        v_max,
        h,
        axis,
        weights: vec![w; nodes.len()],
        nodes,
        mirror,
    })
}

impl VelocityGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    /// Index of `(v1, v2, -v3)`.
    pub fn mirror3(&self, idx: usize) -> usize {
        self.mirror[idx]
    }

    pub fn cell_volume(&self) -> f64 {
        self.h * self.h * self.h
    }

    /// Discrete L2(dv) inner product.
    pub fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.weights)
            .map(|((x, y), w)| x * y * w)
            .sum()
    }

    pub fn norm(&self, a: &[f64]) -> f64 {
        self.dot(a, a).sqrt()
    }

    pub fn integrate(&self, a: &[f64]) -> f64 {
        a.iter().zip(&self.weights).map(|(x, w)| x * w).sum()
    }

    /// Profile reflected in `v3`.
    pub fn reflect(&self, a: &[f64]) -> Profile {
        (0..self.len()).map(|i| a[self.mirror[i]]).collect()
    }

    pub fn zeros(&self) -> Profile {
        vec![0.0; self.len()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxwellianParams {
    pub rho: f64,
    pub u: [f64; 3],
    #[serde(rename = "T")]
    pub t: f64,
}

impl MaxwellianParams {
    pub fn new(rho: f64, u: [f64; 3], t: f64) -> Self {
        MaxwellianParams { rho, u, t }
    }

    pub fn rest(rho: f64, t: f64) -> Self {
        MaxwellianParams { rho, u: [0.0; 3], t }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Params(format!("rho = {}", self.rho)));
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::Params(format!("T = {}", self.t)));
        }
        if !self.u.iter().all(|x| x.is_finite()) {
            return Err(Error::Params("non-finite u".into()));
        }
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        let u2: f64 = self.u.iter().map(|x| x * x).sum();
        0.5 * self.rho * (3.0 * self.t + u2)
    }

    /// Target conserved moments `(rho, rho u, E)`.
    pub fn conserved(&self) -> [f64; 5] {
        [
            self.rho,
            self.rho * self.u[0],
            self.rho * self.u[1],
            self.rho * self.u[2],
            self.energy(),
        ]
    }
}

/// Pointwise Maxwellian density at one velocity.
pub fn maxwellian_at(p: &MaxwellianParams, v: &[f64; 3]) -> f64 {
    let c2: f64 = (0..3).map(|i| (v[i] - p.u[i]).powi(2)).sum();
    p.rho * (2.0 * std::f64::consts::PI * p.t).powf(-1.5) * (-c2 / (2.0 * p.t)).exp()
}

/// Exponential-family coefficients `exp(l0 + l.v + l4 |v|^2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Multipliers(pub [f64; 5]);

impl Multipliers {
    pub fn continuous(p: &MaxwellianParams) -> Self {
        let u2: f64 = p.u.iter().map(|x| x * x).sum();
        let l0 = (p.rho * (2.0 * std::f64::consts::PI * p.t).powf(-1.5)).ln() - u2 / (2.0 * p.t);
        Multipliers([
            l0,
            p.u[0] / p.t,
            p.u[1] / p.t,
            p.u[2] / p.t,
            -0.5 / p.t,
        ])
    }

    pub fn eval(&self, v: &[f64; 3]) -> f64 {
        let l = &self.0;
        let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        (l[0] + l[1] * v[0] + l[2] * v[1] + l[3] * v[2] + l[4] * v2).exp()
    }

    pub fn profile(&self, g: &VelocityGrid) -> Profile {
        g.nodes.iter().map(|v| self.eval(v)).collect()
    }
}

fn moment_vector(f: &[f64], g: &VelocityGrid) -> [f64; 5] {
    let mut m = [0.0; 5];
    for ((v, w), x) in g.nodes.iter().zip(&g.weights).zip(f) {
        let a = w * x;
        m[0] += a;
        m[1] += a * v[0];
        m[2] += a * v[1];
        m[3] += a * v[2];
        m[4] += 0.5 * a * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    }
    m
}

fn moment_scales(p: &MaxwellianParams) -> [f64; 5] {
    let speed = p.t.sqrt() + p.u.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let e = p.energy();
    [p.rho, p.rho * speed, p.rho * speed, p.rho * speed, e]
}

/// Newton solve for the multipliers whose discrete moments equal those of `p`.
pub fn corrected_multipliers(p: &MaxwellianParams, g: &VelocityGrid) -> Result<Multipliers> {
    corrected_multipliers_from(p, g, Multipliers::continuous(p))
}

pub fn corrected_multipliers_from(
    p: &MaxwellianParams,
    g: &VelocityGrid,
    start: Multipliers,
) -> Result<Multipliers> {
    p.validate()?;
    let target = p.conserved();
    let scale = moment_scales(p);
    let mut lam = start;
    let defect = |m: &[f64; 5]| -> f64 {
        (0..5)
            .map(|k| ((m[k] - target[k]) / scale[k]).abs())
            .fold(0.0, f64::max)
    };
    let mut f = lam.profile(g);
    let mut m = moment_vector(&f, g);
    let mut d = defect(&m);
    for _ in 0..60 {
        if d < 2e-15 {
            break;
        }
        let mut jac = Matrix5::<f64>::zeros();
        for ((v, w), x) in g.nodes.iter().zip(&g.weights).zip(&f) {
            let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            let phi = [1.0, v[0], v[1], v[2], 0.5 * v2];
            let psi = [1.0, v[0], v[1], v[2], v2];
            let a = w * x;
            for r in 0..5 {
                for c in 0..5 {
                    jac[(r, c)] += a * phi[r] * psi[c];
                }
            }
        }
        let rhs = Vector5::from_fn(|k, _| target[k] - m[k]);
        let step = match jac.lu().solve(&rhs) {
            Some(s) => s,
            None => return Err(Error::Newton { defect: d }),
        };
        // Damped update: accept the first step length that reduces the defect.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = lam;
            for k in 0..5 {
                trial.0[k] += t * step[k];
            }
            let ft = trial.profile(g);
            let mt = moment_vector(&ft, g);
            let dt = defect(&mt);
            if dt.is_finite() && (dt < d || dt < 1e-15) {
                lam = trial;
                f = ft;
                m = mt;
                d = dt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if d < 1e-12 {
        Ok(lam)
    } else {
        Err(Error::Newton { defect: d })
    }
}

/// Maxwellian on the lattice. `corrected` enforces the discrete moments.
pub fn maxwellian(p: &MaxwellianParams, g: &VelocityGrid, corrected: bool) -> Result<Profile> {
    p.validate()?;
    if corrected {
        Ok(corrected_multipliers(p, g)?.profile(g))
    } else {
        Ok(g.nodes.iter().map(|v| maxwellian_at(p, v)).collect())
    }
}

/// Discrete conserved moments of a profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub rho: f64,
    pub momentum: [f64; 3],
    pub energy: f64,
}

impl Moments {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.rho,
            self.momentum[0],
            self.momentum[1],
            self.momentum[2],
            self.energy,
        ]
    }

    pub fn params(&self) -> Result<MaxwellianParams> {
        if !(self.rho > 0.0) {
            return Err(Error::Degenerate { rho: self.rho });
        }
        let u = [
            self.momentum[0] / self.rho,
            self.momentum[1] / self.rho,
            self.momentum[2] / self.rho,
        ];
        let u2: f64 = u.iter().map(|x| x * x).sum();
        let t = (2.0 * self.energy - self.rho * u2) / (3.0 * self.rho);
        if !(t > 0.0) {
            return Err(Error::Degenerate { rho: self.rho });
        }
        Ok(MaxwellianParams { rho: self.rho, u, t })
    }
}

/// Raw moment sums; no positivity check.
pub fn raw_moments(f: &[f64], g: &VelocityGrid) -> Moments {
    let m = moment_vector(f, g);
    Moments {
        rho: m[0],
        momentum: [m[1], m[2], m[3]],
        energy: m[4],
    }
}

pub fn moments(f: &[f64], g: &VelocityGrid) -> Result<(Moments, MaxwellianParams)> {
    let m = raw_moments(f, g);
    if !(m.rho > 0.0) {
        return Err(Error::Degenerate { rho: m.rho });
    }
    let p = m.params()?;
    Ok((m, p))
}

/// Discretely orthonormal basis of the collision invariants times `sqrt(M)`.
#[derive(Clone, Debug)]
pub struct NullBasis {
    pub vecs: [Profile; 5],
    pub sqrt_m: Profile,
}

impl NullBasis {
    /// Gram-Schmidt (two passes) of the textbook basis built on `sqrt_m`.
    pub fn from_sqrt_m(sqrt_m: Profile, p: &MaxwellianParams, g: &VelocityGrid) -> Self {
        let st = p.t.sqrt();
        let sr = p.rho.sqrt();
        let mut raw: Vec<Profile> = Vec::with_capacity(5);
        raw.push(sqrt_m.iter().map(|s| s / sr).collect());
        for i in 0..3 {
            raw.push(
                g.nodes
                    .iter()
                    .zip(&sqrt_m)
                    .map(|(v, s)| (v[i] - p.u[i]) * s / (sr * st))
                    .collect(),
            );
        }
        raw.push(
            g.nodes
                .iter()
                .zip(&sqrt_m)
                .map(|(v, s)| {
                    let c2: f64 = (0..3).map(|i| (v[i] - p.u[i]).powi(2)).sum();
                    (c2 / p.t - 3.0) * s / (6.0 * p.rho).sqrt()
                })
                .collect(),
        );
        for _pass in 0..2 {
            for k in 0..5 {
                for j in 0..k {
                    let c = g.dot(&raw[k], &raw[j]);
                    let (head, tail) = raw.split_at_mut(k);
                    for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                        *x -= c * y;
                    }
                }
                let nrm = g.norm(&raw[k]);
                for x in raw[k].iter_mut() {
                    *x /= nrm;
                }
            }
        }
        let mut it = raw.into_iter();
        let vecs = [
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        ];
        NullBasis { vecs, sqrt_m }
    }

    pub fn new(p: &MaxwellianParams, g: &VelocityGrid) -> Result<Self> {
        let m = maxwellian(p, g, true)?;
        let s = m.iter().map(|x| x.sqrt()).collect();
        Ok(Self::from_sqrt_m(s, p, g))
    }

    pub fn coefficients(&self, f: &[f64], g: &VelocityGrid) -> [f64; 5] {
        let mut c = [0.0; 5];
        for (k, e) in self.vecs.iter().enumerate() {
            c[k] = g.dot(e, f);
        }
        c
    }

    pub fn project(&self, f: &[f64], g: &VelocityGrid) -> Profile {
        let c = self.coefficients(f, g);
        let mut out = vec![0.0; f.len()];
        for (k, e) in self.vecs.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(e) {
                *o += c[k] * x;
            }
        }
        out
    }

    /// `(I - P) f`
    pub fn complement(&self, f: &[f64], g: &VelocityGrid) -> Profile {
        let p = self.project(f, g);
        f.iter().zip(&p).map(|(a, b)| a - b).collect()
    }
}

pub fn project_p(gfun: &[f64], p: &MaxwellianParams, g: &VelocityGrid) -> Result<Profile> {
    Ok(NullBasis::new(p, g)?.project(gfun, g))
}

#[derive(Clone, Debug)]
pub struct Burnett {
    pub a: [[Profile; 3]; 3],
    pub b: [Profile; 3],
}

/// Burnett functions on the corrected `sqrt(M)`, with the (tiny)
/// quadrature residue along the discrete null space removed.
pub fn burnett(p: &MaxwellianParams, g: &VelocityGrid) -> Result<Burnett> {
    let nb = NullBasis::new(p, g)?;
    let sm = nb.sqrt_m.clone();
    let st = p.t.sqrt();
    let mk_a = |i: usize, j: usize| -> Profile {
        g.nodes
            .iter()
            .zip(&sm)
            .map(|(v, s)| {
                let c = [v[0] - p.u[0], v[1] - p.u[1], v[2] - p.u[2]];
                let c2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
                let d = if i == j { c2 / (3.0 * p.t) } else { 0.0 };
                (c[i] * c[j] / p.t - d) * s
            })
            .collect::<Profile>()
    };
    let mk_b = |i: usize| -> Profile {
        g.nodes
            .iter()
            .zip(&sm)
            .map(|(v, s)| {
                let c = [v[0] - p.u[0], v[1] - p.u[1], v[2] - p.u[2]];
                let c2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
                c[i] * (c2 / p.t - 5.0) * s / (2.0 * st)
            })
            .collect::<Profile>()
    };
    let mk_a = |i: usize, j: usize| nb.complement(&mk_a(i, j), g);
    let mk_b = |i: usize| nb.complement(&mk_b(i), g);
    let a = [
        [mk_a(0, 0), mk_a(0, 1), mk_a(0, 2)],
        [mk_a(1, 0), mk_a(1, 1), mk_a(1, 2)],
        [mk_a(2, 0), mk_a(2, 1), mk_a(2, 2)],
    ];
    let b = [mk_b(0), mk_b(1), mk_b(2)];
    Ok(Burnett { a, b })
}

/// Perturbation of the conserved moments `(rho, rho u, E)` produced by a
/// perturbation `(rho1, u1, T1)` of the primitive fields around `p`.
pub fn conserved_perturbation(p: &MaxwellianParams, rho1: f64, u1: [f64; 3], t1: f64) -> [f64; 5] {
    let u2: f64 = p.u.iter().map(|x| x * x).sum();
    let uu1: f64 = (0..3).map(|i| p.u[i] * u1[i]).sum();
    [
        rho1,
        rho1 * p.u[0] + p.rho * u1[0],
        rho1 * p.u[1] + p.rho * u1[1],
        rho1 * p.u[2] + p.rho * u1[2],
        1.5 * (rho1 * p.t + p.rho * t1) + 0.5 * rho1 * u2 + p.rho * uu1,
    ]
}

/// Corrected Maxwellian together with its first and second variations
/// along perturbations of the discrete conserved moments.
///
/// With `M = exp(lambda . psi)`, `psi = (1, v, |v|^2)`, the moments are
/// `m = sum w phi M` and `dm = J dlambda`; the variations follow by
/// differentiating through `J`.
#[derive(Clone, Debug)]
pub struct MaxwellianJet {
    pub params: MaxwellianParams,
    pub m: Profile,
    jinv: Matrix5<f64>,
}

fn psi_of(v: &[f64; 3]) -> [f64; 5] {
    [1.0, v[0], v[1], v[2], v[0] * v[0] + v[1] * v[1] + v[2] * v[2]]
}

fn phi_of(v: &[f64; 3]) -> [f64; 5] {
    [1.0, v[0], v[1], v[2], 0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2])]
}

impl MaxwellianJet {
    pub fn new(p: &MaxwellianParams, g: &VelocityGrid) -> Result<Self> {
        let m = maxwellian(p, g, true)?;
        let mut jac = Matrix5::<f64>::zeros();
        for ((v, w), x) in g.nodes.iter().zip(&g.weights).zip(&m) {
            let (ph, ps) = (phi_of(v), psi_of(v));
            for r in 0..5 {
                for c in 0..5 {
                    jac[(r, c)] += w * x * ph[r] * ps[c];
                }
            }
        }
        let jinv = jac
            .try_inverse()
            .ok_or(Error::Degenerate { rho: p.rho })?;
        Ok(MaxwellianJet {
            params: *p,
            m,
            jinv,
        })
    }

    fn dlambda(&self, dm: &[f64; 5]) -> Vector5<f64> {
        self.jinv * Vector5::from_column_slice(dm)
    }

    /// `dM[dm]`
    pub fn first(&self, g: &VelocityGrid, dm: &[f64; 5]) -> Profile {
        let dl = self.dlambda(dm);
        g.nodes
            .iter()
            .zip(&self.m)
            .map(|(v, x)| {
                let ps = psi_of(v);
                x * (0..5).map(|k| ps[k] * dl[k]).sum::<f64>()
            })
            .collect()
    }

    /// `d^2M[dm, dm]`; its discrete moments vanish.
    pub fn second(&self, g: &VelocityGrid, dm: &[f64; 5]) -> Profile {
        let dl = self.dlambda(dm);
        let lin: Vec<f64> = g
            .nodes
            .iter()
            .map(|v| {
                let ps = psi_of(v);
                (0..5).map(|k| ps[k] * dl[k]).sum::<f64>()
            })
            .collect();
        let mut r = Vector5::<f64>::zeros();
        for (((v, w), x), l) in g.nodes.iter().zip(&g.weights).zip(&self.m).zip(&lin) {
            let ph = phi_of(v);
            for k in 0..5 {
                r[k] -= w * x * l * l * ph[k];
            }
        }
        let ddl = self.jinv * r;
        g.nodes
            .iter()
            .zip(&self.m)
            .zip(&lin)
            .map(|((v, x), l)| {
                let ps = psi_of(v);
                x * (l * l + (0..5).map(|k| ps[k] * ddl[k]).sum::<f64>())
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightedNormSpec {
    L2,
    L2Nu,
    /// `(1 + coord)^l` weight inside the square.
    L2Poly { l: f64 },
    /// `max |<v>^ell f / sqrt(M_M)|`
    LinfVelocity { ell: f64 },
}

/// Auxiliary per-entry data for [`weighted_norm`].
#[derive(Clone, Copy, Debug, Default)]
pub struct NormAux<'a> {
    pub weights: Option<&'a [f64]>,
    pub nu: Option<&'a [f64]>,
    pub coord: Option<&'a [f64]>,
    pub speed: Option<&'a [f64]>,
    pub sqrt_mm: Option<&'a [f64]>,
}

impl<'a> NormAux<'a> {
    pub fn weights(w: &'a [f64]) -> Self {
        NormAux {
            weights: Some(w),
            ..Default::default()
        }
    }
}

pub fn weighted_norm(f: &[f64], spec: WeightedNormSpec, aux: &NormAux) -> Result<f64> {
    let weight = |i: usize| aux.weights.map(|w| w[i]).unwrap_or(1.0);
    match spec {
        WeightedNormSpec::L2 => Ok((0..f.len())
            .map(|i| weight(i) * f[i] * f[i])
            .sum::<f64>()
            .sqrt()),
        WeightedNormSpec::L2Nu => {
            let nu = aux
                .nu
                .ok_or_else(|| Error::Missing("collision frequency profile".into()))?;
            Ok((0..f.len())
                .map(|i| weight(i) * nu[i] * f[i] * f[i])
                .sum::<f64>()
                .sqrt())
        }
        WeightedNormSpec::L2Poly { l } => {
            if l == 0.0 {
                return weighted_norm(f, WeightedNormSpec::L2, aux);
            }
            let x = aux
                .coord
                .ok_or_else(|| Error::Missing("layer coordinate".into()))?;
            Ok((0..f.len())
                .map(|i| weight(i) * (1.0 + x[i]).powf(l) * f[i] * f[i])
                .sum::<f64>()
                .sqrt())
        }
        WeightedNormSpec::LinfVelocity { ell } => {
            let s = aux
                .speed
                .ok_or_else(|| Error::Missing("speed per entry".into()))?;
            let mut best = 0.0f64;
            for i in 0..f.len() {
                let bracket = (1.0 + s[i] * s[i]).sqrt().powf(ell);
                let denom = aux.sqrt_mm.map(|m| m[i]).unwrap_or(1.0);
                best = best.max((bracket * f[i] / denom).abs());
            }
            Ok(best)
        }
    }
}

/// `|v|` per lattice node, for the velocity-weighted sup norm.
pub fn speeds(g: &VelocityGrid) -> Vec<f64> {
    g.nodes
        .iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maxwellian_jet_matches_differences() {
        let g = build_grid(12, 6.0).unwrap();
        let p = MaxwellianParams::new(1.2, [0.1, -0.2, 0.05], 0.9);
        let jet = MaxwellianJet::new(&p, &g).unwrap();
        let dm = conserved_perturbation(&p, 0.1, [0.05, 0.0, -0.1], 0.08);
        let h = 1e-3;
        let shifted = |s: f64| {
            let mut c = p.conserved();
            for k in 0..5 {
                c[k] += s * dm[k];
            }
            let q = Moments {
                rho: c[0],
                momentum: [c[1], c[2], c[3]],
                energy: c[4],
            }
            .params()
            .unwrap();
            maxwellian(&q, &g, true).unwrap()
        };
        let (fp, fm) = (shifted(h), shifted(-h));
        let d1 = jet.first(&g, &dm);
        let d2 = jet.second(&g, &dm);
        let scale = jet.m.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for i in 0..g.len() {
            let fd1 = (fp[i] - fm[i]) / (2.0 * h);
            let fd2 = (fp[i] - 2.0 * jet.m[i] + fm[i]) / (h * h);
            assert!((fd1 - d1[i]).abs() < 1e-6 * scale);
            assert!((fd2 - d2[i]).abs() < 1e-4 * scale);
        }
        let mo = raw_moments(&d2, &g).as_array();
        assert!(mo.iter().all(|x| x.abs() < 1e-12));
        let m1 = raw_moments(&d1, &g).as_array();
        for k in 0..5 {
            assert!((m1[k] - dm[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_4_weights_and_total() {
        let g = build_grid(4, 2.0).unwrap();
        assert_eq!(g.len(), 64);
        assert!(g.weights.iter().all(|&w| (w - 1.0).abs() < 1e-15));
        assert!((g.weights.iter().sum::<f64>() - 64.0).abs() < 1e-12);
    }

    #[test]
    fn grid_rejects_odd() {
        assert!(build_grid(5, 2.0).is_err());
        assert!(build_grid(2, 2.0).is_err());
        assert!(build_grid(6, -1.0).is_err());
    }

    #[test]
    fn grid_sign_flip_closure() {
        let g = build_grid(8, 6.0).unwrap();
        for v in &g.nodes {
            for axis in 0..3 {
                let mut w = *v;
                w[axis] = -w[axis];
                assert!(g.nodes.iter().any(|x| x == &w));
            }
            assert!(v[2] != 0.0);
        }
        for idx in 0..g.len() {
            let m = g.mirror3(idx);
            assert_eq!(g.nodes[m][2], -g.nodes[idx][2]);
            assert_eq!(g.nodes[m][0], g.nodes[idx][0]);
        }
    }

    #[test]
    fn maxwellian_at_origin() {
        let p = MaxwellianParams::rest(1.0, 1.0);
        let v = maxwellian_at(&p, &[0.0, 0.0, 0.0]);
        assert!((v - (2.0 * std::f64::consts::PI).powf(-1.5)).abs() < 1e-15);
        assert!((v - 0.0634936).abs() < 1e-7);
    }

    #[test]
    fn corrected_moments_exact() {
        let g = build_grid(16, 8.0).unwrap();
        let p = MaxwellianParams::new(2.0, [0.1, 0.0, 0.0], 1.5);
        let m = maxwellian(&p, &g, true).unwrap();
        let (mo, q) = moments(&m, &g).unwrap();
        assert!((mo.rho - 2.0).abs() < 1e-12 * 2.0);
        assert!((mo.momentum[0] - 0.2).abs() < 1e-12 * 2.0);
        assert!(mo.momentum[1].abs() < 1e-12 && mo.momentum[2].abs() < 1e-12);
        assert!((mo.energy - 4.51).abs() < 1e-12 * 4.51);
        assert!((q.t - 1.5).abs() < 1e-12 && (q.u[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn corrected_close_to_pointwise() {
        let g = build_grid(8, 4.0).unwrap();
        let p = MaxwellianParams::rest(1.0, 1.0);
        let a = maxwellian(&p, &g, false).unwrap();
        let b = maxwellian(&p, &g, true).unwrap();
        let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d < 1e-3, "difference {d}");
        assert!(d > 0.0);
    }

    #[test]
    fn moments_unit_and_zero() {
        let g = build_grid(16, 6.0).unwrap();
        let m = maxwellian(&MaxwellianParams::rest(1.0, 1.0), &g, true).unwrap();
        let (mo, _) = moments(&m, &g).unwrap();
        assert!((mo.rho - 1.0).abs() < 1e-12);
        assert!((mo.energy - 1.5).abs() < 1e-12);
        assert!(matches!(moments(&g.zeros(), &g), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn projection_identities() {
        let g = build_grid(8, 5.0).unwrap();
        let p = MaxwellianParams::new(1.3, [0.2, -0.1, 0.05], 0.9);
        let nb = NullBasis::new(&p, &g).unwrap();
        for e in &nb.vecs {
            let pe = nb.project(e, &g);
            let d = pe.iter().zip(e).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Profile = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Profile = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pf = nb.project(&f, &g);
        let ppf = nb.project(&pf, &g);
        let d = pf.iter().zip(&ppf).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12);
        let lhs = g.dot(&pf, &h);
        let rhs = g.dot(&f, &nb.project(&h, &g));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn burnett_orthogonal_to_invariants() {
        let g = build_grid(12, 6.0).unwrap();
        let p = MaxwellianParams::rest(1.0, 1.0);
        let b = burnett(&p, &g).unwrap();
        let nb = NullBasis::new(&p, &g).unwrap();
        // independent oracle: raw monomials 1, v, |v|^2 times sqrt(M)
        let sm = &nb.sqrt_m;
        let mons: Vec<Profile> = (0..5)
            .map(|k| {
                g.nodes
                    .iter()
                    .zip(sm)
                    .map(|(v, s)| match k {
                        0 => *s,
                        1..=3 => v[k - 1] * s,
                        _ => (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) * s,
                    })
                    .collect()
            })
            .collect();
        for i in 0..3 {
            for j in 0..3 {
                for m in &mons {
                    assert!(g.dot(&b.a[i][j], m).abs() < 1e-10);
                }
                let pa = nb.project(&b.a[i][j], &g);
                assert!(g.norm(&pa) <= 1e-10);
                assert_eq!(b.a[i][j], b.a[j][i]);
            }
            for m in &mons {
                assert!(g.dot(&b.b[i], m).abs() < 1e-10);
            }
        }
        for idx in 0..g.len() {
            let tr = b.a[0][0][idx] + b.a[1][1][idx] + b.a[2][2][idx];
            assert!(tr.abs() < 1e-14);
        }
    }

    #[test]
    fn l2_of_gaussian_matches_closed_form() {
        let g = build_grid(24, 8.0).unwrap();
        let m = maxwellian(&MaxwellianParams::rest(1.0, 1.0), &g, false).unwrap();
        let n = weighted_norm(&m, WeightedNormSpec::L2, &NormAux::weights(&g.weights)).unwrap();
        let exact = (4.0 * std::f64::consts::PI).powf(-0.75);
        assert!((n - exact).abs() < 1e-3);
        assert!((exact - 0.149).abs() < 1e-3);
    }

    #[test]
    fn norm_kinds() {
        let g = build_grid(4, 2.0).unwrap();
        let f: Profile = (0..g.len()).map(|i| i as f64 * 0.1).collect();
        let aux = NormAux::weights(&g.weights);
        let a = weighted_norm(&f, WeightedNormSpec::L2, &aux).unwrap();
        let b = weighted_norm(&f, WeightedNormSpec::L2Poly { l: 0.0 }, &aux).unwrap();
        assert_eq!(a, b);
        assert!(weighted_norm(&f, WeightedNormSpec::L2Nu, &aux).is_err());
        let s = speeds(&g);
        let z = g.zeros();
        let aux2 = NormAux {
            speed: Some(&s),
            ..aux
        };
        let r = weighted_norm(&z, WeightedNormSpec::LinfVelocity { ell: 9.0 }, &aux2).unwrap();
        assert_eq!(r, 0.0);
    }
}
