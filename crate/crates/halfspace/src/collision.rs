//! Collision models: BGK relaxation, a discrete hard-sphere bilinear
//! operator, and the linearized operator with its null space.

use crate::error::{Error, Result};
use crate::velocity::{
    burnett, maxwellian, moments, raw_moments, MaxwellianParams, NullBasis, Profile,
    VelocityGrid,
};
use nalgebra::{DMatrix, DVector, Matrix5, Vector5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollisionKind {
    Bgk,
    HardSphere,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionModel {
    pub kind: CollisionKind,
    pub gamma0: f64,
    /// `b(theta) = b_const |cos theta|`
    pub b_const: f64,
    pub bgk_nu_scale: f64,
    pub angular_n: usize,
}

impl Default for CollisionModel {
    fn default() -> Self {
        CollisionModel {
            kind: CollisionKind::Bgk,
            gamma0: 0.0,
            // integral of b over the unit sphere equals one
            b_const: 1.0 / (2.0 * std::f64::consts::PI),
            bgk_nu_scale: 1.0,
            angular_n: 4,
        }
    }
}

impl CollisionModel {
    pub fn bgk(scale: f64) -> Self {
        CollisionModel {
            bgk_nu_scale: scale,
            ..Default::default()
        }
    }

    pub fn hard_sphere(gamma0: f64, angular_n: usize) -> Self {
        CollisionModel {
            kind: CollisionKind::HardSphere,
            gamma0,
            angular_n,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma0) {
            return Err(Error::Params(format!("gamma0 = {}", self.gamma0)));
        }
        if !(self.b_const > 0.0) {
            return Err(Error::Params(format!("b_const = {}", self.b_const)));
        }
        if !(self.bgk_nu_scale > 0.0) {
            return Err(Error::Params(format!(
                "bgk_nu_scale = {}",
                self.bgk_nu_scale
            )));
        }
        Ok(())
    }
}

/// `nu (M[F] - F)` with `M[F]` the corrected Maxwellian at the moments of `F`.
pub fn bgk_collision(f: &[f64], g: &VelocityGrid, model: &CollisionModel) -> Result<Profile> {
    let (_, p) = moments(f, g)?;
    let m = maxwellian(&p, g, true)?;
    let nu = model.bgk_nu_scale * p.rho;
    Ok(m.iter().zip(f).map(|(a, b)| nu * (a - b)).collect())
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = z;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = 0.5 * (1.0 - z);
        w[i] = 1.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Hemisphere quadrature in the frame of the relative velocity:
/// `(mu, cos phi, sin phi, weight)` with `weight` already including
/// `b_const |mu|` and the factor two for the opposite hemisphere.
fn angular_rule(model: &CollisionModel) -> Vec<(f64, f64, f64, f64)> {
    let n = model.angular_n.max(1);
    let (mu, wmu) = gauss_legendre_unit(n);
    let nphi = 2 * n;
    let dphi = 2.0 * std::f64::consts::PI / nphi as f64;
    let mut out = Vec::with_capacity(n * nphi);
    for a in 0..n {
        for b in 0..nphi {
            let phi = (b as f64 + 0.5) * dphi;
            out.push((
                mu[a],
                phi.cos(),
                phi.sin(),
                2.0 * model.b_const * mu[a] * wmu[a] * dphi,
            ));
        }
    }
    out
}

fn orthonormal_frame(d: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    let a = if d[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let dot = a[0] * d[0] + a[1] * d[1] + a[2] * d[2];
    let mut e1 = [a[0] - dot * d[0], a[1] - dot * d[1], a[2] - dot * d[2]];
    let n1 = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    for x in e1.iter_mut() {
        *x /= n1;
    }
    let e2 = [
        d[1] * e1[2] - d[2] * e1[1],
        d[2] * e1[0] - d[0] * e1[2],
        d[0] * e1[1] - d[1] * e1[0],
    ];
    (e1, e2)
}

/// Trilinear weights of an off-lattice point; `None` outside the lattice hull.
fn trilinear(g: &VelocityGrid, x: &[f64; 3]) -> Option<[(usize, f64); 8]> {
    let n = g.n;
    let mut i0 = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let s = (x[a] + g.v_max) / g.h - 0.5;
        if !(s >= 0.0 && s <= (n - 1) as f64) {
            return None;
        }
        let mut fl = s.floor() as usize;
        if fl == n - 1 {
            fl = n - 2;
        }
        i0[a] = fl;
        t[a] = s - fl as f64;
    }
    let mut out = [(0usize, 0.0); 8];
    let mut c = 0;
    for di in 0..2 {
        for dj in 0..2 {
            for dk in 0..2 {
                let wx = if di == 0 { 1.0 - t[0] } else { t[0] };
                let wy = if dj == 0 { 1.0 - t[1] } else { t[1] };
                let wz = if dk == 0 { 1.0 - t[2] } else { t[2] };
                out[c] = (g.index(i0[0] + di, i0[1] + dj, i0[2] + dk), wx * wy * wz);
                c += 1;
            }
        }
    }
    Some(out)
}

/// Visit every retained collision `(i = u, j = v, weights at v', weights at u', kernel)`.
/// Collisions whose post-collision pair leaves the lattice hull are dropped.
fn for_each_collision<Fn_: FnMut(usize, usize, &[(usize, f64); 8], &[(usize, f64); 8], f64)>(
    g: &VelocityGrid,
    model: &CollisionModel,
    mut visit: Fn_,
) {
    let rule = angular_rule(model);
    for j in 0..g.len() {
        let v = g.nodes[j];
        for i in 0..g.len() {
            if i == j {
                continue;
            }
            let u = g.nodes[i];
            let rel = [v[0] - u[0], v[1] - u[1], v[2] - u[2]];
            let gm = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
            let d = [rel[0] / gm, rel[1] / gm, rel[2] / gm];
            let (e1, e2) = orthonormal_frame(&d);
            let kin = gm.powf(model.gamma0);
            for &(mu, cp, sp, w) in &rule {
                let s = (1.0 - mu * mu).max(0.0).sqrt();
                let om = [
                    mu * d[0] + s * (cp * e1[0] + sp * e2[0]),
                    mu * d[1] + s * (cp * e1[1] + sp * e2[1]),
                    mu * d[2] + s * (cp * e1[2] + sp * e2[2]),
                ];
                let gw = gm * mu;
                let vp = [v[0] - gw * om[0], v[1] - gw * om[1], v[2] - gw * om[2]];
                let up = [u[0] + gw * om[0], u[1] + gw * om[1], u[2] + gw * om[2]];
                if let (Some(rv), Some(ru)) = (trilinear(g, &vp), trilinear(g, &up)) {
                    visit(i, j, &rv, &ru, kin * w);
                }
            }
        }
    }
}

fn reference_weight(g: &VelocityGrid) -> Profile {
    let t = (g.v_max / 6.0).powi(2);
    g.nodes
        .iter()
        .map(|v| (-(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) / (2.0 * t)).exp())
        .collect()
}

/// Remove the conserved moments of `q` with a Gaussian-weighted
/// polynomial correction.
pub fn remove_moments(q: &mut [f64], g: &VelocityGrid, weight: &[f64]) {
    let mut jac = Matrix5::<f64>::zeros();
    for ((v, w), x) in g.nodes.iter().zip(&g.weights).zip(weight) {
        let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        let phi = [1.0, v[0], v[1], v[2], 0.5 * v2];
        let psi = [1.0, v[0], v[1], v[2], v2];
        for r in 0..5 {
            for c in 0..5 {
                jac[(r, c)] += w * x * phi[r] * psi[c];
            }
        }
    }
    let m = raw_moments(q, g).as_array();
    if let Some(a) = jac.lu().solve(&Vector5::from_fn(|k, _| m[k])) {
        for ((v, x), qv) in g.nodes.iter().zip(weight).zip(q.iter_mut()) {
            let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            *qv -= x * (a[0] + a[1] * v[0] + a[2] * v[1] + a[3] * v[2] + a[4] * v2);
        }
    }
}

/// Discrete `B(F, G)` with `F` at the collision partner `u` and `G` at `v`.
///
/// Post-collision values come from trilinear interpolation of `F / M_ref`
/// times the exact `M_ref`, so `B(M_ref, M_ref)` vanishes to round-off.
/// `M_ref` is the Maxwellian at the moments of `F + G` (unit Maxwellian
/// if those are degenerate).
pub fn hardsphere_bilinear(
    f: &[f64],
    gf: &[f64],
    g: &VelocityGrid,
    model: &CollisionModel,
    angular_n: usize,
) -> Result<Profile> {
    let sum: Profile = f.iter().zip(gf).map(|(a, b)| 0.5 * (a + b)).collect();
    let pref = match moments(&sum, g) {
        Ok((_, p)) => p,
        Err(_) => MaxwellianParams::rest(1.0, (g.v_max / 6.0).powi(2)),
    };
    let mref = maxwellian(&pref, g, true)
        .or_else(|_| maxwellian(&MaxwellianParams::rest(1.0, (g.v_max / 6.0).powi(2)), g, true))?;
    hardsphere_bilinear_ref(f, gf, g, model, angular_n, &mref)
}

/// [`hardsphere_bilinear`] with an explicit positive reference profile.
pub fn hardsphere_bilinear_ref(
    f: &[f64],
    gf: &[f64],
    g: &VelocityGrid,
    model: &CollisionModel,
    angular_n: usize,
    mref: &[f64],
) -> Result<Profile> {
    if g.n > 16 {
        return Err(Error::CostGuard(format!("n_per_axis = {} > 16", g.n)));
    }
    if angular_n < 4 {
        return Err(Error::CostGuard(format!("angular_n = {angular_n} < 4")));
    }
    model.validate()?;
    let m = CollisionModel {
        angular_n,
        ..*model
    };
    let rf: Profile = f.iter().zip(mref).map(|(a, b)| a / b).collect();
    let rg: Profile = gf.iter().zip(mref).map(|(a, b)| a / b).collect();
    let interp = |r: &[(usize, f64); 8], x: &[f64]| -> f64 { r.iter().map(|&(k, w)| w * x[k]).sum() };
    let vol = g.cell_volume();
    let mut q = g.zeros();
    for_each_collision(g, &m, |i, j, rv, ru, k| {
        // M_ref(u') M_ref(v') = M_ref(u) M_ref(v) for an exact collision
        let mm = mref[i] * mref[j];
        let gain = mm * interp(ru, &rf) * interp(rv, &rg);
        let loss = f[i] * gf[j];
        q[j] += vol * k * (gain - loss);
    });
    remove_moments(&mut q, g, &reference_weight(g));
    Ok(q)
}

/// Collision frequency per node.
pub fn collision_frequency(
    p: &MaxwellianParams,
    g: &VelocityGrid,
    model: &CollisionModel,
) -> Result<Profile> {
    p.validate()?;
    match model.kind {
        CollisionKind::Bgk => Ok(vec![model.bgk_nu_scale * p.rho; g.len()]),
        CollisionKind::HardSphere => {
            let m = maxwellian(p, g, true)?;
            // angular integral of b is one by the chosen normalisation
            let ang: f64 = angular_rule(model).iter().map(|r| r.3).sum();
            Ok(g.nodes
                .iter()
                .map(|v| {
                    g.nodes
                        .iter()
                        .zip(&m)
                        .zip(&g.weights)
                        .map(|((u, mu), w)| {
                            let d2 = (0..3).map(|a| (v[a] - u[a]).powi(2)).sum::<f64>();
                            w * mu * d2.sqrt().powf(model.gamma0)
                        })
                        .sum::<f64>()
                        * ang
                })
                .collect())
        }
    }
}

#[derive(Clone, Debug)]
pub enum OperatorRepr {
    /// `nu (I - P)`
    Bgk { nu: f64 },
    Dense(DMatrix<f64>),
}

/// Linearized collision operator at a frozen Maxwellian.
#[derive(Clone, Debug)]
pub struct LinearizedOperator {
    pub base: MaxwellianParams,
    pub model: CollisionModel,
    pub basis: NullBasis,
    pub nu_profile: Profile,
    pub repr: OperatorRepr,
    /// Smallest Rayleigh quotient `<Lg,g>/|(I-P)g|_nu^2` over random probes.
    pub c0_est: f64,
    /// Same quantity from an eigensolve on the complement (small grids only).
    pub c0_eig: Option<f64>,
    /// Relative Frobenius defect `|A - A^T| / |A|` of the strong-form
    /// (column by column) hard-sphere matrix; diagnostic only.
    pub sym_defect: f64,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl LinearizedOperator {
    pub fn len(&self) -> usize {
        self.nu_profile.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu_profile.is_empty()
    }

    pub fn apply(&self, f: &[f64], g: &VelocityGrid) -> Profile {
        match &self.repr {
            OperatorRepr::Bgk { nu } => self
                .basis
                .complement(f, g)
                .into_iter()
                .map(|x| nu * x)
                .collect(),
            OperatorRepr::Dense(a) => {
                let x = DVector::from_column_slice(f);
                (a * x).as_slice().to_vec()
            }
        }
    }

    /// Dense matrix (materialized for BGK).
    pub fn matrix(&self, g: &VelocityGrid) -> DMatrix<f64> {
        match &self.repr {
            OperatorRepr::Dense(a) => a.clone(),
            OperatorRepr::Bgk { nu } => {
                let n = g.len();
                let mut a = DMatrix::<f64>::identity(n, n) * *nu;
                for e in &self.basis.vecs {
                    for c in 0..n {
                        let s = nu * e[c] * g.weights[c];
                        for r in 0..n {
                            a[(r, c)] -= e[r] * s;
                        }
                    }
                }
                a
            }
        }
    }

    /// Smallest eigenvalue of the operator on the complement of the
    /// null space, in the plain discrete L2 metric.
    pub fn spectral_gap(&self, g: &VelocityGrid) -> f64 {
        match &self.repr {
            OperatorRepr::Bgk { nu } => *nu,
            OperatorRepr::Dense(_) => {
                let a = self.matrix(g);
                let n = a.nrows();
                let mut b = a.clone();
                // shift null directions far up so they are not the minimum
                let big = a.norm() + 1.0;
                for e in &self.basis.vecs {
                    for c in 0..n {
                        let s = big * e[c] * g.weights[c];
                        for r in 0..n {
                            b[(r, c)] += e[r] * s;
                        }
                    }
                }
                let ev = nalgebra::SymmetricEigen::new(b).eigenvalues;
                ev.iter().cloned().fold(f64::INFINITY, f64::min)
            }
        }
    }
}

fn p_matrix(basis: &NullBasis, g: &VelocityGrid) -> DMatrix<f64> {
    let n = g.len();
    let mut p = DMatrix::<f64>::zeros(n, n);
    for e in &basis.vecs {
        for c in 0..n {
            let s = e[c] * g.weights[c];
            for r in 0..n {
                p[(r, c)] += e[r] * s;
            }
        }
    }
    p
}

fn rayleigh_probe(
    apply: &dyn Fn(&[f64]) -> Profile,
    basis: &NullBasis,
    nu: &[f64],
    g: &VelocityGrid,
    probes: usize,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut best = f64::INFINITY;
    for _ in 0..probes {
        let x: Profile = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = basis.complement(&x, g);
        let lh = apply(&x);
        let num = g.dot(&lh, &x);
        let den: f64 = h
            .iter()
            .zip(nu)
            .zip(&g.weights)
            .map(|((a, n), w)| w * n * a * a)
            .sum();
        if den > 0.0 {
            best = best.min(num / den);
        }
    }
    best
}

/// Generalized eigenvalue `min <Ah,h>/<nu h,h>` over the complement.
fn rayleigh_eig(a: &DMatrix<f64>, basis: &NullBasis, nu: &[f64], g: &VelocityGrid) -> f64 {
    let n = a.nrows();
    let p = p_matrix(basis, g);
    let q = DMatrix::<f64>::identity(n, n) - &p;
    let d = DMatrix::<f64>::from_diagonal(&DVector::from_column_slice(nu));
    let bmat = &q * d * &q + &p;
    let amat = &q * a * &q;
    let chol = match nalgebra::Cholesky::new(bmat) {
        Some(c) => c,
        None => return f64::NAN,
    };
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::<f64>::identity(n, n));
    let c = &linv * amat * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(c)
        .eigenvalues
        .iter()
        .cloned()
        .collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev[5]
}

/// Assemble the linearized operator at `p`.
pub fn assemble_linearized(
    p: &MaxwellianParams,
    g: &VelocityGrid,
    model: &CollisionModel,
) -> Result<LinearizedOperator> {
    p.validate()?;
    model.validate()?;
    let basis = NullBasis::new(p, g)?;
    let nu = collision_frequency(p, g, model)?;
    match model.kind {
        CollisionKind::Bgk => {
            let nuc = model.bgk_nu_scale * p.rho;
            let apply = |x: &[f64]| -> Profile {
                basis
                    .complement(x, g)
                    .into_iter()
                    .map(|y| nuc * y)
                    .collect()
            };
            let c0 = rayleigh_probe(&apply, &basis, &nu, g, 200);
            Ok(LinearizedOperator {
                base: *p,
                model: *model,
                basis,
                nu_profile: nu,
                repr: OperatorRepr::Bgk { nu: nuc },
                c0_est: c0,
                c0_eig: None,
                sym_defect: 0.0,
                chol: None,
            })
        }
        CollisionKind::HardSphere => {
            if g.n > 16 {
                return Err(Error::CostGuard(format!("n_per_axis = {} > 16", g.n)));
            }
            let (var, strong) = assemble_hardsphere_raw(g, model, &basis)?;
            let defect =
                (&strong - strong.transpose()).norm() / strong.norm().max(1e-300);
            finish_dense(p, g, model, basis, nu, var, defect)
        }
    }
}

/// Returns the variational matrix and the raw strong-form matrix.
///
/// The variational matrix discretizes the quadratic form
/// `<Lg, g> = 1/4 sum K M(u) M(v) (phi(u') + phi(v') - phi(u) - phi(v))^2`
/// with `phi = g / sqrt(M)`, so it is symmetric and positive semidefinite
/// by construction. The strong-form matrix applies the interpolated
/// bilinear operator column by column and is only kept to report its
/// symmetry defect.
fn assemble_hardsphere_raw(
    g: &VelocityGrid,
    model: &CollisionModel,
    basis: &NullBasis,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = g.len();
    let sm = &basis.sqrt_m;
    let m: Vec<f64> = sm.iter().map(|s| s * s).collect();
    let vol = g.cell_volume();
    let mut var = DMatrix::<f64>::zeros(n, n);
    let mut strong = DMatrix::<f64>::zeros(n, n);
    let mut idx: Vec<usize> = Vec::with_capacity(18);
    let mut val: Vec<f64> = Vec::with_capacity(18);
    for_each_collision(g, model, |i, j, rv, ru, k| {
        let c = vol * vol * k * m[i] * m[j];
        idx.clear();
        val.clear();
        for &(b, w) in rv.iter().chain(ru.iter()) {
            idx.push(b);
            val.push(w);
        }
        idx.push(i);
        val.push(-1.0);
        idx.push(j);
        val.push(-1.0);
        for (p, &r) in idx.iter().enumerate() {
            let cr = 0.25 * c * val[p];
            for (q, &col) in idx.iter().enumerate() {
                var[(r, col)] += cr * val[q];
            }
        }
        // strong form row j: -(B(M, sqrt(M) g) + B(sqrt(M) g, M)) in phi
        for (p, &col) in idx.iter().enumerate() {
            strong[(j, col)] -= c * val[p];
        }
    });
    for r in 0..n {
        for col in 0..n {
            let s = 1.0 / (vol * sm[r] * sm[col]);
            var[(r, col)] *= s;
            strong[(r, col)] *= s;
        }
    }
    Ok((var, strong))
}

fn finish_dense(
    p: &MaxwellianParams,
    g: &VelocityGrid,
    model: &CollisionModel,
    basis: NullBasis,
    nu: Profile,
    raw: DMatrix<f64>,
    defect: f64,
) -> Result<LinearizedOperator> {
    let n = g.len();
    let sym = (&raw + raw.transpose()) * 0.5;
    let q = DMatrix::<f64>::identity(n, n) - p_matrix(&basis, g);
    let a = &q * sym * &q;
    let a = (&a + a.transpose()) * 0.5;
    dense_operator(p, g, model, basis, nu, a, defect)
}

fn dense_operator(
    p: &MaxwellianParams,
    g: &VelocityGrid,
    model: &CollisionModel,
    basis: NullBasis,
    nu: Profile,
    a: DMatrix<f64>,
    defect: f64,
) -> Result<LinearizedOperator> {
    let n = g.len();
    let apply = |x: &[f64]| -> Profile { (&a * DVector::from_column_slice(x)).as_slice().to_vec() };
    let c0 = rayleigh_probe(&apply, &basis, &nu, g, 200);
    let c0_eig = if n <= 512 {
        Some(rayleigh_eig(&a, &basis, &nu, g))
    } else {
        None
    };
    let chol = nalgebra::Cholesky::new(&a + p_matrix(&basis, g));
    if chol.is_none() {
        return Err(Error::Assembly(
            "operator is not positive on the complement of the null space".into(),
        ));
    }
    Ok(LinearizedOperator {
        base: *p,
        model: *model,
        basis,
        nu_profile: nu,
        repr: OperatorRepr::Dense(a),
        c0_est: c0,
        c0_eig,
        sym_defect: defect,
        chol,
    })
}

/// Unique solution in the complement of the null space.
pub fn solve_l_inverse(l: &LinearizedOperator, rhs: &[f64], g: &VelocityGrid) -> Result<Profile> {
    let c = l.basis.coefficients(rhs, g);
    let pn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rn = g.norm(rhs);
    if pn > 1e-8 * rn.max(1e-300) && pn > 1e-300 {
        return Err(Error::Solvability { moments: c.to_vec() });
    }
    if rn == 0.0 {
        return Ok(g.zeros());
    }
    match &l.repr {
        OperatorRepr::Bgk { nu } => Ok(l
            .basis
            .complement(rhs, g)
            .into_iter()
            .map(|x| x / nu)
            .collect()),
        OperatorRepr::Dense(_) => {
            let chol = l
                .chol
                .as_ref()
                .ok_or_else(|| Error::Assembly("missing factorization".into()))?;
            let x = chol.solve(&DVector::from_column_slice(rhs));
            Ok(l.basis.complement(x.as_slice(), g))
        }
    }
}

/// Green-Kubo viscosity and conductivity:
/// `mu = T <A31, L^-1 A31>`, `kappa = T <B3, L^-1 B3>`.
pub fn transport_coefficients(l: &LinearizedOperator, g: &VelocityGrid) -> Result<(f64, f64)> {
    let p = &l.base;
    let b = burnett(p, g)?;
    let a31 = l.basis.complement(&b.a[2][0], g);
    let b3 = l.basis.complement(&b.b[2], g);
    let x = solve_l_inverse(l, &a31, g)?;
    let y = solve_l_inverse(l, &b3, g)?;
    Ok((p.t * g.dot(&a31, &x), p.t * g.dot(&b3, &y)))
}

/// Key identifying a cached operator.
pub fn cache_key(p: &MaxwellianParams, g: &VelocityGrid, model: &CollisionModel) -> String {
    let desc = cache_header_fields(p, g, model);
    let mut h = Sha256::new();
    h.update(desc.as_bytes());
    let d = h.finalize();
    d.iter().take(12).map(|b| format!("{b:02x}")).collect()
}

fn cache_header_fields(p: &MaxwellianParams, g: &VelocityGrid, model: &CollisionModel) -> String {
    format!(
        "model={:?} gamma0={:e} b={:e} nu_scale={:e} ang={} n={} vmax={:e} rho={:e} u={:e},{:e},{:e} T={:e}",
        model.kind,
        model.gamma0,
        model.b_const,
        model.bgk_nu_scale,
        model.angular_n,
        g.n,
        g.v_max,
        p.rho,
        p.u[0],
        p.u[1],
        p.u[2],
        p.t
    )
}

const CACHE_MAGIC: &str = "HSOPCACHE v1";

/// Dense operator file: one text header line, then little-endian f64
/// column-major data.
pub fn save_operator(path: &Path, l: &LinearizedOperator, g: &VelocityGrid) -> Result<()> {
    let a = l.matrix(g);
    let mut bytes = Vec::with_capacity(a.len() * 8);
    for x in a.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let mut h = Sha256::new();
    h.update(&bytes);
    let sum: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let header = format!(
        "{CACHE_MAGIC} {} dim={} c0={:e} defect={:e} sha256={}\n",
        cache_header_fields(&l.base, g, &l.model),
        a.nrows(),
        l.c0_est,
        l.sym_defect,
        sum
    );
    let mut f = std::fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_operator(
    path: &Path,
    p: &MaxwellianParams,
    g: &VelocityGrid,
    model: &CollisionModel,
) -> Result<LinearizedOperator> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let nl = buf
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Io("cache header missing".into()))?;
    let header = std::str::from_utf8(&buf[..nl]).map_err(|e| Error::Io(e.to_string()))?;
    if !header.starts_with(CACHE_MAGIC) {
        return Err(Error::Io("not an operator cache file".into()));
    }
    if !header.contains(&cache_header_fields(p, g, model)) {
        return Err(Error::Io("cache header does not match request".into()));
    }
    let field = |name: &str| -> Option<&str> {
        header
            .split_whitespace()
            .find_map(|t| t.strip_prefix(&format!("{name}=")))
    };
    let dim: usize = field("dim")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Io("bad dim".into()))?;
    let data = &buf[nl + 1..];
    if data.len() != dim * dim * 8 {
        return Err(Error::Io("truncated cache body".into()));
    }
    let mut h = Sha256::new();
    h.update(data);
    let sum: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    if field("sha256") != Some(sum.as_str()) {
        return Err(Error::Io("cache checksum mismatch".into()));
    }
    let vals: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let a = DMatrix::from_column_slice(dim, dim, &vals);
    let basis = NullBasis::new(p, g)?;
    let nu = collision_frequency(p, g, model)?;
    let defect: f64 = field("defect").and_then(|s| s.parse().ok()).unwrap_or(0.0);
    match model.kind {
        CollisionKind::Bgk => assemble_linearized(p, g, model),
        CollisionKind::HardSphere => dense_operator(p, g, model, basis, nu, a, defect),
    }
}

/// Assemble through an on-disk cache directory.
pub fn assemble_cached(
    dir: &Path,
    p: &MaxwellianParams,
    g: &VelocityGrid,
    model: &CollisionModel,
) -> Result<LinearizedOperator> {
    if model.kind == CollisionKind::Bgk {
        return assemble_linearized(p, g, model);
    }
    std::fs::create_dir_all(dir)?;
    let path: PathBuf = dir.join(format!("op-{}.bin", cache_key(p, g, model)));
    if path.exists() {
        if let Ok(l) = load_operator(&path, p, g, model) {
            return Ok(l);
        }
    }
    let l = assemble_linearized(p, g, model)?;
    save_operator(&path, &l, g)?;
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::build_grid;

    fn max_abs(x: &[f64]) -> f64 {
        x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre_unit(4);
        let s: f64 = w.iter().sum();
        assert!((s - 1.0).abs() < 1e-14);
        let m7: f64 = x.iter().zip(&w).map(|(a, b)| a.powi(7) * b).sum();
        assert!((m7 - 1.0 / 8.0).abs() < 1e-14);
    }

    #[test]
    fn angular_rule_is_normalized() {
        let s: f64 = angular_rule(&CollisionModel::default())
            .iter()
            .map(|r| r.3)
            .sum();
        assert!((s - 1.0).abs() < 1e-13, "{s}");
    }

    #[test]
    fn bgk_equilibrium_and_conservation() {
        let g = build_grid(12, 6.0).unwrap();
        let p = MaxwellianParams::new(1.2, [0.1, 0.0, -0.2], 0.9);
        let m = maxwellian(&p, &g, true).unwrap();
        let q = bgk_collision(&m, &g, &CollisionModel::bgk(1.0)).unwrap();
        assert!(max_abs(&q) < 1e-12);
        let f: Profile = m
            .iter()
            .zip(&g.nodes)
            .map(|(x, v)| x * (1.0 + 0.2 * v[0] * v[2] + 0.05 * v[1].powi(3)))
            .collect();
        let q = bgk_collision(&f, &g, &CollisionModel::bgk(1.0)).unwrap();
        let mo = raw_moments(&q, &g).as_array();
        assert!(mo.iter().all(|x| x.abs() < 1e-12), "{mo:?}");
    }

    #[test]
    fn bgk_linearization_oracle() {
        let g = build_grid(12, 6.0).unwrap();
        let p = MaxwellianParams::rest(1.0, 1.0);
        let m = maxwellian(&p, &g, true).unwrap();
        let nb = NullBasis::new(&p, &g).unwrap();
        let sm: Profile = m.iter().map(|x| x.sqrt()).collect();
        let pert: Profile = g
            .nodes
            .iter()
            .zip(&sm)
            .map(|(v, s)| v[0] * v[1] * s)
            .collect();
        let pert = nb.complement(&pert, &g);
        for &amp in &[1e-3, 1e-4] {
            let f: Profile = m.iter().zip(&pert).zip(&sm).map(|((a, b), s)| a + amp * b * s).collect();
            let q = bgk_collision(&f, &g, &CollisionModel::bgk(1.0)).unwrap();
            let err: f64 = q
                .iter()
                .zip(&pert)
                .zip(&sm)
                .map(|((q, b), s)| (q / s + amp * b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err < 10.0 * amp * amp, "{amp} {err}");
        }
    }

    #[test]
    fn bgk_operator_gap_and_null_space() {
        let g = build_grid(8, 5.0).unwrap();
        let p = MaxwellianParams::rest(1.0, 1.0);
        let l = assemble_linearized(&p, &g, &CollisionModel::bgk(1.0)).unwrap();
        for e in &l.basis.vecs {
            assert!(g.norm(&l.apply(e, &g)) < 1e-8);
        }
        assert!((l.c0_est - 1.0).abs() < 1e-10);
        assert!((l.spectral_gap(&g) - 1.0).abs() < 1e-10);
        let a = l.matrix(&g);
        assert!((&a - a.transpose()).norm() < 1e-10 * a.norm());
    }

    #[test]
    fn bgk_transport_coefficients() {
        // wide, fine lattice: sixth-moment truncation and aliasing below 1e-8
        let g = build_grid(32, 9.0).unwrap();
        for &(rho, t) in &[(1.0, 1.0), (2.0, 0.8)] {
            let p = MaxwellianParams::rest(rho, t);
            let l = assemble_linearized(&p, &g, &CollisionModel::bgk(1.0)).unwrap();
            let (mu, kappa) = transport_coefficients(&l, &g).unwrap();
            // closed-form BGK values: mu = rho T / nu, kappa = 5/2 mu
            assert!((mu - t).abs() < 1e-8, "mu {mu}");
            assert!((kappa / mu - 2.5).abs() < 1e-8, "ratio {}", kappa / mu);
        }
    }

    #[test]
    fn inverse_round_trip_and_gate() {
        let g = build_grid(8, 5.0).unwrap();
        let p = MaxwellianParams::rest(1.0, 1.0);
        let l = assemble_linearized(&p, &g, &CollisionModel::bgk(1.3)).unwrap();
        assert_eq!(solve_l_inverse(&l, &g.zeros(), &g).unwrap(), g.zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q: Profile = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = l.basis.complement(&q, &g);
        let r = l.apply(&q, &g);
        let back = solve_l_inverse(&l, &r, &g).unwrap();
        let d: f64 = back.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-8);
        let err = solve_l_inverse(&l, &l.basis.sqrt_m, &g);
        assert!(matches!(err, Err(Error::Solvability { .. })));
    }

    #[test]
    fn hardsphere_frequency_gamma0_constant() {
        let g = build_grid(8, 5.0).unwrap();
        let p = MaxwellianParams::rest(1.7, 1.0);
        let nu = collision_frequency(&p, &g, &CollisionModel::hard_sphere(0.0, 4)).unwrap();
        for x in &nu {
            assert!((x - 1.7).abs() < 1e-10);
        }
        let p2 = MaxwellianParams::rest(3.4, 1.0);
        let nu2 = collision_frequency(&p2, &g, &CollisionModel::hard_sphere(1.0, 4)).unwrap();
        let nu1 = collision_frequency(&p, &g, &CollisionModel::hard_sphere(1.0, 4)).unwrap();
        for (a, b) in nu1.iter().zip(&nu2) {
            assert!((2.0 * a - b).abs() < 1e-10 * b);
        }
    }

    #[test]
    fn hardsphere_frequency_equivalence_gamma1() {
        let g = build_grid(8, 5.0).unwrap();
        let p = MaxwellianParams::rest(1.0, 1.0);
        let nu = collision_frequency(&p, &g, &CollisionModel::hard_sphere(1.0, 4)).unwrap();
        let ratios: Vec<f64> = nu
            .iter()
            .zip(&g.nodes)
            .map(|(n, v)| n / (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .collect();
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(0.0, f64::max);
        assert!(lo > 0.0 && hi / lo < 3.0, "{lo} {hi}");
    }

    #[test]
    fn hardsphere_conservation_and_guard() {
        let g = build_grid(6, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f: Profile = (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let model = CollisionModel::hard_sphere(1.0, 4);
        let q = hardsphere_bilinear(&f, &f, &g, &model, 4).unwrap();
        let mo = raw_moments(&q, &g).as_array();
        let scale = max_abs(&q);
        assert!(mo.iter().all(|x| x.abs() < 1e-8 * scale.max(1.0)), "{mo:?}");
        assert!(hardsphere_bilinear(&f, &f, &g, &model, 2).is_err());
        let big = build_grid(18, 4.0).unwrap();
        let fb = big.zeros();
        assert!(matches!(
            hardsphere_bilinear(&fb, &fb, &big, &model, 4),
            Err(Error::CostGuard(_))
        ));
    }

    #[test]
    fn hardsphere_symmetrized_form_swaps() {
        let g = build_grid(6, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f: Profile = (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let h: Profile = (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let model = CollisionModel::hard_sphere(0.0, 4);
        let a = hardsphere_bilinear(&f, &h, &g, &model, 4).unwrap();
        let b = hardsphere_bilinear(&h, &f, &g, &model, 4).unwrap();
        let s1: Profile = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let s2: Profile = b.iter().zip(&a).map(|(x, y)| x + y).collect();
        assert_eq!(s1, s2);
    }

    #[test]
    fn hardsphere_operator_positive_on_complement() {
        let g = build_grid(6, 4.0).unwrap();
        let p = MaxwellianParams::rest(1.0, 1.0);
        let model = CollisionModel::hard_sphere(0.0, 4);
        let l = assemble_linearized(&p, &g, &model).unwrap();
        assert!(l.c0_eig.unwrap() > 0.0);
        for e in &l.basis.vecs {
            assert!(max_abs(&l.apply(e, &g)) < 1e-10);
        }
        let a = l.matrix(&g);
        assert!((&a - a.transpose()).norm() <= 1e-12 * a.norm());
    }

    #[test]
    fn cache_round_trip() {
        let g = build_grid(4, 3.0).unwrap();
        let p = MaxwellianParams::rest(1.0, 1.0);
        let model = CollisionModel::hard_sphere(0.0, 4);
        let dir = std::env::temp_dir().join(format!("hsop-cache-{}", std::process::id()));
        let l1 = assemble_cached(&dir, &p, &g, &model).unwrap();
        let l2 = assemble_cached(&dir, &p, &g, &model).unwrap();
        assert_eq!(l1.matrix(&g), l2.matrix(&g));
        let path = dir.join(format!("op-{}.bin", cache_key(&p, &g, &model)));
        let head = std::fs::read(&path).unwrap();
        assert!(head.starts_with(CACHE_MAGIC.as_bytes()));
        std::fs::remove_dir_all(&dir).ok();
    }
}
