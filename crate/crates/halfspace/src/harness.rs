//! Remainder norms, convergence studies and their reports.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_json;
use crate::config::Config;
use crate::direct::{run_direct, stretched_grid, wall_normal_velocity, DirectSettings, Diagnostics, KineticRun};
use crate::error::{Error, Result};
use crate::fluid::EulerTrajectory;
use crate::hierarchy::{assemble, trapezoid_weights, Bundle, Hierarchy};
use crate::numerics::{loglog_fit, LineFit};
use crate::velocity::{MaxwellianParams, Profile, VelocityGrid};

pub const REPORT_SCHEMA: u32 = 1;

/// Reference global Maxwellian `M_M` at rest with unit density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalMaxwellianSpec {
    pub t_m: f64,
}

impl GlobalMaxwellianSpec {
    /// `T_M = 0.75 max T`; requires `T_M < max T < 2 T_M` and
    /// `max T / min T < 8/3` for the lower sandwich bound.
    pub fn from_trajectory(traj: &EulerTrajectory) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for s in &traj.states {
            for t in &s.t {
                lo = lo.min(*t);
                hi = hi.max(*t);
            }
        }
        let spec = GlobalMaxwellianSpec { t_m: 0.75 * hi };
        if !(spec.t_m < hi && hi < 2.0 * spec.t_m) || hi / lo >= 8.0 / 3.0 {
            return Err(Error::Params(format!(
                "temperature range [{lo}, {hi}] admits no global Maxwellian bound"
            )));
        }
        Ok(spec)
    }

    /// `sqrt(M_M)` on the lattice (continuous formula).
    pub fn sqrt_profile(&self, g: &VelocityGrid) -> Profile {
        let p = MaxwellianParams::rest(1.0, self.t_m);
        g.nodes
            .iter()
            .map(|v| crate::velocity::maxwellian_at(&p, v).sqrt())
            .collect()
    }
}

/// `|(F - F_ref)/sqrt(M)|_2` (trapezoid in `x`, lattice weights in `v`) and
/// `max <v>^ell |F - F_ref| / sqrt(M_M)`.
pub fn remainder_norms(
    f: &[Profile],
    fref: &[Profile],
    m: &[Profile],
    x: &[f64],
    g: &VelocityGrid,
    spec: &GlobalMaxwellianSpec,
    ell: f64,
) -> Result<(f64, f64)> {
    if f.len() != x.len() || fref.len() != x.len() || m.len() != x.len() {
        return Err(Error::Grid("remainder fields do not match the grid".into()));
    }
    let wx = trapezoid_weights(x);
    let smm = spec.sqrt_profile(g);
    let weight: Vec<f64> = g
        .nodes
        .iter()
        .map(|v| (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).powf(0.5 * ell))
        .collect();
    let (mut l2, mut linf) = (0.0, 0.0f64);
    for i in 0..x.len() {
        for q in 0..g.len() {
            let d = f[i][q] - fref[i][q];
            l2 += wx[i] * g.weights[q] * d * d / m[i][q];
            linf = linf.max(weight[q] * d.abs() / smm[q]);
        }
    }
    Ok((l2.sqrt(), linf))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub eps: f64,
    pub k: usize,
    pub l2: f64,
    pub linf: f64,
    #[serde(skip)]
    pub runtime_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub k: usize,
    pub norm: String,
    pub slope: f64,
    pub stderr: f64,
    /// Norms decrease monotonically with `eps`.
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsDiagnostics {
    pub eps: f64,
    pub alpha: f64,
    pub direct: Diagnostics,
    /// `u3` extrapolated to the wall from outside the kinetic layer, over `sqrt(eps)`.
    pub wall_u3_scaled: f64,
    /// `min F / max F` of the initial datum.
    pub init_min_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub epsilons: Vec<f64>,
    pub orders: Vec<usize>,
    pub t_final: f64,
    pub t_m: f64,
    pub ell: f64,
    pub norms: Vec<NormRow>,
    pub fits: Vec<SlopeFit>,
    pub runs: Vec<EpsDiagnostics>,
    pub slip_order1: f64,
    pub kinetic_layer_rate: Vec<f64>,
}

impl ConvergenceReport {
    pub fn fit(&self, k: usize, norm: &str) -> Option<&SlopeFit> {
        self.fits.iter().find(|f| f.k == k && f.norm == norm)
    }
}

/// Least-squares slope of `log(norm)` against `log(eps)`.
pub fn fit_slope(eps: &[f64], norms: &[f64]) -> Result<LineFit> {
    if eps.len() < 2 || eps.len() != norms.len() {
        return Err(Error::Fit(format!("{} points cannot define a rate", eps.len())));
    }
    loglog_fit(eps, norms)
}

/// Spatial grid of the direct runs.
pub fn study_grid(cfg: &Config) -> Result<Vec<f64>> {
    let eps_min = cfg.study.epsilons.iter().cloned().fold(f64::INFINITY, f64::min);
    stretched_grid(
        cfg.euler.xmax,
        cfg.study.cells,
        eps_min / cfg.study.wall_cells_per_eps,
        cfg.study.stretch_max,
    )
}

/// Wall Maxwellian of the Euler solution, linear in time between stored steps.
pub fn wall_state(traj: &EulerTrajectory, t: f64) -> MaxwellianParams {
    let s = (t / traj.dt).clamp(0.0, (traj.states.len() - 1) as f64);
    let i = (s.floor() as usize).min(traj.states.len().saturating_sub(2));
    let a = s - i as f64;
    let (p, q) = (traj.states[i].params(0), traj.states[(i + 1).min(traj.states.len() - 1)].params(0));
    let mix = |x: f64, y: f64| (1.0 - a) * x + a * y;
    MaxwellianParams::new(mix(p.rho, q.rho), [mix(p.u[0], q.u[0]), mix(p.u[1], q.u[1]), 0.0], mix(p.t, q.t))
}

/// Build the hierarchy to the largest order the study needs.
pub fn build_bundle(cfg: &Config, g: &VelocityGrid) -> Result<Bundle> {
    let setup = cfg.hierarchy_setup()?;
    let order = cfg.study.orders.iter().chain([&cfg.study.init_order]).cloned().max().unwrap_or(0);
    let mut h = Hierarchy::new(&setup, g)?;
    h.build(order)?;
    Ok(h.bundle)
}

/// One direct run from the well-prepared datum.
pub fn direct_run(cfg: &Config, g: &VelocityGrid, bundle: &Bundle, x: &[f64], eps: f64) -> Result<(KineticRun, f64)> {
    let init = assemble(bundle, g, x, 0.0, eps, cfg.study.init_order)?;
    let traj = bundle.euler()?;
    let set = DirectSettings {
        eps,
        model: cfg.model(),
        alpha: cfg.alpha(eps),
        diffuse: cfg.knudsen.diffuse,
        t_final: cfg.study.t_final,
        cfl: cfg.study.cfl,
    };
    let run = run_direct(&set, g, x, init.f, &|t| Ok(wall_state(traj, t)), &[cfg.study.t_final])?;
    Ok((run, init.min_ratio))
}

/// Direct runs for every `eps`, remainder norms against each truncation
/// and log-log slopes.
pub fn convergence_study(cfg: &Config, log: &mut dyn FnMut(&str)) -> Result<(ConvergenceReport, Vec<NormRow>)> {
    check_eps(cfg)?;
    let g = cfg.grid()?;
    let t0 = Instant::now();
    let bundle = build_bundle(cfg, &g)?;
    log(&format!("hierarchy built in {:.1} s", t0.elapsed().as_secs_f64()));
    study_with_bundle(cfg, &g, &bundle, log)
}

fn check_eps(cfg: &Config) -> Result<()> {
    let n = cfg.study.epsilons.len();
    if n < 3 {
        return Err(Error::Config(format!("a study needs at least three eps values, got {n}")));
    }
    Ok(())
}

/// Study on a prebuilt bundle holding at least the requested orders.
pub fn study_with_bundle(
    cfg: &Config,
    g: &VelocityGrid,
    bundle: &Bundle,
    log: &mut dyn FnMut(&str),
) -> Result<(ConvergenceReport, Vec<NormRow>)> {
    check_eps(cfg)?;
    let eps_list = &cfg.study.epsilons;
    let traj = bundle.euler()?;
    let spec = GlobalMaxwellianSpec::from_trajectory(traj)?;
    let x = study_grid(cfg)?;
    let t_final = cfg.study.t_final;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &eps in eps_list {
        let start = Instant::now();
        let (run, init_min) = direct_run(cfg, g, bundle, &x, eps).map_err(|e| e.at(0, "direct run"))?;
        let f = &run.snapshots[0];
        let elapsed = start.elapsed().as_secs_f64();
        for &k in &cfg.study.orders {
            let r = assemble(bundle, g, &x, t_final, eps, k)?;
            let (l2, linf) = remainder_norms(f, &r.f, &r.m, &x, g, &spec, cfg.study.ell)?;
            rows.push(NormRow {
                eps,
                k,
                l2,
                linf,
                runtime_s: elapsed,
            });
            log(&format!("eps {eps:.4} K {k}: L2 {l2:.4e} Linf {linf:.4e}"));
        }
        let (a, b) = (10.0 * eps, 10.0 * eps + 0.1);
        let u3 = wall_normal_velocity(&x, f, g, a, b)?;
        runs.push(EpsDiagnostics {
            eps,
            alpha: cfg.alpha(eps),
            direct: run.diag,
            wall_u3_scaled: u3 / eps.sqrt(),
            init_min_ratio: init_min,
        });
        log(&format!("eps {eps:.4}: direct run {elapsed:.1} s, {} steps", run.diag.steps));
    }
    let mut fits = Vec::new();
    for &k in &cfg.study.orders {
        for norm in ["L2", "Linf"] {
            let sel: Vec<&NormRow> = rows.iter().filter(|r| r.k == k).collect();
            let e: Vec<f64> = sel.iter().map(|r| r.eps).collect();
            let y: Vec<f64> = sel.iter().map(|r| if norm == "L2" { r.l2 } else { r.linf }).collect();
            let fit = fit_slope(&e, &y)?;
            let monotone = y.windows(2).all(|w| w[1] < w[0]);
            fits.push(SlopeFit {
                k,
                norm: norm.into(),
                slope: fit.slope,
                stderr: fit.slope_stderr,
                monotone,
            });
        }
    }
    let o1 = bundle.orders.first();
    let top = cfg.study.orders.iter().chain([&cfg.study.init_order]).cloned().max().unwrap_or(0);
    let report = ConvergenceReport {
        schema_version: REPORT_SCHEMA,
        config_hash: cfg.hash(),
        epsilons: eps_list.clone(),
        orders: cfg.study.orders.clone(),
        t_final,
        t_m: spec.t_m,
        ell: cfg.study.ell,
        norms: rows.clone(),
        fits,
        runs,
        slip_order1: o1.and_then(|o| o.slip.last().copied()).unwrap_or(0.0) + 0.0,
        kinetic_layer_rate: bundle
            .orders
            .iter()
            .take(top)
            .filter_map(|o| o.knudsen.as_ref().and_then(|k| k.rate.last().copied()))
            .collect(),
    };
    Ok((report, rows))
}

/// `report.json` and `norms.csv`.
pub fn write_study(dir: &Path, report: &ConvergenceReport, rows: &[NormRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    let mut w = csv::Writer::from_path(dir.join("norms.csv")).map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(["eps", "K", "L2", "Linf", "runtime_s"]).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.eps.to_string(),
            r.k.to_string(),
            format!("{:e}", r.l2),
            format!("{:e}", r.linf),
            format!("{:.3}", r.runtime_s),
        ])
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::{build_grid, maxwellian, weighted_norm, NormAux, WeightedNormSpec};

    #[test]
    fn synthetic_slope_is_one_half() {
        let f = fit_slope(&[0.04, 0.01, 0.0025], &[0.2, 0.1, 0.05]).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        assert!(f.slope_stderr < 1e-12);
        assert!(fit_slope(&[0.01], &[0.1]).is_err());
    }

    #[test]
    fn zero_and_single_node_norms() {
        let g = build_grid(6, 4.0).unwrap();
        let m = maxwellian(&MaxwellianParams::rest(1.0, 1.0), &g, true).unwrap();
        let x = vec![0.0, 0.5, 1.0];
        let ms = vec![m.clone(); 3];
        let spec = GlobalMaxwellianSpec { t_m: 0.9 };
        assert_eq!(remainder_norms(&ms, &ms, &ms, &x, &g, &spec, 9.0).unwrap(), (0.0, 0.0));
        let delta = 1e-3;
        let q = 17;
        let mut f = ms.clone();
        f[1][q] += delta * m[q].sqrt();
        let (l2, _) = remainder_norms(&f, &ms, &ms, &x, &g, &spec, 9.0).unwrap();
        // x-weight of the middle node is 0.5
        let expect = delta * (0.5 * g.cell_volume()).sqrt();
        assert!((l2 - expect).abs() < 1e-15, "{l2} vs {expect}");
    }

    #[test]
    fn l2_agrees_with_weighted_norm() {
        let g = build_grid(6, 4.0).unwrap();
        let m = maxwellian(&MaxwellianParams::rest(1.0, 1.0), &g, true).unwrap();
        let d: Profile = (0..g.len()).map(|q| 1e-3 * (q as f64).sin() * m[q]).collect();
        let f: Profile = m.iter().zip(&d).map(|(a, b)| a + b).collect();
        let x = vec![0.0, 1.0];
        let spec = GlobalMaxwellianSpec { t_m: 0.9 };
        let (l2, _) = remainder_norms(&[f.clone(), f], &[m.clone(), m.clone()], &[m.clone(), m.clone()], &x, &g, &spec, 9.0).unwrap();
        let scaled: Profile = d.iter().zip(&m).map(|(a, b)| a / b.sqrt()).collect();
        let w = weighted_norm(&scaled, WeightedNormSpec::L2, &NormAux::weights(&g.weights)).unwrap();
        assert!((l2 - w).abs() < 1e-12 * w);
    }

    #[test]
    fn global_maxwellian_bounds() {
        let c = Config::default();
        let bg = c.euler_init();
        let traj = crate::fluid::run_euler(&bg, 0.01, 0.5, 2).unwrap();
        let s = GlobalMaxwellianSpec::from_trajectory(&traj).unwrap();
        let hi = bg.t.iter().cloned().fold(0.0, f64::max);
        assert!((s.t_m - 0.75 * hi).abs() < 1e-6);
    }
}
