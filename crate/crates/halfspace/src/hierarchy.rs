//! Order-by-order construction of the expansion, its checkpoints, the
//! assembled field on a physical grid and the kinetic residual.
//!
//! Orders above one are partial: the order-2 interior term, the
//! microscopic and normal-velocity parts of the order-2 viscous layer and
//! the order-2 kinetic layer are built, the tangential and thermal fluid
//! parts of the order-2 viscous layer are not (they need order-3 boundary
//! data).

use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_field, read_json, write_field, write_json};
use crate::collision::{assemble_linearized, bgk_collision, transport_coefficients, CollisionKind, CollisionModel, LinearizedOperator};
use crate::error::{Error, Result};
use crate::expansion::{
    layer_moments, order1_datum, order2_datum, probe_robin, probe_slip, Order2Traces, RobinProbe, WallContext,
};
use crate::fluid::{corrector_sources, microscopic_part, run_euler, solve_corrector, CorrectorSource, CorrectorState, EulerTrajectory, FluidState};
use crate::knudsen::{check_solvability, solve_halfspace, Diffuse, KnudsenProblem};
use crate::numerics::{cubic_weights, fd_weights, trapezoid};
use crate::prandtl::{
    lift_profile, micro_layer_part, reconstruct_normal, solve_scalar_layer, LayerCoefficients, LayerGrid, LayerHistory,
    LayerMicroInputs, ScalarLayerProblem,
};
use crate::velocity::{conserved_perturbation, MaxwellianJet, MaxwellianParams, Profile, VelocityGrid};

pub const SCHEMA_VERSION: u32 = 1;

/// Highest order the builder supports.
pub const MAX_ORDER: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Euler,
    Corrector(usize),
    Knudsen(usize),
    Prandtl(usize),
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Euler => write!(f, "Euler"),
            Stage::Corrector(k) => write!(f, "corrector {k}"),
            Stage::Knudsen(k) => write!(f, "kinetic layer {k}"),
            Stage::Prandtl(k) => write!(f, "viscous layer {k}"),
        }
    }
}

/// Everything the builder needs besides the velocity grid.
#[derive(Clone, Debug)]
pub struct HierarchySetup {
    pub model: CollisionModel,
    pub diffuse: Diffuse,
    pub euler_init: FluidState,
    pub tau: f64,
    pub cfl: f64,
    pub n_taylor: usize,
    /// Initial fluid part of `F_1`; its wall `u3` is overwritten by the slip.
    pub corrector_init: CorrectorState,
    pub layer_grid: LayerGrid,
    pub layer_dt: f64,
    pub layer_far_tol: f64,
    pub ximax: f64,
    pub nxi: usize,
    /// Times at which kinetic layers and order-2 fields are stored; each
    /// must fall on an even stored Euler step.
    pub snapshots: Vec<f64>,
    pub config_hash: String,
}

/// Kinetic layer of one order.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct KnudsenOrder {
    /// Every datum vanished up to round-off; no solve was needed.
    pub zero: bool,
    /// Times at which the datum was formed.
    pub times: Vec<f64>,
    pub datum_norm: Vec<f64>,
    pub solvability: Vec<[f64; 4]>,
    /// Per snapshot.
    pub rate: Vec<f64>,
    pub far_ratio: Vec<f64>,
    /// Per snapshot; wall then cell centres.
    #[serde(skip)]
    pub values: Vec<Vec<Profile>>,
}

/// Terms of one order `k`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OrderTerms {
    pub k: usize,
    /// Wall value of `u_{k,3}` at every stored Euler step.
    pub slip: Vec<f64>,
    /// At every other stored Euler step.
    pub corrector: Option<Vec<CorrectorState>>,
    pub knudsen: Option<KnudsenOrder>,
    /// Robin relations for the order-`k` viscous layer, per stored step.
    pub robin: Vec<RobinProbe>,
    /// `(u^b_1, u^b_2, theta^b)`; order 1 only.
    pub layers: Option<Vec<LayerHistory>>,
    /// `u^b_{k,3}` along the layer grid, per snapshot (order 2).
    pub ub3: Vec<Vec<f64>>,
    /// `(I - P)(F_k / sqrt(M))` at the Euler nodes, per snapshot (order 2).
    #[serde(skip)]
    pub micro: Vec<Vec<Profile>>,
    /// `(I - P0) f^b_k` along the layer grid, per snapshot (order 2).
    #[serde(skip)]
    pub layer_micro: Vec<Vec<Profile>>,
}

/// Serializable result of the builder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Bundle {
    pub schema_version: u32,
    pub config_hash: String,
    pub n_vel: usize,
    pub vmax: f64,
    pub model: CollisionModel,
    pub diffuse: Diffuse,
    pub zeta: Vec<f64>,
    pub xi: Vec<f64>,
    pub snapshots: Vec<f64>,
    #[serde(skip)]
    pub euler: Option<EulerTrajectory>,
    #[serde(skip)]
    pub orders: Vec<OrderTerms>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config_hash: String,
    stages: Vec<Stage>,
    files: Vec<String>,
}

impl Bundle {
    pub fn has(&self, s: Stage) -> bool {
        let order = |k: usize| self.orders.get(k.wrapping_sub(1));
        match s {
            Stage::Euler => self.euler.is_some(),
            Stage::Corrector(k) => order(k).is_some_and(|o| o.corrector.is_some()),
            Stage::Knudsen(k) => order(k).is_some_and(|o| o.knudsen.is_some()),
            Stage::Prandtl(k) => order(k).is_some_and(|o| o.layers.is_some()),
        }
    }

    pub fn stages(&self) -> Vec<Stage> {
        let mut out = Vec::new();
        if self.has(Stage::Euler) {
            out.push(Stage::Euler);
        }
        for k in 1..=self.orders.len() {
            for s in [Stage::Corrector(k), Stage::Knudsen(k), Stage::Prandtl(k)] {
                if self.has(s) {
                    out.push(s);
                }
            }
        }
        out
    }

    /// Highest order whose interior, viscous and kinetic terms all exist.
    pub fn order(&self) -> usize {
        (1..=self.orders.len())
            .take_while(|&k| self.has(Stage::Corrector(k)) && self.has(Stage::Knudsen(k)))
            .count()
    }

    pub fn euler(&self) -> Result<&EulerTrajectory> {
        self.euler.as_ref().ok_or_else(|| Error::Missing("Euler trajectory".into()))
    }

    fn term(&self, k: usize) -> Result<&OrderTerms> {
        self.orders
            .get(k - 1)
            .ok_or_else(|| Error::Missing(format!("order {k} terms")))
    }

    fn snapshot_index(&self, t: f64) -> Option<usize> {
        self.snapshots.iter().position(|s| (s - t).abs() <= 1e-12 * (1.0 + t.abs()))
    }

    /// Write the manifest, one JSON file per order and the binary fields.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut files = vec!["bundle.json".to_string()];
        write_json(&dir.join("bundle.json"), self)?;
        if let Some(e) = &self.euler {
            write_json(&dir.join("order0.json"), e)?;
            files.push("order0.json".into());
        }
        for o in &self.orders {
            let name = format!("order{}.json", o.k);
            write_json(&dir.join(&name), o)?;
            files.push(name);
            let mut put = |kind: &str, rows: &Vec<Vec<Profile>>| -> Result<()> {
                for (s, r) in rows.iter().enumerate() {
                    let name = format!("order{}_{kind}_{s}.bin", o.k);
                    let head = serde_json::json!({"order": o.k, "kind": kind, "t": self.snapshots[s]});
                    write_field(&dir.join(&name), &head, r)?;
                    files.push(name);
                }
                Ok(())
            };
            if let Some(kn) = &o.knudsen {
                put("knudsen", &kn.values)?;
            }
            put("micro", &o.micro)?;
            put("layer_micro", &o.layer_micro)?;
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            config_hash: self.config_hash.clone(),
            stages: self.stages(),
            files,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    /// Reload a bundle written by [`Bundle::save`]; the configuration hash
    /// must match when given.
    pub fn load(dir: &Path, expect_hash: Option<&str>) -> Result<Bundle> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Io(format!("checkpoint schema {}", manifest.schema_version)));
        }
        if let Some(h) = expect_hash {
            if h != manifest.config_hash {
                return Err(Error::Config("checkpoint was written for a different configuration".into()));
            }
        }
        let mut b: Bundle = read_json(&dir.join("bundle.json"))?;
        if dir.join("order0.json").exists() {
            b.euler = Some(read_json(&dir.join("order0.json"))?);
        }
        let mut k = 1;
        while dir.join(format!("order{k}.json")).exists() {
            let mut o: OrderTerms = read_json(&dir.join(format!("order{k}.json")))?;
            let get = |kind: &str| -> Result<Vec<Vec<Profile>>> {
                let mut rows = Vec::new();
                for s in 0..b.snapshots.len() {
                    let p = dir.join(format!("order{k}_{kind}_{s}.bin"));
                    if p.exists() {
                        rows.push(read_field(&p)?.1);
                    }
                }
                Ok(rows)
            };
            if let Some(kn) = o.knudsen.as_mut() {
                kn.values = get("knudsen")?;
            }
            o.micro = get("micro")?;
            o.layer_micro = get("layer_micro")?;
            b.orders.push(o);
            k += 1;
        }
        Ok(b)
    }
}

/// Wall operators at one stored time.
pub struct WallOps {
    pub jet: MaxwellianJet,
    pub l0: LinearizedOperator,
    pub mu: f64,
    pub kappa: f64,
}

/// Stateful builder; stages must be requested in dependency order.
pub struct Hierarchy<'a> {
    setup: &'a HierarchySetup,
    g: &'a VelocityGrid,
    pub bundle: Bundle,
    wall: Vec<Rc<WallOps>>,
    /// `(I - P)(F_2 / sqrt M)` at the wall and the order-2 corrector
    /// sources, per stored step.
    micro2_wall: Vec<Profile>,
    sources2: Vec<CorrectorSource>,
    /// `f^bb_1` at the wall per stored corrector time; empty when zero.
    fbb1_wall: Vec<Profile>,
}

impl<'a> Hierarchy<'a> {
    pub fn new(setup: &'a HierarchySetup, g: &'a VelocityGrid) -> Result<Self> {
        if !(setup.tau > 0.0) {
            return Err(Error::Params(format!("final time {}", setup.tau)));
        }
        if setup.corrector_init.rho.len() != setup.euler_init.len() {
            return Err(Error::Grid("corrector initial data does not match the Euler grid".into()));
        }
        if setup.snapshots.iter().any(|t| !(0.0..=setup.tau).contains(t)) {
            return Err(Error::Params("snapshot time outside [0, tau]".into()));
        }
        let dxi = setup.ximax / setup.nxi as f64;
        let xi = std::iter::once(0.0)
            .chain((0..setup.nxi).map(|i| (i as f64 + 0.5) * dxi))
            .collect();
        Ok(Hierarchy {
            setup,
            g,
            bundle: Bundle {
                schema_version: SCHEMA_VERSION,
                config_hash: setup.config_hash.clone(),
                n_vel: g.n,
                vmax: g.v_max,
                model: setup.model,
                diffuse: setup.diffuse,
                zeta: setup.layer_grid.nodes(),
                xi,
                snapshots: setup.snapshots.clone(),
                euler: None,
                orders: Vec::new(),
            },
            wall: Vec::new(),
            micro2_wall: Vec::new(),
            sources2: Vec::new(),
            fbb1_wall: Vec::new(),
        })
    }

    fn require(&self, s: Stage, needs: Stage) -> Result<()> {
        if self.bundle.has(needs) {
            Ok(())
        } else {
            Err(Error::Dependency(format!("{s} needs {needs} first")))
        }
    }

    /// Build every stage up to order `k` in dependency order.
    pub fn build(&mut self, k: usize) -> Result<()> {
        if k > MAX_ORDER {
            return Err(Error::Params(format!(
                "truncation order {k}: orders above {MAX_ORDER} are not built"
            )));
        }
        self.build_stage(Stage::Euler)?;
        if k >= 1 {
            for s in [Stage::Corrector(1), Stage::Knudsen(1), Stage::Prandtl(1)] {
                self.build_stage(s)?;
            }
        }
        if k >= 2 {
            for s in [Stage::Corrector(2), Stage::Knudsen(2)] {
                self.build_stage(s)?;
            }
        }
        Ok(())
    }

    pub fn build_stage(&mut self, s: Stage) -> Result<()> {
        if self.bundle.has(s) {
            return Ok(());
        }
        let (k, name) = match s {
            Stage::Euler => (0, "euler"),
            Stage::Corrector(k) => (k, "corrector"),
            Stage::Knudsen(k) => (k, "kinetic layer"),
            Stage::Prandtl(k) => (k, "viscous layer"),
        };
        let r = match s {
            Stage::Euler => self.euler_stage(),
            Stage::Corrector(1) => self.corrector1(),
            Stage::Corrector(2) => {
                self.require(s, Stage::Prandtl(1))?;
                self.corrector2()
            }
            Stage::Knudsen(1) => {
                self.require(s, Stage::Corrector(1))?;
                self.knudsen1()
            }
            Stage::Knudsen(2) => {
                self.require(s, Stage::Prandtl(1))?;
                self.knudsen2()
            }
            Stage::Prandtl(k) => {
                self.require(s, Stage::Knudsen(k))?;
                if k == 1 {
                    self.prandtl1()
                } else {
                    Err(Error::Missing(format!(
                        "fluid part of the order-{k} viscous layer needs order-{} boundary data",
                        k + 1
                    )))
                }
            }
            _ => Err(Error::Params(format!("{s} is above the supported order {MAX_ORDER}"))),
        };
        r.map_err(|e| match e {
            Error::Dependency(_) => e,
            other => other.at(k, name),
        })
    }

    fn ctx(&self, n: usize) -> WallContext<'_> {
        let w = &self.wall[n];
        WallContext {
            g: self.g,
            model: &self.setup.model,
            jet: &w.jet,
            l0: &w.l0,
            diffuse: self.setup.diffuse,
        }
    }

    fn euler_stage(&mut self) -> Result<()> {
        let st = self.setup;
        let traj = run_euler(&st.euler_init, st.tau, st.cfl, st.n_taylor)?;
        for &t in &st.snapshots {
            let n = (t / traj.dt).round();
            if (n * traj.dt - t).abs() > 1e-9 * (1.0 + t) || (n as usize) % 2 == 1 {
                return Err(Error::Params(format!(
                    "snapshot t = {t} is not on the corrector time grid (step {})",
                    2.0 * traj.dt
                )));
            }
        }
        let mut wall: Vec<Rc<WallOps>> = Vec::with_capacity(traj.states.len());
        for s in &traj.states {
            let p = s.params(0);
            if let Some(prev) = wall.last() {
                if prev.jet.params == p {
                    wall.push(prev.clone());
                    continue;
                }
            }
            let jet = MaxwellianJet::new(&p, self.g)?;
            let l0 = assemble_linearized(&p, self.g, &st.model)?;
            let (mu, kappa) = transport_coefficients(&l0, self.g)?;
            wall.push(Rc::new(WallOps { jet, l0, mu, kappa }));
        }
        self.wall = wall;
        self.bundle.euler = Some(traj);
        Ok(())
    }

    fn order_mut(&mut self, k: usize) -> &mut OrderTerms {
        while self.bundle.orders.len() < k {
            let k = self.bundle.orders.len() + 1;
            self.bundle.orders.push(OrderTerms { k, ..Default::default() });
        }
        &mut self.bundle.orders[k - 1]
    }

    fn corrector1(&mut self) -> Result<()> {
        let n_steps = self.wall.len();
        if n_steps == 0 {
            return Err(Error::Dependency(format!("{} needs {} first", Stage::Corrector(1), Stage::Euler)));
        }
        let mut slip = Vec::with_capacity(n_steps);
        for n in 0..n_steps {
            // the mass condition involves only the normal velocity at order one
            slip.push(probe_slip(&self.ctx(n), &[0.0; 5])?.u13);
        }
        let traj = self.bundle.euler()?;
        let sol = solve_corrector(1, traj, &self.setup.corrector_init, &|_| Ok(None), &|n| Ok(slip[n]))?;
        let o = self.order_mut(1);
        o.slip = slip;
        o.corrector = Some(sol);
        Ok(())
    }

    /// Order-1 fluid part at stored step `n` (mean of the neighbours at odd steps).
    fn corrector_at(&self, k: usize, n: usize) -> Result<CorrectorState> {
        let c = self.bundle.term(k)?.corrector.as_ref().ok_or_else(|| Error::Missing(format!("corrector {k}")))?;
        if n % 2 == 0 {
            Ok(c[n / 2].clone())
        } else {
            let (a, b) = (&c[n / 2], &c[n / 2 + 1]);
            let mid = |x: &Vec<f64>, y: &Vec<f64>| x.iter().zip(y).map(|(p, q)| 0.5 * (p + q)).collect::<Vec<f64>>();
            Ok(CorrectorState {
                k,
                rho: mid(&a.rho, &b.rho),
                u: [mid(&a.u[0], &b.u[0]), mid(&a.u[1], &b.u[1]), mid(&a.u[2], &b.u[2])],
                t: mid(&a.t, &b.t),
            })
        }
    }

    fn snapshot_steps(&self) -> Result<Vec<usize>> {
        let dt = self.bundle.euler()?.dt;
        Ok(self.setup.snapshots.iter().map(|t| (t / dt).round() as usize).collect())
    }

    fn halfspace(&self, n: usize, bc: Profile) -> Result<crate::knudsen::HalfspaceSolution> {
        let prob = KnudsenProblem {
            l0: &self.wall[n].l0,
            ximax: self.setup.ximax,
            nxi: self.setup.nxi,
            source: Vec::new(),
            bc,
            tol: 1e-6,
        };
        solve_halfspace(&prob, self.g)
    }

    fn knudsen1(&mut self) -> Result<()> {
        let traj = self.bundle.euler()?;
        let times: Vec<f64> = (0..traj.times.len()).step_by(2).map(|n| traj.times[n]).collect();
        let mut data = Vec::with_capacity(times.len());
        let mut ko = KnudsenOrder { times: times.clone(), ..Default::default() };
        for m in 0..times.len() {
            let ctx = self.ctx(2 * m);
            let c = self.corrector_at(1, 2 * m)?;
            let m1 = c.conserved_at(&ctx.jet.params, 0);
            let bc = order1_datum(&ctx, &m1);
            ko.datum_norm.push(self.g.norm(&bc));
            ko.solvability.push(check_solvability(&bc, &ctx.jet.params, ctx.sqrt_m(), self.g));
            data.push(bc);
        }
        // data that vanish up to round-off (even wall traces) need no solve
        let scale = self.g.norm(&self.wall[0].l0.basis.sqrt_m);
        ko.zero = ko.datum_norm.iter().all(|d| *d <= 1e-12 * scale);
        let steps = self.snapshot_steps()?;
        if ko.zero {
            self.fbb1_wall.clear();
            for _ in &steps {
                ko.values.push(vec![self.g.zeros(); self.setup.nxi + 1]);
                ko.rate.push(0.0);
                ko.far_ratio.push(0.0);
            }
        } else {
            let mut walls = Vec::with_capacity(times.len());
            for (m, bc) in data.into_iter().enumerate() {
                let sol = self.halfspace(2 * m, bc)?;
                walls.push(sol.wall().clone());
                if let Some(_s) = steps.iter().position(|&n| n == 2 * m) {
                    ko.rate.push(sol.rate);
                    ko.far_ratio.push(sol.far_ratio);
                    ko.values.push(sol.values);
                }
            }
            self.fbb1_wall = walls;
        }
        self.order_mut(1).knudsen = Some(ko);
        Ok(())
    }

    fn fbb1_at(&self, n: usize) -> Option<Profile> {
        if self.fbb1_wall.is_empty() {
            return None;
        }
        if n % 2 == 0 {
            Some(self.fbb1_wall[n / 2].clone())
        } else {
            let (a, b) = (&self.fbb1_wall[n / 2], &self.fbb1_wall[n / 2 + 1]);
            Some(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect())
        }
    }

    fn prandtl1(&mut self) -> Result<()> {
        let (g, model) = (self.g, self.setup.model);
        let steps = self.snapshot_steps()?;
        let n_steps = self.wall.len();
        let mut robin = Vec::with_capacity(n_steps);
        let mut micro_snap = Vec::new();
        self.micro2_wall.clear();
        self.sources2.clear();
        for n in 0..n_steps {
            let traj = self.bundle.euler()?;
            let state = &traj.states[n];
            let c1 = self.corrector_at(1, n)?;
            let micro = microscopic_part(2, state, Some(&c1), g, &model, &|p| assemble_linearized(p, g, &model))?;
            self.sources2.push(corrector_sources(state, &micro.values, g)?);
            let ctx = self.ctx(n);
            let fbb1 = self.fbb1_at(n);
            let tr = Order2Traces {
                m1: c1.conserved_at(&ctx.jet.params, 0),
                micro2: &micro.values[0],
                fbb1: fbb1.as_deref(),
            };
            let rp = probe_robin(&ctx, &tr)?;
            if rp.coupling() > 1e-8 {
                return Err(Error::Inconsistent(format!(
                    "Robin relations couple the layer fields (relative size {:.3e})",
                    rp.coupling()
                )));
            }
            if (0..3).any(|i| !(rp.r[i][i] > 0.0)) {
                return Err(Error::Inconsistent(format!("non-dissipative Robin coefficients {:?}", rp.r)));
            }
            robin.push(rp);
            self.micro2_wall.push(micro.values[0].clone());
            if steps.contains(&n) {
                micro_snap.push(micro.values);
            }
        }
        let traj = self.bundle.euler()?;
        let times = traj.times.clone();
        let dt_e = traj.dt;
        let drift_slope: Vec<f64> = traj.traces.iter().map(|tr| tr[3][1]).collect();
        let slip = self.bundle.term(1)?.slip.clone();
        let lerp = |v: &dyn Fn(usize) -> f64, t: f64| -> f64 {
            let s = (t / dt_e).clamp(0.0, (n_steps - 1) as f64);
            let i = (s.floor() as usize).min(n_steps.saturating_sub(2));
            let a = s - i as f64;
            if n_steps == 1 {
                v(0)
            } else {
                (1.0 - a) * v(i) + a * v(i + 1)
            }
        };
        let grid = self.setup.layer_grid;
        let zeta = grid.nodes();
        let mut layers = Vec::with_capacity(3);
        for c in 0..3 {
            let wall = &self.wall;
            let coeffs = |t: f64| LayerCoefficients {
                rho0: lerp(&|n| wall[n].jet.params.rho, t),
                diffusion: if c < 2 {
                    lerp(&|n| wall[n].mu, t)
                } else {
                    0.4 * lerp(&|n| wall[n].kappa, t)
                },
                drift_slope: lerp(&|n| drift_slope[n], t),
                drift0: lerp(&|n| slip[n], t),
                // compressive heating of the temperature layer
                reaction: if c == 2 { 2.0 / 3.0 * lerp(&|n| drift_slope[n], t) } else { 0.0 },
            };
            let rob = |t: f64| (lerp(&|n| robin[n].r[c][c], t), lerp(&|n| robin[n].s[c], t));
            let (r0, s0) = rob(0.0);
            let prob = ScalarLayerProblem {
                coeffs: &coeffs,
                robin: &rob,
                source: &|_, _| 0.0,
                init: lift_profile(r0, s0, &zeta)?,
                t0: 0.0,
                t_end: *times.last().unwrap(),
                dt: self.setup.layer_dt,
                far_tol: self.setup.layer_far_tol,
            };
            layers.push(solve_scalar_layer(&grid, &prob, 1)?);
        }
        let o = self.order_mut(1);
        o.robin = robin;
        o.layers = Some(layers);
        // order-2 interior micro parts are kept for assembly
        let o2 = self.order_mut(2);
        o2.micro = micro_snap;
        Ok(())
    }

    /// Layer traces `(w, w')` at stored step `n`, with `w'` from the Robin relation.
    fn layer_traces(&self, n: usize) -> Result<[f64; 6]> {
        let o = self.bundle.term(1)?;
        let layers = o.layers.as_ref().ok_or_else(|| Error::Missing("order-1 viscous layer".into()))?;
        let t = self.bundle.euler()?.times[n];
        let w: [f64; 3] = std::array::from_fn(|c| layers[c].at_time(t)[0]);
        let rp = &o.robin[n];
        let dw: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| rp.r[i][j] * w[j]).sum::<f64>() + rp.s[i]);
        Ok([w[0], w[1], w[2], dw[0], dw[1], dw[2]])
    }

    /// `u^b_{2,3}` along the layer grid at stored step `n` from the order-1
    /// temperature layer.
    fn ub23_profile(&self, n: usize) -> Result<Vec<f64>> {
        let o = self.bundle.term(1)?;
        let layers = o.layers.as_ref().ok_or_else(|| Error::Missing("order-1 viscous layer".into()))?;
        let theta = &layers[2];
        let t = self.bundle.euler()?.times[n];
        let h = self.setup.layer_dt;
        let (t0, t1) = ((t - h).max(0.0), (t + h).min(*theta.times.last().unwrap()));
        let (a, b) = (theta.at_time(t0), theta.at_time(t1));
        let p0 = self.wall[n].jet.params;
        let drho: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| -p0.rho / (3.0 * p0.t) * (y - x) / (t1 - t0))
            .collect();
        Ok(reconstruct_normal(&theta.zeta, &drho, p0.rho))
    }

    fn corrector2(&mut self) -> Result<()> {
        let n_steps = self.wall.len();
        let mut slip = Vec::with_capacity(n_steps);
        for n in 0..n_steps {
            let x = self.layer_traces(n)?;
            let rp = &self.bundle.term(1)?.robin[n];
            slip.push(rp.u2_total(&x) - self.ub23_profile(n)?[0]);
        }
        let traj = self.bundle.euler()?;
        let init = CorrectorState::zeros(2, traj.states[0].len());
        let sources = &self.sources2;
        let sol = solve_corrector(2, traj, &init, &|n| Ok(Some(sources[n].clone())), &|n| Ok(slip[n]))?;
        let o = self.order_mut(2);
        o.slip = slip;
        o.corrector = Some(sol);
        Ok(())
    }

    fn knudsen2(&mut self) -> Result<()> {
        if !self.fbb1_wall.is_empty() {
            return Err(Error::Missing(
                "order-2 kinetic layer source for a nonzero order-1 kinetic layer".into(),
            ));
        }
        let g = self.g;
        let steps = self.snapshot_steps()?;
        let mut ko = KnudsenOrder::default();
        let mut ub3 = Vec::new();
        let mut layer_micro = Vec::new();
        let zeta = self.bundle.zeta.clone();
        for &n in &steps {
            let x6 = self.layer_traces(n)?;
            let rp = self.bundle.term(1)?.robin[n];
            let ctx = self.ctx(n);
            let c1 = self.corrector_at(1, n)?;
            let m1 = c1.conserved_at(&ctx.jet.params, 0);
            let tr = Order2Traces { m1, micro2: &self.micro2_wall[n], fbb1: None };
            let x7 = [x6[0], x6[1], x6[2], x6[3], x6[4], x6[5], rp.u2_total(&x6)];
            let bc = order2_datum(&ctx, &tr, &x7)?;
            let p0 = ctx.jet.params;
            ko.times.push(self.bundle.euler()?.times[n]);
            ko.datum_norm.push(g.norm(&bc));
            ko.solvability.push(check_solvability(&bc, &p0, ctx.sqrt_m(), g));
            let sol = self.halfspace(n, bc)?;
            ko.rate.push(sol.rate);
            ko.far_ratio.push(sol.far_ratio);
            ko.values.push(sol.values);

            // microscopic part of the order-2 viscous layer
            let layers = self.bundle.term(1)?.layers.as_ref().unwrap();
            let t = self.bundle.euler()?.times[n];
            let prof: Vec<Vec<f64>> = layers.iter().map(|l| l.at_time(t)).collect();
            let mb: Vec<[f64; 5]> = (0..zeta.len())
                .map(|j| layer_moments(&p0, [prof[0][j], prof[1][j]], prof[2][j]))
                .collect();
            let inp = LayerMicroInputs {
                jet: &self.wall[n].jet,
                zeta: &zeta,
                mb: &mb,
                m1_wall: m1,
                m_taylor: self.wall_gradient(n)?,
            };
            let lm = micro_layer_part(2, &inp, g, &self.setup.model, &self.wall[n].l0)?;
            layer_micro.push(lm.values);
            ub3.push(self.ub23_profile(n)?);
        }
        ko.zero = false;
        let o = self.order_mut(2);
        o.knudsen = Some(ko);
        o.ub3 = ub3;
        o.layer_micro = layer_micro;
        Ok(())
    }

    /// `d/dx3` of the conserved moments of the Euler state at the wall.
    fn wall_gradient(&self, n: usize) -> Result<[f64; 5]> {
        let s = &self.bundle.euler()?.states[n];
        let m = 7.min(s.len());
        let xs: Vec<f64> = (0..m).map(|i| i as f64 * s.dx).collect();
        let w = fd_weights(0.0, &xs, 1);
        let cons: Vec<[f64; 5]> = (0..m).map(|i| s.params(i).conserved()).collect();
        Ok(std::array::from_fn(|c| (0..m).map(|i| w[1][i] * cons[i][c]).sum()))
    }
}

/// Expansion evaluated on a physical grid at one time.
#[derive(Clone, Debug)]
pub struct Assembled {
    pub x: Vec<f64>,
    pub t: f64,
    pub f: Vec<Profile>,
    /// Local Maxwellian of the Euler solution.
    pub m: Vec<Profile>,
    /// `min F / max F`; the expansion need not stay positive.
    pub min_ratio: f64,
}

fn interp(idx: &[usize; 4], w: &[f64; 4], f: &[f64]) -> f64 {
    (0..4).map(|j| w[j] * f[idx[j]]).sum()
}

fn interp_rows(idx: &[usize; 4], w: &[f64; 4], rows: &[Profile]) -> Profile {
    let n = rows[idx[0]].len();
    (0..n).map(|q| (0..4).map(|j| w[j] * rows[idx[j]][q]).sum()).collect()
}

/// Cubic interpolation of layer rows at `s`; zero beyond the last node.
fn layer_rows_at(nodes: &[f64], rows: &[Profile], s: f64) -> Option<Profile> {
    if s > *nodes.last().unwrap() {
        return None;
    }
    let (idx, w) = cubic_weights(nodes, s);
    Some(interp_rows(&idx, &w, rows))
}

/// `M + sum_{k <= order} eps^{k/2} (F_k + F^b_k(x/sqrt eps) + F^bb_k(x/eps))`
/// at time `t` (a stored corrector time).
pub fn assemble(bundle: &Bundle, g: &VelocityGrid, x: &[f64], t: f64, eps: f64, order: usize) -> Result<Assembled> {
    if g.n != bundle.n_vel || g.v_max != bundle.vmax {
        return Err(Error::Grid("velocity grid differs from the bundle's".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Params(format!("eps = {eps}")));
    }
    if order > bundle.order() {
        return Err(Error::Missing(format!(
            "order {order} requested, bundle holds order {}",
            bundle.order()
        )));
    }
    let traj = bundle.euler()?;
    let nf = t / traj.dt;
    let n = nf.round() as usize;
    if (nf - n as f64).abs() > 1e-9 || n >= traj.states.len() || (order >= 1 && n % 2 == 1) {
        return Err(Error::Params(format!("t = {t} is not a stored corrector time")));
    }
    let state = &traj.states[n];
    let xe = state.x();
    if x.iter().any(|&xi| xi < 0.0 || xi > xe[xe.len() - 1] + 1e-12) {
        return Err(Error::Grid("assembly grid leaves the Euler domain".into()));
    }
    let fields = [&state.rho, &state.u[0], &state.u[1], &state.u[2], &state.t];
    let p_wall = state.params(0);
    let jet0 = MaxwellianJet::new(&p_wall, g)?;
    let sqrt_m0: Vec<f64> = jet0.m.iter().map(|v| v.sqrt()).collect();
    let se = eps.sqrt();
    let snap = bundle.snapshot_index(t);
    let need_snap = |what: &str| -> Result<usize> {
        snap.ok_or_else(|| Error::Missing(format!("{what} at t = {t} (not a snapshot time)")))
    };

    // layer profiles at t
    let layer1: Option<Vec<Vec<f64>>> = if order >= 1 {
        let o = bundle.term(1)?;
        o.layers.as_ref().map(|l| l.iter().map(|h| h.at_time(t)).collect())
    } else {
        None
    };
    let knudsen = |k: usize| -> Result<Option<&Vec<Profile>>> {
        let ko = bundle.term(k)?.knudsen.as_ref().ok_or_else(|| Error::Missing(format!("kinetic layer {k}")))?;
        if ko.zero {
            return Ok(None);
        }
        Ok(Some(&ko.values[need_snap("kinetic layer")?]))
    };
    let kn1 = if order >= 1 { knudsen(1)? } else { None };
    let (kn2, micro2, lmicro2, ub23) = if order >= 2 {
        let o = bundle.term(2)?;
        let s = need_snap("order-2 terms")?;
        (knudsen(2)?, Some(&o.micro[s]), Some(&o.layer_micro[s]), Some(&o.ub3[s]))
    } else {
        (None, None, None, None)
    };
    let corr = |k: usize| -> Result<&CorrectorState> {
        let c = bundle.term(k)?.corrector.as_ref().ok_or_else(|| Error::Missing(format!("corrector {k}")))?;
        Ok(&c[n / 2])
    };

    let mut out_f = Vec::with_capacity(x.len());
    let mut out_m = Vec::with_capacity(x.len());
    for &xi in x {
        let (idx, w) = cubic_weights(&xe, xi);
        let prim: [f64; 5] = std::array::from_fn(|c| interp(&idx, &w, fields[c]));
        let p = MaxwellianParams::new(prim[0], [prim[1], prim[2], prim[3]], prim[4]);
        let jet = MaxwellianJet::new(&p, g)?;
        let mut f = jet.m.clone();
        let mut add = |scale: f64, term: &[f64]| {
            for (a, b) in f.iter_mut().zip(term) {
                *a += scale * b;
            }
        };
        for k in 1..=order {
            let a = se.powi(k as i32);
            let c = corr(k)?;
            let ck: [f64; 4] = [
                interp(&idx, &w, &c.rho),
                interp(&idx, &w, &c.u[0]),
                interp(&idx, &w, &c.u[1]),
                interp(&idx, &w, &c.u[2]),
            ];
            let tk = interp(&idx, &w, &c.t);
            let dm = conserved_perturbation(&p, ck[0], [ck[1], ck[2], ck[3]], tk);
            add(a, &jet.first(g, &dm));
        }
        let zeta = xi / se;
        if let Some(l) = &layer1 {
            if zeta <= *bundle.zeta.last().unwrap() {
                let (zi, zw) = cubic_weights(&bundle.zeta, zeta);
                let v: [f64; 3] = std::array::from_fn(|c| interp(&zi, &zw, &l[c]));
                let dm = layer_moments(&p_wall, [v[0], v[1]], v[2]);
                add(se, &jet0.first(g, &dm));
                if let (Some(lm), Some(u3)) = (lmicro2, ub23) {
                    let fluid = jet0.first(g, &conserved_perturbation(&p_wall, 0.0, [0.0, 0.0, interp(&zi, &zw, u3)], 0.0));
                    let micro = interp_rows(&zi, &zw, lm);
                    let term: Profile = (0..g.len()).map(|q| fluid[q] + micro[q] * sqrt_m0[q]).collect();
                    add(eps, &term);
                }
            }
        }
        if let Some(m2) = micro2 {
            let mic = interp_rows(&idx, &w, m2);
            let term: Profile = mic.iter().zip(&jet.m).map(|(a, m)| a * m.sqrt()).collect();
            add(eps, &term);
        }
        let xi_k = xi / eps;
        for (k, kn) in [(1usize, kn1), (2, kn2)] {
            if let Some(rows) = kn {
                if let Some(v) = layer_rows_at(&bundle.xi, rows, xi_k) {
                    let term: Profile = v.iter().zip(&sqrt_m0).map(|(a, s)| a * s).collect();
                    add(se.powi(k as i32), &term);
                }
            }
        }
        out_f.push(f);
        out_m.push(jet.m);
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in out_f.iter().flatten() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    Ok(Assembled {
        x: x.to_vec(),
        t,
        f: out_f,
        m: out_m,
        min_ratio: lo / hi.max(1e-300),
    })
}

/// Trapezoid weights of a nonuniform grid.
pub fn trapezoid_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = 0.5 * (x[i + 1] - x[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

/// Scaled norm `|R / sqrt(M)|_2` of `R = d_t F + v3 d_x F - Q(F)/eps` for the
/// assembled field at stored corrector step `2m`, with the time derivative
/// taken between the neighbouring corrector times.
pub fn expansion_residual(
    bundle: &Bundle,
    g: &VelocityGrid,
    x: &[f64],
    m: usize,
    eps: f64,
    order: usize,
) -> Result<f64> {
    if bundle.model.kind != CollisionKind::Bgk {
        return Err(Error::CostGuard("residual evaluation uses the relaxation operator".into()));
    }
    let traj = bundle.euler()?;
    let last = (traj.times.len() - 1) / 2;
    if m == 0 || m >= last {
        return Err(Error::Params(format!("residual needs both time neighbours of corrector step {m}")));
    }
    let at = |j: usize| assemble(bundle, g, x, traj.times[2 * j], eps, order);
    let (a, c, b) = (at(m - 1)?, at(m)?, at(m + 1)?);
    let h = traj.times[2 * m + 2] - traj.times[2 * m - 2];
    let nx = x.len();
    if nx < 5 {
        return Err(Error::Grid("residual needs at least five spatial nodes".into()));
    }
    let mut sum = vec![0.0; nx];
    for i in 0..nx {
        let i0 = i.saturating_sub(2).min(nx - 5);
        let w = fd_weights(x[i], &x[i0..i0 + 5], 1);
        let q = bgk_collision(&c.f[i], g, &bundle.model)?;
        let mut acc = 0.0;
        for k in 0..g.len() {
            let dt = (b.f[i][k] - a.f[i][k]) / h;
            let dx: f64 = (0..5).map(|j| w[1][j] * c.f[i0 + j][k]).sum();
            let r = dt + g.nodes[k][2] * dx - q[k] / eps;
            acc += g.weights[k] * r * r / c.m[i][k];
        }
        sum[i] = acc;
    }
    Ok(trapezoid(x, &sum).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn config(n: usize, vmax: f64, t_final: f64) -> Config {
        Config::from_toml(&format!(
            "[velocity]\nn = {n}\nvmax = {vmax}\n[euler]\nnx = 64\n[prandtl]\nnz = 100\ndt = 2e-3\n\
             [knudsen]\nnxi = 60\nximax = 12.0\n[study]\nt_final = {t_final}\n"
        ))
        .unwrap()
    }

    fn small() -> Config {
        config(8, 5.0, 0.01)
    }

    #[test]
    fn order_zero_is_the_local_maxwellian() {
        let c = small();
        let g = c.grid().unwrap();
        let setup = c.hierarchy_setup().unwrap();
        let mut h = Hierarchy::new(&setup, &g).unwrap();
        h.build(0).unwrap();
        assert_eq!(h.bundle.order(), 0);
        let x: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
        let a = assemble(&h.bundle, &g, &x, 0.01, 0.02, 0).unwrap();
        assert_eq!(a.f, a.m);
        assert!(matches!(assemble(&h.bundle, &g, &x, 0.01, 0.02, 1), Err(Error::Missing(_))));
    }

    #[test]
    fn ordering_guard() {
        let c = small();
        let g = c.grid().unwrap();
        let setup = c.hierarchy_setup().unwrap();
        let mut h = Hierarchy::new(&setup, &g).unwrap();
        assert!(matches!(h.build_stage(Stage::Prandtl(2)), Err(Error::Dependency(_))));
        assert!(matches!(h.build_stage(Stage::Knudsen(1)), Err(Error::Dependency(_))));
        assert!(matches!(h.build_stage(Stage::Corrector(1)), Err(Error::Dependency(_))));
        assert!(h.bundle.stages().is_empty());
        assert!(matches!(h.build(3), Err(Error::Params(_))));
    }

    #[test]
    fn static_maxwellian_has_no_residual() {
        let c = config(8, 5.0, 0.05);
        let g = c.grid().unwrap();
        let mut setup = c.hierarchy_setup().unwrap();
        setup.euler_init = FluidState::uniform(64, 1.0, 1.0, [0.0; 3], 1.0);
        setup.corrector_init = CorrectorState::zeros(1, 65);
        let mut h = Hierarchy::new(&setup, &g).unwrap();
        h.build(0).unwrap();
        let x: Vec<f64> = (0..=40).map(|i| i as f64 * 0.025).collect();
        let r = expansion_residual(&h.bundle, &g, &x, 1, 0.01, 0).unwrap();
        assert!(r <= 1e-10, "{r}");
    }

    #[test]
    fn order_one_bundle_round_trip_and_zeros() {
        // the order-2 source projection needs a finer velocity grid than `small`
        let c = config(12, 6.0, 0.01);
        let g = c.grid().unwrap();
        let setup = c.hierarchy_setup().unwrap();
        let mut h = Hierarchy::new(&setup, &g).unwrap();
        h.build(1).unwrap();
        assert!(matches!(h.build_stage(Stage::Prandtl(2)), Err(Error::Dependency(_))));
        let b = h.bundle.clone();
        assert_eq!(b.stages(), vec![Stage::Euler, Stage::Corrector(1), Stage::Knudsen(1), Stage::Prandtl(1)]);
        // flux-normalized wall: even traces give no order-1 kinetic layer and no slip
        assert!(b.orders[0].knudsen.as_ref().unwrap().zero);
        assert!(b.orders[0].slip.iter().all(|s| *s == 0.0));
        let zeros = crate::checks::structural_zeros(&b, &g);
        assert!(zeros.pass, "{}", zeros.detail);

        let dir = std::env::temp_dir().join(format!("hs-bundle-{}", std::process::id()));
        b.save(&dir).unwrap();
        let back = Bundle::load(&dir, Some(&b.config_hash)).unwrap();
        assert!(Bundle::load(&dir, Some("other")).is_err());
        std::fs::remove_dir_all(&dir).ok();
        let x: Vec<f64> = (0..=30).map(|i| (i as f64 / 30.0).powi(2)).collect();
        for eps in [0.04, 0.005] {
            let a1 = assemble(&b, &g, &x, 0.01, eps, 1).unwrap();
            let a2 = assemble(&back, &g, &x, 0.01, eps, 1).unwrap();
            for (p, q) in a1.f.iter().flatten().zip(a2.f.iter().flatten()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }
}
