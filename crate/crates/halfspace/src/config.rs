//! TOML configuration with one table per stage.

use serde::{Deserialize, Serialize};

use crate::checkpoint::config_hash;
use crate::collision::CollisionModel;
use crate::error::{Error, Result};
use crate::fluid::{CorrectorState, FluidState};
use crate::hierarchy::HierarchySetup;
use crate::knudsen::Diffuse;
use crate::prandtl::LayerGrid;
use crate::velocity::{build_grid, VelocityGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocitySection {
    pub n: usize,
    pub vmax: f64,
}

impl Default for VelocitySection {
    fn default() -> Self {
        VelocitySection { n: 12, vmax: 6.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    Bgk,
    HardSphere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollisionSection {
    pub model: ModelName,
    pub nu_scale: f64,
    pub gamma0: f64,
    pub angular_n: usize,
}

impl Default for CollisionSection {
    fn default() -> Self {
        CollisionSection {
            model: ModelName::Bgk,
            nu_scale: 1.0,
            gamma0: 0.0,
            angular_n: 4,
        }
    }
}

/// Background flow `rho T = 1`, `u = (U tanh(x/d_u), 0, 0)`,
/// `T = 1 + a (1 - exp(-x/d_T))`, and an isentropic pressure pulse in the
/// first-order fluid part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EulerSection {
    pub nx: usize,
    pub xmax: f64,
    pub cfl: f64,
    pub n_taylor: usize,
    pub shear: f64,
    pub shear_width: f64,
    pub heating: f64,
    pub heating_width: f64,
    pub pulse_amplitude: f64,
    pub pulse_center: f64,
    pub pulse_width: f64,
}

impl Default for EulerSection {
    fn default() -> Self {
        EulerSection {
            nx: 200,
            xmax: 1.0,
            cfl: 0.5,
            n_taylor: 2,
            shear: 0.3,
            shear_width: 0.2,
            heating: 0.2,
            heating_width: 0.3,
            pulse_amplitude: 0.5,
            pulse_center: 0.3,
            pulse_width: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrandtlSection {
    pub zmax: f64,
    pub nz: usize,
    pub dt: f64,
    pub far_tol: f64,
}

impl Default for PrandtlSection {
    fn default() -> Self {
        PrandtlSection {
            zmax: 20.0,
            nz: 400,
            dt: 1e-3,
            far_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnudsenSection {
    pub ximax: f64,
    pub nxi: usize,
    pub diffuse: Diffuse,
}

impl Default for KnudsenSection {
    fn default() -> Self {
        KnudsenSection {
            ximax: 30.0,
            nxi: 300,
            diffuse: Diffuse::Normalized,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub epsilons: Vec<f64>,
    pub orders: Vec<usize>,
    pub t_final: f64,
    /// Spatial cells of the direct solver.
    pub cells: usize,
    /// Largest ratio of neighbouring cells.
    pub stretch_max: f64,
    /// Cells across the smallest kinetic layer next to the wall.
    pub wall_cells_per_eps: f64,
    /// `dt = cfl * min dx / vmax`.
    pub cfl: f64,
    /// Accommodation; `None` means `sqrt(2 pi eps)`.
    pub alpha: Option<f64>,
    /// Order of the expansion used as initial datum.
    pub init_order: usize,
    pub ell: f64,
    pub seed: u64,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            epsilons: vec![0.04, 0.02, 0.01, 0.005],
            orders: vec![0, 1],
            t_final: 0.05,
            cells: 200,
            stretch_max: 1.05,
            wall_cells_per_eps: 8.0,
            cfl: 1.0,
            alpha: None,
            init_order: 1,
            ell: 9.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub velocity: VelocitySection,
    pub collision: CollisionSection,
    pub euler: EulerSection,
    pub prandtl: PrandtlSection,
    pub knudsen: KnudsenSection,
    pub study: StudySection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Config::from_toml(&text)
    }

    /// Canonical text used for hashing.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        config_hash(&self.canonical())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let e = &self.euler;
        if e.nx < 16 || !(e.xmax > 0.0) || !(e.cfl > 0.0 && e.cfl <= 1.0) {
            return bad(format!("euler: nx = {}, xmax = {}, cfl = {}", e.nx, e.xmax, e.cfl));
        }
        if !(e.shear_width > 0.0 && e.heating_width > 0.0 && e.pulse_width > 0.0) {
            return bad("euler: widths must be positive".into());
        }
        if 1.0 + e.heating <= 0.0 {
            return bad(format!("euler: heating {} makes the temperature negative", e.heating));
        }
        let s = &self.study;
        if s.epsilons.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
            return bad(format!("study: epsilons {:?}", s.epsilons));
        }
        if s.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return bad("study: epsilons must decrease".into());
        }
        if !(s.t_final > 0.0) || s.cells < 16 || !(s.stretch_max >= 1.0) || !(s.cfl > 0.0 && s.cfl <= 1.0) {
            return bad("study: t_final, cells, stretch_max or cfl out of range".into());
        }
        if let Some(a) = s.alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("study: alpha = {a}"));
            }
        }
        if s.orders.iter().chain([&s.init_order]).any(|k| *k > crate::hierarchy::MAX_ORDER) {
            return bad(format!("study: orders above {} are not built", crate::hierarchy::MAX_ORDER));
        }
        if s.ell < 9.0 - 2.0 * self.collision.gamma0 {
            return bad(format!("study: weight exponent {} below 9 - 2 gamma0", s.ell));
        }
        if self.prandtl.nz < 8 || !(self.prandtl.dt > 0.0) || self.knudsen.nxi < 4 || !(self.knudsen.ximax > 0.0) {
            return bad("prandtl/knudsen grid out of range".into());
        }
        if self.velocity.n < 2 || self.velocity.n % 2 == 1 || !(self.velocity.vmax > 0.0) {
            return bad(format!("velocity: n = {}, vmax = {}", self.velocity.n, self.velocity.vmax));
        }
        self.model().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn grid(&self) -> Result<VelocityGrid> {
        build_grid(self.velocity.n, self.velocity.vmax)
    }

    pub fn model(&self) -> CollisionModel {
        match self.collision.model {
            ModelName::Bgk => CollisionModel::bgk(self.collision.nu_scale),
            ModelName::HardSphere => CollisionModel::hard_sphere(self.collision.gamma0, self.collision.angular_n),
        }
    }

    /// Accommodation coefficient at `eps`.
    pub fn alpha(&self, eps: f64) -> f64 {
        self.study
            .alpha
            .unwrap_or_else(|| (2.0 * std::f64::consts::PI * eps).sqrt())
    }

    pub fn euler_init(&self) -> FluidState {
        let e = &self.euler;
        FluidState::from_fn(e.nx, e.xmax, |x| {
            let t = 1.0 + e.heating * (1.0 - (-x / e.heating_width).exp());
            (1.0 / t, [e.shear * (x / e.shear_width).tanh(), 0.0, 0.0], t)
        })
    }

    /// Pressure pulse with isentropic density and temperature parts.
    pub fn corrector_init(&self, bg: &FluidState) -> CorrectorState {
        let e = &self.euler;
        let mut c = CorrectorState::zeros(1, bg.len());
        for (i, x) in bg.x().into_iter().enumerate() {
            let s = (x - e.pulse_center) / e.pulse_width;
            let p1 = e.pulse_amplitude * (-s * s).exp();
            let (rho, t) = (bg.rho[i], bg.t[i]);
            let rho1 = 0.6 * p1 / t;
            c.rho[i] = rho1;
            c.t[i] = (p1 - t * rho1) / rho;
        }
        c
    }

    pub fn hierarchy_setup(&self) -> Result<HierarchySetup> {
        let bg = self.euler_init();
        let corrector_init = self.corrector_init(&bg);
        Ok(HierarchySetup {
            model: self.model(),
            diffuse: self.knudsen.diffuse,
            euler_init: bg,
            tau: self.study.t_final,
            cfl: self.euler.cfl,
            n_taylor: self.euler.n_taylor,
            corrector_init,
            layer_grid: LayerGrid::new(self.prandtl.zmax, self.prandtl.nz)?,
            layer_dt: self.prandtl.dt,
            layer_far_tol: self.prandtl.far_tol,
            ximax: self.knudsen.ximax,
            nxi: self.knudsen.nxi,
            snapshots: vec![0.0, self.study.t_final],
            config_hash: self.hash(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_parse() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        assert_eq!(Config::load(&dir.join("default.toml")).unwrap(), Config::default());
        Config::load(&dir.join("small.toml")).unwrap();
    }

    #[test]
    fn defaults_roundtrip_and_validate() {
        let c = Config::default();
        c.validate().unwrap();
        let back = Config::from_toml(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = Config::from_toml("[velocity]\nn = 8\nvmax = 5.0\n[knudsen]\ndiffuse = \"verbatim\"\n").unwrap();
        assert_eq!(c.velocity.n, 8);
        assert_eq!(c.knudsen.diffuse, Diffuse::Verbatim);
        assert_eq!(c.euler, EulerSection::default());
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in [
            "[velocity]\nn = 7\n",
            "[study]\nepsilons = [0.01, 0.02]\n",
            "[bogus]\nx = 1\n",
            "[euler]\nnx = \"many\"\n",
            "[study]\nell = 3.0\n",
        ] {
            let e = Config::from_toml(text).unwrap_err();
            assert!(e.is_config(), "{text}: {e}");
        }
    }

    #[test]
    fn pulse_is_isentropic() {
        let c = Config::default();
        let bg = c.euler_init();
        let p = c.corrector_init(&bg);
        for i in 0..bg.len() {
            let p1 = bg.rho[i] * p.t[i] + bg.t[i] * p.rho[i];
            assert!((p.rho[i] * 5.0 / 3.0 * bg.t[i] - p1).abs() < 1e-14);
        }
    }

    #[test]
    fn alpha_default() {
        let c = Config::default();
        assert!((c.alpha(0.01) - (2.0 * std::f64::consts::PI * 0.01).sqrt()).abs() < 1e-15);
    }
}
