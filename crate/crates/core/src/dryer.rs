//! Explicit finite-volume model of a drying wood chip.
//!
//! Temperature `T` and moisture ratio `X` (kg water per kg dry wood) obey
//!
//! ```text
//! rho(X) cp(X) dT/dt = div(lambda grad T)
//!              dX/dt = div(delta grad X)
//! ```
//!
//! on a box, with convective heating and surface evaporation on every face:
//!
//! ```text
//! m_w   = beta (rho_surface(T, X) - rho_inf)           [kg m^-2 s^-1]
//! q_in  = alpha (T_inf - T) - dh(T) m_w                 [W m^-2]
//! -rho_dry delta grad X . n = m_w
//! ```
//!
//! The surface vapor density uses the Magnus saturation pressure and a water
//! activity that is linear below the fiber saturation point. By default the
//! surface closures see the state of the boundary cell; see
//! [`SurfaceEvaluation`] for the face-resolved alternative.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matstore::{FieldSpan, SnapshotSet};
use crate::Mat;

pub const MOISTURE_FIELD: &str = "moisture";
pub const TEMPERATURE_FIELD: &str = "temperature";

const KELVIN_OFFSET: f64 = 273.15;
/// Safety factor of the explicit diffusion stability bound.
const STABILITY_SAFETY: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Box edge lengths in metres.
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
}

impl Default for Grid {
    /// 5 mm x 10 mm x 20 mm chip on 20 x 20 x 20 cells.
    fn default() -> Self {
        Self {
            nx: 20,
            ny: 20,
            nz: 20,
            lx: 5e-3,
            ly: 10e-3,
            lz: 20e-3,
        }
    }
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn spacing(&self) -> [f64; 3] {
        [
            self.lx / self.nx as f64,
            self.ly / self.ny as f64,
            self.lz / self.nz as f64,
        ]
    }

    pub fn cell_volume(&self) -> f64 {
        let [dx, dy, dz] = self.spacing();
        dx * dy * dz
    }

    /// Areas of the faces normal to x, y and z.
    pub fn face_areas(&self) -> [f64; 3] {
        let [dx, dy, dz] = self.spacing();
        [dy * dz, dx * dz, dx * dy]
    }

    pub fn surface_area(&self) -> f64 {
        2.0 * (self.lx * self.ly + self.lx * self.lz + self.ly * self.lz)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    fn validate(&self) -> Result<()> {
        if self.cells() == 0 || !(self.lx > 0.0 && self.ly > 0.0 && self.lz > 0.0) {
            return Err(Error::Config("grid needs positive cell counts and lengths".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaterialParams {
    /// kg m^-3
    pub rho_dry: f64,
    /// J kg^-1 K^-1
    pub cp_dry: f64,
    /// W m^-1 K^-1
    pub lambda_dry: f64,
    /// m^2 s^-1
    pub delta_eff: f64,
    /// W m^-2 K^-1
    pub alpha: f64,
    /// m s^-1
    pub beta: f64,
    /// Diagonal factors applied to both conductivity and diffusivity.
    pub anisotropy: [f64; 3],
    /// J kg^-1 K^-1
    pub cp_water: f64,
    /// Latent heat `dh(T) = latent_heat_ref - latent_heat_slope (T - 273.15)`.
    pub latent_heat_ref: f64,
    pub latent_heat_slope: f64,
    pub fiber_saturation: f64,
    /// kg mol^-1
    pub molar_mass_water: f64,
    /// J mol^-1 K^-1
    pub gas_constant: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            rho_dry: 500.0,
            cp_dry: 1500.0,
            lambda_dry: 0.12,
            delta_eff: 2e-9,
            alpha: 45.0,
            beta: 0.075,
            anisotropy: [1.0, 1.0, 1.0],
            cp_water: 4186.0,
            latent_heat_ref: 2.501e6,
            latent_heat_slope: 2430.0,
            fiber_saturation: 0.3,
            molar_mass_water: 0.018015,
            gas_constant: 8.314462618,
        }
    }
}

impl MaterialParams {
    fn validate(&self) -> Result<()> {
        let all = [
            self.rho_dry,
            self.cp_dry,
            self.lambda_dry,
            self.delta_eff,
            self.alpha,
            self.beta,
            self.cp_water,
            self.latent_heat_ref,
            self.latent_heat_slope,
            self.fiber_saturation,
            self.molar_mass_water,
            self.gas_constant,
            self.anisotropy[0],
            self.anisotropy[1],
            self.anisotropy[2],
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("material parameters must be strictly positive".into()))
        }
    }

    /// Volumetric heat capacity `rho(X) cp(X) = rho_dry (cp_dry + X cp_water)`.
    pub fn heat_capacity(&self, x: f64) -> f64 {
        self.rho_dry * (self.cp_dry + x * self.cp_water)
    }

    pub fn conductivity(&self, _x: f64) -> f64 {
        self.lambda_dry
    }

    pub fn diffusivity(&self, _t: f64) -> f64 {
        self.delta_eff
    }

    pub fn latent_heat(&self, t: f64) -> f64 {
        self.latent_heat_ref - self.latent_heat_slope * (t - KELVIN_OFFSET)
    }
}

/// Magnus saturation pressure over water in Pa.
pub fn saturation_pressure(t: f64) -> f64 {
    let theta = t - KELVIN_OFFSET;
    611.2 * (17.62 * theta / (243.12 + theta)).exp()
}

/// Water vapor density at the chip surface, kg m^-3.
pub fn surface_vapor_density(t: f64, x: f64, params: &MaterialParams) -> Result<f64> {
    if !(t > 250.0 && t < 450.0) {
        return Err(Error::Range(format!(
            "surface temperature {t} K outside (250, 450) K"
        )));
    }
    let activity = (x.max(0.0) / params.fiber_saturation).min(1.0);
    Ok(activity * saturation_pressure(t) * params.molar_mass_water / (params.gas_constant * t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ambient {
    pub temperature: f64,
    pub vapor_density: f64,
}

/// Heat flux into the solid (W m^-2) and evaporated mass flux
/// (kg m^-2 s^-1) at a surface cell. Without `bidirectional` the mass flux
/// is floored at zero.
pub fn boundary_flux(
    t: f64,
    x: f64,
    ambient: Ambient,
    params: &MaterialParams,
    bidirectional: bool,
) -> Result<(f64, f64)> {
    let rho_s = surface_vapor_density(t, x, params)?;
    let mut m_w = params.beta * (rho_s - ambient.vapor_density);
    if !bidirectional {
        m_w = m_w.max(0.0);
    }
    let q = params.alpha * (ambient.temperature - t) - params.latent_heat(t) * m_w;
    Ok((q, m_w))
}

/// Where the surface closures are evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceEvaluation {
    /// At the state of the boundary cell.
    #[default]
    Cell,
    /// At a face state balanced against the half-cell resistance, see
    /// [`face_exchange`]; converges faster under grid refinement.
    Face,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfaceOptions {
    pub evaluation: SurfaceEvaluation,
    /// Allow condensation (negative evaporation flux).
    pub bidirectional: bool,
}

/// Surface state and exchange at one boundary face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceExchange {
    pub temperature: f64,
    pub moisture: f64,
    /// Heat flux into the solid, W m^-2.
    pub heat: f64,
    /// Evaporated mass flux, kg m^-2 s^-1.
    pub mass: f64,
}

/// Solves for the face state of a boundary cell whose centre lies half a
/// cell inside the surface. `k_heat = 2 lambda / h` and
/// `k_water = 2 rho_dry delta / h` are the centre-to-face conductances; the
/// face state balances them against [`boundary_flux`].
pub fn face_exchange(
    t_cell: f64,
    x_cell: f64,
    k_heat: f64,
    k_water: f64,
    ambient: Ambient,
    params: &MaterialParams,
    bidirectional: bool,
) -> Result<FaceExchange> {
    // moisture balance k_water (x_cell - x_f) = m(t_f, x_f), solved exactly
    // since the surface density is piecewise linear in x_f
    let moisture_at = |t_f: f64| -> Result<(f64, f64)> {
        let sat = surface_vapor_density(t_f, params.fiber_saturation, params)?;
        let beta = params.beta;
        let mut x_f = (k_water * x_cell + beta * ambient.vapor_density)
            / (k_water + beta * sat / params.fiber_saturation);
        let mut m = beta * (x_f / params.fiber_saturation * sat - ambient.vapor_density);
        if x_f > params.fiber_saturation {
            m = beta * (sat - ambient.vapor_density);
            x_f = x_cell - m / k_water;
        }
        if m < 0.0 && !bidirectional {
            return Ok((x_cell, 0.0));
        }
        Ok((x_f, m))
    };
    // heat balance k_heat (t_f - t_cell) = alpha (t_inf - t_f) - dh(t_f) m,
    // monotone increasing in t_f
    let residual = |t_f: f64| -> Result<f64> {
        let (_, m) = moisture_at(t_f)?;
        Ok(k_heat * (t_f - t_cell) - params.alpha * (ambient.temperature - t_f)
            + params.latent_heat(t_f) * m)
    };
    let mut t_f = t_cell;
    for _ in 0..20 {
        let r = residual(t_f)?;
        let h = 1e-4;
        let slope = (residual(t_f + h)? - r) / h;
        let delta = r / slope;
        t_f -= delta;
        if delta.abs() <= 1e-11 * t_f {
            break;
        }
    }
    let (x_f, m) = moisture_at(t_f)?;
    Ok(FaceExchange {
        temperature: t_f,
        moisture: x_f,
        heat: k_heat * (t_f - t_cell),
        mass: m,
    })
}

/// Piecewise-constant ambient temperature and vapor density, each given as
/// `(start time, value)` breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbientSchedule {
    pub temperature: Vec<(f64, f64)>,
    pub vapor_density: Vec<(f64, f64)>,
}

impl Default for AmbientSchedule {
    /// 375 K air whose vapor density drops at 100 s and 200 s.
    fn default() -> Self {
        Self {
            temperature: vec![(0.0, 375.0)],
            vapor_density: vec![(0.0, 0.0350), (100.0, 0.0175), (200.0, 0.0070)],
        }
    }
}

fn piecewise(points: &[(f64, f64)], t: f64) -> f64 {
    points
        .iter()
        .take_while(|(start, _)| *start <= t)
        .last()
        .map_or(points[0].1, |p| p.1)
}

impl AmbientSchedule {
    pub fn constant(temperature: f64, vapor_density: f64) -> Self {
        Self {
            temperature: vec![(0.0, temperature)],
            vapor_density: vec![(0.0, vapor_density)],
        }
    }

    pub fn at(&self, t: f64) -> Ambient {
        Ambient {
            temperature: piecewise(&self.temperature, t),
            vapor_density: piecewise(&self.vapor_density, t),
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, pts) in [("temperature", &self.temperature), ("vapor_density", &self.vapor_density)] {
            if pts.first().map(|p| p.0) != Some(0.0) {
                return Err(Error::Config(format!("{name} schedule must start at t = 0")));
            }
            if pts.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::Config(format!(
                    "{name} breakpoints must be strictly increasing"
                )));
            }
            if pts.iter().any(|p| !p.1.is_finite() || p.1 < 0.0) {
                return Err(Error::Config(format!("{name} values must be finite and >= 0")));
            }
        }
        if self.temperature.iter().any(|p| p.1 <= 0.0) {
            return Err(Error::Config("ambient temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DryerConfig {
    pub grid: Grid,
    pub material: MaterialParams,
    pub schedule: AmbientSchedule,
    /// Time step, s.
    pub dt: f64,
    /// Simulated duration, s.
    pub t_end: f64,
    /// Snapshot interval, s; must be a whole number of time steps.
    pub sample_interval: f64,
    pub initial_temperature: f64,
    pub initial_moisture: f64,
    pub surface: SurfaceOptions,
}

impl Default for DryerConfig {
    fn default() -> Self {
        Self {
            grid: Grid::default(),
            material: MaterialParams::default(),
            schedule: AmbientSchedule::default(),
            dt: 0.1,
            t_end: 1250.0,
            sample_interval: 12.5,
            initial_temperature: 298.15,
            initial_moisture: 0.8,
            surface: SurfaceOptions::default(),
        }
    }
}

fn whole_ratio(a: f64, b: f64, what: &str) -> Result<usize> {
    let ratio = a / b;
    let rounded = ratio.round();
    if (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Config(format!(
            "{what} must be a whole multiple of the time step"
        )));
    }
    Ok(rounded as usize)
}

impl DryerConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.material.validate()?;
        self.schedule.validate()?;
        if !(self.dt > 0.0 && self.sample_interval > 0.0 && self.t_end >= 0.0) {
            return Err(Error::Config("dt and sample_interval must be > 0, t_end >= 0".into()));
        }
        if !(self.initial_temperature > 0.0 && self.initial_moisture >= 0.0) {
            return Err(Error::Config("initial state must have T > 0 and X >= 0".into()));
        }
        self.steps_per_sample()?;
        self.total_steps()?;
        Ok(())
    }

    pub fn steps_per_sample(&self) -> Result<usize> {
        whole_ratio(self.sample_interval, self.dt, "sample_interval")
    }

    pub fn total_steps(&self) -> Result<usize> {
        let steps = whole_ratio(self.t_end, self.dt, "t_end")?;
        if steps % self.steps_per_sample()? != 0 {
            return Err(Error::Config(
                "t_end must be a whole multiple of sample_interval".into(),
            ));
        }
        Ok(steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DryerState {
    pub temperature: Vec<f64>,
    pub moisture: Vec<f64>,
    pub time: f64,
}

impl DryerState {
    pub fn uniform(cells: usize, temperature: f64, moisture: f64) -> Self {
        Self {
            temperature: vec![temperature; cells],
            moisture: vec![moisture; cells],
            time: 0.0,
        }
    }

    pub fn mean_temperature(&self) -> f64 {
        self.temperature.iter().sum::<f64>() / self.temperature.len() as f64
    }

    pub fn mean_moisture(&self) -> f64 {
        self.moisture.iter().sum::<f64>() / self.moisture.len() as f64
    }
}

/// Energy and water exchanged through the surface during one step, J and kg.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepExchange {
    pub heat_in: f64,
    pub water_out: f64,
    /// `sum C(X) V dT` over cells.
    pub sensible_change: f64,
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Largest admissible explicit time step for the current state: the
/// diffusive bound `0.4 min(dx^2) / max(lambda / (rho cp), delta)`, further
/// capped so the convective exchange of a corner cell cannot overshoot the
/// ambient temperature in one step.
pub fn stability_limit(grid: &Grid, params: &MaterialParams, state: &DryerState) -> f64 {
    let spacing = grid.spacing();
    let h2 = spacing.iter().map(|h| h * h).fold(f64::INFINITY, f64::min);
    let amax = params.anisotropy.iter().copied().fold(0.0, f64::max);
    let mut thermal: f64 = 0.0;
    let mut cap_min = f64::INFINITY;
    for &x in &state.moisture {
        let cap = params.heat_capacity(x);
        thermal = thermal.max(params.conductivity(x) / cap);
        cap_min = cap_min.min(cap);
    }
    let moisture = state
        .temperature
        .iter()
        .map(|&t| params.diffusivity(t))
        .fold(0.0, f64::max);
    let diffusive = STABILITY_SAFETY * h2 / (amax * thermal.max(moisture));

    let dims = [grid.nx, grid.ny, grid.nz];
    let areas = grid.face_areas();
    let exposed: f64 = (0..3)
        .map(|a| areas[a] * if dims[a] == 1 { 2.0 } else { 1.0 })
        .sum();
    let convective = cap_min * grid.cell_volume() / (params.alpha * exposed);
    diffusive.min(convective)
}

/// Advances the state by one explicit Euler step of length `dt` under the
/// ambient conditions `ambient`.
pub fn step(
    state: &DryerState,
    ambient: Ambient,
    grid: &Grid,
    params: &MaterialParams,
    dt: f64,
    surface: SurfaceOptions,
) -> Result<(DryerState, StepExchange)> {
    let limit = stability_limit(grid, params, state);
    if dt > limit {
        return Err(Error::Stability { dt, limit });
    }
    let n = grid.cells();
    let [dx, dy, dz] = grid.spacing();
    let spacing = [dx, dy, dz];
    let areas = grid.face_areas();
    let vol = grid.cell_volume();
    let dims = [grid.nx, grid.ny, grid.nz];

    let t = &state.temperature;
    let x = &state.moisture;
    let lambda: Vec<f64> = x.iter().map(|&x| params.conductivity(x)).collect();
    let delta: Vec<f64> = t.iter().map(|&t| params.diffusivity(t)).collect();

    // heat in W and water in kg/s per cell
    let mut heat = vec![0.0; n];
    let mut water = vec![0.0; n];
    let mut exchange = StepExchange::default();

    for k in 0..grid.nz {
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let c = grid.index(i, j, k);
                let pos = [i, j, k];
                for axis in 0..3 {
                    let coef = areas[axis] / spacing[axis] * params.anisotropy[axis];
                    // interior face towards +axis; each face visited once
                    if pos[axis] + 1 < dims[axis] {
                        let mut np = pos;
                        np[axis] += 1;
                        let nb = grid.index(np[0], np[1], np[2]);
                        let qh = coef * harmonic(lambda[c], lambda[nb]) * (t[nb] - t[c]);
                        let qw = coef * params.rho_dry * harmonic(delta[c], delta[nb]) * (x[nb] - x[c]);
                        heat[c] += qh;
                        heat[nb] -= qh;
                        water[c] += qw;
                        water[nb] -= qw;
                    }
                    let boundary_faces =
                        usize::from(pos[axis] == 0) + usize::from(pos[axis] + 1 == dims[axis]);
                    if boundary_faces > 0 {
                        let (q, m_w) = match surface.evaluation {
                            SurfaceEvaluation::Cell => {
                                boundary_flux(t[c], x[c], ambient, params, surface.bidirectional)?
                            }
                            SurfaceEvaluation::Face => {
                                let f = params.anisotropy[axis];
                                let k_heat = 2.0 * lambda[c] * f / spacing[axis];
                                let k_water = 2.0 * params.rho_dry * delta[c] * f / spacing[axis];
                                let ex = face_exchange(
                                    t[c],
                                    x[c],
                                    k_heat,
                                    k_water,
                                    ambient,
                                    params,
                                    surface.bidirectional,
                                )?;
                                (ex.heat, ex.mass)
                            }
                        };
                        let a = areas[axis] * boundary_faces as f64;
                        heat[c] += q * a;
                        water[c] -= m_w * a;
                        exchange.heat_in += q * a * dt;
                        exchange.water_out += m_w * a * dt;
                    }
                }
            }
        }
    }

    let mut next = DryerState {
        temperature: Vec::with_capacity(n),
        moisture: Vec::with_capacity(n),
        time: state.time + dt,
    };
    for c in 0..n {
        let cap = params.heat_capacity(x[c]) * vol;
        let t_new = t[c] + dt * heat[c] / cap;
        // from the stored state, so rounding in the update is audited too
        exchange.sensible_change += cap * (t_new - t[c]);
        next.temperature.push(t_new);
        next.moisture.push(x[c] + dt * water[c] / (params.rho_dry * vol));
    }
    Ok((next, exchange))
}

/// Closing error of a conservation audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    /// Change of the stored quantity.
    pub stored: f64,
    /// Net transfer through the surface over the same period.
    pub transferred: f64,
}

impl Audit {
    pub fn relative_error(&self) -> f64 {
        let scale = self.stored.abs().max(self.transferred.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.stored - self.transferred).abs() / scale
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub steps: usize,
    /// Time, mean temperature and mean moisture after every step, starting
    /// with the initial state.
    pub times: Vec<f64>,
    pub mean_temperature: Vec<f64>,
    pub mean_moisture: Vec<f64>,
    /// Water removed from the chip vs evaporated through the surface, kg.
    pub water: Audit,
    /// Sensible heat stored vs heat received through the surface, J.
    pub energy: Audit,
    pub wall_time_s: f64,
    pub step_time_ms: f64,
}

/// Runs the simulation and collects moisture and temperature snapshots
/// (moisture rows first) together with the sampled ambient inputs.
pub fn simulate(config: &DryerConfig) -> Result<(SnapshotSet, SimulationReport)> {
    config.validate()?;
    let started = Instant::now();
    let grid = &config.grid;
    let params = &config.material;
    let cells = grid.cells();
    let per_sample = config.steps_per_sample()?;
    let total = config.total_steps()?;
    let samples = total / per_sample + 1;

    let mut s = Mat::zeros(2 * cells, samples);
    let mut u = Mat::zeros(2, samples - 1);
    let mut state = DryerState::uniform(cells, config.initial_temperature, config.initial_moisture);
    let water_mass = |st: &DryerState| params.rho_dry * grid.cell_volume() * st.moisture.iter().sum::<f64>();
    let initial_water = water_mass(&state);

    let record = |s: &mut Mat, col: usize, st: &DryerState| {
        let mut c = s.column_mut(col);
        c.rows_mut(0, cells).copy_from_slice(&st.moisture);
        c.rows_mut(cells, cells).copy_from_slice(&st.temperature);
    };
    record(&mut s, 0, &state);

    let mut times = vec![0.0];
    let mut mean_t = vec![state.mean_temperature()];
    let mut mean_x = vec![state.mean_moisture()];
    let mut evaporated = 0.0;
    let mut heat_in = 0.0;
    let mut sensible = 0.0;

    let loop_start = Instant::now();
    for n in 0..total {
        let time = n as f64 * config.dt;
        let ambient = config.schedule.at(time);
        if n % per_sample == 0 {
            let col = n / per_sample;
            u[(0, col)] = ambient.temperature;
            u[(1, col)] = ambient.vapor_density;
        }
        let (mut next, ex) = step(&state, ambient, grid, params, config.dt, config.surface)?;
        if next
            .temperature
            .iter()
            .chain(&next.moisture)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFiniteState { step: n + 1 });
        }
        next.time = (n + 1) as f64 * config.dt;
        evaporated += ex.water_out;
        heat_in += ex.heat_in;
        sensible += ex.sensible_change;
        state = next;
        if (n + 1) % per_sample == 0 {
            record(&mut s, (n + 1) / per_sample, &state);
        }
        times.push(state.time);
        mean_t.push(state.mean_temperature());
        mean_x.push(state.mean_moisture());
    }
    let loop_time = loop_start.elapsed().as_secs_f64();

    let layout = vec![
        FieldSpan::new(MOISTURE_FIELD, 0, cells),
        FieldSpan::new(TEMPERATURE_FIELD, cells, cells),
    ];
    let set = SnapshotSet::new(s, u, config.sample_interval, layout)?;
    let report = SimulationReport {
        steps: total,
        times,
        mean_temperature: mean_t,
        mean_moisture: mean_x,
        water: Audit {
            stored: initial_water - water_mass(&state),
            transferred: evaporated,
        },
        energy: Audit {
            stored: sensible,
            transferred: heat_in,
        },
        wall_time_s: started.elapsed().as_secs_f64(),
        step_time_ms: if total > 0 { 1e3 * loop_time / total as f64 } else { 0.0 },
    };
    Ok((set, report))
}
