//! Simulation and evaluation of identified reduced models.

use std::path::Path;

use nalgebra::Schur;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::matstore::{write_csv, FieldSpan, RomModel, SnapshotSet};
use crate::{Mat, Vector};

/// Reduced states `a_0 .. a_K` in the columns of an `r x (K+1)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RomTrajectory {
    pub states: Mat,
    pub dt: f64,
}

impl RomTrajectory {
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| k as f64 * self.dt).collect()
    }
}

/// Reduced coordinates `L^T x` of a full state given in physical units.
pub fn project(model: &RomModel, x: &Vector) -> Result<Vector> {
    if x.len() != model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "state has length {}, model expects {}",
            x.len(),
            model.state_dim()
        )));
    }
    let mut x = x.clone();
    if let Some(ns) = &model.norm_spec {
        ns.apply_vec(&mut x);
    }
    Ok(model.l.tr_mul(&x))
}

/// Runs `a_{k+1} = M a_k + P u_k` from `a_0 = L^T x0`.
pub fn rom_simulate(model: &RomModel, x0: &Vector, u_seq: &Mat) -> Result<RomTrajectory> {
    let a0 = project(model, x0)?;
    simulate_reduced(model, &a0, u_seq)
}

pub fn simulate_reduced(model: &RomModel, a0: &Vector, u_seq: &Mat) -> Result<RomTrajectory> {
    let r = model.rank();
    if a0.len() != r {
        return Err(Error::DimensionMismatch(format!(
            "initial reduced state has length {}, model rank is {r}",
            a0.len()
        )));
    }
    if u_seq.nrows() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {} rows, model expects {}",
            u_seq.nrows(),
            model.input_dim()
        )));
    }
    let steps = u_seq.ncols();
    let mut states = Mat::zeros(r, steps + 1);
    states.set_column(0, a0);
    for k in 0..steps {
        let next = &model.m * states.column(k) + &model.p * u_seq.column(k);
        states.set_column(k + 1, &next);
    }
    Ok(RomTrajectory {
        states,
        dt: model.dt_sample,
    })
}

/// Full state `L a` in physical units.
pub fn lift(model: &RomModel, a: &Vector) -> Result<Vector> {
    if a.len() != model.rank() {
        return Err(Error::DimensionMismatch(format!(
            "reduced state has length {}, model rank is {}",
            a.len(),
            model.rank()
        )));
    }
    let mut x = &model.l * a;
    if let Some(ns) = &model.norm_spec {
        ns.invert_vec(&mut x);
    }
    Ok(x)
}

/// Lifts every state of a trajectory into the columns of an `n x (K+1)`
/// matrix.
pub fn lift_trajectory(model: &RomModel, traj: &RomTrajectory) -> Result<Mat> {
    let mut out = &model.l * &traj.states;
    if let Some(ns) = &model.norm_spec {
        ns.invert(&mut out);
    }
    Ok(out)
}

/// Spatial mean of one field along a trajectory, computed in reduced
/// coordinates: `mean(L_f a) = c_f . a` with `c_f` the row mean of `L` over
/// the field.
pub fn field_mean_series(model: &RomModel, traj: &RomTrajectory, field: &FieldSpan) -> Result<Vec<f64>> {
    if field.end() > model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "field `{}` exceeds the model state dimension",
            field.name
        )));
    }
    let block = model.l.rows(field.start, field.len);
    let c: Vector = block.row_sum().transpose() / field.len as f64;
    let affine = model.norm_spec.as_ref().map(|ns| {
        ns.fields
            .iter()
            .find(|f| f.start == field.start && f.len == field.len)
            .map(|f| (f.shift, f.scale))
            .ok_or_else(|| {
                Error::DimensionMismatch(format!(
                    "field `{}` is not covered by the model normalization",
                    field.name
                ))
            })
    });
    let (shift, scale) = match affine {
        Some(r) => r?,
        None => (0.0, 1.0),
    };
    Ok(traj
        .states
        .column_iter()
        .map(|a| c.dot(&a) * scale + shift)
        .collect())
}

/// Eigenvalues sorted by magnitude (descending), ties by phase (ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<Complex64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &["re", "im"], self.eigenvalues.iter().map(|z| vec![z.re, z.im]))
    }
}

pub fn eigenvalues(m: &Mat) -> Result<Spectrum> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "eigenvalues need a nonempty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("Schur decomposition did not converge".into()))?;
    let mut eig: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| {
        b.norm()
            .total_cmp(&a.norm())
            .then_with(|| a.arg().total_cmp(&b.arg()))
    });
    Ok(Spectrum { eigenvalues: eig })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumMatching {
    /// Sum of distances over the optimal one-to-one matching.
    pub total: f64,
    /// Largest distance within that matching.
    pub max: f64,
}

/// Pairs the eigenvalues of two spectra one-to-one so that the summed
/// distance is minimal. Exact by dynamic programming over subsets for up to
/// 20 eigenvalues; larger spectra are matched greedily.
pub fn match_spectra(a: &Spectrum, b: &Spectrum) -> Result<SpectrumMatching> {
    let n = a.len();
    if b.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "spectra have {} and {} eigenvalues",
            n,
            b.len()
        )));
    }
    if n == 0 {
        return Ok(SpectrumMatching { total: 0.0, max: 0.0 });
    }
    let dist = |i: usize, j: usize| (a.eigenvalues[i] - b.eigenvalues[j]).norm();
    let pairs: Vec<(usize, usize)> = if n <= 20 {
        let full = (1usize << n) - 1;
        let mut best = vec![f64::INFINITY; 1 << n];
        let mut choice = vec![usize::MAX; 1 << n];
        best[0] = 0.0;
        for mask in 0..full {
            if !best[mask].is_finite() {
                continue;
            }
            let i = mask.count_ones() as usize;
            for j in 0..n {
                if mask & (1 << j) == 0 {
                    let next = mask | (1 << j);
                    let c = best[mask] + dist(i, j);
                    if c < best[next] {
                        best[next] = c;
                        choice[next] = j;
                    }
                }
            }
        }
        let mut pairs = Vec::with_capacity(n);
        let mut mask = full;
        for i in (0..n).rev() {
            let j = choice[mask];
            pairs.push((i, j));
            mask &= !(1 << j);
        }
        pairs
    } else {
        let mut used = vec![false; n];
        (0..n)
            .map(|i| {
                let j = (0..n)
                    .filter(|&j| !used[j])
                    .min_by(|&x, &y| dist(i, x).total_cmp(&dist(i, y)))
                    .unwrap();
                used[j] = true;
                (i, j)
            })
            .collect()
    };
    let total = pairs.iter().map(|&(i, j)| dist(i, j)).sum();
    let max = pairs.iter().map(|&(i, j)| dist(i, j)).fold(0.0, f64::max);
    Ok(SpectrumMatching { total, max })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldMetrics {
    pub name: String,
    /// `rms(rom - ref) / rms(ref)`.
    pub rel_rms: f64,
    pub max_abs: f64,
}

/// Field-mean time series of a model run and its reference data.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub times: Vec<f64>,
    pub fields: Vec<String>,
    pub rom: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
    pub metrics: Vec<FieldMetrics>,
}

impl Comparison {
    pub fn metric(&self, field: &str) -> Option<&FieldMetrics> {
        self.metrics.iter().find(|m| m.name == field)
    }

    /// Columns `t, <field>_rom, <field>_ref, ...`.
    pub fn write_series_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["t".to_string()];
        for f in &self.fields {
            header.push(format!("{f}_rom"));
            header.push(format!("{f}_ref"));
        }
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = (0..self.times.len()).map(|k| {
            let mut row = vec![self.times[k]];
            for i in 0..self.fields.len() {
                row.push(self.rom[i][k]);
                row.push(self.reference[i][k]);
            }
            row
        });
        write_csv(path, &header, rows)
    }

    /// Columns `field, rel_rms, max_abs_error`.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["field", "rel_rms", "max_abs_error"])?;
        for m in &self.metrics {
            w.write_record([
                m.name.clone(),
                format!("{:.17e}", m.rel_rms),
                format!("{:.17e}", m.max_abs),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn series_metrics(name: &str, rom: &[f64], reference: &[f64]) -> FieldMetrics {
    let n = reference.len().max(1) as f64;
    let err2: f64 = rom.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    let ref2: f64 = reference.iter().map(|b| b * b).sum();
    let max_abs = rom
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let rms_ref = (ref2 / n).sqrt();
    let rms_err = (err2 / n).sqrt();
    FieldMetrics {
        name: name.to_string(),
        rel_rms: if rms_ref > 0.0 { rms_err / rms_ref } else { rms_err },
        max_abs,
    }
}

/// Compares field means of a model trajectory against reference snapshots
/// sampled on the same time grid. An empty `fields` selects every field of
/// the reference layout.
pub fn compare(
    model: &RomModel,
    traj: &RomTrajectory,
    reference: &SnapshotSet,
    fields: &[&str],
) -> Result<Comparison> {
    if traj.len() != reference.num_snapshots() {
        return Err(Error::DimensionMismatch(format!(
            "trajectory has {} samples, reference has {}",
            traj.len(),
            reference.num_snapshots()
        )));
    }
    let rel_dt = (traj.dt - reference.dt_sample()).abs() / reference.dt_sample();
    if rel_dt > 1e-9 {
        return Err(Error::DimensionMismatch(format!(
            "sampling intervals differ: {} s vs {} s",
            traj.dt,
            reference.dt_sample()
        )));
    }
    if model.state_dim() != reference.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "model state dimension {} differs from reference {}",
            model.state_dim(),
            reference.state_dim()
        )));
    }
    let spans: Vec<FieldSpan> = if fields.is_empty() {
        reference.field_layout().to_vec()
    } else {
        fields
            .iter()
            .map(|name| {
                reference
                    .field(name)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("unknown field `{name}`")))
            })
            .collect::<Result<_>>()?
    };
    let s = reference.physical_s();
    let mut out = Comparison {
        times: traj.times(),
        fields: Vec::new(),
        rom: Vec::new(),
        reference: Vec::new(),
        metrics: Vec::new(),
    };
    for span in spans {
        let rom = field_mean_series(model, traj, &span)?;
        let block = s.rows(span.start, span.len);
        let reference: Vec<f64> = block.column_iter().map(|c| c.mean()).collect();
        out.metrics.push(series_metrics(&span.name, &rom, &reference));
        out.fields.push(span.name);
        out.rom.push(rom);
        out.reference.push(reference);
    }
    Ok(out)
}

/// Spatial-mean trajectory CSV: `t, <field>_mean, ...`.
pub fn write_trajectory_csv(
    path: &Path,
    model: &RomModel,
    traj: &RomTrajectory,
    fields: &[FieldSpan],
) -> Result<()> {
    let series: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| field_mean_series(model, traj, f))
        .collect::<Result<_>>()?;
    let mut header = vec!["t".to_string()];
    header.extend(fields.iter().map(|f| format!("{}_mean", f.name)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let times = traj.times();
    let rows = (0..traj.len()).map(|k| {
        let mut row = vec![times[k]];
        row.extend(series.iter().map(|s| s[k]));
        row
    });
    write_csv(path, &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matstore::Method;

    fn scalar_model(m: f64, p: f64) -> RomModel {
        RomModel::new(
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, m),
            Mat::from_element(1, 1, p),
            Method::Omdc,
            1.0,
            None,
        )
        .unwrap()
    }

    #[test]
    fn frozen_dynamics() {
        let l = Mat::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let model = RomModel::new(l, Mat::identity(2, 2), Mat::zeros(2, 1), Method::Dmdc, 1.0, None).unwrap();
        let x0 = Vector::from_vec(vec![0.3, -2.0, 5.0]);
        let traj = rom_simulate(&model, &x0, &Mat::from_element(1, 4, 7.0)).unwrap();
        for k in 0..5 {
            assert_eq!(traj.states.column(k), traj.states.column(0));
        }
    }

    #[test]
    fn scalar_recursion() {
        let model = scalar_model(0.5, 1.0);
        let traj = rom_simulate(&model, &Vector::zeros(1), &Mat::from_element(1, 4, 1.0)).unwrap();
        assert_eq!(traj.states.as_slice(), &[0.0, 1.0, 1.5, 1.75, 1.875]);
    }

    #[test]
    fn empty_input_gives_initial_state_only() {
        let model = scalar_model(0.5, 1.0);
        let traj = rom_simulate(&model, &Vector::from_element(1, 2.0), &Mat::zeros(1, 0)).unwrap();
        assert_eq!(traj.len(), 1);
    }

    #[test]
    fn lift_cases() {
        let l = Mat::from_column_slice(3, 1, &[0.6, 0.8, 0.0]);
        let model = RomModel::new(l.clone(), Mat::zeros(1, 1), Mat::zeros(1, 1), Method::Dmdc, 1.0, None).unwrap();
        assert_eq!(lift(&model, &Vector::zeros(1)).unwrap(), Vector::zeros(3));
        let x = l.column(0) * 2.5;
        let a = project(&model, &x).unwrap();
        assert!((lift(&model, &a).unwrap() - x).norm() < 1e-12);
    }

    #[test]
    fn diagonal_spectrum() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![0.5, 0.9]));
        let s = eigenvalues(&m).unwrap();
        assert!((s.eigenvalues[0] - Complex64::new(0.9, 0.0)).norm() < 1e-14);
        assert!((s.eigenvalues[1] - Complex64::new(0.5, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn scaled_rotation_spectrum() {
        let (rho, th) = (0.8f64, 0.4f64);
        let m = Mat::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]) * rho;
        let s = eigenvalues(&m).unwrap();
        let want = [Complex64::from_polar(rho, -th), Complex64::from_polar(rho, th)];
        for (g, w) in s.eigenvalues.iter().zip(want) {
            assert!((g - w).norm() < 1e-14);
        }
    }

    #[test]
    fn matching_is_optimal_not_greedy() {
        let a = Spectrum {
            eigenvalues: vec![Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)],
        };
        let b = Spectrum {
            eigenvalues: vec![Complex64::new(0.6, 0.0), Complex64::new(2.0, 0.0)],
        };
        let m = match_spectra(&a, &b).unwrap();
        assert!((m.total - 1.6).abs() < 1e-15);
        let c = Spectrum {
            eigenvalues: vec![Complex64::new(0.5, 0.0), Complex64::new(0.0, 0.0)],
        };
        let d = Spectrum {
            eigenvalues: vec![Complex64::new(0.4, 0.0), Complex64::new(1.0, 0.0)],
        };
        // greedy pairs 0.5 -> 0.4 first (total 1.1); the optimum crosses over
        let m = match_spectra(&c, &d).unwrap();
        assert!((m.total - 0.9).abs() < 1e-15);
        assert!((m.max - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_offset_metrics() {
        let reference = [1.0, 2.0, 3.0, 4.0];
        let rom: Vec<f64> = reference.iter().map(|v| v + 0.5).collect();
        let m = series_metrics("x", &rom, &reference);
        let rms_ref = (30.0f64 / 4.0).sqrt();
        assert!((m.rel_rms - 0.5 / rms_ref).abs() < 1e-15);
        assert!((m.max_abs - 0.5).abs() < 1e-15);
        assert_eq!(series_metrics("x", &reference, &reference).rel_rms, 0.0);
    }
}
