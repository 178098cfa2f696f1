//! Snapshot matrices, input sequences and identified models, plus their
//! on-disk formats.
//!
//! Matrices are stored in a small binary container: the 8-byte magic
//! `OMDCMAT1`, row and column counts as little-endian `u64`, then the entries
//! as little-endian `f64` in column-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Mat, Vector};

pub const MATRIX_MAGIC: &[u8; 8] = b"OMDCMAT1";
pub const MATRIX_HEADER_LEN: usize = 24;

const SNAPSHOT_META: &str = "meta.json";
const MODEL_META: &str = "model.json";

/// Scales below this are treated as zero when normalizing a field.
const MIN_SCALE: f64 = 1e-14;

pub(crate) fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} contains NaN or Inf")))
    }
}

/// Splits `S = [x_0 .. x_{m-1}]` into the shifted pair
/// `X = [x_0 .. x_{m-2}]`, `Y = [x_1 .. x_{m-1}]`.
pub fn split_snapshots(s: &Mat) -> Result<(Mat, Mat)> {
    let m = s.ncols();
    if m < 2 {
        return Err(Error::InsufficientSnapshots { columns: m });
    }
    let x = s.columns(0, m - 1).into_owned();
    let y = s.columns(1, m - 1).into_owned();
    Ok((x, y))
}

/// Stacks state and input snapshots into `Omega = [X; U]`.
pub fn stack_omega(x: &Mat, u: &Mat) -> Result<Mat> {
    if x.ncols() != u.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "X has {} columns but U has {}",
            x.ncols(),
            u.ncols()
        )));
    }
    let (n, p) = (x.nrows(), u.nrows());
    let mut omega = Mat::zeros(n + p, x.ncols());
    omega.rows_mut(0, n).copy_from(x);
    omega.rows_mut(n, p).copy_from(u);
    Ok(omega)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpan {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl FieldSpan {
    pub fn new(name: impl Into<String>, start: usize, len: usize) -> Self {
        Self {
            name: name.into(),
            start,
            len,
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Affine map `x -> (x - shift) / scale` applied to the rows of one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldNorm {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub shift: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub fields: Vec<FieldNorm>,
}

impl NormSpec {
    pub fn state_dim(&self) -> usize {
        self.fields.iter().map(|f| f.start + f.len).max().unwrap_or(0)
    }

    /// Maps the rows of every column of `m` into normalized coordinates.
    pub fn apply(&self, m: &mut Mat) {
        for f in &self.fields {
            m.rows_mut(f.start, f.len)
                .apply(|v| *v = (*v - f.shift) / f.scale);
        }
    }

    /// Inverse of [`NormSpec::apply`].
    pub fn invert(&self, m: &mut Mat) {
        for f in &self.fields {
            m.rows_mut(f.start, f.len)
                .apply(|v| *v = *v * f.scale + f.shift);
        }
    }

    pub fn apply_vec(&self, v: &mut Vector) {
        for f in &self.fields {
            v.rows_mut(f.start, f.len)
                .apply(|x| *x = (*x - f.shift) / f.scale);
        }
    }

    pub fn invert_vec(&self, v: &mut Vector) {
        for f in &self.fields {
            v.rows_mut(f.start, f.len)
                .apply(|x| *x = *x * f.scale + f.shift);
        }
    }
}

/// Snapshot matrix `S` (n x m) together with the inputs `U` (p x (m-1)) that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    s: Mat,
    u: Mat,
    dt_sample: f64,
    field_layout: Vec<FieldSpan>,
    norm_spec: Option<NormSpec>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    dt_sample: f64,
    field_layout: Vec<FieldSpan>,
    norm_spec: Option<NormSpec>,
}

impl SnapshotSet {
    pub fn new(s: Mat, u: Mat, dt_sample: f64, field_layout: Vec<FieldSpan>) -> Result<Self> {
        Self::with_norm(s, u, dt_sample, field_layout, None)
    }

    pub fn with_norm(
        s: Mat,
        u: Mat,
        dt_sample: f64,
        field_layout: Vec<FieldSpan>,
        norm_spec: Option<NormSpec>,
    ) -> Result<Self> {
        if s.nrows() == 0 || s.ncols() == 0 {
            return Err(Error::DimensionMismatch("empty snapshot matrix".into()));
        }
        if u.ncols() + 1 != s.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "U must have one column fewer than S: S has {}, U has {}",
                s.ncols(),
                u.ncols()
            )));
        }
        if !(dt_sample > 0.0 && dt_sample.is_finite()) {
            return Err(Error::Config(format!("dt_sample must be positive, got {dt_sample}")));
        }
        ensure_finite(&s, "S")?;
        ensure_finite(&u, "U")?;
        check_layout(&field_layout, s.nrows())?;
        if let Some(ns) = &norm_spec {
            if ns.state_dim() > s.nrows() {
                return Err(Error::DimensionMismatch(
                    "normalization spans rows beyond the state dimension".into(),
                ));
            }
        }
        Ok(Self {
            s,
            u,
            dt_sample,
            field_layout,
            norm_spec,
        })
    }

    /// Single-field layout covering all rows.
    pub fn unlabeled(s: Mat, u: Mat, dt_sample: f64) -> Result<Self> {
        let n = s.nrows();
        Self::new(s, u, dt_sample, vec![FieldSpan::new("x", 0, n)])
    }

    pub fn s(&self) -> &Mat {
        &self.s
    }

    pub fn u(&self) -> &Mat {
        &self.u
    }

    pub fn dt_sample(&self) -> f64 {
        self.dt_sample
    }

    pub fn field_layout(&self) -> &[FieldSpan] {
        &self.field_layout
    }

    pub fn norm_spec(&self) -> Option<&NormSpec> {
        self.norm_spec.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.s.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn num_snapshots(&self) -> usize {
        self.s.ncols()
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpan> {
        self.field_layout.iter().find(|f| f.name == name)
    }

    /// Snapshot matrix in physical units, undoing any normalization.
    pub fn physical_s(&self) -> Mat {
        let mut s = self.s.clone();
        if let Some(ns) = &self.norm_spec {
            ns.invert(&mut s);
        }
        s
    }

    pub fn split(&self) -> Result<(Mat, Mat)> {
        split_snapshots(&self.s)
    }

    /// Writes `S.mat`, `U.mat` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_matrix(&dir.join("S.mat"), &self.s)?;
        save_matrix(&dir.join("U.mat"), &self.u)?;
        let meta = SnapshotMeta {
            dt_sample: self.dt_sample,
            field_layout: self.field_layout.clone(),
            norm_spec: self.norm_spec.clone(),
        };
        fs::write(dir.join(SNAPSHOT_META), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let s = load_matrix(&dir.join("S.mat"))?;
        let u = load_matrix(&dir.join("U.mat"))?;
        let meta: SnapshotMeta = serde_json::from_slice(&fs::read(dir.join(SNAPSHOT_META))?)?;
        Self::with_norm(s, u, meta.dt_sample, meta.field_layout, meta.norm_spec)
    }
}

fn check_layout(layout: &[FieldSpan], n: usize) -> Result<()> {
    if layout.is_empty() {
        return Err(Error::Config("field layout is empty".into()));
    }
    let mut spans: Vec<&FieldSpan> = layout.iter().collect();
    spans.sort_by_key(|f| f.start);
    let mut next = 0;
    for f in spans {
        if f.start != next || f.len == 0 {
            return Err(Error::Config(format!(
                "field layout must partition rows 0..{n} without gaps or overlap (field `{}`)",
                f.name
            )));
        }
        next = f.end();
    }
    if next != n {
        return Err(Error::Config(format!(
            "field layout covers {next} rows but the state has {n}"
        )));
    }
    Ok(())
}

/// Shifts every field to zero mean and scales it to unit standard deviation,
/// both taken over all rows and snapshots of the field. An already
/// normalized set is re-normalized from its physical values.
pub fn normalize_fields(set: &SnapshotSet) -> SnapshotSet {
    let s = set.physical_s();
    let mut fields = Vec::with_capacity(set.field_layout.len());
    for f in &set.field_layout {
        let block = s.rows(f.start, f.len);
        let count = block.len() as f64;
        let mean = block.sum() / count;
        let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let sd = var.sqrt();
        fields.push(FieldNorm {
            name: f.name.clone(),
            start: f.start,
            len: f.len,
            shift: mean,
            scale: if sd < MIN_SCALE { 1.0 } else { sd },
        });
    }
    let spec = NormSpec { fields };
    let mut normalized = s;
    spec.apply(&mut normalized);
    SnapshotSet {
        s: normalized,
        u: set.u.clone(),
        dt_sample: set.dt_sample,
        field_layout: set.field_layout.clone(),
        norm_spec: Some(spec),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "dmdc")]
    Dmdc,
    #[serde(rename = "omdc")]
    Omdc,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Dmdc => f.write_str("dmdc"),
            Method::Omdc => f.write_str("omdc"),
        }
    }
}

/// Identified reduced model `a_{k+1} = M a_k + P u_k`, `x_k ~ L a_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RomModel {
    pub l: Mat,
    pub m: Mat,
    pub p: Mat,
    pub method: Method,
    pub dt_sample: f64,
    pub norm_spec: Option<NormSpec>,
}

/// Orthonormality tolerance on the mode matrix.
pub const ROM_ORTHO_TOL: f64 = 1e-10;

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    method: Method,
    r: usize,
    n: usize,
    p: usize,
    dt_sample: f64,
    norm_spec: Option<NormSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    solver: Option<serde_json::Value>,
}

impl RomModel {
    pub fn new(
        l: Mat,
        m: Mat,
        p: Mat,
        method: Method,
        dt_sample: f64,
        norm_spec: Option<NormSpec>,
    ) -> Result<Self> {
        let (n, r) = l.shape();
        if r == 0 || r > n {
            return Err(Error::DimensionMismatch(format!("L is {n}x{r}; need 1 <= r <= n")));
        }
        if m.shape() != (r, r) {
            return Err(Error::DimensionMismatch(format!(
                "M is {}x{}, expected {r}x{r}",
                m.nrows(),
                m.ncols()
            )));
        }
        if p.nrows() != r {
            return Err(Error::DimensionMismatch(format!(
                "P has {} rows, expected {r}",
                p.nrows()
            )));
        }
        ensure_finite(&l, "L")?;
        ensure_finite(&m, "M")?;
        ensure_finite(&p, "P")?;
        let drift = (l.tr_mul(&l) - Mat::identity(r, r)).norm();
        if drift > ROM_ORTHO_TOL {
            return Err(Error::Numerical(format!(
                "mode matrix is not orthonormal: |L^T L - I| = {drift:.3e}"
            )));
        }
        if let Some(ns) = &norm_spec {
            if ns.state_dim() > n {
                return Err(Error::DimensionMismatch(
                    "normalization spans rows beyond the state dimension".into(),
                ));
            }
        }
        Ok(Self {
            l,
            m,
            p,
            method,
            dt_sample,
            norm_spec,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.p.ncols()
    }

    /// Writes `L.mat`, `M.mat`, `P.mat` and `model.json`. `solver` is an
    /// optional free-form report stored alongside the metadata.
    pub fn save(&self, dir: &Path, solver: Option<serde_json::Value>) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_matrix(&dir.join("L.mat"), &self.l)?;
        save_matrix(&dir.join("M.mat"), &self.m)?;
        save_matrix(&dir.join("P.mat"), &self.p)?;
        let meta = ModelMeta {
            method: self.method,
            r: self.rank(),
            n: self.state_dim(),
            p: self.input_dim(),
            dt_sample: self.dt_sample,
            norm_spec: self.norm_spec.clone(),
            solver,
        };
        fs::write(dir.join(MODEL_META), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_slice(&fs::read(dir.join(MODEL_META))?)?;
        let l = load_matrix(&dir.join("L.mat"))?;
        let m = load_matrix(&dir.join("M.mat"))?;
        let p = load_matrix(&dir.join("P.mat"))?;
        if l.shape() != (meta.n, meta.r) || p.ncols() != meta.p {
            return Err(Error::Format(format!(
                "model metadata (n={}, r={}, p={}) disagrees with stored matrices",
                meta.n, meta.r, meta.p
            )));
        }
        Self::new(l, m, p, meta.method, meta.dt_sample, meta.norm_spec)
    }
}

pub fn encode_matrix(m: &Mat) -> Vec<u8> {
    let mut buf = Vec::with_capacity(MATRIX_HEADER_LEN + 8 * m.len());
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    // nalgebra storage is column-major already
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Mat> {
    if bytes.len() < MATRIX_HEADER_LEN {
        return Err(Error::Format(format!(
            "file too short for header: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..8] != MATRIX_MAGIC {
        return Err(Error::Format("bad magic, expected OMDCMAT1".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::Format(format!("implausible size {rows}x{cols}")))?;
    let payload = &bytes[MATRIX_HEADER_LEN..];
    if payload.len() != count {
        return Err(Error::Format(format!(
            "payload has {} bytes, header declares {rows}x{cols} ({count} bytes)",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = Mat::from_vec(rows as usize, cols as usize, data);
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Format("payload contains NaN or Inf".into()));
    }
    Ok(m)
}

pub fn save_matrix(path: &Path, m: &Mat) -> Result<()> {
    ensure_finite(m, "matrix")?;
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_matrix(m))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Mat> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_matrix(&bytes)
}

/// Writes a CSV file with a header row.
pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:.17e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Input schedule as CSV: `t,<input names...>`, one row per step.
pub fn write_inputs_csv(path: &Path, u: &Mat, dt: f64, names: &[&str]) -> Result<()> {
    let mut header = vec!["t"];
    header.extend_from_slice(names);
    if names.len() != u.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} names for {} input rows",
            names.len(),
            u.nrows()
        )));
    }
    let rows = (0..u.ncols()).map(|k| {
        let mut row = vec![k as f64 * dt];
        row.extend(u.column(k).iter());
        row
    });
    write_csv(path, &header, rows)
}

/// Reads an input schedule CSV into a `p x K` matrix. A leading `t` column
/// is ignored.
pub fn read_inputs_csv(path: &Path) -> Result<Mat> {
    let mut rdr = csv::Reader::from_path(path)?;
    let skip = usize::from(
        rdr.headers()?
            .get(0)
            .is_some_and(|h| h.trim().eq_ignore_ascii_case("t")),
    );
    let width = rdr.headers()?.len().saturating_sub(skip);
    let mut columns: Vec<f64> = Vec::new();
    let mut k = 0;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != width + skip {
            return Err(Error::Format(format!("row {k} has {} fields", rec.len())));
        }
        for field in rec.iter().skip(skip) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("row {k}: cannot parse `{field}`")))?;
            columns.push(v);
        }
        k += 1;
    }
    let m = Mat::from_vec(width, k, columns);
    ensure_finite(&m, "input schedule")?;
    Ok(m)
}
