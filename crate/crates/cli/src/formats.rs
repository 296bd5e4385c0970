//! On-disk formats. CSV files start with a `# mfginv-<kind> v<N>` line
//! followed by a column header; JSON files carry `format` and `version`
//! fields. Readers reject other versions.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use mfg_inverse::boundary::{BoundaryOps, BoundaryTrace};
use mfg_inverse::forward::{EventData, GapRecord, PrimalDualState};
use mfg_inverse::inverse::ResRecord;
use mfg_inverse::kernel::FrequencySet;
use mfg_inverse::model::ModelParams;
use mfg_inverse::{Error, Grid, Result};

use crate::config::RunConfig;

pub const VERSION: u32 = 1;

fn schema(file: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

// ----------------------------------------------------------------------------
// CSV

fn csv_writer(path: &Path, kind: &str, columns: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# mfginv-{kind} v{VERSION}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns).map_err(csv_io)?;
    Ok(w)
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn finish(w: csv::Writer<BufWriter<File>>) -> Result<()> {
    let mut inner = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    inner.flush()?;
    Ok(())
}

fn write_row(w: &mut csv::Writer<BufWriter<File>>, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(csv_io)
}

/// Rows of a versioned CSV file as numbers, each with its 1-based line.
fn read_csv(path: &Path, kind: &str, columns: &[&str]) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let expected = format!("# mfginv-{kind} v{VERSION}");
    if first.trim_end() != expected {
        return Err(schema(
            path,
            1,
            format!("expected header line `{expected}`, found `{}`", first.trim_end()),
        ));
    }
    let mut rest = String::new();
    reader.read_to_string(&mut rest)?;
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(rest.as_bytes());
    let header = csv.headers().map_err(|e| schema(path, 2, e.to_string()))?.clone();
    if header.iter().ne(columns.iter().copied()) {
        return Err(schema(path, 2, format!("expected columns {columns:?}")));
    }
    let mut rows = Vec::new();
    for rec in csv.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize + 1).unwrap_or(0);
            schema(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize + 1).unwrap_or(0);
        let values = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| schema(path, line, format!("not a number: {e}")))?;
        rows.push((line, values));
    }
    Ok(rows)
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn index(path: &Path, line: usize, v: f64, bound: usize, what: &str) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || v >= bound as f64 {
        return Err(schema(path, line, format!("{what} {v} out of range 0..{bound}")));
    }
    Ok(v as usize)
}

const TRACE_COLUMNS: [&str; 6] = ["t_index", "boundary_node_index", "x", "y", "rho", "flux"];

pub fn write_trace(path: &Path, grid: &Grid, ops: &BoundaryOps<f64>, trace: &BoundaryTrace<f64>) -> Result<()> {
    let mut w = csv_writer(path, "trace", &TRACE_COLUMNS)?;
    for k in 0..trace.rho.dim().0 {
        for (b, n) in ops.nodes().iter().enumerate() {
            write_row(
                &mut w,
                &[
                    k.to_string(),
                    b.to_string(),
                    fmt(grid.x(n.i)),
                    fmt(grid.y(n.j)),
                    fmt(trace.rho[[k, b]]),
                    fmt(trace.flux[[k, b]]),
                ],
            )?;
        }
    }
    finish(w)
}

/// Reads a trace; every `(t, node)` pair must appear exactly once.
pub fn read_trace(path: &Path, nt: usize, nb: usize) -> Result<BoundaryTrace<f64>> {
    let rows = read_csv(path, "trace", &TRACE_COLUMNS)?;
    let mut out = BoundaryTrace::zeros(nt, nb);
    let mut seen = Array2::from_elem((nt, nb), false);
    for (line, r) in &rows {
        let k = index(path, *line, r[0], nt, "t_index")?;
        let b = index(path, *line, r[1], nb, "boundary_node_index")?;
        if seen[[k, b]] {
            return Err(schema(path, *line, format!("duplicate sample ({k}, {b})")));
        }
        if !(r[4].is_finite() && r[5].is_finite()) {
            return Err(schema(path, *line, "non-finite sample"));
        }
        seen[[k, b]] = true;
        out.rho[[k, b]] = r[4];
        out.flux[[k, b]] = r[5];
    }
    if rows.len() != nt * nb {
        return Err(schema(
            path,
            rows.len() + 2,
            format!("expected {} samples, found {}", nt * nb, rows.len()),
        ));
    }
    Ok(out)
}

const RES_COLUMNS: [&str; 4] = ["n", "res", "kappa_max", "mu_l1"];

pub fn write_res_history(path: &Path, rows: &[ResRecord<f64>]) -> Result<()> {
    let mut w = csv_writer(path, "res", &RES_COLUMNS)?;
    for r in rows {
        write_row(&mut w, &[r.n.to_string(), fmt(r.res), fmt(r.kappa_max), fmt(r.mu_l1)])?;
    }
    finish(w)
}

/// `(n, Res, max κ, ‖μ − μ₀‖₁)` rows.
pub fn read_res_history(path: &Path) -> Result<Vec<(usize, f64, f64, f64)>> {
    read_csv(path, "res", &RES_COLUMNS)?
        .into_iter()
        .map(|(line, r)| Ok((index(path, line, r[0], usize::MAX, "n")?, r[1], r[2], r[3])))
        .collect()
}

pub fn write_gap_history(path: &Path, rows: &[GapRecord<f64>]) -> Result<()> {
    let mut w = csv_writer(path, "gap", &["iteration", "gap", "mass_drift"])?;
    for r in rows {
        write_row(&mut w, &[r.iteration.to_string(), fmt(r.gap), fmt(r.mass_drift)])?;
    }
    finish(w)
}

pub fn read_gap_history(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    read_csv(path, "gap", &["iteration", "gap", "mass_drift"])?
        .into_iter()
        .map(|(line, r)| Ok((index(path, line, r[0], usize::MAX, "iteration")?, r[1], r[2])))
        .collect()
}

const KAPPA_COLUMNS: [&str; 3] = ["x", "y", "value"];

pub fn write_kappa(path: &Path, grid: &Grid, kappa: &Array2<f64>) -> Result<()> {
    let mut w = csv_writer(path, "kappa", &KAPPA_COLUMNS)?;
    for ((i, j), v) in kappa.indexed_iter() {
        write_row(&mut w, &[fmt(grid.x(i)), fmt(grid.y(j)), fmt(*v)])?;
    }
    finish(w)
}

/// Reads a speed field written by [`write_kappa`] on the same grid.
pub fn read_kappa(path: &Path, grid: &Grid) -> Result<Array2<f64>> {
    let rows = read_csv(path, "kappa", &KAPPA_COLUMNS)?;
    if rows.len() != grid.nx * grid.ny {
        return Err(schema(
            path,
            rows.len() + 2,
            format!("expected {} nodes", grid.nx * grid.ny),
        ));
    }
    let mut out = grid.spatial_zeros();
    for (n, (line, r)) in rows.iter().enumerate() {
        let (i, j) = (n / grid.ny, n % grid.ny);
        if (r[0] - grid.x(i)).abs() > 1e-9 || (r[1] - grid.y(j)).abs() > 1e-9 {
            return Err(schema(path, *line, "node coordinates do not match the grid"));
        }
        out[[i, j]] = r[2];
    }
    Ok(out)
}

const MU_COLUMNS: [&str; 3] = ["omega1", "omega2", "mu"];

pub fn write_mu(path: &Path, freqs: &FrequencySet<f64>, mu: &[f64]) -> Result<()> {
    let mut w = csv_writer(path, "mu", &MU_COLUMNS)?;
    for (o, m) in freqs.omegas().iter().zip(mu) {
        write_row(&mut w, &[fmt(o[0]), fmt(o[1]), fmt(*m)])?;
    }
    finish(w)
}

pub fn read_mu(path: &Path) -> Result<Vec<([f64; 2], f64)>> {
    Ok(read_csv(path, "mu", &MU_COLUMNS)?
        .into_iter()
        .map(|(_, r)| ([r[0], r[1]], r[2]))
        .collect())
}

// ----------------------------------------------------------------------------
// JSON

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| schema(path, e.line(), e.to_string()))
}

fn check_header(path: &Path, format: &str, expected: &str, version: u32) -> Result<()> {
    if format != expected || version != VERSION {
        return Err(schema(
            path,
            1,
            format!("expected {expected} v{VERSION}, found {format} v{version}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventFile {
    format: String,
    version: u32,
    index: usize,
    nx: usize,
    ny: usize,
    /// Row-major `(nx, ny)` values.
    rho0: Vec<f64>,
    g: Vec<f64>,
}

pub fn write_event(path: &Path, index: usize, event: &EventData<f64>) -> Result<()> {
    let (nx, ny) = event.rho0.dim();
    write_json(
        path,
        &EventFile {
            format: "mfginv-event".into(),
            version: VERSION,
            index,
            nx,
            ny,
            rho0: event.rho0.iter().copied().collect(),
            g: event.g.iter().copied().collect(),
        },
    )
}

pub fn read_event(path: &Path, grid: &Grid) -> Result<(usize, EventData<f64>)> {
    let f: EventFile = read_json(path)?;
    check_header(path, &f.format, "mfginv-event", f.version)?;
    if (f.nx, f.ny) != grid.spatial_shape() || f.rho0.len() != f.nx * f.ny || f.g.len() != f.nx * f.ny {
        return Err(schema(path, 1, "event arrays do not match the grid"));
    }
    let rho0 = Array2::from_shape_vec((f.nx, f.ny), f.rho0).expect("length checked");
    let g = Array2::from_shape_vec((f.nx, f.ny), f.g).expect("length checked");
    let event = EventData::new(grid, rho0, g).map_err(|e| schema(path, 1, e.to_string()))?;
    Ok((f.index, event))
}

/// Per-event record of the generating forward solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub index: usize,
    pub iterations: usize,
    pub gap: f64,
    pub mass_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub seed: u64,
    pub grid_hash: String,
    pub events: usize,
    pub generation: Vec<GenerationRecord>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

pub fn event_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("event_{i}.json"))
}

pub fn trace_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("trace_{i}.csv"))
}

pub fn write_dataset_manifest(dir: &Path, m: &DatasetManifest) -> Result<()> {
    write_json(&dir.join(DATASET_MANIFEST), m)
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    if !path.is_file() {
        return Err(Error::NoDataset(dir.to_path_buf()));
    }
    let m: DatasetManifest = read_json(&path)?;
    check_header(&path, &m.format, "mfginv-dataset", m.version)?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub format: String,
    pub version: u32,
    pub nx: usize,
    pub ny: usize,
    pub kappa: Vec<f64>,
    pub kappa0: Vec<f64>,
    pub omegas: Vec<[f64; 2]>,
    pub mu: Vec<f64>,
    pub mu0: Vec<f64>,
    pub nu: f64,
    pub k0: f64,
}

pub fn write_params(path: &Path, freqs: &FrequencySet<f64>, p: &ModelParams<f64>) -> Result<()> {
    let (nx, ny) = p.kappa.dim();
    write_json(
        path,
        &ParamsFile {
            format: "mfginv-params".into(),
            version: VERSION,
            nx,
            ny,
            kappa: p.kappa.iter().copied().collect(),
            kappa0: p.kappa0.iter().copied().collect(),
            omegas: freqs.omegas().to_vec(),
            mu: p.mu.clone(),
            mu0: p.mu0.clone(),
            nu: p.nu,
            k0: p.k0,
        },
    )
}

pub fn read_params(path: &Path, grid: &Grid, freqs: &FrequencySet<f64>) -> Result<ModelParams<f64>> {
    let f: ParamsFile = read_json(path)?;
    check_header(path, &f.format, "mfginv-params", f.version)?;
    let n = grid.nx * grid.ny;
    if (f.nx, f.ny) != grid.spatial_shape() || f.kappa.len() != n || f.kappa0.len() != n {
        return Err(schema(path, 1, "speed field does not match the grid"));
    }
    if f.omegas.len() != freqs.len() || f.omegas.iter().zip(freqs.omegas()).any(|(a, b)| a != b) {
        return Err(schema(path, 1, "frequency lattice does not match the configuration"));
    }
    let p = ModelParams {
        kappa: Array2::from_shape_vec((f.nx, f.ny), f.kappa).expect("length checked"),
        mu: f.mu,
        nu: f.nu,
        k0: f.k0,
        kappa0: Array2::from_shape_vec((f.nx, f.ny), f.kappa0).expect("length checked"),
        mu0: f.mu0,
    };
    p.validate(grid, freqs).map_err(|e| schema(path, 1, e.to_string()))?;
    Ok(p)
}

// ----------------------------------------------------------------------------
// binary fields

const FIELDS_MAGIC: &[u8; 8] = b"MFGFLD01";

/// Columnar little-endian `f64` file: magic, `nt, nx, ny, columns` as `u64`,
/// then each column of `nt·nx·ny` values in `(t, i, j)` row-major order.
/// Columns are `rho, m_x, m_y, phi`.
pub fn write_fields(path: &Path, state: &PrimalDualState<f64>) -> Result<()> {
    let (nt, nx, ny) = state.rho.dim();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(FIELDS_MAGIC)?;
    for v in [nt, nx, ny, 4] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for col in [&state.rho, &state.m.x, &state.m.y, &state.phi] {
        for v in col.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads back the columns of [`write_fields`].
pub fn read_fields(path: &Path) -> Result<Vec<Array3<f64>>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 40 || &bytes[..8] != FIELDS_MAGIC {
        return Err(schema(path, 0, "not a field file"));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().expect("8 bytes")) as usize;
    let (nt, nx, ny, cols) = (word(0), word(1), word(2), word(3));
    let n = nt * nx * ny;
    if bytes.len() != 40 + 8 * n * cols {
        return Err(schema(path, 0, "field file length does not match its header"));
    }
    Ok((0..cols)
        .map(|c| {
            let start = 40 + 8 * n * c;
            let values = bytes[start..start + 8 * n]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Array3::from_shape_vec((nt, nx, ny), values).expect("length checked")
        })
        .collect())
}
