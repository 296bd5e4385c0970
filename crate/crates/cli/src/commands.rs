//! The four subcommands, as library functions so tests can drive them.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use mfg_inverse::boundary::BoundaryOps;
use mfg_inverse::forward::{solve_forward, PrimalDualState};
use mfg_inverse::inverse::{run_inversion, InversionResult, MeasurementEvent};
use mfg_inverse::kernel::FrequencySet;
use mfg_inverse::model::{MfgContext, ModelParams};
use mfg_inverse::scenario::{
    background_params, event_catalog, example_params, generate_measurements, ExampleSpec, KAPPA_BACKGROUND,
};
use mfg_inverse::{Error, Result};

use crate::config::{K0Policy, RunConfig};
use crate::formats::{self, DatasetManifest, GenerationRecord, VERSION};

/// Command-line overrides of configuration values.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub events: Option<usize>,
    /// Forward iteration cap for `generate`/`forward`, outer iteration count
    /// for `invert`.
    pub max_iter: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig, outer: bool) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.scenario.seed = s;
        }
        if let Some(e) = self.events {
            cfg.scenario.events = e;
        }
        if let Some(n) = self.max_iter {
            if outer {
                cfg.inverse.n_max = n;
            } else {
                cfg.solver.max_iter = n;
            }
        }
        cfg.validate()
    }
}

pub struct Setup {
    pub ctx: MfgContext<f64>,
    pub ops: BoundaryOps<f64>,
}

impl Setup {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let grid = cfg.grid()?;
        let ops = BoundaryOps::new(&grid)?;
        let freqs = FrequencySet::lattice(cfg.model.k1_max, cfg.model.k2_max);
        Ok(Self {
            ctx: MfgContext::new(grid, freqs),
            ops,
        })
    }
}

/// Applies the configured background speed and `k₀` policy. The catalog
/// examples are defined over a background of 2; a different `kappa0` shifts
/// the whole speed field.
fn configure(cfg: &RunConfig, ctx: &MfgContext<f64>, mut p: ModelParams<f64>) -> ModelParams<f64> {
    let shift = cfg.model.kappa0 - KAPPA_BACKGROUND;
    p.kappa.mapv_inplace(|v| v + shift);
    p.kappa0.mapv_inplace(|v| v + shift);
    p.k0 = match cfg.model.k0 {
        K0Policy::Normalise => ctx.features.normalising_offset(&ctx.grid, &p.mu),
        K0Policy::Fixed(v) => v,
    };
    p
}

pub fn truth_params(cfg: &RunConfig, ctx: &MfgContext<f64>) -> Result<ModelParams<f64>> {
    let spec = ExampleSpec::get(cfg.scenario.example)?;
    Ok(configure(cfg, ctx, example_params(ctx, &spec, cfg.model.nu)?))
}

pub fn initial_params(cfg: &RunConfig, ctx: &MfgContext<f64>) -> Result<ModelParams<f64>> {
    Ok(configure(cfg, ctx, background_params(ctx, cfg.model.nu)?))
}

pub const TRUTH_FILE: &str = "params_true.json";

/// Writes the measurement dataset of the configured scenario to `out`.
pub fn generate(cfg: &RunConfig, ov: &Overrides, out: &Path) -> Result<DatasetManifest> {
    let mut cfg = cfg.clone();
    ov.apply(&mut cfg, false)?;
    std::fs::create_dir_all(out)?;
    let setup = Setup::new(&cfg)?;
    let (ctx, ops) = (&setup.ctx, &setup.ops);
    let truth = truth_params(&cfg, ctx)?;
    let events = event_catalog(&ctx.grid, cfg.scenario.events)?;
    let generated = generate_measurements(
        ctx,
        ops,
        &truth,
        &events,
        &cfg.forward_settings(),
        cfg.scenario.noise,
        cfg.scenario.seed,
    )?;
    let mut records = Vec::with_capacity(generated.len());
    for (i, g) in generated.iter().enumerate() {
        formats::write_event(&formats::event_path(out, i), i, &g.measurement.data)?;
        formats::write_trace(&formats::trace_path(out, i), &ctx.grid, ops, &g.measurement.trace)?;
        records.push(GenerationRecord {
            index: i,
            iterations: g.iterations,
            gap: g.gap,
            mass_drift: g.mass_drift,
        });
    }
    formats::write_params(&out.join(TRUTH_FILE), &ctx.freqs, &truth)?;
    let manifest = DatasetManifest {
        format: "mfginv-dataset".into(),
        version: VERSION,
        seed: cfg.scenario.seed,
        grid_hash: cfg.grid_hash(),
        events: generated.len(),
        generation: records,
        config: cfg,
    };
    formats::write_dataset_manifest(out, &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardSummary {
    pub converged: bool,
    pub iterations: usize,
    pub gap: f64,
    pub mass_drift: f64,
}

/// Cold-start forward solve of one event file. Parameters default to the
/// ground truth of the configured example.
pub fn forward(
    cfg: &RunConfig,
    ov: &Overrides,
    event: &Path,
    params: Option<&Path>,
    out: &Path,
) -> Result<ForwardSummary> {
    let mut cfg = cfg.clone();
    ov.apply(&mut cfg, false)?;
    std::fs::create_dir_all(out)?;
    let setup = Setup::new(&cfg)?;
    let ctx = &setup.ctx;
    let (_, event) = formats::read_event(event, &ctx.grid)?;
    let params = match params {
        Some(p) => formats::read_params(p, &ctx.grid, &ctx.freqs)?,
        None => truth_params(&cfg, ctx)?,
    };
    let sol = solve_forward(
        ctx,
        &event,
        &params,
        PrimalDualState::cold_start(ctx, &event),
        &cfg.forward_settings(),
    )?;
    formats::write_fields(&out.join("fields.bin"), &sol.state)?;
    formats::write_gap_history(&out.join("gap_history.csv"), &sol.history)?;
    let summary = ForwardSummary {
        converged: sol.converged,
        iterations: sol.iterations,
        gap: sol.gap,
        mass_drift: sol.state.mass_drift(&ctx.grid),
    };
    std::fs::write(out.join("forward.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultManifest {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub dataset: PathBuf,
    pub seed: u64,
    pub grid_hash: String,
    pub events: usize,
    pub iterations: usize,
    pub n_opt: usize,
    pub res_opt: f64,
    pub res_initial: f64,
}

#[derive(Serialize)]
struct CheckpointFile<'a> {
    format: &'static str,
    version: u32,
    checkpoints: Vec<CheckpointRow<'a>>,
}

#[derive(Serialize)]
struct CheckpointRow<'a> {
    n: usize,
    kappa: Vec<f64>,
    mu: &'a [f64],
}

/// Reads the first `cfg.scenario.events` events of a dataset.
pub fn load_dataset(cfg: &RunConfig, setup: &Setup, dir: &Path) -> Result<Vec<MeasurementEvent<f64>>> {
    let manifest = formats::read_dataset_manifest(dir)?;
    if manifest.grid_hash != cfg.grid_hash() {
        return Err(Error::Config(format!(
            "dataset {} was generated on a different grid",
            dir.display()
        )));
    }
    if cfg.scenario.events > manifest.events {
        return Err(Error::Config(format!(
            "{} events requested, dataset has {}",
            cfg.scenario.events, manifest.events
        )));
    }
    (0..cfg.scenario.events)
        .map(|i| {
            let (_, data) = formats::read_event(&formats::event_path(dir, i), &setup.ctx.grid)?;
            let trace = formats::read_trace(&formats::trace_path(dir, i), setup.ctx.grid.nt, setup.ops.len())?;
            Ok(MeasurementEvent { data, trace })
        })
        .collect()
}

/// Runs the inversion on a dataset and writes the reconstruction to `out`.
/// Without an `--events` override every event of the dataset is used.
pub fn invert(
    cfg: &RunConfig,
    ov: &Overrides,
    dataset: &Path,
    out: &Path,
    mut progress: impl FnMut(usize, f64),
) -> Result<InversionResult<f64>> {
    let mut cfg = cfg.clone();
    if ov.events.is_none() {
        cfg.scenario.events = formats::read_dataset_manifest(dataset)?.events;
    }
    ov.apply(&mut cfg, true)?;
    let setup = Setup::new(&cfg)?;
    let events = load_dataset(&cfg, &setup, dataset)?;
    let ctx = &setup.ctx;
    let init = initial_params(&cfg, ctx)?;
    let result = run_inversion(ctx, &setup.ops, &events, &init, &cfg.inversion_config(), |r| {
        progress(r.n, r.res)
    })?;

    std::fs::create_dir_all(out)?;
    formats::write_kappa(&out.join("kappa_opt.csv"), &ctx.grid, &result.params_opt.kappa)?;
    formats::write_mu(&out.join("mu_opt.csv"), &ctx.freqs, &result.params_opt.mu)?;
    formats::write_res_history(&out.join("res_history.csv"), &result.res_history)?;
    formats::write_params(&out.join("params_opt.json"), &ctx.freqs, &result.params_opt)?;
    let rows = result
        .checkpoints
        .iter()
        .map(|c| CheckpointRow {
            n: c.n,
            kappa: c.kappa.iter().copied().collect(),
            mu: &c.mu,
        })
        .collect();
    let file = CheckpointFile {
        format: "mfginv-checkpoints",
        version: VERSION,
        checkpoints: rows,
    };
    std::fs::write(out.join("checkpoints.json"), serde_json::to_string(&file)? + "\n")?;
    let manifest = ResultManifest {
        format: "mfginv-result".into(),
        version: VERSION,
        dataset: dataset.to_path_buf(),
        seed: cfg.scenario.seed,
        grid_hash: cfg.grid_hash(),
        events: events.len(),
        iterations: result.res_history.len() - 1,
        n_opt: result.n_opt,
        res_opt: result.res_history[result.n_opt].res,
        res_initial: result.res_history[0].res,
        config: cfg,
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(result)
}

/// Strict local maxima of a spatial field away from its edge, highest first.
/// Flat regions have none.
pub fn local_maxima(field: &Array2<f64>) -> Vec<((usize, usize), f64)> {
    let (nx, ny) = field.dim();
    let mut out = Vec::new();
    for i in 1..nx.saturating_sub(1) {
        for j in 1..ny.saturating_sub(1) {
            let v = field[[i, j]];
            let mut top = true;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let w = field[[(i as i64 + di) as usize, (j as i64 + dj) as usize]];
                    if w >= v {
                        top = false;
                    }
                }
            }
            if top {
                out.push(((i, j), v));
            }
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}
