use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sms_core::model::total_energy_with_tol;
use sms_core::simplex::simplex_project_in_place;
use sms_core::{
    harden, ElResidual, Energy, Field, GrayImage, InitMode, LabelMap, ModelKind, ModelParams,
    Ownerships, PatternStack, RunConfig, RunOutput, RunStatus, SolverOptions, Stack, UpdateOrder,
};

use crate::error::{IoError, Result};
use crate::formats::{encode_labels_png, encode_pgm, palette_json, write_raw};

/// Run parameters as accepted by the CLI flags and the service's run
/// endpoint. Everything but `k` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    pub k: usize,
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::max_outer")]
    pub max_outer: usize,
    /// Relative energy decrease at which the run stops.
    #[serde(default = "defaults::tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default)]
    pub order: UpdateOrder,
}

mod defaults {
    pub fn lambda() -> f64 {
        10.0
    }
    pub fn alpha() -> f64 {
        1000.0
    }
    pub fn epsilon() -> f64 {
        1.5
    }
    pub fn max_outer() -> usize {
        100
    }
    pub fn tol() -> f64 {
        1e-5
    }
}

impl RunRequest {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            model: ModelKind::Full,
            lambda: defaults::lambda(),
            alpha: defaults::alpha(),
            epsilon: defaults::epsilon(),
            max_outer: defaults::max_outer(),
            tol: defaults::tol(),
            seed: 0,
            init: InitMode::Kmeans,
            order: UpdateOrder::OwnershipsFirst,
        }
    }

    pub fn params(&self) -> ModelParams<f64> {
        ModelParams {
            k: self.k,
            lambda: self.lambda,
            alpha: self.alpha,
            epsilon: self.epsilon,
        }
    }

    /// Validated driver configuration.
    pub fn to_config(&self) -> sms_core::Result<RunConfig> {
        let config = RunConfig {
            model: self.model,
            params: self.params(),
            max_outer: self.max_outer,
            energy_tol: self.tol,
            seed: self.seed,
            init: self.init,
            order: self.order,
            solver: SolverOptions::default(),
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub parameters: RunRequest,
    pub status: RunStatus,
    pub iterations: usize,
    /// Energy of the final iterate (last trace row).
    pub energy: Energy,
    /// Energy of the emitted raw artifacts, i.e. after rounding ownerships
    /// and patterns to `f32`. An audit of the raw files reproduces this.
    pub emitted_energy: Energy,
    pub initial_residual: Option<ElResidual>,
    pub final_residual: Option<ElResidual>,
    pub dumb: Vec<bool>,
    /// Channel means per band (piecewise-constant model).
    pub means: Option<Vec<Vec<f64>>>,
    pub unconverged_inner: usize,
    pub guarded_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmitOptions {
    pub ownerships: bool,
    pub labels: bool,
    pub trace: bool,
    pub residuals: bool,
    pub raw: bool,
}

impl Default for EmitOptions {
    fn default() -> Self {
        Self {
            ownerships: true,
            labels: true,
            trace: true,
            residuals: true,
            raw: false,
        }
    }
}

/// `round(255 v)` clamped to `0..=255`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Labels as a reader of the 8-bit ownership maps sees them: quantize,
/// project each pixel back onto the simplex, harden.
pub fn labels_from_ownerships(p: &Ownerships) -> LabelMap {
    let k = p.k();
    let mut q = p.clone();
    let mut buf = vec![0.0; k];
    let mut scratch = Vec::with_capacity(k);
    for idx in 0..p.pixel_count() {
        for (b, c) in buf.iter_mut().zip(p.channels()) {
            *b = f64::from(quantize(c.values()[idx])) / 255.0;
        }
        simplex_project_in_place(&mut buf, &mut scratch);
        q.set_pixel(idx, &buf);
    }
    harden(&q)
}

/// Feasibility slack for energies of `f32`-rounded ownerships.
pub const ROUNDED_TOL: f64 = 1e-6;

fn round_f32(f: &Field) -> Field {
    f.map(|v| f64::from(v as f32))
}

/// Energy of the ownerships and patterns after rounding to `f32`.
pub fn emitted_energy(
    p: &Ownerships,
    u: &PatternStack<f64>,
    image: &GrayImage,
    params: &ModelParams<f64>,
) -> Result<Energy> {
    let p32 = Stack::new(p.channels().iter().map(round_f32).collect())?;
    let u32_ = PatternStack::new(
        u.patterns()
            .iter()
            .map(|s| Stack::new(s.channels().iter().map(round_f32).collect()))
            .collect::<sms_core::Result<_>>()?,
    )?;
    Ok(total_energy_with_tol(&p32, &u32_, image, params, ROUNDED_TOL)?)
}

/// Every artifact of a finished run, as file name and bytes.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub summary: Summary,
    pub labels: LabelMap,
    pub files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| IoError::Write {
            path: dir.display().to_string(),
            source,
        })?;
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|source| IoError::Write {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }
}

/// Builds the summary and the requested files. `summary.json` is always
/// included.
pub fn emit_artifacts(
    out: &RunOutput<f64>,
    image: &GrayImage,
    request: &RunRequest,
    opts: EmitOptions,
) -> Result<Artifacts> {
    let (width, height) = image.dims();
    let k = out.ownerships.k();
    let trace = &out.trace;
    let last = trace
        .last()
        .ok_or_else(|| IoError::Encode("run produced no trace rows".into()))?;
    let summary = Summary {
        width,
        height,
        bands: image.k(),
        parameters: request.clone(),
        status: out.status,
        iterations: trace.iterations(),
        energy: last.energy,
        emitted_energy: emitted_energy(&out.ownerships, &out.patterns, image, &request.params())?,
        initial_residual: trace.initial_residual.clone(),
        final_residual: trace.final_residual.clone(),
        dumb: trace.dumb.clone(),
        means: out.means.clone(),
        unconverged_inner: trace.unconverged_inner,
        guarded_steps: trace.guarded_steps,
    };
    let labels = labels_from_ownerships(&out.ownerships);

    let mut files = BTreeMap::new();
    if opts.ownerships {
        for (i, c) in out.ownerships.channels().iter().enumerate() {
            files.insert(format!("own_{}.pgm", i + 1), encode_pgm(c));
        }
    }
    if opts.raw {
        for (i, c) in out.ownerships.channels().iter().enumerate() {
            files.insert(format!("own_{}.sofp", i + 1), write_raw(c, (i + 1) as u32));
        }
        for (i, pattern) in out.patterns.patterns().iter().enumerate() {
            for (b, band) in pattern.channels().iter().enumerate() {
                files.insert(
                    format!("pattern_{}_{}.sofp", i + 1, b + 1),
                    write_raw(band, (i + 1) as u32),
                );
            }
        }
    }
    if opts.labels {
        files.insert("labels.png".into(), encode_labels_png(&labels, k)?);
        files.insert("labels_palette.json".into(), palette_json(k).into_bytes());
    }
    if opts.trace {
        files.insert("trace.csv".into(), trace.to_csv().into_bytes());
    }
    if opts.residuals {
        let residuals = serde_json::json!({
            "initial": trace.initial_residual,
            "final": trace.final_residual,
        });
        files.insert(
            "residuals.json".into(),
            serde_json::to_vec_pretty(&residuals)?,
        );
    }
    files.insert("summary.json".into(), serde_json::to_vec_pretty(&summary)?);
    Ok(Artifacts {
        summary,
        labels,
        files,
    })
}
