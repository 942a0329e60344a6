use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use sms_core::model::total_energy_with_tol;
use sms_core::simplex::simplex_project_in_place;
use sms_core::{
    run_with_observer, Field, ModelParams, PatternStack, RunStatus, ScalarField, Stack,
    Supervision,
};
use sms_io::{
    decode_gray8, emit_artifacts, encode_labels_png, load_image, read_raw, EmitOptions, RunRequest,
};

use crate::{EnergyArgs, HardenArgs, SegmentArgs};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_supervision(path: &Path) -> Result<Supervision> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes)
        .with_context(|| format!("malformed supervision file {}", path.display()))
}

pub fn segment(args: SegmentArgs) -> Result<ExitCode> {
    let image = load_image(&args.input).context("unreadable input image")?;
    let (w, h) = image.dims();
    let request = RunRequest {
        k: args.k,
        model: args.model.into(),
        lambda: args.lambda,
        alpha: args.alpha,
        epsilon: args.epsilon,
        max_outer: args.max_outer,
        tol: args.tol,
        seed: args.seed,
        init: args.init.into(),
        order: args.order.into(),
    };
    let config = request.to_config().context("invalid configuration")?;
    let supervision = args.supervision.as_deref().map(load_supervision).transpose()?;
    if let Some(sup) = &supervision {
        sup.validate_for(w, h, args.k)
            .context("invalid supervision geometry")?;
    }

    let verbose = args.verbose;
    let result = run_with_observer(&image, &config, supervision.as_ref(), None, &mut |row| {
        if verbose {
            eprintln!(
                "iter {:>4}  total {:.9e}  max_dp {:.3e}",
                row.iter, row.energy.total, row.max_dp
            );
        }
    });
    let out = match result {
        Ok(out) => out,
        Err(failure) => {
            if !args.no_trace && !failure.trace.rows.is_empty() {
                std::fs::create_dir_all(&args.out).ok();
                std::fs::write(args.out.join("trace.csv"), failure.trace.to_csv()).ok();
            }
            return Err(anyhow::Error::new(failure).context("solver aborted"));
        }
    };

    let opts = EmitOptions {
        ownerships: !args.no_ownerships,
        labels: !args.no_labels,
        trace: !args.no_trace,
        residuals: !args.no_residuals,
        raw: args.raw,
    };
    let artifacts = emit_artifacts(&out, &image, &request, opts)?;
    artifacts.write_to(&args.out)?;
    let s = &artifacts.summary;
    println!(
        "{} after {} iterations, energy {:.9e}",
        match s.status {
            RunStatus::Converged => "converged",
            RunStatus::MaxOuter => "stopped at max-outer",
        },
        s.iterations,
        s.energy.total
    );
    Ok(match s.status {
        RunStatus::Converged => ExitCode::SUCCESS,
        RunStatus::MaxOuter => ExitCode::from(2),
    })
}

/// An ownership channel from a raw `.sofp` file (exact) or an 8-bit
/// image (scaled by 1/255).
fn load_ownership(path: &Path) -> Result<Field> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"SOFP") {
        let raw = read_raw(&bytes).with_context(|| format!("bad raw file {}", path.display()))?;
        let values = raw.field.values().iter().map(|&v| f64::from(v)).collect();
        Ok(ScalarField::new(raw.field.width(), raw.field.height(), values)?)
    } else {
        let (w, h, data) =
            decode_gray8(&bytes).with_context(|| format!("bad image {}", path.display()))?;
        let values = data.into_iter().map(|v| f64::from(v) / 255.0).collect();
        Ok(ScalarField::new(w, h, values)?)
    }
}

fn load_stack(paths: &[std::path::PathBuf]) -> Result<Stack<f64>> {
    let fields = paths
        .iter()
        .map(|p| load_ownership(p))
        .collect::<Result<Vec<_>>>()?;
    let first = fields[0].dims();
    for (path, f) in paths.iter().zip(&fields) {
        ensure!(
            f.dims() == first,
            "dimension mismatch: {} is {}x{}, expected {}x{}",
            path.display(),
            f.width(),
            f.height(),
            first.0,
            first.1
        );
    }
    Ok(Stack::new(fields)?)
}

pub fn harden(args: HardenArgs) -> Result<()> {
    let mut p = load_stack(&args.ownerships)?;
    let mut buf = vec![0.0; p.k()];
    let mut scratch = Vec::with_capacity(p.k());
    for idx in 0..p.pixel_count() {
        for (b, c) in buf.iter_mut().zip(p.channels()) {
            *b = c.values()[idx];
        }
        simplex_project_in_place(&mut buf, &mut scratch);
        p.set_pixel(idx, &buf);
    }
    let png = encode_labels_png(&sms_core::harden(&p), p.k())?;
    std::fs::write(&args.out, png).with_context(|| format!("cannot write {}", args.out.display()))
}

pub fn energy(args: EnergyArgs) -> Result<()> {
    let image = load_image(&args.image).context("unreadable input image")?;
    let p = load_stack(&args.ownerships)?;
    ensure!(
        p.dims() == image.dims(),
        "dimension mismatch: ownerships are {}x{}, image is {}x{}",
        p.dims().0,
        p.dims().1,
        image.dims().0,
        image.dims().1
    );
    let (k, bands) = (p.k(), image.k());
    let (w, h) = image.dims();
    let u = if !args.patterns.is_empty() {
        ensure!(
            args.patterns.len() == k * bands,
            "expected {} pattern files ({k} channels x {bands} bands), got {}",
            k * bands,
            args.patterns.len()
        );
        let fields = load_stack(&args.patterns)?;
        ensure!(fields.dims() == image.dims(), "pattern dimensions differ from the image");
        let per_channel = fields
            .channels()
            .chunks(bands)
            .map(|c| Stack::new(c.to_vec()))
            .collect::<sms_core::Result<Vec<_>>>()?;
        PatternStack::new(per_channel)?
    } else if !args.means.is_empty() {
        ensure!(
            args.means.len() == k * bands,
            "expected {} means ({k} channels x {bands} bands), got {}",
            k * bands,
            args.means.len()
        );
        let means: Vec<Vec<f64>> = args.means.chunks(bands).map(<[f64]>::to_vec).collect();
        PatternStack::constant(&means, w, h)
    } else {
        bail!("either --pattern or --means is required");
    };
    let params = ModelParams::new(k, args.lambda, args.alpha, args.epsilon)?;
    let e = total_energy_with_tol(&p, &u, &image, &params, args.feasibility_tol)?;
    println!("{}", serde_json::to_string(&e)?);
    Ok(())
}
