//! The two halves of the Euler-Lagrange system.
//!
//! Patterns: for each channel and band, the variable-coefficient screened
//! Poisson equation `-alpha Lap(u_i) + lambda p_i u_i = lambda p_i I`.
//!
//! Ownerships: the coupled double-well system
//! `-18 eps Lap(p_i) + 2/eps p_i (1 - p_i)(1 - 2 p_i) = <V> - e_i`, solved by
//! splitting the double-well force and lagging everything except the
//! `p_i (1 - p_i)^2` factor, which turns every channel into a screened
//! Poisson problem. Each linearized step is followed by a pixelwise
//! Euclidean projection back onto the simplex; supervised pixels are held
//! at `delta_ij` throughout.
//!
//! Throughout this module `e_i` denotes the *weighted* data force
//! `lambda * |u_i - I|^2`, so that `V_i = e_i - 18 eps Lap(p_i) + ...`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{laplacian_into, ScalarField};
use crate::linsolve::{ScreenedPoisson, SolveStats};
use crate::scalar::{Real, Scalar};
use crate::simplex::{simplex_project_in_place, validate_stack};
use crate::stack::{Image, OwnershipStack, PatternStack, Stack};
use crate::supervision::SupervisionMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Relative residual target for every inner linear solve.
    pub inner_tol: f64,
    /// Iteration cap for every inner linear solve.
    pub max_inner_sweeps: usize,
    /// Linearization steps per ownership solve.
    pub lin_steps: usize,
    /// Max-norm change between successive linearization iterates at which
    /// the ownership solve stops early.
    pub lin_tol: f64,
    /// A channel is dumb when `int p_i < dumb_fraction * pixel_count`.
    pub dumb_fraction: f64,
    /// Follow the first linearized step of every ownership solve with
    /// tangent active-set steps, whose fixed points are stationary.
    pub tangent_refinement: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            inner_tol: 1e-6,
            max_inner_sweeps: 2000,
            lin_steps: 8,
            lin_tol: 1e-5,
            dumb_fraction: 1e-6,
            tangent_refinement: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_tol > 0.0)
            || self.max_inner_sweeps == 0
            || self.lin_steps == 0
            || !(self.lin_tol > 0.0)
            || !(self.dumb_fraction > 0.0)
        {
            return Err(Error::invalid(format!(
                "solver options must all be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn dumb_threshold(&self, pixels: usize) -> f64 {
        self.dumb_fraction * pixels as f64
    }
}

// Absolute residual floor used when the right-hand side vanishes.
const ABS_FLOOR: f64 = 1e-12;

/// Proximal weight of the ownership linearization, relative to `2/eps`.
/// Adding `c (q - p_prev)` keeps every fixed point and makes the system
/// definite where a channel is identically one.
const PROX_WEIGHT: f64 = 1e-6;

/// Proximal weight of the tangent step's model, relative to `2/eps`. Any
/// positive value keeps the fixed points; larger values shorten the
/// diffusion length of the step.
const TANGENT_PROX: f64 = 0.5;

/// One solved pattern channel (all bands).
#[derive(Debug, Clone)]
pub struct PatternSolution<T> {
    pub pattern: Stack<T>,
    pub dumb: bool,
    /// One entry per band; empty for dumb channels.
    pub stats: Vec<SolveStats<T>>,
}

impl<T: Real> PatternSolution<T> {
    pub fn converged(&self) -> bool {
        self.stats.iter().all(|s| s.converged)
    }
}

/// Solves `-alpha Lap(u) + lambda p u = lambda p I` for one scalar band.
/// Returns `u = 0` and `dumb = true` when `int p` is below the dumb
/// threshold. Non-convergence is reported through the returned stats.
pub fn solve_pattern_channel<T: Real>(
    p: &ScalarField<T>,
    band: &ScalarField<T>,
    alpha: T,
    lambda: T,
    opts: &SolverOptions,
    warm_start: Option<&ScalarField<T>>,
) -> Result<(ScalarField<T>, bool, Option<SolveStats<T>>)> {
    p.check_same_dims(band)?;
    if p.values().iter().any(|&v| v < T::zero() || v > T::one()) {
        return Err(Error::invalid("pattern solve needs ownerships in [0, 1]"));
    }
    let (w, h) = p.dims();
    if p.integrate() < T::lit(opts.dumb_threshold(w * h)) {
        return Ok((ScalarField::zeros(w, h), true, None));
    }
    let reaction: Vec<T> = p.values().iter().map(|&v| lambda * v).collect();
    let rhs: Vec<T> = reaction
        .iter()
        .zip(band.values())
        .map(|(&r, &i)| r * i)
        .collect();
    let mut x = match warm_start {
        Some(u0) => {
            u0.check_same_dims(p)?;
            u0.values().to_vec()
        }
        None => band.values().to_vec(),
    };
    let op = ScreenedPoisson {
        width: w,
        height: h,
        diffusion: alpha,
        reaction: &reaction,
        pinned: None,
    };
    let stats = op.solve(
        &rhs,
        &mut x,
        T::lit(opts.inner_tol),
        T::lit(ABS_FLOOR),
        opts.max_inner_sweeps,
    );
    let u = ScalarField::new(w, h, x)?;
    if !u.is_finite() {
        return Err(Error::Diverged {
            stage: "pattern",
            residual: stats.residual.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok((u, false, Some(stats)))
}

/// All bands of pattern `i`.
pub fn solve_pattern<T: Real>(
    p: &ScalarField<T>,
    image: &Image<T>,
    alpha: T,
    lambda: T,
    opts: &SolverOptions,
    warm_start: Option<&Stack<T>>,
) -> Result<PatternSolution<T>> {
    let mut bands = Vec::with_capacity(image.k());
    let mut stats = Vec::new();
    let mut dumb = false;
    for (b, band) in image.channels().iter().enumerate() {
        let warm = warm_start.map(|s| s.channel(b));
        let (u, is_dumb, st) = solve_pattern_channel(p, band, alpha, lambda, opts, warm)?;
        dumb = is_dumb;
        bands.push(u);
        stats.extend(st);
    }
    Ok(PatternSolution {
        pattern: Stack::new(bands)?,
        dumb,
        stats,
    })
}

/// Weighted data forces `e_i = lambda * sum_band (u_i - I)^2`.
pub fn data_forces<T: Scalar>(
    u: &PatternStack<T>,
    image: &Image<T>,
    lambda: T,
) -> Result<Vec<ScalarField<T>>> {
    if u.bands() != image.k() {
        return Err(Error::invalid("pattern and image band counts differ"));
    }
    u.patterns()
        .iter()
        .map(|ui| {
            ui.check_dims(image.dims())?;
            let (w, h) = image.dims();
            let mut out = ScalarField::zeros(w, h);
            for (band, ub) in image.channels().iter().zip(ui.channels()) {
                for ((o, &iv), &uv) in out.values_mut().iter_mut().zip(band.values()).zip(ub.values())
                {
                    let d = uv - iv;
                    *o += d * d;
                }
            }
            Ok(out.map(|v| lambda * v))
        })
        .collect()
}

/// Data forces for constant patterns `means[i][band]`.
pub fn data_forces_constant<T: Scalar>(
    means: &[Vec<T>],
    image: &Image<T>,
    lambda: T,
) -> Result<Vec<ScalarField<T>>> {
    means
        .iter()
        .map(|mi| {
            if mi.len() != image.k() {
                return Err(Error::invalid("mean and image band counts differ"));
            }
            let (w, h) = image.dims();
            let mut out = ScalarField::zeros(w, h);
            for (band, &m) in image.channels().iter().zip(mi) {
                for (o, &iv) in out.values_mut().iter_mut().zip(band.values()) {
                    let d = m - iv;
                    *o += d * d;
                }
            }
            Ok(out.map(|v| lambda * v))
        })
        .collect()
}

fn check_forces<T: Scalar>(p: &OwnershipStack<T>, e: &[ScalarField<T>]) -> Result<()> {
    if e.len() != p.k() {
        return Err(Error::invalid(format!(
            "{} force fields for {} channels",
            e.len(),
            p.k()
        )));
    }
    for f in e {
        p.check_dims(f.dims())?;
    }
    Ok(())
}

/// Free gradients `V_i = e_i - 18 eps Lap(p_i) + 2/eps p_i (1 - p_i)(1 - 2 p_i)`.
pub fn force_fields<T: Scalar>(
    p: &OwnershipStack<T>,
    e: &[ScalarField<T>],
    epsilon: T,
) -> Result<Vec<ScalarField<T>>> {
    check_forces(p, e)?;
    let eighteen_eps = T::from_count(18) * epsilon;
    let two_over_eps = T::from_count(2) / epsilon;
    let two = T::from_count(2);
    p.channels()
        .iter()
        .zip(e)
        .map(|(pi, ei)| {
            let lap = pi.laplacian_neumann();
            let vals = pi
                .values()
                .iter()
                .zip(lap.values())
                .zip(ei.values())
                .map(|((&v, &l), &f)| {
                    f - eighteen_eps * l + two_over_eps * v * (T::one() - v) * (T::one() - two * v)
                })
                .collect();
            ScalarField::new(pi.width(), pi.height(), vals)
        })
        .collect()
}

/// Channel mean of the free gradients in closed form, valid when
/// `sum_i p_i = 1` (the Laplacian terms cancel):
/// `<V> = (1/K) sum e_i + 2/(eps K) sum (2 p_i^3 - 3 p_i^2) + 2/(eps K)`.
pub fn mean_v<T: Scalar>(
    p: &OwnershipStack<T>,
    e: &[ScalarField<T>],
    epsilon: T,
) -> Result<ScalarField<T>> {
    check_forces(p, e)?;
    let k = T::from_count(p.k());
    let coupling = T::from_count(2) / (epsilon * k);
    let (two, three) = (T::from_count(2), T::from_count(3));
    let (w, h) = p.dims();
    let mut out = Vec::with_capacity(w * h);
    for idx in 0..w * h {
        let mut forces = T::zero();
        let mut cubic = T::zero();
        for (pi, ei) in p.channels().iter().zip(e) {
            let v = pi.values()[idx];
            forces += ei.values()[idx];
            cubic += two * v * v * v - three * v * v;
        }
        out.push(forces / k + coupling * cubic + coupling);
    }
    ScalarField::new(w, h, out)
}

/// Solves one linearized ownership channel
/// `-18 eps Lap(q) + 2/eps (1 - p_prev)^2 q + c (q - p_prev) = rhs`
/// with `c = PROX_WEIGHT * 2/eps`.
/// Pixels marked in `pinned` keep their value from `initial`.
pub fn solve_ownership_channel<T: Real>(
    p_prev: &ScalarField<T>,
    rhs: &ScalarField<T>,
    epsilon: T,
    initial: &ScalarField<T>,
    pinned: Option<&[bool]>,
    opts: &SolverOptions,
) -> Result<(ScalarField<T>, SolveStats<T>)> {
    p_prev.check_same_dims(rhs)?;
    let (w, h) = p_prev.dims();
    let two_over_eps = T::from_count(2) / epsilon;
    let prox = T::lit(PROX_WEIGHT) * two_over_eps;
    let reaction: Vec<T> = p_prev
        .values()
        .iter()
        .map(|&v| {
            let q = T::one() - v;
            two_over_eps * q * q + prox
        })
        .collect();
    let shifted: Vec<T> = rhs
        .values()
        .iter()
        .zip(p_prev.values())
        .map(|(&f, &v)| f + prox * v)
        .collect();
    let op = ScreenedPoisson {
        width: w,
        height: h,
        diffusion: T::from_count(18) * epsilon,
        reaction: &reaction,
        pinned,
    };
    let mut x = initial.values().to_vec();
    let stats = op.solve(
        &shifted,
        &mut x,
        T::lit(opts.inner_tol),
        T::lit(ABS_FLOOR),
        opts.max_inner_sweeps,
    );
    let q = ScalarField::new(w, h, x)?;
    if !q.is_finite() {
        return Err(Error::Diverged {
            stage: "ownership",
            residual: stats.residual.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok((q, stats))
}

#[derive(Debug, Clone)]
pub struct OwnershipStep<T> {
    pub ownerships: OwnershipStack<T>,
    pub stats: Vec<SolveStats<T>>,
}

/// One linearization step `P^j -> P^{j+1}` followed by simplex projection.
pub fn ownership_linearized_step<T: Real>(
    p: &OwnershipStack<T>,
    e: &[ScalarField<T>],
    epsilon: T,
    mask: &SupervisionMask,
    opts: &SolverOptions,
) -> Result<OwnershipStep<T>> {
    check_forces(p, e)?;
    validate_stack(p, T::feasibility_tol())?.into_result()?;
    if mask.len() != p.pixel_count() {
        return Err(Error::invalid("supervision mask does not match the grid"));
    }
    let k = p.k();
    let (w, h) = p.dims();
    let mean = mean_v(p, e, epsilon)?;
    let two_over_eps = T::from_count(2) / epsilon;
    let pinned: Vec<bool> = (0..w * h).map(|i| mask.is_pinned(i)).collect();
    let any_pinned = pinned.iter().any(|&b| b);

    let mut channels = Vec::with_capacity(k);
    let mut stats = Vec::with_capacity(k);
    for (i, (pi, ei)) in p.channels().iter().zip(e).enumerate() {
        let rhs_vals = pi
            .values()
            .iter()
            .zip(ei.values())
            .zip(mean.values())
            .map(|((&v, &f), &m)| -f + m + two_over_eps * v * v * (T::one() - v))
            .collect();
        let rhs = ScalarField::new(w, h, rhs_vals)?;
        let mut initial = pi.clone();
        for (idx, owner) in mask.pinned() {
            initial.values_mut()[idx] = if owner == i { T::one() } else { T::zero() };
        }
        let (q, st) = solve_ownership_channel(
            pi,
            &rhs,
            epsilon,
            &initial,
            any_pinned.then_some(pinned.as_slice()),
            opts,
        )?;
        channels.push(q);
        stats.push(st);
    }

    let mut next = Stack::new(channels)?;
    let mut buf = vec![T::zero(); k];
    let mut scratch = Vec::with_capacity(k);
    for idx in 0..w * h {
        if let Some(owner) = mask.owner(idx) {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i == owner { T::one() } else { T::zero() };
            }
        } else {
            for (b, c) in buf.iter_mut().zip(next.channels()) {
                *b = c.values()[idx];
            }
            simplex_project_in_place(&mut buf, &mut scratch);
        }
        next.set_pixel(idx, &buf);
    }
    Ok(OwnershipStep {
        ownerships: next,
        stats,
    })
}

#[derive(Debug, Clone)]
pub struct OwnershipSolve<T> {
    pub ownerships: OwnershipStack<T>,
    pub steps: usize,
    /// Max-norm change of the last linearization step.
    pub last_change: T,
    /// Inner solves that hit the iteration cap.
    pub unconverged: usize,
}

/// Ownership part of the energy with the data forces held fixed:
/// `sum_i int e_i p_i` plus the Modica-Mortola terms.
pub fn ownership_energy<T: Scalar>(
    p: &OwnershipStack<T>,
    e: &[ScalarField<T>],
    epsilon: T,
) -> Result<T> {
    check_forces(p, e)?;
    let data: T = p
        .channels()
        .iter()
        .zip(e)
        .map(|(pi, ei)| {
            pi.values()
                .iter()
                .zip(ei.values())
                .map(|(&a, &b)| a * b)
                .sum::<T>()
        })
        .sum();
    Ok(data + crate::model::mm_energy_stack(p, epsilon))
}

/// Channels allowed to move at each pixel: the support of `P(x)` plus any
/// zero channel whose force is below the support mean. Pixels that are
/// pinned, or where fewer than two channels could move, are frozen.
fn free_channels<T: Real>(
    p: &OwnershipStack<T>,
    v: &[ScalarField<T>],
    mask: &SupervisionMask,
) -> Vec<bool> {
    let k = p.k();
    let n = p.pixel_count();
    let mut free = vec![false; k * n];
    for idx in 0..n {
        if mask.is_pinned(idx) {
            continue;
        }
        let (mut sum, mut count) = (T::zero(), 0);
        for i in 0..k {
            if p.channel(i).values()[idx] > T::zero() {
                sum += v[i].values()[idx];
                count += 1;
            }
        }
        let mu = sum / T::from_count(count.max(1));
        let cell = &mut free[idx * k..(idx + 1) * k];
        for (i, f) in cell.iter_mut().enumerate() {
            *f = p.channel(i).values()[idx] > T::zero() || v[i].values()[idx] < mu;
        }
        if cell.iter().filter(|&&f| f).count() < 2 {
            cell.iter_mut().for_each(|f| *f = false);
        }
    }
    free
}

/// Removes the per-pixel mean over free channels and zeroes frozen entries,
/// i.e. the orthogonal projection onto the tangent space of the active face.
fn project_tangent_free<T: Real>(d: &mut [Vec<T>], free: &[bool]) {
    let k = d.len();
    let n = d[0].len();
    for idx in 0..n {
        let cell = &free[idx * k..(idx + 1) * k];
        let (mut sum, mut count) = (T::zero(), 0);
        for i in 0..k {
            if cell[i] {
                sum += d[i][idx];
                count += 1;
            }
        }
        let mean = if count > 0 {
            sum / T::from_count(count)
        } else {
            T::zero()
        };
        for i in 0..k {
            d[i][idx] = if cell[i] { d[i][idx] - mean } else { T::zero() };
        }
    }
}

/// One tangent active-set step: minimizes the convex model of the
/// linearized step (same screened operator, gradient `V(P)`) over the
/// tangent space of the active simplex face with projected conjugate
/// gradients, then projects `P + d` back onto the simplex.
///
/// The step is zero exactly when `P` satisfies the stationarity conditions
/// measured by [`ownership_residual`]. The returned stack is not yet
/// guarded against energy increase; [`solve_ownerships`] does that.
pub fn ownership_tangent_step<T: Real>(
    p: &OwnershipStack<T>,
    e: &[ScalarField<T>],
    epsilon: T,
    mask: &SupervisionMask,
    opts: &SolverOptions,
) -> Result<(Vec<Vec<T>>, SolveStats<T>)> {
    check_forces(p, e)?;
    let k = p.k();
    let (w, h) = p.dims();
    let n = w * h;
    let v = force_fields(p, e, epsilon)?;
    let free = free_channels(p, &v, mask);
    let two_over_eps = T::from_count(2) / epsilon;
    let prox = T::lit(TANGENT_PROX) * two_over_eps;
    let reaction: Vec<Vec<T>> = p
        .channels()
        .iter()
        .map(|c| {
            c.values()
                .iter()
                .map(|&x| two_over_eps * (T::one() - x) * (T::one() - x) + prox)
                .collect()
        })
        .collect();
    let diffusion = T::from_count(18) * epsilon;
    let apply = |x: &[Vec<T>], out: &mut [Vec<T>]| {
        for i in 0..k {
            let ops = ScreenedPoisson {
                width: w,
                height: h,
                diffusion,
                reaction: &reaction[i],
                pinned: None,
            };
            ops.apply(&x[i], &mut out[i]);
        }
        project_tangent_free(out, &free);
    };
    let dot = |a: &[Vec<T>], b: &[Vec<T>]| -> T {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).fold(T::zero(), |acc, (&s, &t)| acc + s * t))
            .sum()
    };

    let mut r: Vec<Vec<T>> = v
        .iter()
        .map(|vi| vi.values().iter().map(|&g| -g).collect())
        .collect();
    project_tangent_free(&mut r, &free);
    let rhs_norm = dot(&r, &r).sqrt();
    let target = (T::lit(opts.inner_tol) * rhs_norm).max(T::lit(ABS_FLOOR));
    let mut d = vec![vec![T::zero(); n]; k];
    let mut dir = r.clone();
    let mut hd = vec![vec![T::zero(); n]; k];
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    while rr.sqrt() > target && iterations < opts.max_inner_sweeps {
        apply(&dir, &mut hd);
        let curvature = dot(&dir, &hd);
        if curvature <= T::zero() {
            break;
        }
        let step = rr / curvature;
        for i in 0..k {
            for j in 0..n {
                d[i][j] += step * dir[i][j];
                r[i][j] -= step * hd[i][j];
            }
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        rr = rr_next;
        for i in 0..k {
            for j in 0..n {
                dir[i][j] = r[i][j] + beta * dir[i][j];
            }
        }
        iterations += 1;
    }
    let residual = rr.sqrt();
    if d.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Diverged {
            stage: "ownership",
            residual: residual.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok((
        d,
        SolveStats {
            iterations,
            residual,
            rhs_norm,
            converged: residual <= target,
        },
    ))
}

/// `proj(P + t d)` pixelwise; pinned pixels keep their values.
fn step_along<T: Real>(
    p: &OwnershipStack<T>,
    d: &[Vec<T>],
    t: T,
    mask: &SupervisionMask,
) -> OwnershipStack<T> {
    let k = p.k();
    let mut out = p.clone();
    let mut buf = vec![T::zero(); k];
    let mut scratch = Vec::with_capacity(k);
    for idx in 0..p.pixel_count() {
        if mask.is_pinned(idx) {
            continue;
        }
        for (i, b) in buf.iter_mut().enumerate() {
            *b = p.channel(i).values()[idx] + t * d[i][idx];
        }
        simplex_project_in_place(&mut buf, &mut scratch);
        out.set_pixel(idx, &buf);
    }
    out
}

/// Backtracks along `proj(P + t d)`, `t = 1, 1/2, ...`, until the
/// ownership energy does not increase. `None` if no such `t` was found.
fn backtrack<T: Real>(
    p: &OwnershipStack<T>,
    d: &[Vec<T>],
    e: &[ScalarField<T>],
    epsilon: T,
    mask: &SupervisionMask,
    current: T,
) -> Result<Option<(OwnershipStack<T>, T)>> {
    let mut t = T::one();
    for _ in 0..30 {
        let trial = step_along(p, d, t, mask);
        let energy = ownership_energy(&trial, e, epsilon)?;
        if energy <= current {
            return Ok(Some((trial, energy)));
        }
        t = t / T::from_count(2);
    }
    Ok(None)
}

/// Minimizes the ownership energy for fixed data forces.
///
/// The first iteration is [`ownership_linearized_step`]; with
/// `tangent_refinement` the remaining ones are
/// [`ownership_tangent_step`]s. Every iteration is backtracked so the
/// ownership energy never increases. Stops when the max-norm change drops
/// below `lin_tol` or after `lin_steps` iterations.
pub fn solve_ownerships<T: Real>(
    p0: &OwnershipStack<T>,
    e: &[ScalarField<T>],
    epsilon: T,
    mask: &SupervisionMask,
    opts: &SolverOptions,
) -> Result<OwnershipSolve<T>> {
    let mut current = p0.clone();
    let mut energy = ownership_energy(&current, e, epsilon)?;
    let mut last_change = T::zero();
    let mut unconverged = 0;
    let mut steps = 0;
    while steps < opts.lin_steps {
        let direction = if steps == 0 || !opts.tangent_refinement {
            let step = ownership_linearized_step(&current, e, epsilon, mask, opts)?;
            unconverged += step.stats.iter().filter(|s| !s.converged).count();
            step.ownerships
                .channels()
                .iter()
                .zip(current.channels())
                .map(|(a, b)| a.values().iter().zip(b.values()).map(|(&x, &y)| x - y).collect())
                .collect::<Vec<Vec<T>>>()
        } else {
            let (d, stats) = ownership_tangent_step(&current, e, epsilon, mask, opts)?;
            unconverged += usize::from(!stats.converged);
            d
        };
        steps += 1;
        match backtrack(&current, &direction, e, epsilon, mask, energy)? {
            Some((next, next_energy)) => {
                last_change = next.max_abs_diff(&current)?;
                current = next;
                energy = next_energy;
            }
            None => last_change = T::zero(),
        }
        if last_change < T::lit(opts.lin_tol) && (steps > 1 || !opts.tangent_refinement) {
            break;
        }
    }
    Ok(OwnershipSolve {
        ownerships: current,
        steps,
        last_change,
        unconverged,
    })
}

/// Stationarity residuals of the Euler-Lagrange system, max-norm per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElResidual {
    pub pattern: Vec<f64>,
    pub ownership: Vec<f64>,
    pub pattern_max: f64,
    pub ownership_max: f64,
}

impl ElResidual {
    fn from_parts(pattern: Vec<f64>, ownership: Vec<f64>) -> Self {
        let pattern_max = pattern.iter().copied().fold(0.0, f64::max);
        let ownership_max = ownership.iter().copied().fold(0.0, f64::max);
        Self {
            pattern,
            ownership,
            pattern_max,
            ownership_max,
        }
    }
}

/// `max |-alpha Lap(u_i) + lambda p_i (u_i - I)|` per channel, over bands.
pub fn pattern_residual<T: Scalar>(
    p: &OwnershipStack<T>,
    u: &PatternStack<T>,
    image: &Image<T>,
    alpha: T,
    lambda: T,
) -> Result<Vec<f64>> {
    if u.k() != p.k() || u.bands() != image.k() {
        return Err(Error::invalid("pattern stack does not match ownerships/image"));
    }
    let (w, h) = image.dims();
    let mut lap = vec![T::zero(); w * h];
    let mut out = Vec::with_capacity(p.k());
    for (pi, ui) in p.channels().iter().zip(u.patterns()) {
        ui.check_dims(image.dims())?;
        let mut m = T::zero();
        for (band, ub) in image.channels().iter().zip(ui.channels()) {
            laplacian_into(ub.values(), w, h, &mut lap);
            for idx in 0..w * h {
                let r = -alpha * lap[idx]
                    + lambda * pi.values()[idx] * (ub.values()[idx] - band.values()[idx]);
                m = m.max_of(r.abs());
            }
        }
        out.push(m.to_f64().unwrap_or(f64::NAN));
    }
    Ok(out)
}

/// Ownership stationarity residual: the free gradient `V` projected onto
/// the tangent space of the simplex face containing `P(x)`.
///
/// At interior pixels this is exactly `V_i - <V>`. On a face where some
/// `p_i = 0`, the mean runs over the support only, and an inactive channel
/// contributes only when its gradient is below that mean (it would want to
/// grow). Pinned pixels are skipped.
pub fn ownership_residual<T: Scalar>(
    p: &OwnershipStack<T>,
    e: &[ScalarField<T>],
    epsilon: T,
    mask: &SupervisionMask,
) -> Result<Vec<f64>> {
    let v = force_fields(p, e, epsilon)?;
    let k = p.k();
    let mut out = vec![T::zero(); k];
    let mut free = vec![false; k];
    for idx in 0..p.pixel_count() {
        if mask.is_pinned(idx) {
            continue;
        }
        let mut sum = T::zero();
        let mut count = 0;
        for i in 0..k {
            free[i] = p.channel(i).values()[idx] > T::zero();
            if free[i] {
                sum += v[i].values()[idx];
                count += 1;
            }
        }
        let mu = sum / T::from_count(count.max(1));
        for i in 0..k {
            let d = v[i].values()[idx] - mu;
            let r = if free[i] { d } else { d.min_of(T::zero()) };
            out[i] = out[i].max_of(r.abs());
        }
    }
    Ok(out.into_iter().map(|r| r.to_f64().unwrap_or(f64::NAN)).collect())
}

/// Both residuals for the full model.
pub fn el_residual<T: Scalar>(
    p: &OwnershipStack<T>,
    u: &PatternStack<T>,
    image: &Image<T>,
    params: &crate::model::ModelParams<T>,
    mask: &SupervisionMask,
) -> Result<ElResidual> {
    let pattern = pattern_residual(p, u, image, params.alpha, params.lambda)?;
    let e = data_forces(u, image, params.lambda)?;
    let ownership = ownership_residual(p, &e, params.epsilon, mask)?;
    Ok(ElResidual::from_parts(pattern, ownership))
}

/// Residuals for the piecewise-constant model; the pattern part is
/// `max_band |m_i - <I>_{p_i}|`.
pub fn el_residual_pc<T: Scalar>(
    p: &OwnershipStack<T>,
    means: &[Vec<T>],
    image: &Image<T>,
    params: &crate::model::ModelParams<T>,
    mask: &SupervisionMask,
    dumb_threshold: T,
) -> Result<ElResidual> {
    let (weighted, _) = crate::driver::update_means(p, image, dumb_threshold)?;
    let pattern = means
        .iter()
        .zip(&weighted)
        .map(|(m, w)| {
            m.iter()
                .zip(w)
                .map(|(&a, &b)| (a - b).abs())
                .fold(T::zero(), |acc, d| acc.max_of(d))
                .to_f64()
                .unwrap_or(f64::NAN)
        })
        .collect();
    let e = data_forces_constant(means, image, params.lambda)?;
    let ownership = ownership_residual(p, &e, params.epsilon, mask)?;
    Ok(ElResidual::from_parts(pattern, ownership))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(f: ScalarField<f64>) -> Image<f64> {
        Stack::from_field(f)
    }

    fn random_feasible(k: usize, w: usize, h: usize, rng: &mut ChaCha8Rng) -> OwnershipStack<f64> {
        let mut p = Stack::filled(k, w, h, 0.0);
        for idx in 0..w * h {
            let mut v: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            p.set_pixel(idx, &v);
        }
        p
    }

    #[test]
    fn pattern_solve_constant_image() {
        let p = ScalarField::filled(16, 12, 1.0);
        let img = ScalarField::filled(16, 12, 0.37);
        let (u, dumb, _) =
            solve_pattern_channel(&p, &img, 2.0, 10.0, &SolverOptions::default(), None).unwrap();
        assert!(!dumb);
        assert!(u.values().iter().all(|&v| (v - 0.37_f64).abs() < 1e-8));
    }

    #[test]
    fn pattern_solve_dumb_channel() {
        let p = ScalarField::zeros(8, 8);
        let img = ScalarField::filled(8, 8, 0.5);
        let (u, dumb, stats) =
            solve_pattern_channel(&p, &img, 2.0, 10.0, &SolverOptions::default(), None).unwrap();
        assert!(dumb);
        assert!(stats.is_none());
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pattern_solve_rejects_out_of_range_ownership() {
        let p = ScalarField::filled(4, 4, 1.5);
        let img = ScalarField::filled(4, 4, 0.5);
        assert!(solve_pattern_channel(&p, &img, 1.0, 1.0, &SolverOptions::default(), None).is_err());
    }

    #[test]
    fn pattern_solve_residual_contract() {
        // independent stencil application for the residual
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (w, h) = (32, 32);
        let p = ScalarField::from_fn(w, h, |_, _| rng.random::<f64>());
        let img = ScalarField::from_fn(w, h, |_, _| rng.random::<f64>());
        let (alpha, lambda) = (2.0, 10.0);
        let (u, _, _) =
            solve_pattern_channel(&p, &img, alpha, lambda, &SolverOptions::default(), None).unwrap();
        let at = |f: &ScalarField<f64>, x: i64, y: i64, cx: usize, cy: usize| {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                f.get(cx, cy)
            } else {
                f.get(x as usize, y as usize)
            }
        };
        let (mut r2, mut b2) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let (xi, yi) = (x as i64, y as i64);
                let lap = at(&u, xi + 1, yi, x, y)
                    + at(&u, xi - 1, yi, x, y)
                    + at(&u, xi, yi + 1, x, y)
                    + at(&u, xi, yi - 1, x, y)
                    - 4.0 * u.get(x, y);
                let b = lambda * p.get(x, y) * img.get(x, y);
                let r = -alpha * lap + lambda * p.get(x, y) * u.get(x, y) - b;
                r2 += r * r;
                b2 += b * b;
            }
        }
        assert!(r2.sqrt() <= 1e-6 * b2.sqrt());
    }

    #[test]
    fn mean_v_examples() {
        let k2 = Stack::filled(2, 5, 5, 0.5_f64);
        let e0 = vec![ScalarField::zeros(5, 5); 2];
        let m = mean_v(&k2, &e0, 1.5).unwrap();
        assert!(m.values().iter().all(|&v| v.abs() < 1e-15));

        let vertex = Stack::<f64>::indicator(3, 4, 4, |_, _| 0);
        let e0 = vec![ScalarField::zeros(4, 4); 3];
        let m = mean_v(&vertex, &e0, 0.8).unwrap();
        assert!(m.values().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn mean_v_matches_direct_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (w, h, k) = (9, 7, 4);
        let p = random_feasible(k, w, h, &mut rng);
        let e: Vec<_> = (0..k)
            .map(|_| ScalarField::from_fn(w, h, |_, _| 3.0 * rng.random::<f64>()))
            .collect();
        let eps = 1.3;
        let closed = mean_v(&p, &e, eps).unwrap();
        let v = force_fields(&p, &e, eps).unwrap();
        for idx in 0..w * h {
            let direct: f64 = v.iter().map(|f| f.values()[idx]).sum::<f64>() / k as f64;
            assert!((direct - closed.values()[idx]).abs() < 1e-9);
        }
    }

    #[test]
    fn screened_coefficient_sanity() {
        // p_prev = 0 makes the reaction (1 + prox) 2/eps
        let (w, h, eps, c) = (10, 6, 1.5_f64, 0.8_f64);
        let prev = ScalarField::zeros(w, h);
        let rhs = ScalarField::filled(w, h, c);
        let (q, stats) = solve_ownership_channel(
            &prev,
            &rhs,
            eps,
            &prev,
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(stats.converged);
        assert!(q.values().iter().all(|&v| (v - c * eps / (2.0 * (1.0 + PROX_WEIGHT))).abs() < 1e-9));
    }

    #[test]
    fn pure_phase_with_zero_force_is_fixed() {
        let p = Stack::<f64>::indicator(3, 12, 10, |_, _| 1);
        let e = vec![ScalarField::zeros(12, 10); 3];
        let mask = SupervisionMask::none(120);
        let out = solve_ownerships(&p, &e, 1.5, &mask, &SolverOptions::default()).unwrap();
        assert!(out.ownerships.max_abs_diff(&p).unwrap() < 1e-12);
    }

    #[test]
    fn supervised_pixels_exact_after_step() {
        use crate::supervision::{Patch, Supervision};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h, k) = (16, 16, 3);
        let p = random_feasible(k, w, h, &mut rng);
        let e: Vec<_> = (0..k)
            .map(|_| ScalarField::from_fn(w, h, |_, _| rng.random::<f64>()))
            .collect();
        let sup = Supervision::new(vec![
            Patch { channel: 1, x: 0, y: 0, w: 3, h: 3 },
            Patch { channel: 2, x: 10, y: 10, w: 4, h: 2 },
            Patch { channel: 3, x: 5, y: 12, w: 2, h: 4 },
        ]);
        sup.validate_for(w, h, k).unwrap();
        let mask = sup.mask(w, h);
        let step = ownership_linearized_step(&p, &e, 1.5, &mask, &SolverOptions::default()).unwrap();
        for (idx, owner) in mask.pinned() {
            for i in 0..k {
                let expected = if i == owner { 1.0 } else { 0.0 };
                assert_eq!(step.ownerships.channel(i).values()[idx], expected);
            }
        }
        assert!(validate_stack(&step.ownerships, 1e-10).unwrap().passes);
    }

    #[test]
    fn two_region_converged_profile_is_fixed() {
        // A sharp partition is not stationary: the interface relaxes to a
        // soft profile a few pixels wide, after which steps are tiny.
        let (w, h) = (24, 16);
        let owner = |x: usize, _| usize::from(x >= w / 2);
        let img = gray(ScalarField::from_fn(w, h, |x, y| {
            if owner(x, y) == 0 {
                0.25
            } else {
                0.75
            }
        }));
        let hard = Stack::<f64>::indicator(2, w, h, owner);
        let e = data_forces_constant(&[vec![0.25], vec![0.75]], &img, 10.0).unwrap();
        let mask = SupervisionMask::none(w * h);
        let opts = SolverOptions {
            lin_steps: 200,
            lin_tol: 1e-9,
            ..Default::default()
        };
        let relaxed = solve_ownerships(&hard, &e, 1.5, &mask, &opts).unwrap().ownerships;
        let (d, _) = ownership_tangent_step(&relaxed, &e, 1.5, &mask, &opts).unwrap();
        assert!(d.iter().flatten().all(|x| x.abs() < 1e-6));
        for y in 0..h {
            for x in (0..w).filter(|x| x.abs_diff(w / 2) > 4) {
                assert_eq!(relaxed.channel(owner(x, y)).get(x, y), 1.0);
            }
        }
        assert!(ownership_residual(&relaxed, &e, 1.5, &mask).unwrap()[0] < 1e-6);
    }

    #[test]
    fn ownership_solve_recovers_two_constant_partition() {
        let (w, h) = (32, 24);
        let owner = |x: usize, y: usize| usize::from(x + y / 2 >= 18);
        let img = gray(ScalarField::from_fn(w, h, |x, y| {
            if owner(x, y) == 0 {
                0.25
            } else {
                0.75
            }
        }));
        let e = data_forces_constant(&[vec![0.25], vec![0.75]], &img, 10.0).unwrap();
        let p0 = Stack::filled(2, w, h, 0.5);
        let opts = SolverOptions {
            lin_steps: 30,
            ..Default::default()
        };
        let out = solve_ownerships(&p0, &e, 1.5, &SupervisionMask::none(w * h), &opts).unwrap();
        let labels = crate::model::harden(&out.ownerships);
        let truth = crate::model::LabelMap::from_fn(w, h, |x, y| owner(x, y) as u32 + 1);
        assert!(labels.agreement(&truth) >= 0.99);
        let mask = SupervisionMask::none(w * h);
        assert!(ownership_residual(&out.ownerships, &e, 1.5, &mask).unwrap()[0] < 1e-3);
    }

    #[test]
    fn ownership_solve_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (w, h, k) = (14, 11, 3);
        let p0 = random_feasible(k, w, h, &mut rng);
        let e: Vec<_> = (0..k)
            .map(|_| ScalarField::from_fn(w, h, |_, _| 2.0 * rng.random::<f64>()))
            .collect();
        let sigma = [2, 0, 1];
        let mask = SupervisionMask::none(w * h);
        let opts = SolverOptions::default();
        let direct = solve_ownerships(&p0, &e, 1.5, &mask, &opts).unwrap();
        let pe: Vec<_> = sigma.iter().map(|&s| e[s].clone()).collect();
        let permuted = solve_ownerships(&p0.permute(&sigma).unwrap(), &pe, 1.5, &mask, &opts).unwrap();
        let expected = direct.ownerships.permute(&sigma).unwrap();
        assert!(permuted.ownerships.max_abs_diff(&expected).unwrap() < 1e-9);
    }

    #[test]
    fn residual_zero_at_global_minimum() {
        let (w, h) = (8, 8);
        let img = gray(ScalarField::filled(w, h, 0.4));
        let p = Stack::<f64>::indicator(2, w, h, |_, _| 0);
        let u = PatternStack::from_fields(vec![
            ScalarField::filled(w, h, 0.4),
            ScalarField::filled(w, h, 0.4),
        ])
        .unwrap();
        let params = ModelParams::new(2, 10.0, 2.0, 1.5).unwrap();
        let r = el_residual(&p, &u, &img, &params, &SupervisionMask::none(w * h)).unwrap();
        assert!(r.pattern_max < 1e-10);
        assert!(r.ownership_max < 1e-10);
    }

    #[test]
    fn interior_tangent_residual_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let (w, h, k) = (6, 6, 3);
        let p = random_feasible(k, w, h, &mut rng);
        let e: Vec<_> = (0..k)
            .map(|_| ScalarField::from_fn(w, h, |_, _| rng.random::<f64>()))
            .collect();
        let v = force_fields(&p, &e, 1.0).unwrap();
        let mean = mean_v(&p, &e, 1.0).unwrap();
        for idx in 0..w * h {
            let s: f64 = v.iter().map(|f| f.values()[idx] - mean.values()[idx]).sum();
            assert!(s.abs() < 1e-9);
        }
    }
}
