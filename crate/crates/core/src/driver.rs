//! Alternating minimization for the full and the piecewise-constant model.
//!
//! Each outer iteration minimizes over the ownerships with the patterns
//! fixed, then over the patterns with the ownerships fixed (or the reverse,
//! see [`UpdateOrder`]). The ownership half-step is guarded by a
//! backtracking search along the segment from the previous stack to the
//! candidate so the energy never increases; the segment stays on the
//! simplex because the simplex is convex.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::model::{pc_energy, total_energy, EnergyBreakdown, ModelParams};
use crate::scalar::Real;
use crate::simplex::{simplex_project_in_place, validate_stack};
use crate::solver::{
    data_forces, data_forces_constant, el_residual, el_residual_pc, solve_ownerships,
    solve_pattern, ElResidual, SolverOptions,
};
use crate::stack::{Image, OwnershipStack, PatternStack, Stack};
use crate::supervision::{Supervision, SupervisionMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Full,
    #[serde(alias = "piecewise-constant")]
    Pc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Uniform,
    Quantile,
    /// Quantile means refined by Lloyd iterations on the pixel values.
    #[default]
    Kmeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    #[default]
    OwnershipsFirst,
    PatternsFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub params: ModelParams<f64>,
    pub max_outer: usize,
    /// Stop once the relative energy decrease of an outer iteration falls
    /// below this.
    pub energy_tol: f64,
    pub seed: u64,
    pub init: InitMode,
    pub order: UpdateOrder,
    pub solver: SolverOptions,
}

impl RunConfig {
    /// Defaults for intensities normalized to `[0, 1]`, lengths in pixels.
    pub fn new(model: ModelKind, k: usize) -> Self {
        Self {
            model,
            params: ModelParams {
                k,
                lambda: 10.0,
                alpha: 1000.0,
                epsilon: 1.5,
            },
            max_outer: 100,
            energy_tol: 1e-5,
            seed: 0,
            init: InitMode::Kmeans,
            order: UpdateOrder::OwnershipsFirst,
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.solver.validate()?;
        if self.max_outer == 0 {
            return Err(Error::invalid("max_outer must be at least 1"));
        }
        if !(self.energy_tol > 0.0) {
            return Err(Error::invalid("energy_tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub energy: EnergyBreakdown<f64>,
    /// Max-norm ownership change during this iteration.
    pub max_dp: f64,
    /// Wall-clock time of this iteration in milliseconds.
    pub ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxOuter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunTrace {
    /// Row 0 is the initial state; row `n` follows outer iteration `n`.
    pub rows: Vec<TraceRow>,
    pub initial_residual: Option<ElResidual>,
    pub final_residual: Option<ElResidual>,
    pub dumb: Vec<bool>,
    /// Inner linear solves that stopped at the iteration cap.
    pub unconverged_inner: usize,
    /// Ownership half-steps shortened by the descent guard.
    pub guarded_steps: usize,
}

impl RunTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn iterations(&self) -> usize {
        self.rows.last().map(|r| r.iter).unwrap_or(0)
    }

    /// Largest relative increase between successive totals (0 if monotone).
    pub fn worst_increase(&self) -> f64 {
        self.rows
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0].energy.total, w[1].energy.total);
                (b - a) / a.abs().max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max)
    }

    /// CSV with header `iter,data,sobolev,mm,total,max_dp,ms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,data,sobolev,mm,total,max_dp,ms\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iter,
                r.energy.data_term,
                r.energy.sobolev_term,
                r.energy.mm_term,
                r.energy.total,
                r.max_dp,
                r.ms
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub ownerships: OwnershipStack<T>,
    /// Pattern fields; spatially constant for the piecewise-constant model.
    pub patterns: PatternStack<T>,
    /// Channel means (piecewise-constant model only).
    pub means: Option<Vec<Vec<T>>>,
    pub status: RunStatus,
    pub trace: RunTrace,
}

/// A run that stopped on an error, with everything traced up to that point.
#[derive(Debug, Clone, thiserror::Error)]
#[error("run aborted after {} iterations: {error}", trace.iterations())]
pub struct RunFailure {
    pub error: Error,
    pub trace: RunTrace,
}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        RunFailure {
            error,
            trace: RunTrace::default(),
        }
    }
}

/// Starting point of a run.
#[derive(Debug, Clone)]
pub struct InitialState<T> {
    pub ownerships: OwnershipStack<T>,
    /// Constant patterns `means[i][band]`.
    pub means: Vec<Vec<T>>,
}

/// Ownership-weighted means `m_i = int I p_i / int p_i` per band. Channels
/// with `int p_i < dumb_threshold` get `m_i = 0` and a dumb flag.
pub fn update_means<T: crate::Scalar>(
    p: &OwnershipStack<T>,
    image: &Image<T>,
    dumb_threshold: T,
) -> Result<(Vec<Vec<T>>, Vec<bool>)> {
    p.check_dims(image.dims())?;
    let mut means = Vec::with_capacity(p.k());
    let mut dumb = Vec::with_capacity(p.k());
    for pi in p.channels() {
        let mass = pi.integrate();
        if mass < dumb_threshold || mass <= T::zero() {
            means.push(vec![T::zero(); image.k()]);
            dumb.push(true);
            continue;
        }
        let m = image
            .channels()
            .iter()
            .map(|band| {
                let weighted: T = pi
                    .values()
                    .iter()
                    .zip(band.values())
                    .map(|(&w, &v)| w * v)
                    .sum();
                weighted / mass
            })
            .collect();
        means.push(m);
        dumb.push(false);
    }
    Ok((means, dumb))
}

/// `q`-quantile of a band by nearest rank.
fn quantile<T: Real>(sorted: &[T], q: f64) -> T {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Lloyd iterations on pixel values; channels marked `fixed` keep their
/// mean but still claim pixels. Empty clusters keep their mean; ties go to
/// the lowest channel. The free means come back in ascending order.
fn lloyd<T: Real>(image: &Image<T>, means: &mut [Vec<T>], fixed: &[bool]) {
    const MAX_ROUNDS: usize = 100;
    let bands = image.k();
    let n = image.pixel_count();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..MAX_ROUNDS {
        let mut changed = false;
        let mut sums = vec![vec![T::zero(); bands]; means.len()];
        let mut counts = vec![0usize; means.len()];
        for (idx, slot) in assignment.iter_mut().enumerate() {
            let mut best = (0, T::infinity());
            for (i, m) in means.iter().enumerate() {
                let mut sq = T::zero();
                for (band, &mb) in image.channels().iter().zip(m) {
                    let d = band.values()[idx] - mb;
                    sq += d * d;
                }
                if sq < best.1 {
                    best = (i, sq);
                }
            }
            changed |= *slot != best.0;
            *slot = best.0;
            counts[best.0] += 1;
            for (s, band) in sums[best.0].iter_mut().zip(image.channels()) {
                *s += band.values()[idx];
            }
        }
        if !changed {
            break;
        }
        for (i, m) in means.iter_mut().enumerate() {
            if !fixed[i] && counts[i] > 0 {
                let c = T::from_count(counts[i]);
                *m = sums[i].iter().map(|&s| s / c).collect();
            }
        }
    }
    // Keep the free channels in ascending order, like the quantile seeds.
    let free: Vec<usize> = (0..means.len()).filter(|&i| !fixed[i]).collect();
    let mut sorted: Vec<Vec<T>> = free.iter().map(|&i| means[i].clone()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    for (&i, m) in free.iter().zip(sorted) {
        means[i] = m;
    }
}

/// Builds the initial ownerships and constant patterns.
///
/// Supervised channels start from the mean of the image over their patches;
/// the others from the `(i - 0.5)/K` quantiles of each band (in channel
/// order), refined by Lloyd iterations in k-means mode. In quantile and
/// k-means mode the ownerships are a softmax of the negative
/// weighted data force, in uniform mode `1/K`. A seeded perturbation of
/// magnitude `1e-3` breaks the channel symmetry unless every channel is
/// supervised. Supervised pixels are set to `delta_ij`.
pub fn initialize<T: Real>(
    image: &Image<T>,
    config: &RunConfig,
    supervision: Option<&Supervision>,
) -> Result<InitialState<T>> {
    config.validate()?;
    let k = config.params.k;
    let (w, h) = image.dims();
    let n = w * h;
    let sup = supervision.cloned().unwrap_or_default();
    sup.validate_for(w, h, k)?;
    let mask = sup.mask(w, h);

    let sorted: Vec<Vec<T>> = image
        .channels()
        .iter()
        .map(|band| {
            let mut v = band.values().to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).expect("finite image"));
            v
        })
        .collect();
    let mut means: Vec<Vec<T>> = (0..k)
        .map(|i| {
            let q = (i as f64 + 0.5) / k as f64;
            sorted.iter().map(|s| quantile(s, q)).collect()
        })
        .collect();
    let mut patch_sum = vec![vec![T::zero(); image.k()]; k];
    let mut patch_count = vec![0usize; k];
    for (idx, owner) in mask.pinned() {
        patch_count[owner] += 1;
        for (b, band) in image.channels().iter().enumerate() {
            patch_sum[owner][b] += band.values()[idx];
        }
    }
    for i in 0..k {
        if patch_count[i] > 0 {
            let c = T::from_count(patch_count[i]);
            means[i] = patch_sum[i].iter().map(|&s| s / c).collect();
        }
    }
    let fully_supervised = patch_count.iter().all(|&c| c > 0);
    if config.init == InitMode::Kmeans {
        let fixed: Vec<bool> = patch_count.iter().map(|&c| c > 0).collect();
        lloyd(image, &mut means, &fixed);
    }

    let lambda = T::lit(config.params.lambda);
    let mut p = Stack::filled(k, w, h, T::zero());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let amplitude = 1e-3;
    let mut buf = vec![T::zero(); k];
    let mut scratch = Vec::with_capacity(k);
    for idx in 0..n {
        match config.init {
            InitMode::Uniform => buf.iter_mut().for_each(|b| *b = T::one() / T::from_count(k)),
            InitMode::Quantile | InitMode::Kmeans => {
                for (i, b) in buf.iter_mut().enumerate() {
                    let mut sq = T::zero();
                    for (band, &m) in image.channels().iter().zip(&means[i]) {
                        let d = band.values()[idx] - m;
                        sq += d * d;
                    }
                    *b = -lambda * sq;
                }
                let max = buf.iter().copied().fold(T::neg_infinity(), T::max);
                buf.iter_mut().for_each(|b| *b = (*b - max).exp());
                let s: T = buf.iter().copied().sum();
                buf.iter_mut().for_each(|b| *b /= s);
            }
        }
        if !fully_supervised {
            for b in buf.iter_mut() {
                *b += T::lit(rng.random_range(-amplitude..amplitude));
            }
        }
        simplex_project_in_place(&mut buf, &mut scratch);
        if let Some(owner) = mask.owner(idx) {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i == owner { T::one() } else { T::zero() };
            }
        }
        p.set_pixel(idx, &buf);
    }
    Ok(InitialState {
        ownerships: p,
        means,
    })
}

/// Full model from the default initialization.
pub fn run_sms<T: Real>(
    image: &Image<T>,
    config: &RunConfig,
    supervision: Option<&Supervision>,
) -> Result<RunOutput<T>, RunFailure> {
    run_with_observer(image, config, supervision, None, &mut |_| {})
}

/// Piecewise-constant model from the default initialization.
pub fn run_pc_sms<T: Real>(
    image: &Image<T>,
    config: &RunConfig,
    supervision: Option<&Supervision>,
) -> Result<RunOutput<T>, RunFailure> {
    let mut cfg = config.clone();
    cfg.model = ModelKind::Pc;
    run_with_observer(image, &cfg, supervision, None, &mut |_| {})
}

/// Runs whichever model `config` selects. `initial` replaces the default
/// initialization; `observer` sees every trace row as soon as it exists.
pub fn run_with_observer<T: Real>(
    image: &Image<T>,
    config: &RunConfig,
    supervision: Option<&Supervision>,
    initial: Option<InitialState<T>>,
    observer: &mut dyn FnMut(&TraceRow),
) -> Result<RunOutput<T>, RunFailure> {
    config.validate()?;
    let (w, h) = image.dims();
    let sup = supervision.cloned().unwrap_or_default();
    sup.validate_for(w, h, config.params.k).map_err(Error::from)?;
    let mask = sup.mask(w, h);
    let init = match initial {
        Some(s) => {
            s.ownerships.check_dims(image.dims())?;
            if s.ownerships.k() != config.params.k || s.means.len() != config.params.k {
                return Err(Error::invalid("initial state does not have K channels").into());
            }
            validate_stack(&s.ownerships, T::feasibility_tol())?.into_result()?;
            s
        }
        None => initialize(image, config, supervision)?,
    };
    let mut am = Alternation::new(image, config, mask, init);
    am.run(observer)
}

enum PatternState<T> {
    Fields(PatternStack<T>),
    Means(Vec<Vec<T>>),
}

struct Alternation<'a, T> {
    image: &'a Image<T>,
    config: &'a RunConfig,
    params: ModelParams<T>,
    mask: SupervisionMask,
    p: OwnershipStack<T>,
    patterns: PatternState<T>,
    dumb: Vec<bool>,
    trace: RunTrace,
}

impl<'a, T: Real> Alternation<'a, T> {
    fn new(
        image: &'a Image<T>,
        config: &'a RunConfig,
        mask: SupervisionMask,
        init: InitialState<T>,
    ) -> Self {
        let params = ModelParams {
            k: config.params.k,
            lambda: T::lit(config.params.lambda),
            alpha: T::lit(config.params.alpha),
            epsilon: T::lit(config.params.epsilon),
        };
        let (w, h) = image.dims();
        let patterns = match config.model {
            ModelKind::Full => PatternState::Fields(PatternStack::constant(&init.means, w, h)),
            ModelKind::Pc => PatternState::Means(init.means),
        };
        Self {
            image,
            config,
            params,
            mask,
            p: init.ownerships,
            patterns,
            dumb: vec![false; config.params.k],
            trace: RunTrace::default(),
        }
    }

    fn energy_of(&self, p: &OwnershipStack<T>) -> Result<EnergyBreakdown<T>> {
        match &self.patterns {
            PatternState::Fields(u) => total_energy(p, u, self.image, &self.params),
            PatternState::Means(m) => pc_energy(p, m, self.image, &self.params),
        }
    }

    fn forces(&self) -> Result<Vec<ScalarField<T>>> {
        match &self.patterns {
            PatternState::Fields(u) => data_forces(u, self.image, self.params.lambda),
            PatternState::Means(m) => data_forces_constant(m, self.image, self.params.lambda),
        }
    }

    fn residual(&self) -> Result<ElResidual> {
        match &self.patterns {
            PatternState::Fields(u) => el_residual(&self.p, u, self.image, &self.params, &self.mask),
            PatternState::Means(m) => el_residual_pc(
                &self.p,
                m,
                self.image,
                &self.params,
                &self.mask,
                self.dumb_threshold(),
            ),
        }
    }

    fn dumb_threshold(&self) -> T {
        T::lit(self.config.solver.dumb_threshold(self.p.pixel_count()))
    }

    fn fail(&self, error: Error) -> RunFailure {
        RunFailure {
            error,
            trace: self.trace.clone(),
        }
    }

    /// Ownership half-step with the descent guard. Returns the max change.
    fn update_ownerships(&mut self, current: T) -> Result<(T, T)> {
        let e = self.forces()?;
        let solved = solve_ownerships(
            &self.p,
            &e,
            self.params.epsilon,
            &self.mask,
            &self.config.solver,
        )?;
        self.trace.unconverged_inner += solved.unconverged;
        let mut candidate = solved.ownerships;
        for (i, dumb) in self.dumb.iter().enumerate() {
            if *dumb {
                freeze_channel(&mut candidate, i, &self.mask);
            }
        }

        let mut t = T::one();
        for attempt in 0..40 {
            let trial = if attempt == 0 {
                candidate.clone()
            } else {
                blend(&self.p, &candidate, t)
            };
            let e_trial = self.energy_of(&trial)?.total;
            if e_trial <= current {
                if attempt > 0 {
                    self.trace.guarded_steps += 1;
                }
                let change = trial.max_abs_diff(&self.p)?;
                self.p = trial;
                return Ok((change, e_trial));
            }
            t = t / T::from_count(2);
        }
        self.trace.guarded_steps += 1;
        Ok((T::zero(), current))
    }

    fn update_patterns(&mut self) -> Result<()> {
        let threshold = self.dumb_threshold();
        match &mut self.patterns {
            PatternState::Fields(u) => {
                let mut next = Vec::with_capacity(u.k());
                for (i, pi) in self.p.channels().iter().enumerate() {
                    let sol = solve_pattern(
                        pi,
                        self.image,
                        self.params.alpha,
                        self.params.lambda,
                        &self.config.solver,
                        Some(u.pattern(i)),
                    )?;
                    self.trace.unconverged_inner += sol.stats.iter().filter(|s| !s.converged).count();
                    self.dumb[i] |= sol.dumb;
                    next.push(sol.pattern);
                }
                *u = PatternStack::new(next)?;
            }
            PatternState::Means(m) => {
                let (means, dumb) = update_means(&self.p, self.image, threshold)?;
                if dumb.iter().all(|&d| d) {
                    return Err(Error::Degenerate("every channel is dumb".into()));
                }
                for (d, nd) in self.dumb.iter_mut().zip(dumb) {
                    *d |= nd;
                }
                *m = means;
            }
        }
        Ok(())
    }

    fn push_row(&mut self, iter: usize, e: EnergyBreakdown<T>, max_dp: T, ms: f64, observer: &mut dyn FnMut(&TraceRow)) {
        let row = TraceRow {
            iter,
            energy: EnergyBreakdown {
                data_term: to_f64(e.data_term),
                sobolev_term: to_f64(e.sobolev_term),
                mm_term: to_f64(e.mm_term),
                total: to_f64(e.total),
            },
            max_dp: to_f64(max_dp),
            ms,
        };
        self.trace.rows.push(row);
        observer(&row);
    }

    fn run(&mut self, observer: &mut dyn FnMut(&TraceRow)) -> Result<RunOutput<T>, RunFailure> {
        let e0 = self.energy_of(&self.p).map_err(|e| self.fail(e))?;
        self.trace.initial_residual = Some(self.residual().map_err(|e| self.fail(e))?);
        self.push_row(0, e0, T::zero(), 0.0, observer);

        let mut previous = e0.total;
        let mut status = RunStatus::MaxOuter;
        for iter in 1..=self.config.max_outer {
            let started = Instant::now();
            let step = match self.config.order {
                UpdateOrder::OwnershipsFirst => self
                    .update_ownerships(previous)
                    .and_then(|(dp, _)| self.update_patterns().map(|_| dp)),
                UpdateOrder::PatternsFirst => self.update_patterns().and_then(|_| {
                    let mid = self.energy_of(&self.p)?.total;
                    self.update_ownerships(mid).map(|(dp, _)| dp)
                }),
            };
            let max_dp = step.map_err(|e| self.fail(e))?;
            let energy = self.energy_of(&self.p).map_err(|e| self.fail(e))?;
            if !energy.total.is_finite() {
                return Err(self.fail(Error::Diverged {
                    stage: "outer",
                    residual: f64::NAN,
                }));
            }
            let ms = started.elapsed().as_secs_f64() * 1e3;
            self.push_row(iter, energy, max_dp, ms, observer);

            let decrease = previous - energy.total;
            let scale = previous.abs().max(T::min_positive_value());
            previous = energy.total;
            if decrease / scale < T::lit(self.config.energy_tol) {
                status = RunStatus::Converged;
                break;
            }
        }

        self.trace.final_residual = Some(self.residual().map_err(|e| self.fail(e))?);
        self.trace.dumb = self.dumb.clone();
        let (w, h) = self.image.dims();
        let (patterns, means) = match &self.patterns {
            PatternState::Fields(u) => (u.clone(), None),
            PatternState::Means(m) => (PatternStack::constant(m, w, h), Some(m.clone())),
        };
        Ok(RunOutput {
            ownerships: self.p.clone(),
            patterns,
            means,
            status,
            trace: self.trace.clone(),
        })
    }
}

fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// `(1 - t) a + t b`, pixelwise; stays on the simplex for feasible inputs.
fn blend<T: Real>(a: &OwnershipStack<T>, b: &OwnershipStack<T>, t: T) -> OwnershipStack<T> {
    let channels = a
        .channels()
        .iter()
        .zip(b.channels())
        .map(|(x, y)| {
            x.zip_map(y, |u, v| (u + t * (v - u)).max_of(T::zero()).min_of(T::one()))
                .expect("blend of equally shaped stacks")
        })
        .collect();
    Stack::new(channels).expect("blend of equally shaped stacks")
}

/// Sets a dumb channel to zero outside supervised pixels and re-projects.
fn freeze_channel<T: Real>(p: &mut OwnershipStack<T>, channel: usize, mask: &SupervisionMask) {
    let k = p.k();
    let mut buf = vec![T::zero(); k];
    let mut scratch = Vec::with_capacity(k);
    for idx in 0..p.pixel_count() {
        if mask.is_pinned(idx) {
            continue;
        }
        for (b, c) in buf.iter_mut().zip(p.channels()) {
            *b = c.values()[idx];
        }
        if buf[channel] == T::zero() {
            continue;
        }
        let freed = buf[channel];
        buf[channel] = T::zero();
        let rest = T::one() - freed;
        if rest > T::zero() {
            buf.iter_mut().for_each(|b| *b /= rest);
        } else {
            let share = T::one() / T::from_count(k - 1);
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i == channel { T::zero() } else { share };
            }
        }
        simplex_project_in_place(&mut buf, &mut scratch);
        p.set_pixel(idx, &buf);
    }
}
