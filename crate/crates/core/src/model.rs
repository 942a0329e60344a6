//! The soft Mumford-Shah energy, its pieces, hardening to labels and the
//! sigmoid transition profile.
//!
//! ```text
//! E[P, U | I] = lambda * sum_i  int (u_i - I)^2 p_i
//!             + alpha  * sum_i  int |grad u_i|^2
//!             +          sum_i  int 9 eps |grad p_i|^2 + (p_i (1 - p_i))^2 / eps
//! ```
//!
//! For multi-band images `(u_i - I)^2` and `|grad u_i|^2` are summed over
//! bands.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::scalar::{Real, Scalar};
use crate::simplex::validate_stack;
use crate::stack::{Image, OwnershipStack, PatternStack};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub k: usize,
    pub lambda: T,
    pub alpha: T,
    pub epsilon: T,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(k: usize, lambda: T, alpha: T, epsilon: T) -> Result<Self> {
        let p = Self {
            k,
            lambda,
            alpha,
            epsilon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid(format!("K must be at least 2, got {}", self.k)));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("epsilon", self.epsilon),
        ] {
            if v <= T::zero() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown<T> {
    pub data_term: T,
    pub sobolev_term: T,
    pub mm_term: T,
    pub total: T,
}

impl<T: Scalar> EnergyBreakdown<T> {
    fn from_terms(data_term: T, sobolev_term: T, mm_term: T) -> Self {
        Self {
            data_term,
            sobolev_term,
            mm_term,
            total: data_term + sobolev_term + mm_term,
        }
    }
}

/// `lambda * sum_i int p_i * |I - u_i|^2`.
pub fn data_energy<T: Scalar>(
    p: &OwnershipStack<T>,
    u: &PatternStack<T>,
    image: &Image<T>,
    lambda: T,
) -> Result<T> {
    check_shapes(p, image)?;
    check_patterns(p, u, image)?;
    let mut total = T::zero();
    for (pi, ui) in p.channels().iter().zip(u.patterns()) {
        let mut channel = T::zero();
        for (idx, &w) in pi.values().iter().enumerate() {
            let mut sq = T::zero();
            for (band, ub) in image.channels().iter().zip(ui.channels()) {
                let d = band.values()[idx] - ub.values()[idx];
                sq += d * d;
            }
            channel += w * sq;
        }
        total += channel;
    }
    Ok(lambda * total)
}

/// Data energy with spatially constant patterns `means[i][band]`.
pub fn data_energy_constant<T: Scalar>(
    p: &OwnershipStack<T>,
    means: &[Vec<T>],
    image: &Image<T>,
    lambda: T,
) -> Result<T> {
    check_shapes(p, image)?;
    check_means(p, means, image)?;
    let mut total = T::zero();
    for (pi, mi) in p.channels().iter().zip(means) {
        let mut channel = T::zero();
        for (idx, &w) in pi.values().iter().enumerate() {
            let mut sq = T::zero();
            for (band, &m) in image.channels().iter().zip(mi) {
                let d = band.values()[idx] - m;
                sq += d * d;
            }
            channel += w * sq;
        }
        total += channel;
    }
    Ok(lambda * total)
}

/// `alpha * sum_i sum_band int |grad u_i|^2`.
pub fn sobolev_energy<T: Scalar>(u: &PatternStack<T>, alpha: T) -> T {
    let mut total = T::zero();
    for ui in u.patterns() {
        for band in ui.channels() {
            total += band.dirichlet_energy();
        }
    }
    alpha * total
}

/// Modica-Mortola energy of one ownership channel:
/// `int 9 eps |grad p|^2 + (p (1 - p))^2 / eps`.
pub fn mm_energy<T: Scalar>(p: &ScalarField<T>, epsilon: T) -> T {
    let nine = T::from_count(9);
    let potential: T = p
        .values()
        .iter()
        .map(|&v| {
            let w = v * (T::one() - v);
            w * w
        })
        .sum();
    nine * epsilon * p.dirichlet_energy() + potential / epsilon
}

/// Sum of [`mm_energy`] over every channel.
pub fn mm_energy_stack<T: Scalar>(p: &OwnershipStack<T>, epsilon: T) -> T {
    p.channels().iter().map(|c| mm_energy(c, epsilon)).sum()
}

/// Full energy of an admissible pair. Rejects ownerships that leave the
/// simplex by more than the scalar type's feasibility tolerance.
pub fn total_energy<T: Scalar>(
    p: &OwnershipStack<T>,
    u: &PatternStack<T>,
    image: &Image<T>,
    params: &ModelParams<T>,
) -> Result<EnergyBreakdown<T>> {
    total_energy_with_tol(p, u, image, params, T::feasibility_tol())
}

pub fn total_energy_with_tol<T: Scalar>(
    p: &OwnershipStack<T>,
    u: &PatternStack<T>,
    image: &Image<T>,
    params: &ModelParams<T>,
    tol: T,
) -> Result<EnergyBreakdown<T>> {
    check_k(p, params)?;
    validate_stack(p, tol)?.into_result()?;
    let data = data_energy(p, u, image, params.lambda)?;
    let sobolev = sobolev_energy(u, params.alpha);
    let mm = mm_energy_stack(p, params.epsilon);
    Ok(EnergyBreakdown::from_terms(data, sobolev, mm))
}

/// Piecewise-constant energy: patterns are constants `means[i][band]` and
/// the Sobolev term vanishes.
pub fn pc_energy<T: Scalar>(
    p: &OwnershipStack<T>,
    means: &[Vec<T>],
    image: &Image<T>,
    params: &ModelParams<T>,
) -> Result<EnergyBreakdown<T>> {
    pc_energy_with_tol(p, means, image, params, T::feasibility_tol())
}

pub fn pc_energy_with_tol<T: Scalar>(
    p: &OwnershipStack<T>,
    means: &[Vec<T>],
    image: &Image<T>,
    params: &ModelParams<T>,
    tol: T,
) -> Result<EnergyBreakdown<T>> {
    check_k(p, params)?;
    validate_stack(p, tol)?.into_result()?;
    let data = data_energy_constant(p, means, image, params.lambda)?;
    let mm = mm_energy_stack(p, params.epsilon);
    Ok(EnergyBreakdown::from_terms(data, T::zero(), mm))
}

fn check_k<T: Scalar>(p: &OwnershipStack<T>, params: &ModelParams<T>) -> Result<()> {
    if p.k() != params.k {
        return Err(Error::invalid(format!(
            "ownership stack has {} channels but K = {}",
            p.k(),
            params.k
        )));
    }
    Ok(())
}

fn check_shapes<T: Scalar>(p: &OwnershipStack<T>, image: &Image<T>) -> Result<()> {
    p.check_dims(image.dims())
}

fn check_patterns<T: Scalar>(
    p: &OwnershipStack<T>,
    u: &PatternStack<T>,
    image: &Image<T>,
) -> Result<()> {
    if u.k() != p.k() {
        return Err(Error::invalid(format!(
            "{} patterns for {} ownership channels",
            u.k(),
            p.k()
        )));
    }
    if u.bands() != image.k() {
        return Err(Error::invalid(format!(
            "patterns have {} bands, image has {}",
            u.bands(),
            image.k()
        )));
    }
    if u.dims() != image.dims() {
        return Err(Error::DimensionMismatch {
            expected: image.dims(),
            found: u.dims(),
        });
    }
    Ok(())
}

fn check_means<T: Scalar>(p: &OwnershipStack<T>, means: &[Vec<T>], image: &Image<T>) -> Result<()> {
    if means.len() != p.k() {
        return Err(Error::invalid(format!(
            "{} means for {} ownership channels",
            means.len(),
            p.k()
        )));
    }
    if means.iter().any(|m| m.len() != image.k()) {
        return Err(Error::invalid(format!(
            "each mean needs {} band values",
            image.k()
        )));
    }
    Ok(())
}

/// Hard segmentation with 1-based labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::invalid(format!(
                "{}x{} label map needs {} labels, got {}",
                width,
                height,
                width * height,
                labels.len()
            )));
        }
        if labels.contains(&0) {
            return Err(Error::invalid("labels are 1-based"));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u32) -> Self {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            labels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Fraction of pixels where both maps agree.
    pub fn agreement(&self, other: &LabelMap) -> f64 {
        assert_eq!(self.labels.len(), other.labels.len(), "label maps differ in size");
        let same = self
            .labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.labels.len() as f64
    }

    /// Agreement maximized over relabelings of `self` with labels `1..=k`.
    /// Exhaustive over permutations, intended for small `k`.
    pub fn agreement_up_to_relabeling(&self, other: &LabelMap, k: usize) -> f64 {
        let mut best = 0.0_f64;
        let mut perm: Vec<u32> = (1..=k as u32).collect();
        permutations(&mut perm, 0, &mut |perm| {
            let same = self
                .labels
                .iter()
                .zip(&other.labels)
                .filter(|(&a, &b)| perm[(a - 1) as usize] == b)
                .count();
            best = best.max(same as f64 / self.labels.len() as f64);
        });
        best
    }

    pub fn relabel(&self, map: impl Fn(u32) -> u32) -> LabelMap {
        LabelMap {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|&l| map(l)).collect(),
        }
    }
}

fn permutations(v: &mut Vec<u32>, start: usize, f: &mut impl FnMut(&[u32])) {
    if start == v.len() {
        f(v);
        return;
    }
    for i in start..v.len() {
        v.swap(start, i);
        permutations(v, start + 1, f);
        v.swap(start, i);
    }
}

/// Pixelwise argmax of the ownerships; ties go to the largest index.
pub fn harden<T: Scalar>(p: &OwnershipStack<T>) -> LabelMap {
    let n = p.pixel_count();
    let mut labels = Vec::with_capacity(n);
    for idx in 0..n {
        let mut best = 0;
        let mut best_val = p.channel(0).values()[idx];
        for i in 1..p.k() {
            let v = p.channel(i).values()[idx];
            if v >= best_val {
                best = i;
                best_val = v;
            }
        }
        labels.push(best as u32 + 1);
    }
    LabelMap {
        width: p.width(),
        height: p.height(),
        labels,
    }
}

/// Logistic sigmoid `1 / (1 + e^-t)`, evaluated without overflow.
pub fn sigmoid<T: Real>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

/// `sigma(d / (3 eps))` pixelwise; the optimal transition profile across an
/// interface with signed distance `d`.
pub fn sigmoid_profile<T: Real>(signed_distance: &ScalarField<T>, epsilon: T) -> ScalarField<T> {
    let scale = T::from_count(3) * epsilon;
    signed_distance.map(|d| sigmoid(d / scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::Stack;
    use num_rational::Ratio;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(f: ScalarField<f64>) -> Image<f64> {
        Stack::from_field(f)
    }

    fn params(k: usize) -> ModelParams<f64> {
        ModelParams::new(k, 1.0, 2.0, 1.5).unwrap()
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
    fn params_must_be_positive() {
        assert!(ModelParams::new(1, 1.0, 1.0, 1.0).is_err());
        assert!(ModelParams::new(2, 0.0, 1.0, 1.0).is_err());
        assert!(ModelParams::new(2, 1.0, -1.0, 1.0).is_err());
        assert!(ModelParams::new(2, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn data_energy_zero_when_patterns_match_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ScalarField::from_fn(6, 5, |x, y| (x * y) as f64 / 30.0);
        let p = random_feasible(3, 6, 5, &mut rng);
        let u = PatternStack::from_fields(vec![img.clone(); 3]).unwrap();
        assert_eq!(data_energy(&p, &u, &gray(img), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn data_energy_weights_out_unowned_channel() {
        let p = Stack::indicator(2, 10, 10, |_, _| 0);
        let u = PatternStack::from_fields(vec![
            ScalarField::zeros(10, 10),
            ScalarField::filled(10, 10, 123.0),
        ])
        .unwrap();
        let img = gray(ScalarField::filled(10, 10, 1.0));
        assert_eq!(data_energy(&p, &u, &img, 1.0).unwrap(), 100.0);
    }

    #[test]
    fn data_energy_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w, h, k) = (7, 4, 3);
        let p = random_feasible(k, w, h, &mut rng);
        let fields: Vec<_> = (0..k)
            .map(|_| ScalarField::from_fn(w, h, |_, _| rng.random::<f64>()))
            .collect();
        let img = ScalarField::from_fn(w, h, |_, _| rng.random::<f64>());
        let u = PatternStack::from_fields(fields.clone()).unwrap();
        let mut direct = 0.0;
        for y in 0..h {
            for x in 0..w {
                for i in 0..k {
                    direct +=
                        p.channel(i).get(x, y) * (img.get(x, y) - fields[i].get(x, y)).powi(2);
                }
            }
        }
        let e = data_energy(&p, &u, &gray(img), 2.5).unwrap();
        assert!((e - 2.5 * direct).abs() <= 1e-12 * e.abs());
    }

    #[test]
    fn mm_energy_wells_and_midpoint() {
        assert_eq!(mm_energy(&ScalarField::filled(8, 8, 0.0_f64), 0.7), 0.0);
        assert_eq!(mm_energy(&ScalarField::filled(8, 8, 1.0_f64), 0.7), 0.0);
        let eps = Ratio::new(3_i64, 2);
        let half = ScalarField::filled(6, 5, Ratio::new(1_i64, 2));
        assert_eq!(mm_energy(&half, eps), Ratio::from_integer(30) / (Ratio::from_integer(16) * eps));
    }

    #[test]
    fn mm_energy_complement_symmetry_exact() {
        let p = ScalarField::from_fn(5, 4, |x, y| Ratio::new(((x * 3 + y * 5) % 7) as i64, 6));
        let q = p.map(|v| Ratio::from_integer(1) - v);
        let eps = Ratio::new(2_i64, 3);
        assert_eq!(mm_energy(&p, eps), mm_energy(&q, eps));
    }

    #[test]
    fn existence_proof_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = ScalarField::from_fn(9, 7, |_, _| rng.random::<f64>());
        let p = Stack::indicator(3, 9, 7, |_, _| 0);
        let u = PatternStack::from_fields(vec![ScalarField::zeros(9, 7); 3]).unwrap();
        let prm = ModelParams::new(3, 4.0, 2.0, 1.5).unwrap();
        let e = total_energy(&p, &u, &gray(img.clone()), &prm).unwrap();
        let expected = 4.0 * img.values().iter().map(|v| v * v).sum::<f64>();
        assert!((e.total - expected).abs() <= 1e-12 * expected);
        assert_eq!(e.sobolev_term, 0.0);
        assert_eq!(e.mm_term, 0.0);
    }

    #[test]
    fn global_minimum_is_zero() {
        let img = gray(ScalarField::filled(5, 5, 0.3));
        let p = Stack::indicator(2, 5, 5, |_, _| 0);
        let u = PatternStack::from_fields(vec![
            ScalarField::filled(5, 5, 0.3),
            ScalarField::filled(5, 5, 0.9),
        ])
        .unwrap();
        let e = total_energy(&p, &u, &img, &params(2)).unwrap();
        assert_eq!(e.total, 0.0);
    }

    #[test]
    fn total_energy_rejects_infeasible() {
        let img = gray(ScalarField::filled(3, 3, 0.3));
        let p = Stack::filled(2, 3, 3, 0.6);
        let u = PatternStack::from_fields(vec![ScalarField::zeros(3, 3); 2]).unwrap();
        assert!(matches!(
            total_energy(&p, &u, &img, &params(2)),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn pc_energy_agrees_with_constant_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (w, h, k) = (8, 6, 3);
        let p = random_feasible(k, w, h, &mut rng);
        let img = gray(ScalarField::from_fn(w, h, |_, _| rng.random::<f64>()));
        let means: Vec<Vec<f64>> = (0..k).map(|_| vec![rng.random::<f64>()]).collect();
        let prm = params(k);
        let pc = pc_energy(&p, &means, &img, &prm).unwrap();
        let full = total_energy(&p, &PatternStack::constant(&means, w, h), &img, &prm).unwrap();
        assert_eq!(pc.sobolev_term, 0.0);
        assert_eq!(full.sobolev_term, 0.0);
        assert_eq!(pc.data_term, full.data_term);
        assert_eq!(pc.total, full.total);

        let flat = gray(ScalarField::filled(w, h, 0.4));
        let same = vec![vec![0.4]; k];
        assert_eq!(pc_energy(&p, &same, &flat, &prm).unwrap().data_term, 0.0);
    }

    #[test]
    fn pc_energy_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (w, h, k) = (5, 5, 2);
        let p = random_feasible(k, w, h, &mut rng);
        let img = ScalarField::from_fn(w, h, |_, _| rng.random::<f64>());
        let means = vec![vec![0.2], vec![0.7]];
        let prm = ModelParams::new(k, 3.0, 1.0, 0.5).unwrap();
        let mut data = 0.0;
        let mut mm = 0.0;
        for i in 0..k {
            let pi = p.channel(i);
            for y in 0..h {
                for x in 0..w {
                    let v = pi.get(x, y);
                    data += v * (img.get(x, y) - means[i][0]).powi(2);
                    mm += (v * (1.0 - v)).powi(2) / 0.5;
                    if x + 1 < w {
                        mm += 9.0 * 0.5 * (pi.get(x + 1, y) - v).powi(2);
                    }
                    if y + 1 < h {
                        mm += 9.0 * 0.5 * (pi.get(x, y + 1) - v).powi(2);
                    }
                }
            }
        }
        let e = pc_energy(&p, &means, &gray(img), &prm).unwrap();
        assert!((e.data_term - 3.0 * data).abs() < 1e-12);
        assert!((e.mm_term - mm).abs() < 1e-12);
    }

    #[test]
    fn permutation_symmetry_exact_over_rationals() {
        type Q = Ratio<i64>;
        let (w, h, k) = (4, 3, 3);
        let q = |n: i64, d: i64| Q::new(n, d);
        let raw: Vec<[i64; 3]> = (0..w * h)
            .map(|i| {
                let i = i as i64;
                [i % 3 + 1, (i * 5) % 4, 2]
            })
            .collect();
        let mut p = Stack::filled(k, w, h, q(0, 1));
        for (idx, r) in raw.iter().enumerate() {
            let s: i64 = r.iter().sum();
            p.set_pixel(idx, &[q(r[0], s), q(r[1], s), q(r[2], s)]);
        }
        let u = PatternStack::from_fields(
            (0..k)
                .map(|i| ScalarField::from_fn(w, h, |x, y| q((x + 2 * y + i) as i64, 7)))
                .collect(),
        )
        .unwrap();
        let img = Stack::from_field(ScalarField::from_fn(w, h, |x, y| q((x * y) as i64, 5)));
        let prm = ModelParams::new(k, q(3, 1), q(1, 2), q(3, 2)).unwrap();
        let base = total_energy(&p, &u, &img, &prm).unwrap();
        for sigma in [[0, 1, 2], [2, 0, 1], [1, 0, 2], [2, 1, 0]] {
            let e = total_energy(&p.permute(&sigma).unwrap(), &u.permute(&sigma).unwrap(), &img, &prm)
                .unwrap();
            assert_eq!(e, base);
        }
    }

    #[test]
    fn harden_examples() {
        let p = Stack::new(vec![
            ScalarField::new(3, 1, vec![0.2, 0.5, 1.0]).unwrap(),
            ScalarField::new(3, 1, vec![0.5, 0.5, 0.0]).unwrap(),
            ScalarField::new(3, 1, vec![0.3, 0.0, 0.0]).unwrap(),
        ])
        .unwrap();
        assert_eq!(harden(&p).labels(), &[2, 2, 1]);
        let tie = Stack::filled(4, 2, 2, 0.25_f64);
        assert!(harden(&tie).labels().iter().all(|&l| l == 4));
    }

    #[test]
    fn sigmoid_profile_examples() {
        let d = ScalarField::new(3, 1, vec![0.0_f64, 100.0 * 3.0 * 2.0, -100.0 * 3.0 * 2.0]).unwrap();
        let s = sigmoid_profile(&d, 2.0);
        assert_eq!(s.get(0, 0), 0.5);
        assert!((s.get(1, 0) - 1.0).abs() < 1e-12);
        assert!(s.get(2, 0) >= 0.0 && s.get(2, 0) < 1e-12);
        let d = ScalarField::from_fn(41, 1, |x, _| x as f64 - 20.0);
        let pos = sigmoid_profile(&d, 1.3);
        let neg = sigmoid_profile(&d.map(|v| -v), 1.3);
        for (a, b) in pos.values().iter().zip(neg.values()) {
            assert!((a + b - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn relabel_agreement() {
        let a = LabelMap::from_fn(4, 1, |x, _| if x < 2 { 1 } else { 2 });
        let b = a.relabel(|l| 3 - l);
        assert_eq!(a.agreement(&b), 0.0);
        assert_eq!(a.agreement_up_to_relabeling(&b, 2), 1.0);
    }
}
