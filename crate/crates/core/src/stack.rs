//! Multi-channel containers: ownership stacks, multi-band images and the
//! per-channel pattern stacks.

use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::scalar::Scalar;

/// `K` fields over one grid. Used for ownership stacks (`p_1..p_K`) and for
/// multi-band images (gray = 1 band, RGB = 3 bands).
#[derive(Debug, Clone, PartialEq)]
pub struct Stack<T> {
    width: usize,
    height: usize,
    channels: Vec<ScalarField<T>>,
}

/// Pixelwise point on the probability simplex, one field per pattern.
pub type OwnershipStack<T> = Stack<T>;

/// Observed image; one field per colour band.
pub type Image<T> = Stack<T>;

impl<T: Scalar> Stack<T> {
    pub fn new(channels: Vec<ScalarField<T>>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::invalid("stack needs at least one channel"))?;
        let dims = first.dims();
        for c in &channels[1..] {
            if c.dims() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    found: c.dims(),
                });
            }
        }
        Ok(Self {
            width: dims.0,
            height: dims.1,
            channels,
        })
    }

    pub fn from_field(field: ScalarField<T>) -> Self {
        Self {
            width: field.width(),
            height: field.height(),
            channels: vec![field],
        }
    }

    pub fn filled(k: usize, width: usize, height: usize, value: T) -> Self {
        assert!(k > 0, "stack needs at least one channel");
        Self {
            width,
            height,
            channels: vec![ScalarField::filled(width, height, value); k],
        }
    }

    /// Hard ownership: every pixel belongs to channel `owner(x, y)` (0-based).
    pub fn indicator(
        k: usize,
        width: usize,
        height: usize,
        owner: impl Fn(usize, usize) -> usize,
    ) -> Self {
        let channels = (0..k)
            .map(|i| {
                ScalarField::from_fn(width, height, |x, y| {
                    if owner(x, y) == i {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            })
            .collect();
        Self {
            width,
            height,
            channels,
        }
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.channels.len()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn channels(&self) -> &[ScalarField<T>] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &ScalarField<T> {
        &self.channels[i]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut ScalarField<T> {
        &mut self.channels[i]
    }

    pub fn into_channels(self) -> Vec<ScalarField<T>> {
        self.channels
    }

    /// Values of every channel at flat pixel index `idx`.
    pub fn pixel(&self, idx: usize) -> Vec<T> {
        self.channels.iter().map(|c| c.values()[idx]).collect()
    }

    pub fn set_pixel(&mut self, idx: usize, values: &[T]) {
        debug_assert_eq!(values.len(), self.k());
        for (c, &v) in self.channels.iter_mut().zip(values) {
            c.values_mut()[idx] = v;
        }
    }

    pub fn check_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                found: self.dims(),
            });
        }
        Ok(())
    }

    /// Channel `i` of the result is channel `sigma[i]` of `self` (0-based).
    pub fn permute(&self, sigma: &[usize]) -> Result<Self> {
        check_permutation(sigma, self.k())?;
        Ok(Self {
            width: self.width,
            height: self.height,
            channels: sigma.iter().map(|&s| self.channels[s].clone()).collect(),
        })
    }

    /// Max-norm distance between two stacks of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.k() != other.k() {
            return Err(Error::invalid(format!(
                "channel count mismatch: {} vs {}",
                self.k(),
                other.k()
            )));
        }
        other.check_dims(self.dims())?;
        let mut m = T::zero();
        for (a, b) in self.channels.iter().zip(&other.channels) {
            for (&x, &y) in a.values().iter().zip(b.values()) {
                m = m.max_of((x - y).abs());
            }
        }
        Ok(m)
    }
}

/// Mean fields `u_1..u_K`, each with one field per image band.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternStack<T> {
    patterns: Vec<Stack<T>>,
}

impl<T: Scalar> PatternStack<T> {
    pub fn new(patterns: Vec<Stack<T>>) -> Result<Self> {
        let first = patterns
            .first()
            .ok_or_else(|| Error::invalid("pattern stack needs at least one pattern"))?;
        for p in &patterns[1..] {
            p.check_dims(first.dims())?;
            if p.k() != first.k() {
                return Err(Error::invalid("patterns disagree on band count"));
            }
        }
        Ok(Self { patterns })
    }

    /// Spatially constant patterns; `means[i][b]` is band `b` of pattern `i`.
    pub fn constant(means: &[Vec<T>], width: usize, height: usize) -> Self {
        let patterns = means
            .iter()
            .map(|bands| Stack {
                width,
                height,
                channels: bands
                    .iter()
                    .map(|&m| ScalarField::filled(width, height, m))
                    .collect(),
            })
            .collect();
        Self { patterns }
    }

    /// Single-band convenience constructor.
    pub fn from_fields(fields: Vec<ScalarField<T>>) -> Result<Self> {
        Self::new(fields.into_iter().map(Stack::from_field).collect())
    }

    pub fn k(&self) -> usize {
        self.patterns.len()
    }

    pub fn bands(&self) -> usize {
        self.patterns[0].k()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.patterns[0].dims()
    }

    pub fn patterns(&self) -> &[Stack<T>] {
        &self.patterns
    }

    pub fn pattern(&self, i: usize) -> &Stack<T> {
        &self.patterns[i]
    }

    pub fn pattern_mut(&mut self, i: usize) -> &mut Stack<T> {
        &mut self.patterns[i]
    }

    pub fn permute(&self, sigma: &[usize]) -> Result<Self> {
        check_permutation(sigma, self.k())?;
        Ok(Self {
            patterns: sigma.iter().map(|&s| self.patterns[s].clone()).collect(),
        })
    }
}

/// Validates a 0-based permutation of `0..k`.
pub fn check_permutation(sigma: &[usize], k: usize) -> Result<()> {
    if sigma.len() != k {
        return Err(Error::invalid(format!(
            "permutation has {} entries, expected {k}",
            sigma.len()
        )));
    }
    let mut seen = vec![false; k];
    for &s in sigma {
        if s >= k || seen[s] {
            return Err(Error::invalid(format!(
                "{sigma:?} is not a permutation of 0..{k}"
            )));
        }
        seen[s] = true;
    }
    Ok(())
}

/// Applies a 0-based permutation to a plain list.
pub fn permute_slice<V: Clone>(values: &[V], sigma: &[usize]) -> Result<Vec<V>> {
    check_permutation(sigma, values.len())?;
    Ok(sigma.iter().map(|&s| values[s].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_identity_and_swap() {
        let s = Stack::<f64>::indicator(2, 3, 2, |x, _| usize::from(x > 0));
        assert_eq!(s.permute(&[0, 1]).unwrap(), s);
        let swapped = s.permute(&[1, 0]).unwrap();
        assert_eq!(swapped.channel(0), s.channel(1));
        assert_eq!(swapped.permute(&[1, 0]).unwrap(), s);
    }

    #[test]
    fn invalid_permutations_rejected() {
        let s = Stack::<f64>::filled(3, 2, 2, 0.0);
        assert!(s.permute(&[0, 0, 1]).is_err());
        assert!(s.permute(&[0, 1]).is_err());
        assert!(s.permute(&[0, 1, 3]).is_err());
    }

    #[test]
    fn stack_rejects_mismatched_channels() {
        let a = ScalarField::<f64>::zeros(3, 3);
        let b = ScalarField::<f64>::zeros(3, 4);
        assert!(matches!(
            Stack::new(vec![a, b]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
