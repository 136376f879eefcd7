use std::fmt;
use std::sync::Arc;

use crate::{Error, Result};

type Predicate = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

#[derive(Clone)]
enum Shape {
    Box,
    Whole,
    Predicate(Predicate),
}

/// A region `M ⊂ R^d` with a bounding box. Leaving `M` means absorption.
///
/// Boxes are half-open, `[lower, upper)` along every axis, matching the
/// tie-breaking of grid cells.
#[derive(Clone)]
pub struct Domain {
    lower: Vec<f64>,
    upper: Vec<f64>,
    shape: Shape,
}

impl Domain {
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidArgument(
                "box corners must be non-empty and of equal length".into(),
            ));
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidArgument(format!(
                "box lower corner {lower:?} must lie strictly below {upper:?}"
            )));
        }
        Ok(Self {
            lower,
            upper,
            shape: Shape::Box,
        })
    }

    /// The cube `[-half_width, half_width)^d`.
    pub fn cube(dim: usize, half_width: f64) -> Result<Self> {
        Self::boxed(vec![-half_width; dim], vec![half_width; dim])
    }

    /// All of `R^d`; nothing is ever absorbed.
    pub fn whole(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
            shape: Shape::Whole,
        }
    }

    /// Points of the box that also satisfy `member`.
    pub fn with_predicate(
        lower: Vec<f64>,
        upper: Vec<f64>,
        member: impl Fn(&[f64]) -> bool + Send + Sync + 'static,
    ) -> Result<Self> {
        let mut d = Self::boxed(lower, upper)?;
        d.shape = Shape::Predicate(Arc::new(member));
        Ok(d)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn is_whole(&self) -> bool {
        matches!(self.shape, Shape::Whole)
    }

    pub fn is_box(&self) -> bool {
        matches!(self.shape, Shape::Box)
    }

    #[inline]
    pub fn contains(&self, x: &[f64]) -> bool {
        match &self.shape {
            Shape::Whole => x.iter().all(|v| v.is_finite()),
            Shape::Box => self.in_box(x),
            Shape::Predicate(f) => self.in_box(x) && f(x),
        }
    }

    #[inline]
    fn in_box(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *v >= *lo && *v < *hi)
    }
}

impl fmt::Debug for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.shape {
            Shape::Box => "box",
            Shape::Whole => "whole",
            Shape::Predicate(_) => "predicate",
        };
        f.debug_struct("Domain")
            .field("kind", &kind)
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_open_box() {
        let d = Domain::boxed(vec![0.0], vec![3.0]).unwrap();
        assert!(d.contains(&[0.0]));
        assert!(d.contains(&[2.999]));
        assert!(!d.contains(&[3.0]));
        assert!(!d.contains(&[-1e-12]));
    }

    #[test]
    fn predicate_restricts_box() {
        let disc = Domain::with_predicate(vec![-1.0, -1.0], vec![1.0, 1.0], |x| {
            x[0] * x[0] + x[1] * x[1] < 1.0
        })
        .unwrap();
        assert!(disc.contains(&[0.0, 0.0]));
        assert!(!disc.contains(&[0.9, 0.9]));
    }

    #[test]
    fn whole_space_rejects_only_non_finite() {
        let d = Domain::whole(2);
        assert!(d.contains(&[1e300, -1e300]));
        assert!(!d.contains(&[f64::NAN, 0.0]));
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(Domain::boxed(vec![1.0], vec![1.0]).is_err());
    }
}
