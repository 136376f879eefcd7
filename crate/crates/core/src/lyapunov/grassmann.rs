use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::{Purpose, Substream};
use crate::linalg::{orthonormality_defect, orthonormalize};
use crate::{Error, Result};

/// Frames that are orthonormal to this precision are accepted as they are.
pub const FRAME_TOLERANCE: f64 = 1e-12;

/// A `k`-plane in `R^d`, held as a `d × k` frame with orthonormal columns.
/// Equality compares projections, so any two frames of one plane are equal.
#[derive(Debug, Clone)]
pub struct GrassmannPoint {
    frame: DMatrix<f64>,
}

impl GrassmannPoint {
    /// The span of the columns of `frame`, orthonormalised by Gram–Schmidt.
    pub fn new(frame: DMatrix<f64>) -> Result<Self> {
        check_shape(frame.nrows(), frame.ncols())?;
        let frame = orthonormalize(frame)
            .ok_or_else(|| Error::InvalidArgument("frame columns are linearly dependent".into()))?;
        Ok(Self { frame })
    }

    pub fn from_orthonormal(frame: DMatrix<f64>) -> Result<Self> {
        check_shape(frame.nrows(), frame.ncols())?;
        let defect = orthonormality_defect(&frame);
        if !(defect <= FRAME_TOLERANCE) {
            return Err(Error::InvalidArgument(format!(
                "frame is not orthonormal (defect {defect:e})"
            )));
        }
        Ok(Self { frame })
    }

    /// `span(e_1, …, e_k)`.
    pub fn standard(d: usize, k: usize) -> Result<Self> {
        check_shape(d, k)?;
        Ok(Self {
            frame: DMatrix::identity(d, k),
        })
    }

    pub fn frame(&self) -> &DMatrix<f64> {
        &self.frame
    }

    pub fn into_frame(self) -> DMatrix<f64> {
        self.frame
    }

    pub fn dim(&self) -> usize {
        self.frame.nrows()
    }

    pub fn rank(&self) -> usize {
        self.frame.ncols()
    }

    /// `P_s = F Fᵀ`.
    pub fn projection(&self) -> DMatrix<f64> {
        &self.frame * self.frame.transpose()
    }

    /// Largest entry of the difference of the two projections.
    pub fn distance(&self, other: &GrassmannPoint) -> f64 {
        if self.dim() != other.dim() || self.rank() != other.rank() {
            return f64::INFINITY;
        }
        (self.projection() - other.projection()).amax()
    }

    pub fn same_plane(&self, other: &GrassmannPoint, tol: f64) -> bool {
        self.distance(other) <= tol
    }
}

impl PartialEq for GrassmannPoint {
    fn eq(&self, other: &Self) -> bool {
        self.same_plane(other, 1e-10)
    }
}

fn check_shape(d: usize, k: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("plane rank {k} must lie in 1..={d}")));
    }
    Ok(())
}

/// A plane drawn from the rotation-invariant law on `Gr_k(R^d)`: the span
/// of a `d × k` standard Gaussian matrix. Uses `seed` with purpose `Haar`.
pub fn haar_grassmann_sample(d: usize, k: usize, seed: Substream) -> Result<GrassmannPoint> {
    check_shape(d, k)?;
    let mut rng = seed.with_purpose(Purpose::Haar).rng();
    loop {
        let g = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
        // Dependent Gaussian columns have probability zero; redraw if seen.
        if let Some(frame) = orthonormalize(g) {
            return Ok(GrassmannPoint { frame });
        }
    }
}
