use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grid::{GridSpec, UlamGrid};
use super::matrix::SubstochasticMatrix;
use super::solve::SpectralData;
use crate::{Error, Result};

pub const SPECTRAL_FORMAT_VERSION: u32 = 1;

/// On-disk form of [`SpectralData`]. The checksum covers the serialised
/// body and is verified on load.
#[derive(Debug, Serialize, Deserialize)]
struct Document {
    checksum: String,
    body: Body,
}

#[derive(Debug, Serialize, Deserialize)]
struct Body {
    version: u32,
    config_hash: Option<String>,
    grid: Option<GridSpec>,
    size: usize,
    horizon: f64,
    samples_per_row: Option<usize>,
    /// `(row, col, value)`.
    triplets: Vec<(usize, usize, f64)>,
    rho: f64,
    beta: f64,
    second_modulus: f64,
    left_residual: f64,
    right_residual: f64,
    mu: Vec<f64>,
    eta: Vec<f64>,
    nu: Vec<f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl SpectralData {
    /// JSON document embedding `config_hash`.
    pub fn to_json(&self, config_hash: Option<&str>) -> Result<String> {
        let body = Body {
            version: SPECTRAL_FORMAT_VERSION,
            config_hash: config_hash.map(str::to_owned),
            grid: self.grid.as_ref().map(UlamGrid::spec),
            size: self.len(),
            horizon: self.horizon(),
            samples_per_row: self.matrix.samples_per_row(),
            triplets: self.matrix.triplets(),
            rho: self.rho,
            beta: self.beta,
            second_modulus: self.second_modulus,
            left_residual: self.left_residual,
            right_residual: self.right_residual,
            mu: self.mu.clone(),
            eta: self.eta.clone(),
            nu: self.nu.clone(),
        };
        let checksum = sha256_hex(&serde_json::to_vec(&body)?);
        Ok(serde_json::to_string_pretty(&Document { checksum, body })?)
    }

    /// Parses and verifies a document; returns the data and its config hash.
    /// Grids come back as plain boxes (membership predicates are not stored).
    pub fn from_json(text: &str) -> Result<(Self, Option<String>)> {
        let doc: Document = serde_json::from_str(text)
            .map_err(|e| Error::Integrity(format!("unreadable spectral document: {e}")))?;
        let actual = sha256_hex(&serde_json::to_vec(&doc.body)?);
        if actual != doc.checksum {
            return Err(Error::Integrity(format!(
                "spectral checksum mismatch (stored {}, computed {actual})",
                doc.checksum
            )));
        }
        let b = doc.body;
        if b.version != SPECTRAL_FORMAT_VERSION {
            return Err(Error::Integrity(format!("unsupported spectral format version {}", b.version)));
        }
        let n = b.size;
        if b.mu.len() != n || b.eta.len() != n || b.nu.len() != n {
            return Err(Error::Integrity("vector lengths disagree with matrix size".into()));
        }
        let matrix = SubstochasticMatrix::from_triplets(n, &b.triplets, b.horizon)
            .map_err(|e| Error::Integrity(format!("stored matrix is invalid: {e}")))?
            .with_samples_per_row(b.samples_per_row);
        let grid = b.grid.as_ref().map(UlamGrid::from_spec).transpose()?;
        if grid.as_ref().is_some_and(|g| g.len() != n) {
            return Err(Error::Integrity("grid cell count disagrees with matrix size".into()));
        }
        Ok((
            SpectralData {
                grid,
                matrix,
                rho: b.rho,
                beta: b.beta,
                mu: b.mu,
                eta: b.eta,
                nu: b.nu,
                second_modulus: b.second_modulus,
                left_residual: b.left_residual,
                right_residual: b.right_residual,
            },
            b.config_hash,
        ))
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_json(config_hash)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;

    use super::*;
    use crate::dynamics::Domain;
    use crate::spectral::solve_qsd;

    fn sample() -> SpectralData {
        let p = SubstochasticMatrix::from_dense(
            &DMatrix::from_row_slice(3, 3, &[0.5, 0.2, 0.1, 0.2, 0.5, 0.2, 0.0, 0.3, 0.6]),
            0.1,
        )
        .unwrap();
        let grid = UlamGrid::uniform(Domain::cube(1, 1.5).unwrap(), 3).unwrap();
        solve_qsd(&p, 1e-12).unwrap().with_grid(grid).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let sd = sample();
        let text = sd.to_json(Some("abc")).unwrap();
        let (back, hash) = SpectralData::from_json(&text).unwrap();
        assert_eq!(hash.as_deref(), Some("abc"));
        assert_eq!(back.matrix, sd.matrix);
        assert_eq!(back.mu, sd.mu);
        assert_eq!(back.eta, sd.eta);
        assert_eq!(back.rho.to_bits(), sd.rho.to_bits());
        assert_eq!(back.grid().unwrap().spec(), sd.grid().unwrap().spec());
        assert_eq!(back.to_json(Some("abc")).unwrap(), text);
    }

    #[test]
    fn tampering_is_detected() {
        let text = sample().to_json(None).unwrap();
        let tampered = text.replacen("\"rho\": 0.", "\"rho\": 1.", 1);
        assert_ne!(tampered, text);
        assert!(matches!(SpectralData::from_json(&tampered), Err(Error::Integrity(_))));
        assert!(matches!(SpectralData::from_json("{ not json"), Err(Error::Integrity(_))));
    }
}
