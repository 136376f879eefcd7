use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Substream;
use crate::spectral::{
    sha256_hex, total_variation, tv_decay_towards, point_mass, SpectralData,
    SubstochasticMatrix, TvDecay,
};
use crate::{Error, Result};

/// Cells with `η̂ < ETA_FLOOR · max η̂` are excluded from Q̂.
pub const ETA_FLOOR: f64 = 1e-12;

/// Row sums beyond `1 + KERNEL_SLACK` mean the eigen-data do not belong
/// to the matrix.
const KERNEL_SLACK: f64 = 1e-3;

/// What to do with cells below the η floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaFloorPolicy {
    /// Exclude them and list them in [`QKernel::dropped`].
    #[default]
    Drop,
    /// Fail with [`Error::EtaFloor`].
    Reject,
}

/// The discrete Q-process: `Q̂(c,c') = η̂_{c'} P̂(c,c') / (ρ η̂_c)` on the
/// cells above the η floor. Rows of dropped cells are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct QKernel {
    matrix: SubstochasticMatrix,
    retained: Vec<bool>,
    dropped: Vec<usize>,
    rho: f64,
    max_row_deviation: f64,
    source: String,
}

/// h-transform of `p` by `eta` with eigenvalue `rho`.
pub fn h_transform(
    p: &SubstochasticMatrix,
    eta: &[f64],
    rho: f64,
    policy: EtaFloorPolicy,
) -> Result<QKernel> {
    let n = p.size();
    if eta.len() != n {
        return Err(Error::GridMismatch(format!("{} eta values for a {n}-state matrix", eta.len())));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::NoSurvival { rho });
    }
    let max = eta.iter().fold(0.0f64, |a, &b| a.max(b));
    if !(max > 0.0) {
        return Err(Error::EtaFloor { cells: (0..n).collect() });
    }
    let floor = ETA_FLOOR * max;
    let retained: Vec<bool> = eta.iter().map(|&e| e >= floor).collect();
    let dropped: Vec<usize> = (0..n).filter(|&c| !retained[c]).collect();
    if policy == EtaFloorPolicy::Reject && !dropped.is_empty() {
        return Err(Error::EtaFloor { cells: dropped });
    }
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|c| {
            if !retained[c] {
                return Vec::new();
            }
            let scale = 1.0 / (rho * eta[c]);
            p.row(c)
                .filter(|&(j, _)| retained[j])
                .map(|(j, v)| (j, eta[j] * v * scale))
                .collect()
        })
        .collect();
    let matrix = SubstochasticMatrix::from_rows_with_slack(rows, p.horizon(), KERNEL_SLACK)?;
    let max_row_deviation = matrix
        .row_sums()
        .iter()
        .zip(&retained)
        .filter(|(_, &r)| r)
        .map(|(s, _)| (s - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(QKernel {
        matrix,
        retained,
        dropped,
        rho,
        max_row_deviation,
        source: String::new(),
    })
}

/// Q̂ built from the dominant eigen-data of `sd`, dropping floor cells.
pub fn build_q_kernel(sd: &SpectralData) -> Result<QKernel> {
    build_q_kernel_with(sd, EtaFloorPolicy::Drop)
}

pub fn build_q_kernel_with(sd: &SpectralData, policy: EtaFloorPolicy) -> Result<QKernel> {
    let mut qk = h_transform(&sd.matrix, &sd.eta, sd.rho, policy)?;
    qk.source = sha256_hex(sd.to_json(None)?.as_bytes());
    Ok(qk)
}

impl QKernel {
    pub fn matrix(&self) -> &SubstochasticMatrix {
        &self.matrix
    }

    pub fn size(&self) -> usize {
        self.matrix.size()
    }

    pub fn horizon(&self) -> f64 {
        self.matrix.horizon()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn is_retained(&self, c: usize) -> bool {
        self.retained.get(c).copied().unwrap_or(false)
    }

    /// Cells excluded by the η floor.
    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    /// `max_c |Σ_{c'} Q̂(c,c') − 1|` over retained cells.
    pub fn max_row_deviation(&self) -> f64 {
        self.max_row_deviation
    }

    /// SHA-256 of the spectral document this kernel was built from; empty
    /// for kernels built directly by [`h_transform`].
    pub fn source_digest(&self) -> &str {
        &self.source
    }

    /// `Q̂ · Q̂`, without renormalisation.
    pub fn squared(&self) -> Result<SubstochasticMatrix> {
        SubstochasticMatrix::from_rows_with_slack(
            self.matrix.product_rows(&self.matrix)?,
            2.0 * self.horizon(),
            KERNEL_SLACK,
        )
    }

    /// `‖ν Q̂ − ν‖₁`.
    pub fn stationarity_residual(&self, nu: &[f64]) -> Result<f64> {
        self.check_len(nu.len())?;
        let mut out = vec![0.0; self.size()];
        self.matrix.apply_left(nu, &mut out);
        Ok(out.iter().zip(nu).map(|(a, b)| (a - b).abs()).sum())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.size() {
            return Err(Error::GridMismatch(format!(
                "vector of length {len} for a kernel on {} cells",
                self.size()
            )));
        }
        Ok(())
    }
}

/// A Markov chain path of Q̂ of `n` steps (so `n + 1` cells).
pub fn sample_q_chain(qk: &QKernel, start: usize, n: usize, seed: Substream) -> Result<Vec<usize>> {
    if start >= qk.size() {
        return Err(Error::IndexOutOfRange {
            index: start,
            size: qk.size(),
        });
    }
    if !qk.is_retained(start) {
        return Err(Error::EtaFloor { cells: vec![start] });
    }
    let mut rng = seed.rng();
    let mut path = Vec::with_capacity(n + 1);
    let mut c = start;
    path.push(c);
    for _ in 0..n {
        let row: Vec<(usize, f64)> = qk.matrix.row(c).collect();
        let total: f64 = row.iter().map(|e| e.1).sum();
        let mut u = rng.random::<f64>() * total;
        // Falls back to the last entry when rounding leaves u ≥ 0.
        let mut next = row.last().map_or(c, |e| e.0);
        for &(j, v) in &row {
            if u < v {
                next = j;
                break;
            }
            u -= v;
        }
        c = next;
        path.push(c);
    }
    Ok(path)
}

/// Fraction of time a cell path spends in each cell.
pub fn occupation(path: &[usize], cells: usize) -> Vec<f64> {
    let mut occ = vec![0.0; cells];
    for &c in path {
        occ[c] += 1.0;
    }
    let n = path.len().max(1) as f64;
    occ.iter_mut().for_each(|v| *v /= n);
    occ
}

/// Stationarity and mixing of Q̂ against a candidate invariant law.
#[derive(Debug, Clone, Serialize)]
pub struct StationarityReport {
    /// `‖ν Q̂ − ν‖₁`.
    pub residual: f64,
    /// `TV(Q̂ⁿ(start,·), ν)` on the requested step grid.
    pub decay: TvDecay,
    /// Largest increase of the TV sequence between consecutive grid points.
    pub max_increase: f64,
    /// The last TV value exceeds the mixing threshold.
    pub non_mixing: bool,
}

/// Mixing threshold on the final TV distance.
pub const MIXING_TV: f64 = 0.01;

pub const DEFAULT_TV_STEPS: [usize; 9] = [1, 2, 5, 10, 20, 50, 100, 150, 200];

pub fn check_q_stationarity(
    qk: &QKernel,
    nu: &[f64],
    start: usize,
    steps: &[usize],
) -> Result<StationarityReport> {
    qk.check_len(nu.len())?;
    if start >= qk.size() {
        return Err(Error::IndexOutOfRange {
            index: start,
            size: qk.size(),
        });
    }
    let residual = qk.stationarity_residual(nu)?;
    let decay = tv_decay_towards(&qk.matrix, &point_mass(qk.size(), start), nu, steps)?;
    let max_increase = decay
        .tv
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max);
    let non_mixing = decay.tv.last().is_none_or(|&t| !(t <= MIXING_TV));
    Ok(StationarityReport {
        residual,
        decay,
        max_increase,
        non_mixing,
    })
}

/// TV distance between the occupation of a Q̂ chain path and `nu`.
pub fn occupation_distance(path: &[usize], nu: &[f64]) -> f64 {
    total_variation(&occupation(path, nu.len()), nu)
}

#[derive(Debug, Serialize, Deserialize)]
struct Document {
    checksum: String,
    body: Body,
}

#[derive(Debug, Serialize, Deserialize)]
struct Body {
    version: u32,
    config_hash: Option<String>,
    source: String,
    size: usize,
    horizon: f64,
    rho: f64,
    max_row_deviation: f64,
    dropped: Vec<usize>,
    triplets: Vec<(usize, usize, f64)>,
}

impl QKernel {
    pub fn to_json(&self, config_hash: Option<&str>) -> Result<String> {
        let body = Body {
            version: crate::spectral::SPECTRAL_FORMAT_VERSION,
            config_hash: config_hash.map(str::to_owned),
            source: self.source.clone(),
            size: self.size(),
            horizon: self.horizon(),
            rho: self.rho,
            max_row_deviation: self.max_row_deviation,
            dropped: self.dropped.clone(),
            triplets: self.matrix.triplets(),
        };
        let checksum = sha256_hex(&serde_json::to_vec(&body)?);
        Ok(serde_json::to_string_pretty(&Document { checksum, body })?)
    }

    pub fn from_json(text: &str) -> Result<(Self, Option<String>)> {
        let doc: Document = serde_json::from_str(text)
            .map_err(|e| Error::Integrity(format!("unreadable kernel document: {e}")))?;
        if sha256_hex(&serde_json::to_vec(&doc.body)?) != doc.checksum {
            return Err(Error::Integrity("kernel checksum mismatch".into()));
        }
        let b = doc.body;
        if b.version != crate::spectral::SPECTRAL_FORMAT_VERSION {
            return Err(Error::Integrity(format!("unsupported kernel format version {}", b.version)));
        }
        let mut rows = vec![Vec::new(); b.size];
        for &(i, j, v) in &b.triplets {
            if i >= b.size || j >= b.size {
                return Err(Error::Integrity(format!("entry ({i},{j}) outside a {}-cell kernel", b.size)));
            }
            rows[i].push((j, v));
        }
        let matrix = SubstochasticMatrix::from_rows_with_slack(rows, b.horizon, KERNEL_SLACK)
            .map_err(|e| Error::Integrity(format!("stored kernel is invalid: {e}")))?;
        let mut retained = vec![true; b.size];
        for &c in &b.dropped {
            if c >= b.size {
                return Err(Error::Integrity(format!("dropped cell {c} out of range")));
            }
            retained[c] = false;
        }
        Ok((
            QKernel {
                matrix,
                retained,
                dropped: b.dropped,
                rho: b.rho,
                max_row_deviation: b.max_row_deviation,
                source: b.source,
            },
            b.config_hash,
        ))
    }
}
