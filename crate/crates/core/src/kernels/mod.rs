//! User-similarity Gram matrices, one per social theory, plus the all-ones
//! kernel used to carry lower-order terms through the degree-2 combination.

mod bank;
mod builders;
mod cache;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub(crate) use bank::build_graph_kernel;
pub use bank::{default_sigma, KernelBank, KernelConfig};
pub use builders::{
    action_overlap_kernel, all_ones_kernel, claim_kernel, community_kernel, commute_time_kernel,
    demographic_kernel, impact_distribution_kernel, rating_bias_kernel, token_overlap,
};
pub use cache::{read_kernel, write_kernel, KERNEL_MAGIC};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KernelLabel {
    #[serde(rename = "ONES")]
    Ones,
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "COM")]
    Com,
    #[serde(rename = "DEM")]
    Dem,
    #[serde(rename = "CLA")]
    Cla,
    #[serde(rename = "ACT1")]
    Act1,
    #[serde(rename = "ACT2")]
    Act2,
    /// Output of a kernel combination.
    #[serde(rename = "COMBINED")]
    Combined,
}

impl KernelLabel {
    /// The seven theory kernels in reporting order.
    pub const THEORY: [KernelLabel; 7] = [
        KernelLabel::Id,
        KernelLabel::Ct,
        KernelLabel::Com,
        KernelLabel::Dem,
        KernelLabel::Cla,
        KernelLabel::Act1,
        KernelLabel::Act2,
    ];

    /// All-ones first, then the seven theory kernels: the layout of the
    /// combination weight vector.
    pub const BANK: [KernelLabel; 8] = [
        KernelLabel::Ones,
        KernelLabel::Id,
        KernelLabel::Ct,
        KernelLabel::Com,
        KernelLabel::Dem,
        KernelLabel::Cla,
        KernelLabel::Act1,
        KernelLabel::Act2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KernelLabel::Ones => "ONES",
            KernelLabel::Id => "ID",
            KernelLabel::Ct => "CT",
            KernelLabel::Com => "COM",
            KernelLabel::Dem => "DEM",
            KernelLabel::Cla => "CLA",
            KernelLabel::Act1 => "ACT1",
            KernelLabel::Act2 => "ACT2",
            KernelLabel::Combined => "COMBINED",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            KernelLabel::Ones => 0,
            KernelLabel::Id => 1,
            KernelLabel::Ct => 2,
            KernelLabel::Com => 3,
            KernelLabel::Dem => 4,
            KernelLabel::Cla => 5,
            KernelLabel::Act1 => 6,
            KernelLabel::Act2 => 7,
            KernelLabel::Combined => 8,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        KernelLabel::BANK
            .into_iter()
            .chain([KernelLabel::Combined])
            .find(|l| l.code() == code)
    }

    /// Position in [`KernelLabel::BANK`].
    pub fn bank_index(self) -> Option<usize> {
        KernelLabel::BANK.iter().position(|&l| l == self)
    }
}

impl fmt::Display for KernelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelLabel::BANK
            .into_iter()
            .chain([KernelLabel::Combined])
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown kernel label {s}")))
    }
}

/// Dense symmetric Gram matrix indexed by dataset user index.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub label: KernelLabel,
    pub normalized: bool,
    pub matrix: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn new(label: KernelLabel, matrix: DMatrix<f64>, normalized: bool) -> Self {
        KernelMatrix {
            label,
            normalized,
            matrix,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    /// Submatrix on `rows × cols`.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
            self.matrix[(rows[a], cols[b])]
        })
    }

    pub fn hadamard(&self, other: &KernelMatrix) -> Result<KernelMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(KernelMatrix::new(
            KernelLabel::Combined,
            self.matrix.component_mul(&other.matrix),
            false,
        ))
    }

    pub fn validate_psd(&self, tol: f64) -> Result<PsdReport> {
        validate_psd(&self.matrix, tol)
    }
}

impl AsRef<KernelMatrix> for KernelMatrix {
    fn as_ref(&self) -> &KernelMatrix {
        self
    }
}

/// `k'(i,j) = k(i,j) / √(k(i,i) k(j,j))`. Rows whose diagonal is not positive
/// are zeroed and their diagonal set to 1, so the output has unit diagonal.
pub fn cosine_normalize(k: &KernelMatrix) -> KernelMatrix {
    let n = k.dim();
    let scale: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let d = k.matrix[(i, i)];
            (d > 1e-12).then(|| 1.0 / d.sqrt())
        })
        .collect();
    let m = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return 1.0;
        }
        match (scale[i], scale[j]) {
            (Some(a), Some(b)) => k.matrix[(i, j)] * a * b,
            _ => 0.0,
        }
    });
    KernelMatrix::new(k.label, m, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdReport {
    pub min_eig: f64,
    pub max_eig: f64,
    pub pass: bool,
}

/// Largest `|a_ij − a_ji|` and where it occurs.
pub fn asymmetry(m: &DMatrix<f64>) -> (f64, usize, usize) {
    let mut worst = (0.0, 0, 0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let d = (m[(i, j)] - m[(j, i)]).abs();
            if d > worst.0 || d.is_nan() {
                worst = (d, i, j);
            }
        }
    }
    worst
}

/// Eigenvalue check: passes iff `min_eig ≥ −tol · max(|max_eig|, 1)`. A
/// matrix that is not symmetric within `tol` is rejected outright.
pub fn validate_psd(m: &DMatrix<f64>, tol: f64) -> Result<PsdReport> {
    if !m.is_square() {
        return Err(Error::Dimension {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    if m.nrows() == 0 {
        return Ok(PsdReport {
            min_eig: 0.0,
            max_eig: 0.0,
            pass: true,
        });
    }
    let (worst, i, j) = asymmetry(m);
    if !(worst <= tol) {
        return Err(Error::Validation(format!(
            "matrix not symmetric: |a[{i},{j}] - a[{j},{i}]| = {worst:e} exceeds {tol:e}"
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("matrix has non-finite entries".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let min_eig = eig.min();
    let max_eig = eig.max();
    Ok(PsdReport {
        min_eig,
        max_eig,
        pass: min_eig >= -tol * max_eig.abs().max(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_round_trip() {
        for l in KernelLabel::BANK.into_iter().chain([KernelLabel::Combined]) {
            assert_eq!(l.as_str().parse::<KernelLabel>().unwrap(), l);
            assert_eq!(KernelLabel::from_code(l.code()), Some(l));
        }
        assert!("XYZ".parse::<KernelLabel>().is_err());
        assert_eq!(KernelLabel::Act2.bank_index(), Some(7));
    }

    #[test]
    fn identity_passes_psd() {
        let r = validate_psd(&DMatrix::identity(4, 4), 1e-8).unwrap();
        assert!(r.pass);
        assert!((r.min_eig - 1.0).abs() < 1e-12);
    }

    #[test]
    fn indefinite_fails_psd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let r = validate_psd(&m, 1e-8).unwrap();
        assert!(!r.pass);
        assert!((r.min_eig + 1.0).abs() < 1e-12);
        assert!((r.max_eig - 3.0).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_matrix_names_worst_entry() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        match validate_psd(&m, 1e-8) {
            Err(Error::Validation(msg)) => assert!(msg.contains("a[0,2]"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn normalize_unit_diagonal_is_identity_map() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let k = KernelMatrix::new(KernelLabel::Dem, m.clone(), false);
        assert_eq!(cosine_normalize(&k).matrix, m);
    }

    #[test]
    fn normalize_scaled_identity() {
        let k = KernelMatrix::new(KernelLabel::Id, DMatrix::identity(3, 3) * 4.5, false);
        assert_eq!(cosine_normalize(&k).matrix, DMatrix::identity(3, 3));
    }

    #[test]
    fn normalize_degenerate_row() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]);
        let k = cosine_normalize(&KernelMatrix::new(KernelLabel::Ct, m, false));
        assert_eq!(k.matrix, DMatrix::identity(2, 2));
    }
}
