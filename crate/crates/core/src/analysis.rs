//! Graph-signal diagnostics of task encodings: a k-NN graph over encodings,
//! its Laplacian eigenbasis, and how much of the per-task accuracy signal
//! sits in the low frequencies.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::episodes::{Split, TaskDistribution};
use crate::error::{Error, Result};
use crate::eval::{adapt_and_score, ordered_map};
use crate::meta::{LearnerState, TrainConfig};
use crate::rng::{streams, RngStream};

pub const DEFAULT_K: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Laplacian {
    /// `L = D − A`.
    #[default]
    Combinatorial,
    /// `L = I − D^{-1/2} A D^{-1/2}`; isolated nodes keep a unit diagonal.
    Normalized,
}

/// Symmetric 0/1 adjacency: `i ~ j` when either is among the other's `k`
/// nearest neighbours. Equal distances go to the lower index.
pub fn knn_graph(encodings: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let n = encodings.nrows();
    if k < 1 || n <= k {
        return Err(Error::Graph {
            nodes: n,
            reason: "k-NN graph needs n > k >= 1",
        });
    }
    let mut adj = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((encodings.row(i) - encodings.row(j)).norm_squared(), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &d[..k] {
            adj[(i, j)] = 1.0;
            adj[(j, i)] = 1.0;
        }
    }
    Ok(adj)
}

pub fn laplacian(adj: &DMatrix<f64>, kind: Laplacian) -> DMatrix<f64> {
    let n = adj.nrows();
    let deg: Vec<f64> = (0..n).map(|i| adj.row(i).sum()).collect();
    match kind {
        Laplacian::Combinatorial => DMatrix::from_diagonal(&DVector::from_vec(deg)) - adj,
        Laplacian::Normalized => DMatrix::from_fn(n, n, |i, j| {
            let off = if deg[i] > 0.0 && deg[j] > 0.0 {
                adj[(i, j)] / (deg[i] * deg[j]).sqrt()
            } else {
                0.0
            };
            if i == j {
                1.0 - off
            } else {
                -off
            }
        }),
    }
}

/// Laplacian eigenpairs, eigenvalues ascending, eigenvectors as orthonormal
/// columns.
#[derive(Clone, Debug)]
pub struct FourierBasis {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
}

pub fn graph_fourier_basis(adj: &DMatrix<f64>, kind: Laplacian) -> Result<FourierBasis> {
    if adj.nrows() != adj.ncols() {
        return Err(Error::shape("adjacency", "square", format!("{:?}", adj.shape())));
    }
    let n = adj.nrows();
    let eig = SymmetricEigen::new(laplacian(adj, kind));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(FourierBasis {
        eigenvalues,
        eigenvectors,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub eigenvalues: Vec<f64>,
    /// Graph Fourier coefficients, lowest frequency first.
    pub coefficients: Vec<f64>,
    /// `concentration[m-1]`: energy fraction in the lowest `m` frequencies.
    pub concentration: Vec<f64>,
    pub signal_energy: f64,
}

impl SpectralReport {
    /// `c(q)`: energy fraction in the lowest `⌈q·n⌉` frequencies.
    pub fn concentration_at(&self, q: f64) -> f64 {
        let n = self.concentration.len();
        let m = ((q * n as f64).ceil() as usize).clamp(1, n);
        self.concentration[m - 1]
    }

    pub fn coefficient_energy(&self) -> f64 {
        self.coefficients.iter().map(|c| c * c).sum()
    }

    /// `frequency,eigenvalue,energy` rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frequency,eigenvalue,energy\n");
        for (i, (l, c)) in self.eigenvalues.iter().zip(&self.coefficients).enumerate() {
            let _ = writeln!(s, "{i},{l},{}", c * c);
        }
        s
    }
}

/// Projects `signal` on the basis. A zero signal counts as fully
/// concentrated.
pub fn gft_and_concentration(signal: &[f64], basis: &FourierBasis) -> Result<SpectralReport> {
    let n = basis.eigenvalues.len();
    if signal.len() != n {
        return Err(Error::shape("graph signal", n, signal.len()));
    }
    let s = DVector::from_column_slice(signal);
    let coeffs = basis.eigenvectors.transpose() * &s;
    let energies: Vec<f64> = coeffs.iter().map(|c| c * c).collect();
    let total: f64 = energies.iter().sum();
    let mut running = 0.0;
    let mut concentration: Vec<f64> = energies
        .iter()
        .map(|e| {
            running += e;
            if total > 0.0 {
                (running / total).min(1.0)
            } else {
                1.0
            }
        })
        .collect();
    // Running sums can land a rounding step short of the total.
    if let Some(last) = concentration.last_mut() {
        *last = 1.0;
    }
    Ok(SpectralReport {
        eigenvalues: basis.eigenvalues.clone(),
        coefficients: coeffs.iter().copied().collect(),
        concentration,
        signal_energy: s.norm_squared(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub n_tasks: usize,
    pub k: usize,
    pub laplacian: Laplacian,
    pub seed: u64,
    pub query_per_class: usize,
    pub kg_at_test: bool,
    pub workers: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            n_tasks: 500,
            k: DEFAULT_K,
            laplacian: Laplacian::Combinatorial,
            seed: 777,
            query_per_class: 15,
            kg_at_test: false,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingRecord {
    pub episode_id: usize,
    pub z: Vec<f64>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodingStudy {
    pub records: Vec<EncodingRecord>,
    pub report: SpectralReport,
}

impl EncodingStudy {
    pub fn encodings_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn write_encodings(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.encodings_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Encodes and adapts to `n_tasks` test episodes, then measures how smooth
/// the accuracy signal is over the k-NN graph of encodings.
pub fn encoding_quality_study(
    state: &LearnerState,
    cfg: &TrainConfig,
    dist: &TaskDistribution,
    acfg: &AnalysisConfig,
) -> Result<EncodingStudy> {
    if acfg.n_tasks <= acfg.k || acfg.k < 1 {
        return Err(Error::config("analysis.n_tasks", format!("must exceed k = {}", acfg.k)));
    }
    let records = ordered_map(acfg.n_tasks, acfg.workers.max(1), |i| {
        let ep = dist.sample_episode(
            Split::Test,
            cfg.n_way,
            cfg.k_shot,
            acfg.query_per_class,
            RngStream::new(acfg.seed, streams::ANALYSIS_EPISODES + i as u64),
        )?;
        let s = adapt_and_score(state, cfg, &ep, acfg.kg_at_test)?;
        Ok(EncodingRecord {
            episode_id: i,
            z: s.z,
            accuracy: s.accuracy,
        })
    })?;
    let d = records[0].z.len();
    let enc = DMatrix::from_fn(records.len(), d, |r, c| records[r].z[c]);
    let basis = graph_fourier_basis(&knn_graph(&enc, acfg.k)?, acfg.laplacian)?;
    let signal: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let report = gft_and_concentration(&signal, &basis)?;
    Ok(EncodingStudy { records, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn path3() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[0., 1., 0., 1., 0., 1., 0., 1., 0.])
    }

    #[test]
    fn collinear_knn_uses_union() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 3.0]);
        assert_eq!(knn_graph(&x, 1).unwrap(), path3());
        assert!(knn_graph(&x, 3).is_err());
        assert!(knn_graph(&x, 0).is_err());
    }

    #[test]
    fn duplicate_points_tie_to_lower_index() {
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 5.0, 5.0, 5.0]);
        let a = knn_graph(&x, 1).unwrap();
        // Node 3 sees 1 and 2 at distance 0 and picks 1.
        assert_eq!(a[(3, 1)], 1.0);
        assert_eq!(a[(3, 2)], 0.0);
        assert_eq!(a[(0, 1)], 1.0);
    }

    #[test]
    fn path_graph_spectrum() {
        let b = graph_fourier_basis(&path3(), Laplacian::Combinatorial).unwrap();
        for (got, want) in b.eigenvalues.iter().zip([0.0, 1.0, 3.0]) {
            assert!((got - want).abs() < 1e-10);
        }
        let v0 = b.eigenvectors.column(0);
        assert!(v0.iter().all(|v| (v.abs() - 3f64.sqrt().recip()).abs() < 1e-12));
        let g = b.eigenvectors.transpose() * &b.eigenvectors;
        assert!((g - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn two_components_have_double_zero() {
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 1)] = 1.0;
        a[(1, 0)] = 1.0;
        a[(2, 3)] = 1.0;
        a[(3, 2)] = 1.0;
        let b = graph_fourier_basis(&a, Laplacian::Combinatorial).unwrap();
        assert!(b.eigenvalues[0].abs() < 1e-12 && b.eigenvalues[1].abs() < 1e-12);
        assert!(b.eigenvalues[2] > 1.0);
    }

    #[test]
    fn normalized_laplacian_spectrum_in_zero_two() {
        let b = graph_fourier_basis(&path3(), Laplacian::Normalized).unwrap();
        assert!(b.eigenvalues[0].abs() < 1e-12);
        assert!((b.eigenvalues[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_and_highest_frequency_signals() {
        let b = graph_fourier_basis(&path3(), Laplacian::Combinatorial).unwrap();
        let r = gft_and_concentration(&[0.7; 3], &b).unwrap();
        assert!(r.concentration.iter().all(|c| (c - 1.0).abs() < 1e-12));
        let top: Vec<f64> = b.eigenvectors.column(2).iter().copied().collect();
        let r = gft_and_concentration(&top, &b).unwrap();
        assert!(r.concentration[0] < 1e-20 && r.concentration[1] < 1e-20);
        assert_eq!(r.concentration[2], 1.0);
        let zero = gft_and_concentration(&[0.0; 3], &b).unwrap();
        assert_eq!(zero.concentration_at(0.1), 1.0);
        assert!(gft_and_concentration(&[1.0; 2], &b).is_err());
    }

    #[test]
    fn parseval_and_monotone_on_random_graph() {
        let mut rng = RngStream::new(3, 0).rng();
        let x = DMatrix::from_fn(40, 3, |_, _| rng.random::<f64>());
        let b = graph_fourier_basis(&knn_graph(&x, 5).unwrap(), Laplacian::Combinatorial).unwrap();
        let s: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
        let r = gft_and_concentration(&s, &b).unwrap();
        assert!((r.coefficient_energy() - r.signal_energy).abs() < 1e-8);
        assert!(r.concentration.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(r.concentration_at(1.0), 1.0);
        assert_eq!(r.to_csv().lines().count(), 41);
    }
}
