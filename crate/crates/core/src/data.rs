//! Clustered response data and column subsets.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A sorted, duplicate-free set of fixed-effect column indices (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Subset(Vec<usize>);

impl Subset {
    pub fn new(mut columns: Vec<usize>) -> Self {
        columns.sort_unstable();
        columns.dedup();
        Subset(columns)
    }

    pub fn empty() -> Self {
        Subset(Vec::new())
    }

    pub fn full(p: usize) -> Self {
        Subset((0..p).collect())
    }

    /// Subset whose members are the set bits of `mask`.
    pub fn from_mask(mask: u64, p: usize) -> Self {
        Subset((0..p).filter(|&j| mask >> j & 1 == 1).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, column: usize) -> bool {
        self.0.binary_search(&column).is_ok()
    }

    /// Position of `column` within the subset.
    pub fn position(&self, column: usize) -> Option<usize> {
        self.0.binary_search(&column).ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn without(&self, column: usize) -> Self {
        Subset(self.0.iter().copied().filter(|&c| c != column).collect())
    }

    pub fn max_column(&self) -> Option<usize> {
        self.0.last().copied()
    }
}

impl FromIterator<usize> for Subset {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Subset::new(iter.into_iter().collect())
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "}}")
    }
}

/// Response, fixed design and per-cluster random design of a linear mixed model.
///
/// Rows are stored cluster by cluster; `cluster_sizes[i]` consecutive rows belong
/// to cluster `i`, and `z_blocks[i]` is that cluster's `n_i x q` random design.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    cluster_sizes: Vec<usize>,
    offsets: Vec<usize>,
    y: DVector<f64>,
    x: DMatrix<f64>,
    z_blocks: Vec<DMatrix<f64>>,
    column_names: Vec<String>,
    cluster_labels: Vec<String>,
}

impl ClusteredDataset {
    pub fn new(
        cluster_sizes: Vec<usize>,
        y: DVector<f64>,
        x: DMatrix<f64>,
        z_blocks: Vec<DMatrix<f64>>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        if cluster_sizes.is_empty() {
            return Err(Error::Validation("dataset has no clusters".into()));
        }
        if let Some(i) = cluster_sizes.iter().position(|&s| s == 0) {
            return Err(Error::Validation(format!("cluster {i} is empty")));
        }
        let n: usize = cluster_sizes.iter().sum();
        if y.len() != n {
            return Err(Error::Validation(format!(
                "response has length {} but cluster sizes sum to {n}",
                y.len()
            )));
        }
        if x.nrows() != n {
            return Err(Error::Validation(format!(
                "fixed design has {} rows, expected {n}",
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::Validation("fixed design has no columns".into()));
        }
        if column_names.len() != x.ncols() {
            return Err(Error::Validation(format!(
                "{} column names for {} columns",
                column_names.len(),
                x.ncols()
            )));
        }
        if z_blocks.len() != cluster_sizes.len() {
            return Err(Error::Validation(format!(
                "{} random-design blocks for {} clusters",
                z_blocks.len(),
                cluster_sizes.len()
            )));
        }
        let q = z_blocks[0].ncols();
        if q == 0 {
            return Err(Error::Validation("random design has no columns".into()));
        }
        for (i, (z, &size)) in z_blocks.iter().zip(&cluster_sizes).enumerate() {
            if z.nrows() != size || z.ncols() != q {
                return Err(Error::Validation(format!(
                    "random-design block {i} is {}x{}, expected {size}x{q}",
                    z.nrows(),
                    z.ncols()
                )));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("random-design block {i} is not finite")));
            }
        }
        if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("response or design contains non-finite values".into()));
        }
        let offsets = offsets_of(&cluster_sizes);
        let cluster_labels = (0..cluster_sizes.len()).map(|i| i.to_string()).collect();
        Ok(ClusteredDataset {
            cluster_sizes,
            offsets,
            y,
            x,
            z_blocks,
            column_names,
            cluster_labels,
        })
    }

    /// Random-intercept dataset: each `Z_i` is a column of ones.
    pub fn random_intercept(
        cluster_sizes: Vec<usize>,
        y: DVector<f64>,
        x: DMatrix<f64>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let z_blocks = cluster_sizes
            .iter()
            .map(|&s| DMatrix::from_element(s, 1, 1.0))
            .collect();
        Self::new(cluster_sizes, y, x, z_blocks, column_names)
    }

    pub fn with_cluster_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.cluster_sizes.len() {
            return Err(Error::Validation(format!(
                "{} labels for {} clusters",
                labels.len(),
                self.cluster_sizes.len()
            )));
        }
        self.cluster_labels = labels;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.z_blocks[0].ncols()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn cluster_sizes(&self) -> &[usize] {
        &self.cluster_sizes
    }

    /// Row offset of each cluster.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z_block(&self, cluster: usize) -> &DMatrix<f64> {
        &self.z_blocks[cluster]
    }

    pub fn z_blocks(&self) -> &[DMatrix<f64>] {
        &self.z_blocks
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn cluster_labels(&self) -> &[String] {
        &self.cluster_labels
    }

    /// Copy of the dataset with a different response vector.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::Validation(format!(
                "replacement response has length {}, expected {}",
                y.len(),
                self.n()
            )));
        }
        let mut out = self.clone();
        out.y = y;
        Ok(out)
    }

    /// Fixed design restricted to `columns`.
    pub fn x_columns(&self, columns: &Subset) -> DMatrix<f64> {
        self.x.select_columns(columns.as_slice())
    }

    /// Dense block-diagonal random design (n x Nq).
    pub fn z_dense(&self) -> DMatrix<f64> {
        let q = self.q();
        let mut z = DMatrix::zeros(self.n(), self.n_clusters() * q);
        for (i, block) in self.z_blocks.iter().enumerate() {
            z.view_mut((self.offsets[i], i * q), (block.nrows(), q))
                .copy_from(block);
        }
        z
    }

    /// New dataset made of the given clusters, in the given order.
    pub fn subset_clusters(&self, clusters: &[usize]) -> Result<Self> {
        let sizes: Vec<usize> = clusters.iter().map(|&c| self.cluster_sizes[c]).collect();
        let n: usize = sizes.iter().sum();
        let p = self.p();
        let mut y = DVector::zeros(n);
        let mut x = DMatrix::zeros(n, p);
        let mut row = 0;
        for &c in clusters {
            let (off, size) = (self.offsets[c], self.cluster_sizes[c]);
            y.rows_mut(row, size).copy_from(&self.y.rows(off, size));
            x.rows_mut(row, size).copy_from(&self.x.rows(off, size));
            row += size;
        }
        let z = clusters.iter().map(|&c| self.z_blocks[c].clone()).collect();
        let labels = clusters.iter().map(|&c| self.cluster_labels[c].clone()).collect();
        ClusteredDataset::new(sizes, y, x, z, self.column_names.clone())?.with_cluster_labels(labels)
    }

    /// Dataset with extra fixed-effect columns appended on the right.
    pub fn append_columns(&self, extra: &DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if extra.nrows() != self.n() {
            return Err(Error::Validation("appended columns have wrong row count".into()));
        }
        let p = self.p();
        let mut x = DMatrix::zeros(self.n(), p + extra.ncols());
        x.columns_mut(0, p).copy_from(&self.x);
        x.columns_mut(p, extra.ncols()).copy_from(extra);
        let mut column_names = self.column_names.clone();
        column_names.extend(names);
        ClusteredDataset::new(
            self.cluster_sizes.clone(),
            self.y.clone(),
            x,
            self.z_blocks.clone(),
            column_names,
        )?
        .with_cluster_labels(self.cluster_labels.clone())
    }
}

fn offsets_of(sizes: &[usize]) -> Vec<usize> {
    sizes
        .iter()
        .scan(0, |acc, &s| {
            let off = *acc;
            *acc += s;
            Some(off)
        })
        .collect()
}
