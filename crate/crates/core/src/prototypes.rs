//! Per-class memory bank of neural semantic prototypes.
//!
//! The bank is a gradient-isolated buffer: it only moves through
//! [`PrototypeBank::ema_update`]. [`intra_class_loss`] penalizes the spread of
//! visual-sample distances to their class prototype.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoders::l2_normalize;
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub centers: Array2<f64>,
    pub alpha: f64,
    pub seen: Vec<bool>,
}

impl PrototypeBank {
    /// Standard-normal rows, unit-normalized.
    pub fn init(num_classes: usize, dim: usize, alpha: f64, seed: u64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::config("prototype bank needs K >= 1 and dim >= 1"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("momentum alpha must be in [0, 1], got {alpha}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array2::from_shape_simple_fn((num_classes, dim), || StandardNormal.sample(&mut rng));
        Ok(PrototypeBank {
            centers: l2_normalize(raw.view()),
            alpha,
            seen: vec![false; num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn center(&self, class: usize) -> ArrayView1<'_, f64> {
        self.centers.row(class)
    }

    /// `c_k ← α·c_k + (1−α)·mean_k` for each class present in `means`.
    /// Prototypes are not re-normalized.
    pub fn ema_update(&mut self, means: &BTreeMap<usize, Array1<f64>>) -> Result<()> {
        let k = self.num_classes();
        if let Some(bad) = means.keys().find(|&&c| c >= k) {
            return Err(Error::Index(format!("class {bad} outside bank of {k} prototypes")));
        }
        for (&class, mean) in means {
            if mean.len() != self.dim() {
                return Err(Error::dim(format!(
                    "class mean has width {}, bank {}",
                    mean.len(),
                    self.dim()
                )));
            }
            let alpha = self.alpha;
            let mut row = self.centers.row_mut(class);
            row.zip_mut_with(mean, |c, &m| *c = alpha * *c + (1.0 - alpha) * m);
            self.seen[class] = true;
        }
        Ok(())
    }
}

/// Mean row per class present in `labels`, keyed by class id.
pub fn class_means(z: ArrayView2<f64>, labels: &[usize]) -> Result<BTreeMap<usize, Array1<f64>>> {
    if z.nrows() != labels.len() {
        return Err(Error::dim(format!("{} rows but {} labels", z.nrows(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::dim("class means of an empty batch"));
    }
    let mut sums: BTreeMap<usize, (Array1<f64>, usize)> = BTreeMap::new();
    for (row, &y) in z.rows().into_iter().zip(labels) {
        let entry = sums
            .entry(y)
            .or_insert_with(|| (Array1::zeros(z.ncols()), 0));
        entry.0 += &row;
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, c))| (k, s / c as f64))
        .collect())
}

/// Penalty on per-class distance deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Deviation {
    /// `|d_i − d̄|`
    #[default]
    Absolute,
    /// `(d_i − d̄)²`
    Squared,
}

/// Intra-class geometric-consistency loss and its gradient w.r.t. `z_v`.
///
/// For each class `j` present in the batch with members at distances `d_i`
/// from prototype `c_j`, the class term is the mean deviation of `d_i` from
/// their mean; the loss sums class terms over present classes.
pub fn intra_class_loss_with_grad(
    z_v: ArrayView2<f64>,
    labels: &[usize],
    bank: &PrototypeBank,
    deviation: Deviation,
) -> Result<(f64, Array2<f64>)> {
    if z_v.nrows() != labels.len() {
        return Err(Error::dim(format!("{} rows but {} labels", z_v.nrows(), labels.len())));
    }
    if z_v.ncols() != bank.dim() {
        return Err(Error::dim(format!(
            "features have width {}, bank {}",
            z_v.ncols(),
            bank.dim()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= bank.num_classes()) {
        return Err(Error::Index(format!("label {bad} outside bank")));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        members.entry(y).or_default().push(i);
    }

    let mut loss = 0.0;
    let mut grad = Array2::zeros(z_v.raw_dim());
    for (&class, rows) in &members {
        let c = bank.center(class);
        let diffs: Vec<Array1<f64>> = rows.iter().map(|&i| &z_v.row(i) - &c).collect();
        let dists: Vec<f64> = diffs.iter().map(|d| d.dot(d).sqrt()).collect();
        let m = rows.len() as f64;
        let mean = dists.iter().sum::<f64>() / m;
        let devs: Vec<f64> = dists.iter().map(|d| d - mean).collect();
        let (term, dterm_ddev): (f64, Vec<f64>) = match deviation {
            Deviation::Absolute => (
                devs.iter().map(|e| e.abs()).sum::<f64>() / m,
                devs.iter().map(|e| e.signum() / m).collect(),
            ),
            Deviation::Squared => (
                devs.iter().map(|e| e * e).sum::<f64>() / m,
                devs.iter().map(|e| 2.0 * e / m).collect(),
            ),
        };
        loss += term;
        // dev_i = d_i − mean(d): ∂/∂d_k = g_k − mean(g)
        let g_mean = dterm_ddev.iter().sum::<f64>() / m;
        for (idx, &i) in rows.iter().enumerate() {
            let g_d = dterm_ddev[idx] - g_mean;
            if dists[idx] > 0.0 {
                let mut row = grad.row_mut(i);
                row.scaled_add(g_d / dists[idx], &diffs[idx]);
            }
        }
    }
    Ok((loss, grad))
}

pub fn intra_class_loss(z_v: ArrayView2<f64>, labels: &[usize], bank: &PrototypeBank) -> Result<f64> {
    Ok(intra_class_loss_with_grad(z_v, labels, bank, Deviation::Absolute)?.0)
}
