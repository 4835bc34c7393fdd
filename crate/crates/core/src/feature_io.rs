//! Paired visual/neural feature packs.
//!
//! A pack directory holds `manifest.json` plus three raw little-endian blobs:
//! `visual.f32` and `neural.f32` (row-major `[N × D]` float32 matrices) and
//! `labels.i32` (`N` int32 class ids in `[0, K)`). Packs also carry the set of
//! unseen class ids that are held out for zero-shot evaluation.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};

pub const PACK_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Paired modality embeddings with dense labels and a seen/unseen split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub visual: Array2<f32>,
    pub neural: Array2<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub unseen_classes: BTreeSet<usize>,
    pub class_names: Option<Vec<String>>,
}

impl FeaturePack {
    pub fn new(
        visual: Array2<f32>,
        neural: Array2<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        unseen_classes: BTreeSet<usize>,
    ) -> Result<Self> {
        let pack = FeaturePack {
            visual,
            neural,
            labels,
            num_classes,
            unseen_classes,
            class_names: None,
        };
        pack.validate()?;
        Ok(pack)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.ncols()
    }

    pub fn neural_dim(&self) -> usize {
        self.neural.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.visual.nrows() != n {
            return Err(Error::format(
                "visual",
                format!("{} rows but {n} labels", self.visual.nrows()),
            ));
        }
        if self.neural.nrows() != n {
            return Err(Error::format(
                "neural",
                format!("{} rows but {n} labels", self.neural.nrows()),
            ));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::format(
                "labels",
                format!("label {bad} outside [0, {})", self.num_classes),
            ));
        }
        if let Some(bad) = self.unseen_classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::format(
                "unseen_classes",
                format!("class {bad} outside [0, {})", self.num_classes),
            ));
        }
        if self.visual.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("visual", "non-finite value"));
        }
        if self.neural.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("neural", "non-finite value"));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(Error::format(
                    "class_names",
                    format!("{} names for {} classes", names.len(), self.num_classes),
                ));
            }
        }
        Ok(())
    }

    /// View over every row of the pack.
    pub fn full_view(&self) -> PackView<'_> {
        PackView {
            pack: self,
            rows: (0..self.len()).collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            version: PACK_FORMAT_VERSION,
            n: self.len(),
            k: self.num_classes,
            d_v: self.visual_dim(),
            d_b: self.neural_dim(),
            unseen_classes: self.unseen_classes.iter().copied().collect(),
            blobs: BlobNames::default(),
            class_names: self.class_names.clone(),
        };
        blob::write_f32(&dir.join(&manifest.blobs.visual), self.visual.iter().copied())?;
        blob::write_f32(&dir.join(&manifest.blobs.neural), self.neural.iter().copied())?;
        blob::write_i32(
            &dir.join(&manifest.blobs.labels),
            self.labels.iter().map(|&l| l as i32),
        )?;
        blob::write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = blob::read_json(&dir.join(MANIFEST_FILE), "manifest")?;
        if manifest.version != PACK_FORMAT_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported pack version {}", manifest.version),
            ));
        }
        let Manifest { n, k, d_v, d_b, .. } = manifest;
        let visual = blob::read_f32(&dir.join(&manifest.blobs.visual), n * d_v, "visual")?;
        let neural = blob::read_f32(&dir.join(&manifest.blobs.neural), n * d_b, "neural")?;
        let raw_labels = blob::read_i32(&dir.join(&manifest.blobs.labels), n, "labels")?;
        let mut labels = Vec::with_capacity(n);
        for (i, l) in raw_labels.into_iter().enumerate() {
            if l < 0 || l as usize >= k {
                return Err(Error::format(
                    "labels",
                    format!("label {l} at row {i} outside [0, {k})"),
                ));
            }
            labels.push(l as usize);
        }
        let unseen: BTreeSet<usize> = manifest.unseen_classes.iter().copied().collect();
        if unseen.len() != manifest.unseen_classes.len() {
            return Err(Error::format("unseen_classes", "duplicate class id"));
        }
        let pack = FeaturePack {
            visual: Array2::from_shape_vec((n, d_v), visual)
                .map_err(|e| Error::format("visual", e.to_string()))?,
            neural: Array2::from_shape_vec((n, d_b), neural)
                .map_err(|e| Error::format("neural", e.to_string()))?,
            labels,
            num_classes: k,
            unseen_classes: unseen,
            class_names: manifest.class_names,
        };
        pack.validate()?;
        Ok(pack)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "D_v")]
    d_v: usize,
    #[serde(rename = "D_b")]
    d_b: usize,
    unseen_classes: Vec<usize>,
    blobs: BlobNames,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobNames {
    visual: String,
    neural: String,
    labels: String,
}

impl Default for BlobNames {
    fn default() -> Self {
        BlobNames {
            visual: "visual.f32".into(),
            neural: "neural.f32".into(),
            labels: "labels.i32".into(),
        }
    }
}

/// Linear-Gaussian generator settings.
///
/// Each class gets one standard-normal semantic latent; each sample gets
/// independent visual and neural domain latents. Observations are fixed random
/// linear mixtures of the two plus isotropic Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub k_seen: usize,
    pub k_unseen: usize,
    pub n_per_class: usize,
    pub d_sem: usize,
    pub d_dom: usize,
    pub d_v: usize,
    pub d_b: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k_seen: 50,
            k_unseen: 10,
            n_per_class: 40,
            d_sem: 16,
            d_dom: 16,
            d_v: 64,
            d_b: 48,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("k_seen", self.k_seen),
            ("k_unseen", self.k_unseen),
            ("n_per_class", self.n_per_class),
            ("d_sem", self.d_sem),
            ("d_v", self.d_v),
            ("d_b", self.d_b),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be >= 1")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        if self.d_v < self.d_sem || self.d_b < self.d_sem {
            return Err(Error::config("observed dims must be >= d_sem"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.k_seen + self.k_unseen
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Draws a synthetic pack. Seen classes are `0..k_seen`, unseen classes
/// `k_seen..k_seen + k_unseen`; rows are grouped by class.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<FeaturePack> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sem_scale = 1.0 / (cfg.d_sem as f64).sqrt();
    let dom_scale = if cfg.d_dom > 0 {
        1.0 / (cfg.d_dom as f64).sqrt()
    } else {
        0.0
    };
    // observation = latent · mapᵀ, so maps are stored [latent × observed]
    let vis_sem = gaussian_matrix(&mut rng, cfg.d_sem, cfg.d_v, sem_scale);
    let vis_dom = gaussian_matrix(&mut rng, cfg.d_dom, cfg.d_v, dom_scale);
    let eeg_sem = gaussian_matrix(&mut rng, cfg.d_sem, cfg.d_b, sem_scale);
    let eeg_dom = gaussian_matrix(&mut rng, cfg.d_dom, cfg.d_b, dom_scale);

    let k = cfg.num_classes();
    let semantic = gaussian_matrix(&mut rng, k, cfg.d_sem, 1.0);

    let n = k * cfg.n_per_class;
    let mut visual = Array2::<f32>::zeros((n, cfg.d_v));
    let mut neural = Array2::<f32>::zeros((n, cfg.d_b));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for class in 0..k {
        let s = semantic.row(class);
        let v_sem = s.dot(&vis_sem);
        let b_sem = s.dot(&eeg_sem);
        for _ in 0..cfg.n_per_class {
            let dv = gaussian_matrix(&mut rng, 1, cfg.d_dom, 1.0);
            let db = gaussian_matrix(&mut rng, 1, cfg.d_dom, 1.0);
            let v = &v_sem + &dv.row(0).dot(&vis_dom)
                + gaussian_matrix(&mut rng, 1, cfg.d_v, cfg.noise_sigma).row(0);
            let b = &b_sem + &db.row(0).dot(&eeg_dom)
                + gaussian_matrix(&mut rng, 1, cfg.d_b, cfg.noise_sigma).row(0);
            visual
                .row_mut(row)
                .assign(&v.mapv(|x| x as f32));
            neural
                .row_mut(row)
                .assign(&b.mapv(|x| x as f32));
            labels.push(class);
            row += 1;
        }
    }
    FeaturePack::new(
        visual,
        neural,
        labels,
        k,
        (cfg.k_seen..k).collect(),
    )
}

/// A subset of pack rows, in pack order.
#[derive(Debug, Clone)]
pub struct PackView<'a> {
    pack: &'a FeaturePack,
    rows: Vec<usize>,
}

/// Splits a pack into the seen (training) and unseen (test) views.
pub fn split_seen_unseen(pack: &FeaturePack) -> Result<(PackView<'_>, PackView<'_>)> {
    if pack.unseen_classes.is_empty() {
        return Err(Error::config("unseen class set is empty"));
    }
    if pack.unseen_classes.len() >= pack.num_classes {
        return Err(Error::config("unseen class set covers every class"));
    }
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..pack.len()).partition(|&i| pack.unseen_classes.contains(&pack.labels[i]));
    let train_view = PackView { pack, rows: train };
    let test_view = PackView { pack, rows: test };
    debug_assert!(train_view
        .labels()
        .all(|l| !pack.unseen_classes.contains(&l)));
    Ok((train_view, test_view))
}

/// A mini-batch of paired features, widened to f64 for training.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub h_v: Array2<f64>,
    pub x_b: Array2<f64>,
    pub y: Vec<usize>,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl<'a> PackView<'a> {
    pub fn pack(&self) -> &'a FeaturePack {
        self.pack
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.iter().map(|&r| self.pack.labels[r])
    }

    /// Sorted distinct class ids present in the view.
    pub fn classes(&self) -> Vec<usize> {
        self.labels().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Gathers the given pack rows into a batch.
    pub fn gather(&self, pack_rows: &[usize]) -> FeatureBatch {
        let h_v = self
            .pack
            .visual
            .select(Axis(0), pack_rows)
            .mapv(f64::from);
        let x_b = self
            .pack
            .neural
            .select(Axis(0), pack_rows)
            .mapv(f64::from);
        let y = pack_rows.iter().map(|&r| self.pack.labels[r]).collect();
        FeatureBatch { h_v, x_b, y }
    }

    /// Whole view as one batch, in view order.
    pub fn to_batch(&self) -> FeatureBatch {
        self.gather(&self.rows)
    }

    /// One epoch of shuffled mini-batches. The order depends only on
    /// `shuffle_seed` and `epoch`; the last batch may be short.
    pub fn batches(&self, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.rows.is_empty() {
            return Err(Error::config("cannot batch an empty view"));
        }
        let mut order = self.rows.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        Ok(Batches {
            view: self,
            order,
            batch_size,
            pos: 0,
        })
    }

    pub fn num_batches(&self, batch_size: usize) -> usize {
        self.rows.len().div_ceil(batch_size)
    }
}

pub struct Batches<'v> {
    view: &'v PackView<'v>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = FeatureBatch;

    fn next(&mut self) -> Option<FeatureBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.view.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}
