//! Alternating optimization of the variational estimators and the main
//! network.
//!
//! One [`TrainState::train_step`] runs, in order: backbone, decoupling and
//! normalization, prototype EMA update, `n_logli` likelihood steps on the
//! variational nets (on detached features), the weighted main objective, and
//! one AdamW step on the main network.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    init_mlp_with, l2_normalize, l2_normalize_backward, l2_normalize_with_norms, Backbone, BackboneCache,
    DecoupledFeatures, Mlp, MlpCache, Parameters, TensorRef,
};
use crate::error::{Error, Result};
use crate::evaluation::{self, gap_stats};
use crate::feature_io::{split_seen_unseen, FeatureBatch, FeaturePack, PackView};
use crate::mi::{
    club_upper_bound, club_with_grad, gaussian_nll_with_grad, info_nce_with_grad, sup_con_with_grad, Temperature,
    VariationalNet,
};
use crate::optim::AdamW;
use crate::prototypes::{class_means, intra_class_loss_with_grad, Deviation, PrototypeBank};

/// Which alignment objective is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    /// Neural semantic encoder maps into the fixed visual embedding space.
    ClipCon,
    /// Both modalities projected into a joint space, contrastive loss only.
    JointCon,
    /// Full decoupling: contrastive + MI minimization + cyclic reconstruction.
    VeSdn,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::ClipCon => "clip_con",
            Mode::JointCon => "joint_con",
            Mode::VeSdn => "ve_sdn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub intra: bool,
    pub supcon: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub tau_init: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_logli: usize,
    pub seed: u64,
    pub d_joint: usize,
    /// Hidden width of encoders and decoders; `None` means `d_joint`.
    pub hidden: Option<usize>,
    pub backbone: BackboneKind,
    /// Backbone output width; `None` means `d_joint`.
    pub backbone_dim: Option<usize>,
    /// Hidden width of the variational nets; `None` means `d_joint`.
    pub q_hidden: Option<usize>,
    pub deviation: Deviation,
    /// Optimizer steps per batch for the MI probe.
    pub probe_steps: usize,
    /// Probe learning rate, kept high so the probe tracks the current
    /// features.
    pub probe_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::VeSdn,
            intra: true,
            supcon: false,
            lambda1: 1.0,
            lambda2: 2.0,
            lambda3: 0.5,
            alpha: 0.5,
            tau_init: 0.07,
            lr: 3e-4,
            weight_decay: 0.0,
            batch_size: 1024,
            epochs: 50,
            n_logli: 1,
            seed: 0,
            d_joint: 512,
            hidden: None,
            backbone: BackboneKind::Mlp,
            backbone_dim: None,
            q_hidden: None,
            deviation: Deviation::Absolute,
            probe_steps: 1,
            probe_lr: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha must be in [0, 1]"));
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return Err(Error::config("tau must be > 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.probe_steps == 0 {
            return Err(Error::config("probe_steps must be >= 1"));
        }
        if !(self.probe_lr > 0.0 && self.probe_lr.is_finite()) {
            return Err(Error::config("probe_lr must be > 0"));
        }
        if self.n_logli == 0 {
            return Err(Error::config("n_logli must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be >= 2 for contrastive training"));
        }
        if self.d_joint == 0 || self.hidden == Some(0) || self.backbone_dim == Some(0) || self.q_hidden == Some(0) {
            return Err(Error::config("layer widths must be >= 1"));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.unwrap_or(self.d_joint)
    }

    pub fn q_hidden_dim(&self) -> usize {
        self.q_hidden.unwrap_or(self.d_joint)
    }

    /// Width of the neural backbone output `h_b`.
    pub fn feature_dim(&self, neural_dim: usize) -> usize {
        match self.backbone {
            BackboneKind::Identity => neural_dim,
            BackboneKind::Mlp => self.backbone_dim.unwrap_or(self.d_joint),
        }
    }

    /// Width of the space in which semantic features are compared.
    pub fn semantic_dim(&self, visual_dim: usize) -> usize {
        match self.mode {
            Mode::ClipCon => visual_dim,
            _ => self.d_joint,
        }
    }

    fn uses_decoupling(&self) -> bool {
        self.mode == Mode::VeSdn
    }
}

/// Everything updated by the main optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct MainNet {
    pub backbone: Backbone,
    /// `None` in `clip_con`, where visual embeddings are used as-is.
    pub sem_v: Option<Mlp>,
    pub dom_v: Option<Mlp>,
    pub sem_b: Mlp,
    pub dom_b: Option<Mlp>,
    pub dec_v: Option<Mlp>,
    pub dec_b: Option<Mlp>,
    pub temperature: Temperature,
}

impl MainNet {
    pub fn init(cfg: &TrainConfig, visual_dim: usize, neural_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = cfg.hidden_dim();
        let feat = cfg.feature_dim(neural_dim);
        let sem = cfg.semantic_dim(visual_dim);
        let backbone = match cfg.backbone {
            BackboneKind::Identity => Backbone::Identity,
            BackboneKind::Mlp => Backbone::Mlp(init_mlp_with(neural_dim, cfg.d_joint, feat, rng)?),
        };
        let sem_b = init_mlp_with(feat, hidden, sem, rng)?;
        let sem_v = match cfg.mode {
            Mode::ClipCon => None,
            _ => Some(init_mlp_with(visual_dim, hidden, sem, rng)?),
        };
        let (dom_v, dom_b, dec_v, dec_b) = if cfg.uses_decoupling() {
            (
                Some(init_mlp_with(visual_dim, hidden, sem, rng)?),
                Some(init_mlp_with(feat, hidden, sem, rng)?),
                Some(init_mlp_with(sem, hidden, visual_dim, rng)?),
                Some(init_mlp_with(sem, hidden, feat, rng)?),
            )
        } else {
            (None, None, None, None)
        };
        Ok(MainNet {
            backbone,
            sem_v,
            dom_v,
            sem_b,
            dom_b,
            dec_v,
            dec_b,
            temperature: Temperature::from_tau(cfg.tau_init),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Option<Mlp>| m.as_ref().map(Mlp::zeros_like);
        MainNet {
            backbone: match &self.backbone {
                Backbone::Identity => Backbone::Identity,
                Backbone::Mlp(m) => Backbone::Mlp(m.zeros_like()),
            },
            sem_v: z(&self.sem_v),
            dom_v: z(&self.dom_v),
            sem_b: self.sem_b.zeros_like(),
            dom_b: z(&self.dom_b),
            dec_v: z(&self.dec_v),
            dec_b: z(&self.dec_b),
            temperature: Temperature { log_inv_tau: 0.0 },
        }
    }

    fn modules(&self) -> Vec<(&'static str, &Mlp)> {
        let mut out = Vec::new();
        if let Backbone::Mlp(m) = &self.backbone {
            out.push(("backbone", m));
        }
        let optional = [
            ("sem_v", self.sem_v.as_ref()),
            ("dom_v", self.dom_v.as_ref()),
            ("sem_b", Some(&self.sem_b)),
            ("dom_b", self.dom_b.as_ref()),
            ("dec_v", self.dec_v.as_ref()),
            ("dec_b", self.dec_b.as_ref()),
        ];
        out.extend(optional.into_iter().filter_map(|(n, m)| m.map(|m| (n, m))));
        out
    }

    /// Semantic features of visual embeddings, unit rows.
    pub fn encode_visual(&self, h_v: ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.sem_v {
            Some(m) => Ok(l2_normalize(m.forward(h_v)?.view())),
            None => Ok(l2_normalize(h_v)),
        }
    }

    /// Semantic features of raw neural inputs, unit rows.
    pub fn encode_neural(&self, x_b: ArrayView2<f64>) -> Result<Array2<f64>> {
        let h_b = self.backbone.forward(x_b)?;
        Ok(l2_normalize(self.sem_b.forward(h_b.view())?.view()))
    }

    /// All four decoupled parts (domain parts are only defined in `ve_sdn`).
    pub fn decouple(&self, h_v: ArrayView2<f64>, x_b: ArrayView2<f64>) -> Result<Option<DecoupledFeatures>> {
        let (Some(sem_v), Some(dom_v), Some(dom_b)) = (&self.sem_v, &self.dom_v, &self.dom_b) else {
            return Ok(None);
        };
        let h_b = self.backbone.forward(x_b)?;
        let enc = crate::encoders::EncoderSet {
            sem_v: sem_v.clone(),
            dom_v: dom_v.clone(),
            sem_b: self.sem_b.clone(),
            dom_b: dom_b.clone(),
        };
        crate::encoders::decouple(h_v, h_b.view(), &enc).map(Some)
    }
}

impl Parameters for MainNet {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (prefix, m) in self.modules() {
            out.extend(m.tensors().into_iter().map(|t| TensorRef {
                name: format!("{prefix}.{}", t.name),
                ..t
            }));
        }
        out.push(TensorRef {
            name: "log_inv_tau".into(),
            shape: [1, 1],
            data: std::slice::from_ref(&self.temperature.log_inv_tau),
        });
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        if let Backbone::Mlp(m) = &mut self.backbone {
            out.extend(m.tensors_mut());
        }
        for m in [&mut self.sem_v, &mut self.dom_v].into_iter().flatten() {
            out.extend(m.tensors_mut());
        }
        out.extend(self.sem_b.tensors_mut());
        for m in [&mut self.dom_b, &mut self.dec_v, &mut self.dec_b].into_iter().flatten() {
            out.extend(m.tensors_mut());
        }
        out.push(std::slice::from_mut(&mut self.temperature.log_inv_tau));
        out
    }
}

/// Weighted objective components for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_con: f64,
    pub l_mi: f64,
    pub l_mi_v: f64,
    pub l_mi_b: f64,
    pub l_recon: f64,
    pub l_intra: f64,
    pub total: f64,
}

/// Per-step record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub epoch: u64,
    pub l_con: f64,
    pub l_mi: f64,
    pub l_recon: f64,
    pub l_intra: f64,
    pub l_loglikeli: f64,
    pub l_total: f64,
    pub probe_mi: f64,
    /// Visual and neural CLUB terms; `l_mi` is their sum.
    pub l_mi_v: f64,
    pub l_mi_b: f64,
}

struct Encoded {
    z: Array2<f64>,
    norms: Array1<f64>,
    cache: Option<MlpCache>,
}

fn encode(m: Option<&Mlp>, x: ArrayView2<f64>) -> Result<Encoded> {
    let (raw, cache) = match m {
        Some(m) => {
            let (out, c) = m.forward_cached(x)?;
            (out, Some(c))
        }
        None => (x.to_owned(), None),
    };
    let (z, norms) = l2_normalize_with_norms(raw.view());
    Ok(Encoded { z, norms, cache })
}

/// Cached forward pass of the main network over one batch.
pub struct ForwardPass {
    h_v: Array2<f64>,
    h_b: Array2<f64>,
    backbone_cache: BackboneCache,
    sem_v: Encoded,
    sem_b: Encoded,
    dom_v: Option<Encoded>,
    dom_b: Option<Encoded>,
}

impl ForwardPass {
    pub fn run(net: &MainNet, batch: &FeatureBatch) -> Result<Self> {
        let (h_b, backbone_cache) = net.backbone.forward_cached(batch.x_b.view())?;
        let sem_v = encode(net.sem_v.as_ref(), batch.h_v.view())?;
        let sem_b = encode(Some(&net.sem_b), h_b.view())?;
        let dom_v = net.dom_v.as_ref().map(|m| encode(Some(m), batch.h_v.view())).transpose()?;
        let dom_b = net.dom_b.as_ref().map(|m| encode(Some(m), h_b.view())).transpose()?;
        Ok(ForwardPass {
            h_v: batch.h_v.clone(),
            h_b,
            backbone_cache,
            sem_v,
            sem_b,
            dom_v,
            dom_b,
        })
    }

    pub fn z_v_s(&self) -> &Array2<f64> {
        &self.sem_v.z
    }

    pub fn z_b_s(&self) -> &Array2<f64> {
        &self.sem_b.z
    }

    pub fn z_v_d(&self) -> Option<&Array2<f64>> {
        self.dom_v.as_ref().map(|e| &e.z)
    }

    pub fn z_b_d(&self) -> Option<&Array2<f64>> {
        self.dom_b.as_ref().map(|e| &e.z)
    }

    /// Evaluates the weighted objective and backpropagates it into the main
    /// network. The variational nets and the bank are read-only here.
    pub fn loss_and_backward(
        &self,
        net: &MainNet,
        cfg: &TrainConfig,
        labels: &[usize],
        q_v: &VariationalNet,
        q_b: &VariationalNet,
        bank: &PrototypeBank,
    ) -> Result<(LossParts, MainNet)> {
        let mut g_zvs = Array2::zeros(self.sem_v.z.raw_dim());
        let mut g_zbs = Array2::zeros(self.sem_b.z.raw_dim());
        let mut g_zvd = self.dom_v.as_ref().map(|e| Array2::zeros(e.z.raw_dim()));
        let mut g_zbd = self.dom_b.as_ref().map(|e| Array2::zeros(e.z.raw_dim()));
        let mut g_hb = Array2::<f64>::zeros(self.h_b.raw_dim());
        let mut parts = LossParts::default();
        let mut grads = net.zeros_like();

        let tau = net.temperature.tau();
        let con = if cfg.supcon {
            sup_con_with_grad(self.sem_v.z.view(), self.sem_b.z.view(), labels, tau)?
        } else {
            info_nce_with_grad(self.sem_v.z.view(), self.sem_b.z.view(), tau)?
        };
        parts.l_con = con.value;
        g_zvs += &con.grad_a;
        g_zbs += &con.grad_b;
        grads.temperature.log_inv_tau = net.temperature.grad_log_inv_tau(con.grad_inv_tau);

        if let (Some(dv), Some(db), Some(gvd), Some(gbd)) = (&self.dom_v, &self.dom_b, &mut g_zvd, &mut g_zbd) {
            let mi_v = club_with_grad(q_v, self.sem_v.z.view(), dv.z.view())?;
            let mi_b = club_with_grad(q_b, self.sem_b.z.view(), db.z.view())?;
            parts.l_mi_v = mi_v.value;
            parts.l_mi_b = mi_b.value;
            parts.l_mi = mi_v.value + mi_b.value;
            g_zvs.scaled_add(cfg.lambda1, &mi_v.grad_target);
            gvd.scaled_add(cfg.lambda1, &mi_v.grad_cond);
            g_zbs.scaled_add(cfg.lambda1, &mi_b.grad_target);
            gbd.scaled_add(cfg.lambda1, &mi_b.grad_cond);

            let (Some(dec_v), Some(dec_b)) = (&net.dec_v, &net.dec_b) else {
                return Err(Error::config("decoupling mode without decoders"));
            };
            let fused_v = &dv.z + &self.sem_b.z;
            let fused_b = &db.z + &self.sem_v.z;
            let (rec_v, cache_v) = dec_v.forward_cached(fused_v.view())?;
            let (rec_b, cache_b) = dec_b.forward_cached(fused_b.view())?;
            let err_v = &rec_v - &self.h_v;
            let err_b = &rec_b - &self.h_b;
            let mse_v = err_v.mapv(|e| e * e).mean().unwrap_or(0.0);
            let mse_b = err_b.mapv(|e| e * e).mean().unwrap_or(0.0);
            parts.l_recon = 0.5 * (mse_v + mse_b);

            // d(λ2·½·mean(e²))/de = λ2·e/numel
            let g_rec_v = &err_v * (cfg.lambda2 / err_v.len() as f64);
            let g_rec_b = &err_b * (cfg.lambda2 / err_b.len() as f64);
            let (gd_v, g_fused_v) = dec_v.backward(&cache_v, g_rec_v.view());
            let (gd_b, g_fused_b) = dec_b.backward(&cache_b, g_rec_b.view());
            *gvd += &g_fused_v;
            g_zbs += &g_fused_v;
            *gbd += &g_fused_b;
            g_zvs += &g_fused_b;
            // reconstruction target is the backbone output itself
            g_hb -= &g_rec_b;
            grads.dec_v = Some(gd_v);
            grads.dec_b = Some(gd_b);
        }

        if cfg.intra {
            let (l, g) = intra_class_loss_with_grad(self.sem_v.z.view(), labels, bank, cfg.deviation)?;
            parts.l_intra = l;
            g_zvs.scaled_add(cfg.lambda3, &g);
        }

        parts.total = parts.l_con + cfg.lambda1 * parts.l_mi + cfg.lambda2 * parts.l_recon + cfg.lambda3 * parts.l_intra;
        for (name, v) in [
            ("l_con", parts.l_con),
            ("l_mi", parts.l_mi),
            ("l_recon", parts.l_recon),
            ("l_intra", parts.l_intra),
        ] {
            if !v.is_finite() {
                return Err(Error::numerical(name, format!("non-finite loss {v}")));
            }
        }

        let backprop = |enc: &Encoded, m: Option<&Mlp>, g: &Array2<f64>| -> Option<(Mlp, Array2<f64>)> {
            let g_raw = l2_normalize_backward(enc.z.view(), &enc.norms, g.view());
            match (m, &enc.cache) {
                (Some(m), Some(c)) => Some(m.backward(c, g_raw.view())),
                _ => None,
            }
        };
        if let Some((g, _)) = backprop(&self.sem_v, net.sem_v.as_ref(), &g_zvs) {
            grads.sem_v = Some(g);
        }
        if let Some((g, gh)) = backprop(&self.sem_b, Some(&net.sem_b), &g_zbs) {
            grads.sem_b = g;
            g_hb += &gh;
        }
        if let (Some(enc), Some(g)) = (&self.dom_v, &g_zvd) {
            grads.dom_v = backprop(enc, net.dom_v.as_ref(), g).map(|(g, _)| g);
        }
        if let (Some(enc), Some(g)) = (&self.dom_b, &g_zbd) {
            if let Some((g, gh)) = backprop(enc, net.dom_b.as_ref(), g) {
                grads.dom_b = Some(g);
                g_hb += &gh;
            }
        }
        if let (Some(g), _) = net.backbone.backward(&self.backbone_cache, g_hb.view()) {
            grads.backbone = Backbone::Mlp(g);
        }
        Ok((parts, grads))
    }
}

/// Objective value and main-network gradient for fixed estimator and bank
/// state. Pure: used by gradient checks.
pub fn objective(
    net: &MainNet,
    cfg: &TrainConfig,
    batch: &FeatureBatch,
    q_v: &VariationalNet,
    q_b: &VariationalNet,
    bank: &PrototypeBank,
) -> Result<(LossParts, MainNet)> {
    ForwardPass::run(net, batch)?.loss_and_backward(net, cfg, &batch.y, q_v, q_b, bank)
}

/// Cyclic reconstruction loss `½·[MSE(h_v, D_v(z_v^d + z_b^s)) + MSE(h_b, D_b(z_b^d + z_v^s))]`.
pub fn loss_recon(
    h_v: ArrayView2<f64>,
    h_b: ArrayView2<f64>,
    feats: &DecoupledFeatures,
    dec_v: &Mlp,
    dec_b: &Mlp,
) -> Result<f64> {
    let rec_v = crate::encoders::reconstruct(dec_v, feats.z_v_d.view(), feats.z_b_s.view())?;
    let rec_b = crate::encoders::reconstruct(dec_b, feats.z_b_d.view(), feats.z_v_s.view())?;
    if rec_v.dim() != h_v.dim() || rec_b.dim() != h_b.dim() {
        return Err(Error::dim("reconstruction shape differs from its target"));
    }
    let mse = |a: &Array2<f64>, b: ArrayView2<f64>| (a - &b).mapv(|e| e * e).mean().unwrap_or(0.0);
    Ok(0.5 * (mse(&rec_v, h_v) + mse(&rec_b, h_b)))
}

/// Per-epoch summary appended after the evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub l_con: f64,
    pub l_mi: f64,
    pub l_recon: f64,
    pub l_intra: f64,
    pub l_loglikeli: f64,
    pub l_total: f64,
    pub probe_mi: f64,
    pub l_mi_v: f64,
    pub l_mi_b: f64,
    pub top1: f64,
    pub top5: f64,
    /// Mean over seen classes of the mean visual-to-prototype distance.
    pub gap_mean: f64,
    /// Mean over seen classes of the std of visual-to-prototype distances.
    pub gap_std: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<LossReport>,
    pub epochs: Vec<EpochSummary>,
}

pub const HISTORY_CSV_HEADER: &str = "step,epoch,l_con,l_mi,l_recon,l_intra,l_loglikeli,l_total,probe_mi";

impl History {
    /// Step rows interleaved with epoch-mean rows (empty `step` field).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_CSV_HEADER);
        out.push('\n');
        let mut steps = self.steps.iter().peekable();
        for summary in &self.epochs {
            while let Some(r) = steps.next_if(|r| r.epoch == summary.epoch) {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.step, r.epoch, r.l_con, r.l_mi, r.l_recon, r.l_intra, r.l_loglikeli, r.l_total, r.probe_mi
                ));
            }
            let s = summary;
            out.push_str(&format!(
                ",{},{},{},{},{},{},{},{}\n",
                s.epoch, s.l_con, s.l_mi, s.l_recon, s.l_intra, s.l_loglikeli, s.l_total, s.probe_mi
            ));
        }
        for r in steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step, r.epoch, r.l_con, r.l_mi, r.l_recon, r.l_intra, r.l_loglikeli, r.l_total, r.probe_mi
            ));
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let mut out = String::from("epoch,top1,top5\n");
        for s in &self.epochs {
            out.push_str(&format!("{},{},{}\n", s.epoch, s.top1, s.top5));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        write("history.csv", self.to_csv())?;
        write("eval.csv", self.eval_csv())?;
        crate::blob::write_json(&dir.join("history.json"), self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::blob::read_json(path, "history")
    }
}

/// Complete mutable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub visual_dim: usize,
    pub neural_dim: usize,
    pub net: MainNet,
    pub q_v: VariationalNet,
    pub q_b: VariationalNet,
    /// Cross-modal semantic MI probe; never touched by the main loss.
    pub probe: VariationalNet,
    pub bank: PrototypeBank,
    pub step: u64,
    pub epoch: u64,
    opt_main: AdamW,
    opt_q_v: AdamW,
    opt_q_b: AdamW,
    opt_probe: AdamW,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, visual_dim: usize, neural_dim: usize, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = MainNet::init(cfg, visual_dim, neural_dim, &mut rng)?;
        let sem = cfg.semantic_dim(visual_dim);
        let qh = cfg.q_hidden_dim();
        let q_v = VariationalNet::init(sem, qh, sem, &mut rng)?;
        let q_b = VariationalNet::init(sem, qh, sem, &mut rng)?;
        let probe = VariationalNet::init(sem, qh, sem, &mut rng)?;
        let bank = PrototypeBank::init(num_classes, sem, cfg.alpha, cfg.seed.wrapping_add(0x5eed))?;
        Ok(TrainState {
            opt_main: AdamW::new(&net, cfg.lr, cfg.weight_decay),
            opt_q_v: AdamW::new(&q_v, cfg.lr, cfg.weight_decay),
            opt_q_b: AdamW::new(&q_b, cfg.lr, cfg.weight_decay),
            opt_probe: AdamW::new(&probe, cfg.probe_lr, cfg.weight_decay),
            config: cfg.clone(),
            visual_dim,
            neural_dim,
            net,
            q_v,
            q_b,
            probe,
            bank,
            step: 0,
            epoch: 0,
        })
    }

    /// `n_logli` likelihood steps on both variational nets over detached
    /// features. Returns the summed likelihood loss of the last step,
    /// evaluated before that step's update.
    pub fn q_inner_steps(
        &mut self,
        z_v_s: &Array2<f64>,
        z_v_d: &Array2<f64>,
        z_b_s: &Array2<f64>,
        z_b_d: &Array2<f64>,
        n_logli: usize,
    ) -> Result<f64> {
        let mut last = 0.0;
        for _ in 0..n_logli {
            let gv = gaussian_nll_with_grad(&self.q_v, z_v_s.view(), z_v_d.view())?;
            let gb = gaussian_nll_with_grad(&self.q_b, z_b_s.view(), z_b_d.view())?;
            last = gv.value + gb.value;
            self.opt_q_v.apply(&mut self.q_v, &gv.grad_q);
            self.opt_q_b.apply(&mut self.q_b, &gb.grad_q);
        }
        Ok(last)
    }

    /// Trains the probe on `(z_v^s → z_b^s)` and returns its MI estimate.
    fn probe_step(&mut self, z_v_s: &Array2<f64>, z_b_s: &Array2<f64>) -> Result<f64> {
        for _ in 0..self.config.probe_steps {
            let g = gaussian_nll_with_grad(&self.probe, z_b_s.view(), z_v_s.view())?;
            self.opt_probe.apply(&mut self.probe, &g.grad_q);
        }
        club_upper_bound(&self.probe, z_b_s.view(), z_v_s.view())
    }

    pub fn train_step(&mut self, batch: &FeatureBatch) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let cfg = self.config.clone();
        let fwd = ForwardPass::run(&self.net, batch)?;

        let means = class_means(fwd.z_b_s().view(), &batch.y)?;
        self.bank.ema_update(&means)?;

        let l_loglikeli = match (fwd.z_v_d(), fwd.z_b_d()) {
            (Some(zvd), Some(zbd)) => {
                self.q_inner_steps(fwd.z_v_s(), zvd, fwd.z_b_s(), zbd, cfg.n_logli)?
            }
            _ => 0.0,
        };
        let probe_mi = self.probe_step(fwd.z_v_s(), fwd.z_b_s())?;

        let (parts, grads) = fwd.loss_and_backward(&self.net, &cfg, &batch.y, &self.q_v, &self.q_b, &self.bank)?;
        if !l_loglikeli.is_finite() {
            return Err(Error::numerical("l_loglikeli", "non-finite likelihood"));
        }
        self.opt_main.apply(&mut self.net, &grads);
        self.step += 1;
        Ok(LossReport {
            step: self.step,
            epoch: self.epoch,
            l_con: parts.l_con,
            l_mi: parts.l_mi,
            l_recon: parts.l_recon,
            l_intra: parts.l_intra,
            l_loglikeli,
            l_total: parts.total,
            probe_mi,
            l_mi_v: parts.l_mi_v,
            l_mi_b: parts.l_mi_b,
        })
    }

    /// One pass over `view`; returns the step reports.
    pub fn train_epoch(&mut self, view: &PackView<'_>) -> Result<Vec<LossReport>> {
        let batches = view.batches(self.config.batch_size, self.config.seed, self.epoch)?;
        let mut reports = Vec::with_capacity(view.num_batches(self.config.batch_size));
        for batch in batches {
            reports.push(self.train_step(&batch)?);
        }
        Ok(reports)
    }
}

fn mean_of(reports: &[LossReport], f: impl Fn(&LossReport) -> f64) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(f).sum::<f64>() / reports.len() as f64
}

/// Trains on the seen classes for `cfg.epochs`, evaluating zero-shot accuracy
/// on the unseen classes after every epoch. When `checkpoint_dir` is given the
/// latest state is written there after each epoch.
pub fn fit(cfg: &TrainConfig, pack: &FeaturePack, checkpoint_dir: Option<&Path>) -> Result<(TrainState, History)> {
    cfg.validate()?;
    let (train, test) = split_seen_unseen(pack)?;
    let mut state = TrainState::new(cfg, pack.visual_dim(), pack.neural_dim(), pack.num_classes)?;
    let mut history = History::default();
    let train_batch = train.to_batch();
    for _ in 0..cfg.epochs {
        let reports = state.train_epoch(&train)?;
        let eval = evaluation::evaluate_view(&state, &test)?;
        let z_v = state.net.encode_visual(train_batch.h_v.view())?;
        let gaps = gap_stats(z_v.view(), &train_batch.y, &state.bank)?;
        let (gap_mean, gap_std) = evaluation::mean_gap(&gaps);
        history.epochs.push(EpochSummary {
            epoch: state.epoch,
            l_con: mean_of(&reports, |r| r.l_con),
            l_mi: mean_of(&reports, |r| r.l_mi),
            l_recon: mean_of(&reports, |r| r.l_recon),
            l_intra: mean_of(&reports, |r| r.l_intra),
            l_loglikeli: mean_of(&reports, |r| r.l_loglikeli),
            l_total: mean_of(&reports, |r| r.l_total),
            probe_mi: mean_of(&reports, |r| r.probe_mi),
            l_mi_v: mean_of(&reports, |r| r.l_mi_v),
            l_mi_b: mean_of(&reports, |r| r.l_mi_b),
            top1: eval.top1,
            top5: eval.top5,
            gap_mean,
            gap_std,
        });
        history.steps.extend(reports);
        state.epoch += 1;
        if let Some(dir) = checkpoint_dir {
            crate::checkpoint::save(&state, dir)?;
        }
    }
    Ok((state, history))
}
