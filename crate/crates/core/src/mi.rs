//! Mutual-information estimators and contrastive objectives.
//!
//! * [`VariationalNet`]: diagonal-Gaussian conditional `q(z_s | z_d)` used by
//!   the contrastive log-ratio upper bound ([`club_upper_bound`]).
//! * [`info_nce`] / [`sup_con`]: symmetric contrastive losses over cosine
//!   similarities with a learnable temperature.
//!
//! Every loss has a `*_with_grad` variant returning analytic gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{gelu, gelu_grad, Linear, Parameters, TensorRef};
use crate::error::{Error, Result};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_INIT: f64 = 0.07;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Conditional diagonal Gaussian `q(target | cond)` with a shared GELU trunk
/// and separate mean / log-variance heads.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalNet {
    pub trunk: Linear,
    pub mean_head: Linear,
    pub logvar_head: Linear,
}

#[derive(Debug, Clone)]
pub struct QCache {
    cond: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    raw_logvar: Array2<f64>,
}

impl VariationalNet {
    pub fn init(cond_dim: usize, hidden: usize, target_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cond_dim == 0 || hidden == 0 || target_dim == 0 {
            return Err(Error::dim("variational net dimensions must be >= 1"));
        }
        Ok(VariationalNet {
            trunk: Linear::init(cond_dim, hidden, rng),
            mean_head: Linear::init(hidden, target_dim, rng),
            logvar_head: Linear::init(hidden, target_dim, rng),
        })
    }

    /// A net whose output ignores its input: mean `mu`, log-variance `logvar`.
    pub fn constant(cond_dim: usize, hidden: usize, mu: &[f64], logvar: &[f64]) -> Self {
        let d = mu.len();
        let mut mean_head = Linear::zeros(hidden, d);
        mean_head.bias = Array1::from(mu.to_vec());
        let mut logvar_head = Linear::zeros(hidden, d);
        logvar_head.bias = Array1::from(logvar.to_vec());
        VariationalNet {
            trunk: Linear::zeros(cond_dim, hidden),
            mean_head,
            logvar_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        VariationalNet {
            trunk: Linear::zeros(self.trunk.in_dim(), self.trunk.out_dim()),
            mean_head: Linear::zeros(self.mean_head.in_dim(), self.mean_head.out_dim()),
            logvar_head: Linear::zeros(self.logvar_head.in_dim(), self.logvar_head.out_dim()),
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn target_dim(&self) -> usize {
        self.mean_head.out_dim()
    }

    /// Returns `(mean, clamped log-variance)`.
    pub fn forward(&self, cond: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (mu, lv, _) = self.forward_cached(cond)?;
        Ok((mu, lv))
    }

    pub fn forward_cached(&self, cond: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>, QCache)> {
        let pre = self.trunk.forward(cond)?;
        let act = pre.mapv(gelu);
        let mu = self.mean_head.forward(act.view())?;
        let raw_logvar = self.logvar_head.forward(act.view())?;
        let lv = raw_logvar.mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok((
            mu,
            lv,
            QCache {
                cond: cond.to_owned(),
                pre,
                act,
                raw_logvar,
            },
        ))
    }

    /// Backpropagates gradients w.r.t. mean and clamped log-variance into the
    /// parameters and the conditioning input.
    pub fn backward(
        &self,
        cache: &QCache,
        grad_mu: ArrayView2<f64>,
        grad_logvar: ArrayView2<f64>,
    ) -> (VariationalNet, Array2<f64>) {
        let mut g_raw = grad_logvar.to_owned();
        Zip::from(&mut g_raw).and(&cache.raw_logvar).for_each(|g, &r| {
            if !(LOGVAR_MIN..=LOGVAR_MAX).contains(&r) {
                *g = 0.0;
            }
        });
        let (g_mean, g_act_m) = self.mean_head.backward(cache.act.view(), grad_mu);
        let (g_lv, g_act_l) = self.logvar_head.backward(cache.act.view(), g_raw.view());
        let mut g_pre = g_act_m + g_act_l;
        Zip::from(&mut g_pre)
            .and(&cache.pre)
            .for_each(|g, &p| *g *= gelu_grad(p));
        let (g_trunk, g_cond) = self.trunk.backward(cache.cond.view(), g_pre.view());
        (
            VariationalNet {
                trunk: g_trunk,
                mean_head: g_mean,
                logvar_head: g_lv,
            },
            g_cond,
        )
    }
}

impl Parameters for VariationalNet {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let layers = [
            ("trunk_w", "trunk_b", &self.trunk),
            ("mean_w", "mean_b", &self.mean_head),
            ("logvar_w", "logvar_b", &self.logvar_head),
        ];
        let mut out = Vec::with_capacity(6);
        for (w, b, l) in layers {
            out.push(TensorRef {
                name: w.into(),
                shape: [l.weight.nrows(), l.weight.ncols()],
                data: l.weight.as_slice().expect("standard layout"),
            });
            out.push(TensorRef {
                name: b.into(),
                shape: [1, l.bias.len()],
                data: l.bias.as_slice().expect("standard layout"),
            });
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(6);
        self.trunk.push_tensors_mut(&mut out);
        self.mean_head.push_tensors_mut(&mut out);
        self.logvar_head.push_tensors_mut(&mut out);
        out
    }
}

/// Value of an MI/likelihood objective with gradients for the variational
/// parameters, the target sample and the conditioning sample.
#[derive(Debug, Clone)]
pub struct QLossGrad {
    pub value: f64,
    pub grad_q: VariationalNet,
    pub grad_target: Array2<f64>,
    pub grad_cond: Array2<f64>,
}

fn check_pair(q: &VariationalNet, target: ArrayView2<f64>, cond: ArrayView2<f64>) -> Result<()> {
    if target.nrows() != cond.nrows() {
        return Err(Error::dim(format!(
            "target has {} rows, condition {}",
            target.nrows(),
            cond.nrows()
        )));
    }
    if target.ncols() != q.target_dim() || cond.ncols() != q.cond_dim() {
        return Err(Error::dim(format!(
            "variational net maps {} -> {}, got condition width {} and target width {}",
            q.cond_dim(),
            q.target_dim(),
            cond.ncols(),
            target.ncols()
        )));
    }
    if target.nrows() == 0 {
        return Err(Error::dim("empty sample"));
    }
    Ok(())
}

fn finite(component: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numerical(component, format!("non-finite value {v}")))
    }
}

/// Mean negative log-density of `z_s` under `q(· | z_d)`, summed over
/// dimensions.
pub fn gaussian_log_likelihood(q: &VariationalNet, z_s: ArrayView2<f64>, z_d: ArrayView2<f64>) -> Result<f64> {
    Ok(gaussian_nll_with_grad(q, z_s, z_d)?.value)
}

pub fn gaussian_nll_with_grad(q: &VariationalNet, z_s: ArrayView2<f64>, z_d: ArrayView2<f64>) -> Result<QLossGrad> {
    check_pair(q, z_s, z_d)?;
    let n = z_s.nrows() as f64;
    let (mu, lv, cache) = q.forward_cached(z_d)?;
    let resid = &z_s - &mu;
    let w = lv.mapv(|v| (-v).exp());
    let mut total = 0.0;
    Zip::from(&resid).and(&lv).and(&w).for_each(|&r, &l, &wi| {
        total += HALF_LN_2PI + 0.5 * l + 0.5 * wi * r * r;
    });
    let value = finite("log_likelihood", total / n)?;

    let grad_target = &resid * &w / n;
    let grad_mu = -&grad_target;
    let grad_lv = Zip::from(&resid)
        .and(&w)
        .map_collect(|&r, &wi| (0.5 - 0.5 * wi * r * r) / n);
    let (grad_q, grad_cond) = q.backward(&cache, grad_mu.view(), grad_lv.view());
    Ok(QLossGrad {
        value,
        grad_q,
        grad_target,
        grad_cond,
    })
}

/// Contrastive log-ratio upper bound on `I(z_d; z_s)`:
/// `(1/n) Σ_i [log q(z_s,i | z_d,i) − (1/n) Σ_j log q(z_s,j | z_d,i)]`.
///
/// The inner average over all `(i, j)` pairs is evaluated through the first
/// two sample moments of `z_s`, which is algebraically identical and O(n·d).
pub fn club_upper_bound(q: &VariationalNet, z_s: ArrayView2<f64>, z_d: ArrayView2<f64>) -> Result<f64> {
    Ok(club_with_grad(q, z_s, z_d)?.value)
}

pub fn club_with_grad(q: &VariationalNet, z_s: ArrayView2<f64>, z_d: ArrayView2<f64>) -> Result<QLossGrad> {
    check_pair(q, z_s, z_d)?;
    let n = z_s.nrows() as f64;
    let (mu, lv, cache) = q.forward_cached(z_d)?;
    let w = lv.mapv(|v| (-v).exp());
    let m1 = z_s.mean_axis(Axis(0)).expect("non-empty");
    let m2 = z_s.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");

    // per-entry log-ratio numerator: z² − m2 − 2μ(z − m1)
    let centered = &z_s - &m1;
    let numer = &z_s.mapv(|v| v * v) - &m2 - &(&mu * &centered * 2.0);
    let value = finite("club", -(&w * &numer).sum() / (2.0 * n))?;

    let grad_mu = &w * &centered / n;
    let grad_lv = &w * &numer / (2.0 * n);
    let w_sum = w.sum_axis(Axis(0));
    let wmu_sum = (&w * &mu).sum_axis(Axis(0));
    let pooled = (&z_s * &w_sum - &wmu_sum) / n;
    let grad_target = -(&w * &(&z_s - &mu) - &pooled) / n;
    let (grad_q, grad_cond) = q.backward(&cache, grad_mu.view(), grad_lv.view());
    Ok(QLossGrad {
        value,
        grad_q,
        grad_target,
        grad_cond,
    })
}

/// Closed-form MI of `dim` independent bivariate Gaussian pairs with
/// correlation `rho`, in nats.
pub fn gaussian_mi_analytic(rho: f64, dim: usize) -> Result<f64> {
    if rho.is_nan() || rho.abs() >= 1.0 {
        return Err(Error::config(format!("|rho| must be < 1, got {rho}")));
    }
    Ok(-(dim as f64) / 2.0 * (1.0 - rho * rho).ln())
}

/// Learnable softmax temperature stored as `log(1/τ)` with a floor on τ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    pub log_inv_tau: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::from_tau(TAU_INIT)
    }
}

impl Temperature {
    pub fn from_tau(tau: f64) -> Self {
        Temperature {
            log_inv_tau: -tau.ln(),
        }
    }

    pub fn tau(&self) -> f64 {
        (-self.log_inv_tau).exp().max(TAU_MIN)
    }

    fn is_floored(&self) -> bool {
        (-self.log_inv_tau).exp() < TAU_MIN
    }

    /// Chain rule from `dL/d(1/τ)` to `dL/d log(1/τ)`; zero on the floor.
    pub fn grad_log_inv_tau(&self, dl_dinv_tau: f64) -> f64 {
        if self.is_floored() {
            0.0
        } else {
            dl_dinv_tau / self.tau()
        }
    }
}

/// Contrastive loss value with gradients w.r.t. both inputs and `1/τ`.
#[derive(Debug, Clone)]
pub struct ContrastiveGrad {
    pub value: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
    pub grad_inv_tau: f64,
}

fn softmax_rows(logits: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut probs = logits.clone();
    let mut lse = Array1::zeros(logits.nrows());
    for (mut row, l) in probs.axis_iter_mut(Axis(0)).zip(lse.iter_mut()) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
        *l = m + s.ln();
    }
    (probs, lse)
}

/// Shared core of [`info_nce`] and [`sup_con`]. `labels = None` makes each
/// row's sole positive its paired row.
fn contrastive(
    z_a: ArrayView2<f64>,
    z_b: ArrayView2<f64>,
    tau: f64,
    labels: Option<&[usize]>,
) -> Result<ContrastiveGrad> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("temperature must be > 0, got {tau}")));
    }
    if z_a.dim() != z_b.dim() {
        return Err(Error::dim(format!(
            "contrastive inputs differ in shape: {:?} vs {:?}",
            z_a.dim(),
            z_b.dim()
        )));
    }
    let n = z_a.nrows();
    if n == 0 {
        return Err(Error::dim("empty batch"));
    }
    if let Some(y) = labels {
        if y.len() != n {
            return Err(Error::dim(format!("{} labels for {n} rows", y.len())));
        }
    }
    let inv_tau = 1.0 / tau;
    let sim = z_a.dot(&z_b.t());
    let logits = &sim * inv_tau;

    // positive weights: row i spreads unit mass over its positive set
    let pos = match labels {
        None => Array2::eye(n),
        Some(y) => {
            let mut m = Array2::from_shape_fn((n, n), |(i, j)| f64::from(u8::from(y[i] == y[j])));
            for mut row in m.axis_iter_mut(Axis(0)) {
                let c = row.sum();
                row /= c;
            }
            m
        }
    };
    // pos is row-normalized; with symmetric label masks the column view of
    // anchor j in modality b uses the same counts, i.e. posᵀ.
    let pos_t = pos.t();

    let (p_row, lse_row) = softmax_rows(&logits);
    let logits_t = logits.t().to_owned();
    let (p_col_t, lse_col) = softmax_rows(&logits_t);

    let row_term: f64 = lse_row.sum() - (&pos * &logits).sum();
    let col_term: f64 = lse_col.sum() - (&pos_t * &logits_t).sum();
    let scale = 1.0 / (2.0 * n as f64);
    let value = finite("contrastive", scale * (row_term + col_term))?;

    // dL/dlogits_ij = scale·[(P_row − pos)_ij + (P_colᵀ − posᵀ)_ji]
    let g_logits = (&p_row - &pos + (&p_col_t - &pos_t).t()) * scale;
    let grad_inv_tau = (&g_logits * &sim).sum();
    let g_sim = g_logits * inv_tau;
    Ok(ContrastiveGrad {
        value,
        grad_a: g_sim.dot(&z_b),
        grad_b: g_sim.t().dot(&z_a),
        grad_inv_tau,
    })
}

/// Symmetric InfoNCE over rows of `z_a` and `z_b`; paired rows are the
/// positives, all other batch rows negatives.
pub fn info_nce(z_a: ArrayView2<f64>, z_b: ArrayView2<f64>, tau: f64) -> Result<f64> {
    Ok(contrastive(z_a, z_b, tau, None)?.value)
}

pub fn info_nce_with_grad(z_a: ArrayView2<f64>, z_b: ArrayView2<f64>, tau: f64) -> Result<ContrastiveGrad> {
    contrastive(z_a, z_b, tau, None)
}

/// Supervised symmetric contrastive loss: every other-modality row sharing an
/// anchor's label is a positive. Normalized by `1/(2n)` so that pairwise
/// distinct labels give exactly [`info_nce`].
pub fn sup_con(z_v: ArrayView2<f64>, z_b: ArrayView2<f64>, labels: &[usize], tau: f64) -> Result<f64> {
    Ok(contrastive(z_v, z_b, tau, Some(labels))?.value)
}

pub fn sup_con_with_grad(
    z_v: ArrayView2<f64>,
    z_b: ArrayView2<f64>,
    labels: &[usize],
    tau: f64,
) -> Result<ContrastiveGrad> {
    contrastive(z_v, z_b, tau, Some(labels))
}
