//! Semantic/domain encoders, fusion decoders and the neural backbone slot.
//!
//! Every layer exposes a cached forward pass and a matching backward pass so
//! that losses can be differentiated by hand in f64.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Guard used by [`l2_normalize`] for zero rows.
pub const NORM_EPS: f64 = 1e-12;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x · Φ(x)` with the error-function form of Φ.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// A named view of one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: [usize; 2],
    pub data: &'a [f64],
}

/// Flat access to a model's parameter tensors, in a fixed order.
///
/// `tensors` and `tensors_mut` must enumerate the same tensors in the same
/// order; the optimizer and checkpoint code rely on it.
pub trait Parameters {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

/// Fully connected layer `y = x·W + b` with `W` stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform(±1/√fan_in) weights, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            weight: Array2::from_shape_simple_fn((input, output), || rng.random_range(-bound..bound)),
            bias: Array1::zeros(output),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::dim(format!(
                "linear layer expects {} input columns, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }

    /// Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> (Linear, Array2<f64>) {
        let grads = Linear {
            weight: x.t().dot(&grad_out),
            bias: grad_out.sum_axis(Axis(0)),
        };
        (grads, grad_out.dot(&self.weight.t()))
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.weight.as_slice_mut().expect("standard layout"));
        out.push(self.bias.as_slice_mut().expect("standard layout"));
    }
}

/// Two-layer perceptron `GELU(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn from_layers(fc1: Linear, fc2: Linear) -> Result<Self> {
        if fc1.out_dim() != fc2.in_dim() {
            return Err(Error::dim(format!(
                "hidden width mismatch: {} vs {}",
                fc1.out_dim(),
                fc2.in_dim()
            )));
        }
        Ok(Mlp { fc1, fc2 })
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp::from_layers(Linear::zeros(input, hidden), Linear::zeros(hidden, output))
            .expect("consistent dims")
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Mlp::zeros(self.in_dim(), self.hidden_dim(), self.out_dim())
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.fc1.out_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        let pre = self.fc1.forward(x)?;
        let act = pre.mapv(gelu);
        let out = self.fc2.forward(act.view())?;
        Ok((
            out,
            MlpCache {
                input: x.to_owned(),
                pre,
                act,
            },
        ))
    }

    pub fn backward(&self, cache: &MlpCache, grad_out: ArrayView2<f64>) -> (Mlp, Array2<f64>) {
        let (g2, g_act) = self.fc2.backward(cache.act.view(), grad_out);
        let mut g_pre = g_act;
        Zip::from(&mut g_pre)
            .and(&cache.pre)
            .for_each(|g, &p| *g *= gelu_grad(p));
        let (g1, g_in) = self.fc1.backward(cache.input.view(), g_pre.view());
        (Mlp::from_layers(g1, g2).expect("consistent dims"), g_in)
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::with_capacity(4);
        out.push(TensorRef {
            name: "w1".into(),
            shape: [self.fc1.weight.nrows(), self.fc1.weight.ncols()],
            data: self.fc1.weight.as_slice().expect("standard layout"),
        });
        out.push(TensorRef {
            name: "b1".into(),
            shape: [1, self.fc1.bias.len()],
            data: self.fc1.bias.as_slice().expect("standard layout"),
        });
        out.push(TensorRef {
            name: "w2".into(),
            shape: [self.fc2.weight.nrows(), self.fc2.weight.ncols()],
            data: self.fc2.weight.as_slice().expect("standard layout"),
        });
        out.push(TensorRef {
            name: "b2".into(),
            shape: [1, self.fc2.bias.len()],
            data: self.fc2.bias.as_slice().expect("standard layout"),
        });
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(4);
        self.fc1.push_tensors_mut(&mut out);
        self.fc2.push_tensors_mut(&mut out);
        out
    }
}

/// Fresh MLP parameters, deterministic in `seed`.
pub fn init_mlp(input: usize, hidden: usize, output: usize, seed: u64) -> Result<Mlp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_mlp_with(input, hidden, output, &mut rng)
}

pub fn init_mlp_with(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Mlp> {
    if input == 0 || hidden == 0 || output == 0 {
        return Err(Error::dim("MLP dimensions must be >= 1"));
    }
    Mlp::from_layers(Linear::init(input, hidden, rng), Linear::init(hidden, output, rng))
}

/// Divides each row by `max(‖row‖₂, 1e-12)`; also returns the clamped norms.
pub fn l2_normalize_with_norms(z: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_EPS));
    let out = &z / &norms.view().insert_axis(Axis(1));
    (out, norms)
}

pub fn l2_normalize(z: ArrayView2<f64>) -> Array2<f64> {
    l2_normalize_with_norms(z).0
}

/// Backward pass of [`l2_normalize`] given its output and clamped norms.
pub fn l2_normalize_backward(
    normalized: ArrayView2<f64>,
    norms: &Array1<f64>,
    grad_out: ArrayView2<f64>,
) -> Array2<f64> {
    let mut g = grad_out.to_owned();
    for ((mut g_row, y), &norm) in g
        .axis_iter_mut(Axis(0))
        .zip(normalized.axis_iter(Axis(0)))
        .zip(norms.iter())
    {
        if norm > NORM_EPS {
            let proj = y.dot(&g_row);
            g_row.zip_mut_with(&y, |gi, &yi| *gi = (*gi - yi * proj) / norm);
        } else {
            g_row.mapv_inplace(|gi| gi / norm);
        }
    }
    g
}

/// The four per-modality encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSet {
    pub sem_v: Mlp,
    pub dom_v: Mlp,
    pub sem_b: Mlp,
    pub dom_b: Mlp,
}

/// Unit-normalized semantic and domain parts of both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledFeatures {
    pub z_v_s: Array2<f64>,
    pub z_v_d: Array2<f64>,
    pub z_b_s: Array2<f64>,
    pub z_b_d: Array2<f64>,
}

/// Applies all four encoders and row-normalizes their outputs.
pub fn decouple(h_v: ArrayView2<f64>, h_b: ArrayView2<f64>, enc: &EncoderSet) -> Result<DecoupledFeatures> {
    if h_v.nrows() != h_b.nrows() {
        return Err(Error::dim(format!(
            "visual batch has {} rows, neural batch {}",
            h_v.nrows(),
            h_b.nrows()
        )));
    }
    Ok(DecoupledFeatures {
        z_v_s: l2_normalize(enc.sem_v.forward(h_v)?.view()),
        z_v_d: l2_normalize(enc.dom_v.forward(h_v)?.view()),
        z_b_s: l2_normalize(enc.sem_b.forward(h_b)?.view()),
        z_b_d: l2_normalize(enc.dom_b.forward(h_b)?.view()),
    })
}

/// Fusion decoder over additive combination of a domain part and the other
/// modality's semantic part.
pub fn reconstruct(decoder: &Mlp, z_d: ArrayView2<f64>, z_s_other: ArrayView2<f64>) -> Result<Array2<f64>> {
    if z_d.dim() != z_s_other.dim() {
        return Err(Error::dim(format!(
            "fusion operands differ in shape: {:?} vs {:?}",
            z_d.dim(),
            z_s_other.dim()
        )));
    }
    decoder.forward((&z_d + &z_s_other).view())
}

/// Neural feature extractor slot. The default is an MLP over flattened
/// feature vectors; `Identity` passes inputs through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    Identity,
    Mlp(Mlp),
}

#[derive(Debug, Clone)]
pub enum BackboneCache {
    Identity,
    Mlp(MlpCache),
}

impl Backbone {
    pub fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            Backbone::Identity => in_dim,
            Backbone::Mlp(m) => m.out_dim(),
        }
    }

    pub fn forward(&self, x_b: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x_b)?.0)
    }

    pub fn forward_cached(&self, x_b: ArrayView2<f64>) -> Result<(Array2<f64>, BackboneCache)> {
        match self {
            Backbone::Identity => Ok((x_b.to_owned(), BackboneCache::Identity)),
            Backbone::Mlp(m) => {
                let (out, cache) = m.forward_cached(x_b)?;
                Ok((out, BackboneCache::Mlp(cache)))
            }
        }
    }

    /// Parameter gradients (None for the identity) and input gradient.
    pub fn backward(&self, cache: &BackboneCache, grad_out: ArrayView2<f64>) -> (Option<Mlp>, Array2<f64>) {
        match (self, cache) {
            (Backbone::Mlp(m), BackboneCache::Mlp(c)) => {
                let (g, gx) = m.backward(c, grad_out);
                (Some(g), gx)
            }
            _ => (None, grad_out.to_owned()),
        }
    }
}

pub fn backbone_forward(backbone: &Backbone, x_b: ArrayView2<f64>) -> Result<Array2<f64>> {
    backbone.forward(x_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_error};
    use ndarray::{array, s};
    use proptest::prelude::*;

    fn single_unit() -> Mlp {
        Mlp::from_layers(
            Linear {
                weight: array![[1.0]],
                bias: array![0.0],
            },
            Linear {
                weight: array![[1.0]],
                bias: array![0.0],
            },
        )
        .unwrap()
    }

    #[test]
    fn gelu_anchor_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(30.0) - 30.0).abs() < 1e-12);
        assert!(gelu(-30.0).abs() < 1e-12);
        // ½(1 + erf(1/√2)) = Φ(1)
        let out = single_unit().forward(array![[1.0]].view()).unwrap();
        assert!((out[[0, 0]] - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn init_is_seeded_with_zero_bias() {
        let a = init_mlp(4, 8, 2, 0).unwrap();
        let b = init_mlp(4, 8, 2, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.fc1.bias.iter().chain(a.fc2.bias.iter()).all(|&v| v == 0.0));
        let bound = 0.5;
        assert!(a.fc1.weight.iter().all(|w| w.abs() <= bound));
        assert!(init_mlp(0, 8, 2, 0).is_err());
    }

    #[test]
    fn full_width_visual_encoder() {
        let m = init_mlp(1024, 512, 512, 3).unwrap();
        assert_eq!((m.in_dim(), m.hidden_dim(), m.out_dim()), (1024, 512, 512));
    }

    #[test]
    fn zero_weights_zero_output() {
        let m = Mlp::zeros(3, 4, 2);
        let out = m.forward(Array2::zeros((5, 3)).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = init_mlp(3, 4, 2, 1).unwrap();
        assert!(matches!(
            m.forward(Array2::zeros((2, 5)).view()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn final_layer_homogeneity() {
        let m = init_mlp(3, 5, 2, 9).unwrap();
        let x = array![[0.3, -1.0, 2.0], [1.5, 0.2, -0.4]];
        let mut scaled = m.clone();
        scaled.fc2.weight *= 3.0;
        scaled.fc2.bias.fill(0.25);
        let mut base = m.clone();
        base.fc2.bias.fill(0.25 / 3.0);
        let lhs = scaled.forward(x.view()).unwrap();
        let rhs = base.forward(x.view()).unwrap() * 3.0;
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_examples() {
        let z = l2_normalize(array![[3.0, 4.0], [0.0, 1.0], [0.0, 0.0]].view());
        assert!((z[[0, 0]] - 0.6).abs() < 1e-15 && (z[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(z.row(1), array![0.0, 1.0]);
        assert_eq!(z.row(2), array![0.0, 0.0]);
    }

    #[test]
    fn mlp_input_jacobian_matches_differences() {
        let m = init_mlp(3, 6, 4, 21).unwrap();
        let x = array![[0.5, -0.2, 1.1], [-0.9, 0.4, 0.3]];
        let weights = array![[0.3, -1.2, 0.7, 0.1], [1.0, 0.5, -0.4, 2.0]];
        let f = |v: &[f64]| {
            let xi = Array2::from_shape_vec((2, 3), v.to_vec()).unwrap();
            (m.forward(xi.view()).unwrap() * &weights).sum()
        };
        let (_, cache) = m.forward_cached(x.view()).unwrap();
        let (gp, gx) = m.backward(&cache, weights.view());
        let fd = central_diff(f, x.as_slice().unwrap(), 1e-6);
        assert!(rel_error(gx.as_slice().unwrap(), &fd) < 1e-7);

        // parameter gradient of the first layer weights
        let w1 = m.fc1.weight.as_slice().unwrap().to_vec();
        let fw = |v: &[f64]| {
            let mut mm = m.clone();
            mm.fc1.weight = Array2::from_shape_vec((3, 6), v.to_vec()).unwrap();
            (mm.forward(x.view()).unwrap() * &weights).sum()
        };
        let fd = central_diff(fw, &w1, 1e-6);
        assert!(rel_error(gp.fc1.weight.as_slice().unwrap(), &fd) < 1e-7);
    }

    #[test]
    fn normalize_backward_matches_differences() {
        let z = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.7]];
        let w = array![[1.0, 0.5, -2.0], [0.3, 0.3, 1.0]];
        let f = |v: &[f64]| {
            let zi = Array2::from_shape_vec((2, 3), v.to_vec()).unwrap();
            (l2_normalize(zi.view()) * &w).sum()
        };
        let (y, norms) = l2_normalize_with_norms(z.view());
        let g = l2_normalize_backward(y.view(), &norms, w.view());
        let fd = central_diff(f, z.as_slice().unwrap(), 1e-6);
        assert!(rel_error(g.as_slice().unwrap(), &fd) < 1e-7);
    }

    fn encoders(seed: u64) -> EncoderSet {
        EncoderSet {
            sem_v: init_mlp(5, 6, 3, seed).unwrap(),
            dom_v: init_mlp(5, 6, 3, seed + 1).unwrap(),
            sem_b: init_mlp(4, 6, 3, seed + 2).unwrap(),
            dom_b: init_mlp(4, 6, 3, seed + 3).unwrap(),
        }
    }

    #[test]
    fn decouple_outputs_unit_rows() {
        let enc = encoders(2);
        let h_v = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64).sin());
        let h_b = Array2::from_shape_fn((4, 4), |(i, j)| ((i * 4 + j) as f64).cos());
        let f = decouple(h_v.view(), h_b.view(), &enc).unwrap();
        for z in [&f.z_v_s, &f.z_v_d, &f.z_b_s, &f.z_b_d] {
            for row in z.rows() {
                assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
            }
        }
        let mut dup = h_v.clone();
        let r0 = dup.row(0).to_owned();
        dup.row_mut(2).assign(&r0);
        let g = decouple(dup.view(), h_b.view(), &enc).unwrap();
        assert_eq!(g.z_v_s.row(0), g.z_v_s.row(2));
        assert!(decouple(h_v.view(), h_b.slice(s![..3, ..]), &enc).is_err());
    }

    #[test]
    fn decouple_is_row_equivariant() {
        let enc = encoders(5);
        let h_v = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin());
        let h_b = Array2::from_shape_fn((4, 4), |(i, j)| ((i * 3 + j) as f64 * 0.51).cos());
        let perm = [2, 0, 3, 1];
        let f = decouple(h_v.view(), h_b.view(), &enc).unwrap();
        let g = decouple(
            h_v.select(Axis(0), &perm).view(),
            h_b.select(Axis(0), &perm).view(),
            &enc,
        )
        .unwrap();
        assert_eq!(g.z_v_s, f.z_v_s.select(Axis(0), &perm));
        assert_eq!(g.z_b_d, f.z_b_d.select(Axis(0), &perm));
    }

    #[test]
    fn reconstruct_is_additive() {
        let dec = init_mlp(3, 4, 5, 8).unwrap();
        let a = array![[0.1, 0.2, -0.3], [1.0, -1.0, 0.5]];
        let b = array![[0.7, -0.2, 0.0], [0.3, 0.3, 0.3]];
        assert_eq!(
            reconstruct(&dec, a.view(), b.view()).unwrap(),
            reconstruct(&dec, b.view(), a.view()).unwrap()
        );
        let neg = -&a;
        assert_eq!(
            reconstruct(&dec, a.view(), neg.view()).unwrap(),
            dec.forward(Array2::zeros((2, 3)).view()).unwrap()
        );
        assert!(reconstruct(&dec, a.view(), b.slice(s![..1, ..])).is_err());
    }

    #[test]
    fn reconstruct_linear_in_positive_region() {
        // W1 = 1, large positive bias keeps GELU in its linear regime; W2 = 1, b2 = -bias
        let shift = 40.0;
        let dec = Mlp::from_layers(
            Linear {
                weight: Array2::eye(2),
                bias: Array1::from_elem(2, shift),
            },
            Linear {
                weight: Array2::eye(2),
                bias: Array1::from_elem(2, -shift),
            },
        )
        .unwrap();
        let a = array![[0.3, -0.4]];
        let b = array![[0.2, 0.9]];
        let out = reconstruct(&dec, a.view(), b.view()).unwrap();
        let expected = &a + &b;
        for (o, e) in out.iter().zip(expected.iter()) {
            assert!((o - e).abs() < 1e-9);
        }
    }

    #[test]
    fn backbone_slot() {
        let x = array![[1.0, 2.0], [3.0, -4.0]];
        assert_eq!(backbone_forward(&Backbone::Identity, x.view()).unwrap(), x);
        let mlp = Backbone::Mlp(init_mlp(2, 3, 7, 0).unwrap());
        assert_eq!(mlp.forward(x.view()).unwrap().ncols(), 7);
        assert_eq!(mlp.out_dim(2), 7);
        assert!(mlp.forward(Array2::zeros((1, 3)).view()).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_unit_and_idempotent(v in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let z = Array2::from_shape_vec((3, 4), v).unwrap();
            let once = l2_normalize(z.view());
            let twice = l2_normalize(once.view());
            for (row, orig) in once.rows().into_iter().zip(z.rows()) {
                if orig.dot(&orig).sqrt() > 1e-6 {
                    prop_assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
                }
            }
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
