//! Descriptor projection (full precision or learned binary), ITQ
//! initialization and product quantization of global descriptors.

mod bits;
pub mod itq;
pub mod pq;

pub use bits::{hamming, pack_signs, unpack_signs, BinaryCodeMatrix};
pub use itq::{itq_fit, itq_fit_from_rotation, ItqFit};
pub use pq::{pq_decode, pq_encode, pq_train, pq_train_with, PqCodebook, PqTrainConfig};

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{AmesError, Result};
use crate::model::{init_linear, visit_linear, visit_linear_mut, visit_norm, visit_norm_mut, LayerNormParams};
use crate::numerics::{erf, layer_norm, layer_norm_rows, layer_norm_rows_backward, LayerNormCache, Linear, Matrix, LN_EPS};

/// Default smoothness of the erf relaxation.
pub const DEFAULT_DELTA: f64 = 1e-3;

/// `f(u) = u P + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct FpProjection {
    pub linear: Linear,
}

impl FpProjection {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let mut linear = Linear::zeros(input_dim, output_dim);
        init_linear(&mut linear, rng);
        Self { linear }
    }
}

/// Row-wise affine projection.
pub fn project_fp(x: &Matrix, proj: &FpProjection) -> Result<Matrix> {
    if x.cols() != proj.linear.weight.rows() {
        return Err(AmesError::Shape { what: "descriptor dim", expected: proj.linear.weight.rows(), got: x.cols() });
    }
    proj.linear.forward(x)
}

/// Learned binarization `b(u) = sgn(u W)` followed by re-mapping
/// `r(b) = LayerNorm(b R + c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryCodec {
    /// D×d binarization weights.
    pub weight: Matrix,
    pub delta: f64,
    pub remap: Linear,
    pub norm: LayerNormParams,
}

impl BinaryCodec {
    /// Codec with the given binarization weights and an identity re-mapping.
    pub fn new(weight: Matrix, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(AmesError::Config("delta must be positive"));
        }
        let d = weight.cols();
        if d == 0 || !d.is_multiple_of(8) {
            return Err(AmesError::Config("code length must be a positive multiple of 8"));
        }
        Ok(Self { weight, delta, remap: Linear { weight: Matrix::identity(d), bias: alloc::vec![0.0; d] }, norm: LayerNormParams::identity(d) })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn bits(&self) -> usize {
        self.weight.cols()
    }

    fn pre_activation(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.input_dim() {
            return Err(AmesError::Shape { what: "descriptor dim", expected: self.input_dim(), got: u.len() });
        }
        let x = Matrix::from_vec(1, u.len(), u.to_vec())?;
        Ok(x.matmul(&self.weight)?.into_vec())
    }

    #[inline]
    fn smooth_scale(&self) -> f64 {
        1.0 / (core::f64::consts::SQRT_2 * self.delta)
    }

    /// `erf(u W / √(2δ²))`.
    pub fn binarize_smooth(&self, u: &[f64]) -> Result<Vec<f64>> {
        let s = self.smooth_scale();
        Ok(self.pre_activation(u)?.into_iter().map(|p| erf(p * s)).collect())
    }

    /// Derivative of the smooth binarization w.r.t. a pre-activation value.
    pub fn smooth_derivative(&self, pre: f64) -> f64 {
        let s = self.smooth_scale();
        let z = pre * s;
        core::f64::consts::FRAC_2_SQRT_PI * libm::exp(-z * z) * s
    }

    /// Componentwise sign with `sgn(0) = +1`.
    pub fn binarize_hard(&self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.pre_activation(u)?.into_iter().map(hard_sign).collect())
    }

    /// Re-mapping of a (binary or relaxed) code back to real values.
    pub fn remap(&self, code: &[f64]) -> Result<Vec<f64>> {
        if code.len() != self.bits() {
            return Err(AmesError::Shape { what: "code length", expected: self.bits(), got: code.len() });
        }
        let x = Matrix::from_vec(1, code.len(), code.to_vec())?;
        let lin = self.remap.forward(&x)?;
        Ok(layer_norm(lin.row(0), &self.norm.gain, &self.norm.bias, LN_EPS))
    }

    /// Hard codes for every row of `x`.
    pub fn encode(&self, x: &Matrix) -> Result<BinaryCodeMatrix> {
        let mut out = BinaryCodeMatrix::new(self.bits())?;
        let pre = x.matmul(&self.weight)?;
        for i in 0..pre.rows() {
            out.push_signs(pre.row(i))?;
        }
        Ok(out)
    }

    /// Re-maps the first `rows` stored codes into model tokens.
    pub fn remap_codes(&self, codes: &BinaryCodeMatrix, rows: usize) -> Result<Matrix> {
        let d = self.bits();
        if codes.bits() != d {
            return Err(AmesError::Shape { what: "code length", expected: d, got: codes.bits() });
        }
        let mut b = Matrix::zeros(rows, d);
        for i in 0..rows {
            b.row_mut(i).copy_from_slice(&codes.unpack_row(i));
        }
        let lin = self.remap.forward(&b)?;
        Ok(layer_norm_rows(&lin, &self.norm.gain, &self.norm.bias, LN_EPS).0)
    }
}

#[inline]
pub fn hard_sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// The projection `f` applied to every local descriptor.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Fp(FpProjection),
    Binary(BinaryCodec),
}

/// Intermediate values of a training-mode projection.
#[derive(Clone, Debug)]
pub struct ProjectionCache {
    input: Matrix,
    /// Binary variant only: pre-activations, relaxed codes and norm cache.
    binary: Option<(Matrix, Matrix, LayerNormCache)>,
}

impl Projection {
    pub fn input_dim(&self) -> usize {
        match self {
            Projection::Fp(p) => p.linear.weight.rows(),
            Projection::Binary(b) => b.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Projection::Fp(p) => p.linear.weight.cols(),
            Projection::Binary(b) => b.bits(),
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, Projection::Binary(_))
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Projection::Fp(p) => Projection::Fp(FpProjection { linear: Linear::zeros(p.linear.weight.rows(), p.linear.weight.cols()) }),
            Projection::Binary(b) => Projection::Binary(BinaryCodec {
                weight: Matrix::zeros(b.weight.rows(), b.weight.cols()),
                delta: b.delta,
                remap: Linear::zeros(b.bits(), b.bits()),
                norm: LayerNormParams::zeros(b.bits()),
            }),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            Projection::Fp(p) => visit_linear(&p.linear, &format!("{prefix}.linear"), f),
            Projection::Binary(b) => {
                f(&format!("{prefix}.binarize"), b.weight.as_slice());
                visit_linear(&b.remap, &format!("{prefix}.remap"), f);
                visit_norm(&b.norm, &format!("{prefix}.norm"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            Projection::Fp(p) => visit_linear_mut(&mut p.linear, &format!("{prefix}.linear"), f),
            Projection::Binary(b) => {
                f(&format!("{prefix}.binarize"), b.weight.as_mut_slice());
                visit_linear_mut(&mut b.remap, &format!("{prefix}.remap"), f);
                visit_norm_mut(&mut b.norm, &format!("{prefix}.norm"), f);
            }
        }
    }

    /// Inference projection: the binary variant uses hard signs.
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Projection::Fp(p) => project_fp(x, p),
            Projection::Binary(b) => {
                let codes = b.encode(x)?;
                b.remap_codes(&codes, x.rows())
            }
        }
    }

    /// Training projection: the binary variant uses the erf relaxation.
    pub fn project_train(&self, x: &Matrix) -> Result<(Matrix, ProjectionCache)> {
        if x.cols() != self.input_dim() {
            return Err(AmesError::Shape { what: "descriptor dim", expected: self.input_dim(), got: x.cols() });
        }
        match self {
            Projection::Fp(p) => Ok((p.linear.forward(x)?, ProjectionCache { input: x.clone(), binary: None })),
            Projection::Binary(b) => {
                let pre = x.matmul(&b.weight)?;
                let s = b.smooth_scale();
                let mut relaxed = pre.clone();
                relaxed.as_mut_slice().iter_mut().for_each(|v| *v = erf(*v * s));
                let lin = b.remap.forward(&relaxed)?;
                let (out, ln) = layer_norm_rows(&lin, &b.norm.gain, &b.norm.bias, LN_EPS);
                Ok((out, ProjectionCache { input: x.clone(), binary: Some((pre, relaxed, ln)) }))
            }
        }
    }

    /// Accumulates projection gradients given the gradient on its output.
    pub fn backward(&self, cache: &ProjectionCache, dout: &Matrix, grad: &mut Projection) {
        match (self, grad) {
            (Projection::Fp(p), Projection::Fp(g)) => {
                p.linear.backward(&cache.input, dout, &mut g.linear);
            }
            (Projection::Binary(b), Projection::Binary(g)) => {
                let (pre, relaxed, ln) = cache.binary.as_ref().expect("binary projection cache");
                let dlin = layer_norm_rows_backward(ln, &b.norm.gain, dout, &mut g.norm.gain, &mut g.norm.bias);
                let mut dpre = b.remap.backward(relaxed, &dlin, &mut g.remap);
                for (d, p) in dpre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *d *= b.smooth_derivative(*p);
                }
                let dw = cache.input.t_matmul(&dpre).expect("projection backward shapes");
                g.weight.add_assign(&dw);
            }
            _ => panic!("gradient projection variant does not match parameters"),
        }
    }
}
