use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Bound, ParamId, ParamSet, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Hidden width of the attention feed-forward sublayer, as a multiple of `h`.
pub const FFN_EXPANSION: usize = 2;

/// Scalar GELU (tanh approximation), the nonlinearity used by every block.
pub fn gelu<T: Scalar>(x: T) -> T {
    super::tape::gelu_scalar(x)
}

fn xavier<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.random_range(-a..a)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches")
}

/// Affine map `x W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = params.add(format!("{name}.w"), xavier(rng, fan_in, fan_out));
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.fan_in) {
            return Err(Error::Shape {
                op: "linear",
                lhs: shape,
                rhs: vec![self.fan_in, self.fan_out],
            });
        }
        let x2 = if shape.len() == 1 {
            tape.reshape(x, &[1, self.fan_in])?
        } else {
            x
        };
        let y = tape.matmul(x2, bound.var(self.w))?;
        let y = tape.add(y, bound.var(self.b))?;
        if shape.len() == 1 {
            tape.reshape(y, &[self.fan_out])
        } else {
            Ok(y)
        }
    }
}

/// Scale/shift pair of a layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, h: usize) -> Self {
        Self {
            scale: params.add(format!("{name}.scale"), Tensor::full(&[h], T::one())),
            shift: params.add(format!("{name}.shift"), Tensor::zeros(&[h])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(
            x,
            bound.var(self.scale),
            bound.var(self.shift),
            T::lit(LAYER_NORM_EPS),
        )
    }
}

/// Single-head pre-norm transformer block over `[batch, tokens, h]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnBlock {
    pub h: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_attn: LayerNormParams,
    pub norm_ffn: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl AttnBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        h: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            h,
            query: Linear::new(params, &format!("{name}.q"), h, h, rng),
            key: Linear::new(params, &format!("{name}.k"), h, h, rng),
            value: Linear::new(params, &format!("{name}.v"), h, h, rng),
            out: Linear::new(params, &format!("{name}.o"), h, h, rng),
            norm_attn: LayerNormParams::new(params, &format!("{name}.ln1"), h),
            norm_ffn: LayerNormParams::new(params, &format!("{name}.ln2"), h),
            ffn_in: Linear::new(params, &format!("{name}.ff1"), h, FFN_EXPANSION * h, rng),
            ffn_out: Linear::new(params, &format!("{name}.ff2"), FFN_EXPANSION * h, h, rng),
        }
    }

    /// Number of scalars owned by one block of width `h`.
    pub fn param_count(h: usize) -> usize {
        let f = FFN_EXPANSION * h;
        4 * (h * h + h) + 4 * h + (h * f + f) + (f * h + h)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        self.forward_with_weights(tape, bound, x).map(|(y, _)| y)
    }

    /// Runs the block and also returns the `[batch, tokens, tokens]` attention weights.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.h {
            return Err(Error::Shape {
                op: "attention",
                lhs: shape,
                rhs: vec![self.h],
            });
        }
        if shape[1] == 0 {
            return Err(Error::EmptyPopulation("attention over zero tokens"));
        }
        let u = self.norm_attn.forward(tape, bound, x)?;
        let q = self.query.forward(tape, bound, u)?;
        let k = self.key.forward(tape, bound, u)?;
        let v = self.value.forward(tape, bound, u)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, T::one() / T::from_usize_lossy(self.h).sqrt());
        let weights = tape.softmax(scores)?;
        let mixed = tape.matmul(weights, v)?;
        let proj = self.out.forward(tape, bound, mixed)?;
        let x1 = tape.add(x, proj)?;
        let u2 = self.norm_ffn.forward(tape, bound, x1)?;
        let f = self.ffn_in.forward(tape, bound, u2)?;
        let f = tape.gelu(f);
        let f = self.ffn_out.forward(tape, bound, f)?;
        let y = tape.add(x1, f)?;
        Ok((y, weights))
    }
}

/// Sinusoidal encodings `[len, h]`: even columns sine, odd columns cosine.
pub fn positional_encoding<T: Scalar>(len: usize, h: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * h);
    for pos in 0..len {
        for j in 0..h {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / h as f64);
            data.push(T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, h], data).expect("shape matches")
}
