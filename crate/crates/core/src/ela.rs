//! Bi-space neural landscape analysis.
//!
//! Both populations are embedded per (objective, dimension, individual), then
//! pass through two attention stages. Stage one mixes individuals within each
//! dimension, then dimensions (with positional encodings) within each
//! individual, and pools over dimensions. Stage two mixes individuals, then
//! objectives, and pools over both. Each space yields `h` features; the
//! default mode concatenates them into `2h`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{SurrogatePopulation, TruePopulation};
use crate::scalar::Scalar;
use crate::tensor::{positional_encoding, AttnBlock, Bound, ParamId, ParamSet, Tape, Tensor, Var};

/// Value given to a normalization channel whose observed range is empty.
pub const DEGENERATE_FILL: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElaMode {
    /// Both spaces, `2h` features.
    #[default]
    Bi,
    /// Truly evaluated archive only, `h` features.
    TrueOnly,
    /// Surrogate candidates only, `h` features.
    SurOnly,
}

impl ElaMode {
    pub fn name(self) -> &'static str {
        match self {
            ElaMode::Bi => "bi",
            ElaMode::TrueOnly => "true_only",
            ElaMode::SurOnly => "sur_only",
        }
    }
}

impl fmt::Display for ElaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bi" => Ok(ElaMode::Bi),
            "true_only" => Ok(ElaMode::TrueOnly),
            "sur_only" => Ok(ElaMode::SurOnly),
            _ => Err(Error::config(s, "expected bi, true_only or sur_only")),
        }
    }
}

/// Min-max normalized observations arranged `[m, d, n, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PieTensors<T: Scalar = f64> {
    /// Channels `(x, y)`.
    pub m_true: Tensor<T>,
    /// Channels `(x, mean, std)`.
    pub m_sur: Tensor<T>,
}

/// Scales each column of `rows` to `[0, 1]` by its observed extremes.
fn minmax_columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = rows.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; m]; rows.len()];
    for j in 0..m {
        let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
        for (o, r) in out.iter_mut().zip(rows) {
            o[j] = if hi - lo > 0.0 {
                (r[j] - lo) / (hi - lo)
            } else {
                DEGENERATE_FILL
            };
        }
    }
    out
}

fn bound_scale(x: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lower.iter().zip(upper))
        .map(|(&v, (&lo, &hi))| {
            if hi - lo > 0.0 {
                (v - lo) / (hi - lo)
            } else {
                DEGENERATE_FILL
            }
        })
        .collect()
}

/// Builds `[m, d, n, c]` with `out[o, k, i] = (x[i][k], chans[c-1][i][o]...)`.
fn arrange<T: Scalar>(xs: &[Vec<f64>], chans: &[&[Vec<f64>]], m: usize) -> Tensor<T> {
    let n = xs.len();
    let d = xs[0].len();
    let c = 1 + chans.len();
    let mut data = Vec::with_capacity(m * d * n * c);
    for o in 0..m {
        for k in 0..d {
            for i in 0..n {
                data.push(T::lit(xs[i][k]));
                for ch in chans {
                    data.push(T::lit(ch[i][o]));
                }
            }
        }
    }
    Tensor::new(vec![m, d, n, c], data).expect("shape matches")
}

/// Normalizes and arranges both populations.
pub fn pie<T: Scalar>(
    p_true: &TruePopulation,
    p_sur: &SurrogatePopulation,
    lower: &[f64],
    upper: &[f64],
) -> Result<PieTensors<T>> {
    if p_true.is_empty() || p_sur.is_empty() {
        return Err(Error::EmptyPopulation("landscape analysis needs both populations"));
    }
    let m = p_true.y[0].len();
    let xt: Vec<Vec<f64>> = p_true.x.iter().map(|x| bound_scale(x, lower, upper)).collect();
    let xs: Vec<Vec<f64>> = p_sur.x.iter().map(|x| bound_scale(x, lower, upper)).collect();
    let yt = minmax_columns(&p_true.y);
    let ys = minmax_columns(&p_sur.mean);
    let ss = minmax_columns(&p_sur.std);
    Ok(PieTensors {
        m_true: arrange(&xt, &[&yt], m),
        m_sur: arrange(&xs, &[&ys, &ss], m),
    })
}

/// Attention stages of one space.
#[derive(Clone, Copy, Debug)]
pub struct SpaceEncoder {
    pub embed: ParamId,
    pub stage1_individual: AttnBlock,
    pub stage1_dimension: AttnBlock,
    pub stage2_individual: AttnBlock,
    pub stage2_objective: AttnBlock,
    pub h: usize,
}

impl SpaceEncoder {
    fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        h: usize,
        rng: &mut R,
    ) -> Self {
        let a = (6.0 / (channels + h) as f64).sqrt();
        let w = (0..channels * h).map(|_| T::lit(rng.random_range(-a..a))).collect();
        let embed = params.add(
            format!("{name}.embed"),
            Tensor::new(vec![channels, h], w).expect("shape matches"),
        );
        Self {
            embed,
            stage1_individual: AttnBlock::new(params, &format!("{name}.s1.individual"), h, rng),
            stage1_dimension: AttnBlock::new(params, &format!("{name}.s1.dimension"), h, rng),
            stage2_individual: AttnBlock::new(params, &format!("{name}.s2.individual"), h, rng),
            stage2_objective: AttnBlock::new(params, &format!("{name}.s2.objective"), h, rng),
            h,
        }
    }

    /// `[m, d, n, c] -> [m, d, n, h]`.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, m: &Tensor<T>) -> Result<Var> {
        let x = tape.leaf(m);
        tape.matmul(x, bound.var(self.embed))
    }

    /// `[m, d, n, h] -> [m, n, h]`.
    pub fn stage_one<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        e: Var,
        with_posenc: bool,
    ) -> Result<Var> {
        let s = tape.shape(e).to_vec();
        let (m, d, n, h) = (s[0], s[1], s[2], s[3]);
        let x = tape.reshape(e, &[m * d, n, h])?;
        let x = self.stage1_individual.forward(tape, bound, x)?;
        let x = tape.reshape(x, &[m, d, n, h])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        let mut x = tape.reshape(x, &[m * n, d, h])?;
        if with_posenc {
            let pe = tape.leaf(&positional_encoding::<T>(d, h));
            x = tape.add(x, pe)?;
        }
        let x = self.stage1_dimension.forward(tape, bound, x)?;
        let x = tape.mean_axis(x, 1)?;
        tape.reshape(x, &[m, n, h])
    }

    /// `[m, n, h] -> [h]`.
    pub fn stage_two<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, s: Var) -> Result<Var> {
        let x = self.stage2_individual.forward(tape, bound, s)?;
        let x = tape.permute(x, &[1, 0, 2])?;
        let x = self.stage2_objective.forward(tape, bound, x)?;
        let x = tape.mean_axis(x, 1)?;
        tape.mean_axis(x, 0)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, m: &Tensor<T>) -> Result<Var> {
        let e = self.embed(tape, bound, m)?;
        let s = self.stage_one(tape, bound, e, true)?;
        self.stage_two(tape, bound, s)
    }
}

/// The landscape analyzer. Parameters live in a shared [`ParamSet`].
#[derive(Clone, Copy, Debug)]
pub struct Ela {
    pub h: usize,
    pub mode: ElaMode,
    pub true_space: Option<SpaceEncoder>,
    pub sur_space: Option<SpaceEncoder>,
}

impl Ela {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        h: usize,
        mode: ElaMode,
        rng: &mut R,
    ) -> Self {
        let true_space = (mode != ElaMode::SurOnly).then(|| SpaceEncoder::new(params, "ela.true", 2, h, rng));
        let sur_space = (mode != ElaMode::TrueOnly).then(|| SpaceEncoder::new(params, "ela.sur", 3, h, rng));
        Self {
            h,
            mode,
            true_space,
            sur_space,
        }
    }

    /// Length of the landscape vector.
    pub fn output_dim(&self) -> usize {
        match self.mode {
            ElaMode::Bi => 2 * self.h,
            _ => self.h,
        }
    }

    /// Landscape vector `[output_dim]` from prepared tensors.
    pub fn forward_pie<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, pie: &PieTensors<T>) -> Result<Var> {
        let mut parts = Vec::with_capacity(2);
        if let Some(enc) = &self.true_space {
            parts.push(enc.forward(tape, bound, &pie.m_true)?);
        }
        if let Some(enc) = &self.sur_space {
            parts.push(enc.forward(tape, bound, &pie.m_sur)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(&parts)
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        p_true: &TruePopulation,
        p_sur: &SurrogatePopulation,
        lower: &[f64],
        upper: &[f64],
    ) -> Result<Var> {
        let pie = pie::<T>(p_true, p_sur, lower, upper)?;
        self.forward_pie(tape, bound, &pie)
    }

    /// Forward pass without gradient tracking; returns the landscape vector.
    pub fn landscape<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        p_true: &TruePopulation,
        p_sur: &SurrogatePopulation,
        lower: &[f64],
        upper: &[f64],
    ) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let z = self.forward(&mut tape, &bound, p_true, p_sur, lower, upper)?;
        Ok(tape.value(z).to_vec())
    }
}
