//! Reference attention mechanisms: multi-head self-attention and
//! language-style differential attention, plus the pieces they share with
//! [`crate::vca`].

mod diff;
mod lambda;
mod mhsa;

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, VcaError};
use crate::tensor::{init::Initializer, Binding, ParamId, ParamStore, Real, Tape, Var};

pub use diff::DiffAttnParams;
pub use lambda::{compute_lambda, LambdaParams, DEFAULT_LAMBDA_INIT};
pub use mhsa::MhsaParams;

/// Epsilon of every RMSNorm inside an attention layer.
pub const RMS_EPS: f64 = 1e-5;

/// Standard deviation of the truncated-normal projection init.
pub const PROJ_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Mhsa,
    Diff,
    Vca,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::Mhsa, AttentionKind::Diff, AttentionKind::Vca];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Mhsa => "mhsa",
            AttentionKind::Diff => "diff",
            AttentionKind::Vca => "vca",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = VcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mhsa" => Ok(AttentionKind::Mhsa),
            "diff" => Ok(AttentionKind::Diff),
            "vca" => Ok(AttentionKind::Vca),
            other => Err(VcaError::config(format!(
                "unknown attention kind {other:?} (expected mhsa, diff or vca)"
            ))),
        }
    }
}

/// Output of an attention layer together with the per-sample, per-head
/// attention maps it built (sample-major).
#[derive(Clone, Debug)]
pub struct AttnOutput {
    pub out: Var,
    pub maps: Vec<Var>,
}

/// `x * w (+ bias)`.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match bias {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

pub(crate) fn check_heads(width: usize, heads: usize) -> Result<usize> {
    if heads == 0 || width == 0 || !width.is_multiple_of(heads) {
        return Err(VcaError::config(format!(
            "width {width} must be a positive multiple of heads {heads}"
        )));
    }
    Ok(width / heads)
}

pub(crate) fn check_width<T: Real>(tape: &Tape<T>, z: Var, width: usize, tokens: usize) -> Result<usize> {
    let (rows, cols) = tape.value(z).dims2()?;
    if cols != width || tokens == 0 || rows % tokens != 0 {
        return Err(VcaError::dim("attention input", tape.shape(z), &[tokens, width]));
    }
    Ok(rows / tokens)
}

/// A `C x C` projection (plus optional bias) registered in the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Projection {
    pub(crate) fn init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        rows: usize,
        cols: usize,
        bias: bool,
        init: &mut Initializer,
    ) -> Self {
        let weight = store.add(name, init.trunc_normal(&[rows, cols], PROJ_INIT_STD), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), crate::tensor::Tensor::zeros(&[cols]), true));
        Projection { weight, bias }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        linear(tape, x, b[self.weight], self.bias.map(|id| b[id]))
    }
}

/// Softmax of `a * b^T / sqrt(scale_dim)`.
pub(crate) fn scaled_scores<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, scale_dim: usize) -> Result<Var> {
    let logits = tape.matmul_nt(a, b)?;
    let logits = tape.scale(logits, T::lit(1.0 / (scale_dim as f64).sqrt()))?;
    tape.softmax_rows(logits)
}
