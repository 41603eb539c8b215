use crate::error::Result;
use crate::tensor::{init::Initializer, Binding, ParamStore, Real, Tape, Var};

use super::{check_heads, check_width, scaled_scores, AttnOutput, Projection};

/// Vanilla multi-head self-attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MhsaParams {
    pub wq: Projection,
    pub wk: Projection,
    pub wv: Projection,
    pub wo: Projection,
    pub width: usize,
    pub heads: usize,
}

impl MhsaParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        heads: usize,
        bias: bool,
        init: &mut Initializer,
    ) -> Result<Self> {
        check_heads(width, heads)?;
        let mut proj = |n: &str| Projection::init(store, &format!("{prefix}.{n}"), width, width, bias, init);
        Ok(MhsaParams {
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
            width,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// `z` stacks `rows / tokens` samples of `tokens` rows each.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, z: Var, tokens: usize) -> Result<AttnOutput> {
        check_width(tape, z, self.width, tokens)?;
        let q = self.wq.apply(tape, b, z)?;
        let k = self.wk.apply(tape, b, z)?;
        let v = self.wv.apply(tape, b, z)?;
        let (h, maps) = self.core(tape, q, k, v, tokens)?;
        let out = self.wo.apply(tape, b, h)?;
        Ok(AttnOutput { out, maps })
    }

    /// Per-head `softmax(q k^T / sqrt(d)) v`, heads concatenated. This is the
    /// part the cost model calls the attention core.
    pub fn core<T: Real>(&self, tape: &mut Tape<T>, q: Var, k: Var, v: Var, tokens: usize) -> Result<(Var, Vec<Var>)> {
        let samples = check_width(tape, q, self.width, tokens)?;
        let d = self.head_dim();
        let mut maps = Vec::with_capacity(samples * self.heads);
        let mut rows = Vec::with_capacity(samples);
        for s in 0..samples {
            let r = s * tokens..(s + 1) * tokens;
            let mut heads = Vec::with_capacity(self.heads);
            for m in 0..self.heads {
                let c = m * d..(m + 1) * d;
                let qh = tape.slice(q, r.clone(), c.clone())?;
                let kh = tape.slice(k, r.clone(), c.clone())?;
                let vh = tape.slice(v, r.clone(), c)?;
                let a = scaled_scores(tape, qh, kh, d)?;
                heads.push(tape.matmul(a, vh)?);
                maps.push(a);
            }
            rows.push(tape.concat_cols(&heads)?);
        }
        Ok((tape.concat_rows(&rows)?, maps))
    }
}
