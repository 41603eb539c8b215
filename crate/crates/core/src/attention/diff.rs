use crate::error::{Result, VcaError};
use crate::tensor::{init::Initializer, Binding, ParamId, ParamStore, Real, Tape, Tensor, Var};

use super::{check_heads, check_width, compute_lambda, scaled_scores, LambdaParams, Projection, RMS_EPS};

/// Differential attention: two softmax maps per head, subtracted with a
/// learned weight, then RMS-normalised and scaled by `1 - lambda_init`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiffAttnParams {
    pub wq1: Projection,
    pub wq2: Projection,
    pub wk1: Projection,
    pub wk2: Projection,
    pub wv: Projection,
    pub wo: Projection,
    pub lambda: LambdaParams,
    pub rms_gain: ParamId,
    pub width: usize,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DiffHeadTrace {
    pub a1: Var,
    pub a2: Var,
    pub a: Var,
}

#[derive(Clone, Debug)]
pub struct DiffOutput {
    pub out: Var,
    pub lambda: Var,
    /// Sample-major, then head.
    pub heads: Vec<DiffHeadTrace>,
}

impl DiffAttnParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        heads: usize,
        bias: bool,
        lambda_init: f64,
        init: &mut Initializer,
    ) -> Result<Self> {
        let d = check_heads(width, heads)?;
        if d % 2 != 0 {
            return Err(VcaError::config(format!(
                "differential attention needs an even head dim, got {d}"
            )));
        }
        let half = width / 2;
        let mut proj =
            |n: &str, cols: usize| Projection::init(store, &format!("{prefix}.{n}"), width, cols, bias, init);
        let wq1 = proj("wq1", half);
        let wq2 = proj("wq2", half);
        let wk1 = proj("wk1", half);
        let wk2 = proj("wk2", half);
        let wv = proj("wv", width);
        let wo = proj("wo", width);
        let lambda = LambdaParams::init(store, &format!("{prefix}.lambda"), d, lambda_init, init);
        let rms_gain = store.add(format!("{prefix}.rms_gain"), Tensor::ones(&[d]), true);
        Ok(DiffAttnParams {
            wq1,
            wq2,
            wk1,
            wk2,
            wv,
            wo,
            lambda,
            rms_gain,
            width,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, z: Var, tokens: usize) -> Result<DiffOutput> {
        check_width(tape, z, self.width, tokens)?;
        let q1 = self.wq1.apply(tape, b, z)?;
        let q2 = self.wq2.apply(tape, b, z)?;
        let k1 = self.wk1.apply(tape, b, z)?;
        let k2 = self.wk2.apply(tape, b, z)?;
        let v = self.wv.apply(tape, b, z)?;
        let (h, mut output) = self.core(tape, b, [q1, q2, k1, k2], v, tokens)?;
        output.out = self.wo.apply(tape, b, h)?;
        Ok(output)
    }

    /// Both maps, their difference, the value product and the head norm for
    /// every head; `qk` is `[q1, q2, k1, k2]`. Returns the concatenated heads.
    pub fn core<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Binding,
        qk: [Var; 4],
        v: Var,
        tokens: usize,
    ) -> Result<(Var, DiffOutput)> {
        let [q1, q2, k1, k2] = qk;
        let samples = check_width(tape, v, self.width, tokens)?;
        let lambda = compute_lambda(tape, b, &self.lambda)?;
        let out_scale = T::one() - self.lambda.lambda_init_value(tape, b);
        let gain = b[self.rms_gain];

        let d = self.head_dim();
        let half = d / 2;
        let mut traces = Vec::with_capacity(samples * self.heads);
        let mut rows = Vec::with_capacity(samples);
        for s in 0..samples {
            let r = s * tokens..(s + 1) * tokens;
            let mut heads = Vec::with_capacity(self.heads);
            for m in 0..self.heads {
                let qk_cols = m * half..(m + 1) * half;
                let q1h = tape.slice(q1, r.clone(), qk_cols.clone())?;
                let k1h = tape.slice(k1, r.clone(), qk_cols.clone())?;
                let q2h = tape.slice(q2, r.clone(), qk_cols.clone())?;
                let k2h = tape.slice(k2, r.clone(), qk_cols)?;
                let vh = tape.slice(v, r.clone(), m * d..(m + 1) * d)?;

                let a1 = scaled_scores(tape, q1h, k1h, half)?;
                let a2 = scaled_scores(tape, q2h, k2h, half)?;
                let weighted = tape.scale_by(a2, lambda)?;
                let a = tape.sub(a1, weighted)?;
                let h_hat = tape.matmul(a, vh)?;
                let normed = tape.rmsnorm(h_hat, gain, T::lit(RMS_EPS))?;
                heads.push(tape.scale(normed, out_scale)?);
                traces.push(DiffHeadTrace { a1, a2, a });
            }
            rows.push(tape.concat_cols(&heads)?);
        }
        let h = tape.concat_rows(&rows)?;
        Ok((
            h,
            DiffOutput {
                out: h,
                lambda,
                heads: traces,
            },
        ))
    }
}
