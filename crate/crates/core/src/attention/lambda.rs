use crate::error::{Result, VcaError};
use crate::tensor::{init::Initializer, Binding, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const DEFAULT_LAMBDA_INIT: f64 = 0.8;

/// Standard deviation of the zero-mean normal init of the four vectors.
pub const LAMBDA_INIT_STD: f64 = 0.1;

/// Re-parameterised subtraction weight
/// `exp(q1 . k1) - exp(q2 . k2) + lambda_init`.
///
/// `lambda_init` is stored as an untrainable one-element buffer so it shows
/// up in checkpoints and parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LambdaParams {
    pub lambda_init: ParamId,
    pub lq1: ParamId,
    pub lk1: ParamId,
    pub lq2: ParamId,
    pub lk2: ParamId,
}

impl LambdaParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        lambda_init: f64,
        init: &mut Initializer,
    ) -> Self {
        let lambda_init = store.add(
            format!("{prefix}.lambda_init"),
            Tensor::scalar(T::lit(lambda_init)),
            false,
        );
        let mut vec = |name: &str| store.add(format!("{prefix}.{name}"), init.normal(&[dim], LAMBDA_INIT_STD), true);
        let lq1 = vec("lq1");
        let lk1 = vec("lk1");
        let lq2 = vec("lq2");
        let lk2 = vec("lk2");
        LambdaParams {
            lambda_init,
            lq1,
            lk1,
            lq2,
            lk2,
        }
    }

    pub fn vectors(&self) -> [ParamId; 4] {
        [self.lq1, self.lk1, self.lq2, self.lk2]
    }

    pub fn lambda_init_value<T: Real>(&self, tape: &Tape<T>, b: &Binding) -> T {
        tape.value(b[self.lambda_init]).item()
    }

    /// Scalar count of the four vectors plus the init scalar.
    pub fn scalar_count<T: Real>(&self, store: &ParamStore<T>) -> usize {
        1 + self.vectors().iter().map(|&id| store.get(id).len()).sum::<usize>()
    }
}

/// Effective λ as a differentiable one-element var.
pub fn compute_lambda<T: Real>(tape: &mut Tape<T>, b: &Binding, lp: &LambdaParams) -> Result<Var> {
    let [q1, k1, q2, k2] = lp.vectors().map(|id| b[id]);
    let d = tape.value(q1).len();
    for v in [k1, q2, k2] {
        if tape.value(v).len() != d {
            return Err(VcaError::dim("compute_lambda", tape.shape(q1), tape.shape(v)));
        }
    }
    let d1 = tape.dot(q1, k1)?;
    let e1 = tape.exp(d1)?;
    let d2 = tape.dot(q2, k2)?;
    let e2 = tape.exp(d2)?;
    let diff = tape.sub(e1, e2)?;
    tape.add(diff, b[lp.lambda_init])
}
