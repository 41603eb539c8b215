//! Scalar-loop reference implementations over `Vec<Vec<f64>>`. Nothing here
//! calls the library's tensor kernels; the store is only read for parameter
//! values.

#![allow(dead_code)]

use vca::tensor::{ParamStore, Tensor};
use vca::vca::{StageKind, StreamSource, VcaAblationFlags, VcaGrid};

pub type Mat = Vec<Vec<f64>>;

pub const RMS_EPS: f64 = 1e-5;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Mat {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = store.get(id);
    if t.rank() == 1 {
        vec![t.data().to_vec()]
    } else {
        let c = *t.shape().last().unwrap();
        t.data().chunks(c).map(|r| r.to_vec()).collect()
    }
}

pub fn vector(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store
        .get(store.find(name).unwrap_or_else(|| panic!("no parameter {name}")))
        .data()
        .to_vec()
}

/// `x W (+ b)` for a stored projection.
pub fn linear(x: &Mat, store: &ParamStore<f64>, name: &str) -> Mat {
    let w = param(store, name);
    let bias = store
        .find(&format!("{name}.bias"))
        .map(|id| store.get(id).data().to_vec());
    let mut out = vec![vec![0.0; w[0].len()]; x.len()];
    for i in 0..x.len() {
        for j in 0..w[0].len() {
            let mut acc = bias.as_ref().map_or(0.0, |b| b[j]);
            for k in 0..w.len() {
                acc += x[i][k] * w[k][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn cols(x: &Mat, from: usize, to: usize) -> Mat {
    x.iter().map(|r| r[from..to].to_vec()).collect()
}

pub fn rows(x: &Mat, from: usize, to: usize) -> Mat {
    x[from..to].to_vec()
}

/// `softmax(a b^T / sqrt(scale))`, row by row.
pub fn attn_map(a: &Mat, b: &Mat, scale: f64) -> Mat {
    let mut out = Vec::with_capacity(a.len());
    for ar in a {
        let mut logits = Vec::with_capacity(b.len());
        for br in b {
            let mut s = 0.0;
            for k in 0..ar.len() {
                s += ar[k] * br[k];
            }
            logits.push(s / scale.sqrt());
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.push(e.iter().map(|v| v / z).collect());
    }
    out
}

/// `p v`
pub fn apply_map(p: &Mat, v: &Mat) -> Mat {
    let d = v[0].len();
    let mut out = vec![vec![0.0; d]; p.len()];
    for i in 0..p.len() {
        for j in 0..v.len() {
            for c in 0..d {
                out[i][c] += p[i][j] * v[j][c];
            }
        }
    }
    out
}

pub fn rmsnorm(x: &Mat, gain: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let ms = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
            let s = 1.0 / (ms + RMS_EPS).sqrt();
            r.iter().zip(gain).map(|(v, g)| g * v * s).collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| gamma[j] * (v - mean) / (var + eps).sqrt() + beta[j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn combine(a: &Mat, b: &Mat, wb: f64) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + wb * y).collect())
        .collect()
}

pub fn scaled(a: &Mat, s: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

pub fn hconcat(parts: &[Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().cloned()).collect())
        .collect()
}

/// `exp(lq1 . lk1) - exp(lq2 . lk2) + lambda_init`
pub fn lambda(store: &ParamStore<f64>, prefix: &str) -> (f64, f64) {
    let dot = |a: &str, b: &str| {
        let (x, y) = (
            vector(store, &format!("{prefix}.{a}")),
            vector(store, &format!("{prefix}.{b}")),
        );
        x.iter().zip(&y).map(|(p, q)| p * q).sum::<f64>()
    };
    let init = vector(store, &format!("{prefix}.lambda_init"))[0];
    (dot("lq1", "lk1").exp() - dot("lq2", "lk2").exp() + init, init)
}

pub fn mhsa(store: &ParamStore<f64>, prefix: &str, z: &Mat, tokens: usize, heads: usize) -> Mat {
    let q = linear(z, store, &format!("{prefix}.wq"));
    let k = linear(z, store, &format!("{prefix}.wk"));
    let v = linear(z, store, &format!("{prefix}.wv"));
    let d = q[0].len() / heads;
    let mut out = Vec::new();
    for s in 0..z.len() / tokens {
        let (r0, r1) = (s * tokens, (s + 1) * tokens);
        let hs: Vec<Mat> = (0..heads)
            .map(|m| {
                let (c0, c1) = (m * d, (m + 1) * d);
                let p = attn_map(
                    &cols(&rows(&q, r0, r1), c0, c1),
                    &cols(&rows(&k, r0, r1), c0, c1),
                    d as f64,
                );
                apply_map(&p, &cols(&rows(&v, r0, r1), c0, c1))
            })
            .collect();
        out.extend(hconcat(&hs));
    }
    linear(&out, store, &format!("{prefix}.wo"))
}

pub fn diff(store: &ParamStore<f64>, prefix: &str, z: &Mat, tokens: usize, heads: usize) -> Mat {
    let p = |n: &str| linear(z, store, &format!("{prefix}.{n}"));
    let (q1, q2, k1, k2, v) = (p("wq1"), p("wq2"), p("wk1"), p("wk2"), p("wv"));
    let (lam, init) = lambda(store, &format!("{prefix}.lambda"));
    let gain = vector(store, &format!("{prefix}.rms_gain"));
    let d = v[0].len() / heads;
    let half = d / 2;
    let mut out = Vec::new();
    for s in 0..z.len() / tokens {
        let (r0, r1) = (s * tokens, (s + 1) * tokens);
        let hs: Vec<Mat> = (0..heads)
            .map(|m| {
                let sl = |x: &Mat| cols(&rows(x, r0, r1), m * half, (m + 1) * half);
                let a1 = attn_map(&sl(&q1), &sl(&k1), half as f64);
                let a2 = attn_map(&sl(&q2), &sl(&k2), half as f64);
                let a = combine(&a1, &a2, -lam);
                let h = apply_map(&a, &cols(&rows(&v, r0, r1), m * d, (m + 1) * d));
                scaled(&rmsnorm(&h, &gain), 1.0 - init)
            })
            .collect();
        out.extend(hconcat(&hs));
    }
    linear(&out, store, &format!("{prefix}.wo"))
}

/// Mean of each `H/h x W/w` window of an `(H*W) x d` field, cells row-major.
pub fn pool(q: &Mat, grid: &VcaGrid) -> Mat {
    let (kh, kw) = (grid.height / grid.pool_h, grid.width / grid.pool_w);
    let d = q[0].len();
    let mut out = vec![vec![0.0; d]; grid.pool_h * grid.pool_w];
    for r in 0..grid.height {
        for c in 0..grid.width {
            let cell = (r / kh) * grid.pool_w + c / kw;
            for j in 0..d {
                out[cell][j] += q[r * grid.width + c][j] / (kh * kw) as f64;
            }
        }
    }
    out
}

fn stream(source: StreamSource, pooled: &Mat, emb: &Mat) -> Mat {
    match source {
        StreamSource::Emb => emb.clone(),
        StreamSource::Pool => pooled.clone(),
        StreamSource::PoolEmb => combine(pooled, emb, 1.0),
    }
}

pub struct StageParams {
    pub lambda: f64,
    pub lambda_init: f64,
    pub gain: Vec<f64>,
}

pub fn stage1(t_pos: &Mat, t_neg: &Mat, k: &Mat, v: &Mat, p: &StageParams, kind: StageKind) -> Mat {
    let d = k[0].len() as f64;
    let v_pos = apply_map(&attn_map(t_pos, k, d), v);
    if kind == StageKind::Vanilla {
        return v_pos;
    }
    let v_neg = apply_map(&attn_map(t_neg, k, d), v);
    scaled(
        &rmsnorm(&combine(&v_pos, &v_neg, -p.lambda), &p.gain),
        1.0 - p.lambda_init,
    )
}

pub fn stage2(q: &Mat, t_pos: &Mat, t_neg: &Mat, v_hat: &Mat, p: &StageParams, kind: StageKind) -> Mat {
    let d = q[0].len() as f64;
    let a1 = attn_map(q, t_pos, d);
    if kind == StageKind::Vanilla {
        return apply_map(&a1, v_hat);
    }
    let a2 = attn_map(q, t_neg, d);
    let a = combine(&a1, &a2, -p.lambda);
    scaled(&rmsnorm(&apply_map(&a, v_hat), &p.gain), 1.0 - p.lambda_init)
}

pub fn stage_params(store: &ParamStore<f64>, prefix: &str, which: usize) -> StageParams {
    let (lambda, lambda_init) = lambda(store, &format!("{prefix}.lambda{which}"));
    StageParams {
        lambda,
        lambda_init,
        gain: vector(store, &format!("{prefix}.rms_gain{which}")),
    }
}

/// Embedding `[h, w, d]` as `n x d` rows, cells row-major.
pub fn embedding(store: &ParamStore<f64>, name: &str) -> Mat {
    let t = store.get(store.find(name).unwrap());
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(|r| r.to_vec()).collect()
}

pub fn vca(
    store: &ParamStore<f64>,
    prefix: &str,
    z: &Mat,
    heads: usize,
    grid: &VcaGrid,
    flags: &VcaAblationFlags,
) -> Mat {
    let tokens = grid.height * grid.width;
    let q = linear(z, store, &format!("{prefix}.wq"));
    let k = linear(z, store, &format!("{prefix}.wk"));
    let v = linear(z, store, &format!("{prefix}.wv"));
    let e_pos = embedding(store, &format!("{prefix}.e_pos"));
    let e_neg = embedding(store, &format!("{prefix}.e_neg"));
    let p1 = stage_params(store, prefix, 1);
    let p2 = stage_params(store, prefix, 2);
    let d = q[0].len() / heads;
    let mut out = Vec::new();
    for s in 0..z.len() / tokens {
        let (r0, r1) = (s * tokens, (s + 1) * tokens);
        let hs: Vec<Mat> = (0..heads)
            .map(|m| {
                let sl = |x: &Mat| cols(&rows(x, r0, r1), m * d, (m + 1) * d);
                let (qh, kh, vh) = (sl(&q), sl(&k), sl(&v));
                let pooled = pool(&qh, grid);
                let t_pos = stream(flags.pos_stream, &pooled, &e_pos);
                let t_neg = stream(flags.neg_stream, &pooled, &e_neg);
                let v_hat = stage1(&t_pos, &t_neg, &kh, &vh, &p1, flags.stage1);
                stage2(&qh, &t_pos, &t_neg, &v_hat, &p2, flags.stage2)
            })
            .collect();
        out.extend(hconcat(&hs));
    }
    linear(&out, store, &format!("{prefix}.wo"))
}

/// VCA output when both streams carry the same embedding, written in the
/// reduced single-stream form:
/// `v1 = (1 - li1) rmsnorm((1 - l1) softmax(t k^T) v)`,
/// `h = (1 - li2) rmsnorm((1 - l2) softmax(q t^T) v1)`.
pub fn vca_single_stream(store: &ParamStore<f64>, prefix: &str, z: &Mat, heads: usize, grid: &VcaGrid) -> Mat {
    let tokens = grid.height * grid.width;
    let q = linear(z, store, &format!("{prefix}.wq"));
    let k = linear(z, store, &format!("{prefix}.wk"));
    let v = linear(z, store, &format!("{prefix}.wv"));
    let e = embedding(store, &format!("{prefix}.e_pos"));
    let p1 = stage_params(store, prefix, 1);
    let p2 = stage_params(store, prefix, 2);
    let d = q[0].len() / heads;
    let mut out = Vec::new();
    for s in 0..z.len() / tokens {
        let (r0, r1) = (s * tokens, (s + 1) * tokens);
        let hs: Vec<Mat> = (0..heads)
            .map(|m| {
                let sl = |x: &Mat| cols(&rows(x, r0, r1), m * d, (m + 1) * d);
                let (qh, kh, vh) = (sl(&q), sl(&k), sl(&v));
                let t = combine(&pool(&qh, grid), &e, 1.0);
                let v_plus = apply_map(&attn_map(&t, &kh, d as f64), &vh);
                let v1 = scaled(
                    &rmsnorm(&scaled(&v_plus, 1.0 - p1.lambda), &p1.gain),
                    1.0 - p1.lambda_init,
                );
                let a1 = attn_map(&qh, &t, d as f64);
                let h = apply_map(&a1, &v1);
                scaled(&rmsnorm(&scaled(&h, 1.0 - p2.lambda), &p2.gain), 1.0 - p2.lambda_init)
            })
            .collect();
        out.extend(hconcat(&hs));
    }
    linear(&out, store, &format!("{prefix}.wo"))
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub const LN_EPS: f64 = 1e-6;

/// Pre-norm block: `z + attn(LN1 z)`, then `+ fc2(gelu(fc1(LN2 .)))`.
pub fn block(store: &ParamStore<f64>, prefix: &str, z: &Mat, attn: impl Fn(&Mat) -> Mat) -> Mat {
    let ln = |x: &Mat, n: &str| {
        layer_norm(
            x,
            &vector(store, &format!("{prefix}.{n}.gamma")),
            &vector(store, &format!("{prefix}.{n}.beta")),
            LN_EPS,
        )
    };
    let z1 = combine(z, &attn(&ln(z, "ln1")), 1.0);
    let h: Mat = linear(&ln(&z1, "ln2"), store, &format!("{prefix}.mlp.fc1"))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    combine(&z1, &linear(&h, store, &format!("{prefix}.mlp.fc2")), 1.0)
}
