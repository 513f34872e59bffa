//! Reverse-mode gradients against central finite differences, one seeded
//! random case per (op, seed).
//!
//! Each case contracts the op's output with a fixed random weight tensor, so
//! every output element contributes to the scalar being differentiated.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Differentiable tape ops covered by [`check_op`].
pub const OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "add_row_vector",
    "mul_row_vector",
    "linear",
    "gelu",
    "tanh",
    "l2_normalize_rows",
    "softmax_rows",
    "attention",
    "attention_masked",
    "concat_rows",
    "gather_rows",
    "slice_rows",
    "group_mean_rows",
    "sum",
    "mean",
    "mse",
    "cross_entropy",
    "reshape",
    "ada_norm",
];

const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckResult {
    pub op: String,
    pub seed: u64,
    /// `‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖)` maximized over the inputs.
    pub rel_error: f64,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn case(op: &str, rng: &mut Rng) -> Result<(Vec<Tensor>, Build)> {
    let r = 2 + rng.below(3);
    let c = 2 + rng.below(3);
    let k = 2 + rng.below(3);
    let g = |rng: &mut Rng, shape: &[usize]| rng.gaussian(shape, 1.0);
    let out: (Vec<Tensor>, Build) = match op {
        "matmul" => (vec![g(rng, &[r, k]), g(rng, &[k, c])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        "matmul_nt" => (vec![g(rng, &[r, k]), g(rng, &[c, k])], Box::new(|t, v| t.matmul_nt(v[0], v[1]))),
        "add" => (vec![g(rng, &[r, c]), g(rng, &[r, c])], Box::new(|t, v| t.add(v[0], v[1]))),
        "sub" => (vec![g(rng, &[r, c]), g(rng, &[r, c])], Box::new(|t, v| t.sub(v[0], v[1]))),
        "mul" => (vec![g(rng, &[r, c]), g(rng, &[r, c])], Box::new(|t, v| t.mul(v[0], v[1]))),
        "scale" => {
            let s = rng.uniform_range(-2.0, 2.0);
            (vec![g(rng, &[r, c])], Box::new(move |t, v| t.scale(v[0], s)))
        }
        "add_scalar" => {
            let s = rng.uniform_range(-2.0, 2.0);
            (vec![g(rng, &[r, c])], Box::new(move |t, v| t.add_scalar(v[0], s)))
        }
        "add_row_vector" => (vec![g(rng, &[r, c]), g(rng, &[c])], Box::new(|t, v| t.add_row_vector(v[0], v[1]))),
        "mul_row_vector" => (vec![g(rng, &[r, c]), g(rng, &[c])], Box::new(|t, v| t.mul_row_vector(v[0], v[1]))),
        "linear" => (
            vec![g(rng, &[r, k]), g(rng, &[c, k]), g(rng, &[c])],
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
        ),
        "gelu" => (vec![g(rng, &[r, c])], Box::new(|t, v| t.gelu(v[0]))),
        "tanh" => (vec![g(rng, &[r, c])], Box::new(|t, v| t.tanh(v[0]))),
        "l2_normalize_rows" => (vec![g(rng, &[r, c])], Box::new(|t, v| t.l2_normalize_rows(v[0], 1e-6))),
        "softmax_rows" => (vec![g(rng, &[r, c])], Box::new(|t, v| t.softmax_rows(v[0]))),
        "attention" | "attention_masked" => {
            let (batch, heads, tq, tk, d) = (2, 2, 3, 4, 4);
            // Causal-style mask that leaves every query at least one key.
            let mask: Option<Vec<bool>> = (op == "attention_masked")
                .then(|| (0..tq * tk).map(|ij| ij % tk <= ij / tk + 1).collect());
            (
                vec![g(rng, &[batch * tq, d]), g(rng, &[batch * tk, d]), g(rng, &[batch * tk, d])],
                Box::new(move |t, v| t.attention(v[0], v[1], v[2], batch, heads, mask.as_deref())),
            )
        }
        "concat_rows" => (
            vec![g(rng, &[r, c]), g(rng, &[k, c]), g(rng, &[1, c])],
            Box::new(|t, v| t.concat_rows(v)),
        ),
        "gather_rows" => {
            let index: Vec<usize> = (0..r + 2).map(|_| rng.below(r)).collect();
            (vec![g(rng, &[r, c])], Box::new(move |t, v| t.gather_rows(v[0], &index)))
        }
        "slice_rows" => {
            let start = rng.below(r);
            let len = 1 + rng.below(r - start);
            (vec![g(rng, &[r, c])], Box::new(move |t, v| t.slice_rows(v[0], start, len)))
        }
        "group_mean_rows" => (vec![g(rng, &[r * k, c])], Box::new(move |t, v| t.group_mean_rows(v[0], k))),
        "sum" => (vec![g(rng, &[r, c])], Box::new(|t, v| t.sum(v[0]))),
        "mean" => (vec![g(rng, &[r, c])], Box::new(|t, v| t.mean(v[0]))),
        "mse" => (vec![g(rng, &[r, c]), g(rng, &[r, c])], Box::new(|t, v| t.mse(v[0], v[1]))),
        "cross_entropy" => {
            let targets: Vec<usize> = (0..r).map(|_| rng.below(c)).collect();
            (vec![g(rng, &[r, c])], Box::new(move |t, v| t.cross_entropy(v[0], &targets)))
        }
        "reshape" => (vec![g(rng, &[r, c])], Box::new(move |t, v| t.reshape(v[0], &[c, r]))),
        "ada_norm" => (
            vec![g(rng, &[r, c]), g(rng, &[r, c]), g(rng, &[r, c])],
            Box::new(|t, v| crate::encoder::norm(t, v[0], Some((v[1], v[2])))),
        ),
        other => return Err(contract_err!("no gradcheck case for op '{other}'")),
    };
    Ok(out)
}

fn weighted_output(build: &Build, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect::<Result<_>>()?;
    let y = build(&mut t, &vars)?;
    Ok(t.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
}

/// Compares the tape's input gradients with central differences for one
/// random instance of `op`.
pub fn check_op(op: &str, seed: u64) -> Result<GradcheckResult> {
    let mut rng = Rng::with_stream(seed, 0x6c6164);
    let (inputs, build) = case(op, &mut rng)?;

    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect::<Result<_>>()?;
    let y = build(&mut t, &vars)?;
    let weights = rng.gaussian(t.value(y).shape(), 1.0);
    let w = t.constant(weights.clone())?;
    let prod = t.mul(y, w)?;
    let loss = t.sum(prod)?;
    let grads = t.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let ad = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut fd = vec![0.0; inputs[i].numel()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *slot = (weighted_output(&build, &plus, &weights)? - weighted_output(&build, &minus, &weights)?) / (2.0 * FD_STEP);
        }
        let diff: f64 = ad.data().iter().zip(&fd).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
        let na = ad.frobenius_norm();
        let nf = fd.iter().map(|f| f * f).sum::<f64>().sqrt();
        let scale = na.max(nf);
        // Both gradients vanish: only possible for degenerate draws, and then
        // the absolute difference is what matters.
        let rel = if scale < 1e-8 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    Ok(GradcheckResult {
        op: op.to_string(),
        seed,
        rel_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_has_a_case() {
        for op in OPS {
            assert!(check_op(op, 0).is_ok(), "{op}");
        }
        assert!(check_op("nope", 0).is_err());
    }
}
