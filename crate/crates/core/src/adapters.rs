//! Parameter-efficient adapters for the frozen visual encoder.
//!
//! * Feature token modulation (FTM): one `(γ, β)` pair of width `D` shared by
//!   every visual token, `F̂ = (1 + γ) ⊙ F + β`, zero-initialised so the
//!   adapted model starts as the base model.
//! * Feature linear adaptation (FLA): `W' = W + B A` on every
//!   transformer-internal linear of the encoder, `A ~ N(0, 0.02²)` (`r × d_in`)
//!   and `B = 0` (`d_out × r`). No `α / r` scaling.
//! * Visual prompt tokens and full-model LoRA as baselines.
//!
//! All adapter parameters live under the `adapter/` namespace, which is the
//! entire trainable set during adaptation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{EncoderConfig, TokenSequence, INIT_STD};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::params::{Binder, ParamStore, ADAPTER_PREFIX};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FTM_GAMMA: &str = "adapter/ftm.gamma";
pub const FTM_BETA: &str = "adapter/ftm.beta";
pub const PROMPT_TOKENS: &str = "adapter/prompt.tokens";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AdapterKind {
    None,
    Ftm,
    Fla { rank: usize },
    Prompt { tokens: usize },
    /// Low-rank updates on every linear of encoder and policy.
    FullLora { rank: usize },
}

impl AdapterKind {
    pub fn is_none(&self) -> bool {
        matches!(self, AdapterKind::None)
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterKind::None => write!(f, "none"),
            AdapterKind::Ftm => write!(f, "ftm"),
            AdapterKind::Fla { rank } => write!(f, "fla-r{rank}"),
            AdapterKind::Prompt { tokens } => write!(f, "prompt-{tokens}"),
            AdapterKind::FullLora { rank } => write!(f, "full-lora-r{rank}"),
        }
    }
}

impl TryFrom<String> for AdapterKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AdapterKind> for String {
    fn from(k: AdapterKind) -> String {
        k.to_string()
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad adapter spec '{s}'")))
        };
        match s {
            "none" => Ok(AdapterKind::None),
            "ftm" => Ok(AdapterKind::Ftm),
            "fla" => Ok(AdapterKind::Fla { rank: 16 }),
            "prompt" => Ok(AdapterKind::Prompt { tokens: 8 }),
            "full-lora" => Ok(AdapterKind::FullLora { rank: 16 }),
            _ => {
                if let Some(r) = s.strip_prefix("fla-r") {
                    Ok(AdapterKind::Fla { rank: num(r)? })
                } else if let Some(r) = s.strip_prefix("full-lora-r") {
                    Ok(AdapterKind::FullLora { rank: num(r)? })
                } else if let Some(n) = s.strip_prefix("prompt-") {
                    Ok(AdapterKind::Prompt { tokens: num(n)? })
                } else {
                    Err(Error::Config(format!("unknown adapter '{s}'")))
                }
            }
        }
    }
}

/// Zero-initialised `(γ, β)`.
pub fn ftm_params(d_model: usize) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(FTM_GAMMA, Tensor::zeros(&[d_model]));
    s.insert(FTM_BETA, Tensor::zeros(&[d_model]));
    s
}

/// `lora_a ~ N(0, 0.02²)`, `lora_b = 0` for each `(layer, d_in, d_out)`.
pub fn lora_params(linears: &[(String, usize, usize)], rank: usize, rng: &mut Rng) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (name, d_in, d_out) in linears {
        if rank == 0 || rank > (*d_in).min(*d_out) {
            return Err(contract_err!(
                "rank {rank} is invalid for {name} ({d_in} -> {d_out})"
            ));
        }
        s.insert(
            format!("{ADAPTER_PREFIX}{name}.lora_a"),
            rng.gaussian(&[rank, *d_in], INIT_STD),
        );
        s.insert(format!("{ADAPTER_PREFIX}{name}.lora_b"), Tensor::zeros(&[*d_out, rank]));
    }
    Ok(s)
}

/// `tokens` learned prompt tokens; zero tokens is the identity adapter.
pub fn prompt_params(tokens: usize, d_model: usize, rng: &mut Rng) -> ParamStore {
    let mut s = ParamStore::new();
    if tokens > 0 {
        s.insert(PROMPT_TOKENS, rng.gaussian(&[tokens, d_model], INIT_STD));
    }
    s
}

/// Closed-form trainable parameter count.
pub fn ftm_param_count(d_model: usize) -> usize {
    2 * d_model
}

pub fn fla_param_count(linears: &[(String, usize, usize)], rank: usize) -> usize {
    linears.iter().map(|(_, i, o)| rank * (i + o)).sum()
}

pub fn fla_param_count_for(cfg: &EncoderConfig, rank: usize) -> usize {
    fla_param_count(&cfg.adaptable_linears(), rank)
}

/// Applies FTM on the tape if its parameters are bound: `x ⊙ (1 + γ) + β`
/// with `γ, β` broadcast over rows.
pub fn apply_ftm(tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
    if !binder.has(FTM_GAMMA) {
        return Ok(x);
    }
    let gamma = binder.get(tape, FTM_GAMMA)?;
    let beta = binder.get(tape, FTM_BETA)?;
    let scale = tape.add_scalar(gamma, 1.0)?;
    let y = tape.mul_row_vector(x, scale)?;
    tape.add_row_vector(y, beta)
}

/// Closed-form FTM on a token sequence (no tape).
#[derive(Clone, Debug, PartialEq)]
pub struct Ftm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Ftm {
    pub fn identity(d_model: usize) -> Self {
        Self {
            gamma: vec![0.0; d_model],
            beta: vec![0.0; d_model],
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            gamma: store.get(FTM_GAMMA)?.data().to_vec(),
            beta: store.get(FTM_BETA)?.data().to_vec(),
        })
    }

    pub fn apply(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        let (n, d) = seq.tokens.dims2();
        if d != self.gamma.len() || d != self.beta.len() {
            return Err(shape_err!("ftm of width {} on tokens of width {d}", self.gamma.len()));
        }
        let mut out = seq.tokens.clone();
        let data = out.data_mut();
        for i in 0..n {
            for j in 0..d {
                let x = &mut data[i * d + j];
                *x = (1.0 + self.gamma[j]) * *x + self.beta[j];
            }
        }
        Ok(TokenSequence { tokens: out })
    }
}

/// `W + B A` for one adapted layer.
pub fn merge_lora(w: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ba = b.matmul(a)?;
    w.add(&ba)
}

/// Folds every low-rank pair in `store` into its base weight and removes the
/// adapter entries; inference through the merged store matches the adapted one.
pub fn merge_all_lora(store: &ParamStore) -> Result<ParamStore> {
    let mut out = store.clone();
    let pairs: Vec<String> = store
        .names()
        .filter_map(|n| n.strip_suffix(".lora_a"))
        .filter_map(|n| n.strip_prefix(ADAPTER_PREFIX))
        .map(str::to_string)
        .collect();
    for layer in pairs {
        let a = store.get(&format!("{ADAPTER_PREFIX}{layer}.lora_a"))?;
        let b = store.get(&format!("{ADAPTER_PREFIX}{layer}.lora_b"))?;
        let w = store.get(&format!("{layer}.weight"))?;
        let merged = merge_lora(w, a, b)?;
        out.insert(format!("{layer}.weight"), merged);
        out.remove(&format!("{ADAPTER_PREFIX}{layer}.lora_a"));
        out.remove(&format!("{ADAPTER_PREFIX}{layer}.lora_b"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_roundtrips_through_strings() {
        for k in [
            AdapterKind::None,
            AdapterKind::Ftm,
            AdapterKind::Fla { rank: 8 },
            AdapterKind::Prompt { tokens: 4 },
            AdapterKind::FullLora { rank: 16 },
        ] {
            assert_eq!(k.to_string().parse::<AdapterKind>().unwrap(), k);
        }
        assert!("fla-rx".parse::<AdapterKind>().is_err());
    }

    #[test]
    fn ftm_identity_and_affine_example() {
        let seq = TokenSequence {
            tokens: Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap(),
        };
        assert!(Ftm::identity(2).apply(&seq).unwrap().tokens.bit_eq(&seq.tokens));
        let f = Ftm {
            gamma: vec![1.0, -0.5],
            beta: vec![0.5, 0.0],
        };
        let out = f.apply(&seq).unwrap();
        assert_eq!(out.tokens.data(), &[2.5, 1.0, -1.5, 0.25]);
    }

    #[test]
    fn counts() {
        assert_eq!(ftm_param_count(2048), 4096);
        let l = vec![("x".to_string(), 64, 64)];
        assert_eq!(fla_param_count(&l, 8), 1024);
    }

    #[test]
    fn rank_bounds() {
        let l = vec![("x".to_string(), 4, 6)];
        assert!(lora_params(&l, 5, &mut Rng::new(0)).is_err());
        assert!(lora_params(&l, 0, &mut Rng::new(0)).is_err());
        let s = lora_params(&l, 4, &mut Rng::new(0)).unwrap();
        assert_eq!(s.get("adapter/x.lora_a").unwrap().shape(), &[4, 4]);
        assert_eq!(s.get("adapter/x.lora_b").unwrap().shape(), &[6, 4]);
    }
}
