//! Tiny vision transformer: patchify → linear patch embedding → learned
//! absolute positions → pre-norm transformer blocks with bidirectional
//! attention.
//!
//! Block normalization is the per-token L2 normalization `x / ‖x‖₂`, the same
//! definition the action expert's timestep-modulated norm uses. Every linear
//! layer goes through [`linear_layer`], which also applies a low-rank update
//! when a matching `adapter/<layer>.lora_a` / `lora_b` pair is present.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::params::{Binder, ParamStore, ADAPTER_PREFIX};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Embeddings, positions and conditioning tables.
pub const INIT_STD: f64 = 0.02;
/// Block inputs are unit-norm rows, so projections reading them need O(1)
/// weights for O(1) outputs.
pub const NORMED_INPUT_STD: f64 = 1.0;
/// Guard used inside the network; exact `x/‖x‖` is available via
/// [`Tape::l2_normalize_rows`] with `eps = 0`.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    /// Width of the full-scale visual backbone; used for parameter accounting only.
    pub fn full_scale() -> Self {
        Self {
            d_model: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(contract_err!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size,
                self.patch_size
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(contract_err!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model,
                self.n_heads
            ));
        }
        if self.mlp_ratio == 0 || self.d_model == 0 {
            return Err(contract_err!("d_model and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    /// `(name, d_in, d_out)` of every transformer-internal linear layer, the
    /// set wrapped by low-rank adaptation. The patch projection is excluded.
    pub fn adaptable_linears(&self) -> Vec<(String, usize, usize)> {
        let d = self.d_model;
        let h = self.hidden();
        let mut out = Vec::new();
        for i in 0..self.n_layers {
            for p in ["q", "k", "v", "out"] {
                out.push((format!("encoder/blocks.{i}.attn.{p}"), d, d));
            }
            out.push((format!("encoder/blocks.{i}.mlp.up"), d, h));
            out.push((format!("encoder/blocks.{i}.mlp.down"), h, d));
        }
        out
    }
}

/// Visual token sequence `N × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
}

impl TokenSequence {
    pub fn n_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    /// Mean over tokens, `1 × D`.
    pub fn mean_pooled(&self) -> Vec<f64> {
        let (n, d) = self.tokens.dims2();
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, x) in out.iter_mut().zip(self.tokens.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        out
    }
}

fn check_image(image: &Tensor, cfg: &EncoderConfig) -> Result<()> {
    let s = cfg.image_size;
    if image.shape() != [s, s, 3] {
        return Err(shape_err!(
            "image of shape {:?}, encoder expects [{s}, {s}, 3]",
            image.shape()
        ));
    }
    Ok(())
}

/// Splits an `H × W × 3` image into raster-ordered flattened patches
/// (`N × 3·patch²`, each row in `(row, col, channel)` order).
pub fn patchify(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_image(image, cfg)?;
    let s = cfg.image_size;
    let p = cfg.patch_size;
    let g = s / p;
    let mut out = Vec::with_capacity(cfg.n_tokens() * cfg.patch_dim());
    let px = image.data();
    for gy in 0..g {
        for gx in 0..g {
            for y in 0..p {
                let row = (gy * p + y) * s;
                let start = (row + gx * p) * 3;
                out.extend_from_slice(&px[start..start + p * 3]);
            }
        }
    }
    Tensor::new(&[cfg.n_tokens(), cfg.patch_dim()], out)
}

/// Subtracts each patch's per-channel mean in place, so flat regions embed
/// to their position alone and objects dominate the content term.
pub fn center_patches(rows: &mut [f64], patch_dim: usize) {
    for patch in rows.chunks_mut(patch_dim) {
        for ch in 0..3 {
            let n = (patch.len() / 3) as f64;
            let mean = patch.iter().skip(ch).step_by(3).sum::<f64>() / n;
            patch.iter_mut().skip(ch).step_by(3).for_each(|v| *v -= mean);
        }
    }
}

pub fn init_params(cfg: &EncoderConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let d = cfg.d_model;
    s.insert("encoder/patch.weight", rng.gaussian(&[d, cfg.patch_dim()], PATCH_STD));
    s.insert("encoder/patch.bias", Tensor::zeros(&[d]));
    s.insert("encoder/pos", sinusoid_positions(cfg));
    for (name, d_in, d_out) in cfg.adaptable_linears() {
        s.insert(format!("{name}.weight"), rng.gaussian(&[d_out, d_in], block_weight_std(&name, d_in)));
        s.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]));
    }
    Ok(s)
}

/// Patch-embedding init; centered patches are sparse, so this is larger than
/// [`INIT_STD`] to keep content on the scale of the positions.
pub const PATCH_STD: f64 = 0.2;

/// Amplitude of the initial positional table, comparable to a patch embedding
/// so normalized tokens still say where they came from.
pub const POS_AMPLITUDE: f64 = 0.2;

/// 2-D sinusoidal table over the patch grid (row features, then column
/// features), used as the init of the learned positions.
pub fn sinusoid_positions(cfg: &EncoderConfig) -> Tensor {
    let g = cfg.image_size / cfg.patch_size;
    let d = cfg.d_model;
    let per_axis = d / 2;
    let mut out = Tensor::zeros(&[g * g, d]);
    for r in 0..g {
        for c in 0..g {
            for j in 0..d {
                let (coord, k) = if j < per_axis { (r, j) } else { (c, j - per_axis) };
                let freq = std::f64::consts::PI * (1 + k / 2) as f64 / g as f64;
                let phase = coord as f64 * freq;
                let v = if k % 2 == 0 { phase.sin() } else { phase.cos() };
                out.set2(r * g + c, j, POS_AMPLITUDE * v);
            }
        }
    }
    out
}

/// Init std of a transformer-block linear. Projections back into the
/// residual stream start small so tokens keep their identity through depth.
pub(crate) fn block_weight_std(name: &str, _d_in: usize) -> f64 {
    if name.ends_with(".attn.out") || name.ends_with(".mlp.down") {
        INIT_STD
    } else {
        NORMED_INPUT_STD
    }
}

/// `x Wᵀ + b`, plus `(x Aᵀ) Bᵀ` when a low-rank adapter is attached to `name`.
pub fn linear_layer(tape: &mut Tape, binder: &mut Binder, name: &str, x: Var) -> Result<Var> {
    let w = binder.get(tape, &format!("{name}.weight"))?;
    let b = binder.get(tape, &format!("{name}.bias"))?;
    let y = tape.linear(x, w, Some(b))?;
    let a_name = format!("{ADAPTER_PREFIX}{name}.lora_a");
    if !binder.has(&a_name) {
        return Ok(y);
    }
    let a = binder.get(tape, &a_name)?;
    let bb = binder.get(tape, &format!("{ADAPTER_PREFIX}{name}.lora_b"))?;
    let low = tape.matmul_nt(x, a)?;
    let delta = tape.matmul_nt(low, bb)?;
    tape.add(y, delta)
}

/// Standard pre-norm transformer block shared by encoder and policy.
/// `modulation` supplies per-row `(γ, β)` for each of the two norms.
pub(crate) struct BlockSpec<'a> {
    pub prefix: &'a str,
    pub batch: usize,
    pub heads: usize,
    pub mask: Option<&'a [bool]>,
    pub modulation: Option<[(Var, Var); 2]>,
}

pub(crate) fn transformer_block(
    tape: &mut Tape,
    binder: &mut Binder,
    spec: &BlockSpec,
    x: Var,
) -> Result<Var> {
    let p = spec.prefix;
    let h = norm(tape, x, spec.modulation.map(|m| m[0]))?;
    let q = linear_layer(tape, binder, &format!("{p}.attn.q"), h)?;
    let k = linear_layer(tape, binder, &format!("{p}.attn.k"), h)?;
    let v = linear_layer(tape, binder, &format!("{p}.attn.v"), h)?;
    let a = tape.attention(q, k, v, spec.batch, spec.heads, spec.mask)?;
    let o = linear_layer(tape, binder, &format!("{p}.attn.out"), a)?;
    let x = tape.add(x, o)?;
    let h = norm(tape, x, spec.modulation.map(|m| m[1]))?;
    let up = linear_layer(tape, binder, &format!("{p}.mlp.up"), h)?;
    let act = tape.gelu(up)?;
    let down = linear_layer(tape, binder, &format!("{p}.mlp.down"), act)?;
    tape.add(x, down)
}

/// `x/‖x‖` per row, then `y ⊙ (1 + γ) + β` when row-wise modulation is given.
pub(crate) fn norm(tape: &mut Tape, x: Var, modulation: Option<(Var, Var)>) -> Result<Var> {
    let y = tape.l2_normalize_rows(x, NORM_EPS)?;
    match modulation {
        None => Ok(y),
        Some((gamma, beta)) => {
            let yg = tape.mul(y, gamma)?;
            let s = tape.add(y, yg)?;
            tape.add(s, beta)
        }
    }
}

/// Patch embedding of a batch, `(B·N) × D`, optionally with positions added.
pub fn patch_embed(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &EncoderConfig,
    images: &[&Tensor],
    with_positions: bool,
) -> Result<Var> {
    if images.is_empty() {
        return Err(contract_err!("encode called with no images"));
    }
    let mut rows = Vec::with_capacity(images.len() * cfg.n_tokens() * cfg.patch_dim());
    for img in images {
        rows.extend_from_slice(patchify(img, cfg)?.data());
    }
    center_patches(&mut rows, cfg.patch_dim());
    let n = cfg.n_tokens();
    let patches = tape.constant(Tensor::new(&[images.len() * n, cfg.patch_dim()], rows)?)?;
    let w = binder.get(tape, "encoder/patch.weight")?;
    let b = binder.get(tape, "encoder/patch.bias")?;
    let x = tape.linear(patches, w, Some(b))?;
    if !with_positions {
        return Ok(x);
    }
    let pos = binder.get(tape, "encoder/pos")?;
    let index: Vec<usize> = (0..images.len()).flat_map(|_| 0..n).collect();
    let pos_rows = tape.gather_rows(pos, &index)?;
    tape.add(x, pos_rows)
}

/// Encodes a batch of images to stacked token sequences, `(B·N) × D`.
pub fn encode_batch(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &EncoderConfig,
    images: &[&Tensor],
) -> Result<Var> {
    cfg.validate()?;
    let mut x = patch_embed(tape, binder, cfg, images, true)
        .map_err(|e| layer_error("encoder patch embedding", e))?;
    for i in 0..cfg.n_layers {
        let prefix = format!("encoder/blocks.{i}");
        let spec = BlockSpec {
            prefix: &prefix,
            batch: images.len(),
            heads: cfg.n_heads,
            mask: None,
            modulation: None,
        };
        x = transformer_block(tape, binder, &spec, x).map_err(|e| layer_error(&prefix, e))?;
    }
    Ok(x)
}

pub(crate) fn layer_error(layer: &str, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{layer}: {m}")),
        other => other,
    }
}

/// Gradient-free encoding of one image with whatever adapters `params` holds.
pub fn encode(image: &Tensor, cfg: &EncoderConfig, params: &ParamStore) -> Result<TokenSequence> {
    let frozen = |_: &str| false;
    let mut binder = Binder::new(params, &frozen);
    let mut tape = Tape::new();
    let x = encode_batch(&mut tape, &mut binder, cfg, &[image])?;
    Ok(TokenSequence {
        tokens: tape.value(x).clone(),
    })
}

/// Per-dimension mean over every token of every sequence.
pub fn mean_token(dataset: &[TokenSequence]) -> Result<Tensor> {
    let first = dataset
        .first()
        .ok_or_else(|| contract_err!("mean_token of an empty dataset"))?;
    let d = first.width();
    let mut acc = vec![0.0; d];
    let mut count = 0usize;
    for seq in dataset {
        if seq.width() != d {
            return Err(shape_err!("mean_token: width {} vs {d}", seq.width()));
        }
        for i in 0..seq.n_tokens() {
            for (a, x) in acc.iter_mut().zip(seq.tokens.row(i)) {
                *a += x;
            }
        }
        count += seq.n_tokens();
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Tensor::new(&[d], acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn patch_count_and_length() {
        let cfg = small_cfg();
        let p = patchify(&Tensor::full(&[8, 8, 3], 0.5), &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 48]);
        assert!(p.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn checkerboard_patches_follow_index_arithmetic() {
        let cfg = small_cfg();
        let mut img = Tensor::zeros(&[8, 8, 3]);
        for y in 0..8 {
            for x in 0..8 {
                let v = if ((y / 4) + (x / 4)) % 2 == 0 { 0.25 } else { 0.75 };
                for c in 0..3 {
                    img.data_mut()[(y * 8 + x) * 3 + c] = v;
                }
            }
        }
        let p = patchify(&img, &cfg).unwrap();
        for n in 0..4 {
            let (gy, gx) = (n / 2, n % 2);
            let want = if (gy + gx) % 2 == 0 { 0.25 } else { 0.75 };
            assert!(p.row(n).iter().all(|&v| v == want), "patch {n}");
        }
        assert_ne!(p.row(0)[0], p.row(1)[0]);
    }

    #[test]
    fn wrong_size_is_shape_error() {
        let cfg = small_cfg();
        assert!(matches!(patchify(&Tensor::zeros(&[4, 4, 3]), &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            image_size: 30,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad_heads = EncoderConfig {
            n_heads: 3,
            ..EncoderConfig::default()
        };
        assert!(bad_heads.validate().is_err());
    }

    #[test]
    fn default_shape_is_16_by_64() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, &mut Rng::new(0)).unwrap();
        let img = Rng::new(1).gaussian(&[32, 32, 3], 0.2).map(|x| x.clamp(0.0, 1.0));
        let t = encode(&img, &cfg, &params).unwrap();
        assert_eq!(t.tokens.shape(), &[16, 64]);
        assert!(t.tokens.bit_eq(&encode(&img, &cfg, &params).unwrap().tokens));
    }

    #[test]
    fn mean_token_examples() {
        let c = TokenSequence {
            tokens: Tensor::full(&[3, 2], 1.5),
        };
        assert_eq!(mean_token(&[c]).unwrap().data(), &[1.5, 1.5]);
        let a = TokenSequence {
            tokens: Tensor::zeros(&[2, 2]),
        };
        let b = TokenSequence {
            tokens: Tensor::full(&[2, 2], 2.0),
        };
        assert_eq!(mean_token(&[a, b]).unwrap().data(), &[1.0, 1.0]);
        assert!(mean_token(&[]).is_err());
    }

    #[test]
    fn adaptable_linear_count() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.adaptable_linears().len(), 24);
    }
}
