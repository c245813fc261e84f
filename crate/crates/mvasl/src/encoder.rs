//! Shared spatial encoder (patch embedding + mean pool) and shared temporal
//! transformer encoder producing per-view spatial features, temporal
//! features, and a CLS summary vector.
//!
//! A single parameter set serves every view; sharing is structural, not a
//! copy. Positional encodings are sinusoidal and the transformer blocks are
//! pre-norm (LN -> attention -> residual, LN -> feedforward -> residual)
//! with a final LN.

use serde::{Deserialize, Serialize};

use crate::numerics::{concat_cols, concat_rows, ParamSet, Result, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub d_s: usize,
    pub d_t: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { patch_size: 8, d_s: 32, d_t: 128, heads: 4, layers: 1, ff_dim: 128 }
    }
}

impl EncoderConfig {
    pub fn validate(&self, height: usize, width: usize) -> std::result::Result<(), String> {
        if self.patch_size == 0 || height % self.patch_size != 0 || width % self.patch_size != 0 {
            return Err(format!(
                "frame {}x{} not divisible by patch size {}",
                height, width, self.patch_size
            ));
        }
        if self.heads == 0 || self.d_t % self.heads != 0 {
            return Err(format!("d_t {} not divisible by {} heads", self.d_t, self.heads));
        }
        if self.d_s == 0 || self.d_t == 0 || self.ff_dim == 0 || self.layers == 0 {
            return Err("encoder dimensions must be positive".into());
        }
        Ok(())
    }

    pub fn d_st(&self) -> usize {
        self.d_s + self.d_t
    }
}

/// Parameter indices for one transformer block, in registration order.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
}

/// Parameter indices for the whole encoder within a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub patch_w: usize,
    pub patch_b: usize,
    pub in_proj_w: usize,
    pub in_proj_b: usize,
    pub cls: usize,
    pub blocks: Vec<BlockParams>,
    pub final_ln_g: usize,
    pub final_ln_b: usize,
}

impl EncoderParams {
    pub fn init(
        set: &mut ParamSet,
        cfg: &EncoderConfig,
        patch_dim: usize,
        init: &mut impl FnMut(usize, usize) -> Tensor,
    ) -> Self {
        let patch_w = set.add("spatial.patch_w", init(patch_dim, cfg.d_s));
        let patch_b = set.add("spatial.patch_b", Tensor::zeros(vec![1, cfg.d_s]));
        let in_proj_w = set.add("temporal.in_proj_w", init(cfg.d_s, cfg.d_t));
        let in_proj_b = set.add("temporal.in_proj_b", Tensor::zeros(vec![1, cfg.d_t]));
        let cls = set.add("temporal.cls", init(1, cfg.d_t));
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |n: &str| format!("temporal.block{l}.{n}");
            blocks.push(BlockParams {
                ln1_g: set.add(p("ln1_g"), Tensor::full(vec![1, cfg.d_t], 1.0)),
                ln1_b: set.add(p("ln1_b"), Tensor::zeros(vec![1, cfg.d_t])),
                wq: set.add(p("wq"), init(cfg.d_t, cfg.d_t)),
                bq: set.add(p("bq"), Tensor::zeros(vec![1, cfg.d_t])),
                wk: set.add(p("wk"), init(cfg.d_t, cfg.d_t)),
                bk: set.add(p("bk"), Tensor::zeros(vec![1, cfg.d_t])),
                wv: set.add(p("wv"), init(cfg.d_t, cfg.d_t)),
                bv: set.add(p("bv"), Tensor::zeros(vec![1, cfg.d_t])),
                wo: set.add(p("wo"), init(cfg.d_t, cfg.d_t)),
                bo: set.add(p("bo"), Tensor::zeros(vec![1, cfg.d_t])),
                ln2_g: set.add(p("ln2_g"), Tensor::full(vec![1, cfg.d_t], 1.0)),
                ln2_b: set.add(p("ln2_b"), Tensor::zeros(vec![1, cfg.d_t])),
                ff1_w: set.add(p("ff1_w"), init(cfg.d_t, cfg.ff_dim)),
                ff1_b: set.add(p("ff1_b"), Tensor::zeros(vec![1, cfg.ff_dim])),
                ff2_w: set.add(p("ff2_w"), init(cfg.ff_dim, cfg.d_t)),
                ff2_b: set.add(p("ff2_b"), Tensor::zeros(vec![1, cfg.d_t])),
            });
        }
        let final_ln_g = set.add("temporal.final_ln_g", Tensor::full(vec![1, cfg.d_t], 1.0));
        let final_ln_b = set.add("temporal.final_ln_b", Tensor::zeros(vec![1, cfg.d_t]));
        EncoderParams { patch_w, patch_b, in_proj_w, in_proj_b, cls, blocks, final_ln_g, final_ln_b }
    }
}

/// Split frames `[T, D*H*W]` into non-overlapping patches
/// `[T * P, D * ps * ps]`, channel-major within each patch.
pub fn extract_patches(
    frames: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
    patch_size: usize,
) -> Result<Tensor> {
    let t = frames.rows();
    let ps = patch_size;
    let (py, px) = (height / ps, width / ps);
    let patch_dim = channels * ps * ps;
    let mut data = Vec::with_capacity(t * py * px * patch_dim);
    for ti in 0..t {
        let frame = frames.row(ti);
        for gy in 0..py {
            for gx in 0..px {
                for c in 0..channels {
                    let plane = &frame[c * height * width..(c + 1) * height * width];
                    for r in 0..ps {
                        let row0 = (gy * ps + r) * width + gx * ps;
                        data.extend_from_slice(&plane[row0..row0 + ps]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![t * py * px, patch_dim], data)
}

/// Patch-project and mean-pool each frame: `[T, D*H*W] -> [T, D_S]`.
/// The same weights serve every view.
pub fn spatial_encode<'t>(
    tape: &'t Tape,
    frames: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
    cfg: &EncoderConfig,
    patch_w: Var<'t>,
    patch_b: Var<'t>,
) -> Result<Var<'t>> {
    let patches = extract_patches(frames, channels, height, width, cfg.patch_size)?;
    let per_frame = (height / cfg.patch_size) * (width / cfg.patch_size);
    let x = tape.leaf(patches)?;
    x.matmul(patch_w)?.add_bias(patch_b)?.row_group_mean(per_frame)
}

/// Sinusoidal positional encodings for `len` positions of width `dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, dim], data).expect("finite positional encodings")
}

/// Var handles for the encoder parameters on a given tape.
pub struct EncoderVars<'t> {
    pub patch_w: Var<'t>,
    pub patch_b: Var<'t>,
    pub in_proj_w: Var<'t>,
    pub in_proj_b: Var<'t>,
    pub cls: Var<'t>,
    pub blocks: Vec<BlockVars<'t>>,
    pub final_ln_g: Var<'t>,
    pub final_ln_b: Var<'t>,
}

pub struct BlockVars<'t> {
    pub ln1_g: Var<'t>,
    pub ln1_b: Var<'t>,
    pub wq: Var<'t>,
    pub bq: Var<'t>,
    pub wk: Var<'t>,
    pub bk: Var<'t>,
    pub wv: Var<'t>,
    pub bv: Var<'t>,
    pub wo: Var<'t>,
    pub bo: Var<'t>,
    pub ln2_g: Var<'t>,
    pub ln2_b: Var<'t>,
    pub ff1_w: Var<'t>,
    pub ff1_b: Var<'t>,
    pub ff2_w: Var<'t>,
    pub ff2_b: Var<'t>,
}

impl EncoderParams {
    pub fn vars<'t>(&self, leaves: &[Var<'t>]) -> EncoderVars<'t> {
        EncoderVars {
            patch_w: leaves[self.patch_w],
            patch_b: leaves[self.patch_b],
            in_proj_w: leaves[self.in_proj_w],
            in_proj_b: leaves[self.in_proj_b],
            cls: leaves[self.cls],
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    ln1_g: leaves[b.ln1_g],
                    ln1_b: leaves[b.ln1_b],
                    wq: leaves[b.wq],
                    bq: leaves[b.bq],
                    wk: leaves[b.wk],
                    bk: leaves[b.bk],
                    wv: leaves[b.wv],
                    bv: leaves[b.bv],
                    wo: leaves[b.wo],
                    bo: leaves[b.bo],
                    ln2_g: leaves[b.ln2_g],
                    ln2_b: leaves[b.ln2_b],
                    ff1_w: leaves[b.ff1_w],
                    ff1_b: leaves[b.ff1_b],
                    ff2_w: leaves[b.ff2_w],
                    ff2_b: leaves[b.ff2_b],
                })
                .collect(),
            final_ln_g: leaves[self.final_ln_g],
            final_ln_b: leaves[self.final_ln_b],
        }
    }
}

fn attention_block<'t>(
    tokens: Var<'t>,
    block: &BlockVars<'t>,
    cfg: &EncoderConfig,
    attn_sink: &mut Option<&mut Vec<Tensor>>,
) -> Result<Var<'t>> {
    let tape = tokens.tape();
    let dh = cfg.d_t / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let normed = tokens.layer_norm_rows(block.ln1_g, block.ln1_b, LN_EPS)?;
    let q = normed.matmul(block.wq)?.add_bias(block.bq)?;
    let k = normed.matmul(block.wk)?.add_bias(block.bk)?;
    let v = normed.matmul(block.wv)?.add_bias(block.bv)?;
    let mut head_outputs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(c0, c1)?;
        let kh = k.slice_cols(c0, c1)?;
        let vh = v.slice_cols(c0, c1)?;
        let attn = qh.matmul(kh.transpose()?)?.affine(scale, 0.0)?.softmax_rows()?;
        if let Some(sink) = attn_sink.as_deref_mut() {
            sink.push(attn.value());
        }
        head_outputs.push(attn.matmul(vh)?);
    }
    let merged = concat_cols(tape, &head_outputs)?.matmul(block.wo)?.add_bias(block.bo)?;
    let tokens = tokens.add(merged)?;

    let normed = tokens.layer_norm_rows(block.ln2_g, block.ln2_b, LN_EPS)?;
    let ff = normed
        .matmul(block.ff1_w)?
        .add_bias(block.ff1_b)?
        .gelu()?
        .matmul(block.ff2_w)?
        .add_bias(block.ff2_b)?;
    tokens.add(ff)
}

/// Temporal transformer over one view's spatial features: returns per-frame
/// temporal features `[T, D_T]` and the CLS summary `[1, D_T]`.
pub fn temporal_encode<'t>(
    f_s: Var<'t>,
    enc: &EncoderVars<'t>,
    cfg: &EncoderConfig,
    mut attn_sink: Option<&mut Vec<Tensor>>,
) -> Result<(Var<'t>, Var<'t>)> {
    let tape = f_s.tape();
    let t = f_s.shape()[0];
    let x = f_s.matmul(enc.in_proj_w)?.add_bias(enc.in_proj_b)?;
    let mut tokens = concat_rows(tape, &[enc.cls, x])?;
    let pe = tape.leaf(sinusoidal_positions(t + 1, cfg.d_t))?;
    tokens = tokens.add(pe)?;
    for block in &enc.blocks {
        tokens = attention_block(tokens, block, cfg, &mut attn_sink)?;
    }
    tokens = tokens.layer_norm_rows(enc.final_ln_g, enc.final_ln_b, LN_EPS)?;
    let f_cls = tokens.slice_rows(0, 1)?;
    let f_t = tokens.slice_rows(1, t + 1)?;
    Ok((f_t, f_cls))
}
