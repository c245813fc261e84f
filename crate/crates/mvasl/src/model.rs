//! The assembled network: shared encoders over every view, view-level
//! fusion into a linear classifier, and frame-level fusion into the
//! selection heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::asl::{predict_frames, AslError, FramePredictions, HeadParams};
use crate::datagen::TrainExample;
use crate::encoder::{spatial_encode, temporal_encode, EncoderConfig, EncoderParams};
use crate::fusion::{fuse_frames_var, fuse_views_var, FusionError, FusionKind};
use crate::numerics::{NumericsError, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Asl(#[from] AslError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub num_views: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub view_fusion: FusionKind,
    pub frame_fusion: FusionKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.height, self.width).map_err(ModelError::Config)?;
        if self.num_views == 0 {
            return Err(ModelError::Config("need at least one view".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config("need at least two classes".into()));
        }
        if self.frame_fusion == FusionKind::Concat {
            return Err(ModelError::Config("frame-level fusion cannot be concat".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.encoder.patch_size * self.encoder.patch_size
    }

    /// Input width of the view-level classifier; concat fusion widens it by
    /// the view count.
    pub fn view_classifier_dim(&self) -> usize {
        match self.view_fusion {
            FusionKind::Concat => self.num_views * self.encoder.d_t,
            _ => self.encoder.d_t,
        }
    }
}

/// All trainable state plus the parameter-index maps into it. One encoder
/// parameter set serves every view; the parameter count does not depend on
/// the number of views.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub encoder: EncoderParams,
    pub heads: HeadParams,
    pub view_w: usize,
    pub view_b: usize,
}

/// Everything the forward pass produces for one video.
pub struct VideoForward<'t> {
    pub spatial: Vec<Var<'t>>,
    pub temporal: Vec<Var<'t>>,
    pub cls: Vec<Var<'t>>,
    pub view_logits: Var<'t>,
    pub preds: FramePredictions<'t>,
}

fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(vec![fan_in, fan_out], (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect())
        .expect("finite init")
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let mut init = |fi: usize, fo: usize| xavier_uniform(&mut rng, fi, fo);
        let encoder = EncoderParams::init(&mut set, &cfg.encoder, cfg.patch_dim(), &mut init);
        let heads = HeadParams::init(&mut set, cfg.encoder.d_st(), cfg.num_classes, &mut init);
        let view_w = set.add("view_head.w", init(cfg.view_classifier_dim(), cfg.num_classes));
        drop(init);
        let view_b = set.add("view_head.b", Tensor::zeros(vec![1, cfg.num_classes]));
        Ok(Model { cfg, params: set, encoder, heads, view_w, view_b })
    }

    /// Forward one example through every view with shared weights.
    /// `leaves` must come from `self.params.leaf_all(tape)`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        leaves: &[Var<'t>],
        example: &TrainExample,
    ) -> Result<VideoForward<'t>> {
        self.forward_with_attn(tape, leaves, example, None)
    }

    pub fn forward_with_attn<'t>(
        &self,
        tape: &'t Tape,
        leaves: &[Var<'t>],
        example: &TrainExample,
        mut attn_sink: Option<&mut Vec<Tensor>>,
    ) -> Result<VideoForward<'t>> {
        if example.views.len() != self.cfg.num_views {
            return Err(ModelError::Config(format!(
                "model built for {} views, example has {}",
                self.cfg.num_views,
                example.views.len()
            )));
        }
        let enc = self.encoder.vars(leaves);
        let mut spatial = Vec::with_capacity(example.views.len());
        let mut temporal = Vec::with_capacity(example.views.len());
        let mut cls = Vec::with_capacity(example.views.len());
        for frames in &example.views {
            let f_s = spatial_encode(
                tape,
                frames,
                self.cfg.channels,
                self.cfg.height,
                self.cfg.width,
                &self.cfg.encoder,
                enc.patch_w,
                enc.patch_b,
            )?;
            let (f_t, f_cls) = temporal_encode(f_s, &enc, &self.cfg.encoder, attn_sink.as_deref_mut())?;
            spatial.push(f_s);
            temporal.push(f_t);
            cls.push(f_cls);
        }

        let view_fused = fuse_views_var(&cls, self.cfg.view_fusion)?;
        let view_logits = view_fused.matmul(leaves[self.view_w])?.add_bias(leaves[self.view_b])?;

        let frame_fused = fuse_frames_var(&spatial, &temporal, self.cfg.frame_fusion)?;
        let preds = predict_frames(frame_fused, &self.heads.vars(leaves))?;

        Ok(VideoForward { spatial, temporal, cls, view_logits, preds })
    }
}
