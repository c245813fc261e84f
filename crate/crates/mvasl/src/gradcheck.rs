//! Finite-difference verification suite covering every loss and the full
//! encoder-to-objective stack, run by the `gradcheck` command and the
//! acceptance tests.
//!
//! Selection sets are piecewise-constant in the parameters, so the combined
//! objective is checked with the sets frozen at their base-point values;
//! that is exactly the function whose gradient backpropagation computes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asl::{build_pseudo_gt, select_topk, PseudoGt};
use crate::datagen::TrainExample;
use crate::encoder::EncoderConfig;
use crate::fusion::FusionKind;
use crate::losses::{
    class_wise_loss_var, gce_actionness_loss_var, sample_wise_loss_var, two_way_loss_var,
    LogitMatrix, LossConfig,
};
use crate::model::{Model, ModelConfig};
use crate::numerics::{
    check_gradients, concat_rows, grad_of, FdReport, Result, Tape, Tensor, FD_STEP, FD_TOLERANCE,
};
use crate::trainer::TrainError;

fn random_logit_matrix(rng: &mut ChaCha8Rng, m: usize, c: usize) -> LogitMatrix {
    let logits =
        Tensor::new(vec![m, c], (0..m * c).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let mut labels: Vec<bool> = (0..m * c).map(|_| rng.gen_bool(0.4)).collect();
    for i in 0..m {
        labels[i * c] = true;
        labels[i * c + 1] = false;
    }
    LogitMatrix::new(logits, labels).expect("valid matrix")
}

type LossBuilder = for<'t> fn(&'t Tape, crate::numerics::Var<'t>, &LogitMatrix) -> Result<crate::numerics::Var<'t>>;

fn check_matrix_loss(
    name: &str,
    build: LossBuilder,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FdReport> {
    let lm = random_logit_matrix(rng, 5, 6);
    let labels = lm.labels.clone();
    let eval = |params: &[Tensor]| -> Result<f64> {
        let lm = LogitMatrix::new(params[0].clone(), labels.clone()).expect("valid matrix");
        let tape = Tape::new();
        let x = tape.leaf(params[0].clone())?;
        build(&tape, x, &lm)?.scalar_value()
    };
    let tape = Tape::new();
    let x = tape.leaf(lm.logits.clone())?;
    let loss = build(&tape, x, &lm)?;
    let analytic = grad_of(loss, &[x])?;
    check_gradients(name, eval, &[lm.logits.clone()], &analytic, probes, FD_STEP, FD_TOLERANCE, rng)
}

fn check_gce(probes: usize, rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let t = 10;
    let logits = Tensor::new(vec![t, 1], (0..t).map(|_| rng.gen_range(-2.5..2.5)).collect())?;
    let pos: Vec<usize> = (0..t).filter(|i| i % 3 != 0).collect();
    let neg: Vec<usize> = (0..t).filter(|i| i % 3 == 0).collect();
    let eval = |params: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(params[0].clone())?;
        let p = x.sigmoid()?;
        gce_actionness_loss_var(&tape, p, &pos, &neg, 0.7).expect("valid gce").scalar_value()
    };
    let tape = Tape::new();
    let x = tape.leaf(logits.clone())?;
    let p = x.sigmoid()?;
    let loss = gce_actionness_loss_var(&tape, p, &pos, &neg, 0.7).expect("valid gce");
    let analytic = grad_of(loss, &[x])?;
    check_gradients("gce_actionness_loss", eval, &[logits], &analytic, probes, FD_STEP, FD_TOLERANCE, rng)
}

fn tiny_model_setup(rng: &mut ChaCha8Rng) -> (Model, Vec<TrainExample>, LossConfig) {
    let cfg = ModelConfig {
        encoder: EncoderConfig { patch_size: 4, d_s: 4, d_t: 8, heads: 2, layers: 1, ff_dim: 8 },
        num_classes: 3,
        num_views: 2,
        channels: 2,
        height: 8,
        width: 8,
        view_fusion: FusionKind::Max,
        frame_fusion: FusionKind::Max,
    };
    let model = Model::init(cfg, rng.gen()).expect("valid model config");
    let frames = 3;
    let frame_len = 2 * 8 * 8;
    let batch: Vec<TrainExample> = (0..2)
        .map(|i| TrainExample {
            views: (0..2)
                .map(|_| {
                    Tensor::new(
                        vec![frames, frame_len],
                        (0..frames * frame_len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    )
                    .unwrap()
                })
                .collect(),
            labels: if i == 0 { vec![true, false, true] } else { vec![false, true, false] },
        })
        .collect();
    (model, batch, LossConfig { k: Some(2), ..LossConfig::default() })
}

/// The combined objective on a tiny model with frozen selection sets.
fn objective_with_sets(
    model: &Model,
    values: &[Tensor],
    batch: &[TrainExample],
    sets: &[Vec<Vec<usize>>],
    gts: &[PseudoGt],
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let leaves: Vec<crate::numerics::Var> =
        values.iter().map(|v| tape.leaf(v.clone())).collect::<Result<_>>()?;
    let mut view_rows = Vec::new();
    let mut frame_rows = Vec::new();
    let mut labels = Vec::new();
    let mut gce_terms = Vec::new();
    for ((example, sets), gt) in batch.iter().zip(sets).zip(gts) {
        let fwd = model.forward(&tape, &leaves, example).expect("forward");
        view_rows.push(fwd.view_logits);
        let (_, mil) =
            crate::asl::aggregate_video_scores(&tape, &fwd.preds, sets).expect("aggregate");
        frame_rows.push(mil);
        labels.extend_from_slice(&example.labels);
        gce_terms
            .push(gce_actionness_loss_var(&tape, fwd.preds.act_probs, &gt.pos, &gt.neg, loss_cfg.q)
                .expect("gce"));
    }
    let x_view = concat_rows(&tape, &view_rows)?;
    let lm_view = LogitMatrix::new(x_view.value(), labels.clone()).expect("view matrix");
    let x_frame = concat_rows(&tape, &frame_rows)?;
    let lm_frame = LogitMatrix::new(x_frame.value(), labels).expect("frame matrix");
    let view = two_way_loss_var(&tape, x_view, &lm_view, loss_cfg.alpha, loss_cfg.gamma).expect("two-way");
    let frame =
        two_way_loss_var(&tape, x_frame, &lm_frame, loss_cfg.alpha, loss_cfg.gamma).expect("two-way");
    let mut act = gce_terms[0];
    for t in &gce_terms[1..] {
        act = act.add(*t)?;
    }
    let act = act.affine(1.0 / gce_terms.len() as f64, 0.0)?;
    let total = view.add(frame.affine(loss_cfg.beta1, 0.0)?)?.add(act.affine(loss_cfg.beta2, 0.0)?)?;
    let grads = grad_of(total, &leaves)?;
    Ok((total.scalar_value()?, grads))
}

fn check_overall(probes: usize, rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (model, batch, loss_cfg) = tiny_model_setup(rng);
    let frames = batch[0].views[0].shape()[0];
    let k = loss_cfg.resolve_k(frames);

    // freeze selections at the base point
    let tape = Tape::new();
    let leaves = model.params.leaf_all(&tape)?;
    let mut sets = Vec::new();
    let mut gts = Vec::new();
    for example in &batch {
        let fwd = model.forward(&tape, &leaves, example).expect("forward");
        let s = select_topk(&fwd.preds, k).expect("topk");
        let gt = build_pseudo_gt(&s, &example.labels, frames).expect("pseudo gt");
        sets.push(s);
        gts.push(gt);
    }

    let base_values = model.params.values();
    let (_, analytic) =
        objective_with_sets(&model, &base_values, &batch, &sets, &gts, &loss_cfg)?;
    let eval = |values: &[Tensor]| -> Result<f64> {
        objective_with_sets(&model, values, &batch, &sets, &gts, &loss_cfg).map(|(v, _)| v)
    };
    check_gradients(
        "overall_objective",
        eval,
        &base_values,
        &analytic,
        probes,
        FD_STEP,
        FD_TOLERANCE,
        rng,
    )
}

fn check_encoder_stack(probes: usize, rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let (model, batch, _) = tiny_model_setup(rng);
    let example = batch[0].clone();
    let eval_params = model.params.values();
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<crate::numerics::Var> =
            values.iter().map(|v| tape.leaf(v.clone())).collect::<Result<_>>()?;
        let fwd = model.forward(&tape, &leaves, &example).expect("forward");
        fwd.view_logits
            .softplus()?
            .sum_all()?
            .add(fwd.preds.class_probs.sum_all()?)?
            .add(fwd.preds.act_probs.sum_all()?)?
            .scalar_value()
    };
    let tape = Tape::new();
    let leaves = model.params.leaf_all(&tape)?;
    let fwd = model.forward(&tape, &leaves, &example).expect("forward");
    let loss = fwd
        .view_logits
        .softplus()?
        .sum_all()?
        .add(fwd.preds.class_probs.sum_all()?)?
        .add(fwd.preds.act_probs.sum_all()?)?;
    let analytic = grad_of(loss, &leaves)?;
    check_gradients("encoder_stack", eval, &eval_params, &analytic, probes, FD_STEP, FD_TOLERANCE, rng)
}

/// Run every gradient check with `probes` random probes each.
pub fn run_suite(seed: u64, probes: usize) -> std::result::Result<Vec<FdReport>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    reports.push(check_matrix_loss(
        "sample_wise_loss",
        |tape, x, lm| Ok(sample_wise_loss_var(tape, x, lm, 4.0).expect("valid inputs")),
        probes,
        &mut rng,
    )?);
    reports.push(check_matrix_loss(
        "class_wise_loss",
        |tape, x, lm| Ok(class_wise_loss_var(tape, x, lm, 4.0).expect("valid inputs")),
        probes,
        &mut rng,
    )?);
    reports.push(check_matrix_loss(
        "two_way_loss",
        |tape, x, lm| Ok(two_way_loss_var(tape, x, lm, 1.0, 4.0).expect("valid inputs")),
        probes,
        &mut rng,
    )?);
    reports.push(check_gce(probes, &mut rng)?);
    reports.push(check_encoder_stack(probes, &mut rng)?);
    reports.push(check_overall(probes, &mut rng)?);
    Ok(reports)
}
