//! Action selection: per-frame class and actionness heads, top-k frame
//! selection per class, MIL aggregation to video-level scores, and pseudo
//! ground-truth construction from weak labels.
//!
//! Selection scores are `p_c(t) + p_a(t)`; because that objective is
//! additive over frames, the subset argmax over all size-k frame sets is
//! exactly the k highest-scoring frames. Ties break toward the lower frame
//! index.

use thiserror::Error;

use crate::numerics::{concat_cols, NumericsError, ParamSet, Tape, Tensor, Var};

pub use crate::losses::LossConfig;

#[derive(Debug, Error)]
pub enum AslError {
    #[error("k must satisfy 1 <= k <= {frames}, got {k}")]
    KOutOfRange { k: usize, frames: usize },
    #[error("sample has no positive class; frame-level and actionness losses are skipped")]
    DegenerateSample,
    #[error("selection sets must cover every class: expected {expected}, got {got}")]
    BadSets { expected: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = AslError> = std::result::Result<T, E>;

/// Parameter indices for the two selection heads.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub class_w: usize,
    pub class_b: usize,
    pub act_w: usize,
    pub act_b: usize,
}

impl HeadParams {
    pub fn init(
        set: &mut ParamSet,
        d_st: usize,
        classes: usize,
        init: &mut impl FnMut(usize, usize) -> Tensor,
    ) -> Self {
        HeadParams {
            class_w: set.add("heads.class_w", init(d_st, classes)),
            class_b: set.add("heads.class_b", Tensor::zeros(vec![1, classes])),
            act_w: set.add("heads.act_w", init(d_st, 1)),
            act_b: set.add("heads.act_b", Tensor::zeros(vec![1, 1])),
        }
    }
}

pub struct HeadVars<'t> {
    pub class_w: Var<'t>,
    pub class_b: Var<'t>,
    pub act_w: Var<'t>,
    pub act_b: Var<'t>,
}

impl HeadParams {
    pub fn vars<'t>(&self, leaves: &[Var<'t>]) -> HeadVars<'t> {
        HeadVars {
            class_w: leaves[self.class_w],
            class_b: leaves[self.class_b],
            act_w: leaves[self.act_w],
            act_b: leaves[self.act_b],
        }
    }
}

/// Per-frame predictions: class logits/probabilities `[T, C]` and
/// actionness logits/probabilities `[T, 1]`, probabilities being the
/// sigmoid of the logits.
pub struct FramePredictions<'t> {
    pub class_logits: Var<'t>,
    pub class_probs: Var<'t>,
    pub act_logits: Var<'t>,
    pub act_probs: Var<'t>,
}

/// Apply the classification and actionness heads to fused frame features.
pub fn predict_frames<'t>(fused: Var<'t>, heads: &HeadVars<'t>) -> Result<FramePredictions<'t>> {
    let class_logits = fused.matmul(heads.class_w)?.add_bias(heads.class_b)?;
    let act_logits = fused.matmul(heads.act_w)?.add_bias(heads.act_b)?;
    Ok(FramePredictions {
        class_logits,
        class_probs: class_logits.sigmoid()?,
        act_logits,
        act_probs: act_logits.sigmoid()?,
    })
}

/// Selection scores `p_c(t) + p_a(t)` as a plain `[T, C]` tensor. Selection
/// operates on values, not vars: chosen index sets are constants of the
/// current forward pass.
pub fn selection_scores(preds: &FramePredictions<'_>) -> Result<Tensor> {
    let probs = preds.class_probs.value();
    let act = preds.act_probs.value();
    let (t, c) = (probs.rows(), probs.cols());
    let mut data = Vec::with_capacity(t * c);
    for ti in 0..t {
        let a = act.at(ti, 0);
        data.extend(probs.row(ti).iter().map(|p| p + a));
    }
    Ok(Tensor::new(vec![t, c], data)?)
}

/// Top-k frame indices per class (columns of `scores`), each returned in
/// ascending frame order; ties break toward the lower index.
pub fn select_topk_scores(scores: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let (t, c) = (scores.rows(), scores.cols());
    if k == 0 || k > t {
        return Err(AslError::KOutOfRange { k, frames: t });
    }
    let mut sets = Vec::with_capacity(c);
    for class in 0..c {
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| {
            scores.at(b, class).partial_cmp(&scores.at(a, class)).unwrap().then(a.cmp(&b))
        });
        let mut chosen: Vec<usize> = order[..k].to_vec();
        chosen.sort_unstable();
        sets.push(chosen);
    }
    Ok(sets)
}

/// Top-k selection from frame predictions, per class.
pub fn select_topk(preds: &FramePredictions<'_>, k: usize) -> Result<Vec<Vec<usize>>> {
    select_topk_scores(&selection_scores(preds)?, k)
}

/// MIL aggregation over the selected frames: mean class probability and
/// mean class logit per class, both `[1, C]` and differentiable. The
/// aggregated logits feed the frame-level two-way loss.
pub fn aggregate_video_scores<'t>(
    tape: &'t Tape,
    preds: &FramePredictions<'t>,
    sets: &[Vec<usize>],
) -> Result<(Var<'t>, Var<'t>)> {
    let classes = preds.class_logits.shape()[1];
    if sets.len() != classes {
        return Err(AslError::BadSets { expected: classes, got: sets.len() });
    }
    let mut prob_parts = Vec::with_capacity(classes);
    let mut logit_parts = Vec::with_capacity(classes);
    for (c, set) in sets.iter().enumerate() {
        let positions: Vec<(usize, usize)> = set.iter().map(|&t| (t, c)).collect();
        prob_parts.push(preds.class_probs.gather(&positions)?.mean_all()?);
        logit_parts.push(preds.class_logits.gather(&positions)?.mean_all()?);
    }
    Ok((concat_cols(tape, &prob_parts)?, concat_cols(tape, &logit_parts)?))
}

/// Pseudo ground-truth frame sets: positives are the union of the top-k
/// sets of the ground-truth classes, negatives the complement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoGt {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

pub fn build_pseudo_gt(sets: &[Vec<usize>], labels: &[bool], frames: usize) -> Result<PseudoGt> {
    if !labels.iter().any(|&l| l) {
        return Err(AslError::DegenerateSample);
    }
    let mut in_pos = vec![false; frames];
    for (set, _) in sets.iter().zip(labels).filter(|(_, &l)| l) {
        for &t in set {
            in_pos[t] = true;
        }
    }
    let pos: Vec<usize> = (0..frames).filter(|&t| in_pos[t]).collect();
    let neg: Vec<usize> = (0..frames).filter(|&t| !in_pos[t]).collect();
    Ok(PseudoGt { pos, neg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn preds_from_logits<'t>(
        tape: &'t Tape,
        class_logits: Tensor,
        act_logits: Tensor,
    ) -> FramePredictions<'t> {
        let class_logits = tape.leaf(class_logits).unwrap();
        let act_logits = tape.leaf(act_logits).unwrap();
        FramePredictions {
            class_logits,
            class_probs: class_logits.sigmoid().unwrap(),
            act_logits,
            act_probs: act_logits.sigmoid().unwrap(),
        }
    }

    #[test]
    fn zero_heads_predict_half_everywhere() {
        let mut set = ParamSet::new();
        let mut zero_init = |fi: usize, fo: usize| Tensor::zeros(vec![fi, fo]);
        let heads = HeadParams::init(&mut set, 5, 3, &mut zero_init);
        let tape = Tape::new();
        let leaves = set.leaf_all(&tape).unwrap();
        let fused = tape.leaf(Tensor::full(vec![4, 5], 0.7)).unwrap();
        let preds = predict_frames(fused, &heads.vars(&leaves)).unwrap();
        assert_eq!(preds.class_probs.shape(), vec![4, 3]);
        assert_eq!(preds.act_probs.shape(), vec![4, 1]);
        assert!(preds.class_probs.value().data().iter().all(|&p| p == 0.5));
        assert!(preds.act_probs.value().data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn probabilities_match_scalar_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits =
            Tensor::new(vec![6, 4], (0..24).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap();
        let act = Tensor::new(vec![6, 1], (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap();
        let tape = Tape::new();
        let preds = preds_from_logits(&tape, logits.clone(), act);
        let probs = preds.class_probs.value();
        for (p, &x) in probs.data().iter().zip(logits.data()) {
            assert!((p - 1.0 / (1.0 + (-x).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_orders_by_combined_score() {
        // p_c + p_a per frame: [0.9, 0.1, 0.8, 0.2] -> top-2 = frames {0, 2}
        let scores = Tensor::new(vec![4, 1], vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        let sets = select_topk_scores(&scores, 2).unwrap();
        assert_eq!(sets[0], vec![0, 2]);
        let all = select_topk_scores(&scores, 4).unwrap();
        assert_eq!(all[0], vec![0, 1, 2, 3]);
        assert!(matches!(select_topk_scores(&scores, 5), Err(AslError::KOutOfRange { .. })));
        assert!(matches!(select_topk_scores(&scores, 0), Err(AslError::KOutOfRange { .. })));
    }

    #[test]
    fn topk_ties_break_to_lower_index() {
        let scores = Tensor::new(vec![4, 1], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let sets = select_topk_scores(&scores, 2).unwrap();
        assert_eq!(sets[0], vec![0, 1]);
    }

    /// Exhaustive subset argmax oracle for additive scores.
    fn brute_force_topk(scores: &[f64], k: usize) -> Vec<usize> {
        let t = scores.len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 0u32..(1 << t) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let subset: Vec<usize> = (0..t).filter(|&i| mask >> i & 1 == 1).collect();
            let total: f64 = subset.iter().map(|&i| scores[i]).sum();
            let better = match &best {
                Some((b, _)) => total > *b + 1e-12,
                None => true,
            };
            if better {
                best = Some((total, subset));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn topk_matches_exhaustive_subset_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let t = rng.gen_range(2..=8);
            let k = rng.gen_range(1..=t.min(4));
            let scores: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..2.0)).collect();
            let tensor = Tensor::new(vec![t, 1], scores.clone()).unwrap();
            let fast = &select_topk_scores(&tensor, k).unwrap()[0];
            let slow = brute_force_topk(&scores, k);
            assert_eq!(fast, &slow, "t={} k={} scores={:?}", t, k, scores);
        }
    }

    #[test]
    fn selection_invariant_under_increasing_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let scores: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..2.0)).collect();
            let base = select_topk_scores(&Tensor::new(vec![10, 1], scores.clone()).unwrap(), 3).unwrap();
            let warped: Vec<f64> = scores.iter().map(|&s| (2.0 * s).exp() + s).collect();
            let after = select_topk_scores(&Tensor::new(vec![10, 1], warped).unwrap(), 3).unwrap();
            assert_eq!(base, after);
        }
    }

    #[test]
    fn actionness_dominates_selection_when_extreme() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = 12;
        let k = 3;
        let classes = 4;
        let class_logits =
            Tensor::new(vec![t, classes], (0..t * classes).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap();
        // huge positive actionness on frames 0..k, huge negative elsewhere
        let act: Vec<f64> = (0..t).map(|i| if i < k { 50.0 } else { -50.0 }).collect();
        let tape = Tape::new();
        let preds = preds_from_logits(&tape, class_logits, Tensor::new(vec![t, 1], act).unwrap());
        let sets = select_topk(&preds, k).unwrap();
        for set in sets {
            assert_eq!(set, vec![0, 1, 2]);
        }
    }

    #[test]
    fn aggregation_means_selected_entries() {
        let tape = Tape::new();
        let class_logits = Tensor::from_rows(&[
            vec![2.0, -1.0],
            vec![0.0, 0.5],
            vec![-2.0, 1.5],
        ])
        .unwrap();
        let act = Tensor::zeros(vec![3, 1]);
        let preds = preds_from_logits(&tape, class_logits.clone(), act);
        let sets = vec![vec![0, 1], vec![1, 2]];
        let (probs, logits) = aggregate_video_scores(&tape, &preds, &sets).unwrap();
        let lv = logits.value();
        assert!((lv.at(0, 0) - 1.0).abs() < 1e-12);
        assert!((lv.at(0, 1) - 1.0).abs() < 1e-12);
        let pv = probs.value();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((pv.at(0, 0) - (sig(2.0) + sig(0.0)) / 2.0).abs() < 1e-12);
        assert!((pv.at(0, 1) - (sig(0.5) + sig(1.5)) / 2.0).abs() < 1e-12);

        // k = 1 equals the single selected frame's probability
        let (p1, _) = aggregate_video_scores(&tape, &preds, &[vec![0], vec![2]]).unwrap();
        assert!((p1.value().at(0, 0) - sig(2.0)).abs() < 1e-12);

        // constant probabilities stay constant under any k
        let flat = preds_from_logits(&tape, Tensor::zeros(vec![3, 2]), Tensor::zeros(vec![3, 1]));
        let (pf, _) = aggregate_video_scores(&tape, &flat, &sets).unwrap();
        assert!(pf.value().data().iter().all(|&p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn pseudo_gt_mirrors_union_and_complement() {
        // 9 frames, 4 classes, ground truth classes {2, 3} (0-indexed),
        // top-3 sets chosen per class
        let sets = vec![
            vec![0, 1, 2],
            vec![3, 4, 5],
            vec![1, 4, 5], // class 2: frames {1, 4, 5}
            vec![4, 6, 8], // class 3: frames {4, 6, 8}
        ];
        let labels = vec![false, false, true, true];
        let gt = build_pseudo_gt(&sets, &labels, 9).unwrap();
        assert_eq!(gt.pos, vec![1, 4, 5, 6, 8]);
        assert_eq!(gt.neg, vec![0, 2, 3, 7]);
    }

    #[test]
    fn single_positive_class_copies_its_set() {
        let sets = vec![vec![2, 5], vec![0, 1]];
        let gt = build_pseudo_gt(&sets, &[false, true], 6).unwrap();
        assert_eq!(gt.pos, vec![0, 1]);
        assert_eq!(gt.neg, vec![2, 3, 4, 5]);
    }

    #[test]
    fn all_negative_labels_signal_degenerate_sample() {
        let sets = vec![vec![0], vec![1]];
        assert!(matches!(build_pseudo_gt(&sets, &[false, false], 4), Err(AslError::DegenerateSample)));
    }

    #[test]
    fn pseudo_gt_matches_boolean_or_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let frames = rng.gen_range(4..16);
            let classes = rng.gen_range(2..6);
            let k = rng.gen_range(1..=frames.min(4));
            let sets: Vec<Vec<usize>> = (0..classes)
                .map(|_| {
                    let mut order: Vec<usize> = (0..frames).collect();
                    for i in (1..order.len()).rev() {
                        let j = rng.gen_range(0..=i);
                        order.swap(i, j);
                    }
                    let mut s = order[..k].to_vec();
                    s.sort_unstable();
                    s
                })
                .collect();
            let mut labels: Vec<bool> = (0..classes).map(|_| rng.gen_bool(0.5)).collect();
            labels[rng.gen_range(0..classes)] = true;

            let gt = build_pseudo_gt(&sets, &labels, frames).unwrap();
            // per-frame boolean OR oracle
            for t in 0..frames {
                let expect = (0..classes).any(|c| labels[c] && sets[c].contains(&t));
                assert_eq!(gt.pos.contains(&t), expect);
                assert_eq!(gt.neg.contains(&t), !expect);
            }
            // partition and union-bound invariants
            assert_eq!(gt.pos.len() + gt.neg.len(), frames);
            let positives = labels.iter().filter(|&&l| l).count();
            assert!(gt.pos.len() >= k.min(frames));
            assert!(gt.pos.len() <= k * positives);
        }
    }
}
