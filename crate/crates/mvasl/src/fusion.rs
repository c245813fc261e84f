//! Cross-view fusion: CLS vectors fuse at the view level for video
//! classification; spatial and temporal features fuse per frame for the
//! action-selection heads. Concatenation is a view-level strategy only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{concat_cols, NumericsError, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Max,
    Mean,
    Sum,
    Concat,
}

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("cannot fuse an empty view list")]
    EmptyViews,
    #[error("concat fusion is only defined at the view level")]
    ConcatAtFrameLevel,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = FusionError> = std::result::Result<T, E>;

/// Fuse equally-shaped per-view tensors on the tape. Max/Mean/Sum keep the
/// input shape; Concat widens along columns in view order.
pub fn fuse_views_var<'t>(views: &[Var<'t>], kind: FusionKind) -> Result<Var<'t>> {
    let first = *views.first().ok_or(FusionError::EmptyViews)?;
    match kind {
        FusionKind::Max => {
            let mut acc = first;
            for v in &views[1..] {
                acc = acc.max_elem(*v)?;
            }
            Ok(acc)
        }
        FusionKind::Sum | FusionKind::Mean => {
            let mut acc = first;
            for v in &views[1..] {
                acc = acc.add(*v)?;
            }
            if kind == FusionKind::Mean {
                acc = acc.affine(1.0 / views.len() as f64, 0.0)?;
            }
            Ok(acc)
        }
        FusionKind::Concat => Ok(concat_cols(first.tape(), views)?),
    }
}

/// Pure-value mirror of [`fuse_views_var`].
pub fn fuse_views(views: &[Tensor], kind: FusionKind) -> Result<Tensor> {
    let first = views.first().ok_or(FusionError::EmptyViews)?;
    match kind {
        FusionKind::Max => {
            let mut acc = first.clone();
            for v in &views[1..] {
                acc = acc.max_elem(v)?;
            }
            Ok(acc)
        }
        FusionKind::Sum | FusionKind::Mean => {
            let mut acc = first.clone();
            for v in &views[1..] {
                acc = acc.add(v)?;
            }
            if kind == FusionKind::Mean {
                acc = acc.affine(1.0 / views.len() as f64, 0.0)?;
            }
            Ok(acc)
        }
        FusionKind::Concat => {
            let refs: Vec<&Tensor> = views.iter().collect();
            Ok(Tensor::concat_cols(&refs)?)
        }
    }
}

/// Per-frame fusion for the selection heads: fuse spatial features across
/// views, fuse temporal features across views, then concatenate them per
/// frame into `[T, D_S + D_T]`.
pub fn fuse_frames_var<'t>(
    spatial: &[Var<'t>],
    temporal: &[Var<'t>],
    kind: FusionKind,
) -> Result<Var<'t>> {
    if kind == FusionKind::Concat {
        return Err(FusionError::ConcatAtFrameLevel);
    }
    let s = fuse_views_var(spatial, kind)?;
    let t = fuse_views_var(temporal, kind)?;
    Ok(concat_cols(s.tape(), &[s, t])?)
}

/// Pure-value mirror of [`fuse_frames_var`].
pub fn fuse_frames(spatial: &[Tensor], temporal: &[Tensor], kind: FusionKind) -> Result<Tensor> {
    if kind == FusionKind::Concat {
        return Err(FusionError::ConcatAtFrameLevel);
    }
    let s = fuse_views(spatial, kind)?;
    let t = fuse_views(temporal, kind)?;
    Ok(Tensor::concat_cols(&[&s, &t])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(values: &[f64]) -> Tensor {
        Tensor::new(vec![1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn single_view_is_identity_except_concat() {
        let v = row(&[1.0, -2.0, 3.0]);
        for kind in [FusionKind::Max, FusionKind::Mean, FusionKind::Sum] {
            assert_eq!(fuse_views(&[v.clone()], kind).unwrap(), v);
        }
    }

    #[test]
    fn max_is_elementwise() {
        let fused = fuse_views(&[row(&[1.0, -2.0]), row(&[0.0, 5.0])], FusionKind::Max).unwrap();
        assert_eq!(fused.data(), &[1.0, 5.0]);
    }

    #[test]
    fn empty_views_is_an_error() {
        assert!(matches!(fuse_views(&[], FusionKind::Max), Err(FusionError::EmptyViews)));
    }

    #[test]
    fn concat_is_rejected_at_frame_level() {
        let s = vec![Tensor::zeros(vec![2, 3])];
        let t = vec![Tensor::zeros(vec![2, 4])];
        assert!(matches!(fuse_frames(&s, &t, FusionKind::Concat), Err(FusionError::ConcatAtFrameLevel)));
    }

    #[test]
    fn frame_fusion_shape_and_single_view() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let t = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let fused = fuse_frames(&[s.clone()], &[t.clone()], FusionKind::Max).unwrap();
        assert_eq!(fused.shape(), &[2, 3]);
        assert_eq!(fused.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn max_dominance_with_extreme_values() {
        let quiet = Tensor::full(vec![2, 2], -1e6);
        let loud = Tensor::from_rows(&[vec![0.5, -0.25], vec![1.5, 2.5]]).unwrap();
        let fused = fuse_views(&[quiet, loud.clone()], FusionKind::Max).unwrap();
        assert_eq!(fused, loud);
    }

    #[test]
    fn concat_is_equivariant_to_view_order() {
        let a = row(&[1.0, 2.0]);
        let b = row(&[3.0, 4.0]);
        let ab = fuse_views(&[a.clone(), b.clone()], FusionKind::Concat).unwrap();
        let ba = fuse_views(&[b, a], FusionKind::Concat).unwrap();
        assert_eq!(ab.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ba.data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn mean_equals_sum_over_n(
            data in proptest::collection::vec(-100.0f64..100.0, 12)
        ) {
            let views: Vec<Tensor> = data.chunks(4).map(|c| row(c)).collect();
            let mean = fuse_views(&views, FusionKind::Mean).unwrap();
            let sum = fuse_views(&views, FusionKind::Sum).unwrap();
            for (m, s) in mean.data().iter().zip(sum.data()) {
                prop_assert!((m - s / 3.0).abs() < 1e-12);
            }
        }

        #[test]
        fn pooling_is_permutation_invariant(
            data in proptest::collection::vec(-50.0f64..50.0, 12),
            swap in 0usize..3,
        ) {
            let mut views: Vec<Tensor> = data.chunks(4).map(|c| row(c)).collect();
            let base_max = fuse_views(&views, FusionKind::Max).unwrap();
            let base_sum = fuse_views(&views, FusionKind::Sum).unwrap();
            views.swap(swap, (swap + 1) % 3);
            let perm_max = fuse_views(&views, FusionKind::Max).unwrap();
            let perm_sum = fuse_views(&views, FusionKind::Sum).unwrap();
            prop_assert_eq!(base_max.data(), perm_max.data());
            for (a, b) in base_sum.data().iter().zip(perm_sum.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn max_fusion_is_idempotent_and_monotone(
            data in proptest::collection::vec(-10.0f64..10.0, 4),
            bump_idx in 0usize..4,
            bump in 0.0f64..5.0,
        ) {
            let v = row(&data);
            let same = fuse_views(&[v.clone(), v.clone(), v.clone()], FusionKind::Max).unwrap();
            prop_assert_eq!(same.data(), v.data());
            let mean_same = fuse_views(&[v.clone(), v.clone()], FusionKind::Mean).unwrap();
            for (a, b) in mean_same.data().iter().zip(v.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }

            let other = row(&[0.0, 0.0, 0.0, 0.0]);
            let before = fuse_views(&[v.clone(), other.clone()], FusionKind::Max).unwrap();
            let mut bumped = data.clone();
            bumped[bump_idx] += bump;
            let after = fuse_views(&[row(&bumped), other], FusionKind::Max).unwrap();
            for (a, b) in after.data().iter().zip(before.data()) {
                prop_assert!(a >= b);
            }
        }
    }
}
