//! Central finite-difference verification of analytic gradients.
//!
//! Deliberately knows nothing about the tape: it only re-evaluates a closure
//! at perturbed parameter values, so it stays an independent check of
//! whatever produced the analytic gradients.

use rand::Rng;

use super::tensor::{Result, Tensor};

/// Default step size for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Default relative-error threshold for a probe to pass.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Outcome of probing one gradient against finite differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Relative error with a floor so near-zero gradients are compared
/// absolutely (at 1e-7 for the default tolerance) instead of amplifying
/// finite-difference round-off.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compare `analytic` gradients against central differences of `f` at
/// `params`, probing `probes` randomly chosen components.
pub fn check_gradients<F>(
    name: &str,
    mut f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    probes: usize,
    step: f64,
    tolerance: f64,
    rng: &mut impl Rng,
) -> Result<FdReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    assert_eq!(params.len(), analytic.len());
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel: f64 = 0.0;
    for _ in 0..probes {
        let pi = rng.gen_range(0..params.len());
        let ei = rng.gen_range(0..params[pi].numel());
        work[pi] = perturbed(&params[pi], ei, step);
        let f_plus = f(&work)?;
        work[pi] = perturbed(&params[pi], ei, -step);
        let f_minus = f(&work)?;
        work[pi] = params[pi].clone();
        let fd = (f_plus - f_minus) / (2.0 * step);
        let ad = analytic[pi].data()[ei];
        max_rel = max_rel.max(rel_err(fd, ad));
    }
    Ok(FdReport { name: name.to_string(), probes, max_rel_err: max_rel, tolerance })
}

fn perturbed(t: &Tensor, idx: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[idx] += delta;
    Tensor::new(t.shape().to_vec(), data).expect("perturbation keeps tensor finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::{grad_of, Tape};
    use rand::SeedableRng;

    #[test]
    fn composite_of_core_ops_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let w1 = Tensor::new(vec![4, 5], (0..20).map(|_| rng.gen_range(-0.8..0.8)).collect()).unwrap();
        let w2 = Tensor::new(vec![5, 3], (0..15).map(|_| rng.gen_range(-0.8..0.8)).collect()).unwrap();
        let b = Tensor::new(vec![1, 3], (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let x = Tensor::new(vec![2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let eval = |params: &[Tensor]| -> Result<f64> {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone())?;
            let w1v = tape.leaf(params[0].clone())?;
            let w2v = tape.leaf(params[1].clone())?;
            let bv = tape.leaf(params[2].clone())?;
            let h = xv.matmul(w1v)?.sigmoid()?;
            let out = h.matmul(w2v)?.add_bias(bv)?.softmax_rows()?;
            out.softplus()?.sum_all()?.scalar_value()
        };

        let params = vec![w1, w2, b];
        // Analytic gradients from the tape path.
        let tape = Tape::new();
        let xv = tape.leaf(x.clone()).unwrap();
        let leaves: Vec<_> = params.iter().map(|p| tape.leaf(p.clone()).unwrap()).collect();
        let h = xv.matmul(leaves[0]).unwrap().sigmoid().unwrap();
        let out = h.matmul(leaves[1]).unwrap().add_bias(leaves[2]).unwrap().softmax_rows().unwrap();
        let loss = out.softplus().unwrap().sum_all().unwrap();
        let analytic = grad_of(loss, &leaves).unwrap();

        let report = check_gradients(
            "composite",
            eval,
            &params,
            &analytic,
            120,
            FD_STEP,
            FD_TOLERANCE,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
