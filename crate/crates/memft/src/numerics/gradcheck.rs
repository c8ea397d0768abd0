//! Central-finite-difference gradient checking.
//!
//! The checker takes a *forward builder* — a closure that records the loss on a
//! fresh tape from the current parameter values — so it can evaluate the loss at
//! perturbed parameters without any cooperation from the model code. Analytic
//! gradients come from one `backward` pass; numeric ones from
//! `(f(θ+ε) − f(θ−ε)) / (θ⁺ − θ⁻)` per sampled entry, with the denominator
//! computed from the actually-stored perturbed values to absorb rounding.
//!
//! Intended use is `F = f64`: in double precision a correct gradient shows
//! relative errors around 1e-10..1e-7 at ε = 1e-4, while a wrong backward rule
//! shows errors many orders of magnitude larger. There is no in-between.

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Stream};

use super::tape::{ParamId, ParamStore, Tape, ValueId};
use super::tensor::Scalar;

/// Outcome of checking one parameter tensor.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub parameter: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of entries actually compared (sampled without replacement).
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with an absolute floor, so near-zero pairs don't blow up:
/// |a − n| / max(|a|, |n|, 1e-8).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Pairs agreeing to better than this absolute error count as matching
/// regardless of their relative error. f64 central differences at ε = 1e-4
/// bottom out around 1e-12 absolute; gradient entries of magnitude ~1e-8 would
/// otherwise turn that noise into meaningless relative errors near the
/// tolerance. Any real backward bug on an entry that matters produces absolute
/// errors many orders of magnitude above this floor.
pub const ABS_AGREEMENT_FLOOR: f64 = 1e-9;

/// Fold raw (analytic, numeric) pairs into a report. Exposed so tests can push
/// deliberately corrupted pairs through the same comparator the checker uses.
pub fn report_from_pairs(parameter: &str, pairs: &[(f64, f64)]) -> GradCheckReport {
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for &(a, n) in pairs {
        let abs = (a - n).abs();
        max_abs = max_abs.max(abs);
        if abs >= ABS_AGREEMENT_FLOOR {
            max_rel = max_rel.max(relative_error(a, n));
        }
    }
    GradCheckReport {
        parameter: parameter.to_string(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        checked: pairs.len(),
    }
}

/// Check analytic gradients of `loss_fn` for every parameter in `params`.
///
/// `loss_fn` must record the loss for the *current* store contents onto the
/// given tape and return its id; it is called once for the analytic pass and
/// twice per sampled entry for the numeric passes. At most `samples_per_param`
/// entries are checked per tensor (all of them if the tensor is smaller).
/// `epsilon` outside [1e-6, 1e-3] is rejected: larger steps truncate, smaller
/// ones cancel catastrophically even in f64.
pub fn finite_diff_check<F, L>(
    store: &mut ParamStore<F>,
    params: &[ParamId],
    mut loss_fn: L,
    epsilon: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<Vec<GradCheckReport>>
where
    F: Scalar,
    L: FnMut(&mut Tape<F>, &ParamStore<F>) -> Result<ValueId>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite-difference epsilon {epsilon:e} outside [1e-6, 1e-3]"
        )));
    }
    if samples_per_param == 0 {
        return Err(Error::Config("samples_per_param must be positive".into()));
    }

    // Analytic pass: one forward + one backward on fresh gradients.
    store.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        tape.backward(loss, store)?;
    }
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&p| store.get(p).grad.data().iter().map(|&g| g.to_f64()).collect())
        .collect();

    let mut rng = CounterRng::from_stream(seed, Stream::GradCheck);
    let mut reports = Vec::with_capacity(params.len());
    for (pi, &pid) in params.iter().enumerate() {
        let numel = store.get(pid).value.numel();
        let picked: Vec<usize> = if numel <= samples_per_param {
            (0..numel).collect()
        } else {
            rng.sample_distinct(numel, samples_per_param)
        };

        let mut pairs = Vec::with_capacity(picked.len());
        for &e in &picked {
            let orig = store.get(pid).value.data()[e];
            let hp = orig + F::from_f64(epsilon);
            let hm = orig - F::from_f64(epsilon);
            let denom = (hp - hm).to_f64();

            store.get_mut(pid).value.data_mut()[e] = hp;
            let f_plus = {
                let mut tape = Tape::new();
                let loss = loss_fn(&mut tape, store)?;
                tape.scalar_value(loss)?
            };
            store.get_mut(pid).value.data_mut()[e] = hm;
            let f_minus = {
                let mut tape = Tape::new();
                let loss = loss_fn(&mut tape, store)?;
                tape.scalar_value(loss)?
            };
            store.get_mut(pid).value.data_mut()[e] = orig;

            pairs.push((analytic[pi][e], (f_plus - f_minus) / denom));
        }
        reports.push(report_from_pairs(&store.get(pid).name.clone(), &pairs));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;
    use crate::rng::CounterRng;
    use std::cell::Cell;

    fn quadratic_store() -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let p = store
            .add("x", Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]).unwrap())
            .unwrap();
        (store, p)
    }

    #[test]
    fn quadratic_loss_checks_clean() {
        let (mut store, p) = quadratic_store();
        let reports = finite_diff_check(
            &mut store,
            &[p],
            |tape, store| {
                let x = tape.param(store, p);
                let sq = tape.mul(x, x)?;
                Ok(tape.sum_all(sq))
            },
            1e-4,
            16,
            0,
        )
        .unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].checked, 6);
        assert!(
            reports[0].max_rel_err < 1e-9,
            "quadratic check should be near machine precision, got {}",
            reports[0].max_rel_err
        );
    }

    #[test]
    fn composite_graph_checks_clean() {
        // loss = sum(silu(softmax_rows(A·Bᵀ) · C)) exercises several rules at once.
        let mut rng = CounterRng::new(77, 1);
        let mut store = ParamStore::<f64>::new();
        let mk = |rng: &mut CounterRng, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.normal() * 0.5).collect()).unwrap()
        };
        let a = store.add("a", mk(&mut rng, vec![3, 4])).unwrap();
        let b = store.add("b", mk(&mut rng, vec![5, 4])).unwrap();
        let c = store.add("c", mk(&mut rng, vec![5, 2])).unwrap();
        let reports = finite_diff_check(
            &mut store,
            &[a, b, c],
            |tape, store| {
                let ia = tape.param(store, a);
                let ib = tape.param(store, b);
                let ic = tape.param(store, c);
                let scores = tape.matmul_nt(ia, ib)?;
                let probs = tape.softmax_rows(scores)?;
                let mixed = tape.matmul(probs, ic)?;
                let act = tape.silu(mixed);
                Ok(tape.sum_all(act))
            },
            1e-4,
            64,
            1,
        )
        .unwrap();
        for r in &reports {
            assert!(
                r.max_rel_err < 1e-7,
                "{}: rel err {} too large",
                r.parameter,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn detects_injected_forward_fault() {
        // Negative control: the loss the numeric passes see is scaled by 1.05
        // relative to the loss the analytic pass saw. The checker must flag it.
        let (mut store, p) = quadratic_store();
        let calls = Cell::new(0u32);
        let reports = finite_diff_check(
            &mut store,
            &[p],
            |tape, store| {
                let n = calls.get();
                calls.set(n + 1);
                let x = tape.param(store, p);
                let sq = tape.mul(x, x)?;
                let s = tape.sum_all(sq);
                Ok(if n == 0 { s } else { tape.scale(s, 1.05) })
            },
            1e-4,
            16,
            0,
        )
        .unwrap();
        assert!(
            reports[0].max_rel_err > 1e-2,
            "corrupted forward must be detected, got rel err {}",
            reports[0].max_rel_err
        );
    }

    #[test]
    fn detects_corrupted_analytic_pairs() {
        let pairs = vec![(1.0, 1.0), (2.0, 2.0000002), (3.0, 4.5)];
        let r = report_from_pairs("w", &pairs);
        assert!(r.max_rel_err > 0.3);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn noise_floor_spares_tiny_gradients_but_not_real_faults() {
        // 2e-8 vs 2.1e-8: terrible relative error, but the 1e-12 absolute gap
        // is just finite-difference noise on a negligible gradient entry.
        let noise = report_from_pairs("w", &[(2.0e-8, 2.0001e-8)]);
        assert_eq!(noise.max_rel_err, 0.0);
        assert!(noise.max_abs_err < 1e-11);

        // A missing backward term on a same-sized entry (analytic 0) sits far
        // above the floor and must still be flagged.
        let fault = report_from_pairs("w", &[(0.0, 2.0e-8)]);
        assert!(fault.max_rel_err > 0.5, "got {}", fault.max_rel_err);
    }

    #[test]
    fn rejects_ill_conditioned_epsilon() {
        let (mut store, p) = quadratic_store();
        for eps in [1e-12, 0.5, 0.0] {
            let r = finite_diff_check(
                &mut store,
                &[p],
                |tape, store| {
                    let x = tape.param(store, p);
                    Ok(tape.sum_all(x))
                },
                eps,
                4,
                0,
            );
            assert!(matches!(r, Err(Error::Config(_))), "eps {eps} must be rejected");
        }
    }

    #[test]
    fn restores_parameter_values_exactly() {
        let (mut store, p) = quadratic_store();
        let before: Vec<u64> = store.get(p).value.data().iter().map(|v| v.to_bits()).collect();
        finite_diff_check(
            &mut store,
            &[p],
            |tape, store| {
                let x = tape.param(store, p);
                let sq = tape.mul(x, x)?;
                Ok(tape.sum_all(sq))
            },
            1e-4,
            6,
            3,
        )
        .unwrap();
        let after: Vec<u64> = store.get(p).value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }
}
