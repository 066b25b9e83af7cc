//! Schur-complement marginalization of departing nodes into a linear prior.

use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

use crate::geodesy::WorldFrame;
use crate::ins::NavState;
use crate::math::quat_log;

use super::factors::{FactorEval, ProblemLayout, WorkingState};
use super::SlidingWindow;

/// Linear prior `r(δ) = r0 + H_p·δ` over the retained node blocks, with the
/// linearization points the marginalization was performed at.
#[derive(Debug, Clone)]
pub struct MarginalizationPrior {
    /// Node ids the prior constrains, in column order.
    pub keys: Vec<u64>,
    /// Linearization states per key.
    pub lin_states: Vec<NavState>,
    /// Square-root information Jacobian, rows × (15·keys).
    pub jacobian: DMatrix<f64>,
    /// Residual at the linearization points.
    pub residual0: DVector<f64>,
    /// Set when the marginal Hessian was rank-deficient and had to be
    /// regularized.
    pub regularized: bool,
}

impl MarginalizationPrior {
    /// Error of `state` w.r.t. the stored linearization point of `key`.
    fn boxminus(lin: &NavState, state: &NavState) -> [f64; 15] {
        let dp = state.p_wb - lin.p_wb;
        let dth = quat_log(&(lin.q_wb.inverse() * state.q_wb));
        let dv = state.v_wb - lin.v_wb;
        let dbg = state.bg - lin.bg;
        let dba = state.ba - lin.ba;
        [
            dp.x, dp.y, dp.z, dth.x, dth.y, dth.z, dv.x, dv.y, dv.z, dbg.x, dbg.y, dbg.z,
            dba.x, dba.y, dba.z,
        ]
    }

    /// Evaluate the prior against a working state: residual `r0 + J·δ` and
    /// the (constant) Jacobian blocks mapped onto the current layout.
    pub fn evaluate(&self, layout: &ProblemLayout, ws: &WorkingState) -> FactorEval {
        let mut delta = DVector::zeros(15 * self.keys.len());
        for (k, key) in self.keys.iter().enumerate() {
            let idx = layout
                .node_ids
                .iter()
                .position(|id| id == key)
                .expect("prior key must be in the window");
            let d = Self::boxminus(&self.lin_states[k], &ws.states[idx]);
            for i in 0..15 {
                delta[15 * k + i] = d[i];
            }
        }
        let residual = &self.residual0 + &self.jacobian * delta;
        let blocks = self
            .keys
            .iter()
            .enumerate()
            .map(|(k, key)| {
                let idx = layout.node_ids.iter().position(|id| id == key).unwrap();
                (15 * idx, self.jacobian.columns(15 * k, 15).into_owned())
            })
            .collect();
        FactorEval { residual, blocks }
    }
}

/// Schur complement of the leading `m` parameters of `(h, b)`:
/// `H' = H_oo − H_om H_mm⁻¹ H_mo`, `b' = b_o − H_om H_mm⁻¹ b_m`.
///
/// Returns the reduced system and whether `H_mm` had to be regularized.
pub fn schur_marginalize(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    m: usize,
) -> (DMatrix<f64>, DVector<f64>, bool) {
    let n = h.nrows();
    let o = n - m;
    let h_mm = h.view((0, 0), (m, m)).into_owned();
    let h_mo = h.view((0, m), (m, o)).into_owned();
    let h_om = h.view((m, 0), (o, m)).into_owned();
    let h_oo = h.view((m, m), (o, o)).into_owned();
    let b_m = b.rows(0, m).into_owned();
    let b_o = b.rows(m, o).into_owned();

    let (inv, regularized) = match h_mm.clone().cholesky() {
        Some(ch) => (ch.inverse(), false),
        None => {
            let mut reg = h_mm;
            for i in 0..m {
                reg[(i, i)] += 1e-12;
            }
            let ch = reg.cholesky().expect("regularized marginal Hessian");
            (ch.inverse(), true)
        }
    };
    let h_red = &h_oo - &h_om * &inv * &h_mo;
    let b_red = &b_o - &h_om * &inv * &b_m;
    (h_red, b_red, regularized)
}

/// Square-root factorization of an information-form prior `(H, b)` into
/// `J, r0` with `JᵀJ = H` and `Jᵀ r0 = b`, dropping null directions.
pub fn sqrt_factorize(h: &DMatrix<f64>, b: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let sym = 0.5 * (h + h.transpose());
    let eig = sym.symmetric_eigen();
    let n = h.nrows();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let tol = (max_eig * 1e-12).max(1e-300);
    let kept: Vec<usize> =
        (0..n).filter(|&i| eig.eigenvalues[i] > tol).collect();
    let mut j = DMatrix::zeros(kept.len(), n);
    let mut r0 = DVector::zeros(kept.len());
    for (row, &i) in kept.iter().enumerate() {
        let s = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        let sqrt_s = s.sqrt();
        for c in 0..n {
            j[(row, c)] = sqrt_s * v[c];
        }
        r0[row] = v.dot(b) / sqrt_s;
    }
    (j, r0)
}

/// Marginalize the oldest node of the window into the prior.
///
/// Only the prior, the departing preintegration factor and the departing
/// GNSS factor enter the marginal information; visual factors touching the
/// node are dropped (their landmarks are re-anchored or removed by the
/// caller before this runs).
pub fn marginalize_oldest(
    window: &mut SlidingWindow,
    frame: &WorldFrame,
) -> Result<(), super::EstimatorError> {
    assert!(window.nodes.len() >= 2, "cannot marginalize a window of < 2 nodes");
    let removed_id = window.nodes[0].id;

    // involved keys: removed first, then retained keys touched by involved
    // factors (node 1, plus all old prior keys)
    let mut retained: Vec<u64> = vec![window.nodes[1].id];
    if let Some(prior) = &window.prior {
        for k in &prior.keys {
            if *k != removed_id && !retained.contains(k) {
                retained.push(*k);
            }
        }
    }
    let keys: Vec<u64> = std::iter::once(removed_id).chain(retained.iter().copied()).collect();
    let cols: BTreeMap<u64, usize> =
        keys.iter().enumerate().map(|(i, k)| (*k, 15 * i)).collect();
    let n = 15 * keys.len();
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);

    let mut accumulate = |residual: &DVector<f64>, blocks: &[(usize, DMatrix<f64>)]| {
        for (ca, ba_) in blocks {
            for (cb, bb) in blocks {
                let prod = ba_.transpose() * bb;
                let mut view = h.view_mut((*ca, *cb), (prod.nrows(), prod.ncols()));
                view += prod;
            }
            let gi = ba_.transpose() * residual;
            let mut view = b.rows_mut(*ca, gi.nrows());
            view += gi;
        }
    };

    // departing preintegration factor
    {
        let pre = &window.preints[0];
        let s0 = &window.nodes[0].state;
        let s1 = &window.nodes[1].state;
        let w = pre.sqrt_information();
        let r = pre.residual(s0, s1, frame)?;
        let (j0, j1) = pre.residual_jacobians(s0, s1, frame)?;
        let rw = DVector::from_column_slice((w * r).as_slice());
        let blocks = vec![
            (cols[&removed_id], DMatrix::from_column_slice(15, 15, (w * j0).as_slice())),
            (cols[&window.nodes[1].id], DMatrix::from_column_slice(15, 15, (w * j1).as_slice())),
        ];
        accumulate(&rw, &blocks);
    }

    // departing GNSS factor
    if let Some(fix) = &window.nodes[0].fix {
        if fix.valid {
            let s = &window.nodes[0].state;
            let fix_world = frame.to_world(&fix.position);
            let sqrt_info = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(
                1.0 / fix.sigma.x,
                1.0 / fix.sigma.y,
                1.0 / fix.sigma.z,
            ));
            let r = sqrt_info * super::gnss_residual(s, &fix_world, &fix.lever_arm);
            let (jp, jth) = super::gnss_jacobian(s, &fix.lever_arm);
            let mut block = DMatrix::zeros(3, 15);
            block.view_mut((0, 0), (3, 3)).copy_from(&(sqrt_info * jp));
            block.view_mut((0, 3), (3, 3)).copy_from(&(sqrt_info * jth));
            accumulate(
                &DVector::from_column_slice(r.as_slice()),
                &[(cols[&removed_id], block)],
            );
        }
    }

    // old prior, folded in at the current states
    if let Some(prior) = window.prior.take() {
        let mut delta = DVector::zeros(15 * prior.keys.len());
        let mut blocks = Vec::new();
        for (k, key) in prior.keys.iter().enumerate() {
            let node = window.node_by_id(*key).expect("prior key in window");
            let d = MarginalizationPrior::boxminus(&prior.lin_states[k], &node.state);
            for i in 0..15 {
                delta[15 * k + i] = d[i];
            }
            blocks.push((cols[key], prior.jacobian.columns(15 * k, 15).into_owned()));
        }
        let residual = &prior.residual0 + &prior.jacobian * delta;
        accumulate(&residual, &blocks);
    }

    let (h_red, b_red, regularized) = schur_marginalize(&h, &b, 15);
    let (jacobian, residual0) = sqrt_factorize(&h_red, &b_red);
    let lin_states: Vec<NavState> = retained
        .iter()
        .map(|k| window.node_by_id(*k).expect("retained in window").state)
        .collect();
    window.prior = Some(MarginalizationPrior {
        keys: retained,
        lin_states,
        jacobian,
        residual0,
        regularized,
    });

    window.drop_node(0);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Random-but-deterministic SPD linear-Gaussian chain problem:
    /// unary factor on x0 plus binary factors x_i -> x_{i+1}, each block of
    /// dimension `d`. Returns (H, b) of the full problem.
    fn linear_chain(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let np = n * d;
        let mut h = DMatrix::zeros(np, np);
        let mut b = DVector::zeros(np);
        let mut add_factor = |cols: Vec<usize>, rows: usize| {
            let mut j = DMatrix::zeros(rows, np);
            for c in &cols {
                for r in 0..rows {
                    for k in 0..d {
                        j[(r, c * d + k)] = next();
                    }
                }
            }
            let mut r0 = DVector::zeros(rows);
            for r in 0..rows {
                r0[r] = next();
            }
            h += j.transpose() * &j;
            b += j.transpose() * r0;
        };
        add_factor(vec![0], d + 1);
        for i in 0..n - 1 {
            add_factor(vec![i, i + 1], d + 2);
        }
        (h, b)
    }

    #[test]
    fn marginalization_matches_batch_solution_on_linear_chains() {
        for n in 3..=10 {
            let d = 3;
            let (h, b) = linear_chain(n, d, 42 + n as u64);
            // batch solution minimizing ||r0 + J dx||^2 -> H dx = -b
            let full = h.clone().cholesky().expect("SPD").solve(&(-&b));
            let batch_retained = full.rows(d, (n - 1) * d).into_owned();

            // marginalize x0, then solve the reduced system
            let (h_red, b_red, reg) = schur_marginalize(&h, &b, d);
            assert!(!reg);
            let red = h_red.clone().cholesky().expect("SPD").solve(&(-&b_red));
            assert!(
                (&red - &batch_retained).norm() < 1e-8,
                "n={} diff {}",
                n,
                (&red - &batch_retained).norm()
            );

            // the square-root prior reproduces the same normal equations
            let (j, r0) = sqrt_factorize(&h_red, &b_red);
            assert!((j.transpose() * &j - &h_red).norm() < 1e-8 * h_red.norm().max(1.0));
            assert!((j.transpose() * &r0 - &b_red).norm() < 1e-8 * b_red.norm().max(1.0));
        }
    }

    #[test]
    fn rank_deficient_marginal_is_regularized() {
        // H_mm singular: zero information on the first block
        let n = 6;
        let mut h = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for i in 3..n {
            h[(i, i)] = 2.0;
            b[i] = 1.0;
        }
        let (_, _, regularized) = schur_marginalize(&h, &b, 3);
        assert!(regularized);
    }
}
