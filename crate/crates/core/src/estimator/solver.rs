//! Dense Levenberg–Marquardt over the window error state with Schur
//! elimination of the inverse-depth block and gauge fixing for
//! unconstrained (vision-only, prior-less) problems.

use nalgebra::{DMatrix, DVector, Matrix3x2, Vector3};

use crate::geodesy::WorldFrame;

use super::factors::{evaluate, residual_only, Factor, FactorKind, ProblemLayout, WorkingState};
use super::SlidingWindow;

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_max: f64,
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 25,
            lambda_init: 1e-6,
            lambda_max: 1e12,
            cost_tolerance: 1e-12,
            step_tolerance: 1e-10,
        }
    }
}

/// Result of one Levenberg–Marquardt run.
#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub diverged: bool,
    /// Whether the reduced normal equations stayed full rank throughout.
    pub full_rank: bool,
    /// Gauge fixing was applied (no absolute position information present).
    pub gauge_fixed: bool,
}

/// Huber loss on a whitened squared norm: `ρ(s)` and the IRLS weight `ρ'(s)`.
fn huber(s: f64, delta: f64) -> (f64, f64) {
    let d2 = delta * delta;
    if s <= d2 {
        (s, 1.0)
    } else {
        let sqrt_s = s.sqrt();
        (2.0 * delta * sqrt_s - d2, delta / sqrt_s)
    }
}

fn robust_cost(factor: &Factor, s: f64, huber_delta: f64) -> f64 {
    match factor.kind() {
        FactorKind::Visual => huber(s, huber_delta).0,
        _ => s,
    }
}

fn total_cost(
    factors: &[Factor],
    window: &SlidingWindow,
    layout: &ProblemLayout,
    ws: &WorkingState,
    frame: &WorldFrame,
    huber_delta: f64,
) -> f64 {
    factors
        .iter()
        .filter_map(|f| {
            residual_only(f, window, layout, ws, frame)
                .map(|r| robust_cost(f, r.norm_squared(), huber_delta))
        })
        .sum()
}

/// Basis of the attitude subspace orthogonal to the world-down axis seen in
/// the body frame (the yaw direction is dropped).
fn yaw_complement(state: &crate::ins::NavState) -> Matrix3x2<f64> {
    let c = state.rotation().transpose() * Vector3::z();
    let c = c.normalize();
    let (b1, b2) = crate::math::tangent_basis(&c);
    Matrix3x2::from_columns(&[b1, b2])
}

/// Solve `(H + λ diag) δ = −g` with Schur elimination of the trailing
/// landmark block and optional gauge reduction of node 0.
///
/// Returns `(δ, full_rank)`.
fn solve_normal_equations(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    layout: &ProblemLayout,
    lambda: f64,
    gauge: Option<&Matrix3x2<f64>>,
) -> Option<(DVector<f64>, bool)> {
    let np = layout.n_pose_params;
    let nl = layout.n_params - np;

    let mut a = h.clone();
    for i in 0..layout.n_params {
        let d = (h[(i, i)] * lambda).max(lambda * 1e-6);
        a[(i, i)] += d;
    }

    // Schur eliminate the (diagonal) landmark block
    let mut h_pp = a.view((0, 0), (np, np)).into_owned();
    let mut g_p = g.rows(0, np).into_owned();
    let mut d_inv = DVector::zeros(nl);
    if nl > 0 {
        for i in 0..nl {
            let dii = a[(np + i, np + i)];
            if dii <= 0.0 {
                return None;
            }
            d_inv[i] = 1.0 / dii;
        }
        let h_pl = a.view((0, np), (np, nl)).into_owned();
        // h_pp -= h_pl D^{-1} h_lp
        let mut scaled = h_pl.clone();
        for i in 0..nl {
            let mut col = scaled.column_mut(i);
            col *= d_inv[i];
        }
        h_pp -= &scaled * h_pl.transpose();
        let g_l = g.rows(np, nl).into_owned();
        g_p -= &scaled * &g_l;
    }

    // optional gauge reduction of node 0: drop its position columns and the
    // yaw direction of its attitude block
    let (h_solve, g_solve, reduced_dim) = if let Some(n_basis) = gauge {
        let nr = np - 4; // 3 position + 1 yaw direction removed
        let mut t = DMatrix::zeros(np, nr);
        // node-0 block: p (3) dropped, θ -> 2 columns, v/bg/ba identity
        t.view_mut((3, 0), (3, 2)).copy_from(n_basis);
        for i in 0..9 {
            t[(6 + i, 2 + i)] = 1.0;
        }
        for i in 15..np {
            t[(i, i - 4)] = 1.0;
        }
        let h_red = t.transpose() * &h_pp * &t;
        let g_red = t.transpose() * &g_p;
        (h_red, g_red, Some((t, nr)))
    } else {
        (h_pp, g_p, None)
    };

    let chol = h_solve.clone().cholesky();
    let full_rank = chol.is_some();
    let chol = match chol {
        Some(c) => c,
        None => {
            let mut jittered = h_solve;
            let n = jittered.nrows();
            let tr = (0..n).map(|i| jittered[(i, i)]).sum::<f64>().max(1e-12);
            for i in 0..n {
                jittered[(i, i)] += 1e-10 * tr / n as f64;
            }
            jittered.cholesky()?
        }
    };
    let delta_red = chol.solve(&(-&g_solve));
    let delta_p = match reduced_dim {
        Some((t, _)) => t * delta_red,
        None => delta_red,
    };

    let mut delta = DVector::zeros(layout.n_params);
    delta.rows_mut(0, np).copy_from(&delta_p);
    if nl > 0 {
        let h_lp = a.view((np, 0), (nl, np));
        let g_l = g.rows(np, nl);
        let back = h_lp * &delta_p;
        for i in 0..nl {
            delta[np + i] = d_inv[i] * (-g_l[i] - back[i]);
        }
    }
    Some((delta, full_rank))
}

/// Run Levenberg–Marquardt on the given factors, updating the window states
/// in place on success.
pub fn levenberg_marquardt(
    window: &mut SlidingWindow,
    frame: &WorldFrame,
    factors: &[Factor],
    layout: &ProblemLayout,
    cfg: &SolverConfig,
    huber_delta: f64,
) -> OptimizeOutcome {
    let mut ws = WorkingState::from_window(window, layout);

    // gauge detection: no absolute constraint means position and yaw are
    // unobservable; hold node 0's position and yaw fixed
    let has_absolute = factors
        .iter()
        .any(|f| matches!(f.kind(), FactorKind::Gnss | FactorKind::Prior));
    let gauge = (!has_absolute && !ws.states.is_empty()).then(|| yaw_complement(&ws.states[0]));

    let mut cost = total_cost(factors, window, layout, &ws, frame, huber_delta);
    let initial_cost = cost;
    let mut lambda = cfg.lambda_init;
    let mut iterations = 0;
    let mut diverged = false;
    let mut full_rank_all = true;

    for _ in 0..cfg.max_iterations {
        iterations += 1;
        // assemble normal equations at the current state
        let n = layout.n_params;
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for factor in factors {
            let Some(eval) = evaluate(factor, window, layout, &ws, frame) else { continue };
            let s = eval.residual.norm_squared();
            let w = match factor.kind() {
                FactorKind::Visual => huber(s, huber_delta).1,
                _ => 1.0,
            };
            for (ca, ba) in &eval.blocks {
                for (cb, bb) in &eval.blocks {
                    let prod = ba.transpose() * bb * w;
                    let mut view = h.view_mut((*ca, *cb), (prod.nrows(), prod.ncols()));
                    view += prod;
                }
                let gi = ba.transpose() * &eval.residual * w;
                let mut view = g.rows_mut(*ca, gi.nrows());
                view += gi;
            }
        }

        // already at a stationary point
        if g.amax() < 1e-12 * (1.0 + cost) {
            break;
        }

        // try steps with increasing damping until one is accepted
        let mut accepted = false;
        let mut best_rejected = f64::INFINITY;
        while lambda <= cfg.lambda_max {
            let Some((delta, full_rank)) =
                solve_normal_equations(&h, &g, layout, lambda, gauge.as_ref())
            else {
                lambda *= 10.0;
                continue;
            };
            full_rank_all &= full_rank;
            let candidate = ws.retract_all(layout, &delta);
            let new_cost = total_cost(factors, window, layout, &candidate, frame, huber_delta);
            if new_cost.is_finite() && new_cost <= cost {
                let converged = (cost - new_cost) < cfg.cost_tolerance * cost.max(1e-30)
                    || delta.amax() < cfg.step_tolerance;
                ws = candidate;
                cost = new_cost;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if converged {
                    ws.write_back(window, layout);
                    return OptimizeOutcome {
                        initial_cost,
                        final_cost: cost,
                        iterations,
                        diverged: false,
                        full_rank: full_rank_all,
                        gauge_fixed: gauge.is_some(),
                    };
                }
                break;
            }
            best_rejected = best_rejected.min(new_cost);
            lambda *= 10.0;
        }
        if !accepted {
            // stalled at the numerical floor is convergence, a genuine cost
            // increase across all damping retries is divergence
            diverged = best_rejected > cost * (1.0 + 1e-9) + 1e-18;
            break;
        }
    }

    ws.write_back(window, layout);
    OptimizeOutcome {
        initial_cost,
        final_cost: cost,
        iterations,
        diverged,
        full_rank: full_rank_all,
        gauge_fixed: gauge.is_some(),
    }
}
