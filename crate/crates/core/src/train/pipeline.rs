//! Loss of one patch as a function of its weights and transforms, with the
//! reverse pass through the weighted fit.

use nalgebra::{DVector, Vector3};

use super::loss::{consistency_loss_with, reg_loss, reg_loss_grad, sin_loss, sin_loss_grad, LossTerms, LossWeights};
use crate::error::{Error, Result};
use crate::jet::{build_vandermonde, fit_wls, jet_gradient, jet_normal, make_preconditioner, JetOrder, WeightDiagonal};
use crate::weightnet::Mat;

/// Scalar multipliers for each loss term. `(1, α₁, α₂)` is the training objective;
/// other settings isolate single terms for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermScales {
    pub sin: f64,
    pub consistency: f64,
    pub reg: f64,
    /// Include `−Σ log w` in the consistency term.
    pub log_term: bool,
}

impl TermScales {
    pub fn objective(w: &LossWeights, log_term: bool) -> Self {
        TermScales {
            sin: 1.0,
            consistency: w.alpha1,
            reg: w.alpha2,
            log_term,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitSettings {
    pub order: JetOrder,
    pub ridge: f64,
}

/// Loss value of a sample; `normal` is the fitted local normal.
#[derive(Debug, Clone)]
pub struct SampleEval {
    pub terms: LossTerms,
    pub normal: Vector3<f64>,
}

/// Adjoints of one sample's loss with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub d_weights: Vec<f64>,
    pub d_a1: Option<Mat>,
    pub d_a2: Option<Mat>,
}

/// Per-neighbor monomial derivatives `∂mᶜ/∂x`, `∂mᶜ/∂y`.
fn monomial_derivatives(order: JetOrder, x: f64, y: f64) -> (Vec<f64>, Vec<f64>) {
    let exps = order.exponents();
    let mut dx = vec![0.0; exps.len()];
    let mut dy = vec![0.0; exps.len()];
    for (c, (a, b)) in exps.into_iter().enumerate() {
        if a > 0 {
            dx[c] = a as f64 * x.powi(a as i32 - 1) * y.powi(b as i32);
        }
        if b > 0 {
            dy[c] = b as f64 * x.powi(a as i32) * y.powi(b as i32 - 1);
        }
    }
    (dx, dy)
}

/// `d(v/|v|)` pulled back to `dv`.
fn normalize_backward(v: &Vector3<f64>, du: &Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    let u = v / n;
    (du - u * u.dot(du)) / n
}

/// Evaluates the loss of one patch and, if `want_grad`, its adjoints.
///
/// `points` are patch-local coordinates, `n_gt` the ground-truth normal in the
/// same frame. `a1`/`a2` are the transforms the network produced for the patch.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    points: &[Vector3<f64>],
    weights: &[f64],
    a1: Option<&Mat>,
    a2: Option<&Mat>,
    n_gt: &Vector3<f64>,
    fit: &FitSettings,
    scales: &TermScales,
    want_grad: bool,
) -> Result<(SampleEval, Option<SampleGrad>)> {
    let k = points.len();
    if weights.len() != k {
        return Err(Error::InvalidInput(format!("{} weights for {k} points", weights.len())));
    }
    let xy: Vec<[f64; 2]> = points.iter().map(|p| [p.x, p.y]).collect();
    let z: Vec<f64> = points.iter().map(|p| p.z).collect();
    let design = build_vandermonde(&xy, fit.order)?;
    let pre = make_preconditioner(&xy, fit.order)?;
    let wls = fit_wls(&design, &WeightDiagonal::new(weights.to_vec())?, &z, &pre, fit.ridge)?;
    let jet = &wls.coefficients;

    let v0 = Vector3::new(-jet.coeff(1, 0), -jet.coeff(0, 1), 1.0);
    let normal = jet_normal(jet);
    let sin = sin_loss(&normal, n_gt);

    let mut nbr_v = Vec::with_capacity(k);
    let mut nbr_n = Vec::with_capacity(k);
    for p in &xy {
        let (gx, gy) = jet_gradient(jet, p[0], p[1]);
        let v = Vector3::new(-gx, -gy, 1.0);
        nbr_n.push(v.normalize());
        nbr_v.push(v);
    }
    let con = consistency_loss_with(weights, &nbr_n, n_gt, scales.log_term)?;
    let transforms: Vec<&Mat> = [a1, a2].into_iter().flatten().collect();
    let reg = reg_loss(&transforms);

    let terms = LossTerms {
        sin,
        consistency: con,
        reg,
        total: scales.sin * sin + scales.consistency * con + scales.reg * reg,
    };
    let eval = SampleEval { terms, normal };
    if !want_grad {
        return Ok((eval, None));
    }

    let nc = fit.order.num_coeffs();
    let i1 = fit.order.index_of(1, 0).expect("order >= 1");
    let i2 = fit.order.index_of(0, 1).expect("order >= 1");
    let mut d_beta = DVector::zeros(nc);
    let mut d_w = vec![0.0; k];

    if scales.sin != 0.0 {
        let dv = normalize_backward(&v0, &(sin_loss_grad(&normal, n_gt) * scales.sin));
        d_beta[i1] -= dv.x;
        d_beta[i2] -= dv.y;
    }
    if scales.consistency != 0.0 {
        let c = scales.consistency / k as f64;
        for j in 0..k {
            let s = sin_loss(&nbr_n[j], n_gt);
            d_w[j] += c * (s - if scales.log_term { 1.0 / weights[j] } else { 0.0 });
            let dn = sin_loss_grad(&nbr_n[j], n_gt) * (c * weights[j]);
            let dv = normalize_backward(&nbr_v[j], &dn);
            // v = (−∂J/∂x, −∂J/∂y, 1)
            let (mx, my) = monomial_derivatives(fit.order, xy[j][0], xy[j][1]);
            for t in 0..nc {
                d_beta[t] -= dv.x * mx[t] + dv.y * my[t];
            }
        }
    }

    // β = D⁻¹β', (M'ᵀWM' + rI)β' = M'ᵀWB; implicit differentiation gives
    // ∂L/∂wⱼ = (m'ⱼ·λ)(Bⱼ − m'ⱼ·β') with λ solving the same system.
    let d_scaled = d_beta.component_div(&wls.precond.diag);
    if d_scaled.iter().any(|v| *v != 0.0) {
        let lambda = wls.solve_normal(&d_scaled);
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFault {
                layer: "wls_adjoint".into(),
                detail: "non-finite adjoint solve".into(),
            });
        }
        let mp = &wls.scaled_design;
        for j in 0..k {
            let row = mp.row(j);
            let ml = row.dot(&lambda.transpose());
            let resid = z[j] - row.dot(&wls.scaled_beta.transpose());
            d_w[j] += ml * resid;
        }
    }

    let reg_grad = |a: Option<&Mat>| {
        a.map(|a| {
            let mut g = reg_loss_grad(a);
            g.data.iter_mut().for_each(|v| *v *= scales.reg);
            g
        })
    };
    Ok((
        eval,
        Some(SampleGrad {
            d_weights: d_w,
            d_a1: reg_grad(a1),
            d_a2: reg_grad(a2),
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, k: usize) -> (Vec<Vector3<f64>>, Vec<f64>, Vector3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..k)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let y: f64 = rng.random_range(-1.0..1.0);
                let z = 0.2 * x - 0.1 * y + 0.3 * x * x - 0.2 * x * y + 0.1 * y * y * y + rng.random_range(-0.05..0.05);
                Vector3::new(x, y, z)
            })
            .collect();
        let w = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let g = Vector3::new(0.3, -0.2, 1.0).normalize();
        (pts, w, g)
    }

    #[test]
    fn weight_adjoint_matches_finite_differences() {
        let (pts, w, g) = setup(1, 24);
        let fit = FitSettings {
            order: JetOrder::new(3).unwrap(),
            ridge: 0.0,
        };
        for scales in [
            TermScales { sin: 1.0, consistency: 0.0, reg: 0.0, log_term: true },
            TermScales { sin: 0.0, consistency: 1.0, reg: 0.0, log_term: true },
            TermScales { sin: 0.0, consistency: 1.0, reg: 0.0, log_term: false },
            TermScales { sin: 1.0, consistency: 0.7, reg: 0.0, log_term: true },
        ] {
            let (_, grad) = sample_loss(&pts, &w, None, None, &g, &fit, &scales, true).unwrap();
            let grad = grad.unwrap().d_weights;
            let h = 1e-6;
            for j in 0..w.len() {
                let mut wp = w.clone();
                wp[j] += h;
                let mut wm = w.clone();
                wm[j] -= h;
                let fp = sample_loss(&pts, &wp, None, None, &g, &fit, &scales, false).unwrap().0.terms.total;
                let fm = sample_loss(&pts, &wm, None, None, &g, &fit, &scales, false).unwrap().0.terms.total;
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - grad[j]).abs() / fd.abs().max(1e-6);
                assert!(err < 1e-5, "{scales:?} j={j}: fd {fd} vs {}", grad[j]);
            }
        }
    }

    #[test]
    fn transform_adjoint_matches_finite_differences() {
        let (pts, w, g) = setup(2, 16);
        let fit = FitSettings {
            order: JetOrder::new(2).unwrap(),
            ridge: 1e-8,
        };
        let scales = TermScales { sin: 1.0, consistency: 1.0, reg: 0.5, log_term: true };
        let a = Mat::from_vec(3, 3, vec![1.1, 0.2, -0.1, 0.05, 0.9, 0.3, -0.2, 0.1, 1.3]);
        let (_, grad) = sample_loss(&pts, &w, Some(&a), None, &g, &fit, &scales, true).unwrap();
        let da = grad.unwrap().d_a1.unwrap();
        let h = 1e-7;
        for i in 0..9 {
            let mut ap = a.clone();
            ap.data[i] += h;
            let mut am = a.clone();
            am.data[i] -= h;
            let fp = sample_loss(&pts, &w, Some(&ap), None, &g, &fit, &scales, false).unwrap().0.terms.total;
            let fm = sample_loss(&pts, &w, Some(&am), None, &g, &fit, &scales, false).unwrap().0.terms.total;
            assert!(((fp - fm) / (2.0 * h) - da.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn perfect_plane_has_zero_loss() {
        let pts: Vec<Vector3<f64>> = (0..25).map(|i| Vector3::new((i % 5) as f64 - 2.0, (i / 5) as f64 - 2.0, 0.0)).collect();
        let fit = FitSettings {
            order: JetOrder::new(2).unwrap(),
            ridge: 0.0,
        };
        let eye = Mat::identity(3);
        let scales = TermScales::objective(&LossWeights::default(), true);
        let (eval, _) = sample_loss(&pts, &[1.0; 25], Some(&eye), None, &Vector3::z(), &fit, &scales, false).unwrap();
        assert!(eval.terms.total.abs() < 1e-12);
    }
}
