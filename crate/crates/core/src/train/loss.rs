//! Loss terms and their local derivatives.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::weightnet::Mat;

/// Multipliers of the consistency and transform-regularization terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 1.0,
            alpha2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0 && self.alpha1.is_finite() && self.alpha2.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got alpha1={} alpha2={}",
                self.alpha1, self.alpha2
            )));
        }
        Ok(())
    }
}

/// `‖n_gt × n‖`, the sine of the unoriented angle between unit vectors.
pub fn sin_loss(n_est: &Vector3<f64>, n_gt: &Vector3<f64>) -> f64 {
    n_gt.cross(n_est).norm()
}

/// `∂ sin_loss / ∂ n_est`; zero where the loss is not differentiable.
pub fn sin_loss_grad(n_est: &Vector3<f64>, n_gt: &Vector3<f64>) -> Vector3<f64> {
    let c = n_gt.cross(n_est);
    let s = c.norm();
    if s <= 0.0 {
        Vector3::zeros()
    } else {
        c.cross(n_gt) / s
    }
}

/// `(1/k)[−Σ log wⱼ + Σ wⱼ ‖n_gt × Nⱼ‖]`. With `log_term` false the first sum is dropped.
pub fn consistency_loss_with(
    weights: &[f64],
    neighbor_normals: &[Vector3<f64>],
    n_gt: &Vector3<f64>,
    log_term: bool,
) -> Result<f64> {
    if weights.len() != neighbor_normals.len() || weights.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} neighbor normals",
            weights.len(),
            neighbor_normals.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| w.is_nan() || **w <= 0.0) {
        return Err(Error::InvalidInput(format!("weights must be positive, got {w}")));
    }
    let k = weights.len() as f64;
    let mut total = 0.0;
    for (w, nj) in weights.iter().zip(neighbor_normals) {
        if log_term {
            total -= w.ln();
        }
        total += w * sin_loss(nj, n_gt);
    }
    Ok(total / k)
}

pub fn consistency_loss(weights: &[f64], neighbor_normals: &[Vector3<f64>], n_gt: &Vector3<f64>) -> Result<f64> {
    consistency_loss_with(weights, neighbor_normals, n_gt, true)
}

/// `Σ_A Σ_ab |(I − AAᵀ)_ab|` over the given square matrices.
pub fn reg_loss(transforms: &[&Mat]) -> f64 {
    transforms.iter().map(|a| reg_residual(a).data.iter().map(|v| v.abs()).sum::<f64>()).sum()
}

fn reg_residual(a: &Mat) -> Mat {
    assert_eq!(a.rows, a.cols, "transform must be square");
    let aat = crate::weightnet::tensor::matmul(a, &a.transpose());
    let mut e = Mat::identity(a.rows);
    e.data.iter_mut().zip(&aat.data).for_each(|(x, y)| *x -= y);
    e
}

/// `∂/∂A Σ|I − AAᵀ| = −2 sign(E) A` (E is symmetric).
pub fn reg_loss_grad(a: &Mat) -> Mat {
    let mut s = reg_residual(a);
    s.data.iter_mut().for_each(|v| *v = if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 });
    let mut g = crate::weightnet::tensor::matmul(&s, a);
    g.data.iter_mut().for_each(|v| *v *= -2.0);
    g
}

/// The three terms of one sample and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub sin: f64,
    pub consistency: f64,
    pub reg: f64,
    pub total: f64,
}

pub fn total_loss(sin: f64, consistency: f64, reg: f64, w: &LossWeights) -> LossTerms {
    LossTerms {
        sin,
        consistency,
        reg,
        total: sin + w.alpha1 * consistency + w.alpha2 * reg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sin_loss_examples() {
        let z = Vector3::z();
        assert_eq!(sin_loss(&z, &z), 0.0);
        assert!((sin_loss(&Vector3::x(), &z) - 1.0).abs() < 1e-15);
        assert_eq!(sin_loss(&-z, &z), 0.0);
    }

    #[test]
    fn consistency_examples() {
        let z = Vector3::z();
        assert_eq!(consistency_loss(&[1.0; 4], &[z; 4], &z).unwrap(), 0.0);
        assert!((consistency_loss(&[1.0], &[Vector3::x()], &z).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(consistency_loss(&[0.0], &[z], &z), Err(Error::InvalidInput(_))));
        let a = consistency_loss(&[1e-3], &[z], &z).unwrap();
        let b = consistency_loss(&[1e-6], &[z], &z).unwrap();
        let c = consistency_loss(&[1e-9], &[z], &z).unwrap();
        assert!(a < b && b < c);
    }

    #[test]
    fn reg_examples() {
        let two = Mat::from_vec(3, 3, vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]);
        assert_eq!(reg_loss(&[&two]), 9.0);
        let c = 0.6f64;
        let s = 0.8f64;
        let rot = Mat::from_vec(3, 3, vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        assert!(reg_loss(&[&rot]) < 1e-15);
    }

    #[test]
    fn totals_combine_terms() {
        let t = total_loss(0.3, 0.5, 2.0, &LossWeights::default());
        assert!((t.total - (0.3 + 0.5 + 0.2)).abs() < 1e-15);
        let t = total_loss(0.3, 0.5, 2.0, &LossWeights { alpha1: 0.0, alpha2: 0.0 });
        assert_eq!(t.total, 0.3);
    }

    fn unit(v: [f64; 3]) -> Option<Vector3<f64>> {
        let v = Vector3::from(v);
        (v.norm() > 1e-3).then(|| v.normalize())
    }

    proptest! {
        #[test]
        fn consistency_matches_direct_formula(
            ws in prop::collection::vec(1e-4f64..1.0001, 1..20),
            raw in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 20),
            g in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let Some(g) = unit(g) else { return Ok(()) };
            let ns: Vec<Vector3<f64>> = raw.iter().take(ws.len()).map(|v| unit(*v).unwrap_or(Vector3::z())).collect();
            let mut direct = 0.0;
            for (w, n) in ws.iter().zip(&ns) {
                // |g × n| = sqrt(1 − (g·n)²) for unit vectors
                let d = g.dot(n).clamp(-1.0, 1.0);
                direct += -w.ln() + w * (1.0 - d * d).max(0.0).sqrt();
            }
            direct /= ws.len() as f64;
            let got = consistency_loss(&ws, &ns, &g).unwrap();
            prop_assert!((got - direct).abs() < 1e-7 * (1.0 + direct.abs()));
        }

        #[test]
        fn reg_matches_elementwise_sum(vals in prop::collection::vec(-2.0f64..2.0, 9)) {
            let a = Mat::from_vec(3, 3, vals.clone());
            let mut direct = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|t| vals[i * 3 + t] * vals[j * 3 + t]).sum();
                    let e = if i == j { 1.0 } else { 0.0 } - dot;
                    direct += e.abs();
                }
            }
            prop_assert!((reg_loss(&[&a]) - direct).abs() < 1e-12);
        }

        #[test]
        fn total_loss_non_negative(
            s in 0.0f64..1.0, c in 0.0f64..10.0, r in 0.0f64..10.0,
            a1 in 0.0f64..5.0, a2 in 0.0f64..5.0,
        ) {
            let t = total_loss(s, c, r, &LossWeights { alpha1: a1, alpha2: a2 });
            prop_assert!(t.total >= 0.0);
            prop_assert!((t.total - (s + a1 * c + a2 * r)).abs() < 1e-12);
        }

        #[test]
        fn sin_grad_matches_finite_difference(
            n in prop::array::uniform3(-1.0f64..1.0),
            g in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let (Some(n), Some(g)) = (unit(n), unit(g)) else { return Ok(()) };
            prop_assume!(sin_loss(&n, &g) > 1e-2);
            let grad = sin_loss_grad(&n, &g);
            let h = 1e-6;
            for i in 0..3 {
                let mut p = n;
                p[i] += h;
                let mut m = n;
                m[i] -= h;
                let fd = (sin_loss(&p, &g) - sin_loss(&m, &g)) / (2.0 * h);
                prop_assert!((fd - grad[i]).abs() < 1e-6);
            }
        }
    }
}
