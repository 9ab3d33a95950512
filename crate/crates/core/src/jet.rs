//! Truncated Taylor expansions ("n-jets") of a height function z = f(x, y).
//!
//! Coefficients are enumerated by ascending total degree `k`, then ascending
//! y-exponent `i`, i.e. the monomial of column `j` is `x^(k-i) y^i`:
//!
//! ```text
//! 1, x, y, x², xy, y², x³, x²y, xy², y³, ...
//! ```
//!
//! Fitting goes through a column-preconditioned normal system solved by
//! Cholesky; [`WlsFit`] keeps the factorization around so the training code
//! can run the adjoint solve without refactoring.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2, Vector2, Vector3};

use crate::error::{Error, Result};

/// Ridge added to the preconditioned normal matrix unless the caller overrides it.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Ridge escalation stops here and reports a singular fit.
pub const MAX_RIDGE: f64 = 1e-2;

const RIDGE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct JetOrder(u8);

impl JetOrder {
    pub const MAX: u8 = 4;

    pub fn new(n: u8) -> Result<Self> {
        if (1..=Self::MAX).contains(&n) {
            Ok(JetOrder(n))
        } else {
            Err(Error::InvalidInput(format!(
                "jet order must be in 1..={}, got {n}",
                Self::MAX
            )))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// N_n = (n+1)(n+2)/2.
    pub fn num_coeffs(self) -> usize {
        let n = self.0 as usize;
        (n + 1) * (n + 2) / 2
    }

    /// Monomial exponents `(a, b)` of `x^a y^b` in canonical column order.
    pub fn exponents(self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.num_coeffs());
        for k in 0..=self.0 as u32 {
            for i in 0..=k {
                out.push((k - i, i));
            }
        }
        out
    }

    /// Column index of `x^a y^b`, if it belongs to this order.
    pub fn index_of(self, a: u32, b: u32) -> Option<usize> {
        let k = a + b;
        if k > self.0 as u32 {
            return None;
        }
        Some((k * (k + 1) / 2 + b) as usize)
    }
}

impl TryFrom<u8> for JetOrder {
    type Error = Error;
    fn try_from(n: u8) -> Result<Self> {
        JetOrder::new(n)
    }
}

impl From<JetOrder> for u8 {
    fn from(o: JetOrder) -> u8 {
        o.0
    }
}

impl std::fmt::Display for JetOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Vandermonde matrix of monomial values, one row per sample point.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub order: JetOrder,
}

impl DesignMatrix {
    pub fn num_points(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn exponents(&self) -> Vec<(u32, u32)> {
        self.order.exponents()
    }
}

/// Column scaling `D = diag(h^(a+b))` so that `M' = M D⁻¹` has O(1) columns.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    pub h: f64,
    pub diag: DVector<f64>,
}

impl Preconditioner {
    /// Preconditioner with `h = 1`, i.e. no scaling.
    pub fn identity(order: JetOrder) -> Self {
        Preconditioner {
            h: 1.0,
            diag: DVector::from_element(order.num_coeffs(), 1.0),
        }
    }

    pub fn from_scale(h: f64, order: JetOrder) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::DegeneratePatch(format!(
                "preconditioner scale must be positive, got {h}"
            )));
        }
        let diag = order
            .exponents()
            .into_iter()
            .map(|(a, b)| h.powi((a + b) as i32))
            .collect::<Vec<_>>();
        Ok(Preconditioner {
            h,
            diag: DVector::from_vec(diag),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JetCoefficients {
    pub beta: DVector<f64>,
    pub order: JetOrder,
}

impl JetCoefficients {
    pub fn new(beta: DVector<f64>, order: JetOrder) -> Result<Self> {
        if beta.len() != order.num_coeffs() {
            return Err(Error::InvalidInput(format!(
                "order {order} jet needs {} coefficients, got {}",
                order.num_coeffs(),
                beta.len()
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidInput("non-finite jet coefficient".into()));
        }
        Ok(JetCoefficients { beta, order })
    }

    /// Coefficient of `x^a y^b`; zero for monomials above the jet order.
    pub fn coeff(&self, a: u32, b: u32) -> f64 {
        self.order.index_of(a, b).map_or(0.0, |i| self.beta[i])
    }
}

/// Strictly positive per-point weights, the diagonal of `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDiagonal(Vec<f64>);

impl WeightDiagonal {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "weight {i} must be positive and finite, got {v}"
            )));
        }
        Ok(WeightDiagonal(w))
    }

    pub fn uniform(n: usize) -> Self {
        WeightDiagonal(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Principal curvatures and directions, expressed in the jet's local frame.
///
/// Sorted so that `|k1| >= |k2|`. Signs follow the shape operator computed
/// with the upward jet normal `(-β₁, -β₂, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvaturePair {
    pub k1: f64,
    pub k2: f64,
    pub dir1: Vector3<f64>,
    pub dir2: Vector3<f64>,
}

fn powers(v: f64, n: usize) -> [f64; JetOrder::MAX as usize + 1] {
    let mut p = [0.0; JetOrder::MAX as usize + 1];
    p[0] = 1.0;
    for i in 1..=n {
        p[i] = p[i - 1] * v;
    }
    p
}

pub fn build_vandermonde(points: &[[f64; 2]], order: JetOrder) -> Result<DesignMatrix> {
    if points.is_empty() {
        return Err(Error::InvalidInput("Vandermonde matrix needs at least one point".into()));
    }
    let exps = order.exponents();
    let n = order.get() as usize;
    let mut m = DMatrix::zeros(points.len(), exps.len());
    for (r, p) in points.iter().enumerate() {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite coordinate at point {r}")));
        }
        let px = powers(p[0], n);
        let py = powers(p[1], n);
        for (c, &(a, b)) in exps.iter().enumerate() {
            m[(r, c)] = px[a as usize] * py[b as usize];
        }
    }
    Ok(DesignMatrix { matrix: m, order })
}

/// `h` is the mean norm of the 2D sample coordinates.
pub fn make_preconditioner(points: &[[f64; 2]], order: JetOrder) -> Result<Preconditioner> {
    if points.is_empty() {
        return Err(Error::InvalidInput("preconditioner needs at least one point".into()));
    }
    let h = points.iter().map(|p| p[0].hypot(p[1])).sum::<f64>() / points.len() as f64;
    if h <= 0.0 {
        return Err(Error::DegeneratePatch("all points project onto the origin".into()));
    }
    Preconditioner::from_scale(h, order)
}

/// Result of a weighted fit, retaining what the adjoint solve needs.
#[derive(Debug, Clone)]
pub struct WlsFit {
    pub coefficients: JetCoefficients,
    /// `β' = D β`, the solution of the preconditioned system.
    pub scaled_beta: DVector<f64>,
    /// `M' = M D⁻¹`.
    pub scaled_design: DMatrix<f64>,
    /// Cholesky factor of `M'ᵀ W M' + ridge·I`.
    pub factor: Cholesky<f64, Dyn>,
    pub ridge_used: f64,
    pub precond: Preconditioner,
}

impl WlsFit {
    /// Solve `(M'ᵀ W M' + ridge·I) x = rhs` with the stored factor.
    pub fn solve_normal(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(rhs)
    }
}

fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Weighted fit minimizing `Σ wᵢ (Mᵢβ − Bᵢ)²` through the preconditioned system.
pub fn fit_wls(
    design: &DesignMatrix,
    weights: &WeightDiagonal,
    heights: &[f64],
    precond: &Preconditioner,
    ridge: f64,
) -> Result<WlsFit> {
    let m = &design.matrix;
    let (np, nc) = m.shape();
    if weights.len() != np || heights.len() != np {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: {np} rows, {} weights, {} heights",
            weights.len(),
            heights.len()
        )));
    }
    if precond.diag.len() != nc {
        return Err(Error::InvalidInput(format!(
            "preconditioner has {} entries for {nc} columns",
            precond.diag.len()
        )));
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::InvalidInput(format!("ridge must be >= 0, got {ridge}")));
    }
    if heights.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidInput("non-finite height value".into()));
    }

    let mut scaled = m.clone();
    for (c, d) in precond.diag.iter().enumerate() {
        scaled.column_mut(c).scale_mut(1.0 / d);
    }
    let w = weights.as_slice();
    let mut weighted = scaled.clone();
    for (r, wr) in w.iter().enumerate() {
        weighted.row_mut(r).scale_mut(*wr);
    }
    let normal = scaled.transpose() * &weighted;
    let rhs = weighted.transpose() * DVector::from_column_slice(heights);

    let mut r = ridge;
    loop {
        let mut a = normal.clone();
        for i in 0..nc {
            a[(i, i)] += r;
        }
        if let Some(factor) = Cholesky::new(a) {
            let scaled_beta = factor.solve(&rhs);
            if scaled_beta.iter().all(|v| v.is_finite()) {
                let beta = scaled_beta.component_div(&precond.diag);
                return Ok(WlsFit {
                    coefficients: JetCoefficients {
                        beta,
                        order: design.order,
                    },
                    scaled_beta,
                    scaled_design: scaled,
                    factor,
                    ridge_used: r,
                    precond: precond.clone(),
                });
            }
        }
        let next = if r < RIDGE_FLOOR { RIDGE_FLOOR } else { r * 10.0 };
        if next > MAX_RIDGE * (1.0 + 1e-9) {
            return Err(Error::SingularFit {
                condition: condition_estimate(&normal),
                ridge: r,
            });
        }
        r = next;
    }
}

pub fn solve_wls(
    design: &DesignMatrix,
    weights: &WeightDiagonal,
    heights: &[f64],
    precond: &Preconditioner,
    ridge: f64,
) -> Result<JetCoefficients> {
    fit_wls(design, weights, heights, precond, ridge).map(|f| f.coefficients)
}

pub fn solve_ls(
    design: &DesignMatrix,
    heights: &[f64],
    precond: &Preconditioner,
    ridge: f64,
) -> Result<JetCoefficients> {
    let w = WeightDiagonal::uniform(design.num_points());
    solve_wls(design, &w, heights, precond, ridge)
}

/// Unit normal `(−β₁, −β₂, 1)/‖·‖` at the origin of the local frame.
pub fn jet_normal(jet: &JetCoefficients) -> Vector3<f64> {
    Vector3::new(-jet.coeff(1, 0), -jet.coeff(0, 1), 1.0).normalize()
}

/// Shape operator `−(1/√(β₁²+β₂²+1)) · I⁻¹ · II` at the origin.
pub fn weingarten(jet: &JetCoefficients) -> Result<Matrix2<f64>> {
    if jet.order.get() < 2 {
        return Err(Error::UnsupportedOrder(jet.order.get()));
    }
    let b1 = jet.coeff(1, 0);
    let b2 = jet.coeff(0, 1);
    let b3 = jet.coeff(2, 0);
    let b4 = jet.coeff(1, 1);
    let b5 = jet.coeff(0, 2);
    let first = Matrix2::new(1.0 + b1 * b1, b1 * b2, b1 * b2, 1.0 + b2 * b2);
    let second = Matrix2::new(2.0 * b3, b4, b4, 2.0 * b5);
    // det(first) = 1 + β₁² + β₂² >= 1, never singular
    let inv = first.try_inverse().expect("first fundamental form is positive definite");
    let scale = -1.0 / (b1 * b1 + b2 * b2 + 1.0).sqrt();
    Ok(inv * second * scale)
}

fn eigvec_2x2(m: &Matrix2<f64>, lambda: f64) -> Option<Vector2<f64>> {
    let v1 = Vector2::new(m[(0, 1)], lambda - m[(0, 0)]);
    let v2 = Vector2::new(lambda - m[(1, 1)], m[(1, 0)]);
    let scale = m.abs().max().max(1e-300);
    let v = if v1.norm_squared() >= v2.norm_squared() { v1 } else { v2 };
    if v.norm() <= 1e-12 * scale {
        None
    } else {
        Some(v.normalize())
    }
}

pub fn principal_curvatures(jet: &JetCoefficients) -> Result<CurvaturePair> {
    let w = weingarten(jet)?;
    let half_tr = 0.5 * (w[(0, 0)] + w[(1, 1)]);
    let det = w.determinant();
    // real spectrum: W is similar to a symmetric matrix
    let disc = (half_tr * half_tr - det).max(0.0).sqrt();
    let (mut k1, mut k2) = (half_tr + disc, half_tr - disc);
    if k2.abs() > k1.abs() {
        std::mem::swap(&mut k1, &mut k2);
    }

    let b1 = jet.coeff(1, 0);
    let b2 = jet.coeff(0, 1);
    let normal = jet_normal(jet);
    let xu = Vector3::new(1.0, 0.0, b1);
    let xv = Vector3::new(0.0, 1.0, b2);
    let param_dir = eigvec_2x2(&w, k1).unwrap_or_else(|| Vector2::new(1.0, 0.0));
    let dir1 = (xu * param_dir[0] + xv * param_dir[1]).normalize();
    let dir2 = normal.cross(&dir1).normalize();
    Ok(CurvaturePair { k1, k2, dir1, dir2 })
}

/// Partial derivatives `(∂J/∂x, ∂J/∂y)` at `(x, y)`.
pub fn jet_gradient(jet: &JetCoefficients, x: f64, y: f64) -> (f64, f64) {
    let n = jet.order.get() as usize;
    let px = powers(x, n);
    let py = powers(y, n);
    let mut gx = 0.0;
    let mut gy = 0.0;
    for (c, (a, b)) in jet.order.exponents().into_iter().enumerate() {
        let (a, b) = (a as usize, b as usize);
        if a > 0 {
            gx += jet.beta[c] * a as f64 * px[a - 1] * py[b];
        }
        if b > 0 {
            gy += jet.beta[c] * b as f64 * px[a] * py[b - 1];
        }
    }
    (gx, gy)
}

/// Normals `∇F/‖∇F‖` of the implicit surface `F = z − J(x, y)` at each point.
pub fn neighbor_normals(jet: &JetCoefficients, points: &[[f64; 2]]) -> Vec<Vector3<f64>> {
    points
        .iter()
        .map(|p| {
            let (gx, gy) = jet_gradient(jet, p[0], p[1]);
            Vector3::new(-gx, -gy, 1.0).normalize()
        })
        .collect()
}

pub fn evaluate_jet(jet: &JetCoefficients, x: f64, y: f64) -> f64 {
    let n = jet.order.get() as usize;
    let px = powers(x, n);
    let py = powers(y, n);
    jet.order
        .exponents()
        .into_iter()
        .enumerate()
        .map(|(c, (a, b))| jet.beta[c] * px[a as usize] * py[b as usize])
        .sum()
}
