//! Kernel, linear mean, Gram matrix and batch posterior prediction.
//!
//! One kernel and one Gram matrix are shared across all output dimensions, so
//! the posterior has a vector mean and a single scalar variance.

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Computed variances in `[-VAR_HEALTH_LIMIT, 0)` are rounding noise and clamp to zero.
pub const VAR_HEALTH_LIMIT: f64 = 1e-6;
/// Below this a negative variance is worth a log line even though it is clamped.
pub const VAR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// RBF spread, in feature units.
    pub sigma_rbf: f64,
    /// Observation-noise standard deviation.
    pub sigma_n: f64,
    /// Cap on the number of stored observations (the Gram size).
    pub max_size: usize,
    /// Feedback gain applied to the feature error before querying the model.
    pub eta: f64,
    /// Relative singular-value cutoff for the linear-mean fit. Zero keeps the
    /// exact minimum-norm least-squares fit (machine-precision rank only).
    #[serde(default)]
    pub mean_rcond: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams { sigma_rbf: 0.6, sigma_n: 0.001, max_size: 300, eta: 0.1, mean_rcond: 0.0 }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_rbf > 0.0 && self.sigma_rbf.is_finite()) {
            return Err(Error::config("sigma_rbf", "must be a positive finite number"));
        }
        if !(self.sigma_n > 0.0 && self.sigma_n.is_finite()) {
            return Err(Error::config("sigma_n", "must be a positive finite number"));
        }
        if self.max_size < 2 {
            return Err(Error::config("max_size", "must be at least 2"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", "must be a positive finite number"));
        }
        if !(0.0..1.0).contains(&self.mean_rcond) {
            return Err(Error::config("mean_rcond", "must be in [0, 1)"));
        }
        Ok(())
    }

    #[inline]
    pub fn noise_var(&self) -> f64 {
        self.sigma_n * self.sigma_n
    }
}

/// Weights of the linear mean `m(dx) = W dx`, shape `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanWeights(pub DMatrix<f64>);

impl MeanWeights {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        MeanWeights(DMatrix::zeros(out_dim, in_dim))
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.0 * x
    }

    pub fn in_dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.0.nrows()
    }
}

/// Ordered training pairs `(dx_t, dp_t)`: feature velocity in, manipulated-point velocity out.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    in_dim: usize,
    out_dim: usize,
    pub(crate) inputs: Vec<DVector<f64>>,
    pub(crate) outputs: Vec<DVector<f64>>,
}

impl Dataset {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Dataset { in_dim, out_dim, inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn from_pairs(
        in_dim: usize,
        out_dim: usize,
        pairs: impl IntoIterator<Item = (DVector<f64>, DVector<f64>)>,
    ) -> Result<Self> {
        let mut data = Dataset::new(in_dim, out_dim);
        for (x, y) in pairs {
            data.push(x, y)?;
        }
        Ok(data)
    }

    pub fn push(&mut self, x: DVector<f64>, y: DVector<f64>) -> Result<()> {
        check_dim(self.in_dim, x.len())?;
        check_dim(self.out_dim, y.len())?;
        self.inputs.push(x);
        self.outputs.push(y);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[DVector<f64>] {
        &self.outputs
    }
}

/// Predictive distribution `N(mu, var)` at a query; `var` is shared by all outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mu: DVector<f64>,
    pub var: f64,
}

#[inline]
pub(crate) fn rbf_unchecked(a: &[f64], b: &[f64], sigma_rbf: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * sigma_rbf * sigma_rbf)).exp()
}

/// `k(a, b) = exp(-|a - b|^2 / (2 sigma_rbf^2))`.
pub fn rbf_kernel(a: &DVector<f64>, b: &DVector<f64>, sigma_rbf: f64) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    if !(sigma_rbf > 0.0) {
        return Err(Error::InvalidInput("sigma_rbf must be positive".into()));
    }
    Ok(rbf_unchecked(a.as_slice(), b.as_slice(), sigma_rbf))
}

/// Kernel vector between every stored input and `x`.
pub(crate) fn kernel_column(inputs: &[DVector<f64>], x: &DVector<f64>, sigma_rbf: f64) -> DVector<f64> {
    DVector::from_iterator(inputs.len(), inputs.iter().map(|xi| rbf_unchecked(xi.as_slice(), x.as_slice(), sigma_rbf)))
}

/// Least-squares fit of `W` minimising `sum_t |dp_t - W dx_t|^2`.
///
/// Rank-deficient inputs yield the minimum-norm solution; an empty dataset
/// yields zero weights.
pub fn fit_linear_mean(data: &Dataset) -> Result<MeanWeights> {
    fit_linear_mean_truncated(data, 0.0)
}

/// As [`fit_linear_mean`], but input directions whose singular value is below
/// `rcond * s_max` are treated as null. With highly redundant features (a
/// histogram moved by a few grippers) the exact fit inverts directions that
/// only second-order effects excite; cutting them trades a small residual for
/// far smaller weights.
pub fn fit_linear_mean_truncated(data: &Dataset, rcond: f64) -> Result<MeanWeights> {
    let (n, d, m) = (data.len(), data.in_dim(), data.out_dim());
    if n == 0 || d == 0 {
        return Ok(MeanWeights::zeros(m, d));
    }
    // Input dimensions that are zero in every sample get zero weight; keeping
    // them out of the factorisation also avoids exactly-zero singular values.
    let active: Vec<usize> = (0..d).filter(|&j| data.inputs.iter().any(|x| x[j] != 0.0)).collect();
    let mut w = DMatrix::zeros(m, d);
    if active.is_empty() {
        return Ok(MeanWeights(w));
    }
    let x = DMatrix::from_fn(n, active.len(), |i, j| data.inputs[i][active[j]]);
    let y = DMatrix::from_fn(n, m, |i, j| data.outputs[i][j]);
    let mut wt = least_squares(x.clone(), &y, rcond)?;
    if wt.iter().any(|v| !v.is_finite()) {
        // The bidiagonalisation of the transpose is a different sweep and
        // recovers when the direct one breaks down on a rank-deficient input.
        let t = SVD::try_new(x.transpose(), true, true, f64::EPSILON, 0)
            .ok_or_else(|| Error::NumericalHealth("SVD of mean-fit inputs did not converge".into()))?;
        wt = min_norm_solve(t.v_t.unwrap().transpose(), &t.singular_values, t.u.unwrap(), &y, n.max(d), rcond);
    }
    if wt.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalHealth("mean fit produced non-finite weights".into()));
    }
    for (k, &j) in active.iter().enumerate() {
        w.set_column(j, &wt.row(k).transpose());
    }
    Ok(MeanWeights(w))
}

fn least_squares(x: DMatrix<f64>, y: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>> {
    let dim = x.nrows().max(x.ncols());
    let svd = SVD::try_new(x, true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::NumericalHealth("SVD of mean-fit inputs did not converge".into()))?;
    Ok(min_norm_solve(svd.u.unwrap(), &svd.singular_values, svd.v_t.unwrap(), y, dim, rcond))
}

/// `V S^+ U^T y` for `X = U S V^T`, cutting singular values at the usual
/// rank tolerance or `rcond * s_max`, whichever is larger.
fn min_norm_solve(
    u: DMatrix<f64>,
    s: &DVector<f64>,
    v_t: DMatrix<f64>,
    y: &DMatrix<f64>,
    dim: usize,
    rcond: f64,
) -> DMatrix<f64> {
    let s_max = s.max();
    let eps = s_max * (dim as f64 * f64::EPSILON).max(rcond);
    let mut out = DMatrix::zeros(v_t.ncols(), y.ncols());
    if s_max <= 0.0 {
        return out;
    }
    // Null-space vectors are never touched, so breakdown there cannot leak
    // into the solution.
    for i in (0..s.len()).filter(|&i| s[i] > eps) {
        let coef = (u.column(i).transpose() * y) / s[i];
        out += v_t.row(i).transpose() * coef;
    }
    out
}

/// `A = K + sigma_n^2 I` over `inputs`.
pub fn gram_matrix(inputs: &[DVector<f64>], hp: &Hyperparams) -> Result<DMatrix<f64>> {
    let Some(first) = inputs.first() else {
        return Err(Error::InvalidInput("gram matrix of an empty input set".into()));
    };
    let d = first.len();
    for x in inputs {
        check_dim(d, x.len())?;
    }
    let n = inputs.len();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = 1.0 + hp.noise_var();
        for j in 0..i {
            let k = rbf_unchecked(inputs[i].as_slice(), inputs[j].as_slice(), hp.sigma_rbf);
            a[(i, j)] = k;
            a[(j, i)] = k;
        }
    }
    Ok(a)
}

/// Dense inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol =
        a.clone().cholesky().ok_or_else(|| Error::NumericalHealth("Gram matrix is not positive definite".into()))?;
    Ok(chol.inverse())
}

pub(crate) fn clamp_variance(raw: f64) -> Result<f64> {
    if !raw.is_finite() {
        return Err(Error::NumericalHealth(format!("non-finite posterior variance {raw}")));
    }
    if raw >= 0.0 {
        return Ok(raw);
    }
    if raw < -VAR_HEALTH_LIMIT {
        return Err(Error::NumericalHealth(format!("posterior variance {raw:e} is below -{VAR_HEALTH_LIMIT:e}")));
    }
    if raw < -VAR_TOL {
        log::debug!("clamping negative posterior variance {raw:e}");
    }
    Ok(0.0)
}

/// Posterior at `query` given a dataset and the inverse of its Gram matrix.
///
/// `mu = W q + k^T A^-1 (P - W X)`, `var = k(q, q) - k^T A^-1 k`.
pub fn gp_predict(
    data: &Dataset,
    a_inv: &DMatrix<f64>,
    w: &MeanWeights,
    hp: &Hyperparams,
    query: &DVector<f64>,
) -> Result<Posterior> {
    check_dim(data.in_dim(), query.len())?;
    check_dim(data.in_dim(), w.in_dim())?;
    check_dim(data.out_dim(), w.out_dim())?;
    let n = data.len();
    let mut mu = w.apply(query);
    if n == 0 {
        return Ok(Posterior { mu, var: 1.0 });
    }
    check_dim(n, a_inv.nrows())?;
    check_dim(n, a_inv.ncols())?;

    let k = kernel_column(&data.inputs, query, hp.sigma_rbf);
    // k^T A^-1, as a column
    let kt_ainv = a_inv.tr_mul(&k);
    for (i, (x, p)) in data.inputs.iter().zip(&data.outputs).enumerate() {
        let c = kt_ainv[i];
        if c == 0.0 {
            continue;
        }
        let resid = p - w.apply(x);
        mu.axpy(c, &resid, 1.0);
    }
    let var = clamp_variance(1.0 - kt_ainv.dot(&k))?;
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalHealth("non-finite posterior mean".into()));
    }
    Ok(Posterior { mu, var })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;
    use rand::{rngs::StdRng, RngExt, SeedableRng};

    fn rand_vec(rng: &mut StdRng, d: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.random_range(-scale..scale))
    }

    #[test]
    fn kernel_closed_forms() {
        let a = dvector![0.3, -1.2];
        assert_eq!(rbf_kernel(&a, &a, 0.6).unwrap(), 1.0);
        let k = rbf_kernel(&dvector![0.0], &dvector![0.6], 0.6).unwrap();
        assert!((k - (-0.5f64).exp()).abs() < 1e-15);
        assert!((k - 0.60653).abs() < 1e-5);
        let k = rbf_kernel(&dvector![1.0, 0.0], &dvector![0.0, 1.0], 0.6).unwrap();
        assert!((k - (-2.0 / 0.72f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_rejects_mismatched_dims() {
        let err = rbf_kernel(&dvector![1.0], &dvector![1.0, 2.0], 0.6).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn linear_mean_exact_cases() {
        let data =
            Dataset::from_pairs(2, 1, [(dvector![1.0, 0.0], dvector![2.0]), (dvector![0.0, 1.0], dvector![3.0])])
                .unwrap();
        let w = fit_linear_mean(&data).unwrap();
        assert!((w.0[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((w.0[(0, 1)] - 3.0).abs() < 1e-12);

        let data = Dataset::from_pairs(1, 1, [(dvector![2.0], dvector![6.0])]).unwrap();
        let w = fit_linear_mean(&data).unwrap();
        assert!((w.0[(0, 0)] - 3.0).abs() < 1e-12);

        let empty = Dataset::new(3, 2);
        assert_eq!(fit_linear_mean(&empty).unwrap(), MeanWeights::zeros(2, 3));
    }

    #[test]
    fn linear_mean_recovers_generating_weights() {
        let mut rng = StdRng::seed_from_u64(7);
        let w_true = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-2.0..2.0));
        let mut data = Dataset::new(4, 3);
        for _ in 0..20 {
            let x = rand_vec(&mut rng, 4, 1.0);
            let y = &w_true * &x;
            data.push(x, y).unwrap();
        }
        let w = fit_linear_mean(&data).unwrap();
        assert!((w.0 - w_true).abs().max() < 1e-8);
    }

    #[test]
    fn linear_mean_rank_deficient_is_min_norm() {
        // Both inputs lie on the x1 axis, so only W[:,0] is identifiable.
        let data =
            Dataset::from_pairs(2, 1, [(dvector![1.0, 0.0], dvector![2.0]), (dvector![-2.0, 0.0], dvector![-4.0])])
                .unwrap();
        let w = fit_linear_mean(&data).unwrap();
        assert!((w.0[(0, 0)] - 2.0).abs() < 1e-12);
        assert!(w.0[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn truncated_mean_drops_weak_directions() {
        // Singular values 1 and 1e-4: the exact fit needs a weight of 1e4.
        let data =
            Dataset::from_pairs(2, 1, [(dvector![1.0, 0.0], dvector![1.0]), (dvector![0.0, 1e-4], dvector![1.0])])
                .unwrap();
        let exact = fit_linear_mean_truncated(&data, 0.0).unwrap();
        assert!((exact.0[(0, 1)] - 1e4).abs() < 1e-6);
        let cut = fit_linear_mean_truncated(&data, 1e-2).unwrap();
        assert!((cut.0[(0, 0)] - 1.0).abs() < 1e-12);
        assert_eq!(cut.0[(0, 1)], 0.0);
        let hp = Hyperparams { mean_rcond: 1.0, ..Hyperparams::default() };
        assert!(hp.validate().unwrap_err().is_config());
    }

    #[test]
    fn linear_mean_sparse_wide_inputs() {
        // Histogram-like inputs: most dimensions never fire, the live ones
        // span fewer directions than there are of them, and two are copies.
        let mut rng = StdRng::seed_from_u64(3);
        let (d, live, rank) = (135, 40, 25);
        let basis = DMatrix::from_fn(rank, live, |_, _| rng.random_range(-1.0..1.0));
        let w_live = DMatrix::from_fn(2, live, |_, _| rng.random_range(-1.0..1.0));
        let mut data = Dataset::new(d, 2);
        for _ in 0..300 {
            let c = rand_vec(&mut rng, rank, 1.0);
            let z = basis.transpose() * c;
            let mut x = DVector::zeros(d);
            for j in 0..live {
                x[3 * j] = z[j];
            }
            x[1] = x[0];
            let y = &w_live * &z;
            data.push(x, y).unwrap();
        }
        let w = fit_linear_mean(&data).unwrap();
        assert!(w.0.iter().all(|v| v.is_finite()));
        for j in (0..d).filter(|j| j % 3 != 0 && *j != 1) {
            assert_eq!(w.0.column(j).amax(), 0.0);
        }
        // Minimum norm splits weight evenly over identical columns.
        assert!((w.0.column(0) - w.0.column(1)).amax() < 1e-10);
        for (x, y) in data.inputs.iter().zip(&data.outputs) {
            assert!((&w.0 * x - y).amax() < 1e-9);
        }
    }

    #[test]
    fn gram_small_cases() {
        let hp = Hyperparams::default();
        let s2 = hp.noise_var();
        let a = gram_matrix(&[dvector![0.4, 0.1]], &hp).unwrap();
        assert_eq!(a, DMatrix::from_element(1, 1, 1.0 + s2));
        let x = dvector![0.2];
        let a = gram_matrix(&[x.clone(), x], &hp).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[1.0 + s2, 1.0, 1.0, 1.0 + s2]));
        assert!(gram_matrix(&[], &hp).is_err());
    }

    #[test]
    fn gram_matches_entrywise_kernel() {
        let hp = Hyperparams::default();
        let mut rng = StdRng::seed_from_u64(3);
        let xs: Vec<_> = (0..3).map(|_| rand_vec(&mut rng, 3, 1.0)).collect();
        let a = gram_matrix(&xs, &hp).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect =
                    rbf_kernel(&xs[i], &xs[j], hp.sigma_rbf).unwrap() + if i == j { hp.noise_var() } else { 0.0 };
                assert!((a[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_empty_is_prior() {
        let hp = Hyperparams::default();
        let data = Dataset::new(2, 1);
        let w = MeanWeights(DMatrix::from_row_slice(1, 2, &[1.5, -1.0]));
        let post = gp_predict(&data, &DMatrix::zeros(0, 0), &w, &hp, &dvector![2.0, 1.0]).unwrap();
        assert_eq!(post.mu, dvector![2.0]);
        assert_eq!(post.var, 1.0);

        let zero = MeanWeights::zeros(1, 2);
        let post = gp_predict(&data, &DMatrix::zeros(0, 0), &zero, &hp, &dvector![2.0, 1.0]).unwrap();
        assert_eq!(post.mu, dvector![0.0]);
    }

    #[test]
    fn predict_interpolates_in_noiseless_limit() {
        let hp = Hyperparams { sigma_n: 1e-9, ..Hyperparams::default() };
        let data = Dataset::from_pairs(
            1,
            1,
            [(dvector![-0.5], dvector![1.0]), (dvector![0.0], dvector![-0.3]), (dvector![0.7], dvector![0.4])],
        )
        .unwrap();
        let a_inv = gram_matrix(data.inputs(), &hp).unwrap().try_inverse().unwrap();
        let w = fit_linear_mean(&data).unwrap();
        let post = gp_predict(&data, &a_inv, &w, &hp, &dvector![0.0]).unwrap();
        assert!((post.mu[0] + 0.3).abs() < 1e-5, "{}", post.mu[0]);
        assert!(post.var.abs() < 1e-6);
    }

    /// Dense-solve oracle: solve `A z = k` and `A Z = P - W X` by LU, no stored inverse.
    fn dense_oracle(data: &Dataset, w: &MeanWeights, hp: &Hyperparams, q: &DVector<f64>) -> (DVector<f64>, f64) {
        let a = gram_matrix(data.inputs(), hp).unwrap();
        let lu = a.lu();
        let k =
            DVector::from_iterator(data.len(), data.inputs().iter().map(|x| rbf_kernel(x, q, hp.sigma_rbf).unwrap()));
        let resid =
            DMatrix::from_fn(data.len(), data.out_dim(), |i, j| data.outputs()[i][j] - (&w.0 * &data.inputs()[i])[j]);
        let z = lu.solve(&resid).unwrap();
        let mu = &w.0 * q + z.tr_mul(&k);
        let var = 1.0 - k.dot(&lu.solve(&k).unwrap());
        (mu, var)
    }

    #[test]
    fn predict_matches_dense_solve() {
        let hp = Hyperparams { sigma_n: 0.1, ..Hyperparams::default() };
        let xs: [f64; 5] = [-1.0, -0.4, 0.1, 0.5, 1.2];
        let data = Dataset::from_pairs(1, 2, xs.iter().map(|&x| (dvector![x], dvector![x.sin(), x * x]))).unwrap();
        let a_inv = spd_inverse(&gram_matrix(data.inputs(), &hp).unwrap()).unwrap();
        let w = fit_linear_mean(&data).unwrap();
        for q in [-1.5, -0.2, 0.3, 0.9, 2.0] {
            let q = dvector![q];
            let post = gp_predict(&data, &a_inv, &w, &hp, &q).unwrap();
            let (mu, var) = dense_oracle(&data, &w, &hp, &q);
            assert!((post.mu - mu).abs().max() < 1e-10);
            assert!((post.var - var.max(0.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn variance_clamping() {
        assert_eq!(clamp_variance(0.25).unwrap(), 0.25);
        assert_eq!(clamp_variance(-1e-9).unwrap(), 0.0);
        assert!(matches!(clamp_variance(-1e-3), Err(Error::NumericalHealth(_))));
        assert!(clamp_variance(f64::NAN).is_err());
    }

    #[test]
    fn hyperparam_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        let bad = Hyperparams { max_size: 1, ..Hyperparams::default() };
        assert!(bad.validate().is_err());
        let bad = Hyperparams { sigma_n: 0.0, ..Hyperparams::default() };
        assert!(bad.validate().is_err());
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, d)
    }

    proptest! {
        #[test]
        fn kernel_symmetric_and_bounded(a in vec_strategy(3), b in vec_strategy(3), s in 0.05f64..3.0) {
            let (a, b) = (DVector::from_vec(a), DVector::from_vec(b));
            let kab = rbf_kernel(&a, &b, s).unwrap();
            let kba = rbf_kernel(&b, &a, s).unwrap();
            prop_assert_eq!(kab, kba);
            prop_assert!((0.0..=1.0).contains(&kab));
        }

        #[test]
        fn gram_is_positive_definite(
            pts in proptest::collection::vec(vec_strategy(2), 1..12),
            dup in 0usize..12,
        ) {
            let hp = Hyperparams::default();
            let mut xs: Vec<_> = pts.into_iter().map(DVector::from_vec).collect();
            // include an exact duplicate
            let extra = xs[dup % xs.len()].clone();
            xs.push(extra);
            let a = gram_matrix(&xs, &hp).unwrap();
            let eig = a.symmetric_eigenvalues();
            prop_assert!(eig.min() >= hp.noise_var() - 1e-10, "min eig {}", eig.min());
        }

        #[test]
        fn variance_nonincreasing_in_data(
            pts in proptest::collection::vec(vec_strategy(2), 2..10),
            q in vec_strategy(2),
        ) {
            let hp = Hyperparams { sigma_n: 0.05, ..Hyperparams::default() };
            let q = DVector::from_vec(q);
            let mut prev = f64::INFINITY;
            for n in 1..=pts.len() {
                let data = Dataset::from_pairs(2, 1, pts[..n].iter().map(|p| {
                    let x = DVector::from_vec(p.clone());
                    let y = dvector![x[0] - x[1]];
                    (x, y)
                })).unwrap();
                let a_inv = spd_inverse(&gram_matrix(data.inputs(), &hp).unwrap()).unwrap();
                let w = fit_linear_mean(&data).unwrap();
                let var = gp_predict(&data, &a_inv, &w, &hp, &q).unwrap().var;
                prop_assert!(var <= prev + 1e-10);
                prev = var;
            }
        }

        #[test]
        fn prediction_is_permutation_invariant(
            pts in proptest::collection::vec(vec_strategy(2), 2..8),
            q in vec_strategy(2),
            rot in 0usize..8,
        ) {
            let hp = Hyperparams { sigma_n: 0.05, ..Hyperparams::default() };
            let pairs: Vec<_> = pts.iter().map(|p| {
                let x = DVector::from_vec(p.clone());
                let y = dvector![(x[0] * 2.0).sin(), x[1] * x[0]];
                (x, y)
            }).collect();
            let mut permuted = pairs.clone();
            permuted.rotate_left(rot % pairs.len());
            permuted.reverse();
            let q = DVector::from_vec(q);
            let predict = |pairs: Vec<(DVector<f64>, DVector<f64>)>| {
                let data = Dataset::from_pairs(2, 2, pairs).unwrap();
                let a_inv = spd_inverse(&gram_matrix(data.inputs(), &hp).unwrap()).unwrap();
                let w = fit_linear_mean(&data).unwrap();
                gp_predict(&data, &a_inv, &w, &hp, &q).unwrap()
            };
            let p1 = predict(pairs);
            let p2 = predict(permuted);
            prop_assert!((p1.mu - p2.mu).abs().max() < 1e-10);
            prop_assert!((p1.var - p2.var).abs() < 1e-10);
        }

        #[test]
        fn linear_mean_gradient_vanishes(
            pts in proptest::collection::vec(vec_strategy(3), 1..30),
        ) {
            let data = Dataset::from_pairs(3, 2, pts.iter().map(|p| {
                let x = DVector::from_vec(p.clone());
                let y = dvector![x[0].sin() + x[2], x[1] * x[1]];
                (x, y)
            })).unwrap();
            let w = fit_linear_mean(&data).unwrap();
            let mut grad = DMatrix::<f64>::zeros(2, 3);
            for (x, p) in data.inputs().iter().zip(data.outputs()) {
                grad += 2.0 * (&w.0 * x - p) * x.transpose();
            }
            prop_assert!(grad.norm() <= 1e-6 * data.len() as f64, "grad {}", grad.norm());
        }
    }
}
