//! Kernel-mixture correlation model over a mini-batch horizon.
//!
//! The correlation of the normalized errors inside a mini-batch is a convex
//! combination of fixed squared-exponential kernel matrices plus the
//! identity. The weights are produced per time step by the network; the
//! kernels are built once per horizon and shared.

use crate::error::{Error, Result};
use crate::linalg::{cholesky, dot, SymMatrix};
use crate::scalar::Scalar;

/// Lengthscales of the squared-exponential kernels in the default bank.
pub const DEFAULT_LENGTHSCALES: [f64; 3] = [1.0, 2.0, 3.0];

/// Tolerance on `Σ w = 1` accepted by [`MixWeights::new`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Fixed bank of `D×D` Toeplitz correlation kernels; the last one is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank<T> {
    horizon: usize,
    lengthscales: Vec<T>,
    kernels: Vec<SymMatrix<T>>,
}

impl<T: Scalar> KernelBank<T> {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of components `M`, identity included.
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn lengthscales(&self) -> &[T] {
        &self.lengthscales
    }

    pub fn kernels(&self) -> &[SymMatrix<T>] {
        &self.kernels
    }

    pub fn kernel(&self, m: usize) -> &SymMatrix<T> {
        &self.kernels[m]
    }

    /// Index of the identity component.
    pub fn identity_index(&self) -> usize {
        self.kernels.len() - 1
    }

    /// Value of kernel `m` at lag `|i - j|`.
    #[inline]
    pub fn lag_value(&self, m: usize, lag: usize) -> T {
        self.kernels[m].get(0, lag)
    }
}

/// Builds the SE kernels `exp(-(i-j)²/l²)` for each lengthscale, followed by the identity.
pub fn build_kernel_bank<T: Scalar>(horizon: usize, lengthscales: &[T]) -> Result<KernelBank<T>> {
    if horizon < 2 {
        return Err(Error::InvalidBank(format!("horizon must be at least 2, got {horizon}")));
    }
    if lengthscales.is_empty() {
        return Err(Error::InvalidBank("at least one lengthscale is required".into()));
    }
    if let Some(&bad) = lengthscales.iter().find(|l| !(**l > T::zero()) || !l.is_finite()) {
        return Err(Error::InvalidLengthscale(bad.as_f64()));
    }
    let mut kernels: Vec<SymMatrix<T>> = lengthscales
        .iter()
        .map(|&l| {
            let l2 = l * l;
            // one exp per lag, then fill the Toeplitz pattern
            let by_lag: Vec<T> = (0..horizon)
                .map(|k| {
                    let k = T::of_usize(k);
                    (-(k * k) / l2).exp()
                })
                .collect();
            SymMatrix::from_fn(horizon, |i, j| by_lag[j - i])
        })
        .collect();
    kernels.push(SymMatrix::identity(horizon));
    Ok(KernelBank { horizon, lengthscales: lengthscales.to_vec(), kernels })
}

/// Default bank: SE kernels with `l = 1, 2, 3` plus identity (`M = 4`).
pub fn default_kernel_bank<T: Scalar>(horizon: usize) -> Result<KernelBank<T>> {
    let ls: Vec<T> = DEFAULT_LENGTHSCALES.iter().map(|&l| T::of(l)).collect();
    build_kernel_bank(horizon, &ls)
}

/// Component weights on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MixWeights<T>(Vec<T>);

impl<T: Scalar> MixWeights<T> {
    pub fn new(w: Vec<T>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidSimplex("empty weight vector".into()));
        }
        if let Some(bad) = w.iter().find(|v| !(**v >= T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidSimplex(format!("component {bad} is negative or non-finite")));
        }
        let total = w.iter().fold(T::zero(), |a, &b| a + b);
        if (total - T::one()).abs() > T::of(SIMPLEX_TOLERANCE) {
            return Err(Error::InvalidSimplex(format!("weights sum to {total}")));
        }
        Ok(Self(w))
    }

    /// All mass on component `m` of `len`.
    pub fn one_hot(len: usize, m: usize) -> Self {
        let mut w = vec![T::zero(); len];
        w[m] = T::one();
        Self(w)
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![T::one() / T::of_usize(len); len])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/// Correlation matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMix<T> {
    c: SymMatrix<T>,
}

impl<T: Scalar> CorrelationMix<T> {
    /// Wraps an arbitrary correlation matrix (unit diagonal, off-diagonals in `[-1, 1]`).
    pub fn from_matrix(c: SymMatrix<T>) -> Result<Self> {
        let n = c.dim();
        for i in 0..n {
            if c.get(i, i) != T::one() {
                return Err(Error::InvalidCorrelation(format!("diagonal entry {i} is {}", c.get(i, i))));
            }
            for j in 0..i {
                if !(c.get(i, j).abs() <= T::one()) {
                    return Err(Error::InvalidCorrelation(format!("entry ({i}, {j}) is {}", c.get(i, j))));
                }
            }
        }
        Ok(Self { c })
    }

    pub fn matrix(&self) -> &SymMatrix<T> {
        &self.c
    }

    pub fn dim(&self) -> usize {
        self.c.dim()
    }
}

/// `C = Σ_m w_m K_m`.
pub fn mix_correlation<T: Scalar>(bank: &KernelBank<T>, w: &MixWeights<T>) -> Result<CorrelationMix<T>> {
    if w.len() != bank.len() {
        return Err(Error::WeightDimensionMismatch { expected: bank.len(), got: w.len() });
    }
    let by_lag = mix_by_lag(bank, w.as_slice());
    let n = bank.horizon;
    // every kernel has a unit diagonal and the weights sum to one
    let c = SymMatrix::from_fn(n, |i, j| if i == j { T::one() } else { by_lag[j - i] });
    Ok(CorrelationMix { c })
}

/// `Σ_m w_m K_m(lag)` for every lag, without any simplex assumption.
pub(crate) fn mix_by_lag<T: Scalar>(bank: &KernelBank<T>, w: &[T]) -> Vec<T> {
    (0..bank.horizon)
        .map(|lag| w.iter().enumerate().fold(T::zero(), |acc, (m, &wm)| acc + wm * bank.lag_value(m, lag)))
        .collect()
}

/// `Σ = diag(σ)·C·diag(σ)`.
pub fn assemble_covariance<T: Scalar>(sigma: &[T], c: &CorrelationMix<T>) -> Result<SymMatrix<T>> {
    if sigma.len() != c.dim() {
        return Err(Error::DimensionMismatch { expected: c.dim(), got: sigma.len() });
    }
    if let Some(&bad) = sigma.iter().find(|s| !(**s > T::zero()) || !s.is_finite()) {
        return Err(Error::NonpositiveSigma(bad.as_f64()));
    }
    Ok(SymMatrix::from_fn(sigma.len(), |i, j| sigma[i] * sigma[j] * c.c.get(i, j)))
}

/// Gaussian with scalar mean and variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalGaussian<T> {
    pub mean: T,
    pub variance: T,
}

/// Distribution of the final normalized error given the preceding ones.
///
/// `eps_obs` is ordered oldest to newest and may hold fewer than `D - 1`
/// residuals, in which case the trailing `(k+1)×(k+1)` block of `C` is used.
pub fn conditional_error_dist<T: Scalar>(c: &CorrelationMix<T>, eps_obs: &[T]) -> Result<ConditionalGaussian<T>> {
    let n = c.dim();
    let k = eps_obs.len();
    if k + 1 > n {
        return Err(Error::DimensionMismatch { expected: n - 1, got: k });
    }
    if k == 0 {
        return Ok(ConditionalGaussian { mean: T::zero(), variance: T::one() });
    }
    let start = n - 1 - k;
    let c_obs = c.c.principal(start, k);
    let mut cross: Vec<T> = (0..k).map(|i| c.c.get(n - 1, start + i)).collect();
    let l = cholesky(&c_obs, T::zero())?;
    let mut eps = eps_obs.to_vec();
    l.solve_lower_in_place(&mut cross)?;
    l.solve_lower_in_place(&mut eps)?;
    let mean = dot(&cross, &eps);
    let explained = dot(&cross, &cross);
    let variance = (T::one() - explained).max(T::zero()).min(T::one());
    Ok(ConditionalGaussian { mean, variance })
}
