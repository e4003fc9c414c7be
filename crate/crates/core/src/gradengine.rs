//! Exact gradients of the training objectives.
//!
//! The Gaussian likelihood partials are closed-form matrix identities; the
//! network part is a hand-written reverse pass over a recorded [`Trace`].

use crate::corrmodel::{mix_by_lag, KernelBank};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, dot, log_det, SymMatrix};
use crate::net::{sigmoid, Network, Trace};
use crate::params::GradSet;
use crate::scalar::Scalar;

/// Negative log-likelihood of a mini-batch and its partials.
#[derive(Debug, Clone, PartialEq)]
pub struct GlsPartials<T> {
    pub loss: T,
    pub dmu: Vec<T>,
    pub dsigma: Vec<T>,
    pub dw: Vec<T>,
}

/// Negative log-likelihood of one point and its partials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IidPartials<T> {
    pub loss: T,
    pub dmu: T,
    pub dsigma: T,
}

/// Multivariate Gaussian NLL with `Σ = diag(σ)·(Σ_m w_m K_m)·diag(σ)`.
///
/// `w` is not required to lie on the simplex: the mixture is assembled
/// literally so that the partial with respect to each weight is exact.
pub fn backprop_gls<T: Scalar>(mu: &[T], sigma: &[T], w: &[T], z: &[T], bank: &KernelBank<T>) -> Result<GlsPartials<T>> {
    let d = bank.horizon();
    for len in [mu.len(), sigma.len(), z.len()] {
        if len != d {
            return Err(Error::DimensionMismatch { expected: d, got: len });
        }
    }
    if w.len() != bank.len() {
        return Err(Error::WeightDimensionMismatch { expected: bank.len(), got: w.len() });
    }
    if let Some(&bad) = sigma.iter().find(|s| !(**s > T::zero())) {
        return Err(Error::NonpositiveSigma(bad.as_f64()));
    }
    let by_lag = mix_by_lag(bank, w);
    let cov = SymMatrix::from_fn(d, |i, j| sigma[i] * sigma[j] * by_lag[j - i]);
    let chol = cholesky(&cov, T::zero())?;
    let r: Vec<T> = z.iter().zip(mu).map(|(&a, &b)| a - b).collect();
    let inv = chol.inverse();
    let alpha = inv.matvec(&r)?;
    let half = T::of(0.5);
    let log_2pi = (T::of(2.0) * T::PI()).ln();
    let loss = half * log_det(&chol) + half * dot(&r, &alpha) + half * T::of_usize(d) * log_2pi;

    // G = ∂loss/∂Σ = ½(Σ⁻¹ − α αᵀ)
    let g = SymMatrix::from_fn(d, |i, j| half * (inv.get(i, j) - alpha[i] * alpha[j]));
    let dmu = alpha.iter().map(|&a| -a).collect();
    let two = T::of(2.0);
    let dsigma = (0..d)
        .map(|k| {
            let s = (0..d).fold(T::zero(), |acc, j| acc + g.get(k, j) * cov.get(k, j));
            two * s / sigma[k]
        })
        .collect();
    // Σ_ij G_ij σ_i σ_j is needed per lag only: the kernels are Toeplitz
    let mut by_lag_grad = vec![T::zero(); d];
    for i in 0..d {
        for j in 0..d {
            let lag = i.abs_diff(j);
            by_lag_grad[lag] += g.get(i, j) * sigma[i] * sigma[j];
        }
    }
    let dw = (0..bank.len())
        .map(|m| (0..d).fold(T::zero(), |acc, lag| acc + by_lag_grad[lag] * bank.lag_value(m, lag)))
        .collect();
    Ok(GlsPartials { loss, dmu, dsigma, dw })
}

/// Univariate Gaussian NLL `½ε² + ln σ + ½ ln 2π` with `ε = (z − μ)/σ`.
pub fn backprop_iid<T: Scalar>(mu: T, sigma: T, z: T) -> Result<IidPartials<T>> {
    if !(sigma > T::zero()) {
        return Err(Error::NonpositiveSigma(sigma.as_f64()));
    }
    let half = T::of(0.5);
    let eps = (z - mu) / sigma;
    let loss = half * eps * eps + sigma.ln() + half * (T::of(2.0) * T::PI()).ln();
    Ok(IidPartials { loss, dmu: -eps / sigma, dsigma: (T::one() - eps * eps) / sigma })
}

/// Upstream partials of the loss with respect to one step's head outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepPartials {
    pub dmu: f64,
    pub dsigma: f64,
    /// Partial with respect to the mixture weights (after softmax).
    pub dw: Option<Vec<f64>>,
}

impl StepPartials {
    fn is_zero(&self) -> bool {
        self.dmu == 0.0 && self.dsigma == 0.0 && self.dw.as_ref().is_none_or(|d| d.iter().all(|&v| v == 0.0))
    }
}

/// Reverse pass through a recorded unroll.
pub fn compute_gradients(net: &Network, trace: &Trace, partials: &[StepPartials]) -> Result<GradSet> {
    let mut grads = GradSet::zeros_like(net.params());
    accumulate_gradients(net, trace, partials, &mut grads)?;
    Ok(grads)
}

/// Same as [`compute_gradients`], adding into an existing gradient buffer.
pub fn accumulate_gradients(net: &Network, trace: &Trace, partials: &[StepPartials], grads: &mut GradSet) -> Result<()> {
    if partials.len() != trace.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} step partials for a trace of {} steps",
            partials.len(),
            trace.len()
        )));
    }
    if !grads.is_congruent(net.params()) {
        return Err(Error::ShapeMismatch("gradient buffer does not match network layout".into()));
    }
    let cfg = net.config();
    let ix = net.index();
    let p = net.params().as_slice();
    let gbuf = grads.as_mut_slice();
    let h = cfg.hidden;
    let n_layers = cfg.layers;
    let pinned = cfg.pinned_weights.is_some();

    let mut carry: Vec<Vec<f64>> = vec![vec![0.0; h]; n_layers];
    let mut da = vec![0.0; 3 * h];
    let mut dg = vec![0.0; 3 * h];

    for (s, rec) in trace.steps.iter().enumerate().rev() {
        let up = &partials[s];
        if !up.is_zero() {
            let head = rec
                .head
                .as_ref()
                .ok_or_else(|| Error::ShapeMismatch(format!("nonzero partials at step {s} without head outputs")))?;
            let top = &mut carry[n_layers - 1];
            let hv = &head.h;

            if up.dmu != 0.0 {
                axpy(up.dmu, hv, &mut gbuf[ix.mu_w.clone()]);
                gbuf[ix.mu_b] += up.dmu;
                axpy(up.dmu, &p[ix.mu_w.clone()], top);
            }
            if up.dsigma != 0.0 {
                let dpre = up.dsigma * sigmoid(head.sigma_pre);
                axpy(dpre, hv, &mut gbuf[ix.sig_w.clone()]);
                gbuf[ix.sig_b] += dpre;
                axpy(dpre, &p[ix.sig_w.clone()], top);
            }
            if let (Some(dw), false) = (&up.dw, pinned) {
                let m = cfg.components;
                if dw.len() != m {
                    return Err(Error::WeightDimensionMismatch { expected: m, got: dw.len() });
                }
                let w = &head.weights;
                let inner = dot(w, dw);
                let dlogit: Vec<f64> = (0..m).map(|k| w[k] * (dw[k] - inner)).collect();
                let wh = cfg.weight_hidden;
                outer_acc(&dlogit, &head.mix_hidden, &mut gbuf[ix.mix_w2.clone()]);
                axpy(1.0, &dlogit, &mut gbuf[ix.mix_b2.clone()]);
                let mut dhidden = vec![0.0; wh];
                matvec_t_acc(&p[ix.mix_w2.clone()], &dlogit, &mut dhidden);
                // elu'(a) = 1 for a > 0, exp(a) = elu(a) + 1 otherwise
                for k in 0..wh {
                    if head.mix_pre[k] <= 0.0 {
                        dhidden[k] *= head.mix_hidden[k] + 1.0;
                    }
                }
                outer_acc(&dhidden, hv, &mut gbuf[ix.mix_w1.clone()]);
                axpy(1.0, &dhidden, &mut gbuf[ix.mix_b1.clone()]);
                matvec_t_acc(&p[ix.mix_w1.clone()], &dhidden, top);
            }
        }

        for l in (0..n_layers).rev() {
            let lr = &rec.layers[l];
            let gi = &ix.gru[l];
            let dh_new = std::mem::replace(&mut carry[l], vec![0.0; h]);
            if dh_new.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut dh_prev = vec![0.0; h];
            for i in 0..h {
                let z = lr.update[i];
                let r = lr.reset[i];
                let n = lr.cand[i];
                let dn = dh_new[i] * (1.0 - z);
                let dz = dh_new[i] * (lr.h_prev[i] - n);
                dh_prev[i] = dh_new[i] * z;
                let dan = dn * (1.0 - n * n);
                let dr = dan * lr.rec_cand[i];
                let daz = dz * z * (1.0 - z);
                let dar = dr * r * (1.0 - r);
                da[i] = daz;
                da[h + i] = dar;
                da[2 * h + i] = dan;
                dg[i] = daz;
                dg[h + i] = dar;
                dg[2 * h + i] = dan * r;
            }
            outer_acc(&da, &lr.input, &mut gbuf[gi.w_in.clone()]);
            axpy(1.0, &da, &mut gbuf[gi.bias.clone()]);
            outer_acc(&dg, &lr.h_prev, &mut gbuf[gi.w_rec.clone()]);
            matvec_t_acc(&p[gi.w_rec.clone()], &dg, &mut dh_prev);
            carry[l] = dh_prev;

            let mut dx = vec![0.0; gi.input];
            matvec_t_acc(&p[gi.w_in.clone()], &da, &mut dx);
            if l > 0 {
                axpy(1.0, &dx, &mut carry[l - 1]);
            } else {
                let inp = &rec.input;
                let es = cfg.series_embedding;
                let base = ix.series.start + inp.series_id * es;
                axpy(1.0, &dx[..es], &mut gbuf[base..base + es]);
                let mut off = es;
                if let (Some(range), Some(code)) = (&ix.hour, inp.hour) {
                    let e = cfg.hour_embedding;
                    let base = range.start + code as usize * e;
                    axpy(1.0, &dx[off..off + e], &mut gbuf[base..base + e]);
                    off += e;
                }
                if let (Some(range), Some(code)) = (&ix.dow, inp.dow) {
                    let e = cfg.dow_embedding;
                    let base = range.start + code as usize * e;
                    axpy(1.0, &dx[off..off + e], &mut gbuf[base..base + e]);
                }
            }
        }
    }
    Ok(())
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `W += a·bᵀ` for row-major `W` of shape `[a.len(), b.len()]`.
#[inline]
fn outer_acc(a: &[f64], b: &[f64], w: &mut [f64]) {
    for (row, &ai) in w.chunks_exact_mut(b.len()).zip(a) {
        if ai != 0.0 {
            axpy(ai, b, row);
        }
    }
}

/// `out += Wᵀ·v` for row-major `W` of shape `[v.len(), out.len()]`.
#[inline]
fn matvec_t_acc(w: &[f64], v: &[f64], out: &mut [f64]) {
    for (row, &vi) in w.chunks_exact(out.len()).zip(v) {
        if vi != 0.0 {
            axpy(vi, row, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrmodel::default_kernel_bank;
    use crate::net::{NetConfig, StepInput};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LOG_2PI: f64 = 1.8378770664093453;

    #[test]
    fn gls_identity_at_mean() {
        let bank = default_kernel_bank::<f64>(2).unwrap();
        let out = backprop_gls(&[0.3, -1.0], &[1.0, 1.0], &[0.0, 0.0, 0.0, 1.0], &[0.3, -1.0], &bank).unwrap();
        assert!((out.loss - LOG_2PI).abs() < 1e-12);
        assert!((out.loss - 1.837877).abs() < 1e-6);
        assert!(out.dmu.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gls_fixed_correlation_half() {
        // a one-component bank whose only off-diagonal value is 0.5
        let ls = (1.0f64 / 2f64.ln()).sqrt();
        let bank = crate::corrmodel::build_kernel_bank(2, &[ls]).unwrap();
        assert!((bank.kernel(0).get(0, 1) - 0.5).abs() < 1e-15);
        let out = backprop_gls(&[0.0, 0.0], &[1.0, 1.0], &[1.0, 0.0], &[1.0, 1.0], &bank).unwrap();
        let expected = 0.5 * 0.75f64.ln() + 0.5 * (4.0 / 3.0) + LOG_2PI;
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.loss - 2.3607027).abs() < 1e-7);
    }

    #[test]
    fn iid_examples() {
        let out = backprop_iid(0.4f64, 1.0, 0.4).unwrap();
        assert!((out.loss - 0.918939).abs() < 1e-6);
        assert_eq!(out.dmu, 0.0);
        assert_eq!(out.dsigma, 1.0);
        assert_eq!(backprop_iid(0.0, 1.0, 1.0).unwrap().dmu, -1.0);
        assert!(matches!(backprop_iid(0.0, 0.0, 1.0), Err(Error::NonpositiveSigma(_))));
    }

    #[test]
    fn gls_with_identity_equals_sum_of_iid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 2..8 {
            let bank = default_kernel_bank::<f64>(d).unwrap();
            let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sigma: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
            let gls = backprop_gls(&mu, &sigma, &[0.0, 0.0, 0.0, 1.0], &z, &bank).unwrap();
            let mut loss = 0.0;
            for i in 0..d {
                let p = backprop_iid(mu[i], sigma[i], z[i]).unwrap();
                loss += p.loss;
                assert!((gls.dmu[i] - p.dmu).abs() < 1e-10);
                assert!((gls.dsigma[i] - p.dsigma).abs() < 1e-10);
            }
            assert!((gls.loss - loss).abs() < 1e-10);
        }
    }

    #[test]
    fn gls_partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 5;
        let bank = default_kernel_bank::<f64>(d).unwrap();
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let w = vec![0.1, 0.3, 0.2, 0.4];
        let base = backprop_gls(&mu, &sigma, &w, &z, &bank).unwrap();
        let h = 1e-5;
        let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
        for k in 0..d {
            let g = fd(&|e| {
                let mut m = mu.clone();
                m[k] += e;
                backprop_gls(&m, &sigma, &w, &z, &bank).unwrap().loss
            });
            assert!((g - base.dmu[k]).abs() < 1e-4 * g.abs().max(1e-3));
            let g = fd(&|e| {
                let mut s = sigma.clone();
                s[k] += e;
                backprop_gls(&mu, &s, &w, &z, &bank).unwrap().loss
            });
            assert!((g - base.dsigma[k]).abs() < 1e-4 * g.abs().max(1e-3));
        }
        for m in 0..4 {
            let g = fd(&|e| {
                let mut ww = w.clone();
                ww[m] += e;
                backprop_gls(&mu, &sigma, &ww, &z, &bank).unwrap().loss
            });
            assert!((g - base.dw[m]).abs() < 1e-4 * g.abs().max(1e-3));
        }
    }

    #[test]
    fn gls_permutation_invariance() {
        // reversing the index order maps a symmetric Toeplitz matrix onto itself
        let d = 6;
        let bank = default_kernel_bank::<f64>(d).unwrap();
        let mu = [0.1, -0.4, 0.9, 0.0, 1.2, -0.7];
        let z = [0.3, 0.2, -0.5, 0.8, 1.0, -1.1];
        let s = [0.5, 1.5, 0.9, 1.1, 0.7, 2.0];
        let w = [0.25, 0.25, 0.25, 0.25];
        let rev = |v: &[f64]| v.iter().rev().cloned().collect::<Vec<_>>();
        let a = backprop_gls(&mu, &s, &w, &z, &bank).unwrap();
        let b = backprop_gls(&rev(&mu), &rev(&s), &w, &rev(&z), &bank).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    fn tiny_net() -> Network {
        let cfg = NetConfig { hidden: 3, layers: 1, series_embedding: 2, hour_embedding: 0, dow_embedding: 0, weight_hidden: 2, ..NetConfig::new(1, 4) };
        Network::new(cfg, 3).unwrap()
    }

    #[test]
    fn zero_partials_give_zero_gradients() {
        let net = tiny_net();
        let inputs = vec![StepInput { lag_value: 0.5, hour: None, dow: None, series_id: 0 }; 3];
        let (_, trace) = net.unroll_window(&inputs, None).unwrap();
        let g = compute_gradients(&net, &trace, &vec![StepPartials::default(); 3]).unwrap();
        assert!(g.is_zero());
        assert!(compute_gradients(&net, &trace, &[StepPartials::default()]).is_err());
    }

    #[test]
    fn mu_head_gradient_is_feature_times_dmu() {
        let net = tiny_net();
        let inputs = vec![StepInput { lag_value: -0.2, hour: None, dow: None, series_id: 0 }];
        let (_, trace) = net.unroll_window(&inputs, None).unwrap();
        let dmu = 0.37;
        let g = compute_gradients(&net, &trace, &[StepPartials { dmu, ..Default::default() }]).unwrap();
        let h = trace.steps[0].head.as_ref().unwrap().h.clone();
        let gw = g.tensor("head.mu.weight").unwrap();
        for i in 0..3 {
            assert!((gw[i] - h[i] * dmu).abs() < 1e-15);
        }
        assert_eq!(g.tensor("head.mu.bias").unwrap()[0], dmu);
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let cfg = NetConfig { hidden: 4, layers: 2, series_embedding: 2, hour_embedding: 2, dow_embedding: 2, weight_hidden: 3, ..NetConfig::new(2, 4) };
        let net = Network::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs: Vec<StepInput> = (0..4)
            .map(|i| StepInput { lag_value: rng.random_range(-1.0..1.0), hour: Some(i as u8 * 5), dow: Some(i as u8), series_id: 1 })
            .collect();
        let coef: Vec<(f64, f64, Vec<f64>)> = (0..4)
            .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let objective = |n: &Network| {
            let (outs, _) = n.unroll_window(&inputs, None).unwrap();
            outs.iter().zip(&coef).map(|(o, (a, b, c))| a * o.mu + b * o.sigma + dot(c, o.weights.as_slice())).sum::<f64>()
        };
        let (_, trace) = net.unroll_window(&inputs, None).unwrap();
        let partials: Vec<StepPartials> = coef.iter().map(|(a, b, c)| StepPartials { dmu: *a, dsigma: *b, dw: Some(c.clone()) }).collect();
        let g = compute_gradients(&net, &trace, &partials).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for i in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut().as_mut_slice()[i] += h;
            let mut minus = net.clone();
            minus.params_mut().as_mut_slice()[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let ad = g.as_slice()[i];
            assert!((fd - ad).abs() <= 1e-6 * fd.abs().max(ad.abs()).max(1.0), "param {i}: fd {fd} ad {ad}");
            if fd != 0.0 {
                checked += 1;
            }
        }
        assert!(checked > net.params().len() / 2);
    }
}
