//! Gaussian posterior calculus: reparameterized sampling, closed-form and
//! single-sample KL divergences, conditional KL of one coordinate given the
//! rest, per-coordinate mutual information, and the mean of the
//! KL-minimizing identity-covariance Gaussian for an even mixture.
//!
//! Vectors are row vectors in storage; sampling uses `z = mu + L eps` with
//! `L` lower triangular, so `z ~ N(mu, L L^T)`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{cholesky, log_det_from_chol, spd_inverse, Tensor};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Variance floor applied before logs and divisions.
const VAR_FLOOR: f64 = 1e-12;

/// Diagonal Gaussian `N(mu, diag(exp(log_var)))`.
#[derive(Debug, Clone)]
pub struct MeanFieldPosterior {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl MeanFieldPosterior {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        if mu.shape() != log_var.shape() || mu.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mean-field posterior",
                left: mu.shape().to_vec(),
                right: log_var.shape().to_vec(),
            });
        }
        Ok(Self { mu, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Reparameterized draw `z = mu + exp(log_var / 2) * eps`.
    pub fn sample(&self, rng: &mut Rng) -> Tensor {
        self.sample_with_eps(rng).0
    }

    pub fn sample_with_eps(&self, rng: &mut Rng) -> (Tensor, Tensor) {
        let eps = rng.sample_standard_normal(vec![self.dim()]);
        (self.transform(&eps), eps)
    }

    /// Deterministic part of the reparameterization.
    pub fn transform(&self, eps: &Tensor) -> Tensor {
        let mut z = Tensor::zeros(vec![self.dim()]);
        let (mu, lv, e) = (self.mu.data(), self.log_var.data(), eps.data());
        for (i, zi) in z.data_mut().iter_mut().enumerate() {
            *zi = mu[i] + (0.5 * lv[i]).exp() * e[i];
        }
        z
    }

    /// Exact `KL(Q || N(0, I))`, total and per dimension. The per-dimension
    /// terms sum exactly to the total because coordinates are independent.
    pub fn kl_closed(&self) -> (f64, Vec<f64>) {
        let per: Vec<f64> = self
            .mu
            .data()
            .iter()
            .zip(self.log_var.data())
            .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
            .collect();
        (per.iter().sum(), per)
    }
}

/// Gaussian with covariance `Sigma = L L^T`, where the Cholesky factor is
/// `L = l_strict + diag(exp(log_diag))`. `l_strict` must be zero on and
/// above the diagonal.
#[derive(Debug, Clone)]
pub struct FullCovPosterior {
    pub mu: Tensor,
    pub log_diag: Tensor,
    pub l_strict: Tensor,
}

impl FullCovPosterior {
    pub fn new(mu: Tensor, log_diag: Tensor, l_strict: Tensor) -> Result<Self> {
        let d = mu.len();
        if log_diag.len() != d || l_strict.shape() != [d, d] {
            return Err(Error::ShapeMismatch {
                op: "full-cov posterior",
                left: mu.shape().to_vec(),
                right: l_strict.shape().to_vec(),
            });
        }
        for i in 0..d {
            for j in i..d {
                if l_strict.get2(i, j) != 0.0 {
                    return Err(Error::InvalidArgument {
                        context: format!("l_strict must be strictly lower triangular, ({i},{j}) nonzero"),
                    });
                }
            }
        }
        Ok(Self { mu, log_diag, l_strict })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Composed Cholesky factor; the diagonal is positive by construction.
    pub fn chol_factor(&self) -> Tensor {
        let d = self.dim();
        let mut l = self.l_strict.clone();
        for i in 0..d {
            l.set2(i, i, self.log_diag.data()[i].exp());
        }
        l
    }

    pub fn sigma(&self) -> Tensor {
        let l = self.chol_factor();
        l.mat_mul(&l.transpose().unwrap()).unwrap()
    }

    /// Reparameterized draw `z = mu + L eps`; returns `(z, eps, L)` so that
    /// downstream estimators can reuse the noise and the factor.
    pub fn sample(&self, rng: &mut Rng) -> (Tensor, Tensor, Tensor) {
        let eps = rng.sample_standard_normal(vec![self.dim()]);
        let l = self.chol_factor();
        (self.transform(&eps, &l), eps, l)
    }

    pub fn transform(&self, eps: &Tensor, l: &Tensor) -> Tensor {
        let d = self.dim();
        let mut z = Tensor::zeros(vec![d]);
        let (mu, e) = (self.mu.data(), eps.data());
        for i in 0..d {
            let mut acc = mu[i];
            for j in 0..=i {
                acc += l.get2(i, j) * e[j];
            }
            z.data_mut()[i] = acc;
        }
        z
    }

    /// Single-sample estimate of `KL(Q || N(0, I))` from a reparameterized
    /// draw: `log Q(z) - log P(z)` with `log Q(z) = -1/2 sum(eps^2 + ln 2pi)
    /// - sum(log_diag)`. Unbiased: its expectation is the exact divergence.
    pub fn kl_estimate(&self, z: &Tensor, eps: &Tensor) -> f64 {
        let log_q: f64 = eps
            .data()
            .iter()
            .map(|&e| -0.5 * (e * e + LN_2PI))
            .sum::<f64>()
            - self.log_diag.sum();
        let log_p: f64 = z.data().iter().map(|&v| -0.5 * (v * v + LN_2PI)).sum();
        log_q - log_p
    }

    /// Exact `KL(N(mu, L L^T) || N(0, I)) = (tr Sigma + mu mu^T - d - log det Sigma) / 2`.
    pub fn kl_closed(&self) -> f64 {
        let l = self.chol_factor();
        let trace: f64 = l.data().iter().map(|v| v * v).sum();
        let mu_sq: f64 = self.mu.data().iter().map(|v| v * v).sum();
        let log_det = 2.0 * self.log_diag.sum();
        0.5 * (trace + mu_sq - self.dim() as f64 - log_det)
    }

    /// `KL(Q(z_i | z_{-i}, x) || N(0, 1))` via the partitioned precision
    /// matrix: the conditional has variance `1 / Lambda_ii` and mean
    /// `mu_i - sum_{j != i} (z_j - mu_j) Lambda_ji / Lambda_ii`.
    pub fn conditional_kl(&self, i: usize, z_minus_i: &[f64]) -> Result<f64> {
        let d = self.dim();
        if i >= d || z_minus_i.len() != d - 1 {
            return Err(Error::InvalidArgument {
                context: format!("conditional_kl: i={i}, d={d}, given {}", z_minus_i.len()),
            });
        }
        let lam = spd_inverse(&self.chol_factor())?;
        let var = (1.0 / lam.get2(i, i)).max(VAR_FLOOR);
        let mut shift = 0.0;
        let mu = self.mu.data();
        let mut k = 0;
        for j in 0..d {
            if j == i {
                continue;
            }
            shift += (z_minus_i[k] - mu[j]) * lam.get2(j, i);
            k += 1;
        }
        let mean = mu[i] - shift * var;
        Ok(gaussian_kl_1d(mean, var))
    }

    /// `KL(Q(u | w, x) || N(0, I))` for an arbitrary split of coordinates
    /// into selected `u` (indices in `u_idx`) and kept `w` (the rest).
    /// `z` supplies the conditioning values of the `w` coordinates.
    pub fn conditional_kl_split(&self, u_idx: &[usize], z: &[f64]) -> Result<f64> {
        let d = self.dim();
        if z.len() != d || u_idx.iter().any(|&i| i >= d) || u_idx.is_empty() {
            return Err(Error::InvalidArgument {
                context: "conditional_kl_split: bad split".into(),
            });
        }
        let in_u = membership(d, u_idx);
        let w_idx: Vec<usize> = (0..d).filter(|&j| !in_u[j]).collect();
        let lam = spd_inverse(&self.chol_factor())?;

        // Sigma_{u|w} = (Lambda_uu)^-1
        let lam_uu = submatrix(&lam, u_idx, u_idx);
        let chol_uu = cholesky(&lam_uu).map_err(|_| Error::Singular {
            op: "conditional_kl_split",
            detail: "precision block not positive definite".into(),
        })?;
        let sigma_cond = spd_inverse(&chol_uu)?;
        // log det Sigma_{u|w} = -log det Lambda_uu
        let log_det_cond = -log_det_from_chol(&chol_uu);

        // mu_{u|w} = mu_u - (w - mu_w) Lambda_wu Sigma_{u|w}
        let mu = self.mu.data();
        let mut v = vec![0.0; u_idx.len()];
        for (b, &ub) in u_idx.iter().enumerate() {
            let mut acc = 0.0;
            for &a in &w_idx {
                acc += (z[a] - mu[a]) * lam.get2(a, ub);
            }
            v[b] = acc;
        }
        let mut kl = -0.5 * log_det_cond;
        for (b, &ub) in u_idx.iter().enumerate() {
            let mut mean = mu[ub];
            for (c, _) in u_idx.iter().enumerate() {
                mean -= v[c] * sigma_cond.get2(c, b);
            }
            kl += 0.5 * (mean * mean + sigma_cond.get2(b, b) - 1.0);
        }
        Ok(kl)
    }

    /// Single-sample estimate of the mutual information between coordinate
    /// `i` and the remaining coordinates,
    /// `KL(Q(z_{-i}, z_i | x) || Q(z_{-i} | x) Q(z_i | x))`.
    pub fn mutual_info_estimate(&self, z: &Tensor, i: usize) -> Result<f64> {
        mutual_info_from_moments(z.data(), self.mu.data(), &self.sigma(), i)
    }
}

/// Mutual information estimate from explicit moments; see
/// [`FullCovPosterior::mutual_info_estimate`]. The estimate is
/// `log q(z) - log q(z_{-i}) - log q(z_i)` with each term expanded into its
/// quadratic form plus log-determinant constant.
pub fn mutual_info_from_moments(z: &[f64], mu: &[f64], sigma: &Tensor, i: usize) -> Result<f64> {
    let d = mu.len();
    if i >= d || z.len() != d || sigma.shape() != [d, d] {
        return Err(Error::InvalidArgument {
            context: format!("mutual information: i={i}, d={d}"),
        });
    }
    if d == 1 {
        return Ok(0.0);
    }
    let chol = cholesky(sigma).map_err(|_| Error::Singular {
        op: "mutual_info",
        detail: "covariance not positive definite".into(),
    })?;
    let lam = spd_inverse(&chol)?;
    let diff: Vec<f64> = (0..d).map(|j| z[j] - mu[j]).collect();
    let l1 = -0.5 * quad_form(&lam, &diff);
    let log_det_full = log_det_from_chol(&chol);

    let rest: Vec<usize> = (0..d).filter(|&j| j != i).collect();
    let sigma_rest = submatrix(sigma, &rest, &rest);
    let chol_rest = cholesky(&sigma_rest).map_err(|_| Error::Singular {
        op: "mutual_info",
        detail: "marginal covariance not positive definite".into(),
    })?;
    let lam_rest = spd_inverse(&chol_rest)?;
    let diff_rest: Vec<f64> = rest.iter().map(|&j| diff[j]).collect();
    let l2 = -0.5 * quad_form(&lam_rest, &diff_rest);
    let log_det_rest = log_det_from_chol(&chol_rest);

    let var_i = sigma.get2(i, i).max(VAR_FLOOR);
    let l3 = -0.5 * diff[i] * diff[i] / var_i;

    Ok(l1 - l2 - l3 - 0.5 * log_det_full + 0.5 * log_det_rest + 0.5 * var_i.ln())
}

/// Even mixture of identity-covariance Gaussians; `means` are the decoder
/// outputs `f(w, u_j)`.
#[derive(Debug, Clone)]
pub struct GaussianMixtureEven {
    pub means: Vec<Tensor>,
}

impl GaussianMixtureEven {
    pub fn new(means: Vec<Tensor>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::InvalidArgument { context: "empty mixture".into() });
        }
        Ok(Self { means })
    }

    /// Mean of the Gaussian `N(m, I)` minimizing `KL(mixture || N(m, I))`:
    /// the average of the component means.
    pub fn m_projection_mean(&self) -> Tensor {
        let k = self.means.len() as f64;
        let mut acc = Tensor::zeros(self.means[0].shape().to_vec());
        for m in &self.means {
            acc = acc.add(m).unwrap();
        }
        acc.scale(1.0 / k)
    }
}

/// Standard 1-D Gaussian KL against `N(0, 1)`.
pub fn gaussian_kl_1d(mean: f64, var: f64) -> f64 {
    let var = var.max(VAR_FLOOR);
    0.5 * (mean * mean + var - 1.0 - var.ln())
}

/// `x A x^T` for symmetric `A`.
fn quad_form(a: &Tensor, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for r in 0..n {
        let row = a.row(r);
        let mut inner = 0.0;
        for c in 0..n {
            inner += row[c] * x[c];
        }
        acc += x[r] * inner;
    }
    acc
}

fn membership(d: usize, idx: &[usize]) -> Vec<bool> {
    let mut m = vec![false; d];
    for &i in idx {
        m[i] = true;
    }
    m
}

/// Rows `ri` by columns `ci` of a 2-D tensor.
pub fn submatrix(a: &Tensor, ri: &[usize], ci: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(vec![ri.len(), ci.len()]);
    for (r, &i) in ri.iter().enumerate() {
        for (c, &j) in ci.iter().enumerate() {
            out.set2(r, c, a.get2(i, j));
        }
    }
    out
}

/// Log density of `N(mu, Sigma)` given the Cholesky factor of `Sigma`.
pub fn gaussian_log_density(x: &[f64], mu: &[f64], chol: &Tensor) -> Result<f64> {
    let d = mu.len();
    let diff: Vec<f64> = (0..d).map(|j| x[j] - mu[j]).collect();
    // solve L y = diff, then |y|^2 is the quadratic form
    let y = crate::tensor::tril_solve(chol, &diff)?;
    let quad: f64 = y.iter().map(|v| v * v).sum();
    Ok(-0.5 * (d as f64 * LN_2PI + log_det_from_chol(chol) + quad))
}

/// Log density of the standard normal `N(0, I)`.
pub fn std_normal_log_density(x: &[f64]) -> f64 {
    x.iter().map(|&v| -0.5 * (v * v + LN_2PI)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn random_full_cov(rng: &mut Rng, d: usize) -> FullCovPosterior {
        let mu = Tensor::new(vec![d], (0..d).map(|_| rng.next_range(-1.5, 1.5)).collect()).unwrap();
        let log_diag =
            Tensor::new(vec![d], (0..d).map(|_| rng.next_range(-0.7, 0.7)).collect()).unwrap();
        let mut l_strict = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            for j in 0..i {
                l_strict.set2(i, j, rng.next_range(-0.8, 0.8));
            }
        }
        FullCovPosterior::new(mu, log_diag, l_strict).unwrap()
    }

    #[test]
    fn reparam_mf_vanishing_variance() {
        let p = MeanFieldPosterior::new(
            Tensor::from_vec(vec![0.3, -0.4]),
            Tensor::from_vec(vec![-40.0, -40.0]),
        )
        .unwrap();
        let mut rng = Rng::new(1);
        let z = p.sample(&mut rng);
        for (zi, mi) in z.data().iter().zip(p.mu.data()) {
            assert!((zi - mi).abs() < 1e-8);
        }
    }

    #[test]
    fn reparam_mf_direct_formula() {
        let p = MeanFieldPosterior::new(Tensor::from_vec(vec![5.0]), Tensor::from_vec(vec![0.0]))
            .unwrap();
        let z = p.transform(&Tensor::from_vec(vec![1.0]));
        assert_eq!(z.data(), &[6.0]);
    }

    #[test]
    fn reparam_mf_moments() {
        let p = MeanFieldPosterior::new(
            Tensor::from_vec(vec![1.0, -1.0]),
            Tensor::from_vec(vec![4.0f64.ln(), 0.25f64.ln()]),
        )
        .unwrap();
        let mut rng = Rng::new(7);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sumsq = [0.0; 2];
        for _ in 0..n {
            let z = p.sample(&mut rng);
            for k in 0..2 {
                sum[k] += z.data()[k];
                sumsq[k] += z.data()[k] * z.data()[k];
            }
        }
        let nf = n as f64;
        let means = [sum[0] / nf, sum[1] / nf];
        let vars = [sumsq[0] / nf - means[0] * means[0], sumsq[1] / nf - means[1] * means[1]];
        // MC tolerance: ~5 standard errors
        assert!((means[0] - 1.0).abs() < 5.0 * (4.0f64 / nf).sqrt(), "{means:?}");
        assert!((means[1] + 1.0).abs() < 5.0 * (0.25f64 / nf).sqrt());
        assert!((vars[0] - 4.0).abs() < 0.1, "{vars:?}");
        assert!((vars[1] - 0.25).abs() < 0.01, "{vars:?}");
    }

    #[test]
    fn reparam_fc_identity_reduction() {
        // l_strict = 0, log_diag = 0 reduces to unit-variance mean-field
        let d = 3;
        let p = random_full_cov(&mut Rng::new(3), d);
        let p = FullCovPosterior::new(p.mu.clone(), Tensor::zeros(vec![d]), Tensor::zeros(vec![d, d]))
            .unwrap();
        let eps = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let z = p.transform(&eps, &p.chol_factor());
        for i in 0..d {
            assert!((z.data()[i] - (p.mu.data()[i] + eps.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn reparam_fc_zero_noise() {
        let p = random_full_cov(&mut Rng::new(5), 4);
        let z = p.transform(&Tensor::zeros(vec![4]), &p.chol_factor());
        assert_eq!(z.data(), p.mu.data());
    }

    #[test]
    fn reparam_fc_empirical_covariance() {
        let p = random_full_cov(&mut Rng::new(11), 3);
        let sigma = p.sigma();
        let mut rng = Rng::new(13);
        let n = 100_000;
        let mut mean = [0.0; 3];
        let mut cov = [[0.0; 3]; 3];
        for _ in 0..n {
            let (z, _, _) = p.sample(&mut rng);
            for a in 0..3 {
                mean[a] += z.data()[a];
            }
            for a in 0..3 {
                for b in 0..3 {
                    cov[a][b] += z.data()[a] * z.data()[b];
                }
            }
        }
        let nf = n as f64;
        for m in &mut mean {
            *m /= nf;
        }
        for a in 0..3 {
            for b in 0..3 {
                let c = cov[a][b] / nf - mean[a] * mean[b];
                let tol = 6.0 * (sigma.get2(a, a) * sigma.get2(b, b) / nf).sqrt().max(1e-3);
                assert!(
                    (c - sigma.get2(a, b)).abs() < tol,
                    "cov[{a}][{b}] = {c}, want {}",
                    sigma.get2(a, b)
                );
            }
        }
    }

    #[test]
    fn kl_mf_closed_cases() {
        let p = MeanFieldPosterior::new(Tensor::zeros(vec![3]), Tensor::zeros(vec![3])).unwrap();
        let (total, per) = p.kl_closed();
        assert_eq!(total, 0.0);
        assert!(per.iter().all(|&v| v == 0.0));

        let p = MeanFieldPosterior::new(Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![0.0]))
            .unwrap();
        let (total, _) = p.kl_closed();
        assert!((total - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_mf_monte_carlo_cross_check() {
        // KL = E[log q(z) - log p(z)] estimated by sampling
        let p = MeanFieldPosterior::new(Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![0.0]))
            .unwrap();
        let mut rng = Rng::new(21);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let e = rng.next_normal();
            let z = 1.0 + e;
            let log_q = -0.5 * (e * e + LN_2PI);
            let log_p = -0.5 * (z * z + LN_2PI);
            acc += log_q - log_p;
        }
        let est = acc / n as f64;
        assert!((est - 0.5).abs() < 5e-3, "MC estimate {est}");
    }

    #[test]
    fn kl_mf_total_is_sum_of_per_dim() {
        let mut rng = Rng::new(31);
        for _ in 0..20 {
            let d = 1 + rng.next_index(8);
            let mu = rng.sample_standard_normal(vec![d]);
            let lv = rng.sample_standard_normal(vec![d]);
            let p = MeanFieldPosterior::new(mu, lv).unwrap();
            let (total, per) = p.kl_closed();
            assert_eq!(total, per.iter().sum::<f64>());
        }
    }

    #[test]
    fn kl_fc_estimate_standard_normal_is_zero_mean() {
        let d = 4;
        let p = FullCovPosterior::new(
            Tensor::zeros(vec![d]),
            Tensor::zeros(vec![d]),
            Tensor::zeros(vec![d, d]),
        )
        .unwrap();
        let mut rng = Rng::new(41);
        let n = 100_000;
        let mut acc = 0.0;
        let mut acc_sq = 0.0;
        for _ in 0..n {
            let (z, eps, _) = p.sample(&mut rng);
            let e = p.kl_estimate(&z, &eps);
            acc += e;
            acc_sq += e * e;
        }
        let mean = acc / n as f64;
        let se = ((acc_sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se.max(1e-9), "mean {mean}, se {se}");
    }

    #[test]
    fn kl_fc_estimate_deterministic_case() {
        let d = 2;
        let p = FullCovPosterior::new(
            Tensor::zeros(vec![d]),
            Tensor::zeros(vec![d]),
            Tensor::zeros(vec![d, d]),
        )
        .unwrap();
        let eps = Tensor::zeros(vec![d]);
        let z = p.transform(&eps, &p.chol_factor());
        assert_eq!(p.kl_estimate(&z, &eps), 0.0);
    }

    #[test]
    fn kl_fc_closed_cases() {
        let p = FullCovPosterior::new(
            Tensor::zeros(vec![2]),
            Tensor::zeros(vec![2]),
            Tensor::zeros(vec![2, 2]),
        )
        .unwrap();
        assert_eq!(p.kl_closed(), 0.0);

        let p = FullCovPosterior::new(
            Tensor::from_vec(vec![1.0]),
            Tensor::from_vec(vec![0.0]),
            Tensor::zeros(vec![1, 1]),
        )
        .unwrap();
        assert!((p.kl_closed() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_fc_estimator_is_unbiased() {
        let mut seed_rng = Rng::new(51);
        for trial in 0..10 {
            let d = 2 + seed_rng.next_index(4);
            let p = random_full_cov(&mut seed_rng, d);
            let closed = p.kl_closed();
            let mut rng = Rng::new(1000 + trial);
            let n = 100_000;
            let mut acc = 0.0;
            let mut acc_sq = 0.0;
            for _ in 0..n {
                let (z, eps, _) = p.sample(&mut rng);
                let e = p.kl_estimate(&z, &eps);
                acc += e;
                acc_sq += e * e;
            }
            let mean = acc / n as f64;
            let se = ((acc_sq / n as f64 - mean * mean) / n as f64).sqrt();
            assert!(
                (mean - closed).abs() < 3.0 * se,
                "trial {trial}: mean {mean}, closed {closed}, se {se}"
            );
        }
    }

    #[test]
    fn conditional_kl_diagonal_matches_mean_field() {
        let d = 4;
        let mut rng = Rng::new(61);
        let mu = rng.sample_standard_normal(vec![d]);
        let log_diag = rng.sample_standard_normal(vec![d]).scale(0.3);
        let p = FullCovPosterior::new(mu.clone(), log_diag.clone(), Tensor::zeros(vec![d, d]))
            .unwrap();
        // log_var = 2 * log_diag for the matching mean-field posterior
        let mf = MeanFieldPosterior::new(mu, log_diag.scale(2.0)).unwrap();
        let (_, per) = mf.kl_closed();
        for i in 0..d {
            let z_rest: Vec<f64> = (0..d - 1).map(|_| rng.next_normal()).collect();
            let ck = p.conditional_kl(i, &z_rest).unwrap();
            assert!(
                (ck - per[i]).abs() < 1e-12,
                "dim {i}: conditional {ck} vs per-dim {}",
                per[i]
            );
        }
    }

    #[test]
    fn conditional_kl_standard_normal_is_zero() {
        let d = 3;
        let p = FullCovPosterior::new(
            Tensor::zeros(vec![d]),
            Tensor::zeros(vec![d]),
            Tensor::zeros(vec![d, d]),
        )
        .unwrap();
        let mut rng = Rng::new(71);
        for i in 0..d {
            let z_rest: Vec<f64> = (0..d - 1).map(|_| rng.next_normal()).collect();
            assert!(p.conditional_kl(i, &z_rest).unwrap().abs() < 1e-14);
        }
    }

    /// Quadrature oracle: normalize the joint density restricted to the line
    /// `z_i = t`, then integrate `q log(q / phi)` by trapezoid. Matrix
    /// inversion here is Gauss-Jordan, independent of the implementation's
    /// triangular solves.
    pub fn conditional_kl_quadrature(p: &FullCovPosterior, i: usize, z_rest: &[f64]) -> f64 {
        let d = p.dim();
        let sigma = p.sigma();
        let inv = gauss_jordan_inverse(&sigma);
        let mu = p.mu.data();
        let mut point = vec![0.0; d];
        let mut k = 0;
        for j in 0..d {
            if j != i {
                point[j] = z_rest[k];
                k += 1;
            }
        }
        let lo = -40.0;
        let hi = 40.0;
        let steps = 40_000usize;
        let h = (hi - lo) / steps as f64;
        let mut weights = Vec::with_capacity(steps + 1);
        for s in 0..=steps {
            let t = lo + s as f64 * h;
            point[i] = t;
            let diff: Vec<f64> = (0..d).map(|j| point[j] - mu[j]).collect();
            let q = quad_form(&inv, &diff);
            weights.push((-0.5 * q).exp());
        }
        let trapz = |v: &[f64]| -> f64 {
            let mut acc = 0.0;
            for s in 0..v.len() - 1 {
                acc += 0.5 * (v[s] + v[s + 1]) * h;
            }
            acc
        };
        let z_norm = trapz(&weights);
        let mut integrand = Vec::with_capacity(steps + 1);
        for (s, w) in weights.iter().enumerate() {
            let t = lo + s as f64 * h;
            let q = w / z_norm;
            if q < 1e-300 {
                integrand.push(0.0);
            } else {
                let log_phi = -0.5 * (t * t + LN_2PI);
                integrand.push(q * (q.ln() - log_phi));
            }
        }
        trapz(&integrand)
    }

    pub fn gauss_jordan_inverse(a: &Tensor) -> Tensor {
        let n = a.rows();
        let mut m = a.clone();
        let mut inv = Tensor::identity(n);
        for col in 0..n {
            // partial pivot
            let mut piv = col;
            for r in col + 1..n {
                if m.get2(r, col).abs() > m.get2(piv, col).abs() {
                    piv = r;
                }
            }
            if piv != col {
                for c in 0..n {
                    let (x, y) = (m.get2(col, c), m.get2(piv, c));
                    m.set2(col, c, y);
                    m.set2(piv, c, x);
                    let (x, y) = (inv.get2(col, c), inv.get2(piv, c));
                    inv.set2(col, c, y);
                    inv.set2(piv, c, x);
                }
            }
            let pval = m.get2(col, col);
            for c in 0..n {
                m.set2(col, c, m.get2(col, c) / pval);
                inv.set2(col, c, inv.get2(col, c) / pval);
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = m.get2(r, col);
                if f == 0.0 {
                    continue;
                }
                for c in 0..n {
                    m.set2(r, c, m.get2(r, c) - f * m.get2(col, c));
                    inv.set2(r, c, inv.get2(r, c) - f * inv.get2(col, c));
                }
            }
        }
        inv
    }

    #[test]
    fn conditional_kl_matches_quadrature() {
        let mut rng = Rng::new(81);
        for trial in 0..10 {
            let p = random_full_cov(&mut rng, 3);
            let i = trial % 3;
            let z_rest: Vec<f64> = (0..2).map(|_| rng.next_range(-2.0, 2.0)).collect();
            let implemented = p.conditional_kl(i, &z_rest).unwrap();
            let quad = conditional_kl_quadrature(&p, i, &z_rest);
            assert!(
                (implemented - quad).abs() < 1e-6,
                "trial {trial}: {implemented} vs quadrature {quad}"
            );
        }
    }

    #[test]
    fn conditional_kl_split_matches_single_for_one_index() {
        let mut rng = Rng::new(91);
        let p = random_full_cov(&mut rng, 4);
        let (z, _, _) = p.sample(&mut rng.split(1));
        for i in 0..4 {
            let z_rest: Vec<f64> = (0..4).filter(|&j| j != i).map(|j| z.data()[j]).collect();
            let a = p.conditional_kl(i, &z_rest).unwrap();
            let b = p.conditional_kl_split(&[i], z.data()).unwrap();
            assert!((a - b).abs() < 1e-10, "i={i}: {a} vs {b}");
        }
    }

    #[test]
    fn mutual_info_zero_for_diagonal() {
        let d = 3;
        let mut rng = Rng::new(101);
        let mu = rng.sample_standard_normal(vec![d]);
        let log_diag = rng.sample_standard_normal(vec![d]).scale(0.2);
        let p = FullCovPosterior::new(mu, log_diag, Tensor::zeros(vec![d, d])).unwrap();
        for _ in 0..20 {
            let (z, _, _) = p.sample(&mut rng);
            for i in 0..d {
                let mi = p.mutual_info_estimate(&z, i).unwrap();
                assert!(mi.abs() < 1e-10, "diagonal MI sample {mi}");
            }
        }
    }

    #[test]
    fn mutual_info_bivariate_closed_form() {
        // rho = 0.6: L = [[1, 0], [0.6, 0.8]] gives unit variances
        let rho: f64 = 0.6;
        let mut l_strict = Tensor::zeros(vec![2, 2]);
        l_strict.set2(1, 0, rho);
        let log_diag = Tensor::from_vec(vec![0.0, (1.0 - rho * rho).sqrt().ln()]);
        let p = FullCovPosterior::new(Tensor::zeros(vec![2]), log_diag, l_strict).unwrap();
        let expect = -0.5 * (1.0 - rho * rho).ln();
        let mut rng = Rng::new(111);
        let n = 100_000;
        let (mut acc, mut acc_sq) = (0.0, 0.0);
        for _ in 0..n {
            let (z, _, _) = p.sample(&mut rng);
            let mi = p.mutual_info_estimate(&z, 0).unwrap();
            acc += mi;
            acc_sq += mi * mi;
        }
        let mean = acc / n as f64;
        let se = ((acc_sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * se,
            "mean {mean}, expected {expect}, se {se}"
        );
    }

    #[test]
    fn mutual_info_invariant_to_permuting_other_labels() {
        let mut rng = Rng::new(121);
        let p = random_full_cov(&mut rng, 4);
        let sigma = p.sigma();
        let (z, _, _) = p.sample(&mut rng);
        let i = 1;
        let base = mutual_info_from_moments(z.data(), p.mu.data(), &sigma, i).unwrap();
        // permute coordinates (0, 2, 3) -> (3, 0, 2), keeping i = 1 fixed
        let perm = [3usize, 1, 0, 2];
        let z_p: Vec<f64> = perm.iter().map(|&j| z.data()[j]).collect();
        let mu_p: Vec<f64> = perm.iter().map(|&j| p.mu.data()[j]).collect();
        let sigma_p = submatrix(&sigma, &perm, &perm);
        let permuted = mutual_info_from_moments(&z_p, &mu_p, &sigma_p, i).unwrap();
        assert!((base - permuted).abs() < 1e-10, "{base} vs {permuted}");
    }

    #[test]
    fn m_projection_trivial_cases() {
        let single = GaussianMixtureEven::new(vec![Tensor::from_vec(vec![0.3, -0.7])]).unwrap();
        assert_eq!(single.m_projection_mean().data(), &[0.3, -0.7]);

        let symmetric = GaussianMixtureEven::new(vec![
            Tensor::from_vec(vec![0.5, -0.2]),
            Tensor::from_vec(vec![-0.5, 0.2]),
        ])
        .unwrap();
        assert!(symmetric.m_projection_mean().max_abs() < 1e-15);
    }

    /// Grid quadrature of `KL(mixture || N(mu, I))` in 2-D.
    pub fn mixture_kl_quadrature(mix: &GaussianMixtureEven, mu: &[f64]) -> f64 {
        let lo = -7.0;
        let hi = 7.0;
        let steps = 200usize;
        let h = (hi - lo) / steps as f64;
        let mut acc = 0.0;
        let k = mix.means.len() as f64;
        for a in 0..=steps {
            let x0 = lo + a as f64 * h;
            for b in 0..=steps {
                let x1 = lo + b as f64 * h;
                let mut m = 0.0;
                for comp in &mix.means {
                    let d0 = x0 - comp.data()[0];
                    let d1 = x1 - comp.data()[1];
                    m += (-0.5 * (d0 * d0 + d1 * d1)).exp();
                }
                m /= k * (2.0 * std::f64::consts::PI);
                if m < 1e-300 {
                    continue;
                }
                let d0 = x0 - mu[0];
                let d1 = x1 - mu[1];
                let log_p = -0.5 * (d0 * d0 + d1 * d1) - LN_2PI;
                acc += m * (m.ln() - log_p) * h * h;
            }
        }
        acc
    }

    #[test]
    fn m_projection_beats_perturbations() {
        let mut rng = Rng::new(131);
        let means: Vec<Tensor> = (0..5)
            .map(|_| Tensor::new(vec![2], vec![rng.next_range(-1.0, 1.0), rng.next_range(-1.0, 1.0)]).unwrap())
            .collect();
        let mix = GaussianMixtureEven::new(means).unwrap();
        let best = mix.m_projection_mean();
        let best_kl = mixture_kl_quadrature(&mix, best.data());
        for _ in 0..20 {
            let angle = rng.next_range(0.0, std::f64::consts::TAU);
            let cand = [best.data()[0] + 0.1 * angle.cos(), best.data()[1] + 0.1 * angle.sin()];
            let kl = mixture_kl_quadrature(&mix, &cand);
            assert!(kl > best_kl, "perturbed {kl} <= optimal {best_kl}");
        }
    }

    #[test]
    fn theorem_sandwich_holds() {
        // 0 <= E_w[KL(Q(u|w) || P(u))] - MI <= KL(Q(z) || P(z)),
        // all three terms Monte-Carlo estimated on the same draws.
        let mut rng = Rng::new(141);
        for trial in 0..10 {
            let d = 3 + rng.next_index(3);
            let p = random_full_cov(&mut rng, d);
            let n_u = 1 + rng.next_index(d - 1);
            let mut idx: Vec<usize> = (0..d).collect();
            rng.shuffle(&mut idx);
            let u_idx: Vec<usize> = idx[..n_u].to_vec();
            let w_idx: Vec<usize> = idx[n_u..].to_vec();

            let sigma = p.sigma();
            let chol_full = cholesky(&sigma).unwrap();
            let chol_w = if w_idx.is_empty() {
                None
            } else {
                Some(cholesky(&submatrix(&sigma, &w_idx, &w_idx)).unwrap())
            };
            let chol_u = cholesky(&submatrix(&sigma, &u_idx, &u_idx)).unwrap();
            let mu_w: Vec<f64> = w_idx.iter().map(|&j| p.mu.data()[j]).collect();
            let mu_u: Vec<f64> = u_idx.iter().map(|&j| p.mu.data()[j]).collect();

            let n = 20_000;
            let mut d1 = Vec::with_capacity(n);
            let mut d2 = Vec::with_capacity(n);
            let mut sample_rng = rng.split(trial as u64 + 500);
            for _ in 0..n {
                let (z, _, _) = p.sample(&mut sample_rng);
                let zu: Vec<f64> = u_idx.iter().map(|&j| z.data()[j]).collect();
                let zw: Vec<f64> = w_idx.iter().map(|&j| z.data()[j]).collect();
                let cond = p.conditional_kl_split(&u_idx, z.data()).unwrap();
                let log_joint = gaussian_log_density(z.data(), p.mu.data(), &chol_full).unwrap();
                let log_w = chol_w
                    .as_ref()
                    .map(|c| gaussian_log_density(&zw, &mu_w, c).unwrap())
                    .unwrap_or(0.0);
                let log_u = gaussian_log_density(&zu, &mu_u, &chol_u).unwrap();
                let mi = log_joint - log_w - log_u;
                let kl = log_joint - std_normal_log_density(z.data());
                d1.push(cond - mi);
                d2.push(kl - (cond - mi));
            }
            let stats = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
                (m, (var / v.len() as f64).sqrt())
            };
            let (m1, se1) = stats(&d1);
            let (m2, se2) = stats(&d2);
            assert!(m1 >= -4.0 * se1, "trial {trial}: lower bound violated, {m1} (se {se1})");
            assert!(m2 >= -4.0 * se2, "trial {trial}: upper bound violated, {m2} (se {se2})");
        }
    }

    #[test]
    fn kl_difference_equals_expected_conditional_kl() {
        // KL(Q(z)||P) - KL(marginal without i || P) = E[conditional KL]
        let mut rng = Rng::new(151);
        for trial in 0..5 {
            let d = 3;
            let p = random_full_cov(&mut rng, d);
            let i = trial % d;
            let full_kl = p.kl_closed();
            let rest: Vec<usize> = (0..d).filter(|&j| j != i).collect();
            let sigma = p.sigma();
            let sig_rest = submatrix(&sigma, &rest, &rest);
            let chol_rest = cholesky(&sig_rest).unwrap();
            let mu_rest: Vec<f64> = rest.iter().map(|&j| p.mu.data()[j]).collect();
            let trace: f64 = (0..d - 1).map(|a| sig_rest.get2(a, a)).sum();
            let musq: f64 = mu_rest.iter().map(|m| m * m).sum();
            let marg_kl =
                0.5 * (trace + musq - (d - 1) as f64 - log_det_from_chol(&chol_rest));

            let n = 100_000;
            let (mut acc, mut acc_sq) = (0.0, 0.0);
            let mut sample_rng = rng.split(900 + trial as u64);
            for _ in 0..n {
                let (z, _, _) = p.sample(&mut sample_rng);
                let z_rest: Vec<f64> = rest.iter().map(|&j| z.data()[j]).collect();
                let c = p.conditional_kl(i, &z_rest).unwrap();
                acc += c;
                acc_sq += c * c;
            }
            let mean = acc / n as f64;
            let se = ((acc_sq / n as f64 - mean * mean) / n as f64).sqrt();
            let expect = full_kl - marg_kl;
            assert!(
                (mean - expect).abs() < 4.0 * se.max(1e-6),
                "trial {trial}: E[cond] {mean} vs KL difference {expect} (se {se})"
            );
        }
    }
}
