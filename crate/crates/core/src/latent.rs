//! Gaussian latent variables: posterior heads, reparameterized sampling,
//! KL divergence to the standard Normal prior, free-bits and KL annealing.

use rand::Rng;
use thiserror::Error;

use crate::nn::{trans_dec, BlockStack, Graph, Linear, ParamId, ParamStore, Seq};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Added to the softplus output so standard deviations stay strictly positive in f32.
pub const STD_FLOOR: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("standard deviation must be positive, found {0}")]
    NonPositiveStd(f64),
    #[error("mean has {mean} entries but std has {std}")]
    LengthMismatch { mean: usize, std: usize },
    #[error("invalid schedule: start step {start} must precede end step {end}")]
    BadSchedule { start: u64, end: u64 },
    #[error("{0} semantic latents do not divide a width of {1}")]
    IndivisibleWidth(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Diagonal Gaussian `N(mean, diag(std²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior<T> {
    mean: Vec<T>,
    std: Vec<T>,
}

impl<T: Scalar> GaussianPosterior<T> {
    pub fn new(mean: Vec<T>, std: Vec<T>) -> Result<Self, LatentError> {
        if mean.len() != std.len() {
            return Err(LatentError::LengthMismatch {
                mean: mean.len(),
                std: std.len(),
            });
        }
        if let Some(&s) = std.iter().find(|s| !(**s > T::zero())) {
            return Err(LatentError::NonPositiveStd(s.to_f64_lossy()));
        }
        Ok(GaussianPosterior { mean, std })
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn std(&self) -> &[T] {
        &self.std
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + std ∘ noise`.
    pub fn reparameterize(&self, noise: &[T]) -> Result<Vec<T>, LatentError> {
        if noise.len() != self.dim() {
            return Err(LatentError::LengthMismatch {
                mean: self.dim(),
                std: noise.len(),
            });
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.std)
            .zip(noise)
            .map(|((&m, &s), &e)| m + s * e)
            .collect())
    }

    /// Per-dimension `KL[N(μ, σ²) || N(0, 1)] = ½(μ² + σ² − 1 − 2 ln σ)`.
    pub fn kl_std_normal(&self) -> Vec<T> {
        let half = T::lit(0.5);
        let two = T::lit(2.0);
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| half * (m * m + s * s - T::one() - two * s.ln()))
            .collect()
    }
}

/// Posterior parameters recorded on a tape, both `[rows, width]`.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub mean: Var,
    pub std: Var,
}

/// `mean + std ∘ noise` on the tape; differentiable in mean and std.
pub fn reparameterize<T: Scalar>(tape: &mut Tape<T>, p: PosteriorVars, noise: Tensor<T>) -> Result<Var, LatentError> {
    if tape.shape(p.mean) != noise.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "reparameterize",
            lhs: tape.shape(p.mean).to_vec(),
            rhs: noise.shape().to_vec(),
        }
        .into());
    }
    let eps = tape.constant(noise);
    let scaled = tape.mul(p.std, eps)?;
    Ok(tape.add(p.mean, scaled)?)
}

/// Per-dimension KL to the standard Normal, same shape as the posterior.
pub fn kl_std_normal<T: Scalar>(tape: &mut Tape<T>, p: PosteriorVars) -> Result<Var, LatentError> {
    if let Some(&s) = tape.value(p.std).data().iter().find(|s| !(**s > T::zero())) {
        return Err(LatentError::NonPositiveStd(s.to_f64_lossy()));
    }
    let m2 = tape.square(p.mean)?;
    let s2 = tape.square(p.std)?;
    let ln_s = tape.log(p.std)?;
    let two_ln_s = tape.scale(ln_s, T::lit(2.0))?;
    let a = tape.add(m2, s2)?;
    let a = tape.add_scalar(a, -T::one())?;
    let a = tape.sub(a, two_ln_s)?;
    Ok(tape.scale(a, T::lit(0.5))?)
}

/// `Σ_i max(kl_i, λ)`.
pub fn free_bits<T: Scalar>(tape: &mut Tape<T>, kl_dims: Var, lambda: T) -> Result<Var, LatentError> {
    let clamped = tape.clamp_min(kl_dims, lambda)?;
    Ok(tape.sum(clamped)?)
}

pub fn free_bits_value<T: Scalar>(kl_dims: &[T], lambda: T) -> T {
    kl_dims.iter().map(|&k| k.max(lambda)).sum()
}

/// Linear KL-weight ramp: 0 before `start`, `beta_final` from `end` on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule {
    pub start: u64,
    pub end: u64,
    pub beta_final: f64,
}

impl BetaSchedule {
    pub fn new(start: u64, end: u64, beta_final: f64) -> Result<Self, LatentError> {
        if start >= end {
            return Err(LatentError::BadSchedule { start, end });
        }
        Ok(BetaSchedule { start, end, beta_final })
    }

    pub fn beta_at(&self, step: u64) -> f64 {
        if step <= self.start {
            0.0
        } else if step >= self.end {
            self.beta_final
        } else {
            self.beta_final * (step - self.start) as f64 / (self.end - self.start) as f64
        }
    }
}

/// Identifier embeddings and posterior heads for `L` semantic latents and
/// (for QKVAE) one syntactic latent.
#[derive(Debug, Clone)]
pub struct LatentBank {
    pub slots: usize,
    pub d_sem: usize,
    pub d_syn: usize,
    /// Encoder identifiers `e_1..e_L` (plus `e_s` as the last row when syntactic).
    pub enc_ids: ParamId,
    /// Decoder identifiers `d_1..d_L`, `[L, d_id]`.
    pub dec_ids: ParamId,
    pub d_id: usize,
    pub mu: Linear,
    pub sigma: Linear,
    pub syn_heads: Option<(Linear, Linear)>,
    /// `M^s`: `z_syn -> L` keys of width `d_model`.
    pub key_proj: Option<Linear>,
}

impl LatentBank {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        d_model: usize,
        slots: usize,
        d_sem: usize,
        d_syn: usize,
        d_id: usize,
        syntactic: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, LatentError> {
        if slots == 0 || d_sem % slots != 0 {
            return Err(LatentError::IndivisibleWidth(slots, d_sem));
        }
        let n_ids = if syntactic { slots + 1 } else { slots };
        let dz = d_sem / slots;
        let enc_ids = store.add("latent.enc_ids", Tensor::randn(&[n_ids, d_model], 1.0, rng));
        let dec_ids = store.add("latent.dec_ids", Tensor::randn(&[slots, d_id], 1.0, rng));
        let mu = Linear::new(store, "latent.mu", d_model, dz, true, rng);
        let sigma = Linear::new(store, "latent.sigma", d_model, dz, true, rng);
        let (syn_heads, key_proj) = if syntactic {
            (
                Some((
                    Linear::new(store, "latent.mu_syn", d_model, d_syn, true, rng),
                    Linear::new(store, "latent.sigma_syn", d_model, d_syn, true, rng),
                )),
                Some(Linear::new(store, "latent.key_proj", d_syn, slots * d_model, true, rng)),
            )
        } else {
            (None, None)
        };
        Ok(LatentBank {
            slots,
            d_sem,
            d_syn: if syntactic { d_syn } else { 0 },
            enc_ids,
            dec_ids,
            d_id,
            mu,
            sigma,
            syn_heads,
            key_proj,
        })
    }

    pub fn slot_width(&self) -> usize {
        self.d_sem / self.slots
    }

    pub fn is_syntactic(&self) -> bool {
        self.syn_heads.is_some()
    }
}

/// Posterior parameters for a batch: semantic rows are `[batch * L, d_sem / L]`
/// (slot-major within each sentence), syntactic rows `[batch, d_syn]`.
#[derive(Debug, Clone, Copy)]
pub struct EncodedPosteriors {
    pub sem: PosteriorVars,
    pub syn: Option<PosteriorVars>,
}

fn head<T: Scalar>(g: &mut Graph<T>, rows: Var, mu: &Linear, sigma: &Linear) -> Result<PosteriorVars, LatentError> {
    let mean = mu.forward(g, rows)?;
    let pre = sigma.forward(g, rows)?;
    let sp = g.tape.softplus(pre)?;
    let std = g.tape.add_scalar(sp, T::lit(STD_FLOOR))?;
    Ok(PosteriorVars { mean, std })
}

/// One `TransDec` pass of the identifier queries over the encoder states,
/// followed by the mean and softplus-std heads.
pub fn encode_posteriors<T: Scalar>(
    g: &mut Graph<T>,
    token_states: &Seq,
    bank: &LatentBank,
    dec_stack: &BlockStack,
) -> Result<EncodedPosteriors, LatentError> {
    let n_ids = g.store().get(bank.enc_ids).shape()[0];
    let batch = token_states.batch;
    let ids = g.p(bank.enc_ids);
    let idx: Vec<usize> = (0..batch).flat_map(|_| 0..n_ids).collect();
    let queries = g.tape.gather(ids, &idx)?;
    let z_tilde = trans_dec(g, &Seq::dense(queries, batch, n_ids), token_states, dec_stack)?;
    let sem_idx: Vec<usize> = (0..batch).flat_map(|b| (0..bank.slots).map(move |l| b * n_ids + l)).collect();
    let sem_rows = g.tape.gather(z_tilde.x, &sem_idx)?;
    let sem = head(g, sem_rows, &bank.mu, &bank.sigma)?;
    let syn = match &bank.syn_heads {
        Some((mu_s, sigma_s)) => {
            let syn_idx: Vec<usize> = (0..batch).map(|b| b * n_ids + bank.slots).collect();
            let syn_rows = g.tape.gather(z_tilde.x, &syn_idx)?;
            Some(head(g, syn_rows, mu_s, sigma_s)?)
        }
        None => None,
    };
    Ok(EncodedPosteriors { sem, syn })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::nn::CrossWidths;
    use crate::tensor::grad_check;

    fn post(mean: &[f64], std: &[f64]) -> GaussianPosterior<f64> {
        GaussianPosterior::new(mean.to_vec(), std.to_vec()).unwrap()
    }

    #[test]
    fn reparameterize_examples() {
        let p = post(&[0.3, -1.2], &[0.5, 2.0]);
        assert_eq!(p.reparameterize(&[0.0, 0.0]).unwrap(), vec![0.3, -1.2]);
        let tiny = post(&[0.3, -1.2], &[STD_FLOOR, STD_FLOOR]);
        for (z, m) in tiny.reparameterize(&[1.5, -2.0]).unwrap().iter().zip(tiny.mean()) {
            assert!((z - m).abs() < 1e-4);
        }
        assert!(p.reparameterize(&[1.0]).is_err());
    }

    #[test]
    fn reparameterized_sample_mean_is_within_three_standard_errors() {
        let p = post(&[0.7, -2.0, 0.0], &[0.4, 1.5, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut sums = [0.0f64; 3];
        for _ in 0..n {
            let noise: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            for (s, z) in sums.iter_mut().zip(p.reparameterize(&noise).unwrap()) {
                *s += z;
            }
        }
        for i in 0..3 {
            let bound = 3.0 * p.std()[i] / (n as f64).sqrt();
            assert!((sums[i] / n as f64 - p.mean()[i]).abs() < bound);
        }
    }

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(post(&[0.0; 3], &[1.0; 3]).kl_std_normal(), vec![0.0; 3]);
        for k in post(&[1.0, -1.0], &[1.0, 1.0]).kl_std_normal() {
            assert!((k - 0.5).abs() < 1e-15);
        }
        assert!(GaussianPosterior::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianPosterior::new(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn tape_kl_matches_closed_form_and_is_exact_at_prior() {
        let mut tape = Tape::<f64>::new();
        let mean = tape.constant(Tensor::new(&[1, 3], vec![0.0, 1.0, -0.4]).unwrap());
        let std = tape.constant(Tensor::new(&[1, 3], vec![1.0, 1.0, 0.3]).unwrap());
        let kl = kl_std_normal(&mut tape, PosteriorVars { mean, std }).unwrap();
        let want = post(&[0.0, 1.0, -0.4], &[1.0, 1.0, 0.3]).kl_std_normal();
        assert_eq!(tape.value(kl).data()[0], 0.0);
        for (a, b) in tape.value(kl).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        let bad = tape.constant(Tensor::new(&[1, 3], vec![1.0, 0.0, 0.3]).unwrap());
        assert!(kl_std_normal(&mut tape, PosteriorVars { mean, std: bad }).is_err());
    }

    #[test]
    fn monte_carlo_kl_matches_closed_form_within_one_percent() {
        let means = [0.7, -0.3, 1.2, 0.0, -1.5, 0.4, 0.9, -0.8];
        let stds = [0.6, 1.3, 0.4, 0.2, 0.9, 1.8, 0.5, 0.7];
        let p = post(&means, &stds);
        let closed: f64 = p.kl_std_normal().iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for i in 0..means.len() {
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = means[i] + stds[i] * e;
                let log_q = -stds[i].ln() - 0.5 * e * e;
                let log_p = -0.5 * z * z;
                acc += log_q - log_p;
            }
        }
        let mc = acc / n as f64;
        assert!((mc - closed).abs() / closed < 0.01, "mc {mc} vs closed {closed}");
    }

    #[test]
    fn free_bits_examples() {
        assert!((free_bits_value(&[0.01f64, 0.2], 0.05) - 0.25).abs() < 1e-15);
        assert_eq!(free_bits_value(&[0.3f64, 0.2], 0.05), 0.5);
        let mut tape = Tape::<f64>::new();
        let kl = tape.constant(Tensor::new(&[2], vec![0.01, 0.2]).unwrap());
        let fb = free_bits(&mut tape, kl, 0.05).unwrap();
        assert!((tape.value(fb).data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn beta_schedules_hit_anchor_points() {
        let sem = BetaSchedule::new(3000, 6000, 0.6).unwrap();
        let syn = BetaSchedule::new(7000, 20000, 0.3).unwrap();
        assert_eq!(sem.beta_at(0), 0.0);
        assert_eq!(sem.beta_at(3000), 0.0);
        assert!((sem.beta_at(4500) - 0.3).abs() < 1e-15);
        assert_eq!(sem.beta_at(6000), 0.6);
        assert_eq!(sem.beta_at(9000), 0.6);
        assert_eq!(syn.beta_at(7000), 0.0);
        assert_eq!(syn.beta_at(20000), 0.3);
        assert!(BetaSchedule::new(10, 10, 0.1).is_err());
    }

    #[test]
    fn reparameterize_gradient_in_mean_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let std = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng).data().iter().map(|s| s.abs() + 0.1).collect();
        let std = Tensor::new(&[1, 4], std).unwrap();
        let noise = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let mean = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let report = grad_check(
            |t, m| {
                let s = t.constant(std.clone());
                let z = reparameterize(t, PosteriorVars { mean: m, std: s }, noise.clone()).unwrap();
                t.sum(z)
            },
            &mean,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.analytic.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn encode_posteriors_arity_and_positive_std() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = LatentBank::new(&mut store, 8, 4, 16, 6, 8, true, &mut rng).unwrap();
        let stack = BlockStack::decoder(&mut store, "post", 8, 2, 1, CrossWidths { key: 8, value: 8 }, &mut rng);
        let mut g = Graph::frozen(&store);
        let states = g.constant(Tensor::randn(&[2 * 5, 8], 1.0, &mut rng));
        let seq = Seq {
            x: states,
            batch: 2,
            len: 5,
            lengths: vec![5, 3],
        };
        let enc = encode_posteriors(&mut g, &seq, &bank, &stack).unwrap();
        assert_eq!(g.value(enc.sem.mean).shape(), &[2 * 4, 4]);
        let syn = enc.syn.unwrap();
        assert_eq!(g.value(syn.mean).shape(), &[2, 6]);
        assert!(g.value(enc.sem.std).data().iter().all(|&s| s > 0.0));
        assert!(g.value(syn.std).data().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn bank_rejects_indivisible_width() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(LatentBank::new(&mut store, 8, 3, 16, 4, 8, true, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(m in -5.0f64..5.0, s in 1e-3f64..5.0) {
            prop_assert!(post(&[m], &[s]).kl_std_normal()[0] >= 0.0);
        }

        #[test]
        fn free_bits_bounds(kl in proptest::collection::vec(0.0f64..1.0, 1..16), lambda in 0.0f64..0.5) {
            let fb = free_bits_value(&kl, lambda);
            let plain: f64 = kl.iter().sum();
            prop_assert!(fb >= lambda * kl.len() as f64 - 1e-12);
            if kl.iter().all(|&k| k >= lambda) {
                prop_assert!((fb - plain).abs() < 1e-12);
            } else {
                prop_assert!(fb > plain);
            }
        }

        #[test]
        fn beta_is_monotone(a in 0u64..30_000, b in 0u64..30_000) {
            let s = BetaSchedule::new(3000, 6000, 0.6).unwrap();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(s.beta_at(lo) <= s.beta_at(hi));
        }
    }
}
