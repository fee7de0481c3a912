use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{elbo_loss, TrainConfig, TrainError};
use crate::model::{Mode, ModelConfig, QkvaeModel, TokenBatch};
use crate::nn::{Graph, ParamId};
use crate::tensor::relative_error;

#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradReport {
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
}

fn tiny_config(mode: Mode, d_model: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        mode,
        vocab_size: 12,
        d_model,
        heads: 2,
        enc_layers: 1,
        post_layers: 1,
        gen_layers: 1,
        src_layers: 1,
        slots: 2,
        d_sem: d_model - 2,
        d_syn: d_model / 2,
        d_id: d_model / 2 + 1,
        max_len: 6,
        init_seed: seed,
    }
}

/// Central-difference check of the full ELBo gradient on tiny 64-bit models.
///
/// Each trial draws a fresh model (alternating QKVAE and ADVAE), a padded
/// batch and `coords` random parameter coordinates, with both KL weights active.
pub fn elbo_grad_check(trials: usize, coords: usize, seed: u64) -> Result<ElboGradReport, TrainError> {
    elbo_grad_check_sized(8, trials, coords, seed)
}

/// [`elbo_grad_check`] with model width `d_model` (even, at least 4).
pub fn elbo_grad_check_sized(d_model: usize, trials: usize, coords: usize, seed: u64) -> Result<ElboGradReport, TrainError> {
    if d_model < 4 || d_model % 2 != 0 {
        return Err(TrainError::Config {
            line: 0,
            msg: format!("gradient-check width must be even and at least 4, got {d_model}"),
        });
    }
    let cfg = TrainConfig {
        sem_anneal: (0, 10),
        syn_anneal: (10, 20),
        ..TrainConfig::default()
    };
    let step = 15;
    let eps = 1e-6;
    let mut report = ElboGradReport {
        trials,
        coordinates: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let mode = if trial % 2 == 0 { Mode::Qkvae } else { Mode::Advae };
        let mc = tiny_config(mode, d_model, seed.wrapping_add(trial as u64));
        let mut model = QkvaeModel::<f64>::new(mc.clone())?;
        let sentences: Vec<Vec<u32>> = (0..rng.gen_range(1..=3))
            .map(|_| (0..rng.gen_range(1..=mc.max_len)).map(|_| rng.gen_range(4..mc.vocab_size as u32)).collect())
            .collect();
        let batch = TokenBatch::new(&sentences, mc.max_len)?;
        let noise_seed = rng.gen::<u64>();
        let loss_at = |m: &QkvaeModel<f64>| -> Result<f64, TrainError> {
            let mut g = Graph::frozen(&m.store);
            let mut nr = ChaCha8Rng::seed_from_u64(noise_seed);
            let (loss, _) = elbo_loss(&mut g, m, &batch, step, &cfg, &mut nr)?;
            Ok(g.value(loss).data()[0])
        };
        let analytic: Vec<(ParamId, Vec<f64>)> = {
            let mut g = Graph::new(&model.store);
            let mut nr = ChaCha8Rng::seed_from_u64(noise_seed);
            let (loss, _) = elbo_loss(&mut g, &model, &batch, step, &cfg, &mut nr)?;
            g.backward(loss)?;
            g.param_grads().into_iter().map(|(id, gr)| (id, gr.to_vec())).collect()
        };
        for _ in 0..coords {
            let (id, grad) = &analytic[rng.gen_range(0..analytic.len())];
            let j = rng.gen_range(0..grad.len());
            let orig = model.store.get(*id).data()[j];
            model.store.get_mut(*id).data_mut()[j] = orig + eps;
            let up = loss_at(&model)?;
            model.store.get_mut(*id).data_mut()[j] = orig - eps;
            let down = loss_at(&model)?;
            model.store.get_mut(*id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(grad[j], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (model.store.name(*id).to_string(), j);
            }
        }
    }
    Ok(report)
}
