use std::fs;
use std::path::Path;

use super::TrainError;
use crate::latent::BetaSchedule;
use crate::model::{Mode, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

/// Training hyperparameters, including the architecture to build.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta_sem_final: f64,
    pub beta_syn_final: f64,
    pub lambda_fb: f64,
    pub sem_anneal: (u64, u64),
    pub syn_anneal: (u64, u64),
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<u64>,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub dropout: f64,
    pub seed: u64,
    pub max_len: usize,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Write elapsed milliseconds into the metric log (otherwise 0).
    pub log_wall_time: bool,
    pub mode: Mode,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub slots: usize,
    pub d_sem: usize,
    pub d_syn: usize,
    pub d_id: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta_sem_final: 0.6,
            beta_syn_final: 0.3,
            lambda_fb: 0.05,
            sem_anneal: (3000, 6000),
            syn_anneal: (7000, 20000),
            batch_size: 64,
            epochs: 40,
            steps: None,
            lr: 1e-3,
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            grad_clip: 0.0,
            dropout: 0.0,
            seed: 0,
            max_len: 24,
            checkpoint_every: 0,
            log_wall_time: true,
            mode: Mode::Qkvae,
            d_model: 64,
            heads: 4,
            layers: 2,
            slots: 4,
            d_sem: 256,
            d_syn: 128,
            d_id: 64,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "beta_sem_final",
    "beta_syn_final",
    "lambda_fb",
    "sem_anneal",
    "syn_anneal",
    "batch_size",
    "epochs",
    "steps",
    "lr",
    "optimizer",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "grad_clip",
    "dropout",
    "seed",
    "max_len",
    "checkpoint_every",
    "log_wall_time",
    "mode",
    "d_model",
    "heads",
    "layers",
    "slots",
    "d_sem",
    "d_syn",
    "d_id",
];

impl TrainConfig {
    /// The schedule scaled by `factor` (e.g. 0.1 for a tenth of the step counts).
    pub fn scaled_schedule(mut self, factor: f64) -> Self {
        let s = |x: u64| (x as f64 * factor).round() as u64;
        self.sem_anneal = (s(self.sem_anneal.0), s(self.sem_anneal.1));
        self.syn_anneal = (s(self.syn_anneal.0), s(self.syn_anneal.1));
        self
    }

    pub fn sem_schedule(&self) -> BetaSchedule {
        BetaSchedule {
            start: self.sem_anneal.0,
            end: self.sem_anneal.1,
            beta_final: self.beta_sem_final,
        }
    }

    pub fn syn_schedule(&self) -> BetaSchedule {
        BetaSchedule {
            start: self.syn_anneal.0,
            end: self.syn_anneal.1,
            beta_final: self.beta_syn_final,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let cfg = ModelConfig {
            mode: Mode::Qkvae,
            vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            enc_layers: self.layers,
            post_layers: self.layers,
            gen_layers: self.layers,
            src_layers: self.layers,
            slots: self.slots,
            d_sem: self.d_sem,
            d_syn: self.d_syn,
            d_id: self.d_id,
            max_len: self.max_len,
            init_seed: self.seed,
        };
        match self.mode {
            Mode::Qkvae => cfg,
            Mode::Advae => cfg.advae_of(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config { line: 0, msg: m });
        if self.beta_sem_final < 0.0 || self.beta_syn_final < 0.0 || self.lambda_fb < 0.0 {
            return bad("betas and lambda_fb must be non-negative".into());
        }
        for (name, (a, b)) in [("sem_anneal", self.sem_anneal), ("syn_anneal", self.syn_anneal)] {
            if a >= b {
                return bad(format!("{name} start {a} must precede end {b}"));
            }
        }
        if self.sem_anneal.1 > self.syn_anneal.0 {
            return bad("sem_anneal must end before syn_anneal begins".into());
        }
        if self.batch_size == 0 || self.lr <= 0.0 || !(0.0..1.0).contains(&self.dropout) {
            return bad("batch_size and lr must be positive, dropout in [0, 1)".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        let (mut b1, mut b2, mut eps) = (0.9, 0.999, 1e-8);
        let mut opt = "adam".to_string();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| TrainError::Config { line: line_no, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let f = || value.parse::<f64>().map_err(|_| err(format!("{key}: '{value}' is not a number")));
            let u = || value.parse::<usize>().map_err(|_| err(format!("{key}: '{value}' is not a count")));
            let range = || -> Result<(u64, u64), TrainError> {
                let (a, b) = value.split_once(',').ok_or_else(|| err(format!("{key}: expected START,END")))?;
                let p = |s: &str| s.trim().parse::<u64>().map_err(|_| err(format!("{key}: '{s}' is not a step")));
                Ok((p(a)?, p(b)?))
            };
            match key {
                "beta_sem_final" => cfg.beta_sem_final = f()?,
                "beta_syn_final" => cfg.beta_syn_final = f()?,
                "lambda_fb" => cfg.lambda_fb = f()?,
                "sem_anneal" => cfg.sem_anneal = range()?,
                "syn_anneal" => cfg.syn_anneal = range()?,
                "batch_size" => cfg.batch_size = u()?,
                "epochs" => cfg.epochs = u()?,
                "steps" => cfg.steps = Some(u()? as u64),
                "lr" => cfg.lr = f()?,
                "optimizer" => opt = value.to_string(),
                "adam_beta1" => b1 = f()?,
                "adam_beta2" => b2 = f()?,
                "adam_eps" => eps = f()?,
                "grad_clip" => cfg.grad_clip = f()?,
                "dropout" => cfg.dropout = f()?,
                "seed" => cfg.seed = u()? as u64,
                "max_len" => cfg.max_len = u()?,
                "checkpoint_every" => cfg.checkpoint_every = u()? as u64,
                "log_wall_time" => {
                    cfg.log_wall_time = value.parse().map_err(|_| err(format!("{key}: expected true or false")))?
                }
                "mode" => {
                    cfg.mode = match value {
                        "qkvae" => Mode::Qkvae,
                        "advae" => Mode::Advae,
                        _ => return Err(err(format!("mode: expected qkvae or advae, got '{value}'"))),
                    }
                }
                "d_model" => cfg.d_model = u()?,
                "heads" => cfg.heads = u()?,
                "layers" => cfg.layers = u()?,
                "slots" => cfg.slots = u()?,
                "d_sem" => cfg.d_sem = u()?,
                "d_syn" => cfg.d_syn = u()?,
                "d_id" => cfg.d_id = u()?,
                _ => return Err(err(format!("unknown key '{key}'"))),
            }
        }
        cfg.optimizer = match opt.as_str() {
            "adam" => Optimizer::Adam { beta1: b1, beta2: b2, eps },
            "sgd" => Optimizer::Sgd,
            other => {
                return Err(TrainError::Config {
                    line: 0,
                    msg: format!("optimizer: expected adam or sgd, got '{other}'"),
                })
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
