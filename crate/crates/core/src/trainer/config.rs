use serde::{Deserialize, Serialize};

use crate::datasets::FactorSpec;
use crate::error::{Error, Result};
use crate::losses::{GammaRamp, LossWeights};
use crate::lvm::SignalDist;
use crate::nets::model::ArchConfig;

/// Phase boundaries in iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub warmup_end: u64,
    /// Self-training (κ blending) and the remaining losses start here.
    pub lvm_insert: u64,
    pub kappa_end: u64,
    /// Iterations between moment re-estimation and CP refits.
    pub refresh_period: u64,
    /// First refit and activation of `L_l`.
    pub l_start: u64,
    pub total_iters: u64,
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            warmup_end: 200,
            lvm_insert: 2000,
            kappa_end: 8000,
            refresh_period: 500,
            l_start: 200,
            total_iters: 10000,
            batch_size: 64,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.warmup_end < self.lvm_insert
            && self.lvm_insert < self.kappa_end
            && self.kappa_end <= self.total_iters
            && self.refresh_period >= 1
            && self.l_start >= self.warmup_end
            && self.batch_size >= 2;
        if !ok {
            return Err(Error::Config(format!(
                "schedule must satisfy warmup_end < lvm_insert < kappa_end <= total_iters, \
                 l_start >= warmup_end, refresh_period >= 1, batch_size >= 2: {self:?}"
            )));
        }
        Ok(())
    }

    /// Blend weight of the learned latent model: 0 until `lvm_insert`, then
    /// linear up to 1 at `kappa_end`.
    pub fn kappa(&self, iteration: u64) -> f64 {
        if iteration <= self.lvm_insert {
            0.0
        } else if iteration >= self.kappa_end {
            1.0
        } else {
            (iteration - self.lvm_insert) as f64 / (self.kappa_end - self.lvm_insert) as f64
        }
    }

    pub fn is_refit(&self, iteration: u64) -> bool {
        iteration >= self.l_start && (iteration - self.l_start) % self.refresh_period == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LvmKind {
    Ica,
    Vae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvmConfig {
    pub kind: LvmKind,
    pub noise_sigma: f64,
    pub signal: SignalDist,
    pub subtract_noise_on_infer: bool,
    pub buffer_size: usize,
    pub gamma_o: f64,
    pub first_fit_steps: usize,
    pub refit_steps: usize,
    pub fit_lr: f64,
    pub vae_hidden: usize,
    pub vae_lr: f64,
}

impl Default for LvmConfig {
    fn default() -> Self {
        Self {
            kind: LvmKind::Ica,
            noise_sigma: 0.01,
            signal: SignalDist::default(),
            subtract_noise_on_infer: false,
            buffer_size: 4096,
            gamma_o: 0.1,
            first_fit_steps: 2000,
            refit_steps: 500,
            fit_lr: 0.05,
            vae_hidden: 32,
            vae_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta2: f64,
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta2: 0.9,
            clip: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    /// Codes per step used for the masking loss.
    pub batch: usize,
    /// Perturb every element of every code instead of cycling one per code.
    pub sweep: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { batch: 16, sweep: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Fréchet-proxy evaluation period in iterations; 0 disables it.
    pub every: u64,
    pub samples: usize,
    pub probe_seed: u64,
    /// Checkpoint period in iterations; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 200,
            samples: 512,
            probe_seed: crate::metrics::DEFAULT_PROBE_SEED,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataConfig {
    Shapes { spec: FactorSpec, size: usize, seed: u64 },
    Folder { path: String },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Shapes {
            spec: FactorSpec::default(),
            size: 4096,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tag: String,
    pub seed: u64,
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub lvm: LvmConfig,
    pub optim: OptimConfig,
    pub masking: MaskingConfig,
    pub eval: EvalConfig,
    /// Plain GAN: never blend in the learned model and never fit it.
    pub force_kappa_zero: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tag: "full".into(),
            seed: 0,
            arch: ArchConfig::default(),
            data: DataConfig::default(),
            schedule: TrainSchedule::default(),
            weights: LossWeights::default(),
            lvm: LvmConfig::default(),
            optim: OptimConfig::default(),
            masking: MaskingConfig::default(),
            eval: EvalConfig::default(),
            force_kappa_zero: false,
        }
    }
}

/// Named configurations: the full method, the plain GAN comparator, and
/// single-component ablations.
pub const PRESETS: [&str; 8] = ["full", "smoke", "baseline-gan", "-Ls", "-Lc", "-ortho", "-Lm", "-vae"];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.schedule.validate()?;
        self.weights.validate()?;
        if self.arch.feature_dim != self.arch.latent_dim {
            return Err(Error::Config(format!(
                "feature dim {} must equal latent dim {} (codes are compared with features)",
                self.arch.feature_dim, self.arch.latent_dim
            )));
        }
        if let DataConfig::Shapes { spec, size, .. } = &self.data {
            spec.validate()?;
            if *size == 0 {
                return Err(Error::Config("dataset size must be positive".into()));
            }
            if spec.image != self.arch.image {
                return Err(Error::Config(format!("renderer image {:?} vs model image {:?}", spec.image, self.arch.image)));
            }
        }
        if self.lvm.buffer_size < 2 || !(self.lvm.noise_sigma >= 0.0) || !(self.lvm.gamma_o >= 0.0) {
            return Err(Error::Config("lvm buffer must hold ≥ 2 features; sigma and gamma_o nonnegative".into()));
        }
        self.lvm.signal.validate().map_err(|e| Error::Config(e.to_string()))?;
        let o = &self.optim;
        if !(o.lr_g > 0.0 && o.lr_d > 0.0 && (0.0..1.0).contains(&o.beta2) && o.clip > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.masking.batch == 0 || self.eval.samples < 2 && self.eval.every > 0 {
            return Err(Error::Config("masking batch must be positive and eval needs ≥ 2 samples".into()));
        }
        Ok(())
    }

    /// Desk-scale schedule for 3000-iteration runs: the default phase
    /// boundaries scaled so that every phase is reached.
    pub fn smoke() -> Self {
        let mut c = Self {
            tag: "smoke".into(),
            ..Self::default()
        };
        c.schedule = TrainSchedule {
            warmup_end: 200,
            lvm_insert: 600,
            kappa_end: 2400,
            refresh_period: 400,
            l_start: 200,
            total_iters: 3000,
            batch_size: 32,
        };
        // Full-strength masking swamps the adversarial gradient of these
        // small dense nets, so the ramp keeps its shape at a tenth of the
        // weight.
        c.weights.gamma_m = GammaRamp {
            start_iter: 600,
            end_iter: 3000,
            ..GammaRamp::default()
        }
        .scaled(0.1);
        c.data = DataConfig::Shapes {
            spec: FactorSpec::default(),
            size: 2048,
            seed: 1,
        };
        c.eval.every = 200;
        c.eval.samples = 256;
        c
    }

    /// Applies a named preset on top of `self`, keeping sizes and schedule.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "full" => {
                *self = Self {
                    tag: "full".into(),
                    ..Self::default()
                }
            }
            "smoke" => *self = Self::smoke(),
            "baseline-gan" => {
                self.weights = LossWeights::zero();
                self.force_kappa_zero = true;
            }
            "-Ls" => self.weights.gamma_s = 0.0,
            "-Lc" => self.weights.gamma_c = 0.0,
            "-ortho" => self.lvm.gamma_o = 0.0,
            "-Lm" => self.weights.gamma_m = self.weights.gamma_m.scaled(0.0),
            "-vae" => self.lvm.kind = LvmKind::Vae,
            other => return Err(Error::Config(format!("unknown preset {other}; known: {}", PRESETS.join(", ")))),
        }
        if !matches!(name, "full" | "smoke") {
            self.tag = name.to_string();
        }
        Ok(())
    }

    /// Tag reflecting single-loss removals relative to the defaults.
    pub fn derived_tag(&self) -> String {
        if self.force_kappa_zero {
            return "baseline-gan".into();
        }
        let mut parts = Vec::new();
        if self.weights.gamma_s == 0.0 {
            parts.push("-Ls");
        }
        if self.weights.gamma_c == 0.0 {
            parts.push("-Lc");
        }
        if self.lvm.gamma_o == 0.0 {
            parts.push("-ortho");
        }
        if self.weights.gamma_m.end_value == 0.0 {
            parts.push("-Lm");
        }
        if self.lvm.kind == LvmKind::Vae {
            parts.push("-vae");
        }
        if parts.is_empty() {
            self.tag.clone()
        } else {
            parts.concat()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_endpoints_and_ramp() {
        let s = TrainSchedule::default();
        assert_eq!(s.kappa(0), 0.0);
        assert_eq!(s.kappa(200), 0.0);
        assert_eq!(s.kappa(5000), 0.5);
        assert_eq!(s.kappa(8000), 1.0);
        assert_eq!(s.kappa(20000), 1.0);
        let mut last = 0.0;
        for i in 0..10000 {
            let k = s.kappa(i);
            assert!(k >= last);
            last = k;
        }
    }

    #[test]
    fn refits_start_at_l_start() {
        let s = TrainSchedule::default();
        assert!(!s.is_refit(199));
        assert!(s.is_refit(200));
        assert!(s.is_refit(700));
        assert!(!s.is_refit(701));
    }

    #[test]
    fn invalid_schedule_rejected() {
        let s = TrainSchedule {
            kappa_end: 100,
            ..Default::default()
        };
        assert!(s.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::smoke().validate().is_ok());
    }

    #[test]
    fn presets_toggle_one_component() {
        let mut c = TrainConfig::smoke();
        c.apply_preset("-Ls").unwrap();
        assert_eq!(c.weights.gamma_s, 0.0);
        assert_eq!(c.weights.gamma_c, 0.1);
        assert_eq!(c.derived_tag(), "-Ls");
        let mut b = TrainConfig::smoke();
        b.apply_preset("baseline-gan").unwrap();
        assert!(b.force_kappa_zero);
        assert_eq!(b.weights, LossWeights::zero());
        assert!(c.apply_preset("nope").is_err());
    }
}
