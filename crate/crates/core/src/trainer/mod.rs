//! Self-training loop: hinge GAN with a latent model fitted to
//! discriminator features and blended into the generator input.

pub mod checkpoint;
mod config;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{DataConfig, EvalConfig, LvmConfig, LvmKind, MaskingConfig, OptimConfig, TrainConfig, TrainSchedule, PRESETS};

use crate::cp_factor::{self, CpFitConfig, CpModel};
use crate::datasets::{load_folder, shapes_dataset, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, MaskingBatch};
use crate::lvm::{max_normalize_rows, FeatureVae, IcaLvm, LatentSampler};
use crate::metrics::{generator_fid, PerceptualProbe};
use crate::moments::FeatureBuffer;
use crate::nets::autodiff::{GradStore, Graph, ParamId, RmsOptimizer};
use crate::nets::model::{GanModel, Mode};
use crate::tensor::Matrix;

pub const METRICS_HEADER: &str = "iter,loss_gan_d,loss_gan_g,loss_l,loss_c,loss_s,loss_m,kappa,gamma_m";
pub const EVAL_HEADER: &str = "iter,fid";

/// Smallest buffer that a CP fit is attempted on, in multiples of `d`.
const MIN_FIT_ROWS_PER_DIM: usize = 4;

/// Everything a resumed run needs; this is what a checkpoint stores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub iteration: u64,
    pub model: GanModel,
    pub opt_d: RmsOptimizer,
    pub opt_g: RmsOptimizer,
    pub rng: ChaCha8Rng,
    pub cp: Option<CpModel>,
    pub lvm: Option<IcaLvm>,
    pub vae: Option<FeatureVae>,
    pub buffer: FeatureBuffer,
}

impl TrainerState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut arch = config.arch.clone();
        arch.init_seed = config.seed;
        let model = GanModel::new(arch)?;
        let opt_d = RmsOptimizer::new(&model.params, config.optim.lr_d, config.optim.beta2);
        let opt_g = RmsOptimizer::new(&model.params, config.optim.lr_g, config.optim.beta2);
        let d = config.arch.latent_dim;
        let vae = match config.lvm.kind {
            LvmKind::Vae if !config.force_kappa_zero => Some(FeatureVae::new(
                config.arch.feature_dim,
                d,
                config.lvm.vae_hidden,
                config.lvm.vae_lr,
                config.seed ^ 0x7ae,
            )?),
            _ => None,
        };
        Ok(Self {
            buffer: FeatureBuffer::new(config.arch.feature_dim, config.lvm.buffer_size),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            iteration: 0,
            cp: None,
            lvm: None,
            vae,
            model,
            opt_d,
            opt_g,
            config,
        })
    }

    /// Restores lookup tables that are not serialized.
    fn rebuild(&mut self) {
        self.model.params.rebuild_index();
        if let Some(v) = &mut self.vae {
            v.params.rebuild_index();
        }
    }

    fn latent_model(&self) -> Option<&dyn LatentSampler> {
        match (&self.lvm, &self.vae) {
            (Some(l), _) => Some(l),
            (None, Some(v)) => Some(v),
            _ => None,
        }
    }

    pub fn kappa(&self) -> f64 {
        if self.config.force_kappa_zero {
            0.0
        } else {
            self.config.schedule.kappa(self.iteration)
        }
    }

    /// Code distribution the generator is currently trained on.
    pub fn sampler(&self) -> BlendSampler<'_> {
        BlendSampler {
            kappa: self.kappa(),
            lvm: self.latent_model(),
            dim: self.config.arch.latent_dim,
        }
    }

    /// Latent codes of real images: inferred through the latent model when
    /// one exists, otherwise the raw features; max-normalized.
    fn infer_codes(&self, phi: &Matrix, rng: &mut ChaCha8Rng) -> Result<Matrix> {
        let mut h = match (&self.lvm, &self.vae) {
            (Some(l), _) => l.infer_rows(phi, rng)?,
            (None, Some(v)) => v.infer_rows(phi)?,
            _ => phi.clone(),
        };
        max_normalize_rows(&mut h);
        Ok(h)
    }
}

/// `κ·h_l + (1 − κ)·h_p` with `h_p ~ N(0, I)`, before max-normalization.
/// Falls back to the prior when no latent model is available.
pub struct BlendSampler<'a> {
    pub kappa: f64,
    pub lvm: Option<&'a dyn LatentSampler>,
    pub dim: usize,
}

impl LatentSampler for BlendSampler<'_> {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn sample_signals(&self, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        draw_generator_input(self.kappa, self.lvm, self.dim, n, rng, false)
    }
}

/// Generator input for one batch. With `normalize`, rows are max-normalized.
pub fn draw_generator_input(
    kappa: f64,
    lvm: Option<&dyn LatentSampler>,
    dim: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
    normalize: bool,
) -> Matrix {
    let data = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    let mut h = Matrix::from_vec(n, dim, data).expect("shape");
    if kappa > 0.0 {
        match lvm {
            Some(l) if l.latent_dim() == dim => {
                let hl = l.sample_signals(n, rng);
                for (p, q) in h.as_mut_slice().iter_mut().zip(hl.as_slice()) {
                    *p = kappa * q + (1.0 - kappa) * *p;
                }
            }
            _ => log::warn!("κ = {kappa} but no latent model is available; drawing from the prior"),
        }
    }
    if normalize {
        max_normalize_rows(&mut h);
    }
    h
}

/// Unweighted losses of one iteration, one CSV row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: u64,
    pub loss_gan_d: f64,
    pub loss_gan_g: f64,
    pub loss_l: f64,
    pub loss_c: f64,
    pub loss_s: f64,
    pub loss_m: f64,
    pub kappa: f64,
    pub gamma_m: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration, self.loss_gan_d, self.loss_gan_g, self.loss_l, self.loss_c, self.loss_s, self.loss_m, self.kappa, self.gamma_m
        )
    }

    fn values(&self) -> [(&'static str, f64); 6] {
        [
            ("loss_gan_d", self.loss_gan_d),
            ("loss_gan_g", self.loss_gan_g),
            ("loss_l", self.loss_l),
            ("loss_c", self.loss_c),
            ("loss_s", self.loss_s),
            ("loss_m", self.loss_m),
        ]
    }
}

/// Trainer over an in-memory dataset.
pub struct Trainer {
    pub state: TrainerState,
    pub data: Dataset,
    pub probe: PerceptualProbe,
}

fn nonfinite(iteration: u64, what: impl std::fmt::Display) -> Error {
    Error::TrainingAborted {
        iteration: iteration as usize,
        reason: format!("non-finite {what}"),
    }
}

/// Builds the dataset described by `config`.
pub fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    match &config.data {
        DataConfig::Shapes { spec, size, seed } => shapes_dataset(spec, *size, *seed),
        DataConfig::Folder { path } => {
            let (ds, report) = load_folder(Path::new(path), config.arch.image)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            Ok(ds)
        }
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = load_dataset(&config)?;
        Self::with_dataset(config, data)
    }

    pub fn with_dataset(config: TrainConfig, data: Dataset) -> Result<Self> {
        let state = TrainerState::new(config)?;
        Self::from_state(state, data)
    }

    pub fn from_state(state: TrainerState, data: Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("training needs at least one image".into()));
        }
        if data.shape != state.config.arch.image {
            return Err(Error::Config(format!("dataset images {:?} vs model {:?}", data.shape, state.config.arch.image)));
        }
        let probe = PerceptualProbe::new(data.shape, 8, state.config.eval.probe_seed)?;
        Ok(Self { state, data, probe })
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.state.config.schedule.total_iters
    }

    /// Re-estimates feature moments and refits the CP model, warm-started
    /// from the previous fit with component order kept. A failed fit keeps
    /// the previous model.
    pub fn refit(&mut self) -> Result<bool> {
        let st = &mut self.state;
        let d = st.config.arch.latent_dim;
        if st.buffer.len() < MIN_FIT_ROWS_PER_DIM * d {
            return Ok(false);
        }
        let moments = st.buffer.moments()?;
        let lc = &st.config.lvm;
        let mut cfg = CpFitConfig {
            rank: d,
            gamma_o: lc.gamma_o,
            steps: lc.first_fit_steps,
            lr: lc.fit_lr,
            seed: st.config.seed ^ st.iteration,
            ..Default::default()
        };
        let fitted = match &st.cp {
            None => cp_factor::fit(&moments, &cfg),
            Some(prev) => {
                cfg.steps = lc.refit_steps;
                cfg.canonicalize = false;
                cp_factor::fit_from(prev.clone(), &moments, &cfg)
            }
        };
        let report = match fitted {
            Ok(r) if r.final_loss.is_finite() => r,
            Ok(r) => {
                log::warn!("CP refit at {} ended with loss {}; keeping previous model", st.iteration, r.final_loss);
                return Ok(false);
            }
            Err(e) => {
                log::warn!("CP refit at {} failed ({e}); keeping previous model", st.iteration);
                return Ok(false);
            }
        };
        match IcaLvm::build_mixing(&report.model, lc.noise_sigma, lc.signal) {
            Ok(mut lvm) => {
                lvm.subtract_noise_on_infer = lc.subtract_noise_on_infer;
                st.lvm = Some(lvm);
                st.cp = Some(report.model);
                Ok(true)
            }
            Err(e) => {
                log::warn!("mixing matrix from refit at {} unusable ({e}); keeping previous model", st.iteration);
                Ok(false)
            }
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self) -> Result<StepLog> {
        let t = self.state.iteration;
        let cfg = self.state.config.clone();
        let sched = cfg.schedule;
        let d = cfg.arch.latent_dim;
        let n = sched.batch_size;
        let active = !cfg.force_kappa_zero;

        if active && cfg.lvm.kind == LvmKind::Ica && sched.is_refit(t) {
            self.refit()?;
        }
        let kappa = self.state.kappa();
        let aux = active && t >= sched.lvm_insert;
        let gamma_m = cfg.weights.gamma_m.value(t);
        let use_l = active && t >= sched.l_start && cfg.weights.gamma_l > 0.0;

        let mut rng = self.state.rng.clone();
        let h_f = draw_generator_input(kappa, self.state.latent_model(), d, n, &mut rng, true);
        let x_r = self.data.sample_batch(n, &mut rng);
        let x_f = {
            use crate::nets::model::ImageGenerator;
            self.state.model.generate_batch(&h_f)?
        };
        let t_mix: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let nm = cfg.masking.batch.min(n);
        let base = h_f.select_rows(&(0..nm).collect::<Vec<_>>());
        let mask_batch = if aux && gamma_m > 0.0 {
            Some(if cfg.masking.sweep {
                let mut noise = Matrix::zeros(nm, d);
                for i in 0..nm {
                    for j in 0..d {
                        noise.set(i, j, toward_zero(base.get(i, j), rng.random_range(0.5..1.0)));
                    }
                }
                MaskingBatch::sweep(&base, &noise)?
            } else {
                let offset = (t as usize) % d;
                let noise: Vec<f64> = (0..nm)
                    .map(|i| toward_zero(base.get(i, (offset + i) % d), rng.random_range(0.5..1.0)))
                    .collect();
                MaskingBatch::cycled(&base, offset, &noise)?
            })
        } else {
            None
        };
        let phi_r_now = self.state.model.features(&x_r)?;
        let h_r = self.state.infer_codes(&phi_r_now, &mut rng)?;
        let vae_eps: Option<Matrix> = self.state.vae.as_ref().map(|v| {
            let data = (0..2 * n * v.latent_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            Matrix::from_vec(2 * n, v.latent_dim(), data).expect("shape")
        });
        let mut log = StepLog {
            iteration: t,
            kappa,
            gamma_m,
            ..Default::default()
        };

        // ---- discriminator ----
        let w = cfg.weights;
        let d_ids = self.state.model.discriminator_ids();
        let mut grads = GradStore::for_store(&self.state.model.params);
        let phi_all_value;
        {
            let model = &self.state.model;
            let mut g = Graph::new(&model.params);
            let xr = g.input(x_r.clone());
            let xf = g.input(x_f.clone());
            let dr = model.discriminator_graph(&mut g, xr, Mode::Train)?;
            let df = model.discriminator_graph(&mut g, xf, Mode::Train)?;
            let mut total = losses::hinge_d_graph(&mut g, dr.adv, df.adv)?;
            log.loss_gan_d = g.scalar(total);
            let phi_all = g.concat_rows(&[dr.phi, df.phi])?;
            phi_all_value = g.value(phi_all).clone();
            if use_l {
                let l_node = match (&self.state.cp, &self.state.vae, &vae_eps) {
                    (Some(cp), _, _) if cfg.lvm.kind == LvmKind::Ica => Some(g.cp_feature_loss(phi_all, cp)?),
                    (_, Some(vae), Some(eps)) => {
                        let (value, grad) = elbo_input_grad(vae, &phi_all_value, eps.clone())?;
                        let gi = g.input(grad);
                        let prod = g.hadamard(phi_all, gi)?;
                        let s = g.sum(prod);
                        // value carries the ELBO while the gradient is exact
                        let s = g.add_scalar(s, value - g.scalar(s));
                        Some(s)
                    }
                    _ => None,
                };
                if let Some(l) = l_node {
                    log.loss_l = g.scalar(l);
                    let wl = g.scale(l, w.gamma_l);
                    total = g.add(total, wl)?;
                }
            }
            if aux {
                let hf = g.input(h_f.clone());
                let hr = g.input(h_r.clone());
                if w.gamma_c > 0.0 {
                    let c = losses::sq_dist_graph(&mut g, hf, df.phi)?;
                    let c = g.scale(c, w.gamma_c);
                    total = g.add(total, c)?;
                }
                if w.gamma_s > 0.0 {
                    let s = losses::mixup_graph(&mut g, model, xr, xf, hr, hf, &t_mix, Mode::Train)?;
                    let s = g.scale(s, w.gamma_s);
                    total = g.add(total, s)?;
                }
                if let Some(mb) = &mask_batch {
                    let imgs = {
                        use crate::nets::model::ImageGenerator;
                        (model.generate_batch(&mb.base)?, model.generate_batch(&mb.perturbed)?)
                    };
                    let ib = g.input(imgs.0);
                    let ip = g.input(imgs.1);
                    let db = model.discriminator_graph(&mut g, ib, Mode::Train)?;
                    let dp = model.discriminator_graph(&mut g, ip, Mode::Train)?;
                    let m = losses::masking_graph(&mut g, model, db.phi, dp.phi, mb.targets.clone(), Mode::Train)?;
                    log.loss_m = g.scalar(m);
                    let m = g.scale(m, gamma_m);
                    total = g.add(total, m)?;
                }
            }
            if !g.scalar(total).is_finite() {
                return Err(nonfinite(t, "discriminator loss"));
            }
            g.backward(total, &mut grads).map_err(|e| nonfinite(t, e))?;
        }
        grads.clip_global_norm(cfg.optim.clip);
        self.state.opt_d.apply(&mut self.state.model.params, &grads, &d_ids);
        if !self.state.model.params.all_finite() {
            return Err(nonfinite(t, "discriminator parameters"));
        }
        if active {
            self.state.buffer.push_rows(&phi_all_value)?;
            if let Some(vae) = &mut self.state.vae {
                vae.train_step(&phi_all_value, &mut rng).map_err(|e| nonfinite(t, e))?;
            }
        }

        // ---- generator ----
        let g_ids = self.state.model.generator_ids();
        let mut grads = GradStore::for_store(&self.state.model.params);
        {
            let model = &self.state.model;
            let mut g = Graph::new(&model.params);
            let hf = g.input(h_f.clone());
            let xf = model.generator_graph(&mut g, hf, Mode::Train)?;
            let df = model.discriminator_graph(&mut g, xf, Mode::Frozen)?;
            let mut total = losses::hinge_g_graph(&mut g, df.adv);
            log.loss_gan_g = g.scalar(total);
            if aux {
                let c = losses::sq_dist_graph(&mut g, hf, df.phi)?;
                log.loss_c = g.scalar(c);
                if w.gamma_c > 0.0 {
                    let c = g.scale(c, w.gamma_c);
                    total = g.add(total, c)?;
                }
                let xr = g.input(x_r);
                let hr = g.input(h_r);
                let s = losses::mixup_graph(&mut g, model, xr, xf, hr, hf, &t_mix, Mode::Frozen)?;
                log.loss_s = g.scalar(s);
                if w.gamma_s > 0.0 {
                    let s = g.scale(s, w.gamma_s);
                    total = g.add(total, s)?;
                }
                if let Some(mb) = &mask_batch {
                    let hb = g.input(mb.base.clone());
                    let hp = g.input(mb.perturbed.clone());
                    let ib = model.generator_graph(&mut g, hb, Mode::Train)?;
                    let ip = model.generator_graph(&mut g, hp, Mode::Train)?;
                    let db = model.discriminator_graph(&mut g, ib, Mode::Frozen)?;
                    let dp = model.discriminator_graph(&mut g, ip, Mode::Frozen)?;
                    let m = losses::masking_graph(&mut g, model, db.phi, dp.phi, mb.targets.clone(), Mode::Frozen)?;
                    let m = g.scale(m, gamma_m);
                    total = g.add(total, m)?;
                }
            }
            if !g.scalar(total).is_finite() {
                return Err(nonfinite(t, "generator loss"));
            }
            g.backward(total, &mut grads).map_err(|e| nonfinite(t, e))?;
        }
        grads.clip_global_norm(cfg.optim.clip);
        self.state.opt_g.apply(&mut self.state.model.params, &grads, &g_ids);
        if !self.state.model.params.all_finite() {
            return Err(nonfinite(t, "generator parameters"));
        }
        if let Some((name, v)) = log.values().into_iter().find(|(_, v)| !v.is_finite()) {
            return Err(nonfinite(t, format!("{name} = {v}")));
        }

        self.state.rng = rng;
        self.state.iteration += 1;
        Ok(log)
    }

    /// Fréchet proxy of the current generator under its training code
    /// distribution, with an rng independent of training.
    pub fn evaluate_fid(&self, samples: usize) -> Result<f64> {
        let seed = self.state.config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ self.state.iteration;
        generator_fid(&self.state.model, &self.state.sampler(), &self.data.images, &self.probe, samples, seed)
    }

    /// Serializes the state. Floats are stored as `f32`, so the live state is
    /// replaced by its decoded copy: continuing after a save and resuming
    /// from the file follow the same trajectory.
    pub fn checkpoint_bytes(&mut self) -> Result<Vec<u8>> {
        let bytes = checkpoint::encode(
            &self.state,
            json!({ "iteration": self.state.iteration, "tag": self.state.config.tag }),
        )?;
        self.state = decode_state(&bytes)?;
        Ok(bytes)
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes()?;
        let tmp = path.with_extension("lfck.tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a checkpoint, rebuilding the dataset from its config.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let state = read_state(path)?;
        let data = load_dataset(&state.config)?;
        Self::from_state(state, data)
    }
}

fn toward_zero(h: f64, magnitude: f64) -> f64 {
    if h > 0.0 {
        -magnitude
    } else {
        magnitude
    }
}

/// Batch-mean negative ELBO and its gradient with respect to the features.
fn elbo_input_grad(vae: &FeatureVae, phi: &Matrix, eps: Matrix) -> Result<(f64, Matrix)> {
    let mut store = vae.params.clone();
    let pid: ParamId = store.add("input.phi", phi.clone())?;
    let mut grads = GradStore::for_store(&store);
    let mut g = Graph::new(&store);
    let p = g.param(pid);
    let out = vae.neg_elbo_graph(&mut g, p, eps)?;
    g.backward(out.loss, &mut grads)?;
    Ok((g.scalar(out.loss), grads.get(pid).clone()))
}

pub fn decode_state(bytes: &[u8]) -> Result<TrainerState> {
    let (mut state, _): (TrainerState, _) = checkpoint::decode(bytes)?;
    state.rebuild();
    state.config.validate().map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
    Ok(state)
}

pub fn read_state(path: &Path) -> Result<TrainerState> {
    decode_state(&std::fs::read(path)?)
}

/// Files written by [`run`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub metrics: PathBuf,
    pub eval: PathBuf,
    pub checkpoint: PathBuf,
    pub abort: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            eval: dir.join("eval.csv"),
            checkpoint: dir.join("checkpoint.lfck"),
            abort: dir.join("abort.lfck"),
        }
    }
}

/// Keeps the header and rows with `iter < below`, for resuming.
fn truncate_log(path: &Path, header: &str, below: u64) -> Result<()> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut out = String::from(header);
    out.push('\n');
    for line in text.lines().skip(1) {
        let it = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
        if matches!(it, Some(i) if i < below) {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn open_log(path: &Path, header: &str, fresh: bool, below: u64) -> Result<BufWriter<File>> {
    if fresh || !path.exists() {
        std::fs::write(path, format!("{header}\n"))?;
    } else {
        truncate_log(path, header, below)?;
    }
    Ok(BufWriter::new(OpenOptions::new().append(true).open(path)?))
}

/// Trains until the schedule ends, appending to the logs in `out_dir` and
/// saving checkpoints. `fresh` starts new logs; otherwise rows at or after
/// the trainer's iteration are dropped and the logs are continued.
pub fn run(trainer: &mut Trainer, out_dir: &Path, fresh: bool) -> Result<RunPaths> {
    std::fs::create_dir_all(out_dir)?;
    let paths = RunPaths::new(out_dir);
    let start = trainer.iteration();
    let mut metrics = open_log(&paths.metrics, METRICS_HEADER, fresh, start)?;
    let mut eval = open_log(&paths.eval, EVAL_HEADER, fresh, start)?;
    let ec = trainer.state.config.eval;
    while !trainer.is_done() {
        let row = match trainer.step() {
            Ok(r) => r,
            Err(e @ Error::TrainingAborted { .. }) => {
                metrics.flush()?;
                eval.flush()?;
                if let Err(save) = trainer.save_checkpoint(&paths.abort) {
                    log::error!("could not save abort checkpoint: {save}");
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(metrics, "{}", row.csv_row())?;
        let it = trainer.iteration();
        if ec.every > 0 && it % ec.every == 0 {
            let fid = trainer.evaluate_fid(ec.samples)?;
            writeln!(eval, "{it},{fid}")?;
            log::info!("iter {it}: fid proxy {fid:.4}");
        }
        if ec.checkpoint_every > 0 && it % ec.checkpoint_every == 0 && !trainer.is_done() {
            metrics.flush()?;
            eval.flush()?;
            trainer.save_checkpoint(&paths.checkpoint)?;
        }
    }
    metrics.flush()?;
    eval.flush()?;
    trainer.save_checkpoint(&paths.checkpoint)?;
    Ok(paths)
}

/// Fresh run of `config` into `out_dir`.
pub fn train(config: TrainConfig, out_dir: &Path) -> Result<Trainer> {
    let mut trainer = Trainer::new(config)?;
    run(&mut trainer, out_dir, true)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::FactorSpec;
    use crate::image::ImageShape;
    use crate::lvm::{GaussianPrior, SignalDist};
    use crate::nets::model::ArchConfig;

    /// A few-second configuration on 8×8 images.
    pub(crate) fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::smoke();
        let image = ImageShape::new(1, 8, 8);
        c.arch = ArchConfig {
            image,
            latent_dim: 4,
            stages: 2,
            gen_width: 12,
            disc_widths: vec![16],
            feature_dim: 4,
            ..Default::default()
        };
        let spec = FactorSpec {
            image,
            supersample: 2,
            ..Default::default()
        };
        c.data = DataConfig::Shapes { spec, size: 64, seed: 3 };
        c.schedule = TrainSchedule {
            warmup_end: 4,
            lvm_insert: 10,
            kappa_end: 20,
            refresh_period: 6,
            l_start: 4,
            total_iters: 24,
            batch_size: 8,
        };
        c.weights.gamma_m.start_iter = 10;
        c.weights.gamma_m.end_iter = 24;
        c.lvm.buffer_size = 128;
        c.lvm.first_fit_steps = 50;
        c.lvm.refit_steps = 20;
        c.masking.batch = 4;
        c.eval.every = 8;
        c.eval.samples = 16;
        c.eval.checkpoint_every = 10;
        c
    }

    #[test]
    fn generator_input_endpoints() {
        let lvm = IcaLvm::from_mixing(Matrix::identity(3), 0.0, SignalDist::default()).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let h0 = draw_generator_input(0.0, Some(&lvm), 3, 50, &mut a, false);
        let p = GaussianPrior(3).sample_signals(50, &mut b);
        assert_eq!(h0, p);
        let mut a = ChaCha8Rng::seed_from_u64(6);
        let h1 = draw_generator_input(1.0, Some(&lvm), 3, 200, &mut a, false);
        // κ = 1 leaves only the bounded ICA signals
        assert!(h1.as_slice().iter().all(|v| v.abs() <= 1.0));
        let mut a = ChaCha8Rng::seed_from_u64(6);
        let mut b = ChaCha8Rng::seed_from_u64(6);
        let x = draw_generator_input(0.5, Some(&lvm), 3, 10, &mut a, true);
        let y = draw_generator_input(0.5, Some(&lvm), 3, 10, &mut b, true);
        assert_eq!(x, y);
        for r in 0..10 {
            let m = x.row(r).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!((m - 1.0).abs() < 1e-12);
        }
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(draw_generator_input(0.7, None, 3, 5, &mut a, false), GaussianPrior(3).sample_signals(5, &mut b));
    }

    #[test]
    fn steps_run_through_all_phases() {
        let mut tr = Trainer::new(tiny_config()).unwrap();
        let mut rows = Vec::new();
        while !tr.is_done() {
            rows.push(tr.step().unwrap());
        }
        assert_eq!(rows.len(), 24);
        assert!(tr.state.cp.is_some() && tr.state.lvm.is_some());
        assert_eq!(rows[9].loss_m, 0.0);
        assert!(rows[12].loss_m > 0.0 && rows[12].loss_c > 0.0);
        assert!(rows[5].loss_l > 0.0);
        assert_eq!(rows[23].kappa, 1.0);
    }

    #[test]
    fn baseline_never_fits() {
        let mut c = tiny_config();
        c.apply_preset("baseline-gan").unwrap();
        let mut tr = Trainer::new(c).unwrap();
        for _ in 0..24 {
            let r = tr.step().unwrap();
            assert_eq!((r.kappa, r.loss_l, r.loss_m, r.loss_c), (0.0, 0.0, 0.0, 0.0));
        }
        assert!(tr.state.cp.is_none() && tr.state.buffer.is_empty());
    }

    #[test]
    fn vae_variant_trains() {
        let mut c = tiny_config();
        c.apply_preset("-vae").unwrap();
        let mut tr = Trainer::new(c).unwrap();
        while !tr.is_done() {
            let r = tr.step().unwrap();
            assert!(r.loss_l.is_finite());
        }
        assert!(tr.state.cp.is_none() && tr.state.vae.is_some());
    }

    #[test]
    fn checkpoint_resume_is_bitwise() {
        let mut tr = Trainer::new(tiny_config()).unwrap();
        for _ in 0..13 {
            tr.step().unwrap();
        }
        let bytes = tr.checkpoint_bytes().unwrap();
        assert_eq!(tr.checkpoint_bytes().unwrap(), bytes);
        let next = tr.step().unwrap();
        let mut resumed = Trainer::from_state(decode_state(&bytes).unwrap(), tr.data.clone()).unwrap();
        let again = resumed.step().unwrap();
        assert_eq!(next.csv_row(), again.csv_row());
        assert_eq!(next.loss_gan_d.to_bits(), again.loss_gan_d.to_bits());
    }

    #[test]
    fn run_writes_logs_and_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        train(tiny_config(), a.path()).unwrap();
        train(tiny_config(), b.path()).unwrap();
        let ma = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
        assert_eq!(ma, std::fs::read_to_string(b.path().join("metrics.csv")).unwrap());
        assert_eq!(ma.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(ma.lines().count(), 25);
        let ea = std::fs::read_to_string(a.path().join("eval.csv")).unwrap();
        assert_eq!(ea.lines().count(), 4);
        assert_eq!(
            std::fs::read(a.path().join("checkpoint.lfck")).unwrap(),
            std::fs::read(b.path().join("checkpoint.lfck")).unwrap()
        );

        // resuming from the mid-run checkpoint reproduces the tail
        let c = tempfile::tempdir().unwrap();
        let mut tr = Trainer::new(tiny_config()).unwrap();
        let paths = RunPaths::new(c.path());
        std::fs::create_dir_all(c.path()).unwrap();
        for _ in 0..10 {
            tr.step().unwrap();
        }
        tr.save_checkpoint(&paths.checkpoint).unwrap();
        std::fs::write(&paths.metrics, format!("{METRICS_HEADER}\n")).unwrap();
        let mut back = Trainer::load_checkpoint(&paths.checkpoint).unwrap();
        run(&mut back, c.path(), false).unwrap();
        let tail: Vec<_> = ma.lines().skip(11).collect();
        let got = std::fs::read_to_string(&paths.metrics).unwrap();
        assert_eq!(got.lines().skip(1).collect::<Vec<_>>(), tail);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let mut tr = Trainer::new(tiny_config()).unwrap();
        let mut bytes = tr.checkpoint_bytes().unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0xff;
        assert!(decode_state(&bytes[..n - 3]).is_err());
        assert!(decode_state(b"LFCKxx").is_err());
    }
}
