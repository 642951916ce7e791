//! Plain-text run configuration: one `key = value` per line, `#` comments,
//! dotted keys for sections. `preset` entries are applied first, in order,
//! then every other key in file order; unknown keys are errors.

use std::path::{Path, PathBuf};

use crate::datasets::{FactorSpec, ShapeKind};
use crate::error::{Error, Result};
use crate::image::ImageShape;
use crate::lvm::SignalDist;
use crate::trainer::{DataConfig, LvmKind, TrainConfig};

/// A parsed run: the training configuration plus where its outputs go.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub output: PathBuf,
}

/// One `key = value` assignment with its origin, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub origin: String,
}

/// Short keys accepted in place of their dotted form.
const ALIASES: &[(&str, &str)] = &[
    ("d", "model.d"),
    ("s", "model.s"),
    ("gamma_l", "loss.gamma_l"),
    ("gamma_s", "loss.gamma_s"),
    ("gamma_c", "loss.gamma_c"),
    ("gamma_o", "cp.gamma_o"),
    ("lr", "optim.lr"),
    ("batch_size", "schedule.batch_size"),
    ("iterations", "schedule.total_iters"),
    ("total_iters", "schedule.total_iters"),
];

fn canonical(key: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, c)| c)
}

pub fn parse_entries(text: &str, source: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let origin = format!("{source}:{}", i + 1);
        out.push(parse_assignment(line, &origin)?);
    }
    Ok(out)
}

/// Parses a single `key=value` (as given to `--set`).
pub fn parse_assignment(text: &str, origin: &str) -> Result<Entry> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("{origin}: expected `key = value`, got `{text}`")))?;
    let key = k.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("{origin}: empty key")));
    }
    Ok(Entry {
        key: key.to_string(),
        value: v.trim().to_string(),
        origin: origin.to_string(),
    })
}

fn num<T: std::str::FromStr>(e: &Entry) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| Error::Config(format!("{}: `{}` is not a valid value for {}", e.origin, e.value, e.key)))
}

fn flag(e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{}: `{}` is not a boolean", e.origin, e.value))),
    }
}

fn list(e: &Entry) -> Result<Vec<usize>> {
    e.value
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("{}: bad list `{}`", e.origin, e.value))))
        .collect()
}

fn shapes_mut<'a>(c: &'a mut TrainConfig, e: &Entry) -> Result<(&'a mut FactorSpec, &'a mut usize, &'a mut u64)> {
    match &mut c.data {
        DataConfig::Shapes { spec, size, seed } => Ok((spec, size, seed)),
        DataConfig::Folder { .. } => Err(Error::Config(format!("{}: {} needs dataset.kind = shapes", e.origin, e.key))),
    }
}

fn apply(c: &mut TrainConfig, output: &mut PathBuf, e: &Entry) -> Result<bool> {
    let mut tag_set = false;
    match canonical(&e.key) {
        "seed" => c.seed = num(e)?,
        "tag" => {
            c.tag = e.value.clone();
            tag_set = true;
        }
        "output" => *output = PathBuf::from(&e.value),
        "force_kappa_zero" => c.force_kappa_zero = flag(e)?,

        "dataset.kind" => match e.value.as_str() {
            "shapes" => {
                if !matches!(c.data, DataConfig::Shapes { .. }) {
                    c.data = DataConfig::default();
                }
            }
            "folder" => {
                if !matches!(c.data, DataConfig::Folder { .. }) {
                    c.data = DataConfig::Folder { path: String::new() };
                }
            }
            other => return Err(Error::Config(format!("{}: unknown dataset kind `{other}` (shapes, folder)", e.origin))),
        },
        "dataset.path" => c.data = DataConfig::Folder { path: e.value.clone() },
        "dataset.size" => *shapes_mut(c, e)?.1 = num(e)?,
        "dataset.seed" => *shapes_mut(c, e)?.2 = num(e)?,
        "dataset.supersample" => shapes_mut(c, e)?.0.supersample = num(e)?,
        "dataset.shape" => {
            shapes_mut(c, e)?.0.shape = match e.value.as_str() {
                "triangle" => ShapeKind::Triangle,
                "square" => ShapeKind::Square,
                "disk" => ShapeKind::Disk,
                other => return Err(Error::Config(format!("{}: unknown shape `{other}`", e.origin))),
            }
        }

        "model.channels" => c.arch.image = ImageShape::new(num(e)?, c.arch.image.height, c.arch.image.width),
        "model.height" => c.arch.image = ImageShape::new(c.arch.image.channels, num(e)?, c.arch.image.width),
        "model.width" => c.arch.image = ImageShape::new(c.arch.image.channels, c.arch.image.height, num(e)?),
        "model.d" => {
            // codes are compared with features, so the widths move together
            c.arch.latent_dim = num(e)?;
            c.arch.feature_dim = c.arch.latent_dim;
        }
        "model.s" => c.arch.stages = num(e)?,
        "model.gen_width" => c.arch.gen_width = num(e)?,
        "model.disc_widths" => c.arch.disc_widths = list(e)?,
        "model.leaky_slope" => c.arch.leaky_slope = num(e)?,

        "schedule.warmup_end" => c.schedule.warmup_end = num(e)?,
        "schedule.lvm_insert" => c.schedule.lvm_insert = num(e)?,
        "schedule.kappa_end" => c.schedule.kappa_end = num(e)?,
        "schedule.refresh_period" => c.schedule.refresh_period = num(e)?,
        "schedule.l_start" => c.schedule.l_start = num(e)?,
        "schedule.total_iters" => c.schedule.total_iters = num(e)?,
        "schedule.batch_size" => c.schedule.batch_size = num(e)?,

        "loss.gamma_l" => c.weights.gamma_l = num(e)?,
        "loss.gamma_s" => c.weights.gamma_s = num(e)?,
        "loss.gamma_c" => c.weights.gamma_c = num(e)?,
        "loss.gamma_m_start_iter" => c.weights.gamma_m.start_iter = num(e)?,
        "loss.gamma_m_start" => c.weights.gamma_m.start_value = num(e)?,
        "loss.gamma_m_end_iter" => c.weights.gamma_m.end_iter = num(e)?,
        "loss.gamma_m_end" => c.weights.gamma_m.end_value = num(e)?,
        "loss.gamma_m_scale" => c.weights.gamma_m = c.weights.gamma_m.scaled(num(e)?),

        "lvm.kind" => {
            c.lvm.kind = match e.value.as_str() {
                "ica" => LvmKind::Ica,
                "vae" => LvmKind::Vae,
                other => return Err(Error::Config(format!("{}: unknown lvm kind `{other}` (ica, vae)", e.origin))),
            }
        }
        "lvm.noise_sigma" => c.lvm.noise_sigma = num(e)?,
        "lvm.buffer_size" => c.lvm.buffer_size = num(e)?,
        "lvm.subtract_noise_on_infer" => c.lvm.subtract_noise_on_infer = flag(e)?,
        "lvm.signal" => c.lvm.signal = parse_signal(e)?,
        "lvm.vae_hidden" => c.lvm.vae_hidden = num(e)?,
        "lvm.vae_lr" => c.lvm.vae_lr = num(e)?,

        "cp.gamma_o" => c.lvm.gamma_o = num(e)?,
        "cp.first_fit_steps" => c.lvm.first_fit_steps = num(e)?,
        "cp.refit_steps" => c.lvm.refit_steps = num(e)?,
        "cp.lr" => c.lvm.fit_lr = num(e)?,

        "optim.lr" => {
            c.optim.lr_g = num(e)?;
            c.optim.lr_d = c.optim.lr_g;
        }
        "optim.lr_g" => c.optim.lr_g = num(e)?,
        "optim.lr_d" => c.optim.lr_d = num(e)?,
        "optim.beta2" => c.optim.beta2 = num(e)?,
        "optim.clip" => c.optim.clip = num(e)?,

        "masking.batch" => c.masking.batch = num(e)?,
        "masking.sweep" => c.masking.sweep = flag(e)?,

        "eval.every" => c.eval.every = num(e)?,
        "eval.samples" => c.eval.samples = num(e)?,
        "eval.probe_seed" => c.eval.probe_seed = num(e)?,
        "eval.checkpoint_every" => c.eval.checkpoint_every = num(e)?,

        other => return Err(Error::Config(format!("{}: unknown key `{other}`", e.origin))),
    }
    Ok(tag_set)
}

/// `uniform` or `beta:α,β` (the signal is `2·Beta(α, β) − 1`).
fn parse_signal(e: &Entry) -> Result<SignalDist> {
    if e.value == "uniform" {
        return Ok(SignalDist::Uniform);
    }
    let bad = || Error::Config(format!("{}: signal must be `uniform` or `beta:ALPHA,BETA`, got `{}`", e.origin, e.value));
    let params = e.value.strip_prefix("beta:").ok_or_else(bad)?;
    let (a, b) = params.split_once(',').ok_or_else(bad)?;
    let alpha = a.trim().parse().map_err(|_| bad())?;
    let beta = b.trim().parse().map_err(|_| bad())?;
    Ok(SignalDist::SkewedBeta { alpha, beta })
}

impl RunConfig {
    /// Builds a validated configuration from entries. Without a `tag` key the
    /// tag is derived from which losses were switched off.
    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut train = TrainConfig::default();
        for e in entries.iter().filter(|e| e.key == "preset") {
            for name in e.value.split(',').map(str::trim) {
                train.apply_preset(name).map_err(|err| Error::Config(format!("{}: {err}", e.origin)))?;
            }
        }
        let mut output = PathBuf::from("runs").join(train.tag.clone());
        let mut tag_set = false;
        let mut output_set = false;
        for e in entries.iter().filter(|e| e.key != "preset") {
            output_set |= canonical(&e.key) == "output";
            tag_set |= apply(&mut train, &mut output, e)?;
        }
        if let DataConfig::Shapes { spec, .. } = &mut train.data {
            spec.image = train.arch.image;
        }
        if let DataConfig::Folder { path } = &train.data {
            if path.is_empty() {
                return Err(Error::Config("dataset.kind = folder needs dataset.path".into()));
            }
        }
        if !tag_set {
            train.tag = train.derived_tag();
        }
        if !output_set {
            output = PathBuf::from("runs").join(&train.tag);
        }
        train.validate()?;
        Ok(Self { train, output })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(&parse_entries(text, "config")?)
    }

    /// Reads `path` and appends `overrides` (`key=value` strings).
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut entries = parse_entries(&text, &path.display().to_string())?;
        for (i, o) in overrides.iter().enumerate() {
            entries.push(parse_assignment(o, &format!("--set #{}", i + 1))?);
        }
        Self::from_entries(&entries)
    }
}
