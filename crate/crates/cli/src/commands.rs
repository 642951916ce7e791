use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use lvgan_core::datasets::{shapes_dataset, FactorSpec};
use lvgan_core::image::{grid, unstack};
use lvgan_core::lvm::LatentSampler;
use lvgan_core::metrics::{factor_consistency, perturbation_sweep, FactorOracle, FactorTable, PerturbationReport, SweepConfig};
use lvgan_core::nets::model::ImageGenerator;
use lvgan_core::runconfig::RunConfig;
use lvgan_core::tensor::Matrix;
use lvgan_core::trainer::{self, DataConfig, RunPaths, Trainer, TrainerState};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub sets: Vec<String>,
    pub output: Option<PathBuf>,
    pub resume: bool,
}

/// Resolves the configuration and dataset before anything is written, so a
/// bad config leaves no partial outputs.
pub fn prepare_train(args: &TrainArgs) -> CliResult<(Trainer, PathBuf)> {
    let mut sets = args.sets.clone();
    if let Some(s) = args.seed {
        sets.push(format!("seed={s}"));
    }
    let rc = RunConfig::load(&args.config, &sets).map_err(|e| CliError::Config(e.to_string()))?;
    let out = args.output.clone().unwrap_or(rc.output);
    let paths = RunPaths::new(&out);
    if args.resume && paths.checkpoint.exists() {
        let state = load_state(&paths.checkpoint)?;
        if state.config != rc.train {
            return Err(CliError::Config(format!(
                "checkpoint in {} was trained with a different configuration",
                out.display()
            )));
        }
        let data = trainer::load_dataset(&state.config).map_err(|e| CliError::Config(format!("dataset: {e}")))?;
        return Ok((Trainer::from_state(state, data).map_err(|e| CliError::Config(e.to_string()))?, out));
    }
    let tr = Trainer::new(rc.train).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((tr, out))
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<PathBuf> {
    let (mut tr, out) = prepare_train(args)?;
    let fresh = tr.iteration() == 0;
    log::info!(
        "training {} (seed {}) for {} iterations into {}",
        tr.state.config.tag,
        tr.state.config.seed,
        tr.state.config.schedule.total_iters,
        out.display()
    );
    trainer::run(&mut tr, &out, fresh).map_err(|e| match e {
        lvgan_core::Error::TrainingAborted { .. } => CliError::Aborted(e.to_string()),
        other => CliError::Core(other),
    })?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&tr.state.config).map_err(lvgan_core::Error::from)?)?;
    Ok(out)
}

pub fn load_state(path: &Path) -> CliResult<TrainerState> {
    trainer::read_state(path).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub perturbations: usize,
    pub range: f64,
    pub seed: u64,
    pub samples: usize,
    pub factors: bool,
    pub out: Option<PathBuf>,
}

impl Default for EvalArgs {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            perturbations: 10,
            range: 1.0,
            seed: 0,
            samples: 512,
            factors: false,
            out: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub dir: PathBuf,
    pub report: PerturbationReport,
    pub fid: f64,
    pub factors: Option<FactorTable>,
}

fn factor_csv(table: &FactorTable, spec: &FactorSpec) -> String {
    let mut s = String::from("element,best_factor,best_abs_r");
    for f in &spec.factors {
        s.push(',');
        s.push_str(&f.name);
    }
    s.push('\n');
    for (j, (best, r)) in table.best.iter().enumerate() {
        s.push_str(&format!("{j},{},{r}", spec.factors[*best].name));
        for c in 0..table.abs_corr.cols() {
            s.push_str(&format!(",{}", table.abs_corr.get(j, c)));
        }
        s.push('\n');
    }
    s
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalOutput> {
    if args.perturbations == 0 {
        return Err(CliError::Usage("--perturbations must be positive".into()));
    }
    let state = load_state(&args.checkpoint)?;
    let data = trainer::load_dataset(&state.config).map_err(|e| CliError::Config(format!("dataset: {e}")))?;
    let tr = Trainer::from_state(state, data)?;
    let sampler = tr.state.sampler();
    let sweep = SweepConfig {
        per_element: args.perturbations,
        range: args.range,
        seed: args.seed,
    };
    let report = perturbation_sweep(&tr.state.model, &sampler, &tr.probe, &sweep)?;
    let fid = lvgan_core::metrics::generator_fid(&tr.state.model, &sampler, &tr.data.images, &tr.probe, args.samples, args.seed)?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("perturbations.csv"), report.to_csv())?;
    let factors = if args.factors {
        let DataConfig::Shapes { spec, seed, .. } = &tr.state.config.data else {
            return Err(CliError::Usage("--factors needs a shapes dataset with known factors".into()));
        };
        let labelled = shapes_dataset(spec, 2000, seed.wrapping_add(1))?;
        let truth = labelled.factors.clone().expect("shapes corpus has factors");
        let oracle = FactorOracle::fit(&labelled.images, &truth, tr.probe.clone(), 1e-3)?;
        let table = factor_consistency(&tr.state.model, &sampler, &oracle, &sweep)?;
        std::fs::write(dir.join("factors.csv"), factor_csv(&table, spec))?;
        Some(table)
    } else {
        None
    };
    let summary = json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "iteration": tr.state.iteration,
        "tag": tr.state.config.tag,
        "seed": args.seed,
        "pairs": report.pairs,
        "mean_mae": report.mean_mae,
        "mean_perceptual": report.mean_perceptual,
        "frechet_proxy": fid,
        "mean_best_factor_abs_r": factors.as_ref().map(|t| t.best.iter().map(|b| b.1).sum::<f64>() / t.best.len() as f64),
    });
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).map_err(lvgan_core::Error::from)?)?;
    Ok(EvalOutput { dir, report, fid, factors })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Random,
    Interp,
    ElementSweep,
}

impl std::str::FromStr for SampleMode {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "random" => Ok(SampleMode::Random),
            "interp" => Ok(SampleMode::Interp),
            "element-sweep" => Ok(SampleMode::ElementSweep),
            other => Err(CliError::Usage(format!("unknown sample mode `{other}` (random, interp, element-sweep)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub mode: SampleMode,
    pub n: usize,
    pub element: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

/// Latent codes for a sample grid, one row per image, plus the column count.
pub fn sample_codes(sampler: &dyn LatentSampler, args: &SampleArgs) -> CliResult<(Matrix, usize)> {
    let d = sampler.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    if args.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let ramp = |k: usize, n: usize| if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
    match args.mode {
        SampleMode::Random => {
            let cols = (args.n as f64).sqrt().ceil() as usize;
            Ok((sampler.sample_codes(args.n, &mut rng), cols))
        }
        SampleMode::Interp => {
            let ends = sampler.sample_codes(2, &mut rng);
            let rows: Vec<Vec<f64>> = (0..args.n)
                .map(|k| {
                    let t = ramp(k, args.n);
                    ends.row(0).iter().zip(ends.row(1)).map(|(a, b)| (1.0 - t) * a + t * b).collect()
                })
                .collect();
            Ok((Matrix::from_rows(&rows)?, args.n))
        }
        SampleMode::ElementSweep => {
            let elements: Vec<usize> = match args.element {
                Some(j) if j < d => vec![j],
                Some(j) => return Err(CliError::Usage(format!("element {j} out of range for d = {d}"))),
                None => (0..d).collect(),
            };
            let base = sampler.sample_codes(1, &mut rng);
            let mut rows = Vec::new();
            for &j in &elements {
                for k in 0..args.n {
                    let mut h = base.row(0).to_vec();
                    h[j] = -1.0 + 2.0 * ramp(k, args.n);
                    rows.push(h);
                }
            }
            Ok((Matrix::from_rows(&rows)?, args.n))
        }
    }
}

fn codes_csv(codes: &Matrix) -> String {
    let mut s = (0..codes.cols()).map(|j| format!("h{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for r in 0..codes.rows() {
        s.push_str(&codes.row(r).iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

/// Writes the grid image to `args.out` and its codes next to it as CSV.
pub fn cmd_sample(args: &SampleArgs) -> CliResult<(PathBuf, PathBuf)> {
    let state = load_state(&args.checkpoint)?;
    let sampler = state.sampler();
    let (codes, cols) = sample_codes(&sampler, args)?;
    let images = unstack(&state.model.generate_batch(&codes)?, state.model.image_shape())?;
    let g = grid(&images, cols)?;
    if let Some(p) = args.out.parent() {
        if !p.as_os_str().is_empty() {
            std::fs::create_dir_all(p)?;
        }
    }
    g.save_pnm(&args.out)?;
    let codes_path = args.out.with_extension("codes.csv");
    std::fs::write(&codes_path, codes_csv(&codes))?;
    Ok((args.out.clone(), codes_path))
}
