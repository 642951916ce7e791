#![allow(dead_code)]

use std::path::{Path, PathBuf};

/// A run that finishes in well under a second: 8×8 shapes, d = 4.
pub const TINY: &str = "\
# tiny desk run
preset = smoke
seed = 3
model.height = 8
model.width = 8
d = 4
s = 2
model.gen_width = 12
model.disc_widths = 16
dataset.size = 64
dataset.supersample = 2
schedule.warmup_end = 4
schedule.lvm_insert = 10
schedule.kappa_end = 20
schedule.refresh_period = 6
schedule.l_start = 4
schedule.total_iters = 24
schedule.batch_size = 8
loss.gamma_m_start_iter = 10
loss.gamma_m_end_iter = 24
lvm.buffer_size = 128
cp.first_fit_steps = 50
cp.refit_steps = 20
masking.batch = 4
eval.every = 8
eval.samples = 16
eval.checkpoint_every = 10
";

pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lvgan")
}

/// Trains the tiny config into `dir/run` through the library and returns
/// the checkpoint path.
pub fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, "");
    let out = lvgan_cli::commands::cmd_train(&lvgan_cli::commands::TrainArgs {
        config: cfg,
        output: Some(dir.join("run")),
        ..Default::default()
    })
    .unwrap();
    out.join("checkpoint.lfck")
}
