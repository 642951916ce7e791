"""Smoke test for the lvgan extension module.

Imports an installed `lvgan`, or falls back to the cdylib from the cargo
target directory (build it first with `cargo build -p lvgan-python`).
"""

import importlib.util
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]

TINY = """
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
"""


def load_module(tmp):
    try:
        import lvgan  # noqa: F401

        return sys.modules["lvgan"]
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "liblvgan.so"
        if lib.exists():
            dst = pathlib.Path(tmp) / "lvgan.so"
            shutil.copy(lib, dst)
            spec = importlib.util.spec_from_file_location("lvgan", dst)
            mod = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(mod)
            return mod
    sys.exit("lvgan extension not found; run `cargo build -p lvgan-python`")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        lv = load_module(tmp)

        cfg = lv.resolve_config(TINY, ["gamma_s=0"])
        assert '"tag": "-Ls"' in cfg, cfg

        tr = lv.Trainer(TINY)
        rows = [tr.step() for _ in range(12)]
        assert rows[-1]["iter"] == 11 and all(r["loss_gan_d"] == r["loss_gan_d"] for r in rows)
        assert tr.mixing() is not None and len(tr.mixing()) == 4

        ck = pathlib.Path(tmp) / "run.lfck"
        tr.save(str(ck))
        nxt = tr.step()
        again = lv.Trainer.load(str(ck)).step()
        assert nxt == again, (nxt, again)

        tr.run(str(pathlib.Path(tmp) / "out"))
        assert tr.done and tr.iteration == 24
        log = (pathlib.Path(tmp) / "out" / "metrics.csv").read_text().splitlines()
        assert log[0] == lv.METRICS_HEADER

        gen = lv.Generator.load(str(pathlib.Path(tmp) / "out" / "checkpoint.lfck"))
        assert gen.latent_dim == 4 and gen.partitions == [(0, 2), (2, 4)]
        img = gen.generate([0.0, 0.5, -0.5, 1.0])
        assert len(img) == 64 and all(-1.0 <= v <= 1.0 for v in img)
        assert gen.generate_pnm([0.0] * 4)[:2] == b"P5"
        sweep = gen.perturbation_sweep()
        assert sweep["pairs"] == 40
        codes = gen.sample_codes(5, 1)
        assert codes == gen.sample_codes(5, 1) and len(codes) == 5

        try:
            gen.generate([0.0, 1.0])
        except ValueError:
            pass
        else:
            raise AssertionError("wrong latent length accepted")

        fit = lv.fit_cp([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.2]], rank=2, steps=200)
        assert len(fit["factors"]) == 2
        assert abs(lv.frechet_proxy([[0.0], [1.0]], [[0.0], [1.0]])) < 1e-9
    print("python smoke: ok")


if __name__ == "__main__":
    main()
