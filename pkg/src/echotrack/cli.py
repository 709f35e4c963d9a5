"""Command-line entry points binding the library into runnable workflows.

Every command is deterministic given (config, seed).  Log level comes from
the ECHOTRACK_LOG_LEVEL environment variable (default INFO).
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
from pathlib import Path

import click
import numpy as np

from .hitl import calibrate_thresholds, mc_uncertainty
from .metrics import aggregate, compute_metrics, format_table, write_csv
from .model import ModelConfig, PoseModel
from .pose import load_trajectory
from .report import (render_drift_figure, render_history_figure,
                     render_trajectory_figure, render_uncertainty_figure)
from .server import ServerConfig, run_server
from .sweep import SweepSpec, generate as generate_sweep, read_sequence, \
    write_sequence
from .train import TrainConfig, Trainer, predict_trajectory, write_history_csv

log = logging.getLogger("echotrack")


def _setup_logging():
    level = os.environ.get("ECHOTRACK_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _load_dataset(directory: Path):
    dirs = sorted(p for p in Path(directory).iterdir() if p.is_dir())
    if not dirs:
        raise click.ClickException(f"no sequence directories under {directory}")
    return [read_sequence(p) for p in dirs], dirs


def _load_model(checkpoint: Path) -> PoseModel:
    cfg_path = Path(checkpoint).with_suffix(".json")
    config = None
    if cfg_path.exists():
        config = ModelConfig.from_dict(json.loads(cfg_path.read_text()))
    return PoseModel.load(checkpoint, config=config)


class _OutDirLock:
    """Exclusive-create lock file; training runs own their output directory."""

    def __init__(self, out: Path):
        self.path = Path(out) / ".lock"

    def __enter__(self):
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise click.ClickException(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if that run is dead")
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self._fd)
        self.path.unlink(missing_ok=True)


@click.group()
def main():
    """Freehand-sweep pose reconstruction with per-frame uncertainty."""
    _setup_logging()


@main.command("generate")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="Sweep spec JSON; defaults apply if omitted.")
@click.option("--seed", type=int, default=None, help="Override the spec seed.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--count", type=int, default=1, show_default=True,
              help="Sequences to generate (seeds seed, seed+1, ...).")
def cmd_generate(config_path, seed, out_dir, count):
    """Render synthetic sweeps into OUT (one subdirectory per sequence)."""
    text = Path(config_path).read_text() if config_path else "{}"
    base = SweepSpec.from_json(text)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_seed = base.seed if seed is None else seed
    for i in range(count):
        d = json.loads(base.to_json())
        d["seed"] = base_seed + i
        spec_i = SweepSpec.from_json(json.dumps(d))
        seq = generate_sweep(spec_i)
        target = out / f"seq_{i:03d}"
        target.mkdir(parents=True, exist_ok=True)
        write_sequence(target, seq)
        log.info("wrote %d frames to %s", len(seq), target)


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Override config seed.")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--val", "val_dir", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--resume", type=click.Path(exists=True),
              help="Trainer state checkpoint to continue from.")
def cmd_train(config_path, seed, data_dir, val_dir, out_dir, resume):
    """Curriculum-train the pose model; writes checkpoint, history, figures."""
    text = Path(config_path).read_text() if config_path else "{}"
    config = TrainConfig.from_json(text)
    if seed is not None:
        config.seed = seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, _ = _load_dataset(data_dir)
    val_dataset = _load_dataset(val_dir)[0] if val_dir else None
    with _OutDirLock(out):
        trainer = Trainer(config, dataset, val_dataset)
        if resume:
            trainer.load_state(resume)
            log.info("resumed at epoch %d", trainer.epoch)
        (out / "config.json").write_text(config.to_json())

        def progress(rec):
            log.info("epoch %d (window %d): total %.5f val_de %.4f",
                     rec.epoch, rec.window, rec.total, rec.val_de)
            trainer.model.save(out / "model.etck")
            trainer.save_state(out / "trainer.etck")
            write_history_csv(out / "history.csv", trainer.history)

        try:
            trainer.train(progress=progress)
        except FloatingPointError as e:
            raise click.ClickException(str(e))
    (out / "model.json").write_text(json.dumps(config.model.to_dict(), indent=2))
    render_history_figure(trainer.history, out / "history.png")
    log.info("done: %s", out / "model.etck")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--window", type=int, default=7, show_default=True)
def cmd_eval(checkpoint, data_dir, out_dir, seed, window):
    """Evaluate a checkpoint on a dataset; CSV + JSON + figures + table."""
    del seed    # inference is deterministic; accepted for interface symmetry
    model = _load_model(Path(checkpoint))
    dataset, dirs = _load_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for seq, d in zip(dataset, dirs):
        pred = predict_trajectory(model, seq, window=window)
        gt = seq.gt_trajectory()
        rep = compute_metrics(pred, gt, seq.plane_extent, sequence_id=d.name)
        reports.append(rep)
        render_trajectory_figure(pred, gt, seq.plane_extent,
                                 out / f"{d.name}_trajectory.png")
        render_drift_figure(pred, gt, seq.plane_extent,
                            out / f"{d.name}_drift.png")
    summary = aggregate(reports)
    write_csv(out / "metrics.csv", reports, summary)
    (out / "metrics.json").write_text(json.dumps(
        {"per_sequence": [json.loads(r.to_json()) for r in reports],
         "mean": summary.mean, "std": summary.std}, indent=2))
    click.echo(format_table(reports, summary))


@main.command("metrics")
@click.argument("pred_file", type=click.Path(exists=True))
@click.argument("gt_file", type=click.Path(exists=True))
@click.option("--extent", nargs=2, type=float, default=(32.0, 32.0),
              show_default=True, help="Image plane width/height in mm.")
@click.option("--out", "out_dir", type=click.Path(),
              help="Also write CSV and a drift figure here.")
def cmd_metrics(pred_file, gt_file, extent, out_dir):
    """Compare two trajectory files (tx ty tz rx ry rz per line)."""
    pred = load_trajectory(pred_file)
    gt = load_trajectory(gt_file)
    rep = compute_metrics(pred, gt, tuple(extent),
                          sequence_id=Path(pred_file).stem)
    click.echo(format_table([rep]))
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "metrics.csv", [rep])
        render_drift_figure(pred, gt, tuple(extent), out / "drift.png")


@main.command("calibrate")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True,
              help="Clean validation sweeps defining normal operation.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--safe-quantile", type=float, default=0.80, show_default=True)
@click.option("--critical-quantile", type=float, default=0.95, show_default=True)
@click.option("--window", type=int, default=5, show_default=True)
@click.option("--passes", type=int, default=8, show_default=True)
@click.option("--dropout", type=float, default=0.1, show_default=True)
def cmd_calibrate(checkpoint, data_dir, out_path, seed, safe_quantile,
                  critical_quantile, window, passes, dropout):
    """Pick gate thresholds from clean-sweep variance quantiles."""
    model = _load_model(Path(checkpoint))
    dataset, _ = _load_dataset(data_dir)
    sigma2 = []
    for seq in dataset:
        images = [f.intensities for f in seq.frames]
        flow = model.raw_flow_features(images)
        for end in range(1, len(images)):
            lo = max(0, end - window + 1)
            fw = flow[lo:end + 1].copy()
            fw[0] = 0.0
            rep, _ = mc_uncertainty(model, images[lo:end + 1], k=passes,
                                    dropout_rate=dropout, seed=seed + end,
                                    flow_raw=fw)
            sigma2.append(rep.sigma2)
    tau1, tau2 = calibrate_thresholds(sigma2, safe_quantile, critical_quantile)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({
        "tau1": tau1, "tau2": tau2,
        "safe_quantile": safe_quantile, "critical_quantile": critical_quantile,
        "passes": passes, "dropout": dropout, "window": window,
        "samples": len(sigma2)}, indent=2))
    if out.suffix == ".json":
        render_uncertainty_figure(sigma2, tau1, tau2,
                                  out.with_suffix(".png"))
    click.echo(f"tau1={tau1:.6g} tau2={tau2:.6g} ({len(sigma2)} samples)")


@main.command("serve")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--thresholds", type=click.Path(exists=True), required=True,
              help="JSON file from the calibrate command.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="Sweep spec JSON for simulation sessions.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8765, show_default=True)
@click.option("--ws-port", type=int, default=None,
              help="Also serve the protocol over WebSocket on this port.")
def cmd_serve(checkpoint, thresholds, config_path, seed, host, port, ws_port):
    """Run the session server speaking the NDJSON protocol."""
    model = _load_model(Path(checkpoint))
    th = json.loads(Path(thresholds).read_text())
    sim_spec = None
    if config_path:
        sim_spec = SweepSpec.from_json(Path(config_path).read_text())
    config = ServerConfig(model=model, tau1=th["tau1"], tau2=th["tau2"],
                          k_passes=int(th.get("passes", 8)),
                          dropout_rate=float(th.get("dropout", 0.1)),
                          window=int(th.get("window", 5)),
                          seed=seed, sim_spec=sim_spec)
    log.info("serving on %s:%d%s", host, port,
             f" (ws {ws_port})" if ws_port else "")
    asyncio.run(run_server(config, host=host, port=port, ws_port=ws_port))


if __name__ == "__main__":
    main()
