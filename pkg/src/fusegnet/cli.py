"""Command-line interface: ``fusegnet train|predict|evaluate|report``."""
import functools
import logging
import sys
from pathlib import Path
from typing import Optional

import click

from .config import RunConfig, load_config
from .dataio import FoldManifest, list_images, load_dataset, make_folds, read_image, read_mask
from .ensemble import (
    EnsembleBundle, inference_config, binarize, ensemble_predict, predict, write_mask_png, write_probability_png,
)
from .errors import FUSegError
from .metrics import build_report, read_per_image_csv, report_from_rows, write_report_csvs
from .report import plot_comparison, plot_report
from .trainer import train_fold, train_holdout

log = logging.getLogger("fusegnet")


def _fail_cleanly(fn):
    """Turn library errors into a one-line diagnostic and exit status 1."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (FUSegError, ValueError, OSError, RuntimeError) as exc:
            click.echo(f"error: {exc}".splitlines()[0], err=True)
            sys.exit(1)
    return wrapper


def _config(path: Optional[str]) -> RunConfig:
    return load_config(path) if path else RunConfig()


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Foot ulcer segmentation: training, ensemble prediction and evaluation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--fold", type=int, default=None, help="Validation fold; omit to train every fold (or a holdout run).")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Overrides output_dir.")
@_fail_cleanly
def train(config_path, fold, out):
    """Train one model per requested fold, or a single holdout model."""
    cfg = _config(config_path)
    out_dir = Path(out) if out else cfg.output_dir
    if cfg.data.images_dir is None or cfg.data.masks_dir is None:
        raise FUSegError("data.images_dir and data.masks_dir must be set for training")
    records = load_dataset(cfg.data.images_dir, cfg.data.masks_dir)
    if not records:
        raise FUSegError(f"no images found in {cfg.data.images_dir}")
    args = dict(net_cfg=cfg.network, loss_cfg=cfg.loss, ts=cfg.train, plan=cfg.augmentation)

    manifest_path = cfg.data.manifest
    if manifest_path is None and fold is None:
        ck = train_holdout(records, out_dir=out_dir, **args)
        click.echo(f"best epoch {ck.epoch}: val_loss {ck.best_val_loss:.4f} val_iou {ck.best_val_iou:.4f}")
        return
    if manifest_path is None:
        manifest_path = out_dir / "folds.tsv"
    if Path(manifest_path).is_file():
        manifest = FoldManifest.load(manifest_path)
    else:
        manifest = make_folds(records, cfg.data.folds, cfg.seed)
        Path(manifest_path).parent.mkdir(parents=True, exist_ok=True)
        manifest.save(manifest_path)
    folds = range(manifest.k) if fold is None else [fold]
    for j in folds:
        ck = train_fold(records, manifest, j, out_dir=out_dir / f"fold{j}", **args)
        click.echo(f"fold {j} best epoch {ck.epoch}: val_loss {ck.best_val_loss:.4f} val_iou {ck.best_val_iou:.4f}")


@main.command(name="predict")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--checkpoint", "checkpoints", multiple=True, required=True, type=click.Path(dir_okay=False))
@click.option("--images", "images_dir", type=click.Path(file_okay=False), default=None,
              help="Defaults to data.images_dir of the config.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--prob-maps", is_flag=True, help="Also write 16-bit probability maps.")
@_fail_cleanly
def predict_cmd(config_path, checkpoints, images_dir, out, prob_maps):
    """One checkpoint: single-model prediction. Several: ensemble mean."""
    cfg = _config(config_path)
    bundle = EnsembleBundle.load(checkpoints)
    if config_path and inference_config(bundle.net_cfg) != inference_config(cfg.network):
        raise FUSegError("checkpoint network configuration does not match the config file")
    images_dir = Path(images_dir) if images_dir else cfg.data.images_dir
    if images_dir is None or not images_dir.is_dir():
        raise FUSegError(f"images directory not found: {images_dir}")
    files = list_images(images_dir)
    if not files:
        raise FUSegError(f"no images found in {images_dir}")
    models = bundle.models()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if prob_maps:
        (out / "prob").mkdir(exist_ok=True)
    for stem, path in files.items():
        image = read_image(path)
        prob = predict(models[0], image) if len(models) == 1 else ensemble_predict(models, image)
        write_mask_png(binarize(prob), out / f"{stem}.png")
        if prob_maps:
            write_probability_png(prob, out / "prob" / f"{stem}.png")
    click.echo(f"wrote {len(files)} masks to {out}")


@main.command()
@click.argument("pred_dir", type=click.Path(file_okay=False))
@click.argument("gt_dir", type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default="metrics")
@_fail_cleanly
def evaluate(pred_dir, gt_dir, config_path, out):
    """Score predicted masks against ground truth; prints data-based P R DSC IoU (%)."""
    cfg = _config(config_path)
    for d in (pred_dir, gt_dir):
        if not Path(d).is_dir():
            raise FUSegError(f"directory not found: {d}")
    preds, gts = list_images(Path(pred_dir)), list_images(Path(gt_dir))
    if not gts and not preds:
        raise FUSegError(f"no masks found in {pred_dir} or {gt_dir}")
    if set(preds) != set(gts):
        only_pred = sorted(set(preds) - set(gts))
        only_gt = sorted(set(gts) - set(preds))
        raise FUSegError(f"unmatched ids: predictions only {only_pred}, ground truth only {only_gt}")
    ids = sorted(gts)
    report = build_report([read_mask(preds[i]) for i in ids], [read_mask(gts[i]) for i in ids],
                          cfg.categories, ids)
    write_report_csvs(report, out)
    plot_report(report, out)
    click.echo(" ".join(f"{100 * v:.2f}" for v in report.data_based))


@main.command()
@click.argument("csvs", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--label", "labels", multiple=True, help="Series name per CSV (defaults to the parent folder).")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_fail_cleanly
def report(csvs, labels, config_path, out):
    """Regenerate plots from per-image CSVs; several CSVs add a comparison chart."""
    cfg = _config(config_path)
    if labels and len(labels) != len(csvs):
        raise FUSegError(f"{len(labels)} labels given for {len(csvs)} CSV files")
    names = list(labels) if labels else [Path(c).resolve().parent.name for c in csvs]
    if len(set(names)) != len(names):
        raise FUSegError(f"series names must be unique, got {names}; use --label")
    reports = {n: report_from_rows(read_per_image_csv(c), cfg.categories) for n, c in zip(names, csvs)}
    out = Path(out)
    if len(reports) == 1:
        plot_report(next(iter(reports.values())), out)
    else:
        for n, rep in reports.items():
            plot_report(rep, out / n)
        plot_comparison(reports, out)
    click.echo(f"wrote plots to {out}")


if __name__ == "__main__":
    main()
