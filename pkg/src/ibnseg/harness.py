"""One experiment cell: generate data, train on one modality, evaluate both, profile divergence."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import RunConfig, format_config
from .data import SceneSpec, gen_dataset, stack
from .divergence import DivergenceReport, divergence_profile
from .nn import ToyNet, build_toynet, save_checkpoint
from .training import CrossModalityResult, RunLog, cross_modality_eval, train


@dataclass
class Split:
    image_a: np.ndarray
    image_b: np.ndarray
    masks: np.ndarray

    def images(self, modality: str) -> np.ndarray:
        return self.image_a if modality.upper() == "A" else self.image_b


@lru_cache(maxsize=8)
def _split(spec: SceneSpec, n: int, seed: int, start: int) -> Split:
    samples = list(gen_dataset(spec, n, seed, start))
    a, masks = stack(samples, "A")
    b, _ = stack(samples, "B")
    for arr in (a, b, masks):
        arr.setflags(write=False)
    return Split(a, b, masks)


def train_split(cfg: RunConfig) -> Split:
    return _split(cfg.data.scene_spec(), cfg.data.train_samples, cfg.data.seed, 0)


def test_split(cfg: RunConfig) -> Split:
    return _split(cfg.data.scene_spec(), cfg.data.test_samples, cfg.data.seed, cfg.data.test_start)


def build_net(cfg: RunConfig) -> ToyNet:
    spec = cfg.data.scene_spec()
    return build_toynet(cfg.model.policy, cfg.model.widths, spec.num_classes, seed=cfg.train.seed,
                        sn_branches=cfg.model.sn_branches, bottleneck_ratio=cfg.model.bottleneck_ratio)


def train_from_config(cfg: RunConfig) -> tuple[ToyNet, RunLog]:
    tr = train_split(cfg)
    val = None
    if cfg.train.eval_every:
        te = test_split(cfg)
        val = (te.images(cfg.data.train_modality), te.masks)
    net = build_net(cfg)
    return train(net, tr.images(cfg.data.train_modality), tr.masks, cfg.loss, cfg.optim,
                 seed=cfg.train.seed, val=val, eval_every=cfg.train.eval_every)


def cross_eval(cfg: RunConfig, net: ToyNet) -> CrossModalityResult:
    te = test_split(cfg)
    return cross_modality_eval(net, te.image_a, te.image_b, te.masks, cfg.data.train_modality)


def profile(cfg: RunConfig, net: ToyNet) -> DivergenceReport:
    te = test_split(cfg)
    n = min(cfg.report.divergence_samples, len(te.masks))
    meta = {"modality_a": "A", "modality_b": "B", "samples": str(n), "seed": str(cfg.train.seed)}
    return divergence_profile(net, list(te.image_a[:n]), list(te.image_b[:n]), floor=cfg.report.floor,
                              batch_size=cfg.report.batch_size, metadata=meta)


def eval_csv(result: CrossModalityResult) -> str:
    classes = len(next(iter(result.per_class.values())))
    lines = [f"# train_modality: {result.train_modality}", f"# decay: {result.decay:.17g}",
             "test_modality,miou," + ",".join(f"iou_c{c + 1}" for c in range(classes))]
    for mod in ("A", "B"):
        lines.append(",".join([mod, format(result.miou[mod], ".17g")]
                              + [format(float(v), ".17g") for v in result.per_class[mod]]))
    return "\n".join(lines) + "\n"


@dataclass
class CellResult:
    config: RunConfig
    net: ToyNet
    run_log: RunLog
    cross: CrossModalityResult
    report: DivergenceReport


def write_run(out: Path, cfg: RunConfig, net: ToyNet, run_log: RunLog) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(format_config(cfg))
    save_checkpoint(net, out / "checkpoint")
    (out / "steps.csv").write_text(run_log.steps_csv())
    (out / "evals.csv").write_text(run_log.evals_csv())


def run_cell(cfg: RunConfig, out: Path | None = None) -> CellResult:
    net, run_log = train_from_config(cfg)
    cross = cross_eval(cfg, net)
    report = profile(cfg, net)
    if out is not None:
        write_run(out, cfg, net, run_log)
        (out / "eval.csv").write_text(eval_csv(cross))
        (out / "divergence.csv").write_text(report.to_csv())
    return CellResult(cfg, net, run_log, cross, report)


def cell_config(base: RunConfig, policy: str, lambdas: tuple[float, float], seed: int) -> RunConfig:
    return dataclasses.replace(
        base,
        model=dataclasses.replace(base.model, policy=policy),
        loss=dataclasses.replace(base.loss, lambda1=float(lambdas[0]), lambda2=float(lambdas[1])),
        train=dataclasses.replace(base.train, seed=int(seed)),
    )


def summary_header(num_classes: int) -> list[str]:
    return ["policy", "l1", "l2", "seed"] + [f"iou_c{c + 1}" for c in range(num_classes)] + ["miou", "decay", "mean_div"]


def summary_row(res: CellResult) -> list[str]:
    cfg = res.config
    mod = cfg.data.train_modality.upper()
    return ([cfg.model.policy, format(cfg.loss.lambda1, "g"), format(cfg.loss.lambda2, "g"), str(cfg.train.seed)]
            + [format(float(v), ".17g") for v in res.cross.per_class[mod]]
            + [format(res.cross.same, ".17g"), format(res.cross.decay, ".17g"),
               format(res.report.mean_divergence(), ".17g")])
