"""Training, evaluation, ablation and gradient-check drivers behind the CLI."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import RunConfig
from .gradcheck import finite_diff_check
from .losses import LossConfig
from .model import GraphPiT, ModelConfig, joint_loss, fm_train_step, sample_layouts
from .optim import adam_step
from .synth import (PlantedExample, SynthConfig, dataset_hash, edge_accuracy, generate_dataset,
                    make_batch)
from .tensor import NumericalError

Logger = Callable[[str], None]

VARIANTS = (
    ("Full model", {"lambda_g": 1.0, "lambda_r": 1.0}),
    ("w/o Laplacian", {"lambda_g": 0.0, "lambda_r": 1.0}),
    ("w/o EdgeLoss", {"lambda_g": 1.0, "lambda_r": 0.0}),
)


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


def _quiet(msg: str) -> None:
    pass


def train_dataset(cfg: RunConfig) -> list[PlantedExample]:
    return generate_dataset(cfg.dataset_size, cfg.dataset_seed, cfg.graph, cfg.synth)


def eval_dataset(cfg: RunConfig) -> list[PlantedExample]:
    return generate_dataset(cfg.eval_size, cfg.eval_seed, cfg.graph, cfg.synth)


def save_checkpoint(path: str | Path, model: GraphPiT) -> None:
    checkpoint.save(path, model.store.arrays())


def load_checkpoint(path: str | Path, cfg: RunConfig) -> GraphPiT:
    """Rebuild the model from ``cfg`` and load weights; any name or shape mismatch raises."""
    model = GraphPiT(cfg.model, seed=cfg.seed)
    arrays = checkpoint.load(path)
    missing = sorted(set(model.store.params) - set(arrays))
    if missing:
        raise checkpoint.CheckpointError(f"checkpoint lacks {len(missing)} parameters, e.g. {missing[0]!r}")
    try:
        model.store.load_arrays(arrays)
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"checkpoint does not match config: {exc}") from None
    return model


@dataclass
class TrainResult:
    model: GraphPiT
    log_path: Path
    checkpoints: list[Path]
    dataset_hash: str
    wall_time: float


def train(cfg: RunConfig, examples: Sequence[PlantedExample] | None = None,
          out_dir: str | Path | None = None, log: Logger = _quiet) -> TrainResult:
    """Joint optimisation of fm + lambda_g*smooth + lambda_r*rel with Adam.

    The metrics log has one JSON line per step. It carries no timings so that
    identical (config, seed) runs produce identical files.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    examples = list(examples) if examples is not None else train_dataset(cfg)
    ds_hash = dataset_hash(examples)
    model = GraphPiT(cfg.model, seed=cfg.seed)
    loss_cfg = cfg.loss
    log_path = out / "metrics.jsonl"
    ckpts: list[Path] = []
    t0 = time.perf_counter()
    with open(log_path, "w") as fh:
        for step in range(cfg.steps):
            grads: dict[str, np.ndarray] = {}
            totals = np.zeros(5)
            for k in range(cfg.grad_accum):
                batch = make_batch(examples, cfg.batch_size, [cfg.seed, step, k])
                rng = np.random.default_rng([cfg.seed, step, k]) if loss_cfg.neg_fraction < 1 else None
                try:
                    report, g = fm_train_step(batch, model, loss_cfg, rng)
                except NumericalError as exc:
                    raise TrainingAborted(step, str(exc)) from None
                if not np.isfinite(report.grand_total):
                    raise TrainingAborted(step, "non-finite loss")
                totals += [report.fm, report.smooth, report.rel, report.graph_total, report.grand_total]
                for name, arr in g.items():
                    grads[name] = grads[name] + arr if name in grads else arr.copy()
            if cfg.grad_accum > 1:
                grads = {n: a / cfg.grad_accum for n, a in grads.items()}
                totals /= cfg.grad_accum
            adam_step(model.store, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            row = dict(zip(("fm", "smooth", "rel", "graph_total", "grand_total"), map(float, totals)))
            fh.write(json.dumps({"step": step + 1, **row, "seed": cfg.seed}) + "\n")
            if (step + 1) % cfg.ckpt_every == 0 or step + 1 == cfg.steps:
                path = out / f"ckpt_{step + 1:06d}.gpit"
                save_checkpoint(path, model)
                ckpts.append(path)
            if (step + 1) % max(cfg.steps // 10, 1) == 0:
                log(f"step {step + 1}/{cfg.steps} fm={row['fm']:.4f} smooth={row['smooth']:.4f} "
                    f"rel={row['rel']:.4f}")
    final = out / "final.gpit"
    save_checkpoint(final, model)
    ckpts.append(final)
    return TrainResult(model, log_path, ckpts, ds_hash, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# evaluation


def shuffled_adjacencies(examples: Sequence[PlantedExample], seed: int = 0) -> list[np.ndarray]:
    """Give each example the graph of the next example (cyclically) with the same part count.

    An example whose part count is unique gets its own graph under a random relabelling.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i, e in enumerate(examples):
        others = [j for j in range(i + 1, len(examples))] + list(range(i))
        match = next((j for j in others if examples[j].n_parts == e.n_parts), None)
        if match is not None:
            out.append(examples[match].adjacency)
        else:
            p = rng.permutation(e.n_parts)
            out.append(e.adjacency[np.ix_(p, p)])
    return out


def evaluate(model: GraphPiT, cfg: RunConfig, examples: Sequence[PlantedExample], seed: int = 0,
             shuffled: bool = False) -> dict:
    """Mean edge-accuracy of sampled layouts plus held-out losses.

    With ``shuffled`` the samples are additionally drawn under mismatched graphs
    and scored against the true ones.
    """
    t0 = time.perf_counter()
    graph_cfg = cfg.graph
    layouts = sample_layouts(model, examples, cfg.sample_steps, seed)
    acc = [edge_accuracy(l, e.adjacency, graph_cfg) for l, e in zip(layouts, examples)]
    batch = make_batch(examples, len(examples), [seed, 1])
    with T.no_grad():
        _, parts = joint_loss(model, batch, cfg.loss)
    report = {
        "edge_accuracy": float(np.mean(acc)),
        "fm": parts["fm"].item(),
        "smooth": parts["smooth"].item(),
        "rel": parts["rel"].item(),
        "n_examples": len(examples),
        "seed": seed,
    }
    if shuffled:
        adj = shuffled_adjacencies(examples, seed)
        lay = sample_layouts(model, examples, cfg.sample_steps, seed, adjacencies=adj)
        report["edge_accuracy_shuffled"] = float(np.mean(
            [edge_accuracy(l, e.adjacency, graph_cfg) for l, e in zip(lay, examples)]))
    report["wall_time"] = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRun:
    variant: str
    seed: int
    dataset_hash: str
    report: dict
    train_time: float


@dataclass
class AblationResult:
    runs: list[AblationRun] = field(default_factory=list)

    def by_variant(self, variant: str) -> list[AblationRun]:
        return [r for r in self.runs if r.variant == variant]

    def median(self, variant: str, key: str = "edge_accuracy") -> float:
        return float(np.median([r.report[key] for r in self.by_variant(variant)]))

    def table(self) -> str:
        lines = [f"{'Variant':<16} {'lambda_g':>8} {'lambda_r':>8} {'Eval FM':>9} "
                 f"{'Edge-acc':>9}  per-seed edge-acc"]
        for name, lam in VARIANTS:
            runs = self.by_variant(name)
            if not runs:
                continue
            seeds = " ".join(f"{r.report['edge_accuracy']:.3f}" for r in runs)
            lines.append(f"{name:<16} {lam['lambda_g']:>8.2f} {lam['lambda_r']:>8.2f} "
                         f"{self.median(name, 'fm'):>9.4f} {self.median(name):>9.3f}  {seeds}")
        return "\n".join(lines)


def variant_configs(base: RunConfig) -> list[tuple[str, RunConfig]]:
    return [(name, base.replace(**lam)) for name, lam in VARIANTS]


def ablate(base: RunConfig, out_dir: str | Path | None = None, log: Logger = _quiet,
           seeds: Sequence[int] | None = None, shuffled: bool = True) -> AblationResult:
    """Train and evaluate every variant on every seed over one shared dataset."""
    out = Path(out_dir if out_dir is not None else base.out_dir)
    examples = train_dataset(base)
    held_out = eval_dataset(base)
    variants = variant_configs(base)
    full = variants[0][1]
    for name, cfg in variants[1:]:
        diff = full.diff(cfg)
        log(f"config diff {name!r} vs {variants[0][0]!r}: {json.dumps(diff)}")
        if set(diff) - {"lambda_g", "lambda_r"}:
            raise AssertionError(f"variant {name!r} differs beyond the loss weights: {sorted(diff)}")
    result = AblationResult()
    for name, cfg in variants:
        for seed in (seeds if seeds is not None else base.ablate_seeds):
            run_cfg = cfg.replace(seed=seed)
            tag = name.replace("/", "").replace(" ", "_").lower()
            tr = train(run_cfg, examples, out / f"{tag}_seed{seed}", log)
            rep = evaluate(tr.model, run_cfg, held_out, seed=0, shuffled=shuffled)
            log(f"{name} seed={seed} dataset={tr.dataset_hash[:16]} edge_acc={rep['edge_accuracy']:.3f} "
                f"shuffled={rep.get('edge_accuracy_shuffled', float('nan')):.3f} "
                f"train_time={tr.wall_time:.1f}s")
            result.runs.append(AblationRun(name, seed, tr.dataset_hash, rep, tr.wall_time))
    return result


# ---------------------------------------------------------------------------
# gradient check


GRADCHECK_MODEL = ModelConfig(n_max=3, tokens_per_part=2, dim=8, n_layers=2, width=16, key_dim=16,
                              n_blocks=1, time_dim=4)
GRADCHECK_GROUPS = ("aggregator", "losses", "prior")


def gradcheck(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error of the joint loss gradient per parameter group, on a tiny model.

    Loss weights are fixed to 1 so that every group receives gradient. At
    eps=1e-6 round-off of the central difference (about 1e-9 on a loss near
    20) already reaches the 1e-6 error floor; 1e-5 keeps clear of it without
    stepping over ReLU kinks.
    """
    mc = GRADCHECK_MODEL
    synth = SynthConfig(n_max=mc.n_max, n_min=mc.n_max, tokens_per_part=mc.tokens_per_part, dim=mc.dim,
                        size_range=(250.0, 360.0))
    examples = generate_dataset(2, seed, synth=synth)
    model = GraphPiT(mc, seed=seed)
    batch = make_batch(examples, 2, [seed, 0])
    loss_cfg = LossConfig(1.0, 1.0)

    def objective(store):
        return joint_loss(model, batch, loss_cfg)[0]

    out = {}
    for group in GRADCHECK_GROUPS:
        names = list(model.store.prefixed(group + "."))
        out[group] = finite_diff_check(objective, model.store, eps, names)
    return out
