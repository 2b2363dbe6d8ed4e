"""End-to-end helpers: corpus split, training loop, batched sampling, evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import TrainConfig
from .data import ImageSample, make_lr_hr_pair, synth_dataset
from .diffusion import sample
from .metrics import EvalReport
from .models import Networks, log_param_count
from .schedule import build_linear_schedule
from .tensor import Tensor
from .training import TrainState, init_state, next_batch, train_step

log = logging.getLogger(__name__)

__all__ = [
    "split_corpus",
    "make_pairs",
    "new_state",
    "run_training",
    "super_resolve",
    "evaluate",
    "bicubic_report",
    "ABLATION_ROWS",
    "ablation_config",
]

# row label -> (use_dwt, use_init_predictor)
ABLATION_ROWS = {
    "baseline (image space)": (False, False),
    "+ 2D-DWT": (True, False),
    "+ init. predictor": (False, True),
    "+ 2D-DWT + init. predictor": (True, True),
}


def ablation_config(cfg: TrainConfig, row: str) -> TrainConfig:
    use_dwt, use_init = ABLATION_ROWS[row]
    return cfg.override({"use_dwt": use_dwt, "use_init_predictor": use_init})


def split_corpus(images: Sequence[np.ndarray], n_holdout: int):
    if n_holdout >= len(images):
        raise ValueError("hold-out set would leave no training images")
    cut = len(images) - n_holdout
    return list(images[:cut]), list(images[cut:])


def make_pairs(images: Sequence[np.ndarray], scale: int) -> list[ImageSample]:
    return [make_lr_hr_pair(im, scale) for im in images]


def new_state(cfg: TrainConfig) -> tuple[Networks, TrainState]:
    nets = Networks(cfg)
    params = nets.init_params(cfg.seed)
    log_param_count(params, cfg.name)
    # parameter init and the training stream use distinct generators
    state = init_state(params, [cfg.seed, 1], cfg.dumps(), cfg.hash())
    return nets, state


def run_training(
    cfg: TrainConfig,
    nets: Networks,
    state: TrainState,
    pairs: Sequence[ImageSample],
    until: int | None = None,
    on_log: Callable[[str], None] | None = None,
) -> TrainState:
    """Train from ``state.step`` up to ``until`` (default ``cfg.steps``).

    ``on_log`` receives ``step,loss,lr,elapsed_s`` lines.
    """
    schedule = build_linear_schedule(cfg.T_train, cfg.beta_start, cfg.beta_end)
    until = cfg.steps if until is None else until
    t0 = time.perf_counter()
    while state.step < until:
        x, y, idx = next_batch(state, pairs, cfg.batch_size, cfg.hflip)
        loss = train_step(state, x, y, schedule, nets, cfg.lr, cfg.weight_decay, batch_id=idx.tolist())
        if on_log is not None and (state.step % cfg.log_every == 0 or state.step == until):
            on_log(f"{state.step},{loss!r},{cfg.lr!r},{time.perf_counter() - t0:.3f}")
    return state


def super_resolve(
    cfg: TrainConfig,
    nets: Networks,
    params,
    lr_up: np.ndarray,
    seed: int,
    batch: int = 32,
) -> np.ndarray:
    """Alg.-2 sampling for a stack of upsampled LR images (N, C, h, w)."""
    schedule = build_linear_schedule(cfg.T_eval, cfg.beta_start, cfg.beta_end)
    out = []
    for start in range(0, len(lr_up), batch):
        chunk = Tensor(lr_up[start : start + batch])
        sr = sample(
            chunk,
            schedule,
            lambda xs, z, g: nets.f(params, xs, z, g, training=False),
            lambda xs: nets.g(params, xs, training=False),
            seed=[seed, start],
            use_dwt=cfg.use_dwt,
            final_noise=cfg.final_noise,
        )
        out.append(np.clip(sr.data, 0.0, 1.0))
    return np.concatenate(out, axis=0)


def evaluate(sr: Sequence[np.ndarray], hr: Sequence[np.ndarray], config: str = "", ids=None) -> EvalReport:
    rep = EvalReport(config=config)
    ids = ids if ids is not None else [f"{i:04d}" for i in range(len(sr))]
    for i, s, h in zip(ids, sr, hr):
        rep.add(i, s, h)
    return rep


def bicubic_report(pairs: Sequence[ImageSample], ids=None) -> EvalReport:
    return evaluate([p.lr_up for p in pairs], [p.hr for p in pairs], "bicubic", ids)


@dataclass
class DeskRun:
    cfg: TrainConfig
    nets: Networks
    state: TrainState
    report: EvalReport
    bicubic: EvalReport
    seconds: float


def desk_run(cfg: TrainConfig, on_log=None, sample_seed: int = 0) -> DeskRun:
    """Synthesize the corpus, train, sample the hold-out set and score it."""
    t0 = time.perf_counter()
    images = synth_dataset(cfg.n_images, cfg.hr_size, cfg.hr_size, cfg.seed, cfg.channels)
    train_imgs, test_imgs = split_corpus(images, cfg.n_holdout)
    train_pairs, test_pairs = make_pairs(train_imgs, cfg.scale), make_pairs(test_imgs, cfg.scale)
    nets, state = new_state(cfg)
    run_training(cfg, nets, state, train_pairs, on_log=on_log)
    lr_up = np.stack([p.lr_up for p in test_pairs])
    sr = super_resolve(cfg, nets, state.params, lr_up, sample_seed)
    report = evaluate(list(sr), [p.hr for p in test_pairs], cfg.name)
    return DeskRun(cfg, nets, state, report, bicubic_report(test_pairs), time.perf_counter() - t0)
