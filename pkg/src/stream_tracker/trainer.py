"""Toy-scale supervised training with truncated backprop through the stream."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import pandas as pd

from stream_tracker.formats import decode_checkpoint, encode_checkpoint
from stream_tracker.metrics import FlowErrorAccumulator
from stream_tracker.models import ConfigError, FlowMetrics, ModelConfig, TrainConfig, build_config
from stream_tracker.synth import SequenceRecord
from stream_tracker.tensor import ShapeError, StreamTrackerError, Tensor
from stream_tracker.tracker import StreamingTracker

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

BCE_EPS = 1e-6
CONFIG_ENTRY = "__config__"
STEP_ENTRY = "__step__"
OPTIM_PREFIX = "optim."
LOSS_LOG = "loss_log.csv"
CHECKPOINT_FILE = "checkpoint.ckpt"

MODULE_ROWS: dict[str, dict[str, Any]] = {
    "full": {},
    "-feature_fusion": {"feature_fusion": False},
    "-memory_bank": {"memory_bank": False},
    "-sensory": {"sensory": False},
    "-query_projector": {"query_projector": False},
}
SPLAT_ROWS: dict[str, dict[str, Any]] = {
    "linear": {"splat_mode": "linear"},
    "average": {"splat_mode": "average"},
    "softmax": {"splat_mode": "softmax"},
    "summation": {"splat_mode": "summation"},
}
WARM_START_ROWS: dict[str, dict[str, Any]] = {
    "full": {},
    "-warm_hidden": {"warm_hidden": False},
    "-warm_flow": {"warm_flow": False},
}
LENGTH_ROWS: dict[str, dict[str, Any]] = {
    "video_length=7": {"video_length": 7},
    "video_length=10": {"video_length": 10},
    "video_length=24": {"video_length": 24},
    "memory_length=1": {"memory_length": 1},
    "memory_length=3": {"memory_length": 3},
    "memory_length=6": {"memory_length": 6},
}


class TrainingDivergedError(StreamTrackerError):
    """Loss or gradients became non-finite; `snapshot` holds the last finite parameters."""

    def __init__(self, step: int, snapshot: Optional[Path]):
        where = f"; last finite parameters saved to {snapshot}" if snapshot else ""
        super().__init__(f"training diverged at step {step}{where}")
        self.step = step
        self.snapshot = snapshot


# -- loss -----------------------------------------------------------------


def downsample_ground_truth(flow: np.ndarray, vis: np.ndarray, scale: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Average-pool gt to 1/scale; flow is divided by scale, vis becomes the visible fraction."""
    _, h, w = flow.shape
    pad = ((0, (-h) % scale), (0, (-w) % scale))
    f = np.pad(flow, ((0, 0),) + pad, mode="edge")
    v = np.pad(np.asarray(vis, dtype=np.float64), pad, mode="edge")
    hq, wq = f.shape[1] // scale, f.shape[2] // scale
    flow_q = f.reshape(2, hq, scale, wq, scale).mean(axis=(2, 4)) / scale
    vis_q = v.reshape(1, hq, scale, wq, scale).mean(axis=(2, 4))
    return flow_q, vis_q


def sequence_loss(
    per_iter_flows: Sequence[Sequence[Tensor]],
    vis_logits: Sequence[Tensor],
    gt_flows: Sequence[np.ndarray],
    gt_vis: Sequence[np.ndarray],
    gamma: float = 0.8,
    vis_weight: float = 1.0,
) -> Tensor:
    """Per frame: sum_i gamma^(N-i) * mean|f_i - gt| + vis_weight * BCE; averaged over frames."""
    if not (len(per_iter_flows) == len(vis_logits) == len(gt_flows) == len(gt_vis)) or not vis_logits:
        raise ShapeError("sequence_loss: per-frame inputs must be non-empty and equally long")
    total: Optional[Tensor] = None
    for flows, logits, gt_f, gt_v in zip(per_iter_flows, vis_logits, gt_flows, gt_vis):
        n = len(flows)
        target = np.asarray(gt_f, dtype=logits.dtype)
        frame_loss: Tensor = Tensor(np.zeros((), dtype=logits.dtype))
        for i, flow in enumerate(flows, start=1):
            frame_loss = frame_loss + (flow - target).abs().mean() * (gamma ** (n - i))
        y = np.asarray(gt_v, dtype=logits.dtype)
        p = logits.sigmoid().clip(BCE_EPS, 1 - BCE_EPS)
        bce = -(p.log() * y + (1 - p).log() * (1 - y)).mean()
        frame_loss = frame_loss + bce * vis_weight
        total = frame_loss if total is None else total + frame_loss
    return total * (1.0 / len(vis_logits))


# -- optimization ---------------------------------------------------------


def one_cycle_lr(step: int, total_steps: int, max_lr: float, warmup_fraction: float) -> float:
    """Linear warm-up to max_lr, then linear decay."""
    warmup = max(1, int(total_steps * warmup_fraction))
    if step < warmup:
        return max_lr * (step + 1) / warmup
    return max_lr * max(total_steps - step, 1) / max(total_steps - warmup, 1)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm; returns the norm before."""
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return total


class Adam:
    """Adaptive moments with decoupled weight decay."""

    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        for name, param in self.params:
            g = grads[name].astype(param.dtype, copy=False)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * param.data
            param.data = (param.data - lr * update).astype(param.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"{OPTIM_PREFIX}m.{k}": v.copy() for k, v in self.m.items()}
        state.update({f"{OPTIM_PREFIX}v.{k}": v.copy() for k, v in self.v.items()})
        state[f"{OPTIM_PREFIX}t"] = np.array([self.t], dtype=np.float64)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name in self.m:
            self.m[name] = state[f"{OPTIM_PREFIX}m.{name}"].copy()
            self.v[name] = state[f"{OPTIM_PREFIX}v.{name}"].copy()
        self.t = int(state[f"{OPTIM_PREFIX}t"][0])


# -- checkpoints ----------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: TrainConfig
    step: int
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(checkpoint: Checkpoint, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries: dict[str, np.ndarray] = dict(checkpoint.params)
    entries.update(checkpoint.optimizer)
    entries[CONFIG_ENTRY] = np.frombuffer(checkpoint.config.model_dump_json().encode("utf-8"), dtype=np.uint8)
    entries[STEP_ENTRY] = np.array([checkpoint.step], dtype=np.float64)
    path.write_bytes(encode_checkpoint(entries))
    logger.info("checkpoint step %d -> %s", checkpoint.step, path)
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    entries = decode_checkpoint(Path(path).read_bytes())
    try:
        raw_config = entries.pop(CONFIG_ENTRY)
        step = int(entries.pop(STEP_ENTRY)[0])
    except KeyError as e:
        raise ConfigError(f"{path}: checkpoint lacks {e}") from e
    config = TrainConfig.model_validate_json(raw_config.tobytes().decode("utf-8"))
    optimizer = {k: v for k, v in entries.items() if k.startswith(OPTIM_PREFIX)}
    params = {k: v for k, v in entries.items() if not k.startswith(OPTIM_PREFIX)}
    return Checkpoint(params=params, config=config, step=step, optimizer=optimizer)


def tracker_from_checkpoint(checkpoint: Checkpoint) -> StreamingTracker:
    tracker = StreamingTracker(checkpoint.config.model, seed=checkpoint.config.seed)
    tracker.load_state_dict(checkpoint.params)
    return tracker


def read_loss_log(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path)


# -- training loop --------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: pd.DataFrame


class Trainer:
    def __init__(self, config: TrainConfig, corpus: Sequence[SequenceRecord], out_dir: Optional[PathLike] = None):
        if not corpus:
            raise ConfigError("training corpus is empty")
        if min(len(r) for r in corpus) < 2:
            raise ConfigError("training sequences need at least two frames")
        self.config = config
        self.corpus = list(corpus)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.tracker = StreamingTracker(config.model, seed=config.seed)
        self.params = list(self.tracker.named_parameters())
        self.optimizer = Adam(self.params, weight_decay=config.weight_decay)
        self.step = 0
        self.history: list[dict[str, float]] = []
        self._gt_cache: dict[int, tuple[list[np.ndarray], list[np.ndarray]]] = {}
        logger.info("trainer: %d parameters, %d sequences", self.tracker.num_parameters(), len(self.corpus))

    def resume(self, checkpoint: Checkpoint) -> None:
        self.tracker.load_state_dict(checkpoint.params)
        if checkpoint.optimizer:
            self.optimizer.load_state_dict(checkpoint.optimizer)
        self.step = checkpoint.step
        logger.info("resumed at step %d", self.step)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            params=self.tracker.state_dict(),
            config=self.config,
            step=self.step,
            optimizer=self.optimizer.state_dict(),
        )

    def _ground_truth(self, index: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
        if index not in self._gt_cache:
            record = self.corpus[index]
            pairs = [downsample_ground_truth(f, v) for f, v in zip(record.gt_flow, record.gt_vis)]
            self._gt_cache[index] = ([p[0] for p in pairs], [p[1] for p in pairs])
        return self._gt_cache[index]

    def _sequence_pass(self, index: int, grads: dict[str, np.ndarray], scale: float) -> tuple[float, FlowErrorAccumulator]:
        """Forward/backward over one sequence in BPTT windows; adds scaled gradients into `grads`."""
        cfg = self.config
        record = self.corpus[index]
        gt_flows, gt_vis = self._ground_truth(index)
        length = min(len(record), cfg.video_length)
        targets = list(range(1, length))
        windows = [targets[i : i + cfg.bptt_window] for i in range(0, len(targets), cfg.bptt_window)]
        errors = FlowErrorAccumulator()
        total = 0.0

        state, _ = self.tracker.init(record.frames[0])
        for w_index, window in enumerate(windows):
            if w_index > 0:
                state = self.tracker.refresh_reference(state.detach(), record.frames[0])
            flows, logits = [], []
            for t in window:
                state, out = self.tracker.step(state, record.frames[t], iters=cfg.model.train_iters)
                flows.append(out.per_iter_flows)
                logits.append(out.vis_logits_q)
                errors.add(out.flow.data, out.vis_prob(), record.gt_flow[t], record.gt_vis[t])
            loss = sequence_loss(
                flows,
                logits,
                [gt_flows[t] for t in window],
                [gt_vis[t] for t in window],
                gamma=cfg.gamma,
                vis_weight=cfg.vis_weight,
            ) * (scale * len(window) / len(targets))
            value = loss.item()
            if not math.isfinite(value):
                return value, errors
            total += value
            if loss.requires_grad:
                loss.backward()
            for name, param in self.params:
                if param.grad is not None:
                    grads[name] += param.grad
                    param.grad = None
        return total, errors

    def _diverged(self) -> None:
        snapshot = None
        if self.out_dir is not None:
            snapshot = save_checkpoint(self.checkpoint(), self.out_dir / f"diverged_step_{self.step:06d}.ckpt")
        logger.warning("non-finite loss at step %d; aborting", self.step)
        raise TrainingDivergedError(self.step, snapshot)

    def train_step(self) -> tuple[float, float]:
        """One optimizer update; returns (loss, full-resolution EPE) of the batch."""
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, self.step])
        batch = rng.integers(0, len(self.corpus), size=cfg.batch_size)
        grads = {name: np.zeros_like(p.data) for name, p in self.params}
        loss = 0.0
        errors = FlowErrorAccumulator()
        for index in batch:
            value, seq_errors = self._sequence_pass(int(index), grads, 1.0 / cfg.batch_size)
            loss += value
            if not math.isfinite(value):
                break
            for region in errors.err_sum:
                errors.err_sum[region] += seq_errors.err_sum[region]
                errors.count[region] += seq_errors.count[region]
            errors.correct += seq_errors.correct
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            self._diverged()
        clip_grad_norm(grads, cfg.clip_norm)
        lr = one_cycle_lr(self.step, cfg.steps, cfg.learning_rate, cfg.warmup_fraction)
        self.optimizer.step(grads, lr)
        self.step += 1
        return loss, errors.result().epe_all

    def _log(self, loss: float, epe: float) -> None:
        self.history.append({"step": self.step, "loss": loss, "epe": epe})
        logger.info("step %d loss %.4f epe %.3f", self.step, loss, epe)
        if self.out_dir is not None:
            path = self.out_dir / LOSS_LOG
            new = not path.exists()
            with path.open("a") as fh:
                if new:
                    fh.write("step,loss,epe\n")
                fh.write(f"{self.step},{loss:.6f},{epe:.6f}\n")

    def run(self, steps: Optional[int] = None) -> TrainResult:
        cfg = self.config
        end = cfg.steps if steps is None else min(cfg.steps, self.step + steps)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        while self.step < end:
            loss, epe = self.train_step()
            if self.step % cfg.log_every == 0 or self.step == end:
                self._log(loss, epe)
            if self.out_dir is not None and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                save_checkpoint(self.checkpoint(), self.out_dir / f"step_{self.step:06d}.ckpt")
        checkpoint = self.checkpoint()
        if self.out_dir is not None:
            save_checkpoint(checkpoint, self.out_dir / CHECKPOINT_FILE)
        return TrainResult(checkpoint=checkpoint, history=pd.DataFrame(self.history, columns=["step", "loss", "epe"]))


def train(
    config: TrainConfig,
    corpus: Sequence[SequenceRecord],
    out_dir: Optional[PathLike] = None,
    resume: Optional[Checkpoint] = None,
) -> TrainResult:
    trainer = Trainer(config, corpus, out_dir)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run()


# -- evaluation and ablations ---------------------------------------------


def evaluate_tracker(tracker: StreamingTracker, corpus: Sequence[SequenceRecord], iters: Optional[int] = None) -> FlowMetrics:
    """Pixel-weighted metrics over frames 2..T of every sequence."""
    errors = FlowErrorAccumulator()
    for record in corpus:
        for t, out in enumerate(tracker.stream(record.frames, iters)):
            if t > 0:
                errors.add(out.flow.data, out.vis_prob(), record.gt_flow[t], record.gt_vis[t])
    return errors.result()


def apply_overrides(base: TrainConfig, overrides: dict[str, Any]) -> TrainConfig:
    """Route each override to TrainConfig or its ModelConfig by field name."""
    train_fields = set(TrainConfig.model_fields) - {"model"}
    model_fields = set(ModelConfig.model_fields)
    unknown = [k for k in overrides if k not in train_fields and k not in model_fields]
    if unknown:
        raise ConfigError(f"unknown override(s) {unknown}")
    model = build_config(ModelConfig, base.model.model_dump(), **{k: v for k, v in overrides.items() if k in model_fields})
    data = base.model_dump()
    data.update({k: v for k, v in overrides.items() if k in train_fields})
    data["model"] = model.model_dump()
    return build_config(TrainConfig, data)


def run_ablation_grid(
    base: TrainConfig,
    rows: dict[str, dict[str, Any]],
    train_corpus: Sequence[SequenceRecord],
    test_corpus: Sequence[SequenceRecord],
    workers: int = 1,
    eval_iters: Optional[int] = None,
) -> pd.DataFrame:
    """Train each row from scratch and evaluate it on the held-out corpus."""
    configs = {name: apply_overrides(base, overrides) for name, overrides in rows.items()}

    def _run(name: str) -> dict[str, Any]:
        result = train(configs[name], train_corpus)
        tracker = tracker_from_checkpoint(result.checkpoint)
        metrics = evaluate_tracker(tracker, test_corpus, eval_iters)
        logger.info("ablation row %s: epe_all=%.3f", name, metrics.epe_all)
        return {"row": name, **metrics.model_dump()}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(_run, configs))
    return pd.DataFrame(records, columns=["row", "epe_all", "epe_vis", "epe_occ", "oa"])
