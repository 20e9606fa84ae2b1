"""Run configuration, the training loop, evaluation and gradient checking."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from htprior import block, dataset, evaluation, hough
from htprior.errors import ConfigurationError, LoadError
from htprior.tensor import adam_step, backward, load_checkpoint, reset_tape, save_checkpoint

log = logging.getLogger(__name__)

BEST_CKPT = "best.htp"
STATE_CKPT = "last_state.htp"
RUN_CONFIG = "run.cfg"
TRAIN_LOG = "train_log.csv"


@dataclass
class RunConfig:
    model: str = "local_global"
    data: str = ""
    out: str = ""
    seed: int = 0
    epochs: int = 200
    lr: float = 4e-4
    lr_decay_epoch: int = 0
    lr_decay: float = 0.1
    weight_decay: float = 1e-4
    batch_size: int = 1
    patience: int = 20
    init: str = "default"
    n_rho: int = hough.DEFAULT_N_RHO
    n_theta: int = hough.DEFAULT_N_THETA
    support: int = 9
    channels_in: int = 4
    channels_mid: int = 4
    channels_out: int = 4
    sigma_low: float = 0.5
    sigma_high: float = 2.5
    train_limit: int = 0
    val_limit: int = 0
    resume: str = ""

    def __post_init__(self):
        if self.model not in block.MODEL_KINDS:
            raise ConfigurationError(f"unknown model {self.model!r}; expected one of {', '.join(block.MODEL_KINDS)}")
        if self.init not in ("default", "zero"):
            raise ConfigurationError(f"init must be 'default' or 'zero', got {self.init!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")

    @property
    def block_config(self) -> block.BlockConfig:
        return block.BlockConfig("full", self.support, self.channels_in, self.channels_mid,
                                 self.channels_out, (self.sigma_low, self.sigma_high))

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_epoch and epoch >= self.lr_decay_epoch:
            return self.lr * self.lr_decay
        return self.lr

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values: dict[str, object] = {}
    unknown = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            unknown.append(key)
            continue
        typ = fields[key].type
        try:
            values[key] = int(val) if typ == "int" else float(val) if typ == "float" else val
        except ValueError:
            raise ConfigurationError(f"{source}:{lineno}: {key} expects {typ}, got {val!r}") from None
    if unknown:
        raise ConfigurationError(f"{source}: unknown config keys: {', '.join(unknown)}")
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise LoadError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def model_from_config(cfg: RunConfig, width=dataset.IMAGE_SIZE, height=dataset.IMAGE_SIZE) -> block.Model:
    mask = hough.vote_mask_for(width, height, cfg.n_rho, cfg.n_theta)
    return block.build_model(cfg.model, mask, cfg.seed, cfg.init, cfg.block_config,
                             (cfg.sigma_low, cfg.sigma_high))


def _limit(samples, n):
    return samples[:n] if n else samples


def predict_all(model: block.Model, samples) -> list[np.ndarray]:
    return [model.predict(s.image) for s in samples]


def evaluate(model: block.Model, samples) -> tuple[float, list[evaluation.MatchResult]]:
    curve = evaluation.dataset_pr_curve(predict_all(model, samples), [s.target for s in samples])
    return evaluation.ap_from_curve(curve), curve


def train_epoch(model: block.Model, samples, lr: float, weight_decay: float, batch_size: int,
                order: np.ndarray) -> float:
    total = 0.0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        for i in idx:
            s = samples[i]
            loss = model.loss(model.forward(model.as_input(s.image)), model.as_input(s.target))
            total += loss.item()
            backward(loss)
        if len(idx) > 1:
            for p in model.params:
                p.value.grad = p.value.grad / len(idx)
        adam_step(model.params, lr, weight_decay=weight_decay)
    return total / max(1, len(order))


def _state_arrays(model: block.Model, epoch: int, best_ap: float, stale: int):
    out = list(model.state())
    for p in model.params:
        out.append((f"#adam_m/{p.name}", p.adam_m))
        out.append((f"#adam_v/{p.name}", p.adam_v))
        out.append((f"#step/{p.name}", np.array(p.step, np.float32)))
    out.append(("#epoch", np.array(epoch, np.float32)))
    out.append(("#best_ap", np.array(best_ap, np.float32)))
    out.append(("#stale", np.array(stale, np.float32)))
    return out


def _restore_state(model: block.Model, arrays: dict[str, np.ndarray]) -> tuple[int, float, int]:
    model.load_state(arrays)
    try:
        for p in model.params:
            p.adam_m = arrays[f"#adam_m/{p.name}"].astype(p.data.dtype)
            p.adam_v = arrays[f"#adam_v/{p.name}"].astype(p.data.dtype)
            p.step = int(arrays[f"#step/{p.name}"])
        return int(arrays["#epoch"]), float(arrays["#best_ap"]), int(arrays["#stale"])
    except KeyError as exc:
        raise LoadError(f"resume checkpoint lacks optimizer state entry {exc}") from None


@dataclass
class TrainResult:
    out_dir: Path
    best_ap: float
    best_epoch: int
    history: list[tuple[int, float, float, float]]


def train(cfg: RunConfig, splits: dict | None = None) -> TrainResult:
    """Train ``cfg.model``; write the best-validation checkpoint, resumable state and a CSV log.

    Everything written depends only on the config, so identical configs give
    byte-identical outputs.
    """
    if splits is None:
        if not cfg.data:
            raise ConfigurationError("config needs data = <dataset directory>")
        splits = {name: dataset.load_split(Path(cfg.data) / name) for name in ("train", "val")}
    train_set = _limit(splits["train"], cfg.train_limit)
    val_set = _limit(splits["val"], cfg.val_limit)
    out = Path(cfg.out or f"runs/{cfg.model}")
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_CONFIG).write_text(cfg.to_text())

    model = model_from_config(cfg)
    start, best_ap, stale = 0, -1.0, 0
    history: list[tuple[int, float, float, float]] = []
    log_path = out / TRAIN_LOG
    if cfg.resume:
        start, best_ap, stale = _restore_state(model, load_checkpoint(cfg.resume))
        start += 1
        if log_path.exists():
            for row in log_path.read_text().splitlines()[1:]:
                e, l, a, r = row.split(",")
                if int(e) < start:
                    history.append((int(e), float(l), float(a), float(r)))
    best_epoch = max((h[0] for h in history if h[2] == round(best_ap, 6)), default=-1)

    for epoch in range(start, cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        loss = train_epoch(model, train_set, lr, cfg.weight_decay, cfg.batch_size, order)
        val_ap, _ = evaluate(model, val_set)
        history.append((epoch, round(loss, 8), round(val_ap, 6), lr))
        log.info("epoch %d  lr %.2e  train loss %.6f  val AP %.2f%%", epoch, lr, loss, 100 * val_ap)
        if val_ap > best_ap:
            best_ap, best_epoch, stale = val_ap, epoch, 0
            save_checkpoint(out / BEST_CKPT, model.state())
        else:
            stale += 1
        save_checkpoint(out / STATE_CKPT, _state_arrays(model, epoch, best_ap, stale))
        _write_log(log_path, history)
        if cfg.patience and stale >= cfg.patience:
            log.info("no validation improvement for %d epochs; stopping", stale)
            break
    if not (out / BEST_CKPT).exists():
        save_checkpoint(out / BEST_CKPT, model.state())
    model.load_state(load_checkpoint(out / BEST_CKPT))
    write_metrics(out, "val", model, val_set, f"{cfg.model} best epoch {best_epoch}")
    return TrainResult(out, best_ap, best_epoch, history)


def write_metrics(out_dir, split: str, model: block.Model, samples, title: str = "") -> str:
    """Evaluate, then write ``<split>_report.txt`` and ``<split>_pr.csv``; returns the report."""
    ap, curve = evaluate(model, samples)
    report = evaluation.format_report(curve, ap, title)
    Path(out_dir, f"{split}_report.txt").write_text(report)
    evaluation.write_csv(Path(out_dir, f"{split}_pr.csv"), curve)
    return report


def _write_log(path: Path, history) -> None:
    rows = ["epoch,train_loss,val_ap,lr"] + [f"{e},{l:.8f},{a:.6f},{r:g}" for e, l, a, r in history]
    path.write_text("\n".join(rows) + "\n")


def load_trained(ckpt, config_path=None) -> tuple[block.Model, RunConfig]:
    """Rebuild a model from its run config (default: ``run.cfg`` beside the checkpoint) and load weights."""
    ckpt = Path(ckpt)
    cfg_path = Path(config_path) if config_path else ckpt.parent / RUN_CONFIG
    cfg = load_config(cfg_path)
    model = model_from_config(cfg)
    model.load_state(load_checkpoint(ckpt))
    return model, cfg


# ---------------------------------------------------------------------------
# Gradient checking

def _loss_value(model: block.Model, image: np.ndarray, target: np.ndarray) -> float:
    loss = model.loss(model.forward(model.as_input(image)), model.as_input(target))
    reset_tape()
    return loss.item()


def finite_diff_check(model: block.Model, sample, delta: float = 1e-3) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Analytic gradients come from the model as is (float32); the differences
    are taken on a float64 clone. The error for each parameter tensor is
    ``|g - n| / max(|g|, |n|)`` in the 2-norm.
    """
    image, target = sample
    for p in model.params:
        p.value.grad = None
    loss = model.loss(model.forward(model.as_input(image)), model.as_input(target))
    backward(loss)
    clone = model.astype(np.float64)
    worst = 0.0
    for p, q in zip(model.params, clone.params):
        analytic = p.grad.astype(np.float64) if p.grad is not None else np.zeros(p.data.shape)
        numeric = np.zeros(q.data.shape)
        flat = q.value.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + delta
            up = _loss_value(clone, image, target)
            flat[i] = orig - delta
            down = _loss_value(clone, image, target)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * delta)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
        p.value.grad = None
    return worst


def gradcheck_setup(kind: str, seed: int, size: int = 8, n_rho: int = 17, n_theta: int = 12,
                    channels: int = 2):
    """A small model with every parameter randomized, plus a random sample, for gradient checks.

    Parameters (biases included) are drawn away from zero so that no ReLU
    input sits exactly on its kink.
    """
    rng = np.random.default_rng(seed)
    mask = hough.vote_mask_for(size, size, n_rho, n_theta)
    cfg = block.BlockConfig("full", 3, channels, channels, channels)
    model = block.build_model(kind, mask, seed, block_config=cfg)
    for p in model.params:
        p.value.data = (p.data + rng.normal(0, 0.3, p.data.shape)).astype(p.data.dtype)
    image = rng.uniform(0, 1, (size, size)).astype(np.float32)
    target = (rng.uniform(0, 1, (size, size)) < 0.3).astype(np.float32)
    return model, (image, target)


# The Hough branch leaves many ReLU inputs within 1e-3 of zero, so larger
# steps straddle kinks; float64 differences stay accurate at this step.
GRADCHECK_DELTA = 1e-5


def gradient_report(kind: str, seed: int, size: int = 8, delta: float = GRADCHECK_DELTA) -> float:
    model, sample = gradcheck_setup(kind, seed, size)
    return finite_diff_check(model, sample, delta)
