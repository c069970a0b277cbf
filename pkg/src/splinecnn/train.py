"""Training loop, evaluation, metrics emission, and checkpointing."""

import csv
import dataclasses
import io
import json
import os
import time
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decisions import DiffusionSchedule
from .models import build_lenet, build_spline_lenet
from .regularizer import Quantizer, RegConfig, reg_loss
from .tensor import DTensor

CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Raised when the loss turns non-finite; carries a diagnostic dump path."""


@dataclass
class TrainConfig:
    """Everything a run needs; mirrored by the CLI flags and --config JSON."""

    model: str = "spline-lenet"  # 'lenet' | 'spline-lenet'
    scale: int = 8
    num_knots: int = 2
    theta_knots: int = 0  # 0: same as num_knots
    degree: int = 0  # 0: min(3, K-1)
    model_type: str = "hierarchical"  # 'dynamic' | 'hierarchical'
    decision: str = "dot"
    rank: int = 3
    slope: float = 0.4
    diffusion: str = "constant"  # 'constant' | 'tree'
    alpha: float = 1.0
    branching: int = 2
    lr: float = 0.1
    lr_decay: float = 0.1  # multiplier applied at 75% of the epochs
    momentum: float = 0.9
    batch: int = 250
    epochs: int = 5
    seed: int = 0
    dropout: float = 0.5
    w_u: float = 0.2
    w_s: float = 0.2
    clip_norm: float = 0.0  # global gradient-norm clip; 0 disables
    bins: int = 50
    quant_slope: float = 100.0
    limit: int = 0  # use only the first N training samples when > 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch}")

    def schedule(self):
        return DiffusionSchedule(kind=self.diffusion, alpha=self.alpha,
                                 branching=self.branching)

    def build_model(self, dtype=np.float32):
        rng = np.random.default_rng(self.seed)
        if self.model == "lenet":
            m = build_lenet(self.scale, rng=rng, dtype=dtype)
            m.spec.dropout = self.dropout
            return m
        m = build_spline_lenet(
            self.scale, num_knots=self.num_knots, model=self.model_type,
            decision=self.decision, rank=self.rank,
            degree=self.degree or None, schedule=self.schedule(),
            theta_knots=self.theta_knots or None, slope=self.slope,
            rng=rng, dtype=dtype)
        m.spec.dropout = self.dropout
        return m


def _metrics_header(num_spline_layers):
    return (["step", "split", "loss", "xent", "reg_u", "reg_s", "acc"]
            + [f"H_layer_{i + 1}" for i in range(num_spline_layers)])


def train(model, dataset, cfg, out_dir, test_dataset=None, log=print):
    """Run SGD-momentum training; returns the final checkpoint path.

    Per-step metrics stream to metrics.csv; a run-manifest records the full
    config and seed; checkpoints are written each epoch and at the end.
    A non-finite loss aborts with a dump of the position histograms.
    """
    os.makedirs(out_dir, exist_ok=True)
    if cfg.limit:
        dataset = dataset.subset(cfg.limit)
    q = Quantizer(bins=cfg.bins, slope=cfg.quant_slope)
    reg_cfg = RegConfig(w_u=cfg.w_u, w_s=cfg.w_s)
    params = model.parameters()
    velocities = {}
    rng = np.random.default_rng(cfg.seed + 1)  # shuffling and dropout
    num_spline = sum(hasattr(l, "weight_bank") for _, l in model.layers)
    decay_epoch = int(cfg.epochs * 0.75)
    n = len(dataset)
    step = 0
    start = time.time()

    with open(os.path.join(out_dir, "run.json"), "w") as f:
        json.dump({"config": dataclasses.asdict(cfg), "model": model.spec.name,
                   "train_samples": n}, f, indent=2)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", newline="") as mf:
        writer = csv.writer(mf)
        writer.writerow(_metrics_header(num_spline))
        for epoch in range(cfg.epochs):
            lr = cfg.lr * (cfg.lr_decay if epoch >= decay_epoch and decay_epoch < cfg.epochs else 1.0)
            order = rng.permutation(n)
            for lo in range(0, n - cfg.batch + 1, cfg.batch):
                idx = order[lo:lo + cfg.batch]
                x = DTensor(dataset.images[idx])
                y = dataset.labels[idx]
                logits, states = model.forward(x, train=True, rng=rng)
                xent = T.softmax_cross_entropy(logits, y)
                reg, entropies = reg_loss(states, y, q, reg_cfg)
                loss = T.add(xent, reg) if reg.requires_grad else xent
                if not np.isfinite(loss.values):
                    dump = _dump_positions(states, q, out_dir, step)
                    raise NumericError(f"non-finite loss at step {step}; "
                                       f"position histograms dumped to {dump}")
                T.backward(loss)
                if cfg.clip_norm > 0:
                    _clip_grad_norm(params, cfg.clip_norm)
                T.sgd_momentum_step(params, velocities, lr, cfg.momentum)
                T.zero_grads(params)
                acc = float((logits.values.argmax(axis=1) == y).mean())
                writer.writerow([step, "train", f"{float(loss.values):.6f}",
                                 f"{float(xent.values):.6f}",
                                 f"{-cfg.w_u * sum(entropies):.6f}",
                                 f"{float(reg.values) + cfg.w_u * sum(entropies):.6f}",
                                 f"{acc:.4f}"]
                                + [f"{h:.4f}" for h in entropies])
                step += 1
            if test_dataset is not None:
                result = evaluate(model, test_dataset, batch=cfg.batch, quantizer=q)
                writer.writerow([step, "test", "", "", "", "", f"{result.accuracy:.4f}"]
                                + [f"{h:.4f}" for h in result.entropies])
                log(f"epoch {epoch + 1}/{cfg.epochs}: test acc {result.accuracy:.4f} "
                    f"({time.time() - start:.0f}s)")
            else:
                log(f"epoch {epoch + 1}/{cfg.epochs} done ({time.time() - start:.0f}s)")
            save_checkpoint(os.path.join(out_dir, "checkpoint.zip"), model, cfg)
    return os.path.join(out_dir, "checkpoint.zip")


@dataclass
class EvalResult:
    accuracy: float
    entropies: list = field(default_factory=list)  # per spline layer, nats
    histograms: np.ndarray | None = None  # [layers, bins], rows sum to 1
    predictions: np.ndarray | None = None


def evaluate(model, dataset, batch=250, quantizer=None, single_sample=False):
    """Eval-mode accuracy plus per-layer position entropies and histograms."""
    q = quantizer or Quantizer()
    preds = np.empty(len(dataset), dtype=np.int64)
    collected = None
    if single_sample:
        for i in range(len(dataset)):
            logits, positions, _ = model.forward_single(dataset.images[i])
            preds[i] = int(np.argmax(logits))
            if positions:
                flat = [np.atleast_1d(p) for p in positions]
                if collected is None:
                    collected = [[] for _ in flat]
                for store, p in zip(collected, flat):
                    store.append(p)
    else:
        for lo in range(0, len(dataset), batch):
            x = DTensor(dataset.images[lo:lo + batch])
            logits, states = model.forward(x, train=False)
            preds[lo:lo + batch] = logits.values.argmax(axis=1)
            if states:
                if collected is None:
                    collected = [[] for _ in states]
                for store, st in zip(collected, states):
                    store.append(st.positions.values.reshape(-1))
    accuracy = float((preds == dataset.labels).mean())
    entropies, hists = [], []
    if collected:
        for store in collected:
            p = _soft_histogram(np.concatenate(store), q)
            hists.append(p)
            entropies.append(float(-(p * np.log(p + q.eps)).sum()))
    return EvalResult(accuracy=accuracy, entropies=entropies,
                      histograms=np.array(hists) if hists else None,
                      predictions=preds)


def _clip_grad_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def _soft_histogram(phi, q):
    z = 2.0 * (phi[:, None].astype(np.float64) - q.centers[None, :]) / q.width
    u = 1.0 / (1.0 + np.exp(np.minimum((z * z - 1.0) * np.log(q.slope), 700.0)))
    per_bin = u.sum(axis=0)
    return per_bin / per_bin.sum()


def _dump_positions(states, q, out_dir, step):
    path = os.path.join(out_dir, f"positions_step{step}.json")
    payload = []
    for st in states:
        flat = st.positions.values.reshape(-1)
        finite = flat[np.isfinite(flat)]
        hist = _soft_histogram(np.clip(finite, 0.0, 1.0), q) if finite.size else []
        payload.append({"layer": st.layer, "finite": int(finite.size),
                        "total": int(flat.size), "histogram": np.asarray(hist).tolist()})
    with open(path, "w") as f:
        json.dump(payload, f)
    return path


# ----------------------------------------------------------------------
# checkpointing: zip of manifest.json + one .npy blob per parameter
# ----------------------------------------------------------------------

def save_checkpoint(path, model, cfg=None):
    named = model.named_parameters()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "model": model.spec.name,
        "config": dataclasses.asdict(cfg) if cfg is not None else None,
        "parameters": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype)}
                       for k, v in named.items()],
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        for name, p in named.items():
            buf = io.BytesIO()
            np.save(buf, p.values)
            zf.writestr(f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path, model=None):
    """Restore a checkpoint; builds the model from its config when not given.

    Loading is bit-exact: .npy blobs round-trip the float buffers unchanged.
    """
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['version']}")
        cfg = None
        if model is None:
            if manifest["config"] is None:
                raise ValueError("checkpoint has no config; pass a model to load into")
            cfg = TrainConfig(**manifest["config"])
            model = cfg.build_model()
        named = model.named_parameters()
        listed = [e["name"] for e in manifest["parameters"]]
        if set(listed) != set(named):
            raise ValueError(f"checkpoint/model mismatch: {sorted(set(listed) ^ set(named))}")
        for entry in manifest["parameters"]:
            arr = np.load(io.BytesIO(zf.read(f"params/{entry['name']}.npy")))
            target = named[entry["name"]]
            if tuple(arr.shape) != target.shape:
                raise ValueError(f"shape mismatch for {entry['name']}: "
                                 f"{arr.shape} vs {target.shape}")
            target.values = arr
    return model, cfg
