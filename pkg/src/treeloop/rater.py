"""The cluster rating model: a dense 3D convnet over KDE voxel grids.

Topology: five conv/batch-norm/relu/max-pool blocks halve the resolution per
block down to 1/32, then a residual head combines two readouts of those
features. Branch A pushes them through two more convolutions down to 3
channels at 1/64 resolution and average-pools; branch B average-pools first
and runs a small perceptron. The branch sums go through softmax.

Channel widths default to the desk-scale plan 8-16-32-64-128; the topology,
not the width, is the contract, and everything is derived from the descriptor
so that desk and full scale share all code paths.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .config import RaterConfig
from .kde import VoxelGrid, kde_voxelize
from .ratings import RatingClass

N_CLASSES = 3


class TrainingError(RuntimeError):
    pass


@dataclass
class Topology:
    resolution: int = 32
    extent: float = 20.0
    channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    head_channels: int = 32
    mlp_hidden: int = 64
    hyper: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"resolution": self.resolution, "extent": self.extent,
                "channels": list(self.channels), "head_channels": self.head_channels,
                "mlp_hidden": self.mlp_hidden, "hyper": self.hyper}

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        return cls(resolution=int(d["resolution"]), extent=float(d["extent"]),
                   channels=tuple(d["channels"]), head_channels=int(d["head_channels"]),
                   mlp_hidden=int(d["mlp_hidden"]), hyper=d.get("hyper", {}))


class RaterNet:
    """Forward/backward for the rating topology; parameters are named tensors."""

    def __init__(self, topology: Topology, seed: int = 0, dtype=np.float32):
        self.topology = topology
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        res = topology.resolution
        if res % (2 ** len(topology.channels)) != 0:
            raise ValueError("resolution must survive the pooling cascade")

        layers: list[nn.Layer] = []
        cin = 1
        for i, cout in enumerate(topology.channels):
            layers += [
                nn.Conv3d(f"block{i}.conv", cin, cout, k=3, stride=1, pad=1,
                          rng=rng, dtype=dtype, bias=False),
                nn.BatchNorm3d(f"block{i}.bn", cout, dtype=dtype),
                nn.ReLU(),
                nn.MaxPool3d(),
            ]
            cin = cout
        self.trunk = nn.Sequential(layers)

        hc = topology.head_channels
        self.head_a = nn.Sequential([
            nn.Conv3d("head_a.conv0", cin, hc, k=3, stride=1, pad=1, rng=rng,
                      dtype=dtype, bias=False),
            nn.BatchNorm3d("head_a.bn", hc, dtype=dtype),
            nn.ReLU(),
            nn.Conv3d("head_a.conv1", hc, N_CLASSES, k=3, stride=2, pad=1,
                      rng=rng, dtype=dtype),
            nn.GlobalAvgPool(),
        ])
        self.head_b_pool = nn.GlobalAvgPool()
        self.head_b = nn.Sequential([
            nn.Linear("head_b.fc0", cin, topology.mlp_hidden, rng=rng, dtype=dtype),
            nn.ReLU(),
            nn.Linear("head_b.fc1", topology.mlp_hidden, N_CLASSES, rng=rng, dtype=dtype),
        ])

    def params(self) -> list[nn.Param]:
        return (self.trunk.params() + self.head_a.params() + self.head_b.params())

    def state(self) -> dict[str, np.ndarray]:
        out = self.trunk.state()
        out.update(self.head_a.state())
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value for p in self.params()}
        out.update(self.state())
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for p in self.params():
            if p.name not in tensors:
                raise KeyError(f"missing tensor {p.name}")
            value = np.asarray(tensors[p.name], dtype=self.dtype)
            if value.shape != p.value.shape:
                raise ValueError(f"tensor {p.name}: shape {value.shape} != {p.value.shape}")
            p.value = value.copy()
            p.grad = np.zeros_like(p.value)
        for seq in (self.trunk, self.head_a):
            for layer in seq.layers:
                if isinstance(layer, nn.BatchNorm3d):
                    layer.load_state(tensors)

    def forward_logits(self, x: np.ndarray, train: bool,
                       update_stats: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 4:
            x = x[:, None]   # (N, R, R, R) -> (N, 1, R, R, R)
        feats = self.trunk.forward(x, train, update_stats)
        a = self.head_a.forward(feats, train, update_stats)
        b = self.head_b.forward(self.head_b_pool.forward(feats, train, update_stats),
                                train, update_stats)
        return a + b

    def backward(self, dlogits: np.ndarray) -> None:
        da = self.head_a.backward(dlogits)
        db = self.head_b_pool.backward(self.head_b.backward(dlogits))
        self.trunk.backward(da + db)

    def predict_proba(self, grids: np.ndarray) -> np.ndarray:
        """Class probabilities in inference mode (running stats, no updates)."""
        logits = self.forward_logits(grids, train=False)
        return nn.softmax(logits.astype(np.float64))

    def clone_values(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_tensors().items()}


def rater_forward(grid: VoxelGrid, net: RaterNet, mode: str = "infer") -> np.ndarray:
    """Probability 3-vector for one voxel grid. mode {"train", "infer"}."""
    if grid.resolution != net.topology.resolution:
        raise ValueError("grid resolution does not match the network topology")
    batch = grid.values[None]
    if mode == "infer":
        return net.predict_proba(batch)[0]
    logits = net.forward_logits(batch, train=True, update_stats=False)
    return nn.softmax(logits.astype(np.float64))[0]


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Per-class loss weights making the total weight of each class equal.

    With counts c and K classes, w_i = (sum(c) / K) / c_i, so w_i * c_i is the
    same for every class and the weighted sample total stays sum(c).
    """
    c = np.asarray(counts, dtype=np.float64)
    if np.any(c < 1):
        raise ValueError(f"every class needs at least one sample, got {counts}")
    return (c.sum() / len(c)) / c


def augment_rotation_z(points: np.ndarray, angle: float | None = None,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Rotate points about the vertical axis through their XY centroid.

    z is untouched, so height-above-ground survives; pairwise distances are
    preserved. angle defaults to a uniform draw from [0, 2 pi).
    """
    pts = np.asarray(points, dtype=np.float64)
    if angle is None:
        angle = float((rng or np.random.default_rng()).uniform(0.0, 2.0 * np.pi))
    cx, cy = pts[:, 0].mean(), pts[:, 1].mean()
    ca, sa = np.cos(angle), np.sin(angle)
    out = pts.copy()
    dx = pts[:, 0] - cx
    dy = pts[:, 1] - cy
    out[:, 0] = cx + ca * dx - sa * dy
    out[:, 1] = cy + sa * dx + ca * dy
    return out


def evaluate(net: RaterNet, grids: np.ndarray, labels: np.ndarray,
             batch_size: int = 32) -> tuple[float, float]:
    """(accuracy, weighted accuracy) on pre-voxelized grids."""
    preds = np.empty(len(labels), dtype=np.int64)
    for lo in range(0, len(labels), batch_size):
        p = net.predict_proba(grids[lo:lo + batch_size])
        preds[lo:lo + len(p)] = p.argmax(axis=1)
    accuracy = float((preds == labels).mean())
    recalls = []
    for k in range(N_CLASSES):
        mask = labels == k
        if mask.any():
            recalls.append(float((preds[mask] == k).mean()))
    return accuracy, float(np.mean(recalls))


def _stratified_split(labels: np.ndarray, val_fraction: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    train_idx, val_idx = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(idx.size)]
        n_val = max(1, int(round(val_fraction * idx.size))) if idx.size > 1 else 0
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))


def train_rater(point_sets: Sequence[np.ndarray], labels: Sequence[RatingClass | int],
                cfg: RaterConfig | None = None, dtype=np.float32,
                log=None) -> tuple[RaterNet, list[dict]]:
    """Train the rating model on human-rated clusters.

    point_sets are raw cluster point arrays (n_i, 3); voxelization and the
    per-epoch z-rotation augmentation happen inside. Returns the network
    rolled back to its best-validation-accuracy epoch plus per-epoch metrics
    rows {epoch, train_loss, val_accuracy, val_weighted_accuracy}.

    Deterministic for a fixed cfg.seed: data order, augmentation angles and
    initialization all derive from it.
    """
    cfg = cfg or RaterConfig()
    y = np.asarray([int(l) for l in labels], dtype=np.int64)
    if len(point_sets) != y.size:
        raise ValueError("point_sets and labels length mismatch")
    present = np.bincount(y, minlength=N_CLASSES)
    if np.any(present == 0):
        raise TrainingError(f"every class needs >= 1 example, got counts {present.tolist()}")

    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = _stratified_split(y, cfg.val_fraction, rng)
    weights = class_weights(np.bincount(y[train_idx], minlength=N_CLASSES))

    topology = Topology(resolution=cfg.resolution, extent=cfg.extent,
                        channels=tuple(cfg.channels),
                        hyper={"learning_rate": cfg.learning_rate,
                               "weight_decay": cfg.weight_decay,
                               "batch_size": cfg.batch_size,
                               "epochs": cfg.epochs, "seed": cfg.seed,
                               "class_weights": weights.tolist()})
    net = RaterNet(topology, seed=cfg.seed, dtype=dtype)
    optimizer = nn.Adam(net.params(), lr=cfg.learning_rate,
                        weight_decay=cfg.weight_decay)

    def voxelize(idx: np.ndarray, augment: bool) -> np.ndarray:
        grids = np.empty((idx.size, cfg.resolution, cfg.resolution, cfg.resolution),
                         dtype=dtype)
        for row, i in enumerate(idx):
            pts = point_sets[i]
            if augment:
                pts = augment_rotation_z(pts, rng=rng)
            grids[row] = kde_voxelize(pts, cfg.resolution, cfg.extent).values
        return grids

    val_grids = voxelize(val_idx, augment=False)
    val_labels = y[val_idx]

    history: list[dict] = []
    best = (-1.0, None)
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        losses = []
        for lo in range(0, order.size, cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            grids = voxelize(batch, augment=True)
            optimizer.zero_grad()
            logits = net.forward_logits(grids, train=True, update_stats=True)
            loss, dlogits = nn.weighted_cross_entropy(logits, y[batch], weights)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}: "
                    f"{loss}; lr={cfg.learning_rate}")
            net.backward(dlogits)
            optimizer.step()
            losses.append(loss)
        val_acc, val_wacc = evaluate(net, val_grids, val_labels)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_accuracy": val_acc, "val_weighted_accuracy": val_wacc}
        history.append(row)
        if log:
            log(f"epoch {epoch:3d}  loss {row['train_loss']:.4f}  "
                f"val acc {val_acc:.3f}  weighted {val_wacc:.3f}")
        if val_acc > best[0]:
            best = (val_acc, net.clone_values())

    if best[1] is not None:
        net.load_tensors(best[1])
    return net, history


def rate_points(net: RaterNet, point_sets: Sequence[np.ndarray],
                batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Rate clusters: returns (class per cluster, softmax confidence)."""
    res = net.topology.resolution
    labels = np.empty(len(point_sets), dtype=np.int64)
    confidence = np.empty(len(point_sets), dtype=np.float64)
    for lo in range(0, len(point_sets), batch_size):
        chunk = point_sets[lo:lo + batch_size]
        grids = np.stack([kde_voxelize(p, res, net.topology.extent).values
                          for p in chunk])
        proba = net.predict_proba(grids)
        labels[lo:lo + len(chunk)] = proba.argmax(axis=1)
        confidence[lo:lo + len(chunk)] = proba.max(axis=1)
    return labels, confidence


# RaterParams file: magic "RATR", version, length-prefixed JSON topology,
# then named tensors (name, dtype code, rank, dims, raw little-endian data).

RATR_MAGIC = b"RATR"
RATR_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_rater(net: RaterNet, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(net.topology.to_dict()).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(RATR_MAGIC)
        f.write(struct.pack("<I", RATR_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, tensor in sorted(net.named_tensors().items()):
            data = np.ascontiguousarray(tensor)
            code = _DTYPE_CODES[np.dtype(data.dtype).newbyteorder("<")]
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<BB", code, data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype(data.dtype.newbyteorder("<")).tobytes())
    tmp.replace(path)
    return path


def load_rater(path: str | Path, dtype=np.float32) -> RaterNet:
    raw = Path(path).read_bytes()
    if raw[:4] != RATR_MAGIC:
        raise ValueError(f"{path}: not a rater params file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != RATR_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, 8)
    offset = 12
    topology = Topology.from_dict(json.loads(raw[offset:offset + blob_len].decode("utf-8")))
    offset += blob_len
    tensors: dict[str, np.ndarray] = {}
    while offset < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code, rank = struct.unpack_from("<BB", raw, offset)
        offset += 2
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        dt = _CODE_DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(raw, dtype=dt, count=count,
                                      offset=offset).reshape(dims).copy()
        offset += count * dt.itemsize
    net = RaterNet(topology, seed=0, dtype=dtype)
    net.load_tensors(tensors)
    return net
