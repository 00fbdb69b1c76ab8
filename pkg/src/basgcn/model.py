"""In/out backtrackless graph-convolution network over aligned grids.

Both paths (in-neighbourhood and out-neighbourhood propagation) share every
parameter, so they are evaluated as one stacked batch of size 2B: rows
``[:B]`` are the in-path, rows ``[B:]`` the out-path.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import Param

CHECKPOINT_VERSION = 1


@dataclass
class BasgcnConfig:
    M: int = 64
    L: int = 10
    T: int = 5
    H: int = 32
    cnn_spec: str = "C32-P2-C32-P2-C32-F128"
    kernel_size: int = 5
    fc_fuse: int = 128
    dropout: float = 0.5
    lr: float = 5e-5
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("M", "L", "H", "fc_fuse", "epochs", "batch_size", "kernel_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        parse_cnn_spec(self.cnn_spec)

    def architecture_fingerprint(self, channels: int, n_classes: int) -> str:
        keys = {k: getattr(self, k) for k in ("M", "T", "H", "cnn_spec", "kernel_size", "fc_fuse")}
        keys.update(channels=channels, n_classes=n_classes)
        return hashlib.sha256(json.dumps(keys, sort_keys=True).encode()).hexdigest()


def parse_cnn_spec(spec: str) -> list:
    """'C32-P2-C32-P2-C32-F128' -> [('C', 32), ('P', 2), ..., ('F', 128)].

    The layer string must end with exactly one F layer.
    """
    layers = []
    for tok in spec.split("-"):
        m = re.fullmatch(r"([CPF])(\d+)", tok.strip())
        if not m:
            raise ValueError(f"bad CNN layer {tok!r} in {spec!r}")
        layers.append((m.group(1), int(m.group(2))))
    if not layers or layers[-1][0] != "F" or any(k == "F" for k, _ in layers[:-1]):
        raise ValueError(f"CNN spec {spec!r} must end with a single F layer")
    return layers


class BasgcnModel:
    def __init__(self, config: BasgcnConfig, channels: int, n_classes: int, seed: int | None = None):
        self.config = config
        self.channels = channels
        self.n_classes = n_classes
        seed = config.seed if seed is None else seed
        ss = np.random.SeedSequence(seed)
        init_seq, drop_seq = ss.spawn(2)
        rng = np.random.default_rng(init_seq)
        self.dropout_rng = np.random.default_rng(drop_seq)
        self.layers = parse_cnn_spec(config.cnn_spec)
        self.params: dict[str, Param] = {}
        M, H, k = config.M, config.H, config.kernel_size

        h_prev = channels
        for t in range(1, config.T + 1):
            self.params[f"gc{t}.w"] = Param(nn.glorot(rng, (H, M, h_prev), h_prev, H))
            h_prev = H

        for t in range(config.T + 1):
            width = channels + t * H
            length = M
            for li, (kind, n) in enumerate(self.layers):
                if kind == "C":
                    self.params[f"b{t}.{li}.w"] = Param(nn.glorot(rng, (k, width, n), k * width, k * n))
                    self.params[f"b{t}.{li}.b"] = Param(np.zeros(n))
                    width = n
                elif kind == "P":
                    length //= n
                    if length < 1:
                        raise ValueError(f"grid size {M} too small for {config.cnn_spec}")
                else:
                    flat = length * width
                    self.params[f"b{t}.{li}.w"] = Param(nn.glorot(rng, (flat, n), flat, n))
                    self.params[f"b{t}.{li}.b"] = Param(np.zeros(n))
        branch_out = self.layers[-1][1]
        fuse_in = (config.T + 1) * branch_out
        self.params["fuse.w"] = Param(nn.glorot(rng, (fuse_in, config.fc_fuse), fuse_in, config.fc_fuse))
        self.params["fuse.b"] = Param(np.zeros(config.fc_fuse))
        self.params["out.w"] = Param(nn.glorot(rng, (2 * config.fc_fuse, n_classes), 2 * config.fc_fuse, n_classes))
        self.params["out.b"] = Param(np.zeros(n_classes))
        self.optimizer = nn.Adam(self.params.values(), lr=config.lr)
        self._cache = None

    # ------------------------------------------------------------------
    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _branch_forward(self, t, x):
        caches = []
        for li, (kind, n) in enumerate(self.layers):
            if kind == "C":
                x, c1 = nn.conv1d_forward(x, self.params[f"b{t}.{li}.w"].value, self.params[f"b{t}.{li}.b"].value)
                x, c2 = nn.relu_forward(x)
                caches.append((kind, c1, c2))
            elif kind == "P":
                x, c1 = nn.avgpool_forward(x, n)
                caches.append((kind, c1, None))
            else:
                shape = x.shape
                x, c1 = nn.fc_forward(x.reshape(shape[0], -1), self.params[f"b{t}.{li}.w"].value,
                                      self.params[f"b{t}.{li}.b"].value)
                x, c2 = nn.relu_forward(x)
                caches.append((kind, c1, (c2, shape)))
        return x, caches

    def _branch_backward(self, t, dx, caches):
        for li in reversed(range(len(self.layers))):
            kind, c1, c2 = caches[li]
            if kind == "C":
                dx = nn.relu_backward(dx, c2)
                dx, dw, db = nn.conv1d_backward(dx, c1)
                self.params[f"b{t}.{li}.w"].grad += dw
                self.params[f"b{t}.{li}.b"].grad += db
            elif kind == "P":
                dx = nn.avgpool_backward(dx, c1)
            else:
                mask, shape = c2
                dx = nn.relu_backward(dx, mask)
                dx, dw, db = nn.fc_backward(dx, c1)
                self.params[f"b{t}.{li}.w"].grad += dw
                self.params[f"b{t}.{li}.b"].grad += db
                dx = dx.reshape(shape)
        return dx

    def forward(self, X, A_D, training: bool = False):
        """Logits for a batch of grids.

        X (B, M, c) or (M, c); A_D (B, M, M) or (M, M) adjacency fed to both
        paths (the backtrackless one for the directed model).
        """
        X = np.asarray(X, dtype=np.float64)
        A_D = np.asarray(A_D, dtype=np.float64)
        single = X.ndim == 2
        if single:
            X, A_D = X[None], A_D[None]
        cfg = self.config
        B = X.shape[0]
        if X.shape[1] != cfg.M or A_D.shape[1:] != (cfg.M, cfg.M):
            raise ValueError(f"grid size {X.shape[1]} does not match model M={cfg.M}")
        if X.shape[2] != self.channels:
            raise ValueError(f"grid has {X.shape[2]} channels, model expects {self.channels}")

        N = np.concatenate([nn.propagation_matrix(A_D, "in"), nn.propagation_matrix(A_D, "out")])
        Z = np.concatenate([X, X])
        zs = [Z]
        gc_caches = []
        for t in range(1, cfg.T + 1):
            Z, c = nn.graph_conv_forward(Z, N, self.params[f"gc{t}.w"].value)
            zs.append(Z)
            gc_caches.append(c)

        feats, br_caches = [], []
        for t in range(cfg.T + 1):
            f, c = self._branch_forward(t, np.concatenate(zs[:t + 1], axis=2))
            feats.append(f)
            br_caches.append(c)
        cat = np.concatenate(feats, axis=1)
        fused, fc_cache = nn.fc_forward(cat, self.params["fuse.w"].value, self.params["fuse.b"].value)
        fused, fuse_mask = nn.relu_forward(fused)
        joined = np.concatenate([fused[:B], fused[B:]], axis=1)
        dropped, drop_mask = nn.dropout_forward(joined, cfg.dropout, self.dropout_rng, training)
        logits, out_cache = nn.fc_forward(dropped, self.params["out.w"].value, self.params["out.b"].value)
        self._cache = dict(B=B, gc=gc_caches, widths=[z.shape[2] for z in zs], branches=br_caches,
                           feat_width=[f.shape[1] for f in feats], fc=fc_cache, fuse_mask=fuse_mask,
                           drop=drop_mask, out=out_cache)
        self.activations = dict(zs=zs, feats=feats, fused=fused)
        return logits[0] if single else logits

    def backward(self, dlogits):
        """Accumulate parameter gradients for the last forward call."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        c = self._cache
        dlogits = np.atleast_2d(dlogits)
        B = c["B"]
        d, dw, db = nn.fc_backward(dlogits, c["out"])
        self.params["out.w"].grad += dw
        self.params["out.b"].grad += db
        d = nn.dropout_backward(d, c["drop"])
        F = d.shape[1] // 2
        dfused = np.concatenate([d[:, :F], d[:, F:]])
        dfused = nn.relu_backward(dfused, c["fuse_mask"])
        dcat, dw, db = nn.fc_backward(dfused, c["fc"])
        self.params["fuse.w"].grad += dw
        self.params["fuse.b"].grad += db

        T = self.config.T
        widths = c["widths"]
        bounds = np.cumsum([0] + widths)
        dzs = [0.0] * (T + 1)
        fb = np.cumsum([0] + c["feat_width"])
        for t in range(T + 1):
            dconcat = self._branch_backward(t, dcat[:, fb[t]:fb[t + 1]], c["branches"][t])
            for s in range(t + 1):
                dzs[s] = dzs[s] + dconcat[:, :, bounds[s]:bounds[s + 1]]
        for t in range(T, 0, -1):
            dprev, dW = nn.graph_conv_backward(dzs[t], c["gc"][t - 1])
            self.params[f"gc{t}.w"].grad += dW
            dzs[t - 1] = dzs[t - 1] + dprev
        dX = dzs[0]
        return dX[:B] + dX[B:]

    # ------------------------------------------------------------------
    def loss_and_grad(self, X, A_D, labels, training=True):
        """Forward, mean cross-entropy, backward. Gradients are overwritten."""
        self.zero_grad()
        logits = self.forward(X, A_D, training=training)
        loss, probs, dlogits = nn.softmax_cross_entropy(logits, labels)
        self.backward(dlogits)
        return loss, probs

    def predict_proba(self, X, A_D, batch_size: int = 64):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            return nn.softmax(self.forward(X, A_D, training=False))
        out = [nn.softmax(self.forward(X[i:i + batch_size], A_D[i:i + batch_size], training=False))
               for i in range(0, len(X), batch_size)]
        return np.concatenate(out)

    def predict(self, X, A_D):
        probs = self.predict_proba(X, A_D)
        return probs.argmax(axis=-1), probs

    # ------------------------------------------------------------------
    def save(self, path):
        path = Path(path)
        meta = {"version": CHECKPOINT_VERSION, "config": asdict(self.config), "channels": self.channels,
                "n_classes": self.n_classes,
                "fingerprint": self.config.architecture_fingerprint(self.channels, self.n_classes)}
        arrays = {f"param/{k}": p.value for k, p in self.params.items()}
        arrays.update({f"adam/{k}": v for k, v in self.optimizer.state_arrays().items()})
        with path.open("wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        return path

    @classmethod
    def load(cls, path, config: BasgcnConfig | None = None):
        with np.load(Path(path)) as z:
            meta = json.loads(z["__meta__"].tobytes().decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            cfg = config or BasgcnConfig(**meta["config"])
            model = cls(cfg, meta["channels"], meta["n_classes"])
            if cfg.architecture_fingerprint(meta["channels"], meta["n_classes"]) != meta["fingerprint"]:
                raise ValueError("checkpoint was written for a different architecture")
            for k, p in model.params.items():
                arr = z[f"param/{k}"]
                if arr.shape != p.shape:
                    raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
                p.value[...] = arr
            model.optimizer.load_state_arrays({k[5:]: z[k] for k in z.files if k.startswith("adam/")})
        return model


# ---------------------------------------------------------------------------
# training


def stack_grids(grids, directed: bool = True):
    X = np.stack([g.features for g in grids])
    A = np.stack([g.backtrackless if directed else g.adjacency for g in grids])
    return X, A


def train_epoch(model: BasgcnModel, X, A, labels, batch_size: int, rng) -> float:
    """One shuffled pass of mini-batch Adam; returns the sample-weighted mean loss."""
    n = len(labels)
    if n == 0:
        raise ValueError("empty training set")
    labels = np.asarray(labels)
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        loss, _ = model.loss_and_grad(X[idx], A[idx], labels[idx], training=True)
        model.optimizer.step()
        total += loss * len(idx)
    return total / n


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)


def fit(model: BasgcnModel, X, A, labels, epochs: int, batch_size: int, seed: int,
        callback=None) -> TrainResult:
    rng = np.random.default_rng(seed)
    res = TrainResult()
    for epoch in range(epochs):
        res.losses.append(train_epoch(model, X, A, labels, batch_size, rng))
        if callback is not None:
            callback(epoch, res.losses[-1])
    return res
