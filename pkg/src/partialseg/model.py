"""Fixed per-pixel features, a small per-pixel network, and optimizers.

The network maps each pixel's feature vector to N logits independently,
so every gradient is analytic and training stays CPU-cheap.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import uniform_filter


@dataclass(frozen=True)
class FeatureExtractor:
    """Raw intensity, normalized (x, y), and local mean/std at several windows."""

    windows: tuple[int, ...] = (3, 7, 15)
    intensity_center: float = 0.5
    intensity_scale: float = 0.15
    std_scale: float = 0.1

    @property
    def dim(self) -> int:
        return 3 + 2 * len(self.windows)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        """(H, W) image -> (H, W, D) features."""
        img = np.asarray(image, dtype=np.float64)
        h, w = img.shape
        ys, xs = np.meshgrid(
            (np.arange(h) + 0.5) / h * 2.0 - 1.0, (np.arange(w) + 0.5) / w * 2.0 - 1.0, indexing="ij"
        )
        feats = [(img - self.intensity_center) / self.intensity_scale, xs, ys]
        for k in self.windows:
            mean = uniform_filter(img, size=k, mode="reflect")
            sq = uniform_filter(img * img, size=k, mode="reflect")
            std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
            feats.append((mean - self.intensity_center) / self.intensity_scale)
            feats.append(std / self.std_scale)
        return np.stack(feats, axis=-1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureExtractor":
        return cls(**{**d, "windows": tuple(d["windows"])})


class PixelModel:
    """logits = W2 tanh(W1 f + b1) + b2, or W f + b when ``hidden == 0``."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int = 32, rng: np.random.Generator | None = None):
        self.in_dim, self.num_classes, self.hidden = in_dim, num_classes, hidden
        rng = rng if rng is not None else np.random.default_rng(0)
        if hidden:
            self.params = {
                "W1": rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, hidden)),
                "b1": np.zeros(hidden),
                "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, num_classes)),
                "b2": np.zeros(num_classes),
            }
        else:
            self.params = {
                "W": rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, num_classes)),
                "b": np.zeros(num_classes),
            }

    def forward(self, feats: np.ndarray):
        """Return logits of shape ``feats.shape[:-1] + (N,)`` and a backward cache."""
        f = feats.reshape(-1, self.in_dim)
        p = self.params
        if self.hidden:
            hid = np.tanh(f @ p["W1"] + p["b1"])
            logits = hid @ p["W2"] + p["b2"]
            cache = (feats.shape, f, hid)
        else:
            logits = f @ p["W"] + p["b"]
            cache = (feats.shape, f, None)
        return logits.reshape(feats.shape[:-1] + (self.num_classes,)), cache

    def backward(self, grad_logits: np.ndarray, cache) -> dict[str, np.ndarray]:
        _, f, hid = cache
        g = grad_logits.reshape(-1, self.num_classes)
        p = self.params
        if self.hidden:
            dz = (g @ p["W2"].T) * (1.0 - hid * hid)
            return {"W1": f.T @ dz, "b1": dz.sum(axis=0), "W2": hid.T @ g, "b2": g.sum(axis=0)}
        return {"W": f.T @ g, "b": g.sum(axis=0)}

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return self.forward(feats)[0]

    def copy(self) -> "PixelModel":
        other = PixelModel.__new__(PixelModel)
        other.in_dim, other.num_classes, other.hidden = self.in_dim, self.num_classes, self.hidden
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def config(self) -> dict:
        return {"in_dim": self.in_dim, "num_classes": self.num_classes, "hidden": self.hidden}


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for k in params:
            params[k] -= self.lr * grads[k]

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, arrays: dict, meta: dict) -> None:
        pass

    def meta(self) -> dict:
        return {}


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict, meta: dict) -> None:
        self.t = int(meta.get("t", 0))
        self.m = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")}
        self.v = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")}

    def meta(self) -> dict:
        return {"t": self.t}


def make_optimizer(name: str, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    if name == "adam":
        return Adam(lr, betas[0], betas[1], eps)
    if name == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {name!r}")
