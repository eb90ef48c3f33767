import copy
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from xvocab_sandbox.errors import ModelError, VersionError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
NORMALIZATION_TOL = 1e-9

Window = Tuple[int, ...]
Mask = Union[np.ndarray, Sequence[int], None]


@dataclass(frozen=True)
class CategoricalDist:
    """Dense probability vector over one vocabulary ("draft" or "target" space)."""

    probs: np.ndarray
    space: str = "draft"
    normalized: bool = True

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 1 or probs.size == 0:
            raise ModelError("distribution must be a non-empty vector")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ModelError("distribution has negative or non-finite entries")
        if self.normalized and abs(probs.sum() - 1.0) > NORMALIZATION_TOL:
            raise ModelError(f"distribution sums to {probs.sum():.12f}, not 1")

    def __getitem__(self, token_id: int) -> float:
        return float(self.probs[token_id])

    def __len__(self) -> int:
        return self.probs.size

    @property
    def mass(self) -> float:
        return float(self.probs.sum())


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


@dataclass
class ParamGrad:
    """Sparse logit-row gradients keyed by context window plus dense embedding gradients."""

    logits: Dict[Window, np.ndarray] = field(default_factory=dict)
    embed: Dict[int, np.ndarray] = field(default_factory=dict)

    def add_row(self, window: Window, row: np.ndarray, weight: float = 1.0) -> None:
        if window in self.logits:
            self.logits[window] = self.logits[window] + weight * row
        else:
            self.logits[window] = weight * np.asarray(row, dtype=np.float64)

    def add_embed(self, token_id: int, vec: np.ndarray, weight: float = 1.0) -> None:
        if token_id in self.embed:
            self.embed[token_id] = self.embed[token_id] + weight * vec
        else:
            self.embed[token_id] = weight * np.asarray(vec, dtype=np.float64)

    def add(self, other: "ParamGrad", weight: float = 1.0) -> "ParamGrad":
        for window, row in other.logits.items():
            self.add_row(window, row, weight)
        for token_id, vec in other.embed.items():
            self.add_embed(token_id, vec, weight)
        return self

    def scaled(self, weight: float) -> "ParamGrad":
        return ParamGrad().add(self, weight)

    def is_empty(self) -> bool:
        return not self.logits and not self.embed


class TabularLM:
    """
    Tabular softmax conditional language model.

    `order` is the n-gram order: the next-token distribution is conditioned on the last
    `order - 1` tokens. Rows exist only for windows that were fitted or trained; every other
    window reads the shared backoff row, and the first update to a window materializes its own
    row from the backoff values.
    """

    def __init__(self, vocab_size: int, order: int = 2, temperature: float = 0.01,
                 embed_dim: int = 16, seed: int = 0, space: str = "draft"):
        if vocab_size < 1:
            raise ModelError("vocab_size must be positive")
        if order < 1:
            raise ModelError("order must be at least 1")
        if temperature <= 0:
            raise ModelError("temperature must be positive")
        self.vocab_size = vocab_size
        self.order = order
        self.temperature = float(temperature)
        self.embed_dim = embed_dim
        self.space = space
        self.rows: Dict[Window, np.ndarray] = {}
        self.backoff = np.zeros(vocab_size, dtype=np.float64)
        rng = np.random.default_rng(seed)
        self.embed = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(vocab_size, embed_dim))

    def window(self, context: Sequence[int]) -> Window:
        n = self.order - 1
        win = tuple(int(t) for t in context[len(context) - n:]) if n > 0 else ()
        for t in win:
            if not 0 <= t < self.vocab_size:
                raise ModelError(f"invalid token id {t} for vocabulary of size {self.vocab_size}")
        return win

    def logits_row(self, window: Window) -> np.ndarray:
        return self.rows.get(window, self.backoff)

    def next_token_dist(self, context: Sequence[int]) -> CategoricalDist:
        return CategoricalDist(softmax(self.logits_row(self.window(context)) / self.temperature), self.space)

    def check_token(self, token_id: int) -> int:
        if not 0 <= int(token_id) < self.vocab_size:
            raise ModelError(f"invalid token id {token_id} for vocabulary of size {self.vocab_size}")
        return int(token_id)

    @classmethod
    def fit_counts(cls, sequences: Iterable[Sequence[int]], vocab_size: int, order: int = 2,
                   temperature: float = 0.01, smoothing: float = 0.01, embed_dim: int = 16,
                   seed: int = 0, space: str = "draft") -> "TabularLM":
        """Fits add-`smoothing` conditional counts; logits are temperature * log p so the fitted
        distribution is reproduced exactly at the model's own temperature."""
        model = cls(vocab_size, order, temperature, embed_dim, seed, space)
        counts: Dict[Window, np.ndarray] = defaultdict(lambda: np.zeros(vocab_size))
        unigram = np.zeros(vocab_size)
        for seq in sequences:
            seq = [model.check_token(t) for t in seq]
            for i, token in enumerate(seq):
                counts[model.window(seq[:i])][token] += 1.0
                unigram[token] += 1.0
        for window, row in counts.items():
            p = (row + smoothing) / (row.sum() + smoothing * vocab_size)
            model.rows[window] = model.temperature * np.log(p)
        p = (unigram + smoothing) / (unigram.sum() + smoothing * vocab_size)
        model.backoff = model.temperature * np.log(p)
        return model

    def copy(self) -> "TabularLM":
        return copy.deepcopy(self)

    def state_dict(self) -> Dict:
        return {
            "version": CHECKPOINT_FORMAT_VERSION,
            "vocab_size": self.vocab_size,
            "order": self.order,
            "temperature": self.temperature,
            "embed_dim": self.embed_dim,
            "space": self.space,
            "backoff": self.backoff.tolist(),
            "rows": [[list(w), r.tolist()] for w, r in sorted(self.rows.items())],
            "embed": self.embed.tolist(),
        }

    @classmethod
    def from_state_dict(cls, data: Dict) -> "TabularLM":
        if data.get("version") != CHECKPOINT_FORMAT_VERSION:
            raise VersionError("checkpoint", data.get("version"), CHECKPOINT_FORMAT_VERSION)
        try:
            model = cls(data["vocab_size"], data["order"], data["temperature"], data["embed_dim"],
                        space=data.get("space", "draft"))
            model.backoff = np.array(data["backoff"], dtype=np.float64)
            model.rows = {tuple(w): np.array(r, dtype=np.float64) for w, r in data["rows"]}
            model.embed = np.array(data["embed"], dtype=np.float64).reshape(model.vocab_size, model.embed_dim)
        except (KeyError, TypeError, ValueError) as e:
            raise ModelError(f"corrupt checkpoint: {e}") from e
        return model

    def save(self, path, optimizer_state: Optional["AdamState"] = None) -> None:
        data = self.state_dict()
        data["optimizer"] = optimizer_state.to_dict() if optimizer_state is not None else None
        with open(path, "w") as f:
            json.dump(data, f)

    @classmethod
    def load(cls, path) -> Tuple["TabularLM", Optional["AdamState"]]:
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ModelError(f"corrupt checkpoint file {path}: {e}") from e
        opt = data.get("optimizer")
        return cls.from_state_dict(data), (AdamState.from_dict(opt) if opt is not None else None)


def sample(dist: CategoricalDist, rng: np.random.Generator) -> int:
    """Inverse-CDF sample; one uniform draw per call."""
    if not dist.normalized:
        raise ModelError("cannot sample from a sub-normalized distribution")
    cdf = np.cumsum(dist.probs)
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    return min(idx, dist.probs.size - 1)


def _mask_indices(mask: Mask, vocab_size: int) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.size != vocab_size:
            raise ModelError("boolean mask does not match the vocabulary size")
        return np.flatnonzero(mask)
    return np.unique(mask.astype(np.int64))


def nll_value(model: TabularLM, context: Sequence[int], token: int) -> float:
    token = model.check_token(token)
    s = model.logits_row(model.window(context)) / model.temperature
    return float(np.logaddexp.reduce(s) - s[token])


def nll_grad(model: TabularLM, context: Sequence[int], token: int) -> ParamGrad:
    """Gradient of -log q(token | context) on the context's logit row: (q - onehot) / temperature."""
    token = model.check_token(token)
    window = model.window(context)
    q = softmax(model.logits_row(window) / model.temperature)
    row = q.copy()
    row[token] -= 1.0
    grad = ParamGrad()
    grad.add_row(window, row / model.temperature)
    return grad


def _student_teacher(model: TabularLM, context: Sequence[int], teacher: CategoricalDist, mask: Mask):
    window = model.window(context)
    if len(teacher) != model.vocab_size:
        raise ModelError("teacher distribution lives in a different index space")
    idx = _mask_indices(mask, model.vocab_size)
    s = model.logits_row(window) / model.temperature
    t = teacher.probs
    if idx is not None:
        s, t = s[idx], t[idx]
    if np.any(t <= 0):
        raise ModelError("teacher has zero probability where the student is positive; floor the teacher")
    q = softmax(s)
    t = t / t.sum()
    return window, idx, q, t


def kl_value(model: TabularLM, context: Sequence[int], teacher: CategoricalDist, mask: Mask = None) -> float:
    """Reverse KL(q || teacher); with a mask both sides are restricted to it and renormalized."""
    _, _, q, t = _student_teacher(model, context, teacher, mask)
    return float(np.sum(q * (np.log(q) - np.log(t))))


def kl_grad(model: TabularLM, context: Sequence[int], teacher: CategoricalDist, mask: Mask = None) -> ParamGrad:
    window, idx, q, t = _student_teacher(model, context, teacher, mask)
    log_ratio = np.log(q) - np.log(t)
    kl = float(np.sum(q * log_ratio))
    g = q * (log_ratio - kl) / model.temperature
    row = np.zeros(model.vocab_size)
    if idx is None:
        row = g
    else:
        row[idx] = g
    grad = ParamGrad()
    grad.add_row(window, row)
    return grad


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8


@dataclass
class AdamState:
    """First/second moments and per-key step counts; sparse rows keep their own clocks."""

    m: Dict[Hashable, np.ndarray] = field(default_factory=dict)
    v: Dict[Hashable, np.ndarray] = field(default_factory=dict)
    t: Dict[Hashable, int] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "entries": [[_key_to_json(k), self.t[k], self.m[k].tolist(), self.v[k].tolist()]
                        for k in sorted(self.t, key=_key_to_json)]
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "AdamState":
        state = cls()
        for key, t, m, v in data["entries"]:
            key = _key_from_json(key)
            state.t[key] = int(t)
            state.m[key] = np.array(m, dtype=np.float64)
            state.v[key] = np.array(v, dtype=np.float64)
        return state


def _key_to_json(key) -> str:
    return json.dumps(key)


def _key_from_json(text: str):
    def tuplify(x):
        return tuple(tuplify(i) for i in x) if isinstance(x, list) else x
    return tuplify(json.loads(text))


def adamw_update(param: np.ndarray, grad: np.ndarray, key: Hashable, state: AdamState, hyper: AdamHyper) -> None:
    """One in-place AdamW step with decoupled weight decay on a single parameter array."""
    t = state.t.get(key, 0) + 1
    m = state.m.get(key)
    v = state.v.get(key)
    if m is None:
        m = np.zeros_like(param)
        v = np.zeros_like(param)
    m = hyper.beta1 * m + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * v + (1.0 - hyper.beta2) * (grad * grad)
    m_hat = m / (1.0 - hyper.beta1 ** t)
    v_hat = v / (1.0 - hyper.beta2 ** t)
    if hyper.weight_decay:
        param -= hyper.lr * hyper.weight_decay * param
    param -= hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    state.m[key], state.v[key], state.t[key] = m, v, t


def apply_update(model: TabularLM, grad: ParamGrad, state: AdamState, hyper: AdamHyper) -> Tuple[TabularLM, AdamState]:
    """Applies AdamW to every touched logit row and embedding; untouched parameters do not decay."""
    for window in sorted(grad.logits):
        if window not in model.rows:
            model.rows[window] = model.backoff.copy()
        adamw_update(model.rows[window], grad.logits[window], ("logits", window), state, hyper)
    for token_id in sorted(grad.embed):
        row = model.embed[token_id]
        adamw_update(row, grad.embed[token_id], ("embed", token_id), state, hyper)
    return model, state
