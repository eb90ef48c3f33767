import json
import logging
import os
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from xvocab_sandbox.config import AdaptConfig
from xvocab_sandbox.env.lm_oracles import (AdamHyper, AdamState, CategoricalDist, ParamGrad, TabularLM,
                                           adamw_update, apply_update, kl_grad, kl_value, nll_grad, nll_value,
                                           softmax)
from xvocab_sandbox.env.tokenizer import DirectMap
from xvocab_sandbox.errors import AdaptError, VersionError

if TYPE_CHECKING:
    from xvocab_sandbox.agents.spd_agent import RoundRecord

logger = logging.getLogger(__name__)

BUNDLE_FORMAT_VERSION = 1
LABEL_Q_FLOOR = 1e-12


@dataclass
class PositionRecord:
    """
    One target position of a decoding round, seen from the drafter.

    A round yields one record per proposed target token and one more for the token the target
    emitted itself (correction or free token). `proposed` tells the two apart; `accepted` is True
    when the target emitted this record's token at this position, i.e. for accepted proposals and
    for the emitted token. Only accepted records carry a training signal for the drafter; rejected
    proposals feed the acceptance head alone.

    `teacher` holds the target distribution carried into draft space through the direct map
    (raw target probabilities on direct-mapped draft ids, zero elsewhere). `ngram_teacher`, when
    the round ran with an n-gram cache, holds the target probability of every cached n-gram credited
    to the n-gram's first draft token. `target_prob` is the target probability of this record's
    target token at this position.
    """

    kind: str  # "dm" | "ngram"
    context: Tuple[int, ...]
    tokens: Tuple[int, ...]
    teacher: Optional[np.ndarray]
    target_prob: Optional[float]
    accepted: bool = False
    proposed: bool = True
    ngram_teacher: Optional[np.ndarray] = None

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "context": list(self.context), "tokens": list(self.tokens),
                "teacher": None if self.teacher is None else self.teacher.tolist(),
                "target_prob": self.target_prob, "accepted": self.accepted, "proposed": self.proposed,
                "ngram_teacher": None if self.ngram_teacher is None else self.ngram_teacher.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> "PositionRecord":
        teacher = data["teacher"]
        ngram_teacher = data["ngram_teacher"]
        return cls(data["kind"], tuple(data["context"]), tuple(data["tokens"]),
                   None if teacher is None else np.array(teacher, dtype=np.float64),
                   data["target_prob"], data["accepted"], data["proposed"],
                   None if ngram_teacher is None else np.array(ngram_teacher, dtype=np.float64))


@dataclass
class DistillBatchItem:
    context: Tuple[int, ...]
    records: List[PositionRecord]

    def to_dict(self) -> Dict:
        return {"context": list(self.context), "records": [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, data: Dict) -> "DistillBatchItem":
        return cls(tuple(data["context"]), [PositionRecord.from_dict(r) for r in data["records"]])


@dataclass(frozen=True)
class HeadItem:
    """A drafted token for acceptance-head training; its label is recomputed against the current drafter."""

    context: Tuple[int, ...]
    token: int
    target_prob: float


def _fold_ngrams(dist: CategoricalDist, support, vocab_size: int) -> Optional[np.ndarray]:
    if support is None or not len(support[0]):
        return None
    target_ids, first_ids = support
    folded = np.zeros(vocab_size)
    np.add.at(folded, first_ids, dist.probs[target_ids])
    return folded


def record_to_item(record: "RoundRecord", dmap: DirectMap, drafter: TabularLM) -> Optional[DistillBatchItem]:
    """
    Turns one decoding round into a distillation item: one record per proposed target token, plus
    one for the token the target emitted after the accepted prefix when it survived truncation.
    Returns None when the round gave no record at all.
    """
    proposal = record.proposal
    accepted_count = record.outcome.accepted_count
    keep = drafter.order - 1
    support = record.ngram_support

    def tail(ctx):
        return tuple(ctx[len(ctx) - keep:]) if keep > 0 else ()

    def teachers(dist):
        teacher = np.zeros(drafter.vocab_size)
        teacher[dmap.q_ids] = dist.probs[dmap.p_ids]
        return teacher, _fold_ngrams(dist, support, drafter.vocab_size)

    records = []
    for i, seg in enumerate(proposal.segments):
        dist = record.target_dists[i]
        teacher, folded = teachers(dist)
        context = record.ctx_q + record.draft_tokens[:seg.start]
        records.append(PositionRecord(
            kind=seg.kind,
            context=tail(context),
            tokens=tuple(record.draft_tokens[seg.start:seg.end]),
            teacher=teacher,
            target_prob=dist[proposal.target_tokens[i]],
            accepted=i < accepted_count,
            ngram_teacher=folded,
        ))
    if len(record.emitted) > accepted_count:
        token = record.emitted[accepted_count]
        pieces = record.reverse.pieces[accepted_count]
        offset = sum(len(p) for p in record.reverse.pieces[:accepted_count])
        dist = record.target_dists[accepted_count]
        teacher, folded = teachers(dist)
        records.append(PositionRecord(
            kind="dm" if len(pieces) == 1 else "ngram",
            context=tail(record.ctx_q + record.reverse.draft_tokens[:offset]),
            tokens=tuple(pieces),
            teacher=teacher,
            target_prob=dist[token],
            accepted=True,
            proposed=False,
            ngram_teacher=folded,
        ))
    if not records:
        return None
    return DistillBatchItem(tail(record.ctx_q), records)


def head_items(items: Sequence[DistillBatchItem]) -> List[HeadItem]:
    """Proposed direct-mapped tokens, accepted or not."""
    return [HeadItem(r.context, r.tokens[0], r.target_prob) for item in items for r in item.records
            if r.proposed and r.kind == "dm"]


def _dm_teacher(record: PositionRecord, mask: np.ndarray, floor: float) -> CategoricalDist:
    if record.teacher is None:
        raise AdaptError("direct-mapped record carries no target distribution")
    teacher = record.teacher if record.ngram_teacher is None else record.teacher + record.ngram_teacher
    return CategoricalDist(np.where(mask, np.maximum(teacher, floor), 0.0), "draft", normalized=False)


def _dm_mask(record: PositionRecord, dmap_mask: np.ndarray) -> np.ndarray:
    if record.ngram_teacher is None:
        return dmap_mask
    return dmap_mask | (record.ngram_teacher > 0.0)


def _approx_kl(drafter: TabularLM, record: PositionRecord, idx: np.ndarray, floor: float) -> Tuple[float, ParamGrad]:
    """KL between the elevated student and the target over the direct-map image plus the n-gram token."""
    if record.teacher is None or record.target_prob is None:
        raise AdaptError("approximate KL needs the target distribution and the n-gram probability")
    tau = drafter.temperature
    tokens = record.tokens
    first = tokens[0]
    win1 = drafter.window(record.context)
    q1 = softmax(drafter.logits_row(win1) / tau)
    path = []
    rest = 1.0
    for j in range(1, len(tokens)):
        window = drafter.window(record.context + tokens[:j])
        qj = softmax(drafter.logits_row(window) / tau)
        path.append((window, qj, tokens[j]))
        rest *= qj[tokens[j]]
    prod = q1[first] * rest

    pos = int(np.searchsorted(idx, first))
    in_dm = pos < idx.size and idx[pos] == first
    a = np.append(q1[idx], prod)
    if in_dm:
        a[pos] = q1[first] - prod
    t = np.append(np.maximum(record.teacher[idx], floor), max(record.target_prob, floor))
    t = t / t.sum()
    a = np.maximum(a, 1e-300)
    z = a.sum()
    q = a / z
    log_ratio = np.log(q) - np.log(t)
    kl = float(np.sum(q * log_ratio))
    g = (log_ratio - kl) / z

    g_ngram = g[-1]
    g_prefix = g[pos] if in_dm else 0.0
    c = np.zeros(drafter.vocab_size)
    c[idx] = g[:-1]
    c[first] = g_prefix * (1.0 - rest) + g_ngram * rest
    grad = ParamGrad()
    grad.add_row(win1, q1 * (c - np.dot(c, q1)) / tau)
    coeff = (g_ngram - g_prefix) * prod
    for window, qj, token in path:
        onehot = np.zeros(drafter.vocab_size)
        onehot[token] = 1.0
        grad.add_row(window, coeff * (onehot - qj) / tau)
    return kl, grad


def hybrid_loss_grad(drafter: TabularLM, batch: Sequence[DistillBatchItem], lambda_mode: str, ngram_lambda: float,
                     dmap_mask: np.ndarray, teacher_floor: float = 1e-12) -> Tuple[float, ParamGrad]:
    """
    Hybrid distillation loss and its gradient, averaged over the positions whose token the target
    emitted (accepted proposals and the emitted correction or free token); rejected proposals are
    left out.

    Direct-mapped positions contribute the reverse KL between drafter and target, both restricted
    to the direct-map domain and renormalized. When the round ran with an n-gram cache the domain
    also covers the first draft token of every cached n-gram, whose target probability is added to
    that token, mirroring how elevation hands the first sub-token's mass to the merged token.
    N-gram positions contribute, by `lambda_mode`:
    - "fixed": ngram_lambda times the NLL of the draft sub-tokens spelling the emitted token;
    - "dynamic": the NLL weighted by the target probability of the merged token;
    - "approx_kl": ngram_lambda times the KL of the elevated drafter distribution over the
      direct-map image plus the n-gram token.

    Parameters:
    - drafter (TabularLM): the model being trained.
    - batch (list of DistillBatchItem): buffered rounds.
    - lambda_mode (str): "fixed" | "dynamic" | "approx_kl".
    - ngram_lambda (float): weight of the n-gram term.
    - dmap_mask (np.ndarray): boolean mask of direct-mapped draft ids.
    - teacher_floor (float): lower bound on target probabilities before renormalization.

    Returns:
    - (float, ParamGrad): loss value and gradient.
    """
    records = [r for item in batch for r in item.records if r.accepted]
    if not records:
        raise AdaptError("hybrid loss needs at least one position emitted by the target")
    if lambda_mode not in ("fixed", "dynamic", "approx_kl"):
        raise AdaptError(f"unknown lambda mode {lambda_mode!r}")
    idx = np.flatnonzero(dmap_mask)
    total = 0.0
    grad = ParamGrad()
    for record in records:
        if record.kind == "dm":
            mask = _dm_mask(record, dmap_mask)
            teacher = _dm_teacher(record, mask, teacher_floor)
            total += kl_value(drafter, record.context, teacher, mask)
            grad.add(kl_grad(drafter, record.context, teacher, mask))
        elif lambda_mode == "approx_kl":
            if ngram_lambda:
                value, g = _approx_kl(drafter, record, idx, teacher_floor)
                total += ngram_lambda * value
                grad.add(g, ngram_lambda)
        else:
            if lambda_mode == "dynamic":
                if record.target_prob is None:
                    raise AdaptError("dynamic lambda needs the target probability of the n-gram")
                weight = record.target_prob
            else:
                weight = ngram_lambda
            if not weight:
                continue
            for j, token in enumerate(record.tokens):
                context = record.context + record.tokens[:j]
                total += weight * nll_value(drafter, context, token)
                grad.add(nll_grad(drafter, context, token), weight)
    n = len(records)
    return total / n, grad.scaled(1.0 / n)


def acceptance_label(p_val: float, q_val: float) -> float:
    return min(1.0, p_val / max(q_val, LABEL_Q_FLOOR))


def early_exit(accept_probs: Sequence[float], gamma: float) -> bool:
    """True once the probability that at least one drafted token is rejected exceeds gamma."""
    return 1.0 - float(np.prod(accept_probs)) > gamma


def _log_sigmoid(f):
    return -np.logaddexp(0.0, -f)


def sigmoid(f):
    return np.exp(_log_sigmoid(f))


class AcceptanceHead:
    """
    Predicts the acceptance probability of a drafted token from its drafter embedding.

    With `hidden == 0` the head is an affine map followed by a sigmoid; otherwise a tanh hidden
    layer of that width comes first.
    """

    def __init__(self, embed_dim: int, hidden: int = 0, init_bias: float = 0.0, seed: int = 0):
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.params: Dict[str, np.ndarray] = {}
        if hidden:
            rng = np.random.default_rng(seed)
            self.params["W1"] = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(hidden, embed_dim))
            self.params["b1"] = np.zeros(hidden)
            self.params["w"] = np.zeros(hidden)
        else:
            self.params["w"] = np.zeros(embed_dim)
        self.params["b"] = np.array([float(init_bias)])

    def logit(self, e: np.ndarray) -> float:
        x = np.tanh(self.params["W1"] @ e + self.params["b1"]) if self.hidden else e
        return float(self.params["w"] @ x + self.params["b"][0])

    def predict(self, e: np.ndarray) -> float:
        return float(sigmoid(self.logit(e)))

    def to_dict(self) -> Dict:
        return {"embed_dim": self.embed_dim, "hidden": self.hidden,
                "params": {k: v.tolist() for k, v in sorted(self.params.items())}}

    @classmethod
    def from_dict(cls, data: Dict) -> "AcceptanceHead":
        head = cls(data["embed_dim"], data["hidden"])
        head.params = {k: np.array(v, dtype=np.float64) for k, v in data["params"].items()}
        return head


def bce_loss_grad(head: AcceptanceHead, embeddings: Sequence[np.ndarray], labels: Sequence[float],
                  pos_weight: float = 1.0) -> Tuple[float, Dict[str, np.ndarray], List[np.ndarray]]:
    """
    Weighted BCE between sigmoid(head(e)) and soft labels, averaged over items.
    The positive-side term is scaled by `pos_weight`. Returns the loss, parameter gradients and the
    gradient with respect to each input embedding.
    """
    if not len(embeddings):
        raise AdaptError("head update needs at least one item")
    n = len(embeddings)
    grads = {k: np.zeros_like(v) for k, v in head.params.items()}
    embed_grads = []
    loss = 0.0
    for e, label in zip(embeddings, labels):
        if not 0.0 <= label <= 1.0:
            raise AdaptError(f"label {label} outside [0, 1]")
        e = np.asarray(e, dtype=np.float64)
        if head.hidden:
            h = np.tanh(head.params["W1"] @ e + head.params["b1"])
            f = float(head.params["w"] @ h + head.params["b"][0])
        else:
            f = float(head.params["w"] @ e + head.params["b"][0])
        loss -= pos_weight * label * _log_sigmoid(f) + (1.0 - label) * _log_sigmoid(-f)
        s = float(sigmoid(f))
        df = ((1.0 - label) * s - pos_weight * label * (1.0 - s)) / n
        grads["b"] += df
        if head.hidden:
            grads["w"] += df * h
            dpre = df * head.params["w"] * (1.0 - h * h)
            grads["W1"] += np.outer(dpre, e)
            grads["b1"] += dpre
            embed_grads.append(head.params["W1"].T @ dpre)
        else:
            grads["w"] += df * e
            embed_grads.append(df * head.params["w"])
    return loss / n, grads, embed_grads


def head_update(head: AcceptanceHead, embeddings: Sequence[np.ndarray], labels: Sequence[float], pos_weight: float,
                state: AdamState, hyper: AdamHyper) -> Tuple[AcceptanceHead, float, List[np.ndarray]]:
    loss, grads, embed_grads = bce_loss_grad(head, embeddings, labels, pos_weight)
    for name in sorted(grads):
        adamw_update(head.params[name], grads[name], ("head", name), state, hyper)
    return head, loss, embed_grads


@dataclass
class AdaptBuffers:
    distill: List[DistillBatchItem] = field(default_factory=list)
    replay: Deque[HeadItem] = field(default_factory=deque)
    max_replay: int = 64

    def push_replay(self, items: Sequence[HeadItem]) -> int:
        """Appends items and drops the oldest beyond `max_replay`; returns the number evicted."""
        self.replay.extend(items)
        evicted = 0
        while len(self.replay) > self.max_replay:
            self.replay.popleft()
            evicted += 1
        return evicted


class AdaptState:
    """Drafter, acceptance head, optimizers, buffers and counters of one online adaptation session."""

    def __init__(self, drafter: TabularLM, config: AdaptConfig, dmap: DirectMap, seed: int = 0,
                 head: Optional[AcceptanceHead] = None):
        self.drafter = drafter
        self.config = config
        self.dmap = dmap
        self.dmap_mask = dmap.draft_mask(drafter.vocab_size)
        self.head = head if head is not None else AcceptanceHead(
            drafter.embed_dim, config.head_hidden, config.head_init_bias, seed)
        self.drafter_opt = AdamState()
        self.head_opt = AdamState()
        self.drafter_hyper = AdamHyper(config.lr, config.beta1, config.beta2, config.weight_decay, config.eps)
        self.head_hyper = AdamHyper(config.head_lr, config.beta1, config.beta2, config.weight_decay, config.eps)
        self.buffers = AdaptBuffers(max_replay=config.replay_size)
        self.rng = np.random.default_rng(seed)
        self.samples_seen = 0
        self.distill_updates = 0
        self.head_updates = 0
        self.distill_losses: List[float] = []
        self.head_losses: List[float] = []
        self.last_labels: Optional[Tuple[List[float], List[float]]] = None

    def set_dmap(self, dmap: DirectMap) -> None:
        self.dmap = dmap
        self.dmap_mask = dmap.draft_mask(self.drafter.vocab_size)

    def labels(self, items: Sequence[HeadItem]) -> List[float]:
        return [acceptance_label(it.target_prob, self.drafter.next_token_dist(it.context)[it.token]) for it in items]


class AdaptHooks:
    """Decoding hooks that feed rounds into the distillation buffer and predict acceptance with the head."""

    def __init__(self, state: AdaptState):
        self.state = state

    def predict_accept(self, draft_token: int) -> float:
        return self.state.head.predict(self.state.drafter.embed[draft_token])

    def on_round(self, record: "RoundRecord") -> None:
        item = record_to_item(record, self.state.dmap, self.state.drafter)
        if item is not None:
            self.state.buffers.distill.append(item)


class FrozenHooks(AdaptHooks):
    """Acceptance prediction only; rounds are collected into `items` instead of the training buffer."""

    def __init__(self, state: AdaptState):
        super().__init__(state)
        self.items: List[DistillBatchItem] = []

    def on_round(self, record: "RoundRecord") -> None:
        item = record_to_item(record, self.state.dmap, self.state.drafter)
        if item is not None:
            self.items.append(item)


def distill_round(state: AdaptState) -> Optional[float]:
    """`distill_steps` AdamW steps of the hybrid loss on the distillation buffer, which is then cleared."""
    cfg = state.config
    batch = state.buffers.distill
    if not any(r.accepted for item in batch for r in item.records):
        state.buffers.distill = []
        return None
    loss = None
    for _ in range(cfg.distill_steps):
        loss, grad = hybrid_loss_grad(state.drafter, batch, cfg.lambda_mode, cfg.ngram_lambda,
                                      state.dmap_mask, cfg.teacher_floor)
        apply_update(state.drafter, grad, state.drafter_opt, state.drafter_hyper)
    state.buffers.distill = []
    state.distill_updates += 1
    state.distill_losses.append(loss)
    logger.debug("distill update %d: loss %.6f", state.distill_updates, loss)
    return loss


def train_head(state: AdaptState, items: Sequence[HeadItem]) -> Optional[float]:
    """One head update on `items` with labels from the current drafter."""
    if not items:
        return None
    cfg = state.config
    labels = state.labels(items)
    embeddings = [state.drafter.embed[it.token].copy() for it in items]
    _, loss, embed_grads = head_update(state.head, embeddings, labels, cfg.head_pos_weight,
                                       state.head_opt, state.head_hyper)
    if cfg.train_embeddings:
        grad = ParamGrad()
        for it, g in zip(items, embed_grads):
            grad.add_embed(it.token, g)
        apply_update(state.drafter, grad, state.drafter_opt, state.drafter_hyper)
    state.head_updates += 1
    state.head_losses.append(loss)
    return loss


def pretrain_head(state: AdaptState, items: Sequence[HeadItem], epochs: int) -> AcceptanceHead:
    """Offline head training on a fixed trace with the drafter frozen: `epochs` passes in batches of B."""
    batch_size = state.config.batch_size
    for _ in range(epochs):
        for start in range(0, len(items), batch_size):
            train_head(state, items[start:start + batch_size])
    return state.head


def _interval_reached(state: AdaptState) -> bool:
    return state.samples_seen % state.config.update_interval == 0


def distill_step(state: AdaptState) -> None:
    state.samples_seen += 1
    if _interval_reached(state):
        distill_round(state)


def adapt_only_step(state: AdaptState) -> None:
    state.samples_seen += 1
    if _interval_reached(state):
        train_head(state, head_items(state.buffers.distill))
        state.buffers.distill = []


def joint_step(state: AdaptState) -> None:
    """At every interval: distill on the buffer, then train the head on the same rounds with labels
    recomputed against the updated drafter, then clear the buffer."""
    state.samples_seen += 1
    if not _interval_reached(state):
        return
    items = head_items(state.buffers.distill)
    before = state.labels(items)
    distill_round(state)
    after = state.labels(items)
    state.last_labels = (before, after)
    train_head(state, items)


def interleaved_step(state: AdaptState) -> None:
    """Interval steps distill and move the buffer into the replay store; all other steps train the
    head on a replay batch (or on the pending buffer while the replay store is still empty)."""
    state.samples_seen += 1
    if _interval_reached(state):
        items = head_items(state.buffers.distill)
        distill_round(state)
        evicted = state.buffers.push_replay(items)
        if evicted:
            logger.debug("replay buffer evicted %d items", evicted)
        return
    pool = list(state.buffers.replay) or head_items(state.buffers.distill)
    if not pool:
        return
    size = min(state.config.batch_size, len(pool))
    picks = state.rng.choice(len(pool), size=size, replace=False)
    train_head(state, [pool[i] for i in sorted(picks)])


STEP_FUNCTIONS = {
    "distill_only": distill_step,
    "adapt_only": adapt_only_step,
    "joint": joint_step,
    "interleaved": interleaved_step,
}


def adapt_step(state: AdaptState) -> None:
    """Runs the configured schedule after one stream sample has been decoded with AdaptHooks."""
    step = STEP_FUNCTIONS.get(state.config.mode)
    if step is None:
        state.samples_seen += 1
        state.buffers.distill = []
        return
    step(state)


def _rng_state(rng: np.random.Generator) -> Dict:
    return rng.bit_generator.state


def save_bundle(state: AdaptState, directory, session_rng: Optional[np.random.Generator] = None) -> None:
    """Writes drafter checkpoint, head, optimizer moments, buffers and RNG states under `directory`."""
    os.makedirs(directory, exist_ok=True)
    state.drafter.save(os.path.join(directory, "drafter.json"), state.drafter_opt)
    bundle = {
        "version": BUNDLE_FORMAT_VERSION,
        "config": state.config.model_dump(),
        "head": state.head.to_dict(),
        "head_opt": state.head_opt.to_dict(),
        "distill": [item.to_dict() for item in state.buffers.distill],
        "replay": [[list(it.context), it.token, it.target_prob] for it in state.buffers.replay],
        "counters": {"samples_seen": state.samples_seen, "distill_updates": state.distill_updates,
                     "head_updates": state.head_updates},
        "distill_losses": state.distill_losses,
        "head_losses": state.head_losses,
        "rng": _rng_state(state.rng),
        "session_rng": _rng_state(session_rng) if session_rng is not None else None,
    }
    with open(os.path.join(directory, "bundle.json"), "w") as f:
        json.dump(bundle, f)


def load_bundle(directory, dmap: DirectMap) -> Tuple[AdaptState, Optional[np.random.Generator]]:
    with open(os.path.join(directory, "bundle.json"), "r") as f:
        bundle = json.load(f)
    if bundle.get("version") != BUNDLE_FORMAT_VERSION:
        raise VersionError("bundle", bundle.get("version"), BUNDLE_FORMAT_VERSION)
    drafter, drafter_opt = TabularLM.load(os.path.join(directory, "drafter.json"))
    config = AdaptConfig.model_validate(bundle["config"])
    state = AdaptState(drafter, config, dmap, head=AcceptanceHead.from_dict(bundle["head"]))
    state.drafter_opt = drafter_opt or AdamState()
    state.head_opt = AdamState.from_dict(bundle["head_opt"])
    state.buffers.distill = [DistillBatchItem.from_dict(d) for d in bundle["distill"]]
    state.buffers.replay = deque(HeadItem(tuple(c), int(t), float(p)) for c, t, p in bundle["replay"])
    counters = bundle["counters"]
    state.samples_seen = counters["samples_seen"]
    state.distill_updates = counters["distill_updates"]
    state.head_updates = counters["head_updates"]
    state.distill_losses = list(bundle["distill_losses"])
    state.head_losses = list(bundle["head_losses"])
    state.rng.bit_generator.state = bundle["rng"]
    session_rng = None
    if bundle["session_rng"] is not None:
        session_rng = np.random.default_rng()
        session_rng.bit_generator.state = bundle["session_rng"]
    return state, session_rng
