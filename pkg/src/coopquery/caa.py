"""Context-aware association: attention refinement + Sinkhorn matching.

Each layer runs, in order:

1. intra-agent self-attention per query set, with a relative-position term
   computed from ``(dx, dy, dz, |d|)`` between queries of the same agent;
2. one attention pass over the concatenation of all sets (ego first) in
   which each query attends to the queries of every *other* agent, with no
   positional term at all; the message is merged by a feed-forward block
   applied to ``[descriptor, message]``.

Both sub-blocks are residual. Because positions only enter through pairwise
differences inside one agent, translating an agent's queries leaves the
whole forward pass unchanged.

Parameters are plain float64 tensors held in an ordered dict; gradients come
from torch autograd.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .matching import MatchResult, log_sinkhorn
from .scene import QuerySet

POSITION_SCALE = 20.0  # metres; relative offsets are divided by this before the encoder MLP
DEFAULT_TAU = 0.4
STRICT_TAU = 0.8
DEFAULT_TEMPERATURE = 0.1
DEFAULT_SINKHORN_ITERS = 20

_ATTN = ("q", "k", "v", "o")


class DimensionMismatch(ValueError):
    pass


class LabelInconsistency(ValueError):
    pass


class DivergenceDetected(FloatingPointError):
    pass


def param_shapes(n_layers: int, dim: int) -> "OrderedDict[str, tuple]":
    """Tensor names and shapes in declaration (= serialization) order."""
    d = dim
    shapes = OrderedDict()
    for layer in range(n_layers):
        p = f"layers.{layer}."
        for block in ("intra", "inter"):
            for name in _ATTN:
                shapes[f"{p}{block}.{name}"] = (d, d)
        shapes[p + "pos.w1"] = (4, d)
        shapes[p + "pos.b1"] = (d,)
        # no output bias: it would add q_i . b to every key of row i, which softmax cancels
        shapes[p + "pos.w2"] = (d, d)
        shapes[p + "ff.w1"] = (2 * d, 4 * d)
        shapes[p + "ff.b1"] = (4 * d,)
        shapes[p + "ff.w2"] = (4 * d, d)
        shapes[p + "ff.b2"] = (d,)
    for role in ("ego", "coop"):
        shapes[f"match.{role}.w"] = (d,)
        shapes[f"match.{role}.b"] = (1,)
    return shapes


@dataclass
class CaaParams:
    n_layers: int
    dim: int
    heads: int
    tensors: "OrderedDict[str, torch.Tensor]"

    def __post_init__(self):
        if self.dim % self.heads:
            raise DimensionMismatch(f"dim {self.dim} not divisible by heads {self.heads}")
        expected = param_shapes(self.n_layers, self.dim)
        if list(expected) != list(self.tensors):
            raise DimensionMismatch("tensor names do not match (n_layers, dim)")
        for name, shape in expected.items():
            t = self.tensors[name]
            if tuple(t.shape) != shape:
                raise DimensionMismatch(f"{name}: expected {shape}, got {tuple(t.shape)}")
            if not torch.isfinite(t).all():
                raise ValueError(f"{name} has non-finite entries")

    @classmethod
    def init(cls, n_layers: int = 4, dim: int = 32, heads: int = 1, seed: int = 0) -> "CaaParams":
        """Glorot-uniform weights, zero biases, matchability biases at +1."""
        gen = torch.Generator().manual_seed(seed)
        tensors = OrderedDict()
        for name, shape in param_shapes(n_layers, dim).items():
            if name.startswith("match.") and name.endswith(".b"):
                t = torch.ones(shape, dtype=torch.float64)
            elif len(shape) == 1:
                t = torch.zeros(shape, dtype=torch.float64)
            else:
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                t = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            tensors[name] = t
        return cls(n_layers, dim, heads, tensors)

    def copy(self) -> "CaaParams":
        return CaaParams(self.n_layers, self.dim, self.heads,
                         OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()))

    def numpy(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.detach().numpy().copy()) for k, v in self.tensors.items())

    def n_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())


def _tensor(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def _relative_features(pos: torch.Tensor) -> torch.Tensor:
    delta = (pos[None, :, :] - pos[:, None, :]) / POSITION_SCALE
    dist = torch.sqrt((delta ** 2).sum(-1, keepdim=True) + 1e-12)
    return torch.cat([delta, dist], dim=-1)


def _attention(x: torch.Tensor, W: dict, prefix: str, heads: int, rel: Optional[torch.Tensor],
               mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    n, d = x.shape
    dh = d // heads
    q = (x @ W[prefix + ".q"]).view(n, heads, dh)
    k = (x @ W[prefix + ".k"]).view(n, heads, dh)
    v = (x @ W[prefix + ".v"]).view(n, heads, dh)
    logits = torch.einsum("ihc,jhc->hij", q, k)
    if rel is not None:
        # relative-position keys: q_i . r_ij
        logits = logits + torch.einsum("ihc,ijhc->hij", q, rel.view(n, n, heads, dh))
    logits = logits / math.sqrt(dh)
    if mask is not None:
        # a query with no admissible key receives no message at all
        has_key = mask.any(dim=-1, keepdim=True)
        logits = logits.masked_fill(~mask & has_key, float("-inf"))
    attn = torch.softmax(logits, dim=-1)
    if mask is not None:
        attn = attn * has_key
    out = torch.einsum("hij,jhc->ihc", attn, v).reshape(n, d)
    return out @ W[prefix + ".o"]


def refine_tensors(params: CaaParams, positions: Sequence[torch.Tensor],
                   descriptors: Sequence[torch.Tensor], attention_log: Optional[list] = None) -> list:
    """Differentiable forward pass over query sets ``[ego, coop_1, ..., coop_N]``."""
    W = params.tensors
    # unit-norm descriptors -> unit per-component scale, so attention logits start O(1)
    xs = [x * math.sqrt(params.dim) for x in descriptors]
    sizes = [len(x) for x in xs]
    rels = [_relative_features(p) for p in positions]
    owner = torch.repeat_interleave(torch.arange(len(xs)), torch.tensor(sizes, dtype=torch.long))
    cross = owner[:, None] != owner[None, :]
    for layer in range(params.n_layers):
        p = f"layers.{layer}."
        for s, x in enumerate(xs):
            if len(x) == 0:
                continue
            h = F.gelu(rels[s] @ W[p + "pos.w1"] + W[p + "pos.b1"])
            pe = h @ W[p + "pos.w2"]
            xs[s] = x + _attention(x, W, p + "intra", params.heads, pe)
        pool = torch.cat(xs, dim=0)
        if attention_log is not None:
            attention_log.append(len(pool))
        if len(pool):
            msg = _attention(pool, W, p + "inter", params.heads, None, cross)
            hidden = F.gelu(torch.cat([pool, msg], dim=-1) @ W[p + "ff.w1"] + W[p + "ff.b1"])
            pool = pool + hidden @ W[p + "ff.w2"] + W[p + "ff.b2"]
        xs = list(torch.split(pool, sizes, dim=0))
    return [x / math.sqrt(params.dim) for x in xs]


def _check_sets(params: CaaParams, ego: QuerySet, coops: Sequence[QuerySet]) -> None:
    if not coops:
        raise DimensionMismatch("at least one cooperative query set is required")
    for qs in [ego, *coops]:
        if len(qs) and qs.dim != params.dim:
            raise DimensionMismatch(f"descriptor dimension {qs.dim} != model dimension {params.dim}")


def caa_refine(params: CaaParams, ego: QuerySet, coops: Sequence[QuerySet]) -> list:
    """Refined descriptors as numpy arrays, ``[ego, coop_1, ..., coop_N]``."""
    _check_sets(params, ego, coops)
    sets = [ego, *coops]
    with torch.no_grad():
        out = refine_tensors(params, [_tensor(s.positions) for s in sets],
                             [_tensor(s.descriptors).reshape(len(s), params.dim) for s in sets])
    return [o.numpy() for o in out]


def _matchability_logits(params: CaaParams, x: torch.Tensor, role: str) -> torch.Tensor:
    return x @ params.tensors[f"match.{role}.w"] + params.tensors[f"match.{role}.b"]


def score_tensors(params: CaaParams, refined: list, temperature: float, iters: int) -> list:
    """Per coop set: ``(log_scores, coop_logits)`` plus the shared ego matchability logits.

    ``log_scores[u, x] = log sigma_u + log sigma_x + log P[u, x]`` where ``P`` is
    the Sinkhorn assignment of cosine affinities between refined descriptors.
    """
    ego = refined[0]
    ego_logits = _matchability_logits(params, ego, "ego")
    ego_unit = F.normalize(ego, dim=-1)
    heads = []
    for coop in refined[1:]:
        coop_logits = _matchability_logits(params, coop, "coop")
        affinity = F.normalize(coop, dim=-1) @ ego_unit.T
        log_p = log_sinkhorn(affinity / temperature, iters)
        log_scores = F.logsigmoid(coop_logits)[:, None] + F.logsigmoid(ego_logits)[None, :] + log_p
        heads.append((log_scores, coop_logits))
    return heads, ego_logits


def caa_scores(params: CaaParams, ego: QuerySet, coops: Sequence[QuerySet],
               temperature: float = DEFAULT_TEMPERATURE, sinkhorn_iters: int = DEFAULT_SINKHORN_ITERS) -> list:
    _check_sets(params, ego, coops)
    sets = [ego, *coops]
    with torch.no_grad():
        refined = refine_tensors(params, [_tensor(s.positions) for s in sets],
                                 [_tensor(s.descriptors).reshape(len(s), params.dim) for s in sets])
        heads, _ = score_tensors(params, refined, temperature, sinkhorn_iters)
        return [torch.exp(h[0]).numpy() for h in heads]


def mutual_nn_filter(scores: np.ndarray, tau: float) -> MatchResult:
    """Keep (u, x) when each is the other's argmax and the score reaches ``tau``.

    ``np.argmax`` returns the first maximum, so ties go to the lowest index.
    """
    n_coop, n_ego = scores.shape
    pairs = []
    if n_coop and n_ego:
        best_x = np.argmax(scores, axis=1)
        best_u = np.argmax(scores, axis=0)
        for u in range(n_coop):
            x = best_x[u]
            if best_u[x] == u and scores[u, x] >= tau:
                pairs.append((u, int(x), float(scores[u, x])))
    return MatchResult.from_pairs(pairs, n_coop, n_ego)


def caa_match(params: CaaParams, ego: QuerySet, coops: Sequence[QuerySet], tau: float = DEFAULT_TAU,
              temperature: float = DEFAULT_TEMPERATURE, sinkhorn_iters: int = DEFAULT_SINKHORN_ITERS) -> list:
    """One MatchResult per cooperative agent."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    return [mutual_nn_filter(s, tau) for s in caa_scores(params, ego, coops, temperature, sinkhorn_iters)]


@dataclass
class TrainingExample:
    ego: QuerySet
    coops: list
    gt_pairs: list  # per coop set: list of (coop_index, ego_index)

    def __post_init__(self):
        if len(self.gt_pairs) != len(self.coops):
            raise LabelInconsistency("need one ground-truth pair list per cooperative set")
        for coop, pairs in zip(self.coops, self.gt_pairs):
            us = [u for u, _ in pairs]
            xs = [x for _, x in pairs]
            if len(set(us)) != len(us) or len(set(xs)) != len(xs):
                raise LabelInconsistency("ground-truth pairing is not injective")
            if any(not 0 <= u < len(coop) for u in us) or any(not 0 <= x < len(self.ego) for x in xs):
                raise LabelInconsistency("ground-truth index out of range")

    @classmethod
    def from_frame(cls, frame) -> "TrainingExample":
        return cls(frame.ego, list(frame.coops), [list(p) for p in frame.gt_pairs])


@dataclass
class LossBreakdown:
    total: float
    nll: float
    bce: float


def assignment_loss(log_scores: Sequence[torch.Tensor], coop_logits: Sequence[torch.Tensor],
                    ego_logits: torch.Tensor, gt_pairs: Sequence[Sequence[tuple]],
                    nll_weight: float = 1.0, bce_weight: float = 1.0):
    """NLL of the labelled pairs under the scaled scores plus matchability BCE.

    Returns ``(total, nll, bce)`` tensors with the weights already applied,
    so ``total = nll + bce``. The NLL averages over labelled
    pairs, the BCE over every query (ego and all coop sets). A query's
    matchability target is 1 iff it takes part in some ground-truth pair.
    """
    nll_terms = []
    bce_terms = []
    ego_target = torch.zeros_like(ego_logits)
    for log_s, logits, pairs in zip(log_scores, coop_logits, gt_pairs):
        coop_target = torch.zeros_like(logits)
        for u, x in pairs:
            nll_terms.append(-log_s[u, x])
            coop_target[u] = 1.0
            ego_target[x] = 1.0
        bce_terms.append(F.binary_cross_entropy_with_logits(logits, coop_target, reduction="none"))
    bce_terms.append(F.binary_cross_entropy_with_logits(ego_logits, ego_target, reduction="none"))
    zero = ego_logits.new_zeros(())
    nll = torch.stack(nll_terms).mean() if nll_terms else zero
    all_bce = torch.cat(bce_terms)
    bce = all_bce.mean() if len(all_bce) else zero
    nll, bce = nll_weight * nll, bce_weight * bce
    return nll + bce, nll, bce


def _loss_graph(params: CaaParams, example: TrainingExample, temperature: float, iters: int,
                nll_weight: float, bce_weight: float):
    _check_sets(params, example.ego, example.coops)
    sets = [example.ego, *example.coops]
    refined = refine_tensors(params, [_tensor(s.positions) for s in sets],
                             [_tensor(s.descriptors).reshape(len(s), params.dim) for s in sets])
    heads, ego_logits = score_tensors(params, refined, temperature, iters)
    return assignment_loss([h[0] for h in heads], [h[1] for h in heads], ego_logits, example.gt_pairs,
                           nll_weight, bce_weight)


def caa_loss(params: CaaParams, example: TrainingExample, temperature: float = DEFAULT_TEMPERATURE,
             sinkhorn_iters: int = DEFAULT_SINKHORN_ITERS, nll_weight: float = 1.0, bce_weight: float = 1.0):
    """Loss, its gradient with respect to every parameter tensor, and the component breakdown."""
    leaves = OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in params.tensors.items())
    graph_params = CaaParams(params.n_layers, params.dim, params.heads, leaves)
    total, nll, bce = _loss_graph(graph_params, example, temperature, sinkhorn_iters, nll_weight, bce_weight)
    grads = torch.autograd.grad(total, list(leaves.values()), allow_unused=True)
    grads = OrderedDict(
        (k, (g if g is not None else torch.zeros_like(leaves[k])).detach().numpy())
        for k, g in zip(leaves, grads)
    )
    total, nll, bce = float(total.detach()), float(nll.detach()), float(bce.detach())
    return total, grads, LossBreakdown(total, nll, bce)


def caa_loss_value(params: CaaParams, example: TrainingExample, **kwargs) -> float:
    """Loss only, without building gradients (finite-difference oracle and evaluation)."""
    with torch.no_grad():
        total, _, _ = _loss_graph(params, example,
                                  kwargs.get("temperature", DEFAULT_TEMPERATURE),
                                  kwargs.get("sinkhorn_iters", DEFAULT_SINKHORN_ITERS),
                                  kwargs.get("nll_weight", 1.0), kwargs.get("bce_weight", 1.0))
    return float(total)


def train_caa(initial: CaaParams, dataset: Sequence[TrainingExample], steps: int, learning_rate: float,
              seed: int = 0, temperature: float = DEFAULT_TEMPERATURE,
              sinkhorn_iters: int = DEFAULT_SINKHORN_ITERS, bce_weight: float = 1.0,
              batch_size: int = 1, clip_norm: Optional[float] = None, callback=None):
    """Plain SGD over shuffled passes of ``dataset``; returns ``(params, per-step losses)``.

    Each step averages the gradient of ``batch_size`` consecutive examples from
    the shuffled order. ``clip_norm`` rescales a step whose global gradient
    norm exceeds it.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not dataset:
        raise ValueError("dataset must not be empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    params = initial.copy()
    rng = np.random.default_rng(seed)
    order: list = []
    curve = []
    for step in range(steps):
        loss = 0.0
        grads = OrderedDict((k, np.zeros(tuple(v.shape))) for k, v in params.tensors.items())
        for _ in range(batch_size):
            if not order:
                order = list(rng.permutation(len(dataset)))
            l, g, _ = caa_loss(params, dataset[order.pop(0)], temperature, sinkhorn_iters, bce_weight=bce_weight)
            loss += l / batch_size
            for k in grads:
                grads[k] += g[k] / batch_size
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceDetected(f"non-finite loss at step {step}")
        scale = 1.0
        if clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > clip_norm:
                scale = clip_norm / norm
        with torch.no_grad():
            for name, g in grads.items():
                params.tensors[name] -= (learning_rate * scale) * torch.from_numpy(g)
        curve.append(loss)
        if callback is not None:
            callback(step, loss)
    return params, curve
