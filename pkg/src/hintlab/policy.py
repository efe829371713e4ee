"""Tabular softmax policy over constraint-lock strings.

Logits are indexed ``(bucket, position, token)``.  At position ``p`` the
bucket is ``(table, question[p])``, so tasks sharing a position/symbol pair
share parameters.  Table 0 belongs to the hint-free prompt; hinted prompts
that are not collapsed onto it get their own table (see ``PolicyParams``).
On top of that a heuristic hint masks the distribution to the candidate set,
and an answer-prefix hint overrides sampling at the forced positions.

Temperature only affects sampling.  Every log-prob, entropy and KL reported
here is for the untempered distribution of the given context.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import ConfigError, InputError
from .tasks import N_TABLES, Context

CHECKPOINT_VERSION = 1


HintSharing = Literal["separate", "offset", "shared"]


@dataclass(frozen=True)
class PolicyParams:
    """Logit tables, shape ``(N_TABLES * n_questions, length, vocab)``.

    Rows ``[t * n_questions, (t + 1) * n_questions)`` hold table ``t``;
    table 0 serves the hint-free prompt.  ``sharing`` fixes how a context
    reading table ``t > 0`` combines it with table 0:

    * ``separate``: table ``t`` alone (a hinted prompt is a different prompt);
    * ``offset``: table 0 plus table ``t`` (hinted prompts share the base);
    * ``shared``: table 0 alone (hint fingerprints always collapse).
    """

    logits: np.ndarray
    sharing: HintSharing = "separate"

    def __post_init__(self):
        if self.logits.ndim != 3 or self.logits.shape[0] % N_TABLES or self.logits.shape[0] == 0:
            raise InputError(f"logits must have shape ({N_TABLES} * n_questions, L, V), got {self.logits.shape}")
        if self.sharing not in ("separate", "offset", "shared"):
            raise ConfigError(f"unknown sharing {self.sharing!r}")

    @classmethod
    def zeros(cls, n_questions: int, length: int, vocab: int, sharing: HintSharing = "separate") -> "PolicyParams":
        return cls(np.zeros((N_TABLES * n_questions, length, vocab)), sharing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.logits.shape

    @property
    def n_questions(self) -> int:
        return self.logits.shape[0] // N_TABLES

    @property
    def length(self) -> int:
        return self.logits.shape[1]

    @property
    def vocab(self) -> int:
        return self.logits.shape[2]

    def replace(self, logits: np.ndarray) -> "PolicyParams":
        return PolicyParams(logits, self.sharing)

    def normalization_error(self) -> float:
        """Largest deviation of any softmax row sum from 1."""
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        return float(np.abs(p.sum(axis=-1) - 1.0).max())


def bucket_rows(params: PolicyParams, context: Context) -> list[np.ndarray]:
    """Row indices (one array of length L per contributing table) for a context."""
    q = np.asarray(context.question)
    if q.shape[0] != params.length:
        raise InputError(f"context length {q.shape[0]} != policy length {params.length}")
    Q = params.n_questions
    if q.min() < 0 or q.max() >= Q:
        raise InputError("question symbol outside the bucket range")
    t = context.table
    if not 0 <= t < N_TABLES:
        raise InputError(f"unknown parameter table {t}")
    if t == 0 or params.sharing == "shared":
        return [q]
    if params.sharing == "separate":
        return [t * Q + q]
    return [q, t * Q + q]


@dataclass(eq=False)
class Trajectory:
    """One token string with its log-probs under the sampling params and context.

    ``behavior_logprobs`` is set only for off-policy samples that were not
    drawn from the policy at all (e.g. an injected ground-truth answer); the
    importance ratio then uses it as the denominator.
    """

    tokens: tuple[int, ...]
    old_logprobs: np.ndarray
    sampling_context: Context
    reward: int = 0
    hinted: bool = False
    meta: dict = field(default_factory=dict)
    behavior_logprobs: np.ndarray | None = None

    @property
    def off_policy(self) -> bool:
        return self.behavior_logprobs is not None

    @property
    def n_forced(self) -> int:
        return len(self.sampling_context.forced_prefix)


@lru_cache(maxsize=4096)
def _mask(candidates: tuple[tuple[int, ...], ...], vocab: int) -> np.ndarray:
    m = np.zeros((len(candidates), vocab), dtype=bool)
    for p, cand in enumerate(candidates):
        m[p, list(cand)] = True
    m.setflags(write=False)
    return m


def _slice(params: PolicyParams, context: Context) -> np.ndarray:
    pos = np.arange(params.length)
    rows = bucket_rows(params, context)
    z = params.logits[rows[0], pos, :]
    for r in rows[1:]:
        z = z + params.logits[r, pos, :]
    return z


def _scatter(params: PolicyParams, context: Context, g: np.ndarray) -> np.ndarray:
    """Place a per-position (T, V) gradient into a full logits-shaped array."""
    out = np.zeros_like(params.logits)
    T = g.shape[0]
    pos = np.arange(T)
    for r in bucket_rows(params, context):
        out[r[:T], pos, :] += g
    return out


def _log_softmax(z: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def context_logprobs(params: PolicyParams, context: Context, temperature: float = 1.0) -> np.ndarray:
    """(length, vocab) log-probs; -inf outside a heuristic candidate mask."""
    z = _slice(params, context)
    if temperature != 1.0:
        z = z / temperature
    mask = _mask(context.candidates, params.vocab) if context.candidates is not None else None
    return _log_softmax(z, mask)


def _as_token_matrix(tokens, params: PolicyParams) -> tuple[np.ndarray, bool]:
    arr = np.asarray(tokens, dtype=np.int64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise InputError("tokens must be a sequence or a 2-D batch of sequences")
    if arr.shape[1] > params.length:
        raise InputError(f"{arr.shape[1]} tokens exceed policy length {params.length}")
    if arr.size and (arr.min() < 0 or arr.max() >= params.vocab):
        raise InputError(f"token out of vocabulary [0, {params.vocab})")
    return arr, single


def sample_tokens(
    params: PolicyParams, context: Context, temperature: float, rng: np.random.Generator, n: int
) -> np.ndarray:
    """Draw ``n`` strings as an (n, length) matrix by inverse-CDF sampling.

    One uniform is consumed per (string, position), forced positions included,
    so draws are identical whether strings are taken one at a time or in bulk.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    probs = np.exp(context_logprobs(params, context, temperature))
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[:, -1:]
    u = rng.random((n, params.length))
    tokens = (u[:, :, None] >= cdf[None, :, :]).sum(axis=-1)
    k = len(context.forced_prefix)
    if k:
        tokens[:, :k] = context.forced_prefix
    return tokens


def sample_group(
    params: PolicyParams, context: Context, temperature: float, rng: np.random.Generator, n: int
) -> list[Trajectory]:
    tokens = sample_tokens(params, context, temperature, rng, n)
    old = logprob(params, tokens, context)
    hinted = context.hinted
    return [
        Trajectory(tuple(int(t) for t in tokens[i]), old[i], context, hinted=hinted)
        for i in range(n)
    ]


def sample(
    params: PolicyParams, context: Context, temperature: float, rng: np.random.Generator
) -> Trajectory:
    return sample_group(params, context, temperature, rng, 1)[0]


def logprob(params: PolicyParams, tokens, context: Context) -> np.ndarray:
    """Per-token log-probs; accepts one sequence or a 2-D batch."""
    arr, single = _as_token_matrix(tokens, params)
    lp = context_logprobs(params, context)
    T = arr.shape[1]
    out = lp[np.arange(T)[None, :], arr]
    return out[0] if single else out


def entropies(params: PolicyParams, context: Context) -> np.ndarray:
    lp = context_logprobs(params, context)
    p = np.exp(lp)
    plogp = np.where(p > 0, p * np.where(np.isfinite(lp), lp, 0.0), 0.0)
    return np.maximum(-plogp.sum(axis=-1), 0.0)


def entropy(params: PolicyParams, context: Context, position: int) -> float:
    if not 0 <= position < params.length:
        raise InputError(f"position {position} outside [0, {params.length})")
    return float(entropies(params, context)[position])


def _check_same_shape(a: PolicyParams, b: PolicyParams) -> None:
    if a.shape != b.shape:
        raise InputError(f"parameter shape mismatch {a.shape} vs {b.shape}")


def _kl_terms(a: PolicyParams, b: PolicyParams, context: Context):
    _check_same_shape(a, b)
    la = context_logprobs(a, context)
    lb = context_logprobs(b, context)
    pa = np.exp(la)
    diff = np.where(pa > 0, la - np.where(np.isfinite(lb), lb, 0.0), 0.0)
    per_pos = (pa * diff).sum(axis=-1)
    return pa, diff, per_pos


def kl(params_a: PolicyParams, params_b: PolicyParams, context: Context) -> float:
    """KL(a || b) summed over the positions of ``context``."""
    _, _, per_pos = _kl_terms(params_a, params_b, context)
    return float(max(per_pos.sum(), 0.0))


def grad_kl(params: PolicyParams, params_ref: PolicyParams, context: Context) -> np.ndarray:
    """Gradient of kl(params, params_ref, context) with respect to params.logits."""
    pa, diff, per_pos = _kl_terms(params, params_ref, context)
    return _scatter(params, context, pa * (diff - per_pos[:, None]))


def grad_logprob(params: PolicyParams, tokens, context: Context, weights=None) -> np.ndarray:
    """Gradient of ``sum_t weights[t] * log pi(tokens[t])`` w.r.t. the logits.

    With ``weights=None`` every token has weight 1.  ``tokens`` may be a
    single sequence or an (n, T) batch with matching ``weights``.
    """
    arr, _ = _as_token_matrix(tokens, params)
    n, T = arr.shape
    w = np.ones((n, T)) if weights is None else np.asarray(weights, dtype=float).reshape(n, T)
    probs = np.exp(context_logprobs(params, context))[:T]
    g = -w.sum(axis=0)[:, None] * probs
    np.add.at(g, (np.broadcast_to(np.arange(T), (n, T)), arr), w)
    return _scatter(params, context, g)


def save_checkpoint(params: PolicyParams, path: str | Path, meta: dict | None = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "shape": list(params.shape),
        "sharing": params.sharing,
        "meta": meta or {},
    }
    with Path(path).open("wb") as f:
        np.savez(f, logits=params.logits, header=np.array(json.dumps(header)))


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        logits = np.array(data["logits"])
    if header.get("version") != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if list(logits.shape) != header["shape"]:
        raise InputError(f"{path}: shape header {header['shape']} != data {list(logits.shape)}")
    return PolicyParams(logits, header["sharing"]), header["meta"]
