"""GRPO loss arithmetic: group advantages, token-level clipped surrogate, clipped K3 KL,
zero-variance group filtering and the positive-advantage best-of-N mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError

STD_FLOOR = 1e-8


@dataclass
class SampleGroup:
    """One prompt with G sampled responses.

    Per-response arrays are ragged lists (one 1-D array per response).
    """

    prompt_id: str
    rewards: np.ndarray  # (G,)
    logp_policy: list[np.ndarray]
    logp_old: list[np.ndarray]
    logp_ref: list[np.ndarray]
    masks: list[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        g = self.rewards.shape[0]
        if g < 2:
            raise DimensionError("a group needs at least two responses")
        self.logp_policy = [np.asarray(a, dtype=np.float64) for a in self.logp_policy]
        self.logp_old = [np.asarray(a, dtype=np.float64) for a in self.logp_old]
        self.logp_ref = [np.asarray(a, dtype=np.float64) for a in self.logp_ref]
        if self.masks is None:
            self.masks = [np.ones(a.shape, dtype=bool) for a in self.logp_policy]
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
        for name in ("logp_policy", "logp_old", "logp_ref", "masks"):
            seqs = getattr(self, name)
            if len(seqs) != g:
                raise DimensionError(f"{name} has {len(seqs)} responses, rewards has {g}")
        for i in range(g):
            n = self.masks[i].shape
            if not (self.logp_policy[i].shape == self.logp_old[i].shape == self.logp_ref[i].shape == n):
                raise DimensionError(f"response {i}: token arrays and mask are misaligned")

    @property
    def size(self) -> int:
        return self.rewards.shape[0]

    def to_record(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "rewards": self.rewards.tolist(),
            "logp_policy": [a.tolist() for a in self.logp_policy],
            "logp_old": [a.tolist() for a in self.logp_old],
            "logp_ref": [a.tolist() for a in self.logp_ref],
            "masks": [m.astype(int).tolist() for m in self.masks],
        }

    @classmethod
    def from_record(cls, rec: dict) -> SampleGroup:
        return cls(**rec)


@dataclass(frozen=True)
class GrpoHyper:
    clip_eps: float = 0.2
    kl_coef: float = 0.0
    k3_min: float = 0.0
    k3_max: float = 10.0
    temperature: float = 1.0  # sampling temperature the log-probs were drawn at; recorded only
    bon_coef: float = 0.0

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must lie in (0, 1)", field="clip_eps")
        if self.kl_coef < 0 or self.bon_coef < 0:
            raise ConfigError("loss coefficients must be non-negative", field="kl_coef")


def group_advantages(rewards) -> tuple[np.ndarray, bool]:
    """``(r - mean) / std`` with the population std. Zero variance gives all zeros
    and ``degenerate=True``."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape[0] < 2:
        raise DimensionError("a group needs at least two rewards")
    centered = r - r.mean()
    std = np.sqrt(np.mean(centered**2))
    if std == 0.0 or np.all(r == r[0]):
        return np.zeros_like(r), True
    return centered / max(std, STD_FLOOR), False


def k3_kl(logp_policy, logp_ref, clip: tuple[float, float] = (0.0, 10.0)) -> np.ndarray:
    """Per-token ``r - log r - 1`` with ``r = pi_ref / pi_policy``, clipped."""
    log_r = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_policy, dtype=np.float64)
    k3 = np.exp(log_r) - log_r - 1.0
    return np.clip(k3, clip[0], clip[1])


def bon_mask(advantages) -> np.ndarray:
    return np.asarray(advantages) > 0


def dynamic_filter(groups: list[SampleGroup]) -> list[SampleGroup]:
    """Drop groups whose rewards carry no signal (every advantage zero)."""
    return [g for g in groups if not group_advantages(g.rewards)[1]]


def grpo_token_loss(groups: list[SampleGroup], hyper: GrpoHyper = GrpoHyper()):
    """Token-level GRPO objective over a batch.

    Every unmasked token of every response counts once: the surrogate and the
    K3 term are both averaged over the flat token set, not per sequence first.
    Returns ``(loss, diagnostics)``.
    """
    surr, kls, ratios, clipped, bon_nll = [], [], [], [], []
    for g in groups:
        adv, _ = group_advantages(g.rewards)
        keep = bon_mask(adv)
        for i in range(g.size):
            m = g.masks[i]
            if m.shape != g.logp_policy[i].shape:
                raise DimensionError("mask/sequence misalignment")
            new, old, ref = g.logp_policy[i][m], g.logp_old[i][m], g.logp_ref[i][m]
            rho = np.exp(new - old)
            rho_c = np.clip(rho, 1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps)
            surr.append(np.minimum(rho * adv[i], rho_c * adv[i]))
            kls.append(k3_kl(new, ref, (hyper.k3_min, hyper.k3_max)))
            ratios.append(rho)
            clipped.append(rho != rho_c)
            if keep[i]:
                bon_nll.append(-new)
    n_tok = sum(s.size for s in surr)
    if n_tok == 0:
        raise DimensionError("batch has no unmasked tokens")
    surr_all, kl_all = np.concatenate(surr), np.concatenate(kls)
    mean_kl = float(kl_all.mean())
    bon = float(np.concatenate(bon_nll).mean()) if bon_nll and sum(b.size for b in bon_nll) else 0.0
    loss = -float(surr_all.sum()) / n_tok + hyper.kl_coef * mean_kl + hyper.bon_coef * bon
    diagnostics = {
        "tokens": n_tok,
        "mean_ratio": float(np.concatenate(ratios).mean()),
        "clip_fraction": float(np.concatenate(clipped).mean()),
        "mean_kl": mean_kl,
        "bon_nll": bon,
    }
    return loss, diagnostics


def write_groups_jsonl(groups: list[SampleGroup], path) -> None:
    with open(path, "w") as fh:
        for g in groups:
            fh.write(json.dumps(g.to_record()) + "\n")


def read_groups_jsonl(path) -> list[SampleGroup]:
    lines = Path(path).read_text().splitlines()
    return [SampleGroup.from_record(json.loads(line)) for line in lines if line.strip()]
