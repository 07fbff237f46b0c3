"""Hybrid A/M/F stack: config, block-pattern census, construction, prefill/decode/generate."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

from .attention import AttnConfig, AttnParams, KvCache, RopeConfig, gqa_decode_step, gqa_prefill, init_attn_params
from .errors import CapacityError, ConfigError, InputError, ParseError
from .moe import MoeConfig, MoeParams, init_moe_params, moe_forward
from .numerics import rmsnorm, softmax_lastdim
from .ssd import SsdConfig, SsdLayerParams, SsmState, init_ssd_params, ssd_layer_decode, ssd_layer_forward

BOS, EOS, PAD = 256, 257, 258
BYTE_VOCAB = 259
MAX_CONTEXT = 262144


class LayerKind(enum.Enum):
    ATTENTION = "A"
    MAMBA = "M"
    FFN = "F"


@dataclass(frozen=True)
class LayerCensus:
    attention: int
    mamba: int
    ffn: int

    @property
    def total(self) -> int:
        return self.attention + self.mamba + self.ffn

    @property
    def fractions(self) -> tuple[float, float, float]:
        t = self.total
        return self.attention / t, self.mamba / t, self.ffn / t


def parse_block_pattern(s: str) -> tuple[list[LayerKind], LayerCensus]:
    """Parse a string over {A, M, F}; whitespace is ignored."""
    kinds = []
    for offset, ch in enumerate(s):
        if ch.isspace():
            continue
        try:
            kinds.append(LayerKind(ch))
        except ValueError:
            raise ParseError(f"illegal block character {ch!r}", offset) from None
    if not kinds:
        raise ParseError("empty block pattern", 0)
    census = LayerCensus(
        attention=kinds.count(LayerKind.ATTENTION),
        mamba=kinds.count(LayerKind.MAMBA),
        ffn=kinds.count(LayerKind.FFN),
    )
    return kinds, census


# 7 AMF blocks, 50 MF blocks and the 7 FFN layers the AMF/MF tiling alone does
# not produce, placed one after each AMF block.
TURBOS_128_PATTERN = " ".join(
    "AMF F " + " ".join(["MF"] * n) for n in (8, 7, 7, 7, 7, 7, 7)
)
TURBOS_128_CENSUS = LayerCensus(attention=7, mamba=57, ffn=64)
TURBOS_128_FRACTIONS = (0.055, 0.445, 0.50)


def validate_production_pattern(pattern: str, tol: float = 0.005) -> LayerCensus:
    """Check a pattern against the production layer mix (7 A, 57 M, 64 F)."""
    _, census = parse_block_pattern(pattern)
    if census != TURBOS_128_CENSUS:
        raise ConfigError(
            f"census (A={census.attention}, M={census.mamba}, F={census.ffn}) != (7, 57, 64)",
            field="block_pattern",
        )
    for got, want in zip(census.fractions, TURBOS_128_FRACTIONS):
        if abs(got - want) > tol:
            raise ConfigError(f"layer fraction {got:.4f} differs from {want} by more than {tol}", field="block_pattern")
    return census


@dataclass(frozen=True)
class ModelConfig:
    """Every architecture scalar. Defaults are the tiny desk-scale preset."""

    d_model: int = 64
    vocab_size: int = BYTE_VOCAB
    block_pattern: str = "AMF MF MF MF"
    n_q_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 16
    d_state: int = 16
    ssm_groups: int = 2
    chunk_size: int = 8
    conv_width: int = 4
    n_experts: int = 4
    top_k: int = 2
    capacity_factor: float = 1.5
    d_ff: int = 128
    rope_base: float = 10000.0
    ntk_alpha: float = 1.0
    norm_eps: float = 1e-5
    seed: int = 0
    tie_embeddings: bool = False

    def __post_init__(self):
        for name in ("d_model", "vocab_size", "n_q_heads", "n_kv_heads", "d_head", "d_state",
                     "ssm_groups", "chunk_size", "n_experts", "top_k", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", field=name)
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive", field="norm_eps")
        try:
            parse_block_pattern(self.block_pattern)
        except ParseError as e:
            raise ConfigError(str(e), field="block_pattern") from e
        # sub-configs validate their own invariants
        self.attn_config()
        self.ssd_config()
        self.moe_config()

    @property
    def layers(self) -> list[LayerKind]:
        return parse_block_pattern(self.block_pattern)[0]

    @property
    def census(self) -> LayerCensus:
        return parse_block_pattern(self.block_pattern)[1]

    def attn_config(self) -> AttnConfig:
        return AttnConfig(
            n_q_heads=self.n_q_heads,
            n_kv_heads=self.n_kv_heads,
            d_head=self.d_head,
            rope=RopeConfig(d_head=self.d_head, base=self.rope_base, ntk_alpha=self.ntk_alpha),
        )

    def ssd_config(self) -> SsdConfig:
        # Mamba heads mirror the attention query heads (64 and 64 at full scale)
        return SsdConfig(
            n_heads=self.n_q_heads,
            d_head=self.d_head,
            d_state=self.d_state,
            n_groups=self.ssm_groups,
            chunk_size=self.chunk_size,
            conv_width=self.conv_width,
        )

    def moe_config(self) -> MoeConfig:
        return MoeConfig(
            n_experts=self.n_experts,
            top_k=self.top_k,
            n_shared=1,
            capacity_factor=self.capacity_factor,
            d_ff=self.d_ff,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


TINY = ModelConfig()
TURBOS_128 = ModelConfig(
    d_model=5120,
    vocab_size=131072,
    block_pattern=TURBOS_128_PATTERN,
    n_q_heads=64,
    n_kv_heads=8,
    d_head=128,
    d_state=128,
    ssm_groups=16,
    chunk_size=128,
    n_experts=32,
    top_k=2,
    capacity_factor=1.5,
    d_ff=17024,
    ntk_alpha=1000.0,
)
PRESETS = {"tiny": TINY, "turbos-128": TURBOS_128}


@dataclass
class Block:
    kind: LayerKind
    norm: np.ndarray  # pre-norm gain, (d_model,)
    params: AttnParams | SsdLayerParams | MoeParams


@dataclass
class Model:
    cfg: ModelConfig
    embed: np.ndarray  # (vocab, d_model)
    blocks: list[Block]
    final_norm: np.ndarray
    lm_head: np.ndarray | None  # (d_model, vocab); None when tied to ``embed``
    max_context: int = MAX_CONTEXT

    @property
    def head(self) -> np.ndarray:
        return self.embed.T if self.lm_head is None else self.lm_head

    def named_tensors(self) -> dict[str, np.ndarray]:
        """All weights under stable dotted names, in a fixed order."""
        out = {"embed": self.embed}
        for i, blk in enumerate(self.blocks):
            out[f"blocks.{i}.norm"] = blk.norm
            _flatten(f"blocks.{i}.{blk.kind.value}", blk.params, out)
        out["final_norm"] = self.final_norm
        if self.lm_head is not None:
            out["lm_head"] = self.lm_head
        return out


def _flatten(prefix: str, obj, out: dict) -> None:
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        if dataclasses.is_dataclass(val):
            _flatten(f"{prefix}.{f.name}", val, out)
        else:
            out[f"{prefix}.{f.name}"] = val


@dataclass
class Session:
    """Per-sequence inference state. Single owner; never share across threads."""

    cfg: ModelConfig
    caches: dict[int, KvCache] = field(default_factory=dict)
    states: dict[int, SsmState] = field(default_factory=dict)
    position: int = 0

    @classmethod
    def new(cls, model: Model) -> Session:
        s = cls(cfg=model.cfg)
        for i, blk in enumerate(model.blocks):
            if blk.kind is LayerKind.ATTENTION:
                s.caches[i] = KvCache(model.cfg.n_kv_heads, model.cfg.d_head)
            elif blk.kind is LayerKind.MAMBA:
                s.states[i] = SsmState.zeros(model.cfg.ssd_config())
        return s


def build_model(cfg: ModelConfig) -> Model:
    """Seeded construction: identical weights for identical configs."""
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    d = cfg.d_model
    bound = 1.0 / np.sqrt(d)
    embed = rng.uniform(-bound, bound, size=(cfg.vocab_size, d)).astype(np.float32)
    attn_cfg, ssd_cfg, moe_cfg = cfg.attn_config(), cfg.ssd_config(), cfg.moe_config()
    blocks = []
    for kind in cfg.layers:
        if kind is LayerKind.ATTENTION:
            params = init_attn_params(attn_cfg, d, rng)
        elif kind is LayerKind.MAMBA:
            params = init_ssd_params(ssd_cfg, d, rng)
        else:
            params = init_moe_params(moe_cfg, d, rng)
        blocks.append(Block(kind=kind, norm=np.ones(d, dtype=np.float32), params=params))
    lm_head = None if cfg.tie_embeddings else rng.uniform(-bound, bound, size=(d, cfg.vocab_size)).astype(np.float32)
    return Model(cfg=cfg, embed=embed, blocks=blocks, final_norm=np.ones(d, dtype=np.float32), lm_head=lm_head)


def _check_tokens(model: Model, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        raise InputError("no tokens")
    bad = (tokens < 0) | (tokens >= model.cfg.vocab_size)
    if bad.any():
        raise InputError(f"token id {int(tokens[bad][0])} outside vocab of {model.cfg.vocab_size}")
    return tokens


def _run(model: Model, tokens: np.ndarray, session: Session, decode: bool) -> np.ndarray:
    cfg = model.cfg
    eps = cfg.norm_eps
    attn_cfg, ssd_cfg, moe_cfg = cfg.attn_config(), cfg.ssd_config(), cfg.moe_config()
    h = model.embed[tokens]
    for i, blk in enumerate(model.blocks):
        if blk.kind is LayerKind.ATTENTION:
            step = gqa_decode_step if decode else gqa_prefill
            h, session.caches[i] = step(attn_cfg, blk.params, h, session.caches[i], norm_gain=blk.norm, eps=eps)
        elif blk.kind is LayerKind.MAMBA:
            step = ssd_layer_decode if decode else ssd_layer_forward
            h, session.states[i] = step(ssd_cfg, blk.params, h, session.states[i], norm_gain=blk.norm, eps=eps)
        else:
            h = h + moe_forward(moe_cfg, blk.params, rmsnorm(h, blk.norm, eps))
        assert h.shape == (tokens.size, cfg.d_model)
    session.position += tokens.size
    return rmsnorm(h, model.final_norm, eps) @ model.head


def prefill(model: Model, tokens, session: Session | None = None):
    """Run the full prompt through the chunked-scan / full-attention path.

    Returns per-position next-token logits (T, vocab) and a session ready to decode.
    """
    tokens = _check_tokens(model, tokens)
    session = session or Session.new(model)
    if session.position + tokens.size > model.max_context:
        raise CapacityError(f"{session.position + tokens.size} positions exceed context {model.max_context}")
    return _run(model, tokens, session, decode=False), session


def decode_step(model: Model, session: Session, token: int) -> np.ndarray:
    """Advance ``session`` by one token through the cached decode path."""
    tokens = _check_tokens(model, [token])
    if session.position + 1 > model.max_context:
        raise CapacityError(f"context of {model.max_context} positions is full")
    return _run(model, tokens, session, decode=True)[0]


def sample_token(logits: np.ndarray, temperature: float | None, rng: np.random.Generator) -> int:
    if not temperature:
        return int(np.argmax(logits))  # first maximum wins ties
    probs = softmax_lastdim(np.asarray(logits, dtype=np.float64) / temperature)
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(probs) - 1))


def generate(model: Model, prompt, max_new: int, *, temperature: float | None = None, seed: int = 0) -> list[int]:
    """Greedy when ``temperature`` is falsy, otherwise seeded temperature sampling."""
    if max_new < 1:
        raise InputError("max_new must be >= 1")
    rng = np.random.default_rng(seed)
    logits, session = prefill(model, prompt)
    out = []
    nxt = sample_token(logits[-1], temperature, rng)
    for i in range(max_new):
        out.append(nxt)
        if i + 1 < max_new:
            nxt = sample_token(decode_step(model, session, nxt), temperature, rng)
    return out


def encode_text(text: str, bos: bool = True) -> list[int]:
    return ([BOS] if bos else []) + list(text.encode("utf-8"))


def decode_text(tokens) -> str:
    return bytes(t for t in tokens if t < 256).decode("utf-8", errors="replace")
