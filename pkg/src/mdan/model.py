"""Two-branch hierarchical emotion classifier.

The bottom-up branch is a small strided CNN producing C2..C5 (each stage
halves the spatial extent) and a global classifier on GAP(C5) whose
deepest-level distribution is summed up the tree for the coarser levels.
The top-down branch is a feature pyramid: every affective level is read
off the pyramid level assigned to it by the mapping table, optionally
refined by cross-channel attention (MHCCA) and a level-dependent class
activation map (L-CAM), then classified locally.  Local and global
distributions are mixed per level with weight ``alpha`` on the local one.

Parameter manifest (checkpoint tensor names, in this order):

``backbone.conv2`` .. ``backbone.conv5``
    3×3 stride-2 filters, ``widths[i] × c_in × 3 × 3``.
``lateral.<ls>``
    1×1 lateral filters ``d_F × c_ls × 1 × 1``, descending pyramid level,
    only for levels that use a lateral projection.
``mhcca.<ls>.q`` / ``.k`` / ``.v`` / ``.o``
    1×1 attention filters; ``k``/``v`` only with K/V projections enabled.
``local.<la>``
    local classifier ``|C_la| × d_F``.
``global``
    global classifier ``|C_depth| × c5``.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, fields, replace
from typing import Mapping

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DataError, ShapeError
from .hierarchy import EmotionHierarchy
from .tensor import Tensor

FLAGS = ("mhcca_on", "kv_projections_on", "upsample_add_on", "lcam_on", "lcam_mean_on", "lcam_max_on")

# The eight rows of the ablation grid: Base / MHCCA / K,V / UpsampleAdd / Mean / Max.
ABLATION_ROWS = {
    "base": dict(mhcca_on=False, kv_projections_on=False, upsample_add_on=True, lcam_on=False),
    "mhcca_kv": dict(mhcca_on=True, kv_projections_on=True, upsample_add_on=True, lcam_on=False),
    "mhcca": dict(mhcca_on=True, kv_projections_on=False, upsample_add_on=True, lcam_on=False),
    "mhcca_no_upsample_add": dict(mhcca_on=True, kv_projections_on=False, upsample_add_on=False, lcam_on=False),
    "mhcca_mean": dict(mhcca_on=True, upsample_add_on=True, lcam_on=True, lcam_mean_on=True, lcam_max_on=False),
    "mhcca_max": dict(mhcca_on=True, upsample_add_on=True, lcam_on=True, lcam_mean_on=False, lcam_max_on=True),
    "full": dict(mhcca_on=True, upsample_add_on=True, lcam_on=True, lcam_mean_on=True, lcam_max_on=True),
    "lcam_only": dict(mhcca_on=False, upsample_add_on=True, lcam_on=True, lcam_mean_on=True, lcam_max_on=True),
}

MAPPING_PRESETS = ("e", "f")
PYRAMID_LEVELS = (2, 3, 4, 5)


def parse_mapping(text: str) -> dict[int, int]:
    """Parse ``"1:4,2:3"`` into ``{1: 4, 2: 3}``."""
    try:
        pairs = [p.split(":") for p in text.replace(" ", "").split(",") if p]
        return {int(a): int(b) for a, b in pairs}
    except ValueError:
        raise ConfigError(f"mapping {text!r} is not of the form 'la:ls,la:ls'") from None


def apply_ablation(config: "MdanConfig", spec: str | None) -> "MdanConfig":
    """Apply a comma list of ablation row names, ``flag`` (switch off) or ``flag=0/1`` items."""
    if not spec:
        return config
    for item in (s.strip() for s in spec.split(",")):
        if not item:
            continue
        if item in ABLATION_ROWS:
            config = config.with_flags(**ABLATION_ROWS[item])
            continue
        name, sep, value = item.partition("=")
        if name not in FLAGS:
            raise ConfigError(f"unknown ablation {item!r}; use a row ({', '.join(ABLATION_ROWS)}) or a flag "
                              f"({', '.join(FLAGS)})")
        if sep and value not in ("0", "1"):
            raise ConfigError(f"ablation flag value must be 0 or 1, got {item!r}")
        config = config.with_flags(**{name: sep != "" and value == "1"})
    return config


def format_mapping(mapping: Mapping[int, int]) -> str:
    return ",".join(f"{a}:{b}" for a, b in sorted(mapping.items()))


@dataclass
class MdanConfig:
    """Architecture choices.

    ``mapping`` is a preset name (``"e"``: level ``la`` read at pyramid level
    ``5 - la``; ``"f"``: the same levels in reverse order) or an explicit
    ``{la: ls}`` table.  ``heads`` maps a pyramid level to its MHCCA head
    count; levels not listed use one head.
    """

    input_size: int = 64
    widths: tuple[int, ...] = (8, 16, 32, 64)
    pyramid_width: int = 32
    mapping: str | dict = "e"
    fusion: bool = True
    heads: dict = field(default_factory=lambda: {4: 2, 3: 2, 2: 4})
    alpha: float = 0.7
    mhcca_on: bool = True
    kv_projections_on: bool = False
    upsample_add_on: bool = True
    lcam_on: bool = True
    lcam_mean_on: bool = True
    lcam_max_on: bool = True

    def with_flags(self, **flags) -> "MdanConfig":
        unknown = set(flags) - set(FLAGS)
        if unknown:
            raise ConfigError(f"unknown ablation flag(s): {sorted(unknown)}")
        return replace(self, **flags)

    def resolve_mapping(self, depth: int) -> dict[int, int]:
        if self.mapping == "e":
            return {la: 5 - la for la in range(1, depth + 1)}
        if self.mapping == "f":
            levels = [5 - la for la in range(1, depth + 1)]
            return {la: ls for la, ls in zip(range(1, depth + 1), reversed(levels))}
        if isinstance(self.mapping, str):
            return parse_mapping(self.mapping)
        return {int(a): int(b) for a, b in dict(self.mapping).items()}

    def side(self, level: int) -> int:
        """Spatial side of C_level."""
        return self.input_size >> (level - 1)

    def head_dims(self) -> dict[int, int]:
        """Flattened spatial size per head at each level listed in ``heads``."""
        return {lv: self.side(lv) ** 2 // h for lv, h in sorted(self.heads.items())}

    def validate(self, depth: int) -> dict[int, int]:
        """Check the config against a hierarchy depth; returns the resolved mapping."""
        if self.input_size <= 0 or self.input_size % 16:
            raise ConfigError(f"input size must be a positive multiple of 16, got {self.input_size}")
        if len(self.widths) != 4 or min(self.widths) <= 0 or self.pyramid_width <= 0:
            raise ConfigError(f"need four positive backbone widths and a positive pyramid width, got "
                              f"{self.widths} / {self.pyramid_width}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if depth > len(PYRAMID_LEVELS):
            raise ConfigError(f"hierarchy depth {depth} exceeds the {len(PYRAMID_LEVELS)} available pyramid levels")
        mapping = self.resolve_mapping(depth)
        if sorted(mapping) != list(range(1, depth + 1)):
            raise ConfigError(f"mapping {format_mapping(mapping)} must cover affective levels 1..{depth}")
        if any(ls not in PYRAMID_LEVELS for ls in mapping.values()):
            raise ConfigError(f"mapping {format_mapping(mapping)} uses a pyramid level outside 2..5")
        if len(set(mapping.values())) != len(mapping):
            raise ConfigError(f"mapping {format_mapping(mapping)} is not injective")
        for lv, h in self.heads.items():
            if lv not in PYRAMID_LEVELS or h < 1:
                raise ConfigError(f"bad head entry {lv}: {h}")
            if self.side(lv) ** 2 % h:
                raise ConfigError(f"{h} heads do not divide the {self.side(lv)}×{self.side(lv)} map at level {lv}")
        if self.mhcca_on and not self.fusion:
            raise ConfigError("MHCCA attends across pyramid levels and needs feature fusion")
        if self.lcam_on and not (self.lcam_mean_on or self.lcam_max_on):
            raise ConfigError("L-CAM needs at least one of mean / max pooling")
        return mapping

    def to_text(self) -> str:
        rows = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "widths":
                v = ",".join(map(str, v))
            elif f.name == "heads":
                v = format_mapping(v)
            elif f.name == "mapping":
                v = v if isinstance(v, str) else format_mapping(v)
            elif isinstance(v, bool):
                v = int(v)
            elif isinstance(v, float):
                v = repr(v)
            rows.append(f"{f.name}={v}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MdanConfig":
        kv = _parse_kv(text)
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            v = kv[f.name]
            if f.name == "widths":
                kwargs[f.name] = tuple(int(x) for x in v.split(","))
            elif f.name == "heads":
                kwargs[f.name] = parse_mapping(v)
            elif f.name == "mapping":
                kwargs[f.name] = v if v in MAPPING_PRESETS else parse_mapping(v)
            elif f.name == "alpha":
                kwargs[f.name] = float(v)
            elif f.name in ("input_size", "pyramid_width"):
                kwargs[f.name] = int(v)
            else:
                kwargs[f.name] = v not in ("0", "false", "False")
        return cls(**kwargs)


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(f"config line {line!r} is not key=value")
            out[key.strip()] = value.strip()
    return out


# --------------------------------------------------------------------------
# stage planning


@dataclass(frozen=True)
class Stage:
    level: int  # pyramid level l_s
    affective: int | None  # affective level read here, if any
    lateral: bool
    attend: bool
    upsample_add: bool
    lcam: bool


def plan_stages(config: MdanConfig, depth: int) -> list[Stage]:
    """Top-down stages in execution order for a validated config."""
    mapping = config.validate(depth)
    at = {ls: la for la, ls in mapping.items()}
    stages = []
    if not config.fusion:
        for la in sorted(mapping):
            ls = mapping[la]
            stages.append(Stage(ls, la, True, False, False, config.lcam_on and la >= 2))
        return stages
    for ls in range(5, min(mapping.values()) - 1, -1):
        la = at.get(ls)
        lcam = config.lcam_on and la is not None and la >= 2
        if ls == 5:
            stages.append(Stage(5, la, True, False, False, lcam))
        elif la is not None and la >= 2:
            stages.append(Stage(ls, la, not config.mhcca_on, config.mhcca_on, config.upsample_add_on, lcam))
        else:
            stages.append(Stage(ls, la, True, False, True, False))
    return stages


# --------------------------------------------------------------------------
# parameters


def param_shapes(config: MdanConfig, hierarchy: EmotionHierarchy) -> dict[str, tuple[int, ...]]:
    """Ordered manifest of parameter names and shapes for a config."""
    d = config.pyramid_width
    widths = config.widths
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 3
    for lv, c in zip(PYRAMID_LEVELS, widths):
        shapes[f"backbone.conv{lv}"] = (c, c_in, 3, 3)
        c_in = c
    stages = plan_stages(config, hierarchy.depth)
    for st in stages:
        if st.lateral:
            shapes[f"lateral.{st.level}"] = (d, widths[st.level - 2], 1, 1)
    for st in stages:
        if st.attend:
            c = widths[st.level - 2]
            shapes[f"mhcca.{st.level}.q"] = (d, d, 1, 1)
            if config.kv_projections_on:
                shapes[f"mhcca.{st.level}.k"] = (c, c, 1, 1)
                shapes[f"mhcca.{st.level}.v"] = (c, c, 1, 1)
            shapes[f"mhcca.{st.level}.o"] = (d, d, 1, 1)
    for la, k in enumerate(hierarchy.level_sizes, start=1):
        shapes[f"local.{la}"] = (k, d)
    shapes["global"] = (hierarchy.level_sizes[-1], widths[3])
    return shapes


def init_params(config: MdanConfig, hierarchy: EmotionHierarchy, seed: int = 0,
                zero: bool = False) -> dict[str, Tensor]:
    """Glorot-uniform initialisation, b = sqrt(6 / (fan_in + fan_out))."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, hierarchy).items():
        if zero:
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
            continue
        rf = int(np.prod(shape[2:])) if len(shape) == 4 else 1
        params[name] = T.glorot_uniform(shape, rng, fan_in=shape[1] * rf, fan_out=shape[0] * rf)
    return params


# --------------------------------------------------------------------------
# building blocks


@dataclass
class FeaturePyramid:
    bottom_up: dict[int, Tensor]
    top_down: dict[int, Tensor] = field(default_factory=dict)


def backbone_forward(image, params: Mapping[str, Tensor]) -> FeaturePyramid:
    """Four conv3×3 stride-2 + ReLU stages; C2..C5 at 1/2 .. 1/16 of the input side."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.shape[-1] % 16 or x.shape[-2] % 16:
        raise ShapeError(f"input side must be divisible by 16, got {x.shape[-2:]}")
    maps = {}
    for lv in PYRAMID_LEVELS:
        x = T.relu(T.conv2d(x, params[f"backbone.conv{lv}"], stride=2, pad=1))
        maps[lv] = x
    return FeaturePyramid(maps)


def fpn_fuse(c_map, f_upper, lateral) -> Tensor:
    """``Conv1x1(c_map) + Upsample2x(f_upper)``; with ``f_upper=None`` only the lateral term."""
    c_map = c_map if isinstance(c_map, Tensor) else Tensor(c_map)
    lateral = lateral if isinstance(lateral, Tensor) else Tensor(lateral)
    if lateral.shape[1] != c_map.shape[-3]:
        raise ShapeError(f"lateral filter {lateral.shape} does not accept {c_map.shape[-3]} channels")
    lat = T.conv2d(c_map, lateral)
    if f_upper is None:
        return lat
    up = T.upsample_bilinear_2x(f_upper)
    if up.shape != lat.shape:
        raise ShapeError(f"upsampled top-down map {up.shape} does not match lateral map {lat.shape}")
    return T.add(lat, up)


def _batch4(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def mhcca(f_upper, c_map, q_filter, o_filter, heads: int, k_filter=None, v_filter=None):
    """Multi-head cross-channel attention of a coarse top-down map over the next finer C map.

    ``f_upper`` (d_F × H × W) is bilinearly upsampled to C's extent, projected
    by ``q_filter``; both maps are flattened spatially and the spatial axis is
    cut into ``heads`` contiguous segments of length d.  Per head the
    attention is ``softmax(Q Cᵀ / √d)`` over C's channels, applied to C.
    Heads are stitched back along the spatial axis and projected by
    ``o_filter``.  Returns the d_F × 2H × 2W output and the attention
    weights as an array of shape (N, heads, d_F, C_channels).
    """
    f_upper = f_upper if isinstance(f_upper, Tensor) else Tensor(f_upper)
    c_map = c_map if isinstance(c_map, Tensor) else Tensor(c_map)
    f4, squeeze = _batch4(f_upper)
    c4, _ = _batch4(c_map)
    n, d_f = f4.shape[:2]
    _, c_ch, h2, w2 = c4.shape
    if c4.shape[0] != n:
        raise ShapeError(f"batch sizes differ: {f4.shape} vs {c4.shape}")
    aligned = T.upsample_bilinear_2x(f4)
    if aligned.shape[2:] != (h2, w2):
        raise ShapeError(f"top-down map {f4.shape} is not 2× coarser than {c4.shape}")
    s = h2 * w2
    if heads < 1 or s % heads:
        raise ConfigError(f"{heads} heads do not divide the flattened spatial size {s}")
    d = s // heads
    q = T.conv2d(aligned, q_filter)
    key = T.conv2d(c4, k_filter) if k_filter is not None else c4
    val = T.conv2d(c4, v_filter) if v_filter is not None else c4
    qh = T.permute(T.reshape(q, (n, d_f, heads, d)), (0, 2, 1, 3))
    kh = T.permute(T.reshape(key, (n, c_ch, heads, d)), (0, 2, 3, 1))
    vh = T.permute(T.reshape(val, (n, c_ch, heads, d)), (0, 2, 1, 3))
    attn = T.softmax_lastdim(T.scale(T.matmul(qh, kh), 1.0 / math.sqrt(d)))
    out = T.matmul(attn, vh)
    out = T.reshape(T.permute(out, (0, 2, 1, 3)), (n, d_f, h2, w2))
    out = T.conv2d(out, o_filter)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out, attn.data


def compute_cam(f_map, w_k) -> Tensor:
    """Class activation map: per-pixel ``Σ_c w_k[c] · F[c]``.

    ``w_k`` may be one weight row (→ H × W) or a K × d_F matrix (→ K × H × W,
    batched input → N × K × H × W).
    """
    f_map = f_map if isinstance(f_map, Tensor) else Tensor(f_map)
    w_k = w_k if isinstance(w_k, Tensor) else Tensor(w_k)
    single = w_k.ndim == 1
    if w_k.shape[-1] != f_map.shape[-3]:
        raise ShapeError(f"weights {w_k.shape} do not match {f_map.shape[-3]} channels")
    rows = 1 if single else w_k.shape[0]
    cam = T.conv2d(f_map, T.reshape(w_k, (rows, w_k.shape[-1], 1, 1)))
    if single:
        cam = T.reshape(cam, cam.shape[:-3] + cam.shape[-2:])
    return cam


def lcam_fuse(cams, mask=None, use_mean: bool = True, use_max: bool = True) -> Tensor:
    """Fuse child CAMs: pixelwise mean over children plus max over children, min-max normalised.

    ``cams`` is either a list of H × W maps (all taken as children) or an
    N × K × H × W stack with an N × K boolean ``mask`` selecting each
    sample's children.
    """
    if not (use_mean or use_max):
        raise ConfigError("L-CAM fusion needs mean and/or max pooling")
    single = isinstance(cams, (list, tuple))
    if single:
        if not cams:
            raise ShapeError("L-CAM fusion needs at least one CAM")
        stack = [c.data if isinstance(c, Tensor) else np.asarray(c, dtype=np.float64) for c in cams]
        if all(not isinstance(c, Tensor) for c in cams):
            cams = Tensor(np.stack(stack)[None])
        else:
            cams = T.reshape(T.concat_lastdim([T.reshape(c, (1, -1)) for c in cams]),
                             (1, len(stack)) + stack[0].shape)
        mask = np.ones((1, len(stack)), dtype=bool)
    terms = []
    if use_mean:
        terms.append(T.masked_channel_mean(cams, mask))
    if use_max:
        terms.append(T.masked_channel_max(cams, mask))
    fused = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    fused = T.minmax_normalize(fused)
    if single:
        fused = T.reshape(fused, fused.shape[2:])
    return fused


def lcam_apply(m_map, x) -> Tensor:
    """``(1 + M) ⊙ X`` with M broadcast over channels."""
    m_map = m_map if isinstance(m_map, Tensor) else Tensor(m_map)
    x = x if isinstance(x, Tensor) else Tensor(x)
    if m_map.ndim == x.ndim - 1:
        m_map = T.reshape(m_map, m_map.shape[:-2] + (1,) + m_map.shape[-2:])
    if m_map.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"attention map {m_map.shape} does not match features {x.shape}")
    return T.mul(T.add(m_map, 1.0), x)


def _classify(f_map, w) -> Tensor:
    f_map = f_map if isinstance(f_map, Tensor) else Tensor(f_map)
    w = w if isinstance(w, Tensor) else Tensor(w)
    pooled = T.global_avg_pool(f_map)
    single = pooled.ndim == 1
    if single:
        pooled = T.reshape(pooled, (1, -1))
    if w.shape[1] != pooled.shape[1]:
        raise ShapeError(f"classifier {w.shape} does not accept {pooled.shape[1]} features")
    p = T.softmax_lastdim(T.matmul(pooled, T.transpose2d(w)))
    return T.reshape(p, (p.shape[1],)) if single else p


def local_predict(f_map, w) -> Tensor:
    """``softmax(w · GAP(F))`` with a bias-free classifier."""
    return _classify(f_map, w)


def global_predict(c5, g) -> Tensor:
    """``softmax(g · GAP(C5))`` at the deepest affective level."""
    return _classify(c5, g)


def fuse_predictions(local, global_, alpha: float):
    """Per level ``alpha · P_L + (1 - alpha) · P_G``; works on tensors or arrays."""
    if len(local) != len(global_):
        raise ShapeError(f"{len(local)} local vs {len(global_)} global levels")
    out = []
    for pl, pg in zip(local, global_):
        if isinstance(pl, Tensor) or isinstance(pg, Tensor):
            out.append(T.add(T.scale(pl, alpha), T.scale(pg, 1.0 - alpha)))
        else:
            out.append(alpha * np.asarray(pl) + (1.0 - alpha) * np.asarray(pg))
    return out


# --------------------------------------------------------------------------
# full forward pass


@dataclass
class PredictionSet:
    """Per-level local, global and fused distributions, each N × |C_level|."""

    local: list[Tensor]
    global_: list[Tensor]
    overall: list[Tensor]

    def arrays(self, head: str) -> list[np.ndarray]:
        return [t.data if isinstance(t, Tensor) else t for t in getattr(self, _HEADS[head])]

    def argmax(self, head: str) -> np.ndarray:
        """N × depth matrix of per-level argmax labels (ties → lowest index)."""
        return np.stack([a.argmax(axis=-1) for a in self.arrays(head)], axis=-1)


_HEADS = {"L": "local", "G": "global_", "O": "overall"}


@dataclass
class AttentionArtifacts:
    """Inspection data from one forward pass, keyed by affective level."""

    attention: dict[int, np.ndarray] = field(default_factory=dict)
    fused: dict[int, np.ndarray] = field(default_factory=dict)
    cams: dict[int, np.ndarray] = field(default_factory=dict)
    children: dict[int, np.ndarray] = field(default_factory=dict)
    feature_shapes: dict[int, tuple[int, ...]] = field(default_factory=dict)
    trace: list[str] = field(default_factory=list)


def mdan_forward(images, params: Mapping[str, Tensor], config: MdanConfig,
                 hierarchy: EmotionHierarchy) -> tuple[PredictionSet, AttentionArtifacts]:
    """Run both branches on an N × 3 × H × W batch (or a single 3 × H × W image)."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (config.input_size, config.input_size):
        raise ShapeError(f"expected N×3×{config.input_size}×{config.input_size} images, got {x.shape}")
    depth = hierarchy.depth
    stages = plan_stages(config, depth)
    pyr = backbone_forward(x, params)
    c = pyr.bottom_up
    art = AttentionArtifacts()
    local: dict[int, Tensor] = {}
    fmap = pyr.top_down

    # The global branch runs first: its coarse-level prediction picks the
    # L-CAM children when the mapping reads the parent level further down
    # the pyramid, so its local prediction does not exist yet.
    p_g = [None] * depth
    p_g[-1] = global_predict(c[5], params["global"])
    for la in range(depth, 1, -1):
        p_g[la - 2] = T.matmul(p_g[la - 1], T.Tensor(hierarchy.children_matrix(la).T))

    for st in stages:
        ls, la = st.level, st.affective
        upper = fmap.get(ls + 1) if config.fusion else None
        if st.attend:
            xs, attn = mhcca(
                upper, c[ls], params[f"mhcca.{ls}.q"], params[f"mhcca.{ls}.o"], config.heads.get(ls, 1),
                params.get(f"mhcca.{ls}.k"), params.get(f"mhcca.{ls}.v"),
            )
            art.attention[la] = attn
            art.trace.append(f"mhcca@{ls}")
        else:
            xs = T.conv2d(c[ls], params[f"lateral.{ls}"])
            art.trace.append(f"lateral@{ls}")
        if st.upsample_add and upper is not None:
            xs = T.add(xs, T.upsample_bilinear_2x(upper))
            art.trace.append(f"upsample_add@{ls}")
        if la is not None:
            w = params[f"local.{la}"]
            cams = compute_cam(xs, w)
            art.cams[la] = cams.data
            if la >= 2:
                parent = (local[la - 1] if la - 1 in local else p_g[la - 2]).data.argmax(axis=1)
                mask = hierarchy.parent_index(la)[None, :] == parent[:, None]
            else:
                mask = np.ones((x.shape[0], hierarchy.level_sizes[0]), dtype=bool)
            art.children[la] = mask
            if st.lcam:
                m = lcam_fuse(cams, mask, config.lcam_mean_on, config.lcam_max_on)
                art.fused[la] = m.data[:, 0]
                xs = lcam_apply(m, xs)
                art.trace.append(f"lcam@{ls}")
            local[la] = local_predict(xs, w)
        fmap[ls] = xs
        art.feature_shapes[ls] = xs.shape

    p_l = [local[la] for la in range(1, depth + 1)]
    return PredictionSet(p_l, p_g, fuse_predictions(p_l, p_g, config.alpha)), art


def joint_loss(predictions: PredictionSet, paths) -> Tensor:
    """Mean over levels of the cross-entropy of P_O against each level's labels."""
    paths = np.asarray(paths, dtype=np.int64)
    if paths.ndim == 1:
        paths = paths[None]
    depth = len(predictions.overall)
    if paths.shape[1] != depth:
        raise ShapeError(f"label paths have {paths.shape[1]} levels, predictions have {depth}")
    total = None
    for i, p in enumerate(predictions.overall):
        p2 = p if p.ndim == 2 else T.reshape(p, (1, -1))
        ce = T.cross_entropy(p2, paths[:, i])
        total = ce if total is None else T.add(total, ce)
    return T.scale(total, 1.0 / depth)


# --------------------------------------------------------------------------
# model bundle and checkpoints

CHECKPOINT_MAGIC = b"MDAN1"


class MdanModel:
    """Config, hierarchy and parameters bundled together."""

    def __init__(self, config: MdanConfig, hierarchy: EmotionHierarchy, params: dict[str, Tensor] | None = None,
                 seed: int = 0, normalization: tuple | None = None, zero_init: bool = False):
        config.validate(hierarchy.depth)
        self.config = config
        self.hierarchy = hierarchy
        self.seed = seed
        self.params = params if params is not None else init_params(config, hierarchy, seed, zero=zero_init)
        self.normalization = normalization
        expected = param_shapes(config, hierarchy)
        got = {k: v.shape for k, v in self.params.items()}
        if list(got) != list(expected) or got != expected:
            raise DataError("parameters do not match the manifest for this config and hierarchy")

    def forward(self, images) -> tuple[PredictionSet, AttentionArtifacts]:
        return mdan_forward(images, self.params, self.config, self.hierarchy)

    def loss(self, images, paths) -> Tensor:
        return joint_loss(self.forward(images)[0], paths)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def backbone_params(self) -> list[Tensor]:
        return [p for k, p in self.params.items() if k.startswith("backbone.")]

    def head_params(self) -> list[Tensor]:
        return [p for k, p in self.params.items() if not k.startswith("backbone.")]

    def header_text(self) -> str:
        lines = [self.config.to_text().rstrip("\n"), f"seed={self.seed}"]
        h = self.hierarchy
        lines.append("level_sizes=" + ",".join(map(str, h.level_sizes)))
        for lv in range(1, h.depth + 1):
            lines.append(f"classes.{lv}=" + ",".join(h.names(lv)))
        if self.normalization is not None:
            mean, std = self.normalization
            lines.append("norm_mean=" + ",".join(repr(float(v)) for v in mean))
            lines.append("norm_std=" + ",".join(repr(float(v)) for v in std))
        return "\n".join(lines) + "\n"

    def to_bytes(self) -> bytes:
        """``MDAN1`` | u32 header length | key=value header | u32 count | (u16 name length, name, TNSR1)*"""
        head = self.header_text().encode("utf-8")
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", len(head)))
        buf.write(head)
        buf.write(struct.pack("<I", len(self.params)))
        for name, p in self.params.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            T.write_tensor(buf, p)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, hierarchy: EmotionHierarchy) -> "MdanModel":
        fp = io.BytesIO(data)
        if fp.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise DataError("not an MDAN1 checkpoint")
        try:
            (n,) = struct.unpack("<I", fp.read(4))
            head = fp.read(n).decode("utf-8")
            kv = _parse_kv(head)
            sizes = tuple(int(v) for v in kv["level_sizes"].split(","))
            if sizes != hierarchy.level_sizes:
                raise DataError(f"checkpoint class counts {sizes} do not match hierarchy {hierarchy.level_sizes}")
            for lv in range(1, hierarchy.depth + 1):
                if kv.get(f"classes.{lv}", "").split(",") != hierarchy.names(lv):
                    raise DataError(f"checkpoint class names at level {lv} do not match the hierarchy")
            config = MdanConfig.from_text(head)
            norm = None
            if "norm_mean" in kv:
                norm = (tuple(float(v) for v in kv["norm_mean"].split(",")),
                        tuple(float(v) for v in kv["norm_std"].split(",")))
            (count,) = struct.unpack("<I", fp.read(4))
            params = {}
            for _ in range(count):
                (ln,) = struct.unpack("<H", fp.read(2))
                name = fp.read(ln).decode("utf-8")
                t = T.read_tensor(fp)
                params[name] = Tensor(t.data.copy(), requires_grad=True)
        except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"corrupt checkpoint: {exc}") from exc
        if fp.read(1):
            raise DataError("trailing bytes after checkpoint")
        return cls(config, hierarchy, params, seed=int(kv.get("seed", 0)), normalization=norm)
