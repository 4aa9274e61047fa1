"""Two-track sparse attention network, movement head and task heads."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encodings import (
    N_ATOM_TYPES,
    N_PAIR_TYPES,
    N_RESIDUE_TYPES,
    EdgeSet,
    FeatureConfig,
    Features,
)
from .structures import N_STANDARD

TRACKS = ("atom", "res")


class ConfigurationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class VabsNetConfig:
    n_layers: int = 12
    node_dim: int = 768
    edge_dim: int = 128
    ffn_dim: int = 768
    n_heads: int = 8
    k_atom: int = 30
    k_res: int = 30
    n_kernels: int = 16
    kernel_width: float = 16.0
    n_frequencies: int = 4
    max_seq_offset: int = 32
    external_dim: int = 1280
    torsion_hidden: int | None = None  # defaults to node_dim
    use_vector_encoder: bool = True
    use_global_frame: bool = True
    use_virtual_origin: bool = True
    use_external_embeddings: bool = True

    def __post_init__(self):
        if self.node_dim % self.n_heads:
            raise ConfigurationError(f"node_dim {self.node_dim} not divisible by n_heads {self.n_heads}")
        for name in ("n_layers", "node_dim", "edge_dim", "ffn_dim", "n_heads", "k_atom", "k_res"):
            if getattr(self, name) < (0 if name == "n_layers" else 1):
                raise ConfigurationError(f"{name} must be positive")

    @property
    def so3_invariant(self) -> bool:
        return not self.use_global_frame and not self.use_virtual_origin

    def with_so3_invariant(self) -> "VabsNetConfig":
        return replace(self, use_global_frame=False, use_virtual_origin=False)

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            self.n_kernels, self.kernel_width, self.n_frequencies, self.max_seq_offset, self.use_global_frame
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VabsNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_specs(cfg: VabsNetConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Name -> (shape, initialiser) for every parameter the config needs."""
    d, e, f = cfg.node_dim, cfg.edge_dim, cfg.ffn_dim
    th = cfg.torsion_hidden or d
    s: dict[str, tuple[tuple[int, ...], str]] = {
        "embed.atom": ((N_ATOM_TYPES, d), "normal"),
        "embed.residue": ((N_RESIDUE_TYPES, d), "normal"),
        "edge.alpha": ((N_PAIR_TYPES,), "ones"),
        "edge.beta": ((N_PAIR_TYPES,), "zeros"),
        "edge.wg": ((cfg.n_kernels, e), "glorot"),
        "edge.pos": ((2 * cfg.max_seq_offset + 2, e), "normal"),
    }
    if cfg.use_external_embeddings:
        s["embed.external"] = ((cfg.external_dim, d), "glorot")
    if cfg.use_vector_encoder:
        s["edge.wf"] = ((12 * cfg.n_frequencies, e), "glorot")
    for i in range(cfg.n_layers):
        for track in TRACKS:
            pre = f"block.{i}.{track}"
            for w in ("wq", "wk", "wv", "wo"):
                s[f"{pre}.sam.{w}"] = ((d, d), "glorot")
            s[f"{pre}.sam.wb"] = ((e, cfg.n_heads), "glorot")
            for ln in ("ln1", "ln2"):
                s[f"{pre}.{ln}.g"] = ((d,), "ones")
                s[f"{pre}.{ln}.b"] = ((d,), "zeros")
            s[f"{pre}.ffn.w1"] = ((d, f), "glorot")
            s[f"{pre}.ffn.b1"] = ((f,), "zeros")
            s[f"{pre}.ffn.w2"] = ((f, d), "glorot")
            s[f"{pre}.ffn.b2"] = ((d,), "zeros")
    s["final_ln.g"] = ((d,), "ones")
    s["final_ln.b"] = ((d,), "zeros")
    for w in ("wq", "wk", "wv"):
        s[f"move.{w}"] = ((d, d), "glorot")
    s["move.wb"] = ((e, cfg.n_heads), "glorot")
    for axis in "xyz":
        s[f"move.p{axis}"] = ((d, 1), "zeros")
    s["head.restype.w"] = ((d, N_STANDARD), "zeros")
    s["head.restype.b"] = ((N_STANDARD,), "zeros")
    s["head.torsion.w1"] = ((d, th), "glorot")
    s["head.torsion.b1"] = ((th,), "zeros")
    s["head.torsion.w2"] = ((th, 14), "glorot")  # unit-normalised output is singular at zero
    s["head.torsion.b2"] = ((14,), "zeros")
    for head in ("sasa", "nodeclass"):
        s[f"head.{head}.w"] = ((d, 1), "zeros")
        s[f"head.{head}.b"] = ((1,), "zeros")
    return s


def init_params(cfg: VabsNetConfig, seed: int = 0) -> dict[str, Tensor]:
    """Glorot-uniform projections, N(0, 1/fan) embedding tables; biases, head
    outputs and the per-axis movement projections start at zero."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, (shape, kind) in param_specs(cfg).items():
        if kind == "glorot":
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        elif kind == "normal":
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        out[name] = Tensor(arr, requires_grad=True, name=name)
    return out


def expected_shapes(cfg: VabsNetConfig) -> dict[str, tuple[int, ...]]:
    return {k: shape for k, (shape, _) in param_specs(cfg).items()}


@dataclass
class AttentionTrace:
    """Attention weights recorded during a forward pass, for inspection."""

    entries: list[tuple[str, np.ndarray, np.ndarray, int]] = field(default_factory=list)

    def add(self, tag: str, weights: Tensor, segments: np.ndarray, n_segments: int) -> None:
        self.entries.append((tag, weights.data.copy(), segments, n_segments))

    def max_row_error(self) -> float:
        worst = 0.0
        for _, w, seg, n in self.entries:
            sums = np.zeros((n,) + w.shape[1:])
            np.add.at(sums, seg, w)
            present = np.bincount(seg, minlength=n) > 0
            worst = max(worst, float(np.abs(sums[present] - 1.0).max(initial=0.0)))
        return worst


@dataclass
class ModelOutput:
    nodes: Tensor  # (n_nodes, d)
    biases: dict[str, Tensor] = field(default_factory=dict)  # attention bias e W_B per sublayer


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)


def _kernel_features(params: dict[str, Tensor], edges: EdgeSet, cfg: VabsNetConfig) -> Tensor:
    kp = cfg.feature_config().kernels
    z = ad.add(ad.mul(ad.gather(params["edge.alpha"], edges.pair_type), edges.distance),
               ad.gather(params["edge.beta"], edges.pair_type))
    diff = ad.sub(ad.reshape(z, (len(edges), 1)), kp.mu)
    return ad.mul(ad.exp(ad.mul(ad.square(diff), -0.5 / kp.sigma**2)), 1.0 / (kp.sigma * math.sqrt(2 * math.pi)))


def edge_representation(params: dict[str, Tensor], edges: EdgeSet, cfg: VabsNetConfig) -> Tensor:
    """``W_g g + W_f f + pos(bucket)`` with learnable per-pair affine distance scaling."""
    g = _kernel_features(params, edges, cfg)
    out = ad.add(ad.matmul(g, params["edge.wg"]), ad.gather(params["edge.pos"], edges.seq_bucket))
    if cfg.use_vector_encoder:
        out = ad.add(out, ad.matmul(Tensor(edges.direction), params["edge.wf"]))
    return out


def attention_weights(
    x: Tensor, e: Tensor | None, src: np.ndarray, dst: np.ndarray, wq: Tensor, wk: Tensor, wb: Tensor, n_heads: int,
    bias: Tensor | None = None,
) -> Tensor:
    """Per-edge, per-head softmax over each destination's in-edges; ``bias`` may carry a precomputed ``e W_B``."""
    n, d = x.shape
    dh = d // n_heads
    q = ad.reshape(ad.matmul(x, wq), (n, n_heads, dh))
    k = ad.reshape(ad.matmul(x, wk), (n, n_heads, dh))
    scores = ad.edge_dot(q, k, dst, src)
    logits = ad.add(ad.mul(scores, 1.0 / math.sqrt(dh)), ad.matmul(e, wb) if bias is None else bias)
    return ad.segment_softmax(logits, dst, n)


def sam_layer(
    x: Tensor, e: Tensor | None, src: np.ndarray, dst: np.ndarray, params: dict[str, Tensor], prefix: str, n_heads: int,
    trace: AttentionTrace | None = None, bias: Tensor | None = None,
) -> Tensor:
    """Pre-LN sparse attention sublayer followed by a GELU feed-forward sublayer.

    ``src``/``dst`` index rows of ``x``; every row must have an in-edge.
    """
    n, d = x.shape
    counts = np.bincount(dst, minlength=n)
    if n and counts.min() == 0:
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ad.ContractError(f"{prefix}: node {missing} has no in-neighbours")
    h = ad.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    a = attention_weights(h, e, src, dst, params[f"{prefix}.sam.wq"], params[f"{prefix}.sam.wk"],
                          params[f"{prefix}.sam.wb"], n_heads, bias)
    if trace is not None:
        trace.add(prefix, a, dst, n)
    dh = d // n_heads
    v = ad.reshape(ad.matmul(h, params[f"{prefix}.sam.wv"]), (n, n_heads, dh))
    attn = ad.reshape(ad.segment_attend(a, v, src, dst, n), (n, d))
    x = ad.add(x, ad.matmul(attn, params[f"{prefix}.sam.wo"]))
    h = ad.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    ff = _linear(ad.gelu(_linear(h, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"])),
                 params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])
    return ad.add(x, ff)


def two_track_block(
    x: Tensor, features: Features, params: dict[str, Tensor], layer: int, n_heads: int,
    biases: dict[str, Tensor], trace: AttentionTrace | None = None, between=None,
) -> Tensor:
    """Atom-track sublayer over every node, then residue-track sublayer on the CA (and origin) rows only.

    ``between`` is an optional hook applied to the node store between the two
    tracks; it exists for probing the shared-storage coupling.
    """
    ae, re = features.atom_edges, features.res_edges
    pa, pr = f"block.{layer}.atom", f"block.{layer}.res"
    x = sam_layer(x, None, ae.src, ae.dst, params, pa, n_heads, trace, biases[pa])
    if between is not None:
        x = between(x)
    rows = ad.gather(x, features.res_nodes)
    rows = sam_layer(rows, None, re.local_src, re.local_dst, params, pr, n_heads, trace, biases[pr])
    return ad.index_update(x, features.res_nodes, rows)


def check_compatible(cfg: VabsNetConfig, features: Features) -> None:
    fc = features.config
    if features.has_origin != cfg.use_virtual_origin:
        raise ConfigurationError(
            f"features {'have' if features.has_origin else 'lack'} an origin node but use_virtual_origin="
            f"{cfg.use_virtual_origin}"
        )
    if fc.use_global_frame != cfg.use_global_frame:
        raise ConfigurationError("featurization use_global_frame differs from the model config")
    if (fc.n_kernels, fc.kernel_width, fc.n_frequencies, fc.max_seq_offset) != (
        cfg.n_kernels, cfg.kernel_width, cfg.n_frequencies, cfg.max_seq_offset
    ):
        raise ConfigurationError("featurization kernel/frequency/offset settings differ from the model config")
    if features.external is not None and cfg.use_external_embeddings and features.external.shape[1] != cfg.external_dim:
        raise ConfigurationError(
            f"external embedding dim {features.external.shape[1]} != configured {cfg.external_dim}"
        )


def embed_nodes(params: dict[str, Tensor], features: Features, cfg: VabsNetConfig) -> Tensor:
    x = ad.add(ad.gather(params["embed.atom"], features.atom_type),
               ad.gather(params["embed.residue"], features.residue_type))
    if cfg.use_external_embeddings and features.external is not None:
        x = ad.add(x, ad.matmul(Tensor(features.external), params["embed.external"]))
    return x


def forward(
    features: Features, cfg: VabsNetConfig, params: dict[str, Tensor], trace: AttentionTrace | None = None,
    between=None,
) -> ModelOutput:
    check_compatible(cfg, features)
    biases = edge_biases(params, features, cfg)
    x = embed_nodes(params, features, cfg)
    for i in range(cfg.n_layers):
        x = two_track_block(x, features, params, i, cfg.n_heads, biases, trace,
                            None if between is None else (lambda t, i=i: between(i, t)))
    x = ad.layer_norm(x, params["final_ln.g"], params["final_ln.b"])
    return ModelOutput(x, biases)


def edge_biases(params: dict[str, Tensor], features: Features, cfg: VabsNetConfig) -> dict[str, Tensor]:
    """``e W_B`` for every attention sublayer, without forming the edge representation ``e``.

    ``e`` is linear in the kernel, offset and direction features, so each of its
    weight matrices is multiplied into the stacked ``W_B`` of a track first and
    the edge-sized products are only ``n_heads`` wide.
    """
    h = cfg.n_heads
    out = {}
    for track, edges in (("atom", features.atom_edges), ("res", features.res_edges)):
        names = [f"block.{i}.{track}" for i in range(cfg.n_layers)]
        weights = [params[f"{n}.sam.wb"] for n in names]
        if track == "atom":
            names.append("move")
            weights.append(params["move.wb"])
        if not names:
            continue
        wb = ad.concat(weights, axis=1)
        stacked = ad.add(ad.matmul(_kernel_features(params, edges, cfg), ad.matmul(params["edge.wg"], wb)),
                         ad.gather(ad.matmul(params["edge.pos"], wb), edges.seq_bucket))
        if cfg.use_vector_encoder:
            stacked = ad.add(stacked, ad.matmul(Tensor(edges.direction), ad.matmul(params["edge.wf"], wb)))
        for j, name in enumerate(names):
            out[name] = ad.getitem(stacked, (slice(None), slice(j * h, (j + 1) * h)))
    return out


def movement_head(
    out: ModelOutput, features: Features, params: dict[str, Tensor], cfg: VabsNetConfig,
    trace: AttentionTrace | None = None,
) -> Tensor:
    """Predicted coordinates ``r^N + [W_px b^x, W_py b^y, W_pz b^z]`` for every node.

    ``b^c_i = sum_j a_ij (r_i - r_j)_c W'_V x_j`` over atom-track edges j -> i,
    with dedicated multi-head attention weights ``a``. The projection ``W_pc``
    is linear, so it is applied to each head's slice of ``W'_V x_j`` before
    the sum over edges; the result is identical to projecting ``b^c`` but never
    materialises the per-edge d-vectors.
    """
    x = out.nodes
    n, d = x.shape
    h = cfg.n_heads
    ae = features.atom_edges
    a = attention_weights(x, None, ae.src, ae.dst, params["move.wq"], params["move.wk"],
                          params["move.wb"], h, out.biases["move"])
    if trace is not None:
        trace.add("move", a, ae.dst, n)
    v = ad.reshape(ad.matmul(x, params["move.wv"]), (n, h, d // h))
    proj = ad.concat([ad.reshape(params[f"move.p{axis}"], (1, h, d // h)) for axis in "xyz"], axis=0)
    # s[j, h, c] = <head-h slice of W'_V x_j, head-h slice of W_pc>
    s = ad.sum_(ad.mul(ad.reshape(v, (n, 1, h, d // h)), ad.reshape(proj, (1, 3, h, d // h))), axis=3)
    rel = features.coords[ae.dst] - features.coords[ae.src]  # (E, 3)
    per_edge = ad.sum_(ad.mul(ad.mul(ad.gather(s, ae.src), ad.reshape(a, (len(ae), 1, h))), rel[:, :, None]), axis=2)
    return ad.add(ad.segment_sum(per_edge, ae.dst, n), features.coords)


def residue_type_head(nodes: Tensor, rows: np.ndarray, params) -> Tensor:
    return _linear(ad.gather(nodes, rows), params["head.restype.w"], params["head.restype.b"])


def torsion_head(nodes: Tensor, rows: np.ndarray, params) -> Tensor:
    hid = ad.gelu(_linear(ad.gather(nodes, rows), params["head.torsion.w1"], params["head.torsion.b1"]))
    raw = _linear(hid, params["head.torsion.w2"], params["head.torsion.b2"])
    return ad.reshape(raw, (len(rows), 7, 2))


def sasa_head(nodes: Tensor, rows: np.ndarray, params) -> Tensor:
    return ad.reshape(_linear(ad.gather(nodes, rows), params["head.sasa.w"], params["head.sasa.b"]), (len(rows),))


def node_class_head(nodes: Tensor, rows: np.ndarray, params) -> Tensor:
    return ad.reshape(
        _linear(ad.gather(nodes, rows), params["head.nodeclass.w"], params["head.nodeclass.b"]), (len(rows),)
    )


class VabsNet:
    """Config plus named parameters, with the forward pass and heads bound."""

    def __init__(self, cfg: VabsNetConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def forward(self, features: Features, trace: AttentionTrace | None = None) -> ModelOutput:
        return forward(features, self.cfg, self.params, trace)

    def movement(self, out: ModelOutput, features: Features, trace: AttentionTrace | None = None) -> Tensor:
        return movement_head(out, features, self.params, self.cfg, trace)

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.cfg, self.params)

    @classmethod
    def load(cls, path: str | Path, cfg: VabsNetConfig | None = None) -> "VabsNet":
        saved_cfg, params = load_checkpoint(path, cfg)
        return cls(cfg or saved_cfg, params)


# --- checkpoints -------------------------------------------------------------------

MANIFEST = "manifest.json"
BLOB = "params.bin"


def save_checkpoint(path: str | Path, cfg: VabsNetConfig, params: dict[str, Tensor], extra: dict | None = None) -> None:
    """Write ``manifest.json`` ({name, shape, dtype, offset} per parameter) and a little-endian blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        chunks.append(le.tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<" + arr.dtype.str[1:], "offset": offset})
        offset += arr.nbytes
    manifest = {"format": 1, "config": cfg.to_dict(), "parameters": entries}
    if extra:
        manifest["extra"] = extra
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path, cfg: VabsNetConfig | None = None) -> tuple[VabsNetConfig, dict[str, Tensor]]:
    """Read a checkpoint; with ``cfg`` given, every parameter it needs must be present with its shape."""
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    blob = (path / BLOB).read_bytes()
    saved_cfg = VabsNetConfig.from_dict(manifest["config"])
    params = {}
    for ent in manifest["parameters"]:
        dt = np.dtype(ent["dtype"])
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=ent["offset"]).reshape(ent["shape"])
        params[ent["name"]] = Tensor(arr.astype(dt.newbyteorder("="), copy=True), requires_grad=True, name=ent["name"])
    if cfg is not None:
        want = expected_shapes(cfg)
        for name, shape in want.items():
            if name not in params:
                raise CheckpointError(f"checkpoint lacks parameter {name!r} required by the config")
            if params[name].shape != shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {params[name].shape} in the checkpoint, config expects {shape}"
                )
        extra = set(params) - set(want)
        if extra:
            raise CheckpointError(f"checkpoint has parameters unknown to the config: {sorted(extra)[:5]}")
    return saved_cfg, params
