"""Command-line entry point: ``protbilevel <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure or failed check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import checks
from .autodiff import ContractError, ShapeError
from .encodings import FeaturizationError, featurize, load_external_embeddings
from .geometry import DegenerateGeometryError, UnknownElementError, shrake_rupley
from .graph import GraphError, build_bilevel_graph
from .masking import MASK_MODES, MaskConfig, MaskingError, mask_and_noise
from .model import CheckpointError, ConfigurationError, VabsNet, VabsNetConfig, load_checkpoint
from .objectives import LossWeights
from .structures import (
    StructureError,
    generate_synthetic_chain,
    load_chain,
    parse_pdb,
    save_chain,
)
from .training import NumericError, TrainConfig, TrainingError, finetune_node_class, halfspace_labels, pretrain

log = logging.getLogger("protbilevel")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (
    StructureError, FeaturizationError, GraphError, MaskingError, ConfigurationError, CheckpointError,
    TrainingError, UnknownElementError, DegenerateGeometryError, ShapeError, ContractError,
    FileNotFoundError, IsADirectoryError, json.JSONDecodeError, KeyError, ValueError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


def _add_common(p: argparse.ArgumentParser, *, seed=True, model_flags=False):
    if seed:
        p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--threads", type=int, help="worker cap for sample preparation")
    if model_flags:
        p.add_argument("--config", help="JSON config with 'model', 'train' and 'mask' sections (or flat keys)")
        p.add_argument("--so3-invariant", action="store_true", help="drop global-frame angles and the origin node")
        p.add_argument("--no-vector-encoder", action="store_true", help="disable the edge direction features")
        p.add_argument("--mask-mode", choices=MASK_MODES, help="span masking variant")
        p.add_argument("--esm-dir", help="directory of external embedding files named like the chain files")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protbilevel", description="Bilevel protein representation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("parse", help="PDB text -> canonical chain JSON")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True, help="a .json file (one chain) or a directory (every chain)")
    p.add_argument("--chain", help="chain identifier to keep")

    p = sub.add_parser("gen-synthetic", help="write deterministic synthetic chains")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-chains", type=int, default=5)
    p.add_argument("--length", type=int, default=50)
    p.add_argument("--labels", choices=("none", "halfspace"), default="none",
                   help="attach per-atom binary labels for fine-tuning")
    _add_common(p)

    p = sub.add_parser("featurize", help="graph and edge features of one chain (.npz)")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--esm", help="external embedding file for this chain")
    p.add_argument("--mask", action="store_true", help="apply span masking and noise before featurizing")
    _add_common(p, model_flags=True)

    p = sub.add_parser("sasa", help="per-atom solvent accessible surface area")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probe", type=float, default=1.4)
    p.add_argument("--n-points", type=int, default=960)

    p = sub.add_parser("pretrain", help="pre-train on a directory of chain files")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint to start from")
    _add_common(p, model_flags=True)

    p = sub.add_parser("finetune", help="fine-tune the node-class head on labelled chains")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="pre-trained checkpoint (random init when omitted)")
    p.add_argument("--level", choices=("atom", "residue"), default="atom")
    _add_common(p, model_flags=True)

    p = sub.add_parser("check", help="run invariant suites")
    p.add_argument("--suite", action="append", choices=sorted(checks.SUITES) + ["all"],
                   help="repeatable; default all")
    p.add_argument("--out", help="JSON report path")

    p = sub.add_parser("inspect-checkpoint", help="summarise a checkpoint")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", help="JSON summary path (stdout when omitted)")
    return parser


# --- configuration merging -------------------------------------------------------------------

_SECTIONS = {"model": VabsNetConfig, "train": TrainConfig, "mask": MaskConfig}


def load_config(path: str | None) -> dict[str, dict]:
    """Split a config file into model/train/mask sections; flat keys go to the owning section."""
    merged: dict[str, dict] = {k: {} for k in _SECTIONS}
    if not path:
        return merged
    raw = json.loads(Path(path).read_text())
    owners = {f.name: sec for sec, cls in _SECTIONS.items() for f in fields(cls)}
    for key, value in raw.items():
        if key in _SECTIONS and isinstance(value, dict):
            merged[key].update(value)
        elif key in owners:
            merged[owners[key]][key] = value
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
    return merged


def effective_configs(args) -> tuple[VabsNetConfig, TrainConfig, MaskConfig]:
    sections = load_config(getattr(args, "config", None))
    model = VabsNetConfig.from_dict(sections["model"])
    train_d = dict(sections["train"])
    if "loss_weights" in train_d and isinstance(train_d["loss_weights"], (list, tuple)):
        train_d["loss_weights"] = asdict(LossWeights.from_sequence(train_d["loss_weights"]))
    train = TrainConfig.from_dict(train_d)
    mask = MaskConfig(**sections["mask"])
    if getattr(args, "so3_invariant", False):
        model = model.with_so3_invariant()
    if getattr(args, "no_vector_encoder", False):
        model = replace(model, use_vector_encoder=False)
    if getattr(args, "mask_mode", None):
        mask = replace(mask, mode=args.mask_mode)
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
        mask = replace(mask, seed=args.seed)
    if getattr(args, "threads", None):
        train = replace(train, threads=args.threads)
    return model, train, mask


def _echo_config(model, train, mask, out: Path | None) -> None:
    payload = {"model": model.to_dict(), "train": train.to_dict(), "mask": asdict(mask)}
    text = json.dumps(payload, indent=1, sort_keys=True)
    log.info("effective config:\n%s", text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.json").write_text(text)


# --- commands ------------------------------------------------------------------------------------


def cmd_parse(args) -> int:
    chains = parse_pdb(Path(args.inp).read_text(), args.chain)
    if not chains:
        raise StructureError(f"no chains found in {args.inp}")
    out = Path(args.out)
    if out.suffix == ".json":
        save_chain(chains[0], out)
    else:
        out.mkdir(parents=True, exist_ok=True)
        for c in chains:
            save_chain(c, out / f"{Path(args.inp).stem}_{c.chain_id or 'X'}.json")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    for i in range(args.n_chains):
        chain = generate_synthetic_chain(args.length, seed * 100_003 + i)
        if args.labels == "halfspace":
            chain = halfspace_labels(chain)
        save_chain(chain, out / f"synthetic_{i:03d}.json")
    return EXIT_OK


def cmd_featurize(args) -> int:
    model_cfg, _, mask_cfg = effective_configs(args)
    chain = load_chain(args.inp)
    extra = {}
    if args.mask:
        sample = mask_and_noise(chain, mask_cfg, np.random.default_rng(mask_cfg.seed))
        chain = sample.chain
        extra["mask_plan"] = np.array(sample.plan.to_json())
    graph = build_bilevel_graph(chain, model_cfg.k_atom, model_cfg.k_res, model_cfg.use_virtual_origin)
    esm = load_external_embeddings(args.esm) if args.esm else None
    feats = featurize(graph, chain, esm, model_cfg.feature_config())
    arrays = {"coords": feats.coords, "atom_type": feats.atom_type, "residue_type": feats.residue_type,
              "res_nodes": feats.res_nodes, **extra}
    for track, es in (("atom", feats.atom_edges), ("res", feats.res_edges)):
        for name in ("src", "dst", "distance", "pair_type", "direction", "seq_bucket", "dist_kernels"):
            arrays[f"{track}_{name}"] = getattr(es, name)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out, **arrays)
    return EXIT_OK


def cmd_sasa(args) -> int:
    chain = load_chain(args.inp)
    res = shrake_rupley(chain, args.probe, args.n_points)
    payload = {"probe_radius": args.probe, "n_points": args.n_points, "total": float(res.per_atom.sum()),
               "per_atom": res.per_atom.tolist()}
    Path(args.out).write_text(json.dumps(payload))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    model_cfg, train_cfg, mask_cfg = effective_configs(args)
    out = Path(args.out)
    _echo_config(model_cfg, train_cfg, mask_cfg, out)
    model = VabsNet.load(args.init, model_cfg) if args.init else None
    result = pretrain(args.data, model_cfg, train_cfg, mask_cfg, out, model=model, esm_dir=args.esm_dir,
                      callback=lambda step, e: log.debug("step %d total %.4f", step, e["total"]))
    if result.skipped:
        log.warning("skipped %d chains shorter than 4 residues", result.skipped)
    return EXIT_OK


def cmd_finetune(args) -> int:
    model_cfg, train_cfg, mask_cfg = effective_configs(args)
    out = Path(args.out)
    _echo_config(model_cfg, train_cfg, mask_cfg, out)
    model = VabsNet.load(args.init, model_cfg) if args.init else VabsNet(model_cfg, seed=train_cfg.seed)
    result = finetune_node_class(args.data, model, train_cfg, args.level, out)
    log.info("final AUC %.4f", result.log[-1]["auc"])
    return EXIT_OK


def cmd_check(args) -> int:
    results = checks.run_suites(args.suite or "all")
    report = [{"suite": r.name, "passed": r.passed, **r.details} for r in results]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} {json.dumps(r.details)}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_inspect(args) -> int:
    cfg, params = load_checkpoint(args.inp)
    summary = {
        "config": cfg.to_dict(),
        "n_parameters": int(sum(p.data.size for p in params.values())),
        "parameters": {k: list(v.shape) for k, v in sorted(params.items())},
    }
    text = json.dumps(summary, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


COMMANDS = {
    "parse": cmd_parse,
    "gen-synthetic": cmd_gen_synthetic,
    "featurize": cmd_featurize,
    "sasa": cmd_sasa,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "check": cmd_check,
    "inspect-checkpoint": cmd_inspect,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
