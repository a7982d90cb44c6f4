"""mofu command line: fuse references, train the toy model, run evaluation suites.

Exit codes: 0 pass, 1 threshold failure (or aborted training), 2 config error,
3 I/O or corrupt input.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from mofu import __version__
from mofu import autograd as ag
from mofu.conditioning import load_reference, preprocess_reference
from mofu.config import ConfigError, LoadedConfig, RunConfig, load_config, reference_toml, to_dict
from mofu.dit import (CheckpointError, DiTConfig, config_from_dict, config_to_dict, decode_checkpoint,
                      encode_checkpoint, encode_refs, init_params)
from mofu.fusion import fuse_arrays

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
SUITES = ("perm", "scale", "subjectsim", "gradcheck")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# shared helpers ------------------------------------------------------------

def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format: sha1 of b'blob <len>\\0' + data."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def inputs_hash(named: Sequence[tuple[str, bytes]]) -> str:
    """Order-independent hash of named inputs (a flat, tree-like listing of blob hashes)."""
    listing = "".join(f"{git_blob_hash(b)} {name}\n" for name, b in sorted(named))
    return hashlib.sha1(listing.encode()).hexdigest()


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_bytes(path: Path, data: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from exc


def read_bytes(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc


def make_report(command: str, loaded: LoadedConfig, seed: int, in_hash: str, metrics: dict,
                passed: bool, duration: float) -> dict:
    return {
        "command": command,
        "config_hash": loaded.config_hash,
        "env_overrides": loaded.overrides,
        "seed": seed,
        "inputs_hash": in_hash,
        "metrics": metrics,
        "passed": passed,
        "duration_s": round(duration, 6),
        "version": __version__,
    }


def _config(args) -> LoadedConfig:
    loaded = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        loaded.config = replace(loaded.config, seed=args.seed)
    return loaded


def load_params(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parameters from a training-state or plain parameter checkpoint."""
    try:
        meta, tensors = decode_checkpoint(read_bytes(path))
    except CheckpointError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc
    kind = meta.get("kind")
    if kind == "train_state":
        params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    elif kind == "params":
        params = tensors
    else:
        raise CliError(f"{path}: checkpoint kind {kind!r} holds no model parameters", EXIT_IO)
    return meta, params


def model_from_checkpoint(path: Path, fallback: DiTConfig) -> tuple[DiTConfig, dict[str, np.ndarray]]:
    meta, params = load_params(path)
    cfg = config_from_dict(meta["model"]) if "model" in meta else fallback
    expected = set(init_params(cfg, 0))
    if set(params) != expected:
        missing = sorted(expected - set(params))[:3]
        raise CliError(f"{path}: parameters do not match the model config (missing {missing})", EXIT_IO)
    return cfg, params


# fuse ----------------------------------------------------------------------

def collect_references(input_dir: Path) -> list[tuple[str, Path, Path]]:
    if not input_dir.is_dir():
        raise CliError(f"{input_dir}: not a directory", EXIT_IO)
    images = sorted(p for p in input_dir.glob("*.png") if not p.name.endswith(".mask.png"))
    if not images:
        raise CliError(f"{input_dir}: no <name>.png reference images", EXIT_IO)
    out, problems = [], []
    for img in images:
        mask = img.with_name(img.stem + ".mask.png")
        if not mask.exists():
            problems.append(f"{img.name}: missing mask {mask.name}")
        else:
            out.append((img.stem, img, mask))
    if problems:
        raise CliError("\n".join(problems), EXIT_IO)
    return out


def cmd_fuse(args) -> int:
    start = time.perf_counter()
    loaded = _config(args)
    cfg = loaded.config
    cutoff = cfg.loss.cutoff_ratio if args.cutoff is None else args.cutoff
    if not 0.0 < cutoff < 1.0:
        raise ConfigError("--cutoff must lie in (0, 1)")
    model_cfg = cfg.model
    if args.checkpoint:
        model_cfg, params = model_from_checkpoint(Path(args.checkpoint), model_cfg)
    else:
        params = init_params(model_cfg, cfg.seed, zero_init=False)
    refs = collect_references(Path(args.input_dir))
    named_inputs = []
    pixels = []
    for name, img, mask in refs:
        named_inputs += [(img.name, read_bytes(img)), (mask.name, read_bytes(mask))]
        try:
            ref = load_reference(img, mask)
        except (OSError, ValueError) as exc:
            raise CliError(f"{img.name}: {exc}", EXIT_IO) from exc
        if ref.pixels.shape[0] != model_cfg.image_channels:
            raise CliError(f"{img.name}: expected {model_cfg.image_channels} channels", EXIT_IO)
        pixels.append(preprocess_reference(ref, model_cfg.ref_size, model_cfg.ref_size))
    with ag.no_grad():
        feats = [f.data for f in encode_refs({k: ag.Var(v) for k, v in params.items()}, pixels)]
    bw = cfg.loss.band_weights
    fused = fuse_arrays(feats, cutoff, bw)
    divergence = 0.0
    if len(feats) <= 4:
        for perm in itertools.permutations(range(len(feats))):
            other = fuse_arrays([feats[i] for i in perm], cutoff, bw)
            divergence = max(divergence, float(np.max(np.abs(other - fused))))
    out = Path(args.out)
    meta = {"kind": "fused", "cutoff_ratio": cutoff, "band_weights": list(bw), "n_refs": len(feats),
            "names": sorted(n for n, _, _ in refs)}
    write_bytes(out, encode_checkpoint(meta, {"fused": fused}))
    metrics = {"n_refs": len(feats), "cutoff_ratio": cutoff, "perm_divergence": divergence,
               "perm_orders_checked": math.factorial(len(feats)) if len(feats) <= 4 else 0,
               "fused_sha256": hashlib.sha256(fused.tobytes()).hexdigest()}
    passed = divergence == 0.0
    report = make_report("fuse", loaded, cfg.seed, inputs_hash(named_inputs), metrics, passed,
                         time.perf_counter() - start)
    write_bytes(Path(args.report) if args.report else out.with_name(out.name + ".report.json"),
                dump_json(report).encode())
    print(f"fused {len(feats)} references -> {out} (perm_divergence={divergence:g})")
    return EXIT_OK if passed else EXIT_FAIL


# train ---------------------------------------------------------------------

CSV_COLUMNS = ("step", "lr", "l_scale", "l_perm", "l_spsl")


def curve_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.step, repr(r.lr), repr(r.l_scale), repr(r.l_perm), repr(r.l_spsl)])
    return buf.getvalue()


def read_curve(path: Path):
    from mofu.harness.train import CurveRow
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(CurveRow(int(rec["step"]), float(rec["lr"]), float(rec["l_scale"]),
                                 float(rec["l_perm"]), float(rec["l_spsl"])))
    return rows


def cmd_train(args) -> int:
    from mofu.harness.model import prepare_sample
    from mofu.harness.synthetic import gen_synthetic
    from mofu.harness.train import NonFiniteLossError, TrainState, moving_average, train

    start = time.perf_counter()
    loaded = _config(args)
    cfg = loaded.config
    out = Path(args.out)
    scenes = gen_synthetic(cfg.seed, cfg.data.n_scenes, cfg.scene)
    samples = [prepare_sample(s, cfg.model, cfg.data.provider) for s in scenes]
    meta = {"model": config_to_dict(cfg.model), "config_hash": loaded.config_hash}
    rows = []
    if args.resume:
        try:
            state, _ = TrainState.from_bytes(read_bytes(Path(args.resume)))
        except CheckpointError as exc:
            raise CliError(f"{args.resume}: {exc}", EXIT_IO) from exc
        if state.seed != cfg.seed:
            raise ConfigError(f"resume checkpoint was trained with seed {state.seed}, config says {cfg.seed}")
        if set(state.params) != set(init_params(cfg.model, 0)):
            raise CliError(f"{args.resume}: parameters do not match the model config", EXIT_IO)
        if (out / "curve.csv").exists():
            rows = [r for r in read_curve(out / "curve.csv") if r.step < state.step]
        if len(rows) != state.step:
            raise CliError("resume needs the curve.csv rows written before the checkpoint", EXIT_IO)
    else:
        state = TrainState.fresh(init_params(cfg.model, cfg.seed), cfg.optim.lr, cfg.seed)
    every = cfg.optim.checkpoint_every
    last_good = [state]

    def on_step(st, row):
        last_good[0] = st
        if every and st.step % every == 0:
            blob = st.to_bytes(meta)
            write_bytes(out / f"ckpt_{st.step:06d}.mofu", blob)
            write_bytes(out / "last_good.mofu", blob)

    aborted = None
    try:
        state, new_rows = train(state, samples, cfg.model, cfg.loss, cfg.optim, on_step=on_step)
        rows += new_rows
    except NonFiniteLossError as exc:
        aborted = str(exc)
        state = last_good[0]
        rows = [r for r in rows if r.step < state.step]
    write_bytes(out / "last_good.mofu", state.to_bytes(meta))
    if aborted is None:
        write_bytes(out / "final.mofu", state.to_bytes(meta))
    write_bytes(out / "curve.csv", curve_csv(rows).encode())
    metrics = {"steps": state.step, "aborted": aborted}
    if rows:
        ma = moving_average([r.l_spsl for r in rows], 50)
        metrics.update({"final_l_spsl": rows[-1].l_spsl, "final_ma50": float(ma[-1]),
                        "ma50_at_50": float(ma[min(49, len(ma) - 1)])})
        metrics["ma50_ratio"] = metrics["final_ma50"] / metrics["ma50_at_50"]
    payload = {"config": to_dict(cfg), "config_hash": loaded.config_hash, "metrics": metrics}
    write_bytes(out / "metrics.json", dump_json(payload).encode())
    report = make_report("train", loaded, cfg.seed, inputs_hash([("config", reference_toml(cfg).encode())]),
                         metrics, aborted is None, time.perf_counter() - start)
    write_bytes(out / "report.json", dump_json(report).encode())
    if aborted:
        print(f"training aborted: {aborted}; last good state at step {state.step}", file=sys.stderr)
        return EXIT_FAIL
    print(f"trained to step {state.step}; final L_SPSL moving average {metrics.get('final_ma50', float('nan')):.4f}")
    return EXIT_OK


# eval ----------------------------------------------------------------------

def run_suites(cfg: RunConfig, model_cfg: DiTConfig, params, suites: Sequence[str], conditioner: str,
               seed: int) -> tuple[dict, bool]:
    from mofu.harness.evaluate import eval_perm_sensitivity, eval_scale_consistency, scene_subject_sim
    from mofu.harness.gradcheck import gradcheck_config, spsl_grad_check
    from mofu.harness.model import MoFuModel
    from mofu.harness.synthetic import SceneConfig, gen_synthetic

    ev = cfg.eval
    scene_cfg = replace(cfg.scene, min_subjects=ev.min_subjects)
    scenes = gen_synthetic(ev.scene_seed, ev.n_scenes, scene_cfg)
    model = MoFuModel(model_cfg, params, conditioner, cfg.loss.cutoff_ratio, cfg.loss.band_weights,
                      provider=cfg.data.provider)
    metrics: dict = {}
    ok = True
    if "perm" in suites:
        per = {str(s.scene_id): eval_perm_sensitivity(model, s, seed, ev.sample_steps) for s in scenes}
        worst = max(per.values())
        passed = worst <= ev.perm_threshold
        metrics["perm"] = {"perm_sensitivity": worst, "per_scene": per, "threshold": ev.perm_threshold,
                           "passed": passed}
        ok &= passed
    if "scale" in suites:
        rep = eval_scale_consistency(model, scenes, seed, ev.sample_steps)
        base = MoFuModel(model_cfg, init_params(model_cfg, cfg.seed), conditioner, cfg.loss.cutoff_ratio,
                         cfg.loss.band_weights, provider=cfg.data.provider)
        base_rep = eval_scale_consistency(base, scenes, seed, ev.sample_steps)
        passed = rep.deviation < base_rep.deviation
        metrics["scale"] = {"scale_error": rep.deviation, "untrained_scale_error": base_rep.deviation,
                            "failed_scenes": rep.failed_scenes, "passed": passed}
        ok &= passed
    if "subjectsim" in suites:
        res = [scene_subject_sim(model, s, seed, ev.sample_steps, ev.subjectsim_embed) for s in scenes]
        value = float(np.mean([r.value for r in res]))
        passed = value >= ev.subjectsim_min
        metrics["subjectsim"] = {"subject_sim": value, "embed": ev.subjectsim_embed,
                                 "flagged": {str(s.scene_id): r.flagged_frames for s, r in zip(scenes, res)
                                             if r.flagged_frames},
                                 "threshold": ev.subjectsim_min, "passed": passed}
        ok &= passed
    if "gradcheck" in suites:
        rep = spsl_grad_check(gradcheck_config(ev.gradcheck_depth), seed)
        passed = rep.max_rel_error < ev.gradcheck_tol
        metrics["gradcheck"] = {"max_rel_error": rep.max_rel_error, "worst": [rep.worst[0], list(rep.worst[1])],
                                "n_checked": rep.n_checked, "tol": ev.gradcheck_tol, "passed": passed}
        ok &= passed
    return metrics, bool(ok)


def cmd_eval(args) -> int:
    start = time.perf_counter()
    loaded = _config(args)
    cfg = loaded.config
    named = []
    if args.checkpoint:
        model_cfg, params = model_from_checkpoint(Path(args.checkpoint), cfg.model)
        named.append(("checkpoint", read_bytes(Path(args.checkpoint))))
    else:
        model_cfg = cfg.model
        params = init_params(model_cfg, cfg.seed, zero_init=args.init == "zero")
        named.append(("init", args.init.encode()))
    suites = SUITES if args.suite == "all" else (args.suite,)
    metrics, ok = run_suites(cfg, model_cfg, params, suites, args.conditioner, cfg.seed)
    metrics["conditioner"] = args.conditioner
    report = make_report("eval", loaded, cfg.seed, inputs_hash(named), metrics, ok, time.perf_counter() - start)
    text = dump_json(report)
    if args.out:
        write_bytes(Path(args.out), text.encode())
    for name in suites:
        print(f"{name}: {'PASS' if metrics[name]['passed'] else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_config(args) -> int:
    loaded = _config(args)
    text = reference_toml(loaded.config)
    if args.out:
        write_bytes(Path(args.out), text.encode())
    else:
        sys.stdout.write(text)
    return EXIT_OK


# parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="TOML", help="run configuration file (see `mofu config`)")
    common.add_argument("--seed", type=int, help="override the configured master seed")

    p = argparse.ArgumentParser(
        prog="mofu",
        description="Scale-aware, order-independent multi-reference conditioning on a toy video denoiser.",
        epilog="Environment overrides: MOFU_SEED, MOFU_<SECTION>__<KEY>=<toml value>. "
               "Exit codes: 0 pass, 1 threshold failure, 2 config error, 3 I/O or corrupt input.")
    p.add_argument("--version", action="version", version=f"mofu {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fuse", parents=[common], help="encode and fuse a directory of references",
                       description="Fuse every <name>.png / <name>.mask.png pair in INPUT_DIR into one "
                                   "conditioning tensor and self-check order independence.")
    f.add_argument("input_dir", help="directory of reference rasters with matching masks")
    f.add_argument("--out", required=True, help="output tensor file (checkpoint container)")
    f.add_argument("--cutoff", type=float, help="frequency cutoff ratio in (0, 1); default from config")
    f.add_argument("--checkpoint", help="take encoder weights from this checkpoint instead of a seeded init")
    f.add_argument("--report", help="report path (default: OUT.report.json)")
    f.set_defaults(func=cmd_fuse)

    t = sub.add_parser("train", parents=[common], help="train the toy denoiser on synthetic scenes",
                       description="Deterministic training run; writes checkpoints, curve.csv, "
                                   "metrics.json (byte-stable) and report.json (with timing).")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", help="training-state checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="run evaluation suites",
                       description="Run evaluation suites; exit 0 iff every selected suite passes.")
    e.add_argument("--checkpoint", help="checkpoint to evaluate (default: a fresh init, see --init)")
    e.add_argument("--init", choices=("zero", "random"), default="random",
                   help="fresh initialization when no checkpoint is given")
    e.add_argument("--suite", choices=(*SUITES, "all"), default="all", help="suite to run")
    e.add_argument("--conditioner", choices=("fourier", "sequential"), default="fourier",
                   help="reference conditioner (sequential is the order-sensitive baseline)")
    e.add_argument("--out", help="JSON report path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("config", parents=[common], help="print the documented reference configuration")
    c.add_argument("--out", help="write to this path instead of stdout")
    c.set_defaults(func=cmd_config)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
