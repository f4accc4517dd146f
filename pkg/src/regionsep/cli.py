"""Command line: simulate, train, extract, evaluate, ablate, features.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics
from .autodiff import NumericalError
from .baselines import SingularCovarianceError, beamform_waveform
from .config import ConfigError, RunConfig, load_config
from .dsp import StftConfig, read_wav, write_wav
from .geometry import MicArray, QueryParseError, QueryRegion, SourcePose, parse_query
from .network.checkpoint import load_checkpoint, save_checkpoint
from .network.compose import SCHEMES, compose_conical, ring_extract
from .network.model import BandSplitModel, QueryMismatch
from .network.train import Dataset, Example, TrainState, train
from .sim.corpus import CorpusError, SyntheticCorpus, WavCorpus
from .sim.rir import GeometryError
from .sim.scene import PlacementError, SceneSpec, mix_scene, random_scene, read_manifest, write_manifest
from .sim.toy import narrow_family, scene_examples
from .spatial import compute_features, dump_features
from .tensorio import ContainerError

log = logging.getLogger("regionsep")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CORPUS_ENV = "REGIONSEP_CORPUS"


class DataError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def corpus_descriptor(arg: str | None, cfg: RunConfig) -> dict:
    root = arg or cfg.corpus or os.environ.get(CORPUS_ENV)
    if root in (None, "", "synthetic"):
        return {"kind": "synthetic", "seed": 0}
    return {"kind": "wav", "root": str(root)}


def open_corpus(desc: dict):
    if desc["kind"] == "synthetic":
        return SyntheticCorpus(desc.get("seed", 0))
    return WavCorpus(desc["root"])


def write_text_atomic(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _read_signal(path) -> np.ndarray:
    try:
        x, sr = read_wav(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read WAV: {exc}") from None
    if sr != 16000:
        raise DataError(f"{path}: sample rate {sr} Hz, expected 16000")
    return x


def _load_models(paths) -> dict[str, BandSplitModel]:
    models = {}
    for p in paths or []:
        model, _opt, _step, _extra = load_checkpoint(p)
        models[model.config.variant] = model
    return models


def run_query(models: dict, mixture: np.ndarray, query: QueryRegion, scheme: str = "A->D") -> np.ndarray:
    """Dispatch a query to the right model or composition."""
    need = {"angular": "A", "spherical": "D", "ring": "D"}.get(query.variant)
    if query.variant == "conical":
        missing = [v for v in ("A", "D") if v not in models]
        if missing:
            raise ConfigError(f"conical queries need both an A and a D checkpoint; missing {missing}")
        return compose_conical(models["A"], models["D"], mixture, query, scheme)
    if need not in models:
        raise ConfigError(f"{query.variant} queries need a {need}-variant checkpoint")
    if query.variant == "ring":
        return ring_extract(models["D"], mixture, query.dist_low, query.dist_high)
    return models[need].extract(mixture, query)


# ------------------------------------------------------------------ simulate

def _render_scene(i: int, seed: int, prof, out: Path, corpus_desc: dict, audio: bool) -> dict:
    spec = random_scene(prof, scene_seed(seed, i))
    rec = spec.to_dict()
    rec["id"] = f"{i:06d}"
    rec["corpus"] = corpus_desc
    if audio:
        mix = mix_scene(spec, open_corpus(corpus_desc))
        wav_dir = out / "wav"
        mix_path, tgt_path = wav_dir / f"{rec['id']}_mix.wav", wav_dir / f"{rec['id']}_target.wav"
        write_wav(mix_path, mix.mixture)
        write_wav(tgt_path, mix.target)
        rec.update({"mixture": str(mix_path.relative_to(out)), "target": str(tgt_path.relative_to(out)),
                    "in_region": mix.metadata["in_region"], "scale": mix.metadata["scale"]})
    return rec


def cmd_simulate(args, cfg: RunConfig) -> int:
    prof = cfg.simulate.to_profile()
    if args.profile:
        prof = cfg.simulate.model_copy(update={"profile": args.profile}).to_profile()
    out = Path(args.out)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    desc = corpus_descriptor(args.corpus, cfg)
    if not args.manifest_only:
        open_corpus(desc)  # fail early on a bad corpus root
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        records = list(pool.map(lambda i: _render_scene(i, args.seed, prof, out, desc, not args.manifest_only),
                                range(args.n)))
    write_manifest(out / "manifest.jsonl", records)
    hist = np.bincount([r["Q"] for r in records], minlength=3)
    summary = {"count": len(records), "profile": prof.name, "seed": args.seed,
               "q_histogram": {f"Q={q}": int(hist[q]) for q in range(3)},
               "q_fraction": {f"Q={q}": float(hist[q] / max(1, len(records))) for q in range(3)}}
    write_text_atomic(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


# --------------------------------------------------------------------- train

def _manifest_examples(path: Path, duration_s: float) -> list[Example]:
    base = Path(path).parent
    n = int(round(duration_s * 16000))
    out = []
    for rec in read_manifest(path):
        if "mixture" not in rec:
            raise DataError(f"{path}: scene {rec.get('id')} has no audio (simulated with --manifest-only)")
        x = _read_signal(base / rec["mixture"])
        z = _read_signal(base / rec["target"])[0]
        if x.shape[-1] < n:
            raise DataError(f"{path}: scene {rec['id']} is shorter than {duration_s} s")
        out.append(Example(x[:, :n], z[:n], QueryRegion.from_dict(rec["query"]), int(rec["Q"]), rec["id"]))
    return out


def training_examples(cfg: RunConfig, seed: int, manifest=None, count=None, model_cfg=None) -> list[Example]:
    tc = cfg.train
    mc = model_cfg or cfg.model.to_config()
    count = count or tc.scenes
    if manifest:
        return _manifest_examples(Path(manifest), tc.duration_s)
    if tc.data == "narrow":
        kind = "angular" if mc.variant == "A" else "spherical"
        return narrow_family(seed, count, tc.duration_s, mc.mic_array, kind=kind)
    prof = cfg.simulate.to_profile()
    return scene_examples(seed, count, tc.duration_s, prof, array=mc.mic_array.to_dict())


def cmd_train(args, cfg: RunConfig) -> int:
    tc = cfg.train
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.resume:
        model, opt, step, extra = load_checkpoint(args.resume)
        if extra.get("seed") != args.seed:
            raise ConfigError(f"--seed {args.seed} differs from the checkpoint's seed {extra.get('seed')}")
        cfg = RunConfig.model_validate(extra["run_config"])
        tc = cfg.train
        state = TrainState(step=step)
    else:
        model = BandSplitModel(cfg.model.to_config(), seed=args.seed)
        opt, state = None, TrainState()
    steps = args.steps or tc.steps
    examples = training_examples(cfg, args.seed, args.manifest)
    for e in examples:
        model.check_query(e.query)
    data = Dataset(examples, model)
    log_path = out.with_suffix(out.suffix + ".log.jsonl")
    log_fh = open(log_path, "a" if args.resume else "w")
    extra = {"seed": args.seed, "run_config": cfg.model_dump(mode="json"),
             "manifest": str(args.manifest) if args.manifest else None}
    window: list[float] = []
    holder = {"opt": opt}

    def on_step(st: TrainState, value: float):
        window.append(value)
        del window[:-tc.log_every]
        if st.step % tc.log_every == 0 or st.step == state_end:
            rec = {"step": st.step, "loss": value, "loss_avg": float(np.mean(window)), "lr": st.history[-1][2]}
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()
            log.info("step %d loss %.4f avg %.4f", st.step, value, rec["loss_avg"])

    state_end = state.step + steps
    try:
        while state.step < state_end:
            chunk = min(tc.checkpoint_every - state.step % tc.checkpoint_every, state_end - state.step)
            holder["opt"], state = train(model, data, chunk, args.seed, tc.batch_size, holder["opt"], state,
                                         tc.steps_per_epoch, tc.lr, tc.loss_lambda, on_step)
            save_checkpoint(out, model, holder["opt"], state.step, extra)
    finally:
        log_fh.close()
    print(json.dumps({"checkpoint": str(out), "step": state.step, "log": str(log_path),
                      "final_loss": state.history[-1][1] if state.history else None}))
    return EXIT_OK


# ------------------------------------------------------------------- extract

def cmd_extract(args, cfg: RunConfig) -> int:
    query = parse_query(args.query)
    models = _load_models(args.checkpoint)
    x = _read_signal(args.input)
    for m in models.values():
        if m.config.mic_array.num_mics != x.shape[0]:
            raise DataError(f"{args.input}: {x.shape[0]} channels, model expects {m.config.mic_array.num_mics}")
    y = run_query(models, x, query, args.scheme)
    write_wav(args.output, y)
    print(json.dumps({"output": str(args.output), "query": query.to_dict(), "samples": int(y.size)}))
    return EXIT_OK


# ------------------------------------------------------------------ evaluate

def _system_output(system, rec, x, models, scheme, corpus_override):
    query = QueryRegion.from_dict(rec["query"])
    if system == "mixture":
        return x[0].copy()
    if system == "model":
        return run_query(models, x, query, scheme)
    spec = SceneSpec.from_dict(rec)
    inside = rec.get("in_region")
    if system == "das":
        dirs = [(s.pose.azimuth, s.pose.elevation) for s, flag in zip(spec.speech, inside) if flag]
        return beamform_waveform("das", x, array=spec.array, directions=dirs)
    desc = corpus_override or rec.get("corpus", {"kind": "synthetic", "seed": 0})
    mix = mix_scene(spec, open_corpus(desc))
    if mix.mixture.shape[-1] != x.shape[-1] or np.max(np.abs(mix.mixture - x)) > 1e-4:
        raise DataError(f"scene {rec['id']}: regenerated mixture does not match the stored WAV; "
                        "pass the corpus used for simulation")
    images = [img for img, flag in zip(mix.early_images, inside) if flag]
    return beamform_waveform(system, mix.mixture, source_images=images)


def _evaluate_one(system, rec, base, models, scheme, corpus_override) -> metrics.EvalRow:
    x = _read_signal(base / rec["mixture"])
    z = _read_signal(base / rec["target"])[0]
    est = _system_output(system, rec, x, models, scheme, corpus_override)
    q = int(rec["Q"])
    if q == 0:
        return metrics.EvalRow(rec["id"], q, decay=metrics.energy_decay(x[0], est))
    return metrics.EvalRow(rec["id"], q, sdr=metrics.sdr(z, est), sdr_mixture=metrics.sdr(z, x[0]))


def cmd_evaluate(args, cfg: RunConfig) -> int:
    manifest = Path(args.manifest)
    records = read_manifest(manifest)
    if args.limit:
        records = records[:args.limit]
    missing = [r.get("id") for r in records if "mixture" not in r]
    if missing:
        raise DataError(f"{manifest}: scenes without audio: {missing[:5]}")
    models = _load_models(args.checkpoint) if args.system == "model" else {}
    if args.system == "model" and not models:
        raise ConfigError("--system model needs at least one --checkpoint")
    corpus_override = corpus_descriptor(args.corpus, cfg) if args.corpus else None
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        rows = list(pool.map(lambda r: _evaluate_one(args.system, r, manifest.parent, models, args.scheme,
                                                     corpus_override), records))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_text_atomic(out / f"{args.system}.csv", metrics.rows_to_csv(rows))
    summary = metrics.summarize(rows, args.system)
    write_text_atomic(out / f"{args.system}.json", json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


# -------------------------------------------------------------------- ablate

SAMPLING_GRID = ("interval:10", "interval:15", "interval:20", "number:3", "number:4", "number:6", "number:8")
AGGREGATION_GRID = ("concat", "tac", "taa", "rnn", "rnn-loop")
MICS_GRID = ("2", "4", "8")
DIAMETER_GRID = ("0.05", "0.07", "0.10", "0.15")
GRIDS = {"sampling": SAMPLING_GRID, "aggregation": AGGREGATION_GRID, "mics": MICS_GRID,
         "diameter": DIAMETER_GRID}


def linear_subset(num_mics: int, base: MicArray | None = None) -> MicArray:
    """Evenly spread subset of the 8-mic 22.5 cm linear array."""
    base = base or MicArray.preset("lin8_22.5cm")
    if not 2 <= num_mics <= base.num_mics:
        raise ConfigError(f"mic count must lie in [2, {base.num_mics}], got {num_mics}")
    idx = np.round(np.linspace(0, base.num_mics - 1, num_mics)).astype(int)
    return base.subset(idx)


def ablation_row_overrides(dimension: str, value: str) -> dict:
    if dimension == "sampling":
        return {"sampling": value}
    if dimension == "aggregation":
        return {"aggregation": value}
    if dimension == "mics":
        return {"array": linear_subset(int(value)).to_dict()}
    if dimension == "diameter":
        return {"array": MicArray.circular(8, float(value)).to_dict()}
    raise ConfigError(f"unknown ablation dimension {dimension!r}")


def evaluate_examples(model: BandSplitModel, examples) -> tuple[list[float], list[float]]:
    """SDR improvements (Q>0) and energy decays (Q=0)."""
    imp, dec = [], []
    for e in examples:
        est = model.extract(e.mixture, e.query)
        if e.q == 0:
            dec.append(metrics.energy_decay(e.mixture[0], est))
        else:
            imp.append(metrics.sdr(e.target, est) - metrics.sdr(e.target, e.mixture[0]))
    return imp, dec


def _mean_std(v):
    return {"mean": float(np.mean(v)), "std": float(np.std(v))} if len(v) else None


def run_ablation(cfg: RunConfig, dimension: str, grid, seed: int, repeats: int, steps: int) -> dict:
    ac = cfg.ablate
    rows = []
    for value in grid:
        overrides = ablation_row_overrides(dimension, value)
        runs = []
        for r in range(repeats):
            mc = replace(cfg.model.to_config(), **overrides)
            run_cfg = cfg.model_copy(update={"train": cfg.train.model_copy(
                update={"data": ac.data, "duration_s": ac.duration_s})})
            run_seed = scene_seed(seed, r)
            train_ex = training_examples(run_cfg, run_seed, count=ac.train_scenes, model_cfg=mc)
            eval_ex = training_examples(run_cfg, run_seed + 1, count=ac.eval_scenes, model_cfg=mc)
            model = BandSplitModel(mc, seed=run_seed)
            train(model, Dataset(train_ex, model), steps, run_seed, cfg.train.batch_size,
                  base_lr=cfg.train.lr, steps_per_epoch=cfg.train.steps_per_epoch, lam=cfg.train.loss_lambda)
            imp, dec = evaluate_examples(model, eval_ex)
            runs.append({"repeat": r, "sdr_improvement_db": float(np.mean(imp)) if imp else None,
                         "decay_db": float(np.mean(dec)) if dec else None})
            log.info("%s=%s repeat %d: %s", dimension, value, r, runs[-1])
        rows.append({
            "row": value,
            "params": BandSplitModel(mc, seed=0).param_count(),
            "sdr_improvement_db": _mean_std([x["sdr_improvement_db"] for x in runs if x["sdr_improvement_db"] is not None]),
            "decay_db": _mean_std([x["decay_db"] for x in runs if x["decay_db"] is not None]),
            "runs": runs,
        })
    return {"dimension": dimension, "seed": seed, "repeats": repeats, "steps": steps, "rows": rows}


def ablation_table(report: dict) -> str:
    def fmt(s):
        return "n/a" if s is None else f"{s['mean']:.2f}±{s['std']:.2f}"

    lines = [f"| {report['dimension']} | #param | Decay Q=0 (dB) | SDRi Q>0 (dB) |", "|---|---|---|---|"]
    for row in report["rows"]:
        lines.append(f"| {row['row']} | {row['params'] / 1e6:.3f}M | {fmt(row['decay_db'])} | "
                     f"{fmt(row['sdr_improvement_db'])} |")
    return "\n".join(lines) + "\n"


def cmd_ablate(args, cfg: RunConfig) -> int:
    dimension = args.dimension or cfg.ablate.dimension
    grid = args.grid.split(",") if args.grid else (cfg.ablate.grid or GRIDS[dimension])
    if cfg.model.variant != "A":
        raise ConfigError("ablations run on the direction (A) model")
    report = run_ablation(cfg, dimension, grid, args.seed, args.repeats or cfg.ablate.repeats,
                          args.steps or cfg.ablate.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_text_atomic(out / f"ablate_{dimension}.json", json.dumps(report, indent=2) + "\n")
    table = ablation_table(report)
    write_text_atomic(out / f"ablate_{dimension}.md", table)
    print(table, end="")
    return EXIT_OK


# ------------------------------------------------------------------ features

def cmd_features(args, cfg: RunConfig) -> int:
    from .dsp import stft
    from .geometry import enumerate_pairs

    x = _read_signal(args.input)
    array = MicArray.preset(args.array) if not Path(args.array).exists() else MicArray.from_text(args.array)
    if array.num_mics != x.shape[0]:
        raise DataError(f"{args.input}: {x.shape[0]} channels, array has {array.num_mics}")
    spec = stft(x, StftConfig())
    try:
        sel = "all" if args.pairs == "all" else [int(v) for v in args.pairs.split(",")]
    except ValueError:
        raise ConfigError(f"--pairs: expected 'all' or comma-separated mic indices, got {args.pairs!r}") from None
    pack = compute_features(spec, enumerate_pairs(array, sel))
    sidecar = dump_features(args.output, pack, spec.config)
    print(json.dumps({"output": str(args.output), "sidecar": str(sidecar), "shape": list(pack.ipd.shape)}))
    return EXIT_OK


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regionsep", description="Region-query speech extraction toolkit")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize scenes: WAVs + JSON-lines manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--profile")
    s.add_argument("--corpus", help=f"WAV corpus root or 'synthetic' (default ${CORPUS_ENV})")
    s.add_argument("--manifest-only", action="store_true", help="draw scenes without rendering audio")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="toy training loop with checkpoints")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--steps", type=int, help="optimizer steps to run (added to the checkpoint step on --resume)")
    t.add_argument("--manifest", help="train on simulated scenes instead of on-the-fly data")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="extract a query region from a multichannel WAV")
    e.add_argument("--checkpoint", action="append", required=True, help="A and/or D checkpoint")
    e.add_argument("--input", required=True)
    e.add_argument("--query", required=True, help="az:LO..HI | dist:0..R | cone:az:LO..HI,dist:0..R | ring:A..B")
    e.add_argument("--output", required=True)
    e.add_argument("--scheme", choices=SCHEMES, default="A->D")
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("evaluate", help="score a system on a manifest")
    v.add_argument("--manifest", required=True)
    v.add_argument("--system", choices=("model", "das", "irm-mvdr", "csm-mvdr", "mixture"), required=True)
    v.add_argument("--checkpoint", action="append")
    v.add_argument("--scheme", choices=SCHEMES, default="A->D")
    v.add_argument("--corpus")
    v.add_argument("--out", required=True, help="report directory")
    v.add_argument("--limit", type=int)
    v.add_argument("--jobs", type=int, default=1)
    v.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and score toy models over an ablation grid")
    a.add_argument("--dimension", choices=tuple(GRIDS))
    a.add_argument("--grid", help="comma-separated row values")
    a.add_argument("--seed", type=int, required=True)
    a.add_argument("--repeats", type=int)
    a.add_argument("--steps", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("features", help="dump IPD/ILD tensors for a multichannel WAV")
    f.add_argument("--input", required=True)
    f.add_argument("--output", required=True)
    f.add_argument("--array", default="circ8_5cm", help="preset name or text file of positions")
    f.add_argument("--pairs", default="all", help="'all' or comma-separated mic indices, e.g. 0,2,4,6")
    f.set_defaults(func=cmd_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, QueryParseError, QueryMismatch, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CorpusError, PlacementError, GeometryError, ContainerError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, SingularCovarianceError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
