"""Command-line entry point.

Exit codes: 0 success, 2 validation or configuration error, 3 numeric
failure (non-finite loss, failed gradient check), 4 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import benchmarks
from .checkpoint import load as load_checkpoint
from .config import ModelConfig, env_overrides, parse_kv
from .data import generate_synthetic, ingest, read_features, user_history, write_bundle, write_features
from .errors import AlignRecError, CheckpointError, NonFiniteError
from .evaluation import (SplitSpec, StreamRunner, evaluate, make_splits, measure_latency,
                         paired_ttest)
from .evidence import EvidencePack, encode_evidence, load_or_rebuild
from .prompt import assemble_prompt, generate_rationale
from .quantization import encode_batch, memory_ratio, reconstruction_mse, train_codebook
from .system import Recommender
from .training import pretrain

log = logging.getLogger("alignrec")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _config(args, **defaults) -> ModelConfig:
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig.load()
    changes = dict(defaults) if not args.config else {}
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


def _explicit_keys(args) -> set:
    keys = set(env_overrides(os.environ))
    if args.config:
        keys |= set(parse_kv(Path(args.config).read_text(encoding="utf-8")))
    return keys


def _seeds(text, fallback):
    if text is None:
        return [fallback]
    return [int(s) for s in str(text).split(",") if s.strip()]


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dims_for(bundle, cfg: ModelConfig, args=None) -> ModelConfig:
    """Fit feature dims (and a too-small token width) to the data.

    Synthetic datasets record their window length; it becomes the stream
    window unless the config file or environment sets one.
    """
    dims = bundle.catalog.dims()
    cfg = cfg.replace(d=dims["cf"], d_t=dims["txt"] or cfg.d_t, d_vis=dims["vis"] or cfg.d_vis,
                      d_aud=dims["aud"] or cfg.d_aud, d_ell=max(cfg.d_ell, dims["cf"]))
    synth = bundle.manifest.get("synthetic")
    if synth and args is not None and not {"window_size", "window_mode"} & _explicit_keys(args):
        cfg = cfg.replace(window_mode="events", window_size=synth["window_events"])
    return cfg


# -- subcommands ------------------------------------------------------------------

def cmd_generate(args) -> int:
    seed = args.seed if args.seed is not None else 0
    spec, _ = benchmarks.PRESETS[args.preset](seed)
    for name in ("n_users", "n_items", "n_interactions", "drift_angle", "drift_onset_window",
                 "modality_dependence", "evidence_dependence", "cold_fraction"):
        value = getattr(args, name)
        if value is not None:
            setattr(spec, name, value)
    bundle = generate_synthetic(spec)
    path = write_bundle(bundle, _out(args) / "data")
    print(f"wrote {len(bundle.interactions)} interactions, {bundle.catalog.n_items} items, "
          f"{bundle.catalog.n_users} users to {path}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    bundle = ingest(args.path, streaming=args.streaming)
    cat = bundle.catalog
    summary = {"n_users": cat.n_users, "n_items": cat.n_items, "n_interactions": len(bundle.interactions),
               "dims": cat.dims(),
               "modality_coverage": {m: int(cat.modality_flag(m).sum()) for m in ("cf", "txt", "vis", "aud")}}
    print(json.dumps(summary, indent=1, sort_keys=True))
    if args.out:
        (_out(args) / "ingest_summary.json").write_text(json.dumps(summary, sort_keys=True), encoding="utf-8")
    return EXIT_OK


def _train(bundle, cfg, split_mode, seed):
    inter = bundle.interactions
    spec = SplitSpec(split_mode, window_mode=cfg.window_mode, window_size=cfg.window_size,
                     cold_threshold=cfg.cold_threshold)
    splits = make_splits(inter, spec, seed)
    system = Recommender.build(bundle.catalog, cfg)
    pretrain(system, inter.take(splits.train), log=log.info)
    return system, spec, splits


def cmd_pretrain(args) -> int:
    bundle = ingest(args.data, streaming=args.split == "streaming")
    cfg = _dims_for(bundle, _config(args), args)
    system, _, splits = _train(bundle, cfg, args.split, cfg.seed)
    out = _out(args)
    system.save(out / "model.ckpt", extra_meta={"data": str(Path(args.data).resolve()), "split": args.split})
    write_features(out / "latents.bin", bundle.catalog.item_ids, system.Zb)
    print(f"pretrained on {len(splits.train)} interactions; final loss {system.history[-1]:.5f}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'latents.bin'}")
    return EXIT_OK


def _report_seeds(reports: dict, key: str = "hit@10") -> None:
    """Per-seed summary and, with two systems over >= 2 seeds, a paired t-test."""
    for name, reps in reports.items():
        vals = [r.metrics[key] for r in reps]
        print(f"{name:8s} {key} per seed: " + " ".join(f"{v:.4f}" for v in vals) + f"  mean {np.mean(vals):.4f}")
    names = list(reports)
    if len(names) == 2 and len(reports[names[0]]) >= 2:
        t, p = paired_ttest([r.metrics[key] for r in reports[names[1]]], [r.metrics[key] for r in reports[names[0]]])
        print(f"paired t-test {names[1]} vs {names[0]}: t={t:.3f} p={p:.4f}")


def cmd_run_stream(args) -> int:
    bundle = ingest(args.data, streaming=True)
    out = _out(args)
    if args.resume:
        meta = load_checkpoint(args.resume)[1]
        cfg = ModelConfig.from_dict(meta["config"])
        spec = SplitSpec("streaming", window_mode=cfg.window_mode, window_size=cfg.window_size)
        splits = make_splits(bundle.interactions, spec, cfg.seed)
        n_windows = meta["stream"]["info"]["n_windows"]
        splits.windows, splits.spans = splits.windows[:n_windows], splits.spans[:n_windows]
        runner = StreamRunner.resume(args.resume, bundle.interactions, splits, spec, bundle.catalog)
        name = f"stream_{'dynamic' if runner.adapter else 'static'}_seed{runner.seed}"
        rep = runner.run(stop=args.stop_after, checkpoint_path=out / f"{name}.ckpt")
        print(rep.to_table())
        rep.save(out / name)
        return EXIT_OK
    base_cfg = _dims_for(bundle, _config(args), args)
    modes = {"static": (False, False), "dynamic": (True, True)}
    if args.mode != "both":
        modes = {args.mode: modes[args.mode]}
    reports = {m: [] for m in modes}
    for seed in _seeds(args.seeds, base_cfg.seed):
        cfg = base_cfg.replace(seed=seed)
        system, spec, splits = _train(bundle, cfg, "streaming", seed)
        if args.windows is not None:
            splits.windows = splits.windows[:args.windows]
            splits.spans = splits.spans[:args.windows]
        for mode, (adapter, update) in modes.items():
            snapshot = {k: v.copy() for k, v in system.adapter.tensors().items()}, system.adapter.meta()
            runner = StreamRunner(system, bundle.interactions, splits, spec, adapter=adapter, update=update)
            ckpt = out / f"stream_{mode}_seed{seed}.ckpt"
            rep = runner.run(stop=args.stop_after, checkpoint_path=ckpt)
            system.adapter.load(*snapshot)
            rep.save(out / f"stream_{mode}_seed{seed}")
            print(f"== {mode} seed {seed}")
            print(rep.to_table())
            if rep.metrics:
                reports[mode].append(rep)
    if all(reports.values()):
        _report_seeds(reports)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.split == "streaming":
        args.mode, args.resume = "both", None
        return cmd_run_stream(args)
    bundle = ingest(args.data)
    out = _out(args)
    base_cfg = _dims_for(bundle, _config(args), args)
    reports = {"system": []}
    known = np.arange(len(bundle.interactions))
    for seed in _seeds(args.seeds, base_cfg.seed):
        if args.model:
            system = Recommender.load(args.model, bundle.catalog)[0]
            spec = SplitSpec(args.split, cold_threshold=system.cfg.cold_threshold)
            splits = make_splits(bundle.interactions, spec, seed)
        else:
            system, spec, splits = _train(bundle, base_cfg.replace(seed=seed), args.split, seed)
        rep = evaluate(system, bundle.interactions, splits.test, known, seed=seed, faithfulness=system.use_evidence)
        if args.latency:
            lat = measure_latency(system, [(20, 8), (50, 16), (80, 32)], seed=seed)
            rep.latency = lat.rows
            rep.info["latency_r2"] = lat.r2
        rep.info.update({"split": args.split, "seed": seed})
        rep.save(out / f"eval_{args.split}_seed{seed}")
        print(f"== seed {seed}")
        print(rep.to_table())
        reports["system"].append(rep)
    _report_seeds(reports)
    return EXIT_OK


def cmd_explain(args) -> int:
    bundle = ingest(args.data)
    cat = bundle.catalog
    system = Recommender.load(args.model, cat)[0]
    user, item = cat.user_index(args.user), cat.item_index(args.item)
    inter = bundle.interactions
    keys = np.arange(len(inter))
    hist, anchor = user_history(inter.users, inter.items, keys, np.array([user]), np.array([len(inter)]),
                                system.cfg.L)
    anchor = int(anchor[0])
    cache = load_or_rebuild(_out(args) / "evidence_cache.json", cat, max(system.n_nbr, 1),
                            force=args.rebuild_evidence)
    attended = system.evidence_pack(user, anchor)
    if anchor >= 0:
        entry = cache.entries[str(cat.item_ids[anchor])]
        nbrs = [(cat.item_index(iid), s) for iid, s in entry["neighbors"][:system.n_nbr]]
        pack = EvidencePack(nbrs, attended.attributes)
    else:
        pack = attended
    text = generate_rationale(pack, cat.item_titles[item], cat)
    print(text)
    print(json.dumps({"user": args.user, "item": args.item,
                      "anchor": None if anchor < 0 else cat.item_ids[anchor],
                      "evidence": pack.to_json(cat)}, indent=1))
    if args.dump_prompt:
        h = system.Hb[[user]]
        hist_ids = hist[0][hist[0] >= 0]
        evid = encode_evidence(pack, system.evid, system.Zb, system.cfg.E)
        bundle_ = assemble_prompt(system.token(h)[0], system.tok_base[hist_ids], evid,
                                  system.tok_base[[item]], [cat.item_ids[item]], system.cfg.L, system.cfg.E)
        bundle_.dump(args.dump_prompt)
        print(f"prompt tokens written to {args.dump_prompt}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    ids, X = read_features(args.input)
    cb = train_codebook(X, M=args.M, K=args.K, iters=args.iters, seed=args.seed or 0)
    codes = encode_batch(cb, X)
    out = _out(args)
    cb.save(out / "codebook.ckpt", codes)
    print(f"M={args.M} K={args.K} mse={reconstruction_mse(cb, X):.6g} "
          f"compression={memory_ratio(X.shape[1], args.M, args.K):.1f}x")
    print(f"wrote {out / 'codebook.ckpt'} ({len(ids)} codes)")
    return EXIT_OK


def cmd_check_grads(args) -> int:
    rep = benchmarks.check_gradients(args.seed or 0, max_coords=None if args.all else args.max_coords)
    for line in rep.lines():
        print(line)
    print(f"max relative error {rep.max_rel_error:.3e}: {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_NUMERIC


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (ALIGNREC_<KEY> env vars override)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="alignrec", parents=[common], description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--preset", choices=sorted(benchmarks.PRESETS), default="small")
    for name, typ in (("n_users", int), ("n_items", int), ("n_interactions", int), ("drift_angle", float),
                      ("drift_onset_window", int), ("modality_dependence", float),
                      ("evidence_dependence", float), ("cold_fraction", float)):
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("ingest", parents=[common], help="validate a dataset directory")
    i.add_argument("path")
    i.add_argument("--streaming", action="store_true", help="require time-ordered interactions")
    i.set_defaults(func=cmd_ingest, out=None)

    t = sub.add_parser("pretrain-base", parents=[common], help="train and freeze the offline model")
    t.add_argument("--data", required=True)
    t.add_argument("--split", choices=["standard", "cold_start", "streaming"], default="standard")
    t.set_defaults(func=cmd_pretrain)

    for name, func, hlp in (("run-stream", cmd_run_stream, "static vs dynamic streaming evaluation"),
                            ("evaluate", cmd_evaluate, "offline ranking metrics")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--data", required=True)
        s.add_argument("--seeds", help="comma-separated seeds")
        s.add_argument("--windows", type=int, help="limit the number of online windows")
        s.add_argument("--stop-after", type=int, help="checkpoint and stop after this many windows")
        if name == "run-stream":
            s.add_argument("--mode", choices=["static", "dynamic", "both"], default="both")
            s.add_argument("--resume", help="continue from a stream checkpoint")
            s.set_defaults(split="streaming")
        else:
            s.add_argument("--split", choices=["standard", "cold_start", "streaming"], default="standard")
            s.add_argument("--model", help="pretrained checkpoint (otherwise train per seed)")
            s.add_argument("--latency", action="store_true", help="also time prompt scoring")
        s.set_defaults(func=func)

    e = sub.add_parser("explain", parents=[common], help="rationale and evidence for one recommendation")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--user", required=True)
    e.add_argument("--item", required=True)
    e.add_argument("--rebuild-evidence", action="store_true", help="rebuild the evidence cache")
    e.add_argument("--dump-prompt", help="write the prompt token matrix to this file")
    e.set_defaults(func=cmd_explain)

    q = sub.add_parser("quantize", parents=[common], help="product-quantize a latent file")
    q.add_argument("--in", dest="input", required=True)
    q.add_argument("--M", type=int, default=8)
    q.add_argument("--K", type=int, default=256)
    q.add_argument("--iters", type=int, default=20)
    q.set_defaults(func=cmd_quantize)

    c = sub.add_parser("check-grads", parents=[common], help="finite-difference check of the full objective")
    c.add_argument("--max-coords", type=int, default=12, help="coordinates sampled per block")
    c.add_argument("--all", action="store_true", help="check every coordinate")
    c.set_defaults(func=cmd_check_grads)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AlignRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
