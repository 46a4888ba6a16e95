"""Command line front end.

Every subcommand works inside one run directory (``--out``). Stage outputs
carry the hash of the config fields that produced them, and downstream stages
refuse inputs whose hash differs from what the current config expects. The
resolved config is written to ``<out>/config.json`` and reused as the base by
later invocations, so flags only need to be given once.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attack import AttackConfig, attack_templates, sar_report
from .errors import SpecFaceError
from .evaluation import EvalReport, ScoreSet, tradeoff_grid
from .gcn import GcnModel
from .geometry import assemble_descriptors
from .mesh import generate_corpus, load_mesh, prepare_mesh, read_corpus, write_corpus
from .pipeline import (PipelineConfig, build_corpus, embed, eval_keys, evaluate, extract_features, mesh_features,
                       train_embedding, train_protection)
from .protect import KeyMaterial, PhiNetwork, ProtectedTemplate, diffuse
from .service import (DEFAULT_PORT, Client, ServiceError, TemplateServer, TemplateStore, Verifier,
                      configure_logging)
from .spectral import gft, mesh_basis


class MissingArtifactError(SpecFaceError, FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# run directory helpers
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, out, cfg: PipelineConfig):
        self.out = Path(out)
        self.cfg = cfg

    corpus_dir = property(lambda self: self.out / "corpus")
    features = property(lambda self: self.out / "features.npz")
    gcn = property(lambda self: self.out / "gcn.ckpt")
    embeddings = property(lambda self: self.out / "embeddings.npz")
    phi = property(lambda self: self.out / "phi.ckpt")
    eval_dir = property(lambda self: self.out / "eval")

    def stamp(self, stage: str, **extra) -> dict:
        return {"stage": stage, "config_hash": self.cfg.stage_hash(stage), **extra}

    def save_config(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True))

    def write_meta(self, path: Path, stage: str, **extra) -> None:
        meta = self.stamp(stage, config=self.cfg.to_dict(), **extra)
        _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))

    def require(self, path: Path, stage: str, producer: str) -> dict:
        """Read an artifact's metadata, checking it exists and matches the current config."""
        meta_path = _meta_path(path)
        if not path.exists() or not meta_path.exists():
            raise MissingArtifactError(f"{path} not found; run `specface {producer}` first")
        meta = json.loads(meta_path.read_text())
        self.cfg.check(stage, meta.get("config_hash"))
        return meta


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".json") if path.suffix else path / "stage.json"


def _resolve_config(args) -> PipelineConfig:
    out = Path(args.out)
    if args.config:
        cfg = PipelineConfig.load(args.config)
    elif (out / "config.json").exists():
        cfg = PipelineConfig.load(out / "config.json")
    else:
        cfg = PipelineConfig()
    top = {}
    if args.K is not None:
        top["k"] = args.K
    if args.T is not None:
        top["t"] = args.T
    if args.no_gcn:
        top["no_gcn"] = True
    if args.seed is not None:
        top.update(eval_seed=args.seed, gcn=replace(cfg.gcn, seed=args.seed),
                   protect=replace(cfg.protect, seed=args.seed), attack=replace(cfg.attack, seed=args.seed))
    if getattr(args, "subjects", None) is not None or getattr(args, "scans", None) is not None \
            or getattr(args, "vertices", None) is not None:
        c = cfg.corpus
        top["corpus"] = replace(c, subject_count=args.subjects or c.subject_count,
                                scans_per_subject=args.scans or c.scans_per_subject,
                                vertex_count=args.vertices or c.vertex_count)
    if getattr(args, "epochs", None) is not None:
        if args.command == "train-gcn":
            top["gcn"] = replace(top.get("gcn", cfg.gcn), epochs=args.epochs)
        elif args.command == "train-protect":
            top["protect"] = replace(top.get("protect", cfg.protect), epochs=args.epochs)
    if getattr(args, "workers", None) is not None:
        top["workers"] = args.workers
    return replace(cfg, **top) if top else cfg


def _emit(args, payload: dict, lines: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in lines:
            print(line)


# ---------------------------------------------------------------------------
# loaders shared by several stages
# ---------------------------------------------------------------------------

def _load_features(run: Run):
    run.require(run.features, "features", "extract")
    with np.load(run.features) as data:
        feats = data["features"]
        keys = [tuple(k) for k in json.loads(str(data["keys"]))]
    return feats, keys


def _load_embedder(run: Run):
    if run.cfg.no_gcn:
        return None
    run.require(run.gcn, "embed", "train-gcn")
    return GcnModel.load(run.gcn)


def _load_embeddings(run: Run) -> np.ndarray:
    run.require(run.embeddings, "embed", "train-gcn")
    with np.load(run.embeddings) as data:
        return data["z"]


def _load_phi(run: Run) -> PhiNetwork:
    run.require(run.phi, "protect", "train-protect")
    return PhiNetwork.load(run.phi)


def _best_threshold(run: Run, explicit) -> float:
    if explicit is not None:
        return float(explicit)
    report = run.eval_dir / "report.json"
    if not report.exists():
        raise MissingArtifactError(f"{report} not found; run `specface eval` first or pass --threshold")
    meta = run.require(run.eval_dir, "eval", "eval")
    del meta
    return float(json.loads(report.read_text())["protected"]["best_threshold"])


def _read_key(path) -> KeyMaterial:
    return KeyMaterial.from_hex(Path(path).read_text().strip())


def _client_template(run: Run, args) -> tuple[ProtectedTemplate, KeyMaterial]:
    """Build a protected template on the client side from a mesh file or a known scan."""
    cfg = run.cfg
    if args.mesh:
        f = mesh_features(load_mesh(args.mesh), cfg.k, cfg.crop)
    else:
        feats, keys = _load_features(run)
        subj, scan = args.scan.split(":", 1)
        want = (str(subj), str(scan))
        rows = [i for i, k in enumerate(keys) if (str(k[0]), str(k[1])) == want]
        if not rows:
            raise SpecFaceError(f"scan {args.scan} is not in the extracted corpus")
        f = feats[rows[0]]
    model = _load_embedder(run)
    z = embed(model, f[None], cfg)[0]
    key_path = Path(args.key_file)
    if key_path.exists():
        key = _read_key(key_path)
    elif args.command == "enroll":
        rng = np.random.default_rng(args.seed) if args.seed is not None else np.random.default_rng()
        key = KeyMaterial.random(rng)
        key_path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(key_path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        with os.fdopen(fd, "w") as fh:
            fh.write(key.hex() + "\n")
    else:
        raise MissingArtifactError(f"key file {key_path} not found")
    return diffuse(z, key, cfg.schedule, _load_phi(run), k=cfg.k), key


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_synth(run: Run, args):
    spec = run.cfg.corpus
    meshes = generate_corpus(spec)
    write_corpus(meshes, spec, run.corpus_dir)
    run.write_meta(run.corpus_dir, "corpus")
    _emit(args, {"meshes": len(meshes), "dir": str(run.corpus_dir)},
          [f"wrote {len(meshes)} meshes to {run.corpus_dir}"])


def cmd_extract(run: Run, args):
    run.require(run.corpus_dir, "corpus", "gen-synth")
    meshes, _ = read_corpus(run.corpus_dir)
    t0 = time.perf_counter()
    feats = extract_features(meshes, run.cfg.k, run.cfg.crop, cache_dir=run.out / "basis",
                             workers=run.cfg.workers)
    keys = [[m.subject_id, m.scan_id] for m in meshes]
    np.savez(run.features, features=feats, keys=json.dumps(keys))
    run.write_meta(run.features, "features")
    _emit(args, {"shape": list(feats.shape), "seconds": time.perf_counter() - t0},
          [f"features {feats.shape} in {time.perf_counter() - t0:.2f}s -> {run.features}"])


def cmd_train_gcn(run: Run, args):
    feats, keys = _load_features(run)
    corpus = build_corpus(feats, keys, run.cfg)
    model, history = train_embedding(corpus, run.cfg)
    if model is not None:
        model.save(run.gcn)
        run.write_meta(run.gcn, "embed", history=history)
    z = embed(model, feats, run.cfg)
    np.savez(run.embeddings, z=z)
    run.write_meta(run.embeddings, "embed")
    final = history[-1] if history else None
    _emit(args, {"epochs": len(history), "final_loss": final, "no_gcn": run.cfg.no_gcn},
          [f"embeddings {z.shape}" + (f", final loss {final:.4f}" if final is not None else " (no GCN)")])


def cmd_train_protect(run: Run, args):
    feats, keys = _load_features(run)
    z = _load_embeddings(run)
    corpus = build_corpus(feats, keys, run.cfg)

    def log(epoch, record):
        if args.verbose and (epoch % 100 == 0 or epoch == run.cfg.protect.epochs - 1):
            print(json.dumps({"epoch": epoch, **record}), file=sys.stderr)

    phi, history = train_protection(z, corpus, run.cfg, log=log)
    phi.save(run.phi)
    run.write_meta(run.phi, "protect", history=history)
    final = history[-1] if history else {}
    _emit(args, {"epochs": len(history), "final": final},
          [f"phi trained for {len(history)} epochs, final total loss {final.get('total', float('nan')):.4f}"])


def _export_templates(run: Run, z, phi, corpus, directory: Path) -> Path:
    """Test-split templates under the first evaluation key plus a pair manifest."""
    directory.mkdir(parents=True, exist_ok=True)
    key = eval_keys(run.cfg, 1)[0]
    names = {}
    for i in np.flatnonzero(corpus.mask("test")):
        subj, scan = corpus.keys[i]
        name = f"s{subj}_{scan}.json"
        (directory / name).write_text(diffuse(z[i], key, run.cfg.schedule, phi, k=run.cfg.k).dumps())
        names[i] = name
    ia, ib, y = corpus.pairs("test", seed=run.cfg.pair_seed + 1)
    manifest = [[names[a], names[b], int(label)] for a, b, label in zip(ia, ib, y)]
    path = directory / "pairs.json"
    path.write_text(json.dumps(manifest))
    return path


def _report_from_templates(template_dir: Path, pairs_path: Path) -> EvalReport:
    pairs = json.loads(Path(pairs_path).read_text())
    cache = {}

    def vec(name):
        if name not in cache:
            cache[name] = ProtectedTemplate.loads((template_dir / name).read_text()).z_t
        return cache[name]

    sims, labels = [], []
    for a, b, label in pairs:
        va, vb = vec(a), vec(b)
        sims.append(float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb))))
        labels.append(int(label))
    return EvalReport.from_scores(ScoreSet.from_pairs(np.array(sims), np.array(labels)),
                                  meta={"templates": str(template_dir), "pairs": str(pairs_path)})


def cmd_eval(run: Run, args):
    if args.templates:
        pairs = args.pairs or Path(args.templates) / "pairs.json"
        report = _report_from_templates(Path(args.templates), Path(pairs))
        _emit(args, report.to_json(), [f"EER {report.eer:.4f}  F1 {report.f1:.4f}  theta {report.best_threshold:.4f}"])
        return
    feats, keys = _load_features(run)
    z = _load_embeddings(run)
    phi = _load_phi(run)
    corpus = build_corpus(feats, keys, run.cfg)
    result = evaluate(z, phi, corpus, run.cfg)
    out = run.eval_dir
    out.mkdir(parents=True, exist_ok=True)
    payload = {"unprotected": result["unprotected"].to_json(), "protected": result["protected"].to_json(),
               "linkage": result["linkage"]}
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    result["unprotected"].export_csv(out / "unprotected")
    result["protected"].export_csv(out / "protected")
    _export_templates(run, z, phi, corpus, out / "templates")
    run.write_meta(out, "eval")
    u, p = result["unprotected"], result["protected"]
    summary = {"unprotected": {"eer": u.eer, "f1": u.f1, "best_threshold": u.best_threshold},
               "protected": {"eer": p.eer, "f1": p.f1, "best_threshold": p.best_threshold,
                             "entropy": p.entropy}, "linkage": result["linkage"]}
    _emit(args, summary, [f"unprotected EER {u.eer:.4f}  F1 {u.f1:.4f}",
                          f"protected   EER {p.eer:.4f}  F1 {p.f1:.4f}  theta {p.best_threshold:.4f}",
                          f"report -> {out / 'report.json'}"])


def cmd_attack(run: Run, args):
    feats, keys = _load_features(run)
    z = _load_embeddings(run)
    phi = _load_phi(run)
    corpus = build_corpus(feats, keys, run.cfg)
    rows = np.flatnonzero(corpus.mask("test"))[:args.targets]
    key = eval_keys(run.cfg, 1)[0]
    sched = run.cfg.schedule
    targets = np.stack([diffuse(z[i], key, sched, phi).z_t for i in rows])
    base = run.cfg.attack
    thresholds = tuple(args.thresholds) if args.thresholds else base.thresholds
    theta = None
    try:
        theta = _best_threshold(run, args.threshold)
    except MissingArtifactError:
        pass
    if theta is not None:
        thresholds = tuple(sorted(set(thresholds) | {theta}))
    acfg = replace(base, iterations=args.iterations if args.iterations is not None else base.iterations,
                   step=args.step if args.step is not None else base.step,
                   restarts=args.restarts if args.restarts is not None else base.restarts,
                   thresholds=thresholds)
    result = attack_templates(targets, [key] * len(rows), sched, phi, acfg, with_key=not args.no_key)
    report = sar_report(result.best_similarity, acfg.thresholds)
    payload = dict(report.to_json(), theta_best=theta, with_key=not args.no_key, targets=len(rows),
                   config_hash=run.cfg.stage_hash("protect"))
    (run.out / "attack.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    _emit(args, payload, [f"SAR@{t:.3f} = {v:.3f}" for t, v in report.sar.items()])


def cmd_tradeoff(run: Run, args):
    grid = tradeoff_grid(tuple(args.Ks), tuple(args.Ts))
    _emit(args, {"grid": grid}, [json.dumps(row, sort_keys=True) for row in grid])


def cmd_enroll(run: Run, args):
    template, key = _client_template(run, args)
    with Client(args.host, args.port) as client:
        reply = client.enroll(args.user, template)
    _emit(args, reply, [json.dumps(reply)])
    if not reply.get("ok"):
        raise ServiceError(reply["error"]["code"], reply["error"]["message"])


def cmd_verify(run: Run, args):
    template, key = _client_template(run, args)
    with Client(args.host, args.port) as client:
        reply = client.verify(args.user, template)
    _emit(args, reply, [json.dumps(reply)])
    if not reply.get("ok"):
        raise ServiceError(reply["error"]["code"], reply["error"]["message"])


def cmd_revoke(run: Run, args):
    key = _read_key(args.key_file)
    with Client(args.host, args.port) as client:
        reply = client.revoke(args.user, key.key_id)
    _emit(args, reply, [json.dumps(reply)])
    if not reply.get("ok"):
        raise ServiceError(reply["error"]["code"], reply["error"]["message"])


def cmd_serve(run: Run, args):
    configure_logging()
    threshold = _best_threshold(run, args.threshold)
    journal = Path(args.journal) if args.journal else run.out / "journal.jsonl"
    store = TemplateStore(journal, (run.cfg.k, run.cfg.t, run.cfg.d))
    server = TemplateServer(Verifier(store, threshold), args.host, args.port)
    logging.getLogger("specface.service").info(
        "listening", extra={"event": {"host": args.host, "port": server.port, "threshold": threshold,
                                      "records": len(store)}})
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def cmd_bench(run: Run, args):
    """Per-example wall time of data preparation, feature extraction and inference."""
    cfg = run.cfg
    spec = replace(cfg.corpus, subject_count=1, scans_per_subject=args.examples)
    meshes = generate_corpus(spec)
    model = GcnModel.load(run.gcn) if run.gcn.exists() and not cfg.no_gcn else (
        None if cfg.no_gcn else GcnModel.from_config(cfg.gcn_config))
    phi = PhiNetwork.load(run.phi) if run.phi.exists() else PhiNetwork(cfg.d, seed=cfg.protect.seed)
    key = KeyMaterial.random(np.random.default_rng(cfg.eval_seed))
    timings = {"data_preparation": [], "feature_extraction": [], "inference": []}
    with tempfile.TemporaryDirectory() as tmp:
        paths = []
        for i, m in enumerate(meshes):
            p = Path(tmp) / f"m{i}.obj"
            from .mesh import save_obj
            save_obj(m, p)
            paths.append(p)
        enrolled = None
        for p in paths:
            t0 = time.perf_counter()
            mesh = prepare_mesh(load_mesh(p), crop=cfg.crop)
            t1 = time.perf_counter()
            f = gft(mesh_basis(mesh, cfg.k), assemble_descriptors(mesh))
            t2 = time.perf_counter()
            zt = diffuse(embed(model, f[None], cfg)[0], key, cfg.schedule, phi, k=cfg.k).z_t
            ref = zt if enrolled is None else enrolled
            float(zt @ ref / (np.linalg.norm(zt) * np.linalg.norm(ref)))
            enrolled = zt
            t3 = time.perf_counter()
            timings["data_preparation"].append(t1 - t0)
            timings["feature_extraction"].append(t2 - t1)
            timings["inference"].append(t3 - t2)
    stats = {k: {"mean_s": float(np.mean(v)), "median_s": float(np.median(v))} for k, v in timings.items()}
    payload = {"examples": args.examples, "K": cfg.k, "T": cfg.t, "stages": stats}
    _emit(args, payload, [f"{k:<20s} {v['mean_s'] * 1e3:9.3f} ms" for k, v in stats.items()])


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON pipeline config")
    common.add_argument("--out", default="specface-run", help="run directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help="seed for training, evaluation keys and attack restarts")
    common.add_argument("--K", type=int, help="retained spectral frequencies")
    common.add_argument("--T", type=int, help="diffusion steps")
    common.add_argument("--no-gcn", action="store_true", help="feed pooled F_low to protection (ablation)")
    common.add_argument("--json", action="store_true", help="machine-readable output")

    parser = argparse.ArgumentParser(prog="specface", description="Spectral 3D face templates with keyed diffusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = add("gen-synth", cmd_gen_synth, "generate the synthetic mesh corpus")
    p.add_argument("--subjects", type=int)
    p.add_argument("--scans", type=int)
    p.add_argument("--vertices", type=int)
    p = add("extract", cmd_extract, "compute truncated spectral descriptors")
    p.add_argument("--workers", type=int)
    p = add("train-gcn", cmd_train_gcn, "train the embedding network and embed every scan")
    p.add_argument("--epochs", type=int)
    p = add("train-protect", cmd_train_protect, "train the keyed diffusion network")
    p.add_argument("--epochs", type=int)
    p.add_argument("--verbose", action="store_true")
    p = add("eval", cmd_eval, "verification, unlinkability and entropy report")
    p.add_argument("--templates", help="evaluate an existing template directory instead")
    p.add_argument("--pairs", help="pair manifest for --templates (default: <templates>/pairs.json)")
    p = add("attack", cmd_attack, "white-box pre-image attack on test templates")
    p.add_argument("--iterations", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--restarts", type=int)
    p.add_argument("--thresholds", type=float, nargs="+")
    p.add_argument("--threshold", type=float, help="theta_best (default: from the eval report)")
    p.add_argument("--targets", type=int, default=20)
    p.add_argument("--no-key", action="store_true", help="attacker uses a random key of their own")
    p = add("tradeoff", cmd_tradeoff, "analytic trade-off model over a K x T grid")
    p.add_argument("--Ks", type=int, nargs="+", default=[10, 20, 25])
    p.add_argument("--Ts", type=int, nargs="+", default=[25, 50, 75])
    for name, func, help_ in (("enroll", cmd_enroll, "enroll a protected template"),
                              ("verify", cmd_verify, "verify a probe against an enrollment")):
        p = add(name, func, help_)
        p.add_argument("--user", required=True)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--mesh", help="OBJ/PLY face scan")
        src.add_argument("--scan", help="SUBJECT:SCAN from the extracted corpus")
        p.add_argument("--key-file", required=True, help="hex key file (created by enroll if missing)")
        p.add_argument("--host", default="127.0.0.1")
        p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p = add("revoke", cmd_revoke, "revoke an enrollment")
    p.add_argument("--user", required=True)
    p.add_argument("--key-file", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p = add("serve", cmd_serve, "run the enrollment/verification server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--journal", help="journal path (default: <out>/journal.jsonl)")
    p.add_argument("--threshold", type=float, help="decision threshold (default: from the eval report)")
    p = add("bench", cmd_bench, "time the three per-example stages")
    p.add_argument("--examples", type=int, default=8)
    return parser


_CONFIG_WRITERS = {"gen-synth", "extract", "train-gcn", "train-protect", "eval"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        run = Run(args.out, cfg)
        args.func(run, args)
        if args.command in _CONFIG_WRITERS:
            run.save_config()
    except ServiceError as exc:
        print(f"specface {args.command}: error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except (SpecFaceError, OSError, ValueError, KeyError) as exc:
        print(f"specface {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
