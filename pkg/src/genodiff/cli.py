"""Command-line entry point.

Subcommands: gen-data, build-index, retrieve, train, train-aligner,
train-classifier, sample, evaluate.  Exit status is 0 on success, 1 on a
usage error and 2 on a runtime failure.  Every command writes a manifest
JSON next to its output with the resolved config, seeds and content hashes
of its inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import pipeline as pl
from .aligner import GuidanceConfig, guided_sample
from .checkpoint import CheckpointContainer, CheckpointError, creation_time, load_checkpoint, module_tensors, \
    save_checkpoint
from .config import RunConfig
from .diffusion import IMAGE_SIZE, CHANNELS, seeds_for
from .evaluation import ClassifierConfig, ModelStack, PhenotypeClassifier, evaluate_top_n, \
    train_phenotype_classifier
from .genome import DnaRecord, EnvCoord, SequenceError, read_fasta
from .numerics import NonFiniteError
from .retrieval import KmerIndex, build_index, retrieve_top_m
from .synth import SyntheticSpec, load_dataset, make_dataset, save_png, write_dataset

log = logging.getLogger("genodiff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# flag -> RunConfig field; flags default to None so the config file shows through
_FLAG_GROUPS: dict[str, list[tuple[str, str, type]]] = {
    "retrieval": [("--k", "k", int), ("--k-index", "k_index", int), ("--msa-depth", "msa_depth", int),
                  ("--min-score", "min_score", float)],
    "model": [("--d", "d", int), ("--n-layers", "n_layers", int), ("--timesteps", "T", int),
              ("--schedule", "schedule", str), ("--unet-base", "unet_base", int)],
    "train": [("--steps", "steps", int), ("--batch-size", "batch_size", int), ("--lr", "lr", float),
              ("--lr-schedule", "lr_schedule", str), ("--lr-period", "lr_period", int),
              ("--query-noise", "query_noise", float), ("--noise-prob", "noise_prob", float)],
    "aligner": [("--aligner-steps", "aligner_steps", int), ("--aligner-lr", "aligner_lr", float),
                ("--aligner-batch-size", "aligner_batch_size", int), ("--tau", "tau", float),
                ("--d-a", "d_a", int)],
    "guidance": [("--guidance-w", "w", float), ("--eta", "eta", float)],
    "classifier": [("--classifier-steps", "classifier_steps", int), ("--classifier-lr", "classifier_lr", float)],
    "eval": [("--calibration-pairs", "calibration_pairs", int)],
}


def _add_flags(p: argparse.ArgumentParser, *groups: str) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, dest="cfg_seed", metavar="SEED")
    p.add_argument("--workers", type=int, dest="cfg_workers", metavar="N")
    for g in groups:
        for flag, field, typ in _FLAG_GROUPS[g]:
            p.add_argument(flag, type=typ, dest=f"cfg_{field}", metavar=field.upper())
        if g == "guidance":
            p.add_argument("--alg1-literal", action="store_const", const=True, dest="cfg_alg1_literal")


def resolve_config(args, base: dict | None = None) -> RunConfig:
    """Checkpoint echo < config file < explicit flags."""
    data = dict(base or {})
    if getattr(args, "config", None):
        try:
            data.update(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: not valid JSON ({exc})") from None
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    data.update(overrides)
    try:
        return RunConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


# --- manifests ---------------------------------------------------------------


def content_hash(path) -> str:
    """Git-style object id: blob hash for files, tree-like hash for directories."""
    p = Path(path)
    if p.is_dir():
        lines = [f"{content_hash(c)} {c.name}" for c in sorted(p.iterdir()) if not c.name.endswith(".manifest.json")]
        body = "\n".join(lines).encode()
        return hashlib.sha1(b"tree %d\0" % len(body) + body).hexdigest()
    data = p.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig | None, inputs: Sequence, extra: dict | None = None) -> Path:
    path = out / "run.manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    manifest = {
        "command": command,
        "version": __version__,
        "created": creation_time(),
        "config": cfg.to_dict() if cfg is not None else None,
        "seeds": _seeds(cfg) if cfg is not None else None,
        "inputs": {str(p): content_hash(p) for p in inputs if p is not None},
    }
    manifest.update(extra or {})
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _seeds(cfg: RunConfig) -> dict:
    # offsets used by the training loops and model builders
    return {"base": cfg.seed, "conditioner_init": cfg.seed, "denoiser_init": cfg.seed + 1,
            "aligner_init": cfg.seed + 2, "diffusion_batches": cfg.seed + 17, "aligner_batches": cfg.seed + 29}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --- index persistence -------------------------------------------------------


def _ragged(arrays) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros(len(arrays) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(a) for a in arrays])
    flat = np.concatenate(arrays) if arrays else np.zeros(0)
    return flat, offsets


def index_to_container(index: KmerIndex, metadata: dict | None = None) -> CheckpointContainer:
    bases, base_off = _ragged([np.frombuffer(r.bases.encode("ascii"), dtype=np.uint8) for r in index.corpus])
    kmers, kmer_off = _ragged([s.astype(np.int64) for s in index.kmer_sets])
    keys = np.array(sorted(index.postings), dtype=np.int64)
    post, post_off = _ragged([index.postings[int(k)].astype(np.int64) for k in keys])
    envs = np.array([[r.env.lat_deg, r.env.lon_deg] if r.env else [np.nan, np.nan] for r in index.corpus],
                    dtype=np.float64).reshape(-1, 2)
    meta = {"kind": "kmer-index", "k_index": index.k_index, "ids": [r.id for r in index.corpus],
            "created": creation_time(), **(metadata or {})}
    return CheckpointContainer(meta, {
        "corpus.bases": bases.astype(np.uint8), "corpus.offsets": base_off, "corpus.env": envs,
        "kmers.values": kmers.astype(np.int64), "kmers.offsets": kmer_off,
        "postings.keys": keys, "postings.values": post.astype(np.int64), "postings.offsets": post_off,
    })


def index_from_container(ckpt: CheckpointContainer) -> KmerIndex:
    meta, t = ckpt.metadata, ckpt.tensors
    if meta.get("kind") != "kmer-index":
        raise CheckpointError("container does not hold a k-mer index")
    corpus = []
    off = t["corpus.offsets"]
    for i, rid in enumerate(meta["ids"]):
        lat, lon = t["corpus.env"][i]
        env = None if np.isnan(lat) else EnvCoord(float(lat), float(lon))
        corpus.append(DnaRecord(rid, t["corpus.bases"][off[i]:off[i + 1]].tobytes().decode("ascii"), env))
    ko = t["kmers.offsets"]
    kmer_sets = [t["kmers.values"][ko[i]:ko[i + 1]] for i in range(len(corpus))]
    po = t["postings.offsets"]
    postings = {int(k): t["postings.values"][po[i]:po[i + 1]] for i, k in enumerate(t["postings.keys"])}
    return KmerIndex(int(meta["k_index"]), corpus, kmer_sets, postings)


# --- model checkpoints -------------------------------------------------------


def _ckpt_meta(kind: str, cfg: RunConfig, step: int, **extra) -> dict:
    return {"kind": kind, "config": cfg.to_dict(), "seed": cfg.seed, "step": step, "created": creation_time(),
            **extra}


def _expect(ckpt: CheckpointContainer, kind: str, path) -> CheckpointContainer:
    if ckpt.metadata.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {ckpt.metadata.get('kind')!r}")
    return ckpt


def load_diffusion(path, cfg: RunConfig | None = None):
    ckpt = _expect(load_checkpoint(path), "diffusion", path)
    cfg = cfg or RunConfig.from_dict(ckpt.metadata["config"])
    conditioner, denoiser = pl.build_models(cfg)
    ckpt.load_into(conditioner, "conditioner")
    ckpt.load_into(denoiser, "denoiser")
    return conditioner.eval(), denoiser.eval(), ckpt


def load_conditioner(path, cfg: RunConfig):
    """Partial load: only the conditioner subtree of a diffusion checkpoint."""
    ckpt = _expect(load_checkpoint(path, prefix="conditioner"), "diffusion", path)
    conditioner, _ = pl.build_models(cfg)
    ckpt.load_into(conditioner, "conditioner")
    return conditioner.eval()


def load_aligner(path, cfg: RunConfig):
    ckpt = _expect(load_checkpoint(path), "aligner", path)
    aligner = pl.build_aligner(cfg)
    ckpt.load_into(aligner, "aligner")
    return aligner.eval()


def load_classifier(path):
    ckpt = _expect(load_checkpoint(path), "classifier", path)
    meta = ckpt.metadata
    model = PhenotypeClassifier(meta["n_classes"], CHANNELS, IMAGE_SIZE)
    ckpt.load_into(model, "classifier")
    return model.eval(), ckpt.tensors["classes"]


def _dataset_index(ds, cfg: RunConfig, index_path=None) -> KmerIndex | None:
    if max(cfg.msa_depth, *cfg.train_depths) == 0:
        return None
    if index_path:
        return index_from_container(load_checkpoint(index_path))
    return pl.index_for(ds.corpus, cfg)


# --- subcommands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    if args.n_per_combo is not None:
        cfg = cfg.updated(n_per_combo=args.n_per_combo)
    spec = SyntheticSpec(neutral_mutation_rate=cfg.neutral_mutation_rate, env_effect=cfg.env_effect)
    ds = make_dataset(cfg.n_per_combo, spec, cfg.seed)
    out = write_dataset(ds, args.out)
    write_manifest(out, "gen-data", cfg, [])
    print(f"wrote {len(ds.specimens)} specimens and {len(ds.corpus)} corpus records to {out}")
    return 0


def cmd_build_index(args) -> int:
    cfg = resolve_config(args)
    corpus = read_fasta(args.corpus)
    if args.metadata:
        from .genome import apply_metadata, read_metadata_tsv

        corpus = apply_metadata(corpus, read_metadata_tsv(args.metadata))
    index = build_index(corpus, cfg.k_index, workers=cfg.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, index_to_container(index))
    write_manifest(out, "build-index", cfg, [args.corpus, args.metadata])
    log.info("indexed %d records, %d distinct k-mers", len(index), len(index.postings))
    return 0


def cmd_retrieve(args) -> int:
    index = index_from_container(load_checkpoint(args.index))
    queries = read_fasta(args.fasta)
    print("query_id\trank\thit_id\tscore\tpadded")
    for q in queries:
        for rank, hit in enumerate(retrieve_top_m(index, q, args.m, args.min_score), start=1):
            print(f"{q.id}\t{rank}\t{hit.record.id}\t{hit.score:.6f}\t{int(hit.padded)}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    index = _dataset_index(ds, cfg, args.index)
    train = ds.split("train")
    depths = sorted({*cfg.train_depths, cfg.msa_depth})
    bank = pl.build_bank([s.record for s in train], index, depths, cfg.k, cfg.min_score, cfg.query_noise, cfg.seed)
    conditioner, denoiser = pl.build_models(cfg)
    hist = pl.train_diffusion(conditioner, denoiser, bank, pl.images_tensor(train), pl.schedule_for(cfg), cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tensors = module_tensors({"conditioner": conditioner, "denoiser": denoiser})
    save_checkpoint(out, CheckpointContainer(_ckpt_meta("diffusion", cfg, cfg.steps,
                                                         final_loss=float(np.mean(hist[-10:]))), tensors))
    write_manifest(out, "train", cfg, [args.data, args.config, args.index])
    return 0


def cmd_train_aligner(args) -> int:
    base = load_checkpoint(args.ckpt, prefix="conditioner").metadata["config"]
    cfg = resolve_config(args, base)
    conditioner = load_conditioner(args.ckpt, cfg)
    ds = load_dataset(args.data)
    index = _dataset_index(ds, cfg, args.index)
    train = ds.split("train")
    bank = pl.build_bank([s.record for s in train], index, [cfg.msa_depth], cfg.k, cfg.min_score, 0.0, cfg.seed,
                         variants=("clean",))
    pooled = pl.encode_bank(conditioner, bank, cfg.msa_depth, pooled=True)
    aligner = pl.build_aligner(cfg)
    hist = pl.train_aligner(aligner, pooled, pl.images_tensor(train), pl.schedule_for(cfg), cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = _ckpt_meta("aligner", cfg, cfg.aligner_steps, final_loss=float(np.mean(hist[-10:])),
                      diffusion_ckpt=content_hash(args.ckpt))
    save_checkpoint(out, CheckpointContainer(meta, module_tensors({"aligner": aligner})))
    write_manifest(out, "train-aligner", cfg, [args.ckpt, args.data, args.config, args.index])
    return 0


def cmd_train_classifier(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    train = ds.split("train")
    labels = [s.attrs.combo_id for s in train]
    model, classes, hist = train_phenotype_classifier(
        pl.images_tensor(train), labels,
        ClassifierConfig(steps=cfg.classifier_steps, lr=cfg.classifier_lr, seed=cfg.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = _ckpt_meta("classifier", cfg, cfg.classifier_steps, n_classes=len(classes),
                      final_loss=float(np.mean(hist[-10:])))
    tensors = module_tensors({"classifier": model})
    tensors["classes"] = np.asarray(classes, dtype=np.int64)
    save_checkpoint(out, CheckpointContainer(meta, tensors))
    write_manifest(out, "train-classifier", cfg, [args.data, args.config])
    return 0


def _parse_env(text: str) -> EnvCoord:
    try:
        lat, lon = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--env expects 'lat,lon', got {text!r}") from None
    return EnvCoord(lat, lon)


def cmd_sample(args) -> int:
    base = load_checkpoint(args.ckpt).metadata.get("config", {})
    cfg = resolve_config(args, base)
    if cfg.w > 0 and not args.aligner_ckpt:
        raise UsageError("guidance needs --aligner-ckpt (or pass --guidance-w 0)")
    if cfg.msa_depth > 0 and not args.index:
        raise UsageError("--msa-depth > 0 needs --index (or pass --msa-depth 0)")
    conditioner, denoiser, _ = load_diffusion(args.ckpt, cfg)
    aligner = load_aligner(args.aligner_ckpt, cfg) if args.aligner_ckpt else None
    index = index_from_container(load_checkpoint(args.index)) if args.index else None
    queries = read_fasta(args.fasta)
    if args.env:
        env = _parse_env(args.env)
        queries = [q.with_env(env) for q in queries]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bank = pl.build_bank(queries, index, [cfg.msa_depth], cfg.k, cfg.min_score, 0.0, cfg.seed, variants=("clean",))
    conds = pl.encode_bank(conditioner, bank, cfg.msa_depth)
    guidance = GuidanceConfig(w=cfg.w, eta=cfg.eta, alg1_literal=cfg.alg1_literal)
    schedule = pl.schedule_for(cfg)
    written = []
    for i, q in enumerate(queries):
        seeds = seeds_for(args.sample_seed + 1_000_003 * i, args.n)
        images = guided_sample(conds[i:i + 1].expand(args.n, -1, -1), schedule, denoiser, aligner, guidance, seeds,
                               (CHANNELS, IMAGE_SIZE, IMAGE_SIZE))
        for j, img in enumerate(images):
            name = f"{q.id}_{j:03d}.png"
            save_png(out / name, img.double().numpy())
            written.append(name)
    write_manifest(out, "sample", cfg, [args.ckpt, args.aligner_ckpt, args.index, args.fasta],
                   {"sample_seed": args.sample_seed, "n": args.n, "images": written})
    log.info("wrote %d images to %s", len(written), out)
    return 0


def cmd_evaluate(args) -> int:
    from .study import calibrate, eval_items

    base = load_checkpoint(args.ckpt).metadata.get("config", {})
    cfg = resolve_config(args, base)
    try:
        n_list = sorted({int(v) for v in args.n.split(",")})
    except ValueError:
        raise UsageError(f"--n expects a comma-separated list of integers, got {args.n!r}") from None
    if not n_list or n_list[0] < 1:
        raise UsageError("--n values must be positive")
    conditioner, denoiser, _ = load_diffusion(args.ckpt, cfg)
    aligner = load_aligner(args.aligner_ckpt, cfg)
    classifier, _ = load_classifier(args.classifier_ckpt)
    ds = load_dataset(args.data)
    index = _dataset_index(ds, cfg, args.index)
    train = ds.split("train")
    bank = pl.build_bank([s.record for s in train], index, [cfg.msa_depth], cfg.k, cfg.min_score, 0.0, cfg.seed,
                         variants=("clean",))
    cal = calibrate(aligner, pl.encode_bank(conditioner, bank, cfg.msa_depth), pl.images_tensor(train),
                    [s.attrs.combo_id for s in train], cfg)
    specimens = ds.split(args.split)
    if args.max_items:
        specimens = specimens[: args.max_items]
    if not specimens:
        raise ValueError(f"split {args.split!r} of {args.data} is empty")
    items = eval_items(conditioner, specimens, index, cfg)[("clean", cfg.msa_depth)]
    guidance = GuidanceConfig(w=cfg.w, eta=cfg.eta, alg1_literal=cfg.alg1_literal)
    stack = ModelStack(denoiser, aligner, classifier, pl.schedule_for(cfg), guidance, cal.threshold.x0)
    report = evaluate_top_n(stack, items, n_list, args.eval_seed, cfg.workers)
    doc = {
        **report.to_dict(),
        "split": args.split,
        "calibration": cal.to_dict(),
        "config": cfg.to_dict(),
        "seeds": {**_seeds(cfg), "eval": args.eval_seed},
        "checkpoints": {"diffusion": content_hash(args.ckpt), "aligner": content_hash(args.aligner_ckpt),
                        "classifier": content_hash(args.classifier_ckpt)},
    }
    out = Path(args.out)
    _write_json(out, doc)
    write_manifest(out, "evaluate", cfg, [args.ckpt, args.aligner_ckpt, args.classifier_ckpt, args.data, args.index])
    for n, row in report.to_dict()["per_n"].items():
        print(f"n={n}\tsuccess_rate={row['success_rate']:.4f}\tmean_best_score={row['mean_best_score']:.4f}"
              f"\tpes={row['pes']:.4f}")
    return 0


# --- dispatch ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="genodiff", description="Genotype-to-phenotype diffusion toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic genotype/phenotype world")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-combo", type=int)
    _add_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-index", help="index a reference corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--metadata", help="TSV with id, lat, lon, label")
    p.add_argument("--out", required=True)
    _add_flags(p, "retrieval")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("retrieve", help="print the top-m hits per query as TSV")
    p.add_argument("--index", required=True)
    p.add_argument("--fasta", required=True)
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--min-score", type=float, default=0.0)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train", help="train conditioner and denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--index", help="prebuilt index (default: index the dataset corpus)")
    p.add_argument("--out", required=True)
    _add_flags(p, "retrieval", "model", "train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-aligner", help="train the image/condition aligner")
    p.add_argument("--ckpt", required=True, help="diffusion checkpoint (conditioner is reused)")
    p.add_argument("--data", required=True)
    p.add_argument("--index")
    p.add_argument("--out", required=True)
    _add_flags(p, "retrieval", "aligner")
    p.set_defaults(func=cmd_train_aligner)

    p = sub.add_parser("train-classifier", help="train the phenotype classifier used for PES")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_flags(p, "classifier")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("sample", help="generate phenotype images for DNA queries")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--aligner-ckpt")
    p.add_argument("--index")
    p.add_argument("--fasta", required=True)
    p.add_argument("--env", help="lat,lon applied to every query")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_flags(p, "retrieval", "guidance")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="best-of-n evaluation report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--aligner-ckpt", required=True)
    p.add_argument("--classifier-ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index")
    p.add_argument("--split", choices=("val", "unseen", "train"), default="val")
    p.add_argument("--max-items", type=int)
    p.add_argument("--n", default="1,5,10,20,50,100")
    p.add_argument("--eval-seed", type=int, default=12345)
    p.add_argument("--out", required=True)
    _add_flags(p, "retrieval", "guidance", "eval")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        pl.set_determinism()
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (SequenceError, CheckpointError, pl.TrainingError, NonFiniteError, OSError, ValueError, KeyError) as exc:
        print(f"genodiff: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
