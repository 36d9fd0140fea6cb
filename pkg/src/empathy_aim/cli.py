"""Command-line front end.

Every command writes its artifacts plus one ``manifest.json`` into ``--out``.
Artifacts depend only on flags, input files and the seed; the manifest also
records the wall-clock duration, so it is the only file that differs between
otherwise identical runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .data import CORPUS_SUFFIX, DEFAULT_FEATURE_DIM, Corpus, parse_corpus, zscore_normalize
from .errors import AimError
from .evaluation import SWEEP_PARAMS, config_echo, cross_validate, kfold_split, sweep
from .model import ModelConfig, Variant, forward_conversation
from .nn import load_checkpoint, save_checkpoint
from .synth import MODES, SynthConfig, generate, write_synth
from .training import TrainConfig, accuracy, train

log = logging.getLogger("empathy_aim")

MANIFEST = "manifest.json"
DEFAULT_LAMBDA = 0.2
DEFAULT_WINDOW = 3


class UsageError(AimError):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(path: str | Path) -> dict[str, str]:
    """Hashes of the files a command actually reads: corpus files only for a directory."""
    p = Path(path)
    files = sorted(p.glob(f"*{CORPUS_SUFFIX}")) if p.is_dir() else [p]
    return {f.name: sha256_file(f) for f in files}


def write_manifest(out: Path, command: str, config: dict[str, Any], seed: int | None,
                   inputs: dict[str, str], artifacts: Sequence[Path], duration: float) -> Path:
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {k: {"path": v, "sha256": _input_hashes(v)} for k, v in inputs.items()},
        "outputs": {str(Path(a).relative_to(out)): sha256_file(a) for a in artifacts},
        "duration_s": round(duration, 3),
    }
    path = out / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def parse_values(text: str, parameter: str) -> list:
    """Comma list, or an inclusive integer range ``a..b`` (window_K only)."""
    text = text.strip()
    if ".." in text:
        if parameter != "window_K":
            raise UsageError("range syntax a..b is only valid for --param window_K")
        lo, hi = (int(x) for x in text.split("..", 1))
        if lo > hi:
            raise UsageError(f"empty range {text!r}")
        return list(range(lo, hi + 1))
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise UsageError("--values is empty")
    if parameter == "lambda":
        return [float(s) for s in items]
    if parameter == "window_K":
        return [int(s) for s in items]
    return items


def _load(path: str, dim: int, normalize: bool, scope: str) -> Corpus:
    corpus = parse_corpus(path, feature_dim=dim)
    return zscore_normalize(corpus, scope=scope) if normalize else corpus


def _model_config(a: argparse.Namespace) -> ModelConfig:
    variant = Variant(a.variant)
    if variant is Variant.IM and (a.lam is not None or a.window is not None):
        log.warning("--variant im has no influence layer; --lambda and --window are ignored")
    lam = DEFAULT_LAMBDA if a.lam is None else a.lam
    window = DEFAULT_WINDOW if a.window is None else a.window
    return ModelConfig(variant=variant, D=a.dim, H=a.hidden, P=a.proj, K=window, lam=lam,
                       window_mode=a.window_mode)


def _train_config(a: argparse.Namespace) -> TrainConfig:
    return TrainConfig(epochs=a.epochs, batch_size=a.batch, lr=a.lr, seed=a.seed)


def _echo(mcfg: ModelConfig, tcfg: TrainConfig, a: argparse.Namespace) -> dict[str, Any]:
    cfg = config_echo(mcfg, tcfg)
    cfg["data.normalize"] = a.normalize
    cfg["data.norm_scope"] = a.norm_scope
    return cfg


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_synth(a: argparse.Namespace) -> tuple[dict, dict, list[Path]]:
    cfg = SynthConfig(
        n_conversations=a.n, turns_per_conversation=(a.min_turns, a.max_turns),
        feature_dim=a.dim, influence_mode=a.mode, lag=a.lag, signal_strength=a.strength,
        label_balance=a.balance, seed=a.seed, subspace_dim=a.subspace, bias_scale=a.bias_scale,
    )
    paths = write_synth(generate(cfg), cfg, a.out)
    conf = asdict(cfg)
    conf["turns_per_conversation"] = list(cfg.turns_per_conversation)
    return conf, {}, paths


def cmd_train(a: argparse.Namespace) -> tuple[dict, dict, list[Path]]:
    mcfg, tcfg = _model_config(a), _train_config(a)
    tr = _load(a.train, a.dim, a.normalize, a.norm_scope)
    dev = _load(a.dev, a.dim, a.normalize, a.norm_scope)
    params, hist = train(tr, dev, mcfg, tcfg)
    out = Path(a.out)
    meta = {"variant": mcfg.variant.value, "D": mcfg.D, "H": mcfg.H, "P": mcfg.P, "K": mcfg.K,
            "lam": mcfg.lam, "window_mode": mcfg.window_mode, "seed": tcfg.seed,
            "best_epoch": hist.best_epoch, "normalize": a.normalize, "norm_scope": a.norm_scope}
    ckpt = out / "checkpoint.json"
    save_checkpoint(ckpt, params, meta)
    logf = out / "train_log.csv"
    logf.write_text(hist.to_csv(), encoding="utf-8")
    print(f"best epoch {hist.best_epoch}, dev accuracy {max(hist.dev_acc):.4f}")
    return _echo(mcfg, tcfg, a), {"train": a.train, "dev": a.dev}, [ckpt, logf]


def cmd_cross_validate(a: argparse.Namespace) -> tuple[dict, dict, list[Path]]:
    mcfg, tcfg = _model_config(a), _train_config(a)
    corpus = _load(a.corpus, a.dim, a.normalize, a.norm_scope)
    plan = kfold_split(corpus, a.k, a.seed, dyad_disjoint=a.dyad_disjoint)
    report = cross_validate(corpus, mcfg, tcfg, plan,
                            progress=lambda j, acc: log.info("fold %d: %.4f", j, acc))
    csv_path = Path(a.out) / "cv.csv"
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    print(f"mean accuracy over {a.k} folds: {report.mean_acc:.4f}")
    conf = _echo(mcfg, tcfg, a)
    conf.update({"cv.k": a.k, "cv.dyad_disjoint": a.dyad_disjoint})
    return conf, {"corpus": a.corpus}, [csv_path]


def cmd_sweep(a: argparse.Namespace) -> tuple[dict, dict, list[Path]]:
    values = parse_values(a.values, a.param)
    mcfg, tcfg = _model_config(a), _train_config(a)
    corpus = _load(a.corpus, a.dim, a.normalize, a.norm_scope)
    plan = kfold_split(corpus, a.k, a.seed, dyad_disjoint=a.dyad_disjoint)
    table = sweep(corpus, mcfg, tcfg, a.param, values, plan)
    out = Path(a.out)
    csv_path, dat_path = out / "sweep.csv", out / "sweep.dat"
    csv_path.write_text(table.to_csv(), encoding="utf-8")
    dat_path.write_text(table.plot_data(), encoding="utf-8")
    for v, m in zip(table.values, table.means):
        print(f"{a.param}={v}\t{m:.4f}")
    conf = _echo(mcfg, tcfg, a)
    conf.update({"cv.k": a.k, "cv.dyad_disjoint": a.dyad_disjoint,
                 "sweep.param": a.param, "sweep.values": values})
    return conf, {"corpus": a.corpus}, [csv_path, dat_path]


def _format_trace(conv_id: str, records: list[dict]) -> list[str]:
    lines = []
    for r in records:
        win = ",".join(str(j) for j in r["window"]) or "-"
        alpha = ",".join(repr(x) for x in r["alpha"]) or "-"
        lines.append(f"{conv_id}\t{r['turn']}\t{win}\t{alpha}\t{r['prob']!r}")
    return lines


def cmd_predict(a: argparse.Namespace) -> tuple[dict, dict, list[Path]]:
    params, meta = load_checkpoint(a.checkpoint)
    mcfg = ModelConfig(variant=meta["variant"], D=meta["D"], H=meta["H"], P=meta["P"],
                       K=meta["K"], lam=meta["lam"], window_mode=meta.get("window_mode", "recent"))
    normalize = meta.get("normalize", True) if a.normalize is None else a.normalize
    corpus = _load(a.corpus, mcfg.D, normalize, meta.get("norm_scope", "conversation"))
    rows = ["id\ty_est\tlabel\tturn_probs"]
    trace_lines = ["# id\tturn\twindow\talpha\tprob"]
    preds = []
    for conv in corpus:
        y, trace = forward_conversation(conv, params, mcfg)
        preds.append(y)
        label = "?" if conv.label is None else str(conv.label)
        probs = ",".join(repr(float(p)) for p in trace.probs)
        rows.append(f"{conv.id}\t{y!r}\t{label}\t{probs}")
        if a.dump_trace:
            trace_lines.extend(_format_trace(conv.id, trace.records()))
    out = Path(a.out)
    pred_path = out / "predictions.tsv"
    pred_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    artifacts = [pred_path]
    if a.dump_trace:
        tpath = out / "trace.tsv"
        tpath.write_text("\n".join(trace_lines) + "\n", encoding="utf-8")
        artifacts.append(tpath)
    for conv, y in zip(corpus, preds):
        print(f"{conv.id}\t{y:.6f}")
    labels = [c.label for c in corpus]
    if all(lab is not None for lab in labels):
        print(f"accuracy: {accuracy(preds, labels):.4f} ({len(labels)} conversations)")
    conf = {"checkpoint_meta": meta, "data.normalize": normalize, "dump_trace": a.dump_trace}
    return conf, {"checkpoint": a.checkpoint, "corpus": a.corpus}, artifacts


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit with status 2
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", default="aim", choices=[v.value for v in Variant])
    p.add_argument("--dim", type=int, default=DEFAULT_FEATURE_DIM, help="feature dimension D")
    p.add_argument("--hidden", type=int, default=64, help="GRU hidden size H")
    p.add_argument("--proj", type=int, default=32, help="attention projection size P")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help=f"influence scale (default {DEFAULT_LAMBDA})")
    p.add_argument("--window", type=int, default=None,
                   help=f"influence window size K (default {DEFAULT_WINDOW})")
    p.add_argument("--window-mode", default="recent", choices=["recent", "subset"],
                   help="same-speaker window semantics for aim_t / aim_c")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    _add_norm_flags(p)


def _add_norm_flags(p: argparse.ArgumentParser, default: bool | None = True) -> None:
    p.add_argument("--no-normalize", dest="normalize", action="store_false", default=default,
                   help="skip speaker-dependent z-normalization")
    p.add_argument("--norm-scope", default="conversation", choices=["conversation", "dyad"])


def _add_cv_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, default=6, help="number of folds")
    p.add_argument("--dyad-disjoint", action="store_true",
                   help="keep all sessions of a dyad in one fold")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="empathy-aim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    g.add_argument("--n", type=int, default=80, help="number of conversations")
    g.add_argument("--mode", default="mixed", choices=MODES)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--dim", type=int, default=DEFAULT_FEATURE_DIM)
    g.add_argument("--min-turns", type=int, default=12)
    g.add_argument("--max-turns", type=int, default=24)
    g.add_argument("--lag", type=int, default=3)
    g.add_argument("--strength", type=float, default=0.8)
    g.add_argument("--balance", type=float, default=0.5)
    g.add_argument("--subspace", type=int, default=4)
    g.add_argument("--bias-scale", type=float, default=1.0)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train one model with dev-set selection")
    t.add_argument("--train", required=True, help="training corpus (directory or file)")
    t.add_argument("--dev", required=True, help="development corpus")
    t.add_argument("--out", required=True)
    _add_model_flags(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("cross-validate", help="k-fold cross-validation")
    c.add_argument("--corpus", required=True)
    c.add_argument("--out", required=True)
    _add_model_flags(c)
    _add_cv_flags(c)
    c.set_defaults(func=cmd_cross_validate)

    s = sub.add_parser("sweep", help="cross-validate over a grid of one hyperparameter")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    s.add_argument("--values", required=True, help="comma list, or a..b for window_K")
    _add_model_flags(s)
    _add_cv_flags(s)
    s.set_defaults(func=cmd_sweep)

    p = sub.add_parser("predict", help="score conversations with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-trace", action="store_true",
                   help="also write per-turn windows, attention weights and probabilities")
    p.add_argument("--normalize", dest="normalize", action="store_true", default=None,
                   help="force z-normalization (default: as recorded in the checkpoint)")
    p.add_argument("--no-normalize", dest="normalize", action="store_false")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(a.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    func: Callable = a.func
    start = time.perf_counter()
    try:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        config, inputs, artifacts = func(a)
        seed = getattr(a, "seed", None)
        if seed is None:  # predict: the seed the checkpoint was trained with
            seed = config.get("checkpoint_meta", {}).get("seed")
        write_manifest(out, a.command, config, seed, inputs, artifacts,
                       time.perf_counter() - start)
    except (AimError, ValueError, OSError) as exc:
        print(f"empathy-aim {a.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
