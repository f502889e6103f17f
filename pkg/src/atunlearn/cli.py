"""Command line entry point: ``atu <command> [options]``.

Every command writes ``manifest.json`` and ``metrics.jsonl`` into its output
directory. Config keys can be given as ``--key value`` flags, which override a
config file passed with ``--config`` (or named by $ATU_CONFIG).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from contextlib import contextmanager
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import ENV_VAR, KEYS, SEED_OFFSETS, Config, ConfigError, load_config
from .feedback import DegenerateFeedbackError, load_feedback, save_feedback
from .gan import DivergenceError, sample
from .params import Checkpoint, CheckpointError, LayoutError, flatten, load_checkpoint, save_checkpoint, CheckpointMeta

logger = logging.getLogger("atunlearn")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_DEGENERATE = 4
EXIT_DIVERGED = 5
EXIT_BAD_CHECKPOINT = 6

EXIT_CODES_HELP = """exit codes:
  0  success
  1  unexpected error
  2  usage or config error (unknown key, bad value)
  3  missing input file
  4  degenerate feedback (no positives or no negatives)
  5  training diverged (non-finite loss)
  6  unreadable or incompatible checkpoint
"""

GEN = "generator.atuc"
DISC = "discriminator.atuc"
CLASSIFIER = "classifier.atuc"
FEEDBACK_SAMPLES = "feedback.atuc"
FEEDBACK_NEGATIVES = "negatives.txt"


def _version() -> str:
    try:
        return metadata.version("atunlearn")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# arguments that name files; their content enters run_id through the input digests
_LOCATION_ARGS = frozenset({"out", "config", "command", "verbose", "pretrained", "feedback", "adapted", "generator", "gold", "classifier", "samples", "output"})


class Run:
    """Bookkeeping for one command: inputs, outputs, metrics and the manifest."""

    def __init__(self, command: str, cfg: Config, out: Path, params: dict | None = None):
        self.command = command
        self.cfg = cfg
        self.out = Path(out)
        self.params = params or {}
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.extra: dict = {}
        self.started = datetime.now(timezone.utc).isoformat()
        self.out.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.out / "metrics.jsonl"
        self.metrics_path.write_text("")
        self._run_id = None

    def use(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"missing input: {path}")
        self.inputs[str(path)] = sha256_file(path)
        self._run_id = None
        return path

    @property
    def run_id(self) -> str:
        if self._run_id is None:
            blob = json.dumps(
                {
                    "command": self.command,
                    "config": self.cfg.to_dict(),
                    "params": {k: v for k, v in self.params.items() if k not in _LOCATION_ARGS and not k.startswith("cfg_")},
                    "inputs": sorted(self.inputs.values()),
                },
                sort_keys=True,
            )
            self._run_id = hashlib.sha256(blob.encode()).hexdigest()[:16]
        return self._run_id

    def metric(self, step: int, name: str, value) -> None:
        rec = {"run_id": self.run_id, "step": int(step), "name": name, "value": value}
        with self.metrics_path.open("a") as f:
            f.write(json.dumps(rec) + "\n")

    def path(self, name: str) -> Path:
        return self.out / name

    def wrote(self, path) -> None:
        self.outputs[str(Path(path))] = sha256_file(path)

    def save(self, ckpt: Checkpoint, name: str) -> Path:
        p = self.path(name)
        save_checkpoint(ckpt, p)
        self.wrote(p)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        self.wrote(p)
        return p

    def finish(self, status: str, exit_code: int) -> None:
        self.wrote(self.metrics_path)
        manifest = {
            "run_id": self.run_id,
            "command": self.command,
            "params": self.params,
            "config": self.cfg.to_dict(),
            "seeds": {stage: self.cfg.seed_for(stage) for stage in SEED_OFFSETS},
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": _version(),
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "status": status,
            "exit_code": exit_code,
        }
        manifest.update(self.extra)
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@contextmanager
def _capture_warnings(run: Run):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        yield
    for w in caught:
        logger.warning("%s: %s", w.category.__name__, w.message)
        run.metric(-1, f"warning/{w.category.__name__}", str(w.message))


# ---------------------------------------------------------------- loading helpers


def _pair(run: Run, directory) -> tuple[Checkpoint, Checkpoint]:
    d = Path(directory)
    return load_checkpoint(run.use(d / GEN)), load_checkpoint(run.use(d / DISC))


def _oracle(run: Run, cfg: Config, classifier_path=None):
    if not cfg.uses_images:
        return P.make_oracle(cfg)
    if classifier_path is None:
        raise ConfigError("the image track needs --classifier")
    return P.make_oracle(cfg, load_checkpoint(run.use(classifier_path)))


def _classifier_default(args, pretrained_dir):
    if getattr(args, "classifier", None):
        return args.classifier
    return str(Path(pretrained_dir) / CLASSIFIER) if pretrained_dir else None


def _adapted(run: Run, directory) -> list[Checkpoint]:
    d = Path(directory)
    paths = sorted(d.glob("adapted_*.atuc"))
    if not paths:
        raise FileNotFoundError(f"no adapted_*.atuc checkpoints in {d}")
    return [load_checkpoint(run.use(p)) for p in paths]


# ---------------------------------------------------------------- commands


def cmd_pretrain(args, cfg: Config, run: Run) -> None:
    data = P.training_data(cfg)
    if cfg.uses_images:
        run.use(cfg.idx_images)
        run.use(cfg.idx_labels)
        model, acc = P.train_oracle_classifier(cfg, data)
        run.save(model, CLASSIFIER)
        run.extra["classifier_test_accuracy"] = acc
        run.metric(0, "classifier/test_accuracy", acc)
    gen, disc = P.run_pretrain(cfg, data, sink=lambda s, n, v: run.metric(s, f"pretrain/{n}", float(v)))
    run.save(gen, GEN)
    run.save(disc, DISC)


def cmd_retrain_gold(args, cfg: Config, run: Run) -> None:
    if cfg.uses_images:
        run.use(cfg.idx_images)
        run.use(cfg.idx_labels)
    gen, disc = P.run_gold(cfg, sink=lambda s, n, v: run.metric(s, f"gold/{n}", float(v)))
    run.save(gen.replace(extra={"role": "gold"}), GEN)
    run.save(disc.replace(extra={"role": "gold"}), DISC)


def cmd_feedback(args, cfg: Config, run: Run) -> None:
    gen = load_checkpoint(run.use(Path(args.pretrained) / GEN))
    oracle = _oracle(run, cfg, _classifier_default(args, args.pretrained))
    fs = P.run_feedback(cfg, gen, oracle)
    save_feedback(fs, run.path(FEEDBACK_SAMPLES), run.path(FEEDBACK_NEGATIVES))
    run.wrote(run.path(FEEDBACK_SAMPLES))
    run.wrote(run.path(FEEDBACK_NEGATIVES))
    run.metric(0, "feedback/negatives", len(fs.negative_idx))
    run.metric(0, "feedback/positives", len(fs.positive_idx))
    fs.require_both()


def _load_feedback(run: Run, directory):
    d = Path(directory)
    return load_feedback(run.use(d / FEEDBACK_SAMPLES), run.use(d / FEEDBACK_NEGATIVES))


def cmd_adapt(args, cfg: Config, run: Run) -> None:
    pair = _pair(run, args.pretrained)
    fs = _load_feedback(run, args.feedback)
    if len(fs.negative_idx) == 0:
        raise DegenerateFeedbackError("feedback contains no negative samples")
    oracle = _oracle(run, cfg, _classifier_default(args, args.pretrained))
    sink = lambda s, n, v: run.metric(s, n, float(v))  # noqa: E731
    anchors, fisher = P.run_adapt(cfg, pair, fs, oracle, sink)
    meta = CheckpointMeta("fisher", "pretrained", cfg.seed_for("fisher"), 0, (("kind", "fisher"),))
    run.save(Checkpoint(fisher.values, meta), "fisher.atuc")
    for j, a in enumerate(anchors):
        run.save(a, f"adapted_{j}.atuc")


def cmd_unlearn(args, cfg: Config, run: Run) -> None:
    pair = _pair(run, args.pretrained)
    fs = _load_feedback(run, args.feedback)
    if len(fs.positive_idx) == 0:
        raise DegenerateFeedbackError("feedback contains no positive samples")
    anchors = _adapted(run, args.adapted)
    gen = P.run_unlearn(cfg, pair, fs, anchors, sink=lambda s, n, v: run.metric(s, n, float(v)))
    run.save(gen, GEN)


def cmd_extrapolate(args, cfg: Config, run: Run) -> None:
    gen = load_checkpoint(run.use(Path(args.pretrained) / GEN))
    anchors = _adapted(run, args.adapted)
    run.save(P.run_extrapolate(gen, anchors, cfg.extrapolate_t), GEN)


def cmd_evaluate(args, cfg: Config, run: Run) -> None:
    gen = load_checkpoint(run.use(args.generator))
    pretrained = load_checkpoint(run.use(Path(args.pretrained) / GEN))
    gold = load_checkpoint(run.use(Path(args.gold) / GEN)) if args.gold else None
    oracle = _oracle(run, cfg, _classifier_default(args, args.pretrained))
    if cfg.uses_images:
        run.use(cfg.idx_images)
        run.use(cfg.idx_labels)
    report = P.run_evaluate(cfg, gen, oracle, pretrained, gold)
    run.write_text("report.json", report.to_json() + "\n")
    for name in ("pul", "fid", "ret_fid", "quality"):
        if getattr(report, name) is not None:
            run.metric(0, f"eval/{name}", float(getattr(report, name)))


def cmd_theory(args, cfg: Config, run: Run) -> None:
    from . import theory

    dims = [int(d) for d in args.dims.split(",")]
    records = {
        "closed_form": theory.closed_form_checks(dims, n=args.mc_samples, seed=cfg.seed),
        "dpi": [r.as_dict() for r in theory.random_dpi_trials(args.trials, seed=cfg.seed)],
    }
    rec, equal = theory.bijection_check(seed=cfg.seed)
    records["bijection"] = rec.as_dict() | {"equality_within_epsilon": equal}
    run.write_text("theory.json", json.dumps(records, indent=2, sort_keys=True) + "\n")
    worst = max(max(r["kl_rel_err"], r["hellinger_sq_rel_err"]) for r in records["closed_form"])
    held = sum(r["holds"] for r in records["dpi"])
    run.metric(0, "theory/max_rel_err", worst)
    run.metric(0, "theory/dpi_holds", held)
    print(f"closed forms: worst relative error {worst:.4f}; DPI held in {held}/{args.trials}; bijection equality {equal}")


def cmd_plot(args, cfg: Config, run: Run) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if args.generator:
        points = sample(load_checkpoint(run.use(args.generator)), args.n, cfg.eval_seed)
    else:
        points = load_checkpoint(run.use(args.samples)).params.tensor("samples")
    oracle = _oracle(run, cfg, args.classifier)
    labels = oracle.label(points)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    if cfg.uses_images:
        side = int(round(np.sqrt(points.shape[1])))
        count = min(64, len(points))
        cols = 8
        rows = int(np.ceil(count / cols))
        fig, axes = plt.subplots(rows, cols, figsize=(cols, rows))
        for ax, img, lab in zip(np.ravel(axes), points[:count], labels[:count]):
            ax.imshow(img.reshape(side, side), cmap="gray", vmin=-1, vmax=1)
            ax.set_title(str(lab), fontsize=6, color="red" if lab in oracle.negative else "black")
        for ax in np.ravel(axes):
            ax.axis("off")
    else:
        fig, ax = plt.subplots(figsize=(5, 5))
        neg = np.isin(labels, sorted(oracle.negative))
        ax.scatter(*points[~neg].T, s=2, alpha=0.4, c="tab:blue", label="positive")
        ax.scatter(*points[neg].T, s=2, alpha=0.4, c="tab:red", label="negative")
        centers = cfg.mog.centers
        ax.scatter(*centers.T, marker="x", c="black", s=40, label="mode centers")
        lim = cfg.mog_radius * 1.5
        ax.set_xlim(-lim, lim)
        ax.set_ylim(-lim, lim)
        ax.set_aspect("equal")
        ax.legend(loc="upper right", fontsize=7, markerscale=3)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    run.wrote(out)


def cmd_run_all(args, cfg: Config, run: Run) -> None:
    """pretrain -> feedback -> adapt -> unlearn -> evaluate, each stage in its own subdirectory."""
    root = Path(args.out)
    base = {"out": None, "classifier": None}
    stages = [
        ("pretrain", {}),
        ("feedback", {"pretrained": root / "pretrain"}),
        ("adapt", {"pretrained": root / "pretrain", "feedback": root / "feedback"}),
        ("unlearn", {"pretrained": root / "pretrain", "feedback": root / "feedback", "adapted": root / "adapt"}),
        ("evaluate", {"generator": root / "unlearn" / GEN, "pretrained": root / "pretrain", "gold": None}),
    ]
    for name, extra in stages:
        sub = argparse.Namespace(**(base | {k: str(v) if v is not None else None for k, v in extra.items()}))
        sub.out = str(root / name)
        code = _execute(name, COMMANDS[name], sub, cfg)
        run.extra.setdefault("stages", {})[name] = code
        if code != EXIT_OK:
            raise _StageFailed(code)
    report = json.loads((root / "evaluate" / "report.json").read_text())
    run.inputs[str(root / "evaluate" / "report.json")] = sha256_file(root / "evaluate" / "report.json")
    print(f"PUL {report['pul']:.2f}  FID {report['fid']:.4f}  quality {report['quality']}")


class _StageFailed(Exception):
    def __init__(self, code):
        super().__init__(f"stage failed with exit code {code}")
        self.code = code


COMMANDS = {
    "pretrain": cmd_pretrain,
    "feedback": cmd_feedback,
    "adapt": cmd_adapt,
    "unlearn": cmd_unlearn,
    "extrapolate": cmd_extrapolate,
    "retrain-gold": cmd_retrain_gold,
    "evaluate": cmd_evaluate,
    "theory": cmd_theory,
    "plot": cmd_plot,
    "run-all": cmd_run_all,
}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, _StageFailed):
        return exc.code
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(exc, DegenerateFeedbackError):
        return EXIT_DEGENERATE
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGED
    if isinstance(exc, (CheckpointError, LayoutError)):
        return EXIT_BAD_CHECKPOINT
    return EXIT_OTHER


def _execute(name: str, fn, args, cfg: Config) -> int:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("out",) and not callable(v)}
    run = Run(name, cfg, Path(args.out), params)
    code, status = EXIT_OK, "ok"
    try:
        with _capture_warnings(run):
            fn(args, cfg, run)
    except Exception as exc:  # every failure still gets a manifest
        code = _exit_code(exc)
        status = f"error: {type(exc).__name__}: {exc}"
        logger.error("%s failed: %s", name, exc)
        if code == EXIT_OTHER:
            logger.debug("traceback", exc_info=True)
    run.finish(status, code)
    return code


# ---------------------------------------------------------------- argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config keys (override the config file)")
    for key in KEYS:
        g.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="VALUE", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atu",
        description="Remove undesired regions from a trained GAN: adapt to negatives, then unlearn with repulsion.",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=_version())
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=EXIT_CODES_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help=f"config file (default: ${ENV_VAR})")
        p.add_argument("--out", required=name != "plot", help="output directory")
        _add_config_flags(p)
        return p

    command("pretrain", "train the GAN on the full data")
    command("retrain-gold", "train a GAN from scratch on positives only (reference for Ret-FID)")
    p = command("feedback", "draw samples from the pretrained generator and label them with the oracle")
    p.add_argument("--pretrained", required=True, help="directory from `pretrain`")
    p.add_argument("--classifier", help="oracle classifier checkpoint (image track)")
    p = command("adapt", "stage 1: adapt k copies of the pretrained GAN to the negatives")
    p.add_argument("--pretrained", required=True)
    p.add_argument("--feedback", required=True, help="directory from `feedback`")
    p.add_argument("--classifier")
    p = command("unlearn", "stage 2: train on positives with repulsion from the adapted models")
    p.add_argument("--pretrained", required=True)
    p.add_argument("--feedback", required=True)
    p.add_argument("--adapted", required=True, help="directory from `adapt`")
    p = command("extrapolate", "parameter-space extrapolation away from the first adapted model (uses extrapolate_t)")
    p.add_argument("--pretrained", required=True)
    p.add_argument("--adapted", required=True)
    p = command("evaluate", "PUL, FID, Ret-FID, mode histogram and quality of a generator")
    p.add_argument("--generator", required=True, help="generator checkpoint to evaluate")
    p.add_argument("--pretrained", required=True)
    p.add_argument("--gold", help="directory from `retrain-gold` (enables Ret-FID)")
    p.add_argument("--classifier")
    p = command("theory", "numerical checks of the divergence identities")
    p.add_argument("--dims", default="2,3,4,5,6,7,8,9,10")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--mc-samples", type=int, default=1_000_000)
    p = command("plot", "scatter plot (2-D) or image grid of samples coloured by oracle label")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--generator", help="generator checkpoint to sample")
    src.add_argument("--samples", help="feedback samples file")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--classifier")
    p.add_argument("--output", required=True, help="PNG path")
    command("run-all", "pretrain, feedback, adapt, unlearn and evaluate in one go")
    return parser


def resolve_config(args) -> Config:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        parser.error(str(exc))
    except FileNotFoundError as exc:
        print(f"atu: {exc}", file=sys.stderr)
        return EXIT_MISSING
    if args.command == "plot" and args.out is None:
        args.out = str(Path(args.output).parent)
    name = args.command
    for k in [k for k in vars(args) if k.startswith("cfg_")] + ["config", "verbose", "command"]:
        delattr(args, k)
    return _execute(name, COMMANDS[name], args, cfg)


if __name__ == "__main__":
    sys.exit(main())
