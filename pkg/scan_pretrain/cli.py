from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import click

from .config import load_config
from .data_io import (
    SyntheticSpec,
    generate_synthetic,
    read_dataset,
    read_embeddings,
    split_dataset,
    write_dataset,
    write_embeddings,
)
from .embedding import EmbeddingMatrix, LabelVector, l2_normalize_rows
from .encoder import forward, load_checkpoint, penultimate, save_checkpoint
from .errors import BadShape, ScanError
from .evaluation import (
    DEFAULT_KNN_K,
    DEFAULT_RETRIEVAL_K,
    ProbeConfig,
    knn_probe,
    linear_probe,
    nearest,
    retrieval_report,
    write_report_csv,
    write_summary_json,
)
from .experiments import DEFAULT_KS, DEFAULT_SEEDS, run_sweep
from .mining import load_table, mine_bruteforce, mine_fast, save_table
from .trainer import MODES, config_echo, pretrain

logger = logging.getLogger("scan_pretrain")

LOG_FORMAT = "[%(asctime)s] [%(name)s] %(message)s"
LOG_DATEFMT = "%Y-%m-%dT%H:%M:%S%z"

_existing = click.Path(exists=True, dir_okay=False, path_type=Path)
_output = click.Path(dir_okay=False, path_type=Path)


class _EchoHandler(logging.Handler):
    def emit(self, record: logging.LogRecord) -> None:
        try:
            click.echo(self.format(record), err=True)
        except Exception:
            self.handleError(record)


def _setup_logging(verbose: bool) -> None:
    if not any(isinstance(h, _EchoHandler) for h in logger.handlers):
        handler = _EchoHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT, LOG_DATEFMT))
        logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def _int_list(raw: str, flag: str) -> List[int]:
    try:
        return [int(part) for part in raw.replace(" ", "").split(",") if part]
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated integers, got '{raw}'", param_hint=flag) from exc


_seed_option = click.option(
    "--seed", type=int, default=0, show_default=True, help="Recorded in the log; this command draws no random numbers."
)


def _unit_embeddings(path: Path, rows: int) -> EmbeddingMatrix:
    values = read_embeddings(path)
    if values.shape[0] != rows:
        raise BadShape(f"{path}: {values.shape[0]} embedding rows, dataset has {rows}")
    return l2_normalize_rows(EmbeddingMatrix(values))


@click.group()
@click.option("--verbose", "-v", is_flag=True, default=False, help="Log per-step detail.")
def cli(verbose: bool) -> None:
    """scan-pretrain: neighborhood-grouped contrastive pre-training on vector data."""
    _setup_logging(verbose)


@cli.command(name="gen-data")
@click.option("--classes", type=int, default=SyntheticSpec.classes, show_default=True)
@click.option("--modes", type=int, default=SyntheticSpec.modes, show_default=True)
@click.option("--dim", type=int, default=SyntheticSpec.dim, show_default=True)
@click.option("--per-mode", type=int, default=SyntheticSpec.per_mode, show_default=True)
@click.option("--class-radius", type=float, default=SyntheticSpec.class_radius, show_default=True)
@click.option("--mode-radius", type=float, default=SyntheticSpec.mode_radius, show_default=True)
@click.option("--noise", type=float, default=SyntheticSpec.noise, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=_output, default=Path("dataset.scnv"), show_default=True)
@click.option("--test-out", "test_path", type=_output, default=None, help="Also write a held-out split here.")
@click.option("--test-fraction", type=float, default=0.2, show_default=True)
def gen_data_cmd(
    classes: int,
    modes: int,
    dim: int,
    per_mode: int,
    class_radius: float,
    mode_radius: float,
    noise: float,
    seed: int,
    out_path: Path,
    test_path: Optional[Path],
    test_fraction: float,
) -> None:
    """Write the synthetic class/mode benchmark."""
    spec = SyntheticSpec(classes, modes, dim, per_mode, class_radius, mode_radius, noise, seed)
    dataset = generate_synthetic(spec)
    if test_path is None:
        write_dataset(dataset, out_path)
        click.echo(f"Wrote {dataset.n} samples ({classes} classes x {modes} modes, d={dim}) to {out_path}")
        return
    train, test = split_dataset(dataset, test_fraction, seed)
    write_dataset(train, out_path)
    write_dataset(test, test_path)
    click.echo(f"Wrote {train.n} train samples to {out_path} and {test.n} test samples to {test_path}")


@cli.command(name="pretrain")
@click.option("--data", "data_path", type=_existing, required=True)
@click.option("--mode", type=click.Choice(MODES), default=None, help="Objective (default from config: scan).")
@click.option("--config", "config_path", type=_existing, default=None, help="'key = value' or YAML config file.")
@click.option("--neighbors", "neighbors_path", type=_existing, default=None, help="Neighbor table (required for scan).")
@click.option("--init-checkpoint", type=_existing, default=None, help="Start from these encoder weights.")
@click.option("--out", "out_path", type=_output, default=Path("encoder.scnc"), show_default=True)
@click.option("--log", "log_path", type=_output, default=None, help="Per-epoch CSV log.")
@click.option("--queries", type=int, default=None, help="Anchors per batch (S).")
@click.option("--k", type=int, default=None, help="Neighbors per anchor (K).")
@click.option("--tau", type=float, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--bank-size", type=int, default=None)
@click.option("--bank-init", type=click.Choice(["random", "empty"]), default=None)
@click.option("--encoder-momentum", type=float, default=None)
@click.option("--hidden", default=None, help="Hidden layer sizes, e.g. 128,64.")
@click.option("--embed-dim", type=int, default=None)
@click.option("--denominator", type=click.Choice(["paper", "infonce"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=1, show_default=True, help="Threads for the key-encoder forward.")
def pretrain_cmd(
    data_path: Path,
    mode: Optional[str],
    config_path: Optional[Path],
    neighbors_path: Optional[Path],
    init_checkpoint: Optional[Path],
    out_path: Path,
    log_path: Optional[Path],
    hidden: Optional[str],
    workers: int,
    **overrides: object,
) -> None:
    """Train the query/key encoder pair and write a checkpoint."""
    overrides["mode"] = mode
    overrides["hidden"] = hidden
    config = load_config(config_path, overrides)
    if config.mode == "scan" and neighbors_path is None:
        raise click.UsageError("--mode scan requires --neighbors TABLE (see the mine command)")

    dataset = read_dataset(data_path)
    table = load_table(neighbors_path) if neighbors_path is not None and config.mode == "scan" else None
    init = load_checkpoint(init_checkpoint) if init_checkpoint is not None else None
    pair, log = pretrain(dataset, table, config, init=init, workers=workers)
    save_checkpoint(pair, out_path)
    if log_path is not None:
        log.write_csv(log_path)
    last = log.epochs[-1].mean_loss if log.epochs else float("nan")
    click.echo(f"Trained {config.mode} for {config.epochs} epochs (final loss {last:.5f}); checkpoint {out_path}")


@cli.command(name="embed")
@click.option("--checkpoint", type=_existing, required=True)
@click.option("--data", "data_path", type=_existing, required=True)
@click.option("--out", "out_path", type=_output, default=Path("embeddings.scne"), show_default=True)
@click.option("--layer", type=click.Choice(["output", "penultimate"]), default="output", show_default=True)
@click.option("--branch", type=click.Choice(["query", "key"]), default="query", show_default=True)
@_seed_option
def embed_cmd(checkpoint: Path, data_path: Path, out_path: Path, layer: str, branch: str, seed: int) -> None:
    """Embed a dataset with a trained encoder."""
    logger.debug("embed seed=%d", seed)
    pair = load_checkpoint(checkpoint)
    params = pair.query if branch == "query" else pair.key
    dataset = read_dataset(data_path)
    if layer == "output":
        embeddings, _ = forward(params, dataset.features)
    else:
        embeddings = penultimate(params, dataset.features)
    write_embeddings(embeddings, out_path)
    click.echo(f"Wrote {embeddings.n}x{embeddings.d} {layer} embeddings ({branch} branch) to {out_path}")


@cli.command(name="mine")
@click.option("--data", "data_path", type=_existing, required=True, help="Dataset supplying labels (and raw rows).")
@click.option(
    "--appearance-source",
    type=click.Choice(["bootstrap-checkpoint", "raw"]),
    default="bootstrap-checkpoint",
    show_default=True,
)
@click.option("--embeddings", "embeddings_path", type=_existing, default=None, help="Appearance embeddings file.")
@click.option("--checkpoint", type=_existing, default=None, help="Bootstrap encoder to embed with.")
@click.option("--k", type=int, default=2, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--method", type=click.Choice(["fast", "bruteforce"]), default="fast", show_default=True)
@click.option("--out", "out_path", type=_output, default=Path("neighbors.scnt"), show_default=True)
@_seed_option
def mine_cmd(
    data_path: Path,
    appearance_source: str,
    embeddings_path: Optional[Path],
    checkpoint: Optional[Path],
    k: int,
    workers: int,
    method: str,
    out_path: Path,
    seed: int,
) -> None:
    """Mine top-K same-class neighbors by appearance similarity."""
    logger.debug("mine seed=%d workers=%d", seed, workers)
    if appearance_source == "bootstrap-checkpoint" and (embeddings_path is None) == (checkpoint is None):
        raise click.UsageError("bootstrap-checkpoint needs exactly one of --embeddings or --checkpoint")
    if k < 0:
        raise click.BadParameter("must be >= 0", param_hint="--k")

    dataset = read_dataset(data_path)
    if appearance_source == "raw":
        appearance = l2_normalize_rows(EmbeddingMatrix(dataset.features))
    elif embeddings_path is not None:
        appearance = _unit_embeddings(embeddings_path, dataset.n)
    else:
        appearance, _ = forward(load_checkpoint(checkpoint).query, dataset.features)  # type: ignore[arg-type]
    labels = LabelVector(dataset.labels, dataset.modes)
    if method == "fast":
        table = mine_fast(appearance, labels, k, workers=workers)
    else:
        table = mine_bruteforce(appearance, labels, k)
    save_table(table, out_path)
    click.echo(f"Mined k={k} neighbors for {table.n} samples (shortfall {table.shortfall_total}) into {out_path}")


@cli.command(name="eval")
@click.option("--train-embeddings", type=_existing, required=True)
@click.option("--train-data", type=_existing, required=True)
@click.option("--test-embeddings", type=_existing, required=True)
@click.option("--test-data", type=_existing, required=True)
@click.option("--probe", type=click.Choice(["knn", "linear", "both", "none"]), default="both", show_default=True)
@click.option("--knn-k", type=int, default=DEFAULT_KNN_K, show_default=True)
@click.option("--retrieval-k", type=int, default=DEFAULT_RETRIEVAL_K, show_default=True)
@click.option("--max-iterations", type=int, default=ProbeConfig.max_iterations, show_default=True)
@click.option("--report", "report_path", type=_output, default=None, help="Per-query retrieval CSV.")
@click.option("--summary", "summary_path", type=_output, default=None, help="JSON summary.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True, help="Threads for k-NN and retrieval lookups.")
def eval_cmd(
    train_embeddings: Path,
    train_data: Path,
    test_embeddings: Path,
    test_data: Path,
    probe: str,
    knn_k: int,
    retrieval_k: int,
    max_iterations: int,
    report_path: Optional[Path],
    summary_path: Optional[Path],
    seed: int,
    workers: int,
) -> None:
    """Probe frozen embeddings and report retrieval purity on the test gallery."""
    train = read_dataset(train_data)
    test = read_dataset(test_data)
    train_embs = _unit_embeddings(train_embeddings, train.n)
    test_embs = _unit_embeddings(test_embeddings, test.n)
    probe_cfg = ProbeConfig(knn_k=knn_k, retrieval_k=retrieval_k, max_iterations=max_iterations)

    summary: dict = {"seed": seed, "probe_config": vars(probe_cfg).copy(), "train": str(train_data), "test": str(test_data)}
    if probe in ("knn", "both"):
        summary["knn"] = knn_probe(train_embs, train.labels, test_embs, test.labels, knn_k, workers=workers).to_dict()
    if probe in ("linear", "both"):
        summary["linear"] = linear_probe(train_embs, train.labels, test_embs, test.labels, probe_cfg).to_dict()
    report = retrieval_report(test_embs, LabelVector(test.labels, test.modes), k=retrieval_k, workers=workers)
    summary["retrieval"] = report.summary()

    if report_path is not None:
        write_report_csv(report, report_path)
    if summary_path is not None:
        write_summary_json(summary, summary_path)
    click.echo(json.dumps(summary, indent=2, sort_keys=True))


@cli.command(name="retrieve")
@click.option("--embeddings", "embeddings_path", type=_existing, required=True)
@click.option("--data", "data_path", type=_existing, required=True)
@click.option("--query", type=int, required=True)
@click.option("--k", type=int, default=DEFAULT_RETRIEVAL_K, show_default=True)
@_seed_option
def retrieve_cmd(embeddings_path: Path, data_path: Path, query: int, k: int, seed: int) -> None:
    """Print the top-k gallery rows for one query."""
    logger.debug("retrieve seed=%d", seed)
    dataset = read_dataset(data_path)
    gallery = _unit_embeddings(embeddings_path, dataset.n)
    report = retrieval_report(gallery, LabelVector(dataset.labels, dataset.modes), queries=[query], k=k)
    picked, scores = nearest(gallery.values, gallery.values[query], report.k, exclude=query)
    click.echo(f"query {query} class={dataset.labels[query]}" + (f" mode={dataset.modes[query]}" if dataset.has_modes else ""))
    for rank, (index, score) in enumerate(zip(picked, scores), start=1):
        line = f"{rank}\t{index}\t{score:.6f}\tclass={dataset.labels[index]}"
        if dataset.modes is not None:
            line += f"\tmode={dataset.modes[index]}"
        click.echo(line)
    click.echo(f"class purity {report.mean_class_purity:.4f}")


@cli.command(name="sweep")
@click.option("--config", "config_path", type=_existing, default=None)
@click.option("--ks", default=",".join(map(str, DEFAULT_KS)), show_default=True)
@click.option("--seeds", default=",".join(map(str, DEFAULT_SEEDS)), show_default=True)
@click.option("--epochs", type=int, default=None)
@click.option("--classes", type=int, default=SyntheticSpec.classes, show_default=True)
@click.option("--modes", type=int, default=SyntheticSpec.modes, show_default=True)
@click.option("--dim", type=int, default=SyntheticSpec.dim, show_default=True)
@click.option("--per-mode", type=int, default=SyntheticSpec.per_mode, show_default=True)
@click.option("--no-scl", is_flag=True, default=False, help="Skip the SCL reference run.")
@click.option("--inherit", is_flag=True, default=False, help="Start SCAN runs from the bootstrap encoder.")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--out", "out_path", type=_output, default=Path("sweep.json"), show_default=True)
def sweep_cmd(
    config_path: Optional[Path],
    ks: str,
    seeds: str,
    epochs: Optional[int],
    classes: int,
    modes: int,
    dim: int,
    per_mode: int,
    no_scl: bool,
    inherit: bool,
    workers: int,
    out_path: Path,
) -> None:
    """Sweep the neighbor count K on the synthetic benchmark."""
    base = load_config(config_path, {"epochs": epochs})
    spec = SyntheticSpec(classes=classes, modes=modes, dim=dim, per_mode=per_mode)
    result = run_sweep(
        spec,
        base,
        ks=_int_list(ks, "--ks"),
        seeds=_int_list(seeds, "--seeds"),
        include_scl=not no_scl,
        inherit=inherit,
        workers=workers,
    )
    summary = result.summary()
    summary["settings"]["train"] = config_echo(base)
    write_summary_json(summary, out_path)
    for name, means in result.means.items():
        click.echo(f"{name:>10}  knn={means['knn_top1']:.4f}  linear={means['linear_top1']:.4f}  joint={means['joint_purity']:.4f}")
    for check, ok in result.checks.items():
        click.echo(f"{check}: {'yes' if ok else 'no'}")


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return its exit code: 0 ok, 1 usage/config, 2 data."""
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name="scan-pretrain", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except ScanError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    return rv if isinstance(rv, int) else 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
