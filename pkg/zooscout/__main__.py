import logging
import sys
from pathlib import Path

import click
import pandas as pd
from rich.console import Console
from rich.logging import RichHandler

from zooscout.benchmark import ablation as run_ablation
from zooscout.config import dump_config, load_config
from zooscout.dataio import gen_family, read_dataset, write_dataset
from zooscout.encoding import FrozenExtractor, build_encodings, dataset_fid, make_probe
from zooscout.errors import DataError, UsageError, ZooscoutError
from zooscout.metaspace import curve_trend, init_metaspace, load_metaspace, save_metaspace, train_metaspace
from zooscout.pipeline import eval_loo as run_eval_loo
from zooscout.pipeline import train_one_supernet
from zooscout.report import (
    ablation_table,
    audit_table,
    convergence_table,
    loo_summary,
    query_table,
    render,
)
from zooscout.retrieval import (
    SupernetStore,
    build_index,
    continue_training,
    embed_new_dataset,
    load_index,
    query as run_query,
    save_index,
    topk_select,
)
from zooscout.supernet import load_supernet
from zooscout.zoo import ZooManifest, audit_rank as run_audit_rank
from zooscout.zoo import build_zoo as run_build_zoo

logger = logging.getLogger("zooscout")


def setup_logging(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def emit(ctx, df):
    click.echo(render(df, csv=ctx.obj["csv"]))


def with_suffix(path, suffix):
    path = Path(path)
    return path.with_name(path.name + suffix)


def load_sources(checkpoints, datasets_dir=None):
    """Datasets of the given supernet checkpoints, found via the sidecar path or ``datasets_dir``."""
    datasets = {}
    for ckpt in checkpoints.values():
        dataset_id = ckpt.dataset_id
        candidates = [Path(datasets_dir) / f"{dataset_id}.ds"] if datasets_dir else []
        if ckpt.meta.get("dataset_path"):
            candidates.append(Path(ckpt.meta["dataset_path"]))
        found = next((p for p in candidates if p.is_file()), None)
        if found is None:
            raise DataError(f"cannot find the dataset file of '{dataset_id}' (pass --datasets)")
        datasets[dataset_id] = read_dataset(found)
    return datasets


def zoo_supernets(manifest, store):
    supernets = {}
    for dataset_id in manifest.datasets():
        _, entry = manifest.by_dataset(dataset_id)[0]
        supernets[dataset_id] = store.get(entry.supernet_ref)
    return supernets


@click.group(invoke_without_command=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML configuration file.")
@click.option("--threads", type=int, default=None, help="Worker cap (overrides [run] threads).")
@click.option("--csv", is_flag=True, help="Emit tables as CSV instead of aligned text.")
@click.option("--dump-config", "show_config", is_flag=True, help="Print the effective configuration and exit.")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def cli(ctx, config_path, threads, csv, show_config, verbose):
    """zooscout - model zoo retrieval for unseen datasets"""
    setup_logging(verbose)
    config = load_config(config_path)
    if threads is not None and threads < 1:
        raise UsageError("--threads must be >= 1")
    ctx.obj = {"config": config, "threads": threads or config.run.threads, "csv": csv}
    if show_config:
        click.echo(dump_config(config), nl=False)
        ctx.exit(0)
    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


# -------------------------------
# Command: gen-data
# -------------------------------
@cli.command("gen-data")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), help="TOML with a [family] table.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=click.IntRange(min=0), default=0)
@click.pass_context
def gen_data(ctx, spec_path, out, seed):
    """Generate the synthetic dataset family."""
    family = (load_config(spec_path) if spec_path else ctx.obj["config"]).family.spec()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for (dataset_id, ds), (_, member) in zip(gen_family(family, seed).items(), family.members()):
        write_dataset(out / f"{dataset_id}.ds", ds)
        rows.append({"dataset": dataset_id, "shift": member.shift, "samples": len(ds), "classes": ds.classes})
    emit(ctx, pd.DataFrame(rows))


# -------------------------------
# Command: train-supernet
# -------------------------------
@cli.command("train-supernet")
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--space", "space_path", type=click.Path(exists=True, dir_okay=False),
              help="TOML with a [space] table (defaults to the active config).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.pass_context
def train_supernet(ctx, dataset_path, space_path, out, seed):
    """Two-stage strict-fairness supernet training on one dataset."""
    config = ctx.obj["config"]
    space = (load_config(space_path) if space_path else config).space.space()
    dataset = read_dataset(dataset_path)
    seed = config.supernet.seed if seed is None else seed
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    ckpt = train_one_supernet(space, dataset, config.supernet, seed, path=out, source=Path(dataset_path).resolve())
    log = pd.DataFrame(ckpt.meta["log"])
    log.to_csv(with_suffix(out, ".log.csv"), index=False, float_format="%.6f")
    emit(ctx, log)


# -------------------------------
# Command: build-zoo
# -------------------------------
@cli.command("build-zoo")
@click.option("--supernets", "supernet_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--datasets", "datasets_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--policy", default=None, help="all, max or sample:<n> (defaults to [zoo] policy).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.pass_context
def build_zoo(ctx, supernet_dir, datasets_dir, policy, out, seed):
    """Extract and score subnets from every supernet checkpoint in a directory."""
    config = ctx.obj["config"]
    paths = sorted(Path(supernet_dir).glob("*.sn"))
    if not paths:
        raise DataError(f"{supernet_dir}: no *.sn supernet checkpoints")
    checkpoints = {}
    for path in paths:
        ckpt = load_supernet(path)
        checkpoints[ckpt.dataset_id] = ckpt
    datasets = load_sources(checkpoints, datasets_dir)
    manifest = run_build_zoo(checkpoints, datasets, policy or config.zoo.policy,
                             config.run.seed if seed is None else seed, ctx.obj["threads"], config.zoo.transfer)
    manifest.save(out)
    counts = pd.DataFrame([{"dataset": d, "entries": len(manifest.by_dataset(d)),
                            "optimizer_steps": manifest.metadata["optimizer_steps"][d]} for d in manifest.datasets()])
    emit(ctx, counts)


# -------------------------------
# Command: audit-rank
# -------------------------------
@cli.command("audit-rank")
@click.option("--zoo", "zoo_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--k", type=int, default=None, help="Subnets to scratch-train per dataset.")
@click.option("--datasets", "datasets_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Write the manifest with scratch accuracies.")
@click.pass_context
def audit_rank(ctx, zoo_path, k, datasets_dir, out):
    """Spearman correlation of inherited vs scratch accuracy per dataset."""
    config = ctx.obj["config"]
    manifest = ZooManifest.load(zoo_path)
    datasets = load_sources(zoo_supernets(manifest, SupernetStore()), datasets_dir)
    results, updated = run_audit_rank(manifest, datasets, k or config.zoo.audit_k, config.zoo.scratch_epochs,
                                      config.run.seed, ctx.obj["threads"], config.retrieval.batch_size,
                                      config.retrieval.lr)
    if out:
        updated.save(out)
    emit(ctx, audit_table(results))


# -------------------------------
# Command: train-metaspace
# -------------------------------
@cli.command("train-metaspace")
@click.option("--zoo", "zoo_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--losses", default=None, help="Comma list from perf,rank,fid,contrastive.")
@click.option("--exclude", default=None, help="Dataset id to hold out of training.")
@click.option("--datasets", "datasets_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def train_metaspace_cmd(ctx, zoo_path, losses, exclude, datasets_dir, out):
    """Train E_m, E_d and the predictor on a zoo; writes the checkpoint and its model index."""
    config = ctx.obj["config"]
    ms, enc = config.metaspace, config.encoding
    full = ZooManifest.load(zoo_path)
    if exclude and exclude not in full.datasets():
        raise UsageError(f"--exclude: dataset '{exclude}' is not in the zoo")
    manifest = full.without(exclude) if exclude else full
    supernets = zoo_supernets(manifest, SupernetStore())
    datasets = load_sources(supernets, datasets_dir)
    extractor = FrozenExtractor(manifest.space.input_shape, enc.feature_dim, enc.extractor_seed)
    probe = make_probe(manifest.space, enc.n_z, enc.probe_seed)
    cache = build_encodings(manifest, supernets, datasets, extractor, probe, enc.n_img, config.run.seed,
                            ctx.obj["threads"])
    cache.save(with_suffix(out, ".enc"))
    model_dim = len(next(iter(cache.models.values())))
    params = init_metaspace(model_dim, extractor.feature_dim, ms.embed_dim, tuple(ms.hidden), seed=ms.seed,
                            **ms.hyper())
    trained = train_metaspace(manifest, cache, params, ms.epochs, ms.lr, ms.seed, losses or ms.losses,
                              ms.max_pairs, ms.min_gap)
    extra = {"zoo": manifest.fingerprint(), "excluded": exclude or "", "feature_dim": enc.feature_dim,
             "extractor_seed": enc.extractor_seed, "n_img": enc.n_img, "encoding_seed": config.run.seed}
    save_metaspace(out, trained, extra)
    save_index(with_suffix(out, ".index"), build_index(trained, manifest, cache))
    emit(ctx, pd.DataFrame([{"loss": name, "first": curve[0], "last": curve[-1], "trend": curve_trend(curve)}
                            for name, curve in trained.curves.items()]))


# -------------------------------
# Command: query
# -------------------------------
@cli.command("query")
@click.option("--metaspace", "metaspace_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--zoo", "zoo_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--topk", type=int, default=None)
@click.option("--finetune", is_flag=True, help="Fine-tune the candidates and select the best (T-k protocol).")
@click.option("--continue-epochs", type=click.IntRange(min=0), default=None)
@click.pass_context
def query(ctx, metaspace_path, zoo_path, dataset_path, topk, finetune, continue_epochs):
    """Rank zoo models for a new dataset by cosine similarity in the meta-space."""
    config = ctx.obj["config"]
    rc = config.retrieval
    trained, header = load_metaspace(metaspace_path)
    manifest = ZooManifest.load(zoo_path)
    if header.get("excluded"):
        manifest = manifest.without(header["excluded"])
    index = load_index(with_suffix(metaspace_path, ".index"), manifest)
    extractor = FrozenExtractor(manifest.space.input_shape, header["feature_dim"], header["extractor_seed"])
    dataset = read_dataset(dataset_path)
    d_new, _ = embed_new_dataset(dataset, extractor, trained, header["n_img"], header["encoding_seed"])
    result = run_query(index, d_new, rc.topk if topk is None else topk)
    if not finetune:
        emit(ctx, query_table(result))
        return
    selection = topk_select(result, dataset, SupernetStore(), rc.finetune_epochs, rc.seed, ctx.obj["threads"],
                            rc.batch_size, rc.lr)
    emit(ctx, query_table(result, selection.trials))
    click.echo(f"selected: {selection.chosen.candidate.entry.key()} val_acc={selection.chosen.val_acc:.6f}")
    epochs = rc.continue_epochs if continue_epochs is None else continue_epochs
    if epochs:
        _, points = continue_training(selection, dataset, epochs, rc.checkpoints, rc.seed, rc.batch_size, rc.lr)
        emit(ctx, convergence_table(points))


# -------------------------------
# Command: eval-loo
# -------------------------------
@cli.command("eval-loo")
@click.option("--family", "family_path", type=click.Path(exists=True, dir_okay=False), help="TOML with a [family] table.")
@click.option("--seeds", type=click.IntRange(min=1), default=1)
@click.option("--out", type=click.Path(file_okay=False), help="Keep datasets, checkpoints, manifests and loo.csv.")
@click.pass_context
def eval_loo(ctx, family_path, seeds, out):
    """Leave-one-dataset-out T1/T5/T10 benchmark on the synthetic family."""
    config = ctx.obj["config"]
    if family_path:
        config.family = load_config(family_path).family
    summary, detail = run_eval_loo(config, seeds, ctx.obj["threads"], out)
    emit(ctx, summary)
    stats = loo_summary(detail)
    logger.info("T1 %.3f T5 %.3f T10 %.3f over %d runs; T1 source among 2 FID-nearest in %.0f%%",
                stats["mean_T1"], stats["mean_T5"], stats["mean_T10"], stats["runs"], 100 * stats["source_hit_rate"])


# -------------------------------
# Command: fid
# -------------------------------
@cli.command("fid")
@click.option("--a", "path_a", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--b", "path_b", required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def fid(ctx, path_a, path_b):
    """FID between two dataset files in the frozen extractor's feature space."""
    config = ctx.obj["config"]
    a, b = read_dataset(path_a), read_dataset(path_b)
    if a.input_shape != b.input_shape:
        raise UsageError(f"image shapes differ: {a.input_shape} vs {b.input_shape}")
    extractor = FrozenExtractor(a.input_shape, config.encoding.feature_dim, config.encoding.extractor_seed)
    click.echo(f"{dataset_fid(a, b, extractor, config.encoding.n_img, config.run.seed):.6f}")


# -------------------------------
# Command: ablation
# -------------------------------
@cli.command("ablation")
@click.option("--seeds", type=click.IntRange(min=1), default=10)
@click.pass_context
def ablation(ctx, seeds):
    """Compare the five loss combinations on the synthetic affinity benchmark."""
    summary, tests = ablation_table(run_ablation(seeds, metaspace=ctx.obj["config"].metaspace))
    emit(ctx, summary)
    click.echo("")
    emit(ctx, tests)


def main(argv=None):
    try:
        result = cli.main(args=argv, prog_name="zooscout", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except ZooscoutError as e:
        click.echo(f"error: {e}", err=True)
        return e.exit_code
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        return DataError.exit_code
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(main())
