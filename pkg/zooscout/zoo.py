"""Model zoo: subnetworks extracted from trained supernets, one record per line."""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from zooscout.errors import DataError, FormatError, UsageError
from zooscout.numerics import make_rng
from zooscout.statistics import spearman
from zooscout.supernet import (
    ArchitectureConfig,
    FairnessSampler,
    SearchSpace,
    config_to_mask,
    estimate_performance,
    scratch_train,
)

logger = logging.getLogger(__name__)

SCHEMA = "zooscout-zoo/1"
MAX_ENUMERATED = 4096


@dataclass(frozen=True)
class ZooEntry:
    dataset_id: str
    arch: ArchitectureConfig
    supernet_ref: str
    estimated_perf: float
    scratch_perf: float | None = None

    def to_record(self):
        return {
            "dataset_id": self.dataset_id,
            "arch": self.arch.to_list(),
            "supernet_ref": self.supernet_ref,
            "estimated_perf": self.estimated_perf,
            "scratch_perf": self.scratch_perf,
        }

    @classmethod
    def from_record(cls, rec):
        try:
            return cls(
                dataset_id=str(rec["dataset_id"]),
                arch=ArchitectureConfig.from_list(rec["arch"]),
                supernet_ref=str(rec["supernet_ref"]),
                estimated_perf=float(rec["estimated_perf"]),
                scratch_perf=None if rec.get("scratch_perf") is None else float(rec["scratch_perf"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad zoo record {rec!r}: {e}") from e

    def key(self):
        return f"{self.dataset_id}|{self.arch.key()}"


@dataclass
class ZooManifest:
    entries: list
    space: SearchSpace
    metadata: dict = field(default_factory=dict)

    def validate(self):
        seen = set()
        for entry in self.entries:
            if entry.key() in seen:
                raise DataError(f"duplicate zoo entry {entry.key()}")
            if not self.space.contains(entry.arch):
                raise DataError(f"zoo entry {entry.key()} is outside the search space")
            if not 0.0 <= entry.estimated_perf <= 1.0:
                raise DataError(f"zoo entry {entry.key()} has P-hat {entry.estimated_perf} outside [0, 1]")
            seen.add(entry.key())
        for target, row in self.transfers().items():
            if target not in self.datasets():
                raise DataError(f"transfer target '{target}' has no zoo entries")
            for key, p_hat in row.items():
                if key not in seen or key.startswith(f"{target}|"):
                    raise DataError(f"transfer {key} -> {target} does not name a foreign zoo entry")
                if not 0.0 <= p_hat <= 1.0:
                    raise DataError(f"transfer {key} -> {target} has P-hat {p_hat} outside [0, 1]")
        return self

    def transfers(self):
        """``{target_id: {entry_key: P-hat on the target}}`` for foreign subnets; empty when not measured."""
        return self.metadata.get("transfers", {})

    def datasets(self):
        return list(dict.fromkeys(e.dataset_id for e in self.entries))

    def by_dataset(self, dataset_id):
        return [(i, e) for i, e in enumerate(self.entries) if e.dataset_id == dataset_id]

    def without(self, dataset_id):
        kept = [e for e in self.entries if e.dataset_id != dataset_id]
        meta = {**self.metadata, "held_out": dataset_id}
        if "transfers" in meta:
            keys = {e.key() for e in kept}
            meta["transfers"] = {t: {k: p for k, p in row.items() if k in keys}
                                 for t, row in meta["transfers"].items() if t != dataset_id}
        return ZooManifest(kept, self.space, meta)

    def dumps(self):
        header = {"schema": SCHEMA, "space": self.space.fingerprint(),
                  "space_config": self.space.to_dict(), "meta": self.metadata}
        lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
        lines += [json.dumps(e.to_record(), sort_keys=True, separators=(",", ":")) for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text, source="<zoo>"):
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines:
            raise FormatError(f"{source}: empty manifest")
        try:
            header = json.loads(lines[0])
            records = [json.loads(line) for line in lines[1:]]
        except json.JSONDecodeError as e:
            raise FormatError(f"{source}: {e}") from e
        if header.get("schema") != SCHEMA:
            raise FormatError(f"{source}: schema {header.get('schema')!r}, expected {SCHEMA!r}")
        space = SearchSpace.from_dict(header["space_config"])
        if space.fingerprint() != header.get("space"):
            raise FormatError(f"{source}: space fingerprint does not match its configuration")
        return cls([ZooEntry.from_record(r) for r in records], space, header.get("meta", {})).validate()

    def save(self, path):
        Path(path).write_text(self.dumps())
        logger.info("wrote zoo manifest with %d entries to %s", len(self.entries), path)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise DataError(f"{path}: no such zoo manifest")
        return cls.loads(path.read_text(), source=str(path))

    def fingerprint(self):
        return hashlib.sha256(self.dumps().encode()).hexdigest()


# -------------------------------
# Construction
# -------------------------------
def parse_policy(policy):
    """'all', 'max' or 'sample:<n>' -> (kind, n)."""
    if policy in ("all", "max"):
        return policy, None
    if policy.startswith("sample:"):
        try:
            n = int(policy.split(":", 1)[1])
        except ValueError:
            n = 0
        if n >= 1:
            return "sample", n
    raise UsageError(f"bad zoo policy '{policy}' (expected all, max or sample:<n>)")


def select_configs(space, policy, rng):
    kind, n = parse_policy(policy)
    if kind == "max":
        return [space.maximal()]
    if kind == "all":
        if space.size() > MAX_ENUMERATED:
            raise UsageError(f"space has {space.size()} configs; 'all' enumerates at most {MAX_ENUMERATED}")
        return list(space.configs())
    if n > space.size():
        logger.warning("requested %d subnets but the space only has %d; using all", n, space.size())
        n = space.size()
    sampler = FairnessSampler(space, rng)
    chosen = {}
    # Repeats are skipped so (dataset, arch) stays unique.
    while len(chosen) < n:
        for cfg in sampler.sample_fair(n - len(chosen)):
            chosen.setdefault(cfg.key(), cfg)
    return list(chosen.values())[:n]


def _read_only(params):
    frozen = {}
    for name, p in params.items():
        view = p.view()
        view.flags.writeable = False
        frozen[name] = view
    return frozen


def build_zoo(supernets, datasets, policy="all", seed=0, threads=1, transfer=0):
    """Extract subnets from each dataset's trained supernet and score them with inherited weights.

    ``supernets`` maps dataset id -> ``SupernetCheckpoint``; no weights change.
    With ``transfer > 0`` up to that many subnets per source are also scored
    on every other dataset (see ``measure_transfers``).
    """
    if not datasets:
        raise UsageError("build_zoo needs at least one dataset")
    missing = [d for d in datasets if d not in supernets]
    if missing:
        raise DataError(f"missing supernet for dataset(s): {', '.join(missing)}")
    spaces = {supernets[d].space.fingerprint() for d in datasets}
    if len(spaces) != 1:
        raise UsageError("all supernets in a zoo must share one search space")
    space = supernets[next(iter(datasets))].space

    entries = []
    per_dataset = None
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for i, (dataset_id, dataset) in enumerate(datasets.items()):
            ckpt = supernets[dataset_id]
            cfgs = select_configs(space, policy, make_rng(seed, "sampling", i))
            per_dataset = len(cfgs)
            theta = _read_only(ckpt.params)
            val = dataset.split("val")
            scores = pool.map(lambda cfg: estimate_performance(theta, config_to_mask(space, cfg), val), cfgs)
            ref = str(ckpt.path) if ckpt.path else dataset_id
            entries += [ZooEntry(dataset_id, cfg, ref, p_hat) for cfg, p_hat in zip(cfgs, scores)]
            logger.info("zoo: %s -> %d subnets", dataset_id, len(cfgs))

    meta = {
        "seed": seed,
        "policy": policy,
        "subnets_per_dataset": per_dataset,
        "datasets": list(datasets),
        "optimizer_steps": {d: int(supernets[d].meta.get("optimizer_steps", 0)) for d in datasets},
    }
    manifest = ZooManifest(entries, space, meta)
    if transfer and len(datasets) > 1:
        meta["transfers"] = measure_transfers(manifest, supernets, datasets, transfer, seed, threads)
    return manifest.validate()


def measure_transfers(manifest, supernets, datasets, per_source=32, seed=0, threads=1):
    """Score zoo subnets on the validation split of every other dataset.

    The same ``per_source`` subnets of each source are drawn for every target
    and keep their source's weights, classifier head included. Returns
    ``{target_id: {entry_key: P-hat}}``.
    """
    ids = manifest.datasets()
    drawn = {}
    for i, source in enumerate(ids):
        rows = manifest.by_dataset(source)
        pick = make_rng(seed, "sampling", i, 1).choice(len(rows), size=min(per_source, len(rows)), replace=False)
        drawn[source] = [rows[j][1] for j in np.sort(pick)]
    frozen = {d: _read_only(supernets[d].params) for d in ids}
    space = manifest.space
    transfers = {}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for target in ids:
            val = datasets[target].split("val")
            foreign = [e for source in ids if source != target for e in drawn[source]]
            scores = pool.map(
                lambda e: estimate_performance(frozen[e.dataset_id], config_to_mask(space, e.arch), val), foreign)
            transfers[target] = {e.key(): float(p) for e, p in zip(foreign, scores)}
            logger.info("zoo: scored %d foreign subnets on %s", len(foreign), target)
    return transfers


# -------------------------------
# Rank audit
# -------------------------------
def audit_rank(manifest, datasets, k, epochs, seed=0, threads=1, batch_size=32, lr=5e-3):
    """Scratch-train ``k`` zoo archs per dataset and correlate P-hat with scratch accuracy.

    The k archs are spread evenly over the P-hat ordering. Returns
    ``(correlations, manifest with scratch_perf filled)``.
    """
    if k < 3:
        raise UsageError("audit_rank needs k >= 3")
    entries = list(manifest.entries)
    results = {}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for dataset_id in manifest.datasets():
            if dataset_id not in datasets:
                raise DataError(f"audit_rank: dataset '{dataset_id}' not provided")
            rows = manifest.by_dataset(dataset_id)
            if k > len(rows):
                raise UsageError(f"audit_rank: k={k} exceeds the {len(rows)} entries of {dataset_id}")
            rows.sort(key=lambda r: (r[1].estimated_perf, r[0]))
            picks = [rows[int(j)] for j in np.unique(np.round(np.linspace(0, len(rows) - 1, k)).astype(int))]
            scratch = list(pool.map(
                lambda row: scratch_train(manifest.space, row[1].arch, datasets[dataset_id], epochs, seed,
                                          batch_size, lr),
                picks))
            for (idx, entry), perf in zip(picks, scratch):
                entries[idx] = replace(entry, scratch_perf=perf)
            rho = spearman([e.estimated_perf for _, e in picks], scratch)
            if rho.degenerate:
                logger.warning("rank audit for %s is degenerate (zero variance)", dataset_id)
            results[dataset_id] = rho
            logger.info("rank audit %s: spearman %s over %d subnets", dataset_id, rho, len(picks))
    return results, ZooManifest(entries, manifest.space, manifest.metadata)
