"""Dataset persistence and generation.

A dataset directory holds one subdirectory per scenario plus a manifest:

    dataset/
      manifest                 JSON: config, config hash, scenario list
      scenario_00000/
        meta                   JSON: physics, true Tx positions, seeds
        hits.csv               x_um,y_um,z_um,t_s,source_tx (9 significant digits)
        features.json          K-means summary features and matched targets

``features.json`` is written last and marks a scenario complete, so an
interrupted generation resumes by skipping finished directories.  Features
are computed from the positions exactly as re-read from hits.csv, making
training inputs bit-identical to what an evaluator reconstructs later.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .channel import ChannelParams
from .cluster import KMeansCluster
from .config import RunConfig, config_hash
from .metrics import match_clusters
from .refine import build_features
from .seeding import STREAM_CLUSTER, STREAM_PLACEMENT, STREAM_SPLIT, stream_seed
from .simulate import HitSet, ScenarioConfig, sample_tx_placement, simulate_scenario

__all__ = [
    "scenario_dir_name",
    "write_scenario",
    "load_scenario",
    "read_manifest",
    "gen_dataset",
    "load_training_arrays",
    "split_indices",
]

META_FORMAT_VERSION = 1
FEATURES_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1


def scenario_dir_name(index: int) -> str:
    return f"scenario_{index:05d}"


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _fmt9(x: float) -> str:
    return f"{x:.9g}"


def write_scenario(scenario_dir, hits: HitSet, d_min_um: float, d_max_um: float) -> None:
    """Persist one simulated scenario: meta and hits.csv."""
    scenario_dir = Path(scenario_dir)
    scenario_dir.mkdir(parents=True, exist_ok=True)
    cfg = hits.config
    meta = {
        "format_version": META_FORMAT_VERSION,
        "scenario_index": cfg.scenario_index,
        "master_seed": cfg.master_seed,
        "n_tx": cfg.num_tx,
        "tx_positions_um": cfg.tx_positions.tolist(),
        "n_molecules_per_tx": cfg.n_molecules_per_tx,
        "rx_radius_um": cfg.channel.rx_radius_um,
        "diffusion_coeff": cfg.channel.diffusion_coeff,
        "obs_time_s": cfg.channel.obs_time_s,
        "dt_s": cfg.dt_s,
        "d_min_um": d_min_um,
        "d_max_um": d_max_um,
    }
    _write_atomic(scenario_dir / "meta", json.dumps(meta, indent=1))

    lines = ["x_um,y_um,z_um,t_s,source_tx"]
    for p, t, s in zip(hits.positions, hits.times, hits.source_tx):
        lines.append(f"{_fmt9(p[0])},{_fmt9(p[1])},{_fmt9(p[2])},{_fmt9(t)},{int(s)}")
    _write_atomic(scenario_dir / "hits.csv", "\n".join(lines) + "\n")


def load_scenario(scenario_dir):
    """Read one scenario directory.

    Returns (meta dict, positions (n, 3), source_tx (n,)).
    """
    scenario_dir = Path(scenario_dir)
    meta_path = scenario_dir / "meta"
    hits_path = scenario_dir / "hits.csv"
    if not meta_path.is_file() or not hits_path.is_file():
        raise FileNotFoundError(f"scenario directory {scenario_dir} is missing meta or hits.csv")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != META_FORMAT_VERSION:
        raise ValueError(f"unsupported meta format in {meta_path}")
    raw = np.loadtxt(hits_path, delimiter=",", skiprows=1, ndmin=2)
    if raw.size == 0:
        return meta, np.empty((0, 3)), np.empty(0, dtype=np.int64)
    return meta, raw[:, 0:3], raw[:, 4].astype(np.int64)


def compute_scenario_features(meta, X, source_tx) -> dict:
    """K-means features of one scenario plus truth targets in canonical order."""
    k = meta["n_tx"]
    n_emitted = meta["n_molecules_per_tx"]
    km = KMeansCluster(
        n_clusters=k, random_state=stream_seed(meta["master_seed"], meta["scenario_index"], STREAM_CLUSTER)
    ).fit(X)
    base = km.to_cluster_set(X)
    features, order = build_features(base, n_emitted)

    tx_true = np.asarray(meta["tx_positions_um"], dtype=np.float64)
    true_dirs = tx_true / np.linalg.norm(tx_true, axis=1)[:, None]
    true_sizes = np.bincount(np.asarray(source_tx), minlength=k).astype(np.float64)

    dirs_canonical = base.directions()[order]
    sizes_canonical = base.sizes().astype(np.float64)[order]
    perm = match_clusters(dirs_canonical, true_dirs)
    return {
        "format_version": FEATURES_FORMAT_VERSION,
        "n_tx": k,
        "n_emitted": n_emitted,
        "features": features.tolist(),
        "kmeans_sizes": sizes_canonical.tolist(),
        "target_dirs": true_dirs[perm].tolist(),
        "target_sizes": true_sizes[perm].tolist(),
    }


def _generate_one(config: RunConfig, index: int, out_dir: str) -> dict:
    """Simulate, persist, and featurize scenario ``index``; returns its manifest row."""
    with threadpool_limits(limits=1):
        scen_dir = Path(out_dir) / scenario_dir_name(index)
        row = {"dir": scenario_dir_name(index), "scenario_index": index, "n_tx": config.n_tx,
               "seed_path": [config.master_seed, index]}
        if (scen_dir / "features.json").is_file():
            return row  # complete from an earlier run

        channel = ChannelParams(config.rx_radius_um, config.diffusion_coeff, config.obs_time_s)
        placement = sample_tx_placement(
            config.n_tx, config.d_min_um, config.d_max_um, config.rx_radius_um,
            stream_seed(config.master_seed, index, STREAM_PLACEMENT),
        )
        scen = ScenarioConfig(
            tx_positions=placement,
            n_molecules_per_tx=config.n_molecules_per_tx,
            channel=channel,
            dt_s=config.dt_s,
            master_seed=config.master_seed,
            scenario_index=index,
        )
        hits = simulate_scenario(scen)
        write_scenario(scen_dir, hits, config.d_min_um, config.d_max_um)

        # featurize from the file round-trip so training and evaluation see
        # bit-identical inputs
        meta, X, source_tx = load_scenario(scen_dir)
        features = compute_scenario_features(meta, X, source_tx)
        _write_atomic(scen_dir / "features.json", json.dumps(features, indent=1))
        return row


def gen_dataset(config: RunConfig, out_dir, threads: int = 1) -> Path:
    """Generate (or resume) a dataset of config.n_scenarios scenarios.

    Deterministic for a fixed config: every stream is keyed by
    (master_seed, scenario_index), so the manifest and all files are
    byte-identical however the run is scheduled or interrupted.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = Parallel(n_jobs=threads)(
        delayed(_generate_one)(config, i, str(out_dir)) for i in range(config.n_scenarios)
    )
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "config_hash": config_hash(config),
        "config": config.to_dict(),
        "scenarios": rows,
    }
    _write_atomic(out_dir / "manifest", json.dumps(manifest, indent=1))
    return out_dir


def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest in dataset directory {dataset_dir}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"unsupported manifest format in {path}")
    return manifest


def load_training_arrays(dataset_dir, indices=None):
    """Stack per-scenario features files into training arrays.

    Returns a dict with X (S, 4K), kmeans_sizes (S, K), target_dirs (S, K, 3),
    target_sizes (S, K), scenario_indices (S,), n_tx, n_emitted.
    """
    dataset_dir = Path(dataset_dir)
    manifest = read_manifest(dataset_dir)
    rows = manifest["scenarios"]
    if indices is not None:
        wanted = set(int(i) for i in indices)
        rows = [r for r in rows if r["scenario_index"] in wanted]
    if not rows:
        raise ValueError("no scenarios selected")

    X, km_sizes, t_dirs, t_sizes, idxs = [], [], [], [], []
    n_tx = n_emitted = None
    for row in rows:
        doc = json.loads((dataset_dir / row["dir"] / "features.json").read_text())
        if doc.get("format_version") != FEATURES_FORMAT_VERSION:
            raise ValueError(f"unsupported features format in {row['dir']}")
        if n_tx is None:
            n_tx, n_emitted = doc["n_tx"], doc["n_emitted"]
        elif doc["n_tx"] != n_tx:
            raise ValueError("scenarios mix different transmitter counts")
        X.append(doc["features"])
        km_sizes.append(doc["kmeans_sizes"])
        t_dirs.append(doc["target_dirs"])
        t_sizes.append(doc["target_sizes"])
        idxs.append(row["scenario_index"])
    return {
        "X": np.asarray(X, dtype=np.float64),
        "kmeans_sizes": np.asarray(km_sizes, dtype=np.float64),
        "target_dirs": np.asarray(t_dirs, dtype=np.float64),
        "target_sizes": np.asarray(t_sizes, dtype=np.float64),
        "scenario_indices": np.asarray(idxs, dtype=np.int64),
        "n_tx": n_tx,
        "n_emitted": n_emitted,
    }


def split_indices(scenario_indices, seed: int, fractions=(0.8, 0.1, 0.1)):
    """Deterministic train/val/test split of scenario indices."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    idx = np.asarray(scenario_indices, dtype=np.int64)
    rng = np.random.Generator(np.random.Philox(stream_seed(seed, 0, STREAM_SPLIT)))
    perm = rng.permutation(idx.shape[0])
    n_train = int(np.floor(fractions[0] * idx.shape[0]))
    n_val = int(np.floor(fractions[1] * idx.shape[0]))
    return idx[perm[:n_train]], idx[perm[n_train : n_train + n_val]], idx[perm[n_train + n_val :]]
