"""Paired synthetic dataset on disk: one EPCV file per phantom plus a JSON manifest."""
from __future__ import annotations

import dataclasses
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .config import DataConfig
from .phantom import CBCT_DOSE, DoseModel, head_spec, make_phantom, simulate_cbct, simulate_ct
from .tomo import Geometry

# two synthetic scanners / cohorts
DOMAIN_CBCT = {
    "A": dataclasses.replace(CBCT_DOSE, n_angles=90, scatter=1.5),
    "B": dataclasses.replace(CBCT_DOSE, n_angles=120, scatter=1.0),
}
MANIFEST = "manifest.json"


@dataclass
class Pair:
    id: str
    domain: str
    split: str
    path: Path
    x0: np.ndarray
    xc: np.ndarray
    y0: np.ndarray
    meta: dict


def domain_list(domains: str) -> list[str]:
    return ["A", "B"] if domains == "mixed" else [domains]


def _phantom_seeds(seed: int, domain_idx: int, index: int) -> list[int]:
    ss = np.random.SeedSequence([seed, domain_idx, index])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(4)]


def generate_pair(cfg: DataConfig, domain: str, domain_idx: int, index: int, seed: int):
    """Simulate one aligned (x0, xc, y0) triple; randomness depends only on the indices."""
    s_layout, s_jitter, s_ct, s_cbct = _phantom_seeds(seed, domain_idx, index)
    spec = head_spec(cfg.depth, cfg.size, cfg.size, np.random.default_rng(s_layout), domain=domain)
    vol = make_phantom(spec, seed=s_jitter)
    ct_dose = DoseModel(I0=cfg.ct_I0, n_angles=cfg.ct_angles)
    y0, x0 = simulate_ct(vol, ct_dose, seed=s_ct)
    _, xc = simulate_cbct(vol, DOMAIN_CBCT[domain], seed=s_cbct)
    return vol, y0, x0, xc, ct_dose


def build_dataset(out_dir, cfg: DataConfig, seed: int = 0, overwrite: bool = False) -> dict:
    """Write ``n_train + n_test`` pairs per domain and return the manifest.

    Splits are disjoint by phantom. Rebuilding with the same ``(cfg, seed)``
    reproduces every file byte for byte.
    """
    if cfg.n_train < 1 or cfg.n_test < 1:
        raise ValueError("n_train and n_test must both be >= 1")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} already exists; pass overwrite to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": 1, "seed": seed, "shape": [cfg.depth, cfg.size, cfg.size],
                "config": dataclasses.asdict(cfg), "domains": {}, "pairs": []}
    for d_idx, domain in enumerate(domain_list(cfg.domains)):
        cbct = DOMAIN_CBCT[domain]
        ct_geom = None
        for index in range(cfg.n_train + cfg.n_test):
            split = "train" if index < cfg.n_train else "test"
            pid = f"{domain}_{split}_{index:03d}"
            vol, y0, x0, xc, ct_dose = generate_pair(cfg, domain, d_idx, index, seed)
            ct_geom = y0.geometry
            rel = f"pairs/{pid}.epcv"
            container.save(out / rel, {"x0": x0.values, "xc": xc.values, "y0": y0.values,
                                       "phantom_hu": vol.values},
                           meta={"id": pid, "domain": domain, "split": split,
                                 "geometry": ct_geom.as_dict()})
            manifest["pairs"].append({"id": pid, "domain": domain, "split": split,
                                      "file": rel, "index": index})
        cbct_geom = Geometry.for_image(cfg.size, cfg.size, cbct.n_angles)
        manifest["domains"][domain] = {
            "ct_dose": dataclasses.asdict(ct_dose), "cbct_dose": dataclasses.asdict(cbct),
            "ct_geometry": ct_geom.as_dict(), "cbct_geometry": cbct_geom.as_dict(),
        }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def load_pairs(root, split: str | None = None, domain: str | None = None) -> list[Pair]:
    root = Path(root)
    pairs = []
    for entry in load_manifest(root)["pairs"]:
        if split is not None and entry["split"] != split:
            continue
        if domain is not None and entry["domain"] != domain:
            continue
        arrays, meta = container.load(root / entry["file"])
        pairs.append(Pair(entry["id"], entry["domain"], entry["split"], root / entry["file"],
                          arrays["x0"], arrays["xc"], arrays["y0"], meta))
    return pairs
