"""Experiment stages: synthesis, training, bank building, scoring, evaluation.

Each stage writes its artifacts plus the resolved config into its output
directory, so a results directory is self-describing. With a fixed seed and
one torch thread every stage is bitwise reproducible.
"""

from __future__ import annotations

import csv
import itertools
import json
import zlib
from pathlib import Path

import numpy as np

from . import bank as bank_mod
from . import data, formats, geometry, metrics, networks, pseudo, randnet, scoring
from .config import ExperimentConfig
from .errors import PipelineError


def _sample_seed(base: int, tag: str, index: int) -> int:
    seq = np.random.SeedSequence([int(base), zlib.crc32(tag.encode()), int(index)])
    return int(seq.generate_state(1)[0])


def _write_config(out: Path, cfg: ExperimentConfig) -> None:
    (out / "config.ini").write_text(cfg.to_ini())


def _fmt(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- synthesis

def cmd_synth(cfg: ExperimentConfig, out_dir) -> Path:
    """Generate the dataset directory: maps, defect masks, manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = {"size": cfg.size, "extent": cfg.extent, "noise": cfg.noise}
    entries = []

    for cls in cfg.train_classes:
        for i in range(cfg.train_count):
            pm = data.synth_object(cls, params, _sample_seed(cfg.seed, f"train/{cls}", i))
            name = f"train_{cls}_{i:03d}.opm"
            data.save_map(out / name, pm)
            entries.append(data.ManifestEntry("train", cls, name))

    for i in range(cfg.test_normal_count):
        pm = data.synth_object(cfg.test_class, params, _sample_seed(cfg.seed, "test-normal", i))
        name = f"test_normal_{i:03d}.opm"
        data.save_map(out / name, pm)
        entries.append(data.ManifestEntry("test-normal", cfg.test_class, name))

    for i in range(cfg.test_anomalous_count):
        base = data.synth_object(
            cfg.test_class, params, _sample_seed(cfg.seed, "test-anomalous", i)
        )
        kind = cfg.defect_kinds[i % len(cfg.defect_kinds)]
        dparams = {"amplitude": cfg.defect_amplitude}
        if cfg.defect_radius_px > 0:
            dparams["radius_px"] = cfg.defect_radius_px
        pm, mask = data.inject_anomaly(base, kind, dparams, _sample_seed(cfg.seed, f"defect/{kind}", i))
        name = f"test_anomalous_{i:03d}.opm"
        gt = f"test_anomalous_{i:03d}_gt.msk"
        data.save_map(out / name, pm)
        formats.write_msk(out / gt, mask)
        entries.append(data.ManifestEntry("test-anomalous", cfg.test_class, name, gt))

    for cls in cfg.irrelevant_classes:
        for i in range(cfg.irrelevant_count):
            pm = data.synth_object(cls, params, _sample_seed(cfg.seed, f"irrelevant/{cls}", i))
            name = f"irrelevant_{cls}_{i:03d}.opm"
            data.save_map(out / name, pm)
            entries.append(data.ManifestEntry("task-irrelevant", cls, name))

    data.DatasetManifest(tuple(entries), cfg.seed).save(out / "manifest.json")
    _write_config(out, cfg)
    return out / "manifest.json"


# ------------------------------------------------------------ data loading

def _manifest_path(data_dir) -> Path:
    p = Path(data_dir)
    if p.is_file():
        return p
    mp = p / "manifest.json"
    if not mp.is_file():
        raise PipelineError(f"no manifest at {p}")
    return mp


def _load_role(data_dir, role: str):
    mp = _manifest_path(data_dir)
    manifest = data.DatasetManifest.load(mp)
    base = mp.parent
    pairs = []
    for entry in manifest.select(role):
        path = base / entry.path
        if not path.is_file():
            raise PipelineError(f"manifest names missing map {entry.path}")
        pairs.append((entry, data.load_map(path)))
    return pairs


def _prep_blocks(grid: data.PatchGrid, idx: np.ndarray, cfg: ExperimentConfig) -> np.ndarray:
    pts = grid.blocks[idx].astype(np.float64)
    return networks.center_patch(pts) if cfg.center else pts


def _encode_chunks(encoder, pts: np.ndarray, chunk: int = 256) -> np.ndarray:
    parts = [networks.encode(encoder, pts[i : i + chunk]) for i in range(0, len(pts), chunk)]
    return np.concatenate(parts, axis=0)


def _cached_fpfh(cache, key, pm, patch_size):
    if cache is None:
        return geometry.map_fpfh(pm, patch_size)[0]
    if key not in cache:
        cache[key] = geometry.map_fpfh(pm, patch_size)[0]
    return cache[key]


# ------------------------------------------------------------------ preview

def cmd_pseudo_preview(cfg: ExperimentConfig, data_dir, out_dir, count: int = 8) -> Path:
    """Materialize the first few training groups for inspection."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stream = _training_stream(cfg, data_dir)
    n = count * (1 + cfg.negatives_per_positive)
    patches = list(itertools.islice(stream, n))
    if not patches:
        raise PipelineError("training stream is empty")
    points = np.stack([p.points for p in patches]).astype(np.float32)
    labels = np.array([p.label for p in patches], dtype=np.float32)
    formats.write_tensors(out / "preview.zalw", {"points": points, "labels": labels})
    with open(out / "preview.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["idx", "label", "kind", "map", "patch"])
        for i, p in enumerate(patches):
            wr.writerow([i, p.label, p.kind, p.provenance.get("map"), p.provenance.get("patch")])
    _write_config(out, cfg)
    return out / "preview.zalw"


# ----------------------------------------------------------------- training

def _training_stream(cfg: ExperimentConfig, data_dir):
    train_pairs = _load_role(data_dir, "train")
    irr_pairs = _load_role(data_dir, "task-irrelevant")
    if not train_pairs:
        raise PipelineError("dataset has no training maps")
    if not irr_pairs:
        raise PipelineError("dataset has no task-irrelevant maps")
    params = randnet.init_randnet(cfg.seed, width=cfg.width, bn_mode=cfg.bn_mode)

    def interest_points_of(pm):
        return pseudo.extract_interest_points(pm, randnet.saliency(params, pm, cfg.tau)[1])

    return pseudo.build_training_set(
        [pm for _, pm in train_pairs],
        [pm for _, pm in irr_pairs],
        cfg.synthesis_config(),
        interest_points_of,
        cfg.patch_size,
        cfg.test_class,
        [e.class_label for e, _ in irr_pairs],
    )


def cmd_train(cfg: ExperimentConfig, data_dir, out_dir, fpfh_cache=None) -> Path:
    """Train the point encoder and normalcy classifier; write the checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_maps = [pm for _, pm in _load_role(data_dir, "train")]
    stream = _training_stream(cfg, data_dir)

    def fpfh_of(prov):
        desc = _cached_fpfh(fpfh_cache, prov["map"], train_maps[prov["map"]], cfg.patch_size)
        return desc[prov["patch"]]

    encoder, classifier, log = networks.train(
        stream,
        cfg.loss_config(),
        cfg.seed,
        fpfh_of=fpfh_of if cfg.w_rd > 0 else None,
        epochs=cfg.epochs,
        lr=cfg.lr,
        positives_per_batch=cfg.positives_per_batch,
        widths=cfg.net_widths,
        radii=cfg.net_radii,
        center=cfg.center,
        max_positives=cfg.max_positives or None,
    )
    networks.save_checkpoint(out / "checkpoint.zalw", encoder, classifier)
    with open(out / "loss_log.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "step", "l_con", "l_rd", "l_bce", "total"])
        for row in log:
            wr.writerow([row["epoch"], row["step"], _fmt(row["l_con"]),
                         _fmt(row["l_rd"]), _fmt(row["l_bce"]), _fmt(row["total"])])
    _write_config(out, cfg)
    return out / "checkpoint.zalw"


# --------------------------------------------------------------------- bank

def cmd_bank(cfg: ExperimentConfig, data_dir, ckpt_path, out_dir, fpfh_cache=None) -> Path:
    """Build the coreset memory bank over every training patch with geometry.

    Patches with any foreground point are kept, down to single-point rim
    slivers; fully empty patches carry no geometry and stay out.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    encoder, _ = networks.load_checkpoint(ckpt_path, cfg.net_widths, cfg.net_radii)
    train_pairs = _load_role(data_dir, "train")
    if not train_pairs:
        raise PipelineError("dataset has no training maps")

    blocks, prov = [], []
    for m_idx, (entry, pm) in enumerate(train_pairs):
        grid = data.partition(pm, cfg.patch_size)
        idx = np.flatnonzero(grid.foreground_counts() > 0)
        if idx.size == 0:
            continue
        desc = _cached_fpfh(fpfh_cache, m_idx, pm, cfg.patch_size)
        learned = _encode_chunks(encoder, _prep_blocks(grid, idx, cfg))
        blocks.append(bank_mod.combine_rows(desc[idx], learned))
        prov.extend(f"{entry.path}:{int(p)}" for p in idx)
    if not blocks:
        raise PipelineError("no training patches hold any foreground geometry")
    features = np.concatenate(blocks, axis=0)
    mb = bank_mod.build_bank(features, cfg.coreset_ratio, cfg.seed, provenance=prov)
    bank_mod.save_bank(out / "bank.zalb", mb, seed=cfg.seed)
    _write_config(out, cfg)
    return out / "bank.zalb"


# ------------------------------------------------------------------ scoring

def _stem(name: str) -> str:
    return Path(name).stem


def cmd_score(cfg: ExperimentConfig, data_dir, ckpt_path, bank_path, out_dir) -> Path:
    """Score every test sample: branch maps, fused maps, per-sample CSV.

    The distance branch sees the original patches; only the classification
    branch sees the perturbed ones. With w_c = 0 the classifier is skipped
    and the classification branch is identically zero.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    encoder, classifier = networks.load_checkpoint(ckpt_path, cfg.net_widths, cfg.net_radii)
    mb = bank_mod.load_bank(bank_path)
    sc = cfg.score_config()
    use_cls = cfg.w_c > 0

    pairs = _load_role(data_dir, "test-normal") + _load_role(data_dir, "test-anomalous")
    if not pairs:
        raise PipelineError("dataset has no test maps")

    samples = []
    for entry, pm in pairs:
        grid = data.partition(pm, cfg.patch_size)
        # score every patch that holds geometry; empty patches carry no
        # anomaly evidence and keep value 0 in both branch maps
        idx = np.flatnonzero(grid.foreground_counts() > 0)
        if idx.size == 0:
            raise PipelineError(f"{entry.path}: no foreground geometry to score")
        desc = geometry.map_fpfh(pm, cfg.patch_size)[0]
        pts = _prep_blocks(grid, idx, cfg)
        feats = bank_mod.combine_rows(desc[idx], _encode_chunks(encoder, pts))

        _, dists = bank_mod.nn_batch(mb, feats)
        s_dist = scoring.dist_score(feats, mb, sc)
        full_d = np.zeros(len(grid))
        full_d[idx] = dists
        dmap = scoring.patch_score_map(full_d, (pm.height, pm.width), cfg.patch_size,
                                       sc, scoring.DIST)

        full_c = np.zeros(len(grid))
        s_cls = 0.0
        if use_cls:
            perturbed = scoring.perturb(classifier, pts, cfg.eta, patch_id=entry.path)
            probs = networks.classify(classifier, perturbed)
            s_cls = float(np.max(probs))
            full_c[idx] = probs
        cmap = scoring.patch_score_map(full_c, (pm.height, pm.width), cfg.patch_size,
                                       sc, scoring.CLS)
        label = 1 if entry.role == "test-anomalous" else 0
        samples.append((entry, label, s_dist, s_cls, dmap, cmap))

    ranges = None
    if cfg.normalize_before_fuse:
        ranges = {
            "map_dist": scoring.minmax_range([s[4].values for s in samples]),
            "map_cls": scoring.minmax_range([s[5].values for s in samples]),
            "img_dist": scoring.minmax_range([s[2] for s in samples]),
            "img_cls": scoring.minmax_range([s[3] for s in samples]),
        }
        with open(out / "ranges.json", "w") as fh:
            json.dump({k: [v[0], v[1]] for k, v in ranges.items()}, fh,
                      sort_keys=True, indent=2)
            fh.write("\n")

    with open(out / "scores.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample", "role", "class", "label", "s_dist", "s_cls", "s"])
        for entry, label, s_dist, s_cls, dmap, cmap in samples:
            if ranges is None:
                s = scoring.fuse(s_dist, s_cls, sc)
                fused = scoring.fuse_maps(dmap, cmap, sc)
            else:
                s = scoring.fuse(s_dist, s_cls, sc, ranges["img_dist"], ranges["img_cls"])
                fused = scoring.fuse_maps(dmap, cmap, sc, ranges["map_dist"], ranges["map_cls"])
            stem = _stem(entry.path)
            formats.write_score_map(maps_dir / f"{stem}_dist.zalm", dmap.values)
            formats.write_score_map(maps_dir / f"{stem}_cls.zalm", cmap.values)
            formats.write_score_map(maps_dir / f"{stem}_fused.zalm", fused.values)
            wr.writerow([entry.path, entry.role, entry.class_label, label,
                         _fmt(s_dist), _fmt(s_cls), _fmt(s)])
    _write_config(out, cfg)
    return out / "scores.csv"


# --------------------------------------------------------------- evaluation

def _read_scores(score_dir) -> list[dict]:
    path = Path(score_dir) / "scores.csv"
    if not path.is_file():
        raise PipelineError(f"no scores.csv under {score_dir}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise PipelineError("scores.csv holds no samples")
    return rows


def cmd_eval(cfg: ExperimentConfig, data_dir, score_dir, out_dir) -> Path:
    """Compute dataset metrics from stored score maps and ground truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = _read_scores(score_dir)
    mp = _manifest_path(data_dir)
    base = mp.parent
    by_path = {e.path: e for e in data.DatasetManifest.load(mp).entries}

    scores, labels, classes, score_maps, gt_masks = [], [], [], [], []
    for row in rows:
        entry = by_path.get(row["sample"])
        if entry is None:
            raise PipelineError(f"scored sample {row['sample']} not in manifest")
        fused = formats.read_score_map(Path(score_dir) / "maps" / f"{_stem(entry.path)}_fused.zalm")
        label = int(row["label"])
        if label == 1:
            if entry.gt_path is None:
                raise PipelineError(f"anomalous sample {entry.path} has no ground-truth mask")
            gt = formats.read_msk(base / entry.gt_path)
        else:
            gt = np.zeros(fused.shape, dtype=np.uint8)
        if gt.shape != fused.shape:
            raise PipelineError(
                f"{entry.path}: mask {gt.shape} does not match score map {fused.shape}"
            )
        scores.append(float(row["s"]))
        labels.append(label)
        classes.append(row["class"])
        score_maps.append(fused.astype(np.float64))
        gt_masks.append(gt)
    if len({m.shape for m in score_maps}) > 1:
        raise PipelineError("mixed sample sizes in one evaluation")

    result = metrics.evaluate(scores, labels, score_maps, gt_masks,
                              classes=classes, fpr_limit=cfg.fpr_limit)
    payload = {
        "image_auroc": result.image_auroc,
        "pixel_aupro": result.pixel_aupro,
        "fpr_limit": result.fpr_limit,
        "per_class": result.per_class,
        "n_samples": len(scores),
        "config": {s: {k: str(v) for k, v in kv.items()}
                   for s, kv in cfg.to_sections().items()},
    }
    with open(out / "metrics.json", "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(out / "curve.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["fpr", "pro"])
        for fpr, pro in result.curve:
            wr.writerow([_fmt(fpr), _fmt(pro)])
    _write_config(out, cfg)
    return out / "metrics.json"


# ----------------------------------------------------------------- zeroshot

def cmd_zeroshot(cfg: ExperimentConfig, data_dir, out_dir) -> Path:
    """Full run: train, bank, score, eval into one results directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fpfh_cache = {}
    ckpt = cmd_train(cfg, data_dir, out, fpfh_cache)
    bank_path = cmd_bank(cfg, data_dir, ckpt, out, fpfh_cache)
    cmd_score(cfg, data_dir, ckpt, bank_path, out)
    return cmd_eval(cfg, data_dir, out, out)
