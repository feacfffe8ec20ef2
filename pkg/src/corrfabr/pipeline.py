"""Three-step pipeline (aggregation, fusion, prediction) over a workdir.

Each ``run_*`` function reads the artifacts of the previous step from the
workdir, writes its own, and finishes by writing a step stamp
``stamps/<step>.json`` holding a hash of the relevant configuration and of
the upstream stamps.  A step refuses to run when an upstream stamp is
missing.

Workdir layout::

    patients.json                  ids, labels, sequence counts (no paths)
    folds.json                     patient id -> fold
    preprocessed/radiology/<id>/   seq<s>.cftn [D,224,224], lesion.cftn, organ.cftn
    preprocessed/pathology/<id>/   image.cftn, tissue.cftn
    features/radiology/<id>/       lesion.cftn [D,64n], normal.cftn [k,64n]
    features/pathology/<id>/       lesion.cftn [m,64], normal.cftn [k,64]
    features/corrfeat/fold<f>/<id>/  lesion.cftn [D,k], normal.cftn
    pairs/fold<f>/                 rad.cftn, pat.cftn, tags.json
    models/fold<f>/corrnet/        CorrNet parameters
    models/fold<f>/predictor_<inputs>/
    predictions/<inputs>/fold<f>.json
    reports/metrics_<inputs>.json

Only preprocess, extract, aggregate and train-fusion touch pathology data.
"""

import dataclasses
import hashlib
import json
import logging
import os
import shutil
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import aggregation as agg
from .corrnet import FusionTrainConfig, encode_radiology, encode_vectors, load_corrnet, \
    save_corrnet, train_fusion
from .evaluation import MetricsReport, dice, fold_members, kfold_split, lesion_metrics
from .features import PATCH, extract_highres_patches, load_extractor, make_builtin_extractor
from .prediction import PredictorTrainConfig, lesion_prediction, load_classifier, \
    predict_slice, save_classifier, train_predictor
from .preprocessing import AGGRESSIVE, crop_resize_lesion, label_aggressiveness, \
    macenko_fit, macenko_normalize, otsu_threshold, resize_bilinear, rgb_to_gray, \
    zscore_normalize_lesion
from .synthetic import gen_cohort, write_cohort
from .tensor_io import derive_seed, image_to_tensor, load_tensor, make_rng, save_tensor

log = logging.getLogger("corrfabr")

MODES = ("kidney", "prostate-sim")
AGGREGATIONS = ("pixel-pixel", "lesion-biopsy", "lesion-section")
RESOLUTIONS = ("low", "high")
INPUTS = ("rad-only", "rad+corrfeat", "corrfeat-only")

# stand-ins for pretrained weights: fixed, independent of the run seed
RAD_EXTRACTOR_SEED = 1
PAT_EXTRACTOR_SEED = 2

STEPS = ("synth", "preprocess", "extract", "aggregate", "train-fusion", "encode",
         "train-predict", "evaluate")
UPSTREAM = {"synth": (), "preprocess": (), "extract": ("preprocess",),
            "aggregate": ("extract",), "train-fusion": ("aggregate",),
            "encode": ("train-fusion",), "train-predict": ("encode",),
            "evaluate": ("train-predict",)}


class InputError(Exception):
    """Bad configuration, manifest or missing upstream artifacts."""


@dataclass
class PipelineConfig:
    manifest: str = ""
    workdir: str = "work"
    mode: str = "kidney"
    aggregation: str = "lesion-section"
    pathology_resolution: str = "low"
    inputs: str = "rad+corrfeat"
    seed: int = 0
    folds: int = 5
    normal_window: int = 20
    biopsy_window: int = 56
    pixel_cap: int = agg.PIXEL_CAP
    val_fraction: float = 0.2
    workers: int = 1
    extractors: str = ""
    save_corrfeat_maps: bool = False
    fusion: FusionTrainConfig = field(default_factory=FusionTrainConfig)
    predictor: PredictorTrainConfig = field(default_factory=PredictorTrainConfig)
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.fusion, dict):
            self.fusion = FusionTrainConfig(**self.fusion)
        if isinstance(self.predictor, dict):
            self.predictor = PredictorTrainConfig(**self.predictor)
        self.validate()

    def validate(self):
        for name, allowed in (("mode", MODES), ("aggregation", AGGREGATIONS),
                              ("pathology_resolution", RESOLUTIONS), ("inputs", INPUTS)):
            if getattr(self, name) not in allowed:
                raise InputError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.aggregation == "pixel-pixel" and self.pathology_resolution != "low":
            raise InputError("pixel-pixel aggregation is only possible with low-res pathology")
        if self.aggregation == "pixel-pixel" and self.mode != "prostate-sim":
            raise InputError("pixel-pixel aggregation needs slice-aligned pathology "
                             "(prostate-sim mode)")
        if self.folds < 2:
            raise InputError("folds must be >= 2")
        if not 0 < self.val_fraction < 1:
            raise InputError("val_fraction must be in (0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise InputError("seed must be a 64-bit unsigned integer")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise InputError(str(exc)) from exc
        except ValueError as exc:
            raise InputError(str(exc)) from exc


def load_config(path=None, overrides=None) -> PipelineConfig:
    """Config from a JSON file (optional) plus ``{"a.b": value}`` overrides."""
    data = {}
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise InputError(f"cannot override {key}: {p} is not a section")
        node[parts[-1]] = value
    return PipelineConfig.from_dict(data)


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------

def _p(cfg, *parts):
    return os.path.join(cfg.workdir, *parts)


def _hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _stamp_key(cfg, step):
    c = cfg.to_dict()
    keys = {"preprocess": ("manifest", "mode"),
            "extract": ("extractors", "aggregation", "pathology_resolution",
                        "normal_window", "biopsy_window", "seed"),
            "aggregate": ("aggregation", "folds", "pixel_cap", "seed"),
            "train-fusion": ("fusion", "seed"),
            "encode": ("save_corrfeat_maps",),
            "train-predict": ("predictor", "inputs", "val_fraction", "seed"),
            "evaluate": ("inputs",),
            "synth": ("synth", "mode", "seed")}[step]
    return {k: c[k] for k in keys}


def check_upstream(cfg, step):
    for up in UPSTREAM[step]:
        if not os.path.exists(_p(cfg, "stamps", up + ".json")):
            raise InputError(f"missing upstream artifacts: run '{up}' before '{step}'")


def write_stamp(cfg, step, outputs=None):
    upstream = {up: _read_json(_p(cfg, "stamps", up + ".json"))["hash"]
                for up in UPSTREAM[step]}
    body = {"step": step, "config": _stamp_key(cfg, step), "upstream": upstream,
            "outputs": outputs or {}}
    body["hash"] = _hash(body)
    _write_json(_p(cfg, "stamps", step + ".json"), body)
    return body["hash"]


def _pmap(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _extractors(cfg):
    if cfg.extractors:
        return (load_extractor(os.path.join(cfg.extractors, "radiology")),
                load_extractor(os.path.join(cfg.extractors, "pathology")))
    return (make_builtin_extractor(RAD_EXTRACTOR_SEED, in_channels=1),
            make_builtin_extractor(PAT_EXTRACTOR_SEED, in_channels=3))


def _load_any(path):
    if path.lower().endswith(".cftn"):
        return load_tensor(path)
    return image_to_tensor(path)


def load_patients(cfg):
    return _read_json(_p(cfg, "patients.json"))["patients"]


def load_folds(cfg):
    return _read_json(_p(cfg, "folds.json"))


def n_classes(cfg):
    return 3 if cfg.mode == "prostate-sim" else 2


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def run_synth(cfg):
    """Generate a synthetic cohort into ``<workdir>/cohort`` and point
    ``cfg.manifest`` at it."""
    opts = dict(cfg.synth)
    out = opts.pop("directory", _p(cfg, "cohort"))
    cohort = gen_cohort(seed=cfg.seed, mode=cfg.mode, **opts)
    cfg.manifest = write_cohort(cohort, out)
    write_stamp(cfg, "synth", {"manifest": cfg.manifest})
    return cfg.manifest


# --------------------------------------------------------------------------
# preprocess
# --------------------------------------------------------------------------

def read_manifest(cfg):
    if not cfg.manifest:
        raise InputError("no manifest configured")
    try:
        man = _read_json(cfg.manifest)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read manifest {cfg.manifest}: {exc}") from exc
    if man.get("mode", cfg.mode) != cfg.mode:
        raise InputError(f"manifest mode {man['mode']!r} does not match config mode "
                         f"{cfg.mode!r}")
    base = os.path.dirname(os.path.abspath(cfg.manifest))
    patients = man.get("patients")
    if not patients:
        raise InputError("manifest lists no patients")
    ids = [p.get("id") for p in patients]
    if None in ids or len(set(ids)) != len(ids):
        raise InputError("every patient needs a unique 'id'")
    for p in patients:
        for key in ("radiology", "lesion_mask", "pathology", "grade", "necrosis"):
            if key not in p:
                raise InputError(f"patient {p['id']}: missing key {key!r}")
        if cfg.mode == "prostate-sim" and "organ_mask" not in p:
            raise InputError(f"patient {p['id']}: prostate-sim needs 'organ_mask'")
        try:
            label_aggressiveness(p["grade"], p["necrosis"])
        except ValueError as exc:
            raise InputError(f"patient {p['id']}: {exc}") from exc
    return base, patients


def _normalize_stains(rgb):
    try:
        return macenko_normalize(rgb, macenko_fit(rgb))
    except ValueError as exc:
        warnings.warn(f"stain normalization skipped: {exc}")
        return rgb


def _preprocess_one(args):
    cfg, base, p = args
    rd = _p(cfg, "preprocessed", "radiology", p["id"])
    pd = _p(cfg, "preprocessed", "pathology", p["id"])
    os.makedirs(rd, exist_ok=True)
    os.makedirs(pd, exist_ok=True)
    lesion = _load_any(os.path.join(base, p["lesion_mask"])) > 0
    organ = None
    frame = lesion
    if cfg.mode == "prostate-sim":
        organ = _load_any(os.path.join(base, p["organ_mask"])) > 0
        frame = organ
    if not lesion.any():
        raise InputError(f"patient {p['id']}: empty lesion mask")
    les_c = crop_resize_lesion(lesion.astype(float), frame) >= 0.5
    save_tensor(les_c, os.path.join(rd, "lesion.cftn"), dtype="f32")
    if organ is not None:
        org_c = crop_resize_lesion(organ.astype(float), frame) >= 0.5
        save_tensor(org_c, os.path.join(rd, "organ.cftn"), dtype="f32")
    norm_mask = org_c if organ is not None else les_c
    for s, rel in enumerate(p["radiology"]):
        vol = _load_any(os.path.join(base, rel))
        if vol.shape != lesion.shape:
            raise InputError(f"patient {p['id']}: sequence {s} shape {vol.shape} "
                             f"!= mask shape {lesion.shape}")
        v = zscore_normalize_lesion(crop_resize_lesion(vol, frame), norm_mask)
        save_tensor(v, os.path.join(rd, f"seq{s}.cftn"))

    img = _load_any(os.path.join(base, p["pathology"]))
    if cfg.mode == "prostate-sim":
        if img.shape != lesion.shape + (3,):
            raise InputError(f"patient {p['id']}: aligned pathology must be [D,H,W,3]")
        flat = img.reshape(-1, img.shape[2], 3)
        img = _normalize_stains(flat).reshape(img.shape)
        img = np.stack([crop_resize_lesion(img[..., ch], frame) for ch in range(3)], axis=-1)
        tissue = org_c
    else:
        if img.ndim != 3 or img.shape[2] != 3:
            raise InputError(f"patient {p['id']}: pathology must be an RGB image")
        img = _normalize_stains(img)
        _, tissue = otsu_threshold(rgb_to_gray(img), foreground="dark")
    save_tensor(img / 255.0, os.path.join(pd, "image.cftn"), dtype="f32")
    save_tensor(tissue, os.path.join(pd, "tissue.cftn"), dtype="f32")
    label = label_aggressiveness(p["grade"], p["necrosis"])
    return {"id": p["id"], "aggressive": label == AGGRESSIVE,
            "n_sequences": len(p["radiology"]), "n_slices": int(lesion.shape[0])}


def run_preprocess(cfg):
    base, patients = read_manifest(cfg)
    ns = {len(p["radiology"]) for p in patients}
    if len(ns) != 1:
        raise InputError("all patients must have the same number of radiology sequences")
    table = _pmap(_preprocess_one, [(cfg, base, p) for p in patients], cfg.workers)
    _write_json(_p(cfg, "patients.json"), {"mode": cfg.mode, "patients": table})
    return write_stamp(cfg, "preprocess", {"patients": len(table)})


# --------------------------------------------------------------------------
# extract
# --------------------------------------------------------------------------

def radiology_maps(cfg, pid, fx=None):
    """Per-slice radiology feature maps ``[D, 224, 224, 64 n]`` rebuilt from
    the preprocessed volumes (sequences concatenated channel-wise)."""
    fx = fx or _extractors(cfg)[0]
    rd = _p(cfg, "preprocessed", "radiology", pid)
    seqs = sorted(f for f in os.listdir(rd) if f.startswith("seq"))
    vols = [load_tensor(os.path.join(rd, f)) for f in seqs]
    return np.stack([np.concatenate([fx(v[d]) for v in vols], axis=-1)
                     for d in range(vols[0].shape[0])])


def _normal_vectors(feat_slices, organ, lesion, size, rng):
    """One normal window per lesion slice (k = j), each slice chosen at random."""
    lesion_slices = [d for d in range(len(lesion)) if lesion[d].any()]
    out = []
    for _ in lesion_slices:
        d = int(rng.integers(len(feat_slices)))
        out.extend(agg.sample_normal_regions(feat_slices[d], organ[d], lesion[d], size, 1, rng))
    return np.array(out)


def _pathology_vectors(cfg, pid, fx, rng):
    pd = _p(cfg, "preprocessed", "pathology", pid)
    img = load_tensor(os.path.join(pd, "image.cftn"))
    tissue = load_tensor(os.path.join(pd, "tissue.cftn")) > 0
    if cfg.mode == "prostate-sim":
        rd = _p(cfg, "preprocessed", "radiology", pid)
        lesion = load_tensor(os.path.join(rd, "lesion.cftn")) > 0
        maps = np.stack([fx(img[d]) for d in range(img.shape[0])])
        slices = [d for d in range(len(lesion)) if lesion[d].any()]
        if cfg.aggregation == "lesion-biopsy":
            les = []
            for d in slices:
                r, c = agg.sample_normal_windows(lesion[d], np.zeros_like(lesion[d]),
                                                 min(cfg.biopsy_window, _fit(lesion[d])), 1,
                                                 rng)[0]
                w = agg.window_mask(lesion[d].shape, (r, c),
                                    min(cfg.biopsy_window, _fit(lesion[d])))
                les.append(agg.aggregate_region_mean(maps[d], w))
        else:
            les = [agg.aggregate_region_mean(maps[d], lesion[d]) for d in slices]
        normal = _normal_vectors(maps, tissue, lesion, cfg.normal_window, rng)
        return np.array(les), normal, maps
    if cfg.pathology_resolution == "high":
        grid = extract_highres_patches(img, fx)
        cells = agg.tissue_cells(tissue, PATCH)
        if not cells.any():
            raise InputError(f"patient {pid}: no tissue patch in pathology image")
        if cfg.aggregation == "lesion-biopsy":
            rc = np.argwhere(cells)
            cells = [tuple(rc[int(rng.integers(len(rc)))])]
        return agg.aggregate_region_p95(grid, cells)[None], np.zeros((0, fx.out_channels)), None
    if img.shape[:2] != (PATCH, PATCH):
        img = resize_bilinear(img, PATCH, PATCH)
        tissue = resize_bilinear(tissue.astype(float), PATCH, PATCH) >= 0.5
    fmap = fx(img)
    region = tissue
    if cfg.aggregation == "lesion-biopsy":
        size = min(cfg.biopsy_window, _fit(tissue))
        corner = agg.sample_normal_windows(tissue, np.zeros_like(tissue), size, 1, rng)[0]
        region = agg.window_mask(tissue.shape, corner, size)
    return agg.aggregate_region_mean(fmap, region)[None], np.zeros((0, fx.out_channels)), None


def _fit(mask):
    """Side of the largest square window that could fit inside ``mask``'s bbox."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return max(1, min(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1) // 2)


def _extract_one(args):
    cfg, pid = args
    frx, fpx = _extractors(cfg)
    rng = make_rng(derive_seed(cfg.seed, "extract/" + pid))
    rd = _p(cfg, "preprocessed", "radiology", pid)
    lesion = load_tensor(os.path.join(rd, "lesion.cftn")) > 0
    maps = radiology_maps(cfg, pid, frx)
    slices = [d for d in range(len(lesion)) if lesion[d].any()]
    rad_les = np.array([agg.aggregate_region_mean(maps[d], lesion[d]) for d in slices])
    out_r = _p(cfg, "features", "radiology", pid)
    os.makedirs(out_r, exist_ok=True)
    save_tensor(rad_les, os.path.join(out_r, "lesion.cftn"))
    if cfg.mode == "prostate-sim":
        organ = load_tensor(os.path.join(rd, "organ.cftn")) > 0
        rad_nrm = _normal_vectors(maps, organ, lesion, cfg.normal_window, rng)
        save_tensor(rad_nrm, os.path.join(out_r, "normal.cftn"))
    pat_les, pat_nrm, pat_maps = _pathology_vectors(cfg, pid, fpx, rng)
    out_p = _p(cfg, "features", "pathology", pid)
    os.makedirs(out_p, exist_ok=True)
    save_tensor(pat_les, os.path.join(out_p, "lesion.cftn"))
    if len(pat_nrm):
        save_tensor(pat_nrm, os.path.join(out_p, "normal.cftn"))
    if cfg.aggregation == "pixel-pixel":
        save_tensor(maps, os.path.join(out_r, "maps.cftn"), dtype="f32")
        save_tensor(pat_maps, os.path.join(out_p, "maps.cftn"), dtype="f32")
    return pid


def run_extract(cfg):
    check_upstream(cfg, "extract")
    ids = [p["id"] for p in load_patients(cfg)]
    _pmap(_extract_one, [(cfg, pid) for pid in ids], cfg.workers)
    return write_stamp(cfg, "extract", {"patients": len(ids)})


def load_region_vectors(cfg, kind, pid, fold=None):
    """``(lesion [j, d], normal [k, d])`` vectors of one patient."""
    if kind == "corrfeat":
        d = _p(cfg, "features", "corrfeat", f"fold{fold}", pid)
    else:
        d = _p(cfg, "features", kind, pid)
    les = np.atleast_2d(load_tensor(os.path.join(d, "lesion.cftn")))
    npath = os.path.join(d, "normal.cftn")
    nrm = np.atleast_2d(load_tensor(npath)) if os.path.exists(npath) else \
        np.zeros((0, les.shape[1]))
    return les, nrm


# --------------------------------------------------------------------------
# aggregate
# --------------------------------------------------------------------------

def fold_pairs(cfg, train_ids):
    """Paired feature set built from the training patients of one fold."""
    if cfg.aggregation == "pixel-pixel":
        sets = []
        for pid in train_ids:
            rng = make_rng(derive_seed(cfg.seed, "pairs/" + pid))
            rmaps = load_tensor(_p(cfg, "features", "radiology", pid, "maps.cftn"))
            pmaps = load_tensor(_p(cfg, "features", "pathology", pid, "maps.cftn"))
            lesion = load_tensor(_p(cfg, "preprocessed", "radiology", pid, "lesion.cftn"))
            organ = load_tensor(_p(cfg, "preprocessed", "radiology", pid, "organ.cftn")) > 0
            for d in range(len(rmaps)):
                if not organ[d].any():
                    continue
                # pixels outside the organ are background, not "non-cancer" tissue
                sel = organ[d]
                sets.append(agg.aggregate_pixel_pixel(
                    [rmaps[d][sel][:, None, :]], pmaps[d][sel][:, None, :],
                    lesion[d][sel][:, None], rng, cfg.pixel_cap))
        return agg.concat_pairs(sets, make_rng(derive_seed(cfg.seed, "pairs/cap")),
                                cap=cfg.pixel_cap)
    rad_l, rad_n, pat_l, pat_n = [], [], [], []
    for pid in train_ids:
        rl, rn = load_region_vectors(cfg, "radiology", pid)
        pl, pn = load_region_vectors(cfg, "pathology", pid)
        rad_l.append(rl)
        pat_l.append(pl)
        rad_n.extend(rn)
        pat_n.extend(pn)
    mode = "all-slices" if cfg.mode == "kidney" else "random-slice"
    rng = make_rng(derive_seed(cfg.seed, "pairs"))
    return agg.build_pairs_by_region(rad_l, np.array(rad_n), pat_l, np.array(pat_n),
                                     rng, mode=mode)


def run_aggregate(cfg):
    check_upstream(cfg, "aggregate")
    ids = [p["id"] for p in load_patients(cfg)]
    if len(ids) < cfg.folds:
        raise InputError(f"need at least {cfg.folds} patients for {cfg.folds} folds")
    folds = kfold_split(ids, cfg.folds, cfg.seed)
    _write_json(_p(cfg, "folds.json"), folds)
    sizes = {}
    for f in range(cfg.folds):
        train_ids = [i for i in ids if folds[i] != f]
        pairs = fold_pairs(cfg, train_ids)
        agg.save_pairs(pairs, _p(cfg, "pairs", f"fold{f}"))
        sizes[f"fold{f}"] = len(pairs)
    return write_stamp(cfg, "aggregate", sizes)


# --------------------------------------------------------------------------
# train-fusion
# --------------------------------------------------------------------------

def _fusion_cfg(cfg, fold):
    return dataclasses.replace(cfg.fusion, seed=derive_seed(cfg.seed, f"fusion/fold{fold}"))


def run_train_fusion(cfg):
    check_upstream(cfg, "train-fusion")
    n_seq = load_patients(cfg)[0]["n_sequences"]
    for f in range(cfg.folds):
        pairs = agg.load_pairs(_p(cfg, "pairs", f"fold{f}"))
        fc = _fusion_cfg(cfg, f)
        if len(pairs) < fc.batch_size:
            fc = dataclasses.replace(fc, batch_size=len(pairs))
        model = train_fusion(pairs, fc)
        save_corrnet(model, _p(cfg, "models", f"fold{f}", "corrnet"), seed=fc.seed,
                     n_sequences=n_seq)
        log.info("fold %d: fusion L=%.4f", f, model.history[-1]["L"])
    return write_stamp(cfg, "train-fusion", {"folds": cfg.folds})


# --------------------------------------------------------------------------
# encode (inference track: radiology only)
# --------------------------------------------------------------------------

def run_encode(cfg):
    """CorrFeat region vectors for every patient under every fold's encoder.

    The encoder is linear, so encoding the stored radiology region vectors
    equals region-averaging the dense CorrFeat map.  With
    ``save_corrfeat_maps`` the dense ``[D, 224, 224, k]`` maps are computed
    from the preprocessed radiology as well.
    """
    check_upstream(cfg, "encode")
    ids = [p["id"] for p in load_patients(cfg)]
    frx = _extractors(cfg)[0] if cfg.save_corrfeat_maps else None
    for f in range(cfg.folds):
        model = load_corrnet(_p(cfg, "models", f"fold{f}", "corrnet"))
        for pid in ids:
            out = _p(cfg, "features", "corrfeat", f"fold{f}", pid)
            os.makedirs(out, exist_ok=True)
            rl, rn = load_region_vectors(cfg, "radiology", pid)
            save_tensor(encode_vectors(model, rl), os.path.join(out, "lesion.cftn"))
            if len(rn):
                save_tensor(encode_vectors(model, rn), os.path.join(out, "normal.cftn"))
            if frx is not None:
                maps = radiology_maps(cfg, pid, frx)
                dense = np.stack([encode_radiology(model, m) for m in maps])
                save_tensor(dense, os.path.join(out, "maps.cftn"), dtype="f32")
    return write_stamp(cfg, "encode", {"folds": cfg.folds})


# --------------------------------------------------------------------------
# train-predict / evaluate
# --------------------------------------------------------------------------

def branches_for(cfg, pid, fold, n_seq):
    """Per-row branch inputs ``(lesion_branches, normal_branches)``; one
    branch per radiology sequence and one for CorrFeat."""
    def split(rows):
        return list(np.split(rows, n_seq, axis=1))

    les, nrm = [], []
    if cfg.inputs in ("rad-only", "rad+corrfeat"):
        rl, rn = load_region_vectors(cfg, "radiology", pid)
        les += split(rl)
        nrm += split(rn)
    if cfg.inputs in ("corrfeat-only", "rad+corrfeat"):
        cl, cn = load_region_vectors(cfg, "corrfeat", pid, fold)
        les.append(cl)
        nrm.append(cn)
    return les, nrm


def _stack(cfg, ids, fold, patients):
    by_id = {p["id"]: p for p in patients}
    xs, ys = None, []
    for pid in ids:
        p = by_id[pid]
        les, nrm = branches_for(cfg, pid, fold, p["n_sequences"])
        top = n_classes(cfg) - 1
        rows = [les]
        labels = [np.full(len(les[0]), top if p["aggressive"] else top - 1)]
        if cfg.mode == "prostate-sim" and len(nrm[0]):
            rows.append(nrm)
            labels.append(np.zeros(len(nrm[0]), dtype=np.int64))
        for r, lab in zip(rows, labels):
            xs = [b for b in r] if xs is None else [np.concatenate([a, b]) for a, b in zip(xs, r)]
            ys.append(lab)
    return xs, np.concatenate(ys)


def _predictor_dir(cfg, fold):
    return _p(cfg, "models", f"fold{fold}", f"predictor_{cfg.inputs}")


def run_train_predict(cfg):
    check_upstream(cfg, "train-predict")
    patients = load_patients(cfg)
    folds = load_folds(cfg)
    for f in range(cfg.folds):
        train_ids = [i for i in sorted(folds) if folds[i] != f]
        rng = make_rng(derive_seed(cfg.seed, f"predict/fold{f}"))
        perm = [train_ids[i] for i in rng.permutation(len(train_ids))]
        n_val = max(1, int(round(len(perm) * cfg.val_fraction)))
        val_ids, fit_ids = perm[:n_val], perm[n_val:]
        train = _stack(cfg, fit_ids, f, patients)
        val = _stack(cfg, val_ids, f, patients)
        pc = dataclasses.replace(cfg.predictor,
                                 seed=derive_seed(cfg.seed, f"predictor/fold{f}"))
        try:
            clf = train_predictor(train, val, pc, n_classes(cfg))
        except ValueError as exc:
            raise InputError(f"fold {f}: {exc}") from exc
        save_classifier(clf, _predictor_dir(cfg, f), {"inputs": cfg.inputs})
    return write_stamp(cfg, "train-predict", {"inputs": cfg.inputs})


def run_evaluate(cfg) -> MetricsReport:
    """Held-out lesion-level metrics per fold.

    Per-slice probabilities are broadcast onto the lesion mask and the
    lesion label is the majority vote of the dense class map.  Dice compares
    the predicted cancer pixels (any non-normal class) with the lesion mask.
    """
    check_upstream(cfg, "evaluate")
    patients = load_patients(cfg)
    by_id = {p["id"]: p for p in patients}
    folds = load_folds(cfg)
    report = MetricsReport()
    top = n_classes(cfg) - 1
    cancer_from = 1 if cfg.mode == "prostate-sim" else 0
    all_preds = {}
    for f in range(cfg.folds):
        clf = load_classifier(_predictor_dir(cfg, f))
        scores, predicted, labels, dices = [], [], [], []
        rows = {}
        for pid in fold_members(folds, f):
            les, _ = branches_for(cfg, pid, f, by_id[pid]["n_sequences"])
            probs = predict_slice(clf, les)
            mask = load_tensor(_p(cfg, "preprocessed", "radiology", pid, "lesion.cftn")) > 0
            slices = [d for d in range(len(mask)) if mask[d].any()]
            voted, score, cmap = lesion_prediction(probs, mask[slices])
            scores.append(score)
            predicted.append(voted == top)
            labels.append(by_id[pid]["aggressive"])
            dices.append(dice(cmap >= cancer_from, mask[slices]))
            rows[pid] = {"voted": voted, "score": round(score, 12),
                         "slice_probs": np.round(probs, 12).tolist()}
        report.add_fold(**lesion_metrics(scores, predicted, labels, dices))
        all_preds.update(rows)
        _write_json(_p(cfg, "predictions", cfg.inputs, f"fold{f}.json"), rows)
    report.extra = {"inputs": cfg.inputs, "mode": cfg.mode, "aggregation": cfg.aggregation,
                    "pathology_resolution": cfg.pathology_resolution, "seed": cfg.seed,
                    "folds": cfg.folds, "n_patients": len(patients)}
    path = _p(cfg, "reports", f"metrics_{cfg.inputs}.json")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(report.to_json())
    write_stamp(cfg, "evaluate", {"report": os.path.basename(path)})
    return report


def run_all(cfg, steps=STEPS[1:]):
    runners = {"synth": run_synth, "preprocess": run_preprocess, "extract": run_extract,
               "aggregate": run_aggregate, "train-fusion": run_train_fusion,
               "encode": run_encode, "train-predict": run_train_predict,
               "evaluate": run_evaluate}
    out = None
    for step in steps:
        out = runners[step](cfg)
    return out


def remove_pathology(cfg, manifest_too=True):
    """Delete every pathology artifact from the workdir (and, optionally, the
    pathology files listed in the manifest)."""
    for d in (_p(cfg, "preprocessed", "pathology"), _p(cfg, "features", "pathology")):
        shutil.rmtree(d, ignore_errors=True)
    if manifest_too and cfg.manifest and os.path.exists(cfg.manifest):
        base = os.path.dirname(os.path.abspath(cfg.manifest))
        for p in _read_json(cfg.manifest)["patients"]:
            path = os.path.join(base, p["pathology"])
            if os.path.exists(path):
                os.remove(path)
