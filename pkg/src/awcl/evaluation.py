"""Transfer evaluation: full and partial fine-tuning on the three tasks, and embedding export."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from .augment import apply, make_policy, worker_rng
from .errors import ConfigError
from .metrics import (ClassificationReport, SegmentationReport, classification_metrics,
                      confusion_matrix, segmentation_from_confusion)
from .model import (ClassifierHead, ContrastiveModel, EncoderSpec, TaskModel, as_input, build_model,
                    load_checkpoint, model_from_checkpoint, param_hash)

log = logging.getLogger(__name__)

TASKS = ("task1_plane_detection", "task2_first_trimester_cls", "task3_crl_nt_seg")
PROTOCOLS = ("full_finetune", "partial_finetune")
_FOLD, _SPLIT, _AUG, _ITER = 21, 22, 23, 24


@dataclass
class EvalConfig:
    task: str = "task2_first_trimester_cls"
    protocol: str = "full_finetune"
    head: str = "nonlinear-classifier"
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 200
    milestones: tuple[int, ...] = (150,)
    lr_decay: float = 0.1
    batch_size: int = 64
    # segmentation runs are counted in iterations instead of epochs
    iterations: int = 0
    folds: int = 0
    test_fraction: float = 0.22
    augment: bool = True
    n_classes: Optional[int] = None
    hidden_dim: int = 256
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"eval.task must be one of {TASKS}, got {self.task!r}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"eval.protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.optimizer not in ("sgd", "rmsprop"):
            raise ConfigError(f"eval.optimizer must be 'sgd' or 'rmsprop', got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError("eval.lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("eval.batch_size must be positive")
        if self.folds == 1 or self.folds < 0:
            raise ConfigError("eval.folds must be 0 (single split) or >= 2")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("eval.test_fraction must be in (0, 1)")
        if self.task == "task3_crl_nt_seg" and self.head != "segmentation-decoder":
            raise ConfigError("task3 requires the segmentation-decoder head")

    @classmethod
    def for_task(cls, task: str, protocol: str = "full_finetune", **overrides) -> "EvalConfig":
        """Per-task defaults from the fine-tuning protocols."""
        aliases = {"1": TASKS[0], "2": TASKS[1], "3": TASKS[2], "full": "full_finetune", "partial": "partial_finetune"}
        task = aliases.get(str(task), task)
        protocol = aliases.get(str(protocol), protocol)
        if task == TASKS[0]:
            base = dict(head="classifier", optimizer="sgd", lr=0.01, momentum=0.9, weight_decay=5e-4,
                        epochs=70, milestones=(30, 55), batch_size=16, folds=3)
        elif task == TASKS[1]:
            base = dict(head="nonlinear-classifier", optimizer="sgd", lr=0.1, momentum=0.9, weight_decay=0.0,
                        epochs=200, milestones=(150,), batch_size=64, test_fraction=0.22)
        elif task == TASKS[2]:
            base = dict(head="segmentation-decoder", optimizer="rmsprop", lr=1e-3, momentum=0.9,
                        weight_decay=1e-3, iterations=50_000, epochs=0, milestones=(), batch_size=8,
                        test_fraction=0.2)
        else:
            raise ConfigError(f"unknown task {task!r}")
        base.update(overrides)
        return cls(task=task, protocol=protocol, **base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @property
    def policy_name(self) -> str:
        return {TASKS[0]: "task1", TASKS[1]: "task2", TASKS[2]: "task3"}[self.task]


@dataclass
class EvalResult:
    reports: list[Union[ClassificationReport, SegmentationReport]]
    summary: dict
    encoder_hash_before: str
    encoder_hash_after: str
    config: dict = field(default_factory=dict)

    @property
    def report(self):
        return self.reports[0]

    def lines(self) -> list[str]:
        """One metric per line: ``name mean std``."""
        return [f"{k}\t{m:.6f}\t{s:.6f}" for k, (m, s) in sorted(self.summary.items())]


# -- helpers -----------------------------------------------------------------

def load_encoder(source, seed: int = 0, spec: Optional[EncoderSpec] = None):
    """Encoder from a checkpoint (dict or path), a model, or a fresh random init of ``spec``."""
    if isinstance(source, ContrastiveModel):
        return source.encoder
    if source is None:
        if spec is None:
            raise ConfigError("random-init evaluation needs an EncoderSpec")
        return build_model(spec, seed=seed).encoder
    ckpt = source if isinstance(source, dict) else load_checkpoint(source)
    return model_from_checkpoint(ckpt).encoder


def scan_folds(scan_ids, k: int, seed: int) -> list[np.ndarray]:
    """Partition frame indices into k folds with whole scans per fold."""
    scan_ids = np.asarray(scan_ids)
    scans = np.unique(scan_ids)
    if len(scans) < k:
        raise ConfigError(f"{k}-fold split needs at least {k} scans, got {len(scans)}")
    perm = worker_rng(seed, _FOLD).permutation(len(scans))
    fold_of = {scans[p]: i % k for i, p in enumerate(perm)}
    assign = np.array([fold_of[s] for s in scan_ids])
    return [np.flatnonzero(assign == i) for i in range(k)]


def scan_split(scan_ids, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    scan_ids = np.asarray(scan_ids)
    scans = np.unique(scan_ids)
    if len(scans) < 2:
        raise ConfigError("a train/test split needs at least two scans")
    n_test = min(max(int(round(test_fraction * len(scans))), 1), len(scans) - 1)
    perm = worker_rng(seed, _SPLIT).permutation(len(scans))
    test_scans = set(scans[perm[:n_test]].tolist())
    is_test = np.array([s in test_scans for s in scan_ids])
    return np.flatnonzero(~is_test), np.flatnonzero(is_test)


def _labels(manifest, cfg: EvalConfig) -> tuple[np.ndarray, int]:
    y = manifest.fine_labels()
    if not np.any(y >= 0):
        raise ConfigError("the task manifest has no labeled frames")
    n = manifest.taxonomy.n_fine
    if cfg.n_classes is not None and cfg.n_classes != n:
        raise ConfigError(f"eval.n_classes={cfg.n_classes} but the task taxonomy has {n} classes")
    return y, n


def _optimizer(params, cfg: EvalConfig):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.RMSprop(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _scheduler(opt, cfg: EvalConfig):
    return torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.milestones), gamma=cfg.lr_decay)


def _encoder_features(encoder, images, batch: int = 256) -> torch.Tensor:
    was = encoder.training
    encoder.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch):
            out.append(encoder(as_input(encoder.spec, images[s:s + batch])))
    encoder.train(was)
    return torch.cat(out) if out else torch.zeros(0, encoder.feature_dim)


def _predict(model, images, batch: int = 256) -> np.ndarray:
    model.eval()
    preds = []
    with torch.no_grad():
        for s in range(0, len(images), batch):
            x = as_input(model.encoder.spec, images[s:s + batch])
            preds.append(model(x).argmax(1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def _augmented(policy, images, rng):
    return np.stack([apply(policy, im, rng) for im in images])


# -- classification ----------------------------------------------------------

def _fit_partial(encoder, images, y, train, test, n_classes, cfg: EvalConfig) -> ClassificationReport:
    """Frozen encoder: features are extracted once, only the head is optimised."""
    for p in encoder.parameters():
        p.requires_grad_(False)
    encoder.eval()
    policy = make_policy(cfg.policy_name, images.shape[1:])
    hidden = cfg.hidden_dim if cfg.head == "nonlinear-classifier" else None
    torch.manual_seed(cfg.seed)
    head = ClassifierHead(encoder.feature_dim, n_classes, hidden)
    feats_train = _encoder_features(encoder, images[train])
    feats_test = _encoder_features(encoder, images[test])
    head.norm.fit(feats_train)
    opt = _optimizer(head.parameters(), cfg)
    sched = _scheduler(opt, cfg)
    y_train = torch.as_tensor(y[train])
    rng = worker_rng(cfg.seed, _AUG)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train))
        if cfg.augment:
            feats_train = _encoder_features(encoder, _augmented(policy, images[train], rng))
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss = F.cross_entropy(head(feats_train[idx]), y_train[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sched.step()
    with torch.no_grad():
        pred = head(feats_test).argmax(1).numpy()
    return classification_metrics(confusion_matrix(y[test], pred, n_classes))


def _fit_full(encoder, images, y, train, test, n_classes, cfg: EvalConfig) -> ClassificationReport:
    torch.manual_seed(cfg.seed)
    # the head's Standardize stays identity: eval-mode statistics of a trainable
    # encoder say nothing about its train-mode activations
    model = TaskModel(encoder, cfg.head, n_classes, hidden=cfg.hidden_dim)
    policy = make_policy(cfg.policy_name, images.shape[1:])
    opt = _optimizer(model.parameters(), cfg)
    sched = _scheduler(opt, cfg)
    y_t = torch.as_tensor(y)
    rng = worker_rng(cfg.seed, _AUG)
    for epoch in range(cfg.epochs):
        model.train()
        perm = train[rng.permutation(len(train))]
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue  # BatchNorm needs more than one sample
            batch = _augmented(policy, images[idx], rng) if cfg.augment else images[idx]
            loss = F.cross_entropy(model(as_input(encoder.spec, batch)), y_t[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sched.step()
    pred = _predict(model, images[test])
    return classification_metrics(confusion_matrix(y[test], pred, n_classes))


def _summarise(reports) -> dict:
    keys = reports[0].summary().keys()
    out = {}
    for k in keys:
        vals = np.array([r.summary()[k] for r in reports])
        out[k] = (float(vals.mean()), float(vals.std()))
    return out


def _run(source, cfg: EvalConfig, manifest, images, masks, spec) -> EvalResult:
    if images is None:
        images = manifest.load_images()
    scans = np.array(manifest.scan_ids())

    encoder0 = load_encoder(source, cfg.seed, spec)
    state0 = {k: v.clone() for k, v in encoder0.state_dict().items()}
    hash_before = param_hash(encoder0)

    if cfg.task == "task3_crl_nt_seg":
        if masks is None:
            masks = manifest.load_masks()
        n_classes = cfg.n_classes or 3
        train, test = scan_split(scans, cfg.test_fraction, cfg.seed)
        rep = _fit_segmentation(encoder0, images, masks, train, test, n_classes, cfg)
        reports = [rep]
        hash_after = param_hash(encoder0)
    else:
        y, n_classes = _labels(manifest, cfg)
        keep = np.flatnonzero(y >= 0)
        if len(keep) < len(y):
            log.info("evaluating on %d labeled of %d frames", len(keep), len(y))
            y, images, scans = y[keep], images[keep], scans[keep]
        if cfg.folds:
            folds = scan_folds(scans, cfg.folds, cfg.seed)
            splits = [(np.concatenate([f for j, f in enumerate(folds) if j != i]), folds[i])
                      for i in range(cfg.folds)]
        else:
            splits = [scan_split(scans, cfg.test_fraction, cfg.seed)]
        fit = _fit_partial if cfg.protocol == "partial_finetune" else _fit_full
        reports = []
        hash_after = hash_before
        for train, test in splits:
            encoder0.load_state_dict(state0)
            reports.append(fit(encoder0, images, y, train, test, n_classes, cfg))
            if cfg.protocol == "partial_finetune":
                hash_after = param_hash(encoder0)
                if hash_after != hash_before:
                    break
        if cfg.protocol == "full_finetune":
            hash_after = param_hash(encoder0)
    return EvalResult(reports, _summarise(reports), hash_before, hash_after, cfg.to_dict())


def finetune(checkpoint, eval_config: EvalConfig, task_manifest, images=None, masks=None,
             spec: Optional[EncoderSpec] = None) -> EvalResult:
    """Transfer a pretrained encoder to a task; ``checkpoint=None`` means random init of ``spec``."""
    eval_config.validate()
    return _run(checkpoint, eval_config, task_manifest, images, masks, spec)


def partial_finetune(checkpoint, eval_config: EvalConfig, task_manifest, images=None,
                     spec: Optional[EncoderSpec] = None) -> EvalResult:
    """Frozen-encoder probe: encoder parameters stay bit-identical, only the head trains."""
    cfg = replace(eval_config, protocol="partial_finetune")
    if cfg.task == "task3_crl_nt_seg":
        raise ConfigError("partial fine-tuning is defined for the classification tasks")
    result = _run(checkpoint, cfg, task_manifest, images, None, spec)
    if result.encoder_hash_after != result.encoder_hash_before:
        raise RuntimeError("encoder parameters changed during partial fine-tuning")
    return result


# -- segmentation ------------------------------------------------------------

def _fit_segmentation(encoder, images, masks, train, test, n_classes, cfg: EvalConfig) -> SegmentationReport:
    torch.manual_seed(cfg.seed)
    model = TaskModel(encoder, "segmentation-decoder", n_classes, image_size=images.shape[1:])
    if cfg.protocol == "partial_finetune":
        for p in encoder.parameters():
            p.requires_grad_(False)
    policy = make_policy("task3", images.shape[1:])
    opt = _optimizer([p for p in model.parameters() if p.requires_grad], cfg)
    rng = worker_rng(cfg.seed, _ITER)
    iterations = cfg.iterations or max(cfg.epochs, 1) * max(len(train) // cfg.batch_size, 1)
    for it in range(iterations):
        model.train()
        if cfg.protocol == "partial_finetune":
            encoder.eval()
        idx = train[rng.choice(len(train), size=min(cfg.batch_size, len(train)), replace=False)]
        if cfg.augment:
            pairs = [apply(policy, images[i], rng, mask=masks[i]) for i in idx]
            x = np.stack([p[0] for p in pairs])
            m = np.stack([p[1] for p in pairs])
        else:
            x, m = images[idx], masks[idx]
        loss = F.cross_entropy(model(as_input(encoder.spec, x)), torch.as_tensor(m, dtype=torch.long))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    cm = np.zeros((n_classes, n_classes), np.int64)
    with torch.no_grad():
        for s in range(0, len(test), 64):
            idx = test[s:s + 64]
            pred = model(as_input(encoder.spec, images[idx])).argmax(1).numpy()
            cm += confusion_matrix(masks[idx], pred, n_classes)
    return segmentation_from_confusion(cm)


# -- embeddings --------------------------------------------------------------

@dataclass
class EmbeddingTable:
    sample_ids: list[str]
    labels: list[str]
    vectors: np.ndarray
    coords: Optional[np.ndarray] = None


def compute_embeddings(source, images, layer: str = "penultimate", spec: Optional[EncoderSpec] = None,
                       seed: int = 0) -> np.ndarray:
    if layer not in ("penultimate", "projection"):
        raise ConfigError(f"layer must be 'penultimate' or 'projection', got {layer!r}")
    if isinstance(source, ContrastiveModel):
        model = source
    elif source is None:
        model = build_model(spec, seed=seed)
    else:
        ckpt = source if isinstance(source, dict) else load_checkpoint(source)
        model = model_from_checkpoint(ckpt)
    model.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(images), 256):
            x = as_input(model.spec, images[s:s + 256])
            h = model.encoder(x)
            out.append((h if layer == "penultimate" else model.projector(h)).numpy())
    return np.concatenate(out).astype(np.float64)


def tsne_2d(vectors: np.ndarray, seed: int = 0, perplexity: float = 30.0, n_iter: int = 1000) -> np.ndarray:
    from sklearn.manifold import TSNE

    # perplexity must stay below the sample count
    perplexity = min(perplexity, max((len(vectors) - 1) / 3.0, 1.0))
    return TSNE(n_components=2, perplexity=perplexity, max_iter=n_iter, init="pca",
                random_state=seed).fit_transform(vectors)


def silhouette(vectors: np.ndarray, labels) -> float:
    from sklearn.metrics import silhouette_score

    return float(silhouette_score(vectors, np.asarray(labels), metric="euclidean"))


def export_embeddings(checkpoint, manifest, layer: str = "penultimate", out_path=None, tsne: bool = False,
                      seed: int = 0, images=None, spec: Optional[EncoderSpec] = None) -> EmbeddingTable:
    """Write ``sample_id, label, v0..vD[, tsne_x, tsne_y]`` rows as TSV (when ``out_path`` is given)."""
    if images is None:
        images = manifest.load_images()
    vectors = compute_embeddings(checkpoint, images, layer, spec, seed)
    t = manifest.taxonomy
    labels = [t.fine_name(e.fine_label) if e.fine_label is not None
              else (t.coarse_name(e.coarse_label) if e.coarse_label is not None else "-")
              for e in manifest.entries]
    ids = [e.path for e in manifest.entries]
    coords = tsne_2d(vectors, seed) if tsne else None
    table = EmbeddingTable(ids, labels, vectors, coords)
    if out_path is not None:
        write_embedding_table(table, out_path)
    return table


def write_embedding_table(table: EmbeddingTable, path) -> None:
    dim = table.vectors.shape[1]
    header = ["sample_id", "label"] + [f"v{k}" for k in range(dim)]
    if table.coords is not None:
        header += ["tsne_x", "tsne_y"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for i, (sid, lab) in enumerate(zip(table.sample_ids, table.labels)):
            row = [sid, lab] + [repr(float(v)) for v in table.vectors[i]]
            if table.coords is not None:
                row += [repr(float(v)) for v in table.coords[i]]
            w.writerow(row)


def read_embedding_table(path) -> EmbeddingTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    header, body = rows[0], rows[1:]
    has_coords = header[-1] == "tsne_y"
    dim = len(header) - 2 - (2 if has_coords else 0)
    vecs = np.array([[float(v) for v in r[2:2 + dim]] for r in body])
    coords = np.array([[float(v) for v in r[2 + dim:]] for r in body]) if has_coords else None
    return EmbeddingTable([r[0] for r in body], [r[1] for r in body], vecs, coords)
