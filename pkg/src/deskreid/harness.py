"""Run orchestration: training loop, evaluation, ablation matrix, ranking export.

All artifacts for a run land in its run directory (config hash + seed):
the canonical config, a per-epoch training log, a combined model+optimizer
checkpoint archive, query/gallery embeddings, and the evaluation report.

RNG discipline: one stream per concern, each derived from the master seed
via SeedSequence tags — 0 init, 1 dropout, 2 shuffling, 3 augmentation
(5-7 belong to the synthetic generator).  Per-epoch streams also fold in
the epoch (and step or sample index), so resuming at an epoch boundary
replays exactly the draws a straight-through run would have made.
"""

import statistics
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .config import ConfigError
from .data import AugmentConfig, ImageStore, eval_batches, load_manifest, make_batches
from .evaluation import EmbeddingSet, EvalReport, evaluate, ranked_gallery, save_embeddings
from .model import build_model, extract_embedding
from .optim import make_optimizer, step_lr
from .rten import load_archive, save_archive
from .tensor import NonFiniteError, Tensor

CHECKPOINT_NAME = "checkpoint.rten"
ABLATION_ROWS = ("good_practices", "w/o BN", "Dropout", "Bottleneck", "SGD")


class TrainingDiverged(RuntimeError):
    pass


def _init_rng(seed):
    return np.random.default_rng(np.random.SeedSequence([seed, 0]))


def _dropout_rng(seed, epoch, step):
    return np.random.default_rng(np.random.SeedSequence([seed, 1, epoch, step]))


def save_checkpoint(path, model, optimizer, epoch):
    arrays = OrderedDict()
    for name, arr in model.state_arrays().items():
        arrays[f"model.{name}"] = arr
    for name, arr in optimizer.state_arrays():
        arrays[f"optim.{name}"] = arr
    arrays["meta.epoch"] = np.asarray(float(epoch))
    save_archive(path, arrays)


def load_checkpoint(path, model, optimizer=None):
    """Restore model (and optionally optimizer) state; returns completed epochs."""
    arrays = load_archive(path)
    model.load_state_arrays(
        {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
    if optimizer is not None:
        optimizer.load_state_arrays(
            {k[len("optim."):]: v for k, v in arrays.items() if k.startswith("optim.")})
    return int(round(float(arrays["meta.epoch"])))


def _prepare(cfg):
    cfg.validate()
    manifest = load_manifest(cfg.get("data", "manifest"))
    store = ImageStore(manifest, cfg.data_root(),
                       cfg.get("data", "input_h"), cfg.get("data", "input_w"))
    return manifest, store


def run_training(cfg, resume=False, log=None):
    """Train per config; returns (model, history of per-epoch dict rows).

    Non-finite losses abort with the epoch, batch index, and learning rate
    in the exception message.
    """
    manifest, store = _prepare(cfg)
    train_samples = manifest.split("train")
    if not train_samples:
        raise ConfigError("manifest has no train split")
    labels = manifest.train_labels()
    seed = cfg.get("train", "seed")

    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text())
    ckpt_path = run_dir / CHECKPOINT_NAME

    spec = cfg.model_spec(num_classes=manifest.num_classes)
    model = build_model(spec, _init_rng(seed))
    optimizer = make_optimizer(cfg.get("train", "optimizer"), model.parameters(),
                               lr=cfg.get("train", "lr"),
                               weight_decay=cfg.get("train", "weight_decay"))

    start_epoch = 0
    log_mode = "w"
    if resume:
        if not ckpt_path.exists():
            raise ConfigError(f"cannot resume: {ckpt_path} does not exist")
        start_epoch = load_checkpoint(ckpt_path, model, optimizer)
        log_mode = "a"

    aug = AugmentConfig(target_h=cfg.get("data", "input_h"),
                        target_w=cfg.get("data", "input_w"),
                        pad=cfg.get("data", "pad"),
                        flip_prob=cfg.get("data", "flip_prob"))
    mean, std = cfg.get("data", "mean"), cfg.get("data", "std")
    epochs = cfg.get("train", "epochs")
    history = []

    with open(run_dir / "train.log", log_mode) as log_file:
        if start_epoch >= epochs:
            save_checkpoint(ckpt_path, model, optimizer, start_epoch)
        for epoch in range(start_epoch, epochs):
            lr = step_lr(cfg.get("train", "lr"), epoch,
                         cfg.get("train", "lr_decay_factor"),
                         cfg.get("train", "lr_decay_every"))
            optimizer.lr = lr
            losses = []
            correct = 0
            seen = 0
            batches = make_batches(train_samples, labels, store,
                                   cfg.get("train", "batch_size"), epoch, seed,
                                   augment_cfg=aug, mean=mean, std=std)
            for step, (images, batch_labels) in enumerate(batches):
                optimizer.zero_grad()
                try:
                    loss, logits = model.forward_train(
                        Tensor(images), batch_labels,
                        dropout_rng=_dropout_rng(seed, epoch, step))
                    loss.backward()
                except NonFiniteError as exc:
                    raise TrainingDiverged(
                        f"non-finite value at epoch {epoch + 1}, batch {step}, "
                        f"lr {lr:.8g}: {exc}") from exc
                optimizer.step()
                losses.append(loss.item())
                correct += int((logits.data.argmax(axis=1) == batch_labels).sum())
                seen += len(batch_labels)
            row = {"epoch": epoch + 1, "lr": lr,
                   "loss": float(np.mean(losses)), "acc": correct / seen}
            history.append(row)
            line = (f"epoch={row['epoch']} lr={row['lr']:.8g} "
                    f"loss={row['loss']:.6f} acc={row['acc']:.4f}")
            log_file.write(line + "\n")
            if log is not None:
                log(line)
            save_checkpoint(ckpt_path, model, optimizer, epoch + 1)
    return model, history


def _load_eval_model(cfg, manifest, checkpoint=None):
    spec = cfg.model_spec(num_classes=manifest.num_classes)
    model = build_model(spec, _init_rng(cfg.get("train", "seed")))
    path = Path(checkpoint) if checkpoint else cfg.run_dir() / CHECKPOINT_NAME
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    load_checkpoint(path, model)
    return model.eval()


def compute_embeddings(cfg, model, manifest, store, split):
    """Eval-mode embeddings for one split, in manifest order."""
    samples = manifest.split(split)
    if not samples:
        raise ConfigError(f"manifest has no {split} split")
    flip = cfg.get("eval", "flip_fusion")
    feats, idents, cams = [], [], []
    for images, chunk in eval_batches(samples, store, cfg.get("train", "batch_size"),
                                      mean=cfg.get("data", "mean"),
                                      std=cfg.get("data", "std")):
        feats.append(extract_embedding(model, images, flip_fusion=flip))
        idents.extend(s.identity for s in chunk)
        cams.extend(s.camera for s in chunk)
    return EmbeddingSet(np.concatenate(feats, axis=0),
                        np.array(idents), np.array(cams))


def run_evaluation(cfg, checkpoint=None, model=None, save=True):
    """Extract query/gallery embeddings and run the retrieval protocol."""
    manifest, store = _prepare(cfg)
    if model is None:
        model = _load_eval_model(cfg, manifest, checkpoint)
    else:
        model.eval()
    query = compute_embeddings(cfg, model, manifest, store, "query")
    gallery = compute_embeddings(cfg, model, manifest, store, "gallery")
    report = evaluate(query, gallery,
                      ranks=cfg.get("eval", "ranks"),
                      cross_camera_filtering=cfg.get("eval", "cross_camera_filtering"),
                      flip_fusion=cfg.get("eval", "flip_fusion"))
    if save:
        run_dir = cfg.run_dir()
        run_dir.mkdir(parents=True, exist_ok=True)
        report.save(run_dir / "report.txt")
        save_embeddings(run_dir / "query", query)
        save_embeddings(run_dir / "gallery", gallery)
    return report


def random_embedding_baseline(cfg, draws=5):
    """Mean mAP of i.i.d. normal embeddings under the same protocol.

    Measured empirically per run because the chance level depends on the
    actual identity/camera layout of the evaluation splits.
    """
    manifest, _ = _prepare(cfg)
    q_samples = manifest.split("query")
    g_samples = manifest.split("gallery")
    dim = cfg.model_spec(num_classes=max(2, manifest.num_classes or 2)).embedding_dim
    rng = np.random.default_rng(np.random.SeedSequence([cfg.get("train", "seed"), 4]))
    scores = []
    for _ in range(draws):
        query = EmbeddingSet(rng.standard_normal((len(q_samples), dim)),
                             np.array([s.identity for s in q_samples]),
                             np.array([s.camera for s in q_samples]))
        gallery = EmbeddingSet(rng.standard_normal((len(g_samples), dim)),
                               np.array([s.identity for s in g_samples]),
                               np.array([s.camera for s in g_samples]))
        report = evaluate(query, gallery, ranks=cfg.get("eval", "ranks"),
                          cross_camera_filtering=cfg.get("eval", "cross_camera_filtering"))
        scores.append(report.map_score)
    return float(np.mean(scores))


def ablation_config(cfg, row):
    """Derive one ablation row's config from the base configuration."""
    derived = type(cfg)({s: dict(v) for s, v in cfg.values.items()})
    if row == "good_practices":
        derived.set("model", "variant", "good_practices")
        derived.set("train", "optimizer", "adam")
    elif row == "w/o BN":
        derived.set("model", "variant", "no_bn")
    elif row == "Dropout":
        derived.set("model", "variant", "dropout_neck")
    elif row == "Bottleneck":
        derived.set("model", "variant", "bottleneck")
    elif row == "SGD":
        derived.set("model", "variant", "good_practices")
        derived.set("train", "optimizer", "sgd")
        derived.set("train", "lr", "0.01")
    else:
        raise ValueError(f"unknown ablation row {row!r}")
    return derived


def run_ablation(cfg, seeds, rows=ABLATION_ROWS, log=None):
    """Train and evaluate every row over the given seeds.

    Returns {row: {"rank1": [...], "map": [...], "errors": [...]}} plus a
    rendered table; a failing sub-run is recorded without stopping the rest.
    """
    results = OrderedDict()
    for row in rows:
        entry = {"rank1": [], "map": [], "errors": []}
        results[row] = entry
        for seed in seeds:
            run_cfg = ablation_config(cfg, row)
            run_cfg.set("train", "seed", str(seed))
            try:
                model, _ = run_training(run_cfg)
                report = run_evaluation(run_cfg, model=model)
                first_rank = min(report.ranks)
                entry["rank1"].append(report.cmc[first_rank])
                entry["map"].append(report.map_score)
                if log is not None:
                    log(f"{row} seed={seed} rank1={report.cmc[first_rank]:.4f} "
                        f"map={report.map_score:.4f}")
            except Exception as exc:  # noqa: BLE001 - isolate sub-run failures
                entry["errors"].append(f"seed {seed}: {exc}")
                if log is not None:
                    log(f"{row} seed={seed} FAILED: {exc}")
    return results


def ablation_table(results):
    lines = [f"{'config':<16} {'median_rank1':>12} {'median_map':>12} {'runs':>5}"]
    for row, entry in results.items():
        if entry["map"]:
            r1 = statistics.median(entry["rank1"])
            mp = statistics.median(entry["map"])
            lines.append(f"{row:<16} {r1:>12.4f} {mp:>12.4f} {len(entry['map']):>5}")
        else:
            lines.append(f"{row:<16} {'FAILED':>12} {'FAILED':>12} {0:>5}")
        for err in entry["errors"]:
            lines.append(f"  ! {row}: {err}")
    return "\n".join(lines) + "\n"


def export_ranking(cfg, k, checkpoint=None, model=None):
    """Top-k ranked gallery listing per valid query, as report text lines.

    Format per line: query path, rank, gallery path, distance, match flag.
    k larger than a query's filtered gallery is clamped with a warning line.
    """
    manifest, store = _prepare(cfg)
    if model is None:
        model = _load_eval_model(cfg, manifest, checkpoint)
    else:
        model.eval()
    query = compute_embeddings(cfg, model, manifest, store, "query")
    gallery = compute_embeddings(cfg, model, manifest, store, "gallery")
    q_samples = manifest.split("query")
    g_samples = manifest.split("gallery")
    filtering = cfg.get("eval", "cross_camera_filtering")
    lines = []
    for i, q in enumerate(q_samples):
        order, dists, matches = ranked_gallery(query, gallery, i, filtering)
        if (gallery.identities[order] == query.identities[i]).sum() == 0:
            lines.append(f"# query {q.image_path}: excluded (no relevant gallery)")
            continue
        kk = min(k, len(order))
        if kk < k:
            lines.append(f"# query {q.image_path}: k clamped to {kk}")
        for r in range(kk):
            g = g_samples[order[r]]
            flag = "match" if matches[r] else "miss"
            lines.append(f"{q.image_path} {r + 1} {g.image_path} {dists[r]:.6f} {flag}")
    return "\n".join(lines) + "\n"
