"""Evaluation harness: datasets on disk, attack application, defense metrics.

Dataset directory layout: one ``.ten`` tensor file per sample (header: u8
rank, little-endian u32 dims, then little-endian float32 data) plus a
``labels.txt`` index with one ``<filename><TAB><label>`` line per sample;
the index order is the dataset order.

The machine-readable evaluation records deliberately exclude wall-clock
timings so a seed-fixed rerun is byte-identical; the human-readable table
carries the timing column.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import attacks, defense, dsp, profiles
from .engine import InferenceCounter, ModelGraph, forward


# ---------------------------------------------------------------------------
# tensor and dataset files


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.asarray(array, np.float32)
    with open(path, "wb") as f:
        f.write(bytes([arr.ndim]))
        f.write(np.asarray(arr.shape, "<u4").tobytes())
        f.write(arr.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data:
        raise ValueError(f"{path}: empty tensor file")
    ndim = data[0]
    dims = np.frombuffer(data, "<u4", count=ndim, offset=1)
    count = int(np.prod(dims)) if ndim else 0
    expected = 1 + 4 * ndim + 4 * count
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, "<f4", count=count, offset=1 + 4 * ndim).reshape(dims).copy()


def save_dataset(dirpath, samples) -> None:
    """samples: iterable of (name, array, label)."""
    os.makedirs(dirpath, exist_ok=True)
    lines = []
    for name, arr, label in samples:
        fname = name if name.endswith(".ten") else name + ".ten"
        write_tensor(os.path.join(dirpath, fname), arr)
        lines.append(f"{fname}\t{label}")
    with open(os.path.join(dirpath, "labels.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(dirpath):
    index = os.path.join(dirpath, "labels.txt")
    if not os.path.exists(index):
        raise FileNotFoundError(f"{dirpath}: no labels.txt index")
    samples = []
    with open(index) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            fname, label = line.split("\t")
            samples.append((fname, read_tensor(os.path.join(dirpath, fname)), label))
    if not samples:
        raise ValueError(f"{dirpath}: empty dataset")
    return samples


def accuracy(model: ModelGraph, samples, mfcc_cfg: dsp.MfccConfig | None = None) -> float:
    """Plain top-1 accuracy; audio samples may be waveforms or features."""
    hits = 0
    for _, x, label in samples:
        if mfcc_cfg is not None:
            x = profiles.ensure_features(model, x, mfcc_cfg)
        _, pred, _ = forward(model, x)
        hits += model.labels[pred] == label
    return hits / len(samples)


def roc_auc(natural_scores, adversarial_scores) -> float:
    """Threshold-sweep AUC via the rank statistic P(adv > nat) + 0.5 P(=)."""
    nat = np.asarray(natural_scores, np.float64)
    adv = np.asarray(adversarial_scores, np.float64)
    if nat.size == 0 or adv.size == 0:
        raise ValueError("need scores on both sides")
    wins = (adv[:, None] > nat[None, :]).sum()
    ties = (adv[:, None] == nat[None, :]).sum()
    return float((wins + 0.5 * ties) / (adv.size * nat.size))


# ---------------------------------------------------------------------------
# attacks over datasets


@dataclass(frozen=True)
class AttackConfig:
    """What to throw at the model; `seed` controls every random choice."""

    modality: str = "image"
    kind: str = "patch-random"  # patch-random | patch-optimized | fgsm | bim
    patch_size: int = 12
    target: str | None = None
    opt_steps: int = 60
    opt_eta: float = 1.0
    opt_pool: int = 8
    epsilon: float = 2.0
    step: float = 0.5
    iters: int = 8
    seed: int = 0


def build_patch(model: ModelGraph, natural_set, cfg: AttackConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    channels = model.input_shape[0]
    if cfg.kind == "patch-random":
        return attacks.random_patch(channels, cfg.patch_size, rng)
    if cfg.kind == "patch-optimized":
        if cfg.target is not None:
            target = model.labels.index(cfg.target)
        else:
            target = int(rng.integers(0, model.num_classes))
        picks = rng.choice(len(natural_set), min(cfg.opt_pool, len(natural_set)), replace=False)
        pool = [natural_set[i][1] for i in picks]
        spec = attacks.PatchSpec(cfg.patch_size, content="optimized")
        result = attacks.optimize_patch(model, target, spec, cfg.opt_steps, cfg.opt_eta,
                                        pool, seed=cfg.seed)
        return result.patch
    raise ValueError(f"{cfg.kind!r} is not a patch attack")


def attack_dataset(model: ModelGraph, natural_set, cfg: AttackConfig,
                   mfcc_cfg: dsp.MfccConfig = dsp.MfccConfig()):
    """Deterministically derived attacked twin of a natural dataset.

    Image kinds composite one shared patch at a per-sample random location.
    Audio kinds perturb the MFCC feature maps (see attacks module note) and
    therefore return feature tensors.
    """
    attacked = []
    if cfg.kind in ("patch-random", "patch-optimized"):
        patch = build_patch(model, natural_set, cfg)
        for i, (name, x, label) in enumerate(natural_set):
            rng = np.random.default_rng((cfg.seed, 1, i))
            loc = attacks.pick_location(x.shape, cfg.patch_size, rng)
            attacked.append((f"adv_{name}", attacks.apply_patch(x, patch, loc), label))
        return attacked
    if cfg.kind in ("fgsm", "bim"):
        target = None if cfg.target is None else model.labels.index(cfg.target)
        for name, x, label in natural_set:
            true_index = model.labels.index(label)
            if cfg.kind == "fgsm":
                adv = attacks.fgsm_audio(model, x, cfg.epsilon, label=true_index,
                                         target=target, mfcc_cfg=mfcc_cfg)
            else:
                adv = attacks.bim_audio(model, x, cfg.epsilon, cfg.step, cfg.iters,
                                        label=true_index, target=target, mfcc_cfg=mfcc_cfg)
            attacked.append((f"adv_{name}", adv, label))
        return attacked
    raise ValueError(f"unknown attack kind {cfg.kind!r}")


# ---------------------------------------------------------------------------
# the measurement protocol


@dataclass
class EvalRow:
    name: str
    true_label: str
    attacked: bool
    predicted: str
    inconsistency: float | None
    verdict: str
    final_label: str
    full_passes: int
    head_passes: int
    elapsed_ms: float

    def to_record(self) -> str:
        d = "-" if self.inconsistency is None else f"{self.inconsistency:.6f}"
        return (f"name={self.name} true={self.true_label} attacked={int(self.attacked)} "
                f"predicted={self.predicted} d={d} verdict={self.verdict} "
                f"final={self.final_label} passes={self.full_passes}+{self.head_passes}")


@dataclass
class EvalReport:
    attack: AttackConfig
    threshold: float
    rows: list = field(default_factory=list)

    # aggregate rates, all in [0, 1]
    detection_rate: float = 0.0
    false_positive_rate: float = 0.0
    accuracy_before: float = 0.0
    accuracy_after: float = 0.0
    recovery_rate_detected: float = 0.0
    flip_rate_detected_misclassified: float = 0.0
    natural_accuracy: float = 0.0
    auc: float = 0.0
    median_d_natural: float = 0.0
    median_d_attacked: float = 0.0
    mean_time_ms: float = 0.0

    def natural_rows(self):
        return [r for r in self.rows if not r.attacked]

    def attacked_rows(self):
        return [r for r in self.rows if r.attacked]

    def to_records(self) -> str:
        """Machine-readable, timing-free (byte-identical under a fixed seed)."""
        head = (f"eval modality={self.attack.modality} kind={self.attack.kind} "
                f"seed={self.attack.seed} threshold={self.threshold:.6f}")
        stats = (f"rates detection={self.detection_rate:.6f} fpr={self.false_positive_rate:.6f} "
                 f"acc_before={self.accuracy_before:.6f} acc_after={self.accuracy_after:.6f} "
                 f"recovered_of_detected={self.recovery_rate_detected:.6f} "
                 f"flips_of_detected_missed={self.flip_rate_detected_misclassified:.6f} "
                 f"natural_acc={self.natural_accuracy:.6f} auc={self.auc:.6f} "
                 f"median_d_nat={self.median_d_natural:.6f} median_d_adv={self.median_d_attacked:.6f}")
        return "\n".join([head, stats] + [r.to_record() for r in self.rows]) + "\n"

    def to_table(self) -> str:
        lines = [
            f"attack: {self.attack.kind} ({self.attack.modality}), seed {self.attack.seed}",
            f"inputs: {len(self.natural_rows())} natural + {len(self.attacked_rows())} attacked",
            f"threshold: {self.threshold}",
            "",
            f"{'metric':<38}{'value':>10}",
            "-" * 48,
            f"{'clean accuracy (naturals)':<38}{self.natural_accuracy:>10.3f}",
            f"{'detection success rate':<38}{self.detection_rate:>10.3f}",
            f"{'false positive rate':<38}{self.false_positive_rate:>10.3f}",
            f"{'accuracy on attacked, before':<38}{self.accuracy_before:>10.3f}",
            f"{'accuracy on attacked, after defend':<38}{self.accuracy_after:>10.3f}",
            f"{'recovered | detected':<38}{self.recovery_rate_detected:>10.3f}",
            f"{'flipped back | detected & missed':<38}{self.flip_rate_detected_misclassified:>10.3f}",
            f"{'ROC AUC (threshold sweep)':<38}{self.auc:>10.3f}",
            f"{'median D natural / attacked':<38}"
            f"{self.median_d_natural:>10.3f} / {self.median_d_attacked:.3f}",
            f"{'mean defense time per input (ms)':<38}{self.mean_time_ms:>10.3f}",
        ]
        return "\n".join(lines) + "\n"


def _defend_row(model, store, cfg, name, x, label, attacked_flag):
    counter = InferenceCounter()
    t0 = time.perf_counter()
    final, report, _ = defense.defend(model, x, store, cfg, counter=counter)
    elapsed = (time.perf_counter() - t0) * 1e3
    return EvalRow(name=name, true_label=label, attacked=attacked_flag,
                   predicted=report.predicted, inconsistency=report.inconsistency,
                   verdict=report.verdict, final_label=final,
                   full_passes=counter.full_passes, head_passes=counter.head_passes,
                   elapsed_ms=elapsed)


def evaluate(model: ModelGraph, store: profiles.ProfileStore, natural_set,
             attack_cfg: AttackConfig, defend_cfg: defense.DefendConfig | None = None,
             attacked_set=None, workers: int = 1) -> EvalReport:
    """Run the defense over a natural set and its attacked twin and score it.

    ``attacked_set`` overrides the generated twin (e.g. replayed from disk).
    """
    if not natural_set:
        raise ValueError("natural set is empty")
    if defend_cfg is None:
        defend_cfg = defense.DefendConfig(modality=attack_cfg.modality)
    if attacked_set is None:
        attacked_set = attack_dataset(model, natural_set, attack_cfg, defend_cfg.mfcc)
    if not attacked_set:
        raise ValueError("attacked set is empty")
    threshold = defend_cfg.image_threshold if attack_cfg.modality == "image" \
        else defend_cfg.activation_threshold

    jobs = [(name, x, label, False) for name, x, label in natural_set]
    jobs += [(name, x, label, True) for name, x, label in attacked_set]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(
                lambda j: _defend_row(model, store, defend_cfg, j[0], j[1], j[2], j[3]), jobs))
    else:
        rows = [_defend_row(model, store, defend_cfg, *job) for job in jobs]

    report = EvalReport(attack=attack_cfg, threshold=threshold, rows=rows)
    nat = report.natural_rows()
    adv = report.attacked_rows()
    flagged = [r for r in adv if r.verdict == defense.ADVERSARIAL]
    det_missed = [r for r in flagged if r.predicted != r.true_label]
    report.detection_rate = len(flagged) / len(adv)
    report.false_positive_rate = sum(r.verdict == defense.ADVERSARIAL for r in nat) / len(nat)
    report.accuracy_before = sum(r.predicted == r.true_label for r in adv) / len(adv)
    report.accuracy_after = sum(r.final_label == r.true_label for r in adv) / len(adv)
    report.natural_accuracy = sum(r.predicted == r.true_label for r in nat) / len(nat)
    if flagged:
        report.recovery_rate_detected = sum(r.final_label == r.true_label for r in flagged) / len(flagged)
    if det_missed:
        report.flip_rate_detected_misclassified = \
            sum(r.final_label == r.true_label for r in det_missed) / len(det_missed)
    d_nat = [r.inconsistency for r in nat if r.inconsistency is not None]
    d_adv = [r.inconsistency for r in adv if r.inconsistency is not None]
    if d_nat and d_adv:
        report.auc = roc_auc(d_nat, d_adv)
        report.median_d_natural = float(np.median(d_nat))
        report.median_d_attacked = float(np.median(d_adv))
    report.mean_time_ms = float(np.mean([r.elapsed_ms for r in rows]))
    return report
