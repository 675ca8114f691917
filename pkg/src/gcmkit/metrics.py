"""Accuracy, attack robustness (AR), and the inference-time evaluation loop.

ACC is the fraction of clean samples classified correctly. AR restricts to
the clean-correct subset: of the samples the evaluated model got right, the
fraction it still gets right after the attack. With zero clean-correct
samples AR is undefined and reported as an explicit None, never 0 or 1.

When a concealment config is given, the evaluated model is the cascade, the
attack runs against the cascade, and both clean and adversarial predictions
come from the cascade; that is the pipeline order attacks actually face.
"""

import json
import logging
import time
from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, AdvExample, run_attack
from .autodiff import Tensor
from .errors import GcmkitError
from .gcm import GcmConfig, GcmPlacement, cascade
from .models import predict, prepare_inputs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampleRecord:
    index: int
    label: int
    clean_pred: int
    adv_pred: int
    norm: float
    success: bool

    def clean_correct(self) -> bool:
        return self.clean_pred == self.label

    def adv_correct(self) -> bool:
        return self.adv_pred == self.label


def accuracy(records) -> float:
    """Mean clean-correct indicator; exact integer count over N."""
    records = list(records)
    if not records:
        raise ValueError("accuracy over an empty record set is undefined")
    return sum(1 for r in records if r.clean_correct()) / len(records)


def attack_robustness(records) -> float | None:
    """Survivors / clean-correct; clean-incorrect samples are excluded from
    both numerator and denominator. None when the denominator is zero."""
    records = list(records)
    denom = sum(1 for r in records if r.clean_correct())
    if denom == 0:
        return None
    num = sum(1 for r in records if r.clean_correct() and r.adv_correct())
    return num / denom


def adversarial_accuracy(records) -> float:
    """Accuracy on the attacked inputs over all samples (the metric of the
    placement ablation)."""
    records = list(records)
    if not records:
        raise ValueError("adversarial accuracy over an empty record set is undefined")
    return sum(1 for r in records if r.adv_correct()) / len(records)


@dataclass
class EvalReport:
    attack: dict
    gcm: dict | None
    placement: str | None
    records: list
    acc_clean: float
    ar: float | None
    adv_accuracy: float
    n_clean_correct: int
    wall_time: float

    def __post_init__(self):
        if not (0.0 <= self.acc_clean <= 1.0):
            raise ValueError(f"acc_clean out of [0,1]: {self.acc_clean}")
        if self.ar is not None and not (0.0 <= self.ar <= 1.0):
            raise ValueError(f"ar out of [0,1]: {self.ar}")
        if self.n_clean_correct != sum(1 for r in self.records if r.clean_correct()):
            raise ValueError("n_clean_correct does not match the records")

    def to_json(self) -> dict:
        """Deterministic report payload; wall time is deliberately excluded
        (it goes to the metadata sidecar so reruns are byte-identical)."""
        return {
            "attack": self.attack,
            "gcm": self.gcm,
            "placement": self.placement,
            "n_samples": len(self.records),
            "n_clean_correct": self.n_clean_correct,
            "acc_clean": self.acc_clean,
            "ar": self.ar,
            "adv_accuracy": self.adv_accuracy,
            "records": [
                {
                    "index": r.index,
                    "label": r.label,
                    "clean_pred": r.clean_pred,
                    "adv_pred": r.adv_pred,
                    "norm": r.norm,
                    "success": r.success,
                }
                for r in self.records
            ],
        }


def write_report(report: EvalReport, path) -> None:
    """Write the report JSON plus a .meta.json sidecar with the wall time."""
    path = str(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, sort_keys=True, indent=1)
        f.write("\n")
    meta = path[:-5] + ".meta.json" if path.endswith(".json") else path + ".meta.json"
    with open(meta, "w", encoding="utf-8") as f:
        json.dump({"wall_time_s": report.wall_time, "written_at": time.time()}, f, indent=1)
        f.write("\n")


def load_report_records(path) -> list:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    return [
        SampleRecord(index=r["index"], label=r["label"], clean_pred=r["clean_pred"],
                     adv_pred=r["adv_pred"], norm=r["norm"], success=r["success"])
        for r in payload["records"]
    ]


def select_indices(labels: np.ndarray, max_samples=None, per_class_cap=None) -> np.ndarray:
    """Deterministic evaluation subset: optional head truncation plus an
    optional per-class cap (first k of each class in dataset order), the
    cost-saving protocol used for the expensive C&W runs."""
    idx = np.arange(len(labels))
    if per_class_cap is not None:
        keep = []
        counts = {}
        for i in idx:
            c = int(labels[i])
            if counts.get(c, 0) < per_class_cap:
                counts[c] = counts.get(c, 0) + 1
                keep.append(i)
        idx = np.asarray(keep, dtype=np.int64)
    if max_samples is not None:
        idx = idx[:max_samples]
    return idx


def evaluate(model, dataset, attack_cfg: AttackConfig, gcm_cfg: GcmConfig | None = None,
             placement: GcmPlacement | None = None, batch_size: int = 256,
             max_samples=None, per_class_cap=None) -> EvalReport:
    """Attack every selected test sample and assemble an EvalReport.

    A failed attack on a sample is recorded (falling back to the clean
    input) and never aborts the run.
    """
    start = time.perf_counter()
    g = model
    placement_desc = None
    if gcm_cfg is not None:
        placement = placement or GcmPlacement.front()
        g = cascade(model, gcm_cfg, placement)
        placement_desc = placement.describe()

    images = prepare_inputs(g, dataset.images)
    labels = dataset.labels
    idx = select_indices(labels, max_samples=max_samples, per_class_cap=per_class_cap)

    records = []
    for start_i in range(0, len(idx), batch_size):
        batch = idx[start_i:start_i + batch_size]
        x = Tensor(np.ascontiguousarray(images[batch]))
        y = labels[batch]
        clean_pred = predict(g, x)
        try:
            adv = run_attack(g, x, y, attack_cfg)
        except GcmkitError as e:
            log.warning("attack failed on batch starting at %d: %s", int(batch[0]), e)
            adv = AdvExample(x_adv=x, norms=np.zeros(len(batch)),
                             success=np.zeros(len(batch), dtype=bool))
        adv_pred = predict(g, adv.x_adv)
        for j, sample_index in enumerate(batch):
            records.append(SampleRecord(
                index=int(sample_index),
                label=int(y[j]),
                clean_pred=int(clean_pred[j]),
                adv_pred=int(adv_pred[j]),
                norm=float(adv.norms[j]),
                success=bool(adv.success[j]),
            ))

    return EvalReport(
        attack=attack_cfg.to_json(),
        gcm=None if gcm_cfg is None else {"w": gcm_cfg.w, "eps": gcm_cfg.eps},
        placement=placement_desc,
        records=records,
        acc_clean=accuracy(records),
        ar=attack_robustness(records),
        adv_accuracy=adversarial_accuracy(records),
        n_clean_correct=sum(1 for r in records if r.clean_correct()),
        wall_time=time.perf_counter() - start,
    )
