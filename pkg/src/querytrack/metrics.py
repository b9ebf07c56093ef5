"""Tracking evaluation: CLEAR-MOT (MOTA), IDF1, and the HOTA family.

All metrics work on per-frame pixel ltwh boxes with positive integer
identities. Sequences combine by summing raw counts before final ratios.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .boxes import iou_matrix_ltwh
from .matching import hungarian

ALPHAS = np.arange(1, 20) * 0.05  # 0.05 .. 0.95
_EPS = 1e-9
_BIG = 1e6


class UndefinedMetric(ValueError):
    """Raised when a ratio has no denominator (e.g. empty ground truth)."""


@dataclass
class FrameDets:
    ids: np.ndarray  # [k] int64, positive
    boxes: np.ndarray  # [k, 4] float64 pixel ltwh

    @classmethod
    def empty(cls) -> "FrameDets":
        return cls(ids=np.zeros(0, dtype=np.int64), boxes=np.zeros((0, 4)))


@dataclass
class SequenceEval:
    """Aligned per-frame ground truth and predictions for one sequence."""

    gt: list[FrameDets]
    pred: list[FrameDets]

    def __post_init__(self) -> None:
        if len(self.gt) != len(self.pred):
            raise ValueError("gt/pred frame counts differ")
        for fd in (*self.gt, *self.pred):
            if len(fd.ids) and fd.ids.min() <= 0:
                raise ValueError("identities must be positive")
            if len(fd.ids) != len(set(fd.ids.tolist())):
                raise ValueError("duplicate identity within a frame")

    @property
    def num_frames(self) -> int:
        return len(self.gt)

    @classmethod
    def from_frame_dicts(cls, gt: dict[int, list], pred: dict[int, list],
                         num_frames: int | None = None) -> "SequenceEval":
        """Build from {frame -> [boxes]} dicts of objects with .identity/.ltwh."""
        frames = [f for f in (*gt.keys(), *pred.keys())]
        last = num_frames if num_frames is not None else (max(frames) if frames else 0)

        def pack(rows: list) -> FrameDets:
            if not rows:
                return FrameDets.empty()
            return FrameDets(
                ids=np.asarray([r.identity for r in rows], dtype=np.int64),
                boxes=np.asarray([r.ltwh for r in rows], dtype=np.float64),
            )

        return cls(
            gt=[pack(gt.get(f, [])) for f in range(1, last + 1)],
            pred=[pack(pred.get(f, [])) for f in range(1, last + 1)],
        )


@dataclass
class ClearMotResult:
    mota: float
    tp: int
    fp: int
    fn: int
    idsw: int
    gt_total: int


@dataclass
class Idf1Result:
    idf1: float
    idtp: float
    idfp: float
    idfn: float


@dataclass
class HotaResult:
    hota: float
    deta: float
    assa: float
    per_alpha: dict[str, np.ndarray]  # tp/fn/fp/ass_sum arrays over ALPHAS


@dataclass
class SequenceReport:
    name: str
    hota: HotaResult
    idf1: Idf1Result
    clear: ClearMotResult


def _gated_match(gt: FrameDets, pred: FrameDets, gate: float,
                 exclude_gt: set[int] | None = None,
                 exclude_pred: set[int] | None = None) -> list[tuple[int, int]]:
    """Hungarian on (1 - IoU), keeping only pairs at IoU >= gate."""
    gi = [i for i in range(len(gt.ids)) if not exclude_gt or i not in exclude_gt]
    pj = [j for j in range(len(pred.ids)) if not exclude_pred or j not in exclude_pred]
    if not gi or not pj:
        return []
    iou = iou_matrix_ltwh(gt.boxes[gi], pred.boxes[pj])
    cost = np.where(iou >= gate, 1.0 - iou, _BIG)
    result = hungarian(cost)
    return [(gi[a], pj[b]) for a, b in result.pairs if iou[a, b] >= gate]


def clear_mot(seq: SequenceEval, iou_gate: float = 0.5) -> ClearMotResult:
    """Frame-by-frame CLEAR protocol with previous-frame match persistence."""
    gt_total = sum(len(fd.ids) for fd in seq.gt)
    if gt_total == 0:
        raise UndefinedMetric("MOTA undefined: sequence has no ground truth")

    tp = fp = fn = idsw = 0
    prev_pairs: dict[int, int] = {}  # gt id -> pred id matched at t-1
    last_matched: dict[int, int] = {}  # gt id -> pred id at last matched frame
    for gt, pred in zip(seq.gt, seq.pred):
        pred_pos = {int(p): j for j, p in enumerate(pred.ids)}
        matches: list[tuple[int, int]] = []
        used_g: set[int] = set()
        used_p: set[int] = set()
        if len(gt.ids) and len(pred.ids):
            iou = iou_matrix_ltwh(gt.boxes, pred.boxes)
            for i, g in enumerate(gt.ids):
                j = pred_pos.get(prev_pairs.get(int(g), -1))
                if j is not None and j not in used_p and iou[i, j] >= iou_gate:
                    matches.append((i, j))
                    used_g.add(i)
                    used_p.add(j)
            matches.extend(_gated_match(gt, pred, iou_gate, used_g, used_p))

        tp += len(matches)
        fn += len(gt.ids) - len(matches)
        fp += len(pred.ids) - len(matches)
        prev_pairs = {}
        for i, j in matches:
            g, p = int(gt.ids[i]), int(pred.ids[j])
            if g in last_matched and last_matched[g] != p:
                idsw += 1
            last_matched[g] = p
            prev_pairs[g] = p
    return ClearMotResult(
        mota=1.0 - (fp + fn + idsw) / gt_total, tp=tp, fp=fp, fn=fn, idsw=idsw, gt_total=gt_total
    )


def idf1(seq: SequenceEval, iou_gate: float = 0.5) -> Idf1Result:
    """Global trajectory-level identity matching and its F1 score."""
    gt_total = sum(len(fd.ids) for fd in seq.gt)
    if gt_total == 0:
        raise UndefinedMetric("IDF1 undefined: sequence has no ground truth")
    pred_total = sum(len(fd.ids) for fd in seq.pred)

    gt_ids = sorted({int(g) for fd in seq.gt for g in fd.ids})
    pr_ids = sorted({int(p) for fd in seq.pred for p in fd.ids})
    g_pos = {g: i for i, g in enumerate(gt_ids)}
    p_pos = {p: j for j, p in enumerate(pr_ids)}
    g_len = np.zeros(len(gt_ids))
    p_len = np.zeros(len(pr_ids))
    overlap = np.zeros((len(gt_ids), len(pr_ids)))
    for gt, pred in zip(seq.gt, seq.pred):
        for g in gt.ids:
            g_len[g_pos[int(g)]] += 1
        for p in pred.ids:
            p_len[p_pos[int(p)]] += 1
        if len(gt.ids) and len(pred.ids):
            iou = iou_matrix_ltwh(gt.boxes, pred.boxes)
            hit = iou >= iou_gate
            for i, g in enumerate(gt.ids):
                for j, p in enumerate(pred.ids):
                    if hit[i, j]:
                        overlap[g_pos[int(g)], p_pos[int(p)]] += 1

    ng, np_ = len(gt_ids), len(pr_ids)
    size = ng + np_
    cost = np.zeros((size, size))
    cost[:ng, :np_] = g_len[:, None] + p_len[None, :] - 2.0 * overlap
    cost[:ng, np_:] = _BIG
    cost[ng:, :np_] = _BIG
    for i in range(ng):
        cost[i, np_ + i] = g_len[i]
    for j in range(np_):
        cost[ng + j, j] = p_len[j]
    rows, cols = linear_sum_assignment(cost)
    idtp = 0.0
    for r, c in zip(rows, cols):
        if r < ng and c < np_:
            idtp += overlap[r, c]
    idfn = gt_total - idtp
    idfp = pred_total - idtp
    return Idf1Result(idf1=2.0 * idtp / max(2.0 * idtp + idfp + idfn, _EPS),
                      idtp=idtp, idfp=idfp, idfn=idfn)


def _hota_accumulate(seq: SequenceEval) -> dict[str, np.ndarray]:
    """Per-alpha raw counts: TP/FN/FP and the summed association scores."""
    gt_total = sum(len(fd.ids) for fd in seq.gt)
    if gt_total == 0:
        raise UndefinedMetric("HOTA undefined: sequence has no ground truth")

    gt_ids = sorted({int(g) for fd in seq.gt for g in fd.ids})
    pr_ids = sorted({int(p) for fd in seq.pred for p in fd.ids})
    g_pos = {g: i for i, g in enumerate(gt_ids)}
    p_pos = {p: j for j, p in enumerate(pr_ids)}
    ng, np_ = len(gt_ids), len(pr_ids)

    g_count = np.zeros(ng)
    p_count = np.zeros(np_)
    potential = np.zeros((ng, np_))
    sims = []
    for gt, pred in zip(seq.gt, seq.pred):
        gi = np.asarray([g_pos[int(g)] for g in gt.ids], dtype=np.int64)
        pj = np.asarray([p_pos[int(p)] for p in pred.ids], dtype=np.int64)
        sim = iou_matrix_ltwh(gt.boxes, pred.boxes) if len(gi) and len(pj) else np.zeros((len(gi), len(pj)))
        sims.append((gi, pj, sim))
        g_count[gi] += 1
        p_count[pj] += 1
        if len(gi) and len(pj):
            denom = sim.sum(0)[None, :] + sim.sum(1)[:, None] - sim
            jac = np.divide(sim, denom, out=np.zeros_like(sim), where=denom > _EPS)
            potential[np.ix_(gi, pj)] += jac

    align_denom = g_count[:, None] + p_count[None, :] - potential
    align = np.divide(potential, align_denom, out=np.zeros_like(potential), where=align_denom > _EPS)

    na = len(ALPHAS)
    tp = np.zeros(na)
    fn = np.zeros(na)
    fp = np.zeros(na)
    matches = [np.zeros((ng, np_)) for _ in range(na)]
    for gi, pj, sim in sims:
        if not len(gi) or not len(pj):
            fn += len(gi)
            fp += len(pj)
            continue
        pair_align = align[np.ix_(gi, pj)]
        for a, alpha in enumerate(ALPHAS):
            eligible = sim >= alpha - _EPS
            if not eligible.any():
                fn[a] += len(gi)
                fp[a] += len(pj)
                continue
            # maximize match count first, association-shaped similarity second;
            # the bonus exceeds any reachable shaping sum so cardinality wins
            bonus = float(min(len(gi), len(pj)) + 1)
            score = np.where(eligible, bonus + pair_align * sim, 0.0)
            rows, cols = linear_sum_assignment(-score)
            good = eligible[rows, cols]
            n_match = int(good.sum())
            tp[a] += n_match
            fn[a] += len(gi) - n_match
            fp[a] += len(pj) - n_match
            matches[a][gi[rows[good]], pj[cols[good]]] += 1

    # Association score per TP pair (g, r): matched frames over the union of
    # both identities' detections plus cross-claimed detections on either side.
    ass_sum = np.zeros(na)
    for a in range(na):
        m = matches[a]
        if not m.any():
            continue
        rowsum = m.sum(0)[None, :]  # total matches of each prediction id
        colsum = m.sum(1)[:, None]  # total matches of each gt id
        denom = g_count[:, None] + p_count[None, :] - m + (colsum - m) + (rowsum - m)
        a_pair = np.divide(m, denom, out=np.zeros_like(m), where=denom > _EPS)
        ass_sum[a] = (m * a_pair).sum()
    return {"tp": tp, "fn": fn, "fp": fp, "ass_sum": ass_sum}


def _hota_from_counts(counts: dict[str, np.ndarray]) -> HotaResult:
    tp, fn, fp, ass = counts["tp"], counts["fn"], counts["fp"], counts["ass_sum"]
    det_denom = tp + fn + fp
    deta = np.divide(tp, det_denom, out=np.zeros_like(tp), where=det_denom > 0)
    assa = np.divide(ass, tp, out=np.zeros_like(ass), where=tp > 0)
    hota = np.sqrt(deta * assa)
    return HotaResult(hota=float(hota.mean()), deta=float(deta.mean()),
                      assa=float(assa.mean()), per_alpha=counts)


def hota(seq: SequenceEval) -> HotaResult:
    """HOTA/DetA/AssA averaged over the 19 IoU thresholds."""
    return _hota_from_counts(_hota_accumulate(seq))


def evaluate_sequences(named: list[tuple[str, SequenceEval]]) -> "MetricReport":
    """Per-sequence metrics plus a combined row from summed raw counts."""
    rows = []
    hota_counts = {"tp": np.zeros(len(ALPHAS)), "fn": np.zeros(len(ALPHAS)),
                   "fp": np.zeros(len(ALPHAS)), "ass_sum": np.zeros(len(ALPHAS))}
    id_sums = np.zeros(3)
    clear_sums = np.zeros(5, dtype=np.int64)
    for name, seq in named:
        h = _hota_accumulate(seq)
        i = idf1(seq)
        c = clear_mot(seq)
        rows.append(SequenceReport(name=name, hota=_hota_from_counts(h), idf1=i, clear=c))
        for k in hota_counts:
            hota_counts[k] += h[k]
        id_sums += (i.idtp, i.idfp, i.idfn)
        clear_sums += (c.tp, c.fp, c.fn, c.idsw, c.gt_total)
    combined_idf1 = Idf1Result(
        idf1=2.0 * id_sums[0] / max(2.0 * id_sums[0] + id_sums[1] + id_sums[2], _EPS),
        idtp=id_sums[0], idfp=id_sums[1], idfn=id_sums[2],
    )
    combined_clear = ClearMotResult(
        mota=1.0 - (clear_sums[1] + clear_sums[2] + clear_sums[3]) / max(int(clear_sums[4]), 1),
        tp=int(clear_sums[0]), fp=int(clear_sums[1]), fn=int(clear_sums[2]),
        idsw=int(clear_sums[3]), gt_total=int(clear_sums[4]),
    )
    combined = SequenceReport(name="COMBINED", hota=_hota_from_counts(hota_counts),
                              idf1=combined_idf1, clear=combined_clear)
    return MetricReport(rows=rows, combined=combined)


@dataclass
class MetricReport:
    rows: list[SequenceReport]
    combined: SequenceReport

    COLUMNS = ("HOTA", "DetA", "AssA", "IDF1", "MOTA", "TP", "FP", "FN", "IDSW")

    def _values(self, r: SequenceReport) -> tuple:
        return (r.hota.hota, r.hota.deta, r.hota.assa, r.idf1.idf1, r.clear.mota,
                r.clear.tp, r.clear.fp, r.clear.fn, r.clear.idsw)

    def as_text(self) -> str:
        width = max([len("sequence")] + [len(r.name) for r in self.rows + [self.combined]])
        header = "  ".join([f"{'sequence':<{width}}"] + [f"{c:>8}" for c in self.COLUMNS])
        lines = [header, "-" * len(header)]
        for r in self.rows + [self.combined]:
            vals = self._values(r)
            cells = [f"{v:8.4f}" if isinstance(v, float) else f"{v:8d}" for v in vals]
            lines.append("  ".join([f"{r.name:<{width}}"] + cells))
        return "\n".join(lines)

    def as_csv(self) -> str:
        lines = ["sequence," + ",".join(c.lower() for c in self.COLUMNS)]
        for r in self.rows + [self.combined]:
            vals = self._values(r)
            cells = [f"{v:.6f}" if isinstance(v, float) else str(v) for v in vals]
            lines.append(",".join([r.name] + cells))
        return "\n".join(lines) + "\n"
