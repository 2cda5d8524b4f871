"""Retrieval evaluation: cosine matching, CC / Standard / SC filtering, CMC and mAP."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, EvaluationError

PROTOCOLS = ("cc", "standard", "sc")


@dataclass
class RetrievalResult:
    protocol: str
    cmc: np.ndarray              # cmc[k-1] = rank-k accuracy
    ap: np.ndarray               # per evaluated query
    query_ids: list              # evaluated queries, same order as ``ap``
    ranked: list                 # per evaluated query: ranked valid gallery ids
    num_dropped: int

    @property
    def mAP(self):
        return float(self.ap.mean())

    def rank(self, k):
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def report(self):
        return dict(protocol=self.protocol, rank1=self.rank(1), rank5=self.rank(5), rank10=self.rank(10),
                    mAP=self.mAP, num_queries=len(self.ap))


def embed_gallery(model, tracklets, clip_len=8, stride=2, batch_size=64):
    """One embedding per tracklet from its centred clip."""
    if not tracklets:
        return {}
    clips = np.stack([tr.clip(clip_len, stride, center=True) for tr in tracklets])
    apps = [tr.appearance for tr in tracklets]
    appearance = None if any(a is None for a in apps) else np.stack(apps)
    emb = model.embed(clips, appearance, batch_size=batch_size)
    return {tr.tracklet_id: emb[i] for i, tr in enumerate(tracklets)}


def cosine_distance(q, g):
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    return 1.0 - qn @ gn.T


def _labels(items, key):
    vals = [getattr(it, key) if not isinstance(it, dict) else it.get(key) for it in items]
    if any(v is None or v == "" for v in vals):
        raise DataError(f"missing {key} label")
    return np.asarray(vals, dtype=object)


def protocol_filter(query, gallery, protocol):
    """Valid-gallery and positive masks, each (num_query, num_gallery).

    ``query``/``gallery`` are sequences of objects (or dicts) carrying
    person_id, clothing_id, camera_id and tracklet_id.
    """
    protocol = protocol.lower()
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    qp, gp = _labels(query, "person_id"), _labels(gallery, "person_id")
    qc, gc = _labels(query, "clothing_id"), _labels(gallery, "clothing_id")
    qcam = np.asarray([getattr(q, "camera_id", None) if not isinstance(q, dict) else q.get("camera_id")
                       for q in query], dtype=object)
    gcam = np.asarray([getattr(g, "camera_id", None) if not isinstance(g, dict) else g.get("camera_id")
                       for g in gallery], dtype=object)
    qt, gt = _labels(query, "tracklet_id"), _labels(gallery, "tracklet_id")
    same_person = qp[:, None] == gp[None, :]
    same_cloth = qc[:, None] == gc[None, :]
    self_match = (qt[:, None] == gt[None, :]) & (qcam[:, None] == gcam[None, :])
    if protocol == "cc":
        keep_pos = same_person & ~same_cloth
    elif protocol == "sc":
        keep_pos = same_person & same_cloth
    else:
        keep_pos = same_person
    valid = (~same_person | keep_pos) & ~self_match
    return valid, valid & same_person


def cmc_map(distmat, valid, positive, gallery_ids=None, query_ids=None, protocol="standard"):
    """CMC curve and per-query AP over the valid gallery of each query.

    Ties in distance are broken by gallery id order. Queries without a valid
    positive are dropped and counted.
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    nq, ng = distmat.shape
    gallery_ids = list(range(ng)) if gallery_ids is None else list(gallery_ids)
    query_ids = list(range(nq)) if query_ids is None else list(query_ids)
    tie_key = np.argsort(np.argsort(np.asarray(gallery_ids, dtype=object), kind="stable"), kind="stable")
    cmc = np.zeros(ng)
    aps, kept, ranked = [], [], []
    dropped = 0
    for i in range(nq):
        cols = np.flatnonzero(valid[i])
        hits = positive[i, cols]
        if not hits.any():
            dropped += 1
            continue
        order = np.lexsort((tie_key[cols], distmat[i, cols]))
        hits = hits[order]
        first = int(np.argmax(hits))
        cmc[first:] += 1
        hit_ranks = np.flatnonzero(hits) + 1
        aps.append(float(np.mean(np.arange(1, len(hit_ranks) + 1) / hit_ranks)))
        kept.append(query_ids[i])
        ranked.append([gallery_ids[j] for j in cols[order]])
    if not aps:
        raise EvaluationError(f"no query has a valid positive under protocol {protocol!r}")
    return RetrievalResult(protocol=protocol, cmc=cmc / len(aps), ap=np.asarray(aps), query_ids=kept,
                           ranked=ranked, num_dropped=dropped)


def evaluate(query_emb, gallery_emb, query, gallery, protocol):
    """``query_emb``/``gallery_emb``: arrays aligned with the ``query``/``gallery`` metadata."""
    dist = cosine_distance(query_emb, gallery_emb)
    valid, pos = protocol_filter(query, gallery, protocol)
    return cmc_map(dist, valid, pos, gallery_ids=[g.tracklet_id for g in gallery],
                   query_ids=[q.tracklet_id for q in query], protocol=protocol)


def evaluate_model(model, query, gallery, protocols=PROTOCOLS, clip_len=8, stride=2):
    q_emb = embed_gallery(model, query, clip_len, stride)
    g_emb = embed_gallery(model, gallery, clip_len, stride)
    qe = np.stack([q_emb[q.tracklet_id] for q in query])
    ge = np.stack([g_emb[g.tracklet_id] for g in gallery])
    return {p: evaluate(qe, ge, query, gallery, p) for p in protocols}


def write_cmc_csv(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "accuracy"])
        for k, v in enumerate(result.cmc, 1):
            w.writerow([k, repr(float(v))])


def write_report(path, results):
    reports = [r.report() for r in results]
    with open(path, "w") as fh:
        json.dump(reports[0] if len(reports) == 1 else reports, fh, indent=2, sort_keys=True)
        fh.write("\n")
