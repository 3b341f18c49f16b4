"""Split protocols, leave-one-out ranking evaluation, the streaming loop and
latency measurement."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import checkpoint
from .adapter import WindowSummarizer
from .data import user_history
from .errors import TimestampOrderError, ValidationError
from .evidence import EvidenceBatch, evidence_forward, faithfulness_metric
from .linalg import seeded_rng
from .metrics import metrics_from_ranks, positive_rank
from .system import Recommender, RequestBatch, TupleBatch
from .training import online_update, sample_negatives

KS = (5, 10, 20)
DEFAULT_RATIOS = {"standard": (0.8, 0.1, 0.1), "cold_start": (0.9, 0.1), "streaming": (0.7, 0.3)}


# -- splits -------------------------------------------------------------------

@dataclass
class SplitSpec:
    """``ratios`` are train/valid/test (standard), train/valid over warm items
    (cold_start) or pretrain/online (streaming)."""

    mode: str = "standard"
    ratios: tuple = None
    cold_threshold: int = 5
    window_mode: str = "events"
    window_size: float = 500

    def __post_init__(self):
        if self.mode not in DEFAULT_RATIOS:
            raise ValidationError(f"unknown split mode {self.mode!r}")
        if self.ratios is None:
            self.ratios = DEFAULT_RATIOS[self.mode]
        self.ratios = tuple(float(r) for r in self.ratios)
        if abs(sum(self.ratios) - 1.0) > 1e-9 or any(r < 0 for r in self.ratios):
            raise ValidationError("split ratios must be non-negative and sum to 1")
        if self.window_mode not in ("events", "seconds") or self.window_size <= 0:
            raise ValidationError("bad window definition")


@dataclass
class Splits:
    """Index arrays into the interaction log (each sorted, i.e. time ordered)."""

    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    windows: list = field(default_factory=list)
    spans: list = field(default_factory=list)


def _part(n, ratio):
    return int(np.floor(ratio * n + 1e-9))


def make_splits(inter, spec: SplitSpec, seed: int = 0) -> Splits:
    n = len(inter)
    empty = np.zeros(0, dtype=np.int64)
    if spec.mode == "standard":
        perm = seeded_rng([seed, 11]).permutation(n)
        n_tr = int(round(spec.ratios[0] * n))
        n_va = int(round(spec.ratios[1] * n))
        parts = [np.sort(perm[:n_tr]), np.sort(perm[n_tr:n_tr + n_va]), np.sort(perm[n_tr + n_va:])]
        for p, r in zip(parts, spec.ratios):
            if r > 0 and p.size == 0:
                raise ValidationError(f"{n} interactions are too few for ratios {spec.ratios}")
        return Splits(*parts)
    if spec.mode == "cold_start":
        counts = np.bincount(inter.items)
        cold = counts < spec.cold_threshold
        test = np.flatnonzero(cold[inter.items])
        warm = np.flatnonzero(~cold[inter.items])
        if test.size == 0 or warm.size == 0:
            raise ValidationError("cold-start split needs both cold and warm items")
        perm = seeded_rng([seed, 12]).permutation(warm.size)
        n_tr = int(round(spec.ratios[0] * warm.size))
        return Splits(np.sort(warm[perm[:n_tr]]), np.sort(warm[perm[n_tr:]]), test)
    # streaming
    if n and np.any(np.diff(inter.times) < 0):
        bad = int(np.flatnonzero(np.diff(inter.times) < 0)[0]) + 1
        raise TimestampOrderError("streaming split needs time-ordered interactions", locator=f"event {bad}")
    n_pre = _part(n, spec.ratios[0])
    if n_pre == 0 or n_pre == n:
        raise ValidationError(f"{n} interactions are too few for a streaming split")
    windows, spans = window_partition(inter, n_pre, n, spec)
    return Splits(np.arange(n_pre), empty, np.arange(n_pre, n), windows, spans)


def window_partition(inter, start: int, stop: int, spec: SplitSpec):
    """Ordered, non-overlapping windows covering events ``start:stop``."""
    if spec.window_mode == "events":
        size = int(spec.window_size)
        wins = [np.arange(a, min(stop, a + size)) for a in range(start, stop, size)]
        spans = [(float(inter.times[w[0]]), float(inter.times[w[-1]])) for w in wins]
        return wins, spans
    t0 = float(inter.times[start])
    bins = np.floor((inter.times[start:stop] - t0) / spec.window_size).astype(np.int64)
    wins, spans = [], []
    for b in np.unique(bins):
        wins.append(start + np.flatnonzero(bins == b))
        spans.append((t0 + b * spec.window_size, t0 + (b + 1) * spec.window_size))
    return wins, spans


# -- requests ----------------------------------------------------------------

def sample_candidates(pos, n_items: int, n_neg: int, rng, full_catalog: bool = False) -> np.ndarray:
    """Column 0 is the positive; the rest are distinct uniformly sampled negatives."""
    pos = np.asarray(pos, dtype=np.int64)
    R = pos.size
    if full_catalog or n_neg >= n_items - 1:
        others = np.tile(np.arange(n_items), (R, 1))
        keep = others != pos[:, None]
        negs = others[keep].reshape(R, n_items - 1)
    else:
        keys = rng.random((R, n_items))
        keys[np.arange(R), pos] = np.inf
        negs = np.sort(np.argpartition(keys, n_neg - 1, axis=1)[:, :n_neg], axis=1)
    return np.concatenate([pos[:, None], negs], axis=1)


def build_requests(system, log, query_idx, known_idx, rng, s_user=None) -> RequestBatch:
    cfg = system.cfg
    q = np.asarray(query_idx)
    k = np.asarray(known_idx)
    hist, anchor = user_history(log.users[k], log.items[k], k, log.users[q], q, cfg.L)
    cands = sample_candidates(log.items[q], system.catalog.n_items, cfg.n_negatives, rng, cfg.full_catalog)
    s = np.zeros((q.size, cfg.d_s)) if s_user is None else s_user
    return RequestBatch(log.users[q], cands, hist, anchor, s)


def rank_positive(system, req: RequestBatch, **score_kw) -> np.ndarray:
    return positive_rank(system.score(req, **score_kw), req.cands)


# -- reports -------------------------------------------------------------------

@dataclass
class EvalReport:
    metrics: dict = field(default_factory=dict)
    windows: list = field(default_factory=list)
    latency: list = field(default_factory=list)
    faithfulness: dict | None = None
    info: dict = field(default_factory=dict)

    def records(self) -> list:
        out = [{"kind": "info", **self.info}] if self.info else []
        out += [{"kind": "window", **w} for w in self.windows]
        out += [{"kind": "latency", **row} for row in self.latency]
        if self.faithfulness is not None:
            out.append({"kind": "faithfulness", **self.faithfulness})
        out.append({"kind": "aggregate", **self.metrics})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    @classmethod
    def from_jsonl(cls, text: str) -> "EvalReport":
        rep = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            r = json.loads(line)
            kind = r.pop("kind")
            if kind == "window":
                rep.windows.append(r)
            elif kind == "latency":
                rep.latency.append(r)
            elif kind == "faithfulness":
                rep.faithfulness = r
            elif kind == "info":
                rep.info = r
            else:
                rep.metrics = r
        return rep

    def to_table(self, ks=KS) -> str:
        cols = [f"{m}@{k}" for m in ("hit", "ndcg", "recall") for k in ks]
        present = set(self.metrics).union(*(w.keys() for w in self.windows))
        cols = [c for c in cols if c in present]
        lines = []
        if self.windows:
            lines.append("window      n  " + "  ".join(f"{c:>9s}" for c in cols))
            for w in self.windows:
                lines.append(f"{w['window']:6d} {w['n']:6d}  " + "  ".join(f"{w[c]:9.4f}" for c in cols))
        if self.metrics:
            lines.append("overall " + "  ".join(f"{c}={self.metrics[c]:.4f}" for c in cols if c in self.metrics))
        if self.faithfulness is not None:
            f = self.faithfulness
            lines.append(f"faithfulness acc_with={f['acc_with']:.4f} acc_without={f['acc_without']:.4f} "
                         f"drop={f['drop']:.4f}")
        for row in self.latency:
            lines.append(f"latency L={row['L']} E={row['E']} C={row['C']} tokens={row['tokens']} "
                         f"mean={row['mean_s'] * 1e3:.3f}ms p95={row['p95_s'] * 1e3:.3f}ms")
        return "\n".join(lines)

    def save(self, prefix) -> None:
        prefix = Path(prefix)
        prefix.with_suffix(".jsonl").write_text(self.to_jsonl(), encoding="utf-8")
        prefix.with_suffix(".txt").write_text(self.to_table() + "\n", encoding="utf-8")


def evaluate(system, log, query_idx, known_idx, seed: int = 0, adapter: bool = False, evidence: str = "on",
             faithfulness: bool = False, ks=KS) -> EvalReport:
    """Leave-one-out evaluation of the events ``query_idx``; histories come
    from the events ``known_idx`` that precede each query."""
    if len(query_idx) == 0:
        raise ValidationError("nothing to evaluate")
    req = build_requests(system, log, query_idx, known_idx, seeded_rng([seed, 0, 1]))
    ranks = rank_positive(system, req, adapter=adapter, evidence=evidence)
    rep = EvalReport(metrics={"n": int(len(req)), **metrics_from_ranks(ranks, ks)})
    if faithfulness:
        a, b, drop = faithfulness_metric(
            lambda r, zero: system.score(r, adapter=adapter, evidence="zero" if zero else "on"), req)
        rep.faithfulness = {"acc_with": a, "acc_without": b, "drop": drop}
    return rep


# -- streaming -----------------------------------------------------------------

class StreamRunner:
    """Test-then-train over the online windows of a streaming split.

    Window ``w`` is scored with the adapter as trained through window
    ``w - 1`` and with the summaries of window ``w - 1``; its events are then
    used for one online update.  Summaries of "window -1" come from the last
    window-sized stretch of the pretraining data.
    """

    def __init__(self, system, log, splits: Splits, spec: SplitSpec, adapter: bool = True,
                 update: bool | None = None, seed: int | None = None, ks=KS):
        if not splits.windows:
            raise ValidationError("streaming evaluation needs at least one window")
        self.system = system
        self.log = log
        self.splits = splits
        self.spec = spec
        self.adapter = adapter
        self.update = adapter if update is None else update
        self.seed = system.cfg.seed if seed is None else seed
        self.ks = ks
        self.report = EvalReport(info={"adapter": adapter, "update": self.update, "seed": self.seed,
                                       "n_windows": len(splits.windows)})
        self.next_window = 0
        self.trained = np.zeros(len(log), dtype=bool)
        n_pre = len(splits.train)
        pre_w, pre_s = window_partition(log, 0, n_pre, spec)
        self._pre = (pre_w[-2:], pre_s[-2:])
        stream = np.concatenate(splits.windows)
        hist, anchor = user_history(log.users, log.items, np.arange(len(log)), log.users[stream], stream,
                                    system.cfg.L)
        self._hist = dict(zip(stream.tolist(), range(len(stream))))
        self._hist_rows, self._anchor = hist, anchor
        self._summ = {}

    # window bookkeeping -----------------------------------------------------------
    def _events(self, w):
        if w >= 0:
            return self.splits.windows[w], self.splits.spans[w]
        wins, spans = self._pre
        k = len(wins) + w
        if k < 0:
            return np.zeros(0, dtype=np.int64), None
        return wins[k], spans[k]

    def summaries(self, w: int):
        """``(users, items)`` summary tables of window ``w`` (``w >= -1``)."""
        if w not in self._summ:
            cat = self.system.catalog
            idx, span = self._events(w)
            prev, _ = self._events(w - 1)
            s = WindowSummarizer(self.log.take(idx), cat.n_users, cat.n_items, cat.item_feats["cf"], cat.user_cf,
                                 self.log.take(prev), span)
            self._summ[w] = (s.users, s.items)
        return self._summ[w]

    def _context(self, idx):
        rows = np.array([self._hist[i] for i in idx.tolist()], dtype=np.int64)
        return self._hist_rows[rows], self._anchor[rows]

    def requests(self, w: int) -> RequestBatch:
        idx = self.splits.windows[w]
        su, _ = self.summaries(w - 1)
        hist, anchor = self._context(idx)
        cfg = self.system.cfg
        cands = sample_candidates(self.log.items[idx], self.system.catalog.n_items, cfg.n_negatives,
                                  seeded_rng([self.seed, w, 1]), cfg.full_catalog)
        users = self.log.users[idx]
        return RequestBatch(users, cands, hist, anchor, su[users])

    def records_for(self, w: int) -> np.ndarray:
        idx = self.splits.windows[w]
        neg = sample_negatives(self.log.items[idx], self.system.catalog.n_items, seeded_rng([self.seed, w, 2]))
        return np.stack([self.log.users[idx], self.log.items[idx], neg, np.full(idx.size, w), idx], axis=1)

    def resolve(self, rows) -> TupleBatch:
        rows = np.asarray(rows, dtype=np.int64).reshape(-1, 5)
        n = len(rows)
        d_s = self.system.cfg.d_s
        su = np.zeros((n, d_s))
        sp = np.zeros((n, d_s))
        sn = np.zeros((n, d_s))
        for w in np.unique(rows[:, 3]):
            sel = rows[:, 3] == w
            tu, ti = self.summaries(int(w) - 1)
            su[sel] = tu[rows[sel, 0]]
            sp[sel] = ti[rows[sel, 1]]
            sn[sel] = ti[rows[sel, 2]]
        hist, anchor = self._context(rows[:, 4])
        return TupleBatch(rows[:, 0], rows[:, 1], rows[:, 2], hist, anchor, su, sp, sn)

    # main loop -----------------------------------------------------------------------
    def step(self) -> dict:
        w = self.next_window
        idx = self.splits.windows[w]
        if self.trained[idx].any():
            raise AssertionError(f"window {w} events were trained on before evaluation")
        replay = self.system.adapter.replay.contents()
        if len(replay) and replay[:, 3].max() >= w:
            raise AssertionError("replay buffer holds tuples from a window not yet evaluated")
        req = self.requests(w)
        _, si = self.summaries(w - 1)
        ranks = rank_positive(self.system, req, s_items=si, adapter=self.adapter)
        row = {"window": w, "n": int(idx.size), **metrics_from_ranks(ranks, self.ks)}
        self.report.windows.append(row)
        if self.update:
            rows = self.records_for(w)
            online_update(self.system, self.resolve(rows), w, rows=rows, resolve=self.resolve,
                          rng=seeded_rng([self.seed, w, 7]))
            self.trained[idx] = True
        # summaries older than the replay horizon are no longer needed
        keep = {w, w - 1} | {int(x) - 1 for x in np.unique(self.system.adapter.replay.contents()[:, 3])}
        self._summ = {k: v for k, v in self._summ.items() if k in keep}
        self.next_window += 1
        return row

    def run(self, stop: int | None = None, checkpoint_path=None) -> EvalReport:
        stop = len(self.splits.windows) if stop is None else min(stop, len(self.splits.windows))
        while self.next_window < stop:
            self.step()
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        if self.next_window == len(self.splits.windows):
            self.report.metrics = aggregate(self.report.windows, self.ks)
        return self.report

    # persistence ---------------------------------------------------------------------
    def save(self, path) -> None:
        meta = {"stream": {"next_window": self.next_window, "windows": self.report.windows,
                           "info": self.report.info, "adapter": self.adapter, "update": self.update,
                           "seed": self.seed}}
        self.system.save(path, extra_meta=meta, extra_tensors={"stream/trained": self.trained})

    @classmethod
    def resume(cls, path, log, splits: Splits, spec: SplitSpec, catalog) -> "StreamRunner":
        system, tensors, meta = Recommender.load(path, catalog)
        st = meta["stream"]
        runner = cls(system, log, splits, spec, adapter=st["adapter"], update=st["update"], seed=st["seed"])
        runner.next_window = int(st["next_window"])
        runner.report.windows = list(st["windows"])
        runner.report.info = dict(st["info"])
        runner.trained = tensors["stream/trained"].astype(bool)
        return runner


def aggregate(windows: list, ks=KS) -> dict:
    """Event-weighted mean of per-window metrics."""
    n = np.array([w["n"] for w in windows], dtype=np.float64)
    out = {"n": int(n.sum())}
    for key in windows[0]:
        if key in ("window", "n"):
            continue
        vals = np.array([w[key] for w in windows])
        out[key] = float(np.sum(vals * n) / n.sum())
    return out


def run_stream(system, log, splits: Splits, spec: SplitSpec, adapter: bool = True, update: bool | None = None,
               seed: int | None = None) -> EvalReport:
    return StreamRunner(system, log, splits, spec, adapter=adapter, update=update, seed=seed).run()


# -- latency ------------------------------------------------------------------------

@dataclass
class LatencyResult:
    rows: list
    slope: float
    intercept: float
    r2: float


def _fit(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * np.asarray(x) + intercept
    ss_res = float(np.sum((np.asarray(y) - pred) ** 2))
    ss_tot = float(np.sum((np.asarray(y) - np.mean(y)) ** 2))
    return float(slope), float(intercept), (1.0 - ss_res / ss_tot) if ss_tot > 0 else 1.0


def _prompt_runner(system, L, E, C, batch, chunk, rng):
    """Closure building and scoring one batch of ``(L, E, C)`` prompts."""
    cat = system.catalog
    tk, enc, bb = system.token, system.evid, system.backbone
    d = system.cfg.d
    users = rng.integers(0, cat.n_users, size=batch)
    hist = rng.integers(0, cat.n_items, size=(batch, L))
    cands = rng.integers(0, cat.n_items, size=(batch, C))
    kn = E // 2
    n_attr = max(0, min(system.cfg.m_attr, E - kn))
    anchor = rng.integers(0, cat.n_items, size=batch)
    eb = EvidenceBatch(np.ones(batch, dtype=bool), rng.integers(0, cat.n_items, size=(batch, kn)),
                       rng.random((batch, kn)), system.attr_idx[anchor], system.attr_valid[anchor])

    def prompt_scores(sl):
        b = sl.stop - sl.start
        h = system.Hb[users[sl]]
        usr = tk(h)
        hist_tok = tk(system.Zb[hist[sl]].reshape(-1, d)).reshape(b, L, -1)
        evid = np.zeros((b, E, bb.d_ell))
        if E:
            sub = EvidenceBatch(eb.valid[sl], eb.nbr_idx[sl], eb.nbr_sims[sl], eb.attr_idx[sl], eb.attr_valid[sl])
            evid[:, 0] = evidence_forward(enc, h, system.Zb[sub.nbr_idx], sub, n_attr)[0]
        cand = tk(system.Zb[cands[sl]].reshape(-1, d)).reshape(b, C, -1)
        tokens = np.concatenate([usr[:, None, :], hist_tok, evid, cand], axis=1)
        hmean = tokens[:, 1:1 + L].mean(axis=1) if L else np.zeros((b, bb.d_ell))
        emean = tokens[:, 1 + L:1 + L + E].mean(axis=1) if E else None
        ctx = bb.context(tokens[:, 0], hmean, emean)
        return np.einsum("bd,bcd->bc", ctx, tokens[:, 1 + L + E:])

    def once():
        # fixed-size request chunks keep the working set cache-resident
        return [prompt_scores(slice(s, min(batch, s + chunk))) for s in range(0, batch, chunk)]

    return once


def measure_latency(system, configs, C: int = 20, batch: int = 128, reps: int = 30, warmup: int = 3,
                    seed: int = 0, chunk: int = 8) -> LatencyResult:
    """Time one batch of full prompt construction plus scoring per ``(L, E)``.

    Every token is projected per request (user, ``L`` history latents, ``E``
    evidence rows with ``E // 2`` neighbour rows, ``C`` candidates), so the
    work is proportional to the prompt length.  Configurations are timed
    round-robin so slow drifts of machine speed hit all of them alike;
    warm-up runs are discarded.
    """
    rng = seeded_rng([seed, 99])
    runners = [_prompt_runner(system, L, E, C, batch, chunk, rng) for L, E in configs]
    for _ in range(warmup):
        for run in runners:
            run()
    times = np.zeros((reps, len(runners)))
    for r in range(reps):
        for j, run in enumerate(runners):
            t0 = time.perf_counter()
            run()
            times[r, j] = time.perf_counter() - t0
    rows = []
    for j, (L, E) in enumerate(configs):
        t = times[:, j]
        rows.append({"L": int(L), "E": int(E), "C": int(C), "tokens": int(1 + L + E + C), "batch": batch,
                     "mean_s": float(t.mean()), "p95_s": float(np.percentile(t, 95)),
                     "std_s": float(t.std(ddof=1)) if reps > 1 else 0.0})
    slope, intercept, r2 = _fit([r["tokens"] for r in rows], [r["mean_s"] for r in rows])
    return LatencyResult(rows, slope, intercept, r2)


# -- significance -------------------------------------------------------------------

def paired_ttest(a, b) -> tuple[float, float]:
    """Paired t-test of per-seed scores ``a`` vs ``b``; returns ``(t, p)``.

    Identical samples give ``(0.0, 1.0)``; a constant non-zero difference
    gives an infinite statistic and ``p = 0``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValidationError("paired t-test needs two equal-length samples of size >= 2")
    diff = a - b
    if np.all(diff == diff[0]):
        return (0.0, 1.0) if diff[0] == 0 else (float(np.sign(diff[0]) * np.inf), 0.0)
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)
