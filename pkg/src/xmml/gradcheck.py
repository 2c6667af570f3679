"""Central-difference verification harness for every objective and the model.

Each named check builds a small random batch, packs the quantities being
differentiated into a ParamStore, and wires the loss into
`finite_difference_check`. Distillation teachers are frozen snapshots of the
fused views (matching their stop-gradient semantics), while the fused
contrastive term re-applies the sampled averaging pattern to the perturbed
embeddings, so the numeric derivative sees exactly the function the
analytic gradients describe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .losses import (EmbeddingSet, FusedSet, LossWeights, contrastive_fused,
                     contrastive_single, distance_parity_loss, distill_loss,
                     fuse_multiview, identity_loss, total_loss,
                     weighted_triplet_loss)
from .numerics import FdReport, ParamStore, derive_rng, derive_seed, finite_difference_check

LOSS_NAMES = ("identity", "triplet", "contrast_single", "contrast_fused",
              "distill", "parity", "total", "model")

# every (N, d) combination the loss contracts are stated over
DEFAULT_SIZES = ((2, 4), (4, 4), (8, 4), (2, 8), (4, 8), (8, 8))

_EMB_BLOCKS = ("f_v", "f_r", "t_v", "t_r")


def _labels_for(n: int) -> np.ndarray:
    """Cyclic labels with at least two identities, two rows each when n > 2."""
    n_ids = max(2, n // 2)
    return np.arange(n, dtype=np.int64) % n_ids


def _candidates_for(labels: np.ndarray) -> list[list[int]]:
    return [[j for j in range(len(labels)) if j != i and labels[j] == labels[i]]
            for i in range(len(labels))]


def _random_case(n: int, d: int, seed: int, n_classes: int):
    rng = derive_rng(seed, "gradcheck-case", n, d)
    labels = _labels_for(n)
    blocks = {name: rng.standard_normal((n, d)) for name in _EMB_BLOCKS}
    logits_v = rng.standard_normal((n, n_classes))
    logits_r = rng.standard_normal((n, n_classes))
    return blocks, logits_v, logits_r, labels


def _emb_from_store(store: ParamStore, labels: np.ndarray) -> EmbeddingSet:
    return EmbeddingSet(f_v=store.value("f_v"), f_r=store.value("f_r"),
                        t_v=store.value("t_v"), t_r=store.value("t_r"),
                        labels=labels)


def _write_emb_grads(store: ParamStore, grads) -> None:
    for name in _EMB_BLOCKS:
        store.grad(name)[...] = getattr(grads, name)


def build_case(name: str, n: int, d: int, seed: int,
               weights: LossWeights | None = None):
    """Returns (loss_fn, value_fn, store) for one named check.

    `loss_fn(store)` computes the scalar and rewrites the analytic gradients;
    `value_fn` is value-only where that saves real work (None otherwise).
    """
    w = weights if weights is not None else LossWeights()
    n_classes = max(2, int(_labels_for(n).max()) + 1)
    blocks, logits_v, logits_r, labels = _random_case(n, d, seed, n_classes)

    if name == "identity":
        store = ParamStore()
        store.add("logits_v", logits_v)
        store.add("logits_r", logits_r)

        def loss_fn(s):
            val, gv, gr = identity_loss(s.value("logits_v"), s.value("logits_r"), labels)
            s.grad("logits_v")[...] = gv
            s.grad("logits_r")[...] = gr
            return val
        return loss_fn, None, store

    if name == "triplet":
        store = ParamStore()
        rng = derive_rng(seed, "gradcheck-stack", n, d)
        store.add("stack", rng.standard_normal((2 * n, d)))
        stack_labels = np.concatenate([labels, labels])

        def loss_fn(s):
            val, g = weighted_triplet_loss(s.value("stack"), stack_labels)
            s.grad("stack")[...] = g
            return val
        return loss_fn, None, store

    if name in ("contrast_single", "contrast_fused", "distill", "parity", "total"):
        store = ParamStore()
        for block in _EMB_BLOCKS:
            store.add(block, blocks[block])
        base_emb = _emb_from_store(store, labels)
        candidates = _candidates_for(labels)
        fused0 = fuse_multiview(base_emb, candidates, w.n_fuse,
                                derive_seed(seed, "gradcheck-fuse", n, d),
                                cross_modal=w.cross_modal_fusion)
        contrast_labels = labels if w.label_aware_contrast else None

        if name == "contrast_single":
            def loss_fn(s):
                val, grads = contrastive_single(_emb_from_store(s, labels), w.tau,
                                                contrast_labels)
                _write_emb_grads(s, grads)
                return val
            return loss_fn, None, store

        if name == "contrast_fused":
            def loss_fn(s):
                live = FusedSet.from_mix(_emb_from_store(s, labels),
                                         fused0.mix_v, fused0.mix_r, fused0.n_fuse)
                val, grads = contrastive_fused(live, w.tau, contrast_labels)
                _write_emb_grads(s, grads)
                return val
            return loss_fn, None, store

        if name == "distill":
            # teacher frozen at the base point: stop-gradient semantics
            def loss_fn(s):
                val, grads = distill_loss(_emb_from_store(s, labels), fused0,
                                          include_text=w.distill_text)
                _write_emb_grads(s, grads)
                return val
            return loss_fn, None, store

        if name == "parity":
            def loss_fn(s):
                val, grads = distance_parity_loss(_emb_from_store(s, labels))
                _write_emb_grads(s, grads)
                return val
            return loss_fn, None, store

        # "total": logits are parameters too; fused views re-applied live,
        # distillation teacher frozen at the base point
        store.add("logits_v", logits_v)
        store.add("logits_r", logits_r)

        def loss_fn(s):
            emb = _emb_from_store(s, labels)
            live = FusedSet.from_mix(emb, fused0.mix_v, fused0.mix_r, fused0.n_fuse)
            res = total_loss(emb, live, s.value("logits_v"), s.value("logits_r"),
                             w, kd_teacher=fused0)
            _write_emb_grads(s, res.grads)
            s.grad("logits_v")[...] = res.grad_logits_v
            s.grad("logits_r")[...] = res.grad_logits_r
            return res.breakdown.total
        return loss_fn, None, store

    if name == "model":
        return _build_model_case(n, seed, w)

    raise ValueError(f"unknown check name {name!r}; valid: {', '.join(LOSS_NAMES)}")


# central differences are invalid within the step of a relu kink: a
# pre-activation this close to zero makes the two-sided probe straddle the
# corner, so such batches are redrawn (the subgradient is only checkable
# where the function is locally affine)
_KINK_MARGIN = 1e-3


def _min_preactivation(store: ParamStore, x_v, x_r, l_v, l_r) -> float:
    mins = []
    for x, modality in ((x_v, "V"), (x_r, "R")):
        _, cache = model.encode_visual(store, x, modality)
        mins.extend(np.abs(a).min() for a in cache.pre[:-1])
    for l in (l_v, l_r):
        _, cache = model.encode_text(store, l)
        mins.extend(np.abs(a).min() for a in cache.pre[:-1])
    return float(min(mins))


def _build_model_case(n: int, seed: int, w: LossWeights):
    """Full pipeline: encoders + classifier + combined objective."""
    d_in = 6
    labels = _labels_for(n)
    n_classes = max(2, int(labels.max()) + 1)
    enc_cfg = model.EncoderConfig(d_in_visual=d_in, d_in_text=d_in,
                                  n_classes=n_classes, d_hidden=8, d_embed=4,
                                  init_scale=0.4,
                                  seed=derive_seed(seed, "gradcheck-model-init", n))
    store = model.init_params(enc_cfg)
    for attempt in range(64):
        rng = derive_rng(seed, "gradcheck-model-data", n, attempt)
        x_v = rng.standard_normal((n, d_in))
        x_r = rng.standard_normal((n, d_in))
        l_v = rng.standard_normal((n, d_in))
        l_r = rng.standard_normal((n, d_in))
        if _min_preactivation(store, x_v, x_r, l_v, l_r) > _KINK_MARGIN:
            break
    candidates = _candidates_for(labels)

    def forward(s):
        f_v, c_fv = model.encode_visual(s, x_v, "V")
        f_r, c_fr = model.encode_visual(s, x_r, "R")
        t_v, c_tv = model.encode_text(s, l_v)
        t_r, c_tr = model.encode_text(s, l_r)
        logits_v, c_cv = model.classify(s, f_v)
        logits_r, c_cr = model.classify(s, f_r)
        emb = EmbeddingSet(f_v=f_v, f_r=f_r, t_v=t_v, t_r=t_r, labels=labels)
        return emb, logits_v, logits_r, (c_fv, c_fr, c_tv, c_tr, c_cv, c_cr)

    emb0, _, _, _ = forward(store)
    fused0 = fuse_multiview(emb0, candidates, w.n_fuse,
                            derive_seed(seed, "gradcheck-model-fuse", n),
                            cross_modal=w.cross_modal_fusion)
    teacher0 = fused0

    def loss_fn(s):
        emb, logits_v, logits_r, caches = forward(s)
        live = FusedSet.from_mix(emb, fused0.mix_v, fused0.mix_r, fused0.n_fuse)
        res = total_loss(emb, live, logits_v, logits_r, w, kd_teacher=teacher0)
        c_fv, c_fr, c_tv, c_tr, c_cv, c_cr = caches
        s.zero_grads()
        d_fv = res.grads.f_v + model.classify_backward(s, c_cv, res.grad_logits_v)
        d_fr = res.grads.f_r + model.classify_backward(s, c_cr, res.grad_logits_r)
        model.encode_visual_backward(s, c_fv, d_fv)
        model.encode_visual_backward(s, c_fr, d_fr)
        model.encode_text_backward(s, c_tv, res.grads.t_v)
        model.encode_text_backward(s, c_tr, res.grads.t_r)
        return res.breakdown.total

    def value_fn(s):
        emb, logits_v, logits_r, _ = forward(s)
        live = FusedSet.from_mix(emb, fused0.mix_v, fused0.mix_r, fused0.n_fuse)
        res = total_loss(emb, live, logits_v, logits_r, w, kd_teacher=teacher0)
        return res.breakdown.total

    return loss_fn, value_fn, store


@dataclass
class CheckSummary:
    name: str
    n_batches: int
    max_rel_err: float
    n_failed: int

    @property
    def ok(self) -> bool:
        return self.n_failed == 0


def _corrupted(loss_fn, store: ParamStore):
    """Test hook: nudge one analytic gradient entry so the check must fail."""
    first = store.names()[0]

    def bad_loss_fn(s):
        val = loss_fn(s)
        s.grad(first).reshape(-1)[0] += 1e-2
        return val
    return bad_loss_fn


def check_loss(name: str, n_batches: int = 50, sizes=DEFAULT_SIZES,
               h: float = 1e-5, tol: float = 1e-4, seed: int = 0,
               weights: LossWeights | None = None,
               corrupt: bool = False) -> tuple[CheckSummary, list[FdReport]]:
    """Run `n_batches` seeded random batches of one named check."""
    reports = []
    n_failed = 0
    max_rel = 0.0
    for b in range(n_batches):
        n, d = sizes[b % len(sizes)]
        loss_fn, value_fn, store = build_case(name, n, d, derive_seed(seed, name, b),
                                              weights=weights)
        if corrupt:
            loss_fn = _corrupted(loss_fn, store)
        report = finite_difference_check(loss_fn, store, h=h, tol=tol,
                                         value_fn=value_fn)
        reports.append(report)
        max_rel = max(max_rel, report.max_rel_err)
        if not report.ok:
            n_failed += 1
    return CheckSummary(name=name, n_batches=n_batches,
                        max_rel_err=max_rel, n_failed=n_failed), reports


def run_all(names=LOSS_NAMES, n_batches: int = 50, sizes=DEFAULT_SIZES,
            h: float = 1e-5, tol: float = 1e-4, seed: int = 0,
            weights: LossWeights | None = None,
            corrupt_name: str | None = None) -> list[CheckSummary]:
    summaries = []
    for name in names:
        summary, _ = check_loss(name, n_batches=n_batches, sizes=sizes, h=h,
                                tol=tol, seed=seed, weights=weights,
                                corrupt=(name == corrupt_name))
        summaries.append(summary)
    return summaries
