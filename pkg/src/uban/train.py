"""SGD training of the anticipation model with the mixed-pair, ranking and
regularization objectives, plus the evaluation forward used by the reports.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cooccur import DataError, build_internal_matrix, merge_rows
from .data import family_batches, pair_batches, window_samples
from .labels import pair_label, pair_set, single_label
from .losses import (HyperParams, adjust_distribution, relative_weights,
                     srul_loss, total_loss, trul_loss_batched, wd_loss)
from .model import AnticipationModel, AnticipationWindow, dual_heads

__all__ = ["TrainConfig", "SgdMomentum", "train", "evaluate_model", "NumericalFailure"]


class NumericalFailure(RuntimeError):
    """Non-finite loss during training."""


@dataclass
class TrainConfig:
    alpha: float = 0.4
    beta: float = 0.005
    gamma: float = 5e-6
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-5
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    tau_o: float = 1.5
    tau_a: float = 2.0
    delta: float = 0.25
    hidden_dim: int = 64
    pooling: str = "mean"
    tau_a_grid: tuple[float, ...] = (2.0, 1.5, 1.0, 0.5)
    families_per_step: int = 8
    top_k_members: int | None = None

    @classmethod
    def desk_profile(cls, **overrides):
        """Small fast profile for synthetic corpora."""
        base = dict(batch_size=32, epochs=10, learning_rate=0.1, hidden_dim=32)
        base.update(overrides)
        return cls(**base)

    def window(self):
        return AnticipationWindow(tau_o=self.tau_o, tau_a=self.tau_a, delta=self.delta)

    def hyperparams(self):
        return HyperParams(alpha=self.alpha, beta=self.beta, gamma=self.gamma)

    @property
    def plain_cross_entropy(self):
        # alpha=beta=gamma=0 is the uncertainty-free ablation baseline
        return self.alpha == 0 and self.beta == 0 and self.gamma == 0


class SgdMomentum:
    """SGD with classical momentum and decoupled L2 weight decay."""

    def __init__(self, params, learning_rate, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self):
        for name in sorted(self.params):
            t = self.params[name]
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            if self.weight_decay:
                grad = grad + self.weight_decay * t.data
            v = self.momentum * self.velocity[name] - self.learning_rate * grad
            self.velocity[name] = v
            t.data = t.data + v

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


def _label_cache(matrix_internal, matrix_external, alpha, num_classes):
    internal = matrix_internal.values
    external = (matrix_external.values if matrix_external is not None
                else np.zeros_like(internal))
    sets = {c: merge_rows(internal[c], external[c], c) for c in range(num_classes)}
    singles = {c: single_label(c, sets[c], alpha, num_classes) for c in range(num_classes)}
    return sets, singles


def _pair_label_rows(pairs, sets, alpha, num_classes, cache):
    rows = []
    for s_i, s_j in pairs:
        key = (min(s_i.target_class, s_j.target_class),
               max(s_i.target_class, s_j.target_class))
        if key not in cache:
            merged = pair_set(sets[key[0]], sets[key[1]], key[0], key[1])
            cache[key] = pair_label(key[0], key[1], merged, alpha, num_classes).probs
        rows.append(cache[key])
    return np.stack(rows)


def _family_uncertainty(model, batch_families):
    """(F, M) pooled uncertainties, each member at its final anticipation step."""
    M = len(batch_families[0].members)
    columns = []
    for m in range(M):
        observed = np.stack([fam.members[m].observed for fam in batch_families])
        n_a = batch_families[0].members[m].window.n_a
        out = model.backbone.anticipate(observed, n_a)
        head = dual_heads(out.anticipated[-1], model.head_params, model.pooling)
        columns.append(head.uncertainty.scalar)
    return ad.concat(columns, axis=1)


def train(config, corpus, store, vocab, log_path=None, external_matrix=None,
          progress=None):
    """Train on the given corpus; returns (model, log_rows).

    Co-occurrence statistics come from the training corpus only; callers must
    pass the training split, never the full dataset.
    """
    window = config.window()
    samples, _ = window_samples(corpus, store, window)
    if not samples:
        raise DataError("no trainable samples: all segments lack footage")
    C = vocab.num_activities
    model = AnticipationModel(store.dim, config.hidden_dim, C,
                              pooling=config.pooling, seed=config.seed)
    optimizer = SgdMomentum(model.params, config.learning_rate,
                            config.momentum, config.weight_decay)
    hp = config.hyperparams()

    if config.plain_cross_entropy:
        sets, singles = None, None
        onehot = np.eye(C)
    else:
        internal = build_internal_matrix(corpus, vocab)
        sets, singles = _label_cache(internal, external_matrix, config.alpha, C)
        pair_cache = {}
        families, _ = family_batches(corpus, store, window, config.tau_a_grid)

    log_rows = []
    step = 0
    for epoch in range(config.epochs):
        epoch_seed = config.seed * 100003 + epoch
        if config.plain_cross_entropy:
            rng = np.random.default_rng(epoch_seed)
            order = rng.permutation(len(samples))
            for lo in range(0, len(order), config.batch_size):
                batch = [samples[i] for i in order[lo:lo + config.batch_size]]
                observed = np.stack([s.observed for s in batch])
                labels = onehot[[s.target_class for s in batch]]
                _, heads = model.forward(observed, window.n_a)
                loss = None
                for head in heads:
                    lp = ad.log_softmax(head.logits, axis=1)
                    ce = ad.neg(ad.tensor_mean(ad.tensor_sum(lp * Tensor(labels), axis=1)))
                    loss = ce if loss is None else loss + ce
                loss = loss * Tensor(1.0 / len(heads))
                step = _apply(loss, optimizer, log_rows, step, epoch,
                              float(loss.data), 0.0, 0.0, 0.0, hp)
            continue

        fam_rng = np.random.default_rng(epoch_seed + 1)
        fam_order = fam_rng.permutation(len(families)) if families else []
        fam_pos = 0
        for pairs in pair_batches(samples, config.batch_size, epoch_seed):
            flat = [s for pair in pairs for s in pair]
            observed = np.stack([s.observed for s in flat])
            backbone_out, heads = model.forward(observed, window.n_a)

            P = len(pairs)
            i_idx = list(range(0, 2 * P, 2))
            j_idx = list(range(1, 2 * P, 2))
            pair_labels = _pair_label_rows(pairs, sets, config.alpha, C, pair_cache)

            mixed_log_probs = []
            u_all = []
            for feat, head in zip(backbone_out.anticipated, heads):
                u = head.uncertainty.scalar
                u_all.append(u)
                u_i = ad.gather_rows(u, i_idx)
                u_j = ad.gather_rows(u, j_idx)
                pair_u = ad.concat([u_i, u_j], axis=1)
                weights = relative_weights(pair_u)
                f_i = ad.gather_rows(feat, i_idx)
                f_j = ad.gather_rows(feat, j_idx)
                mixed = f_i * weights[:, 0:1] + f_j * weights[:, 1:2]
                mixed_head = dual_heads(mixed, model.head_params, model.pooling)
                adjusted = adjust_distribution(mixed_head.logits,
                                               mixed_head.uncertainty.scalar)
                mixed_log_probs.append(adjusted.log_probs)

            l_srul = srul_loss(mixed_log_probs, pair_labels)
            l_wd = wd_loss(ad.concat(u_all, axis=1))

            if families and config.beta > 0:
                take = min(config.families_per_step, len(families))
                chosen = [families[fam_order[(fam_pos + i) % len(families)]]
                          for i in range(take)]
                fam_pos += take
                u_mat = _family_uncertainty(model, chosen)
                l_trul = trul_loss_batched(u_mat) * Tensor(1.0 / take)
            else:
                l_trul = Tensor(0.0)

            loss = l_srul + Tensor(hp.beta) * l_trul + Tensor(hp.gamma) * l_wd
            step = _apply(loss, optimizer, log_rows, step, epoch,
                          float(l_srul.data),
                          float(l_trul.data), float(l_wd.data),
                          float(np.mean([u.data.mean() for u in u_all])), hp)

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for row in log_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    if progress is not None:
        progress(log_rows)
    return model, log_rows


def _apply(loss, optimizer, log_rows, step, epoch, l_srul, l_trul, l_wd, mean_u, hp):
    if not np.isfinite(loss.data).all():
        raise NumericalFailure(f"non-finite loss at step {step}")
    optimizer.zero_grad()
    ad.backward(loss)
    optimizer.step()
    breakdown = total_loss(l_srul, l_trul, l_wd, hp)
    log_rows.append({
        "epoch": epoch,
        "step": step,
        "l_srul": breakdown.l_srul,
        "l_trul": breakdown.l_trul,
        "l_wd": breakdown.l_wd,
        "total": breakdown.total,
        "mean_u": mean_u,
    })
    return step + 1


def evaluate_model(model, corpus, store, window, batch_size=256):
    """Adjusted probabilities and pooled uncertainties for every test sample.

    Returns (probs (N, n_a, C), uncertainties (N, n_a), truths (N,)).
    """
    samples, _ = window_samples(corpus, store, window)
    if not samples:
        raise DataError("no evaluable samples")
    probs, uncs, truths = [], [], []
    for lo in range(0, len(samples), batch_size):
        batch = samples[lo:lo + batch_size]
        observed = np.stack([s.observed for s in batch])
        p, u = model.predict(observed, window.n_a)
        probs.append(p)
        uncs.append(u)
        truths.extend(s.target_class for s in batch)
    return np.concatenate(probs), np.concatenate(uncs), np.array(truths)
