"""KG-embedding scorers (DistMult, ConvE) used as a frozen soft reward."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidArgument
from .optim import Adam, ParamSet, load_params, save_params

log = logging.getLogger(__name__)

KINDS = ("distmult", "conve")


@dataclass
class EmbedConfig:
    kind: str = "distmult"
    dim: int = 32
    epochs: int = 100
    lr: float = 0.01
    batch_size: int = 128
    label_smoothing: float = 0.1
    negatives: str = "1-to-all"
    # ConvE only; dim must equal reshape_height * reshape_width
    reshape_height: int = 4
    filters: int = 8
    kernel: int = 3
    seed: int = 0

    def validate(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown embedding kind {self.kind!r}; expected one of {KINDS}")
        if self.negatives != "1-to-all":
            raise InvalidArgument(f"unsupported negative scheme {self.negatives!r}")
        if self.kind == "conve":
            if self.dim % self.reshape_height:
                raise InvalidArgument("ConvE dim must be divisible by reshape_height")
            if self.kernel > min(2 * self.reshape_height, self.dim // self.reshape_height):
                raise InvalidArgument("ConvE kernel larger than the reshaped input")


def _im2col_index(height, width, kernel):
    """Flat indices of every kernel x kernel window of a (height, width) image."""
    rows = []
    for i in range(height - kernel + 1):
        for j in range(width - kernel + 1):
            rows.append([(i + di) * width + (j + dj) for di in range(kernel) for dj in range(kernel)])
    return np.array(rows, dtype=np.int64)


class EmbedModel:
    """Scorer ``f(e_s, r, e_o) = sigmoid(raw)``; parameters live in ``self.params``."""

    def __init__(self, config: EmbedConfig, n_entities: int, n_relations: int, params=None):
        config.validate()
        self.config = config
        self.kind = config.kind
        self.n_entities, self.n_relations = n_entities, n_relations
        if self.kind == "conve":
            h = config.reshape_height
            w = config.dim // h
            self._cols = _im2col_index(2 * h, w, config.kernel)
        self.params = params if params is not None else self.init_params(np.random.default_rng(config.seed))

    def init_params(self, rng) -> ParamSet:
        c = self.config
        d = c.dim
        bound = 1.0 / np.sqrt(d)
        p = ParamSet(
            entity=rng.uniform(-bound, bound, (self.n_entities, d)),
            relation=rng.uniform(-bound, bound, (self.n_relations, d)),
        )
        if self.kind == "conve":
            kk = c.kernel * c.kernel
            flat = self._cols.shape[0] * c.filters
            p["filters"] = rng.uniform(-1 / np.sqrt(kk), 1 / np.sqrt(kk), (kk, c.filters))
            p["filter_bias"] = np.zeros(c.filters)
            p["fc"] = rng.uniform(-1 / np.sqrt(flat), 1 / np.sqrt(flat), (flat, d))
            p["fc_bias"] = np.zeros(d)
            p["tail_bias"] = np.zeros(self.n_entities)
        return p

    @classmethod
    def zeros(cls, config, n_entities, n_relations):
        model = cls(config, n_entities, n_relations)
        model.params = ParamSet({k: np.zeros_like(v) for k, v in model.params.items()})
        return model

    def _check_ids(self, heads, relations, tails=None):
        for name, ids, bound in (("entity", heads, self.n_entities),
                                 ("relation", relations, self.n_relations),
                                 ("entity", tails, self.n_entities)):
            if ids is None:
                continue
            ids = np.asarray(ids)
            if ids.size and (ids.min() < 0 or ids.max() >= bound):
                raise InvalidArgument(f"unknown {name} id in {ids.tolist()}")

    def query_vector(self, p, heads, relations):
        """Tape-capable map from ``(e_s, r)`` batches to the vector dotted with tails."""
        es = ad.gather_rows(p["entity"], heads)
        rr = ad.gather_rows(p["relation"], relations)
        if self.kind == "distmult":
            return ad.mul(es, rr)
        image = ad.concat([es, rr], axis=-1)  # (B, 2d) == two stacked (h, w) images, row-major
        patches = ad.index_last(image, self._cols)  # (B, P, k*k)
        conv = ad.relu(ad.add(ad.matmul(patches, p["filters"]), p["filter_bias"]))
        flat = ad.reshape(conv, (conv.shape[0], -1))
        return ad.relu(ad.add(ad.matmul(flat, p["fc"]), p["fc_bias"]))

    def logits_all(self, p, heads, relations):
        q = self.query_vector(p, heads, relations)
        out = ad.matmul(q, ad.transpose(p["entity"]))
        if self.kind == "conve":
            out = ad.add(out, p["tail_bias"])
        return out

    def raw_score(self, heads, relations, tails):
        heads, relations, tails = (np.atleast_1d(np.asarray(x, dtype=np.int64))
                                   for x in (heads, relations, tails))
        self._check_ids(heads, relations, tails)
        p = {k: ad.Tensor(v) for k, v in self.params.items()}
        q = self.query_vector(p, heads, relations).data
        raw = np.einsum("bd,bd->b", q, self.params["entity"][tails])
        if self.kind == "conve":
            raw = raw + self.params["tail_bias"][tails]
        return raw

    def score(self, e_s, r, e_o):
        """Probability in (0, 1); vectorised over equal-length id arrays."""
        out = _sigmoid(self.raw_score(e_s, r, e_o))
        return float(out[0]) if np.ndim(e_s) == 0 else out

    def score_all_tails(self, e_s, r):
        heads = np.atleast_1d(np.asarray(e_s, dtype=np.int64))
        rels = np.atleast_1d(np.asarray(r, dtype=np.int64))
        self._check_ids(heads, rels)
        p = {k: ad.Tensor(v) for k, v in self.params.items()}
        out = _sigmoid(self.logits_all(p, heads, rels).data)
        return out[0] if np.ndim(e_s) == 0 else out

    def save(self, path, step=None):
        return save_params(path, self.params, kind="reward", seed=self.config.seed, step=step,
                           extra={"config": asdict(self.config), "n_entities": self.n_entities,
                                  "n_relations": self.n_relations})

    @classmethod
    def load(cls, path):
        params, meta, _ = load_params(path, kind="reward")
        extra = meta["extra"]
        return cls(EmbedConfig(**extra["config"]), extra["n_entities"], extra["n_relations"], params)


_BELOW_ONE = np.nextafter(1.0, 0.0)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep a miss strictly below the exact-hit reward of 1
    return np.clip(out, np.finfo(np.float64).tiny, _BELOW_ONE)


def _bce_loss(model, p, heads, relations, targets):
    logits = model.logits_all(p, heads, relations)
    # mean over entries of softplus(x) - y * x == binary cross-entropy on sigmoid(x)
    return ad.mean(ad.sub(ad.softplus(logits), ad.mul(logits, targets)))


def pretrain(triples, n_entities, n_relations, config: EmbedConfig, history=None) -> EmbedModel:
    """Fit a scorer with 1-to-all binary cross-entropy and label smoothing.

    Callers pass normal-relation training triples only. When ``history`` is a
    list, the mean loss of every epoch is appended to it.
    """
    config.validate()
    triples = list(triples)
    if not triples:
        raise InvalidArgument("cannot pretrain an embedding model on zero triples")
    model = EmbedModel(config, n_entities, n_relations)
    tails: dict[tuple[int, int], set[int]] = {}
    for h, r, t in triples:
        tails.setdefault((h, r), set()).add(t)
    keys = sorted(tails)
    pairs = np.array(keys, dtype=np.int64)
    targets = np.zeros((len(keys), n_entities))
    for i, key in enumerate(keys):
        targets[i, sorted(tails[key])] = 1.0
    ls = config.label_smoothing
    targets = (1.0 - ls) * targets + ls / n_entities

    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(config.lr)
    params = model.params
    for epoch in range(config.epochs):
        order = rng.permutation(len(keys))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            loss, grads = ad.value_and_grad(
                lambda p: _bce_loss(model, p, pairs[batch, 0], pairs[batch, 1], targets[batch]),
                params)
            params = opt.step(params, grads)
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
        if history is not None:
            history.append(epoch_loss)
        log.debug("embed epoch %d loss %.6f", epoch, epoch_loss)
    model.params = params
    return model


def embedding_mrr(model: EmbedModel, queries, known=None) -> float:
    """Filtered MRR of ``model`` ranking every entity as the tail of each query."""
    known = set(known or ())
    rr = []
    for h, r, t in queries:
        scores = model.score_all_tails(h, r)
        gold = scores[t]
        better = np.flatnonzero(scores > gold)
        rank = 1 + sum(1 for e in better if (h, r, int(e)) not in known)
        rr.append(1.0 / rank)
    return float(np.mean(rr))
