"""The bi-directional recurrent network.

Three variants share one implementation:

* ``rnn``    -- plain recurrent language model (state ``s`` only);
* ``rnn_if`` -- visual features feed the whole word-context state ``s``;
* ``full``   -- visual features feed only the lower half of ``s``, and a
  second recurrent state ``u``, driven by words alone, reconstructs the
  visual features at every step. The word layer is the only junction
  between the two halves, so one trained model decomposes into a sentence
  generator (features known) and a feature reconstructor (words known).

The next-word distribution is class-factorized, P(w) = P(class(w)) *
P(w | class(w)), with both the class and the within-class logits fed by
``s``, ``u`` and hashed n-gram (max-entropy) feature tables.
"""

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from .numkit import sigmoid_clipped, softmax, _MASK64

VARIANTS = ("rnn", "rnn_if", "full")

_ME_CLASS_SALT = 0xC1A55F00DD15EA5E
_ME_WORD_SALT = 0x57A7EC0FFEE0B1A5


def _hash_ngram(salt, order, history):
    """Deterministic 64-bit hash of an n-gram context (independent of
    PYTHONHASHSEED); ``history`` holds the order-1 preceding token ids."""
    h = (salt * 0x9E3779B97F4A7C15 + order) & _MASK64
    for tid in history:
        h = ((h ^ (tid + 0x9E3779B97F4A7C15)) * 0xBF58476D1CE4E5B9) & _MASK64
        h ^= h >> 29
    return h


@dataclass
class ModelDims:
    """Architecture hyperparameters shared by params, state and training."""

    vocab_size: int
    class_count: int
    v_dim: int = 0
    s_dim: int = 100
    u_dim: int = 100
    maxent_order: int = 3
    maxent_hash_size: int = 1 << 20
    sigmoid_clip: float = 50.0
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.vocab_size < 1 or not 1 <= self.class_count <= self.vocab_size:
            raise ValueError("need 1 <= class_count <= vocab_size")
        if self.variant == "full" and self.s_dim % 2 != 0:
            raise ValueError("s_dim must be even for the full variant (half connection)")
        if self.variant != "rnn" and self.v_dim < 1:
            raise ValueError("v_dim must be >= 1 when visual features are used")
        if self.maxent_order < 0:
            raise ValueError("maxent_order must be >= 0")
        if self.maxent_order > 0 and self.maxent_hash_size < 1:
            raise ValueError("maxent_hash_size must be >= 1")
        if self.sigmoid_clip <= 0:
            raise ValueError("sigmoid_clip must be positive")

    @property
    def uses_v(self):
        return self.variant in ("rnn_if", "full")

    @property
    def uses_u(self):
        return self.variant == "full"

    @property
    def vs_connected_rows(self):
        """Rows of W_vs that carry weight: all of s for rnn_if, the lower
        half for full (the upper half specializes on text)."""
        return self.s_dim if self.variant == "rnn_if" else self.s_dim // 2


# Weights updated after every word during training; the rest accumulate
# over a sentence and update once at its end.
ONLINE_BLOCKS = frozenset({"W_sc", "W_uc", "W_sw", "W_uw", "b_c", "b_w",
                           "me_class", "me_word"})


def block_shapes(dims):
    """Ordered (name, shape) list of the parameter blocks a variant owns."""
    v, c, s, u, d = (dims.vocab_size, dims.class_count, dims.s_dim,
                     dims.u_dim, dims.v_dim)
    shapes = [
        ("W_ws", (s, v)),
        ("W_ss", (s, s)),
        ("b_s", (s,)),
        ("W_sc", (c, s)),
        ("W_sw", (v, s)),
        ("b_c", (c,)),
        ("b_w", (v,)),
    ]
    if dims.uses_v:
        shapes.append(("W_vs", (s, d)))
    if dims.uses_u:
        shapes += [
            ("W_wu", (u, v)),
            ("W_uu", (u, u)),
            ("b_u", (u,)),
            ("u0", (u,)),
            ("W_uc", (c, u)),
            ("W_uw", (v, u)),
            ("W_uv", (d, u)),
            ("b_v", (d,)),
        ]
    if dims.maxent_order > 0:
        shapes += [("me_class", (dims.maxent_hash_size,)),
                   ("me_word", (dims.maxent_hash_size,))]
    return shapes


class ModelParams:
    """All weight blocks of one model as float64 arrays.

    Gradient accumulators use the same container (``zeros_like``); blocks
    are reachable both as attributes and through ``named_blocks``.
    """

    def __init__(self, dims, blocks, names=None):
        self.dims = dims
        shapes = dict(block_shapes(dims))
        self._names = list(shapes) if names is None else list(names)
        for name in self._names:
            arr = blocks[name]
            if arr.shape != shapes[name]:
                raise ValueError(f"block {name}: expected shape {shapes[name]}, got {arr.shape}")
            setattr(self, name, arr)

    @classmethod
    def zeros(cls, dims, names=None):
        shapes = dict(block_shapes(dims))
        keep = list(shapes) if names is None else list(names)
        return cls(dims, {name: np.zeros(shapes[name]) for name in keep}, names=keep)

    def zeros_like(self, names=None):
        return ModelParams.zeros(self.dims, names=names)

    def named_blocks(self):
        for name in self._names:
            yield name, getattr(self, name)

    def copy(self):
        return ModelParams(self.dims, {n: a.copy() for n, a in self.named_blocks()})

    def apply_vs_mask(self):
        """Zero the text-half rows of W_vs (full variant only)."""
        if self.dims.variant == "full":
            self.W_vs[self.dims.vs_connected_rows:, :] = 0.0

    def allclose(self, other, **kw):
        return all(np.allclose(a, getattr(other, n), **kw) for n, a in self.named_blocks())


def init_params(dims, rng):
    """Uniform [-0.1, 0.1] weights, zero biases, zero u0, zero max-entropy
    tables; the masked W_vs rows are zeroed. Deterministic given the seed."""
    blocks = {}
    for name, shape in block_shapes(dims):
        if name.startswith("W_"):
            blocks[name] = rng.uniform(-0.1, 0.1, shape)
        else:
            blocks[name] = np.zeros(shape)
    params = ModelParams(dims, blocks)
    params.apply_vs_mask()
    return params


@dataclass
class ModelState:
    """Recurrent activations plus the short token history feeding the
    max-entropy features. ``u`` is None for variants without visual memory."""

    s: np.ndarray
    u: np.ndarray
    context: tuple


@dataclass
class StepOutput:
    word_dist: np.ndarray  # (vocab_size,), sums to 1
    recon: np.ndarray      # (v_dim,) in (0,1), or None without u


@dataclass
class StepLoss:
    word_nll: float
    recon_loss: float
    joint: float


def reset_state(params):
    """Sentence-boundary state: neutral s, u at its learned prior, empty
    n-gram history."""
    dims = params.dims
    s = np.full(dims.s_dim, 0.5)
    u = sigmoid_clipped(params.u0, dims.sigmoid_clip) if dims.uses_u else None
    return ModelState(s=s, u=u, context=())


def shift_context(dims, context, token_id):
    """Append a token to the max-entropy history, keeping order-1 entries."""
    if dims.maxent_order <= 1:
        return ()
    return (context + (token_id,))[-(dims.maxent_order - 1):]


def maxent_bases(dims, context):
    """(order, class_base, word_base) for each feature order whose history
    is available; order k uses the k-1 most recent tokens."""
    if dims.maxent_order == 0:
        return []
    bases = []
    h = dims.maxent_hash_size
    for k in range(1, dims.maxent_order + 1):
        if len(context) < k - 1:
            break
        hist = context[len(context) - (k - 1):]
        bases.append((k,
                      _hash_ngram(_ME_CLASS_SALT, k, hist) % h,
                      _hash_ngram(_ME_WORD_SALT, k, hist) % h))
    return bases


def _advance(params, s, u, w_prev, v):
    """One recurrence update; returns new activations plus pre-activations
    (needed for exact derivatives of the clipped sigmoid)."""
    dims = params.dims
    pre_s = params.W_ws[:, w_prev] + params.W_ss @ s + params.b_s
    if dims.uses_v:
        pre_s = pre_s + params.W_vs @ v
    s2 = sigmoid_clipped(pre_s, dims.sigmoid_clip)
    if dims.uses_u:
        pre_u = params.W_wu[:, w_prev] + params.W_uu @ u + params.b_u
        u2 = sigmoid_clipped(pre_u, dims.sigmoid_clip)
        pre_r = params.W_uv @ u2 + params.b_v
        recon = sigmoid_clipped(pre_r, dims.sigmoid_clip)
    else:
        pre_u = u2 = pre_r = recon = None
    return s2, u2, recon, pre_s, pre_u, pre_r


def class_logits(params, s, u, bases):
    dims = params.dims
    z = params.W_sc @ s + params.b_c
    if dims.uses_u:
        z = z + params.W_uc @ u
    for _, cbase, _ in bases:
        idx = (cbase + np.arange(dims.class_count)) % dims.maxent_hash_size
        z = z + params.me_class[idx]
    return z


def member_logits(params, s, u, bases, lo, hi):
    """Within-class logits for the id range [lo, hi)."""
    dims = params.dims
    z = params.W_sw[lo:hi] @ s + params.b_w[lo:hi]
    if dims.uses_u:
        z = z + params.W_uw[lo:hi] @ u
    for _, _, wbase in bases:
        idx = (wbase + np.arange(lo, hi)) % dims.maxent_hash_size
        z = z + params.me_word[idx]
    return z


def word_distribution(params, s, u, context, vocab_classes):
    """Full class-factorized next-word distribution over the vocabulary.

    ``vocab_classes`` supplies the contiguous class ranges (a
    ClassedVocabulary or anything with ``class_bounds``).
    """
    dims = params.dims
    bases = maxent_bases(dims, context)
    q = softmax(class_logits(params, s, u, bases))
    out = np.empty(dims.vocab_size)
    lo = 0
    for c, hi in enumerate(np.asarray(vocab_classes.class_bounds, dtype=np.int64)):
        hi = int(hi)
        out[lo:hi] = q[c] * softmax(member_logits(params, s, u, bases, lo, hi))
        lo = hi
    return out


def step(params, state, w_prev, v, vocab_classes):
    """One forward time step: consume ``w_prev``, emit the next-word
    distribution and (full variant) the running feature reconstruction."""
    dims = params.dims
    if not 0 <= w_prev < dims.vocab_size:
        raise ValueError(f"token id {w_prev} out of range [0, {dims.vocab_size})")
    if dims.uses_v:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (dims.v_dim,):
            raise ValueError(f"feature vector must have dim {dims.v_dim}")
    s2, u2, recon, _, _, _ = _advance(params, state.s, state.u, w_prev, v)
    context = shift_context(dims, state.context, w_prev)
    dist = word_distribution(params, s2, u2, context, vocab_classes)
    return (ModelState(s=s2, u=u2, context=context),
            StepOutput(word_dist=dist, recon=recon))


def recon_cross_entropy(v, recon):
    """Elementwise cross-entropy between target features (in [0,1]) and the
    sigmoid reconstruction (strictly inside (0,1))."""
    return float(-(v * np.log(recon) + (1.0 - v) * np.log(1.0 - recon)).sum())


def recon_squared_error(v, recon):
    return float(((recon - v) ** 2).sum())


@dataclass
class SentenceTrace:
    """Everything the backward pass needs from one sentence forward pass."""

    inputs: list        # token fed at each step (BOS = <eos>)
    targets: list       # token predicted at each step
    s: list             # states s_0 .. s_T
    u: list             # states u_0 .. u_T (empty-u variants: [None]* )
    pre_s: list         # pre-activations per step (index 0 -> step 1)
    pre_u: list
    pre_r: list
    recon: list
    bases: list         # maxent bases active at each step
    class_probs: list   # softmax over classes per step
    class_ids: list     # class of the target per step
    member_probs: list  # softmax over the target's class members per step
    member_range: list  # (lo, hi) of the target's class per step
    word_nll: list
    recon_loss: list

    @classmethod
    def empty(cls, state):
        return cls([], [], [state.s], [state.u], [], [], [], [], [], [], [], [], [], [], [])


def sentence_forward(params, v, sent, vocab_classes, recon_kind="ce"):
    """Run a sentence from a fresh state, scoring each target token through
    its class and member softmax only (no full-vocabulary distribution).
    """
    dims = params.dims
    state = reset_state(params)
    bounds = np.asarray(vocab_classes.class_bounds, dtype=np.int64)
    tr = SentenceTrace.empty(state)
    context = state.context
    s, u = state.s, state.u
    eos = sent.ids[-1]
    prev = eos  # begin-of-sentence pseudo-token
    for target in sent.ids:
        s, u, recon, pre_s, pre_u, pre_r = _advance(params, s, u, prev, v)
        context = shift_context(dims, context, prev)
        bases = maxent_bases(dims, context)
        q = softmax(class_logits(params, s, u, bases))
        g = int(np.searchsorted(bounds, target, side="right"))
        lo = 0 if g == 0 else int(bounds[g - 1])
        hi = int(bounds[g])
        p = softmax(member_logits(params, s, u, bases, lo, hi))
        nll = -float(np.log(q[g])) - float(np.log(p[target - lo]))
        if dims.uses_u:
            rl = (recon_cross_entropy(v, recon) if recon_kind == "ce"
                  else recon_squared_error(v, recon))
        else:
            rl = 0.0
        tr.inputs.append(prev)
        tr.targets.append(target)
        tr.s.append(s)
        tr.u.append(u)
        tr.pre_s.append(pre_s)
        tr.pre_u.append(pre_u)
        tr.pre_r.append(pre_r)
        tr.recon.append(recon)
        tr.bases.append(bases)
        tr.class_probs.append(q)
        tr.class_ids.append(g)
        tr.member_probs.append(p)
        tr.member_range.append((lo, hi))
        tr.word_nll.append(nll)
        tr.recon_loss.append(rl)
        prev = target
    return tr


def sentence_loss(params, v, sent, lam_recon, vocab_classes, recon_kind="ce"):
    """Joint loss of one sentence from a fresh state.

    Returns the total and the per-step list; each step contributes the
    negative log-likelihood of its target word plus ``lam_recon`` times the
    feature reconstruction error (full variant only).
    """
    if not sent.ids or sent.ids[-1] != vocab_classes.eos_id:
        raise ValueError("sentence must be nonempty and end with <eos>")
    tr = sentence_forward(params, v, sent, vocab_classes, recon_kind)
    steps = [StepLoss(word_nll=w, recon_loss=r, joint=w + lam_recon * r)
             for w, r in zip(tr.word_nll, tr.recon_loss)]
    total = StepLoss(
        word_nll=sum(s.word_nll for s in steps),
        recon_loss=sum(s.recon_loss for s in steps),
        joint=sum(s.joint for s in steps),
    )
    return total, steps


CHECKPOINT_MAGIC = b"BICAP-CKPT-v1\n"


def save_checkpoint(path, params, vocab, lam_recon, seed_lineage=None):
    """Write a checkpoint: magic, big-endian u64 metadata length, metadata
    JSON (dims, vocabulary, hash, loss weight, seed lineage, block index),
    then the raw little-endian float64 block payloads. Byte-stable for
    identical inputs and bit-exact on round trip."""
    blocks = []
    offset = 0
    payload = []
    for name, arr in params.named_blocks():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        blocks.append({"name": name, "shape": list(arr.shape), "dtype": "<f8",
                       "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    meta = {
        "format": "bicap-checkpoint",
        "version": 1,
        "dims": asdict(params.dims),
        "lambda_recon": float(lam_recon),
        "seed_lineage": seed_lineage or {},
        "vocab": vocab.to_dict(),
        "vocab_hash": vocab.content_hash(),
        "blocks": blocks,
    }
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(head).to_bytes(8, "big"))
        fh.write(head)
        for raw in payload:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (params, vocab, metadata dict)."""
    from .corpus import ClassedVocabulary

    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        head_len = int.from_bytes(fh.read(8), "big")
        meta = json.loads(fh.read(head_len).decode("utf-8"))
        payload = fh.read()
    dims = ModelDims(**meta["dims"])
    blocks = {}
    for b in meta["blocks"]:
        raw = payload[b["offset"]:b["offset"] + b["nbytes"]]
        arr = np.frombuffer(raw, dtype=b["dtype"]).reshape(b["shape"]).astype(np.float64)
        blocks[b["name"]] = arr
    params = ModelParams(dims, blocks)
    vocab = ClassedVocabulary.from_dict(meta["vocab"])
    if vocab.content_hash() != meta["vocab_hash"]:
        raise ValueError(f"{path}: vocabulary hash mismatch")
    return params, vocab, meta
