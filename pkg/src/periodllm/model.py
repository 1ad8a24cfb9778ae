"""Tiny decoder-only transformer in NumPy with a modality projector.

Pre-LN blocks, fixed sinusoidal positions, tanh-GELU feed-forward, full
reverse-mode gradients. Shapes: (B, S, d) = batch, sequence, model width;
(B, H, S, dh) inside attention.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, SEP, MODAL, UNK = 0, 1, 2, 3, 4, 5
RESERVED = ("<pad>", "<bos>", "<eos>", "<sep>", "<modal>", "<unk>")

CKPT_MAGIC = b"PLLM1"
CKPT_VERSION = 1

_TOKEN_RE = re.compile(r"\w+(?:[-']\w+)*|[^\w\s]")
_NO_SPACE_BEFORE = set(".,?!:;")
_MASK_FILL = -1e9
_GELU_C = math.sqrt(2.0 / math.pi)


class SequenceTooLong(ValueError):
    pass


# -------------------------- vocabulary --------------------------


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


@dataclass
class Vocab:
    itos: list[str] = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        if tuple(self.itos[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocab must start with the reserved tokens")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.itos)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        """Tokens in order of first appearance."""
        v = cls()
        for text in texts:
            for tok in split_words(text):
                v.add(tok)
        return v


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.stoi.get(t, UNK) for t in split_words(text)]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    out = []
    for i in ids:
        tok = vocab.itos[i] if 0 <= i < len(vocab) else RESERVED[UNK]
        if out and tok in _NO_SPACE_BEFORE:
            out[-1] += tok
        else:
            out.append(tok)
    return " ".join(out)


# -------------------------- parameters --------------------------


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    feat_dim: int = 16
    context: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def as_tuple(self) -> tuple[int, ...]:
        return (self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.feat_dim, self.context)


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declared parameter order (also the checkpoint order)."""
    V, d, F, ff = cfg.vocab_size, cfg.d_model, cfg.feat_dim, cfg.d_ff
    shapes = [("tok_emb", (V, d)), ("w_proj", (F, d))]
    for l in range(cfg.n_layers):
        p = f"h{l}."
        shapes += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "wq", (d, d)), (p + "bq", (d,)),
            (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "w1", (d, ff)), (p + "b1", (ff,)),
            (p + "w2", (ff, d)), (p + "b2", (d,)),
        ]
    shapes += [("lnf_g", (d,)), ("lnf_b", (d,)), ("w_out", (d, V)), ("b_out", (V,))]
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


def init_params(cfg: ModelConfig, seed: int, dtype=np.float64, std: float = 0.02) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = rng.normal(0.0, std, size=shape).astype(dtype)
    return params


def sinusoidal_positions(S: int, d: int) -> np.ndarray:
    pos = np.arange(S)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / (10000 ** (2 * (i // 2) / d))
    pe = np.zeros((S, d))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


# -------------------------- batch --------------------------


@dataclass
class Batch:
    tokens: np.ndarray  # (B, S) int
    targets: np.ndarray  # (B, S) int
    mask: np.ndarray  # (B, S) float, 1 on answer targets
    modal: np.ndarray | None = None  # (B, L, F)


def encode_example(question_ids, answer_ids, n_modal: int = 0) -> tuple[list[int], list[int], list[float]]:
    """<bos> <modal>*L question <sep> answer <eos>, shifted into inputs/targets/mask."""
    seq = [BOS] + [MODAL] * n_modal + list(question_ids) + [SEP] + list(answer_ids) + [EOS]
    inputs = seq[:-1]
    targets = seq[1:]
    first_answer = 1 + n_modal + len(question_ids)  # index of SEP in seq
    mask = [1.0 if i >= first_answer else 0.0 for i in range(len(inputs))]
    return inputs, targets, mask


def prompt_ids(question_ids, n_modal: int = 0) -> list[int]:
    return [BOS] + [MODAL] * n_modal + list(question_ids) + [SEP]


def collate(examples, modal=None) -> Batch:
    """Right-pad (inputs, targets, mask) triples into a Batch."""
    S = max(len(e[0]) for e in examples)
    B = len(examples)
    tokens = np.full((B, S), PAD, dtype=np.int64)
    targets = np.full((B, S), PAD, dtype=np.int64)
    mask = np.zeros((B, S))
    for b, (x, y, m) in enumerate(examples):
        tokens[b, : len(x)] = x
        targets[b, : len(y)] = y
        mask[b, : len(m)] = m
    return Batch(tokens, targets, mask, None if modal is None else np.asarray(modal))


# -------------------------- layers --------------------------


def _layernorm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_back(dy, g, cache):
    xhat, inv = cache
    ghat = dy * g
    m1 = ghat.mean(axis=-1, keepdims=True)
    m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
    dx = (ghat - m1 - xhat * m2) * inv
    flat = dy.reshape(-1, dy.shape[-1])
    dg = (flat * xhat.reshape(flat.shape)).sum(axis=0)
    db = flat.sum(axis=0)
    return dx, dg, db


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -------------------------- forward / backward --------------------------


def _modal_slots(tokens: np.ndarray, L: int):
    b_idx, s_idx = np.nonzero(tokens == MODAL)
    counts = np.bincount(b_idx, minlength=tokens.shape[0])
    if np.any(counts != L):
        raise ValueError(f"each example needs exactly {L} <modal> slots, found {counts.tolist()}")
    return b_idx, s_idx


def trunk(params, cfg: ModelConfig, tokens: np.ndarray, modal: np.ndarray | None = None):
    """Everything up to (and including) the final LayerNorm."""
    tokens = np.asarray(tokens)
    B, S = tokens.shape
    if S > cfg.context:
        raise SequenceTooLong(f"sequence length {S} exceeds context window {cfg.context}")
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    cache = {"tokens": tokens, "modal": modal, "layers": []}

    x = params["tok_emb"][tokens]
    if modal is not None:
        modal = np.asarray(modal)
        b_idx, s_idx = _modal_slots(tokens, modal.shape[1])
        hv = modal @ params["w_proj"]
        x[b_idx, s_idx] = hv.reshape(-1, d)
        cache["slots"] = (b_idx, s_idx)
        cache["h_modal"] = hv
    x = x + sinusoidal_positions(S, d)
    causal = np.triu(np.full((S, S), _MASK_FILL), k=1)
    scale = 1.0 / math.sqrt(dh)

    for l in range(cfg.n_layers):
        p = f"h{l}."
        lc = {}
        h, lc["ln1"] = _layernorm(x, params[p + "ln1_g"], params[p + "ln1_b"])
        q = (h @ params[p + "wq"] + params[p + "bq"]).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        k = (h @ params[p + "wk"] + params[p + "bk"]).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        v = (h @ params[p + "wv"] + params[p + "bv"]).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        att = _softmax(q @ k.transpose(0, 1, 3, 2) * scale + causal)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
        x = x + o @ params[p + "wo"] + params[p + "bo"]
        h2, lc["ln2"] = _layernorm(x, params[p + "ln2_g"], params[p + "ln2_b"])
        u = h2 @ params[p + "w1"] + params[p + "b1"]
        f, t = _gelu(u)
        x = x + f @ params[p + "w2"] + params[p + "b2"]
        lc.update(h=h, q=q, k=k, v=v, att=att, o=o, h2=h2, u=u, t=t, f=f)
        cache["layers"].append(lc)

    hf, cache["lnf"] = _layernorm(x, params["lnf_g"], params["lnf_b"])
    cache["hf"] = hf
    return hf, cache


def forward(params, cfg: ModelConfig, batch: Batch, full_logits: bool = True):
    """Logits (B, S, V) and the activation cache for ``loss_and_backward``.

    With ``full_logits=False`` only the rows under the loss mask are projected
    (returned flat, (n_mask, V)); the loss and gradients are unchanged.
    """
    hf, cache = trunk(params, cfg, batch.tokens, batch.modal)
    sel = np.nonzero(np.asarray(batch.mask))
    cache["sel"] = sel
    if full_logits:
        logits = hf @ params["w_out"] + params["b_out"]
        cache["logits_sel"] = logits[sel]
    else:
        logits = hf[sel] @ params["w_out"] + params["b_out"]
        cache["logits_sel"] = logits
    return logits, cache


def loss_and_backward(params, cfg: ModelConfig, batch: Batch, cache: dict):
    """Masked mean NLL of the targets and its exact gradient for every parameter."""
    mask = np.asarray(batch.mask, dtype=np.float64)
    n_mask = mask.sum()
    if n_mask <= 0:
        raise ValueError("loss mask is empty")
    B, S = batch.tokens.shape
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    scale = 1.0 / math.sqrt(dh)

    sel = cache["sel"]
    z = cache["logits_sel"]
    z = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    tgt = batch.targets[sel]
    rows = np.arange(tgt.size)
    w = mask[sel] / n_mask
    loss = float(np.sum(w * (logsum - z[rows, tgt])))

    dz = np.exp(z - logsum[:, None])
    dz[rows, tgt] -= 1.0
    dz *= w[:, None]

    grads = {name: None for name in params}
    hf_sel = cache["hf"][sel]
    grads["w_out"] = hf_sel.T @ dz
    grads["b_out"] = dz.sum(axis=0)
    dhf = np.zeros((B, S, d))
    dhf[sel] = dz @ params["w_out"].T
    dx, grads["lnf_g"], grads["lnf_b"] = _layernorm_back(dhf, params["lnf_g"], cache["lnf"])

    for l in reversed(range(cfg.n_layers)):
        p = f"h{l}."
        lc = cache["layers"][l]
        # feed-forward
        df = dx @ params[p + "w2"].T
        grads[p + "w2"] = lc["f"].reshape(-1, cfg.d_ff).T @ dx.reshape(-1, d)
        grads[p + "b2"] = dx.sum(axis=(0, 1))
        du = _gelu_back(df, lc["u"], lc["t"])
        grads[p + "w1"] = lc["h2"].reshape(-1, d).T @ du.reshape(-1, cfg.d_ff)
        grads[p + "b1"] = du.sum(axis=(0, 1))
        dh2 = du @ params[p + "w1"].T
        dres, grads[p + "ln2_g"], grads[p + "ln2_b"] = _layernorm_back(dh2, params[p + "ln2_g"], lc["ln2"])
        dx = dx + dres
        # attention
        grads[p + "wo"] = lc["o"].reshape(-1, d).T @ dx.reshape(-1, d)
        grads[p + "bo"] = dx.sum(axis=(0, 1))
        do = (dx @ params[p + "wo"].T).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        att, q, k, v = lc["att"], lc["q"], lc["k"], lc["v"]
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        h = lc["h"].reshape(-1, d)
        dh_total = np.zeros((B * S, d))
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dflat = dproj.transpose(0, 2, 1, 3).reshape(-1, d)
            grads[p + "w" + name] = h.T @ dflat
            grads[p + "b" + name] = dflat.sum(axis=0)
            dh_total += dflat @ params[p + "w" + name].T
        dres, grads[p + "ln1_g"], grads[p + "ln1_b"] = _layernorm_back(
            dh_total.reshape(B, S, d), params[p + "ln1_g"], lc["ln1"]
        )
        dx = dx + dres

    tokens = cache["tokens"]
    d_emb = np.zeros_like(params["tok_emb"])
    if cache["modal"] is not None:
        b_idx, s_idx = cache["slots"]
        modal = np.asarray(cache["modal"])
        grads["w_proj"] = modal.reshape(-1, modal.shape[-1]).T @ dx[b_idx, s_idx]
        keep = tokens != MODAL
        np.add.at(d_emb, tokens[keep], dx[keep])
    else:
        grads["w_proj"] = np.zeros_like(params["w_proj"])
        np.add.at(d_emb, tokens.reshape(-1), dx.reshape(-1, d))
    grads["tok_emb"] = d_emb
    return loss, grads


def loss_only(params, cfg: ModelConfig, batch: Batch) -> float:
    logits, _ = forward(params, cfg, batch)
    mask = np.asarray(batch.mask, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, batch.targets[..., None], axis=-1)[..., 0]
    return float(-(picked * mask).sum() / mask.sum())


def generate(params, cfg: ModelConfig, prompt: Sequence[int], modal: np.ndarray | None = None, max_new: int = 32) -> list[int]:
    """Greedy decoding until <eos> or ``max_new`` tokens (the <eos> is not returned)."""
    if len(prompt) > cfg.context:
        raise SequenceTooLong(f"prompt length {len(prompt)} exceeds context window {cfg.context}")
    ids = list(prompt)
    out: list[int] = []
    feats = None if modal is None else np.asarray(modal)[None]
    while len(out) < max_new and len(ids) < cfg.context:
        hf, _ = trunk(params, cfg, np.array([ids]), feats)
        nxt = int(np.argmax(hf[0, -1] @ params["w_out"] + params["b_out"]))
        if nxt == EOS:
            break
        out.append(nxt)
        ids.append(nxt)
    return out


# -------------------------- checkpoint --------------------------


def save_checkpoint(
    path: str | Path,
    cfg: ModelConfig,
    vocab: Vocab,
    params: dict[str, np.ndarray],
    float_bytes: int = 4,
    opt_state: tuple[int, dict, dict] | None = None,
) -> None:
    """PLLM1 layout: magic, version, float width, config block, vocab table,
    tensors in declared order, optional Adam (step, m, v) section."""
    if float_bytes not in (4, 8):
        raise ValueError("float_bytes must be 4 or 8")
    dt = np.dtype("<f4" if float_bytes == 4 else "<f8")
    if len(vocab) != cfg.vocab_size:
        raise ValueError("vocab size does not match config")
    chunks = [CKPT_MAGIC, struct.pack("<HB", CKPT_VERSION, float_bytes), struct.pack("<7I", *cfg.as_tuple())]
    chunks.append(struct.pack("<I", len(vocab)))
    for tok in vocab.itos:
        raw = tok.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
    names = [n for n, _ in param_shapes(cfg)]
    for n in names:
        chunks.append(np.ascontiguousarray(params[n], dtype=dt).tobytes())
    if opt_state is None:
        chunks.append(b"\0")
    else:
        step, m, v = opt_state
        chunks.append(b"\1" + struct.pack("<Q", step))
        for table in (m, v):
            for n in names:
                chunks.append(np.ascontiguousarray(table[n], dtype=dt).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path):
    """Returns (cfg, vocab, params, opt_state or None); tensors come back as float64."""
    raw = Path(path).read_bytes()
    if raw[:5] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a PLLM1 checkpoint")
    off = 5
    version, width = struct.unpack_from("<HB", raw, off)
    off += 3
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = ModelConfig(*struct.unpack_from("<7I", raw, off))
    off += 28
    (nv,) = struct.unpack_from("<I", raw, off)
    off += 4
    itos = []
    for _ in range(nv):
        (n,) = struct.unpack_from("<H", raw, off)
        off += 2
        itos.append(raw[off : off + n].decode("utf-8"))
        off += n
    dt = np.dtype("<f4" if width == 4 else "<f8")

    def read_table():
        nonlocal off
        table = {}
        for name, shape in param_shapes(cfg):
            count = int(np.prod(shape))
            table[name] = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(shape).astype(np.float64)
            off += count * dt.itemsize
        return table

    params = read_table()
    has_opt = raw[off]
    off += 1
    opt_state = None
    if has_opt:
        (step,) = struct.unpack_from("<Q", raw, off)
        off += 8
        m = read_table()
        v = read_table()
        opt_state = (step, m, v)
    return cfg, Vocab(itos), params, opt_state
