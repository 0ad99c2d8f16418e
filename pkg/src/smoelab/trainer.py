"""Toy transformer-expert stack: model assembly, seeded training, checkpoints.

Blocks are pre-normalized with residual connections: attention over the
normalized stream, then one of the three expert combiners on the normalized
post-attention stream. The attention-aware combiner reuses the block's own
attention matrices and forms its posterior from that sub-layer's input and
raw output. Everything is driven by a single 64-bit seed: initialization,
batch order, and attack positions (a separate sub-stream, so clean and
attacked evaluations stay paired).

Checkpoint container: one file holding a JSON manifest (config, epoch,
scalars, tensor directory with byte offsets) followed by the concatenated
little-endian float64 row-major tensor payloads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np

from . import attention as attnmod
from . import data as datamod
from . import metrics as metricsmod
from . import moe as moemod
from . import numerics as nm
from . import routing
from .errors import ConfigError, ParameterError, TrainingFailure, ValidationError
from .numerics import Tensor

VARIANTS = ("baseline", "similarity_aware", "attention_aware")
TASKS = ("lm", "synthetic")
TAU_SCHEDULES = ("constant", "increasing", "decreasing")

CHECKPOINT_FORMAT = "smoelab-checkpoint-v1"


@dataclass
class ModelConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 4
    d_qk: int = 16
    experts: int = 8
    top_k: int = 2
    d_ff: int = 64
    router_kind: str = "softmax_linear"
    combiner: str = "baseline"
    tau: float = 1.0
    sigma: float = 1.0
    head_mode: str = "min_entropy_only"
    similarity_trainable: bool = False
    mask_mode: str = "causal"
    vocab_size: int = 0
    max_seq_len: int = 64
    task: str = "lm"
    n_classes: int = 0

    def validate(self) -> None:
        if self.top_k > self.experts:
            raise ValidationError(f"top_k {self.top_k} exceeds expert count {self.experts}")
        if self.combiner not in VARIANTS:
            raise ValidationError(f"unknown combiner {self.combiner!r}")
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}")
        if self.router_kind not in routing.RouterParams.KINDS:
            raise ValidationError(f"unknown router kind {self.router_kind!r}")
        if self.mask_mode not in attnmod.MASK_MODES:
            raise ValidationError(f"unknown mask mode {self.mask_mode!r}")
        if self.task == "lm" and self.vocab_size < 4:
            raise ValidationError("LM mode needs a vocabulary (load the corpus first)")
        if self.task == "synthetic" and self.n_classes < 1:
            raise ValidationError("synthetic mode needs n_classes")
        for name in ("layers", "dim", "heads", "d_qk", "experts", "top_k", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.tau <= 0 or self.sigma <= 0:
            raise ValidationError("tau and sigma must be positive")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    seq_len: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    tau_schedule: str = "constant"
    tau_start: float = 1.0
    tau_end: float = 1.0
    eval_tokens: int = 1024
    attack_fraction: float = 0.2
    max_train_tokens: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.seq_len < 1:
            raise ValidationError("bad training sizes")
        if self.tau_schedule not in TAU_SCHEDULES:
            raise ValidationError(f"unknown tau schedule {self.tau_schedule!r}")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ParameterError("tau schedule endpoints must be positive")


def apply_tau_schedule(tcfg: TrainConfig, epoch: int) -> float:
    """Similarity temperature for a 0-based training epoch.

    Non-constant schedules interpolate geometrically from tau_start at epoch 0
    to tau_end at the final epoch.
    """
    if tcfg.tau_start <= 0 or tcfg.tau_end <= 0:
        raise ParameterError("tau schedule endpoints must be positive")
    if tcfg.tau_schedule == "constant" or tcfg.epochs <= 1:
        return tcfg.tau_start
    frac = min(max(epoch, 0), tcfg.epochs - 1) / (tcfg.epochs - 1)
    return tcfg.tau_start * (tcfg.tau_end / tcfg.tau_start) ** frac


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def _sub_seed(seed: int, tag: int) -> int:
    return seed * 1000 + tag


@dataclass
class Block:
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    attn: attnmod.AttentionParams
    router: routing.RouterParams
    experts: moemod.ExpertParams
    w_s: Tensor


class Model:
    """The assembled stack; parameters are reachable by stable names."""

    def __init__(self, cfg: ModelConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.current_tau = cfg.tau
        d = cfg.dim

        def ones(n):
            return Tensor(np.ones(n), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        if cfg.task == "lm":
            emb_rng = nm.make_rng(_sub_seed(seed, 1))
            self.embed = Tensor(emb_rng.normal(0.0, 0.02, (cfg.vocab_size, d)), requires_grad=True)
            pos_rng = nm.make_rng(_sub_seed(seed, 2))
            self.pos = Tensor(pos_rng.normal(0.0, 0.02, (cfg.max_seq_len, d)), requires_grad=True)
            out_dim = cfg.vocab_size
        else:
            self.embed = None
            self.pos = None
            out_dim = cfg.n_classes

        head_rng = nm.make_rng(_sub_seed(seed, 3))
        self.head_w = Tensor(head_rng.normal(0.0, d ** -0.5, (out_dim, d)), requires_grad=True)
        self.head_b = zeros(out_dim)
        self.final_gain = ones(d)
        self.final_bias = zeros(d)

        self.blocks: list[Block] = []
        for layer in range(cfg.layers):
            if cfg.router_kind == "softmax_linear":
                router = routing.make_linear_router(d, cfg.experts, _sub_seed(seed, 11 + 10 * layer))
            elif cfg.router_kind == "cosine":
                router = routing.make_cosine_router(d, cfg.experts, _sub_seed(seed, 11 + 10 * layer))
            else:
                router = routing.make_frozen_router(d, cfg.experts, _sub_seed(seed, 11 + 10 * layer))
            w_s = Tensor(np.eye(d), requires_grad=cfg.similarity_trainable)
            self.blocks.append(Block(
                ln1_gain=ones(d), ln1_bias=zeros(d),
                ln2_gain=ones(d), ln2_bias=zeros(d),
                attn=attnmod.make_attention_params(d, cfg.d_qk, cfg.heads,
                                                   _sub_seed(seed, 10 + 10 * layer)),
                router=router,
                experts=moemod.make_expert_params(d, cfg.d_ff, cfg.experts,
                                                  _sub_seed(seed, 12 + 10 * layer)),
                w_s=w_s,
            ))

    # -- parameter registry ------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        if self.embed is not None:
            out.append(("embed", self.embed))
            out.append(("pos", self.pos))
        out += [("head_w", self.head_w), ("head_b", self.head_b),
                ("final_gain", self.final_gain), ("final_bias", self.final_bias)]
        for i, blk in enumerate(self.blocks):
            prefix = f"block{i}."
            out += [(prefix + "ln1_gain", blk.ln1_gain), (prefix + "ln1_bias", blk.ln1_bias),
                    (prefix + "ln2_gain", blk.ln2_gain), (prefix + "ln2_bias", blk.ln2_bias)]
            for h in range(self.cfg.heads):
                out += [(prefix + f"attn.wq{h}", blk.attn.w_query[h]),
                        (prefix + f"attn.wk{h}", blk.attn.w_key[h]),
                        (prefix + f"attn.wm{h}", blk.attn.w_merged[h])]
            out += [(prefix + "router.w", blk.router.w), (prefix + "router.b", blk.router.b)]
            if blk.router.kind == "cosine":
                out += [(prefix + "router.proj", blk.router.projection),
                        (prefix + "router.tau_c", blk.router.tau_c)]
            for e in range(self.cfg.experts):
                out += [(prefix + f"expert{e}.w1", blk.experts.w1[e]),
                        (prefix + f"expert{e}.b1", blk.experts.b1[e]),
                        (prefix + f"expert{e}.w2", blk.experts.w2[e]),
                        (prefix + f"expert{e}.b2", blk.experts.b2[e])]
            out.append((prefix + "w_s", blk.w_s))
        return out

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        frozen: set[int] = set()
        for blk in self.blocks:
            if not blk.router.trainable:
                frozen.add(id(blk.router.w))
                frozen.add(id(blk.router.b))
            if not blk.w_s.requires_grad:
                frozen.add(id(blk.w_s))
        return [(n, p) for n, p in self.named_parameters() if id(p) not in frozen]

    def parameter_count(self) -> int:
        return sum(p.array.size for _, p in self.named_parameters())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise ValidationError(f"checkpoint is missing tensor {name!r}")
            if state[name].shape != p.array.shape:
                raise ValidationError(f"shape mismatch for {name!r}")
            p.array = np.ascontiguousarray(state[name], dtype=np.float64)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.array.copy() for name, p in self.named_parameters()}

    # -- forward -----------------------------------------------------------

    def set_tau(self, tau: float) -> None:
        if tau <= 0:
            raise ParameterError("tau must be positive")
        self.current_tau = tau

    def forward(self, batch) -> tuple[Tensor, list[moemod.RoutingCapture]]:
        """Logits over the vocabulary (LM) or classes (synthetic), plus the
        per-layer routing captures for the batch."""
        cfg = self.cfg
        if cfg.task == "lm":
            ids = np.asarray(batch, dtype=np.int64)
            if ids.ndim != 2:
                raise ValidationError("LM batch must be (batch, positions)")
            if ids.shape[1] > cfg.max_seq_len:
                raise ValidationError("sequence longer than max_seq_len")
            x = nm.add(nm.take_rows(self.embed, ids),
                       nm.take_rows(self.pos, np.arange(ids.shape[1])))
        else:
            x = batch if isinstance(batch, Tensor) else Tensor(batch)
            if x.ndim != 3 or x.shape[-1] != cfg.dim:
                raise ValidationError("synthetic batch must be (batch, positions, dim)")

        captures = []
        for blk in self.blocks:
            x1 = nm.layer_norm_rows(x, blk.ln1_gain, blk.ln1_bias)
            attn_out = attnmod.mha_forward(x1, blk.attn, cfg.mask_mode)
            x2 = nm.add(x, attn_out.u)
            u = nm.layer_norm_rows(x2, blk.ln2_gain, blk.ln2_bias)

            if cfg.combiner == "baseline":
                y, capture = moemod.smoe_forward(u, blk.router, blk.experts, cfg.top_k)
            elif cfg.combiner == "similarity_aware":
                sim_cfg = moemod.SimilarityConfig(w_s=blk.w_s, tau=self.current_tau,
                                                  mask_mode=cfg.mask_mode)
                y, capture = moemod.similarity_aware_smoe(u, blk.router, blk.experts,
                                                          sim_cfg, cfg.top_k)
            else:
                pcfg = moemod.PosteriorConfig(sigma=cfg.sigma, head_mode=cfg.head_mode)
                r = routing.gate_rows(u, blk.router)
                # the posterior comes from this block's own attention pass:
                # prior matrices from x1, likelihood of the raw attention output
                mixed, h_star = moemod.posterior_mixed_scores(attn_out, x1, blk.attn, r, pcfg)
                flat_u, shape = moemod._flatten_tokens(u)
                flat_p, _ = moemod._flatten_tokens(mixed.p)
                weights, idx = routing.topk_rows(flat_p, cfg.top_k)
                combined = moemod._sparse_combine(flat_u, weights, idx, blk.experts)
                y = nm.reshape(combined, shape)
                capture = moemod.RoutingCapture(scores=flat_p.array.copy(),
                                                selected=idx.copy(), h_star=h_star)
            x = nm.add(x2, y)
            captures.append(capture)

        xf = nm.layer_norm_rows(x, self.final_gain, self.final_bias)
        logits = nm.add(nm.matmul(xf, nm.transpose(self.head_w)), self.head_b)
        return logits, captures


def build_model(cfg: ModelConfig, seed: int) -> Model:
    return Model(cfg, seed)


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a config (matches the registry)."""
    d = cfg.dim
    per_layer = 4 * d  # two layer norms
    per_layer += cfg.heads * (2 * cfg.d_qk * d + d * d)
    per_layer += cfg.experts * d + cfg.experts
    if cfg.router_kind == "cosine":
        dp = max(1, d // 4)
        per_layer += cfg.experts * dp - cfg.experts * d  # router rows live in d'
        per_layer += dp * d + 1
    per_layer += cfg.experts * (cfg.d_ff * d + cfg.d_ff + d * cfg.d_ff + d)
    per_layer += d * d  # similarity map
    total = cfg.layers * per_layer + 2 * d
    out_dim = cfg.vocab_size if cfg.task == "lm" else cfg.n_classes
    total += out_dim * d + out_dim
    if cfg.task == "lm":
        total += cfg.vocab_size * d + cfg.max_seq_len * d
    return total


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.array) for name, p in params}
        self.v = {name: np.zeros_like(p.array) for name, p in params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.array = p.array - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grads(self) -> None:
        for _, p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    epoch: int
    params: dict[str, np.ndarray]
    record: metricsmod.RoutingRecord
    scalars: dict[str, float] = field(default_factory=dict)


def _lm_windows(ids: np.ndarray, seq_len: int) -> np.ndarray:
    n_win = (ids.size - 1) // seq_len
    if n_win < 1:
        raise ValidationError("not enough tokens for one training window")
    return np.stack([ids[i * seq_len: i * seq_len + seq_len + 1] for i in range(n_win)])


def _synthetic_sequences(task: datamod.SyntheticClusterTask, seq_len: int):
    n_seq = task.tokens.shape[0] // seq_len
    if n_seq < 1:
        raise ValidationError("not enough tokens for one sequence")
    d = task.tokens.shape[1]
    xs = task.tokens[:n_seq * seq_len].reshape(n_seq, seq_len, d)
    ys = task.labels[:n_seq * seq_len].reshape(n_seq, seq_len)
    return xs, ys


def _capture_record(model: Model, eval_inputs, epoch: int) -> metricsmod.RoutingRecord:
    logits, captures = model.forward(eval_inputs)
    n_tokens = captures[0].scores.shape[0]
    return metricsmod.RoutingRecord(epoch=epoch, token_keys=np.arange(n_tokens), layers=captures)


def _batch_loss(model: Model, inputs, targets) -> Tensor:
    logits, _ = model.forward(inputs)
    flat = nm.reshape(logits, (logits.shape[0] * logits.shape[1], logits.shape[2]))
    return nm.cross_entropy_mean(flat, np.asarray(targets).reshape(-1))


def train(model: Model, dataset, tcfg: TrainConfig, out_dir=None) -> list[Checkpoint]:
    """Seeded training with a frozen evaluation set and per-epoch checkpoints.

    `dataset` is a TokenCorpus in LM mode or a SyntheticClusterTask in
    synthetic mode. Routing is recorded on the same evaluation tokens at
    every checkpoint, including the initial one.
    """
    tcfg.validate()
    cfg = model.cfg
    if cfg.task == "lm":
        train_windows = _lm_windows(np.asarray(dataset.train_ids), tcfg.seq_len)
        if tcfg.max_train_tokens > 0:
            keep = max(1, tcfg.max_train_tokens // tcfg.seq_len)
            train_windows = train_windows[:keep]
        eval_source = dataset.valid_ids if dataset.valid_ids.size > tcfg.seq_len else dataset.train_ids
        eval_windows = _lm_windows(np.asarray(eval_source), tcfg.seq_len)
        n_eval = min(max(1, tcfg.eval_tokens // tcfg.seq_len), eval_windows.shape[0])
        eval_windows = eval_windows[:n_eval]
        eval_inputs, eval_targets = eval_windows[:, :-1], eval_windows[:, 1:]
    else:
        xs, ys = _synthetic_sequences(dataset, tcfg.seq_len)
        train_xs, train_ys = xs, ys
        n_eval = min(max(1, tcfg.eval_tokens // tcfg.seq_len), xs.shape[0])
        eval_inputs, eval_targets = xs[:n_eval], ys[:n_eval]

    opt = Adam(model.trainable_parameters(), tcfg.learning_rate,
               tcfg.beta1, tcfg.beta2, tcfg.adam_eps)

    def evaluate_split() -> tuple[float, float]:
        loss = _batch_loss(model, eval_inputs, eval_targets).item()
        return loss, float(np.exp(loss))

    checkpoints: list[Checkpoint] = []

    def snapshot(epoch: int, train_loss: float | None) -> None:
        if tcfg.tau_schedule != "constant":
            model.set_tau(apply_tau_schedule(tcfg, max(epoch - 1, 0)))
        record = _capture_record(model, eval_inputs, epoch)
        valid_loss, valid_ppl = evaluate_split()
        scalars = {"valid_loss": valid_loss, "valid_ppl": valid_ppl}
        if train_loss is not None:
            scalars["train_loss"] = train_loss
        ck = Checkpoint(epoch=epoch, params=model.state_dict(), record=record,
                        scalars=scalars)
        checkpoints.append(ck)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / f"checkpoint_ep{epoch}.bin", model.cfg, ck)

    snapshot(0, None)

    for epoch in range(tcfg.epochs):
        # a constant schedule leaves the model's configured temperature alone;
        # only the varying schedules drive it per epoch
        if tcfg.tau_schedule != "constant":
            model.set_tau(apply_tau_schedule(tcfg, epoch))
        order = nm.make_rng(tcfg.seed, stream=2000 + epoch).permutation(
            train_windows.shape[0] if cfg.task == "lm" else train_xs.shape[0])
        losses = []
        for start in range(0, order.size, tcfg.batch_size):
            sel = order[start:start + tcfg.batch_size]
            if cfg.task == "lm":
                batch = train_windows[sel]
                inputs, targets = batch[:, :-1], batch[:, 1:]
            else:
                inputs, targets = train_xs[sel], train_ys[sel]
            opt.zero_grads()
            try:
                loss = _batch_loss(model, inputs, targets)
                value = loss.item()
                if not np.isfinite(value):
                    raise ValidationError("non-finite loss")
                nm.backward(loss)
            except ValidationError as err:
                # tensors refuse non-finite values, so any numeric blowup
                # inside a step surfaces here
                raise TrainingFailure(f"training diverged at epoch {epoch + 1}: {err}",
                                      epoch + 1) from err
            opt.step()
            losses.append(value)
        snapshot(epoch + 1, float(np.mean(losses)))

    return checkpoints


def evaluate_ppl(model: Model, ids) -> float:
    """Perplexity over an id sequence: exp of the mean next-token NLL, taken
    over non-overlapping windows (a final partial window of >= 2 ids counts)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 2:
        raise ValueError("need at least two ids to score next-token predictions")
    t = model.cfg.max_seq_len
    total_nll = 0.0
    total_count = 0
    full_starts = [s for s in range(0, ids.size - 1, t)]
    batch: list[np.ndarray] = []

    def flush_batch(windows: list[np.ndarray]) -> None:
        nonlocal total_nll, total_count
        if not windows:
            return
        arr = np.stack(windows)
        inputs, targets = arr[:, :-1], arr[:, 1:]
        loss = _batch_loss(model, inputs, targets).item()
        count = targets.size
        total_nll += loss * count
        total_count += count

    tail: np.ndarray | None = None
    for s in full_starts:
        window = ids[s: s + t + 1]
        if window.size == t + 1:
            batch.append(window)
            if len(batch) == 32:
                flush_batch(batch)
                batch = []
        elif window.size >= 2:
            tail = window
    flush_batch(batch)
    if tail is not None:
        flush_batch([tail])
    return float(np.exp(total_nll / total_count))


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def _config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def config_from_dict(raw: dict) -> ModelConfig:
    names = {f.name for f in fields(ModelConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**raw)


def save_checkpoint(path, cfg: ModelConfig, ck: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: list[tuple[str, np.ndarray]] = sorted(ck.params.items())
    rec = ck.record
    tensors.append(("record/token_keys", rec.token_keys.astype(np.float64)))
    for i, cap in enumerate(rec.layers):
        tensors.append((f"record/layer{i}/scores", cap.scores))
        tensors.append((f"record/layer{i}/selected", cap.selected.astype(np.float64)))

    directory = []
    offset = 0
    payloads = []
    for name, arr in tensors:
        raw = nm.tensor_to_bytes(arr)
        directory.append({"name": name, "shape": list(arr.shape), "dtype": "f64",
                          "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": _config_to_dict(cfg),
        "epoch": ck.epoch,
        "scalars": ck.scalars,
        "record": {"epoch": rec.epoch, "h_star": [cap.h_star for cap in rec.layers],
                   "n_layers": rec.n_layers},
        "tensors": directory,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> tuple[ModelConfig, Checkpoint]:
    path = Path(path)
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(header_len).decode("utf-8"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path} is not a checkpoint container")
        payload = fh.read()

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = nm.tensor_from_bytes(raw, entry["shape"])

    rec_meta = manifest["record"]
    layers = []
    for i in range(rec_meta["n_layers"]):
        layers.append(moemod.RoutingCapture(
            scores=arrays.pop(f"record/layer{i}/scores"),
            selected=arrays.pop(f"record/layer{i}/selected").astype(np.int64),
            h_star=int(rec_meta["h_star"][i])))
    record = metricsmod.RoutingRecord(
        epoch=int(rec_meta["epoch"]),
        token_keys=arrays.pop("record/token_keys").astype(np.int64),
        layers=layers)

    cfg = config_from_dict(manifest["config"])
    ck = Checkpoint(epoch=int(manifest["epoch"]), params=arrays, record=record,
                    scalars=dict(manifest["scalars"]))
    return cfg, ck


# ---------------------------------------------------------------------------
# flat key-value run configuration
# ---------------------------------------------------------------------------

RUN_KEYS = ("corpus", "clusters", "tokens_per_cluster", "cluster_radius")


def _parse_scalar(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_file(path) -> tuple[ModelConfig, TrainConfig, dict]:
    """One flat `key = value` file covering model, training, and data keys."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    model_names = {f.name for f in fields(ModelConfig)}
    train_names = {f.name for f in fields(TrainConfig)}
    model_kw: dict = {}
    train_kw: dict = {}
    extras: dict = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        parsed = _parse_scalar(value)
        if key in model_names:
            model_kw[key] = parsed
        elif key in train_names:
            train_kw[key] = parsed
        elif key in RUN_KEYS:
            extras[key] = parsed
        else:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    try:
        mcfg = ModelConfig(**model_kw)
        tcfg = TrainConfig(**train_kw)
        tcfg.validate()
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad configuration in {path}: {err}") from err
    return mcfg, tcfg, extras
