"""
LSTM encoder-decoder bank: one univariate sequence predictor per (channel, scale) pair.

Each ED reads l_i one-hot samples, hands its final (h, c) to the decoder,
and emits l_o softmax rows through a dense layer. Training minimises
categorical cross entropy plus an l1 penalty on the weight matrices, with
backpropagation through time and Adam.

Usage:
    from predictor import TrainConfig, train_bank, predict_batch

    bank = train_bank(input_levels, target_levels, v=64, cfg=TrainConfig(n_h=32, epochs=30))
    probs, levels = predict_batch(bank[0], one_hot_history)

Weight files hold float32 parameters in PARAM_ORDER: encoder W, U, b,
decoder W, U, b, dense W, b. Gate rows inside W/U/b are ordered i, f, g, o.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import expit, softmax

from quantizer import one_hot_array

PARAM_ORDER = ('enc_W', 'enc_U', 'enc_b', 'dec_W', 'dec_U', 'dec_b', 'dense_W', 'dense_b')
WEIGHT_KEYS = ('enc_W', 'enc_U', 'dec_W', 'dec_U', 'dense_W')

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LOG_CLAMP = 1e-12


class TrainingError(RuntimeError):
    pass


# ============ Configuration ============

@dataclass
class TrainConfig:
    epochs: int = 50
    l1_lambda: float = 0.001
    n_h: int = 90
    learning_rate: float = 1e-3
    batch_size: int = 32
    teacher_forcing: bool = True
    include_biases: bool = False     # l1 on biases too
    rng_seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.l1_lambda < 0:
            raise ValueError(f"train.l1_lambda must be >= 0, got {self.l1_lambda}")
        if self.n_h < 1:
            raise ValueError(f"train.n_h must be >= 1, got {self.n_h}")
        if self.learning_rate <= 0:
            raise ValueError(f"train.learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"train.batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return {
            'epochs': self.epochs,
            'l1_lambda': self.l1_lambda,
            'n_h': self.n_h,
            'learning_rate': self.learning_rate,
            'batch_size': self.batch_size,
            'teacher_forcing': self.teacher_forcing,
            'include_biases': self.include_biases,
            'rng_seed': self.rng_seed,
        }


# ============ LSTM Cell ============

@dataclass
class LstmCell:
    W: np.ndarray    # [4 n_h x input_size]
    U: np.ndarray    # [4 n_h x n_h]
    b: np.ndarray    # [4 n_h]

    def __post_init__(self):
        n_h = self.U.shape[1]
        if self.U.shape != (4 * n_h, n_h) or self.W.shape[0] != 4 * n_h or self.b.shape != (4 * n_h,):
            raise ValueError(
                f"inconsistent LSTM shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}"
            )
        for name in ('W', 'U', 'b'):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"LSTM parameter {name} has non-finite entries")

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]


def _lstm_forward(W, U, b, x, h_prev, c_prev):
    n_h = U.shape[1]
    z = x @ W.T + h_prev @ U.T + b
    i = expit(z[..., :n_h])
    f = expit(z[..., n_h:2 * n_h])
    g = np.tanh(z[..., 2 * n_h:3 * n_h])
    o = expit(z[..., 3 * n_h:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, (x, h_prev, c_prev, i, f, g, o, tanh_c, h)


def _lstm_backward(cache, dh, dc_next, U, grads: dict, prefix: str):
    x, h_prev, c_prev, i, f, g, o, tanh_c, _ = cache
    do = dh * tanh_c
    dc = dc_next + dh * o * (1.0 - tanh_c ** 2)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dz = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        dg * (1.0 - g ** 2),
        do * o * (1.0 - o),
    ], axis=1)
    grads[f'{prefix}_W'] += dz.T @ x
    grads[f'{prefix}_U'] += dz.T @ h_prev
    grads[f'{prefix}_b'] += dz.sum(axis=0)
    return dz @ U, dc * f


def cell_step(cell: LstmCell, x: np.ndarray, h_prev: np.ndarray,
              c_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One gated update: c = f*c_prev + i*g, h = o*tanh(c)."""
    x, h_prev, c_prev = (np.asarray(a, dtype=np.float64) for a in (x, h_prev, c_prev))
    if x.shape[-1] != cell.input_size:
        raise ValueError(f"input has {x.shape[-1]} features, cell expects {cell.input_size}")
    if h_prev.shape[-1] != cell.hidden_size or c_prev.shape[-1] != cell.hidden_size:
        raise ValueError(f"state size mismatch, cell hidden size is {cell.hidden_size}")
    h, c, _ = _lstm_forward(cell.W, cell.U, cell.b, x, h_prev, c_prev)
    return h, c


# ============ Encoder-Decoder ============

@dataclass
class EDModel:
    params: dict[str, np.ndarray]
    v: int
    n_h: int
    l_i: int
    l_o: int
    pair: tuple[int, int] = (0, 0)

    def __post_init__(self):
        expected = param_shapes(self.v, self.n_h)
        for key in PARAM_ORDER:
            if key not in self.params:
                raise ValueError(f"ED parameters missing {key}")
            if self.params[key].shape != expected[key]:
                raise ValueError(f"ED parameter {key} has shape {self.params[key].shape}, expected {expected[key]}")
            if not np.all(np.isfinite(self.params[key])):
                raise ValueError(f"ED parameter {key} has non-finite entries")

    def to_bytes(self) -> bytes:
        return np.concatenate([self.params[k].ravel() for k in PARAM_ORDER]).astype('<f4').tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, v: int, n_h: int, l_i: int, l_o: int,
                   pair: tuple[int, int] = (0, 0)) -> "EDModel":
        flat = np.frombuffer(blob, dtype='<f4').astype(np.float64)
        shapes = param_shapes(v, n_h)
        total = sum(int(np.prod(s)) for s in shapes.values())
        if flat.size != total:
            raise ValueError(f"weight blob has {flat.size} values, expected {total} for v={v}, n_h={n_h}")
        params, offset = {}, 0
        for key in PARAM_ORDER:
            size = int(np.prod(shapes[key]))
            params[key] = flat[offset:offset + size].reshape(shapes[key]).copy()
            offset += size
        return cls(params=params, v=v, n_h=n_h, l_i=l_i, l_o=l_o, pair=tuple(pair))


def param_shapes(v: int, n_h: int) -> dict[str, tuple[int, ...]]:
    return {
        'enc_W': (4 * n_h, v), 'enc_U': (4 * n_h, n_h), 'enc_b': (4 * n_h,),
        'dec_W': (4 * n_h, v), 'dec_U': (4 * n_h, n_h), 'dec_b': (4 * n_h,),
        'dense_W': (v, n_h), 'dense_b': (v,),
    }


def init_params(v: int, n_h: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(n_h), 1/sqrt(n_h)) for every parameter, drawn in PARAM_ORDER."""
    bound = 1.0 / np.sqrt(n_h)
    shapes = param_shapes(v, n_h)
    return {key: rng.uniform(-bound, bound, size=shapes[key]) for key in PARAM_ORDER}


def _check_one_hot(arr: np.ndarray, v: int, what: str) -> None:
    if arr.shape[-1] != v:
        raise ValueError(f"{what} rows have length {arr.shape[-1]}, expected v={v}")
    if not (np.all((arr == 0) | (arr == 1)) and np.all(arr.sum(axis=-1) == 1)):
        raise ValueError(f"{what} rows are not valid one-hot vectors")


def _forward(params, inputs, l_o, targets=None, teacher_forcing=False):
    """
    Encoder over inputs [B x l_i x v], then l_o decoder steps.

    The first decoder input is the zero vector; later inputs are the
    ground-truth previous target (teacher forcing) or the one-hot argmax of
    the previous prediction.
    """
    batch, l_i, v = inputs.shape
    n_h = params['enc_U'].shape[1]
    h = np.zeros((batch, n_h))
    c = np.zeros((batch, n_h))

    enc_caches = []
    for t in range(l_i):
        h, c, cache = _lstm_forward(params['enc_W'], params['enc_U'], params['enc_b'], inputs[:, t], h, c)
        enc_caches.append(cache)

    x = np.zeros((batch, v))
    probs = np.empty((batch, l_o, v))
    dec_caches = []
    for k in range(l_o):
        h, c, cache = _lstm_forward(params['dec_W'], params['dec_U'], params['dec_b'], x, h, c)
        dec_caches.append(cache)
        probs[:, k] = softmax(h @ params['dense_W'].T + params['dense_b'], axis=-1)
        if teacher_forcing:
            x = targets[:, k]
        else:
            x = np.eye(v)[np.argmax(probs[:, k], axis=-1)]
    return probs, (enc_caches, dec_caches)


def _l1_penalty(params, lam, include_biases) -> float:
    keys = PARAM_ORDER if include_biases else WEIGHT_KEYS
    return float(lam * sum(np.abs(params[k]).sum() for k in keys))


def _cross_entropy(probs, targets) -> float:
    batch, l_o, _ = targets.shape
    return float(-np.sum(targets * np.log(np.maximum(probs, LOG_CLAMP))) / (batch * l_o))


def loss_and_grads(params: dict[str, np.ndarray], inputs: np.ndarray, targets: np.ndarray, lam: float,
                   teacher_forcing: bool = True,
                   include_biases: bool = False) -> tuple[float, float, dict[str, np.ndarray]]:
    """
    Objective Q + Q_l1 and its gradient by backpropagation through time.

    Returns:
        (Q, Q_l1, grads) with grads keyed like params
    """
    batch, l_o, _ = targets.shape
    probs, (enc_caches, dec_caches) = _forward(params, inputs, l_o, targets, teacher_forcing)
    q = _cross_entropy(probs, targets)
    q_l1 = _l1_penalty(params, lam, include_biases)

    grads = {key: np.zeros_like(params[key]) for key in PARAM_ORDER}
    dh_next = np.zeros((batch, params['enc_U'].shape[1]))
    dc_next = np.zeros_like(dh_next)
    scale = 1.0 / (batch * l_o)

    for k in reversed(range(l_o)):
        cache = dec_caches[k]
        h = cache[-1]
        dlogits = (probs[:, k] - targets[:, k]) * scale
        grads['dense_W'] += dlogits.T @ h
        grads['dense_b'] += dlogits.sum(axis=0)
        dh = dlogits @ params['dense_W'] + dh_next
        dh_next, dc_next = _lstm_backward(cache, dh, dc_next, params['dec_U'], grads, 'dec')

    for cache in reversed(enc_caches):
        dh_next, dc_next = _lstm_backward(cache, dh_next, dc_next, params['enc_U'], grads, 'enc')

    for key in (PARAM_ORDER if include_biases else WEIGHT_KEYS):
        grads[key] += lam * np.sign(params[key])
    return q, q_l1, grads


def compute_loss(model: EDModel, probs: np.ndarray, targets: np.ndarray, lam: float,
                 include_biases: bool = False) -> tuple[float, float]:
    """Mean cross entropy (log clamped at 1e-12) and the l1 term over the model's weights."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape or probs.ndim != 3:
        raise ValueError(f"probs {probs.shape} and targets {targets.shape} must be matching [batch x l_o x v]")
    if np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-4):
        raise ValueError("probability rows are not normalised")
    return _cross_entropy(probs, targets), _l1_penalty(model.params, lam, include_biases)


# ============ Inference ============

def predict_batch(model: EDModel, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Autoregressive prediction for many histories at once.

    Returns:
        probs [K x l_o x v], levels [K x l_o] (argmax, ties to the lowest index)
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[1] != model.l_i:
        raise ValueError(f"inputs must be [K x {model.l_i} x {model.v}], got {inputs.shape}")
    _check_one_hot(inputs, model.v, "input")
    probs, _ = _forward(model.params, inputs, model.l_o)
    return probs, np.argmax(probs, axis=-1)


def predict_sequence(model: EDModel, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predict l_o future samples from one one-hot history [l_i x v]."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2:
        raise ValueError(f"input must be [l_i x v], got shape {inputs.shape}")
    probs, levels = predict_batch(model, inputs[None])
    return probs[0], levels[0]


# ============ Training ============

def train(inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig, pair: tuple[int, int] = (0, 0),
          on_epoch: Callable[[int, float], None] | None = None) -> tuple[EDModel, list[float]]:
    """
    Mini-batch Adam on Q + Q_l1.

    Deterministic for a fixed cfg.rng_seed: the seed drives both the
    initialisation and the per-epoch shuffle. Final weights are rounded to
    float32, the precision of the weight files.

    Returns:
        (model, per-epoch mean objective)

    Raises:
        ValueError: empty or malformed dataset
        TrainingError: non-finite objective, with epoch and batch index
    """
    cfg.validate()
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.ndim != 3 or targets.ndim != 3 or inputs.shape[0] != targets.shape[0]:
        raise ValueError(f"inputs {inputs.shape} and targets {targets.shape} must be [N x len x v] with equal N")
    n_examples, l_i, v = inputs.shape
    l_o = targets.shape[1]
    if n_examples < 1:
        raise ValueError("cannot train on an empty dataset")
    _check_one_hot(inputs, v, "input")
    _check_one_hot(targets, v, "target")

    rng = np.random.default_rng(cfg.rng_seed)
    params = init_params(v, cfg.n_h, rng)
    first_moment = {k: np.zeros_like(p) for k, p in params.items()}
    second_moment = {k: np.zeros_like(p) for k, p in params.items()}
    step = 0
    curve = []

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_examples)
        objectives = []
        for batch_idx, start in enumerate(range(0, n_examples, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            q, q_l1, grads = loss_and_grads(params, inputs[idx], targets[idx], cfg.l1_lambda,
                                            cfg.teacher_forcing, cfg.include_biases)
            objective = q + q_l1
            if not np.isfinite(objective):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_idx} (pair {pair})")

            step += 1
            for key in PARAM_ORDER:
                first_moment[key] = ADAM_BETA1 * first_moment[key] + (1 - ADAM_BETA1) * grads[key]
                second_moment[key] = ADAM_BETA2 * second_moment[key] + (1 - ADAM_BETA2) * grads[key] ** 2
                m_hat = first_moment[key] / (1 - ADAM_BETA1 ** step)
                s_hat = second_moment[key] / (1 - ADAM_BETA2 ** step)
                params[key] -= cfg.learning_rate * m_hat / (np.sqrt(s_hat) + ADAM_EPS)
            objectives.append(objective)

        curve.append(float(np.mean(objectives)))
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])

    params = {k: p.astype(np.float32).astype(np.float64) for k, p in params.items()}
    model = EDModel(params=params, v=v, n_h=cfg.n_h, l_i=l_i, l_o=l_o, pair=tuple(pair))
    return model, curve


# ============ Bank ============

def bank_pairs(m: int, q: int) -> list[tuple[int, int]]:
    """Channel-scale pairs in row-major order."""
    return [(j, d) for j in range(m) for d in range(q)]


def pair_seed(base_seed: int, pair: tuple[int, int]) -> int:
    return int(np.random.SeedSequence([base_seed, pair[0], pair[1]]).generate_state(1)[0])


def _train_pair(job) -> tuple[tuple[int, int], EDModel, list[float]]:
    pair, input_levels, target_levels, v, cfg = job
    pair_cfg = replace(cfg, rng_seed=pair_seed(cfg.rng_seed, pair))
    model, curve = train(one_hot_array(input_levels, v), one_hot_array(target_levels, v), pair_cfg, pair=pair)
    return pair, model, curve


def train_bank(input_levels: np.ndarray, target_levels: np.ndarray, v: int, cfg: TrainConfig,
               workers: int = 1, completed: dict[tuple[int, int], EDModel] | None = None,
               on_pair_done: Callable[[tuple[int, int], EDModel, list[float]], None] | None = None,
               ) -> list[EDModel]:
    """
    Train p = m' x q independent EDs on level tensors [N x l_i x m' x q] / [N x l_o x m' x q].

    Levels are expanded to one-hot per pair. Pair seeds derive from
    cfg.rng_seed and the pair id, so the bank is identical for any worker
    count. Pairs already in `completed` are kept as they are.
    """
    input_levels = np.asarray(input_levels)
    target_levels = np.asarray(target_levels)
    if input_levels.ndim != 4 or target_levels.ndim != 4:
        raise ValueError("level tensors must be [N x len x m' x q]")
    if input_levels.shape[0] != target_levels.shape[0] or input_levels.shape[2:] != target_levels.shape[2:]:
        raise ValueError(f"inconsistent level tensors {input_levels.shape} vs {target_levels.shape}")

    m, q = input_levels.shape[2:]
    pairs = bank_pairs(m, q)
    models = dict(completed or {})
    jobs = [(pair, input_levels[:, :, pair[0], pair[1]], target_levels[:, :, pair[0], pair[1]], v, cfg)
            for pair in pairs if pair not in models]

    def collect(results):
        for pair, model, curve in results:
            models[pair] = model
            if on_pair_done is not None:
                on_pair_done(pair, model, curve)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            collect(executor.map(_train_pair, jobs))
    else:
        collect(map(_train_pair, jobs))

    return [models[pair] for pair in pairs]
