"""Neural SDF: sinusoidal positional embedding + softplus MLP, numpy only.

The training loop needs d loss / d parameters where the loss depends on both
the network output f(x) and its input gradient grad_x f(x).  Rather than a
general autodiff graph we propagate, alongside each layer's value rows, the
3-row Jacobian with respect to the input point (forward mode), and implement
the matching reverse pass by hand.  The reverse pass consumes cotangents for
(f, grad f) and walks the cached layers backward; differentiating through the
Jacobian path brings in the second derivative of the activation, which for
softplus is available in closed form.

All heavy math is batched GEMMs, so float32 models run close to BLAS speed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EmbeddingSpec:
    """Sinusoidal point embedding: identity (optional) + sin/cos octaves.

    Frequencies are omega0 * 2^k for k in [0, n_freq).  omega0 should be set
    so the largest period roughly spans twice the scene extent.  Keep n_freq
    small for room-scale scenes: high octaves let sparsely observed free space
    settle into unit-gradient ripple instead of growing toward true distance.
    """

    n_freq: int = 3
    omega0: float = 0.628
    include_identity: bool = True

    @property
    def out_dim(self) -> int:
        return 3 * int(self.include_identity) + 6 * self.n_freq

    @property
    def frequencies(self) -> np.ndarray:
        return self.omega0 * (2.0 ** np.arange(self.n_freq))


def embed(X: np.ndarray, spec: EmbeddingSpec) -> np.ndarray:
    """Embed points (N, 3) -> (N, E). Layout: [x | sin(w_k x), cos(w_k x)]_k."""
    X = np.asarray(X)
    N = X.shape[0]
    out = np.empty((N, spec.out_dim), dtype=X.dtype)
    o = 0
    if spec.include_identity:
        out[:, :3] = X
        o = 3
    for w in spec.frequencies.astype(X.dtype):
        wx = w * X
        out[:, o : o + 3] = np.sin(wx)
        out[:, o + 3 : o + 6] = np.cos(wx)
        o += 6
    return out


def embed_with_jacobian(X: np.ndarray, spec: EmbeddingSpec):
    """Embedding plus its Jacobian d emb / d x, shapes (N, E) and (N, 3, E)."""
    X = np.asarray(X)
    N = X.shape[0]
    E = spec.out_dim
    out = np.empty((N, E), dtype=X.dtype)
    J = np.zeros((N, 3, E), dtype=X.dtype)
    idx = np.arange(3)
    o = 0
    if spec.include_identity:
        out[:, :3] = X
        J[:, idx, idx] = 1.0
        o = 3
    for w in spec.frequencies.astype(X.dtype):
        wx = w * X
        s, c = np.sin(wx), np.cos(wx)
        out[:, o : o + 3] = s
        out[:, o + 3 : o + 6] = c
        J[:, idx, o + idx] = w * c
        J[:, idx, o + 3 + idx] = -w * s
        o += 6
    return out, J


def _softplus_pair(z: np.ndarray, beta):
    """(softplus_beta(z), sigmoid(beta z)), stable for large |bz|."""
    bz = beta * z
    h = np.maximum(bz, 0.0)
    h += np.log1p(np.exp(-np.abs(bz)))
    h /= beta
    s = np.tanh(0.5 * bz)
    s += 1.0
    s *= 0.5
    return h, s


class SdfModel:
    """MLP x -> f(x) with softplus activations of sharpness beta_act.

    weights[i] is (in, out); the final layer has out == 1.  Parameters and
    computation use self.dtype (float32 by default, float64 for the
    finite-difference checks in the test suite).
    """

    def __init__(self, spec: EmbeddingSpec, weights, biases, beta_act: float = 100.0):
        self.spec = spec
        self.weights = [np.asarray(W) for W in weights]
        self.biases = [np.asarray(b) for b in biases]
        self.beta_act = float(beta_act)
        self.dtype = self.weights[0].dtype
        if self.weights[-1].shape[1] != 1:
            raise ValueError("final layer must map to a scalar")
        if self.weights[0].shape[0] != spec.out_dim:
            raise ValueError("first layer input must match embedding dim")

    # ------------------------------------------------------------------ setup

    @classmethod
    def create(
        cls,
        spec: EmbeddingSpec | None = None,
        hidden: int = 128,
        n_hidden: int = 4,
        beta_act: float = 100.0,
        seed: int = 7,
        dtype=np.float32,
    ) -> "SdfModel":
        """Fan-in uniform init (U[-1/sqrt(fan_in), 1/sqrt(fan_in)]), fixed seed."""
        spec = spec or EmbeddingSpec()
        rng = np.random.default_rng(seed)
        sizes = [spec.out_dim] + [hidden] * n_hidden + [1]
        Ws, bs = [], []
        for fin, fout in zip(sizes[:-1], sizes[1:]):
            lim = 1.0 / np.sqrt(fin)
            Ws.append(rng.uniform(-lim, lim, size=(fin, fout)).astype(dtype))
            bs.append(rng.uniform(-lim, lim, size=fout).astype(dtype))
        return cls(spec, Ws, bs, beta_act)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def num_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def clone(self) -> "SdfModel":
        return SdfModel(
            self.spec,
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.beta_act,
        )

    # ---------------------------------------------------------------- forward

    def forward(self, X: np.ndarray) -> np.ndarray:
        """f(X) for points (N, 3) -> (N,)."""
        h = embed(np.asarray(X, dtype=self.dtype), self.spec)
        beta = self.dtype.type(self.beta_act)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ W + b
            h, _ = _softplus_pair(z, beta)
        return (h @ self.weights[-1] + self.biases[-1])[:, 0]

    def forward_with_gradient(self, X: np.ndarray):
        """(f, grad_x f) without keeping the backward cache."""
        f, G, _ = self._forward_full(X, keep_cache=False)
        return f, G

    def input_gradient(self, X: np.ndarray) -> np.ndarray:
        return self.forward_with_gradient(X)[1]

    def _forward_full(self, X: np.ndarray, keep_cache: bool = True):
        """Joint value/Jacobian forward pass.

        cache holds, per hidden layer, the tensors the reverse pass needs:
        layer input h, its Jacobian Jh, pre-activation sigmoid s = phi'(z),
        and the pre-activation Jacobian Jz.
        """
        X = np.asarray(X, dtype=self.dtype)
        N = X.shape[0]
        beta = self.dtype.type(self.beta_act)
        h, Jh = embed_with_jacobian(X, self.spec)
        cache = []
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ W + b
            Jz = (Jh.reshape(N * 3, -1) @ W).reshape(N, 3, -1)
            h_out, s = _softplus_pair(z, beta)
            Jh_out = s[:, None, :] * Jz
            if keep_cache:
                cache.append((h, Jh, s, Jz))
            h, Jh = h_out, Jh_out
        w_out = self.weights[-1][:, 0]
        f = h @ w_out + self.biases[-1][0]
        G = np.einsum("nij,j->ni", Jh, w_out)
        if keep_cache:
            cache.append((h, Jh))
        return f, G, cache

    # --------------------------------------------------------------- backward

    def backprop(self, cache, fbar: np.ndarray, Gbar: np.ndarray):
        """Parameter gradients from output cotangents.

        fbar (N,) and Gbar (N, 3) are d loss / d f and d loss / d grad f.
        Returns (dWs, dbs) matching self.weights / self.biases.
        """
        beta = self.dtype.type(self.beta_act)
        fbar = np.asarray(fbar, dtype=self.dtype)
        Gbar = np.asarray(Gbar, dtype=self.dtype)
        N = fbar.shape[0]

        h, Jh = cache[-1]
        w_out = self.weights[-1][:, 0]
        dW_out = (h.T @ fbar + np.einsum("ni,nij->j", Gbar, Jh))[:, None]
        db_out = np.array([fbar.sum()], dtype=self.dtype)
        hbar = fbar[:, None] * w_out[None, :]
        Jhbar = Gbar[:, :, None] * w_out[None, None, :]

        dWs = [dW_out]
        dbs = [db_out]
        for li in range(len(self.weights) - 2, -1, -1):
            h_in, Jh_in, s, Jz = cache[li]
            W = self.weights[li]
            # h_out = phi(z), Jh_out = phi'(z) * Jz; phi' = s, phi'' = beta s (1 - s)
            phi2 = beta * s * (1.0 - s)
            zbar = s * hbar + phi2 * np.einsum("nij,nij->nj", Jhbar, Jz)
            Jzbar = s[:, None, :] * Jhbar
            dW = h_in.T @ zbar + Jh_in.reshape(N * 3, -1).T @ Jzbar.reshape(N * 3, -1)
            db = zbar.sum(axis=0)
            hbar = zbar @ W.T
            Jhbar = (Jzbar.reshape(N * 3, -1) @ W.T).reshape(N, 3, -1)
            dWs.append(dW)
            dbs.append(db)
        dWs.reverse()
        dbs.reverse()
        return dWs, dbs


def loss_parameter_gradients(model: SdfModel, batch, weights):
    """Loss value, per-term report, and parameter gradients for one batch.

    batch is a losses.LossBatch; weights a losses.LossWeights.  The loss is
    mean over unstructured points plus mean over surfel points; gradients are
    exact for that reduction (verified against finite differences in tests).
    """
    from .losses import batch_loss_terms

    f, G, cache = model._forward_full(batch.points)
    total, terms, fbar, Gbar = batch_loss_terms(f, G, batch, weights)
    dWs, dbs = model.backprop(cache, fbar, Gbar)
    return total, terms, (dWs, dbs)


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamWState:
    """Decoupled weight decay Adam; moments stored per parameter tensor."""

    lr: float = 1.3e-3
    weight_decay: float = 1.2e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_w: list = None
    v_w: list = None
    m_b: list = None
    v_b: list = None

    @classmethod
    def create_for(cls, model: SdfModel, lr: float = 1.3e-3,
                   weight_decay: float = 1.2e-2, **kw) -> "AdamWState":
        st = cls(lr=lr, weight_decay=weight_decay, **kw)
        st.m_w = [np.zeros_like(W) for W in model.weights]
        st.v_w = [np.zeros_like(W) for W in model.weights]
        st.m_b = [np.zeros_like(b) for b in model.biases]
        st.v_b = [np.zeros_like(b) for b in model.biases]
        return st


def adamw_step(model: SdfModel, grads, state: AdamWState) -> None:
    """One update, in place.  p -= lr*wd*p; p -= lr * mhat / (sqrt(vhat) + eps)."""
    dWs, dbs = grads
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 / (1.0 - b1**t)
    c2 = 1.0 / (1.0 - b2**t)
    for params, gs, ms, vs in (
        (model.weights, dWs, state.m_w, state.v_w),
        (model.biases, dbs, state.m_b, state.v_b),
    ):
        for p, g, m, v in zip(params, gs, ms, vs):
            g = np.asarray(g, dtype=p.dtype)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= state.lr * state.weight_decay * p
            p -= state.lr * (m * c1) / (np.sqrt(v * c2) + state.eps)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: SdfModel, state: AdamWState | None = None,
                    extra: dict | None = None) -> None:
    """Write model (and optionally optimizer state) to a single .npz file."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "n_freq": model.spec.n_freq,
        "omega0": model.spec.omega0,
        "include_identity": model.spec.include_identity,
        "beta_act": model.beta_act,
        "n_layers": model.n_layers,
        "dtype": np.dtype(model.dtype).name,
        "extra": extra or {},
    }
    arrays = {"meta_json": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"W{i}"] = W
        arrays[f"b{i}"] = b
    if state is not None:
        arrays["opt_hyper"] = np.array(
            [state.lr, state.weight_decay, state.beta1, state.beta2, state.eps, state.step]
        )
        for i in range(model.n_layers):
            arrays[f"m_w{i}"] = state.m_w[i]
            arrays[f"v_w{i}"] = state.v_w[i]
            arrays[f"m_b{i}"] = state.m_b[i]
            arrays[f"v_b{i}"] = state.v_b[i]
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Read a checkpoint.  Returns (model, state-or-None, extra dict)."""
    z = np.load(path)
    meta = json.loads(bytes(z["meta_json"]).decode())
    if meta["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['version']}")
    spec = EmbeddingSpec(meta["n_freq"], meta["omega0"], meta["include_identity"])
    n = meta["n_layers"]
    Ws = [z[f"W{i}"] for i in range(n)]
    bs = [z[f"b{i}"] for i in range(n)]
    model = SdfModel(spec, Ws, bs, meta["beta_act"])
    state = None
    if "opt_hyper" in z:
        lr, wd, b1, b2, eps, step = z["opt_hyper"]
        state = AdamWState(lr=float(lr), weight_decay=float(wd), beta1=float(b1),
                           beta2=float(b2), eps=float(eps), step=int(step))
        state.m_w = [z[f"m_w{i}"] for i in range(n)]
        state.v_w = [z[f"v_w{i}"] for i in range(n)]
        state.m_b = [z[f"m_b{i}"] for i in range(n)]
        state.v_b = [z[f"v_b{i}"] for i in range(n)]
    return model, state, meta["extra"]
