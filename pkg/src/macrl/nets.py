"""Small feed-forward approximators with explicit float64 gradients.

Kept dependency-free so gradient checks against central finite differences
hold to tight tolerances and training is bit-reproducible under a seed.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -1e30


class MLP:
    """Fully connected net, tanh hidden activations, linear output."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(1.0 / fan_in)
            self.weights.append(rng.uniform(-scale, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    def forward(self, x: np.ndarray):
        """x: (B, in). Returns (out (B, out), cache)."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        return h, acts

    def backward(self, acts, d_out: np.ndarray):
        """Gradients of sum(out * d_out) w.r.t. parameters."""
        gW = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        delta = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            gW[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return gW, gb

    # -- flat parameter views (checkpoints, finite differences) -------------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases)
                               for a in pair])

    def set_flat(self, flat: np.ndarray) -> None:
        off = 0
        for i in range(len(self.weights)):
            for arr in (self.weights[i], self.biases[i]):
                n = arr.size
                arr[...] = flat[off:off + n].reshape(arr.shape)
                off += n
        if off != flat.size:
            raise ValueError("flat parameter size mismatch")

    def apply_grads(self, gW, gb, lr: float, clip: float = 0.0,
                    weight_decay: float = 0.0) -> float:
        norm = np.sqrt(sum(float((g ** 2).sum()) for g in gW + gb))
        scale = 1.0 if clip <= 0.0 or norm <= clip else clip / norm
        for W, g in zip(self.weights, gW):
            if weight_decay > 0.0:
                W *= 1.0 - lr * weight_decay
            W -= lr * scale * g
        for b, g in zip(self.biases, gb):
            b -= lr * scale * g
        return norm

    def to_json(self) -> dict:
        return {"sizes": self.sizes,
                "layers": [{"w": W.ravel().tolist(), "b": b.tolist(),
                            "shape": list(W.shape)}
                           for W, b in zip(self.weights, self.biases)]}

    @classmethod
    def from_json(cls, d: dict) -> "MLP":
        net = cls.__new__(cls)
        net.sizes = list(d["sizes"])
        net.weights = [np.asarray(layer["w"], dtype=float).reshape(layer["shape"])
                       for layer in d["layers"]]
        net.biases = [np.asarray(layer["b"], dtype=float) for layer in d["layers"]]
        return net


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray):
    """Log-probabilities over initiable entries only; masked entries get
    probability exactly zero and never receive gradient.  Computed in
    log-sum-exp form so extreme logit gaps stay finite."""
    masked = np.where(mask, logits, NEG_INF)
    zmax = masked.max(axis=-1, keepdims=True)
    shifted = masked - zmax
    exps = np.where(mask, np.exp(shifted), 0.0)
    total = exps.sum(axis=-1, keepdims=True)
    probs = exps / total
    logp = np.where(mask, shifted - np.log(total), NEG_INF)
    return logp, probs


class Actor:
    """Masked softmax policy over an agent's macro set."""

    def __init__(self, input_dim: int, n_macros: int, hidden: tuple,
                 rng: np.random.Generator):
        self.net = MLP([input_dim, *hidden, n_macros], rng)
        self.n_macros = n_macros

    def distribution(self, x: np.ndarray, mask: np.ndarray):
        logits, cache = self.net.forward(np.atleast_2d(x))
        logp, probs = masked_log_softmax(logits, np.atleast_2d(mask))
        return logp, probs, cache

    def sample(self, x: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> int:
        _, probs, _ = self.distribution(x, mask)
        return int(rng.choice(self.n_macros, p=probs[0]))

    def greedy(self, x: np.ndarray, mask: np.ndarray) -> int:
        _, probs, _ = self.distribution(x, mask)
        return int(np.argmax(probs[0]))

    def policy_gradient(self, xs: np.ndarray, masks: np.ndarray,
                        actions: np.ndarray, advantages: np.ndarray,
                        entropy_coef: float = 0.0):
        """Gradient of the surrogate mean_b[log pi(a_b | x_b) * A_b] (plus an
        optional entropy bonus) with the advantages treated as constants.
        Returns (ascent gradients, logps)."""
        logp, probs, cache = self.distribution(xs, masks)
        B = xs.shape[0]
        if np.any(~masks[np.arange(B), actions]):
            raise ValueError("selected macro has zero probability (masking bug)")
        sel = np.maximum(logp[np.arange(B), actions], np.log(1e-300))
        d_logits = -probs * advantages[:, None]
        d_logits[np.arange(B), actions] += advantages
        if entropy_coef > 0.0:
            safe_logp = np.where(masks, logp, 0.0)
            ent = -(probs * safe_logp).sum(axis=1, keepdims=True)
            d_logits += entropy_coef * (-probs * (safe_logp + ent))
        d_logits = np.where(masks, d_logits, 0.0) / B
        gW, gb = self.net.backward(cache, d_logits)
        return gW, gb, sel


class Critic:
    """Scalar state value conditioned on history features and embedding."""

    def __init__(self, input_dim: int, hidden: tuple, rng: np.random.Generator):
        self.net = MLP([input_dim, *hidden, 1], rng)

    def value(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.net.forward(np.atleast_2d(x))
        return out[:, 0]

    def value_and_grad_to_target(self, xs: np.ndarray, targets: np.ndarray,
                                 huber_delta: float = 0.0):
        """Regression toward fixed targets; returns (loss, descent gradients).
        A positive huber_delta switches from MSE to Huber, capping the
        per-sample gradient for large-magnitude targets."""
        out, cache = self.net.forward(xs)
        v = out[:, 0]
        err = v - targets
        if huber_delta > 0.0:
            a = np.abs(err)
            quad = a <= huber_delta
            loss = float(np.mean(np.where(quad, 0.5 * err ** 2,
                                          huber_delta * (a - 0.5 * huber_delta))))
            d = np.where(quad, err, huber_delta * np.sign(err))
            d_out = (d / len(err))[:, None]
        else:
            loss = float(np.mean(err ** 2))
            d_out = (2.0 * err / len(err))[:, None]
        gW, gb = self.net.backward(cache, d_out)
        return loss, gW, gb, v
