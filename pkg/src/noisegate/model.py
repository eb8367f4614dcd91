"""One-hidden-layer ELU MLP with softmax cross-entropy, flat parameter vector.

The whole simulator treats model parameters as a single float64 vector so
uploads, noise, and aggregation are plain vector arithmetic.  Gradients are
computed per example (the honest pipeline momentum-tracks every example in a
mini-batch separately) with a closed-form batched backward pass.
"""

from __future__ import annotations

import numpy as np


def _elu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, np.expm1(z))


def _elu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, np.exp(z))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class MlpModel:
    """input_dim -> hidden_dim (ELU) -> n_classes (softmax cross-entropy)."""

    def __init__(self, input_dim: int, hidden_dim: int, n_classes: int):
        if min(input_dim, hidden_dim, n_classes) < 1:
            raise ValueError("all layer sizes must be positive")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.n_classes = n_classes
        self.dim = input_dim * hidden_dim + hidden_dim + hidden_dim * n_classes + n_classes
        self.params = np.zeros(self.dim, dtype=np.float64)

    # --- parameter layout -------------------------------------------------

    def unflatten(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Views (w1, b1, w2, b2) into a flat vector; no copies."""
        params = np.asarray(params)
        if params.shape != (self.dim,):
            raise ValueError(f"expected a flat vector of length {self.dim}, got {params.shape}")
        i, h, c = self.input_dim, self.hidden_dim, self.n_classes
        o1 = i * h
        o2 = o1 + h
        o3 = o2 + h * c
        w1 = params[:o1].reshape(i, h)
        b1 = params[o1:o2]
        w2 = params[o2:o3].reshape(h, c)
        b2 = params[o3:]
        return w1, b1, w2, b2

    def init_params(self, rng: np.random.Generator) -> None:
        """Uniform(-a, a) weights with a = sqrt(6/(fan_in+fan_out)); zero biases."""
        w1, b1, w2, b2 = self.unflatten(self.params)
        a1 = np.sqrt(6.0 / (self.input_dim + self.hidden_dim))
        a2 = np.sqrt(6.0 / (self.hidden_dim + self.n_classes))
        w1[...] = rng.uniform(-a1, a1, size=w1.shape)
        w2[...] = rng.uniform(-a2, a2, size=w2.shape)
        b1[...] = 0.0
        b2[...] = 0.0

    # --- forward / backward ----------------------------------------------

    def _forward(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        w1, b1, w2, b2 = self.unflatten(self.params)
        z1 = features @ w1 + b1
        h = _elu(z1)
        logits = h @ w2 + b2
        return z1, h, logits

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self._forward(np.atleast_2d(np.asarray(features, dtype=np.float64)))[2]

    def loss(self, features: np.ndarray, labels: np.ndarray) -> float:
        """Mean softmax cross-entropy."""
        features, labels = self._check_batch(features, labels)
        _, _, logits = self._forward(features)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return float(-log_p[np.arange(len(labels)), labels].mean())

    def per_example_gradients(self, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """(B, dim) matrix of flat per-example cross-entropy gradients."""
        features, labels = self._check_batch(features, labels)
        n = len(labels)
        z1, h, logits = self._forward(features)
        delta2 = _softmax(logits)
        delta2[np.arange(n), labels] -= 1.0                       # (B, C)
        _, _, w2, _ = self.unflatten(self.params)
        delta1 = (delta2 @ w2.T) * _elu_grad(z1)                  # (B, H)
        grads = np.empty((n, self.dim), dtype=np.float64)
        i, hd, c = self.input_dim, self.hidden_dim, self.n_classes
        o1 = i * hd
        o2 = o1 + hd
        o3 = o2 + hd * c
        np.einsum("bi,bh->bih", features, delta1, out=grads[:, :o1].reshape(n, i, hd))
        grads[:, o1:o2] = delta1
        np.einsum("bh,bc->bhc", h, delta2, out=grads[:, o2:o3].reshape(n, hd, c))
        grads[:, o3:] = delta2
        return grads

    def per_example_gradient(self, x: np.ndarray, label: int) -> np.ndarray:
        """Flat gradient of the loss on a single example."""
        return self.per_example_gradients(np.atleast_2d(x), np.asarray([label]))[0]

    def batch_gradient(self, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Flat gradient of the mean loss, computed in one batched backward pass."""
        features, labels = self._check_batch(features, labels)
        n = len(labels)
        z1, h, logits = self._forward(features)
        delta2 = _softmax(logits)
        delta2[np.arange(n), labels] -= 1.0
        delta2 /= n
        _, _, w2, _ = self.unflatten(self.params)
        delta1 = (delta2 @ w2.T) * _elu_grad(z1)
        grad = np.empty(self.dim, dtype=np.float64)
        i, hd, c = self.input_dim, self.hidden_dim, self.n_classes
        o1 = i * hd
        o2 = o1 + hd
        o3 = o2 + hd * c
        grad[:o1] = (features.T @ delta1).ravel()
        grad[o1:o2] = delta1.sum(axis=0)
        grad[o2:o3] = (h.T @ delta2).ravel()
        grad[o3:] = delta2.sum(axis=0)
        return grad

    def evaluate(self, features: np.ndarray, labels: np.ndarray) -> float:
        """Accuracy under argmax prediction; ties resolve to the lowest class index."""
        features, labels = self._check_batch(features, labels)
        preds = np.argmax(self._forward(features)[2], axis=1)
        return float(np.mean(preds == labels))

    def _check_batch(self, features: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        labels = np.asarray(labels)
        if features.shape[0] != labels.shape[0] or features.shape[0] == 0:
            raise ValueError("features and labels must be non-empty and aligned")
        if features.shape[1] != self.input_dim:
            raise ValueError(f"feature dim {features.shape[1]} != model input dim {self.input_dim}")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise ValueError("label outside 0..n_classes-1")
        return features, labels.astype(np.int64)
