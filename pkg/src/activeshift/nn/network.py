"""A static layer graph with a softmax cross-entropy head."""

from __future__ import annotations

import numpy as np

from ..errors import StateError
from .layers import ActiveShift, Layer, walk, softmax_xent


class Network:
    """Root of a layer graph: ``body`` maps images to logits.

    Layer names are made unique and qualified at construction time
    (``stage1.block0.asl``) so parameters can be addressed by name in
    checkpoints and error messages.
    """

    def __init__(self, body: Layer, num_classes: int, dtype=np.float32, meta=None):
        self.body = body
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.meta = dict(meta or {})
        self._loss_grad = None
        self._qualify()

    def _qualify(self):
        for qname, layer in walk(self.body):
            if qname:
                layer.name = qname

    # -- introspection --------------------------------------------------

    def layers(self):
        return [layer for _, layer in walk(self.body)]

    def named_parameters(self):
        out = []
        for qname, layer in walk(self.body):
            for p in layer.params():
                out.append((f"{qname}.{p.name}" if qname else p.name, p))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        out = []
        for qname, layer in walk(self.body):
            for key, buf in layer.buffers().items():
                out.append((f"{qname}.{key}", buf))
        return out

    def shift_layers(self):
        return [layer for layer in self.layers() if isinstance(layer, ActiveShift)]

    def num_parameters(self, include_shift=True, trainable_only=False):
        """Parameter count including BN affine terms, excluding BN running statistics."""
        total = 0
        for p in self.parameters():
            if p.kind == "shift" and not include_shift:
                continue
            if trainable_only and not p.trainable:
                continue
            total += p.data.size
        return total

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        self.body.astype(self.dtype)
        return self

    # -- computation ----------------------------------------------------

    def forward(self, x, labels=None, training=True):
        """Return ``(logits, loss)``; ``loss`` is None when no labels are given."""
        x = np.asarray(x, dtype=self.dtype)
        logits = self.body.forward(x, training)
        if labels is None:
            self._loss_grad = None
            return logits, None
        loss, self._loss_grad = softmax_xent(logits, labels)
        return logits, loss

    def backward(self, scale=1.0):
        """Fill gradient buffers of all trainable parameters for the last forward."""
        if self._loss_grad is None:
            raise StateError("backward called before a forward pass with labels")
        grad, self._loss_grad = self._loss_grad, None
        if scale != 1.0:
            grad = grad * grad.dtype.type(scale)
        for p in self.parameters():
            p.grad = None
        self.body.backward(grad)
        return {name: p.grad for name, p in self.named_parameters() if p.trainable}

    def predict(self, x, batch_size=500):
        out = []
        for i in range(0, len(x), batch_size):
            logits, _ = self.forward(x[i:i + batch_size], training=False)
            out.append(logits)
        return np.concatenate(out, axis=0)
