"""Extractor + forest bundled with its input normalization and label vocabulary."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .extractor import Network
from .forest import Forest

PREDICT_CHUNK = 256


@dataclass
class DNDFModel:
    extractor: Network
    forest: Forest
    vocabulary: list
    input_mean: np.ndarray
    input_std: np.ndarray

    @property
    def input_shape(self):
        return self.extractor.input_shape

    @property
    def class_count(self):
        return self.forest.class_count

    def normalize(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"model expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        return (x - self.input_mean) / self.input_std

    def embed(self, x, train=False):
        return self.extractor.forward(self.normalize(x), train)

    def embed_chunks(self, x, chunk=PREDICT_CHUNK):
        """Eval-mode embedding computed ``chunk`` samples at a time."""
        x = np.asarray(x, dtype=np.float64)
        if len(x) == 0:
            return np.zeros((0, self.extractor.width))
        return np.concatenate([self.embed(x[i : i + chunk]) for i in range(0, len(x), chunk)])

    def calibrate(self, x):
        """Refresh batch-norm statistics on ``x`` and return its embedding."""
        return self.extractor.calibrate(self.normalize(x), PREDICT_CHUNK)

    def predict_proba(self, x):
        return self.forest.predict_proba(self.embed_chunks(x))

    def predict(self, x):
        # np.argmax breaks ties toward the lowest class index.
        return np.argmax(self.predict_proba(x), axis=1)
