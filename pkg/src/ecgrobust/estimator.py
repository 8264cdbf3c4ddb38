"""scikit-learn compatible wrapper around the classifiers and training losses."""
from __future__ import annotations

import logging

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from . import objectives as obj
from ._validation import check_mask, check_signals
from .attacks import AttackConfig, pgd_attack
from .classifiers import MLP, BeatCNN, MaskedCNN
from .signal_data import CPSC_PAD_LENGTH, pad_and_mask

logger = logging.getLogger(__name__)

METHODS = ("ce", "nsr", "jacob", "adv")
OPTIMIZERS = {"adam": torch.optim.Adam, "adamax": torch.optim.Adamax}


class TrainingError(RuntimeError):
    pass


def resolve_device(device=None):
    import os

    return torch.device(device or os.environ.get("ECGROBUST_DEVICE", "cpu"))


class RobustSignalClassifier(ClassifierMixin, BaseEstimator):
    """Train a 1-D signal classifier with CE, NSR, Jacobian or adversarial loss.

    Parameters
    ----------
    architecture : {"mlp", "beat_cnn", "masked_cnn"}
    method : {"ce", "nsr", "jacob", "adv"}
    beta : NSR regularization weight.
    lam : Jacobian regularization weight; ``jacob_normalized`` selects the
        batch- and class-normalized form.
    adv_eps, adv_iters, adv_alpha, adv_schedule : PGD settings used to build
        adversarial training samples.
    warmup_epochs : number of initial epochs with the gated terms switched off.
    optimizer, learning_rate, epochs, batch_size : optimization settings.
    pad_length : padded length for variable-length recordings.
    random_state : seeds parameter init, shuffling and random padding.
    """

    def __init__(self, architecture="mlp", method="ce", beta=0.4, lam=0.9,
                 jacob_normalized=False, adv_eps=0.1, adv_iters=10, adv_alpha=0.01,
                 adv_schedule="none", warmup_epochs=0, eps_delta=1.0,
                 optimizer="adamax", learning_rate=1e-3, epochs=50, batch_size=128,
                 pad_length=CPSC_PAD_LENGTH, random_state=0, device=None, dtype="float32"):
        self.architecture = architecture
        self.method = method
        self.beta = beta
        self.lam = lam
        self.jacob_normalized = jacob_normalized
        self.adv_eps = adv_eps
        self.adv_iters = adv_iters
        self.adv_alpha = adv_alpha
        self.adv_schedule = adv_schedule
        self.warmup_epochs = warmup_epochs
        self.eps_delta = eps_delta
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.pad_length = pad_length
        self.random_state = random_state
        self.device = device
        self.dtype = dtype

    # -- construction -----------------------------------------------------

    def _build_model(self, n_classes, input_shape):
        if self.architecture == "mlp":
            model = MLP((input_shape[-1], 128, 128, 128, 32, n_classes))
        elif self.architecture == "beat_cnn":
            model = BeatCNN(input_shape[-1], n_classes)
        elif self.architecture == "masked_cnn":
            model = MaskedCNN(input_shape[0], n_classes)
        else:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        return model.to(dtype=getattr(torch, self.dtype), device=resolve_device(self.device))

    def _loss(self, model, x, y, epoch, mask):
        if self.method == "ce":
            return obj.ce_loss(model, x, y, mask)
        if self.method == "nsr":
            cfg = obj.NsrConfig(self.beta, self.eps_delta, self.warmup_epochs)
            return obj.nsr_loss(model, x, y, epoch, cfg, mask)
        if self.method == "jacob":
            cfg = obj.JacobConfig(self.lam, self.jacob_normalized, self.warmup_epochs)
            return obj.jacob_loss(model, x, y, epoch, cfg, mask)
        if self.method == "adv":
            cfg = obj.AdvConfig(self.adv_eps, self.adv_iters, self.adv_alpha,
                                self.warmup_epochs, self.adv_schedule)

            def attacker(m, xb, yb, eps, mb):
                return pgd_attack(m, xb, yb, AttackConfig("pgd", eps, self.adv_alpha, self.adv_iters), mb)

            return obj.adv_loss(model, x, y, epoch, cfg, attacker, t_max=self.epochs, mask=mask)
        raise ValueError(f"unknown method {self.method!r}")

    # -- fitting ------------------------------------------------------------

    def _epoch_arrays(self, X, mask, epoch, rng):
        """Materialize padded arrays for one epoch (random offsets for recordings)."""
        if isinstance(X, list):
            pairs = [pad_and_mask(x, self.pad_length, "train_random", rng) for x in X]
            return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
        return X, mask

    def fit(self, X, y, mask=None, epoch_callback=None):
        """``epoch_callback(epoch, model)`` runs after every epoch if given."""
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        X, y = check_signals(X, y, self.architecture)
        if not isinstance(X, list):
            mask = check_mask(mask, X) if X.ndim == 3 else None
            if self.architecture == "masked_cnn" and mask is None:
                mask = np.ones((X.shape[0], 1, X.shape[2]))
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        yi = self.label_encoder_.transform(y)
        input_shape = X[0].shape if isinstance(X, list) else X.shape[1:]
        self.n_features_in_ = int(np.prod(input_shape)) if not isinstance(X, list) else input_shape[0]

        torch.manual_seed(self.random_state)
        model = self._build_model(len(self.classes_), input_shape)
        optim = OPTIMIZERS[self.optimizer](model.parameters(), lr=self.learning_rate)
        dev, dt = resolve_device(self.device), getattr(torch, self.dtype)
        gen = torch.Generator().manual_seed(self.random_state)
        rng = np.random.default_rng(self.random_state)
        yt = torch.as_tensor(yi, dtype=torch.long)

        self.loss_curve_, self.batch_losses_ = [], []
        model.train()
        for epoch in range(1, self.epochs + 1):
            Xe, Me = self._epoch_arrays(X, mask, epoch, rng)
            Xt = torch.as_tensor(Xe, dtype=dt)
            Mt = None if Me is None else torch.as_tensor(Me, dtype=dt)
            order = torch.randperm(len(yt), generator=gen)
            total = 0.0
            for b, start in enumerate(range(0, len(order), self.batch_size)):
                idx = order[start:start + self.batch_size]
                xb, yb = Xt[idx].to(dev), yt[idx].to(dev)
                mb = None if Mt is None else Mt[idx].to(dev)
                loss = self._loss(model, xb, yb, epoch, mb)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
                optim.zero_grad()
                loss.backward()
                optim.step()
                total += loss.item() * len(idx)
                self.batch_losses_.append(loss.item())
            self.loss_curve_.append(total / len(yt))
            logger.info("epoch %d/%d loss %.5f", epoch, self.epochs, self.loss_curve_[-1])
            if epoch_callback is not None:
                epoch_callback(epoch, model)
        model.eval()
        self.model_ = model
        return self

    @classmethod
    def from_model(cls, model, classes=None, **params):
        """Wrap an already trained network (e.g. loaded from a checkpoint)."""
        est = cls(**params)
        est.model_ = model.eval()
        n = model.spec.num_classes
        est.classes_ = np.arange(n) if classes is None else np.asarray(classes)
        est.label_encoder_ = LabelEncoder().fit(est.classes_)
        return est

    # -- inference ----------------------------------------------------------

    def _inputs(self, X, mask):
        X, _ = check_signals(X, None, self.architecture)
        if isinstance(X, list):
            pairs = [pad_and_mask(x, self.pad_length, "eval_left") for x in X]
            X, mask = np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
        elif X.ndim == 3:
            mask = check_mask(mask, X)
            if mask is None:
                mask = np.ones((X.shape[0], 1, X.shape[2]))
        return X, mask

    @torch.no_grad()
    def decision_function(self, X, mask=None):
        check_is_fitted(self, "model_")
        X, mask = self._inputs(X, mask)
        p = next(self.model_.parameters())
        out = []
        for s in range(0, len(X), 512):
            m = None if mask is None else torch.as_tensor(mask[s:s + 512], dtype=p.dtype)
            out.append(self.model_(torch.as_tensor(X[s:s + 512], dtype=p.dtype), m).cpu().numpy())
        return np.concatenate(out) if out else np.zeros((0, len(self.classes_)))

    def predict_proba(self, X, mask=None):
        z = self.decision_function(X, mask)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X, mask=None):
        z = self.decision_function(X, mask)
        return self.classes_[z.argmax(axis=1)]

    def model_name(self):
        from .experiment import model_name

        param = {"nsr": self.beta, "jacob": self.lam, "adv": self.adv_eps}.get(self.method)
        return model_name(self.method, param)
