"""scikit-learn style wrappers around synthesis and the disentangling network."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
import torch

from ._validation import check_images, check_labels
from .datasets import ReIDData
from .evalkit import extract
from .iidnet import ModelConfig, images_to_tensor, tensor_to_images
from .illumsynth import SynthesisSpec, synthesize_arrays
from .losses import LossConfig
from .trainer import PHASES, TrainConfig, toy_schedules, train


class IlluminationSynthesizer(TransformerMixin, BaseEstimator):
    """Re-light images at randomly drawn illumination scales.

    ``transform`` returns the images; :meth:`synthesize` also returns the
    sampled scale labels.  Draws depend only on ``seed`` and image position.
    ``gamma_grid=None`` and ``poisson_peak="auto"`` take the defaults of
    ``mode`` (local and Y-channel modes use seven levels and no noise).
    """

    def __init__(self, mode="global", gamma_grid=None, poisson_peak="auto",
                 gamma_mode="jitter", seed=0):
        self.mode = mode
        self.gamma_grid = gamma_grid
        self.poisson_peak = poisson_peak
        self.gamma_mode = gamma_mode
        self.seed = seed

    def _spec(self):
        kwargs = {"gamma_mode": self.gamma_mode, "seed": self.seed}
        if self.gamma_grid is not None:
            kwargs["gamma_grid"] = self.gamma_grid
        if self.poisson_peak != "auto":
            kwargs["poisson_peak"] = self.poisson_peak
        return SynthesisSpec.for_mode(self.mode, **kwargs)

    def fit(self, X, y=None):
        check_images(X)
        self.spec_ = self._spec()
        self.n_scales_ = self.spec_.n_scales
        return self

    def synthesize(self, X, masks=None):
        check_is_fitted(self, "spec_")
        return synthesize_arrays(check_images(X), self.spec_, masks)

    def transform(self, X, masks=None):
        return self.synthesize(X, masks)[0]


class IIDReID(TransformerMixin, BaseEstimator):
    """Person re-identification with illumination-identity disentanglement.

    ``fit`` takes images ``(N, H, W, 3)``, identity labels and illumination
    scale labels; ``transform`` returns the identity features ``f_P`` used for
    retrieval.
    """

    def __init__(
        self,
        phases=PHASES,
        lambda1=0.5,
        lambda2=0.5,
        lambda3=1.0,
        lambda4=2.0,
        margin=0.3,
        soft_label_sigma=1.0,
        use_generator=True,
        generated_flow=True,
        d_z=128,
        epochs=None,
        P=8,
        K=4,
        grad_clip=None,
        triplet_reduction="sum",
        seed=0,
    ):
        self.phases = phases
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.lambda4 = lambda4
        self.margin = margin
        self.soft_label_sigma = soft_label_sigma
        self.use_generator = use_generator
        self.generated_flow = generated_flow
        self.d_z = d_z
        self.epochs = epochs
        self.P = P
        self.K = K
        self.grad_clip = grad_clip
        self.triplet_reduction = triplet_reduction
        self.seed = seed

    def train_config(self):
        schedules = toy_schedules()
        for phase, n in (self.epochs or {}).items():
            schedules[phase].epochs = int(n)
        loss = LossConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lambda3=self.lambda3,
            lambda4=self.lambda4,
            margin_xi=self.margin,
            soft_label_sigma=self.soft_label_sigma,
            triplet_reduction=self.triplet_reduction,
        )
        return TrainConfig(
            loss=loss,
            schedules=schedules,
            P=self.P,
            K=self.K,
            seed=self.seed,
            use_generator=self.use_generator,
            generated_flow=self.generated_flow,
            grad_clip=self.grad_clip,
        )

    def fit(self, X, y, illumination, cameras=None):
        X = check_images(X)
        y = check_labels(y, len(X))
        illumination = check_labels(illumination, len(X), "illumination")
        cameras = np.zeros(len(X), int) if cameras is None else check_labels(cameras, len(X), "cameras")
        data = ReIDData(X, y, cameras, illumination, np.full(len(X), "train"), name="fit")
        model_config = ModelConfig.toy(0, image_size=data.image_shape, d_z=self.d_z)
        self.state_ = train(data, self.train_config(), self.phases, model_config=model_config)
        self.model_ = self.state_.model
        self.classes_ = self.state_.classes
        self.image_shape_ = data.image_shape
        return self

    def _images(self, X):
        check_is_fitted(self, "model_")
        return check_images(X, image_shape=self.image_shape_)

    def _extract(self, X, key):
        X = self._images(X)
        return extract(self.model_, X)[key]

    def transform(self, X):
        return self._extract(X, "f_P")

    def illumination_features(self, X):
        return self._extract(X, "f_I")

    def predict_illumination(self, X):
        return self._extract(X, "illum")

    @torch.no_grad()
    def predict_proba(self, X):
        f_p = torch.as_tensor(self.transform(X), dtype=next(self.model_.parameters()).dtype)
        return self.model_.classify_identity(f_p).double().numpy()

    def predict(self, X):
        """Identity label among the training identities."""
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    @torch.no_grad()
    def reconstruct(self, X, f_i=None):
        """Generated images from ``f_P`` and ``f_I`` (or a substitute ``f_I``)."""
        X = self._images(X)
        dtype = next(self.model_.parameters()).dtype
        self.model_.eval()
        f_p, own_f_i = self.model_.embed(self.model_.encode(images_to_tensor(X, dtype)))
        if f_i is not None:
            f_i = torch.as_tensor(np.broadcast_to(f_i, own_f_i.shape).copy(), dtype=dtype)
        return tensor_to_images(self.model_.generate(f_p, own_f_i if f_i is None else f_i))
