"""The full network bundle and its on-disk form.

A checkpoint is a VTCK tensor file plus a ``<path>.json`` sidecar holding the
architecture config and the training phase that produced it.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Parameter
from .checkpoint import load_tensors, save_tensors
from .errors import FormatError, GraphStateError
from .frames import FULL_DIMS, TOY_DIMS, FrameProjection, TempGeo, TempGeoConfig
from .georefiner import GeoRefiner, GeoRefinerConfig
from .location_encoder import DEFAULT_SIGMAS, LocationEncoder, embed_points
from .nn import Module, as_input
from .rng import stream

PREFIXES = {"tempgeo": "tempgeo.", "proj": "proj.", "locenc": "locenc.", "refiner": "refiner."}


@dataclass
class ModelConfig:
    d_clip: int = TOY_DIMS[0]
    d_dino: int = TOY_DIMS[1]
    embed_dim: int = 512
    use_tempgeo: bool = True
    tempgeo: TempGeoConfig = field(default_factory=TempGeoConfig)
    proj_hidden: tuple = (1024, 768)
    sigmas: tuple = DEFAULT_SIGMAS
    rff_dim: int = 256
    loc_hidden: int = 1024
    refiner: GeoRefinerConfig = field(default_factory=GeoRefinerConfig)
    logit_scale_init: float = 1.0 / 0.07
    logit_scale_max: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.tempgeo, dict):
            self.tempgeo = TempGeoConfig(**self.tempgeo)
        if isinstance(self.refiner, dict):
            self.refiner = GeoRefinerConfig(**self.refiner)
        self.proj_hidden = tuple(self.proj_hidden)
        self.sigmas = tuple(float(s) for s in self.sigmas)
        if self.tempgeo.width != self.width:
            raise ValueError(f"TempGeo width {self.tempgeo.width} must equal d_clip + d_dino = {self.width}")
        if self.refiner.width != self.embed_dim:
            raise ValueError("GeoRefiner width must equal the embedding width")

    @property
    def width(self):
        return self.d_clip + self.d_dino

    @classmethod
    def toy(cls, **overrides):
        d_clip, d_dino = overrides.pop("d_clip", TOY_DIMS[0]), overrides.pop("d_dino", TOY_DIMS[1])
        tg = overrides.pop("tempgeo", {})
        tg = tg if isinstance(tg, TempGeoConfig) else TempGeoConfig(width=d_clip + d_dino, **tg)
        return cls(d_clip=d_clip, d_dino=d_dino, tempgeo=tg, **overrides)

    @classmethod
    def full(cls, **overrides):
        return cls.toy(d_clip=FULL_DIMS[0], d_dino=FULL_DIMS[1], **overrides)

    def to_dict(self):
        d = asdict(self)
        d["proj_hidden"] = list(self.proj_hidden)
        d["sigmas"] = list(self.sigmas)
        return d


class VidTagModel(Module):
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        s = cfg.seed
        self.tempgeo = TempGeo(cfg.tempgeo, stream(s, "init", "tempgeo"), dtype) if cfg.use_tempgeo else None
        self.proj = FrameProjection(cfg.width, stream(s, "init", "proj"), cfg.proj_hidden, cfg.embed_dim, dtype)
        self.locenc = LocationEncoder(stream(s, "init", "locenc"), cfg.sigmas, cfg.rff_dim, cfg.loc_hidden,
                                      cfg.embed_dim, dtype)
        self.refiner = GeoRefiner(cfg.refiner, stream(s, "init", "refiner"), dtype)
        self.log_scale = Parameter(np.array(math.log(cfg.logit_scale_init), dtype=dtype))
        self.name_parameters()

    def name_parameters(self):
        for name, p in self.named_parameters():
            p.name = name

    def group(self, key):
        """Parameters whose names start with the prefix of component ``key``."""
        if key == "log_scale":
            return [self.log_scale]
        prefix = PREFIXES[key]
        return [p for n, p in self.named_parameters() if n.startswith(prefix)]

    # -- forward pieces --------------------------------------------------
    def align(self, fused, rng=None):
        """TempGeo over ``(B, T, D)`` fused frames; identity when bypassed."""
        if self.tempgeo is None:
            return as_input(fused, self.dtype)
        return self.tempgeo(fused, rng=rng)

    def frame_embeddings(self, fused, rng=None):
        """Unit frame embeddings with the input's leading shape and a trailing 512."""
        return self.proj(self.align(fused, rng=rng))

    def gps_embeddings(self, lat, lon):
        return ag.l2_normalize(self.locenc(lat, lon), axis=-1)

    def logit_scale(self):
        return ag.exp(ag.clip(self.log_scale, hi=math.log(self.cfg.logit_scale_max)))

    def embed_points(self, lat, lon, normalize=True):
        return embed_points(self.locenc, lat, lon, normalize=normalize)

    # -- persistence ------------------------------------------------------
    def save(self, path, phase, extra=None):
        path = Path(path)
        save_tensors(path, self.state_dict())
        meta = {"format": "VTCK", "phase": int(phase), "config": self.cfg.to_dict()}
        if extra:
            meta.update(extra)
        sidecar_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise GraphStateError(f"checkpoint {path} does not exist")
        side = sidecar_path(path)
        if not side.exists():
            raise FormatError("checkpoint sidecar missing", side)
        try:
            meta = json.loads(side.read_text())
            cfg = ModelConfig(**meta["config"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"unreadable checkpoint sidecar: {exc}", side) from None
        model = cls(cfg)
        try:
            model.load_state_dict(load_tensors(path))
        except (KeyError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"checkpoint does not match its config: {exc}", path) from None
        model.phase = int(meta.get("phase", 0))
        return model, meta


def sidecar_path(path):
    return Path(str(path) + ".json")
