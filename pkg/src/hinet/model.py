"""Two-stage restoration model: config, assembly, analyzer, checkpoints.

Each stage is a five-level U-Net. Encoder levels hold one half-instance
normalization block each (the norm slot is configurable for ablations),
with a 4x4 stride-2 conv between levels; the channel width of level i is
width(0) * 2^i, realized by each level's first conv. Decoder levels
upsample with a 2x2 transposed conv, fuse the same-scale encoder feature
(3x3 skip conv + channel concat) and apply a projection conv block. A
supervised attention module links stage 1 to stage 2, and per-scale
fusion convs add stage-1 encoder/decoder features into the stage-2
encoder. Both stages output residuals added to the input image.

`architecture_plan` is the single source of truth for every conv layer;
the builder instantiates parameters from it and the analyzer walks it
arithmetically, so parameter/MAC counts cannot drift from the built
model.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Parameter
from .blocks import (ConvParams, CsffParams, HinBlockParams, ParamStore,
                     ResBlockParams, SamParams, csff_apply, hin_block_forward,
                     make_csff, make_hin_block, make_res_block, make_sam,
                     res_block_forward, sam_forward)
from .ops import ConvSpec, NormKind, add, channel_concat, crop, pad_reflect_to_multiple
from .tensor import RngState, Shape4, ShapeError, Tensor

PAD_MULTIPLE = 16  # four halvings
CHECKPOINT_MAGIC = b"HINCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HinetConfig:
    """Complete architecture description."""

    base_width: int = 64
    scale_factor: float = 1.0
    levels: int = 5
    hin_mask: tuple = (True, True, True, True, True)
    norm_kind: NormKind = field(default_factory=lambda: NormKind("instance_half"))
    decoder_hin: bool = False
    deeper: bool = False
    img_channels: int = 3
    use_skips: bool = True
    use_csff: bool = True

    def width(self, level: int) -> int:
        return int(round(self.base_width * self.scale_factor)) * (2 ** level)

    def validate(self) -> "HinetConfig":
        if self.levels != 5:
            raise ConfigError(f"levels must be 5, got {self.levels}")
        if self.img_channels != 3:
            raise ConfigError(f"img_channels must be 3, got {self.img_channels}")
        if len(self.hin_mask) != self.levels:
            raise ConfigError(f"hin_mask needs {self.levels} flags, got {len(self.hin_mask)}")
        if self.width(0) < 1:
            raise ConfigError(f"effective base width round({self.base_width} * "
                              f"{self.scale_factor}) must be >= 1")
        split_variants = ("instance_half", "batch_then_instance_half")
        for i, active in enumerate(self.hin_mask):
            if not active:
                continue
            w = self.width(i)
            if self.norm_kind.variant in split_variants and w % 2:
                raise ConfigError(f"encoder level {i} width {w} must be even for "
                                  f"{self.norm_kind.variant}")
            if self.norm_kind.variant == "group" and w % self.norm_kind.groups:
                raise ConfigError(f"encoder level {i} width {w} not divisible by "
                                  f"{self.norm_kind.groups} groups")
        if self.decoder_hin and self.width(0) % 2:
            raise ConfigError(f"decoder HIN needs an even base width, got {self.width(0)}")
        return self


@dataclass
class StageOutputs:
    """Both restored images plus the features downstream consumers need."""

    r1: Tensor
    r2: Tensor
    sam_features: Tensor
    enc1: list
    dec1: list


# -- architecture plan --------------------------------------------------

@dataclass(frozen=True)
class ConvLayer:
    """One convolution in the network, with the dyadic scale of its output
    (spatial extent = input extent >> scale)."""

    name: str
    in_c: int
    out_c: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = True
    transposed: bool = False
    scale: int = 0

    @property
    def weight_count(self) -> int:
        return self.in_c * self.out_c * self.kernel * self.kernel + (self.out_c if self.bias else 0)

    def spec(self) -> ConvSpec:
        return ConvSpec(self.in_c, self.out_c, self.kernel, self.stride,
                        self.padding, self.bias)


def _block_layers(name: str, c_in: int, c_out: int, scale: int) -> list:
    return [
        ConvLayer(f"{name}.conv1", c_in, c_out, 3, 1, 1, True, scale=scale),
        ConvLayer(f"{name}.conv2", c_out, c_out, 3, 1, 1, True, scale=scale),
        ConvLayer(f"{name}.shortcut", c_in, c_out, 1, 1, 0, True, scale=scale),
    ]


def _res_layers(name: str, c: int, scale: int) -> list:
    return [
        ConvLayer(f"{name}.conv1", c, c, 3, 1, 1, True, scale=scale),
        ConvLayer(f"{name}.conv2", c, c, 3, 1, 1, True, scale=scale),
    ]


def architecture_plan(config: HinetConfig) -> list:
    """Every conv layer of the full two-stage model, in build order."""
    config.validate()
    L = config.levels
    img_c = config.img_channels
    w0 = config.width(0)
    layers: list[ConvLayer] = []

    def stage(prefix: str, second: bool):
        layers.append(ConvLayer(f"{prefix}.head", img_c, w0, 3, 1, 1, True, scale=0))
        if second:
            layers.append(ConvLayer(f"{prefix}.merge", 2 * w0, w0, 3, 1, 1, True, scale=0))
        prev = w0
        for i in range(L):
            wi = config.width(i)
            layers.extend(_block_layers(f"{prefix}.enc{i}", prev, wi, scale=i))
            if config.deeper:
                layers.extend(_res_layers(f"{prefix}.enc{i}.extra0", wi, i))
                layers.extend(_res_layers(f"{prefix}.enc{i}.extra1", wi, i))
            if i < L - 1:
                layers.append(ConvLayer(f"{prefix}.down{i}", wi, wi, 4, 2, 1,
                                        False, scale=i + 1))
            prev = wi
        if second and config.use_csff:
            for i in range(L - 1):
                wi = config.width(i)
                layers.append(ConvLayer(f"{prefix}.csff{i}.enc", wi, wi, 3, 1, 1,
                                        True, scale=i))
                layers.append(ConvLayer(f"{prefix}.csff{i}.dec", wi, wi, 3, 1, 1,
                                        True, scale=i))
        for i in reversed(range(L - 1)):
            wi = config.width(i)
            layers.append(ConvLayer(f"{prefix}.dec{i}.up", config.width(i + 1), wi,
                                    2, 2, 0, True, transposed=True, scale=i))
            block_in = wi
            if config.use_skips:
                layers.append(ConvLayer(f"{prefix}.dec{i}.skip", wi, wi, 3, 1, 1,
                                        True, scale=i))
                block_in = 2 * wi
            layers.extend(_block_layers(f"{prefix}.dec{i}", block_in, wi, scale=i))
            if config.deeper:
                layers.extend(_res_layers(f"{prefix}.dec{i}.extra0", wi, i))
                layers.extend(_res_layers(f"{prefix}.dec{i}.extra1", wi, i))
        if second:
            layers.append(ConvLayer(f"{prefix}.tail", w0, img_c, 3, 1, 1, True, scale=0))

    stage("stage1", second=False)
    layers.append(ConvLayer("sam.feat", w0, w0, 3, 1, 1, True, scale=0))
    layers.append(ConvLayer("sam.img", w0, img_c, 3, 1, 1, True, scale=0))
    layers.append(ConvLayer("sam.mask", img_c, w0, 3, 1, 1, True, scale=0))
    stage("stage2", second=True)
    return layers


def _norm_affine_count(config: HinetConfig) -> int:
    total = 0
    variant = config.norm_kind.variant
    for i, active in enumerate(config.hin_mask):
        if not active or variant == "none":
            continue
        w = config.width(i)
        if variant in ("instance_half",):
            total += 2 * (w // 2) * 2          # gamma+beta on half width, two stages
        elif variant == "batch_then_instance_half":
            total += 4 * (w // 2) * 2
        else:
            total += 2 * w * 2
    if config.decoder_hin:
        for i in range(config.levels - 1):
            total += 2 * (config.width(i) // 2) * 2
    return total


def count_params(config: HinetConfig) -> int:
    """Learnable parameter count (running statistics excluded)."""
    return sum(layer.weight_count for layer in architecture_plan(config)) \
        + _norm_affine_count(config)


def _padded_extent(extent: int) -> int:
    return extent + ((-extent) % PAD_MULTIPLE)


def count_macs(config: HinetConfig, input_shape) -> int:
    """Multiply-accumulate count: one MAC per kernel element per output
    element of every convolution (transposed included); bias,
    normalization and activations are excluded. Purely analytic.
    """
    n, c, h, w = input_shape
    if c != config.img_channels:
        raise ConfigError(f"input has {c} channels, model expects {config.img_channels}")
    h, w = _padded_extent(h), _padded_extent(w)
    total = 0
    for layer in architecture_plan(config):
        oh, ow = h >> layer.scale, w >> layer.scale
        total += layer.out_c * oh * ow * layer.in_c * layer.kernel * layer.kernel
    return int(n) * total


def level_widths(config: HinetConfig) -> list[int]:
    return [config.width(i) for i in range(config.levels)]


def block_inventory(config: HinetConfig) -> dict:
    """Counts of each block type across both stages."""
    L = config.levels
    enc_norm = sum(1 for f in config.hin_mask if f) if config.norm_kind.variant != "none" else 0
    inv = {
        "encoder_blocks": 2 * L,
        "encoder_norm_slots": 2 * enc_norm,
        "decoder_blocks": 2 * (L - 1),
        "decoder_norm_slots": 2 * (L - 1) if config.decoder_hin else 0,
        "res_blocks": 2 * 2 * (L + (L - 1)) if config.deeper else 0,
        "downsample_convs": 2 * (L - 1),
        "upsample_convs": 2 * (L - 1),
        "skip_convs": 2 * (L - 1) if config.use_skips else 0,
        "csff_conv_pairs": (L - 1) if config.use_csff else 0,
        "sam_modules": 1,
    }
    return inv


# -- model --------------------------------------------------------------

@dataclass
class _Stage:
    head: ConvParams
    merge: ConvParams | None
    enc_blocks: list
    enc_extras: list
    downs: list
    dec_ups: dict
    dec_skips: dict
    dec_blocks: dict
    dec_extras: dict
    csff: CsffParams | None
    tail: ConvParams | None


class Model:
    """Built two-stage network with named parameters."""

    def __init__(self, config: HinetConfig, rng: RngState):
        self.config = config.validate()
        self.store = ParamStore()
        self.last_padding = (0, 0)
        self.sam: SamParams | None = None
        self.stage1 = self._build_stage("stage1", rng, second=False)
        self.sam = make_sam(self.store, "sam", config.width(0), config.img_channels, rng)
        self.stage2 = self._build_stage("stage2", rng, second=True)
        # image-producing convs start at zero so the fresh model is the
        # identity mapping and training descends from the degraded input's
        # own fidelity instead of from a scrambled image
        for name in ("sam.img.weight", "stage2.tail.weight"):
            p = self.store.params[name]
            p.assign(Tensor.zeros(p.value.shape, dtype=p.value.dtype))

    # construction mirrors architecture_plan ordering exactly
    def _build_stage(self, prefix: str, rng: RngState, second: bool) -> _Stage:
        cfg = self.config
        store = self.store
        L = cfg.levels
        w0 = cfg.width(0)
        head = store.conv(f"{prefix}.head", ConvSpec(cfg.img_channels, w0, 3, 1, 1, True), rng)
        merge = None
        if second:
            merge = store.conv(f"{prefix}.merge", ConvSpec(2 * w0, w0, 3, 1, 1, True), rng)
        enc_blocks, enc_extras, downs = [], [], []
        prev = w0
        for i in range(L):
            wi = cfg.width(i)
            use_hin = bool(cfg.hin_mask[i]) and cfg.norm_kind.variant == "instance_half"
            kind = cfg.norm_kind if cfg.hin_mask[i] else NormKind("none")
            enc_blocks.append(make_hin_block(store, f"{prefix}.enc{i}", prev, wi, rng,
                                             use_hin=use_hin,
                                             norm_kind=kind if not use_hin else NormKind("none")))
            extras = []
            if cfg.deeper:
                extras.append(make_res_block(store, f"{prefix}.enc{i}.extra0", wi, rng))
                extras.append(make_res_block(store, f"{prefix}.enc{i}.extra1", wi, rng))
            enc_extras.append(extras)
            if i < L - 1:
                downs.append(store.conv(f"{prefix}.down{i}", ConvSpec(wi, wi, 4, 2, 1, False),
                                        rng))
            prev = wi
        csff = None
        if second and cfg.use_csff:
            csff = make_csff(store, f"{prefix}.csff", [cfg.width(i) for i in range(L - 1)],
                             rng)
        dec_ups, dec_skips, dec_blocks, dec_extras = {}, {}, {}, {}
        for i in reversed(range(L - 1)):
            wi = cfg.width(i)
            dec_ups[i] = store.conv(f"{prefix}.dec{i}.up",
                                    ConvSpec(cfg.width(i + 1), wi, 2, 2, 0, True),
                                    rng, transposed=True)
            block_in = wi
            if cfg.use_skips:
                dec_skips[i] = store.conv(f"{prefix}.dec{i}.skip",
                                          ConvSpec(wi, wi, 3, 1, 1, True), rng)
                block_in = 2 * wi
            else:
                dec_skips[i] = None
            dec_blocks[i] = make_hin_block(store, f"{prefix}.dec{i}", block_in, wi, rng,
                                           use_hin=cfg.decoder_hin)
            extras = []
            if cfg.deeper:
                extras.append(make_res_block(store, f"{prefix}.dec{i}.extra0", wi, rng))
                extras.append(make_res_block(store, f"{prefix}.dec{i}.extra1", wi, rng))
            dec_extras[i] = extras
        tail = None
        if second:
            tail = store.conv(f"{prefix}.tail", ConvSpec(w0, cfg.img_channels, 3, 1, 1, True),
                              rng)
        return _Stage(head, merge, enc_blocks, enc_extras, downs,
                      dec_ups, dec_skips, dec_blocks, dec_extras, csff, tail)

    # -- parameter access -------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.store.params.values())

    def named_parameters(self) -> dict:
        return dict(self.store.params)

    def zero_grad(self) -> None:
        for p in self.store.params.values():
            p.zero_grad()

    def zero_parameters(self) -> None:
        """Set every parameter (and running stat) to zero; identity model."""
        for p in self.store.params.values():
            p.assign(Tensor.zeros(p.value.shape, dtype=p.value.dtype))
        for buf in self.store.buffers.values():
            buf[:] = 0.0

    # -- forward ------------------------------------------------------

    def _run_stage(self, sp: _Stage, feat, enc_prev, dec_prev, train: bool):
        cfg = self.config
        L = cfg.levels
        csff_adds = None
        if sp.csff is not None and enc_prev is not None:
            csff_adds = csff_apply(enc_prev, dec_prev, sp.csff)
        enc_feats = []
        x = feat
        for i in range(L):
            x = hin_block_forward(x, sp.enc_blocks[i], train)
            for rb in sp.enc_extras[i]:
                x = res_block_forward(x, rb)
            if i < L - 1:
                if csff_adds is not None:
                    x = add(x, csff_adds[i])
                enc_feats.append(x)
                x = sp.downs[i](x)
        dec_feats = [None] * (L - 1)
        for i in reversed(range(L - 1)):
            x = sp.dec_ups[i](x)
            if cfg.use_skips:
                bridge = sp.dec_skips[i](enc_feats[i])
                x = channel_concat(x, bridge)
            x = hin_block_forward(x, sp.dec_blocks[i], train)
            for rb in sp.dec_extras[i]:
                x = res_block_forward(x, rb)
            dec_feats[i] = x
        return x, enc_feats, dec_feats

    def forward(self, x_img: Tensor, train: bool = False) -> StageOutputs:
        if x_img.shape.c != self.config.img_channels:
            raise ShapeError(f"input must have {self.config.img_channels} channels, "
                             f"got {x_img.shape.c}")
        h, w = x_img.shape.h, x_img.shape.w
        x_pad, padding = pad_reflect_to_multiple(x_img, PAD_MULTIPLE)
        self.last_padding = padding

        f1 = self.stage1.head(x_pad)
        x1, enc1, dec1 = self._run_stage(self.stage1, f1, None, None, train)
        sam_feat, r1 = sam_forward(x1, x_pad, self.sam)

        f2 = self.stage2.head(x_pad)
        f2 = self.stage2.merge(channel_concat(f2, sam_feat))
        x2, _, _ = self._run_stage(self.stage2, f2, enc1, dec1, train)
        r2 = add(self.stage2.tail(x2), x_pad)

        if padding != (0, 0):
            r1, r2 = crop(r1, h, w), crop(r2, h, w)
        return StageOutputs(r1, r2, sam_feat, enc1, dec1)


def build(config: HinetConfig, rng: RngState) -> Model:
    """Instantiate the model with fan-in Gaussian conv weights, zero
    biases, unit gamma / zero beta; deterministic for a fixed rng."""
    return Model(config, rng)


# -- config echo --------------------------------------------------------

_CONFIG_KEYS = ("base_width", "scale_factor", "levels", "hin_mask", "norm",
                "groups", "decoder_hin", "deeper", "img_channels",
                "use_skips", "use_csff")


def config_to_text(config: HinetConfig) -> str:
    values = {
        "base_width": str(config.base_width),
        "scale_factor": repr(float(config.scale_factor)),
        "levels": str(config.levels),
        "hin_mask": ",".join("1" if f else "0" for f in config.hin_mask),
        "norm": config.norm_kind.variant,
        "groups": str(config.norm_kind.groups),
        "decoder_hin": "true" if config.decoder_hin else "false",
        "deeper": "true" if config.deeper else "false",
        "img_channels": str(config.img_channels),
        "use_skips": "true" if config.use_skips else "false",
        "use_csff": "true" if config.use_csff else "false",
    }
    return "".join(f"{k} = {values[k]}\n" for k in _CONFIG_KEYS)


def config_from_text(text: str) -> HinetConfig:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"bad config line {line!r}")
        key, _, val = line.partition("=")
        kv[key.strip()] = val.strip()
    missing = [k for k in _CONFIG_KEYS if k not in kv]
    if missing:
        raise CheckpointError(f"config echo missing keys {missing}")

    def flag(s):
        return {"true": True, "false": False}[s]

    return HinetConfig(
        base_width=int(kv["base_width"]),
        scale_factor=float(kv["scale_factor"]),
        levels=int(kv["levels"]),
        hin_mask=tuple(x == "1" for x in kv["hin_mask"].split(",")),
        norm_kind=NormKind(kv["norm"], int(kv["groups"])),
        decoder_hin=flag(kv["decoder_hin"]),
        deeper=flag(kv["deeper"]),
        img_channels=int(kv["img_channels"]),
        use_skips=flag(kv["use_skips"]),
        use_csff=flag(kv["use_csff"]),
    ).validate()


# -- checkpoint serialization -------------------------------------------

def _named_tensors(model: Model) -> list[tuple[str, np.ndarray]]:
    entries = [(name, p.value.data) for name, p in model.store.params.items()]
    for name, buf in model.store.buffers.items():
        entries.append((name, buf.reshape(1, buf.size, 1, 1)))
    return entries


def _write_entry(out, name: str, arr: np.ndarray) -> None:
    if arr.ndim != 4:
        arr = arr.reshape(1, arr.size, 1, 1)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    name_b = name.encode("utf-8")
    out.write(struct.pack("<H", len(name_b)))
    out.write(name_b)
    out.write(struct.pack("<4I", *arr.shape))
    out.write(arr.astype("<f4", copy=False).tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.buf = io.BytesIO(raw)

    def read(self, count: int) -> bytes:
        data = self.buf.read(count)
        if len(data) != count:
            raise CheckpointError("truncated checkpoint file")
        return data

    def entry(self) -> tuple[str, np.ndarray]:
        (name_len,) = struct.unpack("<H", self.read(2))
        name = self.read(name_len).decode("utf-8")
        shape = struct.unpack("<4I", self.read(16))
        size = int(np.prod(shape))
        payload = self.read(4 * size)
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        return name, arr


def save_checkpoint(model: Model, optimizer_state: dict | None, path) -> None:
    """Write magic, version, config echo, named tensor directory and the
    optimizer section (step counter plus first/second moments)."""
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_text = config_to_text(model.config).encode("utf-8")
    out.write(struct.pack("<I", len(cfg_text)))
    out.write(cfg_text)
    entries = _named_tensors(model)
    out.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        _write_entry(out, name, arr)
    if optimizer_state is None:
        out.write(struct.pack("<B", 0))
    else:
        out.write(struct.pack("<B", 1))
        out.write(struct.pack("<Q", int(optimizer_state["step"])))
        moments = []
        for prefix in ("m", "v"):
            for name, arr in optimizer_state[prefix].items():
                moments.append((f"{name}.{prefix}", arr))
        out.write(struct.pack("<I", len(moments)))
        for name, arr in moments:
            _write_entry(out, name, arr)
    data = out.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path, model: Model | None = None) -> tuple[Model, dict | None]:
    """Rebuild (or validate against) a model and restore every tensor.

    Rejects wrong magic/version, truncation, and any name or shape
    mismatch against the instantiated model, naming the first offender.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    if r.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", r.read(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, "
                              f"expected {CHECKPOINT_VERSION}")
    (cfg_len,) = struct.unpack("<I", r.read(4))
    config = config_from_text(r.read(cfg_len).decode("utf-8"))
    if model is None:
        model = build(config, RngState(0))
    (n_entries,) = struct.unpack("<I", r.read(4))
    loaded = {}
    for _ in range(n_entries):
        name, arr = r.entry()
        loaded[name] = arr

    for name, param in model.store.params.items():
        if name not in loaded:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        arr = loaded.pop(name)
        if tuple(arr.shape) != tuple(param.value.shape):
            raise CheckpointError(f"parameter {name!r}: checkpoint shape "
                                  f"{tuple(arr.shape)} does not match model "
                                  f"{tuple(param.value.shape)}")
        param.assign(Tensor(arr, _checked=True))
    for name, buf in model.store.buffers.items():
        if name not in loaded:
            raise CheckpointError(f"checkpoint missing buffer {name!r}")
        arr = loaded.pop(name)
        if arr.size != buf.size:
            raise CheckpointError(f"buffer {name!r}: checkpoint has {arr.size} "
                                  f"values, model expects {buf.size}")
        buf[:] = arr.reshape(buf.shape)
    if loaded:
        raise CheckpointError(f"checkpoint holds unknown tensor {sorted(loaded)[0]!r}")

    (has_opt,) = struct.unpack("<B", r.read(1))
    optimizer_state = None
    if has_opt:
        (step,) = struct.unpack("<Q", r.read(8))
        (n_moments,) = struct.unpack("<I", r.read(4))
        optimizer_state = {"step": step, "m": {}, "v": {}}
        for _ in range(n_moments):
            name, arr = r.entry()
            base, _, kind = name.rpartition(".")
            if kind not in ("m", "v") or base not in model.store.params:
                raise CheckpointError(f"unknown optimizer tensor {name!r}")
            expect = tuple(model.store.params[base].value.shape)
            if tuple(arr.shape) != expect:
                raise CheckpointError(f"optimizer tensor {name!r}: shape "
                                      f"{tuple(arr.shape)} does not match {expect}")
            optimizer_state[kind][base] = arr
    if r.buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return model, optimizer_state
