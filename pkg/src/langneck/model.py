"""Vision encoder -> text decoder -> soft-word bottleneck -> linear head.

The decoder reads `n` trainable soft prompts, cross-attends to the patch
embeddings, and produces `n` vocabulary distributions. Their expectation under
the word-embedding matrix E (soft words) is mean pooled and classified. The
output projection is tied to E, so an argmax index directly names the row the
hard-token path feeds to the head.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from langneck.data import BOS
from langneck.errors import ArgumentError, ConfigError, DimensionError
from langneck.storage import load_checkpoint, save_checkpoint
from langneck.tensor import (
    Tensor,
    add,
    concat,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    mean,
    no_grad,
    reshape,
    scaled_dot_attention,
    slice_,
    softmax,
    transpose,
)

SOFT_PROMPT = "soft_prompt"
HEAD_WEIGHT = "head.weight"
HEAD_BIAS = "head.bias"
EMBEDDING = "decoder.embedding"
TRAINABLE_NAMES = (SOFT_PROMPT, HEAD_WEIGHT, HEAD_BIAS)
PROMPT_INIT_STD = 0.02
POSITION_INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int = 59
    d_model: int = 64
    n_heads: int = 4
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    mlp_ratio: int = 4
    patch_size: int = 4
    image_size: int = 32
    n_prompt: int = 8
    n_classes: int = 16
    max_positions: int = 32
    prompt_bos: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ArgumentError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.image_size % self.patch_size:
            raise DimensionError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        if self.n_prompt < 1:
            raise ArgumentError("n_prompt must be at least 1")
        needed = 2 * self.n_prompt + 1
        if self.max_positions < needed:
            raise ArgumentError(f"max_positions must be at least {needed} for n_prompt={self.n_prompt}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class BottleneckOutput:
    logits: Tensor
    soft_words: Tensor
    pooled: Tensor
    hard_tokens: np.ndarray


class ModelParams:
    """All learnable arrays, by name; exactly soft_prompt and head train once the backbone is frozen."""

    def __init__(self, config: ModelConfig, tensors: Dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        if self.tensors[EMBEDDING].shape[0] != config.vocab_size:
            raise DimensionError("Embedding rows must equal the vocabulary size")
        self.freeze_backbone()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    @property
    def embedding(self) -> Tensor:
        return self.tensors[EMBEDDING]

    @property
    def backbone_names(self) -> List[str]:
        return [n for n in self.tensors if n not in TRAINABLE_NAMES]

    @property
    def frozen_mask(self) -> Dict[str, bool]:
        return {name: not t.requires_grad for name, t in self.tensors.items()}

    def trainable(self) -> List[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def set_trainable(self, names: Sequence[str]):
        wanted = set(names)
        for name, tensor in self.tensors.items():
            tensor.requires_grad = name in wanted
            tensor.grad = None

    def freeze_backbone(self):
        self.set_trainable(TRAINABLE_NAMES)

    def unfreeze_backbone(self):
        self.set_trainable(self.backbone_names)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        clone = ModelParams(self.config, {n: Tensor(t.data, name=n) for n, t in self.tensors.items()})
        clone.set_trainable([n for n, t in self.tensors.items() if t.requires_grad])
        return clone


def _param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, hidden = config.d_model, config.d_model * config.mlp_ratio
    patch_dim = config.patch_size * config.patch_size * 3
    shapes: Dict[str, Tuple[int, ...]] = {
        "encoder.patch.weight": (patch_dim, d),
        "encoder.patch.bias": (d,),
        "encoder.pos": (config.num_patches, d),
    }

    def attention(prefix: str):
        for proj in ("q", "k", "v", "o"):
            shapes[f"{prefix}.{proj}.weight"] = (d, d)
            shapes[f"{prefix}.{proj}.bias"] = (d,)

    def norm(prefix: str):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    def mlp(prefix: str):
        shapes[f"{prefix}.fc1.weight"] = (d, hidden)
        shapes[f"{prefix}.fc1.bias"] = (hidden,)
        shapes[f"{prefix}.fc2.weight"] = (hidden, d)
        shapes[f"{prefix}.fc2.bias"] = (d,)

    for i in range(config.encoder_blocks):
        norm(f"encoder.blocks.{i}.ln1")
        attention(f"encoder.blocks.{i}.attn")
        norm(f"encoder.blocks.{i}.ln2")
        mlp(f"encoder.blocks.{i}.mlp")
    norm("encoder.ln_f")

    shapes[EMBEDDING] = (config.vocab_size, d)
    shapes["decoder.pos"] = (config.max_positions, d)
    for i in range(config.decoder_blocks):
        norm(f"decoder.blocks.{i}.ln1")
        attention(f"decoder.blocks.{i}.self_attn")
        norm(f"decoder.blocks.{i}.ln2")
        attention(f"decoder.blocks.{i}.cross_attn")
        norm(f"decoder.blocks.{i}.ln3")
        mlp(f"decoder.blocks.{i}.mlp")
    norm("decoder.ln_f")

    shapes[SOFT_PROMPT] = (config.n_prompt, d)
    shapes[HEAD_WEIGHT] = (config.n_classes, d)
    shapes[HEAD_BIAS] = (config.n_classes,)
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors: Dict[str, Tensor] = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".bias"):
            value = np.zeros(shape)
        elif name == SOFT_PROMPT:
            value = rng.normal(0.0, PROMPT_INIT_STD, shape)
        elif name.endswith(".pos"):
            value = rng.normal(0.0, POSITION_INIT_STD, shape)
        elif name == EMBEDDING:
            value = rng.normal(0.0, config.d_model**-0.5, shape)
        elif name == HEAD_WEIGHT:
            value = rng.normal(0.0, 0.02, shape)
        else:
            value = rng.normal(0.0, shape[0] ** -0.5, shape)
        tensors[name] = Tensor(value, name=name)
    return ModelParams(config, tensors)


def _linear(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return add(matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def _norm(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, length, width = x.shape
    return transpose(reshape(x, (batch, length, heads, width // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, length, width = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (batch, length, heads * width))


def _attention(params: ModelParams, prefix: str, x: Tensor, context: Optional[Tensor] = None, causal: bool = False) -> Tensor:
    heads = params.config.n_heads
    source = x if context is None else context
    q = _split_heads(_linear(params, f"{prefix}.q", x), heads)
    k = _split_heads(_linear(params, f"{prefix}.k", source), heads)
    v = _split_heads(_linear(params, f"{prefix}.v", source), heads)
    return _linear(params, f"{prefix}.o", _merge_heads(scaled_dot_attention(q, k, v, causal=causal)))


def _mlp(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return _linear(params, f"{prefix}.fc2", gelu(_linear(params, f"{prefix}.fc1", x)))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """B x H x W x 3 -> B x T x (patch*patch*3), patches in row-major order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise DimensionError(f"images must be B x H x W x 3, got {images.shape}")
    batch, height, width, _ = images.shape
    if height % patch or width % patch:
        raise DimensionError(f"image {height}x{width} is not divisible by patch size {patch}")
    rows, cols = height // patch, width // patch
    blocks = images.reshape(batch, rows, patch, cols, patch, 3).transpose(0, 1, 3, 2, 4, 5)
    return blocks.reshape(batch, rows * cols, patch * patch * 3)


def encode_image(params: ModelParams, images) -> Tensor:
    """Patch embeddings after the encoder blocks: B x T x d."""
    images = images.data if isinstance(images, Tensor) else images
    patches = patchify(images, params.config.patch_size)
    if patches.shape[1] != params["encoder.pos"].shape[0]:
        raise DimensionError(
            f"{patches.shape[1]} patches do not match the encoder's {params['encoder.pos'].shape[0]} positions"
        )
    x = add(_linear(params, "encoder.patch", Tensor(patches)), params["encoder.pos"])
    for i in range(params.config.encoder_blocks):
        prefix = f"encoder.blocks.{i}"
        x = add(x, _attention(params, f"{prefix}.attn", _norm(params, f"{prefix}.ln1", x)))
        x = add(x, _mlp(params, f"{prefix}.mlp", _norm(params, f"{prefix}.ln2", x)))
    return _norm(params, "encoder.ln_f", x)


def run_decoder(params: ModelParams, inputs: Tensor, image_emb: Optional[Tensor] = None) -> Tensor:
    """Causal decoder over input embeddings (B x L x d); returns next-token logits B x L x V.

    Without `image_emb` the cross-attention sublayers are skipped.
    """
    length = inputs.shape[1]
    if length > params.config.max_positions:
        raise DimensionError(f"sequence of {length} exceeds {params.config.max_positions} positions")
    x = add(inputs, slice_(params["decoder.pos"], slice(0, length)))
    for i in range(params.config.decoder_blocks):
        prefix = f"decoder.blocks.{i}"
        x = add(x, _attention(params, f"{prefix}.self_attn", _norm(params, f"{prefix}.ln1", x), causal=True))
        if image_emb is not None:
            x = add(x, _attention(params, f"{prefix}.cross_attn", _norm(params, f"{prefix}.ln2", x), context=image_emb))
        x = add(x, _mlp(params, f"{prefix}.mlp", _norm(params, f"{prefix}.ln3", x)))
    hidden = _norm(params, "decoder.ln_f", x)
    return matmul(hidden, transpose(params.embedding))


def _prompt_prefix(params: ModelParams, batch: int) -> Tensor:
    n, d = params[SOFT_PROMPT].shape
    prompts = add(reshape(params[SOFT_PROMPT], (1, n, d)), Tensor(np.zeros((batch, 1, 1))))
    if not params.config.prompt_bos:
        return prompts
    bos = embedding_lookup(params.embedding, np.full((batch, 1), BOS))
    return concat([bos, prompts], axis=1)


def decode_soft(params: ModelParams, image_emb: Tensor) -> Tensor:
    """Next-token logits at each soft-prompt position: B x n x V."""
    prefix = _prompt_prefix(params, image_emb.shape[0])
    logits = run_decoder(params, prefix, image_emb)
    if params.config.prompt_bos:
        logits = slice_(logits, (slice(None), slice(1, None)))
    return logits


def soft_bottleneck(logits: Tensor, embedding: Tensor) -> Tuple[Tensor, Tensor]:
    """soft_words = softmax(logits) E; pooled = mean of soft words over the n positions."""
    if logits.shape[-1] != embedding.shape[0]:
        raise DimensionError(f"logits width {logits.shape[-1]} does not match {embedding.shape[0]} embedding rows")
    soft_words = matmul(softmax(logits), embedding)
    return soft_words, mean(soft_words, axis=-2)


def hard_decode(logits, special_ids: Sequence[int]) -> np.ndarray:
    """Per-position argmax over non-special tokens; ties go to the lowest id."""
    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    masked = values.copy()
    masked[..., list(special_ids)] = -np.inf
    return np.argmax(masked, axis=-1)


def classify(params: ModelParams, pooled: Tensor) -> Tensor:
    """W pooled + b for a single d-vector or a B x d batch."""
    if pooled.ndim == 1:
        return reshape(classify(params, reshape(pooled, (1, pooled.shape[0]))), (params.config.n_classes,))
    return add(matmul(pooled, transpose(params[HEAD_WEIGHT])), params[HEAD_BIAS])


def forward_soft(
    params: ModelParams,
    images,
    special_ids: Sequence[int],
    image_emb: Optional[Tensor] = None,
) -> Tuple[Tensor, BottleneckOutput]:
    """The end-to-end differentiable path; returns class logits and the bottleneck."""
    if image_emb is None:
        image_emb = encode_image(params, images)
    logits = decode_soft(params, image_emb)
    soft_words, pooled = soft_bottleneck(logits, params.embedding)
    bottleneck = BottleneckOutput(
        logits=logits,
        soft_words=soft_words,
        pooled=pooled,
        hard_tokens=hard_decode(logits, special_ids),
    )
    return classify(params, pooled), bottleneck


def classify_tokens(params: ModelParams, tokens) -> Tensor:
    """Mean-pool the embedding rows of B x n token ids and classify."""
    return classify(params, mean(embedding_lookup(params.embedding, tokens), axis=-2))


def forward_hard(
    params: ModelParams,
    images,
    special_ids: Sequence[int],
    image_emb: Optional[Tensor] = None,
) -> Tuple[Tensor, np.ndarray]:
    """Validation path: the head sees only the argmax words. Returns class logits and the B x n token ids."""
    with no_grad():
        if image_emb is None:
            image_emb = encode_image(params, images)
        tokens = hard_decode(decode_soft(params, image_emb), special_ids)
        return classify_tokens(params, tokens), tokens


def _greedy(params: ModelParams, prefix: Tensor, image_emb: Tensor, steps: int, banned: np.ndarray, repeat: bool) -> np.ndarray:
    rows = np.arange(prefix.shape[0])
    sequence = prefix
    emitted = []
    for _ in range(steps):
        logits = run_decoder(params, sequence, image_emb).data[:, -1, :]
        token = np.argmax(np.where(banned, -np.inf, logits), axis=-1)
        if not repeat:
            banned[rows, token] = True
        emitted.append(token)
        sequence = concat([sequence, embedding_lookup(params.embedding, token[:, None])], axis=1)
    return np.stack(emitted, axis=1)


def sample_no_repetition(params: ModelParams, image_emb: Tensor, n: int, special_ids: Sequence[int]) -> np.ndarray:
    """Greedy decoding after the soft-prompt prefix, masking specials and every emitted id: B x n."""
    vocab = params.config.vocab_size
    if n > vocab - len(special_ids):
        raise ArgumentError(f"Cannot emit {n} distinct words from {vocab - len(special_ids)} non-special tokens")
    batch = image_emb.shape[0]
    with no_grad():
        banned = np.zeros((batch, vocab), dtype=bool)
        banned[:, list(special_ids)] = True
        return _greedy(params, _prompt_prefix(params, batch), image_emb, n, banned, repeat=False)


def greedy_caption(params: ModelParams, image_emb: Tensor, length: int, special_ids: Sequence[int]) -> np.ndarray:
    """The captioner's own greedy caption from BOS (repetition allowed): B x length."""
    batch = image_emb.shape[0]
    with no_grad():
        banned = np.zeros((batch, params.config.vocab_size), dtype=bool)
        banned[:, list(special_ids)] = True
        bos = embedding_lookup(params.embedding, np.full((batch, 1), BOS))
        return _greedy(params, bos, image_emb, length, banned, repeat=True)


def teacher_forced_logits(params: ModelParams, image_emb: Tensor, input_ids: np.ndarray) -> Tensor:
    return run_decoder(params, embedding_lookup(params.embedding, input_ids), image_emb)


def save_model(path, params: ModelParams, metadata: Dict[str, Any], dtype: str = "f4"):
    meta = dict(metadata)
    meta["model_config"] = asdict(params.config)
    save_checkpoint(path, params.arrays(), meta, dtype=dtype)


def load_model(path, expected_vocab_hash: Optional[str] = None) -> Tuple[ModelParams, Dict[str, Any]]:
    """Load a checkpoint; refuses one trained for a different vocabulary."""
    ckpt = load_checkpoint(path)
    meta = ckpt.metadata
    if expected_vocab_hash is not None and meta.get("vocab_hash") != expected_vocab_hash:
        raise ConfigError(f"Checkpoint {path} was trained for a different vocabulary")
    try:
        config = ModelConfig(**meta["model_config"])
    except (KeyError, TypeError) as e:
        raise ConfigError(f"Checkpoint {path} has no usable model config: {e}")
    expected = _param_shapes(config)
    missing = sorted(set(expected) - set(ckpt.arrays))
    if missing:
        raise ConfigError(f"Checkpoint {path} is missing arrays: {', '.join(missing[:5])}")
    for name, shape in expected.items():
        if ckpt.arrays[name].shape != shape:
            raise ConfigError(f"Checkpoint array {name} has shape {ckpt.arrays[name].shape}, expected {shape}")
    tensors = {name: Tensor(ckpt.arrays[name], name=name) for name in expected}
    return ModelParams(config, tensors), meta
