#
# Attention Rollout, raw-attention summaries, and the attention rate
#
# See LICENSE.txt for license details.
#
"""
Attention summaries operate on :py:class:`~vitrojan.vit.AttentionTrace`
objects and stay differentiable, so trigger optimization can push gradients
through them. Every function accepts a single trace ([heads, T, T] per block)
or a batched one ([n, heads, T, T]); results carry the same leading axes.
"""
import numpy as np

from .core import VitrojanObject
from .error import DimensionError, StrategyError, UsageError
from .log import getLogger
from .tensor import Tensor, add, as_tensor, matmul, mean, normalize
from .utils import atomic_write

_logger = getLogger(__name__)

ROLLOUT = 'rollout'
RAW = 'raw'
STRATEGIES = (ROLLOUT, RAW)

# a patch is a trigger token when at least this share of its pixels is masked
TRIGGER_OVERLAP = 0.5


class RolloutMap(VitrojanObject):
    """
    A token-to-token attention matrix [..., T, T] summarizing the model up to
    block ``block``: the rollout product, or the head-averaged raw attention.
    """
    def __init__(self, matrix, block, strategy, has_cls, grid):
        self.matrix = matrix
        self.block = block
        self.strategy = strategy
        self.has_cls = has_cls
        self.grid = grid


class TokenAttentionVector(VitrojanObject):
    """
    One nonnegative attention value per patch token, [..., grid * grid],
    patches numbered row-major.
    """
    def __init__(self, values, grid):
        values = as_tensor(values)
        if values.shape[-1] != grid * grid:
            raise DimensionError(f"Token vector has {values.shape[-1]} entries; a {grid}x{grid} grid needs {grid * grid}")

        self.values = values
        self.grid = grid

    def __len__(self):
        return self.values.shape[-1]

    def numpy(self):
        return self.values.data

    def pooled(self):
        """
        Return the values averaged over any leading (sample) axes, as a numpy vector.
        """
        data = self.values.data
        return data.reshape(-1, data.shape[-1]).mean(axis=0)


def _identity_like(a):
    T = a.shape[-1]
    return Tensor(np.broadcast_to(np.eye(T), a.shape))


def _head_mean(attn):
    # attention is [..., heads, T, T]
    return mean(attn, axis=-3)


def _check_block(trace, block):
    if len(trace) == 0:
        raise UsageError("Attention trace is empty")

    block = len(trace) - 1 if block is None else block
    if not 0 <= block < len(trace):
        raise DimensionError(f"Block {block} is out of range for a trace of {len(trace)} blocks")
    return block


def rollout(trace, block=None, renormalize=True):
    """
    Attention Rollout up to ``block``: average the heads of each block, add the
    identity, optionally re-normalize rows, and multiply from the left, so
    ``R_0 = N(A_0 + I)`` and ``R_l = N(A_l + I) R_(l-1)``.

    :param trace: (AttentionTrace) attention of every block
    :param block: (int) last block included; default the last block
    :param renormalize: (bool) divide rows by their sums after adding I
    :return: (RolloutMap)
    """
    block = _check_block(trace, block)

    result = None
    for l in range(block + 1):
        a = _head_mean(trace[l])
        a = add(a, _identity_like(a))
        if renormalize:
            a = normalize(a, axis=-1)
        result = a if result is None else matmul(a, result)

    return RolloutMap(result, block, ROLLOUT, trace.has_cls, trace.grid)


def raw_map(trace, block=None):
    """
    Head-averaged raw attention of ``block`` (default the last block).
    """
    block = _check_block(trace, block)
    return RolloutMap(_head_mean(trace[block]), block, RAW, trace.has_cls, trace.grid)


def default_strategy(has_cls):
    return ROLLOUT if has_cls else RAW


def attention_to_tokens(source, strategy=None, block=None):
    """
    Reduce a map or trace to one attention value per patch token.

    With the rollout strategy, the result is the CLS row of the rollout matrix
    restricted to patch tokens. With the raw strategy, it is the head-averaged
    attention of ``block`` averaged over all query tokens, per key patch token.

    :param source: (RolloutMap or AttentionTrace)
    :param strategy: (str) 'rollout' or 'raw'; default: the map's strategy, or
        rollout for models with a CLS token and raw otherwise
    :param block: (int) block used when ``source`` is a trace
    :return: (TokenAttentionVector)
    :raises StrategyError: for rollout on a model without a CLS token, or an
        unknown strategy
    """
    if strategy is None:
        strategy = source.strategy if isinstance(source, RolloutMap) else default_strategy(source.has_cls)

    if strategy not in STRATEGIES:
        raise StrategyError(f"Unknown attention strategy '{strategy}'; must be one of {STRATEGIES}")

    if strategy == ROLLOUT and not source.has_cls:
        raise StrategyError("Rollout token attention requires a model with a CLS token; use the raw strategy")

    if isinstance(source, RolloutMap):
        if source.strategy != strategy:
            raise StrategyError(f"Map was built with strategy '{source.strategy}', not '{strategy}'")
        amap = source
    else:
        amap = rollout(source, block) if strategy == ROLLOUT else raw_map(source, block)

    first = 1 if amap.has_cls else 0
    if strategy == ROLLOUT:
        values = amap.matrix[..., 0, first:]
    else:
        values = mean(amap.matrix, axis=-2)[..., first:]

    return TokenAttentionVector(values, amap.grid)


def token_attention(model, images, strategy=None, block=None):
    """
    Run ``model`` on ``images`` and return the batched token attention vector.
    """
    from .vit import forward

    _, trace = forward(model, images, capture_attention=True)
    return attention_to_tokens(trace, strategy=strategy, block=block)


def trigger_tokens(mask, grid):
    """
    Return a boolean vector over patch tokens marking those with at least half
    of their pixels under ``mask``.

    :param mask: (array) 0/1 pixel mask [h, w]
    :param grid: (int) patches per side
    """
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    if h != w or h % grid:
        raise DimensionError(f"Mask of shape {mask.shape} does not fit a {grid}x{grid} patch grid")

    p = h // grid
    coverage = mask.reshape(grid, p, grid, p).mean(axis=(1, 3))
    return (coverage >= TRIGGER_OVERLAP).reshape(-1)


def attention_rate(vec, mask):
    """
    Mean attention on trigger tokens divided by mean attention on the other
    tokens. Batched vectors are averaged over samples first.

    :param vec: (TokenAttentionVector)
    :param mask: (TriggerSpec or array) the trigger, or its pixel mask
    :return: (float) the rate, or ``inf`` if the background receives no attention
    """
    mask = getattr(mask, 'mask', mask)
    on_trigger = trigger_tokens(mask, vec.grid)
    if not on_trigger.any():
        raise DimensionError("The trigger mask covers no patch token")

    values = vec.pooled()
    background = values[~on_trigger]
    if background.size == 0 or background.mean() == 0:
        return float('inf')

    return float(values[on_trigger].mean() / background.mean())


def upsample(vec, patch_size):
    """
    Expand pooled token values to a [grid * p, grid * p] pixel map.
    """
    grid = vec.grid
    return np.kron(vec.pooled().reshape(grid, grid), np.ones((patch_size, patch_size)))


def save_heatmap(path, vectors, patch_size, titles=None, image=None):
    """
    Write a PNG with one panel per token attention vector, upsampled to pixels.

    :param path: (str) the PNG pathname
    :param vectors: (list of TokenAttentionVector)
    :param patch_size: (int) pixels per patch side
    :param titles: (list of str) optional panel titles
    :param image: (array or None) an optional [c, h, w] image shown under each map
    """
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(vectors), figsize=(3 * len(vectors), 3), squeeze=False)
    for i, (ax, vec) in enumerate(zip(axes[0], vectors)):
        if image is not None:
            ax.imshow(np.transpose(image, (1, 2, 0)).squeeze(), cmap='gray')
        ax.imshow(upsample(vec, patch_size), cmap='inferno', alpha=0.6 if image is not None else 1.0)
        ax.set_axis_off()
        if titles:
            ax.set_title(titles[i])

    fig.tight_layout()
    with atomic_write(path, 'wb') as f:
        fig.savefig(f, format='png')
    plt.close(fig)
    _logger.debug(f"Wrote attention heatmap {path}")
