"""Model assembly: parameter shape tables, seeded initialization, and the
forward pass combining the ViT backbone with the optional prompt-adapter
branch.

Parameters are held in an ordered name -> Tensor dict.  Naming scheme:

    patch_embed.{weight,bias}, cls_token, pos_embed
    block{l}.ln1.{gamma,beta}, block{l}.attn.{wq,wk,wv,wo}.{weight,bias},
    block{l}.ln2.{gamma,beta}, block{l}.ffn.{w1,w2}.{weight,bias}
    prompts
    adapter{k}.down.{weight,bias}, adapter{k}.up.{weight,bias}, adapter{k}.gate
    head.{weight,bias}

Adapter blocks are shared across consecutive layers: layer l uses block
floor(l / share_every), as the same Tensor objects, so gradients
accumulate across the layers that share them.
"""

import numpy as np

from . import peft, vit
from .peft import DvptConfig, FreezePolicy, build_sharing_map
from .tensor import Tensor
from .vit import ConfigError, VitConfig

TASKS = ("classification", "segmentation")

BACKBONE_PREFIXES = ("patch_embed.", "cls_token", "pos_embed", "block")


def is_backbone_param(name):
    """Backbone = shared pre-trained weights; excludes head, prompts, adapters."""
    return name.startswith(BACKBONE_PREFIXES)


def param_shapes(cfg, dvpt_cfg=None, prompts_only=False):
    """Ordered name -> shape table for a model configuration.

    The accountant uses this directly so paper-scale configurations can be
    counted without allocating the tensors.
    """
    cfg.validate()
    d = cfg.embed_dim
    shapes = {
        "patch_embed.weight": (cfg.patch_size ** 2 * cfg.channels, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, 1, d),
        "pos_embed": (cfg.num_patches + 1, d),
    }
    for layer in range(cfg.depth):
        p = f"block{layer}"
        shapes[f"{p}.ln1.gamma"] = (d,)
        shapes[f"{p}.ln1.beta"] = (d,)
        for role in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{role}.weight"] = (d, d)
            shapes[f"{p}.attn.{role}.bias"] = (d,)
        shapes[f"{p}.ln2.gamma"] = (d,)
        shapes[f"{p}.ln2.beta"] = (d,)
        shapes[f"{p}.ffn.w1.weight"] = (d, 4 * d)
        shapes[f"{p}.ffn.w1.bias"] = (4 * d,)
        shapes[f"{p}.ffn.w2.weight"] = (4 * d, d)
        shapes[f"{p}.ffn.w2.bias"] = (d,)
    if dvpt_cfg is not None:
        dvpt_cfg.validate(cfg)
        shapes["prompts"] = (dvpt_cfg.num_prompts, d)
        if not prompts_only:
            for k in range(dvpt_cfg.num_blocks(cfg.depth)):
                a = f"adapter{k}"
                shapes[f"{a}.down.weight"] = (d, dvpt_cfg.hidden_dim)
                shapes[f"{a}.down.bias"] = (dvpt_cfg.hidden_dim,)
                shapes[f"{a}.up.weight"] = (dvpt_cfg.hidden_dim, d)
                shapes[f"{a}.up.bias"] = (d,)
                shapes[f"{a}.gate"] = ()
    shapes["head.weight"] = (d, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def _truncated_normal(rng, shape, std, dtype):
    """Normal(0, std) with draws beyond 2 std resampled."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def init_params(shapes, gate_init=0.0, seed=0, dtype=np.float32, std=0.02):
    """Seeded initialization: truncated normal for weights, zeros for
    biases, LN gamma 1 / beta 0, gates at gate_init.  Deterministic in
    (seed, name order)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".gamma"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith((".bias", ".beta")):
            data = np.zeros(shape, dtype=dtype)
        elif name.endswith(".gate"):
            data = np.asarray(gate_init, dtype=dtype)
        else:
            data = _truncated_normal(rng, shape, std, dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


class Model:
    """ViT backbone plus optional prompt tokens and adapter blocks.

    ``dvpt_cfg=None`` gives a plain ViT; ``prompts_only=True`` keeps the
    prompt tokens but omits the adapter blocks (pure prompt tuning).
    """

    def __init__(self, cfg, dvpt_cfg=None, prompts_only=False,
                 task="classification", seed=0, dtype=np.float32):
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
        self.cfg = cfg.validate()
        self.dvpt_cfg = dvpt_cfg
        self.prompts_only = prompts_only
        self.task = task
        self.dtype = np.dtype(dtype)
        self.sharing = (
            build_sharing_map(cfg.depth, dvpt_cfg.share_every)
            if dvpt_cfg is not None and not prompts_only else None
        )
        shapes = param_shapes(cfg, dvpt_cfg, prompts_only)
        gate_init = dvpt_cfg.gate_init if dvpt_cfg is not None else 0.0
        self.params = init_params(shapes, gate_init=gate_init, seed=seed, dtype=dtype)

    @property
    def has_adapter(self):
        return self.sharing is not None

    def forward(self, images, use_adapter=True):
        """Images [batch, H, W, C] -> logits ([batch, K] or patch-grid).

        ``use_adapter=False`` excises the adapter branch while keeping the
        prompt-extended sequence, for branch-off comparisons.
        """
        seq = vit.patch_embed(images, self.params, self.cfg)
        if self.dvpt_cfg is not None:
            seq = peft.append_prompts(seq, self.params["prompts"])
        for layer in range(self.cfg.depth):
            if self.has_adapter and use_adapter:
                seq = peft.dvpt_block_forward(
                    seq, self.params, f"block{layer}",
                    f"adapter{self.sharing[layer]}", self.cfg,
                )
            else:
                seq = vit.block_forward(seq, self.params, f"block{layer}", self.cfg)
        if self.task == "classification":
            return vit.classification_head(seq, self.params)
        return vit.segmentation_head(seq, self.params, self.cfg)

    def trainable(self):
        """Ordered list of (name, tensor) with requires_grad set."""
        return [(n, t) for n, t in self.params.items() if t.requires_grad]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype):
        dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        self.dtype = dtype
        return self


def model_for_policy(cfg, dvpt_cfg, mode, task="classification",
                     seed=0, dtype=np.float32):
    """Build the model variant a freeze policy implies and apply it.

    full_finetune / linear_probe use the plain backbone, vpt_only adds
    prompt tokens, dvpt adds prompts and adapter blocks.
    """
    policy = FreezePolicy(mode)
    if mode in ("full_finetune", "linear_probe"):
        model = Model(cfg, None, task=task, seed=seed, dtype=dtype)
    elif mode == "vpt_only":
        if dvpt_cfg is None:
            raise ConfigError("vpt_only policy needs a dvpt config for the prompt count")
        model = Model(cfg, dvpt_cfg, prompts_only=True, task=task, seed=seed, dtype=dtype)
    else:
        if dvpt_cfg is None:
            raise ConfigError("dvpt policy needs a dvpt config")
        model = Model(cfg, dvpt_cfg, task=task, seed=seed, dtype=dtype)
    peft.apply_freeze_policy(model, policy)
    return model, policy
