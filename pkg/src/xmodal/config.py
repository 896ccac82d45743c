"""Key=value configuration with a closed, documented key registry.

Files are UTF-8 lines of `namespace.key=value`; '#' starts a comment.
Unknown keys are rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (default, parser, help)
DEFAULTS: dict[str, tuple] = {
    "data.dir": ("dataset", str, "dataset directory name inside the working directory"),
    "data.colors": ("red,green,blue,yellow", str, "comma-separated color names"),
    "data.shapes": ("circle,square,triangle,cross", str, "comma-separated shape names"),
    "data.image_size": (32, int, "square image resolution; must equal the top branch resolution"),
    "data.samples_per_class": (24, int, "generated samples per class"),
    "data.jitter_pos": (3.0, float, "position jitter in pixels"),
    "data.jitter_scale": (0.15, float, "relative scale jitter"),

    "image_ae.branches": (3, int, "generator branches; resolution doubles per branch"),
    "image_ae.base_res": (8, int, "resolution of the first branch"),
    "image_ae.d_img": (64, int, "image embedding dimension"),
    "image_ae.d_c": (16, int, "conditioning variable dimension"),
    "image_ae.d_z": (16, int, "auxiliary noise dimension"),
    "image_ae.gen_channels": (32, int, "generator feature channels at the first branch"),
    "image_ae.disc_channels": (16, int, "discriminator base channels"),
    "image_ae.batch": (16, int, "training batch size"),
    "image_ae.epochs": (60, int, "training passes over the dataset"),
    "image_ae.lr": (2e-4, float, "optimizer step size"),
    "image_ae.beta1": (0.5, float, "first moment decay"),
    "image_ae.beta2": (0.999, float, "second moment decay"),
    "image_ae.lambda_kl": (1.0, float, "weight of the KL regularizer"),
    "image_ae.lambda_rec": (1.0, float, "weight of the top-branch L1 reconstruction term"),

    "text_ae.hidden": (50, int, "encoder hidden size per direction (embedding is twice this)"),
    "text_ae.embed_dim": (100, int, "token embedding dimension"),
    "text_ae.max_len": (24, int, "maximum caption length in tokens"),
    "text_ae.batch": (1, int, "training batch size"),
    "text_ae.epochs": (30, int, "training passes over the caption corpus"),
    "text_ae.lr": (3e-3, float, "optimizer step size"),

    "mapper.kind": ("mmd", str, "mapper objective: gan or mmd"),
    "mapper.hidden": (256, int, "mapper perceptron hidden width"),
    "mapper.batch": (64, int, "embeddings per training batch"),
    "mapper.steps": (2000, int, "generator update steps"),
    "mapper.lr": (1e-4, float, "optimizer step size (generator and critic/discriminator)"),
    "mapper.n_critic": (5, int, "critic updates per generator update (mmd kind)"),
    "mapper.clip": (0.1, float, "critic weight clip bound"),
    "mapper.lambda_ae": (1.0, float, "critic autoencoding penalty weight"),
    "mapper.critic_hidden": (64, int, "critic hidden width"),
    "mapper.critic_dim": (32, int, "critic feature dimension"),
    "mapper.kernel_learning": (True, _bool, "learn critic features; false = fixed kernel"),

    "eval.permutations": (500, int, "permutations for the two-sample test"),
    "eval.debug_self_match": (False, _bool, "debug: evaluate the true set against itself"),

    "translate.sample": (False, _bool, "sample the conditioning variable instead of using its mean"),
}


def resolve_config(path=None) -> dict:
    """Defaults overlaid with the file at `path` (when given)."""
    cfg = {key: default for key, (default, _, _) in DEFAULTS.items()}
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
        _, parser, _ = DEFAULTS[key]
        try:
            cfg[key] = parser(value)
        except ValueError as e:
            raise ConfigError(f"{path}: line {lineno}: bad value for {key!r}: {e}") from None
    _validate(cfg)
    return cfg


def _validate(cfg: dict):
    top = cfg["image_ae.base_res"] * 2 ** (cfg["image_ae.branches"] - 1)
    if top != cfg["data.image_size"]:
        raise ConfigError(f"data.image_size={cfg['data.image_size']} must equal the top branch "
                          f"resolution {top} (base_res * 2^(branches-1))")
    if cfg["mapper.kind"] not in ("gan", "mmd"):
        raise ConfigError(f"mapper.kind must be 'gan' or 'mmd', got {cfg['mapper.kind']!r}")
    for key in ("data.samples_per_class", "image_ae.batch", "text_ae.batch", "mapper.batch",
                "mapper.steps", "eval.permutations"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be positive")


def config_lines(cfg: dict) -> list[str]:
    return [f"{key}={cfg[key]}" for key in sorted(cfg)]


def help_text() -> str:
    lines = ["configuration keys (key=value files, '#' comments):"]
    for key in sorted(DEFAULTS):
        default, _, description = DEFAULTS[key]
        lines.append(f"  {key} (default {default}): {description}")
    return "\n".join(lines)
