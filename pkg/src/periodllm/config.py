"""Flat ``key = value`` run configs.

Stages are declared as ``stage.<name>.<field>`` and ordered by ``stages``::

    seed = 0
    stages = text, macro
    stage.text.task = text_repeat
    stage.text.corpus = data/text_repeat_train.jsonl
    stage.text.iterations = 20000
    stage.text.eval = text:data/text_repeat_test.jsonl
    stage.text.rlo = off
    rlo.enabled = true
    rlo.beta = 0.05
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .curriculum import StageSpec, TrainSettings, resolve_rlo
from .rlo import RloConfig

MODEL_KEYS = {
    "model.d_model": int,
    "model.n_layers": int,
    "model.n_heads": int,
    "model.d_ff": int,
    "model.feat_dim": int,
    "model.context": int,
}
RLO_KEYS = {
    "rlo.enabled": "bool",
    "rlo.beta": float,
    "rlo.max_iter": int,
    "rlo.threshold_mode": str,
    "rlo.stat_source": str,
    "rlo.iter_scope": str,
    "rlo.target": str,
}
TRAIN_KEYS = {
    "optim.lr": float,
    "optim.kind": str,
    "optim.grad_accum": int,
    "train.max_new": int,
    "train.eval_limit": int,
    "train.checkpoint_float_bytes": int,
    "train.dump_weights_every": int,
}
TOP_KEYS = {"seed": int, "stages": str, "out": str}
STAGE_FIELDS = {"task", "corpus", "iterations", "eval", "rlo", "replay"}


class ConfigKeyError(KeyError):
    def __str__(self):
        return str(self.args[0])


def _bool(key: str, raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigKeyError(f"{key}: expected a boolean, got {raw!r}")


def _convert(key: str, raw: str, kind):
    if kind == "bool":
        return _bool(key, raw)
    try:
        return kind(raw)
    except ValueError:
        raise ConfigKeyError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigKeyError(f"{source}:{lineno}: expected key = value")
        key = key.strip()
        if key in values:
            raise ConfigKeyError(f"{source}:{lineno}: duplicate key {key}")
        values[key] = value.strip()
    return values


@dataclass
class RunConfig:
    seed: int = 0
    model: dict = field(default_factory=dict)
    settings: TrainSettings = field(default_factory=TrainSettings)
    rlo: RloConfig = field(default_factory=RloConfig)
    rlo_max_iter_given: bool = False
    rlo_stages: list[str] = field(default_factory=list)
    stages: list[StageSpec] = field(default_factory=list)
    raw: dict = field(default_factory=dict)

    def echo(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.raw.items()))

    def with_rlo(self, **overrides) -> "RunConfig":
        """Copy with the global RLO config changed, re-applied to every RLO stage."""
        new_rlo = replace(self.rlo, **overrides)
        given = self.rlo_max_iter_given or "max_iter" in overrides
        total = sum(s.iterations for s in self.stages)
        stages = []
        for s in self.stages:
            if s.name not in self.rlo_stages or not new_rlo.enabled:
                stages.append(replace(s, rlo=None))
            else:
                stages.append(replace(s, rlo=resolve_rlo(new_rlo, s.iterations, total, given)))
        return replace(self, rlo=new_rlo, stages=stages, rlo_max_iter_given=given)


def build(values: dict[str, str], base_dir: Path | str = ".") -> RunConfig:
    base_dir = Path(base_dir)
    known = set(MODEL_KEYS) | set(RLO_KEYS) | set(TRAIN_KEYS) | set(TOP_KEYS)
    stage_vals: dict[str, dict[str, str]] = {}
    for key, raw in values.items():
        if key.startswith("stage."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in STAGE_FIELDS:
                raise ConfigKeyError(f"unknown config key {key}")
            stage_vals.setdefault(parts[1], {})[parts[2]] = raw
        elif key not in known:
            raise ConfigKeyError(f"unknown config key {key}")

    cfg = RunConfig(raw=dict(values))
    if "seed" in values:
        cfg.seed = _convert("seed", values["seed"], int)
    cfg.model = {k.split(".", 1)[1]: _convert(k, values[k], t) for k, t in MODEL_KEYS.items() if k in values}

    rlo_kwargs = {k.split(".", 1)[1]: _convert(k, values[k], t) for k, t in RLO_KEYS.items() if k in values}
    try:
        cfg.rlo = RloConfig(**rlo_kwargs)
    except ValueError as exc:
        raise ConfigKeyError(str(exc)) from None
    cfg.rlo_max_iter_given = "rlo.max_iter" in values

    s = TrainSettings(seed=cfg.seed)
    for k, t in TRAIN_KEYS.items():
        if k in values:
            attr = {"optim.lr": "lr", "optim.kind": "optimizer"}.get(k, k.split(".", 1)[1])
            s = replace(s, **{attr: _convert(k, values[k], t)})
    cfg.settings = s

    order = [n.strip() for n in values.get("stages", "").split(",") if n.strip()]
    if not order:
        order = list(stage_vals)
    for name in stage_vals:
        if name not in order:
            raise ConfigKeyError(f"stage.{name}: stage not listed in 'stages'")
    iterations = {}
    for name in order:
        sv = stage_vals.get(name)
        if sv is None:
            raise ConfigKeyError(f"stages: no stage.{name}.* keys")
        for req in ("task", "corpus", "iterations"):
            if req not in sv:
                raise ConfigKeyError(f"stage.{name}.{req} is required")
        iterations[name] = _convert(f"stage.{name}.iterations", sv["iterations"], int)
    total = sum(iterations.values())

    for name in order:
        sv = stage_vals[name]
        evals = []
        for item in (e.strip() for e in sv.get("eval", "").split(",")):
            if not item:
                continue
            ename, sep, epath = item.partition(":")
            if not sep:
                raise ConfigKeyError(f"stage.{name}.eval: expected name:path, got {item!r}")
            evals.append((ename.strip(), str(base_dir / epath.strip())))
        if _bool(f"stage.{name}.rlo", sv.get("rlo", "on")):
            cfg.rlo_stages.append(name)
        use_rlo = cfg.rlo.enabled and name in cfg.rlo_stages
        stage_rlo = resolve_rlo(cfg.rlo, iterations[name], total, cfg.rlo_max_iter_given) if use_rlo else None
        try:
            cfg.stages.append(
                StageSpec(
                    name=name,
                    task=sv["task"],
                    corpus=str(base_dir / sv["corpus"]),
                    iterations=iterations[name],
                    eval_corpora=evals,
                    rlo=stage_rlo,
                    replay=_convert(f"stage.{name}.replay", sv.get("replay", "0"), float),
                )
            )
        except ValueError as exc:
            raise ConfigKeyError(f"stage.{name}: {exc}") from None
    return cfg


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    return build(parse_text(path.read_text(), str(path)), path.parent)
