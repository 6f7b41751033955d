"""JSON design configuration.

Keys carry their units. Hardware limits and the loss must be given
explicitly; only ``gamma`` and ``dt`` have defaults. Relative file paths are
resolved against the directory of the config file.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
from pathlib import Path

import numpy as np

from .evaluate import Perturbation
from .initpulse import InitSpec
from .io import read_grid, read_labels
from .model import DT_DEFAULT, GAMMA_H, HardwareLimits, PhysicsConstants, SpinGrid, ValidationError
from .objective import LossSpec, build_target, canonical_kind
from .optim import LbfgsOptions

__all__ = ["DesignConfig", "load_config"]


def _require(section, key, where):
    if key not in section:
        raise ValidationError(f"config: missing required key '{where}.{key}'")
    return section[key]


@dataclass
class DesignConfig:
    grid: SpinGrid
    consts: PhysicsConstants
    limits: HardwareLimits
    loss: LossSpec
    target_spec: dict
    init: InitSpec
    lbfgs: LbfgsOptions
    n_outer: int = 10
    mode: str = "alternating"
    output_dir: Path = Path("out")
    seed: int = 0
    perturbations: list = field(default_factory=list)
    base_dir: Path = Path(".")

    def target(self):
        spec = self.target_spec
        pattern = spec.get("pattern", "iv-invert" if self.loss.kind == "iv180" else "ov-saturate")
        if canonical_kind(pattern) != self.loss.kind:
            raise ValidationError(f"target pattern {pattern!r} does not match loss {self.loss.kind!r}")
        geometry = spec.get("geometry", "cuboid")
        if geometry == "cuboid":
            return build_target(
                self.grid, pattern,
                center=_require(spec, "center_cm", "target"),
                size=_require(spec, "size_cm", "target"),
                shell=int(spec.get("dont_care_shell_voxels", 0)),
            )
        if geometry == "mask":
            labels = read_labels(self.base_dir / _require(spec, "labels_file", "target"))
            return build_target(self.grid, pattern, labels=labels)
        raise ValidationError(f"config: unknown target geometry {geometry!r}")


def _grid(section, base):
    if "file" in section:
        grid = read_grid(base / section["file"])
        if "dims" in section and int(np.prod(section["dims"])) != grid.n_voxels:
            raise ValidationError(
                f"config: dims {section['dims']} imply {int(np.prod(section['dims']))} voxels, "
                f"grid file has {grid.n_voxels}"
            )
        return grid
    dims = _require(section, "dims", "grid")
    fov = _require(section, "fov_cm", "grid")
    return SpinGrid.regular(
        dims, fov,
        t1=section.get("t1_s", np.inf),
        t2=section.get("t2_s", np.inf),
        offres=section.get("offres_rad_s", 0.0),
    )


def load_config(path, overrides=None):
    """Parse and validate a design config; ``overrides`` are merged on top."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    raw.update(overrides or {})
    base = path.parent

    c = raw.get("constants", {})
    consts = PhysicsConstants(
        float(c.get("gamma_rad_per_s_per_gauss", GAMMA_H)), float(c.get("dt_s", DT_DEFAULT))
    )
    lim = _require(raw, "limits", "config")
    limits = HardwareLimits(
        float(_require(lim, "b_max_gauss", "limits")),
        float(_require(lim, "g_max_gauss_per_cm", "limits")),
        float(_require(lim, "s_max_gauss_per_cm_per_s", "limits")),
    )
    ls = _require(raw, "loss", "config")
    loss = LossSpec(_require(ls, "kind", "loss"), float(_require(ls, "lambda", "loss")))
    grid = _grid(_require(raw, "grid", "config"), base)

    seed = int(raw.get("seed", 0))
    ini = raw.get("init", {})
    source = ini.get("source", "ktpoints")
    init = InitSpec(
        source=source,
        path=str(base / ini["path"]) if "path" in ini else None,
        n_points=int(ini.get("n_points", 5)),
        dwell=float(ini.get("dwell_s", 2e-4)),
        max_duration=ini.get("max_duration_s"),
        seed=seed,
    )
    opt = raw.get("optimizer", {})
    lbfgs = LbfgsOptions(
        memory=int(opt.get("memory", 10)),
        max_iter=int(opt.get("max_inner_iters", 20)),
        c1=float(opt.get("c1", 1e-4)),
        c2=float(opt.get("c2", 0.9)),
        grad_tol=float(opt.get("grad_tol", 1e-10)),
    )
    perts = [
        Perturbation(int(p.get("gradient_delay", 0)), float(p.get("offres_scale", 1.0)))
        for p in raw.get("eval", {}).get("perturbations", [])
    ]
    return DesignConfig(
        grid=grid,
        consts=consts,
        limits=limits,
        loss=loss,
        target_spec=_require(raw, "target", "config"),
        init=init,
        lbfgs=lbfgs,
        n_outer=int(opt.get("n_outer", 10)),
        mode=opt.get("mode", "alternating"),
        output_dir=base / raw.get("output_dir", "out"),
        seed=seed,
        perturbations=perts,
        base_dir=base,
    )
