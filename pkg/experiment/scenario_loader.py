""" Module to load and validate scenario files for the isac-coop experiments. """

from dataclasses import dataclass, replace
from typing import Any, Optional

import numpy as np
import yaml

from experiment.harness import CoarseSettings, ExperimentPlan
from sensing.estimator import RoiGrid
from sensing.otfs_core import DEFAULT_SUPPORT_HALFWIDTH, OtfsParams
from sensing.scene import (
    BsSite,
    SceneConfig,
    TargetState,
    design_sector_beamformer,
)
from sensing.src.exceptions import (
    ConfigurationError,
    DegenerateGeometryError,
    ScenarioFileError,
)

INT, FLOAT, PAIRS, SUBSETS = "int", "float", "pairs", "subsets"

SCHEMA: dict[str, dict[str, tuple[str, bool]]] = {
    "otfs": {
        "M": (INT, True),
        "N": (INT, True),
        "delta_f_hz": (FLOAT, True),
        "T_s": (FLOAT, True),
        "f_c_hz": (FLOAT, True),
        "n_tx": (INT, True),
        "n_rx": (INT, True),
        "p_t_dbm": (FLOAT, True),
        "n0_w_per_hz": (FLOAT, True),
        "antenna_gain": (FLOAT, False),
    },
    "beamformer": {"center_deg": (FLOAT, True), "width_deg": (FLOAT, True)},
    "bs": {"x_m": (FLOAT, True), "y_m": (FLOAT, True), "rotation_rad": (FLOAT, True)},
    "target": {
        "x_m": (FLOAT, True),
        "y_m": (FLOAT, True),
        "vx_mps": (FLOAT, True),
        "vy_mps": (FLOAT, True),
        "rcs_m2": (FLOAT, True),
    },
    "roi": {
        "x_min": (FLOAT, True),
        "x_max": (FLOAT, True),
        "y_min": (FLOAT, True),
        "y_max": (FLOAT, True),
        "dx": (FLOAT, True),
        "dy": (FLOAT, True),
    },
    "coarse": {
        "c_fdopp": (FLOAT, True),
        "c_tau": (FLOAT, True),
        "c_phi": (FLOAT, True),
        "beamwidth_rad": (FLOAT, True),
        "f_d_min_hz": (FLOAT, False),
        "f_d_max_hz": (FLOAT, False),
    },
    "mc": {
        "n_trials": (INT, True),
        "seed": (INT, True),
        "waypoints": (PAIRS, True),
        "bs_subsets": (SUBSETS, True),
    },
}


def dbm_to_watts(p_dbm: float) -> float:
    """10^((dBm - 30) / 10)."""
    return 10 ** ((p_dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class Scenario:
    """A validated scenario file."""

    path: str
    scene: SceneConfig
    coarse: CoarseSettings
    n_trials: int
    seed: int
    waypoints: tuple[tuple[float, float], ...]
    bs_subsets: tuple[tuple[int, ...], ...]

    def plan(
        self,
        support_halfwidth: int = DEFAULT_SUPPORT_HALFWIDTH,
        seed: Optional[int] = None,
        noiseless: bool = False,
    ) -> ExperimentPlan:
        """Monte Carlo plan of this scenario."""
        return ExperimentPlan(
            scene=self.scene,
            waypoints=self.waypoints,
            n_trials=self.n_trials,
            bs_subsets=self.bs_subsets,
            seed=self.seed if seed is None else int(seed),
            coarse=self.coarse,
            support_halfwidth=support_halfwidth,
            noiseless=noiseless,
        )

    def scaled(self, factor: float) -> "Scenario":
        """
        Desk-scale copy: M, N and n_trials times factor (rounded, at least 1),
        RoI pixel size divided by sqrt(factor).

        Raises:
            ConfigurationError: If factor is outside (0, 1].
        """
        if not 0.0 < factor <= 1.0:
            raise ConfigurationError(f"Scale factor must lie in (0, 1], got {factor!r}")
        if factor == 1.0:
            return self

        params = self.scene.params
        scaled_params = replace(
            params,
            M=max(1, round(params.M * factor)),
            N=max(1, round(params.N * factor)),
        )
        scene = replace(
            self.scene,
            params=scaled_params,
            roi=self.scene.roi.rescaled(1.0 / np.sqrt(factor)),
        )
        return replace(
            self,
            scene=scene,
            n_trials=max(1, round(self.n_trials * factor)),
        )


class ScenarioLoader:
    """
    Loads a YAML scenario file and validates it against SCHEMA.

    Every error is a ScenarioFileError anchored to the line of the offending
    entry; unknown keys and missing sections are rejected.
    """

    def __init__(self, path: str):
        """
        Initializes the ScenarioLoader.

        Args:
            path (str): Path to the scenario file.

        Raises:
            ScenarioFileError: If the file is missing or is not a YAML mapping.
        """
        self.path = str(path)
        self.root = self._compose()
        self._constructor = yaml.SafeLoader("")

    def _error(
        self, reason: str, node: Optional[yaml.Node] = None
    ) -> ScenarioFileError:
        line = node.start_mark.line + 1 if node is not None else None
        return ScenarioFileError(self.path, reason, line)

    def _compose(self) -> yaml.MappingNode:
        try:
            with open(self.path, "r", encoding="utf-8") as f:
                root = yaml.compose(f, Loader=yaml.SafeLoader)
        except FileNotFoundError:
            raise ScenarioFileError(  # pylint: disable=W0707
                self.path, "scenario file not found"
            )
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            raise ScenarioFileError(  # pylint: disable=W0707
                self.path,
                f"invalid YAML: {getattr(e, 'problem', None) or e}",
                mark.line + 1 if mark is not None else None,
            )

        if not isinstance(root, yaml.MappingNode):
            raise ScenarioFileError(
                self.path, "a scenario must be a mapping of sections", 1
            )
        return root

    @staticmethod
    def _entries(node: yaml.MappingNode) -> dict[str, tuple[yaml.Node, yaml.Node]]:
        return {key.value: (key, value) for key, value in node.value}

    def _scalar(self, node: yaml.Node, kind: str, name: str) -> Any:
        value = self._constructor.construct_object(node, deep=True)
        if kind == INT:
            if isinstance(value, bool) or not isinstance(value, int):
                raise self._error(f"'{name}' must be an integer, got {value!r}", node)
            return value
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self._error(f"'{name}' must be a number, got {value!r}", node)
        return float(value)

    def _sequence(self, node: yaml.Node, kind: str, name: str) -> tuple:
        if not isinstance(node, yaml.SequenceNode) or not node.value:
            raise self._error(f"'{name}' must be a non-empty list", node)

        items = []
        for item in node.value:
            if not isinstance(item, yaml.SequenceNode) or not item.value:
                raise self._error(f"every entry of '{name}' must be a list", item)
            if kind == PAIRS:
                if len(item.value) != 2:
                    raise self._error(f"'{name}' entries must be [x, y] pairs", item)
                items.append(tuple(self._scalar(v, FLOAT, name) for v in item.value))
            else:
                items.append(tuple(self._scalar(v, INT, name) for v in item.value))
        return tuple(items)

    def _fields(self, node: yaml.Node, section: str) -> dict[str, Any]:
        if not isinstance(node, yaml.MappingNode):
            raise self._error(f"section [{section}] must be a mapping", node)

        schema = SCHEMA[section]
        entries = self._entries(node)
        for key, (key_node, _) in entries.items():
            if key not in schema:
                raise self._error(
                    f"unknown key '{key}' in section [{section}]", key_node
                )

        values = {}
        for key, (kind, required) in schema.items():
            if key not in entries:
                if required:
                    raise self._error(
                        f"missing key '{key}' in section [{section}]", node
                    )
                continue
            value_node = entries[key][1]
            if kind in (PAIRS, SUBSETS):
                values[key] = self._sequence(value_node, kind, key)
            else:
                values[key] = self._scalar(value_node, kind, key)
        return values

    def _section(self, name: str) -> yaml.Node:
        entries = self._entries(self.root)
        if name not in entries:
            raise self._error(f"missing section [{name}]")
        return entries[name][1]

    def load(self) -> Scenario:
        """
        Parses and validates the whole scenario.

        Returns:
            Scenario: The validated scenario.

        Raises:
            ScenarioFileError: On any parse or validation failure.
        """
        for key, (key_node, _) in self._entries(self.root).items():
            if key not in SCHEMA:
                raise self._error(f"unknown section [{key}]", key_node)

        otfs_node = self._section("otfs")
        otfs = self._fields(otfs_node, "otfs")
        try:
            params = OtfsParams(
                M=otfs["M"],
                N=otfs["N"],
                delta_f=otfs["delta_f_hz"],
                T=otfs["T_s"],
                f_c=otfs["f_c_hz"],
                n_tx=otfs["n_tx"],
                n_rx=otfs["n_rx"],
                p_t=dbm_to_watts(otfs["p_t_dbm"]),
                n0=otfs["n0_w_per_hz"],
                antenna_gain=otfs.get("antenna_gain", 1.0),
            )
        except ConfigurationError as e:
            raise self._error(str(e), otfs_node)  # pylint: disable=W0707

        beam_node = self._section("beamformer")
        beam = self._fields(beam_node, "beamformer")
        try:
            beamformer = design_sector_beamformer(
                params, (np.deg2rad(beam["center_deg"]), np.deg2rad(beam["width_deg"]))
            )
        except ConfigurationError as e:
            raise self._error(str(e), beam_node)  # pylint: disable=W0707

        sites = self._sites()
        target_node = self._section("target")
        target_fields = self._fields(target_node, "target")
        roi_node = self._section("roi")
        roi_fields = self._fields(roi_node, "roi")
        coarse_node = self._section("coarse")
        coarse_fields = self._fields(coarse_node, "coarse")
        mc_node = self._section("mc")
        mc = self._fields(mc_node, "mc")

        try:
            roi = RoiGrid(**roi_fields)
        except ConfigurationError as e:
            raise self._error(str(e), roi_node)  # pylint: disable=W0707

        try:
            target = TargetState(
                position=(target_fields["x_m"], target_fields["y_m"]),
                velocity=(target_fields["vx_mps"], target_fields["vy_mps"]),
                rcs=target_fields["rcs_m2"],
            )
            scene = SceneConfig(
                params=params,
                sites=sites,
                target=target,
                beamformer=beamformer,
                roi=roi,
            )
        except ConfigurationError as e:
            raise self._error(str(e), target_node)  # pylint: disable=W0707

        coarse = self._coarse(coarse_node, coarse_fields)
        self._check_mc(mc_node, mc, scene)
        try:
            scene.check_geometry()
        except (ConfigurationError, DegenerateGeometryError) as e:
            raise self._error(  # pylint: disable=W0707
                f"target placement: {e}", target_node
            )

        return Scenario(
            path=self.path,
            scene=scene,
            coarse=coarse,
            n_trials=mc["n_trials"],
            seed=mc["seed"],
            waypoints=mc["waypoints"],
            bs_subsets=mc["bs_subsets"],
        )

    def _sites(self) -> tuple[BsSite, ...]:
        node = self._section("bs")
        if not isinstance(node, yaml.SequenceNode) or not node.value:
            raise self._error("section [bs] must be a non-empty list of sites", node)
        sites = []
        for index, site_node in enumerate(node.value, start=1):
            fields = self._fields(site_node, "bs")
            sites.append(
                BsSite(
                    index=index,
                    origin=(fields["x_m"], fields["y_m"]),
                    rotation=fields["rotation_rad"],
                )
            )
        return tuple(sites)

    def _coarse(self, node: yaml.Node, fields: dict[str, Any]) -> CoarseSettings:
        bounds = [fields.get("f_d_min_hz"), fields.get("f_d_max_hz")]
        if (bounds[0] is None) != (bounds[1] is None):
            raise self._error("give both f_d_min_hz and f_d_max_hz, or neither", node)
        doppler_range = None if bounds[0] is None else tuple(bounds)
        if doppler_range is not None and doppler_range[0] > doppler_range[1]:
            raise self._error("f_d_min_hz must not exceed f_d_max_hz", node)

        for name in ("c_fdopp", "c_tau", "c_phi"):
            if not 0.0 < fields[name] <= 1.0:
                raise self._error(
                    f"'{name}' must lie in (0, 1], got {fields[name]!r}", node
                )
        if not fields["beamwidth_rad"] > 0:
            raise self._error("'beamwidth_rad' must be positive", node)

        return CoarseSettings(
            c_fdopp=fields["c_fdopp"],
            c_tau=fields["c_tau"],
            c_phi=fields["c_phi"],
            beamwidth=fields["beamwidth_rad"],
            doppler_range=doppler_range,
        )

    def _check_mc(self, node: yaml.Node, mc: dict[str, Any], scene: SceneConfig):
        entries = self._entries(node)
        if mc["n_trials"] < 1:
            raise self._error("'n_trials' must be >= 1", entries["n_trials"][1])

        known = {site.index for site in scene.sites}
        for subset in mc["bs_subsets"]:
            unknown = sorted(set(subset) - known)
            if unknown:
                raise self._error(
                    f"bs_subsets references unknown BS {unknown}",
                    entries["bs_subsets"][1],
                )

        for waypoint in mc["waypoints"]:
            moved = scene.with_target(scene.target.moved_to(waypoint))
            for subset in mc["bs_subsets"]:
                try:
                    moved.check_geometry(subset)
                except (ConfigurationError, DegenerateGeometryError) as e:
                    raise self._error(  # pylint: disable=W0707
                        f"waypoint {waypoint} with BSs {subset}: {e}",
                        entries["waypoints"][1],
                    )


def load_scenario(path: str) -> Scenario:
    """Loads and validates a scenario file."""
    return ScenarioLoader(path).load()
