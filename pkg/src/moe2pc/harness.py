"""Experiment runner: sweeps, oracle checks, cost reports, latency estimates."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import oracle
from .core import ring_matmul
from .errors import CapacityError, ConfigError, Moe2pcError
from .he import SCHEMES, packed_matmul
from .jsonio import fail, read_json
from .moe import MODES, GateConfig, MoEModel, moe_forward
from .shares import CostModel, Session

log = logging.getLogger(__name__)

LAN = (3e9, 0.2e-3)
WAN = (400e6, 40e-3)

ROW_FIELDS = (
    "point", "kind", "mode", "n", "k", "m", "d", "dffn", "t", "N", "d1", "d2", "seed",
    "total_bytes", "rounds", "rotations", "pt_multiplies", "ct_adds", "expected_rotations",
    "compare_exchanges", "max_abs_error", "tolerance", "sets_match", "latency_s", "passed",
)

MOE_AXES = ("m", "n", "k", "t_factor", "N", "d", "dffn")
PACKING_AXES = ("n", "t", "d1", "d2", "N")
# spellings accepted in spec files; for moe sweeps d1/d2 are the two expert widths
MOE_ALIASES = {"tFactor": "t_factor", "d1": "d", "d2": "dffn"}
PACKING_ALIASES: dict = {}


def latency_estimate(report, bandwidth: float, rtt: float) -> float:
    """bytes·8/bandwidth + rounds·rtt, in seconds.

    An analytic estimate from metered traffic; it does not model computation.
    ``report`` is a row dict or anything with total_bytes/rounds.
    """
    if isinstance(report, dict):
        nbytes, rounds = report["total_bytes"], report["rounds"]
    else:
        nbytes, rounds = report.total_bytes, report.rounds
    return nbytes * 8.0 / bandwidth + rounds * rtt


def parse_net(value: str) -> tuple[float, float]:
    try:
        bw, rtt = (float(v) for v in value.split(","))
    except ValueError:
        raise ConfigError(f"--net expects 'bandwidth_bits_per_s,rtt_seconds', got {value!r}") from None
    if bw <= 0 or rtt < 0:
        raise ConfigError("bandwidth must be positive and rtt non-negative")
    return bw, rtt


# --------------------------------------------------------------------------
# specs


@dataclass
class ExperimentSpec:
    name: str
    kind: str  # "moe" | "packing"
    modes: list[str]
    seed: int = 0
    model: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    cost_model: str | None = None
    format: str = "both"
    oracle_check: bool = True
    instances: int = 1
    network: tuple[float, float] = LAN

    @classmethod
    def from_dict(cls, obj: dict, text: str | None = None, base: Path | None = None) -> "ExperimentSpec":
        kind = obj.get("kind", "moe")
        if kind not in ("moe", "packing"):
            fail(text, "kind", f"kind must be 'moe' or 'packing', got {kind!r}")
        allowed = SCHEMES if kind == "packing" else MODES
        modes = obj.get("modes", ["cryptomoe"] if kind == "moe" else ["bolt", "batch"])
        if isinstance(modes, str):
            modes = [modes]
        for mode in modes:
            if mode not in allowed:
                fail(text, "modes", f"unknown {'scheme' if kind == 'packing' else 'mode'} {mode!r}")
        axes = PACKING_AXES if kind == "packing" else MOE_AXES
        sweep = obj.get("sweep", {})
        if not isinstance(sweep, dict):
            fail(text, "sweep", "sweep must be an object of axis -> list")
        aliases = PACKING_ALIASES if kind == "packing" else MOE_ALIASES
        for axis, values in sweep.items():
            key = aliases.get(axis, axis)
            if key not in axes:
                fail(text, axis, f"unknown sweep axis {axis!r} for kind {kind!r}", path=f"sweep.{axis}")
            if not isinstance(values, list) or not values:
                fail(text, axis, "sweep axes must be non-empty lists", path=f"sweep.{axis}")
        sweep = {aliases.get(a, a): v for a, v in sweep.items()}
        model = obj.get("model", {})
        if isinstance(model, str):
            path = Path(model) if base is None else base / model
            model, _ = read_json(path)
        if kind == "moe" and not model and not sweep:
            fail(text, "model", "moe experiments need a model")
        fmt = obj.get("format", "both")
        if fmt not in ("csv", "json", "both"):
            fail(text, "format", "format must be csv, json or both")
        cost = obj.get("cost_model")
        if cost is not None and base is not None:
            cost = str(base / cost)
        seed = obj.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            fail(text, "seed", "seed must be a non-negative integer")
        inst = obj.get("instances", 1)
        if not isinstance(inst, int) or inst < 1:
            fail(text, "instances", "instances must be a positive integer")
        return cls(
            name=obj.get("name", "experiment"),
            kind=kind,
            modes=list(modes),
            seed=seed,
            model=model,
            sweep=sweep,
            cost_model=cost,
            format=fmt,
            oracle_check=bool(obj.get("oracle_check", True)),
            instances=inst,
        )

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        path = resolve_spec(path)
        obj, text = read_json(path)
        return cls.from_dict(obj, text, base=Path(path).parent)


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("moe2pc.data").joinpath("presets").iterdir() if p.name.endswith(".json"))


def resolve_spec(name) -> Path:
    """A filesystem path, or the name of a shipped preset (with or without .json)."""
    p = Path(name)
    if p.exists():
        return p
    stem = p.name[:-5] if p.name.endswith(".json") else p.name
    preset = resources.files("moe2pc.data").joinpath("presets", stem + ".json")
    if preset.is_file():
        return Path(str(preset))
    raise ConfigError(f"no spec file or preset named {name!r} (presets: {', '.join(preset_names())})")


# --------------------------------------------------------------------------
# reports


@dataclass
class Report:
    name: str
    network: dict
    rows: list[dict]
    skipped: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "schema": "moe2pc.report/1",
            "name": self.name,
            "network": self.network,
            "columns": list(ROW_FIELDS),
            "rows": [{k: r.get(k) for k in ROW_FIELDS} for r in self.rows],
            "skipped": self.skipped,
            "passed": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Report":
        obj = json.loads(text)
        return cls(obj["name"], obj["network"], obj["rows"], obj.get("skipped", []))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in ROW_FIELDS})
        return buf.getvalue()

    def __eq__(self, other):
        return isinstance(other, Report) and self.to_dict() == other.to_dict()

    def write(self, out_dir, fmt: str = "both") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        if fmt in ("json", "both"):
            p = out / f"{self.name}.json"
            p.write_text(self.to_json())
            written.append(p)
        if fmt in ("csv", "both"):
            p = out / f"{self.name}.csv"
            p.write_text(self.to_csv())
            written.append(p)
        return written


# --------------------------------------------------------------------------
# points


def _blank_row(point: int, kind: str, mode: str, seed: int) -> dict:
    row = {k: None for k in ROW_FIELDS}
    row.update(point=point, kind=kind, mode=mode, seed=seed)
    return row


def run_packing_point(point: int, scheme: str, params: dict, seed: int, network) -> dict:
    n, t, d1, d2, N = (int(params[a]) for a in PACKING_AXES)
    rng = np.random.default_rng([seed, point])
    a = [rng.integers(0, 2**64, (t, d1), dtype=np.uint64) for _ in range(n)]
    b = [rng.integers(0, 2**64, (d1, d2), dtype=np.uint64) for _ in range(n)]
    res, counter, _ = packed_matmul(scheme, a, b, N)
    exact = all(np.array_equal(ring_matmul(x, w), r) for x, w, r in zip(a, b, res))
    expected = oracle.rotation_count(scheme, n, t, d1, d2, N)
    row = _blank_row(point, "packing", scheme, seed)
    row.update(n=n, t=t, d1=d1, d2=d2, N=N, total_bytes=0, rounds=0, expected_rotations=expected,
               max_abs_error=0 if exact else None, tolerance=0, latency_s=0.0, **counter.as_dict())
    row["passed"] = bool(exact and counter.rotations == expected)
    return row


def make_input(seed: int, m: int, d: int) -> np.ndarray:
    return np.random.default_rng([seed, 0xF00D]).uniform(-1.0, 1.0, (m, d))


def selected_sets(session: Session, result, k: int) -> list[dict]:
    """Per expert {token: score} of kept (non-dummy) picks, reconstructed."""
    out = []
    for oh, s in zip(result.dispatch.onehot, result.dispatch.scores):
        onehot = session.reconstruct(oh).signed()
        scores = session.reconstruct(s).decode()
        tokens = onehot.argmax(axis=1)
        out.append({int(j): float(v) for j, v in zip(tokens, scores) if v > 0})
    return out


def run_moe_point(point: int, mode: str, model: MoEModel, seed: int, cost: CostModel, check: bool, network) -> dict:
    c = model.config
    x = make_input(seed, c.m, c.d)
    with Session(seed, insecure=(mode == "insecure"), cost_model=cost, frac_bits=c.frac_bits) as session:
        xs = session.share_real(x)
        result = moe_forward(mode, session, xs, model)
        y = session.reconstruct(result.y).decode()
        row = _blank_row(point, "moe", mode, seed)
        row.update(n=c.n, k=c.k, m=c.m, d=c.d, dffn=c.dffn, N=c.N,
                   t=c.t if mode in ("cryptomoe", "cipherprune") else None,
                   total_bytes=session.transcript.total_bytes(), rounds=session.round,
                   compare_exchanges=int(session.counters["compare_exchange"]),
                   **result.counter.as_dict())
        row["latency_s"] = latency_estimate(row, *network)
        passed = True
        if check:
            tol = 2.0 ** (-c.frac_bits + 4)
            if mode in ("cryptomoe", "cipherprune"):
                ref = oracle.plain_balanced_moe(x, model)
                W, K = oracle.route(x, model.gate, c.k)
                want = [d["kept"] for d in oracle.plain_dispatch(W, K, c.n, c.t)]
                got = selected_sets(session, result, c.k)
                row["sets_match"] = all(set(a) == set(b) for a, b in zip(got, want))
                passed = row["sets_match"]
            else:
                ref = oracle.plain_moe(x, model)
            err = float(np.abs(y - ref).max())
            row.update(max_abs_error=err, tolerance=tol)
            passed = passed and err <= tol
        row["passed"] = bool(passed)
    return row


def _points(spec: ExperimentSpec) -> list[dict]:
    axes = list(spec.sweep.keys())
    if not axes:
        return [{}]
    return [dict(zip(axes, combo)) for combo in itertools.product(*(spec.sweep[a] for a in axes))]


def _model_for(spec: ExperimentSpec, params: dict, seed: int) -> MoEModel:
    obj = dict(spec.model)
    for axis, value in params.items():
        obj[axis] = value
    obj.setdefault("seed", seed)
    if "weights" in obj and params:
        obj.pop("weights")
    model = MoEModel.from_dict(obj)
    gate_scale = obj.get("gate_scale")
    if gate_scale is not None and "weights" not in obj:
        model.gate *= float(gate_scale) / 0.1
    return model


def run(spec: ExperimentSpec, seed: int | None = None, modes: list[str] | None = None,
        cost_model: CostModel | None = None, oracle_check: bool | None = None,
        network: tuple[float, float] | None = None, threads: int | None = None) -> Report:
    """Execute every (sweep point × mode × instance) job and assemble a report.

    Jobs run in a thread pool capped by ``MOE2PC_THREADS``; rows are ordered
    by job index, never by completion.
    """
    seed = spec.seed if seed is None else seed
    modes = modes or spec.modes
    network = network or spec.network
    check = spec.oracle_check if oracle_check is None else oracle_check
    if cost_model is None:
        cost_model = CostModel.load(spec.cost_model) if spec.cost_model else CostModel.default()
    allowed = SCHEMES if spec.kind == "packing" else MODES
    for mode in modes:
        if mode not in allowed:
            raise ConfigError(f"mode {mode!r} is not valid for {spec.kind} experiments", field="mode")

    jobs, skipped = [], []
    for p_idx, params in enumerate(_points(spec)):
        for mode in modes:
            for inst in range(spec.instances):
                jobs.append((len(jobs), p_idx, mode, params, seed + inst))

    def work(job):
        idx, p_idx, mode, params, s = job
        try:
            if spec.kind == "packing":
                return run_packing_point(idx, mode, params, s, network), None
            model = _model_for(spec, params, seed)
            return run_moe_point(idx, mode, model, s, cost_model, check, network), None
        except (CapacityError, ConfigError) as exc:
            reason = {"point": idx, "mode": mode, "params": params, "reason": str(exc)}
            log.warning("skipping sweep point %d (%s, %s): %s", idx, mode, params, exc)
            return None, reason
        except Moe2pcError as exc:
            raise type(exc)(f"sweep point {idx} ({mode}, {params}): {exc}") from exc

    if threads is None:
        threads = int(os.environ.get("MOE2PC_THREADS", "1") or 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    rows = [r for r, _ in results if r is not None]
    skipped = [s for _, s in results if s is not None]
    net = {"bandwidth_bps": network[0], "rtt_s": network[1]}
    return Report(spec.name, net, rows, skipped)


def make_instance(
    seed: int,
    n: int,
    k: int,
    m: int,
    d: int,
    dffn: int,
    *,
    t: int | None = None,
    t_factor: float = 2.0,
    N: int = 4096,
    gate_scale: float = 0.5,
    min_margin: float = 2.0**-10,
    max_tries: int = 256,
) -> tuple[MoEModel, np.ndarray]:
    """A seeded random (model, input) whose routing is decisive.

    Candidates whose smallest selection gap (see :func:`oracle.routing_margin`)
    falls below ``min_margin`` are resampled: fixed-point noise may flip such
    near-ties, which makes exact set comparison ill-posed.
    """
    config = GateConfig(n=n, k=k, m=m, d=d, dffn=dffn, t_factor=t_factor, N=N, t_override=t)
    for attempt in range(max_tries):
        sub = int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0])
        model = MoEModel.random(config, sub)
        model.gate *= gate_scale / 0.1
        x = make_input(sub, m, d)
        if oracle.routing_margin(x, model) >= min_margin:
            return model, x
    raise ConfigError(f"no decisive instance after {max_tries} draws (seed {seed})")
