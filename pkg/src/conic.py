"""
Small conic programs over Hermitian, real and complex variables

Programs are modelled with affine expressions in the complex variables and
compiled to the real standard form of ``cvxopt.solvers.conelp``: linear
inequalities, second-order cones and PSD blocks, where Hermitian PSD
constraints enter through the real symmetric embedding
[[Re H, -Im H], [Im H, Re H]].
"""
import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from cvxopt import matrix, solvers, spmatrix
from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt

from errors import ValidationError
from linalg import hermitize
from models import ConstraintResidual, ResidualSummary, SolveReport, SolverOptions, SolveStatus

logger = logging.getLogger(__name__)

SOLVE_ATTEMPTS = 3

ConstraintKind = Literal["eq", "ge", "psd", "soc"]


def realify_hermitian(h: np.ndarray) -> np.ndarray:
    """[[Re H, -Im H], [Im H, Re H]]"""
    h = np.asarray(h, dtype=complex)
    return np.block([[h.real, -h.imag], [h.imag, h.real]])


# ==================== Affine expressions ====================

class Affine:
    """
    Affine function of the program variables with a complex array value

    Each term maps a variable name to a coefficient array of shape
    ``shape + (variable size,)`` acting on that variable's real parameters.
    """
    __array_ufunc__ = None

    def __init__(self, shape: Sequence[int], terms: Optional[Dict[str, np.ndarray]] = None,
                 const: Any = None):
        self.shape = tuple(int(s) for s in shape)
        self.terms: Dict[str, np.ndarray] = dict(terms or {})
        if const is None:
            self.const = np.zeros(self.shape, dtype=complex)
        else:
            self.const = np.broadcast_to(np.asarray(const, dtype=complex), self.shape).copy()

    @staticmethod
    def lift(value: Any) -> "Affine":
        if isinstance(value, Affine):
            return value
        arr = np.asarray(value, dtype=complex)
        return Affine(arr.shape, {}, arr)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def __repr__(self) -> str:
        return f"Affine(shape={self.shape}, variables={sorted(self.terms)})"

    # ---- arithmetic ----

    def __add__(self, other: Any) -> "Affine":
        other = Affine.lift(other)
        shape = tuple(np.broadcast_shapes(self.shape, other.shape))
        terms: Dict[str, np.ndarray] = {}
        for part in (self, other):
            for name, coeff in part.terms.items():
                wide = np.broadcast_to(coeff, shape + coeff.shape[-1:])
                terms[name] = terms[name] + wide if name in terms else wide.copy()
        const = np.broadcast_to(self.const, shape) + np.broadcast_to(other.const, shape)
        return Affine(shape, terms, const)

    __radd__ = __add__

    def __neg__(self) -> "Affine":
        return self * -1.0

    def __sub__(self, other: Any) -> "Affine":
        return self + (-Affine.lift(other))

    def __rsub__(self, other: Any) -> "Affine":
        return Affine.lift(other) + (-self)

    def __mul__(self, scalar: Any) -> "Affine":
        if isinstance(scalar, Affine) or np.ndim(scalar) != 0:
            raise TypeError("affine expressions only scale by scalars")
        s = complex(scalar)
        return Affine(self.shape, {k: v * s for k, v in self.terms.items()}, self.const * s)

    __rmul__ = __mul__

    def __truediv__(self, scalar: Any) -> "Affine":
        return self * (1.0 / complex(scalar))

    def __matmul__(self, other: Any) -> "Affine":
        if isinstance(other, Affine):
            raise TypeError("product of two affine expressions is not affine")
        b = np.asarray(other, dtype=complex)
        axis = self.ndim - 1
        terms = {
            k: np.moveaxis(np.tensordot(v, b, axes=([axis], [0])), axis, -1)
            for k, v in self.terms.items()
        }
        const = self.const @ b
        return Affine(np.shape(const), terms, const)

    def __rmatmul__(self, other: Any) -> "Affine":
        a = np.asarray(other, dtype=complex)
        terms = {k: np.tensordot(a, v, axes=([a.ndim - 1], [0])) for k, v in self.terms.items()}
        const = a @ self.const
        return Affine(np.shape(const), terms, const)

    def __getitem__(self, index: Any) -> "Affine":
        const = self.const[index]
        return Affine(const.shape, {k: v[index] for k, v in self.terms.items()}, const)

    # ---- structure ----

    def conj(self) -> "Affine":
        return Affine(self.shape, {k: v.conj() for k, v in self.terms.items()}, self.const.conj())

    @property
    def T(self) -> "Affine":
        if self.ndim < 2:
            return self
        return Affine(self.shape[::-1], {k: np.swapaxes(v, 0, 1) for k, v in self.terms.items()}, self.const.T)

    @property
    def H(self) -> "Affine":
        return self.conj().T

    @property
    def real(self) -> "Affine":
        return Affine(self.shape, {k: v.real.astype(complex) for k, v in self.terms.items()}, self.const.real)

    @property
    def imag(self) -> "Affine":
        return Affine(self.shape, {k: v.imag.astype(complex) for k, v in self.terms.items()}, self.const.imag)

    def trace(self) -> "Affine":
        return Affine((), {k: np.trace(v, axis1=0, axis2=1) for k, v in self.terms.items()}, np.trace(self.const))

    def sum(self) -> "Affine":
        flat = self.flatten()
        return Affine((), {k: v.sum(axis=0) for k, v in flat.terms.items()}, flat.const.sum())

    def flatten(self) -> "Affine":
        size = int(np.prod(self.shape, dtype=int))
        return Affine((size,), {k: v.reshape(size, v.shape[-1]) for k, v in self.terms.items()},
                      self.const.reshape(size))

    @staticmethod
    def concat(items: Iterable[Any]) -> "Affine":
        """Concatenate expressions into one flat vector"""
        parts = [Affine.lift(item).flatten() for item in items]
        sizes: Dict[str, int] = {}
        for part in parts:
            for name, coeff in part.terms.items():
                sizes[name] = coeff.shape[-1]
        terms = {
            name: np.concatenate([
                part.terms.get(name, np.zeros((part.shape[0], size), dtype=complex)) for part in parts
            ])
            for name, size in sizes.items()
        }
        const = np.concatenate([part.const for part in parts])
        return Affine(const.shape, terms, const)

    @staticmethod
    def bmat(rows: Sequence[Sequence[Any]]) -> "Affine":
        """Block matrix of affine or constant blocks"""
        grid = [[Affine.lift(block) for block in row] for row in rows]
        heights = [row[0].shape[0] for row in grid]
        widths = [block.shape[1] for block in grid[0]]
        shape = (sum(heights), sum(widths))
        sizes: Dict[str, int] = {}
        for row in grid:
            for block in row:
                for name, coeff in block.terms.items():
                    sizes[name] = coeff.shape[-1]
        terms = {name: np.zeros(shape + (size,), dtype=complex) for name, size in sizes.items()}
        const = np.zeros(shape, dtype=complex)
        r0 = 0
        for i, row in enumerate(grid):
            c0 = 0
            for j, block in enumerate(row):
                if block.shape != (heights[i], widths[j]):
                    raise ValidationError(f"block ({i}, {j}) has shape {block.shape}")
                const[r0:r0 + heights[i], c0:c0 + widths[j]] = block.const
                for name, coeff in block.terms.items():
                    terms[name][r0:r0 + heights[i], c0:c0 + widths[j]] = coeff
                c0 += widths[j]
            r0 += heights[i]
        return Affine(shape, terms, const)


# ==================== Variables and constraints ====================

def _hermitian_basis(n: int) -> np.ndarray:
    """Diagonal entries first, then (Re, Im) of each upper-triangle entry"""
    basis = np.zeros((n, n, n * n), dtype=complex)
    k = 0
    for i in range(n):
        basis[i, i, k] = 1.0
        k += 1
    for i in range(n):
        for j in range(i + 1, n):
            basis[i, j, k] = basis[j, i, k] = 1.0
            basis[i, j, k + 1] = 1j
            basis[j, i, k + 1] = -1j
            k += 2
    return basis


@dataclass(frozen=True)
class Variable:
    name: str
    kind: Literal["hermitian", "real", "complex"]
    shape: Tuple[int, ...]
    offset: int
    size: int


@dataclass(frozen=True)
class Constraint:
    name: str
    kind: ConstraintKind
    expr: Affine


@dataclass
class _Block:
    constraint: Constraint
    cone: str
    rows: np.ndarray
    offset: np.ndarray
    scale: float
    dim: int


class _Restart(Exception):
    """Solver attempt failed in a way a rescaled restart may fix"""


class ConicProgram:
    """
    Conic program over named variables, maximized or minimized

    Constraint senses: ``add_ge`` (expr ≥ 0 entrywise), ``add_eq``,
    ``add_psd`` (Hermitian expr ⪰ 0) and ``add_soc`` (‖x‖ ≤ t).
    """

    def __init__(self, name: str):
        self.name = name
        self.variables: Dict[str, Variable] = {}
        self.constraints: List[Constraint] = []
        self.objective: Optional[Affine] = None
        self.sense: Literal["max", "min"] = "max"
        self._size = 0
        self._bases: Dict[str, np.ndarray] = {}

    # ---- declarations ----

    def _declare(self, name: str, kind: str, shape: Tuple[int, ...], basis: np.ndarray) -> Affine:
        if name in self.variables:
            raise ValidationError(f"variable '{name}' declared twice")
        size = basis.shape[-1]
        self.variables[name] = Variable(name, kind, shape, self._size, size)  # type: ignore[arg-type]
        self._bases[name] = basis
        self._size += size
        return Affine(shape, {name: basis})

    def hermitian(self, name: str, dim: int) -> Affine:
        return self._declare(name, "hermitian", (dim, dim), _hermitian_basis(dim))

    def real(self, name: str, dim: int = 1) -> Affine:
        if dim == 1:
            return self._declare(name, "real", (), np.ones(1, dtype=complex))
        return self._declare(name, "real", (dim,), np.eye(dim, dtype=complex))

    def complex(self, name: str, shape: Union[int, Tuple[int, ...]]) -> Affine:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        m = int(np.prod(shape, dtype=int))
        basis = np.concatenate([np.eye(m), 1j * np.eye(m)], axis=1).reshape(shape + (2 * m,))
        return self._declare(name, "complex", shape, basis.astype(complex))

    @property
    def psd_vars(self) -> List[Tuple[str, int]]:
        return [(v.name, v.shape[0]) for v in self.variables.values() if v.kind == "hermitian"]

    @property
    def vec_vars(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(v.name, v.shape) for v in self.variables.values() if v.kind != "hermitian" and v.shape]

    @property
    def scalar_vars(self) -> List[str]:
        return [v.name for v in self.variables.values() if v.kind == "real" and not v.shape]

    @property
    def size(self) -> int:
        return self._size

    # ---- objective and constraints ----

    def maximize(self, expr: Any) -> None:
        self.objective, self.sense = self._scalar(expr), "max"

    def minimize(self, expr: Any) -> None:
        self.objective, self.sense = self._scalar(expr), "min"

    def _scalar(self, expr: Any) -> Affine:
        expr = Affine.lift(expr)
        if expr.shape not in ((), (1,)):
            raise ValidationError(f"objective must be scalar, got shape {expr.shape}")
        self._check_refs(expr)
        return expr.real.flatten()

    def _check_refs(self, expr: Affine) -> None:
        unknown = set(expr.terms) - set(self.variables)
        if unknown:
            raise ValidationError(f"expression references undeclared variables {sorted(unknown)}")

    def _add(self, name: Optional[str], kind: ConstraintKind, expr: Affine) -> Constraint:
        self._check_refs(expr)
        constraint = Constraint(name or f"{kind}{len(self.constraints)}", kind, expr)
        self.constraints.append(constraint)
        return constraint

    def add_ge(self, lhs: Any, rhs: Any = 0.0, name: Optional[str] = None) -> Constraint:
        return self._add(name, "ge", (Affine.lift(lhs) - rhs).real.flatten())

    def add_eq(self, lhs: Any, rhs: Any = 0.0, name: Optional[str] = None) -> Constraint:
        return self._add(name, "eq", (Affine.lift(lhs) - rhs).real.flatten())

    def add_psd(self, expr: Any, name: Optional[str] = None) -> Constraint:
        expr = Affine.lift(expr)
        if expr.ndim != 2 or expr.shape[0] != expr.shape[1]:
            raise ValidationError(f"PSD constraint needs a square expression, got {expr.shape}")
        return self._add(name, "psd", (expr + expr.H) * 0.5)

    def add_soc(self, t: Any, x: Any, name: Optional[str] = None) -> Constraint:
        """‖x‖ ≤ t; complex entries of x count through their real and imaginary parts"""
        x = Affine.lift(x).flatten()
        stacked = Affine.concat([Affine.lift(t).real, x.real, x.imag])
        return self._add(name, "soc", stacked)

    # ---- compilation ----

    def _dense(self, expr: Affine) -> Tuple[np.ndarray, np.ndarray]:
        flat = expr.flatten()
        rows = np.zeros((flat.shape[0], self._size))
        for name, coeff in flat.terms.items():
            var = self.variables[name]
            rows[:, var.offset:var.offset + var.size] = coeff.real
        return rows, flat.const.real.copy()

    def _blocks(self) -> List[_Block]:
        blocks = []
        for constraint in self.constraints:
            if constraint.kind == "psd":
                embedded = Affine.bmat([
                    [constraint.expr.real, -constraint.expr.imag],
                    [constraint.expr.imag, constraint.expr.real],
                ])
                rows, offset = self._dense(embedded.T)
                cone, dim = "s", embedded.shape[0]
            else:
                rows, offset = self._dense(constraint.expr)
                cone = {"ge": "l", "eq": "eq", "soc": "q"}[constraint.kind]
                dim = rows.shape[0]
            scale = float(np.linalg.norm(np.column_stack([rows, offset])))
            scale = scale if scale > 0.0 else 1.0
            blocks.append(_Block(constraint, cone, rows / scale, offset / scale, scale, dim))
        order = {"l": 0, "q": 1, "s": 2, "eq": 3}
        return sorted(blocks, key=lambda b: order[b.cone])

    def compile(self) -> Dict[str, Any]:
        """Real standard form: minimize c^T x s.t. G x + s = h, s ∈ K, A x = b"""
        if self.objective is None:
            raise ValidationError(f"program '{self.name}' has no objective")
        obj_rows, _ = self._dense(self.objective)
        c = obj_rows[0] * (-1.0 if self.sense == "max" else 1.0)
        c_scale = float(np.linalg.norm(c)) or 1.0
        blocks = self._blocks()
        cone_blocks = [b for b in blocks if b.cone != "eq"]
        eq_blocks = [b for b in blocks if b.cone == "eq"]
        g = np.vstack([-b.rows for b in cone_blocks]) if cone_blocks else np.zeros((0, self._size))
        h = np.concatenate([b.offset for b in cone_blocks]) if cone_blocks else np.zeros(0)
        a = np.vstack([b.rows for b in eq_blocks]) if eq_blocks else np.zeros((0, self._size))
        b_vec = np.concatenate([-b.offset for b in eq_blocks]) if eq_blocks else np.zeros(0)
        dims = {
            "l": int(sum(b.dim for b in cone_blocks if b.cone == "l")),
            "q": [int(b.dim) for b in cone_blocks if b.cone == "q"],
            "s": [int(b.dim) for b in cone_blocks if b.cone == "s"],
        }
        return {"c": c / c_scale, "c_scale": c_scale, "G": g, "h": h, "A": a, "b": b_vec,
                "dims": dims, "blocks": blocks}

    # ---- values ----

    def unpack(self, x: np.ndarray) -> Dict[str, Any]:
        values: Dict[str, Any] = {}
        for name, var in self.variables.items():
            params = x[var.offset:var.offset + var.size]
            if var.kind == "hermitian":
                values[name] = hermitize(np.tensordot(self._bases[name], params, axes=([-1], [0])))
            elif var.kind == "real":
                values[name] = float(params[0]) if not var.shape else params.copy()
            else:
                m = var.size // 2
                values[name] = (params[:m] + 1j * params[m:]).reshape(var.shape)
        return values

    def pack(self, values: Dict[str, Any]) -> np.ndarray:
        x = np.zeros(self._size)
        for name, var in self.variables.items():
            value = np.asarray(values[name])
            if var.kind == "hermitian":
                n = var.shape[0]
                upper = np.triu_indices(n, k=1)
                pairs = np.column_stack([value[upper].real, value[upper].imag]).reshape(-1)
                params = np.concatenate([np.real(np.diag(value)), pairs])
            elif var.kind == "real":
                params = np.atleast_1d(value.real.astype(float))
            else:
                flat = value.reshape(-1)
                params = np.concatenate([flat.real, flat.imag])
            x[var.offset:var.offset + var.size] = params
        return x

    def evaluate(self, expr: Affine, x: np.ndarray) -> np.ndarray:
        out = expr.const.copy()
        for name, coeff in expr.terms.items():
            var = self.variables[name]
            out = out + np.tensordot(coeff, x[var.offset:var.offset + var.size], axes=([-1], [0]))
        return out

    def value(self, expr: Affine, report: SolveReport) -> np.ndarray:
        return self.evaluate(expr, self.pack(report.values))

    # ---- solving ----

    def solve(self, options: Optional[SolverOptions] = None) -> SolveReport:
        return solve(self, options)

    def to_json(self) -> str:
        """Debug dump of the compiled real program"""
        data = self.compile()
        document = {
            "name": self.name,
            "sense": self.sense,
            "variables": [
                {"name": v.name, "kind": v.kind, "shape": list(v.shape), "offset": v.offset, "size": v.size}
                for v in self.variables.values()
            ],
            "objective": (data["c"] * data["c_scale"]).tolist(),
            "constraints": [
                {
                    "name": b.constraint.name,
                    "kind": b.constraint.kind,
                    "cone": b.cone,
                    "dim": b.dim,
                    "scale": b.scale,
                    "rows": (b.rows * b.scale).tolist(),
                    "offset": (b.offset * b.scale).tolist(),
                }
                for b in data["blocks"]
            ],
        }
        return json.dumps(document)


def _sparse(a: np.ndarray) -> spmatrix:
    rows, cols = np.nonzero(a)
    return spmatrix(a[rows, cols].tolist(), rows.tolist(), cols.tolist(), (int(a.shape[0]), int(a.shape[1])))


def _relative_gap(sol: Dict[str, Any]) -> Optional[float]:
    if sol.get("relative gap") is not None:
        return abs(float(sol["relative gap"]))
    if sol.get("gap") is not None and sol.get("primal objective") is not None:
        return abs(float(sol["gap"])) / max(1.0, abs(float(sol["primal objective"])))
    return None


def _near_optimal(sol: Dict[str, Any], options: SolverOptions) -> bool:
    gap = _relative_gap(sol)
    pres, dres = sol.get("primal infeasibility"), sol.get("dual infeasibility")
    return (
        sol.get("x") is not None
        and gap is not None and gap <= options.accept_gap
        and pres is not None and pres <= options.accept_residual
        and dres is not None and dres <= options.accept_residual
    )


def _conelp(data: Dict[str, Any], options: SolverOptions, attempt: int) -> Tuple[Dict[str, Any], np.ndarray]:
    """First attempt on the compiled data, then column-equilibrated, then equilibrated with the acceptance tolerances"""
    g, a, c = data["G"], data["A"], data["c"]
    column_scale = np.ones(g.shape[1])
    if attempt > 1:
        norms = np.sqrt(np.sum(g * g, axis=0) + np.sum(a * a, axis=0))
        column_scale = 1.0 / np.where(norms > 0.0, norms, 1.0)
        g, a, c = g * column_scale, a * column_scale, c * column_scale
    kwargs: Dict[str, Any] = {}
    if a.shape[0]:
        kwargs["A"] = _sparse(a)
        kwargs["b"] = matrix(np.ascontiguousarray(data["b"], dtype=float))
    solver_options = {
        "maxiters": options.maxiters,
        "abstol": options.abstol,
        "reltol": options.reltol,
        "feastol": options.feastol,
        "show_progress": False,
    }
    if attempt > 2:
        solver_options.update(
            abstol=max(options.abstol, options.accept_gap * 1e-2),
            reltol=max(options.reltol, options.accept_gap),
            feastol=max(options.feastol, options.accept_residual),
        )
    try:
        sol = solvers.conelp(
            matrix(np.ascontiguousarray(c, dtype=float)),
            _sparse(g),
            matrix(np.ascontiguousarray(data["h"], dtype=float)),
            data["dims"],
            options=solver_options,
            **kwargs,
        )
    except (ArithmeticError, ValueError) as exc:
        raise _Restart(f"interior-point step failed: {exc}") from exc
    if sol["status"] == "unknown" and not _near_optimal(sol, options) and sol.get("iterations", 0) < options.maxiters:
        raise _Restart("interior-point method stalled")
    return sol, column_scale


def solve(program: ConicProgram, options: Optional[SolverOptions] = None) -> SolveReport:
    """Solve with cvxopt, restarting on column-equilibrated data and then with looser stopping tolerances"""
    options = options or SolverOptions()
    data = program.compile()
    restarted = False
    try:
        for attempt in Retrying(
            retry=retry_if_exception_type(_Restart),
            stop=stop_after_attempt(SOLVE_ATTEMPTS),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        ):
            with attempt:
                restarted = attempt.retry_state.attempt_number > 1
                sol, column_scale = _conelp(data, options, attempt.retry_state.attempt_number)
    except _Restart as exc:
        logger.error(f"Program {program.name} failed after {SOLVE_ATTEMPTS} attempts: {exc}")
        return SolveReport(program=program.name, status=SolveStatus.NUMERICAL_FAILURE, restarted=True)

    raw = sol["status"]
    if raw == "optimal" or (raw == "unknown" and _near_optimal(sol, options)):
        status = SolveStatus.OPTIMAL
    elif raw == "primal infeasible":
        status = SolveStatus.INFEASIBLE
    elif raw == "dual infeasible":
        status = SolveStatus.UNBOUNDED
    else:
        status = SolveStatus.ITER_LIMIT

    report = SolveReport(
        program=program.name,
        status=status,
        gap=_relative_gap(sol),
        primal_residual=sol.get("primal infeasibility"),
        dual_residual=sol.get("dual infeasibility"),
        iterations=int(sol.get("iterations", 0)),
        restarted=restarted,
    )
    if status in (SolveStatus.OPTIMAL, SolveStatus.ITER_LIMIT) and sol.get("x") is not None:
        x = np.array(sol["x"]).reshape(-1) * column_scale
        report.values = program.unpack(x)
        objective = float(np.real(program.evaluate(program.objective, x))[0])
        sign = -1.0 if program.sense == "max" else 1.0
        const = float(np.real(program.objective.const[0]))
        report.objective = objective
        if sol.get("primal objective") is not None:
            report.primal_objective = sign * float(sol["primal objective"]) * data["c_scale"] + const
        if sol.get("dual objective") is not None:
            report.dual_objective = sign * float(sol["dual objective"]) * data["c_scale"] + const
    logger.debug(
        f"Program {program.name}: {status.value} after {report.iterations} iterations "
        f"(gap {report.gap}, restarted {restarted})"
    )
    return report


def check_solution(program: ConicProgram, report: SolveReport) -> ResidualSummary:
    """Recompute every constraint residual from the reported variable values"""
    x = program.pack(report.values)
    scales = {id(b.constraint): b.scale for b in program._blocks()}
    entries = []
    for constraint in program.constraints:
        value = program.evaluate(constraint.expr, x)
        if constraint.kind == "ge":
            violation = max(0.0, -float(np.min(value.real)))
        elif constraint.kind == "eq":
            violation = float(np.max(np.abs(value.real)))
        elif constraint.kind == "psd":
            violation = max(0.0, -float(np.linalg.eigvalsh(hermitize(value))[0]))
        else:
            v = value.real
            violation = max(0.0, float(np.linalg.norm(v[1:]) - v[0]))
        entries.append(ConstraintResidual(
            name=constraint.name,
            kind=constraint.kind,
            violation=violation,
            scaled=violation / scales[id(constraint)],
        ))
    return ResidualSummary(entries=entries)
