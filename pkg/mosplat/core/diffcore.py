"""
Differentiation substrate for the engine.

Every learnable quantity (Gaussian attributes, grid planes, head weights,
motion bases, frame transforms) is a float64 ``torch.nn.Parameter``. This
module adds the pieces the optimization loops need on top of torch autograd:

- ``value_and_grad``: evaluate a scalar closure and return its exact reverse-mode
  gradients, with non-finite detection that names the offending operation
- ``accumulate_grads``: micro-batch accumulation in a fixed summation order
- ``AdamW``: bias-corrected AdamW with named parameter groups and state
  surgery for pruning/densification
- ``finite_diff_check``: central-difference gradient checker
"""
import math
import re
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger
from torch.overrides import TorchFunctionMode

from .errors import NonFiniteError, ShapeMismatchError

DTYPE = torch.float64

ParamTensor = torch.nn.Parameter

_BACKWARD_NAME = re.compile(r"Function '(\w+)' returned nan")


def param_tensor(values, requires_grad: bool = True) -> ParamTensor:
    """
    Create a float64 parameter with a zero-initialized gradient.

    Args:
        values: Anything ``torch.as_tensor`` accepts
        requires_grad: Whether the optimizer should update it

    Returns:
        A fresh parameter (never aliases ``values``)
    """
    data = torch.as_tensor(values, dtype=DTYPE).detach().clone()
    param = torch.nn.Parameter(data, requires_grad=requires_grad)
    if requires_grad:
        param.grad = torch.zeros_like(data)
    return param


class _FiniteCheck(TorchFunctionMode):
    """Raise as soon as any torch operation yields a NaN/Inf."""

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        for tensor in _iter_tensors(out):
            if tensor.is_floating_point() and tensor.numel() and not bool(torch.isfinite(tensor).all()):
                raise NonFiniteError(_op_name(func))
        return out


def _iter_tensors(obj) -> Iterator[torch.Tensor]:
    if isinstance(obj, torch.Tensor):
        yield obj
    elif isinstance(obj, (tuple, list)):
        for item in obj:
            yield from _iter_tensors(item)


def _op_name(func) -> str:
    name = getattr(func, "__name__", None)
    if name is None:
        return repr(func)
    owner = getattr(func, "__qualname__", name)
    return owner


@contextmanager
def tape(check_finite: bool = True):
    """
    Scope for one reverse-mode evaluation.

    With ``check_finite`` every forward op is checked and backward runs under
    anomaly detection; any NaN/Inf is re-raised as ``NonFiniteError``.
    """
    forward_check = _FiniteCheck() if check_finite else nullcontext()
    backward_check = torch.autograd.detect_anomaly(check_nan=True) if check_finite else nullcontext()
    try:
        with forward_check, backward_check:
            yield
    except RuntimeError as e:
        match = _BACKWARD_NAME.search(str(e))
        if match:
            raise NonFiniteError(match.group(1), "during backward") from e
        raise


def value_and_grad(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    check_finite: bool = True,
) -> Tuple[float, List[Optional[torch.Tensor]]]:
    """
    Evaluate a scalar objective and its gradients.

    Args:
        f: Zero-argument closure over ``params`` returning a scalar tensor
        params: Tensors to differentiate against
        check_finite: Detect NaN/Inf in every intermediate value

    Returns:
        (value, grads) where grads[i] is None for tensors without requires_grad
    """
    params = list(params)
    targets = [p for p in params if p.requires_grad]
    with tape(check_finite):
        value = f()
        if value.numel() != 1:
            raise ShapeMismatchError("objective", (), tuple(value.shape))
        value = value.reshape(())
        if not bool(torch.isfinite(value)):
            raise NonFiniteError("objective", f"value={float(value)}")
        grads = torch.autograd.grad(value, targets, allow_unused=True) if targets else ()

    grad_iter = iter(grads)
    result: List[Optional[torch.Tensor]] = []
    for p in params:
        if not p.requires_grad:
            result.append(None)
            continue
        g = next(grad_iter)
        result.append(torch.zeros_like(p) if g is None else g.detach())
    return float(value.detach()), result


def accumulate_grads(
    fns: Sequence[Callable[[], torch.Tensor]],
    params: Sequence[torch.Tensor],
    check_finite: bool = False,
) -> List[float]:
    """
    Accumulate gradients of several micro-batch objectives into ``.grad``.

    Micro-batches are differentiated one at a time and summed in list order,
    so the reduction order is fixed.

    Returns:
        Per-micro-batch objective values
    """
    params = list(params)
    values = []
    for fn in fns:
        value, grads = value_and_grad(fn, params, check_finite=check_finite)
        values.append(value)
        for p, g in zip(params, grads):
            if g is None:
                continue
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            p.grad.add_(g)
    return values


def expon_lr(lr_init: float, lr_final: float, max_steps: int) -> Callable[[int], float]:
    """Log-linear decay from ``lr_init`` to ``lr_final`` over ``max_steps``."""

    def schedule(step: int) -> float:
        if lr_init == 0.0 and lr_final == 0.0:
            return 0.0
        frac = min(max(step / max(max_steps, 1), 0.0), 1.0)
        return math.exp(math.log(lr_init) * (1.0 - frac) + math.log(lr_final) * frac)

    return schedule


@dataclass
class AdamWState:
    """Snapshot of the optimizer state of one parameter."""
    first_moment: torch.Tensor
    second_moment: torch.Tensor
    step_count: int
    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float


@dataclass
class ParamGroup:
    """Named group of parameters sharing a learning rate."""
    name: str
    params: List[torch.Tensor]
    lr: float
    weight_decay: float = 0.0


class AdamW:
    """Bias-corrected AdamW (decoupled weight decay) over named groups."""

    def __init__(self, groups: Sequence[ParamGroup], betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.betas = betas
        self.eps = eps
        torch_groups = []
        for group in groups:
            params = [p for p in group.params if p.requires_grad]
            if not params:
                continue
            torch_groups.append({
                "name": group.name,
                "params": params,
                "lr": group.lr,
                "weight_decay": group.weight_decay,
            })
        self._empty = not torch_groups
        self.optimizer = torch.optim.AdamW(
            torch_groups or [{"params": [torch.zeros(1, dtype=DTYPE, requires_grad=True)]}],
            betas=betas, eps=eps, foreach=False,
        )
        self.zero_grad()

    @property
    def params(self) -> List[torch.Tensor]:
        if self._empty:
            return []
        return [p for group in self.optimizer.param_groups for p in group["params"]]

    def group_names(self) -> List[str]:
        return [g.get("name", "") for g in self.optimizer.param_groups] if not self._empty else []

    def set_lr(self, name: str, lr: float):
        for group in self.optimizer.param_groups:
            if group.get("name") == name:
                group["lr"] = lr

    def get_lr(self, name: str) -> float:
        for group in self.optimizer.param_groups:
            if group.get("name") == name:
                return group["lr"]
        raise KeyError(name)

    def zero_grad(self):
        for p in self.params:
            p.grad = torch.zeros_like(p)

    def step(self):
        """Apply one update from the gradients stored on the parameters."""
        for p in self.params:
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            elif p.grad.shape != p.shape:
                raise ShapeMismatchError("gradient", p.shape, p.grad.shape)
        if not self._empty:
            self.optimizer.step()
        self.zero_grad()

    def apply(self, grads: Sequence[Optional[torch.Tensor]]):
        """Install ``grads`` (aligned with ``self.params``) and step."""
        params = self.params
        if len(grads) != len(params):
            raise ShapeMismatchError("gradient list", (len(params),), (len(grads),))
        for p, g in zip(params, grads):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeMismatchError("gradient", p.shape, g.shape)
            p.grad = g.detach().clone().to(p.dtype)
        self.step()

    def state_of(self, param: torch.Tensor) -> AdamWState:
        group = self._group_of(param)
        state = self.optimizer.state.get(param, {})
        zeros = torch.zeros_like(param)
        step = state.get("step", 0)
        return AdamWState(
            first_moment=state.get("exp_avg", zeros).detach().clone(),
            second_moment=state.get("exp_avg_sq", zeros).detach().clone(),
            step_count=int(step.item() if isinstance(step, torch.Tensor) else step),
            lr=group["lr"],
            beta1=self.betas[0],
            beta2=self.betas[1],
            eps=self.eps,
            weight_decay=group["weight_decay"],
        )

    def replace(self, old: torch.Tensor, new: torch.Tensor,
                keep_index: Optional[torch.Tensor] = None, appended: int = 0):
        """
        Swap ``old`` for ``new`` keeping moments aligned row-wise.

        Args:
            old: Parameter currently registered
            new: Replacement parameter
            keep_index: Rows of ``old`` that survive (None keeps all)
            appended: Number of fresh rows appended after the kept ones
        """
        group = self._group_of(old)
        for i, p in enumerate(group["params"]):
            if p is old:
                group["params"][i] = new
        state = self.optimizer.state.pop(old, None)
        if state:
            for key in ("exp_avg", "exp_avg_sq"):
                moment = state[key]
                if keep_index is not None:
                    moment = moment[keep_index]
                if appended:
                    pad = torch.zeros((appended,) + tuple(moment.shape[1:]), dtype=moment.dtype)
                    moment = torch.cat([moment, pad], dim=0)
                if moment.shape != new.shape:
                    raise ShapeMismatchError(f"optimizer moment '{key}'", new.shape, moment.shape)
                state[key] = moment
            self.optimizer.state[new] = state
        new.grad = torch.zeros_like(new)

    def _group_of(self, param: torch.Tensor) -> dict:
        for group in self.optimizer.param_groups:
            if any(p is param for p in group["params"]):
                return group
        raise KeyError("parameter is not registered with this optimizer")


def adamw_step(optimizer: AdamW, grads: Sequence[Optional[torch.Tensor]]) -> List[torch.Tensor]:
    """Apply one AdamW update with explicit gradients and return the parameters."""
    optimizer.apply(grads)
    return optimizer.params


@dataclass
class CoordinateReport:
    """Gradient comparison for a single coordinate."""
    param_index: int
    coordinate: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class FiniteDiffReport:
    """Result of a central-difference gradient check."""
    max_rel_error: float
    tol: float
    checked: int
    worst: List[CoordinateReport] = field(default_factory=list)
    non_differentiable: List[CoordinateReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def summary(self) -> Dict[str, float]:
        return {
            "max_rel_error": self.max_rel_error,
            "checked": self.checked,
            "non_differentiable": len(self.non_differentiable),
        }


def finite_diff_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
    tol: float = 1e-3,
    atol: float = 1e-6,
    max_coords: Optional[int] = None,
    seed: int = 0,
    report_worst: int = 5,
) -> FiniteDiffReport:
    """
    Compare reverse-mode gradients against central differences.

    A coordinate whose one-sided differences disagree far beyond the
    curvature of a smooth function is reported as non-differentiable and
    excluded from the error maximum.

    Args:
        f: Deterministic zero-argument closure returning a scalar
        params: Tensors to perturb (must require grad)
        h: Step size
        tol: Relative error threshold for ``passed``
        atol: Floor of the relative-error denominator
        max_coords: Randomly subsample this many coordinates per tensor
        seed: Subsampling seed
        report_worst: Number of worst coordinates to keep

    Returns:
        FiniteDiffReport
    """
    params = list(params)
    _, grads = value_and_grad(f, params, check_finite=False)
    generator = torch.Generator().manual_seed(seed)
    entries: List[CoordinateReport] = []
    kinks: List[CoordinateReport] = []

    def evaluate() -> float:
        with torch.no_grad():
            return float(f())

    for pi, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        flat_count = p.numel()
        indices = torch.arange(flat_count)
        if max_coords is not None and flat_count > max_coords:
            indices = torch.randperm(flat_count, generator=generator)[:max_coords].sort().values
        for flat in indices.tolist():
            coord = tuple(int(c) for c in np.unravel_index(flat, tuple(p.shape))) if p.dim() else ()
            with torch.no_grad():
                original = p.data.view(-1)[flat].item()
                p.data.view(-1)[flat] = original + h
            f_plus = evaluate()
            with torch.no_grad():
                p.data.view(-1)[flat] = original - h
            f_minus = evaluate()
            with torch.no_grad():
                p.data.view(-1)[flat] = original
            f_zero = evaluate()

            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(g.reshape(-1)[flat])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)
            entry = CoordinateReport(pi, coord, analytic, numeric, rel)

            forward = (f_plus - f_zero) / h
            backward = (f_zero - f_minus) / h
            if abs(forward - backward) > 1e3 * h * max(1.0, abs(numeric)):
                kinks.append(entry)
            else:
                entries.append(entry)

    entries.sort(key=lambda e: e.rel_error, reverse=True)
    report = FiniteDiffReport(
        max_rel_error=entries[0].rel_error if entries else 0.0,
        tol=tol,
        checked=len(entries) + len(kinks),
        worst=entries[:report_worst],
        non_differentiable=kinks,
    )
    if kinks:
        logger.debug(f"Finite-difference check found {len(kinks)} non-differentiable coordinates")
    return report
