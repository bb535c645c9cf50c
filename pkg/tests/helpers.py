"""Central finite-difference gradient checks shared by the test modules."""

import re

import numpy as np

from trafficattack import autodiff as ad
from trafficattack import dataset as ds
from trafficattack.autodiff import Tape, Tensor

H = 1e-5

# filled by the acceptance tests, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def numeric_gradient(f, arrays: list[np.ndarray], h: float = H) -> list[np.ndarray]:
    """Central differences of scalar ``f(*arrays)`` w.r.t. every entry of every array."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(*arrays)
            flat[i] = orig - h
            down = f(*arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def check_gradients(build, arrays: list[np.ndarray], h: float = H) -> float:
    """Worst relative error between tape gradients and central differences.

    ``build(*tensors)`` returns a scalar Tensor; it is evaluated on the tape
    for the analytic gradient and without a tape for the numeric one.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*leaves)
    grads = ad.backward(loss, tape)
    analytic = [grads.get(t, np.zeros_like(t.data)) for t in leaves]
    numeric = numeric_gradient(lambda *xs: build(*[Tensor(x) for x in xs]).item(), [a.copy() for a in arrays], h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def weighted_sum(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar projection of ``out`` onto fixed random weights."""
    return ad.sum_(ad.multiply(out, Tensor(rng.normal(size=out.shape))))


def set_params(model, values: dict[str, np.ndarray]) -> None:
    for name, arr in values.items():
        model.params[name].data = arr


def randomize_biases(model, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Zero-initialised biases can put a relu input exactly on its kink; move off it."""
    for name, p in model.params.items():
        if re.search(r"_b\d*$", name):
            p.data = scale * rng.normal(size=p.data.shape)


def model_gradient_error(model, x: np.ndarray, rng: np.random.Generator) -> float:
    """Gradient check of a projected forward pass w.r.t. the input and every parameter."""
    names = list(model.params)
    originals = dict(model.params)
    probe = None

    def build(xt, *ps):
        nonlocal probe
        for name, p in zip(names, ps):
            model.params[name] = p
        out = model.forward(xt)
        if probe is None:
            probe = Tensor(rng.normal(size=out.shape))
        return ad.sum_(ad.multiply(out, probe))

    try:
        return check_gradients(build, [x.copy()] + [originals[n].data.copy() for n in names])
    finally:
        model.params.update(originals)


def _away_from_zero(rng, shape):
    return rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


# op kind -> (random inputs, expression through op_forward); relu and sqrt
# inputs are kept away from their kinks
OP_CASES = {
    "matmul": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))],
               lambda a, b: ad.op_forward("matmul", a, b)),
    "add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))],
            lambda a, b: ad.op_forward("add", a, b)),
    "subtract": (lambda r: [r.normal(size=(3, 1)), r.normal(size=(3, 4))],
                 lambda a, b: ad.op_forward("subtract", a, b)),
    "multiply": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))],
                 lambda a, b: ad.op_forward("multiply", a, b)),
    "scale": (lambda r: [r.normal(size=(4,))], lambda a: ad.op_forward("scale", a, -1.7)),
    "sigmoid": (lambda r: [r.normal(size=(3, 4)) * 2], lambda a: ad.op_forward("sigmoid", a)),
    "tanh": (lambda r: [r.normal(size=(3, 4))], lambda a: ad.op_forward("tanh", a)),
    "relu": (lambda r: [_away_from_zero(r, (3, 4))], lambda a: ad.op_forward("relu", a)),
    "concat": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))],
               lambda a, b: ad.op_forward("concat", a, b, axis=-1)),
    "slice": (lambda r: [r.normal(size=(3, 5))], lambda a: ad.op_forward("slice", a, (slice(None), slice(1, 4)))),
    "reshape": (lambda r: [r.normal(size=(2, 6))], lambda a: ad.op_forward("reshape", a, (3, 4))),
    "transpose": (lambda r: [r.normal(size=(2, 3, 4))], lambda a: ad.op_forward("transpose", a)),
    "mean": (lambda r: [r.normal(size=(2, 3, 4))], lambda a: ad.op_forward("mean", a, axis=(0, 2))),
    "sum": (lambda r: [r.normal(size=(2, 3, 4))], lambda a: ad.op_forward("sum", a, axis=1)),
    "square": (lambda r: [r.normal(size=(3, 4))], lambda a: ad.op_forward("square", a)),
    "sqrt": (lambda r: [r.uniform(0.3, 2.0, size=(3, 4))], lambda a: ad.op_forward("sqrt", a)),
    "softmax": (lambda r: [r.normal(size=(3, 4))], lambda a: ad.op_forward("softmax", a, axis=-1)),
    "conv1d": (lambda r: [r.normal(size=(2, 6, 3)), r.normal(size=(3, 3, 4))],
               lambda x, w: ad.op_forward("conv1d", x, w)),
}


def op_gradient_error(kind: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    make, expr = OP_CASES[kind]
    arrays = make(rng)
    probe = None

    def build(*ts):
        nonlocal probe
        out = expr(*ts)
        if probe is None:
            probe = Tensor(rng.normal(size=out.shape))
        return ad.sum_(ad.multiply(out, probe))

    return check_gradients(build, arrays)


START = np.datetime64("2018-01-01T00", "h")


def network(points):
    pts = np.asarray(points, dtype=np.float64)
    return ds.SensorNetwork(tuple(f"s{i}" for i in range(len(pts))), pts)


def windows(x, y):
    return ds.WindowedDataset(x, y, START + np.arange(len(x)))


def gradient_descent_lr(x: np.ndarray, y: np.ndarray, steps: int = 3000) -> np.ndarray:
    """Per-sensor least squares by plain gradient descent through the autodiff engine."""
    s, t, n = x.shape
    preds = np.zeros_like(y)
    for j in range(n):
        design = np.concatenate([x[:, :, j], np.ones((s, 1))], axis=1)
        lipschitz = 2 * np.linalg.eigvalsh(design.T @ design / s).max()
        w = Tensor(np.zeros((t + 1, t)), requires_grad=True)
        for _ in range(steps):
            with Tape() as tape:
                loss = ad.mean(ad.sum_(ad.square(Tensor(design) @ w - Tensor(y[:, :, j])), axis=1))
            w.data = w.data - ad.backward(loss, tape)[w] / lipschitz
        preds[:, :, j] = design @ w.data
    return preds
