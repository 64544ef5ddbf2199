"""Central finite-difference checking of reverse-mode gradients.

The numeric side only ever calls the forward function, so it stays
independent of the backward implementation it audits. Comparisons are
reported as max|analytic - numeric| / max(max|numeric|, floor) per
checked tensor.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from pointar.exceptions import NumericError
from pointar.nncore.tensor import ParameterSet, Tensor, backward

__all__ = ["finite_difference_grad", "max_relative_error", "gradcheck", "GradCheckResult"]

DEFAULT_H = 1e-6
DEFAULT_TOL = 1e-4
_REL_FLOOR = 1e-8


def finite_difference_grad(f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """d f / d x by central differences, perturbing one element at a time.

    ``f`` must read the live ``x`` buffer on every call.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(numeric))), _REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric))) / scale


class GradCheckResult:
    def __init__(self, name: str, errors: dict[str, float], tol: float):
        self.name = name
        self.errors = errors
        self.tol = tol

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __repr__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"GradCheckResult({self.name}: max_rel_err={self.max_error:.3e} [{status}])"


def gradcheck(
    name: str,
    forward: Callable[[], Tensor],
    wrt: Sequence[tuple[str, Tensor]] | ParameterSet,
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
    raise_on_fail: bool = False,
    corrupt: bool = False,
) -> GradCheckResult:
    """Compare reverse-mode gradients of ``forward()`` against central
    finite differences for every tensor in ``wrt``.

    ``forward`` must rebuild the graph from the live tensor buffers each
    call. ``corrupt`` deliberately biases the analytic gradients; it exists
    as a negative control for the reporting pipeline.
    """
    if isinstance(wrt, ParameterSet):
        targets = list(wrt.items())
    else:
        targets = list(wrt)

    loss = forward()
    for _, t in targets:
        t.grad = None
    backward(loss)
    analytic = {}
    for tensor_name, t in targets:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        analytic[tensor_name] = np.array(g, dtype=np.float64, copy=True)
        if corrupt:
            analytic[tensor_name] += 1e-2

    def scalar_eval() -> float:
        return float(forward().data)

    errors = {}
    for tensor_name, t in targets:
        numeric = finite_difference_grad(scalar_eval, t.data, h=h)
        errors[tensor_name] = max_relative_error(analytic[tensor_name], numeric)

    result = GradCheckResult(name, errors, tol)
    if raise_on_fail and not result.passed:
        worst = max(result.errors, key=result.errors.get)
        raise NumericError(
            f"gradient check {name!r} failed: {worst} rel err "
            f"{result.errors[worst]:.3e} > {tol:.1e}"
        )
    return result


def _generic_point(ps, factor: float, seed: int) -> None:
    """Move parameters to a generic point before finite differencing.

    Production init (sigma = 0.02 weights, zero biases) parks the loss on
    subgradient kinks: features cluster within ~1e-4 of max-pool ties,
    and the all-zero row every normalized patch carries (its own center)
    lands ReLU pre-activations exactly at zero. Scaling the weights and
    jittering the biases moves every selection comfortably away from its
    tie, where the derivative is classical.
    """
    rng = np.random.default_rng(seed)
    for name, p in ps.items():
        if name.endswith(".w"):
            p.data *= factor
        elif name.endswith(".b"):
            p.data += rng.normal(0.0, 0.3, size=p.data.shape)


def standard_suite(corrupt: str | None = None, tol: float = DEFAULT_TOL):
    """Gradient checks for every differentiable primitive plus the
    end-to-end generation loss on a two-patch toy model.

    ``corrupt`` names one case whose analytic gradients get deliberately
    biased; it exists as a negative control for failure reporting.
    """
    import pointar.loss as loss_mod
    import pointar.model as model_mod
    import pointar.sequencer as seq_mod
    from pointar.nncore import layers as L
    from pointar.nncore import tensor as T

    cases: list[tuple[str, Callable[[], tuple]]] = []

    def case(name):
        def register(builder):
            cases.append((name, builder))
            return builder

        return register

    @case("matmul")
    def _matmul():
        rng = np.random.default_rng(11)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        return lambda: (T.matmul(a, b) ** 2.0).sum(), [("a", a), ("b", b)]

    @case("layernorm")
    def _layernorm():
        rng = np.random.default_rng(12)
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        g = Tensor(rng.normal(size=6) + 1.0, requires_grad=True)
        b = Tensor(rng.normal(size=6), requires_grad=True)
        return lambda: (T.layer_norm(x, g, b) ** 2.0).sum(), [("x", x), ("g", g), ("b", b)]

    @case("softmax")
    def _softmax():
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        w = rng.normal(size=(4, 5))
        return lambda: (T.softmax(x) * w).sum(), [("x", x)]

    @case("gelu")
    def _gelu():
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        return lambda: (T.gelu(x) ** 2.0).sum(), [("x", x)]

    @case("relu")
    def _relu():
        rng = np.random.default_rng(15)
        vals = rng.normal(size=(3, 5))
        vals[np.abs(vals) < 0.1] += 0.2  # keep clear of the kink at zero
        x = Tensor(vals, requires_grad=True)
        return lambda: (T.relu(x) ** 2.0).sum(), [("x", x)]

    @case("maxpool")
    def _maxpool():
        rng = np.random.default_rng(16)
        x = Tensor(rng.normal(size=(3, 6, 4)), requires_grad=True)
        return lambda: (x.max(axis=-2) ** 2.0).sum(), [("x", x)]

    @case("attention")
    def _attention():
        rng = np.random.default_rng(17)
        ps = ParameterSet()
        L.init_attention_params(ps, "attn", 12, rng)
        _generic_point(ps, 10.0, seed=101)
        x = Tensor(rng.normal(size=(4, 12)), requires_grad=True)
        mask = np.tril(np.ones((4, 4)))

        def fwd():
            return (L.masked_self_attention(x, mask, 2, ps, "attn") ** 2.0).sum()

        return fwd, [("x", x)] + list(ps.items())

    @case("transformer_block")
    def _block():
        rng = np.random.default_rng(18)
        ps = ParameterSet()
        L.init_block_params(ps, "blk", 12, rng)
        _generic_point(ps, 10.0, seed=101)
        x = Tensor(rng.normal(size=(4, 12)), requires_grad=True)
        pos = rng.normal(size=(4, 12))
        mask = np.tril(np.ones((4, 4)))

        def fwd():
            return (L.transformer_block(x, pos, mask, 2, ps, "blk") ** 2.0).sum()

        return fwd, [("x", x)] + list(ps.items())

    @case("patch_embedding")
    def _embed():
        rng = np.random.default_rng(19)
        ps = ParameterSet()
        seq_mod.init_embed_params(ps, 12, rng)
        _generic_point(ps, 25.0, seed=102)
        patches = np.random.default_rng(20).normal(size=(2, 5, 3))

        def fwd():
            return (seq_mod.embed_patches(patches, ps) ** 2.0).sum()

        return fwd, list(ps.items())

    @case("chamfer_l1")
    def _chamfer1():
        rng = np.random.default_rng(21)
        a = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)) + 0.5, requires_grad=True)
        return lambda: loss_mod.chamfer(a, b, 1), [("a", a), ("b", b)]

    @case("chamfer_l2")
    def _chamfer2():
        rng = np.random.default_rng(22)
        a = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)) - 0.3, requires_grad=True)
        return lambda: loss_mod.chamfer(a, b, 2), [("a", a), ("b", b)]

    @case("cross_entropy")
    def _xent():
        rng = np.random.default_rng(23)
        logits = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        labels = np.array([0, 3, 1, 4])
        return lambda: loss_mod.cross_entropy(logits, labels), [("logits", logits)]

    @case("classification_head")
    def _cls_head():
        rng = np.random.default_rng(24)
        seq_cfg = seq_mod.SequencerConfig(
            num_points=16, num_patches=3, points_per_patch=4, channels=12
        )
        mdl_cfg = model_mod.ModelConfig(
            channels=12, heads=2, extractor_depth=0, generator_depth=0,
            points_per_patch=4, num_classes=3,
        )
        ps = model_mod.init_model_params(mdl_cfg, seq_cfg, rng)
        _generic_point(ps, 10.0, seed=101)
        latents = Tensor(rng.normal(size=(3, 12)), requires_grad=True)
        labels = np.array([2])

        def fwd():
            logits = model_mod.classification_head(latents, ps)
            return loss_mod.cross_entropy(logits, labels)

        return fwd, [("latents", latents)] + list(ps.subset("cls.").items())

    @case("full_generation_loss")
    def _full():
        rng = np.random.default_rng(25)
        seq_cfg = seq_mod.SequencerConfig(
            num_points=16, num_patches=2, points_per_patch=4, channels=12
        )
        mdl_cfg = model_mod.ModelConfig(
            channels=12, heads=2, extractor_depth=1, generator_depth=1,
            points_per_patch=4, num_classes=3,
        )
        ps = model_mod.init_model_params(mdl_cfg, seq_cfg, rng)
        _generic_point(ps, 20.0, seed=103)
        cloud = np.random.default_rng(26).normal(size=(16, 3))
        _, centers, patches = seq_mod.sequence_geometry(cloud, seq_cfg)
        ape = seq_mod.absolute_positional_encoding(centers, 12)
        rdp = seq_mod.relative_direction_prompts(centers, 12)
        mask = model_mod.causal_mask(2)

        def fwd():
            tokens = seq_mod.embed_patches(patches, ps)
            latents = model_mod.extractor_forward(tokens, ape, mask, ps, mdl_cfg)
            generated = model_mod.generator_forward(latents[:-1], rdp, ps, mdl_cfg)
            predicted = model_mod.predict_patches(generated, ps, 4)
            lg, _, _ = loss_mod.generation_loss(predicted, patches[1:])
            return lg

        return fwd, list(ps.items())

    results = []
    for name, builder in cases:
        forward, wrt = builder()
        results.append(gradcheck(name, forward, wrt, tol=tol, corrupt=(corrupt == name)))
    return results
