"""Canned verification suites behind the gradcheck and oracle-check commands.

The gradient suite drives every primitive, both recurrent cells, both
attention paths, the consistency loss, and the fully composed stage-two loss
through central finite differences. The oracle suite exercises the
hand-worked composed-attention example and the conditional-independence
identity on random factorized joint tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionLayer, attend
from .cells import GRUParams, LSTMParams, gru_step, lstm_step
from .cycle import (check_conditional_independence, cycle_loss, cycle_loss_graph,
                    factorized_joint, indirect_attention, record_from_joint,
                    toy_alignment_record)
from .data import FeatureGrid, TripleRecord, Vocabulary
from .errors import ConfigError
from .gradcheck import GradCheckResult, check_gradients
from .models import ImageCaptioner, ModelBundle, init_state
from .tensor import (Parameter, Tensor, add, add_n, concat, dropout,
                     embedding_lookup, log_softmax, matmul, mean_rows, mul, pick,
                     scale, sigmoid, softmax, sqrt, stack_rows, sub, sum_all, tanh)
from .training import TrainConfig, nll_loss, stage2_loss_graph, unroll_captioner

PRESETS = {
    "tiny": dict(hidden=4, embed=4, attn=4, proj=4, regions=3, feature_dim=3,
                 vocab=8, seq=3),
    "small": dict(hidden=8, embed=8, attn=8, proj=8, regions=6, feature_dim=5,
                  vocab=12, seq=5),
}

GRAD_TOL = 1e-3


def _p(rng, shape, name):
    return Parameter(rng.uniform(-0.8, 0.8, size=shape), name)


def _primitive_cases(rng: np.random.Generator):
    """One scalar-valued graph per primitive op, each exercised away from any
    non-smooth point."""
    a = _p(rng, (3, 4), "a")
    b = _p(rng, (4, 2), "b")
    v = _p(rng, (4,), "v")
    w = _p(rng, (4,), "w")
    m = _p(rng, (3, 4), "m")
    table = _p(rng, (5, 3), "table")
    pos = Parameter(rng.uniform(0.5, 1.5, size=(4,)), "pos")

    def seeded_dropout():
        local = np.random.default_rng(123)
        return sum_all(dropout(v, 0.5, local))

    return [
        ("matmul", lambda: sum_all(matmul(a, b)), {"a": a, "b": b}),
        ("add", lambda: sum_all(add(v, w)), {"v": v, "w": w}),
        ("add-broadcast", lambda: sum_all(add(m, v)), {"m": m, "v": v}),
        ("sub", lambda: sum_all(sub(v, w)), {"v": v, "w": w}),
        ("mul", lambda: sum_all(mul(v, w)), {"v": v, "w": w}),
        ("scale", lambda: sum_all(scale(v, 2.5)), {"v": v}),
        ("concat", lambda: sum_all(mul(concat([v, w]), concat([w, v]))),
         {"v": v, "w": w}),
        ("stack_rows", lambda: sum_all(mul(stack_rows([v, w, v]),
                                           stack_rows([w, v, w]))),
         {"v": v, "w": w}),
        ("softmax", lambda: pick(softmax(v), 1), {"v": v}),
        ("softmax-rows", lambda: sum_all(mul(softmax(m, axis=-1), m)), {"m": m}),
        ("log_softmax", lambda: pick(log_softmax(v), 2), {"v": v}),
        ("tanh", lambda: sum_all(mul(tanh(v), w)), {"v": v, "w": w}),
        ("sigmoid", lambda: sum_all(mul(sigmoid(v), w)), {"v": v, "w": w}),
        ("embedding-lookup", lambda: sum_all(embedding_lookup(table, [0, 2, 2, 4])),
         {"table": table}),
        ("dropout", seeded_dropout, {"v": v}),
        ("sum-mean-sqrt", lambda: sqrt(sum_all(mul(mean_rows(m), pos))),
         {"m": m, "pos": pos}),
        ("pick", lambda: pick(mul(v, w), 3), {"v": v, "w": w}),
        ("add_n", lambda: sum_all(add_n([v, w, v])), {"v": v, "w": w}),
    ]


def _make_triple(rng: np.random.Generator, p: dict) -> TripleRecord:
    grid = FeatureGrid(rng.standard_normal((p["regions"], p["feature_dim"])))
    en = [1] + [int(x) for x in rng.integers(4, p["vocab"], size=p["seq"])] + [2]
    de = [1] + [int(x) for x in rng.integers(4, p["vocab"], size=p["seq"])] + [2]
    return TripleRecord(image_id="chk0", features=grid,
                        en_ids=tuple(en), de_ids=tuple(de))


def gradient_suite(preset: str = "tiny", seed: int = 0) -> list[GradCheckResult]:
    """Run every gradient check at the given preset; full coverage of each
    parameter for the unit graphs, sampled coverage for the composed loss."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown gradcheck preset {preset!r}; "
                          f"choose from {sorted(PRESETS)}")
    p = PRESETS[preset]
    rng = np.random.default_rng(seed)
    results = []

    for name, build, params in _primitive_cases(rng):
        results.append(check_gradients(f"primitive/{name}", build, params))

    lstm = LSTMParams(rng, p["embed"], p["hidden"], "lstm")
    x = Parameter(rng.standard_normal(p["embed"]), "x")
    h0 = Parameter(rng.standard_normal(p["hidden"]), "h0")
    c0 = Parameter(rng.standard_normal(p["hidden"]), "c0")

    def lstm_loss():
        h, c = lstm_step(lstm, x, h0, c0)
        return sum_all(add(h, c))

    lstm_params = dict(lstm.named(), x=x, h0=h0, c0=c0)
    results.append(check_gradients("cell/lstm", lstm_loss, lstm_params))

    gru = GRUParams(rng, p["embed"], p["hidden"], "gru")

    def gru_loss():
        return sum_all(gru_step(gru, x, h0))

    results.append(check_gradients("cell/gru", gru_loss,
                                   dict(gru.named(), x=x, h0=h0)))

    layer = AttentionLayer(rng, key_dim=p["proj"], query_dim=p["hidden"],
                           attn_dim=p["attn"], prefix="attn")
    keys = Parameter(rng.standard_normal((p["regions"], p["proj"])), "keys")
    query = Parameter(rng.standard_normal(p["hidden"]), "query")
    mix = Parameter(rng.standard_normal(p["proj"]), "mix")

    def attend_loss():
        out = attend(layer, keys, query)
        return add(pick(out.weights, 0), sum_all(mul(out.context, mix)))

    results.append(check_gradients(
        "attention/attend", attend_loss,
        dict(layer.named(), keys=keys, query=query, mix=mix)))

    w0 = Parameter(rng.standard_normal((p["proj"], p["hidden"])), "w0")
    b0 = Parameter(rng.standard_normal(p["hidden"]), "b0")
    rows = Parameter(rng.standard_normal((p["regions"], p["proj"])), "rows")

    def init_loss():
        return sum_all(init_state(rows, w0, b0))

    results.append(check_gradients("models/init_state", init_loss,
                                   {"w0": w0, "b0": b0, "rows": rows}))

    a_de = Parameter(rng.random((3, p["regions"])), "a_de")
    b_mat = Parameter(rng.random((3, 4)), "b_mat")
    a_en = Parameter(rng.random((4, p["regions"])), "a_en")

    def cyc_loss():
        return cycle_loss_graph(a_de, b_mat, a_en)

    def cyc_loss_sq():
        return cycle_loss_graph(a_de, b_mat, a_en, squared=True)

    cyc_params = {"a_de": a_de, "b_mat": b_mat, "a_en": a_en}
    results.append(check_gradients("cycle/frobenius", cyc_loss, cyc_params))
    results.append(check_gradients("cycle/squared", cyc_loss_sq, cyc_params))

    cfg = TrainConfig(proj_dim=p["proj"], embed_dim=p["embed"],
                      hidden_dim=p["hidden"], attn_dim=p["attn"], seed=seed)
    triple = _make_triple(rng, p)
    captioner = ImageCaptioner(cfg.dims(p["feature_dim"], p["vocab"]), seed)

    def captioner_loss():
        keys_t = captioner.project(triple.features)
        logps, region_rows = unroll_captioner(captioner, keys_t, triple.en_ids)
        loss, _ = nll_loss(logps, triple.en_ids[1:])
        return add(loss, sum_all(stack_rows(region_rows)))

    results.append(check_gradients("models/captioner-nll", captioner_loss,
                                   captioner.named_parameters()))

    bundle = ModelBundle(cfg.dims(p["feature_dim"], p["vocab"], p["vocab"]),
                         seed, captioner=captioner)
    results.append(check_gradients(
        "training/stage2-composed",
        lambda: stage2_loss_graph(bundle, triple, cycle_weight=1.0),
        bundle.named_parameters()))
    return results


@dataclass
class OracleSummary:
    """Outcome of the composed-attention and chain-identity verifications."""

    toy_indirect_hund_r2: float
    toy_direct_hund_r2: float
    identity_trials: int
    identity_max_discrepancy: float
    perturbed_flagged: bool
    perturbed_discrepancy: float
    factorized_cycle_loss: float

    @property
    def ok(self) -> bool:
        return (abs(self.toy_indirect_hund_r2 - 0.75) < 1e-12
                and self.identity_max_discrepancy < 1e-12
                and self.perturbed_flagged
                and self.factorized_cycle_loss < 1e-12)

    def render(self) -> str:
        return "\n".join([
            f"toy record: composed attention of 'hund' on region 2 = "
            f"{self.toy_indirect_hund_r2:.12f} (direct {self.toy_direct_hund_r2})",
            f"chain identity over {self.identity_trials} factorized joints: "
            f"max discrepancy {self.identity_max_discrepancy:.3e}",
            f"perturbed non-factorized joint flagged: {self.perturbed_flagged} "
            f"(discrepancy {self.perturbed_discrepancy:.3e})",
            f"cycle loss of a factorized record: {self.factorized_cycle_loss:.3e}",
            f"overall: {'ok' if self.ok else 'FAILED'}",
        ]) + "\n"


def perturb_joint(joint: np.ndarray, rng: np.random.Generator,
                  strength: float = 0.25) -> np.ndarray:
    """Break conditional independence by mixing in random mass, renormalized."""
    noise = rng.random(joint.shape)
    mixed = (1.0 - strength) * joint + strength * noise / noise.sum()
    return mixed / mixed.sum()


def oracle_suite(seed: int = 0, trials: int = 100) -> OracleSummary:
    toy = toy_alignment_record()
    composed = indirect_attention(toy)

    rng = np.random.default_rng(seed)
    worst = 0.0
    last_joint = None
    for _ in range(trials):
        nx = int(rng.integers(2, 7))
        ny = int(rng.integers(2, 6))
        nz = int(rng.integers(2, 5))
        joint = factorized_joint(rng, nx, ny, nz)
        report = check_conditional_independence(joint)
        worst = max(worst, report.max_discrepancy)
        last_joint = joint

    perturbed = check_conditional_independence(perturb_joint(last_joint, rng),
                                               tol=1e-9)
    fact_record = record_from_joint(factorized_joint(rng, 5, 4, 3))
    return OracleSummary(
        toy_indirect_hund_r2=float(composed[0, 1]),
        toy_direct_hund_r2=float(toy.de_to_regions[0, 1]),
        identity_trials=trials,
        identity_max_discrepancy=worst,
        perturbed_flagged=not perturbed.consistent,
        perturbed_discrepancy=perturbed.max_discrepancy,
        factorized_cycle_loss=cycle_loss(fact_record),
    )
