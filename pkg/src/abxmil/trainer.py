"""Joint optimization of encoder, aggregator and task head from bag labels.

The encoder stand-in is a two-layer bias-free MLP with a trailing
layer-norm; the task head is one bias-free linear to class logits; the
loss is cross-entropy with log-sum-exp stabilization. Every bag gets its
own tape: sample -> forward -> backward, per-bag gradients are averaged
in bag order, and one optimizer step is taken per batch of bags.

All randomness is derived from the run seed through fixed stream keys, and
per-bag sampling streams are keyed by (epoch, slide id), so results do not
depend on iteration order and repeated runs are bitwise identical.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .aggregators import AggregatorParams, aggregator_forward, make_aggregator
from .config import RunConfig
from .errors import DivergenceError, NumericError, ShapeError, ValidationError
from .sampling import InstanceView, mris_plan, mris_sample, regional_random_sample
from .synthdata import Dataset, Slide, with_regions
from .tensor import Graph, Tensor, layer_norm, log_sum_exp_rows, matmul, pick, relu, sub

CHECKPOINT_MAGIC = b"ABXC"
CHECKPOINT_VERSION = 1

# rng stream keys (second element after the run seed)
_STREAM_INIT = 3
_STREAM_ORDER = 4
_STREAM_BAG = 5
_STREAM_EVAL = 6


@dataclass
class EncoderParams:
    w1: Tensor
    w2: Tensor
    ln_gain: Tensor
    ln_shift: Tensor

    def named_params(self, prefix="encoder"):
        return [(f"{prefix}.w1", self.w1), (f"{prefix}.w2", self.w2),
                (f"{prefix}.ln_gain", self.ln_gain), (f"{prefix}.ln_shift", self.ln_shift)]


@dataclass
class PipelineParams:
    encoder: EncoderParams
    aggregator: AggregatorParams
    head_w: Tensor
    freeze_encoder: bool = False

    def named_params(self):
        return (self.encoder.named_params() + self.aggregator.named_params()
                + [("head.w", self.head_w)])

    def trainable_params(self):
        if not self.freeze_encoder:
            return self.named_params()
        return [(n, t) for n, t in self.named_params() if not n.startswith("encoder.")]


def make_pipeline(model_cfg: dict, raw_dim: int, n_classes: int, rng) -> PipelineParams:
    dim = int(model_cfg["dim"])
    enc = EncoderParams(
        w1=Tensor(rng.standard_normal((raw_dim, dim)) / math.sqrt(raw_dim),
                  requires_grad=True),
        w2=Tensor(rng.standard_normal((dim, dim)) / math.sqrt(dim), requires_grad=True),
        ln_gain=Tensor(np.ones((1, dim)), requires_grad=True),
        ln_shift=Tensor(np.zeros((1, dim)), requires_grad=True),
    )
    agg = make_aggregator(
        model_cfg["variant"], dim, rng,
        heads=int(model_cfg.get("heads", 1)),
        attn_hidden=int(model_cfg.get("attn_hidden", 128)),
        proj_dim=model_cfg.get("proj_dim"),
        alpha_mode=model_cfg.get("alpha_mode", "fixed-zero"),
        ffn=bool(model_cfg.get("ffn", False)),
    )
    head = Tensor(rng.standard_normal((dim, n_classes)) / math.sqrt(dim),
                  requires_grad=True)
    return PipelineParams(encoder=enc, aggregator=agg, head_w=head,
                          freeze_encoder=bool(model_cfg.get("freeze_encoder", False)))


def encoder_forward(views: Tensor, pipeline: PipelineParams) -> Tensor:
    """Two bias-free linears with relu, then layer-norm. Rows independent."""
    enc = pipeline.encoder
    if views.shape[1] != enc.w1.shape[0]:
        raise ShapeError(f"views width {views.shape[1]} != encoder input {enc.w1.shape[0]}")
    h = matmul(relu(matmul(views, enc.w1)), enc.w2)
    return layer_norm(h, enc.ln_gain, enc.ln_shift)


def cross_entropy_logits(logits: Tensor, label: int) -> Tensor:
    n_classes = logits.shape[1]
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} out of range for {n_classes} classes")
    return sub(log_sum_exp_rows(logits), pick(logits, 0, label))


def task_loss(z: Tensor, head_w: Tensor, label: int) -> Tensor:
    return cross_entropy_logits(matmul(z, head_w), label)


def pipeline_forward(pipeline: PipelineParams, views: Tensor, retain_similarity=None):
    e = encoder_forward(views, pipeline)
    z, report = aggregator_forward(e, pipeline.aggregator,
                                   retain_similarity=retain_similarity)
    return matmul(z, pipeline.head_w), z, report


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptHyper:
    kind: str = "adam"          # adam: L2 coupled into the gradient
    lr: float = 2e-4            # adamw: decoupled decay at the step
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, named):
        return cls(m={n: np.zeros_like(t.data) for n, t in named},
                   v={n: np.zeros_like(t.data) for n, t in named})


def adamw_step(named_params, grads: dict, state: AdamState, hyper: OptHyper) -> None:
    """One bias-corrected moment update, in place."""
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, tensor in named_params:
        g = grads[name]
        if g.shape != tensor.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != param {name} {tensor.data.shape}")
        if hyper.kind == "adam" and hyper.weight_decay:
            g = g + hyper.weight_decay * tensor.data
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        if hyper.kind == "adamw" and hyper.weight_decay:
            update = update + hyper.weight_decay * tensor.data
        tensor.data -= hyper.lr * update


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    epoch: int
    lr: float
    loss: float
    acc: float
    auc: float          # None when undefined for the epoch
    sparsity: float
    risk_mean: float
    alpha: float        # None for variants without the mixing scalar

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch, "lr": self.lr, "loss": self.loss, "acc": self.acc,
            "auc": self.auc, "sparsity": self.sparsity, "risk_mean": self.risk_mean,
            "alpha": self.alpha,
        })


def _probs(logit_row: np.ndarray) -> np.ndarray:
    e = np.exp(logit_row - logit_row.max())
    return e / e.sum()


def _sample_bag(slide: Slide, cfg: RunConfig, plan, rng):
    if cfg["sampling"]["strategy"] == "regional":
        return regional_random_sample(slide, int(cfg["sampling"]["regions"]),
                                      int(cfg["sampling"]["count"]), rng)
    return mris_sample(slide, plan, rng)


def _prep_slides(slides, cfg: RunConfig):
    """Regional sampling draws within a spatial grid of the configured
    size, so re-bin the stored coordinates to that grid."""
    if cfg["sampling"]["strategy"] == "regional":
        n = int(cfg["sampling"]["regions"])
        return [with_regions(s, n) for s in slides]
    return list(slides)


def _bag_metrics(report, sample, slide):
    # pooled attention is each instance's share of the bag feature (head j
    # owns 1/m of the dims), so the logged risk is the bag-level one;
    # the per-head decomposition lives in analysis.multi_head_risk
    noisy = [k for k, iv in enumerate(sample) if not slide.roles[iv.instance]]
    sparsity = analysis.sparsity_score(report.pooled)
    risk = analysis.optimization_risk(report.pooled, noisy)
    return sparsity, risk


def train(cfg: RunConfig, dataset: Dataset):
    """Full run per the config; returns (Checkpoint, [RunRecord])."""
    cfg.validate()
    seed = cfg.seed
    raw_dim, n_classes = dataset.raw_dim, dataset.n_classes
    pipeline = make_pipeline(cfg["model"], raw_dim, n_classes,
                             np.random.default_rng([seed, _STREAM_INIT]))
    trainable = pipeline.trainable_params()
    state = AdamState.for_params(trainable)
    hyper = OptHyper(kind=cfg["train"]["optimizer"], lr=float(cfg["train"]["lr"]),
                     weight_decay=float(cfg["train"]["weight_decay"]))
    plan = mris_plan(int(cfg["sampling"]["count"]), cfg.sampling_ratios())
    order_rng = np.random.default_rng([seed, _STREAM_ORDER])
    epochs = int(cfg["train"]["epochs"])
    batch_size = int(cfg["train"]["batch_size"])
    slides = _prep_slides(dataset.train, cfg)
    records = []

    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, hyper.lr)
        step_hyper = OptHyper(kind=hyper.kind, lr=lr, weight_decay=hyper.weight_decay,
                              beta1=hyper.beta1, beta2=hyper.beta2, eps=hyper.eps)
        order = order_rng.permutation(len(slides))
        losses, labels, probs, sparsities, risks = [], [], [], [], []
        for start in range(0, len(order), batch_size):
            batch = [slides[i] for i in order[start:start + batch_size]]
            grad_acc = {n: np.zeros_like(t.data) for n, t in trainable}
            for slide in batch:
                bag_rng = np.random.default_rng([seed, _STREAM_BAG, epoch, slide.slide_id])
                sample = _sample_bag(slide, cfg, plan, bag_rng)
                views = Tensor(np.stack([iv.vector for iv in sample]))
                try:
                    with Graph() as g:
                        logits, _, report = pipeline_forward(pipeline, views,
                                                             retain_similarity=False)
                        loss = cross_entropy_logits(logits, slide.label)
                        gradient_map = g.backward(loss)
                except NumericError:
                    raise DivergenceError(slide.slide_id, epoch, records)
                for name, tensor in trainable:
                    grad_acc[name] += gradient_map[tensor]
                losses.append(loss.item())
                labels.append(slide.label)
                probs.append(_probs(logits.data[0]))
                sp, rk = _bag_metrics(report, sample, slide)
                sparsities.append(sp)
                risks.append(rk)
            for name in grad_acc:
                grad_acc[name] /= len(batch)
            adamw_step(trainable, grad_acc, state, step_hyper)
        prob_arr = np.asarray(probs)
        try:
            auc = analysis.compute_metric(labels, prob_arr, "auc")
        except ValueError:
            auc = None
        records.append(RunRecord(
            epoch=epoch, lr=lr, loss=float(np.mean(losses)),
            acc=analysis.compute_metric(labels, prob_arr, "acc"), auc=auc,
            sparsity=float(np.mean(sparsities)), risk_mean=float(np.mean(risks)),
            alpha=pipeline.aggregator.alpha_value(),
        ))

    ckpt = Checkpoint(
        version=CHECKPOINT_VERSION,
        config=cfg.to_dict(),
        arrays={n: t.data.copy() for n, t in pipeline.named_params()},
        opt_m={n: a.copy() for n, a in state.m.items()},
        opt_v={n: a.copy() for n, a in state.v.items()},
        opt_t=state.t,
        epoch=epochs,
        rng_state=order_rng.bit_generator.state,
    )
    return ckpt, records


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalRecord:
    slide_id: int
    label: int
    probs: np.ndarray
    report: object
    noisy_in_bag: list


def _full_slide_views(slide: Slide, ratios, rng):
    """Every instance exactly once, scales assigned by the plan quotas."""
    counts = mris_plan(slide.n_instances, ratios).counts
    perm = rng.permutation(slide.n_instances)
    out, pos = [], 0
    for scale, count in enumerate(counts):
        for idx in perm[pos:pos + count]:
            out.append(InstanceView(int(idx), scale, slide.views[scale, idx]))
        pos += count
    return out


def evaluate(pipeline: PipelineParams, slides, cfg: RunConfig, seed=None,
             retain_similarity=None):
    """Class probabilities per slide under deterministic seeded sampling.

    The per-slide stream is keyed by slide id, so the scores do not depend
    on the order slides are passed in. Slides no larger than the sampling
    budget are evaluated on every instance exactly once.
    """
    seed = cfg.seed if seed is None else seed
    eval_samples = int(cfg["eval"]["samples"])
    ratios = cfg.sampling_ratios()
    plan = mris_plan(eval_samples, ratios)
    out = []
    for slide in _prep_slides(slides, cfg):
        rng = np.random.default_rng([seed, _STREAM_EVAL, slide.slide_id])
        if eval_samples >= slide.n_instances:
            sample = _full_slide_views(slide, ratios, rng)
        elif cfg["sampling"]["strategy"] == "regional":
            sample = regional_random_sample(slide, int(cfg["sampling"]["regions"]),
                                            eval_samples, rng)
        else:
            sample = mris_sample(slide, plan, rng)
        views = Tensor(np.stack([iv.vector for iv in sample]))
        logits, _, report = pipeline_forward(pipeline, views,
                                             retain_similarity=retain_similarity)
        noisy = [k for k, iv in enumerate(sample) if not slide.roles[iv.instance]]
        out.append(EvalRecord(slide_id=slide.slide_id, label=slide.label,
                              probs=_probs(logits.data[0]),
                              report=report, noisy_in_bag=noisy))
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    config: dict
    arrays: dict
    opt_m: dict
    opt_v: dict
    opt_t: int
    epoch: int
    rng_state: dict


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ordered = ([("param." + n, a) for n, a in ckpt.arrays.items()]
               + [("adam.m." + n, a) for n, a in ckpt.opt_m.items()]
               + [("adam.v." + n, a) for n, a in ckpt.opt_v.items()])
    meta = {
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "opt_t": ckpt.opt_t,
        "rng_state": ckpt.rng_state,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in ordered],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", ckpt.version, len(blob)))
        fh.write(blob)
        for _, a in ordered:
            fh.write(a.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"bad checkpoint magic in {path}")
    version, meta_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    meta = json.loads(raw[12:12 + meta_len].decode())
    off = 12 + meta_len
    arrays, opt_m, opt_v = {}, {}, {}
    for entry in meta["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        a = np.frombuffer(raw, "<f8", n, off).reshape(shape).copy()
        off += n * 8
        name = entry["name"]
        if name.startswith("param."):
            arrays[name[len("param."):]] = a
        elif name.startswith("adam.m."):
            opt_m[name[len("adam.m."):]] = a
        elif name.startswith("adam.v."):
            opt_v[name[len("adam.v."):]] = a
        else:
            raise ValidationError(f"unknown checkpoint array {name!r}")
    return Checkpoint(version=version, config=meta["config"], arrays=arrays,
                      opt_m=opt_m, opt_v=opt_v, opt_t=meta["opt_t"],
                      epoch=meta["epoch"], rng_state=meta["rng_state"])


def restore_pipeline(ckpt: Checkpoint) -> PipelineParams:
    """Rebuild the parameter skeleton from the config echo, then overwrite
    every array with the checkpointed values."""
    cfg = ckpt.config
    pipeline = make_pipeline(cfg["model"], int(cfg["data"]["raw_dim"]),
                             int(cfg["data"]["n_classes"]),
                             np.random.default_rng(0))
    for name, tensor in pipeline.named_params():
        if name not in ckpt.arrays:
            raise ValidationError(f"checkpoint is missing array {name!r}")
        if ckpt.arrays[name].shape != tensor.data.shape:
            raise ShapeError(f"checkpoint array {name} has shape "
                             f"{ckpt.arrays[name].shape}, expected {tensor.data.shape}")
        tensor.data[:] = ckpt.arrays[name]
    return pipeline


# ---------------------------------------------------------------------------
# pipeline gradient check
# ---------------------------------------------------------------------------

def grad_check_pipeline(pipeline: PipelineParams, views: np.ndarray, label: int,
                        step: float = 1e-5, corrupt_group: str = None) -> dict:
    """Central-difference check of every parameter group against one
    backward pass through the full pipeline. Returns {group: max rel error}.

    corrupt_group deliberately offsets one group's analytic gradient; it is
    the negative control for the checker itself.
    """
    views_t = Tensor(np.asarray(views, dtype=np.float64))

    def loss_value() -> float:
        logits, _, _ = pipeline_forward(pipeline, views_t, retain_similarity=False)
        return cross_entropy_logits(logits, label).item()

    with Graph() as g:
        logits, _, _ = pipeline_forward(pipeline, views_t, retain_similarity=False)
        gradient_map = g.backward(cross_entropy_logits(logits, label))

    errors = {}
    for name, tensor in pipeline.named_params():
        analytic = gradient_map[tensor]
        if corrupt_group == name:
            analytic = analytic + 1.0
        numeric = np.zeros_like(tensor.data)
        flat_p = tensor.data.reshape(-1)
        flat_n = numeric.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + step
            fp = loss_value()
            flat_p[i] = orig - step
            fm = loss_value()
            flat_p[i] = orig
            flat_n[i] = (fp - fm) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        errors[name] = float(np.max(np.abs(analytic - numeric) / denom))
    return errors
