"""Bi-objective configuration search with staged constraint pruning.

NSGA-II evolves (bitwidth, batch size, learning rate, depth) genes toward
high quantized validation accuracy and low energy per inference. Each trial
walks the deployment gauntlet in order: QAT training with an early accuracy
gate, integer conversion plus cycle simulation, the latency bound, resource
feasibility on the target device, then power and energy bounds. A trial
failing a gate is pruned there; it keeps the metrics gathered so far and
never reaches later stages. Pruned trials enter selection with worst-case
objectives but are excluded from Pareto fronts.

Determinism: all evolutionary randomness comes from one generator consumed
in the main process before any evaluation, and each trial trains from a
seed derived from (study seed, trial index); results are reduced in trial
order, so `jobs` never changes the outcome.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import accel, nn, quant, reference, trainer
from .errors import ConfigError, DataError, TrainingDivergedError, VibegestError

BITS_CHOICES = (4, 6, 8)
BATCH_CHOICES = (16, 24, 32, 40, 48, 56, 64)
LR_LOG_RANGE = (-5.0, -3.0)
BLOCK_CHOICES = (1, 2, 3, 4, 5)

GATE_EPOCH_CAP = 20          # accuracy gate fires after epoch min(20, max)
MUTATION_RATE = 0.2
LR_MUTATION_DECADES = 0.3
PRUNED_ACC = 0.0             # worst-case objectives for pruned trials
PRUNED_ENERGY = 1e9

STAGES = ("trained", "simulated", "synthesized", "profiled", "complete")
GATES = ("accuracy", "latency", "resource", "hardware")


@dataclass(frozen=True)
class SearchSpace:
    bits: tuple = BITS_CHOICES
    batch_sizes: tuple = BATCH_CHOICES
    lr_log_range: tuple = LR_LOG_RANGE
    num_blocks: tuple = BLOCK_CHOICES
    arch: str = nn.ARCH_CNN

    def __post_init__(self):
        if self.arch not in (nn.ARCH_CNN, nn.ARCH_SEPCNN):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if not set(self.bits) <= set(BITS_CHOICES):
            raise ConfigError("bitwidths must come from {4, 6, 8}")
        if not set(self.batch_sizes) <= set(BATCH_CHOICES):
            raise ConfigError("batch sizes must come from 16..64 step 8")
        if not set(self.num_blocks) <= set(BLOCK_CHOICES):
            raise ConfigError("num_blocks must come from 1..5")
        lo, hi = self.lr_log_range
        if not (-5.0 <= lo < hi <= -3.0):
            raise ConfigError("lr range must sit inside [1e-5, 1e-3]")


@dataclass(frozen=True)
class ConstraintSet:
    method: str
    accuracy_min: dict = field(
        default_factory=lambda: dict(reference.ACCURACY_MIN))
    latency_max_ms: float = reference.LATENCY_MAX_MS
    power_max_mw: float = reference.POWER_MAX_MW
    energy_max_mj: float = reference.ENERGY_MAX_MJ
    device: accel.DeviceProfile = accel.XC7S25

    def __post_init__(self):
        if self.method not in ("ps", "loso", "aos"):
            raise ConfigError(f"unknown split method {self.method!r}")
        for m in ("ps", "loso", "aos"):
            for b in BITS_CHOICES:
                if (m, b) not in self.accuracy_min:
                    raise ConfigError(
                        f"accuracy_min table is missing ({m}, {b})")
        for name in ("latency_max_ms", "power_max_mw", "energy_max_mj"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    def accuracy_floor(self, bits):
        return self.accuracy_min[(self.method, bits)]


@dataclass(frozen=True)
class TrialConfig:
    arch: str
    num_blocks: int
    bits: int
    batch_size: int
    lr: float
    trial_index: int
    seed: int


@dataclass
class TrialMetrics:
    val_accuracy: float | None = None       # QAT best validation accuracy
    gate_val_accuracy: float | None = None  # best val accuracy by gate epoch
    fp32_accuracy: float | None = None
    quant_accuracy: float | None = None     # integer-path val accuracy
    cycles: int | None = None
    latency_ms: float | None = None
    resources: accel.ResourceReport | None = None
    power_mw: float | None = None
    energy_mj: float | None = None


@dataclass
class TrialResult:
    config: TrialConfig
    stage_reached: str
    metrics: TrialMetrics
    pruned_at: tuple | None = None          # (gate name, reason)
    qm: quant.QuantizedModel | None = None  # kept for complete trials

    @property
    def complete(self):
        return self.stage_reached == "complete" and self.pruned_at is None


@dataclass
class StudyContext:
    """Everything a worker needs to evaluate one configuration."""
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    constraints: ConstraintSet
    epochs_max: int = 40
    patience: int = 10
    power_model: accel.PowerModel | None = None
    cycle_params: accel.CycleParams | None = None
    ping_pong: bool = True
    calib_n: int = 64

    def __post_init__(self):
        if len(self.x_train) < 2 or len(self.x_val) < 1:
            raise DataError("dataset too small to run a study")
        if self.power_model is None:
            self.power_model = accel.default_power_model()


def trial_seed(study_seed, trial_index):
    ss = np.random.SeedSequence([int(study_seed), int(trial_index)])
    return int(ss.generate_state(1)[0])


# ======================================================================
# Staged gates
# ======================================================================


def staged_prune(trial, stage, constraints):
    """Gate check at one stage; returns None to keep or a reason string."""
    m = trial.metrics
    if stage == "accuracy":
        floor = constraints.accuracy_floor(trial.config.bits)
        acc = m.val_accuracy
        if acc is None:
            return "accuracy: no validation accuracy recorded"
        if acc < floor:
            return f"accuracy: {acc:.4f} < {floor:.2f}"
        return None
    if stage == "latency":
        if m.latency_ms is None:
            return "latency: simulation produced no latency"
        if m.latency_ms > constraints.latency_max_ms:
            return (f"latency: {m.latency_ms:.2f} ms > "
                    f"{constraints.latency_max_ms:.0f} ms")
        return None
    if stage == "resource":
        if m.resources is None:
            return "resource: no estimate available"
        r = m.resources
        if not r.feasible:
            worst = max(("lut", r.lut_pct), ("bram", r.bram_pct),
                        ("dsp", r.dsp_pct), key=lambda kv: kv[1])
            return f"resource: {worst[0]} {worst[1]:.1f}% > 100%"
        return None
    if stage == "hardware":
        if m.power_mw is None or m.energy_mj is None:
            return "hardware: profiling failed"
        if m.power_mw > constraints.power_max_mw:
            return (f"hardware: {m.power_mw:.1f} mW > "
                    f"{constraints.power_max_mw:.0f} mW")
        if m.energy_mj > constraints.energy_max_mj:
            return (f"hardware: {m.energy_mj:.3f} mJ > "
                    f"{constraints.energy_max_mj:.0f} mJ")
        return None
    raise ConfigError(f"unknown gate stage {stage!r}")


# ======================================================================
# Trial evaluation
# ======================================================================


def _model_config(config, ctx):
    n_classes = int(max(ctx.y_train.max(), ctx.y_val.max())) + 1
    return nn.ModelConfig(arch=config.arch, num_blocks=config.num_blocks,
                          input_len=ctx.x_train.shape[1],
                          input_ch=ctx.x_train.shape[2],
                          n_classes=n_classes)


def evaluate_trial(config, ctx, prune=True):
    """Run one configuration through the staged pipeline."""
    metrics = TrialMetrics()
    cons = ctx.constraints
    gate_epoch = min(GATE_EPOCH_CAP, ctx.epochs_max)
    gate = (gate_epoch, cons.accuracy_floor(config.bits)) if prune else None

    try:
        graph = nn.build_model(_model_config(config, ctx), config.seed)
    except ConfigError as exc:
        metrics.val_accuracy = 0.0
        return TrialResult(config, "trained", metrics,
                           pruned_at=("accuracy", f"invalid model: {exc}"))

    spec = trainer.TrainSpec(epochs_max=ctx.epochs_max, patience=ctx.patience,
                             batch_size=config.batch_size, lr=config.lr,
                             seed=config.seed, qat_bits=config.bits,
                             gate=gate)
    try:
        tr = trainer.train(graph, ctx.x_train, ctx.y_train, ctx.x_val,
                           ctx.y_val, spec)
    except TrainingDivergedError as exc:
        metrics.val_accuracy = 0.0
        return TrialResult(config, "trained", metrics,
                           pruned_at=("accuracy", f"diverged: {exc}"))
    metrics.val_accuracy = tr.best_val_accuracy
    metrics.gate_val_accuracy = max(
        (row["val_acc"] for row in tr.curves[:gate_epoch]), default=0.0)
    result = TrialResult(config, "trained", metrics)
    if prune:
        reason = staged_prune(result, "accuracy", cons)
        if reason is not None:
            result.pruned_at = ("accuracy", reason)
            return result

    try:
        qm = quant.quantize_model(graph, config.bits,
                                  ctx.x_train[:ctx.calib_n],
                                  observers=tr.observers)
        design = accel.compile(qm, cons.device, ping_pong=ctx.ping_pong,
                               cycle_params=ctx.cycle_params)
        metrics.cycles = accel.pipeline_cycles(design)
        metrics.latency_ms = accel.latency_ms(metrics.cycles, cons.device)
        acc, _ = trainer.evaluate(qm, ctx.x_val, ctx.y_val)
        metrics.quant_accuracy = acc
    except VibegestError as exc:
        result.pruned_at = ("latency", f"simulation failed: {exc}")
        return result
    result.stage_reached = "simulated"
    if prune:
        reason = staged_prune(result, "latency", cons)
        if reason is not None:
            result.pruned_at = ("latency", reason)
            return result

    try:
        metrics.resources = accel.estimate_resources(design)
    except VibegestError as exc:
        result.pruned_at = ("resource", f"estimation failed: {exc}")
        return result
    result.stage_reached = "synthesized"
    if prune:
        reason = staged_prune(result, "resource", cons)
        if reason is not None:
            result.pruned_at = ("resource", reason)
            return result

    try:
        metrics.power_mw = accel.estimate_power(metrics.resources,
                                                ctx.power_model)
        metrics.energy_mj = accel.energy_mj(metrics.latency_ms,
                                            metrics.power_mw)
    except VibegestError as exc:
        result.pruned_at = ("hardware", f"profiling failed: {exc}")
        return result
    result.stage_reached = "profiled"
    if prune:
        reason = staged_prune(result, "hardware", cons)
        if reason is not None:
            result.pruned_at = ("hardware", reason)
            return result

    result.stage_reached = "complete"
    result.qm = qm
    return result


# ======================================================================
# Dominance machinery
# ======================================================================


def _dominates(a, b):
    """(acc, energy): maximize the first, minimize the second."""
    return (a[0] >= b[0] and a[1] <= b[1]
            and (a[0] > b[0] or a[1] < b[1]))


def nondominated_sort(points):
    """Ranked fronts (lists of indices). O(n^2), fine at population scale."""
    n = len(points)
    dominated_by = [0] * n
    dominates_set = [[] for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if _dominates(points[i], points[j]):
                dominates_set[i].append(j)
            elif _dominates(points[j], points[i]):
                dominated_by[i] += 1
    fronts = []
    current = [i for i in range(n) if dominated_by[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in dominates_set[i]:
                dominated_by[j] -= 1
                if dominated_by[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
    return fronts


def crowding_distance(points, front):
    """Per-index crowding distance within one front."""
    dist = {i: 0.0 for i in front}
    if len(front) <= 2:
        return {i: float("inf") for i in front}
    for axis in (0, 1):
        order = sorted(front, key=lambda i: points[i][axis])
        lo, hi = points[order[0]][axis], points[order[-1]][axis]
        dist[order[0]] = dist[order[-1]] = float("inf")
        span = hi - lo
        if span == 0:
            continue
        for pos in range(1, len(order) - 1):
            gap = (points[order[pos + 1]][axis]
                   - points[order[pos - 1]][axis])
            dist[order[pos]] += gap / span
    return dist


def _rank_and_crowding(points):
    rank = {}
    crowd = {}
    for r, front in enumerate(nondominated_sort(points)):
        for i in front:
            rank[i] = r
        crowd.update(crowding_distance(points, front))
    return rank, crowd


def pareto_front(study):
    """Rank-0 complete trials under (max accuracy, min energy)."""
    complete = [t for t in study if t.complete]
    if not complete:
        warnings.warn("no complete trials; Pareto front is empty")
        return []
    points = [(t.metrics.quant_accuracy, t.metrics.energy_mj)
              for t in complete]
    front = nondominated_sort(points)[0]
    members = [complete[i] for i in front]
    return sorted(members, key=lambda t: t.config.trial_index)


def trial_objectives(trial):
    """(accuracy, energy) with worst-case placeholders for pruned trials."""
    if trial.complete:
        return (trial.metrics.quant_accuracy, trial.metrics.energy_mj)
    return (PRUNED_ACC, PRUNED_ENERGY)


# ======================================================================
# NSGA-II loop
# ======================================================================


def _sample_gene(space, rng):
    lo, hi = space.lr_log_range
    return (space.arch,
            int(rng.choice(space.num_blocks)),
            int(rng.choice(space.bits)),
            int(rng.choice(space.batch_sizes)),
            float(10.0 ** rng.uniform(lo, hi)))


def _tournament(rng, rank, crowd, n):
    a, b = int(rng.integers(n)), int(rng.integers(n))
    ka = (rank[a], -crowd[a], a)
    kb = (rank[b], -crowd[b], b)
    return a if ka <= kb else b


def _mutate(gene, space, rng):
    arch, blocks, bits, bs, lr = gene
    if rng.random() < MUTATION_RATE:
        blocks = int(rng.choice(space.num_blocks))
    if rng.random() < MUTATION_RATE:
        bits = int(rng.choice(space.bits))
    if rng.random() < MUTATION_RATE:
        bs = int(rng.choice(space.batch_sizes))
    if rng.random() < MUTATION_RATE:
        lo, hi = space.lr_log_range
        shifted = np.log10(lr) + rng.normal(0.0, LR_MUTATION_DECADES)
        lr = float(10.0 ** min(max(shifted, lo), hi))
    return (arch, blocks, bits, bs, lr)


def _offspring(parents, objectives, space, rng, count):
    rank, crowd = _rank_and_crowding(objectives)
    out = []
    n = len(parents)
    while len(out) < count:
        pa = parents[_tournament(rng, rank, crowd, n)]
        pb = parents[_tournament(rng, rank, crowd, n)]
        child = tuple(pa[g] if rng.random() < 0.5 else pb[g]
                      for g in range(len(pa)))
        out.append(_mutate(child, space, rng))
    return out


_WORKER = {}


def _init_worker(ctx, fn):
    _WORKER["ctx"] = ctx
    _WORKER["fn"] = fn


def _run_worker(config):
    return _WORKER["fn"](config, _WORKER["ctx"])


def run_study(space, constraints, ctx, n_trials, seed, population=20,
              jobs=1, evaluate_fn=None, log_path=None):
    """NSGA-II study; returns all TrialResults ordered by trial index."""
    if n_trials < population:
        raise ConfigError(
            f"n_trials ({n_trials}) must be >= population ({population})")
    fn = evaluate_fn or evaluate_trial
    rng = np.random.default_rng(seed)

    # Plan every generation's genes up front where possible; evolutionary
    # randomness is consumed strictly in the main process in trial order.
    trials = []
    genes = [_sample_gene(space, rng) for _ in range(population)]
    produced = 0
    while produced < n_trials:
        count = min(population, n_trials - produced)
        batch_genes = genes[:count]
        configs = [
            TrialConfig(arch=g[0], num_blocks=g[1], bits=g[2],
                        batch_size=g[3], lr=g[4],
                        trial_index=produced + i,
                        seed=trial_seed(seed, produced + i))
            for i, g in enumerate(batch_genes)]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs,
                                     initializer=_init_worker,
                                     initargs=(ctx, fn)) as pool:
                results = list(pool.map(_run_worker, configs))
        else:
            results = [fn(cfg, ctx) for cfg in configs]
        trials.extend(results)
        produced += count
        if produced < n_trials:
            objectives = [trial_objectives(t) for t in results]
            genes = _offspring(batch_genes, objectives, space, rng,
                               min(population, n_trials - produced))
    if log_path is not None:
        write_study_log(trials, log_path)
    return trials


def audit_pruning(study, ctx, evaluate_fn=None, n=10):
    """Force-complete pruned trials and confirm each recorded violation.

    Returns one record per audited trial; `sound` is False when the metric
    recomputed without gating no longer violates the recorded constraint."""
    fn = evaluate_fn or evaluate_trial
    cons = ctx.constraints
    pruned = [t for t in study if t.pruned_at is not None]
    records = []
    for t in pruned[:n]:
        forced = fn(t.config, ctx, prune=False)
        gate, reason = t.pruned_at
        m = forced.metrics
        if gate == "accuracy":
            value = m.gate_val_accuracy
            bound = cons.accuracy_floor(t.config.bits)
            sound = value is None or value < bound
        elif gate == "latency":
            value, bound = m.latency_ms, cons.latency_max_ms
            sound = value is None or value > bound
        elif gate == "resource":
            value = None if m.resources is None else max(
                m.resources.lut_pct, m.resources.bram_pct,
                m.resources.dsp_pct)
            bound = 100.0
            sound = value is None or value > bound
        else:
            sound = (m.power_mw is None or m.energy_mj is None
                     or m.power_mw > cons.power_max_mw
                     or m.energy_mj > cons.energy_max_mj)
            value, bound = m.power_mw, cons.power_max_mw
        records.append({"trial_index": t.config.trial_index, "gate": gate,
                        "reason": reason, "value": value, "bound": bound,
                        "sound": bool(sound)})
    return records


def fp32_twin_accuracy(config, ctx):
    """Train the same configuration without fake quantization."""
    graph = nn.build_model(_model_config(config, ctx), config.seed)
    spec = trainer.TrainSpec(epochs_max=ctx.epochs_max, patience=ctx.patience,
                             batch_size=config.batch_size, lr=config.lr,
                             seed=config.seed, qat_bits=None)
    tr = trainer.train(graph, ctx.x_train, ctx.y_train, ctx.x_val, ctx.y_val,
                       spec)
    return tr.best_val_accuracy, graph


# ======================================================================
# Study persistence
# ======================================================================


def _trial_doc(t):
    m = t.metrics
    doc = {"trial_index": t.config.trial_index,
           "config": {"arch": t.config.arch,
                      "num_blocks": t.config.num_blocks,
                      "bits": t.config.bits,
                      "batch_size": t.config.batch_size,
                      "lr": t.config.lr,
                      "seed": t.config.seed},
           "stage_reached": t.stage_reached,
           "pruned_at": list(t.pruned_at) if t.pruned_at else None,
           "metrics": {
               "val_accuracy": m.val_accuracy,
               "gate_val_accuracy": m.gate_val_accuracy,
               "fp32_accuracy": m.fp32_accuracy,
               "quant_accuracy": m.quant_accuracy,
               "cycles": m.cycles,
               "latency_ms": m.latency_ms,
               "power_mw": m.power_mw,
               "energy_mj": m.energy_mj,
               "resources": None if m.resources is None else {
                   "luts_used": m.resources.luts_used,
                   "bram_blocks_used": m.resources.bram_blocks_used,
                   "dsps_used": m.resources.dsps_used,
                   "lut_pct": m.resources.lut_pct,
                   "bram_pct": m.resources.bram_pct,
                   "dsp_pct": m.resources.dsp_pct,
                   "feasible": m.resources.feasible}}}
    return doc


def write_study_log(study, path):
    """One JSON record per trial, ordered by trial index."""
    with open(path, "w") as f:
        for t in sorted(study, key=lambda t: t.config.trial_index):
            f.write(json.dumps(_trial_doc(t), sort_keys=True) + "\n")


def write_front_csv(front, path):
    header = ("accuracy,energy_mj,latency_ms,arch,num_blocks,bits,"
              "batch_size,lr,trial_index")
    lines = [header]
    for t in front:
        m = t.metrics
        c = t.config
        # plain-float repr keeps rows parseable even for numpy scalars
        lines.append(f"{float(m.quant_accuracy)!r},{float(m.energy_mj)!r},"
                     f"{float(m.latency_ms)!r},{c.arch},{c.num_blocks},"
                     f"{c.bits},{c.batch_size},{float(c.lr)!r},"
                     f"{c.trial_index}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
