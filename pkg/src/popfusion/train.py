"""Per-fold training loop with early stopping, metric evaluation, the
cross-validation driver, and the ablation/sweep runners."""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .alignment import (PretrainConfig, apply_rfe, fit_rfe,
                        pretrain_reconstructor)
from .config import TrainConfig, parse_informativeness, parse_synthetic_attributes
from .data import (Cohort, FoldPlan, generate_synthetic_cohort, make_fold_plan,
                   stratified_subsample)
from .encoder import EncoderConfig, gtunet_forward, init_encoder_params
from .errors import TrainingError, ValidationError
from .fusion import contribution_weights, fuse_modalities, init_fusion_params
from .graph import (adjacency_from_affinity, default_sigma, edge_dropout_mask,
                    similarity_matrix)
from .objective import (classification_head, graph_regularization,
                        init_head_params, total_objective)
from .report import FoldResult, RunReport
from .reward import (AlphaWeights, affinity_from_alpha, build_reward_tables,
                     q_from_gains, relu_gain_sums, reward_loss, score_stack)


# ---- metrics --------------------------------------------------------------


def _rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC as the normalized Mann-Whitney rank statistic with midranks."""
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_metrics(logits: np.ndarray, labels: np.ndarray, test_idx) -> dict:
    """ACC/SEN/SPE from the confusion matrix at argmax, AUC from class-1
    scores; positive class is label 1. Single-class test sets yield NaN for
    the undefined rate with a warning."""
    test_idx = np.asarray(test_idx)
    if len(test_idx) == 0:
        raise ValidationError("test index set is empty")
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)[test_idx]
    pred = logits[test_idx].argmax(axis=1)
    scores = logits[test_idx, 1] - logits[test_idx, 0]
    tp = int(((pred == 1) & (y == 1)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    acc = (tp + tn) / len(y)
    sen = tp / (tp + fn) if (tp + fn) else float("nan")
    spe = tn / (tn + fp) if (tn + fp) else float("nan")
    if np.isnan(sen) or np.isnan(spe):
        warnings.warn("single-class test set: SEN or SPE undefined, reported as NaN")
    return {"acc": float(acc), "sen": float(sen), "spe": float(spe),
            "auc": _rank_auc(scores, y)}


# ---- per-fold model state --------------------------------------------------


@dataclass
class FoldModel:
    config: TrainConfig
    use_img: bool
    use_non: bool
    x_img: np.ndarray | None
    x_non: np.ndarray | None
    sim: np.ndarray
    sigma: float
    score_stack: np.ndarray | None   # (v, N, N) fixed pairwise scores
    gain_sums: np.ndarray | None
    affinity_fixed: np.ndarray | None  # external / neutral affinity
    enc_img_cfg: EncoderConfig | None
    enc_non_cfg: EncoderConfig | None
    params_img: object
    params_non: object
    fusion: object
    head: object
    alpha: AlphaWeights | None
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    rfe_mask: np.ndarray | None = None
    tables: object = None

    def parameters(self):
        out = []
        if self.use_img:
            out.extend(self.params_img.parameters())
        if self.use_non:
            out.extend(self.params_non.parameters())
        if self.use_img and self.use_non:
            out.extend(self.fusion.parameters())
        out.extend(self.head.parameters())
        if self.alpha is not None:
            out.append(self.alpha.logits)
        return out

    def snapshot(self):
        return [p.data.copy() for p in self.parameters()]

    def restore(self, snap):
        for p, data in zip(self.parameters(), snap):
            p.data = data.copy()


def _sub_cohort(cohort: Cohort, idx: np.ndarray) -> Cohort:
    return Cohort(records=[cohort.records[i] for i in idx], schema=cohort.schema,
                  n_roi=cohort.n_roi)


def prepare_reconstructor(cohort: Cohort, config: TrainConfig, train_idx=None):
    """Pretrain (and freeze) the configured tabular reconstructor; uses every
    row unless vae_restrict_to_train limits it to the fold's train split."""
    pheno = cohort.phenotype_matrix()
    rows = pheno if train_idx is None else pheno[train_idx]
    pre = PretrainConfig(learning_rate=config.vae_learning_rate,
                         weight_decay=config.vae_weight_decay,
                         epochs=config.vae_epochs, seed=config.seed)
    return pretrain_reconstructor(rows, config.embed_dim, pre,
                                  kind=config.reconstructor,
                                  cohort_id=f"cohort-n{cohort.n_subjects}")


def build_fold_model(cohort: Cohort, plan: FoldPlan, fold: int, config: TrainConfig,
                     reconstructor=None, external_affinity=None) -> FoldModel:
    """Fit fold-local alignment (RFE on the train split), encode phenotypes,
    build the reward tables with this fold's test mask, and initialize all
    parameter groups."""
    train_idx, val_idx, test_idx = plan.folds[fold]
    labels = cohort.labels()
    use_img = config.modality in ("both", "imaging")
    use_non = config.modality in ("both", "non-imaging")

    x_img = x_non = None
    rfe_mask = None
    if use_img:
        raw = cohort.imaging_matrix()
        reducer = fit_rfe(raw[train_idx], labels[train_idx], config.embed_dim,
                          step=config.rfe_step, seed=config.seed + fold)
        x_img = apply_rfe(reducer, raw)
        rfe_mask = reducer.selected_mask
    if use_non:
        model = reconstructor
        if model is None:
            rows = train_idx if config.vae_restrict_to_train else None
            model = prepare_reconstructor(cohort, config, rows)
        x_non = model.encode(cohort.phenotype_matrix())

    parts = [m for m in (x_img, x_non) if m is not None]
    x_cat = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
    sigma = config.sigma if config.sigma > 0 else default_sigma(x_cat, train_idx)
    sim = similarity_matrix(x_cat, sigma)

    stack = gains = tables = None
    alpha = None
    affinity_fixed = None
    if external_affinity is not None:
        affinity_fixed = np.asarray(external_affinity, dtype=np.float64)
        if affinity_fixed.shape != sim.shape:
            raise ValidationError("external affinity matrix has the wrong shape")
    elif use_non:
        beta = config.beta(cohort.schema.n_attributes)
        tables = build_reward_tables(cohort, plan.split_codes(fold))
        stack = score_stack(tables, beta)
        gains = relu_gain_sums(tables, beta)
        alpha = AlphaWeights.uniform(cohort.schema.n_attributes)
    else:
        affinity_fixed = np.ones_like(sim)  # imaging-only: neutral affinity

    rng = np.random.default_rng([config.seed, fold, 101])
    d_h = config.d_hidden
    enc_img_cfg = enc_non_cfg = None
    params_img = params_non = None
    if use_img:
        enc_img_cfg = EncoderConfig(depth=config.depth_imaging, ratio=config.pool_ratio,
                                    d_hidden=d_h, n_heads=config.n_heads,
                                    architecture=config.architecture,
                                    dropout=config.dropout)
        params_img = init_encoder_params(x_img.shape[1], enc_img_cfg, rng)
    if use_non:
        enc_non_cfg = EncoderConfig(depth=config.depth_non_imaging, ratio=config.pool_ratio,
                                    d_hidden=d_h, n_heads=config.n_heads,
                                    architecture=config.architecture,
                                    dropout=config.dropout)
        params_non = init_encoder_params(x_non.shape[1], enc_non_cfg, rng)
    fusion = init_fusion_params(d_h, rng)
    head = init_head_params(d_h, rng)

    return FoldModel(config=config, use_img=use_img, use_non=use_non,
                     x_img=x_img, x_non=x_non, sim=sim, sigma=sigma,
                     score_stack=stack, gain_sums=gains,
                     affinity_fixed=affinity_fixed,
                     enc_img_cfg=enc_img_cfg, enc_non_cfg=enc_non_cfg,
                     params_img=params_img, params_non=params_non,
                     fusion=fusion, head=head, alpha=alpha, labels=labels,
                     train_idx=train_idx, val_idx=val_idx, test_idx=test_idx,
                     rfe_mask=rfe_mask, tables=tables)


def forward_pass(model: FoldModel, *, training: bool, rng=None, edge_mask=None):
    """One full pass: affinity -> adjacency -> both channels -> fusion ->
    losses. Returns (total loss tensor, breakdown, logits ndarray, extras)."""
    cfg = model.config
    n = model.sim.shape[0]

    if model.alpha is not None:
        alpha_t = model.alpha.tensor()
        affinity = affinity_from_alpha(alpha_t, model.score_stack)
        l_r = reward_loss(q_from_gains(alpha_t, model.gain_sums))
    else:
        affinity = ad.Tensor(model.affinity_fixed)
        l_r = 0.0

    adjacency = adjacency_from_affinity(model.sim, affinity)
    if cfg.graph_threshold > 0:
        keep = (adjacency.data >= cfg.graph_threshold) | np.eye(n, dtype=bool)
        adjacency = adjacency * ad.Tensor(keep.astype(np.float64))
    if training and edge_mask is not None:
        adjacency = adjacency * ad.Tensor(edge_mask)

    z_img = z_non = None
    if model.use_img:
        z_img = gtunet_forward(model.x_img, adjacency, model.enc_img_cfg,
                               model.params_img, training=training, rng=rng)
    if model.use_non:
        z_non = gtunet_forward(model.x_non, adjacency, model.enc_non_cfg,
                               model.params_non, training=training, rng=rng)

    if model.use_img and model.use_non:
        emb = fuse_modalities(z_img, z_non, model.fusion)
        omega_img, omega_non = contribution_weights(emb.tau_img, emb.tau_non,
                                                    emb.tau_shared)
        z_joint = emb.z_joint
    else:
        z_joint = z_img if model.use_img else z_non
        omega_img, omega_non = (1.0, 0.0) if model.use_img else (0.0, 1.0)

    logits, l_ce = classification_head(z_joint, model.head, model.train_idx,
                                       model.labels)
    l_deg = None
    if model.use_img:
        l_smh_img, l_deg = graph_regularization(z_img, adjacency)
    else:
        l_smh_img = 0.0
    if model.use_non:
        l_smh_non, l_deg_non = graph_regularization(z_non, adjacency)
        if l_deg is None:
            l_deg = l_deg_non
    else:
        l_smh_non = 0.0

    total, breakdown = total_objective(l_ce, l_smh_img, l_smh_non, l_deg, l_r,
                                       omega_img, omega_non, cfg.lambda_smooth,
                                       cfg.mu_degree, cfg.eta_reward)
    extras = {"z_img": z_img, "z_non": z_non, "z_joint": z_joint,
              "adjacency": adjacency}
    return total, breakdown, logits.data.copy(), extras


def _eval_logits(model: FoldModel, mc_rng=None) -> np.ndarray:
    """Clean-graph inference logits; optional Monte-Carlo averaging over
    edge-dropout samples when configured."""
    cfg = model.config
    samples = cfg.mc_inference_samples
    with ad.no_grad():
        if samples <= 0 or mc_rng is None:
            _, _, logits, _ = forward_pass(model, training=False)
            return logits
        acc = None
        n = model.sim.shape[0]
        for _ in range(samples):
            mask = edge_dropout_mask(n, cfg.edge_dropout, mc_rng)
            _, _, logits, _ = forward_pass(model, training=True, edge_mask=mask)
            acc = logits if acc is None else acc + logits
        return acc / samples


def train_fold(cohort: Cohort, plan: FoldPlan, fold: int, config: TrainConfig,
               reconstructor=None, external_affinity=None) -> FoldResult:
    """Train one fold end to end: per epoch rebuild the affinity from the
    current attribute weights, apply edge dropout, step every parameter
    group jointly, and early-stop on validation accuracy."""
    started = time.perf_counter()
    model = build_fold_model(cohort, plan, fold, config, reconstructor,
                             external_affinity)
    opt = ad.Adam(model.parameters(), lr=config.learning_rate,
                  weight_decay=config.weight_decay)
    n = model.sim.shape[0]

    best_val = -np.inf
    best_val_ce = np.inf
    best_epoch = -1
    best_snap = model.snapshot()
    trace = []
    epochs_run = 0
    for epoch in range(config.max_epochs):
        rng = np.random.default_rng([config.seed, fold, epoch, 17])
        edge_mask = (edge_dropout_mask(n, config.edge_dropout, rng)
                     if config.edge_dropout > 0 else None)
        total, breakdown, _, _ = forward_pass(model, training=True, rng=rng,
                                              edge_mask=edge_mask)
        opt.zero_grad()
        total.backward()
        opt.step()
        epochs_run += 1

        logits = _eval_logits(model)
        val_pred = logits[model.val_idx].argmax(axis=1)
        val_acc = float((val_pred == model.labels[model.val_idx]).mean())
        val_ce = _masked_ce(logits, model.labels, model.val_idx)
        trace.append((epoch, breakdown, val_acc))
        # accuracy decides; validation cross-entropy breaks the many ties a
        # small validation set produces
        if val_acc > best_val or (val_acc == best_val and val_ce < best_val_ce):
            best_val = val_acc
            best_val_ce = val_ce
            best_epoch = epoch
            best_snap = model.snapshot()
        elif epoch - best_epoch >= config.patience:
            break

    model.restore(best_snap)
    mc_rng = np.random.default_rng([config.seed, fold, 999])
    logits = _eval_logits(model, mc_rng=mc_rng)
    metrics = evaluate_metrics(logits, model.labels, model.test_idx)

    with ad.no_grad():
        _, final_breakdown, _, extras = forward_pass(model, training=False)
    alpha_values = model.alpha.values().tolist() if model.alpha is not None else []
    scores = _softmax_rows(logits)[:, 1]
    result = FoldResult(
        fold=fold,
        metrics=metrics,
        omega_img=final_breakdown.omega_img,
        omega_non=final_breakdown.omega_non,
        alpha=alpha_values,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        wall_clock=time.perf_counter() - started,
        val_acc=best_val if best_val > -np.inf else float("nan"),
        loss_trace=[(e, b.as_row(), v) for e, b, v in trace],
        predictions=[(cohort.records[i].subject_id, float(scores[i]),
                      int(logits[i].argmax()), int(model.labels[i]))
                     for i in model.test_idx],
        embeddings={k: (v.data.copy() if isinstance(v, ad.Tensor) else None)
                    for k, v in extras.items() if k.startswith("z_")},
        adjacency=(extras["adjacency"].data.copy() if config.export_graph
                   else None),
    )
    return result, model


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _masked_ce(logits: np.ndarray, labels: np.ndarray, idx: np.ndarray) -> float:
    probs = _softmax_rows(logits[idx])
    picked = probs[np.arange(len(idx)), labels[idx]]
    return float(-np.log(np.maximum(picked, 1e-12)).mean())


# ---- cross-validation driver ------------------------------------------------


def run_cross_validation(cohort: Cohort, config: TrainConfig,
                         external_affinity=None, reconstructor=None) -> RunReport:
    """Train every fold of the stratified plan and aggregate mean (std)
    metrics. Honors the modality/architecture/reconstructor selectors and
    the stratified sampling ratio. A pre-trained frozen reconstructor may be
    supplied to reuse one pretrained on another cohort."""
    config.validate()
    if config.sampling_ratio < 1.0:
        idx = stratified_subsample(cohort.labels(), config.sampling_ratio, config.seed)
        cohort = _sub_cohort(cohort, idx)
    labels = cohort.labels()
    plan = make_fold_plan(labels, config.n_folds, config.seed)

    uses_non = config.modality in ("both", "non-imaging")
    if reconstructor is not None:
        if not uses_non:
            reconstructor = None
        elif reconstructor.d_latent != config.embed_dim:
            raise ValidationError(
                f"checkpoint latent width {reconstructor.d_latent} != embed_dim "
                f"{config.embed_dim}")
        elif reconstructor.d_in != cohort.schema.n_attributes:
            raise ValidationError(
                f"checkpoint expects {reconstructor.d_in} attributes, cohort has "
                f"{cohort.schema.n_attributes}")
    elif uses_non and not config.vae_restrict_to_train:
        reconstructor = prepare_reconstructor(cohort, config)

    report = RunReport.empty(config, n_subjects=cohort.n_subjects)
    if external_affinity is not None and np.asarray(external_affinity).shape \
            != (cohort.n_subjects, cohort.n_subjects):
        raise ValidationError("external affinity must be N x N for the cohort")

    def one(fold):
        result, _ = train_fold(cohort, plan, fold, config, reconstructor,
                               external_affinity)
        return result

    try:
        if config.parallel_folds:
            with ThreadPoolExecutor() as pool:
                results = list(pool.map(one, range(config.n_folds)))
        else:
            results = [one(fold) for fold in range(config.n_folds)]
    except TrainingError as exc:
        report.status = "failed"
        report.error = str(exc)
        return report

    for result in results:
        report.add_fold(result)
    report.finalize()
    if reconstructor is not None:
        report.reconstructor_trace = list(reconstructor.loss_trace)
    return report


# ---- ablations and sweeps ----------------------------------------------------


def ablate_architecture(cohort, config):
    from .encoder import ARCHITECTURES
    return [(arch, run_cross_validation(cohort, config.replace(architecture=arch)))
            for arch in ARCHITECTURES]


def ablate_reconstructor(cohort, config):
    from .alignment import RECONSTRUCTOR_KINDS
    return [(kind, run_cross_validation(cohort, config.replace(reconstructor=kind)))
            for kind in RECONSTRUCTOR_KINDS]


def ablate_modality(cohort, config):
    return [(mode, run_cross_validation(cohort, config.replace(modality=mode)))
            for mode in ("both", "imaging", "non-imaging")]


def ablate_graph(cohort, config, external: dict | None = None):
    """Compare the native reward-based affinity against fixed external
    affinity matrices (plug-in hook for other construction methods)."""
    runs = [("reward", run_cross_validation(cohort, config))]
    n = cohort.n_subjects
    uniform = np.full((n, n), 0.5)
    runs.append(("uniform", run_cross_validation(cohort, config,
                                                 external_affinity=uniform)))
    for name, matrix in (external or {}).items():
        runs.append((name, run_cross_validation(cohort, config,
                                                external_affinity=matrix)))
    return runs


EMBED_DIM_GRID = tuple(range(250, 2501, 250))
POOL_RATIO_GRID = tuple(round(0.4 + 0.1 * i, 1) for i in range(7))
SAMPLING_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)


def sweep(cohort, config, kind: str, grid=None):
    if kind == "embed-dim":
        grid = tuple(grid) if grid is not None else EMBED_DIM_GRID
        return [(str(d), run_cross_validation(cohort, config.replace(embed_dim=int(d))))
                for d in grid]
    if kind == "pool-ratio":
        grid = tuple(grid) if grid is not None else POOL_RATIO_GRID
        return [(str(r), run_cross_validation(cohort, config.replace(pool_ratio=float(r))))
                for r in grid]
    if kind == "sampling":
        grid = tuple(grid) if grid is not None else SAMPLING_GRID
        return [(str(r), run_cross_validation(cohort,
                                              config.replace(sampling_ratio=float(r))))
                for r in grid]
    raise ValidationError(f"unknown sweep kind {kind!r}")


def synthetic_cohort_from_config(config: TrainConfig) -> Cohort:
    attrs = parse_synthetic_attributes(config.synth_attributes)
    info = parse_informativeness(config.synth_informativeness, len(attrs))
    return generate_synthetic_cohort(
        config.synth_n_subjects, config.synth_n_roi, attrs, info, config.seed,
        n_informative_features=config.synth_informative_features,
        effect_size=config.synth_effect_size, noise_scale=config.synth_noise_scale)
