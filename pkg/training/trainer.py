"""
Both optimization stages.

Stage 1 pretrains, for each target stain m, a generator pair (stain 0 -> m and
m -> 0) with two patch discriminators on unpaired reference sets: least-squares
adversarial losses plus L1 cycle consistency, Adam. Only the forward
generators survive.

Stage 2 trains the classifier on the labeled stain-0 patches through the
generated stains: focal loss, SGD with momentum, step-decayed learning rate.
Generators stay frozen for the first epochs and are fine-tuned jointly
afterwards unless joint training is switched off.
"""
import json
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from engine.tensor import Tape, Tensor, backward
from evaluation.metrics import balanced_accuracy, confusion_matrix
from middleware import stage_timer
from models.config import LossConfig, ModelConfig, Stage1Config, TrainConfig
from models.errors import ConfigError, NonFiniteError, ShapeError, TrainingDivergedError
from models.reports import EpochRecord, PretrainEpoch, PretrainHistory, TrainHistory
from nets.classifier import ClassifierParams, build_classifier, classifier_forward
from nets.generator import (
    GeneratorParams,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generator_forward,
    to_model_range,
)
from nets.losses import cycle_loss, focal_loss, generator_adversarial_loss, inverse_frequency_alpha, lsgan_losses
from storage.checkpoint import save_checkpoint
from synth.augment import augment
from training.optim import OptimizerState, adam_step, lr_schedule, sgd_momentum_step

logger = logging.getLogger("g2c-trainer")


def derive_seed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint32)[0])


@dataclass
class G2CModel:
    """A classifier and the generators feeding its extra branches, keyed by target stain"""
    classifier: ClassifierParams
    generators: Dict[int, GeneratorParams] = field(default_factory=dict)
    class_names: List[str] = field(default_factory=list)
    # stage-2 SGD buffers after the last update; saved with the model
    optimizer_state: Optional[OptimizerState] = None

    @property
    def target_stains(self):
        return sorted(self.generators)

    @property
    def M(self):
        return len(self.generators)

    def parts(self):
        parts = {"classifier": self.classifier}
        parts.update({f"generator.{m}": self.generators[m] for m in self.target_stains})
        return parts

    def generator_hash(self):
        if not self.generators:
            return None
        h = hashlib.md5()
        for m in self.target_stains:
            h.update(self.generators[m].digest().encode())
        return h.hexdigest()

    def forward(self, images01, classifier_weights=None, generator_weights=None):
        """Logits for a [N,3,H,W] batch of stain-0 images in [0,1]"""
        generator_weights = generator_weights or {}
        x = Tensor(to_model_range(np.asarray(images01, dtype=np.float32)))
        branches = [x] + [
            generator_forward(self.generators[m], x, generator_weights.get(m)) for m in self.target_stains
        ]
        return classifier_forward(self.classifier, branches, classifier_weights)

    def logits(self, images01, batch_size=32):
        outputs = [
            self.forward(images01[start:start + batch_size]).data
            for start in range(0, len(images01), batch_size)
        ]
        return np.concatenate(outputs, axis=0)

    def predict(self, images01, batch_size=32):
        return self.logits(images01, batch_size).argmax(axis=1)


def build_model(model_cfg: ModelConfig, num_classes, seed, target_stains=(), attention_enabled=True,
                generators=None, class_names=None):
    """
    Assembles a G2CModel; generators not supplied are freshly initialized

    Args:
        generators (dict, optional): target stain -> GeneratorParams (pretrained)
    """
    generators = dict(generators or {})
    for m in target_stains:
        if m not in generators:
            generators[m] = build_generator(
                model_cfg.generator_base, model_cfg.image_size, derive_seed(seed, m, 0),
                model_cfg.residual_blocks, source_stain=0, target_stain=m,
            )
    generators = {m: generators[m] for m in target_stains}
    classifier = build_classifier(
        num_stains=len(target_stains) + 1,
        num_classes=num_classes,
        channels_base=model_cfg.classifier_base,
        attention_enabled=attention_enabled,
        seed=derive_seed(seed, 99),
        expansion=model_cfg.expansion,
        reduction=model_cfg.reduction,
        pool_layout=model_cfg.pool_layout,
        stem=model_cfg.stem,
    )
    return G2CModel(classifier=classifier, generators=generators, class_names=list(class_names or []))


def _gradients(tape, bound, prefix=""):
    return {f"{prefix}{name}": tape.grad(t).data for name, t in bound.items()}


def _live(params, prefix=""):
    return {f"{prefix}{name}": array for name, array in params.arrays.items()}


def _check_loss(value, where):
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value} {where}")


def _append_jsonl(path, record):
    if path:
        with open(path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record.model_dump(), sort_keys=True) + "\n")


# ---------------------------------------------------------------- stage 1

def _cyclegan_step(nets, x, y, cfg: Stage1Config, states):
    g, f, d_y, d_x = nets

    tape = Tape()
    wg, wf = g.bind(tape), f.bind(tape)
    fake_y = generator_forward(g, x, wg)
    fake_x = generator_forward(f, y, wf)
    adversarial = (
        generator_adversarial_loss(discriminator_forward(d_y, fake_y))
        + generator_adversarial_loss(discriminator_forward(d_x, fake_x))
    )
    cycle = (
        cycle_loss(x, generator_forward(f, fake_y, wf), cfg.lambda_cyc)
        + cycle_loss(y, generator_forward(g, fake_x, wg), cfg.lambda_cyc)
    )
    total = adversarial + cycle
    backward(tape, total)
    grads = {**_gradients(tape, wg, "g/"), **_gradients(tape, wf, "f/")}
    adam_step({**_live(g, "g/"), **_live(f, "f/")}, grads, states["gen"], cfg.adam_lr, cfg.beta1, cfg.beta2)

    tape = Tape()
    wdy, wdx = d_y.bind(tape), d_x.bind(tape)
    loss_y, _ = lsgan_losses(discriminator_forward(d_y, y, wdy), discriminator_forward(d_y, fake_y.detach(), wdy))
    loss_x, _ = lsgan_losses(discriminator_forward(d_x, x, wdx), discriminator_forward(d_x, fake_x.detach(), wdx))
    d_loss = (loss_y + loss_x) * 0.5
    backward(tape, d_loss)
    grads = {**_gradients(tape, wdy, "dy/"), **_gradients(tape, wdx, "dx/")}
    adam_step({**_live(d_y, "dy/"), **_live(d_x, "dx/")}, grads, states["disc"], cfg.adam_lr, cfg.beta1, cfg.beta2)

    return adversarial.item(), cycle.item(), d_loss.item()


def pretrain_pair(source_images, target_images, target_stain, model_cfg: ModelConfig, cfg: Stage1Config,
                  seed=0, history=None, metrics_path=None):
    """
    Trains one generator pair on unpaired stain-0 / stain-m reference patches

    Returns:
        GeneratorParams: The forward generator g_m; the reverse generator and
        both discriminators are discarded
    """
    for stain, images in ((0, source_images), (target_stain, target_images)):
        if len(images) < 2:
            raise ConfigError(f"reference set for stain {stain} has {len(images)} patches; need at least 2")
    history = history if history is not None else PretrainHistory()
    size, base = model_cfg.image_size, model_cfg.generator_base
    g = build_generator(base, size, derive_seed(seed, target_stain, 0), model_cfg.residual_blocks, 0, target_stain)
    f = build_generator(base, size, derive_seed(seed, target_stain, 1), model_cfg.residual_blocks, target_stain, 0)
    d_y, d_x = (
        build_discriminator(model_cfg.discriminator_base, size, derive_seed(seed, target_stain, k),
                            model_cfg.discriminator_layers)
        for k in (2, 3)
    )
    states = {"gen": OptimizerState("adam"), "disc": OptimizerState("adam")}
    rng = np.random.default_rng(derive_seed(seed, target_stain, 4))

    xs = to_model_range(np.asarray(source_images, dtype=np.float32))
    ys = to_model_range(np.asarray(target_images, dtype=np.float32))
    bs = cfg.batch_size
    steps = int(np.ceil(max(len(xs), len(ys)) / bs))

    logger.info(f"Pretraining generator 0->{target_stain}: {cfg.epochs} epochs x {steps} steps")
    for epoch in range(cfg.epochs):
        with stage_timer(f"pretrain stain {target_stain} epoch {epoch}"):
            order_x, order_y = rng.permutation(len(xs)), rng.permutation(len(ys))
            sums = np.zeros(3)
            for step in range(steps):
                window = step * bs + np.arange(bs)
                x = Tensor(xs[order_x[window % len(xs)]])
                y = Tensor(ys[order_y[window % len(ys)]])
                try:
                    losses = _cyclegan_step((g, f, d_y, d_x), x, y, cfg, states)
                except NonFiniteError as error:
                    raise TrainingDivergedError(f"stain {target_stain} epoch {epoch} step {step}: {error}") from error
                _check_loss(sum(losses), f"(stain {target_stain}, epoch {epoch}, step {step})")
                sums += losses
        mean = sums / steps
        record = PretrainEpoch(target_stain=target_stain, epoch=epoch, g_adv=mean[0], cycle=mean[1], d_loss=mean[2])
        history.epochs.append(record)
        _append_jsonl(metrics_path, record)
        logger.info(
            f"stain {target_stain} epoch {epoch}: g_adv={mean[0]:.4f} cycle={mean[1]:.4f} d={mean[2]:.4f}"
        )
    return g


def pretrain_generators(reference_sets, model_cfg: ModelConfig, cfg: Stage1Config, target_stains, seed=0,
                        metrics_path=None):
    """
    Stage 1 for every target stain

    Args:
        reference_sets (dict): stain id -> [N,3,H,W] images in [0,1]; must include stain 0
        target_stains (list): Stains m to translate into

    Returns:
        tuple: ({m: GeneratorParams}, PretrainHistory)
    """
    if 0 not in reference_sets:
        raise ConfigError("reference sets must include the source stain 0")
    history = PretrainHistory()
    generators = {}
    for m in target_stains:
        if m not in reference_sets:
            raise ConfigError(f"no reference set for target stain {m}")
        generators[m] = pretrain_pair(
            reference_sets[0], reference_sets[m], m, model_cfg, cfg, seed=seed,
            history=history, metrics_path=metrics_path,
        )
    return generators, history


# ---------------------------------------------------------------- stage 2

def _balanced_accuracy_of(model, patches):
    if patches is None or len(patches) == 0:
        return None
    confusion = confusion_matrix(patches.labels, model.predict(patches.images), len(patches.class_names))
    if (confusion.sum(axis=1) == 0).any():
        return None
    return balanced_accuracy(confusion)


def finetune_joint(model: G2CModel, train, cfg: TrainConfig, loss_cfg: Optional[LossConfig] = None, test=None,
                   metrics_path=None):
    """
    Stage 2: trains the classifier through the generated stains

    Generators are frozen for the first freeze_generator_epochs epochs and, when
    cfg.joint is false, for the whole run. Frozen parameters are bound as
    constants, so nothing is recorded or updated for them.

    Args:
        model (G2CModel): Generators for cfg.target_stains plus a classifier
        train (PatchSet): Labeled stain-0 training patches
        cfg (TrainConfig): Schedule and switches
        loss_cfg (LossConfig, optional): Focal parameters; alpha defaults to inverse frequency
        test (PatchSet, optional): Scored each epoch when eval_each_epoch is on

    Returns:
        tuple: (model, TrainHistory)
    """
    s2 = cfg.stage2
    if model.target_stains != sorted(cfg.target_stains):
        raise ConfigError(
            f"model generators cover stains {model.target_stains}, config expects {sorted(cfg.target_stains)}"
        )
    if model.classifier.num_stains != model.M + 1:
        raise ShapeError(f"classifier has {model.classifier.num_stains} branches for M={model.M}")
    k = model.classifier.num_classes
    if len(train.class_names) != k:
        raise ConfigError(f"training set has {len(train.class_names)} classes, classifier {k}")
    if len(train) == 0:
        raise ConfigError("empty training set")

    loss_cfg = loss_cfg or LossConfig()
    if loss_cfg.alpha is None:
        loss_cfg = loss_cfg.model_copy(update={"alpha": inverse_frequency_alpha(train.labels, k)})
    model.class_names = list(train.class_names)

    rng = np.random.default_rng(derive_seed(cfg.seed, 2))
    state = OptimizerState("sgd")
    history = TrainHistory()
    n = len(train)

    for epoch in range(s2.epochs):
        lr = lr_schedule(epoch, s2)
        trainable = cfg.joint and model.M > 0 and epoch >= s2.freeze_generator_epochs
        order = rng.permutation(n)
        batches = [order[i:i + s2.batch_size] for i in range(0, n, s2.batch_size)]
        losses = []
        with stage_timer(f"finetune epoch {epoch}") as timing:
            for group_start in range(0, len(batches), s2.accumulate_steps):
                group = batches[group_start:group_start + s2.accumulate_steps]
                grads = {}
                for idx in group:
                    images = train.images[idx]
                    if s2.augment:
                        images = np.stack([augment(img, rng) for img in images])
                    tape = Tape()
                    try:
                        cls_w = model.classifier.bind(tape)
                        gen_w = {m: model.generators[m].bind(tape) for m in model.target_stains} if trainable else {}
                        loss = focal_loss(model.forward(images, cls_w, gen_w), train.labels[idx], loss_cfg)
                        _check_loss(loss.item(), f"at epoch {epoch}")
                        backward(tape, loss)
                    except NonFiniteError as error:
                        raise TrainingDivergedError(f"epoch {epoch}: {error}") from error
                    losses.append(loss.item())
                    step_grads = _gradients(tape, cls_w, "classifier/")
                    for m, bound in gen_w.items():
                        step_grads.update(_gradients(tape, bound, f"generator.{m}/"))
                    for key, g in step_grads.items():
                        grads[key] = grads[key] + g if key in grads else g.copy()

                for key in grads:
                    grads[key] /= len(group)
                live = _live(model.classifier, "classifier/")
                if trainable:
                    for m in model.target_stains:
                        live.update(_live(model.generators[m], f"generator.{m}/"))
                sgd_momentum_step(live, grads, state, lr, s2.momentum)
                history.step_lrs.append(lr)

            try:
                train_bacc = _balanced_accuracy_of(model, train) if s2.eval_each_epoch else None
                test_bacc = _balanced_accuracy_of(model, test) if s2.eval_each_epoch else None
            except NonFiniteError as error:
                raise TrainingDivergedError(f"evaluation after epoch {epoch}: {error}") from error

        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            loss=float(np.mean(losses)),
            generators_trainable=trainable,
            train_balanced_accuracy=train_bacc,
            test_balanced_accuracy=test_bacc,
            generator_hash=model.generator_hash(),
            seconds=timing["seconds"],
        )
        history.epochs.append(record)
        _append_jsonl(metrics_path, record)
        logger.info(
            f"epoch {epoch}: lr={lr:g} loss={record.loss:.4f} generators={'on' if trainable else 'frozen'} "
            f"train={train_bacc} test={test_bacc}"
        )
    model.optimizer_state = state
    return model, history


def save_model(model: G2CModel, path, meta=None):
    """Checkpoints the classifier, generators and the stage-2 optimizer state"""
    state = model.optimizer_state.as_dict() if model.optimizer_state is not None else None
    meta = dict(meta or {}, class_names=model.class_names)
    return save_checkpoint(model, path, state=state, meta=meta)


def transfer_finetune(checkpoint, train, cfg: TrainConfig, model_cfg: ModelConfig, loss_cfg=None, test=None,
                      metrics_path=None):
    """
    Fine-tunes generators taken from another run's checkpoint with a fresh classifier

    Args:
        checkpoint (Checkpoint): Holds parts "generator.<m>" for cfg.target_stains
    """
    generators = restore_generators(checkpoint, cfg.target_stains, model_cfg)
    logger.info(f"Transferred generators for stains {sorted(generators)} from checkpoint")
    model = build_model(
        model_cfg, len(train.class_names), cfg.seed, cfg.target_stains,
        attention_enabled=cfg.attention_enabled, generators=generators, class_names=train.class_names,
    )
    return finetune_joint(model, train, cfg, loss_cfg, test=test, metrics_path=metrics_path)


def restore_generators(checkpoint, target_stains, model_cfg: ModelConfig):
    """Rebuilds generators from a checkpoint, rejecting architecture mismatches before any training"""
    expected = {
        "image_size": model_cfg.image_size,
        "channels_base": model_cfg.generator_base,
        "n_residual_blocks": model_cfg.residual_blocks,
    }
    return {
        m: checkpoint.restore(f"generator.{m}", expected_kind="generator", expected_spec=expected)
        for m in target_stains
    }


def load_model(checkpoint, model_cfg: ModelConfig) -> G2CModel:
    """Rebuilds a fine-tuned G2CModel saved with save_model, optimizer state included"""
    classifier = checkpoint.restore("classifier", expected_kind="classifier")
    stains = sorted(int(p.split(".", 1)[1]) for p in checkpoint.part_names() if p.startswith("generator."))
    generators = restore_generators(checkpoint, stains, model_cfg)
    if classifier.num_stains != len(stains) + 1:
        raise ShapeError(f"classifier has {classifier.num_stains} branches but checkpoint holds {len(stains)} generators")
    state = OptimizerState.from_dict(checkpoint.state) if checkpoint.state is not None else None
    return G2CModel(
        classifier=classifier,
        generators=generators,
        class_names=list(checkpoint.meta.get("class_names", [])),
        optimizer_state=state,
    )
