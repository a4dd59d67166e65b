from nets.classifier import (
    ClassifierParams,
    build_classifier,
    classifier_forward,
    count_parameters,
    cross_stain_attention,
)
from nets.generator import (
    DiscriminatorParams,
    GeneratorParams,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generator_forward,
    receptive_window,
)
from nets.losses import cross_entropy, cycle_loss, focal_loss, inverse_frequency_alpha, lsgan_losses
from nets.params import ParamSet
