from synth.augment import AugmentDraw, augment
from synth.corpus import generate_corpus
from synth.stains import LatentPatch, apply_stain, render_base
