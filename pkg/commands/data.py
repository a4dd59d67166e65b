from commands.common import corpus_root, logger
from commands.router import CommandRouter, arg
from synth.corpus import generate_corpus

# Router definition
router = CommandRouter(tags=["data"])


@router.command(
    "gen-data",
    help="Render the synthetic multi-stain corpus",
    arguments=[
        arg("--corpus", help="Corpus directory (default: <out>/corpus)"),
        arg("--cue-style", choices=["sector", "speckle"], help="Override corpus.cue_style (speckle = transfer task)"),
    ],
)
def gen_data(args, config):
    """
    Writes train/test/reference PNGs, manifest.jsonl and corpus_config.json.
    """
    corpus_cfg = config.corpus
    if args.cue_style:
        corpus_cfg = corpus_cfg.model_copy(update={"cue_style": args.cue_style})
    root = corpus_root(args)
    manifest = generate_corpus(corpus_cfg, out_dir=root)
    logger.info(f"{len(manifest.records)} records, corpus seed {manifest.corpus_seed}")
    return 0
